// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cmath>
#include <cstdint>
#include <limits>
#include <vector>

#include "bsa/matrix.hpp"

namespace bsa {

/// Additive pre-softmax bias. Entries at or below kMaskThreshold act as -inf:
/// the key is excluded from the row's softmax entirely.
template <class Real>
inline constexpr Real kMaskThreshold = Real(-1e9);

template <class Real>
struct AttentionBias {
    Matrix<Real> values;  // empty means absent

    bool present() const { return !values.empty(); }

    /// No +inf or NaN anywhere; every row keeps at least one unmasked entry.
    void validate() const {
        for (std::size_t i = 0; i < values.rows(); ++i) {
            bool open = false;
            for (std::size_t j = 0; j < values.cols(); ++j) {
                const Real b = values(i, j);
                if (std::isnan(b) || (std::isinf(b) && b > Real(0)))
                    throw std::invalid_argument("attention bias: non-finite entry");
                if (b > kMaskThreshold<Real>) open = true;
            }
            if (!open) throw std::invalid_argument("attention bias: fully masked row");
        }
    }
};

/// Per-head projection weights. w_o fuses concatenated heads back to model
/// width and may be left empty where a caller handles fusion itself.
template <class Real>
struct ProjectionWeights {
    std::vector<Matrix<Real>> w_q, w_k, w_v;  // H matrices, each C x d_k
    Matrix<Real> w_o;                         // (H*d_k) x C, optional

    std::size_t heads() const { return w_q.size(); }
};

template <class Real>
struct HeadsQkv {
    std::vector<Matrix<Real>> q, k, v;  // H matrices, each n x d_k
};

template <class Real>
HeadsQkv<Real> project_qkv(const Matrix<Real>& x, const ProjectionWeights<Real>& w) {
    require(w.heads() >= 1, "project_qkv: no heads");
    require_shape(w.w_k.size() == w.heads() && w.w_v.size() == w.heads(),
                  "project_qkv head counts");
    HeadsQkv<Real> out;
    for (std::size_t h = 0; h < w.heads(); ++h) {
        require_shape(w.w_q[h].rows() == x.cols() && w.w_k[h].rows() == x.cols() &&
                          w.w_v[h].rows() == x.cols(),
                      "project_qkv weight rows");
        out.q.push_back(matmul(x, w.w_q[h]));
        out.k.push_back(matmul(x, w.w_k[h]));
        out.v.push_back(matmul(x, w.w_v[h]));
    }
    return out;
}

template <class Real>
struct ProjectionGrads {
    Matrix<Real> d_x;
    std::vector<Matrix<Real>> d_wq, d_wk, d_wv;
};

template <class Real>
ProjectionGrads<Real> project_qkv_vjp(const Matrix<Real>& x, const ProjectionWeights<Real>& w,
                                      const std::vector<Matrix<Real>>& d_q,
                                      const std::vector<Matrix<Real>>& d_k,
                                      const std::vector<Matrix<Real>>& d_v) {
    require_shape(d_q.size() == w.heads() && d_k.size() == w.heads() && d_v.size() == w.heads(),
                  "project_qkv_vjp head counts");
    ProjectionGrads<Real> g;
    g.d_x = Matrix<Real>(x.rows(), x.cols());
    for (std::size_t h = 0; h < w.heads(); ++h) {
        g.d_x.add_scaled(matmul_nt(d_q[h], w.w_q[h]), Real(1));
        g.d_x.add_scaled(matmul_nt(d_k[h], w.w_k[h]), Real(1));
        g.d_x.add_scaled(matmul_nt(d_v[h], w.w_v[h]), Real(1));
        g.d_wq.push_back(matmul_tn(x, d_q[h]));
        g.d_wk.push_back(matmul_tn(x, d_k[h]));
        g.d_wv.push_back(matmul_tn(x, d_v[h]));
    }
    return g;
}

/// Saved state for attend_vjp. probs holds the row-stochastic weights with
/// exact zeros at masked or invalid positions, so the backward pass needs no
/// mask replay.
template <class Real>
struct AttendWorkspace {
    Matrix<Real> q, k, v;
    Matrix<Real> probs;  // n x m
    bool has_bias = false;
};

namespace detail {

/// Streaming softmax attention over query rows: one score buffer per worker,
/// never an n x m intermediate unless probs capture is requested.
/// key_valid / query_valid are optional masks; invalid queries yield zero rows.
template <class Real>
Matrix<Real> attend_core(const Matrix<Real>& q, const Matrix<Real>& k, const Matrix<Real>& v,
                         const Matrix<Real>* bias, const std::uint8_t* key_valid,
                         const std::uint8_t* query_valid, Matrix<Real>* probs_out) {
    require_shape(q.cols() == k.cols(), "attend q/k width");
    require_shape(k.rows() == v.rows(), "attend k/v rows");
    require(q.cols() >= 1, "attend: head dim must be >= 1");
    if (bias != nullptr)
        require_shape(bias->rows() == q.rows() && bias->cols() == k.rows(), "attend bias");

    const std::size_t n = q.rows(), m = k.rows(), d = q.cols();
    const Real ninf = -std::numeric_limits<Real>::infinity();

    // reject fully-masked rows up front; workers must never throw
    std::size_t keys_open = m;
    if (key_valid != nullptr) {
        keys_open = 0;
        for (std::size_t j = 0; j < m; ++j) keys_open += key_valid[j] ? 1 : 0;
    }
    for (std::size_t i = 0; i < n; ++i) {
        if (query_valid != nullptr && !query_valid[i]) continue;
        if (keys_open == 0) throw std::invalid_argument("attend: no valid keys for a valid query");
        if (bias != nullptr) {
            bool open = false;
            for (std::size_t j = 0; j < m && !open; ++j)
                open = (key_valid == nullptr || key_valid[j]) &&
                       (*bias)(i, j) > kMaskThreshold<Real>;
            if (!open) throw std::invalid_argument("attend: fully masked row");
        }
    }

    const Real scale = Real(1) / std::sqrt(Real(d));
    Matrix<Real> out(n, v.cols());
    parallel_for(n, [&](std::size_t lo, std::size_t hi) {
        std::vector<Real> scores(m);
        for (std::size_t i = lo; i < hi; ++i) {
            Real* orow = out.row(i);
            if (query_valid != nullptr && !query_valid[i]) {
                if (probs_out != nullptr)
                    for (std::size_t j = 0; j < m; ++j) (*probs_out)(i, j) = Real(0);
                continue;  // row stays zero
            }
            Real mx = ninf;
            const Real* qrow = q.row(i);
            for (std::size_t j = 0; j < m; ++j) {
                if (key_valid != nullptr && !key_valid[j]) {
                    scores[j] = ninf;
                    continue;
                }
                Real s = dot(qrow, k.row(j), d) * scale;
                if (bias != nullptr) {
                    const Real b = (*bias)(i, j);
                    if (b <= kMaskThreshold<Real>) {
                        scores[j] = ninf;
                        continue;
                    }
                    s += b;
                }
                scores[j] = s;
                if (s > mx) mx = s;
            }
            Real z = Real(0);
            for (std::size_t j = 0; j < m; ++j) {
                if (scores[j] == ninf) {
                    scores[j] = Real(0);
                    continue;
                }
                const Real w = std::exp(scores[j] - mx);
                scores[j] = w;
                z += w;
            }
            const Real inv_z = Real(1) / z;
            for (std::size_t j = 0; j < m; ++j) {
                const Real w = scores[j] * inv_z;
                if (probs_out != nullptr) (*probs_out)(i, j) = w;
                if (w == Real(0)) continue;
                const Real* vrow = v.row(j);
                for (std::size_t c = 0; c < v.cols(); ++c) orow[c] += w * vrow[c];
            }
        }
    });
    return out;
}

}  // namespace detail

template <class Real>
Matrix<Real> attend(const Matrix<Real>& q, const Matrix<Real>& k, const Matrix<Real>& v) {
    return detail::attend_core<Real>(q, k, v, nullptr, nullptr, nullptr, nullptr);
}

template <class Real>
Matrix<Real> attend(const Matrix<Real>& q, const Matrix<Real>& k, const Matrix<Real>& v,
                    const AttentionBias<Real>& bias) {
    if (!bias.present()) return attend(q, k, v);
    bias.validate();
    return detail::attend_core<Real>(q, k, v, &bias.values, nullptr, nullptr, nullptr);
}

/// attend with saved probabilities for a later backward pass.
template <class Real>
Matrix<Real> attend(const Matrix<Real>& q, const Matrix<Real>& k, const Matrix<Real>& v,
                    const AttentionBias<Real>& bias, AttendWorkspace<Real>& ws) {
    ws.q = q;
    ws.k = k;
    ws.v = v;
    ws.probs = Matrix<Real>(q.rows(), k.rows());
    ws.has_bias = bias.present();
    if (bias.present()) bias.validate();
    return detail::attend_core<Real>(q, k, v, bias.present() ? &bias.values : nullptr, nullptr,
                                     nullptr, &ws.probs);
}

template <class Real>
struct AttendGrads {
    Matrix<Real> d_q, d_k, d_v;
    Matrix<Real> d_bias;  // empty when the forward had no bias
};

/// Exact reverse-mode derivative of attend. With P the saved weights and
/// O = P V: dV = P^T dO, dP = dO V^T, dS = P o (dP - rowsum(dP o P)),
/// dQ = dS K / sqrt(d), dK = dS^T Q / sqrt(d), dB = dS. Masked positions carry
/// P = 0 and therefore contribute nothing.
template <class Real>
AttendGrads<Real> attend_vjp(const AttendWorkspace<Real>& ws, const Matrix<Real>& grad_out) {
    require(!ws.probs.empty(), "attend_vjp: workspace not populated");
    require_shape(grad_out.rows() == ws.q.rows() && grad_out.cols() == ws.v.cols(),
                  "attend_vjp grad_out");
    require_shape(ws.probs.rows() == ws.q.rows() && ws.probs.cols() == ws.k.rows(),
                  "attend_vjp workspace");

    const std::size_t n = ws.q.rows(), m = ws.k.rows(), d = ws.q.cols();
    const Real scale = Real(1) / std::sqrt(Real(d));

    AttendGrads<Real> g;
    g.d_v = matmul_tn(ws.probs, grad_out);
    Matrix<Real> d_s = matmul_nt(grad_out, ws.v);  // dP at first
    for (std::size_t i = 0; i < n; ++i) {
        Real pinned = Real(0);
        const Real* prow = ws.probs.row(i);
        Real* srow = d_s.row(i);
        for (std::size_t j = 0; j < m; ++j) pinned += srow[j] * prow[j];
        for (std::size_t j = 0; j < m; ++j) srow[j] = prow[j] * (srow[j] - pinned);
    }
    if (ws.has_bias) g.d_bias = d_s;
    g.d_q = matmul(d_s, ws.k);
    for (auto& x : g.d_q.data()) x *= scale;
    g.d_k = matmul_tn(d_s, ws.q);
    for (auto& x : g.d_k.data()) x *= scale;
    return g;
}

inline constexpr double kRmsEps = 1e-6;

/// Row-wise RMS normalization with elementwise gain (gain is 1 x C).
template <class Real>
Matrix<Real> rmsnorm(const Matrix<Real>& x, const Matrix<Real>& gain) {
    require_shape(gain.rows() == 1 && gain.cols() == x.cols(), "rmsnorm gain");
    const std::size_t c = x.cols();
    Matrix<Real> y(x.rows(), c);
    for (std::size_t i = 0; i < x.rows(); ++i) {
        Real ms = Real(0);
        const Real* xr = x.row(i);
        for (std::size_t j = 0; j < c; ++j) ms += xr[j] * xr[j];
        const Real r = Real(1) / std::sqrt(ms / Real(c) + Real(kRmsEps));
        Real* yr = y.row(i);
        for (std::size_t j = 0; j < c; ++j) yr[j] = xr[j] * r * gain(0, j);
    }
    return y;
}

template <class Real>
struct RmsnormGrads {
    Matrix<Real> d_x;
    Matrix<Real> d_gain;  // 1 x C
};

template <class Real>
RmsnormGrads<Real> rmsnorm_vjp(const Matrix<Real>& x, const Matrix<Real>& gain,
                               const Matrix<Real>& grad_out) {
    require_shape(grad_out.rows() == x.rows() && grad_out.cols() == x.cols(), "rmsnorm_vjp");
    require_shape(gain.rows() == 1 && gain.cols() == x.cols(), "rmsnorm_vjp gain");
    const std::size_t c = x.cols();
    RmsnormGrads<Real> g;
    g.d_x = Matrix<Real>(x.rows(), c);
    g.d_gain = Matrix<Real>(1, c);
    for (std::size_t i = 0; i < x.rows(); ++i) {
        const Real* xr = x.row(i);
        const Real* dy = grad_out.row(i);
        Real ms = Real(0);
        for (std::size_t j = 0; j < c; ++j) ms += xr[j] * xr[j];
        const Real r = Real(1) / std::sqrt(ms / Real(c) + Real(kRmsEps));
        Real proj = Real(0);  // sum_j dy_j g_j x_j
        for (std::size_t j = 0; j < c; ++j) proj += dy[j] * gain(0, j) * xr[j];
        const Real r3c = r * r * r / Real(c);
        Real* dx = g.d_x.row(i);
        for (std::size_t j = 0; j < c; ++j) {
            dx[j] = r * gain(0, j) * dy[j] - xr[j] * r3c * proj;
            g.d_gain(0, j) += dy[j] * xr[j] * r;
        }
    }
    return g;
}

/// (silu(x w1) o (x w2)) w3 with silu(t) = t * sigmoid(t).
template <class Real>
Matrix<Real> swiglu(const Matrix<Real>& x, const Matrix<Real>& w1, const Matrix<Real>& w2,
                    const Matrix<Real>& w3) {
    require_shape(w1.rows() == x.cols() && w2.rows() == x.cols(), "swiglu input weights");
    require_shape(w1.cols() == w2.cols() && w3.rows() == w1.cols(), "swiglu hidden width");
    Matrix<Real> a = matmul(x, w1);
    const Matrix<Real> b = matmul(x, w2);
    for (std::size_t i = 0; i < a.size(); ++i) {
        const Real t = a.data()[i];
        const Real sig = Real(1) / (Real(1) + std::exp(-t));
        a.data()[i] = t * sig * b.data()[i];
    }
    return matmul(a, w3);
}

template <class Real>
struct SwigluGrads {
    Matrix<Real> d_x, d_w1, d_w2, d_w3;
};

template <class Real>
SwigluGrads<Real> swiglu_vjp(const Matrix<Real>& x, const Matrix<Real>& w1,
                             const Matrix<Real>& w2, const Matrix<Real>& w3,
                             const Matrix<Real>& grad_out) {
    require_shape(grad_out.rows() == x.rows() && grad_out.cols() == w3.cols(), "swiglu_vjp");
    const Matrix<Real> a = matmul(x, w1);
    const Matrix<Real> b = matmul(x, w2);
    Matrix<Real> s(a.rows(), a.cols());   // silu(a)
    Matrix<Real> h(a.rows(), a.cols());   // silu(a) o b
    for (std::size_t i = 0; i < a.size(); ++i) {
        const Real t = a.data()[i];
        const Real sig = Real(1) / (Real(1) + std::exp(-t));
        s.data()[i] = t * sig;
        h.data()[i] = t * sig * b.data()[i];
    }
    const Matrix<Real> d_h = matmul_nt(grad_out, w3);
    Matrix<Real> d_a(a.rows(), a.cols());
    Matrix<Real> d_b(a.rows(), a.cols());
    for (std::size_t i = 0; i < a.size(); ++i) {
        const Real t = a.data()[i];
        const Real sig = Real(1) / (Real(1) + std::exp(-t));
        const Real dsilu = sig * (Real(1) + t * (Real(1) - sig));
        d_b.data()[i] = d_h.data()[i] * s.data()[i];
        d_a.data()[i] = d_h.data()[i] * b.data()[i] * dsilu;
    }
    SwigluGrads<Real> g;
    g.d_w3 = matmul_tn(h, grad_out);
    g.d_w1 = matmul_tn(x, d_a);
    g.d_w2 = matmul_tn(x, d_b);
    g.d_x = matmul_nt(d_a, w1);
    g.d_x.add_scaled(matmul_nt(d_b, w2), Real(1));
    return g;
}

}  // namespace bsa
