// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "bsa/core_attn.hpp"
#include "bsa/geom.hpp"
#include "bsa/matrix.hpp"

namespace bsa {

enum class PhiKind { mean, mlp };

inline std::string to_string(PhiKind k) { return k == PhiKind::mean ? "mean" : "mlp"; }

/// All sparse-attention hyperparameters. block_len serves as compression
/// block size, compression stride, and selection block size at once.
struct BsaConfig {
    std::size_t ball_size = 256;  // m
    std::size_t block_len = 8;    // l
    std::size_t top_k = 4;        // k*
    std::size_t group_size = 8;   // g
    std::size_t heads = 4;
    std::size_t model_dim = 64;   // C
    std::size_t head_dim = 16;    // d_k
    PhiKind phi_kind = PhiKind::mean;
    bool group_compression = false;
    bool group_selection = true;
    bool ball_masking = true;

    /// Static invariants, independent of sequence length.
    void validate() const {
        require(ball_size >= 1, "config: ball_size must be >= 1");
        require(block_len >= 1, "config: block_len must be >= 1");
        require(top_k >= 1, "config: top_k must be >= 1");
        require(group_size >= 1, "config: group_size must be >= 1");
        require(heads >= 1 && model_dim >= 1 && head_dim >= 1, "config: zero dimension");
        require(ball_size % block_len == 0, "config: ball_size must be divisible by block_len");
        require(ball_size % group_size == 0, "config: ball_size must be divisible by group_size");
        // coarse score rows must tile the selection groups exactly
        if (group_selection && group_compression)
            require(group_size % block_len == 0,
                    "config: group_size must be divisible by block_len under group compression");
    }

    /// Use-time invariants for a padded sequence length.
    void validate_for(std::size_t n_padded) const {
        validate();
        require(n_padded >= 1 && n_padded % ball_size == 0,
                "config: padded length must be a positive multiple of ball_size");
        const std::size_t n_blocks = n_padded / block_len;
        require(top_k <= n_blocks, "config: top_k exceeds the number of blocks");
        if (ball_masking) {
            const std::size_t per_ball = ball_size / block_len;
            require(top_k + per_ball <= n_blocks,
                    "config: top_k exceeds candidate blocks once the own ball is masked");
        }
    }

    std::size_t n_blocks(std::size_t n_padded) const { return n_padded / block_len; }
    std::size_t n_groups(std::size_t n_padded) const { return n_padded / group_size; }
};

/// Block compressor weights. Empty matrices mean arithmetic-mean pooling.
/// The mlp kind flattens an l x d block to l*d, applies a sigmoid-gated
/// hidden layer of width 2*d, and projects back to d:
///   phi(x) = ((x wa) o sigmoid(x wb)) wo
template <class Real>
struct PhiWeights {
    Matrix<Real> wa, wb;  // (l*d) x (2*d)
    Matrix<Real> wo;      // (2*d) x d

    bool mlp() const { return !wa.empty(); }
};

template <class Real>
PhiWeights<Real> init_phi_weights(std::size_t block_len, std::size_t d, Rng& rng) {
    PhiWeights<Real> w;
    const std::size_t in = block_len * d, hidden = 2 * d;
    const double scale = 1.0 / std::sqrt(double(in));
    w.wa = random_matrix<Real>(rng, in, hidden, scale);
    w.wb = random_matrix<Real>(rng, in, hidden, scale);
    w.wo = random_matrix<Real>(rng, hidden, d, 1.0 / std::sqrt(double(hidden)));
    return w;
}

template <class Real>
struct Compressed {
    Matrix<Real> tokens;               // n_blocks x d
    std::vector<std::uint8_t> valid;   // false for all-padded blocks
};

/// Pool every length-l block of rows into one coarse row. Mean pooling
/// averages valid rows only; the mlp sees padded rows zero-filled. A block
/// with no valid rows yields a zero row flagged invalid.
template <class Real>
Compressed<Real> compress_blocks(const Matrix<Real>& t, std::size_t block_len,
                                 const PhiWeights<Real>& phi,
                                 const std::vector<std::uint8_t>& valid) {
    require(block_len >= 1, "compress_blocks: block_len must be >= 1");
    require_shape(t.rows() % block_len == 0, "compress_blocks row count");
    require_shape(valid.empty() || valid.size() == t.rows(), "compress_blocks valid length");
    const std::size_t n_blocks = t.rows() / block_len, d = t.cols();
    Compressed<Real> out;
    out.tokens = Matrix<Real>(n_blocks, d);
    out.valid.assign(n_blocks, 1);

    if (!phi.mlp()) {
        for (std::size_t b = 0; b < n_blocks; ++b) {
            std::size_t n_valid = 0;
            Real* orow = out.tokens.row(b);
            for (std::size_t r = b * block_len; r < (b + 1) * block_len; ++r) {
                if (!valid.empty() && !valid[r]) continue;
                ++n_valid;
                const Real* trow = t.row(r);
                for (std::size_t c = 0; c < d; ++c) orow[c] += trow[c];
            }
            if (n_valid == 0) {
                out.valid[b] = 0;
                continue;
            }
            const Real inv = Real(1) / Real(n_valid);
            for (std::size_t c = 0; c < d; ++c) orow[c] *= inv;
        }
        return out;
    }

    require_shape(phi.wa.rows() == block_len * d && phi.wb.rows() == block_len * d &&
                      phi.wo.cols() == d && phi.wa.cols() == phi.wb.cols() &&
                      phi.wo.rows() == phi.wa.cols(),
                  "compress_blocks phi weights");
    Matrix<Real> flat(n_blocks, block_len * d);
    for (std::size_t b = 0; b < n_blocks; ++b) {
        bool any = valid.empty();
        for (std::size_t r = b * block_len; r < (b + 1) * block_len; ++r) {
            if (!valid.empty() && !valid[r]) continue;  // padded rows stay zero
            any = true;
            for (std::size_t c = 0; c < d; ++c) flat(b, r % block_len * d + c) = t(r, c);
        }
        if (!any) out.valid[b] = 0;
    }
    const Matrix<Real> ha = matmul(flat, phi.wa);
    const Matrix<Real> hb = matmul(flat, phi.wb);
    Matrix<Real> h(ha.rows(), ha.cols());
    for (std::size_t i = 0; i < h.size(); ++i) {
        const Real sig = Real(1) / (Real(1) + std::exp(-hb.data()[i]));
        h.data()[i] = ha.data()[i] * sig;
    }
    out.tokens = matmul(h, phi.wo);
    for (std::size_t b = 0; b < n_blocks; ++b)
        if (!out.valid[b])
            for (std::size_t c = 0; c < d; ++c) out.tokens(b, c) = Real(0);
    return out;
}

template <class Real>
struct CompressGrads {
    Matrix<Real> d_t;
    Matrix<Real> d_wa, d_wb, d_wo;  // empty for mean pooling
};

template <class Real>
CompressGrads<Real> compress_blocks_vjp(const Matrix<Real>& t, std::size_t block_len,
                                        const PhiWeights<Real>& phi,
                                        const std::vector<std::uint8_t>& valid,
                                        const Matrix<Real>& grad_coarse) {
    const std::size_t n_blocks = t.rows() / block_len, d = t.cols();
    require_shape(grad_coarse.rows() == n_blocks && grad_coarse.cols() == d,
                  "compress_blocks_vjp grad shape");
    CompressGrads<Real> g;
    g.d_t = Matrix<Real>(t.rows(), d);

    if (!phi.mlp()) {
        for (std::size_t b = 0; b < n_blocks; ++b) {
            std::size_t n_valid = 0;
            for (std::size_t r = b * block_len; r < (b + 1) * block_len; ++r)
                if (valid.empty() || valid[r]) ++n_valid;
            if (n_valid == 0) continue;
            const Real inv = Real(1) / Real(n_valid);
            const Real* grow = grad_coarse.row(b);
            for (std::size_t r = b * block_len; r < (b + 1) * block_len; ++r) {
                if (!valid.empty() && !valid[r]) continue;
                Real* drow = g.d_t.row(r);
                for (std::size_t c = 0; c < d; ++c) drow[c] = grow[c] * inv;
            }
        }
        return g;
    }

    Matrix<Real> flat(n_blocks, block_len * d);
    std::vector<std::uint8_t> block_ok(n_blocks, 1);
    for (std::size_t b = 0; b < n_blocks; ++b) {
        bool any = valid.empty();
        for (std::size_t r = b * block_len; r < (b + 1) * block_len; ++r) {
            if (!valid.empty() && !valid[r]) continue;
            any = true;
            for (std::size_t c = 0; c < d; ++c) flat(b, r % block_len * d + c) = t(r, c);
        }
        if (!any) block_ok[b] = 0;
    }
    Matrix<Real> grad = grad_coarse;
    for (std::size_t b = 0; b < n_blocks; ++b)
        if (!block_ok[b])
            for (std::size_t c = 0; c < d; ++c) grad(b, c) = Real(0);

    const Matrix<Real> ha = matmul(flat, phi.wa);
    const Matrix<Real> hb = matmul(flat, phi.wb);
    Matrix<Real> h(ha.rows(), ha.cols());
    Matrix<Real> d_ha(ha.rows(), ha.cols());
    Matrix<Real> d_hb(ha.rows(), ha.cols());
    const Matrix<Real> d_h = matmul_nt(grad, phi.wo);
    for (std::size_t i = 0; i < h.size(); ++i) {
        const Real sig = Real(1) / (Real(1) + std::exp(-hb.data()[i]));
        h.data()[i] = ha.data()[i] * sig;
        d_ha.data()[i] = d_h.data()[i] * sig;
        d_hb.data()[i] = d_h.data()[i] * ha.data()[i] * sig * (Real(1) - sig);
    }
    g.d_wo = matmul_tn(h, grad);
    g.d_wa = matmul_tn(flat, d_ha);
    g.d_wb = matmul_tn(flat, d_hb);
    Matrix<Real> d_flat = matmul_nt(d_ha, phi.wa);
    d_flat.add_scaled(matmul_nt(d_hb, phi.wb), Real(1));
    for (std::size_t b = 0; b < n_blocks; ++b)
        for (std::size_t r = b * block_len; r < (b + 1) * block_len; ++r) {
            if (!valid.empty() && !valid[r]) continue;
            for (std::size_t c = 0; c < d; ++c) g.d_t(r, c) = d_flat(b, r % block_len * d + c);
        }
    return g;
}

/// Raw dot-product importance between (possibly coarsened) queries and coarse
/// keys; no softmax and no scaling, ranking only.
template <class Real>
Matrix<Real> importance_scores(const Matrix<Real>& qs, const Matrix<Real>& kc) {
    require_shape(qs.cols() == kc.cols(), "importance_scores width");
    return matmul_nt(qs, kc);
}

/// Mean of each g-row band of S over its valid rows; all-invalid bands are
/// zero rows.
template <class Real>
Matrix<Real> group_average_scores(const Matrix<Real>& s, std::size_t g,
                                  const std::vector<std::uint8_t>& valid = {}) {
    require(g >= 1, "group_average_scores: group size must be >= 1");
    require_shape(s.rows() % g == 0, "group_average_scores rows");
    require_shape(valid.empty() || valid.size() == s.rows(), "group_average_scores valid");
    const std::size_t n_groups = s.rows() / g;
    Matrix<Real> out(n_groups, s.cols());
    for (std::size_t p = 0; p < n_groups; ++p) {
        std::size_t n_valid = 0;
        Real* orow = out.row(p);
        for (std::size_t r = p * g; r < (p + 1) * g; ++r) {
            if (!valid.empty() && !valid[r]) continue;
            ++n_valid;
            const Real* srow = s.row(r);
            for (std::size_t c = 0; c < s.cols(); ++c) orow[c] += srow[c];
        }
        if (n_valid == 0) continue;
        const Real inv = Real(1) / Real(n_valid);
        for (std::size_t c = 0; c < s.cols(); ++c) orow[c] *= inv;
    }
    return out;
}

/// Mean of each g-row band of Q over its valid rows (the pooled group query).
template <class Real>
Matrix<Real> pool_group_queries(const Matrix<Real>& q, std::size_t g,
                                const std::vector<std::uint8_t>& valid = {}) {
    return group_average_scores(q, g, valid);
}

/// Containment mask: entry (u, j) is 1 iff block j lies inside the ball that
/// holds query unit u. unit_tokens is the token span of one mask row: 1 for
/// per-token rows, the group size for group rows, block_len for coarse rows.
inline Matrix<std::uint8_t> ball_block_mask(const BallTree& tree, std::size_t block_len,
                                            std::size_t unit_tokens, bool masking_enabled = true) {
    require(block_len >= 1 && unit_tokens >= 1, "ball_block_mask: zero span");
    require(tree.ball_size % block_len == 0,
            "ball_block_mask: block straddles a ball boundary");
    require(tree.ball_size % unit_tokens == 0,
            "ball_block_mask: query unit straddles a ball boundary");
    const std::size_t n_units = tree.n_padded / unit_tokens;
    const std::size_t n_blocks = tree.n_padded / block_len;
    Matrix<std::uint8_t> mask(n_units, n_blocks, 0);
    if (!masking_enabled) return mask;
    for (std::size_t u = 0; u < n_units; ++u) {
        const std::size_t ball = u * unit_tokens / tree.ball_size;
        for (std::size_t j = 0; j < n_blocks; ++j)
            if (j * block_len / tree.ball_size == ball) mask(u, j) = 1;
    }
    return mask;
}

/// Indices of the k largest non-excluded scores; ties break toward the lower
/// block index; result ascending.
template <class Real>
std::vector<int> select_topk(const Real* scores, std::size_t n, std::size_t k,
                             const std::uint8_t* excluded) {
    require(k >= 1, "select_topk: k must be >= 1");
    std::vector<Real> best_s;
    std::vector<int> best_i;
    best_s.reserve(k);
    best_i.reserve(k);
    for (std::size_t j = 0; j < n; ++j) {
        if (excluded != nullptr && excluded[j]) continue;
        const Real s = scores[j];
        // ascending scan: on equal scores the earlier index stays, so strict
        if (best_s.size() == k && !(s > best_s.back())) continue;
        std::size_t pos = best_s.size();
        while (pos > 0 && s > best_s[pos - 1]) --pos;
        best_s.insert(best_s.begin() + pos, s);
        best_i.insert(best_i.begin() + pos, int(j));
        if (best_s.size() > k) {
            best_s.pop_back();
            best_i.pop_back();
        }
    }
    if (best_i.size() < k)
        throw std::invalid_argument("select_topk: fewer candidate blocks than k");
    std::sort(best_i.begin(), best_i.end());
    return best_i;
}

/// Frozen per-unit block choices for one forward pass. Units are contiguous
/// runs of unit_tokens query slots; a unit with no valid query keeps an empty
/// index set.
struct SelectionPlan {
    std::size_t block_len = 0;
    std::size_t unit_tokens = 0;
    std::vector<std::vector<int>> blocks;
    Matrix<std::uint8_t> excluded;  // candidate mask the selection ran under

    std::size_t n_units() const { return blocks.size(); }
};

/// Rank blocks per unit row of `scores` and freeze the top-k choices.
/// Excluded = own-ball containment (when masking) plus invalid coarse blocks.
template <class Real>
SelectionPlan build_selection_plan(const Matrix<Real>& scores, const BsaConfig& cfg,
                                   const BallTree& tree, std::size_t unit_tokens,
                                   const std::vector<std::uint8_t>& coarse_valid,
                                   const std::vector<std::uint8_t>& unit_has_query) {
    const std::size_t n_blocks = tree.n_padded / cfg.block_len;
    const std::size_t n_units = tree.n_padded / unit_tokens;
    require_shape(scores.rows() == n_units && scores.cols() == n_blocks,
                  "build_selection_plan score shape");
    require_shape(coarse_valid.size() == n_blocks, "build_selection_plan coarse_valid");
    require_shape(unit_has_query.empty() || unit_has_query.size() == n_units,
                  "build_selection_plan unit_has_query");
    cfg.validate_for(tree.n_padded);

    SelectionPlan plan;
    plan.block_len = cfg.block_len;
    plan.unit_tokens = unit_tokens;
    plan.excluded = ball_block_mask(tree, cfg.block_len, unit_tokens, cfg.ball_masking);
    for (std::size_t u = 0; u < n_units; ++u)
        for (std::size_t j = 0; j < n_blocks; ++j)
            if (!coarse_valid[j]) plan.excluded(u, j) = 1;

    plan.blocks.resize(n_units);
    for (std::size_t u = 0; u < n_units; ++u) {
        if (!unit_has_query.empty() && !unit_has_query[u]) continue;
        plan.blocks[u] = select_topk(scores.row(u), n_blocks, cfg.top_k, plan.excluded.row(u));
        for (int j : plan.blocks[u])  // soundness audit: mask must be respected
            require(!plan.excluded(u, std::size_t(j)), "selection picked an excluded block");
    }
    return plan;
}

template <class Real>
struct GatheredKv {
    std::vector<Matrix<Real>> k, v;                 // per unit, (k*.l) x d
    std::vector<std::vector<std::uint8_t>> valid;   // per gathered row
};

/// Concatenate each unit's selected blocks of K/V rows in ascending block
/// order, carrying per-row validity for the padded tail.
template <class Real>
GatheredKv<Real> gather_selected(const Matrix<Real>& k, const Matrix<Real>& v,
                                 const SelectionPlan& plan,
                                 const std::vector<std::uint8_t>& token_valid) {
    require_shape(k.rows() == v.rows() && k.cols() == v.cols(), "gather_selected k/v");
    require_shape(token_valid.empty() || token_valid.size() == k.rows(),
                  "gather_selected valid length");
    const std::size_t l = plan.block_len, d = k.cols();
    GatheredKv<Real> out;
    out.k.reserve(plan.n_units());
    for (const auto& blocks : plan.blocks) {
        Matrix<Real> kg(blocks.size() * l, d), vg(blocks.size() * l, d);
        std::vector<std::uint8_t> vmask(blocks.size() * l, 1);
        std::size_t at = 0;
        for (int b : blocks) {
            require(std::size_t(b + 1) * l <= k.rows(), "gather_selected: block out of range");
            for (std::size_t r = std::size_t(b) * l; r < std::size_t(b + 1) * l; ++r, ++at) {
                for (std::size_t c = 0; c < d; ++c) {
                    kg(at, c) = k(r, c);
                    vg(at, c) = v(r, c);
                }
                if (!token_valid.empty()) vmask[at] = token_valid[r];
            }
        }
        out.k.push_back(std::move(kg));
        out.v.push_back(std::move(vg));
        out.valid.push_back(std::move(vmask));
    }
    return out;
}

/// Per-unit saved attention state for the branch backward passes.
template <class Real>
struct BranchWorkspace {
    std::vector<AttendWorkspace<Real>> units;
};

namespace detail {

template <class Real>
Matrix<Real> masked_attend(const Matrix<Real>& q, const Matrix<Real>& k, const Matrix<Real>& v,
                           const std::uint8_t* key_valid, const std::uint8_t* query_valid,
                           AttendWorkspace<Real>* ws) {
    if (ws == nullptr) return attend_core<Real>(q, k, v, nullptr, key_valid, query_valid, nullptr);
    ws->q = q;
    ws->k = k;
    ws->v = v;
    ws->probs = Matrix<Real>(q.rows(), k.rows());
    ws->has_bias = false;
    return attend_core<Real>(q, k, v, nullptr, key_valid, query_valid, &ws->probs);
}

template <class Real>
Matrix<Real> copy_rows(const Matrix<Real>& src, std::size_t lo, std::size_t hi) {
    Matrix<Real> out(hi - lo, src.cols());
    for (std::size_t r = lo; r < hi; ++r)
        for (std::size_t c = 0; c < src.cols(); ++c) out(r - lo, c) = src(r, c);
    return out;
}

}  // namespace detail

/// Dense attention independently inside each ball; padded slots neither
/// attend nor get attended to.
template <class Real>
Matrix<Real> ball_attention(const Matrix<Real>& q, const Matrix<Real>& k, const Matrix<Real>& v,
                            const BallTree& tree, BranchWorkspace<Real>* ws = nullptr) {
    require_shape(q.rows() == tree.n_padded && k.rows() == tree.n_padded &&
                      v.rows() == tree.n_padded,
                  "ball_attention rows");
    Matrix<Real> out(tree.n_padded, v.cols());
    if (ws != nullptr) ws->units.assign(tree.n_balls(), {});
    for (std::size_t b = 0; b < tree.n_balls(); ++b) {
        const auto [lo, hi] = tree.ball_ranges[b];
        const auto qb = detail::copy_rows(q, lo, hi);
        const auto kb = detail::copy_rows(k, lo, hi);
        const auto vb = detail::copy_rows(v, lo, hi);
        const std::uint8_t* mask = tree.valid_mask.data() + lo;
        const auto ob = detail::masked_attend(qb, kb, vb, mask, mask,
                                              ws != nullptr ? &ws->units[b] : nullptr);
        for (std::size_t r = lo; r < hi; ++r)
            for (std::size_t c = 0; c < v.cols(); ++c) out(r, c) = ob(r - lo, c);
    }
    return out;
}

template <class Real>
struct QkvGrads {
    Matrix<Real> d_q, d_k, d_v;
};

template <class Real>
QkvGrads<Real> ball_attention_vjp(const BranchWorkspace<Real>& ws, const BallTree& tree,
                                  const Matrix<Real>& grad_out) {
    require(ws.units.size() == tree.n_balls(), "ball_attention_vjp: stale workspace");
    QkvGrads<Real> g;
    g.d_q = Matrix<Real>(tree.n_padded, grad_out.cols());
    g.d_k = Matrix<Real>(tree.n_padded, grad_out.cols());
    g.d_v = Matrix<Real>(tree.n_padded, grad_out.cols());
    for (std::size_t b = 0; b < tree.n_balls(); ++b) {
        const auto [lo, hi] = tree.ball_ranges[b];
        const auto gb = detail::copy_rows(grad_out, lo, hi);
        const auto grads = attend_vjp(ws.units[b], gb);
        for (std::size_t r = lo; r < hi; ++r)
            for (std::size_t c = 0; c < grad_out.cols(); ++c) {
                g.d_q(r, c) = grads.d_q(r - lo, c);
                g.d_k(r, c) = grads.d_k(r - lo, c);
                g.d_v(r, c) = grads.d_v(r - lo, c);
            }
    }
    return g;
}

/// Full-resolution queries attending over coarse tokens.
template <class Real>
Matrix<Real> compressed_attention(const Matrix<Real>& q, const Matrix<Real>& kc,
                                  const Matrix<Real>& vc,
                                  const std::vector<std::uint8_t>& coarse_valid,
                                  const std::vector<std::uint8_t>& query_valid = {},
                                  AttendWorkspace<Real>* ws = nullptr) {
    require_shape(coarse_valid.empty() || coarse_valid.size() == kc.rows(),
                  "compressed_attention coarse_valid");
    require_shape(query_valid.empty() || query_valid.size() == q.rows(),
                  "compressed_attention query_valid");
    return detail::masked_attend(q, kc, vc,
                                 coarse_valid.empty() ? nullptr : coarse_valid.data(),
                                 query_valid.empty() ? nullptr : query_valid.data(), ws);
}

/// Coarse-resolution attention whose output rows are each repeated block_len
/// times back to full resolution.
template <class Real>
Matrix<Real> group_compressed_attention(const Matrix<Real>& qc, const Matrix<Real>& kc,
                                        const Matrix<Real>& vc,
                                        const std::vector<std::uint8_t>& coarse_valid,
                                        std::size_t block_len,
                                        AttendWorkspace<Real>* ws = nullptr) {
    require(block_len >= 1, "group_compressed_attention: block_len must be >= 1");
    require_shape(qc.rows() == kc.rows(), "group_compressed_attention coarse rows");
    const auto coarse = detail::masked_attend(
        qc, kc, vc, coarse_valid.empty() ? nullptr : coarse_valid.data(),
        coarse_valid.empty() ? nullptr : coarse_valid.data(), ws);
    Matrix<Real> out(coarse.rows() * block_len, coarse.cols());
    for (std::size_t b = 0; b < coarse.rows(); ++b)
        for (std::size_t r = 0; r < block_len; ++r)
            for (std::size_t c = 0; c < coarse.cols(); ++c)
                out(b * block_len + r, c) = coarse(b, c);
    return out;
}

/// Adjoint of the repeat: sum grad rows over each length-block_len run, then
/// the plain attention backward at coarse resolution.
template <class Real>
QkvGrads<Real> group_compressed_attention_vjp(const AttendWorkspace<Real>& ws,
                                              std::size_t block_len,
                                              const Matrix<Real>& grad_out) {
    const std::size_t n_coarse = ws.q.rows();
    require_shape(grad_out.rows() == n_coarse * block_len, "group_compressed_attention_vjp rows");
    Matrix<Real> grad_coarse(n_coarse, grad_out.cols());
    for (std::size_t b = 0; b < n_coarse; ++b)
        for (std::size_t r = 0; r < block_len; ++r)
            for (std::size_t c = 0; c < grad_out.cols(); ++c)
                grad_coarse(b, c) += grad_out(b * block_len + r, c);
    const auto g = attend_vjp(ws, grad_coarse);
    return {g.d_q, g.d_k, g.d_v};
}

/// Each unit's queries attend over that unit's gathered selected tokens.
/// Units with an empty plan produce zero rows.
template <class Real>
Matrix<Real> selection_attention(const Matrix<Real>& q, const Matrix<Real>& k,
                                 const Matrix<Real>& v, const SelectionPlan& plan,
                                 const std::vector<std::uint8_t>& token_valid,
                                 BranchWorkspace<Real>* ws = nullptr) {
    require_shape(q.rows() == k.rows() && k.rows() == v.rows(), "selection_attention rows");
    require_shape(plan.n_units() * plan.unit_tokens == q.rows(), "selection_attention plan size");
    const auto gathered = gather_selected(k, v, plan, token_valid);
    Matrix<Real> out(q.rows(), v.cols());
    if (ws != nullptr) ws->units.assign(plan.n_units(), {});
    for (std::size_t u = 0; u < plan.n_units(); ++u) {
        if (plan.blocks[u].empty()) continue;  // no valid query in this unit
        const std::size_t lo = u * plan.unit_tokens, hi = lo + plan.unit_tokens;
        const auto qu = detail::copy_rows(q, lo, hi);
        bool any_key = false;
        for (auto b : gathered.valid[u]) any_key |= b != 0;
        require(any_key, "selection_attention: unit gathered no valid tokens");
        const auto ou = detail::masked_attend(
            qu, gathered.k[u], gathered.v[u], gathered.valid[u].data(),
            token_valid.empty() ? nullptr : token_valid.data() + lo,
            ws != nullptr ? &ws->units[u] : nullptr);
        for (std::size_t r = lo; r < hi; ++r)
            for (std::size_t c = 0; c < v.cols(); ++c) out(r, c) = ou(r - lo, c);
    }
    return out;
}

/// Backward through selection attention with the plan held fixed. Gathered
/// key/value grads scatter-add back to their source rows.
template <class Real>
QkvGrads<Real> selection_attention_vjp(const BranchWorkspace<Real>& ws, const SelectionPlan& plan,
                                       std::size_t d, const Matrix<Real>& grad_out) {
    require(ws.units.size() == plan.n_units(), "selection_attention_vjp: stale workspace");
    QkvGrads<Real> g;
    g.d_q = Matrix<Real>(grad_out.rows(), d);
    g.d_k = Matrix<Real>(grad_out.rows(), d);
    g.d_v = Matrix<Real>(grad_out.rows(), d);
    for (std::size_t u = 0; u < plan.n_units(); ++u) {
        if (plan.blocks[u].empty()) continue;
        const std::size_t lo = u * plan.unit_tokens;
        const auto gu = detail::copy_rows(grad_out, lo, lo + plan.unit_tokens);
        const auto grads = attend_vjp(ws.units[u], gu);
        for (std::size_t r = 0; r < plan.unit_tokens; ++r)
            for (std::size_t c = 0; c < d; ++c) g.d_q(lo + r, c) = grads.d_q(r, c);
        std::size_t at = 0;
        for (int b : plan.blocks[u])
            for (std::size_t r = std::size_t(b) * plan.block_len;
                 r < std::size_t(b + 1) * plan.block_len; ++r, ++at)
                for (std::size_t c = 0; c < d; ++c) {
                    g.d_k(r, c) += grads.d_k(at, c);
                    g.d_v(r, c) += grads.d_v(at, c);
                }
    }
    return g;
}

}  // namespace bsa
