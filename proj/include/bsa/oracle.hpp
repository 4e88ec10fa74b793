// SPDX-License-Identifier: Apache-2.0
#pragma once

// Reference implementations used only by tests and the self-check command.
// Everything here is written as straightforward loops, independent of the
// production kernels it is used to verify.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "bsa/matrix.hpp"

namespace bsa::oracle {

/// Dense softmax attention, three plain loops, row-max subtraction only.
/// bias rows use -inf semantics for masked entries (values <= -1e9 excluded).
inline Matrix<double> dense_reference(const Matrix<double>& q, const Matrix<double>& k,
                                      const Matrix<double>& v,
                                      const Matrix<double>* bias = nullptr) {
    require_shape(q.cols() == k.cols(), "dense_reference q/k width");
    require_shape(k.rows() == v.rows(), "dense_reference k/v rows");
    if (bias != nullptr)
        require_shape(bias->rows() == q.rows() && bias->cols() == k.rows(),
                      "dense_reference bias");
    const std::size_t n = q.rows(), m = k.rows(), d = q.cols();
    const double scale = 1.0 / std::sqrt(double(d));
    Matrix<double> out(n, v.cols());
    std::vector<double> scores(m);
    for (std::size_t i = 0; i < n; ++i) {
        double best = -std::numeric_limits<double>::infinity();
        for (std::size_t j = 0; j < m; ++j) {
            double s = 0.0;
            for (std::size_t c = 0; c < d; ++c) s += q(i, c) * k(j, c);
            s *= scale;
            if (bias != nullptr) s += (*bias)(i, j);
            scores[j] = s;
            if (s > best) best = s;
        }
        if (!(best > -1e9)) throw std::invalid_argument("dense_reference: fully masked row");
        double denom = 0.0;
        for (std::size_t j = 0; j < m; ++j) {
            scores[j] = (scores[j] <= -1e9) ? 0.0 : std::exp(scores[j] - best);
            denom += scores[j];
        }
        for (std::size_t j = 0; j < m; ++j) {
            const double w = scores[j] / denom;
            for (std::size_t c = 0; c < v.cols(); ++c) out(i, c) += w * v(j, c);
        }
    }
    return out;
}

/// Top-k by full stable sort: ties go to the lowest index; result ascending.
inline std::vector<int> brute_force_topk(const std::vector<double>& scores, int k,
                                         const std::vector<std::uint8_t>& excluded = {}) {
    std::vector<int> order;
    for (int j = 0; j < int(scores.size()); ++j)
        if (excluded.empty() || !excluded[j]) order.push_back(j);
    if (int(order.size()) < k)
        throw std::invalid_argument("brute_force_topk: fewer candidates than k");
    std::stable_sort(order.begin(), order.end(), [&](int a, int b) {
        if (scores[a] != scores[b]) return scores[a] > scores[b];
        return a < b;
    });
    order.resize(k);
    std::sort(order.begin(), order.end());
    return order;
}

struct FdCheckReport {
    double max_rel_err = 0.0;
    std::size_t worst_coordinate = 0;
    double step = 0.0;
    std::string precision = "high";
    bool step_suspect = false;  // flagged when the step is too coarse to trust
};

/// Central-difference check of a vector-Jacobian product.
///
/// f maps a flat parameter vector to a flat output vector; analytic_vjp is the
/// gradient of <grad_out, f(x)> that the implementation under test produced.
/// Any data-dependent discrete choices inside f (top-k plans) must be frozen
/// by the caller before handing f over.
inline FdCheckReport fd_vjp_check(const std::function<std::vector<double>(const std::vector<double>&)>& f,
                                  const std::vector<double>& x,
                                  const std::vector<double>& grad_out,
                                  const std::vector<double>& analytic_vjp,
                                  double step = 1e-5) {
    require(step > 0.0, "fd_vjp_check: step must be positive");
    require(analytic_vjp.size() == x.size(), "fd_vjp_check: vjp size");
    FdCheckReport report;
    report.step = step;
    report.step_suspect = step >= 1e-2;
    double max_abs_grad = 0.0;
    std::vector<double> fd(x.size());
    std::vector<double> xp = x;
    for (std::size_t i = 0; i < x.size(); ++i) {
        xp[i] = x[i] + step;
        const std::vector<double> up = f(xp);
        xp[i] = x[i] - step;
        const std::vector<double> um = f(xp);
        xp[i] = x[i];
        require(up.size() == grad_out.size() && um.size() == grad_out.size(),
                "fd_vjp_check: output size");
        double g = 0.0;
        for (std::size_t j = 0; j < up.size(); ++j) g += grad_out[j] * (up[j] - um[j]);
        fd[i] = g / (2.0 * step);
        max_abs_grad = std::max(max_abs_grad, std::abs(fd[i]));
    }
    const double denom = std::max(max_abs_grad, 1e-8);
    for (std::size_t i = 0; i < x.size(); ++i) {
        const double rel = std::abs(analytic_vjp[i] - fd[i]) / denom;
        if (rel > report.max_rel_err) {
            report.max_rel_err = rel;
            report.worst_coordinate = i;
        }
    }
    return report;
}

/// Block-diagonal oracle: dense attention run separately on each size-m slab
/// of rows, invalid slots excluded. Keys and queries share the slab.
inline Matrix<double> block_diagonal_reference(const Matrix<double>& q, const Matrix<double>& k,
                                               const Matrix<double>& v, std::size_t block,
                                               const std::vector<std::uint8_t>& valid) {
    require(block >= 1 && q.rows() % block == 0, "block_diagonal_reference: block size");
    Matrix<double> out(q.rows(), v.cols());
    const std::size_t nblocks = q.rows() / block;
    for (std::size_t b = 0; b < nblocks; ++b) {
        std::vector<std::size_t> keep;
        for (std::size_t r = b * block; r < (b + 1) * block; ++r)
            if (valid.empty() || valid[r]) keep.push_back(r);
        if (keep.empty()) continue;
        Matrix<double> qb(keep.size(), q.cols()), kb(keep.size(), k.cols()), vb(keep.size(), v.cols());
        for (std::size_t i = 0; i < keep.size(); ++i)
            for (std::size_t c = 0; c < q.cols(); ++c) {
                qb(i, c) = q(keep[i], c);
                kb(i, c) = k(keep[i], c);
                vb(i, c) = v(keep[i], c);
            }
        const Matrix<double> ob = dense_reference(qb, kb, vb);
        for (std::size_t i = 0; i < keep.size(); ++i)
            for (std::size_t c = 0; c < v.cols(); ++c) out(keep[i], c) = ob(i, c);
    }
    return out;
}

/// Gather-then-dense oracle for the selection branch: materialize each group's
/// selected blocks as one key/value matrix and run dense attention on it.
inline Matrix<double> gather_then_dense_reference(const Matrix<double>& q, const Matrix<double>& k,
                                                  const Matrix<double>& v,
                                                  const std::vector<std::vector<int>>& group_blocks,
                                                  std::size_t group_size, std::size_t block_len,
                                                  const std::vector<std::uint8_t>& valid) {
    Matrix<double> out(q.rows(), v.cols());
    for (std::size_t p = 0; p < group_blocks.size(); ++p) {
        std::vector<std::size_t> rows;
        for (int blockIdx : group_blocks[p])
            for (std::size_t r = std::size_t(blockIdx) * block_len;
                 r < std::size_t(blockIdx + 1) * block_len && r < k.rows(); ++r)
                if (valid.empty() || valid[r]) rows.push_back(r);
        if (rows.empty()) continue;
        Matrix<double> kg(rows.size(), k.cols()), vg(rows.size(), v.cols());
        for (std::size_t i = 0; i < rows.size(); ++i)
            for (std::size_t c = 0; c < k.cols(); ++c) {
                kg(i, c) = k(rows[i], c);
                vg(i, c) = v(rows[i], c);
            }
        for (std::size_t t = p * group_size; t < (p + 1) * group_size && t < q.rows(); ++t) {
            if (!valid.empty() && !valid[t]) continue;
            Matrix<double> qt(1, q.cols());
            for (std::size_t c = 0; c < q.cols(); ++c) qt(0, c) = q(t, c);
            const Matrix<double> ot = dense_reference(qt, kg, vg);
            for (std::size_t c = 0; c < v.cols(); ++c) out(t, c) = ot(0, c);
        }
    }
    return out;
}

}  // namespace bsa::oracle
