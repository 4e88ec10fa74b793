// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <sstream>
#include <string>

#include "bsa/bsa_layer.hpp"
#include "bsa/branches.hpp"

namespace bsa {

// Analytic FLOP accounting. Conventions, fixed across the whole model:
//   - one multiply-accumulate = 2 FLOPs, so an (r x k) x (k x c) matmul
//     costs 2*r*k*c;
//   - softmax costs kSoftmaxFlopsPerScore per score entry (exp, running sum,
//     divide);
//   - sigmoid costs kSigmoidFlops per evaluation.
// Attention over `rows` queries and `keys` keys of width d therefore costs
// rows*keys*(4d + 5): QK^T, softmax, and the value average.
inline constexpr std::uint64_t kSoftmaxFlopsPerScore = 5;
inline constexpr std::uint64_t kSigmoidFlops = 4;

struct CostReport {
    std::uint64_t flops_ball = 0;     // attention inside balls (dense attention when full)
    std::uint64_t flops_cmp = 0;      // attention over coarse tokens
    std::uint64_t flops_slc = 0;      // attention over gathered selected blocks
    std::uint64_t flops_scoring = 0;  // importance scores, grouping, head averaging
    std::uint64_t flops_proj = 0;     // QKV projections, gate fusion, output projection
    std::uint64_t flops_mlp = 0;      // pooling map applied per block (zero for mean)
    std::uint64_t total = 0;

    void finalize() {
        total = flops_ball + flops_cmp + flops_slc + flops_scoring + flops_proj + flops_mlp;
    }

    CostReport& scale(std::uint64_t factor) {
        flops_ball *= factor;
        flops_cmp *= factor;
        flops_slc *= factor;
        flops_scoring *= factor;
        flops_proj *= factor;
        flops_mlp *= factor;
        finalize();
        return *this;
    }
};

namespace detail {

inline std::uint64_t attend_flops(std::uint64_t rows, std::uint64_t keys, std::uint64_t d) {
    return rows * keys * (4 * d + kSoftmaxFlopsPerScore);
}

}  // namespace detail

/// Dense multi-head attention stack: per head QK^T (2N^2 d), softmax (5N^2),
/// AV (2N^2 d), plus QKV projections (6NCd per head) and the output
/// projection (2N C^2), all times depth.
inline std::uint64_t flops_full(std::size_t n, std::size_t d_k, std::size_t heads,
                                std::size_t depth) {
    if (n < 1 || d_k < 1 || heads < 1 || depth < 1)
        throw std::invalid_argument("flops_full: all arguments must be >= 1");
    const std::uint64_t N = n, d = d_k, H = heads, C = H * d;
    const std::uint64_t attn = H * detail::attend_flops(N, N, d);
    const std::uint64_t proj = 6 * N * C * d * H + 2 * N * C * C;
    return depth * (attn + proj);
}

/// Per-layer cost of one sparse attention layer (or the dense layer when the
/// variant is `full`, reported as a single ball spanning the padded length).
inline CostReport flops_bsa_layer(std::size_t n, BsaConfig cfg, Variant variant) {
    apply_variant(cfg, variant);
    if (n < 1) throw std::invalid_argument("flops_bsa: n must be >= 1");
    const std::uint64_t d = cfg.head_dim, H = cfg.heads, C = cfg.model_dim;

    CostReport r;
    if (variant == Variant::full) {
        const std::uint64_t N = n;
        r.flops_ball = H * detail::attend_flops(N, N, d);
        r.flops_proj = 6 * N * C * d * H + 2 * N * C * C;
        r.finalize();
        return r;
    }

    const std::size_t n_pad = (n + cfg.ball_size - 1) / cfg.ball_size * cfg.ball_size;
    cfg.validate_for(n_pad);
    const std::uint64_t Np = n_pad, m = cfg.ball_size, l = cfg.block_len, g = cfg.group_size;
    const std::uint64_t B = Np / l, kl = std::uint64_t(cfg.top_k) * l;

    r.flops_ball = H * detail::attend_flops(Np, m, d);
    r.flops_cmp = cfg.group_compression ? H * detail::attend_flops(B, B, d)
                                        : H * detail::attend_flops(Np, B, d);
    r.flops_slc = H * detail::attend_flops(Np, kl, d);

    // scores: one (rows x B) dot-product matrix per head, head-averaged, plus
    // row averaging when coarse rows are regrouped
    const std::uint64_t score_rows =
        cfg.group_selection ? (cfg.group_compression ? B : Np / g) : Np;
    r.flops_scoring = H * 2 * score_rows * B * d + (H - 1) * score_rows * B;
    if (cfg.group_selection && cfg.group_compression) r.flops_scoring += score_rows * B;

    // pooling: mean costs one add per token plus a divide per block; the
    // gated map costs two (l*d x 2d) matmuls, the gate, and a (2d x d) matmul
    // per block
    const std::uint64_t tensors = cfg.group_compression ? 3 : 2;  // K, V, and maybe Q
    if (cfg.phi_kind == PhiKind::mean) {
        r.flops_mlp = H * tensors * (Np + B) * d;
    } else {
        const std::uint64_t per_block =
            2 * (l * d) * (2 * d) * 2 + 2 * (2 * d) * d + (2 * kSigmoidFlops + 2) * d;
        r.flops_mlp = H * tensors * B * per_block;
    }

    const std::uint64_t gate = H * (5 * Np * d + 3 * kSigmoidFlops);
    r.flops_proj = 6 * Np * C * d * H + 2 * Np * C * C + gate;
    r.finalize();
    return r;
}

/// Whole-model aggregate: the per-layer report times depth.
inline CostReport flops_bsa(std::size_t n, const BsaConfig& cfg, Variant variant,
                            std::size_t depth) {
    if (depth < 1) throw std::invalid_argument("flops_bsa: depth must be >= 1");
    return flops_bsa_layer(n, cfg, variant).scale(depth);
}

inline std::string cost_report_kv(const CostReport& r) {
    std::ostringstream out;
    out << "flops_ball=" << r.flops_ball << "\n"
        << "flops_cmp=" << r.flops_cmp << "\n"
        << "flops_slc=" << r.flops_slc << "\n"
        << "flops_scoring=" << r.flops_scoring << "\n"
        << "flops_proj=" << r.flops_proj << "\n"
        << "flops_mlp=" << r.flops_mlp << "\n"
        << "total=" << r.total << "\n";
    return out.str();
}

inline std::string cost_report_csv_header() {
    return "flops_ball,flops_cmp,flops_slc,flops_scoring,flops_proj,flops_mlp,total";
}

inline std::string cost_report_csv_row(const CostReport& r) {
    std::ostringstream out;
    out << r.flops_ball << "," << r.flops_cmp << "," << r.flops_slc << "," << r.flops_scoring
        << "," << r.flops_proj << "," << r.flops_mlp << "," << r.total;
    return out.str();
}

}  // namespace bsa
