// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "bsa/branches.hpp"
#include "bsa/core_attn.hpp"
#include "bsa/geom.hpp"
#include "bsa/matrix.hpp"

namespace bsa {

enum class Variant { full, bsa, bsa_nogroup, bsa_gc };

inline std::string to_string(Variant v) {
    switch (v) {
        case Variant::full: return "full";
        case Variant::bsa: return "bsa";
        case Variant::bsa_nogroup: return "bsa-nogroup";
        case Variant::bsa_gc: return "bsa-gc";
    }
    return "?";
}

inline Variant variant_from_string(const std::string& s) {
    if (s == "full") return Variant::full;
    if (s == "bsa") return Variant::bsa;
    if (s == "bsa-nogroup") return Variant::bsa_nogroup;
    if (s == "bsa-gc") return Variant::bsa_gc;
    throw std::invalid_argument("unknown variant: " + s);
}

/// Overwrite the branch toggles that define a named variant; sizes stay put.
inline void apply_variant(BsaConfig& cfg, Variant v) {
    switch (v) {
        case Variant::full:
            break;  // dense path ignores the branch toggles
        case Variant::bsa:
            cfg.group_selection = true;
            cfg.group_compression = false;
            cfg.phi_kind = PhiKind::mean;
            break;
        case Variant::bsa_nogroup:
            cfg.group_selection = false;
            cfg.group_compression = false;
            cfg.phi_kind = PhiKind::mean;
            break;
        case Variant::bsa_gc:
            cfg.group_selection = true;
            cfg.group_compression = true;
            cfg.phi_kind = PhiKind::mlp;
            break;
    }
}

/// Per-head branch gate logits, stored 1 x H.
template <class Real>
struct GateParams {
    Matrix<Real> ball, cmp, slc;
};

template <class Real>
struct BsaParams {
    ProjectionWeights<Real> proj;
    PhiWeights<Real> phi_k, phi_v, phi_q;
    GateParams<Real> gates;
};

template <class Real>
struct BlockParams {
    Matrix<Real> norm1_gain;
    BsaParams<Real> attn;
    Matrix<Real> norm2_gain;
    Matrix<Real> ffn_w1, ffn_w2, ffn_w3;
};

template <class Real>
struct ModelParams {
    Matrix<Real> embed;  // in_dim x C
    std::vector<BlockParams<Real>> blocks;
    Matrix<Real> head_w;  // C x 1
    Matrix<Real> head_b;  // 1 x 1
};

struct ModelConfig {
    BsaConfig attn;
    Variant variant = Variant::bsa;
    std::size_t depth = 2;
    std::size_t in_dim = 3;

    std::size_t ffn_hidden() const { return 2 * attn.model_dim; }
};

template <class Real>
inline Real sigmoid(Real x) {
    return Real(1) / (Real(1) + std::exp(-x));
}

/// sum_b sigmoid(gamma_b) * attn_b for one head.
template <class Real>
Matrix<Real> gate_fuse(const Matrix<Real>& attn_ball, const Matrix<Real>& attn_cmp,
                       const Matrix<Real>& attn_slc, Real g_ball, Real g_cmp, Real g_slc) {
    require_shape(attn_ball.rows() == attn_cmp.rows() && attn_ball.rows() == attn_slc.rows() &&
                      attn_ball.cols() == attn_cmp.cols() && attn_ball.cols() == attn_slc.cols(),
                  "gate_fuse branch shapes");
    const Real sb = sigmoid(g_ball), sc = sigmoid(g_cmp), ss = sigmoid(g_slc);
    Matrix<Real> out(attn_ball.rows(), attn_ball.cols());
    for (std::size_t i = 0; i < out.size(); ++i)
        out.data()[i] = sb * attn_ball.data()[i] + sc * attn_cmp.data()[i] +
                        ss * attn_slc.data()[i];
    return out;
}

template <class Real>
struct GateFuseGrads {
    Matrix<Real> d_ball, d_cmp, d_slc;
    Real d_g_ball = 0, d_g_cmp = 0, d_g_slc = 0;
};

template <class Real>
GateFuseGrads<Real> gate_fuse_vjp(const Matrix<Real>& attn_ball, const Matrix<Real>& attn_cmp,
                                  const Matrix<Real>& attn_slc, Real g_ball, Real g_cmp,
                                  Real g_slc, const Matrix<Real>& grad_out) {
    const Real sb = sigmoid(g_ball), sc = sigmoid(g_cmp), ss = sigmoid(g_slc);
    GateFuseGrads<Real> g;
    g.d_ball = grad_out;
    g.d_cmp = grad_out;
    g.d_slc = grad_out;
    Real acc_b = 0, acc_c = 0, acc_s = 0;
    for (std::size_t i = 0; i < grad_out.size(); ++i) {
        const Real go = grad_out.data()[i];
        acc_b += go * attn_ball.data()[i];
        acc_c += go * attn_cmp.data()[i];
        acc_s += go * attn_slc.data()[i];
        g.d_ball.data()[i] = go * sb;
        g.d_cmp.data()[i] = go * sc;
        g.d_slc.data()[i] = go * ss;
    }
    g.d_g_ball = acc_b * sb * (Real(1) - sb);
    g.d_g_cmp = acc_c * sc * (Real(1) - sc);
    g.d_g_slc = acc_s * ss * (Real(1) - ss);
    return g;
}

/// Saved tensors from one attention layer forward, enough to run the exact
/// backward with the selection plan held fixed.
template <class Real>
struct AttnWorkspace {
    Matrix<Real> xp;  // projection input (ball order for sparse, plain for dense)
    HeadsQkv<Real> qkv;
    std::vector<AttendWorkspace<Real>> dense;      // full variant only
    std::vector<Compressed<Real>> kc, vc, qc;      // per head coarse tokens
    std::vector<std::uint8_t> coarse_valid;
    Matrix<Real> unit_scores;                      // head-averaged selection scores
    SelectionPlan plan;
    std::vector<BranchWorkspace<Real>> ball, slc;  // per head
    std::vector<AttendWorkspace<Real>> cmp;        // per head
    std::vector<Matrix<Real>> out_ball, out_cmp, out_slc;
    Matrix<Real> concat;  // pre output-projection
};

template <class Real>
struct BsaGrads {
    Matrix<Real> d_x;
    ProjectionGrads<Real> proj;
    Matrix<Real> d_wo;
    CompressGrads<Real> phi_k, phi_v, phi_q;  // weight parts only
    GateParams<Real> d_gates;
};

namespace detail {

template <class Real>
Matrix<Real> concat_heads(const std::vector<Matrix<Real>>& heads) {
    const std::size_t n = heads[0].rows(), d = heads[0].cols();
    Matrix<Real> out(n, d * heads.size());
    for (std::size_t h = 0; h < heads.size(); ++h)
        for (std::size_t i = 0; i < n; ++i)
            for (std::size_t c = 0; c < d; ++c) out(i, h * d + c) = heads[h](i, c);
    return out;
}

template <class Real>
Matrix<Real> slice_head(const Matrix<Real>& concat, std::size_t h, std::size_t d) {
    Matrix<Real> out(concat.rows(), d);
    for (std::size_t i = 0; i < concat.rows(); ++i)
        for (std::size_t c = 0; c < d; ++c) out(i, c) = concat(i, h * d + c);
    return out;
}

template <class Real>
void accumulate_phi(CompressGrads<Real>& into, const CompressGrads<Real>& from) {
    if (from.d_wa.empty()) return;
    if (into.d_wa.empty()) {
        into.d_wa = from.d_wa;
        into.d_wb = from.d_wb;
        into.d_wo = from.d_wo;
        return;
    }
    into.d_wa.add_scaled(from.d_wa, Real(1));
    into.d_wb.add_scaled(from.d_wb, Real(1));
    into.d_wo.add_scaled(from.d_wo, Real(1));
}

}  // namespace detail

/// Dense multi-head attention, the full-attention baseline. Runs in the
/// caller's row order; no tree, masks, or gates.
template <class Real>
Matrix<Real> dense_mha_forward(const Matrix<Real>& x, const ProjectionWeights<Real>& w,
                               AttnWorkspace<Real>* ws = nullptr) {
    const auto qkv = project_qkv(x, w);
    std::vector<Matrix<Real>> heads;
    if (ws != nullptr) ws->dense.assign(w.heads(), {});
    for (std::size_t h = 0; h < w.heads(); ++h) {
        if (ws != nullptr)
            heads.push_back(
                attend(qkv.q[h], qkv.k[h], qkv.v[h], AttentionBias<Real>{}, ws->dense[h]));
        else
            heads.push_back(attend(qkv.q[h], qkv.k[h], qkv.v[h]));
    }
    const auto concat = detail::concat_heads(heads);
    if (ws != nullptr) {
        ws->xp = x;
        ws->qkv = qkv;
        ws->concat = concat;
    }
    return matmul(concat, w.w_o);
}

template <class Real>
BsaGrads<Real> dense_mha_backward(const AttnWorkspace<Real>& ws, const ProjectionWeights<Real>& w,
                                  const Matrix<Real>& grad_out) {
    const std::size_t heads = w.heads(), d = w.w_q[0].cols();
    BsaGrads<Real> g;
    g.d_wo = matmul_tn(ws.concat, grad_out);
    const auto d_concat = matmul_nt(grad_out, w.w_o);
    std::vector<Matrix<Real>> dq(heads), dk(heads), dv(heads);
    for (std::size_t h = 0; h < heads; ++h) {
        const auto gh = detail::slice_head(d_concat, h, d);
        const auto ah = attend_vjp(ws.dense[h], gh);
        dq[h] = ah.d_q;
        dk[h] = ah.d_k;
        dv[h] = ah.d_v;
    }
    g.proj = project_qkv_vjp(ws.xp, w, dq, dk, dv);
    g.d_x = g.proj.d_x;
    return g;
}

/// One sparse attention layer: permute into ball order, project per head, run
/// the three branches, fuse with per-head gates, project out, restore order.
/// fixed_plan, when given, bypasses score-based selection (finite-difference
/// harnesses freeze plans this way).
template <class Real>
Matrix<Real> bsa_forward(const Matrix<Real>& x, const BallTree& tree, const BsaConfig& cfg,
                         const BsaParams<Real>& params, AttnWorkspace<Real>* ws = nullptr,
                         const SelectionPlan* fixed_plan = nullptr) {
    cfg.validate_for(tree.n_padded);
    require_shape(x.rows() == tree.n_valid && x.cols() == cfg.model_dim, "bsa_forward input");
    require(tree.ball_size == cfg.ball_size, "bsa_forward: tree ball size differs from config");
    require(params.proj.heads() == cfg.heads, "bsa_forward: head count mismatch");

    const std::size_t H = cfg.heads, l = cfg.block_len, g = cfg.group_size;
    const auto& valid = tree.valid_mask;
    const Matrix<Real> xp = permute_features(tree, x, Real(0));
    const auto qkv = project_qkv(xp, params.proj);

    AttnWorkspace<Real> local;
    AttnWorkspace<Real>& w = ws != nullptr ? *ws : local;
    w.xp = xp;
    w.qkv = qkv;
    w.kc.assign(H, {});
    w.vc.assign(H, {});
    w.qc.assign(H, {});
    w.ball.assign(H, {});
    w.slc.assign(H, {});
    w.cmp.assign(H, {});
    w.out_ball.assign(H, {});
    w.out_cmp.assign(H, {});
    w.out_slc.assign(H, {});

    for (std::size_t h = 0; h < H; ++h) {
        w.kc[h] = compress_blocks(qkv.k[h], l, params.phi_k, valid);
        w.vc[h] = compress_blocks(qkv.v[h], l, params.phi_v, valid);
        if (cfg.group_compression)
            w.qc[h] = compress_blocks(qkv.q[h], l, params.phi_q, valid);
    }
    w.coarse_valid = w.kc[0].valid;

    // one plan shared by every head, ranked by head-averaged scores
    if (fixed_plan != nullptr) {
        w.plan = *fixed_plan;
    } else {
        const std::size_t unit_tokens = cfg.group_selection ? g : 1;
        Matrix<Real> scores;
        for (std::size_t h = 0; h < H; ++h) {
            Matrix<Real> s;
            if (!cfg.group_selection) {
                s = importance_scores(qkv.q[h], w.kc[h].tokens);
            } else if (cfg.group_compression) {
                // coarse queries score at block resolution, then group rows
                const auto coarse = importance_scores(w.qc[h].tokens, w.kc[h].tokens);
                s = group_average_scores(coarse, g / l, w.coarse_valid);
            } else {
                s = importance_scores(pool_group_queries(qkv.q[h], g, valid), w.kc[h].tokens);
            }
            if (h == 0)
                scores = std::move(s);
            else
                scores.add_scaled(s, Real(1));
        }
        for (std::size_t i = 0; i < scores.size(); ++i) scores.data()[i] /= Real(H);
        std::vector<std::uint8_t> unit_has_query(tree.n_padded / unit_tokens, 0);
        for (std::size_t u = 0; u < unit_has_query.size(); ++u)
            for (std::size_t t = u * unit_tokens; t < (u + 1) * unit_tokens; ++t)
                if (valid[t]) unit_has_query[u] = 1;
        w.unit_scores = scores;
        w.plan = build_selection_plan(scores, cfg, tree, unit_tokens, w.coarse_valid,
                                      unit_has_query);
    }

    std::vector<Matrix<Real>> fused(H);
    for (std::size_t h = 0; h < H; ++h) {
        w.out_ball[h] = ball_attention(qkv.q[h], qkv.k[h], qkv.v[h], tree, &w.ball[h]);
        if (cfg.group_compression)
            w.out_cmp[h] = group_compressed_attention(w.qc[h].tokens, w.kc[h].tokens,
                                                      w.vc[h].tokens, w.coarse_valid, l,
                                                      &w.cmp[h]);
        else
            w.out_cmp[h] = compressed_attention(qkv.q[h], w.kc[h].tokens, w.vc[h].tokens,
                                                w.coarse_valid, valid, &w.cmp[h]);
        w.out_slc[h] = selection_attention(qkv.q[h], qkv.k[h], qkv.v[h], w.plan, valid,
                                           &w.slc[h]);
        fused[h] = gate_fuse(w.out_ball[h], w.out_cmp[h], w.out_slc[h], params.gates.ball(0, h),
                             params.gates.cmp(0, h), params.gates.slc(0, h));
    }
    w.concat = detail::concat_heads(fused);
    const Matrix<Real> yp = matmul(w.concat, params.proj.w_o);
    return unpermute_features(tree, yp);
}

/// Reverse-mode pass of bsa_forward. The selection plan is a constant: no
/// gradient flows through the ranking scores.
template <class Real>
BsaGrads<Real> bsa_backward(const AttnWorkspace<Real>& w, const BallTree& tree,
                            const BsaConfig& cfg, const BsaParams<Real>& params,
                            const Matrix<Real>& grad_out) {
    const std::size_t H = cfg.heads, d = cfg.head_dim, l = cfg.block_len;
    const auto& valid = tree.valid_mask;
    require_shape(grad_out.rows() == tree.n_valid && grad_out.cols() == cfg.model_dim,
                  "bsa_backward grad shape");

    BsaGrads<Real> g;
    g.d_gates.ball = Matrix<Real>(1, H);
    g.d_gates.cmp = Matrix<Real>(1, H);
    g.d_gates.slc = Matrix<Real>(1, H);

    const Matrix<Real> gy = permute_features(tree, grad_out, Real(0));
    g.d_wo = matmul_tn(w.concat, gy);
    const Matrix<Real> d_concat = matmul_nt(gy, params.proj.w_o);

    std::vector<Matrix<Real>> dq(H), dk(H), dv(H);
    for (std::size_t h = 0; h < H; ++h) {
        const auto d_fused = detail::slice_head(d_concat, h, d);
        const auto gates = gate_fuse_vjp(w.out_ball[h], w.out_cmp[h], w.out_slc[h],
                                         params.gates.ball(0, h), params.gates.cmp(0, h),
                                         params.gates.slc(0, h), d_fused);
        g.d_gates.ball(0, h) = gates.d_g_ball;
        g.d_gates.cmp(0, h) = gates.d_g_cmp;
        g.d_gates.slc(0, h) = gates.d_g_slc;

        const auto ball_g = ball_attention_vjp(w.ball[h], tree, gates.d_ball);
        dq[h] = ball_g.d_q;
        dk[h] = ball_g.d_k;
        dv[h] = ball_g.d_v;

        const auto slc_g = selection_attention_vjp(w.slc[h], w.plan, d, gates.d_slc);
        dq[h].add_scaled(slc_g.d_q, Real(1));
        dk[h].add_scaled(slc_g.d_k, Real(1));
        dv[h].add_scaled(slc_g.d_v, Real(1));

        Matrix<Real> d_kc, d_vc;
        if (cfg.group_compression) {
            const auto cg = group_compressed_attention_vjp(w.cmp[h], l, gates.d_cmp);
            const auto qc_g =
                compress_blocks_vjp(w.qkv.q[h], l, params.phi_q, valid, cg.d_q);
            dq[h].add_scaled(qc_g.d_t, Real(1));
            detail::accumulate_phi(g.phi_q, qc_g);
            d_kc = cg.d_k;
            d_vc = cg.d_v;
        } else {
            const auto cg = attend_vjp(w.cmp[h], gates.d_cmp);
            dq[h].add_scaled(cg.d_q, Real(1));
            d_kc = cg.d_k;
            d_vc = cg.d_v;
        }
        const auto kc_g = compress_blocks_vjp(w.qkv.k[h], l, params.phi_k, valid, d_kc);
        dk[h].add_scaled(kc_g.d_t, Real(1));
        detail::accumulate_phi(g.phi_k, kc_g);
        const auto vc_g = compress_blocks_vjp(w.qkv.v[h], l, params.phi_v, valid, d_vc);
        dv[h].add_scaled(vc_g.d_t, Real(1));
        detail::accumulate_phi(g.phi_v, vc_g);
    }

    g.proj = project_qkv_vjp(w.xp, params.proj, dq, dk, dv);
    g.d_x = unpermute_features(tree, g.proj.d_x);
    return g;
}

template <class Real>
struct BlockWorkspace {
    Matrix<Real> x_in, normed1, x_mid, normed2;
    AttnWorkspace<Real> attn;
};

/// x'' = x' + swiglu(rmsnorm(x')), x' = x + attn(rmsnorm(x)).
template <class Real>
Matrix<Real> block_forward(const Matrix<Real>& x, const BallTree* tree, const ModelConfig& mcfg,
                           const BlockParams<Real>& p, BlockWorkspace<Real>* ws = nullptr,
                           const SelectionPlan* fixed_plan = nullptr) {
    BlockWorkspace<Real> local;
    BlockWorkspace<Real>& w = ws != nullptr ? *ws : local;
    w.x_in = x;
    w.normed1 = rmsnorm(x, p.norm1_gain);
    Matrix<Real> attn_out;
    if (mcfg.variant == Variant::full)
        attn_out = dense_mha_forward(w.normed1, p.attn.proj, &w.attn);
    else {
        require(tree != nullptr, "block_forward: sparse variant needs a tree");
        attn_out = bsa_forward(w.normed1, *tree, mcfg.attn, p.attn, &w.attn, fixed_plan);
    }
    Matrix<Real> x_mid = x;
    x_mid.add_scaled(attn_out, Real(1));
    w.x_mid = x_mid;
    w.normed2 = rmsnorm(x_mid, p.norm2_gain);
    Matrix<Real> out = x_mid;
    out.add_scaled(swiglu(w.normed2, p.ffn_w1, p.ffn_w2, p.ffn_w3), Real(1));
    return out;
}

template <class Real>
struct BlockGrads {
    Matrix<Real> d_x;
    Matrix<Real> d_norm1_gain, d_norm2_gain;
    BsaGrads<Real> attn;
    Matrix<Real> d_ffn_w1, d_ffn_w2, d_ffn_w3;
};

template <class Real>
BlockGrads<Real> block_backward(const BlockWorkspace<Real>& w, const BallTree* tree,
                                const ModelConfig& mcfg, const BlockParams<Real>& p,
                                const Matrix<Real>& grad_out) {
    BlockGrads<Real> g;
    const auto ffn = swiglu_vjp(w.normed2, p.ffn_w1, p.ffn_w2, p.ffn_w3, grad_out);
    g.d_ffn_w1 = ffn.d_w1;
    g.d_ffn_w2 = ffn.d_w2;
    g.d_ffn_w3 = ffn.d_w3;
    const auto norm2 = rmsnorm_vjp(w.x_mid, p.norm2_gain, ffn.d_x);
    g.d_norm2_gain = norm2.d_gain;
    Matrix<Real> d_x_mid = grad_out;
    d_x_mid.add_scaled(norm2.d_x, Real(1));

    if (mcfg.variant == Variant::full)
        g.attn = dense_mha_backward(w.attn, p.attn.proj, d_x_mid);
    else
        g.attn = bsa_backward(w.attn, *tree, mcfg.attn, p.attn, d_x_mid);
    const auto norm1 = rmsnorm_vjp(w.x_in, p.norm1_gain, g.attn.d_x);
    g.d_norm1_gain = norm1.d_gain;
    g.d_x = d_x_mid;
    g.d_x.add_scaled(norm1.d_x, Real(1));
    return g;
}

template <class Real>
ModelParams<Real> init_model_params(const ModelConfig& mcfg, std::uint64_t seed) {
    const BsaConfig& a = mcfg.attn;
    Rng rng(mix_seed(seed, 0xb5a));
    ModelParams<Real> p;
    p.embed = random_matrix<Real>(rng, mcfg.in_dim, a.model_dim,
                                  1.0 / std::sqrt(double(mcfg.in_dim)));
    for (std::size_t b = 0; b < mcfg.depth; ++b) {
        BlockParams<Real> blk;
        blk.norm1_gain = Matrix<Real>(1, a.model_dim, Real(1));
        blk.norm2_gain = Matrix<Real>(1, a.model_dim, Real(1));
        const double ws = 1.0 / std::sqrt(double(a.model_dim));
        for (std::size_t h = 0; h < a.heads; ++h) {
            blk.attn.proj.w_q.push_back(random_matrix<Real>(rng, a.model_dim, a.head_dim, ws));
            blk.attn.proj.w_k.push_back(random_matrix<Real>(rng, a.model_dim, a.head_dim, ws));
            blk.attn.proj.w_v.push_back(random_matrix<Real>(rng, a.model_dim, a.head_dim, ws));
        }
        blk.attn.proj.w_o = random_matrix<Real>(rng, a.heads * a.head_dim, a.model_dim,
                                                1.0 / std::sqrt(double(a.heads * a.head_dim)));
        if (mcfg.variant != Variant::full) {
            blk.attn.gates.ball = Matrix<Real>(1, a.heads);
            blk.attn.gates.cmp = Matrix<Real>(1, a.heads);
            blk.attn.gates.slc = Matrix<Real>(1, a.heads);
            if (a.phi_kind == PhiKind::mlp) {
                blk.attn.phi_k = init_phi_weights<Real>(a.block_len, a.head_dim, rng);
                blk.attn.phi_v = init_phi_weights<Real>(a.block_len, a.head_dim, rng);
                if (a.group_compression)
                    blk.attn.phi_q = init_phi_weights<Real>(a.block_len, a.head_dim, rng);
            }
        }
        blk.ffn_w1 = random_matrix<Real>(rng, a.model_dim, mcfg.ffn_hidden(), ws);
        blk.ffn_w2 = random_matrix<Real>(rng, a.model_dim, mcfg.ffn_hidden(), ws);
        blk.ffn_w3 = random_matrix<Real>(rng, mcfg.ffn_hidden(), a.model_dim,
                                         1.0 / std::sqrt(double(mcfg.ffn_hidden())));
        p.blocks.push_back(std::move(blk));
    }
    p.head_w = random_matrix<Real>(rng, a.model_dim, 1, 1.0 / std::sqrt(double(a.model_dim)));
    p.head_b = Matrix<Real>(1, 1);
    return p;
}

/// Deterministic enumeration of every live tensor, used by the optimizer,
/// checkpoints, and gradient plumbing. Empty (unused) tensors are skipped.
template <class Real>
std::vector<std::pair<std::string, Matrix<Real>*>> named_tensors(ModelParams<Real>& p) {
    std::vector<std::pair<std::string, Matrix<Real>*>> out;
    auto add = [&](std::string name, Matrix<Real>& m) {
        if (!m.empty()) out.emplace_back(std::move(name), &m);
    };
    add("embed.w", p.embed);
    for (std::size_t b = 0; b < p.blocks.size(); ++b) {
        auto& blk = p.blocks[b];
        const std::string base = "block" + std::to_string(b) + ".";
        add(base + "norm1.gain", blk.norm1_gain);
        for (std::size_t h = 0; h < blk.attn.proj.w_q.size(); ++h) {
            const std::string hs = std::to_string(h);
            add(base + "attn.wq." + hs, blk.attn.proj.w_q[h]);
            add(base + "attn.wk." + hs, blk.attn.proj.w_k[h]);
            add(base + "attn.wv." + hs, blk.attn.proj.w_v[h]);
        }
        add(base + "attn.wo", blk.attn.proj.w_o);
        add(base + "attn.phi_k.wa", blk.attn.phi_k.wa);
        add(base + "attn.phi_k.wb", blk.attn.phi_k.wb);
        add(base + "attn.phi_k.wo", blk.attn.phi_k.wo);
        add(base + "attn.phi_v.wa", blk.attn.phi_v.wa);
        add(base + "attn.phi_v.wb", blk.attn.phi_v.wb);
        add(base + "attn.phi_v.wo", blk.attn.phi_v.wo);
        add(base + "attn.phi_q.wa", blk.attn.phi_q.wa);
        add(base + "attn.phi_q.wb", blk.attn.phi_q.wb);
        add(base + "attn.phi_q.wo", blk.attn.phi_q.wo);
        add(base + "attn.gate.ball", blk.attn.gates.ball);
        add(base + "attn.gate.cmp", blk.attn.gates.cmp);
        add(base + "attn.gate.slc", blk.attn.gates.slc);
        add(base + "norm2.gain", blk.norm2_gain);
        add(base + "ffn.w1", blk.ffn_w1);
        add(base + "ffn.w2", blk.ffn_w2);
        add(base + "ffn.w3", blk.ffn_w3);
    }
    add("head.w", p.head_w);
    add("head.b", p.head_b);
    return out;
}

template <class Real>
ModelParams<Real> zero_like(const ModelParams<Real>& p) {
    ModelParams<Real> z;
    z.embed = Matrix<Real>(p.embed.rows(), p.embed.cols());
    for (const auto& blk : p.blocks) {
        BlockParams<Real> zb;
        auto zero = [](const Matrix<Real>& m) {
            return m.empty() ? Matrix<Real>() : Matrix<Real>(m.rows(), m.cols());
        };
        zb.norm1_gain = zero(blk.norm1_gain);
        zb.norm2_gain = zero(blk.norm2_gain);
        for (const auto& m : blk.attn.proj.w_q) zb.attn.proj.w_q.push_back(zero(m));
        for (const auto& m : blk.attn.proj.w_k) zb.attn.proj.w_k.push_back(zero(m));
        for (const auto& m : blk.attn.proj.w_v) zb.attn.proj.w_v.push_back(zero(m));
        zb.attn.proj.w_o = zero(blk.attn.proj.w_o);
        zb.attn.phi_k.wa = zero(blk.attn.phi_k.wa);
        zb.attn.phi_k.wb = zero(blk.attn.phi_k.wb);
        zb.attn.phi_k.wo = zero(blk.attn.phi_k.wo);
        zb.attn.phi_v.wa = zero(blk.attn.phi_v.wa);
        zb.attn.phi_v.wb = zero(blk.attn.phi_v.wb);
        zb.attn.phi_v.wo = zero(blk.attn.phi_v.wo);
        zb.attn.phi_q.wa = zero(blk.attn.phi_q.wa);
        zb.attn.phi_q.wb = zero(blk.attn.phi_q.wb);
        zb.attn.phi_q.wo = zero(blk.attn.phi_q.wo);
        zb.attn.gates.ball = zero(blk.attn.gates.ball);
        zb.attn.gates.cmp = zero(blk.attn.gates.cmp);
        zb.attn.gates.slc = zero(blk.attn.gates.slc);
        zb.ffn_w1 = zero(blk.ffn_w1);
        zb.ffn_w2 = zero(blk.ffn_w2);
        zb.ffn_w3 = zero(blk.ffn_w3);
        z.blocks.push_back(std::move(zb));
    }
    z.head_w = Matrix<Real>(p.head_w.rows(), p.head_w.cols());
    z.head_b = Matrix<Real>(p.head_b.rows(), p.head_b.cols());
    return z;
}

/// Frozen per-block selection plans captured on one forward and replayed on
/// later ones, keeping the discrete choices constant under perturbation.
struct PlanCache {
    std::vector<SelectionPlan> per_block;
    bool capture = true;
};

template <class Real>
struct ModelWorkspace {
    Matrix<Real> embedded;
    std::vector<BlockWorkspace<Real>> blocks;
    Matrix<Real> trunk_out;
};

template <class Real>
Matrix<Real> model_forward(const Matrix<Real>& features, const BallTree* tree,
                           const ModelConfig& mcfg, const ModelParams<Real>& params,
                           ModelWorkspace<Real>* ws = nullptr, PlanCache* plans = nullptr) {
    require(mcfg.depth >= 1, "model_forward: depth must be >= 1");
    require_shape(features.cols() == params.embed.rows(), "model_forward feature width");
    ModelWorkspace<Real> local;
    ModelWorkspace<Real>& w = ws != nullptr ? *ws : local;
    w.blocks.assign(mcfg.depth, {});
    w.embedded = matmul(features, params.embed);
    Matrix<Real> x = w.embedded;
    if (plans != nullptr && plans->capture) plans->per_block.assign(mcfg.depth, {});
    for (std::size_t b = 0; b < mcfg.depth; ++b) {
        const SelectionPlan* fixed = nullptr;
        if (plans != nullptr && !plans->capture && mcfg.variant != Variant::full)
            fixed = &plans->per_block[b];
        x = block_forward(x, tree, mcfg, params.blocks[b], &w.blocks[b], fixed);
        if (plans != nullptr && plans->capture && mcfg.variant != Variant::full)
            plans->per_block[b] = w.blocks[b].attn.plan;
    }
    w.trunk_out = x;
    Matrix<Real> preds = matmul(x, params.head_w);
    for (std::size_t i = 0; i < preds.rows(); ++i) preds(i, 0) += params.head_b(0, 0);
    return preds;
}

/// Mean squared error over per-point predictions plus the full backward pass.
/// Returns the loss; parameter gradients land in `grads` (same shape tree as
/// params), input-feature gradients in d_features when non-null.
template <class Real>
double model_loss_grad(const Matrix<Real>& features, const Matrix<Real>& targets,
                       const BallTree* tree, const ModelConfig& mcfg,
                       const ModelParams<Real>& params, ModelParams<Real>& grads,
                       Matrix<Real>* d_features = nullptr, PlanCache* plans = nullptr) {
    require_shape(targets.rows() == features.rows() && targets.cols() == 1,
                  "model_loss_grad targets");
    ModelWorkspace<Real> ws;
    const Matrix<Real> preds = model_forward(features, tree, mcfg, params, &ws, plans);
    const std::size_t n = preds.rows();
    double loss = 0;
    Matrix<Real> d_preds(n, 1);
    for (std::size_t i = 0; i < n; ++i) {
        const double err = double(preds(i, 0)) - double(targets(i, 0));
        loss += err * err;
        d_preds(i, 0) = Real(2.0 * err / double(n));
    }
    loss /= double(n);

    grads.head_w.add_scaled(matmul_tn(ws.trunk_out, d_preds), Real(1));
    for (std::size_t i = 0; i < n; ++i) grads.head_b(0, 0) += d_preds(i, 0);
    Matrix<Real> d_x = matmul_nt(d_preds, params.head_w);
    for (std::size_t b = mcfg.depth; b-- > 0;) {
        const auto bg = block_backward(ws.blocks[b], tree, mcfg, params.blocks[b], d_x);
        auto& gb = grads.blocks[b];
        gb.norm1_gain.add_scaled(bg.d_norm1_gain, Real(1));
        gb.norm2_gain.add_scaled(bg.d_norm2_gain, Real(1));
        for (std::size_t h = 0; h < gb.attn.proj.w_q.size(); ++h) {
            gb.attn.proj.w_q[h].add_scaled(bg.attn.proj.d_wq[h], Real(1));
            gb.attn.proj.w_k[h].add_scaled(bg.attn.proj.d_wk[h], Real(1));
            gb.attn.proj.w_v[h].add_scaled(bg.attn.proj.d_wv[h], Real(1));
        }
        gb.attn.proj.w_o.add_scaled(bg.attn.d_wo, Real(1));
        if (mcfg.variant != Variant::full) {
            gb.attn.gates.ball.add_scaled(bg.attn.d_gates.ball, Real(1));
            gb.attn.gates.cmp.add_scaled(bg.attn.d_gates.cmp, Real(1));
            gb.attn.gates.slc.add_scaled(bg.attn.d_gates.slc, Real(1));
            auto add_phi = [](Matrix<Real>& into, const Matrix<Real>& from) {
                if (!from.empty()) into.add_scaled(from, Real(1));
            };
            add_phi(gb.attn.phi_k.wa, bg.attn.phi_k.d_wa);
            add_phi(gb.attn.phi_k.wb, bg.attn.phi_k.d_wb);
            add_phi(gb.attn.phi_k.wo, bg.attn.phi_k.d_wo);
            add_phi(gb.attn.phi_v.wa, bg.attn.phi_v.d_wa);
            add_phi(gb.attn.phi_v.wb, bg.attn.phi_v.d_wb);
            add_phi(gb.attn.phi_v.wo, bg.attn.phi_v.d_wo);
            add_phi(gb.attn.phi_q.wa, bg.attn.phi_q.d_wa);
            add_phi(gb.attn.phi_q.wb, bg.attn.phi_q.d_wb);
            add_phi(gb.attn.phi_q.wo, bg.attn.phi_q.d_wo);
        }
        gb.ffn_w1.add_scaled(bg.d_ffn_w1, Real(1));
        gb.ffn_w2.add_scaled(bg.d_ffn_w2, Real(1));
        gb.ffn_w3.add_scaled(bg.d_ffn_w3, Real(1));
        d_x = bg.d_x;
    }
    grads.embed.add_scaled(matmul_tn(features, d_x), Real(1));
    if (d_features != nullptr) *d_features = matmul_nt(d_x, params.embed);
    return loss;
}

/// Slots a token can see through the enabled branches: its ball, the tokens
/// of its unit's selected blocks, and (compression being global) every valid
/// slot. Returned ascending, valid slots only.
inline std::vector<int> receptive_field(const BallTree& tree, const BsaConfig& cfg,
                                        const SelectionPlan& plan, std::size_t t,
                                        bool include_ball, bool include_selection,
                                        bool include_compression) {
    require(t < tree.n_padded, "receptive_field: token out of range");
    require(tree.valid_mask[t], "receptive_field: padded token");
    std::vector<std::uint8_t> in(tree.n_padded, 0);
    if (include_ball) {
        const auto [lo, hi] = tree.ball_ranges[tree.ball_of_slot(t)];
        for (std::size_t s = lo; s < hi; ++s) in[s] = 1;
    }
    if (include_selection) {
        require(plan.unit_tokens >= 1, "receptive_field: plan missing");
        const std::size_t u = t / plan.unit_tokens;
        for (int b : plan.blocks[u])
            for (std::size_t s = std::size_t(b) * plan.block_len;
                 s < std::size_t(b + 1) * plan.block_len; ++s)
                in[s] = 1;
    }
    if (include_compression)
        for (std::size_t s = 0; s < tree.n_padded; ++s) in[s] = 1;
    std::vector<int> out;
    for (std::size_t s = 0; s < tree.n_padded; ++s)
        if (in[s] && tree.valid_mask[s]) out.push_back(int(s));
    return out;
}

}  // namespace bsa
