// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdlib>
#include <functional>
#include <sstream>
#include <string>
#include <vector>

#include "bsa/bsa_layer.hpp"
#include "bsa/oracle.hpp"

namespace bsa {

struct CheckResult {
    std::string name;
    bool passed = false;
    std::string detail;  // shown after the PASS/FAIL tag; may be empty
};

struct CheckReport {
    std::vector<CheckResult> results;
    bool all_passed() const {
        for (const auto& r : results)
            if (!r.passed) return false;
        return true;
    }
    std::string to_text() const {
        std::ostringstream out;
        for (const auto& r : results) {
            out << (r.passed ? "PASS" : "FAIL") << " " << r.name;
            if (!r.detail.empty()) out << " (" << r.detail << ")";
            out << "\n";
        }
        out << (all_passed() ? "all checks passed" : "CHECK FAILURES PRESENT") << "\n";
        return out.str();
    }
};

namespace detail {

/// Reference top-k used to cross-check select_topk. The environment variable
/// BSA_CHECK_CORRUPT_TIES=1 deliberately breaks its tie rule (prefers the
/// higher index on equal scores) so the harness itself can be shown to fail.
inline std::vector<int> checked_topk(const std::vector<double>& scores, int k,
                                     const std::vector<std::uint8_t>& excluded) {
    static const bool corrupt = [] {
        const char* v = std::getenv("BSA_CHECK_CORRUPT_TIES");
        return v != nullptr && std::string(v) == "1";
    }();
    if (!corrupt) return oracle::brute_force_topk(scores, k, excluded);
    std::vector<int> order;
    for (int j = 0; j < int(scores.size()); ++j)
        if (excluded.empty() || !excluded[j]) order.push_back(j);
    std::stable_sort(order.begin(), order.end(), [&](int a, int b) {
        if (scores[a] != scores[b]) return scores[a] > scores[b];
        return a > b;  // wrong way on ties
    });
    order.resize(std::size_t(k));
    std::sort(order.begin(), order.end());
    return order;
}

}  // namespace detail

/// Tie-heavy random rows: selection must match the reference exactly,
/// including the lowest-index-wins rule and exclusion handling.
inline CheckResult check_topk_against_reference(std::uint64_t seed) {
    CheckResult r{"topk-matches-reference", true, ""};
    Rng rng(mix_seed(seed, 0x70b1));
    std::size_t mismatches = 0, rows = 0;
    const std::size_t trials = 400;
    for (std::size_t t = 0; t < trials; ++t) {
        const std::size_t n = 4 + rng.uniform_index(28);
        std::vector<double> scores(n);
        for (auto& s : scores) s = double(rng.uniform_index(4));  // few levels, many ties
        std::vector<std::uint8_t> excluded(n, 0);
        std::size_t candidates = 0;
        for (std::size_t i = 0; i < n; ++i) {
            excluded[i] = rng.uniform() < 0.15 ? 1 : 0;
            candidates += excluded[i] ? 0 : 1;
        }
        if (candidates == 0) continue;
        const std::size_t k = 1 + rng.uniform_index(candidates);
        ++rows;
        const auto got = select_topk(scores.data(), n, k, excluded.data());
        const auto want = detail::checked_topk(scores, int(k), excluded);
        if (got != want) ++mismatches;
    }
    if (mismatches > 0) {
        r.passed = false;
        std::ostringstream d;
        d << mismatches << "/" << rows << " rows disagree";
        r.detail = d.str();
    } else {
        r.detail = std::to_string(rows) + " tied rows";
    }
    return r;
}

/// With a single ball covering the padded sequence, no masking, and every
/// block selected, each branch must reproduce plain dense attention.
inline CheckResult check_saturated_branches(std::uint64_t seed) {
    CheckResult r{"saturated-branches-match-dense", true, ""};
    const std::size_t n = 64, d = 8;
    Rng prng(mix_seed(seed, 0x5a70));
    PointCloud pts{random_uniform_matrix<double>(prng, n, 3, 0.0, 1.0)};
    const BallTree tree = build_ball_tree(pts, n);
    Rng rng(mix_seed(seed, 0x5a71));
    const auto q = random_matrix<double>(rng, n, d);
    const auto k = random_matrix<double>(rng, n, d);
    const auto v = random_matrix<double>(rng, n, d);
    const auto dense = oracle::dense_reference(q, k, v);

    double worst = 0;
    worst = std::max(worst, max_abs_diff(ball_attention(q, k, v, tree), dense));

    PhiWeights<double> phi;  // mean pooling
    const auto kc = compress_blocks(k, 1, phi, tree.valid_mask);
    const auto vc = compress_blocks(v, 1, phi, tree.valid_mask);
    worst = std::max(worst,
                     max_abs_diff(compressed_attention(q, kc.tokens, vc.tokens, kc.valid), dense));

    BsaConfig cfg;
    cfg.ball_size = n;
    cfg.block_len = 1;
    cfg.top_k = n;
    cfg.group_size = 1;
    cfg.head_dim = d;
    cfg.ball_masking = false;
    cfg.group_selection = false;
    cfg.validate_for(tree.n_padded);
    const auto scores = importance_scores(q, kc.tokens);
    const auto plan = build_selection_plan(scores, cfg, tree, 1, kc.valid, {});
    worst = std::max(worst,
                     max_abs_diff(selection_attention(q, k, v, plan, tree.valid_mask), dense));

    std::ostringstream d2;
    d2 << "max |diff| " << worst;
    r.detail = d2.str();
    if (!(worst <= 1e-5)) r.passed = false;
    return r;
}

/// Selection plans: sorted unique block ids in range, own-ball blocks absent
/// whenever masking is on, and one shared plan row per query group.
inline CheckResult check_plan_soundness(std::uint64_t seed) {
    CheckResult r{"selection-plan-sound", true, ""};
    Rng rng(mix_seed(seed, 0x91a2));
    for (std::size_t trial = 0; trial < 20 && r.passed; ++trial) {
        BsaConfig cfg;
        cfg.ball_size = 16;
        cfg.block_len = 4;
        cfg.top_k = 1 + rng.uniform_index(3);
        cfg.group_size = 4;
        cfg.heads = 2;
        cfg.model_dim = 16;
        cfg.head_dim = 8;
        const std::size_t n = 33 + rng.uniform_index(64);
        PointCloud pts{random_uniform_matrix<double>(rng, n, 3, 0.0, 1.0)};
        const BallTree tree = build_ball_tree(pts, cfg.ball_size);
        cfg.validate_for(tree.n_padded);

        const auto q = random_matrix<double>(rng, tree.n_padded, cfg.head_dim);
        const auto k = random_matrix<double>(rng, tree.n_padded, cfg.head_dim);
        PhiWeights<double> phi;
        const auto kc = compress_blocks(k, cfg.block_len, phi, tree.valid_mask);
        const auto qg = pool_group_queries(q, cfg.group_size, tree.valid_mask);
        std::vector<std::uint8_t> has_query(tree.n_padded / cfg.group_size, 0);
        for (std::size_t u = 0; u < has_query.size(); ++u)
            for (std::size_t t = u * cfg.group_size; t < (u + 1) * cfg.group_size; ++t)
                if (tree.valid_mask[t]) has_query[u] = 1;
        const auto scores = importance_scores(qg, kc.tokens);
        const auto plan =
            build_selection_plan(scores, cfg, tree, cfg.group_size, kc.valid, has_query);

        for (std::size_t u = 0; u < plan.n_units(); ++u) {
            const auto& sel = plan.blocks[u];
            for (std::size_t i = 0; i < sel.size(); ++i) {
                if (std::size_t(sel[i]) >= cfg.n_blocks(tree.n_padded)) r.passed = false;
                if (i > 0 && sel[i] <= sel[i - 1]) r.passed = false;
                const std::size_t ball = std::size_t(sel[i]) * cfg.block_len / cfg.ball_size;
                const std::size_t unit_ball = u * cfg.group_size / cfg.ball_size;
                if (cfg.ball_masking && ball == unit_ball) r.passed = false;
            }
        }
        if (!r.passed) r.detail = "violation in trial " + std::to_string(trial);
    }
    return r;
}

/// End-to-end gradient of the trained objective against central finite
/// differences in high precision, selection plans frozen.
inline CheckResult check_model_gradients(std::uint64_t seed) {
    CheckResult r{"model-gradients-match-fd", true, ""};
    ModelConfig mcfg;
    mcfg.attn.ball_size = 8;
    mcfg.attn.block_len = 2;
    mcfg.attn.top_k = 2;
    mcfg.attn.group_size = 4;
    mcfg.attn.heads = 2;
    mcfg.attn.model_dim = 8;
    mcfg.attn.head_dim = 4;
    mcfg.variant = Variant::bsa;
    apply_variant(mcfg.attn, mcfg.variant);
    mcfg.depth = 2;
    mcfg.in_dim = 3;

    const std::size_t n = 32;
    Rng prng(mix_seed(seed, 0xfd01));
    PointCloud pts{random_uniform_matrix<double>(prng, n, 3, 0.0, 1.0)};
    const BallTree tree = build_ball_tree(pts, mcfg.attn.ball_size);
    auto params = init_model_params<double>(mcfg, mix_seed(seed, 0xfd02));
    Rng trng(mix_seed(seed, 0xfd03));
    Matrix<double> targets(n, 1);
    for (std::size_t i = 0; i < n; ++i) targets(i, 0) = trng.normal();

    PlanCache plans;
    auto grads = zero_like(params);
    model_loss_grad<double>(pts.coords, targets, &tree, mcfg, params, grads, nullptr, &plans);
    plans.capture = false;

    auto names = named_tensors(params);
    auto gnames = named_tensors(grads);
    std::vector<double> flat, gflat;
    for (auto& [name, m] : names)
        flat.insert(flat.end(), m->data().begin(), m->data().end());
    for (auto& [name, m] : gnames)
        gflat.insert(gflat.end(), m->data().begin(), m->data().end());

    const auto eval = [&](const std::vector<double>& x) {
        auto p = params;
        auto pn = named_tensors(p);
        std::size_t off = 0;
        for (auto& [name, m] : pn) {
            std::copy(x.begin() + off, x.begin() + off + m->size(), m->data().begin());
            off += m->size();
        }
        auto g = zero_like(p);
        const double loss =
            model_loss_grad<double>(pts.coords, targets, &tree, mcfg, p, g, nullptr, &plans);
        return std::vector<double>{loss};
    };
    const auto report = oracle::fd_vjp_check(eval, flat, {1.0}, gflat, 1e-5);
    std::ostringstream d;
    d << "max rel err " << report.max_rel_err << " at " << report.worst_coordinate;
    r.detail = d.str();
    if (!(report.max_rel_err <= 1e-4)) r.passed = false;
    return r;
}

/// Receptive fields nest (ball within ball+selection within all three) and
/// the compression branch reaches every valid token.
inline CheckResult check_receptive_field(std::uint64_t seed) {
    CheckResult r{"receptive-field-nesting", true, ""};
    BsaConfig cfg;
    cfg.ball_size = 16;
    cfg.block_len = 4;
    cfg.top_k = 2;
    cfg.group_size = 4;
    cfg.heads = 2;
    cfg.model_dim = 16;
    cfg.head_dim = 8;
    const std::size_t n = 60;
    Rng prng(mix_seed(seed, 0x6f1d));
    PointCloud pts{random_uniform_matrix<double>(prng, n, 3, 0.0, 1.0)};
    const BallTree tree = build_ball_tree(pts, cfg.ball_size);
    cfg.validate_for(tree.n_padded);

    const auto x = random_matrix<double>(prng, n, cfg.model_dim, 0.5);
    ModelConfig mcfg;
    mcfg.attn = cfg;
    mcfg.depth = 1;
    const auto params = init_model_params<double>(mcfg, mix_seed(seed, 0x6f1e));
    AttnWorkspace<double> ws;
    bsa_forward(x, tree, cfg, params.blocks[0].attn, &ws);

    std::vector<char> covered(n, 0);
    for (std::size_t slot = 0; slot < tree.n_padded && r.passed; ++slot) {
        if (!tree.valid_mask[slot]) continue;
        const auto ball = receptive_field(tree, cfg, ws.plan, slot, true, false, false);
        const auto mid = receptive_field(tree, cfg, ws.plan, slot, true, true, false);
        const auto all = receptive_field(tree, cfg, ws.plan, slot, true, true, true);
        if (!std::includes(mid.begin(), mid.end(), ball.begin(), ball.end())) r.passed = false;
        if (!std::includes(all.begin(), all.end(), mid.begin(), mid.end())) r.passed = false;
        if (all.size() != tree.n_valid) r.passed = false;
        for (int s : all)
            if (std::size_t(s) < n) covered[std::size_t(s)] = 1;
    }
    for (std::size_t i = 0; i < n; ++i)
        if (!covered[i]) r.passed = false;
    if (!r.passed) r.detail = "nesting or coverage violated";
    return r;
}

/// Two identical seeded forward passes must agree bit for bit, and the
/// result must not depend on the worker-thread count.
inline CheckResult check_determinism(std::uint64_t seed) {
    CheckResult r{"forward-deterministic", true, ""};
    BsaConfig cfg;
    cfg.ball_size = 32;
    cfg.block_len = 8;
    cfg.top_k = 1;
    cfg.group_size = 8;
    cfg.heads = 2;
    cfg.model_dim = 16;
    cfg.head_dim = 8;
    const std::size_t n = 96;
    Rng prng(mix_seed(seed, 0xde7e));
    PointCloud pts{random_uniform_matrix<double>(prng, n, 3, 0.0, 1.0)};
    const BallTree tree = build_ball_tree(pts, cfg.ball_size);
    cfg.validate_for(tree.n_padded);
    const auto x = random_matrix<double>(prng, n, cfg.model_dim, 0.5);
    ModelConfig mcfg;
    mcfg.attn = cfg;
    mcfg.depth = 1;
    const auto params = init_model_params<double>(mcfg, mix_seed(seed, 0xde7f));

    const std::size_t saved = thread_count();
    set_thread_count(1);
    const auto a = bsa_forward(x, tree, cfg, params.blocks[0].attn);
    const auto b = bsa_forward(x, tree, cfg, params.blocks[0].attn);
    set_thread_count(2);
    const auto c = bsa_forward(x, tree, cfg, params.blocks[0].attn);
    set_thread_count(saved);
    if (a.data() != b.data()) {
        r.passed = false;
        r.detail = "rerun differs";
    } else if (a.data() != c.data()) {
        r.passed = false;
        r.detail = "thread count changes result";
    }
    return r;
}

inline CheckReport run_all_checks(std::uint64_t seed) {
    CheckReport report;
    report.results.push_back(check_topk_against_reference(seed));
    report.results.push_back(check_saturated_branches(seed));
    report.results.push_back(check_plan_soundness(seed));
    report.results.push_back(check_model_gradients(seed));
    report.results.push_back(check_receptive_field(seed));
    report.results.push_back(check_determinism(seed));
    return report;
}

}  // namespace bsa
