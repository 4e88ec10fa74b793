// SPDX-License-Identifier: Apache-2.0
#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <vector>

#include "bsa/branches.hpp"
#include "bsa/oracle.hpp"

using bsa::BallTree;
using bsa::BsaConfig;
using bsa::Matrix;
using bsa::PhiWeights;

namespace {

std::vector<double> flatten(std::initializer_list<const Matrix<double>*> ms) {
    std::vector<double> x;
    for (const auto* m : ms) x.insert(x.end(), m->data().begin(), m->data().end());
    return x;
}

void unflatten(const std::vector<double>& x, std::initializer_list<Matrix<double>*> ms) {
    std::size_t at = 0;
    for (auto* m : ms) {
        std::copy(x.begin() + at, x.begin() + at + m->size(), m->data().begin());
        at += m->size();
    }
}

// sorted 1d points give the identity permutation, so padded-order tensors are
// easy to reason about in tests
BallTree line_tree(std::size_t n, std::size_t m) {
    bsa::PointCloud pc;
    pc.coords = Matrix<double>(n, 1);
    for (std::size_t i = 0; i < n; ++i) pc.coords(i, 0) = double(i);
    return bsa::build_ball_tree(pc, m);
}

std::vector<std::uint8_t> mask_of(const BallTree& tree) { return tree.valid_mask; }

}  // namespace

TEST_CASE("mean compression averages valid rows only") {
    Matrix<double> t(4, 1);
    t(0, 0) = 1;
    t(1, 0) = 3;
    t(2, 0) = 5;
    t(3, 0) = 99;  // padded, must be ignored
    PhiWeights<double> mean;
    const std::vector<std::uint8_t> valid{1, 1, 1, 0};
    const auto c = bsa::compress_blocks(t, 2, mean, valid);
    REQUIRE(c.tokens(0, 0) == 2.0);
    REQUIRE(c.tokens(1, 0) == 5.0);
    REQUIRE(c.valid == std::vector<std::uint8_t>{1, 1});
}

TEST_CASE("an all-padded block is flagged invalid") {
    Matrix<double> t(4, 2, 7.0);
    PhiWeights<double> mean;
    const std::vector<std::uint8_t> valid{1, 1, 0, 0};
    const auto c = bsa::compress_blocks(t, 2, mean, valid);
    REQUIRE(c.valid == std::vector<std::uint8_t>{1, 0});
    REQUIRE(c.tokens(1, 0) == 0.0);
    REQUIRE(c.tokens(1, 1) == 0.0);
}

TEST_CASE("gated mlp compressor can represent the identity at block length one") {
    const std::size_t d = 3;
    PhiWeights<double> phi;
    phi.wa = Matrix<double>(d, 2 * d);
    phi.wb = Matrix<double>(d, 2 * d);  // zero gate input halves the signal
    phi.wo = Matrix<double>(2 * d, d);
    for (std::size_t i = 0; i < d; ++i) {
        phi.wa(i, i) = 2.0;
        phi.wo(i, i) = 1.0;
    }
    bsa::Rng rng(1);
    const auto t = bsa::random_matrix<double>(rng, 5, d);
    const auto c = bsa::compress_blocks(t, 1, phi, {});
    REQUIRE(bsa::max_abs_diff(c.tokens, t) == 0.0);
}

TEST_CASE("compression vjps match finite differences") {
    bsa::Rng rng(2);
    const std::size_t l = 3, d = 2, rows = 9;
    const std::vector<std::uint8_t> valid{1, 1, 1, 1, 0, 1, 1, 1, 0};

    SECTION("mean") {
        PhiWeights<double> mean;
        const auto t = bsa::random_matrix<double>(rng, rows, d);
        const auto gout = bsa::random_matrix<double>(rng, rows / l, d);
        const auto g = bsa::compress_blocks_vjp(t, l, mean, valid, gout);
        auto f = [&](const std::vector<double>& x) {
            Matrix<double> tt(rows, d);
            unflatten(x, {&tt});
            return bsa::compress_blocks(tt, l, mean, valid).tokens.data();
        };
        const auto report = bsa::oracle::fd_vjp_check(f, t.data(), gout.data(), g.d_t.data());
        REQUIRE(report.max_rel_err <= 1e-6);
    }

    SECTION("mlp") {
        auto phi = bsa::init_phi_weights<double>(l, d, rng);
        const auto t = bsa::random_matrix<double>(rng, rows, d);
        const auto gout = bsa::random_matrix<double>(rng, rows / l, d);
        const auto g = bsa::compress_blocks_vjp(t, l, phi, valid, gout);
        const auto analytic = flatten({&g.d_t, &g.d_wa, &g.d_wb, &g.d_wo});
        auto f = [&](const std::vector<double>& x) {
            Matrix<double> tt(rows, d);
            PhiWeights<double> pw;
            pw.wa = Matrix<double>(l * d, 2 * d);
            pw.wb = Matrix<double>(l * d, 2 * d);
            pw.wo = Matrix<double>(2 * d, d);
            unflatten(x, {&tt, &pw.wa, &pw.wb, &pw.wo});
            return bsa::compress_blocks(tt, l, pw, valid).tokens.data();
        };
        const auto report = bsa::oracle::fd_vjp_check(
            f, flatten({&t, &phi.wa, &phi.wb, &phi.wo}), gout.data(), analytic);
        REQUIRE(report.max_rel_err <= 1e-6);
    }
}

TEST_CASE("importance scores are raw dot products") {
    Matrix<double> qs(1, 1), kc(2, 1);
    qs(0, 0) = 2;
    kc(0, 0) = 3;
    kc(1, 0) = -1;
    const auto s = bsa::importance_scores(qs, kc);
    REQUIRE(s(0, 0) == 6.0);
    REQUIRE(s(0, 1) == -2.0);

    Matrix<double> zero(3, 4, 0.0);
    bsa::Rng rng(3);
    const auto k4 = bsa::random_matrix<double>(rng, 5, 4);
    REQUIRE(bsa::max_abs_diff(bsa::importance_scores(zero, k4), Matrix<double>(3, 5)) == 0.0);

    Matrix<double> qx(1, 2), ky(1, 2);
    qx(0, 0) = 1;  // orthogonal pair
    ky(0, 1) = 5;
    REQUIRE(bsa::importance_scores(qx, ky)(0, 0) == 0.0);

    Matrix<double> bad(2, 3);
    REQUIRE_THROWS_AS(bsa::importance_scores(qx, bad), std::invalid_argument);
}

TEST_CASE("group averaging of scores and queries") {
    bsa::Rng rng(4);
    const auto s = bsa::random_matrix<double>(rng, 6, 3);
    REQUIRE(bsa::max_abs_diff(bsa::group_average_scores(s, 1), s) == 0.0);

    const auto whole = bsa::group_average_scores(s, 6);
    for (std::size_t c = 0; c < 3; ++c) {
        double want = 0;
        for (std::size_t r = 0; r < 6; ++r) want += s(r, c);
        REQUIRE(whole(0, c) == Catch::Approx(want / 6.0).margin(1e-12));
    }

    Matrix<double> two(2, 2);
    two(0, 0) = 1;
    two(1, 1) = 1;
    const auto avg = bsa::group_average_scores(two, 2);
    REQUIRE(avg(0, 0) == 0.5);
    REQUIRE(avg(0, 1) == 0.5);

    // invalid rows drop out of the mean
    const auto masked = bsa::group_average_scores(two, 2, {1, 0});
    REQUIRE(masked(0, 0) == 1.0);
    REQUIRE(masked(0, 1) == 0.0);

    Matrix<double> q(2, 1);
    q(0, 0) = 0;
    q(1, 0) = 2;
    REQUIRE(bsa::pool_group_queries(q, 2)(0, 0) == 1.0);
    Matrix<double> same(2, 3, 4.25);
    REQUIRE(bsa::max_abs_diff(bsa::pool_group_queries(same, 2), Matrix<double>(1, 3, 4.25)) ==
            0.0);
}

TEST_CASE("query pooling coincides with mean block compression") {
    bsa::Rng rng(5);
    const std::size_t g = 4;
    const auto q = bsa::random_matrix<double>(rng, 16, 5);
    std::vector<std::uint8_t> valid(16, 1);
    valid[13] = valid[14] = valid[15] = 0;
    PhiWeights<double> mean;
    const auto pooled = bsa::pool_group_queries(q, g, valid);
    const auto compressed = bsa::compress_blocks(q, g, mean, valid);
    REQUIRE(bsa::max_abs_diff(pooled, compressed.tokens) == 0.0);
}

TEST_CASE("score averaging commutes with the coarse key map") {
    bsa::Rng rng(6);
    const std::size_t l = 4;
    const auto q = bsa::random_matrix<double>(rng, 16, 3);
    const auto kc = bsa::random_matrix<double>(rng, 4, 3);
    PhiWeights<double> mean;
    const auto lhs = bsa::group_average_scores(bsa::importance_scores(q, kc), l);
    const auto rhs = bsa::importance_scores(bsa::compress_blocks(q, l, mean, {}).tokens, kc);
    REQUIRE(bsa::max_abs_diff(lhs, rhs) < 1e-6);
}

TEST_CASE("ball containment mask marks exactly the own-ball blocks") {
    const auto tree = line_tree(8, 4);  // two balls of four

    const auto per_query = bsa::ball_block_mask(tree, 2, 1);
    REQUIRE(per_query.rows() == 8);
    REQUIRE(per_query.cols() == 4);
    // query 0 sits in ball 0, which holds blocks 0 and 1
    REQUIRE(per_query(0, 0) == 1);
    REQUIRE(per_query(0, 1) == 1);
    REQUIRE(per_query(0, 2) == 0);
    REQUIRE(per_query(0, 3) == 0);
    REQUIRE(per_query(7, 0) == 0);
    REQUIRE(per_query(7, 2) == 1);

    const auto block_eq_ball = bsa::ball_block_mask(line_tree(8, 2), 2, 1);
    for (std::size_t t = 0; t < 8; ++t) {
        std::size_t masked = 0;
        for (std::size_t j = 0; j < 4; ++j) masked += block_eq_ball(t, j);
        REQUIRE(masked == 1);
    }

    const auto disabled = bsa::ball_block_mask(tree, 2, 1, false);
    for (std::size_t i = 0; i < disabled.size(); ++i) REQUIRE(disabled.data()[i] == 0);

    REQUIRE_THROWS_AS(bsa::ball_block_mask(tree, 3, 1), std::invalid_argument);
    REQUIRE_THROWS_AS(bsa::ball_block_mask(tree, 2, 3), std::invalid_argument);
}

TEST_CASE("top-k selection breaks ties toward the lower block") {
    const std::vector<double> scores{0.5, 0.9, 0.5, 0.1};
    const auto picked = bsa::select_topk(scores.data(), scores.size(), 2, nullptr);
    REQUIRE(picked == std::vector<int>{0, 1});

    const auto all = bsa::select_topk(scores.data(), scores.size(), 4, nullptr);
    REQUIRE(all == std::vector<int>{0, 1, 2, 3});

    const std::vector<double> desc{9, 8, 7};
    const std::vector<std::uint8_t> excl{1, 0, 0};
    REQUIRE(bsa::select_topk(desc.data(), 3, 1, excl.data()) == std::vector<int>{1});

    REQUIRE_THROWS_AS(bsa::select_topk(desc.data(), 3, 3, excl.data()), std::invalid_argument);
}

TEST_CASE("top-k matches the brute-force oracle on tied random rows") {
    bsa::Rng rng(7);
    for (int trial = 0; trial < 1000; ++trial) {
        const std::size_t n = 2 + rng.uniform_index(30);
        std::vector<double> scores(n);
        for (auto& s : scores) s = double(rng.uniform_index(8)) / 4.0;  // heavy ties
        std::vector<std::uint8_t> excl(n, 0);
        for (auto& e : excl) e = rng.uniform() < 0.25 ? 1 : 0;
        std::size_t open = 0;
        for (auto e : excl) open += e ? 0 : 1;
        if (open == 0) {
            excl[rng.uniform_index(n)] = 0;
            open = 1;
        }
        const std::size_t k = 1 + rng.uniform_index(open);
        const auto got = bsa::select_topk(scores.data(), n, k, excl.data());
        const auto want = bsa::oracle::brute_force_topk(scores, int(k), excl);
        REQUIRE(got == want);
    }
}

TEST_CASE("selection plans are sorted, sound, and group-consistent") {
    bsa::Rng rng(8);
    const auto tree = line_tree(29, 8);  // N_pad = 32, 4 balls of 8
    BsaConfig cfg;
    cfg.ball_size = 8;
    cfg.block_len = 2;
    cfg.group_size = 4;
    cfg.top_k = 3;
    cfg.ball_masking = true;
    const std::size_t n_blocks = 16, n_groups = 8;

    const auto scores = bsa::random_matrix<double>(rng, n_groups, n_blocks);
    std::vector<std::uint8_t> coarse_valid(n_blocks, 1);
    coarse_valid[15] = 0;  // the padded tail block
    std::vector<std::uint8_t> unit_has_query(n_groups, 1);

    const auto plan =
        bsa::build_selection_plan(scores, cfg, tree, cfg.group_size, coarse_valid, unit_has_query);
    REQUIRE(plan.n_units() == n_groups);
    const auto own_ball = bsa::ball_block_mask(tree, cfg.block_len, cfg.group_size);
    for (std::size_t u = 0; u < n_groups; ++u) {
        REQUIRE(plan.blocks[u].size() == cfg.top_k);
        for (std::size_t i = 0; i < plan.blocks[u].size(); ++i) {
            const int b = plan.blocks[u][i];
            if (i > 0) REQUIRE(b > plan.blocks[u][i - 1]);
            REQUIRE(own_ball(u, std::size_t(b)) == 0);
            REQUIRE(coarse_valid[std::size_t(b)] == 1);
        }
    }
}

TEST_CASE("gather_selected concatenates the chosen blocks in order") {
    bsa::Rng rng(9);
    const auto k = bsa::random_matrix<double>(rng, 8, 3);
    const auto v = bsa::random_matrix<double>(rng, 8, 3);
    bsa::SelectionPlan plan;
    plan.block_len = 2;
    plan.unit_tokens = 8;
    plan.blocks = {{1, 3}};
    const auto got = bsa::gather_selected(k, v, plan, {});
    REQUIRE(got.k[0].rows() == 4);
    const std::size_t want_rows[] = {2, 3, 6, 7};
    for (std::size_t i = 0; i < 4; ++i)
        for (std::size_t c = 0; c < 3; ++c) {
            REQUIRE(got.k[0](i, c) == k(want_rows[i], c));
            REQUIRE(got.v[0](i, c) == v(want_rows[i], c));
        }

    bsa::SelectionPlan all;
    all.block_len = 2;
    all.unit_tokens = 8;
    all.blocks = {{0, 1, 2, 3}};
    const auto full = bsa::gather_selected(k, v, all, {});
    REQUIRE(bsa::max_abs_diff(full.k[0], k) == 0.0);
    REQUIRE(bsa::max_abs_diff(full.v[0], v) == 0.0);
}

TEST_CASE("selection attention saturates to dense attention") {
    bsa::Rng rng(10);
    for (std::size_t n : {16u, 64u}) {
        const auto tree = line_tree(n, n / 2);
        BsaConfig cfg;
        cfg.ball_size = n / 2;
        cfg.block_len = 4;
        cfg.group_size = 1;
        cfg.top_k = n / 4;  // every block
        cfg.ball_masking = false;
        const auto q = bsa::random_matrix<double>(rng, n, 5);
        const auto k = bsa::random_matrix<double>(rng, n, 5);
        const auto v = bsa::random_matrix<double>(rng, n, 5);
        const auto s = bsa::random_matrix<double>(rng, n, n / 4);
        const auto plan = bsa::build_selection_plan(s, cfg, tree, 1,
                                                    std::vector<std::uint8_t>(n / 4, 1), {});
        const auto got = bsa::selection_attention(q, k, v, plan, {});
        const auto want = bsa::attend(q, k, v);
        REQUIRE(bsa::max_abs_diff(got, want) < 1e-5);
    }
}

TEST_CASE("selection attention matches the gather-then-dense oracle") {
    for (int seed = 0; seed < 10; ++seed) {
        bsa::Rng rng(100 + seed);
        const std::size_t m = 8, l = 2, g = 4;
        const std::size_t n_points = 20 + rng.uniform_index(13);  // pad to 24 or 32
        const auto tree = line_tree(n_points, m);
        const std::size_t n = tree.n_padded;
        BsaConfig cfg;
        cfg.ball_size = m;
        cfg.block_len = l;
        cfg.group_size = g;
        cfg.top_k = 2;
        cfg.ball_masking = true;

        const auto q = bsa::random_matrix<double>(rng, n, 4);
        const auto k = bsa::random_matrix<double>(rng, n, 4);
        const auto v = bsa::random_matrix<double>(rng, n, 4);
        const auto valid = mask_of(tree);

        PhiWeights<double> mean;
        const auto kc = bsa::compress_blocks(k, l, mean, valid);
        const auto pooled = bsa::pool_group_queries(q, g, valid);
        const auto scores = bsa::importance_scores(pooled, kc.tokens);
        std::vector<std::uint8_t> unit_has_query(n / g, 0);
        for (std::size_t u = 0; u < n / g; ++u)
            for (std::size_t t = u * g; t < (u + 1) * g; ++t)
                if (valid[t]) unit_has_query[u] = 1;
        const auto plan =
            bsa::build_selection_plan(scores, cfg, tree, g, kc.valid, unit_has_query);

        const auto got = bsa::selection_attention(q, k, v, plan, valid);
        const auto want = bsa::oracle::gather_then_dense_reference(q, k, v, plan.blocks, g, l,
                                                                   valid);
        REQUIRE(bsa::max_abs_diff(got, want) < 1e-5);
    }
}

TEST_CASE("a single gathered token passes its value through") {
    bsa::Rng rng(11);
    const auto q = bsa::random_matrix<double>(rng, 4, 3);
    const auto k = bsa::random_matrix<double>(rng, 4, 3);
    const auto v = bsa::random_matrix<double>(rng, 4, 3);
    bsa::SelectionPlan plan;
    plan.block_len = 1;
    plan.unit_tokens = 4;
    plan.blocks = {{2}};
    const auto out = bsa::selection_attention(q, k, v, plan, {});
    for (std::size_t i = 0; i < 4; ++i)
        for (std::size_t c = 0; c < 3; ++c) REQUIRE(out(i, c) == v(2, c));
}

TEST_CASE("selection attention rejects a unit with no valid gathered tokens") {
    Matrix<double> q(2, 2, 1.0), k(2, 2, 1.0), v(2, 2, 1.0);
    bsa::SelectionPlan plan;
    plan.block_len = 1;
    plan.unit_tokens = 2;
    plan.blocks = {{1}};
    const std::vector<std::uint8_t> valid{1, 0};  // picked block is the invalid token
    REQUIRE_THROWS_AS(bsa::selection_attention(q, k, v, plan, valid), std::invalid_argument);
}

TEST_CASE("ball attention equals dense attention for a single ball") {
    bsa::Rng rng(12);
    const std::size_t n = 16;
    const auto tree = line_tree(n, n);
    const auto q = bsa::random_matrix<double>(rng, n, 4);
    const auto k = bsa::random_matrix<double>(rng, n, 4);
    const auto v = bsa::random_matrix<double>(rng, n, 4);
    REQUIRE(bsa::max_abs_diff(bsa::ball_attention(q, k, v, tree), bsa::attend(q, k, v)) < 1e-5);
}

TEST_CASE("ball attention with unit balls returns the values") {
    bsa::Rng rng(13);
    const std::size_t n = 6;
    const auto tree = line_tree(n, 1);
    const auto q = bsa::random_matrix<double>(rng, n, 3);
    const auto k = bsa::random_matrix<double>(rng, n, 3);
    const auto v = bsa::random_matrix<double>(rng, n, 3);
    REQUIRE(bsa::max_abs_diff(bsa::ball_attention(q, k, v, tree), v) == 0.0);
}

TEST_CASE("ball attention matches the block-diagonal oracle under padding") {
    for (int seed = 0; seed < 10; ++seed) {
        bsa::Rng rng(200 + seed);
        const std::size_t n_points = 9 + rng.uniform_index(14);
        const auto tree = line_tree(n_points, 4);
        const std::size_t n = tree.n_padded;
        const auto q = bsa::random_matrix<double>(rng, n, 3);
        const auto k = bsa::random_matrix<double>(rng, n, 3);
        const auto v = bsa::random_matrix<double>(rng, n, 3);
        const auto got = bsa::ball_attention(q, k, v, tree);
        const auto want = bsa::oracle::block_diagonal_reference(q, k, v, 4, tree.valid_mask);
        REQUIRE(bsa::max_abs_diff(got, want) < 1e-12);
        // padded query slots must come out as zero rows
        for (std::size_t s = 0; s < n; ++s)
            if (!tree.valid_mask[s])
                for (std::size_t c = 0; c < 3; ++c) REQUIRE(got(s, c) == 0.0);
    }
}

TEST_CASE("compressed attention matches dense attention over coarse tokens") {
    bsa::Rng rng(14);
    const std::size_t n = 8, l = 4;
    const auto q = bsa::random_matrix<double>(rng, n, 3);
    const auto k = bsa::random_matrix<double>(rng, n, 3);
    const auto v = bsa::random_matrix<double>(rng, n, 3);
    PhiWeights<double> mean;
    const auto kc = bsa::compress_blocks(k, l, mean, {});
    const auto vc = bsa::compress_blocks(v, l, mean, {});
    const auto got = bsa::compressed_attention(q, kc.tokens, vc.tokens, kc.valid);
    const auto want = bsa::oracle::dense_reference(q, kc.tokens, vc.tokens);
    REQUIRE(bsa::max_abs_diff(got, want) < 1e-12);

    // single coarse token: every row equals it
    const auto kc1 = bsa::compress_blocks(k, 8, mean, {});
    const auto vc1 = bsa::compress_blocks(v, 8, mean, {});
    const auto one = bsa::compressed_attention(q, kc1.tokens, vc1.tokens, kc1.valid);
    for (std::size_t i = 0; i < n; ++i)
        for (std::size_t c = 0; c < 3; ++c)
            REQUIRE(one(i, c) == Catch::Approx(vc1.tokens(0, c)).margin(1e-12));

    std::vector<std::uint8_t> none(kc.valid.size(), 0);
    REQUIRE_THROWS_AS(bsa::compressed_attention(q, kc.tokens, vc.tokens, none),
                      std::invalid_argument);
}

TEST_CASE("group compressed attention repeats coarse rows") {
    bsa::Rng rng(15);
    const std::size_t n = 8, l = 4;
    const auto q = bsa::random_matrix<double>(rng, n, 3);
    const auto k = bsa::random_matrix<double>(rng, n, 3);
    const auto v = bsa::random_matrix<double>(rng, n, 3);
    PhiWeights<double> mean;
    const auto qc = bsa::compress_blocks(q, l, mean, {});
    const auto kc = bsa::compress_blocks(k, l, mean, {});
    const auto vc = bsa::compress_blocks(v, l, mean, {});

    const auto got = bsa::group_compressed_attention(qc.tokens, kc.tokens, vc.tokens, kc.valid, l);
    REQUIRE(got.rows() == n);
    const auto coarse = bsa::oracle::dense_reference(qc.tokens, kc.tokens, vc.tokens);
    for (std::size_t i = 0; i < n; ++i)
        for (std::size_t c = 0; c < 3; ++c) {
            REQUIRE(got(i, c) == got((i / l) * l, c));  // structural repeat, exact
            REQUIRE(got(i, c) == Catch::Approx(coarse(i / l, c)).margin(1e-12));
        }

    // block length one degenerates to plain compressed attention
    const auto kc1 = bsa::compress_blocks(k, 1, mean, {});
    const auto vc1 = bsa::compress_blocks(v, 1, mean, {});
    const auto a = bsa::group_compressed_attention(q, kc1.tokens, vc1.tokens, kc1.valid, 1);
    const auto b = bsa::compressed_attention(q, kc1.tokens, vc1.tokens, kc1.valid);
    REQUIRE(bsa::max_abs_diff(a, b) == 0.0);
}

TEST_CASE("branch backward passes match finite differences") {
    bsa::Rng rng(16);

    SECTION("ball attention") {
        const auto tree = line_tree(10, 4);  // padding in the last ball
        const std::size_t n = tree.n_padded, d = 3;
        const auto q = bsa::random_matrix<double>(rng, n, d);
        const auto k = bsa::random_matrix<double>(rng, n, d);
        const auto v = bsa::random_matrix<double>(rng, n, d);
        const auto gout = bsa::random_matrix<double>(rng, n, d);
        bsa::BranchWorkspace<double> ws;
        bsa::ball_attention(q, k, v, tree, &ws);
        const auto g = bsa::ball_attention_vjp(ws, tree, gout);
        const auto analytic = flatten({&g.d_q, &g.d_k, &g.d_v});
        auto f = [&](const std::vector<double>& x) {
            Matrix<double> qq(n, d), kk(n, d), vv(n, d);
            unflatten(x, {&qq, &kk, &vv});
            return bsa::ball_attention(qq, kk, vv, tree).data();
        };
        const auto report =
            bsa::oracle::fd_vjp_check(f, flatten({&q, &k, &v}), gout.data(), analytic);
        REQUIRE(report.max_rel_err <= 1e-6);
    }

    SECTION("selection attention with a frozen plan") {
        const auto tree = line_tree(14, 8);
        const std::size_t n = tree.n_padded, d = 3;
        BsaConfig cfg;
        cfg.ball_size = 8;
        cfg.block_len = 2;
        cfg.group_size = 4;
        cfg.top_k = 2;
        cfg.ball_masking = true;
        const auto q = bsa::random_matrix<double>(rng, n, d);
        const auto k = bsa::random_matrix<double>(rng, n, d);
        const auto v = bsa::random_matrix<double>(rng, n, d);
        const auto valid = mask_of(tree);
        PhiWeights<double> mean;
        const auto kc = bsa::compress_blocks(k, 2, mean, valid);
        const auto scores =
            bsa::importance_scores(bsa::pool_group_queries(q, 4, valid), kc.tokens);
        std::vector<std::uint8_t> has_query(n / 4, 1);
        const auto plan = bsa::build_selection_plan(scores, cfg, tree, 4, kc.valid, has_query);

        const auto gout = bsa::random_matrix<double>(rng, n, d);
        bsa::BranchWorkspace<double> ws;
        bsa::selection_attention(q, k, v, plan, valid, &ws);
        const auto g = bsa::selection_attention_vjp(ws, plan, d, gout);
        const auto analytic = flatten({&g.d_q, &g.d_k, &g.d_v});
        auto f = [&](const std::vector<double>& x) {
            Matrix<double> qq(n, d), kk(n, d), vv(n, d);
            unflatten(x, {&qq, &kk, &vv});
            return bsa::selection_attention(qq, kk, vv, plan, valid).data();
        };
        const auto report =
            bsa::oracle::fd_vjp_check(f, flatten({&q, &k, &v}), gout.data(), analytic);
        REQUIRE(report.max_rel_err <= 1e-6);
    }

    SECTION("group compressed attention") {
        const std::size_t n = 8, l = 2, d = 3;
        const auto qc0 = bsa::random_matrix<double>(rng, n / l, d);
        const auto kc0 = bsa::random_matrix<double>(rng, n / l, d);
        const auto vc0 = bsa::random_matrix<double>(rng, n / l, d);
        const std::vector<std::uint8_t> cvalid(n / l, 1);
        const auto gout = bsa::random_matrix<double>(rng, n, d);
        bsa::AttendWorkspace<double> ws;
        bsa::group_compressed_attention(qc0, kc0, vc0, cvalid, l, &ws);
        const auto g = bsa::group_compressed_attention_vjp(ws, l, gout);
        const auto analytic = flatten({&g.d_q, &g.d_k, &g.d_v});
        auto f = [&](const std::vector<double>& x) {
            Matrix<double> qq(n / l, d), kk(n / l, d), vv(n / l, d);
            unflatten(x, {&qq, &kk, &vv});
            return bsa::group_compressed_attention(qq, kk, vv, cvalid, l).data();
        };
        const auto report =
            bsa::oracle::fd_vjp_check(f, flatten({&qc0, &kc0, &vc0}), gout.data(), analytic);
        REQUIRE(report.max_rel_err <= 1e-6);
    }
}

TEST_CASE("config validation enforces the divisibility and budget rules") {
    BsaConfig cfg;
    cfg.ball_size = 8;
    cfg.block_len = 2;
    cfg.group_size = 4;
    cfg.top_k = 2;
    REQUIRE_NOTHROW(cfg.validate_for(16));

    BsaConfig bad = cfg;
    bad.block_len = 3;  // 8 % 3 != 0
    REQUIRE_THROWS_AS(bad.validate(), std::invalid_argument);

    bad = cfg;
    bad.group_size = 3;
    REQUIRE_THROWS_AS(bad.validate(), std::invalid_argument);

    bad = cfg;
    bad.top_k = 0;
    REQUIRE_THROWS_AS(bad.validate(), std::invalid_argument);

    bad = cfg;
    bad.top_k = 13;  // 16 tokens -> 8 blocks, 4 of them masked away
    REQUIRE_THROWS_AS(bad.validate_for(16), std::invalid_argument);

    bad = cfg;
    bad.ball_masking = true;
    bad.top_k = 5;  // 8 blocks - 4 own-ball blocks leaves 4 candidates
    REQUIRE_THROWS_AS(bad.validate_for(16), std::invalid_argument);
    bad.top_k = 4;
    REQUIRE_NOTHROW(bad.validate_for(16));

    bad = cfg;
    bad.group_selection = true;
    bad.group_compression = true;
    bad.group_size = 2;
    bad.block_len = 4;  // group must cover whole coarse rows here
    REQUIRE_THROWS_AS(bad.validate(), std::invalid_argument);
}
