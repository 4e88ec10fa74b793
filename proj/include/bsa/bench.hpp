// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <algorithm>
#include <chrono>
#include <cstdint>
#include <sstream>
#include <string>
#include <vector>

#include "bsa/bsa_layer.hpp"
#include "bsa/cost_model.hpp"
#include "bsa/synthetic.hpp"

namespace bsa {

struct BenchOptions {
    std::size_t min_n = 256;
    std::size_t max_n = 4096;  // sweep doubles n until past this
    std::size_t repeats = 5;
    std::size_t warmups = 2;
    std::uint64_t seed = 0;
};

struct BenchRow {
    std::size_t n = 0;
    Variant variant = Variant::bsa;
    double ms_median = 0;
    std::uint64_t flops = 0;
};

/// Ball size trimmed to the sequence and, when only one ball remains, ball
/// masking dropped (a single ball would otherwise mask every candidate).
inline BsaConfig resolve_config_for_n(BsaConfig cfg, std::size_t n) {
    cfg.ball_size = std::min(cfg.ball_size, n);
    const std::size_t n_pad = (n + cfg.ball_size - 1) / cfg.ball_size * cfg.ball_size;
    if (n_pad == cfg.ball_size) cfg.ball_masking = false;
    return cfg;
}

/// Median wall time of one attention-layer forward pass. Inputs, weights,
/// and the tree are prepared outside the timed region.
template <class Real>
double bench_layer_forward_ms(std::size_t n, const BsaConfig& base_cfg, Variant variant,
                              std::uint64_t seed, std::size_t repeats, std::size_t warmups) {
    BsaConfig cfg = resolve_config_for_n(base_cfg, n);
    apply_variant(cfg, variant);
    cfg.validate();

    ModelConfig mcfg;
    mcfg.attn = cfg;
    mcfg.variant = variant;
    mcfg.depth = 1;
    const auto params = init_model_params<Real>(mcfg, mix_seed(seed, 0xbe7c));
    Rng xrng(mix_seed(seed, 0xbe7d));
    const auto x = random_matrix<Real>(xrng, n, cfg.model_dim, 0.5);

    BallTree tree;
    if (variant != Variant::full) {
        Rng prng(mix_seed(seed, 0xbe7e));
        PointCloud pts{random_uniform_matrix<double>(prng, n, 3, 0.0, 1.0)};
        tree = build_ball_tree(pts, cfg.ball_size);
        cfg.validate_for(tree.n_padded);
    }

    Matrix<Real> sink;
    const auto run_once = [&] {
        if (variant == Variant::full)
            sink = dense_mha_forward(x, params.blocks[0].attn.proj);
        else
            sink = bsa_forward(x, tree, cfg, params.blocks[0].attn);
    };
    for (std::size_t i = 0; i < warmups; ++i) run_once();
    std::vector<double> times;
    times.reserve(repeats);
    for (std::size_t i = 0; i < repeats; ++i) {
        const auto t0 = std::chrono::steady_clock::now();
        run_once();
        const auto t1 = std::chrono::steady_clock::now();
        times.push_back(std::chrono::duration<double, std::milli>(t1 - t0).count());
    }
    std::sort(times.begin(), times.end());
    const std::size_t mid = times.size() / 2;
    return times.size() % 2 == 1 ? times[mid] : 0.5 * (times[mid - 1] + times[mid]);
}

template <class Real>
std::vector<BenchRow> bench_sweep(const BenchOptions& opt, const BsaConfig& base_cfg,
                                  const std::vector<Variant>& variants) {
    require(opt.min_n >= 1 && opt.min_n <= opt.max_n, "bench: bad n range");
    require(opt.repeats >= 1, "bench: need at least one repeat");
    std::vector<BenchRow> rows;
    for (std::size_t n = opt.min_n; n <= opt.max_n; n *= 2) {
        for (Variant v : variants) {
            BenchRow row;
            row.n = n;
            row.variant = v;
            row.ms_median =
                bench_layer_forward_ms<Real>(n, base_cfg, v, opt.seed, opt.repeats, opt.warmups);
            row.flops = flops_bsa_layer(n, resolve_config_for_n(base_cfg, n), v).total;
            rows.push_back(row);
        }
    }
    return rows;
}

inline std::string bench_csv(const std::vector<BenchRow>& rows, std::size_t threads,
                             const std::string& precision, const BenchOptions& opt) {
    std::ostringstream out;
    out.precision(17);
    out << "# threads=" << threads << " precision=" << precision << " seed=" << opt.seed
        << " repeats=" << opt.repeats << " warmups=" << opt.warmups << "\n";
    out << "n,variant,ms_median,flops\n";
    for (const auto& r : rows)
        out << r.n << "," << to_string(r.variant) << "," << r.ms_median << "," << r.flops
            << "\n";
    return out.str();
}

/// Least-squares slope of log2(ms) against log2(n) over the given rows.
inline double log_log_slope(const std::vector<BenchRow>& rows) {
    require(rows.size() >= 2, "slope: need at least two points");
    double sx = 0, sy = 0, sxx = 0, sxy = 0;
    const double k = double(rows.size());
    for (const auto& r : rows) {
        const double x = std::log2(double(r.n)), y = std::log2(r.ms_median);
        sx += x;
        sy += y;
        sxx += x * x;
        sxy += x * y;
    }
    return (k * sxy - sx * sy) / (k * sxx - sx * sx);
}

}  // namespace bsa
