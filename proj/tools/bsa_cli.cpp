// SPDX-License-Identifier: Apache-2.0
//
// Command-line front end: correctness checks, timing sweeps, analytic FLOP
// counts, training runs, the block-size/group-size ablation grid, and
// receptive-field dumps. Every flag can also be set through an environment
// variable with the BSA_ prefix (flags win).

#include <fstream>
#include <iostream>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "bsa/bench.hpp"
#include "bsa/check.hpp"
#include "bsa/checkpoint.hpp"
#include "bsa/cost_model.hpp"
#include "bsa/train.hpp"

namespace {

struct CommonOpts {
    std::size_t ball_size = 0;  // 0 picks min(256, n)
    std::size_t block_len = 8;
    std::size_t top_k = 4;
    std::size_t group_size = 8;
    std::size_t heads = 4;
    std::size_t model_dim = 64;
    std::size_t head_dim = 16;
    std::string phi;  // empty keeps the variant's default pooling
    std::string variant = "bsa";
    std::uint64_t seed = 0;
    std::string precision = "working";
    std::size_t threads = 0;  // 0 uses every hardware thread
    std::string out;
};

void add_config_flags(CLI::App* cmd, CommonOpts& o, bool with_variant = true) {
    cmd->add_option("--ball-size", o.ball_size, "tokens per ball; 0 picks min(256, n)")
        ->envname("BSA_BALL_SIZE");
    cmd->add_option("--block-len", o.block_len, "compression/selection block length")
        ->envname("BSA_BLOCK_LEN");
    cmd->add_option("--top-k", o.top_k, "selected blocks per query unit")->envname("BSA_TOP_K");
    cmd->add_option("--group-size", o.group_size, "query tokens sharing one selection")
        ->envname("BSA_GROUP_SIZE");
    cmd->add_option("--heads", o.heads, "attention heads")->envname("BSA_HEADS");
    cmd->add_option("--model-dim", o.model_dim, "model width")->envname("BSA_MODEL_DIM");
    cmd->add_option("--head-dim", o.head_dim, "per-head width")->envname("BSA_HEAD_DIM");
    cmd->add_option("--phi", o.phi, "block pooling: mean or mlp")
        ->check(CLI::IsMember({"mean", "mlp"}))
        ->envname("BSA_PHI");
    if (with_variant)
        cmd->add_option("--variant", o.variant, "attention variant")
            ->check(CLI::IsMember({"full", "bsa", "bsa-nogroup", "bsa-gc"}))
            ->envname("BSA_VARIANT");
    cmd->add_option("--seed", o.seed, "deterministic seed")->envname("BSA_SEED");
    cmd->add_option("--precision", o.precision, "working (float) or high (double)")
        ->check(CLI::IsMember({"working", "high"}))
        ->envname("BSA_PRECISION");
    cmd->add_option("--threads", o.threads, "worker threads; 0 = all")->envname("BSA_THREADS");
    cmd->add_option("--out", o.out, "output file; stdout when absent")->envname("BSA_OUT");
}

std::size_t padded_len(std::size_t n, std::size_t m) { return (n + m - 1) / m * m; }

/// Resolve flags into a validated config for sequence length n. A single
/// ball disables ball masking (nothing else could be selected).
bsa::BsaConfig make_config(const CommonOpts& o, bsa::Variant v, std::size_t n) {
    bsa::require(n >= 1, "n must be >= 1");
    bsa::BsaConfig cfg;
    cfg.ball_size = o.ball_size == 0 ? std::min<std::size_t>(256, n) : o.ball_size;
    cfg.block_len = o.block_len;
    cfg.top_k = o.top_k;
    cfg.group_size = o.group_size;
    cfg.heads = o.heads;
    cfg.model_dim = o.model_dim;
    cfg.head_dim = o.head_dim;
    bsa::apply_variant(cfg, v);
    if (!o.phi.empty()) cfg.phi_kind = o.phi == "mlp" ? bsa::PhiKind::mlp : bsa::PhiKind::mean;
    if (v != bsa::Variant::full) {
        const std::size_t n_pad = padded_len(n, cfg.ball_size);
        if (n_pad == cfg.ball_size) cfg.ball_masking = false;
        cfg.validate_for(n_pad);
    } else {
        cfg.validate();
    }
    return cfg;
}

void emit(const std::string& text, const std::string& out_path) {
    if (out_path.empty()) {
        std::cout << text;
        return;
    }
    std::ofstream out(out_path);
    if (!out) throw std::runtime_error("cannot open output file: " + out_path);
    out << text;
}

void apply_threads(std::size_t threads) {
    bsa::set_thread_count(threads == 0 ? bsa::hardware_threads() : threads);
}

// ---- train ----------------------------------------------------------------

struct TrainArgs {
    CommonOpts common;
    std::size_t n = 512;
    std::size_t steps = 200;
    std::string data_path;  // empty trains on the synthetic split
};

template <class Real>
int run_train(const TrainArgs& a) {
    const bsa::Variant v = bsa::variant_from_string(a.common.variant);

    std::size_t n_effective = a.n;
    bsa::SyntheticSplit file_split;
    const bsa::SyntheticSplit* data = nullptr;
    if (!a.data_path.empty()) {
        const auto cloud = bsa::load_point_cloud(a.data_path, 3);
        bsa::require(!cloud.targets.empty(),
                     "training from a file needs a target column after the coordinates");
        bsa::CloudSample sample;
        sample.points = cloud.points;
        sample.targets = bsa::Matrix<double>(cloud.targets.size(), 1);
        for (std::size_t i = 0; i < cloud.targets.size(); ++i)
            sample.targets(i, 0) = cloud.targets[i];
        n_effective = sample.points.n_points();
        file_split.train = {sample};
        file_split.test = {sample};
        data = &file_split;
    }

    bsa::ModelConfig mcfg;
    mcfg.attn = make_config(a.common, v, n_effective);
    mcfg.variant = v;
    mcfg.depth = 2;
    mcfg.in_dim = 3;

    bsa::TrainOptions topt;
    topt.steps = a.steps;
    topt.n_points = a.n;
    topt.seed = a.common.seed;

    bsa::ModelParams<Real> trained;
    const auto result = bsa::train_model<Real>(mcfg, topt, &trained, data);
    emit(bsa::metrics_csv(result.metrics), a.common.out);
    if (!a.common.out.empty()) {
        std::string ckpt = a.common.out;
        if (ckpt.size() > 4 && ckpt.substr(ckpt.size() - 4) == ".csv")
            ckpt = ckpt.substr(0, ckpt.size() - 4);
        ckpt += ".ckpt";
        bsa::save_checkpoint(ckpt, trained);
    }
    return 0;
}

// ---- ablate ---------------------------------------------------------------

struct AblateArgs {
    CommonOpts common;
    std::size_t n = 512;
    std::size_t steps = 100;
};

template <class Real>
int run_ablate(const AblateArgs& a) {
    static constexpr std::pair<std::size_t, std::size_t> kCells[] = {
        {4, 4}, {8, 8}, {16, 16}, {32, 32}, {4, 8}, {16, 8}, {8, 4}, {8, 16}};

    // validate the whole grid before any training starts
    std::vector<bsa::ModelConfig> cells;
    for (const auto& [block_len, group_size] : kCells) {
        CommonOpts o = a.common;
        o.block_len = block_len;
        o.group_size = group_size;
        bsa::ModelConfig mcfg;
        mcfg.attn = make_config(o, bsa::Variant::bsa, a.n);
        mcfg.variant = bsa::Variant::bsa;
        mcfg.depth = 2;
        mcfg.in_dim = 3;
        cells.push_back(mcfg);
    }

    std::ostringstream csv;
    csv.precision(17);
    csv << "block_len,group_size,final_test_mse\n";
    for (std::size_t i = 0; i < cells.size(); ++i) {
        bsa::TrainOptions topt;
        topt.steps = a.steps;
        topt.n_points = a.n;
        topt.seed = a.common.seed;
        const auto result = bsa::train_model<Real>(cells[i], topt);
        csv << kCells[i].first << "," << kCells[i].second << "," << result.final_test_mse
            << "\n";
    }
    emit(csv.str(), a.common.out);
    return 0;
}

// ---- rf -------------------------------------------------------------------

struct RfArgs {
    CommonOpts common;
    std::size_t n = 512;
    std::size_t token = 0;
    std::string points_file;
};

int run_rf(const RfArgs& a) {
    const bsa::Variant v = bsa::variant_from_string(a.common.variant);
    bsa::PointCloud points;
    if (!a.points_file.empty()) {
        points = bsa::load_point_cloud(a.points_file, 3).points;
    } else {
        bsa::Rng rng(bsa::mix_seed(a.common.seed, 0x5eedf));
        points = bsa::make_synthetic_cloud(a.n, rng).points;
    }
    const std::size_t n = points.n_points();
    bsa::require(a.token < n, "token index out of range");
    const bsa::BsaConfig cfg = make_config(a.common, v, n);

    std::ostringstream csv;
    csv << "token,in_ball,in_selection,in_compression\n";
    if (v == bsa::Variant::full) {
        // dense attention reaches everything from everywhere
        for (std::size_t i = 0; i < n; ++i) csv << i << ",1,1,1\n";
        emit(csv.str(), a.common.out);
        return 0;
    }

    const bsa::BallTree tree = bsa::build_ball_tree(points, cfg.ball_size);
    bsa::ModelConfig mcfg;
    mcfg.attn = cfg;
    mcfg.variant = v;
    mcfg.depth = 1;
    mcfg.in_dim = 3;
    const auto params = bsa::init_model_params<double>(mcfg, bsa::mix_seed(a.common.seed, 0x3f));
    const auto x = bsa::matmul(points.coords, params.embed);
    bsa::AttnWorkspace<double> ws;
    bsa::bsa_forward(x, tree, cfg, params.blocks[0].attn, &ws);

    const std::size_t slot = tree.inverse_permutation[a.token];
    const auto ball = bsa::receptive_field(tree, cfg, ws.plan, slot, true, false, false);
    const auto slc = bsa::receptive_field(tree, cfg, ws.plan, slot, false, true, false);
    const auto cmp = bsa::receptive_field(tree, cfg, ws.plan, slot, false, false, true);
    std::vector<std::uint8_t> in_ball(n, 0), in_slc(n, 0), in_cmp(n, 0);
    const auto mark = [&](const std::vector<int>& slots, std::vector<std::uint8_t>& flags) {
        for (int s : slots) flags[tree.permutation[std::size_t(s)]] = 1;
    };
    mark(ball, in_ball);
    mark(slc, in_slc);
    mark(cmp, in_cmp);
    for (std::size_t i = 0; i < n; ++i)
        csv << i << "," << int(in_ball[i]) << "," << int(in_slc[i]) << "," << int(in_cmp[i])
            << "\n";
    emit(csv.str(), a.common.out);
    return 0;
}

// ---- flops ----------------------------------------------------------------

struct FlopsArgs {
    CommonOpts common;
    std::size_t n = 4096;
    std::size_t depth = 18;
    std::vector<std::string> variants;
};

int run_flops(const FlopsArgs& a) {
    std::vector<std::string> names = a.variants;
    if (names.empty()) names = {a.common.variant};
    std::vector<bsa::Variant> vs;
    for (const auto& s : names) vs.push_back(bsa::variant_from_string(s));
    bsa::require(a.depth >= 1, "depth must be >= 1");

    std::ostringstream out;
    if (vs.size() == 1) {
        const bsa::BsaConfig cfg = make_config(a.common, vs[0], a.n);
        const auto report = bsa::flops_bsa(a.n, cfg, vs[0], a.depth);
        out << "n=" << a.n << "\nvariant=" << names[0] << "\ndepth=" << a.depth << "\n"
            << bsa::cost_report_kv(report);
    } else {
        out << "n,variant," << bsa::cost_report_csv_header() << "\n";
        for (std::size_t i = 0; i < vs.size(); ++i) {
            const bsa::BsaConfig cfg = make_config(a.common, vs[i], a.n);
            const auto report = bsa::flops_bsa(a.n, cfg, vs[i], a.depth);
            out << a.n << "," << names[i] << "," << bsa::cost_report_csv_row(report) << "\n";
        }
    }
    emit(out.str(), a.common.out);
    return 0;
}

// ---- bench ----------------------------------------------------------------

struct BenchArgs {
    CommonOpts common;
    bsa::BenchOptions opt;
    std::vector<std::string> variants = {"full", "bsa", "bsa-nogroup", "bsa-gc"};
};

template <class Real>
int run_bench(const BenchArgs& a) {
    std::vector<bsa::Variant> vs;
    for (const auto& s : a.variants) vs.push_back(bsa::variant_from_string(s));
    // static validation only; the sweep trims the ball and decides masking per n
    const CommonOpts& o = a.common;
    bsa::BsaConfig base;
    base.ball_size = o.ball_size == 0 ? 256 : o.ball_size;
    base.block_len = o.block_len;
    base.top_k = o.top_k;
    base.group_size = o.group_size;
    base.heads = o.heads;
    base.model_dim = o.model_dim;
    base.head_dim = o.head_dim;
    base.validate();

    bsa::BenchOptions opt = a.opt;
    opt.seed = a.common.seed;
    const auto rows = bsa::bench_sweep<Real>(opt, base, vs);
    emit(bsa::bench_csv(rows, bsa::thread_count(), a.common.precision, opt), a.common.out);
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"ball sparse attention toolkit"};
    app.require_subcommand(1);

    auto* c_check = app.add_subcommand("check", "run the self-check suite");
    CommonOpts check_opts;
    add_config_flags(c_check, check_opts, false);

    auto* c_bench = app.add_subcommand("bench", "time one attention layer across sizes");
    BenchArgs bench_args;
    add_config_flags(c_bench, bench_args.common, false);
    c_bench->add_option("--min-n", bench_args.opt.min_n, "smallest cloud size")
        ->envname("BSA_MIN_N");
    c_bench->add_option("--max-n", bench_args.opt.max_n, "largest cloud size (doubling)")
        ->envname("BSA_MAX_N");
    c_bench->add_option("--variant", bench_args.variants, "variants to time")
        ->check(CLI::IsMember({"full", "bsa", "bsa-nogroup", "bsa-gc"}))
        ->envname("BSA_VARIANT");
    c_bench->add_option("--repeats", bench_args.opt.repeats, "timed repeats per point")
        ->envname("BSA_REPEATS");
    c_bench->add_option("--warmups", bench_args.opt.warmups, "untimed warmup passes")
        ->envname("BSA_WARMUPS");

    auto* c_flops = app.add_subcommand("flops", "analytic cost model");
    FlopsArgs flops_args;
    add_config_flags(c_flops, flops_args.common, false);
    c_flops->add_option("--n", flops_args.n, "cloud size")->envname("BSA_N");
    c_flops->add_option("--depth", flops_args.depth, "transformer blocks")->envname("BSA_DEPTH");
    c_flops->add_option("--variant", flops_args.variants, "one variant (key=value) or several (CSV)")
        ->check(CLI::IsMember({"full", "bsa", "bsa-nogroup", "bsa-gc"}))
        ->envname("BSA_VARIANT");

    auto* c_train = app.add_subcommand("train", "fit the regression model");
    TrainArgs train_args;
    add_config_flags(c_train, train_args.common);
    c_train->add_option("--n", train_args.n, "points per synthetic cloud")->envname("BSA_N");
    c_train->add_option("--steps", train_args.steps, "optimizer steps; 0 logs the initial loss")
        ->envname("BSA_STEPS");
    c_train->add_option("--data", train_args.data_path, "point file: x y z target per line")
        ->envname("BSA_DATA");

    auto* c_ablate = app.add_subcommand("ablate", "block/group size grid");
    AblateArgs ablate_args;
    add_config_flags(c_ablate, ablate_args.common, false);
    c_ablate->add_option("--n", ablate_args.n, "points per synthetic cloud")->envname("BSA_N");
    c_ablate->add_option("--steps", ablate_args.steps, "optimizer steps per cell")
        ->envname("BSA_STEPS");

    auto* c_rf = app.add_subcommand("rf", "receptive field of one token");
    RfArgs rf_args;
    add_config_flags(c_rf, rf_args.common);
    c_rf->add_option("--n", rf_args.n, "points in the synthetic cloud")->envname("BSA_N");
    c_rf->add_option("--token", rf_args.token, "query token (original point index)")
        ->envname("BSA_TOKEN");
    c_rf->add_option("--points-file", rf_args.points_file, "point file: x y z per line")
        ->envname("BSA_POINTS_FILE");

    try {
        app.parse(argc, argv);
    } catch (const CLI::CallForHelp& e) {
        return app.exit(e);
    } catch (const CLI::CallForAllHelp& e) {
        return app.exit(e);
    } catch (const CLI::ParseError& e) {
        std::cerr << "error code=invalid-config msg=\"" << e.what() << "\"\n";
        return 2;
    }

    try {
        if (app.got_subcommand(c_check)) {
            apply_threads(check_opts.threads);
            const auto report = bsa::run_all_checks(check_opts.seed);
            emit(report.to_text(), check_opts.out);
            return report.all_passed() ? 0 : 1;
        }
        if (app.got_subcommand(c_bench)) {
            apply_threads(bench_args.common.threads);
            return bench_args.common.precision == "high" ? run_bench<double>(bench_args)
                                                         : run_bench<float>(bench_args);
        }
        if (app.got_subcommand(c_flops)) {
            return run_flops(flops_args);
        }
        if (app.got_subcommand(c_train)) {
            apply_threads(train_args.common.threads);
            return train_args.common.precision == "high" ? run_train<double>(train_args)
                                                         : run_train<float>(train_args);
        }
        if (app.got_subcommand(c_ablate)) {
            apply_threads(ablate_args.common.threads);
            return ablate_args.common.precision == "high" ? run_ablate<double>(ablate_args)
                                                          : run_ablate<float>(ablate_args);
        }
        if (app.got_subcommand(c_rf)) {
            apply_threads(rf_args.common.threads);
            return run_rf(rf_args);
        }
    } catch (const std::invalid_argument& e) {
        std::cerr << "error code=invalid-config msg=\"" << e.what() << "\"\n";
        return 2;
    } catch (const std::exception& e) {
        std::cerr << "error code=runtime msg=\"" << e.what() << "\"\n";
        return 3;
    }
    return 0;
}
