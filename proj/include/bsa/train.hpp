// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cmath>
#include <cstdint>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "bsa/bsa_layer.hpp"
#include "bsa/synthetic.hpp"

namespace bsa {

struct TrainOptions {
    std::size_t steps = 200;
    double lr = 1e-3;            // cosine-decayed to zero
    double weight_decay = 0.01;  // decoupled
    std::size_t n_points = 512;
    std::size_t n_train = 128;
    std::size_t n_test = 32;
    std::uint64_t seed = 0;
    std::size_t eval_every = 50;
};

struct MetricsRow {
    std::size_t step = 0;
    double lr = 0;
    double train_mse = 0;
    double test_mse = 0;
};

struct TrainResult {
    std::vector<MetricsRow> metrics;
    double final_test_mse = 0;
};

inline double cosine_lr(double base, std::size_t step, std::size_t total_steps) {
    if (total_steps == 0) return base;
    const double t = double(step) / double(total_steps);
    return 0.5 * base * (1.0 + std::cos(t * 3.14159265358979323846));
}

namespace detail {

/// One AdamW step over every tensor; moments share the parameter layout.
template <class Real>
void adamw_step(ModelParams<Real>& params, ModelParams<Real>& grads, ModelParams<Real>& m,
                ModelParams<Real>& v, std::size_t t, double lr, double weight_decay) {
    constexpr double b1 = 0.9, b2 = 0.999, eps = 1e-8;
    const double bc1 = 1.0 - std::pow(b1, double(t));
    const double bc2 = 1.0 - std::pow(b2, double(t));
    auto ps = named_tensors(params);
    auto gs = named_tensors(grads);
    auto ms = named_tensors(m);
    auto vs = named_tensors(v);
    for (std::size_t i = 0; i < ps.size(); ++i) {
        auto& p = ps[i].second->data();
        auto& g = gs[i].second->data();
        auto& mm = ms[i].second->data();
        auto& vv = vs[i].second->data();
        for (std::size_t j = 0; j < p.size(); ++j) {
            const double gj = double(g[j]);
            const double mj = b1 * double(mm[j]) + (1.0 - b1) * gj;
            const double vj = b2 * double(vv[j]) + (1.0 - b2) * gj * gj;
            mm[j] = Real(mj);
            vv[j] = Real(vj);
            const double update = (mj / bc1) / (std::sqrt(vj / bc2) + eps);
            p[j] = Real(double(p[j]) - lr * (update + weight_decay * double(p[j])));
        }
    }
}

}  // namespace detail

/// Mean MSE over a set of clouds. Trees are rebuilt per cloud for sparse
/// variants; precomputed ones can be supplied to skip that.
template <class Real>
double evaluate_model(const ModelConfig& mcfg, const ModelParams<Real>& params,
                      const std::vector<CloudSample>& clouds,
                      const std::vector<BallTree>* trees = nullptr) {
    double acc = 0;
    for (std::size_t c = 0; c < clouds.size(); ++c) {
        const BallTree* tree = nullptr;
        BallTree local;
        if (mcfg.variant != Variant::full) {
            if (trees != nullptr) {
                tree = &(*trees)[c];
            } else {
                local = build_ball_tree(clouds[c].points, mcfg.attn.ball_size);
                tree = &local;
            }
        }
        const auto feats = clouds[c].points.coords.template cast<Real>();
        const auto preds = model_forward(feats, tree, mcfg, params);
        double mse = 0;
        for (std::size_t i = 0; i < preds.rows(); ++i) {
            const double e = double(preds(i, 0)) - clouds[c].targets(i, 0);
            mse += e * e;
        }
        acc += mse / double(preds.rows());
    }
    return acc / double(clouds.size());
}

/// Full training run on the seeded synthetic split: AdamW, cosine schedule,
/// one cloud per step in a fixed rotation. Deterministic given (options,
/// thread count fixed at one).
template <class Real>
TrainResult train_model(const ModelConfig& mcfg, const TrainOptions& opt,
                        ModelParams<Real>* out_params = nullptr,
                        const SyntheticSplit* data = nullptr) {
    mcfg.attn.validate();
    SyntheticSplit local_data;
    if (data == nullptr) {
        local_data = make_synthetic_split(opt.n_points, opt.seed, opt.n_train, opt.n_test);
        data = &local_data;
    }
    require(!data->train.empty() && !data->test.empty(), "train_model: empty dataset");

    std::vector<BallTree> train_trees, test_trees;
    if (mcfg.variant != Variant::full) {
        for (const auto& c : data->train)
            train_trees.push_back(build_ball_tree(c.points, mcfg.attn.ball_size));
        for (const auto& c : data->test)
            test_trees.push_back(build_ball_tree(c.points, mcfg.attn.ball_size));
    }

    auto params = init_model_params<Real>(mcfg, mix_seed(opt.seed, 0x1417));
    auto m = zero_like(params);
    auto v = zero_like(params);

    TrainResult result;
    const auto tree_for = [&](std::size_t idx, bool train_set) -> const BallTree* {
        if (mcfg.variant == Variant::full) return nullptr;
        return train_set ? &train_trees[idx] : &test_trees[idx];
    };
    const auto log_row = [&](std::size_t step, double lr, double train_mse) {
        MetricsRow row;
        row.step = step;
        row.lr = lr;
        row.train_mse = train_mse;
        row.test_mse =
            evaluate_model(mcfg, params, data->test,
                           mcfg.variant == Variant::full ? nullptr : &test_trees);
        result.metrics.push_back(row);
        return row.test_mse;
    };

    {
        // initial loss before any update
        const auto& c = data->train[0];
        const auto feats = c.points.coords.template cast<Real>();
        auto grads = zero_like(params);
        const double loss = model_loss_grad(feats, c.targets.template cast<Real>(),
                                            tree_for(0, true), mcfg, params, grads);
        result.final_test_mse = log_row(0, cosine_lr(opt.lr, 0, opt.steps), loss);
    }

    for (std::size_t step = 0; step < opt.steps; ++step) {
        const std::size_t idx = step % data->train.size();
        const auto& c = data->train[idx];
        const auto feats = c.points.coords.template cast<Real>();
        auto grads = zero_like(params);
        const double loss = model_loss_grad(feats, c.targets.template cast<Real>(),
                                            tree_for(idx, true), mcfg, params, grads);
        const double lr = cosine_lr(opt.lr, step, opt.steps);
        detail::adamw_step(params, grads, m, v, step + 1, lr, opt.weight_decay);
        const bool last = step + 1 == opt.steps;
        if (last || (opt.eval_every > 0 && (step + 1) % opt.eval_every == 0))
            result.final_test_mse = log_row(step + 1, lr, loss);
    }

    if (out_params != nullptr) *out_params = std::move(params);
    return result;
}

inline std::string metrics_csv(const std::vector<MetricsRow>& rows) {
    std::ostringstream out;
    out.precision(17);
    out << "step,lr,train_mse,test_mse\n";
    for (const auto& r : rows)
        out << r.step << "," << r.lr << "," << r.train_mse << "," << r.test_mse << "\n";
    return out.str();
}

}  // namespace bsa
