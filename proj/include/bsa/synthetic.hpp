// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cmath>
#include <cstdint>
#include <vector>

#include "bsa/geom.hpp"
#include "bsa/matrix.hpp"

namespace bsa {

/// One regression sample: a cloud and a scalar target per point.
struct CloudSample {
    PointCloud points;
    Matrix<double> targets;  // n x 1
};

namespace detail {

inline double cloud_mean_term(const Matrix<double>& p) {
    // global summary every target depends on; predicting it needs the whole
    // cloud, not just a neighborhood
    const double w0 = 1.3, w1 = -2.1, w2 = 0.8;
    double acc = 0;
    for (std::size_t j = 0; j < p.rows(); ++j)
        acc += std::cos(w0 * p(j, 0) + w1 * p(j, 1) + w2 * p(j, 2));
    return acc / double(p.rows());
}

}  // namespace detail

/// Per-point observation noise. Gives the task an irreducible error floor,
/// like measured physical fields; without it, test MSE ratios between models
/// compare rounding-level residuals instead of modeling power.
inline constexpr double kTargetNoise = 0.1;

/// Points on a radially deformed unit sphere; targets mix a smooth local
/// function of the point with a cloud-wide mean term, plus noise.
inline CloudSample make_synthetic_cloud(std::size_t n_points, Rng& rng) {
    if (n_points < 1) throw std::invalid_argument("synthetic cloud: need at least one point");
    CloudSample s{PointCloud{Matrix<double>(n_points, 3)}, Matrix<double>(n_points, 1)};
    for (std::size_t i = 0; i < n_points; ++i) {
        double u0 = rng.normal(), u1 = rng.normal(), u2 = rng.normal();
        double norm = std::sqrt(u0 * u0 + u1 * u1 + u2 * u2);
        if (norm < 1e-12) {
            u0 = 1.0;
            norm = 1.0;
        }
        u0 /= norm;
        u1 /= norm;
        u2 /= norm;
        const double radius =
            1.0 + 0.25 * std::sin(3.0 * u0 + 1.3) * std::cos(2.0 * u1 - 0.7) +
            0.15 * std::sin(5.0 * u2);
        s.points.coords(i, 0) = radius * u0;
        s.points.coords(i, 1) = radius * u1;
        s.points.coords(i, 2) = radius * u2;
    }
    const double global = detail::cloud_mean_term(s.points.coords);
    for (std::size_t i = 0; i < n_points; ++i) {
        const double p0 = s.points.coords(i, 0), p1 = s.points.coords(i, 1),
                     p2 = s.points.coords(i, 2);
        s.targets(i, 0) = std::sin(2.0 * p0 + p1) + 0.5 * std::cos(3.0 * p2 - p0) +
                          1.5 * global + kTargetNoise * rng.normal();
    }
    return s;
}

inline std::vector<CloudSample> make_synthetic_clouds(std::size_t count, std::size_t n_points,
                                                      std::uint64_t seed,
                                                      std::uint64_t stream) {
    std::vector<CloudSample> out;
    out.reserve(count);
    Rng rng(mix_seed(seed, stream));
    for (std::size_t i = 0; i < count; ++i) out.push_back(make_synthetic_cloud(n_points, rng));
    return out;
}

struct SyntheticSplit {
    std::vector<CloudSample> train, test;
};

/// The fixed benchmark dataset: 128 training clouds and 32 held-out clouds,
/// fully determined by (seed, n_points).
inline SyntheticSplit make_synthetic_split(std::size_t n_points, std::uint64_t seed,
                                           std::size_t n_train = 128,
                                           std::size_t n_test = 32) {
    SyntheticSplit split;
    split.train = make_synthetic_clouds(n_train, n_points, seed, 0x5eed01);
    split.test = make_synthetic_clouds(n_test, n_points, seed, 0x5eed02);
    return split;
}

}  // namespace bsa
