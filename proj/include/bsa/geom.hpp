// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <numeric>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "bsa/matrix.hpp"

namespace bsa {

/// Unordered point set in R^D. Coordinates are stored double regardless of
/// the compute precision; tree construction is a one-off preprocessing step.
struct PointCloud {
    Matrix<double> coords;  // n_points x dim

    std::size_t n_points() const { return coords.rows(); }
    std::size_t dim() const { return coords.cols(); }
};

constexpr int kPaddedSlot = -1;

/// Leaf-level ball partition of a point cloud. The permutation orders points
/// so that every size-m ball is a contiguous slot range; slots beyond the
/// point count are sentinels with valid_mask false.
struct BallTree {
    std::vector<int> permutation;          // padded slot -> original index, kPaddedSlot for padding
    std::vector<int> inverse_permutation;  // original index -> padded slot
    std::size_t ball_size = 0;             // m
    std::size_t n_valid = 0;               // N
    std::size_t n_padded = 0;              // smallest multiple of m >= N
    std::vector<std::uint8_t> valid_mask;  // length n_padded
    std::vector<std::pair<std::size_t, std::size_t>> ball_ranges;  // half-open, each m wide

    std::size_t n_balls() const { return ball_ranges.size(); }
    std::size_t ball_of_slot(std::size_t slot) const { return slot / ball_size; }
};

namespace detail {

struct BuildEntry {
    int original;
    double key;
};

/// Recursive bisection over a ball budget. The node's points are ordered
/// along the axis of largest spread (ties to the lower original index) and
/// the left child takes as many points as its ball budget holds, so every
/// ball except the final one comes out full and all padding lands at the
/// tail of the final ball.
inline void build_recurse(const PointCloud& points, std::vector<int>& idx, std::size_t lo,
                          std::size_t hi, std::size_t budget, std::size_t ball_size,
                          std::vector<int>& out) {
    const std::size_t n = hi - lo;
    if (budget == 1 || n <= ball_size) {
        for (std::size_t i = lo; i < hi; ++i) out.push_back(idx[i]);
        return;
    }
    const std::size_t dim = points.dim();
    std::size_t axis = 0;
    double best_spread = -1.0;
    for (std::size_t d = 0; d < dim; ++d) {
        double mn = points.coords(idx[lo], d), mx = mn;
        for (std::size_t i = lo + 1; i < hi; ++i) {
            const double c = points.coords(idx[i], d);
            mn = std::min(mn, c);
            mx = std::max(mx, c);
        }
        if (mx - mn > best_spread) {
            best_spread = mx - mn;
            axis = d;
        }
    }
    std::sort(idx.begin() + lo, idx.begin() + hi, [&](int a, int b) {
        const double ca = points.coords(a, axis), cb = points.coords(b, axis);
        if (ca != cb) return ca < cb;
        return a < b;
    });
    const std::size_t budget_left = (budget + 1) / 2;
    const std::size_t n_left = std::min(budget_left * ball_size, n);
    build_recurse(points, idx, lo, lo + n_left, budget_left, ball_size, out);
    build_recurse(points, idx, lo + n_left, hi, budget - budget_left, ball_size, out);
}

}  // namespace detail

/// Partition a point cloud into contiguous balls of ball_size slots.
inline BallTree build_ball_tree(const PointCloud& points, std::size_t ball_size) {
    const std::size_t n = points.n_points();
    require(n >= 1, "build_ball_tree: empty point cloud");
    require(points.dim() >= 1, "build_ball_tree: zero-dimensional points");
    require(ball_size >= 1, "build_ball_tree: ball_size must be >= 1");
    if (!points.coords.all_finite())
        throw std::invalid_argument("build_ball_tree: non-finite coordinate");

    const std::size_t n_balls = (n + ball_size - 1) / ball_size;
    const std::size_t n_padded = n_balls * ball_size;
    require(ball_size <= n_padded, "build_ball_tree: ball_size exceeds padded length");

    std::vector<int> idx(n);
    std::iota(idx.begin(), idx.end(), 0);
    std::vector<int> ordered;
    ordered.reserve(n);
    detail::build_recurse(points, idx, 0, n, n_balls, ball_size, ordered);

    BallTree tree;
    tree.ball_size = ball_size;
    tree.n_valid = n;
    tree.n_padded = n_padded;
    tree.permutation.assign(n_padded, kPaddedSlot);
    tree.valid_mask.assign(n_padded, 0);
    tree.inverse_permutation.assign(n, kPaddedSlot);
    for (std::size_t slot = 0; slot < n; ++slot) {
        tree.permutation[slot] = ordered[slot];
        tree.valid_mask[slot] = 1;
        tree.inverse_permutation[ordered[slot]] = int(slot);
    }
    tree.ball_ranges.reserve(n_balls);
    for (std::size_t b = 0; b < n_balls; ++b)
        tree.ball_ranges.emplace_back(b * ball_size, (b + 1) * ball_size);
    return tree;
}

/// Reorder features into padded ball order; padded rows take `fill`.
template <class Real>
Matrix<Real> permute_features(const BallTree& tree, const Matrix<Real>& features, Real fill) {
    require_shape(features.rows() == tree.n_valid, "permute_features row count");
    Matrix<Real> out(tree.n_padded, features.cols(), fill);
    for (std::size_t slot = 0; slot < tree.n_padded; ++slot) {
        if (!tree.valid_mask[slot]) continue;
        const int src = tree.permutation[slot];
        for (std::size_t c = 0; c < features.cols(); ++c) out(slot, c) = features(src, c);
    }
    return out;
}

/// Inverse of permute_features on the valid slots; padded rows are dropped.
template <class Real>
Matrix<Real> unpermute_features(const BallTree& tree, const Matrix<Real>& features) {
    require_shape(features.rows() == tree.n_padded, "unpermute_features row count");
    Matrix<Real> out(tree.n_valid, features.cols());
    for (std::size_t slot = 0; slot < tree.n_padded; ++slot) {
        if (!tree.valid_mask[slot]) continue;
        const int dst = tree.permutation[slot];
        for (std::size_t c = 0; c < features.cols(); ++c) out(dst, c) = features(slot, c);
    }
    return out;
}

/// Scatter padded-order row gradients back to original order; the adjoint of
/// permute_features.
template <class Real>
Matrix<Real> unpermute_grad(const BallTree& tree, const Matrix<Real>& grad_padded) {
    return unpermute_features(tree, grad_padded);
}

/// Plain-text point cloud reader: one point per line, `dim` leading reals.
/// Trailing columns become per-point targets when present (first extra column)
/// and are otherwise ignored.
struct LoadedCloud {
    PointCloud points;
    std::vector<double> targets;  // empty when the file has no extra column
};

inline LoadedCloud load_point_cloud(const std::string& path, std::size_t dim) {
    std::ifstream in(path);
    if (!in) throw std::invalid_argument("cannot open point file: " + path);
    std::vector<double> coords;
    std::vector<double> targets;
    bool has_target = false;
    std::string line;
    std::size_t n = 0;
    while (std::getline(in, line)) {
        std::istringstream ls(line);
        std::vector<double> vals;
        double v;
        while (ls >> v) vals.push_back(v);
        if (vals.empty()) continue;
        if (vals.size() < dim)
            throw std::invalid_argument("point file line has fewer than dim columns: " + path);
        if (n == 0) has_target = vals.size() > dim;
        for (std::size_t d = 0; d < dim; ++d) coords.push_back(vals[d]);
        if (has_target) targets.push_back(vals.size() > dim ? vals[dim] : 0.0);
        ++n;
    }
    require(n >= 1, "point file is empty: " + path);
    LoadedCloud cloud;
    cloud.points.coords = Matrix<double>(n, dim);
    for (std::size_t i = 0; i < n; ++i)
        for (std::size_t d = 0; d < dim; ++d) cloud.points.coords(i, d) = coords[i * dim + d];
    cloud.targets = std::move(targets);
    return cloud;
}

}  // namespace bsa
