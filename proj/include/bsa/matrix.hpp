// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstddef>
#include <limits>
#include <random>
#include <stdexcept>
#include <string>
#include <thread>
#include <vector>

namespace bsa {

inline void require(bool cond, const std::string& msg) {
    if (!cond) throw std::invalid_argument(msg);
}

inline void require_shape(bool cond, const std::string& msg) {
    if (!cond) throw std::invalid_argument("shape mismatch: " + msg);
}

/// Dense row-major matrix. Real is float (working precision) or double (high
/// precision); every kernel in the library is templated on it.
template <class Real>
class Matrix {
public:
    Matrix() = default;
    Matrix(std::size_t rows, std::size_t cols, Real fill = Real(0))
        : rows_(rows), cols_(cols), data_(rows * cols, fill) {}

    static Matrix identity(std::size_t n) {
        Matrix m(n, n);
        for (std::size_t i = 0; i < n; ++i) m(i, i) = Real(1);
        return m;
    }

    std::size_t rows() const { return rows_; }
    std::size_t cols() const { return cols_; }
    std::size_t size() const { return data_.size(); }
    bool empty() const { return data_.empty(); }

    Real& operator()(std::size_t i, std::size_t j) { return data_[i * cols_ + j]; }
    Real operator()(std::size_t i, std::size_t j) const { return data_[i * cols_ + j]; }

    Real* row(std::size_t i) { return data_.data() + i * cols_; }
    const Real* row(std::size_t i) const { return data_.data() + i * cols_; }

    std::vector<Real>& data() { return data_; }
    const std::vector<Real>& data() const { return data_; }

    void fill(Real v) { std::fill(data_.begin(), data_.end(), v); }

    void add_scaled(const Matrix& other, Real alpha) {
        require_shape(rows_ == other.rows_ && cols_ == other.cols_, "add_scaled operands");
        for (std::size_t i = 0; i < data_.size(); ++i) data_[i] += alpha * other.data_[i];
    }

    bool all_finite() const {
        for (Real v : data_)
            if (!std::isfinite(v)) return false;
        return true;
    }

    template <class Other>
    Matrix<Other> cast() const {
        Matrix<Other> out(rows_, cols_);
        for (std::size_t i = 0; i < data_.size(); ++i) out.data()[i] = static_cast<Other>(data_[i]);
        return out;
    }

private:
    std::size_t rows_ = 0;
    std::size_t cols_ = 0;
    std::vector<Real> data_;
};

template <class Real>
inline Real dot(const Real* a, const Real* b, std::size_t n) {
    Real acc = Real(0);
    for (std::size_t i = 0; i < n; ++i) acc += a[i] * b[i];
    return acc;
}

/// C = A * B
template <class Real>
Matrix<Real> matmul(const Matrix<Real>& a, const Matrix<Real>& b) {
    require_shape(a.cols() == b.rows(), "matmul inner dimensions");
    Matrix<Real> c(a.rows(), b.cols());
    for (std::size_t i = 0; i < a.rows(); ++i) {
        const Real* arow = a.row(i);
        Real* crow = c.row(i);
        for (std::size_t k = 0; k < a.cols(); ++k) {
            const Real aik = arow[k];
            const Real* brow = b.row(k);
            for (std::size_t j = 0; j < b.cols(); ++j) crow[j] += aik * brow[j];
        }
    }
    return c;
}

/// C = A * B^T
template <class Real>
Matrix<Real> matmul_nt(const Matrix<Real>& a, const Matrix<Real>& b) {
    require_shape(a.cols() == b.cols(), "matmul_nt inner dimensions");
    Matrix<Real> c(a.rows(), b.rows());
    for (std::size_t i = 0; i < a.rows(); ++i)
        for (std::size_t j = 0; j < b.rows(); ++j) c(i, j) = dot(a.row(i), b.row(j), a.cols());
    return c;
}

/// C = A^T * B
template <class Real>
Matrix<Real> matmul_tn(const Matrix<Real>& a, const Matrix<Real>& b) {
    require_shape(a.rows() == b.rows(), "matmul_tn inner dimensions");
    Matrix<Real> c(a.cols(), b.cols());
    for (std::size_t k = 0; k < a.rows(); ++k) {
        const Real* arow = a.row(k);
        const Real* brow = b.row(k);
        for (std::size_t i = 0; i < a.cols(); ++i) {
            const Real aki = arow[i];
            Real* crow = c.row(i);
            for (std::size_t j = 0; j < b.cols(); ++j) crow[j] += aki * brow[j];
        }
    }
    return c;
}

template <class Real>
Matrix<Real> transpose(const Matrix<Real>& a) {
    Matrix<Real> t(a.cols(), a.rows());
    for (std::size_t i = 0; i < a.rows(); ++i)
        for (std::size_t j = 0; j < a.cols(); ++j) t(j, i) = a(i, j);
    return t;
}

template <class Real>
Real max_abs_diff(const Matrix<Real>& a, const Matrix<Real>& b) {
    require_shape(a.rows() == b.rows() && a.cols() == b.cols(), "max_abs_diff operands");
    Real m = Real(0);
    for (std::size_t i = 0; i < a.size(); ++i)
        m = std::max(m, std::abs(a.data()[i] - b.data()[i]));
    return m;
}

// ---------------------------------------------------------------------------
// Deterministic RNG. mt19937_64 has a pinned bit stream; the distributions
// below are hand-rolled so the stream of variates is identical across
// standard library implementations.

inline std::uint64_t splitmix64(std::uint64_t& state) {
    state += 0x9e3779b97f4a7c15ULL;
    std::uint64_t z = state;
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
    return z ^ (z >> 31);
}

/// Derive a stream-specific seed from a base seed and a stream tag.
inline std::uint64_t mix_seed(std::uint64_t seed, std::uint64_t stream) {
    std::uint64_t s = seed ^ (0x6a09e667f3bcc909ULL + stream * 0x9e3779b97f4a7c15ULL);
    return splitmix64(s);
}

class Rng {
public:
    explicit Rng(std::uint64_t seed) : gen_(seed) {}

    double uniform() { return double(gen_() >> 11) * 0x1.0p-53; }

    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

    /// Standard normal via Box-Muller, one spare cached.
    double normal() {
        if (have_spare_) {
            have_spare_ = false;
            return spare_;
        }
        double u1 = uniform(), u2 = uniform();
        while (u1 <= 1e-300) u1 = uniform();
        const double r = std::sqrt(-2.0 * std::log(u1));
        const double theta = 2.0 * 3.14159265358979323846 * u2;
        spare_ = r * std::sin(theta);
        have_spare_ = true;
        return r * std::cos(theta);
    }

    /// Uniform integer in [0, n).
    std::uint64_t uniform_index(std::uint64_t n) {
        // Rejection sampling keeps the distribution exact.
        const std::uint64_t limit = std::numeric_limits<std::uint64_t>::max() / n * n;
        std::uint64_t x = gen_();
        while (x >= limit) x = gen_();
        return x % n;
    }

    std::mt19937_64& engine() { return gen_; }

private:
    std::mt19937_64 gen_;
    double spare_ = 0.0;
    bool have_spare_ = false;
};

template <class Real>
Matrix<Real> random_matrix(Rng& rng, std::size_t rows, std::size_t cols, double scale = 1.0) {
    Matrix<Real> m(rows, cols);
    for (auto& v : m.data()) v = Real(scale * rng.normal());
    return m;
}

template <class Real>
Matrix<Real> random_uniform_matrix(Rng& rng, std::size_t rows, std::size_t cols, double lo, double hi) {
    Matrix<Real> m(rows, cols);
    for (auto& v : m.data()) v = Real(rng.uniform(lo, hi));
    return m;
}

// ---------------------------------------------------------------------------
// Thread plumbing. Work is split into contiguous chunks with disjoint output
// ranges and a fixed serial order inside each chunk, so results are
// bit-identical for every thread count.

inline int& thread_count_storage() {
    static int n = 1;
    return n;
}

inline int thread_count() { return thread_count_storage(); }

inline void set_thread_count(int n) {
    thread_count_storage() = std::max(1, n);
}

inline int hardware_threads() {
    const unsigned n = std::thread::hardware_concurrency();
    return n == 0 ? 1 : int(n);
}

/// f(begin, end) over [0, n) split across the configured thread count.
template <class F>
void parallel_for(std::size_t n, F&& f) {
    const int nt = std::min<std::size_t>(std::size_t(thread_count()), n ? n : 1);
    if (nt <= 1) {
        if (n) f(std::size_t(0), n);
        return;
    }
    std::vector<std::thread> workers;
    workers.reserve(nt);
    const std::size_t chunk = (n + nt - 1) / nt;
    for (int t = 0; t < nt; ++t) {
        const std::size_t begin = std::size_t(t) * chunk;
        const std::size_t end = std::min(n, begin + chunk);
        if (begin >= end) break;
        workers.emplace_back([&f, begin, end] { f(begin, end); });
    }
    for (auto& w : workers) w.join();
}

}  // namespace bsa
