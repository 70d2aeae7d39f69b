#pragma once

#include <Eigen/Dense>

#include <cmath>
#include <algorithm>
#include <cstddef>
#include <exception>
#include <stdexcept>
#include <string>
#include <thread>
#include <vector>

namespace flars {

using Vector = Eigen::VectorXd;
using Matrix = Eigen::MatrixXd;
using Index = Eigen::Index;

// Error hierarchy. Every error the library raises derives from one of the
// standard exception types so callers can catch broadly or precisely.

struct InvalidArgument : std::invalid_argument {
    using std::invalid_argument::invalid_argument;
};

struct SingularMatrixError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

/// Response with zero variance; correlations are undefined.
struct DegenerateResponseError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

struct NoSignalError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

struct IllPosedError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

struct OptimizationFailed : std::runtime_error {
    using std::runtime_error::runtime_error;
};

struct NumericalError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

inline void require(bool cond, const std::string& msg) {
    if (!cond) throw InvalidArgument(msg);
}

namespace stats {

inline double mean(const Vector& v) { return v.size() ? v.mean() : 0.0; }

inline Vector centered(const Vector& v) {
    return (v.array() - mean(v)).matrix();
}

inline Matrix centered_columns(const Matrix& m) {
    if (m.rows() == 0) return m;
    return m.rowwise() - m.colwise().mean();
}

/// Sample variance with the n-1 denominator.
inline double variance(const Vector& v) {
    const Index n = v.size();
    if (n < 2) return 0.0;
    return (v.array() - v.mean()).square().sum() / static_cast<double>(n - 1);
}

inline double sd(const Vector& v) { return std::sqrt(variance(v)); }

inline double pearson(const Vector& a, const Vector& b) {
    const Vector ac = centered(a);
    const Vector bc = centered(b);
    const double den = ac.norm() * bc.norm();
    if (den == 0.0) return 0.0;
    return ac.dot(bc) / den;
}

} // namespace stats

inline bool all_finite(const Matrix& m) { return m.allFinite(); }

namespace detail {

/// Runs fn(i) for i in [0, count) on up to `threads` workers with a static
/// interleaved partition. Results must be written to per-index slots.
template <typename F>
void parallel_for(std::size_t count, int threads, F&& fn) {
    const std::size_t workers = std::min<std::size_t>(count, threads > 1 ? static_cast<std::size_t>(threads) : 1);
    if (workers <= 1) {
        for (std::size_t i = 0; i < count; ++i) fn(i);
        return;
    }
    std::vector<std::exception_ptr> errors(workers);
    std::vector<std::thread> pool;
    pool.reserve(workers);
    for (std::size_t w = 0; w < workers; ++w) {
        pool.emplace_back([&, w] {
            try {
                for (std::size_t i = w; i < count; i += workers) fn(i);
            } catch (...) {
                errors[w] = std::current_exception();
            }
        });
    }
    for (auto& t : pool) t.join();
    for (auto& e : errors)
        if (e) std::rethrow_exception(e);
}

} // namespace detail

} // namespace flars
