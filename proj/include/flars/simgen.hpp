#pragma once

#include "flars/common.hpp"
#include "flars/flars.hpp"
#include "flars/funcrep.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <numbers>
#include <random>
#include <set>
#include <string>
#include <vector>

namespace flars::sim {

struct ScenarioConfig {
    int n_functional = 7;
    int n_scalar = 5;
    int n_true_functional = 3;
    int n_true_scalar = 3;
    int n_train = 200;
    int n_test = 200;
    double noise_sd = 0.05;
    int grid_q = 100;
    double length_scale = 0.2;
    std::vector<double> gamma = {1.0, -1.0, 0.5};
    double functional_effect_sd = 0.5;
    RepresentationConfig representation; // attached to the generated candidate sets
    std::uint64_t seed = 1;

    /// Scenario 1: 7 functional + 5 scalar candidates; scenario 2: 50 + 50.
    static ScenarioConfig scenario(int which) {
        ScenarioConfig c;
        if (which == 2) {
            c.n_functional = 50;
            c.n_scalar = 50;
        } else {
            require(which == 1, "ScenarioConfig: scenario must be 1 or 2");
        }
        return c;
    }

    void validate() const {
        require(n_true_functional >= 0 && n_true_functional <= 3, "ScenarioConfig: n_true_functional must be in [0, 3]");
        require(n_true_scalar >= 0 && n_true_scalar <= static_cast<int>(gamma.size()),
                "ScenarioConfig: n_true_scalar exceeds the number of gamma values");
        require(n_true_functional <= n_functional && n_true_scalar <= n_scalar,
                "ScenarioConfig: more true variables than candidates");
        require(n_functional + n_scalar > 0, "ScenarioConfig: no candidates");
        require(n_train >= 10 && n_test >= 1, "ScenarioConfig: sample sizes too small");
        require(noise_sd >= 0 && std::isfinite(noise_sd), "ScenarioConfig: noise_sd must be >= 0");
        require(grid_q >= 10, "ScenarioConfig: grid_q must be >= 10");
        require(length_scale > 0, "ScenarioConfig: length_scale must be > 0");
    }
};

struct Dataset {
    CandidateSet cands;
    Vector y;
};

struct Truth {
    std::vector<std::string> ids;
    std::vector<Vector> beta; // true coefficient functions on the grid
    std::vector<double> gamma;
};

struct Scenario {
    Dataset train;
    Dataset test;
    Truth truth;
    TimeGrid grid;
};

/// Fixed coefficient shapes: sinusoid, bump, linear ramp.
inline double beta_shape(int j, double t) {
    switch (j) {
    case 0: return std::sin(2.0 * std::numbers::pi * t);
    case 1: return std::exp(-0.5 * std::pow((t - 0.5) / 0.1, 2));
    default: return 2.0 * t - 1.0;
    }
}

namespace detail {

// Square root factor of the SE covariance on the grid (unit variance).
inline Matrix curve_factor(const Vector& t, double ls) {
    const Index q = t.size();
    Matrix K(q, q);
    for (Index i = 0; i < q; ++i)
        for (Index j = 0; j < q; ++j) K(i, j) = std::exp(-0.5 * std::pow((t(i) - t(j)) / ls, 2));
    Eigen::SelfAdjointEigenSolver<Matrix> es(K);
    const Vector sq = es.eigenvalues().cwiseMax(0.0).cwiseSqrt();
    return es.eigenvectors() * sq.asDiagonal();
}

inline Matrix draw_curves(const Matrix& factor, Index n, std::mt19937_64& rng) {
    std::normal_distribution<double> nd(0.0, 1.0);
    Matrix e(factor.cols(), n);
    for (Index j = 0; j < n; ++j)
        for (Index i = 0; i < e.rows(); ++i) e(i, j) = nd(rng);
    return (factor * e).transpose();
}

inline Vector draw_normal(Index n, std::mt19937_64& rng) {
    std::normal_distribution<double> nd(0.0, 1.0);
    Vector v(n);
    for (Index i = 0; i < n; ++i) v(i) = nd(rng);
    return v;
}

} // namespace detail

/**
 * Draws train and test sets for
 *   y = sum_j int x_j beta_j + sum_m z_m gamma_m + eps.
 * Integrals use the grid average, so fitting the true coefficients with the
 * RDP representation reproduces the noiseless response exactly.
 */
inline Scenario generate_scenario(const ScenarioConfig& cfg) {
    cfg.validate();
    Scenario sc;
    sc.grid = TimeGrid::midpoints(cfg.grid_q, 0.0, 1.0);
    const Vector& t = sc.grid.points();
    const Matrix factor = detail::curve_factor(t, cfg.length_scale);
    const Matrix K = factor * factor.transpose();
    const double q = static_cast<double>(cfg.grid_q);

    for (int j = 0; j < cfg.n_true_functional; ++j) {
        Vector b(cfg.grid_q);
        for (Index i = 0; i < b.size(); ++i) b(i) = beta_shape(j, t(i));
        const double sd = std::sqrt(b.dot(K * b)) / q;
        sc.truth.beta.push_back(b * (cfg.functional_effect_sd / sd));
        sc.truth.ids.push_back("x" + std::to_string(j + 1));
    }
    for (int m = 0; m < cfg.n_true_scalar; ++m) {
        sc.truth.gamma.push_back(cfg.gamma[static_cast<std::size_t>(m)]);
        sc.truth.ids.push_back("z" + std::to_string(m + 1));
    }

    std::mt19937_64 rng(cfg.seed);
    auto make = [&](int n) {
        Dataset d;
        d.cands.representation = cfg.representation;
        d.y = Vector::Zero(n);
        for (int j = 0; j < cfg.n_functional; ++j) {
            Matrix x = detail::draw_curves(factor, n, rng);
            if (j < cfg.n_true_functional) d.y += x * sc.truth.beta[static_cast<std::size_t>(j)] / q;
            d.cands.functional.push_back({"x" + std::to_string(j + 1), FunctionalSample(std::move(x), sc.grid)});
        }
        for (int m = 0; m < cfg.n_scalar; ++m) {
            Vector z = detail::draw_normal(n, rng);
            if (m < cfg.n_true_scalar) d.y += sc.truth.gamma[static_cast<std::size_t>(m)] * z;
            d.cands.scalar.push_back({"z" + std::to_string(m + 1), std::move(z)});
        }
        d.y += cfg.noise_sd * detail::draw_normal(n, rng);
        return d;
    };
    sc.train = make(cfg.n_train);
    sc.test = make(cfg.n_test);
    return sc;
}

/// Noiseless response of the true model on a dataset.
inline Vector true_signal(const Scenario& sc, const Dataset& d) {
    Vector out = Vector::Zero(d.y.size());
    const double q = static_cast<double>(sc.grid.size());
    for (std::size_t j = 0; j < sc.truth.beta.size(); ++j) out += d.cands.functional[j].data.values * sc.truth.beta[j] / q;
    for (std::size_t m = 0; m < sc.truth.gamma.size(); ++m) out += sc.truth.gamma[m] * d.cands.scalar[m].values;
    return out;
}

struct SelectionMetrics {
    double true_pct = 0.0;
    double false_pct = 0.0;
    bool empty = false;
};

/// A/(A+B) and B/(A+B) with A true and B false selections.
inline SelectionMetrics selection_metrics(const std::vector<std::string>& selected,
                                          const std::vector<std::string>& truth) {
    const std::set<std::string> sel(selected.begin(), selected.end());
    const std::set<std::string> tru(truth.begin(), truth.end());
    SelectionMetrics m;
    if (sel.empty()) {
        m.empty = true;
        return m;
    }
    double a = 0, b = 0;
    for (const auto& s : sel) (tru.count(s) ? a : b) += 1;
    m.true_pct = 100.0 * a / (a + b);
    m.false_pct = 100.0 * b / (a + b);
    return m;
}

struct ReplicationReport {
    int replication = 0;
    std::uint64_t seed = 0;
    double rmse = 0.0;
    double true_pct = 0.0;
    double false_pct = 0.0;
    double elapsed_seconds = 0.0;
    std::vector<std::string> selected_ids;
    int stop_iteration = 0;
    bool failed = false;
    std::string error;
};

struct AggregateReport {
    std::vector<ReplicationReport> replications;
    double mean_rmse = 0.0;
    double mean_true_pct = 0.0;
    double mean_false_pct = 0.0;
    double mean_elapsed_seconds = 0.0;
    int n_failed = 0;
};

inline ReplicationReport run_replication(const ScenarioConfig& cfg, const FlarsOptions& opt, int index) {
    ReplicationReport rep;
    rep.replication = index;
    rep.seed = cfg.seed + static_cast<std::uint64_t>(index);
    const auto start = std::chrono::steady_clock::now();
    try {
        ScenarioConfig c = cfg;
        c.seed = rep.seed;
        const Scenario sc = generate_scenario(c);
        const FlarsResult res = run_flars(sc.train.y, sc.train.cands, opt);
        const Vector pred = res.model.predict(sc.test.cands);
        rep.rmse = std::sqrt((sc.test.y - pred).squaredNorm() / static_cast<double>(pred.size()));
        const SelectionMetrics m = selection_metrics(res.selected, sc.truth.ids);
        rep.true_pct = m.true_pct;
        rep.false_pct = m.false_pct;
        rep.selected_ids = res.selected;
        rep.stop_iteration = res.diagnostics.stop_index;
    } catch (const std::exception& e) {
        rep.failed = true;
        rep.error = e.what();
    }
    rep.elapsed_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
    return rep;
}

/**
 * Replications with seeds master + 0, 1, ...; run on `threads` workers and
 * reduced in replication order. More than 10% failures is an error.
 */
inline AggregateReport run_replications(const ScenarioConfig& cfg, const FlarsOptions& opt, int n_reps,
                                        int threads = 1) {
    require(n_reps >= 1, "run_replications: n_reps must be >= 1");
    cfg.validate();
    opt.validate();
    AggregateReport agg;
    agg.replications.resize(static_cast<std::size_t>(n_reps));
    flars::detail::parallel_for(static_cast<std::size_t>(n_reps), threads, [&](std::size_t i) {
        agg.replications[i] = run_replication(cfg, opt, static_cast<int>(i));
    });
    int ok = 0;
    for (const auto& r : agg.replications) {
        if (r.failed) {
            ++agg.n_failed;
            continue;
        }
        ++ok;
        agg.mean_rmse += r.rmse;
        agg.mean_true_pct += r.true_pct;
        agg.mean_false_pct += r.false_pct;
        agg.mean_elapsed_seconds += r.elapsed_seconds;
    }
    if (agg.n_failed * 10 > n_reps)
        throw NumericalError("run_replications: " + std::to_string(agg.n_failed) + " of " + std::to_string(n_reps) +
                             " replications failed; first error: " +
                             std::find_if(agg.replications.begin(), agg.replications.end(),
                                          [](const ReplicationReport& r) { return r.failed; })->error);
    agg.mean_rmse /= ok;
    agg.mean_true_pct /= ok;
    agg.mean_false_pct /= ok;
    agg.mean_elapsed_seconds /= ok;
    return agg;
}

} // namespace flars::sim
