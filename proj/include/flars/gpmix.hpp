#pragma once

#include "flars/common.hpp"
#include "flars/detail/bfgs.hpp"
#include "flars/flars.hpp"

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <numbers>
#include <optional>
#include <random>
#include <string>
#include <utility>
#include <vector>

namespace flars::gp {

/// Squared-exponential kernel v1 exp(-1/2 sum_h w_h d_h^2) plus noise sigma^2.
struct Kernel {
    double v1 = 1.0;
    Vector w;
    double sigma = 1.0;

    Index dim() const { return w.size(); }

    void validate() const {
        require(std::isfinite(v1) && v1 > 0, "Kernel: v1 must be positive");
        require(std::isfinite(sigma) && sigma > 0, "Kernel: sigma must be positive");
        require(w.size() > 0 && w.allFinite() && (w.array() > 0).all(), "Kernel: weights must be positive");
    }

    /// [log v1, log w_1, ..., log w_H, log sigma]
    Vector log_params() const {
        Vector p(w.size() + 2);
        p(0) = std::log(v1);
        p.segment(1, w.size()) = w.array().log().matrix();
        p(p.size() - 1) = std::log(sigma);
        return p;
    }

    static Kernel from_log_params(const Vector& p) {
        require(p.size() >= 3, "Kernel: need at least one weight");
        Kernel k;
        k.v1 = std::exp(p(0));
        k.w = p.segment(1, p.size() - 2).array().exp().matrix();
        k.sigma = std::exp(p(p.size() - 1));
        return k;
    }
};

/// Kernel matrix between rows of a and b; noise is added on the diagonal
/// entries whose two input rows are identical.
inline Matrix kernel_matrix(const Matrix& a, const Matrix& b, const Kernel& k, bool include_noise) {
    require(a.cols() == k.dim() && b.cols() == k.dim(), "kernel_matrix: covariate dimension differs from kernel");
    Matrix out(a.rows(), b.rows());
    for (Index i = 0; i < a.rows(); ++i)
        for (Index j = 0; j < b.rows(); ++j) {
            const double d2 = ((a.row(i) - b.row(j)).array().square() * k.w.transpose().array()).sum();
            out(i, j) = k.v1 * std::exp(-0.5 * d2);
        }
    if (include_noise) {
        const Index m = std::min(a.rows(), b.rows());
        for (Index i = 0; i < m; ++i)
            if (a.row(i) == b.row(i)) out(i, i) += k.sigma * k.sigma;
    }
    return out;
}

/// Per-column z-score of the random-effects covariates.
struct PhiScaler {
    Vector mean;
    Vector sd;

    static PhiScaler fit(const Matrix& phi) {
        require(phi.rows() >= 2 && phi.cols() >= 1, "PhiScaler: need at least 2 rows and 1 column");
        PhiScaler s;
        s.mean = phi.colwise().mean().transpose();
        s.sd.resize(phi.cols());
        for (Index h = 0; h < phi.cols(); ++h) {
            const double v = stats::sd(phi.col(h));
            s.sd(h) = v > 0 ? v : 1.0;
        }
        return s;
    }

    Matrix apply(const Matrix& phi) const {
        require(phi.cols() == mean.size(), "PhiScaler: column count mismatch");
        return (phi.rowwise() - mean.transpose()).array().rowwise() / sd.transpose().array();
    }
};

/// Row indices of each subject, subjects in order of first appearance.
struct SubjectIndex {
    std::vector<std::string> ids;
    std::vector<std::vector<Index>> rows;

    static SubjectIndex from_labels(const std::vector<std::string>& labels) {
        SubjectIndex s;
        for (Index i = 0; i < static_cast<Index>(labels.size()); ++i) {
            const auto it = std::find(s.ids.begin(), s.ids.end(), labels[static_cast<std::size_t>(i)]);
            if (it == s.ids.end()) {
                s.ids.push_back(labels[static_cast<std::size_t>(i)]);
                s.rows.push_back({i});
            } else {
                s.rows[static_cast<std::size_t>(it - s.ids.begin())].push_back(i);
            }
        }
        return s;
    }

    /// Every row its own subject.
    static SubjectIndex singletons(Index n) {
        std::vector<std::string> labels;
        for (Index i = 0; i < n; ++i) labels.push_back(std::to_string(i));
        return from_labels(labels);
    }

    /// One subject holding all rows.
    static SubjectIndex single(Index n, const std::string& id = "all") {
        return from_labels(std::vector<std::string>(static_cast<std::size_t>(n), id));
    }

    Index total() const {
        Index t = 0;
        for (const auto& r : rows) t += static_cast<Index>(r.size());
        return t;
    }

    std::optional<std::size_t> find(const std::string& id) const {
        const auto it = std::find(ids.begin(), ids.end(), id);
        if (it == ids.end()) return std::nullopt;
        return static_cast<std::size_t>(it - ids.begin());
    }
};

struct GpModel {
    Kernel kernel;
    PhiScaler scaler;
    Matrix train_phi; // standardized, one row per observation
    Vector train_resid;
    SubjectIndex subjects;
};

namespace detail {

inline Matrix rows_of(const Matrix& m, const std::vector<Index>& idx) { return m(idx, Eigen::all); }
inline Vector rows_of(const Vector& v, const std::vector<Index>& idx) { return v(idx); }

/**
 * Cholesky of c + sigma^2 I with escalating jitter (1e-8 v1, x10, up to
 * 1e-4 v1). Throws NumericalError when even the largest jitter fails.
 */
inline Eigen::LLT<Matrix> factor_covariance(const Matrix& c, const Kernel& k) {
    Matrix K = c;
    K.diagonal().array() += k.sigma * k.sigma;
    Eigen::LLT<Matrix> llt(K);
    if (llt.info() == Eigen::Success) return llt;
    for (double j = 1e-8; j <= 1e-4 * (1 + 1e-12); j *= 10) {
        Matrix Kj = K;
        Kj.diagonal().array() += j * k.v1;
        llt.compute(Kj);
        if (llt.info() == Eigen::Success) return llt;
    }
    throw NumericalError("GP covariance is not positive definite even after jitter");
}

} // namespace detail

/**
 * Gaussian log marginal likelihood of r under independent subject blocks.
 * When grad is given it receives the derivative with respect to
 * [log v1, log w, log sigma].
 */
inline double log_marginal_likelihood(const Matrix& phi, const Vector& r, const SubjectIndex& subjects,
                                      const Kernel& k, Vector* grad = nullptr) {
    require(phi.rows() == r.size(), "log_marginal_likelihood: phi rows differ from residual length");
    require(subjects.total() == r.size(), "log_marginal_likelihood: subject index does not cover the data");
    const Index H = k.dim();
    double lml = 0.0;
    if (grad) *grad = Vector::Zero(H + 2);
    for (const auto& idx : subjects.rows) {
        const Matrix P = detail::rows_of(phi, idx);
        const Vector rb = detail::rows_of(r, idx);
        const Matrix c = kernel_matrix(P, P, k, false);
        const Eigen::LLT<Matrix> llt = detail::factor_covariance(c, k);
        const Vector alpha = llt.solve(rb);
        const Matrix L = llt.matrixL();
        lml += -0.5 * rb.dot(alpha) - L.diagonal().array().log().sum() -
               0.5 * static_cast<double>(rb.size()) * std::log(2.0 * std::numbers::pi);
        if (grad) {
            const Index m = P.rows();
            const Matrix Kinv = llt.solve(Matrix::Identity(m, m));
            const Matrix A = alpha * alpha.transpose() - Kinv;
            (*grad)(0) += 0.5 * A.cwiseProduct(c).sum();
            for (Index h = 0; h < H; ++h) {
                Matrix dK(m, m);
                for (Index i = 0; i < m; ++i)
                    for (Index j = 0; j < m; ++j) {
                        const double d = P(i, h) - P(j, h);
                        dK(i, j) = -0.5 * k.w(h) * d * d * c(i, j);
                    }
                (*grad)(1 + h) += 0.5 * A.cwiseProduct(dK).sum();
            }
            (*grad)(H + 1) += 0.5 * A.trace() * 2.0 * k.sigma * k.sigma;
        }
    }
    return lml;
}

struct HyperFitOptions {
    int restarts = 5;
    double spread = 2.0; // log-units around the moment-based start
    std::uint64_t seed = 0;
    int max_iter = 200;
    double log_bound = 15.0; // |log parameter| cap
    std::optional<Kernel> warm_start; // single local search from here instead of restarts
};

/**
 * Empirical-Bayes kernel: maximizes the log marginal likelihood from a
 * moment-based start (v1 = sigma^2 = Var(r)/2, w = 1) and seeded starts
 * spread over +-spread log-units, keeping the best finite optimum. With a
 * warm start only one local search is run, from that kernel.
 */
inline Kernel fit_hyperparameters(const Matrix& phi, const Vector& r, const SubjectIndex& subjects,
                                  const HyperFitOptions& opt = {}) {
    require(r.size() >= 5, "fit_hyperparameters: at least 5 observations are required");
    require(phi.rows() == r.size() && phi.cols() >= 1, "fit_hyperparameters: phi shape mismatch");
    require(opt.restarts >= 1, "fit_hyperparameters: restarts must be >= 1");
    const Index H = phi.cols();
    const double var = std::max(stats::variance(r), 1e-12);
    Kernel init;
    init.v1 = var / 2;
    init.sigma = std::sqrt(var / 2);
    init.w = Vector::Ones(H);
    if (opt.warm_start) require(opt.warm_start->dim() == H, "fit_hyperparameters: warm start dimension mismatch");
    const Vector p0 = opt.warm_start ? opt.warm_start->log_params() : init.log_params();
    const int restarts = opt.warm_start ? 1 : opt.restarts;
    const double bound = opt.log_bound + std::abs(std::log(var));

    const flars::detail::Objective obj = [&](const Vector& p, Vector& g) {
        if ((p.array().abs() > bound).any()) return std::numeric_limits<double>::infinity();
        try {
            const double v = -log_marginal_likelihood(phi, r, subjects, Kernel::from_log_params(p), &g);
            g = -g;
            return v;
        } catch (const NumericalError&) {
            return std::numeric_limits<double>::infinity();
        }
    };

    std::mt19937_64 rng(opt.seed);
    std::uniform_real_distribution<double> unif(-opt.spread, opt.spread);
    std::optional<flars::detail::BfgsResult> best;
    flars::detail::BfgsOptions bo;
    bo.max_iter = opt.max_iter;
    for (int s = 0; s < restarts; ++s) {
        Vector start = p0;
        if (s > 0)
            for (Index i = 0; i < start.size(); ++i) start(i) += unif(rng);
        const flars::detail::BfgsResult res = flars::detail::bfgs_minimize(obj, start, bo);
        if (res.x.size() == 0 || !std::isfinite(res.f)) continue;
        if (!best || res.f < best->f) best = res;
    }
    if (!best) throw OptimizationFailed("fit_hyperparameters: no start produced a finite likelihood");
    return Kernel::from_log_params(best->x);
}

/// Builds a model from raw covariates: the scaler is fitted on phi.
inline GpModel make_model(const Kernel& k, const Matrix& phi_raw, const Vector& resid, const SubjectIndex& subjects) {
    k.validate();
    require(phi_raw.rows() == resid.size(), "make_model: phi rows differ from residual length");
    require(subjects.total() == resid.size(), "make_model: subject index does not cover the data");
    GpModel m;
    m.kernel = k;
    m.scaler = PhiScaler::fit(phi_raw);
    m.train_phi = m.scaler.apply(phi_raw);
    m.train_resid = resid;
    m.subjects = subjects;
    return m;
}

/// g_hat = c (c + sigma^2 I)^{-1} r and diag Var(g_hat) = sigma^2 (c + sigma^2 I)^{-1} c, per subject.
inline std::pair<Vector, Vector> fit_g(const GpModel& m) {
    const Index n = m.train_resid.size();
    Vector g = Vector::Zero(n), v = Vector::Zero(n);
    for (const auto& idx : m.subjects.rows) {
        const Matrix P = detail::rows_of(m.train_phi, idx);
        const Matrix c = kernel_matrix(P, P, m.kernel, false);
        const auto llt = detail::factor_covariance(c, m.kernel);
        const Vector gb = c * llt.solve(detail::rows_of(m.train_resid, idx));
        const Matrix var = m.kernel.sigma * m.kernel.sigma * llt.solve(c);
        for (std::size_t i = 0; i < idx.size(); ++i) {
            g(idx[i]) = gb(static_cast<Index>(i));
            v(idx[i]) = var(static_cast<Index>(i), static_cast<Index>(i));
        }
    }
    return {g, v};
}

struct Prediction {
    double mean = 0.0;
    double var = 0.0;
};

/**
 * Prediction for a known subject at raw covariates phi_star:
 *   mean = fixed + c*' (c + sigma^2 I)^{-1} r
 *   var  = v1 - c*' (c + sigma^2 I)^{-1} c* + sigma^2
 */
inline Prediction predict_within_subject(const GpModel& m, const std::string& subject, double fixed_pred,
                                         const Vector& phi_star_raw) {
    const auto s = m.subjects.find(subject);
    if (!s) throw InvalidArgument("predict_within_subject: unknown subject '" + subject + "'; use predict_new_subject");
    const auto& idx = m.subjects.rows[*s];
    const Matrix P = detail::rows_of(m.train_phi, idx);
    const Matrix star = m.scaler.apply(phi_star_raw.transpose());
    const Matrix c = kernel_matrix(P, P, m.kernel, false);
    const Vector cs = kernel_matrix(P, star, m.kernel, false).col(0);
    const auto llt = detail::factor_covariance(c, m.kernel);
    Prediction p;
    p.mean = fixed_pred + cs.dot(llt.solve(detail::rows_of(m.train_resid, idx)));
    const double s2 = m.kernel.sigma * m.kernel.sigma;
    p.var = std::max(m.kernel.v1 - cs.dot(llt.solve(cs)), 0.0) + s2;
    return p;
}

enum class NewSubjectWeights { Uniform, InverseDistance };

inline NewSubjectWeights new_subject_weights_from_string(const std::string& s) {
    if (s == "uniform") return NewSubjectWeights::Uniform;
    if (s == "inverse_distance") return NewSubjectWeights::InverseDistance;
    throw InvalidArgument("unknown new-subject weighting '" + s + "'");
}

/// Weighted average of per-subject predictions; fixed-effects only when there are none.
inline double predict_new_subject(const std::vector<double>& per_subject, const std::vector<double>& weights,
                                  double fixed_pred) {
    if (per_subject.empty()) return fixed_pred;
    require(weights.size() == per_subject.size(), "predict_new_subject: weights and predictions differ in length");
    double sum = 0.0, out = 0.0;
    for (std::size_t i = 0; i < weights.size(); ++i) {
        require(std::isfinite(weights[i]) && weights[i] >= 0, "predict_new_subject: weights must be nonnegative");
        sum += weights[i];
        out += weights[i] * per_subject[i];
    }
    require(std::abs(sum - 1.0) < 1e-9, "predict_new_subject: weights must sum to 1");
    return out;
}

/// Uniform weights, or inverse distance from phi_star to each subject's mean covariates.
inline std::vector<double> subject_weights(const GpModel& m, const Vector& phi_star_raw, NewSubjectWeights kind) {
    const std::size_t S = m.subjects.ids.size();
    std::vector<double> w(S, S ? 1.0 / static_cast<double>(S) : 0.0);
    if (kind == NewSubjectWeights::Uniform || S == 0) return w;
    const Vector star = m.scaler.apply(phi_star_raw.transpose()).row(0).transpose();
    double sum = 0.0;
    for (std::size_t s = 0; s < S; ++s) {
        const Vector centroid = detail::rows_of(m.train_phi, m.subjects.rows[s]).colwise().mean().transpose();
        const double d = (centroid - star).norm();
        w[s] = 1.0 / std::max(d, 1e-12);
        sum += w[s];
    }
    for (double& x : w) x /= sum;
    return w;
}

/// New-subject prediction: fixed part plus the weighted as-if-member GP means.
inline Prediction predict_new(const GpModel& m, double fixed_pred, const Vector& phi_star_raw,
                              NewSubjectWeights kind = NewSubjectWeights::Uniform) {
    std::vector<double> means;
    std::vector<double> vars;
    for (const auto& id : m.subjects.ids) {
        const Prediction p = predict_within_subject(m, id, 0.0, phi_star_raw);
        means.push_back(p.mean);
        vars.push_back(p.var);
    }
    const std::vector<double> w = subject_weights(m, phi_star_raw, kind);
    Prediction out;
    out.mean = predict_new_subject(means, w, 0.0) + fixed_pred;
    if (means.empty()) {
        out.var = m.kernel.v1 + m.kernel.sigma * m.kernel.sigma;
    } else {
        // mixture variance
        double v = 0.0;
        for (std::size_t i = 0; i < w.size(); ++i) v += w[i] * (vars[i] + means[i] * means[i]);
        const double mu = out.mean - fixed_pred;
        out.var = std::max(v - mu * mu, m.kernel.sigma * m.kernel.sigma);
    }
    return out;
}

struct BackfitOptions {
    FlarsOptions flars;
    HyperFitOptions hyper;
    int max_sweeps = 50;
    double tol = 1e-6;
    std::optional<Kernel> frozen_kernel; // skip hyperparameter re-estimation
};

struct MixedFit {
    FittedModel fixed;
    GpModel gp;
    int n_backfit_iters = 0;
    bool converged = false;
    bool diverged = false;
    std::vector<double> rss_history;
    std::vector<double> objective_history; // -log marginal likelihood of y - f_hat
    std::vector<double> change_history;
};

/**
 * Alternates a GP fit on r = y - f_hat with a fixed-effects refit on
 * y - g_hat, starting from g_hat = 0. The fixed part's penalties are pinned
 * once so every sweep applies the same smoother. Stops when the relative
 * change of the total fit drops below tol. Three consecutive sweeps in
 * which both the objective -log p(y - f_hat | theta) and the size of the
 * update grow end the loop as diverged.
 */
inline MixedFit backfit(const Vector& y, const CandidateSet& cands, const std::vector<std::string>& selected,
                        const Matrix& phi_raw, const SubjectIndex& subjects, const BackfitOptions& opt = {}) {
    require(phi_raw.rows() == y.size(), "backfit: phi rows differ from response length");
    require(subjects.total() == y.size(), "backfit: subject index does not cover the data");
    require(opt.max_sweeps >= 1 && opt.tol > 0, "backfit: invalid sweep settings");
    FlarsOptions fo = opt.flars;
    fo.penalty = pin_penalties(y, cands, selected, opt.flars.penalty);
    MixedFit out;
    out.fixed = fit_fixed_effects(y, cands, selected, fo);
    Vector f = out.fixed.predict(cands);
    Vector g = Vector::Zero(y.size());
    Vector total = f;
    const Matrix phi = PhiScaler::fit(phi_raw).apply(phi_raw);
    Kernel k;
    int increases = 0;
    double prev = std::numeric_limits<double>::infinity();
    double prev_change = std::numeric_limits<double>::infinity();

    for (int sweep = 1; sweep <= opt.max_sweeps; ++sweep) {
        const Vector r = y - f;
        if (opt.frozen_kernel) {
            k = *opt.frozen_kernel;
        } else {
            // later sweeps track the previous optimum so theta cannot hop between local maxima
            HyperFitOptions h = opt.hyper;
            if (sweep > 1) h.warm_start = k;
            k = fit_hyperparameters(phi, r, subjects, h);
        }
        g = fit_g(make_model(k, phi_raw, r, subjects)).first;
        out.fixed = fit_fixed_effects(y - g, cands, selected, fo);
        f = out.fixed.predict(cands);
        const Vector new_total = f + g;
        const double change = (new_total - total).norm() / std::max(total.norm(), 1e-300);
        const double objective = -log_marginal_likelihood(phi, y - f, subjects, k, nullptr);
        total = new_total;
        out.n_backfit_iters = sweep;
        out.rss_history.push_back((y - total).squaredNorm());
        out.objective_history.push_back(objective);
        out.change_history.push_back(change);
        // a settling loop can drift uphill slightly while its updates shrink; only growing updates count
        const bool worse = objective > prev + 1e-8 * std::max(1.0, std::abs(prev)) && change > prev_change;
        increases = worse ? increases + 1 : 0;
        prev = objective;
        prev_change = change;
        if (change < opt.tol) {
            out.converged = true;
            break;
        }
        if (increases >= 3) {
            out.diverged = true;
            break;
        }
    }
    out.gp = make_model(k, phi_raw, y - f, subjects);
    return out;
}

} // namespace flars::gp
