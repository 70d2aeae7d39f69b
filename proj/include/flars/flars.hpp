#pragma once

#include "flars/common.hpp"
#include "flars/fcca.hpp"
#include "flars/funcrep.hpp"

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <map>
#include <optional>
#include <string>
#include <vector>

namespace flars {

struct FunctionalCandidate {
    std::string id;
    FunctionalSample data;
};

struct ScalarCandidate {
    std::string id;
    Vector values;
};

/**
 * Functional and scalar candidates sharing one sample. Candidate indices run
 * over the functional list first, then the scalar list; this order breaks
 * every tie in the algorithm.
 */
struct CandidateSet {
    std::vector<FunctionalCandidate> functional;
    std::vector<ScalarCandidate> scalar;
    RepresentationConfig representation;

    std::size_t size() const { return functional.size() + scalar.size(); }

    Index n() const {
        if (!functional.empty()) return functional.front().data.n();
        if (!scalar.empty()) return scalar.front().values.size();
        return 0;
    }

    bool is_functional(std::size_t i) const { return i < functional.size(); }

    const std::string& id(std::size_t i) const {
        return is_functional(i) ? functional[i].id : scalar[i - functional.size()].id;
    }

    std::optional<std::size_t> index_of(const std::string& name) const {
        for (std::size_t i = 0; i < size(); ++i)
            if (id(i) == name) return i;
        return std::nullopt;
    }

    void validate() const {
        require(size() > 0, "CandidateSet: no candidates");
        const Index n = this->n();
        for (std::size_t i = 0; i < size(); ++i) {
            for (std::size_t j = i + 1; j < size(); ++j)
                require(id(i) != id(j), "CandidateSet: duplicate id '" + id(i) + "'");
        }
        for (const auto& f : functional) {
            require(f.data.n() == n, "CandidateSet: '" + f.id + "' has a different sample count");
            require(f.data.values.allFinite(), "CandidateSet: '" + f.id + "' has non-finite values");
            require(f.data.grid.points() == functional.front().data.grid.points(),
                    "CandidateSet: functional candidates must share one grid");
        }
        for (const auto& s : scalar) {
            require(s.values.size() == n, "CandidateSet: '" + s.id + "' has a different sample count");
            require(s.values.allFinite(), "CandidateSet: '" + s.id + "' has non-finite values");
        }
    }

    /// Shared representation of the functional candidates.
    Representation build_representation() const {
        require(!functional.empty(), "CandidateSet: no functional candidates to represent");
        return flars::build_representation(representation, functional.front().data.grid);
    }

    /// Candidates restricted to the given ids, keeping the original order.
    CandidateSet subset(const std::vector<std::string>& ids) const {
        CandidateSet out;
        out.representation = representation;
        for (const auto& f : functional)
            if (std::find(ids.begin(), ids.end(), f.id) != ids.end()) out.functional.push_back(f);
        for (const auto& s : scalar)
            if (std::find(ids.begin(), ids.end(), s.id) != ids.end()) out.scalar.push_back(s);
        return out;
    }
};

enum class NormalizationRule { Norm, Trace, Identity };

inline std::string to_string(NormalizationRule r) {
    switch (r) {
    case NormalizationRule::Norm: return "Norm";
    case NormalizationRule::Trace: return "Trace";
    case NormalizationRule::Identity: return "Identity";
    }
    return "?";
}

inline NormalizationRule normalization_from_string(const std::string& s) {
    if (s == "Norm" || s == "norm") return NormalizationRule::Norm;
    if (s == "Trace" || s == "trace") return NormalizationRule::Trace;
    if (s == "Identity" || s == "identity") return NormalizationRule::Identity;
    throw InvalidArgument("unknown normalization '" + s + "'");
}

enum class StopRule { CdDrop, CpMin, MaxIter, ModificationITerminal };

inline std::string to_string(StopRule r) {
    switch (r) {
    case StopRule::CdDrop: return "cd";
    case StopRule::CpMin: return "cp";
    case StopRule::MaxIter: return "max_iter";
    case StopRule::ModificationITerminal: return "modification_i";
    }
    return "?";
}

inline StopRule stop_rule_from_string(const std::string& s) {
    if (s == "cd") return StopRule::CdDrop;
    if (s == "cp") return StopRule::CpMin;
    if (s == "max_iter") return StopRule::MaxIter;
    throw InvalidArgument("unknown stopping rule '" + s + "'");
}

/// Tuning of the per-candidate penalties. Grids are relative to data scale.
struct PenaltyOptions {
    std::optional<double> lambda1; // fixed value, otherwise GCV on the current residual
    std::optional<double> lambda2; // fixed value, otherwise 0 unless ill-conditioned
    std::vector<double> lambda1_grid = default_relative_lambda1_grid();
    std::vector<double> lambda2_grid = default_relative_lambda2_grid();
    int cv_folds = 5;
    double ill_conditioned = 1e10;
    std::uint64_t seed = 0;
    // per-candidate values that bypass selection, keyed by id
    std::map<std::string, double> lambda1_pinned;
    std::map<std::string, double> lambda2_pinned;

    void validate() const {
        for (const auto* m : {&lambda1_pinned, &lambda2_pinned})
            for (const auto& [id, v] : *m)
                require(std::isfinite(v) && v >= 0, "PenaltyOptions: pinned penalty for '" + id + "' must be >= 0");
        if (lambda1) require(std::isfinite(*lambda1) && *lambda1 >= 0, "PenaltyOptions: lambda1 must be >= 0");
        if (lambda2) require(std::isfinite(*lambda2) && *lambda2 >= 0, "PenaltyOptions: lambda2 must be >= 0");
        require(lambda1 || !lambda1_grid.empty(), "PenaltyOptions: empty lambda1 grid");
        require(lambda2 || !lambda2_grid.empty(), "PenaltyOptions: empty lambda2 grid");
        require(cv_folds >= 2, "PenaltyOptions: cv_folds must be >= 2");
    }
};

struct FlarsOptions {
    PenaltyOptions penalty;
    NormalizationRule norm = NormalizationRule::Norm;
    bool modification2 = false;
    double kappa = 0.05;
    StopRule stop = StopRule::CdDrop;
    double cd_threshold = 0.10;
    int max_iter = 0;       // 0 means number of candidates + 1
    bool full_path = false; // keep iterating past the first CD drop
    int threads = 1;

    void validate() const {
        penalty.validate();
        require(kappa > 0 && kappa < 1, "FlarsOptions: kappa must lie in (0, 1)");
        require(cd_threshold > 0 && cd_threshold < 1, "FlarsOptions: cd_threshold must lie in (0, 1)");
        require(max_iter >= 0, "FlarsOptions: max_iter must be >= 0");
        require(stop != StopRule::ModificationITerminal, "FlarsOptions: not a selectable stopping rule");
    }
};

/// A candidate after centering and scaling, with its cached smoother.
struct PreparedCandidate {
    std::string id;
    MemberKind kind = MemberKind::Scalar;
    Matrix design;   // centered, scaled; n x d
    Matrix roughness;
    Matrix ridge;
    double scale = 1.0; // raw values were divided by this
    double lambda2 = 0.0;
    std::vector<double> lambda1_grid; // absolute
    std::optional<SpectralSmoother> smoother;
    bool usable = true; // false for constant candidates
};

/**
 * Centered response plus prepared candidates.
 *
 * The response is centered but not scaled. Scalars are scaled to unit SD,
 * functional candidates by the SD of their values pooled over the grid.
 */
class FlarsProblem {
public:
    FlarsProblem(const Vector& y, const CandidateSet& cands, const PenaltyOptions& pen = {})
        : pen_(pen) {
        cands.validate();
        pen.validate();
        require(y.size() == cands.n(), "FlarsProblem: response length differs from candidate sample count");
        require(y.allFinite(), "FlarsProblem: non-finite response");
        require(y.size() >= 3, "FlarsProblem: at least 3 samples are required");
        y_mean_ = stats::mean(y);
        yc_ = detail::centered_response(y, "FlarsProblem");
        if (!cands.functional.empty()) rep_ = cands.build_representation();
        const double nm1 = static_cast<double>(y.size() - 1);

        for (const auto& f : cands.functional) {
            PreparedCandidate c;
            c.id = f.id;
            c.kind = MemberKind::Functional;
            const Matrix xc = stats::centered_columns(f.data.values);
            c.scale = std::sqrt(xc.squaredNorm() / (nm1 * static_cast<double>(xc.cols())));
            c.roughness = rep_->W2;
            c.ridge = rep_->ridge;
            if (!(c.scale > 0)) {
                c.usable = false;
                c.scale = 1.0;
            }
            c.design = xc * rep_->W / c.scale;
            if (c.usable) prepare_functional(c);
            cands_.push_back(std::move(c));
        }
        for (const auto& s : cands.scalar) {
            PreparedCandidate c;
            c.id = s.id;
            c.kind = MemberKind::Scalar;
            c.scale = stats::sd(s.values);
            c.roughness = Matrix::Zero(1, 1);
            c.ridge = Matrix::Identity(1, 1);
            if (!(c.scale > 0)) {
                c.usable = false;
                c.scale = 1.0;
            }
            c.design = stats::centered(s.values) / c.scale;
            const auto pin = pen.lambda2_pinned.find(c.id);
            c.lambda2 = pin != pen.lambda2_pinned.end() ? pin->second : pen.lambda2.value_or(0.0);
            cands_.push_back(std::move(c));
        }
    }

    const Vector& response() const { return yc_; }
    double response_mean() const { return y_mean_; }
    Index n() const { return yc_.size(); }
    std::size_t size() const { return cands_.size(); }
    const PreparedCandidate& candidate(std::size_t i) const { return cands_[i]; }
    const std::optional<Representation>& representation() const { return rep_; }
    const PenaltyOptions& penalty() const { return pen_; }

    /// Roughness weight for candidate i against residual r (fixed or GCV).
    double lambda1_for(std::size_t i, const Vector& r) const {
        const auto& c = cands_[i];
        if (c.kind == MemberKind::Scalar) return 0.0;
        if (const auto pin = pen_.lambda1_pinned.find(c.id); pin != pen_.lambda1_pinned.end()) return pin->second;
        if (pen_.lambda1) return *pen_.lambda1;
        const auto l = c.smoother->select_lambda1(c.lambda1_grid, r);
        if (!l) throw IllPosedError("no admissible lambda1 for '" + c.id + "'");
        return *l;
    }

    /// Group member with penalties folded in, for use with PenaltyConfig{1, 1}.
    GroupMember member(std::size_t i, double lambda1) const {
        const auto& c = cands_[i];
        GroupMember m;
        m.id = c.id;
        m.kind = c.kind;
        m.design = c.design;
        m.roughness = lambda1 * c.roughness;
        m.ridge = c.lambda2 * c.ridge;
        return m;
    }

private:
    void prepare_functional(PreparedCandidate& c) {
        const Matrix G = c.design.transpose() * c.design;
        const double rn = c.roughness.norm();
        const double l1_scale = rn > 0 ? G.norm() / rn : 0.0;
        c.lambda1_grid = scaled_grid(pen_.lambda1_grid, l1_scale);
        const auto pin = pen_.lambda2_pinned.find(c.id);
        if (pin != pen_.lambda2_pinned.end() || pen_.lambda2) {
            c.lambda2 = pin != pen_.lambda2_pinned.end() ? pin->second : *pen_.lambda2;
            c.smoother.emplace(c.design, c.roughness, c.ridge, c.lambda2);
            return;
        }
        // lambda2 stays 0 unless the penalized cross-product is ill-conditioned
        std::optional<double> l1;
        try {
            c.smoother.emplace(c.design, c.roughness, c.ridge, 0.0);
            l1 = pen_.lambda1 ? pen_.lambda1 : c.smoother->select_lambda1(c.lambda1_grid, yc_);
        } catch (const SingularMatrixError&) {
            c.smoother.reset();
        }
        bool ill = !c.smoother || !l1;
        if (!ill) {
            try {
                const PenalizedSolver s(G + *l1 * c.roughness);
                ill = s.condition_estimate() > pen_.ill_conditioned;
            } catch (const SingularMatrixError&) {
                ill = true;
            }
        }
        if (!ill) return;
        const double l1_cv = l1.value_or(pen_.lambda1.value_or(c.lambda1_grid.empty() ? 0.0 : c.lambda1_grid.back()));
        GroupMember m;
        m.id = c.id;
        m.kind = MemberKind::Functional;
        m.design = c.design;
        m.roughness = c.roughness;
        m.ridge = c.ridge;
        const VariableGroup g({m});
        const auto grid = scaled_grid(pen_.lambda2_grid, lambda2_scale(g));
        c.lambda2 = select_lambda2_cv(yc_, g, grid, pen_.cv_folds, l1_cv, pen_.seed);
        c.smoother.emplace(c.design, c.roughness, c.ridge, c.lambda2);
    }

    PenaltyOptions pen_;
    double y_mean_ = 0.0;
    Vector yc_;
    std::optional<Representation> rep_;
    std::vector<PreparedCandidate> cands_;
};

/// Path state. Candidates are referred to by their index in the problem.
struct SelectionState {
    int iteration = 0; // completed iterations
    std::vector<std::size_t> active;
    std::vector<std::size_t> inactive;
    std::vector<std::size_t> dropped;
    Vector residual;
    std::vector<Vector> directions;
    std::vector<double> distances;
    std::vector<double> corr_history; // NaN where undefined
    std::vector<double> cd_history;
    std::vector<double> rss_history;
    std::vector<double> df_history;
    std::vector<Vector> coef_accum;                    // per candidate, empty until active
    std::vector<std::vector<double>> variance_history; // projection variance per candidate
    std::vector<std::size_t> entered;                  // entered[k]: variable joining before iteration k+1
    std::vector<std::vector<std::size_t>> active_after; // active set after iteration k+1
    std::vector<std::vector<std::size_t>> dropped_at;   // ids dropped by Modification II in iteration k+1
    Matrix hat_product;
    bool terminal = false;
    bool modification_one_applied = false;

    bool is_active(std::size_t i) const { return std::find(active.begin(), active.end(), i) != active.end(); }
};

struct StoppingDiagnostics {
    double df_star = 0.0;
    double cp = std::numeric_limits<double>::quiet_NaN();
    double sigma2 = std::numeric_limits<double>::quiet_NaN();
    Vector cd_trace;
    Vector cp_trace;
    int stop_index = 0;
    StopRule stop_rule = StopRule::MaxIter;
};

struct IterationRecord {
    int iteration = 0;
    std::string selected_id;
    double alpha = 0.0;
    double rho_star = std::numeric_limits<double>::quiet_NaN();
    double cd = std::numeric_limits<double>::quiet_NaN();
    double df_star = 0.0;
    double cp = std::numeric_limits<double>::quiet_NaN();
    double rss = 0.0;
};

/**
 * Linear model in original data units:
 *   y = intercept + sum_j X_j W b_j + sum_m z_m g_m
 */
struct FittedModel {
    struct FunctionalTerm {
        std::string id;
        Vector coef;
    };
    struct ScalarTerm {
        std::string id;
        double coef = 0.0;
    };

    std::optional<Representation> rep;
    std::vector<FunctionalTerm> functional;
    std::vector<ScalarTerm> scalar;
    double intercept = 0.0;

    std::vector<std::string> ids() const {
        std::vector<std::string> out;
        for (const auto& f : functional) out.push_back(f.id);
        for (const auto& s : scalar) out.push_back(s.id);
        return out;
    }

    /// Fitted values on data holding (at least) every term's id.
    Vector predict(const CandidateSet& data) const {
        Vector out = Vector::Constant(data.n(), intercept);
        for (const auto& f : functional) {
            const auto i = data.index_of(f.id);
            require(i && data.is_functional(*i), "FittedModel::predict: missing functional variable '" + f.id + "'");
            out += project(data.functional[*i].data, *rep, f.coef);
        }
        for (const auto& s : scalar) {
            const auto i = data.index_of(s.id);
            require(i && !data.is_functional(*i), "FittedModel::predict: missing scalar variable '" + s.id + "'");
            out += s.coef * data.scalar[*i - data.functional.size()].values;
        }
        return out;
    }
};

struct FlarsResult {
    SelectionState state;
    StoppingDiagnostics diagnostics;
    FittedModel model;
    std::vector<IterationRecord> trace;
    std::vector<std::string> selected;
};

namespace detail {

inline double normalizer(NormalizationRule norm, double frobenius, double trace) {
    switch (norm) {
    case NormalizationRule::Norm: return frobenius;
    case NormalizationRule::Trace: return trace;
    case NormalizationRule::Identity: return 1.0;
    }
    return 1.0;
}

/**
 * Smallest positive root of
 *   a2 a^2 - 2 a1 a + a0 = 0
 *   a2 = u'Su/Nf - u'u,  a1 = r'Su/Nf - r'u,  a0 = r'Sr/Nf - (r'u)^2/u'u
 * not exceeding the OLS distance r'u/u'u. Beyond that point the direction
 * would overshoot its own least-squares fit, so such roots count as absent.
 */
inline std::optional<double> equal_correlation_step(double rSr, double rSu, double uSu, double nf, double uu,
                                                    double ru) {
    if (!(nf > 0) || !(uu > 0)) return std::nullopt;
    const double a2 = uSu / nf - uu;
    const double a1 = rSu / nf - ru;
    const double a0 = rSr / nf - ru * ru / uu;
    const double alpha_max = ru / uu;
    if (!(alpha_max > 0)) return std::nullopt;
    const double limit = alpha_max * (1.0 + 1e-12);
    std::optional<double> best;
    auto consider = [&](double a) {
        if (std::isfinite(a) && a > 0 && a <= limit && (!best || a < *best)) best = std::min(a, alpha_max);
    };
    const double scale = std::abs(uSu / nf) + uu;
    if (std::abs(a2) <= 1e-12 * scale) {
        if (a1 != 0.0) consider(a0 / (2.0 * a1));
        return best;
    }
    const double disc = a1 * a1 - a2 * a0;
    if (disc < 0) return std::nullopt;
    const double q = a1 + std::copysign(std::sqrt(disc), a1);
    if (q != 0.0) {
        consider(q / a2);
        consider(a0 / q);
    } else {
        consider(0.0);
    }
    return best;
}

} // namespace detail

/// Smallest positive step at which a functional candidate ties with u.
inline std::optional<double> step_distance_functional(const Vector& r, const Vector& u, const FunctionalSample& x,
                                                      const Representation& rep, const PenaltyConfig& pen,
                                                      NormalizationRule norm) {
    require(r.size() == u.size() && r.size() == x.n(), "step_distance_functional: length mismatch");
    const VariableGroup g({functional_member("x", x, rep)});
    const detail::GroupSmoother sm = detail::make_smoother(g, pen);
    const double nf = detail::normalizer(norm, sm.frobenius(), sm.trace());
    return detail::equal_correlation_step(sm.quad(r, r), sm.quad(r, u), sm.quad(u, u), nf, u.squaredNorm(), r.dot(u));
}

/// As step_distance_functional with the projection onto z; its norm and trace are both 1.
inline std::optional<double> step_distance_scalar(const Vector& r, const Vector& u, const Vector& z,
                                                  NormalizationRule norm) {
    require(r.size() == u.size() && r.size() == z.size(), "step_distance_scalar: length mismatch");
    const Vector zc = stats::centered(z);
    const double zz = zc.squaredNorm();
    if (!(zz > 0)) return std::nullopt;
    const double zr = zc.dot(r), zu = zc.dot(u);
    const double nz = detail::normalizer(norm, 1.0, 1.0);
    return detail::equal_correlation_step(zr * zr / zz, zr * zu / zz, zu * zu / zz, nz, u.squaredNorm(), r.dot(u));
}

/// Squared canonical correlation of candidate i with r, unnormalized.
inline double candidate_rho2(const FlarsProblem& prob, std::size_t i, const Vector& r) {
    const auto& c = prob.candidate(i);
    const double rr = r.squaredNorm();
    if (!c.usable || !(rr > 0)) return 0.0;
    if (c.kind == MemberKind::Scalar) {
        const double zr = c.design.col(0).dot(r);
        return zr * zr / (c.design.col(0).squaredNorm() * rr);
    }
    const double l1 = prob.lambda1_for(i, r);
    const Vector cr = c.smoother->coordinates(r);
    return std::clamp(c.smoother->quad(l1, cr, cr) / rr, 0.0, 1.0);
}

/// Index of the candidate most correlated with the response; ties go to the lowest index.
inline std::size_t first_selection(const FlarsProblem& prob, const std::vector<bool>& eligible) {
    require(eligible.size() == prob.size(), "first_selection: eligibility mask has the wrong length");
    std::optional<std::size_t> best;
    double best_rho2 = 0.0;
    for (std::size_t i = 0; i < prob.size(); ++i) {
        if (!eligible[i]) continue;
        const double r2 = candidate_rho2(prob, i, prob.response());
        if (r2 > best_rho2) {
            best_rho2 = r2;
            best = i;
        }
    }
    if (!best) throw NoSignalError("first_selection: no candidate correlates with the response");
    return *best;
}

inline std::string first_selection(const Vector& y, const CandidateSet& cands, const PenaltyOptions& pen = {}) {
    const FlarsProblem prob(y, cands, pen);
    return prob.candidate(first_selection(prob, std::vector<bool>(prob.size(), true))).id;
}

/// Direction of one iteration: standardized penalized fit of r on the active group.
struct Direction {
    Vector u;                      // centered, SD 1
    std::vector<Vector> step_coefs; // per active member, in problem design units
    Vector fitted;                 // D c before standardization
    double fitted_sd = 0.0;
    std::vector<double> lambda1;   // per active member
    Matrix design;                 // stacked active design
    std::optional<PenalizedSolver> solver;
};

inline Direction direction(const SelectionState& state, const FlarsProblem& prob) {
    require(!state.active.empty(), "direction: active set is empty");
    Direction dir;
    std::vector<GroupMember> members;
    for (std::size_t i : state.active) {
        const double l1 = prob.lambda1_for(i, state.residual);
        dir.lambda1.push_back(l1);
        members.push_back(prob.member(i, l1));
    }
    const VariableGroup g(std::move(members));
    const PenaltyConfig unit{1.0, 1.0};
    dir.design = g.design();
    const Matrix gram = dir.design.transpose() * dir.design;
    dir.solver.emplace(0.5 * (gram + gram.transpose()) + penalty_matrix(g, unit));
    Vector c = dir.solver->solve_vec(dir.design.transpose() * state.residual);
    dir.fitted = dir.design * c;
    if (dir.fitted.dot(state.residual) < 0) {
        c = -c;
        dir.fitted = -dir.fitted;
    }
    dir.fitted_sd = stats::sd(dir.fitted);
    dir.u = dir.fitted_sd > 0 ? Vector(dir.fitted / dir.fitted_sd) : Vector(Vector::Zero(dir.fitted.size()));
    const auto off = g.offsets();
    for (std::size_t k = 0; k < g.members.size(); ++k) dir.step_coefs.push_back(c.segment(off[k], g.members[k].dim()));
    return dir;
}

/// Step distance of candidate i along u, using the problem's cached smoother.
inline std::optional<double> candidate_step(const FlarsProblem& prob, std::size_t i, const Vector& r, const Vector& u,
                                            NormalizationRule norm) {
    const auto& c = prob.candidate(i);
    if (!c.usable) return std::nullopt;
    if (c.kind == MemberKind::Scalar) return step_distance_scalar(r, u, c.design.col(0), norm);
    const double l1 = prob.lambda1_for(i, r);
    const auto& sm = *c.smoother;
    const Vector cr = sm.coordinates(r), cu = sm.coordinates(u);
    const double nf = detail::normalizer(norm, sm.frobenius(l1), sm.trace(l1));
    return detail::equal_correlation_step(sm.quad(l1, cr, cr), sm.quad(l1, cr, cu), sm.quad(l1, cu, cu), nf,
                                          u.squaredNorm(), r.dot(u));
}

namespace detail {

// Moves along dir by alpha and books coefficients, hat product and diagnostics.
inline void take_step(SelectionState& state, const FlarsProblem& prob, const Direction& dir, double alpha) {
    const Vector r_old = state.residual;
    state.residual = r_old - alpha * dir.u;
    for (std::size_t k = 0; k < state.active.size(); ++k) {
        Vector& acc = state.coef_accum[state.active[k]];
        if (acc.size() == 0) acc = Vector::Zero(dir.step_coefs[k].size());
        acc += (alpha / dir.fitted_sd) * dir.step_coefs[k];
    }
    // hat_product <- (I - H*) hat_product with H* = H alpha / SD(H r)
    const Matrix t = dir.solver->solve(dir.design.transpose() * state.hat_product);
    state.hat_product -= (alpha / dir.fitted_sd) * (dir.design * t);

    ++state.iteration;
    state.directions.push_back(dir.u);
    state.distances.push_back(alpha);
    const double rho = state.iteration == 1 ? std::numeric_limits<double>::quiet_NaN()
                                            : std::abs(stats::pearson(dir.u, state.residual));
    state.corr_history.push_back(rho);
    state.cd_history.push_back(rho * alpha);
    state.rss_history.push_back(state.residual.squaredNorm());
    const double n = static_cast<double>(prob.n());
    state.df_history.push_back(std::clamp(n - state.hat_product.trace(), 0.0, n));
}

} // namespace detail

/// Full least-squares step along the current direction; ends the path.
inline void modification_one(SelectionState& state, const FlarsProblem& prob, const Direction& dir) {
    const double alpha = dir.u.dot(state.residual) / dir.u.squaredNorm();
    detail::take_step(state, prob, dir, alpha);
    state.terminal = true;
    state.modification_one_applied = true;
}

/**
 * Drops active variables whose projection variance fell below both their own
 * past maximum and kappa Var(y). Dropped variables keep their frozen
 * coefficients out of the model and cannot re-enter.
 */
inline std::vector<std::size_t> modification_two(SelectionState& state, const FlarsProblem& prob, double kappa) {
    require(kappa > 0 && kappa < 1, "modification_two: kappa must lie in (0, 1)");
    const double limit = kappa * stats::variance(prob.response());
    std::vector<std::size_t> dropped;
    std::vector<std::size_t> keep;
    for (std::size_t i : state.active) {
        const auto& hist = state.variance_history[i];
        bool drop = false;
        if (hist.size() >= 2) {
            const double now = hist.back();
            const double past = *std::max_element(hist.begin(), hist.end() - 1);
            drop = now < past && now < limit;
        }
        (drop ? dropped : keep).push_back(i);
    }
    if (keep.empty()) return {}; // never empty the model
    state.active = keep;
    for (std::size_t i : dropped) state.dropped.push_back(i);
    return dropped;
}

namespace detail {

inline void record_variances(SelectionState& state, const FlarsProblem& prob) {
    for (std::size_t i : state.active)
        state.variance_history[i].push_back(stats::variance(prob.candidate(i).design * state.coef_accum[i]));
}

} // namespace detail

/**
 * One fLARS iteration: direction of the active set, step to the first
 * inactive candidate that ties in normalized correlation, entry of that
 * candidate. Without any tie, Modification I takes the full OLS step.
 */
inline void iterate(SelectionState& state, const FlarsProblem& prob, const FlarsOptions& opt) {
    require(!state.terminal, "iterate: path already terminated");
    const Direction dir = direction(state, prob);
    if (!(dir.fitted_sd > 1e-14 * std::max(1.0, state.residual.norm()))) {
        state.terminal = true;
        return;
    }
    std::vector<std::optional<double>> steps(state.inactive.size());
    detail::parallel_for(state.inactive.size(), opt.threads, [&](std::size_t k) {
        steps[k] = candidate_step(prob, state.inactive[k], state.residual, dir.u, opt.norm);
    });
    std::optional<std::size_t> win;
    for (std::size_t k = 0; k < steps.size(); ++k)
        if (steps[k] && (!win || *steps[k] < *steps[*win])) win = k;

    if (!win) {
        modification_one(state, prob, dir);
    } else {
        detail::take_step(state, prob, dir, *steps[*win]);
    }
    detail::record_variances(state, prob);
    std::vector<std::size_t> dropped;
    if (opt.modification2 && !state.terminal) dropped = modification_two(state, prob, opt.kappa);
    state.dropped_at.push_back(dropped);
    state.active_after.push_back(state.active);
    if (win) {
        const std::size_t entrant = state.inactive[*win];
        state.inactive.erase(state.inactive.begin() + static_cast<std::ptrdiff_t>(*win));
        state.active.push_back(entrant);
        state.entered.push_back(entrant);
    }
}

inline SelectionState initial_state(const FlarsProblem& prob, const std::vector<bool>& eligible) {
    SelectionState s;
    s.residual = prob.response();
    s.coef_accum.assign(prob.size(), Vector());
    s.variance_history.assign(prob.size(), {});
    s.hat_product = Matrix::Identity(prob.n(), prob.n());
    const std::size_t first = first_selection(prob, eligible);
    s.active.push_back(first);
    s.entered.push_back(first);
    for (std::size_t i = 0; i < prob.size(); ++i)
        if (eligible[i] && i != first && prob.candidate(i).usable) s.inactive.push_back(i);
    return s;
}

/**
 * 1-based index just before the first CD value below frac * max(CD).
 * Undefined (NaN) entries are ignored; without a drop the last index.
 */
inline int stopping_cd(const std::vector<double>& cd, double frac = 0.10) {
    require(!cd.empty(), "stopping_cd: empty trace");
    double mx = -std::numeric_limits<double>::infinity();
    for (double v : cd)
        if (std::isfinite(v)) mx = std::max(mx, v);
    if (!std::isfinite(mx)) return static_cast<int>(cd.size());
    for (std::size_t k = 0; k < cd.size(); ++k)
        if (std::isfinite(cd[k]) && cd[k] < frac * mx) return std::max(1, static_cast<int>(k));
    return static_cast<int>(cd.size());
}

inline int stopping_cd(const Vector& cd, double frac = 0.10) {
    return stopping_cd(std::vector<double>(cd.data(), cd.data() + cd.size()), frac);
}

/// tr(I - prod(I - H*_k)); zero before the first iteration.
inline double degrees_of_freedom(const SelectionState& state) {
    if (state.iteration == 0) return 0.0;
    const double n = static_cast<double>(state.hat_product.rows());
    return std::clamp(n - state.hat_product.trace(), 0.0, n);
}

inline double mallows_cp(double rss, double df, Index n, double sigma2) {
    require(sigma2 > 0 && std::isfinite(sigma2), "mallows_cp: sigma2 must be positive");
    return rss / sigma2 - static_cast<double>(n) + 2.0 * df;
}

/// RSS / sigma2 - n + 2 df* at the current state.
inline double mallows_cp(const SelectionState& state, double sigma2) {
    return mallows_cp(state.residual.squaredNorm(), degrees_of_freedom(state), state.residual.size(), sigma2);
}

/// Noise variance from the longest path point, floored to stay positive.
inline double cp_sigma2(const SelectionState& state, Index n) {
    const double nn = static_cast<double>(n);
    const double floor = 1e-12 * std::max(state.residual.squaredNorm(), 1e-300);
    if (state.iteration == 0) return std::max(state.residual.squaredNorm() / (nn - 1.0), floor);
    const double df = state.df_history.back();
    const double dof = std::max(nn - df, 1.0);
    return std::max(state.rss_history.back() / dof, std::max(floor, 1e-300));
}

namespace detail {

inline bool running_cd_drop(const std::vector<double>& cd, double frac) {
    double mx = -std::numeric_limits<double>::infinity();
    for (std::size_t k = 0; k + 1 < cd.size(); ++k)
        if (std::isfinite(cd[k])) mx = std::max(mx, cd[k]);
    const double last = cd.back();
    return std::isfinite(mx) && std::isfinite(last) && last < frac * mx;
}

inline SelectionState run_path(const FlarsProblem& prob, const std::vector<bool>& eligible, const FlarsOptions& opt,
                               int max_iter, bool stop_on_drop) {
    SelectionState state = initial_state(prob, eligible);
    while (!state.terminal && state.iteration < max_iter) {
        iterate(state, prob, opt);
        if (stop_on_drop && !state.cd_history.empty() && running_cd_drop(state.cd_history, opt.cd_threshold))
            break;
    }
    return state;
}

// Converts accumulated design-unit coefficients to original units.
inline FittedModel to_model(const FlarsProblem& prob, const CandidateSet& cands, const SelectionState& state,
                            const std::vector<std::size_t>& members) {
    FittedModel m;
    m.rep = prob.representation();
    m.intercept = prob.response_mean();
    std::vector<std::size_t> sorted = members;
    std::sort(sorted.begin(), sorted.end());
    for (std::size_t i : sorted) {
        const auto& c = prob.candidate(i);
        const Vector& acc = state.coef_accum[i];
        if (acc.size() == 0) continue;
        if (c.kind == MemberKind::Functional) {
            const Vector b = acc / c.scale;
            const auto& x = cands.functional[i].data.values;
            m.intercept -= (x.colwise().mean() * (m.rep->W * b))(0);
            m.functional.push_back({c.id, b});
        } else {
            const double g = acc(0) / c.scale;
            m.intercept -= g * stats::mean(cands.scalar[i - cands.functional.size()].values);
            m.scalar.push_back({c.id, g});
        }
    }
    return m;
}

} // namespace detail

/**
 * Least-squares fit restricted to `ids`: an fLARS path over those variables
 * only, run until every one has entered and the final OLS step is taken.
 */
inline FittedModel fit_fixed_effects(const Vector& y, const CandidateSet& cands, const std::vector<std::string>& ids,
                                     const FlarsOptions& opt) {
    require(!ids.empty(), "fit_fixed_effects: no variables");
    for (const auto& id : ids) require(cands.index_of(id).has_value(), "fit_fixed_effects: unknown id '" + id + "'");
    const CandidateSet sub = cands.subset(ids);
    const FlarsProblem prob(y, sub, opt.penalty);
    FlarsOptions o = opt;
    o.modification2 = false;
    std::vector<bool> eligible(prob.size(), true);
    const SelectionState st = detail::run_path(prob, eligible, o, static_cast<int>(prob.size()) + 1, false);
    std::vector<std::size_t> all(prob.size());
    for (std::size_t i = 0; i < all.size(); ++i) all[i] = i;
    return detail::to_model(prob, sub, st, all);
}

/**
 * Penalties fixed at the values selection would pick on y for the given
 * variables, so repeated fixed-effects fits share one smoother.
 */
inline PenaltyOptions pin_penalties(const Vector& y, const CandidateSet& cands, const std::vector<std::string>& ids,
                                    const PenaltyOptions& pen) {
    const FlarsProblem prob(y, cands.subset(ids), pen);
    PenaltyOptions out = pen;
    for (std::size_t i = 0; i < prob.size(); ++i) {
        const auto& c = prob.candidate(i);
        if (!c.usable) continue;
        if (c.kind == MemberKind::Functional) out.lambda1_pinned[c.id] = prob.lambda1_for(i, prob.response());
        out.lambda2_pinned[c.id] = c.lambda2;
    }
    return out;
}

/// Path trace with Cp filled in from sigma2.
inline std::vector<IterationRecord> path_trace(const SelectionState& state, const FlarsProblem& prob, double sigma2) {
    std::vector<IterationRecord> out;
    for (int k = 0; k < state.iteration; ++k) {
        IterationRecord rec;
        rec.iteration = k + 1;
        rec.selected_id = prob.candidate(state.entered[static_cast<std::size_t>(k)]).id;
        rec.alpha = state.distances[k];
        rec.rho_star = state.corr_history[k];
        rec.cd = state.cd_history[k];
        rec.df_star = state.df_history[k];
        rec.rss = state.rss_history[k];
        rec.cp = mallows_cp(rec.rss, rec.df_star, prob.n(), sigma2);
        out.push_back(rec);
    }
    return out;
}

/**
 * Whole algorithm: first selection, iterations, stopping, then a
 * least-squares refit on the variables selected at the stopping point.
 */
inline FlarsResult run_flars(const Vector& y, const CandidateSet& cands, const FlarsOptions& opt = {}) {
    opt.validate();
    cands.validate();
    const FlarsProblem prob(y, cands, opt.penalty);
    const int cap = static_cast<int>(prob.size()) + 1;
    const int max_iter = opt.max_iter > 0 ? std::min(opt.max_iter, cap) : cap;
    const bool stop_on_drop = opt.stop == StopRule::CdDrop && !opt.full_path;

    FlarsResult res;
    res.state = detail::run_path(prob, std::vector<bool>(prob.size(), true), opt, max_iter, stop_on_drop);
    const SelectionState& st = res.state;
    if (st.iteration == 0) throw NoSignalError("run_flars: the first direction explains nothing");

    auto& diag = res.diagnostics;
    diag.sigma2 = cp_sigma2(st, prob.n());
    res.trace = path_trace(st, prob, diag.sigma2);
    diag.cd_trace = Vector::Map(st.cd_history.data(), static_cast<Index>(st.cd_history.size()));
    diag.cp_trace.resize(static_cast<Index>(res.trace.size()));
    for (std::size_t k = 0; k < res.trace.size(); ++k) diag.cp_trace(static_cast<Index>(k)) = res.trace[k].cp;

    switch (opt.stop) {
    case StopRule::CdDrop: {
        diag.stop_index = stopping_cd(st.cd_history, opt.cd_threshold);
        const bool dropped = diag.stop_index < st.iteration ||
                             detail::running_cd_drop(st.cd_history, opt.cd_threshold);
        diag.stop_rule = dropped ? StopRule::CdDrop
                                 : (st.modification_one_applied ? StopRule::ModificationITerminal : StopRule::MaxIter);
        break;
    }
    case StopRule::CpMin: {
        Index best = 0;
        diag.cp_trace.minCoeff(&best);
        diag.stop_index = static_cast<int>(best) + 1;
        diag.stop_rule = StopRule::CpMin;
        break;
    }
    default:
        diag.stop_index = st.iteration;
        diag.stop_rule = st.modification_one_applied ? StopRule::ModificationITerminal : StopRule::MaxIter;
    }
    const std::size_t s = static_cast<std::size_t>(diag.stop_index - 1);
    diag.df_star = st.df_history[s];
    diag.cp = diag.cp_trace(static_cast<Index>(s));

    for (std::size_t i : st.active_after[s]) res.selected.push_back(prob.candidate(i).id);
    res.model = fit_fixed_effects(y, cands, res.selected, opt);
    return res;
}

} // namespace flars
