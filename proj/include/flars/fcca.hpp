#pragma once

#include "flars/common.hpp"
#include "flars/funcrep.hpp"

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <numeric>
#include <optional>
#include <random>
#include <string>
#include <vector>

namespace flars {

enum class MemberKind { Scalar, Functional };

/**
 * One variable of a group, already expressed in coefficient space.
 *
 * design is the n x d matrix mapping coefficients to projections (X W for a
 * functional member, the column z for a scalar). roughness and ridge are the
 * d x d penalty operators weighted by lambda1 and lambda2 respectively.
 */
struct GroupMember {
    std::string id;
    MemberKind kind = MemberKind::Scalar;
    Matrix design;
    Matrix roughness;
    Matrix ridge;

    Index dim() const { return design.cols(); }
    Index n() const { return design.rows(); }
};

inline GroupMember scalar_member(std::string id, const Vector& z) {
    require(z.allFinite(), "scalar member '" + id + "' has non-finite values");
    GroupMember m;
    m.id = std::move(id);
    m.kind = MemberKind::Scalar;
    m.design = z;
    m.roughness = Matrix::Zero(1, 1);
    m.ridge = Matrix::Identity(1, 1);
    return m;
}

inline GroupMember functional_member(std::string id, const FunctionalSample& x, const Representation& rep) {
    require(x.q() == rep.W.rows(), "functional member '" + id + "' does not match the representation grid");
    GroupMember m;
    m.id = std::move(id);
    m.kind = MemberKind::Functional;
    m.design = x.values * rep.W;
    m.roughness = rep.W2;
    m.ridge = rep.ridge;
    return m;
}

struct VariableGroup {
    std::vector<GroupMember> members;

    VariableGroup() = default;
    explicit VariableGroup(std::vector<GroupMember> m) : members(std::move(m)) { validate(); }

    void validate() const {
        require(!members.empty(), "VariableGroup: group must not be empty");
        const Index n = members.front().n();
        for (std::size_t i = 0; i < members.size(); ++i) {
            require(members[i].n() == n, "VariableGroup: members differ in sample count");
            for (std::size_t j = i + 1; j < members.size(); ++j)
                require(members[i].id != members[j].id, "VariableGroup: duplicate id '" + members[i].id + "'");
        }
    }

    Index n() const { return members.empty() ? 0 : members.front().n(); }

    Index total_dim() const {
        Index d = 0;
        for (const auto& m : members) d += m.dim();
        return d;
    }

    bool has_functional() const {
        return std::any_of(members.begin(), members.end(),
                           [](const GroupMember& m) { return m.kind == MemberKind::Functional; });
    }

    /// Column offset of each member in the stacked coefficient vector.
    std::vector<Index> offsets() const {
        std::vector<Index> off;
        Index o = 0;
        for (const auto& m : members) {
            off.push_back(o);
            o += m.dim();
        }
        return off;
    }

    Matrix design() const {
        Matrix d(n(), total_dim());
        Index o = 0;
        for (const auto& m : members) {
            d.middleCols(o, m.dim()) = m.design;
            o += m.dim();
        }
        return d;
    }

    Matrix roughness() const { return block_diagonal(&GroupMember::roughness); }
    Matrix ridge() const { return block_diagonal(&GroupMember::ridge); }

private:
    Matrix block_diagonal(Matrix GroupMember::*field) const {
        const Index d = total_dim();
        Matrix out = Matrix::Zero(d, d);
        Index o = 0;
        for (const auto& m : members) {
            out.block(o, o, m.dim(), m.dim()) = m.*field;
            o += m.dim();
        }
        return out;
    }
};

struct PenaltyConfig {
    double lambda1 = 0.0;
    double lambda2 = 0.0;

    void validate() const {
        require(std::isfinite(lambda1) && lambda1 >= 0.0, "PenaltyConfig: lambda1 must be finite and >= 0");
        require(std::isfinite(lambda2) && lambda2 >= 0.0, "PenaltyConfig: lambda2 must be finite and >= 0");
    }
};

/**
 * Symmetric solver for P = X'X + Pen.
 *
 * Cholesky first; when it fails or its pivots indicate near-singularity the
 * pivoted LDL' factorization decides. Matrices whose estimated condition
 * number exceeds singular_limit are rejected.
 */
class PenalizedSolver {
public:
    static constexpr double singular_limit = 1e14;

    explicit PenalizedSolver(const Matrix& P) : dim_(P.rows()) {
        if (dim_ == 0) throw SingularMatrixError("PenalizedSolver: empty matrix");
        llt_.compute(P);
        if (llt_.info() == Eigen::Success) {
            const Vector d = llt_.matrixLLT().diagonal();
            const double mx = d.maxCoeff();
            const double mn = d.minCoeff();
            if (mn > 0 && (mx / mn) * (mx / mn) < 1e8) {
                use_llt_ = true;
                condition_ = (mx / mn) * (mx / mn);
                return;
            }
        }
        ldlt_.compute(P);
        if (ldlt_.info() != Eigen::Success)
            throw SingularMatrixError("penalized cross-product could not be factorized; increase lambda2");
        const Vector d = ldlt_.vectorD();
        const double mx = d.cwiseAbs().maxCoeff();
        const double mn = d.minCoeff();
        if (!(mx > 0) || !(mn > 0) || mx / mn > singular_limit)
            throw SingularMatrixError("penalized cross-product is singular; use lambda2 > 0");
        condition_ = mx / mn;
    }

    template <typename Rhs>
    Matrix solve(const Rhs& b) const {
        return use_llt_ ? Matrix(llt_.solve(b)) : Matrix(ldlt_.solve(b));
    }

    Vector solve_vec(const Vector& b) const {
        return use_llt_ ? Vector(llt_.solve(b)) : Vector(ldlt_.solve(b));
    }

    /// Pivot-ratio estimate of the 2-norm condition number.
    double condition_estimate() const { return condition_; }
    Index dim() const { return dim_; }

private:
    Index dim_;
    bool use_llt_ = false;
    double condition_ = 1.0;
    Eigen::LLT<Matrix> llt_;
    Eigen::LDLT<Matrix> ldlt_;
};

inline Matrix penalty_matrix(const VariableGroup& group, const PenaltyConfig& pen) {
    return pen.lambda1 * group.roughness() + pen.lambda2 * group.ridge();
}

/// Block matrix of W'x_i'x_j W, W'x_i'z, z'z with the penalty on diagonal blocks.
inline Matrix penalized_crossprod(const VariableGroup& group, const PenaltyConfig& pen) {
    group.validate();
    pen.validate();
    const Matrix D = group.design();
    Matrix P = D.transpose() * D + penalty_matrix(group, pen);
    return 0.5 * (P + P.transpose());
}

struct CcaResult {
    double rho = 0.0;
    std::vector<Vector> coef_blocks;
    double alpha_scale = 0.0;
    Matrix pxx;

    Vector stacked() const {
        Index d = 0;
        for (const auto& b : coef_blocks) d += b.size();
        Vector out(d);
        Index o = 0;
        for (const auto& b : coef_blocks) {
            out.segment(o, b.size()) = b;
            o += b.size();
        }
        return out;
    }
};

namespace detail {

inline Vector centered_response(const Vector& y, const char* who) {
    const Vector yc = stats::centered(y);
    const double scale = y.cwiseAbs().maxCoeff();
    if (!(yc.norm() > 1e-14 * std::max(scale, 1e-300) * std::sqrt(static_cast<double>(y.size()))))
        throw DegenerateResponseError(std::string(who) + ": response has zero variance");
    return yc;
}

/**
 * Penalized projection of a response onto a centered group design.
 * Holds the factorized P and exposes the smoother quantities used by
 * fCCA, GCV and the step-distance equations.
 */
class GroupSmoother {
public:
    GroupSmoother(Matrix centered_design, Matrix gram, const Matrix& penalty)
        : design_(std::move(centered_design)), gram_(std::move(gram)), solver_(symmetrized(gram_ + penalty)) {}

    const Matrix& design() const { return design_; }
    const Matrix& gram() const { return gram_; }
    const PenalizedSolver& solver() const { return solver_; }

    /// P^{-1} D' v
    Vector coefficients(const Vector& v) const { return solver_.solve_vec(design_.transpose() * v); }

    /// a' S b with S = D P^{-1} D'
    double quad(const Vector& a, const Vector& b) const {
        return (design_.transpose() * a).dot(solver_.solve_vec(design_.transpose() * b));
    }

    Matrix hat() const { return design_ * solver_.solve(design_.transpose()); }

    /// tr(S) = tr(P^{-1} G)
    double trace() const {
        ensure_pinv_gram();
        return pinv_gram_.trace();
    }

    /// ||S||_F = sqrt(tr(P^{-1} G P^{-1} G))
    double frobenius() const {
        ensure_pinv_gram();
        return std::sqrt(std::max(0.0, pinv_gram_.cwiseProduct(pinv_gram_.transpose()).sum()));
    }

private:
    static Matrix symmetrized(const Matrix& m) { return 0.5 * (m + m.transpose()); }

    void ensure_pinv_gram() const {
        if (!has_pinv_gram_) {
            pinv_gram_ = solver_.solve(gram_);
            has_pinv_gram_ = true;
        }
    }

    Matrix design_;
    Matrix gram_;
    PenalizedSolver solver_;
    mutable bool has_pinv_gram_ = false;
    mutable Matrix pinv_gram_;
};

inline GroupSmoother make_smoother(const VariableGroup& group, const PenaltyConfig& pen) {
    Matrix d = stats::centered_columns(group.design());
    Matrix g = d.transpose() * d;
    return GroupSmoother(std::move(d), std::move(g), penalty_matrix(group, pen));
}

} // namespace detail

/**
 * Penalized canonical correlation between a scalar response and a group.
 *
 *   rho^2 = V' P^{-1} V / V_y,    coef = P^{-1} V / (rho ||y||)
 *
 * with V = D'y, V_y = y'y and D the centered group design. rho is reported
 * nonnegative; the sign lives in the coefficients.
 */
inline CcaResult cca_scalar_group(const Vector& y, const VariableGroup& group, const PenaltyConfig& pen) {
    group.validate();
    pen.validate();
    require(y.size() == group.n(), "cca_scalar_group: response length differs from group sample count");
    const Vector yc = detail::centered_response(y, "cca_scalar_group");
    const detail::GroupSmoother sm = detail::make_smoother(group, pen);
    const Vector V = sm.design().transpose() * yc;
    const Vector b = sm.solver().solve_vec(V);
    const double vy = yc.squaredNorm();
    const double rho2 = std::clamp(V.dot(b) / vy, 0.0, 1.0);

    CcaResult res;
    res.rho = std::sqrt(rho2);
    res.alpha_scale = 1.0 / stats::sd(y);
    res.pxx = sm.gram() + penalty_matrix(group, pen);
    const Vector coef = res.rho > 0 ? Vector(b / (res.rho * std::sqrt(vy))) : Vector(Vector::Zero(b.size()));
    const auto off = group.offsets();
    for (std::size_t i = 0; i < group.members.size(); ++i)
        res.coef_blocks.push_back(coef.segment(off[i], group.members[i].dim()));
    return res;
}

/// Correlation functional evaluated at arbitrary coefficients (penalized denominator).
inline double cca_objective(const Vector& y, const VariableGroup& group, const PenaltyConfig& pen,
                            const Vector& coef) {
    const Vector yc = stats::centered(y);
    const Matrix D = stats::centered_columns(group.design());
    const Matrix P = D.transpose() * D + penalty_matrix(group, pen);
    const double num = coef.dot(D.transpose() * yc);
    const double den = std::sqrt(coef.dot(P * coef) * yc.squaredNorm());
    return den > 0 ? num / den : 0.0;
}

/// Ten log-spaced multipliers in [1e-8, 1e2].
inline std::vector<double> default_relative_lambda1_grid() {
    std::vector<double> g(10);
    for (int i = 0; i < 10; ++i) g[i] = std::pow(10.0, -8.0 + 10.0 * i / 9.0);
    return g;
}

/// {1e-6, ..., 1e-1}
inline std::vector<double> default_relative_lambda2_grid() {
    return {1e-6, 1e-5, 1e-4, 1e-3, 1e-2, 1e-1};
}

/// ||G||_F / ||W2||_F for the centered group; 0 when the group has no roughness.
inline double lambda1_scale(const VariableGroup& group) {
    const Matrix D = stats::centered_columns(group.design());
    const double rn = group.roughness().norm();
    if (rn == 0.0) return 0.0;
    return (D.transpose() * D).norm() / rn;
}

/// Mean diagonal of the centered gram matrix.
inline double lambda2_scale(const VariableGroup& group) {
    const Matrix D = stats::centered_columns(group.design());
    return D.colwise().squaredNorm().sum() / static_cast<double>(std::max<Index>(1, D.cols()));
}

inline std::vector<double> scaled_grid(const std::vector<double>& relative, double scale) {
    std::vector<double> out;
    out.reserve(relative.size());
    for (double r : relative) out.push_back(r * scale);
    return out;
}

/// GCV(lambda1) = n RSS / (n - tr H)^2 for each grid value; NaN where undefined.
inline std::vector<double> gcv_curve(const Vector& y, const VariableGroup& group, const std::vector<double>& grid,
                                     double lambda2 = 0.0) {
    group.validate();
    require(y.size() == group.n(), "gcv_curve: response length differs from group sample count");
    const Vector yc = stats::centered(y);
    const double n = static_cast<double>(y.size());
    Matrix D = stats::centered_columns(group.design());
    const Matrix G = D.transpose() * D;
    const Matrix R2 = group.roughness();
    const Matrix Rr = group.ridge();
    const Vector Dty = D.transpose() * yc;
    std::vector<double> out;
    out.reserve(grid.size());
    for (double l1 : grid) {
        require(std::isfinite(l1) && l1 >= 0.0, "gcv_curve: grid values must be finite and >= 0");
        try {
            const detail::GroupSmoother sm(D, G, l1 * R2 + lambda2 * Rr);
            const Vector b = sm.solver().solve_vec(Dty);
            const double rss = (yc - D * b).squaredNorm();
            const double tr = sm.trace();
            out.push_back(n - tr > 1e-9 ? n * rss / ((n - tr) * (n - tr)) : std::numeric_limits<double>::quiet_NaN());
        } catch (const SingularMatrixError&) {
            out.push_back(std::numeric_limits<double>::quiet_NaN());
        }
    }
    return out;
}

/// Grid value minimizing GCV; ties go to the larger lambda1.
inline double select_lambda1_gcv(const Vector& y, const VariableGroup& group, const std::vector<double>& grid,
                                 double lambda2 = 0.0) {
    require(!grid.empty(), "select_lambda1_gcv: empty grid");
    const std::vector<double> curve = gcv_curve(y, group, grid, lambda2);
    std::optional<std::size_t> best;
    for (std::size_t i = 0; i < grid.size(); ++i) {
        if (!std::isfinite(curve[i])) continue;
        if (!best) {
            best = i;
            continue;
        }
        const double b = curve[*best];
        const bool tie = std::abs(curve[i] - b) <= 1e-12 * std::abs(b);
        if (curve[i] < b || (tie && grid[i] > grid[*best])) best = i;
    }
    if (!best) throw IllPosedError("select_lambda1_gcv: every grid value leaves no residual degrees of freedom");
    return grid[*best];
}

/// Mean held-out squared error of the penalized projection for each lambda2.
inline std::vector<double> lambda2_cv_curve(const Vector& y, const VariableGroup& group,
                                            const std::vector<double>& grid, int folds, double lambda1 = 0.0,
                                            std::uint64_t seed = 0) {
    group.validate();
    const Index n = y.size();
    require(n == group.n(), "lambda2_cv_curve: response length differs from group sample count");
    require(folds >= 2, "lambda2_cv_curve: at least 2 folds are required");
    require(n >= folds, "lambda2_cv_curve: fewer samples than folds");

    std::vector<Index> perm(static_cast<std::size_t>(n));
    std::iota(perm.begin(), perm.end(), Index{0});
    std::mt19937_64 rng(seed);
    std::shuffle(perm.begin(), perm.end(), rng);
    std::vector<int> fold_of(static_cast<std::size_t>(n));
    for (Index i = 0; i < n; ++i) fold_of[static_cast<std::size_t>(perm[static_cast<std::size_t>(i)])] = static_cast<int>(i % folds);

    const Matrix D = group.design();
    const Matrix R2 = group.roughness();
    const Matrix Rr = group.ridge();
    std::vector<double> out;
    for (double l2 : grid) {
        require(std::isfinite(l2) && l2 >= 0.0, "lambda2_cv_curve: grid values must be finite and >= 0");
        double sse = 0.0;
        bool ok = true;
        for (int f = 0; f < folds && ok; ++f) {
            std::vector<Index> tr, te;
            for (Index i = 0; i < n; ++i) (fold_of[static_cast<std::size_t>(i)] == f ? te : tr).push_back(i);
            const Matrix Dtr = D(tr, Eigen::all);
            const Vector ytr = y(tr);
            const Eigen::RowVectorXd dmean = Dtr.colwise().mean();
            const double ymean = ytr.mean();
            const Matrix Dc = Dtr.rowwise() - dmean;
            try {
                const detail::GroupSmoother sm(Dc, Dc.transpose() * Dc, lambda1 * R2 + l2 * Rr);
                const Vector b = sm.coefficients((ytr.array() - ymean).matrix());
                const Matrix Dte = D(te, Eigen::all).rowwise() - dmean;
                const Vector pred = (Dte * b).array() + ymean;
                sse += (y(te) - pred).squaredNorm();
            } catch (const SingularMatrixError&) {
                ok = false;
            }
        }
        out.push_back(ok ? sse / static_cast<double>(n) : std::numeric_limits<double>::infinity());
    }
    return out;
}

/// Grid value with the smallest cross-validated error; ties go to the larger lambda2.
inline double select_lambda2_cv(const Vector& y, const VariableGroup& group, const std::vector<double>& grid,
                                int folds, double lambda1 = 0.0, std::uint64_t seed = 0) {
    require(!grid.empty(), "select_lambda2_cv: empty grid");
    const std::vector<double> curve = lambda2_cv_curve(y, group, grid, folds, lambda1, seed);
    std::optional<std::size_t> best;
    for (std::size_t i = 0; i < grid.size(); ++i) {
        if (!std::isfinite(curve[i])) continue;
        if (!best || curve[i] < curve[*best] || (curve[i] == curve[*best] && grid[i] > grid[*best])) best = i;
    }
    if (!best) throw IllPosedError("select_lambda2_cv: every grid value gives a singular system");
    return grid[*best];
}

/**
 * Single-member smoother with a cached simultaneous diagonalization.
 *
 * With G' = D'D + lambda2 R and B = G' + s W2, solving G' v = mu B v gives
 * V' P(lambda1) V = diag(mu + lambda1 (1 - mu) / s), so every quantity the
 * step equations and GCV need costs O(n d) or O(d^2) per lambda1.
 */
class SpectralSmoother {
public:
    static constexpr double singular_ratio = 1e-14;

    SpectralSmoother(const Matrix& centered_design, const Matrix& roughness, const Matrix& ridge, double lambda2)
        : lambda2_(lambda2) {
        require(roughness.rows() == centered_design.cols() && ridge.rows() == centered_design.cols(),
                "SpectralSmoother: penalty dimensions differ from design");
        const Matrix G = centered_design.transpose() * centered_design;
        Matrix Gp = G + lambda2 * ridge;
        Gp = 0.5 * (Gp + Gp.transpose());
        const double rn = roughness.norm();
        scale_ = rn > 0 ? Gp.norm() / rn : 1.0;
        if (!(scale_ > 0)) scale_ = 1.0;
        Matrix B = Gp + scale_ * roughness;
        B = 0.5 * (B + B.transpose());
        Eigen::GeneralizedSelfAdjointEigenSolver<Matrix> es(Gp, B);
        if (es.info() != Eigen::Success || !es.eigenvectors().allFinite())
            throw SingularMatrixError("SpectralSmoother: roughness does not regularize the design; use lambda2 > 0");
        mu_ = es.eigenvalues().cwiseMax(0.0).cwiseMin(1.0);
        E_ = centered_design * es.eigenvectors();
        M_ = E_.transpose() * E_;
        has_roughness_ = rn > 0;
    }

    double lambda2() const { return lambda2_; }
    double lambda1_scale() const { return scale_; }
    Index dim() const { return mu_.size(); }

    /// E' a, the coordinates every quadratic form is built from.
    Vector coordinates(const Vector& a) const { return E_.transpose() * a; }

    Vector denominators(double lambda1) const {
        return (mu_.array() + (lambda1 / scale_) * (1.0 - mu_.array())).matrix();
    }

    bool singular(double lambda1) const {
        const Vector d = denominators(lambda1);
        const double mx = d.maxCoeff();
        return !(mx > 0) || d.minCoeff() <= singular_ratio * mx;
    }

    /// a' S b from coordinates of a and b.
    double quad(double lambda1, const Vector& ca, const Vector& cb) const {
        return (ca.array() * cb.array() / denominators(lambda1).array()).sum();
    }

    double trace(double lambda1) const {
        return (M_.diagonal().array() / denominators(lambda1).array()).sum();
    }

    double frobenius(double lambda1) const {
        const Vector inv = denominators(lambda1).cwiseInverse();
        const Matrix scaled = inv.asDiagonal() * M_ * inv.asDiagonal();
        return std::sqrt(std::max(0.0, scaled.cwiseProduct(M_).sum()));
    }

    /// n RSS / (n - tr S)^2 for a centered response; NaN when undefined.
    double gcv(double lambda1, const Vector& yc, const Vector& cy) const {
        const double n = static_cast<double>(yc.size());
        if (singular(lambda1)) return std::numeric_limits<double>::quiet_NaN();
        const Vector b = (cy.array() / denominators(lambda1).array()).matrix();
        const double rss = std::max(0.0, yc.squaredNorm() - 2.0 * cy.dot(b) + b.dot(M_ * b));
        const double tr = trace(lambda1);
        if (!(n - tr > 1e-9)) return std::numeric_limits<double>::quiet_NaN();
        return n * rss / ((n - tr) * (n - tr));
    }

    /// GCV minimizer over an absolute grid; ties go to the larger lambda1.
    std::optional<double> select_lambda1(const std::vector<double>& grid, const Vector& yc) const {
        if (!has_roughness_) return grid.empty() ? std::nullopt : std::optional<double>(0.0);
        const Vector cy = coordinates(yc);
        std::optional<std::size_t> best;
        double best_v = 0.0;
        for (std::size_t i = 0; i < grid.size(); ++i) {
            const double v = gcv(grid[i], yc, cy);
            if (!std::isfinite(v)) continue;
            const bool tie = best && std::abs(v - best_v) <= 1e-12 * std::abs(best_v);
            if (!best || v < best_v || (tie && grid[i] > grid[*best])) {
                best = i;
                best_v = v;
            }
        }
        if (!best) return std::nullopt;
        return grid[*best];
    }

private:
    double lambda2_;
    double scale_ = 1.0;
    bool has_roughness_ = true;
    Vector mu_;
    Matrix E_;
    Matrix M_;
};

} // namespace flars
