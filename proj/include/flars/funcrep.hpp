#pragma once

#include "flars/bspline.hpp"
#include "flars/common.hpp"
#include "flars/quadrature.hpp"

#include <string>
#include <vector>

namespace flars {

/**
 * Ordered sampling points of a functional variable.
 *
 * The integration domain defaults to [first point, last point] but can be
 * widened, e.g. when the points are cell midpoints of [0, 1].
 */
class TimeGrid {
public:
    TimeGrid() = default;

    explicit TimeGrid(Vector points)
        : TimeGrid(points, points.size() ? points(0) : 0.0,
                   points.size() ? points(points.size() - 1) : 0.0) {}

    TimeGrid(Vector points, double lower, double upper) : points_(std::move(points)), lower_(lower), upper_(upper) {
        require(points_.size() >= 3, "TimeGrid: at least 3 points are required");
        require(points_.allFinite(), "TimeGrid: non-finite time point");
        for (Index i = 1; i < points_.size(); ++i)
            require(points_(i) > points_(i - 1), "TimeGrid: points must be strictly increasing");
        require(lower_ <= points_(0) && upper_ >= points_(points_.size() - 1),
                "TimeGrid: domain must contain all points");
    }

    /// q equally spaced points including both ends.
    static TimeGrid uniform(Index q, double lower = 0.0, double upper = 1.0) {
        require(q >= 3, "TimeGrid: at least 3 points are required");
        return TimeGrid(Vector::LinSpaced(q, lower, upper), lower, upper);
    }

    /// Midpoints of q equal cells of [lower, upper].
    static TimeGrid midpoints(Index q, double lower = 0.0, double upper = 1.0) {
        require(q >= 3, "TimeGrid: at least 3 points are required");
        const double h = (upper - lower) / static_cast<double>(q);
        Vector pts(q);
        for (Index i = 0; i < q; ++i) pts(i) = lower + (static_cast<double>(i) + 0.5) * h;
        return TimeGrid(pts, lower, upper);
    }

    const Vector& points() const { return points_; }
    Index size() const { return points_.size(); }
    double lower() const { return lower_; }
    double upper() const { return upper_; }

    /// Index of the grid point closest to t; ties go to the lower index.
    Index closest(double t) const {
        Index best = 0;
        double best_d = std::abs(points_(0) - t);
        for (Index i = 1; i < points_.size(); ++i) {
            const double d = std::abs(points_(i) - t);
            if (d < best_d) {
                best_d = d;
                best = i;
            }
        }
        return best;
    }

private:
    Vector points_;
    double lower_ = 0.0;
    double upper_ = 0.0;
};

/// n curves sampled on a shared grid, one row per curve.
struct FunctionalSample {
    Matrix values;
    TimeGrid grid;

    FunctionalSample() = default;
    FunctionalSample(Matrix v, TimeGrid g) : values(std::move(v)), grid(std::move(g)) {
        require(values.cols() == grid.size(), "FunctionalSample: column count must equal grid length");
        require(values.allFinite(), "FunctionalSample: non-finite entries");
    }

    Index n() const { return values.rows(); }
    Index q() const { return values.cols(); }
};

enum class RepresentationKind { RDP, GQ, BF };

inline std::string to_string(RepresentationKind k) {
    switch (k) {
    case RepresentationKind::RDP: return "RDP";
    case RepresentationKind::GQ: return "GQ";
    case RepresentationKind::BF: return "BF";
    }
    return "?";
}

inline RepresentationKind representation_kind_from_string(const std::string& s) {
    if (s == "RDP" || s == "rdp") return RepresentationKind::RDP;
    if (s == "GQ" || s == "gq") return RepresentationKind::GQ;
    if (s == "BF" || s == "bf") return RepresentationKind::BF;
    throw InvalidArgument("unknown representation kind '" + s + "'");
}

struct RepresentationConfig {
    RepresentationKind kind = RepresentationKind::GQ;
    int quadrature_points = 18; // GQ
    int n_basis = 18;           // BF
};

/**
 * Weight matrices turning integrals into linear algebra.
 *
 *   int x(t) beta(t) dt       ~ X * W * coef
 *   int beta''(t)^2 dt        ~ coef' * W2 * coef
 *   int beta(t)^2 dt          ~ coef' * ridge * coef
 *
 * W is [q x dim]; W2 and ridge are [dim x dim].
 */
struct Representation {
    RepresentationKind kind = RepresentationKind::RDP;
    Matrix W;
    Matrix W2;
    Matrix W2_root; // W2 = W2_root' W2_root
    Matrix ridge;
    Index dim = 0;
    TimeGrid grid;
    RepresentationConfig config;
    /// Time locations attached to each coefficient (RDP: grid, GQ: mapped
    /// abscissae, BF: empty since coefficients weight basis functions).
    Vector coef_times;
    /// Grid row carrying each GQ abscissa.
    std::vector<Index> gq_rows;
};

/// Three-point second-difference operator on a possibly uneven grid.
struct DiffMatrix {
    Matrix L; // (q-2) x q
    TimeGrid grid;
};

inline DiffMatrix uneven_diff_matrix(const TimeGrid& grid) {
    const Vector& t = grid.points();
    const Index q = t.size();
    require(q >= 3, "uneven_diff_matrix: at least 3 points are required");
    DiffMatrix d{Matrix::Zero(q - 2, q), grid};
    for (Index j = 1; j + 1 < q; ++j) {
        const double hm = t(j) - t(j - 1);
        const double hp = t(j + 1) - t(j);
        require(hm > 0 && hp > 0, "uneven_diff_matrix: grid must be strictly increasing");
        const double span = t(j + 1) - t(j - 1);
        d.L(j - 1, j - 1) = 2.0 / (hm * span);
        d.L(j - 1, j) = -2.0 / (hp * hm);
        d.L(j - 1, j + 1) = 2.0 / (hp * span);
    }
    return d;
}

namespace detail {

inline Matrix uneven_diff_from_points(const Vector& pts) {
    return uneven_diff_matrix(TimeGrid(pts)).L;
}

} // namespace detail

/**
 * Builds W, W2 and the ridge matrix for one representation backend.
 *
 * RDP: W = I/q, W2 = L' (I/q) L with L the second-difference operator on
 *      the grid (true spacing).
 * GQ:  Gauss-Legendre abscissae mapped onto the grid domain; column k of W
 *      holds the mapped weight at the grid row closest to abscissa k.
 *      W2 = L' diag(w) L on the abscissa locations.
 * BF:  cubic B-splines with equally spaced knots; W = Phi/q,
 *      W2 = Phi''' Phi'' / q.
 */
inline Representation build_representation(const RepresentationConfig& cfg, const TimeGrid& grid) {
    const Index q = grid.size();
    require(q >= 3, "build_representation: degenerate grid");
    Representation rep;
    rep.kind = cfg.kind;
    rep.grid = grid;
    rep.config = cfg;

    switch (cfg.kind) {
    case RepresentationKind::RDP: {
        const double w = 1.0 / static_cast<double>(q);
        rep.dim = q;
        rep.W = Matrix::Identity(q, q) * w;
        const Matrix L = uneven_diff_matrix(grid).L;
        rep.W2_root = L * std::sqrt(w);
        rep.ridge = Matrix::Identity(q, q) * w;
        rep.coef_times = grid.points();
        break;
    }
    case RepresentationKind::GQ: {
        const int Q = cfg.quadrature_points;
        require(Q >= 1 && Q <= q, "build_representation: GQ needs 1 <= Q <= q");
        const QuadratureRule rule = gauss_legendre_rule(Q);
        const double half = 0.5 * (grid.upper() - grid.lower());
        const double mid = 0.5 * (grid.upper() + grid.lower());
        const Vector times = (rule.nodes.array() * half + mid).matrix();
        const Vector weights = rule.weights * half;
        rep.dim = Q;
        rep.W = Matrix::Zero(q, Q);
        rep.gq_rows.resize(Q);
        for (int k = 0; k < Q; ++k) {
            const Index row = grid.closest(times(k));
            rep.gq_rows[k] = row;
            rep.W(row, k) = weights(k);
        }
        if (Q >= 3) {
            const Matrix L = detail::uneven_diff_from_points(times);
            const Vector interior = weights.segment(1, Q - 2);
            rep.W2_root = interior.cwiseSqrt().asDiagonal() * L;
        } else {
            rep.W2_root = Matrix::Zero(1, Q);
        }
        rep.ridge = weights.asDiagonal();
        rep.coef_times = times;
        break;
    }
    case RepresentationKind::BF: {
        const int nb = cfg.n_basis;
        require(nb >= 4 && nb <= q, "build_representation: BF needs 4 <= n_basis <= q");
        const CubicBSplineBasis basis(nb, grid.lower(), grid.upper());
        const Matrix phi = basis.design(grid.points());
        const Matrix phi2 = basis.design(grid.points(), 2);
        const double w = 1.0 / static_cast<double>(q);
        rep.dim = nb;
        rep.W = phi * w;
        rep.W2_root = phi2 * std::sqrt(w);
        rep.ridge = phi.transpose() * phi * w;
        break;
    }
    }
    rep.W2 = rep.W2_root.transpose() * rep.W2_root;
    // exact symmetry
    rep.W2 = 0.5 * (rep.W2 + rep.W2.transpose());
    rep.ridge = 0.5 * (rep.ridge + rep.ridge.transpose());
    return rep;
}

inline Representation build_representation(RepresentationKind kind, const TimeGrid& grid, int size_param = 18) {
    RepresentationConfig cfg;
    cfg.kind = kind;
    cfg.quadrature_points = size_param;
    cfg.n_basis = size_param;
    return build_representation(cfg, grid);
}

/// X * W * coef for every curve.
inline Vector project(const FunctionalSample& x, const Representation& rep, const Vector& coef) {
    require(coef.size() == rep.dim, "project: coefficient length must equal representation dim");
    require(x.q() == rep.W.rows(), "project: curve length does not match representation grid");
    return x.values * (rep.W * coef);
}

/// coef' * W2 * coef, evaluated through the root to avoid cancellation.
inline double roughness(const Representation& rep, const Vector& coef) {
    require(coef.size() == rep.dim, "roughness: coefficient length must equal representation dim");
    return (rep.W2_root * coef).squaredNorm();
}

/**
 * Coefficient vector representing a known function beta(t).
 * RDP and GQ sample beta at the coefficient locations; BF fits basis
 * coefficients by least squares on the grid.
 */
template <typename F>
Vector represent_function(const Representation& rep, F&& beta) {
    if (rep.kind == RepresentationKind::BF) {
        const Vector& t = rep.grid.points();
        Vector values(t.size());
        for (Index i = 0; i < t.size(); ++i) values(i) = beta(t(i));
        const Matrix phi = rep.W * static_cast<double>(rep.grid.size());
        return phi.colPivHouseholderQr().solve(values);
    }
    Vector c(rep.dim);
    for (Index i = 0; i < rep.dim; ++i) c(i) = beta(rep.coef_times(i));
    return c;
}

/// Values of the coefficient function on the representation's grid.
inline Vector coefficient_curve(const Representation& rep, const Vector& coef) {
    require(coef.size() == rep.dim, "coefficient_curve: coefficient length must equal representation dim");
    switch (rep.kind) {
    case RepresentationKind::RDP: return coef;
    case RepresentationKind::BF: return rep.W * coef * static_cast<double>(rep.grid.size());
    case RepresentationKind::GQ: {
        // piecewise-linear through the abscissa values, flat beyond the ends
        const Vector& t = rep.grid.points();
        Vector out(t.size());
        for (Index i = 0; i < t.size(); ++i) {
            const double s = t(i);
            if (s <= rep.coef_times(0)) {
                out(i) = coef(0);
            } else if (s >= rep.coef_times(rep.dim - 1)) {
                out(i) = coef(rep.dim - 1);
            } else {
                Index k = 0;
                while (rep.coef_times(k + 1) < s) ++k;
                const double a = (s - rep.coef_times(k)) / (rep.coef_times(k + 1) - rep.coef_times(k));
                out(i) = (1 - a) * coef(k) + a * coef(k + 1);
            }
        }
        return out;
    }
    }
    return coef;
}

} // namespace flars
