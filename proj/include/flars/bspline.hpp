#pragma once

#include "flars/common.hpp"

#include <vector>

namespace flars {

/// Clamped cubic B-spline basis with equally spaced knots on [lower, upper].
class CubicBSplineBasis {
public:
    static constexpr int degree = 3;

    CubicBSplineBasis(int n_basis, double lower, double upper)
        : n_basis_(n_basis), lower_(lower), upper_(upper) {
        require(n_basis >= degree + 1, "CubicBSplineBasis: n_basis must be at least 4");
        require(upper > lower, "CubicBSplineBasis: empty domain");
        const int n_interior = n_basis - degree - 1;
        knots_.reserve(n_basis + degree + 1);
        for (int i = 0; i <= degree; ++i) knots_.push_back(lower);
        for (int i = 1; i <= n_interior; ++i)
            knots_.push_back(lower + (upper - lower) * i / (n_interior + 1));
        for (int i = 0; i <= degree; ++i) knots_.push_back(upper);
    }

    int size() const { return n_basis_; }
    double lower() const { return lower_; }
    double upper() const { return upper_; }

    /// Basis values (deriv = 0), first (1) or second (2) derivatives at t.
    Vector evaluate(double t, int deriv = 0) const {
        require(deriv >= 0 && deriv <= 2, "CubicBSplineBasis: derivative order must be 0, 1 or 2");
        const int m = static_cast<int>(knots_.size());
        // table[k][i] = B_{i,k}(t)
        std::vector<std::vector<double>> table(degree + 1, std::vector<double>(m, 0.0));
        const int span = find_span(t);
        table[0][span] = 1.0;
        for (int k = 1; k <= degree; ++k) {
            for (int i = 0; i + k + 1 < m; ++i) {
                double v = 0.0;
                const double d1 = knots_[i + k] - knots_[i];
                const double d2 = knots_[i + k + 1] - knots_[i + 1];
                if (d1 > 0) v += (t - knots_[i]) / d1 * table[k - 1][i];
                if (d2 > 0) v += (knots_[i + k + 1] - t) / d2 * table[k - 1][i + 1];
                table[k][i] = v;
            }
        }
        Vector out(n_basis_);
        for (int i = 0; i < n_basis_; ++i) {
            if (deriv == 0) {
                out(i) = table[degree][i];
            } else if (deriv == 1) {
                out(i) = derivative(table[degree - 1], degree, i);
            } else {
                // d2 B_{i,3} = 3 (B'_{i,2} / (t_{i+3} - t_i) - B'_{i+1,2} / (t_{i+4} - t_{i+1}))
                double v = 0.0;
                const double d1 = knots_[i + 3] - knots_[i];
                const double d2 = knots_[i + 4] - knots_[i + 1];
                if (d1 > 0) v += derivative(table[1], 2, i) / d1;
                if (d2 > 0) v -= derivative(table[1], 2, i + 1) / d2;
                out(i) = 3.0 * v;
            }
        }
        return out;
    }

    /// Design matrix [points.size() x n_basis].
    Matrix design(const Vector& points, int deriv = 0) const {
        Matrix m(points.size(), n_basis_);
        for (Index r = 0; r < points.size(); ++r) m.row(r) = evaluate(points(r), deriv).transpose();
        return m;
    }

private:
    int find_span(double t) const {
        const int m = static_cast<int>(knots_.size());
        if (t >= upper_) {
            // last non-degenerate interval
            for (int i = m - 2; i >= 0; --i)
                if (knots_[i] < knots_[i + 1]) return i;
        }
        if (t <= lower_) return degree;
        for (int i = degree; i < m - 1; ++i)
            if (t >= knots_[i] && t < knots_[i + 1]) return i;
        return m - degree - 2;
    }

    // First derivative of B_{i,k} from the degree k-1 row.
    double derivative(const std::vector<double>& lower_row, int k, int i) const {
        double v = 0.0;
        const double d1 = knots_[i + k] - knots_[i];
        const double d2 = knots_[i + k + 1] - knots_[i + 1];
        if (d1 > 0) v += lower_row[i] / d1;
        if (d2 > 0) v -= lower_row[i + 1] / d2;
        return k * v;
    }

    int n_basis_;
    double lower_;
    double upper_;
    std::vector<double> knots_;
};

} // namespace flars
