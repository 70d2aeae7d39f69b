#pragma once

#include "flars/common.hpp"

#include <cmath>
#include <numbers>
#include <utility>

namespace flars {

struct QuadratureRule {
    Vector nodes;   // ascending, in [-1, 1]
    Vector weights; // positive, sum to 2
};

namespace detail {

// Returns (P_Q(x), P_Q'(x)).
inline std::pair<double, double> legendre_with_derivative(int Q, double x) {
    double p0 = 1.0, p1 = x;
    for (int k = 2; k <= Q; ++k) {
        const double p2 = ((2.0 * k - 1.0) * x * p1 - (k - 1.0) * p0) / k;
        p0 = p1;
        p1 = p2;
    }
    return {p1, Q * (x * p1 - p0) / (x * x - 1.0)};
}

} // namespace detail

/**
 * Gauss-Legendre rule with Q points on [-1, 1].
 *
 * Nodes are the roots of P_Q, found by Newton iteration from the
 * Tricomi-style initial guess; weights are 2 / ((1 - x^2) P_Q'(x)^2).
 * The rule is exact for polynomials of degree <= 2Q - 1.
 */
inline QuadratureRule gauss_legendre_rule(int Q) {
    if (Q < 1 || Q > 64) throw InvalidArgument("gauss_legendre_rule: Q must lie in [1, 64]");
    QuadratureRule rule{Vector::Zero(Q), Vector::Zero(Q)};
    for (int i = 0; i < (Q + 1) / 2; ++i) {
        // i-th root counted from +1 downwards
        double x = std::cos(std::numbers::pi * (i + 0.75) / (Q + 0.5));
        for (int iter = 0; iter < 100; ++iter) {
            const auto [p, dp] = detail::legendre_with_derivative(Q, x);
            const double dx = p / dp;
            x -= dx;
            if (std::abs(dx) < 1e-16) break;
        }
        const double dp = detail::legendre_with_derivative(Q, x).second;
        const double w = 2.0 / ((1.0 - x * x) * dp * dp);
        rule.nodes(Q - 1 - i) = x;
        rule.nodes(i) = -x;
        rule.weights(Q - 1 - i) = w;
        rule.weights(i) = w;
    }
    if (Q % 2 == 1) rule.nodes(Q / 2) = 0.0;
    return rule;
}

} // namespace flars
