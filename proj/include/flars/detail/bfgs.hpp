#pragma once

#include "flars/common.hpp"

#include <cmath>
#include <functional>
#include <limits>

namespace flars::detail {

struct BfgsOptions {
    int max_iter = 200;
    double grad_tol = 1e-6;
    double f_tol = 1e-12;
};

struct BfgsResult {
    Vector x;
    double f = std::numeric_limits<double>::infinity();
    int iterations = 0;
    bool converged = false;
};

/// Objective returning f(x) and writing the gradient; may return +inf or NaN.
using Objective = std::function<double(const Vector&, Vector&)>;

// Quasi-Newton minimization with inverse-Hessian BFGS updates and an Armijo
// backtracking line search. Non-finite trial values shrink the step.
inline BfgsResult bfgs_minimize(const Objective& fn, Vector x0, const BfgsOptions& opt = {}) {
    BfgsResult res;
    const Index d = x0.size();
    Vector g(d);
    double f = fn(x0, g);
    if (!std::isfinite(f) || !g.allFinite()) return res;
    Matrix Hinv = Matrix::Identity(d, d);
    Vector x = x0;

    for (int it = 0; it < opt.max_iter; ++it) {
        res.iterations = it + 1;
        if (g.lpNorm<Eigen::Infinity>() < opt.grad_tol * std::max(1.0, std::abs(f))) {
            res.converged = true;
            break;
        }
        Vector p = -Hinv * g;
        if (p.dot(g) >= 0) {
            Hinv.setIdentity();
            p = -g;
        }
        double step = 1.0;
        const double slope = p.dot(g);
        Vector xn(d), gn(d);
        double fn_val = std::numeric_limits<double>::infinity();
        bool accepted = false;
        for (int ls = 0; ls < 60; ++ls) {
            xn = x + step * p;
            fn_val = fn(xn, gn);
            if (std::isfinite(fn_val) && gn.allFinite() && fn_val <= f + 1e-4 * step * slope) {
                accepted = true;
                break;
            }
            step *= 0.5;
        }
        if (!accepted) {
            res.converged = g.lpNorm<Eigen::Infinity>() < 1e-3 * std::max(1.0, std::abs(f));
            break;
        }
        const Vector s = xn - x;
        const Vector yv = gn - g;
        const double sy = s.dot(yv);
        const double df = f - fn_val;
        x = xn;
        g = gn;
        f = fn_val;
        if (sy > 1e-12 * s.norm() * yv.norm()) {
            const double rho = 1.0 / sy;
            const Matrix I = Matrix::Identity(d, d);
            Hinv = (I - rho * s * yv.transpose()) * Hinv * (I - rho * yv * s.transpose()) + rho * s * s.transpose();
        }
        if (df >= 0 && df <= opt.f_tol * std::max(1.0, std::abs(f)) && s.norm() < 1e-10 * std::max(1.0, x.norm())) {
            res.converged = true;
            break;
        }
    }
    res.x = x;
    res.f = f;
    return res;
}

} // namespace flars::detail
