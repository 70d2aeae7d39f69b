#include "flars/detail/bfgs.hpp"
#include "flars/gpmix.hpp"
#include "oracles.hpp"

#include <gtest/gtest.h>

using namespace flars;
using namespace flars::gp;

namespace {

Kernel make_kernel(double v1, Vector w, double sigma) {
    Kernel k;
    k.v1 = v1;
    k.w = std::move(w);
    k.sigma = sigma;
    return k;
}

Vector one(double x) { return Vector::Constant(1, x); }

// A draw from the GP prior (signal plus noise) at the rows of phi.
Vector gp_draw(const Matrix& phi, const Kernel& k, std::mt19937_64& rng) {
    const Matrix C = oracle::se_matrix(phi, phi, k.v1, k.w) +
                     (k.sigma * k.sigma + 1e-10) * Matrix::Identity(phi.rows(), phi.rows());
    const Matrix L = C.llt().matrixL();
    return L * oracle::random_vector(phi.rows(), rng);
}

double median(std::vector<double> v) {
    std::sort(v.begin(), v.end());
    const std::size_t m = v.size() / 2;
    return v.size() % 2 ? v[m] : 0.5 * (v[m - 1] + v[m]);
}

CandidateSet scalars(const Matrix& Z) {
    CandidateSet c;
    for (Index j = 0; j < Z.cols(); ++j) c.scalar.push_back({"z" + std::to_string(j + 1), Z.col(j)});
    return c;
}

} // namespace

TEST(Bfgs, Rosenbrock) {
    const flars::detail::Objective f = [](const Vector& x, Vector& g) {
        g.resize(2);
        g(0) = -2 * (1 - x(0)) - 400 * x(0) * (x(1) - x(0) * x(0));
        g(1) = 200 * (x(1) - x(0) * x(0));
        return std::pow(1 - x(0), 2) + 100 * std::pow(x(1) - x(0) * x(0), 2);
    };
    Vector x0(2);
    x0 << -1.2, 1.0;
    flars::detail::BfgsOptions o;
    o.max_iter = 500;
    const auto r = flars::detail::bfgs_minimize(f, x0, o);
    EXPECT_NEAR(r.x(0), 1.0, 1e-4);
    EXPECT_NEAR(r.x(1), 1.0, 1e-4);
}

TEST(KernelMatrix, SinglePointIsSignalVariance) {
    const Kernel k = make_kernel(2.5, one(3.0), 0.1);
    const Matrix p = Matrix::Constant(1, 1, 0.7);
    EXPECT_DOUBLE_EQ(kernel_matrix(p, p, k, false)(0, 0), 2.5);
    EXPECT_DOUBLE_EQ(kernel_matrix(p, p, k, true)(0, 0), 2.5 + 0.01);
}

TEST(KernelMatrix, FarApartIsZero) {
    const Kernel k = make_kernel(1.0, one(1.0), 0.1);
    Matrix a(1, 1), b(1, 1);
    a << 0.0;
    b << 100.0;
    EXPECT_LT(kernel_matrix(a, b, k, true)(0, 0), 1e-300);
}

TEST(KernelMatrix, HandComputedThreePoints) {
    const Kernel k = make_kernel(1.0, one(2.0), 0.1);
    Matrix p(3, 1);
    p << 0.0, 0.5, 1.0;
    const Matrix K = kernel_matrix(p, p, k, true);
    const double a = std::exp(-0.25), b = std::exp(-1.0);
    Matrix expect(3, 3);
    expect << 1.01, a, b, a, 1.01, a, b, a, 1.01;
    EXPECT_LT((K - expect).cwiseAbs().maxCoeff(), 1e-15);
}

TEST(KernelMatrix, MatchesLoopOracle) {
    std::mt19937_64 rng(4);
    const Matrix A = oracle::random_matrix(6, 3, rng), B = oracle::random_matrix(4, 3, rng);
    Vector w(3);
    w << 0.5, 1.5, 0.2;
    const Kernel k = make_kernel(1.7, w, 0.3);
    EXPECT_LT((kernel_matrix(A, B, k, false) - oracle::se_matrix(A, B, 1.7, w)).cwiseAbs().maxCoeff(), 1e-14);
}

TEST(LogMarginal, MatchesDenseOracleAcrossSubjects) {
    std::mt19937_64 rng(5);
    const Matrix phi = oracle::random_matrix(12, 2, rng);
    const Vector r = oracle::random_vector(12, rng);
    Vector w(2);
    w << 0.8, 1.3;
    const Kernel k = make_kernel(1.2, w, 0.4);
    std::vector<std::string> labels;
    for (int i = 0; i < 12; ++i) labels.push_back(i < 5 ? "a" : i < 9 ? "b" : "c");
    const SubjectIndex s = SubjectIndex::from_labels(labels);
    double expect = 0.0;
    for (const auto& rows : s.rows) {
        expect += oracle::gp_lml(phi(rows, Eigen::all), r(rows), 1.2, w, 0.4);
    }
    EXPECT_NEAR(gp::log_marginal_likelihood(phi, r, s, k, nullptr), expect, 1e-10);
}

TEST(LogMarginal, GradientMatchesFiniteDifferences) {
    for (std::uint64_t seed = 0; seed < 5; ++seed) {
        std::mt19937_64 rng(seed + 10);
        const Matrix phi = oracle::random_matrix(20, 3, rng);
        const Vector r = oracle::random_vector(20, rng);
        const SubjectIndex s = SubjectIndex::from_labels(std::vector<std::string>{
            "a", "a", "a", "a", "a", "a", "a", "b", "b", "b", "b", "b", "b", "c", "c", "c", "c", "c", "c", "c"});
        Vector p(5);
        p << 0.3, -0.5, 0.2, -1.0, -0.7;
        Vector grad;
        gp::log_marginal_likelihood(phi, r, s, Kernel::from_log_params(p), &grad);
        const double h = 1e-6;
        for (Index i = 0; i < p.size(); ++i) {
            Vector pp = p, pm = p;
            pp(i) += h;
            pm(i) -= h;
            const double fd = (gp::log_marginal_likelihood(phi, r, s, Kernel::from_log_params(pp), nullptr) -
                               gp::log_marginal_likelihood(phi, r, s, Kernel::from_log_params(pm), nullptr)) /
                              (2 * h);
            EXPECT_LT(std::abs(grad(i) - fd), 1e-4 * std::max(1.0, std::abs(fd))) << "seed " << seed << " i " << i;
        }
    }
}

TEST(HyperFit, WhiteNoiseRecoversSigma) {
    std::vector<double> ratios;
    for (std::uint64_t seed = 0; seed < 30; ++seed) {
        std::mt19937_64 rng(seed + 100);
        const Matrix phi = oracle::random_matrix(60, 1, rng);
        const Vector r = 0.7 * oracle::random_vector(60, rng);
        HyperFitOptions o;
        o.seed = seed;
        const Kernel k = fit_hyperparameters(phi, r, SubjectIndex::single(60), o);
        // signal and noise variances are exchangeable when w is tiny; judge the total
        ratios.push_back(std::sqrt(k.sigma * k.sigma + (k.w(0) < 1e-3 ? k.v1 : 0.0)) / 0.7);
    }
    EXPECT_NEAR(median(ratios), 1.0, 0.2);
}

TEST(HyperFit, RecoversGeneratingParameters) {
    Vector w(1);
    w << 4.0;
    const Kernel truth = make_kernel(1.0, w, 0.2);
    std::vector<double> dv, dw, ds;
    for (std::uint64_t seed = 0; seed < 15; ++seed) {
        std::mt19937_64 rng(seed + 200);
        const Matrix phi = oracle::random_matrix(120, 1, rng);
        const Vector r = gp_draw(phi, truth, rng);
        HyperFitOptions o;
        o.seed = seed;
        const Vector p = fit_hyperparameters(phi, r, SubjectIndex::single(120), o).log_params() - truth.log_params();
        dv.push_back(p(0));
        dw.push_back(p(1));
        ds.push_back(p(2));
    }
    EXPECT_LT(std::abs(median(dv)), 0.5);
    EXPECT_LT(std::abs(median(dw)), 0.5);
    EXPECT_LT(std::abs(median(ds)), 0.5);
}

TEST(HyperFit, DuplicatedDataStaysFinite) {
    std::mt19937_64 rng(7);
    Matrix phi(20, 1);
    Vector r(20);
    const Matrix half = oracle::random_matrix(10, 1, rng);
    const Vector rh = oracle::random_vector(10, rng);
    phi << half, half;
    r << rh, rh;
    const Kernel k = fit_hyperparameters(phi, r, SubjectIndex::single(20));
    EXPECT_TRUE(k.log_params().allFinite());
    EXPECT_NO_THROW(k.validate());
}

TEST(FitG, SmallNoiseInterpolates) {
    std::mt19937_64 rng(8);
    const Matrix phi = oracle::random_matrix(8, 1, rng);
    const Vector r = oracle::random_vector(8, rng);
    const GpModel m = make_model(make_kernel(1.0, one(1.0), 1e-6), phi, r, SubjectIndex::single(8));
    EXPECT_LT((fit_g(m).first - r).cwiseAbs().maxCoeff(), 1e-6);
}

TEST(FitG, LargeNoiseShrinksToZero) {
    std::mt19937_64 rng(9);
    const Matrix phi = oracle::random_matrix(8, 1, rng);
    const Vector r = oracle::random_vector(8, rng);
    const GpModel m = make_model(make_kernel(1.0, one(1.0), 1e6), phi, r, SubjectIndex::single(8));
    EXPECT_LT(fit_g(m).first.cwiseAbs().maxCoeff(), 1e-10);
}

TEST(FitG, MatchesDenseOracle) {
    Matrix phi_raw(3, 1);
    phi_raw << 0.0, 1.0, 3.0;
    Vector r(3);
    r << 0.5, -0.2, 1.1;
    const Kernel k = make_kernel(1.3, one(0.6), 0.4);
    const GpModel m = make_model(k, phi_raw, r, SubjectIndex::single(3));
    const auto [g, v] = fit_g(m);
    const auto [eg, ev] = oracle::gp_fitted(m.train_phi, r, 1.3, k.w, 0.4);
    EXPECT_LT((g - eg).cwiseAbs().maxCoeff(), 1e-10);
    EXPECT_LT((v - ev).cwiseAbs().maxCoeff(), 1e-10);
}

TEST(FitG, SubjectsAreIndependent) {
    std::mt19937_64 rng(10);
    const Matrix phi = oracle::random_matrix(9, 2, rng);
    const Vector r = oracle::random_vector(9, rng);
    Vector w(2);
    w << 1.0, 0.5;
    const Kernel k = make_kernel(1.0, w, 0.3);
    const SubjectIndex s =
        SubjectIndex::from_labels(std::vector<std::string>{"x", "y", "x", "y", "x", "y", "y", "x", "x"});
    const GpModel m = make_model(k, phi, r, s);
    const Vector g = fit_g(m).first;
    for (const auto& rows : s.rows) {
        const Vector eg = oracle::gp_fitted(m.train_phi(rows, Eigen::all), r(rows), 1.0, w, 0.3).first;
        EXPECT_LT((g(rows) - eg).cwiseAbs().maxCoeff(), 1e-10);
    }
}

TEST(PredictWithin, InterpolatesObservedVisit) {
    std::mt19937_64 rng(11);
    const Matrix phi = oracle::random_matrix(6, 1, rng);
    const Vector r = oracle::random_vector(6, rng);
    const GpModel m = make_model(make_kernel(1.0, one(1.0), 1e-6), phi, r, SubjectIndex::single(6, "s"));
    const Prediction p = predict_within_subject(m, "s", 2.0, phi.row(3).transpose());
    EXPECT_NEAR(p.mean, 2.0 + r(3), 1e-5);
    EXPECT_NEAR(p.var, 0.0, 1e-5);
}

TEST(PredictWithin, FarAwayRevertsToPrior) {
    std::mt19937_64 rng(12);
    const Matrix phi = oracle::random_matrix(6, 1, rng);
    const Vector r = oracle::random_vector(6, rng);
    const GpModel m = make_model(make_kernel(0.8, one(1.0), 0.3), phi, r, SubjectIndex::single(6, "s"));
    const Prediction p = predict_within_subject(m, "s", -1.0, one(1e3));
    EXPECT_NEAR(p.mean, -1.0, 1e-12);
    EXPECT_NEAR(p.var, 0.8 + 0.09, 1e-12);
}

TEST(PredictWithin, MatchesDenseOracle) {
    Matrix phi_raw(4, 2);
    phi_raw << 0.1, 1.0, 0.4, 0.5, 0.9, -0.2, 1.3, 0.3;
    Vector r(4);
    r << 0.3, -0.4, 0.8, 0.1;
    Vector w(2);
    w << 0.7, 1.9;
    const Kernel k = make_kernel(1.1, w, 0.25);
    const GpModel m = make_model(k, phi_raw, r, SubjectIndex::single(4, "s"));
    Vector star_raw(2);
    star_raw << 0.6, 0.2;
    const Vector star = m.scaler.apply(star_raw.transpose()).row(0).transpose();
    const auto [em, ev] = oracle::gp_predict(m.train_phi, r, star, 1.1, w, 0.25);
    const Prediction p = predict_within_subject(m, "s", 0.5, star_raw);
    EXPECT_NEAR(p.mean, 0.5 + em, 1e-10);
    EXPECT_NEAR(p.var, ev, 1e-10);
}

TEST(PredictWithin, VarianceAtLeastNoise) {
    std::mt19937_64 rng(13);
    const Matrix phi = oracle::random_matrix(15, 2, rng);
    const Vector r = oracle::random_vector(15, rng);
    Vector w(2);
    w << 2.0, 0.3;
    const GpModel m = make_model(make_kernel(1.5, w, 0.05), phi, r, SubjectIndex::single(15, "s"));
    for (int i = 0; i < 50; ++i) {
        const Vector star = oracle::random_vector(2, rng);
        EXPECT_GE(predict_within_subject(m, "s", 0.0, star).var, 0.05 * 0.05 - 1e-10);
    }
    EXPECT_THROW(predict_within_subject(m, "nobody", 0.0, Vector::Zero(2)), InvalidArgument);
}

TEST(PredictNew, WeightedAverages) {
    EXPECT_DOUBLE_EQ(predict_new_subject({2.5, 2.5, 2.5}, {0.2, 0.5, 0.3}, 0.0), 2.5);
    EXPECT_DOUBLE_EQ(predict_new_subject({1.0, 2.0, 6.0}, {0.0, 0.0, 1.0}, 0.0), 6.0);
    EXPECT_NEAR(predict_new_subject({1.0, 2.0, 6.0}, {1.0 / 3, 1.0 / 3, 1.0 / 3}, 0.0), 3.0, 1e-15);
    EXPECT_DOUBLE_EQ(predict_new_subject({}, {}, 4.0), 4.0);
    EXPECT_THROW(predict_new_subject({1.0, 2.0}, {0.5, 0.6}, 0.0), InvalidArgument);
}

TEST(PredictNew, MixtureOverSubjects) {
    std::mt19937_64 rng(14);
    const Matrix phi = oracle::random_matrix(10, 1, rng);
    const Vector r = oracle::random_vector(10, rng);
    const SubjectIndex s = SubjectIndex::from_labels(
        std::vector<std::string>{"a", "a", "a", "b", "b", "b", "c", "c", "c", "c"});
    const GpModel m = make_model(make_kernel(1.0, one(1.0), 0.2), phi, r, s);
    const Vector star = one(0.3);
    double mean = 0.0;
    for (const auto& id : s.ids) mean += predict_within_subject(m, id, 0.0, star).mean / 3;
    const Prediction p = predict_new(m, 1.0, star);
    EXPECT_NEAR(p.mean, 1.0 + mean, 1e-12);
    EXPECT_GE(p.var, 0.04 - 1e-12);
    const auto w = subject_weights(m, star, NewSubjectWeights::InverseDistance);
    EXPECT_NEAR(w[0] + w[1] + w[2], 1.0, 1e-12);
}

TEST(Backfit, NoRandomEffectLeavesFixedPart) {
    std::mt19937_64 rng(15);
    const Index n = 120;
    const Matrix Z = oracle::random_matrix(n, 3, rng);
    const Vector y = 1.5 * Z.col(0) - 0.8 * Z.col(1) + 0.3 * oracle::random_vector(n, rng);
    const Matrix phi = oracle::random_matrix(n, 1, rng);
    std::vector<std::string> labels;
    for (Index i = 0; i < n; ++i) labels.push_back("s" + std::to_string(i / 10));
    const CandidateSet c = scalars(Z);
    const std::vector<std::string> sel{"z1", "z2"};
    const FittedModel only = fit_fixed_effects(y, c, sel, FlarsOptions{});
    const MixedFit mf = backfit(y, c, sel, phi, SubjectIndex::from_labels(labels));
    ASSERT_EQ(mf.fixed.scalar.size(), 2u);
    for (std::size_t j = 0; j < 2; ++j)
        EXPECT_NEAR(mf.fixed.scalar[j].coef, only.scalar[j].coef, 0.01 * std::abs(only.scalar[j].coef));
}

TEST(Backfit, RecoversRandomEffect) {
    std::vector<double> r2;
    for (std::uint64_t seed = 0; seed < 5; ++seed) {
        std::mt19937_64 rng(seed + 300);
        const Index n = 100;
        const Matrix Z = oracle::random_matrix(n, 2, rng);
        const Matrix phi = oracle::random_matrix(n, 1, rng);
        std::vector<std::string> labels;
        Vector g(n);
        for (Index i = 0; i < n; ++i) {
            labels.push_back("s" + std::to_string(i / 20));
            g(i) = std::sin(2 * phi(i, 0)) + 0.3 * static_cast<double>(i / 20);
        }
        const Vector y = g + 0.1 * oracle::random_vector(n, rng);
        const MixedFit mf = backfit(y, scalars(Z), {"z1"}, phi, SubjectIndex::from_labels(labels));
        const Vector ghat = fit_g(mf.gp).first;
        r2.push_back(std::pow(oracle::pearson(ghat, g), 2));
    }
    EXPECT_GT(median(r2), 0.8);
}

TEST(Backfit, FrozenKernelSweepEqualsManualSteps) {
    std::mt19937_64 rng(16);
    const Index n = 40;
    const Matrix Z = oracle::random_matrix(n, 2, rng);
    const Matrix phi = oracle::random_matrix(n, 1, rng);
    const Vector y = Z.col(0) + 0.5 * oracle::random_vector(n, rng);
    const CandidateSet c = scalars(Z);
    const std::vector<std::string> sel{"z1", "z2"};
    const SubjectIndex s = SubjectIndex::single(n);
    BackfitOptions o;
    o.frozen_kernel = make_kernel(0.5, one(1.0), 0.4);
    o.max_sweeps = 1;
    const MixedFit mf = backfit(y, c, sel, phi, s, o);

    const FittedModel f0 = fit_fixed_effects(y, c, sel, o.flars);
    const Vector r = y - f0.predict(c);
    const Vector g = fit_g(make_model(*o.frozen_kernel, phi, r, s)).first;
    const FittedModel f1 = fit_fixed_effects(y - g, c, sel, o.flars);
    EXPECT_EQ(mf.n_backfit_iters, 1);
    EXPECT_LT((mf.fixed.predict(c) - f1.predict(c)).cwiseAbs().maxCoeff(), 1e-12);
    EXPECT_NEAR(mf.rss_history.at(0), (y - f1.predict(c) - g).squaredNorm(), 1e-10);
}

TEST(Backfit, SettlesOnLongitudinalData) {
    std::mt19937_64 rng(17);
    const Index n = 150;
    const Matrix Z = oracle::random_matrix(n, 3, rng);
    Matrix phi(n, 1);
    std::vector<std::string> labels;
    Vector g(n);
    for (Index i = 0; i < n; ++i) {
        const Index s = i / 10;
        labels.push_back("s" + std::to_string(s));
        phi(i, 0) = 0.5 * static_cast<double>(i % 10);
        g(i) = std::sin(phi(i, 0) + static_cast<double>(s)) + 0.2 * static_cast<double>(s % 3);
    }
    const Vector y = Z.col(0) - 0.5 * Z.col(2) + g + 0.05 * oracle::random_vector(n, rng);
    const MixedFit mf = backfit(y, scalars(Z), {"z1", "z3"}, phi, SubjectIndex::from_labels(labels));
    EXPECT_TRUE(mf.converged);
    EXPECT_FALSE(mf.diverged);
    ASSERT_EQ(mf.objective_history.size(), static_cast<std::size_t>(mf.n_backfit_iters));
    EXPECT_LT(mf.objective_history.back(), mf.objective_history.front());
    EXPECT_LT(mf.change_history.back(), 1e-6);
    EXPECT_NEAR(mf.fixed.scalar[0].coef, 1.0, 0.05);
    EXPECT_NEAR(mf.fixed.scalar[1].coef, -0.5, 0.05);
}
