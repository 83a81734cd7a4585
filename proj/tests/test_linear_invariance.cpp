#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include "icrm/linear_invariance.hpp"

#include <cmath>

using namespace icrm;
using namespace icrm::linear;

namespace {

LinearEnvSpec reference() {
    LinearEnvSpec s;
    s.alpha = 1;
    s.beta = 1;
    s.sigma1_sq = 1;
    s.sigma2_sq = 1;
    s.sigma12 = 0.5;
    s.mu2_values = {-1, 1};
    s.mu2_probs = {0.5, 0.5};
    return s;
}

LinearEnvSpec three_envs() {
    auto s = reference();
    s.mu2_values = {-2, 0.5, 2};
    s.mu2_probs = {0.3, 0.4, 0.3};
    s.noise_var = 0.25;
    return s;
}

}  // namespace

TEST_CASE("validation") {
    auto s = reference();
    s.sigma12 = 1.0;  // singular covariance
    CHECK_THROWS_AS(s.validate(), InvalidArgument);
    s = reference();
    s.mu2_probs = {0.5, 0.6};
    CHECK_THROWS_AS(s.validate(), InvalidArgument);
    s = reference();
    s.noise_var = -1;
    CHECK_THROWS_AS(s.validate(), InvalidArgument);
}

TEST_CASE("reference alpha prime") {
    const auto s = reference();
    CHECK(s.delta() == 1.0);
    const double expected = 1.0 - 0.5 / 1.75;
    CHECK(closed_form_alpha_prime(s) == doctest::Approx(expected).epsilon(1e-15));
    CHECK(closed_form_alpha_prime(s) == doctest::Approx(0.714286).epsilon(1e-6));
    CHECK(std::abs(population_erm_coeffs(s).alpha_tilde - closed_form_alpha_prime(s)) < 1e-12);
}

TEST_CASE("no bias without covariance or without beta") {
    auto s = reference();
    s.sigma12 = 0;
    CHECK(population_erm_coeffs(s).alpha_tilde == doctest::Approx(1.0).epsilon(1e-15));
    s = reference();
    s.beta = 0;
    CHECK(population_erm_coeffs(s).alpha_tilde == doctest::Approx(1.0).epsilon(1e-15));
    CHECK(std::abs(population_erm_coeffs(s).beta_tilde) < 1e-15);
}

TEST_CASE("empirical pooled regression matches the population coefficients") {
    const auto s = reference();
    const auto fit = fit_erm_empirical(simulate(s, 1000000, 2024));
    CHECK(std::abs(fit.coeffs(0) - 0.714286) < 0.01);
    CHECK(std::abs(fit.coeffs(1) - population_erm_coeffs(s).beta_tilde) < 0.01);
}

TEST_CASE("extended regression recovers the invariant coefficients") {
    const auto s = three_envs();
    const auto fit = fit_icrm_extended(simulate(s, 1000000, 7));
    Vector expected(4);
    expected << s.alpha, 0, 0, s.beta;
    CHECK((fit.coeffs - expected).cwiseAbs().maxCoeff() < 0.01);
    // mu1 is identically zero, so its column is dependent.
    CHECK(fit.rank == 3);
}

TEST_CASE("single zero-mean environment: rank policy handles the dead columns") {
    auto s = reference();
    s.mu2_values = {0};
    s.mu2_probs = {1};
    const auto data = simulate(s, 2000, 3);
    const auto fit = fit_icrm_extended(data);
    CHECK(fit.coeffs(0) == doctest::Approx(s.alpha).epsilon(1e-9));
    CHECK(fit.dependent_features.size() >= 2);
    CHECK_THROWS_AS(fit_icrm_extended(data, RankPolicy::error), RankDeficientError);
    CHECK_THROWS_AS(ols(Matrix::Ones(5, 1), Vector::Ones(5), {"c"}), InvalidArgument);
}

TEST_CASE("least squares against a direct normal-equation solve") {
    Rng rng(1);
    Matrix x(200, 3);
    for (Eigen::Index i = 0; i < x.rows(); ++i) x.row(i) = standard_normal(rng, 3).transpose();
    Vector beta(3);
    beta << 0.5, -2, 3;
    const Vector y = x * beta + 0.1 * standard_normal(rng, 200);
    const auto fit = ols(x, y, {"a", "b", "c"});
    const Vector direct = (x.transpose() * x).ldlt().solve(x.transpose() * y);
    CHECK((fit.coeffs - direct).cwiseAbs().maxCoeff() < 1e-10);
}

TEST_CASE("error curves") {
    const auto s = reference();
    const auto erm = LinearPredictor::erm(population_erm_coeffs(s));
    const std::vector<double> grid{0.5, 1, 2, 4, 8};
    const auto curve = test_error_curve(s, erm, grid, 3.0, ContextMode::full);
    const double slope_expected = std::pow(s.alpha - closed_form_alpha_prime(s), 2);
    for (std::size_t i = 1; i < curve.size(); ++i) {
        const double slope = (curve[i].error - curve[i - 1].error) / (grid[i] - grid[i - 1]);
        CHECK(std::abs(slope - slope_expected) < 1e-9);
    }
    LinearPredictor inv{s.alpha, 0, 0, s.beta};
    for (const auto& p : test_error_curve(s, inv, grid, 3.0, ContextMode::full)) CHECK(std::abs(p.error - s.noise_var) < 1e-12);
    for (const auto& p : test_error_curve(s, inv, grid, 3.0, ContextMode::empty)) CHECK(p.error == doctest::Approx(9.0));
    CHECK_THROWS_AS(test_error_curve(s, inv, {}, 3.0, ContextMode::full), InvalidArgument);
}

TEST_CASE("analytic error matches Monte Carlo") {
    const auto s = three_envs();
    const auto erm = LinearPredictor::erm(population_erm_coeffs(s));
    for (double mu2 : {0.0, 3.0}) {
        const double analytic = expected_test_error(s, erm, mu2, ContextMode::full);
        const auto mc = mc_test_error(s, erm, mu2, ContextMode::full, 200000, 5);
        CHECK(std::abs(mc.mean - analytic) < 5 * mc.std_error);
    }
    LinearPredictor inv{s.alpha, 0, 0, s.beta};
    const auto mc = mc_test_error(s, inv, 2.0, ContextMode::empty, 200000, 6);
    const double analytic = expected_test_error(s, inv, 2.0, ContextMode::empty);
    CHECK(analytic == doctest::Approx(4.0 + s.noise_var));
    CHECK(std::abs(mc.mean - analytic) < 5 * mc.std_error);
}

TEST_CASE("invariance report") {
    const auto rows = invariance_report(reference(), {1, 2, 3}, 3.0);
    REQUIRE(rows.size() == 3);
    CHECK(rows[2].erm_error > rows[0].erm_error);
    CHECK(rows[0].icrm_full_context_error == rows[2].icrm_full_context_error);
    const auto csv = invariance_csv(rows);
    CHECK(csv.rfind("sigma1_sq,erm_error,icrm_full_context_error,icrm_empty_context_error\n", 0) == 0);
}

namespace {

NonlinearTables xor_tables() {
    NonlinearTables t;
    t.x1_probs = {0.5, 0.5};
    t.mu2_probs = {0.5, 0.5};
    t.p = Matrix(2, 2);
    t.p << 0, 1, 1, 0;  // XOR of x1 and mu2
    t.q = Matrix(2, 2);
    t.q << 0.8, 0.2, 0.2, 0.8;  // identity plus noise
    return t;
}

}  // namespace

TEST_CASE("nonlinear extension: ICRM table is p, ERM table depends on x2") {
    const auto rep = nonlinear_invariance_demo(xor_tables());
    CHECK(rep.icrm_max_deviation < 1e-12);
    CHECK(rep.erm_x2_spread > 0.1);
    // Hand enumeration: P(mu2=0 | x2=0) = 0.8, so E[y | x1=0, x2=0] = 0.2.
    CHECK(rep.erm_table(0, 0) == doctest::Approx(0.2).epsilon(1e-12));
}

TEST_CASE("nonlinear extension: constant q makes the predictors coincide in what they can see") {
    auto t = xor_tables();
    t.q << 0.5, 0.5, 0.5, 0.5;
    const auto rep = nonlinear_invariance_demo(t);
    CHECK(rep.erm_x2_spread < 1e-12);
}

TEST_CASE("nonlinear extension: perfect in-distribution fit still fails on a held-out mean") {
    NonlinearTables t;
    t.x1_probs = {0.5, 0.5};
    t.mu2_probs = {0.5, 0.5, 0.0};
    t.p = Matrix(2, 3);
    t.p << 0, 1, 1, 1, 0, 0;
    t.q = Matrix(3, 2);
    t.q << 1, 0, 0, 1, 1, 0;  // held-out mu2 index 2 shares x2 = 0 with index 0
    const auto rep = nonlinear_invariance_demo(t);
    CHECK(rep.erm_in_distribution_mse < 1e-12);
    CHECK(nonlinear_ood_gap(t, 2) > 0.5);
}

TEST_CASE("closed form agrees with a direct second-moment solve on 1000 random specs") {
    Rng rng(99);
    std::uniform_real_distribution<double> u(0.0, 1.0);
    double worst = 0.0;
    for (int i = 0; i < 1000; ++i) {
        LinearEnvSpec s;
        s.alpha = -2 + 4 * u(rng);
        s.beta = -2 + 4 * u(rng);
        s.sigma1_sq = 0.2 + 3 * u(rng);
        s.sigma2_sq = 0.2 + 3 * u(rng);
        s.sigma12 = (-0.9 + 1.8 * u(rng)) * std::sqrt(s.sigma1_sq * s.sigma2_sq);
        s.mu2_values = {-3 + 6 * u(rng), -3 + 6 * u(rng), -3 + 6 * u(rng)};
        const double a = u(rng) + 0.05, b = u(rng) + 0.05, c = u(rng) + 0.05;
        s.mu2_probs = {a / (a + b + c), b / (a + b + c), c / (a + b + c)};
        s.mu2_probs[2] = 1.0 - s.mu2_probs[0] - s.mu2_probs[1];
        double m2 = 0.0;
        for (std::size_t k = 0; k < 3; ++k) m2 += s.mu2_probs[k] * s.mu2_values[k] * s.mu2_values[k];
        Eigen::Matrix2d lambda;
        lambda << s.sigma1_sq, s.sigma12, s.sigma12, s.sigma2_sq + m2;
        const Eigen::Vector2d rho(s.alpha * s.sigma1_sq, s.alpha * s.sigma12 + s.beta * m2);
        const Eigen::Vector2d direct = lambda.fullPivLu().solve(rho);
        worst = std::max(worst, std::abs(closed_form_alpha_prime(s) - direct(0)));
    }
    CHECK(worst < 1e-12);
}

TEST_CASE("pooled regression error shrinks like one over root n") {
    const auto s = reference();
    const double target = population_erm_coeffs(s).alpha_tilde;
    auto rms = [&](std::size_t n, std::uint64_t base) {
        double sq = 0.0;
        const int reps = 200;
        for (int r = 0; r < reps; ++r) {
            const double err = fit_erm_empirical(simulate(s, n, base + static_cast<std::uint64_t>(r))).coeffs(0) - target;
            sq += err * err;
        }
        return std::sqrt(sq / reps);
    };
    const double ratio = rms(1000, 1000) / rms(4000, 5000);
    CHECK(ratio > 2 * 0.7);
    CHECK(ratio < 2 * 1.3);
}

TEST_CASE("ERM slope vanishes exactly when there is no bias") {
    auto s = reference();
    s.sigma12 = 0.0;
    const auto erm = LinearPredictor::erm(population_erm_coeffs(s));
    const auto curve = test_error_curve(s, erm, {1, 2, 4}, 3.0, ContextMode::full);
    CHECK(std::abs(curve[2].error - curve[0].error) < 1e-12);
    const auto biased = test_error_curve(reference(), LinearPredictor::erm(population_erm_coeffs(reference())),
                                         {1, 2, 4}, 3.0, ContextMode::full);
    CHECK(biased[2].error - biased[0].error > 1e-3);
}

TEST_CASE("ICRM curves are flat under Monte Carlo as well") {
    const auto base = three_envs();
    const LinearPredictor inv{base.alpha, 0, 0, base.beta};
    for (auto mode : {ContextMode::full, ContextMode::empty}) {
        double lo = 1e300, hi = -1e300, max_se = 0.0;
        for (double s1 : {0.5, 1.0, 2.0, 4.0}) {
            auto s = base;
            s.sigma1_sq = s1;
            const auto mc = mc_test_error(s, inv, 2.0, mode, 100000, 31);
            CHECK(std::abs(mc.mean - expected_test_error(s, inv, 2.0, mode)) < 3 * mc.std_error);
            lo = std::min(lo, mc.mean);
            hi = std::max(hi, mc.mean);
            max_se = std::max(max_se, mc.std_error);
        }
        CHECK(hi - lo < 3 * max_se);
    }
}
