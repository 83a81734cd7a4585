#include "icrm/linear_invariance.hpp"

#include <cmath>
#include <cstdio>
#include <limits>

namespace icrm::linear {

namespace {

void check_distribution(const std::vector<double>& p, const std::string& what) {
    if (p.empty()) throw InvalidArgument(what + " is empty");
    double s = 0.0;
    for (double v : p) {
        if (!(v >= 0.0 && v <= 1.0)) throw InvalidArgument(what + " has an entry outside [0,1]");
        s += v;
    }
    if (std::abs(s - 1.0) > 1e-12) throw InvalidArgument(what + " does not sum to one");
}

constexpr double kNaN = std::numeric_limits<double>::quiet_NaN();

}  // namespace

void LinearEnvSpec::validate() const {
    if (mu2_values.size() != mu2_probs.size()) throw InvalidArgument("mu2 values and probabilities differ in length");
    check_distribution(mu2_probs, "mu2 distribution");
    if (noise_var < 0.0) throw InvalidArgument("noise variance must be non-negative");
    if (!(sigma1_sq > 0.0 && sigma2_sq > 0.0 && sigma1_sq * sigma2_sq - sigma12 * sigma12 > 0.0)) {
        throw InvalidArgument("within-environment covariance of (x1, x2) must be positive definite");
    }
}

double LinearEnvSpec::delta() const {
    double d = 0.0;
    for (std::size_t i = 0; i < mu2_values.size(); ++i) d += mu2_probs[i] * mu2_values[i] * mu2_values[i];
    return d;
}

Matrix LinearEnvSpec::sigma_xx() const {
    Matrix s(2, 2);
    s << sigma1_sq, sigma12, sigma12, sigma2_sq;
    return s;
}

ErmCoeffs population_erm_coeffs(const LinearEnvSpec& spec) {
    spec.validate();
    const double delta = spec.delta();
    Matrix lambda(2, 2);
    lambda << spec.sigma1_sq, spec.sigma12, spec.sigma12, spec.sigma2_sq + delta;
    Vector rho(2);
    rho << spec.alpha * spec.sigma1_sq, spec.alpha * spec.sigma12 + spec.beta * delta;
    const double det = lambda.determinant();
    if (std::abs(det) <= 1e-14 * lambda.cwiseAbs().maxCoeff() * lambda.cwiseAbs().maxCoeff()) {
        throw NumericalError("Lambda_xx is singular");
    }
    const Vector sol = lambda.partialPivLu().solve(rho);
    return {sol(0), sol(1)};
}

double closed_form_alpha_prime(const LinearEnvSpec& spec) {
    spec.validate();
    const double delta = spec.delta();
    const double denom = spec.sigma1_sq * (spec.sigma2_sq + delta) - spec.sigma12 * spec.sigma12;
    if (denom == 0.0) throw NumericalError("Lambda_xx is singular");
    return spec.alpha - spec.sigma12 * spec.beta * delta / denom;
}

std::vector<LinearSample> simulate_env(const LinearEnvSpec& spec, double mu2, std::size_t n, Rng& rng) {
    const Matrix l = Eigen::LLT<Matrix>(spec.sigma_xx()).matrixL();
    std::normal_distribution<double> noise(0.0, std::sqrt(spec.noise_var));
    std::vector<LinearSample> out;
    out.reserve(n);
    for (std::size_t i = 0; i < n; ++i) {
        const Vector z = l * standard_normal(rng, 2);
        LinearSample s;
        s.x1 = z(0);
        s.x2 = mu2 + z(1);
        s.mu1 = 0.0;
        s.mu2 = mu2;
        s.y = spec.alpha * s.x1 + spec.beta * mu2 + (spec.noise_var > 0.0 ? noise(rng) : 0.0);
        out.push_back(s);
    }
    return out;
}

std::vector<LinearSample> simulate(const LinearEnvSpec& spec, std::size_t n, std::uint64_t seed) {
    spec.validate();
    Rng rng(seed);
    std::discrete_distribution<int> env(spec.mu2_probs.begin(), spec.mu2_probs.end());
    std::vector<LinearSample> out;
    out.reserve(n);
    for (std::size_t i = 0; i < n; ++i) {
        const int e = env(rng);
        auto one = simulate_env(spec, spec.mu2_values[static_cast<std::size_t>(e)], 1, rng);
        one.front().env = e;
        out.push_back(one.front());
    }
    return out;
}

RankDeficientError::RankDeficientError(const std::vector<std::string>& f)
    : NumericalError([&] {
          std::string msg = "rank-deficient design; dependent features:";
          for (const auto& s : f) msg += " " + s;
          return msg;
      }()),
      features(f) {}

OlsFit ols(const Matrix& design, const Vector& target, const std::vector<std::string>& names, RankPolicy policy) {
    if (design.rows() != target.size()) throw InvalidArgument("design and target differ in length");
    if (static_cast<Eigen::Index>(names.size()) != design.cols()) throw InvalidArgument("feature names mismatch");
    if (design.rows() < 10 * design.cols()) {
        throw InvalidArgument("least squares needs at least 10 samples per feature");
    }
    const Matrix gram = design.transpose() * design;
    const Vector rhs = design.transpose() * target;
    Eigen::CompleteOrthogonalDecomposition<Matrix> cod(gram);
    // Relative threshold on the Gram matrix: its singular values are squares
    // of the design's, so 1e-10 here is 1e-5 relative on the design.
    cod.setThreshold(1e-10);
    OlsFit fit;
    fit.rank = cod.rank();
    if (fit.rank < gram.cols()) {
        const auto perm = cod.colsPermutation().indices();
        for (Eigen::Index i = fit.rank; i < gram.cols(); ++i) fit.dependent_features.push_back(names[static_cast<std::size_t>(perm(i))]);
        if (policy == RankPolicy::error) throw RankDeficientError(fit.dependent_features);
    }
    fit.coeffs = cod.solve(rhs);
    return fit;
}

OlsFit fit_erm_empirical(const std::vector<LinearSample>& data, RankPolicy policy) {
    Matrix x(static_cast<Eigen::Index>(data.size()), 2);
    Vector y(static_cast<Eigen::Index>(data.size()));
    for (std::size_t i = 0; i < data.size(); ++i) {
        const auto r = static_cast<Eigen::Index>(i);
        x(r, 0) = data[i].x1;
        x(r, 1) = data[i].x2;
        y(r) = data[i].y;
    }
    return ols(x, y, {"x1", "x2"}, policy);
}

OlsFit fit_icrm_extended(const std::vector<LinearSample>& data, RankPolicy policy) {
    Matrix x(static_cast<Eigen::Index>(data.size()), 4);
    Vector y(static_cast<Eigen::Index>(data.size()));
    for (std::size_t i = 0; i < data.size(); ++i) {
        const auto r = static_cast<Eigen::Index>(i);
        x(r, 0) = data[i].x1;
        x(r, 1) = data[i].x2;
        x(r, 2) = data[i].mu1;
        x(r, 3) = data[i].mu2;
        y(r) = data[i].y;
    }
    return ols(x, y, {"x1", "x2", "mu1", "mu2"}, policy);
}

LinearPredictor LinearPredictor::from_vector(const Vector& v) {
    if (v.size() == 2) return {v(0), v(1), 0.0, 0.0};
    if (v.size() == 4) return {v(0), v(1), v(2), v(3)};
    throw InvalidArgument("linear predictor needs 2 or 4 coefficients");
}

double expected_test_error(const LinearEnvSpec& spec, const LinearPredictor& f, double test_mu2, ContextMode mode) {
    const double mu2_hat = mode == ContextMode::full ? test_mu2 : 0.0;
    const double da = spec.alpha - f.a1;
    // Residual = da x1 - a2 u2 + (beta - a2) mu2 - m2 mu2_hat + eps, with
    // (x1, u2) the zero-mean within-environment part.
    const double offset = (spec.beta - f.a2) * test_mu2 - f.m2 * mu2_hat;
    return da * da * spec.sigma1_sq + f.a2 * f.a2 * spec.sigma2_sq - 2.0 * da * f.a2 * spec.sigma12 +
           offset * offset + spec.noise_var;
}

McError mc_test_error(const LinearEnvSpec& spec, const LinearPredictor& f, double test_mu2, ContextMode mode,
                      std::size_t n, std::uint64_t seed) {
    Rng rng(seed);
    const auto data = simulate_env(spec, test_mu2, n, rng);
    double sum = 0.0, sum_sq = 0.0;
    for (const auto& s : data) {
        const double mu2_hat = mode == ContextMode::full ? s.mu2 : 0.0;
        const double mu1_hat = mode == ContextMode::full ? s.mu1 : 0.0;
        const double pred = f.a1 * s.x1 + f.a2 * s.x2 + f.m1 * mu1_hat + f.m2 * mu2_hat;
        const double r = (s.y - pred) * (s.y - pred);
        sum += r;
        sum_sq += r * r;
    }
    const double nn = static_cast<double>(n);
    const double mean = sum / nn;
    const double var = std::max(0.0, (sum_sq - nn * mean * mean) / (nn - 1.0));
    return {mean, std::sqrt(var / nn)};
}

std::vector<ErrorCurvePoint> test_error_curve(const LinearEnvSpec& spec, const LinearPredictor& f,
                                              const std::vector<double>& sigma1_grid, double test_mu2,
                                              ContextMode mode) {
    if (sigma1_grid.empty()) throw InvalidArgument("sigma1^2 grid is empty");
    std::vector<ErrorCurvePoint> out;
    for (double s1 : sigma1_grid) {
        LinearEnvSpec at = spec;
        at.sigma1_sq = s1;
        at.validate();
        out.push_back({s1, expected_test_error(at, f, test_mu2, mode)});
    }
    return out;
}

std::vector<InvarianceRow> invariance_report(const LinearEnvSpec& spec, const std::vector<double>& sigma1_grid,
                                             double test_mu2) {
    const auto erm = LinearPredictor::erm(population_erm_coeffs(spec));
    const LinearPredictor icrm{spec.alpha, 0.0, 0.0, spec.beta};
    const auto e = test_error_curve(spec, erm, sigma1_grid, test_mu2, ContextMode::full);
    const auto full = test_error_curve(spec, icrm, sigma1_grid, test_mu2, ContextMode::full);
    const auto empty = test_error_curve(spec, icrm, sigma1_grid, test_mu2, ContextMode::empty);
    std::vector<InvarianceRow> rows;
    for (std::size_t i = 0; i < sigma1_grid.size(); ++i) {
        rows.push_back({sigma1_grid[i], e[i].error, full[i].error, empty[i].error});
    }
    return rows;
}

std::string invariance_csv(const std::vector<InvarianceRow>& rows) {
    std::string out = "sigma1_sq,erm_error,icrm_full_context_error,icrm_empty_context_error\n";
    char buf[128];
    for (const auto& r : rows) {
        std::snprintf(buf, sizeof(buf), "%.17g,%.17g,%.17g,%.17g\n", r.sigma1_sq, r.erm_error,
                      r.icrm_full_context_error, r.icrm_empty_context_error);
        out += buf;
    }
    return out;
}

// ---------------------------------------------------------------------------

namespace {

void validate_tables(const NonlinearTables& t, bool mu2_must_sum_to_one = true) {
    check_distribution(t.x1_probs, "P(x1)");
    if (mu2_must_sum_to_one) check_distribution(t.mu2_probs, "P(mu2)");
    const auto nx1 = static_cast<Eigen::Index>(t.x1_probs.size());
    const auto nmu = static_cast<Eigen::Index>(t.mu2_probs.size());
    if (t.p.rows() != nx1 || t.p.cols() != nmu) throw InvalidArgument("p table must be |x1| x |mu2|");
    if (t.q.rows() != nmu || t.q.cols() == 0) throw InvalidArgument("q table must be |mu2| x |x2|");
    for (Eigen::Index m = 0; m < nmu; ++m) {
        double s = 0.0;
        for (Eigen::Index j = 0; j < t.q.cols(); ++j) {
            if (!(t.q(m, j) >= 0.0)) throw InvalidArgument("q table has a negative entry");
            s += t.q(m, j);
        }
        if (std::abs(s - 1.0) > 1e-12) throw InvalidArgument("q table row does not sum to one");
    }
}

Matrix erm_table_of(const NonlinearTables& t) {
    const auto nx1 = static_cast<Eigen::Index>(t.x1_probs.size());
    const auto nmu = static_cast<Eigen::Index>(t.mu2_probs.size());
    const Eigen::Index nx2 = t.q.cols();
    Matrix out(nx1, nx2);
    for (Eigen::Index a = 0; a < nx1; ++a) {
        for (Eigen::Index b = 0; b < nx2; ++b) {
            double num = 0.0, den = 0.0;
            for (Eigen::Index m = 0; m < nmu; ++m) {
                const double w = t.mu2_probs[static_cast<std::size_t>(m)] * t.q(m, b);
                num += w * t.p(a, m);
                den += w;
            }
            out(a, b) = den > 0.0 ? num / den : kNaN;
        }
    }
    return out;
}

}  // namespace

NonlinearReport nonlinear_invariance_demo(const NonlinearTables& t) {
    validate_tables(t);
    const auto nx1 = static_cast<Eigen::Index>(t.x1_probs.size());
    const auto nmu = static_cast<Eigen::Index>(t.mu2_probs.size());
    const Eigen::Index nx2 = t.q.cols();
    NonlinearReport r;

    // E[y | x1, x2, mu1, mu2] from the joint P(x1) P(mu2) q(x2|mu2) with
    // E[y | x1, mu2] = p(x1, mu2); mu1 is constant so conditioning on it is free.
    for (Eigen::Index m = 0; m < nmu; ++m) {
        Matrix cell(nx1, nx2);
        for (Eigen::Index a = 0; a < nx1; ++a) {
            for (Eigen::Index b = 0; b < nx2; ++b) {
                const double w = t.x1_probs[static_cast<std::size_t>(a)] * t.mu2_probs[static_cast<std::size_t>(m)] * t.q(m, b);
                cell(a, b) = w > 0.0 ? (w * t.p(a, m)) / w : kNaN;
                if (w > 0.0) r.icrm_max_deviation = std::max(r.icrm_max_deviation, std::abs(cell(a, b) - t.p(a, m)));
            }
        }
        r.icrm_table.push_back(std::move(cell));
    }

    r.erm_table = erm_table_of(t);
    for (Eigen::Index a = 0; a < nx1; ++a) {
        for (Eigen::Index b = 0; b < nx2; ++b) {
            for (Eigen::Index c = b + 1; c < nx2; ++c) {
                const double u = r.erm_table(a, b), v = r.erm_table(a, c);
                if (std::isnan(u) || std::isnan(v)) continue;
                if (std::abs(u - v) > r.erm_x2_spread) {
                    r.erm_x2_spread = std::abs(u - v);
                    r.witness_x1 = static_cast<int>(a);
                    r.witness_x2_a = static_cast<int>(b);
                    r.witness_x2_b = static_cast<int>(c);
                }
            }
        }
    }

    for (Eigen::Index a = 0; a < nx1; ++a)
        for (Eigen::Index m = 0; m < nmu; ++m)
            for (Eigen::Index b = 0; b < nx2; ++b) {
                const double w = t.x1_probs[static_cast<std::size_t>(a)] * t.mu2_probs[static_cast<std::size_t>(m)] * t.q(m, b);
                if (w > 0.0) r.erm_in_distribution_mse += w * std::pow(r.erm_table(a, b) - t.p(a, m), 2);
            }
    return r;
}

double nonlinear_ood_gap(const NonlinearTables& train, int heldout) {
    validate_tables(train);
    if (heldout < 0 || heldout >= static_cast<int>(train.mu2_probs.size())) throw InvalidArgument("held-out index out of range");
    if (train.mu2_probs[static_cast<std::size_t>(heldout)] != 0.0) {
        throw InvalidArgument("held-out environment must have zero training probability");
    }
    const Matrix erm = erm_table_of(train);
    double gap = 0.0;
    for (Eigen::Index a = 0; a < erm.rows(); ++a) {
        for (Eigen::Index b = 0; b < erm.cols(); ++b) {
            const double w = train.x1_probs[static_cast<std::size_t>(a)] * train.q(heldout, b);
            if (w == 0.0) continue;
            if (std::isnan(erm(a, b))) throw InvalidArgument("ERM table undefined at a held-out x2 value");
            gap += w * std::pow(erm(a, b) - train.p(a, heldout), 2);
        }
    }
    return gap;
}

}  // namespace icrm::linear
