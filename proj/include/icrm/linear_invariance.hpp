#pragma once

// Linear structural example y = alpha x1 + beta mu2^e + eps, where x2 carries
// the environment mean mu2^e. Pooled least squares on (x1, x2) biases the x1
// coefficient whenever cov(x1, x2) != 0; regression on the extended features
// (x1, x2, mu1^e, mu2^e) recovers (alpha, 0, 0, beta).

#include "icrm/common.hpp"

#include <cstdint>
#include <string>
#include <vector>

namespace icrm::linear {

struct LinearEnvSpec {
    double alpha = 1.0;
    double beta = 1.0;
    double sigma1_sq = 1.0;
    double sigma2_sq = 1.0;
    double sigma12 = 0.0;
    /// Support and probabilities of mu2^e across environments.
    std::vector<double> mu2_values{1.0};
    std::vector<double> mu2_probs{1.0};
    double noise_var = 0.0;

    void validate() const;
    /// E[(mu2^e)^2].
    double delta() const;
    /// Within-environment covariance of (x1, x2).
    Matrix sigma_xx() const;
};

struct ErmCoeffs {
    double alpha_tilde = 0.0;
    double beta_tilde = 0.0;
};

/// Lambda_xx^{-1} rho_xy.
ErmCoeffs population_erm_coeffs(const LinearEnvSpec& spec);

/// alpha' = alpha - sigma12 beta delta / (sigma1^2 (sigma2^2 + delta) - sigma12^2).
double closed_form_alpha_prime(const LinearEnvSpec& spec);

struct LinearSample {
    double x1 = 0.0;
    double x2 = 0.0;
    double mu1 = 0.0;
    double mu2 = 0.0;
    double y = 0.0;
    int env = 0;
};

/// n samples; each draws an environment from mu2_dist, then (x1, x2) ~
/// N((0, mu2), Sigma_xx) and y = alpha x1 + beta mu2 + eps.
std::vector<LinearSample> simulate(const LinearEnvSpec& spec, std::size_t n, std::uint64_t seed);

/// n samples from a single environment with mean mu2.
std::vector<LinearSample> simulate_env(const LinearEnvSpec& spec, double mu2, std::size_t n, Rng& rng);

enum class RankPolicy { min_norm, error };

struct OlsFit {
    Vector coeffs;
    Eigen::Index rank = 0;
    /// Columns outside the leading pivots of a rank-revealing factorization.
    std::vector<std::string> dependent_features;
};

/// Raised under RankPolicy::error for rank-deficient designs.
class RankDeficientError : public NumericalError {
public:
    RankDeficientError(const std::vector<std::string>& features);
    std::vector<std::string> features;
};

/// Least squares via the normal equations and a complete orthogonal
/// decomposition, so rank-deficient designs get the minimum-norm solution.
OlsFit ols(const Matrix& design, const Vector& target, const std::vector<std::string>& names,
           RankPolicy policy = RankPolicy::min_norm);

/// Pooled regression on (x1, x2).
OlsFit fit_erm_empirical(const std::vector<LinearSample>& data, RankPolicy policy = RankPolicy::error);

/// Regression on (x1, x2, mu1^e, mu2^e).
OlsFit fit_icrm_extended(const std::vector<LinearSample>& data, RankPolicy policy = RankPolicy::min_norm);

/// Linear predictor over (x1, x2, mu1_hat, mu2_hat).
struct LinearPredictor {
    double a1 = 0.0;
    double a2 = 0.0;
    double m1 = 0.0;
    double m2 = 0.0;

    static LinearPredictor erm(const ErmCoeffs& c) { return {c.alpha_tilde, c.beta_tilde, 0.0, 0.0}; }
    static LinearPredictor from_vector(const Vector& v);
};

enum class ContextMode {
    /// Environment means known exactly (long-context limit).
    full,
    /// No context; unobserved means default to zero.
    empty,
};

/// Expected squared error in a test environment with x2 mean test_mu2,
/// taking the within-environment covariance from `spec` and including the
/// noise variance.
double expected_test_error(const LinearEnvSpec& spec, const LinearPredictor& predictor, double test_mu2,
                           ContextMode mode);

/// The same error, estimated from n simulated test samples.
struct McError {
    double mean = 0.0;
    double std_error = 0.0;
};
McError mc_test_error(const LinearEnvSpec& spec, const LinearPredictor& predictor, double test_mu2, ContextMode mode,
                      std::size_t n, std::uint64_t seed);

struct ErrorCurvePoint {
    double sigma1_sq = 0.0;
    double error = 0.0;
};

/// Coefficients stay frozen while sigma1^2 sweeps the grid.
std::vector<ErrorCurvePoint> test_error_curve(const LinearEnvSpec& spec, const LinearPredictor& predictor,
                                              const std::vector<double>& sigma1_grid, double test_mu2,
                                              ContextMode mode);

struct InvarianceRow {
    double sigma1_sq = 0.0;
    double erm_error = 0.0;
    double icrm_full_context_error = 0.0;
    double icrm_empty_context_error = 0.0;
};

/// ERM at population coefficients versus the invariant extended-feature
/// predictor, over a sigma1^2 grid.
std::vector<InvarianceRow> invariance_report(const LinearEnvSpec& spec, const std::vector<double>& sigma1_grid,
                                             double test_mu2);
std::string invariance_csv(const std::vector<InvarianceRow>& rows);

// --- nonlinear extension: y = p(x1, mu2) + eps, x2 = q(mu2, noise) ------------

struct NonlinearTables {
    std::vector<double> x1_probs;  ///< P(x1), independent of the environment
    std::vector<double> mu2_probs; ///< P(mu2) over training environments
    Matrix p;                      ///< p(x1, mu2): |x1| x |mu2|
    Matrix q;                      ///< P(x2 | mu2): |mu2| x |x2|
    /// mu1^e is identically zero in this setting; kept so the table is explicit.
    double mu1 = 0.0;
};

struct NonlinearReport {
    /// E[y | x1, x2, mu1, mu2] over (x1, x2, mu2); NaN where the cell has no mass.
    std::vector<Matrix> icrm_table;
    /// E[y | x1, x2]: |x1| x |x2|; NaN where the cell has no mass.
    Matrix erm_table;
    /// Largest |icrm_table - p| over supported cells.
    double icrm_max_deviation = 0.0;
    /// Largest spread of E[y | x1, x2] across x2 for fixed x1, with its witness.
    double erm_x2_spread = 0.0;
    int witness_x1 = -1;
    int witness_x2_a = -1;
    int witness_x2_b = -1;
    /// In-distribution mean squared error of the ERM table (noise excluded).
    double erm_in_distribution_mse = 0.0;
};

NonlinearReport nonlinear_invariance_demo(const NonlinearTables& tables);

/// ERM table trained on `train`, evaluated on an environment with mu2 index
/// `heldout` (whose probability in `train.mu2_probs` must be zero). Returns
/// the mean squared gap to p(x1, heldout) over x1 and x2 ~ q(heldout).
/// ICRM, which reads mu2 directly, has zero gap by construction.
double nonlinear_ood_gap(const NonlinearTables& train, int heldout);

}  // namespace icrm::linear
