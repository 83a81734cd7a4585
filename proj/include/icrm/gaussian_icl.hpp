#pragma once

// In-context prediction for unseen Gaussian environments:
//   1. per-(environment, label) Gaussian MLE on labelled training data;
//   2. two-component EM on the unlabelled test context;
//   3. match the fitted components to the nearest training environment,
//      trying both component orders;
//   4. predict with the class posterior of the oriented mixture.

#include "icrm/common.hpp"
#include "icrm/env_core.hpp"
#include "icrm/gaussian_dgp.hpp"

#include <array>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

namespace icrm::gaussian {

struct MleFit {
    EnvParams params;
    /// A class covariance fell below the SPD floor and was lifted.
    bool floored = false;
};

/// Class frequencies plus per-class mean and covariance (denominator n).
MleFit fit_env_params_mle(std::span<const env::LabeledExample> examples, bool diagonal_only = false,
                          double cov_floor = 1e-6);

struct EmConfig {
    int restarts = 5;
    int max_iter = 500;
    double tol = 1e-8;
    /// Eigenvalue floor for component covariances.
    double cov_floor = 1e-6;
    bool diagonal_only = false;
    unsigned threads = 1;
};

struct GmmFit {
    std::array<double, 2> weights{};
    std::array<Vector, 2> means;
    std::array<Matrix, 2> covs;
    double log_likelihood = 0.0;
    int iterations = 0;
    bool converged = false;
    /// All context points coincide; both components sit on that point.
    bool degenerate = false;
    /// Log-likelihood after each E-step of the winning restart.
    std::vector<double> ll_trace;
    int restart_index = 0;
    std::vector<double> restart_log_likelihoods;

    EnvParams as_env_params(bool diagonal_only = false) const;
};

/// Best of `config.restarts` EM runs from k-means++ seeding.
GmmFit fit_gmm_em(std::span<const Vector> context, std::uint64_t init_seed, const EmConfig& config = {});

struct TrainedEnv {
    int env_id = 0;
    EnvParams params;
};

struct MatchedModel {
    /// Oriented so that index 0 is label 0.
    EnvParams params;
    int source_env = 0;
    Orientation orientation = Orientation::unswapped;
    double distance = 0.0;
};

MatchedModel match_and_orient(const GmmFit& fit, const std::vector<TrainedEnv>& train,
                              const DistanceWeights& weights = std::nullopt);

enum class PosteriorForm {
    /// p^y N(x; mu^y, Sigma^y), full normalized densities.
    normalized,
    /// p^y exp(-||x - mu^y||^2_{Sigma^-1}) without determinant or 1/2 factor.
    unnormalized,
};

/// P(y = 0 | x) under the given two-class parameters, computed in log space.
double label0_posterior(const Vector& x, const EnvParams& params, PosteriorForm form = PosteriorForm::normalized);

double predict_label0_prob(const Vector& x, const MatchedModel& model, PosteriorForm form = PosteriorForm::normalized);

double bayes_oracle_prob(const Vector& x, const EnvParams& truth, PosteriorForm form = PosteriorForm::normalized);

/// Trained per-environment parameters, reusable across runs.
struct ModelBundle {
    std::vector<TrainedEnv> envs;
    bool any_floored = false;

    std::vector<EnvParams> params() const;
    std::string to_json_string() const;
    static ModelBundle from_json_string(const std::string& text);
};

ModelBundle train_bundle(const env::Dataset& data, bool diagonal_only = false);

/// Regular grid over the box [lo, hi] in every coordinate.
std::vector<Vector> query_grid(Eigen::Index dim, double lo, double hi, int points_per_axis);

struct OodEvaluation {
    MatchedModel model;
    GmmFit fit;
    bool in_cell = false;
    /// Fraction of high-margin queries where the decision matches the oracle.
    double agreement = 0.0;
    std::size_t high_margin_queries = 0;
    double sup_gap = 0.0;
    double mean_gap = 0.0;
    /// Accuracy on labelled draws from the test environment, and the oracle's.
    double accuracy = 0.0;
    double oracle_accuracy = 0.0;
};

struct OodOptions {
    std::size_t context_length = 2000;
    /// A query is high-margin when |oracle - 0.5| >= margin.
    double margin = 0.1;
    std::size_t accuracy_samples = 2000;
    EmConfig em;
    PosteriorForm form = PosteriorForm::normalized;
};

OodEvaluation evaluate_ood(const ModelBundle& bundle, const EnvParams& test, std::span<const Vector> queries,
                           std::uint64_t seed, const OodOptions& options = {});

}  // namespace icrm::gaussian
