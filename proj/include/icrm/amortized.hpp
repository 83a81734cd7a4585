#pragma once

// Trainable in-context learners.
//
// The attention learner is a single-head softmax attention over the context with
// scores -||x - x_j||^2 / tau. Each context item contributes a value vector
// (x_j, sigmoid(kappa (x_j - x))): its raw input plus a query-relative
// comparison. A linear head reads (x, attended inputs, attended comparisons).
// All gradients are analytic.
//
// The mean-embedding predictor is the marginal-transfer baseline: a frozen random feature
// map Phi averaged over the context, followed by a linear head. It cannot
// condition the context summary on the query.

#include "icrm/common.hpp"
#include "icrm/env_core.hpp"
#include "icrm/linear_invariance.hpp"

#include <cstdint>
#include <functional>
#include <optional>
#include <string>
#include <vector>

namespace icrm::amortized {

struct AttentionParams {
    double log_tau = 0.0;
    double log_kappa = 0.0;
    /// Over (x, attended x_j, attended comparisons); length 3d.
    Vector head;
    double bias = 0.0;

    Eigen::Index dim() const noexcept { return head.size() / 3; }
    double tau() const { return std::exp(log_tau); }
    double kappa() const { return std::exp(log_kappa); }

    static AttentionParams zeros(Eigen::Index dim, double tau = 1.0, double kappa = 1.0);
    static AttentionParams random(Eigen::Index dim, Rng& rng, double scale = 0.1, double tau = 1.0, double kappa = 1.0);

    /// (head..., bias, log_tau, log_kappa)
    Vector pack() const;
    static AttentionParams unpack(const Vector& flat, Eigen::Index dim);

    std::string to_json_string() const;
    static AttentionParams from_json_string(const std::string& text);
};

struct AttentionOutput {
    double value = 0.0;
    Vector weights;      ///< softmax over context items (empty for empty context)
    Vector attended_x;   ///< sum_j w_j x_j, zero for empty context
    Vector attended_cmp; ///< sum_j w_j sigmoid(kappa (x_j - x)), zero for empty context
};

AttentionOutput attention_forward(const Vector& x, const env::ContextWindow& context, const AttentionParams& params);

enum class LossKind {
    /// (out - target)^2
    squared,
    /// Binary cross-entropy with out as the logit of label 1.
    logistic,
};

double pointwise_loss(double out, double target, LossKind kind);

/// One supervised item: predict `target` from `query` given `context`.
struct TrainingItem {
    Vector query;
    env::ContextWindow context;
    double target = 0.0;
};

/// Expands a sequence into its autoregressive items: position j sees
/// inputs[0..j). Positions with fewer than `min_context` items are skipped.
std::vector<TrainingItem> autoregressive_items(const std::vector<Vector>& inputs, const std::vector<double>& targets,
                                               std::size_t min_context = 0);

/// Sum of pointwise losses over the items.
double attention_loss(const std::vector<TrainingItem>& items, const AttentionParams& params, LossKind kind);

/// Gradient of attention_loss with respect to AttentionParams::pack().
Vector attention_grad(const std::vector<TrainingItem>& items, const AttentionParams& params, LossKind kind);

/// Autoregressive squared loss over a real-valued sequence and its gradient.
double attention_sequence_loss(const std::vector<Vector>& inputs, const std::vector<double>& targets,
                               const AttentionParams& params, LossKind kind);
Vector attention_sequence_grad(const std::vector<Vector>& inputs, const std::vector<double>& targets,
                               const AttentionParams& params, LossKind kind);

/// Produces one minibatch per call.
using TaskGenerator = std::function<std::vector<TrainingItem>(Rng&)>;

struct TrainConfig {
    int steps = 1000;
    double learning_rate = 0.05;
    std::uint64_t seed = 0;
    LossKind loss = LossKind::squared;
    double divergence_threshold = 1e6;
    /// Learning-rate multiplier for log_tau and log_kappa.
    double scale_lr_multiplier = 1.0;
};

struct TrainResult {
    AttentionParams params;
    /// Mean minibatch loss before each step.
    std::vector<double> loss_trace;
};

class DivergenceError : public NumericalError {
public:
    DivergenceError(int step, double loss, std::vector<double> trace);
    int step;
    std::vector<double> trace;
};

/// Plain gradient descent on the mean minibatch loss.
TrainResult train(const TaskGenerator& generator, AttentionParams init, const TrainConfig& config);

std::string loss_trace_csv(const std::vector<double>& trace);

// --- marginal transfer baseline ---------------------------------------------

/// Phi(x) = act(A x + c).
struct FeatureMap {
    enum class Activation { identity, tanh };
    Matrix a;
    Vector c;
    Activation activation = Activation::tanh;

    Eigen::Index input_dim() const noexcept { return a.cols(); }
    Eigen::Index output_dim() const noexcept { return a.rows(); }
    Vector operator()(const Vector& x) const;
    /// d Phi / d x, output_dim x input_dim.
    Matrix jacobian(const Vector& x) const;

    static FeatureMap identity(Eigen::Index dim);
    /// Random affine map followed by tanh.
    static FeatureMap random(Eigen::Index input_dim, Eigen::Index k, Rng& rng, double scale = 3.0);
};

struct MeanEmbedParams {
    FeatureMap phi;
    /// Over (x, pooled embedding); length d + k.
    Vector head;
    double bias = 0.0;

    Eigen::Index k() const noexcept { return phi.output_dim(); }
    /// Head entries acting on the pooled embedding.
    Vector pooled_head() const { return head.tail(k()); }
};

/// Mean of Phi over the context; zeros for an empty context.
Vector pooled_embedding(const FeatureMap& phi, const env::ContextWindow& context);

double mean_embed_forward(const Vector& x, const env::ContextWindow& context, const MeanEmbedParams& params);

/// Least-squares head (with bias) on the items.
MeanEmbedParams mean_embed_train(const std::vector<TrainingItem>& items, FeatureMap phi);

// --- rank counting task -------------------------------------------------------

struct RankTaskInstance {
    std::vector<double> context;
    std::vector<double> queries;
    /// Number of context items strictly greater than each query.
    std::vector<int> labels;
};

int rank_label(double query, const std::vector<double>& context);

/// Context and queries uniform on [0, 1].
RankTaskInstance make_rank_instance(std::size_t context_length, std::size_t queries, Rng& rng);

std::vector<TrainingItem> rank_items(const RankTaskInstance& instance);

env::ContextWindow scalar_context(const std::vector<double>& values);

struct CollisionResult {
    bool found = false;
    std::vector<double> context_a;
    std::vector<double> context_b;
    double query = 0.0;
    int label_a = 0;
    int label_b = 0;
    /// ||sum Phi(C) - sum Phi(C')||_inf
    double embedding_gap = 0.0;
    std::size_t evaluations = 0;

    int label_gap() const { return std::abs(label_a - label_b); }
};

/// Evaluates a given pair: embedding gap and the query with the largest label gap
/// (or `query` when supplied).
CollisionResult check_collision(const FeatureMap& phi, const std::vector<double>& a, const std::vector<double>& b,
                                std::optional<double> query = std::nullopt);

/// Randomized search for equal-length contexts with (near-)equal summed
/// embeddings but different rank labels for some query. `budget` caps the
/// number of Phi evaluations.
CollisionResult embedding_collision_search(const FeatureMap& phi, std::size_t context_length, std::uint64_t seed,
                                           std::size_t budget, double tolerance = 1e-6);

/// One-sided sign test: P(Binomial(n, 1/2) >= wins).
double sign_test_p_value(int wins, int n);

struct RankComparison {
    double attention_mae = 0.0;
    double mean_embed_mae = 0.0;
    AttentionParams attention;
    std::vector<double> loss_trace;
};

struct RankExperimentConfig {
    std::size_t context_length = 16;
    std::size_t queries_per_instance = 8;
    std::size_t train_instances = 2000;
    std::size_t test_instances = 500;
    Eigen::Index embed_dim = 2;
    int steps = 1500;
    int batch_instances = 16;
    double learning_rate = 0.2;
};

/// Trains both predictors on the same data and scores them on a held-out split.
RankComparison run_rank_comparison(std::uint64_t seed, const RankExperimentConfig& config = {});

// --- linear-invariance task -----------------------------------------------------

struct LinearAttentionConfig {
    std::size_t sequence_length = 100;
    /// Positions with shorter contexts do not contribute to the training loss.
    std::size_t min_context = 0;
    int sequences_per_step = 8;
    int steps = 2000;
    double learning_rate = 0.01;
    std::size_t test_context = 500;
    std::size_t test_queries = 500;
    int test_contexts = 8;
};

struct LinearAttentionResult {
    /// Mean squared error at test_context, averaged over test contexts.
    double test_error = 0.0;
    double test_error_se = 0.0;
    /// Population ERM expected error in the same test environment.
    double erm_error = 0.0;
    AttentionParams params;
    std::vector<double> loss_trace;
};

/// Trains on environment-pure sequences from the training mu2 distribution and
/// evaluates in an environment with mean test_mu2.
LinearAttentionResult run_linear_attention(const linear::LinearEnvSpec& spec, double test_mu2, std::uint64_t seed,
                                           const LinearAttentionConfig& config = {});

}  // namespace icrm::amortized
