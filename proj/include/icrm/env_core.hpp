#pragma once

// Environment-indexed datasets, ICRM / ICRM-Mix sequence samplers and the
// autoregressive loss harness shared by every predictor.

#include "icrm/common.hpp"

#include <cstdint>
#include <functional>
#include <map>
#include <optional>
#include <string>
#include <vector>

namespace icrm::env {

struct LabeledExample {
    Vector x;
    int y = 0;
    int e = 0;
};

/// Ordered unlabeled inputs seen before a query. Empty is the zoom-out case.
struct ContextWindow {
    std::vector<Vector> items;
    /// Diagnostics only; predictors never read it.
    std::optional<int> env_hint;

    std::size_t size() const noexcept { return items.size(); }
    bool empty() const noexcept { return items.empty(); }
};

enum class Provenance { icrm, icrm_mix };

struct Sequence {
    std::vector<Vector> inputs;
    std::vector<int> targets;
    /// Source environment of each item.
    std::vector<int> envs;
    Provenance provenance = Provenance::icrm;

    std::size_t size() const noexcept { return inputs.size(); }
    /// Context preceding position j: inputs[0..j).
    ContextWindow context_before(std::size_t j) const;
};

/// Probability vector over K labels. Construction validates the simplex.
class PredictiveDistribution {
public:
    static constexpr double kSimplexTol = 1e-12;
    static constexpr double kClampLo = 1e-12;
    static constexpr double kClampHi = 1.0 - 1e-12;

    explicit PredictiveDistribution(Vector probs);
    static PredictiveDistribution binary(double p1);
    static PredictiveDistribution uniform(int k);

    const Vector& probs() const noexcept { return probs_; }
    int num_labels() const noexcept { return static_cast<int>(probs_.size()); }
    double operator[](int label) const { return probs_(label); }

    double entropy() const;
    /// -ln p(label) with p clamped to [kClampLo, kClampHi].
    double cross_entropy(int label) const;
    /// True when cross_entropy(label) had to clamp.
    bool clamps(int label) const;

private:
    Vector probs_;
};

using Predictor = std::function<PredictiveDistribution(const Vector&, const ContextWindow&)>;

/// Examples grouped by environment, with a fixed input dimension and
/// label count.
class Dataset {
public:
    Dataset() = default;
    Dataset(std::vector<LabeledExample> examples, int num_labels);

    const std::vector<LabeledExample>& examples() const noexcept { return examples_; }
    Eigen::Index dim() const noexcept { return dim_; }
    int num_labels() const noexcept { return num_labels_; }
    bool empty() const noexcept { return examples_.empty(); }
    std::vector<int> environments() const;
    bool has_environment(int e) const { return by_env_.count(e) != 0; }
    const std::vector<std::size_t>& indices_of(int e) const;

    /// JSON-lines, one {"x":[...],"y":int,"e":int} per line.
    static Dataset load_jsonl(const std::string& path, std::optional<int> num_labels = std::nullopt);
    static Dataset parse_jsonl(const std::string& text, std::optional<int> num_labels = std::nullopt);
    std::string to_jsonl() const;
    void save_jsonl(const std::string& path) const;

private:
    std::vector<LabeledExample> examples_;
    std::map<int, std::vector<std::size_t>> by_env_;
    Eigen::Index dim_ = 0;
    int num_labels_ = 0;
};

/// t draws with replacement from environment `env`.
Sequence sample_icrm_sequence(const Dataset& data, int env, std::size_t t, std::uint64_t seed);

/// t draws with replacement from the pooled dataset.
Sequence sample_mix_sequence(const Dataset& data, std::size_t t, std::uint64_t seed);

/// Raised when a predictor assigns exactly zero probability to the observed
/// label, so the loss would be infinite.
class InfiniteLossError : public Error {
public:
    InfiniteLossError(std::size_t step, int label);
    std::size_t step() const noexcept { return step_; }

private:
    std::size_t step_;
};

struct LossBreakdown {
    double total = 0.0;
    std::vector<double> per_step;
    std::size_t clamped_steps = 0;
};

/// Sum over positions j of -ln h(x_j; c_j)[y_j], c_1 empty.
LossBreakdown autoregressive_loss_detailed(const Predictor& predictor, const Sequence& seq);
double autoregressive_loss(const Predictor& predictor, const Sequence& seq);

}  // namespace icrm::env
