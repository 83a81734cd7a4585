#include "icrm/env_core.hpp"

#include <json.hpp>

#include <algorithm>

#include <cmath>
#include <fstream>
#include <sstream>

namespace icrm::env {

ContextWindow Sequence::context_before(std::size_t j) const {
    ContextWindow c;
    c.items.assign(inputs.begin(), inputs.begin() + static_cast<std::ptrdiff_t>(j));
    if (!envs.empty() && provenance == Provenance::icrm) c.env_hint = envs.front();
    return c;
}

// ---------------------------------------------------------------------------

PredictiveDistribution::PredictiveDistribution(Vector probs) : probs_(std::move(probs)) {
    if (probs_.size() == 0) throw InvalidArgument("predictive distribution over zero labels");
    for (double p : probs_) {
        if (!(p >= 0.0 && p <= 1.0)) throw InvalidArgument("probability outside [0,1]");
    }
    if (std::abs(probs_.sum() - 1.0) > kSimplexTol) {
        throw InvalidArgument("probabilities do not sum to one");
    }
}

PredictiveDistribution PredictiveDistribution::binary(double p1) {
    Vector v(2);
    v << 1.0 - p1, p1;
    return PredictiveDistribution(std::move(v));
}

PredictiveDistribution PredictiveDistribution::uniform(int k) {
    return PredictiveDistribution(Vector::Constant(k, 1.0 / k));
}

double PredictiveDistribution::entropy() const { return entropy_nats(probs_); }

double PredictiveDistribution::cross_entropy(int label) const {
    return -std::log(std::clamp(probs_(label), kClampLo, kClampHi));
}

bool PredictiveDistribution::clamps(int label) const {
    const double p = probs_(label);
    return p < kClampLo || p > kClampHi;
}

// ---------------------------------------------------------------------------

Dataset::Dataset(std::vector<LabeledExample> examples, int num_labels)
    : examples_(std::move(examples)), num_labels_(num_labels) {
    if (num_labels_ < 1) throw InvalidArgument("num_labels must be positive");
    for (std::size_t i = 0; i < examples_.size(); ++i) {
        const auto& ex = examples_[i];
        if (i == 0) dim_ = ex.x.size();
        if (ex.x.size() != dim_ || dim_ == 0) {
            throw InvalidArgument("example " + std::to_string(i) + " has dimension " +
                                  std::to_string(ex.x.size()) + ", expected " + std::to_string(dim_));
        }
        if (!ex.x.allFinite()) throw InvalidArgument("example " + std::to_string(i) + " has non-finite x");
        if (ex.y < 0 || ex.y >= num_labels_) {
            throw InvalidArgument("example " + std::to_string(i) + " label out of range");
        }
        by_env_[ex.e].push_back(i);
    }
}

std::vector<int> Dataset::environments() const {
    std::vector<int> out;
    for (const auto& [e, _] : by_env_) out.push_back(e);
    return out;
}

const std::vector<std::size_t>& Dataset::indices_of(int e) const {
    auto it = by_env_.find(e);
    if (it == by_env_.end()) throw InvalidArgument("unknown environment id " + std::to_string(e));
    return it->second;
}

Dataset Dataset::parse_jsonl(const std::string& text, std::optional<int> num_labels) {
    std::vector<LabeledExample> out;
    std::istringstream in(text);
    std::string line;
    int max_label = -1;
    std::size_t lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
        nlohmann::json j;
        try {
            j = nlohmann::json::parse(line);
        } catch (const nlohmann::json::exception& ex) {
            throw InvalidArgument("line " + std::to_string(lineno) + ": " + ex.what());
        }
        if (!j.is_object() || !j.contains("x") || !j.contains("y") || !j.contains("e") ||
            !j["x"].is_array() || !j["y"].is_number_integer() || !j["e"].is_number_integer()) {
            throw InvalidArgument("line " + std::to_string(lineno) + ": expected {\"x\":[...],\"y\":int,\"e\":int}");
        }
        LabeledExample ex;
        const auto xs = j["x"].get<std::vector<double>>();
        ex.x = Eigen::Map<const Vector>(xs.data(), static_cast<Eigen::Index>(xs.size()));
        ex.y = j["y"].get<int>();
        ex.e = j["e"].get<int>();
        max_label = std::max(max_label, ex.y);
        out.push_back(std::move(ex));
    }
    return Dataset(std::move(out), num_labels.value_or(std::max(max_label + 1, 1)));
}

Dataset Dataset::load_jsonl(const std::string& path, std::optional<int> num_labels) {
    std::ifstream f(path);
    if (!f) throw InvalidArgument("cannot open dataset file " + path);
    std::stringstream ss;
    ss << f.rdbuf();
    return parse_jsonl(ss.str(), num_labels);
}

std::string Dataset::to_jsonl() const {
    std::string out;
    for (const auto& ex : examples_) {
        nlohmann::json j;
        j["x"] = std::vector<double>(ex.x.data(), ex.x.data() + ex.x.size());
        j["y"] = ex.y;
        j["e"] = ex.e;
        out += j.dump();
        out += '\n';
    }
    return out;
}

void Dataset::save_jsonl(const std::string& path) const {
    std::ofstream f(path);
    if (!f) throw InvalidArgument("cannot write dataset file " + path);
    f << to_jsonl();
}

// ---------------------------------------------------------------------------

namespace {

Sequence draw(const Dataset& data, const std::vector<std::size_t>& pool, std::size_t t,
              std::uint64_t seed, Provenance prov) {
    Rng rng(seed);
    std::uniform_int_distribution<std::size_t> pick(0, pool.size() - 1);
    Sequence s;
    s.provenance = prov;
    s.inputs.reserve(t);
    s.targets.reserve(t);
    s.envs.reserve(t);
    for (std::size_t i = 0; i < t; ++i) {
        const auto& ex = data.examples()[pool[pick(rng)]];
        s.inputs.push_back(ex.x);
        s.targets.push_back(ex.y);
        s.envs.push_back(ex.e);
    }
    return s;
}

}  // namespace

Sequence sample_icrm_sequence(const Dataset& data, int env, std::size_t t, std::uint64_t seed) {
    if (t == 0) throw InvalidArgument("sequence length must be positive");
    return draw(data, data.indices_of(env), t, seed, Provenance::icrm);
}

Sequence sample_mix_sequence(const Dataset& data, std::size_t t, std::uint64_t seed) {
    if (data.empty()) throw InvalidArgument("cannot sample from an empty dataset");
    if (t == 0) throw InvalidArgument("sequence length must be positive");
    std::vector<std::size_t> all(data.examples().size());
    for (std::size_t i = 0; i < all.size(); ++i) all[i] = i;
    return draw(data, all, t, seed, Provenance::icrm_mix);
}

// ---------------------------------------------------------------------------

InfiniteLossError::InfiniteLossError(std::size_t step, int label)
    : Error("predictor assigned zero probability to label " + std::to_string(label) +
            " at step " + std::to_string(step)),
      step_(step) {}

LossBreakdown autoregressive_loss_detailed(const Predictor& predictor, const Sequence& seq) {
    if (seq.inputs.size() != seq.targets.size()) {
        throw InvalidArgument("sequence inputs and targets differ in length");
    }
    LossBreakdown out;
    out.per_step.reserve(seq.size());
    ContextWindow ctx;
    if (!seq.envs.empty() && seq.provenance == Provenance::icrm) ctx.env_hint = seq.envs.front();
    for (std::size_t j = 0; j < seq.size(); ++j) {
        const auto dist = predictor(seq.inputs[j], ctx);
        const int y = seq.targets[j];
        if (y < 0 || y >= dist.num_labels()) throw InvalidArgument("target label outside predictor support");
        if (dist[y] == 0.0) throw InfiniteLossError(j, y);
        if (dist.clamps(y)) ++out.clamped_steps;
        const double l = dist.cross_entropy(y);
        out.per_step.push_back(l);
        out.total += l;
        ctx.items.push_back(seq.inputs[j]);
    }
    return out;
}

double autoregressive_loss(const Predictor& predictor, const Sequence& seq) {
    return autoregressive_loss_detailed(predictor, seq).total;
}

}  // namespace icrm::env
