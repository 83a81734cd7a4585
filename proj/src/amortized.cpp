#include "icrm/amortized.hpp"

#include <json.hpp>

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <limits>

namespace icrm::amortized {

namespace {

double sigmoid(double z) {
    if (z >= 0) return 1.0 / (1.0 + std::exp(-z));
    const double e = std::exp(z);
    return e / (1.0 + e);
}

double softplus(double z) { return z > 0 ? z + std::log1p(std::exp(-z)) : std::log1p(std::exp(z)); }

void check_dims(const Vector& x, const env::ContextWindow& c, Eigen::Index d) {
    if (x.size() != d) throw InvalidArgument("query dimension does not match the attention head");
    for (const auto& item : c.items) {
        if (item.size() != d) throw InvalidArgument("context item dimension does not match the query");
    }
}

struct ForwardCache {
    AttentionOutput out;
    std::vector<Vector> cmp;  // sigmoid(kappa (x_j - x)) per item
    Vector scores;
};

ForwardCache forward_cached(const Vector& x, const env::ContextWindow& context, const AttentionParams& p) {
    const Eigen::Index d = p.dim();
    check_dims(x, context, d);
    ForwardCache fc;
    fc.out.attended_x = Vector::Zero(d);
    fc.out.attended_cmp = Vector::Zero(d);
    const auto n = static_cast<Eigen::Index>(context.size());
    if (n > 0) {
        const double tau = p.tau();
        const double kappa = p.kappa();
        fc.scores.resize(n);
        for (Eigen::Index j = 0; j < n; ++j) fc.scores(j) = -(x - context.items[static_cast<std::size_t>(j)]).squaredNorm() / tau;
        const double lse = log_sum_exp(fc.scores);
        fc.out.weights = (fc.scores.array() - lse).exp().matrix();
        fc.cmp.reserve(context.size());
        for (Eigen::Index j = 0; j < n; ++j) {
            const Vector& xj = context.items[static_cast<std::size_t>(j)];
            Vector g = (kappa * (xj - x)).unaryExpr([](double z) { return sigmoid(z); });
            fc.out.attended_x += fc.out.weights(j) * xj;
            fc.out.attended_cmp += fc.out.weights(j) * g;
            fc.cmp.push_back(std::move(g));
        }
    }
    fc.out.value = p.head.segment(0, d).dot(x) + p.head.segment(d, d).dot(fc.out.attended_x) +
                   p.head.segment(2 * d, d).dot(fc.out.attended_cmp) + p.bias;
    return fc;
}

double loss_derivative(double out, double target, LossKind kind) {
    return kind == LossKind::squared ? 2.0 * (out - target) : sigmoid(out) - target;
}

/// d value / d pack() for one query.
Vector value_grad(const Vector& x, const env::ContextWindow& context, const AttentionParams& p, const ForwardCache& fc) {
    const Eigen::Index d = p.dim();
    Vector g = Vector::Zero(3 * d + 3);
    g.segment(0, d) = x;
    g.segment(d, d) = fc.out.attended_x;
    g.segment(2 * d, d) = fc.out.attended_cmp;
    g(3 * d) = 1.0;
    const auto n = static_cast<Eigen::Index>(context.size());
    if (n == 0) return g;
    const Vector h_a = p.head.segment(d, d);
    const Vector h_r = p.head.segment(2 * d, d);
    const double kappa = p.kappa();
    Vector u(n);
    for (Eigen::Index j = 0; j < n; ++j) {
        u(j) = h_a.dot(context.items[static_cast<std::size_t>(j)]) + h_r.dot(fc.cmp[static_cast<std::size_t>(j)]);
    }
    const double u_bar = fc.out.weights.dot(u);
    double d_log_tau = 0.0;
    double d_log_kappa = 0.0;
    for (Eigen::Index j = 0; j < n; ++j) {
        const double w = fc.out.weights(j);
        // ds_j / dlog_tau = -s_j
        d_log_tau += w * (u(j) - u_bar) * (-fc.scores(j));
        const Vector& gj = fc.cmp[static_cast<std::size_t>(j)];
        const Vector diff = context.items[static_cast<std::size_t>(j)] - x;
        d_log_kappa += w * kappa * (h_r.array() * gj.array() * (1.0 - gj.array()) * diff.array()).sum();
    }
    g(3 * d + 1) = d_log_tau;
    g(3 * d + 2) = d_log_kappa;
    return g;
}

}  // namespace

// ---------------------------------------------------------------------------

AttentionParams AttentionParams::zeros(Eigen::Index dim, double tau, double kappa) {
    if (dim < 1 || !(tau > 0.0) || !(kappa > 0.0)) throw InvalidArgument("attention needs dim >= 1, tau > 0, kappa > 0");
    AttentionParams p;
    p.head = Vector::Zero(3 * dim);
    p.log_tau = std::log(tau);
    p.log_kappa = std::log(kappa);
    return p;
}

AttentionParams AttentionParams::random(Eigen::Index dim, Rng& rng, double scale, double tau, double kappa) {
    AttentionParams p = zeros(dim, tau, kappa);
    p.head = scale * standard_normal(rng, 3 * dim);
    p.bias = scale * standard_normal(rng, 1)(0);
    return p;
}

Vector AttentionParams::pack() const {
    Vector v(head.size() + 3);
    v.head(head.size()) = head;
    v(head.size()) = bias;
    v(head.size() + 1) = log_tau;
    v(head.size() + 2) = log_kappa;
    return v;
}

AttentionParams AttentionParams::unpack(const Vector& flat, Eigen::Index dim) {
    if (flat.size() != 3 * dim + 3) throw InvalidArgument("packed attention parameters have the wrong length");
    AttentionParams p;
    p.head = flat.head(3 * dim);
    p.bias = flat(3 * dim);
    p.log_tau = flat(3 * dim + 1);
    p.log_kappa = flat(3 * dim + 2);
    return p;
}

std::string AttentionParams::to_json_string() const {
    nlohmann::json j;
    j["log_tau"] = log_tau;
    j["log_kappa"] = log_kappa;
    j["head"] = std::vector<double>(head.data(), head.data() + head.size());
    j["bias"] = bias;
    return j.dump();
}

AttentionParams AttentionParams::from_json_string(const std::string& text) {
    try {
        const auto j = nlohmann::json::parse(text);
        AttentionParams p;
        p.log_tau = j.at("log_tau").get<double>();
        p.log_kappa = j.at("log_kappa").get<double>();
        const auto h = j.at("head").get<std::vector<double>>();
        if (h.empty() || h.size() % 3 != 0) throw InvalidArgument("attention head length must be a positive multiple of 3");
        p.head = Eigen::Map<const Vector>(h.data(), static_cast<Eigen::Index>(h.size()));
        p.bias = j.at("bias").get<double>();
        return p;
    } catch (const nlohmann::json::exception& ex) {
        throw InvalidArgument(std::string("attention params: ") + ex.what());
    }
}

AttentionOutput attention_forward(const Vector& x, const env::ContextWindow& context, const AttentionParams& params) {
    return forward_cached(x, context, params).out;
}

double pointwise_loss(double out, double target, LossKind kind) {
    if (kind == LossKind::squared) return (out - target) * (out - target);
    return softplus(out) - target * out;
}

std::vector<TrainingItem> autoregressive_items(const std::vector<Vector>& inputs, const std::vector<double>& targets,
                                               std::size_t min_context) {
    if (inputs.size() != targets.size()) throw InvalidArgument("inputs and targets differ in length");
    std::vector<TrainingItem> items;
    env::ContextWindow ctx;
    for (std::size_t j = 0; j < inputs.size(); ++j) {
        if (j >= min_context) items.push_back({inputs[j], ctx, targets[j]});
        ctx.items.push_back(inputs[j]);
    }
    return items;
}

double attention_loss(const std::vector<TrainingItem>& items, const AttentionParams& params, LossKind kind) {
    double total = 0.0;
    for (const auto& it : items) total += pointwise_loss(attention_forward(it.query, it.context, params).value, it.target, kind);
    return total;
}

Vector attention_grad(const std::vector<TrainingItem>& items, const AttentionParams& params, LossKind kind) {
    Vector g = Vector::Zero(params.head.size() + 3);
    for (const auto& it : items) {
        const auto fc = forward_cached(it.query, it.context, params);
        g += loss_derivative(fc.out.value, it.target, kind) * value_grad(it.query, it.context, params, fc);
    }
    return g;
}

double attention_sequence_loss(const std::vector<Vector>& inputs, const std::vector<double>& targets,
                               const AttentionParams& params, LossKind kind) {
    return attention_loss(autoregressive_items(inputs, targets), params, kind);
}

Vector attention_sequence_grad(const std::vector<Vector>& inputs, const std::vector<double>& targets,
                               const AttentionParams& params, LossKind kind) {
    return attention_grad(autoregressive_items(inputs, targets), params, kind);
}

DivergenceError::DivergenceError(int s, double loss, std::vector<double> t)
    : NumericalError("training diverged at step " + std::to_string(s) + " (loss " + std::to_string(loss) + ")"),
      step(s),
      trace(std::move(t)) {}

TrainResult train(const TaskGenerator& generator, AttentionParams init, const TrainConfig& config) {
    Rng rng(config.seed);
    TrainResult r{std::move(init), {}};
    const Eigen::Index d = r.params.dim();
    for (int step = 0; step < config.steps; ++step) {
        const auto batch = generator(rng);
        if (batch.empty()) throw InvalidArgument("task generator returned an empty batch");
        const double n = static_cast<double>(batch.size());
        const double loss = attention_loss(batch, r.params, config.loss) / n;
        r.loss_trace.push_back(loss);
        if (!std::isfinite(loss) || loss > config.divergence_threshold) {
            throw DivergenceError(step, loss, r.loss_trace);
        }
        Vector grad = attention_grad(batch, r.params, config.loss) / n;
        grad.tail(2) *= config.scale_lr_multiplier;
        r.params = AttentionParams::unpack(r.params.pack() - config.learning_rate * grad, d);
    }
    return r;
}

std::string loss_trace_csv(const std::vector<double>& trace) {
    std::string out = "step,loss\n";
    char buf[64];
    for (std::size_t i = 0; i < trace.size(); ++i) {
        std::snprintf(buf, sizeof(buf), "%zu,%.17g\n", i, trace[i]);
        out += buf;
    }
    return out;
}

// ---------------------------------------------------------------------------

Vector FeatureMap::operator()(const Vector& x) const {
    if (x.size() != a.cols()) throw InvalidArgument("feature map input dimension mismatch");
    Vector z = a * x + c;
    if (activation == Activation::tanh) z = z.array().tanh().matrix();
    return z;
}

Matrix FeatureMap::jacobian(const Vector& x) const {
    if (activation == Activation::identity) return a;
    const Vector t = (a * x + c).array().tanh().matrix();
    return (1.0 - t.array().square()).matrix().asDiagonal() * a;
}

FeatureMap FeatureMap::identity(Eigen::Index dim) {
    return FeatureMap{Matrix::Identity(dim, dim), Vector::Zero(dim), Activation::identity};
}

FeatureMap FeatureMap::random(Eigen::Index input_dim, Eigen::Index k, Rng& rng, double scale) {
    if (input_dim < 1 || k < 1) throw InvalidArgument("feature map needs positive dimensions");
    FeatureMap f;
    f.a.resize(k, input_dim);
    for (Eigen::Index i = 0; i < k; ++i) f.a.row(i) = scale * standard_normal(rng, input_dim).transpose();
    f.c = scale * standard_normal(rng, k);
    f.activation = Activation::tanh;
    return f;
}

Vector pooled_embedding(const FeatureMap& phi, const env::ContextWindow& context) {
    Vector s = Vector::Zero(phi.output_dim());
    if (context.empty()) return s;
    for (const auto& x : context.items) s += phi(x);
    return s / static_cast<double>(context.size());
}

double mean_embed_forward(const Vector& x, const env::ContextWindow& context, const MeanEmbedParams& params) {
    const Eigen::Index d = x.size();
    if (params.head.size() != d + params.k()) throw InvalidArgument("mean-embedding head has the wrong length");
    return params.head.head(d).dot(x) + params.head.tail(params.k()).dot(pooled_embedding(params.phi, context)) +
           params.bias;
}

MeanEmbedParams mean_embed_train(const std::vector<TrainingItem>& items, FeatureMap phi) {
    if (items.empty()) throw InvalidArgument("no training items");
    const Eigen::Index d = items.front().query.size();
    const Eigen::Index k = phi.output_dim();
    Matrix x(static_cast<Eigen::Index>(items.size()), d + k + 1);
    Vector y(static_cast<Eigen::Index>(items.size()));
    for (std::size_t i = 0; i < items.size(); ++i) {
        const auto r = static_cast<Eigen::Index>(i);
        x.row(r).head(d) = items[i].query.transpose();
        x.row(r).segment(d, k) = pooled_embedding(phi, items[i].context).transpose();
        x(r, d + k) = 1.0;
        y(r) = items[i].target;
    }
    const Vector sol = Eigen::CompleteOrthogonalDecomposition<Matrix>(x.transpose() * x).solve(x.transpose() * y);
    return MeanEmbedParams{std::move(phi), sol.head(d + k), sol(d + k)};
}

// ---------------------------------------------------------------------------

int rank_label(double query, const std::vector<double>& context) {
    return static_cast<int>(std::count_if(context.begin(), context.end(), [&](double v) { return query < v; }));
}

RankTaskInstance make_rank_instance(std::size_t context_length, std::size_t queries, Rng& rng) {
    std::uniform_real_distribution<double> u(0.0, 1.0);
    RankTaskInstance inst;
    for (std::size_t i = 0; i < context_length; ++i) inst.context.push_back(u(rng));
    for (std::size_t i = 0; i < queries; ++i) {
        inst.queries.push_back(u(rng));
        inst.labels.push_back(rank_label(inst.queries.back(), inst.context));
    }
    return inst;
}

env::ContextWindow scalar_context(const std::vector<double>& values) {
    env::ContextWindow c;
    for (double v : values) c.items.push_back(Vector::Constant(1, v));
    return c;
}

std::vector<TrainingItem> rank_items(const RankTaskInstance& inst) {
    std::vector<TrainingItem> items;
    const auto ctx = scalar_context(inst.context);
    for (std::size_t i = 0; i < inst.queries.size(); ++i) {
        items.push_back({Vector::Constant(1, inst.queries[i]), ctx, static_cast<double>(inst.labels[i])});
    }
    return items;
}

namespace {

Vector summed_embedding(const FeatureMap& phi, const std::vector<double>& xs, std::size_t& evals) {
    Vector s = Vector::Zero(phi.output_dim());
    for (double v : xs) s += phi(Vector::Constant(1, v));
    evals += xs.size();
    return s;
}

}  // namespace

CollisionResult check_collision(const FeatureMap& phi, const std::vector<double>& a, const std::vector<double>& b,
                                std::optional<double> query) {
    if (a.size() != b.size()) throw InvalidArgument("collision contexts must have the same length");
    if (phi.input_dim() != 1) throw InvalidArgument("rank contexts are scalar");
    CollisionResult r;
    r.context_a = a;
    r.context_b = b;
    r.embedding_gap = (summed_embedding(phi, a, r.evaluations) - summed_embedding(phi, b, r.evaluations)).lpNorm<Eigen::Infinity>();
    std::vector<double> candidates;
    if (query) {
        candidates.push_back(*query);
    } else {
        // Labels only change at context values, so midpoints of the merged
        // sorted values (plus the ends) cover every distinct query outcome.
        std::vector<double> all(a);
        all.insert(all.end(), b.begin(), b.end());
        std::sort(all.begin(), all.end());
        candidates.push_back(all.front() - 1.0);
        for (std::size_t i = 0; i + 1 < all.size(); ++i) {
            if (all[i] < all[i + 1]) candidates.push_back(0.5 * (all[i] + all[i + 1]));
        }
    }
    int best_gap = -1;
    for (double q : candidates) {
        const int la = rank_label(q, a), lb = rank_label(q, b);
        if (std::abs(la - lb) > best_gap) {
            best_gap = std::abs(la - lb);
            r.query = q;
            r.label_a = la;
            r.label_b = lb;
        }
    }
    return r;
}

CollisionResult embedding_collision_search(const FeatureMap& phi, std::size_t context_length, std::uint64_t seed,
                                           std::size_t budget, double tolerance) {
    if (phi.input_dim() != 1) throw InvalidArgument("rank contexts are scalar");
    if (static_cast<std::size_t>(phi.output_dim()) >= context_length) {
        throw InvalidArgument("collision search needs embedding dimension below the context length");
    }
    Rng rng(seed);
    std::uniform_real_distribution<double> u(0.0, 1.0);
    const auto L = static_cast<Eigen::Index>(context_length);
    CollisionResult best;
    best.embedding_gap = std::numeric_limits<double>::infinity();
    std::size_t evals = 0;

    while (evals < budget) {
        std::vector<double> a(context_length), b(context_length);
        for (auto& v : a) v = u(rng);
        for (auto& v : b) v = u(rng);
        const Vector target = summed_embedding(phi, a, evals);
        Vector resid = summed_embedding(phi, b, evals) - target;

        // Minimum-norm Newton steps on the underdetermined system sum Phi(b) = target.
        for (int it = 0; it < 50 && evals < budget; ++it) {
            if (resid.lpNorm<Eigen::Infinity>() < tolerance * 1e-3) break;
            Matrix jac(phi.output_dim(), L);
            for (Eigen::Index i = 0; i < L; ++i) jac.col(i) = phi.jacobian(Vector::Constant(1, b[static_cast<std::size_t>(i)])).col(0);
            evals += context_length;
            const Vector step = -jac.transpose() * (jac * jac.transpose()).ldlt().solve(resid);
            if (!step.allFinite()) break;
            double scale = 1.0;
            bool improved = false;
            for (int ls = 0; ls < 20 && evals < budget; ++ls) {
                std::vector<double> trial(b);
                for (Eigen::Index i = 0; i < L; ++i) trial[static_cast<std::size_t>(i)] += scale * step(i);
                const Vector r2 = summed_embedding(phi, trial, evals) - target;
                if (r2.norm() < resid.norm()) {
                    b = std::move(trial);
                    resid = r2;
                    improved = true;
                    break;
                }
                scale *= 0.5;
            }
            if (!improved) break;
        }

        auto cand = check_collision(phi, a, b);
        evals += cand.evaluations;
        if (cand.label_gap() >= 1 && cand.embedding_gap < best.embedding_gap) {
            best = std::move(cand);
            if (best.embedding_gap < tolerance) break;
        }
    }
    best.found = best.label_gap() >= 1 && best.embedding_gap < tolerance;
    best.evaluations = evals;
    return best;
}

double sign_test_p_value(int wins, int n) {
    if (n < 0 || wins < 0 || wins > n) throw InvalidArgument("sign test needs 0 <= wins <= n");
    double p = 0.0;
    for (int i = wins; i <= n; ++i) {
        p += std::exp(std::lgamma(n + 1.0) - std::lgamma(i + 1.0) - std::lgamma(n - i + 1.0) - n * std::log(2.0));
    }
    return std::min(1.0, p);
}

RankComparison run_rank_comparison(std::uint64_t seed, const RankExperimentConfig& cfg) {
    Rng data_rng(derive_seed(seed, 0));
    std::vector<RankTaskInstance> train_set, test_set;
    for (std::size_t i = 0; i < cfg.train_instances; ++i) {
        train_set.push_back(make_rank_instance(cfg.context_length, cfg.queries_per_instance, data_rng));
    }
    for (std::size_t i = 0; i < cfg.test_instances; ++i) {
        test_set.push_back(make_rank_instance(cfg.context_length, cfg.queries_per_instance, data_rng));
    }

    std::vector<TrainingItem> all_train;
    for (const auto& inst : train_set) {
        auto items = rank_items(inst);
        all_train.insert(all_train.end(), items.begin(), items.end());
    }
    Rng phi_rng(derive_seed(seed, 1));
    const MeanEmbedParams me = mean_embed_train(all_train, FeatureMap::random(1, cfg.embed_dim, phi_rng));

    TaskGenerator gen = [&](Rng& rng) {
        std::uniform_int_distribution<std::size_t> pick(0, train_set.size() - 1);
        std::vector<TrainingItem> batch;
        for (int b = 0; b < cfg.batch_instances; ++b) {
            auto items = rank_items(train_set[pick(rng)]);
            batch.insert(batch.end(), items.begin(), items.end());
        }
        return batch;
    };
    TrainConfig tc;
    tc.steps = cfg.steps;
    tc.learning_rate = cfg.learning_rate;
    tc.seed = derive_seed(seed, 2);
    auto trained = train(gen, AttentionParams::zeros(1, 100.0, 100.0), tc);

    RankComparison out{0.0, 0.0, trained.params, std::move(trained.loss_trace)};
    std::size_t n = 0;
    for (const auto& inst : test_set) {
        for (const auto& it : rank_items(inst)) {
            out.attention_mae += std::abs(attention_forward(it.query, it.context, out.attention).value - it.target);
            out.mean_embed_mae += std::abs(mean_embed_forward(it.query, it.context, me) - it.target);
            ++n;
        }
    }
    out.attention_mae /= static_cast<double>(n);
    out.mean_embed_mae /= static_cast<double>(n);
    return out;
}

// ---------------------------------------------------------------------------

namespace {

std::vector<Vector> sample_inputs(const std::vector<linear::LinearSample>& s, std::vector<double>* targets) {
    std::vector<Vector> xs;
    for (const auto& v : s) {
        Vector x(2);
        x << v.x1, v.x2;
        xs.push_back(std::move(x));
        if (targets) targets->push_back(v.y);
    }
    return xs;
}

}  // namespace

LinearAttentionResult run_linear_attention(const linear::LinearEnvSpec& spec, double test_mu2, std::uint64_t seed,
                                           const LinearAttentionConfig& cfg) {
    spec.validate();
    TaskGenerator gen = [&](Rng& rng) {
        std::discrete_distribution<int> env(spec.mu2_probs.begin(), spec.mu2_probs.end());
        std::vector<TrainingItem> batch;
        for (int s = 0; s < cfg.sequences_per_step; ++s) {
            const double mu2 = spec.mu2_values[static_cast<std::size_t>(env(rng))];
            std::vector<double> targets;
            const auto inputs = sample_inputs(linear::simulate_env(spec, mu2, cfg.sequence_length, rng), &targets);
            auto items = autoregressive_items(inputs, targets, cfg.min_context);
            batch.insert(batch.end(), std::make_move_iterator(items.begin()), std::make_move_iterator(items.end()));
        }
        return batch;
    };
    TrainConfig tc;
    tc.steps = cfg.steps;
    tc.learning_rate = cfg.learning_rate;
    tc.seed = derive_seed(seed, 0);
    auto trained = train(gen, AttentionParams::zeros(2, 1e3, 1.0), tc);

    LinearAttentionResult out;
    out.params = trained.params;
    out.loss_trace = std::move(trained.loss_trace);
    out.erm_error = linear::expected_test_error(spec, linear::LinearPredictor::erm(linear::population_erm_coeffs(spec)),
                                                test_mu2, linear::ContextMode::full);
    Rng test_rng(derive_seed(seed, 1));
    std::vector<double> per_context;
    for (int c = 0; c < cfg.test_contexts; ++c) {
        env::ContextWindow ctx;
        ctx.items = sample_inputs(linear::simulate_env(spec, test_mu2, cfg.test_context, test_rng), nullptr);
        std::vector<double> targets;
        const auto queries = sample_inputs(linear::simulate_env(spec, test_mu2, cfg.test_queries, test_rng), &targets);
        double se = 0.0;
        for (std::size_t i = 0; i < queries.size(); ++i) {
            const double r = attention_forward(queries[i], ctx, out.params).value - targets[i];
            se += r * r;
        }
        per_context.push_back(se / static_cast<double>(queries.size()));
    }
    double mean = 0.0;
    for (double v : per_context) mean += v;
    mean /= static_cast<double>(per_context.size());
    double var = 0.0;
    for (double v : per_context) var += (v - mean) * (v - mean);
    out.test_error = mean;
    out.test_error_se = per_context.size() > 1 ? std::sqrt(var / static_cast<double>(per_context.size() - 1) /
                                                           static_cast<double>(per_context.size()))
                                               : 0.0;
    return out;
}

}  // namespace icrm::amortized
