#include "icrm/discrete_zoom.hpp"

#include <json.hpp>

#include <algorithm>
#include <cmath>
#include <fstream>
#include <future>
#include <limits>
#include <sstream>

namespace icrm::discrete {

using nlohmann::json;

namespace {

constexpr double kNegInf = -std::numeric_limits<double>::infinity();

void check_row(const Eigen::Ref<const Vector>& row, const std::string& what) {
    if (row.size() == 0) throw InvalidArgument(what + ": empty alphabet");
    for (double p : row) {
        if (!(p >= 0.0 && p <= 1.0)) throw InvalidArgument(what + ": entry outside [0,1]");
    }
    if (std::abs(row.sum() - 1.0) > BayesNetSpec::kRowTol) {
        throw InvalidArgument(what + ": row does not sum to one");
    }
}

Matrix matrix_from_json(const json& j, const std::string& what) {
    if (!j.is_array() || j.empty()) throw InvalidArgument(what + ": expected a non-empty 2-d array");
    const auto rows = j.get<std::vector<std::vector<double>>>();
    Matrix m(static_cast<Eigen::Index>(rows.size()), static_cast<Eigen::Index>(rows.front().size()));
    for (std::size_t r = 0; r < rows.size(); ++r) {
        if (rows[r].size() != rows.front().size()) throw InvalidArgument(what + ": ragged rows");
        for (std::size_t c = 0; c < rows[r].size(); ++c) {
            m(static_cast<Eigen::Index>(r), static_cast<Eigen::Index>(c)) = rows[r][c];
        }
    }
    return m;
}

json matrix_to_json(const Matrix& m) {
    json out = json::array();
    for (Eigen::Index r = 0; r < m.rows(); ++r) {
        json row = json::array();
        for (Eigen::Index c = 0; c < m.cols(); ++c) row.push_back(m(r, c));
        out.push_back(std::move(row));
    }
    return out;
}

void check_symbol(const BayesNetSpec& spec, int s) {
    if (s < 0 || s >= spec.num_symbols()) {
        throw InvalidArgument("symbol " + std::to_string(s) + " outside the X alphabet");
    }
}

/// ln P(counts | e) for an ordered sequence with these counts (no multinomial factor).
Vector log_context_likelihood(const BayesNetSpec& spec, const Counts& counts) {
    Vector out = Vector::Zero(spec.num_envs());
    for (int e = 0; e < spec.num_envs(); ++e) {
        for (int a = 0; a < spec.num_symbols(); ++a) {
            if (counts[static_cast<std::size_t>(a)] == 0) continue;
            const double p = spec.x_given_e(e, a);
            out(e) += p > 0.0 ? counts[static_cast<std::size_t>(a)] * std::log(p) : kNegInf;
        }
    }
    return out;
}

double log_multinomial(const Counts& counts) {
    int total = 0;
    double out = 0.0;
    for (int n : counts) {
        total += n;
        out -= std::lgamma(n + 1.0);
    }
    return out + std::lgamma(total + 1.0);
}

/// Visits every composition of t into `parts` non-negative integers.
template <typename Fn>
void for_each_composition(int t, int parts, Fn&& fn) {
    Counts counts(static_cast<std::size_t>(parts), 0);
    auto rec = [&](auto& self, int idx, int remaining) -> void {
        if (idx == parts - 1) {
            counts[static_cast<std::size_t>(idx)] = remaining;
            fn(static_cast<const Counts&>(counts));
            return;
        }
        for (int n = remaining; n >= 0; --n) {
            counts[static_cast<std::size_t>(idx)] = n;
            self(self, idx + 1, remaining - n);
        }
    };
    rec(rec, 0, t);
}

/// Joint P(e, x, y) as |E| x |X| x |Y| visited by callback.
template <typename Fn>
void for_each_cell(const BayesNetSpec& spec, Fn&& fn) {
    for (int e = 0; e < spec.num_envs(); ++e)
        for (int x = 0; x < spec.num_symbols(); ++x)
            for (int y = 0; y < spec.num_labels(); ++y)
                fn(e, x, y, spec.env_prior(e) * spec.x_given_e(e, x) * spec.y_given_xe[static_cast<std::size_t>(e)](x, y));
}

double plogp_sum(const Eigen::Ref<const Matrix>& m) {
    double h = 0.0;
    for (Eigen::Index i = 0; i < m.size(); ++i) {
        const double p = m.data()[i];
        if (p > 0.0) h -= p * std::log(p);
    }
    return h;
}

}  // namespace

// ---------------------------------------------------------------------------

void BayesNetSpec::validate() const {
    if (env_prior.size() == 0) throw InvalidArgument("spec has no environments");
    check_row(env_prior, "env_prior");
    if (x_given_e.rows() != env_prior.size()) throw InvalidArgument("x_given_e must have one row per environment");
    if (x_given_e.cols() == 0) throw InvalidArgument("empty X alphabet");
    for (Eigen::Index e = 0; e < x_given_e.rows(); ++e) {
        check_row(x_given_e.row(e).transpose(), "x_given_e[" + std::to_string(e) + "]");
    }
    if (static_cast<Eigen::Index>(y_given_xe.size()) != env_prior.size()) {
        throw InvalidArgument("y_given_xe must have one table per environment");
    }
    for (std::size_t e = 0; e < y_given_xe.size(); ++e) {
        const auto& t = y_given_xe[e];
        if (t.rows() != x_given_e.cols()) throw InvalidArgument("y_given_xe table has wrong row count");
        if (t.cols() == 0 || t.cols() != y_given_xe.front().cols()) {
            throw InvalidArgument("y_given_xe tables disagree on the Y alphabet");
        }
        for (Eigen::Index x = 0; x < t.rows(); ++x) {
            check_row(t.row(x).transpose(), "y_given_xe[" + std::to_string(e) + "][" + std::to_string(x) + "]");
        }
    }
}

BayesNetSpec BayesNetSpec::from_json_string(const std::string& text) {
    json j;
    try {
        j = json::parse(text);
    } catch (const json::exception& ex) {
        throw InvalidArgument(std::string("bayes net spec: ") + ex.what());
    }
    for (const char* key : {"env_prior", "x_given_e", "y_given_xe"}) {
        if (!j.contains(key)) throw InvalidArgument(std::string("bayes net spec: missing field ") + key);
    }
    BayesNetSpec s;
    s.name = j.value("name", std::string{});
    const auto prior = j["env_prior"].get<std::vector<double>>();
    s.env_prior = Eigen::Map<const Vector>(prior.data(), static_cast<Eigen::Index>(prior.size()));
    s.x_given_e = matrix_from_json(j["x_given_e"], "x_given_e");
    for (const auto& t : j["y_given_xe"]) s.y_given_xe.push_back(matrix_from_json(t, "y_given_xe"));
    s.validate();
    return s;
}

BayesNetSpec BayesNetSpec::load(const std::string& path) {
    std::ifstream f(path);
    if (!f) throw InvalidArgument("cannot open bayes net spec " + path);
    std::stringstream ss;
    ss << f.rdbuf();
    return from_json_string(ss.str());
}

std::string BayesNetSpec::to_json_string() const {
    json j;
    j["name"] = name;
    j["env_prior"] = std::vector<double>(env_prior.data(), env_prior.data() + env_prior.size());
    j["x_given_e"] = matrix_to_json(x_given_e);
    j["y_given_xe"] = json::array();
    for (const auto& t : y_given_xe) j["y_given_xe"].push_back(matrix_to_json(t));
    return j.dump(2);
}

// ---------------------------------------------------------------------------

int symbol_of(const BayesNetSpec& spec, const Vector& x) {
    if (x.size() != 1) throw InvalidArgument("discrete inputs are one-dimensional symbol vectors");
    const double v = x(0);
    const double r = std::round(v);
    if (v != r) throw InvalidArgument("discrete input is not an integer symbol");
    const int s = static_cast<int>(r);
    check_symbol(spec, s);
    return s;
}

Vector symbol_vector(int symbol) { return Vector::Constant(1, static_cast<double>(symbol)); }

Counts count_context(const BayesNetSpec& spec, const env::ContextWindow& context) {
    Counts counts(static_cast<std::size_t>(spec.num_symbols()), 0);
    for (const auto& item : context.items) ++counts[static_cast<std::size_t>(symbol_of(spec, item))];
    return counts;
}

EnvPosterior posterior_from_counts(const BayesNetSpec& spec, const Counts& counts, int query) {
    check_symbol(spec, query);
    if (static_cast<int>(counts.size()) != spec.num_symbols()) throw InvalidArgument("counts size mismatch");
    Vector logw = log_context_likelihood(spec, counts);
    for (int e = 0; e < spec.num_envs(); ++e) {
        const double pe = spec.env_prior(e);
        const double pq = spec.x_given_e(e, query);
        logw(e) += (pe > 0.0 && pq > 0.0) ? std::log(pe) + std::log(pq) : kNegInf;
    }
    const double lse = log_sum_exp(logw);
    if (!std::isfinite(lse)) throw NumericalError("context and query have zero likelihood under every environment");
    return EnvPosterior{(logw.array() - lse).exp().matrix()};
}

EnvPosterior posterior_over_envs(const BayesNetSpec& spec, const env::ContextWindow& context,
                                 const Vector& query) {
    return posterior_from_counts(spec, count_context(spec, context), symbol_of(spec, query));
}

Vector icrm_predict_counts(const BayesNetSpec& spec, int query, const Counts& counts) {
    const auto post = posterior_from_counts(spec, counts, query);
    Vector out = Vector::Zero(spec.num_labels());
    for (int e = 0; e < spec.num_envs(); ++e) {
        out += post.probs(e) * spec.y_given_xe[static_cast<std::size_t>(e)].row(query).transpose();
    }
    return out / out.sum();
}

env::PredictiveDistribution icrm_exact_predict(const BayesNetSpec& spec, const Vector& query,
                                               const env::ContextWindow& context) {
    return env::PredictiveDistribution(icrm_predict_counts(spec, symbol_of(spec, query), count_context(spec, context)));
}

env::PredictiveDistribution pooled_bayes_predict(const BayesNetSpec& spec, const Vector& query) {
    const int q = symbol_of(spec, query);
    Vector joint = Vector::Zero(spec.num_labels());
    for (int e = 0; e < spec.num_envs(); ++e) {
        joint += spec.env_prior(e) * spec.x_given_e(e, q) * spec.y_given_xe[static_cast<std::size_t>(e)].row(q).transpose();
    }
    const double z = joint.sum();
    if (z <= 0.0) throw NumericalError("query symbol has zero marginal probability");
    return env::PredictiveDistribution(joint / z);
}

env::Predictor exact_predictor(const BayesNetSpec& spec) {
    return [spec](const Vector& x, const env::ContextWindow& c) { return icrm_exact_predict(spec, x, c); };
}

env::Predictor pooled_predictor(const BayesNetSpec& spec) {
    return [spec](const Vector& x, const env::ContextWindow&) { return pooled_bayes_predict(spec, x); };
}

// ---------------------------------------------------------------------------

double h_y_given_x(const BayesNetSpec& spec) {
    Matrix xy = Matrix::Zero(spec.num_symbols(), spec.num_labels());
    for_each_cell(spec, [&](int, int x, int y, double p) { xy(x, y) += p; });
    return plogp_sum(xy) - plogp_sum(xy.rowwise().sum());
}

double h_y_given_x_e(const BayesNetSpec& spec) {
    double h = 0.0;
    for_each_cell(spec, [&](int e, int x, int y, double p) {
        if (p > 0.0) h -= p * std::log(spec.y_given_xe[static_cast<std::size_t>(e)](x, y));
    });
    return h;
}

double mi_y_e_given_x(const BayesNetSpec& spec) { return h_y_given_x(spec) - h_y_given_x_e(spec); }

double mi_x_e(const BayesNetSpec& spec) {
    Matrix ex(spec.num_envs(), spec.num_symbols());
    for (int e = 0; e < spec.num_envs(); ++e) ex.row(e) = spec.env_prior(e) * spec.x_given_e.row(e);
    return plogp_sum(ex.colwise().sum()) + plogp_sum(spec.env_prior) - plogp_sum(ex);
}

double mi_y_x_given_e(const BayesNetSpec& spec) {
    Matrix ey = Matrix::Zero(spec.num_envs(), spec.num_labels());
    for_each_cell(spec, [&](int e, int, int y, double p) { ey(e, y) += p; });
    const double h_y_e = plogp_sum(ey) - plogp_sum(spec.env_prior);
    return h_y_e - h_y_given_x_e(spec);
}

double mi_y_e(const BayesNetSpec& spec) {
    Matrix ey = Matrix::Zero(spec.num_envs(), spec.num_labels());
    for_each_cell(spec, [&](int e, int, int y, double p) { ey(e, y) += p; });
    return plogp_sum(ey.colwise().sum()) + plogp_sum(spec.env_prior) - plogp_sum(ey);
}

double context_state_count(const BayesNetSpec& spec, int t) {
    const int k = spec.num_symbols() - 1;
    // Rounded so that small counts compare exactly against the state limit.
    return std::round(std::exp(std::lgamma(t + k + 1.0) - std::lgamma(k + 1.0) - std::lgamma(t + 1.0)));
}

namespace {

/// Visits every (counts, query, label) with its joint probability.
template <typename Fn>
void for_each_context_state(const BayesNetSpec& spec, int t, Fn&& fn) {
    const int E = spec.num_envs();
    const int K = spec.num_labels();
    for_each_composition(t, spec.num_symbols(), [&](const Counts& counts) {
        const double lm = log_multinomial(counts);
        const Vector ll = log_context_likelihood(spec, counts);
        Vector w(E);
        for (int e = 0; e < E; ++e) w(e) = spec.env_prior(e) * std::exp(lm + ll(e));
        for (int q = 0; q < spec.num_symbols(); ++q) {
            Vector joint = Vector::Zero(K);
            for (int e = 0; e < E; ++e) {
                const double we = w(e) * spec.x_given_e(e, q);
                if (we > 0.0) joint += we * spec.y_given_xe[static_cast<std::size_t>(e)].row(q).transpose();
            }
            if (joint.sum() > 0.0) fn(counts, q, joint);
        }
    });
}

}  // namespace

double h_y_given_x_c_exact(const BayesNetSpec& spec, int t) {
    if (t < 0) throw InvalidArgument("context length must be non-negative");
    double h = 0.0;
    for_each_context_state(spec, t, [&](const Counts&, int, const Vector& joint) {
        const double z = joint.sum();
        for (double p : joint) {
            if (p > 0.0) h -= p * std::log(p / z);
        }
    });
    return std::max(h, 0.0);
}

double expected_cross_entropy_exact(const BayesNetSpec& spec, int t, const CountPredictor& predictor) {
    double loss = 0.0;
    for_each_context_state(spec, t, [&](const Counts& counts, int q, const Vector& joint) {
        const Vector pred = predictor(q, counts);
        for (Eigen::Index y = 0; y < joint.size(); ++y) {
            if (joint(y) <= 0.0) continue;
            const double p = std::clamp(pred(y), env::PredictiveDistribution::kClampLo,
                                        env::PredictiveDistribution::kClampHi);
            loss -= joint(y) * std::log(p);
        }
    });
    return loss;
}

namespace {

int draw_categorical(Rng& rng, const Eigen::Ref<const Vector>& probs) {
    std::uniform_real_distribution<double> u(0.0, 1.0);
    const double r = u(rng);
    double acc = 0.0;
    for (Eigen::Index i = 0; i < probs.size(); ++i) {
        acc += probs(i);
        if (r < acc) return static_cast<int>(i);
    }
    // Round-off: return the last index with positive mass.
    for (Eigen::Index i = probs.size() - 1; i >= 0; --i) {
        if (probs(i) > 0.0) return static_cast<int>(i);
    }
    return 0;
}

struct ShardSums {
    double sum = 0.0;
    double sum_sq = 0.0;
    std::size_t n = 0;
};

ShardSums mc_shard(const BayesNetSpec& spec, int t, std::size_t n, std::uint64_t seed) {
    Rng rng(seed);
    ShardSums s;
    Counts counts(static_cast<std::size_t>(spec.num_symbols()));
    for (std::size_t i = 0; i < n; ++i) {
        const int e = draw_categorical(rng, spec.env_prior);
        std::fill(counts.begin(), counts.end(), 0);
        for (int j = 0; j < t; ++j) ++counts[static_cast<std::size_t>(draw_categorical(rng, spec.x_given_e.row(e).transpose()))];
        const int q = draw_categorical(rng, spec.x_given_e.row(e).transpose());
        const double h = entropy_nats(icrm_predict_counts(spec, q, counts));
        s.sum += h;
        s.sum_sq += h * h;
        ++s.n;
    }
    return s;
}

constexpr std::size_t kShardSize = 4096;

}  // namespace

McEstimate h_y_given_x_c_mc(const BayesNetSpec& spec, int t, std::size_t samples, std::uint64_t seed,
                            unsigned threads) {
    if (samples == 0) throw InvalidArgument("Monte Carlo needs at least one context");
    const std::size_t shards = (samples + kShardSize - 1) / kShardSize;
    std::vector<ShardSums> results(shards);
    const unsigned workers = std::max(1u, threads);
    for (std::size_t base = 0; base < shards; base += workers) {
        std::vector<std::future<ShardSums>> futs;
        for (std::size_t s = base; s < std::min(shards, base + workers); ++s) {
            const std::size_t n = std::min(kShardSize, samples - s * kShardSize);
            futs.push_back(std::async(workers > 1 ? std::launch::async : std::launch::deferred, mc_shard,
                                      std::cref(spec), t, n, derive_seed(seed, s)));
        }
        for (std::size_t i = 0; i < futs.size(); ++i) results[base + i] = futs[i].get();
    }
    ShardSums total;
    for (const auto& r : results) {
        total.sum += r.sum;
        total.sum_sq += r.sum_sq;
        total.n += r.n;
    }
    McEstimate out;
    out.samples = total.n;
    out.mean = total.sum / static_cast<double>(total.n);
    if (total.n > 1) {
        const double var = std::max(0.0, (total.sum_sq - total.n * out.mean * out.mean) / static_cast<double>(total.n - 1));
        out.std_error = std::sqrt(var / static_cast<double>(total.n));
    }
    return out;
}

EntropyReport entropy_curve(const BayesNetSpec& spec, int t_max, std::size_t mc_contexts, std::uint64_t seed,
                            const EntropyOptions& options) {
    if (t_max < 0) throw InvalidArgument("t_max must be non-negative");
    if (mc_contexts < 1) throw InvalidArgument("mc_contexts must be at least one");
    spec.validate();
    EntropyReport r;
    r.h_y_given_x = h_y_given_x(spec);
    r.h_y_given_x_e = h_y_given_x_e(spec);
    r.i_y_e_given_x = std::max(0.0, r.h_y_given_x - r.h_y_given_x_e);
    for (int t = 0; t <= t_max; ++t) {
        CurvePoint pt;
        if (context_state_count(spec, t) <= options.exact_state_limit) {
            pt.nats = h_y_given_x_c_exact(spec, t);
        } else {
            const auto mc = h_y_given_x_c_mc(spec, t, mc_contexts, derive_seed(seed, static_cast<std::uint64_t>(t)),
                                             options.threads);
            pt.nats = mc.mean;
            pt.std_error = mc.std_error;
            pt.exact = false;
        }
        r.h_y_given_x_c[t] = pt;
    }
    return r;
}

env::Sequence sample_sequence(const BayesNetSpec& spec, std::size_t t, Rng& rng) {
    const int e = draw_categorical(rng, spec.env_prior);
    env::Sequence s;
    s.provenance = env::Provenance::icrm;
    for (std::size_t i = 0; i < t; ++i) {
        const int x = draw_categorical(rng, spec.x_given_e.row(e).transpose());
        const int y = draw_categorical(rng, spec.y_given_xe[static_cast<std::size_t>(e)].row(x).transpose());
        s.inputs.push_back(symbol_vector(x));
        s.targets.push_back(y);
        s.envs.push_back(e);
    }
    return s;
}

// ---------------------------------------------------------------------------

BayesNetSpec xor_scenario(double p_hi) {
    BayesNetSpec s;
    s.name = "xor";
    s.env_prior = Vector::Constant(2, 0.5);
    s.x_given_e.resize(2, 2);
    s.x_given_e << p_hi, 1.0 - p_hi,
                   1.0 - p_hi, p_hi;
    for (int e = 0; e < 2; ++e) {
        Matrix t(2, 2);
        for (int x = 0; x < 2; ++x) {
            const int y = x ^ e;
            t(x, y) = 1.0;
            t(x, 1 - y) = 0.0;
        }
        s.y_given_xe.push_back(t);
    }
    s.validate();
    return s;
}

namespace {

Vector bern(double p1) {
    Vector v(2);
    v << 1.0 - p1, p1;
    return v;
}

/// Builds the spec from a joint P(x, y | e) given per environment.
BayesNetSpec from_conditional_joints(double pe1, const std::vector<Matrix>& xy_given_e, std::string name) {
    BayesNetSpec s;
    s.name = std::move(name);
    s.env_prior = bern(pe1);
    s.x_given_e.resize(2, 2);
    for (int e = 0; e < 2; ++e) {
        const Matrix& j = xy_given_e[static_cast<std::size_t>(e)];
        s.x_given_e.row(e) = j.rowwise().sum().transpose();
        Matrix t(2, 2);
        for (int x = 0; x < 2; ++x) t.row(x) = j.row(x) / j.row(x).sum();
        s.y_given_xe.push_back(t);
    }
    s.validate();
    return s;
}

}  // namespace

BayesNetSpec dag_scenario(DagCase which, const std::vector<double>& cpt) {
    auto need = [&](std::size_t n) {
        if (cpt.size() != n) throw InvalidArgument("dag scenario expects " + std::to_string(n) + " CPT entries");
        for (double p : cpt) {
            if (!(p > 0.0 && p < 1.0)) throw InvalidArgument("dag CPT entries must lie in (0,1)");
        }
    };
    std::vector<Matrix> joints(2, Matrix::Zero(2, 2));
    switch (which) {
    case DagCase::case_a: {
        need(5);
        for (int e = 0; e < 2; ++e) {
            const Vector py = bern(cpt[static_cast<std::size_t>(1 + e)]);
            for (int y = 0; y < 2; ++y) {
                const Vector px = bern(cpt[static_cast<std::size_t>(3 + y)]);
                for (int x = 0; x < 2; ++x) joints[static_cast<std::size_t>(e)](x, y) = py(y) * px(x);
            }
        }
        return from_conditional_joints(cpt[0], joints, "dag_case_a");
    }
    case DagCase::case_b: {
        need(7);
        for (int e = 0; e < 2; ++e) {
            const Vector px = bern(cpt[static_cast<std::size_t>(1 + e)]);
            for (int x = 0; x < 2; ++x) {
                const Vector py = bern(cpt[static_cast<std::size_t>(3 + 2 * e + x)]);
                for (int y = 0; y < 2; ++y) joints[static_cast<std::size_t>(e)](x, y) = px(x) * py(y);
            }
        }
        return from_conditional_joints(cpt[0], joints, "dag_case_b");
    }
    case DagCase::case_c: {
        need(6);
        const Vector py = bern(cpt[1]);
        for (int e = 0; e < 2; ++e) {
            for (int y = 0; y < 2; ++y) {
                const Vector px = bern(cpt[static_cast<std::size_t>(2 + 2 * e + y)]);
                for (int x = 0; x < 2; ++x) joints[static_cast<std::size_t>(e)](x, y) = py(y) * px(x);
            }
        }
        return from_conditional_joints(cpt[0], joints, "dag_case_c");
    }
    }
    throw InvalidArgument("unknown DAG case");
}

BayesNetSpec random_dag_scenario(DagCase which, std::uint64_t seed) {
    const std::size_t n = which == DagCase::case_a ? 5 : which == DagCase::case_b ? 7 : 6;
    Rng rng(seed);
    std::uniform_real_distribution<double> u(0.05, 0.95);
    for (int attempt = 0; attempt < 1000; ++attempt) {
        std::vector<double> cpt(n);
        for (auto& p : cpt) p = u(rng);
        auto spec = dag_scenario(which, cpt);
        if (is_faithful(spec)) return spec;
    }
    throw NumericalError("could not draw a faithful DAG scenario");
}

bool is_faithful(const BayesNetSpec& spec, double tol) {
    return mi_x_e(spec) > tol && mi_y_e_given_x(spec) > tol && mi_y_x_given_e(spec) > tol;
}

}  // namespace icrm::discrete
