#include "icrm/runner.hpp"

#include "icrm/amortized.hpp"
#include "icrm/discrete_zoom.hpp"
#include "icrm/gaussian_dgp.hpp"
#include "icrm/gaussian_icl.hpp"
#include "icrm/linear_invariance.hpp"

#define TOML_EXCEPTIONS 1
#include <toml.hpp>

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <functional>
#include <limits>
#include <map>
#include <set>
#include <sstream>
#include <thread>

#ifndef ICRM_VERSION
#define ICRM_VERSION "unknown"
#endif

namespace icrm::runner {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

// --- catalog ------------------------------------------------------------------

std::vector<ParamDoc> linear_spec_params() {
    return {
        {"alpha", "number", "1.0", "coefficient on x1"},
        {"beta", "number", "1.0", "coefficient on the environment mean mu2"},
        {"sigma1_sq", "number", "1.0", "within-environment variance of x1"},
        {"sigma2_sq", "number", "1.0", "within-environment variance of x2"},
        {"sigma12", "number", "0.5", "within-environment covariance of x1 and x2"},
        {"mu2_values", "number_list", "[-1.0, 1.0]", "support of mu2 across training environments"},
        {"mu2_probs", "number_list", "[0.5, 0.5]", "probabilities of mu2_values"},
        {"noise_var", "number", "0.0", "variance of the additive noise"},
    };
}

std::vector<ScenarioInfo> build_catalog() {
    std::vector<ScenarioInfo> c;
    c.push_back({"discrete-zoom",
                 "Cross-entropy of the exact in-context predictor H(Y|X,C_t) against pooled Bayes H(Y|X) and "
                 "the environment oracle H(Y|X,E) on a discrete Bayes net.",
                 {
                     {"fixture", "string", "\"\"", "BayesNetSpec JSON; empty selects the built-in XOR net"},
                     {"mc_contexts", "integer", "20000", "Monte Carlo contexts when exact enumeration is too large"},
                     {"exact_state_limit", "number", "1000000.0",
                      "largest number of context count-compositions enumerated exactly"},
                 },
                 "configs/discrete-zoom.toml"});
    c.push_back({"gaussian-ood",
                 "Out-of-distribution Gaussian classification: EM on an unlabeled test context, Voronoi "
                 "matching against training environments, agreement with the Bayes oracle.",
                 {
                     {"train", "string_list", "", "EnvParams JSON files for the training environments"},
                     {"test", "string_list", "", "EnvParams JSON files for the test environments"},
                     {"train_samples", "integer", "2000", "labeled samples per training environment"},
                     {"margin", "number", "0.1", "high-margin threshold on |oracle - 0.5|"},
                     {"accuracy_samples", "integer", "2000", "labeled test draws for accuracy"},
                     {"restarts", "integer", "5", "EM restarts"},
                     {"max_iter", "integer", "500", "EM iterations per restart"},
                     {"grid_lo", "number", "-3.0", "query grid lower bound"},
                     {"grid_hi", "number", "3.0", "query grid upper bound"},
                     {"grid_points", "integer", "10", "query grid points per axis"},
                     {"posterior", "string", "\"normalized\"", "normalized | unnormalized"},
                 },
                 "configs/gaussian-ood.toml"});
    auto lin = linear_spec_params();
    lin.push_back({"test_mu2", "number_list", "[3.0]", "mu2 of each test environment"});
    lin.push_back({"train_samples", "integer", "100000", "pooled training samples for the fitted predictors"});
    lin.push_back({"eval_samples", "integer", "2000", "Monte Carlo evaluations per finite-context cell"});
    c.push_back({"linear-invariance",
                 "Squared error of pooled least squares against the extended-feature invariant predictor, "
                 "with environment means estimated from t context samples.",
                 lin, "configs/linear-invariance.toml"});
    c.push_back({"rank-task",
                 "Rank counting: attention learner against the mean-embedding baseline. Uses context_length, "
                 "not the grid.",
                 {
                     {"context_length", "integer", "16", "context size per instance"},
                     {"queries_per_instance", "integer", "8", "queries per instance"},
                     {"train_instances", "integer", "2000", "training instances"},
                     {"test_instances", "integer", "500", "held-out instances"},
                     {"embed_dim", "integer", "2", "mean-embedding feature dimension"},
                     {"steps", "integer", "1500", "gradient steps for the attention learner"},
                     {"batch_instances", "integer", "16", "instances per minibatch"},
                     {"learning_rate", "number", "0.2", "attention learning rate"},
                 },
                 "configs/rank-task.toml"});
    auto att = linear_spec_params();
    att.push_back({"test_mu2", "number", "3.0", "mu2 of the test environment"});
    att.push_back({"sequence_length", "integer", "100", "training sequence length"});
    att.push_back({"min_context", "integer", "0", "shortest context that contributes to the loss"});
    att.push_back({"sequences_per_step", "integer", "8", "sequences per minibatch"});
    att.push_back({"steps", "integer", "2000", "gradient steps"});
    att.push_back({"learning_rate", "number", "0.01", "learning rate"});
    att.push_back({"eval_queries", "integer", "500", "queries per evaluation context"});
    att.push_back({"eval_contexts", "integer", "8", "evaluation contexts per grid point"});
    c.push_back({"attention-train",
                 "Attention learner trained with the autoregressive loss on linear environments, evaluated "
                 "across the context grid against pooled least squares.",
                 att, "configs/attention-train.toml"});
    return c;
}

const ScenarioInfo& scenario_info(const std::string& name) {
    for (const auto& s : list_scenarios()) {
        if (s.name == name) return s;
    }
    std::string valid;
    for (const auto& s : list_scenarios()) valid += (valid.empty() ? "" : ", ") + s.name;
    throw ConfigError("unknown scenario '" + name + "'; valid options: " + valid);
}

// --- TOML to JSON -------------------------------------------------------------

json to_json_node(const toml::node& node, const std::string& where) {
    if (const auto* t = node.as_table()) {
        json out = json::object();
        for (const auto& [k, v] : *t) out[std::string(k.str())] = to_json_node(v, where + "." + std::string(k.str()));
        return out;
    }
    if (const auto* a = node.as_array()) {
        json out = json::array();
        for (const auto& v : *a) out.push_back(to_json_node(v, where + "[]"));
        return out;
    }
    if (const auto* v = node.as_integer()) return v->get();
    if (const auto* v = node.as_floating_point()) return v->get();
    if (const auto* v = node.as_string()) return v->get();
    if (const auto* v = node.as_boolean()) return v->get();
    throw ConfigError("unsupported TOML value at " + where);
}

bool is_number(const json& j) { return j.is_number(); }

void check_type(const ParamDoc& doc, const json& v) {
    auto fail = [&] { throw ConfigError("parameter '" + doc.name + "' must be of type " + doc.type); };
    if (doc.type == "number") {
        if (!is_number(v)) fail();
    } else if (doc.type == "integer") {
        if (!v.is_number_integer()) fail();
    } else if (doc.type == "string") {
        if (!v.is_string()) fail();
    } else if (doc.type == "number_list") {
        if (!v.is_array() || v.empty()) fail();
        for (const auto& e : v) {
            if (!is_number(e)) fail();
        }
    } else if (doc.type == "string_list") {
        if (!v.is_array() || v.empty()) fail();
        for (const auto& e : v) {
            if (!e.is_string()) fail();
        }
    }
}

/// Fills defaults, rejects unknown keys, normalizes numbers to double.
json normalize_params(const ScenarioInfo& info, const json& given) {
    json out = json::object();
    for (const auto& [k, v] : given.items()) {
        const bool known = std::any_of(info.params.begin(), info.params.end(), [&](const ParamDoc& d) { return d.name == k; });
        if (!known) throw ConfigError("unknown parameter '" + k + "' for scenario " + info.name);
    }
    for (const auto& doc : info.params) {
        json v;
        if (given.contains(doc.name)) {
            v = given.at(doc.name);
        } else if (!doc.default_value.empty()) {
            v = json::parse(doc.default_value);
        } else {
            throw ConfigError("missing required parameter '" + doc.name + "' for scenario " + info.name);
        }
        check_type(doc, v);
        if (doc.type == "number") v = v.get<double>();
        if (doc.type == "number_list") {
            json list = json::array();
            for (const auto& e : v) list.push_back(e.get<double>());
            v = list;
        }
        out[doc.name] = v;
    }
    return out;
}

double num(const json& p, const char* key) { return p.at(key).get<double>(); }
long long integer(const json& p, const char* key) { return p.at(key).get<long long>(); }

std::size_t positive(const json& p, const char* key) {
    const long long v = integer(p, key);
    if (v <= 0) throw ConfigError(std::string("parameter '") + key + "' must be positive");
    return static_cast<std::size_t>(v);
}

std::size_t nonnegative(const json& p, const char* key) {
    const long long v = integer(p, key);
    if (v < 0) throw ConfigError(std::string("parameter '") + key + "' must be nonnegative");
    return static_cast<std::size_t>(v);
}

std::string resolve(const ExperimentConfig& c, const std::string& path) {
    const fs::path p(path);
    return p.is_absolute() ? p.string() : (fs::path(c.base_dir) / p).string();
}

std::string read_file(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw ConfigError("cannot read " + path);
    std::ostringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

linear::LinearEnvSpec linear_spec(const json& p) {
    linear::LinearEnvSpec s;
    s.alpha = num(p, "alpha");
    s.beta = num(p, "beta");
    s.sigma1_sq = num(p, "sigma1_sq");
    s.sigma2_sq = num(p, "sigma2_sq");
    s.sigma12 = num(p, "sigma12");
    s.mu2_values = p.at("mu2_values").get<std::vector<double>>();
    s.mu2_probs = p.at("mu2_probs").get<std::vector<double>>();
    s.noise_var = num(p, "noise_var");
    return s;
}

discrete::BayesNetSpec discrete_spec(const ExperimentConfig& c) {
    const auto path = c.params.at("fixture").get<std::string>();
    return path.empty() ? discrete::xor_scenario() : discrete::BayesNetSpec::load(resolve(c, path));
}

gaussian::PosteriorForm posterior_form(const json& p) {
    const auto s = p.at("posterior").get<std::string>();
    if (s == "normalized") return gaussian::PosteriorForm::normalized;
    if (s == "unnormalized") return gaussian::PosteriorForm::unnormalized;
    throw ConfigError("posterior must be 'normalized' or 'unnormalized'");
}

std::vector<gaussian::EnvParams> load_env_list(const ExperimentConfig& c, const char* key) {
    std::vector<gaussian::EnvParams> out;
    for (const auto& path : c.params.at(key).get<std::vector<std::string>>()) {
        out.push_back(gaussian::EnvParams::from_json_string(read_file(resolve(c, path))));
    }
    return out;
}

std::string stem(const std::string& path) { return fs::path(path).stem().string(); }

std::string fmt_double(double v) {
    char buf[64];
    std::snprintf(buf, sizeof(buf), "%.17g", v);
    return buf;
}

std::string mu2_label(double v) {
    char buf[64];
    std::snprintf(buf, sizeof(buf), "mu2=%g", v);
    return buf;
}

// --- scenario cells ---------------------------------------------------------------

struct Cell {
    std::uint64_t seed = 0;
    /// Grid value, or -1 for per-seed cells.
    int context_len = -1;
};

using CellFn = std::function<std::vector<ReportRow>(const Cell&)>;

ReportRow make_row(const ExperimentConfig& c, const std::string& predictor, int t, std::uint64_t seed,
                   const std::string& env, const std::string& metric, double value) {
    return ReportRow{c.scenario, predictor, t, seed, env, metric, value, "ok"};
}

std::vector<ReportRow> discrete_cell(const ExperimentConfig& c, const Cell& cell) {
    const auto spec = discrete_spec(c);
    const int t = cell.context_len;
    std::vector<ReportRow> rows;
    const std::string env = spec.name.empty() ? "pooled" : spec.name;
    if (discrete::context_state_count(spec, t) <= num(c.params, "exact_state_limit")) {
        rows.push_back(make_row(c, "icrm", t, cell.seed, env, "cross_entropy", discrete::h_y_given_x_c_exact(spec, t)));
    } else {
        const auto mc = discrete::h_y_given_x_c_mc(spec, t, positive(c.params, "mc_contexts"),
                                                   derive_seed(cell.seed, static_cast<std::uint64_t>(t)), 1);
        rows.push_back(make_row(c, "icrm", t, cell.seed, env, "cross_entropy", mc.mean));
        rows.push_back(make_row(c, "icrm", t, cell.seed, env, "cross_entropy_se", mc.std_error));
    }
    rows.push_back(make_row(c, "pooled_bayes", t, cell.seed, env, "cross_entropy", discrete::h_y_given_x(spec)));
    rows.push_back(make_row(c, "env_oracle", t, cell.seed, env, "cross_entropy", discrete::h_y_given_x_e(spec)));
    return rows;
}

std::vector<ReportRow> gaussian_cell(const ExperimentConfig& c, const Cell& cell) {
    const auto& p = c.params;
    const auto train_envs = load_env_list(c, "train");
    const auto test_envs = load_env_list(c, "test");
    const auto test_names = p.at("test").get<std::vector<std::string>>();
    const int t = cell.context_len;

    // Training data does not depend on t, so every cell of a seed sees the same bundle.
    std::vector<env::LabeledExample> train;
    for (std::size_t e = 0; e < train_envs.size(); ++e) {
        auto ex = gaussian::generate(train_envs[e], positive(p, "train_samples"), derive_seed(cell.seed, 1000 + e),
                                     static_cast<int>(e));
        train.insert(train.end(), ex.begin(), ex.end());
    }
    const auto bundle = gaussian::train_bundle(env::Dataset(std::move(train), 2));
    const auto dim = train_envs.front().dim();
    const auto queries = gaussian::query_grid(dim, num(p, "grid_lo"), num(p, "grid_hi"),
                                              static_cast<int>(positive(p, "grid_points")));

    gaussian::OodOptions opts;
    opts.context_length = static_cast<std::size_t>(t);
    opts.margin = num(p, "margin");
    opts.accuracy_samples = nonnegative(p, "accuracy_samples");
    opts.em.restarts = static_cast<int>(positive(p, "restarts"));
    opts.em.max_iter = static_cast<int>(positive(p, "max_iter"));
    opts.form = posterior_form(p);

    std::vector<ReportRow> rows;
    static const char* kMetrics[] = {"agreement", "sup_gap", "mean_gap", "accuracy", "in_cell"};
    for (std::size_t k = 0; k < test_envs.size(); ++k) {
        const std::string env = stem(test_names[k]);
        const std::uint64_t s = derive_seed(derive_seed(cell.seed, static_cast<std::uint64_t>(t)), k);
        try {
            if (t < 4) throw InvalidArgument("EM needs at least 4 context points");
            const auto ev = gaussian::evaluate_ood(bundle, test_envs[k], queries, s, opts);
            rows.push_back(make_row(c, "icrm", t, cell.seed, env, "agreement", ev.agreement));
            rows.push_back(make_row(c, "icrm", t, cell.seed, env, "sup_gap", ev.sup_gap));
            rows.push_back(make_row(c, "icrm", t, cell.seed, env, "mean_gap", ev.mean_gap));
            rows.push_back(make_row(c, "icrm", t, cell.seed, env, "accuracy", ev.accuracy));
            rows.push_back(make_row(c, "icrm", t, cell.seed, env, "in_cell", ev.in_cell ? 1.0 : 0.0));
            rows.push_back(make_row(c, "bayes_oracle", t, cell.seed, env, "accuracy", ev.oracle_accuracy));
        } catch (const InvalidArgument& ex) {
            for (const char* m : kMetrics) {
                auto r = make_row(c, "icrm", t, cell.seed, env, m, std::numeric_limits<double>::quiet_NaN());
                r.status = std::string("skipped: ") + ex.what();
                rows.push_back(std::move(r));
            }
        }
    }
    return rows;
}

/// Squared error of a linear predictor whose environment means come from t
/// context samples (t = 0 uses the zero default).
linear::McError finite_context_error(const linear::LinearEnvSpec& spec, const linear::LinearPredictor& pred,
                                     double mu2, std::size_t t, std::size_t evals, std::uint64_t seed) {
    Rng rng(seed);
    double sum = 0.0, sum_sq = 0.0;
    for (std::size_t i = 0; i < evals; ++i) {
        const auto s = linear::simulate_env(spec, mu2, t + 1, rng);
        double m1 = 0.0, m2 = 0.0;
        for (std::size_t j = 0; j < t; ++j) {
            m1 += s[j].x1;
            m2 += s[j].x2;
        }
        if (t > 0) {
            m1 /= static_cast<double>(t);
            m2 /= static_cast<double>(t);
        }
        const auto& q = s[t];
        const double r = pred.a1 * q.x1 + pred.a2 * q.x2 + pred.m1 * m1 + pred.m2 * m2 - q.y;
        sum += r * r;
        sum_sq += r * r * r * r;
    }
    const double n = static_cast<double>(evals);
    const double mean = sum / n;
    const double var = std::max(0.0, sum_sq / n - mean * mean);
    return {mean, n > 1 ? std::sqrt(var / (n - 1)) : 0.0};
}

std::vector<ReportRow> linear_cell(const ExperimentConfig& c, const Cell& cell) {
    const auto& p = c.params;
    const auto spec = linear_spec(p);
    spec.validate();
    const int t = cell.context_len;
    const auto train = linear::simulate(spec, positive(p, "train_samples"), derive_seed(cell.seed, 1));
    const auto erm_pop = linear::LinearPredictor::erm(linear::population_erm_coeffs(spec));
    const auto erm_fit = linear::LinearPredictor::from_vector(linear::fit_erm_empirical(train).coeffs);
    const auto icrm_fit = linear::LinearPredictor::from_vector(linear::fit_icrm_extended(train).coeffs);
    const auto evals = positive(p, "eval_samples");

    std::vector<ReportRow> rows;
    const auto tests = p.at("test_mu2").get<std::vector<double>>();
    for (std::size_t k = 0; k < tests.size(); ++k) {
        const double mu2 = tests[k];
        const std::string env = mu2_label(mu2);
        rows.push_back(make_row(c, "erm", t, cell.seed, env, "mse",
                                linear::expected_test_error(spec, erm_pop, mu2, linear::ContextMode::full)));
        rows.push_back(make_row(c, "erm_fit", t, cell.seed, env, "mse",
                                linear::expected_test_error(spec, erm_fit, mu2, linear::ContextMode::full)));
        if (t == 0) {
            rows.push_back(make_row(c, "icrm", t, cell.seed, env, "mse",
                                    linear::expected_test_error(spec, icrm_fit, mu2, linear::ContextMode::empty)));
        } else {
            const auto mc = finite_context_error(spec, icrm_fit, mu2, static_cast<std::size_t>(t), evals,
                                                 derive_seed(derive_seed(cell.seed, static_cast<std::uint64_t>(t)), k));
            rows.push_back(make_row(c, "icrm", t, cell.seed, env, "mse", mc.mean));
            rows.push_back(make_row(c, "icrm", t, cell.seed, env, "mse_se", mc.std_error));
        }
        rows.push_back(make_row(c, "icrm_full_context", t, cell.seed, env, "mse",
                                linear::expected_test_error(spec, icrm_fit, mu2, linear::ContextMode::full)));
    }
    return rows;
}

std::vector<ReportRow> rank_cell(const ExperimentConfig& c, const Cell& cell) {
    const auto& p = c.params;
    amortized::RankExperimentConfig rc;
    rc.context_length = positive(p, "context_length");
    rc.queries_per_instance = positive(p, "queries_per_instance");
    rc.train_instances = positive(p, "train_instances");
    rc.test_instances = positive(p, "test_instances");
    rc.embed_dim = static_cast<Eigen::Index>(positive(p, "embed_dim"));
    rc.steps = static_cast<int>(positive(p, "steps"));
    rc.batch_instances = static_cast<int>(positive(p, "batch_instances"));
    rc.learning_rate = num(p, "learning_rate");
    const auto r = amortized::run_rank_comparison(cell.seed, rc);
    const int t = static_cast<int>(rc.context_length);
    return {make_row(c, "attention", t, cell.seed, "uniform", "mae", r.attention_mae),
            make_row(c, "mean_embed", t, cell.seed, "uniform", "mae", r.mean_embed_mae)};
}

std::vector<ReportRow> attention_cell(const ExperimentConfig& c, const Cell& cell) {
    const auto& p = c.params;
    const auto spec = linear_spec(p);
    amortized::LinearAttentionConfig ac;
    ac.sequence_length = positive(p, "sequence_length");
    ac.min_context = nonnegative(p, "min_context");
    ac.sequences_per_step = static_cast<int>(positive(p, "sequences_per_step"));
    ac.steps = static_cast<int>(positive(p, "steps"));
    ac.learning_rate = num(p, "learning_rate");
    ac.test_contexts = 1;
    ac.test_context = 1;
    ac.test_queries = 1;
    const double mu2 = num(p, "test_mu2");
    const auto trained = amortized::run_linear_attention(spec, mu2, cell.seed, ac);
    const std::string env = mu2_label(mu2);

    const auto queries = positive(p, "eval_queries");
    const auto contexts = positive(p, "eval_contexts");
    std::vector<ReportRow> rows;
    for (int t : c.context_grid) {
        Rng rng(derive_seed(derive_seed(cell.seed, 7), static_cast<std::uint64_t>(t)));
        double se = 0.0;
        for (std::size_t k = 0; k < contexts; ++k) {
            env::ContextWindow ctx;
            for (const auto& s : linear::simulate_env(spec, mu2, static_cast<std::size_t>(t), rng)) {
                Vector x(2);
                x << s.x1, s.x2;
                ctx.items.push_back(std::move(x));
            }
            for (const auto& s : linear::simulate_env(spec, mu2, queries, rng)) {
                Vector x(2);
                x << s.x1, s.x2;
                const double r = amortized::attention_forward(x, ctx, trained.params).value - s.y;
                se += r * r;
            }
        }
        rows.push_back(make_row(c, "attention", t, cell.seed, env, "mse", se / static_cast<double>(queries * contexts)));
        rows.push_back(make_row(c, "erm", t, cell.seed, env, "mse", trained.erm_error));
    }
    rows.push_back(make_row(c, "attention", static_cast<int>(ac.sequence_length), cell.seed, "train", "final_train_loss",
                            trained.loss_trace.back()));
    return rows;
}

bool per_seed_scenario(const std::string& s) { return s == "rank-task" || s == "attention-train"; }

CellFn cell_function(const ExperimentConfig& c) {
    if (c.scenario == "discrete-zoom") return [&c](const Cell& x) { return discrete_cell(c, x); };
    if (c.scenario == "gaussian-ood") return [&c](const Cell& x) { return gaussian_cell(c, x); };
    if (c.scenario == "linear-invariance") return [&c](const Cell& x) { return linear_cell(c, x); };
    if (c.scenario == "rank-task") return [&c](const Cell& x) { return rank_cell(c, x); };
    if (c.scenario == "attention-train") return [&c](const Cell& x) { return attention_cell(c, x); };
    scenario_info(c.scenario);
    return {};
}

/// Non-increasing check along the grid, allowing two combined standard errors.
std::vector<std::string> monotonicity_warnings(const std::vector<ReportRow>& rows) {
    std::map<std::pair<std::uint64_t, std::string>, std::map<int, std::pair<double, double>>> curves;
    for (const auto& r : rows) {
        if (!r.ok() || r.predictor != "icrm") continue;
        auto& point = curves[{r.seed, r.env}][r.context_len];
        if (r.metric == "cross_entropy") point.first = r.value;
        if (r.metric == "cross_entropy_se") point.second = r.value;
    }
    std::vector<std::string> out;
    for (const auto& [key, curve] : curves) {
        const std::pair<int, std::pair<double, double>>* prev = nullptr;
        std::vector<std::pair<int, std::pair<double, double>>> pts(curve.begin(), curve.end());
        for (const auto& pt : pts) {
            if (prev) {
                const double slack = 2.0 * std::hypot(prev->second.second, pt.second.second) + 1e-12;
                if (pt.second.first > prev->second.first + slack) {
                    out.push_back("cross-entropy increases from t=" + std::to_string(prev->first) + " to t=" +
                                  std::to_string(pt.first) + " (seed " + std::to_string(key.first) + ", env " +
                                  key.second + ")");
                }
            }
            prev = &pt;
        }
    }
    return out;
}

void write_atomic(const fs::path& target, const std::string& bytes) {
    std::error_code ec;
    fs::create_directories(target.parent_path(), ec);
    const fs::path tmp = target.string() + ".tmp";
    {
        std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
        if (!out) throw Error("cannot write " + tmp.string());
        out << bytes;
        out.flush();
        if (!out) throw Error("cannot write " + tmp.string());
    }
    fs::rename(tmp, target, ec);
    if (ec) {
        fs::remove(tmp, ec);
        throw Error("cannot rename into " + target.string());
    }
}

std::string csv_field(const std::string& s) {
    if (s.find_first_of(",\"\n") == std::string::npos) return s;
    std::string out = "\"";
    for (char ch : s) {
        if (ch == '"') out += '"';
        out += ch;
    }
    return out + "\"";
}

json number_or_null(double v) { return std::isfinite(v) ? json(v) : json(nullptr); }

double from_number_or_null(const json& j) {
    return j.is_null() ? std::numeric_limits<double>::quiet_NaN() : j.get<double>();
}

}  // namespace

// ---------------------------------------------------------------------------

const std::vector<ScenarioInfo>& list_scenarios() {
    static const std::vector<ScenarioInfo> catalog = build_catalog();
    return catalog;
}

std::string catalog_text() {
    std::string out;
    for (const auto& s : list_scenarios()) {
        out += s.name + "\n  " + s.description + "\n  fixture: fixtures/" + s.fixture + "\n";
        for (const auto& p : s.params) {
            out += "    " + p.name + " (" + p.type + ", " +
                   (p.default_value.empty() ? std::string("required") : "default " + p.default_value) + "): " + p.doc +
                   "\n";
        }
    }
    return out;
}

std::string ExperimentConfig::canonical() const {
    json j;
    j["scenario"] = scenario;
    j["context_grid"] = context_grid;
    j["seeds"] = seeds;
    j["params"] = params;
    return j.dump();
}

std::string ExperimentConfig::hash() const { return fnv1a_hex(canonical()); }

ExperimentConfig parse_config(const std::string& toml_text, const std::string& base_dir) {
    json root;
    try {
        const toml::table tbl = toml::parse(toml_text);
        root = to_json_node(tbl, "config");
    } catch (const toml::parse_error& ex) {
        throw ConfigError(std::string("TOML parse error: ") + std::string(ex.description()));
    }

    static const std::set<std::string> kTop{"scenario", "seeds", "context_grid", "output", "threads", "params"};
    for (const auto& [k, v] : root.items()) {
        if (!kTop.count(k)) throw ConfigError("unknown top-level key '" + k + "'");
    }
    ExperimentConfig c;
    c.base_dir = base_dir;
    if (!root.contains("scenario") || !root["scenario"].is_string()) throw ConfigError("'scenario' must be a string");
    c.scenario = root["scenario"].get<std::string>();
    const auto& info = scenario_info(c.scenario);

    if (!root.contains("seeds") || !root["seeds"].is_array() || root["seeds"].empty()) {
        throw ConfigError("'seeds' must be a non-empty list of nonnegative integers");
    }
    for (const auto& s : root["seeds"]) {
        if (!s.is_number_integer() || s.get<long long>() < 0) {
            throw ConfigError("'seeds' must be a non-empty list of nonnegative integers");
        }
        c.seeds.push_back(s.get<std::uint64_t>());
    }
    if (root.contains("context_grid")) {
        if (!root["context_grid"].is_array() || root["context_grid"].empty()) {
            throw ConfigError("'context_grid' must be a non-empty list of integers");
        }
        c.context_grid.clear();
        for (const auto& g : root["context_grid"]) {
            if (!g.is_number_integer()) throw ConfigError("'context_grid' must contain integers");
            c.context_grid.push_back(g.get<int>());
        }
    }
    if (root.contains("output")) {
        if (!root["output"].is_string()) throw ConfigError("'output' must be a string");
        c.output = root["output"].get<std::string>();
    }
    if (root.contains("threads")) {
        if (!root["threads"].is_number_integer() || root["threads"].get<long long>() < 1) {
            throw ConfigError("'threads' must be a positive integer");
        }
        c.threads = root["threads"].get<unsigned>();
    }
    const json given = root.contains("params") ? root["params"] : json::object();
    if (!given.is_object()) throw ConfigError("'params' must be a table");
    c.params = normalize_params(info, given);
    return c;
}

ExperimentConfig load_config(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw ConfigError("cannot read config " + path);
    std::ostringstream ss;
    ss << in.rdbuf();
    const auto parent = fs::path(path).parent_path();
    return parse_config(ss.str(), parent.empty() ? "." : parent.string());
}

void validate(const ExperimentConfig& c) {
    const auto& info = scenario_info(c.scenario);
    if (c.seeds.empty()) throw ConfigError("'seeds' must be non-empty");
    if (c.context_grid.empty()) throw ConfigError("'context_grid' must be non-empty");
    for (std::size_t i = 0; i < c.context_grid.size(); ++i) {
        if (c.context_grid[i] < 0) throw ConfigError("'context_grid' must be nonnegative");
        if (i > 0 && c.context_grid[i] <= c.context_grid[i - 1]) {
            throw ConfigError("'context_grid' must be strictly ascending");
        }
    }
    if (c.threads < 1) throw ConfigError("'threads' must be positive");
    const json p = normalize_params(info, c.params);

    try {
        if (c.scenario == "discrete-zoom") {
            discrete_spec(c).validate();
            positive(p, "mc_contexts");
            if (!(num(p, "exact_state_limit") >= 1.0)) throw ConfigError("'exact_state_limit' must be >= 1");
        } else if (c.scenario == "gaussian-ood") {
            const auto train = load_env_list(c, "train");
            const auto test = load_env_list(c, "test");
            for (const auto& e : test) {
                if (e.dim() != train.front().dim()) throw ConfigError("test and training dimensions differ");
            }
            for (const auto& e : train) {
                if (e.dim() != train.front().dim()) throw ConfigError("training dimensions differ");
            }
            for (const char* k : {"train_samples", "restarts", "max_iter", "grid_points"}) positive(p, k);
            nonnegative(p, "accuracy_samples");
            if (!(num(p, "grid_lo") < num(p, "grid_hi"))) throw ConfigError("grid_lo must be below grid_hi");
            posterior_form(p);
        } else if (c.scenario == "linear-invariance") {
            linear_spec(p).validate();
            positive(p, "train_samples");
            positive(p, "eval_samples");
        } else if (c.scenario == "rank-task") {
            for (const char* k : {"context_length", "queries_per_instance", "train_instances", "test_instances",
                                  "embed_dim", "steps", "batch_instances"}) {
                positive(p, k);
            }
            if (!(num(p, "learning_rate") > 0)) throw ConfigError("'learning_rate' must be positive");
        } else if (c.scenario == "attention-train") {
            linear_spec(p).validate();
            for (const char* k : {"sequence_length", "sequences_per_step", "steps", "eval_queries", "eval_contexts"}) {
                positive(p, k);
            }
            nonnegative(p, "min_context");
            if (!(num(p, "learning_rate") > 0)) throw ConfigError("'learning_rate' must be positive");
        }
    } catch (const ConfigError&) {
        throw;
    } catch (const Error& ex) {
        throw ConfigError(ex.what());
    } catch (const nlohmann::json::exception& ex) {
        throw ConfigError(ex.what());
    }
}

bool RunReport::any_failed() const {
    return std::any_of(rows.begin(), rows.end(), [](const ReportRow& r) { return r.status.rfind("failed", 0) == 0; });
}

bool higher_is_better(const std::string& metric) {
    return metric == "accuracy" || metric == "agreement" || metric == "in_cell";
}

std::vector<Aggregate> aggregate(const std::vector<ReportRow>& rows) {
    // Keyed by first appearance so the output order follows the rows.
    std::vector<Aggregate> out;
    std::map<std::tuple<std::string, std::string, int, std::string>, std::size_t> index;
    std::vector<std::vector<double>> values;
    for (const auto& r : rows) {
        if (!r.ok()) continue;
        const auto key = std::make_tuple(r.scenario, r.predictor, r.context_len, r.metric);
        auto it = index.find(key);
        if (it == index.end()) {
            it = index.emplace(key, out.size()).first;
            out.push_back(Aggregate{r.scenario, r.predictor, r.context_len, r.metric});
            values.emplace_back();
        }
        values[it->second].push_back(r.value);
    }
    for (std::size_t i = 0; i < out.size(); ++i) {
        const auto& v = values[i];
        double sum = 0.0;
        for (double x : v) sum += x;
        out[i].mean = sum / static_cast<double>(v.size());
        out[i].worst = higher_is_better(out[i].metric) ? *std::min_element(v.begin(), v.end())
                                                       : *std::max_element(v.begin(), v.end());
        out[i].count = v.size();
    }
    return out;
}

RunReport run(const ExperimentConfig& config) {
    validate(config);
    std::vector<Cell> cells;
    for (auto seed : config.seeds) {
        if (per_seed_scenario(config.scenario)) {
            cells.push_back({seed, -1});
        } else {
            for (int t : config.context_grid) cells.push_back({seed, t});
        }
    }
    const CellFn fn = cell_function(config);
    std::vector<std::vector<ReportRow>> results(cells.size());
    std::atomic<std::size_t> next{0};
    auto worker = [&] {
        for (std::size_t i = next++; i < cells.size(); i = next++) {
            try {
                results[i] = fn(cells[i]);
            } catch (const std::exception& ex) {
                const int t = cells[i].context_len;
                results[i] = {ReportRow{config.scenario, "all", t, cells[i].seed, "", "error",
                                        std::numeric_limits<double>::quiet_NaN(), std::string("failed: ") + ex.what()}};
            }
        }
    };
    const unsigned n_threads = std::max(1u, std::min<unsigned>(config.threads, static_cast<unsigned>(cells.size())));
    std::vector<std::thread> pool;
    for (unsigned k = 1; k < n_threads; ++k) pool.emplace_back(worker);
    worker();
    for (auto& th : pool) th.join();

    RunReport report;
    for (auto& r : results) {
        for (auto& row : r) report.rows.push_back(std::move(row));
    }
    report.aggregates = aggregate(report.rows);
    report.provenance = {config.hash(), ICRM_VERSION, config.seeds.front()};
    if (config.scenario == "discrete-zoom") report.warnings = monotonicity_warnings(report.rows);
    return report;
}

Format parse_format(const std::string& name) {
    if (name == "csv") return Format::csv;
    if (name == "json") return Format::json;
    throw ConfigError("format must be 'csv' or 'json'");
}

std::string to_csv(const RunReport& report) {
    std::string out = "scenario,predictor,context_len,seed,env,metric,value,status,config_hash\n";
    for (const auto& r : report.rows) {
        out += csv_field(r.scenario) + "," + csv_field(r.predictor) + "," + std::to_string(r.context_len) + "," +
               std::to_string(r.seed) + "," + csv_field(r.env) + "," + csv_field(r.metric) + "," +
               (std::isfinite(r.value) ? fmt_double(r.value) : std::string("nan")) + "," + csv_field(r.status) + "," +
               report.provenance.config_hash + "\n";
    }
    return out;
}

std::string to_json(const RunReport& report) {
    json j;
    j["provenance"] = {{"config_hash", report.provenance.config_hash},
                       {"version", report.provenance.version},
                       {"master_seed", report.provenance.master_seed}};
    j["rows"] = json::array();
    for (const auto& r : report.rows) {
        j["rows"].push_back({{"scenario", r.scenario},
                             {"predictor", r.predictor},
                             {"context_len", r.context_len},
                             {"seed", r.seed},
                             {"env", r.env},
                             {"metric", r.metric},
                             {"value", number_or_null(r.value)},
                             {"status", r.status},
                             {"config_hash", report.provenance.config_hash}});
    }
    j["aggregates"] = json::array();
    for (const auto& a : report.aggregates) {
        j["aggregates"].push_back({{"scenario", a.scenario},
                                   {"predictor", a.predictor},
                                   {"context_len", a.context_len},
                                   {"metric", a.metric},
                                   {"mean", number_or_null(a.mean)},
                                   {"worst", number_or_null(a.worst)},
                                   {"count", a.count}});
    }
    j["warnings"] = report.warnings;
    return j.dump(2) + "\n";
}

RunReport report_from_json(const std::string& text) {
    try {
        const auto j = json::parse(text);
        RunReport r;
        r.provenance.config_hash = j.at("provenance").at("config_hash").get<std::string>();
        r.provenance.version = j.at("provenance").at("version").get<std::string>();
        r.provenance.master_seed = j.at("provenance").at("master_seed").get<std::uint64_t>();
        for (const auto& row : j.at("rows")) {
            r.rows.push_back(ReportRow{row.at("scenario").get<std::string>(), row.at("predictor").get<std::string>(),
                                       row.at("context_len").get<int>(), row.at("seed").get<std::uint64_t>(),
                                       row.at("env").get<std::string>(), row.at("metric").get<std::string>(),
                                       from_number_or_null(row.at("value")), row.at("status").get<std::string>()});
        }
        for (const auto& a : j.at("aggregates")) {
            r.aggregates.push_back(Aggregate{a.at("scenario").get<std::string>(), a.at("predictor").get<std::string>(),
                                             a.at("context_len").get<int>(), a.at("metric").get<std::string>(),
                                             from_number_or_null(a.at("mean")), from_number_or_null(a.at("worst")),
                                             a.at("count").get<std::size_t>()});
        }
        r.warnings = j.at("warnings").get<std::vector<std::string>>();
        return r;
    } catch (const nlohmann::json::exception& ex) {
        throw InvalidArgument(std::string("report JSON: ") + ex.what());
    }
}

std::string emit(const RunReport& report, const std::string& scenario, const std::string& dir, Format format) {
    const fs::path target = fs::path(dir.empty() ? "." : dir) / (scenario + (format == Format::csv ? ".csv" : ".json"));
    write_atomic(target, format == Format::csv ? to_csv(report) : to_json(report));
    return target.string();
}

std::string default_output_dir() {
    const char* env = std::getenv("ICRM_LAB_OUT_DIR");
    return env && *env ? std::string(env) : std::string(".");
}

}  // namespace icrm::runner
