#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include "icrm/discrete_zoom.hpp"

#include <cmath>
#include <string>

using namespace icrm;
using namespace icrm::discrete;

namespace {

const std::string kFixtures = ICRM_FIXTURE_DIR;

env::ContextWindow ctx_of(const std::vector<int>& symbols) {
    env::ContextWindow c;
    for (int s : symbols) c.items.push_back(symbol_vector(s));
    return c;
}

// Brute force over every ordered sequence of t symbols: H(Y | X, C_t) from
// the joint over (E, x_1..x_t, X, Y). Independent of the composition code.
double brute_force_h(const BayesNetSpec& spec, int t) {
    const int ne = spec.num_envs(), nx = spec.num_symbols();
    const int ny = static_cast<int>(spec.y_given_xe[0].cols());
    long long total = 1;
    for (int i = 0; i < t; ++i) total *= nx;
    double h = 0.0;
    for (long long code = 0; code < total; ++code) {
        std::vector<int> seq(static_cast<std::size_t>(t));
        long long c = code;
        for (int i = 0; i < t; ++i) {
            seq[static_cast<std::size_t>(i)] = static_cast<int>(c % nx);
            c /= nx;
        }
        for (int q = 0; q < nx; ++q) {
            std::vector<double> joint_y(static_cast<std::size_t>(ny), 0.0);
            for (int e = 0; e < ne; ++e) {
                double w = spec.env_prior(e) * spec.x_given_e(e, q);
                for (int s : seq) w *= spec.x_given_e(e, s);
                for (int y = 0; y < ny; ++y) joint_y[static_cast<std::size_t>(y)] += w * spec.y_given_xe[static_cast<std::size_t>(e)](q, y);
            }
            double mass = 0.0;
            for (double v : joint_y) mass += v;
            for (double v : joint_y) {
                if (v > 0) h -= v * std::log(v / mass);
            }
        }
    }
    return h;
}

}  // namespace

TEST_CASE("posterior over environments by hand") {
    const auto spec = xor_scenario();
    const auto post = posterior_over_envs(spec, ctx_of({}), symbol_vector(1));
    CHECK(post.probs(0) == doctest::Approx(0.1).epsilon(1e-14));
    CHECK(post.probs(1) == doctest::Approx(0.9).epsilon(1e-14));

    const auto post6 = posterior_over_envs(spec, ctx_of({1, 1, 1, 1, 1}), symbol_vector(1));
    const double expected = std::pow(0.9, 6) / (std::pow(0.9, 6) + std::pow(0.1, 6));
    CHECK(post6.probs(1) == doctest::Approx(expected).epsilon(1e-13));
    CHECK(post6.probs(1) == doctest::Approx(0.999998).epsilon(1e-6));
}

TEST_CASE("query independent of the environment leaves the prior unchanged") {
    BayesNetSpec spec = xor_scenario();
    spec.env_prior << 0.3, 0.7;
    spec.x_given_e << 0.4, 0.6, 0.4, 0.6;
    const auto post = posterior_over_envs(spec, ctx_of({}), symbol_vector(0));
    CHECK(post.probs(0) == doctest::Approx(0.3).epsilon(1e-14));
}

TEST_CASE("xor predictions") {
    const auto spec = xor_scenario();
    CHECK(pooled_bayes_predict(spec, symbol_vector(1))[1] == doctest::Approx(0.1).epsilon(1e-14));
    // Y = X xor E makes Y = 1 exactly when E differs from X, which has posterior 0.1 for either query.
    CHECK(pooled_bayes_predict(spec, symbol_vector(0))[1] == doctest::Approx(0.1).epsilon(1e-14));
    CHECK(icrm_exact_predict(spec, symbol_vector(1), ctx_of({}))[1] == doctest::Approx(0.1).epsilon(1e-14));
}

TEST_CASE("empty-context prediction equals pooled Bayes on every fixture") {
    for (const char* name : {"xor", "dag_case_a", "dag_case_b", "dag_case_c"}) {
        const auto spec = BayesNetSpec::load(kFixtures + "/discrete/" + name + ".json");
        for (int q = 0; q < spec.num_symbols(); ++q) {
            const auto a = icrm_exact_predict(spec, symbol_vector(q), ctx_of({}));
            const auto b = pooled_bayes_predict(spec, symbol_vector(q));
            CHECK((a.probs() - b.probs()).cwiseAbs().sum() / 2 < 1e-12);
        }
    }
}

TEST_CASE("twenty draws from one environment pin the prediction to that environment") {
    // The label table of E=1 is read from the spec rather than hard-coded.
    const auto spec = xor_scenario();
    Rng rng(3);
    double worst = 0.0;
    for (int rep = 0; rep < 200; ++rep) {
        std::vector<int> symbols;
        std::bernoulli_distribution x1(spec.x_given_e(1, 1));
        for (int i = 0; i < 20; ++i) symbols.push_back(x1(rng) ? 1 : 0);
        // Skip the rare contexts that look like E=0 (at most 10 ones out of 20).
        int ones = 0;
        for (int s : symbols) ones += s;
        if (ones <= 10) continue;
        const double p = icrm_exact_predict(spec, symbol_vector(1), ctx_of(symbols))[1];
        worst = std::max(worst, std::abs(p - spec.y_given_xe[1](1, 1)));
    }
    CHECK(worst < 1e-3);
}

TEST_CASE("single environment: prediction is that environment's table") {
    BayesNetSpec spec;
    spec.env_prior = Vector::Ones(1);
    spec.x_given_e = Matrix(1, 2);
    spec.x_given_e << 0.3, 0.7;
    Matrix y(2, 2);
    y << 0.2, 0.8, 0.6, 0.4;
    spec.y_given_xe = {y};
    spec.validate();
    CHECK(pooled_bayes_predict(spec, symbol_vector(0))[1] == doctest::Approx(0.8).epsilon(1e-14));
    CHECK(icrm_exact_predict(spec, symbol_vector(1), ctx_of({0, 1, 1}))[1] == doctest::Approx(0.4).epsilon(1e-14));
}

TEST_CASE("xor entropies") {
    const auto spec = xor_scenario();
    const double hb = -0.1 * std::log(0.1) - 0.9 * std::log(0.9);
    CHECK(h_y_given_x(spec) == doctest::Approx(hb).epsilon(1e-14));
    CHECK(h_y_given_x(spec) == doctest::Approx(0.3251).epsilon(1e-4));
    CHECK(h_y_given_x_e(spec) == doctest::Approx(0.0));
    CHECK(mi_y_e_given_x(spec) == doctest::Approx(hb).epsilon(1e-12));
    double prev = h_y_given_x_c_exact(spec, 0);
    CHECK(prev == doctest::Approx(hb).epsilon(1e-12));
    for (int t = 1; t <= 50; ++t) {
        const double h = h_y_given_x_c_exact(spec, t);
        CHECK(h <= prev + 1e-15);
        prev = h;
    }
    CHECK(prev < 0.01);
}

TEST_CASE("deterministic shared label function: everything is zero") {
    BayesNetSpec spec = xor_scenario();
    Matrix y(2, 2);
    y << 1.0, 0.0, 0.0, 1.0;
    spec.y_given_xe = {y, y};
    CHECK(h_y_given_x(spec) == 0.0);
    CHECK(h_y_given_x_e(spec) == 0.0);
    CHECK(mi_y_e_given_x(spec) == doctest::Approx(0.0));
    for (int t = 0; t < 5; ++t) CHECK(h_y_given_x_c_exact(spec, t) == doctest::Approx(0.0));
}

TEST_CASE("composition enumeration matches brute force over sequences") {
    for (const char* name : {"xor", "dag_case_a", "dag_case_b", "dag_case_c"}) {
        const auto spec = BayesNetSpec::load(kFixtures + "/discrete/" + name + ".json");
        for (int t = 0; t <= 6; ++t) {
            CHECK(h_y_given_x_c_exact(spec, t) == doctest::Approx(brute_force_h(spec, t)).epsilon(1e-12));
        }
    }
    const auto r = random_dag_scenario(DagCase::case_b, 5);
    CHECK(h_y_given_x_c_exact(r, 5) == doctest::Approx(brute_force_h(r, 5)).epsilon(1e-12));
}

TEST_CASE("context state count is a binomial coefficient") {
    const auto spec = xor_scenario();  // two symbols
    CHECK(context_state_count(spec, 0) == 1.0);
    CHECK(context_state_count(spec, 50) == 51.0);
    const auto b = BayesNetSpec::load(kFixtures + "/discrete/dag_case_b.json");
    REQUIRE(b.num_symbols() == 2);
    CHECK(context_state_count(b, 10) == 11.0);
}

TEST_CASE("strict partial zoom-in on the DAG fixtures") {
    for (const char* name : {"dag_case_a", "dag_case_b", "dag_case_c"}) {
        const auto spec = BayesNetSpec::load(kFixtures + "/discrete/" + name + ".json");
        CHECK(is_faithful(spec));
        for (int t = 0; t < 3; ++t) {
            CHECK(h_y_given_x_c_exact(spec, t) - h_y_given_x_c_exact(spec, t + 1) > 1e-6);
        }
        CHECK(h_y_given_x_c_exact(spec, 3) > h_y_given_x_e(spec));
    }
}

TEST_CASE("random faithful DAGs also decrease strictly") {
    for (auto which : {DagCase::case_a, DagCase::case_b, DagCase::case_c}) {
        for (std::uint64_t seed = 0; seed < 5; ++seed) {
            const auto spec = random_dag_scenario(which, seed);
            REQUIRE(is_faithful(spec));
            for (int t = 0; t < 3; ++t) CHECK(h_y_given_x_c_exact(spec, t) > h_y_given_x_c_exact(spec, t + 1));
        }
    }
}

TEST_CASE("information identities") {
    const auto spec = BayesNetSpec::load(kFixtures + "/discrete/dag_case_b.json");
    CHECK(h_y_given_x(spec) - h_y_given_x_e(spec) == doctest::Approx(mi_y_e_given_x(spec)).epsilon(1e-12));
    CHECK(mi_x_e(spec) > 0);
    CHECK(mi_y_x_given_e(spec) > 0);
    const auto c = BayesNetSpec::load(kFixtures + "/discrete/dag_case_c.json");
    CHECK(mi_y_e(c) == doctest::Approx(0.0).scale(1.0));  // Y independent of E by construction
}

TEST_CASE("Monte Carlo estimate agrees with enumeration and ignores the thread count") {
    const auto spec = BayesNetSpec::load(kFixtures + "/discrete/dag_case_a.json");
    const double exact = h_y_given_x_c_exact(spec, 8);
    const auto one = h_y_given_x_c_mc(spec, 8, 20000, 99, 1);
    const auto four = h_y_given_x_c_mc(spec, 8, 20000, 99, 4);
    CHECK(one.mean == four.mean);
    CHECK(one.std_error == four.std_error);
    CHECK(std::abs(one.mean - exact) < 4 * one.std_error);
}

TEST_CASE("entropy curve switches to Monte Carlo above the state limit") {
    const auto spec = xor_scenario();
    EntropyOptions opts;
    opts.exact_state_limit = 10;
    const auto rep = entropy_curve(spec, 12, 5000, 1, opts);
    CHECK(rep.h_y_given_x_c.at(9).exact);
    CHECK_FALSE(rep.h_y_given_x_c.at(12).exact);
    CHECK(rep.h_y_given_x_c.at(12).std_error > 0);
}

TEST_CASE("exact predictor is Bayes optimal at each context length") {
    const auto spec = BayesNetSpec::load(kFixtures + "/discrete/dag_case_b.json");
    const CountPredictor exact = [&](int q, const Counts& c) { return icrm_predict_counts(spec, q, c); };
    const CountPredictor pooled = [&](int q, const Counts&) { return pooled_bayes_predict(spec, symbol_vector(q)).probs(); };
    for (int t = 0; t <= 4; ++t) {
        CHECK(expected_cross_entropy_exact(spec, t, exact) == doctest::Approx(h_y_given_x_c_exact(spec, t)).epsilon(1e-12));
        if (t > 0) CHECK(expected_cross_entropy_exact(spec, t, pooled) > h_y_given_x_c_exact(spec, t));
    }
}

TEST_CASE("exact predictor beats 100 randomly perturbed predictors") {
    const auto spec = BayesNetSpec::load(kFixtures + "/discrete/dag_case_a.json");
    Rng rng(3);
    std::normal_distribution<double> noise(0.0, 0.5);
    for (int t = 0; t <= 3; ++t) {
        const double best = h_y_given_x_c_exact(spec, t);
        for (int k = 0; k < 100; ++k) {
            const double shift = noise(rng);
            const CountPredictor perturbed = [&](int q, const Counts& c) {
                Vector p = icrm_predict_counts(spec, q, c);
                // Shift the logit of label 1 by a fixed amount per predictor.
                const double logit = std::log(p(1)) - std::log(p(0)) + shift;
                p(1) = 1.0 / (1.0 + std::exp(-logit));
                p(0) = 1.0 - p(1);
                return p;
            };
            CHECK(expected_cross_entropy_exact(spec, t, perturbed) >= best - 1e-12);
        }
    }
}

TEST_CASE("pooled loss exceeds the asymptotic in-context loss by I(Y;E|X)") {
    for (const char* name : {"xor", "dag_case_a", "dag_case_b", "dag_case_c"}) {
        const auto spec = BayesNetSpec::load(kFixtures + "/discrete/" + name + ".json");
        const CountPredictor pooled = [&](int q, const Counts&) { return pooled_bayes_predict(spec, symbol_vector(q)).probs(); };
        const double gap = expected_cross_entropy_exact(spec, 3, pooled) - h_y_given_x_e(spec);
        CHECK(gap == doctest::Approx(mi_y_e_given_x(spec)).epsilon(1e-12));
    }
}

TEST_CASE("spec validation and JSON round trip") {
    const auto spec = BayesNetSpec::load(kFixtures + "/discrete/dag_case_a.json");
    const auto back = BayesNetSpec::from_json_string(spec.to_json_string());
    CHECK(back.env_prior == spec.env_prior);
    CHECK(back.x_given_e == spec.x_given_e);
    CHECK(back.name == spec.name);
    auto bad = spec;
    bad.env_prior(0) += 1e-6;
    CHECK_THROWS_AS(bad.validate(), InvalidArgument);
    CHECK_THROWS_AS(BayesNetSpec::from_json_string("{\"env_prior\": [1.0]}"), InvalidArgument);
}

TEST_CASE("zero-likelihood context is a numerical error") {
    BayesNetSpec spec = xor_scenario();
    spec.x_given_e << 1.0, 0.0, 1.0, 0.0;  // symbol 1 impossible everywhere
    CHECK_THROWS_AS(posterior_over_envs(spec, ctx_of({1}), symbol_vector(0)), NumericalError);
}
