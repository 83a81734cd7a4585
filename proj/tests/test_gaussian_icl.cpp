#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include "icrm/gaussian_icl.hpp"

#include <cmath>
#include <fstream>
#include <sstream>

using namespace icrm;
using namespace icrm::gaussian;

namespace {

const std::string kFixtures = ICRM_FIXTURE_DIR;

Vector v1(double a) { return Vector::Constant(1, a); }
Vector v2(double a, double b) {
    Vector v(2);
    v << a, b;
    return v;
}

EnvParams load_env(const std::string& name) {
    std::ifstream in(kFixtures + "/gaussian/" + name + ".json");
    std::stringstream ss;
    ss << in.rdbuf();
    return EnvParams::from_json_string(ss.str());
}

GmmFit fit_from(const EnvParams& p) {
    GmmFit f;
    f.weights = {p.p(0), p.p(1)};
    f.means = p.mu();
    f.covs = p.sigma();
    return f;
}

std::vector<Vector> xs_of(const std::vector<env::LabeledExample>& ex) {
    std::vector<Vector> out;
    for (const auto& e : ex) out.push_back(e.x);
    return out;
}

}  // namespace

TEST_CASE("MLE on tiny hand-checkable data") {
    std::vector<env::LabeledExample> ex{{v1(1), 0, 0}, {v1(3), 0, 0}, {v1(0), 1, 0}, {v1(1), 1, 0}, {v1(2), 1, 0}};
    const auto fit = fit_env_params_mle(ex);
    CHECK(fit.params.mu(0)(0) == doctest::Approx(2.0));
    CHECK(fit.params.sigma(0)(0, 0) == doctest::Approx(1.0));
    CHECK(fit.params.p(0) == doctest::Approx(0.4));
    CHECK(fit.params.p(1) == doctest::Approx(0.6));
    CHECK_FALSE(fit.floored);
}

TEST_CASE("MLE floors collapsed classes and rejects tiny ones") {
    std::vector<env::LabeledExample> ex{{v1(1), 0, 0}, {v1(1), 0, 0}, {v1(0), 1, 0}, {v1(2), 1, 0}};
    const auto fit = fit_env_params_mle(ex);
    CHECK(fit.floored);
    CHECK(fit.params.sigma(0)(0, 0) == doctest::Approx(1e-6));
    CHECK_THROWS_AS(fit_env_params_mle(std::vector<env::LabeledExample>{{v1(1), 0, 0}, {v1(0), 1, 0}, {v1(2), 1, 0}}),
                    InvalidArgument);
}

TEST_CASE("MLE is consistent") {
    // Unit covariances put the expected flatten distance near 0.015 at this size.
    const auto truth = EnvParams::isotropic(0.6, v2(-1, 0), v2(1, 0.5));
    const auto data = generate(truth, 100000, 21);
    const auto fit = fit_env_params_mle(data);
    CHECK(param_distance(flatten(fit.params), flatten(truth)) < 0.05);
}

TEST_CASE("EM on two separated atoms") {
    std::vector<Vector> xs;
    for (int i = 0; i < 100; ++i) {
        xs.push_back(v1(-1));
        xs.push_back(v1(1));
    }
    const auto fit = fit_gmm_em(xs, 4);
    const double lo = std::min(fit.means[0](0), fit.means[1](0));
    const double hi = std::max(fit.means[0](0), fit.means[1](0));
    CHECK(lo == doctest::Approx(-1.0).epsilon(1e-6));
    CHECK(hi == doctest::Approx(1.0).epsilon(1e-6));
    CHECK(std::abs(fit.weights[0] - 0.5) < 1e-6);
    CHECK(fit.covs[0](0, 0) == doctest::Approx(1e-6).epsilon(1e-3));
    CHECK(fit.covs[1](0, 0) == doctest::Approx(1e-6).epsilon(1e-3));
}

TEST_CASE("EM recovers well separated clusters") {
    const auto truth = EnvParams::isotropic(0.5, v1(-5), v1(5));
    const auto data = generate(truth, 200, 8);
    const auto fit = fit_gmm_em(xs_of(data), 1);
    const auto model = match_and_orient(fit, {{0, truth}});
    CHECK(std::abs(model.params.mu(0)(0) + 5) < 0.3);
    CHECK(std::abs(model.params.mu(1)(0) - 5) < 0.3);
}

TEST_CASE("EM log-likelihood never decreases") {
    Rng rng(77);
    std::uniform_real_distribution<double> u(-3, 3);
    for (int inst = 0; inst < 50; ++inst) {
        const auto truth = EnvParams::isotropic(0.3 + 0.01 * inst, v2(u(rng), u(rng)), v2(u(rng), u(rng)));
        EmConfig cfg;
        cfg.restarts = 2;
        const auto fit = fit_gmm_em(xs_of(generate(truth, 150, 1000 + static_cast<std::uint64_t>(inst))), inst, cfg);
        for (std::size_t i = 1; i < fit.ll_trace.size(); ++i) {
            CHECK(fit.ll_trace[i] >= fit.ll_trace[i - 1] - 1e-9 * std::abs(fit.ll_trace[i - 1]));
        }
    }
}

TEST_CASE("EM is deterministic and independent of the thread count") {
    const auto data = xs_of(generate(load_env("in_cell"), 500, 2));
    EmConfig one, four;
    four.threads = 4;
    const auto a = fit_gmm_em(data, 12, one), b = fit_gmm_em(data, 12, four);
    CHECK(a.log_likelihood == b.log_likelihood);
    CHECK(a.means[0] == b.means[0]);
    CHECK(a.restart_index == b.restart_index);
    CHECK(a.restart_log_likelihoods == b.restart_log_likelihoods);
}

TEST_CASE("EM edge cases") {
    CHECK_THROWS_AS(fit_gmm_em(std::vector<Vector>{v1(0), v1(1), v1(2)}, 0), InvalidArgument);
    const auto deg = fit_gmm_em(std::vector<Vector>(10, v1(3.0)), 0);
    CHECK(deg.degenerate);
}

TEST_CASE("matching and orientation") {
    const auto a = EnvParams::isotropic(0.5, v1(-1), v1(1));
    const auto b = EnvParams::isotropic(0.5, v1(-3), v1(3));
    const std::vector<TrainedEnv> train{{10, a}, {20, b}};
    auto m = match_and_orient(fit_from(a), train);
    CHECK(m.source_env == 10);
    CHECK(m.orientation == Orientation::unswapped);
    m = match_and_orient(fit_from(swap(b)), train);
    CHECK(m.source_env == 20);
    CHECK(m.orientation == Orientation::swapped);
    CHECK(m.params == b);

    // Fit means (+1.1, -0.9) in fitted order; brute-force the four distances.
    const auto fitted = EnvParams::isotropic(0.5, v1(1.1), v1(-0.9));
    const double d_a = (flatten(fitted).flat - flatten(a).flat).norm();
    const double d_a_sw = (flatten(fitted).flat - flatten(swap(a)).flat).norm();
    const double d_b = (flatten(fitted).flat - flatten(b).flat).norm();
    const double d_b_sw = (flatten(fitted).flat - flatten(swap(b)).flat).norm();
    CHECK(d_a_sw < std::min({d_a, d_b, d_b_sw}));
    m = match_and_orient(fit_from(fitted), train);
    CHECK(m.source_env == 10);
    CHECK(m.orientation == Orientation::swapped);
    CHECK(m.distance == doctest::Approx(d_a_sw));
    CHECK(m.params.mu(0)(0) == doctest::Approx(-0.9));
}

TEST_CASE("posterior examples") {
    const auto p = EnvParams::isotropic(0.5, v2(-1, 0), v2(1, 0));
    CHECK(label0_posterior(v2(0, 0), p) == 0.5);
    CHECK(label0_posterior(v2(1, 0), p) == doctest::Approx(1.0 / (1.0 + std::exp(2.0))).epsilon(1e-14));
    // No one-half factor in the alternative form doubles the log ratio.
    CHECK(label0_posterior(v2(1, 0), p, PosteriorForm::unnormalized) ==
          doctest::Approx(1.0 / (1.0 + std::exp(4.0))).epsilon(1e-14));
    CHECK(label0_posterior(v2(100, 0), p) >= 0.0);
    CHECK(label0_posterior(v2(-1000, 0), p) == doctest::Approx(1.0));
}

TEST_CASE("symmetric environment gives one half everywhere") {
    const auto sym = load_env("symmetric");
    for (const auto& q : query_grid(2, -5, 5, 21)) {
        CHECK(std::abs(label0_posterior(q, sym) - 0.5) <= 1e-9);
        CHECK(std::abs(label0_posterior(q, sym, PosteriorForm::unnormalized) - 0.5) <= 1e-9);
    }
}

TEST_CASE("query grid") {
    const auto g = query_grid(2, -3, 3, 10);
    CHECK(g.size() == 100);
    CHECK(g.front() == v2(-3, -3));
    CHECK(g.back()(0) == doctest::Approx(3.0));
}

TEST_CASE("bundle training and serialization") {
    std::vector<env::LabeledExample> data;
    for (const auto& ex : generate(load_env("train_a"), 20000, 1, 0)) data.push_back(ex);
    for (const auto& ex : generate(load_env("train_b"), 20000, 2, 1)) data.push_back(ex);
    const auto bundle = train_bundle(env::Dataset(data, 2), true);
    REQUIRE(bundle.envs.size() == 2);
    CHECK(param_distance(flatten(bundle.envs[0].params), flatten(load_env("train_a"))) < 0.3);
    const auto back = ModelBundle::from_json_string(bundle.to_json_string());
    CHECK(back.envs.size() == 2);
    CHECK(back.envs[1].params == bundle.envs[1].params);
    CHECK(back.envs[1].env_id == 1);
}

TEST_CASE("out-of-distribution evaluation on the shipped fixtures") {
    ModelBundle bundle;
    bundle.envs = {{0, load_env("train_a")}, {1, load_env("train_b")}};
    const auto queries = query_grid(2, -2, 2, 10);
    const auto in = evaluate_ood(bundle, load_env("in_cell"), queries, 0);
    CHECK(in.in_cell);
    CHECK(in.agreement >= 0.99);
    CHECK(in.sup_gap < 0.05);
    CHECK(in.high_margin_queries > 50);
    const auto out = evaluate_ood(bundle, load_env("out_of_cell"), queries, 0);
    CHECK_FALSE(out.in_cell);
    CHECK(out.agreement <= 0.05);
    CHECK(out.oracle_accuracy > 0.9);
    CHECK(out.accuracy < 0.1);
}

TEST_CASE("swapping the matched model maps q to 1 - q") {
    const auto a = load_env("train_a");
    const MatchedModel m{a, 0, Orientation::unswapped, 0.0};
    const MatchedModel ms{swap(a), 0, Orientation::swapped, 0.0};
    for (const auto& q : query_grid(2, -3, 3, 13)) {
        for (auto form : {PosteriorForm::normalized, PosteriorForm::unnormalized}) {
            const double p0 = predict_label0_prob(q, m, form);
            CHECK(p0 >= 0.0);
            CHECK(p0 <= 1.0);
            CHECK(std::abs(predict_label0_prob(q, ms, form) - (1.0 - p0)) < 1e-12);
        }
    }
}

TEST_CASE("restart selection keeps the best final likelihood") {
    const auto truth = load_env("in_cell");
    for (std::uint64_t seed = 0; seed < 10; ++seed) {
        EmConfig cfg;
        cfg.restarts = 4;
        const auto fit = fit_gmm_em(xs_of(generate(truth, 300, 500 + seed)), seed, cfg);
        REQUIRE(fit.restart_log_likelihoods.size() == 4);
        for (double ll : fit.restart_log_likelihoods) CHECK(fit.log_likelihood >= ll);
        CHECK(fit.log_likelihood == fit.restart_log_likelihoods[static_cast<std::size_t>(fit.restart_index)]);
    }
}
