#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include "icrm/discrete_zoom.hpp"
#include "icrm/env_core.hpp"

#include <array>
#include <cmath>
#include <set>

using namespace icrm;
using namespace icrm::env;

namespace {

LabeledExample ex(double x, int y, int e) { return {Vector::Constant(1, x), y, e}; }

Dataset two_envs(int per_env) {
    std::vector<LabeledExample> v;
    for (int i = 0; i < per_env; ++i) {
        v.push_back(ex(i, 0, 0));
        v.push_back(ex(100 + i, 1, 1));
    }
    return Dataset(v, 2);
}

}  // namespace

TEST_CASE("single-example environment forces repetition") {
    Dataset d({ex(1.0, 0, 0)}, 2);
    const auto s = sample_icrm_sequence(d, 0, 3, 123);
    REQUIRE(s.size() == 3);
    for (std::size_t i = 0; i < 3; ++i) {
        CHECK(s.inputs[i](0) == 1.0);
        CHECK(s.targets[i] == 0);
        CHECK(s.envs[i] == 0);
    }
    CHECK(s.provenance == Provenance::icrm);
}

TEST_CASE("icrm sequences stay inside their environment and are seed-deterministic") {
    const auto d = two_envs(10);
    const auto a = sample_icrm_sequence(d, 1, 10, 7);
    const auto b = sample_icrm_sequence(d, 1, 10, 7);
    for (std::size_t i = 0; i < a.size(); ++i) {
        CHECK(a.envs[i] == 1);
        CHECK(a.inputs[i] == b.inputs[i]);
        CHECK(a.targets[i] == b.targets[i]);
    }
    CHECK(sample_icrm_sequence(d, 1, 10, 8).inputs != a.inputs);
}

TEST_CASE("sampler errors") {
    const auto d = two_envs(3);
    CHECK_THROWS_AS(sample_icrm_sequence(d, 5, 3, 0), InvalidArgument);
    CHECK_THROWS_AS(sample_icrm_sequence(d, 0, 0, 0), InvalidArgument);
    CHECK_THROWS_AS(sample_mix_sequence(Dataset({}, 2), 3, 0), InvalidArgument);
}

TEST_CASE("mix sequences over one environment match the icrm sampler in distribution") {
    Dataset d({ex(0, 0, 4), ex(1, 1, 4), ex(2, 0, 4)}, 2);
    std::array<int, 3> mix{}, pure{};
    for (std::uint64_t s = 0; s < 3000; ++s) {
        mix[static_cast<std::size_t>(sample_mix_sequence(d, 1, s).inputs[0](0))]++;
        pure[static_cast<std::size_t>(sample_icrm_sequence(d, 4, 1, s).inputs[0](0))]++;
    }
    for (std::size_t k = 0; k < 3; ++k) {
        // Both near 1000; binomial sd is about 26.
        CHECK(std::abs(mix[k] - 1000) < 120);
        CHECK(std::abs(pure[k] - 1000) < 120);
    }
    CHECK(sample_mix_sequence(d, 5, 1).provenance == Provenance::icrm_mix);
}

TEST_CASE("mix sequences of length 20 almost always cover both environments") {
    // P(single env) = 2 * 2^-20; over 1000 seeds at least 999 should see both.
    const auto d = two_envs(10);
    int both = 0;
    for (std::uint64_t s = 0; s < 1000; ++s) {
        const auto seq = sample_mix_sequence(d, 20, s);
        std::set<int> envs(seq.envs.begin(), seq.envs.end());
        both += envs.size() == 2;
    }
    CHECK(both >= 999);
}

TEST_CASE("dataset validation and JSONL round trip") {
    CHECK_THROWS_AS(Dataset({ex(0, 0, 0), LabeledExample{Vector::Zero(2), 0, 0}}, 2), InvalidArgument);
    CHECK_THROWS_AS(Dataset({ex(0, 3, 0)}, 2), InvalidArgument);
    CHECK_THROWS_AS(Dataset({ex(std::nan(""), 0, 0)}, 2), InvalidArgument);
    const auto d = two_envs(2);
    const auto back = Dataset::parse_jsonl(d.to_jsonl(), 2);
    REQUIRE(back.examples().size() == d.examples().size());
    for (std::size_t i = 0; i < d.examples().size(); ++i) {
        CHECK(back.examples()[i].x == d.examples()[i].x);
        CHECK(back.examples()[i].y == d.examples()[i].y);
        CHECK(back.examples()[i].e == d.examples()[i].e);
    }
    CHECK(back.environments() == std::vector<int>{0, 1});
    CHECK_THROWS_AS(Dataset::parse_jsonl("{\"x\": [1], \"y\": 0}\n"), InvalidArgument);
    CHECK_THROWS_AS(Dataset::parse_jsonl("not json\n"), InvalidArgument);
}

TEST_CASE("predictive distribution validation") {
    CHECK_THROWS_AS(PredictiveDistribution::binary(1.5), InvalidArgument);
    Vector bad(2);
    bad << 0.5, 0.6;
    CHECK_THROWS_AS(PredictiveDistribution{bad}, InvalidArgument);
    CHECK(PredictiveDistribution::uniform(4).entropy() == doctest::Approx(std::log(4.0)));
}

TEST_CASE("autoregressive loss examples") {
    Sequence s;
    for (int i = 0; i < 5; ++i) {
        s.inputs.push_back(Vector::Constant(1, i % 2));
        s.targets.push_back(i % 2);
    }
    const Predictor perfect = [](const Vector& x, const ContextWindow&) {
        return PredictiveDistribution::binary(x(0));
    };
    // The upper clamp at 1 - 1e-12 leaves about 1e-12 per step.
    CHECK(autoregressive_loss(perfect, s) < 1e-10);

    Sequence three = s;
    three.inputs.resize(3);
    three.targets.resize(3);
    const Predictor uniform = [](const Vector&, const ContextWindow&) { return PredictiveDistribution::uniform(2); };
    CHECK(autoregressive_loss(uniform, three) == doctest::Approx(3.0 * std::log(2.0)).epsilon(1e-14));
}

TEST_CASE("context window grows one item per step") {
    Sequence s;
    for (int i = 0; i < 4; ++i) {
        s.inputs.push_back(Vector::Constant(1, i));
        s.targets.push_back(0);
    }
    std::vector<std::size_t> sizes;
    const Predictor p = [&](const Vector& x, const ContextWindow& c) {
        sizes.push_back(c.size());
        for (std::size_t j = 0; j < c.size(); ++j) CHECK(c.items[j](0) < x(0));
        return PredictiveDistribution::uniform(2);
    };
    autoregressive_loss(p, s);
    CHECK(sizes == std::vector<std::size_t>{0, 1, 2, 3});
}

TEST_CASE("zero probability on the target is an infinite loss; tiny ones are clamped") {
    Sequence s;
    s.inputs = {Vector::Constant(1, 0.0), Vector::Constant(1, 0.0)};
    s.targets = {0, 1};
    const Predictor certain = [](const Vector&, const ContextWindow&) { return PredictiveDistribution::binary(0.0); };
    try {
        autoregressive_loss(certain, s);
        FAIL("expected InfiniteLossError");
    } catch (const InfiniteLossError& e) {
        CHECK(e.step() == 1);
    }
    const Predictor tiny = [](const Vector&, const ContextWindow&) { return PredictiveDistribution::binary(1e-15); };
    const auto lb = autoregressive_loss_detailed(tiny, s);
    // Step 0 hits the upper clamp, step 1 the lower one.
    CHECK(lb.clamped_steps == 2);
    CHECK(lb.per_step[1] == doctest::Approx(-std::log(1e-12)));
}

TEST_CASE("exact in-context predictor minimizes the expected autoregressive loss") {
    // Bayes optimality on XOR: the Monte Carlo mean of the exact predictor's
    // loss matches the sum of exact conditional entropies, and pooled Bayes is worse.
    const auto spec = discrete::xor_scenario();
    const std::size_t t = 6;
    double expected = 0.0;
    for (int j = 0; j < static_cast<int>(t); ++j) expected += discrete::h_y_given_x_c_exact(spec, j);
    const auto exact = discrete::exact_predictor(spec);
    const auto pooled = discrete::pooled_predictor(spec);
    Rng rng(11);
    double sum = 0.0, sum_sq = 0.0, pooled_sum = 0.0;
    const int n = 20000;
    for (int i = 0; i < n; ++i) {
        const auto seq = discrete::sample_sequence(spec, t, rng);
        const double l = autoregressive_loss(exact, seq);
        sum += l;
        sum_sq += l * l;
        pooled_sum += autoregressive_loss(pooled, seq);
    }
    const double mean = sum / n;
    const double se = std::sqrt((sum_sq / n - mean * mean) / n);
    CHECK(std::abs(mean - expected) < 4 * se);
    CHECK(pooled_sum / n > mean);
}

TEST_CASE("mix draws follow the pooled marginal (chi-square, 9 degrees of freedom)") {
    // Unequal environment sizes: a per-environment scheme would not be uniform over examples.
    std::vector<LabeledExample> v;
    for (int i = 0; i < 3; ++i) v.push_back(ex(i, 0, 0));
    for (int i = 3; i < 10; ++i) v.push_back(ex(i, 1, 1));
    const Dataset d(v, 2);
    std::array<int, 10> counts{};
    for (std::uint64_t s = 0; s < 1000; ++s) {
        for (const auto& x : sample_mix_sequence(d, 10, s).inputs) counts[static_cast<std::size_t>(x(0))]++;
    }
    double stat = 0.0;
    for (int c : counts) stat += (c - 1000.0) * (c - 1000.0) / 1000.0;
    // Upper 1% point of chi-square with 9 degrees of freedom.
    CHECK(stat < 21.666);
}

TEST_CASE("autoregressive loss is additive over a prefix split") {
    const auto spec = discrete::xor_scenario();
    const auto exact = discrete::exact_predictor(spec);
    Rng rng(5);
    const auto seq = discrete::sample_sequence(spec, 12, rng);
    const auto full = autoregressive_loss_detailed(exact, seq);
    for (std::size_t k = 1; k < 12; ++k) {
        Sequence prefix = seq;
        prefix.inputs.resize(k);
        prefix.targets.resize(k);
        prefix.envs.resize(k);
        double rest = 0.0;
        for (std::size_t j = k; j < 12; ++j) rest += full.per_step[j];
        CHECK(autoregressive_loss(exact, prefix) + rest == doctest::Approx(full.total).epsilon(1e-14));
    }
}
