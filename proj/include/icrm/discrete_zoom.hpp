#pragma once

// Exact in-context prediction on finite discrete environments.
//
// A BayesNetSpec is a joint over (E, X, Y) with X and Y finite. Within an
// environment the examples are iid, so a context is summarized exactly by
// its symbol counts and every expectation over contexts can be enumerated
// over count compositions weighted by multinomial coefficients.
//
// The posterior over environments stands in for the amortization map that
// a trained in-context learner would have to approximate.

#include "icrm/common.hpp"
#include "icrm/env_core.hpp"

#include <cstdint>
#include <functional>
#include <map>
#include <string>
#include <vector>

namespace icrm::discrete {

struct BayesNetSpec {
    static constexpr double kRowTol = 1e-12;

    Vector env_prior;               ///< P(E), length |E|
    Matrix x_given_e;               ///< P(X|E), |E| x |X|
    std::vector<Matrix> y_given_xe; ///< per environment, P(Y|X,E) as |X| x |Y|
    std::string name;

    int num_envs() const noexcept { return static_cast<int>(env_prior.size()); }
    int num_symbols() const noexcept { return static_cast<int>(x_given_e.cols()); }
    int num_labels() const noexcept {
        return y_given_xe.empty() ? 0 : static_cast<int>(y_given_xe.front().cols());
    }

    /// Throws InvalidArgument unless all tables are well-formed distributions.
    void validate() const;

    static BayesNetSpec from_json_string(const std::string& text);
    static BayesNetSpec load(const std::string& path);
    std::string to_json_string() const;
};

struct EnvPosterior {
    Vector probs;
};

/// Symbol counts over the X alphabet; the sufficient statistic of a context.
using Counts = std::vector<int>;

/// Symbol index held in a one-dimensional input vector.
int symbol_of(const BayesNetSpec& spec, const Vector& x);
Vector symbol_vector(int symbol);
Counts count_context(const BayesNetSpec& spec, const env::ContextWindow& context);

/// P(E | X=query, C=context).
EnvPosterior posterior_over_envs(const BayesNetSpec& spec, const env::ContextWindow& context,
                                 const Vector& query);
EnvPosterior posterior_from_counts(const BayesNetSpec& spec, const Counts& counts, int query);

/// P(Y | X=query, C=context) = sum_e P(e | query, context) P(Y | query, e).
env::PredictiveDistribution icrm_exact_predict(const BayesNetSpec& spec, const Vector& query,
                                               const env::ContextWindow& context);
Vector icrm_predict_counts(const BayesNetSpec& spec, int query, const Counts& counts);

/// P(Y | X=query) under the environment mixture.
env::PredictiveDistribution pooled_bayes_predict(const BayesNetSpec& spec, const Vector& query);

/// Predictor adapters for the autoregressive loss harness.
env::Predictor exact_predictor(const BayesNetSpec& spec);
env::Predictor pooled_predictor(const BayesNetSpec& spec);

// --- exact information quantities (nats) -----------------------------------

double h_y_given_x(const BayesNetSpec& spec);
double h_y_given_x_e(const BayesNetSpec& spec);
double mi_y_e_given_x(const BayesNetSpec& spec);
double mi_x_e(const BayesNetSpec& spec);
double mi_y_x_given_e(const BayesNetSpec& spec);
double mi_y_e(const BayesNetSpec& spec);

/// Number of count compositions of a length-t context over the alphabet.
double context_state_count(const BayesNetSpec& spec, int t);

/// H(Y | X, C_t) by full enumeration of count compositions.
double h_y_given_x_c_exact(const BayesNetSpec& spec, int t);

struct McEstimate {
    double mean = 0.0;
    double std_error = 0.0;
    std::size_t samples = 0;
};

/// H(Y | X, C_t) estimated from `samples` contexts. Shards of fixed size get
/// derived seeds and are merged by shard index, so the result does not depend
/// on `threads`.
McEstimate h_y_given_x_c_mc(const BayesNetSpec& spec, int t, std::size_t samples, std::uint64_t seed,
                            unsigned threads = 1);

/// Any predictor expressed over (query symbol, context counts).
using CountPredictor = std::function<Vector(int, const Counts&)>;

/// E[-ln q(Y | X, C_t)] for a count predictor q, by enumeration.
/// Probabilities are clamped like PredictiveDistribution::cross_entropy.
double expected_cross_entropy_exact(const BayesNetSpec& spec, int t, const CountPredictor& predictor);

struct CurvePoint {
    double nats = 0.0;
    double std_error = 0.0;
    bool exact = true;
};

struct EntropyReport {
    double h_y_given_x = 0.0;
    double h_y_given_x_e = 0.0;
    std::map<int, CurvePoint> h_y_given_x_c;
    double i_y_e_given_x = 0.0;
};

struct EntropyOptions {
    double exact_state_limit = 1e6;
    unsigned threads = 1;
};

EntropyReport entropy_curve(const BayesNetSpec& spec, int t_max, std::size_t mc_contexts, std::uint64_t seed,
                            const EntropyOptions& options = {});

/// One environment-pure sequence: draws E, then t iid (x, y) pairs.
env::Sequence sample_sequence(const BayesNetSpec& spec, std::size_t t, Rng& rng);

// --- canonical scenarios ---------------------------------------------------

/// E uniform on {0,1}; P(X=1|E=1) = p_hi, P(X=1|E=0) = 1 - p_hi; Y = X xor E.
BayesNetSpec xor_scenario(double p_hi = 0.9);

/// The three Markov-blanket layouts used in the strict partial zoom-in proof.
///   case_a: E -> Y -> X
///   case_b: E -> X, E -> Y, X -> Y
///   case_c: E -> X <- Y, with Y independent of E
enum class DagCase { case_a, case_b, case_c };

/// Binary DAG scenario from explicit CPTs.
///   case_a: cpt = {P(E=1), P(Y=1|E=0), P(Y=1|E=1), P(X=1|Y=0), P(X=1|Y=1)}
///   case_b: cpt = {P(E=1), P(X=1|E=0), P(X=1|E=1), P(Y=1|x0e0), P(Y=1|x1e0), P(Y=1|x0e1), P(Y=1|x1e1)}
///   case_c: cpt = {P(E=1), P(Y=1), P(X=1|y0e0), P(X=1|y1e0), P(X=1|y0e1), P(X=1|y1e1)}
BayesNetSpec dag_scenario(DagCase which, const std::vector<double>& cpt);

/// Random CPTs in [0.05, 0.95], redrawn until `is_faithful` holds.
BayesNetSpec random_dag_scenario(DagCase which, std::uint64_t seed);

/// X and E dependent, and Y dependent on E given X and on X given E,
/// each mutual information above `tol`.
bool is_faithful(const BayesNetSpec& spec, double tol = 1e-9);

}  // namespace icrm::discrete
