#include "icrm/gaussian_icl.hpp"

#include <json.hpp>

#include <cmath>
#include <future>
#include <limits>
#include <numbers>

namespace icrm::gaussian {

namespace {

constexpr double kLog2Pi = 1.8378770664093454836;

/// Projects a symmetric matrix onto {lambda_min >= floor} (Frobenius-nearest,
/// and the constrained Gaussian covariance MLE).
Matrix clip_eigenvalues(const Matrix& s, double floor) {
    Eigen::SelfAdjointEigenSolver<Matrix> es(s);
    const Vector lam = es.eigenvalues().cwiseMax(floor);
    Matrix out = es.eigenvectors() * lam.asDiagonal() * es.eigenvectors().transpose();
    return 0.5 * (out + out.transpose());
}

Matrix apply_floor(const Matrix& s, double floor, bool diagonal_only) {
    if (diagonal_only) {
        Matrix out = Matrix::Zero(s.rows(), s.cols());
        for (Eigen::Index i = 0; i < s.rows(); ++i) out(i, i) = std::max(s(i, i), floor);
        return out;
    }
    return clip_eigenvalues(s, floor);
}

class GaussianLogDensity {
public:
    GaussianLogDensity(const Vector& mean, const Matrix& cov) : mean_(mean), llt_(cov) {
        if (llt_.info() != Eigen::Success) throw NumericalError("covariance is not positive definite");
        log_det_ = 2.0 * llt_.matrixL().toDenseMatrix().diagonal().array().log().sum();
    }
    double mahalanobis_sq(const Vector& x) const {
        const Vector z = llt_.matrixL().solve(x - mean_);
        return z.squaredNorm();
    }
    double operator()(const Vector& x) const {
        return -0.5 * (static_cast<double>(mean_.size()) * kLog2Pi + log_det_ + mahalanobis_sq(x));
    }

private:
    Vector mean_;
    Eigen::LLT<Matrix> llt_;
    double log_det_ = 0.0;
};

struct EmState {
    std::array<double, 2> w{};
    std::array<Vector, 2> mu;
    std::array<Matrix, 2> cov;
};

EmState m_step(std::span<const Vector> xs, const Matrix& resp, double floor, bool diagonal_only) {
    const Eigen::Index d = xs.front().size();
    const double n = static_cast<double>(xs.size());
    EmState s;
    for (int k = 0; k < 2; ++k) {
        const auto uk = static_cast<std::size_t>(k);
        const double nk = resp.col(k).sum();
        s.w[uk] = nk / n;
        Vector mu = Vector::Zero(d);
        for (std::size_t i = 0; i < xs.size(); ++i) mu += resp(static_cast<Eigen::Index>(i), k) * xs[i];
        mu /= nk;
        Matrix cov = Matrix::Zero(d, d);
        for (std::size_t i = 0; i < xs.size(); ++i) {
            const Vector c = xs[i] - mu;
            cov.noalias() += resp(static_cast<Eigen::Index>(i), k) * c * c.transpose();
        }
        cov /= nk;
        s.mu[uk] = std::move(mu);
        s.cov[uk] = apply_floor(0.5 * (cov + cov.transpose()), floor, diagonal_only);
    }
    return s;
}

/// E-step; fills responsibilities and returns the log-likelihood.
double e_step(std::span<const Vector> xs, const EmState& s, Matrix& resp) {
    const std::array<GaussianLogDensity, 2> dens{GaussianLogDensity(s.mu[0], s.cov[0]),
                                                 GaussianLogDensity(s.mu[1], s.cov[1])};
    const std::array<double, 2> lw{std::log(s.w[0]), std::log(s.w[1])};
    double ll = 0.0;
    for (std::size_t i = 0; i < xs.size(); ++i) {
        Vector l(2);
        l << lw[0] + dens[0](xs[i]), lw[1] + dens[1](xs[i]);
        const double lse = log_sum_exp(l);
        ll += lse;
        resp.row(static_cast<Eigen::Index>(i)) = (l.array() - lse).exp().matrix().transpose();
    }
    return ll;
}

GmmFit run_em(std::span<const Vector> xs, std::uint64_t seed, const EmConfig& cfg) {
    const std::size_t n = xs.size();
    const auto ni = static_cast<Eigen::Index>(n);
    Rng rng(seed);

    // k-means++ seeding: first centre uniform, second proportional to D^2.
    std::uniform_int_distribution<std::size_t> pick(0, n - 1);
    const Vector c0 = xs[pick(rng)];
    Vector d2(ni);
    for (std::size_t i = 0; i < n; ++i) d2(static_cast<Eigen::Index>(i)) = (xs[i] - c0).squaredNorm();
    std::uniform_real_distribution<double> u(0.0, d2.sum());
    const double r = u(rng);
    double acc = 0.0;
    std::size_t second = n - 1;
    for (std::size_t i = 0; i < n; ++i) {
        acc += d2(static_cast<Eigen::Index>(i));
        if (r < acc) {
            second = i;
            break;
        }
    }
    const Vector c1 = xs[second];

    Matrix resp = Matrix::Zero(ni, 2);
    for (std::size_t i = 0; i < n; ++i) {
        const bool first = (xs[i] - c0).squaredNorm() <= (xs[i] - c1).squaredNorm();
        resp(static_cast<Eigen::Index>(i), first ? 0 : 1) = 1.0;
    }
    // A cluster left empty by the hard split gets one point so the M-step is defined.
    for (int k = 0; k < 2; ++k) {
        if (resp.col(k).sum() == 0.0) {
            const std::size_t idx = k == 0 ? 0 : second;
            resp.row(static_cast<Eigen::Index>(idx)).setZero();
            resp(static_cast<Eigen::Index>(idx), k) = 1.0;
        }
    }

    EmState state = m_step(xs, resp, cfg.cov_floor, cfg.diagonal_only);
    GmmFit fit;
    double prev = -std::numeric_limits<double>::infinity();
    for (int it = 0; it < cfg.max_iter; ++it) {
        const double ll = e_step(xs, state, resp);
        fit.ll_trace.push_back(ll);
        fit.iterations = it + 1;
        if (ll - prev < cfg.tol) {
            fit.converged = true;
            break;
        }
        prev = ll;
        state = m_step(xs, resp, cfg.cov_floor, cfg.diagonal_only);
    }
    fit.weights = state.w;
    fit.means = state.mu;
    fit.covs = state.cov;
    fit.log_likelihood = fit.ll_trace.back();
    return fit;
}

}  // namespace

// ---------------------------------------------------------------------------

MleFit fit_env_params_mle(std::span<const env::LabeledExample> examples, bool diagonal_only, double cov_floor) {
    if (examples.empty()) throw InvalidArgument("no examples");
    const Eigen::Index d = examples.front().x.size();
    if (d < 1) throw InvalidArgument("inputs must have dimension >= 1");
    std::array<std::vector<const Vector*>, 2> by_class;
    for (const auto& ex : examples) {
        if (ex.x.size() != d) throw InvalidArgument("inconsistent input dimension");
        if (ex.y != 0 && ex.y != 1) throw InvalidArgument("labels must be binary");
        by_class[static_cast<std::size_t>(ex.y)].push_back(&ex.x);
    }
    const double n = static_cast<double>(examples.size());
    std::array<double, 2> p{};
    std::array<Vector, 2> mu;
    std::array<Matrix, 2> sigma;
    bool floored = false;
    for (std::size_t y = 0; y < 2; ++y) {
        const auto& xs = by_class[y];
        if (xs.size() < 2) {
            throw InvalidArgument("class " + std::to_string(y) + " has " + std::to_string(xs.size()) +
                                  " examples; need at least two");
        }
        const double ny = static_cast<double>(xs.size());
        p[y] = ny / n;
        Vector m = Vector::Zero(d);
        for (const auto* x : xs) m += *x;
        m /= ny;
        Matrix s = Matrix::Zero(d, d);
        for (const auto* x : xs) {
            const Vector c = *x - m;
            s.noalias() += c * c.transpose();
        }
        s /= ny;
        s = 0.5 * (s + s.transpose());
        if (diagonal_only) s = Matrix(s.diagonal().asDiagonal());
        Eigen::SelfAdjointEigenSolver<Matrix> es(s, Eigen::EigenvaluesOnly);
        if (es.eigenvalues().minCoeff() <= EnvParams::kSpdFloor) {
            s = apply_floor(s, cov_floor, diagonal_only);
            floored = true;
        }
        mu[y] = std::move(m);
        sigma[y] = std::move(s);
    }
    p[1] = 1.0 - p[0];
    return MleFit{EnvParams(p, std::move(mu), std::move(sigma), diagonal_only), floored};
}

EnvParams GmmFit::as_env_params(bool diagonal_only) const {
    return EnvParams({weights[0], 1.0 - weights[0]}, means, covs, diagonal_only);
}

GmmFit fit_gmm_em(std::span<const Vector> context, std::uint64_t init_seed, const EmConfig& config) {
    if (context.size() < 4) throw InvalidArgument("EM needs a context of at least 4 points");
    const Eigen::Index d = context.front().size();
    if (d < 1) throw InvalidArgument("inputs must have dimension >= 1");
    for (const auto& x : context) {
        if (x.size() != d) throw InvalidArgument("inconsistent input dimension");
    }
    if (config.restarts < 1 || config.max_iter < 1) throw InvalidArgument("EM needs restarts >= 1 and max_iter >= 1");

    bool all_same = true;
    for (const auto& x : context) all_same = all_same && x == context.front();
    if (all_same) {
        GmmFit fit;
        fit.degenerate = true;
        fit.weights = {0.5, 0.5};
        const Matrix cov = Matrix::Identity(d, d) * config.cov_floor;
        fit.means = {context.front(), context.front()};
        fit.covs = {cov, cov};
        fit.log_likelihood = static_cast<double>(context.size()) * GaussianLogDensity(context.front(), cov)(context.front());
        fit.ll_trace = {fit.log_likelihood};
        fit.converged = true;
        fit.restart_log_likelihoods = {fit.log_likelihood};
        return fit;
    }

    std::vector<GmmFit> runs(static_cast<std::size_t>(config.restarts));
    if (config.threads > 1) {
        std::vector<std::future<GmmFit>> futs;
        for (int r = 0; r < config.restarts; ++r) {
            futs.push_back(std::async(std::launch::async, run_em, context, derive_seed(init_seed, static_cast<std::uint64_t>(r)),
                                      std::cref(config)));
        }
        for (std::size_t r = 0; r < futs.size(); ++r) runs[r] = futs[r].get();
    } else {
        for (int r = 0; r < config.restarts; ++r) {
            runs[static_cast<std::size_t>(r)] = run_em(context, derive_seed(init_seed, static_cast<std::uint64_t>(r)), config);
        }
    }
    std::size_t best = 0;
    std::vector<double> lls;
    for (std::size_t r = 0; r < runs.size(); ++r) {
        lls.push_back(runs[r].log_likelihood);
        if (runs[r].log_likelihood > runs[best].log_likelihood) best = r;
    }
    GmmFit out = std::move(runs[best]);
    out.restart_index = static_cast<int>(best);
    out.restart_log_likelihoods = std::move(lls);
    return out;
}

MatchedModel match_and_orient(const GmmFit& fit, const std::vector<TrainedEnv>& train, const DistanceWeights& weights) {
    if (train.empty()) throw InvalidArgument("match_and_orient needs at least one training environment");
    std::vector<EnvParams> params;
    params.reserve(train.size());
    for (const auto& t : train) params.push_back(t.params);
    const bool diag = train.front().params.diagonal_only();
    const EnvParams fitted = fit.as_env_params(diag);
    const VoronoiMatch m = voronoi_assign(flatten(fitted), params, weights);
    return MatchedModel{m.orientation == Orientation::unswapped ? fitted : swap(fitted), train[m.env_index].env_id,
                        m.orientation, m.distance};
}

double label0_posterior(const Vector& x, const EnvParams& params, PosteriorForm form) {
    std::array<double, 2> l{};
    for (int y = 0; y < 2; ++y) {
        const GaussianLogDensity g(params.mu(y), params.sigma(y));
        const double lp = params.p(y) > 0.0 ? std::log(params.p(y)) : -std::numeric_limits<double>::infinity();
        l[static_cast<std::size_t>(y)] = lp + (form == PosteriorForm::normalized ? g(x) : -g.mahalanobis_sq(x));
    }
    if (l[0] == l[1]) return 0.5;
    // sigmoid(l0 - l1) evaluated without overflow.
    const double z = l[0] - l[1];
    if (z >= 0) return 1.0 / (1.0 + std::exp(-z));
    const double ez = std::exp(z);
    return ez / (1.0 + ez);
}

double predict_label0_prob(const Vector& x, const MatchedModel& model, PosteriorForm form) {
    return label0_posterior(x, model.params, form);
}

double bayes_oracle_prob(const Vector& x, const EnvParams& truth, PosteriorForm form) {
    return label0_posterior(x, truth, form);
}

// ---------------------------------------------------------------------------

std::vector<EnvParams> ModelBundle::params() const {
    std::vector<EnvParams> out;
    for (const auto& e : envs) out.push_back(e.params);
    return out;
}

std::string ModelBundle::to_json_string() const {
    nlohmann::json j;
    j["any_floored"] = any_floored;
    j["envs"] = nlohmann::json::array();
    for (const auto& e : envs) {
        j["envs"].push_back({{"env_id", e.env_id}, {"params", nlohmann::json::parse(e.params.to_json_string())}});
    }
    return j.dump(2);
}

ModelBundle ModelBundle::from_json_string(const std::string& text) {
    ModelBundle b;
    try {
        const auto j = nlohmann::json::parse(text);
        b.any_floored = j.value("any_floored", false);
        for (const auto& e : j.at("envs")) {
            b.envs.push_back({e.at("env_id").get<int>(), EnvParams::from_json_string(e.at("params").dump())});
        }
    } catch (const nlohmann::json::exception& ex) {
        throw InvalidArgument(std::string("model bundle: ") + ex.what());
    }
    return b;
}

ModelBundle train_bundle(const env::Dataset& data, bool diagonal_only) {
    ModelBundle b;
    for (int e : data.environments()) {
        std::vector<env::LabeledExample> xs;
        for (std::size_t i : data.indices_of(e)) xs.push_back(data.examples()[i]);
        auto fit = fit_env_params_mle(xs, diagonal_only);
        b.any_floored = b.any_floored || fit.floored;
        b.envs.push_back({e, std::move(fit.params)});
    }
    if (b.envs.empty()) throw InvalidArgument("training data has no environments");
    return b;
}

std::vector<Vector> query_grid(Eigen::Index dim, double lo, double hi, int points_per_axis) {
    if (dim < 1 || points_per_axis < 1) throw InvalidArgument("query grid needs dim >= 1 and points >= 1");
    std::vector<Vector> out;
    std::vector<int> idx(static_cast<std::size_t>(dim), 0);
    const double step = points_per_axis > 1 ? (hi - lo) / (points_per_axis - 1) : 0.0;
    while (true) {
        Vector q(dim);
        for (Eigen::Index i = 0; i < dim; ++i) q(i) = lo + step * idx[static_cast<std::size_t>(i)];
        out.push_back(std::move(q));
        Eigen::Index k = 0;
        while (k < dim && ++idx[static_cast<std::size_t>(k)] == points_per_axis) idx[static_cast<std::size_t>(k++)] = 0;
        if (k == dim) break;
    }
    return out;
}

OodEvaluation evaluate_ood(const ModelBundle& bundle, const EnvParams& test, std::span<const Vector> queries,
                           std::uint64_t seed, const OodOptions& options) {
    const auto context_examples = generate(test, options.context_length, derive_seed(seed, 0));
    std::vector<Vector> context;
    context.reserve(context_examples.size());
    for (const auto& ex : context_examples) context.push_back(ex.x);

    EmConfig em = options.em;
    em.diagonal_only = em.diagonal_only || test.diagonal_only();
    GmmFit fit = fit_gmm_em(context, derive_seed(seed, 1), em);
    MatchedModel model = match_and_orient(fit, bundle.envs);
    OodEvaluation out{model, std::move(fit)};
    out.in_cell = in_voronoi_cell(test, bundle.params());

    std::size_t agree = 0;
    double gap_sum = 0.0;
    for (const auto& q : queries) {
        const double pred = predict_label0_prob(q, model, options.form);
        const double truth = bayes_oracle_prob(q, test);
        const double gap = std::abs(pred - truth);
        out.sup_gap = std::max(out.sup_gap, gap);
        gap_sum += gap;
        if (std::abs(truth - 0.5) >= options.margin) {
            ++out.high_margin_queries;
            if ((pred >= 0.5) == (truth >= 0.5)) ++agree;
        }
    }
    out.mean_gap = queries.empty() ? 0.0 : gap_sum / static_cast<double>(queries.size());
    out.agreement = out.high_margin_queries ? static_cast<double>(agree) / static_cast<double>(out.high_margin_queries) : 0.0;

    if (options.accuracy_samples > 0) {
        const auto eval = generate(test, options.accuracy_samples, derive_seed(seed, 2));
        std::size_t hit = 0, oracle_hit = 0;
        for (const auto& ex : eval) {
            hit += (predict_label0_prob(ex.x, model, options.form) >= 0.5 ? 0 : 1) == ex.y;
            oracle_hit += (bayes_oracle_prob(ex.x, test) >= 0.5 ? 0 : 1) == ex.y;
        }
        out.accuracy = static_cast<double>(hit) / static_cast<double>(eval.size());
        out.oracle_accuracy = static_cast<double>(oracle_hit) / static_cast<double>(eval.size());
    }
    return out;
}

}  // namespace icrm::gaussian
