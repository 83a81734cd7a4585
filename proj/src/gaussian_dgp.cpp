#include "icrm/gaussian_dgp.hpp"

#include <json.hpp>

#include <cmath>
#include <limits>

namespace icrm::gaussian {

using nlohmann::json;

namespace {

void check_spd(const Matrix& s, Eigen::Index d, bool diagonal_only, int y) {
    const std::string tag = "Sigma^" + std::to_string(y);
    if (s.rows() != d || s.cols() != d) throw InvalidArgument(tag + " has wrong shape");
    if (!s.allFinite()) throw InvalidArgument(tag + " is not finite");
    if ((s - s.transpose()).cwiseAbs().maxCoeff() > 0.0) {
        throw InvalidArgument(tag + " is not symmetric");
    }
    if (diagonal_only) {
        for (Eigen::Index i = 0; i < d; ++i)
            for (Eigen::Index j = 0; j < d; ++j)
                if (i != j && s(i, j) != 0.0) throw InvalidArgument(tag + " must be diagonal");
    }
    Eigen::SelfAdjointEigenSolver<Matrix> es(s, Eigen::EigenvaluesOnly);
    if (es.eigenvalues().minCoeff() <= EnvParams::kSpdFloor) {
        throw InvalidArgument(tag + " is not positive definite (min eigenvalue " +
                              std::to_string(es.eigenvalues().minCoeff()) + ")");
    }
}

json vec_json(const Vector& v) { return std::vector<double>(v.data(), v.data() + v.size()); }

Vector vec_from(const json& j) {
    const auto v = j.get<std::vector<double>>();
    return Eigen::Map<const Vector>(v.data(), static_cast<Eigen::Index>(v.size()));
}

json mat_json(const Matrix& m) {
    json out = json::array();
    for (Eigen::Index r = 0; r < m.rows(); ++r) out.push_back(vec_json(m.row(r).transpose()));
    return out;
}

Matrix mat_from(const json& j) {
    const auto rows = j.get<std::vector<std::vector<double>>>();
    Matrix m(static_cast<Eigen::Index>(rows.size()), rows.empty() ? 0 : static_cast<Eigen::Index>(rows[0].size()));
    for (std::size_t r = 0; r < rows.size(); ++r) {
        if (static_cast<Eigen::Index>(rows[r].size()) != m.cols()) throw InvalidArgument("ragged covariance matrix");
        for (std::size_t c = 0; c < rows[r].size(); ++c) m(static_cast<Eigen::Index>(r), static_cast<Eigen::Index>(c)) = rows[r][c];
    }
    return m;
}

}  // namespace

EnvParams::EnvParams(std::array<double, 2> p, std::array<Vector, 2> mu, std::array<Matrix, 2> sigma,
                     bool diagonal_only)
    : p_(p), mu_(std::move(mu)), sigma_(std::move(sigma)), diagonal_only_(diagonal_only) {
    if (!(p_[0] > 0.0 && p_[1] > 0.0) || std::abs(p_[0] + p_[1] - 1.0) > kPriorTol) {
        // p = (1, 0) is allowed for degenerate single-class generation.
        if (!((p_[0] == 1.0 && p_[1] == 0.0) || (p_[0] == 0.0 && p_[1] == 1.0))) {
            throw InvalidArgument("class priors must be positive and sum to one");
        }
    }
    const Eigen::Index d = mu_[0].size();
    if (d < 1 || mu_[1].size() != d) throw InvalidArgument("class means must share a positive dimension");
    if (!mu_[0].allFinite() || !mu_[1].allFinite()) throw InvalidArgument("class means must be finite");
    for (int y = 0; y < 2; ++y) check_spd(sigma_[static_cast<std::size_t>(y)], d, diagonal_only_, y);
}

EnvParams EnvParams::isotropic(double p1, Vector mu0, Vector mu1, double variance) {
    const Eigen::Index d = mu0.size();
    Matrix s = Matrix::Identity(d, d) * variance;
    return EnvParams({1.0 - p1, p1}, {std::move(mu0), std::move(mu1)}, {s, s});
}

bool EnvParams::operator==(const EnvParams& o) const {
    return p_ == o.p_ && diagonal_only_ == o.diagonal_only_ && mu_[0] == o.mu_[0] && mu_[1] == o.mu_[1] &&
           sigma_[0] == o.sigma_[0] && sigma_[1] == o.sigma_[1];
}

std::string EnvParams::to_json_string() const {
    json j;
    j["p"] = {p_[0], p_[1]};
    j["mu"] = {vec_json(mu_[0]), vec_json(mu_[1])};
    j["sigma"] = {mat_json(sigma_[0]), mat_json(sigma_[1])};
    j["diagonal_only"] = diagonal_only_;
    return j.dump();
}

EnvParams EnvParams::from_json_string(const std::string& text) {
    json j;
    try {
        j = json::parse(text);
        const auto p = j.at("p").get<std::vector<double>>();
        if (p.size() != 2 || j.at("mu").size() != 2 || j.at("sigma").size() != 2) {
            throw InvalidArgument("env params need exactly two classes");
        }
        return EnvParams({p[0], p[1]}, {vec_from(j["mu"][0]), vec_from(j["mu"][1])},
                         {mat_from(j["sigma"][0]), mat_from(j["sigma"][1])}, j.value("diagonal_only", false));
    } catch (const json::exception& ex) {
        throw InvalidArgument(std::string("env params: ") + ex.what());
    }
}

// ---------------------------------------------------------------------------

std::size_t param_vector_length(Eigen::Index dim) {
    const auto d = static_cast<std::size_t>(dim);
    return 2 * (1 + d + d * (d + 1) / 2);
}

Eigen::Index dim_from_param_length(Eigen::Index length) {
    for (Eigen::Index d = 1; static_cast<Eigen::Index>(param_vector_length(d)) <= length; ++d) {
        if (static_cast<Eigen::Index>(param_vector_length(d)) == length) return d;
    }
    throw InvalidArgument("parameter vector length " + std::to_string(length) + " matches no dimension");
}

ParamVector flatten(const EnvParams& params) {
    const Eigen::Index d = params.dim();
    const Eigen::Index block = static_cast<Eigen::Index>(param_vector_length(d) / 2);
    Vector v(2 * block);
    for (int y = 0; y < 2; ++y) {
        Eigen::Index k = y * block;
        v(k++) = params.p(y);
        for (Eigen::Index i = 0; i < d; ++i) v(k++) = params.mu(y)(i);
        for (Eigen::Index i = 0; i < d; ++i)
            for (Eigen::Index j = i; j < d; ++j) v(k++) = params.sigma(y)(i, j);
    }
    return ParamVector{std::move(v)};
}

EnvParams unflatten(const ParamVector& v, bool diagonal_only) {
    const Eigen::Index d = dim_from_param_length(v.flat.size());
    const Eigen::Index block = v.flat.size() / 2;
    std::array<double, 2> p{};
    std::array<Vector, 2> mu{Vector(d), Vector(d)};
    std::array<Matrix, 2> sigma{Matrix(d, d), Matrix(d, d)};
    for (std::size_t y = 0; y < 2; ++y) {
        Eigen::Index k = static_cast<Eigen::Index>(y) * block;
        p[y] = v.flat(k++);
        for (Eigen::Index i = 0; i < d; ++i) mu[y](i) = v.flat(k++);
        for (Eigen::Index i = 0; i < d; ++i)
            for (Eigen::Index j = i; j < d; ++j) sigma[y](i, j) = sigma[y](j, i) = v.flat(k++);
    }
    return EnvParams(p, std::move(mu), std::move(sigma), diagonal_only);
}

ParamVector swap_blocks(const ParamVector& v) {
    const Eigen::Index block = v.flat.size() / 2;
    Vector out(v.flat.size());
    out.head(block) = v.flat.tail(block);
    out.tail(block) = v.flat.head(block);
    return ParamVector{std::move(out)};
}

EnvParams swap(const EnvParams& params) {
    return EnvParams({params.p(1), params.p(0)}, {params.mu(1), params.mu(0)}, {params.sigma(1), params.sigma(0)},
                     params.diagonal_only());
}

std::vector<env::LabeledExample> generate(const EnvParams& params, std::size_t n, std::uint64_t seed, int env_id) {
    if (n == 0) throw InvalidArgument("generate needs n >= 1");
    Rng rng(seed);
    std::uniform_real_distribution<double> u(0.0, 1.0);
    const std::array<Matrix, 2> chol{Eigen::LLT<Matrix>(params.sigma(0)).matrixL().toDenseMatrix(),
                                     Eigen::LLT<Matrix>(params.sigma(1)).matrixL().toDenseMatrix()};
    std::vector<env::LabeledExample> out;
    out.reserve(n);
    for (std::size_t i = 0; i < n; ++i) {
        const int y = u(rng) < params.p(1) ? 1 : 0;
        const Vector z = standard_normal(rng, params.dim());
        out.push_back({params.mu(y) + chol[static_cast<std::size_t>(y)] * z, y, env_id});
    }
    return out;
}

// ---------------------------------------------------------------------------

double param_distance(const ParamVector& a, const ParamVector& b, const DistanceWeights& weights) {
    if (a.flat.size() != b.flat.size()) throw InvalidArgument("parameter vectors differ in length");
    const Vector diff = a.flat - b.flat;
    if (!weights) return diff.norm();
    if (weights->size() != diff.size()) throw InvalidArgument("distance weights have the wrong length");
    return std::sqrt((weights->array() * diff.array().square()).sum());
}

VoronoiMatch voronoi_assign(const ParamVector& theta, const std::vector<EnvParams>& train,
                            const DistanceWeights& weights) {
    if (train.empty()) throw InvalidArgument("voronoi_assign needs at least one training environment");
    const ParamVector beta = swap_blocks(theta);
    VoronoiMatch best;
    best.distance = std::numeric_limits<double>::infinity();
    for (std::size_t e = 0; e < train.size(); ++e) {
        const ParamVector g = flatten(train[e]);
        // Unswapped is examined first so that it wins exact ties.
        for (auto orient : {Orientation::unswapped, Orientation::swapped}) {
            const double d = param_distance(orient == Orientation::unswapped ? theta : beta, g, weights);
            if (d < best.distance) {
                best = VoronoiMatch{e, orient, d, false};
            } else if (d == best.distance) {
                best.tie = true;
            }
        }
    }
    return best;
}

bool in_voronoi_cell(const EnvParams& test, const std::vector<EnvParams>& train, const DistanceWeights& weights) {
    if (train.empty()) throw InvalidArgument("in_voronoi_cell needs at least one training environment");
    const ParamVector t = flatten(test);
    double best_gamma = std::numeric_limits<double>::infinity();
    double best_delta = std::numeric_limits<double>::infinity();
    for (const auto& g : train) {
        best_gamma = std::min(best_gamma, param_distance(t, flatten(g), weights));
        best_delta = std::min(best_delta, param_distance(t, flatten(swap(g)), weights));
    }
    return best_gamma <= best_delta;
}

}  // namespace icrm::gaussian
