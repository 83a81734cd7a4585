#pragma once

// Two-class Gaussian environments with identity observation map, their
// label-swap permutations and nearest-neighbour geometry in parameter space.

#include "icrm/common.hpp"
#include "icrm/env_core.hpp"

#include <array>
#include <cstdint>
#include <optional>
#include <string>
#include <vector>

namespace icrm::gaussian {

/// gamma_e = [(p^y, mu^y, Sigma^y)] for y in {0, 1}.
class EnvParams {
public:
    static constexpr double kPriorTol = 1e-12;
    static constexpr double kSpdFloor = 1e-10;

    EnvParams(std::array<double, 2> p, std::array<Vector, 2> mu, std::array<Matrix, 2> sigma,
              bool diagonal_only = false);

    /// Equal-covariance convenience constructor.
    static EnvParams isotropic(double p1, Vector mu0, Vector mu1, double variance = 1.0);

    const std::array<double, 2>& p() const noexcept { return p_; }
    const std::array<Vector, 2>& mu() const noexcept { return mu_; }
    const std::array<Matrix, 2>& sigma() const noexcept { return sigma_; }
    double p(int y) const { return p_[static_cast<std::size_t>(y)]; }
    const Vector& mu(int y) const { return mu_[static_cast<std::size_t>(y)]; }
    const Matrix& sigma(int y) const { return sigma_[static_cast<std::size_t>(y)]; }
    bool diagonal_only() const noexcept { return diagonal_only_; }
    Eigen::Index dim() const noexcept { return mu_[0].size(); }

    bool operator==(const EnvParams& other) const;

    std::string to_json_string() const;
    static EnvParams from_json_string(const std::string& text);

private:
    std::array<double, 2> p_;
    std::array<Vector, 2> mu_;
    std::array<Matrix, 2> sigma_;
    bool diagonal_only_;
};

/// Flattened (p0, mu0, triu Sigma0, p1, mu1, triu Sigma1).
struct ParamVector {
    Vector flat;
};

std::size_t param_vector_length(Eigen::Index dim);
/// Inverse of param_vector_length; throws on lengths no dimension produces.
Eigen::Index dim_from_param_length(Eigen::Index length);

ParamVector flatten(const EnvParams& params);
EnvParams unflatten(const ParamVector& v, bool diagonal_only = false);
/// Exchanges the two class blocks of a flattened vector.
ParamVector swap_blocks(const ParamVector& v);

/// delta_e: class-0 and class-1 triplets exchanged.
EnvParams swap(const EnvParams& params);

/// Samples n labelled examples; labels ~ Bernoulli(p1), x ~ N(mu^y, Sigma^y).
std::vector<env::LabeledExample> generate(const EnvParams& params, std::size_t n, std::uint64_t seed, int env_id = 0);

enum class Orientation { unswapped, swapped };

struct VoronoiMatch {
    std::size_t env_index = 0;
    Orientation orientation = Orientation::unswapped;
    double distance = 0.0;
    /// Another (environment, orientation) pair attained exactly the same distance.
    bool tie = false;
};

/// Optional per-coordinate weights on the flattened vector (default all ones).
using DistanceWeights = std::optional<Vector>;

double param_distance(const ParamVector& a, const ParamVector& b, const DistanceWeights& weights = std::nullopt);

/// Nearest training environment to theta or to its swap. Exact ties go to the
/// unswapped orientation first, then to the lowest index.
VoronoiMatch voronoi_assign(const ParamVector& theta, const std::vector<EnvParams>& train,
                            const DistanceWeights& weights = std::nullopt);

/// True iff the nearest point among {gamma_e} and {delta_e} is some gamma_e.
bool in_voronoi_cell(const EnvParams& test, const std::vector<EnvParams>& train,
                     const DistanceWeights& weights = std::nullopt);

}  // namespace icrm::gaussian
