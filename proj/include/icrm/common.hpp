#pragma once

#include <Eigen/Dense>

#include <cstdint>
#include <random>
#include <stdexcept>
#include <string>
#include <string_view>

namespace icrm {

using Vector = Eigen::VectorXd;
using Matrix = Eigen::MatrixXd;
using Rng = std::mt19937_64;

/// Base class for all errors raised by the library.
class Error : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

/// Precondition or input-validation failure.
class InvalidArgument : public Error {
public:
    using Error::Error;
};

/// A numerical procedure could not produce a meaningful result
/// (singular system, impossible evidence, divergence).
class NumericalError : public Error {
public:
    using Error::Error;
};

/// splitmix64 finalizer; used to derive independent stream seeds.
std::uint64_t mix64(std::uint64_t x) noexcept;

/// Seed for task `index` under `master`. Stable across platforms and runs.
std::uint64_t derive_seed(std::uint64_t master, std::uint64_t index) noexcept;

/// FNV-1a 64-bit hash of a byte string, as 16 lowercase hex digits.
std::string fnv1a_hex(std::string_view bytes);

/// Natural-log entropy of a probability vector; 0 ln 0 = 0.
double entropy_nats(const Vector& probs);

/// Numerically stable log(sum(exp(v))).
double log_sum_exp(const Vector& v);

/// Standard normal draws into a vector of length n.
Vector standard_normal(Rng& rng, Eigen::Index n);

}  // namespace icrm
