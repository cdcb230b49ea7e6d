#pragma once

#include <cmath>
#include <cstdint>
#include <stdexcept>
#include <string>

#include <Eigen/Dense>

namespace ccil {

template <typename Scalar>
using Mat = Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

template <typename Scalar>
using RowVec = Eigen::Matrix<Scalar, 1, Eigen::Dynamic>;

/// Base class for every error raised by the library.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Invalid configuration or user input detected before any work starts.
class ConfigError : public Error {
 public:
  using Error::Error;
};

/// Tensor/array shapes that do not line up.
class ShapeError : public Error {
 public:
  using Error::Error;
};

/// Dataset content that violates a manifest or split invariant.
class DataError : public Error {
 public:
  using Error::Error;
};

/// A loss term evaluated to NaN or infinity.
class NonFiniteLoss : public Error {
 public:
  NonFiniteLoss(std::string term, double value)
      : Error("non-finite loss term '" + term + "' (" + std::to_string(value) + ")"),
        term_(std::move(term)) {}
  const std::string& term() const noexcept { return term_; }

 private:
  std::string term_;
};

inline void require_shape(bool ok, const std::string& what) {
  if (!ok) throw ShapeError(what);
}

/// SplitMix64 finalizer. Used to derive independent, order-free RNG streams
/// from (seed, key) pairs so that generation can be parallelized and resumed.
constexpr std::uint64_t mix64(std::uint64_t x) noexcept {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

constexpr std::uint64_t derive_seed(std::uint64_t seed, std::uint64_t a, std::uint64_t b = 0,
                                    std::uint64_t c = 0) noexcept {
  return mix64(mix64(mix64(mix64(seed) ^ a) ^ b) ^ c);
}

template <typename Derived>
bool all_finite(const Eigen::MatrixBase<Derived>& m) {
  return m.allFinite();
}

}  // namespace ccil
