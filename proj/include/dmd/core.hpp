#pragma once

#include <Eigen/Dense>

#include <cmath>
#include <cstdint>
#include <random>
#include <span>
#include <stdexcept>
#include <string>

namespace dmd {

/// Dense row-major batch: one sample per row, one feature per column.
template <typename Scalar>
using Matrix = Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

template <typename Scalar>
using Vector = Eigen::Matrix<Scalar, Eigen::Dynamic, 1>;

template <typename Scalar>
using RowVector = Eigen::Matrix<Scalar, 1, Eigen::Dynamic>;

using MatrixXd = Matrix<double>;
using VectorXd = Vector<double>;

using Rng = std::mt19937_64;

struct Error : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct ShapeError : Error {
  using Error::Error;
};

struct NumericError : Error {
  using Error::Error;
};

struct DomainError : Error {
  using Error::Error;
};

struct FormatError : Error {
  using Error::Error;
};

template <typename Derived>
bool all_finite(const Eigen::DenseBase<Derived>& m) {
  return m.allFinite();
}

template <typename Scalar>
Matrix<Scalar> standard_normal(Eigen::Index rows, Eigen::Index cols, Rng& rng) {
  std::normal_distribution<Scalar> normal(Scalar(0), Scalar(1));
  Matrix<Scalar> out(rows, cols);
  for (Eigen::Index i = 0; i < out.size(); ++i) out.data()[i] = normal(rng);
  return out;
}

/// 64-bit FNV-1a over raw bytes.
inline std::uint64_t fnv1a(std::span<const unsigned char> bytes,
                           std::uint64_t hash = 0xcbf29ce484222325ULL) {
  for (unsigned char b : bytes) {
    hash ^= b;
    hash *= 0x100000001b3ULL;
  }
  return hash;
}

template <typename Scalar>
std::uint64_t hash_parameters(const Vector<Scalar>& params) {
  const auto* bytes = reinterpret_cast<const unsigned char*>(params.data());
  return fnv1a({bytes, static_cast<std::size_t>(params.size()) * sizeof(Scalar)});
}

inline std::uint64_t hash_string(const std::string& s) {
  return fnv1a({reinterpret_cast<const unsigned char*>(s.data()), s.size()});
}

inline std::string hex64(std::uint64_t value) {
  static constexpr char digits[] = "0123456789abcdef";
  std::string out(16, '0');
  for (int i = 15; i >= 0; --i, value >>= 4) out[static_cast<std::size_t>(i)] = digits[value & 0xf];
  return out;
}

}  // namespace dmd
