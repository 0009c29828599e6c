#pragma once

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <random>
#include <string>

#include "tslab/error.hpp"

namespace tslab {

using Matrix = Eigen::MatrixXd;
using Vector = Eigen::VectorXd;
using RowVector = Eigen::RowVectorXd;
using Index = Eigen::Index;

/// Mixes a seed with a stream id so that independent consumers of one run seed
/// never share a random sequence.
inline std::uint64_t derive_seed(std::uint64_t seed, std::uint64_t stream) {
  std::uint64_t z = seed + 0x9E3779B97F4A7C15ULL * (stream + 1);
  z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
  z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
  return z ^ (z >> 31);
}

/// Seeded source of the few distributions the library needs.
class Rng {
 public:
  explicit Rng(std::uint64_t seed) : engine_(seed) {}

  double normal() { return normal_(engine_); }
  double uniform(double lo, double hi) {
    return lo + (hi - lo) * std::uniform_real_distribution<double>(0.0, 1.0)(engine_);
  }
  /// Uniform integer in [0, n).
  std::size_t index(std::size_t n) {
    return std::uniform_int_distribution<std::size_t>(0, n - 1)(engine_);
  }

  Matrix gaussian(Index rows, Index cols, double stddev = 1.0) {
    Matrix m(rows, cols);
    // Fill column-major order explicitly so results never depend on Eigen's
    // evaluation order.
    for (Index c = 0; c < cols; ++c)
      for (Index r = 0; r < rows; ++r) m(r, c) = stddev * normal();
    return m;
  }

  std::mt19937_64& engine() { return engine_; }

 private:
  std::mt19937_64 engine_;
  std::normal_distribution<double> normal_{0.0, 1.0};
};

/// Scales every column to unit Euclidean norm. A zero column is a NumericError.
inline Matrix column_normalize(const Matrix& m) {
  Matrix out = m;
  for (Index c = 0; c < m.cols(); ++c) {
    const double n = m.col(c).norm();
    if (!(n > 0.0) || !std::isfinite(n))
      throw NumericError("column_normalize: column " + std::to_string(c) + " has norm " +
                         std::to_string(n));
    out.col(c) /= n;
  }
  return out;
}

/// Angle between two non-zero vectors, clamped into [0, pi].
inline double angle_between(const Vector& a, const Vector& b) {
  const double c = a.dot(b) / (a.norm() * b.norm());
  return std::acos(std::clamp(c, -1.0, 1.0));
}

inline bool all_finite(const Matrix& m) { return m.allFinite(); }

/// Exactly symmetric copy of a matrix that should be symmetric up to rounding.
inline Matrix symmetrized(const Matrix& m) { return 0.5 * (m + m.transpose()); }

}  // namespace tslab
