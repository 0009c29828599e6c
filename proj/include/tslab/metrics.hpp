#pragma once

// Student-teacher node correlations, their per-layer summary, the mean rank
// of final winners over checkpoints, fan-out row norms and BatchNorm bias
// sign audits.

#include <algorithm>
#include <cmath>
#include <limits>
#include <vector>

#include "tslab/error.hpp"
#include "tslab/linalg.hpp"
#include "tslab/net.hpp"

namespace tslab {

using Mask = Eigen::Matrix<bool, Eigen::Dynamic, Eigen::Dynamic>;

/// Nodes whose activation std falls at or below this are treated as dead.
inline constexpr double kDeadStd = 1e-12;

struct CorrelationMatrix {
  Matrix rho;  // n_students x n_teachers; invalid entries hold 0
  Mask valid;
  std::vector<Index> dead_students, dead_teachers;

  Index students() const { return rho.rows(); }
  Index teachers() const { return rho.cols(); }
};

namespace detail {
// Standardized columns (population std); dead columns are zeroed and listed.
inline Matrix standardize(const Matrix& a, std::vector<Index>& dead) {
  const double n = static_cast<double>(a.rows());
  Matrix out(a.rows(), a.cols());
  for (Index c = 0; c < a.cols(); ++c) {
    const double mu = a.col(c).mean();
    const Vector centered = a.col(c).array() - mu;
    const double sd = std::sqrt(centered.squaredNorm() / n);
    if (!(sd > kDeadStd)) {
      dead.push_back(c);
      out.col(c).setZero();
    } else {
      out.col(c) = centered / sd;
    }
  }
  return out;
}
}  // namespace detail

/// Correlation of every student column with every teacher column over a batch.
inline CorrelationMatrix rho_matrix(const Matrix& acts_s, const Matrix& acts_t) {
  if (acts_s.rows() != acts_t.rows()) throw PreconditionError("rho_matrix: batch sizes differ");
  if (acts_s.rows() < 2) throw PreconditionError("rho_matrix: batch must have at least 2 samples");
  CorrelationMatrix c;
  const Matrix s = detail::standardize(acts_s, c.dead_students);
  const Matrix t = detail::standardize(acts_t, c.dead_teachers);
  c.rho = (s.transpose() * t / static_cast<double>(acts_s.rows())).cwiseMax(-1.0).cwiseMin(1.0);
  c.valid = Mask::Constant(c.rho.rows(), c.rho.cols(), true);
  for (Index j : c.dead_students) c.valid.row(j).setConstant(false);
  for (Index k : c.dead_teachers) c.valid.col(k).setConstant(false);
  return c;
}

struct RhoBar {
  double value = std::numeric_limits<double>::quiet_NaN();  // NaN when nothing is covered
  Index covered = 0;
  Index excluded = 0;
  std::vector<Index> best;  // best valid student per teacher, -1 when excluded
};

/// Mean over teacher columns of the best valid student correlation; ties go
/// to the smaller student index.
inline RhoBar rho_bar(const CorrelationMatrix& c) {
  RhoBar r;
  r.best.assign(static_cast<std::size_t>(c.teachers()), -1);
  double sum = 0.0;
  for (Index k = 0; k < c.teachers(); ++k) {
    Index arg = -1;
    for (Index j = 0; j < c.students(); ++j)
      if (c.valid(j, k) && (arg < 0 || c.rho(j, k) > c.rho(arg, k))) arg = j;
    r.best[static_cast<std::size_t>(k)] = arg;
    if (arg < 0) {
      ++r.excluded;
    } else {
      ++r.covered;
      sum += c.rho(arg, k);
    }
  }
  if (r.covered > 0) r.value = sum / static_cast<double>(r.covered);
  return r;
}

/// Normalized rank in [0, 1] of student j for teacher k (0 = best); an
/// invalid entry ranks last.
inline double normalized_rank(const CorrelationMatrix& c, Index j, Index k) {
  if (!c.valid(j, k)) return 1.0;
  Index valid = 0, ahead = 0;
  for (Index i = 0; i < c.students(); ++i) {
    if (!c.valid(i, k)) continue;
    ++valid;
    if (c.rho(i, k) > c.rho(j, k) || (c.rho(i, k) == c.rho(j, k) && i < j)) ++ahead;
  }
  return valid <= 1 ? 0.0 : static_cast<double>(ahead) / static_cast<double>(valid - 1);
}

/// Per checkpoint, the mean over teacher columns of the normalized rank of
/// the student that wins that column at the final checkpoint. Teachers
/// without a valid winner at the end are left out.
inline std::vector<double> mean_rank(const std::vector<CorrelationMatrix>& checkpoints) {
  if (checkpoints.size() < 2) throw PreconditionError("mean_rank needs at least 2 checkpoints");
  const CorrelationMatrix& last = checkpoints.back();
  for (const CorrelationMatrix& c : checkpoints)
    if (c.students() != last.students() || c.teachers() != last.teachers())
      throw PreconditionError("mean_rank: checkpoint shapes differ");
  const RhoBar winners = rho_bar(last);
  std::vector<double> out;
  for (const CorrelationMatrix& c : checkpoints) {
    double sum = 0.0;
    Index count = 0;
    for (Index k = 0; k < c.teachers(); ++k) {
      const Index w = winners.best[static_cast<std::size_t>(k)];
      if (w < 0) continue;
      sum += normalized_rank(c, w, k);
      ++count;
    }
    out.push_back(count == 0 ? 0.0 : sum / static_cast<double>(count));
  }
  return out;
}

/// Correlations of every hidden layer's ReLU outputs on one batch.
inline std::vector<CorrelationMatrix> hidden_correlations(const Network& student,
                                                          const Network& teacher,
                                                          const Matrix& batch) {
  if (student.num_layers() != teacher.num_layers())
    throw ConfigError("student and teacher depths differ");
  const ForwardTrace ts = forward(student, batch), tt = forward(teacher, batch);
  std::vector<CorrelationMatrix> out;
  for (Index l = 0; l + 1 < student.num_layers(); ++l)
    out.push_back(rho_matrix(ts.layers[l].relu_out, tt.layers[l].relu_out));
  return out;
}

/// Norm of each hidden node's fan-out row in the layer above `layer`.
inline Vector v_row_norms(const Network& net, Index layer) {
  if (layer < 0 || layer + 1 >= net.num_layers())
    throw PreconditionError("v_row_norms: layer " + std::to_string(layer) + " has no upper layer");
  return net.layers[layer + 1].w.rowwise().norm();
}

inline constexpr int kAuditBins = 20;

struct BnLayerAudit {
  Index layer = 0;
  Index n_negative = 0;
  Index n_positive = 0;  // c1 >= 0
  double lo = 0.0, hi = 0.0;
  std::vector<Index> counts;  // kAuditBins equal-width bins over [lo, hi]

  double bin_lo(int b) const { return lo + (hi - lo) * b / kAuditBins; }
  double bin_hi(int b) const { return lo + (hi - lo) * (b + 1) / kAuditBins; }
};

/// Sign counts and a histogram of the BatchNorm biases of every BN layer.
/// A constant bias vector gets a unit-wide range centred on its value.
inline std::vector<BnLayerAudit> bn_bias_audit(const Network& net) {
  std::vector<BnLayerAudit> out;
  for (Index l = 0; l < net.num_layers(); ++l) {
    const Vector& c1 = net.layers[l].c1;
    if (!net.spec.has_bn(l) || c1.size() == 0) continue;
    BnLayerAudit a;
    a.layer = l;
    a.n_negative = (c1.array() < 0.0).count();
    a.n_positive = c1.size() - a.n_negative;
    a.lo = c1.minCoeff();
    a.hi = c1.maxCoeff();
    if (a.hi - a.lo <= 0.0) {
      a.lo -= 0.5;
      a.hi += 0.5;
    }
    a.counts.assign(kAuditBins, 0);
    for (Index i = 0; i < c1.size(); ++i) {
      int b = static_cast<int>(std::floor((c1(i) - a.lo) / (a.hi - a.lo) * kAuditBins));
      a.counts[static_cast<std::size_t>(std::clamp(b, 0, kAuditBins - 1))]++;
    }
    out.push_back(std::move(a));
  }
  return out;
}

}  // namespace tslab
