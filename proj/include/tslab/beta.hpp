#pragma once

// Per-sample decomposition of backpropagated gradients into gated
// combinations of teacher and student activations at the same layer, the
// expectation matrices that drive the averaged dynamics, and Monte-Carlo
// audits of the modelling assumptions behind them.

#include <cmath>
#include <limits>
#include <optional>
#include <vector>

#include "tslab/error.hpp"
#include "tslab/linalg.hpp"
#include "tslab/net.hpp"
#include "tslab/teacher.hpp"

namespace tslab {

/// Coefficients for one node layer. Per sample s:
///   g_j = f'_j * ( sum_t beta_star[s](j,t) f*_t - sum_j' beta[s](j,j') f_j' + bias(s,j) )
/// The bias term collects the contribution of upper-layer biases and vanishes
/// for bias-free networks.
struct BetaLayer {
  std::vector<Matrix> beta_star;  // n x m per sample
  std::vector<Matrix> beta;       // n x n per sample
  Matrix bias;                    // batch x n
};

struct BetaTensors {
  std::vector<BetaLayer> layers;  // indexed like ForwardTrace::layers
};

namespace detail {
inline void require_plain(const Network& net, const char* who) {
  if (net.spec.bn_mode != BnMode::none)
    throw ConfigError(std::string(who) + ": BatchNorm networks are not supported");
}
inline void require_pair(const Network& s, const Network& t, const char* who) {
  require_plain(s, who);
  require_plain(t, who);
  if (s.num_layers() != t.num_layers())
    throw ConfigError(std::string(who) + ": student and teacher depths differ");
  if (s.spec.input_dim() != t.spec.input_dim() || s.spec.output_dim() != t.spec.output_dim())
    throw ConfigError(std::string(who) + ": student and teacher input/output widths differ");
}
inline Vector layer_bias(const Layer& l) {
  return l.b.size() > 0 ? l.b : Vector::Zero(l.w.cols());
}
}  // namespace detail

inline BetaTensors compute_beta(const Network& student, const Network& teacher,
                                const ForwardTrace& trace_s, const ForwardTrace& trace_t) {
  detail::require_pair(student, teacher, "compute_beta");
  const Index depth = student.num_layers();
  if (static_cast<Index>(trace_s.layers.size()) != depth ||
      static_cast<Index>(trace_t.layers.size()) != depth)
    throw ConfigError("compute_beta: trace depth does not match network depth");
  const Index batch = trace_s.batch_size();
  if (trace_t.batch_size() != batch) throw ConfigError("compute_beta: traces differ in batch size");

  BetaTensors out;
  out.layers.resize(depth);
  const Index C = student.spec.output_dim();
  BetaLayer& top = out.layers[depth - 1];
  top.beta_star.assign(batch, Matrix::Identity(C, C));
  top.beta.assign(batch, Matrix::Identity(C, C));
  top.bias = Matrix::Zero(batch, C);

  for (Index l = depth - 1; l >= 1; --l) {
    const BetaLayer& up = out.layers[l];
    BetaLayer& down = out.layers[l - 1];
    const Matrix& ws = student.layers[l].w;  // n_{l-1} x n_l
    const Matrix& wt = teacher.layers[l].w;  // m_{l-1} x m_l
    const Vector bs = detail::layer_bias(student.layers[l]);
    const Vector bt = detail::layer_bias(teacher.layers[l]);
    down.beta_star.resize(batch);
    down.beta.resize(batch);
    down.bias.resize(batch, ws.rows());
    for (Index s = 0; s < batch; ++s) {
      const Vector gs = trace_s.layers[l].gate.row(s).transpose();
      const Vector gt = trace_t.layers[l].gate.row(s).transpose();
      const Matrix a = ws * gs.asDiagonal();  // A_s diag(f'_s)
      down.beta_star[s] = a * up.beta_star[s] * gt.asDiagonal() * wt.transpose();
      down.beta[s] = a * up.beta[s] * a.transpose();
      const Vector inner = up.bias.row(s).transpose() + up.beta_star[s] * gt.cwiseProduct(bt) -
                           up.beta[s] * gs.cwiseProduct(bs);
      down.bias.row(s) = (a * inner).transpose();
    }
  }
  return out;
}

struct IdentityCheck {
  double max_residual = 0.0;
  double max_gradient = 0.0;
  /// Residual relative to the largest node gradient (0 when both vanish).
  double relative() const {
    if (max_residual == 0.0) return 0.0;
    return max_residual / max_gradient;
  }
};

/// Right-hand side of the decomposition for one layer, batch x n.
inline Matrix beta_reconstruction(const BetaLayer& b, const LayerTrace& ts, const LayerTrace& tt) {
  const Index batch = ts.act.rows();
  Matrix out(batch, ts.act.cols());
  for (Index s = 0; s < batch; ++s) {
    const Vector bracket = b.beta_star[s] * tt.act.row(s).transpose() -
                           b.beta[s] * ts.act.row(s).transpose() + b.bias.row(s).transpose();
    out.row(s) = ts.gate.row(s).cwiseProduct(bracket.transpose());
  }
  return out;
}

inline IdentityCheck verify_identity(const BetaTensors& betas, const ForwardTrace& trace_s,
                                     const ForwardTrace& trace_t, const GradientSet& grads) {
  IdentityCheck c;
  for (std::size_t l = 0; l < betas.layers.size(); ++l) {
    const Matrix rhs = beta_reconstruction(betas.layers[l], trace_s.layers[l], trace_t.layers[l]);
    c.max_residual = std::max(c.max_residual, (grads.layers[l].node - rhs).cwiseAbs().maxCoeff());
    c.max_gradient = std::max(c.max_gradient, grads.layers[l].node.cwiseAbs().maxCoeff());
  }
  return c;
}

// ---------------------------------------------------------------------------
// Monte-Carlo expectations

/// Running mean and standard error of a matrix-valued sample.
class MatrixAccumulator {
 public:
  void add_sum(const Matrix& sum, const Matrix& sum_sq, Index count) {
    if (count_ == 0) {
      sum_ = sum;
      sum_sq_ = sum_sq;
    } else {
      sum_ += sum;
      sum_sq_ += sum_sq;
    }
    count_ += count;
  }
  void add(const Matrix& sample) { add_sum(sample, sample.cwiseProduct(sample), 1); }

  Index count() const { return count_; }
  Matrix mean() const { return sum_ / static_cast<double>(count_); }
  Matrix std_error() const {
    const double n = static_cast<double>(count_);
    const Matrix m = mean();
    const Matrix var = ((sum_sq_ / n) - m.cwiseProduct(m)).cwiseMax(0.0) * (n / (n - 1.0));
    return (var / n).cwiseSqrt();
  }

 private:
  Matrix sum_, sum_sq_;
  Index count_ = 0;
};

/// Sum over the batch of the outer products a_s b_s^T, and of their squares.
inline void outer_sums(const Matrix& a, const Matrix& b, Matrix& sum, Matrix& sum_sq) {
  sum = a.transpose() * b;
  sum_sq = a.cwiseProduct(a).transpose() * b.cwiseProduct(b);
}

/// Expectation matrices of one node layer. The "lower" quantities refer to
/// activations feeding this layer (the input for the first layer).
struct MomentSet {
  Matrix L, L_star, L_star2;  // E[f f^T], E[f f*^T], E[f* f*^T] of the layer below
  Matrix D, D_star, D_star2;  // E[f' f'^T] analogues at this layer
  Matrix beta_bar, beta_bar_star;
  Matrix H, H_star;  // beta_bar o D, beta_bar* o D*
  Matrix L_se, L_star_se, L_star2_se, D_se, D_star_se, D_star2_se, beta_bar_se, beta_bar_star_se;
  Index sample_count = 0;

  /// Factorized weight drift L* W* H*^T - L W H^T for this layer.
  Matrix weight_drift(const Matrix& w, const Matrix& w_star) const {
    return L_star * w_star * H_star.transpose() - L * w * H.transpose();
  }
};

inline constexpr Index kMomentChunk = 256;

inline std::vector<MomentSet> estimate_moments(const Network& student, const Network& teacher,
                                               GausStream& stream, Index n_samples) {
  detail::require_pair(student, teacher, "estimate_moments");
  if (n_samples < 2) throw PreconditionError("estimate_moments needs n_samples >= 2");
  const Index depth = student.num_layers();
  struct Acc {
    MatrixAccumulator L, Ls, Lss, D, Ds, Dss, B, Bs;
  };
  std::vector<Acc> acc(depth);
  Matrix sum, sq;
  for (Index done = 0; done < n_samples;) {
    const Index chunk = std::min(kMomentChunk, n_samples - done);
    const Matrix x = stream.next_batch(chunk);
    const ForwardTrace ts = forward(student, x);
    const ForwardTrace tt = forward(teacher, x);
    const BetaTensors bt = compute_beta(student, teacher, ts, tt);
    for (Index l = 0; l < depth; ++l) {
      Acc& a = acc[l];
      const Matrix& fs = ts.activation(l - 1);
      const Matrix& ft = tt.activation(l - 1);
      outer_sums(fs, fs, sum, sq);
      a.L.add_sum(sum, sq, chunk);
      outer_sums(fs, ft, sum, sq);
      a.Ls.add_sum(sum, sq, chunk);
      outer_sums(ft, ft, sum, sq);
      a.Lss.add_sum(sum, sq, chunk);
      const Matrix& gs = ts.layers[l].gate;
      const Matrix& gt = tt.layers[l].gate;
      outer_sums(gs, gs, sum, sq);
      a.D.add_sum(sum, sq, chunk);
      outer_sums(gs, gt, sum, sq);
      a.Ds.add_sum(sum, sq, chunk);
      outer_sums(gt, gt, sum, sq);
      a.Dss.add_sum(sum, sq, chunk);
      for (Index s = 0; s < chunk; ++s) {
        a.B.add(bt.layers[l].beta[s]);
        a.Bs.add(bt.layers[l].beta_star[s]);
      }
    }
    done += chunk;
  }
  std::vector<MomentSet> out(depth);
  for (Index l = 0; l < depth; ++l) {
    const Acc& a = acc[l];
    MomentSet& m = out[l];
    m.L = symmetrized(a.L.mean());
    m.L_star = a.Ls.mean();
    m.L_star2 = symmetrized(a.Lss.mean());
    m.D = symmetrized(a.D.mean());
    m.D_star = a.Ds.mean();
    m.D_star2 = symmetrized(a.Dss.mean());
    m.beta_bar = symmetrized(a.B.mean());
    m.beta_bar_star = a.Bs.mean();
    m.H = m.beta_bar.cwiseProduct(m.D);
    m.H_star = m.beta_bar_star.cwiseProduct(m.D_star);
    m.L_se = symmetrized(a.L.std_error());
    m.L_star_se = a.Ls.std_error();
    m.L_star2_se = symmetrized(a.Lss.std_error());
    m.D_se = symmetrized(a.D.std_error());
    m.D_star_se = a.Ds.std_error();
    m.D_star2_se = symmetrized(a.Dss.std_error());
    m.beta_bar_se = symmetrized(a.B.std_error());
    m.beta_bar_star_se = a.Bs.std_error();
    m.sample_count = n_samples;
  }
  return out;
}

// ---------------------------------------------------------------------------
// Factorization audit

/// Index tuple (j, t, k, kt): student node j and teacher node t at the layer,
/// student node k and teacher node kt one layer below.
struct SeparationProbe {
  Index j, t, k, kt;
};

struct SeparationReport {
  double worst_rel_err = 0.0;
  std::vector<double> per_probe;
};

inline constexpr double kSeparationGuard = 1e-12;

/// Compares E[b* f'_j f'_t f_k f*_kt] against E[b*] E[f'_j f'_t] E[f_k f*_kt]
/// for each probe, all estimated on the same samples.
inline SeparationReport separation_residual_at(const Network& student, const Network& teacher,
                                               GausStream& stream, Index n_samples, Index layer,
                                               const std::vector<SeparationProbe>& probes) {
  detail::require_pair(student, teacher, "separation_residual");
  if (layer < 0 || layer >= student.num_layers())
    throw ConfigError("separation_residual: layer out of range");
  const std::size_t P = probes.size();
  std::vector<double> joint(P, 0.0), beta(P, 0.0), gate(P, 0.0), act(P, 0.0);
  for (Index done = 0; done < n_samples;) {
    const Index chunk = std::min(kMomentChunk, n_samples - done);
    const Matrix x = stream.next_batch(chunk);
    const ForwardTrace ts = forward(student, x);
    const ForwardTrace tt = forward(teacher, x);
    const BetaTensors bt = compute_beta(student, teacher, ts, tt);
    const Matrix& gs = ts.layers[layer].gate;
    const Matrix& gt = tt.layers[layer].gate;
    const Matrix& fs = ts.activation(layer - 1);
    const Matrix& ft = tt.activation(layer - 1);
    for (Index s = 0; s < chunk; ++s) {
      const Matrix& b = bt.layers[layer].beta_star[s];
      for (std::size_t p = 0; p < P; ++p) {
        const SeparationProbe& q = probes[p];
        const double bv = b(q.j, q.t), gv = gs(s, q.j) * gt(s, q.t), fv = fs(s, q.k) * ft(s, q.kt);
        joint[p] += bv * gv * fv;
        beta[p] += bv;
        gate[p] += gv;
        act[p] += fv;
      }
    }
    done += chunk;
  }
  const double n = static_cast<double>(n_samples);
  SeparationReport r;
  r.per_probe.resize(P);
  for (std::size_t p = 0; p < P; ++p) {
    const double lhs = joint[p] / n;
    const double rhs = (beta[p] / n) * (gate[p] / n) * (act[p] / n);
    r.per_probe[p] = std::abs(lhs - rhs) / (std::abs(lhs) + std::abs(rhs) + kSeparationGuard);
    r.worst_rel_err = std::max(r.worst_rel_err, r.per_probe[p]);
  }
  return r;
}

/// Probe tuples drawn from a fixed seed, so any shorter list is a prefix of a
/// longer one.
inline std::vector<SeparationProbe> random_probes(const Network& student, const Network& teacher,
                                                  Index layer, Index n_probes,
                                                  std::uint64_t seed) {
  Rng rng(derive_seed(seed, 0x5E9A));
  const auto n = static_cast<std::size_t>(student.spec.widths[layer + 1]);
  const auto m = static_cast<std::size_t>(teacher.spec.widths[layer + 1]);
  const auto nk = static_cast<std::size_t>(student.spec.widths[layer]);
  const auto mk = static_cast<std::size_t>(teacher.spec.widths[layer]);
  std::vector<SeparationProbe> out;
  for (Index i = 0; i < n_probes; ++i)
    out.push_back({static_cast<Index>(rng.index(n)), static_cast<Index>(rng.index(m)),
                   static_cast<Index>(rng.index(nk)), static_cast<Index>(rng.index(mk))});
  return out;
}

inline double separation_residual(const Network& student, const Network& teacher,
                                  GausStream& stream, Index n_samples, Index n_probes,
                                  Index layer = 0, std::uint64_t probe_seed = 0) {
  return separation_residual_at(student, teacher, stream, n_samples, layer,
                                random_probes(student, teacher, layer, n_probes, probe_seed))
      .worst_rel_err;
}

// ---------------------------------------------------------------------------
// Pairwise overlap functions

struct Estimate {
  double value = 0.0;
  double std_error = 0.0;
};

namespace detail {
template <class F>
Estimate mc_mean(GausStream& stream, Index n, F&& per_batch) {
  if (n < 2) throw PreconditionError("Monte-Carlo estimate needs n >= 2");
  double sum = 0.0, sum_sq = 0.0;
  for (Index done = 0; done < n;) {
    const Index chunk = std::min<Index>(4096, n - done);
    const Vector v = per_batch(stream.next_batch(chunk));
    sum += v.sum();
    sum_sq += v.squaredNorm();
    done += chunk;
  }
  const double dn = static_cast<double>(n);
  const double mean = sum / dn;
  const double var = std::max(0.0, sum_sq / dn - mean * mean) * dn / (dn - 1.0);
  return {mean, std::sqrt(var / dn)};
}
inline void require_nonzero(const Vector& w, const Vector& w2, Index dim) {
  if (!(w.norm() > 0.0) || !(w2.norm() > 0.0)) throw PreconditionError("psi: zero weight vector");
  if (w.size() != dim || w2.size() != dim) throw ConfigError("psi: weight size does not match stream");
}
}  // namespace detail

/// E[relu(w.x) relu(w'.x)].
inline Estimate psi_l(const Vector& w, const Vector& w2, GausStream& stream, Index n) {
  detail::require_nonzero(w, w2, stream.spec().dim);
  return detail::mc_mean(stream, n, [&](const Matrix& x) -> Vector {
    return (x * w).cwiseMax(0.0).cwiseProduct((x * w2).cwiseMax(0.0));
  });
}

/// E[I(w.x > 0) I(w'.x > 0)].
inline Estimate psi_d(const Vector& w, const Vector& w2, GausStream& stream, Index n) {
  detail::require_nonzero(w, w2, stream.spec().dim);
  return detail::mc_mean(stream, n, [&](const Matrix& x) -> Vector {
    return ((x * w).array() > 0.0 && (x * w2).array() > 0.0).cast<double>().matrix();
  });
}

struct OverlapReport {
  double eps_d = 0.0;
  double eps_l = 0.0;
  Matrix d, l;  // pairwise overlap matrices
  std::optional<Index> dead_node;
};

inline OverlapReport overlap_from_moments(const Matrix& d, const Matrix& l) {
  OverlapReport r;
  r.d = d;
  r.l = l;
  const Index m = d.rows();
  for (Index j = 0; j < m; ++j)
    if (!(d(j, j) > 0.0) || !(l(j, j) > 0.0)) {
      r.dead_node = j;
      r.eps_d = r.eps_l = std::numeric_limits<double>::infinity();
      return r;
    }
  for (Index a = 0; a < m; ++a)
    for (Index b = a + 1; b < m; ++b) {
      r.eps_d = std::max(r.eps_d, d(a, b) / std::min(d(a, a), d(b, b)));
      r.eps_l = std::max(r.eps_l, l(a, b) / std::min(l(a, a), l(b, b)));
    }
  return r;
}

/// Assumption-3 overlap for every hidden layer of a teacher.
inline std::vector<OverlapReport> overlap_eps(const Network& teacher, GausStream& stream, Index n) {
  detail::require_plain(teacher, "overlap_eps");
  if (n < 2) throw PreconditionError("overlap_eps needs n >= 2");
  const Index hidden = teacher.num_layers() - 1;
  std::vector<MatrixAccumulator> dacc(hidden), lacc(hidden);
  Matrix sum, sq;
  for (Index done = 0; done < n;) {
    const Index chunk = std::min(kMomentChunk * 16, n - done);
    const ForwardTrace tr = forward(teacher, stream.next_batch(chunk));
    for (Index l = 0; l < hidden; ++l) {
      outer_sums(tr.layers[l].gate, tr.layers[l].gate, sum, sq);
      dacc[l].add_sum(sum, sq, chunk);
      outer_sums(tr.layers[l].act, tr.layers[l].act, sum, sq);
      lacc[l].add_sum(sum, sq, chunk);
    }
    done += chunk;
  }
  std::vector<OverlapReport> out;
  for (Index l = 0; l < hidden; ++l) {
    if (teacher.spec.widths[l + 1] < 2)
      throw PreconditionError("overlap_eps needs at least 2 teacher nodes per layer");
    out.push_back(overlap_from_moments(symmetrized(dacc[l].mean()), symmetrized(lacc[l].mean())));
  }
  return out;
}

/// Overlap among the bias-free ReLU nodes given by the columns of w.
inline OverlapReport overlap_eps_columns(const Matrix& w, GausStream& stream, Index n) {
  if (w.cols() < 2) throw PreconditionError("overlap_eps needs at least 2 nodes");
  MatrixAccumulator dacc, lacc;
  Matrix sum, sq;
  for (Index done = 0; done < n;) {
    const Index chunk = std::min(kMomentChunk * 16, n - done);
    const Matrix pre = stream.next_batch(chunk) * w;
    const Matrix gate = (pre.array() > 0.0).cast<double>();
    const Matrix act = pre.cwiseMax(0.0);
    outer_sums(gate, gate, sum, sq);
    dacc.add_sum(sum, sq, chunk);
    outer_sums(act, act, sum, sq);
    lacc.add_sum(sum, sq, chunk);
    done += chunk;
  }
  return overlap_from_moments(symmetrized(dacc.mean()), symmetrized(lacc.mean()));
}

inline constexpr double kLipschitzFloor = 1e-3;

struct LipschitzPair {
  double ratio_d = 0.0;
  double ratio_l = 0.0;
  bool skipped = false;
};

/// |psi(w, w1) - psi(w, w2)| / (psi(w, w1) |w1 - w2|) for both overlap
/// functions, with both values computed on the same input samples. A probe
/// whose psi(w, w1) falls below the floor is skipped.
inline LipschitzPair lipschitz_pair(const Vector& w, const Vector& w1, const Vector& w2,
                                    GausStream& stream, Index n) {
  double d1 = 0, d2 = 0, l1 = 0, l2 = 0;
  for (Index done = 0; done < n;) {
    const Index chunk = std::min<Index>(4096, n - done);
    const Matrix x = stream.next_batch(chunk);
    const Vector z = x * w, z1 = x * w1, z2 = x * w2;
    for (Index s = 0; s < chunk; ++s) {
      if (z(s) <= 0.0) continue;
      if (z1(s) > 0.0) {
        d1 += 1.0;
        l1 += z(s) * z1(s);
      }
      if (z2(s) > 0.0) {
        d2 += 1.0;
        l2 += z(s) * z2(s);
      }
    }
    done += chunk;
  }
  const double dn = static_cast<double>(n);
  d1 /= dn, d2 /= dn, l1 /= dn, l2 /= dn;
  LipschitzPair p;
  if (d1 < kLipschitzFloor || l1 < kLipschitzFloor) {
    p.skipped = true;
    return p;
  }
  const double dist = (w1 - w2).norm();
  if (d1 != d2) p.ratio_d = std::abs(d1 - d2) / (d1 * dist);
  if (l1 != l2) p.ratio_l = std::abs(l1 - l2) / (l1 * dist);
  return p;
}

struct LipschitzReport {
  double k_d = 0.0;
  double k_l = 0.0;
  Index probes = 0;
  Index skipped = 0;
};

/// Empirical Lipschitz constants of psi_d and psi_l in their second argument
/// around w. Each probe picks w1 at a random angle up to pi/3 from w and
/// w2 = w1 moved by delta along a random tangent direction, norm kept.
inline LipschitzReport lipschitz_probe(const Vector& w, GausStream& stream, Index n,
                                       Index n_directions, const std::vector<double>& deltas,
                                       std::uint64_t seed = 0) {
  for (double d : deltas)
    if (!(d > 0.0) || d > 0.3) throw PreconditionError("lipschitz_probe: deltas must lie in (0, 0.3]");
  const Index dim = w.size();
  const double norm = w.norm();
  if (!(norm > 0.0)) throw PreconditionError("lipschitz_probe: zero weight vector");
  Rng rng(derive_seed(seed, 0x119));
  auto tangent = [&](const Vector& at) {
    Vector u = rng.gaussian(dim, 1);
    const Vector a = at.normalized();
    u -= a * a.dot(u);
    return Vector(u.normalized());
  };
  LipschitzReport r;
  for (Index p = 0; p < n_directions; ++p) {
    const double angle = rng.uniform(0.0, M_PI / 3.0);
    const Vector w1 = norm * (std::cos(angle) * w.normalized() + std::sin(angle) * tangent(w));
    const Vector u = tangent(w1);
    for (double delta : deltas) {
      const Vector w2 = norm * (w1 + delta * norm * u).normalized();
      const LipschitzPair q = lipschitz_pair(w, w1, w2, stream, n);
      ++r.probes;
      if (q.skipped) {
        ++r.skipped;
        continue;
      }
      r.k_d = std::max(r.k_d, q.ratio_d);
      r.k_l = std::max(r.k_l, q.ratio_l);
    }
  }
  return r;
}

}  // namespace tslab
