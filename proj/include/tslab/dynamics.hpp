#pragma once

// Reduced gradient dynamics on unit-norm filters: the single-layer
// near-teacher regime and the over-parameterized two-layer regime, with the
// constants that bound their convergence and per-iteration checks of the
// inductive hypotheses behind those bounds.

#include <cmath>
#include <limits>
#include <string>
#include <vector>

#include "tslab/beta.hpp"
#include "tslab/error.hpp"
#include "tslab/linalg.hpp"
#include "tslab/teacher.hpp"

namespace tslab {

// ---------------------------------------------------------------------------
// Single-layer constants

struct SingleLayerConstants {
  double m_d = 0.0;
  double d_bar = 0.0;
  double gamma = 0.0;
  double rate = 1.0;  // 1 - eta d_bar gamma, meaningful only when feasible
  bool feasible = false;
};

inline void require_angle(double theta0) {
  if (!(theta0 > 0.0 && theta0 < M_PI / 2.0))
    throw PreconditionError("theta0 must lie in (0, pi/2)");
}

inline SingleLayerConstants thm4_constants(double theta0, Index m, double eps_d, double k_d,
                                           double d_diag_min, double eta) {
  require_angle(theta0);
  if (m < 1) throw PreconditionError("thm4_constants: m must be >= 1");
  SingleLayerConstants c;
  const double s = std::sin(theta0 / 2.0);
  const double spread = 1.0 + 2.0 * k_d * s;
  c.m_d = (1.0 + k_d) * spread * spread / std::cos(theta0 / 2.0);
  c.d_bar = spread * d_diag_min;
  c.gamma = std::cos(theta0);
  if (m > 1) c.gamma -= static_cast<double>(m - 1) * eps_d * c.m_d;
  c.feasible = c.gamma > 0.0;
  c.rate = 1.0 - eta * c.d_bar * c.gamma;
  return c;
}

// ---------------------------------------------------------------------------
// Two-layer constants

struct LedgerInputs {
  double k_d = 0.0, k_l = 0.0;
  double theta0 = 0.1;
  double eps_d = 0.0, eps_l = 0.0;
  double b_v = 1.0, b_dv = 0.0;
  Index m = 1, n = 1;
  double c0 = 0.0;
  double eta = 0.01;
  double d_min = 0.5, l_min = 0.5;
};

/// Constants attached to one activation family (gate overlaps "d" or
/// rectified correlations "l").
struct FamilyConstants {
  double c_u = 0.0, c_r = 0.0;
  double m_uu = 0.0, m_ur = 0.0, m_ru = 0.0, m_rr = 0.0;
  double b_u = 0.0, b_r = 0.0;
  double floor = 0.0;  // d_bar or l_bar
};

struct ConstantLedger {
  LedgerInputs in;
  FamilyConstants d, l;
  double lambda_bar = 0.0;
  double kappa = 0.0;
  double w_cond = 0.0;  // right-hand side of the lower-layer condition
  double v_cond = 0.0;  // right-hand side of the upper-layer condition
  double gamma = 0.0;
  double rate_w = 1.0, rate_v = 1.0;
  int iterations = 0;
  bool feasible = false;
  std::string binding = "none";
};

inline constexpr double kGammaDamping = 0.5;
inline constexpr double kGammaTolerance = 1e-10;
inline constexpr int kGammaIterations = 100;

namespace detail {
inline void fill_family(FamilyConstants& f, double k, double theta0, Index m, Index n,
                        double diag_min, double c_r) {
  const double half_cos = std::cos(theta0 / 2.0);
  f.c_u = 2.0 * k * std::sin(theta0 / 2.0);
  f.c_r = c_r;
  const double u = 1.0 + f.c_u, r = 1.0 + f.c_r;
  f.m_uu = (1.0 + k) * u * u / half_cos;
  f.m_ur = (1.0 + k) * u * r;
  f.m_ru = f.m_ur / half_cos;
  f.m_rr = (1.0 + k) * r * r;
  const double mu = static_cast<double>(m - 1), nr = static_cast<double>(n - m);
  f.b_u = mu * f.m_uu + nr * f.m_ur;
  f.b_r = mu * f.m_ru + nr * f.m_rr;
  f.floor = (1.0 - k * std::max(f.c_u, f.c_r)) * diag_min;
}
}  // namespace detail

/// Full ledger for the over-parameterized two-layer regime. The drift bound
/// of the r-set depends on gamma, so gamma is found by damped fixed-point
/// iteration of gamma = min(w_cond, v_cond).
inline ConstantLedger thm5_constants(const LedgerInputs& in) {
  require_angle(in.theta0);
  const double vals[] = {in.k_d, in.k_l, in.eps_d, in.eps_l, in.b_v, in.b_dv, in.c0, in.eta,
                         in.d_min, in.l_min};
  for (double v : vals)
    if (!std::isfinite(v)) throw PreconditionError("thm5_constants: non-finite input");
  if (in.m < 1 || in.n < in.m) throw PreconditionError("thm5_constants: need 1 <= m <= n");

  ConstantLedger g;
  g.in = in;
  g.kappa = 2.0 * in.c0 * std::sin(in.theta0 / 2.0) * (1.0 + in.b_dv);

  double c_dr = 0.0, c_lr = 0.0;
  auto refresh = [&] {
    detail::fill_family(g.d, in.k_d, in.theta0, in.m, in.n, in.d_min, c_dr);
    detail::fill_family(g.l, in.k_l, in.theta0, in.m, in.n, in.l_min, c_lr);
    g.lambda_bar = std::min(g.d.floor, g.l.floor);
    g.w_cond = (in.b_v - in.b_dv) * std::cos(in.theta0) -
               in.eps_d * (in.b_v + in.b_dv) * std::max(g.d.b_u, g.d.b_r);
    g.v_cond = 1.0 - in.eps_l * std::max(g.l.b_u, g.l.b_r) - g.kappa;
    return std::min(g.w_cond, g.v_cond);
  };
  // r-set drift radii at a given gamma; false when they are undefined.
  auto update_radii = [&](double gamma) {
    const double denom = g.lambda_bar * gamma * (2.0 - in.eta * g.lambda_bar * gamma);
    if (!(gamma > 0.0) || !(denom > 0.0)) return false;
    c_dr = in.eps_d * in.k_d * std::max(g.d.b_r, g.d.b_u) * (in.b_v + in.b_dv) * in.b_v / denom;
    c_lr = in.eps_l * in.k_l * std::max(g.l.b_r, g.l.b_u) * (in.b_v + in.b_dv) * in.b_v / denom;
    return true;
  };

  double gamma = refresh();
  bool converged = false;
  for (g.iterations = 1; g.iterations <= kGammaIterations; ++g.iterations) {
    if (!update_radii(gamma)) break;
    const double next = refresh();
    if (!(next > 0.0)) {  // radii only grow as gamma shrinks, so this stays infeasible
      gamma = next;
      break;
    }
    if (std::abs(next - gamma) <= kGammaTolerance) {
      gamma = next;
      converged = true;
      break;
    }
    gamma = kGammaDamping * gamma + (1.0 - kGammaDamping) * next;
  }
  g.iterations = std::min(g.iterations, kGammaIterations);
  g.gamma = gamma;
  g.feasible = converged;

  if (!(g.d.floor > 0.0)) {
    g.feasible = false;
    g.binding = "d_bar";
  } else if (!(g.l.floor > 0.0)) {
    g.feasible = false;
    g.binding = "l_bar";
  } else if (!(g.w_cond > 0.0) || !(g.v_cond > 0.0) || !(gamma > 0.0)) {
    g.feasible = false;
    g.binding = g.w_cond <= g.v_cond ? "w_cond" : "v_cond";
  } else if (2.0 - in.eta * g.lambda_bar * gamma <= 0.0) {
    g.feasible = false;
    g.binding = "step_size";
  } else if (!g.feasible) {
    g.binding = "no_fixed_point";
  }
  g.rate_w = 1.0 - in.eta * g.d.floor * gamma;
  g.rate_v = 1.0 - in.eta * g.l.floor * gamma;
  return g;
}

// ---------------------------------------------------------------------------
// Monte-Carlo moments on whitened input

struct PairMoments {
  Matrix d, d_se;  // E[I(a.x>0) I(b.x>0)]
  Matrix l, l_se;  // E[relu(a.x) relu(b.x)]
};

/// Gate and rectified-correlation moments between the columns of a and b on
/// n samples of x ~ N(0, I). Standard errors are left empty unless asked for.
inline PairMoments pair_moments(const Matrix& x, const Matrix& a, const Matrix& b,
                                bool with_l = true, bool with_se = true) {
  const double n = static_cast<double>(x.rows());
  const Matrix za = x * a, zb = x * b;
  const Matrix ga = (za.array() > 0.0).cast<double>(), gb = (zb.array() > 0.0).cast<double>();
  PairMoments m;
  m.d.noalias() = ga.transpose() * gb / n;
  // Indicator products are Bernoulli, so the variance is p (1 - p).
  if (with_se) m.d_se = (m.d.array() * (1.0 - m.d.array()) / (n - 1.0)).cwiseMax(0.0).sqrt();
  if (with_l) {
    const Matrix fa = za.cwiseMax(0.0), fb = zb.cwiseMax(0.0);
    m.l.noalias() = fa.transpose() * fb / n;
    if (with_se) {
      const Matrix sq = fa.cwiseProduct(fa).transpose() * fb.cwiseProduct(fb) / n;
      m.l_se = ((sq - m.l.cwiseProduct(m.l)).cwiseMax(0.0) / (n - 1.0)).cwiseSqrt();
    }
  }
  return m;
}

inline Matrix project_columns(const Matrix& w, const Matrix& update) {
  Matrix out = update;
  for (Index j = 0; j < w.cols(); ++j) out.col(j) -= w.col(j) * w.col(j).dot(update.col(j));
  return out;
}

inline constexpr double kMinStepNorm = 1e-6;

inline Matrix renormalize_after_step(const Matrix& w) {
  Matrix out = w;
  for (Index j = 0; j < w.cols(); ++j) {
    const double n = w.col(j).norm();
    if (!(n >= kMinStepNorm))
      throw NumericError("step collapsed column " + std::to_string(j) + "; reduce the step size");
    out.col(j) /= n;
  }
  return out;
}

inline Vector column_sines(const Matrix& w, const Matrix& w_star) {
  Vector s(w_star.cols());
  for (Index j = 0; j < w_star.cols(); ++j) s(j) = std::sin(angle_between(w.col(j), w_star.col(j)));
  return s;
}

// ---------------------------------------------------------------------------
// Single-layer dynamics

struct SingleLayerState {
  Matrix w;       // d x n, unit columns
  Matrix w_star;  // d x m, unit columns
  double eta = 0.01;
  Index t = 0;
  Vector theta;  // angle of column j to teacher column j, j < m

  void refresh_angles() {
    const Index k = std::min(w.cols(), w_star.cols());
    theta.resize(k);
    for (Index j = 0; j < k; ++j) theta(j) = angle_between(w.col(j), w_star.col(j));
  }
};

struct SingleStepInfo {
  Matrix d, d_star;  // moments used by the step
  double update_se = 0.0;  // largest per-column standard error of the raw update
};

/// One explicit step of w_j <- normalize(w_j + eta P_j (W* h*_j - W h_j)) with
/// all upper-layer coefficients equal to one and moments re-estimated on
/// `samples` fresh whitened inputs.
inline SingleStepInfo step_single(SingleLayerState& st, GausStream& stream, Index samples) {
  if (stream.spec().dim != st.w.rows()) throw ConfigError("step_single: stream dim mismatch");
  const Matrix x = stream.next_batch(samples);
  PairMoments own = pair_moments(x, st.w, st.w, false);
  PairMoments cross = pair_moments(x, st.w, st.w_star, false);
  SingleStepInfo info;
  info.d = symmetrized(own.d);
  info.d_star = cross.d;
  const Matrix raw = st.w_star * info.d_star.transpose() - st.w * info.d.transpose();
  for (Index j = 0; j < st.w.cols(); ++j)
    info.update_se = std::max(info.update_se, std::hypot(cross.d_se.row(j).norm(), own.d_se.row(j).norm()));
  st.w = renormalize_after_step(st.w + st.eta * project_columns(st.w, raw));
  ++st.t;
  st.refresh_angles();
  return info;
}

/// d x m matrix with orthonormal columns from the QR factor of a Gaussian.
inline Matrix orthonormal_teacher(Index d, Index m, Rng& rng) {
  if (m > d) throw ConfigError("orthonormal teacher needs m <= d");
  Eigen::HouseholderQR<Matrix> qr(rng.gaussian(d, m));
  return qr.householderQ() * Matrix::Identity(d, m);
}

/// Unit vectors each at angle theta0 from the matching teacher column.
inline Matrix rotate_columns(const Matrix& w_star, double theta0, Rng& rng) {
  Matrix w(w_star.rows(), w_star.cols());
  for (Index j = 0; j < w_star.cols(); ++j) {
    Vector u = rng.gaussian(w_star.rows(), 1);
    const Vector a = w_star.col(j).normalized();
    u = (u - a * a.dot(u)).normalized();
    w.col(j) = std::cos(theta0) * a + std::sin(theta0) * u;
  }
  return w;
}

// ---------------------------------------------------------------------------
// Two-layer dynamics

struct TwoLayerState {
  Matrix w;       // d x n, unit columns; columns [0, m) are the u-set
  Matrix v;       // n x C
  Matrix w_star;  // d x m
  Matrix v_star;  // m x C
  Matrix w0;      // initial W snapshot
  Matrix v0;
  double eta = 0.01;
  Index t = 0;

  Index m() const { return w_star.cols(); }
  Index n() const { return w.cols(); }
  /// Teacher columns extended by the initial r-set columns.
  Matrix extended_teacher() const {
    Matrix e(w.rows(), n());
    e.leftCols(m()) = w_star;
    e.rightCols(n() - m()) = w0.rightCols(n() - m());
    return e;
  }
  Vector row_norms() const { return v.rowwise().norm(); }
  /// max over r-set row norms divided by min over u-set row norms.
  double norm_ratio() const {
    if (n() == m()) return 0.0;
    const Vector r = row_norms();
    return r.tail(n() - m()).maxCoeff() / r.head(m()).minCoeff();
  }
};

struct TwoLayerInit {
  Index d = 10, m = 20, c = 30;
  Index overparam = 5;
  double p_w = 10.0, p_v = 10.0;
  double eta = 0.05;
  std::uint64_t teacher_seed = 0;
  std::uint64_t seed = 0;
};

/// Teacher on the weight grid with unit hidden columns (their norms moved
/// into the upper rows, which are then column-normalized), and a student
/// whose u-set is column_normalize(p * teacher + unit-column noise) in both
/// layers and whose r-set is unit-column noise.
inline TwoLayerState make_two_layer(const TwoLayerInit& in) {
  if (in.overparam < 1) throw ConfigError("overparam must be >= 1");
  TeacherSpec ts;
  ts.widths = {in.d, in.m, in.c};
  ts.bias = false;
  ts.seed = in.teacher_seed;
  const Network teacher = make_teacher(ts);
  TwoLayerState st;
  const Vector norms = teacher.layers[0].w.colwise().norm().transpose();
  st.w_star = column_normalize(teacher.layers[0].w);
  st.v_star = column_normalize(norms.asDiagonal() * teacher.layers[1].w);

  const Index n = in.m * in.overparam;
  Rng rng(derive_seed(in.seed, 0x2A1));
  const Matrix we = normalized_noise(in.d, n, rng);
  const Matrix ve = normalized_noise(n, in.c, rng);
  st.w = we;
  st.w.leftCols(in.m) = column_normalize(in.p_w * st.w_star + we.leftCols(in.m));
  st.v = ve;
  st.v.topRows(in.m) = column_normalize(in.p_v * st.v_star + ve.topRows(in.m));
  st.w0 = st.w;
  st.v0 = st.v;
  st.eta = in.eta;
  return st;
}

struct TwoLayerStepInfo {
  PairMoments own, cross;
};

/// One explicit step of the coupled dynamics
///   W <- column-normalize(W + eta P (W* H*^T - W H^T)),
///   V <- V + eta (L* V* - L V),
/// with H = D o (V V^T), H* = D* o (V V*^T) and all moments estimated on the
/// same `samples` whitened inputs.
inline TwoLayerStepInfo step_two_layer(TwoLayerState& st, GausStream& stream, Index samples) {
  if (stream.spec().dim != st.w.rows()) throw ConfigError("step_two_layer: stream dim mismatch");
  const Matrix x = stream.next_batch(samples);
  TwoLayerStepInfo info;
  info.own = pair_moments(x, st.w, st.w, true, false);
  info.cross = pair_moments(x, st.w, st.w_star, true, false);
  info.own.d = symmetrized(info.own.d);
  info.own.l = symmetrized(info.own.l);
  const Matrix h = info.own.d.cwiseProduct(st.v * st.v.transpose());
  const Matrix h_star = info.cross.d.cwiseProduct(st.v * st.v_star.transpose());
  const Matrix dw = st.w_star * h_star.transpose() - st.w * h.transpose();
  const Matrix dv = info.cross.l * st.v_star - info.own.l * st.v;
  st.w = renormalize_after_step(st.w + st.eta * project_columns(st.w, dw));
  st.v += st.eta * dv;
  if (!st.v.allFinite()) throw NumericError("step_two_layer: upper weights diverged; reduce eta");
  ++st.t;
  return info;
}

// ---------------------------------------------------------------------------
// Inductive-hypothesis monitor

struct HypothesisEntry {
  Index t = 0;
  double w_separation = 0.0;  // slack = rhs - lhs, minimized over indices
  double wu_contraction = 0.0;
  double v_contraction = 0.0;
  double wr_bound = 0.0;
  bool w_separation_ok() const { return w_separation >= 0.0; }
  bool wu_contraction_ok() const { return wu_contraction >= 0.0; }
  bool v_contraction_ok() const { return v_contraction >= 0.0; }
  bool wr_bound_ok() const { return wr_bound >= 0.0; }
};

/// Evaluates the four hypothesis families at the current state from moments
/// measured against the extended teacher (teacher columns plus the initial
/// r-set columns).
inline HypothesisEntry monitor_hypotheses(const TwoLayerState& st, const ConstantLedger& g,
                                          const PairMoments& ext) {
  HypothesisEntry e;
  e.t = st.t;
  const Index m = st.m(), n = st.n();
  const double inf = std::numeric_limits<double>::infinity();

  auto family_m = [&](const FamilyConstants& f, Index j, Index jp) {
    const bool ju = j < m, jpu = jp < m;
    if (ju && jpu) return f.m_uu;
    if (ju) return f.m_ur;
    if (jpu) return f.m_ru;
    return f.m_rr;
  };
  e.w_separation = inf;
  for (Index j = 0; j < n; ++j)
    for (Index jp = 0; jp < n; ++jp) {
      if (j == jp) continue;
      e.w_separation = std::min(
          e.w_separation, g.in.eps_d * family_m(g.d, j, jp) * ext.d(j, j) - ext.d(j, jp));
      e.w_separation = std::min(
          e.w_separation, g.in.eps_l * family_m(g.l, j, jp) * ext.l(j, j) - ext.l(j, jp));
    }
  if (n < 2) e.w_separation = 0.0;

  const double power = static_cast<double>(std::max<Index>(st.t - 1, 0));
  const double wu_bound = std::pow(g.rate_w, power) * std::sin(g.in.theta0);
  const double v_scale = std::pow(g.rate_v, power);
  e.wu_contraction = inf;
  e.v_contraction = inf;
  for (Index j = 0; j < m; ++j) {
    e.wu_contraction =
        std::min(e.wu_contraction, wu_bound - std::sin(angle_between(st.w.col(j), st.w_star.col(j))));
    e.v_contraction =
        std::min(e.v_contraction, v_scale * g.in.b_dv - (st.v.row(j) - st.v_star.row(j)).norm());
  }
  e.wr_bound = inf;
  for (Index j = m; j < n; ++j) {
    e.v_contraction = std::min(e.v_contraction, v_scale * g.in.b_v - st.v.row(j).norm());
    e.wr_bound = std::min(e.wr_bound, g.d.c_r - (st.w.col(j) - st.w0.col(j)).norm());
  }
  if (n == m) e.wr_bound = 0.0;
  return e;
}

// ---------------------------------------------------------------------------
// Quadratic fall-off of the diagonal rectified correlation

struct FalloffPoint {
  double delta = 0.0;       // |w - w*|
  double diff = 0.0;        // l*_jj - l_jj
  double std_error = 0.0;
  double l_star = 0.0;
  bool kept = false;
};

struct FalloffResult {
  std::vector<FalloffPoint> points;
  double exponent = std::numeric_limits<double>::quiet_NaN();
  double c0_hat = std::numeric_limits<double>::quiet_NaN();
  bool fitted = false;
};

/// For each scale, perturbs w* along a random tangent direction (norm kept)
/// and estimates l*_jj - l_jj = E[f_j f*_j] - E[f_j f_j] from common samples.
/// Scales whose difference is within 3 standard errors of zero are dropped.
inline FalloffResult quadratic_falloff_probe(const Vector& w_star, const std::vector<double>& scales,
                                             GausStream& stream, Index n, std::uint64_t seed = 0) {
  if (stream.spec().dim != w_star.size()) throw ConfigError("falloff probe: stream dim mismatch");
  const double norm = w_star.norm();
  if (!(norm > 0.0)) throw PreconditionError("falloff probe: zero teacher vector");
  Rng rng(derive_seed(seed, 0xFA11));
  FalloffResult r;
  for (double delta : scales) {
    if (delta < 0.0) throw PreconditionError("falloff probe: negative scale");
    FalloffPoint p;
    Vector u = rng.gaussian(w_star.size(), 1);
    const Vector a = w_star / norm;
    u = (u - a * a.dot(u)).normalized();
    const Vector w = norm * (a + delta * u).normalized();
    p.delta = (w - w_star).norm();
    double sum = 0.0, sum_sq = 0.0, l_star = 0.0;
    for (Index done = 0; done < n;) {
      const Index chunk = std::min<Index>(8192, n - done);
      const Matrix x = stream.next_batch(chunk);
      const Vector f = (x * w).cwiseMax(0.0), fs = (x * w_star).cwiseMax(0.0);
      const Vector per = f.cwiseProduct(f - fs);  // f (f - f*) gives l_jj - l*_jj
      sum += per.sum();
      sum_sq += per.squaredNorm();
      l_star += f.dot(fs);
      done += chunk;
    }
    const double dn = static_cast<double>(n);
    p.diff = -sum / dn;
    p.std_error = std::sqrt(std::max(0.0, sum_sq / dn - (sum / dn) * (sum / dn)) / (dn - 1.0));
    p.l_star = l_star / dn;
    p.kept = delta > 0.0 && std::abs(p.diff) > 3.0 * p.std_error;
    r.points.push_back(p);
  }
  std::vector<double> xs, ys;
  double c0 = 0.0;
  for (const FalloffPoint& p : r.points)
    if (p.kept) {
      xs.push_back(std::log(p.delta));
      ys.push_back(std::log(std::abs(p.diff)));
      c0 = std::max(c0, std::abs(p.diff) / (p.l_star * p.delta * p.delta));
    }
  if (xs.size() >= 2) {
    const double k = static_cast<double>(xs.size());
    double mx = 0, my = 0;
    for (std::size_t i = 0; i < xs.size(); ++i) mx += xs[i] / k, my += ys[i] / k;
    double sxy = 0, sxx = 0;
    for (std::size_t i = 0; i < xs.size(); ++i) {
      sxy += (xs[i] - mx) * (ys[i] - my);
      sxx += (xs[i] - mx) * (xs[i] - mx);
    }
    r.exponent = sxy / sxx;
    r.c0_hat = c0;
    r.fitted = true;
  }
  return r;
}

}  // namespace tslab
