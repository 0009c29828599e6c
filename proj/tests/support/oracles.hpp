#pragma once

// Independent reference computations used only by the test suites.

#include <algorithm>
#include <cmath>
#include <limits>
#include <random>
#include <vector>

#include "tslab/net.hpp"

namespace tslab::oracle {

/// Smallest |pre_act| over every hidden (ReLU) layer of a trace.
inline double min_abs_hidden_preact(const ForwardTrace& tr) {
  double m = std::numeric_limits<double>::infinity();
  for (std::size_t l = 0; l + 1 < tr.layers.size(); ++l)
    m = std::min(m, tr.layers[l].pre_act.cwiseAbs().minCoeff());
  return m;
}

inline double rel_err(const Matrix& a, const Matrix& b) {
  const double scale = std::max(a.norm(), b.norm());
  return scale == 0.0 ? 0.0 : (a - b).norm() / scale;
}

/// Central-difference negative gradient of the mean squared loss w.r.t. every
/// parameter, laid out like GradientSet (node gradients left empty).
inline GradientSet finite_difference(const Network& net, const Matrix& x, const Matrix& target,
                                     double h = 1e-4) {
  auto objective = [&](const Network& n) { return loss(forward(n, x).output(), target); };
  auto probe = [&](Network& n, double& p) {
    const double keep = p;
    p = keep + h;
    const double up = objective(n);
    p = keep - h;
    const double down = objective(n);
    p = keep;
    return -(up - down) / (2.0 * h);
  };
  Network work = net;
  GradientSet out;
  out.layers.resize(net.layers.size());
  for (std::size_t l = 0; l < net.layers.size(); ++l) {
    Layer& p = work.layers[l];
    LayerGrad& g = out.layers[l];
    g.w.resize(p.w.rows(), p.w.cols());
    for (Index c = 0; c < p.w.cols(); ++c)
      for (Index r = 0; r < p.w.rows(); ++r) g.w(r, c) = probe(work, p.w(r, c));
    g.b.resize(p.b.size());
    for (Index i = 0; i < p.b.size(); ++i) g.b(i) = probe(work, p.b(i));
    g.c0.resize(p.c0.size());
    for (Index i = 0; i < p.c0.size(); ++i) g.c0(i) = probe(work, p.c0(i));
    g.c1.resize(p.c1.size());
    for (Index i = 0; i < p.c1.size(); ++i) g.c1(i) = probe(work, p.c1(i));
  }
  return out;
}

/// Worst relative error over every parameter block of two gradient sets.
inline double worst_param_rel_err(const GradientSet& a, const GradientSet& b) {
  double worst = 0.0;
  for (std::size_t l = 0; l < a.layers.size(); ++l) {
    worst = std::max(worst, rel_err(a.layers[l].w, b.layers[l].w));
    if (a.layers[l].b.size() > 0) worst = std::max(worst, rel_err(a.layers[l].b, b.layers[l].b));
    if (a.layers[l].c0.size() > 0) {
      worst = std::max(worst, rel_err(a.layers[l].c0, b.layers[l].c0));
      worst = std::max(worst, rel_err(a.layers[l].c1, b.layers[l].c1));
    }
  }
  return worst;
}

/// Central differences of sum(g_out .* bn(f)) w.r.t. f, recomputing the batch
/// statistics from scratch for every probe.
inline Matrix bn_input_fd(const Matrix& f, const Vector& c0, const Vector& c1,
                          const Matrix& g_out, double h = 1e-5) {
  auto objective = [&](const Matrix& in) {
    const double n = static_cast<double>(in.rows());
    double total = 0.0;
    for (Index c = 0; c < in.cols(); ++c) {
      const double mu = in.col(c).sum() / n;
      const double var = (in.col(c).array() - mu).square().sum() / n;
      const double sd = std::sqrt(var);
      for (Index r = 0; r < in.rows(); ++r)
        total += g_out(r, c) * (c0(c) * (in(r, c) - mu) / sd + c1(c));
    }
    return total;
  };
  Matrix work = f;
  Matrix out(f.rows(), f.cols());
  for (Index c = 0; c < f.cols(); ++c)
    for (Index r = 0; r < f.rows(); ++r) {
      const double keep = work(r, c);
      work(r, c) = keep + h;
      const double up = objective(work);
      work(r, c) = keep - h;
      const double down = objective(work);
      work(r, c) = keep;
      out(r, c) = (up - down) / (2.0 * h);
    }
  return out;
}

struct McValue {
  double value;
  double std_error;
};

/// Joint activation probability of two unit directions at angle theta,
/// sampled directly in the plane they span.
inline McValue psi_d_planar(double theta, long n, unsigned seed) {
  std::mt19937 gen(seed);
  std::normal_distribution<double> normal;
  const double ct = std::cos(theta), st = std::sin(theta);
  long hits = 0;
  for (long i = 0; i < n; ++i) {
    const double x = normal(gen), y = normal(gen);
    if (x > 0.0 && ct * x + st * y > 0.0) ++hits;
  }
  const double p = static_cast<double>(hits) / static_cast<double>(n);
  return {p, std::sqrt(p * (1.0 - p) / static_cast<double>(n))};
}

}  // namespace tslab::oracle
