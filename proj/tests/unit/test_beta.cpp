#include <gtest/gtest.h>

#include "support/oracles.hpp"
#include "tslab/beta.hpp"

using namespace tslab;

namespace {

Network biased_net(std::vector<Index> widths, std::uint64_t seed, double bias_std = 0.3) {
  Rng rng(seed);
  Network net = init_network(NetworkSpec::make(std::move(widths)), rng);
  for (auto& l : net.layers) l.b = rng.gaussian(l.b.size(), 1, bias_std);
  return net;
}

struct Pass {
  ForwardTrace ts, tt;
  GradientSet grads;
  BetaTensors betas;
};

Pass run(const Network& s, const Network& t, const Matrix& x) {
  Pass p;
  p.ts = forward(s, x);
  p.tt = forward(t, x);
  p.grads = backward(s, p.ts, p.tt.output());
  p.betas = compute_beta(s, t, p.ts, p.tt);
  return p;
}

}  // namespace

TEST(Beta, DepthOneIsBaseCase) {
  Network s = biased_net({4, 3}, 1), t = biased_net({4, 3}, 2);
  Rng rng(3);
  Pass p = run(s, t, rng.gaussian(5, 4));
  ASSERT_EQ(p.betas.layers.size(), 1u);
  for (const Matrix& b : p.betas.layers[0].beta) EXPECT_EQ(b, Matrix::Identity(3, 3));
  for (const Matrix& b : p.betas.layers[0].beta_star) EXPECT_EQ(b, Matrix::Identity(3, 3));
  EXPECT_LT(verify_identity(p.betas, p.ts, p.tt, p.grads).relative(), 1e-12);
}

TEST(Beta, DeadGatesZeroLowerLayers) {
  Network s = biased_net({4, 5, 6, 3}, 4);
  s.layers[1].b.setConstant(-100.0);
  Network t = biased_net({4, 6, 2, 3}, 5);
  Rng rng(6);
  Pass p = run(s, t, rng.gaussian(5, 4));
  for (const Matrix& b : p.betas.layers[0].beta) EXPECT_EQ(b.norm(), 0.0);
  for (const Matrix& b : p.betas.layers[0].beta_star) EXPECT_EQ(b.norm(), 0.0);
  EXPECT_EQ(p.grads.layers[0].node.norm(), 0.0);
}

TEST(Beta, IdentityIsExactOnDeepNets) {
  Network s = biased_net({20, 30, 25, 10}, 7), t = biased_net({20, 15, 12, 10}, 8);
  Rng rng(9);
  Pass p = run(s, t, rng.gaussian(8, 20));
  const IdentityCheck c = verify_identity(p.betas, p.ts, p.tt, p.grads);
  EXPECT_GT(c.max_gradient, 0.0);
  EXPECT_LT(c.relative(), 1e-10);
}

TEST(Beta, IdentityHoldsWithoutBiases) {
  Rng rng(10);
  Network s = init_network(NetworkSpec::make({6, 9, 8, 4}, BnMode::none, false), rng);
  Network t = init_network(NetworkSpec::make({6, 5, 3, 4}, BnMode::none, false), rng);
  Pass p = run(s, t, rng.gaussian(16, 6));
  for (const BetaLayer& l : p.betas.layers) EXPECT_EQ(l.bias.norm(), 0.0);
  EXPECT_LT(verify_identity(p.betas, p.ts, p.tt, p.grads).relative(), 1e-10);
}

TEST(Beta, CloneGivesZeroGradients) {
  Network t = biased_net({5, 7, 3}, 11);
  Rng rng(12);
  Pass p = run(t, t, rng.gaussian(6, 5));
  const IdentityCheck c = verify_identity(p.betas, p.ts, p.tt, p.grads);
  EXPECT_EQ(c.max_gradient, 0.0);
  EXPECT_LT(c.max_residual, 1e-12);
}

TEST(Beta, CorruptedEntryIsDetected) {
  Network s = biased_net({6, 8, 7, 3}, 13), t = biased_net({6, 4, 5, 3}, 14);
  Rng rng(15);
  Pass p = run(s, t, rng.gaussian(4, 6));
  BetaLayer& layer = p.betas.layers[0];
  bool done = false;
  for (Index j = 0; j < 8 && !done; ++j)
    for (Index jp = 0; jp < 8 && !done; ++jp)
      if (p.ts.layers[0].gate(0, j) == 1.0 && p.ts.layers[0].act(0, jp) > 0.1) {
        layer.beta[0](j, jp) += 1e-3;
        done = true;
      }
  ASSERT_TRUE(done);
  EXPECT_GT(verify_identity(p.betas, p.ts, p.tt, p.grads).max_residual, 1e-6);
}

TEST(Beta, RejectsMismatchedDepthAndBn) {
  Network s = biased_net({4, 5, 3}, 16), t = biased_net({4, 3}, 17);
  Rng rng(18);
  Matrix x = rng.gaussian(4, 4);
  EXPECT_THROW(compute_beta(s, t, forward(s, x), forward(t, x)), ConfigError);
  Network bn = init_network(NetworkSpec::make({4, 5, 3}, BnMode::linear_bn_relu), rng);
  EXPECT_THROW(compute_beta(bn, s, forward(bn, x), forward(s, x)), ConfigError);
}

TEST(Moments, ZeroBiasGateProbabilityIsHalf) {
  Rng rng(19);
  Network s = init_network(NetworkSpec::make({8, 6, 2}, BnMode::none, false), rng);
  Network t = init_network(NetworkSpec::make({8, 3, 2}, BnMode::none, false), rng);
  GausStream stream({8, 1.0, StreamMode::infinite, 0, 20});
  std::vector<MomentSet> m = estimate_moments(s, t, stream, 20000);
  for (Index j = 0; j < 6; ++j) EXPECT_LT(std::abs(m[0].D(j, j) - 0.5), 3.0 * m[0].D_se(j, j));
  EXPECT_EQ(m[0].D, m[0].D.transpose());
  EXPECT_EQ(m[0].L, m[0].L.transpose());
  EXPECT_EQ(m[1].beta_bar, Matrix::Identity(2, 2));
  EXPECT_EQ(m[1].beta_bar_star, Matrix::Identity(2, 2));
}

TEST(Moments, CloneMatchesTeacherMoments) {
  Network t = biased_net({5, 4, 3}, 21);
  GausStream stream({5, 1.0, StreamMode::infinite, 0, 22});
  std::vector<MomentSet> m = estimate_moments(t, t, stream, 2000);
  EXPECT_LT((m[1].L - m[1].L_star).norm(), 1e-12);
  EXPECT_LT((m[1].L - m[1].L_star2).norm(), 1e-12);
  EXPECT_LT((m[0].D - m[0].D_star).norm(), 1e-12);
}

TEST(Moments, FactorizedDriftMatchesExactGradientForOneHiddenLayerAtTop) {
  // At the top layer beta is the identity, so the factorized and exact
  // weight gradients coincide up to the bias contribution, which is zero here.
  Rng rng(23);
  Network s = init_network(NetworkSpec::make({6, 5, 3}, BnMode::none, false), rng);
  Network t = init_network(NetworkSpec::make({6, 4, 3}, BnMode::none, false), rng);
  GausStream stream({6, 1.0, StreamMode::infinite, 0, 24});
  std::vector<MomentSet> m = estimate_moments(s, t, stream, 4000);
  GausStream again({6, 1.0, StreamMode::infinite, 0, 24});
  Matrix exact = Matrix::Zero(5, 3);
  for (int i = 0; i < 4000 / 256 + 1; ++i) {
    const Index chunk = std::min<Index>(256, 4000 - i * 256);
    if (chunk <= 0) break;
    Matrix x = again.next_batch(chunk);
    ForwardTrace ts = forward(s, x);
    exact += backward(s, ts, forward(t, x).output()).layers[1].w * static_cast<double>(chunk);
  }
  exact /= 4000.0;
  EXPECT_LT((m[1].weight_drift(s.layers[1].w, t.layers[1].w) - exact).norm(), 1e-10 * exact.norm());
}

TEST(Separation, ConstantBetaReportedAsIs) {
  Network s = biased_net({5, 6, 3}, 25), t = biased_net({5, 4, 3}, 26);
  GausStream stream({5, 1.0, StreamMode::infinite, 0, 27});
  const double r = separation_residual(s, t, stream, 4000, 20, 0);
  EXPECT_TRUE(std::isfinite(r));
  EXPECT_GE(r, 0.0);
}

TEST(Separation, IndependentFactorsFactorize) {
  // Gates depend on input 0 only; the probed lower activations are inputs 1, 2.
  Rng rng(28);
  Network s = init_network(NetworkSpec::make({3, 2, 1}, BnMode::none, false), rng);
  s.layers[0].w << 1, -1, 0, 0, 0, 0;
  Network t = s;
  GausStream stream({3, 1.0, StreamMode::infinite, 0, 29});
  const std::vector<SeparationProbe> probes{{0, 0, 1, 1}, {1, 1, 2, 2}, {0, 1, 1, 2}};
  SeparationReport r = separation_residual_at(s, t, stream, 200000, 0, probes);
  EXPECT_LT(r.worst_rel_err, 0.02);
}

TEST(Separation, WorstErrorGrowsWithProbeCount) {
  Network s = biased_net({5, 6, 4, 3}, 30), t = biased_net({5, 4, 3, 3}, 31);
  double prev = 0.0;
  for (Index probes : {2, 8, 32}) {
    GausStream stream({5, 1.0, StreamMode::infinite, 0, 32});
    const double r = separation_residual(s, t, stream, 2000, probes, 0, 7);
    EXPECT_GE(r, prev);
    prev = r;
  }
}

TEST(Psi, SelfAndOppositeOverlap) {
  Vector w = Vector::LinSpaced(10, -1.0, 2.0);
  GausStream stream({10, 1.0, StreamMode::infinite, 0, 33});
  Estimate self = psi_d(w, w, stream, 100000);
  EXPECT_LT(std::abs(self.value - 0.5), 3.0 * self.std_error);
  Estimate opp = psi_d(w, -w, stream, 100000);
  EXPECT_EQ(opp.value, 0.0);
}

TEST(Psi, MatchesPlanarOracle) {
  GausStream stream({12, 1.0, StreamMode::infinite, 0, 34});
  Rng rng(35);
  for (double theta : {M_PI / 6.0, M_PI / 2.0}) {
    Vector a = rng.gaussian(12, 1).normalized();
    Vector u = rng.gaussian(12, 1);
    u = (u - a * a.dot(u)).normalized();
    Vector b = std::cos(theta) * a + std::sin(theta) * u;
    Estimate est = psi_d(a, 2.0 * b, stream, 200000);
    oracle::McValue ref = oracle::psi_d_planar(theta, 200000, 36);
    EXPECT_LT(std::abs(est.value - ref.value),
              3.0 * std::hypot(est.std_error, ref.std_error));
    EXPECT_NEAR(ref.value, (M_PI - theta) / (2.0 * M_PI), 4.0 * ref.std_error);
  }
}

TEST(Psi, RectifiedCorrelationSelfValue) {
  // E[relu(z)^2] = |w|^2 / 2 for Gaussian input.
  Vector w = Vector::Constant(4, 0.5);
  GausStream stream({4, 1.0, StreamMode::infinite, 0, 37});
  Estimate e = psi_l(w, w, stream, 100000);
  EXPECT_LT(std::abs(e.value - 0.5), 4.0 * e.std_error);
}

TEST(Psi, StandardErrorShrinksAsRootN) {
  Vector a = Vector::Unit(6, 0), b = Vector::Unit(6, 1);
  GausStream s1({6, 1.0, StreamMode::infinite, 0, 38});
  const double e1 = psi_d(a, b, s1, 20000).std_error;
  const double e4 = psi_d(a, b, s1, 80000).std_error;
  EXPECT_NEAR(e1 / e4, 2.0, 0.4);
}

TEST(Psi, RejectsZeroVectors) {
  GausStream stream({3, 1.0, StreamMode::infinite, 0, 39});
  EXPECT_THROW(psi_d(Vector::Zero(3), Vector::Ones(3), stream, 10), PreconditionError);
}

TEST(Overlap, OppositeAndIdenticalNodes) {
  Matrix w(4, 2);
  w.col(0) << 1, 2, -1, 0.5;
  w.col(1) = -w.col(0);
  GausStream stream({4, 1.0, StreamMode::infinite, 0, 40});
  EXPECT_EQ(overlap_eps_columns(w, stream, 50000).eps_d, 0.0);
  w.col(1) = w.col(0);
  EXPECT_NEAR(overlap_eps_columns(w, stream, 50000).eps_d, 1.0, 1e-12);
}

TEST(Overlap, DeadTeacherNode) {
  Network t;
  t.spec = NetworkSpec::make({3, 2, 1});
  t.layers = {Layer{Matrix::Ones(3, 2), Vector(2), {}, {}}, Layer{Matrix::Ones(2, 1), Vector::Zero(1), {}, {}}};
  t.layers[0].b << 0.0, -1e6;
  GausStream stream({3, 1.0, StreamMode::infinite, 0, 41});
  auto r = overlap_eps(t, stream, 1000);
  ASSERT_TRUE(r[0].dead_node.has_value());
  EXPECT_EQ(*r[0].dead_node, 1);
  EXPECT_TRUE(std::isinf(r[0].eps_d));
}

TEST(Overlap, GridTeacherReportsFiniteValues) {
  TeacherSpec ts;
  ts.widths = {20, 10, 5};
  GausStream stream({20, 10.0, StreamMode::infinite, 0, 42});
  auto r = overlap_eps(make_teacher(ts), stream, 20000);
  ASSERT_EQ(r.size(), 1u);
  EXPECT_TRUE(std::isfinite(r[0].eps_d));
  EXPECT_GE(r[0].eps_l, 0.0);
}

TEST(Lipschitz, EqualPointsGiveZeroRatio) {
  Vector w = Vector::Unit(5, 0), w1 = Vector::Unit(5, 1);
  GausStream stream({5, 1.0, StreamMode::infinite, 0, 43});
  LipschitzPair p = lipschitz_pair(w, w1, w1, stream, 10000);
  EXPECT_EQ(p.ratio_d, 0.0);
  EXPECT_EQ(p.ratio_l, 0.0);
}

TEST(Lipschitz, StableAcrossStreamSeeds) {
  Vector w = Vector::Unit(8, 0);
  std::vector<double> ks;
  for (std::uint64_t seed : {44, 45, 46}) {
    GausStream stream({8, 1.0, StreamMode::infinite, 0, seed});
    ks.push_back(lipschitz_probe(w, stream, 100000, 6, {0.05}, 1).k_d);
  }
  const auto [lo, hi] = std::minmax_element(ks.begin(), ks.end());
  EXPECT_GT(*lo, 0.0);
  EXPECT_LT(*hi / *lo, 1.2);
}

TEST(Lipschitz, RejectsLargeDeltas) {
  GausStream stream({3, 1.0, StreamMode::infinite, 0, 47});
  EXPECT_THROW(lipschitz_probe(Vector::Ones(3), stream, 100, 1, {0.5}), PreconditionError);
}
