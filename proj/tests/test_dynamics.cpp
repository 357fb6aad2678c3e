// Copyright 2026 The StAD Lab Authors
// SPDX-License-Identifier: Apache-2.0

#include <gtest/gtest.h>

#include <cmath>
#include <numbers>

#include "stad/dynamics.hpp"

using namespace stad;
using namespace stad::dyn;

namespace {

Vector v2(double a, double b) {
  Vector v(2);
  v << a, b;
  return v;
}

Schedule sched_of(Family f) { return Schedule(ScheduleSpec::defaults(f)); }

const Family kAll[] = {Family::kVP, Family::kSubVP, Family::kVE, Family::kFlowLinear,
                       Family::kTrigFlow};

// Time grid strictly inside (eps, T) so central differences stay in range.
std::vector<double> inner_grid(const Schedule& s, int n) {
  std::vector<double> ts;
  for (int i = 1; i <= n; ++i) ts.push_back(s.t0() + (s.t1() - s.t0()) * i / (n + 1.0));
  return ts;
}

}  // namespace

TEST(Schedule, VpStartsAtData) {
  Schedule s = sched_of(Family::kVP);
  Matrix x0 = v2(1.5, -0.5);
  Matrix z = v2(0.3, 0.7);
  Matrix xt = s.marginal_sample(x0, s.t0(), z);
  EXPECT_LE((xt - x0).cwiseAbs().maxCoeff(), 0.02);
  EXPECT_NEAR(s.mean_scale(s.t0()), 1.0, 1e-4);
  EXPECT_LE(s.noise_std(s.t0()), 0.011);
}

TEST(Schedule, FlowLinearSubstitution) {
  Schedule s = sched_of(Family::kFlowLinear);
  Matrix xt = s.marginal_sample(v2(2, 0), 0.5, v2(0, 2));
  EXPECT_EQ(xt.col(0), v2(1, 1));
  for (double t : inner_grid(s, 50)) EXPECT_EQ(s.mean_scale(t) + s.noise_std(t), 1.0);
}

TEST(Schedule, VpMomentsPreserveUnitVariance) {
  Schedule s = sched_of(Family::kVP);
  const auto& sp = s.spec();
  for (int i = 0; i <= 200; ++i) {
    const double t = sp.eps + (sp.T - sp.eps) * i / 200.0;
    const double nu = std::exp(-0.25 * t * t * (sp.beta_max - sp.beta_min) - 0.5 * t * sp.beta_min);
    EXPECT_NEAR(s.mean_scale(t), nu, 1e-15);
    EXPECT_NEAR(s.mean_scale(t) * s.mean_scale(t) + s.noise_std(t) * s.noise_std(t), 1.0, 1e-14);
  }
}

TEST(Schedule, TrigflowCoefficients) {
  Schedule s(ScheduleSpec{Family::kTrigFlow, 1e-3, std::numbers::pi / 2, 0.1, 20, 0.01, 50, 0.7});
  for (double t : inner_grid(s, 20)) {
    EXPECT_DOUBLE_EQ(s.mean_scale(t), std::cos(t));
    EXPECT_DOUBLE_EQ(s.noise_std(t), 0.7 * std::sin(t));
  }
}

TEST(Schedule, DerivativesAndDriftIdentities) {
  for (Family f : kAll) {
    Schedule s = sched_of(f);
    for (double t : inner_grid(s, 25)) {
      const double h = 1e-6;
      const double nu_dot = (s.mean_scale(t + h) - s.mean_scale(t - h)) / (2 * h);
      const double eta_dot = (s.noise_std(t + h) - s.noise_std(t - h)) / (2 * h);
      EXPECT_NEAR(s.mean_scale_dot(t), nu_dot, 1e-6 * std::max(1.0, std::abs(nu_dot)))
          << to_string(f) << " t=" << t;
      EXPECT_NEAR(s.noise_std_dot(t), eta_dot, 1e-6 * std::max(1.0, std::abs(eta_dot)))
          << to_string(f) << " t=" << t;
      // f = nu'/nu and g^2 = 2 (eta eta' - f eta^2)
      const double f_gen = s.mean_scale_dot(t) / s.mean_scale(t);
      const double eta = s.noise_std(t);
      const double g2_gen = 2.0 * (eta * s.noise_std_dot(t) - f_gen * eta * eta);
      EXPECT_NEAR(s.drift_coef(t), f_gen, 1e-12 * std::max(1.0, std::abs(f_gen)));
      EXPECT_NEAR(s.g2(t), g2_gen, 1e-9 * std::max(1.0, std::abs(g2_gen)));
    }
  }
}

TEST(Schedule, SubVpClosedForms) {
  Schedule s = sched_of(Family::kSubVP);
  for (double t : inner_grid(s, 20)) {
    const double nu = s.mean_scale(t);
    EXPECT_NEAR(s.noise_std(t), 1.0 - nu * nu, 1e-15);
    EXPECT_NEAR(s.g2(t), s.beta(t) * (1.0 - std::pow(nu, 4)), 1e-12);
  }
}

TEST(Schedule, TimeRangeAndJson) {
  Schedule s = sched_of(Family::kVP);
  try {
    s.marginal_sample(v2(0, 0), 1.5, v2(0, 0));
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), ErrorCode::kTimeRange);
  }
  ScheduleSpec spec = ScheduleSpec::defaults(Family::kVE);
  spec.sigma_max = 12.5;
  ScheduleSpec back = ScheduleSpec::from_json(spec.to_json());
  EXPECT_EQ(back.family, Family::kVE);
  EXPECT_EQ(back.sigma_max, 12.5);
  EXPECT_EQ(back.eps, spec.eps);
  EXPECT_THROW(Schedule(ScheduleSpec{Family::kVP, 1.0, 0.5}), Error);
}

TEST(ScoreIdentity, LinearFlowExamples) {
  Schedule s = sched_of(Family::kFlowLinear);
  Vector sc = score_from_velocity(s, v2(-1, 0), v2(1, 0), 0.5);
  EXPECT_NEAR((sc - v2(-1, 0)).norm(), 0.0, 1e-15);
  const double t = 0.3, alpha = 0.7;
  Vector x = v2(0.4, -1.2);
  EXPECT_LE(score_from_velocity(s, -x / alpha, x, t).norm(), 1e-15);
  try {
    score_from_velocity(Schedule(ScheduleSpec{Family::kFlowLinear, 1e-3, 1.0}), x, x, 0.0);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), ErrorCode::kSingularTime);
  }
}

TEST(ScoreIdentity, TrigExamples) {
  Schedule s = sched_of(Family::kTrigFlow);
  Vector sc = score_from_velocity_trig(s, v2(1, 0), v2(1, 0), std::numbers::pi / 4);
  EXPECT_NEAR((sc - v2(-2, 0)).norm(), 0.0, 1e-15);
  Vector x = v2(0.3, 0.9);
  EXPECT_EQ(score_from_velocity_trig(s, Vector::Zero(2), x, 0.8), -x);
  EXPECT_THROW(score_from_velocity_trig(s, x, x, 0.0), Error);
}

TEST(ScoreIdentity, GaussianBridgeRecoversAnalyticScore) {
  Matrix cov(2, 2);
  cov << 1.3, 0.4, 0.4, 0.6;
  for (Family f : {Family::kFlowLinear, Family::kTrigFlow}) {
    Schedule s = sched_of(f);
    auto field = analytic_gaussian_field(v2(0.5, -0.3), cov, s);
    Rng rng(3);
    for (double t : inner_grid(s, 15)) {
      Vector x = normal_vector(rng, 2);
      Vector v = field->drift1(x, t, nullptr);
      Matrix xm = x;
      Vector tv = Vector::Constant(1, t);
      Vector s_true = field->score(xm, tv, nullptr).col(0);
      Vector s_id = f == Family::kFlowLinear ? score_from_velocity(s, v, x, t)
                                             : score_from_velocity_trig(s, v, x, t);
      EXPECT_LE((s_id - s_true).cwiseAbs().maxCoeff(), 1e-8) << to_string(f) << " t=" << t;
    }
  }
}

TEST(AnalyticField, StandardNormalUnderVpHasZeroDrift) {
  Schedule s = sched_of(Family::kVP);
  auto field = analytic_gaussian_field(Vector::Zero(3), Matrix::Identity(3, 3), s);
  Rng rng(4);
  for (double t : inner_grid(s, 10)) {
    Vector x = 3.0 * normal_vector(rng, 3);
    EXPECT_LE(field->drift1(x, t, nullptr).cwiseAbs().maxCoeff(), 1e-12);
    EXPECT_LE(field->jacobian(x, t, nullptr).cwiseAbs().maxCoeff(), 1e-12);
  }
}

TEST(AnalyticField, GaussianScoreClosedForm) {
  Schedule s = sched_of(Family::kVP);
  Matrix cov = v2(4.0, 1.0).asDiagonal();
  auto field = analytic_gaussian_field(Vector::Zero(2), cov, s);
  Rng rng(5);
  for (double t : inner_grid(s, 10)) {
    Vector x = normal_vector(rng, 2);
    const double nu = s.mean_scale(t), eta = s.noise_std(t);
    Matrix c = nu * nu * cov + eta * eta * Matrix::Identity(2, 2);
    Vector expected = -c.inverse() * x;
    Matrix xm = x;
    Vector tv = Vector::Constant(1, t);
    EXPECT_LE((field->score(xm, tv, nullptr).col(0) - expected).cwiseAbs().maxCoeff(), 1e-12);
    // Finite differences of the analytic log marginal.
    const double h = 1e-5;
    for (int i = 0; i < 2; ++i) {
      Vector xp = x, xmn = x;
      xp(i) += h;
      xmn(i) -= h;
      const double fd =
          (field->log_marginal(xp, t, nullptr) - field->log_marginal(xmn, t, nullptr)) / (2 * h);
      EXPECT_NEAR(fd, expected(i), 1e-7);
    }
  }
}

TEST(AnalyticField, VeOneDimensionalConvolution) {
  Schedule s = sched_of(Family::kVE);
  auto field = analytic_gaussian_field(Vector::Zero(1), Matrix::Identity(1, 1), s);
  for (double t : inner_grid(s, 10)) {
    const double eta = s.noise_std(t);
    Matrix x = Matrix::Constant(1, 1, 0.8);
    Vector tv = Vector::Constant(1, t);
    EXPECT_NEAR(field->score(x, tv, nullptr)(0, 0), -0.8 / (1 + eta * eta), 1e-14);
    // f = 0, so v = -g^2 s / 2.
    EXPECT_NEAR(field->drift(x, tv, nullptr)(0, 0),
                -0.5 * s.g2(t) * field->score(x, tv, nullptr)(0, 0),
                1e-10 * std::max(1.0, s.g2(t)));
  }
  try {
    Matrix bad(2, 2);
    bad << 1, 2, 2, 1;
    analytic_gaussian_field(Vector::Zero(2), bad, s);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), ErrorCode::kInvalidCovariance);
  }
}

// d/dt log p_t(x) = -div v - <v, s> at fixed x, for every family, on a
// conditional mixture. Checks drift, score and Jacobian together.
TEST(AnalyticField, ContinuityEquationHolds) {
  targets::CosmosLikeConfig cfg;
  cfg.dim = 3;
  cfg.context_dim = 2;
  cfg.components = 3;
  auto data = targets::make_cosmos_like(7, cfg);
  for (Family f : kAll) {
    Schedule s = sched_of(f);
    AnalyticMixtureField field(s, data);
    Rng rng(8);
    for (double t : inner_grid(s, 12)) {
      Vector x = normal_vector(rng, 3), c = normal_vector(rng, 2);
      const double h = 1e-6 * std::max(1.0, t);
      const double dlogp =
          (field.log_marginal(x, t + h, &c) - field.log_marginal(x, t - h, &c)) / (2 * h);
      Matrix xm = x, cm = c;
      Vector tv = Vector::Constant(1, t);
      Matrix v, sc;
      field.drift_and_score(xm, tv, &cm, v, sc);
      const double rhs = -field.jacobian(x, t, &c).trace() - v.col(0).dot(sc.col(0));
      EXPECT_NEAR(dlogp, rhs, 1e-5 * std::max(1.0, std::abs(rhs))) << to_string(f) << " t=" << t;
    }
  }
}

TEST(AnalyticField, JacobianMatchesFiniteDifferences) {
  auto data = targets::make_mixture2d();
  for (Family f : kAll) {
    Schedule s = sched_of(f);
    AnalyticMixtureField field(s, data);
    Rng rng(9);
    for (double t : inner_grid(s, 6)) {
      Vector x = normal_vector(rng, 2);
      Matrix j = field.jacobian(x, t, nullptr);
      Matrix fd(2, 2);
      const double h = 1e-6;
      for (int i = 0; i < 2; ++i) {
        Vector xp = x, xm = x;
        xp(i) += h;
        xm(i) -= h;
        fd.col(i) = (field.drift1(xp, t, nullptr) - field.drift1(xm, t, nullptr)) / (2 * h);
      }
      EXPECT_LE((j - fd).cwiseAbs().maxCoeff(), 1e-5 * std::max(1.0, fd.cwiseAbs().maxCoeff()))
          << to_string(f) << " t=" << t;
      // Diffusion PF-ODE form v = f x - g^2 s / 2.
      if (!s.is_flow()) {
        Matrix xm = x;
        Vector tv = Vector::Constant(1, t);
        Vector sc = field.score(xm, tv, nullptr).col(0);
        Vector expect = s.drift_coef(t) * x - 0.5 * s.g2(t) * sc;
        EXPECT_LE((field.drift1(x, t, nullptr) - expect).cwiseAbs().maxCoeff(),
                  1e-9 * std::max(1.0, expect.norm()));
      }
    }
  }
}

TEST(AnalyticField, BoundaryFluxDecays) {
  Schedule s = sched_of(Family::kFlowLinear);
  Matrix cov(2, 2);
  cov << 1.0, 0.3, 0.3, 0.5;
  auto field = analytic_gaussian_field(v2(0.2, 0.1), cov, s);
  Rng rng(10);
  for (int ray = 0; ray < 8; ++ray) {
    Vector u = normal_vector(rng, 2);
    for (double t : {0.1, 0.5, 0.9}) {
      // Marginal std at t bounds the 4-sigma shell.
      const double a = s.mean_scale(t), b = s.noise_std(t);
      const double sd = std::sqrt(a * a * 1.2 + b * b);
      Vector radii = Vector::LinSpaced(40, 4.0 * sd + 0.5, 4.0 * sd + 40.0);
      Vector flux = boundary_flux_log10(*field, u, t, radii);
      for (Index i = 1; i < flux.size(); ++i) EXPECT_LT(flux(i), flux(i - 1));
      EXPECT_LT(flux(flux.size() - 1), -12.0);
    }
  }
}

TEST(NetFields, ScoreBackedDriftAndJvp) {
  Schedule s = sched_of(Family::kVP);
  auto n = std::make_shared<net::FieldNet>(
      net::NetSpec{3, 1, {10}, 3, net::Activation::kSilu, net::TimeEmbedding::kLogT});
  Rng rng(11);
  n->init(rng);
  ScoreNetField field(s, n);
  Vector x = normal_vector(rng, 3), c = normal_vector(rng, 1);
  const double t = 0.37;
  Matrix xm = x, cm = c;
  Vector tv = Vector::Constant(1, t);
  Matrix eps_hat = n->forward({xm, tv, &cm});
  Matrix v, sc;
  field.drift_and_score(xm, tv, &cm, v, sc);
  const double skip = 1.0 / (s.mean_scale(t) * s.mean_scale(t) + s.noise_std(t) * s.noise_std(t));
  EXPECT_LE((sc + skip * xm + std::sqrt(skip) * eps_hat).cwiseAbs().maxCoeff(), 1e-14);
  EXPECT_LE((v.col(0) - (s.drift_coef(t) * x - 0.5 * s.g2(t) * sc.col(0))).cwiseAbs().maxCoeff(),
            1e-12);
  Matrix j = field.jacobian(x, t, &c);
  Matrix fd(3, 3);
  for (int i = 0; i < 3; ++i) {
    Vector xp = x, xn = x;
    xp(i) += 1e-6;
    xn(i) -= 1e-6;
    fd.col(i) = (field.drift1(xp, t, &c) - field.drift1(xn, t, &c)) / 2e-6;
  }
  EXPECT_LE((j - fd).cwiseAbs().maxCoeff(), 1e-5 * std::max(1.0, fd.cwiseAbs().maxCoeff()));
  EXPECT_THROW(ScoreNetField(sched_of(Family::kFlowLinear), n), Error);
}

TEST(NetFields, VelocityBackedScoreUsesIdentity) {
  for (Family f : {Family::kFlowLinear, Family::kTrigFlow}) {
    Schedule s = sched_of(f);
    auto n = std::make_shared<net::FieldNet>(
        net::NetSpec{2, 0, {8}, 2, net::Activation::kTanh, net::TimeEmbedding::kRawT});
    Rng rng(12);
    n->init(rng);
    VelocityNetField field(s, n);
    Vector x = normal_vector(rng, 2);
    const double t = 0.6;
    Matrix xm = x;
    Vector tv = Vector::Constant(1, t);
    Matrix v, sc;
    field.drift_and_score(xm, tv, nullptr, v, sc);
    Vector expect = f == Family::kFlowLinear ? score_from_velocity(s, v.col(0), x, t)
                                             : score_from_velocity_trig(s, v.col(0), x, t);
    EXPECT_LE((sc.col(0) - expect).cwiseAbs().maxCoeff(), 1e-13);
  }
  // Zero net gives zero drift.
  auto z = std::make_shared<net::FieldNet>(
      net::NetSpec{2, 0, {4}, 2, net::Activation::kTanh, net::TimeEmbedding::kRawT});
  VelocityNetField zf(sched_of(Family::kFlowLinear), z);
  EXPECT_EQ(zf.drift1(v2(1, 2), 0.4, nullptr).cwiseAbs().maxCoeff(), 0.0);
}
