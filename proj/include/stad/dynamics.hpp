// Copyright 2026 The StAD Lab Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <memory>
#include <string>

#include "stad/common.hpp"
#include "stad/net.hpp"
#include "stad/targets.hpp"

namespace stad::dyn {

enum class Family { kVP, kSubVP, kVE, kFlowLinear, kTrigFlow };

const char* to_string(Family f);
Family family_from_string(const std::string& s);

struct ScheduleSpec {
  Family family = Family::kVP;
  double eps = 1e-3;
  double T = 1.0;
  double beta_min = 0.1;
  double beta_max = 20.0;
  double sigma_min = 0.01;
  double sigma_max = 50.0;
  double sigma_d = 1.0;

  /// {family, eps, T, beta_min, beta_max, sigma_min, sigma_max, sigma_d}
  std::string to_json() const;
  static ScheduleSpec from_json(const std::string& text);
  /// Same defaults with T set to pi/2 for trigflow.
  static ScheduleSpec defaults(Family f);
};

/// Transition p(x_t | x_0) = N(mean_scale(t) x_0, noise_std(t)^2 I).
///
/// For diffusion families mean_scale/noise_std are nu/eta; for flow families
/// they are alpha/sigma. The PF-ODE for a marginal with score s is
///   v = drift_coef(t) x - 0.5 g2(t) s,
/// with drift_coef = d log(nu)/dt and g2 = 2 (eta eta' - drift_coef eta^2),
/// which reduces to the usual f and g^2 for VP, sub-VP and VE.
class Schedule {
 public:
  Schedule() : Schedule(ScheduleSpec{}) {}
  explicit Schedule(ScheduleSpec spec);

  const ScheduleSpec& spec() const { return spec_; }
  Family family() const { return spec_.family; }
  bool is_flow() const;
  double t0() const { return spec_.eps; }
  double t1() const { return spec_.T; }

  /// Throws TimeRange outside [eps, T] (with a small tolerance).
  void check_time(double t) const;

  double beta(double t) const;
  double mean_scale(double t) const;
  double noise_std(double t) const;
  double mean_scale_dot(double t) const;
  double noise_std_dot(double t) const;
  double drift_coef(double t) const;
  double g2(double t) const;

  /// x_t = mean_scale x_0 + noise_std z.
  Matrix marginal_sample(const Matrix& x0, double t, const Matrix& z) const;

  /// Variance of the default terminal Gaussian for unit-variance data
  /// (sigma_d^2 for trigflow data).
  double prior_variance() const;

 private:
  ScheduleSpec spec_;
};

/// s = -(x + alpha v) / (sigma (alpha + sigma)) on the linear flow path.
Vector score_from_velocity(const Schedule& sched, const Vector& v, const Vector& x, double t);
/// s = -(x + cot(t) v) / sigma_d^2 on the trigonometric path.
Vector score_from_velocity_trig(const Schedule& sched, const Vector& v, const Vector& x, double t);

/// Linear maps s = a x + c v for the score in terms of a velocity, any family.
struct VelocityToScore {
  double a, c;
};
VelocityToScore velocity_to_score(const Schedule& sched, double t);

/// The PF-ODE vector field v_t(x; c) and the matching score.
class VelocityField {
 public:
  explicit VelocityField(Schedule sched) : sched_(std::move(sched)) {}
  virtual ~VelocityField() = default;

  const Schedule& schedule() const { return sched_; }
  virtual Index dim() const = 0;
  virtual int context_dim() const { return 0; }

  /// Drift per column; `t` holds one time per column.
  virtual Matrix drift(const Matrix& x, const Vector& t, const Matrix* c) const = 0;
  /// Score per column.
  virtual Matrix score(const Matrix& x, const Vector& t, const Matrix* c) const = 0;
  /// Drift and score in one evaluation (one network pass for net-backed fields).
  virtual void drift_and_score(const Matrix& x, const Vector& t, const Matrix* c, Matrix& v,
                               Matrix& s) const;
  /// J(x) U for a single point.
  virtual Matrix jvp_block(const Vector& x, double t, const Vector* c, const Matrix& u) const = 0;
  virtual Matrix jacobian(const Vector& x, double t, const Vector* c) const;

  Vector drift1(const Vector& x, double t, const Vector* c) const;

 protected:
  void check_times(const Vector& t) const;

  Schedule sched_;
};

/// 1 / (nu^2 + eta^2): the score of the unit-variance Gaussian marginal is
/// -score_skip(t) x.
double score_skip(const Schedule& sched, double t);

/// Diffusion teacher with a unit-variance Gaussian skip:
/// s = -k x - sqrt(k) net, k = score_skip(t). The net output is on the
/// scale of the marginal's inverse standard deviation at every t.
class ScoreNetField final : public VelocityField {
 public:
  ScoreNetField(Schedule sched, std::shared_ptr<const net::FieldNet> net);
  Index dim() const override { return net_->spec().input_dim; }
  int context_dim() const override { return net_->spec().context_dim; }
  Matrix drift(const Matrix& x, const Vector& t, const Matrix* c) const override;
  Matrix score(const Matrix& x, const Vector& t, const Matrix* c) const override;
  void drift_and_score(const Matrix& x, const Vector& t, const Matrix* c, Matrix& v,
                       Matrix& s) const override;
  Matrix jvp_block(const Vector& x, double t, const Vector* c, const Matrix& u) const override;
  const net::FieldNet& net() const { return *net_; }

 private:
  std::shared_ptr<const net::FieldNet> net_;
};

/// Flow-matching teacher: v = net(x, t, c); score from the velocity identity.
class VelocityNetField final : public VelocityField {
 public:
  VelocityNetField(Schedule sched, std::shared_ptr<const net::FieldNet> net);
  Index dim() const override { return net_->spec().input_dim; }
  int context_dim() const override { return net_->spec().context_dim; }
  Matrix drift(const Matrix& x, const Vector& t, const Matrix* c) const override;
  Matrix score(const Matrix& x, const Vector& t, const Matrix* c) const override;
  void drift_and_score(const Matrix& x, const Vector& t, const Matrix* c, Matrix& v,
                       Matrix& s) const override;
  Matrix jvp_block(const Vector& x, double t, const Vector* c, const Matrix& u) const override;
  const net::FieldNet& net() const { return *net_; }

 private:
  std::shared_ptr<const net::FieldNet> net_;
};

/// Exact marginal field of a (conditional) Gaussian mixture pushed through
/// the schedule: component k has marginal N(a m_k(c), a^2 S_k + b^2 I) with
/// (a, b) = (mean_scale, noise_std).
class AnalyticMixtureField final : public VelocityField {
 public:
  AnalyticMixtureField(Schedule sched, targets::GaussianMixture data);
  Index dim() const override { return data_.dim(); }
  int context_dim() const override { return data_.context_dim(); }
  Matrix drift(const Matrix& x, const Vector& t, const Matrix* c) const override;
  Matrix score(const Matrix& x, const Vector& t, const Matrix* c) const override;
  void drift_and_score(const Matrix& x, const Vector& t, const Matrix* c, Matrix& v,
                       Matrix& s) const override;
  Matrix jvp_block(const Vector& x, double t, const Vector* c, const Matrix& u) const override;
  Matrix jacobian(const Vector& x, double t, const Vector* c) const override;

  double log_marginal(const Vector& x, double t, const Vector* c) const;
  const targets::GaussianMixture& data() const { return data_; }

 private:
  struct Eval {
    Vector v, s;
    Matrix jac;
    double log_p = 0.0;
  };
  Eval evaluate(const Vector& x, double t, const Vector* c, bool need_jac) const;

  targets::GaussianMixture data_;
};

std::unique_ptr<AnalyticMixtureField> analytic_gaussian_field(const Vector& mean, const Matrix& cov,
                                                              const Schedule& sched);

/// v(x) = A x + b, with the score of N(0, I); for tests and constant-divergence oracles.
class LinearField final : public VelocityField {
 public:
  LinearField(Schedule sched, Matrix a, Vector b = {});
  Index dim() const override { return a_.rows(); }
  Matrix drift(const Matrix& x, const Vector& t, const Matrix* c) const override;
  Matrix score(const Matrix& x, const Vector& t, const Matrix* c) const override;
  Matrix jvp_block(const Vector& x, double t, const Vector* c, const Matrix& u) const override;
  const Matrix& matrix() const { return a_; }

 private:
  Matrix a_;
  Vector b_;
};

/// Boundary-flux probe R^(D-1) p_t(R u) |v_t(R u)| along a unit ray u, for a
/// list of radii. Returns log10 of the flux per radius (-inf when it
/// underflows).
Vector boundary_flux_log10(const AnalyticMixtureField& field, const Vector& direction, double t,
                           const Vector& radii, const Vector* c = nullptr);

}  // namespace stad::dyn
