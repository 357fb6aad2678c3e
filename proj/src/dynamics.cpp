// Copyright 2026 The StAD Lab Authors
// SPDX-License-Identifier: Apache-2.0

#include "stad/dynamics.hpp"

#include <cmath>
#include <numbers>

#include <json.hpp>

namespace stad::dyn {

using json = nlohmann::json;

const char* to_string(Family f) {
  switch (f) {
    case Family::kVP: return "vp";
    case Family::kSubVP: return "subvp";
    case Family::kVE: return "ve";
    case Family::kFlowLinear: return "flow_linear";
    case Family::kTrigFlow: return "trigflow";
  }
  return "vp";
}

Family family_from_string(const std::string& s) {
  if (s == "vp") return Family::kVP;
  if (s == "subvp" || s == "sub_vp") return Family::kSubVP;
  if (s == "ve") return Family::kVE;
  if (s == "flow_linear" || s == "flow") return Family::kFlowLinear;
  if (s == "trigflow") return Family::kTrigFlow;
  fail(ErrorCode::kConfigError, "unknown schedule family '" + s + "'");
}

std::string ScheduleSpec::to_json() const {
  json j = {{"family", to_string(family)}, {"eps", eps},
            {"T", T},                      {"beta_min", beta_min},
            {"beta_max", beta_max},        {"sigma_min", sigma_min},
            {"sigma_max", sigma_max},      {"sigma_d", sigma_d}};
  return j.dump();
}

ScheduleSpec ScheduleSpec::defaults(Family f) {
  ScheduleSpec s;
  s.family = f;
  if (f == Family::kTrigFlow) s.T = std::numbers::pi / 2;
  return s;
}

ScheduleSpec ScheduleSpec::from_json(const std::string& text) {
  json j = json::parse(text);
  ScheduleSpec s = defaults(family_from_string(j.value("family", std::string("vp"))));
  s.eps = j.value("eps", s.eps);
  s.T = j.value("T", s.T);
  s.beta_min = j.value("beta_min", s.beta_min);
  s.beta_max = j.value("beta_max", s.beta_max);
  s.sigma_min = j.value("sigma_min", s.sigma_min);
  s.sigma_max = j.value("sigma_max", s.sigma_max);
  s.sigma_d = j.value("sigma_d", s.sigma_d);
  return s;
}

Schedule::Schedule(ScheduleSpec spec) : spec_(spec) {
  if (!(spec_.eps > 0.0) || !(spec_.eps < spec_.T))
    fail(ErrorCode::kConfigError, "schedule needs 0 < eps < T");
  if (spec_.family == Family::kFlowLinear && spec_.T > 1.0)
    fail(ErrorCode::kConfigError, "linear flow lives on t <= 1");
  if (spec_.family == Family::kTrigFlow && spec_.T > std::numbers::pi / 2 + 1e-12)
    fail(ErrorCode::kConfigError, "trigflow lives on t <= pi/2");
  if (spec_.family == Family::kVE && !(spec_.sigma_max > spec_.sigma_min && spec_.sigma_min > 0.0))
    fail(ErrorCode::kConfigError, "VE needs 0 < sigma_min < sigma_max");
  if (spec_.family == Family::kTrigFlow && !(spec_.sigma_d > 0.0))
    fail(ErrorCode::kConfigError, "trigflow needs sigma_d > 0");
}

bool Schedule::is_flow() const {
  return spec_.family == Family::kFlowLinear || spec_.family == Family::kTrigFlow;
}

void Schedule::check_time(double t) const {
  const double tol = 1e-12 * std::max(1.0, spec_.T);
  if (!(t >= spec_.eps - tol && t <= spec_.T + tol))
    fail(ErrorCode::kTimeRange, "t=" + std::to_string(t) + " outside [" +
                                    std::to_string(spec_.eps) + ", " + std::to_string(spec_.T) +
                                    "]");
}

namespace {
// log nu(t) for the VP/sub-VP integrated linear beta.
double vp_log_nu(const ScheduleSpec& s, double t) {
  return -0.25 * t * t * (s.beta_max - s.beta_min) - 0.5 * t * s.beta_min;
}
}  // namespace

double Schedule::beta(double t) const {
  switch (spec_.family) {
    case Family::kVP:
    case Family::kSubVP:
      return spec_.beta_min + t * (spec_.beta_max - spec_.beta_min);
    default:
      return 0.0;
  }
}

double Schedule::mean_scale(double t) const {
  switch (spec_.family) {
    case Family::kVP:
    case Family::kSubVP: return std::exp(vp_log_nu(spec_, t));
    case Family::kVE: return 1.0;
    case Family::kFlowLinear: return 1.0 - t;
    case Family::kTrigFlow: return std::cos(t);
  }
  return 1.0;
}

double Schedule::noise_std(double t) const {
  switch (spec_.family) {
    case Family::kVP: return std::sqrt(-std::expm1(2.0 * vp_log_nu(spec_, t)));
    case Family::kSubVP: return -std::expm1(2.0 * vp_log_nu(spec_, t));
    case Family::kVE: {
      const double s = spec_.sigma_min * std::pow(spec_.sigma_max / spec_.sigma_min, t);
      return std::sqrt(s * s - spec_.sigma_min * spec_.sigma_min);
    }
    case Family::kFlowLinear: return t;
    case Family::kTrigFlow: return spec_.sigma_d * std::sin(t);
  }
  return 0.0;
}

double Schedule::mean_scale_dot(double t) const {
  switch (spec_.family) {
    case Family::kVP:
    case Family::kSubVP: return -0.5 * beta(t) * mean_scale(t);
    case Family::kVE: return 0.0;
    case Family::kFlowLinear: return -1.0;
    case Family::kTrigFlow: return -std::sin(t);
  }
  return 0.0;
}

double Schedule::noise_std_dot(double t) const {
  switch (spec_.family) {
    case Family::kVP: {
      const double nu = mean_scale(t);
      return 0.5 * beta(t) * nu * nu / noise_std(t);
    }
    case Family::kSubVP: {
      const double nu = mean_scale(t);
      return beta(t) * nu * nu;
    }
    case Family::kVE: {
      const double s = spec_.sigma_min * std::pow(spec_.sigma_max / spec_.sigma_min, t);
      return s * s * std::log(spec_.sigma_max / spec_.sigma_min) / noise_std(t);
    }
    case Family::kFlowLinear: return 1.0;
    case Family::kTrigFlow: return spec_.sigma_d * std::cos(t);
  }
  return 0.0;
}

double Schedule::drift_coef(double t) const {
  switch (spec_.family) {
    case Family::kVP:
    case Family::kSubVP: return -0.5 * beta(t);
    case Family::kVE: return 0.0;
    default: return mean_scale_dot(t) / mean_scale(t);
  }
}

double Schedule::g2(double t) const {
  switch (spec_.family) {
    case Family::kVP: return beta(t);
    case Family::kSubVP: {
      const double nu2 = mean_scale(t) * mean_scale(t);
      return beta(t) * (1.0 - nu2 * nu2);
    }
    case Family::kVE: {
      const double s = spec_.sigma_min * std::pow(spec_.sigma_max / spec_.sigma_min, t);
      return 2.0 * s * s * std::log(spec_.sigma_max / spec_.sigma_min);
    }
    default: {
      const double eta = noise_std(t);
      return 2.0 * (eta * noise_std_dot(t) - drift_coef(t) * eta * eta);
    }
  }
}

Matrix Schedule::marginal_sample(const Matrix& x0, double t, const Matrix& z) const {
  check_time(t);
  if (x0.rows() != z.rows() || x0.cols() != z.cols())
    fail(ErrorCode::kDimensionMismatch, "noise shape");
  return mean_scale(t) * x0 + noise_std(t) * z;
}

double Schedule::prior_variance() const {
  const double a = mean_scale(spec_.T), b = noise_std(spec_.T);
  const double data_var = spec_.family == Family::kTrigFlow ? spec_.sigma_d * spec_.sigma_d : 1.0;
  return a * a * data_var + b * b;
}

VelocityToScore velocity_to_score(const Schedule& sched, double t) {
  // v = (a'/a) x + (a' b^2 / a - b b') s  =>  s = (a' x - a v) / (b (a b' - a' b)).
  const double a = sched.mean_scale(t), ad = sched.mean_scale_dot(t);
  const double b = sched.noise_std(t), bd = sched.noise_std_dot(t);
  const double den = b * (a * bd - ad * b);
  if (b == 0.0 || den == 0.0 || !std::isfinite(den))
    fail(ErrorCode::kSingularTime, "score undefined at t=" + std::to_string(t));
  return {ad / den, -a / den};
}

Vector score_from_velocity(const Schedule& sched, const Vector& v, const Vector& x, double t) {
  if (sched.family() != Family::kFlowLinear)
    fail(ErrorCode::kConfigError, "score_from_velocity expects the linear flow path");
  const double alpha = sched.mean_scale(t), sigma = sched.noise_std(t);
  if (sigma == 0.0) fail(ErrorCode::kSingularTime, "sigma_t = 0");
  return -(x + alpha * v) / (sigma * (alpha + sigma));
}

Vector score_from_velocity_trig(const Schedule& sched, const Vector& v, const Vector& x, double t) {
  if (sched.family() != Family::kTrigFlow)
    fail(ErrorCode::kConfigError, "score_from_velocity_trig expects the trigflow path");
  const double s = std::sin(t);
  if (std::abs(s) < 1e-300 || std::abs(std::remainder(t, std::numbers::pi)) < 1e-15)
    fail(ErrorCode::kSingularTime, "sin t = 0");
  const double sd2 = sched.spec().sigma_d * sched.spec().sigma_d;
  return -(x + (std::cos(t) / s) * v) / sd2;
}

// ---------------------------------------------------------------------------

void VelocityField::check_times(const Vector& t) const {
  for (Index i = 0; i < t.size(); ++i) sched_.check_time(t(i));
}

void VelocityField::drift_and_score(const Matrix& x, const Vector& t, const Matrix* c, Matrix& v,
                                    Matrix& s) const {
  v = drift(x, t, c);
  s = score(x, t, c);
}

Matrix VelocityField::jacobian(const Vector& x, double t, const Vector* c) const {
  return jvp_block(x, t, c, Matrix::Identity(dim(), dim()));
}

Vector VelocityField::drift1(const Vector& x, double t, const Vector* c) const {
  Matrix xm = x;
  Vector tv = Vector::Constant(1, t);
  Matrix cm;
  if (c) cm = *c;
  return drift(xm, tv, c ? &cm : nullptr).col(0);
}

namespace {
void require_finite(const Matrix& m, const Matrix& x, const Vector& t) {
  if (m.allFinite()) return;
  for (Index j = 0; j < m.cols(); ++j) {
    if (!m.col(j).allFinite()) {
      std::string where = "t=" + std::to_string(t(j)) + " x=(";
      for (Index i = 0; i < x.rows(); ++i) where += (i ? "," : "") + std::to_string(x(i, j));
      fail(ErrorCode::kNonFiniteField, "non-finite field at " + where + ")");
    }
  }
}
}  // namespace

double score_skip(const Schedule& sched, double t) {
  const double a = sched.mean_scale(t), b = sched.noise_std(t);
  return 1.0 / (a * a + b * b);
}

ScoreNetField::ScoreNetField(Schedule sched, std::shared_ptr<const net::FieldNet> n)
    : VelocityField(std::move(sched)), net_(std::move(n)) {
  if (sched_.is_flow()) fail(ErrorCode::kConfigError, "score-backed fields need a diffusion schedule");
  if (net_->spec().output_dim != net_->spec().input_dim)
    fail(ErrorCode::kShapeError, "score net must map R^D to R^D");
}

void ScoreNetField::drift_and_score(const Matrix& x, const Vector& t, const Matrix* c, Matrix& v,
                                    Matrix& s) const {
  check_times(t);
  Matrix eps_hat = net_->forward({x, t, c});
  s.resize(x.rows(), x.cols());
  v.resize(x.rows(), x.cols());
  for (Index j = 0; j < x.cols(); ++j) {
    const double k = score_skip(sched_, t(j));
    s.col(j) = -k * x.col(j) - std::sqrt(k) * eps_hat.col(j);
    v.col(j) = sched_.drift_coef(t(j)) * x.col(j) - 0.5 * sched_.g2(t(j)) * s.col(j);
  }
  require_finite(v, x, t);
}

Matrix ScoreNetField::drift(const Matrix& x, const Vector& t, const Matrix* c) const {
  Matrix v, s;
  drift_and_score(x, t, c, v, s);
  return v;
}

Matrix ScoreNetField::score(const Matrix& x, const Vector& t, const Matrix* c) const {
  Matrix v, s;
  drift_and_score(x, t, c, v, s);
  return s;
}

Matrix ScoreNetField::jvp_block(const Vector& x, double t, const Vector* c, const Matrix& u) const {
  sched_.check_time(t);
  const double k = score_skip(sched_, t);
  return (sched_.drift_coef(t) + 0.5 * sched_.g2(t) * k) * u +
         0.5 * sched_.g2(t) * std::sqrt(k) * net_->jvp_block(x, t, c, u);
}

VelocityNetField::VelocityNetField(Schedule sched, std::shared_ptr<const net::FieldNet> n)
    : VelocityField(std::move(sched)), net_(std::move(n)) {
  if (net_->spec().output_dim != net_->spec().input_dim)
    fail(ErrorCode::kShapeError, "velocity net must map R^D to R^D");
}

Matrix VelocityNetField::drift(const Matrix& x, const Vector& t, const Matrix* c) const {
  check_times(t);
  Matrix v = net_->forward({x, t, c});
  require_finite(v, x, t);
  return v;
}

void VelocityNetField::drift_and_score(const Matrix& x, const Vector& t, const Matrix* c, Matrix& v,
                                       Matrix& s) const {
  v = drift(x, t, c);
  s.resize(x.rows(), x.cols());
  for (Index j = 0; j < x.cols(); ++j) {
    const auto m = velocity_to_score(sched_, t(j));
    s.col(j) = m.a * x.col(j) + m.c * v.col(j);
  }
}

Matrix VelocityNetField::score(const Matrix& x, const Vector& t, const Matrix* c) const {
  Matrix v, s;
  drift_and_score(x, t, c, v, s);
  return s;
}

Matrix VelocityNetField::jvp_block(const Vector& x, double t, const Vector* c,
                                   const Matrix& u) const {
  sched_.check_time(t);
  return net_->jvp_block(x, t, c, u);
}

// ---------------------------------------------------------------------------

AnalyticMixtureField::AnalyticMixtureField(Schedule sched, targets::GaussianMixture data)
    : VelocityField(std::move(sched)), data_(std::move(data)) {}

AnalyticMixtureField::Eval AnalyticMixtureField::evaluate(const Vector& x, double t,
                                                          const Vector* c, bool need_jac) const {
  sched_.check_time(t);
  const Index d = data_.dim();
  if (x.size() != d) fail(ErrorCode::kDimensionMismatch, "field dim");
  if (data_.context_dim() > 0 && (!c || c->size() != data_.context_dim()))
    fail(ErrorCode::kDimensionMismatch, "field context dim");
  const double a = sched_.mean_scale(t), ad = sched_.mean_scale_dot(t);
  const double b = sched_.noise_std(t), bd = sched_.noise_std_dot(t);
  const auto& comps = data_.components();
  const Index kc = static_cast<Index>(comps.size());
  Vector logp(kc);
  Matrix sk(d, kc), vk(d, kc);
  std::vector<Matrix> bk;
  const Matrix eye = Matrix::Identity(d, d);
  for (Index k = 0; k < kc; ++k) {
    const auto ku = static_cast<std::size_t>(k);
    const auto& comp = comps[ku];
    Vector m = data_.component_mean(ku, c);
    Matrix cov = a * a * comp.cov + b * b * eye;
    Eigen::LLT<Matrix> llt(cov);
    if (llt.info() != Eigen::Success) fail(ErrorCode::kNumericalAbort, "marginal covariance");
    Vector r = x - a * m;
    Matrix l = llt.matrixL();
    Vector y = l.triangularView<Eigen::Lower>().solve(r);
    logp(k) = std::log(comp.weight) - l.diagonal().array().log().sum() -
              0.5 * (static_cast<double>(d) * std::log(2.0 * std::numbers::pi) + y.squaredNorm());
    sk.col(k) = -llt.solve(r);
    Matrix gain = ad * a * comp.cov + bd * b * eye;
    vk.col(k) = ad * m - gain * sk.col(k);
    if (need_jac) bk.push_back(llt.solve(gain.transpose()).transpose());
  }
  Eval out;
  out.log_p = targets::log_sum_exp(logp);
  Vector gamma = (logp.array() - out.log_p).exp();
  out.s = sk * gamma;
  out.v = vk * gamma;
  if (need_jac) {
    out.jac = Matrix::Zero(d, d);
    for (Index k = 0; k < kc; ++k)
      out.jac += gamma(k) * (bk[static_cast<std::size_t>(k)] +
                             vk.col(k) * (sk.col(k) - out.s).transpose());
  }
  return out;
}

Matrix AnalyticMixtureField::drift(const Matrix& x, const Vector& t, const Matrix* c) const {
  Matrix v, s;
  drift_and_score(x, t, c, v, s);
  return v;
}

Matrix AnalyticMixtureField::score(const Matrix& x, const Vector& t, const Matrix* c) const {
  Matrix v, s;
  drift_and_score(x, t, c, v, s);
  return s;
}

void AnalyticMixtureField::drift_and_score(const Matrix& x, const Vector& t, const Matrix* c,
                                           Matrix& v, Matrix& s) const {
  if (t.size() != x.cols()) fail(ErrorCode::kDimensionMismatch, "one time per column");
  v.resize(x.rows(), x.cols());
  s.resize(x.rows(), x.cols());
  for (Index j = 0; j < x.cols(); ++j) {
    Vector cj;
    if (c) cj = c->col(j);
    Eval e = evaluate(x.col(j), t(j), c ? &cj : nullptr, false);
    v.col(j) = e.v;
    s.col(j) = e.s;
  }
}

Matrix AnalyticMixtureField::jacobian(const Vector& x, double t, const Vector* c) const {
  return evaluate(x, t, c, true).jac;
}

Matrix AnalyticMixtureField::jvp_block(const Vector& x, double t, const Vector* c,
                                       const Matrix& u) const {
  return jacobian(x, t, c) * u;
}

double AnalyticMixtureField::log_marginal(const Vector& x, double t, const Vector* c) const {
  return evaluate(x, t, c, false).log_p;
}

std::unique_ptr<AnalyticMixtureField> analytic_gaussian_field(const Vector& mean, const Matrix& cov,
                                                              const Schedule& sched) {
  try {
    return std::make_unique<AnalyticMixtureField>(sched, targets::make_gaussian(mean, cov));
  } catch (const Error& e) {
    if (e.code() == ErrorCode::kInvalidTarget) fail(ErrorCode::kInvalidCovariance, e.what());
    throw;
  }
}

// ---------------------------------------------------------------------------

LinearField::LinearField(Schedule sched, Matrix a, Vector b)
    : VelocityField(std::move(sched)), a_(std::move(a)), b_(std::move(b)) {
  if (a_.rows() != a_.cols()) fail(ErrorCode::kShapeError, "linear field needs a square map");
  if (b_.size() == 0) b_ = Vector::Zero(a_.rows());
}

Matrix LinearField::drift(const Matrix& x, const Vector& t, const Matrix*) const {
  check_times(t);
  return (a_ * x).colwise() + b_;
}

Matrix LinearField::score(const Matrix& x, const Vector&, const Matrix*) const { return -x; }

Matrix LinearField::jvp_block(const Vector&, double, const Vector*, const Matrix& u) const {
  return a_ * u;
}

Vector boundary_flux_log10(const AnalyticMixtureField& field, const Vector& direction, double t,
                           const Vector& radii, const Vector* c) {
  Vector u = direction.normalized();
  const double d = static_cast<double>(field.dim());
  Vector out(radii.size());
  for (Index i = 0; i < radii.size(); ++i) {
    const double r = radii(i);
    Vector x = r * u;
    const double vn = field.drift1(x, t, c).norm();
    const double lp = field.log_marginal(x, t, c);
    out(i) = vn > 0.0 ? ((d - 1.0) * std::log(r) + lp + std::log(vn)) / std::log(10.0)
                      : -std::numeric_limits<double>::infinity();
  }
  return out;
}

}  // namespace stad::dyn
