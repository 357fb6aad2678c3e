// Copyright 2026 The StAD Lab Authors
// SPDX-License-Identifier: Apache-2.0

#include "stad/odelik.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <limits>
#include <numbers>
#include <ostream>

#include "stad/parallel.hpp"

namespace stad::ode {

namespace {

using Clock = std::chrono::steady_clock;

// Dormand-Prince tableau.
constexpr double c2 = 1.0 / 5, c3 = 3.0 / 10, c4 = 4.0 / 5, c5 = 8.0 / 9;
constexpr double a21 = 1.0 / 5;
constexpr double a31 = 3.0 / 40, a32 = 9.0 / 40;
constexpr double a41 = 44.0 / 45, a42 = -56.0 / 15, a43 = 32.0 / 9;
constexpr double a51 = 19372.0 / 6561, a52 = -25360.0 / 2187, a53 = 64448.0 / 6561,
                 a54 = -212.0 / 729;
constexpr double a61 = 9017.0 / 3168, a62 = -355.0 / 33, a63 = 46732.0 / 5247, a64 = 49.0 / 176,
                 a65 = -5103.0 / 18656;
constexpr double a71 = 35.0 / 384, a73 = 500.0 / 1113, a74 = 125.0 / 192, a75 = -2187.0 / 6784,
                 a76 = 11.0 / 84;
constexpr double e1 = 71.0 / 57600, e3 = -71.0 / 16695, e4 = 71.0 / 1920, e5 = -17253.0 / 339200,
                 e6 = 22.0 / 525, e7 = -1.0 / 40;

double rms_norm(const Vector& v, const Vector& scale) {
  return std::sqrt((v.array() / scale.array()).square().mean());
}

}  // namespace

OdeResult dopri5(const Rhs& f, Vector y0, double t0, double t1, const SolverConfig& cfg) {
  if (!(cfg.rtol > 0.0 && cfg.atol > 0.0)) fail(ErrorCode::kConfigError, "tolerances must be > 0");
  if (!y0.allFinite()) fail(ErrorCode::kNonFiniteField, "non-finite initial state");
  if (!std::isfinite(t0) || !std::isfinite(t1)) fail(ErrorCode::kTimeRange, "non-finite time span");
  OdeResult res;
  res.y = std::move(y0);
  if (t0 == t1) return res;
  const Index n = res.y.size();
  const double dir = t1 > t0 ? 1.0 : -1.0;
  auto& st = res.stats;
  auto eval = [&](double t, const Vector& y, Vector& out) {
    out.resize(n);
    f(t, y, out);
    ++st.nfe;
    if (!out.allFinite())
      fail(ErrorCode::kNonFiniteField, "non-finite right-hand side at t=" + std::to_string(t));
  };

  Vector& y = res.y;
  Vector k1, k2, k3, k4, k5, k6, k7, ytmp(n), ynew(n), err(n), scale(n);
  double t = t0;
  eval(t, y, k1);

  // Initial step from the local derivative scale.
  double h = std::abs(cfg.h0);
  const double span = std::abs(t1 - t0);
  if (h <= 0.0) {
    scale = cfg.atol + cfg.rtol * y.array().abs();
    const double d0 = rms_norm(y, scale), d1 = rms_norm(k1, scale);
    double h0 = (d0 < 1e-5 || d1 < 1e-5) ? 1e-6 : 0.01 * d0 / d1;
    h0 = std::min(h0, span);
    ytmp = y + dir * h0 * k1;
    eval(t + dir * h0, ytmp, k2);
    const double d2 = rms_norm(k2 - k1, scale) / h0;
    if (d1 == 0.0 && d2 == 0.0) {
      h = span;  // a constant state: one step covers the interval
    } else {
      const double m = std::max(d1, d2);
      const double h1 = m <= 1e-15 ? std::max(1e-6, h0 * 1e-3) : std::pow(0.01 / m, 1.0 / 5.0);
      h = std::min(100.0 * h0, h1);
    }
  }
  h = std::min(h, span);

  std::vector<double> traj_t{t};
  std::vector<Vector> traj_y{y};
  constexpr double kSafe = 0.9, kFacMin = 0.2, kFacMax = 10.0, kBeta = 0.04;
  const double expo1 = 0.2 - kBeta * 0.75;
  double facold = 1e-4;
  bool last_rejected = false;

  while ((t1 - t) * dir > 0.0) {
    if (st.accepted + st.rejected >= cfg.max_steps)
      throw StiffnessError("step budget exhausted at t=" + std::to_string(t), traj_t, traj_y);
    if (h < 16.0 * std::numeric_limits<double>::epsilon() * std::max(1.0, std::abs(t)))
      throw StiffnessError("step size underflow at t=" + std::to_string(t), traj_t, traj_y);
    bool last = false;
    if ((t + dir * h - t1) * dir >= 0.0) {
      h = std::abs(t1 - t);
      last = true;
    }
    const double hs = dir * h;
    ytmp = y + hs * a21 * k1;
    eval(t + c2 * hs, ytmp, k2);
    ytmp = y + hs * (a31 * k1 + a32 * k2);
    eval(t + c3 * hs, ytmp, k3);
    ytmp = y + hs * (a41 * k1 + a42 * k2 + a43 * k3);
    eval(t + c4 * hs, ytmp, k4);
    ytmp = y + hs * (a51 * k1 + a52 * k2 + a53 * k3 + a54 * k4);
    eval(t + c5 * hs, ytmp, k5);
    ytmp = y + hs * (a61 * k1 + a62 * k2 + a63 * k3 + a64 * k4 + a65 * k5);
    const double tn = last ? t1 : t + hs;
    eval(tn, ytmp, k6);
    ynew = y + hs * (a71 * k1 + a73 * k3 + a74 * k4 + a75 * k5 + a76 * k6);
    eval(tn, ynew, k7);
    err = hs * (e1 * k1 + e3 * k3 + e4 * k4 + e5 * k5 + e6 * k6 + e7 * k7);
    scale = cfg.atol + cfg.rtol * y.array().abs().max(ynew.array().abs());
    const double en = rms_norm(err, scale);

    const double fac11 = std::pow(std::max(en, 1e-300), expo1);
    if (en <= 1.0) {
      double fac = fac11 / std::pow(facold, kBeta);
      fac = std::clamp(fac / kSafe, 1.0 / kFacMax, 1.0 / kFacMin);
      double hnew = h / fac;
      if (last_rejected) hnew = std::min(hnew, h);
      facold = std::max(en, 1e-4);
      t = tn;
      y = ynew;
      k1 = k7;
      ++st.accepted;
      traj_t.push_back(t);
      traj_y.push_back(y);
      last_rejected = false;
      h = hnew;
    } else {
      h = h / std::min(1.0 / kFacMin, fac11 / kSafe);
      ++st.rejected;
      last_rejected = true;
    }
  }
  return res;
}

// ---------------------------------------------------------------------------

const char* to_string(BackendKind k) {
  switch (k) {
    case BackendKind::kExact: return "exact";
    case BackendKind::kHutchinson: return "hutchinson";
    case BackendKind::kHutchpp: return "hutchpp";
    case BackendKind::kXTrace: return "xtrace";
    case BackendKind::kStad: return "stad";
  }
  return "exact";
}

BackendKind backend_kind_from_string(const std::string& s) {
  for (BackendKind k : {BackendKind::kExact, BackendKind::kHutchinson, BackendKind::kHutchpp,
                        BackendKind::kXTrace, BackendKind::kStad})
    if (s == to_string(k)) return k;
  if (s == "hutch++") return BackendKind::kHutchpp;
  fail(ErrorCode::kConfigError, "unknown backend '" + s + "'");
}

std::string BackendConfig::label() const {
  switch (kind) {
    case BackendKind::kExact: return "exact";
    case BackendKind::kStad:
      return head ? std::string(stein::to_string(head->kind())) : std::string("stad");
    default: return std::string(to_string(kind)) + "(" + std::to_string(probes.count) + ")";
  }
}

LogDensityFn gaussian_prior(const dyn::Schedule& sched, Index dim) {
  const double var = sched.prior_variance();
  const double norm = -0.5 * static_cast<double>(dim) * std::log(2.0 * std::numbers::pi * var);
  return [var, norm, dim](const Vector& x, const Vector*) {
    if (x.size() != dim) fail(ErrorCode::kDimensionMismatch, "prior dimension");
    return norm - 0.5 * x.squaredNorm() / var;
  };
}

LogDensityFn analytic_prior(const dyn::AnalyticMixtureField& field) {
  const double T = field.schedule().t1();
  return [&field, T](const Vector& x, const Vector* c) { return field.log_marginal(x, T, c); };
}

LikelihoodReport log_likelihood(const dyn::VelocityField& field, const BackendConfig& backend,
                                const Vector& x, const Vector* c, const LogDensityFn& base,
                                const SolverConfig& solver, std::uint64_t seed) {
  const Index d = field.dim();
  if (x.size() != d) fail(ErrorCode::kDimensionMismatch, "sample dimension disagrees with field");
  if (!x.allFinite()) fail(ErrorCode::kNonFiniteField, "non-finite sample");
  if ((c != nullptr) != (field.context_dim() > 0) || (c && c->size() != field.context_dim()))
    fail(ErrorCode::kShapeError, "context does not match the field");
  if (backend.kind == BackendKind::kStad && !backend.head)
    fail(ErrorCode::kConfigError, "stad backend needs a head");
  const auto start = Clock::now();
  const auto& sched = field.schedule();

  trace::ProbeSpec spec = backend.probes;
  spec.seed = splitmix64(backend.probes.seed ^ splitmix64(seed));
  Matrix probes_a, probes_b, basis;
  bool have_basis = false;
  std::int64_t evals = 0, matvecs = 0;
  auto draw = [&](std::uint64_t stream) {
    switch (backend.kind) {
      case BackendKind::kHutchinson:
      case BackendKind::kXTrace: probes_a = trace::draw_probes(spec, d, 2 * stream); break;
      case BackendKind::kHutchpp:
        probes_a = trace::draw_probes(spec, d, 2 * stream);
        probes_b = trace::draw_probes(spec, d, 2 * stream + 1);
        have_basis = false;
        break;
      default: break;
    }
  };
  draw(0);

  Matrix cm;
  if (c) cm = *c;
  const Matrix* cp = c ? &cm : nullptr;
  Matrix xm(d, 1), v, s;
  Vector tv(1);

  auto rhs = [&](double t, const Vector& y, Vector& dy) {
    const double tc = std::clamp(t, sched.t0(), sched.t1());
    xm.col(0) = y.head(d);
    tv(0) = tc;
    if (backend.redraw_probes && evals > 0) draw(static_cast<std::uint64_t>(evals));
    const Vector xv = y.head(d);
    trace::MatVecOperator op(d, [&](const Matrix& u) { return field.jvp_block(xv, tc, c, u); });
    double div = 0.0;
    switch (backend.kind) {
      case BackendKind::kExact:
        v = field.drift(xm, tv, cp);
        div = field.jacobian(xv, tc, c).trace();
        matvecs += d;
        break;
      case BackendKind::kHutchinson:
        v = field.drift(xm, tv, cp);
        div = trace::hutchinson_trace(op, probes_a).value;
        break;
      case BackendKind::kHutchpp: {
        v = field.drift(xm, tv, cp);
        const bool refresh = !have_basis || (backend.hutchpp_refresh > 0 &&
                                             evals % backend.hutchpp_refresh == 0);
        auto r = trace::hutchpp_trace(op, probes_a, probes_b, refresh ? nullptr : &basis);
        if (refresh) {
          basis = std::move(r.basis);
          have_basis = true;
        }
        div = r.estimate.value;
        break;
      }
      case BackendKind::kXTrace:
        v = field.drift(xm, tv, cp);
        div = trace::xtrace(op, probes_a).value;
        break;
      case BackendKind::kStad:
        field.drift_and_score(xm, tv, cp, v, s);
        div = backend.head->divergence(xm, tv, cp, v, s)(0);
        break;
    }
    matvecs += static_cast<std::int64_t>(op.matvecs());
    dy.head(d) = v.col(0);
    dy(d) = div;
    ++evals;
  };

  Vector y0(d + 1);
  y0.head(d) = x;
  y0(d) = 0.0;
  OdeResult out = dopri5(rhs, y0, sched.t0(), sched.t1(), solver);

  LikelihoodReport rep;
  rep.x_T = out.y.head(d);
  rep.delta_logp = out.y(d);
  rep.log_prob = base(rep.x_T, c) + rep.delta_logp;
  rep.bpd = std::numeric_limits<double>::quiet_NaN();
  rep.stats = out.stats;
  rep.nfe = evals;
  rep.matvecs = matvecs;
  rep.backend = backend.label();
  rep.wall_time = std::chrono::duration<double>(Clock::now() - start).count();
  return rep;
}

double bits_per_dimension(double log_prob, Index dim, double offset) {
  if (dim < 1) fail(ErrorCode::kConfigError, "bpd needs D >= 1");
  return -log_prob / (static_cast<double>(dim) * std::numbers::ln2) + offset;
}

double log_prob_from_bpd(double bpd, Index dim, double offset) {
  if (dim < 1) fail(ErrorCode::kConfigError, "bpd needs D >= 1");
  return -(bpd - offset) * static_cast<double>(dim) * std::numbers::ln2;
}

Matrix dequantize(const Matrix& x, int levels, Rng& rng) {
  if (levels < 2) fail(ErrorCode::kConfigError, "dequantization needs >= 2 levels");
  for (double v : x.reshaped())
    if (!(v >= 0.0 && v < levels && v == std::floor(v)))
      fail(ErrorCode::kShapeError, "quantized values must be integers in [0, levels)");
  Matrix out(x.rows(), x.cols());
  for (Index j = 0; j < x.cols(); ++j)
    for (Index i = 0; i < x.rows(); ++i)
      out(i, j) = 2.0 * (x(i, j) + rng.uniform()) / levels - 1.0;
  return out;
}

Matrix quantize(const Matrix& y, int levels) {
  if (levels < 2) fail(ErrorCode::kConfigError, "quantization needs >= 2 levels");
  return ((y.array() + 1.0) * 0.5 * levels).floor().cwiseMax(0.0).cwiseMin(levels - 1.0).matrix();
}

// ---------------------------------------------------------------------------

BackendMetrics summarize(const std::string& name, int n_probes, const BackendRun& run,
                         const BackendRun& exact) {
  const std::size_t n = run.reports.size();
  if (n == 0 || n != exact.reports.size())
    fail(ErrorCode::kDimensionMismatch, "runs cover different sample sets");
  BackendMetrics m;
  m.backend = name;
  m.n_probes = n_probes;
  Vector r(static_cast<Index>(n));
  double nfe = 0.0, nfe_ref = 0.0, wall_ref = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    r(static_cast<Index>(i)) = exact.reports[i].log_prob - run.reports[i].log_prob;
    nfe += static_cast<double>(run.reports[i].nfe);
    nfe_ref += static_cast<double>(exact.reports[i].nfe);
    m.wall_s += run.reports[i].wall_time;
    wall_ref += exact.reports[i].wall_time;
  }
  m.mean_resid = r.mean();
  m.std_resid =
      n > 1 ? std::sqrt((r.array() - m.mean_resid).square().sum() / static_cast<double>(n - 1))
            : 0.0;
  m.mae = r.cwiseAbs().mean();
  m.speedup = m.wall_s > 0.0 ? wall_ref / m.wall_s : 1.0;
  m.rnfe = nfe_ref > 0.0 ? nfe / nfe_ref : 1.0;
  return m;
}

Comparison compare_backends(const dyn::VelocityField& field, const Matrix& x, const Matrix* c,
                            const std::vector<NamedBackend>& backends, const LogDensityFn& base,
                            const SolverConfig& solver, std::uint64_t seed) {
  std::vector<NamedBackend> list = backends;
  auto is_exact = [](const NamedBackend& b) { return b.config.kind == BackendKind::kExact; };
  auto it = std::find_if(list.begin(), list.end(), is_exact);
  if (it == list.end()) {
    list.insert(list.begin(), NamedBackend{"exact", {}});
  } else {
    std::rotate(list.begin(), it, it + 1);
  }
  const Index n = x.cols();
  Comparison cmp;
  for (const auto& b : list) {
    BackendRun run;
    run.name = b.name;
    run.reports.resize(static_cast<std::size_t>(n));
    parallel_for(static_cast<std::size_t>(n), [&](std::size_t i) {
      const auto j = static_cast<Index>(i);
      Vector cj;
      if (c) cj = c->col(j);
      run.reports[i] = log_likelihood(field, b.config, x.col(j), c ? &cj : nullptr, base, solver,
                                      splitmix64(seed + i));
    });
    cmp.runs.push_back(std::move(run));
  }
  for (std::size_t k = 0; k < list.size(); ++k) {
    const int probes = list[k].config.kind == BackendKind::kExact ||
                               list[k].config.kind == BackendKind::kStad
                           ? 0
                           : list[k].config.probes.count;
    cmp.metrics.push_back(summarize(list[k].name, probes, cmp.runs[k], cmp.runs[0]));
    Vector r(n);
    for (Index j = 0; j < n; ++j)
      r(j) = cmp.runs[0].reports[static_cast<std::size_t>(j)].log_prob -
             cmp.runs[k].reports[static_cast<std::size_t>(j)].log_prob;
    cmp.residuals.push_back(std::move(r));
  }
  return cmp;
}

void write_metrics_csv(std::ostream& os, const std::vector<BackendMetrics>& rows) {
  os << "backend,n_probes,mean_resid,std_resid,mae,speedup,rnfe,wall_s\n";
  os.precision(10);
  for (const auto& m : rows)
    os << m.backend << ',' << m.n_probes << ',' << m.mean_resid << ',' << m.std_resid << ','
       << m.mae << ',' << m.speedup << ',' << m.rnfe << ',' << m.wall_s << '\n';
}

void write_histogram_csv(std::ostream& os, const Vector& values, int bins) {
  if (bins < 1) fail(ErrorCode::kConfigError, "histogram needs >= 1 bin");
  os << "bin_left,bin_right,count\n";
  if (values.size() == 0) return;
  double lo = values.minCoeff(), hi = values.maxCoeff();
  if (hi <= lo) hi = lo + 1.0;
  std::vector<long> counts(static_cast<std::size_t>(bins), 0);
  const double w = (hi - lo) / bins;
  for (Index i = 0; i < values.size(); ++i) {
    auto k = static_cast<long>(std::floor((values(i) - lo) / w));
    k = std::clamp<long>(k, 0, bins - 1);
    ++counts[static_cast<std::size_t>(k)];
  }
  os.precision(10);
  for (int k = 0; k < bins; ++k)
    os << lo + k * w << ',' << lo + (k + 1) * w << ',' << counts[static_cast<std::size_t>(k)]
       << '\n';
}

}  // namespace stad::ode
