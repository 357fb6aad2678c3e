// Copyright 2026 The StAD Lab Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstdint>
#include <functional>
#include <iosfwd>
#include <memory>
#include <string>
#include <vector>

#include "stad/common.hpp"
#include "stad/dynamics.hpp"
#include "stad/rng.hpp"
#include "stad/stad.hpp"
#include "stad/trace.hpp"

namespace stad::ode {

// ---------------------------------------------------------------------------
// Dormand-Prince 5(4)

struct SolverConfig {
  double rtol = 1e-5;
  double atol = 1e-5;
  /// Initial step; <= 0 picks one from the local derivative scale.
  double h0 = 0.0;
  std::int64_t max_steps = 200000;
};

struct SolverStats {
  std::int64_t accepted = 0;
  std::int64_t rejected = 0;
  std::int64_t nfe = 0;  // right-hand-side calls
};

using Rhs = std::function<void(double t, const Vector& y, Vector& dydt)>;

struct OdeResult {
  Vector y;
  SolverStats stats;
};

/// Raised when the step size underflows or the step budget runs out. Carries
/// the accepted trajectory so far.
class StiffnessError : public Error {
 public:
  StiffnessError(const std::string& what, std::vector<double> ts, std::vector<Vector> ys)
      : Error(ErrorCode::kStiffness, what), ts_(std::move(ts)), ys_(std::move(ys)) {}
  const std::vector<double>& times() const { return ts_; }
  const std::vector<Vector>& states() const { return ys_; }

 private:
  std::vector<double> ts_;
  std::vector<Vector> ys_;
};

/// Integrates y' = f(t, y) from t0 to t1 (either direction) with an embedded
/// 5(4) pair, PI step control and an RMS error norm scaled by
/// atol + rtol max(|y_old|, |y_new|).
OdeResult dopri5(const Rhs& f, Vector y0, double t0, double t1, const SolverConfig& cfg);

// ---------------------------------------------------------------------------
// Likelihood

enum class BackendKind { kExact, kHutchinson, kHutchpp, kXTrace, kStad };
const char* to_string(BackendKind k);
BackendKind backend_kind_from_string(const std::string& s);

struct BackendConfig {
  BackendKind kind = BackendKind::kExact;
  /// Probe family and count n for the stochastic kinds (Hutch++ uses n
  /// sketch and n residual probes, XTrace n probes).
  trace::ProbeSpec probes;
  /// Hutch++ basis refresh period in right-hand-side evaluations.
  int hutchpp_refresh = 6;
  /// Draw new probes at every evaluation instead of once per trajectory.
  bool redraw_probes = false;
  /// Learned divergence head for kStad (any head kind).
  std::shared_ptr<const stein::DivergenceHead> head;

  /// "exact", "hutchinson(1)", "stad", ...
  std::string label() const;
};

/// log p_T(x_T; c).
using LogDensityFn = std::function<double(const Vector& x, const Vector* c)>;

/// N(0, prior_variance I) in `dim` dimensions.
LogDensityFn gaussian_prior(const dyn::Schedule& sched, Index dim);
/// The analytic field's own terminal marginal.
LogDensityFn analytic_prior(const dyn::AnalyticMixtureField& field);

struct LikelihoodReport {
  double log_prob = 0.0;
  double delta_logp = 0.0;  // l_T, the integrated divergence
  double bpd = 0.0;         // NaN unless requested by the caller
  std::int64_t nfe = 0;
  std::int64_t matvecs = 0;
  double wall_time = 0.0;
  std::string backend;
  SolverStats stats;
  Vector x_T;
};

/// Integrates x' = v_t(x), l' = div-estimate from eps to T and returns
/// log p_T(x_T) + l_T. `seed` keys the per-trajectory probes.
LikelihoodReport log_likelihood(const dyn::VelocityField& field, const BackendConfig& backend,
                                const Vector& x, const Vector* c, const LogDensityFn& base,
                                const SolverConfig& solver, std::uint64_t seed = 0);

/// -log p / (D ln 2) + offset.
double bits_per_dimension(double log_prob, Index dim, double offset = 0.0);
double log_prob_from_bpd(double bpd, Index dim, double offset = 0.0);

/// (x + U[0,1)) / levels mapped to [-1, 1]; x holds integers in [0, levels).
Matrix dequantize(const Matrix& x, int levels, Rng& rng);
/// Inverse grid map: floor((y + 1) / 2 * levels).
Matrix quantize(const Matrix& y, int levels);

// ---------------------------------------------------------------------------
// Backend comparison

struct NamedBackend {
  std::string name;
  BackendConfig config;
};

struct BackendMetrics {
  std::string backend;
  int n_probes = 0;
  double mean_resid = 0.0;  // mean of (exact - estimate)
  double std_resid = 0.0;
  double mae = 0.0;
  double speedup = 1.0;  // exact wall time / backend wall time
  double rnfe = 1.0;     // backend NFE / exact NFE
  double wall_s = 0.0;   // summed per-sample wall time
};

struct BackendRun {
  std::string name;
  std::vector<LikelihoodReport> reports;
};

struct Comparison {
  std::vector<BackendRun> runs;  // runs[0] is the exact reference
  std::vector<BackendMetrics> metrics;
  /// exact - estimate per sample, parallel to runs.
  std::vector<Vector> residuals;
};

/// Evaluates every backend on every column of x. An exact reference run is
/// added in front when the list does not contain one.
Comparison compare_backends(const dyn::VelocityField& field, const Matrix& x, const Matrix* c,
                            const std::vector<NamedBackend>& backends, const LogDensityFn& base,
                            const SolverConfig& solver, std::uint64_t seed = 0);

/// Metrics relative to a given reference run (used when runs are produced
/// separately).
BackendMetrics summarize(const std::string& name, int n_probes, const BackendRun& run,
                         const BackendRun& exact);

void write_metrics_csv(std::ostream& os, const std::vector<BackendMetrics>& rows);
/// Equal-width histogram over [min, max] of the values.
void write_histogram_csv(std::ostream& os, const Vector& values, int bins);

}  // namespace stad::ode
