// Copyright 2026 The StAD Lab Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "stad/common.hpp"
#include "stad/dynamics.hpp"
#include "stad/net.hpp"
#include "stad/targets.hpp"

namespace stad::train {

struct TrainHyper {
  std::int64_t steps = 2000;
  int batch = 256;
  /// Batch doubling from `heating_start` up to `batch`, over equal stages.
  bool heating = false;
  int heating_start = 64;
  net::OptimizerConfig optimizer;
  std::uint64_t seed = 0;
};

/// Batch size in effect at `step` under the heating schedule.
int batch_at(const TrainHyper& h, std::int64_t step);

struct TrainResult {
  std::vector<double> loss;  // one entry per completed step
  std::int64_t steps_done = 0;
  /// Set when a non-finite loss or gradient stopped training; the net then
  /// holds the last finite parameters.
  bool aborted = false;
  std::string abort_reason;
  double wall_s = 0.0;
  double cache_wall_s = 0.0;
};

/// Denoising score matching for the ScoreNetField parameterization: the
/// eta^2-weighted loss E eta^2 ||s_theta + z / eta||^2. Uniform t on
/// [eps, T]. Diffusion families only.
TrainResult train_score_dsm(net::FieldNet& net, const targets::Dataset& ds,
                            const dyn::Schedule& sched, const TrainHyper& h);

/// Conditional flow matching on the linear path: regresses v(x_t, t, c)
/// onto u = z - x_0. Also accepts trigflow (u = -sin t x_0 + sigma_d cos t z).
TrainResult train_flow_cfm(net::FieldNet& net, const targets::Dataset& ds,
                           const dyn::Schedule& sched, const TrainHyper& h);

/// Loss of a net on one batch without updating it (for curve checks).
double dsm_loss(const net::FieldNet& net, const Matrix& x0, const Vector& t, const Matrix* c,
                const Matrix& z, const dyn::Schedule& sched);
double cfm_loss(const net::FieldNet& net, const Matrix& x0, const Vector& t, const Matrix* c,
                const Matrix& z, const dyn::Schedule& sched);

enum class DirectMode { kH1, kH1PlusB };
const char* to_string(DirectMode m);
DirectMode direct_mode_from_string(const std::string& s);

struct DirectHyper {
  TrainHyper train;
  /// Cached regression targets, built once before training.
  Index cache_size = 65536;
};

/// Regression targets for the direct baselines at (x_t, t, c): a single
/// Rademacher-probe Hutchinson divergence, minus the Stein baseline for
/// kH1PlusB.
struct DirectCache {
  Matrix x, c;
  Vector t, target;
};
DirectCache build_direct_cache(const dyn::VelocityField& teacher, const targets::Dataset& ds,
                               DirectMode mode, Index size, std::uint64_t seed);

/// Squared-error regression of a scalar head onto a direct cache.
TrainResult train_direct_divergence(net::FieldNet& head, const dyn::VelocityField& teacher,
                                    const targets::Dataset& ds, DirectMode mode,
                                    const DirectHyper& h);

/// Training loop on a prebuilt cache; stops at h.steps or after `wall_budget_s`
/// seconds of training when that is positive.
TrainResult fit_direct_cache(net::FieldNet& head, const DirectCache& cache,
                             const TrainHyper& h, double wall_budget_s = 0.0);

}  // namespace stad::train
