// Copyright 2026 The StAD Lab Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cmath>
#include <cstdint>
#include <limits>
#include <memory>
#include <string>
#include <vector>

#include "stad/common.hpp"
#include "stad/dynamics.hpp"
#include "stad/net.hpp"
#include "stad/targets.hpp"
#include "stad/train.hpp"

namespace stad::stein {

/// b = -<v, s>.
double stein_baseline(const Vector& v, const Vector& s);

/// r = div v + <v, s> with the exact Jacobian of `field` (test scale only).
double residual_target_oracle(const dyn::VelocityField& field, const Vector& x, double t,
                              const Vector* c = nullptr);

// ---------------------------------------------------------------------------
// Cutoff

enum class CutoffMode { kCosine, kBump };
const char* to_string(CutoffMode m);
CutoffMode cutoff_mode_from_string(const std::string& s);

/// kappa_R: 1 inside the R ball, 0 outside 2R, smooth and monotone on the
/// shell. R = +inf disables the cutoff; R <= 0 means "set from the cache
/// percentile" and is resolved by distill().
struct CutoffSpec {
  double R = 0.0;
  CutoffMode mode = CutoffMode::kCosine;
  double percentile = 99.5;

  bool disabled() const { return std::isinf(R); }
  static CutoffSpec none() { return {std::numeric_limits<double>::infinity()}; }
};

double cutoff(const CutoffSpec& spec, const Vector& x);
Vector cutoff_gradient(const CutoffSpec& spec, const Vector& x);

/// Percentile (0-100) of column norms, linear interpolation between order
/// statistics.
double norm_percentile(const Matrix& x, double percentile);

// ---------------------------------------------------------------------------
// Time sampling

enum class TimeProposal { kUniform, kInverseSquare };
const char* to_string(TimeProposal p);
TimeProposal time_proposal_from_string(const std::string& s);

struct TimeSample {
  double t;
  double weight;  // p(t) / q(t) for p uniform on [eps, T]
};

/// Inverse-CDF draw from q for a uniform u in [0, 1).
TimeSample sample_time_importance(TimeProposal q, double eps, double T, double u);
/// q(t) = t^-2 / (1/eps - 1/T), or 1/(T - eps) for the uniform proposal.
double proposal_density(TimeProposal q, double eps, double T, double t);

// ---------------------------------------------------------------------------
// Head

/// What the scalar head predicts and how a divergence is assembled from it.
enum class HeadKind {
  kStein,    // div = b + kappa delta
  kDirectH1, // div = delta
  kDirectH1PlusB,  // div = b + delta
};
const char* to_string(HeadKind k);
HeadKind head_kind_from_string(const std::string& s);

class DivergenceHead {
 public:
  DivergenceHead(std::shared_ptr<const net::FieldNet> net, HeadKind kind, CutoffSpec cutoff);

  const net::FieldNet& net() const { return *net_; }
  HeadKind kind() const { return kind_; }
  const CutoffSpec& cutoff_spec() const { return cutoff_; }

  /// Regularized head value delta_hat = kappa delta (kappa = 1 for direct heads).
  Vector residual(const Matrix& x, const Vector& t, const Matrix* c) const;
  /// Divergence estimate per column from precomputed drift and score.
  Vector divergence(const Matrix& x, const Vector& t, const Matrix* c, const Matrix& v,
                    const Matrix& s) const;

  /// Head checkpoint: the net plus {head_kind, cutoff} in the metadata.
  void save(const std::string& path, const std::string& schedule_json,
            const std::string& extra_json = "{}") const;
  static DivergenceHead load(const std::string& path, std::string* schedule_json = nullptr);

 private:
  std::shared_ptr<const net::FieldNet> net_;
  HeadKind kind_;
  CutoffSpec cutoff_;
};

/// delta_hat and its input gradient g = kappa grad delta + delta grad kappa.
struct HeadEval {
  Vector value;  // delta_hat
  Matrix grad;   // D x N
  Vector raw;    // delta
  Matrix raw_grad;
};
HeadEval eval_regularized(const net::FieldNet& head, const CutoffSpec& cutoff, const Matrix& x,
                          const Vector& t, const Matrix* c);

// ---------------------------------------------------------------------------
// Loss and cache

struct SteinLoss {
  double loss = 0.0;
  Vector grad;
};

/// (1/B) sum_i w_i (delta_hat_i^2 + 2 <g_i, v_i> + l ||g_i||^2) and its
/// parameter gradient.
SteinLoss stein_loss_batch(const net::FieldNet& head, const Matrix& x, const Vector& t,
                           const Matrix* c, const Matrix& v, const Vector& w,
                           const CutoffSpec& cutoff, double l);

/// Frozen teacher evaluations (x_t, t, v_t, c) with importance weights.
struct DistillCache {
  Matrix x, v, c;
  Vector t, w;
  Index size() const { return x.cols(); }
};

DistillCache build_cache(const dyn::VelocityField& teacher, const targets::Dataset& ds, Index size,
                         TimeProposal proposal, std::uint64_t seed);

struct SteinHyper {
  double l = 0.0;
  std::int64_t steps = 2000;
  int batch = 256;
  /// Cache rebuild period in steps; 0 never rebuilds.
  std::int64_t rebuild_period = 0;
  Index cache_size = 65536;
  TimeProposal proposal = TimeProposal::kInverseSquare;
  net::OptimizerConfig optimizer;
  std::uint64_t seed = 0;
};

struct DistillReport {
  std::int64_t steps = 0;
  double final_loss = 0.0;
  double R = 0.0;
  double fraction_outside_2R = 0.0;
  double wall_time_cache_s = 0.0;
  double wall_time_train_s = 0.0;
  std::vector<double> loss;
  bool aborted = false;
  std::string abort_reason;

  /// {steps, final_loss, R, fraction_outside_2R, wall_time_cache_s, wall_time_train_s}
  std::string to_json() const;
};

/// Cached Stein distillation. Resolves cutoff.R from the initial cache when
/// it is not set. Training stops early once `wall_budget_s` (> 0) of
/// training time is spent; cache time is not charged to it.
DistillReport distill(const dyn::VelocityField& teacher, const targets::Dataset& ds,
                      net::FieldNet& head, const SteinHyper& h, CutoffSpec& cutoff,
                      double wall_budget_s = 0.0);

// ---------------------------------------------------------------------------
// Monte Carlo identity checks

struct MeanEstimate {
  double mean = 0.0;
  double se = 0.0;
  Index n = 0;
};

/// Mean of r = div v + <v, s> over the columns of `x` (samples of p_t).
MeanEstimate stein_identity_check(const dyn::VelocityField& field, const Matrix& x, double t,
                                  const Matrix* c = nullptr);

struct MixedTermReport {
  MeanEstimate lhs;  // E[delta_hat r]
  MeanEstimate rhs;  // -E[<grad delta_hat, v>]
  /// |lhs - rhs| / sqrt(se_lhs^2 + se_rhs^2); 0 when both sides are exactly 0.
  double z = 0.0;
};

MixedTermReport mixed_term_identity_check(const net::FieldNet& head, const CutoffSpec& cutoff,
                                          const dyn::VelocityField& field, const Matrix& x,
                                          double t, const Matrix* c = nullptr);

}  // namespace stad::stein
