// Copyright 2026 The StAD Lab Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstdint>
#include <functional>
#include <iosfwd>
#include <optional>
#include <string>
#include <vector>

#include "stad/common.hpp"
#include "stad/rng.hpp"

namespace stad::trace {

/// Square linear map seen only through matrix-vector products.
///
/// The counter is owned by the instance: give each call context (trial, ODE
/// trajectory, thread) its own operator so accounting stays exact.
class MatVecOperator {
 public:
  using BlockFn = std::function<Matrix(const Matrix&)>;

  /// `block` maps a D x k matrix to A times it; the counter advances by k.
  MatVecOperator(Index dim, BlockFn block);

  static MatVecOperator from_matrix(Matrix a);

  Index dim() const { return dim_; }
  std::uint64_t matvecs() const { return count_; }

  Vector apply(const Vector& x);
  Matrix apply_columns(const Matrix& x);

 private:
  Index dim_;
  BlockFn block_;
  std::uint64_t count_ = 0;
};

enum class ProbeKind { kRademacher, kGaussian };
const char* to_string(ProbeKind k);
ProbeKind probe_kind_from_string(const std::string& s);

struct ProbeSpec {
  ProbeKind kind = ProbeKind::kRademacher;
  int count = 1;
  std::uint64_t seed = 0;
};

enum class Estimator { kExact, kHutchinson, kHutchpp, kXTrace };

const char* to_string(Estimator e);
std::optional<Estimator> estimator_from_string(const std::string& s);

struct TraceEstimate {
  double value = 0.0;
  std::uint64_t matvecs_used = 0;
  Estimator estimator = Estimator::kExact;
  /// Numerical rank of the sketch (Hutch++/XTrace); probe count otherwise.
  int effective_rank = 0;
};

/// D x n probe matrix. `stream` separates independent draws from one spec.
Matrix draw_probes(const ProbeSpec& spec, Index dim, std::uint64_t stream = 0);

TraceEstimate exact_trace(MatVecOperator& op);

TraceEstimate hutchinson_trace(MatVecOperator& op, const ProbeSpec& probes);
TraceEstimate hutchinson_trace(MatVecOperator& op, const Matrix& probes);

struct HutchppResult {
  TraceEstimate estimate;
  /// Orthonormal D x n basis; pass back as `cached_basis` to skip the sketch.
  Matrix basis;
};

/// Hutch++ with sketch S and residual probes G drawn from `probes`.
HutchppResult hutchpp_trace(MatVecOperator& op, const ProbeSpec& probes,
                            const Matrix* cached_basis = nullptr);
HutchppResult hutchpp_trace(MatVecOperator& op, const Matrix& sketch,
                            const Matrix& residual_probes,
                            const Matrix* cached_basis = nullptr);

/// Exchangeable leave-one-out XTrace estimator.
TraceEstimate xtrace(MatVecOperator& op, const ProbeSpec& probes);
TraceEstimate xtrace(MatVecOperator& op, const Matrix& omega);

/// Thin orthonormal factor of a Householder QR. Q always has a.cols()
/// orthonormal columns, even when `a` is rank deficient.
struct ThinQR {
  Matrix q;
  Matrix r;
  int effective_rank = 0;
};
ThinQR householder_qr(const Matrix& a, double rank_tol = 1e-12);

// ---------------------------------------------------------------------------
// Random-matrix benchmark

struct BenchmarkConfig {
  std::vector<int> dims{4, 16, 64, 256};
  /// Matvec budgets m. Hutchinson uses n = m probes, Hutch++ n = floor(m/3),
  /// XTrace n = floor(m/2); budgets that leave n < 1 or n > D are skipped.
  std::vector<int> budgets{1, 2, 4, 8, 16, 32, 64, 128, 256, 512};
  /// Matrices per D, parallel to `dims`.
  std::vector<int> trials{65536, 16384, 4096, 1024};
  bool psd = true;
  std::uint64_t seed = 0;
  std::vector<Estimator> estimators{Estimator::kHutchinson, Estimator::kHutchpp,
                                    Estimator::kXTrace};
};

struct BenchmarkRow {
  Estimator estimator;
  int dim;
  int budget;
  bool psd;
  int trials;
  double mae;
  std::uint64_t seed;
};

/// Entries A_ij ~ N(0,1) or Half-N(0,1) when psd is set.
Matrix random_benchmark_matrix(Index dim, bool psd, Rng& rng);

/// Probe count used by `e` under budget m; 0 if the budget is infeasible.
int probes_for_budget(Estimator e, int budget, int dim);

std::vector<BenchmarkRow> random_matrix_benchmark(const BenchmarkConfig& cfg);

void write_benchmark_csv(std::ostream& os, const std::vector<BenchmarkRow>& rows);

}  // namespace stad::trace
