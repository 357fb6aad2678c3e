// Copyright 2026 The StAD Lab Authors
// SPDX-License-Identifier: Apache-2.0

#include "stad/trace.hpp"

#include <algorithm>
#include <cmath>
#include <memory>
#include <ostream>

#include "stad/parallel.hpp"

namespace stad::trace {

MatVecOperator::MatVecOperator(Index dim, BlockFn block) : dim_(dim), block_(std::move(block)) {
  if (dim_ < 1) fail(ErrorCode::kDimensionMismatch, "operator dimension must be >= 1");
}

MatVecOperator MatVecOperator::from_matrix(Matrix a) {
  if (a.rows() != a.cols())
    fail(ErrorCode::kDimensionMismatch, "operator matrix must be square");
  auto shared = std::make_shared<const Matrix>(std::move(a));
  const Index dim = shared->rows();
  return MatVecOperator(dim, [shared](const Matrix& x) -> Matrix { return (*shared) * x; });
}

Vector MatVecOperator::apply(const Vector& x) {
  Matrix out = apply_columns(x);
  return out.col(0);
}

Matrix MatVecOperator::apply_columns(const Matrix& x) {
  if (x.rows() != dim_)
    fail(ErrorCode::kDimensionMismatch,
         "probe has " + std::to_string(x.rows()) + " rows, operator dim " + std::to_string(dim_));
  count_ += static_cast<std::uint64_t>(x.cols());
  Matrix y = block_(x);
  if (y.rows() != dim_ || y.cols() != x.cols())
    fail(ErrorCode::kDimensionMismatch, "operator returned wrong shape");
  if (!y.allFinite()) fail(ErrorCode::kNonFiniteOperator, "operator produced non-finite output");
  return y;
}

const char* to_string(ProbeKind k) {
  return k == ProbeKind::kRademacher ? "rademacher" : "gaussian";
}

ProbeKind probe_kind_from_string(const std::string& s) {
  if (s == "rademacher") return ProbeKind::kRademacher;
  if (s == "gaussian") return ProbeKind::kGaussian;
  fail(ErrorCode::kConfigError, "unknown probe kind '" + s + "'");
}

const char* to_string(Estimator e) {
  switch (e) {
    case Estimator::kExact: return "exact";
    case Estimator::kHutchinson: return "hutchinson";
    case Estimator::kHutchpp: return "hutchpp";
    case Estimator::kXTrace: return "xtrace";
  }
  return "unknown";
}

std::optional<Estimator> estimator_from_string(const std::string& s) {
  for (Estimator e : {Estimator::kExact, Estimator::kHutchinson, Estimator::kHutchpp,
                      Estimator::kXTrace})
    if (s == to_string(e)) return e;
  return std::nullopt;
}

Matrix draw_probes(const ProbeSpec& spec, Index dim, std::uint64_t stream) {
  if (spec.count < 1) fail(ErrorCode::kConfigError, "probe count must be >= 1");
  Rng rng(spec.seed, {0x70726f6265ULL, stream});
  Matrix p(dim, spec.count);
  for (Index j = 0; j < p.cols(); ++j)
    for (Index i = 0; i < dim; ++i)
      p(i, j) = spec.kind == ProbeKind::kRademacher ? rng.rademacher() : rng.normal();
  return p;
}

ThinQR householder_qr(const Matrix& a, double rank_tol) {
  ThinQR out;
  const Index m = a.rows();
  const Index n = a.cols();
  Eigen::HouseholderQR<Matrix> qr(a);
  out.q = qr.householderQ() * Matrix::Identity(m, std::min(m, n));
  out.r = qr.matrixQR().topRows(std::min(m, n)).triangularView<Eigen::Upper>();
  double rmax = 0.0;
  for (Index j = 0; j < std::min(m, n); ++j) rmax = std::max(rmax, std::abs(out.r(j, j)));
  int rank = 0;
  if (rmax > 0.0)
    for (Index j = 0; j < std::min(m, n); ++j)
      if (std::abs(out.r(j, j)) > rank_tol * rmax) ++rank;
  out.effective_rank = rank;
  return out;
}

TraceEstimate exact_trace(MatVecOperator& op) {
  const auto before = op.matvecs();
  Matrix cols = op.apply_columns(Matrix::Identity(op.dim(), op.dim()));
  TraceEstimate est;
  est.value = cols.trace();
  est.matvecs_used = op.matvecs() - before;
  est.estimator = Estimator::kExact;
  est.effective_rank = static_cast<int>(op.dim());
  return est;
}

TraceEstimate hutchinson_trace(MatVecOperator& op, const ProbeSpec& probes) {
  return hutchinson_trace(op, draw_probes(probes, op.dim()));
}

TraceEstimate hutchinson_trace(MatVecOperator& op, const Matrix& probes) {
  if (probes.cols() < 1) fail(ErrorCode::kConfigError, "need at least one probe");
  const auto before = op.matvecs();
  Matrix ap = op.apply_columns(probes);
  TraceEstimate est;
  est.value = probes.cwiseProduct(ap).sum() / static_cast<double>(probes.cols());
  est.matvecs_used = op.matvecs() - before;
  est.estimator = Estimator::kHutchinson;
  est.effective_rank = static_cast<int>(probes.cols());
  return est;
}

HutchppResult hutchpp_trace(MatVecOperator& op, const ProbeSpec& probes,
                            const Matrix* cached_basis) {
  return hutchpp_trace(op, draw_probes(probes, op.dim(), 1), draw_probes(probes, op.dim(), 2),
                       cached_basis);
}

HutchppResult hutchpp_trace(MatVecOperator& op, const Matrix& sketch,
                            const Matrix& residual_probes, const Matrix* cached_basis) {
  const Index n = residual_probes.cols();
  if (n < 1) fail(ErrorCode::kConfigError, "Hutch++ needs at least one probe");
  if (n > op.dim()) fail(ErrorCode::kConfigError, "Hutch++ probe count exceeds dimension");
  const auto before = op.matvecs();

  HutchppResult out;
  if (cached_basis != nullptr) {
    if (cached_basis->rows() != op.dim())
      fail(ErrorCode::kDimensionMismatch, "cached basis has wrong row count");
    out.basis = *cached_basis;
    out.estimate.effective_rank = static_cast<int>(cached_basis->cols());
  } else {
    if (sketch.rows() != op.dim() || sketch.cols() > op.dim())
      fail(ErrorCode::kDimensionMismatch, "sketch shape does not match operator");
    ThinQR qr = householder_qr(op.apply_columns(sketch));
    out.basis = std::move(qr.q);
    out.estimate.effective_rank = qr.effective_rank;
  }
  const Matrix& q = out.basis;

  Matrix aq = op.apply_columns(q);
  double low_rank = (q.transpose() * aq).trace();

  Matrix deflated = residual_probes - q * (q.transpose() * residual_probes);
  Matrix a_deflated = op.apply_columns(deflated);
  // G^T (I-QQ^T) A (I-QQ^T) G, using the projected probes on both sides.
  double residual = deflated.cwiseProduct(a_deflated).sum() / static_cast<double>(n);

  out.estimate.value = low_rank + residual;
  out.estimate.matvecs_used = op.matvecs() - before;
  out.estimate.estimator = Estimator::kHutchpp;
  return out;
}

TraceEstimate xtrace(MatVecOperator& op, const ProbeSpec& probes) {
  return xtrace(op, draw_probes(probes, op.dim(), 3));
}

namespace {

// Leave-one-out estimates given an orthonormal basis Q of range(A * Omega).
//   H = Q^T A Q, W = Q^T Omega, T = (AQ)^T Omega, C = Q^T A Omega.
// For probe i the basis of range(A * Omega_{-i}) is Q (I - s s^T), where s is
// the unit direction of span(Q) orthogonal to every other sketch column (or
// Q itself when the remaining columns still span it). With c = (I - s s^T) w_i
// and u = w - Q c the deflated probe, the two pieces of estimator i are
//   Tr(Q_i^T A Q_i)         = Tr(H) - s^T H s
//   u^T A u                 = (w - c)^T C_i - T_i^T c + c^T H c
// The residual piece is rescaled so that u has squared norm equal to the
// dimension of the deflated complement, which makes the estimate exact when A
// acts as a multiple of the identity there.
double xtrace_average(const Matrix& h, const Matrix& w, const Matrix& t, const Matrix& c,
                      const std::vector<std::optional<Vector>>& dirs, const Matrix& omega) {
  const Index n = w.cols();
  const double dim = static_cast<double>(omega.rows());
  const double tr_h = h.trace();
  double sum = 0.0;
  for (Index i = 0; i < n; ++i) {
    Vector wi = w.col(i);
    Vector ci = wi;
    double est = tr_h;
    double basis_rank = static_cast<double>(h.rows());
    if (dirs[static_cast<std::size_t>(i)]) {
      const Vector& s = *dirs[static_cast<std::size_t>(i)];
      ci -= s * s.dot(wi);
      est -= s.dot(h * s);
      basis_rank -= 1.0;
    }
    double residual = (wi - ci).dot(c.col(i)) - t.col(i).dot(ci) + ci.dot(h * ci);
    const double probe_sq = omega.col(i).squaredNorm();
    const double deflated_sq = probe_sq - wi.squaredNorm() + (wi - ci).squaredNorm();
    if (deflated_sq > 1e-12 * probe_sq) residual *= (dim - basis_rank) / deflated_sq;
    sum += est + residual;
  }
  return sum / static_cast<double>(n);
}

}  // namespace

TraceEstimate xtrace(MatVecOperator& op, const Matrix& omega) {
  const Index n = omega.cols();
  if (n < 1 || n > op.dim()) fail(ErrorCode::kConfigError, "XTrace needs 1 <= n <= D probes");
  if (omega.rows() != op.dim()) fail(ErrorCode::kDimensionMismatch, "probe rows != operator dim");
  const auto before = op.matvecs();
  constexpr double kRankTol = 1e-10;

  Matrix y = op.apply_columns(omega);
  ThinQR qr = householder_qr(y, kRankTol);

  TraceEstimate est;
  est.estimator = Estimator::kXTrace;
  std::vector<std::optional<Vector>> dirs(static_cast<std::size_t>(n));

  if (qr.effective_rank == n) {
    const Matrix& q = qr.q;
    Matrix z = op.apply_columns(q);
    Matrix h = q.transpose() * z;
    Matrix w = q.transpose() * omega;
    Matrix t = z.transpose() * omega;
    // Columns of R^{-T}: column i is orthogonal to R e_j for all j != i.
    Matrix rinv_t = qr.r.transpose().triangularView<Eigen::Lower>().solve(Matrix::Identity(n, n));
    for (Index i = 0; i < n; ++i)
      dirs[static_cast<std::size_t>(i)] = rinv_t.col(i).normalized();
    est.value = xtrace_average(h, w, t, qr.r, dirs, omega);
    est.effective_rank = static_cast<int>(n);
  } else {
    // Singular R: work on a rank-revealing basis of the sketch range and decide
    // per probe whether dropping it shrinks that range.
    Eigen::ColPivHouseholderQR<Matrix> piv(y);
    piv.setThreshold(kRankTol);
    const Index k = piv.rank();
    Matrix q = (piv.householderQ() * Matrix::Identity(op.dim(), n)).leftCols(k);
    Matrix z = k > 0 ? op.apply_columns(q) : Matrix(op.dim(), 0);
    Matrix h = q.transpose() * z;
    Matrix w = q.transpose() * omega;
    Matrix t = z.transpose() * omega;
    Matrix c = q.transpose() * y;
    for (Index i = 0; i < n && k > 0; ++i) {
      Matrix others(k, n - 1);
      for (Index j = 0, col = 0; j < n; ++j)
        if (j != i) others.col(col++) = c.col(j);
      Eigen::JacobiSVD<Matrix> svd(others, Eigen::ComputeFullU);
      const Vector& sv = svd.singularValues();
      const double smax = sv.size() > 0 ? sv(0) : 0.0;
      Index r = 0;
      for (Index j = 0; j < sv.size(); ++j)
        if (sv(j) > kRankTol * std::max(smax, 1e-300)) ++r;
      if (r < k) dirs[static_cast<std::size_t>(i)] = svd.matrixU().col(k - 1);
    }
    est.value = xtrace_average(h, w, t, c, dirs, omega);
    est.effective_rank = static_cast<int>(k);
  }
  est.matvecs_used = op.matvecs() - before;
  return est;
}

// ---------------------------------------------------------------------------

Matrix random_benchmark_matrix(Index dim, bool psd, Rng& rng) {
  Matrix a(dim, dim);
  for (Index j = 0; j < dim; ++j)
    for (Index i = 0; i < dim; ++i) {
      double g = rng.normal();
      a(i, j) = psd ? std::abs(g) : g;
    }
  return a;
}

int probes_for_budget(Estimator e, int budget, int dim) {
  int n = 0;
  switch (e) {
    case Estimator::kExact: return budget >= dim ? dim : 0;
    case Estimator::kHutchinson: return budget;
    case Estimator::kHutchpp: n = budget / 3; break;
    case Estimator::kXTrace: n = budget / 2; break;
  }
  return (n >= 1 && n <= dim) ? n : 0;
}

std::vector<BenchmarkRow> random_matrix_benchmark(const BenchmarkConfig& cfg) {
  if (cfg.trials.size() != cfg.dims.size())
    fail(ErrorCode::kConfigError, "bench: trials must list one batch size per dimension");
  std::vector<BenchmarkRow> rows;
  for (std::size_t di = 0; di < cfg.dims.size(); ++di) {
    const int dim = cfg.dims[di];
    const int trials = cfg.trials[di];
    if (dim < 1 || trials < 1) fail(ErrorCode::kConfigError, "bench: dims and trials must be >= 1");

    struct Combo {
      Estimator est;
      int budget;
      int n;
    };
    std::vector<Combo> combos;
    for (Estimator e : cfg.estimators)
      for (int m : cfg.budgets) {
        int n = probes_for_budget(e, m, dim);
        if (n > 0) combos.push_back({e, m, n});
      }
    if (combos.empty()) continue;

    std::vector<double> errors(static_cast<std::size_t>(trials) * combos.size());
    parallel_for(static_cast<std::size_t>(trials), [&](std::size_t trial) {
      Rng mat_rng(cfg.seed, {0x6d6174ULL, static_cast<std::uint64_t>(dim), trial,
                             static_cast<std::uint64_t>(cfg.psd)});
      Matrix a = random_benchmark_matrix(dim, cfg.psd, mat_rng);
      const double exact = a.trace();
      for (std::size_t ci = 0; ci < combos.size(); ++ci) {
        const Combo& combo = combos[ci];
        ProbeSpec spec;
        spec.count = combo.n;
        spec.seed = Rng(cfg.seed, {static_cast<std::uint64_t>(combo.est),
                                   static_cast<std::uint64_t>(dim), trial,
                                   static_cast<std::uint64_t>(combo.budget)})();
        auto op = MatVecOperator::from_matrix(a);
        double value = 0.0;
        switch (combo.est) {
          case Estimator::kExact: value = exact_trace(op).value; break;
          case Estimator::kHutchinson: value = hutchinson_trace(op, spec).value; break;
          case Estimator::kHutchpp: value = hutchpp_trace(op, spec).estimate.value; break;
          case Estimator::kXTrace: value = xtrace(op, spec).value; break;
        }
        errors[trial * combos.size() + ci] = std::abs(value - exact);
      }
    });

    for (std::size_t ci = 0; ci < combos.size(); ++ci) {
      double sum = 0.0;
      for (int trial = 0; trial < trials; ++trial)
        sum += errors[static_cast<std::size_t>(trial) * combos.size() + ci];
      rows.push_back({combos[ci].est, dim, combos[ci].budget, cfg.psd, trials,
                      sum / static_cast<double>(trials), cfg.seed});
    }
  }
  return rows;
}

void write_benchmark_csv(std::ostream& os, const std::vector<BenchmarkRow>& rows) {
  os << "estimator,D,m,psd,trials,mae,seed\n";
  os.precision(17);
  for (const auto& r : rows)
    os << to_string(r.estimator) << ',' << r.dim << ',' << r.budget << ','
       << (r.psd ? "true" : "false") << ',' << r.trials << ',' << r.mae << ',' << r.seed
       << '\n';
}

}  // namespace stad::trace
