// Copyright 2026 The StAD Lab Authors
// SPDX-License-Identifier: Apache-2.0

#include <gtest/gtest.h>

#include <cmath>
#include <limits>
#include <sstream>

#include "stad/rng.hpp"
#include "stad/trace.hpp"

using namespace stad;
using namespace stad::trace;

namespace {

// Leave-one-out XTrace written straight from its definition: for every probe
// build an explicit orthonormal basis of A * Omega_{-i} with an SVD and apply
// the deflated estimator with dense projectors.
double xtrace_bruteforce(const Matrix& a, const Matrix& omega) {
  const Index d = a.rows();
  const Index n = omega.cols();
  Matrix y = a * omega;
  double sum = 0.0;
  for (Index i = 0; i < n; ++i) {
    Matrix others(d, n - 1);
    for (Index j = 0, c = 0; j < n; ++j)
      if (j != i) others.col(c++) = y.col(j);
    Matrix p = Matrix::Zero(d, d);
    Index rank = 0;
    if (n > 1) {
      Eigen::JacobiSVD<Matrix> svd(others, Eigen::ComputeThinU);
      const Vector& sv = svd.singularValues();
      for (Index k = 0; k < sv.size(); ++k)
        if (sv(k) > 1e-10 * sv(0)) {
          p += svd.matrixU().col(k) * svd.matrixU().col(k).transpose();
          ++rank;
        }
    }
    Matrix defl = Matrix::Identity(d, d) - p;
    Vector w = omega.col(i);
    Vector u = defl * w;
    double residual = u.dot(a * u);
    // Deflated probe rescaled to the squared norm of its complement's dimension.
    if (u.squaredNorm() > 1e-12 * w.squaredNorm())
      residual *= static_cast<double>(d - rank) / u.squaredNorm();
    sum += (p * a).trace() + residual;
  }
  return sum / static_cast<double>(n);
}

Matrix rank_r_matrix(Index d, Index r, Rng& rng) {
  return normal_matrix(rng, d, r) * normal_matrix(rng, r, d);
}

}  // namespace

TEST(Rng, SplitStreamsAreReproducibleAndDistinct) {
  Rng a(7, {1, 2});
  Rng b(7, {1, 2});
  Rng c(7, {1, 3});
  for (int i = 0; i < 16; ++i) {
    auto va = a();
    EXPECT_EQ(va, b());
    EXPECT_NE(va, c());
  }
  Rng parent(3);
  Rng child1 = parent.split(5);
  parent();
  parent();
  Rng child2 = parent.split(5);
  EXPECT_EQ(child1(), child2());
}

TEST(Probes, RademacherEntriesAndGaussianVariance) {
  ProbeSpec spec{ProbeKind::kRademacher, 64, 11};
  Matrix p = draw_probes(spec, 32);
  EXPECT_TRUE((p.array().abs() == 1.0).all());

  spec.kind = ProbeKind::kGaussian;
  spec.count = 2000;
  Matrix g = draw_probes(spec, 50);
  const double var = g.array().square().mean();
  // 1e5 unit normals: variance std error ~ sqrt(2/1e5) ~ 0.0045.
  EXPECT_NEAR(var, 1.0, 0.02);
}

TEST(ExactTrace, IdentityAndDiagonal) {
  auto id = MatVecOperator::from_matrix(Matrix::Identity(4, 4));
  auto e = exact_trace(id);
  EXPECT_DOUBLE_EQ(e.value, 4.0);
  EXPECT_EQ(e.matvecs_used, 4u);

  auto diag = MatVecOperator::from_matrix(Vector::LinSpaced(3, 1, 3).asDiagonal());
  e = exact_trace(diag);
  EXPECT_DOUBLE_EQ(e.value, 6.0);
  EXPECT_EQ(e.matvecs_used, 3u);
}

TEST(ExactTrace, DenseMatchesDiagonalSum) {
  Rng rng(1);
  Matrix a = normal_matrix(rng, 8, 8);
  double direct = 0.0;
  for (Index i = 0; i < 8; ++i) direct += a(i, i);
  auto op = MatVecOperator::from_matrix(a);
  EXPECT_NEAR(exact_trace(op).value, direct, 1e-12);
}

TEST(ExactTrace, NonFiniteOperatorIsReported) {
  MatVecOperator op(3, [](const Matrix& x) {
    Matrix y = x;
    y(0, 0) = std::numeric_limits<double>::quiet_NaN();
    return y;
  });
  try {
    exact_trace(op);
    FAIL() << "expected NonFiniteOperator";
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), ErrorCode::kNonFiniteOperator);
  }
}

TEST(Hutchinson, DiagonalIsExactUnderRademacher) {
  auto op = MatVecOperator::from_matrix(Vector::LinSpaced(3, 1, 3).asDiagonal());
  for (std::uint64_t seed = 0; seed < 8; ++seed) {
    auto e = hutchinson_trace(op, ProbeSpec{ProbeKind::kRademacher, 1, seed});
    EXPECT_DOUBLE_EQ(e.value, 6.0);
    EXPECT_EQ(e.matvecs_used, 1u);
  }
}

TEST(Hutchinson, EnumeratedSignPatternsAverageToTrace) {
  Matrix a(2, 2);
  a << 1, 2, 3, 4;
  // All four Rademacher patterns, by enumeration.
  double total = 0.0;
  for (double s0 : {-1.0, 1.0})
    for (double s1 : {-1.0, 1.0}) {
      Vector n(2);
      n << s0, s1;
      total += n.dot(a * n);
    }
  EXPECT_DOUBLE_EQ(total / 4.0, 5.0);

  Matrix probes(2, 2);
  probes << 1, 1, 1, -1;
  auto op = MatVecOperator::from_matrix(a);
  auto e = hutchinson_trace(op, probes);
  EXPECT_DOUBLE_EQ(e.value, 5.0);
  EXPECT_EQ(e.matvecs_used, 2u);
}

TEST(Hutchinson, ProbeDimensionMismatch) {
  auto op = MatVecOperator::from_matrix(Matrix::Identity(3, 3));
  try {
    hutchinson_trace(op, Matrix::Ones(4, 1));
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), ErrorCode::kDimensionMismatch);
  }
}

TEST(Hutchinson, UnbiasedOverSeeds) {
  Rng rng(2024);
  Matrix a = normal_matrix(rng, 64, 64);
  const double exact = a.trace();
  const int seeds = 1000;
  std::vector<double> est(seeds);
  for (int s = 0; s < seeds; ++s) {
    auto op = MatVecOperator::from_matrix(a);
    est[s] = hutchinson_trace(op, ProbeSpec{ProbeKind::kRademacher, 512,
                                            static_cast<std::uint64_t>(s)})
                 .value;
  }
  double mean = 0.0;
  for (double v : est) mean += v;
  mean /= seeds;
  double var = 0.0;
  for (double v : est) var += (v - mean) * (v - mean);
  var /= (seeds - 1);
  EXPECT_LE(std::abs(mean - exact), 3.0 * std::sqrt(var / seeds));
}

TEST(HouseholderQR, OrthonormalEvenWhenRankDeficient) {
  Matrix a = Matrix::Zero(6, 3);
  a.col(0) << 1, 2, 3, 4, 5, 6;
  a.col(2) = 2.0 * a.col(0);
  ThinQR qr = householder_qr(a);
  EXPECT_EQ(qr.effective_rank, 1);
  EXPECT_LE((qr.q.transpose() * qr.q - Matrix::Identity(3, 3)).norm(), 1e-10);
  EXPECT_LE((qr.q * qr.r - a).norm(), 1e-10);
}

TEST(Hutchpp, RankOneIsExact) {
  Vector u(2);
  u << 1, 2;
  auto op = MatVecOperator::from_matrix(u * u.transpose());
  for (std::uint64_t seed = 0; seed < 10; ++seed) {
    auto res = hutchpp_trace(op, ProbeSpec{ProbeKind::kRademacher, 1, seed});
    // (I - QQ^T) A = 0 when Q spans u.
    Matrix defl = (Matrix::Identity(2, 2) - res.basis * res.basis.transpose()) * (u * u.transpose());
    EXPECT_LE(defl.norm(), 1e-12);
    EXPECT_NEAR(res.estimate.value, 5.0, 1e-12);
  }
}

TEST(Hutchpp, FullSketchOfIdentityIsExactForEverySeed) {
  // Rademacher 4x4 sketches are singular about a third of the time; the
  // Householder basis stays complete so the estimate is still exact.
  int singular_seen = 0;
  for (std::uint64_t seed = 0; seed < 40; ++seed) {
    auto op = MatVecOperator::from_matrix(Matrix::Identity(4, 4));
    auto res = hutchpp_trace(op, ProbeSpec{ProbeKind::kRademacher, 4, seed});
    EXPECT_NEAR(res.estimate.value, 4.0, 1e-12);
    if (res.estimate.effective_rank < 4) ++singular_seen;
  }
  EXPECT_GT(singular_seen, 0);
}

TEST(Hutchpp, MatvecAccountingAndBasisReuse) {
  Rng rng(5);
  Matrix a = normal_matrix(rng, 20, 20);
  auto op = MatVecOperator::from_matrix(a);
  ProbeSpec spec{ProbeKind::kRademacher, 4, 9};
  auto fresh = hutchpp_trace(op, spec);
  EXPECT_EQ(fresh.estimate.matvecs_used, 12u);
  EXPECT_EQ(op.matvecs(), 12u);
  EXPECT_LE((fresh.basis.transpose() * fresh.basis - Matrix::Identity(4, 4)).norm(), 1e-10);

  auto reused = hutchpp_trace(op, spec, &fresh.basis);
  EXPECT_EQ(reused.estimate.matvecs_used, 8u);
  EXPECT_EQ(op.matvecs(), 20u);
  // Same probes, same basis: identical estimate.
  EXPECT_NEAR(reused.estimate.value, fresh.estimate.value, 1e-12);
}

TEST(Hutchpp, ZeroSketchColumnReportsEffectiveRank) {
  Matrix a = Matrix::Zero(5, 5);
  a(0, 0) = 3.0;
  Matrix sketch = Matrix::Zero(5, 2);
  sketch(0, 0) = 1.0;  // second column maps to zero
  Matrix g = Matrix::Identity(5, 2);
  auto op = MatVecOperator::from_matrix(a);
  auto res = hutchpp_trace(op, sketch, g);
  EXPECT_EQ(res.estimate.effective_rank, 1);
  EXPECT_NEAR(res.estimate.value, 3.0, 1e-12);
}

TEST(XTrace, IdentityWithNonsingularSketch) {
  // Seed chosen so the 4x4 Rademacher sketch is nonsingular.
  for (std::uint64_t seed = 0; seed < 200; ++seed) {
    ProbeSpec spec{ProbeKind::kRademacher, 4, seed};
    Matrix omega = draw_probes(spec, 4, 3);
    if (std::abs(omega.determinant()) < 0.5) continue;
    auto op = MatVecOperator::from_matrix(Matrix::Identity(4, 4));
    auto e = xtrace(op, spec);
    EXPECT_NEAR(e.value, 4.0, 1e-10);
    EXPECT_EQ(e.matvecs_used, 8u);
    return;
  }
  FAIL() << "no nonsingular sketch found";
}

TEST(XTrace, RankOneIsExactAgainstExactTrace) {
  Vector u(2);
  u << 1, 2;
  Matrix a = u * u.transpose();
  auto ref_op = MatVecOperator::from_matrix(a);
  const double exact = exact_trace(ref_op).value;
  for (std::uint64_t seed = 0; seed < 10; ++seed) {
    auto op = MatVecOperator::from_matrix(a);
    auto e = xtrace(op, ProbeSpec{ProbeKind::kRademacher, 2, seed});
    EXPECT_NEAR(e.value, exact, 1e-10);
    EXPECT_EQ(e.effective_rank, 1);
  }
}

TEST(XTrace, MatchesLeaveOneOutDefinition) {
  Rng rng(77);
  for (int trial = 0; trial < 20; ++trial) {
    const Index d = 12;
    const Index n = 1 + trial % 6;
    Matrix a = normal_matrix(rng, d, d);
    Matrix omega = draw_probes(ProbeSpec{ProbeKind::kRademacher, static_cast<int>(n),
                                         static_cast<std::uint64_t>(trial)},
                               d);
    auto op = MatVecOperator::from_matrix(a);
    auto e = xtrace(op, omega);
    EXPECT_NEAR(e.value, xtrace_bruteforce(a, omega), 1e-9 * (1 + std::abs(e.value)));
    EXPECT_EQ(e.matvecs_used, static_cast<std::uint64_t>(2 * n));
  }
}

TEST(XTrace, SingularSketchMatchesLeaveOneOutDefinition) {
  Rng rng(78);
  const Index d = 8;
  Matrix a = rank_r_matrix(d, 3, rng);
  Matrix omega = draw_probes(ProbeSpec{ProbeKind::kRademacher, 5, 4}, d);
  auto op = MatVecOperator::from_matrix(a);
  auto e = xtrace(op, omega);
  EXPECT_EQ(e.effective_rank, 3);
  EXPECT_NEAR(e.value, xtrace_bruteforce(a, omega), 1e-9);
  EXPECT_NEAR(e.value, a.trace(), 1e-8);

  // Duplicate probe column on a full-rank matrix.
  Matrix b = normal_matrix(rng, d, d);
  omega.col(1) = omega.col(0);
  auto op2 = MatVecOperator::from_matrix(b);
  auto e2 = xtrace(op2, omega);
  EXPECT_EQ(e2.effective_rank, 4);
  EXPECT_NEAR(e2.value, xtrace_bruteforce(b, omega), 1e-9 * (1 + std::abs(e2.value)));
}

TEST(Invariants, LowRankExactness) {
  Rng rng(99);
  for (int trial = 0; trial < 10; ++trial) {
    const Index d = 16;
    const Index r = 1 + trial % 4;
    Matrix a = rank_r_matrix(d, r, rng);
    auto op1 = MatVecOperator::from_matrix(a);
    auto hpp = hutchpp_trace(op1, ProbeSpec{ProbeKind::kRademacher, static_cast<int>(r),
                                            static_cast<std::uint64_t>(trial)});
    EXPECT_NEAR(hpp.estimate.value, a.trace(), 1e-8);
    // Leave-one-out needs one spare column to still span range(A).
    auto op2 = MatVecOperator::from_matrix(a);
    auto xt = xtrace(op2, ProbeSpec{ProbeKind::kRademacher, static_cast<int>(r + 1),
                                    static_cast<std::uint64_t>(trial)});
    EXPECT_NEAR(xt.value, a.trace(), 1e-8);
  }
}

TEST(Invariants, LinearityUnderSharedSeeds) {
  Rng rng(3);
  Matrix a = normal_matrix(rng, 10, 10);
  const double alpha = -2.5;
  ProbeSpec spec{ProbeKind::kRademacher, 3, 42};
  auto op_a = MatVecOperator::from_matrix(a);
  auto op_b = MatVecOperator::from_matrix(alpha * a);
  EXPECT_NEAR(hutchinson_trace(op_b, spec).value, alpha * hutchinson_trace(op_a, spec).value,
              1e-10);
  EXPECT_NEAR(hutchpp_trace(op_b, spec).estimate.value,
              alpha * hutchpp_trace(op_a, spec).estimate.value, 1e-10);
  EXPECT_NEAR(xtrace(op_b, spec).value, alpha * xtrace(op_a, spec).value, 1e-10);
}

TEST(Benchmark, HutchppAtFullRankConverges) {
  BenchmarkConfig cfg;
  cfg.dims = {4, 16};
  cfg.trials = {200, 100};
  cfg.budgets = {12, 48};
  cfg.estimators = {Estimator::kHutchpp};
  for (bool psd : {true, false}) {
    cfg.psd = psd;
    for (const auto& row : random_matrix_benchmark(cfg))
      if (row.budget == 3 * row.dim) EXPECT_LT(row.mae, 1e-8) << "D=" << row.dim;
  }
}

TEST(Benchmark, PsdOrderingAtD16) {
  BenchmarkConfig cfg;
  cfg.dims = {16};
  cfg.trials = {2000};
  cfg.budgets = {16};
  cfg.psd = true;
  cfg.seed = 1;
  auto rows = random_matrix_benchmark(cfg);
  ASSERT_EQ(rows.size(), 3u);
  double h = rows[0].mae, hpp = rows[1].mae, xt = rows[2].mae;
  EXPECT_LT(xt, hpp);
  EXPECT_LT(hpp, h);
}

TEST(Benchmark, HutchinsonWinsAtTinyBudgetNonPsd) {
  BenchmarkConfig cfg;
  cfg.dims = {64};
  cfg.trials = {1000};
  cfg.budgets = {1, 2, 3, 4};
  cfg.psd = false;
  cfg.seed = 2;
  auto rows = random_matrix_benchmark(cfg);
  double best_hutch = 1e300, best_other = 1e300;
  for (const auto& r : rows) {
    if (r.budget > 4) continue;
    if (r.estimator == Estimator::kHutchinson)
      best_hutch = std::min(best_hutch, r.mae);
    else
      best_other = std::min(best_other, r.mae);
  }
  double hutch_m1 = rows[0].mae;
  EXPECT_EQ(rows[0].budget, 1);
  EXPECT_LT(best_hutch, best_other);
  EXPECT_GT(hutch_m1, 0.0);
}

TEST(Benchmark, CsvLayout) {
  BenchmarkConfig cfg;
  cfg.dims = {4};
  cfg.trials = {10};
  cfg.budgets = {4};
  auto rows = random_matrix_benchmark(cfg);
  std::ostringstream os;
  write_benchmark_csv(os, rows);
  std::string s = os.str();
  EXPECT_EQ(s.substr(0, s.find('\n')), "estimator,D,m,psd,trials,mae,seed");
  EXPECT_NE(s.find("hutchinson,4,4,true,10,"), std::string::npos);
}
