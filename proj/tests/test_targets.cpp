// Copyright 2026 The StAD Lab Authors
// SPDX-License-Identifier: Apache-2.0

#include <gtest/gtest.h>

#include <cmath>
#include <cstring>
#include <filesystem>
#include <numbers>

#include "stad/targets.hpp"

using namespace stad;
using namespace stad::targets;

namespace {

Vector v2(double a, double b) {
  Vector v(2);
  v << a, b;
  return v;
}

// Central differences of log_density, coordinate by coordinate.
Vector fd_score(const GaussianMixture& g, const Vector& x, const Vector* c) {
  const double h = 1e-5;
  Vector out(x.size());
  for (Index i = 0; i < x.size(); ++i) {
    Vector xp = x, xm = x;
    xp(i) += h;
    xm(i) -= h;
    out(i) = (g.log_density(xp, c) - g.log_density(xm, c)) / (2 * h);
  }
  return out;
}

void check_score_consistency(const GaussianMixture& g, std::uint64_t seed) {
  Rng rng(seed);
  Matrix ctx = normal_matrix(rng, g.context_dim(), 200);
  Matrix xs = g.sample(200, rng, g.context_dim() > 0 ? &ctx : nullptr);
  for (Index i = 0; i < 200; ++i) {
    Vector c = ctx.col(i);
    const Vector* cp = g.context_dim() > 0 ? &c : nullptr;
    Vector x = xs.col(i);
    Vector s = g.score(x, cp);
    Vector fd = fd_score(g, x, cp);
    EXPECT_LE((s - fd).norm(), 1e-6 * std::max(1.0, fd.norm())) << "point " << i;
  }
}

}  // namespace

TEST(Targets, StandardNormalAtOrigin) {
  auto g = make_gaussian(Vector::Zero(2), Matrix::Identity(2, 2));
  EXPECT_NEAR(g.log_density(Vector::Zero(2)), -std::log(2 * std::numbers::pi), 1e-14);
  EXPECT_NEAR(g.log_density(Vector::Zero(2)), -1.8379, 1e-4);
}

TEST(Targets, SymmetricMixtureAtZero) {
  Matrix means(1, 2);
  means << -2, 2;
  auto g = make_isotropic_mixture(means, 1.0);
  const double expected = std::log(std::exp(-2.0) / std::sqrt(2 * std::numbers::pi));
  EXPECT_NEAR(g.log_density(Vector::Zero(1)), expected, 1e-14);
  EXPECT_NEAR(expected, -2.9189, 1e-4);
}

TEST(Targets, ConditionalGaussianModeHasZeroScore) {
  Rng rng(3);
  Matrix w = normal_matrix(rng, 3, 2);
  Matrix s = Matrix::Identity(3, 3) * 0.5;
  auto g = make_conditional_gaussian(w, s);
  Vector c = normal_vector(rng, 2);
  Vector mu = w * c;
  EXPECT_LE(g.score(mu, &c).norm(), 1e-14);
}

TEST(Targets, ScoreMatchesLogDensityGradient) {
  Matrix cov(2, 2);
  cov << 2.0, 0.6, 0.6, 0.5;
  check_score_consistency(make_gaussian(v2(1, -1), cov), 1);
  check_score_consistency(make_two_moons(), 2);
  check_score_consistency(make_mixture2d(), 3);
  CosmosLikeConfig small;
  small.dim = 6;
  small.context_dim = 4;
  check_score_consistency(make_cosmos_like(9, small), 4);
  Rng rng(5);
  check_score_consistency(make_conditional_gaussian(normal_matrix(rng, 3, 2), Matrix::Identity(3, 3)),
                          5);
}

TEST(Targets, DensitiesIntegrateToOne) {
  Matrix means(1, 3);
  means << -1.5, 0.2, 2.0;
  Vector w(3);
  w << 0.2, 0.5, 0.3;
  auto g1 = make_isotropic_mixture(means, 0.6, &w);
  double sum = 0.0;
  const double h1 = 0.005;
  for (double x = -10; x <= 10; x += h1) sum += std::exp(g1.log_density(Vector::Constant(1, x)));
  EXPECT_NEAR(sum * h1, 1.0, 1e-3);

  for (const auto& g2 : {make_mixture2d(), make_two_moons()}) {
    double s2 = 0.0;
    const double h = 0.02;
    for (double a = -5; a <= 5; a += h)
      for (double b = -5; b <= 5; b += h) s2 += std::exp(g2.log_density(v2(a, b)));
    EXPECT_NEAR(s2 * h * h, 1.0, 1e-3);
  }
}

TEST(Targets, SampleMomentsMatchAnalytic) {
  Matrix cov(2, 2);
  cov << 1.5, -0.4, -0.4, 0.8;
  auto g = make_gaussian(v2(0.5, -2.0), cov);
  Rng rng(8);
  const Index n = 100000;
  Matrix xs = g.sample(n, rng);
  Vector mean = xs.rowwise().mean();
  for (Index i = 0; i < 2; ++i)
    EXPECT_LE(std::abs(mean(i) - g.components()[0].mean(i)),
              3.0 * std::sqrt(cov(i, i) / static_cast<double>(n)));
  Matrix centered = xs.colwise() - mean;
  Matrix emp = centered * centered.transpose() / static_cast<double>(n - 1);
  // Var of a sample variance entry is about (S_ii S_jj + S_ij^2) / n.
  for (Index i = 0; i < 2; ++i)
    for (Index j = 0; j < 2; ++j)
      EXPECT_LE(std::abs(emp(i, j) - cov(i, j)),
                3.0 * std::sqrt((cov(i, i) * cov(j, j) + cov(i, j) * cov(i, j)) /
                                static_cast<double>(n)));

  auto mix = make_mixture2d();
  Matrix ms = mix.sample(n, rng);
  Vector mm = ms.rowwise().mean();
  Vector var = mix.marginal_variance();
  for (Index i = 0; i < 2; ++i)
    EXPECT_LE(std::abs(mm(i) - mix.marginal_mean()(i)),
              3.0 * std::sqrt(var(i) / static_cast<double>(n)));
}

TEST(Targets, CosmosLikeMarginalStd) {
  auto g = make_cosmos_like(17);
  EXPECT_EQ(g.dim(), 26);
  EXPECT_EQ(g.context_dim(), 26);
  EXPECT_EQ(g.size(), 3u);
  Dataset ds = sample_dataset(g, 40000, 18);
  Vector emp_mean = ds.x.rowwise().mean();
  Vector emp_std =
      ((ds.x.colwise() - emp_mean).rowwise().squaredNorm() / (ds.size() - 1.0)).cwiseSqrt();
  Vector ana_std = g.marginal_variance().cwiseSqrt();
  for (Index i = 0; i < 26; ++i) EXPECT_LE(std::abs(emp_std(i) / ana_std(i) - 1.0), 0.05);
}

TEST(Targets, CosmosLikeComponentModeDominatesShell) {
  auto g = make_cosmos_like(17);
  Rng rng(19);
  Vector c = normal_vector(rng, 26);
  for (std::size_t k = 0; k < g.size(); ++k) {
    Vector m = g.component_mean(k, &c);
    Vector dir = normal_vector(rng, 26).normalized();
    Vector sd = g.components()[k].cov.diagonal().cwiseSqrt();
    Vector shell = m + 3.0 * sd.cwiseProduct(dir) * std::sqrt(26.0);
    EXPECT_GT(g.log_density(m, &c), g.log_density(shell, &c));
  }
}

TEST(Targets, SamplingIsDeterministic) {
  auto g = make_cosmos_like(21);
  Dataset a = sample_dataset(g, 500, 22), b = sample_dataset(g, 500, 22);
  EXPECT_EQ(std::memcmp(a.x.data(), b.x.data(), sizeof(double) * a.x.size()), 0);
  EXPECT_EQ(std::memcmp(a.context.data(), b.context.data(), sizeof(double) * a.context.size()), 0);
  Dataset c = sample_dataset(g, 500, 23);
  EXPECT_NE(a.x, c.x);
}

TEST(Targets, DegenerateCovarianceRejected) {
  Matrix s = Matrix::Zero(2, 2);
  s(0, 0) = 1.0;
  try {
    make_gaussian(Vector::Zero(2), s);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), ErrorCode::kInvalidTarget);
  }
  Matrix m = Matrix::Zero(1, 1);
  EXPECT_THROW(make_isotropic_mixture(m, 0.0), Error);
}

TEST(Targets, AffineTransformChangesDensityByJacobian) {
  auto g = make_cosmos_like(30, CosmosLikeConfig{5, 3, 2});
  Vector shift = Vector::LinSpaced(5, -1, 1);
  Vector scale = Vector::LinSpaced(5, 0.5, 2.5);
  auto h = g.affine(shift, scale);
  Rng rng(31);
  for (int i = 0; i < 20; ++i) {
    Vector x = normal_vector(rng, 5), c = normal_vector(rng, 3);
    Vector y = (x - shift).cwiseQuotient(scale);
    EXPECT_NEAR(h.log_density(y, &c), g.log_density(x, &c) + scale.array().log().sum(), 1e-10);
  }
}

TEST(Dataset, NormalizeGivesZeroMeanUnitStd) {
  auto g = make_mixture2d();
  Dataset ds = sample_dataset(g, 5000, 40);
  Matrix raw = ds.x;
  normalize(ds);
  Vector mean = ds.x.rowwise().mean();
  Vector sd = (ds.x.colwise() - mean).rowwise().squaredNorm() / (ds.size() - 1.0);
  EXPECT_LE(mean.cwiseAbs().maxCoeff(), 1e-12);
  EXPECT_LE((sd.array() - 1.0).abs().maxCoeff(), 1e-12);
  Matrix back = (ds.x.array().colwise() * ds.scale.array()).matrix().colwise() + ds.shift;
  EXPECT_LE((back - raw).cwiseAbs().maxCoeff(), 1e-12);

  Dataset flat;
  flat.x = Matrix::Ones(2, 10);
  flat.context = Matrix(0, 10);
  flat.shift = Vector::Zero(2);
  flat.scale = Vector::Ones(2);
  try {
    normalize(flat);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), ErrorCode::kInvalidTarget);
  }
}

TEST(Dataset, CsvAndRawRoundTrip) {
  auto g = make_cosmos_like(50, CosmosLikeConfig{4, 3, 2});
  Dataset ds = sample_dataset(g, 37, 51);
  normalize(ds);
  auto dir = std::filesystem::temp_directory_path();
  auto csv = (dir / "stad_ds.csv").string();
  write_csv(csv, ds);
  Dataset a = read_csv(csv, -1);
  EXPECT_EQ(a.dim(), 4);
  EXPECT_EQ(a.context_dim(), 3);
  EXPECT_EQ(a.x, ds.x);
  EXPECT_EQ(a.context, ds.context);

  auto raw = (dir / "stad_ds.bin").string();
  write_raw(raw, ds);
  Dataset b = read_raw(raw);
  EXPECT_EQ(b.x, ds.x);
  EXPECT_EQ(b.context, ds.context);
  EXPECT_EQ(b.shift, ds.shift);
  EXPECT_EQ(b.scale, ds.scale);
  std::filesystem::remove(csv);
  std::filesystem::remove(raw);
  std::filesystem::remove(raw + ".json");
  try {
    read_raw(raw);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), ErrorCode::kIo);
  }
}
