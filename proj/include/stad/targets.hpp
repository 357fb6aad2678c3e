// Copyright 2026 The StAD Lab Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "stad/common.hpp"
#include "stad/rng.hpp"

namespace stad::targets {

struct Component {
  double weight = 1.0;
  Vector mean;
  Matrix cov;
  /// D x C map; the component mean is mean + context_map * c. Empty when the
  /// mixture is unconditional.
  Matrix context_map;
};

/// Conditional Gaussian mixture p(x | c) = sum_k w_k N(x; m_k + W_k c, S_k).
/// Every target in the library is one of these.
class GaussianMixture {
 public:
  GaussianMixture() = default;
  GaussianMixture(std::vector<Component> comps, int context_dim = 0);

  Index dim() const { return dim_; }
  int context_dim() const { return context_dim_; }
  std::size_t size() const { return comps_.size(); }
  const std::vector<Component>& components() const { return comps_; }
  const Matrix& cholesky(std::size_t k) const { return chol_[k]; }

  Vector component_mean(std::size_t k, const Vector* c) const;

  double log_density(const Vector& x, const Vector* c = nullptr) const;
  Vector score(const Vector& x, const Vector* c = nullptr) const;

  /// Draws one sample per column of `contexts` (or n unconditional samples).
  Matrix sample(Index n, Rng& rng, const Matrix* contexts = nullptr) const;

  /// Image under x -> (x - shift) / scale.
  GaussianMixture affine(const Vector& shift, const Vector& scale) const;

  /// Analytic mean and per-coordinate variance with contexts drawn N(0, I).
  Vector marginal_mean() const;
  Vector marginal_variance() const;

 private:
  void check_inputs(const Vector& x, const Vector* c) const;

  Index dim_ = 0;
  int context_dim_ = 0;
  std::vector<Component> comps_;
  std::vector<Matrix> chol_;
  std::vector<double> log_norm_;  // log w_k - 0.5 log det(2 pi S_k)
};

/// Shared log-sum-exp helper; returns the log of sum exp(v).
double log_sum_exp(const Vector& v);

// ---------------------------------------------------------------------------
// Named targets

GaussianMixture make_gaussian(const Vector& mean, const Matrix& cov);

/// 1-D or D-dim equal-weight mixture with isotropic components.
GaussianMixture make_isotropic_mixture(const Matrix& means, double std_dev,
                                       const Vector* weights = nullptr);

/// Two interleaved half-moons, each a chain of `per_arc` isotropic Gaussians.
GaussianMixture make_two_moons(int per_arc = 8, double std_dev = 0.12);

/// Gaussian with mean W c and covariance S.
GaussianMixture make_conditional_gaussian(const Matrix& context_map, const Matrix& cov,
                                          const Vector* offset = nullptr);

/// Fixed 2-D four-component mixture used as the small teacher task.
GaussianMixture make_mixture2d();

struct CosmosLikeConfig {
  int dim = 26;
  int context_dim = 26;
  int components = 3;
  /// Scale of the context map relative to 1/sqrt(C).
  double context_gain = 0.6;
  double mean_spread = 1.2;
  double var_min = 0.15;
  double var_max = 1.0;
};

GaussianMixture make_cosmos_like(std::uint64_t seed, const CosmosLikeConfig& cfg = {});

// ---------------------------------------------------------------------------
// Datasets

struct Dataset {
  Matrix x;        // D x N
  Matrix context;  // C x N, zero rows when unconditional
  Vector shift;    // normalization applied: x_stored = (x_raw - shift) / scale
  Vector scale;
  std::uint64_t seed = 0;

  Index size() const { return x.cols(); }
  Index dim() const { return x.rows(); }
  Index context_dim() const { return context.rows(); }
  const Matrix* context_ptr() const { return context.rows() > 0 ? &context : nullptr; }
  double log_scale_sum() const { return scale.array().log().sum(); }
};

/// Draws n samples; conditional targets get contexts from N(0, I).
Dataset sample_dataset(const GaussianMixture& target, Index n, std::uint64_t seed);

/// Per-coordinate standardization; returns shift/scale and rewrites x.
void normalize(Dataset& ds);

Dataset select_columns(const Dataset& ds, Index begin, Index count);

/// Header row x0..x{D-1},c0..c{C-1}.
void write_csv(const std::string& path, const Dataset& ds);
Dataset read_csv(const std::string& path, int context_dim);

/// Row-major float64 samples (x then c per row) plus `<path>.json` sidecar.
void write_raw(const std::string& path, const Dataset& ds);
Dataset read_raw(const std::string& path);

}  // namespace stad::targets
