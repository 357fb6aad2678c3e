// Copyright 2026 The StAD Lab Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstdint>
#include <initializer_list>
#include <limits>
#include <random>

#include "stad/common.hpp"

namespace stad {

/// Counter-based splittable generator.
///
/// The stream key is derived by hashing the seed together with an arbitrary
/// path of 64-bit labels (estimator id, trial index, ...). Output k of a
/// stream is splitmix64(key + k * golden), so two streams with different
/// paths never share state and a trial can be regenerated without replaying
/// any other trial.
class Rng {
 public:
  using result_type = std::uint64_t;

  explicit Rng(std::uint64_t seed, std::initializer_list<std::uint64_t> path = {});

  /// Child stream keyed by `label`; independent of how much of the parent
  /// has been consumed.
  Rng split(std::uint64_t label) const;
  Rng split(std::initializer_list<std::uint64_t> path) const;

  static constexpr result_type min() { return 0; }
  static constexpr result_type max() {
    return std::numeric_limits<result_type>::max();
  }

  result_type operator()();

  /// Uniform on [0, 1) with 53 random bits.
  double uniform();
  double normal();
  /// +1 or -1 with equal probability.
  double rademacher();
  std::uint64_t below(std::uint64_t n);

  std::uint64_t key() const { return key_; }

 private:
  Rng(std::uint64_t key, bool /*raw*/) : key_(key) {}

  std::uint64_t key_;
  std::uint64_t counter_ = 0;
  std::normal_distribution<double> normal_{0.0, 1.0};
};

std::uint64_t splitmix64(std::uint64_t x);

Vector normal_vector(Rng& rng, Index n);
Matrix normal_matrix(Rng& rng, Index rows, Index cols);

}  // namespace stad
