// Copyright 2026 The StAD Lab Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <Eigen/Dense>

#include <cstdint>
#include <stdexcept>
#include <string>

namespace stad {

using Vector = Eigen::VectorXd;
using Matrix = Eigen::MatrixXd;
using Index = Eigen::Index;

enum class ErrorCode {
  kNonFiniteOperator,
  kDimensionMismatch,
  kCorruptModel,
  kShapeError,
  kTimeRange,
  kSingularTime,
  kNonFiniteField,
  kInvalidCovariance,
  kInvalidTarget,
  kConfigError,
  kStiffness,
  kNumericalAbort,
  kIo,
};

const char* to_string(ErrorCode code);

/// Library error. Every failure mode named in the public API maps onto one
/// ErrorCode so callers (and the CLI exit-code table) can dispatch on it.
class Error : public std::runtime_error {
 public:
  Error(ErrorCode code, const std::string& what)
      : std::runtime_error(std::string(to_string(code)) + ": " + what),
        code_(code) {}

  ErrorCode code() const noexcept { return code_; }

 private:
  ErrorCode code_;
};

[[noreturn]] inline void fail(ErrorCode code, const std::string& what) {
  throw Error(code, what);
}

inline bool all_finite(const Eigen::Ref<const Matrix>& m) {
  return m.allFinite();
}

}  // namespace stad
