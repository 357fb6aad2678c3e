// Copyright 2026 The StAD Lab Authors
// SPDX-License-Identifier: Apache-2.0

#include <algorithm>
#include <atomic>
#include <cstdlib>
#include <exception>
#include <mutex>
#include <thread>
#include <vector>

#include "stad/common.hpp"
#include "stad/parallel.hpp"
#include "stad/rng.hpp"

namespace stad {

const char* to_string(ErrorCode code) {
  switch (code) {
    case ErrorCode::kNonFiniteOperator: return "NonFiniteOperator";
    case ErrorCode::kDimensionMismatch: return "DimensionMismatch";
    case ErrorCode::kCorruptModel: return "CorruptModel";
    case ErrorCode::kShapeError: return "ShapeError";
    case ErrorCode::kTimeRange: return "TimeRange";
    case ErrorCode::kSingularTime: return "SingularTime";
    case ErrorCode::kNonFiniteField: return "NonFiniteField";
    case ErrorCode::kInvalidCovariance: return "InvalidCovariance";
    case ErrorCode::kInvalidTarget: return "InvalidTarget";
    case ErrorCode::kConfigError: return "ConfigError";
    case ErrorCode::kStiffness: return "StiffnessError";
    case ErrorCode::kNumericalAbort: return "NumericalAbort";
    case ErrorCode::kIo: return "IoError";
  }
  return "Unknown";
}

// ---------------------------------------------------------------------------
// Rng

std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9E3779B97F4A7C15ULL;
  x = (x ^ (x >> 30)) * 0xBF58476D1CE4E5B9ULL;
  x = (x ^ (x >> 27)) * 0x94D049BB133111EBULL;
  return x ^ (x >> 31);
}

namespace {
std::uint64_t absorb(std::uint64_t key, std::uint64_t label) {
  return splitmix64(key ^ splitmix64(label + 0x632BE59BD9B4E019ULL));
}
}  // namespace

Rng::Rng(std::uint64_t seed, std::initializer_list<std::uint64_t> path)
    : key_(splitmix64(seed)) {
  for (auto label : path) key_ = absorb(key_, label);
}

Rng Rng::split(std::uint64_t label) const { return Rng(absorb(key_, label), true); }

Rng Rng::split(std::initializer_list<std::uint64_t> path) const {
  std::uint64_t k = key_;
  for (auto label : path) k = absorb(k, label);
  return Rng(k, true);
}

Rng::result_type Rng::operator()() {
  return splitmix64(key_ + (counter_++) * 0x9E3779B97F4A7C15ULL);
}

double Rng::uniform() { return static_cast<double>((*this)() >> 11) * 0x1.0p-53; }

double Rng::normal() { return normal_(*this); }

double Rng::rademacher() { return ((*this)() >> 63) ? 1.0 : -1.0; }

std::uint64_t Rng::below(std::uint64_t n) {
  // Lemire's multiply-shift; bias is < n / 2^64 and irrelevant here.
  return static_cast<std::uint64_t>((static_cast<unsigned __int128>((*this)()) * n) >> 64);
}

Vector normal_vector(Rng& rng, Index n) {
  Vector v(n);
  for (Index i = 0; i < n; ++i) v(i) = rng.normal();
  return v;
}

Matrix normal_matrix(Rng& rng, Index rows, Index cols) {
  Matrix m(rows, cols);
  for (Index j = 0; j < cols; ++j)
    for (Index i = 0; i < rows; ++i) m(i, j) = rng.normal();
  return m;
}

// ---------------------------------------------------------------------------
// parallel_for

namespace {
int default_threads() {
  if (const char* env = std::getenv("STAD_LAB_THREADS")) {
    int n = std::atoi(env);
    if (n > 0) return n;
  }
  unsigned hw = std::thread::hardware_concurrency();
  return hw == 0 ? 1 : static_cast<int>(hw);
}

std::atomic<int>& thread_cap() {
  static std::atomic<int> cap{default_threads()};
  return cap;
}
}  // namespace

void set_thread_count(int n) { thread_cap() = n > 0 ? n : default_threads(); }

int thread_count() { return thread_cap().load(); }

void parallel_for(std::size_t n, const std::function<void(std::size_t)>& body) {
  const std::size_t workers =
      std::min<std::size_t>(n, static_cast<std::size_t>(std::max(1, thread_count())));
  if (workers <= 1) {
    for (std::size_t i = 0; i < n; ++i) body(i);
    return;
  }
  std::atomic<std::size_t> next{0};
  std::exception_ptr first_error;
  std::mutex error_mutex;
  auto run = [&] {
    for (;;) {
      std::size_t i = next.fetch_add(1);
      if (i >= n) return;
      try {
        body(i);
      } catch (...) {
        std::lock_guard<std::mutex> lock(error_mutex);
        if (!first_error) first_error = std::current_exception();
        next = n;
        return;
      }
    }
  };
  std::vector<std::thread> pool;
  pool.reserve(workers - 1);
  for (std::size_t w = 1; w < workers; ++w) pool.emplace_back(run);
  run();
  for (auto& th : pool) th.join();
  if (first_error) std::rethrow_exception(first_error);
}

}  // namespace stad
