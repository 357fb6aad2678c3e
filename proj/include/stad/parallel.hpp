// Copyright 2026 The StAD Lab Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstddef>
#include <functional>

namespace stad {

/// Worker cap for parallel_for. Defaults to STAD_LAB_THREADS when set, else
/// hardware concurrency.
void set_thread_count(int n);
int thread_count();

/// Runs body(i) for i in [0, n). Each index is processed exactly once; callers
/// write into per-index slots and reduce afterwards in index order, so
/// results do not depend on the worker count.
void parallel_for(std::size_t n, const std::function<void(std::size_t)>& body);

}  // namespace stad
