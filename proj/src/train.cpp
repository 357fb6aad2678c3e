// Copyright 2026 The StAD Lab Authors
// SPDX-License-Identifier: Apache-2.0

#include "stad/train.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>

#include "stad/parallel.hpp"

namespace stad::train {

namespace {

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point t0) {
  return std::chrono::duration<double>(Clock::now() - t0).count();
}

struct Draw {
  Matrix x0, c, z;
  Vector t;
};

// One minibatch: data columns with replacement, uniform times, unit noise.
Draw draw_batch(const targets::Dataset& ds, const dyn::Schedule& sched, int n, Rng& rng) {
  Draw d;
  d.x0.resize(ds.dim(), n);
  d.c.resize(ds.context_dim(), n);
  d.t.resize(n);
  for (int j = 0; j < n; ++j) {
    const Index i = static_cast<Index>(rng.below(static_cast<std::uint64_t>(ds.size())));
    d.x0.col(j) = ds.x.col(i);
    if (ds.context_dim() > 0) d.c.col(j) = ds.context.col(i);
    d.t(j) = sched.t0() + (sched.t1() - sched.t0()) * rng.uniform();
  }
  d.z = normal_matrix(rng, ds.dim(), n);
  return d;
}

Matrix noised(const Matrix& x0, const Vector& t, const Matrix& z, const dyn::Schedule& sched) {
  Matrix xt(x0.rows(), x0.cols());
  for (Index j = 0; j < x0.cols(); ++j)
    xt.col(j) = sched.mean_scale(t(j)) * x0.col(j) + sched.noise_std(t(j)) * z.col(j);
  return xt;
}

// DSM residual eta s_theta + z with s_theta = -k x - sqrt(k) net; its
// squared norm is the eta^2-weighted score loss.
Matrix dsm_residual(const Matrix& out, const Matrix& xt, const Vector& t, const Matrix& z,
                    const dyn::Schedule& sched) {
  Matrix r(z.rows(), z.cols());
  for (Index j = 0; j < z.cols(); ++j) {
    const double eta = sched.noise_std(t(j)), k = dyn::score_skip(sched, t(j));
    r.col(j) = z.col(j) - eta * k * xt.col(j) - eta * std::sqrt(k) * out.col(j);
  }
  return r;
}

// d r / d net per column.
Vector dsm_scale(const Vector& t, const dyn::Schedule& sched) {
  Vector g(t.size());
  for (Index j = 0; j < t.size(); ++j)
    g(j) = -sched.noise_std(t(j)) * std::sqrt(dyn::score_skip(sched, t(j)));
  return g;
}

Matrix cfm_target(const Matrix& x0, const Vector& t, const Matrix& z, const dyn::Schedule& sched) {
  Matrix u(x0.rows(), x0.cols());
  for (Index j = 0; j < x0.cols(); ++j)
    u.col(j) = sched.mean_scale_dot(t(j)) * x0.col(j) + sched.noise_std_dot(t(j)) * z.col(j);
  return u;
}

void check_dataset(const targets::Dataset& ds, const net::FieldNet& net) {
  if (ds.size() == 0) fail(ErrorCode::kConfigError, "empty dataset");
  const auto& s = net.spec();
  if (s.input_dim != ds.dim() || s.context_dim != ds.context_dim())
    fail(ErrorCode::kShapeError, "net expects D=" + std::to_string(s.input_dim) +
                                     " C=" + std::to_string(s.context_dim) + ", dataset has D=" +
                                     std::to_string(ds.dim()) + " C=" +
                                     std::to_string(ds.context_dim()));
}

void check_variance(const targets::Dataset& ds) {
  Vector var = (ds.x.colwise() - ds.x.rowwise().mean()).rowwise().squaredNorm();
  if (ds.size() < 2 || var.minCoeff() <= 0.0)
    fail(ErrorCode::kInvalidTarget, "dataset has a zero-variance coordinate");
}

// Shared loop: `step_fn(step, rng, grad)` returns the loss and fills grad.
template <class StepFn>
TrainResult run_loop(net::FieldNet& net, const TrainHyper& h, std::uint64_t tag, StepFn step_fn,
                     double wall_budget_s = 0.0) {
  TrainResult res;
  net::Optimizer opt(h.optimizer, net.num_params());
  Vector params = net.params();
  Vector grad;
  const auto t0 = Clock::now();
  for (std::int64_t s = 0; s < h.steps; ++s) {
    if (wall_budget_s > 0.0 && seconds_since(t0) >= wall_budget_s) break;
    Rng rng(h.seed, {tag, static_cast<std::uint64_t>(s)});
    try {
      const double loss = step_fn(s, rng, grad);
      if (!std::isfinite(loss)) fail(ErrorCode::kNumericalAbort, "non-finite loss");
      opt.step(params, grad);
      net.set_params(params);
      res.loss.push_back(loss);
      res.steps_done = s + 1;
    } catch (const Error& e) {
      if (e.code() != ErrorCode::kNumericalAbort && e.code() != ErrorCode::kNonFiniteField &&
          e.code() != ErrorCode::kCorruptModel)
        throw;
      res.aborted = true;
      res.abort_reason = e.what();
      params = net.params();
      break;
    }
  }
  res.wall_s = seconds_since(t0);
  return res;
}

}  // namespace

int batch_at(const TrainHyper& h, std::int64_t step) {
  if (!h.heating || h.heating_start >= h.batch) return h.batch;
  int stages = 1;
  for (int b = h.heating_start; b < h.batch; b *= 2) ++stages;
  const std::int64_t len = std::max<std::int64_t>(1, (h.steps + stages - 1) / stages);
  const auto stage = static_cast<int>(std::min<std::int64_t>(step / len, stages - 1));
  return std::min(h.batch, h.heating_start << stage);
}

double dsm_loss(const net::FieldNet& net, const Matrix& x0, const Vector& t, const Matrix* c,
                const Matrix& z, const dyn::Schedule& sched) {
  Matrix xt = noised(x0, t, z, sched);
  Matrix out = net.forward({xt, t, c});
  return dsm_residual(out, xt, t, z, sched).squaredNorm() / static_cast<double>(x0.cols());
}

double cfm_loss(const net::FieldNet& net, const Matrix& x0, const Vector& t, const Matrix* c,
                const Matrix& z, const dyn::Schedule& sched) {
  Matrix xt = noised(x0, t, z, sched);
  Matrix out = net.forward({xt, t, c});
  return (out - cfm_target(x0, t, z, sched)).squaredNorm() / static_cast<double>(x0.cols());
}

TrainResult train_score_dsm(net::FieldNet& net, const targets::Dataset& ds,
                            const dyn::Schedule& sched, const TrainHyper& h) {
  if (sched.is_flow()) fail(ErrorCode::kConfigError, "score matching needs a diffusion schedule");
  check_dataset(ds, net);
  check_variance(ds);
  if (net.spec().output_dim != ds.dim()) fail(ErrorCode::kShapeError, "score net output width");
  return run_loop(net, h, 0x05C0DE, [&](std::int64_t s, Rng& rng, Vector& grad) {
    const int n = batch_at(h, s);
    Draw d = draw_batch(ds, sched, n, rng);
    const Matrix* cp = ds.context_dim() > 0 ? &d.c : nullptr;
    Matrix xt = noised(d.x0, d.t, d.z, sched);
    Matrix resid = dsm_residual(net.forward({xt, d.t, cp}), xt, d.t, d.z, sched);
    Matrix adj = resid * dsm_scale(d.t, sched).asDiagonal();
    grad = net.param_gradient({xt, d.t, cp}, (2.0 / n) * adj);
    return resid.squaredNorm() / n;
  });
}

TrainResult train_flow_cfm(net::FieldNet& net, const targets::Dataset& ds,
                           const dyn::Schedule& sched, const TrainHyper& h) {
  if (!sched.is_flow()) fail(ErrorCode::kConfigError, "flow matching needs a flow schedule");
  check_dataset(ds, net);
  if (net.spec().output_dim != ds.dim()) fail(ErrorCode::kShapeError, "velocity net output width");
  return run_loop(net, h, 0xF10, [&](std::int64_t s, Rng& rng, Vector& grad) {
    const int n = batch_at(h, s);
    Draw d = draw_batch(ds, sched, n, rng);
    const Matrix* cp = ds.context_dim() > 0 ? &d.c : nullptr;
    Matrix xt = noised(d.x0, d.t, d.z, sched);
    Matrix resid = net.forward({xt, d.t, cp}) - cfm_target(d.x0, d.t, d.z, sched);
    grad = net.param_gradient({xt, d.t, cp}, (2.0 / n) * resid);
    return resid.squaredNorm() / n;
  });
}

const char* to_string(DirectMode m) { return m == DirectMode::kH1 ? "h1" : "h1_plus_b"; }

DirectMode direct_mode_from_string(const std::string& s) {
  if (s == "h1") return DirectMode::kH1;
  if (s == "h1_plus_b" || s == "h1+b") return DirectMode::kH1PlusB;
  fail(ErrorCode::kConfigError, "unknown direct mode '" + s + "'");
}

DirectCache build_direct_cache(const dyn::VelocityField& teacher, const targets::Dataset& ds,
                               DirectMode mode, Index size, std::uint64_t seed) {
  if (size <= 0 || ds.size() == 0) fail(ErrorCode::kConfigError, "empty direct cache");
  if (teacher.dim() != ds.dim() || teacher.context_dim() != ds.context_dim())
    fail(ErrorCode::kShapeError, "teacher and dataset disagree on dimensions");
  const auto& sched = teacher.schedule();
  DirectCache cache;
  Rng rng(seed, {0xD1EC7});
  Draw d = draw_batch(ds, sched, static_cast<int>(size), rng);
  cache.x = noised(d.x0, d.t, d.z, sched);
  cache.c = d.c;
  cache.t = d.t;
  cache.target.resize(size);
  const bool ctx = ds.context_dim() > 0;
  const std::size_t chunk = 256;
  const std::size_t chunks = (static_cast<std::size_t>(size) + chunk - 1) / chunk;
  parallel_for(chunks, [&](std::size_t k) {
    const Index b = static_cast<Index>(k * chunk);
    const Index n = std::min<Index>(static_cast<Index>(chunk), size - b);
    Matrix xb = cache.x.middleCols(b, n);
    Vector tb = cache.t.segment(b, n);
    Matrix cb = cache.c.middleCols(b, n);
    Matrix v, s;
    if (mode == DirectMode::kH1PlusB) teacher.drift_and_score(xb, tb, ctx ? &cb : nullptr, v, s);
    Rng probe_rng(seed, {0x9B0BE, static_cast<std::uint64_t>(k)});
    for (Index j = 0; j < n; ++j) {
      Vector e(ds.dim());
      for (Index i = 0; i < e.size(); ++i) e(i) = probe_rng.rademacher();
      Vector cj;
      if (ctx) cj = cb.col(j);
      Matrix je = teacher.jvp_block(xb.col(j), tb(j), ctx ? &cj : nullptr, e);
      double target = e.dot(je.col(0));
      if (mode == DirectMode::kH1PlusB) target += v.col(j).dot(s.col(j));
      cache.target(b + j) = target;
    }
  });
  return cache;
}

TrainResult fit_direct_cache(net::FieldNet& head, const DirectCache& cache, const TrainHyper& h,
                             double wall_budget_s) {
  if (head.spec().output_dim != 1) fail(ErrorCode::kShapeError, "divergence head must be scalar");
  const Index m = cache.x.cols();
  if (m == 0) fail(ErrorCode::kConfigError, "empty direct cache");
  const bool ctx = cache.c.rows() > 0;
  return run_loop(
      head, h, 0xD12EC7,
      [&](std::int64_t s, Rng& rng, Vector& grad) {
        const int n = batch_at(h, s);
        Matrix x(cache.x.rows(), n), c(cache.c.rows(), n);
        Vector t(n), y(n);
        for (int j = 0; j < n; ++j) {
          const Index i = static_cast<Index>(rng.below(static_cast<std::uint64_t>(m)));
          x.col(j) = cache.x.col(i);
          if (ctx) c.col(j) = cache.c.col(i);
          t(j) = cache.t(i);
          y(j) = cache.target(i);
        }
        const net::Batch b{x, t, ctx ? &c : nullptr};
        Matrix resid = head.forward(b);
        resid.row(0) -= y.transpose();
        grad = head.param_gradient(b, (2.0 / n) * resid);
        return resid.squaredNorm() / n;
      },
      wall_budget_s);
}

TrainResult train_direct_divergence(net::FieldNet& head, const dyn::VelocityField& teacher,
                                    const targets::Dataset& ds, DirectMode mode,
                                    const DirectHyper& h) {
  if (head.spec().input_dim != ds.dim() || head.spec().context_dim != ds.context_dim())
    fail(ErrorCode::kShapeError, "head and dataset disagree on dimensions");
  const auto t0 = Clock::now();
  DirectCache cache = build_direct_cache(teacher, ds, mode, h.cache_size, h.train.seed);
  const double cache_s = seconds_since(t0);
  TrainResult res = fit_direct_cache(head, cache, h.train);
  res.cache_wall_s = cache_s;
  return res;
}

}  // namespace stad::train
