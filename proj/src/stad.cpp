// Copyright 2026 The StAD Lab Authors
// SPDX-License-Identifier: Apache-2.0

#include "stad/stad.hpp"

#include <algorithm>
#include <chrono>
#include <numbers>

#include <json.hpp>

#include "stad/parallel.hpp"

namespace stad::stein {

using json = nlohmann::json;

namespace {

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point t0) {
  return std::chrono::duration<double>(Clock::now() - t0).count();
}

constexpr std::size_t kChunk = 2048;

std::size_t chunk_count(Index n) {
  return (static_cast<std::size_t>(n) + kChunk - 1) / kChunk;
}

MeanEstimate mean_of(const Vector& v) {
  MeanEstimate m;
  m.n = v.size();
  if (m.n == 0) return m;
  m.mean = v.mean();
  if (m.n > 1) {
    const double var = (v.array() - m.mean).square().sum() / static_cast<double>(m.n - 1);
    m.se = std::sqrt(var / static_cast<double>(m.n));
  }
  return m;
}

}  // namespace

double stein_baseline(const Vector& v, const Vector& s) {
  if (v.size() != s.size()) fail(ErrorCode::kDimensionMismatch, "baseline: v and s differ");
  return -v.dot(s);
}

double residual_target_oracle(const dyn::VelocityField& field, const Vector& x, double t,
                              const Vector* c) {
  Matrix xm = x, cm;
  if (c) cm = *c;
  Vector tv = Vector::Constant(1, t);
  Matrix v, s;
  field.drift_and_score(xm, tv, c ? &cm : nullptr, v, s);
  return field.jacobian(x, t, c).trace() + v.col(0).dot(s.col(0));
}

// ---------------------------------------------------------------------------

const char* to_string(CutoffMode m) { return m == CutoffMode::kCosine ? "cosine" : "bump"; }

CutoffMode cutoff_mode_from_string(const std::string& s) {
  if (s == "cosine") return CutoffMode::kCosine;
  if (s == "bump") return CutoffMode::kBump;
  fail(ErrorCode::kConfigError, "unknown cutoff mode '" + s + "'");
}

namespace {

// kappa and d kappa / d|x| on the shell coordinate.
std::pair<double, double> cutoff_radial(const CutoffSpec& spec, double r) {
  if (spec.disabled() || r <= spec.R) return {1.0, 0.0};
  if (!(spec.R > 0.0)) fail(ErrorCode::kConfigError, "cutoff radius not set");
  if (r >= 2.0 * spec.R) return {0.0, 0.0};
  const double R = spec.R;
  if (spec.mode == CutoffMode::kCosine) {
    const double a = std::numbers::pi * r / R - std::numbers::pi;
    return {0.5 + 0.5 * std::cos(a), -0.5 * std::numbers::pi / R * std::sin(a)};
  }
  // Smooth-step bump 1 / (1 + exp(1/(1-u) - 1/u)) on u in (0, 1).
  const double u = (r - R) / R;
  const double e = 1.0 / (1.0 - u) - 1.0 / u;
  if (e > 700.0) return {0.0, 0.0};
  if (e < -700.0) return {1.0, 0.0};
  const double k = 1.0 / (1.0 + std::exp(e));
  const double dk_du = -k * (1.0 - k) * (1.0 / (u * u) + 1.0 / ((1.0 - u) * (1.0 - u)));
  return {k, dk_du / R};
}

}  // namespace

double cutoff(const CutoffSpec& spec, const Vector& x) { return cutoff_radial(spec, x.norm()).first; }

Vector cutoff_gradient(const CutoffSpec& spec, const Vector& x) {
  const double r = x.norm();
  const double d = cutoff_radial(spec, r).second;
  if (d == 0.0 || r == 0.0) return Vector::Zero(x.size());
  return (d / r) * x;
}

double norm_percentile(const Matrix& x, double percentile) {
  if (x.cols() == 0) fail(ErrorCode::kConfigError, "percentile of an empty set");
  if (!(percentile >= 0.0 && percentile <= 100.0))
    fail(ErrorCode::kConfigError, "percentile outside [0, 100]");
  std::vector<double> r(static_cast<std::size_t>(x.cols()));
  for (Index j = 0; j < x.cols(); ++j) r[static_cast<std::size_t>(j)] = x.col(j).norm();
  std::sort(r.begin(), r.end());
  const double pos = percentile / 100.0 * static_cast<double>(r.size() - 1);
  const auto lo = static_cast<std::size_t>(std::floor(pos));
  const std::size_t hi = std::min(lo + 1, r.size() - 1);
  return r[lo] + (pos - static_cast<double>(lo)) * (r[hi] - r[lo]);
}

// ---------------------------------------------------------------------------

const char* to_string(TimeProposal p) {
  return p == TimeProposal::kUniform ? "uniform" : "inverse_square";
}

TimeProposal time_proposal_from_string(const std::string& s) {
  if (s == "uniform") return TimeProposal::kUniform;
  if (s == "inverse_square") return TimeProposal::kInverseSquare;
  fail(ErrorCode::kConfigError, "unknown time proposal '" + s + "'");
}

TimeSample sample_time_importance(TimeProposal q, double eps, double T, double u) {
  if (!(eps > 0.0 && eps < T)) fail(ErrorCode::kConfigError, "time proposal needs 0 < eps < T");
  if (q == TimeProposal::kUniform) return {eps + u * (T - eps), 1.0};
  const double span = 1.0 / eps - 1.0 / T;
  const double t = 1.0 / (1.0 / eps - u * span);
  return {t, t * t * span / (T - eps)};
}

double proposal_density(TimeProposal q, double eps, double T, double t) {
  if (t < eps || t > T) return 0.0;
  if (q == TimeProposal::kUniform) return 1.0 / (T - eps);
  return 1.0 / (t * t * (1.0 / eps - 1.0 / T));
}

// ---------------------------------------------------------------------------

const char* to_string(HeadKind k) {
  switch (k) {
    case HeadKind::kStein: return "stad";
    case HeadKind::kDirectH1: return "h1";
    case HeadKind::kDirectH1PlusB: return "h1_plus_b";
  }
  return "stad";
}

HeadKind head_kind_from_string(const std::string& s) {
  if (s == "stad" || s == "stein") return HeadKind::kStein;
  if (s == "h1") return HeadKind::kDirectH1;
  if (s == "h1_plus_b" || s == "h1+b") return HeadKind::kDirectH1PlusB;
  fail(ErrorCode::kConfigError, "unknown head kind '" + s + "'");
}

HeadEval eval_regularized(const net::FieldNet& head, const CutoffSpec& cutoff, const Matrix& x,
                          const Vector& t, const Matrix* c) {
  auto vg = head.value_and_input_gradient({x, t, c});
  HeadEval out;
  out.raw = std::move(vg.value);
  out.raw_grad = std::move(vg.grad);
  out.value = out.raw;
  out.grad = out.raw_grad;
  if (cutoff.disabled()) return out;
  for (Index j = 0; j < x.cols(); ++j) {
    const auto [k, dk] = cutoff_radial(cutoff, x.col(j).norm());
    out.value(j) = k * out.raw(j);
    out.grad.col(j) = k * out.raw_grad.col(j);
    const double r = x.col(j).norm();
    if (dk != 0.0 && r > 0.0) out.grad.col(j) += out.raw(j) * (dk / r) * x.col(j);
  }
  return out;
}

DivergenceHead::DivergenceHead(std::shared_ptr<const net::FieldNet> n, HeadKind kind,
                               CutoffSpec cutoff)
    : net_(std::move(n)), kind_(kind), cutoff_(cutoff) {
  if (!net_ || net_->spec().output_dim != 1)
    fail(ErrorCode::kShapeError, "divergence head must be a scalar net");
  if (kind_ != HeadKind::kStein) cutoff_ = CutoffSpec::none();
  if (!cutoff_.disabled() && !(cutoff_.R > 0.0))
    fail(ErrorCode::kConfigError, "divergence head needs a resolved cutoff radius");
}

Vector DivergenceHead::residual(const Matrix& x, const Vector& t, const Matrix* c) const {
  Vector d = net_->forward({x, t, c}).row(0).transpose();
  if (cutoff_.disabled()) return d;
  for (Index j = 0; j < x.cols(); ++j) d(j) *= cutoff(cutoff_, x.col(j));
  return d;
}

Vector DivergenceHead::divergence(const Matrix& x, const Vector& t, const Matrix* c,
                                  const Matrix& v, const Matrix& s) const {
  Vector d = residual(x, t, c);
  if (kind_ == HeadKind::kDirectH1) return d;
  for (Index j = 0; j < x.cols(); ++j) d(j) -= v.col(j).dot(s.col(j));
  return d;
}

void DivergenceHead::save(const std::string& path, const std::string& schedule_json,
                          const std::string& extra_json) const {
  json extra = extra_json.empty() ? json::object() : json::parse(extra_json);
  extra["head_kind"] = to_string(kind_);
  extra["cutoff"] = {{"R", cutoff_.disabled() ? json(nullptr) : json(cutoff_.R)},
                     {"mode", to_string(cutoff_.mode)},
                     {"percentile", cutoff_.percentile}};
  net::save_checkpoint(path, *net_, {"head", schedule_json, extra.dump()});
}

DivergenceHead DivergenceHead::load(const std::string& path, std::string* schedule_json) {
  net::CheckpointMeta meta;
  auto n = std::make_shared<net::FieldNet>(net::load_checkpoint(path, &meta));
  if (meta.kind != "head") fail(ErrorCode::kShapeError, path + ": not a divergence head");
  HeadKind kind = HeadKind::kStein;
  CutoffSpec cut = CutoffSpec::none();
  try {
    json extra = json::parse(meta.extra_json.empty() ? "{}" : meta.extra_json);
    kind = head_kind_from_string(extra.value("head_kind", std::string("stad")));
    if (extra.contains("cutoff")) {
      const json& cj = extra["cutoff"];
      cut.R = cj["R"].is_null() ? std::numeric_limits<double>::infinity() : cj["R"].get<double>();
      cut.mode = cutoff_mode_from_string(cj.value("mode", std::string("cosine")));
      cut.percentile = cj.value("percentile", 99.5);
    }
  } catch (const json::exception& e) {
    fail(ErrorCode::kCorruptModel, path + ": bad head metadata: " + e.what());
  }
  if (schedule_json) *schedule_json = meta.schedule_json;
  return DivergenceHead(std::move(n), kind, cut);
}

// ---------------------------------------------------------------------------

SteinLoss stein_loss_batch(const net::FieldNet& head, const Matrix& x, const Vector& t,
                           const Matrix* c, const Matrix& v, const Vector& w,
                           const CutoffSpec& cutoff, double l) {
  const Index n = x.cols();
  if (n == 0) fail(ErrorCode::kConfigError, "empty Stein batch");
  if (v.rows() != x.rows() || v.cols() != n || w.size() != n)
    fail(ErrorCode::kDimensionMismatch, "Stein batch shapes");
  if (l < 0.0) fail(ErrorCode::kConfigError, "gradient penalty must be >= 0");
  HeadEval he = eval_regularized(head, cutoff, x, t, c);

  Matrix a(1, n), cc = Matrix::Ones(1, n), u(x.rows(), n);
  double total = 0.0;
  const double inv_n = 1.0 / static_cast<double>(n);
  for (Index j = 0; j < n; ++j) {
    const double d = he.value(j);
    const auto g = he.grad.col(j);
    total += w(j) * (d * d + 2.0 * g.dot(v.col(j)) + l * g.squaredNorm());
    double k = 1.0, dk = 0.0;
    if (!cutoff.disabled()) std::tie(k, dk) = cutoff_radial(cutoff, x.col(j).norm());
    const double r = x.col(j).norm();
    Vector gk = (dk != 0.0 && r > 0.0) ? Vector((dk / r) * x.col(j)) : Vector::Zero(x.rows());
    a(0, j) = inv_n * w(j) * (2.0 * k * d + 2.0 * gk.dot(v.col(j)) + 2.0 * l * g.dot(gk));
    u.col(j) = inv_n * w(j) * (2.0 * k * v.col(j) + 2.0 * l * k * g);
  }
  SteinLoss out;
  out.loss = total * inv_n;
  if (!std::isfinite(out.loss)) fail(ErrorCode::kNumericalAbort, "non-finite Stein loss");
  out.grad = head.param_gradient({x, t, c}, a, &cc, &u);
  return out;
}

DistillCache build_cache(const dyn::VelocityField& teacher, const targets::Dataset& ds, Index size,
                         TimeProposal proposal, std::uint64_t seed) {
  if (size <= 0 || ds.size() == 0) fail(ErrorCode::kConfigError, "empty distillation cache");
  if (teacher.dim() != ds.dim() || teacher.context_dim() != ds.context_dim())
    fail(ErrorCode::kShapeError, "teacher and dataset disagree on dimensions");
  const auto& sched = teacher.schedule();
  DistillCache cache;
  cache.x.resize(ds.dim(), size);
  cache.c.resize(ds.context_dim(), size);
  cache.t.resize(size);
  cache.w.resize(size);
  Rng rng(seed, {0xCAC4E});
  for (Index j = 0; j < size; ++j) {
    const Index i = static_cast<Index>(rng.below(static_cast<std::uint64_t>(ds.size())));
    const TimeSample ts = sample_time_importance(proposal, sched.t0(), sched.t1(), rng.uniform());
    cache.t(j) = std::clamp(ts.t, sched.t0(), sched.t1());
    cache.w(j) = ts.weight;
    const double a = sched.mean_scale(cache.t(j)), b = sched.noise_std(cache.t(j));
    for (Index k = 0; k < ds.dim(); ++k) cache.x(k, j) = a * ds.x(k, i) + b * rng.normal();
    if (ds.context_dim() > 0) cache.c.col(j) = ds.context.col(i);
  }
  cache.v.resize(ds.dim(), size);
  const bool ctx = ds.context_dim() > 0;
  parallel_for(chunk_count(size), [&](std::size_t k) {
    const Index b = static_cast<Index>(k * kChunk);
    const Index n = std::min<Index>(static_cast<Index>(kChunk), size - b);
    Matrix cb = cache.c.middleCols(b, n);
    cache.v.middleCols(b, n) =
        teacher.drift(cache.x.middleCols(b, n), cache.t.segment(b, n), ctx ? &cb : nullptr);
  });
  return cache;
}

std::string DistillReport::to_json() const {
  json j = {{"steps", steps},
            {"final_loss", final_loss},
            {"R", std::isfinite(R) ? json(R) : json(nullptr)},
            {"fraction_outside_2R", fraction_outside_2R},
            {"wall_time_cache_s", wall_time_cache_s},
            {"wall_time_train_s", wall_time_train_s}};
  if (aborted) j["aborted"] = abort_reason;
  return j.dump(2);
}

DistillReport distill(const dyn::VelocityField& teacher, const targets::Dataset& ds,
                      net::FieldNet& head, const SteinHyper& h, CutoffSpec& cutoff,
                      double wall_budget_s) {
  if (head.spec().output_dim != 1) fail(ErrorCode::kShapeError, "divergence head must be scalar");
  if (head.spec().input_dim != ds.dim() || head.spec().context_dim != ds.context_dim())
    fail(ErrorCode::kShapeError, "head and dataset disagree on dimensions");
  if (h.batch <= 0 || h.rebuild_period < 0)
    fail(ErrorCode::kConfigError, "distillation needs batch > 0 and rebuild period >= 0");
  DistillReport rep;
  auto t0 = Clock::now();
  DistillCache cache = build_cache(teacher, ds, h.cache_size, h.proposal, h.seed);
  rep.wall_time_cache_s = seconds_since(t0);

  if (!cutoff.disabled() && !(cutoff.R > 0.0))
    cutoff.R = norm_percentile(cache.x, cutoff.percentile);
  rep.R = cutoff.R;
  if (!cutoff.disabled()) {
    Index out = 0;
    for (Index j = 0; j < cache.size(); ++j) out += cache.x.col(j).norm() >= 2.0 * cutoff.R;
    rep.fraction_outside_2R = static_cast<double>(out) / static_cast<double>(cache.size());
  }

  net::Optimizer opt(h.optimizer, head.num_params());
  Vector params = head.params();
  const bool ctx = ds.context_dim() > 0;
  double train_s = 0.0;
  for (std::int64_t s = 0; s < h.steps; ++s) {
    if (h.rebuild_period > 0 && s > 0 && s % h.rebuild_period == 0) {
      auto tc = Clock::now();
      cache = build_cache(teacher, ds, h.cache_size, h.proposal,
                          splitmix64(h.seed ^ static_cast<std::uint64_t>(s)));
      rep.wall_time_cache_s += seconds_since(tc);
    }
    if (wall_budget_s > 0.0 && train_s >= wall_budget_s) break;
    auto ts = Clock::now();
    Rng rng(h.seed, {0x57E1, static_cast<std::uint64_t>(s)});
    const Index m = cache.size();
    Matrix x(ds.dim(), h.batch), v(ds.dim(), h.batch), c(ds.context_dim(), h.batch);
    Vector t(h.batch), w(h.batch);
    for (int j = 0; j < h.batch; ++j) {
      const Index i = static_cast<Index>(rng.below(static_cast<std::uint64_t>(m)));
      x.col(j) = cache.x.col(i);
      v.col(j) = cache.v.col(i);
      if (ctx) c.col(j) = cache.c.col(i);
      t(j) = cache.t(i);
      w(j) = cache.w(i);
    }
    try {
      SteinLoss sl = stein_loss_batch(head, x, t, ctx ? &c : nullptr, v, w, cutoff, h.l);
      opt.step(params, sl.grad);
      head.set_params(params);
      rep.loss.push_back(sl.loss);
      rep.steps = s + 1;
    } catch (const Error& e) {
      if (e.code() != ErrorCode::kNumericalAbort && e.code() != ErrorCode::kCorruptModel &&
          e.code() != ErrorCode::kNonFiniteField)
        throw;
      rep.aborted = true;
      rep.abort_reason = e.what();
      break;
    }
    train_s += seconds_since(ts);
  }
  rep.wall_time_train_s = train_s;
  if (!rep.loss.empty()) {
    // Mean over the last 100 steps; the per-step loss is very noisy.
    const std::size_t k = std::min<std::size_t>(100, rep.loss.size());
    double sum = 0.0;
    for (std::size_t i = rep.loss.size() - k; i < rep.loss.size(); ++i) sum += rep.loss[i];
    rep.final_loss = sum / static_cast<double>(k);
  }
  return rep;
}

// ---------------------------------------------------------------------------

MeanEstimate stein_identity_check(const dyn::VelocityField& field, const Matrix& x, double t,
                                  const Matrix* c) {
  const Index n = x.cols();
  Vector r(n);
  parallel_for(chunk_count(n), [&](std::size_t k) {
    const Index b = static_cast<Index>(k * kChunk);
    const Index m = std::min<Index>(static_cast<Index>(kChunk), n - b);
    Vector tb = Vector::Constant(m, t);
    Matrix cb;
    if (c) cb = c->middleCols(b, m);
    Matrix v, s;
    field.drift_and_score(x.middleCols(b, m), tb, c ? &cb : nullptr, v, s);
    for (Index j = 0; j < m; ++j) {
      Vector cj;
      if (c) cj = cb.col(j);
      r(b + j) = field.jacobian(x.col(b + j), t, c ? &cj : nullptr).trace() +
                 v.col(j).dot(s.col(j));
    }
  });
  return mean_of(r);
}

MixedTermReport mixed_term_identity_check(const net::FieldNet& head, const CutoffSpec& cutoff,
                                          const dyn::VelocityField& field, const Matrix& x,
                                          double t, const Matrix* c) {
  const Index n = x.cols();
  Vector lhs(n), rhs(n);
  parallel_for(chunk_count(n), [&](std::size_t k) {
    const Index b = static_cast<Index>(k * kChunk);
    const Index m = std::min<Index>(static_cast<Index>(kChunk), n - b);
    Vector tb = Vector::Constant(m, t);
    Matrix xb = x.middleCols(b, m), cb;
    if (c) cb = c->middleCols(b, m);
    const Matrix* cp = c ? &cb : nullptr;
    Matrix v, s;
    field.drift_and_score(xb, tb, cp, v, s);
    HeadEval he = eval_regularized(head, cutoff, xb, tb, cp);
    for (Index j = 0; j < m; ++j) {
      Vector cj;
      if (c) cj = cb.col(j);
      const double r =
          field.jacobian(xb.col(j), t, c ? &cj : nullptr).trace() + v.col(j).dot(s.col(j));
      lhs(b + j) = he.value(j) * r;
      rhs(b + j) = -he.grad.col(j).dot(v.col(j));
    }
  });
  MixedTermReport rep;
  rep.lhs = mean_of(lhs);
  rep.rhs = mean_of(rhs);
  const double se = std::hypot(rep.lhs.se, rep.rhs.se);
  const double gap = std::abs(rep.lhs.mean - rep.rhs.mean);
  rep.z = se > 0.0 ? gap / se : (gap == 0.0 ? 0.0 : std::numeric_limits<double>::infinity());
  return rep;
}

}  // namespace stad::stein
