// Copyright 2026 The StAD Lab Authors
// SPDX-License-Identifier: Apache-2.0

// stad_lab: trace benchmarks, teacher training, divergence distillation and
// likelihood comparisons driven by one JSON config per experiment.

#include <chrono>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <limits>
#include <memory>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "stad/odelik.hpp"
#include "stad/parallel.hpp"
#include "stad/stad.hpp"
#include "stad/targets.hpp"
#include "stad/trace.hpp"
#include "stad/train.hpp"

namespace fs = std::filesystem;
using json = nlohmann::json;
using namespace stad;

namespace {

enum Exit { kOk = 0, kGeneric = 1, kConfig = 2, kMissing = 3, kShape = 4, kNumeric = 5 };

struct CliError : std::runtime_error {
  CliError(int code, const std::string& what) : std::runtime_error(what), code(code) {}
  int code;
};

[[noreturn]] void die(int code, const std::string& msg) { throw CliError(code, msg); }

// ---------------------------------------------------------------------------
// Configuration

json default_config() {
  return json::parse(R"({
    "seed": 0,
    "target": {"name": "mixture2d", "n": 50000, "seed": 1, "normalize": true,
               "file": "", "context_dim": 0, "mean": [0.0, 0.0],
               "cov": [[1.0, 0.0], [0.0, 1.0]]},
    "schedule": {"family": "vp", "eps": 0.001, "T": 1.0, "beta_min": 0.1, "beta_max": 20.0,
                 "sigma_min": 0.01, "sigma_max": 50.0, "sigma_d": 1.0},
    "teacher": {"checkpoint": "", "analytic": false, "hidden": [64, 64, 64],
                "activation": "silu", "time_embedding": "log_t", "steps": 4000, "batch": 256,
                "lr": 0.002, "lr_final": 0.00002, "lr_schedule": "cosine", "clip_norm": 1.0,
                "heating": false, "heating_start": 64},
    "head": {"checkpoint": "", "hidden": [64, 64], "activation": "tanh",
             "time_embedding": "log_t"},
    "distill": {"steps": 3000, "batch": 256, "l": 0.0, "cache_size": 100000,
                "rebuild_period": 1000, "proposal": "uniform", "lr": 0.002,
                "lr_final": 0.00002, "lr_schedule": "cosine", "clip_norm": 1.0,
                "cutoff": {"R": 0.0, "mode": "cosine", "percentile": 99.5},
                "direct_mode": "h1", "wall_budget_s": 0.0},
    "likelihood": {"backend": "exact", "n_probes": 1, "probe_kind": "rademacher",
                   "backends": ["exact", "hutchinson:1", "hutchinson:8", "hutchpp:2",
                                "xtrace:4", "stad"],
                   "rtol": 1e-5, "atol": 1e-5, "n_test": 200, "test_seed": 9,
                   "base": "gaussian", "hutchpp_refresh": 6, "redraw_probes": false,
                   "bpd_offset": null, "hist_bins": 40},
    "bench": {"dims": [4, 16, 64, 256], "budgets": [1, 2, 4, 8, 16, 32, 64, 128, 256, 512],
              "trials": [65536, 16384, 4096, 1024], "psd": true}
  })");
}

std::string line_col(const std::string& text, std::size_t byte) {
  std::size_t line = 1, col = 1;
  for (std::size_t i = 0; i < std::min(byte, text.size()); ++i) {
    if (text[i] == '\n') {
      ++line;
      col = 1;
    } else {
      ++col;
    }
  }
  return "line " + std::to_string(line) + ", column " + std::to_string(col);
}

json parse_json_text(const std::string& text, const std::string& where) {
  try {
    return json::parse(text);
  } catch (const json::parse_error& e) {
    die(kConfig, where + ": JSON parse error at " + line_col(text, e.byte) + ": " + e.what());
  }
}

json read_json_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) die(kMissing, "cannot open config " + path);
  std::stringstream ss;
  ss << in.rdbuf();
  return parse_json_text(ss.str(), path);
}

void apply_override(json& cfg, const std::string& assignment) {
  const auto eq = assignment.find('=');
  if (eq == std::string::npos || eq == 0) die(kConfig, "override must be key.path=value: " + assignment);
  const std::string key = assignment.substr(0, eq), text = assignment.substr(eq + 1);
  json value;
  try {
    value = json::parse(text);
  } catch (const json::parse_error&) {
    value = text;
  }
  json* node = &cfg;
  std::stringstream ks(key);
  std::string part;
  std::vector<std::string> parts;
  while (std::getline(ks, part, '.')) parts.push_back(part);
  for (std::size_t i = 0; i < parts.size(); ++i) {
    if (!node->is_object()) die(kConfig, "override path " + key + " crosses a non-object");
    if (i + 1 == parts.size()) {
      (*node)[parts[i]] = value;
    } else {
      node = &(*node)[parts[i]];
    }
  }
}

template <class T>
T get(const json& cfg, const std::string& path) {
  const json* node = &cfg;
  std::stringstream ks(path);
  std::string part;
  while (std::getline(ks, part, '.')) {
    if (!node->is_object() || !node->contains(part)) die(kConfig, "missing config key " + path);
    node = &(*node)[part];
  }
  try {
    return node->get<T>();
  } catch (const json::exception& e) {
    die(kConfig, "config key " + path + ": " + e.what());
  }
}

// ---------------------------------------------------------------------------
// Shared plumbing

struct Run {
  json cfg;
  fs::path out;
  std::uint64_t seed = 0;
};

void require_file(const std::string& path, const std::string& what) {
  if (path.empty()) die(kMissing, what + " path is empty");
  if (!fs::exists(path)) die(kMissing, what + " not found: " + path);
}

void write_text(const fs::path& p, const std::string& text) {
  std::ofstream out(p);
  if (!out) die(kMissing, "cannot write " + p.string());
  out << text;
}

void write_effective_config(const Run& r) { write_text(r.out / "effective_config.json", r.cfg.dump(2) + "\n"); }

dyn::Schedule schedule_of(const json& cfg) {
  return dyn::Schedule(dyn::ScheduleSpec::from_json(cfg.at("schedule").dump()));
}

Vector vec_of(const json& j) {
  auto v = j.get<std::vector<double>>();
  return Eigen::Map<const Vector>(v.data(), static_cast<Index>(v.size()));
}

Matrix mat_of(const json& j) {
  auto rows = j.get<std::vector<std::vector<double>>>();
  Matrix m(static_cast<Index>(rows.size()), rows.empty() ? 0 : static_cast<Index>(rows[0].size()));
  for (Index i = 0; i < m.rows(); ++i) {
    if (static_cast<Index>(rows[i].size()) != m.cols()) die(kConfig, "ragged matrix in config");
    for (Index k = 0; k < m.cols(); ++k) m(i, k) = rows[i][k];
  }
  return m;
}

/// Named analytic targets; empty optional for file-backed data.
std::optional<targets::GaussianMixture> named_target(const json& cfg) {
  const auto name = get<std::string>(cfg, "target.name");
  if (name == "file") return std::nullopt;
  if (name == "mixture2d") return targets::make_mixture2d();
  if (name == "two_moons") return targets::make_two_moons();
  if (name == "cosmos_like") return targets::make_cosmos_like(get<std::uint64_t>(cfg, "target.seed"));
  if (name == "gaussian") return targets::make_gaussian(vec_of(cfg["target"]["mean"]), mat_of(cfg["target"]["cov"]));
  die(kConfig, "unknown target '" + name + "'");
}

/// Training data plus the analytic target when there is one. Normalization is
/// applied to the data; the analytic target is mapped into the same frame.
struct Data {
  targets::Dataset train;
  std::optional<targets::GaussianMixture> target;  // normalized frame
};

Data load_data(const json& cfg) {
  Data d;
  auto tgt = named_target(cfg);
  if (tgt) {
    d.train = targets::sample_dataset(*tgt, get<Index>(cfg, "target.n"), get<std::uint64_t>(cfg, "target.seed"));
  } else {
    const auto file = get<std::string>(cfg, "target.file");
    require_file(file, "dataset");
    if (fs::path(file).extension() == ".csv")
      d.train = targets::read_csv(file, get<int>(cfg, "target.context_dim"));
    else
      d.train = targets::read_raw(file);
  }
  if (get<bool>(cfg, "target.normalize")) targets::normalize(d.train);
  if (tgt) d.target = tgt->affine(d.train.shift, d.train.scale);
  return d;
}

/// Test points in the training frame: fresh draws from the analytic target,
/// or the tail of the file-backed data.
targets::Dataset test_data(const json& cfg, const Data& d) {
  const Index n = get<Index>(cfg, "likelihood.n_test");
  if (d.target) return targets::sample_dataset(*d.target, n, get<std::uint64_t>(cfg, "likelihood.test_seed"));
  const Index take = std::min(n, d.train.size());
  return targets::select_columns(d.train, d.train.size() - take, take);
}

net::OptimizerConfig optimizer_of(const json& sec, std::int64_t steps) {
  net::OptimizerConfig o;
  o.lr = sec.at("lr").get<double>();
  o.lr_final = sec.at("lr_final").get<double>();
  o.schedule = net::lr_schedule_from_string(sec.at("lr_schedule").get<std::string>());
  o.clip_norm = sec.at("clip_norm").get<double>();
  o.total_steps = steps;
  return o;
}

net::NetSpec spec_of(const json& sec, int in, int ctx, int out) {
  net::NetSpec s;
  s.input_dim = in;
  s.context_dim = ctx;
  s.hidden = sec.at("hidden").get<std::vector<int>>();
  s.output_dim = out;
  s.activation = net::activation_from_string(sec.at("activation").get<std::string>());
  s.time_embedding = net::time_embedding_from_string(sec.at("time_embedding").get<std::string>());
  return s;
}

json dataset_frame(const targets::Dataset& ds) {
  return {{"shift", std::vector<double>(ds.shift.data(), ds.shift.data() + ds.shift.size())},
          {"scale", std::vector<double>(ds.scale.data(), ds.scale.data() + ds.scale.size())}};
}

/// Teacher field from a checkpoint, or the analytic field of the target.
std::shared_ptr<const dyn::VelocityField> load_teacher(const json& cfg, const Data& d) {
  if (get<bool>(cfg, "teacher.analytic")) {
    if (!d.target) die(kConfig, "analytic teacher needs a named target");
    return std::make_shared<dyn::AnalyticMixtureField>(schedule_of(cfg), *d.target);
  }
  const auto path = get<std::string>(cfg, "teacher.checkpoint");
  require_file(path, "teacher checkpoint");
  net::CheckpointMeta meta;
  auto net = std::make_shared<net::FieldNet>(net::load_checkpoint(path, &meta));
  if (net->spec().input_dim != d.train.dim() || net->spec().context_dim != d.train.context_dim())
    die(kShape, "teacher checkpoint expects D=" + std::to_string(net->spec().input_dim) + ", C=" +
                    std::to_string(net->spec().context_dim) + " but the data has D=" +
                    std::to_string(d.train.dim()) + ", C=" + std::to_string(d.train.context_dim()));
  dyn::Schedule sched = meta.schedule_json.empty()
                            ? schedule_of(cfg)
                            : dyn::Schedule(dyn::ScheduleSpec::from_json(meta.schedule_json));
  if (meta.kind == "score") return std::make_shared<dyn::ScoreNetField>(sched, net);
  if (meta.kind == "velocity") return std::make_shared<dyn::VelocityNetField>(sched, net);
  die(kShape, "checkpoint " + path + " holds a '" + meta.kind + "' net, not a teacher");
}

std::shared_ptr<const stein::DivergenceHead> load_head(const json& cfg, const dyn::VelocityField& teacher) {
  const auto path = get<std::string>(cfg, "head.checkpoint");
  require_file(path, "head checkpoint");
  auto head = std::make_shared<stein::DivergenceHead>(stein::DivergenceHead::load(path));
  if (head->net().spec().input_dim != teacher.dim() ||
      head->net().spec().context_dim != teacher.context_dim())
    die(kShape, "head checkpoint does not match the teacher dimensions");
  return head;
}

void write_loss_csv(const fs::path& p, const std::vector<double>& loss) {
  std::ostringstream os;
  os << "step,loss\n" << std::setprecision(10);
  for (std::size_t i = 0; i < loss.size(); ++i) os << i << ',' << loss[i] << '\n';
  write_text(p, os.str());
}

// ---------------------------------------------------------------------------
// Commands

int cmd_bench_trace(const Run& r) {
  trace::BenchmarkConfig bc;
  bc.dims = get<std::vector<int>>(r.cfg, "bench.dims");
  bc.budgets = get<std::vector<int>>(r.cfg, "bench.budgets");
  bc.trials = get<std::vector<int>>(r.cfg, "bench.trials");
  bc.psd = get<bool>(r.cfg, "bench.psd");
  bc.seed = r.seed;
  if (bc.trials.size() == 1 && bc.dims.size() > 1) bc.trials.assign(bc.dims.size(), bc.trials[0]);
  if (bc.trials.size() != bc.dims.size()) die(kConfig, "bench.trials must match bench.dims");
  auto rows = trace::random_matrix_benchmark(bc);
  std::ostringstream os;
  trace::write_benchmark_csv(os, rows);
  write_text(r.out / "trace_benchmark.csv", os.str());
  std::cout << "wrote " << (r.out / "trace_benchmark.csv").string() << " (" << rows.size() << " rows)\n";
  return kOk;
}

int cmd_train(const Run& r, bool flow) {
  Data d = load_data(r.cfg);
  dyn::Schedule sched = schedule_of(r.cfg);
  const json& t = r.cfg["teacher"];
  const int dim = static_cast<int>(d.train.dim()), ctx = static_cast<int>(d.train.context_dim());
  auto net = net::FieldNet(spec_of(t, dim, ctx, dim));
  Rng init(r.seed, {0x7EAC4E2ULL});
  net.init(init);
  train::TrainHyper h;
  h.steps = t.at("steps").get<std::int64_t>();
  h.batch = t.at("batch").get<int>();
  h.heating = t.at("heating").get<bool>();
  h.heating_start = t.at("heating_start").get<int>();
  h.optimizer = optimizer_of(t, h.steps);
  h.seed = r.seed;
  auto res = flow ? train::train_flow_cfm(net, d.train, sched, h) : train::train_score_dsm(net, d.train, sched, h);
  json extra = {{"seed", r.seed}, {"steps", res.steps_done}, {"aborted", res.aborted},
                {"frame", dataset_frame(d.train)}};
  const auto ckpt = r.out / "teacher.ckpt";
  net::save_checkpoint(ckpt.string(), net, {flow ? "velocity" : "score", sched.spec().to_json(), extra.dump()});
  write_loss_csv(r.out / "loss.csv", res.loss);
  std::cout << "wrote " << ckpt.string() << " after " << res.steps_done << " steps, final loss "
            << (res.loss.empty() ? 0.0 : res.loss.back()) << "\n";
  if (res.aborted) {
    std::cerr << "training aborted: " << res.abort_reason << "\n";
    return kNumeric;
  }
  return kOk;
}

int cmd_distill(const Run& r) {
  Data d = load_data(r.cfg);
  auto teacher = load_teacher(r.cfg, d);
  const json& s = r.cfg["distill"];
  auto head_net = std::make_shared<net::FieldNet>(
      spec_of(r.cfg["head"], static_cast<int>(teacher->dim()), teacher->context_dim(), 1));
  Rng init(r.seed, {0x4EADULL});
  head_net->init(init);
  stein::SteinHyper h;
  h.l = s.at("l").get<double>();
  h.steps = s.at("steps").get<std::int64_t>();
  h.batch = s.at("batch").get<int>();
  h.rebuild_period = s.at("rebuild_period").get<std::int64_t>();
  h.cache_size = s.at("cache_size").get<Index>();
  h.proposal = stein::time_proposal_from_string(s.at("proposal").get<std::string>());
  h.optimizer = optimizer_of(s, h.steps);
  h.seed = r.seed;
  stein::CutoffSpec cut;
  const json& c = s.at("cutoff");
  cut.R = c.at("R").is_null() ? std::numeric_limits<double>::infinity() : c.at("R").get<double>();
  cut.mode = stein::cutoff_mode_from_string(c.at("mode").get<std::string>());
  cut.percentile = c.at("percentile").get<double>();
  auto rep = stein::distill(*teacher, d.train, *head_net, h, cut, s.at("wall_budget_s").get<double>());
  stein::DivergenceHead head(head_net, stein::HeadKind::kStein, cut);
  json extra = {{"seed", r.seed}, {"frame", dataset_frame(d.train)}};
  const auto ckpt = r.out / "head.ckpt";
  head.save(ckpt.string(), teacher->schedule().spec().to_json(), extra.dump());
  write_text(r.out / "distill_report.json", rep.to_json() + "\n");
  write_loss_csv(r.out / "loss.csv", rep.loss);
  std::cout << "wrote " << ckpt.string() << ", R = " << rep.R << ", outside 2R = "
            << rep.fraction_outside_2R << "\n";
  if (rep.aborted) {
    std::cerr << "distillation aborted: " << rep.abort_reason << "\n";
    return kNumeric;
  }
  return kOk;
}

int cmd_direct_distill(const Run& r) {
  Data d = load_data(r.cfg);
  auto teacher = load_teacher(r.cfg, d);
  const json& s = r.cfg["distill"];
  const auto mode = train::direct_mode_from_string(s.at("direct_mode").get<std::string>());
  auto head_net = std::make_shared<net::FieldNet>(
      spec_of(r.cfg["head"], static_cast<int>(teacher->dim()), teacher->context_dim(), 1));
  Rng init(r.seed, {0x4EADULL});
  head_net->init(init);
  train::TrainHyper h;
  h.steps = s.at("steps").get<std::int64_t>();
  h.batch = s.at("batch").get<int>();
  h.optimizer = optimizer_of(s, h.steps);
  h.seed = r.seed;
  const auto t0 = std::chrono::steady_clock::now();
  auto cache = train::build_direct_cache(*teacher, d.train, mode, s.at("cache_size").get<Index>(), r.seed);
  const double cache_s = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  auto res = train::fit_direct_cache(*head_net, cache, h, s.at("wall_budget_s").get<double>());
  const auto kind = mode == train::DirectMode::kH1 ? stein::HeadKind::kDirectH1 : stein::HeadKind::kDirectH1PlusB;
  stein::DivergenceHead head(head_net, kind, stein::CutoffSpec::none());
  json extra = {{"seed", r.seed}, {"frame", dataset_frame(d.train)}};
  const auto ckpt = r.out / "head.ckpt";
  head.save(ckpt.string(), teacher->schedule().spec().to_json(), extra.dump());
  std::vector<double> tail(res.loss.end() - std::min<std::size_t>(100, res.loss.size()), res.loss.end());
  double mean_tail = 0.0;
  for (double v : tail) mean_tail += v / static_cast<double>(std::max<std::size_t>(1, tail.size()));
  json report = {{"mode", train::to_string(mode)}, {"steps", res.steps_done}, {"final_loss", mean_tail},
                 {"wall_time_cache_s", cache_s}, {"wall_time_train_s", res.wall_s},
                 {"aborted", res.aborted}};
  write_text(r.out / "distill_report.json", report.dump(2) + "\n");
  write_loss_csv(r.out / "loss.csv", res.loss);
  std::cout << "wrote " << ckpt.string() << " (" << train::to_string(mode) << ")\n";
  return res.aborted ? kNumeric : kOk;
}

ode::BackendConfig backend_of(const json& cfg, const std::string& spec,
                              const std::shared_ptr<const stein::DivergenceHead>& head) {
  ode::BackendConfig b;
  std::string name = spec;
  int n = get<int>(cfg, "likelihood.n_probes");
  if (auto colon = spec.find(':'); colon != std::string::npos) {
    name = spec.substr(0, colon);
    try {
      n = std::stoi(spec.substr(colon + 1));
    } catch (const std::exception&) {
      die(kConfig, "bad probe count in backend '" + spec + "'");
    }
  }
  b.kind = ode::backend_kind_from_string(name);
  b.probes.count = n;
  b.probes.kind = trace::probe_kind_from_string(get<std::string>(cfg, "likelihood.probe_kind"));
  b.probes.seed = get<std::uint64_t>(cfg, "seed");
  b.hutchpp_refresh = get<int>(cfg, "likelihood.hutchpp_refresh");
  b.redraw_probes = get<bool>(cfg, "likelihood.redraw_probes");
  if (b.kind == ode::BackendKind::kStad) {
    if (!head) die(kConfig, "backend stad needs head.checkpoint");
    b.head = head;
  }
  return b;
}

ode::LogDensityFn base_of(const json& cfg, const dyn::VelocityField& teacher) {
  const auto base = get<std::string>(cfg, "likelihood.base");
  if (base == "gaussian") return ode::gaussian_prior(teacher.schedule(), teacher.dim());
  if (base == "analytic") {
    auto* a = dynamic_cast<const dyn::AnalyticMixtureField*>(&teacher);
    if (!a) die(kConfig, "likelihood.base = analytic needs an analytic teacher");
    return ode::analytic_prior(*a);
  }
  die(kConfig, "unknown likelihood.base '" + base + "'");
}

ode::SolverConfig solver_of(const json& cfg) {
  ode::SolverConfig s;
  s.rtol = get<double>(cfg, "likelihood.rtol");
  s.atol = get<double>(cfg, "likelihood.atol");
  return s;
}

int cmd_loglik(const Run& r) {
  Data d = load_data(r.cfg);
  auto teacher = load_teacher(r.cfg, d);
  const auto spec = get<std::string>(r.cfg, "likelihood.backend");
  std::shared_ptr<const stein::DivergenceHead> head;
  if (spec.rfind("stad", 0) == 0) head = load_head(r.cfg, *teacher);
  auto backend = backend_of(r.cfg, spec, head);
  auto base = base_of(r.cfg, *teacher);
  auto solver = solver_of(r.cfg);
  auto test = test_data(r.cfg, d);
  const auto* analytic = dynamic_cast<const dyn::AnalyticMixtureField*>(teacher.get());
  const json& off = r.cfg["likelihood"]["bpd_offset"];
  const Index n = test.size();
  std::vector<ode::LikelihoodReport> reps(static_cast<std::size_t>(n));
  parallel_for(static_cast<std::size_t>(n), [&](std::size_t j) {
    Vector x = test.x.col(static_cast<Index>(j));
    Vector c;
    if (test.context_dim() > 0) c = test.context.col(static_cast<Index>(j));
    reps[j] = ode::log_likelihood(*teacher, backend, x, test.context_dim() > 0 ? &c : nullptr, base,
                                  solver, r.seed + j);
  });
  std::ostringstream os;
  os << "index,log_prob,delta_logp,log_prob_raw,bpd,nfe,matvecs,accepted,rejected,backend,oracle,wall_time\n"
     << std::setprecision(12);
  const double log_jac = test.log_scale_sum();
  for (Index j = 0; j < n; ++j) {
    const auto& rep = reps[static_cast<std::size_t>(j)];
    const double raw = rep.log_prob - log_jac;
    const double bpd = off.is_null() ? std::numeric_limits<double>::quiet_NaN()
                                     : ode::bits_per_dimension(raw, teacher->dim(), off.get<double>());
    double oracle = std::numeric_limits<double>::quiet_NaN();
    if (analytic) {
      Vector c;
      if (test.context_dim() > 0) c = test.context.col(j);
      oracle = analytic->log_marginal(test.x.col(j), teacher->schedule().t0(),
                                      test.context_dim() > 0 ? &c : nullptr);
    }
    os << j << ',' << rep.log_prob << ',' << rep.delta_logp << ',' << raw << ',' << bpd << ','
       << rep.nfe << ',' << rep.matvecs << ',' << rep.stats.accepted << ',' << rep.stats.rejected
       << ',' << rep.backend << ',' << oracle << ',' << rep.wall_time << '\n';
  }
  write_text(r.out / "loglik.csv", os.str());
  std::cout << "wrote " << (r.out / "loglik.csv").string() << " (" << n << " samples, " << backend.label() << ")\n";
  return kOk;
}

int cmd_report(const Run& r) {
  Data d = load_data(r.cfg);
  auto teacher = load_teacher(r.cfg, d);
  auto specs = get<std::vector<std::string>>(r.cfg, "likelihood.backends");
  std::shared_ptr<const stein::DivergenceHead> head;
  for (const auto& s : specs)
    if (s.rfind("stad", 0) == 0) head = load_head(r.cfg, *teacher);
  std::vector<ode::NamedBackend> list;
  for (const auto& s : specs) list.push_back({s, backend_of(r.cfg, s, head)});
  auto test = test_data(r.cfg, d);
  auto cmp = ode::compare_backends(*teacher, test.x, test.context_dim() > 0 ? &test.context : nullptr,
                                   list, base_of(r.cfg, *teacher), solver_of(r.cfg), r.seed);
  std::ostringstream m;
  ode::write_metrics_csv(m, cmp.metrics);
  write_text(r.out / "metrics.csv", m.str());
  const int bins = get<int>(r.cfg, "likelihood.hist_bins");
  std::ostringstream res;
  res << "index";
  for (const auto& run : cmp.runs) res << ',' << run.name;
  res << '\n' << std::setprecision(12);
  for (Index j = 0; j < test.size(); ++j) {
    res << j;
    for (const auto& v : cmp.residuals) res << ',' << v(j);
    res << '\n';
  }
  write_text(r.out / "residuals.csv", res.str());
  for (std::size_t k = 1; k < cmp.runs.size(); ++k) {
    std::ostringstream h;
    ode::write_histogram_csv(h, cmp.residuals[k], bins);
    std::string name = cmp.runs[k].name;
    for (char& ch : name)
      if (!std::isalnum(static_cast<unsigned char>(ch))) ch = '_';
    write_text(r.out / ("hist_" + name + ".csv"), h.str());
  }
  std::cout << m.str();
  return kOk;
}

int exit_code_for(const Error& e) {
  switch (e.code()) {
    case ErrorCode::kConfigError: return kConfig;
    case ErrorCode::kIo: return kMissing;
    case ErrorCode::kDimensionMismatch:
    case ErrorCode::kShapeError:
    case ErrorCode::kCorruptModel: return kShape;
    case ErrorCode::kNumericalAbort:
    case ErrorCode::kNonFiniteField:
    case ErrorCode::kNonFiniteOperator:
    case ErrorCode::kStiffness: return kNumeric;
    default: return kGeneric;
  }
}

}  // namespace

/// Recursive merge of `src` into `dst`; objects merge, other values replace.
void overlay(json& dst, const json& src) {
  if (!src.is_object() || !dst.is_object()) {
    dst = src;
    return;
  }
  for (auto it = src.begin(); it != src.end(); ++it) overlay(dst[it.key()], it.value());
}

int main(int argc, char** argv) {
  CLI::App app{"stad_lab: divergence estimators and likelihoods for probability-flow ODEs"};
  app.require_subcommand(1);
  std::string config_path;
  std::vector<std::string> overrides;
  std::string out_dir = "out";
  std::int64_t seed = -1;
  int threads = 0;
  app.add_option("-c,--config", config_path, "JSON experiment config");
  app.add_option("-s,--set", overrides, "Override a config key: dotted.path=value");
  app.add_option("-o,--out", out_dir, "Output directory");
  app.add_option("--seed", seed, "Root seed (overrides config seed)");
  app.add_option("--threads", threads, "Worker threads (default: STAD_LAB_THREADS or all cores)");

  std::vector<int> dims;
  int trials = 0;
  auto* bench = app.add_subcommand("bench-trace", "Random-matrix trace estimator benchmark");
  bench->add_option("--dims", dims, "Matrix dimensions");
  bench->add_option("--trials", trials, "Matrices per dimension");
  auto* tscore = app.add_subcommand("train-score", "Train a score teacher by denoising score matching");
  auto* tflow = app.add_subcommand("train-flow", "Train a velocity teacher by conditional flow matching");
  auto* dist = app.add_subcommand("distill", "Distill a Stein divergence head");
  auto* direct = app.add_subcommand("direct-distill", "Regress a divergence head on Hutchinson targets");
  std::string backend;
  auto* loglik = app.add_subcommand("loglik", "Per-sample log-likelihoods with one backend");
  loglik->add_option("--backend", backend, "exact, hutchinson[:n], hutchpp[:n], xtrace[:n] or stad");
  auto* report = app.add_subcommand("report", "Compare all configured backends against the exact trace");
  for (auto* sub : {bench, tscore, tflow, dist, direct, loglik, report}) {
    sub->add_option("-c,--config", config_path, "JSON experiment config");
    sub->add_option("-s,--set", overrides, "Override a config key: dotted.path=value");
    sub->add_option("-o,--out", out_dir, "Output directory");
    sub->add_option("--seed", seed, "Root seed");
    sub->add_option("--threads", threads, "Worker threads");
  }

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? 0 : kConfig;
  }

  try {
    Run r;
    r.cfg = default_config();
    if (!config_path.empty()) overlay(r.cfg, read_json_file(config_path));
    for (const auto& o : overrides) apply_override(r.cfg, o);
    if (!dims.empty()) r.cfg["bench"]["dims"] = dims;
    if (trials > 0) r.cfg["bench"]["trials"] = std::vector<int>{trials};
    if (!backend.empty()) r.cfg["likelihood"]["backend"] = backend;
    if (seed >= 0) r.cfg["seed"] = seed;
    r.seed = get<std::uint64_t>(r.cfg, "seed");
    if (threads <= 0) {
      if (const char* env = std::getenv("STAD_LAB_THREADS")) threads = std::atoi(env);
    }
    if (threads > 0) set_thread_count(threads);
    r.out = out_dir;
    fs::create_directories(r.out);
    write_effective_config(r);

    if (*bench) return cmd_bench_trace(r);
    if (*tscore) return cmd_train(r, false);
    if (*tflow) return cmd_train(r, true);
    if (*dist) return cmd_distill(r);
    if (*direct) return cmd_direct_distill(r);
    if (*loglik) return cmd_loglik(r);
    if (*report) return cmd_report(r);
  } catch (const CliError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return e.code;
  } catch (const Error& e) {
    std::cerr << "error: " << e.what() << "\n";
    return exit_code_for(e);
  } catch (const json::exception& e) {
    std::cerr << "error: config: " << e.what() << "\n";
    return kConfig;
  } catch (const fs::filesystem_error& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kMissing;
  }
  return kGeneric;
}
