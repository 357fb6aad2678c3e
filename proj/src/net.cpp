// Copyright 2026 The StAD Lab Authors
// SPDX-License-Identifier: Apache-2.0

#include "stad/net.hpp"

#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <numbers>

#include <json.hpp>

namespace stad::net {

using json = nlohmann::json;

const char* to_string(Activation a) {
  return a == Activation::kTanh ? "tanh" : "silu";
}

const char* to_string(TimeEmbedding e) {
  switch (e) {
    case TimeEmbedding::kNone: return "none";
    case TimeEmbedding::kLogT: return "log_t";
    case TimeEmbedding::kRawT: return "raw_t";
  }
  return "none";
}

Activation activation_from_string(const std::string& s) {
  if (s == "tanh") return Activation::kTanh;
  if (s == "silu") return Activation::kSilu;
  fail(ErrorCode::kConfigError, "unknown activation '" + s + "'");
}

TimeEmbedding time_embedding_from_string(const std::string& s) {
  if (s == "none") return TimeEmbedding::kNone;
  if (s == "log_t") return TimeEmbedding::kLogT;
  if (s == "raw_t") return TimeEmbedding::kRawT;
  fail(ErrorCode::kConfigError, "unknown time embedding '" + s + "'");
}

int NetSpec::feature_dim() const {
  return input_dim + (time_embedding == TimeEmbedding::kNone ? 0 : 1) + context_dim;
}

std::vector<int> NetSpec::layer_dims() const {
  std::vector<int> dims{feature_dim()};
  dims.insert(dims.end(), hidden.begin(), hidden.end());
  dims.push_back(output_dim);
  return dims;
}

namespace {

// sigma, sigma', sigma'' evaluated elementwise.
Matrix act(Activation a, const Matrix& z) {
  if (a == Activation::kTanh) return z.array().tanh().matrix();
  return (z.array() / (1.0 + (-z.array()).exp())).matrix();
}

Matrix act_d1(Activation a, const Matrix& z) {
  if (a == Activation::kTanh) return (1.0 - z.array().tanh().square()).matrix();
  Eigen::ArrayXXd s = 1.0 / (1.0 + (-z.array()).exp());
  return (s * (1.0 + z.array() * (1.0 - s))).matrix();
}

Matrix act_d2(Activation a, const Matrix& z) {
  if (a == Activation::kTanh) {
    Eigen::ArrayXXd y = z.array().tanh();
    return (-2.0 * y * (1.0 - y.square())).matrix();
  }
  Eigen::ArrayXXd s = 1.0 / (1.0 + (-z.array()).exp());
  return (s * (1.0 - s) * (2.0 + z.array() * (1.0 - 2.0 * s))).matrix();
}

}  // namespace

FieldNet::FieldNet(NetSpec spec) : spec_(std::move(spec)) {
  if (spec_.input_dim < 1 || spec_.output_dim < 1 || spec_.context_dim < 0)
    fail(ErrorCode::kShapeError, "net dims must be positive");
  auto dims = spec_.layer_dims();
  Index offset = 0;
  for (std::size_t k = 0; k + 1 < dims.size(); ++k) {
    if (dims[k + 1] < 1) fail(ErrorCode::kShapeError, "hidden width must be positive");
    Layer l{dims[k + 1], dims[k], offset, 0};
    offset += l.rows * l.cols;
    l.b_offset = offset;
    offset += l.rows;
    layers_.push_back(l);
  }
  params_ = Vector::Zero(offset);
}

void FieldNet::set_params(const Vector& p) {
  if (p.size() != params_.size())
    fail(ErrorCode::kShapeError, "parameter count " + std::to_string(p.size()) + " != " +
                                     std::to_string(params_.size()));
  if (!p.allFinite()) fail(ErrorCode::kCorruptModel, "non-finite parameters");
  params_ = p;
}

void FieldNet::init(Rng& rng) {
  for (const auto& l : layers_) {
    const double bound = std::sqrt(1.0 / static_cast<double>(l.cols));
    for (Index i = 0; i < l.rows * l.cols + l.rows; ++i)
      params_(l.w_offset + i) = bound * (2.0 * rng.uniform() - 1.0);
  }
}

Eigen::Map<const Matrix> FieldNet::weight(std::size_t k) const {
  const auto& l = layers_[k];
  return {params_.data() + l.w_offset, l.rows, l.cols};
}

Eigen::Map<const Vector> FieldNet::bias(std::size_t k) const {
  const auto& l = layers_[k];
  return {params_.data() + l.b_offset, l.rows};
}

void FieldNet::check_batch(const Batch& b) const {
  if (b.x.rows() != spec_.input_dim)
    fail(ErrorCode::kDimensionMismatch, "input rows " + std::to_string(b.x.rows()) +
                                            " != " + std::to_string(spec_.input_dim));
  if (b.t.size() != b.x.cols()) fail(ErrorCode::kDimensionMismatch, "one time per column");
  if (spec_.context_dim > 0) {
    if (!b.context || b.context->rows() != spec_.context_dim || b.context->cols() != b.x.cols())
      fail(ErrorCode::kDimensionMismatch, "context shape");
  }
  if (spec_.time_embedding == TimeEmbedding::kLogT && (b.t.array() <= 0.0).any())
    fail(ErrorCode::kTimeRange, "log-time embedding needs t > 0");
}

void FieldNet::check_output(const Matrix& y, const char* what) const {
  if (y.allFinite()) return;
  if (!params_.allFinite()) fail(ErrorCode::kCorruptModel, "non-finite parameters");
  fail(ErrorCode::kNonFiniteField, std::string("non-finite ") + what);
}

Matrix FieldNet::features(const Batch& b) const {
  check_batch(b);
  const Index n = b.x.cols();
  Matrix h(spec_.feature_dim(), n);
  h.topRows(spec_.input_dim) = b.x;
  Index row = spec_.input_dim;
  if (spec_.time_embedding == TimeEmbedding::kLogT) {
    h.row(row++) = b.t.array().log().matrix().transpose();
  } else if (spec_.time_embedding == TimeEmbedding::kRawT) {
    h.row(row++) = b.t.transpose();
  }
  if (spec_.context_dim > 0) h.bottomRows(spec_.context_dim) = *b.context;
  return h;
}

Matrix FieldNet::tangent_features(const Matrix& u) const {
  Matrix hd = Matrix::Zero(spec_.feature_dim(), u.cols());
  hd.topRows(spec_.input_dim) = u;
  return hd;
}

FieldNet::Trace FieldNet::run(const Matrix& h0) const {
  Trace tr;
  tr.h.push_back(h0);
  for (std::size_t k = 0; k < layers_.size(); ++k) {
    Matrix z = weight(k) * tr.h.back();
    z.colwise() += bias(k);
    if (k + 1 < layers_.size()) tr.h.push_back(act(spec_.activation, z));
    tr.z.push_back(std::move(z));
  }
  return tr;
}

Matrix FieldNet::forward(const Batch& b) const {
  Trace tr = run(features(b));
  check_output(tr.z.back(), "network output");
  return std::move(tr.z.back());
}

Matrix FieldNet::jvp(const Batch& b, const Matrix& tangent) const {
  if (tangent.rows() != spec_.input_dim || tangent.cols() != b.x.cols())
    fail(ErrorCode::kDimensionMismatch, "tangent shape");
  Matrix h = features(b);
  Matrix hd = tangent_features(tangent);
  for (std::size_t k = 0; k < layers_.size(); ++k) {
    Matrix z = weight(k) * h;
    z.colwise() += bias(k);
    Matrix zd = weight(k) * hd;
    if (k + 1 == layers_.size()) {
      check_output(zd, "Jacobian-vector product");
      return zd;
    }
    h = act(spec_.activation, z);
    hd = act_d1(spec_.activation, z).cwiseProduct(zd);
  }
  return {};
}

Matrix FieldNet::jvp_block(const Vector& x, double t, const Vector* context,
                           const Matrix& tangents) const {
  if (tangents.rows() != spec_.input_dim)
    fail(ErrorCode::kDimensionMismatch, "tangent rows != input dim");
  Vector tv = Vector::Constant(1, t);
  Matrix xm = x;
  Matrix cm;
  if (context) cm = *context;
  Matrix h = features(Batch{xm, tv, context ? &cm : nullptr});
  Matrix hd = Matrix::Zero(spec_.feature_dim(), tangents.cols());
  hd.topRows(spec_.input_dim) = tangents;
  for (std::size_t k = 0; k < layers_.size(); ++k) {
    Vector z = weight(k) * h;
    z += bias(k);
    Matrix zd = weight(k) * hd;
    if (k + 1 == layers_.size()) {
      check_output(zd, "Jacobian-vector product");
      return zd;
    }
    h = act(spec_.activation, z);
    const Vector d1 = act_d1(spec_.activation, z);
    hd = d1.asDiagonal() * zd;
  }
  return {};
}

Matrix FieldNet::jacobian(const Vector& x, double t, const Vector* context) const {
  return jvp_block(x, t, context, Matrix::Identity(spec_.input_dim, spec_.input_dim));
}

Matrix FieldNet::vjp(const Batch& b, const Matrix& cotangent) const {
  if (cotangent.rows() != spec_.output_dim || cotangent.cols() != b.x.cols())
    fail(ErrorCode::kDimensionMismatch, "cotangent shape");
  Trace tr = run(features(b));
  Matrix zb = cotangent;
  for (std::size_t k = layers_.size(); k-- > 0;) {
    Matrix hb = weight(k).transpose() * zb;
    if (k == 0) {
      Matrix g = hb.topRows(spec_.input_dim);
      check_output(g, "input gradient");
      return g;
    }
    zb = act_d1(spec_.activation, tr.z[k - 1]).cwiseProduct(hb);
  }
  return {};
}

Matrix FieldNet::input_gradient(const Batch& b) const {
  return value_and_input_gradient(b).grad;
}

FieldNet::ValueAndGrad FieldNet::value_and_input_gradient(const Batch& b) const {
  if (spec_.output_dim != 1) fail(ErrorCode::kShapeError, "input gradient needs a scalar head");
  Trace tr = run(features(b));
  ValueAndGrad out;
  out.value = tr.z.back().row(0).transpose();
  check_output(out.value, "head output");
  Matrix zb = Matrix::Ones(1, b.x.cols());
  for (std::size_t k = layers_.size(); k-- > 0;) {
    Matrix hb = weight(k).transpose() * zb;
    if (k == 0) {
      out.grad = hb.topRows(spec_.input_dim);
      break;
    }
    zb = act_d1(spec_.activation, tr.z[k - 1]).cwiseProduct(hb);
  }
  check_output(out.grad, "input gradient");
  return out;
}

Vector FieldNet::param_gradient(const Batch& b, const Matrix& a, const Matrix* c,
                                const Matrix* u) const {
  const Index n = b.x.cols();
  if (a.rows() != spec_.output_dim || a.cols() != n)
    fail(ErrorCode::kDimensionMismatch, "output adjoint shape");
  const bool second = c != nullptr;
  if (second) {
    if (!u || c->rows() != spec_.output_dim || c->cols() != n || u->rows() != spec_.input_dim ||
        u->cols() != n)
      fail(ErrorCode::kDimensionMismatch, "tangent adjoint shape");
  }
  const std::size_t nl = layers_.size();
  Trace tr = run(features(b));

  // Tangent pass: hd[k] is the input tangent of layer k, zd[k] its output.
  std::vector<Matrix> hd, zd;
  if (second) {
    hd.push_back(tangent_features(*u));
    for (std::size_t k = 0; k < nl; ++k) {
      zd.push_back(weight(k) * hd.back());
      if (k + 1 < nl) hd.push_back(act_d1(spec_.activation, tr.z[k]).cwiseProduct(zd.back()));
    }
  }

  Vector grad = Vector::Zero(params_.size());
  Matrix zb = a;
  Matrix zdb = second ? *c : Matrix();
  for (std::size_t k = nl; k-- > 0;) {
    const auto& l = layers_[k];
    Eigen::Map<Matrix> gw(grad.data() + l.w_offset, l.rows, l.cols);
    Eigen::Map<Vector> gb(grad.data() + l.b_offset, l.rows);
    gw.noalias() += zb * tr.h[k].transpose();
    gb += zb.rowwise().sum();
    if (second) gw.noalias() += zdb * hd[k].transpose();
    if (k == 0) break;
    Matrix hb = weight(k).transpose() * zb;
    Matrix d1 = act_d1(spec_.activation, tr.z[k - 1]);
    if (second) {
      Matrix hdb = weight(k).transpose() * zdb;
      zb = d1.cwiseProduct(hb) +
           act_d2(spec_.activation, tr.z[k - 1]).cwiseProduct(zd[k - 1]).cwiseProduct(hdb);
      zdb = d1.cwiseProduct(hdb);
    } else {
      zb = d1.cwiseProduct(hb);
    }
  }
  if (!grad.allFinite()) fail(ErrorCode::kNumericalAbort, "non-finite parameter gradient");
  return grad;
}

// ---------------------------------------------------------------------------
// Optimizer

OptimizerKind optimizer_kind_from_string(const std::string& s) {
  if (s == "adam") return OptimizerKind::kAdam;
  if (s == "adamw") return OptimizerKind::kAdamW;
  fail(ErrorCode::kConfigError, "unknown optimizer '" + s + "'");
}

LrSchedule lr_schedule_from_string(const std::string& s) {
  if (s == "constant") return LrSchedule::kConstant;
  if (s == "step_halving") return LrSchedule::kStepHalving;
  if (s == "cosine") return LrSchedule::kCosine;
  fail(ErrorCode::kConfigError, "unknown lr schedule '" + s + "'");
}

Optimizer::Optimizer(OptimizerConfig cfg, Index num_params)
    : cfg_(cfg), m_(Vector::Zero(num_params)), v_(Vector::Zero(num_params)) {
  if (cfg_.lr <= 0.0) fail(ErrorCode::kConfigError, "learning rate must be positive");
}

double Optimizer::learning_rate() const {
  switch (cfg_.schedule) {
    case LrSchedule::kConstant:
      return cfg_.lr;
    case LrSchedule::kStepHalving: {
      const auto halvings = step_ / std::max<std::int64_t>(1, cfg_.halving_period);
      return std::max(cfg_.lr_final, cfg_.lr * std::pow(0.5, static_cast<double>(halvings)));
    }
    case LrSchedule::kCosine: {
      const double total = static_cast<double>(std::max<std::int64_t>(1, cfg_.total_steps));
      const double frac = std::min(1.0, static_cast<double>(step_) / total);
      return cfg_.lr_final +
             0.5 * (cfg_.lr - cfg_.lr_final) * (1.0 + std::cos(std::numbers::pi * frac));
    }
  }
  return cfg_.lr;
}

double Optimizer::step(Vector& params, const Vector& grad) {
  if (grad.size() != params.size() || params.size() != m_.size())
    fail(ErrorCode::kShapeError, "gradient/parameter size mismatch");
  const double norm = grad.norm();
  if (!std::isfinite(norm)) fail(ErrorCode::kNumericalAbort, "non-finite gradient");
  Vector g = grad;
  if (cfg_.clip_norm > 0.0 && norm > cfg_.clip_norm) g *= cfg_.clip_norm / norm;
  if (cfg_.kind == OptimizerKind::kAdam && cfg_.weight_decay > 0.0) g += cfg_.weight_decay * params;

  const double lr = learning_rate();
  ++step_;
  m_ = cfg_.beta1 * m_ + (1.0 - cfg_.beta1) * g;
  v_ = cfg_.beta2 * v_ + (1.0 - cfg_.beta2) * g.cwiseAbs2();
  const double c1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(step_));
  const double c2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(step_));
  if (cfg_.kind == OptimizerKind::kAdamW && cfg_.weight_decay > 0.0)
    params *= 1.0 - lr * cfg_.weight_decay;
  params.array() -= lr * (m_.array() / c1) / ((v_.array() / c2).sqrt() + cfg_.eps);
  return norm;
}

// ---------------------------------------------------------------------------
// Checkpoints

namespace {

constexpr char kMagic[8] = {'S', 'T', 'A', 'D', 'N', 'E', 'T', '\0'};
static_assert(std::endian::native == std::endian::little,
              "checkpoint I/O assumes a little-endian host");

json spec_to_json(const NetSpec& s) {
  return {{"input_dim", s.input_dim},       {"context_dim", s.context_dim},
          {"hidden", s.hidden},             {"output_dim", s.output_dim},
          {"activation", to_string(s.activation)},
          {"time_embedding", to_string(s.time_embedding)}};
}

NetSpec spec_from_json(const json& j) {
  NetSpec s;
  s.input_dim = j.at("input_dim").get<int>();
  s.context_dim = j.at("context_dim").get<int>();
  s.hidden = j.at("hidden").get<std::vector<int>>();
  s.output_dim = j.at("output_dim").get<int>();
  s.activation = activation_from_string(j.at("activation").get<std::string>());
  s.time_embedding = time_embedding_from_string(j.at("time_embedding").get<std::string>());
  return s;
}

json parse_or_null(const std::string& s) {
  if (s.empty()) return nullptr;
  return json::parse(s);
}

}  // namespace

void save_checkpoint(const std::string& path, const FieldNet& net, const CheckpointMeta& meta) {
  json header = {{"format", "stad-net"},
                 {"version", kCheckpointVersion},
                 {"kind", meta.kind},
                 {"spec", spec_to_json(net.spec())},
                 {"num_params", net.num_params()},
                 {"schedule", parse_or_null(meta.schedule_json)},
                 {"meta", parse_or_null(meta.extra_json)}};
  const std::string text = header.dump();
  std::ofstream out(path, std::ios::binary);
  if (!out) fail(ErrorCode::kIo, "cannot write " + path);
  const std::uint64_t len = text.size();
  out.write(kMagic, sizeof kMagic);
  out.write(reinterpret_cast<const char*>(&len), sizeof len);
  out.write(text.data(), static_cast<std::streamsize>(text.size()));
  out.write(reinterpret_cast<const char*>(net.params().data()),
            static_cast<std::streamsize>(net.num_params() * sizeof(double)));
  if (!out) fail(ErrorCode::kIo, "short write to " + path);
}

FieldNet load_checkpoint(const std::string& path, CheckpointMeta* meta) {
  std::ifstream in(path, std::ios::binary);
  if (!in) fail(ErrorCode::kIo, "cannot open " + path);
  char magic[8];
  std::uint64_t len = 0;
  in.read(magic, sizeof magic);
  in.read(reinterpret_cast<char*>(&len), sizeof len);
  if (!in || std::memcmp(magic, kMagic, sizeof kMagic) != 0 || len > (1u << 24))
    fail(ErrorCode::kCorruptModel, path + ": not a network checkpoint");
  std::string text(len, '\0');
  in.read(text.data(), static_cast<std::streamsize>(len));
  json header;
  NetSpec spec;
  Index num_params = 0;
  try {
    header = json::parse(text);
    if (header.value("version", 0) != kCheckpointVersion)
      fail(ErrorCode::kCorruptModel, path + ": unsupported checkpoint version");
    spec = spec_from_json(header.at("spec"));
    num_params = header.at("num_params").get<Index>();
  } catch (const json::exception& e) {
    fail(ErrorCode::kCorruptModel, path + ": bad header: " + e.what());
  }
  FieldNet net(spec);
  if (num_params != net.num_params())
    fail(ErrorCode::kCorruptModel, path + ": parameter count disagrees with spec");
  Vector p(net.num_params());
  in.read(reinterpret_cast<char*>(p.data()),
          static_cast<std::streamsize>(p.size() * sizeof(double)));
  if (!in) fail(ErrorCode::kCorruptModel, path + ": truncated parameter block");
  net.set_params(p);
  if (meta) {
    meta->kind = header.value("kind", "");
    meta->schedule_json = header["schedule"].is_null() ? "" : header["schedule"].dump();
    meta->extra_json = header["meta"].is_null() ? "" : header["meta"].dump();
  }
  return net;
}

}  // namespace stad::net
