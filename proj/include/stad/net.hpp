// Copyright 2026 The StAD Lab Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "stad/common.hpp"
#include "stad/rng.hpp"

namespace stad::net {

enum class Activation { kTanh, kSilu };
enum class TimeEmbedding { kNone, kLogT, kRawT };

const char* to_string(Activation a);
const char* to_string(TimeEmbedding e);
Activation activation_from_string(const std::string& s);
TimeEmbedding time_embedding_from_string(const std::string& s);

struct NetSpec {
  int input_dim = 1;
  int context_dim = 0;
  std::vector<int> hidden{64, 64};
  int output_dim = 1;
  Activation activation = Activation::kSilu;
  TimeEmbedding time_embedding = TimeEmbedding::kLogT;

  /// Width of the first layer's input: x, then the time feature, then context.
  int feature_dim() const;
  /// Layer widths including the input features and the output.
  std::vector<int> layer_dims() const;
  bool operator==(const NetSpec&) const = default;
};

/// Per-sample inputs: x and context as columns, one time per column.
struct Batch {
  const Matrix& x;
  const Vector& t;
  const Matrix* context = nullptr;
};

/// Multilayer perceptron with hand-written derivatives.
///
/// Parameters are stored flat, layer by layer: weight (column-major) then
/// bias. Hidden layers apply the activation, the output layer is affine.
class FieldNet {
 public:
  FieldNet() = default;
  explicit FieldNet(NetSpec spec);

  const NetSpec& spec() const { return spec_; }
  Index num_params() const { return params_.size(); }
  const Vector& params() const { return params_; }
  void set_params(const Vector& p);

  /// Uniform in +-sqrt(1/fan_in) for weights and biases.
  void init(Rng& rng);

  Matrix forward(const Batch& b) const;

  /// Output Jacobian with respect to x for one sample.
  Matrix jacobian(const Vector& x, double t, const Vector* context = nullptr) const;

  /// J(x_n) u_n per column.
  Matrix jvp(const Batch& b, const Matrix& tangent) const;

  /// J(x) U for one sample and a block of tangents; one forward pass.
  Matrix jvp_block(const Vector& x, double t, const Vector* context, const Matrix& tangents) const;

  /// J(x_n)^T a_n per column.
  Matrix vjp(const Batch& b, const Matrix& cotangent) const;

  /// Gradient of a scalar-output net with respect to x, per column.
  Matrix input_gradient(const Batch& b) const;

  /// Forward value and input gradient of a scalar head in one pass.
  struct ValueAndGrad {
    Vector value;
    Matrix grad;
  };
  ValueAndGrad value_and_input_gradient(const Batch& b) const;

  /// Gradient with respect to the parameters of
  ///   sum_n  a_n . f(x_n)  +  c_n . J(x_n) u_n
  /// with a, c (output_dim x N) and u (input_dim x N) held fixed. The second
  /// term covers losses that depend on input gradients: for a scalar head,
  /// <g, grad_x f> is J u with u = g.
  Vector param_gradient(const Batch& b, const Matrix& a, const Matrix* c = nullptr,
                        const Matrix* u = nullptr) const;

 private:
  struct Layer {
    Index rows, cols, w_offset, b_offset;
  };
  struct Trace {
    std::vector<Matrix> h;   // h[0] = features, h[k] = activation of layer k
    std::vector<Matrix> z;   // pre-activations, z[k-1] for layer k
  };

  Eigen::Map<const Matrix> weight(std::size_t k) const;
  Eigen::Map<const Vector> bias(std::size_t k) const;
  Matrix features(const Batch& b) const;
  Trace run(const Matrix& h0) const;
  Matrix tangent_features(const Matrix& u) const;
  void check_batch(const Batch& b) const;
  void check_output(const Matrix& y, const char* what) const;

  NetSpec spec_;
  std::vector<Layer> layers_;
  Vector params_;
};

// ---------------------------------------------------------------------------
// Optimizer

enum class OptimizerKind { kAdam, kAdamW };
enum class LrSchedule { kConstant, kStepHalving, kCosine };

struct OptimizerConfig {
  OptimizerKind kind = OptimizerKind::kAdam;
  LrSchedule schedule = LrSchedule::kConstant;
  double lr = 1e-3;
  double lr_final = 1e-3;
  /// Steps between halvings for kStepHalving.
  std::int64_t halving_period = 1000;
  /// Horizon for the cosine schedule.
  std::int64_t total_steps = 1000;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 0.0;
  /// Global-norm clip; <= 0 disables.
  double clip_norm = 1.0;
};

OptimizerKind optimizer_kind_from_string(const std::string& s);
LrSchedule lr_schedule_from_string(const std::string& s);

class Optimizer {
 public:
  Optimizer(OptimizerConfig cfg, Index num_params);

  double learning_rate() const;
  std::int64_t steps() const { return step_; }
  const OptimizerConfig& config() const { return cfg_; }

  /// One update. Returns the pre-clip gradient norm. Throws NumericalAbort
  /// and leaves params untouched if the gradient is not finite.
  double step(Vector& params, const Vector& grad);

 private:
  OptimizerConfig cfg_;
  Vector m_, v_;
  std::int64_t step_ = 0;
};

// ---------------------------------------------------------------------------
// Checkpoints

struct CheckpointMeta {
  std::string kind;          // "score", "velocity", "head", ...
  std::string schedule_json; // serialized ScheduleSpec, may be empty
  std::string extra_json;    // free-form training metadata (seed, steps, loss)
};

inline constexpr int kCheckpointVersion = 1;

void save_checkpoint(const std::string& path, const FieldNet& net, const CheckpointMeta& meta);
FieldNet load_checkpoint(const std::string& path, CheckpointMeta* meta = nullptr);

}  // namespace stad::net
