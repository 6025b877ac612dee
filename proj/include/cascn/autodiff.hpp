#pragma once

// Reverse-mode differentiation. A Tape records every op whose inputs include a
// tracked value; untracked computations (eval-mode inference) record nothing
// and keep no saved activations.

#include <functional>
#include <memory>
#include <random>
#include <string>
#include <unordered_map>
#include <vector>

#include "cascn/kernels.hpp"
#include "cascn/tensor.hpp"

namespace cascn {

class Tape;

/// Immutable tensor value, optionally tracked on a tape.
class Var {
 public:
  Var() = default;
  explicit Var(Tensor value);
  /// Untracked view of existing storage; the tensor must outlive the Var.
  static Var view(const Tensor& t);

  bool defined() const { return static_cast<bool>(value_); }
  const Tensor& value() const { return *value_; }
  const Shape& shape() const { return value_->shape(); }
  int dim(int axis) const { return value_->dim(axis); }

  bool tracked() const { return tape_ != nullptr; }
  Tape* tape() const { return tape_; }
  int id() const { return id_; }

 private:
  friend class Tape;
  std::shared_ptr<const Tensor> value_;
  Tape* tape_ = nullptr;
  int id_ = -1;
};

/// Named trainable tensor with its accumulated gradient.
struct Parameter {
  std::string name;
  Tensor value;
  Tensor grad;

  Parameter() = default;
  Parameter(std::string n, Tensor v) : name(std::move(n)), value(std::move(v)), grad(value.shape()) {}
  void zero_grad() { std::fill(grad.vec().begin(), grad.vec().end(), Scalar(0)); }
};

/// Gradient slots handed to a node's backward function: one per input,
/// filled only where needs[i] is set.
struct GradSlots {
  std::vector<Tensor> grads;
  std::vector<bool> needs;
};

using BackwardFn = std::function<void(const Tensor& gy, GradSlots& slots)>;

struct OpNode {
  std::string op;
  std::vector<int> inputs;
  int output = -1;
  BackwardFn backward;
};

class Tape {
 public:
  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  /// New leaf that receives a gradient.
  Var leaf(Tensor value);
  /// Leaf bound to a parameter; watching the same parameter twice returns the same leaf.
  Var watch(Parameter& p);

  Var record(std::string op, Tensor out, const std::vector<Var>& inputs, BackwardFn fn);

  const std::vector<OpNode>& nodes() const { return nodes_; }
  std::size_t value_count() const { return leaf_flags_.size(); }

  /// Reverse pass from a scalar loss. Each recorded node is visited once, in
  /// reverse recording order; gradients accumulate additively across fan-out.
  void backward(const Var& loss);

  /// Gradient of a leaf after backward(), or nullptr if it received none.
  const Tensor* grad(const Var& v) const;

  /// Add leaf gradients into the grad of every watched parameter.
  void accumulate_parameter_grads() const;

 private:
  int new_id(bool leaf);

  std::vector<OpNode> nodes_;
  std::vector<bool> leaf_flags_;
  std::vector<Tensor> grads_;
  std::unordered_map<Parameter*, Var> watched_;
};

enum class Mode { Train, Eval };

/// Forward-pass context handed to layers.
struct Context {
  Tape* tape = nullptr;
  Mode mode = Mode::Eval;
  // When set, layers verify their outputs are finite and throw NumericalError
  // naming themselves otherwise.
  bool check_finite = false;

  Var param(Parameter& p) const;
  bool training() const { return mode == Mode::Train; }
};

/// Running statistics owned by a batch-norm layer.
struct BatchNormBuffers {
  Tensor running_mean;
  Tensor running_var;
};

namespace ad {

using kernels::ConvParams;

Var conv2d(const Var& x, const Var& w, const Var& bias, const ConvParams& p);
Var depthwise_conv2d(const Var& x, const Var& w, int stride, int padding, int dilation = 1);
Var pointwise_conv(const Var& x, const Var& w, const Var& bias);
Var transposed_conv2d(const Var& x, const Var& w, const Var& bias);
Var maxpool2d(const Var& x, int window, int stride, int padding = 0);
Var avgpool2d(const Var& x, int window);
Var global_avg_pool(const Var& x);
Var global_max_pool(const Var& x);
Var conv1d_channels(const Var& v, const Var& w);
Var batchnorm2d(const Var& x, const Var& gamma, const Var& beta, BatchNormBuffers& buffers, Mode mode,
                Scalar momentum = Scalar(0.1), Scalar eps = Scalar(1e-5));
Var relu(const Var& x);
Var sigmoid(const Var& x);
Var add(const Var& a, const Var& b);
Var mul(const Var& a, const Var& b);
Var concat_channels(const std::vector<Var>& xs);
Var scale_channels(const Var& x, const Var& s);
Var broadcast_spatial(const Var& v, int h, int w);
Var sum(const Var& x);

}  // namespace ad

/// Records the piecewise choices of ReLU and max pooling (masks, argmax) while
/// alive, and on replay() makes later forwards reuse them from the start. Finite
/// differences through a deep ReLU network then see one smooth piece instead of
/// crossing kinks. One instance per thread at a time.
class PatternFreeze {
 public:
  PatternFreeze();
  ~PatternFreeze();
  PatternFreeze(const PatternFreeze&) = delete;
  PatternFreeze& operator=(const PatternFreeze&) = delete;
  /// Switch to replay and rewind to the first recorded choice.
  void replay();
};

/// Relative error |a-b| / max(|a|, |b|, 1e-8).
double relative_error(double a, double b);

struct GradCheckResult {
  double max_rel_error = 0;
  std::size_t checked = 0;
};

/// Central finite differences of a scalar function against its tape gradient.
/// max_coords == 0 checks every coordinate, otherwise a seeded random subset.
GradCheckResult grad_check(const std::function<Var(const Var&)>& f, const Tensor& x, double eps = 1e-5,
                           std::size_t max_coords = 0, std::uint64_t seed = 0);

struct GradCheckOptions {
  double eps = 1e-5;
  std::size_t coords_per_param = 0;  // 0 = every coordinate
  std::uint64_t seed = 0;
  // Evaluate perturbed points on the activation pattern of the base point.
  bool freeze_pattern = false;
  // Combine steps eps and eps/2 as (4 D(eps/2) - D(eps)) / 3, cancelling the
  // eps^2 truncation term. Only meaningful on a smooth (frozen) function.
  bool richardson = false;
};

/// Same check over parameters: loss(ctx) is evaluated with a tape for the
/// analytic gradient and without one for the perturbed evaluations.
GradCheckResult grad_check_parameters(const std::function<Var(const Context&)>& loss,
                                      const std::vector<Parameter*>& params, Mode mode,
                                      const GradCheckOptions& opt);
inline GradCheckResult grad_check_parameters(const std::function<Var(const Context&)>& loss,
                                             const std::vector<Parameter*>& params, Mode mode, double eps = 1e-5,
                                             std::size_t coords_per_param = 0, std::uint64_t seed = 0) {
  return grad_check_parameters(loss, params, mode, GradCheckOptions{eps, coords_per_param, seed});
}

}  // namespace cascn
