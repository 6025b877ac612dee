#pragma once

// Composite layers: convolution wrappers with their own parameters, batch
// norm, dense layers/blocks, transitions, and the separable/standard 3x3
// conv blocks used by the encoder tail and decoder.

#include <functional>
#include <random>
#include <string>
#include <vector>

#include "cascn/autodiff.hpp"

namespace cascn {

struct ParamVisitor {
  std::function<void(Parameter&)> param;
  std::function<void(const std::string& name, Tensor& buffer)> buffer;
};

// Throws NumericalError naming the layer when ctx.check_finite is set and the
// output contains NaN/Inf.
Var checked(const Context& ctx, Var out, const std::string& layer);

// He-uniform initialization: U(-sqrt(6/fan_in), sqrt(6/fan_in)).
Tensor he_uniform(Shape shape, int fan_in, std::mt19937_64& rng);

class Conv2d {
 public:
  Conv2d() = default;
  Conv2d(std::string name, int in_ch, int out_ch, int kernel, kernels::ConvParams p, bool bias,
         std::mt19937_64& rng);
  Var forward(const Context& ctx, const Var& x);
  void visit(const ParamVisitor& v);
  std::size_t param_count() const;
  int in_channels() const { return weight_.value.dim(1) * params_.groups; }
  int out_channels() const { return weight_.value.dim(0); }
  int kernel() const { return weight_.value.dim(2); }
  Parameter& weight() { return weight_; }
  Parameter& bias() { return bias_; }
  bool has_bias() const { return has_bias_; }
  const kernels::ConvParams& params() const { return params_; }

 private:
  kernels::ConvParams params_;
  Parameter weight_;
  Parameter bias_;
  bool has_bias_ = false;
};

class DepthwiseConv2d {
 public:
  DepthwiseConv2d() = default;
  DepthwiseConv2d(std::string name, int channels, int kernel, int padding, std::mt19937_64& rng);
  Var forward(const Context& ctx, const Var& x);
  void visit(const ParamVisitor& v) { v.param(weight_); }
  Parameter& weight() { return weight_; }
  int padding() const { return padding_; }

 private:
  Parameter weight_;
  int padding_ = 1;
};

class TransposedConv2x {
 public:
  TransposedConv2x() = default;
  TransposedConv2x(std::string name, int in_ch, int out_ch, std::mt19937_64& rng);
  Var forward(const Context& ctx, const Var& x);
  void visit(const ParamVisitor& v);
  int out_channels() const { return weight_.value.dim(1); }

 private:
  Parameter weight_;
  Parameter bias_;
};

class BatchNorm2d {
 public:
  static constexpr Scalar kMomentum = Scalar(0.1);
  static constexpr Scalar kEps = Scalar(1e-5);

  BatchNorm2d() = default;
  BatchNorm2d(std::string name, int channels);
  Var forward(const Context& ctx, const Var& x);
  void visit(const ParamVisitor& v);
  Parameter& gamma() { return gamma_; }
  Parameter& beta() { return beta_; }
  BatchNormBuffers& buffers() { return buffers_; }

 private:
  std::string name_;
  Parameter gamma_;
  Parameter beta_;
  BatchNormBuffers buffers_;
};

struct DenseBlockSpec {
  int num_layers = 0;
  int growth = 32;
  int bottleneck_factor = 4;
};

/// Pre-activation dense layer: BN, ReLU, 1x1 conv to factor*k, BN, ReLU,
/// 3x3 conv to k; output is concat(input, new features).
class DenseLayer {
 public:
  DenseLayer() = default;
  DenseLayer(std::string name, int in_ch, const DenseBlockSpec& spec, std::mt19937_64& rng);
  Var forward(const Context& ctx, const Var& x);
  // New features only (k channels), before concatenation.
  Var features(const Context& ctx, const Var& x);
  void visit(const ParamVisitor& v);
  int in_channels() const { return in_ch_; }
  int out_channels() const { return in_ch_ + growth_; }
  Conv2d& conv2() { return conv2_; }

 private:
  std::string name_;
  int in_ch_ = 0;
  int growth_ = 0;
  BatchNorm2d norm1_;
  Conv2d conv1_;
  BatchNorm2d norm2_;
  Conv2d conv2_;
};

class DenseBlock {
 public:
  DenseBlock() = default;
  DenseBlock(std::string name, int in_ch, const DenseBlockSpec& spec, std::mt19937_64& rng);
  Var forward(const Context& ctx, const Var& x);
  void visit(const ParamVisitor& v);
  int in_channels() const { return in_ch_; }
  int out_channels() const { return out_ch_; }
  std::vector<DenseLayer>& layers() { return layers_; }

 private:
  int in_ch_ = 0;
  int out_ch_ = 0;
  std::vector<DenseLayer> layers_;
};

/// BN, ReLU, 1x1 conv to floor(theta*C), 2x2 average pool.
class Transition {
 public:
  Transition() = default;
  Transition(std::string name, int in_ch, double compression, std::mt19937_64& rng);
  Var forward(const Context& ctx, const Var& x);
  void visit(const ParamVisitor& v);
  int out_channels() const { return conv_.out_channels(); }

 private:
  std::string name_;
  BatchNorm2d norm_;
  Conv2d conv_;
};

int transition_channels(int in_ch, double compression);

enum class ConvMode { Standard, Separable };

/// 3x3 conv block, post-activation. Separable: depthwise 3x3 (pad 1),
/// pointwise 1x1, BN, ReLU. Standard: 3x3 conv (pad 1), BN, ReLU.
class ConvBlock {
 public:
  ConvBlock() = default;
  ConvBlock(std::string name, ConvMode mode, int in_ch, int out_ch, std::mt19937_64& rng);
  Var forward(const Context& ctx, const Var& x);
  // Output before BN/ReLU.
  Var linear(const Context& ctx, const Var& x);
  void visit(const ParamVisitor& v);
  ConvMode mode() const { return mode_; }
  int in_channels() const { return in_ch_; }
  int out_channels() const { return out_ch_; }
  // Conv weights only (norm affine excluded).
  std::size_t weight_count() const;
  DepthwiseConv2d& depthwise() { return depthwise_; }
  Conv2d& pointwise() { return pointwise_; }
  Conv2d& standard() { return standard_; }

 private:
  std::string name_;
  ConvMode mode_ = ConvMode::Separable;
  int in_ch_ = 0;
  int out_ch_ = 0;
  DepthwiseConv2d depthwise_;
  Conv2d pointwise_;
  Conv2d standard_;
  BatchNorm2d norm_;
};

std::size_t count_parameters(const std::function<void(const ParamVisitor&)>& visit);

}  // namespace cascn
