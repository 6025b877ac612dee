#include "cascn/layers.hpp"

#include <cmath>

namespace cascn {

Var checked(const Context& ctx, Var out, const std::string& layer) {
  if (ctx.check_finite && !out.value().all_finite()) {
    throw NumericalError("non-finite output in layer " + layer);
  }
  return out;
}

Tensor he_uniform(Shape shape, int fan_in, std::mt19937_64& rng) {
  Scalar bound = static_cast<Scalar>(std::sqrt(6.0 / std::max(1, fan_in)));
  return Tensor::uniform(std::move(shape), rng, -bound, bound);
}

Conv2d::Conv2d(std::string name, int in_ch, int out_ch, int kernel, kernels::ConvParams p, bool bias,
               std::mt19937_64& rng)
    : params_(p), has_bias_(bias) {
  int cin_g = in_ch / p.groups;
  weight_ = Parameter(name + ".weight", he_uniform(Shape{out_ch, cin_g, kernel, kernel}, cin_g * kernel * kernel, rng));
  if (bias) bias_ = Parameter(name + ".bias", Tensor(Shape{out_ch}));
}

Var Conv2d::forward(const Context& ctx, const Var& x) {
  return ad::conv2d(x, ctx.param(weight_), has_bias_ ? ctx.param(bias_) : Var(), params_);
}

void Conv2d::visit(const ParamVisitor& v) {
  v.param(weight_);
  if (has_bias_) v.param(bias_);
}

std::size_t Conv2d::param_count() const { return weight_.value.numel() + (has_bias_ ? bias_.value.numel() : 0); }

DepthwiseConv2d::DepthwiseConv2d(std::string name, int channels, int kernel, int padding, std::mt19937_64& rng)
    : weight_(name + ".weight", he_uniform(Shape{channels, 1, kernel, kernel}, kernel * kernel, rng)),
      padding_(padding) {}

Var DepthwiseConv2d::forward(const Context& ctx, const Var& x) {
  return ad::depthwise_conv2d(x, ctx.param(weight_), 1, padding_);
}

TransposedConv2x::TransposedConv2x(std::string name, int in_ch, int out_ch, std::mt19937_64& rng)
    : weight_(name + ".weight", he_uniform(Shape{in_ch, out_ch, 2, 2}, in_ch, rng)),
      bias_(name + ".bias", Tensor(Shape{out_ch})) {}

Var TransposedConv2x::forward(const Context& ctx, const Var& x) {
  return ad::transposed_conv2d(x, ctx.param(weight_), ctx.param(bias_));
}

void TransposedConv2x::visit(const ParamVisitor& v) {
  v.param(weight_);
  v.param(bias_);
}

BatchNorm2d::BatchNorm2d(std::string name, int channels)
    : name_(name),
      gamma_(name + ".gamma", Tensor(Shape{channels}, 1)),
      beta_(name + ".beta", Tensor(Shape{channels}, 0)),
      buffers_{Tensor(Shape{channels}, 0), Tensor(Shape{channels}, 1)} {}

Var BatchNorm2d::forward(const Context& ctx, const Var& x) {
  return ad::batchnorm2d(x, ctx.param(gamma_), ctx.param(beta_), buffers_, ctx.mode, kMomentum, kEps);
}

void BatchNorm2d::visit(const ParamVisitor& v) {
  v.param(gamma_);
  v.param(beta_);
  if (v.buffer) {
    v.buffer(name_ + ".running_mean", buffers_.running_mean);
    v.buffer(name_ + ".running_var", buffers_.running_var);
  }
}

DenseLayer::DenseLayer(std::string name, int in_ch, const DenseBlockSpec& spec, std::mt19937_64& rng)
    : name_(name), in_ch_(in_ch), growth_(spec.growth) {
  const int width = spec.bottleneck_factor * spec.growth;
  norm1_ = BatchNorm2d(name + ".norm1", in_ch);
  conv1_ = Conv2d(name + ".conv1", in_ch, width, 1, {}, false, rng);
  norm2_ = BatchNorm2d(name + ".norm2", width);
  conv2_ = Conv2d(name + ".conv2", width, spec.growth, 3, {1, 1, 1, 1}, false, rng);
}

Var DenseLayer::features(const Context& ctx, const Var& x) {
  if (x.value().rank() != 4 || x.dim(1) != in_ch_) {
    throw DimensionError(name_ + ": expected " + std::to_string(in_ch_) + " input channels, got shape " +
                         x.shape().str());
  }
  Var h = ad::relu(norm1_.forward(ctx, x));
  h = conv1_.forward(ctx, h);
  h = ad::relu(norm2_.forward(ctx, h));
  return conv2_.forward(ctx, h);
}

Var DenseLayer::forward(const Context& ctx, const Var& x) {
  return checked(ctx, ad::concat_channels({x, features(ctx, x)}), name_);
}

void DenseLayer::visit(const ParamVisitor& v) {
  norm1_.visit(v);
  conv1_.visit(v);
  norm2_.visit(v);
  conv2_.visit(v);
}

DenseBlock::DenseBlock(std::string name, int in_ch, const DenseBlockSpec& spec, std::mt19937_64& rng)
    : in_ch_(in_ch), out_ch_(in_ch + spec.num_layers * spec.growth) {
  if (spec.num_layers < 0 || spec.growth < 1 || spec.bottleneck_factor < 1) {
    throw ConfigError(name + ": dense block needs num_layers >= 0, growth >= 1, bottleneck >= 1");
  }
  int c = in_ch;
  for (int i = 0; i < spec.num_layers; ++i) {
    layers_.emplace_back(name + ".layer" + std::to_string(i), c, spec, rng);
    c += spec.growth;
  }
}

Var DenseBlock::forward(const Context& ctx, const Var& x) {
  Var h = x;
  for (auto& layer : layers_) h = layer.forward(ctx, h);
  return h;
}

void DenseBlock::visit(const ParamVisitor& v) {
  for (auto& layer : layers_) layer.visit(v);
}

int transition_channels(int in_ch, double compression) {
  if (!(compression > 0.0 && compression <= 1.0)) {
    throw ConfigError("transition compression must lie in (0, 1], got " + std::to_string(compression));
  }
  int out = static_cast<int>(std::floor(compression * in_ch + 1e-9));
  if (out < 1) throw ConfigError("transition compression leaves no channels");
  return out;
}

Transition::Transition(std::string name, int in_ch, double compression, std::mt19937_64& rng)
    : name_(name),
      norm_(name + ".norm", in_ch),
      conv_(name + ".conv", in_ch, transition_channels(in_ch, compression), 1, {}, false, rng) {}

Var Transition::forward(const Context& ctx, const Var& x) {
  Var h = conv_.forward(ctx, ad::relu(norm_.forward(ctx, x)));
  return checked(ctx, ad::avgpool2d(h, 2), name_);
}

void Transition::visit(const ParamVisitor& v) {
  norm_.visit(v);
  conv_.visit(v);
}

ConvBlock::ConvBlock(std::string name, ConvMode mode, int in_ch, int out_ch, std::mt19937_64& rng)
    : name_(name), mode_(mode), in_ch_(in_ch), out_ch_(out_ch) {
  if (mode == ConvMode::Separable) {
    depthwise_ = DepthwiseConv2d(name + ".depthwise", in_ch, 3, 1, rng);
    pointwise_ = Conv2d(name + ".pointwise", in_ch, out_ch, 1, {}, false, rng);
  } else {
    standard_ = Conv2d(name + ".conv", in_ch, out_ch, 3, {1, 1, 1, 1}, false, rng);
  }
  norm_ = BatchNorm2d(name + ".norm", out_ch);
}

Var ConvBlock::linear(const Context& ctx, const Var& x) {
  if (x.value().rank() != 4 || x.dim(1) != in_ch_) {
    throw DimensionError(name_ + ": expected " + std::to_string(in_ch_) + " input channels, got shape " +
                         x.shape().str());
  }
  if (mode_ == ConvMode::Separable) return pointwise_.forward(ctx, depthwise_.forward(ctx, x));
  return standard_.forward(ctx, x);
}

Var ConvBlock::forward(const Context& ctx, const Var& x) {
  return checked(ctx, ad::relu(norm_.forward(ctx, linear(ctx, x))), name_);
}

void ConvBlock::visit(const ParamVisitor& v) {
  if (mode_ == ConvMode::Separable) {
    depthwise_.visit(v);
    pointwise_.visit(v);
  } else {
    standard_.visit(v);
  }
  norm_.visit(v);
}

std::size_t ConvBlock::weight_count() const {
  std::size_t k2 = 9;
  if (mode_ == ConvMode::Separable) return static_cast<std::size_t>(in_ch_) * k2 + static_cast<std::size_t>(in_ch_) * out_ch_;
  return static_cast<std::size_t>(in_ch_) * out_ch_ * k2;
}

std::size_t count_parameters(const std::function<void(const ParamVisitor&)>& visit) {
  std::size_t n = 0;
  visit(ParamVisitor{[&](Parameter& p) { n += p.value.numel(); }, nullptr});
  return n;
}

}  // namespace cascn
