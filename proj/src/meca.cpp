#include "cascn/meca.hpp"

#include <cmath>
#include <iostream>

namespace cascn {

int meca_kernel_size(int channels, int gamma, int b) {
  if (channels < 1 || gamma < 1) throw ConfigError("meca_kernel_size: channels and gamma must be >= 1");
  int t = static_cast<int>(std::floor((std::log2(static_cast<double>(channels)) + b) / gamma));
  int k = (t % 2 == 1) ? t : t + 1;
  return std::max(k, 3);
}

Meca::Meca(std::string name, int channels, int kernel, std::mt19937_64& rng) : name_(name), channels_(channels) {
  int k = kernel > 0 ? kernel : meca_kernel_size(channels);
  if (k % 2 == 0) throw ConfigError(name + ": attention kernel must be odd, got " + std::to_string(k));
  if (k > channels) {
    std::clog << "warning: " << name << ": attention kernel " << k << " exceeds channel count " << channels << "\n";
  }
  weight_ = Parameter(name + ".weight", he_uniform(Shape{k}, k, rng));
}

Meca::Trace Meca::trace(const Context& ctx, const Var& x) {
  if (x.value().rank() != 4 || x.dim(1) != channels_) {
    throw DimensionError(name_ + ": expected " + std::to_string(channels_) + " channels on axis 1, got shape " +
                         x.shape().str());
  }
  Trace t;
  Var w = ctx.param(weight_);
  t.avg_descriptor = ad::global_avg_pool(x);
  t.max_descriptor = ad::global_max_pool(x);
  t.avg_branch = ad::conv1d_channels(t.avg_descriptor, w);
  t.max_branch = ad::conv1d_channels(t.max_descriptor, w);
  t.attention = ad::sigmoid(ad::add(t.avg_branch, t.max_branch));
  t.output = checked(ctx, ad::scale_channels(x, t.attention), name_);
  return t;
}

Var Meca::forward(const Context& ctx, const Var& x) { return trace(ctx, x).output; }

}  // namespace cascn
