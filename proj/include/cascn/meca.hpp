#pragma once

#include <string>

#include "cascn/layers.hpp"

namespace cascn {

/// Adaptive 1-D kernel size for channel attention: t = floor((log2 C + b) / gamma),
/// bumped to the next odd number, never below 3.
int meca_kernel_size(int channels, int gamma = 2, int b = 1);

/// Modified efficient channel attention. Average- and max-pooled channel
/// descriptors go through one shared bias-free 1-D convolution, are summed,
/// squashed by a sigmoid and rescale the input channels.
class Meca {
 public:
  struct Trace {
    Var avg_descriptor;  // [N, C] after global average pooling
    Var max_descriptor;  // [N, C] after global max pooling
    Var avg_branch;      // conv1d of avg_descriptor
    Var max_branch;      // conv1d of max_descriptor
    Var attention;       // sigmoid(avg_branch + max_branch)
    Var output;
  };

  Meca() = default;
  // kernel <= 0 selects the adaptive size.
  Meca(std::string name, int channels, int kernel, std::mt19937_64& rng);

  Var forward(const Context& ctx, const Var& x);
  Trace trace(const Context& ctx, const Var& x);
  void visit(const ParamVisitor& v) { v.param(weight_); }

  int channels() const { return channels_; }
  int kernel() const { return weight_.value.dim(0); }
  Parameter& weight() { return weight_; }

 private:
  std::string name_;
  int channels_ = 0;
  Parameter weight_;
};

}  // namespace cascn
