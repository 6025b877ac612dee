#pragma once

#include <string>
#include <vector>

#include "cascn/layers.hpp"

namespace cascn {

struct AsppSpec {
  int in_channels = 0;
  int out_channels = 256;
  std::vector<int> rates{6, 12, 18};
  bool include_1x1 = true;
  bool include_image_pool = true;

  int branch_count() const;
  // Throws ConfigError for non-positive/duplicate rates or an empty branch set.
  void validate() const;
};

/// Atrous spatial pyramid pooling: optional 1x1 branch, one 3x3 branch per
/// dilation rate (padding = rate), optional image-level pooling branch, each
/// followed by BN+ReLU; concatenated in that order and projected by 1x1
/// conv + BN + ReLU.
class Aspp {
 public:
  Aspp() = default;
  Aspp(std::string name, const AsppSpec& spec, std::mt19937_64& rng);

  Var forward(const Context& ctx, const Var& x);
  // Concatenated branch outputs before projection.
  Var branches(const Context& ctx, const Var& x);
  void visit(const ParamVisitor& v);

  const AsppSpec& spec() const { return spec_; }
  int projection_in_channels() const { return projection_.conv.in_channels(); }
  // Convolution of the 3x3 branch for spec().rates[i].
  Conv2d& dilated_conv(std::size_t i) { return dilated_[i].conv; }

 private:
  struct Branch {
    Conv2d conv;
    BatchNorm2d norm;
  };

  std::string name_;
  AsppSpec spec_;
  Branch pointwise_;
  std::vector<Branch> dilated_;
  Branch image_pool_;
  Branch projection_;
};

}  // namespace cascn
