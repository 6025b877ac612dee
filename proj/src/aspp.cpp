#include "cascn/aspp.hpp"

#include <algorithm>

namespace cascn {

int AsppSpec::branch_count() const {
  return (include_1x1 ? 1 : 0) + static_cast<int>(rates.size()) + (include_image_pool ? 1 : 0);
}

void AsppSpec::validate() const {
  if (in_channels < 1 || out_channels < 1) throw ConfigError("aspp: channel counts must be >= 1");
  for (std::size_t i = 0; i < rates.size(); ++i) {
    if (rates[i] < 1) throw ConfigError("aspp: dilation rates must be >= 1, got " + std::to_string(rates[i]));
    for (std::size_t j = 0; j < i; ++j) {
      if (rates[i] == rates[j]) throw ConfigError("aspp: duplicate dilation rate " + std::to_string(rates[i]));
    }
  }
  if (branch_count() == 0) throw ConfigError("aspp: spec has no branches");
}

Aspp::Aspp(std::string name, const AsppSpec& spec, std::mt19937_64& rng) : name_(name), spec_(spec) {
  spec.validate();
  const int cin = spec.in_channels, cout = spec.out_channels;
  if (spec.include_1x1) {
    pointwise_ = {Conv2d(name + ".branch1x1.conv", cin, cout, 1, {}, false, rng),
                  BatchNorm2d(name + ".branch1x1.norm", cout)};
  }
  for (int r : spec.rates) {
    std::string b = name + ".rate" + std::to_string(r);
    dilated_.push_back({Conv2d(b + ".conv", cin, cout, 3, {1, r, r, 1}, false, rng), BatchNorm2d(b + ".norm", cout)});
  }
  if (spec.include_image_pool) {
    image_pool_ = {Conv2d(name + ".image_pool.conv", cin, cout, 1, {}, false, rng),
                   BatchNorm2d(name + ".image_pool.norm", cout)};
  }
  const int proj_in = spec.branch_count() * cout;
  projection_ = {Conv2d(name + ".projection.conv", proj_in, cout, 1, {}, false, rng),
                 BatchNorm2d(name + ".projection.norm", cout)};
}

Var Aspp::branches(const Context& ctx, const Var& x) {
  auto d = dims4(x.value(), "aspp");
  if (d.c != spec_.in_channels) {
    throw DimensionError(name_ + ": expected " + std::to_string(spec_.in_channels) + " channels on axis 1, got " +
                         std::to_string(d.c));
  }
  std::vector<Var> outs;
  if (spec_.include_1x1) outs.push_back(ad::relu(pointwise_.norm.forward(ctx, pointwise_.conv.forward(ctx, x))));
  for (auto& b : dilated_) {
    // padding == rate keeps H, W for any rate.
    outs.push_back(ad::relu(b.norm.forward(ctx, b.conv.forward(ctx, x))));
  }
  if (spec_.include_image_pool) {
    Var pooled = ad::global_avg_pool(x);
    Var as_map = ad::broadcast_spatial(pooled, 1, 1);
    Var y = ad::relu(image_pool_.norm.forward(ctx, image_pool_.conv.forward(ctx, as_map)));
    Var flat = ad::global_avg_pool(y);
    outs.push_back(ad::broadcast_spatial(flat, d.h, d.w));
  }
  return ad::concat_channels(outs);
}

Var Aspp::forward(const Context& ctx, const Var& x) {
  Var cat = branches(ctx, x);
  return checked(ctx, ad::relu(projection_.norm.forward(ctx, projection_.conv.forward(ctx, cat))), name_);
}

void Aspp::visit(const ParamVisitor& v) {
  if (spec_.include_1x1) {
    pointwise_.conv.visit(v);
    pointwise_.norm.visit(v);
  }
  for (auto& b : dilated_) {
    b.conv.visit(v);
    b.norm.visit(v);
  }
  if (spec_.include_image_pool) {
    image_pool_.conv.visit(v);
    image_pool_.norm.visit(v);
  }
  projection_.conv.visit(v);
  projection_.norm.visit(v);
}

}  // namespace cascn
