#include "cascn/verify.hpp"

#include <chrono>
#include <cmath>
#include <cstdio>
#include <random>

#include "cascn/aspp.hpp"
#include "cascn/loss_metrics.hpp"
#include "cascn/meca.hpp"
#include "cascn/model.hpp"

namespace cascn {
namespace {

constexpr int kSeeds = 5;
constexpr double kOpTol = 1e-6;

std::string sci(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.3g", v);
  return buf;
}

// sum(f(x) * r) for a fixed random r, so every output coordinate matters.
Var project(const Var& y, std::uint64_t seed) {
  std::mt19937_64 rng(seed ^ 0x9e3779b97f4a7c15ULL);
  return ad::sum(ad::mul(y, Var(Tensor::uniform(y.shape(), rng))));
}

struct Outcome {
  bool ok;
  std::string detail;
};

Outcome below(double worst, double tol) { return {worst < tol, "max rel err " + sci(worst) + " (< " + sci(tol) + ")"}; }

double check_fn(const std::function<Var(const Var&)>& f, const Tensor& x, std::uint64_t seed) {
  return grad_check([&](const Var& v) { return project(f(v), seed); }, x, 1e-5, 0, seed).max_rel_error;
}

// Random input well away from ReLU kinks and pooling ties.
Tensor spread(Shape s, std::mt19937_64& rng) {
  Tensor t = Tensor::uniform(std::move(s), rng);
  for (auto& v : t.vec()) v += (v >= 0 ? Scalar(0.05) : Scalar(-0.05));
  return t;
}

Outcome gradcheck_ops(const std::string& op) {
  double worst = 0;
  for (int s = 0; s < kSeeds; ++s) {
    std::mt19937_64 rng(1000 + s);
    const auto seed = static_cast<std::uint64_t>(s + 1);
    if (op == "conv2d") {
      kernels::ConvParams p{1 + s % 2, s % 3, 1 + (s % 2), 1};
      Tensor x = Tensor::uniform({1, 2, 5, 5}, rng), w = Tensor::uniform({3, 2, 3, 3}, rng), b = Tensor::uniform({3}, rng);
      worst = std::max(worst, check_fn([&](const Var& v) { return ad::conv2d(v, Var(w), Var(b), p); }, x, seed));
      worst = std::max(worst, check_fn([&](const Var& v) { return ad::conv2d(Var(x), v, Var(b), p); }, w, seed));
      worst = std::max(worst, check_fn([&](const Var& v) { return ad::conv2d(Var(x), Var(w), v, p); }, b, seed));
    } else if (op == "depthwise_conv2d") {
      Tensor x = Tensor::uniform({2, 3, 5, 4}, rng), w = Tensor::uniform({3, 1, 3, 3}, rng);
      worst = std::max(worst, check_fn([&](const Var& v) { return ad::depthwise_conv2d(v, Var(w), 1, 1); }, x, seed));
      worst = std::max(worst, check_fn([&](const Var& v) { return ad::depthwise_conv2d(Var(x), v, 1, 1); }, w, seed));
    } else if (op == "pointwise_conv") {
      Tensor x = Tensor::uniform({2, 3, 3, 4}, rng), w = Tensor::uniform({4, 3, 1, 1}, rng);
      worst = std::max(worst, check_fn([&](const Var& v) { return ad::pointwise_conv(v, Var(w), Var()); }, x, seed));
      worst = std::max(worst, check_fn([&](const Var& v) { return ad::pointwise_conv(Var(x), v, Var()); }, w, seed));
    } else if (op == "transposed_conv2d") {
      Tensor x = Tensor::uniform({1, 3, 3, 2}, rng), w = Tensor::uniform({3, 2, 2, 2}, rng), b = Tensor::uniform({2}, rng);
      worst = std::max(worst, check_fn([&](const Var& v) { return ad::transposed_conv2d(v, Var(w), Var(b)); }, x, seed));
      worst = std::max(worst, check_fn([&](const Var& v) { return ad::transposed_conv2d(Var(x), v, Var(b)); }, w, seed));
      worst = std::max(worst, check_fn([&](const Var& v) { return ad::transposed_conv2d(Var(x), Var(w), v); }, b, seed));
    } else if (op == "maxpool2d") {
      Tensor x = spread({1, 2, 6, 6}, rng);
      worst = std::max(worst, check_fn([](const Var& v) { return ad::maxpool2d(v, 2, 2); }, x, seed));
      worst = std::max(worst, check_fn([](const Var& v) { return ad::maxpool2d(v, 3, 2, 1); }, x, seed));
    } else if (op == "avgpool2d") {
      worst = std::max(worst, check_fn([](const Var& v) { return ad::avgpool2d(v, 2); }, Tensor::uniform({2, 2, 4, 6}, rng), seed));
    } else if (op == "global_pools") {
      Tensor x = spread({2, 3, 3, 3}, rng);
      worst = std::max(worst, check_fn([](const Var& v) { return ad::global_avg_pool(v); }, x, seed));
      worst = std::max(worst, check_fn([](const Var& v) { return ad::global_max_pool(v); }, x, seed));
    } else if (op == "conv1d_channels") {
      Tensor v0 = Tensor::uniform({2, 7}, rng), w = Tensor::uniform({3 + 2 * (s % 2)}, rng);
      worst = std::max(worst, check_fn([&](const Var& v) { return ad::conv1d_channels(v, Var(w)); }, v0, seed));
      worst = std::max(worst, check_fn([&](const Var& v) { return ad::conv1d_channels(Var(v0), v); }, w, seed));
    } else if (op == "batchnorm2d") {
      Tensor x = Tensor::uniform({2, 3, 3, 3}, rng), g = Tensor::uniform({3}, rng), b = Tensor::uniform({3}, rng);
      const BatchNormBuffers stats{Tensor::uniform({3}, rng, -0.5, 0.5), Tensor::uniform({3}, rng, 0.5, 2)};
      for (Mode mode : {Mode::Train, Mode::Eval}) {
        // Fresh copy per call so running-stat updates never leak between evaluations.
        auto bn = [&](const Var& xv, const Var& gv, const Var& bv) {
          BatchNormBuffers buf = stats;
          return ad::batchnorm2d(xv, gv, bv, buf, mode);
        };
        worst = std::max(worst, check_fn([&](const Var& v) { return bn(v, Var(g), Var(b)); }, x, seed));
        worst = std::max(worst, check_fn([&](const Var& v) { return bn(Var(x), v, Var(b)); }, g, seed));
        worst = std::max(worst, check_fn([&](const Var& v) { return bn(Var(x), Var(g), v); }, b, seed));
      }
    } else if (op == "relu") {
      worst = std::max(worst, check_fn([](const Var& v) { return ad::relu(v); }, spread({2, 2, 3, 3}, rng), seed));
    } else if (op == "sigmoid") {
      Tensor x = Tensor::uniform({2, 2, 3, 3}, rng, -4, 4);
      worst = std::max(worst, check_fn([](const Var& v) { return ad::sigmoid(ad::sigmoid(v)); }, x, seed));
    } else if (op == "concat_channels") {
      Tensor a = Tensor::uniform({2, 2, 3, 3}, rng), b = Tensor::uniform({2, 3, 3, 3}, rng);
      worst = std::max(worst, check_fn([&](const Var& v) { return ad::concat_channels({v, Var(b)}); }, a, seed));
      worst = std::max(worst, check_fn([&](const Var& v) { return ad::concat_channels({Var(a), v, v}); }, b, seed));
    } else if (op == "scale_channels") {
      Tensor x = Tensor::uniform({2, 3, 2, 3}, rng), w = Tensor::uniform({2, 3}, rng);
      worst = std::max(worst, check_fn([&](const Var& v) { return ad::scale_channels(v, Var(w)); }, x, seed));
      worst = std::max(worst, check_fn([&](const Var& v) { return ad::scale_channels(Var(x), v); }, w, seed));
    } else if (op == "broadcast_spatial") {
      worst = std::max(worst, check_fn([](const Var& v) { return ad::broadcast_spatial(v, 3, 4); }, Tensor::uniform({2, 3}, rng), seed));
    } else if (op == "add_mul") {
      Tensor a = Tensor::uniform({2, 5}, rng), b = Tensor::uniform({2, 5}, rng);
      worst = std::max(worst, check_fn([&](const Var& v) { return ad::mul(ad::add(v, Var(b)), v); }, a, seed));
    } else if (op == "seg_loss") {
      Tensor logits = Tensor::uniform({2, 1, 4, 4}, rng, -3, 3), t(Shape{2, 1, 4, 4});
      for (auto& v : t.vec()) v = (rng() & 1) ? 1 : 0;
      worst = std::max(worst, grad_check([&](const Var& v) { return seg_loss(ad::sigmoid(v), t); }, logits).max_rel_error);
    }
  }
  return below(worst, kOpTol);
}

Outcome gradcheck_meca() {
  double worst = 0;
  for (int s = 0; s < kSeeds; ++s) {
    std::mt19937_64 rng(2000 + s);
    Meca meca("meca", 8, 3, rng);
    Tensor x = Tensor::uniform({2, 8, 3, 3}, rng);
    const auto seed = static_cast<std::uint64_t>(s + 1);
    auto loss = [&](const Context& ctx) { return project(meca.forward(ctx, Var::view(x)), seed); };
    worst = std::max(worst, grad_check_parameters(loss, {&meca.weight()}, Mode::Eval, 1e-5, 0, seed).max_rel_error);
  }
  return below(worst, kOpTol);
}

// <L x, y> against <x, L^T y>, with L^T taken from the tape.
double adjoint_gap(const std::function<Var(const Var&)>& op, const Tensor& x, std::mt19937_64& rng) {
  const Tensor lx = op(Var(x)).value();
  Tensor y = Tensor::uniform(lx.shape(), rng);
  Tape tape;
  Var xv = tape.leaf(x);
  Var out = ad::sum(ad::mul(op(xv), Var(y)));
  tape.backward(out);
  const Tensor* g = tape.grad(xv);
  const double lhs = dot(lx, y);
  const double rhs = g ? dot(x, *g) : 0.0;
  return relative_error(lhs, rhs);
}

Outcome adjoint(const std::string& op) {
  double worst = 0;
  for (int s = 0; s < kSeeds; ++s) {
    std::mt19937_64 rng(3000 + s);
    if (op == "conv2d") {
      kernels::ConvParams p{1 + s % 3, s % 3, 1 + s % 2, 1};
      Tensor w = Tensor::uniform({4, 3, 3, 3}, rng);
      worst = std::max(worst, adjoint_gap([&](const Var& v) { return ad::conv2d(v, Var(w), Var(), p); },
                                          Tensor::uniform({2, 3, 9, 8}, rng), rng));
    } else if (op == "depthwise_conv2d") {
      Tensor w = Tensor::uniform({3, 1, 3, 3}, rng);
      worst = std::max(worst, adjoint_gap([&](const Var& v) { return ad::depthwise_conv2d(v, Var(w), 1 + s % 2, 1); },
                                          Tensor::uniform({2, 3, 7, 6}, rng), rng));
    } else if (op == "pointwise_conv") {
      Tensor w = Tensor::uniform({5, 3, 1, 1}, rng);
      worst = std::max(worst, adjoint_gap([&](const Var& v) { return ad::pointwise_conv(v, Var(w), Var()); },
                                          Tensor::uniform({2, 3, 4, 4}, rng), rng));
    } else if (op == "transposed_conv2d") {
      Tensor w = Tensor::uniform({3, 2, 2, 2}, rng);
      worst = std::max(worst, adjoint_gap([&](const Var& v) { return ad::transposed_conv2d(v, Var(w), Var()); },
                                          Tensor::uniform({2, 3, 4, 5}, rng), rng));
      // The stride-2 convolution with the same kernel is its adjoint.
      Tensor x = Tensor::uniform({2, 3, 4, 5}, rng), y = Tensor::uniform({2, 2, 8, 10}, rng);
      const double lhs = dot(ad::conv2d(Var(y), Var(w.reshaped({3, 2, 2, 2})), Var(), {2, 0, 1, 1}).value(), x);
      const double rhs = dot(y, ad::transposed_conv2d(Var(x), Var(w), Var()).value());
      worst = std::max(worst, relative_error(lhs, rhs));
    } else if (op == "avgpool2d") {
      worst = std::max(worst, adjoint_gap([](const Var& v) { return ad::avgpool2d(v, 2); }, Tensor::uniform({2, 3, 6, 4}, rng), rng));
    } else if (op == "concat_channels") {
      worst = std::max(worst, adjoint_gap([](const Var& v) { return ad::concat_channels({v, ad::avgpool2d(ad::concat_channels({v, v}), 1), v}); },
                                          Tensor::uniform({2, 3, 3, 3}, rng), rng));
    }
  }
  return {worst < 1e-10, "max rel gap " + sci(worst) + " (< 1e-10)"};
}

Outcome separable_factorization() {
  double worst = 0;
  for (int s = 0; s < 20; ++s) {
    std::mt19937_64 rng(4000 + s);
    const int c = 1 + static_cast<int>(rng() % 5), m = 1 + static_cast<int>(rng() % 6);
    ConvBlock block("sep", ConvMode::Separable, c, m, rng);
    Tensor x = Tensor::uniform({2, c, 5, 6}, rng);
    const Tensor& wd = block.depthwise().weight().value;
    const Tensor& wp = block.pointwise().weight().value;
    Tensor wstd(Shape{m, c, 3, 3});
    for (int o = 0; o < m; ++o)
      for (int i = 0; i < c; ++i)
        for (int k = 0; k < 9; ++k) wstd[(static_cast<std::size_t>(o) * c + i) * 9 + k] = wp[o * c + i] * wd[i * 9 + k];
    Context ctx;
    const Tensor a = block.linear(ctx, Var(x)).value();
    const Tensor b = ad::conv2d(Var(x), Var(wstd), Var(), {1, 1, 1, 1}).value();
    worst = std::max(worst, static_cast<double>(max_abs_diff(a, b)));
  }
  return {worst < 1e-10, "max abs diff " + sci(worst) + " (< 1e-10)"};
}

Outcome loss_oracles() {
  Tensor ones(Shape{1, 1, 4, 4}, 1), half(Shape{1, 1, 4, 4}, 0.5);
  Tensor binary(Shape{1, 1, 4, 4});
  for (std::size_t i = 0; i < binary.numel(); ++i) binary[i] = (i % 3 == 0) ? 1 : 0;
  const double j_perfect = jaccard_loss(Var(binary), binary).value().item();
  const double j_half = jaccard_loss(Var(half), ones).value().item();
  const double bce_half = bce_loss(Var(half), binary).value().item();
  const double seg = seg_loss(Var(half), ones).value().item();
  const double parts = bce_loss(Var(half), ones).value().item() + jaccard_loss(Var(half), ones).value().item();
  const bool ok = j_perfect == 0.0 && std::abs(j_half - 0.5) < 1e-12 && std::abs(bce_half - std::log(2.0)) < 1e-9 &&
                  seg == parts;
  return {ok, "jaccard(perfect)=" + sci(j_perfect) + " jaccard(1,0.5)=" + sci(j_half) + " bce(0.5)=" + sci(bce_half)};
}

Outcome metric_oracles() {
  std::mt19937_64 rng(5);
  double worst_identity = 0;
  for (int trial = 0; trial < 1000; ++trial) {
    std::vector<Scalar> pred(256);
    std::vector<std::uint8_t> gt(256);
    const unsigned density = 1 + static_cast<unsigned>(rng() % 15);
    for (int i = 0; i < 256; ++i) {
      pred[i] = (rng() % 16) < density ? Scalar(1) : Scalar(0);
      gt[i] = (rng() % 16) < density ? 1 : 0;
    }
    std::uint64_t tp = 0, fp = 0, tn = 0, fn = 0;
    for (int i = 0; i < 256; ++i) {
      const bool p = pred[i] >= 0.5, g = gt[i] == 1;
      tp += p && g, fp += p && !g, tn += !p && !g, fn += !p && g;
    }
    const Metrics m = metrics(confusion(pred, gt));
    auto ratio = [](std::uint64_t num, std::uint64_t den, bool absent) {
      return den ? double(num) / double(den) : (absent ? 1.0 : 0.0);
    };
    const Metrics brute{ratio(tp, tp + fn, tp + fn + fp == 0), ratio(tn, tn + fp, tn + fp + fn == 0),
                        double(tp + tn) / 256.0, ratio(2 * tp, 2 * tp + fp + fn, tp + fp + fn == 0),
                        ratio(tp, tp + fp + fn, tp + fp + fn == 0)};
    if (m.se != brute.se || m.sp != brute.sp || m.ac != brute.ac || m.di != brute.di || m.ja != brute.ja)
      return {false, "mismatch against brute-force enumeration at trial " + std::to_string(trial)};
    worst_identity = std::max(worst_identity, std::abs(m.di - 2 * m.ja / (1 + m.ja)));
  }
  return {worst_identity < 1e-12, "1000 mask pairs exact; DI/JA identity gap " + sci(worst_identity)};
}

Outcome flop_ratios() {
  std::size_t checked = 0;
  for (const ModelConfig& cfg : {ModelConfig::desk(), ModelConfig::paper(), variant(ModelConfig::desk(), "stConv")}) {
    const FlopReport r = CascnModel(cfg).flops();
    for (const auto& l : r.layers) {
      if (!l.swappable) continue;
      const std::uint64_t hw = static_cast<std::uint64_t>(l.height) * l.width;
      const std::uint64_t k2 = static_cast<std::uint64_t>(l.kernel) * l.kernel;
      const std::uint64_t n = l.in_channels, m = l.out_channels;
      const bool ok = l.standard_macs == hw * k2 * n * m && l.separable_macs == hw * n * (k2 + m) &&
                      l.ratio_num == k2 * m && l.ratio_den == k2 + m &&
                      l.standard_macs * l.ratio_den == l.separable_macs * l.ratio_num;
      if (!ok) return {false, "layer " + l.name + " breaks the cost formulas"};
      ++checked;
    }
  }
  const LayerFlops ex = separable_cost("example", 32, 32, 3, 64, 128);
  if (ex.standard_macs != 75497472 || ex.separable_macs != 8978432 || ex.ratio_num != 1152 || ex.ratio_den != 137)
    return {false, "32x32, Dk=3, 64->128 example does not give 75497472 / 8978432 / 1152:137"};
  return {checked > 0, std::to_string(checked) + " swappable layers exact"};
}

Outcome meca_invariants() {
  if (meca_kernel_size(64) != 3 || meca_kernel_size(256) != 5 || meca_kernel_size(2) != 3)
    return {false, "adaptive kernel sizes wrong"};
  std::mt19937_64 rng(6);
  Meca meca("meca", 6, 3, rng);
  Tensor x = Tensor::uniform({2, 6, 4, 5}, rng);
  Context ctx;
  auto t = meca.trace(ctx, Var(x));
  for (Scalar a : t.attention.value().vec())
    if (!(a > 0 && a < 1)) return {false, "attention weight outside (0,1)"};
  Tensor saved = meca.weight().value;
  std::fill(meca.weight().value.vec().begin(), meca.weight().value.vec().end(), Scalar(0));
  const Tensor half = meca.forward(ctx, Var(x)).value();
  for (std::size_t i = 0; i < x.numel(); ++i)
    if (half[i] != Scalar(0.5) * x[i]) return {false, "zero kernel does not halve the input"};
  meca.weight().value = saved;
  Tensor constant(Shape{1, 6, 3, 3});
  for (int c = 0; c < 6; ++c)
    for (int i = 0; i < 9; ++i) constant[c * 9 + i] = Scalar(0.3 * c - 0.7);
  auto tc = meca.trace(ctx, Var(constant));
  if (!bitwise_equal(tc.avg_branch.value(), tc.max_branch.value())) return {false, "constant field: branches differ"};
  return {true, "k(64)=3 k(256)=5, weights in (0,1), zero kernel halves, constant field branches equal"};
}

Outcome aspp_invariants() {
  std::mt19937_64 rng(7);
  for (int trial = 0; trial < 10; ++trial) {
    AsppSpec spec;
    spec.in_channels = 1 + static_cast<int>(rng() % 3);
    spec.out_channels = 1 + static_cast<int>(rng() % 3);
    spec.rates.clear();
    for (int r = 1; r <= 4; ++r)
      if (rng() & 1) spec.rates.push_back(r + trial % 3);
    spec.include_1x1 = rng() & 1;
    spec.include_image_pool = spec.rates.empty() || (rng() & 1);
    Aspp aspp("aspp", spec, rng);
    const int h = 1 + static_cast<int>(rng() % 7), w = 1 + static_cast<int>(rng() % 7);
    Tensor x = Tensor::uniform({1, spec.in_channels, h, w}, rng);
    Context ctx;
    const Tensor y = aspp.forward(ctx, Var(x)).value();
    if (y.dim(2) != h || y.dim(3) != w) return {false, "spatial dims not preserved"};
  }
  // Impulse through a single dilated conv stays within Chebyshev radius r.
  for (int r : {1, 2, 3}) {
    AsppSpec spec{1, 1, {r}, false, false};
    Aspp aspp("aspp", spec, rng);
    Tensor x(Shape{1, 1, 11, 11});
    x.at(0, 0, 5, 5) = 1;
    Context ctx;
    const Tensor y = aspp.dilated_conv(0).forward(ctx, Var(x)).value();
    for (int i = 0; i < 11; ++i)
      for (int j = 0; j < 11; ++j)
        if (std::max(std::abs(i - 5), std::abs(j - 5)) > r && y.at(0, 0, i, j) != 0)
          return {false, "impulse response of rate " + std::to_string(r) + " leaks"};
  }
  return {true, "spatial preservation on 10 specs; impulse confined for rates 1-3"};
}

Outcome end_to_end() {
  ModelConfig cfg = ModelConfig::desk();
  CascnModel model(cfg);
  std::mt19937_64 rng(8);
  Tensor x = Tensor::uniform({1, 3, cfg.input.height, cfg.input.width}, rng, 0, 1);
  Tensor t(Shape{1, 1, cfg.input.height, cfg.input.width});
  for (int i = 0; i < cfg.input.height; ++i)
    for (int j = 0; j < cfg.input.width; ++j) t.at(0, 0, i, j) = (i - 30) * (i - 30) + (j - 34) * (j - 34) < 300;
  auto loss = [&](const Context& ctx) { return seg_loss(model.forward(ctx, Var::view(x)), t); };
  std::vector<Parameter*> params = model.parameters();
  std::vector<Parameter*> sampled;
  for (std::size_t i = 0; i < params.size(); i += 4) sampled.push_back(params[i]);
  GradCheckOptions opt;
  opt.eps = 1e-3;
  opt.coords_per_param = 1;
  opt.seed = 9;
  opt.freeze_pattern = true;
  opt.richardson = true;
  const auto r = grad_check_parameters(loss, sampled, Mode::Train, opt);
  return {r.max_rel_error < 1e-4, "max rel err " + sci(r.max_rel_error) + " over " + std::to_string(r.checked) +
                                      " parameter coordinates (< 1e-4)"};
}

}  // namespace

std::vector<CheckResult> run_verify(const std::function<void(const CheckResult&)>& on_result) {
  std::vector<std::pair<std::string, std::function<Outcome()>>> checks;
  for (const char* op : {"conv2d", "depthwise_conv2d", "pointwise_conv", "transposed_conv2d", "maxpool2d",
                         "avgpool2d", "global_pools", "conv1d_channels", "batchnorm2d", "relu", "sigmoid",
                         "concat_channels", "scale_channels", "broadcast_spatial", "add_mul", "seg_loss"})
    checks.emplace_back(std::string("gradcheck.") + op, [op] { return gradcheck_ops(op); });
  checks.emplace_back("gradcheck.meca_weights", gradcheck_meca);
  for (const char* op : {"conv2d", "depthwise_conv2d", "pointwise_conv", "transposed_conv2d", "avgpool2d", "concat_channels"})
    checks.emplace_back(std::string("adjoint.") + op, [op] { return adjoint(op); });
  checks.emplace_back("factorization.separable", separable_factorization);
  checks.emplace_back("oracle.losses", loss_oracles);
  checks.emplace_back("oracle.metrics", metric_oracles);
  checks.emplace_back("flops.cost_formulas", flop_ratios);
  checks.emplace_back("meca.invariants", meca_invariants);
  checks.emplace_back("aspp.invariants", aspp_invariants);
  checks.emplace_back("gradcheck.cascn_end_to_end", end_to_end);

  std::vector<CheckResult> results;
  for (auto& [name, fn] : checks) {
    CheckResult r;
    r.name = name;
    const auto t0 = std::chrono::steady_clock::now();
    try {
      Outcome o = fn();
      r.passed = o.ok;
      r.detail = o.detail;
    } catch (const std::exception& e) {
      r.passed = false;
      r.detail = std::string("exception: ") + e.what();
    }
    r.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    if (on_result) on_result(r);
    results.push_back(std::move(r));
  }
  return results;
}

}  // namespace cascn
