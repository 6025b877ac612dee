#include "cascn/loss_metrics.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>

namespace cascn {

namespace {

void check_targets(const Var& p, const Tensor& x, const char* op) {
  if (!(p.shape() == x.shape())) {
    throw DimensionError(std::string(op) + ": prediction shape " + p.shape().str() + " vs target " + x.shape().str());
  }
  if (x.numel() == 0) throw ContractError(std::string(op) + ": empty batch");
  for (Scalar v : x.vec()) {
    if (v != Scalar(0) && v != Scalar(1)) throw ContractError(std::string(op) + ": targets must be 0 or 1");
  }
}

Var record_scalar(const char* op, Scalar value, const Var& p, BackwardFn fn) {
  if (!p.tracked()) return Var(Tensor::scalar(value));
  return p.tape()->record(op, Tensor::scalar(value), {p}, std::move(fn));
}

}  // namespace

Var bce_loss(const Var& p, const Tensor& x) {
  check_targets(p, x, "bce_loss");
  const Tensor& pv = p.value();
  const double n = static_cast<double>(x.numel());
  double acc = 0;
  for (std::size_t i = 0; i < x.numel(); ++i) {
    double pc = std::clamp<double>(pv[i], kProbabilityEps, 1 - kProbabilityEps);
    acc += x[i] * std::log(pc) + (1 - x[i]) * std::log(1 - pc);
  }
  Scalar loss = static_cast<Scalar>(-acc / n);
  return record_scalar("bce_loss", loss, p, [p, x, n](const Tensor& gy, GradSlots& s) {
    const Tensor& pv = p.value();
    Tensor g(pv.shape());
    const double scale = gy[0] / n;
    for (std::size_t i = 0; i < g.numel(); ++i) {
      double pi = pv[i];
      if (pi < kProbabilityEps || pi > 1 - kProbabilityEps) continue;  // clamped: flat
      g[i] = static_cast<Scalar>(-scale * (x[i] / pi - (1 - x[i]) / (1 - pi)));
    }
    s.grads[0] = std::move(g);
  });
}

Var jaccard_loss(const Var& p, const Tensor& x) {
  check_targets(p, x, "jaccard_loss");
  const Tensor& pv = p.value();
  double inter = 0, sx = 0, sp = 0;
  for (std::size_t i = 0; i < x.numel(); ++i) {
    inter += x[i] * pv[i];
    sx += x[i];
    sp += pv[i];
  }
  if (sx == 0 && sp == 0) {
    return record_scalar("jaccard_loss", 0, p, [](const Tensor&, GradSlots&) {});
  }
  const double uni = sx + sp - inter;
  const bool guarded = uni < kProbabilityEps;
  const double denom = guarded ? kProbabilityEps : uni;
  Scalar loss = static_cast<Scalar>(1 - inter / denom);
  return record_scalar("jaccard_loss", loss, p, [x, inter, denom, guarded](const Tensor& gy, GradSlots& s) {
    Tensor g(x.shape());
    for (std::size_t i = 0; i < g.numel(); ++i) {
      // d(I/U)/dp_i with dI/dp_i = x_i and dU/dp_i = 1 - x_i (U fixed when guarded).
      double d = guarded ? x[i] / denom : (x[i] * denom - inter * (1 - x[i])) / (denom * denom);
      g[i] = static_cast<Scalar>(-gy[0] * d);
    }
    s.grads[0] = std::move(g);
  });
}

Var seg_loss(const Var& p, const Tensor& x) { return ad::add(bce_loss(p, x), jaccard_loss(p, x)); }

ConfusionCounts& ConfusionCounts::operator+=(const ConfusionCounts& o) {
  tp += o.tp;
  fp += o.fp;
  tn += o.tn;
  fn += o.fn;
  return *this;
}

namespace {
template <typename T>
ConfusionCounts confusion_impl(std::span<const Scalar> pred, std::span<const T> truth, double threshold) {
  if (pred.size() != truth.size()) {
    throw DimensionError("confusion: prediction has " + std::to_string(pred.size()) + " pixels, truth has " +
                         std::to_string(truth.size()));
  }
  ConfusionCounts c;
  for (std::size_t i = 0; i < pred.size(); ++i) {
    const bool positive = pred[i] >= threshold;
    const bool truth_pos = truth[i] != T(0);
    if (positive && truth_pos) ++c.tp;
    else if (positive) ++c.fp;
    else if (truth_pos) ++c.fn;
    else ++c.tn;
  }
  return c;
}

double ratio_or_absent(std::uint64_t num, std::uint64_t den, bool absent_both_sides) {
  if (den == 0) return absent_both_sides ? 1.0 : 0.0;
  return static_cast<double>(num) / static_cast<double>(den);
}
}  // namespace

ConfusionCounts confusion(std::span<const Scalar> prediction, std::span<const Scalar> truth, double threshold) {
  return confusion_impl(prediction, truth, threshold);
}

ConfusionCounts confusion(std::span<const Scalar> prediction, std::span<const std::uint8_t> truth, double threshold) {
  return confusion_impl(prediction, truth, threshold);
}

Metrics metrics(const ConfusionCounts& c) {
  Metrics m;
  // No truth positives: SE is defined only vacuously, when nothing was predicted positive.
  m.se = ratio_or_absent(c.tp, c.tp + c.fn, c.fp == 0);
  m.sp = ratio_or_absent(c.tn, c.tn + c.fp, c.fn == 0);
  m.ac = ratio_or_absent(c.tp + c.tn, c.total(), true);
  m.di = ratio_or_absent(2 * c.tp, 2 * c.tp + c.fp + c.fn, true);
  m.ja = ratio_or_absent(c.tp, c.tp + c.fp + c.fn, true);
  return m;
}

Metrics MetricReport::mean() const {
  Metrics m;
  if (rows.empty()) return m;
  // Sorted summation keeps the mean independent of row order.
  auto avg = [&](double Metrics::*field) {
    std::vector<double> v;
    v.reserve(rows.size());
    for (const auto& row : rows) v.push_back(row.second.*field);
    std::sort(v.begin(), v.end());
    double s = 0;
    for (double x : v) s += x;
    return s / static_cast<double>(v.size());
  };
  m.se = avg(&Metrics::se);
  m.sp = avg(&Metrics::sp);
  m.ac = avg(&Metrics::ac);
  m.di = avg(&Metrics::di);
  m.ja = avg(&Metrics::ja);
  return m;
}

std::string format_metric(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.4f", v);
  return buf;
}

std::string MetricReport::to_csv() const {
  std::string out = "image,SE,SP,AC,DI,JA\n";
  auto row = [&](const std::string& name, const Metrics& m) {
    out += name + "," + format_metric(m.se) + "," + format_metric(m.sp) + "," + format_metric(m.ac) + "," +
           format_metric(m.di) + "," + format_metric(m.ja) + "\n";
  };
  for (const auto& [name, m] : rows) row(name, m);
  row("MEAN", mean());
  return out;
}

}  // namespace cascn
