#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "cascn/autodiff.hpp"

namespace cascn {

inline constexpr Scalar kProbabilityEps = Scalar(1e-7);

// Losses over every pixel of the batch. Targets must hold only 0 and 1 and
// match the prediction shape.

/// Binary cross-entropy with predictions clamped to [eps, 1-eps].
Var bce_loss(const Var& p, const Tensor& targets);
/// 1 - sum(x p) / (sum x + sum p - sum(x p)); denominator floored at eps.
/// Both sums zero gives 0.
Var jaccard_loss(const Var& p, const Tensor& targets);
/// bce_loss + jaccard_loss.
Var seg_loss(const Var& p, const Tensor& targets);

struct ConfusionCounts {
  std::uint64_t tp = 0, fp = 0, tn = 0, fn = 0;
  std::uint64_t total() const { return tp + fp + tn + fn; }
  ConfusionCounts& operator+=(const ConfusionCounts& o);
};

/// A pixel is positive iff prediction >= threshold.
ConfusionCounts confusion(std::span<const Scalar> prediction, std::span<const Scalar> truth,
                          double threshold = 0.5);
ConfusionCounts confusion(std::span<const Scalar> prediction, std::span<const std::uint8_t> truth,
                          double threshold = 0.5);

struct Metrics {
  double se = 0, sp = 0, ac = 0, di = 0, ja = 0;
};

// Undefined ratios (empty class) report 1.0 when the class is absent from both
// prediction and truth, 0.0 otherwise.
Metrics metrics(const ConfusionCounts& c);

struct MetricReport {
  std::vector<std::pair<std::string, Metrics>> rows;

  /// Unweighted mean of per-image rows.
  Metrics mean() const;
  /// Header `image,SE,SP,AC,DI,JA`, one row per image, final MEAN row, 4 decimals.
  std::string to_csv() const;
};

std::string format_metric(double v);

}  // namespace cascn
