#pragma once

#include <cstdint>
#include <functional>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "cascn/data.hpp"
#include "cascn/loss_metrics.hpp"
#include "cascn/model.hpp"

namespace cascn {

enum class OptimizerKind { Adam, SgdNesterov };

struct OptimizerConfig {
  OptimizerKind kind = OptimizerKind::Adam;
  double lr = 0.003;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double momentum = 0.9;  // sgd_nesterov only

  void validate() const;
};

std::string_view optimizer_name(OptimizerKind kind);
OptimizerKind parse_optimizer(std::string_view name);

/// Bias-corrected Adam; `t` is the 1-based step index.
void adam_step(std::span<Scalar> w, std::span<const Scalar> g, std::span<Scalar> m, std::span<Scalar> v,
               std::int64_t t, const OptimizerConfig& cfg);
/// v <- mu v - lr g;  w <- w + mu v - lr g.
void sgd_nesterov_step(std::span<Scalar> w, std::span<const Scalar> g, std::span<Scalar> velocity,
                       const OptimizerConfig& cfg);

class Optimizer {
 public:
  Optimizer(OptimizerConfig cfg, std::vector<Parameter*> params);

  /// Applies one update from each parameter's accumulated grad.
  void step();
  std::int64_t steps() const { return steps_; }
  const OptimizerConfig& config() const { return cfg_; }

  /// Slot tensors named "optim.<param>.m" / "optim.<param>.v" (Adam) or
  /// "optim.<param>.velocity" (Nesterov).
  std::vector<std::pair<std::string, Tensor>> state() const;
  void restore(const std::vector<std::pair<std::string, Tensor>>& tensors, std::int64_t steps);

 private:
  OptimizerConfig cfg_;
  std::vector<Parameter*> params_;
  std::vector<Tensor> first_, second_;
  std::int64_t steps_ = 0;
};

struct TrainOptions {
  int epochs = 1;
  int batch_size = 2;
  std::int64_t max_steps = 0;  // 0 = no cap
  AugmentPolicy augment = AugmentPolicy::full();
  std::uint64_t seed = 1;
  std::string out_dir;  // checkpoints and log go here when non-empty
};

struct EpochLog {
  int epoch = 0;
  double train_loss = 0;
  bool has_val = false;
  Metrics val;
  /// epoch, train_loss, val SE/SP/AC/DI/JA; tab-separated, 4 decimals.
  std::string line() const;
};

struct TrainState {
  std::int64_t step = 0;
  int epoch = 0;  // completed epochs
  std::vector<double> step_losses;
  std::vector<EpochLog> log;
  double best_val_di = -1;
  std::string best_checkpoint;
  std::string last_checkpoint;
};

class Trainer {
 public:
  Trainer(CascnModel& model, OptimizerConfig opt, TrainOptions options);

  /// Runs the remaining epochs up to options.epochs. Samples must already be
  /// at the model input size. `on_epoch` sees each log entry as it is produced.
  const TrainState& fit(const std::vector<Sample>& train, const std::vector<Sample>& val,
                        const std::function<void(const EpochLog&)>& on_epoch = {});

  /// Forward, seg_loss, backward, optimizer step. Returns the loss.
  double train_step(const std::vector<const Sample*>& batch);

  /// Model, optimizer slots and counters. `extra_config` lines are appended.
  void save(const std::string& path, const std::string& extra_config = {});
  /// Restores optimizer slots and counters; the model must already hold the
  /// checkpoint's parameters.
  void resume(const Checkpoint& ckpt);

  const TrainState& state() const { return state_; }
  Optimizer& optimizer() { return optimizer_; }
  const TrainOptions& options() const { return options_; }

 private:
  std::vector<const Sample*> augmented_batch(const std::vector<Sample>& data, const std::vector<std::size_t>& order,
                                             std::size_t begin, std::size_t end, int epoch,
                                             std::vector<Sample>& storage) const;

  CascnModel& model_;
  Optimizer optimizer_;
  TrainOptions options_;
  TrainState state_;
};

/// Per-pixel probability maps [N, 1, H, W] for a batch [N, 3, H, W].
using Predictor = std::function<Tensor(const Tensor& images, const std::vector<const Sample*>& batch)>;

/// Per-image metrics in eval mode; parameters and buffers are not touched.
MetricReport evaluate(CascnModel& model, const std::vector<Sample>& data, int batch_size = 4);
MetricReport evaluate(const Predictor& predictor, const std::vector<Sample>& data, int batch_size = 4);

}  // namespace cascn
