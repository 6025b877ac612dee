#pragma once

#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "cascn/data.hpp"
#include "cascn/model.hpp"
#include "cascn/train.hpp"

namespace cascn {

enum class Scale { Paper, Desk };
Scale parse_scale(std::string_view name);

/// Everything a CLI run needs, as one key=value document.
struct RunConfig {
  ModelConfig model = ModelConfig::paper();
  OptimizerConfig optimizer;
  SplitSpec split;
  AugmentPolicy augment = AugmentPolicy::full();
  int epochs = 100;
  int batch_size = 4;
  std::int64_t max_steps = 0;
  bool deterministic = false;

  static RunConfig defaults(Scale scale);

  /// Applies key=value lines on top of `base`. A `scale=` line resets every
  /// field to that scale's defaults and must precede all other keys. Unknown
  /// keys and bad values throw ConfigError naming the key.
  static RunConfig parse(std::string_view text, const RunConfig& base);
  static RunConfig load(const std::string& path, const RunConfig& base);

  void set(std::string_view key, std::string_view value);
  std::vector<std::pair<std::string, std::string>> entries() const;
  std::string serialize() const;
  void validate() const;

  TrainOptions train_options(const std::string& out_dir = {}) const;
};

}  // namespace cascn
