#pragma once

#include <array>
#include <cstdint>
#include <memory>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "cascn/aspp.hpp"
#include "cascn/layers.hpp"
#include "cascn/meca.hpp"

namespace cascn {

struct InputSize {
  int height = 192;
  int width = 256;
  friend bool operator==(const InputSize&, const InputSize&) = default;
};

struct EncoderSchedule {
  int stem_channels = 64;
  std::array<int, 4> blocks{6, 12, 24, 16};
  int growth = 32;
  int bottleneck_factor = 4;
  double compression = 0.5;
  int tail_channels = 1024;  // width of the conv block after the last dense block
};

struct ModelConfig {
  InputSize input;
  ConvMode conv_mode = ConvMode::Separable;
  bool use_aspp = true;
  bool use_meca = true;
  EncoderSchedule encoder;
  std::array<int, 5> decoder_widths{512, 256, 128, 64, 32};
  int aspp_channels = 256;
  std::vector<int> aspp_rates{6, 12, 18};
  bool aspp_1x1 = true;
  bool aspp_image_pool = true;
  int meca_kernel = 0;  // 0 = adaptive
  std::uint64_t seed = 1;

  /// DenseNet-121 encoder at 192x256.
  static ModelConfig paper();
  /// Blocks (2,2,2,2), growth 8, stem 16 at 64x64.
  static ModelConfig desk();

  void validate() const;
};

// Ablation variants, in reporting order: stConv, seConv, seConv+ASPP, seConv+MECA, full.
const std::array<std::string_view, 5>& variant_names();
std::string_view variant_label(std::string_view name);
ModelConfig variant(const ModelConfig& base, std::string_view name);

// key=value serialization of every ModelConfig field.
std::vector<std::pair<std::string, std::string>> model_config_entries(const ModelConfig& cfg);
// Returns false when the key is not a model key; throws ConfigError for a bad value.
bool apply_model_entry(ModelConfig& cfg, std::string_view key, std::string_view value);

struct LayerFlops {
  std::string name;
  bool swappable = false;  // 3x3 block that exists in standard and separable form
  bool conv2d = true;      // false for the 1-D channel conv; cost fields stay zero
  int height = 0, width = 0, kernel = 0, in_channels = 0, out_channels = 0;
  std::uint64_t macs = 0;           // as configured
  std::uint64_t standard_macs = 0;  // H*W*Dk^2*N*M
  std::uint64_t separable_macs = 0; // H*W*N*(Dk^2+M)
  // Cost ratio Dk^2*M / (Dk^2+M), kept as an unreduced integer fraction.
  std::uint64_t ratio_num = 0;
  std::uint64_t ratio_den = 0;
  double ratio() const { return ratio_den ? double(ratio_num) / double(ratio_den) : 0.0; }
};

struct FlopReport {
  std::vector<LayerFlops> layers;
  std::uint64_t total_macs = 0;
  std::uint64_t swappable_standard_macs = 0;
  std::uint64_t swappable_separable_macs = 0;
};

LayerFlops separable_cost(std::string name, int height, int width, int kernel, int in_ch, int out_ch);

class CascnModel {
 public:
  struct Trace {
    std::array<Var, 4> taps;          // encoder features at strides 2, 4, 8, 16
    Var bottom;                       // stride 32, after the encoder tail
    Var bridge;
    std::array<Var, 5> upsampled;     // transposed-conv outputs per decoder stage
    std::array<Var, 4> skips;         // skip maps as concatenated (MECA-refined or raw)
    Var probabilities;
  };

  explicit CascnModel(const ModelConfig& cfg);
  CascnModel(const CascnModel&) = delete;
  CascnModel& operator=(const CascnModel&) = delete;

  /// [N, 3, H, W] -> [N, 1, H, W] probabilities.
  Var forward(const Context& ctx, const Var& x);
  Trace trace(const Context& ctx, const Var& x);

  void visit(const ParamVisitor& v);
  std::vector<Parameter*> parameters();
  std::vector<std::pair<std::string, Tensor*>> buffers();
  std::size_t parameter_count();

  const ModelConfig& config() const { return cfg_; }
  FlopReport flops() const;

  Tensor predict(const Tensor& images);  // eval mode, no tape

 private:
  struct DecoderStage {
    TransposedConv2x up;
    bool has_skip = false;
    int skip_channels = 0;
    Meca meca;
    ConvBlock first;
    ConvBlock second;
  };

  ModelConfig cfg_;
  Conv2d stem_conv_;
  BatchNorm2d stem_norm_;
  std::array<DenseBlock, 4> blocks_;
  std::array<Transition, 3> transitions_;
  BatchNorm2d final_norm_;
  ConvBlock tail_;
  std::unique_ptr<Aspp> aspp_;
  std::array<DecoderStage, 5> decoder_;
  Conv2d head_;
};

// Checkpoint file: "CSCN" magic, u32 version, length-prefixed key=value config
// text, tensor blob (name, shape, f64 data), trailing CRC-32. Little-endian.
struct Checkpoint {
  static constexpr std::uint32_t kVersion = 1;
  std::string config_text;
  std::vector<std::pair<std::string, Tensor>> tensors;
};

void write_checkpoint(const std::string& path, const Checkpoint& ckpt);
std::vector<std::uint8_t> encode_checkpoint(const Checkpoint& ckpt);
Checkpoint read_checkpoint(const std::string& path);
Checkpoint decode_checkpoint(const std::vector<std::uint8_t>& bytes);

/// Model parameters and norm buffers plus the caller's extra lines/tensors.
void save_model(CascnModel& model, const std::string& path, const std::string& extra_config = {},
                const std::vector<std::pair<std::string, Tensor>>& extra_tensors = {});
/// Rebuilds the model from the stored config and restores every tensor. When
/// expected_input is given, a differing declared input size is a ConfigError.
/// The raw checkpoint is returned through `raw` when non-null.
std::unique_ptr<CascnModel> load_model(const std::string& path, const InputSize* expected_input = nullptr,
                                       Checkpoint* raw = nullptr);
std::unique_ptr<CascnModel> model_from_checkpoint(const Checkpoint& ckpt, const InputSize* expected_input = nullptr);

// Parses "k=v" lines (blank lines and '#' comments skipped) in order.
std::vector<std::pair<std::string, std::string>> parse_kv_lines(std::string_view text);

}  // namespace cascn
