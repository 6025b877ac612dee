#pragma once

#include <cstdint>
#include <random>
#include <string>
#include <string_view>
#include <vector>

#include "cascn/model.hpp"
#include "cascn/tensor.hpp"

namespace cascn {

/// 8-bit interleaved image, row-major H x W x channels.
struct Image {
  int height = 0;
  int width = 0;
  int channels = 0;
  std::vector<std::uint8_t> pixels;

  Image() = default;
  Image(int h, int w, int c, std::uint8_t fill = 0)
      : height(h), width(w), channels(c), pixels(static_cast<std::size_t>(h) * w * c, fill) {}

  std::uint8_t& at(int y, int x, int c = 0) {
    return pixels[(static_cast<std::size_t>(y) * width + x) * channels + c];
  }
  std::uint8_t at(int y, int x, int c = 0) const {
    return pixels[(static_cast<std::size_t>(y) * width + x) * channels + c];
  }
  friend bool operator==(const Image&, const Image&) = default;
};

/// RGB image with its binary (0/1) single-channel lesion mask.
struct Sample {
  std::string id;
  Image image;
  Image mask;
};

// Reads PNG (8/16-bit, any color type) or uncompressed BMP (1/4/8/24/32-bit).
// The format is detected from the file signature; anything else is an IoError.
Image read_image(const std::string& path);
void write_png(const std::string& path, const Image& image);

Image to_rgb(const Image& image);
/// Single-channel 0/1 mask; a pixel is foreground when its mean intensity >= 128.
Image binarize_mask(const Image& image);

/// `<root>/images/<id>.{png,bmp}` paired with `<root>/masks/<id>.{png,bmp}`,
/// sorted by id.
std::vector<Sample> load_dataset(const std::string& root);
/// Writes the same layout; masks are stored as 0/255 PNG.
void save_dataset(const std::string& root, const std::vector<Sample>& samples);

Image resize_bilinear(const Image& image, int height, int width);
Image resize_nearest(const Image& image, int height, int width);
Sample resize(const Sample& sample, InputSize target);

enum class AugmentOp { Rotate, HFlip, VFlip, DFlip };

struct AugmentPolicy {
  bool rotate = true;
  bool hflip = true;
  bool vflip = true;
  bool dflip = true;
  double max_degrees = 25.0;
  double probability = 0.5;  // per enabled op, per sample

  static AugmentPolicy none();
  static AugmentPolicy full();
  static AugmentPolicy only(AugmentOp op);
  /// "none", "full", or a comma list of rotate/hflip/vflip/dflip.
  static AugmentPolicy parse(std::string_view spec);
  std::string ops_string() const;
  bool any() const { return rotate || hflip || vflip || dflip; }
};

/// Rotation about the image center; image bilinear, mask nearest, reflected border.
Sample rotate(const Sample& s, double degrees);
Sample hflip(const Sample& s);
Sample vflip(const Sample& s);
/// Transpose, then resize back to the original H x W.
Sample dflip(const Sample& s);
/// One op; rotate draws its angle uniformly from [-max_degrees, max_degrees].
Sample augment(const Sample& s, AugmentOp op, std::mt19937_64& rng, double max_degrees = 25.0);
/// Each enabled op applied with policy.probability, in rotate/hflip/vflip/dflip order.
Sample apply_policy(const Sample& s, const AugmentPolicy& policy, std::mt19937_64& rng);

struct SplitSpec {
  double train = 0.7;
  double val = 0.1;
  double test = 0.2;
  std::uint64_t seed = 1;
  // Datasets of at least 10 samples must yield non-empty splits.
  bool require_nonempty = true;
};

struct Splits {
  std::vector<Sample> train, val, test;
};

/// Seeded shuffle, then floor(ratio * n) for train and val; test takes the remainder.
Splits split(const std::vector<Sample>& samples, const SplitSpec& spec);

/// Textured background with one blurred elliptical lesion; mask is the exact
/// ellipse interior. Deterministic per seed.
std::vector<Sample> synth_dataset(int n, InputSize size, std::uint64_t seed);

/// [N, 3, H, W] in [0, 1] and [N, 1, H, W] in {0, 1}.
Tensor images_to_tensor(const std::vector<const Sample*>& batch);
Tensor masks_to_tensor(const std::vector<const Sample*>& batch);

}  // namespace cascn
