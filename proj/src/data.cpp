#include <algorithm>
#include <cctype>
#include <cmath>
#include <filesystem>
#include <numbers>
#include <set>

#include "cascn/data.hpp"

namespace fs = std::filesystem;

namespace cascn {
namespace {

std::string lower(std::string s) {
  for (auto& ch : s) ch = static_cast<char>(std::tolower(static_cast<unsigned char>(ch)));
  return s;
}

bool image_ext(const fs::path& p) {
  const auto e = lower(p.extension().string());
  return e == ".png" || e == ".bmp";
}

std::uint8_t to_u8(double v) {
  return static_cast<std::uint8_t>(std::clamp(std::lround(v), 0L, 255L));
}

// Reflection without repeating the edge pixel.
double reflect(double x, int n) {
  if (n == 1) return 0.0;
  const double period = 2.0 * (n - 1);
  x = std::fmod(std::abs(x), period);
  return x > n - 1 ? period - x : x;
}

double bilinear(const Image& im, double y, double x, int c) {
  const int y0 = static_cast<int>(std::floor(y));
  const int x0 = static_cast<int>(std::floor(x));
  const int y1 = std::min(y0 + 1, im.height - 1);
  const int x1 = std::min(x0 + 1, im.width - 1);
  const double fy = y - y0, fx = x - x0;
  const double top = im.at(y0, x0, c) * (1 - fx) + im.at(y0, x1, c) * fx;
  const double bot = im.at(y1, x0, c) * (1 - fx) + im.at(y1, x1, c) * fx;
  return top * (1 - fy) + bot * fy;
}

void check_sample(const Sample& s, const char* op) {
  if (s.image.height != s.mask.height || s.image.width != s.mask.width || s.mask.channels != 1)
    throw DimensionError(std::string(op) + ": image and mask dims differ for " + s.id);
}

Image flip(const Image& im, bool horizontal) {
  Image out(im.height, im.width, im.channels);
  for (int y = 0; y < im.height; ++y)
    for (int x = 0; x < im.width; ++x) {
      const int sy = horizontal ? y : im.height - 1 - y;
      const int sx = horizontal ? im.width - 1 - x : x;
      for (int c = 0; c < im.channels; ++c) out.at(y, x, c) = im.at(sy, sx, c);
    }
  return out;
}

Image transpose(const Image& im) {
  Image out(im.width, im.height, im.channels);
  for (int y = 0; y < im.height; ++y)
    for (int x = 0; x < im.width; ++x)
      for (int c = 0; c < im.channels; ++c) out.at(x, y, c) = im.at(y, x, c);
  return out;
}

}  // namespace

std::vector<Sample> load_dataset(const std::string& root) {
  const fs::path base(root);
  if (!fs::is_directory(base)) throw IoError("data root not found: " + root);
  const fs::path images = base / "images", masks = base / "masks";
  if (!fs::is_directory(images)) throw IoError("missing images/ directory under " + root);

  std::vector<fs::path> files;
  for (const auto& entry : fs::directory_iterator(images))
    if (entry.is_regular_file() && image_ext(entry.path())) files.push_back(entry.path());
  if (files.empty()) throw IoError("no images found under " + images.string());
  std::sort(files.begin(), files.end());

  std::vector<Sample> out;
  std::set<std::string> seen;
  for (const auto& file : files) {
    Sample s;
    s.id = file.stem().string();
    if (!seen.insert(s.id).second) throw IoError("duplicate image id " + s.id);
    fs::path mask_path;
    for (const char* ext : {".png", ".bmp", ".PNG", ".BMP"}) {
      const auto candidate = masks / (s.id + ext);
      if (fs::is_regular_file(candidate)) {
        mask_path = candidate;
        break;
      }
    }
    if (mask_path.empty()) throw IoError("missing mask for id " + s.id);
    s.image = to_rgb(read_image(file.string()));
    s.mask = binarize_mask(read_image(mask_path.string()));
    if (s.mask.height != s.image.height || s.mask.width != s.image.width)
      throw IoError("mask size differs from image for id " + s.id);
    out.push_back(std::move(s));
  }
  return out;
}

void save_dataset(const std::string& root, const std::vector<Sample>& samples) {
  const fs::path base(root);
  std::error_code ec;
  fs::create_directories(base / "images", ec);
  fs::create_directories(base / "masks", ec);
  if (!fs::is_directory(base / "images") || !fs::is_directory(base / "masks"))
    throw IoError("cannot create dataset directories under " + root);
  for (const auto& s : samples) {
    write_png((base / "images" / (s.id + ".png")).string(), s.image);
    Image m = s.mask;
    for (auto& v : m.pixels) v = v ? 255 : 0;
    write_png((base / "masks" / (s.id + ".png")).string(), m);
  }
}

Image resize_bilinear(const Image& im, int height, int width) {
  if (height < 1 || width < 1) throw DimensionError("resize: target dims must be positive");
  if (height == im.height && width == im.width) return im;
  Image out(height, width, im.channels);
  const double sy = static_cast<double>(im.height) / height;
  const double sx = static_cast<double>(im.width) / width;
  for (int y = 0; y < height; ++y) {
    const double fy = std::clamp((y + 0.5) * sy - 0.5, 0.0, im.height - 1.0);
    for (int x = 0; x < width; ++x) {
      const double fx = std::clamp((x + 0.5) * sx - 0.5, 0.0, im.width - 1.0);
      for (int c = 0; c < im.channels; ++c) out.at(y, x, c) = to_u8(bilinear(im, fy, fx, c));
    }
  }
  return out;
}

Image resize_nearest(const Image& im, int height, int width) {
  if (height < 1 || width < 1) throw DimensionError("resize: target dims must be positive");
  Image out(height, width, im.channels);
  for (int y = 0; y < height; ++y) {
    const int yy = std::min(static_cast<int>((2L * y + 1) * im.height / (2L * height)), im.height - 1);
    for (int x = 0; x < width; ++x) {
      const int xx = std::min(static_cast<int>((2L * x + 1) * im.width / (2L * width)), im.width - 1);
      for (int c = 0; c < im.channels; ++c) out.at(y, x, c) = im.at(yy, xx, c);
    }
  }
  return out;
}

Sample resize(const Sample& s, InputSize target) {
  check_sample(s, "resize");
  return {s.id, resize_bilinear(s.image, target.height, target.width),
          resize_nearest(s.mask, target.height, target.width)};
}

AugmentPolicy AugmentPolicy::none() {
  AugmentPolicy p;
  p.rotate = p.hflip = p.vflip = p.dflip = false;
  return p;
}

AugmentPolicy AugmentPolicy::full() { return AugmentPolicy{}; }

AugmentPolicy AugmentPolicy::only(AugmentOp op) {
  AugmentPolicy p = none();
  switch (op) {
    case AugmentOp::Rotate: p.rotate = true; break;
    case AugmentOp::HFlip: p.hflip = true; break;
    case AugmentOp::VFlip: p.vflip = true; break;
    case AugmentOp::DFlip: p.dflip = true; break;
  }
  return p;
}

AugmentPolicy AugmentPolicy::parse(std::string_view spec) {
  const std::string s = lower(std::string(spec));
  if (s.empty() || s == "none") return none();
  if (s == "full") return full();
  AugmentPolicy p = none();
  std::size_t start = 0;
  while (start <= s.size()) {
    const std::size_t end = std::min(s.find(',', start), s.size());
    const std::string tok = s.substr(start, end - start);
    if (tok == "rotate") p.rotate = true;
    else if (tok == "hflip") p.hflip = true;
    else if (tok == "vflip") p.vflip = true;
    else if (tok == "dflip") p.dflip = true;
    else throw ConfigError("augment: unknown op '" + tok + "' (expected rotate, hflip, vflip, dflip, none or full)");
    start = end + 1;
  }
  return p;
}

std::string AugmentPolicy::ops_string() const {
  if (!any()) return "none";
  std::string out;
  auto add = [&](bool on, const char* name) {
    if (!on) return;
    if (!out.empty()) out += ',';
    out += name;
  };
  add(rotate, "rotate");
  add(hflip, "hflip");
  add(vflip, "vflip");
  add(dflip, "dflip");
  return out;
}

Sample hflip(const Sample& s) {
  check_sample(s, "hflip");
  return {s.id, flip(s.image, true), flip(s.mask, true)};
}

Sample vflip(const Sample& s) {
  check_sample(s, "vflip");
  return {s.id, flip(s.image, false), flip(s.mask, false)};
}

Sample dflip(const Sample& s) {
  check_sample(s, "dflip");
  const int h = s.image.height, w = s.image.width;
  return {s.id, resize_bilinear(transpose(s.image), h, w), resize_nearest(transpose(s.mask), h, w)};
}

Sample rotate(const Sample& s, double degrees) {
  check_sample(s, "rotate");
  const int h = s.image.height, w = s.image.width;
  const double t = degrees * std::numbers::pi / 180.0;
  const double ct = std::cos(t), st = std::sin(t);
  const double cy = (h - 1) / 2.0, cx = (w - 1) / 2.0;
  Sample out{s.id, Image(h, w, s.image.channels), Image(h, w, 1)};
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x) {
      const double dy = y - cy, dx = x - cx;
      const double sx = reflect(ct * dx + st * dy + cx, w);
      const double sy = reflect(-st * dx + ct * dy + cy, h);
      for (int c = 0; c < s.image.channels; ++c) out.image.at(y, x, c) = to_u8(bilinear(s.image, sy, sx, c));
      const int my = std::min(static_cast<int>(std::lround(sy)), h - 1);
      const int mx = std::min(static_cast<int>(std::lround(sx)), w - 1);
      out.mask.at(y, x) = s.mask.at(my, mx);
    }
  return out;
}

Sample augment(const Sample& s, AugmentOp op, std::mt19937_64& rng, double max_degrees) {
  switch (op) {
    case AugmentOp::Rotate: {
      std::uniform_real_distribution<double> angle(-max_degrees, max_degrees);
      return rotate(s, angle(rng));
    }
    case AugmentOp::HFlip: return hflip(s);
    case AugmentOp::VFlip: return vflip(s);
    case AugmentOp::DFlip: return dflip(s);
  }
  return s;
}

Sample apply_policy(const Sample& s, const AugmentPolicy& policy, std::mt19937_64& rng) {
  std::uniform_real_distribution<double> coin(0.0, 1.0);
  Sample out = s;
  const std::pair<bool, AugmentOp> ops[] = {{policy.rotate, AugmentOp::Rotate},
                                            {policy.hflip, AugmentOp::HFlip},
                                            {policy.vflip, AugmentOp::VFlip},
                                            {policy.dflip, AugmentOp::DFlip}};
  for (const auto& [enabled, op] : ops)
    if (enabled && coin(rng) < policy.probability) out = augment(out, op, rng, policy.max_degrees);
  return out;
}

Splits split(const std::vector<Sample>& samples, const SplitSpec& spec) {
  for (double r : {spec.train, spec.val, spec.test})
    if (!(r >= 0.0 && r <= 1.0)) throw ConfigError("split ratios must lie in [0, 1]");
  if (std::abs(spec.train + spec.val + spec.test - 1.0) > 1e-6)
    throw ConfigError("split ratios must sum to 1");
  const std::size_t n = samples.size();
  std::vector<std::size_t> order(n);
  for (std::size_t i = 0; i < n; ++i) order[i] = i;
  std::mt19937_64 rng(spec.seed);
  std::shuffle(order.begin(), order.end(), rng);

  const auto n_train = static_cast<std::size_t>(std::floor(spec.train * n + 1e-9));
  const auto n_val = std::min(n - n_train, static_cast<std::size_t>(std::floor(spec.val * n + 1e-9)));
  Splits out;
  for (std::size_t i = 0; i < n; ++i) {
    const Sample& s = samples[order[i]];
    if (i < n_train) out.train.push_back(s);
    else if (i < n_train + n_val) out.val.push_back(s);
    else out.test.push_back(s);
  }
  if (spec.require_nonempty && n >= 10) {
    if (out.train.empty()) throw ContractError("split: train split is empty");
    if (out.val.empty()) throw ContractError("split: validation split is empty");
    if (out.test.empty()) throw ContractError("split: test split is empty");
  }
  return out;
}

std::vector<Sample> synth_dataset(int n, InputSize size, std::uint64_t seed) {
  if (n < 0) throw ConfigError("synth: sample count must be non-negative");
  const int h = size.height, w = size.width;
  if (h < 8 || w < 8) throw ConfigError("synth: image must be at least 8x8");
  std::vector<Sample> out;
  for (int i = 0; i < n; ++i) {
    std::seed_seq seq{seed, static_cast<std::uint64_t>(i)};
    std::mt19937_64 rng(seq);
    std::uniform_real_distribution<double> u(0.0, 1.0);
    std::normal_distribution<double> noise(0.0, 4.0);
    auto range = [&](double lo, double hi) { return lo + (hi - lo) * u(rng); };

    const double skin[3] = {range(185, 225), range(135, 175), range(115, 155)};
    const double dark[3] = {range(70, 130), range(40, 80), range(25, 60)};
    struct Wave {
      double ky, kx, phase, amp;
    };
    Wave waves[3];
    for (auto& wv : waves)
      wv = {range(-0.4, 0.4), range(-0.4, 0.4), range(0, 2 * std::numbers::pi), range(3, 8)};

    const double frac = range(0.1, 0.4);
    const double aspect = range(0.6, 1.0);
    const double theta = range(0, std::numbers::pi);
    double a = std::sqrt(frac * h * w / (std::numbers::pi * aspect));
    double b = aspect * a;
    const double c = std::cos(theta), s = std::sin(theta);
    double ex = std::sqrt(a * a * c * c + b * b * s * s);
    double ey = std::sqrt(a * a * s * s + b * b * c * c);
    const double shrink = std::min({1.0, (w / 2.0 - 1) / ex, (h / 2.0 - 1) / ey});
    a *= shrink, b *= shrink, ex *= shrink, ey *= shrink;
    const double cx = range(ex, w - 1 - ex);
    const double cy = range(ey, h - 1 - ey);

    Sample smp{"synth_" + std::to_string(i), Image(h, w, 3), Image(h, w, 1)};
    for (int y = 0; y < h; ++y)
      for (int x = 0; x < w; ++x) {
        const double dx = x - cx, dy = y - cy;
        const double u1 = (c * dx + s * dy) / a, v1 = (-s * dx + c * dy) / b;
        const double d = std::sqrt(u1 * u1 + v1 * v1);
        smp.mask.at(y, x) = d <= 1.0 ? 1 : 0;
        const double alpha = std::clamp((1.1 - d) / 0.2, 0.0, 1.0);
        double tex = 0;
        for (const auto& wv : waves) tex += wv.amp * std::sin(wv.ky * y + wv.kx * x + wv.phase);
        for (int ch = 0; ch < 3; ++ch)
          smp.image.at(y, x, ch) = to_u8(skin[ch] * (1 - alpha) + dark[ch] * alpha + tex + noise(rng));
      }
    out.push_back(std::move(smp));
  }
  return out;
}

Tensor images_to_tensor(const std::vector<const Sample*>& batch) {
  if (batch.empty()) throw ContractError("empty batch");
  const int h = batch[0]->image.height, w = batch[0]->image.width;
  Tensor t(Shape{static_cast<int>(batch.size()), 3, h, w});
  for (std::size_t n = 0; n < batch.size(); ++n) {
    const Image& im = batch[n]->image;
    if (im.height != h || im.width != w || im.channels != 3)
      throw DimensionError("batch images must share one size and have 3 channels");
    for (int c = 0; c < 3; ++c)
      for (int y = 0; y < h; ++y)
        for (int x = 0; x < w; ++x)
          t.at(static_cast<int>(n), c, y, x) = static_cast<Scalar>(im.at(y, x, c)) / Scalar(255);
  }
  return t;
}

Tensor masks_to_tensor(const std::vector<const Sample*>& batch) {
  if (batch.empty()) throw ContractError("empty batch");
  const int h = batch[0]->mask.height, w = batch[0]->mask.width;
  Tensor t(Shape{static_cast<int>(batch.size()), 1, h, w});
  for (std::size_t n = 0; n < batch.size(); ++n) {
    const Image& m = batch[n]->mask;
    if (m.height != h || m.width != w || m.channels != 1)
      throw DimensionError("batch masks must share one size and have 1 channel");
    for (int y = 0; y < h; ++y)
      for (int x = 0; x < w; ++x) t.at(static_cast<int>(n), 0, y, x) = m.at(y, x) ? Scalar(1) : Scalar(0);
  }
  return t;
}

}  // namespace cascn
