#include <png.h>

#include <algorithm>
#include <array>
#include <cstring>
#include <fstream>
#include <iterator>

#include "cascn/data.hpp"

namespace cascn {
namespace {

std::vector<std::uint8_t> slurp(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path);
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

bool is_png(const std::vector<std::uint8_t>& b) {
  static constexpr std::array<std::uint8_t, 8> sig{0x89, 'P', 'N', 'G', '\r', '\n', 0x1a, '\n'};
  return b.size() >= sig.size() && std::equal(sig.begin(), sig.end(), b.begin());
}

bool is_bmp(const std::vector<std::uint8_t>& b) {
  return b.size() >= 54 && b[0] == 'B' && b[1] == 'M';
}

Image decode_png(const std::vector<std::uint8_t>& bytes, const std::string& path) {
  png_image img;
  std::memset(&img, 0, sizeof img);
  img.version = PNG_IMAGE_VERSION;
  if (!png_image_begin_read_from_memory(&img, bytes.data(), bytes.size()))
    throw IoError("invalid PNG " + path + ": " + img.message);
  const bool gray = (img.format & PNG_FORMAT_FLAG_COLOR) == 0;
  img.format = gray ? PNG_FORMAT_GRAY : PNG_FORMAT_RGB;
  Image out(static_cast<int>(img.height), static_cast<int>(img.width), gray ? 1 : 3);
  // Transparent pixels are composited onto black.
  png_color black{0, 0, 0};
  if (!png_image_finish_read(&img, &black, out.pixels.data(), 0, nullptr)) {
    std::string msg = img.message;
    png_image_free(&img);
    throw IoError("invalid PNG " + path + ": " + msg);
  }
  return out;
}

std::uint32_t le32(const std::vector<std::uint8_t>& b, std::size_t o) {
  return b[o] | (b[o + 1] << 8) | (b[o + 2] << 16) | (std::uint32_t(b[o + 3]) << 24);
}
std::uint16_t le16(const std::vector<std::uint8_t>& b, std::size_t o) {
  return static_cast<std::uint16_t>(b[o] | (b[o + 1] << 8));
}

Image decode_bmp(const std::vector<std::uint8_t>& b, const std::string& path) {
  auto bad = [&](const std::string& why) { return IoError("invalid BMP " + path + ": " + why); };
  const std::uint32_t data_offset = le32(b, 10);
  const std::uint32_t header_size = le32(b, 14);
  if (header_size < 40) throw bad("unsupported header");
  const auto width = static_cast<std::int32_t>(le32(b, 18));
  const auto raw_height = static_cast<std::int32_t>(le32(b, 22));
  const int bpp = le16(b, 28);
  const std::uint32_t compression = le32(b, 30);
  if (compression != 0 && !(compression == 3 && bpp == 32)) throw bad("compressed data");
  if (width <= 0 || raw_height == 0 || width > 1 << 15 || std::abs(raw_height) > 1 << 15)
    throw bad("dimensions");
  if (bpp != 1 && bpp != 4 && bpp != 8 && bpp != 24 && bpp != 32) throw bad("bit depth");
  const bool bottom_up = raw_height > 0;
  const int height = std::abs(raw_height);

  std::vector<std::array<std::uint8_t, 3>> palette;
  if (bpp <= 8) {
    std::uint32_t colors = le32(b, 46);
    if (colors == 0) colors = 1u << bpp;
    const std::size_t pal = 14 + header_size;
    if (pal + 4 * std::size_t(colors) > b.size()) throw bad("palette");
    for (std::uint32_t i = 0; i < colors; ++i)
      palette.push_back({b[pal + 4 * i + 2], b[pal + 4 * i + 1], b[pal + 4 * i]});
  }
  const std::size_t stride = ((static_cast<std::size_t>(width) * bpp + 31) / 32) * 4;
  if (data_offset + stride * height > b.size()) throw bad("truncated pixel data");

  bool gray = !palette.empty() &&
              std::all_of(palette.begin(), palette.end(),
                          [](const auto& c) { return c[0] == c[1] && c[1] == c[2]; });
  Image out(height, width, gray ? 1 : 3);
  for (int y = 0; y < height; ++y) {
    const std::size_t row = data_offset + stride * static_cast<std::size_t>(bottom_up ? height - 1 - y : y);
    for (int x = 0; x < width; ++x) {
      std::array<std::uint8_t, 3> rgb{};
      if (bpp <= 8) {
        const std::size_t bit = static_cast<std::size_t>(x) * bpp;
        const int shift = 8 - bpp - static_cast<int>(bit % 8);
        const unsigned idx = (b[row + bit / 8] >> shift) & ((1u << bpp) - 1);
        if (idx >= palette.size()) throw bad("palette index");
        rgb = palette[idx];
      } else {
        const std::size_t p = row + static_cast<std::size_t>(x) * (bpp / 8);
        rgb = {b[p + 2], b[p + 1], b[p]};
      }
      for (int c = 0; c < out.channels; ++c) out.at(y, x, c) = rgb[c];
    }
  }
  return out;
}

}  // namespace

Image read_image(const std::string& path) {
  const auto bytes = slurp(path);
  if (is_png(bytes)) return decode_png(bytes, path);
  if (is_bmp(bytes)) return decode_bmp(bytes, path);
  throw IoError("not a PNG or BMP image: " + path);
}

void write_png(const std::string& path, const Image& image) {
  if (image.channels != 1 && image.channels != 3) throw ContractError("write_png: 1 or 3 channels");
  png_image img;
  std::memset(&img, 0, sizeof img);
  img.version = PNG_IMAGE_VERSION;
  img.width = static_cast<png_uint_32>(image.width);
  img.height = static_cast<png_uint_32>(image.height);
  img.format = image.channels == 1 ? PNG_FORMAT_GRAY : PNG_FORMAT_RGB;
  if (!png_image_write_to_file(&img, path.c_str(), 0, image.pixels.data(), 0, nullptr))
    throw IoError("cannot write " + path + ": " + img.message);
}

Image to_rgb(const Image& image) {
  if (image.channels == 3) return image;
  if (image.channels != 1) throw ContractError("to_rgb: expected 1 or 3 channels");
  Image out(image.height, image.width, 3);
  for (std::size_t i = 0; i < image.pixels.size(); ++i)
    for (int c = 0; c < 3; ++c) out.pixels[i * 3 + c] = image.pixels[i];
  return out;
}

Image binarize_mask(const Image& image) {
  Image out(image.height, image.width, 1);
  const std::size_t n = static_cast<std::size_t>(image.height) * image.width;
  for (std::size_t i = 0; i < n; ++i) {
    int sum = 0;
    for (int c = 0; c < image.channels; ++c) sum += image.pixels[i * image.channels + c];
    out.pixels[i] = sum >= 128 * image.channels ? 1 : 0;
  }
  return out;
}

}  // namespace cascn
