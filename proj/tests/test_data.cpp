#include <algorithm>
#include <filesystem>
#include <fstream>
#include <queue>
#include <random>
#include <set>

#include "cascn/data.hpp"
#include "doctest.h"

using namespace cascn;
namespace fs = std::filesystem;

namespace {

fs::path fresh_dir(const std::string& name) {
  fs::path d = fs::temp_directory_path() / "cascn_test_data" / name;
  fs::remove_all(d);
  fs::create_directories(d);
  return d;
}

Sample random_sample(int h, int w, std::mt19937_64& rng) {
  Sample s{"r", Image(h, w, 3), Image(h, w, 1)};
  std::uniform_int_distribution<int> byte(0, 255), bit(0, 1);
  for (auto& p : s.image.pixels) p = static_cast<std::uint8_t>(byte(rng));
  for (auto& p : s.mask.pixels) p = static_cast<std::uint8_t>(bit(rng));
  return s;
}

long positives(const Image& m) { return std::count(m.pixels.begin(), m.pixels.end(), std::uint8_t(1)); }

bool is_binary(const Image& m) {
  return std::all_of(m.pixels.begin(), m.pixels.end(), [](std::uint8_t v) { return v <= 1; });
}

// Image channels carry the mask as 0/255 so the two can be compared after a transform.
Sample mask_as_image(const Sample& s) {
  Sample t = s;
  t.image = Image(s.mask.height, s.mask.width, 3);
  for (int y = 0; y < s.mask.height; ++y)
    for (int x = 0; x < s.mask.width; ++x)
      for (int c = 0; c < 3; ++c) t.image.at(y, x, c) = s.mask.at(y, x) ? 255 : 0;
  return t;
}

// Minimal 24-bit bottom-up BMP writer, independent of the library.
void write_bmp24(const fs::path& p, const Image& rgb) {
  const int row = (rgb.width * 3 + 3) & ~3;
  const std::uint32_t data = static_cast<std::uint32_t>(row * rgb.height);
  std::vector<std::uint8_t> b(54 + data, 0);
  auto u32 = [&](std::size_t at, std::uint32_t v) {
    for (int i = 0; i < 4; ++i) b[at + i] = static_cast<std::uint8_t>(v >> (8 * i));
  };
  b[0] = 'B';
  b[1] = 'M';
  u32(2, 54 + data);
  u32(10, 54);
  u32(14, 40);
  u32(18, static_cast<std::uint32_t>(rgb.width));
  u32(22, static_cast<std::uint32_t>(rgb.height));
  b[26] = 1;
  b[28] = 24;
  for (int y = 0; y < rgb.height; ++y)
    for (int x = 0; x < rgb.width; ++x)
      for (int c = 0; c < 3; ++c)
        b[54 + static_cast<std::size_t>(rgb.height - 1 - y) * row + x * 3 + (2 - c)] = rgb.at(y, x, c);
  std::ofstream(p, std::ios::binary).write(reinterpret_cast<const char*>(b.data()), static_cast<std::streamsize>(b.size()));
}

}  // namespace

TEST_SUITE("io") {
  TEST_CASE("png round trip and gray mask binarization") {
    fs::path d = fresh_dir("png");
    std::mt19937_64 rng(1);
    Sample s = random_sample(5, 7, rng);
    write_png((d / "a.png").string(), s.image);
    CHECK(read_image((d / "a.png").string()) == s.image);

    Image gray(2, 2, 1, 200);
    gray.at(0, 0) = 127;
    gray.at(0, 1) = 128;
    write_png((d / "m.png").string(), gray);
    Image m = binarize_mask(read_image((d / "m.png").string()));
    CHECK(m.at(0, 0) == 0);
    CHECK(m.at(0, 1) == 1);
    CHECK(m.at(1, 0) == 1);
    CHECK(m.at(1, 1) == 1);
  }

  TEST_CASE("bmp read") {
    fs::path d = fresh_dir("bmp");
    std::mt19937_64 rng(2);
    Sample s = random_sample(3, 5, rng);
    write_bmp24(d / "a.bmp", s.image);
    CHECK(to_rgb(read_image((d / "a.bmp").string())) == s.image);
  }

  TEST_CASE("non-image file") {
    fs::path d = fresh_dir("junk");
    std::ofstream(d / "x.png") << "definitely not an image";
    CHECK_THROWS_AS(read_image((d / "x.png").string()), IoError);
    CHECK_THROWS_AS(read_image((d / "missing.png").string()), IoError);
  }
}

TEST_SUITE("dataset") {
  TEST_CASE("save then load") {
    fs::path d = fresh_dir("ds");
    auto samples = synth_dataset(6, {24, 32}, 3);
    save_dataset(d.string(), samples);
    auto loaded = load_dataset(d.string());
    REQUIRE(loaded.size() == 6);
    for (std::size_t i = 0; i < 6; ++i) {
      auto it = std::find_if(samples.begin(), samples.end(), [&](const Sample& s) { return s.id == loaded[i].id; });
      REQUIRE(it != samples.end());
      CHECK(loaded[i].image == it->image);
      CHECK(loaded[i].mask == it->mask);
    }
    CHECK(std::is_sorted(loaded.begin(), loaded.end(), [](const Sample& a, const Sample& b) { return a.id < b.id; }));
  }

  TEST_CASE("errors") {
    CHECK_THROWS_AS(load_dataset((fs::temp_directory_path() / "cascn_no_such_root").string()), IoError);

    fs::path empty = fresh_dir("empty");
    fs::create_directories(empty / "images");
    fs::create_directories(empty / "masks");
    CHECK_THROWS_AS(load_dataset(empty.string()), IoError);

    fs::path missing = fresh_dir("missing");
    save_dataset(missing.string(), synth_dataset(2, {16, 16}, 1));
    fs::remove(missing / "masks" / "synth_1.png");
    try {
      load_dataset(missing.string());
      FAIL("expected IoError");
    } catch (const IoError& e) {
      CHECK(std::string(e.what()).find("synth_1") != std::string::npos);
    }
  }
}

TEST_SUITE("resize") {
  TEST_CASE("560x768 down to 192x256") {
    std::mt19937_64 rng(4);
    Sample s = random_sample(560, 768, rng);
    Sample r = resize(s, {192, 256});
    CHECK(r.image.height == 192);
    CHECK(r.image.width == 256);
    CHECK(r.mask.height == 192);
    CHECK(is_binary(r.mask));
  }

  TEST_CASE("own size is the identity") {
    std::mt19937_64 rng(5);
    Sample s = random_sample(9, 13, rng);
    Sample r = resize(s, {9, 13});
    CHECK(r.image == s.image);
    CHECK(r.mask == s.mask);
  }

  TEST_CASE("solid masks stay solid") {
    Image solid(7, 11, 1, 1);
    for (auto [h, w] : {std::pair{3, 5}, {20, 31}, {7, 7}}) {
      Image r = resize_nearest(solid, h, w);
      CHECK(positives(r) == long(h) * w);
    }
  }
}

TEST_SUITE("augment") {
  TEST_CASE("flip involutions and count preservation") {
    std::mt19937_64 rng(6);
    for (int t = 0; t < 20; ++t) {
      Sample s = random_sample(6 + t % 4, 9, rng);
      Sample h = hflip(s), v = vflip(s);
      CHECK(hflip(h).image == s.image);
      CHECK(hflip(h).mask == s.mask);
      CHECK(vflip(v).image == s.image);
      CHECK(vflip(v).mask == s.mask);
      CHECK(positives(h.mask) == positives(s.mask));
      CHECK(positives(v.mask) == positives(s.mask));
      CHECK(h.image.at(0, 0, 1) == s.image.at(0, s.image.width - 1, 1));
      CHECK(v.image.at(0, 2, 0) == s.image.at(s.image.height - 1, 2, 0));
    }
  }

  TEST_CASE("dflip transposes square samples and keeps the shape of others") {
    std::mt19937_64 rng(7);
    Sample s = random_sample(8, 8, rng);
    Sample d = dflip(s);
    for (int i = 0; i < 8; ++i)
      for (int j = 0; j < 8; ++j) {
        CHECK(d.mask.at(i, j) == s.mask.at(j, i));
        for (int c = 0; c < 3; ++c) CHECK(d.image.at(i, j, c) == s.image.at(j, i, c));
      }
    Sample r = dflip(random_sample(6, 10, rng));
    CHECK(r.image.height == 6);
    CHECK(r.image.width == 10);
    CHECK(is_binary(r.mask));
  }

  TEST_CASE("masks stay binary and in sync for every op") {
    auto data = synth_dataset(4, {48, 64}, 8);
    std::mt19937_64 rng(8);
    for (const auto& s : data)
      for (AugmentOp op : {AugmentOp::Rotate, AugmentOp::HFlip, AugmentOp::VFlip, AugmentOp::DFlip}) {
        Sample a = augment(s, op, rng);
        CHECK(is_binary(a.mask));
        CHECK(a.image.height == s.image.height);
        CHECK(a.mask.width == s.mask.width);
      }
  }

  TEST_CASE("flips commute with rebinarization exactly") {
    auto data = synth_dataset(5, {48, 64}, 9);
    for (const auto& s : data) {
      Sample m = mask_as_image(s);
      for (auto f : {hflip, vflip}) {
        Sample a = f(m);
        CHECK(binarize_mask(a.image) == a.mask);
      }
      Sample sq = mask_as_image(resize(s, {48, 48}));
      Sample d = dflip(sq);
      CHECK(binarize_mask(d.image) == d.mask);
    }
  }

  TEST_CASE("rotation sync within 1% of positive pixels at 192x256") {
    auto data = synth_dataset(10, {192, 256}, 10);
    std::mt19937_64 rng(10);
    std::uniform_real_distribution<double> angle(-25, 25);
    for (const auto& s : data)
      for (int k = 0; k < 5; ++k) {
        Sample r = rotate(mask_as_image(s), angle(rng));
        Image b = binarize_mask(r.image);
        long diff = 0;
        for (std::size_t i = 0; i < b.pixels.size(); ++i) diff += b.pixels[i] != r.mask.pixels[i];
        CHECK(double(diff) < 0.01 * double(positives(r.mask)));
      }
  }

  TEST_CASE("rotate by zero is the identity") {
    std::mt19937_64 rng(11);
    Sample s = random_sample(12, 17, rng);
    Sample r = rotate(s, 0.0);
    CHECK(r.image == s.image);
    CHECK(r.mask == s.mask);
  }

  TEST_CASE("policy is deterministic per seed") {
    auto data = synth_dataset(3, {48, 64}, 12);
    for (const auto& s : data) {
      std::mt19937_64 a(5), b(5);
      Sample x = apply_policy(s, AugmentPolicy::full(), a), y = apply_policy(s, AugmentPolicy::full(), b);
      CHECK(x.image == y.image);
      CHECK(x.mask == y.mask);
    }
  }

  TEST_CASE("none, each single op, and full") {
    AugmentPolicy none = AugmentPolicy::parse("none");
    CHECK_FALSE(none.any());
    const AugmentOp ops[] = {AugmentOp::Rotate, AugmentOp::HFlip, AugmentOp::VFlip, AugmentOp::DFlip};
    const char* names[] = {"rotate", "hflip", "vflip", "dflip"};
    for (int i = 0; i < 4; ++i) {
      AugmentPolicy p = AugmentPolicy::only(ops[i]);
      CHECK(p.ops_string() == names[i]);
      CHECK(AugmentPolicy::parse(names[i]).ops_string() == names[i]);
    }
    AugmentPolicy full = AugmentPolicy::parse("full");
    CHECK(full.rotate);
    CHECK(full.hflip);
    CHECK(full.vflip);
    CHECK(full.dflip);
    CHECK(AugmentPolicy::parse("hflip,vflip").ops_string() == "hflip,vflip");
    CHECK_THROWS_AS(AugmentPolicy::parse("spin"), ConfigError);

    std::mt19937_64 rng(13);
    Sample s = random_sample(8, 8, rng);
    Sample n = apply_policy(s, none, rng);
    CHECK(n.image == s.image);
  }
}

TEST_SUITE("split") {
  std::vector<Sample> dummies(int n) {
    std::vector<Sample> v(static_cast<std::size_t>(n));
    for (int i = 0; i < n; ++i) v[static_cast<std::size_t>(i)].id = std::to_string(i);
    return v;
  }

  TEST_CASE("200 samples at 0.7/0.1/0.2") {
    Splits s = split(dummies(200), {});
    CHECK(s.train.size() == 140);
    CHECK(s.val.size() == 20);
    CHECK(s.test.size() == 40);
    std::set<std::string> ids;
    for (auto* part : {&s.train, &s.val, &s.test})
      for (const auto& x : *part) ids.insert(x.id);
    CHECK(ids.size() == 200);
  }

  TEST_CASE("same seed, same split; other seed differs") {
    Splits a = split(dummies(50), {0.7, 0.1, 0.2, 9}), b = split(dummies(50), {0.7, 0.1, 0.2, 9});
    Splits c = split(dummies(50), {0.7, 0.1, 0.2, 10});
    bool same = true, other = true;
    for (std::size_t i = 0; i < a.train.size(); ++i) {
      same = same && a.train[i].id == b.train[i].id;
      other = other && a.train[i].id == c.train[i].id;
    }
    CHECK(same);
    CHECK_FALSE(other);
  }

  TEST_CASE("empty validation on a large dataset is a contract error") {
    CHECK_THROWS_AS(split(dummies(10), {1, 0, 0, 1}), ContractError);
    Splits small = split(dummies(9), {1, 0, 0, 1});
    CHECK(small.train.size() == 9);
    CHECK_THROWS_AS(split(dummies(10), {0.5, 0.5, 0.5, 1}), ConfigError);
  }
}

TEST_SUITE("synth") {
  // Number of 4-connected components of the positive region.
  int components(const Image& m) {
    std::vector<bool> seen(m.pixels.size());
    int n = 0;
    for (int y0 = 0; y0 < m.height; ++y0)
      for (int x0 = 0; x0 < m.width; ++x0) {
        const std::size_t i0 = static_cast<std::size_t>(y0) * m.width + x0;
        if (!m.pixels[i0] || seen[i0]) continue;
        ++n;
        std::queue<std::pair<int, int>> q;
        q.push({y0, x0});
        seen[i0] = true;
        while (!q.empty()) {
          auto [y, x] = q.front();
          q.pop();
          const int dy[] = {1, -1, 0, 0}, dx[] = {0, 0, 1, -1};
          for (int k = 0; k < 4; ++k) {
            const int ny = y + dy[k], nx = x + dx[k];
            if (ny < 0 || nx < 0 || ny >= m.height || nx >= m.width) continue;
            const std::size_t j = static_cast<std::size_t>(ny) * m.width + nx;
            if (m.pixels[j] && !seen[j]) {
              seen[j] = true;
              q.push({ny, nx});
            }
          }
        }
      }
    return n;
  }

  TEST_CASE("eight 48x64 samples with bounded lesion area") {
    auto data = synth_dataset(8, {48, 64}, 1);
    REQUIRE(data.size() == 8);
    for (const auto& s : data) {
      CHECK(s.image.height == 48);
      CHECK(s.image.width == 64);
      CHECK(s.image.channels == 3);
      CHECK(is_binary(s.mask));
      const double frac = double(positives(s.mask)) / (48 * 64);
      CHECK(frac >= 0.05);
      CHECK(frac <= 0.60);
      CHECK(components(s.mask) == 1);
    }
  }

  TEST_CASE("area bounds hold across many seeds") {
    for (std::uint64_t seed = 1; seed <= 25; ++seed)
      for (const auto& s : synth_dataset(8, {48, 64}, seed)) {
        const double frac = double(positives(s.mask)) / (48 * 64);
        CHECK(frac >= 0.05);
        CHECK(frac <= 0.60);
      }
  }

  TEST_CASE("deterministic per seed") {
    auto a = synth_dataset(4, {48, 64}, 77), b = synth_dataset(4, {48, 64}, 77), c = synth_dataset(4, {48, 64}, 78);
    for (int i = 0; i < 4; ++i) {
      CHECK(a[i].image == b[i].image);
      CHECK(a[i].mask == b[i].mask);
    }
    CHECK_FALSE(a[0].image == c[0].image);
  }

  TEST_CASE("tensor conversion") {
    auto data = synth_dataset(2, {32, 32}, 3);
    std::vector<const Sample*> batch{&data[0], &data[1]};
    Tensor x = images_to_tensor(batch), y = masks_to_tensor(batch);
    CHECK(x.shape() == Shape{2, 3, 32, 32});
    CHECK(y.shape() == Shape{2, 1, 32, 32});
    CHECK(x.at(1, 2, 5, 7) == Scalar(data[1].image.at(5, 7, 2)) / Scalar(255));
    CHECK(y.at(0, 0, 16, 16) == Scalar(data[0].mask.at(16, 16)));
  }
}
