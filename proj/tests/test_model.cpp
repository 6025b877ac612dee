#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <map>
#include <random>

#include "cascn/loss_metrics.hpp"
#include "cascn/model.hpp"
#include "doctest.h"
#include "oracles.hpp"

using namespace cascn;
namespace fs = std::filesystem;

namespace {

const Context kEval{nullptr, Mode::Eval};

ModelConfig desk_at(int h, int w) {
  ModelConfig c = ModelConfig::desk();
  c.input = {h, w};
  return c;
}

Tensor images(int n, int h, int w, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  return oracle::random({n, 3, h, w}, rng, 0, 1);
}

fs::path temp_path(const std::string& name) {
  fs::path dir = fs::temp_directory_path() / "cascn_test_model";
  fs::create_directories(dir);
  return dir / name;
}

std::vector<std::uint8_t> read_bytes(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), {}};
}

void write_bytes(const fs::path& p, const std::vector<std::uint8_t>& b) {
  std::ofstream out(p, std::ios::binary);
  out.write(reinterpret_cast<const char*>(b.data()), static_cast<std::streamsize>(b.size()));
}

}  // namespace

TEST_SUITE("shapes") {
  // Train mode: batch statistics. A fresh model's eval-mode norms (mean 0,
  // var 1) normalize nothing, and its logits saturate the sigmoid to exactly 1.0.
  TEST_CASE("desk model at 96x128, 192x256 and 384x512") {
    for (auto [h, w] : {std::pair{96, 128}, {192, 256}, {384, 512}}) {
      CascnModel m(desk_at(h, w));
      Tensor y = m.forward(Context{nullptr, Mode::Train}, Var(images(1, h, w, 1))).value();
      CHECK(y.shape() == Shape{1, 1, h, w});
      for (Scalar v : y.vec()) {
        CHECK(v > 0);
        CHECK(v < 1);
      }
    }
  }

  TEST_CASE("full-size model at 192x256: taps, bottom and skip contract") {
    CascnModel m(ModelConfig::paper());
    auto t = m.trace(kEval, Var(images(1, 192, 256, 2)));
    const int strides[] = {2, 4, 8, 16};
    const int channels[] = {64, 256, 512, 1024};
    for (int i = 0; i < 4; ++i) {
      CHECK(t.taps[i].shape() == Shape{1, channels[i], 192 / strides[i], 256 / strides[i]});
    }
    CHECK(t.bottom.dim(2) == 6);
    CHECK(t.bottom.dim(3) == 8);
    for (int s = 0; s < 4; ++s) {
      CHECK(t.skips[s].dim(2) == t.upsampled[s].dim(2));
      CHECK(t.skips[s].dim(3) == t.upsampled[s].dim(3));
    }
    CHECK(t.upsampled[4].dim(2) == 192);
    CHECK(t.probabilities.shape() == Shape{1, 1, 192, 256});
  }

  TEST_CASE("full-size model at 96x128") {
    ModelConfig c = ModelConfig::paper();
    c.input = {96, 128};
    CascnModel m(c);
    CHECK(m.predict(images(1, 96, 128, 3)).shape() == Shape{1, 1, 96, 128});
  }

  TEST_CASE("input size contract") {
    CHECK_THROWS_AS(CascnModel(desk_at(100, 100)), ConfigError);
    try {
      desk_at(48, 64).validate();
      FAIL("expected ConfigError");
    } catch (const ConfigError& e) {
      CHECK(std::string(e.what()).find("multiples of 32") != std::string::npos);
    }
    CascnModel m(ModelConfig::desk());
    CHECK_THROWS_AS(m.predict(images(1, 96, 96, 4)), DimensionError);
    CHECK_THROWS_AS(m.predict(Tensor({1, 1, 64, 64})), DimensionError);
  }
}

TEST_SUITE("construction") {
  TEST_CASE("same seed gives bitwise identical parameters") {
    CascnModel a(ModelConfig::desk()), b(ModelConfig::desk());
    auto pa = a.parameters(), pb = b.parameters();
    REQUIRE(pa.size() == pb.size());
    for (std::size_t i = 0; i < pa.size(); ++i) CHECK(bitwise_equal(pa[i]->value, pb[i]->value));
    ModelConfig other = ModelConfig::desk();
    other.seed = 2;
    CascnModel c(other);
    CHECK_FALSE(bitwise_equal(pa.front()->value, c.parameters().front()->value));
  }

  TEST_CASE("bridge without ASPP is the identity") {
    CascnModel m(variant(ModelConfig::desk(), "seConv"));
    auto t = m.trace(kEval, Var(images(2, 64, 64, 5)));
    CHECK(bitwise_equal(t.bridge.value(), t.bottom.value()));
  }

  TEST_CASE("without MECA the skips are the raw encoder maps") {
    CascnModel m(variant(ModelConfig::desk(), "seConv+ASPP"));
    auto t = m.trace(kEval, Var(images(1, 64, 64, 6)));
    for (int s = 0; s < 4; ++s) CHECK(bitwise_equal(t.skips[s].value(), t.taps[3 - s].value()));
  }

  TEST_CASE("variant flags and labels") {
    const ModelConfig base = ModelConfig::desk();
    auto st = variant(base, "stConv");
    CHECK(st.conv_mode == ConvMode::Standard);
    CHECK_FALSE(st.use_aspp);
    CHECK_FALSE(st.use_meca);
    auto mec = variant(base, "seConv+MECA");
    CHECK(mec.conv_mode == ConvMode::Separable);
    CHECK_FALSE(mec.use_aspp);
    CHECK(mec.use_meca);
    auto full = variant(base, "full");
    CHECK(full.conv_mode == ConvMode::Separable);
    CHECK(full.use_aspp);
    CHECK(full.use_meca);
    CHECK(variant_label("stConv") == "DensNet121 + stConv");
    CHECK(variant_label("full") == "CASCN (ours)");
    CHECK_THROWS_AS(variant(base, "bogus"), ConfigError);
  }

  TEST_CASE("parameter counts follow the ablation structure") {
    std::map<std::string, std::size_t> n;
    for (auto name : variant_names()) n[std::string(name)] = CascnModel(variant(ModelConfig::desk(), name)).parameter_count();
    CHECK(n["full"] > n["seConv+ASPP"]);
    CHECK(n["full"] > n["seConv+MECA"]);
    CHECK(n["seConv+ASPP"] > n["seConv"]);
    CHECK(n["seConv+MECA"] > n["seConv"]);
    CHECK(n["stConv"] > n["seConv"]);
  }
}

TEST_SUITE("forward") {
  TEST_CASE("eval forward is pure") {
    CascnModel m(ModelConfig::desk());
    Tensor x = images(2, 64, 64, 7);
    CHECK(bitwise_equal(m.predict(x), m.predict(x)));
  }

  TEST_CASE("forward and loss give finite gradients, nonzero in every layer") {
    // Batch 2: with a single sample the 1x1 image-pool norm sees one value per
    // channel, outputs beta exactly and passes no gradient upstream.
    for (int n : {1, 2}) {
      CAPTURE(n);
      CascnModel m(ModelConfig::desk());
      Tensor x = images(n, 64, 64, 8);
      Tensor target(Shape{n, 1, 64, 64});
      for (int b = 0; b < n; ++b)
        for (int i = 16; i < 48; ++i)
          for (int j = 20 + b; j < 40; ++j) target.at(b, 0, i, j) = 1;
      Tape tape;
      Context ctx{&tape, Mode::Train};
      Var loss = seg_loss(m.forward(ctx, Var(x)), target);
      tape.backward(loss);
      std::map<std::string, bool> layer_nonzero;
      for (Parameter* p : m.parameters()) {
        Var v = tape.watch(*p);
        const Tensor* g = tape.grad(v);
        REQUIRE(g != nullptr);
        CHECK(g->all_finite());
        const std::string layer = p->name.substr(0, p->name.rfind('.'));
        bool& nz = layer_nonzero[layer];
        for (Scalar s : g->vec()) nz = nz || s != 0;
      }
      for (const auto& [layer, nz] : layer_nonzero) {
        CAPTURE(layer);
        if (n == 1 && layer.find("image_pool") != std::string::npos) {
          CHECK_FALSE(nz);
        } else {
          CHECK(nz);
        }
      }
    }
  }
}

TEST_SUITE("flops") {
  TEST_CASE("cost formulas") {
    LayerFlops f = separable_cost("x", 32, 32, 3, 64, 128);
    CHECK(f.standard_macs == 75497472u);
    CHECK(f.separable_macs == 8978432u);
    CHECK(f.ratio_num == 1152u);
    CHECK(f.ratio_den == 137u);
    CHECK(f.ratio() == doctest::Approx(8.409).epsilon(1e-4));

    LayerFlops nine = separable_cost("x", 4, 4, 3, 2, 9);
    CHECK(nine.ratio_num * 2 == nine.ratio_den * 9);  // 81/18 = 4.5
    CHECK(nine.ratio() == 4.5);

    LayerFlops one = separable_cost("x", 4, 4, 1, 2, 7);
    CHECK(one.ratio_num == 7u);
    CHECK(one.ratio_den == 8u);
    CHECK(one.ratio() < 1);
  }

  TEST_CASE("every swappable layer reports the exact ratio") {
    for (ModelConfig cfg : {ModelConfig::desk(), ModelConfig::paper(), variant(ModelConfig::paper(), "stConv")}) {
      FlopReport r = CascnModel(cfg).flops();
      std::uint64_t total = 0;
      int swappable = 0;
      for (const auto& l : r.layers) {
        total += l.macs;
        if (!l.conv2d) continue;
        const std::uint64_t hw = std::uint64_t(l.height) * l.width, k2 = std::uint64_t(l.kernel) * l.kernel;
        CHECK(l.standard_macs == hw * k2 * l.in_channels * l.out_channels);
        CHECK(l.separable_macs == hw * l.in_channels * (k2 + l.out_channels));
        CHECK(l.ratio_num == k2 * l.out_channels);
        CHECK(l.ratio_den == k2 + l.out_channels);
        // standard / separable == ratio, cross-multiplied in integers
        CHECK(l.standard_macs * l.ratio_den == l.separable_macs * l.ratio_num);
        if (!l.swappable) continue;
        ++swappable;
        CHECK(l.macs == (cfg.conv_mode == ConvMode::Separable ? l.separable_macs : l.standard_macs));
      }
      CHECK(swappable == 11);  // encoder tail plus two blocks in each of five decoder stages
      CHECK(total == r.total_macs);
    }
  }
}

TEST_SUITE("checkpoint") {
  TEST_CASE("round trip is bitwise") {
    CascnModel m(ModelConfig::desk());
    // Perturb buffers so the round trip covers non-default running stats.
    Tape tape;
    m.forward(Context{&tape, Mode::Train}, Var(images(2, 64, 64, 9)));
    const fs::path p = temp_path("rt.ckpt");
    save_model(m, p.string());
    auto loaded = load_model(p.string());
    Tensor x = images(2, 64, 64, 10);
    CHECK(bitwise_equal(m.predict(x), loaded->predict(x)));
    auto pa = m.parameters(), pb = loaded->parameters();
    for (std::size_t i = 0; i < pa.size(); ++i) CHECK(bitwise_equal(pa[i]->value, pb[i]->value));
    CHECK(loaded->config().seed == m.config().seed);
  }

  TEST_CASE("header layout") {
    Checkpoint c;
    c.config_text = "a=1\n";
    c.tensors.push_back({"t", Tensor(Shape{2}, {1.5, -2})});
    auto bytes = encode_checkpoint(c);
    CHECK(std::string(bytes.begin(), bytes.begin() + 4) == "CSCN");
    CHECK(bytes[4] == 1);
    CHECK(bytes[5] == 0);
    Checkpoint d = decode_checkpoint(bytes);
    CHECK(d.config_text == c.config_text);
    CHECK(bitwise_equal(d.tensors[0].second, c.tensors[0].second));
  }

  TEST_CASE("corruption is a load error") {
    CascnModel m(ModelConfig::desk());
    const fs::path p = temp_path("bad.ckpt");
    save_model(m, p.string());
    auto bytes = read_bytes(p);

    auto truncated = bytes;
    truncated.resize(bytes.size() / 2);
    write_bytes(p, truncated);
    try {
      load_model(p.string());
      FAIL("expected LoadError");
    } catch (const LoadError& e) {
      CHECK(std::string(e.what()).find("checksum") != std::string::npos);
    }

    auto flipped = bytes;
    flipped[bytes.size() / 3] ^= 0x10;
    CHECK_THROWS_AS(decode_checkpoint(flipped), LoadError);

    auto version = bytes;
    version[4] = 2;
    CHECK_THROWS_AS(decode_checkpoint(version), LoadError);

    CHECK_THROWS_AS(decode_checkpoint({'n', 'o'}), LoadError);
    CHECK_THROWS_AS(load_model((fs::temp_directory_path() / "cascn_no_such.ckpt").string()), Error);
  }

  TEST_CASE("declared input size mismatch is a config error") {
    CascnModel m(ModelConfig::desk());
    const fs::path p = temp_path("size.ckpt");
    save_model(m, p.string());
    InputSize other{96, 128};
    CHECK_THROWS_AS(load_model(p.string(), &other), ConfigError);
    InputSize same{64, 64};
    CHECK(load_model(p.string(), &same) != nullptr);
  }
}
