#include "cascn/model.hpp"

#include <algorithm>
#include <charconv>
#include <sstream>

namespace cascn {

namespace {

std::string join_ints(const auto& xs) {
  std::string s;
  for (std::size_t i = 0; i < xs.size(); ++i) {
    if (i) s += ",";
    s += std::to_string(xs[i]);
  }
  return s;
}

std::string fmt_double(double v) {
  char buf[64];
  auto r = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, r.ptr);
}

[[noreturn]] void bad_value(std::string_view key, std::string_view value, const std::string& why) {
  throw ConfigError("config key '" + std::string(key) + "': invalid value '" + std::string(value) + "' (" + why + ")");
}

int parse_int(std::string_view key, std::string_view v) {
  int out = 0;
  auto r = std::from_chars(v.data(), v.data() + v.size(), out);
  if (r.ec != std::errc() || r.ptr != v.data() + v.size()) bad_value(key, v, "expected integer");
  return out;
}

std::uint64_t parse_u64(std::string_view key, std::string_view v) {
  std::uint64_t out = 0;
  auto r = std::from_chars(v.data(), v.data() + v.size(), out);
  if (r.ec != std::errc() || r.ptr != v.data() + v.size()) bad_value(key, v, "expected unsigned integer");
  return out;
}

double parse_double(std::string_view key, std::string_view v) {
  double out = 0;
  auto r = std::from_chars(v.data(), v.data() + v.size(), out);
  if (r.ec != std::errc() || r.ptr != v.data() + v.size()) bad_value(key, v, "expected number");
  return out;
}

bool parse_bool(std::string_view key, std::string_view v) {
  if (v == "true" || v == "1" || v == "yes" || v == "on") return true;
  if (v == "false" || v == "0" || v == "no" || v == "off") return false;
  bad_value(key, v, "expected true/false");
}

std::vector<int> parse_int_list(std::string_view key, std::string_view v) {
  std::vector<int> out;
  if (v.empty()) return out;
  std::size_t start = 0;
  while (true) {
    std::size_t comma = v.find(',', start);
    out.push_back(parse_int(key, v.substr(start, comma == std::string_view::npos ? v.npos : comma - start)));
    if (comma == std::string_view::npos) break;
    start = comma + 1;
  }
  return out;
}

const std::array<std::string_view, 5> kVariantLabels{"DensNet121 + stConv", "DensNet121 + seConv",
                                                     "DensNet121 + seConv + ASPP", "DensNet121 + seConv + MECA",
                                                     "CASCN (ours)"};

}  // namespace

ModelConfig ModelConfig::paper() { return ModelConfig{}; }

ModelConfig ModelConfig::desk() {
  ModelConfig c;
  c.input = {64, 64};
  c.encoder.stem_channels = 16;
  c.encoder.blocks = {2, 2, 2, 2};
  c.encoder.growth = 8;
  c.encoder.tail_channels = 64;
  c.decoder_widths = {64, 48, 32, 24, 16};
  c.aspp_channels = 32;
  return c;
}

void ModelConfig::validate() const {
  if (input.height < 32 || input.width < 32 || input.height % 32 || input.width % 32) {
    throw ConfigError("config key 'input_size': height and width must be positive multiples of 32, got " +
                      std::to_string(input.height) + "x" + std::to_string(input.width));
  }
  if (encoder.stem_channels < 1) throw ConfigError("config key 'stem_channels' must be >= 1");
  for (int b : encoder.blocks)
    if (b < 0) throw ConfigError("config key 'blocks': layer counts must be >= 0");
  if (encoder.growth < 1) throw ConfigError("config key 'growth' must be >= 1");
  if (encoder.bottleneck_factor < 1) throw ConfigError("config key 'bottleneck' must be >= 1");
  if (!(encoder.compression > 0 && encoder.compression <= 1)) throw ConfigError("config key 'compression' must lie in (0, 1]");
  if (encoder.tail_channels < 1) throw ConfigError("config key 'encoder_tail' must be >= 1");
  for (int w : decoder_widths)
    if (w < 1) throw ConfigError("config key 'decoder_widths': widths must be >= 1");
  if (meca_kernel < 0 || (meca_kernel > 0 && meca_kernel % 2 == 0)) {
    throw ConfigError("config key 'meca_kernel' must be 'adaptive' or an odd positive integer");
  }
  if (use_aspp) {
    AsppSpec s{encoder.tail_channels, aspp_channels, aspp_rates, aspp_1x1, aspp_image_pool};
    try {
      s.validate();
    } catch (const ConfigError& e) {
      throw ConfigError(std::string("config key 'aspp_*': ") + e.what());
    }
  }
}

const std::array<std::string_view, 5>& variant_names() {
  static const std::array<std::string_view, 5> names{"stConv", "seConv", "seConv+ASPP", "seConv+MECA", "full"};
  return names;
}

std::string_view variant_label(std::string_view name) {
  const auto& names = variant_names();
  for (std::size_t i = 0; i < names.size(); ++i)
    if (names[i] == name) return kVariantLabels[i];
  throw ConfigError("unknown variant '" + std::string(name) + "'");
}

ModelConfig variant(const ModelConfig& base, std::string_view name) {
  ModelConfig c = base;
  if (name == "stConv") {
    c.conv_mode = ConvMode::Standard;
    c.use_aspp = false;
    c.use_meca = false;
  } else if (name == "seConv") {
    c.conv_mode = ConvMode::Separable;
    c.use_aspp = false;
    c.use_meca = false;
  } else if (name == "seConv+ASPP") {
    c.conv_mode = ConvMode::Separable;
    c.use_aspp = true;
    c.use_meca = false;
  } else if (name == "seConv+MECA") {
    c.conv_mode = ConvMode::Separable;
    c.use_aspp = false;
    c.use_meca = true;
  } else if (name == "full") {
    c.conv_mode = ConvMode::Separable;
    c.use_aspp = true;
    c.use_meca = true;
  } else {
    throw ConfigError("unknown variant '" + std::string(name) + "'");
  }
  return c;
}

std::vector<std::pair<std::string, std::string>> model_config_entries(const ModelConfig& c) {
  return {
      {"input_size", std::to_string(c.input.height) + "x" + std::to_string(c.input.width)},
      {"conv_mode", c.conv_mode == ConvMode::Separable ? "separable" : "standard"},
      {"use_aspp", c.use_aspp ? "true" : "false"},
      {"use_meca", c.use_meca ? "true" : "false"},
      {"stem_channels", std::to_string(c.encoder.stem_channels)},
      {"blocks", join_ints(c.encoder.blocks)},
      {"growth", std::to_string(c.encoder.growth)},
      {"bottleneck", std::to_string(c.encoder.bottleneck_factor)},
      {"compression", fmt_double(c.encoder.compression)},
      {"encoder_tail", std::to_string(c.encoder.tail_channels)},
      {"decoder_widths", join_ints(c.decoder_widths)},
      {"aspp_channels", std::to_string(c.aspp_channels)},
      {"aspp_rates", join_ints(c.aspp_rates)},
      {"aspp_1x1", c.aspp_1x1 ? "true" : "false"},
      {"aspp_image_pool", c.aspp_image_pool ? "true" : "false"},
      {"meca_kernel", c.meca_kernel == 0 ? "adaptive" : std::to_string(c.meca_kernel)},
      {"seed", std::to_string(c.seed)},
  };
}

bool apply_model_entry(ModelConfig& c, std::string_view key, std::string_view v) {
  if (key == "input_size") {
    auto x = v.find('x');
    if (x == std::string_view::npos) bad_value(key, v, "expected HxW");
    c.input = {parse_int(key, v.substr(0, x)), parse_int(key, v.substr(x + 1))};
  } else if (key == "conv_mode") {
    if (v == "separable") c.conv_mode = ConvMode::Separable;
    else if (v == "standard") c.conv_mode = ConvMode::Standard;
    else bad_value(key, v, "expected separable or standard");
  } else if (key == "use_aspp") {
    c.use_aspp = parse_bool(key, v);
  } else if (key == "use_meca") {
    c.use_meca = parse_bool(key, v);
  } else if (key == "stem_channels") {
    c.encoder.stem_channels = parse_int(key, v);
  } else if (key == "blocks") {
    auto b = parse_int_list(key, v);
    if (b.size() != 4) bad_value(key, v, "expected four dense-block layer counts");
    std::copy(b.begin(), b.end(), c.encoder.blocks.begin());
  } else if (key == "growth") {
    c.encoder.growth = parse_int(key, v);
  } else if (key == "bottleneck") {
    c.encoder.bottleneck_factor = parse_int(key, v);
  } else if (key == "compression") {
    c.encoder.compression = parse_double(key, v);
  } else if (key == "encoder_tail") {
    c.encoder.tail_channels = parse_int(key, v);
  } else if (key == "decoder_widths") {
    auto w = parse_int_list(key, v);
    if (w.size() != 5) bad_value(key, v, "expected five decoder widths");
    std::copy(w.begin(), w.end(), c.decoder_widths.begin());
  } else if (key == "aspp_channels") {
    c.aspp_channels = parse_int(key, v);
  } else if (key == "aspp_rates") {
    c.aspp_rates = parse_int_list(key, v);
  } else if (key == "aspp_1x1") {
    c.aspp_1x1 = parse_bool(key, v);
  } else if (key == "aspp_image_pool") {
    c.aspp_image_pool = parse_bool(key, v);
  } else if (key == "meca_kernel") {
    c.meca_kernel = (v == "adaptive") ? 0 : parse_int(key, v);
  } else if (key == "seed") {
    c.seed = parse_u64(key, v);
  } else {
    return false;
  }
  return true;
}

std::vector<std::pair<std::string, std::string>> parse_kv_lines(std::string_view text) {
  std::vector<std::pair<std::string, std::string>> out;
  std::size_t pos = 0;
  int line_no = 0;
  while (pos <= text.size()) {
    std::size_t nl = text.find('\n', pos);
    std::string_view line = text.substr(pos, nl == std::string_view::npos ? text.npos : nl - pos);
    ++line_no;
    pos = (nl == std::string_view::npos) ? text.size() + 1 : nl + 1;
    if (auto hash = line.find('#'); hash != std::string_view::npos) line = line.substr(0, hash);
    auto trim = [](std::string_view s) {
      const char* ws = " \t\r";
      auto b = s.find_first_not_of(ws);
      if (b == std::string_view::npos) return std::string_view{};
      auto e = s.find_last_not_of(ws);
      return s.substr(b, e - b + 1);
    };
    line = trim(line);
    if (line.empty()) continue;
    auto eq = line.find('=');
    if (eq == std::string_view::npos) {
      throw ConfigError("config line " + std::to_string(line_no) + ": expected key=value, got '" + std::string(line) + "'");
    }
    out.emplace_back(std::string(trim(line.substr(0, eq))), std::string(trim(line.substr(eq + 1))));
  }
  return out;
}

LayerFlops separable_cost(std::string name, int height, int width, int kernel, int in_ch, int out_ch) {
  LayerFlops f;
  f.name = std::move(name);
  f.swappable = true;
  f.height = height;
  f.width = width;
  f.kernel = kernel;
  f.in_channels = in_ch;
  f.out_channels = out_ch;
  const std::uint64_t hw = std::uint64_t(height) * std::uint64_t(width);
  const std::uint64_t k2 = std::uint64_t(kernel) * std::uint64_t(kernel);
  f.standard_macs = hw * k2 * std::uint64_t(in_ch) * std::uint64_t(out_ch);
  f.separable_macs = hw * std::uint64_t(in_ch) * (k2 + std::uint64_t(out_ch));
  f.ratio_num = k2 * std::uint64_t(out_ch);
  f.ratio_den = k2 + std::uint64_t(out_ch);
  return f;
}

CascnModel::CascnModel(const ModelConfig& cfg) : cfg_(cfg) {
  cfg_.validate();
  std::mt19937_64 rng(cfg_.seed);
  const auto& enc = cfg_.encoder;
  stem_conv_ = Conv2d("encoder.stem.conv", 3, enc.stem_channels, 7, {2, 3, 1, 1}, false, rng);
  stem_norm_ = BatchNorm2d("encoder.stem.norm", enc.stem_channels);

  std::array<int, 4> tap_channels{};
  tap_channels[0] = enc.stem_channels;
  int c = enc.stem_channels;
  for (int b = 0; b < 4; ++b) {
    DenseBlockSpec spec{enc.blocks[static_cast<std::size_t>(b)], enc.growth, enc.bottleneck_factor};
    blocks_[static_cast<std::size_t>(b)] = DenseBlock("encoder.block" + std::to_string(b + 1), c, spec, rng);
    c = blocks_[static_cast<std::size_t>(b)].out_channels();
    if (b < 3) {
      tap_channels[static_cast<std::size_t>(b + 1)] = c;
      transitions_[static_cast<std::size_t>(b)] =
          Transition("encoder.transition" + std::to_string(b + 1), c, enc.compression, rng);
      c = transitions_[static_cast<std::size_t>(b)].out_channels();
    }
  }
  final_norm_ = BatchNorm2d("encoder.final_norm", c);
  tail_ = ConvBlock("encoder.tail", cfg_.conv_mode, c, enc.tail_channels, rng);
  c = enc.tail_channels;
  if (cfg_.use_aspp) {
    AsppSpec spec{c, cfg_.aspp_channels, cfg_.aspp_rates, cfg_.aspp_1x1, cfg_.aspp_image_pool};
    aspp_ = std::make_unique<Aspp>("bridge.aspp", spec, rng);
    c = cfg_.aspp_channels;
  }
  for (std::size_t s = 0; s < 5; ++s) {
    auto& st = decoder_[s];
    const std::string name = "decoder.stage" + std::to_string(s + 1);
    const int width = cfg_.decoder_widths[s];
    st.up = TransposedConv2x(name + ".up", c, width, rng);
    st.has_skip = s < 4;
    int in = width;
    if (st.has_skip) {
      st.skip_channels = tap_channels[3 - s];
      if (cfg_.use_meca) st.meca = Meca(name + ".meca", st.skip_channels, cfg_.meca_kernel, rng);
      in += st.skip_channels;
    }
    st.first = ConvBlock(name + ".block1", cfg_.conv_mode, in, width, rng);
    st.second = ConvBlock(name + ".block2", cfg_.conv_mode, width, width, rng);
    c = width;
  }
  head_ = Conv2d("head.conv", c, 1, 1, {}, true, rng);
}

CascnModel::Trace CascnModel::trace(const Context& ctx, const Var& x) {
  auto d = dims4(x.value(), "cascn forward");
  if (d.c != 3) throw DimensionError("cascn forward: channel axis 1 must be 3, got " + std::to_string(d.c));
  if (d.h != cfg_.input.height) {
    throw DimensionError("cascn forward: height axis 2 is " + std::to_string(d.h) + ", model expects " +
                         std::to_string(cfg_.input.height));
  }
  if (d.w != cfg_.input.width) {
    throw DimensionError("cascn forward: width axis 3 is " + std::to_string(d.w) + ", model expects " +
                         std::to_string(cfg_.input.width));
  }
  Trace t;
  Var h = checked(ctx, ad::relu(stem_norm_.forward(ctx, stem_conv_.forward(ctx, x))), "encoder.stem");
  t.taps[0] = h;
  h = ad::maxpool2d(h, 3, 2, 1);
  for (std::size_t b = 0; b < 4; ++b) {
    h = blocks_[b].forward(ctx, h);
    if (b < 3) {
      t.taps[b + 1] = h;
      h = transitions_[b].forward(ctx, h);
    }
  }
  h = checked(ctx, ad::relu(final_norm_.forward(ctx, h)), "encoder.final_norm");
  h = tail_.forward(ctx, h);
  t.bottom = h;
  if (aspp_) h = aspp_->forward(ctx, h);
  t.bridge = h;
  for (std::size_t s = 0; s < 5; ++s) {
    auto& st = decoder_[s];
    Var up = checked(ctx, st.up.forward(ctx, h), "decoder.stage" + std::to_string(s + 1) + ".up");
    t.upsampled[s] = up;
    if (st.has_skip) {
      Var skip = t.taps[3 - s];
      if (cfg_.use_meca) skip = st.meca.forward(ctx, skip);
      t.skips[s] = skip;
      if (skip.dim(2) != up.dim(2) || skip.dim(3) != up.dim(3)) {
        throw DimensionError("decoder stage " + std::to_string(s + 1) + ": skip " + skip.shape().str() +
                             " and upsampled " + up.shape().str() + " differ spatially");
      }
      up = ad::concat_channels({up, skip});
    }
    h = st.second.forward(ctx, st.first.forward(ctx, up));
  }
  t.probabilities = checked(ctx, ad::sigmoid(head_.forward(ctx, h)), "head");
  return t;
}

Var CascnModel::forward(const Context& ctx, const Var& x) { return trace(ctx, x).probabilities; }

Tensor CascnModel::predict(const Tensor& images) {
  Context ctx{nullptr, Mode::Eval};
  return forward(ctx, Var::view(images)).value();
}

void CascnModel::visit(const ParamVisitor& v) {
  stem_conv_.visit(v);
  stem_norm_.visit(v);
  for (std::size_t b = 0; b < 4; ++b) {
    blocks_[b].visit(v);
    if (b < 3) transitions_[b].visit(v);
  }
  final_norm_.visit(v);
  tail_.visit(v);
  if (aspp_) aspp_->visit(v);
  for (auto& st : decoder_) {
    st.up.visit(v);
    if (st.has_skip && cfg_.use_meca) st.meca.visit(v);
    st.first.visit(v);
    st.second.visit(v);
  }
  head_.visit(v);
}

std::vector<Parameter*> CascnModel::parameters() {
  std::vector<Parameter*> out;
  visit(ParamVisitor{[&](Parameter& p) { out.push_back(&p); }, nullptr});
  return out;
}

std::vector<std::pair<std::string, Tensor*>> CascnModel::buffers() {
  std::vector<std::pair<std::string, Tensor*>> out;
  visit(ParamVisitor{[](Parameter&) {}, [&](const std::string& n, Tensor& t) { out.emplace_back(n, &t); }});
  return out;
}

std::size_t CascnModel::parameter_count() {
  std::size_t n = 0;
  for (Parameter* p : parameters()) n += p->value.numel();
  return n;
}

FlopReport CascnModel::flops() const {
  FlopReport r;
  auto add_conv = [&](std::string name, int h, int w, int k, int cin, int cout, int groups = 1) {
    // Both hypothetical costs are reported even though this layer is never swapped.
    LayerFlops f = separable_cost(std::move(name), h, w, k, cin, cout);
    f.swappable = false;
    f.macs = std::uint64_t(h) * std::uint64_t(w) * std::uint64_t(k) * std::uint64_t(k) *
             std::uint64_t(cin / groups) * std::uint64_t(cout);
    r.layers.push_back(f);
  };
  auto add_block = [&](std::string name, int h, int w, int cin, int cout) {
    LayerFlops f = separable_cost(std::move(name), h, w, 3, cin, cout);
    f.macs = cfg_.conv_mode == ConvMode::Separable ? f.separable_macs : f.standard_macs;
    r.swappable_standard_macs += f.standard_macs;
    r.swappable_separable_macs += f.separable_macs;
    r.layers.push_back(f);
  };

  const int H = cfg_.input.height, W = cfg_.input.width;
  const auto& enc = cfg_.encoder;
  add_conv("encoder.stem.conv", H / 2, W / 2, 7, 3, enc.stem_channels);
  int c = enc.stem_channels;
  for (int b = 0; b < 4; ++b) {
    const int div = 4 << b;
    const int h = H / div, w = W / div;
    for (int l = 0; l < enc.blocks[static_cast<std::size_t>(b)]; ++l) {
      std::string n = "encoder.block" + std::to_string(b + 1) + ".layer" + std::to_string(l);
      const int width = enc.bottleneck_factor * enc.growth;
      add_conv(n + ".conv1", h, w, 1, c, width);
      add_conv(n + ".conv2", h, w, 3, width, enc.growth);
      c += enc.growth;
    }
    if (b < 3) {
      int out = transition_channels(c, enc.compression);
      add_conv("encoder.transition" + std::to_string(b + 1) + ".conv", h, w, 1, c, out);
      c = out;
    }
  }
  const int hb = H / 32, wb = W / 32;
  add_block("encoder.tail", hb, wb, c, enc.tail_channels);
  c = enc.tail_channels;
  if (cfg_.use_aspp) {
    const int a = cfg_.aspp_channels;
    if (cfg_.aspp_1x1) add_conv("bridge.aspp.branch1x1.conv", hb, wb, 1, c, a);
    for (int rate : cfg_.aspp_rates) add_conv("bridge.aspp.rate" + std::to_string(rate) + ".conv", hb, wb, 3, c, a);
    if (cfg_.aspp_image_pool) add_conv("bridge.aspp.image_pool.conv", 1, 1, 1, c, a);
    add_conv("bridge.aspp.projection.conv", hb, wb, 1, AsppSpec{c, a, cfg_.aspp_rates, cfg_.aspp_1x1, cfg_.aspp_image_pool}.branch_count() * a, a);
    c = a;
  }
  for (std::size_t s = 0; s < 5; ++s) {
    const auto& st = decoder_[s];
    const int div = 16 >> s;
    const int h = H / div, w = W / div;
    const int width = cfg_.decoder_widths[s];
    std::string n = "decoder.stage" + std::to_string(s + 1);
    LayerFlops up = separable_cost(n + ".up", h / 2, w / 2, 2, c, width);
    up.swappable = false;
    up.macs = std::uint64_t(h / 2) * std::uint64_t(w / 2) * 4u * std::uint64_t(c) * std::uint64_t(width);
    r.layers.push_back(up);
    int in = width;
    if (st.has_skip) {
      if (cfg_.use_meca) {
        LayerFlops m;
        m.name = n + ".meca";
        m.conv2d = false;
        m.kernel = st.meca.kernel();
        m.in_channels = m.out_channels = st.skip_channels;
        m.height = m.width = 1;
        m.macs = 2u * std::uint64_t(st.skip_channels) * std::uint64_t(m.kernel);
        r.layers.push_back(m);
      }
      in += st.skip_channels;
    }
    add_block(n + ".block1", h, w, in, width);
    add_block(n + ".block2", h, w, width, width);
    c = width;
  }
  add_conv("head.conv", H, W, 1, c, 1);
  for (const auto& f : r.layers) r.total_macs += f.macs;
  return r;
}

}  // namespace cascn
