#include "cascn/config.hpp"

#include <charconv>
#include <cmath>
#include <fstream>
#include <sstream>

namespace cascn {
namespace {

[[noreturn]] void bad(std::string_view key, std::string_view value, std::string_view why) {
  throw ConfigError("config key '" + std::string(key) + "': bad value '" + std::string(value) + "' (" +
                    std::string(why) + ")");
}

double to_double(std::string_view key, std::string_view v) {
  double out = 0;
  auto [p, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
  if (ec != std::errc() || p != v.data() + v.size()) bad(key, v, "expected a number");
  return out;
}

std::int64_t to_int(std::string_view key, std::string_view v) {
  std::int64_t out = 0;
  auto [p, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
  if (ec != std::errc() || p != v.data() + v.size()) bad(key, v, "expected an integer");
  return out;
}

bool to_bool(std::string_view key, std::string_view v) {
  if (v == "true" || v == "1") return true;
  if (v == "false" || v == "0") return false;
  bad(key, v, "expected true or false");
}

std::string num(double v) {
  char buf[64];
  auto [p, ec] = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, p);
}

}  // namespace

Scale parse_scale(std::string_view name) {
  if (name == "paper") return Scale::Paper;
  if (name == "desk") return Scale::Desk;
  throw ConfigError("scale must be paper or desk, got '" + std::string(name) + "'");
}

RunConfig RunConfig::defaults(Scale scale) {
  RunConfig c;
  if (scale == Scale::Desk) {
    c.model = ModelConfig::desk();
    c.batch_size = 2;
    c.epochs = 20;
  }
  return c;
}

void RunConfig::set(std::string_view key, std::string_view v) {
  if (apply_model_entry(model, key, v)) {
    if (key == "seed") split.seed = model.seed;
    return;
  }
  if (key == "optimizer") {
    try {
      optimizer.kind = parse_optimizer(v);
    } catch (const ConfigError&) {
      bad(key, v, "expected adam or sgd_nesterov");
    }
  } else if (key == "lr") {
    optimizer.lr = to_double(key, v);
  } else if (key == "beta1") {
    optimizer.beta1 = to_double(key, v);
  } else if (key == "beta2") {
    optimizer.beta2 = to_double(key, v);
  } else if (key == "adam_eps") {
    optimizer.eps = to_double(key, v);
  } else if (key == "momentum") {
    optimizer.momentum = to_double(key, v);
  } else if (key == "epochs") {
    epochs = static_cast<int>(to_int(key, v));
  } else if (key == "batch_size") {
    batch_size = static_cast<int>(to_int(key, v));
  } else if (key == "max_steps") {
    max_steps = to_int(key, v);
  } else if (key == "augment") {
    const double deg = augment.max_degrees, prob = augment.probability;
    try {
      augment = AugmentPolicy::parse(v);
    } catch (const ConfigError& e) {
      bad(key, v, e.what());
    }
    augment.max_degrees = deg;
    augment.probability = prob;
  } else if (key == "rotate_degrees") {
    augment.max_degrees = to_double(key, v);
  } else if (key == "augment_probability") {
    augment.probability = to_double(key, v);
  } else if (key == "split") {
    double r[3];
    std::size_t start = 0;
    for (int i = 0; i < 3; ++i) {
      const std::size_t end = i < 2 ? v.find(',', start) : v.size();
      if (end == std::string_view::npos) bad(key, v, "expected train,val,test ratios");
      r[i] = to_double(key, v.substr(start, end - start));
      start = end + 1;
    }
    split.train = r[0], split.val = r[1], split.test = r[2];
  } else if (key == "deterministic") {
    deterministic = to_bool(key, v);
  } else {
    throw ConfigError("unknown config key '" + std::string(key) + "'");
  }
}

RunConfig RunConfig::parse(std::string_view text, const RunConfig& base) {
  RunConfig c = base;
  bool any = false;
  for (const auto& [k, v] : parse_kv_lines(text)) {
    if (k == "scale") {
      if (any) throw ConfigError("config key 'scale' must come before every other key");
      c = defaults(parse_scale(v));
    } else {
      c.set(k, v);
    }
    any = true;
  }
  c.validate();
  return c;
}

RunConfig RunConfig::load(const std::string& path, const RunConfig& base) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ConfigError("cannot read config file " + path);
  std::stringstream ss;
  ss << in.rdbuf();
  return parse(ss.str(), base);
}

std::vector<std::pair<std::string, std::string>> RunConfig::entries() const {
  auto out = model_config_entries(model);
  out.emplace_back("optimizer", std::string(optimizer_name(optimizer.kind)));
  out.emplace_back("lr", num(optimizer.lr));
  out.emplace_back("beta1", num(optimizer.beta1));
  out.emplace_back("beta2", num(optimizer.beta2));
  out.emplace_back("adam_eps", num(optimizer.eps));
  out.emplace_back("momentum", num(optimizer.momentum));
  out.emplace_back("epochs", std::to_string(epochs));
  out.emplace_back("batch_size", std::to_string(batch_size));
  out.emplace_back("max_steps", std::to_string(max_steps));
  out.emplace_back("augment", augment.ops_string());
  out.emplace_back("rotate_degrees", num(augment.max_degrees));
  out.emplace_back("augment_probability", num(augment.probability));
  out.emplace_back("split", num(split.train) + "," + num(split.val) + "," + num(split.test));
  out.emplace_back("deterministic", deterministic ? "true" : "false");
  return out;
}

std::string RunConfig::serialize() const {
  std::string s;
  for (const auto& [k, v] : entries()) s += k + "=" + v + "\n";
  return s;
}

void RunConfig::validate() const {
  model.validate();
  if (!(optimizer.lr > 0) || !std::isfinite(optimizer.lr)) throw ConfigError("config key 'lr' must be positive");
  if (!(optimizer.beta1 >= 0 && optimizer.beta1 < 1)) throw ConfigError("config key 'beta1' must lie in [0, 1)");
  if (!(optimizer.beta2 >= 0 && optimizer.beta2 < 1)) throw ConfigError("config key 'beta2' must lie in [0, 1)");
  if (!(optimizer.eps > 0)) throw ConfigError("config key 'adam_eps' must be positive");
  if (!(optimizer.momentum >= 0 && optimizer.momentum < 1))
    throw ConfigError("config key 'momentum' must lie in [0, 1)");
  if (epochs < 0) throw ConfigError("config key 'epochs' must be >= 0");
  if (batch_size < 1) throw ConfigError("config key 'batch_size' must be >= 1");
  if (max_steps < 0) throw ConfigError("config key 'max_steps' must be >= 0");
  if (!(augment.max_degrees >= 0 && augment.max_degrees <= 180))
    throw ConfigError("config key 'rotate_degrees' must lie in [0, 180]");
  if (!(augment.probability >= 0 && augment.probability <= 1))
    throw ConfigError("config key 'augment_probability' must lie in [0, 1]");
  for (double r : {split.train, split.val, split.test})
    if (!(r >= 0 && r <= 1)) throw ConfigError("config key 'split': ratios must lie in [0, 1]");
  if (std::abs(split.train + split.val + split.test - 1.0) > 1e-6)
    throw ConfigError("config key 'split': ratios must sum to 1");
}

TrainOptions RunConfig::train_options(const std::string& out_dir) const {
  TrainOptions t;
  t.epochs = epochs;
  t.batch_size = batch_size;
  t.max_steps = max_steps;
  t.augment = augment;
  t.seed = model.seed;
  t.out_dir = out_dir;
  return t;
}

}  // namespace cascn
