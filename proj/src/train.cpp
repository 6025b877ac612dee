#include "cascn/train.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <unordered_map>

namespace cascn {
namespace {

std::string fmt4(double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.4f", v);
  return buf;
}

std::string fmt17(double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

std::vector<const Sample*> pointers(const std::vector<Sample>& data, std::size_t begin, std::size_t end) {
  std::vector<const Sample*> out;
  for (std::size_t i = begin; i < end; ++i) out.push_back(&data[i]);
  return out;
}

}  // namespace

void OptimizerConfig::validate() const {
  if (!(lr >= 0) || !std::isfinite(lr)) throw ConfigError("lr must be non-negative");
  if (!(beta1 >= 0 && beta1 < 1)) throw ConfigError("beta1 must lie in [0, 1)");
  if (!(beta2 >= 0 && beta2 < 1)) throw ConfigError("beta2 must lie in [0, 1)");
  if (!(eps > 0)) throw ConfigError("adam eps must be positive");
  if (!(momentum >= 0 && momentum < 1)) throw ConfigError("momentum must lie in [0, 1)");
}

std::string_view optimizer_name(OptimizerKind kind) {
  return kind == OptimizerKind::Adam ? "adam" : "sgd_nesterov";
}

OptimizerKind parse_optimizer(std::string_view name) {
  if (name == "adam") return OptimizerKind::Adam;
  if (name == "sgd_nesterov") return OptimizerKind::SgdNesterov;
  throw ConfigError("optimizer must be adam or sgd_nesterov, got '" + std::string(name) + "'");
}

void adam_step(std::span<Scalar> w, std::span<const Scalar> g, std::span<Scalar> m, std::span<Scalar> v,
               std::int64_t t, const OptimizerConfig& cfg) {
  if (g.size() != w.size() || m.size() != w.size() || v.size() != w.size())
    throw DimensionError("adam_step: slot sizes differ from parameter size");
  if (t < 1) throw ContractError("adam_step: step index starts at 1");
  const double c1 = 1.0 - std::pow(cfg.beta1, static_cast<double>(t));
  const double c2 = 1.0 - std::pow(cfg.beta2, static_cast<double>(t));
  for (std::size_t i = 0; i < w.size(); ++i) {
    m[i] = static_cast<Scalar>(cfg.beta1 * m[i] + (1 - cfg.beta1) * g[i]);
    v[i] = static_cast<Scalar>(cfg.beta2 * v[i] + (1 - cfg.beta2) * g[i] * g[i]);
    const double mhat = m[i] / c1;
    const double vhat = v[i] / c2;
    w[i] = static_cast<Scalar>(w[i] - cfg.lr * mhat / (std::sqrt(vhat) + cfg.eps));
  }
}

void sgd_nesterov_step(std::span<Scalar> w, std::span<const Scalar> g, std::span<Scalar> velocity,
                       const OptimizerConfig& cfg) {
  if (g.size() != w.size() || velocity.size() != w.size())
    throw DimensionError("sgd_nesterov_step: slot sizes differ from parameter size");
  for (std::size_t i = 0; i < w.size(); ++i) {
    velocity[i] = static_cast<Scalar>(cfg.momentum * velocity[i] - cfg.lr * g[i]);
    w[i] = static_cast<Scalar>(w[i] + cfg.momentum * velocity[i] - cfg.lr * g[i]);
  }
}

Optimizer::Optimizer(OptimizerConfig cfg, std::vector<Parameter*> params) : cfg_(cfg), params_(std::move(params)) {
  cfg_.validate();
  for (Parameter* p : params_) {
    first_.emplace_back(p->value.shape());
    if (cfg_.kind == OptimizerKind::Adam) second_.emplace_back(p->value.shape());
  }
}

void Optimizer::step() {
  ++steps_;
  for (std::size_t i = 0; i < params_.size(); ++i) {
    Parameter& p = *params_[i];
    if (cfg_.kind == OptimizerKind::Adam)
      adam_step(p.value.span(), p.grad.span(), first_[i].span(), second_[i].span(), steps_, cfg_);
    else
      sgd_nesterov_step(p.value.span(), p.grad.span(), first_[i].span(), cfg_);
  }
}

std::vector<std::pair<std::string, Tensor>> Optimizer::state() const {
  std::vector<std::pair<std::string, Tensor>> out;
  for (std::size_t i = 0; i < params_.size(); ++i) {
    const std::string base = "optim." + params_[i]->name;
    if (cfg_.kind == OptimizerKind::Adam) {
      out.emplace_back(base + ".m", first_[i]);
      out.emplace_back(base + ".v", second_[i]);
    } else {
      out.emplace_back(base + ".velocity", first_[i]);
    }
  }
  return out;
}

void Optimizer::restore(const std::vector<std::pair<std::string, Tensor>>& tensors, std::int64_t steps) {
  std::unordered_map<std::string, const Tensor*> by_name;
  for (const auto& [name, t] : tensors) by_name.emplace(name, &t);
  auto take = [&](const std::string& name, Tensor& dst) {
    auto it = by_name.find(name);
    if (it == by_name.end()) throw LoadError("checkpoint: missing optimizer slot '" + name + "'");
    if (!(it->second->shape() == dst.shape())) throw LoadError("checkpoint: optimizer slot '" + name + "' has wrong shape");
    dst = *it->second;
  };
  for (std::size_t i = 0; i < params_.size(); ++i) {
    const std::string base = "optim." + params_[i]->name;
    if (cfg_.kind == OptimizerKind::Adam) {
      take(base + ".m", first_[i]);
      take(base + ".v", second_[i]);
    } else {
      take(base + ".velocity", first_[i]);
    }
  }
  steps_ = steps;
}

std::string EpochLog::line() const {
  std::string s = std::to_string(epoch) + "\t" + fmt4(train_loss);
  for (double m : {val.se, val.sp, val.ac, val.di, val.ja}) s += "\t" + (has_val ? fmt4(m) : std::string("nan"));
  return s;
}

Trainer::Trainer(CascnModel& model, OptimizerConfig opt, TrainOptions options)
    : model_(model), optimizer_(opt, model.parameters()), options_(std::move(options)) {
  if (options_.epochs < 0) throw ConfigError("epochs must be non-negative");
  if (options_.batch_size < 1) throw ConfigError("batch_size must be at least 1");
  if (options_.max_steps < 0) throw ConfigError("max_steps must be non-negative");
}

double Trainer::train_step(const std::vector<const Sample*>& batch) {
  const Tensor images = images_to_tensor(batch);
  const Tensor masks = masks_to_tensor(batch);
  for (Parameter* p : model_.parameters()) p->zero_grad();

  Tape tape;
  Context ctx{&tape, Mode::Train, debug_checks()};
  Var p = model_.forward(ctx, Var(images));
  Var loss = seg_loss(p, masks);
  const double value = loss.value().item();
  if (!std::isfinite(value)) {
    const std::string where = "non-finite loss at step " + std::to_string(state_.step + 1);
    Context probe{nullptr, Mode::Train, true};
    try {
      model_.forward(probe, Var(images));
    } catch (const NumericalError& e) {
      throw NumericalError(where + ": " + e.what());
    }
    throw NumericalError(where + ": all layer outputs finite, loss itself diverged");
  }
  tape.backward(loss);
  tape.accumulate_parameter_grads();
  optimizer_.step();
  ++state_.step;
  state_.step_losses.push_back(value);
  return value;
}

std::vector<const Sample*> Trainer::augmented_batch(const std::vector<Sample>& data, const std::vector<std::size_t>& order,
                                                    std::size_t begin, std::size_t end, int epoch,
                                                    std::vector<Sample>& storage) const {
  storage.clear();
  storage.reserve(end - begin);
  for (std::size_t i = begin; i < end; ++i) {
    const std::size_t idx = order[i];
    std::seed_seq seq{options_.seed, static_cast<std::uint64_t>(epoch), static_cast<std::uint64_t>(idx)};
    std::mt19937_64 rng(seq);
    storage.push_back(options_.augment.any() ? apply_policy(data[idx], options_.augment, rng) : data[idx]);
  }
  return pointers(storage, 0, storage.size());
}

const TrainState& Trainer::fit(const std::vector<Sample>& train, const std::vector<Sample>& val,
                               const std::function<void(const EpochLog&)>& on_epoch) {
  const InputSize in = model_.config().input;
  for (const auto* set : {&train, &val})
    for (const auto& s : *set)
      if (s.image.height != in.height || s.image.width != in.width)
        throw DimensionError("sample " + s.id + " is " + std::to_string(s.image.height) + "x" +
                             std::to_string(s.image.width) + "; model expects " + std::to_string(in.height) + "x" +
                             std::to_string(in.width));
  if (options_.epochs > state_.epoch && train.empty()) throw ContractError("training set is empty");

  namespace fs = std::filesystem;
  if (!options_.out_dir.empty() && options_.epochs > state_.epoch) {
    std::error_code ec;
    fs::create_directories(options_.out_dir, ec);
    if (!fs::is_directory(options_.out_dir)) throw IoError("cannot create output directory " + options_.out_dir);
  }

  std::vector<Sample> storage;
  for (int epoch = state_.epoch + 1; epoch <= options_.epochs; ++epoch) {
    if (options_.max_steps > 0 && state_.step >= options_.max_steps) break;
    std::vector<std::size_t> order(train.size());
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
    std::seed_seq seq{options_.seed, static_cast<std::uint64_t>(epoch)};
    std::mt19937_64 rng(seq);
    std::shuffle(order.begin(), order.end(), rng);

    double loss_sum = 0;
    int steps = 0;
    const auto bs = static_cast<std::size_t>(options_.batch_size);
    for (std::size_t b = 0; b < order.size(); b += bs) {
      if (options_.max_steps > 0 && state_.step >= options_.max_steps) break;
      auto batch = augmented_batch(train, order, b, std::min(order.size(), b + bs), epoch, storage);
      loss_sum += train_step(batch);
      ++steps;
    }

    EpochLog entry;
    entry.epoch = epoch;
    entry.train_loss = steps ? loss_sum / steps : 0.0;
    if (!val.empty()) {
      entry.has_val = true;
      entry.val = evaluate(model_, val, options_.batch_size).mean();
    }
    state_.epoch = epoch;
    state_.log.push_back(entry);

    if (!options_.out_dir.empty()) {
      std::ofstream log((fs::path(options_.out_dir) / "train_log.tsv").string(), std::ios::app);
      log << entry.line() << "\n";
      if (entry.has_val && entry.val.di > state_.best_val_di) {
        state_.best_val_di = entry.val.di;
        state_.best_checkpoint = (fs::path(options_.out_dir) / "best.ckpt").string();
        save(state_.best_checkpoint);
      }
      state_.last_checkpoint = (fs::path(options_.out_dir) / "last.ckpt").string();
      save(state_.last_checkpoint);
    } else if (entry.has_val && entry.val.di > state_.best_val_di) {
      state_.best_val_di = entry.val.di;
    }
    if (on_epoch) on_epoch(entry);
  }
  return state_;
}

void Trainer::save(const std::string& path, const std::string& extra_config) {
  std::string cfg;
  cfg += "train.optimizer=" + std::string(optimizer_name(optimizer_.config().kind)) + "\n";
  cfg += "train.step=" + std::to_string(state_.step) + "\n";
  cfg += "train.optimizer_steps=" + std::to_string(optimizer_.steps()) + "\n";
  cfg += "train.epoch=" + std::to_string(state_.epoch) + "\n";
  cfg += "train.best_val_di=" + fmt17(state_.best_val_di) + "\n";
  cfg += "train.best_checkpoint=" + state_.best_checkpoint + "\n";
  cfg += extra_config;
  save_model(model_, path, cfg, optimizer_.state());
}

void Trainer::resume(const Checkpoint& ckpt) {
  std::unordered_map<std::string, std::string> kv;
  for (auto& [k, v] : parse_kv_lines(ckpt.config_text)) kv[k] = v;
  auto need = [&](const char* key) -> const std::string& {
    auto it = kv.find(key);
    if (it == kv.end()) throw LoadError(std::string("checkpoint lacks training state key ") + key);
    return it->second;
  };
  if (need("train.optimizer") != optimizer_name(optimizer_.config().kind))
    throw ConfigError("checkpoint optimizer " + need("train.optimizer") + " differs from configured " +
                      std::string(optimizer_name(optimizer_.config().kind)));
  try {
    state_.step = std::stoll(need("train.step"));
    state_.epoch = std::stoi(need("train.epoch"));
    state_.best_val_di = std::stod(need("train.best_val_di"));
    optimizer_.restore(ckpt.tensors, std::stoll(need("train.optimizer_steps")));
  } catch (const std::logic_error&) {
    throw LoadError("checkpoint training state is malformed");
  }
  state_.best_checkpoint = kv.count("train.best_checkpoint") ? kv["train.best_checkpoint"] : "";
}

MetricReport evaluate(const Predictor& predictor, const std::vector<Sample>& data, int batch_size) {
  if (data.empty()) throw ContractError("evaluation set is empty");
  if (batch_size < 1) throw ConfigError("batch_size must be at least 1");
  MetricReport report;
  const auto bs = static_cast<std::size_t>(batch_size);
  for (std::size_t b = 0; b < data.size(); b += bs) {
    auto batch = pointers(data, b, std::min(data.size(), b + bs));
    const Tensor probs = predictor(images_to_tensor(batch), batch);
    const std::size_t plane = static_cast<std::size_t>(batch[0]->mask.height) * batch[0]->mask.width;
    if (probs.numel() != plane * batch.size()) throw DimensionError("predictor output size mismatch");
    for (std::size_t n = 0; n < batch.size(); ++n) {
      auto counts = confusion(probs.span().subspan(n * plane, plane), std::span<const std::uint8_t>(batch[n]->mask.pixels));
      report.rows.emplace_back(batch[n]->id, metrics(counts));
    }
  }
  return report;
}

MetricReport evaluate(CascnModel& model, const std::vector<Sample>& data, int batch_size) {
  return evaluate([&](const Tensor& images, const std::vector<const Sample*>&) { return model.predict(images); }, data,
                  batch_size);
}

}  // namespace cascn
