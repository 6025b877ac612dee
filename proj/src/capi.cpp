#include "cascn/cascn.h"

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <new>

#include "cascn/config.hpp"
#include "cascn/kernels.hpp"
#include "cascn/parallel.hpp"
#include "cascn/verify.hpp"

struct cascn_config {
  cascn::RunConfig run;
};

struct cascn_model {
  std::unique_ptr<cascn::CascnModel> model;
};

namespace {

using namespace cascn;
namespace fs = std::filesystem;

thread_local std::string g_last_error;

template <class F>
cascn_status guarded(F&& fn) {
  g_last_error.clear();
  try {
    fn();
    return CASCN_OK;
  } catch (const ConfigError& e) {
    g_last_error = e.what();
    return CASCN_ERR_CONFIG;
  } catch (const IoError& e) {
    g_last_error = e.what();
    return CASCN_ERR_IO;
  } catch (const ContractError& e) {
    g_last_error = e.what();
    return CASCN_ERR_DATA;
  } catch (const DimensionError& e) {
    g_last_error = e.what();
    return CASCN_ERR_DIMENSION;
  } catch (const LoadError& e) {
    g_last_error = e.what();
    return CASCN_ERR_LOAD;
  } catch (const NumericalError& e) {
    g_last_error = e.what();
    return CASCN_ERR_NUMERICAL;
  } catch (const std::bad_alloc&) {
    g_last_error = "out of memory";
    return CASCN_ERR_INTERNAL;
  } catch (const std::exception& e) {
    g_last_error = e.what();
    return CASCN_ERR_INTERNAL;
  }
}

cascn_status invalid(const char* what) {
  g_last_error = what;
  return CASCN_ERR_INVALID_ARGUMENT;
}

void emit(cascn_write_fn write, void* user, const std::string& s) {
  if (write) write(s.data(), s.size(), user);
}

std::vector<Sample> load_resized(const std::string& root, InputSize size) {
  std::vector<Sample> out;
  for (const auto& s : load_dataset(root)) out.push_back(resize(s, size));
  return out;
}

// Test split, or the next non-empty split when a small dataset leaves it empty.
const std::vector<Sample>& report_split(const Splits& s) {
  if (!s.test.empty()) return s.test;
  if (!s.val.empty()) return s.val;
  return s.train;
}

std::unique_ptr<CascnModel> best_model(const TrainState& st, std::unique_ptr<CascnModel> current) {
  if (!st.best_checkpoint.empty() && fs::exists(st.best_checkpoint)) return load_model(st.best_checkpoint);
  return current;
}

void write_file(const fs::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary);
  if (!out || !(out << text)) throw IoError("cannot write " + path.string());
}

struct RunResult {
  MetricReport report;
  TrainState state;
};

RunResult train_and_report(const RunConfig& run, const std::vector<Sample>& data, const std::string& out_dir,
                           cascn_write_fn log, void* user) {
  SplitSpec spec = run.split;
  spec.seed = run.model.seed;
  const Splits splits = split(data, spec);
  auto model = std::make_unique<CascnModel>(run.model);
  Trainer trainer(*model, run.optimizer, run.train_options(out_dir));
  if (!out_dir.empty()) {
    std::error_code ec;
    fs::create_directories(out_dir, ec);
    if (!fs::is_directory(out_dir)) throw IoError("cannot create output directory " + out_dir);
    write_file(fs::path(out_dir) / "config.txt", run.serialize());
    fs::remove(fs::path(out_dir) / "train_log.tsv", ec);
  }
  trainer.fit(splits.train, splits.val, [&](const EpochLog& e) { emit(log, user, e.line() + "\n"); });
  RunResult r{{}, trainer.state()};
  auto final_model = best_model(r.state, std::move(model));
  r.report = evaluate(*final_model, report_split(splits), run.batch_size);
  if (!out_dir.empty()) write_file(fs::path(out_dir) / "report.csv", r.report.to_csv());
  return r;
}

void apply_switches(const RunConfig& run) {
  if (run.deterministic) set_deterministic(true);
}

}  // namespace

extern "C" {

const char* cascn_last_error(void) { return g_last_error.c_str(); }

const char* cascn_status_name(cascn_status status) {
  switch (status) {
    case CASCN_OK: return "ok";
    case CASCN_ERR_INVALID_ARGUMENT: return "invalid argument";
    case CASCN_ERR_CONFIG: return "config error";
    case CASCN_ERR_IO: return "i/o error";
    case CASCN_ERR_DATA: return "data error";
    case CASCN_ERR_DIMENSION: return "dimension error";
    case CASCN_ERR_LOAD: return "load error";
    case CASCN_ERR_NUMERICAL: return "numerical error";
    case CASCN_ERR_VERIFY_FAILED: return "verification failed";
    case CASCN_ERR_INTERNAL: return "internal error";
  }
  return "unknown status";
}

cascn_status cascn_set_threads(int threads) {
  if (threads < 1) return invalid("thread count must be >= 1");
  return guarded([&] { set_thread_count(threads); });
}

void cascn_set_deterministic(int enabled) { set_deterministic(enabled != 0); }

cascn_status cascn_set_fault(const char* name) {
  return guarded([&] { kernels::set_fault(name ? name : ""); });
}

cascn_status cascn_config_new(const char* scale, cascn_config** out) {
  if (!out) return invalid("null output handle");
  *out = nullptr;
  return guarded([&] {
    auto cfg = std::make_unique<cascn_config>();
    cfg->run = RunConfig::defaults(parse_scale(scale ? scale : "paper"));
    *out = cfg.release();
  });
}

cascn_status cascn_config_load(cascn_config* cfg, const char* path) {
  if (!cfg || !path) return invalid("null config or path");
  return guarded([&] { cfg->run = RunConfig::load(path, cfg->run); });
}

cascn_status cascn_config_set(cascn_config* cfg, const char* key, const char* value) {
  if (!cfg || !key || !value) return invalid("null config, key or value");
  return guarded([&] {
    RunConfig next = cfg->run;
    next.set(key, value);
    next.validate();
    cfg->run = next;
  });
}

cascn_status cascn_config_serialize(const cascn_config* cfg, cascn_write_fn write, void* user) {
  if (!cfg) return invalid("null config");
  return guarded([&] { emit(write, user, cfg->run.serialize()); });
}

void cascn_config_free(cascn_config* cfg) { delete cfg; }

cascn_status cascn_model_load(const char* checkpoint, cascn_model** out) {
  if (!checkpoint || !out) return invalid("null checkpoint path or output handle");
  *out = nullptr;
  return guarded([&] {
    auto m = std::make_unique<cascn_model>();
    m->model = load_model(checkpoint);
    *out = m.release();
  });
}

cascn_status cascn_model_input_size(const cascn_model* model, int* height, int* width) {
  if (!model || !height || !width) return invalid("null argument");
  *height = model->model->config().input.height;
  *width = model->model->config().input.width;
  return CASCN_OK;
}

cascn_status cascn_model_predict_file(cascn_model* model, const char* image_path, const char* out_path) {
  if (!model || !image_path || !out_path) return invalid("null argument");
  return guarded([&] {
    const Image original = to_rgb(read_image(image_path));
    const InputSize in = model->model->config().input;
    Sample s{"input", resize_bilinear(original, in.height, in.width), Image(in.height, in.width, 1)};
    const Tensor probs = model->model->predict(images_to_tensor({&s}));
    Image mask(in.height, in.width, 1);
    for (std::size_t i = 0; i < mask.pixels.size(); ++i) mask.pixels[i] = probs[i] >= 0.5 ? 255 : 0;
    write_png(out_path, resize_nearest(mask, original.height, original.width));
  });
}

void cascn_model_free(cascn_model* model) { delete model; }

cascn_status cascn_synth(const char* out_root, int n, int height, int width, uint64_t seed) {
  if (!out_root) return invalid("null output root");
  if (n < 1) return invalid("sample count must be >= 1");
  return guarded([&] { save_dataset(out_root, synth_dataset(n, {height, width}, seed)); });
}

cascn_status cascn_train(const cascn_config* cfg, const char* data_root, const char* out_dir, cascn_write_fn log,
                         void* user) {
  if (!cfg || !data_root || !out_dir) return invalid("null config, data root or output directory");
  return guarded([&] {
    apply_switches(cfg->run);
    const auto data = load_resized(data_root, cfg->run.model.input);
    train_and_report(cfg->run, data, out_dir, log, user);
  });
}

cascn_status cascn_eval(const char* checkpoint, const char* data_root, cascn_write_fn csv, void* user) {
  if (!checkpoint || !data_root) return invalid("null checkpoint or data root");
  return guarded([&] {
    auto model = load_model(checkpoint);
    const auto data = load_resized(data_root, model->config().input);
    emit(csv, user, evaluate(*model, data).to_csv());
  });
}

cascn_status cascn_ablate(const cascn_config* cfg, const char* data_root, const char* out_dir, cascn_write_fn csv,
                          void* user) {
  if (!cfg || !data_root) return invalid("null config or data root");
  return guarded([&] {
    apply_switches(cfg->run);
    const auto data = load_resized(data_root, cfg->run.model.input);
    std::string table = "variant,SE,SP,AC,DI,JA\n";
    emit(csv, user, table);
    for (auto name : variant_names()) {
      RunConfig run = cfg->run;
      run.model = variant(cfg->run.model, name);
      std::string dir;
      if (out_dir && *out_dir) {
        std::string sub(name);
        for (auto& ch : sub)
          if (ch == '+') ch = '_';
        dir = (fs::path(out_dir) / sub).string();
      }
      const Metrics m = train_and_report(run, data, dir, nullptr, nullptr).report.mean();
      std::string row = std::string(variant_label(name));
      for (double v : {m.se, m.sp, m.ac, m.di, m.ja}) row += "," + format_metric(v);
      row += "\n";
      table += row;
      emit(csv, user, row);
    }
    if (out_dir && *out_dir) write_file(fs::path(out_dir) / "ablation.csv", table);
  });
}

cascn_status cascn_verify(cascn_write_fn line, void* user) {
  bool all = true;
  const cascn_status st = guarded([&] {
    for (const auto& r : run_verify([&](const CheckResult& r) {
           char t[32];
           std::snprintf(t, sizeof t, "%.2fs", r.seconds);
           emit(line, user, std::string(r.passed ? "PASS " : "FAIL ") + r.name + "  " + r.detail + "  [" + t + "]\n");
         }))
      all = all && r.passed;
  });
  if (st != CASCN_OK) return st;
  if (!all) {
    g_last_error = "one or more invariant checks failed";
    return CASCN_ERR_VERIFY_FAILED;
  }
  return CASCN_OK;
}

cascn_status cascn_flops(const cascn_config* cfg, cascn_write_fn csv, void* user) {
  if (!cfg) return invalid("null config");
  return guarded([&] {
    const FlopReport r = CascnModel(cfg->run.model).flops();
    std::string out = "layer,H,W,Dk,N,M,macs,standard_macs,separable_macs,ratio\n";
    for (const auto& l : r.layers) {
      out += l.name + "," + std::to_string(l.height) + "," + std::to_string(l.width) + "," + std::to_string(l.kernel) +
             "," + std::to_string(l.in_channels) + "," + std::to_string(l.out_channels) + "," + std::to_string(l.macs) +
             ",";
      if (l.conv2d)
        out += std::to_string(l.standard_macs) + "," + std::to_string(l.separable_macs) + "," +
               std::to_string(l.ratio_num) + "/" + std::to_string(l.ratio_den);
      else
        out += ",,";
      out += "\n";
    }
    out += "TOTAL,,,,,," + std::to_string(r.total_macs) + "," + std::to_string(r.swappable_standard_macs) + "," +
           std::to_string(r.swappable_separable_macs) + ",\n";
    emit(csv, user, out);
  });
}

}  // extern "C"
