#include <cstdio>
#include <cstdlib>
#include <string>

#include "CLI11.hpp"
#include "cascn/cascn.h"

namespace {

void to_stdout(const char* data, size_t len, void*) {
  std::fwrite(data, 1, len, stdout);
  std::fflush(stdout);
}

void to_stderr(const char* data, size_t len, void*) { std::fwrite(data, 1, len, stderr); }

int exit_code(cascn_status st) {
  switch (st) {
    case CASCN_OK: return 0;
    case CASCN_ERR_INVALID_ARGUMENT:
    case CASCN_ERR_CONFIG:
    case CASCN_ERR_IO:
    case CASCN_ERR_DATA: return 2;
    default: return 3;
  }
}

int fail(cascn_status st) {
  std::fprintf(stderr, "cascn: %s: %s\n", cascn_status_name(st), cascn_last_error());
  return exit_code(st);
}

struct RunFlags {
  std::string config, data, out, scale = "paper";
  long long seed = -1;
  bool deterministic = false;
};

void add_run_flags(CLI::App* cmd, RunFlags& f, bool needs_data, bool needs_out) {
  cmd->add_option("--config", f.config, "key=value config file");
  if (needs_data) cmd->add_option("--data", f.data, "dataset root (images/, masks/)")->required();
  if (needs_out) cmd->add_option("--out", f.out, "output directory")->required();
  cmd->add_option("--seed", f.seed, "override the config seed");
  cmd->add_flag("--deterministic", f.deterministic, "fixed reduction order, bitwise-reproducible runs");
  cmd->add_option("--scale", f.scale, "default schedule")->check(CLI::IsMember({"paper", "desk"}));
}

// Builds the config from scale defaults, the config file and flag overrides.
cascn_status build_config(const RunFlags& f, cascn_config** out) {
  cascn_status st = cascn_config_new(f.scale.c_str(), out);
  if (st == CASCN_OK && !f.config.empty()) st = cascn_config_load(*out, f.config.c_str());
  if (st == CASCN_OK && f.seed >= 0) st = cascn_config_set(*out, "seed", std::to_string(f.seed).c_str());
  if (st == CASCN_OK && f.deterministic) st = cascn_config_set(*out, "deterministic", "true");
  if (st == CASCN_OK && f.deterministic) cascn_set_deterministic(1);
  return st;
}

template <class F>
int with_config(const RunFlags& f, F&& fn) {
  cascn_config* cfg = nullptr;
  cascn_status st = build_config(f, &cfg);
  if (st == CASCN_OK) st = fn(cfg);
  cascn_config_free(cfg);
  return st == CASCN_OK ? 0 : fail(st);
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"CASCN skin-lesion segmentation"};
  app.require_subcommand(1);
  std::string fault;
  app.add_option("--inject-fault", fault)->group("");
  int threads = 0;
  app.add_option("--threads", threads, "worker threads (default: CASCN_THREADS or 1)");

  auto* synth = app.add_subcommand("synth", "write a synthetic lesion dataset");
  std::string synth_out, synth_size = "48x64";
  int synth_n = 8;
  long long synth_seed = 1;
  synth->add_option("--out", synth_out, "dataset root to create")->required();
  synth->add_option("--n", synth_n, "number of samples");
  synth->add_option("--size", synth_size, "HxW");
  synth->add_option("--seed", synth_seed, "generator seed");

  RunFlags train_flags, ablate_flags, flops_flags;
  auto* train = app.add_subcommand("train", "train on a dataset; writes checkpoints, log and test report");
  add_run_flags(train, train_flags, true, true);
  auto* ablate = app.add_subcommand("ablate", "train and evaluate every ablation variant");
  add_run_flags(ablate, ablate_flags, true, false);
  ablate->add_option("--out", ablate_flags.out, "output directory for per-variant runs");
  auto* flops = app.add_subcommand("flops", "per-layer multiply-accumulate counts");
  add_run_flags(flops, flops_flags, false, false);

  auto* eval = app.add_subcommand("eval", "per-image metrics CSV for a checkpoint");
  std::string eval_ckpt, eval_data;
  eval->add_option("--checkpoint", eval_ckpt)->required();
  eval->add_option("--data", eval_data, "dataset root")->required();
  bool eval_det = false;
  eval->add_flag("--deterministic", eval_det);

  auto* predict = app.add_subcommand("predict", "binary PNG mask for one image");
  std::string pred_ckpt, pred_image, pred_out;
  predict->add_option("--checkpoint", pred_ckpt)->required();
  predict->add_option("--image", pred_image)->required();
  predict->add_option("--out", pred_out, "output PNG path")->required();

  auto* verify = app.add_subcommand("verify", "run the invariant suite");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 2;
  }

  if (!fault.empty()) {
    if (cascn_status st = cascn_set_fault(fault.c_str()); st != CASCN_OK) return fail(st);
  }
  if (threads > 0) {
    if (cascn_status st = cascn_set_threads(threads); st != CASCN_OK) return fail(st);
  }

  if (*synth) {
    const auto x = synth_size.find('x');
    int h = 0, w = 0;
    try {
      if (x == std::string::npos) throw std::invalid_argument("size");
      h = std::stoi(synth_size.substr(0, x));
      w = std::stoi(synth_size.substr(x + 1));
    } catch (const std::exception&) {
      std::fprintf(stderr, "cascn: --size must look like 48x64\n");
      return 2;
    }
    cascn_status st = cascn_synth(synth_out.c_str(), synth_n, h, w, static_cast<uint64_t>(synth_seed));
    return st == CASCN_OK ? 0 : fail(st);
  }
  if (*train) {
    return with_config(train_flags, [&](cascn_config* cfg) {
      return cascn_train(cfg, train_flags.data.c_str(), train_flags.out.c_str(), to_stderr, nullptr);
    });
  }
  if (*ablate) {
    return with_config(ablate_flags, [&](cascn_config* cfg) {
      return cascn_ablate(cfg, ablate_flags.data.c_str(), ablate_flags.out.c_str(), to_stdout, nullptr);
    });
  }
  if (*flops) {
    return with_config(flops_flags, [&](cascn_config* cfg) { return cascn_flops(cfg, to_stdout, nullptr); });
  }
  if (*eval) {
    if (eval_det) cascn_set_deterministic(1);
    cascn_status st = cascn_eval(eval_ckpt.c_str(), eval_data.c_str(), to_stdout, nullptr);
    return st == CASCN_OK ? 0 : fail(st);
  }
  if (*predict) {
    cascn_model* model = nullptr;
    cascn_status st = cascn_model_load(pred_ckpt.c_str(), &model);
    if (st == CASCN_OK) st = cascn_model_predict_file(model, pred_image.c_str(), pred_out.c_str());
    cascn_model_free(model);
    return st == CASCN_OK ? 0 : fail(st);
  }
  if (*verify) {
    cascn_status st = cascn_verify(to_stdout, nullptr);
    if (st == CASCN_OK) {
      std::printf("all checks passed\n");
      return 0;
    }
    return fail(st);
  }
  return 2;
}
