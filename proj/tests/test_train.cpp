#include <cmath>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "cascn/kernels.hpp"
#include "cascn/train.hpp"
#include "doctest.h"

using namespace cascn;
namespace fs = std::filesystem;

namespace {

ModelConfig tiny() {
  ModelConfig c = ModelConfig::desk();
  c.input = {32, 32};
  return c;
}

std::vector<Sample> tiny_data(int n, std::uint64_t seed) { return synth_dataset(n, {32, 32}, seed); }

fs::path fresh_dir(const std::string& name) {
  fs::path d = fs::temp_directory_path() / "cascn_test_train" / name;
  fs::remove_all(d);
  fs::create_directories(d);
  return d;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

bool same_parameters(CascnModel& a, CascnModel& b) {
  auto pa = a.parameters(), pb = b.parameters();
  if (pa.size() != pb.size()) return false;
  for (std::size_t i = 0; i < pa.size(); ++i)
    if (!bitwise_equal(pa[i]->value, pb[i]->value)) return false;
  auto ba = a.buffers(), bb = b.buffers();
  for (std::size_t i = 0; i < ba.size(); ++i)
    if (!bitwise_equal(*ba[i].second, *bb[i].second)) return false;
  return true;
}

TrainOptions quick(int epochs, const std::string& out = {}) {
  TrainOptions o;
  o.epochs = epochs;
  o.batch_size = 2;
  o.seed = 3;
  o.out_dir = out;
  return o;
}

}  // namespace

TEST_SUITE("adam") {
  TEST_CASE("first step from w=1, g=1") {
    Scalar w = 1, g = 1, m = 0, v = 0;
    OptimizerConfig cfg;
    adam_step({&w, 1}, {&g, 1}, {&m, 1}, {&v, 1}, 1, cfg);
    CHECK(std::abs(w - (1 - 0.003 / (1 + 1e-8))) < 1e-15);
    CHECK(std::abs(w - 0.997) < 1e-10);
  }

  TEST_CASE("first-step magnitude never exceeds lr") {
    OptimizerConfig cfg;
    for (Scalar g : {Scalar(1e-6), Scalar(-0.3), Scalar(7), Scalar(-1e4)}) {
      Scalar w = 0.5, m = 0, v = 0;
      adam_step({&w, 1}, {&g, 1}, {&m, 1}, {&v, 1}, 1, cfg);
      CHECK(std::abs(w - 0.5) <= cfg.lr * (1 + 1e-12));
      CHECK((w - 0.5) * g < 0);
    }
  }

  TEST_CASE("zero gradient leaves weights unchanged") {
    Scalar w = 2.5, g = 0, m = 0, v = 0;
    adam_step({&w, 1}, {&g, 1}, {&m, 1}, {&v, 1}, 1, OptimizerConfig{});
    CHECK(w == 2.5);
  }

  TEST_CASE("minimizes w^2") {
    OptimizerConfig cfg;
    cfg.lr = 0.05;
    Scalar w = 1, m = 0, v = 0;
    for (int t = 1; t <= 200; ++t) {
      Scalar g = 2 * w;
      adam_step({&w, 1}, {&g, 1}, {&m, 1}, {&v, 1}, t, cfg);
    }
    CHECK(std::abs(w) < 0.05);
  }
}

TEST_SUITE("nesterov") {
  TEST_CASE("two hand-computed steps") {
    OptimizerConfig cfg{OptimizerKind::SgdNesterov, 0.1};
    cfg.momentum = 0.9;
    Scalar w = 1, g = 1, vel = 0;
    sgd_nesterov_step({&w, 1}, {&g, 1}, {&vel, 1}, cfg);
    CHECK(std::abs(vel + 0.1) < 1e-15);
    CHECK(std::abs(w - 0.81) < 1e-15);
    sgd_nesterov_step({&w, 1}, {&g, 1}, {&vel, 1}, cfg);
    CHECK(std::abs(vel + 0.19) < 1e-15);
    CHECK(std::abs(w - 0.539) < 1e-15);
  }

  TEST_CASE("zero momentum is plain SGD") {
    OptimizerConfig cfg{OptimizerKind::SgdNesterov, 0.25};
    cfg.momentum = 0;
    Scalar w = 1, vel = 0;
    for (Scalar g : {Scalar(1), Scalar(-2), Scalar(0.5)}) {
      const Scalar expect = w - Scalar(0.25) * g;
      sgd_nesterov_step({&w, 1}, {&g, 1}, {&vel, 1}, cfg);
      CHECK(w == expect);
    }
  }

  TEST_CASE("zero gradient and velocity change nothing") {
    OptimizerConfig cfg{OptimizerKind::SgdNesterov, 0.1};
    Scalar w = -3, g = 0, vel = 0;
    sgd_nesterov_step({&w, 1}, {&g, 1}, {&vel, 1}, cfg);
    CHECK(w == -3);
    CHECK(vel == 0);
  }
}

TEST_CASE("a step with lr 0 changes nothing") {
  for (OptimizerKind kind : {OptimizerKind::Adam, OptimizerKind::SgdNesterov}) {
    CascnModel model(tiny()), ref(tiny());
    OptimizerConfig cfg{kind, 0.0};
    Optimizer opt(cfg, model.parameters());
    for (Parameter* p : model.parameters())
      for (auto& g : p->grad.vec()) g = 1;
    opt.step();
    CHECK(same_parameters(model, ref));
  }
  CHECK_THROWS_AS(OptimizerConfig({OptimizerKind::Adam, -1.0}).validate(), ConfigError);
}

TEST_SUITE("trainer") {
  TEST_CASE("epochs = 0 leaves state unchanged and writes nothing") {
    fs::path out = fresh_dir("zero");
    CascnModel model(tiny()), ref(tiny());
    Trainer t(model, {}, quick(0, (out / "run").string()));
    const TrainState& s = t.fit(tiny_data(4, 1), tiny_data(2, 2));
    CHECK(s.step == 0);
    CHECK(s.log.empty());
    CHECK(same_parameters(model, ref));
    CHECK_FALSE(fs::exists(out / "run"));
  }

  TEST_CASE("log lines and checkpoints") {
    fs::path out = fresh_dir("log");
    CascnModel model(tiny());
    Trainer t(model, {}, quick(2, out.string()));
    const TrainState& s = t.fit(tiny_data(4, 1), tiny_data(2, 2));
    CHECK(s.step == 4);
    CHECK(s.log.size() == 2);
    for (double l : s.step_losses) CHECK(std::isfinite(l));
    CHECK(fs::exists(out / "last.ckpt"));
    CHECK(fs::exists(out / "best.ckpt"));
    const std::string log = slurp(out / "train_log.tsv");
    CHECK(std::count(log.begin(), log.end(), '\n') == 2);
    const std::string first = log.substr(0, log.find('\n'));
    CHECK(std::count(first.begin(), first.end(), '\t') == 6);
    CHECK(first.rfind("1\t", 0) == 0);
  }

  TEST_CASE("max_steps caps the run") {
    CascnModel model(tiny());
    TrainOptions o = quick(5);
    o.max_steps = 3;
    Trainer t(model, {}, o);
    CHECK(t.fit(tiny_data(4, 1), {}).step == 3);
  }

  TEST_CASE("identical seeds give bitwise identical logs and weights") {
    fs::path a = fresh_dir("det_a"), b = fresh_dir("det_b");
    CascnModel ma(tiny()), mb(tiny());
    Trainer ta(ma, {}, quick(2, a.string())), tb(mb, {}, quick(2, b.string()));
    auto sa = ta.fit(tiny_data(4, 1), tiny_data(2, 2));
    auto sb = tb.fit(tiny_data(4, 1), tiny_data(2, 2));
    CHECK(slurp(a / "train_log.tsv") == slurp(b / "train_log.tsv"));
    REQUIRE(sa.step_losses.size() == sb.step_losses.size());
    for (std::size_t i = 0; i < sa.step_losses.size(); ++i) CHECK(sa.step_losses[i] == sb.step_losses[i]);
    CHECK(same_parameters(ma, mb));
  }

  TEST_CASE("resume from a checkpoint continues bitwise") {
    fs::path straight = fresh_dir("straight"), split_run = fresh_dir("split");
    const auto train = tiny_data(4, 1), val = tiny_data(2, 2);

    CascnModel full(tiny());
    Trainer tf(full, {}, quick(3, straight.string()));
    const auto fs_full = tf.fit(train, val);

    {
      CascnModel first(tiny());
      Trainer t1(first, {}, quick(1, split_run.string()));
      t1.fit(train, val);
    }
    Checkpoint raw;
    auto resumed = load_model((split_run / "last.ckpt").string(), nullptr, &raw);
    Trainer t2(*resumed, {}, quick(3, split_run.string()));
    t2.resume(raw);
    CHECK(t2.state().epoch == 1);
    CHECK(t2.state().step == 2);
    const auto fs_resumed = t2.fit(train, val);

    CHECK(fs_resumed.step == fs_full.step);
    CHECK(same_parameters(full, *resumed));
    CHECK(slurp(straight / "train_log.tsv") == slurp(split_run / "train_log.tsv"));
    for (std::size_t i = 0; i < fs_resumed.step_losses.size(); ++i)
      CHECK(fs_resumed.step_losses[i] == fs_full.step_losses[i + 2]);
  }

  TEST_CASE("resume rejects a different optimizer") {
    fs::path out = fresh_dir("optmismatch");
    CascnModel model(tiny());
    Trainer t(model, {}, quick(1, out.string()));
    t.fit(tiny_data(2, 1), {});
    Checkpoint raw;
    auto loaded = load_model((out / "last.ckpt").string(), nullptr, &raw);
    Trainer other(*loaded, {OptimizerKind::SgdNesterov, 0.01}, quick(2));
    CHECK_THROWS_AS(other.resume(raw), ConfigError);
  }

  TEST_CASE("non-finite activations abort naming the layer") {
    CascnModel model(tiny());
    Trainer t(model, {}, quick(1));
    kernels::set_fault("transposed_conv_nan");
    std::string msg;
    try {
      t.fit(tiny_data(2, 1), {});
    } catch (const NumericalError& e) {
      msg = e.what();
    }
    kernels::set_fault("");
    CHECK(msg.find("step 1") != std::string::npos);
    CHECK(msg.find("decoder.stage1.up") != std::string::npos);
  }

  TEST_CASE("input checks") {
    CascnModel model(tiny());
    Trainer t(model, {}, quick(1));
    CHECK_THROWS_AS(t.fit(synth_dataset(2, {48, 64}, 1), {}), DimensionError);
    CHECK_THROWS_AS(t.fit({}, {}), ContractError);
    CHECK_THROWS_AS(Trainer(model, {}, quick(-1)), ConfigError);
  }
}

TEST_SUITE("evaluate") {
  TEST_CASE("oracle predictor scores 1 everywhere") {
    const auto data = tiny_data(5, 4);
    Predictor oracle = [](const Tensor&, const std::vector<const Sample*>& batch) { return masks_to_tensor(batch); };
    MetricReport r = evaluate(oracle, data, 2);
    CHECK(r.rows.size() == 5);
    const Metrics m = r.mean();
    for (double v : {m.se, m.sp, m.ac, m.di, m.ja}) CHECK(v == 1.0);
    const std::string csv = r.to_csv();
    CHECK(std::count(csv.begin(), csv.end(), '\n') == 5 + 2);  // header, rows, mean
  }

  TEST_CASE("constant 0.5 predictor gives SE 1 and SP 0") {
    const auto data = tiny_data(3, 5);
    Predictor half = [](const Tensor& images, const std::vector<const Sample*>&) {
      return Tensor::full({images.dim(0), 1, images.dim(2), images.dim(3)}, 0.5);
    };
    const Metrics m = evaluate(half, data, 3).mean();
    CHECK(m.se == 1.0);
    CHECK(m.sp == 0.0);
  }

  TEST_CASE("model evaluation does not mutate parameters or buffers") {
    CascnModel model(tiny()), ref(tiny());
    MetricReport r = evaluate(model, tiny_data(3, 6), 2);
    CHECK(r.rows.size() == 3);
    CHECK(same_parameters(model, ref));
  }
}
