#include <algorithm>
#include <cmath>
#include <random>

#include "cascn/loss_metrics.hpp"
#include "doctest.h"
#include "oracles.hpp"

using namespace cascn;

namespace {

double loss_value(Var (*fn)(const Var&, const Tensor&), const Tensor& p, const Tensor& x) {
  return fn(Var(p), x).value().item();
}

Tensor binary(Shape s, std::mt19937_64& rng, double density = 0.5) {
  std::bernoulli_distribution b(density);
  Tensor t(s);
  for (auto& v : t.vec()) v = b(rng) ? 1 : 0;
  return t;
}

// Brute-force metrics straight from pixel enumeration.
Metrics brute(const std::vector<Scalar>& pred, const std::vector<Scalar>& gt) {
  long tp = 0, fp = 0, tn = 0, fn = 0;
  for (std::size_t i = 0; i < pred.size(); ++i) {
    const bool p = pred[i] >= 0.5, g = gt[i] >= 0.5;
    if (p && g) ++tp;
    if (p && !g) ++fp;
    if (!p && !g) ++tn;
    if (!p && g) ++fn;
  }
  auto ratio = [](long num, long den, bool absent) { return den ? double(num) / double(den) : (absent ? 1.0 : 0.0); };
  Metrics m;
  m.se = ratio(tp, tp + fn, tp + fn + fp == 0);
  m.sp = ratio(tn, tn + fp, tn + fp + fn == 0);
  m.ac = double(tp + tn) / double(pred.size());
  m.di = ratio(2 * tp, 2 * tp + fp + fn, tp + fp + fn == 0);
  m.ja = ratio(tp, tp + fp + fn, tp + fp + fn == 0);
  return m;
}

}  // namespace

TEST_SUITE("bce") {
  TEST_CASE("perfect prediction") {
    Tensor x(Shape{1, 1, 2, 2}, {1, 0, 1, 0});
    CHECK(loss_value(bce_loss, x, x) == doctest::Approx(-std::log1p(-1e-7)).epsilon(1e-9));
  }
  TEST_CASE("p = 0.5 everywhere") {
    std::mt19937_64 rng(1);
    Tensor x = binary({2, 1, 5, 5}, rng);
    CHECK(std::abs(loss_value(bce_loss, Tensor::full(x.shape(), 0.5), x) - std::log(2.0)) < 1e-9);
  }
  TEST_CASE("single pixel x=1, p=0.25") {
    CHECK(loss_value(bce_loss, Tensor(Shape{1, 1, 1, 1}, {0.25}), Tensor(Shape{1, 1, 1, 1}, {1})) ==
          doctest::Approx(std::log(4.0)).epsilon(1e-12));
  }
  TEST_CASE("contract errors") {
    CHECK_THROWS_AS(bce_loss(Var(Tensor(Shape{1, 1, 2, 2}, 0.5)), Tensor(Shape{1, 1, 2, 3})), Error);
    CHECK_THROWS_AS(bce_loss(Var(Tensor(Shape{1, 1, 1, 1}, 0.5)), Tensor(Shape{1, 1, 1, 1}, 0.3)), ContractError);
  }
}

TEST_SUITE("jaccard") {
  TEST_CASE("perfect binary prediction is exactly zero") {
    Tensor x(Shape{1, 1, 2, 3}, {1, 0, 1, 1, 0, 0});
    CHECK(loss_value(jaccard_loss, x, x) == 0.0);
  }
  TEST_CASE("x all ones, p all 0.5") {
    for (int n : {1, 7, 64}) CHECK(loss_value(jaccard_loss, Tensor(Shape{1, 1, 1, n}, 0.5), Tensor(Shape{1, 1, 1, n}, 1)) == 0.5);
  }
  TEST_CASE("disjoint and empty") {
    CHECK(loss_value(jaccard_loss, Tensor(Shape{1, 1, 2, 2}), Tensor(Shape{1, 1, 2, 2}, 1)) == 1.0);
    CHECK(loss_value(jaccard_loss, Tensor(Shape{1, 1, 2, 2}), Tensor(Shape{1, 1, 2, 2})) == 0.0);
  }
  TEST_CASE("range on random batches") {
    std::mt19937_64 rng(2);
    for (int t = 0; t < 200; ++t) {
      Tensor x = binary({1, 1, 4, 4}, rng, t % 5 / 4.0);
      Tensor p = oracle::random(x.shape(), rng, 0, 1);
      const double j = loss_value(jaccard_loss, p, x);
      CHECK(j >= 0);
      CHECK(j <= 1);
      CHECK(loss_value(bce_loss, p, x) >= 0);
    }
  }
}

TEST_SUITE("seg_loss") {
  TEST_CASE("additivity of the analytic cases") {
    Tensor x = Tensor::full({1, 1, 3, 3}, 1), p = Tensor::full({1, 1, 3, 3}, 0.5);
    const double s = loss_value(seg_loss, p, x);
    CHECK(s == loss_value(bce_loss, p, x) + loss_value(jaccard_loss, p, x));
    CHECK(std::abs(s - (std::log(2.0) + 0.5)) < 1e-9);
  }
  TEST_CASE("perfect prediction") {
    Tensor x(Shape{1, 1, 2, 2}, {1, 0, 0, 1});
    CHECK(loss_value(seg_loss, x, x) <= 1e-6);
  }
  TEST_CASE("gradient is the sum of component gradients and passes grad_check") {
    for (std::uint64_t seed = 1; seed <= 5; ++seed) {
      std::mt19937_64 rng(seed);
      Tensor x = binary({2, 1, 4, 4}, rng);
      Tensor p = oracle::random(x.shape(), rng, 0.05, 0.95);
      CHECK(grad_check([&](const Var& v) { return seg_loss(v, x); }, p).max_rel_error < 1e-6);

      auto grad_of = [&](Var (*fn)(const Var&, const Tensor&)) {
        Tape t;
        Var v = t.leaf(p);
        t.backward(fn(v, x));
        return *t.grad(v);
      };
      Tensor gs = grad_of(seg_loss), gb = grad_of(bce_loss), gj = grad_of(jaccard_loss);
      for (std::size_t i = 0; i < p.numel(); ++i) CHECK(gs[i] == doctest::Approx(gb[i] + gj[i]).epsilon(1e-13));
    }
  }
  TEST_CASE("gradient descent decreases the loss") {
    std::mt19937_64 rng(3);
    Tensor x = binary({1, 1, 6, 6}, rng);
    Tensor p = oracle::random(x.shape(), rng, 0.2, 0.8);
    Tape t;
    Var v = t.leaf(p);
    Var l = seg_loss(v, x);
    t.backward(l);
    Tensor next = p;
    for (std::size_t i = 0; i < p.numel(); ++i) next[i] -= Scalar(1e-3) * (*t.grad(v))[i];
    CHECK(loss_value(seg_loss, next, x) < l.value().item());
  }
}

TEST_SUITE("confusion and metrics") {
  TEST_CASE("examples") {
    std::vector<Scalar> pred{1, 1, 0, 0}, gt{1, 0, 1, 0};
    ConfusionCounts c = confusion(pred, gt);
    CHECK(c.tp == 1);
    CHECK(c.fp == 1);
    CHECK(c.fn == 1);
    CHECK(c.tn == 1);
    Metrics m = metrics(c);
    CHECK(m.se == 0.5);
    CHECK(m.sp == 0.5);
    CHECK(m.ac == 0.5);
    CHECK(m.di == 0.5);
    CHECK(m.ja == doctest::Approx(1.0 / 3.0).epsilon(1e-15));

    ConfusionCounts same = confusion(gt, gt);
    CHECK(same.fp == 0);
    CHECK(same.fn == 0);
    Metrics perfect = metrics(same);
    for (double v : {perfect.se, perfect.sp, perfect.ac, perfect.di, perfect.ja}) CHECK(v == 1.0);

    std::vector<Scalar> tie{0.5};
    CHECK(confusion(tie, std::vector<Scalar>{0}).fp == 1);
  }

  TEST_CASE("undefined ratios") {
    Metrics empty = metrics(ConfusionCounts{0, 0, 10, 0});
    CHECK(empty.se == 1.0);
    CHECK(empty.di == 1.0);
    CHECK(empty.ja == 1.0);
    Metrics miss = metrics(ConfusionCounts{0, 3, 7, 0});
    CHECK(miss.se == 0.0);  // truth has no positives but the prediction does
    CHECK(miss.di == 0.0);
    CHECK(miss.ja == 0.0);
  }

  TEST_CASE("counts equal brute force on random 16x16 masks") {
    std::mt19937_64 rng(4);
    std::uniform_real_distribution<double> u(0, 1);
    for (int t = 0; t < 1000; ++t) {
      const double density = u(rng);
      std::vector<Scalar> pred(256), gt(256);
      std::vector<std::uint8_t> gt8(256);
      for (int i = 0; i < 256; ++i) {
        pred[i] = static_cast<Scalar>(u(rng) < density ? u(rng) * 0.5 + 0.5 : u(rng) * 0.5);
        gt[i] = u(rng) < density ? 1 : 0;
        gt8[i] = static_cast<std::uint8_t>(gt[i]);
      }
      ConfusionCounts c = confusion(pred, gt);
      CHECK(c.total() == 256);
      Metrics a = metrics(c), b = brute(pred, gt);
      CHECK(a.se == b.se);
      CHECK(a.sp == b.sp);
      CHECK(a.ac == b.ac);
      CHECK(a.di == b.di);
      CHECK(a.ja == b.ja);
      Metrics c8 = metrics(confusion(pred, gt8));
      CHECK(c8.di == a.di);
      CHECK(std::abs(a.di - 2 * a.ja / (1 + a.ja)) < 1e-12);
    }
  }
}

TEST_SUITE("report") {
  TEST_CASE("csv layout and mean row") {
    MetricReport r;
    r.rows.push_back({"a", {1, 0.5, 0.75, 0.25, 0.125}});
    r.rows.push_back({"b", {0, 0.5, 0.25, 0.75, 0.875}});
    const std::string csv = r.to_csv();
    CHECK(csv ==
          "image,SE,SP,AC,DI,JA\n"
          "a,1.0000,0.5000,0.7500,0.2500,0.1250\n"
          "b,0.0000,0.5000,0.2500,0.7500,0.8750\n"
          "MEAN,0.5000,0.5000,0.5000,0.5000,0.5000\n");
    CHECK(std::count(csv.begin(), csv.end(), '\n') == 4);
  }

  TEST_CASE("mean is the unweighted per-image mean and order-invariant") {
    std::mt19937_64 rng(5);
    std::uniform_real_distribution<double> u(0, 1);
    MetricReport r;
    for (int i = 0; i < 37; ++i) r.rows.push_back({std::to_string(i), {u(rng), u(rng), u(rng), u(rng), u(rng)}});
    const Metrics m = r.mean();
    double se = 0;
    for (const auto& row : r.rows) se += row.second.se;
    CHECK(m.se == doctest::Approx(se / 37).epsilon(1e-14));
    for (int k = 0; k < 10; ++k) {
      std::shuffle(r.rows.begin(), r.rows.end(), rng);
      const Metrics p = r.mean();
      CHECK(p.se == m.se);
      CHECK(p.sp == m.sp);
      CHECK(p.ac == m.ac);
      CHECK(p.di == m.di);
      CHECK(p.ja == m.ja);
    }
  }

  TEST_CASE("format") {
    CHECK(format_metric(0.93456) == "0.9346");
    CHECK(format_metric(1) == "1.0000");
  }
}
