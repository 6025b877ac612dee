#include "cascn/autodiff.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <optional>

namespace cascn {

Var::Var(Tensor value) : value_(std::make_shared<const Tensor>(std::move(value))) {}

Var Var::view(const Tensor& t) {
  Var v;
  v.value_ = std::shared_ptr<const Tensor>(std::shared_ptr<const Tensor>(), &t);
  return v;
}

int Tape::new_id(bool leaf) {
  leaf_flags_.push_back(leaf);
  return static_cast<int>(leaf_flags_.size()) - 1;
}

Var Tape::leaf(Tensor value) {
  Var v(std::move(value));
  v.tape_ = this;
  v.id_ = new_id(true);
  return v;
}

Var Tape::watch(Parameter& p) {
  if (auto it = watched_.find(&p); it != watched_.end()) return it->second;
  // Parameters outlive any tape that watches them.
  Var v = Var::view(p.value);
  v.tape_ = this;
  v.id_ = new_id(true);
  watched_.emplace(&p, v);
  return v;
}

Var Tape::record(std::string op, Tensor out, const std::vector<Var>& inputs, BackwardFn fn) {
  Var v(std::move(out));
  v.tape_ = this;
  v.id_ = new_id(false);
  OpNode node;
  node.op = std::move(op);
  node.output = v.id_;
  node.inputs.reserve(inputs.size());
  for (const Var& in : inputs) node.inputs.push_back(in.tracked() ? in.id_ : -1);
  node.backward = std::move(fn);
  nodes_.push_back(std::move(node));
  return v;
}

void Tape::backward(const Var& loss) {
  if (!loss.defined() || loss.value().numel() != 1) {
    throw ContractError("backward: loss must be a scalar tensor, got " +
                        (loss.defined() ? loss.shape().str() : std::string("undefined")));
  }
  if (loss.tape_ != this) throw ContractError("backward: loss was not recorded on this tape");
  grads_.assign(leaf_flags_.size(), Tensor());
  grads_[static_cast<std::size_t>(loss.id_)] = Tensor(loss.shape(), Scalar(1));

  for (auto it = nodes_.rbegin(); it != nodes_.rend(); ++it) {
    Tensor& gout = grads_[static_cast<std::size_t>(it->output)];
    if (gout.empty()) continue;
    GradSlots slots;
    slots.grads.resize(it->inputs.size());
    slots.needs.resize(it->inputs.size());
    bool any = false;
    for (std::size_t i = 0; i < it->inputs.size(); ++i) {
      slots.needs[i] = it->inputs[i] >= 0;
      any = any || slots.needs[i];
    }
    if (any) it->backward(gout, slots);
    for (std::size_t i = 0; i < it->inputs.size(); ++i) {
      if (!slots.needs[i] || slots.grads[i].empty()) continue;
      Tensor& dst = grads_[static_cast<std::size_t>(it->inputs[i])];
      if (dst.empty()) {
        dst = std::move(slots.grads[i]);
      } else {
        for (std::size_t k = 0; k < dst.numel(); ++k) dst[k] += slots.grads[i][k];
      }
    }
    // Intermediate gradients are released once propagated.
    if (!leaf_flags_[static_cast<std::size_t>(it->output)]) gout = Tensor();
  }
}

const Tensor* Tape::grad(const Var& v) const {
  if (v.tape_ != this || v.id_ < 0 || static_cast<std::size_t>(v.id_) >= grads_.size()) return nullptr;
  const Tensor& g = grads_[static_cast<std::size_t>(v.id_)];
  return g.empty() ? nullptr : &g;
}

void Tape::accumulate_parameter_grads() const {
  for (const auto& [param, var] : watched_) {
    const Tensor* g = grad(var);
    if (!g) continue;
    if (param->grad.shape() != param->value.shape()) param->grad = Tensor(param->value.shape());
    for (std::size_t i = 0; i < g->numel(); ++i) param->grad[i] += (*g)[i];
  }
}

Var Context::param(Parameter& p) const {
  if (tape) return tape->watch(p);
  return Var::view(p.value);
}

namespace {

struct PatternState {
  enum class Mode { Off, Record, Replay } mode = Mode::Off;
  std::vector<std::vector<std::uint8_t>> masks;
  std::vector<std::vector<std::size_t>> argmaxes;
  std::size_t next_mask = 0, next_argmax = 0;
};

thread_local PatternState g_pattern;

// Returns the mask to apply, recording or replaying as configured.
std::vector<std::uint8_t> relu_mask(const Tensor& x) {
  if (g_pattern.mode == PatternState::Mode::Replay) {
    if (g_pattern.next_mask >= g_pattern.masks.size() || g_pattern.masks[g_pattern.next_mask].size() != x.numel())
      throw ContractError("frozen pattern replay out of sync (relu)");
    return g_pattern.masks[g_pattern.next_mask++];
  }
  std::vector<std::uint8_t> m(x.numel());
  for (std::size_t i = 0; i < m.size(); ++i) m[i] = !(x[i] <= 0);  // NaN passes through
  if (g_pattern.mode == PatternState::Mode::Record) g_pattern.masks.push_back(m);
  return m;
}

// Replays a recorded argmax by gathering from x, or records the fresh one.
void pool_pattern(const Tensor& x, kernels::PoolResult& r) {
  if (g_pattern.mode == PatternState::Mode::Replay) {
    if (g_pattern.next_argmax >= g_pattern.argmaxes.size() ||
        g_pattern.argmaxes[g_pattern.next_argmax].size() != r.argmax.size())
      throw ContractError("frozen pattern replay out of sync (max pool)");
    r.argmax = g_pattern.argmaxes[g_pattern.next_argmax++];
    for (std::size_t i = 0; i < r.argmax.size(); ++i) r.y[i] = x[r.argmax[i]];
  } else if (g_pattern.mode == PatternState::Mode::Record) {
    g_pattern.argmaxes.push_back(r.argmax);
  }
}

}  // namespace

PatternFreeze::PatternFreeze() {
  if (g_pattern.mode != PatternState::Mode::Off) throw ContractError("PatternFreeze already active on this thread");
  g_pattern = PatternState{};
  g_pattern.mode = PatternState::Mode::Record;
}

PatternFreeze::~PatternFreeze() { g_pattern = PatternState{}; }

void PatternFreeze::replay() {
  g_pattern.mode = PatternState::Mode::Replay;
  g_pattern.next_mask = g_pattern.next_argmax = 0;
}

namespace ad {

namespace {

Tape* tape_of(std::initializer_list<const Var*> vars) {
  Tape* t = nullptr;
  for (const Var* v : vars) {
    if (!v->defined() || !v->tracked()) continue;
    if (t && t != v->tape()) throw ContractError("inputs recorded on different tapes");
    t = v->tape();
  }
  return t;
}

Tape* tape_of(const std::vector<Var>& vars) {
  Tape* t = nullptr;
  for (const Var& v : vars) {
    if (!v.tracked()) continue;
    if (t && t != v.tape()) throw ContractError("inputs recorded on different tapes");
    t = v.tape();
  }
  return t;
}

void debug_check(const char* op, const Tensor& out, std::initializer_list<const Var*> inputs) {
  if (!debug_checks() || out.all_finite()) return;
  for (const Var* v : inputs) {
    if (v->defined() && !v->value().all_finite()) return;
  }
  throw NumericalError(std::string(op) + ": non-finite output from finite input");
}

Var finish(const char* op, Tensor out, std::vector<Var> inputs, BackwardFn fn) {
  Tape* t = tape_of(inputs);
  if (!t) return Var(std::move(out));
  return t->record(op, std::move(out), inputs, std::move(fn));
}

}  // namespace

Var conv2d(const Var& x, const Var& w, const Var& bias, const ConvParams& p) {
  Tensor y = kernels::conv2d(x.value(), w.value(), bias.defined() ? &bias.value() : nullptr, p);
  debug_check("conv2d", y, {&x, &w, &bias});
  if (!tape_of({&x, &w, &bias})) return Var(std::move(y));
  std::vector<Var> ins{x, w};
  if (bias.defined()) ins.push_back(bias);
  return finish("conv2d", std::move(y), ins, [x, w, p](const Tensor& gy, GradSlots& s) {
    if (s.needs[0]) s.grads[0] = kernels::conv2d_backward_input(gy, w.value(), x.shape(), p);
    if (s.needs[1]) s.grads[1] = kernels::conv2d_backward_weight(gy, x.value(), w.shape(), p);
    if (s.needs.size() > 2 && s.needs[2]) s.grads[2] = kernels::channel_sum(gy);
  });
}

Var depthwise_conv2d(const Var& x, const Var& w, int stride, int padding, int dilation) {
  auto d = dims4(x.value(), "depthwise_conv2d");
  if (w.value().rank() != 4 || w.dim(1) != 1) {
    throw DimensionError("depthwise_conv2d: weight must be [C, 1, K, K], got " + w.shape().str());
  }
  if (w.dim(0) != d.c) {
    throw DimensionError("depthwise_conv2d: weight axis 0 has " + std::to_string(w.dim(0)) +
                         " kernels but input channel axis 1 has " + std::to_string(d.c));
  }
  ConvParams p{stride, padding, dilation, d.c};
  Tensor y = kernels::conv2d(x.value(), w.value(), nullptr, p, kernels::ConvPath::Direct);
  debug_check("depthwise_conv2d", y, {&x, &w});
  return finish("depthwise_conv2d", std::move(y), {x, w}, [x, w, p](const Tensor& gy, GradSlots& s) {
    if (s.needs[0]) s.grads[0] = kernels::conv2d_backward_input(gy, w.value(), x.shape(), p, kernels::ConvPath::Direct);
    if (s.needs[1]) s.grads[1] = kernels::conv2d_backward_weight(gy, x.value(), w.shape(), p, kernels::ConvPath::Direct);
  });
}

Var pointwise_conv(const Var& x, const Var& w, const Var& bias) {
  if (w.value().rank() != 4 || w.dim(2) != 1 || w.dim(3) != 1) {
    throw DimensionError("pointwise_conv: weight must be [M, C, 1, 1], got " + w.shape().str());
  }
  return conv2d(x, w, bias, ConvParams{});
}

Var transposed_conv2d(const Var& x, const Var& w, const Var& bias) {
  Tensor y = kernels::transposed_conv2d(x.value(), w.value(), bias.defined() ? &bias.value() : nullptr);
  debug_check("transposed_conv2d", y, {&x, &w, &bias});
  std::vector<Var> ins{x, w};
  if (bias.defined()) ins.push_back(bias);
  return finish("transposed_conv2d", std::move(y), ins, [x, w](const Tensor& gy, GradSlots& s) {
    if (s.needs[0]) s.grads[0] = kernels::transposed_conv2d_backward_input(gy, w.value());
    if (s.needs[1]) s.grads[1] = kernels::transposed_conv2d_backward_weight(gy, x.value());
    if (s.needs.size() > 2 && s.needs[2]) s.grads[2] = kernels::channel_sum(gy);
  });
}

Var maxpool2d(const Var& x, int window, int stride, int padding) {
  auto r = kernels::maxpool2d(x.value(), window, stride, padding);
  pool_pattern(x.value(), r);
  if (!x.tracked()) return Var(std::move(r.y));
  auto argmax = std::make_shared<std::vector<std::size_t>>(std::move(r.argmax));
  Shape xs = x.shape();
  return finish("maxpool2d", std::move(r.y), {x}, [argmax, xs](const Tensor& gy, GradSlots& s) {
    s.grads[0] = kernels::maxpool2d_backward(gy, *argmax, xs);
  });
}

Var avgpool2d(const Var& x, int window) {
  Tensor y = kernels::avgpool2d(x.value(), window);
  Shape xs = x.shape();
  return finish("avgpool2d", std::move(y), {x}, [window, xs](const Tensor& gy, GradSlots& s) {
    s.grads[0] = kernels::avgpool2d_backward(gy, window, xs);
  });
}

Var global_avg_pool(const Var& x) {
  Tensor y = kernels::global_avg_pool(x.value());
  Shape xs = x.shape();
  return finish("global_avg_pool", std::move(y), {x}, [xs](const Tensor& gy, GradSlots& s) {
    s.grads[0] = kernels::global_avg_pool_backward(gy, xs);
  });
}

Var global_max_pool(const Var& x) {
  auto r = kernels::global_max_pool(x.value());
  pool_pattern(x.value(), r);
  if (!x.tracked()) return Var(std::move(r.y));
  auto argmax = std::make_shared<std::vector<std::size_t>>(std::move(r.argmax));
  Shape xs = x.shape();
  return finish("global_max_pool", std::move(r.y), {x}, [argmax, xs](const Tensor& gy, GradSlots& s) {
    s.grads[0] = kernels::global_max_pool_backward(gy, *argmax, xs);
  });
}

Var conv1d_channels(const Var& v, const Var& w) {
  Tensor y = kernels::conv1d_channels(v.value(), w.value());
  return finish("conv1d_channels", std::move(y), {v, w}, [v, w](const Tensor& gy, GradSlots& s) {
    if (s.needs[0]) s.grads[0] = kernels::conv1d_channels_backward_input(gy, w.value());
    if (s.needs[1]) s.grads[1] = kernels::conv1d_channels_backward_weight(gy, v.value(), w.dim(0));
  });
}

Var batchnorm2d(const Var& x, const Var& gamma, const Var& beta, BatchNormBuffers& buffers, Mode mode,
                Scalar momentum, Scalar eps) {
  if (mode == Mode::Eval) {
    Tensor y = kernels::batchnorm_eval(x.value(), gamma.value(), beta.value(), buffers.running_mean,
                                       buffers.running_var, eps);
    debug_check("batchnorm2d", y, {&x, &gamma, &beta});
    if (!tape_of({&x, &gamma, &beta})) return Var(std::move(y));
    Tensor rm = buffers.running_mean, rv = buffers.running_var;
    return finish("batchnorm2d", std::move(y), {x, gamma, beta},
                  [x, gamma, rm, rv, eps](const Tensor& gy, GradSlots& s) {
                    auto g = kernels::batchnorm_eval_backward(gy, x.value(), gamma.value(), rm, rv, eps);
                    s.grads[0] = std::move(g.dx);
                    s.grads[1] = std::move(g.dgamma);
                    s.grads[2] = std::move(g.dbeta);
                  });
  }
  auto saved = std::make_shared<kernels::BatchNormSaved>();
  Tensor y = kernels::batchnorm_train(x.value(), gamma.value(), beta.value(), buffers.running_mean,
                                      buffers.running_var, momentum, eps, saved.get());
  debug_check("batchnorm2d", y, {&x, &gamma, &beta});
  if (!tape_of({&x, &gamma, &beta})) return Var(std::move(y));
  return finish("batchnorm2d", std::move(y), {x, gamma, beta}, [gamma, saved](const Tensor& gy, GradSlots& s) {
    auto g = kernels::batchnorm_train_backward(gy, gamma.value(), *saved);
    s.grads[0] = std::move(g.dx);
    s.grads[1] = std::move(g.dgamma);
    s.grads[2] = std::move(g.dbeta);
  });
}

Var relu(const Var& x) {
  Tensor y(x.shape());
  const Tensor& xv = x.value();
  auto mask = std::make_shared<std::vector<std::uint8_t>>(relu_mask(xv));
  for (std::size_t i = 0; i < y.numel(); ++i) y[i] = (*mask)[i] ? xv[i] : Scalar(0);
  return finish("relu", std::move(y), {x}, [mask](const Tensor& gy, GradSlots& s) {
    Tensor g(gy.shape());
    for (std::size_t i = 0; i < g.numel(); ++i) g[i] = (*mask)[i] ? gy[i] : Scalar(0);
    s.grads[0] = std::move(g);
  });
}

Var sigmoid(const Var& x) {
  Tensor y(x.shape());
  const Tensor& xv = x.value();
  for (std::size_t i = 0; i < y.numel(); ++i) {
    Scalar v = xv[i];
    // Branches avoid overflow of exp for large |v|.
    y[i] = v >= 0 ? Scalar(1) / (Scalar(1) + std::exp(-v)) : std::exp(v) / (Scalar(1) + std::exp(v));
  }
  auto out = std::make_shared<Tensor>(y);
  return finish("sigmoid", std::move(y), {x}, [out](const Tensor& gy, GradSlots& s) {
    Tensor g(gy.shape());
    for (std::size_t i = 0; i < g.numel(); ++i) g[i] = gy[i] * (*out)[i] * (Scalar(1) - (*out)[i]);
    s.grads[0] = std::move(g);
  });
}

Var add(const Var& a, const Var& b) {
  if (a.shape() != b.shape()) {
    throw DimensionError("add: shape mismatch " + a.shape().str() + " vs " + b.shape().str());
  }
  Tensor y(a.shape());
  for (std::size_t i = 0; i < y.numel(); ++i) y[i] = a.value()[i] + b.value()[i];
  return finish("add", std::move(y), {a, b}, [](const Tensor& gy, GradSlots& s) {
    if (s.needs[0]) s.grads[0] = gy;
    if (s.needs[1]) s.grads[1] = gy;
  });
}

Var mul(const Var& a, const Var& b) {
  if (a.shape() != b.shape()) {
    throw DimensionError("mul: shape mismatch " + a.shape().str() + " vs " + b.shape().str());
  }
  Tensor y(a.shape());
  for (std::size_t i = 0; i < y.numel(); ++i) y[i] = a.value()[i] * b.value()[i];
  return finish("mul", std::move(y), {a, b}, [a, b](const Tensor& gy, GradSlots& s) {
    if (s.needs[0]) {
      Tensor g(gy.shape());
      for (std::size_t i = 0; i < g.numel(); ++i) g[i] = gy[i] * b.value()[i];
      s.grads[0] = std::move(g);
    }
    if (s.needs[1]) {
      Tensor g(gy.shape());
      for (std::size_t i = 0; i < g.numel(); ++i) g[i] = gy[i] * a.value()[i];
      s.grads[1] = std::move(g);
    }
  });
}

Var concat_channels(const std::vector<Var>& xs) {
  std::vector<const Tensor*> raw;
  raw.reserve(xs.size());
  for (const Var& v : xs) raw.push_back(&v.value());
  Tensor y = kernels::concat_channels(raw);
  std::vector<int> widths;
  for (const Var& v : xs) widths.push_back(v.dim(1));
  return finish("concat_channels", std::move(y), xs, [widths](const Tensor& gy, GradSlots& s) {
    int begin = 0;
    for (std::size_t i = 0; i < widths.size(); ++i) {
      if (s.needs[i]) s.grads[i] = kernels::slice_channels(gy, begin, widths[i]);
      begin += widths[i];
    }
  });
}

Var scale_channels(const Var& x, const Var& scale) {
  Tensor y = kernels::scale_channels(x.value(), scale.value());
  return finish("scale_channels", std::move(y), {x, scale}, [x, scale](const Tensor& gy, GradSlots& s) {
    if (s.needs[0]) s.grads[0] = kernels::scale_channels(gy, scale.value());
    if (s.needs[1]) {
      auto d = dims4(gy, "scale_channels_backward");
      const std::size_t plane = static_cast<std::size_t>(d.h) * d.w;
      Tensor g(scale.shape());
      for (std::size_t nc = 0; nc < g.numel(); ++nc) {
        Scalar acc = 0;
        for (std::size_t i = 0; i < plane; ++i) acc += gy[nc * plane + i] * x.value()[nc * plane + i];
        g[nc] = acc;
      }
      s.grads[1] = std::move(g);
    }
  });
}

Var broadcast_spatial(const Var& v, int h, int w) {
  Tensor y = kernels::broadcast_spatial(v.value(), h, w);
  return finish("broadcast_spatial", std::move(y), {v}, [](const Tensor& gy, GradSlots& s) {
    auto d = dims4(gy, "broadcast_spatial_backward");
    const std::size_t plane = static_cast<std::size_t>(d.h) * d.w;
    Tensor g(Shape{d.n, d.c});
    for (std::size_t nc = 0; nc < g.numel(); ++nc) {
      Scalar acc = 0;
      for (std::size_t i = 0; i < plane; ++i) acc += gy[nc * plane + i];
      g[nc] = acc;
    }
    s.grads[0] = std::move(g);
  });
}

Var sum(const Var& x) {
  Scalar acc = 0;
  for (Scalar v : x.value().vec()) acc += v;
  Shape xs = x.shape();
  return finish("sum", Tensor::scalar(acc), {x}, [xs](const Tensor& gy, GradSlots& s) {
    s.grads[0] = Tensor(xs, gy[0]);
  });
}

}  // namespace ad

double relative_error(double a, double b) {
  return std::abs(a - b) / std::max({std::abs(a), std::abs(b), 1e-8});
}

namespace {
std::vector<std::size_t> pick_coords(std::size_t n, std::size_t max_coords, std::mt19937_64& rng) {
  std::vector<std::size_t> idx(n);
  std::iota(idx.begin(), idx.end(), std::size_t{0});
  if (max_coords == 0 || max_coords >= n) return idx;
  std::shuffle(idx.begin(), idx.end(), rng);
  idx.resize(max_coords);
  std::sort(idx.begin(), idx.end());
  return idx;
}
}  // namespace

GradCheckResult grad_check(const std::function<Var(const Var&)>& f, const Tensor& x, double eps,
                           std::size_t max_coords, std::uint64_t seed) {
  Tape tape;
  Var xv = tape.leaf(x);
  Var y = f(xv);
  tape.backward(y);
  const Tensor* g = tape.grad(xv);
  Tensor analytic = g ? *g : Tensor(x.shape());

  std::mt19937_64 rng(seed);
  GradCheckResult r;
  Tensor probe = x;
  for (std::size_t i : pick_coords(x.numel(), max_coords, rng)) {
    const Scalar orig = probe[i];
    probe[i] = orig + static_cast<Scalar>(eps);
    double fp = f(Var(probe)).value().item();
    probe[i] = orig - static_cast<Scalar>(eps);
    double fm = f(Var(probe)).value().item();
    probe[i] = orig;
    double numeric = (fp - fm) / (2 * eps);
    r.max_rel_error = std::max(r.max_rel_error, relative_error(analytic[i], numeric));
    ++r.checked;
  }
  return r;
}

GradCheckResult grad_check_parameters(const std::function<Var(const Context&)>& loss,
                                      const std::vector<Parameter*>& params, Mode mode,
                                      const GradCheckOptions& opt) {
  std::optional<PatternFreeze> freeze;
  if (opt.freeze_pattern) freeze.emplace();
  std::vector<Tensor> analytic;
  {
    Tape tape;
    Context ctx{&tape, mode};
    Var l = loss(ctx);
    tape.backward(l);
    for (Parameter* p : params) {
      Var v = tape.watch(*p);
      const Tensor* g = tape.grad(v);
      analytic.push_back(g ? *g : Tensor(p->value.shape()));
    }
  }
  auto eval = [&] {
    if (freeze) freeze->replay();
    return static_cast<double>(loss(Context{nullptr, mode}).value().item());
  };
  std::mt19937_64 rng(opt.seed);
  GradCheckResult r;
  for (std::size_t k = 0; k < params.size(); ++k) {
    Parameter& p = *params[k];
    for (std::size_t i : pick_coords(p.value.numel(), opt.coords_per_param, rng)) {
      const Scalar orig = p.value[i];
      auto central = [&](double h) {
        p.value[i] = orig + static_cast<Scalar>(h);
        const double fp = eval();
        p.value[i] = orig - static_cast<Scalar>(h);
        const double fm = eval();
        p.value[i] = orig;
        return (fp - fm) / (2 * h);
      };
      double numeric = central(opt.eps);
      if (opt.richardson) numeric = (4 * central(opt.eps / 2) - numeric) / 3;
      r.max_rel_error = std::max(r.max_rel_error, relative_error(analytic[k][i], numeric));
      ++r.checked;
    }
  }
  return r;
}

}  // namespace cascn
