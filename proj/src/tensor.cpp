#include "cascn/tensor.hpp"

#include <atomic>
#include <cmath>
#include <cstring>
#include <numeric>

namespace cascn {

namespace {
std::atomic<bool> g_debug_checks{false};
std::atomic<bool> g_deterministic{true};

void validate_dims(const std::vector<int>& dims) {
  for (std::size_t i = 0; i < dims.size(); ++i) {
    if (dims[i] < 1) {
      throw DimensionError("shape axis " + std::to_string(i) + " must be >= 1, got " +
                           std::to_string(dims[i]));
    }
  }
}
}  // namespace

Shape::Shape(std::initializer_list<int> dims) : dims_(dims) { validate_dims(dims_); }

Shape::Shape(std::vector<int> dims) : dims_(std::move(dims)) { validate_dims(dims_); }

std::size_t Shape::numel() const {
  std::size_t n = 1;
  for (int d : dims_) n *= static_cast<std::size_t>(d);
  return dims_.empty() ? 0 : n;
}

std::string Shape::str() const {
  std::string s = "[";
  for (std::size_t i = 0; i < dims_.size(); ++i) {
    if (i) s += "x";
    s += std::to_string(dims_[i]);
  }
  return s + "]";
}

Tensor::Tensor(Shape shape, Scalar fill) : shape_(std::move(shape)), data_(shape_.numel(), fill) {}

Tensor::Tensor(Shape shape, std::vector<Scalar> data) : shape_(std::move(shape)), data_(std::move(data)) {
  if (data_.size() != shape_.numel()) {
    throw DimensionError("tensor data length " + std::to_string(data_.size()) +
                         " does not match shape " + shape_.str());
  }
}

Tensor Tensor::uniform(Shape shape, std::mt19937_64& rng, Scalar lo, Scalar hi) {
  Tensor t(std::move(shape));
  std::uniform_real_distribution<double> dist(lo, hi);
  for (auto& v : t.data_) v = static_cast<Scalar>(dist(rng));
  return t;
}

Tensor Tensor::normal(Shape shape, std::mt19937_64& rng, Scalar stddev) {
  Tensor t(std::move(shape));
  std::normal_distribution<double> dist(0.0, stddev);
  for (auto& v : t.data_) v = static_cast<Scalar>(dist(rng));
  return t;
}

Scalar Tensor::item() const {
  if (data_.size() != 1) {
    throw ContractError("item() on tensor of shape " + shape_.str());
  }
  return data_[0];
}

Tensor Tensor::reshaped(Shape shape) const {
  if (shape.numel() != data_.size()) {
    throw DimensionError("cannot reshape " + shape_.str() + " to " + shape.str());
  }
  return Tensor(std::move(shape), data_);
}

bool Tensor::all_finite() const {
  for (Scalar v : data_) {
    if (!std::isfinite(v)) return false;
  }
  return true;
}

Dims4 dims4(const Tensor& t, const char* what) {
  if (t.rank() != 4) {
    throw DimensionError(std::string(what) + ": expected rank-4 NCHW tensor, got " + t.shape().str());
  }
  return {t.dim(0), t.dim(1), t.dim(2), t.dim(3)};
}

Scalar dot(const Tensor& a, const Tensor& b) {
  if (a.numel() != b.numel()) {
    throw DimensionError("dot: size mismatch " + a.shape().str() + " vs " + b.shape().str());
  }
  double s = 0;
  for (std::size_t i = 0; i < a.numel(); ++i) s += double(a[i]) * double(b[i]);
  return static_cast<Scalar>(s);
}

Scalar max_abs_diff(const Tensor& a, const Tensor& b) {
  if (!(a.shape() == b.shape())) {
    throw DimensionError("max_abs_diff: shape mismatch " + a.shape().str() + " vs " + b.shape().str());
  }
  Scalar m = 0;
  for (std::size_t i = 0; i < a.numel(); ++i) m = std::max(m, std::abs(a[i] - b[i]));
  return m;
}

bool bitwise_equal(const Tensor& a, const Tensor& b) {
  return a.shape() == b.shape() &&
         std::memcmp(a.data(), b.data(), a.numel() * sizeof(Scalar)) == 0;
}

void set_debug_checks(bool on) { g_debug_checks = on; }
bool debug_checks() { return g_debug_checks; }
void set_deterministic(bool on) { g_deterministic = on; }
bool deterministic() { return g_deterministic; }

}  // namespace cascn
