#pragma once

#include <cstddef>
#include <cstdint>
#include <initializer_list>
#include <random>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace cascn {

#ifdef CASCN_SINGLE_PRECISION
using Scalar = float;
#else
using Scalar = double;
#endif

// Error taxonomy shared by every module. The C API maps each to an error code.
struct Error : std::runtime_error {
  using std::runtime_error::runtime_error;
};
struct DimensionError : Error {
  using Error::Error;
};
struct ConfigError : Error {
  using Error::Error;
};
struct ContractError : Error {
  using Error::Error;
};
struct IoError : Error {
  using Error::Error;
};
struct LoadError : Error {
  using Error::Error;
};
struct NumericalError : Error {
  using Error::Error;
};

class Shape {
 public:
  Shape() = default;
  Shape(std::initializer_list<int> dims);
  explicit Shape(std::vector<int> dims);

  int rank() const { return static_cast<int>(dims_.size()); }
  int operator[](int axis) const { return dims_.at(static_cast<std::size_t>(axis)); }
  std::size_t numel() const;
  const std::vector<int>& dims() const { return dims_; }
  std::string str() const;

  friend bool operator==(const Shape&, const Shape&) = default;

 private:
  std::vector<int> dims_;
};

/// Dense row-major tensor. 4-D tensors are laid out batch x channel x height x width.
class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(Shape shape, Scalar fill = Scalar(0));
  Tensor(Shape shape, std::vector<Scalar> data);

  static Tensor zeros(Shape shape) { return Tensor(std::move(shape)); }
  static Tensor full(Shape shape, Scalar v) { return Tensor(std::move(shape), v); }
  static Tensor scalar(Scalar v) { return Tensor(Shape{1}, v); }
  // Uniform in [lo, hi).
  static Tensor uniform(Shape shape, std::mt19937_64& rng, Scalar lo = -1, Scalar hi = 1);
  static Tensor normal(Shape shape, std::mt19937_64& rng, Scalar stddev = 1);

  const Shape& shape() const { return shape_; }
  int dim(int axis) const { return shape_[axis]; }
  int rank() const { return shape_.rank(); }
  std::size_t numel() const { return data_.size(); }
  bool empty() const { return data_.empty(); }

  Scalar* data() { return data_.data(); }
  const Scalar* data() const { return data_.data(); }
  std::span<Scalar> span() { return data_; }
  std::span<const Scalar> span() const { return data_; }
  std::vector<Scalar>& vec() { return data_; }
  const std::vector<Scalar>& vec() const { return data_; }

  Scalar& operator[](std::size_t i) { return data_[i]; }
  Scalar operator[](std::size_t i) const { return data_[i]; }

  // 4-D accessors (NCHW).
  Scalar& at(int n, int c, int h, int w) { return data_[offset(n, c, h, w)]; }
  Scalar at(int n, int c, int h, int w) const { return data_[offset(n, c, h, w)]; }

  Scalar item() const;
  Tensor reshaped(Shape shape) const;

  bool all_finite() const;

 private:
  std::size_t offset(int n, int c, int h, int w) const {
    return ((static_cast<std::size_t>(n) * shape_[1] + c) * shape_[2] + h) * shape_[3] + w;
  }

  Shape shape_;
  std::vector<Scalar> data_;
};

// Require a rank-4 tensor and return (N, C, H, W).
struct Dims4 {
  int n, c, h, w;
};
Dims4 dims4(const Tensor& t, const char* what);

Scalar dot(const Tensor& a, const Tensor& b);
Scalar max_abs_diff(const Tensor& a, const Tensor& b);
bool bitwise_equal(const Tensor& a, const Tensor& b);

// Global runtime switches. Debug checks verify finiteness after every op on
// finite input; determinism pins reduction order (kernels are already
// sequential per output element, so this only restricts threading).
void set_debug_checks(bool on);
bool debug_checks();
void set_deterministic(bool on);
bool deterministic();

}  // namespace cascn
