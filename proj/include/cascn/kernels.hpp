#pragma once

// Raw forward and backward kernels on plain tensors. The differentiable
// wrappers in autodiff.hpp record these on a tape; tests call them directly
// for adjoint and equivalence checks.

#include <string>
#include <string_view>
#include <vector>

#include "cascn/tensor.hpp"

namespace cascn::kernels {

// C = alpha * op(A) * op(B) + beta * C, row-major, op = transpose when flagged.
void gemm(bool trans_a, bool trans_b, int m, int n, int k, Scalar alpha, const Scalar* a, int lda,
          const Scalar* b, int ldb, Scalar beta, Scalar* c, int ldc);

struct ConvParams {
  int stride = 1;
  int padding = 0;
  int dilation = 1;
  int groups = 1;
};

enum class ConvPath { Im2col, Direct };

int conv_out_extent(int in, int kernel, int stride, int padding, int dilation);

// x: [N, Cin, H, W], w: [Cout, Cin/groups, K, K], bias: [Cout] or nullptr.
Tensor conv2d(const Tensor& x, const Tensor& w, const Tensor* bias, const ConvParams& p,
              ConvPath path = ConvPath::Im2col);
Tensor conv2d_backward_input(const Tensor& gy, const Tensor& w, const Shape& x_shape, const ConvParams& p,
                             ConvPath path = ConvPath::Im2col);
Tensor conv2d_backward_weight(const Tensor& gy, const Tensor& x, const Shape& w_shape, const ConvParams& p,
                              ConvPath path = ConvPath::Im2col);
// Sum of gy over N, H, W -> [C].
Tensor channel_sum(const Tensor& gy);

// Stride-2, 2x2 transposed convolution. x: [N, Cin, H, W], w: [Cin, Cout, 2, 2].
Tensor transposed_conv2d(const Tensor& x, const Tensor& w, const Tensor* bias);
Tensor transposed_conv2d_backward_input(const Tensor& gy, const Tensor& w);
Tensor transposed_conv2d_backward_weight(const Tensor& gy, const Tensor& x);

struct PoolResult {
  Tensor y;
  std::vector<std::size_t> argmax;  // flat input index per output element (max pooling only)
};

// Max pooling; padded positions never win. Ties resolve to the first position in
// row-major window order. window == stride == 2 with padding 0 requires even H, W.
PoolResult maxpool2d(const Tensor& x, int window, int stride, int padding);
Tensor maxpool2d_backward(const Tensor& gy, const std::vector<std::size_t>& argmax, const Shape& x_shape);
// Non-overlapping average pooling (window == stride); H, W must divide evenly.
Tensor avgpool2d(const Tensor& x, int window);
Tensor avgpool2d_backward(const Tensor& gy, int window, const Shape& x_shape);

// [N, C, H, W] -> [N, C]
Tensor global_avg_pool(const Tensor& x);
PoolResult global_max_pool(const Tensor& x);
Tensor global_avg_pool_backward(const Tensor& gy, const Shape& x_shape);
Tensor global_max_pool_backward(const Tensor& gy, const std::vector<std::size_t>& argmax, const Shape& x_shape);

// Cross-correlation along the channel axis with zero padding (k-1)/2.
// v: [N, C], w: [k] with k odd.
Tensor conv1d_channels(const Tensor& v, const Tensor& w);
Tensor conv1d_channels_backward_input(const Tensor& gy, const Tensor& w);
Tensor conv1d_channels_backward_weight(const Tensor& gy, const Tensor& v, int k);

struct BatchNormSaved {
  Tensor xhat;                   // normalized input
  std::vector<Scalar> inv_std;   // per channel
};

// Train-mode forward: batch statistics over N*H*W per channel. Updates
// running_mean/var in place with the given momentum (unbiased variance).
Tensor batchnorm_train(const Tensor& x, const Tensor& gamma, const Tensor& beta, Tensor& running_mean,
                       Tensor& running_var, Scalar momentum, Scalar eps, BatchNormSaved* saved);
Tensor batchnorm_eval(const Tensor& x, const Tensor& gamma, const Tensor& beta, const Tensor& running_mean,
                      const Tensor& running_var, Scalar eps);
struct BatchNormGrads {
  Tensor dx, dgamma, dbeta;
};
BatchNormGrads batchnorm_train_backward(const Tensor& gy, const Tensor& gamma, const BatchNormSaved& saved);
BatchNormGrads batchnorm_eval_backward(const Tensor& gy, const Tensor& x, const Tensor& gamma,
                                       const Tensor& running_mean, const Tensor& running_var, Scalar eps);

Tensor concat_channels(const std::vector<const Tensor*>& xs);
// Channel slice [begin, begin + count) of a 4-D tensor.
Tensor slice_channels(const Tensor& x, int begin, int count);

// x: [N, C, H, W], s: [N, C] -> x * s broadcast over H, W.
Tensor scale_channels(const Tensor& x, const Tensor& s);
// [N, C] -> [N, C, H, W] by constant broadcast.
Tensor broadcast_spatial(const Tensor& v, int h, int w);

// Fault injection for the self-verification harness. Only names listed in
// known_faults() are accepted.
void set_fault(std::string_view name);
bool fault_active(std::string_view name);
const std::vector<std::string>& known_faults();

}  // namespace cascn::kernels
