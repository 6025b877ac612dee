#include "cascn/kernels.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <mutex>

#include "cascn/parallel.hpp"

namespace cascn::kernels {

namespace {

std::mutex g_fault_mu;
std::string g_fault;

std::string axis_msg(const char* op, const char* axis, int got, int want) {
  return std::string(op) + ": " + axis + " mismatch (got " + std::to_string(got) + ", expected " +
         std::to_string(want) + ")";
}

void gemm_nn_block(int m, int n0, int n1, int k, Scalar alpha, const Scalar* a, int lda, bool trans_a,
                   const Scalar* b, int ldb, Scalar* c, int ldc) {
  for (int i = 0; i < m; ++i) {
    Scalar* crow = c + static_cast<std::size_t>(i) * ldc;
    for (int kk = 0; kk < k; ++kk) {
      Scalar av = trans_a ? a[static_cast<std::size_t>(kk) * lda + i] : a[static_cast<std::size_t>(i) * lda + kk];
      av *= alpha;
      const Scalar* brow = b + static_cast<std::size_t>(kk) * ldb;
      for (int j = n0; j < n1; ++j) crow[j] += av * brow[j];
    }
  }
}

// Columns of the patch matrix for one sample/group: rows (c, kh, kw), cols (oh, ow).
void im2col(const Scalar* x, int cin, int h, int w, int kernel, const ConvParams& p, int ho, int wo,
            Scalar* cols) {
  const std::size_t plane = static_cast<std::size_t>(ho) * wo;
  for (int c = 0; c < cin; ++c) {
    const Scalar* xc = x + static_cast<std::size_t>(c) * h * w;
    for (int kh = 0; kh < kernel; ++kh) {
      for (int kw = 0; kw < kernel; ++kw) {
        Scalar* row = cols + ((static_cast<std::size_t>(c) * kernel + kh) * kernel + kw) * plane;
        for (int oh = 0; oh < ho; ++oh) {
          int ih = oh * p.stride - p.padding + kh * p.dilation;
          Scalar* out = row + static_cast<std::size_t>(oh) * wo;
          if (ih < 0 || ih >= h) {
            std::fill(out, out + wo, Scalar(0));
            continue;
          }
          const Scalar* xrow = xc + static_cast<std::size_t>(ih) * w;
          for (int ow = 0; ow < wo; ++ow) {
            int iw = ow * p.stride - p.padding + kw * p.dilation;
            out[ow] = (iw >= 0 && iw < w) ? xrow[iw] : Scalar(0);
          }
        }
      }
    }
  }
}

void col2im(const Scalar* cols, int cin, int h, int w, int kernel, const ConvParams& p, int ho, int wo,
            Scalar* dx) {
  const std::size_t plane = static_cast<std::size_t>(ho) * wo;
  for (int c = 0; c < cin; ++c) {
    Scalar* dxc = dx + static_cast<std::size_t>(c) * h * w;
    for (int kh = 0; kh < kernel; ++kh) {
      for (int kw = 0; kw < kernel; ++kw) {
        const Scalar* row = cols + ((static_cast<std::size_t>(c) * kernel + kh) * kernel + kw) * plane;
        for (int oh = 0; oh < ho; ++oh) {
          int ih = oh * p.stride - p.padding + kh * p.dilation;
          if (ih < 0 || ih >= h) continue;
          Scalar* dxrow = dxc + static_cast<std::size_t>(ih) * w;
          const Scalar* in = row + static_cast<std::size_t>(oh) * wo;
          for (int ow = 0; ow < wo; ++ow) {
            int iw = ow * p.stride - p.padding + kw * p.dilation;
            if (iw >= 0 && iw < w) dxrow[iw] += in[ow];
          }
        }
      }
    }
  }
}

struct ConvGeom {
  int n, cin, h, w, cout, cin_g, cout_g, kernel, ho, wo;
};

ConvGeom conv_geometry(const Shape& xs, const Shape& ws, const ConvParams& p, const char* op) {
  if (xs.rank() != 4) throw DimensionError(std::string(op) + ": input must be rank 4, got " + xs.str());
  if (ws.rank() != 4) throw DimensionError(std::string(op) + ": weight must be rank 4, got " + ws.str());
  if (p.stride < 1 || p.dilation < 1 || p.padding < 0 || p.groups < 1) {
    throw DimensionError(std::string(op) + ": stride and dilation must be >= 1, padding >= 0");
  }
  ConvGeom g{};
  g.n = xs[0];
  g.cin = xs[1];
  g.h = xs[2];
  g.w = xs[3];
  g.cout = ws[0];
  g.kernel = ws[2];
  if (ws[2] != ws[3]) throw DimensionError(std::string(op) + ": kernel must be square, got " + ws.str());
  if (p.padding > 0 && g.kernel % 2 == 0) {
    throw DimensionError(std::string(op) + ": padded convolution needs an odd kernel, got " +
                         std::to_string(g.kernel));
  }
  if (g.cin % p.groups != 0) throw DimensionError(axis_msg(op, "input channel axis (groups)", g.cin, p.groups));
  if (g.cout % p.groups != 0) throw DimensionError(axis_msg(op, "output channel axis (groups)", g.cout, p.groups));
  g.cin_g = g.cin / p.groups;
  g.cout_g = g.cout / p.groups;
  if (ws[1] != g.cin_g) throw DimensionError(axis_msg(op, "weight input-channel axis 1", ws[1], g.cin_g));
  int extent = p.dilation * (g.kernel - 1) + 1;
  if (extent > g.h + 2 * p.padding) throw DimensionError(axis_msg(op, "height axis 2 (kernel extent exceeds padded input)", g.h + 2 * p.padding, extent));
  if (extent > g.w + 2 * p.padding) throw DimensionError(axis_msg(op, "width axis 3 (kernel extent exceeds padded input)", g.w + 2 * p.padding, extent));
  g.ho = conv_out_extent(g.h, g.kernel, p.stride, p.padding, p.dilation);
  g.wo = conv_out_extent(g.w, g.kernel, p.stride, p.padding, p.dilation);
  return g;
}

bool is_pointwise(const ConvGeom& g, const ConvParams& p) {
  return g.kernel == 1 && p.stride == 1 && p.padding == 0 && p.groups == 1;
}

}  // namespace

void gemm(bool trans_a, bool trans_b, int m, int n, int k, Scalar alpha, const Scalar* a, int lda,
          const Scalar* b, int ldb, Scalar beta, Scalar* c, int ldc) {
  for (int i = 0; i < m; ++i) {
    Scalar* crow = c + static_cast<std::size_t>(i) * ldc;
    if (beta == Scalar(0)) {
      std::fill(crow, crow + n, Scalar(0));
    } else if (beta != Scalar(1)) {
      for (int j = 0; j < n; ++j) crow[j] *= beta;
    }
  }
  if (m == 0 || n == 0 || k == 0) return;
  std::vector<Scalar> bt;
  if (trans_b) {
    // Materialize op(B) as a k x n row-major block.
    bt.resize(static_cast<std::size_t>(k) * n);
    for (int j = 0; j < n; ++j)
      for (int kk = 0; kk < k; ++kk) bt[static_cast<std::size_t>(kk) * n + j] = b[static_cast<std::size_t>(j) * ldb + kk];
    b = bt.data();
    ldb = n;
  }
  constexpr int kBlock = 512;
  int blocks = (n + kBlock - 1) / kBlock;
  parallel_for(
      static_cast<std::size_t>(blocks),
      [&](std::size_t b0, std::size_t b1) {
        for (std::size_t bi = b0; bi < b1; ++bi) {
          int j0 = static_cast<int>(bi) * kBlock;
          int j1 = std::min(n, j0 + kBlock);
          gemm_nn_block(m, j0, j1, k, alpha, a, lda, trans_a, b, ldb, c, ldc);
        }
      },
      1);
}

int conv_out_extent(int in, int kernel, int stride, int padding, int dilation) {
  return (in + 2 * padding - dilation * (kernel - 1) - 1) / stride + 1;
}

Tensor conv2d(const Tensor& x, const Tensor& w, const Tensor* bias, const ConvParams& p, ConvPath path) {
  ConvGeom g = conv_geometry(x.shape(), w.shape(), p, "conv2d");
  if (bias && (bias->rank() != 1 || bias->dim(0) != g.cout)) {
    throw DimensionError(axis_msg("conv2d", "bias axis 0", bias->numel() ? bias->dim(0) : 0, g.cout));
  }
  Tensor y(Shape{g.n, g.cout, g.ho, g.wo});
  const std::size_t plane = static_cast<std::size_t>(g.ho) * g.wo;
  const std::size_t in_plane = static_cast<std::size_t>(g.h) * g.w;
  const int kdim = g.cin_g * g.kernel * g.kernel;

  if (path == ConvPath::Direct) {
    for (int n = 0; n < g.n; ++n)
      for (int o = 0; o < g.cout; ++o) {
        int grp = o / g.cout_g;
        for (int oh = 0; oh < g.ho; ++oh)
          for (int ow = 0; ow < g.wo; ++ow) {
            Scalar s = bias ? (*bias)[o] : Scalar(0);
            for (int ci = 0; ci < g.cin_g; ++ci) {
              int c = grp * g.cin_g + ci;
              for (int kh = 0; kh < g.kernel; ++kh) {
                int ih = oh * p.stride - p.padding + kh * p.dilation;
                if (ih < 0 || ih >= g.h) continue;
                for (int kw = 0; kw < g.kernel; ++kw) {
                  int iw = ow * p.stride - p.padding + kw * p.dilation;
                  if (iw < 0 || iw >= g.w) continue;
                  s += x.at(n, c, ih, iw) * w.at(o, ci, kh, kw);
                }
              }
            }
            y.at(n, o, oh, ow) = s;
          }
      }
    return y;
  }

  const bool pw = is_pointwise(g, p);
  for (int n = 0; n < g.n; ++n) {
    std::vector<Scalar> cols;
    for (int grp = 0; grp < p.groups; ++grp) {
      const Scalar* xg = x.data() + (static_cast<std::size_t>(n) * g.cin + grp * g.cin_g) * in_plane;
      const Scalar* colp = xg;
      if (!pw) {
        cols.resize(static_cast<std::size_t>(kdim) * plane);
        im2col(xg, g.cin_g, g.h, g.w, g.kernel, p, g.ho, g.wo, cols.data());
        colp = cols.data();
      }
      Scalar* yg = y.data() + (static_cast<std::size_t>(n) * g.cout + grp * g.cout_g) * plane;
      const Scalar* wg = w.data() + static_cast<std::size_t>(grp) * g.cout_g * kdim;
      gemm(false, false, g.cout_g, static_cast<int>(plane), kdim, 1, wg, kdim, colp, static_cast<int>(plane), 0, yg,
           static_cast<int>(plane));
    }
    if (bias) {
      for (int o = 0; o < g.cout; ++o) {
        Scalar* yo = y.data() + (static_cast<std::size_t>(n) * g.cout + o) * plane;
        Scalar bv = (*bias)[o];
        for (std::size_t i = 0; i < plane; ++i) yo[i] += bv;
      }
    }
  }
  return y;
}

Tensor conv2d_backward_input(const Tensor& gy, const Tensor& w, const Shape& x_shape, const ConvParams& p,
                             ConvPath path) {
  ConvGeom g = conv_geometry(x_shape, w.shape(), p, "conv2d_backward_input");
  if (!(gy.shape() == Shape{g.n, g.cout, g.ho, g.wo})) {
    throw DimensionError("conv2d_backward_input: gradient shape " + gy.shape().str() + " does not match output");
  }
  Tensor dx(x_shape);
  const std::size_t plane = static_cast<std::size_t>(g.ho) * g.wo;
  const std::size_t in_plane = static_cast<std::size_t>(g.h) * g.w;
  const int kdim = g.cin_g * g.kernel * g.kernel;

  if (path == ConvPath::Direct) {
    for (int n = 0; n < g.n; ++n)
      for (int o = 0; o < g.cout; ++o) {
        int grp = o / g.cout_g;
        for (int oh = 0; oh < g.ho; ++oh)
          for (int ow = 0; ow < g.wo; ++ow) {
            Scalar gv = gy.at(n, o, oh, ow);
            for (int ci = 0; ci < g.cin_g; ++ci) {
              int c = grp * g.cin_g + ci;
              for (int kh = 0; kh < g.kernel; ++kh) {
                int ih = oh * p.stride - p.padding + kh * p.dilation;
                if (ih < 0 || ih >= g.h) continue;
                for (int kw = 0; kw < g.kernel; ++kw) {
                  int iw = ow * p.stride - p.padding + kw * p.dilation;
                  if (iw < 0 || iw >= g.w) continue;
                  dx.at(n, c, ih, iw) += gv * w.at(o, ci, kh, kw);
                }
              }
            }
          }
      }
  } else {
    const bool pw = is_pointwise(g, p);
    std::vector<Scalar> cols(pw ? 0 : static_cast<std::size_t>(kdim) * plane);
    for (int n = 0; n < g.n; ++n) {
      for (int grp = 0; grp < p.groups; ++grp) {
        const Scalar* gyg = gy.data() + (static_cast<std::size_t>(n) * g.cout + grp * g.cout_g) * plane;
        const Scalar* wg = w.data() + static_cast<std::size_t>(grp) * g.cout_g * kdim;
        Scalar* dxg = dx.data() + (static_cast<std::size_t>(n) * g.cin + grp * g.cin_g) * in_plane;
        if (pw) {
          gemm(true, false, kdim, static_cast<int>(plane), g.cout_g, 1, wg, kdim, gyg, static_cast<int>(plane), 0, dxg,
               static_cast<int>(plane));
        } else {
          gemm(true, false, kdim, static_cast<int>(plane), g.cout_g, 1, wg, kdim, gyg, static_cast<int>(plane), 0,
               cols.data(), static_cast<int>(plane));
          col2im(cols.data(), g.cin_g, g.h, g.w, g.kernel, p, g.ho, g.wo, dxg);
        }
      }
    }
  }
  if (fault_active("conv_backward_sign")) {
    for (auto& v : dx.vec()) v = -v;
  }
  return dx;
}

Tensor conv2d_backward_weight(const Tensor& gy, const Tensor& x, const Shape& w_shape, const ConvParams& p,
                              ConvPath path) {
  ConvGeom g = conv_geometry(x.shape(), w_shape, p, "conv2d_backward_weight");
  if (!(gy.shape() == Shape{g.n, g.cout, g.ho, g.wo})) {
    throw DimensionError("conv2d_backward_weight: gradient shape " + gy.shape().str() + " does not match output");
  }
  Tensor dw(w_shape);
  const std::size_t plane = static_cast<std::size_t>(g.ho) * g.wo;
  const std::size_t in_plane = static_cast<std::size_t>(g.h) * g.w;
  const int kdim = g.cin_g * g.kernel * g.kernel;

  if (path == ConvPath::Direct) {
    for (int n = 0; n < g.n; ++n)
      for (int o = 0; o < g.cout; ++o) {
        int grp = o / g.cout_g;
        for (int oh = 0; oh < g.ho; ++oh)
          for (int ow = 0; ow < g.wo; ++ow) {
            Scalar gv = gy.at(n, o, oh, ow);
            for (int ci = 0; ci < g.cin_g; ++ci) {
              int c = grp * g.cin_g + ci;
              for (int kh = 0; kh < g.kernel; ++kh) {
                int ih = oh * p.stride - p.padding + kh * p.dilation;
                if (ih < 0 || ih >= g.h) continue;
                for (int kw = 0; kw < g.kernel; ++kw) {
                  int iw = ow * p.stride - p.padding + kw * p.dilation;
                  if (iw < 0 || iw >= g.w) continue;
                  dw.at(o, ci, kh, kw) += gv * x.at(n, c, ih, iw);
                }
              }
            }
          }
      }
    return dw;
  }

  const bool pw = is_pointwise(g, p);
  std::vector<Scalar> cols(pw ? 0 : static_cast<std::size_t>(kdim) * plane);
  for (int n = 0; n < g.n; ++n) {
    for (int grp = 0; grp < p.groups; ++grp) {
      const Scalar* xg = x.data() + (static_cast<std::size_t>(n) * g.cin + grp * g.cin_g) * in_plane;
      const Scalar* colp = xg;
      if (!pw) {
        im2col(xg, g.cin_g, g.h, g.w, g.kernel, p, g.ho, g.wo, cols.data());
        colp = cols.data();
      }
      const Scalar* gyg = gy.data() + (static_cast<std::size_t>(n) * g.cout + grp * g.cout_g) * plane;
      Scalar* dwg = dw.data() + static_cast<std::size_t>(grp) * g.cout_g * kdim;
      gemm(false, true, g.cout_g, kdim, static_cast<int>(plane), 1, gyg, static_cast<int>(plane), colp,
           static_cast<int>(plane), 1, dwg, kdim);
    }
  }
  return dw;
}

Tensor channel_sum(const Tensor& gy) {
  auto d = dims4(gy, "channel_sum");
  Tensor s(Shape{d.c});
  const std::size_t plane = static_cast<std::size_t>(d.h) * d.w;
  for (int n = 0; n < d.n; ++n)
    for (int c = 0; c < d.c; ++c) {
      const Scalar* p = gy.data() + (static_cast<std::size_t>(n) * d.c + c) * plane;
      Scalar acc = 0;
      for (std::size_t i = 0; i < plane; ++i) acc += p[i];
      s[c] += acc;
    }
  return s;
}

namespace {
void check_transposed(const Tensor& x, const Tensor& w, const char* op) {
  auto d = dims4(x, op);
  if (w.rank() != 4 || w.dim(2) != 2 || w.dim(3) != 2) {
    throw DimensionError(std::string(op) + ": weight must be [Cin, Cout, 2, 2], got " + w.shape().str());
  }
  if (w.dim(0) != d.c) throw DimensionError(axis_msg(op, "weight axis 0 (input channels)", w.dim(0), d.c));
}
}  // namespace

Tensor transposed_conv2d(const Tensor& x, const Tensor& w, const Tensor* bias) {
  check_transposed(x, w, "transposed_conv2d");
  auto d = dims4(x, "transposed_conv2d");
  const int cout = w.dim(1);
  if (bias && (bias->rank() != 1 || bias->dim(0) != cout)) {
    throw DimensionError(axis_msg("transposed_conv2d", "bias axis 0", bias->dim(0), cout));
  }
  const int plane = d.h * d.w;
  const int taps = cout * 4;
  Tensor y(Shape{d.n, cout, 2 * d.h, 2 * d.w});
  std::vector<Scalar> cols(static_cast<std::size_t>(taps) * plane);
  for (int n = 0; n < d.n; ++n) {
    const Scalar* xn = x.data() + static_cast<std::size_t>(n) * d.c * plane;
    // cols[(o, a, b), (i, j)] = sum_c w[c, o, a, b] * x[c, i, j]
    gemm(true, false, taps, plane, d.c, 1, w.data(), taps, xn, plane, 0, cols.data(), plane);
    for (int o = 0; o < cout; ++o) {
      Scalar bv = bias ? (*bias)[o] : Scalar(0);
      for (int a = 0; a < 2; ++a)
        for (int b = 0; b < 2; ++b) {
          const Scalar* row = cols.data() + static_cast<std::size_t>((o * 2 + a) * 2 + b) * plane;
          for (int i = 0; i < d.h; ++i)
            for (int j = 0; j < d.w; ++j) y.at(n, o, 2 * i + a, 2 * j + b) = row[i * d.w + j] + bv;
        }
    }
  }
  if (fault_active("transposed_conv_nan")) y[0] = std::numeric_limits<Scalar>::quiet_NaN();
  return y;
}

Tensor transposed_conv2d_backward_input(const Tensor& gy, const Tensor& w) {
  auto g = dims4(gy, "transposed_conv2d_backward_input");
  if (g.h % 2 || g.w % 2 || w.dim(1) != g.c) {
    throw DimensionError("transposed_conv2d_backward_input: gradient shape " + gy.shape().str() +
                         " incompatible with weight " + w.shape().str());
  }
  const int cin = w.dim(0), h = g.h / 2, wd = g.w / 2, plane = h * wd, taps = g.c * 4;
  Tensor dx(Shape{g.n, cin, h, wd});
  std::vector<Scalar> cols(static_cast<std::size_t>(taps) * plane);
  for (int n = 0; n < g.n; ++n) {
    for (int o = 0; o < g.c; ++o)
      for (int a = 0; a < 2; ++a)
        for (int b = 0; b < 2; ++b) {
          Scalar* row = cols.data() + static_cast<std::size_t>((o * 2 + a) * 2 + b) * plane;
          for (int i = 0; i < h; ++i)
            for (int j = 0; j < wd; ++j) row[i * wd + j] = gy.at(n, o, 2 * i + a, 2 * j + b);
        }
    gemm(false, false, cin, plane, taps, 1, w.data(), taps, cols.data(), plane, 0,
         dx.data() + static_cast<std::size_t>(n) * cin * plane, plane);
  }
  return dx;
}

Tensor transposed_conv2d_backward_weight(const Tensor& gy, const Tensor& x) {
  auto d = dims4(x, "transposed_conv2d_backward_weight");
  auto g = dims4(gy, "transposed_conv2d_backward_weight");
  if (g.n != d.n || g.h != 2 * d.h || g.w != 2 * d.w) {
    throw DimensionError("transposed_conv2d_backward_weight: gradient shape " + gy.shape().str() +
                         " incompatible with input " + x.shape().str());
  }
  const int plane = d.h * d.w, taps = g.c * 4;
  Tensor dw(Shape{d.c, g.c, 2, 2});
  std::vector<Scalar> cols(static_cast<std::size_t>(taps) * plane);
  for (int n = 0; n < d.n; ++n) {
    for (int o = 0; o < g.c; ++o)
      for (int a = 0; a < 2; ++a)
        for (int b = 0; b < 2; ++b) {
          Scalar* row = cols.data() + static_cast<std::size_t>((o * 2 + a) * 2 + b) * plane;
          for (int i = 0; i < d.h; ++i)
            for (int j = 0; j < d.w; ++j) row[i * d.w + j] = gy.at(n, o, 2 * i + a, 2 * j + b);
        }
    gemm(false, true, d.c, taps, plane, 1, x.data() + static_cast<std::size_t>(n) * d.c * plane, plane, cols.data(),
         plane, 1, dw.data(), taps);
  }
  return dw;
}

PoolResult maxpool2d(const Tensor& x, int window, int stride, int padding) {
  auto d = dims4(x, "maxpool2d");
  if (window < 1 || stride < 1 || padding < 0 || padding >= window) {
    throw DimensionError("maxpool2d: invalid window/stride/padding");
  }
  if (window == 2 && stride == 2 && padding == 0) {
    if (d.h % 2) throw DimensionError("maxpool2d: height axis 2 must be even, got " + std::to_string(d.h));
    if (d.w % 2) throw DimensionError("maxpool2d: width axis 3 must be even, got " + std::to_string(d.w));
  }
  if (window > d.h + 2 * padding || window > d.w + 2 * padding) {
    throw DimensionError("maxpool2d: window exceeds padded input " + x.shape().str());
  }
  int ho = (d.h + 2 * padding - window) / stride + 1;
  int wo = (d.w + 2 * padding - window) / stride + 1;
  PoolResult r{Tensor(Shape{d.n, d.c, ho, wo}), {}};
  r.argmax.resize(r.y.numel());
  std::size_t out = 0;
  for (int n = 0; n < d.n; ++n)
    for (int c = 0; c < d.c; ++c) {
      std::size_t base = (static_cast<std::size_t>(n) * d.c + c) * d.h * d.w;
      for (int oh = 0; oh < ho; ++oh)
        for (int ow = 0; ow < wo; ++ow, ++out) {
          Scalar best = -std::numeric_limits<Scalar>::infinity();
          std::size_t arg = std::numeric_limits<std::size_t>::max();
          for (int kh = 0; kh < window; ++kh) {
            int ih = oh * stride - padding + kh;
            if (ih < 0 || ih >= d.h) continue;
            for (int kw = 0; kw < window; ++kw) {
              int iw = ow * stride - padding + kw;
              if (iw < 0 || iw >= d.w) continue;
              std::size_t idx = base + static_cast<std::size_t>(ih) * d.w + iw;
              // Strict comparison keeps the first maximum in row-major order.
              if (arg == std::numeric_limits<std::size_t>::max() || x[idx] > best) {
                best = x[idx];
                arg = idx;
              }
            }
          }
          r.y[out] = best;
          r.argmax[out] = arg;
        }
    }
  return r;
}

Tensor maxpool2d_backward(const Tensor& gy, const std::vector<std::size_t>& argmax, const Shape& x_shape) {
  Tensor dx(x_shape);
  for (std::size_t i = 0; i < gy.numel(); ++i) dx[argmax[i]] += gy[i];
  return dx;
}

Tensor avgpool2d(const Tensor& x, int window) {
  auto d = dims4(x, "avgpool2d");
  if (window < 1) throw DimensionError("avgpool2d: window must be >= 1");
  if (d.h % window) throw DimensionError("avgpool2d: height axis 2 (" + std::to_string(d.h) + ") not divisible by window");
  if (d.w % window) throw DimensionError("avgpool2d: width axis 3 (" + std::to_string(d.w) + ") not divisible by window");
  int ho = d.h / window, wo = d.w / window;
  Tensor y(Shape{d.n, d.c, ho, wo});
  const Scalar inv = Scalar(1) / Scalar(window * window);
  for (int n = 0; n < d.n; ++n)
    for (int c = 0; c < d.c; ++c)
      for (int oh = 0; oh < ho; ++oh)
        for (int ow = 0; ow < wo; ++ow) {
          Scalar s = 0;
          for (int kh = 0; kh < window; ++kh)
            for (int kw = 0; kw < window; ++kw) s += x.at(n, c, oh * window + kh, ow * window + kw);
          y.at(n, c, oh, ow) = s * inv;
        }
  return y;
}

Tensor avgpool2d_backward(const Tensor& gy, int window, const Shape& x_shape) {
  Tensor dx(x_shape);
  auto g = dims4(gy, "avgpool2d_backward");
  const Scalar inv = Scalar(1) / Scalar(window * window);
  for (int n = 0; n < g.n; ++n)
    for (int c = 0; c < g.c; ++c)
      for (int oh = 0; oh < g.h; ++oh)
        for (int ow = 0; ow < g.w; ++ow) {
          Scalar v = gy.at(n, c, oh, ow) * inv;
          for (int kh = 0; kh < window; ++kh)
            for (int kw = 0; kw < window; ++kw) dx.at(n, c, oh * window + kh, ow * window + kw) += v;
        }
  return dx;
}

Tensor global_avg_pool(const Tensor& x) {
  auto d = dims4(x, "global_avg_pool");
  Tensor y(Shape{d.n, d.c});
  const std::size_t plane = static_cast<std::size_t>(d.h) * d.w;
  for (std::size_t nc = 0; nc < static_cast<std::size_t>(d.n) * d.c; ++nc) {
    const Scalar* p = x.data() + nc * plane;
    // Mean about the first element; a constant plane yields that value exactly.
    Scalar s = 0;
    for (std::size_t i = 1; i < plane; ++i) s += p[i] - p[0];
    y[nc] = p[0] + s / Scalar(plane);
  }
  return y;
}

PoolResult global_max_pool(const Tensor& x) {
  auto d = dims4(x, "global_max_pool");
  PoolResult r{Tensor(Shape{d.n, d.c}), {}};
  r.argmax.resize(static_cast<std::size_t>(d.n) * d.c);
  const std::size_t plane = static_cast<std::size_t>(d.h) * d.w;
  for (std::size_t nc = 0; nc < static_cast<std::size_t>(d.n) * d.c; ++nc) {
    const Scalar* p = x.data() + nc * plane;
    std::size_t arg = 0;
    for (std::size_t i = 1; i < plane; ++i)
      if (p[i] > p[arg]) arg = i;
    r.y[nc] = p[arg];
    r.argmax[nc] = nc * plane + arg;
  }
  return r;
}

Tensor global_avg_pool_backward(const Tensor& gy, const Shape& x_shape) {
  Tensor dx(x_shape);
  const std::size_t plane = static_cast<std::size_t>(x_shape[2]) * x_shape[3];
  for (std::size_t nc = 0; nc < gy.numel(); ++nc) {
    Scalar v = gy[nc] / Scalar(plane);
    std::fill(dx.data() + nc * plane, dx.data() + (nc + 1) * plane, v);
  }
  return dx;
}

Tensor global_max_pool_backward(const Tensor& gy, const std::vector<std::size_t>& argmax, const Shape& x_shape) {
  Tensor dx(x_shape);
  for (std::size_t i = 0; i < gy.numel(); ++i) dx[argmax[i]] += gy[i];
  return dx;
}

namespace {
void check_conv1d(const Tensor& v, const Tensor& w) {
  if (v.rank() != 2) throw DimensionError("conv1d_channels: input must be [N, C], got " + v.shape().str());
  if (w.rank() != 1 || w.dim(0) % 2 == 0) {
    throw DimensionError("conv1d_channels: kernel must be rank 1 with odd length, got " + w.shape().str());
  }
}
}  // namespace

Tensor conv1d_channels(const Tensor& v, const Tensor& w) {
  check_conv1d(v, w);
  const int n = v.dim(0), c = v.dim(1), k = w.dim(0), half = (k - 1) / 2;
  Tensor y(v.shape());
  for (int b = 0; b < n; ++b)
    for (int i = 0; i < c; ++i) {
      Scalar s = 0;
      for (int j = 0; j < k; ++j) {
        int src = i + j - half;
        if (src >= 0 && src < c) s += w[j] * v[static_cast<std::size_t>(b) * c + src];
      }
      y[static_cast<std::size_t>(b) * c + i] = s;
    }
  return y;
}

Tensor conv1d_channels_backward_input(const Tensor& gy, const Tensor& w) {
  check_conv1d(gy, w);
  const int n = gy.dim(0), c = gy.dim(1), k = w.dim(0), half = (k - 1) / 2;
  Tensor dv(gy.shape());
  for (int b = 0; b < n; ++b)
    for (int i = 0; i < c; ++i) {
      Scalar g = gy[static_cast<std::size_t>(b) * c + i];
      for (int j = 0; j < k; ++j) {
        int src = i + j - half;
        if (src >= 0 && src < c) dv[static_cast<std::size_t>(b) * c + src] += w[j] * g;
      }
    }
  return dv;
}

Tensor conv1d_channels_backward_weight(const Tensor& gy, const Tensor& v, int k) {
  const int n = v.dim(0), c = v.dim(1), half = (k - 1) / 2;
  Tensor dw(Shape{k});
  for (int b = 0; b < n; ++b)
    for (int i = 0; i < c; ++i) {
      Scalar g = gy[static_cast<std::size_t>(b) * c + i];
      for (int j = 0; j < k; ++j) {
        int src = i + j - half;
        if (src >= 0 && src < c) dw[j] += g * v[static_cast<std::size_t>(b) * c + src];
      }
    }
  return dw;
}

namespace {
void check_bn(const Tensor& x, const Tensor& gamma, const Tensor& beta, const char* op) {
  auto d = dims4(x, op);
  if (gamma.numel() != static_cast<std::size_t>(d.c)) {
    throw DimensionError(axis_msg(op, "gamma length vs channel axis 1", static_cast<int>(gamma.numel()), d.c));
  }
  if (beta.numel() != static_cast<std::size_t>(d.c)) {
    throw DimensionError(axis_msg(op, "beta length vs channel axis 1", static_cast<int>(beta.numel()), d.c));
  }
}
}  // namespace

Tensor batchnorm_train(const Tensor& x, const Tensor& gamma, const Tensor& beta, Tensor& running_mean,
                       Tensor& running_var, Scalar momentum, Scalar eps, BatchNormSaved* saved) {
  check_bn(x, gamma, beta, "batchnorm_train");
  auto d = dims4(x, "batchnorm_train");
  const std::size_t plane = static_cast<std::size_t>(d.h) * d.w;
  const std::size_t count = plane * d.n;
  Tensor y(x.shape());
  Tensor xhat(x.shape());
  std::vector<Scalar> inv_std(static_cast<std::size_t>(d.c));
  for (int c = 0; c < d.c; ++c) {
    // Shifted accumulation: a constant channel yields exactly its value as mean.
    const Scalar shift = x.data()[static_cast<std::size_t>(c) * plane];
    Scalar s = 0;
    for (int n = 0; n < d.n; ++n) {
      const Scalar* p = x.data() + (static_cast<std::size_t>(n) * d.c + c) * plane;
      for (std::size_t i = 0; i < plane; ++i) s += p[i] - shift;
    }
    const Scalar mean = shift + s / Scalar(count);
    Scalar ss = 0;
    for (int n = 0; n < d.n; ++n) {
      const Scalar* p = x.data() + (static_cast<std::size_t>(n) * d.c + c) * plane;
      for (std::size_t i = 0; i < plane; ++i) {
        Scalar dv = p[i] - mean;
        ss += dv * dv;
      }
    }
    const Scalar var = ss / Scalar(count);
    const Scalar istd = Scalar(1) / std::sqrt(var + eps);
    inv_std[static_cast<std::size_t>(c)] = istd;
    for (int n = 0; n < d.n; ++n) {
      std::size_t off = (static_cast<std::size_t>(n) * d.c + c) * plane;
      for (std::size_t i = 0; i < plane; ++i) {
        Scalar xh = (x[off + i] - mean) * istd;
        xhat[off + i] = xh;
        y[off + i] = gamma[c] * xh + beta[c];
      }
    }
    const Scalar unbiased = count > 1 ? ss / Scalar(count - 1) : var;
    running_mean[c] = (1 - momentum) * running_mean[c] + momentum * mean;
    running_var[c] = (1 - momentum) * running_var[c] + momentum * unbiased;
  }
  if (saved) {
    saved->xhat = std::move(xhat);
    saved->inv_std = std::move(inv_std);
  }
  return y;
}

Tensor batchnorm_eval(const Tensor& x, const Tensor& gamma, const Tensor& beta, const Tensor& running_mean,
                      const Tensor& running_var, Scalar eps) {
  check_bn(x, gamma, beta, "batchnorm_eval");
  auto d = dims4(x, "batchnorm_eval");
  const std::size_t plane = static_cast<std::size_t>(d.h) * d.w;
  Tensor y(x.shape());
  for (int n = 0; n < d.n; ++n)
    for (int c = 0; c < d.c; ++c) {
      const Scalar istd = Scalar(1) / std::sqrt(running_var[c] + eps);
      const Scalar scale = gamma[c] * istd;
      const Scalar shift = beta[c] - running_mean[c] * scale;
      std::size_t off = (static_cast<std::size_t>(n) * d.c + c) * plane;
      for (std::size_t i = 0; i < plane; ++i) y[off + i] = x[off + i] * scale + shift;
    }
  return y;
}

BatchNormGrads batchnorm_train_backward(const Tensor& gy, const Tensor& gamma, const BatchNormSaved& saved) {
  auto d = dims4(gy, "batchnorm_train_backward");
  const std::size_t plane = static_cast<std::size_t>(d.h) * d.w;
  const Scalar count = Scalar(plane * d.n);
  BatchNormGrads g{Tensor(gy.shape()), Tensor(Shape{d.c}), Tensor(Shape{d.c})};
  for (int c = 0; c < d.c; ++c) {
    Scalar sum_gy = 0, sum_gy_xhat = 0;
    for (int n = 0; n < d.n; ++n) {
      std::size_t off = (static_cast<std::size_t>(n) * d.c + c) * plane;
      for (std::size_t i = 0; i < plane; ++i) {
        sum_gy += gy[off + i];
        sum_gy_xhat += gy[off + i] * saved.xhat[off + i];
      }
    }
    g.dbeta[c] = sum_gy;
    g.dgamma[c] = sum_gy_xhat;
    const Scalar k = gamma[c] * saved.inv_std[static_cast<std::size_t>(c)] / count;
    for (int n = 0; n < d.n; ++n) {
      std::size_t off = (static_cast<std::size_t>(n) * d.c + c) * plane;
      for (std::size_t i = 0; i < plane; ++i) {
        g.dx[off + i] = k * (count * gy[off + i] - sum_gy - saved.xhat[off + i] * sum_gy_xhat);
      }
    }
  }
  return g;
}

BatchNormGrads batchnorm_eval_backward(const Tensor& gy, const Tensor& x, const Tensor& gamma,
                                       const Tensor& running_mean, const Tensor& running_var, Scalar eps) {
  auto d = dims4(gy, "batchnorm_eval_backward");
  const std::size_t plane = static_cast<std::size_t>(d.h) * d.w;
  BatchNormGrads g{Tensor(gy.shape()), Tensor(Shape{d.c}), Tensor(Shape{d.c})};
  for (int n = 0; n < d.n; ++n)
    for (int c = 0; c < d.c; ++c) {
      const Scalar istd = Scalar(1) / std::sqrt(running_var[c] + eps);
      std::size_t off = (static_cast<std::size_t>(n) * d.c + c) * plane;
      for (std::size_t i = 0; i < plane; ++i) {
        g.dx[off + i] = gy[off + i] * gamma[c] * istd;
        g.dgamma[c] += gy[off + i] * (x[off + i] - running_mean[c]) * istd;
        g.dbeta[c] += gy[off + i];
      }
    }
  return g;
}

Tensor concat_channels(const std::vector<const Tensor*>& xs) {
  if (xs.empty()) throw DimensionError("concat_channels: no inputs");
  auto d0 = dims4(*xs[0], "concat_channels");
  int total = 0;
  for (const Tensor* t : xs) {
    auto d = dims4(*t, "concat_channels");
    if (d.n != d0.n) throw DimensionError(axis_msg("concat_channels", "batch axis 0", d.n, d0.n));
    if (d.h != d0.h) throw DimensionError(axis_msg("concat_channels", "height axis 2", d.h, d0.h));
    if (d.w != d0.w) throw DimensionError(axis_msg("concat_channels", "width axis 3", d.w, d0.w));
    total += d.c;
  }
  Tensor y(Shape{d0.n, total, d0.h, d0.w});
  const std::size_t plane = static_cast<std::size_t>(d0.h) * d0.w;
  Scalar* out = y.data();
  for (int n = 0; n < d0.n; ++n) {
    for (const Tensor* t : xs) {
      std::size_t len = static_cast<std::size_t>(t->dim(1)) * plane;
      const Scalar* src = t->data() + static_cast<std::size_t>(n) * len;
      out = std::copy(src, src + len, out);
    }
  }
  return y;
}

Tensor slice_channels(const Tensor& x, int begin, int count) {
  auto d = dims4(x, "slice_channels");
  if (begin < 0 || count < 1 || begin + count > d.c) {
    throw DimensionError("slice_channels: range [" + std::to_string(begin) + ", " + std::to_string(begin + count) +
                         ") outside channel axis 1 of size " + std::to_string(d.c));
  }
  Tensor y(Shape{d.n, count, d.h, d.w});
  const std::size_t plane = static_cast<std::size_t>(d.h) * d.w;
  for (int n = 0; n < d.n; ++n) {
    const Scalar* src = x.data() + (static_cast<std::size_t>(n) * d.c + begin) * plane;
    std::copy(src, src + count * plane, y.data() + static_cast<std::size_t>(n) * count * plane);
  }
  return y;
}

Tensor scale_channels(const Tensor& x, const Tensor& s) {
  auto d = dims4(x, "scale_channels");
  if (s.rank() != 2 || s.dim(0) != d.n || s.dim(1) != d.c) {
    throw DimensionError("scale_channels: scale shape " + s.shape().str() + " does not match " + x.shape().str());
  }
  Tensor y(x.shape());
  const std::size_t plane = static_cast<std::size_t>(d.h) * d.w;
  for (std::size_t nc = 0; nc < s.numel(); ++nc)
    for (std::size_t i = 0; i < plane; ++i) y[nc * plane + i] = x[nc * plane + i] * s[nc];
  return y;
}

Tensor broadcast_spatial(const Tensor& v, int h, int w) {
  if (v.rank() != 2) throw DimensionError("broadcast_spatial: input must be [N, C], got " + v.shape().str());
  Tensor y(Shape{v.dim(0), v.dim(1), h, w});
  const std::size_t plane = static_cast<std::size_t>(h) * w;
  for (std::size_t nc = 0; nc < v.numel(); ++nc) std::fill(y.data() + nc * plane, y.data() + (nc + 1) * plane, v[nc]);
  return y;
}

const std::vector<std::string>& known_faults() {
  static const std::vector<std::string> faults{"conv_backward_sign", "transposed_conv_nan"};
  return faults;
}

void set_fault(std::string_view name) {
  if (!name.empty() && std::find(known_faults().begin(), known_faults().end(), name) == known_faults().end()) {
    throw ConfigError("unknown fault '" + std::string(name) + "'");
  }
  std::lock_guard lock(g_fault_mu);
  g_fault = name;
}

bool fault_active(std::string_view name) {
  std::lock_guard lock(g_fault_mu);
  return !g_fault.empty() && g_fault == name;
}

}  // namespace cascn::kernels
