#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <string>
#include <vector>

#include "wscn/autodiff.hpp"
#include "wscn/kernels.hpp"
#include "wscn/rng.hpp"
#include "wscn/tensor.hpp"

namespace wscn {

enum class Mode { Train, Eval };

/// Padding that keeps ceil(H/stride) outputs; excess goes to the bottom/right.
inline constexpr int kSamePadding = -1;

namespace detail {

template <class T>
void require_rank(const char* op, const Tensor<T>& x, std::size_t rank) {
  if (x.rank() != rank)
    throw ShapeError(std::string(op) + ": expected rank " +
                     std::to_string(rank) + " input, got " +
                     to_string(x.shape()));
}

// Sums in T over rows of at most kRow elements, accumulated in double.
inline constexpr std::size_t kRow = 256;

template <class T>
double plane_sum(const T* p, std::size_t m) {
  double s = 0;
  for (std::size_t j0 = 0; j0 < m; j0 += kRow) {
    const std::size_t e = std::min(m, j0 + kRow);
    T acc{0};
#pragma omp simd reduction(+ : acc)
    for (std::size_t j = j0; j < e; ++j) acc += p[j];
    s += acc;
  }
  return s;
}

template <class T>
double plane_sq_dev(const T* p, std::size_t m, T mean) {
  double s = 0;
  for (std::size_t j0 = 0; j0 < m; j0 += kRow) {
    const std::size_t e = std::min(m, j0 + kRow);
    T acc{0};
#pragma omp simd reduction(+ : acc)
    for (std::size_t j = j0; j < e; ++j) acc += (p[j] - mean) * (p[j] - mean);
    s += acc;
  }
  return s;
}

template <class T>
double plane_dot_centered(const T* g, const T* p, std::size_t m, T mean) {
  double s = 0;
  for (std::size_t j0 = 0; j0 < m; j0 += kRow) {
    const std::size_t e = std::min(m, j0 + kRow);
    T acc{0};
#pragma omp simd reduction(+ : acc)
    for (std::size_t j = j0; j < e; ++j) acc += g[j] * (p[j] - mean);
    s += acc;
  }
  return s;
}

inline kernels::ConvGeom conv_geometry(const Shape& x, const Shape& w,
                                       int stride, int padding) {
  kernels::ConvGeom g{};
  g.in_c = x[1];
  g.in_h = x[2];
  g.in_w = x[3];
  g.out_c = w[0];
  g.k = w[2];
  g.stride = static_cast<std::size_t>(stride);
  if (padding == kSamePadding) {
    g.out_h = (g.in_h + g.stride - 1) / g.stride;
    g.out_w = (g.in_w + g.stride - 1) / g.stride;
    const auto total = [&](std::size_t in, std::size_t out) {
      const auto need = static_cast<std::ptrdiff_t>((out - 1) * g.stride + g.k) -
                        static_cast<std::ptrdiff_t>(in);
      return std::max<std::ptrdiff_t>(need, 0);
    };
    g.pad_top = total(g.in_h, g.out_h) / 2;
    g.pad_left = total(g.in_w, g.out_w) / 2;
  } else {
    const auto p = static_cast<std::size_t>(padding);
    if (g.in_h + 2 * p < g.k || g.in_w + 2 * p < g.k)
      throw ShapeError("conv2d: kernel larger than padded input " +
                       to_string(x));
    g.out_h = (g.in_h + 2 * p - g.k) / g.stride + 1;
    g.out_w = (g.in_w + 2 * p - g.k) / g.stride + 1;
    g.pad_top = g.pad_left = padding;
  }
  return g;
}

}  // namespace detail

/// Cross-correlation of x [N,C,H,W] with weight [OC,C,k,k] plus bias [OC]
/// (bias may be undefined).
template <class T>
Tensor<T> conv2d(Tape<T>* tape, const Tensor<T>& x, const Tensor<T>& weight,
                 const Tensor<T>& bias, int stride = 1,
                 int padding = kSamePadding) {
  detail::require_rank("conv2d", x, 4);
  detail::require_rank("conv2d", weight, 4);
  if (weight.dim(1) != x.dim(1) || weight.dim(2) != weight.dim(3))
    throw ShapeError("conv2d: input " + to_string(x.shape()) +
                     " incompatible with kernel " + to_string(weight.shape()));
  if (bias.defined() && bias.numel() != weight.dim(0))
    throw ShapeError("conv2d: bias " + to_string(bias.shape()) +
                     " does not match kernel " + to_string(weight.shape()));
  if (stride < 1) throw ContractError("conv2d: stride must be positive");
  const auto g = detail::conv_geometry(x.shape(), weight.shape(), stride, padding);
  const std::size_t n = x.dim(0);
  Tensor<T> y({n, g.out_c, g.out_h, g.out_w});
  const std::size_t in_sz = g.in_c * g.in_h * g.in_w;
  const std::size_t out_sz = g.out_c * g.out_h * g.out_w;
  const T* b = bias.defined() ? bias.ptr() : nullptr;
  kernels::Workspace<T> ws;
  for (std::size_t i = 0; i < n; ++i)
    kernels::conv_forward(g, x.ptr() + i * in_sz, weight.ptr(), b,
                          y.ptr() + i * out_sz, ws);
  if (auto* t = recording(tape, x, weight, bias)) {
    t->record("conv2d", {x, weight, bias}, y,
              [x, weight, bias, y, g, n, in_sz, out_sz]() mutable {
                T* gx = x.requires_grad() ? x.grad_mut().data() : nullptr;
                T* gw = weight.requires_grad() ? weight.grad_mut().data() : nullptr;
                T* gb = bias.defined() && bias.requires_grad()
                            ? bias.grad_mut().data()
                            : nullptr;
                const T* gy = y.grad().data();
                kernels::Workspace<T> ws;
                for (std::size_t i = 0; i < n; ++i)
                  kernels::conv_backward(g, x.ptr() + i * in_sz, weight.ptr(),
                                         gy + i * out_sz,
                                         gx ? gx + i * in_sz : nullptr, gw,
                                         gb, ws);
              });
  }
  return y;
}

/// Per-channel convolution with kernel [C,1,k,k], stride 1, same padding.
template <class T>
Tensor<T> depthwise_conv2d(Tape<T>* tape, const Tensor<T>& x,
                           const Tensor<T>& weight) {
  detail::require_rank("depthwise_conv2d", x, 4);
  if (weight.rank() != 4 || weight.dim(0) != x.dim(1) || weight.dim(1) != 1 ||
      weight.dim(2) != weight.dim(3) || weight.dim(2) % 2 == 0)
    throw ShapeError("depthwise_conv2d: input " + to_string(x.shape()) +
                     " incompatible with kernel " + to_string(weight.shape()));
  const std::size_t n = x.dim(0), c = x.dim(1), h = x.dim(2), w = x.dim(3);
  const std::size_t k = weight.dim(2), sz = c * h * w;
  Tensor<T> y(x.shape());
  kernels::Workspace<T> ws;
  for (std::size_t i = 0; i < n; ++i)
    kernels::depthwise_forward(c, h, w, k, x.ptr() + i * sz, weight.ptr(),
                               y.ptr() + i * sz, ws);
  if (auto* t = recording(tape, x, weight)) {
    t->record("depthwise_conv2d", {x, weight}, y,
              [x, weight, y, n, c, h, w, k, sz]() mutable {
                T* gx = x.requires_grad() ? x.grad_mut().data() : nullptr;
                T* gw = weight.requires_grad() ? weight.grad_mut().data() : nullptr;
                kernels::Workspace<T> ws;
                for (std::size_t i = 0; i < n; ++i)
                  kernels::depthwise_backward(c, h, w, k, x.ptr() + i * sz,
                                              weight.ptr(), y.grad().data() + i * sz,
                                              gx ? gx + i * sz : nullptr, gw, ws);
              });
  }
  return y;
}

/// Depthwise 3x3 followed by pointwise 1x1 with bias.
template <class T>
Tensor<T> separable_conv2d(Tape<T>* tape, const Tensor<T>& x,
                           const Tensor<T>& depthwise,
                           const Tensor<T>& pointwise,
                           const Tensor<T>& bias) {
  return conv2d(tape, depthwise_conv2d(tape, x, depthwise), pointwise, bias, 1,
                0);
}

/// Learnable 2x upsampling: x [N,C,H,W], kernel [C,OC,3,3] -> [N,OC,2H,2W].
/// The adjoint of conv2d(stride 2, same padding) with the same kernel.
template <class T>
Tensor<T> transpose_conv2d(Tape<T>* tape, const Tensor<T>& x,
                           const Tensor<T>& weight, const Tensor<T>& bias) {
  detail::require_rank("transpose_conv2d", x, 4);
  if (weight.rank() != 4 || weight.dim(0) != x.dim(1) || weight.dim(2) != 3 ||
      weight.dim(3) != 3)
    throw ShapeError("transpose_conv2d: input " + to_string(x.shape()) +
                     " incompatible with kernel " + to_string(weight.shape()));
  const std::size_t n = x.dim(0), c = x.dim(1), h = x.dim(2), w = x.dim(3);
  const std::size_t oc = weight.dim(1);
  if (bias.defined() && bias.numel() != oc)
    throw ShapeError("transpose_conv2d: bias " + to_string(bias.shape()) +
                     " does not match kernel " + to_string(weight.shape()));
  Tensor<T> y({n, oc, 2 * h, 2 * w});
  kernels::Workspace<T> ws;
  const std::size_t in_sz = c * h * w, out_sz = oc * 4 * h * w;
  const T* b = bias.defined() ? bias.ptr() : nullptr;
  for (std::size_t i = 0; i < n; ++i)
    kernels::tconv_forward(c, oc, h, w, x.ptr() + i * in_sz, weight.ptr(), b,
                           y.ptr() + i * out_sz, ws);
  if (auto* t = recording(tape, x, weight, bias)) {
    t->record("transpose_conv2d", {x, weight, bias}, y,
              [x, weight, bias, y, n, c, oc, h, w, in_sz, out_sz]() mutable {
                kernels::Workspace<T> ws;
                T* gx = x.requires_grad() ? x.grad_mut().data() : nullptr;
                T* gw = weight.requires_grad() ? weight.grad_mut().data() : nullptr;
                T* gb = bias.defined() && bias.requires_grad()
                            ? bias.grad_mut().data()
                            : nullptr;
                for (std::size_t i = 0; i < n; ++i)
                  kernels::tconv_backward(c, oc, h, w, x.ptr() + i * in_sz,
                                          weight.ptr(), y.grad().data() + i * out_sz,
                                          gx ? gx + i * in_sz : nullptr, gw, gb,
                                          ws);
              });
  }
  return y;
}

/// Per-channel normalization over (N,H,W) for rank-4 input, or over N for
/// rank-2 input. Train mode normalizes with batch statistics and folds them
/// into the running estimates: running = momentum*running + (1-momentum)*batch.
template <class T>
Tensor<T> batch_norm(Tape<T>* tape, const Tensor<T>& x, const Tensor<T>& gamma,
                     const Tensor<T>& beta, Tensor<T> running_mean,
                     Tensor<T> running_var, Mode mode, T momentum = T(0.9),
                     T eps = T(1e-3)) {
  if (x.rank() != 4 && x.rank() != 2)
    throw ShapeError("batch_norm: expected rank 2 or 4 input, got " +
                     to_string(x.shape()));
  const std::size_t n = x.dim(0), c = x.dim(1);
  const std::size_t hw = x.rank() == 4 ? x.dim(2) * x.dim(3) : 1;
  if (gamma.numel() != c || beta.numel() != c || running_mean.numel() != c ||
      running_var.numel() != c)
    throw ShapeError("batch_norm: parameters do not match " + to_string(x.shape()));
  const std::size_t count = n * hw;
  if (count == 0) throw ContractError("batch_norm: empty batch");

  std::vector<T> mean(c), invstd(c);
  if (mode == Mode::Train) {
    for (std::size_t ch = 0; ch < c; ++ch) {
      double s = 0;
      for (std::size_t i = 0; i < n; ++i)
        s += detail::plane_sum(x.ptr() + (i * c + ch) * hw, hw);
      const double m = s / static_cast<double>(count);
      double v = 0;
      for (std::size_t i = 0; i < n; ++i)
        v += detail::plane_sq_dev(x.ptr() + (i * c + ch) * hw, hw, static_cast<T>(m));
      v /= static_cast<double>(count);
      mean[ch] = static_cast<T>(m);
      invstd[ch] = static_cast<T>(1.0 / std::sqrt(v + static_cast<double>(eps)));
      const double unbiased =
          count > 1 ? v * static_cast<double>(count) / static_cast<double>(count - 1) : v;
      running_mean[ch] = momentum * running_mean[ch] + (T{1} - momentum) * static_cast<T>(m);
      running_var[ch] = momentum * running_var[ch] + (T{1} - momentum) * static_cast<T>(unbiased);
    }
  } else {
    for (std::size_t ch = 0; ch < c; ++ch) {
      mean[ch] = running_mean[ch];
      invstd[ch] = T{1} / std::sqrt(running_var[ch] + eps);
    }
  }

  Tensor<T> y(x.shape());
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t ch = 0; ch < c; ++ch) {
      const T a = gamma[ch] * invstd[ch];
      const T b = beta[ch] - mean[ch] * a;
      const T* p = x.ptr() + (i * c + ch) * hw;
      T* q = y.ptr() + (i * c + ch) * hw;
#pragma omp simd
      for (std::size_t j = 0; j < hw; ++j) q[j] = p[j] * a + b;
    }

  if (auto* t = recording(tape, x, gamma, beta)) {
    t->record("batch_norm", {x, gamma, beta}, y,
              [x, gamma, beta, y, mean, invstd, n, c, hw, count, mode]() mutable {
                const T* gy = y.grad().data();
                std::vector<T> sum_g(c, T{0}), sum_gx(c, T{0});
                for (std::size_t ch = 0; ch < c; ++ch) {
                  double sg = 0, sgx = 0;
                  for (std::size_t i = 0; i < n; ++i) {
                    const T* p = x.ptr() + (i * c + ch) * hw;
                    const T* g = gy + (i * c + ch) * hw;
                    sg += detail::plane_sum(g, hw);
                    sgx += detail::plane_dot_centered(g, p, hw, mean[ch]);
                  }
                  sum_g[ch] = static_cast<T>(sg);
                  sum_gx[ch] = static_cast<T>(sgx * invstd[ch]);
                }
                if (gamma.requires_grad()) {
                  auto gg = gamma.grad_mut();
                  for (std::size_t ch = 0; ch < c; ++ch) gg[ch] += sum_gx[ch];
                }
                if (beta.requires_grad()) {
                  auto gb = beta.grad_mut();
                  for (std::size_t ch = 0; ch < c; ++ch) gb[ch] += sum_g[ch];
                }
                if (!x.requires_grad()) return;
                auto gx = x.grad_mut();
                const T inv_count = T{1} / static_cast<T>(count);
                for (std::size_t i = 0; i < n; ++i)
                  for (std::size_t ch = 0; ch < c; ++ch) {
                    const T* p = x.ptr() + (i * c + ch) * hw;
                    const T* g = gy + (i * c + ch) * hw;
                    T* d = gx.data() + (i * c + ch) * hw;
                    const T a = gamma[ch] * invstd[ch];
                    if (mode == Mode::Eval) {
#pragma omp simd
                      for (std::size_t j = 0; j < hw; ++j) d[j] += a * g[j];
                      continue;
                    }
                    const T mg = sum_g[ch] * inv_count;
                    const T mgx = sum_gx[ch] * inv_count;
#pragma omp simd
                    for (std::size_t j = 0; j < hw; ++j) {
                      const T xhat = (p[j] - mean[ch]) * invstd[ch];
                      d[j] += a * (g[j] - mg - xhat * mgx);
                    }
                  }
              });
  }
  return y;
}

enum class PoolMode { Max, Avg };

/// 2x2 window, stride 2. Max ties route the gradient to the first index in
/// row-major window order.
template <class T>
Tensor<T> pool2d(Tape<T>* tape, const Tensor<T>& x, PoolMode mode) {
  detail::require_rank("pool2d", x, 4);
  const std::size_t n = x.dim(0), c = x.dim(1), h = x.dim(2), w = x.dim(3);
  if (h % 2 || w % 2)
    throw ShapeError("pool2d: spatial extents must be even, got " +
                     to_string(x.shape()));
  const std::size_t oh = h / 2, ow = w / 2, planes = n * c;
  Tensor<T> y({n, c, oh, ow});
  std::vector<std::uint8_t> arg(mode == PoolMode::Max ? y.numel() : 0);
  for (std::size_t p = 0; p < planes; ++p) {
    const T* src = x.ptr() + p * h * w;
    T* dst = y.ptr() + p * oh * ow;
    for (std::size_t i = 0; i < oh; ++i)
      for (std::size_t j = 0; j < ow; ++j) {
        const T v[4] = {src[2 * i * w + 2 * j], src[2 * i * w + 2 * j + 1],
                        src[(2 * i + 1) * w + 2 * j],
                        src[(2 * i + 1) * w + 2 * j + 1]};
        if (mode == PoolMode::Max) {
          std::uint8_t best = 0;
          for (std::uint8_t k = 1; k < 4; ++k)
            if (v[k] > v[best]) best = k;
          dst[i * ow + j] = v[best];
          arg[p * oh * ow + i * ow + j] = best;
        } else {
          dst[i * ow + j] = (v[0] + v[1] + v[2] + v[3]) * T(0.25);
        }
      }
  }
  if (auto* t = recording(tape, x)) {
    t->record(mode == PoolMode::Max ? "max_pool2d" : "avg_pool2d", {x}, y,
              [x, y, arg = std::move(arg), mode, planes, h, w, oh, ow]() mutable {
                auto gx = x.grad_mut();
                const T* gy = y.grad().data();
                for (std::size_t p = 0; p < planes; ++p)
                  for (std::size_t i = 0; i < oh; ++i)
                    for (std::size_t j = 0; j < ow; ++j) {
                      const std::size_t o = p * oh * ow + i * ow + j;
                      T* base = gx.data() + p * h * w + 2 * i * w + 2 * j;
                      if (mode == PoolMode::Max) {
                        const std::uint8_t k = arg[o];
                        base[(k >> 1) * w + (k & 1)] += gy[o];
                      } else {
                        const T g = gy[o] * T(0.25);
                        base[0] += g;
                        base[1] += g;
                        base[w] += g;
                        base[w + 1] += g;
                      }
                    }
              });
  }
  return y;
}

/// [N,C,H,W] -> [N,C] spatial mean.
template <class T>
Tensor<T> global_avg_pool(Tape<T>* tape, const Tensor<T>& x) {
  detail::require_rank("global_avg_pool", x, 4);
  const std::size_t n = x.dim(0), c = x.dim(1), hw = x.dim(2) * x.dim(3);
  if (hw == 0) throw ShapeError("global_avg_pool: empty spatial extent");
  Tensor<T> y({n, c});
  for (std::size_t p = 0; p < n * c; ++p) {
    T acc{0};
    const T* src = x.ptr() + p * hw;
    for (std::size_t j = 0; j < hw; ++j) acc += src[j];
    y[p] = acc / static_cast<T>(hw);
  }
  if (auto* t = recording(tape, x)) {
    t->record("global_avg_pool", {x}, y, [x, y, n, c, hw]() mutable {
      auto gx = x.grad_mut();
      for (std::size_t p = 0; p < n * c; ++p) {
        const T g = y.grad()[p] / static_cast<T>(hw);
        T* d = gx.data() + p * hw;
        for (std::size_t j = 0; j < hw; ++j) d[j] += g;
      }
    });
  }
  return y;
}

/// x [N,in] . weight [in,out] + bias [out].
template <class T>
Tensor<T> dense(Tape<T>* tape, const Tensor<T>& x, const Tensor<T>& weight,
                const Tensor<T>& bias) {
  if (x.rank() != 2 || weight.rank() != 2 || x.dim(1) != weight.dim(0) ||
      (bias.defined() && bias.numel() != weight.dim(1)))
    throw ShapeError("dense: input " + to_string(x.shape()) + " weight " +
                     to_string(weight.shape()) + " bias " +
                     (bias.defined() ? to_string(bias.shape()) : "none"));
  const std::size_t n = x.dim(0), in = x.dim(1), out = weight.dim(1);
  Tensor<T> y({n, out});
  for (std::size_t r = 0; r < n; ++r) {
    T* yr = y.ptr() + r * out;
    for (std::size_t o = 0; o < out; ++o) yr[o] = bias.defined() ? bias[o] : T{0};
    for (std::size_t i = 0; i < in; ++i) {
      const T xv = x[r * in + i];
      const T* wr = weight.ptr() + i * out;
#pragma omp simd
      for (std::size_t o = 0; o < out; ++o) yr[o] += xv * wr[o];
    }
  }
  if (auto* t = recording(tape, x, weight, bias)) {
    t->record("dense", {x, weight, bias}, y,
              [x, weight, bias, y, n, in, out]() mutable {
                const T* gy = y.grad().data();
                if (bias.defined() && bias.requires_grad()) {
                  auto gb = bias.grad_mut();
                  for (std::size_t r = 0; r < n; ++r)
                    for (std::size_t o = 0; o < out; ++o) gb[o] += gy[r * out + o];
                }
                if (weight.requires_grad()) {
                  auto gw = weight.grad_mut();
                  for (std::size_t r = 0; r < n; ++r)
                    for (std::size_t i = 0; i < in; ++i) {
                      const T xv = x[r * in + i];
                      T* d = gw.data() + i * out;
                      for (std::size_t o = 0; o < out; ++o) d[o] += xv * gy[r * out + o];
                    }
                }
                if (x.requires_grad()) {
                  auto gx = x.grad_mut();
                  for (std::size_t r = 0; r < n; ++r)
                    for (std::size_t i = 0; i < in; ++i) {
                      const T* wr = weight.ptr() + i * out;
                      T acc{0};
                      for (std::size_t o = 0; o < out; ++o) acc += wr[o] * gy[r * out + o];
                      gx[r * in + i] += acc;
                    }
                }
              });
  }
  return y;
}

template <class T>
Tensor<T> relu(Tape<T>* tape, const Tensor<T>& x) {
  Tensor<T> y(x.shape());
  const std::size_t m = x.numel();
  const T* p = x.ptr();
  T* q = y.ptr();
#pragma omp simd
  for (std::size_t i = 0; i < m; ++i) q[i] = p[i] > T{0} ? p[i] : T{0};
  if (auto* t = recording(tape, x)) {
    t->record("relu", {x}, y, [x, y, m]() mutable {
      T* g = x.grad_mut().data();
      const T* gy = y.grad().data();
      const T* p = x.ptr();
#pragma omp simd
      for (std::size_t i = 0; i < m; ++i) g[i] += p[i] > T{0} ? gy[i] : T{0};
    });
  }
  return y;
}

template <class T>
Tensor<T> sigmoid(Tape<T>* tape, const Tensor<T>& x) {
  Tensor<T> y(x.shape());
  for (std::size_t i = 0; i < x.numel(); ++i) {
    const T v = x[i];
    // split by sign so exp never overflows
    if (v >= T{0}) {
      y[i] = T{1} / (T{1} + std::exp(-v));
    } else {
      const T e = std::exp(v);
      y[i] = e / (T{1} + e);
    }
  }
  if (auto* t = recording(tape, x)) {
    t->record("sigmoid", {x}, y, [x, y]() mutable {
      auto g = x.grad_mut();
      auto gy = y.grad();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += gy[i] * y[i] * (T{1} - y[i]);
    });
  }
  return y;
}

/// Softmax over the last axis with max subtraction.
template <class T>
Tensor<T> softmax(Tape<T>* tape, const Tensor<T>& x) {
  if (x.rank() == 0) throw ShapeError("softmax: scalar input");
  const std::size_t d = x.shape().back();
  const std::size_t rows = d ? x.numel() / d : 0;
  Tensor<T> y(x.shape());
  for (std::size_t r = 0; r < rows; ++r) {
    const T* p = x.ptr() + r * d;
    T* q = y.ptr() + r * d;
    const T mx = *std::max_element(p, p + d);
    T s{0};
    for (std::size_t j = 0; j < d; ++j) s += (q[j] = std::exp(p[j] - mx));
    for (std::size_t j = 0; j < d; ++j) q[j] /= s;
  }
  if (auto* t = recording(tape, x)) {
    t->record("softmax", {x}, y, [x, y, rows, d]() mutable {
      auto g = x.grad_mut();
      auto gy = y.grad();
      for (std::size_t r = 0; r < rows; ++r) {
        T dot{0};
        for (std::size_t j = 0; j < d; ++j) dot += gy[r * d + j] * y[r * d + j];
        for (std::size_t j = 0; j < d; ++j)
          g[r * d + j] += y[r * d + j] * (gy[r * d + j] - dot);
      }
    });
  }
  return y;
}

enum class Activation { Relu, Sigmoid, Softmax };

template <class T>
Tensor<T> activation(Tape<T>* tape, const Tensor<T>& x, Activation kind) {
  switch (kind) {
    case Activation::Relu: return relu(tape, x);
    case Activation::Sigmoid: return sigmoid(tape, x);
    case Activation::Softmax: return softmax(tape, x);
  }
  throw ContractError("activation: unknown kind");
}

/// Inverted dropout. Eval mode and rate 0 return x itself.
template <class T>
Tensor<T> dropout(Tape<T>* tape, const Tensor<T>& x, double rate, Mode mode,
                  Rng& rng) {
  if (!(rate >= 0.0 && rate < 1.0))
    throw ContractError("dropout: rate must lie in [0,1), got " +
                        std::to_string(rate));
  if (mode == Mode::Eval || rate == 0.0) return x;
  const T keep_scale = static_cast<T>(1.0 / (1.0 - rate));
  // Each 64-bit draw yields two 32-bit uniforms; keep iff u >= rate * 2^32.
  const auto threshold = static_cast<std::uint64_t>(std::llround(rate * 4294967296.0));
  const std::size_t m = x.numel();
  std::vector<std::uint8_t> keep(m);
  for (std::size_t i = 0; i < m; i += 2) {
    const std::uint64_t r = rng.next();
    keep[i] = (r & 0xffffffffULL) >= threshold;
    if (i + 1 < m) keep[i + 1] = (r >> 32) >= threshold;
  }
  Tensor<T> y(x.shape());
  const T* xp = x.ptr();
  T* yp = y.ptr();
#pragma omp simd
  for (std::size_t i = 0; i < m; ++i) yp[i] = keep[i] ? xp[i] * keep_scale : T{0};
  if (auto* t = recording(tape, x)) {
    t->record("dropout", {x}, y, [x, y, keep = std::move(keep), keep_scale]() mutable {
      T* g = x.grad_mut().data();
      const T* gy = y.grad().data();
      const std::size_t m = keep.size();
#pragma omp simd
      for (std::size_t i = 0; i < m; ++i) g[i] += keep[i] ? gy[i] * keep_scale : T{0};
    });
  }
  return y;
}

/// [N,C1,H,W] ++ [N,C2,H,W] -> [N,C1+C2,H,W]; a first.
template <class T>
Tensor<T> concat_channels(Tape<T>* tape, const Tensor<T>& a,
                          const Tensor<T>& b) {
  detail::require_rank("concat_channels", a, 4);
  detail::require_rank("concat_channels", b, 4);
  if (a.dim(0) != b.dim(0) || a.dim(2) != b.dim(2) || a.dim(3) != b.dim(3))
    throw ShapeError("concat_channels: cannot join " + to_string(a.shape()) +
                     " and " + to_string(b.shape()));
  const std::size_t n = a.dim(0), hw = a.dim(2) * a.dim(3);
  const std::size_t sa = a.dim(1) * hw, sb = b.dim(1) * hw;
  Tensor<T> y({n, a.dim(1) + b.dim(1), a.dim(2), a.dim(3)});
  for (std::size_t i = 0; i < n; ++i) {
    std::copy_n(a.ptr() + i * sa, sa, y.ptr() + i * (sa + sb));
    std::copy_n(b.ptr() + i * sb, sb, y.ptr() + i * (sa + sb) + sa);
  }
  if (auto* t = recording(tape, a, b)) {
    t->record("concat_channels", {a, b}, y, [a, b, y, n, sa, sb]() mutable {
      const T* gy = y.grad().data();
      for (std::size_t i = 0; i < n; ++i) {
        if (a.requires_grad()) {
          T* d = a.grad_mut().data() + i * sa;
          for (std::size_t j = 0; j < sa; ++j) d[j] += gy[i * (sa + sb) + j];
        }
        if (b.requires_grad()) {
          T* d = b.grad_mut().data() + i * sb;
          for (std::size_t j = 0; j < sb; ++j) d[j] += gy[i * (sa + sb) + sa + j];
        }
      }
    });
  }
  return y;
}

/// Row-wise x / max(||x||_2, eps) for x [N,D].
template <class T>
Tensor<T> l2_normalize(Tape<T>* tape, const Tensor<T>& x, T eps = T(1e-12)) {
  detail::require_rank("l2_normalize", x, 2);
  const std::size_t n = x.dim(0), d = x.dim(1);
  Tensor<T> y(x.shape());
  std::vector<T> norms(n);
  for (std::size_t r = 0; r < n; ++r) {
    T s{0};
    for (std::size_t j = 0; j < d; ++j) s += x[r * d + j] * x[r * d + j];
    norms[r] = std::max(std::sqrt(s), eps);
    for (std::size_t j = 0; j < d; ++j) y[r * d + j] = x[r * d + j] / norms[r];
  }
  if (auto* t = recording(tape, x)) {
    t->record("l2_normalize", {x}, y, [x, y, norms, n, d, eps]() mutable {
      auto g = x.grad_mut();
      auto gy = y.grad();
      for (std::size_t r = 0; r < n; ++r) {
        if (norms[r] <= eps) {
          for (std::size_t j = 0; j < d; ++j) g[r * d + j] += gy[r * d + j] / eps;
          continue;
        }
        T dot{0};
        for (std::size_t j = 0; j < d; ++j) dot += y[r * d + j] * gy[r * d + j];
        for (std::size_t j = 0; j < d; ++j)
          g[r * d + j] += (gy[r * d + j] - y[r * d + j] * dot) / norms[r];
      }
    });
  }
  return y;
}

// Initializers.

template <class T>
void fill_uniform(Tensor<T>& t, Rng& rng, double limit) {
  for (auto& v : t.data()) v = static_cast<T>(rng.uniform(-limit, limit));
}

/// He-uniform: U(-sqrt(6/fan_in), sqrt(6/fan_in)).
template <class T>
void he_uniform(Tensor<T>& t, Rng& rng, std::size_t fan_in) {
  fill_uniform(t, rng, std::sqrt(6.0 / static_cast<double>(fan_in)));
}

/// Glorot-uniform: U(-sqrt(6/(fan_in+fan_out)), +).
template <class T>
void glorot_uniform(Tensor<T>& t, Rng& rng, std::size_t fan_in,
                    std::size_t fan_out) {
  fill_uniform(t, rng, std::sqrt(6.0 / static_cast<double>(fan_in + fan_out)));
}

}  // namespace wscn
