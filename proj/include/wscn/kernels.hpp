#pragma once

// Raw NCHW loops behind the differentiable ops. Each routine handles one
// image; callers loop over the batch.
//
// Stride-1 convolutions, depthwise convolutions and the stride-2 transpose
// convolution all reduce to two primitives over zero-padded planes:
//   tap_conv:   out[o](y,x) (+)= b[o] + sum_c sum_t w[o][c][t] * in[c](y+dy_t, x+dx_t)
//   tap_wgrad:  gw[o][c][t] += sum_{y,x} g[o](y,x) * in[c](y+dy_t, x+dx_t)
// Both walk output rows in chunks of one 64-byte vector and keep a block of
// output channels in registers.

#include <algorithm>
#include <cstddef>
#include <cstring>
#include <type_traits>
#include <vector>

namespace wscn::kernels {

template <class T>
struct Simd {
  static constexpr std::size_t width = 64 / sizeof(T);
  typedef T vec __attribute__((vector_size(64)));

  static vec load(const T* p) {
    vec v;
    std::memcpy(&v, p, sizeof v);
    return v;
  }
  // First n lanes from p, rest zero.
  static vec load(const T* p, std::size_t n) {
    vec v{};
    std::memcpy(&v, p, n * sizeof(T));
    return v;
  }
  static void store(T* p, const vec& v, std::size_t n) {
    std::memcpy(p, &v, n * sizeof(T));
  }
  static T hsum(const vec& v) {
    T s{0};
    for (std::size_t i = 0; i < width; ++i) s += v[i];
    return s;
  }
};

inline std::size_t round_up(std::size_t n, std::size_t m) {
  return (n + m - 1) / m * m;
}

/// A stack of 2-D planes inside a flat buffer. `slack` means every row can
/// be over-read by one vector past `cols` plus the largest tap offset.
struct PlaneLayout {
  std::size_t channels, rows, cols;
  std::size_t row_stride, plane_stride;
  bool slack;
};

inline PlaneLayout dense_layout(std::size_t c, std::size_t h, std::size_t w) {
  return {c, h, w, w, h * w, false};
}

/// Copies dense [C,H,W] into a zeroed buffer with the given top/left margin,
/// `extra_rows`/`extra_cols` of zeros after the data, and vector slack.
template <class T>
PlaneLayout pad_planes(const T* src, std::size_t c, std::size_t h,
                       std::size_t w, std::size_t top, std::size_t left,
                       std::size_t extra_rows, std::size_t extra_cols,
                       std::vector<T>& buf) {
  const std::size_t rows = top + h + extra_rows;
  const std::size_t stride =
      round_up(left + w + extra_cols, Simd<T>::width) + Simd<T>::width;
  const std::size_t plane = rows * stride;
  buf.assign(c * plane, T{0});
  for (std::size_t ch = 0; ch < c; ++ch)
    for (std::size_t y = 0; y < h; ++y)
      std::copy_n(src + (ch * h + y) * w, w,
                  buf.data() + ch * plane + (top + y) * stride + left);
  return {c, rows, left + w + extra_cols, stride, plane, true};
}

struct Tap {
  std::size_t dy, dx;
};

namespace detail {

template <class T, std::size_t OB>
void tap_conv_block(const PlaneLayout& in_l, const T* in, const Tap* taps,
                    std::size_t nt, const T* wpack /* [C][nt][OB] */,
                    const T* bias, const PlaneLayout& out_l, T* out,
                    bool accumulate) {
  using S = Simd<T>;
  using V = typename S::vec;
  constexpr std::size_t L = S::width;
  std::vector<std::size_t> offs(nt);
  for (std::size_t t = 0; t < nt; ++t)
    offs[t] = taps[t].dy * in_l.row_stride + taps[t].dx;
  for (std::size_t y = 0; y < out_l.rows; ++y) {
    for (std::size_t j0 = 0; j0 < out_l.cols; j0 += L) {
      const std::size_t n = std::min(L, out_l.cols - j0);
      const bool safe = in_l.slack || n == L;
      V a[OB];
      for (std::size_t o = 0; o < OB; ++o) {
        T* op = out + o * out_l.plane_stride + y * out_l.row_stride + j0;
        if (accumulate)
          a[o] = S::load(op, n);
        else
          a[o] = V{} + (bias ? bias[o] : T{0});
      }
      const T* row = in + y * in_l.row_stride + j0;
      for (std::size_t c = 0; c < in_l.channels; ++c) {
        const T* base = row + c * in_l.plane_stride;
        const T* wc = wpack + c * nt * OB;
        for (std::size_t t = 0; t < nt; ++t) {
          const V v = safe ? S::load(base + offs[t]) : S::load(base + offs[t], n);
          const T* wt = wc + t * OB;
          for (std::size_t o = 0; o < OB; ++o) a[o] += v * wt[o];
        }
      }
      for (std::size_t o = 0; o < OB; ++o)
        S::store(out + o * out_l.plane_stride + y * out_l.row_stride + j0, a[o], n);
    }
  }
}

}  // namespace detail

/// out[o] (+)= bias[o] + sum_c sum_t w[(o*C + c)*nt + t] * shift_t(in[c]).
/// Output has out_l.channels planes of out_l.rows x out_l.cols.
template <class T>
void tap_conv(const PlaneLayout& in_l, const T* in, const Tap* taps,
              std::size_t nt, const T* w, const T* bias,
              const PlaneLayout& out_l, T* out, bool accumulate,
              std::vector<T>& wpack) {
  const std::size_t oc_total = out_l.channels, c_total = in_l.channels;
  std::size_t o0 = 0;
  auto run = [&](auto block) {
    constexpr std::size_t OB = decltype(block)::value;
    wpack.resize(c_total * nt * OB);
    for (; o0 + OB <= oc_total; o0 += OB) {
      for (std::size_t c = 0; c < c_total; ++c)
        for (std::size_t t = 0; t < nt; ++t)
          for (std::size_t o = 0; o < OB; ++o)
            wpack[(c * nt + t) * OB + o] = w[((o0 + o) * c_total + c) * nt + t];
      detail::tap_conv_block<T, OB>(in_l, in, taps, nt, wpack.data(),
                                    bias ? bias + o0 : nullptr, out_l,
                                    out + o0 * out_l.plane_stride, accumulate);
    }
  };
  run(std::integral_constant<std::size_t, 8>{});
  run(std::integral_constant<std::size_t, 4>{});
  run(std::integral_constant<std::size_t, 2>{});
  run(std::integral_constant<std::size_t, 1>{});
}

namespace detail {

// CB input channels at once against one d(out) plane; NT taps each. Every
// (channel, tap) pair owns an accumulator so the FMA chains are independent.
template <class T, std::size_t NT, std::size_t CB>
void tap_wgrad_block(const PlaneLayout& g_l, const T* gp,
                     const PlaneLayout& in_l, const T* ip,
                     const std::size_t* offs, T* gw /* [CB][NT] rows of stride NT */) {
  using S = Simd<T>;
  using V = typename S::vec;
  constexpr std::size_t L = S::width;
  V acc[CB][NT] = {};
  for (std::size_t y = 0; y < g_l.rows; ++y) {
    const T* grow = gp + y * g_l.row_stride;
    const T* irow = ip + y * in_l.row_stride;
    for (std::size_t j0 = 0; j0 < g_l.cols; j0 += L) {
      const std::size_t n = std::min(L, g_l.cols - j0);
      const V gv = n == L || g_l.slack ? S::load(grow + j0) : S::load(grow + j0, n);
      const bool safe = in_l.slack || n == L;
      for (std::size_t cb = 0; cb < CB; ++cb) {
        const T* base = irow + cb * in_l.plane_stride + j0;
        for (std::size_t t = 0; t < NT; ++t) {
          const T* p = base + offs[t];
          acc[cb][t] += gv * (safe ? S::load(p) : S::load(p, n));
        }
      }
    }
  }
  for (std::size_t cb = 0; cb < CB; ++cb)
    for (std::size_t t = 0; t < NT; ++t) gw[cb * NT + t] += S::hsum(acc[cb][t]);
}

template <class T, std::size_t NT, std::size_t CB>
void tap_wgrad_fixed(const PlaneLayout& g_l, const T* g, const PlaneLayout& in_l,
                     const T* in, const std::size_t* offs, T* gw) {
  for (std::size_t o = 0; o < g_l.channels; ++o) {
    const T* gp = g + o * g_l.plane_stride;
    std::size_t c = 0;
    for (; c + CB <= in_l.channels; c += CB)
      tap_wgrad_block<T, NT, CB>(g_l, gp, in_l, in + c * in_l.plane_stride, offs,
                                 gw + (o * in_l.channels + c) * NT);
    for (; c < in_l.channels; ++c)
      tap_wgrad_block<T, NT, 1>(g_l, gp, in_l, in + c * in_l.plane_stride, offs,
                                gw + (o * in_l.channels + c) * NT);
  }
}

}  // namespace detail

/// gw[(o*C + c)*nt + t] += sum over g[o] plane of g * shift_t(in[c]).
/// Lanes of g past `cols` must read as zero when g_l has slack.
template <class T>
void tap_wgrad(const PlaneLayout& g_l, const T* g, const PlaneLayout& in_l,
               const T* in, const Tap* taps, std::size_t nt, T* gw) {
  std::vector<std::size_t> offs(nt);
  for (std::size_t t = 0; t < nt; ++t)
    offs[t] = taps[t].dy * in_l.row_stride + taps[t].dx;
  switch (nt) {
    case 1: return detail::tap_wgrad_fixed<T, 1, 8>(g_l, g, in_l, in, offs.data(), gw);
    case 2: return detail::tap_wgrad_fixed<T, 2, 6>(g_l, g, in_l, in, offs.data(), gw);
    case 4: return detail::tap_wgrad_fixed<T, 4, 4>(g_l, g, in_l, in, offs.data(), gw);
    case 9: return detail::tap_wgrad_fixed<T, 9, 2>(g_l, g, in_l, in, offs.data(), gw);
    default: break;
  }
  // Any other tap count: one tap at a time.
  std::vector<T> part(g_l.channels * in_l.channels);
  for (std::size_t t = 0; t < nt; ++t) {
    std::fill(part.begin(), part.end(), T{0});
    detail::tap_wgrad_fixed<T, 1, 8>(g_l, g, in_l, in, &offs[t], part.data());
    for (std::size_t i = 0; i < part.size(); ++i) gw[i * nt + t] += part[i];
  }
}

/// Scratch buffers reused across the images of a batch.
template <class T>
struct Workspace {
  std::vector<T> a, b, pack, weights;
};

struct ConvGeom {
  std::size_t in_c, in_h, in_w;
  std::size_t out_c, out_h, out_w;
  std::size_t k;
  std::size_t stride;
  std::ptrdiff_t pad_top, pad_left;
};

namespace detail {

inline std::vector<Tap> square_taps(std::size_t k) {
  std::vector<Tap> taps;
  for (std::size_t ky = 0; ky < k; ++ky)
    for (std::size_t kx = 0; kx < k; ++kx) taps.push_back({ky, kx});
  return taps;
}

// 1x1 convolution without padding: planes are treated as single long rows.
inline bool flat_pointwise(const ConvGeom& g) {
  return g.k == 1 && g.stride == 1 && g.pad_top == 0 && g.pad_left == 0;
}

inline std::size_t extra(std::ptrdiff_t v) {
  return static_cast<std::size_t>(std::max<std::ptrdiff_t>(0, v));
}

template <class T>
T sample(const T* in, const ConvGeom& g, std::size_t c, std::ptrdiff_t iy,
         std::ptrdiff_t ix) {
  if (iy < 0 || ix < 0 || iy >= static_cast<std::ptrdiff_t>(g.in_h) ||
      ix >= static_cast<std::ptrdiff_t>(g.in_w))
    return T{0};
  return in[(c * g.in_h + static_cast<std::size_t>(iy)) * g.in_w +
            static_cast<std::size_t>(ix)];
}

}  // namespace detail

/// out[oc] = bias[oc] + sum_c w[oc,c] (*) in[c]   (cross-correlation)
template <class T>
void conv_forward(const ConvGeom& g, const T* in, const T* w, const T* bias,
                  T* out, Workspace<T>& ws) {
  if (detail::flat_pointwise(g)) {
    const Tap tap{0, 0};
    const std::size_t hw = g.in_h * g.in_w;
    tap_conv(PlaneLayout{g.in_c, 1, hw, hw, hw, false}, in, &tap, 1, w, bias,
             PlaneLayout{g.out_c, 1, hw, hw, hw, false}, out, false, ws.pack);
    return;
  }
  if (g.stride == 1 && g.pad_top >= 0 && g.pad_left >= 0) {
    const auto taps = detail::square_taps(g.k);
    const std::size_t top = static_cast<std::size_t>(g.pad_top);
    const std::size_t left = static_cast<std::size_t>(g.pad_left);
    const auto in_l = pad_planes(
        in, g.in_c, g.in_h, g.in_w, top, left,
        detail::extra(static_cast<std::ptrdiff_t>(g.out_h + g.k - 1 - top - g.in_h)),
        detail::extra(static_cast<std::ptrdiff_t>(g.out_w + g.k - 1 - left - g.in_w)),
        ws.a);
    tap_conv(in_l, ws.a.data(), taps.data(), taps.size(), w, bias,
             dense_layout(g.out_c, g.out_h, g.out_w), out, false, ws.pack);
    return;
  }
  // General stride: direct summation.
  for (std::size_t oc = 0; oc < g.out_c; ++oc)
    for (std::size_t oy = 0; oy < g.out_h; ++oy)
      for (std::size_t ox = 0; ox < g.out_w; ++ox) {
        T acc = bias ? bias[oc] : T{0};
        for (std::size_t c = 0; c < g.in_c; ++c)
          for (std::size_t ky = 0; ky < g.k; ++ky)
            for (std::size_t kx = 0; kx < g.k; ++kx)
              acc += w[((oc * g.in_c + c) * g.k + ky) * g.k + kx] *
                     detail::sample(in, g, c,
                                    static_cast<std::ptrdiff_t>(oy * g.stride + ky) - g.pad_top,
                                    static_cast<std::ptrdiff_t>(ox * g.stride + kx) - g.pad_left);
        out[(oc * g.out_h + oy) * g.out_w + ox] = acc;
      }
}

/// Accumulates d(in), d(w), d(bias) given d(out). Any gradient pointer may
/// be null to skip it.
template <class T>
void conv_backward(const ConvGeom& g, const T* in, const T* w, const T* gout,
                   T* gin, T* gw, T* gbias, Workspace<T>& ws) {
  const std::size_t kk = g.k * g.k;
  const std::size_t oplane = g.out_h * g.out_w;
  if (gbias)
    for (std::size_t oc = 0; oc < g.out_c; ++oc) {
      T acc{0};
      const T* gp = gout + oc * oplane;
#pragma omp simd reduction(+ : acc)
      for (std::size_t i = 0; i < oplane; ++i) acc += gp[i];
      gbias[oc] += acc;
    }
  if (detail::flat_pointwise(g)) {
    const Tap tap{0, 0};
    const std::size_t hw = oplane;
    const PlaneLayout in_l{g.in_c, 1, hw, hw, hw, false};
    const PlaneLayout out_l{g.out_c, 1, hw, hw, hw, false};
    if (gw) tap_wgrad(out_l, gout, in_l, in, &tap, 1, gw);
    if (gin) {
      ws.weights.resize(g.in_c * g.out_c);
      for (std::size_t oc = 0; oc < g.out_c; ++oc)
        for (std::size_t c = 0; c < g.in_c; ++c)
          ws.weights[c * g.out_c + oc] = w[oc * g.in_c + c];
      tap_conv(out_l, gout, &tap, 1, ws.weights.data(), static_cast<const T*>(nullptr),
               in_l, gin, true, ws.pack);
    }
    return;
  }
  if (g.stride == 1 && g.pad_top >= 0 && g.pad_left >= 0) {
    const auto taps = detail::square_taps(g.k);
    const std::size_t top = static_cast<std::size_t>(g.pad_top);
    const std::size_t left = static_cast<std::size_t>(g.pad_left);
    if (gw) {
      const auto in_l = pad_planes(
          in, g.in_c, g.in_h, g.in_w, top, left,
          detail::extra(static_cast<std::ptrdiff_t>(g.out_h + g.k - 1 - top - g.in_h)),
          detail::extra(static_cast<std::ptrdiff_t>(g.out_w + g.k - 1 - left - g.in_w)),
          ws.a);
      tap_wgrad(dense_layout(g.out_c, g.out_h, g.out_w), gout, in_l, ws.a.data(),
                taps.data(), kk, gw);
    }
    if (gin) {
      // Full correlation of d(out) with the flipped, transposed kernel.
      const std::size_t gtop = g.k - 1 - top, gleft = g.k - 1 - left;
      const auto g_l = pad_planes(
          gout, g.out_c, g.out_h, g.out_w, gtop, gleft,
          detail::extra(static_cast<std::ptrdiff_t>(g.in_h + g.k - 1 - gtop - g.out_h)),
          detail::extra(static_cast<std::ptrdiff_t>(g.in_w + g.k - 1 - gleft - g.out_w)),
          ws.b);
      ws.weights.resize(g.in_c * g.out_c * kk);
      for (std::size_t oc = 0; oc < g.out_c; ++oc)
        for (std::size_t c = 0; c < g.in_c; ++c)
          for (std::size_t t = 0; t < kk; ++t)
            ws.weights[(c * g.out_c + oc) * kk + (kk - 1 - t)] =
                w[(oc * g.in_c + c) * kk + t];
      tap_conv(g_l, ws.b.data(), taps.data(), kk, ws.weights.data(),
               static_cast<const T*>(nullptr), dense_layout(g.in_c, g.in_h, g.in_w),
               gin, true, ws.pack);
    }
    return;
  }
  for (std::size_t oc = 0; oc < g.out_c; ++oc)
    for (std::size_t oy = 0; oy < g.out_h; ++oy)
      for (std::size_t ox = 0; ox < g.out_w; ++ox) {
        const T go = gout[(oc * g.out_h + oy) * g.out_w + ox];
        for (std::size_t c = 0; c < g.in_c; ++c)
          for (std::size_t ky = 0; ky < g.k; ++ky) {
            const auto iy = static_cast<std::ptrdiff_t>(oy * g.stride + ky) - g.pad_top;
            if (iy < 0 || iy >= static_cast<std::ptrdiff_t>(g.in_h)) continue;
            for (std::size_t kx = 0; kx < g.k; ++kx) {
              const auto ix = static_cast<std::ptrdiff_t>(ox * g.stride + kx) - g.pad_left;
              if (ix < 0 || ix >= static_cast<std::ptrdiff_t>(g.in_w)) continue;
              const std::size_t wi = ((oc * g.in_c + c) * g.k + ky) * g.k + kx;
              const std::size_t ii = (c * g.in_h + static_cast<std::size_t>(iy)) * g.in_w +
                                     static_cast<std::size_t>(ix);
              if (gw) gw[wi] += go * in[ii];
              if (gin) gin[ii] += go * w[wi];
            }
          }
      }
}

/// Per-channel k x k convolution, stride 1, padding k/2. w is [C,1,k,k].
template <class T>
void depthwise_forward(std::size_t c_count, std::size_t h, std::size_t w_,
                       std::size_t k, const T* in, const T* w, T* out,
                       Workspace<T>& ws) {
  const auto taps = detail::square_taps(k);
  const std::size_t p = k / 2;
  const auto in_l = pad_planes(in, c_count, h, w_, p, p, p, p, ws.a);
  for (std::size_t c = 0; c < c_count; ++c) {
    PlaneLayout one = in_l;
    one.channels = 1;
    tap_conv(one, ws.a.data() + c * in_l.plane_stride, taps.data(), taps.size(),
             w + c * k * k, static_cast<const T*>(nullptr), dense_layout(1, h, w_),
             out + c * h * w_, false, ws.pack);
  }
}

template <class T>
void depthwise_backward(std::size_t c_count, std::size_t h, std::size_t w_,
                        std::size_t k, const T* in, const T* w, const T* gout,
                        T* gin, T* gw, Workspace<T>& ws) {
  const auto taps = detail::square_taps(k);
  const std::size_t p = k / 2, kk = k * k, plane = h * w_;
  if (gw) {
    const auto in_l = pad_planes(in, c_count, h, w_, p, p, p, p, ws.a);
    for (std::size_t c = 0; c < c_count; ++c) {
      PlaneLayout one = in_l;
      one.channels = 1;
      tap_wgrad(dense_layout(1, h, w_), gout + c * plane, one,
                ws.a.data() + c * in_l.plane_stride, taps.data(), kk, gw + c * kk);
    }
  }
  if (gin) {
    const auto g_l = pad_planes(gout, c_count, h, w_, k - 1 - p, k - 1 - p, p, p, ws.b);
    std::vector<T> flipped(kk);
    for (std::size_t c = 0; c < c_count; ++c) {
      for (std::size_t t = 0; t < kk; ++t) flipped[kk - 1 - t] = w[c * kk + t];
      PlaneLayout one = g_l;
      one.channels = 1;
      tap_conv(one, ws.b.data() + c * g_l.plane_stride, taps.data(), kk,
               flipped.data(), static_cast<const T*>(nullptr), dense_layout(1, h, w_),
               gin + c * plane, true, ws.pack);
    }
  }
}

// Transposed 3x3 convolution, stride 2, output exactly 2H x 2W:
//   out[oc, 2*iy + ky, 2*ix + kx] += w[c, oc, ky, kx] * in[c, iy, ix]
// with taps landing at row/column 2H (2W) cropped. Output pixels split into
// four parity planes (row parity, column parity), each H x W. Tap (ky,kx)
// feeds plane (ky&1, kx&1) from input pixel (i - (ky>>1), j - (kx>>1)).

namespace detail {

struct ParityTaps {
  std::size_t count = 0;
  std::size_t ky[4], kx[4];
};

inline ParityTaps parity_taps(std::size_t py, std::size_t px) {
  ParityTaps p;
  for (std::size_t ky = py; ky < 3; ky += 2)
    for (std::size_t kx = px; kx < 3; kx += 2) {
      p.ky[p.count] = ky;
      p.kx[p.count] = kx;
      ++p.count;
    }
  return p;
}

}  // namespace detail

template <class T>
void tconv_forward(std::size_t in_c, std::size_t out_c, std::size_t h,
                   std::size_t w_, const T* in, const T* w, const T* bias,
                   T* out, Workspace<T>& ws) {
  const std::size_t plane = h * w_, ow = 2 * w_;
  // one zero row/column above and left so shifts by -1 stay in range
  const auto in_l = pad_planes(in, in_c, h, w_, 1, 1, 0, 0, ws.a);
  ws.b.resize(4 * out_c * plane);
  for (std::size_t p = 0; p < 4; ++p) {
    const auto pt = detail::parity_taps(p >> 1, p & 1);
    Tap taps[4];
    ws.weights.resize(out_c * in_c * pt.count);
    for (std::size_t t = 0; t < pt.count; ++t) {
      taps[t] = {1 - (pt.ky[t] >> 1), 1 - (pt.kx[t] >> 1)};
      for (std::size_t oc = 0; oc < out_c; ++oc)
        for (std::size_t c = 0; c < in_c; ++c)
          ws.weights[(oc * in_c + c) * pt.count + t] =
              w[(c * out_c + oc) * 9 + pt.ky[t] * 3 + pt.kx[t]];
    }
    tap_conv(in_l, ws.a.data(), taps, pt.count, ws.weights.data(), bias,
             dense_layout(out_c, h, w_), ws.b.data() + p * out_c * plane, false,
             ws.pack);
  }
  for (std::size_t oc = 0; oc < out_c; ++oc) {
    T* op = out + oc * 4 * plane;
    for (std::size_t p = 0; p < 4; ++p) {
      const std::size_t py = p >> 1, px = p & 1;
      const T* src = ws.b.data() + (p * out_c + oc) * plane;
      for (std::size_t i = 0; i < h; ++i)
        for (std::size_t j = 0; j < w_; ++j)
          op[(2 * i + py) * ow + 2 * j + px] = src[i * w_ + j];
    }
  }
}

template <class T>
void tconv_backward(std::size_t in_c, std::size_t out_c, std::size_t h,
                    std::size_t w_, const T* in, const T* w, const T* gout,
                    T* gin, T* gw, T* gbias, Workspace<T>& ws) {
  const std::size_t plane = h * w_, ow = 2 * w_;
  // Parity planes of d(out), with a zero row/column below and right.
  const std::size_t stride = round_up(w_ + 1, Simd<T>::width) + Simd<T>::width;
  const std::size_t pplane = (h + 1) * stride;
  std::vector<T>& gp = ws.b;
  gp.assign(4 * out_c * pplane, T{0});
  for (std::size_t oc = 0; oc < out_c; ++oc) {
    const T* src = gout + oc * 4 * plane;
    T acc{0};
    for (std::size_t p = 0; p < 4; ++p) {
      const std::size_t py = p >> 1, px = p & 1;
      T* dst = gp.data() + (p * out_c + oc) * pplane;
      for (std::size_t i = 0; i < h; ++i)
        for (std::size_t j = 0; j < w_; ++j) {
          const T v = src[(2 * i + py) * ow + 2 * j + px];
          dst[i * stride + j] = v;
          acc += v;
        }
    }
    if (gbias) gbias[oc] += acc;
  }
  const PlaneLayout gp_l{out_c, h + 1, w_ + 1, stride, pplane, true};
  PlaneLayout in_l{};
  if (gw) in_l = pad_planes(in, in_c, h, w_, 1, 1, 0, 0, ws.a);
  for (std::size_t p = 0; p < 4; ++p) {
    const auto pt = detail::parity_taps(p >> 1, p & 1);
    const T* gpp = gp.data() + p * out_c * pplane;
    if (gin) {
      Tap taps[4];
      ws.weights.resize(in_c * out_c * pt.count);
      for (std::size_t t = 0; t < pt.count; ++t) {
        taps[t] = {pt.ky[t] >> 1, pt.kx[t] >> 1};
        for (std::size_t c = 0; c < in_c; ++c)
          for (std::size_t oc = 0; oc < out_c; ++oc)
            ws.weights[(c * out_c + oc) * pt.count + t] =
                w[(c * out_c + oc) * 9 + pt.ky[t] * 3 + pt.kx[t]];
      }
      tap_conv(gp_l, gpp, taps, pt.count, ws.weights.data(),
               static_cast<const T*>(nullptr), dense_layout(in_c, h, w_), gin, true,
               ws.pack);
    }
    if (gw) {
      Tap taps[4];
      for (std::size_t t = 0; t < pt.count; ++t)
        taps[t] = {1 - (pt.ky[t] >> 1), 1 - (pt.kx[t] >> 1)};
      PlaneLayout g_l = gp_l;
      g_l.rows = h;
      g_l.cols = w_;
      // gw layout here is [oc][c][tap]; scatter into [c][oc][3][3] after.
      ws.weights.assign(out_c * in_c * pt.count, T{0});
      tap_wgrad(g_l, gpp, in_l, ws.a.data(), taps, pt.count, ws.weights.data());
      for (std::size_t oc = 0; oc < out_c; ++oc)
        for (std::size_t c = 0; c < in_c; ++c)
          for (std::size_t t = 0; t < pt.count; ++t)
            gw[(c * out_c + oc) * 9 + pt.ky[t] * 3 + pt.kx[t]] +=
                ws.weights[(oc * in_c + c) * pt.count + t];
    }
  }
}

}  // namespace wscn::kernels
