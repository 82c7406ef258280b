#pragma once

// Differentiable operators over nlic::Tensor.
//
// Convolutions accumulate every output element in one fixed order: input
// channel, then kernel row, then kernel column, starting from 0.0, with the
// bias added last. Taps outside the input or removed by a causal mask are
// skipped rather than multiplied by zero. conv_point() evaluates a single
// output element in that same order, so a decoder that evaluates a context
// model one location at a time reproduces the encoder's full-tensor pass bit
// for bit.

#include <algorithm>
#include <cstddef>
#include <span>
#include <string>
#include <vector>

#include "nlic/errors.hpp"
#include "nlic/portable_math.hpp"
#include "nlic/tensor.hpp"

namespace nlic {

// Which kernel taps a convolution uses. kCausal is mask type A: the centre tap
// and every tap after it in raster order are removed.
enum class TapMask { kNone, kCausal };

inline bool tap_enabled(TapMask mask, std::size_t ky, std::size_t kx,
                        std::size_t kh, std::size_t kw) {
  if (mask == TapMask::kNone) return true;
  const std::size_t cy = kh / 2;
  const std::size_t cx = kw / 2;
  return ky < cy || (ky == cy && kx < cx);
}

namespace detail {

struct ConvGeometry {
  std::size_t batch, in_ch, in_h, in_w;
  std::size_t out_ch, kh, kw;
  std::size_t stride, pad;
  std::size_t out_h, out_w;
};

inline std::ptrdiff_t floor_div(std::ptrdiff_t a, std::ptrdiff_t b) {
  std::ptrdiff_t q = a / b;
  if ((a % b != 0) && ((a < 0) != (b < 0))) --q;
  return q;
}

inline std::ptrdiff_t ceil_div(std::ptrdiff_t a, std::ptrdiff_t b) {
  return -floor_div(-a, b);
}

// Range [lo, hi) of "short side" indices o such that o*stride + k - pad lands
// in [0, long_size), clipped to [0, short_size).
struct IndexRange {
  std::size_t lo, hi;
};

inline IndexRange valid_range(std::size_t k, std::size_t stride, std::size_t pad,
                              std::size_t long_size, std::size_t short_size) {
  const auto s = static_cast<std::ptrdiff_t>(stride);
  const auto off = static_cast<std::ptrdiff_t>(pad) - static_cast<std::ptrdiff_t>(k);
  std::ptrdiff_t lo = std::max<std::ptrdiff_t>(0, ceil_div(off, s));
  std::ptrdiff_t hi = std::min<std::ptrdiff_t>(
      static_cast<std::ptrdiff_t>(short_size),
      floor_div(static_cast<std::ptrdiff_t>(long_size) - 1 + off, s) + 1);
  if (hi < lo) hi = lo;
  return {static_cast<std::size_t>(lo), static_cast<std::size_t>(hi)};
}

inline void conv_forward(const ConvGeometry& g, const double* x, const double* w,
                         const double* bias, double* out, TapMask mask) {
  const std::size_t in_plane = g.in_h * g.in_w;
  const std::size_t out_plane = g.out_h * g.out_w;
  const std::size_t ksize = g.kh * g.kw;
  for (std::size_t b = 0; b < g.batch; ++b) {
    for (std::size_t co = 0; co < g.out_ch; ++co) {
      double* o = out + (b * g.out_ch + co) * out_plane;
      std::fill(o, o + out_plane, 0.0);
      for (std::size_t ci = 0; ci < g.in_ch; ++ci) {
        const double* xp = x + (b * g.in_ch + ci) * in_plane;
        const double* wp = w + (co * g.in_ch + ci) * ksize;
        for (std::size_t ky = 0; ky < g.kh; ++ky) {
          const IndexRange ry = valid_range(ky, g.stride, g.pad, g.in_h, g.out_h);
          for (std::size_t kx = 0; kx < g.kw; ++kx) {
            if (!tap_enabled(mask, ky, kx, g.kh, g.kw)) continue;
            const IndexRange rx = valid_range(kx, g.stride, g.pad, g.in_w, g.out_w);
            const double wv = wp[ky * g.kw + kx];
            for (std::size_t oy = ry.lo; oy < ry.hi; ++oy) {
              double* orow = o + oy * g.out_w;
              const double* xrow = xp + (oy * g.stride + ky - g.pad) * g.in_w;
              if (g.stride == 1) {
                const double* xs = xrow + kx - g.pad;
                for (std::size_t ox = rx.lo; ox < rx.hi; ++ox) orow[ox] += wv * xs[ox];
              } else {
                for (std::size_t ox = rx.lo; ox < rx.hi; ++ox) {
                  orow[ox] += wv * xrow[ox * g.stride + kx - g.pad];
                }
              }
            }
          }
        }
      }
      const double bv = bias ? bias[co] : 0.0;
      for (std::size_t i = 0; i < out_plane; ++i) o[i] = o[i] + bv;
    }
  }
}

inline void conv_backward_input(const ConvGeometry& g, const double* w,
                                const double* gout, double* gx, TapMask mask) {
  const std::size_t in_plane = g.in_h * g.in_w;
  const std::size_t out_plane = g.out_h * g.out_w;
  const std::size_t ksize = g.kh * g.kw;
  for (std::size_t b = 0; b < g.batch; ++b) {
    for (std::size_t ci = 0; ci < g.in_ch; ++ci) {
      double* gp = gx + (b * g.in_ch + ci) * in_plane;
      for (std::size_t co = 0; co < g.out_ch; ++co) {
        const double* go = gout + (b * g.out_ch + co) * out_plane;
        const double* wp = w + (co * g.in_ch + ci) * ksize;
        for (std::size_t ky = 0; ky < g.kh; ++ky) {
          const IndexRange ry = valid_range(ky, g.stride, g.pad, g.in_h, g.out_h);
          for (std::size_t kx = 0; kx < g.kw; ++kx) {
            if (!tap_enabled(mask, ky, kx, g.kh, g.kw)) continue;
            const IndexRange rx = valid_range(kx, g.stride, g.pad, g.in_w, g.out_w);
            const double wv = wp[ky * g.kw + kx];
            for (std::size_t oy = ry.lo; oy < ry.hi; ++oy) {
              const double* grow = go + oy * g.out_w;
              double* xrow = gp + (oy * g.stride + ky - g.pad) * g.in_w;
              if (g.stride == 1) {
                double* xs = xrow + kx - g.pad;
                for (std::size_t ox = rx.lo; ox < rx.hi; ++ox) xs[ox] += wv * grow[ox];
              } else {
                for (std::size_t ox = rx.lo; ox < rx.hi; ++ox) {
                  xrow[ox * g.stride + kx - g.pad] += wv * grow[ox];
                }
              }
            }
          }
        }
      }
    }
  }
}

// Sum split over four interleaved partial sums so the compiler can vectorize
// it. The order is fixed, so results are still reproducible.
struct LaneSum {
  double lane[4] = {0.0, 0.0, 0.0, 0.0};
  std::size_t next = 0;

  void add(double v) {
    lane[next] += v;
    next = (next + 1) & 3;
  }
  void dot(const double* a, const double* b, std::size_t n) {
    std::size_t i = 0;
    for (; next != 0 && i < n; ++i) add(a[i] * b[i]);
    for (; i + 4 <= n; i += 4) {
      for (std::size_t t = 0; t < 4; ++t) lane[t] += a[i + t] * b[i + t];
    }
    for (; i < n; ++i) add(a[i] * b[i]);
  }
  double total() const { return (lane[0] + lane[1]) + (lane[2] + lane[3]); }
};

inline void conv_backward_weight(const ConvGeometry& g, const double* x,
                                 const double* gout, double* gw, TapMask mask) {
  const std::size_t in_plane = g.in_h * g.in_w;
  const std::size_t out_plane = g.out_h * g.out_w;
  const std::size_t ksize = g.kh * g.kw;
  for (std::size_t co = 0; co < g.out_ch; ++co) {
    for (std::size_t ci = 0; ci < g.in_ch; ++ci) {
      double* gwp = gw + (co * g.in_ch + ci) * ksize;
      for (std::size_t ky = 0; ky < g.kh; ++ky) {
        const IndexRange ry = valid_range(ky, g.stride, g.pad, g.in_h, g.out_h);
        for (std::size_t kx = 0; kx < g.kw; ++kx) {
          if (!tap_enabled(mask, ky, kx, g.kh, g.kw)) continue;
          const IndexRange rx = valid_range(kx, g.stride, g.pad, g.in_w, g.out_w);
          LaneSum acc;
          for (std::size_t b = 0; b < g.batch; ++b) {
            const double* go = gout + (b * g.out_ch + co) * out_plane;
            const double* xp = x + (b * g.in_ch + ci) * in_plane;
            for (std::size_t oy = ry.lo; oy < ry.hi; ++oy) {
              const double* grow = go + oy * g.out_w;
              const double* xrow = xp + (oy * g.stride + ky - g.pad) * g.in_w;
              if (g.stride == 1) {
                acc.dot(grow + rx.lo, xrow + rx.lo + kx - g.pad, rx.hi - rx.lo);
              } else {
                for (std::size_t ox = rx.lo; ox < rx.hi; ++ox) {
                  acc.add(grow[ox] * xrow[ox * g.stride + kx - g.pad]);
                }
              }
            }
          }
          gwp[ky * g.kw + kx] += acc.total();
        }
      }
    }
  }
}

inline void bias_backward(std::size_t batch, std::size_t channels,
                          std::size_t plane, const double* gout, double* gb) {
  for (std::size_t c = 0; c < channels; ++c) {
    double acc = 0.0;
    for (std::size_t b = 0; b < batch; ++b) {
      const double* go = gout + (b * channels + c) * plane;
      for (std::size_t i = 0; i < plane; ++i) acc += go[i];
    }
    gb[c] += acc;
  }
}

// Transposed convolution; the geometry's in_* describe the (small) input and
// out_* the upsampled output. Weight layout is [in_ch, out_ch, kh, kw].
inline void conv_t_forward(const ConvGeometry& g, const double* x, const double* w,
                           const double* bias, double* out) {
  const std::size_t in_plane = g.in_h * g.in_w;
  const std::size_t out_plane = g.out_h * g.out_w;
  const std::size_t ksize = g.kh * g.kw;
  for (std::size_t b = 0; b < g.batch; ++b) {
    for (std::size_t co = 0; co < g.out_ch; ++co) {
      double* o = out + (b * g.out_ch + co) * out_plane;
      std::fill(o, o + out_plane, 0.0);
      for (std::size_t ci = 0; ci < g.in_ch; ++ci) {
        const double* xp = x + (b * g.in_ch + ci) * in_plane;
        const double* wp = w + (ci * g.out_ch + co) * ksize;
        for (std::size_t ky = 0; ky < g.kh; ++ky) {
          const IndexRange ry = valid_range(ky, g.stride, g.pad, g.out_h, g.in_h);
          for (std::size_t kx = 0; kx < g.kw; ++kx) {
            const IndexRange rx = valid_range(kx, g.stride, g.pad, g.out_w, g.in_w);
            const double wv = wp[ky * g.kw + kx];
            for (std::size_t iy = ry.lo; iy < ry.hi; ++iy) {
              const double* xrow = xp + iy * g.in_w;
              double* orow = o + (iy * g.stride + ky - g.pad) * g.out_w;
              for (std::size_t ix = rx.lo; ix < rx.hi; ++ix) {
                orow[ix * g.stride + kx - g.pad] += wv * xrow[ix];
              }
            }
          }
        }
      }
      const double bv = bias ? bias[co] : 0.0;
      for (std::size_t i = 0; i < out_plane; ++i) o[i] = o[i] + bv;
    }
  }
}

inline void conv_t_backward_input(const ConvGeometry& g, const double* w,
                                  const double* gout, double* gx) {
  const std::size_t in_plane = g.in_h * g.in_w;
  const std::size_t out_plane = g.out_h * g.out_w;
  const std::size_t ksize = g.kh * g.kw;
  for (std::size_t b = 0; b < g.batch; ++b) {
    for (std::size_t ci = 0; ci < g.in_ch; ++ci) {
      double* gp = gx + (b * g.in_ch + ci) * in_plane;
      for (std::size_t co = 0; co < g.out_ch; ++co) {
        const double* go = gout + (b * g.out_ch + co) * out_plane;
        const double* wp = w + (ci * g.out_ch + co) * ksize;
        for (std::size_t ky = 0; ky < g.kh; ++ky) {
          const IndexRange ry = valid_range(ky, g.stride, g.pad, g.out_h, g.in_h);
          for (std::size_t kx = 0; kx < g.kw; ++kx) {
            const IndexRange rx = valid_range(kx, g.stride, g.pad, g.out_w, g.in_w);
            const double wv = wp[ky * g.kw + kx];
            for (std::size_t iy = ry.lo; iy < ry.hi; ++iy) {
              double* xrow = gp + iy * g.in_w;
              const double* grow = go + (iy * g.stride + ky - g.pad) * g.out_w;
              for (std::size_t ix = rx.lo; ix < rx.hi; ++ix) {
                xrow[ix] += wv * grow[ix * g.stride + kx - g.pad];
              }
            }
          }
        }
      }
    }
  }
}

inline void conv_t_backward_weight(const ConvGeometry& g, const double* x,
                                   const double* gout, double* gw) {
  const std::size_t in_plane = g.in_h * g.in_w;
  const std::size_t out_plane = g.out_h * g.out_w;
  const std::size_t ksize = g.kh * g.kw;
  for (std::size_t ci = 0; ci < g.in_ch; ++ci) {
    for (std::size_t co = 0; co < g.out_ch; ++co) {
      double* gwp = gw + (ci * g.out_ch + co) * ksize;
      for (std::size_t ky = 0; ky < g.kh; ++ky) {
        const IndexRange ry = valid_range(ky, g.stride, g.pad, g.out_h, g.in_h);
        for (std::size_t kx = 0; kx < g.kw; ++kx) {
          const IndexRange rx = valid_range(kx, g.stride, g.pad, g.out_w, g.in_w);
          LaneSum acc;
          for (std::size_t b = 0; b < g.batch; ++b) {
            const double* xp = x + (b * g.in_ch + ci) * in_plane;
            const double* go = gout + (b * g.out_ch + co) * out_plane;
            for (std::size_t iy = ry.lo; iy < ry.hi; ++iy) {
              const double* xrow = xp + iy * g.in_w;
              const double* grow = go + (iy * g.stride + ky - g.pad) * g.out_w;
              for (std::size_t ix = rx.lo; ix < rx.hi; ++ix) {
                acc.add(xrow[ix] * grow[ix * g.stride + kx - g.pad]);
              }
            }
          }
          gwp[ky * g.kw + kx] += acc.total();
        }
      }
    }
  }
}

inline void require_4d(const Tensor& t, const char* what) {
  NLIC_REQUIRE(t.defined() && t.ndim() == 4, ContractViolation, what,
               " must be 4-D [batch, channel, height, width], got ",
               t.defined() ? shape_str(t.shape()) : std::string("<undefined>"));
}

inline void require_same_shape(const Tensor& a, const Tensor& b, const char* op) {
  NLIC_REQUIRE(a.shape() == b.shape(), ContractViolation, op,
               ": shape mismatch ", shape_str(a.shape()), " vs ",
               shape_str(b.shape()));
}

inline Tensor conv_impl(const Tensor& input, const Tensor& weight,
                        const Tensor& bias, std::size_t stride, std::size_t pad,
                        TapMask mask, const char* op) {
  require_4d(input, "conv input");
  NLIC_REQUIRE(weight.defined() && weight.ndim() == 4, ContractViolation, op,
               ": weight must be [out_ch, in_ch, kh, kw]");
  NLIC_REQUIRE(stride >= 1, ContractViolation, op, ": stride must be >= 1");
  const std::size_t kh = weight.dim(2), kw = weight.dim(3);
  NLIC_REQUIRE(kh % 2 == 1 && kw % 2 == 1, ContractViolation, op,
               ": kernel dimensions must be odd, got ", kh, "x", kw);
  NLIC_REQUIRE(weight.dim(1) == input.dim(1), ContractViolation, op,
               ": input channel dimension ", input.dim(1),
               " does not match weight in_ch dimension ", weight.dim(1));
  NLIC_REQUIRE(bias.defined() && bias.ndim() == 1 && bias.dim(0) == weight.dim(0),
               ContractViolation, op, ": bias must be [", weight.dim(0), "], got ",
               bias.defined() ? shape_str(bias.shape()) : std::string("<undefined>"));
  const std::size_t h = input.dim(2), w = input.dim(3);
  NLIC_REQUIRE(h + 2 * pad >= kh, ContractViolation, op, ": height ", h,
               " with pad ", pad, " smaller than kernel height ", kh);
  NLIC_REQUIRE(w + 2 * pad >= kw, ContractViolation, op, ": width ", w,
               " with pad ", pad, " smaller than kernel width ", kw);
  ConvGeometry g{input.dim(0), input.dim(1), h, w, weight.dim(0), kh, kw, stride, pad,
                 (h + 2 * pad - kh) / stride + 1, (w + 2 * pad - kw) / stride + 1};
  Shape out_shape{g.batch, g.out_ch, g.out_h, g.out_w};
  std::vector<double> out(shape_numel(out_shape));
  conv_forward(g, input.data().data(), weight.data().data(), bias.data().data(),
               out.data(), mask);
  auto in_impl = input.impl();
  auto w_impl = weight.impl();
  auto b_impl = bias.impl();
  return make_result(
      std::move(out_shape), std::move(out), op, {&input, &weight, &bias},
      [g, mask, in_impl, w_impl, b_impl](const TensorImpl& o) {
        const double* go = o.grad.data();
        if (in_impl->requires_grad) {
          conv_backward_input(g, w_impl->data.data(), go,
                              in_impl->ensure_grad().data(), mask);
        }
        if (w_impl->requires_grad) {
          conv_backward_weight(g, in_impl->data.data(), go,
                               w_impl->ensure_grad().data(), mask);
        }
        if (b_impl->requires_grad) {
          bias_backward(g.batch, g.out_ch, g.out_h * g.out_w, go,
                        b_impl->ensure_grad().data());
        }
      });
}

template <typename F, typename DF>
Tensor unary(const Tensor& a, std::string op, F f, DF df) {
  std::vector<double> out(a.numel());
  const auto x = a.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = f(x[i]);
  auto a_impl = a.impl();
  return make_result(a.shape(), std::move(out), std::move(op), {&a},
                     [a_impl, df](const TensorImpl& o) {
                       auto& ga = a_impl->ensure_grad();
                       for (std::size_t i = 0; i < ga.size(); ++i) {
                         ga[i] += o.grad[i] * df(a_impl->data[i], o.data[i]);
                       }
                     });
}

}  // namespace detail

// Evaluates one output element of a stride-1 convolution with the same
// accumulation order as the tensor op. `input` is a single [in_ch, h, w]
// image; taps reading outside it are skipped.
inline double conv_point(std::span<const double> input, std::size_t in_ch,
                         std::size_t h, std::size_t w, const Tensor& weight,
                         const Tensor& bias, std::size_t out_c, std::size_t oy,
                         std::size_t ox, TapMask mask) {
  const std::size_t kh = weight.dim(2), kw = weight.dim(3);
  const std::size_t pad = kh / 2;
  const double* wp = weight.data().data() + out_c * in_ch * kh * kw;
  double acc = 0.0;
  for (std::size_t ci = 0; ci < in_ch; ++ci) {
    const double* xp = input.data() + ci * h * w;
    for (std::size_t ky = 0; ky < kh; ++ky) {
      const auto iy = static_cast<std::ptrdiff_t>(oy + ky) - static_cast<std::ptrdiff_t>(pad);
      if (iy < 0 || iy >= static_cast<std::ptrdiff_t>(h)) continue;
      for (std::size_t kx = 0; kx < kw; ++kx) {
        if (!tap_enabled(mask, ky, kx, kh, kw)) continue;
        const auto ix = static_cast<std::ptrdiff_t>(ox + kx) - static_cast<std::ptrdiff_t>(pad);
        if (ix < 0 || ix >= static_cast<std::ptrdiff_t>(w)) continue;
        acc += wp[(ci * kh + ky) * kw + kx] * xp[iy * static_cast<std::ptrdiff_t>(w) + ix];
      }
    }
  }
  return acc + bias.data()[out_c];
}

// Cross-correlation. weight: [out_ch, in_ch, kh, kw] with odd kh, kw.
inline Tensor conv2d(const Tensor& input, const Tensor& weight, const Tensor& bias,
                     std::size_t stride = 1, std::size_t pad = 0) {
  return detail::conv_impl(input, weight, bias, stride, pad, TapMask::kNone, "conv2d");
}

// Mask-A causal convolution with "same" padding. Only kernels 5 and 7 are
// supported. Masked taps neither contribute nor receive gradient.
inline Tensor masked_conv2d(const Tensor& input, const Tensor& weight,
                            const Tensor& bias, std::size_t kernel) {
  NLIC_REQUIRE(kernel == 5 || kernel == 7, ConfigError,
               "masked_conv2d supports kernel 5 or 7, got ", kernel);
  NLIC_REQUIRE(weight.defined() && weight.ndim() == 4 && weight.dim(2) == kernel &&
                   weight.dim(3) == kernel,
               ContractViolation, "masked_conv2d: weight must be [out_ch, in_ch, ",
               kernel, ", ", kernel, "]");
  return detail::conv_impl(input, weight, bias, 1, kernel / 2, TapMask::kCausal,
                           "masked_conv2d");
}

// Transposed convolution (the adjoint of conv2d). weight: [in_ch, out_ch, kh,
// kw]; output spatial size (H-1)*stride - 2*pad + kh.
inline Tensor conv2d_transposed(const Tensor& input, const Tensor& weight,
                                const Tensor& bias, std::size_t stride,
                                std::size_t pad) {
  detail::require_4d(input, "conv2d_transposed input");
  NLIC_REQUIRE(weight.defined() && weight.ndim() == 4, ContractViolation,
               "conv2d_transposed: weight must be [in_ch, out_ch, kh, kw]");
  NLIC_REQUIRE(stride >= 1, ContractViolation, "conv2d_transposed: stride must be >= 1");
  NLIC_REQUIRE(weight.dim(0) == input.dim(1), ContractViolation,
               "conv2d_transposed: input channel dimension ", input.dim(1),
               " does not match weight in_ch dimension ", weight.dim(0));
  NLIC_REQUIRE(bias.defined() && bias.ndim() == 1 && bias.dim(0) == weight.dim(1),
               ContractViolation, "conv2d_transposed: bias must be [", weight.dim(1), "]");
  const std::size_t kh = weight.dim(2), kw = weight.dim(3);
  const std::size_t h = input.dim(2), w = input.dim(3);
  NLIC_REQUIRE((h - 1) * stride + kh > 2 * pad && (w - 1) * stride + kw > 2 * pad,
               ContractViolation, "conv2d_transposed: padding ", pad,
               " leaves an empty output");
  detail::ConvGeometry g{input.dim(0), input.dim(1), h, w, weight.dim(1), kh, kw,
                         stride, pad, (h - 1) * stride + kh - 2 * pad,
                         (w - 1) * stride + kw - 2 * pad};
  Shape out_shape{g.batch, g.out_ch, g.out_h, g.out_w};
  std::vector<double> out(shape_numel(out_shape));
  detail::conv_t_forward(g, input.data().data(), weight.data().data(),
                         bias.data().data(), out.data());
  auto in_impl = input.impl();
  auto w_impl = weight.impl();
  auto b_impl = bias.impl();
  return detail::make_result(
      std::move(out_shape), std::move(out), "conv2d_transposed",
      {&input, &weight, &bias}, [g, in_impl, w_impl, b_impl](const detail::TensorImpl& o) {
        const double* go = o.grad.data();
        if (in_impl->requires_grad) {
          detail::conv_t_backward_input(g, w_impl->data.data(), go,
                                        in_impl->ensure_grad().data());
        }
        if (w_impl->requires_grad) {
          detail::conv_t_backward_weight(g, in_impl->data.data(), go,
                                         w_impl->ensure_grad().data());
        }
        if (b_impl->requires_grad) {
          detail::bias_backward(g.batch, g.out_ch, g.out_h * g.out_w, go,
                                b_impl->ensure_grad().data());
        }
      });
}

// ---- elementwise -----------------------------------------------------------

// a + b for equal shapes, or a [B, C, ...] + b [C] (per-channel broadcast).
inline Tensor add(const Tensor& a, const Tensor& b) {
  if (a.shape() == b.shape()) {
    std::vector<double> out(a.numel());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.data()[i] + b.data()[i];
    auto ai = a.impl(), bi = b.impl();
    return detail::make_result(a.shape(), std::move(out), "add", {&a, &b},
                               [ai, bi](const detail::TensorImpl& o) {
                                 for (auto* t : {ai.get(), bi.get()}) {
                                   if (!t->requires_grad) continue;
                                   auto& g = t->ensure_grad();
                                   for (std::size_t i = 0; i < g.size(); ++i) g[i] += o.grad[i];
                                 }
                               });
  }
  NLIC_REQUIRE(a.ndim() >= 2 && b.ndim() == 1 && b.dim(0) == a.dim(1),
               ContractViolation, "add: cannot broadcast ", shape_str(b.shape()),
               " onto ", shape_str(a.shape()));
  const std::size_t channels = a.dim(1);
  const std::size_t plane = a.numel() / (a.dim(0) * channels);
  std::vector<double> out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) {
    out[i] = a.data()[i] + b.data()[(i / plane) % channels];
  }
  auto ai = a.impl(), bi = b.impl();
  return detail::make_result(
      a.shape(), std::move(out), "add_channel", {&a, &b},
      [ai, bi, channels, plane](const detail::TensorImpl& o) {
        if (ai->requires_grad) {
          auto& g = ai->ensure_grad();
          for (std::size_t i = 0; i < g.size(); ++i) g[i] += o.grad[i];
        }
        if (bi->requires_grad) {
          auto& g = bi->ensure_grad();
          for (std::size_t i = 0; i < o.grad.size(); ++i) g[(i / plane) % channels] += o.grad[i];
        }
      });
}

inline Tensor sub(const Tensor& a, const Tensor& b) {
  detail::require_same_shape(a, b, "sub");
  std::vector<double> out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.data()[i] - b.data()[i];
  auto ai = a.impl(), bi = b.impl();
  return detail::make_result(a.shape(), std::move(out), "sub", {&a, &b},
                             [ai, bi](const detail::TensorImpl& o) {
                               if (ai->requires_grad) {
                                 auto& g = ai->ensure_grad();
                                 for (std::size_t i = 0; i < g.size(); ++i) g[i] += o.grad[i];
                               }
                               if (bi->requires_grad) {
                                 auto& g = bi->ensure_grad();
                                 for (std::size_t i = 0; i < g.size(); ++i) g[i] -= o.grad[i];
                               }
                             });
}

inline Tensor mul(const Tensor& a, const Tensor& b) {
  detail::require_same_shape(a, b, "mul");
  std::vector<double> out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.data()[i] * b.data()[i];
  auto ai = a.impl(), bi = b.impl();
  return detail::make_result(a.shape(), std::move(out), "mul", {&a, &b},
                             [ai, bi](const detail::TensorImpl& o) {
                               if (ai->requires_grad) {
                                 auto& g = ai->ensure_grad();
                                 for (std::size_t i = 0; i < g.size(); ++i) {
                                   g[i] += o.grad[i] * bi->data[i];
                                 }
                               }
                               if (bi->requires_grad) {
                                 auto& g = bi->ensure_grad();
                                 for (std::size_t i = 0; i < g.size(); ++i) {
                                   g[i] += o.grad[i] * ai->data[i];
                                 }
                               }
                             });
}

inline Tensor scale(const Tensor& a, double s) {
  return detail::unary(
      a, "scale", [s](double x) { return x * s; }, [s](double, double) { return s; });
}

inline Tensor add_scalar(const Tensor& a, double s) {
  return detail::unary(
      a, "add_scalar", [s](double x) { return x + s; }, [](double, double) { return 1.0; });
}

inline Tensor leaky_relu(const Tensor& a) {
  return detail::unary(
      a, "leaky_relu", [](double x) { return pm::leaky_relu(x); },
      [](double x, double) { return x > 0.0 ? 1.0 : pm::kLeakySlope; });
}

inline Tensor sigmoid(const Tensor& a) {
  return detail::unary(
      a, "sigmoid", [](double x) { return pm::sigmoid(x); },
      [](double, double y) { return y * (1.0 - y); });
}

inline Tensor tanh(const Tensor& a) {
  return detail::unary(
      a, "tanh", [](double x) { return pm::tanh(x); },
      [](double, double y) { return 1.0 - y * y; });
}

inline Tensor exp(const Tensor& a) {
  if (nan_guard_enabled()) {
    for (double x : a.data()) {
      NLIC_REQUIRE(x <= 709.78, NumericError, "exp: argument ", x, " overflows");
    }
  }
  return detail::unary(
      a, "exp", [](double x) { return pm::exp(x); }, [](double, double y) { return y; });
}

inline Tensor softplus(const Tensor& a) {
  return detail::unary(
      a, "softplus", [](double x) { return pm::softplus(x); },
      [](double x, double) { return pm::sigmoid(x); });
}

inline Tensor log(const Tensor& a) {
  if (nan_guard_enabled()) {
    for (double x : a.data()) {
      NLIC_REQUIRE(x > 0.0, NumericError, "log: argument ", x, " outside (0, inf)");
    }
  }
  return detail::unary(
      a, "log", [](double x) { return pm::log(x); }, [](double x, double) { return 1.0 / x; });
}

inline Tensor square(const Tensor& a) {
  return detail::unary(
      a, "square", [](double x) { return x * x; }, [](double x, double) { return 2.0 * x; });
}

// ---- reductions and reshaping ----------------------------------------------

inline Tensor sum(const Tensor& a) {
  double acc = 0.0;
  for (double v : a.data()) acc += v;
  auto ai = a.impl();
  return detail::make_result(Shape{1}, {acc}, "sum", {&a},
                             [ai](const detail::TensorImpl& o) {
                               auto& g = ai->ensure_grad();
                               for (double& v : g) v += o.grad[0];
                             });
}

inline Tensor mean(const Tensor& a) {
  return scale(sum(a), 1.0 / static_cast<double>(a.numel()));
}

inline Tensor reshape(const Tensor& a, Shape shape) {
  NLIC_REQUIRE(shape_numel(shape) == a.numel(), ContractViolation,
               "reshape: cannot view ", shape_str(a.shape()), " as ", shape_str(shape));
  auto ai = a.impl();
  std::vector<double> values(a.data().begin(), a.data().end());
  return detail::make_result(std::move(shape), std::move(values), "reshape", {&a},
                             [ai](const detail::TensorImpl& o) {
                               auto& g = ai->ensure_grad();
                               for (std::size_t i = 0; i < g.size(); ++i) g[i] += o.grad[i];
                             });
}

// Concatenates 4-D tensors along the channel axis.
inline Tensor concat_channels(const std::vector<Tensor>& parts) {
  NLIC_REQUIRE(!parts.empty(), ContractViolation, "concat_channels: no inputs");
  for (const auto& p : parts) detail::require_4d(p, "concat_channels input");
  const std::size_t batch = parts[0].dim(0), h = parts[0].dim(2), w = parts[0].dim(3);
  std::size_t channels = 0;
  for (const auto& p : parts) {
    NLIC_REQUIRE(p.dim(0) == batch && p.dim(2) == h && p.dim(3) == w, ContractViolation,
                 "concat_channels: spatial/batch mismatch ", shape_str(p.shape()), " vs ",
                 shape_str(parts[0].shape()));
    channels += p.dim(1);
  }
  const std::size_t plane = h * w;
  std::vector<double> out(batch * channels * plane);
  std::size_t offset = 0;
  for (const auto& p : parts) {
    const std::size_t c = p.dim(1);
    for (std::size_t b = 0; b < batch; ++b) {
      std::copy_n(p.data().data() + b * c * plane, c * plane,
                  out.data() + (b * channels + offset) * plane);
    }
    offset += c;
  }
  std::vector<const Tensor*> inputs;
  std::vector<std::shared_ptr<detail::TensorImpl>> impls;
  for (const auto& p : parts) {
    inputs.push_back(&p);
    impls.push_back(p.impl());
  }
  return detail::make_result(
      Shape{batch, channels, h, w}, std::move(out), "concat_channels", inputs,
      [impls, batch, channels, plane](const detail::TensorImpl& o) {
        std::size_t off = 0;
        for (const auto& t : impls) {
          const std::size_t c = t->shape[1];
          if (t->requires_grad) {
            auto& g = t->ensure_grad();
            for (std::size_t b = 0; b < batch; ++b) {
              const double* src = o.grad.data() + (b * channels + off) * plane;
              double* dst = g.data() + b * c * plane;
              for (std::size_t i = 0; i < c * plane; ++i) dst[i] += src[i];
            }
          }
          off += c;
        }
      });
}

// Channels [begin, end) of a 4-D tensor.
inline Tensor slice_channels(const Tensor& a, std::size_t begin, std::size_t end) {
  detail::require_4d(a, "slice_channels input");
  NLIC_REQUIRE(begin < end && end <= a.dim(1), ContractViolation,
               "slice_channels: range [", begin, ", ", end, ") outside ", a.dim(1),
               " channels");
  const std::size_t batch = a.dim(0), channels = a.dim(1);
  const std::size_t plane = a.dim(2) * a.dim(3);
  const std::size_t c = end - begin;
  std::vector<double> out(batch * c * plane);
  for (std::size_t b = 0; b < batch; ++b) {
    std::copy_n(a.data().data() + (b * channels + begin) * plane, c * plane,
                out.data() + b * c * plane);
  }
  auto ai = a.impl();
  return detail::make_result(
      Shape{batch, c, a.dim(2), a.dim(3)}, std::move(out), "slice_channels", {&a},
      [ai, batch, channels, plane, begin, c](const detail::TensorImpl& o) {
        auto& g = ai->ensure_grad();
        for (std::size_t b = 0; b < batch; ++b) {
          double* dst = g.data() + (b * channels + begin) * plane;
          const double* src = o.grad.data() + b * c * plane;
          for (std::size_t i = 0; i < c * plane; ++i) dst[i] += src[i];
        }
      });
}

// Softmax over mixture groups. The channel axis of a [B, K*C, ...] tensor is
// read as K blocks of C channels; the group of channel c is {c, C+c, ...,
// (K-1)C+c}, and each group is normalised independently at every location.
inline void softmax_group(const double* logits, std::size_t count, std::size_t step,
                          double* out) {
  double m = logits[0];
  for (std::size_t k = 1; k < count; ++k) m = std::max(m, logits[k * step]);
  double total = 0.0;
  for (std::size_t k = 0; k < count; ++k) {
    out[k * step] = pm::exp(logits[k * step] - m);
    total += out[k * step];
  }
  for (std::size_t k = 0; k < count; ++k) out[k * step] = out[k * step] / total;
}

inline Tensor softmax_channel_groups(const Tensor& a, std::size_t groups) {
  NLIC_REQUIRE(a.ndim() >= 2, ContractViolation, "softmax_channel_groups: need >= 2-D input");
  NLIC_REQUIRE(groups >= 1 && a.dim(1) % groups == 0, ConfigError,
               "softmax_channel_groups: ", a.dim(1), " channels not divisible into ",
               groups, " groups");
  const std::size_t batch = a.dim(0);
  const std::size_t per_group = a.dim(1) / groups;
  const std::size_t plane = a.numel() / (batch * a.dim(1));
  const std::size_t step = per_group * plane;
  std::vector<double> out(a.numel());
  for (std::size_t b = 0; b < batch; ++b) {
    const std::size_t base = b * a.dim(1) * plane;
    for (std::size_t j = 0; j < step; ++j) {
      softmax_group(a.data().data() + base + j, groups, step, out.data() + base + j);
    }
  }
  auto ai = a.impl();
  const std::size_t stride_b = a.dim(1) * plane;
  return detail::make_result(
      a.shape(), std::move(out), "softmax_channel_groups", {&a},
      [ai, batch, groups, step, stride_b](const detail::TensorImpl& o) {
        auto& g = ai->ensure_grad();
        for (std::size_t b = 0; b < batch; ++b) {
          for (std::size_t j = 0; j < step; ++j) {
            const std::size_t base = b * stride_b + j;
            double dot = 0.0;
            for (std::size_t k = 0; k < groups; ++k) {
              dot += o.grad[base + k * step] * o.data[base + k * step];
            }
            for (std::size_t k = 0; k < groups; ++k) {
              const std::size_t i = base + k * step;
              g[i] += o.data[i] * (o.grad[i] - dot);
            }
          }
        }
      });
}

// Sums the K blocks of a [B, K*C, ...] tensor into [B, C, ...].
inline Tensor sum_channel_groups(const Tensor& a, std::size_t groups) {
  NLIC_REQUIRE(a.ndim() >= 2 && groups >= 1 && a.dim(1) % groups == 0, ConfigError,
               "sum_channel_groups: ", a.ndim() >= 2 ? a.dim(1) : 0,
               " channels not divisible into ", groups, " groups");
  const std::size_t batch = a.dim(0);
  const std::size_t per_group = a.dim(1) / groups;
  const std::size_t plane = a.numel() / (batch * a.dim(1));
  const std::size_t step = per_group * plane;
  Shape shape = a.shape();
  shape[1] = per_group;
  std::vector<double> out(batch * step, 0.0);
  for (std::size_t b = 0; b < batch; ++b) {
    for (std::size_t k = 0; k < groups; ++k) {
      const double* src = a.data().data() + b * a.dim(1) * plane + k * step;
      double* dst = out.data() + b * step;
      for (std::size_t j = 0; j < step; ++j) dst[j] += src[j];
    }
  }
  auto ai = a.impl();
  const std::size_t stride_b = a.dim(1) * plane;
  return detail::make_result(std::move(shape), std::move(out), "sum_channel_groups", {&a},
                             [ai, batch, groups, step, stride_b](const detail::TensorImpl& o) {
                               auto& g = ai->ensure_grad();
                               for (std::size_t b = 0; b < batch; ++b) {
                                 for (std::size_t k = 0; k < groups; ++k) {
                                   for (std::size_t j = 0; j < step; ++j) {
                                     g[b * stride_b + k * step + j] += o.grad[b * step + j];
                                   }
                                 }
                               }
                             });
}

}  // namespace nlic
