#pragma once

// Differentiable NCHW operations. Every op works untracked when none of its
// operands lives on a Tape, and records a backward rule otherwise.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <memory>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "denomamba/errors.hpp"
#include "denomamba/feature_map.hpp"
#include "denomamba/tape.hpp"

namespace denomamba {

namespace detail {

template <class Fn>
FeatureMap finish(Tape* tape, FeatureMap out, Fn&& fn) {
  if (tape == nullptr) return out;
  return tape->record(std::move(out), std::forward<Fn>(fn));
}

struct IndexRange {
  std::ptrdiff_t lo = 0;
  std::ptrdiff_t hi = 0;
};

// Output indices o in [0, out) whose tap o*stride - pad + k falls inside [0, in).
inline IndexRange tap_range(std::ptrdiff_t k, std::ptrdiff_t stride, std::ptrdiff_t pad,
                            std::ptrdiff_t in, std::ptrdiff_t out) {
  const std::ptrdiff_t lo = pad - k > 0 ? (pad - k + stride - 1) / stride : 0;
  const std::ptrdiff_t last = in - 1 + pad - k;
  const std::ptrdiff_t hi = last < 0 ? 0 : std::min(out, last / stride + 1);
  return {lo, std::max(lo, hi)};
}

inline double logistic(double x) {
  if (x >= 0) return 1.0 / (1.0 + std::exp(-x));
  const double e = std::exp(x);
  return e / (1.0 + e);
}

// Four independent accumulators keep the reduction pipelined.
inline double dot(const double* a, const double* b, std::size_t n) {
  double s0 = 0.0, s1 = 0.0, s2 = 0.0, s3 = 0.0;
  std::size_t i = 0;
  for (; i + 4 <= n; i += 4) {
    s0 += a[i] * b[i];
    s1 += a[i + 1] * b[i + 1];
    s2 += a[i + 2] * b[i + 2];
    s3 += a[i + 3] * b[i + 3];
  }
  for (; i < n; ++i) s0 += a[i] * b[i];
  return (s0 + s1) + (s2 + s3);
}

inline double dot_strided(const double* a, const double* b, std::size_t n, std::ptrdiff_t stride) {
  if (stride == 1) return dot(a, b, n);
  double acc = 0.0;
  for (std::size_t i = 0; i < n; ++i) acc += a[i] * b[static_cast<std::ptrdiff_t>(i) * stride];
  return acc;
}

inline double total(const double* a, std::size_t n) {
  double s0 = 0.0, s1 = 0.0, s2 = 0.0, s3 = 0.0;
  std::size_t i = 0;
  for (; i + 4 <= n; i += 4) {
    s0 += a[i];
    s1 += a[i + 1];
    s2 += a[i + 2];
    s3 += a[i + 3];
  }
  for (; i < n; ++i) s0 += a[i];
  return (s0 + s1) + (s2 + s3);
}

template <class Forward, class Derivative>
FeatureMap unary(const FeatureMap& x, Forward f, Derivative df) {
  FeatureMap out(x.shape());
  auto xs = x.data();
  auto ys = out.mutable_data();
  for (std::size_t i = 0; i < xs.size(); ++i) ys[i] = f(xs[i]);
  Tape* tape = common_tape({&x});
  return finish(tape, std::move(out), [x, df](Tape& t, std::span<const double> g) {
    auto gx = t.grad_of(x);
    auto xs = x.data();
    for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i] * df(xs[i]);
  });
}

}  // namespace detail

struct Conv2dOptions {
  std::size_t stride = 1;
  std::size_t padding = 0;
  std::size_t groups = 1;
};

/// 2D cross-correlation with zero padding. `weight` is (out, in/groups, kh, kw);
/// `bias` is empty or holds one value per output channel.
inline FeatureMap conv2d(const FeatureMap& x, const FeatureMap& weight, const FeatureMap& bias,
                         Conv2dOptions opt = {}) {
  const Shape& xs = x.shape();
  const Shape& ws = weight.shape();
  const std::size_t groups = opt.groups;
  if (groups == 0 || opt.stride == 0) throw ConfigError("conv2d: stride and groups must be >= 1");
  if (xs.channels % groups != 0 || ws.batch % groups != 0 || ws.channels * groups != xs.channels) {
    throw ShapeError("conv2d: weight " + ws.str() + " incompatible with input " + xs.str() +
                     " for groups=" + std::to_string(groups));
  }
  if (!bias.empty() && bias.numel() != ws.batch) {
    throw ShapeError("conv2d: bias " + bias.shape().str() + " does not match " +
                     std::to_string(ws.batch) + " output channels");
  }
  if (xs.height + 2 * opt.padding < ws.height || xs.width + 2 * opt.padding < ws.width) {
    throw ShapeError("conv2d: kernel " + ws.str() + " larger than padded input " + xs.str());
  }
  const std::size_t out_h = (xs.height + 2 * opt.padding - ws.height) / opt.stride + 1;
  const std::size_t out_w = (xs.width + 2 * opt.padding - ws.width) / opt.stride + 1;
  const Shape os{xs.batch, ws.batch, out_h, out_w};

  struct Geometry {
    std::size_t batch, in_c, out_c, in_h, in_w, out_h, out_w, kh, kw, icpg, ocpg;
    std::ptrdiff_t stride, pad;
  };
  const Geometry geo{xs.batch, xs.channels, ws.batch, xs.height, xs.width, out_h, out_w,
                     ws.height, ws.width, xs.channels / groups, ws.batch / groups,
                     static_cast<std::ptrdiff_t>(opt.stride), static_cast<std::ptrdiff_t>(opt.padding)};

  // visit(out_offset, in_offset, weight_index, rows, cols) over every tap.
  auto for_each_tap = [geo](auto&& visit) {
    for (std::size_t n = 0; n < geo.batch; ++n) {
      for (std::size_t oc = 0; oc < geo.out_c; ++oc) {
        const std::size_t g = oc / geo.ocpg;
        const std::size_t out_off = (n * geo.out_c + oc) * geo.out_h * geo.out_w;
        for (std::size_t icg = 0; icg < geo.icpg; ++icg) {
          const std::size_t ic = g * geo.icpg + icg;
          const std::size_t in_off = (n * geo.in_c + ic) * geo.in_h * geo.in_w;
          for (std::size_t ky = 0; ky < geo.kh; ++ky) {
            const auto rows = detail::tap_range(static_cast<std::ptrdiff_t>(ky), geo.stride, geo.pad,
                                                static_cast<std::ptrdiff_t>(geo.in_h),
                                                static_cast<std::ptrdiff_t>(geo.out_h));
            for (std::size_t kx = 0; kx < geo.kw; ++kx) {
              const auto cols = detail::tap_range(static_cast<std::ptrdiff_t>(kx), geo.stride,
                                                  geo.pad, static_cast<std::ptrdiff_t>(geo.in_w),
                                                  static_cast<std::ptrdiff_t>(geo.out_w));
              const std::size_t widx = ((oc * geo.icpg + icg) * geo.kh + ky) * geo.kw + kx;
              visit(out_off, in_off, widx, ky, kx, rows, cols);
            }
          }
        }
      }
    }
  };

  FeatureMap out(os);
  {
    auto y = out.mutable_data();
    auto in = x.data();
    auto w = weight.data();
    if (!bias.empty()) {
      auto b = bias.data();
      for (std::size_t n = 0; n < os.batch; ++n)
        for (std::size_t oc = 0; oc < os.channels; ++oc)
          std::fill_n(y.begin() + static_cast<std::ptrdiff_t>((n * os.channels + oc) * os.plane()),
                      os.plane(), b[oc]);
    }
    for_each_tap([&](std::size_t out_off, std::size_t in_off, std::size_t widx, std::size_t ky,
                     std::size_t kx, detail::IndexRange rows, detail::IndexRange cols) {
      const double wv = w[widx];
      if (wv == 0.0) return;
      for (std::ptrdiff_t oy = rows.lo; oy < rows.hi; ++oy) {
        const std::ptrdiff_t iy = oy * geo.stride - geo.pad + static_cast<std::ptrdiff_t>(ky);
        double* orow = y.data() + out_off + static_cast<std::size_t>(oy) * geo.out_w;
        const double* irow = in.data() + in_off + static_cast<std::size_t>(iy) * geo.in_w;
        const std::ptrdiff_t shift = static_cast<std::ptrdiff_t>(kx) - geo.pad;
        for (std::ptrdiff_t ox = cols.lo; ox < cols.hi; ++ox)
          orow[ox] += wv * irow[ox * geo.stride + shift];
      }
    });
  }

  Tape* tape = common_tape({&x, &weight, &bias});
  return detail::finish(tape, std::move(out),
                        [x, weight, bias, geo, for_each_tap](Tape& t, std::span<const double> g) {
    auto gx = t.grad_of(x);
    auto gw = t.grad_of(weight);
    auto gb = t.grad_of(bias);
    auto in = x.data();
    auto w = weight.data();
    if (!gb.empty()) {
      const std::size_t plane = geo.out_h * geo.out_w;
      for (std::size_t n = 0; n < geo.batch; ++n)
        for (std::size_t oc = 0; oc < geo.out_c; ++oc) {
          gb[oc] += detail::total(g.data() + (n * geo.out_c + oc) * plane, plane);
        }
    }
    if (gx.empty() && gw.empty()) return;
    for_each_tap([&](std::size_t out_off, std::size_t in_off, std::size_t widx, std::size_t ky,
                     std::size_t kx, detail::IndexRange rows, detail::IndexRange cols) {
      const double wv = w[widx];
      const std::ptrdiff_t shift = static_cast<std::ptrdiff_t>(kx) - geo.pad;
      double wacc = 0.0;
      if (cols.lo >= cols.hi) return;
      const auto count = static_cast<std::size_t>(cols.hi - cols.lo);
      for (std::ptrdiff_t oy = rows.lo; oy < rows.hi; ++oy) {
        const std::ptrdiff_t iy = oy * geo.stride - geo.pad + static_cast<std::ptrdiff_t>(ky);
        const double* grow = g.data() + out_off + static_cast<std::size_t>(oy) * geo.out_w;
        const std::size_t irow = in_off + static_cast<std::size_t>(iy) * geo.in_w;
        if (!gx.empty()) {
          double* dx = gx.data() + irow;
          for (std::ptrdiff_t ox = cols.lo; ox < cols.hi; ++ox)
            dx[ox * geo.stride + shift] += wv * grow[ox];
        }
        if (!gw.empty()) {
          wacc += detail::dot_strided(grow + cols.lo, in.data() + irow + cols.lo * geo.stride + shift,
                                      count, geo.stride);
        }
      }
      if (!gw.empty()) gw[widx] += wacc;
    });
  });
}

/// Transposed 2D convolution (adjoint of conv2d, groups = 1). `weight` is
/// (in, out, kh, kw). Output extent: (in - 1)*stride - 2*padding + k + output_padding.
inline FeatureMap conv_transpose2d(const FeatureMap& x, const FeatureMap& weight,
                                   const FeatureMap& bias, std::size_t stride,
                                   std::size_t padding, std::size_t output_padding) {
  const Shape& xs = x.shape();
  const Shape& ws = weight.shape();
  if (ws.batch != xs.channels) {
    throw ShapeError("conv_transpose2d: weight " + ws.str() + " incompatible with input " +
                     xs.str());
  }
  if (!bias.empty() && bias.numel() != ws.channels) {
    throw ShapeError("conv_transpose2d: bias " + bias.shape().str() + " does not match " +
                     std::to_string(ws.channels) + " output channels");
  }
  const std::ptrdiff_t oh_signed = static_cast<std::ptrdiff_t>((xs.height - 1) * stride + ws.height +
                                                               output_padding) -
                                   static_cast<std::ptrdiff_t>(2 * padding);
  const std::ptrdiff_t ow_signed = static_cast<std::ptrdiff_t>((xs.width - 1) * stride + ws.width +
                                                               output_padding) -
                                   static_cast<std::ptrdiff_t>(2 * padding);
  if (xs.height == 0 || xs.width == 0 || oh_signed <= 0 || ow_signed <= 0) {
    throw ShapeError("conv_transpose2d: empty output for input " + xs.str());
  }
  const Shape os{xs.batch, ws.channels, static_cast<std::size_t>(oh_signed),
                 static_cast<std::size_t>(ow_signed)};
  const auto s = static_cast<std::ptrdiff_t>(stride);
  const auto p = static_cast<std::ptrdiff_t>(padding);

  // visit(in_offset, out_offset, weight_index, ky, kx, rows, cols); rows/cols index the input.
  auto for_each_tap = [xs, ws, os, s, p](auto&& visit) {
    for (std::size_t n = 0; n < xs.batch; ++n)
      for (std::size_t ic = 0; ic < xs.channels; ++ic) {
        const std::size_t in_off = (n * xs.channels + ic) * xs.plane();
        for (std::size_t oc = 0; oc < os.channels; ++oc) {
          const std::size_t out_off = (n * os.channels + oc) * os.plane();
          for (std::size_t ky = 0; ky < ws.height; ++ky) {
            const auto rows = detail::tap_range(static_cast<std::ptrdiff_t>(ky), s, p,
                                                static_cast<std::ptrdiff_t>(os.height),
                                                static_cast<std::ptrdiff_t>(xs.height));
            for (std::size_t kx = 0; kx < ws.width; ++kx) {
              const auto cols = detail::tap_range(static_cast<std::ptrdiff_t>(kx), s, p,
                                                  static_cast<std::ptrdiff_t>(os.width),
                                                  static_cast<std::ptrdiff_t>(xs.width));
              const std::size_t widx = ((ic * ws.channels + oc) * ws.height + ky) * ws.width + kx;
              visit(in_off, out_off, widx, ky, kx, rows, cols);
            }
          }
        }
      }
  };

  FeatureMap out(os);
  {
    auto y = out.mutable_data();
    auto in = x.data();
    auto w = weight.data();
    if (!bias.empty()) {
      auto b = bias.data();
      for (std::size_t n = 0; n < os.batch; ++n)
        for (std::size_t oc = 0; oc < os.channels; ++oc)
          std::fill_n(y.begin() + static_cast<std::ptrdiff_t>((n * os.channels + oc) * os.plane()),
                      os.plane(), b[oc]);
    }
    for_each_tap([&](std::size_t in_off, std::size_t out_off, std::size_t widx, std::size_t ky,
                     std::size_t kx, detail::IndexRange rows, detail::IndexRange cols) {
      const double wv = w[widx];
      if (wv == 0.0) return;
      for (std::ptrdiff_t iy = rows.lo; iy < rows.hi; ++iy) {
        const std::ptrdiff_t oy = iy * s - p + static_cast<std::ptrdiff_t>(ky);
        const double* irow = in.data() + in_off + static_cast<std::size_t>(iy) * xs.width;
        double* orow = y.data() + out_off + static_cast<std::size_t>(oy) * os.width;
        const std::ptrdiff_t shift = static_cast<std::ptrdiff_t>(kx) - p;
        for (std::ptrdiff_t ix = cols.lo; ix < cols.hi; ++ix) orow[ix * s + shift] += wv * irow[ix];
      }
    });
  }

  Tape* tape = common_tape({&x, &weight, &bias});
  return detail::finish(tape, std::move(out), [x, weight, bias, xs, os, s, p, for_each_tap](
                                                  Tape& t, std::span<const double> g) {
    auto gx = t.grad_of(x);
    auto gw = t.grad_of(weight);
    auto gb = t.grad_of(bias);
    auto in = x.data();
    auto w = weight.data();
    if (!gb.empty()) {
      for (std::size_t n = 0; n < os.batch; ++n)
        for (std::size_t oc = 0; oc < os.channels; ++oc) {
          gb[oc] += detail::total(g.data() + (n * os.channels + oc) * os.plane(), os.plane());
        }
    }
    if (gx.empty() && gw.empty()) return;
    for_each_tap([&](std::size_t in_off, std::size_t out_off, std::size_t widx, std::size_t ky,
                     std::size_t kx, detail::IndexRange rows, detail::IndexRange cols) {
      const double wv = w[widx];
      const std::ptrdiff_t shift = static_cast<std::ptrdiff_t>(kx) - p;
      double wacc = 0.0;
      for (std::ptrdiff_t iy = rows.lo; iy < rows.hi; ++iy) {
        const std::ptrdiff_t oy = iy * s - p + static_cast<std::ptrdiff_t>(ky);
        const double* grow = g.data() + out_off + static_cast<std::size_t>(oy) * os.width;
        const std::size_t irow = in_off + static_cast<std::size_t>(iy) * xs.width;
        if (!gx.empty()) {
          double* dx = gx.data() + irow;
          for (std::ptrdiff_t ix = cols.lo; ix < cols.hi; ++ix) dx[ix] += wv * grow[ix * s + shift];
        }
        if (!gw.empty()) {
          const double* xr = in.data() + irow;
          for (std::ptrdiff_t ix = cols.lo; ix < cols.hi; ++ix) wacc += xr[ix] * grow[ix * s + shift];
        }
      }
      if (!gw.empty()) gw[widx] += wacc;
    });
  });
}

/// Pointwise linear map over the channel axis. `weight` is (out, in, 1, 1).
inline FeatureMap linear(const FeatureMap& x, const FeatureMap& weight, const FeatureMap& bias) {
  const Shape& xs = x.shape();
  const Shape& ws = weight.shape();
  if (ws.channels != xs.channels || ws.plane() != 1) {
    throw ShapeError("linear: weight " + ws.str() + " incompatible with input " + xs.str());
  }
  if (!bias.empty() && bias.numel() != ws.batch) {
    throw ShapeError("linear: bias " + bias.shape().str() + " does not match " +
                     std::to_string(ws.batch) + " outputs");
  }
  const std::size_t in_f = xs.channels;
  const std::size_t out_f = ws.batch;
  const std::size_t plane = xs.plane();
  const Shape os{xs.batch, out_f, xs.height, xs.width};
  FeatureMap out(os);
  {
    auto y = out.mutable_data();
    auto in = x.data();
    auto w = weight.data();
    for (std::size_t n = 0; n < xs.batch; ++n) {
      for (std::size_t o = 0; o < out_f; ++o) {
        double* yp = y.data() + (n * out_f + o) * plane;
        if (!bias.empty()) std::fill_n(yp, plane, bias.data()[o]);
        for (std::size_t i = 0; i < in_f; ++i) {
          const double wv = w[o * in_f + i];
          if (wv == 0.0) continue;
          const double* xp = in.data() + (n * in_f + i) * plane;
          for (std::size_t q = 0; q < plane; ++q) yp[q] += wv * xp[q];
        }
      }
    }
  }
  Tape* tape = common_tape({&x, &weight, &bias});
  return detail::finish(tape, std::move(out), [x, weight, bias, in_f, out_f, plane](
                                                  Tape& t, std::span<const double> g) {
    auto gx = t.grad_of(x);
    auto gw = t.grad_of(weight);
    auto gb = t.grad_of(bias);
    auto in = x.data();
    auto w = weight.data();
    const std::size_t batch = x.shape().batch;
    for (std::size_t n = 0; n < batch; ++n) {
      for (std::size_t o = 0; o < out_f; ++o) {
        const double* gp = g.data() + (n * out_f + o) * plane;
        if (!gb.empty()) gb[o] += detail::total(gp, plane);
        for (std::size_t i = 0; i < in_f; ++i) {
          const std::size_t xoff = (n * in_f + i) * plane;
          if (!gx.empty()) {
            const double wv = w[o * in_f + i];
            double* dx = gx.data() + xoff;
            for (std::size_t q = 0; q < plane; ++q) dx[q] += wv * gp[q];
          }
          if (!gw.empty()) gw[o * in_f + i] += detail::dot(gp, in.data() + xoff, plane);
        }
      }
    }
  });
}

/// Normalizes across channels at every (batch, position):
/// y = gamma * (x - mean) / sqrt(var + eps) + beta, with population variance.
inline FeatureMap layer_norm(const FeatureMap& x, const FeatureMap& gamma, const FeatureMap& beta,
                             double eps = 1e-5) {
  if (!(eps > 0.0)) throw ConfigError("layer_norm: eps must be > 0, got " + std::to_string(eps));
  const Shape& xs = x.shape();
  if (gamma.numel() != xs.channels || beta.numel() != xs.channels) {
    throw ShapeError("layer_norm: gamma " + gamma.shape().str() + " / beta " +
                     beta.shape().str() + " must hold " + std::to_string(xs.channels) +
                     " channel values");
  }
  const std::size_t c_n = xs.channels;
  const std::size_t plane = xs.plane();
  // Normalized values and per-position inverse std, kept for backward.
  auto xhat = std::make_shared<std::vector<double>>(xs.numel());
  auto inv_std = std::make_shared<std::vector<double>>(xs.batch * plane);
  FeatureMap out(xs);
  {
    auto y = out.mutable_data();
    auto in = x.data();
    auto gm = gamma.data();
    auto bt = beta.data();
    std::vector<double> mean(plane), var(plane);
    for (std::size_t n = 0; n < xs.batch; ++n) {
      const double* xb = in.data() + n * c_n * plane;
      std::fill(mean.begin(), mean.end(), 0.0);
      std::fill(var.begin(), var.end(), 0.0);
      for (std::size_t c = 0; c < c_n; ++c)
        for (std::size_t q = 0; q < plane; ++q) mean[q] += xb[c * plane + q];
      for (auto& m : mean) m /= static_cast<double>(c_n);
      for (std::size_t c = 0; c < c_n; ++c)
        for (std::size_t q = 0; q < plane; ++q) {
          const double d = xb[c * plane + q] - mean[q];
          var[q] += d * d;
        }
      double* is = inv_std->data() + n * plane;
      for (std::size_t q = 0; q < plane; ++q)
        is[q] = 1.0 / std::sqrt(var[q] / static_cast<double>(c_n) + eps);
      for (std::size_t c = 0; c < c_n; ++c) {
        const std::size_t off = (n * c_n + c) * plane;
        for (std::size_t q = 0; q < plane; ++q) {
          const double h = (xb[c * plane + q] - mean[q]) * is[q];
          (*xhat)[off + q] = h;
          y[off + q] = gm[c] * h + bt[c];
        }
      }
    }
  }
  Tape* tape = common_tape({&x, &gamma, &beta});
  return detail::finish(tape, std::move(out), [x, gamma, beta, xhat, inv_std, c_n, plane](
                                                  Tape& t, std::span<const double> g) {
    auto gx = t.grad_of(x);
    auto gg = t.grad_of(gamma);
    auto gbeta = t.grad_of(beta);
    auto gm = gamma.data();
    const std::size_t batch = x.shape().batch;
    std::vector<double> sum_g(plane), sum_gx(plane);
    for (std::size_t n = 0; n < batch; ++n) {
      std::fill(sum_g.begin(), sum_g.end(), 0.0);
      std::fill(sum_gx.begin(), sum_gx.end(), 0.0);
      for (std::size_t c = 0; c < c_n; ++c) {
        const std::size_t off = (n * c_n + c) * plane;
        double acc_g = 0.0;
        double acc_b = 0.0;
        for (std::size_t q = 0; q < plane; ++q) {
          const double gy = g[off + q];
          const double h = (*xhat)[off + q];
          acc_g += gy * h;
          acc_b += gy;
          const double gh = gy * gm[c];
          sum_g[q] += gh;
          sum_gx[q] += gh * h;
        }
        if (!gg.empty()) gg[c] += acc_g;
        if (!gbeta.empty()) gbeta[c] += acc_b;
      }
      if (gx.empty()) continue;
      const double inv_c = 1.0 / static_cast<double>(c_n);
      const double* is = inv_std->data() + n * plane;
      for (std::size_t c = 0; c < c_n; ++c) {
        const std::size_t off = (n * c_n + c) * plane;
        for (std::size_t q = 0; q < plane; ++q) {
          const double gh = g[off + q] * gm[c];
          gx[off + q] += is[q] * (gh - inv_c * sum_g[q] - (*xhat)[off + q] * inv_c * sum_gx[q]);
        }
      }
    }
  });
}

/// x * logistic(x)
inline FeatureMap silu(const FeatureMap& x) {
  return detail::unary(
      x, [](double v) { return v * detail::logistic(v); },
      [](double v) {
        const double s = detail::logistic(v);
        return s * (1.0 + v * (1.0 - s));
      });
}

inline FeatureMap relu(const FeatureMap& x) {
  return detail::unary(
      x, [](double v) { return v > 0.0 ? v : 0.0; }, [](double v) { return v > 0.0 ? 1.0 : 0.0; });
}

/// log(1 + exp(x)), evaluated without overflow.
inline FeatureMap softplus(const FeatureMap& x) {
  return detail::unary(
      x, [](double v) { return v > 30.0 ? v : std::log1p(std::exp(v)); },
      [](double v) { return detail::logistic(v); });
}

inline FeatureMap add(const FeatureMap& a, const FeatureMap& b) {
  require_same_shape(a, b, "add");
  FeatureMap out(a.shape());
  auto y = out.mutable_data();
  auto as = a.data();
  auto bs = b.data();
  for (std::size_t i = 0; i < y.size(); ++i) y[i] = as[i] + bs[i];
  Tape* tape = common_tape({&a, &b});
  return detail::finish(tape, std::move(out), [a, b](Tape& t, std::span<const double> g) {
    for (const FeatureMap* x : {&a, &b}) {
      auto gx = t.grad_of(*x);
      for (std::size_t i = 0; i < gx.size(); ++i) gx[i] += g[i];
    }
  });
}

inline FeatureMap sub(const FeatureMap& a, const FeatureMap& b) {
  require_same_shape(a, b, "sub");
  FeatureMap out(a.shape());
  auto y = out.mutable_data();
  auto as = a.data();
  auto bs = b.data();
  for (std::size_t i = 0; i < y.size(); ++i) y[i] = as[i] - bs[i];
  Tape* tape = common_tape({&a, &b});
  return detail::finish(tape, std::move(out), [a, b](Tape& t, std::span<const double> g) {
    auto ga = t.grad_of(a);
    for (std::size_t i = 0; i < ga.size(); ++i) ga[i] += g[i];
    auto gb = t.grad_of(b);
    for (std::size_t i = 0; i < gb.size(); ++i) gb[i] -= g[i];
  });
}

/// Elementwise product.
inline FeatureMap hadamard(const FeatureMap& a, const FeatureMap& b) {
  require_same_shape(a, b, "hadamard");
  FeatureMap out(a.shape());
  auto y = out.mutable_data();
  auto as = a.data();
  auto bs = b.data();
  for (std::size_t i = 0; i < y.size(); ++i) y[i] = as[i] * bs[i];
  Tape* tape = common_tape({&a, &b});
  return detail::finish(tape, std::move(out), [a, b](Tape& t, std::span<const double> g) {
    auto ga = t.grad_of(a);
    auto gb = t.grad_of(b);
    auto as = a.data();
    auto bs = b.data();
    for (std::size_t i = 0; i < ga.size(); ++i) ga[i] += g[i] * bs[i];
    for (std::size_t i = 0; i < gb.size(); ++i) gb[i] += g[i] * as[i];
  });
}

inline FeatureMap scale(const FeatureMap& x, double factor) {
  return detail::unary(
      x, [factor](double v) { return factor * v; }, [factor](double) { return factor; });
}

/// Stacks maps along the channel axis.
inline FeatureMap concat_channels(const std::vector<FeatureMap>& parts) {
  if (parts.empty()) throw ShapeError("concat_channels: no inputs");
  const Shape& first = parts.front().shape();
  std::size_t channels = 0;
  Tape* tape = nullptr;
  for (const auto& p : parts) {
    const Shape& s = p.shape();
    if (s.batch != first.batch || s.height != first.height || s.width != first.width) {
      throw ShapeError("concat_channels: shape " + s.str() + " does not match " + first.str() +
                       " outside the channel axis");
    }
    channels += s.channels;
    Tape* pt = common_tape({&p});
    if (pt != nullptr) {
      if (tape != nullptr && tape != pt) throw UsageError("operands are recorded on different tapes");
      tape = pt;
    }
  }
  const Shape os{first.batch, channels, first.height, first.width};
  const std::size_t plane = first.plane();
  FeatureMap out(os);
  auto y = out.mutable_data();
  for (std::size_t n = 0; n < os.batch; ++n) {
    std::size_t c0 = 0;
    for (const auto& p : parts) {
      const std::size_t cnt = p.shape().channels * plane;
      std::copy_n(p.data().begin() + static_cast<std::ptrdiff_t>(n * cnt), cnt,
                  y.begin() + static_cast<std::ptrdiff_t>((n * channels + c0) * plane));
      c0 += p.shape().channels;
    }
  }
  return detail::finish(tape, std::move(out), [parts, channels, plane](Tape& t,
                                                                      std::span<const double> g) {
    const std::size_t batch = parts.front().shape().batch;
    std::size_t c0 = 0;
    for (const auto& p : parts) {
      auto gp = t.grad_of(p);
      const std::size_t cnt = p.shape().channels * plane;
      if (!gp.empty()) {
        for (std::size_t n = 0; n < batch; ++n) {
          const double* src = g.data() + (n * channels + c0) * plane;
          double* dst = gp.data() + n * cnt;
          for (std::size_t i = 0; i < cnt; ++i) dst[i] += src[i];
        }
      }
      c0 += p.shape().channels;
    }
  });
}

/// Channels [begin, begin + count).
inline FeatureMap slice_channels(const FeatureMap& x, std::size_t begin, std::size_t count) {
  const Shape& xs = x.shape();
  if (begin + count > xs.channels) {
    throw ShapeError("slice_channels: [" + std::to_string(begin) + ", " +
                     std::to_string(begin + count) + ") out of range for " + xs.str());
  }
  const Shape os{xs.batch, count, xs.height, xs.width};
  const std::size_t plane = xs.plane();
  FeatureMap out(os);
  auto y = out.mutable_data();
  for (std::size_t n = 0; n < xs.batch; ++n)
    std::copy_n(x.data().begin() + static_cast<std::ptrdiff_t>((n * xs.channels + begin) * plane),
                count * plane, y.begin() + static_cast<std::ptrdiff_t>(n * count * plane));
  Tape* tape = common_tape({&x});
  return detail::finish(tape, std::move(out), [x, begin, count, plane](Tape& t,
                                                                      std::span<const double> g) {
    auto gx = t.grad_of(x);
    const Shape& xs = x.shape();
    for (std::size_t n = 0; n < xs.batch; ++n) {
      double* dst = gx.data() + (n * xs.channels + begin) * plane;
      const double* src = g.data() + n * count * plane;
      for (std::size_t i = 0; i < count * plane; ++i) dst[i] += src[i];
    }
  });
}

/// Reinterprets the extents; element order is unchanged.
inline FeatureMap reshape(const FeatureMap& x, Shape shape) {
  FeatureMap out = x.with_shape(shape);
  Tape* tape = common_tape({&x});
  return detail::finish(tape, std::move(out), [x](Tape& t, std::span<const double> g) {
    auto gx = t.grad_of(x);
    for (std::size_t i = 0; i < gx.size(); ++i) gx[i] += g[i];
  });
}

/// out[n, c, i] = x[n, c, index[i]] where i runs over the output plane.
/// Each output position reads exactly one input position of the same (n, c).
inline FeatureMap gather_plane(const FeatureMap& x,
                               std::shared_ptr<const std::vector<std::size_t>> index,
                               std::size_t out_height, std::size_t out_width) {
  const Shape& xs = x.shape();
  if (index->size() != out_height * out_width) {
    throw ShapeError("gather_plane: index length " + std::to_string(index->size()) +
                     " does not match output plane " + std::to_string(out_height * out_width));
  }
  for (std::size_t v : *index) {
    if (v >= xs.plane()) throw ShapeError("gather_plane: index out of range for " + xs.str());
  }
  const Shape os{xs.batch, xs.channels, out_height, out_width};
  FeatureMap out(os);
  auto y = out.mutable_data();
  auto in = x.data();
  const std::size_t planes = xs.batch * xs.channels;
  const std::size_t ip = xs.plane();
  const std::size_t op = os.plane();
  for (std::size_t k = 0; k < planes; ++k)
    for (std::size_t i = 0; i < op; ++i) y[k * op + i] = in[k * ip + (*index)[i]];
  Tape* tape = common_tape({&x});
  return detail::finish(tape, std::move(out), [x, index, planes, ip, op](Tape& t,
                                                                        std::span<const double> g) {
    auto gx = t.grad_of(x);
    for (std::size_t k = 0; k < planes; ++k)
      for (std::size_t i = 0; i < op; ++i) gx[k * ip + (*index)[i]] += g[k * op + i];
  });
}

/// Swaps the channel axis with the flattened spatial plane:
/// (B, C, H, W) -> (B, H*W, 1, C) with out[b, p, 0, c] = x[b, c, p].
inline FeatureMap transpose_channels_plane(const FeatureMap& x) {
  const Shape& xs = x.shape();
  const std::size_t c_n = xs.channels;
  const std::size_t plane = xs.plane();
  const Shape os{xs.batch, plane, 1, c_n};
  FeatureMap out(os);
  auto y = out.mutable_data();
  auto in = x.data();
  for (std::size_t n = 0; n < xs.batch; ++n)
    for (std::size_t c = 0; c < c_n; ++c)
      for (std::size_t p = 0; p < plane; ++p)
        y[(n * plane + p) * c_n + c] = in[(n * c_n + c) * plane + p];
  Tape* tape = common_tape({&x});
  return detail::finish(tape, std::move(out), [x, c_n, plane](Tape& t, std::span<const double> g) {
    auto gx = t.grad_of(x);
    for (std::size_t n = 0; n < x.shape().batch; ++n)
      for (std::size_t c = 0; c < c_n; ++c)
        for (std::size_t p = 0; p < plane; ++p)
          gx[(n * c_n + c) * plane + p] += g[(n * plane + p) * c_n + c];
  });
}

/// Scalar (1, 1, 1, 1) sum of every element.
inline FeatureMap sum(const FeatureMap& x) {
  double acc = 0.0;
  for (double v : x.data()) acc += v;
  FeatureMap out(Shape{1, 1, 1, 1}, acc);
  Tape* tape = common_tape({&x});
  return detail::finish(tape, std::move(out), [x](Tape& t, std::span<const double> g) {
    auto gx = t.grad_of(x);
    for (double& v : gx) v += g[0];
  });
}

inline FeatureMap mean(const FeatureMap& x) {
  if (x.empty()) throw ShapeError("mean: empty map");
  return scale(sum(x), 1.0 / static_cast<double>(x.numel()));
}

}  // namespace denomamba
