#pragma once

// Synthetic phantoms and image-domain Poisson-Gaussian dose reduction.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <numbers>
#include <string>
#include <vector>

#include "denomamba/errors.hpp"
#include "denomamba/feature_map.hpp"
#include "denomamba/parallel.hpp"
#include "denomamba/rng.hpp"

namespace denomamba {

struct NoiseModel {
  double photons = 1e4;           // full-dose photon budget per unit intensity
  double electronic_sigma = 0.01;  // full-dose electronic noise std
};

struct ImagePair {
  FeatureMap ndct;
  FeatureMap ldct;
  double dose = 1.0;
  std::uint64_t seed = 0;
  NoiseModel noise;
};

namespace detail {

inline constexpr std::uint64_t kPhantomStream = 0x5048414e544f4dULL;
inline constexpr std::uint64_t kDegradeStream = 0x4c444354ULL;

// Logistic edge of width `soft` around the boundary d = 0 (d < 0 inside).
inline double soft_inside(double d, double soft) { return 1.0 / (1.0 + std::exp(d / soft)); }

}  // namespace detail

/// Background disk with 3-8 soft-edged ellipses and one thin line segment.
/// Returns a (1, 1, height, width) map in [0, 1].
inline FeatureMap generate_phantom(std::uint64_t seed, std::size_t height, std::size_t width) {
  if (height < 16 || width < 16) {
    throw ConfigError("generate_phantom: extents must be >= 16, got " + std::to_string(height) +
                      "x" + std::to_string(width));
  }
  CounterRng rng(seed, detail::kPhantomStream);
  const double hh = static_cast<double>(height);
  const double ww = static_cast<double>(width);
  const double soft = 0.6;  // pixels

  struct Ellipse {
    double cy, cx, ry, rx, cos_t, sin_t, value;
  };
  const double body = rng.uniform(0.25, 0.35);
  const double disk_r = 0.45 * std::min(hh, ww);
  const std::size_t count = 3 + rng.below(6);
  std::vector<Ellipse> ellipses;
  for (std::size_t e = 0; e < count; ++e) {
    Ellipse el{};
    const double rad = rng.uniform(0.0, 0.5) * disk_r;
    const double ang = rng.uniform(0.0, 2.0 * std::numbers::pi);
    el.cy = 0.5 * hh + rad * std::sin(ang);
    el.cx = 0.5 * ww + rad * std::cos(ang);
    el.ry = rng.uniform(0.12, 0.35) * disk_r;
    el.rx = rng.uniform(0.12, 0.35) * disk_r;
    const double theta = rng.uniform(0.0, std::numbers::pi);
    el.cos_t = std::cos(theta);
    el.sin_t = std::sin(theta);
    // Alternate darker and brighter inclusions so the histogram keeps
    // separated plateaus.
    el.value = e % 2 == 0 ? rng.uniform(0.6, 0.9) : rng.uniform(0.05, 0.15);
    ellipses.push_back(el);
  }
  // Thin bright segment (about 1.5 px wide) through the body.
  const double seg_ang = rng.uniform(0.0, std::numbers::pi);
  const double seg_len = rng.uniform(0.4, 0.8) * disk_r;
  const double sy = 0.5 * hh + rng.uniform(-0.3, 0.3) * disk_r;
  const double sx = 0.5 * ww + rng.uniform(-0.3, 0.3) * disk_r;
  const double dy = std::sin(seg_ang) * seg_len;
  const double dx = std::cos(seg_ang) * seg_len;
  const double line_value = rng.uniform(0.85, 1.0);
  const double line_half = 0.75;

  FeatureMap out(Shape{1, 1, height, width});
  auto v = out.mutable_data();
  for (std::size_t i = 0; i < height; ++i) {
    for (std::size_t j = 0; j < width; ++j) {
      const double y = static_cast<double>(i) + 0.5;
      const double x = static_cast<double>(j) + 0.5;
      const double r = std::hypot(y - 0.5 * hh, x - 0.5 * ww);
      double val = body * detail::soft_inside(r - disk_r, soft);
      for (const Ellipse& el : ellipses) {
        const double py = y - el.cy;
        const double px = x - el.cx;
        const double u = (px * el.cos_t + py * el.sin_t) / el.rx;
        const double w = (-px * el.sin_t + py * el.cos_t) / el.ry;
        const double rho = std::sqrt(u * u + w * w);
        // Signed distance approximated in pixels along the smaller radius.
        const double weight = detail::soft_inside((rho - 1.0) * std::min(el.rx, el.ry), soft);
        val = val * (1.0 - weight) + el.value * weight;
      }
      const double t =
          std::clamp(((y - sy) * dy + (x - sx) * dx) / (dy * dy + dx * dx), -0.5, 0.5);
      const double dist = std::hypot(y - (sy + t * dy), x - (sx + t * dx));
      const double lw = detail::soft_inside(dist - line_half, 0.25);
      val = val * (1.0 - lw) + line_value * lw;
      v[i * width + j] = std::clamp(val, 0.0, 1.0);
    }
  }
  return out;
}

/// k ~ Poisson(dose * photons * v); out = k / (dose * photons) + N(0, sigma_e / sqrt(dose)),
/// clamped to [0, 1.5].
inline FeatureMap simulate_ldct(const FeatureMap& ndct, double dose, const NoiseModel& noise,
                                std::uint64_t seed) {
  if (!(dose > 0.0 && dose <= 1.0)) {
    throw ConfigError("dose must lie in (0, 1], got " + std::to_string(dose));
  }
  if (!(noise.photons > 0.0)) throw ConfigError("photon budget must be > 0");
  if (!(noise.electronic_sigma >= 0.0)) throw ConfigError("electronic noise std must be >= 0");
  CounterRng rng(seed, detail::kDegradeStream);
  const double budget = dose * noise.photons;
  const double sigma = noise.electronic_sigma / std::sqrt(dose);
  FeatureMap out(ndct.shape());
  auto o = out.mutable_data();
  auto in = ndct.data();
  for (std::size_t i = 0; i < in.size(); ++i) {
    const double mean = budget * std::max(0.0, in[i]);
    const double k = static_cast<double>(rng.poisson(mean));
    const double e = sigma > 0.0 ? sigma * rng.normal() : 0.0;
    o[i] = std::clamp(k / budget + e, 0.0, 1.5);
  }
  return out;
}

/// Pair i uses seed base_seed + i for both the phantom and its degradation.
inline std::vector<ImagePair> make_dataset(std::size_t n, std::size_t size, double dose,
                                           const NoiseModel& noise, std::uint64_t base_seed) {
  if (n == 0) throw ConfigError("make_dataset: n must be >= 1");
  if (!(dose > 0.0 && dose <= 1.0)) {
    throw ConfigError("dose must lie in (0, 1], got " + std::to_string(dose));
  }
  std::vector<ImagePair> pairs(n);
  parallel_for(n, [&](std::size_t i) {
    ImagePair& p = pairs[i];
    p.seed = base_seed + i;
    p.dose = dose;
    p.noise = noise;
    p.ndct = generate_phantom(p.seed, size, size);
    p.ldct = simulate_ldct(p.ndct, dose, noise, p.seed);
  });
  return pairs;
}

}  // namespace denomamba
