#pragma once

// Image-quality metrics and the Wilcoxon signed-rank test.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <numeric>
#include <span>
#include <string>
#include <vector>

#include "denomamba/errors.hpp"
#include "denomamba/feature_map.hpp"

namespace denomamba {

/// PSNR reported for identical images.
inline constexpr double kPsnrCap = 99.0;

namespace detail {

inline void check_metric_inputs(const FeatureMap& a, const FeatureMap& b, double data_range,
                                const char* name) {
  require_same_shape(a, b, name);
  if (a.empty()) throw ShapeError(std::string(name) + ": empty images");
  if (!(data_range > 0.0)) throw ConfigError(std::string(name) + ": data_range must be > 0");
}

inline double mse(const FeatureMap& a, const FeatureMap& b) {
  auto as = a.data();
  auto bs = b.data();
  double acc = 0.0;
  for (std::size_t i = 0; i < as.size(); ++i) {
    const double d = as[i] - bs[i];
    acc += d * d;
  }
  return acc / static_cast<double>(as.size());
}

}  // namespace detail

/// 10 log10(range^2 / MSE), capped at 99 dB.
inline double psnr(const FeatureMap& a, const FeatureMap& b, double data_range = 1.0) {
  detail::check_metric_inputs(a, b, data_range, "psnr");
  const double m = detail::mse(a, b);
  if (m == 0.0) return kPsnrCap;
  return std::min(kPsnrCap, 10.0 * std::log10(data_range * data_range / m));
}

/// 100 sqrt(MSE) / range.
inline double rmse_percent(const FeatureMap& a, const FeatureMap& b, double data_range = 1.0) {
  detail::check_metric_inputs(a, b, data_range, "rmse_percent");
  return 100.0 * std::sqrt(detail::mse(a, b)) / data_range;
}

struct SsimOptions {
  std::size_t window = 7;
  double k1 = 0.01;
  double k2 = 0.03;
  double data_range = 1.0;
};

/// Mean SSIM over every fully contained window (uniform weights, population
/// moments), averaged over all (batch, channel) planes.
inline double ssim(const FeatureMap& a, const FeatureMap& b, const SsimOptions& opt = {}) {
  detail::check_metric_inputs(a, b, opt.data_range, "ssim");
  const Shape& s = a.shape();
  const std::size_t win = opt.window;
  if (win == 0 || s.height < win || s.width < win) {
    throw ShapeError("ssim: image " + s.str() + " smaller than " + std::to_string(win) + "x" +
                     std::to_string(win) + " window");
  }
  const double c1 = (opt.k1 * opt.data_range) * (opt.k1 * opt.data_range);
  const double c2 = (opt.k2 * opt.data_range) * (opt.k2 * opt.data_range);
  const double inv_n = 1.0 / static_cast<double>(win * win);
  auto as = a.data();
  auto bs = b.data();
  double total = 0.0;
  std::size_t count = 0;
  for (std::size_t p = 0; p < s.batch * s.channels; ++p) {
    const double* pa = as.data() + p * s.plane();
    const double* pb = bs.data() + p * s.plane();
    for (std::size_t i = 0; i + win <= s.height; ++i) {
      for (std::size_t j = 0; j + win <= s.width; ++j) {
        double sa = 0, sb = 0;
        for (std::size_t u = 0; u < win; ++u) {
          const double* ra = pa + (i + u) * s.width + j;
          const double* rb = pb + (i + u) * s.width + j;
          for (std::size_t v = 0; v < win; ++v) {
            sa += ra[v];
            sb += rb[v];
          }
        }
        const double ma = sa * inv_n;
        const double mb = sb * inv_n;
        // Centered second pass; raw moments cancel badly on flat windows.
        double saa = 0, sbb = 0, sab = 0;
        for (std::size_t u = 0; u < win; ++u) {
          const double* ra = pa + (i + u) * s.width + j;
          const double* rb = pb + (i + u) * s.width + j;
          for (std::size_t v = 0; v < win; ++v) {
            const double da = ra[v] - ma, db = rb[v] - mb;
            saa += da * da;
            sbb += db * db;
            sab += da * db;
          }
        }
        const double va = saa * inv_n;
        const double vb = sbb * inv_n;
        const double cov = sab * inv_n;
        total += ((2 * ma * mb + c1) * (2 * cov + c2)) / ((ma * ma + mb * mb + c1) * (va + vb + c2));
        ++count;
      }
    }
  }
  return total / static_cast<double>(count);
}

struct Summary {
  double mean = 0.0;
  double std = 0.0;
};

/// Mean and sample standard deviation (0 for a single value).
inline Summary aggregate(std::span<const double> values) {
  if (values.empty()) throw UsageError("aggregate: empty list");
  const double n = static_cast<double>(values.size());
  const double m = std::accumulate(values.begin(), values.end(), 0.0) / n;
  if (values.size() == 1) return {m, 0.0};
  double ss = 0.0;
  for (double v : values) ss += (v - m) * (v - m);
  return {m, std::sqrt(ss / (n - 1.0))};
}

struct MetricReport {
  std::vector<std::string> ids;
  std::vector<double> psnr;
  std::vector<double> ssim;
  std::vector<double> rmse_pct;

  std::size_t size() const { return ids.size(); }
  Summary psnr_summary() const { return aggregate(psnr); }
  Summary ssim_summary() const { return aggregate(ssim); }
  Summary rmse_summary() const { return aggregate(rmse_pct); }

  void add(std::string id, const FeatureMap& estimate, const FeatureMap& reference,
           double data_range = 1.0) {
    ids.push_back(std::move(id));
    psnr.push_back(denomamba::psnr(estimate, reference, data_range));
    SsimOptions opt;
    opt.data_range = data_range;
    ssim.push_back(denomamba::ssim(estimate, reference, opt));
    rmse_pct.push_back(denomamba::rmse_percent(estimate, reference, data_range));
  }
};

struct WilcoxonResult {
  double statistic = 0.0;    // min(W+, W-)
  double w_plus = 0.0;
  double w_minus = 0.0;
  double p_two_sided = 1.0;
  std::size_t n = 0;         // after dropping zeros
  bool exact = true;
  bool degenerate = false;   // every difference was zero
};

namespace detail {

// Average ranks of |d| (1-based), ties sharing the mean rank.
inline std::vector<double> abs_ranks(const std::vector<double>& d) {
  std::vector<std::size_t> order(d.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::stable_sort(order.begin(), order.end(),
                   [&](std::size_t i, std::size_t j) { return std::abs(d[i]) < std::abs(d[j]); });
  std::vector<double> ranks(d.size());
  for (std::size_t i = 0; i < order.size();) {
    std::size_t j = i;
    while (j + 1 < order.size() && std::abs(d[order[j + 1]]) == std::abs(d[order[i]])) ++j;
    const double r = 0.5 * static_cast<double>(i + j) + 1.0;
    for (std::size_t k = i; k <= j; ++k) ranks[order[k]] = r;
    i = j + 1;
  }
  return ranks;
}

inline WilcoxonResult wilcoxon_prepare(std::span<const double> diffs, std::vector<double>& nz,
                                       std::vector<double>& ranks) {
  WilcoxonResult res;
  for (double v : diffs)
    if (v != 0.0) nz.push_back(v);
  res.n = nz.size();
  if (nz.empty()) {
    res.degenerate = true;
    return res;
  }
  ranks = abs_ranks(nz);
  for (std::size_t i = 0; i < nz.size(); ++i) (nz[i] > 0 ? res.w_plus : res.w_minus) += ranks[i];
  res.statistic = std::min(res.w_plus, res.w_minus);
  return res;
}

}  // namespace detail

/// Exact two-sided p from the null distribution of W+ over all 2^n sign
/// assignments, counted by dynamic programming on doubled ranks.
inline WilcoxonResult wilcoxon_exact(std::span<const double> diffs) {
  std::vector<double> nz, ranks;
  WilcoxonResult res = detail::wilcoxon_prepare(diffs, nz, ranks);
  if (res.degenerate) return res;
  std::vector<std::size_t> twice(ranks.size());
  std::size_t max_sum = 0;
  for (std::size_t i = 0; i < ranks.size(); ++i) {
    twice[i] = static_cast<std::size_t>(std::llround(2.0 * ranks[i]));
    max_sum += twice[i];
  }
  std::vector<double> counts(max_sum + 1, 0.0);
  counts[0] = 1.0;
  for (std::size_t r : twice)
    for (std::size_t s = max_sum + 1; s-- > r;) counts[s] += counts[s - r];
  const auto observed = static_cast<std::size_t>(std::llround(2.0 * res.w_plus));
  const double total = std::ldexp(1.0, static_cast<int>(ranks.size()));
  double lower = 0.0, upper = 0.0;
  for (std::size_t s = 0; s <= max_sum; ++s) {
    if (s <= observed) lower += counts[s];
    if (s >= observed) upper += counts[s];
  }
  res.p_two_sided = std::min(1.0, 2.0 * std::min(lower, upper) / total);
  res.exact = true;
  return res;
}

/// Normal approximation with tie correction, no continuity correction.
inline WilcoxonResult wilcoxon_normal(std::span<const double> diffs) {
  std::vector<double> nz, ranks;
  WilcoxonResult res = detail::wilcoxon_prepare(diffs, nz, ranks);
  res.exact = false;
  if (res.degenerate) return res;
  const double n = static_cast<double>(res.n);
  const double mean = n * (n + 1.0) / 4.0;
  double var = n * (n + 1.0) * (2.0 * n + 1.0) / 24.0;
  std::vector<double> sorted = ranks;
  std::sort(sorted.begin(), sorted.end());
  for (std::size_t i = 0; i < sorted.size();) {
    std::size_t j = i;
    while (j + 1 < sorted.size() && sorted[j + 1] == sorted[i]) ++j;
    const double t = static_cast<double>(j - i + 1);
    var -= (t * t * t - t) / 48.0;
    i = j + 1;
  }
  if (var <= 0.0) {
    res.p_two_sided = 1.0;
    return res;
  }
  const double z = (res.w_plus - mean) / std::sqrt(var);
  res.p_two_sided = std::min(1.0, std::erfc(std::abs(z) / std::sqrt(2.0)));
  return res;
}

/// Zeros are dropped; exact for n <= 20, normal approximation above.
inline WilcoxonResult wilcoxon_signed_rank(std::span<const double> diffs) {
  std::size_t nonzero = 0;
  for (double v : diffs) nonzero += v != 0.0 ? 1 : 0;
  return nonzero <= 20 ? wilcoxon_exact(diffs) : wilcoxon_normal(diffs);
}

}  // namespace denomamba
