#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <limits>
#include <span>
#include <string>
#include <vector>

#include "denomamba/errors.hpp"

namespace denomamba {

/// Central-difference gradient of `f` with respect to `theta`, evaluated
/// coordinate by coordinate. `theta` is perturbed in place and restored.
inline std::vector<double> finite_difference_grad(const std::function<double()>& f,
                                                  std::span<double> theta, double eps,
                                                  std::span<const std::size_t> coords = {}) {
  if (!(eps > 0.0)) throw ConfigError("finite_difference_grad: eps must be > 0");
  std::vector<std::size_t> all;
  if (coords.empty()) {
    all.resize(theta.size());
    for (std::size_t i = 0; i < all.size(); ++i) all[i] = i;
    coords = all;
  }
  std::vector<double> grad(coords.size());
  for (std::size_t k = 0; k < coords.size(); ++k) {
    double& v = theta[coords[k]];
    const double saved = v;
    v = saved + eps;
    const double up = f();
    v = saved - eps;
    const double down = f();
    v = saved;
    if (!std::isfinite(up) || !std::isfinite(down)) {
      throw NumericError("finite_difference_grad: non-finite objective at coordinate " +
                         std::to_string(coords[k]));
    }
    grad[k] = (up - down) / (2.0 * eps);
  }
  return grad;
}

struct StepRefinement {
  std::size_t retries = 2;  // each retry divides the step by 10
  double asymmetry = 1e-4;  // allowed relative gap between one-sided slopes
  double floor = 1e-6;
};

/// Five-point central differences with a smoothness check. The forward and
/// backward second-order one-sided slopes,
///   (-3 f(0) + 4 f(h) - f(2h)) / 2h   and   (3 f(0) - 4 f(-h) + f(-2h)) / 2h,
/// agree to O(h^2) on a smooth objective but differ by the size of the jump
/// when a kink (a ReLU switching, say) lies within [x - 2h, x + 2h]. On
/// disagreement the step is divided by 10 and the coordinate retried.
/// Coordinates that never pass are flagged in `smooth`; for those the
/// estimate with the smallest gap is returned.
struct RefinedGradient {
  std::vector<double> grad;
  std::vector<bool> smooth;
};

inline RefinedGradient refined_finite_difference_grad(const std::function<double()>& f,
                                                      std::span<double> theta, double eps,
                                                      std::span<const std::size_t> coords,
                                                      const StepRefinement& refine = {}) {
  if (!(eps > 0.0)) throw ConfigError("refined_finite_difference_grad: eps must be > 0");
  const double f0 = f();
  RefinedGradient out{std::vector<double>(coords.size()), std::vector<bool>(coords.size(), false)};
  for (std::size_t k = 0; k < coords.size(); ++k) {
    double& v = theta[coords[k]];
    const double saved = v;
    auto at = [&](double offset) {
      v = saved + offset;
      const double r = f();
      v = saved;
      if (!std::isfinite(r))
        throw NumericError("refined_finite_difference_grad: non-finite objective at coordinate " +
                           std::to_string(coords[k]));
      return r;
    };
    double h = eps;
    bool smooth = false;
    double best_gap = std::numeric_limits<double>::infinity();
    for (std::size_t attempt = 0; attempt <= refine.retries && !smooth; ++attempt, h /= 10.0) {
      const double p1 = at(h), p2 = at(2.0 * h), m1 = at(-h), m2 = at(-2.0 * h);
      const double fwd = (-3.0 * f0 + 4.0 * p1 - p2) / (2.0 * h);
      const double bwd = (3.0 * f0 - 4.0 * m1 + m2) / (2.0 * h);
      const double gap = std::abs(fwd - bwd) / std::max({std::abs(fwd), std::abs(bwd), refine.floor});
      if (gap < best_gap) {
        best_gap = gap;
        out.grad[k] = (-p2 + 8.0 * p1 - 8.0 * m1 + m2) / (12.0 * h);
      }
      smooth = gap <= refine.asymmetry;
    }
    out.smooth[k] = smooth;
  }
  return out;
}

/// |a - b| / max(|a|, |b|, floor): relative error with an absolute floor so
/// that coordinates with vanishing gradient are compared absolutely.
inline double relative_error(double a, double b, double floor = 1e-6) {
  return std::abs(a - b) / std::max({std::abs(a), std::abs(b), floor});
}

inline double max_relative_error(std::span<const double> a, std::span<const double> b,
                                 double floor = 1e-6) {
  double worst = 0.0;
  for (std::size_t i = 0; i < a.size() && i < b.size(); ++i)
    worst = std::max(worst, relative_error(a[i], b[i], floor));
  return worst;
}

}  // namespace denomamba
