#pragma once

// Parameterized layers. Each layer owns its Parameters and exposes them in a
// fixed order through for_each_parameter.

#include <cmath>
#include <cstddef>
#include <string>

#include "denomamba/ops.hpp"
#include "denomamba/rng.hpp"
#include "denomamba/tape.hpp"

namespace denomamba {

/// Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) fill.
inline void init_uniform(Parameter& p, std::size_t fan_in, CounterRng& rng) {
  const double bound = 1.0 / std::sqrt(static_cast<double>(fan_in));
  for (double& v : p.values()) v = rng.uniform(-bound, bound);
}

struct Conv2dLayer {
  Parameter weight;
  Parameter bias;
  Conv2dOptions options;

  Conv2dLayer() = default;
  Conv2dLayer(const std::string& name, std::size_t in, std::size_t out, std::size_t kernel,
              Conv2dOptions opt, CounterRng& rng)
      : weight(name + ".weight", Shape{out, in / opt.groups, kernel, kernel}),
        bias(name + ".bias", Shape{1, out, 1, 1}),
        options(opt) {
    init_uniform(weight, in / opt.groups * kernel * kernel, rng);
  }

  FeatureMap forward(const FeatureMap& x, Tape* tape) {
    return conv2d(x, use(tape, weight), use(tape, bias), options);
  }

  template <class F>
  void for_each_parameter(F&& f) {
    f(weight);
    f(bias);
  }
};

/// Stride-2 3x3 transposed convolution that doubles height and width.
struct ConvTranspose2dLayer {
  Parameter weight;
  Parameter bias;

  ConvTranspose2dLayer() = default;
  ConvTranspose2dLayer(const std::string& name, std::size_t in, std::size_t out, CounterRng& rng)
      : weight(name + ".weight", Shape{in, out, 3, 3}), bias(name + ".bias", Shape{1, out, 1, 1}) {
    init_uniform(weight, in * 9, rng);
  }

  FeatureMap forward(const FeatureMap& x, Tape* tape) {
    return conv_transpose2d(x, use(tape, weight), use(tape, bias), 2, 1, 1);
  }

  template <class F>
  void for_each_parameter(F&& f) {
    f(weight);
    f(bias);
  }
};

struct LinearLayer {
  Parameter weight;
  Parameter bias;
  bool has_bias = true;

  LinearLayer() = default;
  LinearLayer(const std::string& name, std::size_t in, std::size_t out, CounterRng& rng,
              bool with_bias = true)
      : weight(name + ".weight", Shape{out, in, 1, 1}), has_bias(with_bias) {
    if (with_bias) bias = Parameter(name + ".bias", Shape{1, out, 1, 1});
    init_uniform(weight, in, rng);
  }

  std::size_t in_features() const { return weight.shape().channels; }
  std::size_t out_features() const { return weight.shape().batch; }

  FeatureMap forward(const FeatureMap& x, Tape* tape) {
    return linear(x, use(tape, weight), has_bias ? use(tape, bias) : FeatureMap{});
  }

  template <class F>
  void for_each_parameter(F&& f) {
    f(weight);
    if (has_bias) f(bias);
  }
};

struct LayerNormLayer {
  Parameter gamma;
  Parameter beta;
  double eps = 1e-5;

  LayerNormLayer() = default;
  LayerNormLayer(const std::string& name, std::size_t channels)
      : gamma(name + ".gamma", Shape{1, channels, 1, 1}), beta(name + ".beta", Shape{1, channels, 1, 1}) {
    for (double& v : gamma.values()) v = 1.0;
  }

  FeatureMap forward(const FeatureMap& x, Tape* tape) {
    return layer_norm(x, use(tape, gamma), use(tape, beta), eps);
  }

  template <class F>
  void for_each_parameter(F&& f) {
    f(gamma);
    f(beta);
  }
};

}  // namespace denomamba
