#pragma once

// Finite-difference verification of every differentiable building block.
//
// Each check draws random inputs, reduces the module output to a scalar
// through a fixed random projection, and compares the tape gradients of the
// inputs and parameters against central differences on sampled coordinates.

#include <algorithm>
#include <cstdint>
#include <functional>
#include <memory>
#include <set>
#include <string>
#include <vector>

#include "denomamba/blocks.hpp"
#include "denomamba/gradcheck.hpp"
#include "denomamba/layers.hpp"
#include "denomamba/network.hpp"
#include "denomamba/ops.hpp"
#include "denomamba/rng.hpp"
#include "denomamba/ssm.hpp"
#include "denomamba/tape.hpp"

namespace denomamba {

struct GradcheckOptions {
  std::string module = "all";  // all, ops, ssm, spatial, channel, cfm, block, network
  bool corrupt_backward = false;
  std::uint64_t seed = 7;
  double eps = 1e-4;
  double tolerance = 1e-4;
  double floor = 1e-6;
  std::size_t coords_per_tensor = 8;
  double max_non_smooth_fraction = 0.01;
};

struct GradcheckResult {
  std::string group;
  std::string name;
  std::size_t coordinates = 0;
  double max_rel_error = 0.0;
  std::string worst_tensor;
  std::size_t non_smooth = 0;  // skipped: a kink sits within the smallest stencil
  bool passed = false;
};

inline const std::vector<std::string>& gradcheck_groups() {
  static const std::vector<std::string> groups = {"ops",     "ssm",   "spatial", "channel",
                                                  "cfm",     "block", "network"};
  return groups;
}

namespace detail {

inline Parameter random_tensor(const std::string& name, Shape s, CounterRng& rng, double lo = -1.0,
                               double hi = 1.0) {
  Parameter p(name, s);
  for (double& v : p.values()) v = rng.uniform(lo, hi);
  return p;
}

/// One check: `forward` builds the output from watched leaves; `leaves`
/// lists every tensor whose gradient is verified.
inline GradcheckResult run_check(const std::string& group, const std::string& name,
                                 const std::function<FeatureMap(Tape*)>& forward,
                                 const std::vector<Parameter*>& leaves, const GradcheckOptions& opt,
                                 CounterRng& rng) {
  GradcheckResult res;
  res.group = group;
  res.name = name;
  // Fixed projection of the output to a scalar.
  FeatureMap probe;
  auto objective = [&](Tape* tape) {
    FeatureMap out = forward(tape);
    if (probe.empty()) {
      probe = FeatureMap(out.shape());
      for (double& v : probe.mutable_data()) v = rng.uniform(-1.0, 1.0);
    }
    return sum(hadamard(out, probe));
  };
  for (Parameter* p : leaves) p->zero_grad();
  {
    Tape tape;
    tape.set_corrupt_backward(opt.corrupt_backward);
    tape.backward(objective(&tape));
  }
  const std::function<double()> f = [&] { return objective(nullptr).data()[0]; };
  for (Parameter* p : leaves) {
    std::vector<std::size_t> coords;
    if (p->size() <= opt.coords_per_tensor) {
      for (std::size_t i = 0; i < p->size(); ++i) coords.push_back(i);
    } else {
      std::set<std::size_t> picked;
      while (picked.size() < opt.coords_per_tensor) picked.insert(rng.below(p->size()));
      coords.assign(picked.begin(), picked.end());
    }
    const RefinedGradient numeric = refined_finite_difference_grad(f, p->values(), opt.eps, coords);
    for (std::size_t k = 0; k < coords.size(); ++k) {
      if (!numeric.smooth[k]) {
        ++res.non_smooth;
        continue;
      }
      const double e = relative_error(p->grad[coords[k]], numeric.grad[k], opt.floor);
      if (e > res.max_rel_error || res.worst_tensor.empty()) {
        res.max_rel_error = e;
        res.worst_tensor = p->name;
      }
    }
    res.coordinates += coords.size();
  }
  res.passed = res.max_rel_error <= opt.tolerance &&
               static_cast<double>(res.non_smooth) <=
                   opt.max_non_smooth_fraction * static_cast<double>(res.coordinates);
  return res;
}

template <class Module>
std::vector<Parameter*> leaves_of(Module& m, std::vector<Parameter*> extra) {
  m.for_each_parameter([&](Parameter& p) { extra.push_back(&p); });
  return extra;
}

inline void ops_checks(std::vector<GradcheckResult>& out, const GradcheckOptions& opt, CounterRng& rng) {
  const std::string g = "ops";
  {
    auto x = random_tensor("x", Shape{2, 3, 6, 5}, rng);
    auto w = random_tensor("w", Shape{4, 3, 3, 3}, rng);
    auto b = random_tensor("b", Shape{1, 4, 1, 1}, rng);
    out.push_back(run_check(g, "conv2d", [&](Tape* t) {
      return conv2d(use(t, x), use(t, w), use(t, b), Conv2dOptions{1, 1, 1});
    }, {&x, &w, &b}, opt, rng));
    out.push_back(run_check(g, "conv2d_stride2", [&](Tape* t) {
      return conv2d(use(t, x), use(t, w), use(t, b), Conv2dOptions{2, 1, 1});
    }, {&x, &w, &b}, opt, rng));
  }
  {
    auto x = random_tensor("x", Shape{1, 4, 5, 5}, rng);
    auto w = random_tensor("w", Shape{4, 1, 3, 3}, rng);
    auto b = random_tensor("b", Shape{1, 4, 1, 1}, rng);
    out.push_back(run_check(g, "conv2d_depthwise", [&](Tape* t) {
      return conv2d(use(t, x), use(t, w), use(t, b), Conv2dOptions{1, 1, 4});
    }, {&x, &w, &b}, opt, rng));
  }
  {
    auto x = random_tensor("x", Shape{1, 3, 3, 4}, rng);
    auto w = random_tensor("w", Shape{3, 2, 3, 3}, rng);
    auto b = random_tensor("b", Shape{1, 2, 1, 1}, rng);
    out.push_back(run_check(g, "conv_transpose2d", [&](Tape* t) {
      return conv_transpose2d(use(t, x), use(t, w), use(t, b), 2, 1, 1);
    }, {&x, &w, &b}, opt, rng));
  }
  {
    auto x = random_tensor("x", Shape{2, 5, 3, 2}, rng);
    auto w = random_tensor("w", Shape{3, 5, 1, 1}, rng);
    auto b = random_tensor("b", Shape{1, 3, 1, 1}, rng);
    out.push_back(run_check(g, "linear", [&](Tape* t) {
      return linear(use(t, x), use(t, w), use(t, b));
    }, {&x, &w, &b}, opt, rng));
  }
  {
    auto x = random_tensor("x", Shape{2, 6, 3, 3}, rng, -2.0, 2.0);
    auto gamma = random_tensor("gamma", Shape{1, 6, 1, 1}, rng, 0.5, 1.5);
    auto beta = random_tensor("beta", Shape{1, 6, 1, 1}, rng);
    out.push_back(run_check(g, "layer_norm", [&](Tape* t) {
      return layer_norm(use(t, x), use(t, gamma), use(t, beta));
    }, {&x, &gamma, &beta}, opt, rng));
  }
  {
    auto x = random_tensor("x", Shape{1, 3, 4, 4}, rng, -3.0, 3.0);
    out.push_back(run_check(g, "silu", [&](Tape* t) { return silu(use(t, x)); }, {&x}, opt, rng));
    out.push_back(run_check(g, "softplus", [&](Tape* t) { return softplus(use(t, x)); }, {&x}, opt, rng));
  }
  {
    auto a = random_tensor("a", Shape{1, 2, 3, 3}, rng);
    auto b = random_tensor("b", Shape{1, 3, 3, 3}, rng);
    out.push_back(run_check(g, "concat_slice_product", [&](Tape* t) {
      const FeatureMap cat = concat_channels({use(t, a), use(t, b)});
      return hadamard(slice_channels(cat, 0, 2), slice_channels(cat, 3, 2));
    }, {&a, &b}, opt, rng));
    out.push_back(run_check(g, "channel_plane_transpose", [&](Tape* t) {
      return transpose_channels_plane(use(t, b));
    }, {&b}, opt, rng));
  }
}

inline void ssm_checks(std::vector<GradcheckResult>& out, const GradcheckOptions& opt, CounterRng& rng) {
  const std::string g = "ssm";
  for (ScanAlgorithm alg : {ScanAlgorithm::sequential, ScanAlgorithm::chunked}) {
    const std::string suffix = alg == ScanAlgorithm::sequential ? "_sequential" : "_chunked";
    auto u = random_tensor("u", Shape{2, 3, 1, 40}, rng);
    SsmLayerParams params("ssm", 3, 4, rng);
    out.push_back(run_check(g, "selective_scan" + suffix, [&](Tape* t) {
      return selective_scan(ScanSequence{use(t, u), ScanOrigin::plain}, params, t, alg).values;
    }, leaves_of(params, {&u}), opt, rng));
  }
  {
    auto u = random_tensor("u", Shape{1, 2, 1, 9}, rng);
    auto delta = random_tensor("delta", Shape{1, 2, 1, 9}, rng, 0.05, 1.0);
    auto a_log = random_tensor("a_log", Shape{2, 3, 1, 1}, rng, -0.5, 0.5);
    auto b = random_tensor("b", Shape{1, 3, 1, 9}, rng);
    auto c = random_tensor("c", Shape{1, 3, 1, 9}, rng);
    out.push_back(run_check(g, "scan_core", [&](Tape* t) {
      return selective_scan_core(use(t, u), use(t, delta), use(t, a_log), use(t, b), use(t, c),
                                 ScanAlgorithm::chunked);
    }, {&u, &delta, &a_log, &b, &c}, opt, rng));
  }
  {
    auto x = random_tensor("x", Shape{1, 2, 3, 4}, rng);
    SsmLayerParams params("ssm2d", 2, 3, rng);
    out.push_back(run_check(g, "cross_scan_merge", [&](Tape* t) {
      auto seqs = cross_scan_2d(use(t, x));
      for (auto& s : seqs) s = selective_scan(s, params, t);
      return cross_merge_2d(seqs, x.shape());
    }, leaves_of(params, {&x}), opt, rng));
  }
  for (bool bidir : {false, true}) {
    auto x = random_tensor("x", Shape{1, 5, 2, 3}, rng);
    SsmLayerParams params("cssm", 1, 3, rng);
    out.push_back(run_check(g, bidir ? "channel_scan_bidirectional" : "channel_scan", [&](Tape* t) {
      const FeatureMap v = use(t, x);
      return channel_unscan(channel_selective_scan(channel_scan(v), params, t, bidir), v.shape());
    }, leaves_of(params, {&x}), opt, rng));
  }
}

inline BlockOptions tiny_block_options() {
  BlockOptions o;
  o.expansion = 2;
  o.state_size = 3;
  return o;
}

inline void module_checks(const std::string& group, std::vector<GradcheckResult>& out,
                          const GradcheckOptions& opt, CounterRng& rng) {
  const std::size_t w = 3;
  auto z = random_tensor("z", Shape{1, w, 4, 4}, rng);
  if (group == "spatial") {
    SpatialSsmModule m("spatial", w, tiny_block_options(), rng);
    out.push_back(run_check(group, "spatial_ssm_module", [&](Tape* t) {
      return m.forward(use(t, z), t, ScanAlgorithm::chunked);
    }, leaves_of(m, {&z}), opt, rng));
  } else if (group == "channel") {
    ChannelSsmModule m("channel", w, tiny_block_options(), rng);
    out.push_back(run_check(group, "channel_ssm_module", [&](Tape* t) {
      return m.forward(use(t, z), t, ScanAlgorithm::chunked);
    }, leaves_of(m, {&z}), opt, rng));
    GatedConvNetwork gcn("gcn", w, rng);
    out.push_back(run_check(group, "gated_conv_network", [&](Tape* t) {
      return gcn.forward(use(t, z), t);
    }, leaves_of(gcn, {&z}), opt, rng));
    out.push_back(run_check(group, "channel_ssm_with_gcn", [&](Tape* t) {
      return gcn.forward(m.forward(use(t, z), t, ScanAlgorithm::chunked), t);
    }, leaves_of(gcn, leaves_of(m, {&z})), opt, rng));
  } else if (group == "cfm") {
    auto a = random_tensor("a", Shape{1, w, 4, 4}, rng);
    auto b = random_tensor("b", Shape{1, w, 4, 4}, rng);
    ConvFusionModule m("cfm", 3 * w, w, rng);
    out.push_back(run_check(group, "conv_fusion_module", [&](Tape* t) {
      return m.forward({use(t, a), use(t, b), use(t, z)}, t);
    }, leaves_of(m, {&a, &b, &z}), opt, rng));
  } else if (group == "block") {
    FuseSsmBlock m("block", w, tiny_block_options(), rng);
    out.push_back(run_check(group, "fuse_ssm_block", [&](Tape* t) { return m.forward(use(t, z), t); },
                            leaves_of(m, {&z}), opt, rng));
  }
}

inline void network_checks(std::vector<GradcheckResult>& out, const GradcheckOptions& opt,
                           CounterRng& rng) {
  ModelConfig cfg = ModelConfig::desk();
  cfg.seed = opt.seed;
  DenoMambaModel model(cfg);
  auto x = random_tensor("x", Shape{1, 1, 8, 8}, rng, 0.0, 1.0);
  std::vector<Parameter*> leaves{&x};
  model.for_each_parameter([&](Parameter& p) { leaves.push_back(&p); });
  out.push_back(run_check("network", "desk_network", [&](Tape* t) { return model.forward(use(t, x), t); },
                          leaves, opt, rng));
}

}  // namespace detail

/// Runs the checks of one group (or "all"). Throws UsageError for an
/// unknown group name.
inline std::vector<GradcheckResult> run_gradcheck_suite(const GradcheckOptions& opt) {
  const auto& groups = gradcheck_groups();
  if (opt.module != "all" && std::find(groups.begin(), groups.end(), opt.module) == groups.end())
    throw UsageError("unknown gradcheck module '" + opt.module + "'");
  std::vector<GradcheckResult> out;
  for (std::size_t gi = 0; gi < groups.size(); ++gi) {
    const std::string& g = groups[gi];
    if (opt.module != "all" && opt.module != g) continue;
    CounterRng rng(opt.seed, 0x4752414400ULL + gi);
    if (g == "ops")
      detail::ops_checks(out, opt, rng);
    else if (g == "ssm")
      detail::ssm_checks(out, opt, rng);
    else if (g == "network")
      detail::network_checks(out, opt, rng);
    else
      detail::module_checks(g, out, opt, rng);
  }
  return out;
}

}  // namespace denomamba
