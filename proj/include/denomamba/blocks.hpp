#pragma once

// FuseSSM block: spatial SSM, channel SSM + gated convolution network, and an
// identity path, fused by a convolutional fusion module (CFM).

#include <cstddef>
#include <optional>
#include <string>
#include <vector>

#include "denomamba/errors.hpp"
#include "denomamba/layers.hpp"
#include "denomamba/ops.hpp"
#include "denomamba/ssm.hpp"

namespace denomamba {

/// Module ablations. A disabled SSM pathway or identity path is dropped from
/// the fusion input; without GCN the channel pathway stops at its SSM
/// residual; without CFM the enabled pathways are summed.
struct AblationFlags {
  bool no_spatial_ssm = false;
  bool no_channel_ssm = false;
  bool no_gcn = false;
  bool no_cfm = false;
  bool no_identity = false;

  friend bool operator==(const AblationFlags&, const AblationFlags&) = default;

  void validate() const {
    if (no_spatial_ssm && no_channel_ssm)
      throw ConfigError("ablation: spatial and channel SSM pathways cannot both be disabled");
  }

  std::size_t pooled_paths() const {
    return (no_spatial_ssm ? 0 : 1) + (no_channel_ssm ? 0 : 1) + (no_identity ? 0 : 1);
  }
};

struct BlockOptions {
  std::size_t expansion = 2;
  std::size_t state_size = 16;
  bool channel_bidirectional = false;
  AblationFlags ablation;
  ScanAlgorithm scan = ScanAlgorithm::chunked;
};

/// z_spa = z + out(silu(gate(norm z)) * SSM2d(silu(dw(in(norm z)))))
struct SpatialSsmModule {
  LayerNormLayer norm;
  LinearLayer gate_proj;
  LinearLayer in_proj;
  Conv2dLayer dwconv;
  SsmLayerParams ssm;
  LinearLayer out_proj;

  SpatialSsmModule(const std::string& name, std::size_t width, const BlockOptions& opt,
                   CounterRng& rng)
      : norm(name + ".norm", width),
        gate_proj(name + ".gate_proj", width, opt.expansion * width, rng),
        in_proj(name + ".in_proj", width, opt.expansion * width, rng),
        dwconv(name + ".dwconv", opt.expansion * width, opt.expansion * width, 3,
               Conv2dOptions{1, 1, opt.expansion * width}, rng),
        ssm(name + ".ssm", opt.expansion * width, opt.state_size, rng),
        out_proj(name + ".out_proj", opt.expansion * width, width, rng) {}

  FeatureMap forward(const FeatureMap& z_in, Tape* tape, ScanAlgorithm alg) {
    const FeatureMap zn = norm.forward(z_in, tape);
    const FeatureMap gate = silu(gate_proj.forward(zn, tape));
    const FeatureMap v = silu(dwconv.forward(in_proj.forward(zn, tape), tape));
    auto seqs = cross_scan_2d(v);
    for (auto& s : seqs) s = selective_scan(s, ssm, tape, alg);
    const FeatureMap m = cross_merge_2d(seqs, v.shape());
    return add(z_in, out_proj.forward(hadamard(gate, m), tape));
  }

  template <class F>
  void for_each_parameter(F&& f) {
    norm.for_each_parameter(f);
    gate_proj.for_each_parameter(f);
    in_proj.for_each_parameter(f);
    dwconv.for_each_parameter(f);
    ssm.for_each_parameter(f);
    out_proj.for_each_parameter(f);
  }
};

/// Same structure as the spatial module, but the SSM runs along the channel
/// axis of the expanded map (transpose, scan, transpose back).
struct ChannelSsmModule {
  LayerNormLayer norm;
  LinearLayer gate_proj;
  LinearLayer in_proj;
  Conv2dLayer dwconv;
  SsmLayerParams ssm;
  LinearLayer out_proj;
  bool bidirectional = false;

  ChannelSsmModule(const std::string& name, std::size_t width, const BlockOptions& opt,
                   CounterRng& rng)
      : norm(name + ".norm", width),
        gate_proj(name + ".gate_proj", width, opt.expansion * width, rng),
        in_proj(name + ".in_proj", width, opt.expansion * width, rng),
        dwconv(name + ".dwconv", opt.expansion * width, opt.expansion * width, 3,
               Conv2dOptions{1, 1, opt.expansion * width}, rng),
        ssm(name + ".ssm", 1, opt.state_size, rng),
        out_proj(name + ".out_proj", opt.expansion * width, width, rng),
        bidirectional(opt.channel_bidirectional) {}

  FeatureMap forward(const FeatureMap& z_in, Tape* tape, ScanAlgorithm alg) {
    const FeatureMap zn = norm.forward(z_in, tape);
    const FeatureMap gate = silu(gate_proj.forward(zn, tape));
    const FeatureMap v = silu(dwconv.forward(in_proj.forward(zn, tape), tape));
    const ScanSequence seq = channel_scan(v);
    const FeatureMap m =
        channel_unscan(channel_selective_scan(seq, ssm, tape, bidirectional, alg), v.shape());
    return add(z_in, out_proj.forward(hadamard(gate, m), tape));
  }

  template <class F>
  void for_each_parameter(F&& f) {
    norm.for_each_parameter(f);
    gate_proj.for_each_parameter(f);
    in_proj.for_each_parameter(f);
    dwconv.for_each_parameter(f);
    ssm.for_each_parameter(f);
    out_proj.for_each_parameter(f);
  }
};

/// t = inner(z); out = proj(relu(dw_gate(t)) * dw_value(t)) + z
struct GatedConvNetwork {
  Conv2dLayer inner;
  Conv2dLayer dw_gate;
  Conv2dLayer dw_value;
  Conv2dLayer out_proj;

  GatedConvNetwork(const std::string& name, std::size_t width, CounterRng& rng)
      : inner(name + ".inner", width, width, 1, Conv2dOptions{}, rng),
        dw_gate(name + ".dw_gate", width, width, 3, Conv2dOptions{1, 1, width}, rng),
        dw_value(name + ".dw_value", width, width, 3, Conv2dOptions{1, 1, width}, rng),
        out_proj(name + ".out_proj", width, width, 1, Conv2dOptions{}, rng) {}

  /// The ReLU gate (second gating variable), exposed for inspection.
  FeatureMap gate(const FeatureMap& z, Tape* tape) {
    return relu(dw_gate.forward(inner.forward(z, tape), tape));
  }

  FeatureMap forward(const FeatureMap& z, Tape* tape) {
    const FeatureMap t = inner.forward(z, tape);
    const FeatureMap g = relu(dw_gate.forward(t, tape));
    const FeatureMap v = dw_value.forward(t, tape);
    return add(out_proj.forward(hadamard(g, v), tape), z);
  }

  template <class F>
  void for_each_parameter(F&& f) {
    inner.for_each_parameter(f);
    dw_gate.for_each_parameter(f);
    dw_value.for_each_parameter(f);
    out_proj.for_each_parameter(f);
  }
};

/// out = conv1x1(pool) + conv3x3(conv3x3(pool)) with pool the channel concat.
struct ConvFusionModule {
  Conv2dLayer point;
  Conv2dLayer conv_a;
  Conv2dLayer conv_b;

  ConvFusionModule(const std::string& name, std::size_t pooled, std::size_t width,
                   CounterRng& rng)
      : point(name + ".point", pooled, width, 1, Conv2dOptions{}, rng),
        conv_a(name + ".conv_a", pooled, width, 3, Conv2dOptions{1, 1, 1}, rng),
        conv_b(name + ".conv_b", width, width, 3, Conv2dOptions{1, 1, 1}, rng) {}

  FeatureMap forward(const std::vector<FeatureMap>& parts, Tape* tape) {
    const FeatureMap pool = concat_channels(parts);
    if (pool.shape().channels != point.weight.shape().channels) {
      throw ShapeError("cfm: pooled map " + pool.shape().str() + " does not match fusion input width " +
                       std::to_string(point.weight.shape().channels));
    }
    return add(point.forward(pool, tape), conv_b.forward(conv_a.forward(pool, tape), tape));
  }

  template <class F>
  void for_each_parameter(F&& f) {
    point.for_each_parameter(f);
    conv_a.for_each_parameter(f);
    conv_b.for_each_parameter(f);
  }
};

struct FuseSsmBlock {
  std::size_t width = 0;
  BlockOptions options;
  std::optional<SpatialSsmModule> spatial;
  std::optional<ChannelSsmModule> channel;
  std::optional<GatedConvNetwork> gcn;
  std::optional<ConvFusionModule> cfm;

  FuseSsmBlock(const std::string& name, std::size_t block_width, const BlockOptions& opt,
               CounterRng& rng)
      : width(block_width), options(opt) {
    opt.ablation.validate();
    if (block_width == 0) throw ConfigError("FuseSSM block width must be positive");
    const AblationFlags& ab = opt.ablation;
    if (!ab.no_spatial_ssm) spatial.emplace(name + ".spatial", width, opt, rng);
    if (!ab.no_channel_ssm) {
      channel.emplace(name + ".channel", width, opt, rng);
      if (!ab.no_gcn) gcn.emplace(name + ".gcn", width, rng);
    }
    if (!ab.no_cfm) cfm.emplace(name + ".cfm", ab.pooled_paths() * width, width, rng);
  }

  /// Pathway outputs in fusion order (spatial, channel, identity), skipping
  /// the disabled ones.
  std::vector<FeatureMap> pathways(const FeatureMap& z_in, Tape* tape) {
    if (z_in.shape().channels != width) {
      throw ShapeError("FuseSSM block: input " + z_in.shape().str() + " expects " +
                       std::to_string(width) + " channels");
    }
    std::vector<FeatureMap> parts;
    if (spatial) parts.push_back(spatial->forward(z_in, tape, options.scan));
    if (channel) {
      FeatureMap z_tilde = channel->forward(z_in, tape, options.scan);
      parts.push_back(gcn ? gcn->forward(z_tilde, tape) : z_tilde);
    }
    if (!options.ablation.no_identity) parts.push_back(z_in);
    return parts;
  }

  FeatureMap forward(const FeatureMap& z_in, Tape* tape) {
    const std::vector<FeatureMap> parts = pathways(z_in, tape);
    if (cfm) return cfm->forward(parts, tape);
    FeatureMap total = parts.front();
    for (std::size_t i = 1; i < parts.size(); ++i) total = add(total, parts[i]);
    return total;
  }

  template <class F>
  void for_each_parameter(F&& f) {
    if (spatial) spatial->for_each_parameter(f);
    if (channel) channel->for_each_parameter(f);
    if (gcn) gcn->for_each_parameter(f);
    if (cfm) cfm->for_each_parameter(f);
  }
};

}  // namespace denomamba
