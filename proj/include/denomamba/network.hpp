#pragma once

// K-stage hourglass of FuseSSM blocks with learnable resampling and
// additive skip connections.

#include <cstddef>
#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "denomamba/blocks.hpp"
#include "denomamba/errors.hpp"
#include "denomamba/layers.hpp"
#include "denomamba/rng.hpp"

namespace denomamba {

struct ModelConfig {
  std::size_t stages = 3;
  std::size_t base_width = 8;
  std::vector<std::size_t> enc_blocks{1, 1, 1};
  std::vector<std::size_t> dec_blocks{1, 1, 1};
  std::vector<std::size_t> enc_widths{8, 16, 32};
  std::vector<std::size_t> dec_widths{16, 8, 8};
  std::size_t state_size = 4;
  std::size_t conv_width = 4;
  std::size_t expansion = 2;
  AblationFlags ablation;
  bool channel_bidirectional = false;
  std::uint64_t seed = 0;

  friend bool operator==(const ModelConfig&, const ModelConfig&) = default;

  /// Widths doubling per encoder stage from `base`, decoder mirrored, with
  /// the last decoder stage at `base`.
  static ModelConfig with_stages(std::size_t k, std::size_t base, std::vector<std::size_t> enc,
                                 std::vector<std::size_t> dec) {
    ModelConfig cfg;
    cfg.stages = k;
    cfg.base_width = base;
    cfg.enc_blocks = std::move(enc);
    cfg.dec_blocks = std::move(dec);
    cfg.enc_widths.clear();
    cfg.dec_widths.clear();
    for (std::size_t i = 0; i < k; ++i) cfg.enc_widths.push_back(base << i);
    for (std::size_t j = 0; j + 1 < k; ++j) cfg.dec_widths.push_back(base << (k - 2 - j));
    cfg.dec_widths.push_back(base);
    return cfg;
  }

  /// K=4, C=48, E=[4,6,6,8], D=[6,6,4,2], N=16, local conv width 4, alpha=2.
  static ModelConfig paper() {
    ModelConfig cfg = with_stages(4, 48, {4, 6, 6, 8}, {6, 6, 4, 2});
    cfg.state_size = 16;
    return cfg;
  }

  /// K=3, C=8, one block per stage, N=4.
  static ModelConfig desk() {
    ModelConfig cfg = with_stages(3, 8, {1, 1, 1}, {1, 1, 1});
    cfg.state_size = 4;
    return cfg;
  }

  std::size_t required_divisor() const { return std::size_t{1} << (stages - 1); }

  /// Width of skip i: the embedding for i = 0, else encoder stage i-1 before Down.
  std::size_t skip_width(std::size_t i) const { return i == 0 ? enc_widths[0] : enc_widths[i - 1]; }

  void validate() const {
    auto fail = [](const std::string& msg) { throw ConfigError("model config: " + msg); };
    if (stages == 0) fail("stages must be >= 1");
    if (enc_blocks.size() != stages || dec_blocks.size() != stages || enc_widths.size() != stages ||
        dec_widths.size() != stages) {
      fail("block and width lists must each have " + std::to_string(stages) + " entries");
    }
    for (std::size_t i = 0; i < stages; ++i) {
      if (enc_blocks[i] == 0 || dec_blocks[i] == 0) fail("block counts must be >= 1");
      if (enc_widths[i] == 0 || dec_widths[i] == 0) fail("widths must be positive");
    }
    if (state_size == 0) fail("state size must be >= 1");
    if (expansion == 0) fail("expansion must be >= 1");
    if (conv_width == 0) fail("local convolution width must be >= 1");
    ablation.validate();
    for (std::size_t j = 0; j < stages; ++j) {
      const std::size_t skip = skip_width(stages - 1 - j);
      if (dec_widths[j] != skip) {
        fail("decoder stage " + std::to_string(j) + " width " + std::to_string(dec_widths[j]) +
             " does not match its skip width " + std::to_string(skip));
      }
    }
    const std::size_t last_in = stages >= 2 ? dec_widths[stages - 2] : enc_widths[0];
    if (last_in != dec_widths[stages - 1]) {
      fail("final decoder stage input width " + std::to_string(last_in) + " must equal its width " +
           std::to_string(dec_widths[stages - 1]));
    }
  }

  BlockOptions block_options() const {
    BlockOptions opt;
    opt.expansion = expansion;
    opt.state_size = state_size;
    opt.channel_bidirectional = channel_bidirectional;
    opt.ablation = ablation;
    return opt;
  }
};

/// Stride-2 3x3 convolution halving height/width. Even extents required.
inline FeatureMap down(const FeatureMap& x, Conv2dLayer& layer, Tape* tape) {
  const Shape& s = x.shape();
  if (s.height % 2 != 0 || s.width % 2 != 0) {
    throw ShapeError("down: spatial extents of " + s.str() + " must be even");
  }
  return layer.forward(x, tape);
}

/// Stride-2 3x3 transposed convolution doubling height/width.
inline FeatureMap up(const FeatureMap& x, ConvTranspose2dLayer& layer, Tape* tape) {
  return layer.forward(x, tape);
}

using Stage = std::vector<FuseSsmBlock>;

class DenoMambaModel {
 public:
  struct EncoderOutput {
    FeatureMap bottleneck;
    std::vector<FeatureMap> skips;  // skips[0] is the embedding
  };

  explicit DenoMambaModel(ModelConfig cfg) : config_(std::move(cfg)) {
    config_.validate();
    CounterRng rng(config_.seed, 0x4d4f44454cULL);
    const BlockOptions opt = config_.block_options();
    const std::size_t k_n = config_.stages;
    embed_ = Conv2dLayer("embed", 1, config_.enc_widths[0], 3, Conv2dOptions{1, 1, 1}, rng);
    for (std::size_t k = 0; k < k_n; ++k) {
      Stage stage;
      stage.reserve(config_.enc_blocks[k]);
      for (std::size_t r = 0; r < config_.enc_blocks[k]; ++r)
        stage.emplace_back("enc." + std::to_string(k) + ".block." + std::to_string(r),
                           config_.enc_widths[k], opt, rng);
      encoder_.push_back(std::move(stage));
      if (k + 1 < k_n)
        downs_.emplace_back("enc." + std::to_string(k) + ".down", config_.enc_widths[k],
                            config_.enc_widths[k + 1], 3, Conv2dOptions{2, 1, 1}, rng);
    }
    for (std::size_t j = 0; j < k_n; ++j) {
      if (j + 1 < k_n) {
        const std::size_t in = j == 0 ? config_.enc_widths[k_n - 1] : config_.dec_widths[j - 1];
        ups_.emplace_back("dec." + std::to_string(j) + ".up", in, config_.dec_widths[j], rng);
      }
      Stage stage;
      stage.reserve(config_.dec_blocks[j]);
      for (std::size_t r = 0; r < config_.dec_blocks[j]; ++r)
        stage.emplace_back("dec." + std::to_string(j) + ".block." + std::to_string(r),
                           config_.dec_widths[j], opt, rng);
      decoder_.push_back(std::move(stage));
    }
    head_ = Conv2dLayer("head", config_.dec_widths[k_n - 1], 1, 3, Conv2dOptions{1, 1, 1}, rng);
  }

  DenoMambaModel(const DenoMambaModel&) = delete;
  DenoMambaModel& operator=(const DenoMambaModel&) = delete;
  DenoMambaModel(DenoMambaModel&&) = default;
  DenoMambaModel& operator=(DenoMambaModel&&) = default;

  const ModelConfig& config() const { return config_; }

  void check_input(const Shape& s) const {
    if (s.channels != 1) throw ShapeError("model input must have 1 channel, got " + s.str());
    const std::size_t div = config_.required_divisor();
    if (s.height == 0 || s.width == 0 || s.height % div != 0 || s.width % div != 0) {
      throw ConfigError("input extents " + std::to_string(s.height) + "x" + std::to_string(s.width) +
                        " must be divisible by " + std::to_string(div) + " for " +
                        std::to_string(config_.stages) + " stages");
    }
  }

  FeatureMap embed(const FeatureMap& x, Tape* tape) { return embed_.forward(x, tape); }

  EncoderOutput encoder_forward(const FeatureMap& embedded, Tape* tape) {
    EncoderOutput out;
    out.skips.push_back(embedded);
    FeatureMap h = embedded;
    for (std::size_t k = 0; k < encoder_.size(); ++k) {
      for (auto& block : encoder_[k]) h = block.forward(h, tape);
      if (k + 1 < encoder_.size()) {
        out.skips.push_back(h);
        h = down(h, downs_[k], tape);
      }
    }
    out.bottleneck = h;
    return out;
  }

  FeatureMap decoder_forward(const FeatureMap& bottleneck, const std::vector<FeatureMap>& skips,
                             Tape* tape) {
    const std::size_t k_n = decoder_.size();
    if (skips.size() != k_n) {
      throw ShapeError("decoder: expected " + std::to_string(k_n) + " skips, got " +
                       std::to_string(skips.size()));
    }
    FeatureMap h = bottleneck;
    for (std::size_t j = 0; j < k_n; ++j) {
      if (j + 1 < k_n) h = up(h, ups_[j], tape);
      const FeatureMap& skip = skips[k_n - 1 - j];
      if (skip.shape() != h.shape()) {
        throw ShapeError("decoder stage " + std::to_string(j) + ": skip " + skip.shape().str() +
                         " does not match decoder map " + h.shape().str());
      }
      h = add(h, skip);
      for (auto& block : decoder_[j]) h = block.forward(h, tape);
    }
    return h;
  }

  FeatureMap project(const FeatureMap& features, Tape* tape) { return head_.forward(features, tape); }

  /// (B, 1, H, W) -> (B, 1, H, W).
  FeatureMap forward(const FeatureMap& x, Tape* tape = nullptr) {
    check_input(x.shape());
    const FeatureMap e = embed(x, tape);
    EncoderOutput enc = encoder_forward(e, tape);
    return project(decoder_forward(enc.bottleneck, enc.skips, tape), tape);
  }

  /// Visits every parameter in a fixed order.
  template <class F>
  void for_each_parameter(F&& f) {
    embed_.for_each_parameter(f);
    for (std::size_t k = 0; k < encoder_.size(); ++k) {
      for (auto& block : encoder_[k]) block.for_each_parameter(f);
      if (k < downs_.size()) downs_[k].for_each_parameter(f);
    }
    for (std::size_t j = 0; j < decoder_.size(); ++j) {
      if (j < ups_.size()) ups_[j].for_each_parameter(f);
      for (auto& block : decoder_[j]) block.for_each_parameter(f);
    }
    head_.for_each_parameter(f);
  }

  std::vector<Parameter*> parameters() {
    std::vector<Parameter*> out;
    for_each_parameter([&](Parameter& p) { out.push_back(&p); });
    return out;
  }

  std::size_t param_count() {
    std::size_t n = 0;
    for_each_parameter([&](Parameter& p) { n += p.size(); });
    return n;
  }

  void zero_grad() {
    for_each_parameter([](Parameter& p) { p.zero_grad(); });
  }

  std::vector<Stage>& encoder_stages() { return encoder_; }
  std::vector<Stage>& decoder_stages() { return decoder_; }
  std::vector<Conv2dLayer>& downs() { return downs_; }
  std::vector<ConvTranspose2dLayer>& ups() { return ups_; }

 private:
  ModelConfig config_;
  Conv2dLayer embed_;
  std::vector<Stage> encoder_;
  std::vector<Conv2dLayer> downs_;
  std::vector<ConvTranspose2dLayer> ups_;
  std::vector<Stage> decoder_;
  Conv2dLayer head_;
};

inline DenoMambaModel build_model(const ModelConfig& config) { return DenoMambaModel(config); }

/// Builds and checks that `height` x `width` inputs are admissible.
inline DenoMambaModel build_model(const ModelConfig& config, std::size_t height, std::size_t width) {
  DenoMambaModel model(config);
  model.check_input(Shape{1, 1, height, width});
  return model;
}

}  // namespace denomamba
