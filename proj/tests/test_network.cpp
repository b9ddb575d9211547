#include <vector>

#include <gtest/gtest.h>

#include "denomamba/network.hpp"
#include "denomamba/training.hpp"
#include "param_tally.hpp"
#include "test_util.hpp"

namespace denomamba {
namespace {

using test::random_map;

ModelConfig tiny(std::size_t k) {
  ModelConfig cfg = ModelConfig::with_stages(k, 4, std::vector<std::size_t>(k, 1), std::vector<std::size_t>(k, 1));
  cfg.state_size = 2;
  return cfg;
}

TEST(ModelConfig, PresetsHaveTheDocumentedLayout) {
  const ModelConfig paper = ModelConfig::paper();
  EXPECT_EQ(paper.stages, 4u);
  EXPECT_EQ(paper.enc_widths, (std::vector<std::size_t>{48, 96, 192, 384}));
  EXPECT_EQ(paper.dec_widths, (std::vector<std::size_t>{192, 96, 48, 48}));
  EXPECT_EQ(paper.enc_blocks, (std::vector<std::size_t>{4, 6, 6, 8}));
  EXPECT_EQ(paper.dec_blocks, (std::vector<std::size_t>{6, 6, 4, 2}));
  EXPECT_EQ(paper.state_size, 16u);
  EXPECT_EQ(paper.conv_width, 4u);
  EXPECT_EQ(paper.expansion, 2u);
  const ModelConfig desk = ModelConfig::desk();
  EXPECT_EQ(desk.stages, 3u);
  EXPECT_EQ(desk.base_width, 8u);
  EXPECT_EQ(desk.state_size, 4u);
  EXPECT_EQ(desk.enc_widths, (std::vector<std::size_t>{8, 16, 32}));
  EXPECT_EQ(desk.dec_widths, (std::vector<std::size_t>{16, 8, 8}));
}

TEST(ModelConfig, ValidationNamesTheBrokenConstraint) {
  ModelConfig cfg = ModelConfig::desk();
  cfg.dec_widths[0] = 12;
  EXPECT_THROW(cfg.validate(), ConfigError);
  cfg = ModelConfig::desk();
  cfg.enc_blocks = {1, 1};
  EXPECT_THROW(cfg.validate(), ConfigError);
  cfg = ModelConfig::desk();
  cfg.state_size = 0;
  EXPECT_THROW(cfg.validate(), ConfigError);
}

TEST(DenoMambaModel, DeskPresetForwardsA32x32Input) {
  DenoMambaModel model(ModelConfig::desk());
  const FeatureMap y = model.forward(random_map(Shape{1, 1, 32, 32}, 1, 0.0, 1.0));
  EXPECT_EQ(y.shape(), (Shape{1, 1, 32, 32}));
  for (double v : y.data()) EXPECT_TRUE(std::isfinite(v));
}

TEST(DenoMambaModel, StagesHonorTheWidthScheduleForEveryDepth) {
  for (std::size_t k = 1; k <= 4; ++k) {
    DenoMambaModel model(tiny(k));
    const ModelConfig& cfg = model.config();
    for (std::size_t s : {16u, 32u}) {
      const FeatureMap x = random_map(Shape{1, 1, s, s}, k * 100 + s, 0.0, 1.0);
      const FeatureMap e = model.embed(x, nullptr);
      const auto enc = model.encoder_forward(e, nullptr);
      ASSERT_EQ(enc.skips.size(), k);
      for (std::size_t i = 0; i < k; ++i) {
        const std::size_t scale = std::size_t{1} << (i == 0 ? 0 : i - 1);
        EXPECT_EQ(enc.skips[i].shape(), (Shape{1, cfg.skip_width(i), s / scale, s / scale}));
      }
      const std::size_t bs = s >> (k - 1);
      EXPECT_EQ(enc.bottleneck.shape(), (Shape{1, cfg.enc_widths[k - 1], bs, bs}));
      const FeatureMap d = model.decoder_forward(enc.bottleneck, enc.skips, nullptr);
      EXPECT_EQ(d.shape(), (Shape{1, cfg.dec_widths[k - 1], s, s}));
      EXPECT_EQ(model.project(d, nullptr).shape(), x.shape());
    }
    for (std::size_t j = 0; j < k; ++j)
      for (const auto& b : model.decoder_stages()[j]) EXPECT_EQ(b.width, cfg.dec_widths[j]);
    for (std::size_t i = 0; i < k; ++i)
      for (const auto& b : model.encoder_stages()[i]) EXPECT_EQ(b.width, cfg.enc_widths[i]);
  }
}

TEST(DenoMambaModel, IndivisibleInputIsAConfigError) {
  DenoMambaModel model(tiny(3));
  EXPECT_THROW(model.forward(FeatureMap(Shape{1, 1, 30, 32})), ConfigError);
  EXPECT_THROW(model.forward(FeatureMap(Shape{1, 2, 32, 32})), ShapeError);
  EXPECT_THROW(build_model(tiny(4), 36, 36), ConfigError);
  EXPECT_NO_THROW(build_model(tiny(4), 40, 48));
}

TEST(DenoMambaModel, ParamCountMatchesIndependentTally) {
  for (std::size_t k = 1; k <= 4; ++k) {
    DenoMambaModel model(tiny(k));
    EXPECT_EQ(model.param_count(), test::model_count(model.config())) << "K=" << k;
  }
  DenoMambaModel desk(ModelConfig::desk());
  EXPECT_EQ(desk.param_count(), test::model_count(desk.config()));
  for (const auto& v : ablation_variants()) {
    ModelConfig cfg = ModelConfig::desk();
    cfg.ablation = v.flags;
    DenoMambaModel m(cfg);
    EXPECT_EQ(m.param_count(), test::model_count(cfg)) << v.name;
  }
}

TEST(DenoMambaModel, PaperPresetParamCountMatchesIndependentTally) {
  DenoMambaModel model(ModelConfig::paper());
  EXPECT_EQ(model.param_count(), test::model_count(ModelConfig::paper()));
}

TEST(DenoMambaModel, SameSeedSameWeights) {
  ModelConfig cfg = ModelConfig::desk();
  cfg.seed = 5;
  DenoMambaModel a(cfg), b(cfg);
  cfg.seed = 6;
  DenoMambaModel c(cfg);
  const auto pa = a.parameters(), pb = b.parameters(), pc = c.parameters();
  bool differs = false;
  for (std::size_t i = 0; i < pa.size(); ++i) {
    for (std::size_t j = 0; j < pa[i]->size(); ++j) {
      ASSERT_EQ(pa[i]->value.data()[j], pb[i]->value.data()[j]);
      differs = differs || pa[i]->value.data()[j] != pc[i]->value.data()[j];
    }
  }
  EXPECT_TRUE(differs);
}

TEST(DenoMambaModel, BackwardTouchesNearlyEveryParameter) {
  DenoMambaModel model(ModelConfig::desk());
  const FeatureMap x = random_map(Shape{1, 1, 32, 32}, 9, 0.0, 1.0);
  const FeatureMap t = random_map(Shape{1, 1, 32, 32}, 10, 0.0, 1.0);
  Tape tape;
  tape.backward(l1_loss(model.forward(x, &tape), t));
  std::size_t nonzero = 0, total = 0;
  for (Parameter* p : model.parameters()) {
    for (double g : p->grad) {
      nonzero += g != 0.0;
      ++total;
    }
  }
  EXPECT_GE(static_cast<double>(nonzero), 0.99 * static_cast<double>(total));
}

}  // namespace
}  // namespace denomamba
