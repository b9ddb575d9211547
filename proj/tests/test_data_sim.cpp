#include <cmath>
#include <cstdlib>
#include <vector>

#include <gtest/gtest.h>

#include "denomamba/data_sim.hpp"
#include "denomamba/metrics.hpp"

namespace denomamba {
namespace {

bool same_values(const FeatureMap& a, const FeatureMap& b) {
  if (a.shape() != b.shape()) return false;
  for (std::size_t i = 0; i < a.numel(); ++i)
    if (a.data()[i] != b.data()[i]) return false;
  return true;
}

TEST(Phantom, LiesInTheUnitIntervalAndDependsOnlyOnTheSeed) {
  const FeatureMap a = generate_phantom(3, 32, 48);
  EXPECT_EQ(a.shape(), (Shape{1, 1, 32, 48}));
  for (double v : a.data()) {
    EXPECT_GE(v, 0.0);
    EXPECT_LE(v, 1.0);
  }
  EXPECT_TRUE(same_values(a, generate_phantom(3, 32, 48)));
  EXPECT_FALSE(same_values(a, generate_phantom(4, 32, 48)));
}

TEST(Phantom, HasStructure) {
  const FeatureMap p = generate_phantom(5, 64, 64);
  double lo = 1.0, hi = 0.0;
  for (double v : p.data()) {
    lo = std::min(lo, v);
    hi = std::max(hi, v);
  }
  EXPECT_LT(lo, 0.01);  // corners are outside the body
  EXPECT_GT(hi, 0.6);   // bright inclusion or line
  EXPECT_LT(p.at(0, 0, 0, 0), 0.01);
}

TEST(Phantom, RejectsTinyExtents) { EXPECT_THROW(generate_phantom(1, 8, 32), ConfigError); }

TEST(SimulateLdct, RejectsDoseOutsideTheUnitInterval) {
  const FeatureMap p = generate_phantom(1, 16, 16);
  EXPECT_THROW(simulate_ldct(p, 0.0, NoiseModel{}, 1), ConfigError);
  EXPECT_THROW(simulate_ldct(p, 1.5, NoiseModel{}, 1), ConfigError);
  EXPECT_THROW(simulate_ldct(p, -0.1, NoiseModel{}, 1), ConfigError);
  EXPECT_NO_THROW(simulate_ldct(p, 1.0, NoiseModel{}, 1));
}

TEST(SimulateLdct, NoiseMomentsFollowThePoissonGaussianModel) {
  // Flat field: residual variance should be v / (dose * photons) + sigma^2 / dose.
  const double v = 0.5, dose = 0.25;
  const NoiseModel noise{1e4, 0.01};
  const FeatureMap flat(Shape{1, 1, 256, 256}, v);
  const FeatureMap ld = simulate_ldct(flat, dose, noise, 9);
  double m = 0.0, s2 = 0.0;
  for (double x : ld.data()) m += x;
  m /= static_cast<double>(ld.numel());
  for (double x : ld.data()) s2 += (x - m) * (x - m);
  s2 /= static_cast<double>(ld.numel() - 1);
  const double want = v / (dose * noise.photons) + noise.electronic_sigma * noise.electronic_sigma / dose;
  EXPECT_NEAR(m, v, 5e-4);
  EXPECT_NEAR(s2 / want, 1.0, 0.03);
}

TEST(SimulateLdct, OutputIsClampedAndDeterministic) {
  const FeatureMap p = generate_phantom(2, 32, 32);
  const FeatureMap a = simulate_ldct(p, 0.05, NoiseModel{}, 2);
  for (double v : a.data()) {
    EXPECT_GE(v, 0.0);
    EXPECT_LE(v, 1.5);
  }
  EXPECT_TRUE(same_values(a, simulate_ldct(p, 0.05, NoiseModel{}, 2)));
  EXPECT_FALSE(same_values(a, simulate_ldct(p, 0.05, NoiseModel{}, 3)));
}

TEST(SimulateLdct, LowerDoseIsNoisier) {
  for (std::uint64_t s = 0; s < 5; ++s) {
    const FeatureMap p = generate_phantom(s, 32, 32);
    EXPECT_LT(psnr(simulate_ldct(p, 0.10, NoiseModel{}, s), p), psnr(simulate_ldct(p, 0.25, NoiseModel{}, s), p));
  }
}

TEST(MakeDataset, PairIUsesSeedBasePlusI) {
  const auto pairs = make_dataset(4, 32, 0.25, NoiseModel{}, 100);
  ASSERT_EQ(pairs.size(), 4u);
  for (std::size_t i = 0; i < 4; ++i) {
    EXPECT_EQ(pairs[i].seed, 100 + i);
    EXPECT_EQ(pairs[i].dose, 0.25);
    EXPECT_TRUE(same_values(pairs[i].ndct, generate_phantom(100 + i, 32, 32)));
    EXPECT_TRUE(same_values(pairs[i].ldct, simulate_ldct(pairs[i].ndct, 0.25, NoiseModel{}, 100 + i)));
  }
  EXPECT_THROW(make_dataset(0, 32, 0.25, NoiseModel{}, 1), ConfigError);
}

TEST(MakeDataset, ThreadCountDoesNotChangeTheData) {
  const auto serial = make_dataset(6, 32, 0.25, NoiseModel{}, 7);
  ::setenv("DENOMAMBA_THREADS", "3", 1);
  const auto threaded = make_dataset(6, 32, 0.25, NoiseModel{}, 7);
  ::unsetenv("DENOMAMBA_THREADS");
  for (std::size_t i = 0; i < 6; ++i) {
    EXPECT_TRUE(same_values(serial[i].ndct, threaded[i].ndct));
    EXPECT_TRUE(same_values(serial[i].ldct, threaded[i].ldct));
  }
}

}  // namespace
}  // namespace denomamba
