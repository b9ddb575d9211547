#pragma once

// Parameter count worked out from layer shapes alone, independent of the
// model's own bookkeeping.

#include <cstddef>

#include "denomamba/network.hpp"

namespace denomamba::test {

inline std::size_t linear_count(std::size_t in, std::size_t out, bool bias = true) {
  return in * out + (bias ? out : 0);
}

inline std::size_t conv_count(std::size_t in, std::size_t out, std::size_t k, std::size_t groups = 1) {
  return out * (in / groups) * k * k + out;
}

inline std::size_t ssm_count(std::size_t d, std::size_t n) {
  const std::size_t r = (d + 15) / 16 > 0 ? (d + 15) / 16 : 1;
  return d * n + linear_count(d, r + 2 * n, false) + linear_count(r, d);
}

inline std::size_t ssm_module_count(std::size_t c, std::size_t alpha, std::size_t n, std::size_t ssm_features) {
  const std::size_t e = alpha * c;
  return 2 * c + 2 * linear_count(c, e) + conv_count(e, e, 3, e) + ssm_count(ssm_features, n) +
         linear_count(e, c);
}

inline std::size_t block_count(std::size_t c, const ModelConfig& cfg) {
  const AblationFlags& ab = cfg.ablation;
  const std::size_t alpha = cfg.expansion, n = cfg.state_size;
  std::size_t total = 0;
  std::size_t pooled = ab.no_identity ? 0 : 1;
  if (!ab.no_spatial_ssm) {
    total += ssm_module_count(c, alpha, n, alpha * c);
    ++pooled;
  }
  if (!ab.no_channel_ssm) {
    total += ssm_module_count(c, alpha, n, 1);
    if (!ab.no_gcn) total += 2 * conv_count(c, c, 1) + 2 * conv_count(c, c, 3, c);
    ++pooled;
  }
  if (!ab.no_cfm) total += conv_count(pooled * c, c, 1) + conv_count(pooled * c, c, 3) + conv_count(c, c, 3);
  return total;
}

inline std::size_t model_count(const ModelConfig& cfg) {
  const std::size_t k = cfg.stages;
  std::size_t total = conv_count(1, cfg.enc_widths[0], 3);
  for (std::size_t i = 0; i < k; ++i) {
    total += cfg.enc_blocks[i] * block_count(cfg.enc_widths[i], cfg);
    if (i + 1 < k) total += conv_count(cfg.enc_widths[i], cfg.enc_widths[i + 1], 3);
  }
  for (std::size_t j = 0; j < k; ++j) {
    if (j + 1 < k) {
      const std::size_t in = j == 0 ? cfg.enc_widths[k - 1] : cfg.dec_widths[j - 1];
      total += in * cfg.dec_widths[j] * 9 + cfg.dec_widths[j];
    }
    total += cfg.dec_blocks[j] * block_count(cfg.dec_widths[j], cfg);
  }
  return total + conv_count(cfg.dec_widths[k - 1], 1, 3);
}

}  // namespace denomamba::test
