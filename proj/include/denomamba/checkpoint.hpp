#pragma once

// Model checkpoints and config (de)serialization.
//
// Layout: "DNMB", version u32, config length u32, config JSON, parameter
// count u64, little-endian f64 parameters in enumeration order, FNV-1a 64
// checksum of every preceding byte.

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include <json.hpp>

#include "denomamba/errors.hpp"
#include "denomamba/io.hpp"
#include "denomamba/network.hpp"

namespace denomamba {

inline constexpr std::uint32_t kCheckpointVersion = 1;

inline std::uint64_t fnv1a64(std::string_view bytes) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char c : bytes) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  return h;
}

inline void to_json(nlohmann::json& j, const AblationFlags& a) {
  j = {{"no_spatial_ssm", a.no_spatial_ssm},
       {"no_channel_ssm", a.no_channel_ssm},
       {"no_gcn", a.no_gcn},
       {"no_cfm", a.no_cfm},
       {"no_identity", a.no_identity}};
}

inline void from_json(const nlohmann::json& j, AblationFlags& a) {
  a.no_spatial_ssm = j.value("no_spatial_ssm", false);
  a.no_channel_ssm = j.value("no_channel_ssm", false);
  a.no_gcn = j.value("no_gcn", false);
  a.no_cfm = j.value("no_cfm", false);
  a.no_identity = j.value("no_identity", false);
}

inline void to_json(nlohmann::json& j, const ModelConfig& c) {
  j = {{"stages", c.stages},
       {"base_width", c.base_width},
       {"enc_blocks", c.enc_blocks},
       {"dec_blocks", c.dec_blocks},
       {"enc_widths", c.enc_widths},
       {"dec_widths", c.dec_widths},
       {"state_size", c.state_size},
       {"conv_width", c.conv_width},
       {"expansion", c.expansion},
       {"ablation", c.ablation},
       {"channel_bidirectional", c.channel_bidirectional},
       {"seed", c.seed}};
}

/// Missing keys keep the values already in `c`, so a partial object
/// overrides a preset.
inline void from_json(const nlohmann::json& j, ModelConfig& c) {
  if (!j.is_object()) throw ConfigError("model config must be a JSON object");
  const bool stages_given = j.contains("stages") || j.contains("base_width");
  c.stages = j.value("stages", c.stages);
  c.base_width = j.value("base_width", c.base_width);
  if (stages_given && !j.contains("enc_widths") && !j.contains("dec_widths")) {
    auto enc = j.value("enc_blocks", std::vector<std::size_t>(c.stages, 1));
    auto dec = j.value("dec_blocks", std::vector<std::size_t>(c.stages, 1));
    const ModelConfig shaped = ModelConfig::with_stages(c.stages, c.base_width, enc, dec);
    c.enc_blocks = shaped.enc_blocks;
    c.dec_blocks = shaped.dec_blocks;
    c.enc_widths = shaped.enc_widths;
    c.dec_widths = shaped.dec_widths;
  } else {
    c.enc_blocks = j.value("enc_blocks", c.enc_blocks);
    c.dec_blocks = j.value("dec_blocks", c.dec_blocks);
    c.enc_widths = j.value("enc_widths", c.enc_widths);
    c.dec_widths = j.value("dec_widths", c.dec_widths);
  }
  c.state_size = j.value("state_size", c.state_size);
  c.conv_width = j.value("conv_width", c.conv_width);
  c.expansion = j.value("expansion", c.expansion);
  if (j.contains("ablation")) c.ablation = j.at("ablation").get<AblationFlags>();
  c.channel_bidirectional = j.value("channel_bidirectional", c.channel_bidirectional);
  c.seed = j.value("seed", c.seed);
}

/// Flat copy of every parameter value in enumeration order.
inline std::vector<double> flatten_parameters(DenoMambaModel& model) {
  std::vector<double> out;
  out.reserve(model.param_count());
  model.for_each_parameter([&](Parameter& p) {
    auto v = p.value.data();
    out.insert(out.end(), v.begin(), v.end());
  });
  return out;
}

inline void assign_parameters(DenoMambaModel& model, const std::vector<double>& flat) {
  if (flat.size() != model.param_count())
    throw IntegrityError("parameter count " + std::to_string(flat.size()) + " does not match model (" +
                         std::to_string(model.param_count()) + ")");
  std::size_t off = 0;
  model.for_each_parameter([&](Parameter& p) {
    auto v = p.values();
    std::copy_n(flat.begin() + static_cast<std::ptrdiff_t>(off), v.size(), v.begin());
    off += v.size();
  });
}

inline std::string encode_checkpoint(const ModelConfig& config, const std::vector<double>& params) {
  std::string out = "DNMB";
  detail::put_le<std::uint32_t>(out, kCheckpointVersion);
  const std::string cfg = nlohmann::json(config).dump();
  detail::put_le<std::uint32_t>(out, static_cast<std::uint32_t>(cfg.size()));
  out += cfg;
  detail::put_le<std::uint64_t>(out, params.size());
  for (double v : params) detail::put_le(out, v);
  detail::put_le<std::uint64_t>(out, fnv1a64(out));
  return out;
}

inline std::string encode_checkpoint(DenoMambaModel& model) {
  return encode_checkpoint(model.config(), flatten_parameters(model));
}

struct CheckpointData {
  ModelConfig config;
  std::vector<double> params;
};

/// Throws IntegrityError on a bad magic, version, checksum or size.
inline CheckpointData decode_checkpoint(const std::string& bytes, const std::string& what = "checkpoint") {
  if (bytes.size() < 4 + 4 + 4 + 8 + 8) throw IntegrityError(what + ": truncated");
  const std::string_view body(bytes.data(), bytes.size() - 8);
  detail::ByteReader tail(bytes.substr(bytes.size() - 8), what);
  if (tail.get<std::uint64_t>() != fnv1a64(body)) throw IntegrityError(what + ": checksum mismatch");
  detail::ByteReader r(bytes, what);
  if (r.take(4) != "DNMB") throw IntegrityError(what + ": bad magic");
  const auto version = r.get<std::uint32_t>();
  if (version != kCheckpointVersion)
    throw IntegrityError(what + ": unsupported version " + std::to_string(version));
  const auto len = r.get<std::uint32_t>();
  CheckpointData data;
  try {
    nlohmann::json::parse(r.take(len)).get_to(data.config);
    data.config.validate();
  } catch (const nlohmann::json::exception& e) {
    throw IntegrityError(what + ": bad config block (" + e.what() + ")");
  } catch (const ConfigError& e) {
    throw IntegrityError(what + ": " + e.what());
  }
  const auto count = r.get<std::uint64_t>();
  if (r.remaining() != count * 8 + 8) throw IntegrityError(what + ": parameter block size mismatch");
  data.params.resize(count);
  for (double& v : data.params) v = r.get<double>();
  return data;
}

inline void save_checkpoint(const std::filesystem::path& path, DenoMambaModel& model) {
  write_file(path, encode_checkpoint(model));
}

inline DenoMambaModel load_checkpoint(const std::filesystem::path& path) {
  CheckpointData data = decode_checkpoint(read_file(path), path.string());
  DenoMambaModel model(data.config);
  assign_parameters(model, data.params);
  return model;
}

}  // namespace denomamba
