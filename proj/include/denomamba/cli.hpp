#pragma once

// Command-line front end: simulate-ldct, train, ablate, denoise, eval,
// gradcheck, info. `run` returns the process exit code:
//   0 success, 1 verification failure, 2 usage/config error,
//   3 data/checkpoint integrity error.

#include <algorithm>
#include <cstdint>
#include <filesystem>
#include <iomanip>
#include <iostream>
#include <map>
#include <ostream>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "denomamba/checkpoint.hpp"
#include "denomamba/data_sim.hpp"
#include "denomamba/errors.hpp"
#include "denomamba/gradcheck_suite.hpp"
#include "denomamba/io.hpp"
#include "denomamba/metrics.hpp"
#include "denomamba/network.hpp"
#include "denomamba/training.hpp"

namespace denomamba::cli {

namespace fs = std::filesystem;
using nlohmann::json;

enum ExitCode : int { kOk = 0, kVerificationFailed = 1, kUsage = 2, kIntegrity = 3 };

namespace detail {

inline json load_config(const std::string& path) {
  if (path.empty()) return json::object();
  try {
    json j = json::parse(read_file(path));
    if (!j.is_object()) throw ConfigError("config " + path + " must hold a JSON object");
    return j;
  } catch (const json::exception& e) {
    throw ConfigError("config " + path + ": " + e.what());
  }
}

/// Fills `value` from the config file unless the flag was given.
template <class T>
void merge(const json& cfg, const CLI::Option* opt, const char* key, T& value) {
  if (opt->count() > 0 || !cfg.contains(key)) return;
  try {
    value = cfg.at(key).get<T>();
  } catch (const json::exception& e) {
    throw ConfigError(std::string("config key '") + key + "': " + e.what());
  }
}

inline void prepare_dir(const fs::path& dir) {
  if (dir.empty()) throw UsageError("an output directory is required (--out)");
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec || !fs::is_directory(dir)) throw UsageError("cannot create output directory " + dir.string());
  const fs::path probe = dir / ".write_probe";
  {
    std::ofstream f(probe);
    if (!f) throw UsageError("output directory " + dir.string() + " is not writable");
  }
  fs::remove(probe, ec);
}

inline void echo_config(const fs::path& dir, const json& resolved) {
  write_file(dir / "resolved_config.json", resolved.dump(2) + "\n");
}

inline bool is_image(const fs::path& p) { return p.extension() == ".dnim" || p.extension() == ".pgm"; }

inline std::vector<fs::path> list_images(const fs::path& dir) {
  if (!fs::is_directory(dir)) throw UsageError(dir.string() + " is not a directory");
  std::vector<fs::path> out;
  for (const auto& e : fs::directory_iterator(dir))
    if (e.is_regular_file() && is_image(e.path())) out.push_back(e.path());
  std::sort(out.begin(), out.end());
  return out;
}

inline std::vector<ImagePair> to_pairs(const std::vector<LoadedPair>& loaded) {
  std::vector<ImagePair> out;
  for (const auto& lp : loaded) {
    ImagePair p;
    p.ndct = lp.ndct;
    p.ldct = lp.ldct;
    p.dose = lp.entry.dose;
    p.seed = lp.entry.seed;
    out.push_back(std::move(p));
  }
  return out;
}

inline AblationFlags parse_ablations(const std::vector<std::string>& names) {
  AblationFlags a;
  for (std::string n : names) {
    std::replace(n.begin(), n.end(), '_', '-');
    if (n == "no-spa-ssm" || n == "no-spatial-ssm")
      a.no_spatial_ssm = true;
    else if (n == "no-cha-ssm" || n == "no-channel-ssm")
      a.no_channel_ssm = true;
    else if (n == "no-gcn")
      a.no_gcn = true;
    else if (n == "no-cfm")
      a.no_cfm = true;
    else if (n == "no-iden" || n == "no-identity")
      a.no_identity = true;
    else if (n != "none")
      throw ConfigError("unknown ablation '" + n +
                        "' (expected no-spa-ssm, no-cha-ssm, no-gcn, no-cfm, no-iden)");
  }
  a.validate();
  return a;
}

inline ModelConfig preset_config(const std::string& preset) {
  if (preset == "desk") return ModelConfig::desk();
  if (preset == "paper") return ModelConfig::paper();
  throw ConfigError("unknown preset '" + preset + "' (expected desk or paper)");
}

struct ReportRow {
  std::string id;
  double psnr, ssim, rmse_pct;
};

inline std::string encode_report(const MetricReport& rep) {
  std::string out = "id,psnr,ssim,rmse_pct\n";
  for (std::size_t i = 0; i < rep.size(); ++i)
    out += rep.ids[i] + "," + format_real(rep.psnr[i]) + "," + format_real(rep.ssim[i]) + "," +
           format_real(rep.rmse_pct[i]) + "\n";
  const Summary p = rep.psnr_summary(), s = rep.ssim_summary(), r = rep.rmse_summary();
  out += "mean," + format_real(p.mean) + "," + format_real(s.mean) + "," + format_real(r.mean) + "\n";
  out += "std," + format_real(p.std) + "," + format_real(s.std) + "," + format_real(r.std) + "\n";
  return out;
}

/// Per-image rows of a report CSV (aggregate rows skipped).
inline std::vector<ReportRow> decode_report(const std::string& text, const std::string& what) {
  std::istringstream in(text);
  std::string line;
  if (!std::getline(in, line) || line.rfind("id,psnr,ssim,rmse_pct", 0) != 0)
    throw IntegrityError(what + ": missing report header");
  std::vector<ReportRow> rows;
  while (std::getline(in, line)) {
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    const auto c = split_csv_line(line);
    if (c.size() != 4) throw IntegrityError(what + ": malformed row '" + line + "'");
    if (c[0] == "mean" || c[0] == "std") continue;
    try {
      rows.push_back({c[0], std::stod(c[1]), std::stod(c[2]), std::stod(c[3])});
    } catch (const std::exception&) {
      throw IntegrityError(what + ": malformed row '" + line + "'");
    }
  }
  return rows;
}

// ---------------------------------------------------------------------------

inline int cmd_simulate(const json& cfg, const std::map<std::string, CLI::Option*>& o,
                        std::size_t n, std::size_t size, double dose, std::uint64_t seed,
                        double photons, double sigma, std::string format, std::string out_dir,
                        std::ostream& out) {
  merge(cfg, o.at("n"), "n", n);
  merge(cfg, o.at("size"), "size", size);
  merge(cfg, o.at("dose"), "dose", dose);
  merge(cfg, o.at("seed"), "seed", seed);
  merge(cfg, o.at("photons"), "photons", photons);
  merge(cfg, o.at("electronic-noise"), "electronic_noise", sigma);
  merge(cfg, o.at("format"), "format", format);
  merge(cfg, o.at("out"), "out", out_dir);
  if (!(dose > 0.0 && dose <= 1.0))
    throw ConfigError("--dose must lie in the interval (0, 1], got " + format_real(dose));
  if (n == 0) throw ConfigError("--n must be >= 1");
  if (size < 16) throw ConfigError("--size must be >= 16");
  const ImageFormat fmt = parse_image_format(format);
  const fs::path dir(out_dir);
  prepare_dir(dir);
  echo_config(dir, {{"command", "simulate-ldct"},
                    {"n", n},
                    {"size", size},
                    {"dose", dose},
                    {"seed", seed},
                    {"photons", photons},
                    {"electronic_noise", sigma},
                    {"format", format},
                    {"out", out_dir}});
  const auto pairs = make_dataset(n, size, dose, NoiseModel{photons, sigma}, seed);
  std::vector<ManifestEntry> manifest;
  for (std::size_t i = 0; i < pairs.size(); ++i) {
    std::ostringstream name;
    name << std::setw(4) << std::setfill('0') << i << image_extension(fmt);
    ManifestEntry e{i, "ndct/" + name.str(), "ldct/" + name.str(), dose, pairs[i].seed};
    write_image(dir / e.ndct_path, pairs[i].ndct);
    write_image(dir / e.ldct_path, pairs[i].ldct);
    manifest.push_back(e);
  }
  write_file(dir / "manifest.csv", encode_manifest(manifest));
  out << "wrote " << 2 * n << " images and " << (dir / "manifest.csv").string() << "\n";
  return kOk;
}

struct TrainFlags {
  std::string data, val, out, preset = "desk", config;
  std::size_t epochs = 40, lr_step = 30;
  double lr = -1.0;  // preset default when negative
  std::uint64_t seed = 0;
  std::vector<std::string> ablate;
  bool resume = false;
};

inline int cmd_train(const json& cfg, const std::map<std::string, CLI::Option*>& o, TrainFlags f,
                     std::ostream& out) {
  merge(cfg, o.at("data"), "data", f.data);
  merge(cfg, o.at("val"), "val", f.val);
  merge(cfg, o.at("out"), "out", f.out);
  merge(cfg, o.at("preset"), "preset", f.preset);
  merge(cfg, o.at("epochs"), "epochs", f.epochs);
  merge(cfg, o.at("lr"), "lr", f.lr);
  merge(cfg, o.at("lr-step"), "lr_step", f.lr_step);
  merge(cfg, o.at("seed"), "seed", f.seed);
  merge(cfg, o.at("ablate"), "ablate", f.ablate);
  if (f.data.empty()) throw UsageError("train needs a training manifest (--data)");
  ModelConfig model_cfg = preset_config(f.preset);
  if (f.lr < 0.0) f.lr = f.preset == "desk" ? 1e-3 : 1e-4;
  if (!(f.lr > 0.0)) throw ConfigError("--lr must be > 0");
  if (cfg.contains("model")) {
    try {
      from_json(cfg.at("model"), model_cfg);
    } catch (const json::exception& e) {
      throw ConfigError(std::string("config key 'model': ") + e.what());
    }
  }
  if (o.at("ablate")->count() > 0 || cfg.contains("ablate")) model_cfg.ablation = parse_ablations(f.ablate);
  model_cfg.seed = f.seed;
  model_cfg.validate();

  const fs::path dir(f.out);
  prepare_dir(dir);
  json resolved = {{"command", "train"}, {"data", f.data},     {"val", f.val},
                   {"out", f.out},       {"preset", f.preset}, {"epochs", f.epochs},
                   {"lr", f.lr},         {"lr_step", f.lr_step}, {"seed", f.seed},
                   {"resume", f.resume}, {"model", model_cfg}};
  echo_config(dir, resolved);

  const auto train_pairs = to_pairs(load_manifest_pairs(f.data));
  const auto val_pairs = f.val.empty() ? std::vector<ImagePair>{} : to_pairs(load_manifest_pairs(f.val));
  if (train_pairs.empty()) throw ConfigError("training manifest " + f.data + " lists no pairs");

  TrainState state;
  DenoMambaModel model(model_cfg);
  const fs::path state_path = dir / "train_state.bin";
  const fs::path last_path = dir / "last.ckpt";
  if (f.resume && fs::exists(state_path) && fs::exists(last_path)) {
    CheckpointData last = decode_checkpoint(read_file(last_path), last_path.string());
    if (!(last.config == model_cfg))
      throw IntegrityError(last_path.string() + ": model config differs from the resolved config");
    assign_parameters(model, last.params);
    state = decode_train_state(read_file(state_path), state_path.string());
    out << "resuming after epoch " << state.epochs_done << "\n";
  } else if (f.resume) {
    out << "no saved state in " << dir.string() << ", starting fresh\n";
  }
  for (const auto& p : train_pairs) model.check_input(p.ldct.shape());
  for (const auto& p : val_pairs) model.check_input(p.ldct.shape());

  TrainOptions opts;
  opts.epochs = f.epochs;
  opts.base_lr = f.lr;
  opts.lr_step = f.lr_step;
  opts.seed = f.seed;
  train(model, train_pairs, val_pairs, opts, state, [&](const TrainState& s, DenoMambaModel& m) {
    const EpochRecord& r = s.history.records.back();
    out << "epoch " << r.epoch << " lr " << format_real(r.lr) << " train_l1 " << r.train_l1
        << " val_psnr " << r.val_psnr_mean << "\n";
    write_file(dir / "history.csv", encode_history_csv(s.history));
    save_checkpoint(last_path, m);
    write_file(state_path, encode_train_state(s));
  });
  write_file(dir / "history.csv", encode_history_csv(state.history));
  save_checkpoint(dir / "final.ckpt", model);
  write_file(dir / "best.ckpt", encode_checkpoint(model.config(), state.best_params));
  out << "best epoch " << state.best_epoch << ", checkpoints in " << dir.string() << "\n";
  return kOk;
}

inline int cmd_ablate(const json& cfg, const std::map<std::string, CLI::Option*>& o, TrainFlags f,
                      std::ostream& out) {
  merge(cfg, o.at("data"), "data", f.data);
  merge(cfg, o.at("val"), "val", f.val);
  merge(cfg, o.at("out"), "out", f.out);
  merge(cfg, o.at("preset"), "preset", f.preset);
  merge(cfg, o.at("epochs"), "epochs", f.epochs);
  merge(cfg, o.at("lr"), "lr", f.lr);
  merge(cfg, o.at("lr-step"), "lr_step", f.lr_step);
  merge(cfg, o.at("seed"), "seed", f.seed);
  if (f.data.empty() || f.val.empty()) throw UsageError("ablate needs --data and --val manifests");
  ModelConfig model_cfg = preset_config(f.preset);
  if (f.lr < 0.0) f.lr = f.preset == "desk" ? 1e-3 : 1e-4;
  if (!(f.lr > 0.0)) throw ConfigError("--lr must be > 0");
  if (cfg.contains("model")) {
    try {
      from_json(cfg.at("model"), model_cfg);
    } catch (const json::exception& e) {
      throw ConfigError(std::string("config key 'model': ") + e.what());
    }
  }
  model_cfg.seed = f.seed;
  model_cfg.validate();
  const fs::path dir(f.out);
  prepare_dir(dir);
  echo_config(dir, {{"command", "ablate"}, {"data", f.data},     {"val", f.val},
                    {"out", f.out},        {"preset", f.preset}, {"epochs", f.epochs},
                    {"lr", f.lr},          {"lr_step", f.lr_step}, {"seed", f.seed},
                    {"model", model_cfg}});
  const auto train_pairs = to_pairs(load_manifest_pairs(f.data));
  const auto val_pairs = to_pairs(load_manifest_pairs(f.val));
  TrainOptions opts;
  opts.epochs = f.epochs;
  opts.base_lr = f.lr;
  opts.lr_step = f.lr_step;
  opts.seed = f.seed;
  const auto rows = ablation_sweep(model_cfg, train_pairs, val_pairs, opts, [&](const AblationOutcome& r) {
    out << std::left << std::setw(12) << r.name << " params " << r.params << " best val psnr "
        << r.best_val_psnr << "\n";
  });
  write_file(dir / "ablation.csv", encode_ablation_csv(rows));
  return kOk;
}

inline int cmd_denoise(const std::string& checkpoint, const std::string& input, const std::string& out_dir,
                       bool montage_flag, std::string format, std::ostream& out) {
  if (checkpoint.empty() || input.empty()) throw UsageError("denoise needs --checkpoint and --input");
  DenoMambaModel model = load_checkpoint(checkpoint);
  const fs::path dir(out_dir);
  prepare_dir(dir);
  struct Job {
    fs::path ldct;
    fs::path ndct;  // empty when unknown
  };
  std::vector<Job> jobs;
  const fs::path in(input);
  if (in.extension() == ".csv") {
    for (const auto& e : decode_manifest(read_file(in), in.string()))
      jobs.push_back({in.parent_path() / e.ldct_path, in.parent_path() / e.ndct_path});
  } else if (fs::is_directory(in)) {
    for (const auto& p : list_images(in)) jobs.push_back({p, {}});
  } else {
    jobs.push_back({in, {}});
  }
  for (const Job& job : jobs) {
    const FeatureMap x = read_image(job.ldct);
    const FeatureMap y = denoise(model, x);
    const std::string ext = format.empty() ? job.ldct.extension().string()
                                           : std::string(image_extension(parse_image_format(format)));
    write_image(dir / (job.ldct.stem().string() + ext), y);
    if (montage_flag) {
      std::vector<FeatureMap> panels{x, y};
      if (!job.ndct.empty()) panels.push_back(read_image(job.ndct));
      write_image(dir / "montage" / (job.ldct.stem().string() + ".pgm"), montage(panels));
    }
  }
  out << "denoised " << jobs.size() << " image(s) into " << dir.string() << "\n";
  return kOk;
}

inline int cmd_eval(const std::string& pred, const std::string& ref, const std::string& report_path,
                    const std::string& compare, std::string compare_out, double data_range,
                    std::ostream& out, std::ostream& err) {
  if (pred.empty() || ref.empty()) throw UsageError("eval needs --pred and --ref directories");
  std::map<std::string, fs::path> p_files, r_files;
  for (const auto& p : list_images(pred)) p_files[p.stem().string()] = p;
  for (const auto& p : list_images(ref)) r_files[p.stem().string()] = p;
  std::vector<std::string> orphans;
  for (const auto& [k, v] : p_files)
    if (!r_files.count(k)) orphans.push_back(v.string());
  for (const auto& [k, v] : r_files)
    if (!p_files.count(k)) orphans.push_back(v.string());
  if (!orphans.empty()) {
    std::string msg = "unpaired files:";
    for (const auto& s : orphans) msg += "\n  " + s;
    throw UsageError(msg);
  }
  if (p_files.empty()) throw UsageError("no images found in " + pred);
  MetricReport rep;
  for (const auto& [k, v] : p_files) rep.add(k, read_image(v), read_image(r_files.at(k)), data_range);
  const std::string text = encode_report(rep);
  if (report_path.empty())
    out << text;
  else
    write_file(report_path, text);
  const Summary ps = rep.psnr_summary();
  out << "psnr " << ps.mean << " +- " << ps.std << ", ssim " << rep.ssim_summary().mean << ", rmse% "
      << rep.rmse_summary().mean << " over " << rep.size() << " image(s)\n";
  if (compare.empty()) return kOk;

  const auto other = decode_report(read_file(compare), compare);
  std::map<std::string, double> other_psnr;
  for (const auto& r : other) other_psnr[r.id] = r.psnr;
  std::vector<double> diffs;
  for (std::size_t i = 0; i < rep.size(); ++i) {
    auto it = other_psnr.find(rep.ids[i]);
    if (it == other_psnr.end()) throw UsageError("compare report " + compare + " lacks image " + rep.ids[i]);
    diffs.push_back(rep.psnr[i] - it->second);
  }
  if (other_psnr.size() != rep.size())
    throw UsageError("compare report " + compare + " lists images missing from this evaluation");
  const WilcoxonResult w = wilcoxon_signed_rank(diffs);
  if (w.degenerate) err << "warning: every per-image PSNR difference is zero; p set to 1\n";
  if (compare_out.empty()) {
    const fs::path base = report_path.empty() ? fs::path("report.csv") : fs::path(report_path);
    compare_out = (base.parent_path() / (base.stem().string() + "_compare.csv")).string();
  }
  write_file(compare_out, "metric,n,w_plus,w_minus,statistic,p_two_sided,method,degenerate\npsnr," +
                              std::to_string(w.n) + "," + format_real(w.w_plus) + "," +
                              format_real(w.w_minus) + "," + format_real(w.statistic) + "," +
                              format_real(w.p_two_sided) + "," + (w.exact ? "exact" : "normal") + "," +
                              (w.degenerate ? "1" : "0") + "\n");
  out << "wilcoxon W " << w.statistic << " p " << w.p_two_sided << " (n " << w.n << ")\n";
  return kOk;
}

inline int cmd_gradcheck(const GradcheckOptions& opt, std::ostream& out) {
  const auto results = run_gradcheck_suite(opt);
  bool ok = true;
  out << std::left << std::setw(9) << "module" << std::setw(30) << "check" << std::setw(8) << "coords"
      << std::setw(14) << "max_rel_err" << std::setw(9) << "skipped" << "status\n";
  for (const auto& r : results) {
    out << std::setw(9) << r.group << std::setw(30) << r.name << std::setw(8) << r.coordinates
        << std::setw(14) << std::scientific << std::setprecision(3) << r.max_rel_error
        << std::defaultfloat << std::setw(9) << r.non_smooth
        << (r.passed ? "pass" : "FAIL (" + r.worst_tensor + ")") << "\n";
    ok = ok && r.passed;
  }
  out << (ok ? "all checks within " : "checks exceed ") << opt.tolerance << "\n";
  return ok ? kOk : kVerificationFailed;
}

inline int cmd_info(const std::string& preset, const std::string& config_path, std::ostream& out) {
  ModelConfig cfg = preset_config(preset);
  const json file = load_config(config_path);
  if (file.contains("model")) from_json(file.at("model"), cfg);
  cfg.validate();
  DenoMambaModel model(cfg);
  auto list = [](const std::vector<std::size_t>& v) {
    std::string s;
    for (std::size_t i = 0; i < v.size(); ++i) s += (i ? "," : "") + std::to_string(v[i]);
    return "[" + s + "]";
  };
  out << "stages " << cfg.stages << "\nencoder widths " << list(cfg.enc_widths) << "\ndecoder widths "
      << list(cfg.dec_widths) << "\nencoder blocks " << list(cfg.enc_blocks) << "\ndecoder blocks "
      << list(cfg.dec_blocks) << "\nstate size " << cfg.state_size << "\nexpansion " << cfg.expansion
      << "\ninput divisor " << cfg.required_divisor() << "\nparameters " << model.param_count() << "\n";
  return kOk;
}

}  // namespace detail

/// Parses `args` (without the program name) and runs the command.
inline int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  CLI::App app{"Low-dose CT denoising with fused state-space blocks", "denomamba"};
  app.require_subcommand(1);
  std::string config_path;
  std::map<std::string, CLI::Option*> o;

  // simulate-ldct
  auto* sim = app.add_subcommand("simulate-ldct", "Write synthetic NDCT/LDCT pairs and a manifest");
  std::size_t sim_n = 32, sim_size = 32;
  double sim_dose = 0.25, sim_photons = 1e4, sim_sigma = 0.01;
  std::uint64_t sim_seed = 0;
  std::string sim_format = "dnim", sim_out;
  std::map<std::string, CLI::Option*> so;
  so["n"] = sim->add_option("--n", sim_n, "Number of pairs");
  so["size"] = sim->add_option("--size", sim_size, "Image height and width");
  so["dose"] = sim->add_option("--dose", sim_dose, "Dose fraction in (0, 1]");
  so["seed"] = sim->add_option("--seed", sim_seed, "Base seed; pair i uses seed + i");
  so["photons"] = sim->add_option("--photons", sim_photons, "Full-dose photon budget");
  so["electronic-noise"] = sim->add_option("--electronic-noise", sim_sigma, "Full-dose electronic noise std");
  so["format"] = sim->add_option("--format", sim_format, "dnim or pgm");
  so["out"] = sim->add_option("--out", sim_out, "Output directory");
  sim->add_option("--config", config_path, "JSON config file");

  // train
  auto* tr = app.add_subcommand("train", "Train a model on a manifest");
  detail::TrainFlags tf;
  std::map<std::string, CLI::Option*> to;
  to["data"] = tr->add_option("--data", tf.data, "Training manifest");
  to["val"] = tr->add_option("--val", tf.val, "Validation manifest");
  to["out"] = tr->add_option("--out", tf.out, "Output directory");
  to["preset"] = tr->add_option("--preset", tf.preset, "desk or paper");
  to["epochs"] = tr->add_option("--epochs", tf.epochs, "Epochs");
  to["lr"] = tr->add_option("--lr", tf.lr, "Base learning rate (desk 1e-3, paper 1e-4)");
  to["lr-step"] = tr->add_option("--lr-step", tf.lr_step, "Epochs between learning-rate halvings");
  to["seed"] = tr->add_option("--seed", tf.seed, "Initialization and shuffle seed");
  to["ablate"] = tr->add_option("--ablate", tf.ablate, "no-spa-ssm, no-cha-ssm, no-gcn, no-cfm, no-iden")
                     ->delimiter(',');
  tr->add_flag("--resume", tf.resume, "Continue from the state saved in --out");
  tr->add_option("--config", config_path, "JSON config file");

  // ablate
  auto* ab = app.add_subcommand("ablate", "Train the full model and each single-module removal");
  detail::TrainFlags af;
  std::map<std::string, CLI::Option*> ao;
  ao["data"] = ab->add_option("--data", af.data, "Training manifest");
  ao["val"] = ab->add_option("--val", af.val, "Validation manifest");
  ao["out"] = ab->add_option("--out", af.out, "Output directory");
  ao["preset"] = ab->add_option("--preset", af.preset, "desk or paper");
  ao["epochs"] = ab->add_option("--epochs", af.epochs, "Epochs per variant");
  ao["lr"] = ab->add_option("--lr", af.lr, "Base learning rate");
  ao["lr-step"] = ab->add_option("--lr-step", af.lr_step, "Epochs between learning-rate halvings");
  ao["seed"] = ab->add_option("--seed", af.seed, "Initialization and shuffle seed");
  ab->add_option("--config", config_path, "JSON config file");

  // denoise
  auto* dn = app.add_subcommand("denoise", "Denoise an image, a directory or a manifest");
  std::string dn_ckpt, dn_input, dn_out, dn_format;
  bool dn_montage = false;
  dn->add_option("--checkpoint", dn_ckpt, "Model checkpoint")->required();
  dn->add_option("--input", dn_input, "Image file, directory or manifest.csv")->required();
  dn->add_option("--out", dn_out, "Output directory")->required();
  dn->add_option("--format", dn_format, "Output format (default: same as input)");
  dn->add_flag("--montage", dn_montage, "Also write LDCT | denoised | NDCT side-by-sides");

  // eval
  auto* ev = app.add_subcommand("eval", "Score a set of images against references");
  std::string ev_pred, ev_ref, ev_out, ev_compare, ev_compare_out;
  double ev_range = 1.0;
  ev->add_option("--pred", ev_pred, "Directory of estimates")->required();
  ev->add_option("--ref", ev_ref, "Directory of references")->required();
  ev->add_option("--out", ev_out, "Report CSV (stdout when omitted)");
  ev->add_option("--compare", ev_compare, "Another report CSV for a paired Wilcoxon test on PSNR");
  ev->add_option("--compare-out", ev_compare_out, "Where to write the comparison CSV");
  ev->add_option("--data-range", ev_range, "Intensity range");

  // gradcheck
  auto* gc = app.add_subcommand("gradcheck", "Compare backward passes with finite differences");
  GradcheckOptions gopt;
  gc->add_option("--module", gopt.module, "all, ops, ssm, spatial, channel, cfm, block or network");
  gc->add_option("--seed", gopt.seed, "Seed for the random inputs");
  gc->add_option("--tolerance", gopt.tolerance, "Relative error threshold");
  gc->add_flag("--corrupt-backward", gopt.corrupt_backward, "Test hook: perturb every backward pass");

  // info
  auto* info = app.add_subcommand("info", "Print the resolved model layout and parameter count");
  std::string info_preset = "desk";
  info->add_option("--preset", info_preset, "desk or paper");
  info->add_option("--config", config_path, "JSON config file");

  try {
    std::vector<std::string> reversed(args.rbegin(), args.rend());
    app.parse(reversed);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e, out, err);
    return code == 0 ? kOk : kUsage;
  }

  try {
    if (*sim) {
      return detail::cmd_simulate(detail::load_config(config_path), so, sim_n, sim_size, sim_dose, sim_seed,
                                  sim_photons, sim_sigma, sim_format, sim_out, out);
    }
    if (*tr) {
      tf.config = config_path;
      return detail::cmd_train(detail::load_config(config_path), to, tf, out);
    }
    if (*ab) return detail::cmd_ablate(detail::load_config(config_path), ao, af, out);
    if (*dn) return detail::cmd_denoise(dn_ckpt, dn_input, dn_out, dn_montage, dn_format, out);
    if (*ev) return detail::cmd_eval(ev_pred, ev_ref, ev_out, ev_compare, ev_compare_out, ev_range, out, err);
    if (*gc) return detail::cmd_gradcheck(gopt, out);
    if (*info) return detail::cmd_info(info_preset, config_path, out);
  } catch (const IntegrityError& e) {
    err << "error: " << e.what() << "\n";
    return kIntegrity;
  } catch (const NumericError& e) {
    err << "error: " << e.what() << "\n";
    return kVerificationFailed;
  } catch (const Error& e) {
    err << "error: " << e.what() << "\n";
    return kUsage;
  } catch (const fs::filesystem_error& e) {
    err << "error: " << e.what() << "\n";
    return kUsage;
  }
  return kUsage;
}

inline int main(int argc, char** argv) {
  std::vector<std::string> args(argv + 1, argv + argc);
  return run(args, std::cout, std::cerr);
}

}  // namespace denomamba::cli
