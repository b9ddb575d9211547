#pragma once

// l1 training with Adam, a stepped learning-rate schedule and
// best-validation snapshots.

#include <chrono>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <limits>
#include <numeric>
#include <string>
#include <vector>

#include "denomamba/checkpoint.hpp"
#include "denomamba/data_sim.hpp"
#include "denomamba/errors.hpp"
#include "denomamba/metrics.hpp"
#include "denomamba/network.hpp"
#include "denomamba/ops.hpp"
#include "denomamba/tape.hpp"

namespace denomamba {

/// Mean absolute difference, recorded on the prediction's tape.
inline FeatureMap l1_loss(const FeatureMap& pred, const FeatureMap& target) {
  require_same_shape(pred, target, "l1_loss");
  if (pred.empty()) throw ShapeError("l1_loss: empty maps");
  auto p = pred.data();
  auto t = target.data();
  const double inv_n = 1.0 / static_cast<double>(p.size());
  double acc = 0.0;
  for (std::size_t i = 0; i < p.size(); ++i) acc += std::abs(p[i] - t[i]);
  FeatureMap out(Shape{1, 1, 1, 1}, acc * inv_n);
  Tape* tape = common_tape({&pred, &target});
  return detail::finish(tape, std::move(out), [pred, target, inv_n](Tape& tp, std::span<const double> g) {
    auto p = pred.data();
    auto t = target.data();
    auto gp = tp.grad_of(pred);
    auto gt = tp.grad_of(target);
    for (std::size_t i = 0; i < p.size(); ++i) {
      const double d = p[i] - t[i];
      const double s = d > 0.0 ? 1.0 : (d < 0.0 ? -1.0 : 0.0);
      if (!gp.empty()) gp[i] += g[0] * s * inv_n;
      if (!gt.empty()) gt[i] -= g[0] * s * inv_n;
    }
  });
}

/// base_lr * 0.5^floor(epoch / step).
inline double lr_schedule(std::size_t epoch, double base_lr, std::size_t step = 30) {
  if (step == 0) throw ConfigError("lr_schedule: step must be >= 1");
  return base_lr * std::ldexp(1.0, -static_cast<int>(epoch / step));
}

struct AdamOptions {
  double lr = 1e-4;
  double beta1 = 0.5;
  double beta2 = 0.999;
  double eps = 1e-8;
};

struct OptimizerState {
  std::vector<std::vector<double>> first_moment;
  std::vector<std::vector<double>> second_moment;
  std::uint64_t step = 0;
  AdamOptions options;
};

/// Bias-corrected Adam over a fixed parameter list.
class Adam {
 public:
  Adam(std::vector<Parameter*> params, AdamOptions options) : params_(std::move(params)) {
    state_.options = options;
    for (Parameter* p : params_) {
      state_.first_moment.emplace_back(p->size(), 0.0);
      state_.second_moment.emplace_back(p->size(), 0.0);
    }
  }

  OptimizerState& state() { return state_; }
  const OptimizerState& state() const { return state_; }
  void set_lr(double lr) { state_.options.lr = lr; }

  /// Replaces the moments and step count; shapes must match.
  void restore(const OptimizerState& s) {
    if (s.first_moment.size() != params_.size() || s.second_moment.size() != params_.size())
      throw IntegrityError("optimizer state does not match the parameter list");
    for (std::size_t i = 0; i < params_.size(); ++i)
      if (s.first_moment[i].size() != params_[i]->size() ||
          s.second_moment[i].size() != params_[i]->size())
        throw IntegrityError("optimizer moments for " + params_[i]->name + " have the wrong size");
    state_ = s;
  }

  /// One update from the current gradient buffers. Throws NumericError
  /// naming the first parameter with a non-finite gradient, before any
  /// value is modified.
  void step() {
    for (Parameter* p : params_)
      for (double g : p->grad)
        if (!std::isfinite(g)) throw NumericError("non-finite gradient in parameter " + p->name);
    const AdamOptions& o = state_.options;
    ++state_.step;
    const double t = static_cast<double>(state_.step);
    const double c1 = 1.0 - std::pow(o.beta1, t);
    const double c2 = 1.0 - std::pow(o.beta2, t);
    for (std::size_t k = 0; k < params_.size(); ++k) {
      auto v = params_[k]->values();
      const auto& g = params_[k]->grad;
      auto& m1 = state_.first_moment[k];
      auto& m2 = state_.second_moment[k];
      for (std::size_t i = 0; i < v.size(); ++i) {
        m1[i] = o.beta1 * m1[i] + (1.0 - o.beta1) * g[i];
        m2[i] = o.beta2 * m2[i] + (1.0 - o.beta2) * g[i] * g[i];
        const double m_hat = m1[i] / c1;
        const double v_hat = m2[i] / c2;
        v[i] -= o.lr * m_hat / (std::sqrt(v_hat) + o.eps);
      }
    }
  }

 private:
  std::vector<Parameter*> params_;
  OptimizerState state_;
};

struct EpochRecord {
  std::size_t epoch = 0;
  double lr = 0.0;
  double train_l1 = 0.0;
  double val_psnr_mean = std::numeric_limits<double>::quiet_NaN();
  double val_psnr_std = std::numeric_limits<double>::quiet_NaN();
  double val_ssim_mean = std::numeric_limits<double>::quiet_NaN();
  double val_rmse_mean = std::numeric_limits<double>::quiet_NaN();
  double wall_seconds = 0.0;
};

struct TrainHistory {
  std::vector<EpochRecord> records;
  std::vector<double> step_losses;
};

struct TrainOptions {
  std::size_t epochs = 40;
  double base_lr = 1e-4;
  std::size_t lr_step = 30;
  AdamOptions adam;  // lr is overwritten by the schedule
  std::uint64_t seed = 0;
};

/// Everything needed to continue a run after the last completed epoch.
struct TrainState {
  std::size_t epochs_done = 0;
  OptimizerState optimizer;
  std::vector<double> best_params;
  double best_val_psnr = -std::numeric_limits<double>::infinity();
  std::size_t best_epoch = 0;
  TrainHistory history;
};

/// Denoised estimate: one forward pass without recording.
inline FeatureMap denoise(DenoMambaModel& model, const FeatureMap& x) { return model.forward(x, nullptr); }

inline MetricReport evaluate(DenoMambaModel& model, const std::vector<ImagePair>& pairs) {
  MetricReport report;
  for (std::size_t i = 0; i < pairs.size(); ++i)
    report.add(std::to_string(i), denoise(model, pairs[i].ldct), pairs[i].ndct);
  return report;
}

/// Fisher-Yates permutation of [0, n) from (seed, epoch).
inline std::vector<std::size_t> epoch_order(std::size_t n, std::uint64_t seed, std::size_t epoch) {
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), std::size_t{0});
  CounterRng rng(seed, 0x5348554646ULL + epoch);
  for (std::size_t i = n; i > 1; --i) std::swap(order[i - 1], order[rng.below(i)]);
  return order;
}

using EpochCallback = std::function<void(const TrainState&, DenoMambaModel&)>;

/// Trains with batch size 1 from `state` (fresh or resumed) up to
/// `options.epochs`. The model is left at the final parameters; the best
/// validation-PSNR parameters are kept in `state.best_params` (the final
/// ones when there is no validation set).
inline void train(DenoMambaModel& model, const std::vector<ImagePair>& train_pairs,
                  const std::vector<ImagePair>& val_pairs, const TrainOptions& options,
                  TrainState& state, const EpochCallback& on_epoch = {}) {
  if (options.epochs > 0 && train_pairs.empty()) throw ConfigError("train: empty training set");
  for (const auto& p : train_pairs) {
    model.check_input(p.ldct.shape());
    require_same_shape(p.ldct, p.ndct, "train pair");
  }
  Adam adam(model.parameters(), options.adam);
  if (state.epochs_done > 0) adam.restore(state.optimizer);
  if (state.best_params.empty()) state.best_params = flatten_parameters(model);
  model.zero_grad();
  for (std::size_t epoch = state.epochs_done; epoch < options.epochs; ++epoch) {
    const auto t0 = std::chrono::steady_clock::now();
    EpochRecord rec;
    rec.epoch = epoch;
    rec.lr = lr_schedule(epoch, options.base_lr, options.lr_step);
    adam.set_lr(rec.lr);
    double loss_sum = 0.0;
    const auto order = epoch_order(train_pairs.size(), options.seed, epoch);
    for (std::size_t s = 0; s < order.size(); ++s) {
      const ImagePair& pair = train_pairs[order[s]];
      Tape tape;
      const FeatureMap loss = l1_loss(model.forward(pair.ldct, &tape), pair.ndct);
      const double lv = loss.data()[0];
      if (!std::isfinite(lv))
        throw NumericError("non-finite loss at epoch " + std::to_string(epoch) + ", step " +
                           std::to_string(s));
      tape.backward(loss);
      try {
        adam.step();
      } catch (const NumericError& e) {
        throw NumericError(std::string(e.what()) + " at epoch " + std::to_string(epoch) + ", step " +
                           std::to_string(s));
      }
      model.zero_grad();
      loss_sum += lv;
      state.history.step_losses.push_back(lv);
    }
    rec.train_l1 = loss_sum / static_cast<double>(order.size());
    if (!val_pairs.empty()) {
      const MetricReport rep = evaluate(model, val_pairs);
      const Summary ps = rep.psnr_summary();
      rec.val_psnr_mean = ps.mean;
      rec.val_psnr_std = ps.std;
      rec.val_ssim_mean = rep.ssim_summary().mean;
      rec.val_rmse_mean = rep.rmse_summary().mean;
      if (ps.mean > state.best_val_psnr) {
        state.best_val_psnr = ps.mean;
        state.best_epoch = epoch;
        state.best_params = flatten_parameters(model);
      }
    } else {
      state.best_epoch = epoch;
      state.best_params = flatten_parameters(model);
    }
    rec.wall_seconds =
        std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    state.history.records.push_back(rec);
    state.epochs_done = epoch + 1;
    state.optimizer = adam.state();
    if (on_epoch) on_epoch(state, model);
  }
}

inline TrainHistory train(DenoMambaModel& model, const std::vector<ImagePair>& train_pairs,
                          const std::vector<ImagePair>& val_pairs, const TrainOptions& options) {
  TrainState state;
  train(model, train_pairs, val_pairs, options, state);
  return state.history;
}

struct AblationVariant {
  std::string name;
  AblationFlags flags;
};

/// The full model followed by the five single-module removals.
inline std::vector<AblationVariant> ablation_variants() {
  std::vector<AblationVariant> v(6);
  v[0].name = "full";
  v[1].name = "no-spa-ssm";
  v[1].flags.no_spatial_ssm = true;
  v[2].name = "no-cha-ssm";
  v[2].flags.no_channel_ssm = true;
  v[3].name = "no-cfm";
  v[3].flags.no_cfm = true;
  v[4].name = "no-gcn";
  v[4].flags.no_gcn = true;
  v[5].name = "no-iden";
  v[5].flags.no_identity = true;
  return v;
}

struct AblationOutcome {
  std::string name;
  AblationFlags flags;
  std::size_t params = 0;
  double best_val_psnr = 0.0;
  std::size_t best_epoch = 0;
};

/// Trains every variant of `base` with the same seed, data and budget.
inline std::vector<AblationOutcome> ablation_sweep(const ModelConfig& base,
                                                   const std::vector<ImagePair>& train_pairs,
                                                   const std::vector<ImagePair>& val_pairs,
                                                   const TrainOptions& options,
                                                   const std::function<void(const AblationOutcome&)>& on_variant = {}) {
  if (val_pairs.empty()) throw ConfigError("ablation_sweep: a validation set is required");
  std::vector<AblationOutcome> out;
  for (const auto& v : ablation_variants()) {
    ModelConfig cfg = base;
    cfg.ablation = v.flags;
    DenoMambaModel model(cfg);
    TrainState state;
    train(model, train_pairs, val_pairs, options, state);
    AblationOutcome o;
    o.name = v.name;
    o.flags = v.flags;
    o.params = model.param_count();
    o.best_val_psnr = state.best_val_psnr;
    o.best_epoch = state.best_epoch;
    if (on_variant) on_variant(o);
    out.push_back(std::move(o));
  }
  return out;
}

inline std::string encode_ablation_csv(const std::vector<AblationOutcome>& rows) {
  std::string out = "variant,params,best_val_psnr,best_epoch\n";
  for (const auto& r : rows)
    out += r.name + "," + std::to_string(r.params) + "," + format_real(r.best_val_psnr) + "," +
           std::to_string(r.best_epoch) + "\n";
  return out;
}

/// History CSV: epoch, lr, train_l1, val_psnr_mean, val_psnr_std,
/// val_ssim_mean, val_rmse_mean. Wall time is left out so that reruns are
/// byte-identical.
inline std::string encode_history_csv(const TrainHistory& h) {
  std::string out = "epoch,lr,train_l1,val_psnr_mean,val_psnr_std,val_ssim_mean,val_rmse_mean\n";
  for (const auto& r : h.records)
    out += std::to_string(r.epoch) + "," + format_real(r.lr) + "," + format_real(r.train_l1) + "," +
           format_real(r.val_psnr_mean) + "," + format_real(r.val_psnr_std) + "," +
           format_real(r.val_ssim_mean) + "," + format_real(r.val_rmse_mean) + "\n";
  return out;
}

// Resume file: "DNTS", version u32, JSON header length u32, header (epoch
// counters, best score, history), then f64 blocks for the optimizer moments
// and best parameters, FNV-1a 64 checksum. The current parameters travel in
// a separate model checkpoint.
inline std::string encode_train_state(const TrainState& s) {
  nlohmann::json hdr;
  hdr["epochs_done"] = s.epochs_done;
  hdr["step"] = s.optimizer.step;
  hdr["best_epoch"] = s.best_epoch;
  hdr["has_best"] = std::isfinite(s.best_val_psnr);
  hdr["best_val_psnr"] = std::isfinite(s.best_val_psnr) ? s.best_val_psnr : 0.0;
  hdr["adam"] = {s.optimizer.options.lr, s.optimizer.options.beta1, s.optimizer.options.beta2,
                 s.optimizer.options.eps};
  std::vector<std::size_t> sizes;
  for (const auto& m : s.optimizer.first_moment) sizes.push_back(m.size());
  hdr["moment_sizes"] = sizes;
  hdr["best_params"] = s.best_params.size();
  hdr["step_losses"] = s.history.step_losses.size();
  hdr["records"] = s.history.records.size();
  std::string out = "DNTS";
  detail::put_le<std::uint32_t>(out, 1);
  const std::string text = hdr.dump();
  detail::put_le<std::uint32_t>(out, static_cast<std::uint32_t>(text.size()));
  out += text;
  for (const auto& r : s.history.records) {
    detail::put_le<std::uint64_t>(out, r.epoch);
    for (double v : {r.lr, r.train_l1, r.val_psnr_mean, r.val_psnr_std, r.val_ssim_mean,
                     r.val_rmse_mean, r.wall_seconds})
      detail::put_le(out, v);
  }
  for (double v : s.history.step_losses) detail::put_le(out, v);
  for (const auto& m : s.optimizer.first_moment)
    for (double v : m) detail::put_le(out, v);
  for (const auto& m : s.optimizer.second_moment)
    for (double v : m) detail::put_le(out, v);
  for (double v : s.best_params) detail::put_le(out, v);
  detail::put_le<std::uint64_t>(out, fnv1a64(out));
  return out;
}

inline TrainState decode_train_state(const std::string& bytes, const std::string& what = "train state") {
  if (bytes.size() < 20) throw IntegrityError(what + ": truncated");
  detail::ByteReader tail(bytes.substr(bytes.size() - 8), what);
  if (tail.get<std::uint64_t>() != fnv1a64(std::string_view(bytes.data(), bytes.size() - 8)))
    throw IntegrityError(what + ": checksum mismatch");
  const std::string body = bytes.substr(0, bytes.size() - 8);
  detail::ByteReader r(body, what);
  if (r.take(4) != "DNTS") throw IntegrityError(what + ": bad magic");
  if (r.get<std::uint32_t>() != 1) throw IntegrityError(what + ": unsupported version");
  TrainState s;
  nlohmann::json hdr;
  try {
    hdr = nlohmann::json::parse(r.take(r.get<std::uint32_t>()));
    s.epochs_done = hdr.at("epochs_done").get<std::size_t>();
    s.optimizer.step = hdr.at("step").get<std::uint64_t>();
    s.best_epoch = hdr.at("best_epoch").get<std::size_t>();
    if (hdr.at("has_best").get<bool>()) s.best_val_psnr = hdr.at("best_val_psnr").get<double>();
    const auto adam = hdr.at("adam").get<std::vector<double>>();
    if (adam.size() != 4) throw IntegrityError(what + ": bad optimizer block");
    s.optimizer.options = {adam[0], adam[1], adam[2], adam[3]};
  } catch (const nlohmann::json::exception& e) {
    throw IntegrityError(what + ": bad header (" + e.what() + ")");
  }
  const auto records = hdr.at("records").get<std::size_t>();
  for (std::size_t i = 0; i < records; ++i) {
    EpochRecord rec;
    rec.epoch = r.get<std::uint64_t>();
    for (double* v : {&rec.lr, &rec.train_l1, &rec.val_psnr_mean, &rec.val_psnr_std,
                      &rec.val_ssim_mean, &rec.val_rmse_mean, &rec.wall_seconds})
      *v = r.get<double>();
    s.history.records.push_back(rec);
  }
  s.history.step_losses.resize(hdr.at("step_losses").get<std::size_t>());
  for (double& v : s.history.step_losses) v = r.get<double>();
  const auto sizes = hdr.at("moment_sizes").get<std::vector<std::size_t>>();
  for (auto* moments : {&s.optimizer.first_moment, &s.optimizer.second_moment})
    for (std::size_t n : sizes) {
      std::vector<double> m(n);
      for (double& v : m) v = r.get<double>();
      moments->push_back(std::move(m));
    }
  s.best_params.resize(hdr.at("best_params").get<std::size_t>());
  for (double& v : s.best_params) v = r.get<double>();
  if (r.remaining() != 0) throw IntegrityError(what + ": trailing bytes");
  return s;
}

}  // namespace denomamba
