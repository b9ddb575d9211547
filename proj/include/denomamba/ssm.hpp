#pragma once

// Selective state-space scans.
//
// Per feature channel d the layer runs N independent diagonal modes:
//   h[l] = exp(delta[l] * A) * h[l-1] + delta[l] * B[l] * u[l],   h[-1] = 0
//   y[l] = sum_n C[l, n] * h[l, n]
// with A = -exp(a_log) < 0 and delta = softplus(.) > 0, so every decay
// factor lies in (0, 1). delta, B and C are projected from the input.

#include <array>
#include <cmath>
#include <concepts>
#include <cstddef>
#include <memory>
#include <numeric>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "denomamba/errors.hpp"
#include "denomamba/layers.hpp"
#include "denomamba/ops.hpp"
#include "denomamba/parallel.hpp"
#include "denomamba/rng.hpp"
#include "denomamba/tape.hpp"

namespace denomamba {

struct Discretized {
  double a_bar;
  double b_bar;
};

/// Zero-order hold for the state (a_bar = exp(delta * A), A = -exp(a_log))
/// and Euler for the input path (b_bar = delta * b).
inline Discretized discretize(double a_log, double delta, double b) {
  if (!(delta > 0.0)) throw UsageError("discretize: delta must be > 0, got " + std::to_string(delta));
  return {std::exp(-delta * std::exp(a_log)), delta * b};
}

/// A single-channel linear recurrence seen through per-step accessors.
template <class R>
concept DiscreteRecurrence = requires(const R& r, std::size_t l, std::size_t n) {
  { r.length() } -> std::convertible_to<std::size_t>;
  { r.state_size() } -> std::convertible_to<std::size_t>;
  { r.decay(l, n) } -> std::convertible_to<double>;    // a_bar
  { r.drive(l, n) } -> std::convertible_to<double>;    // b_bar * s
  { r.readout(l, n) } -> std::convertible_to<double>;  // C
};

/// Step-by-step recurrence. Writes y (length L) and, when non-empty, the
/// hidden states (L x N, row-major).
template <DiscreteRecurrence R>
void scan_sequential(const R& r, std::span<double> y, std::span<double> states = {}) {
  const std::size_t len = r.length();
  const std::size_t n_state = r.state_size();
  std::vector<double> h(n_state, 0.0);
  for (std::size_t l = 0; l < len; ++l) {
    double acc = 0.0;
    for (std::size_t n = 0; n < n_state; ++n) {
      h[n] = r.decay(l, n) * h[n] + r.drive(l, n);
      acc += r.readout(l, n) * h[n];
    }
    if (!states.empty())
      for (std::size_t n = 0; n < n_state; ++n) states[l * n_state + n] = h[n];
    y[l] = acc;
  }
}

/// Chunked two-level scan. Each chunk is scanned from a zero state while
/// tracking its cumulative decay; chunk carries are then chained (the
/// associative composition of (decay, state) pairs) and folded back in.
/// Chunks are independent in the first pass.
template <DiscreteRecurrence R>
void scan_chunked(const R& r, std::span<double> y, std::span<double> states = {},
                  std::size_t chunk = 32) {
  const std::size_t len = r.length();
  const std::size_t n_state = r.state_size();
  if (len == 0) return;
  chunk = std::max<std::size_t>(1, chunk);
  const std::size_t n_chunks = (len + chunk - 1) / chunk;
  std::vector<double> local(len * n_state);
  std::vector<double> decay(len * n_state);
  for (std::size_t j = 0; j < n_chunks; ++j) {
    const std::size_t lo = j * chunk;
    const std::size_t hi = std::min(len, lo + chunk);
    for (std::size_t n = 0; n < n_state; ++n) {
      double h = 0.0;
      double p = 1.0;
      for (std::size_t l = lo; l < hi; ++l) {
        const double a = r.decay(l, n);
        h = a * h + r.drive(l, n);
        p *= a;
        local[l * n_state + n] = h;
        decay[l * n_state + n] = p;
      }
    }
  }
  std::vector<double> carry(n_chunks * n_state, 0.0);
  for (std::size_t j = 1; j < n_chunks; ++j) {
    const std::size_t end = j * chunk - 1;
    for (std::size_t n = 0; n < n_state; ++n)
      carry[j * n_state + n] =
          local[end * n_state + n] + decay[end * n_state + n] * carry[(j - 1) * n_state + n];
  }
  for (std::size_t l = 0; l < len; ++l) {
    const double* c_in = carry.data() + (l / chunk) * n_state;
    double acc = 0.0;
    for (std::size_t n = 0; n < n_state; ++n) {
      const double h = local[l * n_state + n] + decay[l * n_state + n] * c_in[n];
      if (!states.empty()) states[l * n_state + n] = h;
      acc += r.readout(l, n) * h;
    }
    y[l] = acc;
  }
}

/// Already-discretized single channel: a_bar, b_bar and C are L x N, s is L.
struct DiscretizedSequence {
  std::size_t steps = 0;
  std::size_t modes = 0;
  std::vector<double> a_bar;
  std::vector<double> b_bar;
  std::vector<double> c;
  std::vector<double> s;

  std::size_t length() const { return steps; }
  std::size_t state_size() const { return modes; }
  double decay(std::size_t l, std::size_t n) const { return a_bar[l * modes + n]; }
  double drive(std::size_t l, std::size_t n) const { return b_bar[l * modes + n] * s[l]; }
  double readout(std::size_t l, std::size_t n) const { return c[l * modes + n]; }
};

enum class ScanAlgorithm { sequential, chunked };

namespace detail {

// Channel k = (batch, feature d) of a selective scan over (B, D, 1, L) maps
// with B/C laid out as (B, N, 1, L).
struct SelectiveChannel {
  const double* u;
  const double* delta;
  const double* b;      // b[n * len + l]
  const double* c;
  const double* decays;  // exp(delta[l] * A[n]) at [l * n_state + n]
  std::size_t len;
  std::size_t n_state;

  std::size_t length() const { return len; }
  std::size_t state_size() const { return n_state; }
  double decay(std::size_t l, std::size_t n) const { return decays[l * n_state + n]; }
  double drive(std::size_t l, std::size_t n) const { return delta[l] * b[n * len + l] * u[l]; }
  double readout(std::size_t l, std::size_t n) const { return c[n * len + l]; }
};

}  // namespace detail

/// Differentiable selective scan on already-projected operands.
///   u, delta: (B, D, 1, L)   a_log: D*N values   b, c: (B, N, 1, L)
inline FeatureMap selective_scan_core(const FeatureMap& u, const FeatureMap& delta,
                                      const FeatureMap& a_log, const FeatureMap& b,
                                      const FeatureMap& c, ScanAlgorithm algorithm) {
  const Shape& us = u.shape();
  require_same_shape(u, delta, "selective_scan (u vs delta)");
  require_same_shape(b, c, "selective_scan (B vs C)");
  const std::size_t batch = us.batch;
  const std::size_t feats = us.channels;
  const std::size_t len = us.plane();
  const std::size_t n_state = b.shape().channels;
  if (b.shape().batch != batch || b.shape().plane() != len) {
    throw ShapeError("selective_scan: B/C " + b.shape().str() + " do not match sequence " + us.str());
  }
  if (a_log.numel() != feats * n_state) {
    throw ShapeError("selective_scan: a_log " + a_log.shape().str() + " must hold " +
                     std::to_string(feats) + "x" + std::to_string(n_state) + " values");
  }
  std::vector<double> a_neg(feats * n_state);
  for (std::size_t i = 0; i < a_neg.size(); ++i) a_neg[i] = -std::exp(a_log.data()[i]);

  Tape* tape = common_tape({&u, &delta, &a_log, &b, &c});
  // Hidden states and decay factors are kept for the backward pass.
  const std::size_t kept = tape != nullptr ? batch * feats * len * n_state : 0;
  auto states = std::make_shared<std::vector<double>>(kept);
  auto decays = std::make_shared<std::vector<double>>(kept);
  FeatureMap out(us);
  {
    auto y = out.mutable_data();
    auto channel = [&](std::size_t k) {
      const std::size_t bt = k / feats;
      const std::size_t d = k % feats;
      const double* a = a_neg.data() + d * n_state;
      const double* dk = delta.data().data() + k * len;
      std::vector<double> scratch;
      double* dec = nullptr;
      if (kept != 0) {
        dec = decays->data() + k * len * n_state;
      } else {
        scratch.resize(len * n_state);
        dec = scratch.data();
      }
      for (std::size_t l = 0; l < len; ++l)
        for (std::size_t n = 0; n < n_state; ++n) dec[l * n_state + n] = std::exp(dk[l] * a[n]);
      const detail::SelectiveChannel r{u.data().data() + k * len,
                                       dk,
                                       b.data().data() + bt * n_state * len,
                                       c.data().data() + bt * n_state * len,
                                       dec,
                                       len,
                                       n_state};
      std::span<double> yk = y.subspan(k * len, len);
      std::span<double> sk = states->empty()
                                 ? std::span<double>{}
                                 : std::span<double>(*states).subspan(k * len * n_state, len * n_state);
      if (algorithm == ScanAlgorithm::sequential)
        scan_sequential(r, yk, sk);
      else
        scan_chunked(r, yk, sk);
    };
    if (algorithm == ScanAlgorithm::chunked)
      parallel_for(batch * feats, channel);
    else
      for (std::size_t k = 0; k < batch * feats; ++k) channel(k);
  }

  return detail::finish(tape, std::move(out), [u, delta, a_log, b, c, states, decays, a_neg, batch,
                                               feats, len, n_state](Tape& t, std::span<const double> g) {
    auto gu = t.grad_of(u);
    auto gdelta = t.grad_of(delta);
    auto ga_log = t.grad_of(a_log);
    auto gb = t.grad_of(b);
    auto gc = t.grad_of(c);
    auto us = u.data();
    auto ds = delta.data();
    auto bs = b.data();
    auto cs = c.data();
    const auto& hs = *states;
    std::vector<double> carry(n_state);
    std::vector<double> ga(feats * n_state, 0.0);
    for (std::size_t k = 0; k < batch * feats; ++k) {
      const std::size_t bt = k / feats;
      const std::size_t d = k % feats;
      const double* a = a_neg.data() + d * n_state;
      const double* hk = hs.data() + k * len * n_state;
      const double* dec = decays->data() + k * len * n_state;
      std::fill(carry.begin(), carry.end(), 0.0);
      for (std::size_t l = len; l-- > 0;) {
        const std::size_t i = k * len + l;
        const double dl = ds[i];
        const double ul = us[i];
        const double gy = g[i];
        double g_delta = 0.0;
        double g_u = 0.0;
        for (std::size_t n = 0; n < n_state; ++n) {
          const std::size_t bc = (bt * n_state + n) * len + l;
          const double h = hk[l * n_state + n];
          const double h_prev = l > 0 ? hk[(l - 1) * n_state + n] : 0.0;
          const double gh = gy * cs[bc] + carry[n];
          const double decay = dec[l * n_state + n];
          const double g_decay = gh * h_prev;
          g_delta += g_decay * decay * a[n] + gh * bs[bc] * ul;
          ga[d * n_state + n] += g_decay * decay * dl;
          g_u += gh * dl * bs[bc];
          if (!gb.empty()) gb[bc] += gh * dl * ul;
          if (!gc.empty()) gc[bc] += gy * h;
          carry[n] = gh * decay;
        }
        if (!gdelta.empty()) gdelta[i] += g_delta;
        if (!gu.empty()) gu[i] += g_u;
      }
    }
    if (!ga_log.empty())
      for (std::size_t i = 0; i < ga.size(); ++i) ga_log[i] += ga[i] * a_neg[i];
  });
}

/// Learnable state-space parameters for `channels` features with
/// `state_size` diagonal modes per feature. delta comes from a low-rank
/// projection followed by a biased linear map and softplus.
struct SsmLayerParams {
  std::size_t channels = 0;
  std::size_t state_size = 0;
  std::size_t rank = 0;
  Parameter a_log;       // (channels, state_size)
  LinearLayer x_proj;    // channels -> rank + 2 * state_size, no bias
  LinearLayer dt_proj;   // rank -> channels, with bias

  SsmLayerParams() = default;
  SsmLayerParams(const std::string& name, std::size_t channel_count, std::size_t n_state,
                 CounterRng& rng)
      : channels(channel_count),
        state_size(n_state),
        rank(std::max<std::size_t>(1, (channel_count + 15) / 16)),
        a_log(name + ".a_log", Shape{channel_count, n_state, 1, 1}),
        x_proj(name + ".x_proj", channel_count, rank + 2 * n_state, rng, false),
        dt_proj(name + ".dt_proj", rank, channel_count, rng) {
    // A = -(n + 1) per mode; delta initially log-uniform in [1e-3, 1e-1].
    auto al = a_log.values();
    for (std::size_t d = 0; d < channels; ++d)
      for (std::size_t n = 0; n < state_size; ++n)
        al[d * state_size + n] = std::log(static_cast<double>(n + 1));
    for (double& v : dt_proj.bias.values()) {
      const double dt = std::exp(rng.uniform(std::log(1e-3), std::log(1e-1)));
      v = dt + std::log(-std::expm1(-dt));  // softplus^-1(dt)
    }
  }

  template <class F>
  void for_each_parameter(F&& f) {
    f(a_log);
    x_proj.for_each_parameter(f);
    dt_proj.for_each_parameter(f);
  }
};

enum class ScanOrigin {
  row_major,
  column_major,
  row_major_reversed,
  column_major_reversed,
  channel,
  plain,
};

/// Sequence of `length` steps with `features` values per step, stored as a
/// (batch, features, 1, length) map.
struct ScanSequence {
  FeatureMap values;
  ScanOrigin origin = ScanOrigin::plain;

  std::size_t batch() const { return values.shape().batch; }
  std::size_t features() const { return values.shape().channels; }
  std::size_t length() const { return values.shape().width; }
};

/// Projects delta, B, C from the sequence and runs the scan.
inline ScanSequence selective_scan(const ScanSequence& seq, SsmLayerParams& params, Tape* tape,
                                   ScanAlgorithm algorithm = ScanAlgorithm::chunked) {
  const FeatureMap& u = seq.values;
  if (u.shape().channels != params.channels || u.shape().height != 1) {
    throw ShapeError("selective_scan: sequence " + u.shape().str() + " does not match " +
                     std::to_string(params.channels) + "-feature SSM parameters");
  }
  const std::size_t r = params.rank;
  const std::size_t n = params.state_size;
  const FeatureMap proj = params.x_proj.forward(u, tape);
  const FeatureMap dt_low = slice_channels(proj, 0, r);
  const FeatureMap b = slice_channels(proj, r, n);
  const FeatureMap c = slice_channels(proj, r + n, n);
  const FeatureMap delta = softplus(params.dt_proj.forward(dt_low, tape));
  return {selective_scan_core(u, delta, use(tape, params.a_log), b, c, algorithm), seq.origin};
}

/// Reference step-by-step evaluation of the same layer.
inline ScanSequence selective_scan_sequential(const ScanSequence& seq, SsmLayerParams& params,
                                              Tape* tape) {
  return selective_scan(seq, params, tape, ScanAlgorithm::sequential);
}

namespace detail {

inline std::shared_ptr<const std::vector<std::size_t>> traversal(std::size_t h, std::size_t w,
                                                                 ScanOrigin origin) {
  auto idx = std::make_shared<std::vector<std::size_t>>(h * w);
  auto& v = *idx;
  std::size_t k = 0;
  if (origin == ScanOrigin::row_major || origin == ScanOrigin::row_major_reversed) {
    for (std::size_t i = 0; i < h; ++i)
      for (std::size_t j = 0; j < w; ++j) v[k++] = i * w + j;
  } else {
    for (std::size_t j = 0; j < w; ++j)
      for (std::size_t i = 0; i < h; ++i) v[k++] = i * w + j;
  }
  if (origin == ScanOrigin::row_major_reversed || origin == ScanOrigin::column_major_reversed)
    std::reverse(v.begin(), v.end());
  return idx;
}

inline std::shared_ptr<const std::vector<std::size_t>> inverse(const std::vector<std::size_t>& perm) {
  auto inv = std::make_shared<std::vector<std::size_t>>(perm.size());
  for (std::size_t i = 0; i < perm.size(); ++i) (*inv)[perm[i]] = i;
  return inv;
}

}  // namespace detail

inline constexpr std::array<ScanOrigin, 4> kCrossScanOrder = {
    ScanOrigin::row_major, ScanOrigin::column_major, ScanOrigin::row_major_reversed,
    ScanOrigin::column_major_reversed};

/// Four traversals of every channel plane: row-major, column-major and
/// their reversals.
inline std::array<ScanSequence, 4> cross_scan_2d(const FeatureMap& map) {
  const Shape& s = map.shape();
  if (s.plane() == 0) throw ShapeError("cross_scan_2d: empty spatial plane " + s.str());
  std::array<ScanSequence, 4> out;
  for (std::size_t k = 0; k < 4; ++k) {
    out[k] = {gather_plane(map, detail::traversal(s.height, s.width, kCrossScanOrder[k]), 1,
                           s.plane()),
              kCrossScanOrder[k]};
  }
  return out;
}

/// Undoes each traversal and sums the four maps.
inline FeatureMap cross_merge_2d(const std::array<ScanSequence, 4>& seqs, Shape shape) {
  FeatureMap total;
  for (const auto& seq : seqs) {
    const Shape& ss = seq.values.shape();
    if (ss.batch != shape.batch || ss.channels != shape.channels || ss.height != 1 ||
        ss.width != shape.plane()) {
      throw ShapeError("cross_merge_2d: sequence " + ss.str() + " inconsistent with map " +
                       shape.str());
    }
    const auto perm = detail::traversal(shape.height, shape.width, seq.origin);
    FeatureMap part = gather_plane(seq.values, detail::inverse(*perm), shape.height, shape.width);
    total = total.empty() ? part : add(total, part);
  }
  return total;
}

/// Channel index becomes the sequence axis; the flattened plane becomes the
/// feature axis: (B, C, H, W) -> (B, H*W, 1, C).
inline ScanSequence channel_scan(const FeatureMap& map) {
  return {transpose_channels_plane(map), ScanOrigin::channel};
}

inline FeatureMap channel_unscan(const ScanSequence& seq, Shape shape) {
  const Shape& ss = seq.values.shape();
  if (ss.batch != shape.batch || ss.channels != shape.plane() || ss.height != 1 ||
      ss.width != shape.channels) {
    throw ShapeError("channel_unscan: sequence " + ss.str() + " inconsistent with map " +
                     shape.str());
  }
  // (B, P, 1, C) viewed as (B, P, C, 1) transposes back to (B, C, P, 1).
  const FeatureMap swapped =
      transpose_channels_plane(reshape(seq.values, Shape{ss.batch, ss.channels, ss.width, 1}));
  return reshape(swapped, shape);
}

/// Runs a single-feature SSM along every column of a channel sequence. The
/// parameters are shared by all spatial positions, which keeps the layer
/// independent of the image size. With `bidirectional`, a reversed pass is
/// added to the forward one.
inline ScanSequence channel_selective_scan(const ScanSequence& seq, SsmLayerParams& params,
                                           Tape* tape, bool bidirectional,
                                           ScanAlgorithm algorithm = ScanAlgorithm::chunked) {
  if (params.channels != 1) {
    throw ConfigError("channel_selective_scan: expects single-feature SSM parameters, got " +
                      std::to_string(params.channels));
  }
  const Shape& ss = seq.values.shape();
  const Shape columns{ss.batch * ss.channels, 1, 1, ss.width};
  ScanSequence flat{reshape(seq.values, columns), seq.origin};
  FeatureMap y = selective_scan(flat, params, tape, algorithm).values;
  if (bidirectional) {
    auto rev = std::make_shared<std::vector<std::size_t>>(ss.width);
    std::iota(rev->rbegin(), rev->rend(), std::size_t{0});
    ScanSequence flipped{gather_plane(flat.values, rev, 1, ss.width), seq.origin};
    FeatureMap back = selective_scan(flipped, params, tape, algorithm).values;
    y = add(y, gather_plane(back, rev, 1, ss.width));
  }
  return {reshape(y, ss), seq.origin};
}

}  // namespace denomamba
