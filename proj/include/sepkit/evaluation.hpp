// Copyright 2026 The Sepkit Authors
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//     http://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
// See the License for the specific language governing permissions and
// limitations under the License.

#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <map>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include <Eigen/Dense>

#include "sepkit/codec.hpp"
#include "sepkit/config.hpp"
#include "sepkit/errors.hpp"
#include "sepkit/objectives.hpp"
#include "sepkit/params.hpp"
#include "sepkit/separator.hpp"
#include "sepkit/tensor.hpp"

namespace sepkit::evaluation {

// ---------------------------------------------------------------------------
// Separation quality metrics.
// ---------------------------------------------------------------------------

struct SeparationMetrics {
  double si_snri = 0;
  double sdri = 0;
  // Per-speaker SI-SNR improvement under the chosen assignment.
  std::vector<double> per_speaker;
  // permutation[j] is the estimate index assigned to reference j.
  std::vector<int> permutation;
  // At least one distortion-filter solve needed ridge regularization.
  bool sdr_regularized = false;

  std::string to_kv() const {
    std::ostringstream os;
    os.precision(10);
    os << "si_snri=" << si_snri << "\n";
    os << "sdri=" << sdri << "\n";
    os << "sdr_regularized=" << (sdr_regularized ? 1 : 0) << "\n";
    for (std::size_t j = 0; j < per_speaker.size(); ++j) {
      os << "si_snri_spk" << j << "=" << per_speaker[j] << "\n";
    }
    for (std::size_t j = 0; j < permutation.size(); ++j) {
      os << "perm" << j << "=" << permutation[j] << "\n";
    }
    return os.str();
  }
};

namespace detail {

inline void check_lengths(const std::vector<double>& mixture,
                          const std::vector<std::vector<double>>& refs,
                          const std::vector<std::vector<double>>& ests) {
  if (refs.empty() || refs.size() != ests.size()) {
    throw ShapeError("metrics: need equally many references and estimates");
  }
  for (const auto& w : refs) {
    if (w.size() != mixture.size()) throw ShapeError("metrics: reference length mismatch");
  }
  for (const auto& w : ests) {
    if (w.size() != mixture.size()) throw ShapeError("metrics: estimate length mismatch");
  }
  if (mixture.empty()) throw ShapeError("metrics: empty signals");
}

// Best assignment maximizing the sum of table[j][perm[j]]; ties keep the
// lexicographically smallest permutation, matching the training-side rule.
inline std::vector<int> best_assignment(const std::vector<std::vector<double>>& table) {
  const auto perms = objectives::detail::all_permutations(static_cast<int>(table.size()));
  std::vector<int> best = perms[0];
  double best_sum = -std::numeric_limits<double>::infinity();
  for (const auto& p : perms) {
    double s = 0;
    for (std::size_t j = 0; j < p.size(); ++j) s += table[j][static_cast<std::size_t>(p[j])];
    if (s > best_sum) {
      best_sum = s;
      best = p;
    }
  }
  return best;
}

}  // namespace detail

// Best-permutation SI-SNR improvement over the unprocessed mixture. The
// mixture baseline and the separated score are averaged over speakers under
// the same assignment, so copying the mixture into every estimate scores
// exactly zero.
inline SeparationMetrics si_snri(const std::vector<double>& mixture,
                                 const std::vector<std::vector<double>>& refs,
                                 const std::vector<std::vector<double>>& ests, double tau = 30.0,
                                 double eps = 1e-8) {
  detail::check_lengths(mixture, refs, ests);
  const std::size_t J = refs.size();
  std::vector<std::vector<double>> table(J, std::vector<double>(J));
  for (std::size_t j = 0; j < J; ++j) {
    for (std::size_t k = 0; k < J; ++k) {
      table[j][k] = objectives::si_snr_value(refs[j], ests[k], tau, eps);
    }
  }
  SeparationMetrics m;
  m.permutation = detail::best_assignment(table);
  m.per_speaker.resize(J);
  double total = 0;
  for (std::size_t j = 0; j < J; ++j) {
    const double base = objectives::si_snr_value(refs[j], mixture, tau, eps);
    m.per_speaker[j] = table[j][static_cast<std::size_t>(m.permutation[j])] - base;
    total += m.per_speaker[j];
  }
  m.si_snri = total / static_cast<double>(J);
  return m;
}

// ---------------------------------------------------------------------------
// SDR with a least-squares time-invariant distortion filter.
// ---------------------------------------------------------------------------

namespace detail {

// SDR of `est` against `ref`, allowing the target to be any filtering of the
// reference by up to filter_len causal taps. The filter solves the Toeplitz
// normal equations; a rank-deficient system (common for narrowband signals)
// is retried with a small ridge and flagged.
inline double sdr_filtered(const std::vector<double>& ref, const std::vector<double>& est,
                           std::int64_t filter_len, double ridge, bool* regularized) {
  const std::int64_t n = static_cast<std::int64_t>(ref.size());
  if (n != static_cast<std::int64_t>(est.size())) throw ShapeError("sdr: length mismatch");
  if (n < filter_len) throw ShapeError("sdr: signal shorter than the distortion filter");
  if (filter_len < 1) throw ConfigError("sdr: filter_len must be >= 1");

  // Exact normal equations for the design matrix X(i, k) = ref[i - k]
  // (zero for i < k): full correlation lags seed each diagonal and a
  // rank-one downdate walks it, so A = X^T X without Toeplitz edge error.
  Eigen::VectorXd ac = Eigen::VectorXd::Zero(filter_len);
  Eigen::VectorXd b = Eigen::VectorXd::Zero(filter_len);
  for (std::int64_t d = 0; d < filter_len; ++d) {
    double s = 0;
    for (std::int64_t i = 0; i + d < n; ++i) s += ref[static_cast<std::size_t>(i)] * ref[static_cast<std::size_t>(i + d)];
    ac[d] = s;
    double c = 0;
    for (std::int64_t i = 0; i + d < n; ++i) c += ref[static_cast<std::size_t>(i)] * est[static_cast<std::size_t>(i + d)];
    b[d] = c;
  }
  if (ac[0] == 0) throw NumericError("sdr: reference is identically zero");

  Eigen::MatrixXd A(filter_len, filter_len);
  for (std::int64_t d = 0; d < filter_len; ++d) {
    double g = ac[d];
    A(d, 0) = g;
    A(0, d) = g;
    for (std::int64_t j = 1; d + j < filter_len; ++j) {
      g -= ref[static_cast<std::size_t>(n - d - j)] * ref[static_cast<std::size_t>(n - j)];
      A(d + j, j) = g;
      A(j, d + j) = g;
    }
  }

  Eigen::VectorXd h = A.ldlt().solve(b);
  const double relres = (A * h - b).norm() / std::max(b.norm(), 1e-300);
  if (!h.allFinite() || relres > 1e-6) {
    Eigen::MatrixXd Ar = A;
    Ar.diagonal().array() += ridge * ac[0];
    h = Ar.ldlt().solve(b);
    if (regularized) *regularized = true;
  }

  double tt = 0, ee = 0;
  for (std::int64_t i = 0; i < n; ++i) {
    double t = 0;
    const std::int64_t kmax = std::min(filter_len - 1, i);
    for (std::int64_t k = 0; k <= kmax; ++k) t += h[k] * ref[static_cast<std::size_t>(i - k)];
    const double e = est[static_cast<std::size_t>(i)] - t;
    tt += t * t;
    ee += e * e;
  }
  if (tt == 0) return -300.0;  // the filtered target vanished; est has no ref component
  return 10.0 * std::log10(tt / std::max(ee, 1e-300 * tt));
}

}  // namespace detail

// SDR improvement over the mixture, averaged over speakers under the best
// SI-SNR assignment (so both metrics report against one pairing).
inline double sdri(const std::vector<double>& mixture, const std::vector<std::vector<double>>& refs,
                   const std::vector<std::vector<double>>& ests, std::int64_t filter_len = 512,
                   double ridge = 1e-8, bool* regularized = nullptr) {
  detail::check_lengths(mixture, refs, ests);
  const SeparationMetrics assign = si_snri(mixture, refs, ests);
  bool flag = false;
  double total = 0;
  for (std::size_t j = 0; j < refs.size(); ++j) {
    const auto& est = ests[static_cast<std::size_t>(assign.permutation[j])];
    const double sep = detail::sdr_filtered(refs[j], est, filter_len, ridge, &flag);
    const double base = detail::sdr_filtered(refs[j], mixture, filter_len, ridge, &flag);
    total += sep - base;
  }
  if (regularized) *regularized = flag;
  return total / static_cast<double>(refs.size());
}

// Both metrics under one assignment.
inline SeparationMetrics evaluate(const std::vector<double>& mixture,
                                  const std::vector<std::vector<double>>& refs,
                                  const std::vector<std::vector<double>>& ests,
                                  std::int64_t filter_len = 512) {
  SeparationMetrics m = si_snri(mixture, refs, ests);
  bool flag = false;
  m.sdri = sdri(mixture, refs, ests, filter_len, 1e-8, &flag);
  m.sdr_regularized = flag;
  return m;
}

// ---------------------------------------------------------------------------
// Cost accounting: parameters and MACs.
// ---------------------------------------------------------------------------

struct CostReport {
  std::int64_t param_count = 0;
  std::int64_t macs_per_window = 0;
  std::int64_t window_samples = 0;
  std::vector<std::pair<std::string, std::int64_t>> param_breakdown;
  std::vector<std::pair<std::string, std::int64_t>> mac_breakdown;

  std::string to_text() const {
    std::ostringstream os;
    if (!param_breakdown.empty() || param_count > 0) {
      os << "parameters total " << param_count << "\n";
      for (const auto& [k, v] : param_breakdown) os << "parameters " << k << " " << v << "\n";
    }
    if (!mac_breakdown.empty() || macs_per_window > 0) {
      os << "macs total " << macs_per_window << " (window " << window_samples << " samples)\n";
      for (const auto& [k, v] : mac_breakdown) os << "macs " << k << " " << v << "\n";
    }
    return os.str();
  }

  std::string to_kv() const {
    std::ostringstream os;
    os << "params.total=" << param_count << "\n";
    for (const auto& [k, v] : param_breakdown) os << "params." << k << "=" << v << "\n";
    os << "macs.total=" << macs_per_window << "\n";
    os << "macs.window=" << window_samples << "\n";
    for (const auto& [k, v] : mac_breakdown) os << "macs." << k << "=" << v << "\n";
    return os.str();
  }
};

// Exact trainable-parameter count with one breakdown entry per top-level
// module, taken from an instantiated model so the total is self-consistent
// with what the optimizer and checkpoints see.
template <typename S = float>
CostReport count_params(const ModelConfig& cfg, bool with_aux_heads = false,
                        std::int64_t aux_mag_bins = 0) {
  SeparatorModel<S> model(cfg, 1, with_aux_heads, aux_mag_bins);
  CostReport report;
  report.param_count = model.params().count_trainable();
  for (const auto& [k, v] : model.params().count_by_prefix(1)) {
    report.param_breakdown.emplace_back(k, v);
  }
  std::int64_t sum = 0;
  for (const auto& [k, v] : report.param_breakdown) sum += v;
  if (sum != report.param_count) throw NumericError("count_params: breakdown does not sum");
  return report;
}

namespace detail {

// One MAC is one multiply with its accumulate. Linear layers and convolutions
// count C_in*C_out*K*T/groups; attention counts the QKV/output projections
// plus score and weighted-sum matmuls at the attended length; elementwise
// products (gates, LayerScale) count one MAC per element. Pure additions
// (residuals, pooling, overlap-add), nonlinearities, normalizations, and
// softmax are not counted.
struct MacModel {
  const ModelConfig& cfg;

  std::int64_t linear(std::int64_t in, std::int64_t out, std::int64_t T) const {
    return in * out * T;
  }
  std::int64_t dwconv(std::int64_t C, std::int64_t K, std::int64_t T_out) const {
    return C * K * T_out;
  }
  std::int64_t attention(std::int64_t T) const {
    const std::int64_t F = cfg.F;
    // q, k, v, o projections plus score and weighted-sum matmuls; the
    // relative-position table is a lookup-and-add.
    return 4 * linear(F, F, T) + 2 * F * T * T;
  }
  std::int64_t ega(std::int64_t T, std::int64_t pool) const {
    const std::int64_t F = cfg.F;
    std::int64_t m = attention(T / pool);
    switch (cfg.ega_mode) {
      case EgaMode::kFull:
        m += linear(F, F, T) + F * T;  // gate projection and gating product
        break;
      case EgaMode::kMulNoGate:
        m += F * T;
        break;
      case EgaMode::kPlainDsUs:
        break;
    }
    return m;
  }
  std::int64_t gcfn(std::int64_t T) const {
    const std::int64_t F = cfg.F;
    return linear(F, 6 * F, T) + 3 * F * T + dwconv(3 * F, 3, T) + linear(3 * F, F, T);
  }
  std::int64_t cla(std::int64_t T) const {
    const std::int64_t F = cfg.F;
    return linear(F, 2 * F, T) + F * T + dwconv(F, cfg.K, T) + linear(F, 2 * F, T) +
           linear(2 * F, F, T);
  }
  std::int64_t layerscale(std::int64_t T) const { return cfg.F * T; }
  std::int64_t global_block(std::int64_t T, std::int64_t pool) const {
    return ega(T, pool) + layerscale(T) + gcfn(T) + layerscale(T);
  }
  std::int64_t local_block(std::int64_t T) const {
    return cla(T) + layerscale(T) + gcfn(T) + layerscale(T);
  }
  // One application of the speaker split: expand to 2JF, gate, per-speaker
  // projections.
  std::int64_t split(std::int64_t T) const {
    const std::int64_t F = cfg.F;
    const std::int64_t J = cfg.J;
    return linear(F, 2 * J * F, T) + J * F * T + J * linear(F, F, T);
  }
  // Cross-speaker block: per-stream qkv/o projections, frame-wise attention
  // across the J streams, branch scale, optional shared FFN per stream.
  std::int64_t cross_speaker(std::int64_t T) const {
    const std::int64_t F = cfg.F;
    const std::int64_t J = cfg.J;
    std::int64_t m = J * 4 * linear(F, F, T) + 2 * J * J * F * T + J * F * T;
    if (cfg.cs_ffn) m += J * (gcfn(T) + layerscale(T));
    return m;
  }
  std::int64_t glu_projection(std::int64_t in, std::int64_t out, std::int64_t groups,
                              std::int64_t T) const {
    return linear(in, 2 * groups * out, T) + groups * out * T + groups * linear(out, out, T);
  }
};

}  // namespace detail

// Analytic MAC count for one inference pass over n_samples of audio,
// following the exact padded pipeline. Attention terms use the pooled
// sequence lengths. Auxiliary heads are excluded: they only run in training.
inline CostReport count_macs(const ModelConfig& cfg, std::int64_t n_samples = 16000) {
  cfg.validate();
  if (n_samples < 1) throw ShapeError("count_macs: need a positive window");
  const detail::MacModel mm{cfg};
  const std::int64_t F = cfg.F;
  const std::int64_t R = cfg.R;
  const std::int64_t J = cfg.J;
  const bool late = cfg.decoder_mode == DecoderMode::kLateSplit;
  const bool with_cs = cfg.decoder_mode == DecoderMode::kSepre;
  const std::int64_t streams = late ? 1 : J;
  const std::int64_t T0 = pad_for_depth(n_samples, cfg.L, cfg.H, R).frames;
  const auto frames_at = [&](std::int64_t r) { return T0 >> r; };

  CostReport report;
  report.window_samples = n_samples;
  auto add = [&](const std::string& key, std::int64_t macs) {
    report.mac_breakdown.emplace_back(key, macs);
    report.macs_per_window += macs;
  };

  add("codec.encode", mm.linear(cfg.L, cfg.F_o, T0));
  add("inproj", mm.linear(cfg.F_o, F, T0));

  std::int64_t enc = 0;
  for (std::int64_t r = 0; r <= R; ++r) {
    const std::int64_t T = frames_at(r);
    const std::int64_t pool = std::int64_t(1) << (R - r);
    enc += cfg.B_E * (mm.global_block(T, pool) + mm.local_block(T));
  }
  add("encoder", enc);

  std::int64_t down = 0;
  for (std::int64_t r = 0; r < R; ++r) down += mm.dwconv(F, 5, frames_at(r + 1));
  add("downsample", down);

  // Early-split modes split the bottleneck and every consumed skip; the
  // late-split model splits once at the full frame rate.
  std::int64_t split = 0;
  if (late) {
    split = mm.split(T0);
  } else {
    for (std::int64_t r = R; r >= 0; --r) split += mm.split(frames_at(r));
  }
  add("split", split);

  std::int64_t dec = 0;
  std::int64_t cs = 0;
  for (std::int64_t r = R - 1; r >= 0; --r) {
    const std::int64_t T = frames_at(r);
    const std::int64_t pool = std::int64_t(1) << (R - r);
    dec += streams * mm.linear(2 * F, F, T);  // skip merge after upsample+concat
    dec += streams * cfg.B_D * (mm.global_block(T, pool) + mm.local_block(T));
    if (with_cs) {
      const std::int64_t n_cs = cfg.cs_placement == CsPlacement::kPerUnit ? cfg.B_D : 1;
      cs += n_cs * mm.cross_speaker(T);
    }
  }
  add("decoder", dec);
  add("cross_speaker", cs);

  add("output", J * mm.glu_projection(F, cfg.F_o, 1, T0));
  add("codec.decode", J * mm.linear(cfg.F_o, cfg.L, T0));
  return report;
}

// Parameters and MACs in one report.
template <typename S = float>
CostReport cost_report(const ModelConfig& cfg, std::int64_t n_samples = 16000,
                       bool with_aux_heads = false, std::int64_t aux_mag_bins = 0) {
  CostReport params = count_params<S>(cfg, with_aux_heads, aux_mag_bins);
  CostReport macs = count_macs(cfg, n_samples);
  params.macs_per_window = macs.macs_per_window;
  params.window_samples = macs.window_samples;
  params.mac_breakdown = std::move(macs.mac_breakdown);
  return params;
}

// ---------------------------------------------------------------------------
// Representation probe: cosine similarity between the two decoder streams.
// ---------------------------------------------------------------------------

struct ProbeRow {
  int stage = 0;  // frame-rate scale of the decoder stage
  int unit = 0;
  int tap = 0;  // 1 = unit input, 2 = after global, 3 = after local, 4 = after cross-speaker
  std::int64_t frame = 0;
  double value = 0;
};

namespace detail {

// Frame-wise cosine between consecutive speaker-0/speaker-1 records of the
// same tap. Zero feature vectors score 0; rounding is clamped into [-1, 1].
template <typename S>
std::vector<ProbeRow> cosine_rows(const TapRecorder<S>& rec) {
  std::vector<ProbeRow> rows;
  for (std::size_t i = 0; i + 1 < rec.records.size(); ++i) {
    const auto& a = rec.records[i];
    const auto& b = rec.records[i + 1];
    if (a.speaker != 0 || b.speaker != 1 || a.stage != b.stage || a.unit != b.unit ||
        a.tap != b.tap) {
      continue;
    }
    const std::int64_t F = a.value.dim(0);
    const std::int64_t T = a.value.dim(1);
    for (std::int64_t t = 0; t < T; ++t) {
      double dot = 0, na = 0, nb = 0;
      for (std::int64_t f = 0; f < F; ++f) {
        const double x = static_cast<double>(a.value.at(f, t));
        const double y = static_cast<double>(b.value.at(f, t));
        dot += x * y;
        na += x * x;
        nb += y * y;
      }
      const double denom = std::sqrt(na) * std::sqrt(nb);
      const double v = denom > 0 ? std::clamp(dot / denom, -1.0, 1.0) : 0.0;
      rows.push_back(ProbeRow{a.stage, a.unit, a.tap, t, v});
    }
  }
  return rows;
}

}  // namespace detail

// Per-frame cosine between the features a shared decoder keeps for the two
// speakers, recorded at every unit tap. Requires J = 2 and a decoder that
// carries both streams through shared weights.
template <typename S>
std::vector<ProbeRow> cosine_probe(const SeparatorModel<S>& model, const Tensor<S>& mixture) {
  const ModelConfig& cfg = model.config();
  if (cfg.J != 2) throw ConfigError("cosine_probe: needs a two-speaker model");
  if (cfg.decoder_mode != DecoderMode::kEssd && cfg.decoder_mode != DecoderMode::kSepre) {
    throw ConfigError("cosine_probe: decoder must carry per-speaker streams through shared units");
  }
  Graph<S> g(false, Rng(0), false);
  TapRecorder<S> rec;
  ForwardOptions<S> opt;
  opt.taps = &rec;
  model.forward(g, mixture, opt);
  return detail::cosine_rows(rec);
}

inline std::string probe_csv(const std::vector<ProbeRow>& rows) {
  std::ostringstream os;
  os.precision(9);
  os << "tap,stage,unit,frame,value\n";
  for (const auto& r : rows) {
    os << r.tap << "," << r.stage << "," << r.unit << "," << r.frame << "," << r.value << "\n";
  }
  return os.str();
}

inline std::map<int, double> mean_by_tap(const std::vector<ProbeRow>& rows) {
  std::map<int, double> sum;
  std::map<int, std::int64_t> n;
  for (const auto& r : rows) {
    sum[r.tap] += r.value;
    ++n[r.tap];
  }
  for (auto& [tap, s] : sum) s /= static_cast<double>(n[tap]);
  return sum;
}

}  // namespace sepkit::evaluation
