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
#include <numeric>
#include <vector>

#include "sepkit/config.hpp"
#include "sepkit/errors.hpp"
#include "sepkit/graph.hpp"
#include "sepkit/ops.hpp"
#include "sepkit/tensor.hpp"

namespace sepkit::objectives {

// Clipped scale-invariant SNR in dB as a graph node. ref and est must have
// the same shape; ref must not be identically zero. The estimate is
// projected onto the reference (gamma = est.ref / ||ref||^2) and the value
// min(20 log10((||gamma ref|| + eps) / (||gamma ref - est|| + eps)), tau)
// is returned as a one-element tensor.
template <typename S>
Var si_snr(Graph<S>& g, Var ref, Var est, double tau, double eps) {
  if (!g.val(ref).same_shape(g.val(est))) {
    throw ShapeError("si_snr: reference and estimate shapes differ");
  }
  Var ref_sq = ops::dot(g, ref, ref);
  if (g.val(ref_sq)[0] == S(0)) {
    throw NumericError("si_snr: reference is identically zero");
  }
  Var gamma = ops::div(g, ops::dot(g, est, ref), ref_sq);
  Var target = ops::mul_scalar(g, ref, gamma);
  Var noise = ops::sub(g, target, est);
  Var num = ops::add_const(g, ops::sqrt_elem(g, ops::dot(g, target, target)), eps);
  Var den = ops::add_const(g, ops::sqrt_elem(g, ops::dot(g, noise, noise)), eps);
  Var db = ops::scale(g, ops::log10_elem(g, ops::div(g, num, den)), 20.0);
  return ops::min_const(g, db, tau);
}

// Plain-number variant for metrics.
template <typename T>
double si_snr_value(const T& ref, const T& est, double tau = 30.0, double eps = 1e-8) {
  if (ref.size() != est.size()) throw ShapeError("si_snr: length mismatch");
  double rr = 0, er = 0;
  for (std::size_t i = 0; i < ref.size(); ++i) {
    rr += static_cast<double>(ref[i]) * static_cast<double>(ref[i]);
    er += static_cast<double>(est[i]) * static_cast<double>(ref[i]);
  }
  if (rr == 0) throw NumericError("si_snr: reference is identically zero");
  const double gamma = er / rr;
  double tt = 0, nn = 0;
  for (std::size_t i = 0; i < ref.size(); ++i) {
    const double t = gamma * static_cast<double>(ref[i]);
    const double n = t - static_cast<double>(est[i]);
    tt += t * t;
    nn += n * n;
  }
  return std::min(20.0 * std::log10((std::sqrt(tt) + eps) / (std::sqrt(nn) + eps)), tau);
}

namespace detail {

// All J x J pairwise si_snr nodes: table[j][k] = si_snr(refs[j], ests[k]).
template <typename S>
std::vector<std::vector<Var>> pairwise_si_snr(Graph<S>& g, const std::vector<Var>& refs,
                                              const std::vector<Var>& ests, double tau,
                                              double eps) {
  if (refs.size() != ests.size()) throw ShapeError("pit: speaker count mismatch");
  if (refs.empty()) throw ShapeError("pit: no speakers");
  std::vector<std::vector<Var>> table(refs.size(), std::vector<Var>(ests.size()));
  for (std::size_t j = 0; j < refs.size(); ++j) {
    for (std::size_t k = 0; k < ests.size(); ++k) {
      table[j][k] = si_snr(g, refs[j], ests[k], tau, eps);
    }
  }
  return table;
}

inline std::vector<std::vector<int>> all_permutations(int J) {
  std::vector<int> idx(static_cast<std::size_t>(J));
  std::iota(idx.begin(), idx.end(), 0);
  std::vector<std::vector<int>> perms;
  do {
    perms.push_back(idx);
  } while (std::next_permutation(idx.begin(), idx.end()));
  return perms;
}

// -sum_j table[j][perm[j]] as a graph node.
template <typename S>
Var neg_assignment_sum(Graph<S>& g, const std::vector<std::vector<Var>>& table,
                       const std::vector<int>& perm) {
  Var acc;
  for (std::size_t j = 0; j < perm.size(); ++j) {
    Var term = table[j][static_cast<std::size_t>(perm[j])];
    acc = acc.valid() ? ops::add(g, acc, term) : term;
  }
  return ops::scale(g, acc, -1.0);
}

template <typename S>
double assignment_value(Graph<S>& g, const std::vector<std::vector<Var>>& table,
                        const std::vector<int>& perm) {
  double v = 0;
  for (std::size_t j = 0; j < perm.size(); ++j) {
    v -= static_cast<double>(g.val(table[j][static_cast<std::size_t>(perm[j])])[0]);
  }
  return v;
}

}  // namespace detail

struct PitResult {
  Var loss;                          // scalar node: -sum_j si_snr at the best assignment
  std::vector<int> permutation;      // estimate index assigned to each reference
  std::vector<double> per_speaker_db;
};

// Permutation-invariant loss over all J! assignments; ties keep the
// lexicographically smallest permutation.
template <typename S>
PitResult pit(Graph<S>& g, const std::vector<Var>& refs, const std::vector<Var>& ests, double tau,
              double eps) {
  auto table = detail::pairwise_si_snr(g, refs, ests, tau, eps);
  const auto perms = detail::all_permutations(static_cast<int>(refs.size()));
  std::size_t best = 0;
  double best_value = detail::assignment_value(g, table, perms[0]);
  for (std::size_t p = 1; p < perms.size(); ++p) {
    const double v = detail::assignment_value(g, table, perms[p]);
    if (v < best_value) {
      best_value = v;
      best = p;
    }
  }
  PitResult res;
  res.permutation = perms[best];
  res.loss = detail::neg_assignment_sum(g, table, perms[best]);
  for (std::size_t j = 0; j < refs.size(); ++j) {
    res.per_speaker_db.push_back(
        static_cast<double>(g.val(table[j][static_cast<std::size_t>(res.permutation[j])])[0]));
  }
  return res;
}

// Multi-loss alpha schedule: alpha0 until start_epoch inclusive, then decayed
// by alpha_factor every alpha_every epochs.
inline double alpha_at(std::int64_t epoch, const LossConfig& cfg) {
  if (epoch <= cfg.alpha_start_epoch) return cfg.alpha0;
  const std::int64_t steps = (epoch - cfg.alpha_start_epoch) / cfg.alpha_every;
  return cfg.alpha0 * std::pow(cfg.alpha_factor, static_cast<double>(steps));
}

struct MultiLossResult {
  Var total;                       // scalar node fed to backward()
  double total_value = 0;
  double final_value = 0;          // -sum_j si_snr of the final estimates
  std::vector<double> aux_values;  // one per decoder stage
  std::vector<int> permutation;
  std::vector<double> per_speaker_db;
};

// Combines the final PIT loss with the per-stage auxiliary losses:
// total = (1 - alpha) * L + alpha * mean_r(L_r). aux_refs[r] holds the
// per-speaker auxiliary targets for stage r (waveforms in time mode,
// flattened-comparable magnitude tensors in mag mode); aux_ests are the
// model's aux outputs in the same layout. With `final` coupling the
// permutation minimizing L alone is reused for every L_r; with `joint` the
// permutation minimizes the combined total.
template <typename S>
MultiLossResult multi_loss(Graph<S>& g, const std::vector<Var>& refs,
                           const std::vector<Var>& ests,
                           const std::vector<std::vector<Var>>& aux_refs,
                           const std::vector<std::vector<Var>>& aux_ests, double alpha,
                           const LossConfig& cfg) {
  if (aux_refs.size() != aux_ests.size()) {
    throw ShapeError("multi_loss: aux stage count mismatch");
  }
  const double R = static_cast<double>(aux_ests.size());

  auto final_table = detail::pairwise_si_snr(g, refs, ests, cfg.tau, cfg.eps);
  std::vector<std::vector<std::vector<Var>>> aux_tables;
  for (std::size_t r = 0; r < aux_ests.size(); ++r) {
    aux_tables.push_back(
        detail::pairwise_si_snr(g, aux_refs[r], aux_ests[r], cfg.tau, cfg.eps));
  }

  const auto perms = detail::all_permutations(static_cast<int>(refs.size()));
  auto combined_value = [&](const std::vector<int>& perm) {
    double v = (1.0 - alpha) * detail::assignment_value(g, final_table, perm);
    for (const auto& t : aux_tables) {
      v += alpha * detail::assignment_value(g, t, perm) / R;
    }
    return v;
  };

  std::size_t best = 0;
  if (cfg.pit_coupling == PitCoupling::kJoint && !aux_tables.empty()) {
    double best_value = combined_value(perms[0]);
    for (std::size_t p = 1; p < perms.size(); ++p) {
      const double v = combined_value(perms[p]);
      if (v < best_value) {
        best_value = v;
        best = p;
      }
    }
  } else {
    double best_value = detail::assignment_value(g, final_table, perms[0]);
    for (std::size_t p = 1; p < perms.size(); ++p) {
      const double v = detail::assignment_value(g, final_table, perms[p]);
      if (v < best_value) {
        best_value = v;
        best = p;
      }
    }
  }
  const std::vector<int>& perm = perms[best];

  MultiLossResult res;
  res.permutation = perm;
  Var final_loss = detail::neg_assignment_sum(g, final_table, perm);
  res.final_value = static_cast<double>(g.val(final_loss)[0]);
  for (std::size_t j = 0; j < refs.size(); ++j) {
    res.per_speaker_db.push_back(
        static_cast<double>(g.val(final_table[j][static_cast<std::size_t>(perm[j])])[0]));
  }

  if (aux_tables.empty()) {
    res.total = final_loss;
    res.total_value = res.final_value;
    return res;
  }

  Var total = ops::scale(g, final_loss, 1.0 - alpha);
  for (const auto& t : aux_tables) {
    Var stage = detail::neg_assignment_sum(g, t, perm);
    res.aux_values.push_back(static_cast<double>(g.val(stage)[0]));
    total = ops::add(g, total, ops::scale(g, stage, alpha / R));
  }
  res.total = total;
  res.total_value = static_cast<double>(g.val(total)[0]);
  return res;
}

// Alignment map from codec frames to STFT frames: column k of the result
// averages the codec frames whose window centers fall inside STFT window k.
// Multiplying a [bins, T_codec] map by this [T_codec, T_stft] matrix yields
// the estimate at the reference spectrogram's frame rate.
template <typename S>
Tensor<S> stft_frame_align(std::int64_t codec_frames, std::int64_t frame_len, std::int64_t hop,
                           std::int64_t stft_frames, std::int64_t stft_fft,
                           std::int64_t stft_hop) {
  Tensor<S> P = Tensor<S>::zeros({codec_frames, stft_frames});
  for (std::int64_t k = 0; k < stft_frames; ++k) {
    const double win_lo = static_cast<double>(k * stft_hop);
    const double win_hi = static_cast<double>(k * stft_hop + stft_fft);
    std::vector<std::int64_t> hits;
    for (std::int64_t t = 0; t < codec_frames; ++t) {
      const double center = static_cast<double>(t * hop) + static_cast<double>(frame_len) / 2.0;
      if (center >= win_lo && center < win_hi) hits.push_back(t);
    }
    if (hits.empty()) {
      // Degenerate geometry; fall back to the nearest codec frame.
      const double center = (win_lo + win_hi) / 2.0;
      std::int64_t t = std::clamp<std::int64_t>(
          std::llround((center - static_cast<double>(frame_len) / 2.0) / static_cast<double>(hop)),
          0, codec_frames - 1);
      hits.push_back(t);
    }
    const S w = S(1) / static_cast<S>(hits.size());
    for (std::int64_t t : hits) P.at(t, k) = w;
  }
  return P;
}

}  // namespace sepkit::objectives
