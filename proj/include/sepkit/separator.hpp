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

#include <cstdint>
#include <string>
#include <vector>

#include "sepkit/blocks.hpp"
#include "sepkit/codec.hpp"
#include "sepkit/config.hpp"
#include "sepkit/errors.hpp"
#include "sepkit/graph.hpp"
#include "sepkit/ops.hpp"
#include "sepkit/params.hpp"
#include "sepkit/rng.hpp"
#include "sepkit/tensor.hpp"

namespace sepkit {

// Two linear layers with a GLU in between, optionally with the second layer
// applied as independent per-group maps: in -> 2*groups*out, GLU, then a
// separate out -> out map per group. Used by the speaker split layer, the
// waveform output layer (groups=1), and the mask heads.
template <typename S>
struct GluProjection {
  LinearLayer<S> expand;
  std::vector<LinearLayer<S>> proj;
  std::int64_t out_channels = 0;

  static GluProjection create(ParamStore<S>& store, const std::string& name, std::int64_t in,
                              std::int64_t out, std::int64_t groups, Rng& rng) {
    GluProjection p;
    p.out_channels = out;
    p.expand = LinearLayer<S>::create(store, name + ".lin1", in, 2 * groups * out, rng);
    p.proj.reserve(static_cast<std::size_t>(groups));
    for (std::int64_t j = 0; j < groups; ++j) {
      p.proj.push_back(
          LinearLayer<S>::create(store, name + ".g" + std::to_string(j), out, out, rng));
    }
    return p;
  }

  std::vector<Var> apply_groups(Graph<S>& g, Var x) const {
    Var h = ops::glu_channels(g, expand.apply(g, x));
    std::vector<Var> ys;
    ys.reserve(proj.size());
    if (proj.size() == 1) {
      ys.push_back(proj[0].apply(g, h));
      return ys;
    }
    for (std::size_t j = 0; j < proj.size(); ++j) {
      Var hj = ops::slice_rows(g, h, static_cast<std::int64_t>(j) * out_channels,
                               static_cast<std::int64_t>(j + 1) * out_channels);
      ys.push_back(proj[j].apply(g, hj));
    }
    return ys;
  }

  Var apply(Graph<S>& g, Var x) const { return apply_groups(g, x)[0]; }
};

// Expands one feature sequence into J speaker streams: Linear F -> 2JF, GLU,
// an independent F -> F map per speaker, then LN per stream (shared affine).
template <typename S>
struct SpeakerSplit {
  GluProjection<S> proj;
  LayerNormLayer<S> ln;

  static SpeakerSplit create(ParamStore<S>& store, const std::string& name, std::int64_t F,
                             std::int64_t J, Rng& rng) {
    SpeakerSplit s;
    s.proj = GluProjection<S>::create(store, name, F, F, J, rng);
    s.ln = LayerNormLayer<S>::create(store, name + ".ln", F);
    return s;
  }

  std::vector<Var> apply(Graph<S>& g, Var x) const {
    std::vector<Var> streams = proj.apply_groups(g, x);
    for (Var& s : streams) s = ln.apply(g, s);
    return streams;
  }
};

// Halves the frame rate: depthwise conv (kernel 5, stride 2), BN, GELU.
template <typename S>
struct Downsample {
  DwConvLayer<S> conv;
  BatchNormLayer<S> bn;

  static Downsample create(ParamStore<S>& store, const std::string& name, std::int64_t F,
                           Rng& rng) {
    Downsample d;
    d.conv = DwConvLayer<S>::create(store, name + ".conv", F, 5, 2, 2, 2, rng);
    d.bn = BatchNormLayer<S>::create(store, name + ".bn", F);
    return d;
  }

  Var apply(Graph<S>& g, Var x) const {
    if (g.val(x).dim(1) % 2 != 0) {
      throw ShapeError("downsample: frame count must be even, got " +
                       std::to_string(g.val(x).dim(1)));
    }
    return ops::gelu(g, bn.apply(g, conv.apply(g, x)));
  }
};

template <typename S>
struct EncoderStage {
  std::vector<GlobalBlock<S>> globals;
  std::vector<LocalBlock<S>> locals;

  static EncoderStage create(ParamStore<S>& store, const std::string& name,
                             const ModelConfig& cfg, Rng& rng) {
    EncoderStage st;
    for (std::int64_t b = 0; b < cfg.B_E; ++b) {
      const std::string base = name + ".blk" + std::to_string(b);
      st.globals.push_back(GlobalBlock<S>::create(store, base + ".g", cfg, rng));
      st.locals.push_back(LocalBlock<S>::create(store, base + ".l", cfg, rng));
    }
    return st;
  }

  Var apply(Graph<S>& g, Var x, std::int64_t pool_factor) const {
    for (std::size_t b = 0; b < globals.size(); ++b) {
      x = globals[b].apply(g, x, pool_factor);
      x = locals[b].apply(g, x);
    }
    return x;
  }
};

// Captures decoder-stage unit activations for the representation probe:
// tap 1 = unit input, 2 = after the global block, 3 = after the local block,
// 4 = after cross-speaker mixing.
template <typename S>
struct TapRecorder {
  struct Record {
    int stage;  // frame-rate scale r (sequence length T / 2^r)
    int unit;
    int tap;
    int speaker;
    Tensor<S> value;
  };
  std::vector<Record> records;

  void add(Graph<S>& g, int stage, int unit, int tap, const std::vector<Var>& streams) {
    for (std::size_t j = 0; j < streams.size(); ++j) {
      records.push_back(Record{stage, unit, tap, static_cast<int>(j), g.val(streams[j])});
    }
  }
};

// One decoder stage's trunk: the skip-merge linear plus B_D units of
// (global, local[, cross-speaker]) blocks applied with shared weights across
// the streams handed to apply_units.
template <typename S>
struct DecoderStage {
  LinearLayer<S> merge;
  std::vector<GlobalBlock<S>> globals;
  std::vector<LocalBlock<S>> locals;
  std::vector<CrossSpeakerBlock<S>> cs;
  CsPlacement cs_placement = CsPlacement::kPerUnit;

  static DecoderStage create(ParamStore<S>& store, const std::string& name,
                             const ModelConfig& cfg, bool with_cs, Rng& rng) {
    DecoderStage st;
    st.merge = LinearLayer<S>::create(store, name + ".merge", 2 * cfg.F, cfg.F, rng);
    st.cs_placement = cfg.cs_placement;
    for (std::int64_t b = 0; b < cfg.B_D; ++b) {
      const std::string base = name + ".unit" + std::to_string(b);
      st.globals.push_back(GlobalBlock<S>::create(store, base + ".g", cfg, rng));
      st.locals.push_back(LocalBlock<S>::create(store, base + ".l", cfg, rng));
      if (with_cs && cfg.cs_placement == CsPlacement::kPerUnit) {
        st.cs.push_back(CrossSpeakerBlock<S>::create(store, base + ".cs", cfg, rng));
      }
    }
    if (with_cs && cfg.cs_placement == CsPlacement::kPerStage) {
      st.cs.push_back(CrossSpeakerBlock<S>::create(store, name + ".cs", cfg, rng));
    }
    return st;
  }

  void apply_units(Graph<S>& g, std::vector<Var>& streams, std::int64_t pool_factor,
                   TapRecorder<S>* taps, int stage_label) const {
    const int last_unit = static_cast<int>(globals.size()) - 1;
    for (std::size_t b = 0; b < globals.size(); ++b) {
      const int ub = static_cast<int>(b);
      if (taps) taps->add(g, stage_label, ub, 1, streams);
      for (Var& s : streams) s = globals[b].apply(g, s, pool_factor);
      if (taps) taps->add(g, stage_label, ub, 2, streams);
      for (Var& s : streams) s = locals[b].apply(g, s);
      if (taps) taps->add(g, stage_label, ub, 3, streams);
      if (!cs.empty() && cs_placement == CsPlacement::kPerUnit) {
        cs[b].apply(g, streams);
        if (taps) taps->add(g, stage_label, ub, 4, streams);
      }
    }
    if (!cs.empty() && cs_placement == CsPlacement::kPerStage) {
      cs[0].apply(g, streams);
      if (taps) taps->add(g, stage_label, last_unit, 4, streams);
    }
  }
};

template <typename S>
struct ForwardOptions {
  bool want_aux = false;
  // Optional reordering applied to the streams emitted by every split tap;
  // used to verify end-to-end speaker equivariance.
  const std::vector<int>* split_permutation = nullptr;
  TapRecorder<S>* taps = nullptr;
};

template <typename S>
struct SeparatorOutputs {
  std::vector<Var> estimates;  // J waveforms, each [N]
  // [R][J] in decoding order (coarse to fine): waveforms of length N, or
  // magnitude maps [mag_bins, T] when the model was built with mag-domain
  // auxiliary heads.
  std::vector<std::vector<Var>> aux_estimates;
  Var encoded;  // mixture feature [F_o, T]
};

// The full separator: learnable codec, input projection, R-stage
// downsampling encoder, speaker split, weight-shared reconstruction decoder
// with skip connections, waveform output layer, and optional per-stage mask
// heads used by the auxiliary objectives. The decoder_mode field selects the
// structural variants; see config.hpp.
template <typename S>
class SeparatorModel {
 public:
  // aux_mag_bins = 0 gives time-domain auxiliary outputs (mask, then a
  // per-stage waveform decoder); a positive value replaces the per-stage
  // decoders with linear heads mapping the masked representation's frames to
  // that many magnitude bins.
  SeparatorModel(const ModelConfig& cfg, std::uint64_t seed, bool with_aux_heads,
                 std::int64_t aux_mag_bins = 0)
      : cfg_(cfg), with_aux_(with_aux_heads), aux_mag_bins_(aux_mag_bins) {
    cfg_.validate();
    Rng rng = Rng::derive(seed, {0x5e9a});
    const std::int64_t F = cfg_.F;
    const std::int64_t R = cfg_.R;
    const std::int64_t J = cfg_.J;
    const bool late = cfg_.decoder_mode == DecoderMode::kLateSplit;
    const bool multi = cfg_.decoder_mode == DecoderMode::kEarlySplitMultiDec;
    const bool with_cs = cfg_.decoder_mode == DecoderMode::kSepre;

    codec_ = Codec<S>::create(store_, "codec", cfg_.F_o, cfg_.L, cfg_.H, cfg_.decoder_bias, rng);
    in_lin_ = LinearLayer<S>::create(store_, "inproj.lin", cfg_.F_o, F, rng);
    in_ln_ = LayerNormLayer<S>::create(store_, "inproj.ln", F);

    for (std::int64_t r = 0; r <= R; ++r) {
      enc_stages_.push_back(
          EncoderStage<S>::create(store_, "enc.stage" + std::to_string(r), cfg_, rng));
      if (r < R) {
        downs_.push_back(Downsample<S>::create(store_, "down" + std::to_string(r), F, rng));
      }
    }

    if (late || cfg_.split_mode == SplitMode::kShared) {
      splits_.push_back(SpeakerSplit<S>::create(store_, "split", F, J, rng));
    } else {
      // One split per tap, named by the tap's frame-rate scale; constructed
      // in consumption order (bottleneck first).
      for (std::int64_t r = R; r >= 0; --r) {
        splits_.push_back(
            SpeakerSplit<S>::create(store_, "split" + std::to_string(r), F, J, rng));
      }
    }

    for (std::int64_t r = R - 1; r >= 0; --r) {
      const std::string name = "dec.stage" + std::to_string(r);
      std::vector<DecoderStage<S>> per_stream;
      if (multi) {
        for (std::int64_t j = 0; j < J; ++j) {
          per_stream.push_back(DecoderStage<S>::create(store_, name + ".spk" + std::to_string(j),
                                                       cfg_, false, rng));
        }
      } else {
        per_stream.push_back(DecoderStage<S>::create(store_, name, cfg_, with_cs, rng));
      }
      dec_stages_.push_back(std::move(per_stream));
    }

    if (multi) {
      for (std::int64_t j = 0; j < J; ++j) {
        out_layers_.push_back(GluProjection<S>::create(store_, "out" + std::to_string(j), F,
                                                       cfg_.F_o, 1, rng));
      }
    } else {
      out_layers_.push_back(GluProjection<S>::create(store_, "out", F, cfg_.F_o, 1, rng));
    }

    if (with_aux_) {
      for (std::int64_t r = R - 1; r >= 0; --r) {
        const std::string base = "aux.stage" + std::to_string(r);
        if (late) {
          // A single stream must emit all J masks, so the head is grouped.
          aux_heads_.push_back(
              GluProjection<S>::create(store_, base + ".head", F, cfg_.F_o, J, rng));
        } else if (multi) {
          for (std::int64_t j = 0; j < J; ++j) {
            aux_heads_.push_back(GluProjection<S>::create(
                store_, base + ".head.spk" + std::to_string(j), F, cfg_.F_o, 1, rng));
          }
        } else {
          aux_heads_.push_back(
              GluProjection<S>::create(store_, base + ".head", F, cfg_.F_o, 1, rng));
        }
        if (aux_mag_bins_ > 0) {
          aux_mags_.push_back(
              LinearLayer<S>::create(store_, base + ".mag", cfg_.F_o, aux_mag_bins_, rng));
        } else {
          aux_decs_.push_back(Codec<S>::create_decoder(store_, base + ".dec", cfg_.F_o, cfg_.L,
                                                       cfg_.H, cfg_.decoder_bias, rng));
        }
      }
    }
  }

  const ModelConfig& config() const { return cfg_; }
  bool has_aux_heads() const { return with_aux_; }
  std::int64_t aux_mag_bins() const { return aux_mag_bins_; }
  ParamStore<S>& params() { return store_; }
  const ParamStore<S>& params() const { return store_; }

  SeparatorOutputs<S> forward(Graph<S>& g, const Tensor<S>& wave,
                              const ForwardOptions<S>& opt = {}) const {
    if (wave.rank() != 1) throw ShapeError("separator: waveform must be rank 1");
    if (opt.want_aux && !with_aux_) {
      throw ConfigError("separator: auxiliary outputs requested but heads were not built");
    }
    const std::int64_t N = wave.numel();
    const std::int64_t R = cfg_.R;
    const std::int64_t J = cfg_.J;
    const bool late = cfg_.decoder_mode == DecoderMode::kLateSplit;
    const bool multi = cfg_.decoder_mode == DecoderMode::kEarlySplitMultiDec;

    const PadPlan plan = pad_for_depth(N, cfg_.L, cfg_.H, R);
    Tensor<S> padded = Tensor<S>::zeros({plan.padded_samples});
    for (std::int64_t i = 0; i < N; ++i) padded[i] = wave[i];

    SeparatorOutputs<S> out;
    Var X = codec_.encode(g, g.constant(std::move(padded)));
    out.encoded = X;

    Var u = in_ln_.apply(g, in_lin_.apply(g, X));
    std::vector<Var> skips;  // skips[r] has length T / 2^r
    for (std::int64_t r = 0; r < R; ++r) {
      u = enc_stages_[static_cast<std::size_t>(r)].apply(g, u, std::int64_t(1) << (R - r));
      skips.push_back(u);
      u = downs_[static_cast<std::size_t>(r)].apply(g, u);
    }
    u = enc_stages_[static_cast<std::size_t>(R)].apply(g, u, 1);

    auto permute = [&](std::vector<Var>& streams) {
      if (!opt.split_permutation) return;
      const std::vector<int>& p = *opt.split_permutation;
      if (p.size() != streams.size()) throw ShapeError("split permutation size mismatch");
      std::vector<Var> reordered(streams.size());
      for (std::size_t j = 0; j < p.size(); ++j) {
        reordered[j] = streams[static_cast<std::size_t>(p[j])];
      }
      streams = std::move(reordered);
    };

    // Streams through the decoder: J of them in the early-split modes, one in
    // late-split mode until the final split.
    std::vector<Var> streams;
    if (late) {
      streams = {u};
    } else {
      streams = split_at(R).apply(g, u);
      permute(streams);
    }

    for (std::int64_t d = 0; d < R; ++d) {
      const std::int64_t r = R - 1 - d;  // frame-rate scale of this stage
      const std::int64_t pool = std::int64_t(1) << (R - r);
      Var skip = skips[static_cast<std::size_t>(r)];

      std::vector<Var> skip_streams;
      if (late) {
        skip_streams = {skip};
      } else {
        skip_streams = split_at(r).apply(g, skip);
        permute(skip_streams);
      }

      const auto& stage = dec_stages_[static_cast<std::size_t>(d)];
      for (std::size_t j = 0; j < streams.size(); ++j) {
        Var up = ops::upsample_nearest(g, streams[j], 2);
        Var cat = ops::concat_rows(g, {up, skip_streams[j]});
        streams[j] = stage[multi ? j : 0].merge.apply(g, cat);
      }
      if (multi) {
        for (std::size_t j = 0; j < streams.size(); ++j) {
          std::vector<Var> solo = {streams[j]};
          stage[j].apply_units(g, solo, pool, nullptr, static_cast<int>(r));
          streams[j] = solo[0];
        }
      } else {
        stage[0].apply_units(g, streams, pool, opt.taps, static_cast<int>(r));
      }

      if (opt.want_aux) {
        out.aux_estimates.push_back(
            aux_stage_outputs(g, streams, X, d, r, N));
      }
    }

    if (late) {
      streams = split_at(0).apply(g, streams[0]);
      permute(streams);
    }

    out.estimates.reserve(static_cast<std::size_t>(J));
    for (std::size_t j = 0; j < streams.size(); ++j) {
      Var feat = out_layers_[multi ? j : 0].apply(g, streams[j]);
      out.estimates.push_back(codec_.decode(g, feat, N));
    }
    return out;
  }

  // Inference convenience: eval-mode graph, J separated waveforms.
  std::vector<Tensor<S>> separate(const Tensor<S>& wave) const {
    Graph<S> g(false, Rng(0), false);
    SeparatorOutputs<S> out = forward(g, wave);
    std::vector<Tensor<S>> waves;
    waves.reserve(out.estimates.size());
    for (Var v : out.estimates) waves.push_back(g.val(v));
    return waves;
  }

 private:
  const SpeakerSplit<S>& split_at(std::int64_t scale) const {
    if (splits_.size() == 1) return splits_[0];
    // Multiple mode stores taps in consumption order: scale R first.
    return splits_[static_cast<std::size_t>(cfg_.R - scale)];
  }

  // Mask head for decoder stage d (scale r): per-speaker masks at F_o
  // channels, nearest-upsampled to the full frame rate, applied to the
  // encoded mixture, then rendered by the stage's own decoder.
  std::vector<Var> aux_stage_outputs(Graph<S>& g, const std::vector<Var>& streams, Var X,
                                     std::int64_t d, std::int64_t r, std::int64_t n_samples) const {
    const bool late = cfg_.decoder_mode == DecoderMode::kLateSplit;
    const bool multi = cfg_.decoder_mode == DecoderMode::kEarlySplitMultiDec;
    const std::int64_t up = std::int64_t(1) << r;

    std::vector<Var> masks;
    if (late) {
      masks = aux_heads_[static_cast<std::size_t>(d)].apply_groups(g, streams[0]);
    } else if (multi) {
      for (std::size_t j = 0; j < streams.size(); ++j) {
        masks.push_back(
            aux_heads_[static_cast<std::size_t>(d) * static_cast<std::size_t>(cfg_.J) + j].apply(
                g, streams[j]));
      }
    } else {
      for (Var s : streams) {
        masks.push_back(aux_heads_[static_cast<std::size_t>(d)].apply(g, s));
      }
    }

    std::vector<Var> waves;
    waves.reserve(masks.size());
    for (Var m : masks) {
      Var full = up == 1 ? m : ops::upsample_nearest(g, m, up);
      Var feat = ops::mul(g, X, full);
      if (aux_mag_bins_ > 0) {
        waves.push_back(aux_mags_[static_cast<std::size_t>(d)].apply(g, feat));
      } else {
        waves.push_back(aux_decs_[static_cast<std::size_t>(d)].decode(g, feat, n_samples));
      }
    }
    return waves;
  }

  ModelConfig cfg_;
  bool with_aux_ = false;
  std::int64_t aux_mag_bins_ = 0;
  ParamStore<S> store_;
  Codec<S> codec_;
  LinearLayer<S> in_lin_;
  LayerNormLayer<S> in_ln_;
  std::vector<EncoderStage<S>> enc_stages_;        // R+1, outermost first
  std::vector<Downsample<S>> downs_;               // R
  std::vector<SpeakerSplit<S>> splits_;            // 1, or R+1 in multiple mode
  std::vector<std::vector<DecoderStage<S>>> dec_stages_;  // [R][1 or J], decoding order
  std::vector<GluProjection<S>> out_layers_;       // 1 or J
  std::vector<GluProjection<S>> aux_heads_;        // [R] or [R*J], decoding order
  std::vector<Codec<S>> aux_decs_;                 // [R], decoding order (time mode)
  std::vector<LinearLayer<S>> aux_mags_;           // [R], decoding order (mag mode)
};

}  // namespace sepkit
