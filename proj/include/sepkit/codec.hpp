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

#include "sepkit/graph.hpp"
#include "sepkit/ops.hpp"
#include "sepkit/params.hpp"

namespace sepkit {

// Frame count for a waveform of n samples under window length frame_len and
// step hop, with the last window required to fit entirely.
inline std::int64_t frame_count(std::int64_t n, std::int64_t frame_len, std::int64_t hop) {
  if (n < frame_len) throw ShapeError("frame_count: waveform shorter than one window");
  return (n - frame_len) / hop + 1;
}

struct PadPlan {
  std::int64_t padded_samples;  // waveform length after zero padding
  std::int64_t frames;          // frame count at the padded length
};

// Smallest padded length whose frame count is a positive multiple of
// 2^depth, so that every downsampling stage halves evenly and pooling to the
// innermost rate is exact.
inline PadPlan pad_for_depth(std::int64_t n, std::int64_t frame_len, std::int64_t hop,
                             std::int64_t depth) {
  if (n <= 0 || frame_len <= 0 || hop <= 0 || depth < 0) {
    throw ShapeError("pad_for_depth: non-positive argument");
  }
  const std::int64_t unit = std::int64_t(1) << depth;
  std::int64_t t_min = 1;
  if (n > frame_len) t_min = (n - frame_len + hop - 1) / hop + 1;
  const std::int64_t frames = ((t_min + unit - 1) / unit) * unit;
  return {(frames - 1) * hop + frame_len, frames};
}

// Learnable waveform codec: framing convolution with a pointwise
// nonlinearity on the way in, transposed convolution (overlap-add) on the
// way out.
template <typename S>
struct Codec {
  Parameter<S>* enc_w = nullptr;  // [channels, frame_len]
  Parameter<S>* enc_b = nullptr;  // [channels]
  Parameter<S>* dec_w = nullptr;  // [channels, frame_len]
  Parameter<S>* dec_b = nullptr;  // [1], optional
  std::int64_t channels = 0;
  std::int64_t frame_len = 0;
  std::int64_t hop = 0;

  static Codec create(ParamStore<S>& store, const std::string& prefix, std::int64_t channels,
                      std::int64_t frame_len, std::int64_t hop, bool decoder_bias, Rng& rng) {
    if (channels <= 0 || frame_len <= 0 || hop <= 0 || hop > frame_len) {
      throw ConfigError("codec: need 0 < hop <= frame_len and positive channels");
    }
    Codec c;
    c.channels = channels;
    c.frame_len = frame_len;
    c.hop = hop;
    c.enc_w = store.add_uniform(prefix + ".enc_w", {channels, frame_len}, frame_len, rng);
    c.enc_b = store.add_constant(prefix + ".enc_b", {channels}, S(0), true, false);
    c.dec_w = store.add_uniform(prefix + ".dec_w", {channels, frame_len}, channels, rng);
    if (decoder_bias) {
      c.dec_b = store.add_constant(prefix + ".dec_b", {1}, S(0), true, false);
    }
    return c;
  }

  // Decoder-only variant for auxiliary reconstruction heads; encode() must
  // not be called on the result.
  static Codec create_decoder(ParamStore<S>& store, const std::string& prefix,
                              std::int64_t channels, std::int64_t frame_len, std::int64_t hop,
                              bool decoder_bias, Rng& rng) {
    if (channels <= 0 || frame_len <= 0 || hop <= 0 || hop > frame_len) {
      throw ConfigError("codec: need 0 < hop <= frame_len and positive channels");
    }
    Codec c;
    c.channels = channels;
    c.frame_len = frame_len;
    c.hop = hop;
    c.dec_w = store.add_uniform(prefix + ".dec_w", {channels, frame_len}, channels, rng);
    if (decoder_bias) {
      c.dec_b = store.add_constant(prefix + ".dec_b", {1}, S(0), true, false);
    }
    return c;
  }

  // [n] -> [channels, frames]. The waveform must already be padded so the
  // last window fits. `nonlinear` exists so tests can probe the linear part.
  Var encode(Graph<S>& g, Var wave, bool nonlinear = true) const {
    Var frames = ops::unfold(g, wave, frame_len, hop);
    Var y = ops::linear(g, frames, g.param(*enc_w), g.param(*enc_b));
    return nonlinear ? ops::gelu(g, y) : y;
  }

  // [channels, frames] -> [n_samples] by transposed convolution. n_samples
  // must not exceed the full overlap-add length (frames - 1) * hop +
  // frame_len; shorter requests drop trailing samples.
  Var decode(Graph<S>& g, Var feat, std::int64_t n_samples) const {
    const std::int64_t frames = g.val(feat).dim(1);
    const std::int64_t full = (frames - 1) * hop + frame_len;
    if (n_samples <= 0 || n_samples > full) throw ShapeError("codec decode: bad output length");
    Var windows = ops::matmul(g, ops::transpose(g, g.param(*dec_w)), feat);
    Var wave = ops::fold(g, windows, hop, full);
    if (dec_b != nullptr) wave = ops::add_scalar_bias(g, wave, g.param(*dec_b));
    return n_samples == full ? wave : ops::slice_prefix(g, wave, n_samples);
  }
};

}  // namespace sepkit
