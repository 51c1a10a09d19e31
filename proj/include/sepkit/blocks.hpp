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

#include "sepkit/attention.hpp"
#include "sepkit/config.hpp"
#include "sepkit/graph.hpp"
#include "sepkit/ops.hpp"
#include "sepkit/params.hpp"

namespace sepkit {

// ---------------------------------------------------------------------------
// Leaf layers.
// ---------------------------------------------------------------------------

template <typename S>
struct LinearLayer {
  Parameter<S>* w = nullptr;
  Parameter<S>* b = nullptr;

  static LinearLayer create(ParamStore<S>& store, const std::string& name, std::int64_t in,
                            std::int64_t out, Rng& rng, bool bias = true) {
    LinearLayer l;
    l.w = store.add_uniform(name + ".w", {out, in}, in, rng);
    if (bias) l.b = store.add_constant(name + ".b", {out}, S(0), true, false);
    return l;
  }

  Var apply(Graph<S>& g, Var x) const {
    return ops::linear(g, x, g.param(*w), b ? g.param(*b) : Var{});
  }
};

template <typename S>
struct LayerNormLayer {
  Parameter<S>* gamma = nullptr;
  Parameter<S>* beta = nullptr;

  static LayerNormLayer create(ParamStore<S>& store, const std::string& name, std::int64_t C) {
    LayerNormLayer l;
    l.gamma = store.add_constant(name + ".g", {C}, S(1), true, false);
    l.beta = store.add_constant(name + ".b", {C}, S(0), true, false);
    return l;
  }

  Var apply(Graph<S>& g, Var x) const {
    return ops::layer_norm(g, x, g.param(*gamma), g.param(*beta));
  }
};

template <typename S>
struct BatchNormLayer {
  Parameter<S>* gamma = nullptr;
  Parameter<S>* beta = nullptr;
  Parameter<S>* running_mean = nullptr;
  Parameter<S>* running_var = nullptr;

  static BatchNormLayer create(ParamStore<S>& store, const std::string& name, std::int64_t C) {
    BatchNormLayer l;
    l.gamma = store.add_constant(name + ".g", {C}, S(1), true, false);
    l.beta = store.add_constant(name + ".b", {C}, S(0), true, false);
    l.running_mean = store.add_constant(name + ".rm", {C}, S(0), false, false);
    l.running_var = store.add_constant(name + ".rv", {C}, S(1), false, false);
    return l;
  }

  Var apply(Graph<S>& g, Var x) const {
    return ops::batch_norm(g, x, g.param(*gamma), g.param(*beta), running_mean, running_var);
  }
};

template <typename S>
struct DwConvLayer {
  Parameter<S>* w = nullptr;
  Parameter<S>* b = nullptr;
  std::int64_t stride = 1;
  std::int64_t pad_l = 0;
  std::int64_t pad_r = 0;

  static DwConvLayer create(ParamStore<S>& store, const std::string& name, std::int64_t C,
                            std::int64_t K, std::int64_t stride, std::int64_t pad_l,
                            std::int64_t pad_r, Rng& rng) {
    DwConvLayer l;
    l.w = store.add_uniform(name + ".w", {C, K}, K, rng);
    l.b = store.add_constant(name + ".b", {C}, S(0), true, false);
    l.stride = stride;
    l.pad_l = pad_l;
    l.pad_r = pad_r;
    return l;
  }

  Var apply(Graph<S>& g, Var x) const {
    return ops::dw_conv1d(g, x, g.param(*w), g.param(*b), stride, pad_l, pad_r);
  }
};

// Pre-norm residual shell: x + dropout(scale ⊙ body(LN(x))). The per-channel
// scale starts near zero so a fresh block is close to the identity.
template <typename S>
struct ResidualWrap {
  LayerNormLayer<S> norm;
  Parameter<S>* branch_scale = nullptr;
  double dropout_p = 0;

  static ResidualWrap create(ParamStore<S>& store, const std::string& name, std::int64_t C,
                             double scale_init, double dropout_p) {
    ResidualWrap r;
    r.norm = LayerNormLayer<S>::create(store, name + ".ln", C);
    r.branch_scale = store.add_constant(name + ".scale", {C}, static_cast<S>(scale_init), true,
                                        false);
    r.dropout_p = dropout_p;
    return r;
  }

  template <typename Body>
  Var apply(Graph<S>& g, Var x, Body body) const {
    Var u = body(norm.apply(g, x));
    u = ops::scale_channels(g, u, g.param(*branch_scale));
    u = ops::dropout(g, u, dropout_p);
    return ops::add(g, x, u);
  }
};

// ---------------------------------------------------------------------------
// Feed-forward: gated convolutional network.
// ---------------------------------------------------------------------------

// Linear F -> 6F, GLU to 3F, depthwise conv (kernel 3, same length), Linear
// 3F -> F. The two linear maps hold 9F^2 weights.
template <typename S>
struct Gcfn {
  LinearLayer<S> lin_in;
  DwConvLayer<S> conv;
  LinearLayer<S> lin_out;

  static Gcfn create(ParamStore<S>& store, const std::string& name, std::int64_t F, Rng& rng) {
    Gcfn m;
    m.lin_in = LinearLayer<S>::create(store, name + ".in", F, 6 * F, rng);
    m.conv = DwConvLayer<S>::create(store, name + ".conv", 3 * F, 3, 1, 1, 1, rng);
    m.lin_out = LinearLayer<S>::create(store, name + ".out", 3 * F, F, rng);
    return m;
  }

  Var apply(Graph<S>& g, Var x) const {
    Var h = ops::glu_channels(g, lin_in.apply(g, x));
    h = conv.apply(g, h);
    return lin_out.apply(g, h);
  }
};

// Plain feed-forward ablation stand-in for Gcfn: Linear F -> 4F, GELU,
// Linear 4F -> F, so the two linear maps hold 8F^2 weights.
template <typename S>
struct Ffn {
  LinearLayer<S> lin_in;
  LinearLayer<S> lin_out;

  static Ffn create(ParamStore<S>& store, const std::string& name, std::int64_t F, Rng& rng) {
    Ffn m;
    m.lin_in = LinearLayer<S>::create(store, name + ".in", F, 4 * F, rng);
    m.lin_out = LinearLayer<S>::create(store, name + ".out", 4 * F, F, rng);
    return m;
  }

  Var apply(Graph<S>& g, Var x) const {
    return lin_out.apply(g, ops::gelu(g, lin_in.apply(g, x)));
  }
};

// ---------------------------------------------------------------------------
// Attention modules.
// ---------------------------------------------------------------------------

// Multi-head self-attention over frames with Q/K/V/output projections and a
// learned relative-position bias shared across the module's uses.
template <typename S>
struct MhsaRelative {
  LinearLayer<S> q, k, v, o;
  Parameter<S>* rel_table = nullptr;
  std::int64_t heads = 1;

  static MhsaRelative create(ParamStore<S>& store, const std::string& name, std::int64_t F,
                             std::int64_t heads, std::int64_t max_rel, Rng& rng) {
    MhsaRelative m;
    m.q = LinearLayer<S>::create(store, name + ".q", F, F, rng);
    m.k = LinearLayer<S>::create(store, name + ".k", F, F, rng);
    m.v = LinearLayer<S>::create(store, name + ".v", F, F, rng);
    m.o = LinearLayer<S>::create(store, name + ".o", F, F, rng);
    m.heads = heads;
    if (max_rel >= 0) {
      m.rel_table =
          store.add_constant(name + ".rel", {heads, 2 * max_rel + 1}, S(0), true, false);
    }
    return m;
  }

  Var apply(Graph<S>& g, Var x) const {
    Var a = ops::mhsa(g, q.apply(g, x), k.apply(g, x), v.apply(g, x),
                      rel_table ? g.param(*rel_table) : Var{}, heads);
    return o.apply(g, a);
  }
};

// Gated attention at reduced frame rate: average-pool by pool_factor, attend,
// upsample back, then reintroduce frame-level detail. The `full` mode gates
// with sigmoid(Linear(x)); `mul_no_gate` multiplies by x directly;
// `plain_ds_us` returns the upsampled attention output as is.
template <typename S>
struct Ega {
  MhsaRelative<S> attn;
  LinearLayer<S> gate;  // only created in full mode
  EgaMode mode = EgaMode::kFull;

  static Ega create(ParamStore<S>& store, const std::string& name, std::int64_t F,
                    std::int64_t heads, std::int64_t max_rel, EgaMode mode, Rng& rng) {
    Ega m;
    m.attn = MhsaRelative<S>::create(store, name + ".attn", F, heads, max_rel, rng);
    if (mode == EgaMode::kFull) m.gate = LinearLayer<S>::create(store, name + ".gate", F, F, rng);
    m.mode = mode;
    return m;
  }

  Var apply(Graph<S>& g, Var x, std::int64_t pool_factor) const {
    Var ds = ops::avg_pool(g, x, pool_factor);
    Var a = attn.apply(g, ds);
    Var up = ops::upsample_nearest(g, a, pool_factor);
    switch (mode) {
      case EgaMode::kPlainDsUs:
        return up;
      case EgaMode::kMulNoGate:
        return ops::mul(g, up, x);
      default:
        return ops::mul(g, up, ops::sigmoid(g, gate.apply(g, x)));
    }
  }
};

// Convolutional local attention: pointwise F -> 2F with GLU, depthwise conv
// with a large kernel (same length), pointwise F -> 2F with BN and GELU,
// pointwise 2F -> F.
template <typename S>
struct Cla {
  LinearLayer<S> pconv_in;
  DwConvLayer<S> conv;
  LinearLayer<S> pconv_mid;
  BatchNormLayer<S> bn;
  LinearLayer<S> pconv_out;

  static Cla create(ParamStore<S>& store, const std::string& name, std::int64_t F, std::int64_t K,
                    Rng& rng) {
    Cla m;
    m.pconv_in = LinearLayer<S>::create(store, name + ".pin", F, 2 * F, rng);
    m.conv = DwConvLayer<S>::create(store, name + ".conv", F, K, 1, (K - 1) / 2, (K - 1) / 2, rng);
    m.pconv_mid = LinearLayer<S>::create(store, name + ".pmid", F, 2 * F, rng);
    m.bn = BatchNormLayer<S>::create(store, name + ".bn", 2 * F);
    m.pconv_out = LinearLayer<S>::create(store, name + ".pout", 2 * F, F, rng);
    return m;
  }

  Var apply(Graph<S>& g, Var x) const {
    Var h = ops::glu_channels(g, pconv_in.apply(g, x));
    h = conv.apply(g, h);
    h = pconv_mid.apply(g, h);
    h = ops::gelu(g, bn.apply(g, h));
    return pconv_out.apply(g, h);
  }
};

// ---------------------------------------------------------------------------
// Composite blocks.
// ---------------------------------------------------------------------------

template <typename S>
struct GlobalBlock {
  ResidualWrap<S> wrap_attn;
  Ega<S> ega;
  ResidualWrap<S> wrap_ffn;
  Gcfn<S> ffn;

  static GlobalBlock create(ParamStore<S>& store, const std::string& name, const ModelConfig& cfg,
                            Rng& rng) {
    GlobalBlock b;
    b.wrap_attn =
        ResidualWrap<S>::create(store, name + ".r0", cfg.F, cfg.layerscale_init, cfg.dropout_p);
    b.ega = Ega<S>::create(store, name + ".ega", cfg.F, cfg.n_heads, cfg.max_rel_pos,
                           cfg.ega_mode, rng);
    b.wrap_ffn =
        ResidualWrap<S>::create(store, name + ".r1", cfg.F, cfg.layerscale_init, cfg.dropout_p);
    b.ffn = Gcfn<S>::create(store, name + ".ffn", cfg.F, rng);
    return b;
  }

  Var apply(Graph<S>& g, Var x, std::int64_t pool_factor) const {
    x = wrap_attn.apply(g, x, [&](Var u) { return ega.apply(g, u, pool_factor); });
    return wrap_ffn.apply(g, x, [&](Var u) { return ffn.apply(g, u); });
  }
};

template <typename S>
struct LocalBlock {
  ResidualWrap<S> wrap_attn;
  Cla<S> cla;
  ResidualWrap<S> wrap_ffn;
  Gcfn<S> ffn;

  static LocalBlock create(ParamStore<S>& store, const std::string& name, const ModelConfig& cfg,
                           Rng& rng) {
    LocalBlock b;
    b.wrap_attn =
        ResidualWrap<S>::create(store, name + ".r0", cfg.F, cfg.layerscale_init, cfg.dropout_p);
    b.cla = Cla<S>::create(store, name + ".cla", cfg.F, cfg.K, rng);
    b.wrap_ffn =
        ResidualWrap<S>::create(store, name + ".r1", cfg.F, cfg.layerscale_init, cfg.dropout_p);
    b.ffn = Gcfn<S>::create(store, name + ".ffn", cfg.F, rng);
    return b;
  }

  Var apply(Graph<S>& g, Var x) const {
    x = wrap_attn.apply(g, x, [&](Var u) { return cla.apply(g, u); });
    return wrap_ffn.apply(g, x, [&](Var u) { return ffn.apply(g, u); });
  }
};

// Mixes information across the parallel speaker streams at every frame:
// pre-norm attention over the speaker axis (no positional term), optionally
// followed by a shared feed-forward per stream. All projections are shared
// across speakers.
template <typename S>
struct CrossSpeakerBlock {
  LayerNormLayer<S> norm;
  LinearLayer<S> q, k, v, o;
  Parameter<S>* branch_scale = nullptr;
  ResidualWrap<S> wrap_ffn;
  Gcfn<S> ffn;
  std::int64_t heads = 1;
  double dropout_p = 0;
  bool has_ffn = true;

  static CrossSpeakerBlock create(ParamStore<S>& store, const std::string& name,
                                  const ModelConfig& cfg, Rng& rng) {
    CrossSpeakerBlock b;
    b.norm = LayerNormLayer<S>::create(store, name + ".ln", cfg.F);
    b.q = LinearLayer<S>::create(store, name + ".q", cfg.F, cfg.F, rng);
    b.k = LinearLayer<S>::create(store, name + ".k", cfg.F, cfg.F, rng);
    b.v = LinearLayer<S>::create(store, name + ".v", cfg.F, cfg.F, rng);
    b.o = LinearLayer<S>::create(store, name + ".o", cfg.F, cfg.F, rng);
    b.branch_scale = store.add_constant(name + ".scale", {cfg.F},
                                        static_cast<S>(cfg.layerscale_init), true, false);
    b.has_ffn = cfg.cs_ffn;
    if (b.has_ffn) {
      b.wrap_ffn =
          ResidualWrap<S>::create(store, name + ".r1", cfg.F, cfg.layerscale_init, cfg.dropout_p);
      b.ffn = Gcfn<S>::create(store, name + ".ffn", cfg.F, rng);
    }
    b.heads = cfg.n_heads;
    b.dropout_p = cfg.dropout_p;
    return b;
  }

  void apply(Graph<S>& g, std::vector<Var>& streams) const {
    const std::int64_t J = static_cast<std::int64_t>(streams.size());
    const std::int64_t F = g.val(streams[0]).dim(0);
    std::vector<Var> qs(streams.size()), ks(streams.size()), vs(streams.size());
    for (std::size_t j = 0; j < streams.size(); ++j) {
      Var u = norm.apply(g, streams[j]);
      qs[j] = q.apply(g, u);
      ks[j] = k.apply(g, u);
      vs[j] = v.apply(g, u);
    }
    Var a = ops::speaker_attention(g, ops::concat_rows(g, qs), ops::concat_rows(g, ks),
                                   ops::concat_rows(g, vs), J, heads);
    for (std::size_t j = 0; j < streams.size(); ++j) {
      Var aj = ops::slice_rows(g, a, static_cast<std::int64_t>(j) * F,
                               static_cast<std::int64_t>(j + 1) * F);
      aj = o.apply(g, aj);
      aj = ops::scale_channels(g, aj, g.param(*branch_scale));
      aj = ops::dropout(g, aj, dropout_p);
      streams[j] = ops::add(g, streams[j], aj);
    }
    if (has_ffn) {
      for (std::size_t j = 0; j < streams.size(); ++j) {
        streams[j] = wrap_ffn.apply(g, streams[j], [&](Var u) { return ffn.apply(g, u); });
      }
    }
  }
};

}  // namespace sepkit
