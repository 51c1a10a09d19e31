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

#include "sepkit/blocks.hpp"

#include <cmath>
#include <cstdint>
#include <vector>

#include <gtest/gtest.h>

#include "sepkit/config.hpp"
#include "sepkit/graph.hpp"
#include "sepkit/ops.hpp"
#include "sepkit/params.hpp"
#include "sepkit/rng.hpp"
#include "sepkit/tensor.hpp"
#include "testutil.hpp"

namespace sepkit {
namespace {

using test::grad_check_params;
using test::random_tensor;

// Reduces a tensor node to a scalar with fixed random weights so every output
// coordinate influences the loss.
Var weighted_sum(Graph<double>& g, Var x, std::uint64_t seed) {
  Rng rng(seed);
  Var w = g.constant(random_tensor(g.val(x).shape(), rng));
  return ops::dot(g, x, w);
}

void expect_tensor_near(const Tensor<double>& a, const Tensor<double>& b, double tol) {
  ASSERT_TRUE(a.same_shape(b)) << a.shape_str() << " vs " << b.shape_str();
  double worst = 0;
  for (std::int64_t i = 0; i < a.numel(); ++i) worst = std::max(worst, std::fabs(a[i] - b[i]));
  EXPECT_LE(worst, tol);
}

ModelConfig small_config() {
  ModelConfig cfg;
  cfg.F = 8;
  cfg.F_o = 16;
  cfg.n_heads = 2;
  cfg.K = 5;
  cfg.max_rel_pos = 3;
  cfg.dropout_p = 0;
  cfg.layerscale_init = 0.5;
  return cfg;
}

TEST(ResidualWrap, MatchesExplicitForm) {
  ParamStore<double> store;
  Rng rng(11);
  auto wrap = ResidualWrap<double>::create(store, "r", 6, 0.3, 0.0);
  Graph<double> g(false, Rng(0));
  Var x = g.input(random_tensor({6, 5}, rng));
  Var y = wrap.apply(g, x, [&](Var u) { return ops::gelu(g, u); });

  Var ref = ops::add(
      g, x,
      ops::scale_channels(g, ops::gelu(g, wrap.norm.apply(g, x)), g.param(*wrap.branch_scale)));
  expect_tensor_near(g.val(y), g.val(ref), 0.0);
}

TEST(ResidualWrap, ZeroScaleIsIdentityEvenWithDropout) {
  ParamStore<double> store;
  Rng rng(12);
  auto wrap = ResidualWrap<double>::create(store, "r", 4, 0.0, 0.5);
  Graph<double> g(true, Rng(99));
  Tensor<double> xt = random_tensor({4, 7}, rng);
  Var y = wrap.apply(g, g.input(xt), [&](Var u) { return ops::gelu(g, u); });
  expect_tensor_near(g.val(y), xt, 0.0);
}

TEST(Gcfn, LinearStageWeightCount) {
  for (std::int64_t F : {8, 128}) {
    ParamStore<double> store;
    Rng rng(1);
    auto ffn = Gcfn<double>::create(store, "ffn", F, rng);
    const std::int64_t linear_weights = ffn.lin_in.w->value.numel() + ffn.lin_out.w->value.numel();
    EXPECT_EQ(linear_weights, 9 * F * F);
    EXPECT_EQ(ffn.conv.w->value.numel(), 3 * F * 3);
  }
}

TEST(Ffn, LinearStageWeightCountAndShape) {
  for (std::int64_t F : {8, 128}) {
    ParamStore<double> store;
    Rng rng(1);
    auto ffn = Ffn<double>::create(store, "ffn", F, rng);
    EXPECT_EQ(ffn.lin_in.w->value.numel() + ffn.lin_out.w->value.numel(), 8 * F * F);
  }
  ParamStore<double> store;
  Rng rng(3);
  auto ffn = Ffn<double>::create(store, "ffn", 6, rng);
  Tensor<double> xt = random_tensor({6, 7}, rng, 0.5);
  Graph<double> g(false, Rng(0));
  Var y = ffn.apply(g, g.input(xt));
  EXPECT_EQ(g.val(y).dim(0), 6);
  EXPECT_EQ(g.val(y).dim(1), 7);

  auto loss_fn = [&](bool want_grad) {
    Graph<double> lg(false, Rng(0), want_grad);
    Var out = ffn.apply(lg, lg.input(xt));
    Var loss = weighted_sum(lg, out, 5);
    if (want_grad) lg.backward(loss);
    return lg.val(loss)[0];
  };
  auto res = grad_check_params(store, loss_fn);
  EXPECT_LT(res.max_rel_err, 1e-4) << res.worst;
}

TEST(Gcfn, PreservesLengthAndPassesGradientCheck) {
  ParamStore<double> store;
  Rng rng(21);
  auto ffn = Gcfn<double>::create(store, "ffn", 6, rng);
  Tensor<double> xt = random_tensor({6, 7}, rng, 0.5);

  Graph<double> g(false, Rng(0));
  Var y = ffn.apply(g, g.input(xt));
  EXPECT_EQ(g.val(y).dim(0), 6);
  EXPECT_EQ(g.val(y).dim(1), 7);

  auto loss_fn = [&](bool want_grad) {
    Graph<double> lg(false, Rng(0), want_grad);
    Var out = ffn.apply(lg, lg.input(xt));
    Var loss = weighted_sum(lg, out, 5);
    if (want_grad) lg.backward(loss);
    return lg.val(loss)[0];
  };
  auto res = grad_check_params(store, loss_fn);
  EXPECT_LT(res.max_rel_err, 1e-4) << res.worst;
}

TEST(MhsaRelative, AttentionRowsSumToOne) {
  // With the value path forced to ones and the output projection set to the
  // identity, the module emits the per-head attention row sums, which must be
  // exactly one for any logits and any relative-position table.
  ParamStore<double> store;
  Rng rng(31);
  auto attn = MhsaRelative<double>::create(store, "m", 8, 2, 3, rng);
  attn.v.w->value.fill(0.0);
  attn.v.b->value.fill(1.0);
  attn.o.w->value.fill(0.0);
  for (std::int64_t i = 0; i < 8; ++i) attn.o.w->value.at(i, i) = 1.0;
  attn.o.b->value.fill(0.0);
  for (std::int64_t i = 0; i < attn.rel_table->value.numel(); ++i) {
    attn.rel_table->value[i] = rng.normal();
  }

  Graph<double> g(false, Rng(0));
  Var y = attn.apply(g, g.input(random_tensor({8, 5}, rng)));
  expect_tensor_near(g.val(y), Tensor<double>::full({8, 5}, 1.0), 1e-12);
}

TEST(MhsaRelative, ParamGradients) {
  ParamStore<double> store;
  Rng rng(32);
  auto attn = MhsaRelative<double>::create(store, "m", 8, 2, 2, rng);
  for (std::int64_t i = 0; i < attn.rel_table->value.numel(); ++i) {
    attn.rel_table->value[i] = 0.3 * rng.normal();
  }
  Tensor<double> xt = random_tensor({8, 6}, rng, 0.7);
  auto loss_fn = [&](bool want_grad) {
    Graph<double> lg(false, Rng(0), want_grad);
    Var loss = weighted_sum(lg, attn.apply(lg, lg.input(xt)), 9);
    if (want_grad) lg.backward(loss);
    return lg.val(loss)[0];
  };
  auto res = grad_check_params(store, loss_fn);
  EXPECT_LT(res.max_rel_err, 1e-4) << res.worst;
}

TEST(Ega, ModeSemantics) {
  ParamStore<double> store;
  Rng rng(41);
  auto full = Ega<double>::create(store, "f", 8, 2, 3, EgaMode::kFull, rng);
  auto plain = Ega<double>::create(store, "p", 8, 2, 3, EgaMode::kPlainDsUs, rng);
  auto mul = Ega<double>::create(store, "m", 8, 2, 3, EgaMode::kMulNoGate, rng);
  Tensor<double> xt = random_tensor({8, 8}, rng);

  Graph<double> g(false, Rng(0));
  Var x = g.input(xt);

  auto resampled_attention = [&](const Ega<double>& m, std::int64_t pool) {
    Var ds = ops::avg_pool(g, x, pool);
    return ops::upsample_nearest(g, m.attn.apply(g, ds), pool);
  };

  Var y_full = full.apply(g, x, 2);
  Var want_full =
      ops::mul(g, resampled_attention(full, 2), ops::sigmoid(g, full.gate.apply(g, x)));
  expect_tensor_near(g.val(y_full), g.val(want_full), 0.0);

  Var y_plain = plain.apply(g, x, 2);
  expect_tensor_near(g.val(y_plain), g.val(resampled_attention(plain, 2)), 0.0);

  Var y_mul = mul.apply(g, x, 2);
  Var want_mul = ops::mul(g, resampled_attention(mul, 2), x);
  expect_tensor_near(g.val(y_mul), g.val(want_mul), 0.0);

  // Pool factor 1 keeps the frame rate and reduces to plain gated attention.
  Var y_one = full.apply(g, x, 1);
  Var want_one = ops::mul(g, full.attn.apply(g, x), ops::sigmoid(g, full.gate.apply(g, x)));
  expect_tensor_near(g.val(y_one), g.val(want_one), 0.0);
}

TEST(Ega, SaturatedGateSilencesOutput) {
  ParamStore<double> store;
  Rng rng(42);
  auto m = Ega<double>::create(store, "e", 8, 2, 3, EgaMode::kFull, rng);
  m.gate.w->value.fill(0.0);
  m.gate.b->value.fill(-100.0);
  Graph<double> g(false, Rng(0));
  Var y = m.apply(g, g.input(random_tensor({8, 8}, rng)), 2);
  double worst = 0;
  for (std::int64_t i = 0; i < g.val(y).numel(); ++i) {
    worst = std::max(worst, std::fabs(g.val(y)[i]));
  }
  EXPECT_LT(worst, 1e-30);
}

TEST(Cla, DeltaKernelReducesToPointwisePipeline) {
  ParamStore<double> store;
  Rng rng(51);
  auto m = Cla<double>::create(store, "c", 6, 5, rng);
  m.conv.w->value.fill(0.0);
  for (std::int64_t c = 0; c < 6; ++c) m.conv.w->value.at(c, 2) = 1.0;
  m.conv.b->value.fill(0.0);

  Graph<double> g(false, Rng(0));
  Var x = g.input(random_tensor({6, 9}, rng));
  Var y = m.apply(g, x);

  Var h = ops::glu_channels(g, m.pconv_in.apply(g, x));
  h = m.pconv_mid.apply(g, h);
  h = ops::gelu(g, m.bn.apply(g, h));
  Var want = m.pconv_out.apply(g, h);
  expect_tensor_near(g.val(y), g.val(want), 0.0);
}

TEST(Cla, ReceptiveFieldIsBoundedByKernel) {
  // In inference mode the normalization statistics are frozen, so the whole
  // module acts frame-locally with radius (K-1)/2.
  ParamStore<double> store;
  Rng rng(52);
  const std::int64_t K = 5;
  auto m = Cla<double>::create(store, "c", 6, K, rng);
  Tensor<double> xt = random_tensor({6, 21}, rng);

  auto run = [&](const Tensor<double>& in) {
    Graph<double> g(false, Rng(0));
    return g.val(m.apply(g, g.input(in)));
  };
  Tensor<double> base = run(xt);
  Tensor<double> bumped = xt;
  const std::int64_t t0 = 10;
  for (std::int64_t c = 0; c < 6; ++c) bumped.at(c, t0) += 1.0;
  Tensor<double> out = run(bumped);

  const std::int64_t radius = (K - 1) / 2;
  double inside_change = 0;
  for (std::int64_t t = 0; t < 21; ++t) {
    double col = 0;
    for (std::int64_t c = 0; c < 6; ++c) col = std::max(col, std::fabs(out.at(c, t) - base.at(c, t)));
    if (std::llabs(t - t0) > radius) {
      EXPECT_EQ(col, 0.0) << "column " << t << " outside the kernel window moved";
    } else {
      inside_change = std::max(inside_change, col);
    }
  }
  EXPECT_GT(inside_change, 1e-6);
}

TEST(Cla, ParamGradientsInTrainingMode) {
  ParamStore<double> store;
  Rng rng(53);
  auto m = Cla<double>::create(store, "c", 6, 5, rng);
  Tensor<double> xt = random_tensor({6, 9}, rng, 0.8);
  auto loss_fn = [&](bool want_grad) {
    Graph<double> lg(true, Rng(0), want_grad);
    Var loss = weighted_sum(lg, m.apply(lg, lg.input(xt)), 13);
    if (want_grad) lg.backward(loss);
    return lg.val(loss)[0];
  };
  auto res = grad_check_params(store, loss_fn);
  EXPECT_LT(res.max_rel_err, 1e-4) << res.worst;
}

TEST(GlobalBlock, IdentityAtZeroBranchScale) {
  ModelConfig cfg = small_config();
  cfg.layerscale_init = 0;
  ParamStore<double> store;
  Rng rng(61);
  auto block = GlobalBlock<double>::create(store, "g", cfg, rng);
  Graph<double> g(false, Rng(0));
  Tensor<double> xt = random_tensor({cfg.F, 8}, rng);
  Var y = block.apply(g, g.input(xt), 2);
  expect_tensor_near(g.val(y), xt, 0.0);
}

TEST(GlobalBlock, ParamGradients) {
  ModelConfig cfg = small_config();
  ParamStore<double> store;
  Rng rng(62);
  auto block = GlobalBlock<double>::create(store, "g", cfg, rng);
  Tensor<double> xt = random_tensor({cfg.F, 8}, rng, 0.6);
  auto loss_fn = [&](bool want_grad) {
    Graph<double> lg(false, Rng(0), want_grad);
    Var loss = weighted_sum(lg, block.apply(lg, lg.input(xt), 2), 17);
    if (want_grad) lg.backward(loss);
    return lg.val(loss)[0];
  };
  auto res = grad_check_params(store, loss_fn);
  EXPECT_LT(res.max_rel_err, 1e-4) << res.worst;
}

TEST(LocalBlock, ParamGradients) {
  ModelConfig cfg = small_config();
  cfg.F = 6;
  ParamStore<double> store;
  Rng rng(63);
  auto block = LocalBlock<double>::create(store, "l", cfg, rng);
  Tensor<double> xt = random_tensor({cfg.F, 8}, rng, 0.6);
  auto loss_fn = [&](bool want_grad) {
    Graph<double> lg(true, Rng(0), want_grad);
    Var loss = weighted_sum(lg, block.apply(lg, lg.input(xt)), 19);
    if (want_grad) lg.backward(loss);
    return lg.val(loss)[0];
  };
  auto res = grad_check_params(store, loss_fn);
  EXPECT_LT(res.max_rel_err, 1e-4) << res.worst;
}

TEST(CrossSpeaker, PermutationEquivariance) {
  ModelConfig cfg = small_config();
  ParamStore<double> store;
  Rng rng(71);
  auto block = CrossSpeakerBlock<double>::create(store, "cs", cfg, rng);

  std::vector<Tensor<double>> xs;
  for (int j = 0; j < 3; ++j) xs.push_back(random_tensor({cfg.F, 5}, rng));

  auto run = [&](const std::vector<int>& order) {
    Graph<double> g(false, Rng(0));
    std::vector<Var> streams;
    for (int j : order) streams.push_back(g.input(xs[static_cast<std::size_t>(j)]));
    block.apply(g, streams);
    std::vector<Tensor<double>> out;
    for (Var s : streams) out.push_back(g.val(s));
    return out;
  };

  auto base = run({0, 1, 2});
  auto perm = run({2, 0, 1});
  expect_tensor_near(perm[0], base[2], 1e-12);
  expect_tensor_near(perm[1], base[0], 1e-12);
  expect_tensor_near(perm[2], base[1], 1e-12);
}

TEST(CrossSpeaker, IdenticalStreamsStayIdentical) {
  ModelConfig cfg = small_config();
  ParamStore<double> store;
  Rng rng(72);
  auto block = CrossSpeakerBlock<double>::create(store, "cs", cfg, rng);
  Tensor<double> xt = random_tensor({cfg.F, 6}, rng);

  Graph<double> g(false, Rng(0));
  std::vector<Var> streams = {g.input(xt), g.input(xt)};
  block.apply(g, streams);
  expect_tensor_near(g.val(streams[0]), g.val(streams[1]), 1e-13);
  // The mixing step must still do something: output differs from input.
  double moved = 0;
  for (std::int64_t i = 0; i < xt.numel(); ++i) {
    moved = std::max(moved, std::fabs(g.val(streams[0])[i] - xt[i]));
  }
  EXPECT_GT(moved, 1e-6);
}

TEST(CrossSpeaker, ParamGradients) {
  ModelConfig cfg = small_config();
  ParamStore<double> store;
  Rng rng(73);
  auto block = CrossSpeakerBlock<double>::create(store, "cs", cfg, rng);
  Tensor<double> x0 = random_tensor({cfg.F, 4}, rng, 0.7);
  Tensor<double> x1 = random_tensor({cfg.F, 4}, rng, 0.7);
  auto loss_fn = [&](bool want_grad) {
    Graph<double> lg(false, Rng(0), want_grad);
    std::vector<Var> streams = {lg.input(x0), lg.input(x1)};
    block.apply(lg, streams);
    Var loss = ops::add(lg, weighted_sum(lg, streams[0], 23), weighted_sum(lg, streams[1], 29));
    if (want_grad) lg.backward(loss);
    return lg.val(loss)[0];
  };
  auto res = grad_check_params(store, loss_fn);
  EXPECT_LT(res.max_rel_err, 1e-4) << res.worst;
}

TEST(CrossSpeaker, FfnToggleControlsParameters) {
  ModelConfig cfg = small_config();
  cfg.cs_ffn = false;
  ParamStore<double> store;
  Rng rng(74);
  auto block = CrossSpeakerBlock<double>::create(store, "cs", cfg, rng);
  EXPECT_EQ(store.find("cs.ffn.in.w"), nullptr);
  EXPECT_FALSE(block.has_ffn);

  ParamStore<double> store_on;
  cfg.cs_ffn = true;
  Rng rng2(74);
  CrossSpeakerBlock<double>::create(store_on, "cs", cfg, rng2);
  EXPECT_NE(store_on.find("cs.ffn.in.w"), nullptr);
  EXPECT_GT(store_on.count_trainable(), store.count_trainable());
}

}  // namespace
}  // namespace sepkit
