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

// Acceptance gate. Usage: acceptance <1..10|all> [--artifacts DIR]
//
// Each criterion prints exactly one `criterion N: PASS|FAIL` line plus
// indented evidence lines. Criterion 7 trains the desk-scale models and
// leaves its corpus and checkpoints under the artifacts directory; criterion
// 9 consumes that model, so it must run after criterion 7.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iostream>
#include <map>
#include <numeric>
#include <sstream>
#include <string>
#include <vector>

#include "sepkit/blocks.hpp"
#include "sepkit/checkpoint.hpp"
#include "sepkit/codec.hpp"
#include "sepkit/config.hpp"
#include "sepkit/evaluation.hpp"
#include "sepkit/mixtures.hpp"
#include "sepkit/objectives.hpp"
#include "sepkit/optimizer.hpp"
#include "sepkit/separator.hpp"
#include "sepkit/trainer.hpp"
#include "testutil.hpp"

namespace sepkit {
namespace {

namespace fs = std::filesystem;

// Regression bound for criterion 6: the bring-up run converged in 160 steps,
// pinned here with the agreed +25% slack.
constexpr std::int64_t kOverfitStepBound = 200;
constexpr std::int64_t kOverfitStepCap = 2000;

struct Checker {
  bool ok = true;
  std::ostringstream detail;

  void expect(bool cond, const std::string& what) {
    detail << "  " << (cond ? "ok" : "FAILED") << ": " << what << "\n";
    ok = ok && cond;
  }
  void note(const std::string& what) { detail << "  " << what << "\n"; }
};

Tensor<float> to_tensor(const std::vector<double>& wave) {
  Tensor<float> t({static_cast<std::int64_t>(wave.size())});
  for (std::size_t i = 0; i < wave.size(); ++i) t[static_cast<std::int64_t>(i)] =
      static_cast<float>(wave[i]);
  return t;
}

std::vector<double> to_dvec(const Tensor<float>& t) {
  std::vector<double> out(static_cast<std::size_t>(t.numel()));
  for (std::int64_t i = 0; i < t.numel(); ++i) out[static_cast<std::size_t>(i)] = t[i];
  return out;
}

Tensor<float> random_ftensor(std::vector<std::int64_t> shape, Rng& rng, double scale = 1.0) {
  Tensor<float> t(std::move(shape));
  for (std::int64_t i = 0; i < t.numel(); ++i) t[i] = static_cast<float>(scale * rng.normal());
  return t;
}

// A fixed two-speaker scene: band-limited tone stacks in disjoint bands so a
// small model can pull the sources apart.
mixtures::MixtureExample fixed_pair(std::int64_t n, std::int64_t rate) {
  auto band_wave = [&](double lo, double hi, std::uint64_t seed) {
    Rng rng(seed);
    std::vector<double> w(static_cast<std::size_t>(n), 0.0);
    for (int k = 0; k < 6; ++k) {
      const double f = rng.uniform(lo, hi);
      const double phase = rng.uniform(0.0, 2.0 * 3.14159265358979323846);
      const double amp = 0.05 + 0.05 * rng.uniform(0.0, 1.0);
      for (std::int64_t i = 0; i < n; ++i) {
        w[static_cast<std::size_t>(i)] +=
            amp * std::sin(2.0 * 3.14159265358979323846 * f * i / double(rate) + phase);
      }
    }
    return w;
  };
  return mixtures::mix_at_snr(band_wave(250, 900, 11), band_wave(1400, 2400, 12), 0.0);
}

ModelConfig micro_model_config() {
  ModelConfig cfg;
  cfg.F = 16;
  cfg.F_o = 32;
  cfg.L = 16;
  cfg.H = 8;
  cfg.R = 2;
  cfg.B_E = 1;
  cfg.B_D = 1;
  cfg.K = 9;
  cfg.n_heads = 2;
  cfg.J = 2;
  cfg.dropout_p = 0;
  cfg.layerscale_init = 0.1;
  cfg.max_rel_pos = 16;
  return cfg;
}

// Best-assignment per-speaker si_snr of a model's separation of `ex`.
std::vector<double> separation_quality(const SeparatorModel<float>& model,
                                       const mixtures::MixtureExample& ex) {
  const auto ests = model.separate(to_tensor(ex.mixture));
  std::vector<std::vector<double>> table(2, std::vector<double>(2));
  for (int j = 0; j < 2; ++j) {
    for (int k = 0; k < 2; ++k) {
      table[j][k] = objectives::si_snr_value(ex.sources[j], to_dvec(ests[k]));
    }
  }
  const double straight = table[0][0] + table[1][1];
  const double swapped = table[0][1] + table[1][0];
  if (straight >= swapped) return {table[0][0], table[1][1]};
  return {table[0][1], table[1][0]};
}

// ---------------------------------------------------------------------------
// 1. Objective correctness.
// ---------------------------------------------------------------------------
bool criterion_1(Checker& c) {
  const std::vector<double> ref{1, 1, 1, 1};
  const std::vector<double> est{1, 1, 1, 0};
  const double hand = objectives::si_snr_value(ref, est);
  c.expect(std::fabs(hand - 4.771) <= 1e-3,
           "hand case scores " + std::to_string(hand) + " dB (want 4.771 +- 1e-3)");

  c.expect(objectives::si_snr_value(ref, ref) == 30.0, "perfect estimate clips at tau = 30");
  Rng rng(5);
  std::vector<double> r(64), e(64);
  for (auto& v : r) v = rng.normal();
  for (std::size_t i = 0; i < e.size(); ++i) e[i] = r[i] + 0.2 * rng.normal();
  const double base = objectives::si_snr_value(r, e);
  double worst = 0;
  // Estimate scalings stay two decades wide; far below that the eps amplitude
  // guard (1e-8 against signal amplitudes of order one) becomes visible.
  for (double a : {0.03, 5.0}) {
    for (double b : {40.0, 0.25}) {
      std::vector<double> ra(r), eb(e);
      for (auto& v : ra) v *= a;
      for (auto& v : eb) v *= b;
      worst = std::max(worst, std::fabs(objectives::si_snr_value(ra, eb) - base));
    }
  }
  c.expect(worst <= 1e-6,
           "scale invariance in both arguments (worst drift " + std::to_string(worst) + " dB)");
  return c.ok;
}

// ---------------------------------------------------------------------------
// 2. PIT equals exhaustive enumeration.
// ---------------------------------------------------------------------------
bool criterion_2(Checker& c) {
  for (int J : {2, 3}) {
    int agree = 0;
    double worst_loss_gap = 0;
    for (int trial = 0; trial < 100; ++trial) {
      Rng rng(1000 * J + trial);
      std::vector<std::vector<double>> refs(J, std::vector<double>(48));
      std::vector<std::vector<double>> ests(J, std::vector<double>(48));
      for (auto& v : refs) {
        for (auto& x : v) x = rng.normal();
      }
      for (int j = 0; j < J; ++j) {
        for (int i = 0; i < 48; ++i) ests[j][i] = refs[j][i] + 0.8 * rng.normal();
      }

      Graph<double> g(false, Rng(0));
      std::vector<Var> ref_vars, est_vars;
      for (int j = 0; j < J; ++j) {
        Tensor<double> rt({48}), et({48});
        for (int i = 0; i < 48; ++i) {
          rt[i] = refs[j][i];
          et[i] = ests[j][i];
        }
        ref_vars.push_back(g.constant(rt));
        est_vars.push_back(g.constant(et));
      }
      const auto pit = objectives::pit(g, ref_vars, est_vars, 30.0, 1e-8);

      // Independent oracle: walk assignments in lexicographic order, keep
      // the first one with the strictly largest si_snr sum.
      std::vector<int> perm(J), best_perm(J);
      std::iota(perm.begin(), perm.end(), 0);
      double best_sum = -1e300;
      std::vector<int> p(perm);
      do {
        double s = 0;
        for (int j = 0; j < J; ++j) s += objectives::si_snr_value(refs[j], ests[p[j]]);
        if (s > best_sum) {
          best_sum = s;
          best_perm = p;
        }
      } while (std::next_permutation(p.begin(), p.end()));

      if (pit.permutation == best_perm) ++agree;
      worst_loss_gap =
          std::max(worst_loss_gap, std::fabs(g.val(pit.loss)[0] - (-best_sum)));
    }
    c.expect(agree == 100, "J=" + std::to_string(J) + ": exact assignment agreement on " +
                               std::to_string(agree) + "/100 instances");
    c.expect(worst_loss_gap <= 1e-9, "J=" + std::to_string(J) + ": worst loss gap " +
                                         std::to_string(worst_loss_gap));
  }
  return c.ok;
}

// ---------------------------------------------------------------------------
// 3. Finite-difference gradient suite at F=8, T=8, 64-bit.
// ---------------------------------------------------------------------------
bool criterion_3(Checker& c) {
  using test::grad_check_inputs;
  using test::grad_check_params;
  using test::random_tensor;

  ModelConfig cfg;
  cfg.F = 8;
  cfg.F_o = 16;
  cfg.n_heads = 2;
  cfg.K = 5;
  cfg.max_rel_pos = 4;
  cfg.dropout_p = 0;
  cfg.layerscale_init = 0.1;
  cfg.cs_ffn = true;
  cfg.J = 2;

  Rng data_rng(77);
  const Tensor<double> xt = random_tensor({8, 8}, data_rng, 0.5);

  auto weighted = [](Graph<double>& g, Var x, std::uint64_t seed) {
    Rng rng(seed);
    Var w = g.constant(test::random_tensor(g.val(x).shape(), rng));
    return ops::dot(g, x, w);
  };

  auto run_block = [&](const std::string& name, auto&& build_loss, ParamStore<double>& store,
                       auto&& input_fn) {
    auto loss_fn = [&](bool want_grad) {
      Graph<double> lg(false, Rng(0), want_grad);
      Var loss = build_loss(lg, lg.input(xt));
      if (want_grad) lg.backward(loss);
      return lg.val(loss)[0];
    };
    const auto pres = grad_check_params(store, loss_fn);
    c.expect(pres.max_rel_err < 1e-4,
             name + " parameter gradients (max rel err " + std::to_string(pres.max_rel_err) +
                 " at " + pres.worst + ")");
    const auto ires = grad_check_inputs(input_fn, {xt});
    c.expect(ires.max_rel_err < 1e-4,
             name + " input gradients (max rel err " + std::to_string(ires.max_rel_err) + ")");
  };

  {
    ParamStore<double> store;
    Rng rng(1);
    auto blk = Gcfn<double>::create(store, "g", 8, rng);
    auto loss = [&](Graph<double>& g, Var x) { return weighted(g, blk.apply(g, x), 3); };
    run_block("gcfn", loss, store, [&](Graph<double>& g, const std::vector<Var>& xs) {
      return weighted(g, blk.apply(g, xs[0]), 3);
    });
  }
  {
    ParamStore<double> store;
    Rng rng(2);
    auto blk = Ega<double>::create(store, "e", 8, 2, 4, EgaMode::kFull, rng);
    for (std::int64_t i = 0; i < blk.attn.rel_table->value.numel(); ++i) {
      blk.attn.rel_table->value[i] = 0.2 * rng.normal();
    }
    auto loss = [&](Graph<double>& g, Var x) { return weighted(g, blk.apply(g, x, 2), 4); };
    run_block("ega", loss, store, [&](Graph<double>& g, const std::vector<Var>& xs) {
      return weighted(g, blk.apply(g, xs[0], 2), 4);
    });
  }
  {
    ParamStore<double> store;
    Rng rng(3);
    auto blk = Cla<double>::create(store, "c", 8, 5, rng);
    auto loss = [&](Graph<double>& g, Var x) { return weighted(g, blk.apply(g, x), 5); };
    run_block("cla", loss, store, [&](Graph<double>& g, const std::vector<Var>& xs) {
      return weighted(g, blk.apply(g, xs[0]), 5);
    });
  }
  {
    ParamStore<double> store;
    Rng rng(4);
    auto blk = CrossSpeakerBlock<double>::create(store, "cs", cfg, rng);
    const Tensor<double> x2 = random_tensor({8, 8}, data_rng, 0.5);
    auto loss_fn = [&](bool want_grad) {
      Graph<double> lg(false, Rng(0), want_grad);
      std::vector<Var> streams{lg.input(xt), lg.input(x2)};
      blk.apply(lg, streams);
      Var loss = ops::add(lg, weighted(lg, streams[0], 6), weighted(lg, streams[1], 7));
      if (want_grad) lg.backward(loss);
      return lg.val(loss)[0];
    };
    const auto pres = grad_check_params(store, loss_fn);
    c.expect(pres.max_rel_err < 1e-4,
             "cross-speaker parameter gradients (max rel err " +
                 std::to_string(pres.max_rel_err) + " at " + pres.worst + ")");
    const auto ires = grad_check_inputs(
        [&](Graph<double>& g, const std::vector<Var>& xs) {
          std::vector<Var> streams{xs[0], xs[1]};
          blk.apply(g, streams);
          return ops::add(g, weighted(g, streams[0], 6), weighted(g, streams[1], 7));
        },
        {xt, x2});
    c.expect(ires.max_rel_err < 1e-4,
             "cross-speaker input gradients (max rel err " + std::to_string(ires.max_rel_err) +
                 ")");
  }
  {
    ParamStore<double> store;
    Rng rng(5);
    auto blk = GlobalBlock<double>::create(store, "gb", cfg, rng);
    for (std::int64_t i = 0; i < blk.ega.attn.rel_table->value.numel(); ++i) {
      blk.ega.attn.rel_table->value[i] = 0.2 * rng.normal();
    }
    auto loss = [&](Graph<double>& g, Var x) { return weighted(g, blk.apply(g, x, 2), 8); };
    run_block("global assembly", loss, store, [&](Graph<double>& g, const std::vector<Var>& xs) {
      return weighted(g, blk.apply(g, xs[0], 2), 8);
    });
  }
  {
    ParamStore<double> store;
    Rng rng(6);
    auto blk = LocalBlock<double>::create(store, "lb", cfg, rng);
    auto loss = [&](Graph<double>& g, Var x) { return weighted(g, blk.apply(g, x), 9); };
    run_block("local assembly", loss, store, [&](Graph<double>& g, const std::vector<Var>& xs) {
      return weighted(g, blk.apply(g, xs[0]), 9);
    });
  }
  return c.ok;
}

// ---------------------------------------------------------------------------
// 4. Structural invariants.
// ---------------------------------------------------------------------------
bool criterion_4(Checker& c) {
  // LayerScale at zero turns every residual block into an exact identity.
  {
    ModelConfig cfg;
    cfg.F = 8;
    cfg.n_heads = 2;
    cfg.K = 5;
    cfg.max_rel_pos = 4;
    cfg.dropout_p = 0;
    cfg.layerscale_init = 0.0;
    cfg.cs_ffn = true;
    ParamStore<float> store;
    Rng rng(9);
    auto gb = GlobalBlock<float>::create(store, "gb", cfg, rng);
    auto lb = LocalBlock<float>::create(store, "lb", cfg, rng);
    auto cs = CrossSpeakerBlock<float>::create(store, "cs", cfg, rng);

    Rng drng(10);
    const Tensor<float> x = random_ftensor({8, 12}, drng);
    const Tensor<float> x2 = random_ftensor({8, 12}, drng);
    Graph<float> g(false, Rng(0));
    bool exact = true;
    const Tensor<float>& yg = g.val(gb.apply(g, g.input(x), 2));
    const Tensor<float>& yl = g.val(lb.apply(g, g.input(x)));
    for (std::int64_t i = 0; i < x.numel(); ++i) {
      exact = exact && yg[i] == x[i] && yl[i] == x[i];
    }
    std::vector<Var> streams{g.input(x), g.input(x2)};
    cs.apply(g, streams);
    const Tensor<float>& c0 = g.val(streams[0]);
    const Tensor<float>& c1 = g.val(streams[1]);
    for (std::int64_t i = 0; i < x.numel(); ++i) {
      exact = exact && c0[i] == x[i] && c1[i] == x2[i];
    }
    c.expect(exact, "layerscale-zero identity is exact for global, local, cross-speaker blocks");
  }

  // Speaker-permutation equivariance end-to-end for both shared-decoder modes.
  for (DecoderMode mode : {DecoderMode::kEssd, DecoderMode::kSepre}) {
    ModelConfig cfg = micro_model_config();
    cfg.decoder_mode = mode;
    SeparatorModel<float> model(cfg, 31, false);
    Rng drng(12);
    const Tensor<float> wave = random_ftensor({4000}, drng, 0.1);

    auto run = [&](const std::vector<int>* perm) {
      Graph<float> g(false, Rng(0), false);
      ForwardOptions<float> fo;
      fo.split_permutation = perm;
      auto out = model.forward(g, wave, fo);
      std::vector<Tensor<float>> ests;
      for (Var v : out.estimates) ests.push_back(g.val(v));
      return ests;
    };
    const auto base = run(nullptr);
    const std::vector<int> swap{1, 0};
    const auto swapped = run(&swap);
    double worst = 0;
    for (std::int64_t i = 0; i < base[0].numel(); ++i) {
      worst = std::max<double>(worst, std::fabs(base[0][i] - swapped[1][i]));
      worst = std::max<double>(worst, std::fabs(base[1][i] - swapped[0][i]));
    }
    c.expect(worst <= 1e-4, std::string(mode == DecoderMode::kEssd ? "essd" : "sepre") +
                                " permutation equivariance (worst |delta| " +
                                std::to_string(worst) + ")");
  }

  // Frame-count and padding laws across all five published presets.
  {
    bool laws = true;
    for (const char* name : {"T", "S", "B", "M", "L"}) {
      const RunConfig rc = RunConfig::from_kv(preset_config(name));
      const std::int64_t L = rc.model.L, H = rc.model.H, R = rc.model.R;
      for (std::int64_t n : {8000, 12345, 16000}) {
        const auto plan = pad_for_depth(n, L, H, R);
        const std::int64_t mult = std::int64_t(1) << R;
        laws = laws && plan.frames % mult == 0;
        laws = laws && plan.padded_samples == (plan.frames - 1) * H + L;
        laws = laws && plan.padded_samples >= n;
        if (plan.frames > mult) {
          laws = laws && (plan.frames - mult - 1) * H + L < n;  // minimality
        }
      }
    }
    c.expect(laws, "padding divisibility, coverage, and minimality for presets T, S, B, M, L");
  }

  // J output waveforms of exactly the input length.
  {
    bool lengths = true;
    for (std::int64_t J : {2, 3}) {
      ModelConfig cfg = micro_model_config();
      cfg.J = J;
      SeparatorModel<float> model(cfg, 5, false);
      Rng drng(13);
      const auto outs = model.separate(random_ftensor({5000}, drng, 0.1));
      lengths = lengths && static_cast<std::int64_t>(outs.size()) == J;
      for (const auto& w : outs) lengths = lengths && w.numel() == 5000;
    }
    c.expect(lengths, "separate() returns J waveforms of exactly the input length (J = 2, 3)");
  }
  return c.ok;
}

// ---------------------------------------------------------------------------
// 5. Parameter accounting.
// ---------------------------------------------------------------------------
bool criterion_5(Checker& c) {
  for (std::int64_t F : {8, 64}) {
    ParamStore<double> store;
    Rng rng(1);
    auto gated = Gcfn<double>::create(store, "g", F, rng);
    auto plain = Ffn<double>::create(store, "f", F, rng);
    const std::int64_t gated_w = gated.lin_in.w->value.numel() + gated.lin_out.w->value.numel();
    const std::int64_t plain_w = plain.lin_in.w->value.numel() + plain.lin_out.w->value.numel();
    c.expect(gated_w == 9 * F * F, "gated feed-forward linear stages hold 9F^2 weights at F=" +
                                       std::to_string(F));
    c.expect(plain_w == 8 * F * F, "plain feed-forward linear stages hold 8F^2 weights at F=" +
                                       std::to_string(F));
  }

  const RunConfig rc = RunConfig::from_kv(preset_config("B"));
  const auto report = evaluation::count_params<float>(rc.model, false);
  const double target = 14.2e6;
  const double rel = std::fabs(report.param_count / target - 1.0);
  c.expect(rel <= 0.15, "preset B inference parameters " + std::to_string(report.param_count) +
                            " within 15% of 14.2M (off by " + std::to_string(100 * rel) + "%)");
  c.note("per-module decomposition:");
  for (const auto& [module, count] : report.param_breakdown) {
    c.note("  " + module + " = " + std::to_string(count));
  }
  return c.ok;
}

// ---------------------------------------------------------------------------
// 6. Overfit convergence on one fixed pair.
// ---------------------------------------------------------------------------
bool criterion_6(Checker& c, const fs::path& artifacts) {
  const auto ex = fixed_pair(8000, 8000);

  RunConfig rc;
  rc.model = micro_model_config();
  rc.train.lr0 = 1e-3;
  rc.train.warmup_epochs = 0;
  rc.train.batch_size = 1;
  rc.train.segment_samples = 8000;
  rc.train.seed = 17;

  SeparatorModel<float> model(rc.model, rc.train.seed, true);
  Trainer<float> trainer(model, rc);

  std::int64_t achieved = -1;
  std::vector<double> last_quality{-1e9, -1e9};
  for (std::int64_t s = 0; s < kOverfitStepCap; ++s) {
    const auto sr = trainer.step({ex}, 0, s, kOverfitStepCap);
    if (sr.skipped) {
      c.expect(false, "step " + std::to_string(s) + " skipped: " + sr.skip_reason);
      return c.ok;
    }
    if ((s + 1) % 20 == 0 || s + 1 == kOverfitStepCap) {
      last_quality = separation_quality(model, ex);
      if (std::min(last_quality[0], last_quality[1]) >= 20.0) {
        achieved = s + 1;
        break;
      }
    }
  }

  c.expect(achieved > 0, "per-speaker si_snr reached 20 dB within " +
                             std::to_string(kOverfitStepCap) + " steps (spk0 " +
                             std::to_string(last_quality[0]) + " dB, spk1 " +
                             std::to_string(last_quality[1]) + " dB)");
  if (achieved > 0) {
    c.note("achieved at step " + std::to_string(achieved) + " (regression bound " +
           std::to_string(kOverfitStepBound) + ")");
    c.expect(achieved <= kOverfitStepBound,
             "achieved step count within the pinned regression bound");
    fs::create_directories(artifacts / "c6");
    checkpoint::save((artifacts / "c6" / "overfit.bin").string(), rc.to_kv().to_text(),
                     model.params());
  }
  return c.ok;
}

// ---------------------------------------------------------------------------
// 7. Desk-scale generalization, sepre vs late_split.
// ---------------------------------------------------------------------------
RunConfig desk_run_config(const std::string& corpus, DecoderMode mode) {
  KvConfig kv = preset_config("tiny-desk");
  RunConfig rc = RunConfig::from_kv(kv);
  rc.model.decoder_mode = mode;
  rc.train.max_epochs = 30;
  rc.train.batch_size = 4;
  rc.train.segment_samples = 8000;
  rc.train.seed = 7;
  rc.data.data_root = corpus;
  return rc;
}

double mean_test_si_snri(const SeparatorModel<float>& model, const mixtures::Manifest& manifest,
                         const std::string& root, std::vector<double>* per_example = nullptr) {
  double sum = 0;
  for (std::size_t i = 0; i < manifest.rows.size(); ++i) {
    const auto ex = mixtures::load_example(manifest, i, root, 0, 8000);
    const auto ests = model.separate(to_tensor(ex.mixture));
    std::vector<std::vector<double>> est_d;
    for (const auto& e : ests) est_d.push_back(to_dvec(e));
    const auto m = evaluation::si_snri(ex.mixture, ex.sources, est_d);
    sum += m.si_snri;
    if (per_example) per_example->push_back(m.si_snri);
  }
  return sum / static_cast<double>(manifest.rows.size());
}

bool criterion_7(Checker& c, const fs::path& artifacts) {
  const fs::path dir = artifacts / "c7";
  const fs::path corpus = dir / "corpus";
  fs::create_directories(corpus);

  mixtures::CorpusConfig cc;
  cc.n_sources = 64;
  cc.train_rows = 256;
  cc.val_rows = 16;
  cc.test_rows = 16;
  mixtures::build_corpus(corpus.string(), cc, 42);
  c.note("corpus: 64 sources, speaker-disjoint splits, 256/16/16 rows");

  const auto train_m = mixtures::Manifest::load((corpus / "train.lst").string());
  const auto val_m = mixtures::Manifest::load((corpus / "val.lst").string());
  const auto test_m = mixtures::Manifest::load((corpus / "test.lst").string());

  std::map<std::string, double> means;
  for (DecoderMode mode : {DecoderMode::kSepre, DecoderMode::kLateSplit}) {
    const std::string tag = mode == DecoderMode::kSepre ? "sepre" : "late";
    const RunConfig rc = desk_run_config(corpus.string(), mode);
    SeparatorModel<float> model(rc.model, rc.train.seed, true);

    std::ofstream log(dir / ("train_" + tag + ".log"));
    FitOptions fo;
    fo.data_root = corpus.string();
    fo.train_manifest = train_m;
    fo.val_manifest = val_m;
    fo.log = &log;
    fo.checkpoint_path = (dir / (tag + ".bin")).string();
    const FitResult fr = fit(model, rc, fo);
    c.note(tag + ": epochs " + std::to_string(fr.epochs_run) + ", steps " +
           std::to_string(fr.steps_run) + ", skipped " + std::to_string(fr.skipped_batches) +
           ", best val " + std::to_string(fr.best_val));

    means[tag] = mean_test_si_snri(model, test_m, corpus.string());
    c.note(tag + ": held-out mean si_snri " + std::to_string(means[tag]) + " dB");
  }

  std::ofstream mk(dir / "metrics.kv");
  mk << "sepre_si_snri=" << means["sepre"] << "\nlate_si_snri=" << means["late"] << "\n";

  c.expect(means["sepre"] >= 10.0, "sepre held-out si_snri >= 10 dB");
  c.expect(means["sepre"] > means["late"],
           "sepre strictly exceeds late_split at matched budget (" +
               std::to_string(means["sepre"]) + " vs " + std::to_string(means["late"]) + " dB)");
  return c.ok;
}

// ---------------------------------------------------------------------------
// 8. Schedule fidelity.
// ---------------------------------------------------------------------------
bool criterion_8(Checker& c) {
  LossConfig lc;  // published defaults: 0.4, start epoch 100, factor 0.8, every 5
  c.expect(objectives::alpha_at(0, lc) == 0.4 && objectives::alpha_at(100, lc) == 0.4 &&
               objectives::alpha_at(104, lc) == 0.4,
           "alpha holds at 0.4 through epoch 104");
  c.expect(std::fabs(objectives::alpha_at(105, lc) - 0.32) < 1e-12 &&
               std::fabs(objectives::alpha_at(109, lc) - 0.32) < 1e-12,
           "alpha decays 0.4 -> 0.32 at epoch 105 and holds to 109");
  c.expect(std::fabs(objectives::alpha_at(110, lc) - 0.256) < 1e-12,
           "alpha takes the second 0.8 decay at epoch 110");

  TrainConfig tc;
  tc.lr0 = 1e-3;
  tc.warmup_epochs = 1;
  tc.plateau_factor = 0.8;
  tc.plateau_patience = 3;
  LrSchedule sched(tc);
  c.expect(sched.lr_at(0, 0, 100) == 0.0, "warmup starts at zero");
  c.expect(sched.lr_at(0, 50, 100) == 0.5 * tc.lr0, "warmup is linear across epoch 0");
  c.expect(sched.lr_at(1, 0, 100) == tc.lr0, "warmup ends at lr0");

  sched.observe(10.0, 1);
  sched.observe(9.0, 2);   // improvement
  sched.observe(9.5, 3);   // stall 1
  sched.observe(9.4, 4);   // stall 2
  const bool third_triggers = sched.observe(9.3, 5);  // stall 3 -> decay
  c.expect(third_triggers && sched.decays() == 1 && sched.lr_at(6, 0, 100) == 0.8 * tc.lr0,
           "one 0.8 decay per 3-epoch plateau");
  sched.observe(8.0, 6);  // improvement resets patience
  sched.observe(8.5, 7);
  sched.observe(8.4, 8);
  c.expect(sched.decays() == 1, "strict improvement resets the plateau counter");
  const bool again = sched.observe(8.3, 9);
  c.expect(again && sched.lr_at(10, 0, 100) == 0.8 * 0.8 * tc.lr0,
           "second plateau compounds to 0.64 lr0");
  return c.ok;
}

// ---------------------------------------------------------------------------
// 9. Probe trend on the criterion-7 model.
// ---------------------------------------------------------------------------
bool criterion_9(Checker& c, const fs::path& artifacts) {
  const fs::path ckpt = artifacts / "c7" / "sepre.bin";
  const fs::path corpus = artifacts / "c7" / "corpus";
  if (!fs::exists(ckpt)) {
    c.expect(false, "criterion 7 artifacts missing at " + ckpt.string() + "; run criterion 7 first");
    return c.ok;
  }

  const RunConfig rc = RunConfig::from_kv(KvConfig::parse_text(checkpoint::read_config(ckpt.string())));
  SeparatorModel<float> model(rc.model, 1, rc.loss.alpha0 > 0,
                              rc.loss.aux_domain == AuxDomain::kStftMag ? rc.loss.stft_fft / 2 + 1
                                                                        : 0);
  checkpoint::load(ckpt.string(), model.params());

  const auto test_m = mixtures::Manifest::load((corpus / "test.lst").string());
  fs::create_directories(artifacts / "c9");
  std::ofstream table(artifacts / "c9" / "probe_means.csv");
  table << "mixture,tap1,tap2,tap3,tap4\n";

  int holds = 0;
  for (std::size_t i = 0; i < test_m.rows.size(); ++i) {
    const auto ex = mixtures::load_example(test_m, i, corpus.string(), 0, 8000);
    const auto rows = evaluation::cosine_probe(model, to_tensor(ex.mixture));
    const auto means = evaluation::mean_by_tap(rows);
    table << i << "," << means.at(1) << "," << means.at(2) << "," << means.at(3) << ","
          << means.at(4) << "\n";
    if (means.at(3) < means.at(1)) ++holds;
    if (i == 0) {
      std::ofstream full(artifacts / "c9" / "probe_mixture0.csv");
      full << evaluation::probe_csv(rows);
    }
  }
  const double frac = double(holds) / double(test_m.rows.size());
  c.note("emitted probe_means.csv (" + std::to_string(test_m.rows.size()) + " rows) and a full "
         "per-frame table for mixture 0");
  c.expect(frac >= 0.8, "tap-3 mean < tap-1 mean on " + std::to_string(holds) + "/" +
                            std::to_string(test_m.rows.size()) + " held-out mixtures");
  return c.ok;
}

// ---------------------------------------------------------------------------
// 10. Reproducibility.
// ---------------------------------------------------------------------------
bool criterion_10(Checker& c, const fs::path& artifacts) {
  const fs::path dir = artifacts / "c10";
  const fs::path corpus = dir / "corpus";
  fs::create_directories(corpus);
  mixtures::CorpusConfig cc;
  cc.n_sources = 16;
  cc.source_seconds = 2.0;
  cc.mix_seconds = 1.0;
  cc.train_rows = 8;
  cc.val_rows = 2;
  cc.test_rows = 2;
  mixtures::build_corpus(corpus.string(), cc, 21);

  RunConfig rc;
  rc.model = micro_model_config();
  rc.train.max_epochs = 2;
  rc.train.batch_size = 2;
  rc.train.segment_samples = 2000;
  rc.train.seed = 13;
  rc.data.data_root = corpus.string();

  const auto train_m = mixtures::Manifest::load((corpus / "train.lst").string());
  const auto val_m = mixtures::Manifest::load((corpus / "val.lst").string());

  auto run_once = [&](std::ostringstream& log) {
    SeparatorModel<float> model(rc.model, rc.train.seed, true);
    FitOptions fo;
    fo.data_root = corpus.string();
    fo.train_manifest = train_m;
    fo.val_manifest = val_m;
    fo.log = &log;
    return fit(model, rc, fo);
  };
  std::ostringstream log_a, log_b;
  const FitResult ra = run_once(log_a);
  const FitResult rb = run_once(log_b);
  const std::string text_a = log_a.str();
  const std::string text_b = log_b.str();
  c.note("run A: epochs " + std::to_string(ra.epochs_run) + ", steps " +
         std::to_string(ra.steps_run));
  c.expect(!text_a.empty() && text_a == text_b,
           "identical seeds and config produce identical 2-epoch metrics logs (" +
               std::to_string(std::count(text_a.begin(), text_a.end(), '\n')) + " lines)");
  c.expect(ra.best_val == rb.best_val, "best validation losses agree bitwise");

  // Checkpoint round-trip: params and counters survive save/load bitwise.
  SeparatorModel<float> trained(rc.model, rc.train.seed, true);
  {
    FitOptions fo;
    fo.data_root = corpus.string();
    fo.train_manifest = train_m;
    fo.val_manifest = val_m;
    fit(trained, rc, fo);
  }
  checkpoint::TrainerCounters counters;
  counters.epoch = 2;
  counters.global_step = 8;
  counters.best_val = ra.best_val;
  counters.data_rng_state = 0x1234;
  counters.model_rng_state = 0x5678;

  fs::create_directories(dir);
  const std::string p1 = (dir / "round1.bin").string();
  const std::string p2 = (dir / "round2.bin").string();
  const std::string cfg_text = rc.to_kv().to_text();
  checkpoint::save<float>(p1, cfg_text, trained.params(), nullptr, &counters);

  SeparatorModel<float> reloaded(rc.model, 999, true);  // init overwritten by the load
  checkpoint::TrainerCounters counters2;
  checkpoint::load<float>(p1, reloaded.params(), nullptr, &counters2);
  checkpoint::save<float>(p2, cfg_text, reloaded.params(), nullptr, &counters2);

  std::ifstream f1(p1, std::ios::binary), f2(p2, std::ios::binary);
  std::ostringstream b1, b2;
  b1 << f1.rdbuf();
  b2 << f2.rdbuf();
  c.expect(!b1.str().empty() && b1.str() == b2.str(),
           "checkpoint save/load round-trips bitwise (" + std::to_string(b1.str().size()) +
               " bytes)");
  return c.ok;
}

int run(int argc, char** argv) {
  std::string which = argc > 1 ? argv[1] : "all";
  fs::path artifacts = "acceptance_artifacts";
  for (int i = 2; i + 1 < argc; ++i) {
    if (std::string(argv[i]) == "--artifacts") artifacts = argv[i + 1];
  }
  fs::create_directories(artifacts);

  const std::map<int, std::function<bool(Checker&)>> simple = {
      {1, criterion_1}, {2, criterion_2}, {3, criterion_3},
      {4, criterion_4}, {5, criterion_5}, {8, criterion_8},
  };
  const std::map<int, std::function<bool(Checker&, const fs::path&)>> with_artifacts = {
      {6, criterion_6}, {7, criterion_7}, {9, criterion_9}, {10, criterion_10},
  };

  std::vector<int> order;
  if (which == "all") {
    for (int n = 1; n <= 10; ++n) order.push_back(n);
  } else {
    try {
      const int n = std::stoi(which);
      if (n < 1 || n > 10) throw std::out_of_range(which);
      order.push_back(n);
    } catch (const std::exception&) {
      std::cerr << "usage: acceptance <1..10|all> [--artifacts DIR]\n";
      return 2;
    }
  }

  bool all_ok = true;
  for (int n : order) {
    Checker c;
    bool ok = false;
    try {
      ok = simple.count(n) ? simple.at(n)(c) : with_artifacts.at(n)(c, artifacts);
    } catch (const std::exception& e) {
      c.expect(false, std::string("unhandled exception: ") + e.what());
      ok = false;
    }
    std::cout << "criterion " << n << ": " << (ok ? "PASS" : "FAIL") << "\n" << c.detail.str();
    all_ok = all_ok && ok;
  }
  return all_ok ? 0 : 1;
}

}  // namespace
}  // namespace sepkit

int main(int argc, char** argv) { return sepkit::run(argc, argv); }
