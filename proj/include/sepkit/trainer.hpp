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
#include <filesystem>
#include <limits>
#include <numeric>
#include <ostream>
#include <set>
#include <string>
#include <vector>

#include "sepkit/checkpoint.hpp"
#include "sepkit/config.hpp"
#include "sepkit/errors.hpp"
#include "sepkit/mixtures.hpp"
#include "sepkit/objectives.hpp"
#include "sepkit/optimizer.hpp"
#include "sepkit/separator.hpp"
#include "sepkit/stft.hpp"

namespace sepkit {

namespace trainer_detail {

template <typename S>
Tensor<S> to_tensor(const mixtures::Waveform& w) {
  Tensor<S> t({static_cast<std::int64_t>(w.size())});
  for (std::size_t i = 0; i < w.size(); ++i) t[i] = static_cast<S>(w[i]);
  return t;
}

template <typename S>
Tensor<S> cast_tensor(const Tensor<double>& x) {
  Tensor<S> t(x.shape());
  for (std::int64_t i = 0; i < x.numel(); ++i) t[i] = static_cast<S>(x[i]);
  return t;
}

}  // namespace trainer_detail

// Applies recorded batch-statistic updates in example order:
// running = (1-m) * running + m * batch.
template <typename S>
void apply_stat_updates(std::vector<typename Graph<S>::StatUpdate>& updates,
                        double momentum = 0.1) {
  for (auto& u : updates) {
    for (std::int64_t i = 0; i < u.mean.numel(); ++i) {
      u.running_mean->value[i] = static_cast<S>(
          (1.0 - momentum) * static_cast<double>(u.running_mean->value[i]) +
          momentum * static_cast<double>(u.mean[i]));
      u.running_var->value[i] = static_cast<S>(
          (1.0 - momentum) * static_cast<double>(u.running_var->value[i]) +
          momentum * static_cast<double>(u.var[i]));
    }
  }
  updates.clear();
}

template <typename S>
void apply_stat_updates(Graph<S>& g, double momentum = 0.1) {
  apply_stat_updates<S>(g.stat_updates(), momentum);
}

struct StepResult {
  double total = 0;        // mean multi-loss over the batch
  double final_loss = 0;   // mean final PIT term
  double lr = 0;
  double alpha = 0;
  double grad_norm = 0;    // pre-clip, post-averaging
  bool skipped = false;    // non-finite loss or gradient; no update applied
  std::string skip_reason;
};

// One logical training stream: owns the optimizer and schedule for a model
// and turns batches of mixture examples into parameter updates.
template <typename S>
class Trainer {
 public:
  Trainer(SeparatorModel<S>& model, const RunConfig& cfg)
      : model_(model),
        cfg_(cfg),
        opt_(model.params(), cfg.train),
        sched_(cfg.train),
        model_rng_(Rng::derive(cfg.train.seed, {0x7a31ull})) {}

  AdamW<S>& optimizer() { return opt_; }
  LrSchedule& schedule() { return sched_; }
  Rng& model_rng() { return model_rng_; }
  std::int64_t global_step() const { return global_step_; }
  void set_global_step(std::int64_t s) { global_step_ = s; }

  // Forward/backward over the batch with gradient accumulation, then clip
  // and update. A non-finite loss or gradient skips the whole batch,
  // including its running-statistic updates.
  StepResult step(const std::vector<mixtures::MixtureExample>& batch, std::int64_t epoch,
                  std::int64_t step_in_epoch, std::int64_t steps_per_epoch) {
    if (batch.empty()) throw DataError("train step: empty batch");
    StepResult res;
    res.lr = sched_.lr_at(epoch, step_in_epoch, steps_per_epoch);
    res.alpha = objectives::alpha_at(epoch, cfg_.loss);
    const bool want_aux = model_.has_aux_heads() && res.alpha > 0;

    model_.params().zero_grads();
    std::vector<typename Graph<S>::StatUpdate> pending_stats;
    for (const auto& ex : batch) {
      Graph<S> g(true, Rng(model_rng_.next_u64()));
      double total = 0, final_loss = 0;
      try {
        build_loss(g, ex, res.alpha, want_aux, &total, &final_loss);
      } catch (const NumericError& e) {
        total = std::numeric_limits<double>::quiet_NaN();
        res.skip_reason = std::string("non-finite forward: ") + e.what();
      }
      if (!std::isfinite(total)) {
        res.skipped = true;
        if (res.skip_reason.empty()) {
          res.skip_reason = "non-finite loss " + std::to_string(total);
        }
        model_.params().zero_grads();
        return res;
      }
      res.total += total / static_cast<double>(batch.size());
      res.final_loss += final_loss / static_cast<double>(batch.size());
      for (auto& u : g.stat_updates()) pending_stats.push_back(std::move(u));
    }

    const S inv = static_cast<S>(1.0 / static_cast<double>(batch.size()));
    ParamStore<S>& store = model_.params();
    for (std::size_t i = 0; i < store.size(); ++i) {
      if (store.at(i).trainable) store.at(i).grad.vec() *= inv;
    }
    res.grad_norm = clip_gradients(store, cfg_.train.grad_clip);
    if (!std::isfinite(res.grad_norm)) {
      res.skipped = true;
      res.skip_reason = "non-finite gradient norm";
      store.zero_grads();
      return res;
    }

    apply_stat_updates<S>(pending_stats);
    opt_.step(res.lr);
    ++global_step_;
    return res;
  }

  // Mean final PIT loss over a set of examples, in inference mode.
  double validate(const std::vector<mixtures::MixtureExample>& examples) {
    if (examples.empty()) throw DataError("validate: no examples");
    double sum = 0;
    for (const auto& ex : examples) {
      Graph<S> g(false, Rng(0), /*grad_enabled=*/false);
      Tensor<S> wave = trainer_detail::to_tensor<S>(ex.mixture);
      auto out = model_.forward(g, wave, {});
      std::vector<Var> refs, ests;
      for (std::size_t j = 0; j < ex.sources.size(); ++j) {
        refs.push_back(g.constant(trainer_detail::to_tensor<S>(ex.sources[j])));
        ests.push_back(out.estimates[j]);
      }
      auto pit = objectives::pit(g, refs, ests, cfg_.loss.tau, cfg_.loss.eps);
      sum += static_cast<double>(g.val(pit.loss)[0]);
    }
    return sum / static_cast<double>(examples.size());
  }

 private:
  // Builds the multi-loss for one example and backpropagates it.
  void build_loss(Graph<S>& g, const mixtures::MixtureExample& ex, double alpha, bool want_aux,
                  double* total, double* final_loss) {
    Tensor<S> wave = trainer_detail::to_tensor<S>(ex.mixture);
    ForwardOptions<S> fo;
    fo.want_aux = want_aux;
    auto out = model_.forward(g, wave, fo);

    std::vector<Var> refs, ests;
    for (std::size_t j = 0; j < ex.sources.size(); ++j) {
      refs.push_back(g.constant(trainer_detail::to_tensor<S>(ex.sources[j])));
      ests.push_back(out.estimates[j]);
    }

    std::vector<std::vector<Var>> aux_refs, aux_ests;
    if (want_aux) {
      if (cfg_.loss.aux_domain == AuxDomain::kTime) {
        for (const auto& stage : out.aux_estimates) {
          aux_refs.push_back(refs);
          aux_ests.push_back(stage);
        }
      } else {
        aux_mag_terms(g, ex, out, &aux_refs, &aux_ests);
      }
    }

    auto ml = objectives::multi_loss(g, refs, ests, aux_refs, aux_ests, alpha, cfg_.loss);
    *total = ml.total_value;
    *final_loss = ml.final_value;
    if (std::isfinite(ml.total_value)) g.backward(ml.total);
  }

  // Magnitude-domain auxiliary terms: reference spectrogram magnitudes per
  // speaker vs the model's per-stage magnitude maps brought to the
  // spectrogram frame rate with a fixed averaging matrix.
  void aux_mag_terms(Graph<S>& g, const mixtures::MixtureExample& ex,
                     const SeparatorOutputs<S>& out, std::vector<std::vector<Var>>* aux_refs,
                     std::vector<std::vector<Var>>* aux_ests) {
    const std::int64_t fft = cfg_.loss.stft_fft;
    const std::int64_t hop = cfg_.loss.stft_hop;
    std::vector<Var> mag_refs;
    std::int64_t stft_frames = 0;
    for (const auto& src : ex.sources) {
      Tensor<double> mag = stft_magnitude(src, fft, hop);
      stft_frames = mag.dim(1);
      mag_refs.push_back(g.constant(trainer_detail::cast_tensor<S>(mag)));
    }
    for (const auto& stage : out.aux_estimates) {
      const std::int64_t codec_frames = g.val(stage[0]).dim(1);
      Var align = g.constant(objectives::stft_frame_align<S>(
          codec_frames, model_.config().L, model_.config().H, stft_frames, fft, hop));
      std::vector<Var> ests;
      for (Var v : stage) ests.push_back(ops::matmul(g, v, align));
      aux_refs->push_back(mag_refs);
      aux_ests->push_back(std::move(ests));
    }
  }

  SeparatorModel<S>& model_;
  RunConfig cfg_;
  AdamW<S> opt_;
  LrSchedule sched_;
  Rng model_rng_;
  std::int64_t global_step_ = 0;
};

// ---------------------------------------------------------------------------
// Deterministic manifest-driven epochs.
// ---------------------------------------------------------------------------

// Batched row order for one epoch: a seeded shuffle chunked into full
// batches, incomplete tail dropped.
inline std::vector<std::vector<std::size_t>> plan_epoch(std::size_t rows, std::int64_t batch_size,
                                                        std::uint64_t seed, std::int64_t epoch) {
  if (batch_size < 1) throw ConfigError("plan_epoch: batch_size must be >= 1");
  std::vector<std::size_t> order(rows);
  std::iota(order.begin(), order.end(), 0);
  Rng rng = Rng::derive(seed, {0xe90cull, static_cast<std::uint64_t>(epoch)});
  for (std::size_t i = rows; i > 1; --i) {
    const std::size_t j = static_cast<std::size_t>(rng.uniform_index(i));
    std::swap(order[i - 1], order[j]);
  }
  std::vector<std::vector<std::size_t>> batches;
  const std::size_t b = static_cast<std::size_t>(batch_size);
  for (std::size_t k = 0; k + b <= rows; k += b) {
    batches.emplace_back(order.begin() + static_cast<std::ptrdiff_t>(k),
                         order.begin() + static_cast<std::ptrdiff_t>(k + b));
  }
  return batches;
}

// Loads manifest rows and crops every waveform of each example to
// segment_samples. Training crops are random but derived from
// (seed, epoch, row); evaluation crops take the leading segment.
inline std::vector<mixtures::MixtureExample> load_batch(
    const mixtures::Manifest& man, const std::vector<std::size_t>& rows, const std::string& root,
    std::uint64_t seed, std::int64_t sample_rate, std::int64_t segment_samples, bool train,
    std::int64_t epoch = 0) {
  std::vector<mixtures::MixtureExample> batch;
  for (std::size_t row : rows) {
    mixtures::MixtureExample ex = mixtures::load_example(man, row, root, seed, sample_rate);
    Rng crop_rng = Rng::derive(
        seed, {0xc309ull, static_cast<std::uint64_t>(epoch), static_cast<std::uint64_t>(row)});
    const auto policy =
        train ? mixtures::SegmentPolicy::kRandom : mixtures::SegmentPolicy::kLeading;
    // One offset draw shared by mixture and sources keeps them aligned.
    const std::int64_t n = static_cast<std::int64_t>(ex.mixture.size());
    std::int64_t off = 0;
    if (train && n > segment_samples) {
      off = static_cast<std::int64_t>(
          crop_rng.uniform_index(static_cast<std::uint64_t>(n - segment_samples + 1)));
    }
    const auto crop = [&](mixtures::Waveform& w) {
      if (n > segment_samples) {
        w = mixtures::Waveform(w.begin() + off, w.begin() + off + segment_samples);
      } else {
        mixtures::Segment s = mixtures::segment(w, segment_samples, policy);
        w = std::move(s.samples);
      }
    };
    crop(ex.mixture);
    for (auto& s : ex.sources) crop(s);
    batch.push_back(std::move(ex));
  }
  return batch;
}

// ---------------------------------------------------------------------------
// Full training loop.
// ---------------------------------------------------------------------------

struct FitOptions {
  std::string data_root;
  mixtures::Manifest train_manifest;
  mixtures::Manifest val_manifest;
  std::ostream* log = nullptr;          // metrics lines, one per step/epoch
  std::string checkpoint_path;          // empty: no checkpoints
  std::string resume_from;              // empty: fresh run
  std::int64_t max_epochs_override = 0; // 0: use config
};

struct FitResult {
  std::int64_t epochs_run = 0;
  std::int64_t steps_run = 0;
  double best_val = std::numeric_limits<double>::infinity();
  std::int64_t skipped_batches = 0;
};

// Serial epoch loop: deterministic batch plan, per-step metrics lines,
// validation + plateau schedule once per epoch, optional checkpointing and
// resume. The metrics log is line-oriented `key=value` text.
template <typename S>
FitResult fit(SeparatorModel<S>& model, const RunConfig& cfg, const FitOptions& opt) {
  Trainer<S> trainer(model, cfg);
  const std::int64_t rate = cfg.data.sample_rate;
  const std::uint64_t seed = cfg.train.seed;
  std::int64_t first_epoch = 0;
  FitResult res;

  // Source pool for dynamic mixing: every distinct source in the manifest.
  std::vector<mixtures::Waveform> dm_pool;
  if (cfg.train.dm) {
    std::set<std::string> names;
    for (const auto& r : opt.train_manifest.rows) {
      names.insert(r.src1);
      names.insert(r.src2);
    }
    for (const auto& n : names) {
      dm_pool.push_back(mixtures::detail::read_wave(
          (std::filesystem::path(opt.data_root) / n).string(), rate));
    }
  }

  if (!opt.resume_from.empty()) {
    checkpoint::TrainerCounters c;
    checkpoint::load(opt.resume_from, model.params(), &trainer.optimizer(), &c);
    first_epoch = c.epoch;
    trainer.set_global_step(c.global_step);
    trainer.schedule().restore(c.decays, c.best_val, c.since_improve);
    trainer.model_rng().set_state(c.model_rng_state);
    res.best_val = c.best_val;
  }

  std::vector<mixtures::MixtureExample> val_examples;
  for (std::size_t i = 0; i < opt.val_manifest.rows.size(); ++i) {
    val_examples.push_back(load_batch(opt.val_manifest, {i}, opt.data_root, seed, rate,
                                      cfg.train.segment_samples, false)[0]);
  }

  const std::int64_t max_epochs =
      opt.max_epochs_override > 0 ? opt.max_epochs_override : cfg.train.max_epochs;
  for (std::int64_t epoch = first_epoch; epoch < max_epochs; ++epoch) {
    auto plan = plan_epoch(opt.train_manifest.rows.size(), cfg.train.batch_size, seed, epoch);
    std::int64_t steps_per_epoch =
        cfg.train.steps_per_epoch > 0 ? cfg.train.steps_per_epoch
                                      : static_cast<std::int64_t>(plan.size());
    if (steps_per_epoch == 0) throw DataError("fit: manifest too small for one batch");

    Rng dm_rng = Rng::derive(seed, {0xd912ull, static_cast<std::uint64_t>(epoch)});
    for (std::int64_t s = 0; s < steps_per_epoch; ++s) {
      std::vector<mixtures::MixtureExample> batch;
      if (cfg.train.dm) {
        mixtures::DynamicMixConfig dmc;
        dmc.segment_samples = cfg.train.segment_samples;
        for (std::int64_t b = 0; b < cfg.train.batch_size; ++b) {
          batch.push_back(mixtures::dynamic_mix(dm_pool, dm_rng, dmc));
        }
      } else {
        batch = load_batch(opt.train_manifest, plan[static_cast<std::size_t>(s % plan.size())],
                           opt.data_root, seed, rate, cfg.train.segment_samples, true, epoch);
      }
      StepResult sr = trainer.step(batch, epoch, s, steps_per_epoch);
      ++res.steps_run;
      if (sr.skipped) ++res.skipped_batches;
      if (opt.log) {
        (*opt.log) << "epoch=" << epoch << " step=" << s << " lr=" << sr.lr
                   << " alpha=" << sr.alpha << " total=" << sr.total
                   << " final=" << sr.final_loss << " grad_norm=" << sr.grad_norm
                   << (sr.skipped ? " skipped=" + sr.skip_reason : "") << "\n";
      }
    }

    const double val_loss = trainer.validate(val_examples);
    const bool decayed = trainer.schedule().observe(val_loss, epoch);
    res.best_val = std::min(res.best_val, val_loss);
    res.epochs_run = epoch + 1;
    if (opt.log) {
      (*opt.log) << "epoch=" << epoch << " val_loss=" << val_loss
                 << " decays=" << trainer.schedule().decays() << " decayed=" << (decayed ? 1 : 0)
                 << "\n";
    }

    if (!opt.checkpoint_path.empty() &&
        ((epoch + 1) % std::max<std::int64_t>(1, cfg.train.checkpoint_every) == 0 ||
         epoch + 1 == max_epochs)) {
      checkpoint::TrainerCounters c;
      c.epoch = epoch + 1;
      c.global_step = trainer.global_step();
      c.decays = trainer.schedule().decays();
      c.best_val = trainer.schedule().best_val();
      c.since_improve = trainer.schedule().since_improve();
      c.model_rng_state = trainer.model_rng().state();
      checkpoint::save(opt.checkpoint_path, cfg.to_kv().to_text(), model.params(),
                       &trainer.optimizer(), &c);
    }
  }
  return res;
}

}  // namespace sepkit
