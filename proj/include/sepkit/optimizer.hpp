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

#include <cmath>
#include <cstdint>
#include <limits>
#include <string>
#include <vector>

#include "sepkit/config.hpp"
#include "sepkit/errors.hpp"
#include "sepkit/params.hpp"
#include "sepkit/tensor.hpp"

namespace sepkit {

// Global L2 gradient clipping across every trainable parameter. Returns the
// pre-clip norm; if it exceeds max_norm all gradients are scaled by
// max_norm / norm so the direction is preserved.
template <typename S>
double clip_gradients(ParamStore<S>& store, double max_norm) {
  if (max_norm <= 0) throw ConfigError("clip_gradients: max_norm must be positive");
  double sq = 0;
  for (std::size_t i = 0; i < store.size(); ++i) {
    Parameter<S>& p = store.at(i);
    if (!p.trainable) continue;
    for (std::int64_t k = 0; k < p.grad.numel(); ++k) {
      const double gv = static_cast<double>(p.grad[k]);
      sq += gv * gv;
    }
  }
  const double norm = std::sqrt(sq);
  if (norm > max_norm && std::isfinite(norm)) {
    const S scale = static_cast<S>(max_norm / norm);
    for (std::size_t i = 0; i < store.size(); ++i) {
      Parameter<S>& p = store.at(i);
      if (p.trainable) p.grad.vec() *= scale;
    }
  }
  return norm;
}

// Adaptive-moment optimizer with decoupled weight decay. Decay multiplies
// the parameter directly by (1 - lr * wd) and is skipped for parameters
// flagged decay = false (biases, norm affines, residual scales).
template <typename S>
class AdamW {
 public:
  AdamW(ParamStore<S>& store, const TrainConfig& cfg)
      : store_(&store),
        beta1_(cfg.beta1),
        beta2_(cfg.beta2),
        eps_(cfg.adam_eps),
        weight_decay_(cfg.weight_decay) {
    for (std::size_t i = 0; i < store.size(); ++i) {
      Parameter<S>& p = store.at(i);
      if (!p.trainable) continue;
      Slot s;
      s.param = &p;
      s.m = Tensor<S>::zeros(p.value.shape());
      s.v = Tensor<S>::zeros(p.value.shape());
      slots_.push_back(std::move(s));
    }
  }

  // One update from the gradients currently held in the store.
  void step(double lr) {
    ++t_;
    const double bc1 = 1.0 - std::pow(beta1_, static_cast<double>(t_));
    const double bc2 = 1.0 - std::pow(beta2_, static_cast<double>(t_));
    for (Slot& s : slots_) {
      Parameter<S>& p = *s.param;
      for (std::int64_t k = 0; k < p.value.numel(); ++k) {
        const double g = static_cast<double>(p.grad[k]);
        const double m = beta1_ * static_cast<double>(s.m[k]) + (1.0 - beta1_) * g;
        const double v = beta2_ * static_cast<double>(s.v[k]) + (1.0 - beta2_) * g * g;
        s.m[k] = static_cast<S>(m);
        s.v[k] = static_cast<S>(v);
        double upd = lr * (m / bc1) / (std::sqrt(v / bc2) + eps_);
        if (p.decay) upd += lr * weight_decay_ * static_cast<double>(p.value[k]);
        p.value[k] = static_cast<S>(static_cast<double>(p.value[k]) - upd);
      }
    }
  }

  std::int64_t step_count() const { return t_; }
  void set_step_count(std::int64_t t) { t_ = t; }

  std::size_t slot_count() const { return slots_.size(); }
  const std::string& slot_name(std::size_t i) const { return slots_[i].param->name; }
  Tensor<S>& slot_m(std::size_t i) { return slots_[i].m; }
  Tensor<S>& slot_v(std::size_t i) { return slots_[i].v; }

 private:
  struct Slot {
    Parameter<S>* param;
    Tensor<S> m;
    Tensor<S> v;
  };

  ParamStore<S>* store_;
  std::vector<Slot> slots_;
  double beta1_, beta2_, eps_, weight_decay_;
  std::int64_t t_ = 0;
};

// Learning-rate state machine: a linear warmup ramp from 0 to lr0 across
// epoch 0, then lr0 scaled by plateau_factor once per plateau trigger. A
// trigger fires after `patience` consecutive validation epochs without
// strict improvement. In dynamic-mixing mode the plateau logic stays
// dormant for the first dm_hold_epochs epochs so the rate holds constant.
class LrSchedule {
 public:
  explicit LrSchedule(const TrainConfig& cfg)
      : lr0_(cfg.lr0),
        warmup_epochs_(cfg.warmup_epochs),
        factor_(cfg.plateau_factor),
        patience_(cfg.plateau_patience),
        dm_(cfg.dm),
        dm_hold_epochs_(cfg.dm_hold_epochs) {}

  double lr_at(std::int64_t epoch, std::int64_t step_in_epoch,
               std::int64_t steps_per_epoch) const {
    double base = lr0_ * std::pow(factor_, static_cast<double>(decays_));
    if (epoch < warmup_epochs_ && steps_per_epoch > 0) {
      base *= static_cast<double>(epoch * steps_per_epoch + step_in_epoch) /
              static_cast<double>(warmup_epochs_ * steps_per_epoch);
    }
    return base;
  }

  // Reports one epoch's validation loss. Returns true when the call
  // triggered a decay. Any strict improvement resets the patience counter.
  bool observe(double val_loss, std::int64_t epoch) {
    if (val_loss < best_val_) {
      best_val_ = val_loss;
      since_improve_ = 0;
      return false;
    }
    if (dm_ && epoch < dm_hold_epochs_) return false;
    ++since_improve_;
    if (since_improve_ >= patience_) {
      ++decays_;
      since_improve_ = 0;
      return true;
    }
    return false;
  }

  std::int64_t decays() const { return decays_; }
  double best_val() const { return best_val_; }
  std::int64_t since_improve() const { return since_improve_; }
  void restore(std::int64_t decays, double best_val, std::int64_t since_improve) {
    decays_ = decays;
    best_val_ = best_val;
    since_improve_ = since_improve;
  }

 private:
  double lr0_;
  std::int64_t warmup_epochs_;
  double factor_;
  std::int64_t patience_;
  bool dm_;
  std::int64_t dm_hold_epochs_;
  std::int64_t decays_ = 0;
  double best_val_ = std::numeric_limits<double>::infinity();
  std::int64_t since_improve_ = 0;
};

}  // namespace sepkit
