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
#include <map>
#include <memory>
#include <string>
#include <vector>

#include "sepkit/errors.hpp"
#include "sepkit/rng.hpp"
#include "sepkit/tensor.hpp"

namespace sepkit {

// One named array owned by a model: either a trainable weight or a
// persistent buffer (running statistics). `decay` marks whether weight decay
// applies; biases, norm affine terms, and residual scales are excluded.
template <typename S>
struct Parameter {
  std::string name;
  Tensor<S> value;
  Tensor<S> grad;
  bool trainable = true;
  bool decay = true;

  void zero_grad() {
    if (!grad.same_shape(value)) grad = Tensor<S>::zeros(value.shape());
    grad.fill(S(0));
  }
};

// Insertion-ordered registry of parameters and buffers. The order drives the
// optimizer state layout and the checkpoint format, so it must be identical
// across runs for a given configuration (module constructors register in a
// fixed order). Names are hierarchical, e.g. "encoder.stage2.block0.ffn.w1".
template <typename S>
class ParamStore {
 public:
  Parameter<S>* add(const std::string& name, Tensor<S> value, bool trainable = true,
                    bool decay = true) {
    if (index_.count(name)) throw ConfigError("duplicate parameter name: " + name);
    auto p = std::make_unique<Parameter<S>>();
    p->name = name;
    p->value = std::move(value);
    p->grad = Tensor<S>::zeros(p->value.shape());
    p->trainable = trainable;
    p->decay = decay;
    Parameter<S>* raw = p.get();
    index_[name] = params_.size();
    params_.push_back(std::move(p));
    return raw;
  }

  // Weight init: uniform in +-1/sqrt(fan_in), the usual scheme for linear
  // and convolutional maps.
  Parameter<S>* add_uniform(const std::string& name, std::vector<std::int64_t> shape,
                            std::int64_t fan_in, Rng& rng, bool decay = true) {
    if (fan_in <= 0) throw ConfigError("fan_in must be positive for " + name);
    Tensor<S> t(std::move(shape));
    double bound = 1.0 / std::sqrt(static_cast<double>(fan_in));
    for (std::int64_t i = 0; i < t.numel(); ++i) {
      t[i] = static_cast<S>(rng.uniform(-bound, bound));
    }
    return add(name, std::move(t), true, decay);
  }

  Parameter<S>* add_constant(const std::string& name, std::vector<std::int64_t> shape, S value,
                             bool trainable = true, bool decay = false) {
    return add(name, Tensor<S>::full(std::move(shape), value), trainable, decay);
  }

  Parameter<S>* find(const std::string& name) {
    auto it = index_.find(name);
    return it == index_.end() ? nullptr : params_[it->second].get();
  }
  const Parameter<S>* find(const std::string& name) const {
    auto it = index_.find(name);
    return it == index_.end() ? nullptr : params_[it->second].get();
  }

  std::size_t size() const { return params_.size(); }
  Parameter<S>& at(std::size_t i) { return *params_[i]; }
  const Parameter<S>& at(std::size_t i) const { return *params_[i]; }

  void zero_grads() {
    for (auto& p : params_) {
      if (p->trainable) p->zero_grad();
    }
  }

  std::int64_t count_trainable() const {
    std::int64_t n = 0;
    for (const auto& p : params_) {
      if (p->trainable) n += p->value.numel();
    }
    return n;
  }

  // Trainable element count grouped by the name prefix up to `depth` dots.
  std::map<std::string, std::int64_t> count_by_prefix(int depth) const {
    std::map<std::string, std::int64_t> out;
    for (const auto& p : params_) {
      if (!p->trainable) continue;
      std::string key = p->name;
      int dots = 0;
      for (std::size_t i = 0; i < key.size(); ++i) {
        if (key[i] == '.' && ++dots == depth) {
          key = key.substr(0, i);
          break;
        }
      }
      out[key] += p->value.numel();
    }
    return out;
  }

 private:
  std::vector<std::unique_ptr<Parameter<S>>> params_;
  std::map<std::string, std::size_t> index_;
};

}  // namespace sepkit
