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
#include <functional>
#include <string>
#include <vector>

#include "sepkit/graph.hpp"
#include "sepkit/params.hpp"
#include "sepkit/rng.hpp"
#include "sepkit/tensor.hpp"

namespace sepkit::test {

struct GradCheckResult {
  double max_rel_err = 0;
  double max_abs_err = 0;
  std::string worst;  // which input/parameter and coordinate
};

inline double rel_err(double analytic, double numeric) {
  const double denom = std::max({std::fabs(analytic), std::fabs(numeric), 1e-6});
  return std::fabs(analytic - numeric) / denom;
}

// Checks analytic input gradients against central differences. `fn` rebuilds
// the computation from scratch on every call and returns a scalar node; it
// must be deterministic given the graph it is handed (graphs are seeded
// identically across calls).
template <typename Fn>
GradCheckResult grad_check_inputs(Fn fn, std::vector<Tensor<double>> xs, double h = 1e-5,
                                  std::uint64_t seed = 7, bool training = false) {
  auto eval = [&](const std::vector<Tensor<double>>& inputs, bool want_grad,
                  std::vector<Tensor<double>>* grads) {
    Graph<double> g(training, Rng(seed), want_grad);
    std::vector<Var> vars;
    vars.reserve(inputs.size());
    for (const auto& t : inputs) vars.push_back(g.input(t));
    Var loss = fn(g, vars);
    const double value = g.val(loss)[0];
    if (want_grad) {
      g.backward(loss);
      grads->clear();
      for (std::size_t i = 0; i < vars.size(); ++i) {
        grads->push_back(g.grad_live(vars[i]) ? g.grad(vars[i])
                                              : Tensor<double>::zeros(inputs[i].shape()));
      }
    }
    return value;
  };

  std::vector<Tensor<double>> analytic;
  eval(xs, true, &analytic);

  GradCheckResult res;
  for (std::size_t i = 0; i < xs.size(); ++i) {
    for (std::int64_t c = 0; c < xs[i].numel(); ++c) {
      const double orig = xs[i][c];
      xs[i][c] = orig + h;
      const double fp = eval(xs, false, nullptr);
      xs[i][c] = orig - h;
      const double fm = eval(xs, false, nullptr);
      xs[i][c] = orig;
      const double numeric = (fp - fm) / (2 * h);
      const double a = analytic[i][c];
      const double re = rel_err(a, numeric);
      if (re > res.max_rel_err) {
        res.max_rel_err = re;
        res.worst = "input " + std::to_string(i) + " coord " + std::to_string(c);
      }
      res.max_abs_err = std::max(res.max_abs_err, std::fabs(a - numeric));
    }
  }
  return res;
}

// Checks analytic parameter gradients in `store` against central
// differences. `loss_fn(want_grad)` evaluates the loss, running backward and
// accumulating parameter gradients when want_grad is set.
inline GradCheckResult grad_check_params(ParamStore<double>& store,
                                         const std::function<double(bool)>& loss_fn,
                                         double h = 1e-5) {
  store.zero_grads();
  loss_fn(true);

  GradCheckResult res;
  for (std::size_t i = 0; i < store.size(); ++i) {
    Parameter<double>& p = store.at(i);
    if (!p.trainable) continue;
    for (std::int64_t c = 0; c < p.value.numel(); ++c) {
      const double orig = p.value[c];
      p.value[c] = orig + h;
      const double fp = loss_fn(false);
      p.value[c] = orig - h;
      const double fm = loss_fn(false);
      p.value[c] = orig;
      const double numeric = (fp - fm) / (2 * h);
      const double a = p.grad[c];
      const double re = rel_err(a, numeric);
      if (re > res.max_rel_err) {
        res.max_rel_err = re;
        res.worst = p.name + " coord " + std::to_string(c);
      }
      res.max_abs_err = std::max(res.max_abs_err, std::fabs(a - numeric));
    }
  }
  return res;
}

inline Tensor<double> random_tensor(std::vector<std::int64_t> shape, Rng& rng, double scale = 1.0) {
  Tensor<double> t(std::move(shape));
  for (std::int64_t i = 0; i < t.numel(); ++i) t[i] = scale * rng.normal();
  return t;
}

}  // namespace sepkit::test
