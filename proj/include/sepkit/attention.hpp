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

#include "sepkit/graph.hpp"
#include "sepkit/ops.hpp"
#include "sepkit/tensor.hpp"

namespace sepkit::ops {

// Multi-head scaled dot-product attention over frames, with an optional
// learned relative-position bias added to the logits.
//
// q is [F, Tq]; k and v are [F, Tk]; rel_table, when valid, is
// [heads, 2 * max_rel + 1] and contributes table[h, clamp(tk - tq) + max_rel]
// to the logit for query frame tq attending to key frame tk. Offsets beyond
// +-max_rel share the edge entries. Heads are contiguous channel groups of
// size F / heads; logits are scaled by 1 / sqrt(F / heads) and softmaxed over
// key frames.
template <typename S>
Var mhsa(Graph<S>& g, Var q, Var k, Var v, Var rel_table, std::int64_t heads) {
  const Tensor<S>& Q = g.val(q);
  const Tensor<S>& K = g.val(k);
  const Tensor<S>& V = g.val(v);
  detail::require(Q.rank() == 2 && K.rank() == 2 && V.rank() == 2, "mhsa: rank-2 required");
  const std::int64_t F = Q.dim(0);
  const std::int64_t Tq = Q.dim(1);
  const std::int64_t Tk = K.dim(1);
  detail::require(K.dim(0) == F && V.dim(0) == F && V.dim(1) == Tk,
                  "mhsa: operand shapes disagree");
  detail::require(heads >= 1 && F % heads == 0, "mhsa: heads must divide channels");
  const std::int64_t d = F / heads;
  const double inv_sqrt_d = 1.0 / std::sqrt(static_cast<double>(d));

  std::int64_t max_rel = 0;
  const bool has_rel = rel_table.valid();
  if (has_rel) {
    const Tensor<S>& Tb = g.val(rel_table);
    detail::require(Tb.rank() == 2 && Tb.dim(0) == heads && Tb.dim(1) % 2 == 1,
                    "mhsa: bias table must be [heads, 2 * max_rel + 1]");
    max_rel = (Tb.dim(1) - 1) / 2;
  }

  // Attention weights are cached for the backward pass.
  Tensor<S> attn({heads, Tq, Tk});
  Tensor<S> out({F, Tq});
  {
    const typename Tensor<S>::ConstMatrixMap Qm = Q.mat();
    const typename Tensor<S>::ConstMatrixMap Km = K.mat();
    const typename Tensor<S>::ConstMatrixMap Vm = V.mat();
    Eigen::Matrix<S, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor> logits(Tq, Tk);
    for (std::int64_t h = 0; h < heads; ++h) {
      logits.noalias() = Qm.middleRows(h * d, d).transpose() * Km.middleRows(h * d, d);
      logits *= static_cast<S>(inv_sqrt_d);
      if (has_rel) {
        const Tensor<S>& Tb = g.val(rel_table);
        for (std::int64_t a = 0; a < Tq; ++a) {
          for (std::int64_t bcol = 0; bcol < Tk; ++bcol) {
            const std::int64_t off = std::clamp(bcol - a, -max_rel, max_rel);
            logits(a, bcol) += Tb.at(h, off + max_rel);
          }
        }
      }
      for (std::int64_t a = 0; a < Tq; ++a) {
        S mx = logits(a, 0);
        for (std::int64_t bcol = 1; bcol < Tk; ++bcol) mx = std::max(mx, logits(a, bcol));
        double z = 0;
        for (std::int64_t bcol = 0; bcol < Tk; ++bcol) {
          const double e = std::exp(static_cast<double>(logits(a, bcol) - mx));
          attn.at(h, a, bcol) = static_cast<S>(e);
          z += e;
        }
        const S invz = static_cast<S>(1.0 / z);
        for (std::int64_t bcol = 0; bcol < Tk; ++bcol) attn.at(h, a, bcol) *= invz;
      }
      Eigen::Map<const Eigen::Matrix<S, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>> Ah(
          attn.data() + h * Tq * Tk, Tq, Tk);
      out.mat().middleRows(h * d, d).noalias() = Vm.middleRows(h * d, d) * Ah.transpose();
    }
  }

  return g.node(
      std::move(out), {q, k, v, rel_table},
      [q, k, v, rel_table, attn = std::move(attn), heads, d, Tq, Tk, max_rel, has_rel,
       inv_sqrt_d](Graph<S>& g2, Var self) {
        const Tensor<S>& G = g2.grad(self);
        const Tensor<S>& Q2 = g2.val(q);
        const Tensor<S>& K2 = g2.val(k);
        const Tensor<S>& V2 = g2.val(v);
        const bool need_q = g2.needs_grad(q);
        const bool need_k = g2.needs_grad(k);
        const bool need_v = g2.needs_grad(v);
        const bool need_t = has_rel && g2.needs_grad(rel_table);
        const typename Tensor<S>::ConstMatrixMap Gm = G.mat();
        Eigen::Matrix<S, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor> dA(Tq, Tk);
        Eigen::Matrix<S, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor> dS(Tq, Tk);
        for (std::int64_t h = 0; h < heads; ++h) {
          Eigen::Map<const Eigen::Matrix<S, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>> Ah(
              attn.data() + h * Tq * Tk, Tq, Tk);
          if (need_v) {
            g2.grad(v).mat().middleRows(h * d, d).noalias() += Gm.middleRows(h * d, d) * Ah;
          }
          if (!(need_q || need_k || need_t)) continue;
          dA.noalias() = Gm.middleRows(h * d, d).transpose() * V2.mat().middleRows(h * d, d);
          for (std::int64_t a = 0; a < Tq; ++a) {
            double inner = 0;
            for (std::int64_t bcol = 0; bcol < Tk; ++bcol) inner += dA(a, bcol) * Ah(a, bcol);
            for (std::int64_t bcol = 0; bcol < Tk; ++bcol) {
              dS(a, bcol) = static_cast<S>((dA(a, bcol) - inner) * Ah(a, bcol));
            }
          }
          if (need_q) {
            g2.grad(q).mat().middleRows(h * d, d).noalias() +=
                static_cast<S>(inv_sqrt_d) * (K2.mat().middleRows(h * d, d) * dS.transpose());
          }
          if (need_k) {
            g2.grad(k).mat().middleRows(h * d, d).noalias() +=
                static_cast<S>(inv_sqrt_d) * (Q2.mat().middleRows(h * d, d) * dS);
          }
          if (need_t) {
            Tensor<S>& dT = g2.grad(rel_table);
            for (std::int64_t a = 0; a < Tq; ++a) {
              for (std::int64_t bcol = 0; bcol < Tk; ++bcol) {
                const std::int64_t off = std::clamp(bcol - a, -max_rel, max_rel);
                dT.at(h, off + max_rel) += dS(a, bcol);
              }
            }
          }
        }
      });
}

// Attention across parallel speaker streams, applied independently at each
// frame. q, k, v are packed [J * F, T] with speaker j occupying rows
// [j * F, (j + 1) * F). For every frame and head, speaker j's query attends
// over all speakers' keys; there is no positional term because the speaker
// axis has no order.
template <typename S>
Var speaker_attention(Graph<S>& g, Var q, Var k, Var v, std::int64_t num_streams,
                      std::int64_t heads) {
  const Tensor<S>& Q = g.val(q);
  const Tensor<S>& K = g.val(k);
  const Tensor<S>& V = g.val(v);
  detail::require(Q.rank() == 2 && Q.same_shape(K) && Q.same_shape(V),
                  "speaker_attention: operands must share one shape");
  const std::int64_t J = num_streams;
  detail::require(J >= 1 && Q.dim(0) % J == 0, "speaker_attention: bad stream count");
  const std::int64_t F = Q.dim(0) / J;
  detail::require(heads >= 1 && F % heads == 0, "speaker_attention: heads must divide channels");
  const std::int64_t d = F / heads;
  const std::int64_t T = Q.dim(1);
  const double inv_sqrt_d = 1.0 / std::sqrt(static_cast<double>(d));

  Tensor<S> attn({heads, T, J * J});
  Tensor<S> out({J * F, T});
  std::vector<double> logits(static_cast<std::size_t>(J) * J);
  for (std::int64_t h = 0; h < heads; ++h) {
    for (std::int64_t t = 0; t < T; ++t) {
      for (std::int64_t j = 0; j < J; ++j) {
        for (std::int64_t j2 = 0; j2 < J; ++j2) {
          double acc = 0;
          for (std::int64_t i = 0; i < d; ++i) {
            acc += static_cast<double>(Q.at(j * F + h * d + i, t)) * K.at(j2 * F + h * d + i, t);
          }
          logits[j * J + j2] = acc * inv_sqrt_d;
        }
      }
      for (std::int64_t j = 0; j < J; ++j) {
        double mx = logits[j * J];
        for (std::int64_t j2 = 1; j2 < J; ++j2) mx = std::max(mx, logits[j * J + j2]);
        double z = 0;
        for (std::int64_t j2 = 0; j2 < J; ++j2) {
          const double e = std::exp(logits[j * J + j2] - mx);
          attn.at(h, t, j * J + j2) = static_cast<S>(e);
          z += e;
        }
        const S invz = static_cast<S>(1.0 / z);
        for (std::int64_t j2 = 0; j2 < J; ++j2) attn.at(h, t, j * J + j2) *= invz;
        for (std::int64_t i = 0; i < d; ++i) {
          double acc = 0;
          for (std::int64_t j2 = 0; j2 < J; ++j2) {
            acc += static_cast<double>(attn.at(h, t, j * J + j2)) * V.at(j2 * F + h * d + i, t);
          }
          out.at(j * F + h * d + i, t) = static_cast<S>(acc);
        }
      }
    }
  }

  return g.node(
      std::move(out), {q, k, v},
      [q, k, v, attn = std::move(attn), J, F, heads, d, T, inv_sqrt_d](Graph<S>& g2, Var self) {
        const Tensor<S>& G = g2.grad(self);
        const Tensor<S>& Q2 = g2.val(q);
        const Tensor<S>& K2 = g2.val(k);
        const Tensor<S>& V2 = g2.val(v);
        const bool need_q = g2.needs_grad(q);
        const bool need_k = g2.needs_grad(k);
        const bool need_v = g2.needs_grad(v);
        Tensor<S>* dQ = need_q ? &g2.grad(q) : nullptr;
        Tensor<S>* dK = need_k ? &g2.grad(k) : nullptr;
        Tensor<S>* dV = need_v ? &g2.grad(v) : nullptr;
        std::vector<double> dA(static_cast<std::size_t>(J) * J);
        std::vector<double> dSc(static_cast<std::size_t>(J) * J);
        for (std::int64_t h = 0; h < heads; ++h) {
          for (std::int64_t t = 0; t < T; ++t) {
            for (std::int64_t j = 0; j < J; ++j) {
              for (std::int64_t j2 = 0; j2 < J; ++j2) {
                double acc = 0;
                for (std::int64_t i = 0; i < d; ++i) {
                  acc += static_cast<double>(G.at(j * F + h * d + i, t)) *
                         V2.at(j2 * F + h * d + i, t);
                }
                dA[j * J + j2] = acc;
                if (dV) {
                  const S a = attn.at(h, t, j * J + j2);
                  for (std::int64_t i = 0; i < d; ++i) {
                    dV->at(j2 * F + h * d + i, t) += a * G.at(j * F + h * d + i, t);
                  }
                }
              }
            }
            if (!(need_q || need_k)) continue;
            for (std::int64_t j = 0; j < J; ++j) {
              double inner = 0;
              for (std::int64_t j2 = 0; j2 < J; ++j2) {
                inner += dA[j * J + j2] * attn.at(h, t, j * J + j2);
              }
              for (std::int64_t j2 = 0; j2 < J; ++j2) {
                dSc[j * J + j2] = (dA[j * J + j2] - inner) * attn.at(h, t, j * J + j2) * inv_sqrt_d;
              }
            }
            for (std::int64_t j = 0; j < J; ++j) {
              for (std::int64_t j2 = 0; j2 < J; ++j2) {
                const S ds = static_cast<S>(dSc[j * J + j2]);
                if (ds == S(0)) continue;
                for (std::int64_t i = 0; i < d; ++i) {
                  if (dQ) dQ->at(j * F + h * d + i, t) += ds * K2.at(j2 * F + h * d + i, t);
                  if (dK) dK->at(j2 * F + h * d + i, t) += ds * Q2.at(j * F + h * d + i, t);
                }
              }
            }
          }
        }
      });
}

}  // namespace sepkit::ops
