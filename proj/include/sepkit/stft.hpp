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
#include <complex>
#include <cstdint>
#include <vector>

#include "sepkit/errors.hpp"
#include "sepkit/tensor.hpp"

namespace sepkit {

// In-place radix-2 FFT. Length must be a power of two.
inline void fft(std::vector<std::complex<double>>& a) {
  const std::size_t n = a.size();
  if (n == 0 || (n & (n - 1)) != 0) throw ShapeError("fft: length must be a power of two");
  for (std::size_t i = 1, j = 0; i < n; ++i) {
    std::size_t bit = n >> 1;
    for (; j & bit; bit >>= 1) j ^= bit;
    j ^= bit;
    if (i < j) std::swap(a[i], a[j]);
  }
  for (std::size_t len = 2; len <= n; len <<= 1) {
    const double ang = -2.0 * 3.14159265358979323846 / static_cast<double>(len);
    const std::complex<double> wl(std::cos(ang), std::sin(ang));
    for (std::size_t i = 0; i < n; i += len) {
      std::complex<double> w(1.0, 0.0);
      for (std::size_t k = 0; k < len / 2; ++k) {
        const std::complex<double> u = a[i + k];
        const std::complex<double> v = a[i + k + len / 2] * w;
        a[i + k] = u + v;
        a[i + k + len / 2] = u - v;
        w *= wl;
      }
    }
  }
}

// Periodic Hann window of length n.
inline std::vector<double> hann_window(std::int64_t n) {
  std::vector<double> w(static_cast<std::size_t>(n));
  for (std::int64_t i = 0; i < n; ++i) {
    w[static_cast<std::size_t>(i)] =
        0.5 * (1.0 - std::cos(2.0 * 3.14159265358979323846 * static_cast<double>(i) /
                              static_cast<double>(n)));
  }
  return w;
}

// Magnitude spectrogram of a waveform: [n_fft / 2 + 1, frames] with frame t
// covering samples [t * hop, t * hop + n_fft). No center padding; trailing
// samples short of a full frame are dropped.
template <typename S>
Tensor<double> stft_magnitude(const std::vector<S>& x, std::int64_t n_fft = 256,
                              std::int64_t hop = 128) {
  if (n_fft <= 0 || (n_fft & (n_fft - 1)) != 0) throw ShapeError("stft: n_fft must be 2^k");
  if (hop <= 0) throw ShapeError("stft: hop must be positive");
  const std::int64_t n = static_cast<std::int64_t>(x.size());
  const std::int64_t bins = n_fft / 2 + 1;
  const std::int64_t frames = n >= n_fft ? (n - n_fft) / hop + 1 : 0;
  Tensor<double> mag({bins, frames});
  const std::vector<double> win = hann_window(n_fft);
  std::vector<std::complex<double>> buf(static_cast<std::size_t>(n_fft));
  for (std::int64_t t = 0; t < frames; ++t) {
    for (std::int64_t i = 0; i < n_fft; ++i) {
      buf[static_cast<std::size_t>(i)] = {
          static_cast<double>(x[static_cast<std::size_t>(t * hop + i)]) *
              win[static_cast<std::size_t>(i)],
          0.0};
    }
    fft(buf);
    for (std::int64_t b = 0; b < bins; ++b) {
      mag.at(b, t) = std::abs(buf[static_cast<std::size_t>(b)]);
    }
  }
  return mag;
}

}  // namespace sepkit
