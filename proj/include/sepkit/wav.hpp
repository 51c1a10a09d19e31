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
#include <cstring>
#include <fstream>
#include <string>
#include <vector>

#include "sepkit/errors.hpp"

// Minimal RIFF/WAVE support: 16-bit PCM, mono. Samples are exchanged as
// floats in [-1, 1]; values outside that range are clipped on write.
namespace sepkit::wav {

struct Audio {
  std::vector<float> samples;
  int sample_rate = 0;
};

namespace detail {

inline void put_u32(std::string& s, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) s.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}

inline void put_u16(std::string& s, std::uint16_t v) {
  s.push_back(static_cast<char>(v & 0xff));
  s.push_back(static_cast<char>((v >> 8) & 0xff));
}

inline std::uint32_t get_u32(const std::string& s, std::size_t off) {
  std::uint32_t v = 0;
  for (int i = 3; i >= 0; --i) v = (v << 8) | static_cast<std::uint8_t>(s[off + i]);
  return v;
}

inline std::uint16_t get_u16(const std::string& s, std::size_t off) {
  return static_cast<std::uint16_t>(static_cast<std::uint8_t>(s[off]) |
                                    (static_cast<std::uint8_t>(s[off + 1]) << 8));
}

}  // namespace detail

inline std::int16_t quantize(float x) {
  const float scaled = x * 32767.0f;
  const long r = std::lrintf(scaled);
  if (r > 32767) return 32767;
  if (r < -32768) return -32768;
  return static_cast<std::int16_t>(r);
}

inline void write(const std::string& path, const std::vector<float>& samples, int sample_rate) {
  if (sample_rate <= 0) throw DataError("wav write: bad sample rate");
  const std::uint32_t n = static_cast<std::uint32_t>(samples.size());
  const std::uint32_t data_bytes = n * 2;
  std::string out;
  out.reserve(44 + data_bytes);
  out += "RIFF";
  detail::put_u32(out, 36 + data_bytes);
  out += "WAVE";
  out += "fmt ";
  detail::put_u32(out, 16);
  detail::put_u16(out, 1);  // PCM
  detail::put_u16(out, 1);  // mono
  detail::put_u32(out, static_cast<std::uint32_t>(sample_rate));
  detail::put_u32(out, static_cast<std::uint32_t>(sample_rate) * 2);
  detail::put_u16(out, 2);   // block align
  detail::put_u16(out, 16);  // bits per sample
  out += "data";
  detail::put_u32(out, data_bytes);
  for (float x : samples) {
    detail::put_u16(out, static_cast<std::uint16_t>(quantize(x)));
  }
  std::ofstream f(path, std::ios::binary);
  if (!f) throw DataError("wav write: cannot open " + path);
  f.write(out.data(), static_cast<std::streamsize>(out.size()));
  if (!f) throw DataError("wav write: short write to " + path);
}

inline Audio read(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw DataError("wav read: cannot open " + path);
  std::string buf((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
  if (buf.size() < 12 || buf.compare(0, 4, "RIFF") != 0 || buf.compare(8, 4, "WAVE") != 0) {
    throw DataError("wav read: not a RIFF/WAVE file: " + path);
  }
  Audio audio;
  bool have_fmt = false, have_data = false;
  std::size_t pos = 12;
  while (pos + 8 <= buf.size()) {
    const std::string id = buf.substr(pos, 4);
    const std::uint32_t size = detail::get_u32(buf, pos + 4);
    pos += 8;
    if (pos + size > buf.size()) throw DataError("wav read: truncated chunk in " + path);
    if (id == "fmt ") {
      if (size < 16) throw DataError("wav read: short fmt chunk in " + path);
      const std::uint16_t format = detail::get_u16(buf, pos);
      const std::uint16_t channels = detail::get_u16(buf, pos + 2);
      const std::uint16_t bits = detail::get_u16(buf, pos + 14);
      if (format != 1 || bits != 16) {
        throw DataError("wav read: only 16-bit PCM supported: " + path);
      }
      if (channels != 1) throw DataError("wav read: only mono supported: " + path);
      audio.sample_rate = static_cast<int>(detail::get_u32(buf, pos + 4));
      have_fmt = true;
    } else if (id == "data") {
      if (size % 2 != 0) throw DataError("wav read: odd data size in " + path);
      audio.samples.resize(size / 2);
      for (std::size_t i = 0; i < audio.samples.size(); ++i) {
        const std::int16_t v =
            static_cast<std::int16_t>(detail::get_u16(buf, pos + 2 * i));
        audio.samples[i] = static_cast<float>(v) / 32767.0f;
      }
      have_data = true;
    }
    pos += size + (size % 2);  // chunks are word-aligned
  }
  if (!have_fmt || !have_data) throw DataError("wav read: missing fmt or data chunk: " + path);
  return audio;
}

}  // namespace sepkit::wav
