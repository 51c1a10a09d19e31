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
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include "sepkit/errors.hpp"
#include "sepkit/rng.hpp"
#include "sepkit/wav.hpp"

// Synthetic source generation, SNR-controlled mixing, segmentation, and
// manifest-driven dataset iteration. All waveforms here are 64-bit so the
// construction identities (mixture == sum of stored sources, SNR law) hold
// to the last ulp; quantization happens only at the WAV boundary.
namespace sepkit::mixtures {

using Waveform = std::vector<double>;

// ---------------------------------------------------------------------------
// Synthetic sources.
// ---------------------------------------------------------------------------

enum class SourceKind { kBandNoise, kHarmonic, kAmTone };

struct SourceSpec {
  SourceKind kind = SourceKind::kBandNoise;
  double f_lo = 200.0;     // band_noise: band edges in Hz
  double f_hi = 800.0;
  double f0 = 220.0;       // harmonic / am_tone fundamental in Hz
  int n_partials = 6;      // harmonic
  double mod_rate = 4.0;   // am_tone: amplitude modulation rate in Hz
  double mod_depth = 0.5;  // am_tone: modulation depth in [0, 1)
};

namespace detail {

inline void normalize_rms(Waveform& w) {
  double p = 0;
  for (double v : w) p += v * v;
  const double rms = std::sqrt(p / static_cast<double>(w.size()));
  if (rms == 0) throw NumericError("synth_source: produced a silent waveform");
  for (double& v : w) v /= rms;
}

}  // namespace detail

// Deterministic unit-RMS test signal. band_noise is a dense sum of
// random-phase sinusoids with frequencies drawn uniformly inside
// [f_lo, f_hi], i.e. spectrally confined noise; harmonic stacks partials of
// f0 with 1/k amplitude rolloff and random phases; am_tone is a single
// carrier with sinusoidal amplitude modulation.
inline Waveform synth_source(const SourceSpec& spec, double duration_s, std::int64_t sample_rate,
                             std::uint64_t seed) {
  if (duration_s <= 0 || sample_rate <= 0) {
    throw ConfigError("synth_source: duration and sample rate must be positive");
  }
  const double nyquist = static_cast<double>(sample_rate) / 2.0;
  const std::int64_t n = std::llround(duration_s * static_cast<double>(sample_rate));
  Waveform w(static_cast<std::size_t>(n), 0.0);
  Rng rng = Rng::derive(seed, {0x5e9cull, static_cast<std::uint64_t>(spec.kind)});
  const double two_pi = 2.0 * 3.14159265358979323846;
  const double dt = 1.0 / static_cast<double>(sample_rate);

  switch (spec.kind) {
    case SourceKind::kBandNoise: {
      if (!(spec.f_lo > 0 && spec.f_lo < spec.f_hi && spec.f_hi < nyquist)) {
        throw ConfigError("synth_source: band must satisfy 0 < f_lo < f_hi < sample_rate/2");
      }
      constexpr int kComponents = 64;
      for (int c = 0; c < kComponents; ++c) {
        const double f = rng.uniform(spec.f_lo, spec.f_hi);
        const double phase = rng.uniform(0.0, two_pi);
        for (std::int64_t i = 0; i < n; ++i) {
          w[static_cast<std::size_t>(i)] +=
              std::sin(two_pi * f * static_cast<double>(i) * dt + phase);
        }
      }
      break;
    }
    case SourceKind::kHarmonic: {
      if (!(spec.f0 > 0 && spec.f0 < nyquist)) {
        throw ConfigError("synth_source: f0 must lie in (0, sample_rate/2)");
      }
      int partials = std::max(1, spec.n_partials);
      while (static_cast<double>(partials) * spec.f0 >= 0.98 * nyquist && partials > 1) {
        --partials;
      }
      for (int k = 1; k <= partials; ++k) {
        const double f = static_cast<double>(k) * spec.f0;
        if (f >= nyquist) break;
        const double phase = rng.uniform(0.0, two_pi);
        const double amp = 1.0 / static_cast<double>(k);
        for (std::int64_t i = 0; i < n; ++i) {
          w[static_cast<std::size_t>(i)] +=
              amp * std::sin(two_pi * f * static_cast<double>(i) * dt + phase);
        }
      }
      break;
    }
    case SourceKind::kAmTone: {
      if (!(spec.f0 > 0 && spec.f0 + spec.mod_rate < nyquist)) {
        throw ConfigError("synth_source: carrier plus modulation must stay under sample_rate/2");
      }
      const double carrier_phase = rng.uniform(0.0, two_pi);
      const double mod_phase = rng.uniform(0.0, two_pi);
      for (std::int64_t i = 0; i < n; ++i) {
        const double t = static_cast<double>(i) * dt;
        const double env = 1.0 + spec.mod_depth * std::sin(two_pi * spec.mod_rate * t + mod_phase);
        w[static_cast<std::size_t>(i)] = env * std::sin(two_pi * spec.f0 * t + carrier_phase);
      }
      break;
    }
  }
  detail::normalize_rms(w);
  return w;
}

// ---------------------------------------------------------------------------
// Mixing.
// ---------------------------------------------------------------------------

struct MixtureExample {
  Waveform mixture;
  std::vector<Waveform> sources;  // stored post-scaling: mixture == sum of these, exactly
  double snr_db = 0;
  std::uint64_t seed = 0;
  std::vector<std::string> source_ids;
};

// Scales s2 so the stored pair realizes the requested SNR:
// c = sqrt(P1/P2 * 10^(-snr/10)), mixture = s1 + c*s2, sources = (s1, c*s2).
inline MixtureExample mix_at_snr(const Waveform& s1, const Waveform& s2, double snr_db) {
  if (s1.size() != s2.size()) throw ShapeError("mix_at_snr: source lengths differ");
  if (s1.empty()) throw ShapeError("mix_at_snr: empty sources");
  double p1 = 0, p2 = 0;
  for (double v : s1) p1 += v * v;
  for (double v : s2) p2 += v * v;
  if (p1 == 0 || p2 == 0) throw NumericError("mix_at_snr: zero-power source");
  const double c = std::sqrt(p1 / p2 * std::pow(10.0, -snr_db / 10.0));

  MixtureExample ex;
  ex.snr_db = snr_db;
  ex.sources.resize(2);
  ex.sources[0] = s1;
  ex.sources[1].resize(s2.size());
  ex.mixture.resize(s1.size());
  for (std::size_t i = 0; i < s1.size(); ++i) {
    const double scaled = c * s2[i];
    ex.sources[1][i] = scaled;
    ex.mixture[i] = s1[i] + scaled;
  }
  return ex;
}

// ---------------------------------------------------------------------------
// Segmentation.
// ---------------------------------------------------------------------------

enum class SegmentPolicy { kRandom, kLeading };

struct Segment {
  Waveform samples;          // exactly the requested length
  std::int64_t valid_len = 0;  // original samples before zero-padding
};

inline Segment segment(const Waveform& w, std::int64_t out_len, SegmentPolicy policy,
                       Rng* rng = nullptr) {
  if (out_len <= 0) throw ConfigError("segment: output length must be positive");
  Segment s;
  s.samples.assign(static_cast<std::size_t>(out_len), 0.0);
  const std::int64_t n = static_cast<std::int64_t>(w.size());
  if (n <= out_len) {
    std::copy(w.begin(), w.end(), s.samples.begin());
    s.valid_len = n;
    return s;
  }
  std::int64_t off = 0;
  if (policy == SegmentPolicy::kRandom) {
    if (rng == nullptr) throw ConfigError("segment: random policy needs an rng");
    off = static_cast<std::int64_t>(rng->uniform_index(static_cast<std::uint64_t>(n - out_len + 1)));
  }
  std::copy(w.begin() + off, w.begin() + off + out_len, s.samples.begin());
  s.valid_len = out_len;
  return s;
}

// ---------------------------------------------------------------------------
// Dynamic mixing.
// ---------------------------------------------------------------------------

struct DynamicMixConfig {
  std::int64_t segment_samples = 32000;  // 4 s at 8 kHz
  double snr_lo = -5.0;
  double snr_hi = 5.0;
  double gain_db_range = 3.0;  // per-source gain perturbation, uniform in +-range
};

// Draws two distinct pool entries, perturbs their gains, crops a random
// segment from each, and mixes at a uniform random SNR. The example is a
// pure function of the rng state on entry.
inline MixtureExample dynamic_mix(const std::vector<Waveform>& pool, Rng& rng,
                                  const DynamicMixConfig& cfg = {}) {
  if (pool.size() < 2) throw DataError("dynamic_mix: need at least two pool sources");
  const std::uint64_t i1 = rng.uniform_index(pool.size());
  std::uint64_t i2 = rng.uniform_index(pool.size() - 1);
  if (i2 >= i1) ++i2;
  const double g1 = std::pow(10.0, rng.uniform(-cfg.gain_db_range, cfg.gain_db_range) / 20.0);
  const double g2 = std::pow(10.0, rng.uniform(-cfg.gain_db_range, cfg.gain_db_range) / 20.0);
  const double snr = rng.uniform(cfg.snr_lo, cfg.snr_hi);
  Segment c1 = segment(pool[i1], cfg.segment_samples, SegmentPolicy::kRandom, &rng);
  Segment c2 = segment(pool[i2], cfg.segment_samples, SegmentPolicy::kRandom, &rng);
  for (double& v : c1.samples) v *= g1;
  for (double& v : c2.samples) v *= g2;
  MixtureExample ex = mix_at_snr(c1.samples, c2.samples, snr);
  ex.source_ids = {"pool" + std::to_string(i1), "pool" + std::to_string(i2)};
  return ex;
}

// ---------------------------------------------------------------------------
// Manifests.
// ---------------------------------------------------------------------------

// One mixture per row: src1 src2 offset_seconds duration_seconds snr.
// The snr column is either a number or the literal "random" (drawn per
// example from the dataset seed at load time).
struct ManifestRow {
  std::string src1;
  std::string src2;
  double offset_s = 0;
  double duration_s = 0;
  bool snr_random = false;
  double snr_db = 0;
};

struct Manifest {
  std::vector<ManifestRow> rows;

  static Manifest parse(const std::string& text) {
    Manifest m;
    std::istringstream in(text);
    std::string line;
    std::int64_t lineno = 0;
    while (std::getline(in, line)) {
      ++lineno;
      const auto first = line.find_first_not_of(" \t\r");
      if (first == std::string::npos || line[first] == '#') continue;
      std::istringstream row(line);
      ManifestRow r;
      std::string snr;
      if (!(row >> r.src1 >> r.src2 >> r.offset_s >> r.duration_s >> snr)) {
        throw DataError("manifest line " + std::to_string(lineno) +
                        ": expected 'src1 src2 offset duration snr'");
      }
      std::string extra;
      if (row >> extra) {
        throw DataError("manifest line " + std::to_string(lineno) + ": trailing column '" +
                        extra + "'");
      }
      if (snr == "random") {
        r.snr_random = true;
      } else {
        try {
          std::size_t used = 0;
          r.snr_db = std::stod(snr, &used);
          if (used != snr.size()) throw std::invalid_argument(snr);
        } catch (const std::exception&) {
          throw DataError("manifest line " + std::to_string(lineno) + ": bad snr '" + snr + "'");
        }
      }
      if (r.offset_s < 0 || r.duration_s <= 0) {
        throw DataError("manifest line " + std::to_string(lineno) +
                        ": offset must be >= 0 and duration > 0");
      }
      m.rows.push_back(std::move(r));
    }
    return m;
  }

  std::string serialize() const {
    std::ostringstream out;
    out << "# src1 src2 offset_s duration_s snr_db|random\n";
    for (const auto& r : rows) {
      out << r.src1 << ' ' << r.src2 << ' ' << r.offset_s << ' ' << r.duration_s << ' ';
      if (r.snr_random) {
        out << "random";
      } else {
        out << r.snr_db;
      }
      out << '\n';
    }
    return out.str();
  }

  static Manifest load(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw DataError("manifest: cannot open " + path);
    std::ostringstream buf;
    buf << in.rdbuf();
    return parse(buf.str());
  }

  void save(const std::string& path) const {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw DataError("manifest: cannot write " + path);
    out << serialize();
  }
};

// ---------------------------------------------------------------------------
// Manifest-driven loading.
// ---------------------------------------------------------------------------

namespace detail {

inline Waveform read_wave(const std::string& path, std::int64_t sample_rate) {
  wav::Audio a = wav::read(path);
  if (a.sample_rate != sample_rate) {
    throw DataError("wav " + path + ": sample rate " + std::to_string(a.sample_rate) +
                    " does not match configured " + std::to_string(sample_rate));
  }
  Waveform w(a.samples.size());
  for (std::size_t i = 0; i < w.size(); ++i) w[i] = static_cast<double>(a.samples[i]);
  return w;
}

}  // namespace detail

// Materializes row `index` of the manifest. Randomness (the "random" SNR
// column) is derived from (seed, index), so iteration order and parallel
// loading cannot change the dataset.
inline MixtureExample load_example(const Manifest& m, std::size_t index, const std::string& root,
                                   std::uint64_t seed, std::int64_t sample_rate) {
  if (index >= m.rows.size()) throw DataError("load_example: row index out of range");
  const ManifestRow& r = m.rows[index];
  const auto resolve = [&](const std::string& p) {
    return (std::filesystem::path(root) / p).string();
  };
  Waveform s1 = detail::read_wave(resolve(r.src1), sample_rate);
  Waveform s2 = detail::read_wave(resolve(r.src2), sample_rate);

  const std::int64_t off = std::llround(r.offset_s * static_cast<double>(sample_rate));
  const std::int64_t len = std::llround(r.duration_s * static_cast<double>(sample_rate));
  const auto crop = [&](Waveform& w, const std::string& which) {
    if (off + len > static_cast<std::int64_t>(w.size())) {
      throw DataError("manifest row " + std::to_string(index) + ": " + which +
                      " shorter than offset + duration");
    }
    w = Waveform(w.begin() + off, w.begin() + off + len);
  };
  crop(s1, r.src1);
  crop(s2, r.src2);

  double snr = r.snr_db;
  if (r.snr_random) {
    Rng rng = Rng::derive(seed, {0xda7aull, static_cast<std::uint64_t>(index)});
    snr = rng.uniform(-5.0, 5.0);
  }
  MixtureExample ex = mix_at_snr(s1, s2, snr);
  ex.seed = seed;
  ex.source_ids = {r.src1, r.src2};
  return ex;
}

// ---------------------------------------------------------------------------
// Desk-scale corpus.
// ---------------------------------------------------------------------------

struct CorpusConfig {
  std::int64_t n_sources = 64;
  double source_seconds = 6.0;
  double mix_seconds = 4.0;
  std::int64_t sample_rate = 8000;
  std::int64_t train_rows = 256;
  std::int64_t val_rows = 32;
  std::int64_t test_rows = 32;
  double train_frac = 0.75;  // remainder split evenly between val and test
};

// Disjoint frequency band for source i of n: equal slots across
// (100 Hz, 0.95 * Nyquist), each band occupying 80% of its slot so
// neighbours never touch.
inline std::pair<double, double> band_for_source(std::int64_t i, std::int64_t n,
                                                 std::int64_t sample_rate) {
  const double lo = 100.0;
  const double hi = 0.95 * static_cast<double>(sample_rate) / 2.0;
  const double slot = (hi - lo) / static_cast<double>(n);
  const double f_lo = lo + slot * static_cast<double>(i);
  return {f_lo, f_lo + 0.8 * slot};
}

struct CorpusPaths {
  std::vector<std::string> sources;  // file names relative to the corpus root
  std::string train_manifest;
  std::string val_manifest;
  std::string test_manifest;
};

// Emits n band-noise WAVs in disjoint bands plus speaker-disjoint
// train/val/test manifests. Same (out_dir-independent) seed gives byte
// identical manifests and WAVs.
inline CorpusPaths build_corpus(const std::string& out_dir, const CorpusConfig& cfg,
                                std::uint64_t seed) {
  if (cfg.n_sources < 6) throw ConfigError("build_corpus: need at least 6 sources to split");
  std::filesystem::create_directories(out_dir);
  CorpusPaths paths;

  for (std::int64_t i = 0; i < cfg.n_sources; ++i) {
    SourceSpec spec;
    spec.kind = SourceKind::kBandNoise;
    std::tie(spec.f_lo, spec.f_hi) = band_for_source(i, cfg.n_sources, cfg.sample_rate);
    Waveform w = synth_source(spec, cfg.source_seconds, cfg.sample_rate,
                              Rng::derive(seed, {0x50c5ull, static_cast<std::uint64_t>(i)}).state());
    std::vector<float> f(w.size());
    for (std::size_t k = 0; k < w.size(); ++k) {
      f[k] = static_cast<float>(0.1 * w[k]);  // headroom so 16-bit mixing cannot clip
    }
    std::ostringstream name;
    name << "src" << (i < 10 ? "0" : "") << i << ".wav";
    wav::write((std::filesystem::path(out_dir) / name.str()).string(), f,
               static_cast<int>(cfg.sample_rate));
    paths.sources.push_back(name.str());
  }

  const std::int64_t n_train = std::llround(cfg.train_frac * static_cast<double>(cfg.n_sources));
  const std::int64_t n_val = (cfg.n_sources - n_train) / 2;
  const std::int64_t n_test = cfg.n_sources - n_train - n_val;
  if (n_train < 2 || n_val < 2 || n_test < 2) {
    throw ConfigError("build_corpus: every split needs at least two sources");
  }

  const double max_offset = cfg.source_seconds - cfg.mix_seconds;
  if (max_offset < 0) throw ConfigError("build_corpus: sources shorter than one mixture");

  auto emit = [&](const std::string& file, std::int64_t first, std::int64_t count,
                  std::int64_t rows, bool random_snr, std::uint64_t stream) {
    Rng rng = Rng::derive(seed, {0x3a9full, stream});
    Manifest man;
    for (std::int64_t k = 0; k < rows; ++k) {
      const std::uint64_t a = rng.uniform_index(static_cast<std::uint64_t>(count));
      std::uint64_t b = rng.uniform_index(static_cast<std::uint64_t>(count - 1));
      if (b >= a) ++b;
      ManifestRow r;
      r.src1 = paths.sources[static_cast<std::size_t>(first + static_cast<std::int64_t>(a))];
      r.src2 = paths.sources[static_cast<std::size_t>(first + static_cast<std::int64_t>(b))];
      r.offset_s = std::floor(rng.uniform(0.0, max_offset) * 1000.0) / 1000.0;
      r.duration_s = cfg.mix_seconds;
      if (random_snr) {
        r.snr_random = true;
      } else {
        r.snr_db = std::floor(rng.uniform(-5.0, 5.0) * 100.0) / 100.0;
      }
      man.rows.push_back(std::move(r));
    }
    man.save((std::filesystem::path(out_dir) / file).string());
    return file;
  };

  paths.train_manifest = emit("train.lst", 0, n_train, cfg.train_rows, true, 1);
  paths.val_manifest = emit("val.lst", n_train, n_val, cfg.val_rows, false, 2);
  paths.test_manifest = emit("test.lst", n_train + n_val, n_test, cfg.test_rows, false, 3);
  return paths;
}

}  // namespace sepkit::mixtures
