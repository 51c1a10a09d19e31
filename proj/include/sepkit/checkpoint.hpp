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

#include <cstdint>
#include <cstring>
#include <fstream>
#include <string>
#include <vector>

#include "sepkit/errors.hpp"
#include "sepkit/optimizer.hpp"
#include "sepkit/params.hpp"
#include "sepkit/tensor.hpp"

// Binary checkpoint archive. Layout (little-endian):
//   magic "SEPKIT1\n", u32 scalar size, config text, named value arrays,
//   optional optimizer moments, optional trainer counters, end sentinel.
// Every section is length-prefixed; a short read anywhere raises DataError
// so a truncated file can never half-load.
namespace sepkit::checkpoint {

constexpr char kMagic[8] = {'S', 'E', 'P', 'K', 'I', 'T', '1', '\n'};
constexpr char kEnd[8] = {'S', 'E', 'P', 'K', 'E', 'N', 'D', '\n'};

// Counters a resumed run needs beyond parameters and moments.
struct TrainerCounters {
  std::int64_t epoch = 0;        // next epoch to run
  std::int64_t global_step = 0;
  std::int64_t decays = 0;
  double best_val = 0;
  std::int64_t since_improve = 0;
  std::uint64_t data_rng_state = 0;
  std::uint64_t model_rng_state = 0;
};

namespace detail {

inline void write_bytes(std::ostream& out, const void* p, std::size_t n) {
  out.write(static_cast<const char*>(p), static_cast<std::streamsize>(n));
  if (!out) throw DataError("checkpoint: write failed");
}

inline void read_bytes(std::istream& in, void* p, std::size_t n) {
  in.read(static_cast<char*>(p), static_cast<std::streamsize>(n));
  if (static_cast<std::size_t>(in.gcount()) != n) {
    throw DataError("checkpoint: truncated or corrupt archive");
  }
}

inline void write_u64(std::ostream& out, std::uint64_t v) { write_bytes(out, &v, 8); }
inline std::uint64_t read_u64(std::istream& in) {
  std::uint64_t v = 0;
  read_bytes(in, &v, 8);
  return v;
}

inline void write_f64(std::ostream& out, double v) { write_bytes(out, &v, 8); }
inline double read_f64(std::istream& in) {
  double v = 0;
  read_bytes(in, &v, 8);
  return v;
}

inline void write_string(std::ostream& out, const std::string& s) {
  write_u64(out, s.size());
  write_bytes(out, s.data(), s.size());
}

inline std::string read_string(std::istream& in, std::uint64_t max_len = (1ull << 32)) {
  const std::uint64_t n = read_u64(in);
  if (n > max_len) throw DataError("checkpoint: implausible string length");
  std::string s(static_cast<std::size_t>(n), '\0');
  read_bytes(in, s.data(), s.size());
  return s;
}

template <typename S>
void write_tensor(std::ostream& out, const Tensor<S>& t) {
  write_u64(out, static_cast<std::uint64_t>(t.rank()));
  for (int d = 0; d < t.rank(); ++d) write_u64(out, static_cast<std::uint64_t>(t.dim(d)));
  write_bytes(out, t.data(), sizeof(S) * static_cast<std::size_t>(t.numel()));
}

template <typename S>
Tensor<S> read_tensor(std::istream& in) {
  const std::uint64_t rank = read_u64(in);
  if (rank > 8) throw DataError("checkpoint: implausible tensor rank");
  std::vector<std::int64_t> shape;
  for (std::uint64_t d = 0; d < rank; ++d) {
    shape.push_back(static_cast<std::int64_t>(read_u64(in)));
  }
  Tensor<S> t(shape);
  read_bytes(in, t.data(), sizeof(S) * static_cast<std::size_t>(t.numel()));
  return t;
}

}  // namespace detail

// Writes config text, every parameter in store order, and (when given)
// optimizer moments and trainer counters.
template <typename S>
void save(const std::string& path, const std::string& config_text, const ParamStore<S>& store,
          const AdamW<S>* opt = nullptr, const TrainerCounters* counters = nullptr) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw DataError("checkpoint: cannot write " + path);
  detail::write_bytes(out, kMagic, 8);
  detail::write_u64(out, sizeof(S));
  detail::write_string(out, config_text);

  detail::write_u64(out, store.size());
  for (std::size_t i = 0; i < store.size(); ++i) {
    const Parameter<S>& p = store.at(i);
    detail::write_string(out, p.name);
    detail::write_tensor(out, p.value);
  }

  detail::write_u64(out, opt ? 1 : 0);
  if (opt) {
    AdamW<S>& o = *const_cast<AdamW<S>*>(opt);
    detail::write_u64(out, static_cast<std::uint64_t>(o.step_count()));
    detail::write_u64(out, o.slot_count());
    for (std::size_t i = 0; i < o.slot_count(); ++i) {
      detail::write_string(out, o.slot_name(i));
      detail::write_tensor(out, o.slot_m(i));
      detail::write_tensor(out, o.slot_v(i));
    }
  }

  detail::write_u64(out, counters ? 1 : 0);
  if (counters) {
    detail::write_u64(out, static_cast<std::uint64_t>(counters->epoch));
    detail::write_u64(out, static_cast<std::uint64_t>(counters->global_step));
    detail::write_u64(out, static_cast<std::uint64_t>(counters->decays));
    detail::write_f64(out, counters->best_val);
    detail::write_u64(out, static_cast<std::uint64_t>(counters->since_improve));
    detail::write_u64(out, counters->data_rng_state);
    detail::write_u64(out, counters->model_rng_state);
  }

  detail::write_bytes(out, kEnd, 8);
  out.flush();
  if (!out) throw DataError("checkpoint: write failed for " + path);
}

// Reads only the embedded config text so the caller can build the model
// before loading arrays.
inline std::string read_config(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("checkpoint: cannot open " + path);
  char magic[8];
  detail::read_bytes(in, magic, 8);
  if (std::memcmp(magic, kMagic, 8) != 0) {
    throw DataError("checkpoint: bad magic (wrong file type or version)");
  }
  detail::read_u64(in);  // scalar size; irrelevant for the config text
  return detail::read_string(in);
}

// Loads a checkpoint into an existing store (and optionally optimizer and
// counters). Parameter names, order, and shapes must match the store
// exactly; mismatches indicate a config/checkpoint mix-up and raise
// DataError. Returns the embedded config text.
template <typename S>
std::string load(const std::string& path, ParamStore<S>& store, AdamW<S>* opt = nullptr,
                 TrainerCounters* counters = nullptr) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("checkpoint: cannot open " + path);
  char magic[8];
  detail::read_bytes(in, magic, 8);
  if (std::memcmp(magic, kMagic, 8) != 0) {
    throw DataError("checkpoint: bad magic (wrong file type or version)");
  }
  if (detail::read_u64(in) != sizeof(S)) {
    throw DataError("checkpoint: scalar width differs from this build");
  }
  const std::string config_text = detail::read_string(in);

  const std::uint64_t n = detail::read_u64(in);
  if (n != store.size()) {
    throw DataError("checkpoint: parameter count mismatch (archive " + std::to_string(n) +
                    ", model " + std::to_string(store.size()) + ")");
  }
  for (std::size_t i = 0; i < store.size(); ++i) {
    Parameter<S>& p = store.at(i);
    const std::string name = detail::read_string(in, 4096);
    if (name != p.name) {
      throw DataError("checkpoint: parameter order mismatch at '" + name + "' (model has '" +
                      p.name + "')");
    }
    Tensor<S> t = detail::read_tensor<S>(in);
    if (!t.same_shape(p.value)) {
      throw DataError("checkpoint: shape mismatch for '" + name + "'");
    }
    p.value = std::move(t);
  }

  const std::uint64_t has_opt = detail::read_u64(in);
  if (has_opt > 1) throw DataError("checkpoint: corrupt optimizer flag");
  if (has_opt) {
    const std::int64_t t = static_cast<std::int64_t>(detail::read_u64(in));
    const std::uint64_t slots = detail::read_u64(in);
    if (opt) {
      if (slots != opt->slot_count()) {
        throw DataError("checkpoint: optimizer slot count mismatch");
      }
      opt->set_step_count(t);
    }
    for (std::uint64_t i = 0; i < slots; ++i) {
      const std::string name = detail::read_string(in, 4096);
      Tensor<S> m = detail::read_tensor<S>(in);
      Tensor<S> v = detail::read_tensor<S>(in);
      if (opt) {
        if (name != opt->slot_name(i)) {
          throw DataError("checkpoint: optimizer slot mismatch at '" + name + "'");
        }
        opt->slot_m(i) = std::move(m);
        opt->slot_v(i) = std::move(v);
      }
    }
  } else if (opt) {
    throw DataError("checkpoint: archive has no optimizer state to resume from");
  }

  const std::uint64_t has_counters = detail::read_u64(in);
  if (has_counters > 1) throw DataError("checkpoint: corrupt counter flag");
  if (has_counters) {
    TrainerCounters c;
    c.epoch = static_cast<std::int64_t>(detail::read_u64(in));
    c.global_step = static_cast<std::int64_t>(detail::read_u64(in));
    c.decays = static_cast<std::int64_t>(detail::read_u64(in));
    c.best_val = detail::read_f64(in);
    c.since_improve = static_cast<std::int64_t>(detail::read_u64(in));
    c.data_rng_state = detail::read_u64(in);
    c.model_rng_state = detail::read_u64(in);
    if (counters) *counters = c;
  } else if (counters) {
    throw DataError("checkpoint: archive has no trainer counters to resume from");
  }

  char end[8];
  detail::read_bytes(in, end, 8);
  if (std::memcmp(end, kEnd, 8) != 0) {
    throw DataError("checkpoint: missing end sentinel (corrupt archive)");
  }
  return config_text;
}

}  // namespace sepkit::checkpoint
