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
#include <fstream>
#include <map>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "sepkit/errors.hpp"

namespace sepkit {

// Flat key=value configuration. Files are plain text, one `key = value` per
// line, with '#' comments and blank lines ignored.
class KvConfig {
 public:
  static KvConfig parse_text(const std::string& text) {
    KvConfig kv;
    std::istringstream in(text);
    std::string line;
    int lineno = 0;
    while (std::getline(in, line)) {
      ++lineno;
      const std::size_t hash = line.find('#');
      if (hash != std::string::npos) line.erase(hash);
      const std::string trimmed = trim(line);
      if (trimmed.empty()) continue;
      const std::size_t eq = trimmed.find('=');
      if (eq == std::string::npos) {
        throw ConfigError("config line " + std::to_string(lineno) + ": expected key = value");
      }
      const std::string key = trim(trimmed.substr(0, eq));
      const std::string value = trim(trimmed.substr(eq + 1));
      if (key.empty()) {
        throw ConfigError("config line " + std::to_string(lineno) + ": empty key");
      }
      kv.set(key, value);
    }
    return kv;
  }

  static KvConfig parse_file(const std::string& path) {
    std::ifstream f(path);
    if (!f) throw ConfigError("cannot open config file: " + path);
    std::string text((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
    return parse_text(text);
  }

  void set(const std::string& key, const std::string& value) { values_[key] = value; }

  // Later sources win.
  void merge_from(const KvConfig& other) {
    for (const auto& [k, v] : other.values_) values_[k] = v;
  }

  bool has(const std::string& key) const { return values_.count(key) > 0; }

  std::string get_str(const std::string& key, const std::string& def) const {
    auto it = values_.find(key);
    return it == values_.end() ? def : it->second;
  }

  std::int64_t get_i64(const std::string& key, std::int64_t def) const {
    auto it = values_.find(key);
    if (it == values_.end()) return def;
    try {
      std::size_t pos = 0;
      const std::int64_t v = std::stoll(it->second, &pos);
      if (pos != it->second.size()) throw std::invalid_argument("trailing");
      return v;
    } catch (const std::exception&) {
      throw ConfigError("config key '" + key + "': expected integer, got '" + it->second + "'");
    }
  }

  double get_double(const std::string& key, double def) const {
    auto it = values_.find(key);
    if (it == values_.end()) return def;
    try {
      std::size_t pos = 0;
      const double v = std::stod(it->second, &pos);
      if (pos != it->second.size()) throw std::invalid_argument("trailing");
      return v;
    } catch (const std::exception&) {
      throw ConfigError("config key '" + key + "': expected number, got '" + it->second + "'");
    }
  }

  bool get_bool(const std::string& key, bool def) const {
    auto it = values_.find(key);
    if (it == values_.end()) return def;
    const std::string& v = it->second;
    if (v == "on" || v == "true" || v == "1" || v == "yes") return true;
    if (v == "off" || v == "false" || v == "0" || v == "no") return false;
    throw ConfigError("config key '" + key + "': expected on/off, got '" + v + "'");
  }

  std::string to_text() const {
    std::ostringstream out;
    for (const auto& [k, v] : values_) out << k << " = " << v << "\n";
    return out.str();
  }

  const std::map<std::string, std::string>& entries() const { return values_; }

  void require_known(const std::set<std::string>& allowed) const {
    std::string unknown;
    for (const auto& [k, v] : values_) {
      (void)v;
      if (!allowed.count(k)) unknown += (unknown.empty() ? "" : ", ") + k;
    }
    if (!unknown.empty()) throw ConfigError("unknown config keys: " + unknown);
  }

 private:
  static std::string trim(const std::string& s) {
    std::size_t a = 0, b = s.size();
    while (a < b && std::isspace(static_cast<unsigned char>(s[a]))) ++a;
    while (b > a && std::isspace(static_cast<unsigned char>(s[b - 1]))) --b;
    return s.substr(a, b - a);
  }

  std::map<std::string, std::string> values_;
};

// ---------------------------------------------------------------------------
// Typed configuration structs.
// ---------------------------------------------------------------------------

enum class SplitMode { kShared, kMultiple };
enum class DecoderMode { kLateSplit, kEarlySplitMultiDec, kEssd, kSepre };
enum class EgaMode { kFull, kPlainDsUs, kMulNoGate };
enum class CsPlacement { kPerUnit, kPerStage };
enum class AuxDomain { kTime, kStftMag };
enum class PitCoupling { kFinal, kJoint };

inline std::string to_string(SplitMode m) {
  return m == SplitMode::kShared ? "shared" : "multiple";
}
inline std::string to_string(DecoderMode m) {
  switch (m) {
    case DecoderMode::kLateSplit: return "late_split";
    case DecoderMode::kEarlySplitMultiDec: return "early_split_multi_dec";
    case DecoderMode::kEssd: return "essd";
    default: return "sepre";
  }
}
inline std::string to_string(EgaMode m) {
  switch (m) {
    case EgaMode::kFull: return "full";
    case EgaMode::kPlainDsUs: return "plain_ds_us";
    default: return "mul_no_gate";
  }
}
inline std::string to_string(CsPlacement m) {
  return m == CsPlacement::kPerUnit ? "per_unit" : "per_stage";
}
inline std::string to_string(AuxDomain m) { return m == AuxDomain::kTime ? "time" : "stft_mag"; }
inline std::string to_string(PitCoupling m) {
  return m == PitCoupling::kFinal ? "final" : "joint";
}

inline SplitMode split_mode_from(const std::string& s) {
  if (s == "shared") return SplitMode::kShared;
  if (s == "multiple") return SplitMode::kMultiple;
  throw ConfigError("split_mode must be shared|multiple, got '" + s + "'");
}
inline DecoderMode decoder_mode_from(const std::string& s) {
  if (s == "late_split") return DecoderMode::kLateSplit;
  if (s == "early_split_multi_dec") return DecoderMode::kEarlySplitMultiDec;
  if (s == "essd") return DecoderMode::kEssd;
  if (s == "sepre") return DecoderMode::kSepre;
  throw ConfigError("decoder_mode must be late_split|early_split_multi_dec|essd|sepre, got '" +
                    s + "'");
}
inline EgaMode ega_mode_from(const std::string& s) {
  if (s == "full") return EgaMode::kFull;
  if (s == "plain_ds_us") return EgaMode::kPlainDsUs;
  if (s == "mul_no_gate") return EgaMode::kMulNoGate;
  throw ConfigError("ega_mode must be full|plain_ds_us|mul_no_gate, got '" + s + "'");
}
inline CsPlacement cs_placement_from(const std::string& s) {
  if (s == "per_unit") return CsPlacement::kPerUnit;
  if (s == "per_stage") return CsPlacement::kPerStage;
  throw ConfigError("cs_placement must be per_unit|per_stage, got '" + s + "'");
}
inline AuxDomain aux_domain_from(const std::string& s) {
  if (s == "time") return AuxDomain::kTime;
  if (s == "stft_mag") return AuxDomain::kStftMag;
  throw ConfigError("aux_domain must be time|stft_mag, got '" + s + "'");
}
inline PitCoupling pit_coupling_from(const std::string& s) {
  if (s == "final") return PitCoupling::kFinal;
  if (s == "joint") return PitCoupling::kJoint;
  throw ConfigError("pit_coupling must be final|joint, got '" + s + "'");
}

// Architecture hyperparameters. Short field names follow the configuration
// schema: F feature channels, F_o codec channels, L window length in
// samples, H hop, R downsampling stages, B_E/B_D block repeats, K local
// kernel in frames, J output streams.
struct ModelConfig {
  std::int64_t F = 64;
  std::int64_t F_o = 256;
  std::int64_t L = 16;
  std::int64_t H = 4;
  std::int64_t R = 4;
  std::int64_t B_E = 2;
  std::int64_t B_D = 3;
  std::int64_t K = 65;
  std::int64_t n_heads = 8;
  std::int64_t J = 2;
  double dropout_p = 0.1;
  double layerscale_init = 1e-4;
  std::int64_t max_rel_pos = 512;
  SplitMode split_mode = SplitMode::kShared;
  DecoderMode decoder_mode = DecoderMode::kSepre;
  EgaMode ega_mode = EgaMode::kFull;
  bool cs_ffn = true;
  CsPlacement cs_placement = CsPlacement::kPerUnit;
  bool decoder_bias = true;

  void validate() const {
    if (F <= 0 || F_o <= 0 || L <= 0 || H <= 0 || H > L) {
      throw ConfigError("model: need positive F, F_o, L and 0 < H <= L");
    }
    if (R < 1 || B_E < 1 || B_D < 1) throw ConfigError("model: R, B_E, B_D must be >= 1");
    if (K < 1 || K % 2 == 0) throw ConfigError("model: K must be odd and positive");
    if (n_heads < 1 || F % n_heads != 0) throw ConfigError("model: n_heads must divide F");
    if (J < 1) throw ConfigError("model: J must be >= 1");
    if (dropout_p < 0 || dropout_p >= 1) throw ConfigError("model: dropout_p must be in [0, 1)");
    if (max_rel_pos < 0) throw ConfigError("model: max_rel_pos must be >= 0");
    if (F % 2 != 0) throw ConfigError("model: F must be even");
  }
};

struct LossConfig {
  double tau = 30.0;
  double alpha0 = 0.4;
  std::int64_t alpha_start_epoch = 100;
  double alpha_factor = 0.8;
  std::int64_t alpha_every = 5;
  AuxDomain aux_domain = AuxDomain::kTime;
  std::int64_t stft_fft = 256;
  std::int64_t stft_hop = 128;
  double eps = 1e-8;
  PitCoupling pit_coupling = PitCoupling::kFinal;

  void validate() const {
    if (tau <= 0) throw ConfigError("loss: tau must be positive");
    if (alpha0 < 0 || alpha0 >= 1) throw ConfigError("loss: alpha0 must be in [0, 1)");
    if (alpha_every < 1) throw ConfigError("loss: alpha_every must be >= 1");
    if (eps <= 0) throw ConfigError("loss: eps must be positive");
    if (stft_fft <= 0 || (stft_fft & (stft_fft - 1)) != 0 || stft_hop <= 0) {
      throw ConfigError("loss: stft_fft must be a power of two and stft_hop positive");
    }
  }
};

struct TrainConfig {
  std::int64_t max_epochs = 200;
  double lr0 = 1e-3;
  std::int64_t warmup_epochs = 1;
  double plateau_factor = 0.8;
  std::int64_t plateau_patience = 3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double adam_eps = 1e-8;
  double weight_decay = 0.01;
  double grad_clip = 5.0;
  std::int64_t batch_size = 4;
  std::int64_t segment_samples = 32000;
  std::uint64_t seed = 0;
  bool dm = false;
  std::int64_t dm_hold_epochs = 50;
  std::int64_t steps_per_epoch = 0;  // 0: derive from the manifest
  std::int64_t checkpoint_every = 1;
  std::int64_t threads = 1;

  void validate() const {
    if (max_epochs < 1) throw ConfigError("train: max_epochs must be >= 1");
    if (lr0 <= 0) throw ConfigError("train: lr0 must be positive");
    if (warmup_epochs < 0) throw ConfigError("train: warmup_epochs must be >= 0");
    if (plateau_patience < 1) throw ConfigError("train: plateau_patience must be >= 1");
    if (plateau_factor <= 0 || plateau_factor >= 1) {
      throw ConfigError("train: plateau_factor must be in (0, 1)");
    }
    if (grad_clip <= 0) throw ConfigError("train: grad_clip must be positive");
    if (batch_size < 1) throw ConfigError("train: batch_size must be >= 1");
    if (segment_samples < 1) throw ConfigError("train: segment_samples must be >= 1");
    if (dm && steps_per_epoch < 1) {
      throw ConfigError("train: steps_per_epoch required when dm is on");
    }
    if (threads < 1) throw ConfigError("train: threads must be >= 1");
  }
};

struct DataConfig {
  std::string data_root;  // empty: resolved from SEPKIT_DATA env var or cwd
  std::string train_manifest = "train.lst";
  std::string val_manifest = "val.lst";
  std::string test_manifest = "test.lst";
  std::int64_t sample_rate = 8000;

  void validate() const {
    if (sample_rate <= 0) throw ConfigError("data: sample_rate must be positive");
  }
};

struct RunConfig {
  ModelConfig model;
  LossConfig loss;
  TrainConfig train;
  DataConfig data;

  static const std::set<std::string>& known_keys() {
    static const std::set<std::string> keys = {
        // model
        "F", "F_o", "L", "H", "R", "B_E", "B_D", "K", "n_heads", "J", "dropout_p",
        "layerscale_init", "max_rel_pos", "split_mode", "decoder_mode", "ega_mode", "cs_ffn",
        "cs_placement", "decoder_bias",
        // loss
        "tau", "alpha0", "alpha_start_epoch", "alpha_factor", "alpha_every", "aux_domain",
        "stft_fft", "stft_hop", "eps", "pit_coupling",
        // train
        "max_epochs", "lr0", "warmup_epochs", "plateau_factor", "plateau_patience", "beta1",
        "beta2", "adam_eps", "weight_decay", "grad_clip", "batch_size", "segment_samples",
        "seed", "dm", "dm_hold_epochs", "steps_per_epoch", "checkpoint_every", "threads",
        // data
        "data_root", "train_manifest", "val_manifest", "test_manifest", "sample_rate"};
    return keys;
  }

  static RunConfig from_kv(const KvConfig& kv) {
    kv.require_known(known_keys());
    RunConfig rc;
    ModelConfig& m = rc.model;
    m.F = kv.get_i64("F", m.F);
    m.F_o = kv.get_i64("F_o", m.F_o);
    m.L = kv.get_i64("L", m.L);
    m.H = kv.get_i64("H", m.H);
    m.R = kv.get_i64("R", m.R);
    m.B_E = kv.get_i64("B_E", m.B_E);
    m.B_D = kv.get_i64("B_D", m.B_D);
    m.K = kv.get_i64("K", m.K);
    m.n_heads = kv.get_i64("n_heads", m.n_heads);
    m.J = kv.get_i64("J", m.J);
    m.dropout_p = kv.get_double("dropout_p", m.dropout_p);
    m.layerscale_init = kv.get_double("layerscale_init", m.layerscale_init);
    m.max_rel_pos = kv.get_i64("max_rel_pos", m.max_rel_pos);
    m.split_mode = split_mode_from(kv.get_str("split_mode", to_string(m.split_mode)));
    m.decoder_mode = decoder_mode_from(kv.get_str("decoder_mode", to_string(m.decoder_mode)));
    m.ega_mode = ega_mode_from(kv.get_str("ega_mode", to_string(m.ega_mode)));
    m.cs_ffn = kv.get_bool("cs_ffn", m.cs_ffn);
    m.cs_placement = cs_placement_from(kv.get_str("cs_placement", to_string(m.cs_placement)));
    m.decoder_bias = kv.get_bool("decoder_bias", m.decoder_bias);

    LossConfig& l = rc.loss;
    l.tau = kv.get_double("tau", l.tau);
    l.alpha0 = kv.get_double("alpha0", l.alpha0);
    l.alpha_start_epoch = kv.get_i64("alpha_start_epoch", l.alpha_start_epoch);
    l.alpha_factor = kv.get_double("alpha_factor", l.alpha_factor);
    l.alpha_every = kv.get_i64("alpha_every", l.alpha_every);
    l.aux_domain = aux_domain_from(kv.get_str("aux_domain", to_string(l.aux_domain)));
    l.stft_fft = kv.get_i64("stft_fft", l.stft_fft);
    l.stft_hop = kv.get_i64("stft_hop", l.stft_hop);
    l.eps = kv.get_double("eps", l.eps);
    l.pit_coupling = pit_coupling_from(kv.get_str("pit_coupling", to_string(l.pit_coupling)));

    TrainConfig& t = rc.train;
    t.max_epochs = kv.get_i64("max_epochs", t.max_epochs);
    t.dm = kv.get_bool("dm", t.dm);
    t.lr0 = kv.get_double("lr0", t.dm ? 2e-4 : t.lr0);
    t.warmup_epochs = kv.get_i64("warmup_epochs", t.warmup_epochs);
    t.plateau_factor = kv.get_double("plateau_factor", t.plateau_factor);
    t.plateau_patience = kv.get_i64("plateau_patience", t.plateau_patience);
    t.beta1 = kv.get_double("beta1", t.beta1);
    t.beta2 = kv.get_double("beta2", t.beta2);
    t.adam_eps = kv.get_double("adam_eps", t.adam_eps);
    t.weight_decay = kv.get_double("weight_decay", t.weight_decay);
    t.grad_clip = kv.get_double("grad_clip", t.grad_clip);
    t.batch_size = kv.get_i64("batch_size", t.batch_size);
    t.segment_samples = kv.get_i64("segment_samples", t.segment_samples);
    t.seed = static_cast<std::uint64_t>(kv.get_i64("seed", 0));
    t.dm_hold_epochs = kv.get_i64("dm_hold_epochs", t.dm_hold_epochs);
    t.steps_per_epoch = kv.get_i64("steps_per_epoch", t.steps_per_epoch);
    t.checkpoint_every = kv.get_i64("checkpoint_every", t.checkpoint_every);
    t.threads = kv.get_i64("threads", t.threads);

    DataConfig& d = rc.data;
    d.data_root = kv.get_str("data_root", d.data_root);
    d.train_manifest = kv.get_str("train_manifest", d.train_manifest);
    d.val_manifest = kv.get_str("val_manifest", d.val_manifest);
    d.test_manifest = kv.get_str("test_manifest", d.test_manifest);
    d.sample_rate = kv.get_i64("sample_rate", d.sample_rate);

    rc.model.validate();
    rc.loss.validate();
    rc.train.validate();
    rc.data.validate();
    return rc;
  }

  KvConfig to_kv() const {
    KvConfig kv;
    const ModelConfig& m = model;
    kv.set("F", std::to_string(m.F));
    kv.set("F_o", std::to_string(m.F_o));
    kv.set("L", std::to_string(m.L));
    kv.set("H", std::to_string(m.H));
    kv.set("R", std::to_string(m.R));
    kv.set("B_E", std::to_string(m.B_E));
    kv.set("B_D", std::to_string(m.B_D));
    kv.set("K", std::to_string(m.K));
    kv.set("n_heads", std::to_string(m.n_heads));
    kv.set("J", std::to_string(m.J));
    kv.set("dropout_p", fmt(m.dropout_p));
    kv.set("layerscale_init", fmt(m.layerscale_init));
    kv.set("max_rel_pos", std::to_string(m.max_rel_pos));
    kv.set("split_mode", to_string(m.split_mode));
    kv.set("decoder_mode", to_string(m.decoder_mode));
    kv.set("ega_mode", to_string(m.ega_mode));
    kv.set("cs_ffn", m.cs_ffn ? "on" : "off");
    kv.set("cs_placement", to_string(m.cs_placement));
    kv.set("decoder_bias", m.decoder_bias ? "on" : "off");

    const LossConfig& l = loss;
    kv.set("tau", fmt(l.tau));
    kv.set("alpha0", fmt(l.alpha0));
    kv.set("alpha_start_epoch", std::to_string(l.alpha_start_epoch));
    kv.set("alpha_factor", fmt(l.alpha_factor));
    kv.set("alpha_every", std::to_string(l.alpha_every));
    kv.set("aux_domain", to_string(l.aux_domain));
    kv.set("stft_fft", std::to_string(l.stft_fft));
    kv.set("stft_hop", std::to_string(l.stft_hop));
    kv.set("eps", fmt(l.eps));
    kv.set("pit_coupling", to_string(l.pit_coupling));

    const TrainConfig& t = train;
    kv.set("max_epochs", std::to_string(t.max_epochs));
    kv.set("lr0", fmt(t.lr0));
    kv.set("warmup_epochs", std::to_string(t.warmup_epochs));
    kv.set("plateau_factor", fmt(t.plateau_factor));
    kv.set("plateau_patience", std::to_string(t.plateau_patience));
    kv.set("beta1", fmt(t.beta1));
    kv.set("beta2", fmt(t.beta2));
    kv.set("adam_eps", fmt(t.adam_eps));
    kv.set("weight_decay", fmt(t.weight_decay));
    kv.set("grad_clip", fmt(t.grad_clip));
    kv.set("batch_size", std::to_string(t.batch_size));
    kv.set("segment_samples", std::to_string(t.segment_samples));
    kv.set("seed", std::to_string(t.seed));
    kv.set("dm", t.dm ? "on" : "off");
    kv.set("dm_hold_epochs", std::to_string(t.dm_hold_epochs));
    kv.set("steps_per_epoch", std::to_string(t.steps_per_epoch));
    kv.set("checkpoint_every", std::to_string(t.checkpoint_every));
    kv.set("threads", std::to_string(t.threads));

    const DataConfig& d = data;
    kv.set("data_root", d.data_root);
    kv.set("train_manifest", d.train_manifest);
    kv.set("val_manifest", d.val_manifest);
    kv.set("test_manifest", d.test_manifest);
    kv.set("sample_rate", std::to_string(d.sample_rate));
    return kv;
  }

 private:
  static std::string fmt(double v) {
    std::ostringstream os;
    os.precision(17);
    os << v;
    return os.str();
  }
};

// Named architecture presets. T/B/L use the long window; S/M the short one;
// tiny-desk is sized for CPU experiments.
inline KvConfig preset_config(const std::string& name) {
  KvConfig kv;
  auto set_common = [&](std::int64_t F, std::int64_t L, std::int64_t H, std::int64_t R) {
    kv.set("F", std::to_string(F));
    kv.set("F_o", "256");
    kv.set("L", std::to_string(L));
    kv.set("H", std::to_string(H));
    kv.set("R", std::to_string(R));
    kv.set("B_E", "2");
    kv.set("B_D", "3");
    kv.set("K", "65");
    kv.set("n_heads", "8");
  };
  if (name == "T") {
    set_common(64, 16, 4, 4);
  } else if (name == "B") {
    set_common(128, 16, 4, 4);
  } else if (name == "L") {
    set_common(256, 16, 4, 4);
  } else if (name == "S") {
    set_common(64, 8, 2, 5);
  } else if (name == "M") {
    set_common(128, 8, 2, 5);
  } else if (name == "tiny-desk") {
    kv.set("F", "32");
    kv.set("F_o", "64");
    kv.set("L", "16");
    kv.set("H", "8");
    kv.set("R", "2");
    kv.set("B_E", "1");
    kv.set("B_D", "1");
    kv.set("K", "33");
    kv.set("n_heads", "4");
  } else {
    throw ConfigError("unknown preset '" + name + "' (expected T|S|B|M|L|tiny-desk)");
  }
  return kv;
}

}  // namespace sepkit
