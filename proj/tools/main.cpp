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

#include <cstdint>
#include <cstdlib>
#include <exception>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <memory>
#include <mutex>
#include <sstream>
#include <string>
#include <thread>
#include <utility>
#include <vector>

#include "CLI11.hpp"

#include "sepkit/checkpoint.hpp"
#include "sepkit/config.hpp"
#include "sepkit/errors.hpp"
#include "sepkit/evaluation.hpp"
#include "sepkit/mixtures.hpp"
#include "sepkit/separator.hpp"
#include "sepkit/tensor.hpp"
#include "sepkit/trainer.hpp"
#include "sepkit/wav.hpp"

namespace fs = std::filesystem;

namespace {

using sepkit::ConfigError;
using sepkit::DataError;
using sepkit::KvConfig;
using sepkit::RunConfig;
using sepkit::SeparatorModel;
using sepkit::Tensor;

// Merge order defines precedence: defaults < preset < file < --set < shortcut
// flags. RunConfig::from_kv rejects unknown keys.
RunConfig resolve_config(const std::string& preset, const std::string& config_file,
                         const std::vector<std::string>& sets, const std::string& seed,
                         const std::string& decoder_mode) {
  KvConfig kv;
  if (!preset.empty()) kv.merge_from(sepkit::preset_config(preset));
  if (!config_file.empty()) kv.merge_from(KvConfig::parse_file(config_file));
  for (const std::string& s : sets) {
    const auto eq = s.find('=');
    if (eq == std::string::npos || eq == 0) {
      throw ConfigError("--set expects key=value, got '" + s + "'");
    }
    kv.set(s.substr(0, eq), s.substr(eq + 1));
  }
  if (!seed.empty()) kv.set("seed", seed);
  if (!decoder_mode.empty()) kv.set("decoder_mode", decoder_mode);
  return RunConfig::from_kv(kv);
}

std::string resolve_data_root(const RunConfig& rc) {
  if (!rc.data.data_root.empty()) return rc.data.data_root;
  if (const char* env = std::getenv("SEPKIT_DATA"); env && *env) return env;
  return ".";
}

// Auxiliary heads exist exactly when the multi-scale loss is active, so a
// checkpoint's config text reconstructs the same parameter set.
SeparatorModel<float> make_model(const RunConfig& rc) {
  const bool with_aux = rc.loss.alpha0 > 0;
  const std::int64_t bins =
      rc.loss.aux_domain == sepkit::AuxDomain::kStftMag ? rc.loss.stft_fft / 2 + 1 : 0;
  return SeparatorModel<float>(rc.model, rc.train.seed, with_aux, with_aux ? bins : 0);
}

struct LoadedModel {
  RunConfig rc;
  std::unique_ptr<SeparatorModel<float>> model;
};

LoadedModel load_checkpoint(const std::string& path) {
  const std::string text = sepkit::checkpoint::read_config(path);
  LoadedModel lm;
  lm.rc = RunConfig::from_kv(KvConfig::parse_text(text));
  lm.model = std::make_unique<SeparatorModel<float>>(make_model(lm.rc));
  sepkit::checkpoint::load(path, lm.model->params());
  return lm;
}

void write_text(const fs::path& path, const std::string& content) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw DataError("cannot write " + path.string());
  out << content;
}

Tensor<float> audio_to_tensor(const sepkit::wav::Audio& audio) {
  Tensor<float> w({static_cast<std::int64_t>(audio.samples.size())});
  for (std::int64_t i = 0; i < w.numel(); ++i) {
    w[i] = audio.samples[static_cast<std::size_t>(i)];
  }
  return w;
}

sepkit::wav::Audio read_audio_checked(const std::string& path, std::int64_t expected_rate) {
  sepkit::wav::Audio audio = sepkit::wav::read(path);
  if (audio.sample_rate != expected_rate) {
    throw DataError("input sample rate " + std::to_string(audio.sample_rate) +
                    " does not match the model's " + std::to_string(expected_rate));
  }
  if (audio.samples.empty()) throw DataError("input wav is empty: " + path);
  return audio;
}

// ---------------------------------------------------------------------------
// Subcommand bodies. Errors propagate as sepkit exceptions.
// ---------------------------------------------------------------------------

void cmd_make_data(const std::string& out_dir, const sepkit::mixtures::CorpusConfig& cc,
                   std::uint64_t seed) {
  const auto paths = sepkit::mixtures::build_corpus(out_dir, cc, seed);
  std::ostringstream kv;
  kv << "n_sources=" << cc.n_sources << "\n"
     << "source_seconds=" << cc.source_seconds << "\n"
     << "mix_seconds=" << cc.mix_seconds << "\n"
     << "sample_rate=" << cc.sample_rate << "\n"
     << "train_rows=" << cc.train_rows << "\n"
     << "val_rows=" << cc.val_rows << "\n"
     << "test_rows=" << cc.test_rows << "\n"
     << "train_frac=" << cc.train_frac << "\n"
     << "seed=" << seed << "\n";
  write_text(fs::path(out_dir) / "corpus.kv", kv.str());
  std::cout << "sources=" << paths.sources.size() << "\n"
            << "train_manifest=" << paths.train_manifest << "\n"
            << "val_manifest=" << paths.val_manifest << "\n"
            << "test_manifest=" << paths.test_manifest << "\n";
}

void cmd_train(const RunConfig& rc, const std::string& out_dir, const std::string& resume,
               std::int64_t max_epochs_override) {
  fs::create_directories(out_dir);
  write_text(fs::path(out_dir) / "config.kv", rc.to_kv().to_text());

  const std::string root = resolve_data_root(rc);
  sepkit::FitOptions fo;
  fo.data_root = root;
  fo.train_manifest =
      sepkit::mixtures::Manifest::load((fs::path(root) / rc.data.train_manifest).string());
  fo.val_manifest =
      sepkit::mixtures::Manifest::load((fs::path(root) / rc.data.val_manifest).string());
  std::ofstream log(fs::path(out_dir) / "train.log", std::ios::binary);
  if (!log) throw DataError("cannot write the metrics log under " + out_dir);
  fo.log = &log;
  fo.checkpoint_path = (fs::path(out_dir) / "checkpoint.bin").string();
  fo.resume_from = resume;
  fo.max_epochs_override = max_epochs_override;

  SeparatorModel<float> model = make_model(rc);
  const auto res = sepkit::fit(model, rc, fo);
  std::cout << "epochs=" << res.epochs_run << " steps=" << res.steps_run
            << " best_val=" << res.best_val << " skipped=" << res.skipped_batches
            << " checkpoint=" << fo.checkpoint_path << "\n";
}

void cmd_separate(const std::string& ckpt, const std::string& input, const std::string& out_dir) {
  LoadedModel lm = load_checkpoint(ckpt);
  const auto audio = read_audio_checked(input, lm.rc.data.sample_rate);
  const auto estimates = lm.model->separate(audio_to_tensor(audio));
  fs::create_directories(out_dir);
  for (std::size_t j = 0; j < estimates.size(); ++j) {
    std::vector<float> samples(static_cast<std::size_t>(estimates[j].numel()));
    for (std::size_t i = 0; i < samples.size(); ++i) {
      samples[i] = estimates[j][static_cast<std::int64_t>(i)];
    }
    const fs::path path = fs::path(out_dir) / ("spk" + std::to_string(j) + ".wav");
    sepkit::wav::write(path.string(), samples, static_cast<int>(lm.rc.data.sample_rate));
    std::cout << "wrote " << path.string() << " samples=" << samples.size() << "\n";
  }
}

void cmd_evaluate(const std::string& ckpt, const std::string& manifest_path,
                  const std::string& data_root, std::int64_t workers, std::uint64_t seed,
                  const std::string& out_dir) {
  LoadedModel lm = load_checkpoint(ckpt);
  const auto manifest = sepkit::mixtures::Manifest::load(manifest_path);
  if (manifest.rows.empty()) throw DataError("manifest has no rows: " + manifest_path);
  const std::string root =
      !data_root.empty() ? data_root : fs::path(manifest_path).parent_path().string();
  if (workers < 1) throw ConfigError("--workers must be >= 1");

  const std::size_t n = manifest.rows.size();
  std::vector<sepkit::evaluation::SeparationMetrics> results(n);
  std::exception_ptr first_error;
  std::mutex error_mu;

  auto run_range = [&](std::size_t worker) {
    try {
      for (std::size_t i = worker; i < n; i += static_cast<std::size_t>(workers)) {
        const auto ex = sepkit::mixtures::load_example(manifest, i, root, seed,
                                                       lm.rc.data.sample_rate);
        Tensor<float> mix({static_cast<std::int64_t>(ex.mixture.size())});
        for (std::int64_t s = 0; s < mix.numel(); ++s) {
          mix[s] = static_cast<float>(ex.mixture[static_cast<std::size_t>(s)]);
        }
        const auto est_waves = lm.model->separate(mix);
        std::vector<std::vector<double>> ests(est_waves.size());
        for (std::size_t j = 0; j < est_waves.size(); ++j) {
          ests[j].resize(static_cast<std::size_t>(est_waves[j].numel()));
          for (std::size_t s = 0; s < ests[j].size(); ++s) {
            ests[j][s] = est_waves[j][static_cast<std::int64_t>(s)];
          }
        }
        results[i] = sepkit::evaluation::evaluate(ex.mixture, ex.sources, ests);
      }
    } catch (...) {
      std::lock_guard<std::mutex> lock(error_mu);
      if (!first_error) first_error = std::current_exception();
    }
  };

  if (workers == 1) {
    run_range(0);
  } else {
    std::vector<std::thread> pool;
    for (std::int64_t w = 0; w < workers; ++w) {
      pool.emplace_back(run_range, static_cast<std::size_t>(w));
    }
    for (auto& t : pool) t.join();
  }
  if (first_error) std::rethrow_exception(first_error);

  std::ostringstream report;
  report.precision(6);
  report << std::fixed;
  double mean_si = 0, mean_sdr = 0;
  for (std::size_t i = 0; i < n; ++i) {
    report << "example=" << i << " si_snri=" << results[i].si_snri
           << " sdri=" << results[i].sdri << " perm=";
    for (int p : results[i].permutation) report << p;
    report << "\n";
    mean_si += results[i].si_snri;
    mean_sdr += results[i].sdri;
  }
  mean_si /= static_cast<double>(n);
  mean_sdr /= static_cast<double>(n);
  report << "mean_si_snri=" << mean_si << "\n";
  report << "mean_sdri=" << mean_sdr << "\n";
  report << "examples=" << n << "\n";
  std::cout << report.str();
  if (!out_dir.empty()) {
    fs::create_directories(out_dir);
    write_text(fs::path(out_dir) / "metrics.kv", report.str());
    write_text(fs::path(out_dir) / "config.kv", lm.rc.to_kv().to_text());
  }
}

void cmd_count(const RunConfig& rc, std::int64_t window, const std::string& out_dir) {
  const auto report = sepkit::evaluation::cost_report<float>(rc.model, window);
  std::cout << report.to_text();
  if (!out_dir.empty()) {
    fs::create_directories(out_dir);
    write_text(fs::path(out_dir) / "count.txt", report.to_text());
    write_text(fs::path(out_dir) / "count.kv", report.to_kv());
    write_text(fs::path(out_dir) / "config.kv", rc.to_kv().to_text());
  }
}

void cmd_probe(const std::string& ckpt, const std::string& input, const std::string& out_dir) {
  LoadedModel lm = load_checkpoint(ckpt);
  const auto audio = read_audio_checked(input, lm.rc.data.sample_rate);
  const auto rows = sepkit::evaluation::cosine_probe(*lm.model, audio_to_tensor(audio));
  const std::string csv = sepkit::evaluation::probe_csv(rows);
  std::ostringstream kv;
  kv.precision(6);
  kv << std::fixed;
  for (const auto& [tap, mean] : sepkit::evaluation::mean_by_tap(rows)) {
    kv << "tap" << tap << "_mean=" << mean << "\n";
  }
  std::cout << kv.str();
  if (!out_dir.empty()) {
    fs::create_directories(out_dir);
    write_text(fs::path(out_dir) / "probe.csv", csv);
    write_text(fs::path(out_dir) / "probe.kv", kv.str());
  } else {
    std::cout << csv;
  }
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"sepkit: train, run, and inspect the time-domain speech separator"};
  app.require_subcommand(1);

  // Shared config options, applied with precedence defaults < --preset <
  // --config < --set < shortcut flags.
  std::string preset, config_file, seed_str, decoder_mode;
  std::vector<std::string> sets;
  auto add_config_opts = [&](CLI::App* cmd) {
    cmd->add_option("--preset", preset, "named architecture preset (T|S|B|M|L|tiny-desk)");
    cmd->add_option("--config", config_file, "key-value configuration file");
    cmd->add_option("--set", sets, "override one key, key=value (repeatable)");
    cmd->add_option("--seed", seed_str, "run seed (overrides the config value)");
    cmd->add_option("--decoder-mode", decoder_mode,
                    "late_split|early_split_multi_dec|essd|sepre");
  };

  // make-data
  auto* mk = app.add_subcommand("make-data", "synthesize a speaker-disjoint training corpus");
  std::string mk_out;
  std::uint64_t mk_seed = 0;
  sepkit::mixtures::CorpusConfig cc;
  mk->add_option("--out", mk_out, "corpus directory")->required();
  mk->add_option("--seed", mk_seed, "corpus seed");
  mk->add_option("--n-sources", cc.n_sources, "number of source speakers");
  mk->add_option("--source-seconds", cc.source_seconds, "length of each source WAV");
  mk->add_option("--mix-seconds", cc.mix_seconds, "length of each manifest mixture");
  mk->add_option("--sample-rate", cc.sample_rate, "corpus sample rate");
  mk->add_option("--train-rows", cc.train_rows, "training manifest rows");
  mk->add_option("--val-rows", cc.val_rows, "validation manifest rows");
  mk->add_option("--test-rows", cc.test_rows, "test manifest rows");
  mk->add_option("--train-frac", cc.train_frac, "fraction of sources reserved for training");

  // train
  auto* tr = app.add_subcommand("train", "run the training recipe");
  std::string tr_out, tr_resume;
  std::int64_t tr_max_epochs = 0;
  add_config_opts(tr);
  tr->add_option("--out", tr_out, "run directory (log, config echo, checkpoints)")->required();
  tr->add_option("--resume", tr_resume, "checkpoint to resume from");
  tr->add_option("--max-epochs", tr_max_epochs, "override the configured epoch count");

  // separate
  auto* sp = app.add_subcommand("separate", "separate one mixture WAV");
  std::string sp_ckpt, sp_in, sp_out;
  sp->add_option("--checkpoint", sp_ckpt, "trained checkpoint")->required();
  sp->add_option("--input", sp_in, "mixture WAV")->required();
  sp->add_option("--out", sp_out, "output directory for per-speaker WAVs")->required();

  // evaluate
  auto* ev = app.add_subcommand("evaluate", "score a checkpoint on a manifest");
  std::string ev_ckpt, ev_manifest, ev_root, ev_out;
  std::int64_t ev_workers = 1;
  std::uint64_t ev_seed = 0;
  ev->add_option("--checkpoint", ev_ckpt, "trained checkpoint")->required();
  ev->add_option("--manifest", ev_manifest, "mixture manifest to score")->required();
  ev->add_option("--data-root", ev_root, "directory holding the manifest's WAVs");
  ev->add_option("--workers", ev_workers, "evaluation worker threads");
  ev->add_option("--seed", ev_seed, "seed for rows with randomized SNR");
  ev->add_option("--out", ev_out, "directory for metrics.kv");

  // count
  auto* ct = app.add_subcommand("count", "report parameter and MAC counts");
  std::string ct_out;
  std::int64_t ct_window = 16000;
  add_config_opts(ct);
  ct->add_option("--window", ct_window, "MAC accounting window in samples");
  ct->add_option("--out", ct_out, "directory for count.kv");

  // probe
  auto* pr = app.add_subcommand("probe", "record decoder speaker-stream cosine similarities");
  std::string pr_ckpt, pr_in, pr_out;
  pr->add_option("--checkpoint", pr_ckpt, "trained checkpoint")->required();
  pr->add_option("--input", pr_in, "mixture WAV")->required();
  pr->add_option("--out", pr_out, "directory for probe.csv");

  try {
    app.parse(argc, argv);
    if (mk->parsed()) {
      cmd_make_data(mk_out, cc, mk_seed);
    } else if (tr->parsed()) {
      cmd_train(resolve_config(preset, config_file, sets, seed_str, decoder_mode), tr_out,
                tr_resume, tr_max_epochs);
    } else if (sp->parsed()) {
      cmd_separate(sp_ckpt, sp_in, sp_out);
    } else if (ev->parsed()) {
      cmd_evaluate(ev_ckpt, ev_manifest, ev_root, ev_workers, ev_seed, ev_out);
    } else if (ct->parsed()) {
      cmd_count(resolve_config(preset, config_file, sets, seed_str, decoder_mode), ct_window,
                ct_out);
    } else if (pr->parsed()) {
      cmd_probe(pr_ckpt, pr_in, pr_out);
    }
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    std::cerr << "error: config: " << e.what() << "\n";
    return 2;
  } catch (const sepkit::ConfigError& e) {
    std::cerr << "error: config: " << e.what() << "\n";
    return 2;
  } catch (const sepkit::ShapeError& e) {
    std::cerr << "error: config: " << e.what() << "\n";
    return 2;
  } catch (const sepkit::DataError& e) {
    std::cerr << "error: data: " << e.what() << "\n";
    return 3;
  } catch (const sepkit::NumericError& e) {
    std::cerr << "error: numeric: " << e.what() << "\n";
    return 4;
  } catch (const std::exception& e) {
    std::cerr << "error: internal: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
