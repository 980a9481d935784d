// Copyright 2026 The LERS Kit Authors
// SPDX-License-Identifier: Apache-2.0
//
// Command-line experiment runner.

#include <filesystem>
#include <iostream>
#include <map>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "lers/bench.hpp"
#include "lers/dimsearch.hpp"
#include "lers/pruning.hpp"

namespace fs = std::filesystem;
using namespace lers;
using namespace lers::bench;

namespace {

enum Exit { kOk = 0, kFailure = 1, kConfig = 2, kData = 3, kSparsity = 4 };

// Flags that mirror config keys; values are kept as text until the config
// file has been applied.
struct Flag {
  const char* name;
  const char* help;
};
const Flag kFlags[] = {
    {"task", "cf or ctr"},
    {"backbone", "neumf, lightgcn, deepfm or dcnmix"},
    {"compressor", "none, qr, tt, dhe, pep, optembed, cerp or magprune"},
    {"sparsity", "target sparsity, e.g. 0.5, 0.8 or 0.95"},
    {"data", "interaction file (cf) or record file (ctr)"},
    {"schema", "ctr field schema"},
    {"seed", "model seed"},
    {"epochs", "training epochs"},
    {"batch-size", "training batch size"},
    {"trials", "tuning trials"},
    {"out", "output directory"},
    {"checkpoint", "model checkpoint path"},
    {"profile-batch", "batch size for profiling"},
    {"valid-fraction", "validation share of the data"},
};

struct Options {
  std::string config_file;
  std::map<std::string, std::string> flags;
  std::vector<std::string> settings;  // --set key=value
  std::string from;                   // compress: trained checkpoint to prune
  std::vector<std::string> inputs;    // report: csv files or run directories
};

void add_common(CLI::App* cmd, Options& o) {
  cmd->add_option("--config", o.config_file, "key=value config file; flags override it");
  for (const auto& f : kFlags) cmd->add_option(std::string("--") + f.name, o.flags[f.name], f.help);
  cmd->add_option("--set", o.settings, "extra key=value setting (repeatable)");
}

ExperimentConfig resolve(const Options& o, CLI::App* cmd, ExperimentConfig base = {}) {
  ExperimentConfig cfg = o.config_file.empty() ? base : load_config_file(o.config_file, base);
  for (const auto& s : o.settings) {
    const auto eq = s.find('=');
    if (eq == std::string::npos) throw ConfigError("--set expects key=value, got '" + s + "'");
    apply_setting(cfg, s.substr(0, eq), s.substr(eq + 1));
  }
  for (const auto& f : kFlags) {
    if (cmd->count(std::string("--") + f.name)) apply_setting(cfg, f.name, o.flags.at(f.name));
  }
  return cfg;
}

fs::path out_dir(const ExperimentConfig& cfg) {
  if (!cfg.out.empty()) return cfg.out;
  return fs::path("runs") / (cfg.dataset_name() + "-" + std::string(backbone_name(cfg.backbone)) + "-" +
                             std::string(compressor_name(cfg.compressor)));
}

void write_outputs(const BenchReport& report, const ExperimentConfig& cfg) {
  const auto dir = out_dir(cfg);
  emit_report({report}, dir);
  std::ofstream(dir / "config.txt") << format_settings(cfg);
  std::cout << format_table({report});
  for (const auto& p : report.profiles) {
    std::cout << p.phase << ": " << p.ms_per_batch << " ms/batch (batch " << p.batch_size << "), peak "
              << p.peak_bytes << " bytes\n";
  }
  if (report.flagged) std::cout << "warning: achieved sparsity is outside the method's tolerance\n";
  std::cout << "wrote " << dir.string() << "\n";
}

BenchReport report_for(const ExperimentConfig& cfg, const Dataset& data, const Backbone& model) {
  BenchReport r;
  auto& m = r.metrics;
  m.task = std::string(task_name(cfg.task));
  m.dataset = data.name;
  m.backbone = std::string(backbone_name(cfg.backbone));
  m.compressor = std::string(compressor_name(cfg.compressor));
  m.target = cfg.compressor == Compressor::None ? 0 : cfg.target;
  m.metrics = evaluate_model(cfg, data, model, true);
  m.params = model.embedding_params();
  m.full_params = model.full_embedding_params();
  m.sparsity = 1.0 - static_cast<double>(m.params) / static_cast<double>(m.full_params);
  r.primary = cfg.primary_metric();
  if (cfg.baseline) {
    r.baseline = cfg.baseline;
    r.retain = retain_ratio(m.metric(r.primary), *cfg.baseline);
  }
  return r;
}

int run(int argc, char** argv) {
  CLI::App app("lerskit: compressed embedding tables for recommenders");
  app.require_subcommand(1);
  Options o;
  auto* train = app.add_subcommand("train", "train and evaluate a configuration");
  auto* evaluate = app.add_subcommand("evaluate", "evaluate a checkpoint on the test split");
  auto* compress = app.add_subcommand("compress", "run a compression pipeline");
  auto* tune_cmd = app.add_subcommand("tune", "TPE search on the validation split, then a final run");
  auto* profile = app.add_subcommand("profile", "time and measure training and inference");
  auto* report = app.add_subcommand("report", "merge report.csv files into one table");
  for (auto* cmd : {train, evaluate, compress, tune_cmd, profile}) add_common(cmd, o);
  compress->add_option("--from", o.from, "trained checkpoint to prune post hoc (magprune)");
  report->add_option("inputs", o.inputs, "report.csv files or run directories")->required();
  report->add_option("--out", o.flags["out"], "output directory");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    return app.exit(e) == 0 ? kOk : kConfig;
  }

  if (report->parsed()) {
    std::vector<BenchReport> all;
    for (const auto& in : o.inputs) {
      const fs::path p = fs::is_directory(in) ? fs::path(in) / "report.csv" : fs::path(in);
      for (auto& r : read_report(p)) all.push_back(std::move(r));
    }
    if (all.empty()) throw DataError("no report rows found");
    const fs::path dir = o.flags["out"].empty() ? fs::path("report") : fs::path(o.flags["out"]);
    emit_report(all, dir);
    std::cout << format_table(all) << "wrote " << dir.string() << "\n";
    return kOk;
  }

  if (evaluate->parsed()) {
    const auto base = resolve(o, evaluate);
    if (base.checkpoint.empty()) throw ConfigError("evaluate needs --checkpoint");
    auto loaded = load_model(base.checkpoint);
    // Data locations may have moved since training; the split settings may not.
    auto cfg = loaded.config;
    for (const char* key : {"data", "schema", "out"}) {
      if (evaluate->count(std::string("--") + key)) apply_setting(cfg, key, o.flags.at(key));
    }
    cfg.checkpoint = base.checkpoint;
    const auto data = load_dataset(cfg);
    auto r = report_for(cfg, data, *loaded.model);
    write_outputs(r, cfg);
    return kOk;
  }

  if (profile->parsed()) {
    auto cfg = resolve(o, profile);
    if (!cfg.checkpoint.empty() && fs::exists(cfg.checkpoint)) {
      auto loaded = load_model(cfg.checkpoint);
      const auto data = load_dataset(loaded.config);
      auto r = report_for(loaded.config, data, *loaded.model);
      r.profiles = profile_model(cfg, data, *loaded.model);
      write_outputs(r, cfg);
      return kOk;
    }
    cfg.profile = true;
    cfg.checkpoint.clear();
    write_outputs(run_pipeline(cfg).report, cfg);
    return kOk;
  }

  if (compress->parsed()) {
    auto cfg = resolve(o, compress);
    if (cfg.compressor == Compressor::None) throw ConfigError("compress needs --compressor");
    if (!o.from.empty()) {
      if (cfg.compressor != Compressor::MagPrune) throw ConfigError("--from only applies to magprune");
      auto loaded = load_model(o.from);
      cfg.data = loaded.config.data;
      cfg.schema = loaded.config.schema;
      cfg.backbone = loaded.config.backbone;
      cfg.task = loaded.config.task;
      cfg.validate();
      const auto data = load_dataset(loaded.config);
      prune_model(*loaded.model, cfg.target, cfg.n_min);
      auto r = report_for(cfg, data, *loaded.model);
      if (!cfg.checkpoint.empty()) save_model(*loaded.model, cfg, cfg.checkpoint);
      if (cfg.profile) r.profiles = profile_model(cfg, data, *loaded.model);
      write_outputs(r, cfg);
      return kOk;
    }
    write_outputs(run_pipeline(cfg).report, cfg);
    return kOk;
  }

  auto* cmd = train->parsed() ? train : tune_cmd;
  ExperimentConfig base;
  base.profile = false;
  auto cfg = resolve(o, cmd, base);
  if (cmd == tune_cmd) {
    cfg.tuning = true;
    if (cfg.out.empty()) cfg.out = out_dir(cfg);
  }
  write_outputs(run_pipeline(cfg).report, cfg);
  return kOk;
}

}  // namespace

int main(int argc, char** argv) {
  try {
    return run(argc, argv);
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return kConfig;
  } catch (const DataError& e) {
    std::cerr << "data error: " << e.what() << "\n";
    return kData;
  } catch (const CheckpointError& e) {
    std::cerr << "checkpoint error: " << e.what() << "\n";
    return kData;
  } catch (const UnreachableSparsity& e) {
    std::cerr << "unreachable sparsity: " << e.what() << "\n";
    return kSparsity;
  } catch (const SparsityNotReached& e) {
    std::cerr << "unreachable sparsity: " << e.what() << "\n";
    return kSparsity;
  } catch (const NoFeasibleCandidate& e) {
    std::cerr << "unreachable sparsity: " << e.what() << "\n";
    return kSparsity;
  } catch (const std::invalid_argument& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return kConfig;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kFailure;
  }
}
