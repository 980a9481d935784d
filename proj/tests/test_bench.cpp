// Copyright 2026 The LERS Kit Authors
// SPDX-License-Identifier: Apache-2.0

#include <cmath>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>

#include "doctest.h"
#include "lers/bench.hpp"
#include "lers/embedding.hpp"

namespace fs = std::filesystem;
using namespace lers;
using namespace lers::bench;

namespace {

fs::path scratch(const std::string& name) {
  const auto dir = fs::temp_directory_path() / "lers_test_bench" / name;
  fs::remove_all(dir);
  fs::create_directories(dir);
  return dir;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p);
  return std::string(std::istreambuf_iterator<char>(in), {});
}

const fs::path& cf_file() {
  static const fs::path path = [] {
    SyntheticCfConfig g;
    g.num_users = 60;
    g.num_items = 90;
    g.interactions = 1200;
    g.min_per_user = 8;
    g.seed = 3;
    const auto p = scratch("cf") / "u.data";
    save_interactions(generate_interactions(g), p);
    return p;
  }();
  return path;
}

const fs::path& ctr_dir() {
  static const fs::path dir = [] {
    SyntheticCtrConfig g;
    g.records = 1500;
    g.cardinalities = {20, 40, 60, 15, 30};
    const auto d = scratch("ctr");
    const auto ctr = generate_ctr(g);
    save_schema(ctr.schema, d / "schema.txt");
    save_ctr_records(ctr.records, d / "records.tsv");
    return d;
  }();
  return dir;
}

ExperimentConfig cf_config(Compressor c = Compressor::None, double t = 0.5) {
  ExperimentConfig cfg;
  cfg.data = cf_file();
  cfg.compressor = c;
  cfg.target = t;
  cfg.dim = 8;
  cfg.epochs = 2;
  cfg.batch_size = 256;
  cfg.layers = 2;
  cfg.gamma = 0;
  cfg.lr = 5e-3;
  cfg.search_epochs = 20;
  cfg.supernet_epochs = 1;
  cfg.population = 4;
  cfg.generations = 2;
  cfg.profile = false;
  return cfg;
}

ExperimentConfig ctr_config(BackboneKind b, Compressor c = Compressor::None, double t = 0.5) {
  ExperimentConfig cfg;
  cfg.task = Task::Ctr;
  cfg.backbone = b;
  cfg.data = ctr_dir() / "records.tsv";
  cfg.schema = ctr_dir() / "schema.txt";
  cfg.compressor = c;
  cfg.target = t;
  cfg.dim = 8;
  cfg.mlp = {16};
  cfg.epochs = 1;
  cfg.batch_size = 256;
  cfg.search_epochs = 20;
  cfg.supernet_epochs = 1;
  cfg.population = 4;
  cfg.generations = 2;
  cfg.profile = false;
  return cfg;
}

}  // namespace

TEST_CASE("settings round-trip through a config file") {
  ExperimentConfig cfg;
  cfg.task = Task::Ctr;
  cfg.backbone = BackboneKind::DcnMix;
  cfg.compressor = Compressor::Tt;
  cfg.target = 0.95;
  cfg.data = "a/b.tsv";
  cfg.schema = "a/schema.txt";
  cfg.mlp = {64, 32};
  cfg.lr = 3.5e-4;
  cfg.feature_mask = false;
  cfg.tune_params = {"lr", "dropout"};
  cfg.baseline = 0.8102;
  const auto path = scratch("roundtrip") / "cfg.txt";
  std::ofstream(path) << "# comment\n\n" << format_settings(cfg);
  const auto back = load_config_file(path);
  CHECK(format_settings(back) == format_settings(cfg));
  CHECK(back.mlp == cfg.mlp);
  CHECK(back.baseline == cfg.baseline);
  CHECK(back.target == 0.95);
}

TEST_CASE("config file values sit over the base and under later settings") {
  const auto path = scratch("precedence") / "cfg.txt";
  std::ofstream(path) << "epochs = 7\nlr=0.01\n";
  ExperimentConfig base;
  base.epochs = 3;
  base.seed = 99;
  auto cfg = load_config_file(path, base);
  CHECK(cfg.epochs == 7);
  CHECK(cfg.seed == 99);
  apply_setting(cfg, "epochs", "9");
  CHECK(cfg.epochs == 9);
}

TEST_CASE("bad settings are config errors") {
  ExperimentConfig cfg;
  CHECK_THROWS_AS(apply_setting(cfg, "no-such-key", "1"), ConfigError);
  CHECK_THROWS_AS(apply_setting(cfg, "epochs", "ten"), ConfigError);
  CHECK_THROWS_AS(apply_setting(cfg, "compressor", "zip"), ConfigError);
  CHECK_THROWS_AS(apply_setting(cfg, "backbone", "resnet"), ConfigError);
  CHECK_THROWS_AS(apply_setting(cfg, "profile", "maybe"), ConfigError);
  CHECK_THROWS_AS(load_config_file("/nonexistent/cfg.txt"), ConfigError);

  cfg = cf_config();
  cfg.backbone = BackboneKind::DeepFm;  // ctr backbone on a cf task
  CHECK_THROWS_AS(cfg.validate(), ConfigError);
  cfg = cf_config(Compressor::Qr, 1.0);
  CHECK_THROWS_AS(cfg.validate(), ConfigError);
  cfg = cf_config();
  cfg.data.clear();
  CHECK_THROWS_AS(cfg.validate(), ConfigError);
  CHECK_NOTHROW(cf_config().validate());
}

TEST_CASE("compressor none reports zero sparsity") {
  const auto r = run_pipeline(cf_config()).report;
  CHECK(r.metrics.sparsity == 0);
  CHECK(r.metrics.target == 0);
  CHECK(r.metrics.params == r.metrics.full_params);
  CHECK_FALSE(r.flagged);
  CHECK_FALSE(r.retain);
  CHECK(r.profiles.empty());
  CHECK(r.metrics.metric("ndcg@20") > 0);
}

TEST_CASE("magprune lands within one entry of the target") {
  for (double t : {0.5, 0.8, 0.95}) {
    const auto r = run_pipeline(cf_config(Compressor::MagPrune, t)).report;
    CHECK(std::abs(r.metrics.sparsity - t) <= 1.0 / static_cast<double>(r.metrics.full_params));
    CHECK_FALSE(r.flagged);
  }
}

TEST_CASE("pipelines repeat byte-identically under a seed") {
  auto cfg = cf_config(Compressor::Pep, 0.8);
  const auto a = run_pipeline(cfg).report;
  const auto b = run_pipeline(cfg).report;
  CHECK(a.csv_row() == b.csv_row());
  cfg.seed += 1;
  CHECK(run_pipeline(cfg).report.csv_row() != a.csv_row());
}

TEST_CASE("stored retain ratio matches its own metric fields") {
  auto cfg = cf_config(Compressor::Qr, 0.5);
  cfg.baseline = 0.25;
  const auto r = run_pipeline(cfg).report;
  REQUIRE(r.retain);
  CHECK(std::abs(*r.retain - r.metrics.metric(r.primary) / *r.baseline) < 1e-6);

  // And after a trip through report.csv.
  const auto dir = scratch("retain");
  emit_report({r}, dir);
  const auto back = read_report(dir / "report.csv");
  REQUIRE(back.size() == 1);
  CHECK(std::abs(*back[0].retain - back[0].metrics.metric(back[0].primary) / *back[0].baseline) < 1e-6);
}

TEST_CASE("every compressor runs on both ctr backbones") {
  for (auto b : {BackboneKind::DeepFm, BackboneKind::DcnMix}) {
    for (auto c : {Compressor::None, Compressor::Qr, Compressor::Tt, Compressor::Dhe, Compressor::Pep,
                   Compressor::OptEmbed, Compressor::Cerp, Compressor::MagPrune}) {
      CAPTURE(backbone_name(b));
      CAPTURE(compressor_name(c));
      const auto r = run_pipeline(ctr_config(b, c, 0.5)).report;
      CHECK_FALSE(r.flagged);
      const double a = r.metrics.metric("auc");
      CHECK(a >= 0);
      CHECK(a <= 1);
    }
  }
}

TEST_CASE("neumf runs every compressor") {
  for (auto c : {Compressor::Qr, Compressor::Tt, Compressor::Dhe, Compressor::Pep, Compressor::OptEmbed,
                 Compressor::Cerp, Compressor::MagPrune}) {
    CAPTURE(compressor_name(c));
    auto cfg = cf_config(c, 0.5);
    cfg.backbone = BackboneKind::NeuMf;
    cfg.mlp = {16, 8};
    CHECK_FALSE(run_pipeline(cfg).report.flagged);
  }
}

TEST_CASE("unreachable targets and missing data raise typed errors") {
  // Two sqrt(150)-row factors exceed 5% of a 150-row table.
  CHECK_THROWS_AS(run_pipeline(cf_config(Compressor::Qr, 0.95)), UnreachableSparsity);
  auto cfg = cf_config();
  cfg.data = "/nonexistent/u.data";
  CHECK_THROWS_AS(run_pipeline(cfg), DataError);
}

TEST_CASE("profile_run") {
  int calls = 0;
  const auto p = profile_run("train", 64, 1, [&] { ++calls; });
  CHECK(calls == kWarmups + 1);
  CHECK(p.repetitions == 1);
  CHECK(p.batch_size == 64);
  CHECK(p.ms_per_batch >= 0);

  // Twice the parameters never needs less memory on the same batch.
  auto small = cf_config();
  small.epochs = 0;
  small.profile = true;
  small.profile_reps = 1;
  small.profile_batch = 128;
  auto wide = small;
  wide.dim = 16;
  const auto a = run_pipeline(small).report.profiles;
  const auto b = run_pipeline(wide).report.profiles;
  REQUIRE(a.size() == b.size());
  for (std::size_t i = 0; i < a.size(); ++i) {
    CAPTURE(a[i].phase);
    if (a[i].phase == "train") CHECK(a[i].batch_size == 128);
    CHECK(b[i].peak_bytes >= a[i].peak_bytes);
  }
}

TEST_CASE("checkpoints restore scores bit-exactly") {
  auto cfg = cf_config(Compressor::Tt, 0.8);
  cfg.checkpoint = scratch("ckpt") / "m.ckpt";
  const auto data = load_dataset(cfg);
  const auto trained = run_pipeline(cfg, data);
  const auto loaded = load_model(cfg.checkpoint);
  CHECK(format_settings(loaded.config) == format_settings(cfg));
  CHECK(evaluate_model(cfg, data, *loaded.model) == evaluate_model(cfg, data, *trained.model));
  CHECK_THROWS_AS(load_model(scratch("ckpt") / "missing.ckpt"), CheckpointError);
}

TEST_CASE("emit_report writes one row per report and a grouped table") {
  BenchReport r;
  r.metrics.task = "ctr";
  r.metrics.dataset = "criteo";
  r.metrics.backbone = "deepfm";
  r.metrics.compressor = "magprune";
  r.metrics.target = 0.5;
  r.metrics.params = 8690000;
  r.metrics.full_params = 17390000;
  r.metrics.sparsity = 1 - 8.69 / 17.39;
  r.metrics.metrics = {{"auc", 0.8102}, {"logloss", 0.4417}};
  r.primary = "auc";
  const auto dir = scratch("emit");
  emit_report({r}, dir);
  std::istringstream csv(slurp(dir / "report.csv"));
  std::string header, row, extra;
  std::getline(csv, header);
  std::getline(csv, row);
  CHECK(header == r.csv_header());
  CHECK(row == r.csv_row());
  CHECK_FALSE(std::getline(csv, extra));

  const auto table = slurp(dir / "table.txt");
  CHECK(table.find("8.69M") != std::string::npos);
  CHECK(table.find("magprune") != std::string::npos);

  auto half = r;
  half.metrics.params = 870000;
  half.metrics.target = 0.95;
  CHECK(format_table({r, half}).find("870K") != std::string::npos);

  CHECK_THROWS(emit_report({r}, "/proc/lers-not-writable"));
}

#ifdef LERSKIT_BIN
TEST_CASE("cli exit codes") {
  const auto dir = scratch("cli");
  auto run = [&](const std::string& args) {
    const std::string cmd = std::string(LERSKIT_BIN) + " " + args + " > " + (dir / "log.txt").string() + " 2>&1";
    const int status = std::system(cmd.c_str());
    return WIFEXITED(status) ? WEXITSTATUS(status) : -1;
  };
  const std::string data = "--data " + cf_file().string();
  const std::string small = " --set dim=8 --set gamma=0 --set layers=1 --epochs 1 --batch-size 256";
  CHECK(run("train " + data + small + " --out " + (dir / "ok").string()) == 0);
  CHECK(fs::exists(dir / "ok" / "report.csv"));
  CHECK(run("train " + data + " --compressor zip") == 2);
  CHECK(run("train --bogus-flag") == 2);
  CHECK(run("train --data /nonexistent/u.data") == 3);
  CHECK(run("compress " + data + small + " --compressor qr --sparsity 0.95 --out " + (dir / "qr").string()) == 4);

  const auto cfg_file = dir / "run.cfg";
  std::ofstream(cfg_file) << "data=" << cf_file().string() << "\nepochs=1\ndim=8\ngamma=0\nlayers=1\nbatch-size=256\n";
  CHECK(run("train --config " + cfg_file.string() + " --epochs 0 --out " + (dir / "cfg").string()) == 0);
  CHECK(load_config_file(dir / "cfg" / "config.txt").epochs == 0);
}
#endif
