// Copyright 2026 The LERS Kit Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <memory>
#include <optional>
#include <random>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

#include "lers/backbones.hpp"
#include "lers/data.hpp"
#include "lers/metrics.hpp"
#include "lers/tpe.hpp"

namespace lers::bench {

class ConfigError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

enum class Task { Cf, Ctr };
enum class Compressor { None, Qr, Tt, Dhe, Pep, OptEmbed, Cerp, MagPrune };

std::string_view task_name(Task task);
Task parse_task(std::string_view name);
std::string_view compressor_name(Compressor c);
Compressor parse_compressor(std::string_view name);
/// Pruning methods land on an exact entry count; the rest are compositional.
bool is_pruning(Compressor c);

struct ExperimentConfig {
  Task task = Task::Cf;
  BackboneKind backbone = BackboneKind::LightGcn;
  Compressor compressor = Compressor::None;
  double target = 0.5;  // ignored when compressor is none
  std::filesystem::path data;
  std::filesystem::path schema;  // ctr only
  std::string dataset;           // report label; defaults to the data directory name
  std::uint64_t seed = 2024;
  std::uint64_t split_seed = 42;
  int epochs = 20;
  std::size_t batch_size = 2048;
  double valid_fraction = 0.1;
  double test_fraction = 0.2;
  std::size_t min_freq = 2;  // ctr vocabulary cutoff

  // Model and optimizer.
  Index dim = 0;  // 0 picks the backbone default
  std::vector<std::size_t> mlp;  // empty picks the backbone default
  double lr = 1e-3;
  double l2 = 1e-6;
  double dropout = 0;
  std::size_t negatives = 1;
  std::size_t topk = 20;
  int layers = 3;  // LightGCN propagation or DCN cross layers
  double gamma = 0.1;
  double tau = 0.2;
  double init_stddev = 0.1;

  // Method knobs.
  Index n_min = 0;               // magprune
  int search_epochs = 50;        // pep / cerp: cap on the sparsification phase
  double str_penalty = 1e-4;     // pep / cerp
  double penalty_growth = 2.0;   // pep / cerp
  double threshold_lr = 0.02;    // pep / cerp
  double str_init = -6;          // pep / cerp
  double cerp_weight = 1e-3;     // cerp
  int supernet_epochs = 0;       // optembed; 0 means `epochs`
  int population = 10;           // optembed
  int generations = 5;           // optembed
  bool feature_mask = true;      // optembed

  // Tuning.
  bool tuning = false;
  std::size_t trials = 30;
  int tune_epochs = 0;  // 0 means `epochs`
  std::vector<std::string> tune_params{"lr", "l2"};

  // Profiling and output.
  bool profile = true;
  std::size_t profile_batch = 2048;
  int profile_reps = 5;
  std::filesystem::path out;
  std::filesystem::path checkpoint;
  std::optional<double> baseline;  // primary metric of the reference run

  /// Throws ConfigError.
  void validate() const;
  std::string dataset_name() const;
  /// Primary metric name: ndcg@k for cf, auc for ctr.
  std::string primary_metric() const;
};

/// Applies one `key=value` setting; keys match the long CLI flags.
void apply_setting(ExperimentConfig& cfg, std::string_view key, std::string_view value);
/// Reads `key=value` lines (blank lines and `#` comments ignored) over `base`.
ExperimentConfig load_config_file(const std::filesystem::path& path, ExperimentConfig base = {});
/// Every setting as `key=value` lines; load_config_file reads it back.
std::string format_settings(const ExperimentConfig& cfg);

// ---------------------------------------------------------------------------

struct CfData {
  InteractionSet train, valid, test;
  /// Id frequencies in unified (user, then item) order.
  std::vector<std::int64_t> frequencies() const;
};

struct CtrData {
  CtrSchema schema;
  FeatureVocab vocab;
  CtrRecordSet train, valid, test;
};

struct Dataset {
  Task task = Task::Cf;
  std::string name;
  std::optional<CfData> cf;
  std::optional<CtrData> ctr;
};

/// Loads and splits the data named by the config. Throws DataError.
Dataset load_dataset(const ExperimentConfig& cfg);

using TableFactory = std::function<std::unique_ptr<EmbeddingLayer>(const EmbeddingSpec&, std::mt19937_64&)>;

/// Backbone with every table from `make_table` (drawn in table order, before
/// any dense parameter).
std::unique_ptr<Backbone> build_model(const ExperimentConfig& cfg, const Dataset& data, const TableFactory& make_table,
                                      std::mt19937_64& rng);

/// Ranks items by train popularity for every user.
UserScorer most_popular_scorer(const InteractionSet& train);

/// Test (or validation) metrics of a model; names as in MetricReport.
std::vector<std::pair<std::string, double>> evaluate_model(const ExperimentConfig& cfg, const Dataset& data,
                                                           const Backbone& model, bool on_test = true);

// ---------------------------------------------------------------------------

struct ProfileResult {
  std::string phase;  // train, inference, build cache
  double ms_per_batch = 0;
  std::size_t peak_bytes = 0;
  std::size_t batch_size = 0;
  int repetitions = 0;
};

inline constexpr int kWarmups = 3;

/// Median wall time of `step` over `repetitions` runs after kWarmups
/// warm-ups, with the tracked-allocator high-water mark over the timed runs.
ProfileResult profile_run(const std::string& phase, std::size_t batch_size, int repetitions,
                          const std::function<void()>& step);

/// Train-step and inference profiles of a model. CF inference materializes
/// every user and item embedding.
std::vector<ProfileResult> profile_model(const ExperimentConfig& cfg, const Dataset& data, Backbone& model);

struct BenchReport {
  MetricReport metrics;
  std::vector<ProfileResult> profiles;
  std::string primary;  // name of the metric the retain ratio uses
  std::optional<double> baseline;
  std::optional<double> retain;
  bool flagged = false;  // achieved sparsity outside the method's tolerance

  std::string csv_header() const;
  std::string csv_row() const;
};

/// Allowed |achieved - target|: 1/N entries for pruning, 0.02 otherwise.
double sparsity_tolerance(Compressor c, std::int64_t entries);

struct PipelineResult {
  BenchReport report;
  std::unique_ptr<Backbone> model;
};

/// Builds, compresses, trains and evaluates one configuration, then profiles
/// it when cfg.profile is set. Tuning, when on, runs first on the
/// validation split. Throws ConfigError, DataError, UnreachableSparsity,
/// SparsityNotReached or NoFeasibleCandidate.
PipelineResult run_pipeline(const ExperimentConfig& cfg, const Dataset& data);
PipelineResult run_pipeline(const ExperimentConfig& cfg);

/// Applies MagPrune to a trained model's full tables (jointly when there are
/// several) and returns the achieved sparsity.
double prune_model(Backbone& model, double target, Index n_min);

/// TPE over cfg.tune_params, maximizing the validation metric.
tpe::StudyResult tune(const ExperimentConfig& cfg, const Dataset& data, const std::filesystem::path& log_path = {});
/// `cfg` with a study configuration's values applied.
ExperimentConfig with_trial(ExperimentConfig cfg, const tpe::Config& trial);

void save_model(const Backbone& model, const ExperimentConfig& cfg, const std::filesystem::path& path);
struct LoadedModel {
  ExperimentConfig config;
  std::unique_ptr<Backbone> model;
};
LoadedModel load_model(const std::filesystem::path& path);

/// report.csv (metrics only, deterministic), profile.csv and an aligned
/// table.txt grouped by (target, method). Throws std::runtime_error when the
/// directory is not writable.
void emit_report(const std::vector<BenchReport>& reports, const std::filesystem::path& dir);
std::string format_table(const std::vector<BenchReport>& reports);
/// Reads the rows of a report.csv written by emit_report.
std::vector<BenchReport> read_report(const std::filesystem::path& csv);

}  // namespace lers::bench
