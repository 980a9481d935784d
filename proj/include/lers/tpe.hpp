// Copyright 2026 The LERS Kit Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <map>
#include <random>
#include <string>
#include <utility>
#include <variant>
#include <vector>

namespace lers::tpe {

struct ParamSpec {
  enum class Kind { Continuous, Categorical };

  std::string name;
  Kind kind = Kind::Continuous;
  double lo = 0;
  double hi = 1;
  bool log_scale = false;
  std::vector<std::string> choices;
};

using ParamValue = std::variant<double, std::string>;
using Config = std::map<std::string, ParamValue>;

class SearchSpace {
 public:
  SearchSpace& add_real(std::string name, double lo, double hi, bool log_scale = false);
  SearchSpace& add_choice(std::string name, std::vector<std::string> choices);

  const std::vector<ParamSpec>& params() const { return params_; }
  const ParamSpec& param(const std::string& name) const;
  bool empty() const { return params_.empty(); }
  /// True when every parameter is present, in bounds and a known choice.
  bool contains(const Config& config) const;

 private:
  std::vector<ParamSpec> params_;
};

double real_of(const Config& config, const std::string& name);
const std::string& choice_of(const Config& config, const std::string& name);

/// "name=value;name=value", in name order.
std::string format_config(const Config& config);
Config parse_config(const SearchSpace& space, const std::string& text);

struct Trial {
  std::size_t index = 0;
  Config config;
  double y = 0;  // maximized; failed trials hold kFailed
  double seconds = 0;
  bool failed = false;
};

constexpr double kFailed = -1e300;

using History = std::vector<Trial>;

enum class ThresholdRule {
  Quantile,    // good = y above the (1 - γ) quantile
  BestSingle,  // good = the single best trial
};

struct Split {
  std::vector<std::size_t> good;  // indices into the history
  std::vector<std::size_t> bad;
};

/// Partitions trials into good and bad. Both sides are non-empty whenever at
/// least two distinct y values exist; with a single trial `bad` is empty.
Split split_history(const History& history, double gamma = 0.25, ThresholdRule rule = ThresholdRule::Quantile);

/// Per-dimension Parzen estimator. Continuous dimensions work in the
/// (log-)transformed coordinate, where the density integrates to 1 over the
/// bounds: one truncated Gaussian per sample plus a prior component spanning
/// the range. Categorical dimensions use add-one smoothed frequencies.
class ParzenDensity {
 public:
  ParzenDensity(const ParamSpec& spec, std::vector<ParamValue> samples);

  /// Density at a value given in the parameter's natural units.
  double pdf(const ParamValue& value) const;
  /// Density in the transformed coordinate (continuous only).
  double pdf_transformed(double t) const;
  ParamValue sample(std::mt19937_64& rng) const;

  const std::vector<double>& means() const { return mu_; }
  const std::vector<double>& bandwidths() const { return sigma_; }

 private:
  ParamSpec spec_;
  double a_ = 0, b_ = 1;  // transformed bounds
  std::vector<double> mu_, sigma_, mass_;
  std::vector<double> category_p_;
};

/// One draw from the prior: uniform, log-uniform or uniform over choices.
Config sample_prior(const SearchSpace& space, std::mt19937_64& rng);

struct SuggestOptions {
  std::size_t omega = 10;  // random trials before the model kicks in
  std::size_t candidates = 24;
  double gamma = 0.25;
  ThresholdRule rule = ThresholdRule::Quantile;
};

Config suggest(const SearchSpace& space, const History& history, const SuggestOptions& opts, std::mt19937_64& rng);

/// Maps (config, trial seed) to a validation metric to maximize.
using Objective = std::function<double(const Config& config, std::uint64_t seed)>;

struct StudyOptions {
  SuggestOptions suggest;
  std::size_t max_trials = 30;
  std::uint64_t seed = 0;
  /// CSV log; trials already in it are reused and count toward max_trials.
  std::filesystem::path log_path;
};

struct StudyResult {
  Trial best;
  History history;
  std::size_t evaluations = 0;  // objective calls made by this run
};

/// Sequential TPE. A throwing objective records a failed trial and the study
/// goes on; each trial's suggestion depends only on (seed, index, history).
StudyResult run_study(const Objective& objective, const SearchSpace& space, const StudyOptions& opts);

void write_log_header(const std::filesystem::path& path);
void append_log(const std::filesystem::path& path, const Trial& trial);
History read_log(const std::filesystem::path& path, const SearchSpace& space);

}  // namespace lers::tpe
