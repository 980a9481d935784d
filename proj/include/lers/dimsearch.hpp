// Copyright 2026 The LERS Kit Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstdint>
#include <functional>
#include <random>
#include <string>
#include <vector>

#include "lers/checkpoint.hpp"
#include "lers/embedding.hpp"

namespace lers {

/// p_i = alpha^(h-i) / sum_j alpha^(h-j), i in [1, h].
double dim_probability(Index h, double alpha, Index i);
/// alpha/(alpha-1) - h/(alpha^h - 1); (h+1)/2 at alpha = 1.
double expected_hidden_size(Index h, double alpha);
/// The alpha >= 1 whose expected size is `target`, for 1 < target <= (h+1)/2.
/// Gradient descent on the squared error, finished by bisection.
double solve_alpha(Index h, double target);

/// Embedding widths 1..h drawn with geometric tilt alpha.
class GeometricDimDistribution {
 public:
  GeometricDimDistribution(Index h, double alpha);
  /// Distribution whose expected width is (1 - sparsity) * h, clamped to
  /// the attainable range.
  static GeometricDimDistribution for_sparsity(Index h, double sparsity);

  Index h() const { return h_; }
  double alpha() const { return alpha_; }
  double probability(Index i) const { return dim_probability(h_, alpha_, i); }
  double mean() const { return expected_hidden_size(h_, alpha_); }
  Index sample(std::mt19937_64& rng) const;

 private:
  Index h_;
  double alpha_;
  std::vector<double> cdf_;
};

/// One sampled width per field.
std::vector<Index> sample_dim_mask(const GeometricDimDistribution& dist, std::size_t fields, std::mt19937_64& rng);

/// Runs `epochs` epochs, resampling the supernet's widths before every batch.
/// The epoch callback must call `before_batch` ahead of each forward pass.
/// Widths are restored to h afterwards.
using SupernetEpochFn = std::function<void(const std::function<void()>& before_batch)>;
void train_supernet(Supernet& net, const GeometricDimDistribution& dist, int epochs, std::mt19937_64& rng,
                    const SupernetEpochFn& epoch);

struct SearchConfig {
  int population = 20;
  int generations = 15;
  double mutation = 0.1;   // per gene
  double crossover = 0.5;  // chance a child comes from two parents
  double target = 0.5;     // minimum sparsity of a candidate
  double max_overshoot = 0.02;  // candidates above target + this are rejected too
  bool feature_mask = false;    // also search per-field row keep ratios
  int max_resample = 2000;

  void validate() const;
};

/// Row keep ratios searched per field when the feature mask is on.
constexpr int kKeepLevels = 10;

struct DimCandidate {
  std::vector<Index> dims;
  std::vector<int> keep_levels;  // per field, 1..kKeepLevels tenths kept; empty when off
  double sparsity = 0;
  double fitness = 0;
};

struct SearchResult {
  DimCandidate best;
  std::vector<std::uint8_t> row_keep;  // empty when the feature mask is off
  int evaluations = 0;
  int generations = 0;

  void save(Checkpoint& ck, const std::string& prefix) const;
  static SearchResult load(const Checkpoint& ck, const std::string& prefix);
};

class NoFeasibleCandidate : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Fitness of the supernet under its current masks (higher is better).
using FitnessFn = std::function<double(Supernet&)>;

/// Evolutionary search over per-field widths (and keep ratios). Candidates
/// outside [target, target + max_overshoot] sparsity are repaired or
/// discarded before evaluation. Leaves `net` set to the best candidate.
SearchResult evolutionary_search(Supernet& net, const GeometricDimDistribution& dist, const SearchConfig& cfg,
                                 const FitnessFn& fitness, std::mt19937_64& rng);

/// Rows kept by per-field keep levels: the highest-norm rows of each field.
std::vector<std::uint8_t> keep_rows_by_norm(const Supernet& net, const std::vector<int>& keep_levels);

}  // namespace lers
