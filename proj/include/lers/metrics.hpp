// Copyright 2026 The LERS Kit Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstdint>
#include <functional>
#include <span>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "lers/data.hpp"

namespace lers {

class MetricError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// Probability a random positive outscores a random negative (ties 0.5),
/// by rank sum. Throws MetricError on single-class input.
double auc(std::span<const double> scores, std::span<const std::uint8_t> labels);
/// Mean binary cross-entropy with predictions clipped to [eps, 1 - eps].
double log_loss(std::span<const double> probs, std::span<const std::uint8_t> labels, double eps = 1e-7);

/// Binary-gain NDCG with a 1/log2(rank + 1) discount. `relevant` must be sorted.
double ndcg_at_k(std::span<const Index> ranked, std::span<const Index> relevant, std::size_t k);
double recall_at_k(std::span<const Index> ranked, std::span<const Index> relevant, std::size_t k);

/// Top-k items by score, skipping the sorted `exclude` ids; ties go to the
/// lower id. Returns fewer than k items when not enough remain.
std::vector<Index> topk_recommend(std::span<const Real> scores, std::span<const Index> exclude, std::size_t k);

double retain_ratio(double compressed, double original);
/// Arithmetic mean of per-dataset ratios.
double overall_retain_ratio(std::span<const double> ratios);

struct RankingMetrics {
  double ndcg = 0;
  double recall = 0;
  std::size_t users = 0;  // users with a non-empty held-out set
};

/// Fills `scores` (size num_items) for one user.
using UserScorer = std::function<void(Index user, std::vector<Real>& scores)>;

/// Macro-averaged NDCG@k and Recall@k over users with held-out items, with
/// each user's train items masked out.
RankingMetrics evaluate_ranking(const UserScorer& scorer, const UserItemIndex& train, const InteractionSet& heldout,
                                std::size_t k);

/// "8.69M", "870K", or the plain number below a thousand.
std::string format_count(std::int64_t count);

struct MetricReport {
  std::string task;        // cf | ctr
  std::string dataset;
  std::string backbone;
  std::string compressor;  // none, qr, ...
  double target = 0;
  std::vector<std::pair<std::string, double>> metrics;
  std::int64_t params = 0;       // counted embedding parameters
  std::int64_t full_params = 0;  // n * d of the uncompressed table
  double sparsity = 0;

  double metric(const std::string& name) const;
  bool has_metric(const std::string& name) const;
  /// Fails when a metric leaves its defined range.
  void validate() const;
  std::string csv_header() const;
  std::string csv_row() const;
};

}  // namespace lers
