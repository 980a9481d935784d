// Copyright 2026 The LERS Kit Authors
// SPDX-License-Identifier: Apache-2.0

#include "lers/metrics.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <limits>
#include <numeric>
#include <sstream>

namespace lers {
namespace {

std::string real_text(double v) {
  char buf[64];
  auto res = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, res.ptr);
}

}  // namespace

double auc(std::span<const double> scores, std::span<const std::uint8_t> labels) {
  if (scores.size() != labels.size()) throw MetricError("auc: scores and labels differ in length");
  std::vector<std::size_t> order(scores.size());
  std::iota(order.begin(), order.end(), 0);
  std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return scores[a] < scores[b]; });
  // Sum of (1-based, tie-averaged) ranks of the positives.
  double rank_sum = 0;
  std::size_t pos = 0;
  for (std::size_t i = 0; i < order.size();) {
    std::size_t j = i;
    while (j < order.size() && scores[order[j]] == scores[order[i]]) ++j;
    const double avg_rank = 0.5 * static_cast<double>(i + 1 + j);
    for (std::size_t t = i; t < j; ++t) {
      if (labels[order[t]]) {
        rank_sum += avg_rank;
        ++pos;
      }
    }
    i = j;
  }
  const std::size_t neg = scores.size() - pos;
  if (pos == 0 || neg == 0) throw MetricError("auc: needs at least one positive and one negative label");
  const double p = static_cast<double>(pos), n = static_cast<double>(neg);
  return (rank_sum - p * (p + 1) / 2) / (p * n);
}

double log_loss(std::span<const double> probs, std::span<const std::uint8_t> labels, double eps) {
  if (probs.size() != labels.size() || probs.empty()) throw MetricError("log_loss: empty or mismatched input");
  double total = 0;
  for (std::size_t i = 0; i < probs.size(); ++i) {
    const double p = std::clamp(probs[i], eps, 1 - eps);
    total -= labels[i] ? std::log(p) : std::log(1 - p);
  }
  return total / static_cast<double>(probs.size());
}

double ndcg_at_k(std::span<const Index> ranked, std::span<const Index> relevant, std::size_t k) {
  if (k == 0) throw MetricError("ndcg_at_k: k must be at least 1");
  if (relevant.empty()) return 0;
  double dcg = 0;
  const std::size_t depth = std::min(k, ranked.size());
  for (std::size_t j = 0; j < depth; ++j) {
    if (std::binary_search(relevant.begin(), relevant.end(), ranked[j])) dcg += 1 / std::log2(static_cast<double>(j) + 2);
  }
  double idcg = 0;
  for (std::size_t j = 0; j < std::min(k, relevant.size()); ++j) idcg += 1 / std::log2(static_cast<double>(j) + 2);
  return dcg / idcg;
}

double recall_at_k(std::span<const Index> ranked, std::span<const Index> relevant, std::size_t k) {
  if (k == 0) throw MetricError("recall_at_k: k must be at least 1");
  if (relevant.empty()) return 0;
  std::size_t hits = 0;
  for (std::size_t j = 0; j < std::min(k, ranked.size()); ++j) {
    hits += std::binary_search(relevant.begin(), relevant.end(), ranked[j]) ? 1 : 0;
  }
  return static_cast<double>(hits) / static_cast<double>(relevant.size());
}

std::vector<Index> topk_recommend(std::span<const Real> scores, std::span<const Index> exclude, std::size_t k) {
  std::vector<Index> candidates;
  candidates.reserve(scores.size());
  for (Index i = 0; i < static_cast<Index>(scores.size()); ++i) {
    if (!std::binary_search(exclude.begin(), exclude.end(), i)) candidates.push_back(i);
  }
  const std::size_t take = std::min(k, candidates.size());
  auto better = [&](Index a, Index b) { return scores[a] != scores[b] ? scores[a] > scores[b] : a < b; };
  std::partial_sort(candidates.begin(), candidates.begin() + static_cast<std::ptrdiff_t>(take), candidates.end(), better);
  candidates.resize(take);
  return candidates;
}

double retain_ratio(double compressed, double original) {
  if (!(original > 0)) throw MetricError("retain_ratio: original metric must be positive");
  return compressed / original;
}

double overall_retain_ratio(std::span<const double> ratios) {
  if (ratios.empty()) throw MetricError("overall_retain_ratio: no ratios");
  return std::accumulate(ratios.begin(), ratios.end(), 0.0) / static_cast<double>(ratios.size());
}

RankingMetrics evaluate_ranking(const UserScorer& scorer, const UserItemIndex& train, const InteractionSet& heldout,
                                std::size_t k) {
  const auto by_user = heldout.items_by_user();
  RankingMetrics out;
  std::vector<Real> scores(static_cast<std::size_t>(heldout.num_items));
  for (Index u = 0; u < static_cast<Index>(by_user.size()); ++u) {
    const auto& relevant = by_user[u];
    if (relevant.empty()) continue;
    scorer(u, scores);
    const auto& seen = u < train.num_users() ? train.items(u) : std::vector<Index>{};
    const auto ranked = topk_recommend(scores, seen, k);
    out.ndcg += ndcg_at_k(ranked, relevant, k);
    out.recall += recall_at_k(ranked, relevant, k);
    ++out.users;
  }
  if (out.users > 0) {
    out.ndcg /= static_cast<double>(out.users);
    out.recall /= static_cast<double>(out.users);
  }
  return out;
}

std::string format_count(std::int64_t count) {
  char buf[32];
  const double v = static_cast<double>(count);
  if (count >= 1000000) {
    std::snprintf(buf, sizeof buf, "%.2fM", v / 1e6);
  } else if (count >= 1000) {
    std::snprintf(buf, sizeof buf, "%.0fK", v / 1e3);
  } else {
    std::snprintf(buf, sizeof buf, "%lld", static_cast<long long>(count));
  }
  return buf;
}

double MetricReport::metric(const std::string& name) const {
  for (const auto& [k, v] : metrics) {
    if (k == name) return v;
  }
  throw MetricError("report has no metric '" + name + "'");
}

bool MetricReport::has_metric(const std::string& name) const {
  return std::any_of(metrics.begin(), metrics.end(), [&](const auto& m) { return m.first == name; });
}

void MetricReport::validate() const {
  for (const auto& [name, v] : metrics) {
    const bool unit = name == "auc" || name.starts_with("ndcg") || name.starts_with("recall");
    if (!std::isfinite(v) || (unit && (v < 0 || v > 1)) || v < 0) {
      throw MetricError("metric " + name + "=" + real_text(v) + " outside its range");
    }
  }
}

std::string MetricReport::csv_header() const {
  std::string h = "task,dataset,backbone,compressor,target,params,full_params,sparsity";
  for (const auto& m : metrics) h += "," + m.first;
  return h;
}

std::string MetricReport::csv_row() const {
  std::ostringstream row;
  row << task << ',' << dataset << ',' << backbone << ',' << compressor << ',' << real_text(target) << ',' << params
      << ',' << full_params << ',' << real_text(sparsity);
  for (const auto& m : metrics) row << ',' << real_text(m.second);
  return row.str();
}

}  // namespace lers
