// Copyright 2026 The LERS Kit Authors
// SPDX-License-Identifier: Apache-2.0

#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>
#include <set>

#include "doctest.h"
#include "lers/metrics.hpp"
#include "oracles.hpp"

using namespace lers;
using namespace lers::testing;

TEST_CASE("auc examples and oracle") {
  std::vector<double> s{0.9, 0.4, 0.5, 0.1};
  std::vector<std::uint8_t> y{1, 1, 0, 0};
  CHECK(auc(s, y) == 0.75);
  CHECK(auc(std::vector<double>{3, 4, 1, 2}, y) == 1.0);
  CHECK(auc(std::vector<double>{1, 1, 1, 1}, y) == 0.5);
  CHECK_THROWS_AS(auc(s, std::vector<std::uint8_t>{1, 1, 1, 1}), MetricError);
  CHECK_THROWS_AS(auc(s, std::vector<std::uint8_t>{1, 1}), MetricError);

  std::mt19937_64 rng(1);
  for (int trial = 0; trial < 300; ++trial) {
    const std::size_t m = 2 + rng() % 199;
    std::vector<double> sc(m);
    std::vector<std::uint8_t> lab(m);
    for (std::size_t i = 0; i < m; ++i) {
      sc[i] = static_cast<double>(rng() % 20) / 4;  // plenty of ties
      lab[i] = rng() % 3 == 0;
    }
    lab[0] = 1;
    lab[1] = 0;
    const double a = auc(sc, lab);
    CHECK(a == auc_pairs(sc, lab));
    // Strictly increasing transforms leave it unchanged.
    std::vector<double> tr(m);
    for (std::size_t i = 0; i < m; ++i) tr[i] = std::exp(sc[i]) * 3 - 1;
    CHECK(auc(tr, lab) == a);
  }
}

TEST_CASE("log_loss") {
  CHECK(log_loss(std::vector<double>{0.5}, std::vector<std::uint8_t>{1}) == doctest::Approx(std::log(2.0)));
  CHECK(log_loss(std::vector<double>{1.0}, std::vector<std::uint8_t>{0}) == doctest::Approx(-std::log(1e-7)));
  CHECK(log_loss(std::vector<double>{1.0}, std::vector<std::uint8_t>{1}) <= -std::log(1 - 1e-7) + 1e-15);
}

TEST_CASE("ndcg and recall examples") {
  const std::vector<Index> ab{0, 1};
  CHECK(ndcg_at_k(ab, std::vector<Index>{1}, 2) == doctest::Approx(1 / std::log2(3.0)));
  CHECK(ndcg_at_k(ab, std::vector<Index>{0}, 2) == 1.0);
  CHECK(ndcg_at_k(ab, std::vector<Index>{5}, 2) == 0.0);
  CHECK(ndcg_at_k(ab, std::vector<Index>{}, 2) == 0.0);
  CHECK(recall_at_k(ab, std::vector<Index>{1, 2}, 2) == 0.5);
  CHECK(recall_at_k(ab, std::vector<Index>{0, 1}, 2) == 1.0);
  CHECK_THROWS_AS(ndcg_at_k(ab, std::vector<Index>{1}, 0), MetricError);
  // A deeper cutoff raises the ideal DCG: NDCG itself is not monotone in k.
  CHECK(ndcg_at_k(ab, std::vector<Index>{0, 2}, 1) == 1.0);
  CHECK(ndcg_at_k(ab, std::vector<Index>{0, 2}, 2) == doctest::Approx(1 / (1 + 1 / std::log2(3.0))));
}

TEST_CASE("ranking metrics against set oracles and monotone in k") {
  std::mt19937_64 rng(2);
  for (int trial = 0; trial < 300; ++trial) {
    const Index items = 1 + static_cast<Index>(rng() % 32);
    std::vector<Index> perm(items);
    std::iota(perm.begin(), perm.end(), 0);
    std::shuffle(perm.begin(), perm.end(), rng);
    std::set<Index> rel;
    for (Index i = 0; i < items; ++i)
      if (rng() % 4 == 0) rel.insert(i);
    const std::vector<Index> relv(rel.begin(), rel.end());
    double prev_n = 0, prev_r = 0;
    for (std::size_t k = 1; k <= static_cast<std::size_t>(items) + 2; ++k) {
      std::set<Index> top(perm.begin(), perm.begin() + std::min<std::size_t>(k, perm.size()));
      std::vector<Index> inter;
      std::set_intersection(top.begin(), top.end(), rel.begin(), rel.end(), std::back_inserter(inter));
      const double r = recall_at_k(perm, relv, k);
      CHECK(r == (rel.empty() ? 0.0 : static_cast<double>(inter.size()) / rel.size()));
      const double n = ndcg_at_k(perm, relv, k);
      CHECK(n >= 0);
      CHECK(n <= 1 + 1e-12);
      // The IDCG normalizer grows with k, so only the unnormalized DCG is monotone.
      double idcg = 0;
      for (std::size_t j = 0; j < std::min(k, rel.size()); ++j) idcg += 1 / std::log2(j + 2.0);
      CHECK(n * idcg >= prev_n - 1e-12);
      CHECK(r >= prev_r);
      // NDCG is 1 exactly when the ideal-length prefix is all relevant.
      const std::size_t ideal = std::min(k, rel.size());
      bool prefix_relevant = !rel.empty();
      for (std::size_t j = 0; j < ideal; ++j) prefix_relevant &= rel.count(perm[j]) > 0;
      CHECK((std::abs(n - 1) < 1e-12) == prefix_relevant);
      prev_n = n * idcg;
      prev_r = r;
    }
  }
}

TEST_CASE("topk_recommend") {
  std::vector<Real> s{9, 1, 5};
  CHECK(topk_recommend(s, std::vector<Index>{0}, 2) == std::vector<Index>{2, 1});
  CHECK(topk_recommend(s, std::vector<Index>{}, 10) == std::vector<Index>{0, 2, 1});
  CHECK(topk_recommend(std::vector<Real>{1, 1, 1}, std::vector<Index>{}, 3) == std::vector<Index>{0, 1, 2});
  CHECK(topk_recommend(s, std::vector<Index>{0, 1, 2}, 2).empty());

  SUBCASE("full-permutation oracle for small catalogs") {
    std::mt19937_64 rng(3);
    for (int trial = 0; trial < 60; ++trial) {
      const Index n = 1 + static_cast<Index>(rng() % 7);
      std::vector<Real> sc(n);
      for (auto& v : sc) v = static_cast<Real>(rng() % 4);
      std::vector<Index> train;
      for (Index i = 0; i < n; ++i)
        if (rng() % 4 == 0) train.push_back(i);
      std::vector<Index> free;
      for (Index i = 0; i < n; ++i)
        if (!std::binary_search(train.begin(), train.end(), i)) free.push_back(i);
      // The unique permutation in which every adjacent pair is correctly ordered.
      std::vector<Index> best;
      std::vector<Index> p = free;
      do {
        bool ok = true;
        for (std::size_t j = 0; j + 1 < p.size(); ++j) {
          const Index a = p[j], b = p[j + 1];
          ok &= sc[a] > sc[b] || (sc[a] == sc[b] && a < b);
        }
        if (ok) best = p;
      } while (std::next_permutation(p.begin(), p.end()));
      const std::size_t k = 1 + rng() % (n + 1);
      best.resize(std::min(k, best.size()));
      CHECK(topk_recommend(sc, train, k) == best);
    }
  }
  SUBCASE("repeated-argmax oracle up to 32 items") {
    std::mt19937_64 rng(4);
    for (int trial = 0; trial < 300; ++trial) {
      const Index n = 1 + static_cast<Index>(rng() % 32);
      std::vector<Real> sc(n);
      for (auto& v : sc) v = static_cast<Real>(rng() % 6) / 2;
      std::set<Index> train;
      for (Index i = 0; i < n; ++i)
        if (rng() % 5 == 0) train.insert(i);
      const std::size_t k = 1 + rng() % 20;
      CHECK(topk_recommend(sc, std::vector<Index>(train.begin(), train.end()), k) == topk_oracle(sc, train, k));
    }
  }
}

TEST_CASE("retain ratio fixtures") {
  const double yelp = retain_ratio(0.0566, 0.0575);
  CHECK(std::round(yelp * 1e4) / 1e4 == doctest::Approx(0.9843));
  CHECK(retain_ratio(0.3, 0.3) == 1.0);
  CHECK_THROWS_AS(retain_ratio(0.1, 0.0), MetricError);
  const double gowalla = retain_ratio(0.1447, 0.1470);
  CHECK(std::round(gowalla * 1e4) / 1e4 == doctest::Approx(0.9844));
  const double ratios[] = {yelp, gowalla};
  CHECK(std::round(overall_retain_ratio(ratios) * 1e4) / 1e4 == doctest::Approx(0.9844));
}

TEST_CASE("evaluate_ranking macro-averages users with held-out items") {
  InteractionSet train{3, 4, {{0, 0}, {1, 1}}, SplitTag::Train};
  InteractionSet test{3, 4, {{0, 1}, {1, 2}, {1, 3}}, SplitTag::Test};
  UserItemIndex idx(train);
  // Everybody prefers lower ids.
  auto scorer = [](Index, std::vector<Real>& s) {
    for (std::size_t i = 0; i < s.size(); ++i) s[i] = -static_cast<Real>(i);
  };
  auto m = evaluate_ranking(scorer, idx, test, 2);
  CHECK(m.users == 2);
  // User 0: ranked [1, 2], relevant {1} -> 1. User 1: ranked [0, 2], relevant {2, 3}.
  const double u1 = (1 / std::log2(3.0)) / (1 + 1 / std::log2(3.0));
  CHECK(m.ndcg == doctest::Approx((1 + u1) / 2));
  CHECK(m.recall == doctest::Approx((1 + 0.5) / 2));
}

TEST_CASE("format_count and report rows") {
  CHECK(format_count(8690000) == "8.69M");
  CHECK(format_count(17390000) == "17.39M");
  CHECK(format_count(870000) == "870K");
  CHECK(format_count(999) == "999");
  MetricReport r{"cf", "ml", "lightgcn", "magprune", 0.5, {{"ndcg@20", 0.1}, {"recall@20", 0.2}}, 5, 10, 0.5};
  CHECK(r.csv_header() == "task,dataset,backbone,compressor,target,params,full_params,sparsity,ndcg@20,recall@20");
  CHECK(r.csv_row() == "cf,ml,lightgcn,magprune,0.5,5,10,0.5,0.1,0.2");
  CHECK(r.metric("ndcg@20") == 0.1);
  CHECK_NOTHROW(r.validate());
  r.metrics.push_back({"auc", 1.5});
  CHECK_THROWS_AS(r.validate(), MetricError);
}
