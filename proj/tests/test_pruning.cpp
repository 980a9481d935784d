// Copyright 2026 The LERS Kit Authors
// SPDX-License-Identifier: Apache-2.0

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <numeric>
#include <random>
#include <set>
#include <tuple>

#include "doctest.h"
#include "gradcheck.hpp"
#include "lers/pruning.hpp"
#include "oracles.hpp"

using namespace lers;
using namespace lers::testing;

namespace {

Tensor masked(const Tensor& e, const Tensor& m) {
  Tensor out = e;
  for (std::size_t i = 0; i < out.size(); ++i) out[i] *= m[i];
  return out;
}

}  // namespace

TEST_CASE("magnitude_prune worked examples") {
  auto e = Tensor::matrix(2, 2, {0.5, -0.1, 0.2, -0.3});
  auto csr = magnitude_prune({2, 2}, e, {0.5, 0});
  CHECK(csr->to_dense() == Tensor::matrix(2, 2, {0.5, 0, 0, -0.3}));
  CHECK(csr->sparsity() == doctest::Approx(0.5));

  auto e2 = Tensor::matrix(2, 2, {0.5, 0.01, 0.2, 0.3});
  CHECK(magnitude_prune({2, 2}, e2, {0.5, 1})->to_dense() == Tensor::matrix(2, 2, {0.5, 0, 0, 0.3}));

  CHECK(magnitude_prune({2, 2}, e, {0.0, 0})->to_dense() == e);

  FullTable full({2, 2}, e);
  CHECK(magnitude_prune(full, {0.5, 0})->nnz() == 2);
}

TEST_CASE("unsatisfiable n_min is rejected up front") {
  auto e = Tensor::matrix(2, 3, {1, 2, 3, 4, 5, 6});
  CHECK_THROWS_AS(magnitude_mask(e, {0.5, 2}), std::invalid_argument);  // needs 4 of 3 kept
  CHECK_THROWS_AS(magnitude_mask(e, {0.1, 4}), std::invalid_argument);  // wider than a row
  CHECK_THROWS_AS(magnitude_mask(e, {1.5, 0}), std::invalid_argument);
  CHECK_NOTHROW(magnitude_mask(e, {0.5, 1}));
  CHECK(e == Tensor::matrix(2, 3, {1, 2, 3, 4, 5, 6}));
  CHECK_THROWS_AS(magnitude_prune({3, 2}, e, {0.5, 0}), ShapeError);
}

TEST_CASE("magnitude_prune equals the full-sort oracle on random tables") {
  std::mt19937_64 rng(7);
  std::uniform_int_distribution<std::size_t> dim_n(1, 120), dim_d(1, 40);
  const double targets[] = {0.5, 0.8, 0.95, 0.3, 0.999};
  int checked = 0;
  for (int trial = 0; trial < 200; ++trial) {
    const std::size_t n = dim_n(rng), d = dim_d(rng);
    if (n * d > 10000) continue;
    const double t = targets[trial % 5];
    const auto e = random_table(n, d, rng, trial % 2 == 0);
    // Largest n_min the budget allows, capped at 3.
    const auto kept = static_cast<Index>(n * d) - prune_count(static_cast<Index>(n * d), t);
    const Index n_min = std::min<Index>({static_cast<Index>(trial % 4), static_cast<Index>(d), kept / static_cast<Index>(n)});
    const EmbeddingSpec spec{static_cast<Index>(n), static_cast<Index>(d)};
    auto csr = magnitude_prune(spec, e, {t, n_min});
    const Tensor got = csr->to_dense();
    REQUIRE_MESSAGE(got == magprune_oracle(e, t, n_min), "trial " << trial << " n=" << n << " d=" << d);

    // Masks carry kept zero-valued entries too, so check counts on the mask.
    const Tensor mask = csr->mask();
    CHECK(static_cast<std::int64_t>(n * d) - csr->nnz() == prune_count(static_cast<Index>(n * d), t));
    CHECK(std::abs(csr->sparsity() - t) <= 1.0 / static_cast<double>(n * d) + 1e-12);
    for (std::size_t r = 0; r < n; ++r) {
      Index row_kept = 0;
      for (std::size_t c = 0; c < d; ++c) row_kept += mask.at(r, c) != 0;
      CHECK(row_kept >= n_min);
    }
    ++checked;
  }
  CHECK(checked > 100);
}

TEST_CASE("kept non-exempt entries dominate pruned ones") {
  std::mt19937_64 rng(11);
  for (int trial = 0; trial < 40; ++trial) {
    const auto e = random_table(30, 8, rng, trial % 2 == 1);
    const Index n_min = trial % 2;
    const Tensor mask = magnitude_mask(e, {0.8, n_min});
    Real max_pruned = 0;
    for (std::size_t i = 0; i < e.size(); ++i)
      if (mask[i] == 0) max_pruned = std::max(max_pruned, std::abs(e[i]));
    for (std::size_t r = 0; r < 30; ++r) {
      // Exempt entries are the row's n_min largest; skip them.
      std::vector<std::pair<Real, std::size_t>> row;
      for (std::size_t c = 0; c < 8; ++c) row.push_back({std::abs(e.at(r, c)), c});
      std::sort(row.rbegin(), row.rend());
      for (std::size_t k = static_cast<std::size_t>(n_min); k < 8; ++k) {
        if (mask.at(r, row[k].second) != 0) CHECK(row[k].first >= max_pruned);
      }
    }
  }
}

TEST_CASE("sparsity lands on target for the standard levels") {
  std::mt19937_64 rng(3);
  for (double t : {0.5, 0.8, 0.95}) {
    for (auto [n, d] : {std::pair{943, 16}, std::pair{37, 7}, std::pair{1, 1}}) {
      auto e = random_table(n, d, rng, false);
      auto csr = magnitude_prune({n, d}, e, {t, 0});
      CHECK(std::abs(csr->sparsity() - t) <= 1.0 / static_cast<double>(n * d));
    }
  }
  CHECK(prune_count(100, 0.95) == 95);
  CHECK(prune_count(100, 0.5) == 50);
  CHECK(prune_count(7, 0.5) == 3);
}

TEST_CASE("top_k_mask breaks ties by lower index") {
  auto m = top_k_mask(Tensor({5}, {1, 3, 3, 0, 3}), 2);
  CHECK(m == Tensor({5}, {0, 1, 1, 0, 0}));
  CHECK(top_k_mask(Tensor({2}, {1, 2}), 5).count_nonzero() == 2);
}

TEST_CASE("magnitude_masks prunes stacked tables as one") {
  std::mt19937_64 rng(12);
  for (int trial = 0; trial < 40; ++trial) {
    const Tensor a = random_table(1 + rng() % 9, 4, rng, trial % 2), b = random_table(1 + rng() % 9, 4, rng, true);
    Tensor stacked({a.rows() + b.rows(), 4}, 0);
    std::copy(a.span().begin(), a.span().end(), stacked.data());
    std::copy(b.span().begin(), b.span().end(), stacked.data() + a.size());
    const Tensor oracle = magprune_oracle(stacked, 0.6, 1);
    const Tensor tables[] = {a, b};
    const auto masks = magnitude_masks(tables, {0.6, 1});
    REQUIRE(masks.size() == 2);
    CHECK(masked(a, masks[0]) == Tensor(a.shape(), std::span<const Real>(oracle.data(), a.size())));
    CHECK(masked(b, masks[1]) == Tensor(b.shape(), std::span<const Real>(oracle.data() + a.size(), b.size())));
  }
  const Tensor uneven[] = {Tensor({2, 3}, 1), Tensor({2, 4}, 1)};
  CHECK_THROWS_AS(magnitude_masks(uneven, {0.5, 0}), ShapeError);
}

// ---------------------------------------------------------------------------

TEST_CASE("pep over two tables meets the joint budget") {
  std::mt19937_64 rng(6);
  auto a = StrTable::random({6, 4}, 0.1, -6, false, rng);
  auto b = StrTable::random({9, 4}, 0.1, -6, false, rng);
  std::vector<Parameter> params = a->parameters();
  for (auto& p : b->parameters()) params.push_back(p);
  StrTable* tables[] = {a.get(), b.get()};
  Tensor wa = a->weights().value(), wb = b->weights().value();
  auto snap = pep_find_mask(tables, snapshot_values(params), 0.7, {}, [&](double, const StepHook& hook) {
    a->threshold().mutable_value()[0] = std::log(0.3 / 0.7);
    b->threshold().mutable_value()[0] = std::log(0.3 / 0.7);
    hook();
  });
  REQUIRE(snap.masks.size() == 2);
  const auto zeros = snap.masks[0].size() + snap.masks[1].size() - snap.masks[0].count_nonzero() -
                     snap.masks[1].count_nonzero();
  CHECK(zeros == 42);  // ceil(60 * 0.7)
  CHECK(snap.sparsity() == doctest::Approx(0.7));
  // Equal thresholds make the joint ranking a plain magnitude ranking.
  const Tensor raw[] = {wa, wb};
  const auto expect = magnitude_masks(raw, {0.7, 0});
  CHECK(snap.masks[0] == expect[0]);
  CHECK(snap.masks[1] == expect[1]);
}

TEST_CASE("pep_find_mask stopping rules") {
  std::mt19937_64 rng(5);
  auto table = StrTable::random({10, 4}, 0.1, -6, false, rng);
  const auto theta0 = snapshot_values(table->parameters());

  SUBCASE("t = 0 keeps everything without training") {
    int calls = 0;
    auto snap = pep_find_mask(*table, theta0, 0.0, {}, [&](double, const StepHook&) { ++calls; });
    CHECK(calls == 0);
    CHECK(snap.masks.at(0).count_nonzero() == 40);
    CHECK(snap.theta0.size() == 2);
  }
  SUBCASE("unreachable target reports the best sparsity") {
    try {
      pep_find_mask(*table, theta0, 0.5, {.max_epochs = 3}, [](double, const StepHook& hook) { hook(); });
      FAIL("expected SparsityNotReached");
    } catch (const SparsityNotReached& e) {
      CHECK(e.best == doctest::Approx(1.0 - table->param_count() / 40.0));
      CHECK(e.best < 0.5);
      CHECK(e.target == 0.5);
    }
  }
  SUBCASE("an overshooting crossing is refilled to the exact budget") {
    Tensor w = table->weights().value();
    auto snap = pep_find_mask(*table, theta0, 0.5, {}, [&](double, const StepHook& hook) {
      // One step that pushes the threshold past most weights.
      table->threshold().mutable_value()[0] = std::log(0.15 / 0.85);
      hook();
    });
    CHECK(snap.crossing_sparsity > 0.5);
    CHECK(snap.masks.at(0).size() - snap.masks[0].count_nonzero() == 20);
    CHECK(snap.sparsity() == doctest::Approx(0.5));
    // The survivors are exactly the 20 largest raw magnitudes.
    CHECK(snap.masks[0] == magnitude_mask(w, {0.5, 0}));
    // Everything alive at the crossing survives.
    const Tensor eff = table->effective();
    for (std::size_t i = 0; i < eff.size(); ++i)
      if (eff[i] != 0) CHECK(snap.masks[0][i] == 1);
  }
}

TEST_CASE("entries without task gradient are pruned first") {
  // Half the entries are pulled towards +-1 by the task loss; the rest only
  // feel the penalty on effective weights and should die first.
  const EmbeddingSpec spec{12, 6};
  std::mt19937_64 rng(9);
  auto table = StrTable::random(spec, 0.3, -6, false, rng);
  Tensor target({12, 6}, 0), active({12, 6}, 0);
  for (std::size_t i = 0; i < target.size(); ++i) {
    if (i % 2 == 0) {
      active[i] = 1;
      target[i] = (i % 4 == 0) ? 1 : -1;
    }
  }
  Adam opt(table->parameters(), 0.02);
  std::vector<Index> all(12);
  std::iota(all.begin(), all.end(), 0);
  auto epoch = [&](double penalty, const StepHook& hook) {
    for (int step = 0; step < 20; ++step) {
      opt.zero_grad();
      auto eff = table->forward(all);
      auto diff = ad::mul(ad::sub(eff, ad::constant(target)), ad::constant(active));
      auto loss = ad::add(ad::sum(ad::square(diff)), ad::scale(table->l2_penalty(), static_cast<Real>(penalty)));
      ad::backward(loss);
      opt.step();
      if (hook()) return;
    }
  };
  auto snap = pep_find_mask(*table, snapshot_values(table->parameters()), 0.5, {.max_epochs = 200, .penalty = 0.5},
                            epoch);
  CHECK(snap.crossing_sparsity >= 0.5);
  CHECK(snap.masks.at(0) == active);
}

TEST_CASE("mask snapshots round-trip through a checkpoint") {
  MaskSnapshot s;
  s.specs = {{3, 4}, {1, 2}};
  s.masks = {Tensor::matrix(3, 4, {1, 0, 0, 1, 0, 0, 0, 0, 1, 1, 1, 1}), Tensor::matrix(1, 2, {0, 1})};
  s.theta0 = {Tensor::matrix(3, 4, {1, 2, 3, 4, 5, 6, 7, 8, 9, 10, 11, 12}), Tensor::scalar(-6)};
  s.crossing_sparsity = 0.625;
  s.epochs = 4;
  s.steps = 17;
  Checkpoint ck;
  s.save(ck, "pep");
  auto path = std::filesystem::temp_directory_path() / "lers_mask_snapshot.bin";
  ck.save(path);
  auto back = MaskSnapshot::load(Checkpoint::load(path), "pep");
  REQUIRE(back.masks.size() == 2);
  CHECK(back.masks[0] == s.masks[0]);
  CHECK(back.masks[1] == s.masks[1]);
  CHECK(back.specs[1].d == 2);
  REQUIRE(back.theta0.size() == 2);
  CHECK(back.theta0[0] == s.theta0[0]);
  CHECK(back.theta0[1] == s.theta0[1]);
  CHECK(back.crossing_sparsity == 0.625);
  CHECK(back.steps == 17);
  CHECK(back.sparsity() == doctest::Approx(7.0 / 14));
}

// ---------------------------------------------------------------------------

namespace {

// A two-parameter model: embedding E [n,d] and a projection v [d,1], fitted
// to fixed targets.
struct ToyModel {
  ad::Var emb;
  ad::Var proj;
  Tensor target;

  std::vector<Parameter> params() { return {{"emb", emb, 1}, {"proj", proj, 1}}; }
  ad::Var loss() { return ad::mean(ad::square(ad::sub(ad::matmul(emb, proj), ad::constant(target)))); }
};

ToyModel toy(std::mt19937_64& rng) {
  std::normal_distribution<Real> g(0, 0.5);
  Tensor e({20, 5}, 0), v({5, 1}, 0), y({20, 1}, 0);
  for (auto& x : e.span()) x = g(rng);
  for (auto& x : v.span()) x = g(rng);
  for (auto& x : y.span()) x = g(rng);
  return {ad::parameter(e), ad::parameter(v), y};
}

EpochFn toy_epoch(ToyModel& m, Adam& opt) {
  return [&m, &opt](const StepHook& hook) {
    for (int step = 0; step < 10; ++step) {
      opt.zero_grad();
      ad::backward(m.loss());
      opt.step();
      if (hook()) return;
    }
  };
}

}  // namespace

TEST_CASE("retrain_with_mask restarts from the masked initialization") {
  std::mt19937_64 rng(21);
  ToyModel m = toy(rng);
  MaskSnapshot snap;
  snap.specs = {{20, 5}};
  snap.theta0 = snapshot_values(m.params());
  std::bernoulli_distribution coin(0.4);
  snap.masks = {Tensor({20, 5}, 0)};
  for (auto& x : snap.masks[0].span()) x = coin(rng);

  // Drift away from θ0 first, as the find-mask phase would.
  Adam warm(m.params(), 0.05);
  toy_epoch(m, warm)([] { return false; });
  CHECK_FALSE(m.emb.value() == snap.theta0[0]);

  Adam opt(m.params(), 0.01);
  retrain_with_mask(snap, opt, 0, 0, toy_epoch(m, opt));
  CHECK(m.emb.value() == masked(snap.theta0[0], snap.masks[0]));
  CHECK(m.proj.value() == snap.theta0[1]);

  retrain_with_mask(snap, opt, 0, 5, toy_epoch(m, opt));
  for (std::size_t i = 0; i < snap.masks[0].size(); ++i)
    if (snap.masks[0][i] == 0) CHECK(m.emb.value()[i] == 0);
  CHECK_FALSE(m.emb.value() == masked(snap.theta0[0], snap.masks[0]));

  MaskSnapshot wrong = snap;
  wrong.theta0.pop_back();
  CHECK_THROWS_AS(retrain_with_mask(wrong, opt, 0, 1, toy_epoch(m, opt)), std::invalid_argument);
}

TEST_CASE("retrain_with_mask edge masks") {
  std::mt19937_64 rng(22);
  ToyModel m = toy(rng);
  MaskSnapshot snap;
  snap.specs = {{20, 5}};
  snap.theta0 = snapshot_values(m.params());

  SUBCASE("all-ones equals plain training from θ0") {
    snap.masks = {Tensor({20, 5}, 1)};
    ToyModel plain{ad::parameter(snap.theta0[0]), ad::parameter(snap.theta0[1]), m.target};
    Adam ref(plain.params(), 0.01);
    for (int e = 0; e < 3; ++e) toy_epoch(plain, ref)([] { return false; });
    Adam opt(m.params(), 0.01);
    retrain_with_mask(snap, opt, 0, 3, toy_epoch(m, opt));
    CHECK(m.emb.value() == plain.emb.value());
    CHECK(m.proj.value() == plain.proj.value());
  }
  SUBCASE("all-zeros keeps the embedding at zero") {
    snap.masks = {Tensor({20, 5}, 0)};
    Adam opt(m.params(), 0.01);
    retrain_with_mask(snap, opt, 0, 3, toy_epoch(m, opt));
    CHECK(m.emb.value().count_nonzero() == 0);
  }
}

TEST_CASE("retrain_with_mask catches writes outside the mask") {
  std::mt19937_64 rng(23);
  ToyModel m = toy(rng);
  MaskSnapshot snap;
  snap.specs = {{20, 5}};
  snap.theta0 = snapshot_values(m.params());
  snap.masks = {Tensor({20, 5}, 1)};
  snap.masks[0][0] = 0;
  Adam opt(m.params(), 0.01);
  CHECK_THROWS_AS(retrain_with_mask(snap, opt, 0, 2, [&](const StepHook&) { m.emb.mutable_value()[0] = 1; }),
                  std::logic_error);
}

// ---------------------------------------------------------------------------

TEST_CASE("cerp_regularizer contract") {
  std::mt19937_64 rng(31);
  std::uniform_real_distribution<Real> mag(0.2, 1.0);
  std::bernoulli_distribution sign(0.5);
  auto dense = [&](std::size_t r, std::size_t c) {
    Tensor t({r, c}, 0);
    for (auto& v : t.span()) v = sign(rng) ? mag(rng) : -mag(rng);
    return t;
  };

  SUBCASE("dense tables cost (numerically) nothing") {
    auto p = cerp_regularizer(ad::constant(dense(8, 6)), ad::constant(dense(8, 6)), 1);
    CHECK(p.value().item() < 1e-6);
  }
  SUBCASE("one jointly dead coordinate costs log 2 per row average") {
    Tensor a = dense(4, 3), b = dense(4, 3);
    a.at(2, 1) = 0;
    b.at(2, 1) = 0;
    auto p = cerp_regularizer(ad::constant(a), ad::constant(b), 2).value().item();
    CHECK(p == doctest::Approx(2 * std::log(2.0) / 4).epsilon(1e-6));
    a.at(2, 1) = 0.5;  // one live contributor is enough
    CHECK(cerp_regularizer(ad::constant(a), ad::constant(b), 2).value().item() < 1e-6);
  }
  SUBCASE("reviving dead coordinates one at a time lowers the penalty") {
    Tensor a = dense(10, 8), b = dense(10, 8);
    std::vector<std::size_t> dead;
    for (std::size_t i = 0; i < a.size(); i += 3) {
      a[i] = 0;
      b[i] = 0;
      dead.push_back(i);
    }
    Real prev = cerp_regularizer(ad::constant(a), ad::constant(b), 1).value().item();
    for (auto i : dead) {
      a[i] = 0.05;
      const Real now = cerp_regularizer(ad::constant(a), ad::constant(b), 1).value().item();
      CHECK(now < prev);
      prev = now;
    }
  }
  SUBCASE("gradient matches finite differences") {
    std::normal_distribution<Real> g(0, 0.02);
    Tensor a({5, 4}, 0), b({5, 4}, 0);
    for (auto& v : a.span()) v = g(rng) + (g(rng) > 0 ? 0.01 : -0.01);
    for (auto& v : b.span()) v = g(rng) + (g(rng) > 0 ? 0.01 : -0.01);
    auto pa = ad::parameter(a), pb = ad::parameter(b);
    auto err = testing::param_gradcheck({{"a", pa, 1}, {"b", pb, 1}}, [&] { return cerp_regularizer(pa, pb, 0.7); },
                                        1e-7);
    CHECK(err < 1e-4);
  }
  CHECK_THROWS_AS(cerp_regularizer(ad::constant(dense(2, 3)), ad::constant(dense(3, 2)), 1), ShapeError);
}

TEST_CASE("cerp_prune freezes at the exact budget") {
  const EmbeddingSpec spec{30, 4};
  std::mt19937_64 rng(41);
  for (double t : {0.5, 0.8}) {
    auto table = CerpTable::random(spec, solve_cerp_buckets(spec, t), 0.2, -6, rng);
    Tensor target({30, 4}, 0);
    std::normal_distribution<Real> g(0, 0.3);
    for (auto& v : target.span()) v = g(rng);
    Adam opt(table->parameters(), 0.02);
    std::vector<Index> all(30);
    std::iota(all.begin(), all.end(), 0);
    auto epoch = [&](double penalty, const StepHook& hook) {
      for (int step = 0; step < 10; ++step) {
        opt.zero_grad();
        auto [e1, e2] = table->parts(all);
        auto fit = ad::mean(ad::square(ad::sub(ad::add(e1, e2), ad::constant(target))));
        auto loss = ad::add(fit, ad::add(ad::scale(table->l2_penalty(), static_cast<Real>(penalty)),
                                         cerp_regularizer(e1, e2, 1e-3)));
        ad::backward(loss);
        opt.step();
        if (hook()) return;
      }
    };
    auto res = cerp_prune(*table, t, {.max_epochs = 300, .penalty = 0.05, .penalty_growth = 1.05}, epoch);
    CHECK(res.crossing_sparsity >= t);
    CHECK(table->frozen());
    const auto keep = 120 - static_cast<std::int64_t>(std::ceil(120 * t - 1e-9));
    CHECK(table->param_count() == keep);
    CHECK(std::abs(table->sparsity() - t) <= 1.0 / 120);
    CHECK(table->parameters().size() == 2);
    CHECK_THROWS_AS(cerp_prune(*table, t, {}, epoch), std::logic_error);
  }
}
