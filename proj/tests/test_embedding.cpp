// Copyright 2026 The LERS Kit Authors
// SPDX-License-Identifier: Apache-2.0

#include <cmath>
#include <filesystem>
#include <fstream>
#include <numeric>
#include <set>

#include "doctest.h"
#include "gradcheck.hpp"
#include "lers/embedding.hpp"
#include "oracles.hpp"

using namespace lers;
using namespace lers::testing;

TEST_CASE("qr_indices") {
  CHECK(qr_indices(10, 100, 4) == std::pair<Index, Index>{2, 2});
  CHECK(qr_indices(0, 100, 7) == std::pair<Index, Index>{0, 0});
  CHECK_THROWS_AS(qr_indices(100, 100, 7), std::out_of_range);
  for (Index n = 1; n <= 64; ++n) {
    for (Index p = 1; p <= n; ++p) {
      std::set<std::pair<Index, Index>> seen;
      for (Index i = 0; i < n; ++i) seen.insert(qr_indices(i, n, p));
      CHECK(static_cast<Index>(seen.size()) == n);
    }
  }
}

TEST_CASE("QR lookup is the elementwise product of factor rows") {
  // n=2, p=1: row 1 reads E1[0] and E2[1].
  QrTable t({2, 2}, 1, Tensor::matrix(1, 2, {2, 3}), Tensor::matrix(2, 2, {1, 1, 4, 5}));
  CHECK(t.lookup(1) == Tensor::matrix(1, 2, {8, 15}));
  CHECK(t.forward(std::vector<Index>{1}).value() == Tensor::matrix(1, 2, {8, 15}));
  CHECK_THROWS_AS(t.lookup(2), std::out_of_range);
}

TEST_CASE("param_count and sparsity fixtures") {
  std::mt19937_64 rng(1);
  auto full = FullTable::random({1000, 16}, 0.1, rng);
  CHECK(full->param_count() == 16000);
  CHECK(full->sparsity() == 0.0);
  auto qr = QrTable::random({1000, 16}, 100, 0.1, rng);
  CHECK(qr->q() == 10);
  CHECK(qr->param_count() == 1760);
  CHECK(qr->sparsity() == doctest::Approx(0.89).epsilon(1e-12));

  Tensor dense({4, 4}, 1.0), half({4, 4}, 0);
  for (std::size_t i = 0; i < 16; i += 2) half[i] = 1;
  auto csr = CsrTable::from_dense({4, 4}, dense, half);
  CHECK(csr->param_count() == 8);
  CHECK(csr->sparsity() == 0.5);

  // 8.69M nonzeros over a 17.39M-entry table.
  CHECK(1.0 - 8.69e6 / 17.39e6 == doctest::Approx(0.5003).epsilon(1e-4 / 0.5003));
}

TEST_CASE("TT lookup matches reconstruction and an explicit entry oracle") {
  SUBCASE("fixed 2-core instance n=4=2*2, d=4=2*2, ranks 1,2,1") {
    std::mt19937_64 rng(5);
    TtShape sh{{2, 2}, {2, 2}, {1, 2, 1}};
    auto t = TtTable::random({4, 4}, sh, 0, 1.0, rng);
    const Tensor full = tt_reconstruct(*t);
    for (Index i = 0; i < 4; ++i) {
      const Tensor row = t->lookup(i);
      for (Index j = 0; j < 4; ++j) {
        CHECK(std::abs(row[j] - full.at(i, j)) < 1e-10);
        CHECK(std::abs(row[j] - tt_entry_oracle(*t, i, j)) < 1e-10);
      }
    }
  }
  SUBCASE("all-ones rank-1 cores give all-ones rows") {
    TtShape sh{{2, 3}, {2, 2}, {1, 1, 1}};
    TtTable t({6, 4}, sh, {Tensor({2, 2}, 1.0), Tensor({3, 2}, 1.0)});
    for (Index i = 0; i < 6; ++i) CHECK(t.lookup(i) == Tensor({1, 4}, 1.0));
  }
  SUBCASE("single core is the reshaped core") {
    std::mt19937_64 rng(2);
    TtShape sh{{5}, {3}, {1, 1}};
    auto t = TtTable::random({5, 3}, sh, 0, 1.0, rng);
    CHECK(tt_reconstruct(*t) == t->cores()[0].value());
  }
  SUBCASE("zero cores reconstruct to zero") {
    TtShape sh{{2, 2}, {2, 1}, {1, 3, 1}};
    TtTable t({3, 2}, sh, {Tensor({2, 6}, 0.0), Tensor({6, 1}, 0.0)});
    CHECK(tt_reconstruct(t) == Tensor({3, 2}, 0.0));
  }
  SUBCASE("random configurations, t = 2 and 3, ranks <= 4") {
    std::mt19937_64 rng(11);
    for (int trial = 0; trial < 50; ++trial) {
      auto t = random_tt(rng, trial % 2 ? 3 : 2, 4);
      const Tensor full = tt_reconstruct(*t);
      const Tensor rows = t->materialize();
      Real worst = 0;
      for (std::size_t i = 0; i < rows.size(); ++i) worst = std::max(worst, std::abs(rows[i] - full[i]));
      CHECK(worst < 1e-10);
      CHECK(std::abs(rows.at(0, 0) - tt_entry_oracle(*t, 0, 0)) < 1e-10);
    }
  }
  SUBCASE("reconstruction rejects oversized instances") {
    std::mt19937_64 rng(3);
    TtShape sh{{64, 64}, {4, 4}, {1, 2, 1}};
    auto t = TtTable::random({4096, 16}, sh, 0, 0.1, rng);
    CHECK_THROWS_AS(tt_reconstruct(*t, 1000), std::length_error);
  }
}

TEST_CASE("TT parameter count is linear in core count for fixed ranks") {
  // n = 4^t, d = 2^t, rank 3: each interior core costs 3*4*2*3.
  for (std::size_t t = 2; t <= 6; ++t) {
    TtShape sh;
    sh.row_factors.assign(t, 4);
    sh.col_factors.assign(t, 2);
    sh.ranks.assign(t + 1, 3);
    sh.ranks.front() = sh.ranks.back() = 1;
    CHECK(sh.core_params() == 2 * (4 * 2 * 3) + static_cast<std::int64_t>(t - 2) * (3 * 4 * 2 * 3));
  }
}

TEST_CASE("TT cache serves cached rows and counts toward parameters") {
  std::mt19937_64 rng(9);
  TtShape sh{{3, 3}, {2, 2}, {1, 2, 1}};
  auto t = TtTable::random({9, 4}, sh, 2, 1.0, rng);
  CHECK(t->param_count() == sh.core_params() + 2 * 4);
  std::vector<std::int64_t> freq{1, 9, 3, 9, 0, 0, 0, 0, 0};
  const Tensor before = t->materialize();
  t->build_cache(freq);
  CHECK(t->cached_ids() == std::vector<Index>{1, 3});
  CHECK(t->materialize() == before);  // seeded from the cores
  auto params = t->parameters();
  params.back().var.mutable_value().fill(7);
  CHECK(t->lookup(3) == Tensor({1, 4}, 7.0));
  CHECK(t->lookup(0) == t->core_row(0));
}

TEST_CASE("dhe_encode is deterministic and near uniform on [-1, 1]") {
  const auto seeds = dhe_seeds(16, 42);
  CHECK(dhe_encode(7, seeds) == dhe_encode(7, seeds));
  CHECK(dhe_encode(0, seeds) != dhe_encode(1, seeds));
  CHECK(dhe_seeds(16, 42) == seeds);
  std::vector<double> mean(16, 0), sq(16, 0);
  const int N = 10000;
  for (Index i = 0; i < N; ++i) {
    const auto v = dhe_encode(i, seeds);
    for (std::size_t j = 0; j < 16; ++j) {
      CHECK(v[j] >= -1.0);
      CHECK(v[j] <= 1.0);
      mean[j] += v[j];
      sq[j] += v[j] * v[j];
    }
  }
  for (std::size_t j = 0; j < 16; ++j) {
    const double m = mean[j] / N;
    const double var = sq[j] / N - m * m;
    CHECK(m > -0.05);
    CHECK(m < 0.05);
    CHECK(var > 0.28);
    CHECK(var < 0.38);
  }
}

TEST_CASE("DHE codes do not depend on MLP weights") {
  std::mt19937_64 rng(1);
  auto dhe = DheEncoder::random({50, 4}, 8, 6, 99, 0.1, rng);
  const Tensor before = dhe->codes(std::vector<Index>{3, 4});
  for (auto& p : dhe->parameters()) p.var.mutable_value().fill(0.5);
  CHECK(dhe->codes(std::vector<Index>{3, 4}) == before);
  CHECK(dhe->param_count() == 8 * 6 + 6 + 6 * 4 + 4);
  CHECK_THROWS(DheEncoder::random({50, 8}, 4, 6, 99, 0.1, rng));  // k < d
}

TEST_CASE("CSR lookup equals the masked dense table") {
  std::mt19937_64 rng(4);
  std::bernoulli_distribution coin(0.4);
  auto full = FullTable::random({30, 6}, 1.0, rng);
  Tensor mask({30, 6}, 0);
  for (auto& v : mask.span()) v = coin(rng) ? 1 : 0;
  auto csr = CsrTable::from_dense({30, 6}, full->weights(), mask);
  CHECK(csr->param_count() == static_cast<std::int64_t>(mask.count_nonzero()));
  CHECK(csr->mask() == mask);
  const Tensor dense = csr->materialize();
  for (std::size_t i = 0; i < dense.size(); ++i) CHECK(dense[i] == (mask[i] != 0 ? full->weights()[i] : 0.0));
  CHECK(csr->index_bytes() == static_cast<std::int64_t>((31 + mask.count_nonzero()) * 8));
  CHECK_THROWS(CsrTable({2, 2}, {0, 2, 1}, {0, 1, 1}, Tensor({1, 1}, 1.0)));  // non-monotone
  CHECK_THROWS(CsrTable({2, 2}, {0, 2, 2}, {1, 0}, Tensor({1, 2}, 1.0)));     // unsorted row
}

TEST_CASE("str_forward") {
  const Real s = std::log(0.2 / 0.8);  // sigmoid(s) = 0.2
  CHECK(str_forward(0.5, s) == doctest::Approx(0.3).epsilon(1e-12));
  CHECK(str_forward(-0.5, s) == doctest::Approx(-0.3).epsilon(1e-12));
  CHECK(str_forward(0.1, s) == 0.0);
  CHECK(str_forward(0.37, -800) == 0.37);
  std::mt19937_64 rng(3);
  std::normal_distribution<Real> g(0, 1);
  for (int i = 0; i < 1000; ++i) {
    const Real w = g(rng), th = g(rng) * 3;
    const Real y = str_forward(w, th);
    CHECK(std::abs(y) <= std::abs(w));
    CHECK((y == 0 || std::signbit(y) == std::signbit(w)));
  }
}

TEST_CASE("CERP index pairs are unique and tables balanced") {
  for (Index n : {1, 2, 17, 100, 1000}) {
    for (double t : {0.5, 0.8, 0.95}) {
      const Index b = solve_cerp_buckets({n, 8}, t);
      CHECK(b * b >= n);
      CHECK(b <= n);
      std::set<std::pair<Index, Index>> seen;
      for (Index i = 0; i < n; ++i) {
        const auto pr = CerpTable::indices(i, b);
        CHECK(pr.first < b);
        CHECK(pr.second < b);
        seen.insert(pr);
      }
      CHECK(static_cast<Index>(seen.size()) == n);
    }
  }
}

TEST_CASE("supernet prefix masks") {
  std::mt19937_64 rng(8);
  auto sn = Supernet::random({10, 4}, FieldLayout::from_sizes({6, 4}), 1.0, rng);
  const Tensor full = sn->materialize();
  CHECK(sn->param_count() == 40);
  sn->set_dims({2, 4});  // width d is a no-op for field 1
  CHECK(sn->param_count() == 6 * 2 + 4 * 4);
  const Tensor masked = sn->materialize();
  for (Index i = 0; i < 10; ++i)
    for (Index j = 0; j < 4; ++j) CHECK(masked.at(i, j) == (i < 6 && j >= 2 ? 0.0 : full.at(i, j)));
  std::vector<std::uint8_t> keep(10, 1);
  keep[7] = 0;
  sn->set_row_mask(keep);
  CHECK(sn->param_count() == 6 * 2 + 3 * 4);
  CHECK(sn->lookup(7) == Tensor({1, 4}, 0.0));
  CHECK_THROWS(sn->set_dims({0, 4}));
  CHECK_THROWS(sn->set_dims({2, 5}));
}

TEST_CASE("budget solvers land within 2% of the target") {
  for (EmbeddingSpec spec : {EmbeddingSpec{2625, 64}, EmbeddingSpec{1141, 16}, EmbeddingSpec{4000, 32}}) {
    for (double t : {0.5, 0.8, 0.95}) {
      std::mt19937_64 rng(1);
      for (auto kind : {LayerKind::Qr, LayerKind::Tt, LayerKind::Dhe}) {
        LayerOptions opts;
        opts.target = t;
        auto layer = make_layer(kind, spec, opts, rng);
        CAPTURE(kind_name(kind));
        CAPTURE(t);
        CHECK(std::abs(layer->sparsity() - t) <= 0.02);
      }
    }
  }
  CHECK_THROWS_AS(solve_qr_p({100, 8}, 0.95), UnreachableSparsity);  // 2*sqrt(100) rows > 5% of 100
  CHECK_THROWS_AS(solve_dhe_width({10, 8}, 0.95, 16), UnreachableSparsity);
  auto plan = solve_tt({2625, 64}, 0.8);
  CHECK(plan.cache_rows <= 2625 / 10);
  CHECK(plan.shape.col_factors == std::vector<Index>{4, 4, 4});
}

TEST_CASE("balanced factorizations") {
  CHECK(balanced_factorization(64, 3) == std::vector<Index>{4, 4, 4});
  CHECK(balanced_factorization(16, 3) == std::vector<Index>{2, 2, 4});
  CHECK(balanced_factorization(7, 3) == std::vector<Index>{1, 1, 7});
  for (Index n : {1, 2, 10, 1000, 2625, 99991}) {
    const auto f = balanced_cover(n, 3);
    Index prod = 1;
    for (auto v : f) prod *= v;
    CHECK(prod >= n);
    CHECK(*std::max_element(f.begin(), f.end()) - *std::min_element(f.begin(), f.end()) <= 2);
  }
}

TEST_CASE("forward agrees with lookup_rows and gradients check for every kind") {
  std::mt19937_64 rng(21);
  const EmbeddingSpec spec{12, 4};
  std::vector<std::unique_ptr<EmbeddingLayer>> layers;
  layers.push_back(FullTable::random(spec, 0.5, rng));
  layers.push_back(QrTable::random(spec, 4, 0.5, rng));
  layers.push_back(TtTable::random(spec, TtShape{{3, 4}, {2, 2}, {1, 3, 1}}, 0, 0.5, rng));
  {
    auto tt = TtTable::random(spec, TtShape{{2, 2, 3}, {1, 2, 2}, {1, 2, 2, 1}}, 3, 0.5, rng);
    std::vector<std::int64_t> freq(12, 0);
    freq[5] = 4;
    freq[2] = 3;
    freq[9] = 1;
    tt->build_cache(freq);
    layers.push_back(std::move(tt));
  }
  layers.push_back(DheEncoder::random(spec, 6, 5, 3, 0.5, rng));
  {
    Tensor mask({12, 4}, 0);
    std::bernoulli_distribution coin(0.6);
    for (auto& v : mask.span()) v = coin(rng);
    layers.push_back(CsrTable::from_dense(spec, FullTable::random(spec, 0.5, rng)->weights(), mask));
  }
  layers.push_back(StrTable::random(spec, 0.5, -2.0, false, rng));
  layers.push_back(StrTable::random(spec, 0.5, -2.0, true, rng));
  layers.push_back(CerpTable::random(spec, 4, 0.5, -2.5, rng));
  {
    auto sn = Supernet::random(spec, FieldLayout::from_sizes({5, 7}), 0.5, rng);
    sn->set_dims({3, 2});
    layers.push_back(std::move(sn));
  }
  // Keep thresholded weights away from their kink.
  auto nudge = [](ad::Var& w, Real th) {
    for (auto& v : w.mutable_value().span()) {
      if (std::abs(std::abs(v) - th) < 1e-3) v += v > 0 ? 2e-3 : -2e-3;
    }
  };
  const std::vector<Index> ids{0, 5, 11, 5, 2, 7, 9};
  Tensor probe({ids.size(), 4}, 0);
  std::normal_distribution<Real> g(0, 1);
  for (auto& v : probe.span()) v = g(rng);

  for (auto& layer : layers) {
    CAPTURE(kind_name(layer->kind()));
    if (auto* s = dynamic_cast<StrTable*>(layer.get())) nudge(s->weights(), 1 / (1 + std::exp(2.0)));
    if (auto* c = dynamic_cast<CerpTable*>(layer.get())) {
      nudge(c->w1(), 1 / (1 + std::exp(2.5)));
      nudge(c->w2(), 1 / (1 + std::exp(2.5)));
    }
    CHECK(layer->forward(ids).value() == layer->lookup_rows(ids));
    CHECK(layer->materialize().rows() == 12);
    // Linear probe plus a quadratic term exercises both gradient paths.
    auto loss = [&] {
      auto e = layer->forward(ids);
      return ad::add(ad::sum(ad::mul(e, ad::constant(probe))), ad::scale(ad::sum(ad::square(e)), 0.5));
    };
    CHECK(testing::param_gradcheck(layer->parameters(), loss) < 1e-4);
    CHECK_THROWS_AS(layer->lookup(12), std::out_of_range);
    CHECK_THROWS_AS(layer->forward(std::vector<Index>{-1}), std::out_of_range);
  }
}

TEST_CASE("checkpoint round-trips every layer kind bit-exactly") {
  std::mt19937_64 rng(33);
  const EmbeddingSpec spec{40, 8};
  std::vector<std::unique_ptr<EmbeddingLayer>> layers;
  LayerOptions opts;
  opts.target = 0.5;
  for (auto kind : {LayerKind::Full, LayerKind::Qr, LayerKind::Dhe, LayerKind::Str, LayerKind::Cerp,
                    LayerKind::Supernet}) {
    opts.layout = FieldLayout::from_sizes({25, 15});
    layers.push_back(make_layer(kind, spec, opts, rng));
  }
  {
    auto tt = TtTable::random(spec, TtShape{{4, 10}, {2, 4}, {1, 3, 1}}, 4, 0.3, rng);
    std::vector<std::int64_t> freq(40);
    std::iota(freq.begin(), freq.end(), 0);
    tt->build_cache(freq);
    tt->parameters().back().var.mutable_value()[3] = 0.123456789;
    layers.push_back(std::move(tt));
  }
  {
    auto masked = FullTable::random(spec, 1.0, rng);
    Tensor mask({40, 8}, 0);
    for (std::size_t i = 0; i < mask.size(); i += 3) mask[i] = 1;
    masked->set_mask(mask);
    layers.push_back(std::move(masked));
    Tensor m2({40, 8}, 1);
    m2[0] = 0;
    layers.push_back(CsrTable::from_dense(spec, FullTable::random(spec, 1.0, rng)->weights(), m2));
  }
  {
    auto cerp = CerpTable::random(spec, 20, 0.3, -3, rng);
    cerp->freeze(Tensor({20, 8}, 1), Tensor({20, 8}, 0));
    layers.push_back(std::move(cerp));
    auto sn = Supernet::random(spec, FieldLayout::from_sizes({25, 15}), 1.0, rng);
    sn->set_dims({3, 8});
    std::vector<std::uint8_t> keep(40, 1);
    keep[4] = 0;
    sn->set_row_mask(keep);
    layers.push_back(std::move(sn));
  }
  const auto path = std::filesystem::temp_directory_path() / "lers_embedding_roundtrip.ckpt";
  Checkpoint ck;
  for (std::size_t i = 0; i < layers.size(); ++i) layers[i]->save(ck, "layer" + std::to_string(i));
  ck.save(path);
  const auto loaded = Checkpoint::load(path);
  CHECK(loaded.manifest() == ck.manifest());
  for (std::size_t i = 0; i < layers.size(); ++i) {
    auto back = load_layer(loaded, "layer" + std::to_string(i));
    CAPTURE(kind_name(layers[i]->kind()));
    CHECK(back->kind() == layers[i]->kind());
    CHECK(back->materialize() == layers[i]->materialize());
    CHECK(back->param_count() == layers[i]->param_count());
    auto copy = layers[i]->clone();
    CHECK(copy->materialize() == layers[i]->materialize());
  }

  std::filesystem::remove(path);
  CHECK_THROWS_AS(Checkpoint::load(path), CheckpointError);
  {
    std::ofstream(path) << "NOTLERS0 garbage";
  }
  CHECK_THROWS_AS(Checkpoint::load(path), CheckpointError);
}
