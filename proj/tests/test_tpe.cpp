// Copyright 2026 The LERS Kit Authors
// SPDX-License-Identifier: Apache-2.0

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <random>

#include "doctest.h"
#include "lers/tpe.hpp"

using namespace lers::tpe;

namespace {

History history_of(const std::vector<double>& ys, const std::vector<double>& xs = {}) {
  History h;
  for (std::size_t i = 0; i < ys.size(); ++i) {
    Trial t;
    t.index = i;
    t.y = ys[i];
    t.config["x"] = xs.empty() ? 0.5 : xs[i];
    h.push_back(t);
  }
  return h;
}

SearchSpace unit_space() { return SearchSpace().add_real("x", 0, 1); }

double median(std::vector<double> v) {
  std::sort(v.begin(), v.end());
  return v.size() % 2 ? v[v.size() / 2] : 0.5 * (v[v.size() / 2 - 1] + v[v.size() / 2]);
}

}  // namespace

TEST_CASE("split_history rules") {
  auto s = split_history(history_of({1, 2, 3, 4}));
  CHECK(s.good == std::vector<std::size_t>{3});
  CHECK(s.bad == std::vector<std::size_t>{0, 1, 2});

  s = split_history(history_of({5, 5, 5}));
  CHECK(s.good == std::vector<std::size_t>{0});
  CHECK(s.bad == std::vector<std::size_t>{1, 2});

  s = split_history(history_of({7}));
  CHECK(s.good == std::vector<std::size_t>{0});
  CHECK(s.bad.empty());

  // A block of tied maxima larger than the quantile still splits.
  s = split_history(history_of({9, 9, 9, 1, 9}));
  CHECK(s.good == std::vector<std::size_t>{0, 1, 2, 4});
  CHECK(s.bad == std::vector<std::size_t>{3});

  s = split_history(history_of({1, 4, 3, 4}), 0.25, ThresholdRule::BestSingle);
  CHECK(s.good == std::vector<std::size_t>{1});

  CHECK(split_history({}).good.empty());

  std::mt19937_64 rng(1);
  for (int trial = 0; trial < 300; ++trial) {
    std::vector<double> ys(1 + rng() % 40);
    for (auto& y : ys) y = static_cast<double>(rng() % 6);
    const auto h = history_of(ys);
    const auto sp = split_history(h);
    CHECK(sp.good.size() + sp.bad.size() == ys.size());
    CHECK_FALSE(sp.good.empty());
    const bool distinct = std::any_of(ys.begin(), ys.end(), [&](double y) { return y != ys[0]; });
    if (distinct) {
      CHECK_FALSE(sp.bad.empty());
      double min_good = 1e9, max_bad = -1e9;
      for (auto i : sp.good) min_good = std::min(min_good, ys[i]);
      for (auto i : sp.bad) max_bad = std::max(max_bad, ys[i]);
      CHECK(min_good > max_bad);
    }
  }
}

TEST_CASE("parzen density") {
  const ParamSpec spec = unit_space().params()[0];
  SUBCASE("single midpoint sample is unimodal at the sample") {
    ParzenDensity d(spec, {0.5});
    double prev = 0;
    for (int i = 0; i <= 50; ++i) {
      const double v = d.pdf(i / 100.0);
      CHECK(v >= prev);
      prev = v;
    }
    for (int i = 50; i <= 100; ++i) {
      const double v = d.pdf(i / 100.0);
      CHECK(v <= prev);
      prev = v;
    }
  }
  SUBCASE("integrates to one") {
    std::mt19937_64 rng(2);
    for (int trial = 0; trial < 20; ++trial) {
      std::vector<ParamValue> xs;
      for (int i = 0; i < 1 + trial % 7; ++i) xs.push_back(std::uniform_real_distribution<double>(0, 1)(rng));
      ParzenDensity d(spec, xs);
      const int n = 20000;
      double area = 0;
      for (int i = 0; i < n; ++i) area += 0.5 * (d.pdf(double(i) / n) + d.pdf(double(i + 1) / n)) / n;
      CHECK(area == doctest::Approx(1).epsilon(1e-3));
    }
    const ParamSpec lr = SearchSpace().add_real("lr", 5e-4, 1e-2, true).params()[0];
    ParzenDensity d(lr, {1e-3, 2e-3});
    const double a = std::log(5e-4), b = std::log(1e-2);
    double area = 0;
    const int n = 20000;
    for (int i = 0; i < n; ++i) {
      const double t0 = a + (b - a) * i / n, t1 = a + (b - a) * (i + 1) / n;
      area += 0.5 * (d.pdf_transformed(t0) + d.pdf_transformed(t1)) * (t1 - t0);
    }
    CHECK(area == doctest::Approx(1).epsilon(1e-3));
  }
  SUBCASE("bandwidths are clamped to the range") {
    ParzenDensity d(spec, {0.5, 0.5, 0.9});
    CHECK(d.bandwidths()[0] == doctest::Approx(0.01));
    CHECK(d.bandwidths()[2] == doctest::Approx(0.4));
    CHECK(d.bandwidths().back() == 1);  // prior component
  }
  SUBCASE("categorical add-one smoothing") {
    const ParamSpec cat = SearchSpace().add_choice("c", {"A", "B"}).params()[0];
    ParzenDensity d(cat, {"A", "A", "A", "B"});
    CHECK(d.pdf(std::string("A")) == doctest::Approx(4.0 / 6));
    CHECK(d.pdf(std::string("B")) == doctest::Approx(2.0 / 6));
  }
}

TEST_CASE("suggest respects the space and is deterministic") {
  SearchSpace space;
  space.add_real("lr", 5e-4, 1e-2, true).add_real("dropout", 0, 1).add_choice("negatives", {"1", "2", "3", "4", "5"});
  SuggestOptions opts;
  History h;
  std::mt19937_64 obj_rng(3);
  for (std::size_t i = 0; i < 25; ++i) {
    std::mt19937_64 rng(100 + i), rng2(100 + i);
    const Config c = suggest(space, h, opts, rng);
    CHECK(space.contains(c));
    CHECK(format_config(suggest(space, h, opts, rng2)) == format_config(c));
    Trial t;
    t.index = i;
    t.config = c;
    t.y = std::uniform_real_distribution<double>(0, 1)(obj_rng);
    h.push_back(t);
  }
  CHECK(parse_config(space, format_config(h[3].config)) == h[3].config);
  CHECK_THROWS(parse_config(space, "lr=1;dropout=0.5;negatives=3"));
  CHECK_THROWS(SearchSpace().add_real("x", 1, 1));
  CHECK_THROWS(SearchSpace().add_choice("c", {}));
}

TEST_CASE("suggestions move toward the good set") {
  // Good trials near 0.8, bad ones near 0.2.
  std::vector<double> xs, ys;
  for (int i = 0; i < 4; ++i) {
    xs.push_back(0.78 + 0.01 * i);
    ys.push_back(1);
  }
  for (int i = 0; i < 12; ++i) {
    xs.push_back(0.15 + 0.01 * i);
    ys.push_back(0);
  }
  const auto h = history_of(ys, xs);
  const auto space = unit_space();
  int inside = 0;
  for (int seed = 0; seed < 1000; ++seed) {
    std::mt19937_64 rng(seed);
    const double x = real_of(suggest(space, h, {}, rng), "x");
    inside += x >= 0.6 && x <= 1.0;
  }
  CHECK(inside >= 950);

  // More candidates concentrate harder around a point mass.
  auto spread = [&](std::size_t candidates) {
    double total = 0;
    for (int seed = 0; seed < 300; ++seed) {
      std::mt19937_64 rng(seed);
      SuggestOptions o;
      o.candidates = candidates;
      total += std::abs(real_of(suggest(space, history_of({1, 1, 0, 0, 0, 0, 0, 0, 0, 0}, {0.8, 0.8, 0.1, 0.2, 0.3, 0.35, 0.4, 0.45, 0.5, 0.55}), o, rng), "x") - 0.8);
    }
    return total / 300;
  };
  CHECK(spread(96) < spread(4));
}

TEST_CASE("run_study") {
  const auto space = unit_space();
  auto quadratic = [](const Config& c, std::uint64_t) {
    const double x = real_of(c, "x");
    return -(x - 0.7) * (x - 0.7);
  };

  SUBCASE("evaluates exactly max_trials times") {
    int calls = 0;
    StudyOptions opts;
    opts.max_trials = 13;
    auto r = run_study([&](const Config& c, std::uint64_t s) { ++calls; return quadratic(c, s); }, space, opts);
    CHECK(calls == 13);
    CHECK(r.history.size() == 13);
    for (const auto& t : r.history) CHECK(r.best.y >= t.y);
  }
  SUBCASE("constant objective") {
    StudyOptions opts;
    opts.max_trials = 12;
    auto r = run_study([](const Config&, std::uint64_t) { return 3.0; }, space, opts);
    CHECK(r.best.y == 3.0);
  }
  SUBCASE("failures are recorded and skipped") {
    StudyOptions opts;
    opts.max_trials = 12;
    int n = 0;
    auto r = run_study([&](const Config& c, std::uint64_t s) {
      if (n++ % 3 == 0) throw std::runtime_error("diverged");
      return quadratic(c, s);
    }, space, opts);
    CHECK(r.history.size() == 12);
    CHECK(r.history[0].failed);
    CHECK_FALSE(r.best.failed);
  }
  SUBCASE("TPE beats random search on a quadratic") {
    std::vector<double> tpe_best, random_best;
    for (std::uint64_t seed = 0; seed < 20; ++seed) {
      StudyOptions opts;
      opts.seed = seed;
      tpe_best.push_back(run_study(quadratic, space, opts).best.y);
      opts.suggest.omega = 30;  // never leaves the prior
      random_best.push_back(run_study(quadratic, space, opts).best.y);
    }
    CHECK(median(tpe_best) > median(random_best));
  }
  SUBCASE("resumes from the log") {
    const auto path = std::filesystem::temp_directory_path() / "lers_tpe_study.csv";
    std::filesystem::remove(path);
    StudyOptions opts;
    opts.seed = 5;
    opts.max_trials = 20;
    const auto full = run_study(quadratic, space, opts);

    opts.log_path = path;
    opts.max_trials = 12;
    run_study(quadratic, space, opts);
    opts.max_trials = 20;
    int calls = 0;
    const auto resumed = run_study([&](const Config& c, std::uint64_t s) { ++calls; return quadratic(c, s); }, space, opts);
    CHECK(calls == 8);
    REQUIRE(resumed.history.size() == 20);
    for (std::size_t i = 0; i < 20; ++i) {
      CHECK(real_of(resumed.history[i].config, "x") == real_of(full.history[i].config, "x"));
      CHECK(resumed.history[i].y == full.history[i].y);
    }
    CHECK(read_log(path, space).size() == 20);
    std::filesystem::remove(path);
  }
}
