// Copyright 2026 The LERS Kit Authors
// SPDX-License-Identifier: Apache-2.0

#include "lers/dimsearch.hpp"

#include <algorithm>
#include <cmath>
#include <map>
#include <numeric>
#include <sstream>
#include <stdexcept>

namespace lers {
namespace {

void check_h(Index h) {
  if (h < 1) throw std::invalid_argument("hidden size must be at least 1");
}

void check_alpha(double alpha) {
  if (!(alpha > 0) || !std::isfinite(alpha)) throw std::invalid_argument("alpha must be positive and finite");
}

// Unnormalized weight of size i, scaled so the largest weight is 1.
double weight(Index h, double alpha, Index i) {
  return alpha >= 1 ? std::pow(1 / alpha, static_cast<double>(i - 1)) : std::pow(alpha, static_cast<double>(h - i));
}

// Mean and variance of i under p, by direct summation.
std::pair<double, double> moments(Index h, double alpha) {
  double z = 0, m1 = 0, m2 = 0;
  for (Index i = 1; i <= h; ++i) {
    const double w = weight(h, alpha, i);
    z += w;
    m1 += w * static_cast<double>(i);
    m2 += w * static_cast<double>(i) * static_cast<double>(i);
  }
  const double mean = m1 / z;
  return {mean, std::max(0.0, m2 / z - mean * mean)};
}

double unit_uniform(std::mt19937_64& rng) { return static_cast<double>(rng() >> 11) * 0x1.0p-53; }

}  // namespace

double dim_probability(Index h, double alpha, Index i) {
  check_h(h);
  check_alpha(alpha);
  if (i < 1 || i > h) throw std::invalid_argument("dim_probability: size outside [1, h]");
  if (alpha == 1) return 1.0 / static_cast<double>(h);
  double z = 0;
  for (Index j = 1; j <= h; ++j) z += weight(h, alpha, j);
  return weight(h, alpha, i) / z;
}

double expected_hidden_size(Index h, double alpha) {
  check_h(h);
  check_alpha(alpha);
  if (alpha == 1) return (static_cast<double>(h) + 1) / 2;
  // The closed form cancels catastrophically next to alpha = 1.
  if (std::abs(alpha - 1) < 1e-3) return moments(h, alpha).first;
  const double ah = std::pow(alpha, static_cast<double>(h));
  return alpha / (alpha - 1) - static_cast<double>(h) / (ah - 1);
}

double solve_alpha(Index h, double target) {
  check_h(h);
  const double uniform = (static_cast<double>(h) + 1) / 2;
  if (target == uniform) return 1;
  if (!(target > 1 && target < uniform)) {
    std::ostringstream msg;
    msg << "solve_alpha: expected size " << target << " outside the attainable range (1, " << uniform << "]";
    throw std::invalid_argument(msg.str());
  }
  // Work in u = log(alpha): dE/du = -Var(i), so the squared error has
  // gradient -2 (E - target) Var.
  double u = 0.5;
  for (int iter = 0; iter < 500; ++iter) {
    const auto [mean, var] = moments(h, std::exp(u));
    const double err = mean - target;
    if (std::abs(err) < 1e-13 || var < 1e-300) break;
    const double grad = -2 * err * var;
    u = std::max(0.0, u - grad / (2 * var * var));
  }
  double alpha = std::exp(u);
  if (std::abs(expected_hidden_size(h, alpha) - target) < 1e-12) return alpha;

  // Bisection on the monotone map u -> E(e^u).
  double lo = 0, hi = 1;
  while (expected_hidden_size(h, std::exp(hi)) > target) {
    lo = hi;
    hi *= 2;
    if (hi > 700) throw std::invalid_argument("solve_alpha: target too close to 1");
  }
  for (int iter = 0; iter < 200 && hi - lo > 1e-15; ++iter) {
    const double mid = 0.5 * (lo + hi);
    (expected_hidden_size(h, std::exp(mid)) > target ? lo : hi) = mid;
  }
  return std::exp(0.5 * (lo + hi));
}

GeometricDimDistribution::GeometricDimDistribution(Index h, double alpha) : h_(h), alpha_(alpha) {
  check_h(h);
  check_alpha(alpha);
  cdf_.resize(static_cast<std::size_t>(h));
  double acc = 0;
  for (Index i = 1; i <= h; ++i) {
    acc += weight(h, alpha, i);
    cdf_[static_cast<std::size_t>(i - 1)] = acc;
  }
  for (auto& c : cdf_) c /= acc;
  cdf_.back() = 1;
}

GeometricDimDistribution GeometricDimDistribution::for_sparsity(Index h, double sparsity) {
  check_h(h);
  const double uniform = (static_cast<double>(h) + 1) / 2;
  const double target = (1 - sparsity) * static_cast<double>(h);
  if (h == 1 || target >= uniform) return {h, 1.0};
  return {h, solve_alpha(h, std::max(target, 1 + 1e-6))};
}

Index GeometricDimDistribution::sample(std::mt19937_64& rng) const {
  const double u = unit_uniform(rng);
  const auto it = std::upper_bound(cdf_.begin(), cdf_.end(), u);
  return std::min<Index>(h_, static_cast<Index>(it - cdf_.begin()) + 1);
}

std::vector<Index> sample_dim_mask(const GeometricDimDistribution& dist, std::size_t fields, std::mt19937_64& rng) {
  std::vector<Index> dims(fields);
  for (auto& v : dims) v = dist.sample(rng);
  return dims;
}

void train_supernet(Supernet& net, const GeometricDimDistribution& dist, int epochs, std::mt19937_64& rng,
                    const SupernetEpochFn& epoch) {
  if (dist.h() != net.d()) throw std::invalid_argument("train_supernet: distribution h differs from table width");
  const auto fields = net.layout().num_fields();
  for (int e = 0; e < epochs; ++e) {
    epoch([&] { net.set_dims(sample_dim_mask(dist, fields, rng)); });
  }
  net.set_dims(std::vector<Index>(fields, net.d()));
}

// ---------------------------------------------------------------------------

void SearchConfig::validate() const {
  if (population < 2) throw std::invalid_argument("SearchConfig: population must be at least 2");
  if (generations < 0) throw std::invalid_argument("SearchConfig: generations must be non-negative");
  if (mutation < 0 || mutation > 1 || crossover < 0 || crossover > 1) {
    throw std::invalid_argument("SearchConfig: probabilities must lie in [0, 1]");
  }
  if (!(target >= 0 && target <= 1)) throw std::invalid_argument("SearchConfig: target must lie in [0, 1]");
  if (max_overshoot < 0) throw std::invalid_argument("SearchConfig: max_overshoot must be non-negative");
}

std::vector<std::uint8_t> keep_rows_by_norm(const Supernet& net, const std::vector<int>& keep_levels) {
  const auto& layout = net.layout();
  if (keep_levels.size() != layout.num_fields()) throw std::invalid_argument("keep_rows_by_norm: one level per field");
  const Tensor& w = net.var().value();
  std::vector<std::uint8_t> keep(static_cast<std::size_t>(net.n()), 0);
  for (std::size_t f = 0; f < layout.num_fields(); ++f) {
    const Index begin = layout.offsets[f], size = layout.size_of(f);
    const Index kept = std::max<Index>(1, static_cast<Index>(std::llround(static_cast<double>(size) * keep_levels[f] / kKeepLevels)));
    std::vector<std::pair<Real, Index>> norms;
    for (Index i = begin; i < begin + size; ++i) {
      Real s = 0;
      for (Real v : w.row(static_cast<std::size_t>(i))) s += v * v;
      norms.push_back({-s, i});
    }
    std::partial_sort(norms.begin(), norms.begin() + std::min(kept, size), norms.end());
    for (Index k = 0; k < std::min(kept, size); ++k) keep[static_cast<std::size_t>(norms[k].second)] = 1;
  }
  return keep;
}

namespace {

class Searcher {
 public:
  Searcher(Supernet& net, const GeometricDimDistribution& dist, const SearchConfig& cfg, const FitnessFn& fitness,
           std::mt19937_64& rng)
      : net_(net), dist_(dist), cfg_(cfg), fitness_(fitness), rng_(rng), fields_(net.layout().num_fields()) {
    for (std::size_t f = 0; f < fields_; ++f) sizes_.push_back(net.layout().size_of(f));
    total_ = static_cast<double>(net.n() * net.d());
  }

  SearchResult run() {
    std::vector<DimCandidate> pop;
    int attempts = 0;
    while (static_cast<int>(pop.size()) < cfg_.population && attempts++ < cfg_.max_resample) {
      DimCandidate c{sample_dim_mask(dist_, fields_, rng_), {}, 0, 0};
      if (cfg_.feature_mask) {
        for (std::size_t f = 0; f < fields_; ++f) c.keep_levels.push_back(random_level());
      }
      if (repair(c)) pop.push_back(std::move(c));
    }
    if (pop.empty()) {
      std::ostringstream msg;
      msg << "no candidate with sparsity in [" << cfg_.target << ", " << cfg_.target + cfg_.max_overshoot << "] after "
          << cfg_.max_resample << " draws";
      throw NoFeasibleCandidate(msg.str());
    }
    for (auto& c : pop) evaluate(c);
    best_ = pop.front();
    track(pop);

    SearchResult result;
    for (int g = 0; g < cfg_.generations; ++g) {
      std::stable_sort(pop.begin(), pop.end(), [](const auto& a, const auto& b) { return a.fitness > b.fitness; });
      const std::size_t parents = std::min(pop.size(), std::max<std::size_t>(2, pop.size() / 2));
      pop.resize(parents);
      attempts = 0;
      std::vector<DimCandidate> children;
      while (parents + children.size() < static_cast<std::size_t>(cfg_.population) && attempts++ < cfg_.max_resample) {
        DimCandidate child = breed(pop);
        if (repair(child)) {
          evaluate(child);
          children.push_back(std::move(child));
        }
      }
      pop.insert(pop.end(), children.begin(), children.end());
      track(pop);
      result.generations = g + 1;
    }

    apply(best_);
    result.best = best_;
    if (cfg_.feature_mask) result.row_keep = net_.row_mask();
    result.evaluations = static_cast<int>(cache_.size());
    return result;
  }

 private:
  int random_level() { return 1 + static_cast<int>(rng_() % kKeepLevels); }

  Index kept_rows(const DimCandidate& c, std::size_t f) const {
    if (c.keep_levels.empty()) return sizes_[f];
    return std::min(sizes_[f], std::max<Index>(1, static_cast<Index>(std::llround(static_cast<double>(sizes_[f]) *
                                                                                     c.keep_levels[f] / kKeepLevels))));
  }

  double sparsity(const DimCandidate& c) const {
    double params = 0;
    for (std::size_t f = 0; f < fields_; ++f) params += static_cast<double>(kept_rows(c, f) * c.dims[f]);
    return 1 - params / total_;
  }

  bool feasible(double s) const { return s >= cfg_.target - 1e-12 && s <= cfg_.target + cfg_.max_overshoot + 1e-12; }

  // Greedy single-gene moves towards the feasible band.
  bool repair(DimCandidate& c) {
    const int max_steps = static_cast<int>(4 * fields_ * static_cast<std::size_t>(net_.d() + kKeepLevels));
    for (int step = 0; step < max_steps; ++step) {
      const double s = sparsity(c);
      if (feasible(s)) {
        c.sparsity = s;
        return true;
      }
      const int dir = s < cfg_.target ? -1 : 1;  // shrink or grow
      std::vector<DimCandidate> landing, moving;
      auto consider = [&](DimCandidate next) {
        (feasible(sparsity(next)) ? landing : moving).push_back(std::move(next));
      };
      for (std::size_t f = 0; f < fields_; ++f) {
        const Index d = c.dims[f] + dir;
        if (d >= 1 && d <= net_.d()) {
          DimCandidate next = c;
          next.dims[f] = d;
          consider(std::move(next));
        }
        if (!c.keep_levels.empty()) {
          const int k = c.keep_levels[f] + dir;
          if (k >= 1 && k <= kKeepLevels) {
            DimCandidate next = c;
            next.keep_levels[f] = k;
            consider(std::move(next));
          }
        }
      }
      auto& pool = landing.empty() ? moving : landing;
      if (pool.empty()) return false;
      c = std::move(pool[rng_() % pool.size()]);
    }
    return false;
  }

  DimCandidate breed(const std::vector<DimCandidate>& parents) {
    const auto& a = parents[rng_() % parents.size()];
    DimCandidate child = a;
    const std::size_t genes = fields_ * (cfg_.feature_mask ? 2 : 1);
    if (parents.size() >= 2 && genes >= 2 && unit_uniform(rng_) < cfg_.crossover) {
      const auto* b = &parents[rng_() % parents.size()];
      while (b == &a) b = &parents[rng_() % parents.size()];
      const std::size_t point = 1 + rng_() % (genes - 1);
      for (std::size_t g = point; g < genes; ++g) {
        if (g < fields_) {
          child.dims[g] = b->dims[g];
        } else {
          child.keep_levels[g - fields_] = b->keep_levels[g - fields_];
        }
      }
    }
    for (std::size_t f = 0; f < fields_; ++f) {
      if (unit_uniform(rng_) < cfg_.mutation) child.dims[f] = dist_.sample(rng_);
      if (cfg_.feature_mask && unit_uniform(rng_) < cfg_.mutation) child.keep_levels[f] = random_level();
    }
    return child;
  }

  void apply(const DimCandidate& c) {
    net_.set_dims(c.dims);
    net_.set_row_mask(c.keep_levels.empty() ? std::vector<std::uint8_t>{} : keep_rows_by_norm(net_, c.keep_levels));
  }

  void evaluate(DimCandidate& c) {
    std::vector<Index> key = c.dims;
    key.insert(key.end(), c.keep_levels.begin(), c.keep_levels.end());
    if (auto it = cache_.find(key); it != cache_.end()) {
      c.fitness = it->second;
      return;
    }
    apply(c);
    c.fitness = fitness_(net_);
    cache_.emplace(std::move(key), c.fitness);
  }

  void track(const std::vector<DimCandidate>& pop) {
    for (const auto& c : pop) {
      if (c.fitness > best_.fitness) best_ = c;
    }
  }

  Supernet& net_;
  const GeometricDimDistribution& dist_;
  const SearchConfig& cfg_;
  const FitnessFn& fitness_;
  std::mt19937_64& rng_;
  std::size_t fields_;
  std::vector<Index> sizes_;
  double total_ = 0;
  DimCandidate best_;
  std::map<std::vector<Index>, double> cache_;
};

}  // namespace

SearchResult evolutionary_search(Supernet& net, const GeometricDimDistribution& dist, const SearchConfig& cfg,
                                 const FitnessFn& fitness, std::mt19937_64& rng) {
  cfg.validate();
  if (dist.h() != net.d()) throw std::invalid_argument("evolutionary_search: distribution h differs from table width");
  // Row ranking for the feature mask reads the full-width weights.
  net.set_dims(std::vector<Index>(net.layout().num_fields(), net.d()));
  net.set_row_mask({});
  return Searcher(net, dist, cfg, fitness, rng).run();
}

void SearchResult::save(Checkpoint& ck, const std::string& prefix) const {
  ck.put_ints(prefix + ".dims", std::vector<std::int64_t>(best.dims.begin(), best.dims.end()));
  ck.put_ints(prefix + ".keep_levels", std::vector<std::int64_t>(best.keep_levels.begin(), best.keep_levels.end()));
  // Feature mask as CSR over a single column: the kept row ids.
  std::vector<std::int64_t> kept;
  for (std::size_t i = 0; i < row_keep.size(); ++i) {
    if (row_keep[i]) kept.push_back(static_cast<std::int64_t>(i));
  }
  ck.set(prefix + ".rows", static_cast<std::int64_t>(row_keep.size()));
  ck.put_ints(prefix + ".feature_mask", std::move(kept));
  ck.set_real(prefix + ".sparsity", best.sparsity);
  ck.set_real(prefix + ".fitness", best.fitness);
  ck.set(prefix + ".evaluations", evaluations);
  ck.set(prefix + ".generations", generations);
}

SearchResult SearchResult::load(const Checkpoint& ck, const std::string& prefix) {
  SearchResult r;
  for (auto v : ck.ints(prefix + ".dims")) r.best.dims.push_back(v);
  for (auto v : ck.ints(prefix + ".keep_levels")) r.best.keep_levels.push_back(static_cast<int>(v));
  const auto rows = ck.get_int(prefix + ".rows");
  r.row_keep.assign(static_cast<std::size_t>(rows), 0);
  for (auto id : ck.ints(prefix + ".feature_mask")) {
    if (id < 0 || id >= rows) throw CheckpointError("search result '" + prefix + "': feature id out of range");
    r.row_keep[static_cast<std::size_t>(id)] = 1;
  }
  r.best.sparsity = ck.get_real(prefix + ".sparsity");
  r.best.fitness = ck.get_real(prefix + ".fitness");
  r.evaluations = static_cast<int>(ck.get_int(prefix + ".evaluations"));
  r.generations = static_cast<int>(ck.get_int(prefix + ".generations"));
  return r;
}

}  // namespace lers
