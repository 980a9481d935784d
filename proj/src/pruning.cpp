// Copyright 2026 The LERS Kit Authors
// SPDX-License-Identifier: Apache-2.0

#include "lers/pruning.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <sstream>

namespace lers {
namespace {

// Rounding guard so that e.g. 100 * 0.95 counts as 95, not 94.
constexpr double kCountEps = 1e-9;

std::int64_t zeros_needed(std::int64_t entries, double t) {
  return std::min<std::int64_t>(entries, static_cast<std::int64_t>(std::ceil(static_cast<double>(entries) * t - kCountEps)));
}

// Ascending (key, flat index) order of a flat score array.
std::vector<std::size_t> ascending_order(const std::vector<Real>& key) {
  std::vector<std::size_t> order(key.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return key[a] < key[b]; });
  return order;
}

// How far each raw weight sits above its threshold; positive means alive.
Tensor threshold_margin(const Tensor& w, const Tensor& s) {
  Tensor out = Tensor::uninitialized(w.shape());
  const bool per_row = s.size() > 1;
  for (std::size_t r = 0; r < w.rows(); ++r) {
    const Real g = 1 / (1 + std::exp(-s[per_row ? r : 0]));
    for (std::size_t c = 0; c < w.cols(); ++c) out.at(r, c) = std::abs(w.at(r, c)) - g;
  }
  return out;
}

}  // namespace

std::int64_t prune_count(std::int64_t entries, double t) {
  return std::min<std::int64_t>(entries, static_cast<std::int64_t>(std::floor(static_cast<double>(entries) * t + kCountEps)));
}

void PruneConfig::validate(Index n, Index d) const {
  if (!(t >= 0 && t <= 1)) throw std::invalid_argument("PruneConfig: t must lie in [0, 1]");
  if (n_min < 0) throw std::invalid_argument("PruneConfig: n_min must be non-negative");
  const std::int64_t kept = n * d - prune_count(n * d, t);
  if (n_min > d || n_min * n > kept) {
    std::ostringstream msg;
    msg << "PruneConfig: n_min=" << n_min << " needs " << n_min * n << " kept entries but t=" << t << " keeps "
        << kept << " of " << n * d;
    throw std::invalid_argument(msg.str());
  }
}

Tensor magnitude_mask(const Tensor& table, const PruneConfig& cfg) {
  const auto n = static_cast<Index>(table.rows());
  const auto d = static_cast<Index>(table.cols());
  cfg.validate(n, d);

  std::vector<Real> key(table.size());
  for (std::size_t i = 0; i < key.size(); ++i) key[i] = std::abs(table[i]);

  // Per-row exemptions: the n_min largest under the same total order.
  if (cfg.n_min > 0) {
    std::vector<std::size_t> cols(static_cast<std::size_t>(d));
    for (Index r = 0; r < n; ++r) {
      const std::size_t base = static_cast<std::size_t>(r * d);
      std::iota(cols.begin(), cols.end(), 0);
      std::partial_sort(cols.begin(), cols.begin() + cfg.n_min, cols.end(), [&](std::size_t a, std::size_t b) {
        const Real ka = key[base + a], kb = key[base + b];
        return ka != kb ? ka > kb : a > b;
      });
      for (Index j = 0; j < cfg.n_min; ++j) key[base + cols[j]] = std::numeric_limits<Real>::infinity();
    }
  }

  const auto order = ascending_order(key);
  Tensor mask(table.shape(), 1);
  const auto drop = prune_count(n * d, cfg.t);
  for (std::int64_t i = 0; i < drop; ++i) mask[order[i]] = 0;
  return mask;
}

std::unique_ptr<CsrTable> magnitude_prune(const EmbeddingSpec& spec, const Tensor& table, const PruneConfig& cfg) {
  if (static_cast<Index>(table.rows()) != spec.n || static_cast<Index>(table.cols()) != spec.d) {
    throw ShapeError("magnitude_prune: table " + shape_string(table.shape()) + " does not match spec");
  }
  return CsrTable::from_dense(spec, table, magnitude_mask(table, cfg));
}

std::unique_ptr<CsrTable> magnitude_prune(const FullTable& table, const PruneConfig& cfg) {
  return magnitude_prune(table.spec(), table.weights(), cfg);
}

namespace {

Tensor stack_rows(std::span<const Tensor> tables) {
  if (tables.empty()) throw std::invalid_argument("no tables given");
  std::size_t rows = 0;
  for (const auto& t : tables) {
    if (t.cols() != tables[0].cols()) throw ShapeError("tables differ in width");
    rows += t.rows();
  }
  Tensor out = Tensor::uninitialized({rows, tables[0].cols()});
  Real* dst = out.data();
  for (const auto& t : tables) dst = std::copy(t.span().begin(), t.span().end(), dst);
  return out;
}

std::vector<Tensor> split_rows(const Tensor& stacked, std::span<const Tensor> like) {
  std::vector<Tensor> out;
  const Real* src = stacked.data();
  for (const auto& t : like) {
    out.emplace_back(t.shape(), std::span<const Real>(src, t.size()));
    src += t.size();
  }
  return out;
}

}  // namespace

std::vector<Tensor> magnitude_masks(std::span<const Tensor> tables, const PruneConfig& cfg) {
  return split_rows(magnitude_mask(stack_rows(tables), cfg), tables);
}

Tensor top_k_mask(const Tensor& scores, std::int64_t keep) {
  keep = std::clamp<std::int64_t>(keep, 0, static_cast<std::int64_t>(scores.size()));
  std::vector<std::size_t> order(scores.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return scores[a] > scores[b]; });
  Tensor mask(scores.shape(), 0);
  for (std::int64_t i = 0; i < keep; ++i) mask[order[i]] = 1;
  return mask;
}

// ---------------------------------------------------------------------------

SparsityNotReached::SparsityNotReached(double target_, double best_)
    : std::runtime_error([&] {
        std::ostringstream msg;
        msg << "sparsity target " << target_ << " not reached; best achieved " << best_;
        return msg.str();
      }()),
      target(target_),
      best(best_) {}

double MaskSnapshot::sparsity() const {
  std::size_t total = 0, nonzero = 0;
  for (const auto& m : masks) {
    total += m.size();
    nonzero += m.count_nonzero();
  }
  return total == 0 ? 0.0 : 1.0 - static_cast<double>(nonzero) / static_cast<double>(total);
}

void MaskSnapshot::save(Checkpoint& ck, const std::string& prefix) const {
  ck.set(prefix + ".tables", static_cast<std::int64_t>(masks.size()));
  ck.set(prefix + ".theta0", static_cast<std::int64_t>(theta0.size()));
  ck.set_real(prefix + ".crossing_sparsity", crossing_sparsity);
  ck.set(prefix + ".epochs", epochs);
  ck.set(prefix + ".steps", steps);
  for (std::size_t k = 0; k < masks.size(); ++k) {
    const std::string p = prefix + ".mask" + std::to_string(k);
    const Tensor& mask = masks[k];
    ck.set(p + ".n", specs[k].n);
    ck.set(p + ".d", specs[k].d);
    std::vector<std::int64_t> row_ptr{0}, cols;
    for (std::size_t r = 0; r < mask.rows(); ++r) {
      for (std::size_t c = 0; c < mask.cols(); ++c) {
        if (mask.at(r, c) != 0) cols.push_back(static_cast<std::int64_t>(c));
      }
      row_ptr.push_back(static_cast<std::int64_t>(cols.size()));
    }
    ck.put_ints(p + ".row_ptr", std::move(row_ptr));
    ck.put_ints(p + ".col_idx", std::move(cols));
  }
  for (std::size_t i = 0; i < theta0.size(); ++i) ck.put_tensor(prefix + ".theta0." + std::to_string(i), theta0[i]);
}

MaskSnapshot MaskSnapshot::load(const Checkpoint& ck, const std::string& prefix) {
  MaskSnapshot s;
  s.crossing_sparsity = ck.get_real(prefix + ".crossing_sparsity");
  s.epochs = static_cast<int>(ck.get_int(prefix + ".epochs"));
  s.steps = ck.get_int(prefix + ".steps");
  const auto tables = ck.get_int(prefix + ".tables");
  for (std::int64_t k = 0; k < tables; ++k) {
    const std::string p = prefix + ".mask" + std::to_string(k);
    EmbeddingSpec spec{ck.get_int(p + ".n"), ck.get_int(p + ".d")};
    spec.validate();
    const auto& row_ptr = ck.ints(p + ".row_ptr");
    const auto& cols = ck.ints(p + ".col_idx");
    if (static_cast<Index>(row_ptr.size()) != spec.n + 1 || row_ptr.back() != static_cast<std::int64_t>(cols.size())) {
      throw CheckpointError("mask snapshot '" + p + "': malformed CSR mask");
    }
    Tensor mask = Tensor::zeros(static_cast<std::size_t>(spec.n), static_cast<std::size_t>(spec.d));
    for (Index r = 0; r < spec.n; ++r) {
      for (auto i = row_ptr[r]; i < row_ptr[r + 1]; ++i) {
        if (cols[i] < 0 || cols[i] >= spec.d) throw CheckpointError("mask snapshot '" + p + "': column out of range");
        mask.at(static_cast<std::size_t>(r), static_cast<std::size_t>(cols[i])) = 1;
      }
    }
    s.specs.push_back(spec);
    s.masks.push_back(std::move(mask));
  }
  const auto count = ck.get_int(prefix + ".theta0");
  for (std::int64_t i = 0; i < count; ++i) s.theta0.push_back(ck.tensor(prefix + ".theta0." + std::to_string(i)));
  return s;
}

std::vector<Tensor> snapshot_values(const std::vector<Parameter>& params) {
  std::vector<Tensor> out;
  out.reserve(params.size());
  for (const auto& p : params) out.push_back(p.var.value());
  return out;
}

namespace {

struct StrRun {
  double crossing = 0;
  double best = 0;
  int epochs = 0;
  std::int64_t steps = 0;
  bool reached = false;
};

StrRun run_until_sparse(double t, const StrSchedule& schedule, const StrEpochFn& epoch,
                        const std::function<double()>& sparsity) {
  StrRun run;
  run.best = sparsity();
  if (run.best >= t) {
    run.reached = true;
    run.crossing = run.best;
    return run;
  }
  double penalty = schedule.penalty;
  for (int e = 0; e < schedule.max_epochs && !run.reached; ++e) {
    epoch(penalty, [&] {
      ++run.steps;
      const double s = sparsity();
      run.best = std::max(run.best, s);
      if (s >= t) {
        run.reached = true;
        run.crossing = s;
      }
      return run.reached;
    });
    run.epochs = e + 1;
    penalty *= schedule.penalty_growth;
  }
  if (!run.reached) throw SparsityNotReached(t, run.best);
  return run;
}

}  // namespace

MaskSnapshot pep_find_mask(std::span<StrTable* const> tables, std::vector<Tensor> theta0, double t,
                           const StrSchedule& schedule, const StrEpochFn& epoch) {
  if (tables.empty()) throw std::invalid_argument("pep_find_mask: no tables");
  if (!(t >= 0 && t <= 1)) throw std::invalid_argument("pep_find_mask: t must lie in [0, 1]");
  std::int64_t entries = 0;
  for (auto* table : tables) entries += table->n() * table->d();
  auto sparsity = [&] {
    std::int64_t alive = 0;
    for (auto* table : tables) alive += table->param_count();
    return 1.0 - static_cast<double>(alive) / static_cast<double>(entries);
  };
  const auto run = run_until_sparse(t, schedule, epoch, sparsity);

  MaskSnapshot snap;
  snap.theta0 = std::move(theta0);
  snap.crossing_sparsity = run.crossing;
  snap.epochs = run.epochs;
  snap.steps = run.steps;
  // Alive entries have positive margin, so the joint top-k set extends the
  // crossing pattern only when the crossing overshot.
  std::vector<Tensor> margins;
  for (auto* table : tables) {
    snap.specs.push_back(table->spec());
    margins.push_back(threshold_margin(table->weights().value(), table->threshold().value()));
  }
  Tensor joint({static_cast<std::size_t>(entries)}, 0);
  Real* dst = joint.data();
  for (const auto& m : margins) dst = std::copy(m.span().begin(), m.span().end(), dst);
  snap.masks = split_rows(top_k_mask(joint, entries - zeros_needed(entries, t)), margins);
  return snap;
}

MaskSnapshot pep_find_mask(StrTable& table, std::vector<Tensor> theta0, double t, const StrSchedule& schedule,
                           const StrEpochFn& epoch) {
  StrTable* tables[] = {&table};
  return pep_find_mask(tables, std::move(theta0), t, schedule, epoch);
}

void retrain_with_mask(const MaskSnapshot& snapshot, Adam& opt, std::span<const std::size_t> embedding_indices,
                       int epochs, const EpochFn& epoch) {
  const auto& params = opt.params();
  if (snapshot.theta0.size() != params.size()) {
    throw std::invalid_argument("retrain_with_mask: snapshot holds " + std::to_string(snapshot.theta0.size()) +
                                " tensors for " + std::to_string(params.size()) + " parameters");
  }
  if (embedding_indices.size() != snapshot.masks.size()) {
    throw std::invalid_argument("retrain_with_mask: one embedding index per mask required");
  }
  for (std::size_t i = 0; i < params.size(); ++i) {
    Tensor& v = params[i].var.node()->value;
    if (snapshot.theta0[i].shape() != v.shape()) {
      throw ShapeError("retrain_with_mask: θ0 shape mismatch for '" + params[i].name + "'");
    }
    v = snapshot.theta0[i];
  }
  for (std::size_t k = 0; k < embedding_indices.size(); ++k) opt.set_support(embedding_indices[k], snapshot.masks[k]);

  for (int e = 0; e < epochs; ++e) {
    epoch([] { return false; });
    for (std::size_t k = 0; k < embedding_indices.size(); ++k) {
      const Tensor& emb = params.at(embedding_indices[k]).var.value();
      const Tensor& mask = snapshot.masks[k];
      for (std::size_t i = 0; i < emb.size(); ++i) {
        if (emb[i] != 0 && mask[i] == 0) {
          throw std::logic_error("retrain_with_mask: entry " + std::to_string(i) + " of '" +
                                 params[embedding_indices[k]].name + "' left the mask in epoch " + std::to_string(e + 1));
        }
      }
    }
  }
}

void retrain_with_mask(const MaskSnapshot& snapshot, Adam& opt, std::size_t embedding_index, int epochs,
                       const EpochFn& epoch) {
  const std::size_t idx[] = {embedding_index};
  retrain_with_mask(snapshot, opt, idx, epochs, epoch);
}

// ---------------------------------------------------------------------------

ad::Var cerp_regularizer(const ad::Var& e1_rows, const ad::Var& e2_rows, Real weight, Real tau) {
  if (e1_rows.shape() != e2_rows.shape()) {
    throw ShapeError("cerp_regularizer: " + shape_string(e1_rows.shape()) + " vs " + shape_string(e2_rows.shape()));
  }
  auto alive = ad::add(ad::abs(e1_rows), ad::abs(e2_rows));
  auto dead = ad::softplus(ad::scale(alive, -1 / tau));
  return ad::scale(ad::sum(dead), weight / static_cast<Real>(e1_rows.rows()));
}

CerpResult cerp_prune(CerpTable& table, double t, const StrSchedule& schedule, const StrEpochFn& epoch) {
  if (table.frozen()) throw std::logic_error("cerp_prune: table already frozen");
  if (!(t >= 0 && t <= 1)) throw std::invalid_argument("cerp_prune: t must lie in [0, 1]");
  const double full = static_cast<double>(table.n() * table.d());
  const auto keep = table.n() * table.d() - zeros_needed(table.n() * table.d(), t);
  auto sparsity = [&] { return 1.0 - static_cast<double>(table.param_count()) / full; };
  const auto run = run_until_sparse(t, schedule, epoch, sparsity);

  // Rank both tables jointly by distance above their own threshold.
  const auto m1 = threshold_margin(table.w1().value(), table.s1().value());
  const auto m2 = threshold_margin(table.w2().value(), table.s2().value());
  Tensor joint({m1.size() + m2.size()}, 0);
  std::copy(m1.span().begin(), m1.span().end(), joint.data());
  std::copy(m2.span().begin(), m2.span().end(), joint.data() + m1.size());
  const auto mask = top_k_mask(joint, keep);
  Tensor mask1(m1.shape(), std::span<const Real>(mask.data(), m1.size()));
  Tensor mask2(m2.shape(), std::span<const Real>(mask.data() + m1.size(), m2.size()));

  // Survivors keep their shrunk value; refilled entries keep their raw one.
  auto settle = [](ad::Var& w, const Tensor& eff) {
    Tensor& v = w.mutable_value();
    for (std::size_t i = 0; i < v.size(); ++i) {
      if (eff[i] != 0) v[i] = eff[i];
    }
  };
  settle(table.w1(), table.effective1_value());
  settle(table.w2(), table.effective2_value());
  table.freeze(std::move(mask1), std::move(mask2));
  return {run.crossing, run.epochs, run.steps};
}

}  // namespace lers
