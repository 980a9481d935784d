// Copyright 2026 The LERS Kit Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstdint>
#include <functional>
#include <memory>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "lers/checkpoint.hpp"
#include "lers/embedding.hpp"
#include "lers/optim.hpp"

namespace lers {

/// Number of entries a target sparsity t removes from an n x d table.
std::int64_t prune_count(std::int64_t entries, double t);

struct PruneConfig {
  double t = 0.5;
  Index n_min = 0;  // nonzeros kept per row regardless of magnitude

  /// Throws std::invalid_argument when t is out of [0, 1] or n_min cannot
  /// be honoured for an n x d table.
  void validate(Index n, Index d) const;
};

/// 0/1 mask of the entries MagPrune keeps: floor(n*d*t) entries are dropped
/// in ascending (|value|, row, col) order, skipping each row's n_min largest.
Tensor magnitude_mask(const Tensor& table, const PruneConfig& cfg);

std::unique_ptr<CsrTable> magnitude_prune(const FullTable& table, const PruneConfig& cfg);
std::unique_ptr<CsrTable> magnitude_prune(const EmbeddingSpec& spec, const Tensor& table, const PruneConfig& cfg);

/// MagPrune over several same-width tables treated as one row-concatenated
/// table; returns one mask per table.
std::vector<Tensor> magnitude_masks(std::span<const Tensor> tables, const PruneConfig& cfg);

/// Keeps the `keep` highest-scoring entries (ties by lower flat index).
Tensor top_k_mask(const Tensor& scores, std::int64_t keep);

// ---------------------------------------------------------------------------
// Soft-threshold training.

/// Called after every optimizer step; returning true ends the epoch early.
using StepHook = std::function<bool()>;
/// One training epoch over the caller's model. `penalty` is the current
/// weight of the in-graph L2 term on effective embedding weights.
using StrEpochFn = std::function<void(double penalty, const StepHook& after_step)>;
using EpochFn = std::function<void(const StepHook& after_step)>;

struct StrSchedule {
  int max_epochs = 50;
  double penalty = 1e-4;
  /// Multiplies the penalty after every epoch that ends below target.
  double penalty_growth = 1.0;
};

class SparsityNotReached : public std::runtime_error {
 public:
  SparsityNotReached(double target, double best);
  double target;
  double best;
};

struct MaskSnapshot {
  std::vector<EmbeddingSpec> specs;
  std::vector<Tensor> masks;   // one [n, d] 0/1 mask per pruned table
  std::vector<Tensor> theta0;  // initial values of every model parameter
  double crossing_sparsity = 0;
  int epochs = 0;
  std::int64_t steps = 0;

  /// Joint sparsity over every masked table.
  double sparsity() const;
  void save(Checkpoint& ck, const std::string& prefix) const;
  static MaskSnapshot load(const Checkpoint& ck, const std::string& prefix);
};

std::vector<Tensor> snapshot_values(const std::vector<Parameter>& params);

/// Trains until the effective weights of the tables (jointly) reach sparsity
/// t, then emits masks with exactly ceil(N*t) zeros over all N entries.
/// Entries zeroed at the crossing stay zeroed unless the overshoot is
/// refilled, in which case the ones closest to their threshold come back
/// first. Throws SparsityNotReached.
MaskSnapshot pep_find_mask(std::span<StrTable* const> tables, std::vector<Tensor> theta0, double t,
                           const StrSchedule& schedule, const StrEpochFn& epoch);
MaskSnapshot pep_find_mask(StrTable& table, std::vector<Tensor> theta0, double t, const StrSchedule& schedule,
                           const StrEpochFn& epoch);

/// Lottery-ticket retraining: resets `opt`'s parameters to θ0, multiplies
/// parameter embedding_indices[k] by masks[k], confines its updates to the
/// mask and runs `epochs` epochs. Throws std::logic_error if an epoch ever
/// leaves a nonzero outside a mask.
void retrain_with_mask(const MaskSnapshot& snapshot, Adam& opt, std::span<const std::size_t> embedding_indices,
                       int epochs, const EpochFn& epoch);
void retrain_with_mask(const MaskSnapshot& snapshot, Adam& opt, std::size_t embedding_index, int epochs,
                       const EpochFn& epoch);

// ---------------------------------------------------------------------------
// CERP.

constexpr Real kCerpTau = 0.01;

/// Mean over rows of sum_j softplus(-(|a_ij| + |b_ij|) / tau), times weight.
ad::Var cerp_regularizer(const ad::Var& e1_rows, const ad::Var& e2_rows, Real weight, Real tau = kCerpTau);

struct CerpResult {
  double crossing_sparsity = 0;
  int epochs = 0;
  std::int64_t steps = 0;
};

/// Dual-table STR training until the pair holds at most (1 - t) * n * d
/// nonzeros, then a freeze at exactly n*d - ceil(n*d*t) surviving entries.
CerpResult cerp_prune(CerpTable& table, double t, const StrSchedule& schedule, const StrEpochFn& epoch);

}  // namespace lers
