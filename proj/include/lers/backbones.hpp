// Copyright 2026 The LERS Kit Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstdint>
#include <memory>
#include <random>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "lers/checkpoint.hpp"
#include "lers/data.hpp"
#include "lers/embedding.hpp"
#include "lers/metrics.hpp"
#include "lers/optim.hpp"
#include "lers/sparse.hpp"

namespace lers {

constexpr Real kProbEps = 1e-7;

/// Fully connected tower: ReLU and dropout after every hidden layer, linear
/// output layer.
class Mlp {
 public:
  Mlp() = default;
  Mlp(std::size_t in, const std::vector<std::size_t>& hidden, std::size_t out, std::mt19937_64& rng);

  ad::Var forward(const ad::Var& x, Real dropout, std::mt19937_64& rng, bool training) const;
  std::vector<Parameter> parameters(const std::string& prefix) const;
  std::size_t in_dim() const;
  std::size_t out_dim() const;

  std::vector<ad::Var> weights;  // [in, out]
  std::vector<ad::Var> biases;   // [1, out]
};

enum class BackboneKind { NeuMf, LightGcn, DeepFm, DcnMix };

std::string_view backbone_name(BackboneKind kind);
BackboneKind parse_backbone(std::string_view name);
bool is_cf(BackboneKind kind);

/// Shared plumbing: embedding tables come first in parameters(), followed by
/// the dense parameters, so table k's leading parameter sits at a fixed index.
class Backbone {
 public:
  virtual ~Backbone() = default;
  virtual BackboneKind kind() const = 0;

  std::vector<std::unique_ptr<EmbeddingLayer>>& embeddings() { return embeddings_; }
  const std::vector<std::unique_ptr<EmbeddingLayer>>& embeddings() const { return embeddings_; }
  /// Replaces table k; the new layer must have the same spec.
  void set_embedding(std::size_t k, std::unique_ptr<EmbeddingLayer> layer);

  virtual std::vector<Parameter> dense_parameters() const = 0;
  std::vector<Parameter> parameters() const;
  /// Index in parameters() of each table's first parameter.
  std::vector<std::size_t> embedding_param_indices() const;

  /// ‖Θ‖²: every table's l2_penalty plus the squared dense parameters.
  ad::Var l2_penalty() const;
  std::int64_t embedding_params() const;
  std::int64_t full_embedding_params() const;

  virtual void save(Checkpoint& ck, const std::string& prefix) const;

 protected:
  void save_dense(Checkpoint& ck, const std::string& prefix) const;
  void load_dense(const Checkpoint& ck, const std::string& prefix);
  std::vector<std::unique_ptr<EmbeddingLayer>> embeddings_;
};

// ---------------------------------------------------------------------------
// Collaborative filtering. Embedding ids are unified: users occupy
// [0, users), item v sits at users + v.

struct CfBatch {
  std::vector<Index> users;
  std::vector<Index> positives;
  std::vector<Index> negatives;  // negatives_per_user per user, row-major
  std::size_t negatives_per_user = 1;

  std::size_t size() const { return users.size(); }
};

/// One shuffled epoch of train pairs with freshly sampled negatives.
std::vector<CfBatch> make_cf_batches(const InteractionSet& train, const UserItemIndex& index, std::size_t batch_size,
                                     std::size_t negatives_per_user, std::mt19937_64& rng);

class CfBackbone : public Backbone {
 public:
  CfBackbone(Index users, Index items) : users_(users), items_(items) {}
  Index num_users() const { return users_; }
  Index num_items() const { return items_; }

  /// Task loss of a batch in training mode, without the L2 term.
  virtual ad::Var task_loss(const CfBatch& batch, std::mt19937_64& rng) = 0;
  /// Evaluation-mode scorer over all items; precomputes what it can, so build
  /// one per evaluation pass.
  virtual UserScorer make_scorer() const = 0;

 protected:
  Index users_;
  Index items_;
};

struct NeuMfConfig {
  Index users = 1;
  Index items = 1;
  Index d = 32;
  std::vector<std::size_t> mlp{64, 32, 16};
  Real dropout = 0;
};

class NeuMf : public CfBackbone {
 public:
  /// `gmf` and `dnn` must be distinct layers over users + items rows of width d.
  NeuMf(const NeuMfConfig& cfg, std::unique_ptr<EmbeddingLayer> gmf, std::unique_ptr<EmbeddingLayer> dnn,
        std::mt19937_64& rng);

  BackboneKind kind() const override { return BackboneKind::NeuMf; }
  const NeuMfConfig& config() const { return cfg_; }
  EmbeddingLayer& gmf() const { return *embeddings_[0]; }
  EmbeddingLayer& dnn() const { return *embeddings_[1]; }
  ad::Var& h() { return h_; }
  Mlp& tower() { return tower_; }

  /// Pre-sigmoid h^T(g_u ⊙ g_v) + DNN([d_u, d_v]) for aligned (user, item) pairs, [B, 1].
  ad::Var logits(std::span<const Index> users, std::span<const Index> items, std::mt19937_64& rng,
                 bool training) const;
  ad::Var score(std::span<const Index> users, std::span<const Index> items, std::mt19937_64& rng,
                bool training) const;

  ad::Var task_loss(const CfBatch& batch, std::mt19937_64& rng) override;
  UserScorer make_scorer() const override;
  std::vector<Parameter> dense_parameters() const override;
  void save(Checkpoint& ck, const std::string& prefix) const override;
  static std::unique_ptr<NeuMf> load(const Checkpoint& ck, const std::string& prefix);

 private:
  NeuMfConfig cfg_;
  ad::Var h_;
  Mlp tower_;
};

/// Mean over samples of -ln r+ - Σ ln(1 - r-), with r clipped to [ε, 1-ε].
/// `neg` holds negatives_per_user probabilities per positive, row-major.
ad::Var neumf_loss(const ad::Var& pos, const ad::Var& neg, std::size_t negatives_per_user, Real eps = kProbEps);

struct LightGcnConfig {
  Index users = 1;
  Index items = 1;
  Index d = 64;
  int layers = 3;
  Real gamma = 0.1;  // InfoNCE weight
  Real tau = 0.2;

  void validate() const;
};

/// Symmetric (users + items)² adjacency with entries (|N(u)|·|N(v)|)^{-1/2}.
SparseMatrix normalized_adjacency(const InteractionSet& train);

/// Mean of E0, A·E0, ..., A^L·E0.
ad::Var lightgcn_propagate(const SparseMatrix& adjacency, const ad::Var& e0, int layers);
Tensor lightgcn_propagate(const SparseMatrix& adjacency, const Tensor& e0, int layers);

/// Mean over pairs of -ln σ(pos - neg); `neg` holds negatives_per_user scores per row of `pos`.
ad::Var bpr_loss(const ad::Var& pos, const ad::Var& neg, std::size_t negatives_per_user);

/// Mean over the rows z of `nodes` of -ln(exp(⟨ẑ,ẑ⟩/τ) / Σ_z' exp(⟨ẑ,ẑ'⟩/τ)),
/// with every row L2-normalized first.
ad::Var info_nce(const ad::Var& nodes, Real tau);

class LightGcn : public CfBackbone {
 public:
  LightGcn(const LightGcnConfig& cfg, std::unique_ptr<EmbeddingLayer> table, SparseMatrix adjacency);
  LightGcn(const LightGcnConfig& cfg, std::unique_ptr<EmbeddingLayer> table, const InteractionSet& train);

  BackboneKind kind() const override { return BackboneKind::LightGcn; }
  const LightGcnConfig& config() const { return cfg_; }
  const SparseMatrix& adjacency() const { return adjacency_; }

  /// Propagated embeddings of every node, in-graph.
  ad::Var finals() const;
  /// BPR over the batch plus γ·InfoNCE over its distinct users and items.
  ad::Var task_loss(const CfBatch& batch, std::mt19937_64& rng) override;
  UserScorer make_scorer() const override;
  std::vector<Parameter> dense_parameters() const override { return {}; }
  void save(Checkpoint& ck, const std::string& prefix) const override;
  static std::unique_ptr<LightGcn> load(const Checkpoint& ck, const std::string& prefix);

 private:
  LightGcnConfig cfg_;
  SparseMatrix adjacency_;
};

// ---------------------------------------------------------------------------
// Click-through rate. Every record has one active feature per field, so the
// field-wise sum pooling reduces to that feature's embedding.

struct CtrBatch {
  std::size_t fields = 0;
  std::vector<Index> features;  // sample-major, one id per field
  std::vector<std::uint8_t> labels;

  std::size_t size() const { return labels.size(); }
};

/// Batches covering every record once, in shuffled order when rng is given.
std::vector<CtrBatch> make_ctr_batches(const CtrRecordSet& records, std::size_t batch_size, std::mt19937_64* rng);

/// Mean log loss with ŷ clipped to [ε, 1-ε].
ad::Var ctr_loss(const ad::Var& probs, std::span<const std::uint8_t> labels, Real eps = kProbEps);

/// Pairwise term Σ_{i<j} ⟨e_i, e_j⟩ per row of a [B, fields·d] block, via
/// ½(‖Σ e‖² - Σ ‖e‖²). Returns [B, 1].
ad::Var fm_interaction(const ad::Var& pooled, std::size_t fields);

class CtrBackbone : public Backbone {
 public:
  CtrBackbone(FieldLayout layout) : layout_(std::move(layout)) {}
  const FieldLayout& layout() const { return layout_; }
  EmbeddingLayer& table() const { return *embeddings_[0]; }

  /// Field embeddings concatenated per sample: [B, fields·d].
  ad::Var pooled(const CtrBatch& batch) const;
  virtual ad::Var logits(const CtrBatch& batch, std::mt19937_64& rng, bool training) const = 0;
  ad::Var task_loss(const CtrBatch& batch, std::mt19937_64& rng);
  /// Evaluation-mode click probabilities for every record.
  std::vector<double> predict(const CtrRecordSet& records, std::size_t batch_size = 4096) const;

 protected:
  void check_batch(const CtrBatch& batch) const;
  FieldLayout layout_;
};

struct DeepFmConfig {
  Index d = 16;
  std::vector<std::size_t> mlp{400, 400, 400};
  Real dropout = 0;
};

class DeepFm : public CtrBackbone {
 public:
  DeepFm(const DeepFmConfig& cfg, FieldLayout layout, std::unique_ptr<EmbeddingLayer> table, std::mt19937_64& rng);

  BackboneKind kind() const override { return BackboneKind::DeepFm; }
  const DeepFmConfig& config() const { return cfg_; }
  ad::Var& w0() { return w0_; }
  ad::Var& linear() { return linear_; }
  Mlp& tower() { return tower_; }

  /// w0 + Σ w_i + Σ_{i<j} ⟨e_i, e_j⟩, [B, 1].
  ad::Var fm_logit(const CtrBatch& batch) const;
  ad::Var logits(const CtrBatch& batch, std::mt19937_64& rng, bool training) const override;
  std::vector<Parameter> dense_parameters() const override;
  void save(Checkpoint& ck, const std::string& prefix) const override;
  static std::unique_ptr<DeepFm> load(const Checkpoint& ck, const std::string& prefix);

 private:
  DeepFmConfig cfg_;
  ad::Var w0_;      // [1, 1]
  ad::Var linear_;  // [n, 1]
  Mlp tower_;
};

struct DcnMixConfig {
  Index d = 16;
  int layers = 3;
  int experts = 4;
  std::size_t rank = 64;
  std::vector<std::size_t> mlp{512, 512};
  Real dropout = 0;

  /// Throws unless rank < f.
  void validate(std::size_t f) const;
};

struct DcnExpert {
  ad::Var u;     // [f, r]
  ad::Var v;     // [f, r]
  ad::Var c;     // [r, r]
  ad::Var gate;  // [f, 1]
};

struct DcnLayer {
  std::vector<DcnExpert> experts;
  ad::Var bias;  // [1, f]
};

/// Σ_i (W_i^T e_l) · e0 ⊙ (U_i tanh(C_i tanh(V_i^T e_l)) + b) + e_l, row-wise.
ad::Var dcn_mix_layer(const ad::Var& el, const ad::Var& e0, const DcnLayer& layer);

class DcnMix : public CtrBackbone {
 public:
  DcnMix(const DcnMixConfig& cfg, FieldLayout layout, std::unique_ptr<EmbeddingLayer> table, std::mt19937_64& rng);

  BackboneKind kind() const override { return BackboneKind::DcnMix; }
  const DcnMixConfig& config() const { return cfg_; }
  std::vector<DcnLayer>& cross() { return cross_; }
  Mlp& tower() { return tower_; }
  std::size_t f() const;

  ad::Var logits(const CtrBatch& batch, std::mt19937_64& rng, bool training) const override;
  std::vector<Parameter> dense_parameters() const override;
  void save(Checkpoint& ck, const std::string& prefix) const override;
  static std::unique_ptr<DcnMix> load(const Checkpoint& ck, const std::string& prefix);

 private:
  DcnMixConfig cfg_;
  std::vector<DcnLayer> cross_;
  Mlp tower_;
};

/// Restores any backbone written by Backbone::save.
std::unique_ptr<Backbone> load_backbone(const Checkpoint& ck, const std::string& prefix);

}  // namespace lers
