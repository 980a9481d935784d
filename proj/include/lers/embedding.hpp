// Copyright 2026 The LERS Kit Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstdint>
#include <memory>
#include <optional>
#include <random>
#include <span>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

#include "lers/autodiff.hpp"
#include "lers/checkpoint.hpp"
#include "lers/data.hpp"
#include "lers/optim.hpp"

namespace lers {

struct EmbeddingSpec {
  Index n = 1;
  Index d = 1;

  void validate() const;
  Index full_params() const { return n * d; }
};

/// A compression target outside what a method can reach for a given spec.
class UnreachableSparsity : public std::runtime_error {
 public:
  UnreachableSparsity(const std::string& method, double target, double lo, double hi);
  double lo;
  double hi;
};

enum class LayerKind { Full, Qr, Tt, Dhe, Csr, Cerp, Str, Supernet };

std::string_view kind_name(LayerKind kind);
LayerKind parse_kind(std::string_view name);

/// Common contract of every embedding representation.
///
/// forward() builds a differentiable [ids, d] lookup; lookup_rows() is the
/// graph-free serving path and must agree with forward() exactly.
class EmbeddingLayer {
 public:
  explicit EmbeddingLayer(EmbeddingSpec spec) : spec_(spec) { spec_.validate(); }
  virtual ~EmbeddingLayer() = default;

  virtual LayerKind kind() const = 0;
  const EmbeddingSpec& spec() const { return spec_; }
  Index n() const { return spec_.n; }
  Index d() const { return spec_.d; }

  virtual ad::Var forward(std::span<const Index> ids) = 0;
  virtual Tensor lookup_rows(std::span<const Index> ids) const = 0;
  Tensor lookup(Index id) const { return lookup_rows(std::span<const Index>(&id, 1)); }
  /// All n rows, as an [n, d] tensor.
  Tensor materialize() const;

  virtual std::vector<Parameter> parameters() = 0;
  /// Sum of squares of the regularized parameters, in-graph.
  virtual ad::Var l2_penalty();
  virtual std::int64_t param_count() const = 0;
  /// 1 - param_count / (n * d); negative when a layer exceeds the full table.
  double sparsity() const;

  virtual void save(Checkpoint& ck, const std::string& prefix) const = 0;
  virtual std::unique_ptr<EmbeddingLayer> clone() const = 0;

 protected:
  void check_ids(std::span<const Index> ids) const;
  void save_header(Checkpoint& ck, const std::string& prefix) const;
  EmbeddingSpec spec_;
};

std::unique_ptr<EmbeddingLayer> load_layer(const Checkpoint& ck, const std::string& prefix);

// ---------------------------------------------------------------------------

class FullTable : public EmbeddingLayer {
 public:
  FullTable(EmbeddingSpec spec, Tensor weights);
  static std::unique_ptr<FullTable> random(EmbeddingSpec spec, Real stddev, std::mt19937_64& rng);

  LayerKind kind() const override { return LayerKind::Full; }
  ad::Var forward(std::span<const Index> ids) override;
  Tensor lookup_rows(std::span<const Index> ids) const override;
  std::vector<Parameter> parameters() override;
  std::int64_t param_count() const override;
  void save(Checkpoint& ck, const std::string& prefix) const override;
  std::unique_ptr<EmbeddingLayer> clone() const override;

  const Tensor& weights() const { return weights_.value(); }
  Tensor& mutable_weights() { return weights_.mutable_value(); }
  const ad::Var& var() const { return weights_; }
  /// Fixes a 0/1 support: masked entries are zeroed and excluded from the count.
  void set_mask(Tensor mask);
  const std::optional<Tensor>& mask() const { return mask_; }

 private:
  ad::Var weights_;
  std::optional<Tensor> mask_;
};

/// (i mod p, i div p).
std::pair<Index, Index> qr_indices(Index i, Index n, Index p);

/// E1[i mod p] ⊙ E2[i div p].
class QrTable : public EmbeddingLayer {
 public:
  QrTable(EmbeddingSpec spec, Index p, Tensor e1, Tensor e2);
  static std::unique_ptr<QrTable> random(EmbeddingSpec spec, Index p, Real stddev, std::mt19937_64& rng);

  LayerKind kind() const override { return LayerKind::Qr; }
  ad::Var forward(std::span<const Index> ids) override;
  Tensor lookup_rows(std::span<const Index> ids) const override;
  std::vector<Parameter> parameters() override;
  std::int64_t param_count() const override { return (p_ + q_) * spec_.d; }
  void save(Checkpoint& ck, const std::string& prefix) const override;
  std::unique_ptr<EmbeddingLayer> clone() const override;

  Index p() const { return p_; }
  Index q() const { return q_; }
  const ad::Var& e1() const { return e1_; }
  const ad::Var& e2() const { return e2_; }

 private:
  Index p_;
  Index q_;
  ad::Var e1_;
  ad::Var e2_;
};

struct TtShape {
  std::vector<Index> row_factors;  // n_i, product >= n
  std::vector<Index> col_factors;  // d_i, product == d
  std::vector<Index> ranks;        // r_0 .. r_t, r_0 = r_t = 1

  std::size_t cores() const { return row_factors.size(); }
  std::int64_t core_params() const;
  void validate(const EmbeddingSpec& spec) const;
};

/// Near-balanced t-way split of n (padded so the product covers n).
std::vector<Index> balanced_cover(Index n, std::size_t t);
/// Most balanced exact t-way factorization of d.
std::vector<Index> balanced_factorization(Index d, std::size_t t);

/// Tensor-train table. Core k is stored as an [r_{k-1} * n_k, d_k * r_k]
/// matrix indexed ((a * n_k + i), (j * r_k + b)). Row i is the chained
/// contraction of the core slices selected by the mixed-radix digits of i
/// (most significant digit first), unless i is cached.
class TtTable : public EmbeddingLayer {
 public:
  TtTable(EmbeddingSpec spec, TtShape shape, std::vector<Tensor> cores, Index cache_capacity = 0);
  static std::unique_ptr<TtTable> random(EmbeddingSpec spec, TtShape shape, Index cache_capacity, Real stddev,
                                         std::mt19937_64& rng);

  LayerKind kind() const override { return LayerKind::Tt; }
  ad::Var forward(std::span<const Index> ids) override;
  Tensor lookup_rows(std::span<const Index> ids) const override;
  std::vector<Parameter> parameters() override;
  std::int64_t param_count() const override;
  void save(Checkpoint& ck, const std::string& prefix) const override;
  std::unique_ptr<EmbeddingLayer> clone() const override;

  const TtShape& tt_shape() const { return shape_; }
  const std::vector<ad::Var>& cores() const { return cores_; }
  Index cache_capacity() const { return cache_capacity_; }
  const std::vector<Index>& cached_ids() const { return cached_ids_; }
  /// Caches the most frequent ids (ties by lower id), seeding each cached
  /// row with its current tensor-train value.
  void build_cache(std::span<const std::int64_t> frequencies);

  /// Row computed from the cores only, ignoring the cache.
  Tensor core_row(Index id) const;

 private:
  void contract(Index id, std::vector<std::vector<Real>>& partials) const;

  TtShape shape_;
  std::vector<ad::Var> cores_;
  Index cache_capacity_;
  ad::Var cache_;                   // [max(cache_capacity, 1), d]
  std::vector<Index> cached_ids_;
  std::vector<std::int32_t> slot_;  // id -> cache slot or -1
};

/// Full reconstruction of the cores (ignores the cache), cropped to n rows.
/// Throws std::length_error beyond `max_entries`.
Tensor tt_reconstruct(const TtTable& table, std::size_t max_entries = std::size_t{1} << 24);

/// Deterministic per-coordinate hash of `i`, uniform on [-1, 1].
std::vector<Real> dhe_encode(Index i, std::span<const std::uint64_t> seeds);
std::vector<std::uint64_t> dhe_seeds(std::size_t k, std::uint64_t seed);

/// Hash code -> ReLU hidden layer of width w -> d outputs.
class DheEncoder : public EmbeddingLayer {
 public:
  DheEncoder(EmbeddingSpec spec, std::vector<std::uint64_t> seeds, Tensor w1, Tensor b1, Tensor w2, Tensor b2);
  static std::unique_ptr<DheEncoder> random(EmbeddingSpec spec, std::size_t k, Index width, std::uint64_t hash_seed,
                                            Real stddev, std::mt19937_64& rng);
  static std::int64_t params_for(std::size_t k, Index width, Index d) {
    return static_cast<std::int64_t>(k) * width + width + width * d + d;
  }

  LayerKind kind() const override { return LayerKind::Dhe; }
  ad::Var forward(std::span<const Index> ids) override;
  Tensor lookup_rows(std::span<const Index> ids) const override;
  std::vector<Parameter> parameters() override;
  std::int64_t param_count() const override;
  void save(Checkpoint& ck, const std::string& prefix) const override;
  std::unique_ptr<EmbeddingLayer> clone() const override;

  std::size_t k() const { return seeds_.size(); }
  Index width() const { return static_cast<Index>(w1_.cols()); }
  const std::vector<std::uint64_t>& seeds() const { return seeds_; }
  Tensor codes(std::span<const Index> ids) const;

 private:
  std::vector<std::uint64_t> seeds_;
  ad::Var w1_, b1_, w2_, b2_;
};

/// Row-compressed table. Only the stored values are trainable and counted.
class CsrTable : public EmbeddingLayer {
 public:
  CsrTable(EmbeddingSpec spec, std::vector<std::int64_t> row_ptr, std::vector<std::int64_t> col_idx, Tensor values);
  /// Keeps the entries of `dense` where `mask` is nonzero.
  static std::unique_ptr<CsrTable> from_dense(EmbeddingSpec spec, const Tensor& dense, const Tensor& mask);

  LayerKind kind() const override { return LayerKind::Csr; }
  ad::Var forward(std::span<const Index> ids) override;
  Tensor lookup_rows(std::span<const Index> ids) const override;
  std::vector<Parameter> parameters() override;
  std::int64_t param_count() const override { return static_cast<std::int64_t>(col_idx_.size()); }
  void save(Checkpoint& ck, const std::string& prefix) const override;
  std::unique_ptr<EmbeddingLayer> clone() const override;

  std::int64_t nnz() const { return param_count(); }
  /// Bytes spent on row pointers and column indices (reported, not counted).
  std::int64_t index_bytes() const;
  const std::vector<std::int64_t>& row_ptr() const { return row_ptr_; }
  const std::vector<std::int64_t>& col_idx() const { return col_idx_; }
  const Tensor& values() const { return values_.value(); }
  Tensor to_dense() const;
  Tensor mask() const;

 private:
  std::vector<std::int64_t> row_ptr_;
  std::vector<std::int64_t> col_idx_;
  ad::Var values_;  // [1, nnz]
};

/// Full table trained through soft-threshold reparameterization.
/// Threshold granularity is one scalar or one per row.
class StrTable : public EmbeddingLayer {
 public:
  StrTable(EmbeddingSpec spec, Tensor weights, Tensor threshold);
  static std::unique_ptr<StrTable> random(EmbeddingSpec spec, Real stddev, Real s_init, bool per_row,
                                          std::mt19937_64& rng);

  LayerKind kind() const override { return LayerKind::Str; }
  ad::Var forward(std::span<const Index> ids) override;
  Tensor lookup_rows(std::span<const Index> ids) const override;
  std::vector<Parameter> parameters() override;
  ad::Var l2_penalty() override;
  std::int64_t param_count() const override;
  void save(Checkpoint& ck, const std::string& prefix) const override;
  std::unique_ptr<EmbeddingLayer> clone() const override;

  const ad::Var& weights() const { return weights_; }
  ad::Var& weights() { return weights_; }
  const ad::Var& threshold() const { return threshold_; }
  ad::Var& threshold() { return threshold_; }
  Tensor effective() const;

 private:
  ad::Var weights_;
  ad::Var threshold_;
};

/// Elementwise sign(w) * max(|w| - sigmoid(s), 0) on plain numbers.
Real str_forward(Real w, Real s);

/// Two balanced STR tables of b rows each, combined by sum. Row i reads
/// E1[i mod b] and E2[(i div b + i mod b) mod b]; distinct for i < b².
class CerpTable : public EmbeddingLayer {
 public:
  CerpTable(EmbeddingSpec spec, Index buckets, Tensor w1, Tensor w2, Tensor s1, Tensor s2);
  static std::unique_ptr<CerpTable> random(EmbeddingSpec spec, Index buckets, Real stddev, Real s_init,
                                           std::mt19937_64& rng);
  static std::pair<Index, Index> indices(Index i, Index buckets);

  LayerKind kind() const override { return LayerKind::Cerp; }
  ad::Var forward(std::span<const Index> ids) override;
  Tensor lookup_rows(std::span<const Index> ids) const override;
  std::vector<Parameter> parameters() override;
  ad::Var l2_penalty() override;
  std::int64_t param_count() const override;
  void save(Checkpoint& ck, const std::string& prefix) const override;
  std::unique_ptr<EmbeddingLayer> clone() const override;

  Index buckets() const { return buckets_; }
  /// The two effective rows behind each id, before summation.
  std::pair<ad::Var, ad::Var> parts(std::span<const Index> ids);
  /// Effective (thresholded or masked) tables, in-graph.
  ad::Var effective1();
  ad::Var effective2();
  Tensor effective1_value() const;
  Tensor effective2_value() const;
  ad::Var& w1() { return w1_; }
  ad::Var& w2() { return w2_; }
  ad::Var& s1() { return s1_; }
  ad::Var& s2() { return s2_; }
  /// Replaces thresholding with fixed 0/1 masks; weights outside are zeroed.
  void freeze(Tensor mask1, Tensor mask2);
  bool frozen() const { return mask1_.has_value(); }
  const std::optional<Tensor>& mask1() const { return mask1_; }
  const std::optional<Tensor>& mask2() const { return mask2_; }

 private:
  Index buckets_;
  ad::Var w1_, w2_, s1_, s2_;
  std::optional<Tensor> mask1_, mask2_;
};

/// Full table evaluated under a per-field prefix width and optional row mask.
class Supernet : public EmbeddingLayer {
 public:
  Supernet(EmbeddingSpec spec, FieldLayout layout, Tensor weights);
  static std::unique_ptr<Supernet> random(EmbeddingSpec spec, FieldLayout layout, Real stddev, std::mt19937_64& rng);

  LayerKind kind() const override { return LayerKind::Supernet; }
  ad::Var forward(std::span<const Index> ids) override;
  Tensor lookup_rows(std::span<const Index> ids) const override;
  std::vector<Parameter> parameters() override;
  std::int64_t param_count() const override;
  void save(Checkpoint& ck, const std::string& prefix) const override;
  std::unique_ptr<EmbeddingLayer> clone() const override;

  const FieldLayout& layout() const { return layout_; }
  const ad::Var& var() const { return weights_; }
  Tensor& mutable_weights() { return weights_.mutable_value(); }
  /// Keep the first dims[f] coordinates of field f (1 <= dims[f] <= d).
  void set_dims(std::vector<Index> dims);
  const std::vector<Index>& dims() const { return dims_; }
  /// 0/1 per row; empty means every row is kept.
  void set_row_mask(std::vector<std::uint8_t> keep);
  const std::vector<std::uint8_t>& row_mask() const { return keep_; }
  /// Current masks as a dense 0/1 [n, d] tensor.
  Tensor dense_mask() const;

 private:
  Real mask_at(Index id, Index col) const;
  FieldLayout layout_;
  ad::Var weights_;
  std::vector<Index> dims_;
  std::vector<std::uint8_t> keep_;
};

// ---------------------------------------------------------------------------
// Budget solvers: pick hyperparameters so a compressed layer lands on
// (1 - target) * n * d parameters.

Index solve_qr_p(const EmbeddingSpec& spec, double target);

struct TtPlan {
  TtShape shape;
  Index cache_rows = 0;
};
TtPlan solve_tt(const EmbeddingSpec& spec, double target, std::size_t cores = 3);

Index solve_dhe_width(const EmbeddingSpec& spec, double target, std::size_t k);

/// Rows per CERP table: dense storage is about twice the budget, so pruning
/// removes roughly half of the entries.
Index solve_cerp_buckets(const EmbeddingSpec& spec, double target);

struct LayerOptions {
  double target = 0;     // sparsity target for compressed kinds
  Real stddev = 0.1;     // scale of initial lookups
  std::size_t dhe_k = 0;  // 0 means 2d
  std::uint64_t hash_seed = 0x5eed;
  Real str_init = -6;    // initial threshold logit
  bool str_per_row = false;
  std::optional<FieldLayout> layout;  // supernet fields
};

/// Builds a freshly initialized layer of `kind` sized for `opts.target`.
std::unique_ptr<EmbeddingLayer> make_layer(LayerKind kind, const EmbeddingSpec& spec, const LayerOptions& opts,
                                           std::mt19937_64& rng);

}  // namespace lers
