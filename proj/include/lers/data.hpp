// Copyright 2026 The LERS Kit Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <map>
#include <random>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "lers/tensor.hpp"

namespace lers {

/// Raised for malformed or inconsistent input data.
class DataError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Contiguous id blocks, one per field: field f owns [offsets[f], offsets[f+1]).
/// CF uses two fields (users, then items); CTR uses one per feature column.
struct FieldLayout {
  std::vector<Index> offsets{0};

  static FieldLayout from_sizes(const std::vector<Index>& sizes);
  std::size_t num_fields() const { return offsets.size() - 1; }
  Index total() const { return offsets.back(); }
  Index size_of(std::size_t field) const { return offsets[field + 1] - offsets[field]; }
  std::size_t field_of(Index id) const;
};

// ---------------------------------------------------------------------------
// Collaborative filtering

struct Interaction {
  Index user;
  Index item;
  bool operator==(const Interaction&) const = default;
  auto operator<=>(const Interaction&) const = default;
};

enum class SplitTag { Train, Valid, Test };

struct InteractionSet {
  Index num_users = 0;
  Index num_items = 0;
  std::vector<Interaction> pairs;
  SplitTag tag = SplitTag::Train;

  /// Sorted item lists per user.
  std::vector<std::vector<Index>> items_by_user() const;
  std::vector<Index> item_popularity() const;
  /// Throws DataError on out-of-range ids or duplicate pairs.
  void validate() const;
};

/// `user<TAB>item` per line, `#` comment lines ignored. Ids are 0-based; the
/// user/item counts are max id + 1 unless larger counts are given.
InteractionSet load_interactions(const std::filesystem::path& path, Index num_users = 0, Index num_items = 0);
void save_interactions(const InteractionSet& set, const std::filesystem::path& path);

/// Per-user holdout: round(ratio * count) interactions stay in train, but at
/// least one goes to the second split whenever the user has two or more.
std::pair<InteractionSet, InteractionSet> split_per_user(const InteractionSet& all, double ratio, std::uint64_t seed);

/// Sorted per-user item lists for membership queries.
class UserItemIndex {
 public:
  explicit UserItemIndex(const InteractionSet& set);
  bool contains(Index user, Index item) const;
  const std::vector<Index>& items(Index user) const { return by_user_.at(user); }
  Index num_items() const { return num_items_; }
  Index num_users() const { return static_cast<Index>(by_user_.size()); }

 private:
  std::vector<std::vector<Index>> by_user_;
  Index num_items_;
};

/// Uniform draws (rejecting collisions) from the items `user` has not seen.
std::vector<Index> sample_negatives(const UserItemIndex& train, Index user, std::size_t count, std::mt19937_64& rng);

struct SyntheticCfConfig {
  Index num_users = 943;
  Index num_items = 1682;
  std::size_t interactions = 100000;
  std::size_t min_per_user = 20;
  int latent_dim = 8;
  double popularity_exponent = 0.8;
  double affinity_temperature = 0.35;
  std::uint64_t seed = 2024;
};

/// Latent-factor interaction generator with Zipf item popularity.
InteractionSet generate_interactions(const SyntheticCfConfig& cfg);

// ---------------------------------------------------------------------------
// CTR

enum class FieldKind { Numeric, Categorical };

struct CtrSchema {
  std::vector<FieldKind> fields;
};

/// One `field_index:numeric|categorical` entry per line.
CtrSchema load_schema(const std::filesystem::path& path);
void save_schema(const CtrSchema& schema, const std::filesystem::path& path);

struct RawCtrRecord {
  int label = 0;
  std::vector<std::string> values;
};

/// `label<TAB>v1<TAB>v2...` per line.
std::vector<RawCtrRecord> load_ctr_records(const std::filesystem::path& path, const CtrSchema& schema);
void save_ctr_records(const std::vector<RawCtrRecord>& records, const std::filesystem::path& path);

inline constexpr std::int64_t kMissingToken = -1;

/// ceil(log2(x)) for x > 2, x itself for 0 <= x <= 2, kMissingToken for x < 0.
std::int64_t discretize_numeric(std::int64_t x);
/// Token string for a raw numeric cell; empty or unparsable cells are missing.
std::string numeric_token(const std::string& raw);

struct FeatureVocab {
  FieldLayout layout;
  std::vector<std::map<std::string, Index>> ids;  // per field, kept values only
  std::vector<Index> oov_ids;                      // per field
  std::vector<std::size_t> frequencies;            // per global id (OOV: pooled count)

  Index size() const { return layout.total(); }
  Index lookup(std::size_t field, const std::string& token) const;
};

/// Counts tokens over `train` only. Tokens with frequency < min_freq share the
/// field's OOV id; kept ids are ordered by descending frequency then token.
FeatureVocab build_vocab(const std::vector<RawCtrRecord>& train, const CtrSchema& schema, std::size_t min_freq);

struct CtrRecordSet {
  std::size_t num_fields = 0;
  Index num_features = 0;
  std::vector<std::uint8_t> labels;
  std::vector<Index> features;  // row-major, one id per field

  std::size_t size() const { return labels.size(); }
  std::span<const Index> row(std::size_t i) const { return {features.data() + i * num_fields, num_fields}; }
};

CtrRecordSet encode_records(const std::vector<RawCtrRecord>& records, const CtrSchema& schema, const FeatureVocab& vocab);

/// Fields whose distinct-value count equals the record count (unique-per-row ids).
std::vector<std::size_t> id_like_fields(const std::vector<RawCtrRecord>& records);

struct SplitFractions {
  double train = 0.8;
  double valid = 0.1;
  double test = 0.1;
};

/// Seeded shuffle, then contiguous train/valid/test blocks of rounded sizes.
std::array<std::vector<std::size_t>, 3> random_split_indices(std::size_t n, SplitFractions f, std::uint64_t seed);

template <typename T>
std::array<std::vector<T>, 3> random_split(const std::vector<T>& records, SplitFractions f, std::uint64_t seed) {
  auto idx = random_split_indices(records.size(), f, seed);
  std::array<std::vector<T>, 3> out;
  for (std::size_t s = 0; s < 3; ++s) {
    out[s].reserve(idx[s].size());
    for (auto i : idx[s]) out[s].push_back(records[i]);
  }
  return out;
}

struct SyntheticCtrConfig {
  std::size_t records = 20000;
  std::vector<std::size_t> cardinalities{40, 120, 300, 25, 80, 500, 60, 10};
  std::size_t numeric_fields = 2;  // the first fields are numeric
  double zipf_exponent = 1.1;
  int latent_dim = 4;
  std::uint64_t seed = 7;
};

struct SyntheticCtr {
  CtrSchema schema;
  std::vector<RawCtrRecord> records;
};

/// Zipf-distributed categorical values and integer counts, labels from a
/// hidden factorization-machine logit.
SyntheticCtr generate_ctr(const SyntheticCtrConfig& cfg);

}  // namespace lers
