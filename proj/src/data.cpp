// Copyright 2026 The LERS Kit Authors
// SPDX-License-Identifier: Apache-2.0

#include "lers/data.hpp"

#include <algorithm>
#include <bit>
#include <charconv>
#include <cmath>
#include <fstream>
#include <numeric>
#include <set>
#include <sstream>
#include <unordered_map>
#include <unordered_set>

namespace lers {

namespace {

std::vector<std::string> split_tabs(const std::string& line) {
  std::vector<std::string> parts;
  std::size_t start = 0;
  while (true) {
    const auto pos = line.find('\t', start);
    parts.push_back(line.substr(start, pos == std::string::npos ? std::string::npos : pos - start));
    if (pos == std::string::npos) break;
    start = pos + 1;
  }
  if (!parts.empty() && !parts.back().empty() && parts.back().back() == '\r') parts.back().pop_back();
  return parts;
}

bool parse_int(const std::string& s, std::int64_t& out) {
  if (s.empty()) return false;
  const auto* end = s.data() + s.size();
  auto [ptr, ec] = std::from_chars(s.data(), end, out);
  return ec == std::errc() && ptr == end;
}

std::ifstream open_input(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot open " + path.string());
  return in;
}

std::ofstream open_output(const std::filesystem::path& path) {
  std::ofstream out(path);
  if (!out) throw DataError("cannot write " + path.string());
  return out;
}

}  // namespace

FieldLayout FieldLayout::from_sizes(const std::vector<Index>& sizes) {
  FieldLayout l;
  for (auto s : sizes) l.offsets.push_back(l.offsets.back() + s);
  return l;
}

std::size_t FieldLayout::field_of(Index id) const {
  if (id < 0 || id >= total()) throw std::out_of_range("field_of: id " + std::to_string(id) + " out of range");
  auto it = std::upper_bound(offsets.begin(), offsets.end(), id);
  return static_cast<std::size_t>(it - offsets.begin()) - 1;
}

// ---------------------------------------------------------------------------

std::vector<std::vector<Index>> InteractionSet::items_by_user() const {
  std::vector<std::vector<Index>> out(num_users);
  for (const auto& p : pairs) out[p.user].push_back(p.item);
  for (auto& v : out) std::sort(v.begin(), v.end());
  return out;
}

std::vector<Index> InteractionSet::item_popularity() const {
  std::vector<Index> pop(num_items, 0);
  for (const auto& p : pairs) ++pop[p.item];
  return pop;
}

void InteractionSet::validate() const {
  std::vector<Interaction> sorted = pairs;
  for (const auto& p : sorted) {
    if (p.user < 0 || p.user >= num_users || p.item < 0 || p.item >= num_items) {
      throw DataError("interaction (" + std::to_string(p.user) + "," + std::to_string(p.item) + ") out of range");
    }
  }
  std::sort(sorted.begin(), sorted.end());
  if (std::adjacent_find(sorted.begin(), sorted.end()) != sorted.end()) throw DataError("duplicate interaction in split");
}

InteractionSet load_interactions(const std::filesystem::path& path, Index num_users, Index num_items) {
  auto in = open_input(path);
  InteractionSet set;
  std::set<Interaction> seen;
  std::string line;
  std::size_t lineno = 0;
  Index max_u = -1, max_i = -1;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty() || line[0] == '#') continue;
    auto parts = split_tabs(line);
    std::int64_t u = 0, v = 0;
    if (parts.size() < 2 || !parse_int(parts[0], u) || !parse_int(parts[1], v) || u < 0 || v < 0) {
      throw DataError(path.string() + ":" + std::to_string(lineno) + ": expected `user<TAB>item` with non-negative ids");
    }
    if (!seen.insert({u, v}).second) continue;
    set.pairs.push_back({u, v});
    max_u = std::max(max_u, u);
    max_i = std::max(max_i, v);
  }
  if (set.pairs.empty()) throw DataError(path.string() + ": no interactions");
  set.num_users = std::max(num_users, max_u + 1);
  set.num_items = std::max(num_items, max_i + 1);
  return set;
}

void save_interactions(const InteractionSet& set, const std::filesystem::path& path) {
  auto out = open_output(path);
  out << "# users=" << set.num_users << " items=" << set.num_items << "\n";
  for (const auto& p : set.pairs) out << p.user << '\t' << p.item << '\n';
}

std::pair<InteractionSet, InteractionSet> split_per_user(const InteractionSet& all, double ratio, std::uint64_t seed) {
  if (!(ratio > 0 && ratio < 1)) throw std::invalid_argument("split_per_user: ratio must lie in (0,1)");
  InteractionSet first{all.num_users, all.num_items, {}, SplitTag::Train};
  InteractionSet second{all.num_users, all.num_items, {}, SplitTag::Valid};
  std::mt19937_64 rng(seed);
  auto by_user = all.items_by_user();
  for (Index u = 0; u < all.num_users; ++u) {
    auto items = by_user[u];
    std::shuffle(items.begin(), items.end(), rng);
    const auto count = static_cast<std::int64_t>(items.size());
    std::int64_t keep = count;
    if (count >= 2) keep = std::clamp<std::int64_t>(std::llround(ratio * static_cast<double>(count)), 1, count - 1);
    for (std::int64_t k = 0; k < count; ++k) (k < keep ? first : second).pairs.push_back({u, items[k]});
  }
  return {std::move(first), std::move(second)};
}

UserItemIndex::UserItemIndex(const InteractionSet& set) : by_user_(set.items_by_user()), num_items_(set.num_items) {}

bool UserItemIndex::contains(Index user, Index item) const {
  const auto& v = by_user_.at(user);
  return std::binary_search(v.begin(), v.end(), item);
}

std::vector<Index> sample_negatives(const UserItemIndex& train, Index user, std::size_t count, std::mt19937_64& rng) {
  std::vector<Index> out;
  if (count == 0) return out;
  if (static_cast<Index>(train.items(user).size()) >= train.num_items()) {
    throw DataError("sample_negatives: user " + std::to_string(user) + " has interacted with every item");
  }
  std::uniform_int_distribution<Index> pick(0, train.num_items() - 1);
  out.reserve(count);
  while (out.size() < count) {
    const Index v = pick(rng);
    if (!train.contains(user, v)) out.push_back(v);
  }
  return out;
}

InteractionSet generate_interactions(const SyntheticCfConfig& cfg) {
  std::mt19937_64 rng(cfg.seed);
  std::normal_distribution<double> normal(0, 1);
  const int k = cfg.latent_dim;
  std::vector<double> users(cfg.num_users * k), items(cfg.num_items * k);
  for (auto& v : users) v = normal(rng);
  for (auto& v : items) v = normal(rng);

  std::vector<Index> rank(cfg.num_items);
  std::iota(rank.begin(), rank.end(), 0);
  std::shuffle(rank.begin(), rank.end(), rng);
  std::vector<double> log_pop(cfg.num_items);
  for (Index i = 0; i < cfg.num_items; ++i) log_pop[i] = -cfg.popularity_exponent * std::log(1.0 + rank[i]);

  // Lognormal activity, rescaled to the requested total.
  std::vector<double> activity(cfg.num_users);
  for (auto& a : activity) a = std::exp(0.8 * normal(rng));
  const double total = std::accumulate(activity.begin(), activity.end(), 0.0);
  const double spare = static_cast<double>(cfg.interactions) - static_cast<double>(cfg.min_per_user * cfg.num_users);
  const auto cap = static_cast<std::size_t>(cfg.num_items / 2);

  InteractionSet set{cfg.num_users, cfg.num_items, {}, SplitTag::Train};
  std::uniform_real_distribution<double> unif(0, 1);
  const double scale = 1.0 / (std::sqrt(static_cast<double>(k)) * cfg.affinity_temperature);
  std::vector<std::pair<double, Index>> keys(cfg.num_items);
  for (Index u = 0; u < cfg.num_users; ++u) {
    auto want = cfg.min_per_user + static_cast<std::size_t>(std::max(0.0, spare) * activity[u] / total);
    want = std::min(want, cap);
    for (Index i = 0; i < cfg.num_items; ++i) {
      double dot = 0;
      for (int j = 0; j < k; ++j) dot += users[u * k + j] * items[i * k + j];
      const double log_w = log_pop[i] + scale * dot;
      // Efraimidis-Spirakis weighted sampling without replacement, log domain.
      keys[i] = {std::log(-std::log(unif(rng) + 1e-300)) - log_w, i};
    }
    std::partial_sort(keys.begin(), keys.begin() + static_cast<std::ptrdiff_t>(want), keys.end());
    for (std::size_t j = 0; j < want; ++j) set.pairs.push_back({u, keys[j].second});
  }
  return set;
}

// ---------------------------------------------------------------------------

CtrSchema load_schema(const std::filesystem::path& path) {
  auto in = open_input(path);
  std::map<std::int64_t, FieldKind> entries;
  std::string line;
  while (std::getline(in, line)) {
    if (line.empty() || line[0] == '#') continue;
    const auto colon = line.find(':');
    std::int64_t idx = 0;
    if (colon == std::string::npos || !parse_int(line.substr(0, colon), idx) || idx < 0) {
      throw DataError(path.string() + ": bad schema line `" + line + "`");
    }
    std::string kind = line.substr(colon + 1);
    while (!kind.empty() && std::isspace(static_cast<unsigned char>(kind.back()))) kind.pop_back();
    if (kind == "numeric") {
      entries[idx] = FieldKind::Numeric;
    } else if (kind == "categorical") {
      entries[idx] = FieldKind::Categorical;
    } else {
      throw DataError(path.string() + ": unknown field kind `" + kind + "`");
    }
  }
  CtrSchema schema;
  for (const auto& [idx, kind] : entries) {
    if (idx != static_cast<std::int64_t>(schema.fields.size())) throw DataError(path.string() + ": field indices must be 0..F-1");
    schema.fields.push_back(kind);
  }
  if (schema.fields.empty()) throw DataError(path.string() + ": empty schema");
  return schema;
}

void save_schema(const CtrSchema& schema, const std::filesystem::path& path) {
  auto out = open_output(path);
  for (std::size_t f = 0; f < schema.fields.size(); ++f) {
    out << f << ':' << (schema.fields[f] == FieldKind::Numeric ? "numeric" : "categorical") << '\n';
  }
}

std::vector<RawCtrRecord> load_ctr_records(const std::filesystem::path& path, const CtrSchema& schema) {
  auto in = open_input(path);
  std::vector<RawCtrRecord> records;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty() || line[0] == '#') continue;
    auto parts = split_tabs(line);
    std::int64_t label = 0;
    if (parts.size() != schema.fields.size() + 1 || !parse_int(parts[0], label) || (label != 0 && label != 1)) {
      throw DataError(path.string() + ":" + std::to_string(lineno) + ": expected label in {0,1} and " +
                      std::to_string(schema.fields.size()) + " fields");
    }
    records.push_back({static_cast<int>(label), {parts.begin() + 1, parts.end()}});
  }
  return records;
}

void save_ctr_records(const std::vector<RawCtrRecord>& records, const std::filesystem::path& path) {
  auto out = open_output(path);
  for (const auto& r : records) {
    out << r.label;
    for (const auto& v : r.values) out << '\t' << v;
    out << '\n';
  }
}

std::int64_t discretize_numeric(std::int64_t x) {
  if (x < 0) return kMissingToken;
  if (x <= 2) return x;
  return static_cast<std::int64_t>(std::bit_width(static_cast<std::uint64_t>(x - 1)));
}

std::string numeric_token(const std::string& raw) {
  std::int64_t x = 0;
  if (!parse_int(raw, x)) return "<missing>";
  const auto t = discretize_numeric(x);
  return t == kMissingToken ? "<missing>" : std::to_string(t);
}

Index FeatureVocab::lookup(std::size_t field, const std::string& token) const {
  const auto& m = ids.at(field);
  auto it = m.find(token);
  return it == m.end() ? oov_ids[field] : it->second;
}

namespace {
std::string token_for(const CtrSchema& schema, std::size_t f, const std::string& raw) {
  return schema.fields[f] == FieldKind::Numeric ? numeric_token(raw) : raw;
}
}  // namespace

FeatureVocab build_vocab(const std::vector<RawCtrRecord>& train, const CtrSchema& schema, std::size_t min_freq) {
  if (train.empty()) throw DataError("build_vocab: empty record set");
  if (min_freq < 1) throw std::invalid_argument("build_vocab: min_freq must be >= 1");
  const std::size_t F = schema.fields.size();
  std::vector<std::unordered_map<std::string, std::size_t>> counts(F);
  for (const auto& r : train) {
    if (r.values.size() != F) throw DataError("build_vocab: record width does not match schema");
    for (std::size_t f = 0; f < F; ++f) ++counts[f][token_for(schema, f, r.values[f])];
  }
  FeatureVocab vocab;
  vocab.ids.resize(F);
  std::vector<Index> sizes;
  for (std::size_t f = 0; f < F; ++f) {
    std::vector<std::pair<std::string, std::size_t>> kept;
    std::size_t oov_count = 0;
    for (const auto& [tok, c] : counts[f]) {
      if (c >= min_freq) {
        kept.emplace_back(tok, c);
      } else {
        oov_count += c;
      }
    }
    std::sort(kept.begin(), kept.end(), [](const auto& a, const auto& b) {
      return a.second != b.second ? a.second > b.second : a.first < b.first;
    });
    const Index base = vocab.layout.total();
    for (std::size_t k = 0; k < kept.size(); ++k) {
      vocab.ids[f][kept[k].first] = base + static_cast<Index>(k);
      vocab.frequencies.push_back(kept[k].second);
    }
    vocab.oov_ids.push_back(base + static_cast<Index>(kept.size()));
    vocab.frequencies.push_back(oov_count);
    vocab.layout.offsets.push_back(base + static_cast<Index>(kept.size()) + 1);
  }
  return vocab;
}

CtrRecordSet encode_records(const std::vector<RawCtrRecord>& records, const CtrSchema& schema, const FeatureVocab& vocab) {
  const std::size_t F = schema.fields.size();
  CtrRecordSet out;
  out.num_fields = F;
  out.num_features = vocab.size();
  out.labels.reserve(records.size());
  out.features.reserve(records.size() * F);
  for (const auto& r : records) {
    if (r.values.size() != F) throw DataError("encode_records: record width does not match schema");
    out.labels.push_back(static_cast<std::uint8_t>(r.label));
    for (std::size_t f = 0; f < F; ++f) out.features.push_back(vocab.lookup(f, token_for(schema, f, r.values[f])));
  }
  return out;
}

std::vector<std::size_t> id_like_fields(const std::vector<RawCtrRecord>& records) {
  std::vector<std::size_t> out;
  if (records.size() < 2) return out;
  const std::size_t F = records.front().values.size();
  for (std::size_t f = 0; f < F; ++f) {
    std::unordered_set<std::string> distinct;
    for (const auto& r : records) distinct.insert(r.values[f]);
    if (distinct.size() == records.size()) out.push_back(f);
  }
  return out;
}

std::array<std::vector<std::size_t>, 3> random_split_indices(std::size_t n, SplitFractions f, std::uint64_t seed) {
  if (f.train < 0 || f.valid < 0 || f.test < 0 || std::abs(f.train + f.valid + f.test - 1) > 1e-9) {
    throw std::invalid_argument("random_split: fractions must be non-negative and sum to 1");
  }
  std::vector<std::size_t> idx(n);
  std::iota(idx.begin(), idx.end(), 0);
  std::mt19937_64 rng(seed);
  std::shuffle(idx.begin(), idx.end(), rng);
  const auto n_train = std::min<std::size_t>(n, static_cast<std::size_t>(std::llround(f.train * static_cast<double>(n))));
  const auto n_valid = std::min<std::size_t>(n - n_train, static_cast<std::size_t>(std::llround(f.valid * static_cast<double>(n))));
  std::array<std::vector<std::size_t>, 3> out;
  out[0].assign(idx.begin(), idx.begin() + static_cast<std::ptrdiff_t>(n_train));
  out[1].assign(idx.begin() + static_cast<std::ptrdiff_t>(n_train), idx.begin() + static_cast<std::ptrdiff_t>(n_train + n_valid));
  out[2].assign(idx.begin() + static_cast<std::ptrdiff_t>(n_train + n_valid), idx.end());
  return out;
}

SyntheticCtr generate_ctr(const SyntheticCtrConfig& cfg) {
  std::mt19937_64 rng(cfg.seed);
  std::normal_distribution<double> normal(0, 1);
  std::uniform_real_distribution<double> unif(0, 1);
  const std::size_t F = cfg.cardinalities.size();
  SyntheticCtr out;
  for (std::size_t f = 0; f < F; ++f) out.schema.fields.push_back(f < cfg.numeric_fields ? FieldKind::Numeric : FieldKind::Categorical);

  // Zipf samplers per field.
  std::vector<std::discrete_distribution<std::size_t>> zipf;
  for (auto card : cfg.cardinalities) {
    std::vector<double> w(card);
    for (std::size_t v = 0; v < card; ++v) w[v] = std::pow(1.0 + static_cast<double>(v), -cfg.zipf_exponent);
    zipf.emplace_back(w.begin(), w.end());
  }
  // Hidden FM over the (field, value) pairs; numeric fields key on their bucket.
  const int k = cfg.latent_dim;
  std::vector<std::vector<double>> bias(F), emb(F);
  for (std::size_t f = 0; f < F; ++f) {
    bias[f].resize(cfg.cardinalities[f]);
    emb[f].resize(cfg.cardinalities[f] * k);
    for (auto& b : bias[f]) b = 0.4 * normal(rng);
    for (auto& e : emb[f]) e = 0.7 * normal(rng);
  }
  out.records.reserve(cfg.records);
  std::vector<std::size_t> slot(F);
  for (std::size_t r = 0; r < cfg.records; ++r) {
    RawCtrRecord rec;
    for (std::size_t f = 0; f < F; ++f) {
      const std::size_t v = zipf[f](rng);
      if (f < cfg.numeric_fields) {
        if (unif(rng) < 0.03) {
          rec.values.emplace_back("");
          slot[f] = 0;
          continue;
        }
        // counts spread over several power-of-two buckets
        const auto count = static_cast<std::int64_t>(std::floor(std::exp2(static_cast<double>(v % 12) + unif(rng))));
        rec.values.push_back(std::to_string(count));
        slot[f] = static_cast<std::size_t>(std::max<std::int64_t>(0, discretize_numeric(count))) % cfg.cardinalities[f];
      } else {
        rec.values.push_back("f" + std::to_string(f) + "_" + std::to_string(v));
        slot[f] = v;
      }
    }
    double logit = -0.8;
    std::vector<double> acc(k, 0.0), sq(k, 0.0);
    for (std::size_t f = 0; f < F; ++f) {
      logit += bias[f][slot[f]];
      for (int j = 0; j < k; ++j) {
        const double e = emb[f][slot[f] * k + j];
        acc[j] += e;
        sq[j] += e * e;
      }
    }
    for (int j = 0; j < k; ++j) logit += 0.5 * (acc[j] * acc[j] - sq[j]) / F;
    rec.label = unif(rng) < 1.0 / (1.0 + std::exp(-logit)) ? 1 : 0;
    out.records.push_back(std::move(rec));
  }
  return out;
}

}  // namespace lers
