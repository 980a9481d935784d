// Copyright 2026 The LERS Kit Authors
// SPDX-License-Identifier: Apache-2.0

#include "lers/backbones.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <sstream>
#include <stdexcept>

namespace lers {
namespace {

Tensor uniform(std::size_t rows, std::size_t cols, Real bound, std::mt19937_64& rng) {
  std::uniform_real_distribution<Real> u(-bound, bound);
  Tensor t({rows, cols}, 0);
  for (auto& v : t.span()) v = u(rng);
  return t;
}

// Glorot uniform.
Tensor glorot(std::size_t fan_in, std::size_t fan_out, std::mt19937_64& rng) {
  return uniform(fan_in, fan_out, std::sqrt(6.0 / static_cast<Real>(fan_in + fan_out)), rng);
}

std::string join_sizes(const std::vector<std::size_t>& v) {
  std::string out;
  for (std::size_t i = 0; i < v.size(); ++i) out += (i ? "," : "") + std::to_string(v[i]);
  return out;
}

std::vector<std::size_t> split_sizes(const std::string& text) {
  std::vector<std::size_t> out;
  std::stringstream ss(text);
  for (std::string part; std::getline(ss, part, ',');) {
    if (!part.empty()) out.push_back(static_cast<std::size_t>(std::stoull(part)));
  }
  return out;
}

std::vector<Index> shifted(std::span<const Index> items, Index offset) {
  std::vector<Index> out(items.begin(), items.end());
  for (auto& v : out) v += offset;
  return out;
}

std::vector<Index> repeat_each(std::span<const Index> ids, std::size_t times) {
  std::vector<Index> out;
  out.reserve(ids.size() * times);
  for (Index id : ids) out.insert(out.end(), times, id);
  return out;
}

ad::Var zero_scalar() { return ad::constant(Tensor::scalar(0)); }

void save_layout(Checkpoint& ck, const std::string& prefix, const FieldLayout& layout) {
  ck.put_ints(prefix + ".layout", std::vector<std::int64_t>(layout.offsets.begin(), layout.offsets.end()));
}

FieldLayout load_layout(const Checkpoint& ck, const std::string& prefix) {
  const auto& offsets = ck.ints(prefix + ".layout");
  FieldLayout layout;
  layout.offsets.assign(offsets.begin(), offsets.end());
  return layout;
}

std::unique_ptr<EmbeddingLayer> load_table(const Checkpoint& ck, const std::string& prefix, std::size_t k) {
  return load_layer(ck, prefix + ".emb" + std::to_string(k));
}

}  // namespace

// ---------------------------------------------------------------------------

Mlp::Mlp(std::size_t in, const std::vector<std::size_t>& hidden, std::size_t out, std::mt19937_64& rng) {
  std::size_t prev = in;
  for (std::size_t width : hidden) {
    weights.push_back(ad::parameter(glorot(prev, width, rng)));
    biases.push_back(ad::parameter(Tensor({1, width}, 0)));
    prev = width;
  }
  weights.push_back(ad::parameter(glorot(prev, out, rng)));
  biases.push_back(ad::parameter(Tensor({1, out}, 0)));
}

ad::Var Mlp::forward(const ad::Var& x, Real dropout, std::mt19937_64& rng, bool training) const {
  ad::Var h = x;
  for (std::size_t i = 0; i < weights.size(); ++i) {
    h = ad::add(ad::matmul(h, weights[i]), biases[i]);
    if (i + 1 < weights.size()) h = ad::dropout(ad::relu(h), dropout, rng, training);
  }
  return h;
}

std::vector<Parameter> Mlp::parameters(const std::string& prefix) const {
  std::vector<Parameter> out;
  for (std::size_t i = 0; i < weights.size(); ++i) {
    out.push_back({prefix + ".w" + std::to_string(i), weights[i]});
    out.push_back({prefix + ".b" + std::to_string(i), biases[i]});
  }
  return out;
}

std::size_t Mlp::in_dim() const { return weights.empty() ? 0 : weights.front().value().rows(); }
std::size_t Mlp::out_dim() const { return weights.empty() ? 0 : weights.back().value().cols(); }

// ---------------------------------------------------------------------------

std::string_view backbone_name(BackboneKind kind) {
  switch (kind) {
    case BackboneKind::NeuMf: return "neumf";
    case BackboneKind::LightGcn: return "lightgcn";
    case BackboneKind::DeepFm: return "deepfm";
    case BackboneKind::DcnMix: return "dcnmix";
  }
  return "?";
}

BackboneKind parse_backbone(std::string_view name) {
  for (auto k : {BackboneKind::NeuMf, BackboneKind::LightGcn, BackboneKind::DeepFm, BackboneKind::DcnMix}) {
    if (backbone_name(k) == name) return k;
  }
  throw std::invalid_argument("unknown backbone '" + std::string(name) + "' (neumf, lightgcn, deepfm, dcnmix)");
}

bool is_cf(BackboneKind kind) { return kind == BackboneKind::NeuMf || kind == BackboneKind::LightGcn; }

void Backbone::set_embedding(std::size_t k, std::unique_ptr<EmbeddingLayer> layer) {
  if (!layer) throw std::invalid_argument("set_embedding: null layer");
  const auto& old = embeddings_.at(k)->spec();
  if (layer->n() != old.n || layer->d() != old.d) {
    throw std::invalid_argument("set_embedding: replacement has a different shape");
  }
  embeddings_[k] = std::move(layer);
}

std::vector<Parameter> Backbone::parameters() const {
  std::vector<Parameter> out;
  for (std::size_t k = 0; k < embeddings_.size(); ++k) {
    for (auto p : embeddings_[k]->parameters()) {
      p.name = "emb" + std::to_string(k) + "." + p.name;
      out.push_back(std::move(p));
    }
  }
  for (auto& p : dense_parameters()) out.push_back(std::move(p));
  return out;
}

std::vector<std::size_t> Backbone::embedding_param_indices() const {
  std::vector<std::size_t> out;
  std::size_t at = 0;
  for (const auto& e : embeddings_) {
    out.push_back(at);
    at += e->parameters().size();
  }
  return out;
}

ad::Var Backbone::l2_penalty() const {
  ad::Var total = zero_scalar();
  for (const auto& e : embeddings_) total = ad::add(total, e->l2_penalty());
  for (const auto& p : dense_parameters()) total = ad::add(total, ad::sum(ad::square(p.var)));
  return total;
}

std::int64_t Backbone::embedding_params() const {
  std::int64_t total = 0;
  for (const auto& e : embeddings_) total += e->param_count();
  return total;
}

std::int64_t Backbone::full_embedding_params() const {
  std::int64_t total = 0;
  for (const auto& e : embeddings_) total += e->spec().full_params();
  return total;
}

void Backbone::save(Checkpoint& ck, const std::string& prefix) const {
  ck.set(prefix + ".backbone", std::string(backbone_name(kind())));
  ck.set(prefix + ".tables", static_cast<std::int64_t>(embeddings_.size()));
  for (std::size_t k = 0; k < embeddings_.size(); ++k) embeddings_[k]->save(ck, prefix + ".emb" + std::to_string(k));
  save_dense(ck, prefix);
}

void Backbone::save_dense(Checkpoint& ck, const std::string& prefix) const {
  for (const auto& p : dense_parameters()) ck.put_tensor(prefix + ".dense." + p.name, p.var.value());
}

void Backbone::load_dense(const Checkpoint& ck, const std::string& prefix) {
  for (auto& p : dense_parameters()) {
    Tensor t = ck.tensor(prefix + ".dense." + p.name);
    if (t.shape() != p.var.shape()) {
      throw CheckpointError("backbone parameter '" + p.name + "' has shape " + shape_string(t.shape()) +
                            ", expected " + shape_string(p.var.shape()));
    }
    p.var.mutable_value() = std::move(t);
  }
}

// ---------------------------------------------------------------------------

std::vector<CfBatch> make_cf_batches(const InteractionSet& train, const UserItemIndex& index, std::size_t batch_size,
                                     std::size_t negatives_per_user, std::mt19937_64& rng) {
  if (batch_size == 0) throw std::invalid_argument("make_cf_batches: batch_size must be positive");
  if (negatives_per_user == 0) throw std::invalid_argument("make_cf_batches: need at least one negative");
  std::vector<std::size_t> order(train.pairs.size());
  std::iota(order.begin(), order.end(), 0);
  std::shuffle(order.begin(), order.end(), rng);
  std::vector<CfBatch> out;
  for (std::size_t begin = 0; begin < order.size(); begin += batch_size) {
    CfBatch b;
    b.negatives_per_user = negatives_per_user;
    const std::size_t end = std::min(order.size(), begin + batch_size);
    for (std::size_t i = begin; i < end; ++i) {
      const auto& p = train.pairs[order[i]];
      b.users.push_back(p.user);
      b.positives.push_back(p.item);
      const auto negs = sample_negatives(index, p.user, negatives_per_user, rng);
      b.negatives.insert(b.negatives.end(), negs.begin(), negs.end());
    }
    out.push_back(std::move(b));
  }
  return out;
}

// ---------------------------------------------------------------------------

NeuMf::NeuMf(const NeuMfConfig& cfg, std::unique_ptr<EmbeddingLayer> gmf, std::unique_ptr<EmbeddingLayer> dnn,
             std::mt19937_64& rng)
    : CfBackbone(cfg.users, cfg.items), cfg_(cfg) {
  if (!gmf || !dnn) throw std::invalid_argument("NeuMf: both embedding layers are required");
  for (const auto* e : {gmf.get(), dnn.get()}) {
    if (e->n() != cfg.users + cfg.items || e->d() != cfg.d) {
      throw std::invalid_argument("NeuMf: embedding layers must be [users + items, d]");
    }
  }
  embeddings_.push_back(std::move(gmf));
  embeddings_.push_back(std::move(dnn));
  // h = 1 starts the GMF branch as a plain inner product.
  h_ = ad::parameter(Tensor({static_cast<std::size_t>(cfg.d), 1}, 1));
  tower_ = Mlp(2 * static_cast<std::size_t>(cfg.d), cfg.mlp, 1, rng);
}

ad::Var NeuMf::logits(std::span<const Index> users, std::span<const Index> items, std::mt19937_64& rng,
                      bool training) const {
  if (users.size() != items.size()) throw std::invalid_argument("NeuMf: users and items differ in length");
  for (Index v : items) {
    if (v < 0 || v >= items_) throw std::out_of_range("NeuMf: item " + std::to_string(v) + " out of range");
  }
  for (Index u : users) {
    if (u < 0 || u >= users_) throw std::out_of_range("NeuMf: user " + std::to_string(u) + " out of range");
  }
  const auto item_ids = shifted(items, users_);
  const ad::Var gmf_term = ad::matmul(ad::mul(gmf().forward(users), gmf().forward(item_ids)), h_);
  const ad::Var x = ad::concat_cols({dnn().forward(users), dnn().forward(item_ids)});
  return ad::add(gmf_term, tower_.forward(x, cfg_.dropout, rng, training));
}

ad::Var NeuMf::score(std::span<const Index> users, std::span<const Index> items, std::mt19937_64& rng,
                     bool training) const {
  return ad::sigmoid(logits(users, items, rng, training));
}

ad::Var NeuMf::task_loss(const CfBatch& batch, std::mt19937_64& rng) {
  const ad::Var pos = score(batch.users, batch.positives, rng, true);
  const ad::Var neg = score(repeat_each(batch.users, batch.negatives_per_user), batch.negatives, rng, true);
  return neumf_loss(pos, neg, batch.negatives_per_user);
}

UserScorer NeuMf::make_scorer() const {
  // Split the first tower layer into user and item halves so the item half
  // is computed once per pass.
  const std::size_t d = static_cast<std::size_t>(cfg_.d);
  std::vector<Index> all(static_cast<std::size_t>(items_));
  std::iota(all.begin(), all.end(), users_);
  const Tensor& w1 = tower_.weights[0].value();
  const std::size_t m1 = w1.cols();
  Tensor w_user({d, m1}, 0), w_item({d, m1}, 0);
  std::copy_n(w1.data(), d * m1, w_user.data());
  std::copy_n(w1.data() + d * m1, d * m1, w_item.data());

  const Tensor gi = gmf().lookup_rows(all);
  ad::Var item_pre = ad::add(ad::matmul(ad::constant(dnn().lookup_rows(all)), ad::constant(w_item)),
                             ad::constant(tower_.biases[0].value()));
  auto state = std::make_shared<std::tuple<Tensor, Tensor, Tensor>>(gi, item_pre.value(), w_user);
  return [this, state](Index u, std::vector<Real>& scores) {
    const auto& [g_items, pre_items, w_u] = *state;
    const std::size_t dd = static_cast<std::size_t>(cfg_.d);
    const Tensor gu = gmf().lookup(u);
    const Tensor& h = h_.value();
    Tensor gh({1, dd}, 0);
    for (std::size_t j = 0; j < dd; ++j) gh[j] = gu[j] * h[j];
    const ad::Var user_pre = ad::matmul(ad::constant(dnn().lookup(u)), ad::constant(w_u));
    ad::Var x = ad::relu(ad::add(ad::constant(pre_items), user_pre));
    for (std::size_t i = 1; i < tower_.weights.size(); ++i) {
      x = ad::add(ad::matmul(x, ad::constant(tower_.weights[i].value())), ad::constant(tower_.biases[i].value()));
      if (i + 1 < tower_.weights.size()) x = ad::relu(x);
    }
    const Tensor& dnn_out = x.value();
    scores.assign(g_items.rows(), 0);
    for (std::size_t v = 0; v < g_items.rows(); ++v) {
      Real acc = 0;
      for (std::size_t j = 0; j < dd; ++j) acc += g_items.at(v, j) * gh[j];
      scores[v] = acc + dnn_out[v];
    }
  };
}

std::vector<Parameter> NeuMf::dense_parameters() const {
  std::vector<Parameter> out{{"h", h_}};
  for (auto& p : tower_.parameters("mlp")) out.push_back(std::move(p));
  return out;
}

void NeuMf::save(Checkpoint& ck, const std::string& prefix) const {
  Backbone::save(ck, prefix);
  ck.set(prefix + ".users", users_);
  ck.set(prefix + ".items", items_);
  ck.set(prefix + ".d", cfg_.d);
  ck.set(prefix + ".mlp", join_sizes(cfg_.mlp));
  ck.set_real(prefix + ".dropout", cfg_.dropout);
}

std::unique_ptr<NeuMf> NeuMf::load(const Checkpoint& ck, const std::string& prefix) {
  NeuMfConfig cfg;
  cfg.users = ck.get_int(prefix + ".users");
  cfg.items = ck.get_int(prefix + ".items");
  cfg.d = ck.get_int(prefix + ".d");
  cfg.mlp = split_sizes(ck.get(prefix + ".mlp"));
  cfg.dropout = ck.get_real(prefix + ".dropout");
  std::mt19937_64 rng(0);
  auto model = std::make_unique<NeuMf>(cfg, load_table(ck, prefix, 0), load_table(ck, prefix, 1), rng);
  model->load_dense(ck, prefix);
  return model;
}

ad::Var neumf_loss(const ad::Var& pos, const ad::Var& neg, std::size_t negatives_per_user, Real eps) {
  const std::size_t b = pos.value().rows();
  if (negatives_per_user == 0 || neg.value().rows() != b * negatives_per_user) {
    throw std::invalid_argument("neumf_loss: expected " + std::to_string(negatives_per_user) + " negatives per sample");
  }
  const ad::Var log_pos = ad::sum(ad::log(ad::clamp(pos, eps, 1 - eps)));
  const ad::Var log_neg = ad::sum(ad::log(ad::clamp(ad::add_scalar(ad::neg(neg), 1), eps, 1 - eps)));
  return ad::scale(ad::add(log_pos, log_neg), -1 / static_cast<Real>(b));
}

// ---------------------------------------------------------------------------

void LightGcnConfig::validate() const {
  if (users < 1 || items < 1) throw std::invalid_argument("LightGcn: need at least one user and one item");
  if (layers < 0) throw std::invalid_argument("LightGcn: layer count must be non-negative");
  if (!(tau > 0)) throw std::invalid_argument("LightGcn: tau must be positive");
  if (gamma < 0) throw std::invalid_argument("LightGcn: gamma must be non-negative");
}

SparseMatrix normalized_adjacency(const InteractionSet& train) {
  std::vector<Interaction> pairs = train.pairs;
  std::sort(pairs.begin(), pairs.end());
  pairs.erase(std::unique(pairs.begin(), pairs.end()), pairs.end());
  const Index users = train.num_users, items = train.num_items;
  std::vector<Real> deg(static_cast<std::size_t>(users + items), 0);
  for (const auto& p : pairs) {
    if (p.user < 0 || p.user >= users || p.item < 0 || p.item >= items) {
      throw DataError("normalized_adjacency: interaction out of range");
    }
    deg[p.user] += 1;
    deg[users + p.item] += 1;
  }
  std::vector<std::tuple<std::int64_t, std::int64_t, Real>> triplets;
  triplets.reserve(2 * pairs.size());
  for (const auto& p : pairs) {
    const Index v = users + p.item;
    const Real w = 1 / std::sqrt(deg[p.user] * deg[v]);
    triplets.emplace_back(p.user, v, w);
    triplets.emplace_back(v, p.user, w);
  }
  const auto n = static_cast<std::size_t>(users + items);
  return SparseMatrix::from_triplets(n, n, std::move(triplets));
}

ad::Var lightgcn_propagate(const SparseMatrix& adjacency, const ad::Var& e0, int layers) {
  if (layers < 0) throw std::invalid_argument("lightgcn_propagate: negative layer count");
  if (adjacency.cols != e0.value().rows()) throw ShapeError("lightgcn_propagate: adjacency and E0 disagree");
  ad::Var layer = e0, total = e0;
  for (int l = 0; l < layers; ++l) {
    layer = ad::spmm(adjacency, layer);
    total = ad::add(total, layer);
  }
  return layers == 0 ? total : ad::scale(total, 1 / static_cast<Real>(layers + 1));
}

Tensor lightgcn_propagate(const SparseMatrix& adjacency, const Tensor& e0, int layers) {
  return lightgcn_propagate(adjacency, ad::constant(e0), layers).value();
}

ad::Var bpr_loss(const ad::Var& pos, const ad::Var& neg, std::size_t negatives_per_user) {
  const std::size_t b = pos.value().rows();
  if (negatives_per_user == 0 || neg.value().rows() != b * negatives_per_user) {
    throw std::invalid_argument("bpr_loss: expected " + std::to_string(negatives_per_user) + " negatives per sample");
  }
  std::vector<Index> rep(b * negatives_per_user);
  for (std::size_t i = 0; i < rep.size(); ++i) rep[i] = static_cast<Index>(i / negatives_per_user);
  // -ln σ(x) = softplus(-x)
  return ad::mean(ad::softplus(ad::sub(neg, ad::gather_rows(pos, rep))));
}

ad::Var info_nce(const ad::Var& nodes, Real tau) {
  if (!(tau > 0)) throw std::invalid_argument("info_nce: tau must be positive");
  const ad::Var z = ad::l2_normalize_rows(nodes);
  const ad::Var sim = ad::scale(ad::matmul(z, ad::transpose(z)), 1 / tau);
  const ad::Var self = ad::scale(ad::dot_rows(z, z), 1 / tau);
  return ad::mean(ad::sub(ad::logsumexp_rows(sim), self));
}

LightGcn::LightGcn(const LightGcnConfig& cfg, std::unique_ptr<EmbeddingLayer> table, SparseMatrix adjacency)
    : CfBackbone(cfg.users, cfg.items), cfg_(cfg), adjacency_(std::move(adjacency)) {
  cfg.validate();
  if (!table || table->n() != cfg.users + cfg.items || table->d() != cfg.d) {
    throw std::invalid_argument("LightGcn: embedding layer must be [users + items, d]");
  }
  const auto n = static_cast<std::size_t>(cfg.users + cfg.items);
  if (adjacency_.rows != n || adjacency_.cols != n) throw ShapeError("LightGcn: adjacency must be square over all nodes");
  embeddings_.push_back(std::move(table));
}

LightGcn::LightGcn(const LightGcnConfig& cfg, std::unique_ptr<EmbeddingLayer> table, const InteractionSet& train)
    : LightGcn(cfg, std::move(table), normalized_adjacency(train)) {
  if (train.num_users != cfg.users || train.num_items != cfg.items) {
    throw std::invalid_argument("LightGcn: train set dimensions differ from the config");
  }
}

ad::Var LightGcn::finals() const {
  std::vector<Index> all(static_cast<std::size_t>(users_ + items_));
  std::iota(all.begin(), all.end(), 0);
  return lightgcn_propagate(adjacency_, embeddings_[0]->forward(all), cfg_.layers);
}

ad::Var LightGcn::task_loss(const CfBatch& batch, std::mt19937_64&) {
  const ad::Var f = finals();
  const auto pos_ids = shifted(batch.positives, users_);
  const auto neg_ids = shifted(batch.negatives, users_);
  const ad::Var pos = ad::dot_rows(ad::gather_rows(f, batch.users), ad::gather_rows(f, pos_ids));
  const ad::Var neg = ad::dot_rows(ad::gather_rows(f, repeat_each(batch.users, batch.negatives_per_user)),
                                   ad::gather_rows(f, neg_ids));
  ad::Var loss = bpr_loss(pos, neg, batch.negatives_per_user);
  if (cfg_.gamma > 0) {
    std::vector<Index> nodes(batch.users);
    nodes.insert(nodes.end(), pos_ids.begin(), pos_ids.end());
    nodes.insert(nodes.end(), neg_ids.begin(), neg_ids.end());
    std::sort(nodes.begin(), nodes.end());
    nodes.erase(std::unique(nodes.begin(), nodes.end()), nodes.end());
    loss = ad::add(loss, ad::scale(info_nce(ad::gather_rows(f, nodes), cfg_.tau), cfg_.gamma));
  }
  return loss;
}

UserScorer LightGcn::make_scorer() const {
  auto f = std::make_shared<Tensor>(lightgcn_propagate(adjacency_, embeddings_[0]->materialize(), cfg_.layers));
  const Index users = users_, items = items_;
  return [f, users, items](Index u, std::vector<Real>& scores) {
    const std::size_t d = f->cols();
    const Real* eu = f->data() + u * d;
    scores.assign(static_cast<std::size_t>(items), 0);
    for (Index v = 0; v < items; ++v) {
      const Real* ev = f->data() + (users + v) * d;
      Real acc = 0;
      for (std::size_t j = 0; j < d; ++j) acc += eu[j] * ev[j];
      scores[v] = acc;
    }
  };
}

void LightGcn::save(Checkpoint& ck, const std::string& prefix) const {
  Backbone::save(ck, prefix);
  ck.set(prefix + ".users", users_);
  ck.set(prefix + ".items", items_);
  ck.set(prefix + ".d", cfg_.d);
  ck.set(prefix + ".layers", cfg_.layers);
  ck.set_real(prefix + ".gamma", cfg_.gamma);
  ck.set_real(prefix + ".tau", cfg_.tau);
  ck.put_ints(prefix + ".adj.row_ptr", adjacency_.row_ptr);
  ck.put_ints(prefix + ".adj.col_idx", adjacency_.col_idx);
  ck.put_tensor(prefix + ".adj.values", Tensor({adjacency_.values.size()}, adjacency_.values));
}

std::unique_ptr<LightGcn> LightGcn::load(const Checkpoint& ck, const std::string& prefix) {
  LightGcnConfig cfg;
  cfg.users = ck.get_int(prefix + ".users");
  cfg.items = ck.get_int(prefix + ".items");
  cfg.d = ck.get_int(prefix + ".d");
  cfg.layers = static_cast<int>(ck.get_int(prefix + ".layers"));
  cfg.gamma = ck.get_real(prefix + ".gamma");
  cfg.tau = ck.get_real(prefix + ".tau");
  SparseMatrix adj;
  adj.rows = adj.cols = static_cast<std::size_t>(cfg.users + cfg.items);
  adj.row_ptr = ck.ints(prefix + ".adj.row_ptr");
  adj.col_idx = ck.ints(prefix + ".adj.col_idx");
  const Tensor values = ck.tensor(prefix + ".adj.values");
  adj.values.assign(values.span().begin(), values.span().end());
  if (adj.row_ptr.size() != adj.rows + 1 || adj.row_ptr.back() != static_cast<std::int64_t>(adj.col_idx.size()) ||
      adj.values.size() != adj.col_idx.size()) {
    throw CheckpointError("LightGcn adjacency in '" + prefix + "' is malformed");
  }
  for (auto c : adj.col_idx) {
    if (c < 0 || static_cast<std::size_t>(c) >= adj.cols) throw CheckpointError("LightGcn adjacency column out of range");
  }
  return std::make_unique<LightGcn>(cfg, load_table(ck, prefix, 0), std::move(adj));
}

// ---------------------------------------------------------------------------

std::vector<CtrBatch> make_ctr_batches(const CtrRecordSet& records, std::size_t batch_size, std::mt19937_64* rng) {
  if (batch_size == 0) throw std::invalid_argument("make_ctr_batches: batch_size must be positive");
  std::vector<std::size_t> order(records.size());
  std::iota(order.begin(), order.end(), 0);
  if (rng) std::shuffle(order.begin(), order.end(), *rng);
  std::vector<CtrBatch> out;
  for (std::size_t begin = 0; begin < order.size(); begin += batch_size) {
    CtrBatch b;
    b.fields = records.num_fields;
    const std::size_t end = std::min(order.size(), begin + batch_size);
    for (std::size_t i = begin; i < end; ++i) {
      const auto row = records.row(order[i]);
      b.features.insert(b.features.end(), row.begin(), row.end());
      b.labels.push_back(records.labels[order[i]]);
    }
    out.push_back(std::move(b));
  }
  return out;
}

ad::Var ctr_loss(const ad::Var& probs, std::span<const std::uint8_t> labels, Real eps) {
  const std::size_t b = labels.size();
  if (probs.value().rows() != b || probs.value().cols() != 1) throw ShapeError("ctr_loss: expected [batch, 1] probabilities");
  Tensor y({b, 1}, 0), not_y({b, 1}, 0);
  for (std::size_t i = 0; i < b; ++i) {
    y[i] = labels[i] ? 1 : 0;
    not_y[i] = 1 - y[i];
  }
  const ad::Var p = ad::clamp(probs, eps, 1 - eps);
  const ad::Var ll = ad::add(ad::mul(ad::log(p), ad::constant(std::move(y))),
                             ad::mul(ad::log(ad::add_scalar(ad::neg(p), 1)), ad::constant(std::move(not_y))));
  return ad::neg(ad::mean(ll));
}

ad::Var fm_interaction(const ad::Var& pooled, std::size_t fields) {
  const std::size_t width = pooled.value().cols();
  if (fields == 0 || width % fields != 0) throw ShapeError("fm_interaction: width is not a multiple of the field count");
  const std::size_t d = width / fields;
  ad::Var sum = ad::slice_cols(pooled, 0, d);
  ad::Var squares = ad::square(sum);
  for (std::size_t f = 1; f < fields; ++f) {
    const ad::Var e = ad::slice_cols(pooled, f * d, (f + 1) * d);
    sum = ad::add(sum, e);
    squares = ad::add(squares, ad::square(e));
  }
  return ad::scale(ad::sum_rows(ad::sub(ad::square(sum), squares)), 0.5);
}

void CtrBackbone::check_batch(const CtrBatch& batch) const {
  if (batch.fields != layout_.num_fields() || batch.features.size() != batch.fields * batch.size()) {
    throw std::invalid_argument("CTR batch does not match the model's " + std::to_string(layout_.num_fields()) +
                                " fields");
  }
}

ad::Var CtrBackbone::pooled(const CtrBatch& batch) const {
  check_batch(batch);
  const std::size_t d = static_cast<std::size_t>(table().d());
  return ad::reshape(table().forward(batch.features), batch.size(), batch.fields * d);
}

ad::Var CtrBackbone::task_loss(const CtrBatch& batch, std::mt19937_64& rng) {
  return ctr_loss(ad::sigmoid(logits(batch, rng, true)), batch.labels);
}

std::vector<double> CtrBackbone::predict(const CtrRecordSet& records, std::size_t batch_size) const {
  std::vector<double> out;
  out.reserve(records.size());
  std::mt19937_64 unused(0);
  for (const auto& batch : make_ctr_batches(records, batch_size, nullptr)) {
    const Tensor p = ad::sigmoid(logits(batch, unused, false)).value();
    out.insert(out.end(), p.span().begin(), p.span().end());
  }
  return out;
}

// ---------------------------------------------------------------------------

DeepFm::DeepFm(const DeepFmConfig& cfg, FieldLayout layout, std::unique_ptr<EmbeddingLayer> table,
               std::mt19937_64& rng)
    : CtrBackbone(std::move(layout)), cfg_(cfg) {
  if (!table || table->n() != layout_.total() || table->d() != cfg.d) {
    throw std::invalid_argument("DeepFm: embedding layer must be [features, d]");
  }
  embeddings_.push_back(std::move(table));
  w0_ = ad::parameter(Tensor::scalar(0));
  linear_ = ad::parameter(Tensor({static_cast<std::size_t>(layout_.total()), 1}, 0));
  tower_ = Mlp(layout_.num_fields() * static_cast<std::size_t>(cfg.d), cfg.mlp, 1, rng);
}

namespace {

ad::Var fm_from_pooled(const ad::Var& pooled, const CtrBatch& batch, const ad::Var& linear, const ad::Var& w0) {
  const ad::Var first = ad::sum_rows(ad::reshape(ad::gather_rows(linear, batch.features), batch.size(), batch.fields));
  return ad::add(ad::add(first, w0), fm_interaction(pooled, batch.fields));
}

}  // namespace

ad::Var DeepFm::fm_logit(const CtrBatch& batch) const { return fm_from_pooled(pooled(batch), batch, linear_, w0_); }

ad::Var DeepFm::logits(const CtrBatch& batch, std::mt19937_64& rng, bool training) const {
  const ad::Var p = pooled(batch);
  return ad::add(fm_from_pooled(p, batch, linear_, w0_), tower_.forward(p, cfg_.dropout, rng, training));
}

std::vector<Parameter> DeepFm::dense_parameters() const {
  std::vector<Parameter> out{{"w0", w0_}, {"linear", linear_}};
  for (auto& p : tower_.parameters("mlp")) out.push_back(std::move(p));
  return out;
}

void DeepFm::save(Checkpoint& ck, const std::string& prefix) const {
  Backbone::save(ck, prefix);
  save_layout(ck, prefix, layout_);
  ck.set(prefix + ".d", cfg_.d);
  ck.set(prefix + ".mlp", join_sizes(cfg_.mlp));
  ck.set_real(prefix + ".dropout", cfg_.dropout);
}

std::unique_ptr<DeepFm> DeepFm::load(const Checkpoint& ck, const std::string& prefix) {
  DeepFmConfig cfg;
  cfg.d = ck.get_int(prefix + ".d");
  cfg.mlp = split_sizes(ck.get(prefix + ".mlp"));
  cfg.dropout = ck.get_real(prefix + ".dropout");
  std::mt19937_64 rng(0);
  auto model = std::make_unique<DeepFm>(cfg, load_layout(ck, prefix), load_table(ck, prefix, 0), rng);
  model->load_dense(ck, prefix);
  return model;
}

// ---------------------------------------------------------------------------

void DcnMixConfig::validate(std::size_t f) const {
  if (layers < 0 || experts < 1) throw std::invalid_argument("DcnMix: need layers >= 0 and experts >= 1");
  if (rank == 0 || rank >= f) {
    throw std::invalid_argument("DcnMix: rank " + std::to_string(rank) + " must lie in [1, f = " + std::to_string(f) + ")");
  }
}

ad::Var dcn_mix_layer(const ad::Var& el, const ad::Var& e0, const DcnLayer& layer) {
  ad::Var out = el;
  for (const auto& ex : layer.experts) {
    const ad::Var low = ad::tanh(ad::matmul(ad::tanh(ad::matmul(el, ex.v)), ad::transpose(ex.c)));
    const ad::Var p = ad::mul(e0, ad::add(ad::matmul(low, ad::transpose(ex.u)), layer.bias));
    out = ad::add(out, ad::mul(p, ad::matmul(el, ex.gate)));
  }
  return out;
}

DcnMix::DcnMix(const DcnMixConfig& cfg, FieldLayout layout, std::unique_ptr<EmbeddingLayer> table,
               std::mt19937_64& rng)
    : CtrBackbone(std::move(layout)), cfg_(cfg) {
  if (!table || table->n() != layout_.total() || table->d() != cfg.d) {
    throw std::invalid_argument("DcnMix: embedding layer must be [features, d]");
  }
  embeddings_.push_back(std::move(table));
  const std::size_t fd = f(), r = cfg.rank;
  cfg.validate(fd);
  for (int l = 0; l < cfg.layers; ++l) {
    DcnLayer layer;
    layer.bias = ad::parameter(Tensor({1, fd}, 0));
    for (int i = 0; i < cfg.experts; ++i) {
      layer.experts.push_back({ad::parameter(glorot(fd, r, rng)), ad::parameter(glorot(fd, r, rng)),
                               ad::parameter(glorot(r, r, rng)), ad::parameter(glorot(fd, 1, rng))});
    }
    cross_.push_back(std::move(layer));
  }
  tower_ = Mlp(fd, cfg.mlp, 1, rng);
}

std::size_t DcnMix::f() const { return layout_.num_fields() * static_cast<std::size_t>(cfg_.d); }

ad::Var DcnMix::logits(const CtrBatch& batch, std::mt19937_64& rng, bool training) const {
  const ad::Var e0 = pooled(batch);
  ad::Var e = e0;
  for (const auto& layer : cross_) e = dcn_mix_layer(e, e0, layer);
  return tower_.forward(e, cfg_.dropout, rng, training);
}

std::vector<Parameter> DcnMix::dense_parameters() const {
  std::vector<Parameter> out;
  for (std::size_t l = 0; l < cross_.size(); ++l) {
    const std::string p = "cross" + std::to_string(l);
    out.push_back({p + ".b", cross_[l].bias});
    for (std::size_t i = 0; i < cross_[l].experts.size(); ++i) {
      const auto& ex = cross_[l].experts[i];
      const std::string q = p + ".e" + std::to_string(i);
      out.push_back({q + ".u", ex.u});
      out.push_back({q + ".v", ex.v});
      out.push_back({q + ".c", ex.c});
      out.push_back({q + ".gate", ex.gate});
    }
  }
  for (auto& p : tower_.parameters("mlp")) out.push_back(std::move(p));
  return out;
}

void DcnMix::save(Checkpoint& ck, const std::string& prefix) const {
  Backbone::save(ck, prefix);
  save_layout(ck, prefix, layout_);
  ck.set(prefix + ".d", cfg_.d);
  ck.set(prefix + ".layers", cfg_.layers);
  ck.set(prefix + ".experts", cfg_.experts);
  ck.set(prefix + ".rank", static_cast<std::int64_t>(cfg_.rank));
  ck.set(prefix + ".mlp", join_sizes(cfg_.mlp));
  ck.set_real(prefix + ".dropout", cfg_.dropout);
}

std::unique_ptr<DcnMix> DcnMix::load(const Checkpoint& ck, const std::string& prefix) {
  DcnMixConfig cfg;
  cfg.d = ck.get_int(prefix + ".d");
  cfg.layers = static_cast<int>(ck.get_int(prefix + ".layers"));
  cfg.experts = static_cast<int>(ck.get_int(prefix + ".experts"));
  cfg.rank = static_cast<std::size_t>(ck.get_int(prefix + ".rank"));
  cfg.mlp = split_sizes(ck.get(prefix + ".mlp"));
  cfg.dropout = ck.get_real(prefix + ".dropout");
  std::mt19937_64 rng(0);
  auto model = std::make_unique<DcnMix>(cfg, load_layout(ck, prefix), load_table(ck, prefix, 0), rng);
  model->load_dense(ck, prefix);
  return model;
}

std::unique_ptr<Backbone> load_backbone(const Checkpoint& ck, const std::string& prefix) {
  switch (parse_backbone(ck.get(prefix + ".backbone"))) {
    case BackboneKind::NeuMf: return NeuMf::load(ck, prefix);
    case BackboneKind::LightGcn: return LightGcn::load(ck, prefix);
    case BackboneKind::DeepFm: return DeepFm::load(ck, prefix);
    case BackboneKind::DcnMix: return DcnMix::load(ck, prefix);
  }
  throw CheckpointError("unknown backbone");
}

}  // namespace lers
