// Copyright 2026 The LERS Kit Authors
// SPDX-License-Identifier: Apache-2.0

#include "lers/embedding.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <sstream>

namespace lers {
namespace {

Tensor normal_tensor(Shape shape, Real stddev, std::mt19937_64& rng) {
  Tensor t(std::move(shape), 0);
  std::normal_distribution<Real> dist(0, stddev);
  for (auto& v : t.span()) v = dist(rng);
  return t;
}

std::vector<std::int64_t> to_ints(std::span<const Index> v) { return {v.begin(), v.end()}; }

std::string key(const std::string& prefix, const char* name) { return prefix + "." + name; }

Real logistic(Real x) {
  if (x >= 0) return 1 / (1 + std::exp(-x));
  const Real e = std::exp(x);
  return e / (1 + e);
}

ad::Var sum_of_squares(const std::vector<Parameter>& params) {
  ad::Var total;
  for (const auto& p : params) {
    if (p.l2_scale == 0) continue;
    auto term = ad::sum(ad::square(p.var));
    if (p.l2_scale != 1) term = ad::scale(term, p.l2_scale);
    total = total ? ad::add(total, term) : term;
  }
  return total ? total : ad::constant(Tensor::scalar(0));
}

std::uint64_t mix64(std::uint64_t z) {
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
  return z ^ (z >> 31);
}

ad::Var copy_param(const ad::Var& v) { return ad::parameter(v.value()); }

}  // namespace

void EmbeddingSpec::validate() const {
  if (n < 1 || d < 1) {
    throw std::invalid_argument("embedding spec requires n >= 1 and d >= 1 (got n=" + std::to_string(n) +
                                ", d=" + std::to_string(d) + ")");
  }
}

UnreachableSparsity::UnreachableSparsity(const std::string& method, double target, double lo_, double hi_)
    : std::runtime_error([&] {
        std::ostringstream os;
        os << method << ": sparsity " << target << " is unreachable; attainable range is [" << lo_ << ", " << hi_ << "]";
        return os.str();
      }()),
      lo(lo_),
      hi(hi_) {}

std::string_view kind_name(LayerKind kind) {
  switch (kind) {
    case LayerKind::Full: return "full";
    case LayerKind::Qr: return "qr";
    case LayerKind::Tt: return "tt";
    case LayerKind::Dhe: return "dhe";
    case LayerKind::Csr: return "csr";
    case LayerKind::Cerp: return "cerp";
    case LayerKind::Str: return "str";
    case LayerKind::Supernet: return "supernet";
  }
  return "?";
}

LayerKind parse_kind(std::string_view name) {
  for (auto k : {LayerKind::Full, LayerKind::Qr, LayerKind::Tt, LayerKind::Dhe, LayerKind::Csr, LayerKind::Cerp,
                 LayerKind::Str, LayerKind::Supernet}) {
    if (kind_name(k) == name) return k;
  }
  throw std::invalid_argument("unknown embedding layer kind '" + std::string(name) + "'");
}

// ---------------------------------------------------------------------------

Tensor EmbeddingLayer::materialize() const {
  std::vector<Index> ids(static_cast<std::size_t>(spec_.n));
  std::iota(ids.begin(), ids.end(), Index{0});
  return lookup_rows(ids);
}

ad::Var EmbeddingLayer::l2_penalty() { return sum_of_squares(parameters()); }

double EmbeddingLayer::sparsity() const {
  return 1.0 - static_cast<double>(param_count()) / static_cast<double>(spec_.full_params());
}

void EmbeddingLayer::check_ids(std::span<const Index> ids) const {
  for (auto i : ids) {
    if (i < 0 || i >= spec_.n) {
      throw std::out_of_range(std::string(kind_name(kind())) + " lookup: id " + std::to_string(i) + " outside [0," +
                              std::to_string(spec_.n) + ")");
    }
  }
}

void EmbeddingLayer::save_header(Checkpoint& ck, const std::string& prefix) const {
  ck.set(key(prefix, "kind"), std::string(kind_name(kind())));
  ck.set(key(prefix, "n"), spec_.n);
  ck.set(key(prefix, "d"), spec_.d);
}

std::unique_ptr<EmbeddingLayer> load_layer(const Checkpoint& ck, const std::string& prefix) {
  const auto kind = parse_kind(ck.get(key(prefix, "kind")));
  const EmbeddingSpec spec{ck.get_int(key(prefix, "n")), ck.get_int(key(prefix, "d"))};
  switch (kind) {
    case LayerKind::Full: {
      auto t = std::make_unique<FullTable>(spec, ck.tensor(key(prefix, "weights")));
      if (ck.has_section(key(prefix, "mask"))) t->set_mask(ck.tensor(key(prefix, "mask")));
      return t;
    }
    case LayerKind::Qr:
      return std::make_unique<QrTable>(spec, ck.get_int(key(prefix, "p")), ck.tensor(key(prefix, "e1")),
                                       ck.tensor(key(prefix, "e2")));
    case LayerKind::Tt: {
      TtShape shape;
      for (auto v : ck.ints(key(prefix, "row_factors"))) shape.row_factors.push_back(v);
      for (auto v : ck.ints(key(prefix, "col_factors"))) shape.col_factors.push_back(v);
      for (auto v : ck.ints(key(prefix, "ranks"))) shape.ranks.push_back(v);
      std::vector<Tensor> cores;
      for (std::size_t k = 0; k < shape.cores(); ++k) cores.push_back(ck.tensor(prefix + ".core" + std::to_string(k)));
      auto t = std::make_unique<TtTable>(spec, shape, std::move(cores), ck.get_int(key(prefix, "cache_capacity")));
      const auto& cached = ck.ints(key(prefix, "cached_ids"));
      if (!cached.empty()) {
        // Restore ids and rows verbatim.
        std::vector<std::int64_t> freq(static_cast<std::size_t>(spec.n), 0);
        for (std::size_t s = 0; s < cached.size(); ++s) freq[cached[s]] = static_cast<std::int64_t>(cached.size() - s);
        t->build_cache(freq);
        auto& cache = t->parameters().back().var.mutable_value();
        cache = ck.tensor(key(prefix, "cache"));
      }
      return t;
    }
    case LayerKind::Dhe: {
      std::vector<std::uint64_t> seeds;
      for (auto s : ck.ints(key(prefix, "seeds"))) seeds.push_back(static_cast<std::uint64_t>(s));
      return std::make_unique<DheEncoder>(spec, std::move(seeds), ck.tensor(key(prefix, "w1")), ck.tensor(key(prefix, "b1")),
                                          ck.tensor(key(prefix, "w2")), ck.tensor(key(prefix, "b2")));
    }
    case LayerKind::Csr:
      return std::make_unique<CsrTable>(spec, ck.ints(key(prefix, "row_ptr")), ck.ints(key(prefix, "col_idx")),
                                        ck.tensor(key(prefix, "values")));
    case LayerKind::Str:
      return std::make_unique<StrTable>(spec, ck.tensor(key(prefix, "weights")), ck.tensor(key(prefix, "threshold")));
    case LayerKind::Cerp: {
      auto t = std::make_unique<CerpTable>(spec, ck.get_int(key(prefix, "buckets")), ck.tensor(key(prefix, "w1")),
                                           ck.tensor(key(prefix, "w2")), ck.tensor(key(prefix, "s1")),
                                           ck.tensor(key(prefix, "s2")));
      if (ck.has_section(key(prefix, "mask1"))) {
        t->freeze(ck.tensor(key(prefix, "mask1")), ck.tensor(key(prefix, "mask2")));
        // freeze() zeroes weights outside the mask; the saved weights already are.
      }
      return t;
    }
    case LayerKind::Supernet: {
      FieldLayout layout;
      layout.offsets = {};
      for (auto v : ck.ints(key(prefix, "offsets"))) layout.offsets.push_back(v);
      auto t = std::make_unique<Supernet>(spec, layout, ck.tensor(key(prefix, "weights")));
      t->set_dims({ck.ints(key(prefix, "dims")).begin(), ck.ints(key(prefix, "dims")).end()});
      const auto& keep = ck.ints(key(prefix, "keep"));
      t->set_row_mask({keep.begin(), keep.end()});
      return t;
    }
  }
  throw CheckpointError("unreachable layer kind");
}

// ---------------------------------------------------------------------------
// FullTable

FullTable::FullTable(EmbeddingSpec spec, Tensor weights) : EmbeddingLayer(spec) {
  if (weights.rows() != static_cast<std::size_t>(spec.n) || weights.cols() != static_cast<std::size_t>(spec.d)) {
    throw ShapeError("FullTable: weights " + shape_string(weights.shape()) + " do not match n=" + std::to_string(spec.n) +
                     ", d=" + std::to_string(spec.d));
  }
  weights_ = ad::parameter(std::move(weights));
}

std::unique_ptr<FullTable> FullTable::random(EmbeddingSpec spec, Real stddev, std::mt19937_64& rng) {
  spec.validate();
  return std::make_unique<FullTable>(spec, normal_tensor({static_cast<std::size_t>(spec.n), static_cast<std::size_t>(spec.d)},
                                                         stddev, rng));
}

ad::Var FullTable::forward(std::span<const Index> ids) {
  check_ids(ids);
  auto rows = ad::gather_rows(weights_, ids);
  if (!mask_) return rows;
  return ad::mul(rows, ad::gather_rows(ad::constant(*mask_), ids));
}

Tensor FullTable::lookup_rows(std::span<const Index> ids) const {
  check_ids(ids);
  const auto d = static_cast<std::size_t>(spec_.d);
  Tensor out = Tensor::uninitialized({ids.size(), d});
  const Tensor& w = weights_.value();
  for (std::size_t i = 0; i < ids.size(); ++i) {
    std::copy_n(w.data() + ids[i] * d, d, out.data() + i * d);
  }
  return out;
}

std::vector<Parameter> FullTable::parameters() { return {{"full.weights", weights_, 1}}; }

std::int64_t FullTable::param_count() const {
  return mask_ ? static_cast<std::int64_t>(mask_->count_nonzero()) : spec_.full_params();
}

void FullTable::set_mask(Tensor mask) {
  if (mask.size() != weights_.value().size()) throw ShapeError("FullTable::set_mask: mask " + shape_string(mask.shape()));
  mask = mask.reshaped(weights_.value().shape());
  for (auto& v : mask.span()) v = v != 0 ? Real(1) : Real(0);
  Tensor& w = weights_.mutable_value();
  for (std::size_t i = 0; i < w.size(); ++i) w[i] *= mask[i];
  mask_ = std::move(mask);
}

void FullTable::save(Checkpoint& ck, const std::string& prefix) const {
  save_header(ck, prefix);
  ck.put_tensor(key(prefix, "weights"), weights_.value());
  if (mask_) ck.put_tensor(key(prefix, "mask"), *mask_);
}

std::unique_ptr<EmbeddingLayer> FullTable::clone() const {
  auto t = std::make_unique<FullTable>(spec_, weights_.value());
  t->mask_ = mask_;
  return t;
}

// ---------------------------------------------------------------------------
// QrTable

std::pair<Index, Index> qr_indices(Index i, Index n, Index p) {
  if (i < 0 || i >= n) throw std::out_of_range("qr_indices: id " + std::to_string(i) + " outside [0," + std::to_string(n) + ")");
  if (p < 1) throw std::invalid_argument("qr_indices: p must be >= 1");
  return {i % p, i / p};
}

QrTable::QrTable(EmbeddingSpec spec, Index p, Tensor e1, Tensor e2)
    : EmbeddingLayer(spec), p_(p), q_((spec.n + p - 1) / std::max<Index>(p, 1)) {
  if (p < 1) throw std::invalid_argument("QrTable: p must be >= 1");
  const auto d = static_cast<std::size_t>(spec.d);
  if (e1.rows() != static_cast<std::size_t>(p_) || e1.cols() != d || e2.rows() != static_cast<std::size_t>(q_) ||
      e2.cols() != d) {
    throw ShapeError("QrTable: expected E1 [" + std::to_string(p_) + "," + std::to_string(d) + "] and E2 [" +
                     std::to_string(q_) + "," + std::to_string(d) + "], got " + shape_string(e1.shape()) + " and " +
                     shape_string(e2.shape()));
  }
  e1_ = ad::parameter(std::move(e1));
  e2_ = ad::parameter(std::move(e2));
}

std::unique_ptr<QrTable> QrTable::random(EmbeddingSpec spec, Index p, Real stddev, std::mt19937_64& rng) {
  spec.validate();
  if (p < 1) throw std::invalid_argument("QrTable: p must be >= 1");
  const Index q = (spec.n + p - 1) / p;
  // Product of two factors with stddev sqrt(s) each has stddev s.
  const Real factor = std::sqrt(stddev);
  const auto d = static_cast<std::size_t>(spec.d);
  return std::make_unique<QrTable>(spec, p, normal_tensor({static_cast<std::size_t>(p), d}, factor, rng),
                                   normal_tensor({static_cast<std::size_t>(q), d}, factor, rng));
}

ad::Var QrTable::forward(std::span<const Index> ids) {
  check_ids(ids);
  std::vector<Index> r(ids.size()), qt(ids.size());
  for (std::size_t i = 0; i < ids.size(); ++i) std::tie(r[i], qt[i]) = qr_indices(ids[i], spec_.n, p_);
  // Fused gather-and-multiply: no [ids, d] intermediates stay alive for backward.
  const auto d = static_cast<std::size_t>(spec_.d);
  Tensor out = lookup_rows(ids);
  return ad::make_op("qr_lookup", std::move(out), {e1_, e2_},
                     [a = e1_, b = e2_, r = std::move(r), qt = std::move(qt), d](const Tensor& g,
                                                                                std::span<Tensor* const> gi) {
                       const Tensor& av = a.value();
                       const Tensor& bv = b.value();
                       for (std::size_t i = 0; i < r.size(); ++i) {
                         const Real* gr = g.data() + i * d;
                         const Real* ar = av.data() + r[i] * d;
                         const Real* br = bv.data() + qt[i] * d;
                         if (gi[0]) {
                           Real* dst = gi[0]->data() + r[i] * d;
                           for (std::size_t j = 0; j < d; ++j) dst[j] += gr[j] * br[j];
                         }
                         if (gi[1]) {
                           Real* dst = gi[1]->data() + qt[i] * d;
                           for (std::size_t j = 0; j < d; ++j) dst[j] += gr[j] * ar[j];
                         }
                       }
                     });
}

Tensor QrTable::lookup_rows(std::span<const Index> ids) const {
  check_ids(ids);
  const auto d = static_cast<std::size_t>(spec_.d);
  Tensor out = Tensor::uninitialized({ids.size(), d});
  const Tensor& a = e1_.value();
  const Tensor& b = e2_.value();
  for (std::size_t i = 0; i < ids.size(); ++i) {
    const auto [r, qt] = qr_indices(ids[i], spec_.n, p_);
    for (std::size_t j = 0; j < d; ++j) out[i * d + j] = a[r * d + j] * b[qt * d + j];
  }
  return out;
}

std::vector<Parameter> QrTable::parameters() { return {{"qr.e1", e1_, 1}, {"qr.e2", e2_, 1}}; }

void QrTable::save(Checkpoint& ck, const std::string& prefix) const {
  save_header(ck, prefix);
  ck.set(key(prefix, "p"), p_);
  ck.put_tensor(key(prefix, "e1"), e1_.value());
  ck.put_tensor(key(prefix, "e2"), e2_.value());
}

std::unique_ptr<EmbeddingLayer> QrTable::clone() const {
  return std::make_unique<QrTable>(spec_, p_, e1_.value(), e2_.value());
}

// ---------------------------------------------------------------------------
// TtTable

std::int64_t TtShape::core_params() const {
  std::int64_t total = 0;
  for (std::size_t k = 0; k < cores(); ++k) total += ranks[k] * row_factors[k] * col_factors[k] * ranks[k + 1];
  return total;
}

void TtShape::validate(const EmbeddingSpec& spec) const {
  const std::size_t t = row_factors.size();
  if (t == 0 || col_factors.size() != t || ranks.size() != t + 1) {
    throw std::invalid_argument("TtShape: need t row factors, t column factors and t+1 ranks");
  }
  if (ranks.front() != 1 || ranks.back() != 1) throw std::invalid_argument("TtShape: boundary ranks must be 1");
  Index rows = 1, cols = 1;
  for (std::size_t k = 0; k < t; ++k) {
    if (row_factors[k] < 1 || col_factors[k] < 1 || ranks[k + 1] < 1) throw std::invalid_argument("TtShape: factors and ranks must be >= 1");
    rows *= row_factors[k];
    cols *= col_factors[k];
  }
  if (rows < spec.n) throw std::invalid_argument("TtShape: row factors cover " + std::to_string(rows) + " < n=" + std::to_string(spec.n));
  if (cols != spec.d) throw std::invalid_argument("TtShape: column factors multiply to " + std::to_string(cols) + " != d=" + std::to_string(spec.d));
}

std::vector<Index> balanced_cover(Index n, std::size_t t) {
  if (n < 1 || t < 1) throw std::invalid_argument("balanced_cover: n and t must be >= 1");
  std::vector<Index> f;
  Index remaining = n;
  for (std::size_t k = t; k >= 1; --k) {
    // Smallest m with m^k >= remaining.
    Index m = std::max<Index>(1, static_cast<Index>(std::floor(std::pow(static_cast<double>(remaining), 1.0 / static_cast<double>(k)))));
    auto pow_ge = [&](Index base) {
      double p = 1;
      for (std::size_t e = 0; e < k; ++e) p *= static_cast<double>(base);
      return p >= static_cast<double>(remaining);
    };
    while (m > 1 && pow_ge(m - 1)) --m;
    while (!pow_ge(m)) ++m;
    f.push_back(m);
    remaining = (remaining + m - 1) / m;
  }
  return f;
}

std::vector<Index> balanced_factorization(Index d, std::size_t t) {
  if (d < 1 || t < 1) throw std::invalid_argument("balanced_factorization: d and t must be >= 1");
  // Exhaustive search over ordered divisor chains; d is small.
  std::vector<Index> best, cur;
  double best_spread = 1e300;
  std::function<void(Index, std::size_t)> rec = [&](Index rest, std::size_t left) {
    if (left == 1) {
      cur.push_back(rest);
      auto [lo, hi] = std::minmax_element(cur.begin(), cur.end());
      const double spread = static_cast<double>(*hi) / static_cast<double>(*lo);
      if (spread < best_spread) {
        best_spread = spread;
        best = cur;
      }
      cur.pop_back();
      return;
    }
    for (Index f = 1; f <= rest; ++f) {
      if (rest % f != 0) continue;
      if (!cur.empty() && f < cur.back()) continue;  // non-decreasing order
      cur.push_back(f);
      rec(rest / f, left - 1);
      cur.pop_back();
    }
  };
  rec(d, t);
  return best;
}

TtTable::TtTable(EmbeddingSpec spec, TtShape shape, std::vector<Tensor> cores, Index cache_capacity)
    : EmbeddingLayer(spec), shape_(std::move(shape)), cache_capacity_(cache_capacity) {
  shape_.validate(spec);
  if (cores.size() != shape_.cores()) throw ShapeError("TtTable: expected " + std::to_string(shape_.cores()) + " cores");
  if (cache_capacity < 0 || cache_capacity > spec.n) throw std::invalid_argument("TtTable: cache capacity outside [0, n]");
  for (std::size_t k = 0; k < cores.size(); ++k) {
    const auto rows = static_cast<std::size_t>(shape_.ranks[k] * shape_.row_factors[k]);
    const auto cols = static_cast<std::size_t>(shape_.col_factors[k] * shape_.ranks[k + 1]);
    if (cores[k].rows() != rows || cores[k].cols() != cols) {
      throw ShapeError("TtTable: core " + std::to_string(k) + " is " + shape_string(cores[k].shape()) + ", expected [" +
                       std::to_string(rows) + "," + std::to_string(cols) + "]");
    }
    cores_.push_back(ad::parameter(std::move(cores[k])));
  }
  cache_ = ad::parameter(Tensor({static_cast<std::size_t>(std::max<Index>(cache_capacity_, 1)), static_cast<std::size_t>(spec.d)}, 0));
  slot_.assign(static_cast<std::size_t>(spec.n), -1);
}

std::unique_ptr<TtTable> TtTable::random(EmbeddingSpec spec, TtShape shape, Index cache_capacity, Real stddev,
                                         std::mt19937_64& rng) {
  shape.validate(spec);
  // Each row entry sums prod(inner ranks) products of t core entries.
  double inner = 1;
  for (std::size_t k = 1; k + 1 < shape.ranks.size(); ++k) inner *= static_cast<double>(shape.ranks[k]);
  const double t = static_cast<double>(shape.cores());
  const Real core_std = static_cast<Real>(std::pow(static_cast<double>(stddev * stddev) / inner, 1.0 / (2.0 * t)));
  std::vector<Tensor> cores;
  for (std::size_t k = 0; k < shape.cores(); ++k) {
    cores.push_back(normal_tensor({static_cast<std::size_t>(shape.ranks[k] * shape.row_factors[k]),
                                   static_cast<std::size_t>(shape.col_factors[k] * shape.ranks[k + 1])},
                                  core_std, rng));
  }
  return std::make_unique<TtTable>(spec, std::move(shape), std::move(cores), cache_capacity);
}

// partials[k] holds A_k, a [D_k, r_k] row-major block, D_k = prod_{m<=k} d_m.
void TtTable::contract(Index id, std::vector<std::vector<Real>>& partials) const {
  const std::size_t t = shape_.cores();
  std::vector<Index> digit(t);
  Index rest = id;
  for (std::size_t k = t; k-- > 0;) {
    digit[k] = rest % shape_.row_factors[k];
    rest /= shape_.row_factors[k];
  }
  partials.resize(t);
  std::size_t D = 1;
  for (std::size_t k = 0; k < t; ++k) {
    const auto n_k = static_cast<std::size_t>(shape_.row_factors[k]);
    const auto d_k = static_cast<std::size_t>(shape_.col_factors[k]);
    const auto ra = static_cast<std::size_t>(shape_.ranks[k]);
    const auto rb = static_cast<std::size_t>(shape_.ranks[k + 1]);
    const Tensor& G = cores_[k].value();
    const std::size_t gcols = d_k * rb;
    auto& out = partials[k];
    out.assign(D * d_k * rb, 0);
    for (std::size_t J = 0; J < D; ++J) {
      for (std::size_t a = 0; a < ra; ++a) {
        const Real left = k == 0 ? Real(1) : partials[k - 1][J * ra + a];
        if (left == 0) continue;
        const Real* g = G.data() + (a * n_k + static_cast<std::size_t>(digit[k])) * gcols;
        Real* o = out.data() + J * d_k * rb;
        for (std::size_t x = 0; x < gcols; ++x) o[x] += left * g[x];
      }
    }
    D *= d_k;
  }
}

Tensor TtTable::core_row(Index id) const {
  std::vector<std::vector<Real>> partials;
  contract(id, partials);
  Tensor out({1, static_cast<std::size_t>(spec_.d)}, 0);
  std::copy(partials.back().begin(), partials.back().end(), out.data());
  return out;
}

Tensor TtTable::lookup_rows(std::span<const Index> ids) const {
  check_ids(ids);
  const auto d = static_cast<std::size_t>(spec_.d);
  Tensor out = Tensor::uninitialized({ids.size(), d});
  std::vector<std::vector<Real>> partials;
  for (std::size_t b = 0; b < ids.size(); ++b) {
    const auto s = slot_[ids[b]];
    if (s >= 0) {
      std::copy_n(cache_.value().data() + s * d, d, out.data() + b * d);
    } else {
      contract(ids[b], partials);
      std::copy(partials.back().begin(), partials.back().end(), out.data() + b * d);
    }
  }
  return out;
}

ad::Var TtTable::forward(std::span<const Index> ids) {
  Tensor value = lookup_rows(ids);
  std::vector<ad::Var> parents(cores_.begin(), cores_.end());
  parents.push_back(cache_);
  std::vector<Index> idx(ids.begin(), ids.end());
  const TtTable* self = this;
  return ad::make_op("tt_lookup", std::move(value), std::move(parents),
                     [self, idx = std::move(idx)](const Tensor& g, std::span<Tensor* const> gi) {
    const auto& sh = self->shape_;
    const std::size_t t = sh.cores();
    const auto d = static_cast<std::size_t>(self->spec_.d);
    std::vector<std::vector<Real>> partials;
    std::vector<Real> gA, gPrev;
    for (std::size_t b = 0; b < idx.size(); ++b) {
      const Real* grow = g.data() + b * d;
      const auto s = self->slot_[idx[b]];
      if (s >= 0) {
        if (gi[t]) {
          Real* dst = gi[t]->data() + s * d;
          for (std::size_t j = 0; j < d; ++j) dst[j] += grow[j];
        }
        continue;
      }
      self->contract(idx[b], partials);
      std::vector<Index> digit(t);
      Index rest = idx[b];
      for (std::size_t k = t; k-- > 0;) {
        digit[k] = rest % sh.row_factors[k];
        rest /= sh.row_factors[k];
      }
      gA.assign(grow, grow + d);  // gradient wrt A_t ([D_t, 1])
      std::size_t D = static_cast<std::size_t>(self->spec_.d);
      for (std::size_t k = t; k-- > 0;) {
        const auto n_k = static_cast<std::size_t>(sh.row_factors[k]);
        const auto d_k = static_cast<std::size_t>(sh.col_factors[k]);
        const auto ra = static_cast<std::size_t>(sh.ranks[k]);
        const auto rb = static_cast<std::size_t>(sh.ranks[k + 1]);
        const std::size_t gcols = d_k * rb;
        const std::size_t Dprev = D / d_k;
        const Tensor& G = self->cores_[k].value();
        gPrev.assign(Dprev * ra, 0);
        for (std::size_t J = 0; J < Dprev; ++J) {
          const Real* go = gA.data() + J * gcols;
          for (std::size_t a = 0; a < ra; ++a) {
            const Real left = k == 0 ? Real(1) : partials[k - 1][J * ra + a];
            const std::size_t grow_idx = (a * n_k + static_cast<std::size_t>(digit[k])) * gcols;
            if (gi[k] && left != 0) {
              Real* dst = gi[k]->data() + grow_idx;
              for (std::size_t x = 0; x < gcols; ++x) dst[x] += left * go[x];
            }
            if (k > 0) {
              const Real* gk = G.data() + grow_idx;
              Real acc = 0;
              for (std::size_t x = 0; x < gcols; ++x) acc += go[x] * gk[x];
              gPrev[J * ra + a] += acc;
            }
          }
        }
        gA.swap(gPrev);
        D = Dprev;
      }
    }
  });
}

std::vector<Parameter> TtTable::parameters() {
  std::vector<Parameter> out;
  for (std::size_t k = 0; k < cores_.size(); ++k) out.push_back({"tt.core" + std::to_string(k), cores_[k], 1});
  if (cache_capacity_ > 0) out.push_back({"tt.cache", cache_, 1});
  return out;
}

std::int64_t TtTable::param_count() const { return shape_.core_params() + cache_capacity_ * spec_.d; }

void TtTable::build_cache(std::span<const std::int64_t> frequencies) {
  if (frequencies.size() != static_cast<std::size_t>(spec_.n)) throw std::invalid_argument("TtTable::build_cache: need one frequency per id");
  std::vector<Index> order(static_cast<std::size_t>(spec_.n));
  std::iota(order.begin(), order.end(), Index{0});
  std::stable_sort(order.begin(), order.end(), [&](Index a, Index b) { return frequencies[a] > frequencies[b]; });
  order.resize(static_cast<std::size_t>(cache_capacity_));
  std::fill(slot_.begin(), slot_.end(), -1);
  cached_ids_ = order;
  const auto d = static_cast<std::size_t>(spec_.d);
  Tensor& cache = cache_.mutable_value();
  for (std::size_t s = 0; s < order.size(); ++s) {
    const Tensor row = core_row(order[s]);
    std::copy_n(row.data(), d, cache.data() + s * d);
    slot_[order[s]] = static_cast<std::int32_t>(s);
  }
}

void TtTable::save(Checkpoint& ck, const std::string& prefix) const {
  save_header(ck, prefix);
  ck.put_ints(key(prefix, "row_factors"), to_ints(shape_.row_factors));
  ck.put_ints(key(prefix, "col_factors"), to_ints(shape_.col_factors));
  ck.put_ints(key(prefix, "ranks"), to_ints(shape_.ranks));
  ck.set(key(prefix, "cache_capacity"), cache_capacity_);
  for (std::size_t k = 0; k < cores_.size(); ++k) ck.put_tensor(prefix + ".core" + std::to_string(k), cores_[k].value());
  ck.put_ints(key(prefix, "cached_ids"), to_ints(cached_ids_));
  ck.put_tensor(key(prefix, "cache"), cache_.value());
}

std::unique_ptr<EmbeddingLayer> TtTable::clone() const {
  std::vector<Tensor> cores;
  for (const auto& c : cores_) cores.push_back(c.value());
  auto t = std::make_unique<TtTable>(spec_, shape_, std::move(cores), cache_capacity_);
  t->cache_ = copy_param(cache_);
  t->cached_ids_ = cached_ids_;
  t->slot_ = slot_;
  return t;
}

Tensor tt_reconstruct(const TtTable& table, std::size_t max_entries) {
  const auto& sh = table.tt_shape();
  const std::size_t t = sh.cores();
  std::size_t rows = 1, cols = 1;
  for (std::size_t k = 0; k < t; ++k) {
    rows *= static_cast<std::size_t>(sh.row_factors[k]);
    cols *= static_cast<std::size_t>(sh.col_factors[k]);
  }
  if (rows * cols > max_entries) {
    throw std::length_error("tt_reconstruct: " + std::to_string(rows) + "x" + std::to_string(cols) + " exceeds the test-scale limit");
  }
  // M_k is [I_k, J_k, r_k] over all row prefixes I_k and column prefixes J_k.
  std::vector<Real> M{1};
  std::size_t I = 1, J = 1, r = 1;
  for (std::size_t k = 0; k < t; ++k) {
    const auto n_k = static_cast<std::size_t>(sh.row_factors[k]);
    const auto d_k = static_cast<std::size_t>(sh.col_factors[k]);
    const auto rb = static_cast<std::size_t>(sh.ranks[k + 1]);
    const Tensor& G = table.cores()[k].value();
    std::vector<Real> next(I * n_k * J * d_k * rb, 0);
    for (std::size_t i = 0; i < I; ++i)
      for (std::size_t ik = 0; ik < n_k; ++ik)
        for (std::size_t j = 0; j < J; ++j)
          for (std::size_t jk = 0; jk < d_k; ++jk)
            for (std::size_t b = 0; b < rb; ++b) {
              Real acc = 0;
              for (std::size_t a = 0; a < r; ++a) acc += M[(i * J + j) * r + a] * G.at(a * n_k + ik, jk * rb + b);
              next[(((i * n_k + ik) * J + j) * d_k + jk) * rb + b] = acc;
            }
    M.swap(next);
    I *= n_k;
    J *= d_k;
    r = rb;
  }
  const auto n = static_cast<std::size_t>(table.n());
  Tensor out({n, J}, 0);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < J; ++j) out.at(i, j) = M[i * J + j];
  return out;
}

// ---------------------------------------------------------------------------
// DheEncoder

std::vector<std::uint64_t> dhe_seeds(std::size_t k, std::uint64_t seed) {
  std::vector<std::uint64_t> out(k);
  std::uint64_t state = seed;
  for (auto& s : out) {
    state += 0x9e3779b97f4a7c15ULL;
    s = mix64(state);
  }
  return out;
}

std::vector<Real> dhe_encode(Index i, std::span<const std::uint64_t> seeds) {
  std::vector<Real> out(seeds.size());
  const std::uint64_t base = mix64(static_cast<std::uint64_t>(i) + 0x9e3779b97f4a7c15ULL);
  constexpr double kMax = static_cast<double>((std::uint64_t{1} << 53) - 1);
  for (std::size_t j = 0; j < seeds.size(); ++j) {
    const std::uint64_t h = mix64(base ^ seeds[j]);
    out[j] = static_cast<Real>(2.0 * static_cast<double>(h >> 11) / kMax - 1.0);
  }
  return out;
}

DheEncoder::DheEncoder(EmbeddingSpec spec, std::vector<std::uint64_t> seeds, Tensor w1, Tensor b1, Tensor w2, Tensor b2)
    : EmbeddingLayer(spec), seeds_(std::move(seeds)) {
  const std::size_t k = seeds_.size();
  const auto d = static_cast<std::size_t>(spec.d);
  const std::size_t w = w1.cols();
  if (k < d) throw std::invalid_argument("DheEncoder: code length k=" + std::to_string(k) + " must be >= d");
  if (w1.rows() != k || b1.rows() != 1 || b1.cols() != w || w2.rows() != w || w2.cols() != d || b2.rows() != 1 ||
      b2.cols() != d) {
    throw ShapeError("DheEncoder: inconsistent MLP shapes");
  }
  w1_ = ad::parameter(std::move(w1));
  b1_ = ad::parameter(std::move(b1));
  w2_ = ad::parameter(std::move(w2));
  b2_ = ad::parameter(std::move(b2));
}

std::unique_ptr<DheEncoder> DheEncoder::random(EmbeddingSpec spec, std::size_t k, Index width, std::uint64_t hash_seed,
                                               Real stddev, std::mt19937_64& rng) {
  spec.validate();
  if (width < 1) throw std::invalid_argument("DheEncoder: width must be >= 1");
  const auto w = static_cast<std::size_t>(width);
  const auto d = static_cast<std::size_t>(spec.d);
  // Codes have variance 1/3; He init keeps E[relu^2] = 1/3, then scale to stddev.
  const Real s1 = std::sqrt(Real(2) / static_cast<Real>(k));
  const Real s2 = stddev * std::sqrt(Real(3) / static_cast<Real>(w));
  return std::make_unique<DheEncoder>(spec, dhe_seeds(k, hash_seed), normal_tensor({k, w}, s1, rng), Tensor({1, w}, 0),
                                      normal_tensor({w, d}, s2, rng), Tensor({1, d}, 0));
}

Tensor DheEncoder::codes(std::span<const Index> ids) const {
  const std::size_t k = seeds_.size();
  Tensor out = Tensor::uninitialized({ids.size(), k});
  for (std::size_t b = 0; b < ids.size(); ++b) {
    const auto row = dhe_encode(ids[b], seeds_);
    std::copy(row.begin(), row.end(), out.data() + b * k);
  }
  return out;
}

ad::Var DheEncoder::forward(std::span<const Index> ids) {
  check_ids(ids);
  auto h = ad::relu(ad::add(ad::matmul(ad::constant(codes(ids)), w1_), b1_));
  return ad::add(ad::matmul(h, w2_), b2_);
}

Tensor DheEncoder::lookup_rows(std::span<const Index> ids) const {
  check_ids(ids);
  auto h = ad::relu(ad::add(ad::matmul(ad::constant(codes(ids)), ad::constant(w1_.value())), ad::constant(b1_.value())));
  return ad::add(ad::matmul(h, ad::constant(w2_.value())), ad::constant(b2_.value())).value();
}

std::vector<Parameter> DheEncoder::parameters() {
  return {{"dhe.w1", w1_, 1}, {"dhe.b1", b1_, 1}, {"dhe.w2", w2_, 1}, {"dhe.b2", b2_, 1}};
}

std::int64_t DheEncoder::param_count() const { return params_for(seeds_.size(), width(), spec_.d); }

void DheEncoder::save(Checkpoint& ck, const std::string& prefix) const {
  save_header(ck, prefix);
  std::vector<std::int64_t> s;
  for (auto v : seeds_) s.push_back(static_cast<std::int64_t>(v));
  ck.put_ints(key(prefix, "seeds"), std::move(s));
  ck.put_tensor(key(prefix, "w1"), w1_.value());
  ck.put_tensor(key(prefix, "b1"), b1_.value());
  ck.put_tensor(key(prefix, "w2"), w2_.value());
  ck.put_tensor(key(prefix, "b2"), b2_.value());
}

std::unique_ptr<EmbeddingLayer> DheEncoder::clone() const {
  return std::make_unique<DheEncoder>(spec_, seeds_, w1_.value(), b1_.value(), w2_.value(), b2_.value());
}

// ---------------------------------------------------------------------------
// CsrTable

CsrTable::CsrTable(EmbeddingSpec spec, std::vector<std::int64_t> row_ptr, std::vector<std::int64_t> col_idx, Tensor values)
    : EmbeddingLayer(spec), row_ptr_(std::move(row_ptr)), col_idx_(std::move(col_idx)) {
  if (row_ptr_.size() != static_cast<std::size_t>(spec.n) + 1 || row_ptr_.front() != 0 ||
      row_ptr_.back() != static_cast<std::int64_t>(col_idx_.size())) {
    throw std::invalid_argument("CsrTable: row pointers must have n+1 entries from 0 to nnz");
  }
  for (Index r = 0; r < spec.n; ++r) {
    if (row_ptr_[r] > row_ptr_[r + 1]) throw std::invalid_argument("CsrTable: row pointers must be monotone");
    for (auto k = row_ptr_[r]; k < row_ptr_[r + 1]; ++k) {
      if (col_idx_[k] < 0 || col_idx_[k] >= spec.d) throw std::invalid_argument("CsrTable: column index out of range");
      if (k > row_ptr_[r] && col_idx_[k] <= col_idx_[k - 1]) throw std::invalid_argument("CsrTable: column indices must increase within a row");
    }
  }
  if (values.size() != col_idx_.size()) throw ShapeError("CsrTable: values do not match the index count");
  values_ = ad::parameter(values.reshaped({1, col_idx_.size()}));
}

std::unique_ptr<CsrTable> CsrTable::from_dense(EmbeddingSpec spec, const Tensor& dense, const Tensor& mask) {
  spec.validate();
  const auto n = static_cast<std::size_t>(spec.n), d = static_cast<std::size_t>(spec.d);
  if (dense.size() != n * d || mask.size() != n * d) throw ShapeError("CsrTable::from_dense: shapes do not match the spec");
  std::vector<std::int64_t> rp{0}, ci;
  std::vector<Real> vals;
  for (std::size_t r = 0; r < n; ++r) {
    for (std::size_t c = 0; c < d; ++c) {
      if (mask[r * d + c] != 0) {
        ci.push_back(static_cast<std::int64_t>(c));
        vals.push_back(dense[r * d + c]);
      }
    }
    rp.push_back(static_cast<std::int64_t>(ci.size()));
  }
  // A 1x0 tensor is not representable; keep one shape for empty tables.
  Tensor v = vals.empty() ? Tensor() : Tensor({1, vals.size()}, vals);
  return std::make_unique<CsrTable>(spec, std::move(rp), std::move(ci), std::move(v));
}

Tensor CsrTable::lookup_rows(std::span<const Index> ids) const {
  check_ids(ids);
  const auto d = static_cast<std::size_t>(spec_.d);
  Tensor out({ids.size(), d}, 0);
  const Tensor& v = values_.value();
  for (std::size_t b = 0; b < ids.size(); ++b) {
    Real* dst = out.data() + b * d;
    for (auto k = row_ptr_[ids[b]]; k < row_ptr_[ids[b] + 1]; ++k) dst[col_idx_[k]] = v[k];
  }
  return out;
}

ad::Var CsrTable::forward(std::span<const Index> ids) {
  Tensor value = lookup_rows(ids);
  std::vector<Index> idx(ids.begin(), ids.end());
  const CsrTable* self = this;
  return ad::make_op("csr_lookup", std::move(value), {values_},
                     [self, idx = std::move(idx)](const Tensor& g, std::span<Tensor* const> gi) {
    const auto d = static_cast<std::size_t>(self->spec_.d);
    for (std::size_t b = 0; b < idx.size(); ++b) {
      for (auto k = self->row_ptr_[idx[b]]; k < self->row_ptr_[idx[b] + 1]; ++k) {
        (*gi[0])[k] += g[b * d + self->col_idx_[k]];
      }
    }
  });
}

std::vector<Parameter> CsrTable::parameters() {
  if (col_idx_.empty()) return {};
  return {{"csr.values", values_, 1}};
}

std::int64_t CsrTable::index_bytes() const {
  return static_cast<std::int64_t>((row_ptr_.size() + col_idx_.size()) * sizeof(std::int64_t));
}

Tensor CsrTable::to_dense() const { return materialize(); }

Tensor CsrTable::mask() const {
  const auto d = static_cast<std::size_t>(spec_.d);
  Tensor m({static_cast<std::size_t>(spec_.n), d}, 0);
  for (Index r = 0; r < spec_.n; ++r)
    for (auto k = row_ptr_[r]; k < row_ptr_[r + 1]; ++k) m[r * d + col_idx_[k]] = 1;
  return m;
}

void CsrTable::save(Checkpoint& ck, const std::string& prefix) const {
  save_header(ck, prefix);
  ck.put_ints(key(prefix, "row_ptr"), row_ptr_);
  ck.put_ints(key(prefix, "col_idx"), col_idx_);
  ck.put_tensor(key(prefix, "values"), values_.value());
}

std::unique_ptr<EmbeddingLayer> CsrTable::clone() const {
  return std::make_unique<CsrTable>(spec_, row_ptr_, col_idx_, values_.value());
}

// ---------------------------------------------------------------------------
// StrTable

Real str_forward(Real w, Real s) {
  const Real mag = std::abs(w) - logistic(s);
  return mag > 0 ? std::copysign(mag, w) : Real(0);
}

StrTable::StrTable(EmbeddingSpec spec, Tensor weights, Tensor threshold) : EmbeddingLayer(spec) {
  if (weights.rows() != static_cast<std::size_t>(spec.n) || weights.cols() != static_cast<std::size_t>(spec.d)) {
    throw ShapeError("StrTable: weights " + shape_string(weights.shape()));
  }
  if (!(threshold.size() == 1 || threshold.size() == static_cast<std::size_t>(spec.n))) {
    throw ShapeError("StrTable: threshold must be a scalar or one entry per row");
  }
  weights_ = ad::parameter(std::move(weights));
  threshold_ = ad::parameter(threshold.reshaped({threshold.size(), 1}));
}

std::unique_ptr<StrTable> StrTable::random(EmbeddingSpec spec, Real stddev, Real s_init, bool per_row, std::mt19937_64& rng) {
  spec.validate();
  const auto n = static_cast<std::size_t>(spec.n);
  return std::make_unique<StrTable>(spec, normal_tensor({n, static_cast<std::size_t>(spec.d)}, stddev, rng),
                                    Tensor({per_row ? n : 1, 1}, s_init));
}

ad::Var StrTable::forward(std::span<const Index> ids) {
  check_ids(ids);
  auto w = ad::gather_rows(weights_, ids);
  auto s = threshold_.value().size() == 1 ? threshold_ : ad::gather_rows(threshold_, ids);
  return ad::soft_threshold(w, s);
}

Tensor StrTable::lookup_rows(std::span<const Index> ids) const {
  check_ids(ids);
  const auto d = static_cast<std::size_t>(spec_.d);
  const bool per_row = threshold_.value().size() != 1;
  Tensor out = Tensor::uninitialized({ids.size(), d});
  for (std::size_t b = 0; b < ids.size(); ++b) {
    const Real s = threshold_.value()[per_row ? static_cast<std::size_t>(ids[b]) : 0];
    for (std::size_t j = 0; j < d; ++j) out[b * d + j] = str_forward(weights_.value()[ids[b] * d + j], s);
  }
  return out;
}

Tensor StrTable::effective() const { return ad::soft_threshold(ad::constant(weights_.value()), ad::constant(threshold_.value())).value(); }

std::vector<Parameter> StrTable::parameters() { return {{"str.weights", weights_, 1}, {"str.threshold", threshold_, 0}}; }

ad::Var StrTable::l2_penalty() { return ad::sum(ad::square(ad::soft_threshold(weights_, threshold_))); }

std::int64_t StrTable::param_count() const { return static_cast<std::int64_t>(effective().count_nonzero()); }

void StrTable::save(Checkpoint& ck, const std::string& prefix) const {
  save_header(ck, prefix);
  ck.put_tensor(key(prefix, "weights"), weights_.value());
  ck.put_tensor(key(prefix, "threshold"), threshold_.value());
}

std::unique_ptr<EmbeddingLayer> StrTable::clone() const {
  return std::make_unique<StrTable>(spec_, weights_.value(), threshold_.value());
}

// ---------------------------------------------------------------------------
// CerpTable

std::pair<Index, Index> CerpTable::indices(Index i, Index buckets) {
  const Index r = i % buckets;
  return {r, (i / buckets + r) % buckets};
}

CerpTable::CerpTable(EmbeddingSpec spec, Index buckets, Tensor w1, Tensor w2, Tensor s1, Tensor s2)
    : EmbeddingLayer(spec), buckets_(buckets) {
  if (buckets < 1 || buckets > spec.n || buckets * buckets < spec.n) {
    throw std::invalid_argument("CerpTable: buckets must satisfy b*b >= n and b <= n (b=" + std::to_string(buckets) + ")");
  }
  const auto b = static_cast<std::size_t>(buckets), d = static_cast<std::size_t>(spec.d);
  if (w1.rows() != b || w1.cols() != d || w2.rows() != b || w2.cols() != d) throw ShapeError("CerpTable: table shapes");
  if (s1.size() != 1 || s2.size() != 1) throw ShapeError("CerpTable: thresholds must be scalars");
  w1_ = ad::parameter(std::move(w1));
  w2_ = ad::parameter(std::move(w2));
  s1_ = ad::parameter(s1.reshaped({1, 1}));
  s2_ = ad::parameter(s2.reshaped({1, 1}));
}

std::unique_ptr<CerpTable> CerpTable::random(EmbeddingSpec spec, Index buckets, Real stddev, Real s_init, std::mt19937_64& rng) {
  spec.validate();
  const auto b = static_cast<std::size_t>(buckets), d = static_cast<std::size_t>(spec.d);
  const Real part = stddev / std::sqrt(Real(2));
  return std::make_unique<CerpTable>(spec, buckets, normal_tensor({b, d}, part, rng), normal_tensor({b, d}, part, rng),
                                     Tensor::scalar(s_init), Tensor::scalar(s_init));
}

ad::Var CerpTable::effective1() {
  return mask1_ ? ad::mul(w1_, ad::constant(*mask1_)) : ad::soft_threshold(w1_, s1_);
}

ad::Var CerpTable::effective2() {
  return mask2_ ? ad::mul(w2_, ad::constant(*mask2_)) : ad::soft_threshold(w2_, s2_);
}

Tensor CerpTable::effective1_value() const {
  return (mask1_ ? ad::mul(ad::constant(w1_.value()), ad::constant(*mask1_))
                 : ad::soft_threshold(ad::constant(w1_.value()), ad::constant(s1_.value())))
      .value();
}

Tensor CerpTable::effective2_value() const {
  return (mask2_ ? ad::mul(ad::constant(w2_.value()), ad::constant(*mask2_))
                 : ad::soft_threshold(ad::constant(w2_.value()), ad::constant(s2_.value())))
      .value();
}

std::pair<ad::Var, ad::Var> CerpTable::parts(std::span<const Index> ids) {
  check_ids(ids);
  std::vector<Index> a(ids.size()), b(ids.size());
  for (std::size_t i = 0; i < ids.size(); ++i) std::tie(a[i], b[i]) = indices(ids[i], buckets_);
  auto part = [](ad::Var& w, ad::Var& s, const std::optional<Tensor>& mask, const std::vector<Index>& rows) {
    auto g = ad::gather_rows(w, rows);
    return mask ? ad::mul(g, ad::gather_rows(ad::constant(*mask), rows)) : ad::soft_threshold(g, s);
  };
  return {part(w1_, s1_, mask1_, a), part(w2_, s2_, mask2_, b)};
}

ad::Var CerpTable::forward(std::span<const Index> ids) {
  auto [e1, e2] = parts(ids);
  return ad::add(e1, e2);
}

Tensor CerpTable::lookup_rows(std::span<const Index> ids) const {
  check_ids(ids);
  const auto d = static_cast<std::size_t>(spec_.d);
  Tensor out = Tensor::uninitialized({ids.size(), d});
  auto entry = [&](const ad::Var& w, const ad::Var& s, const std::optional<Tensor>& mask, std::size_t idx) {
    return mask ? w.value()[idx] * (*mask)[idx] : str_forward(w.value()[idx], s.value()[0]);
  };
  for (std::size_t i = 0; i < ids.size(); ++i) {
    const auto [a, b] = indices(ids[i], buckets_);
    for (std::size_t j = 0; j < d; ++j) {
      out[i * d + j] = entry(w1_, s1_, mask1_, a * d + j) + entry(w2_, s2_, mask2_, b * d + j);
    }
  }
  return out;
}

std::vector<Parameter> CerpTable::parameters() {
  std::vector<Parameter> out{{"cerp.w1", w1_, 1}, {"cerp.w2", w2_, 1}};
  if (!frozen()) {
    out.push_back({"cerp.s1", s1_, 0});
    out.push_back({"cerp.s2", s2_, 0});
  }
  return out;
}

ad::Var CerpTable::l2_penalty() { return ad::add(ad::sum(ad::square(effective1())), ad::sum(ad::square(effective2()))); }

std::int64_t CerpTable::param_count() const {
  return static_cast<std::int64_t>(effective1_value().count_nonzero() + effective2_value().count_nonzero());
}

void CerpTable::freeze(Tensor mask1, Tensor mask2) {
  if (mask1.size() != w1_.value().size() || mask2.size() != w2_.value().size()) throw ShapeError("CerpTable::freeze: mask shapes");
  auto apply = [](ad::Var& w, Tensor& m) {
    m = m.reshaped(w.value().shape());
    for (auto& v : m.span()) v = v != 0 ? Real(1) : Real(0);
    Tensor& wv = w.mutable_value();
    for (std::size_t i = 0; i < wv.size(); ++i) wv[i] *= m[i];
  };
  apply(w1_, mask1);
  apply(w2_, mask2);
  mask1_ = std::move(mask1);
  mask2_ = std::move(mask2);
}

void CerpTable::save(Checkpoint& ck, const std::string& prefix) const {
  save_header(ck, prefix);
  ck.set(key(prefix, "buckets"), buckets_);
  ck.put_tensor(key(prefix, "w1"), w1_.value());
  ck.put_tensor(key(prefix, "w2"), w2_.value());
  ck.put_tensor(key(prefix, "s1"), s1_.value());
  ck.put_tensor(key(prefix, "s2"), s2_.value());
  if (mask1_) {
    ck.put_tensor(key(prefix, "mask1"), *mask1_);
    ck.put_tensor(key(prefix, "mask2"), *mask2_);
  }
}

std::unique_ptr<EmbeddingLayer> CerpTable::clone() const {
  auto t = std::make_unique<CerpTable>(spec_, buckets_, w1_.value(), w2_.value(), s1_.value(), s2_.value());
  t->mask1_ = mask1_;
  t->mask2_ = mask2_;
  return t;
}

// ---------------------------------------------------------------------------
// Supernet

Supernet::Supernet(EmbeddingSpec spec, FieldLayout layout, Tensor weights) : EmbeddingLayer(spec), layout_(std::move(layout)) {
  if (layout_.offsets.empty() || layout_.offsets.front() != 0 || layout_.total() != spec.n) {
    throw std::invalid_argument("Supernet: field layout must cover [0, n)");
  }
  if (weights.rows() != static_cast<std::size_t>(spec.n) || weights.cols() != static_cast<std::size_t>(spec.d)) {
    throw ShapeError("Supernet: weights " + shape_string(weights.shape()));
  }
  weights_ = ad::parameter(std::move(weights));
  dims_.assign(layout_.num_fields(), spec.d);
}

std::unique_ptr<Supernet> Supernet::random(EmbeddingSpec spec, FieldLayout layout, Real stddev, std::mt19937_64& rng) {
  spec.validate();
  return std::make_unique<Supernet>(spec, std::move(layout),
                                    normal_tensor({static_cast<std::size_t>(spec.n), static_cast<std::size_t>(spec.d)}, stddev, rng));
}

void Supernet::set_dims(std::vector<Index> dims) {
  if (dims.size() != layout_.num_fields()) throw std::invalid_argument("Supernet::set_dims: one width per field required");
  for (auto v : dims) {
    if (v < 1 || v > spec_.d) throw std::invalid_argument("Supernet::set_dims: width " + std::to_string(v) + " outside [1, d]");
  }
  dims_ = std::move(dims);
}

void Supernet::set_row_mask(std::vector<std::uint8_t> keep) {
  if (!keep.empty() && keep.size() != static_cast<std::size_t>(spec_.n)) throw std::invalid_argument("Supernet::set_row_mask: one flag per row required");
  keep_ = std::move(keep);
}

Real Supernet::mask_at(Index id, Index col) const {
  if (!keep_.empty() && keep_[id] == 0) return 0;
  return col < dims_[layout_.field_of(id)] ? Real(1) : Real(0);
}

Tensor Supernet::dense_mask() const {
  const auto d = static_cast<std::size_t>(spec_.d);
  Tensor m({static_cast<std::size_t>(spec_.n), d}, 0);
  for (Index i = 0; i < spec_.n; ++i)
    for (Index j = 0; j < spec_.d; ++j) m[i * d + j] = mask_at(i, j);
  return m;
}

ad::Var Supernet::forward(std::span<const Index> ids) {
  check_ids(ids);
  const auto d = static_cast<std::size_t>(spec_.d);
  Tensor m({ids.size(), d}, 0);
  for (std::size_t b = 0; b < ids.size(); ++b)
    for (Index j = 0; j < spec_.d; ++j) m[b * d + j] = mask_at(ids[b], j);
  return ad::mul(ad::gather_rows(weights_, ids), ad::constant(std::move(m)));
}

Tensor Supernet::lookup_rows(std::span<const Index> ids) const {
  check_ids(ids);
  const auto d = static_cast<std::size_t>(spec_.d);
  Tensor out = Tensor::uninitialized({ids.size(), d});
  for (std::size_t b = 0; b < ids.size(); ++b)
    for (Index j = 0; j < spec_.d; ++j) out[b * d + j] = weights_.value()[ids[b] * d + j] * mask_at(ids[b], j);
  return out;
}

std::vector<Parameter> Supernet::parameters() { return {{"supernet.weights", weights_, 1}}; }

std::int64_t Supernet::param_count() const {
  std::int64_t total = 0;
  for (std::size_t f = 0; f < layout_.num_fields(); ++f) {
    std::int64_t rows = 0;
    for (Index i = layout_.offsets[f]; i < layout_.offsets[f + 1]; ++i) rows += keep_.empty() || keep_[i] ? 1 : 0;
    total += rows * dims_[f];
  }
  return total;
}

void Supernet::save(Checkpoint& ck, const std::string& prefix) const {
  save_header(ck, prefix);
  ck.put_ints(key(prefix, "offsets"), to_ints(layout_.offsets));
  ck.put_ints(key(prefix, "dims"), to_ints(dims_));
  ck.put_ints(key(prefix, "keep"), {keep_.begin(), keep_.end()});
  ck.put_tensor(key(prefix, "weights"), weights_.value());
}

std::unique_ptr<EmbeddingLayer> Supernet::clone() const {
  auto t = std::make_unique<Supernet>(spec_, layout_, weights_.value());
  t->dims_ = dims_;
  t->keep_ = keep_;
  return t;
}

// ---------------------------------------------------------------------------
// Budget solvers

namespace {

double budget_params(const EmbeddingSpec& spec, double target) {
  if (!(target >= 0 && target < 1)) throw std::invalid_argument("sparsity target must lie in [0, 1)");
  return (1.0 - target) * static_cast<double>(spec.full_params());
}

constexpr double kCompositionalTolerance = 0.02;

}  // namespace

Index solve_qr_p(const EmbeddingSpec& spec, double target) {
  spec.validate();
  const double budget_rows = budget_params(spec, target) / static_cast<double>(spec.d);
  Index best_p = 1, min_rows = spec.n + 1;
  double best_gap = 1e300;
  for (Index p = 1; p <= spec.n; ++p) {
    const Index rows = p + (spec.n + p - 1) / p;
    min_rows = std::min(min_rows, rows);
    const double gap = std::abs(static_cast<double>(rows) - budget_rows);
    if (gap <= best_gap) {
      best_gap = gap;
      best_p = p;
    }
  }
  const double achieved = 1.0 - static_cast<double>(best_p + (spec.n + best_p - 1) / best_p) / static_cast<double>(spec.n);
  if (std::abs(achieved - target) > kCompositionalTolerance) {
    throw UnreachableSparsity("qr", target, 1.0 - static_cast<double>(spec.n + 1) / static_cast<double>(spec.n),
                              1.0 - static_cast<double>(min_rows) / static_cast<double>(spec.n));
  }
  return best_p;
}

TtPlan solve_tt(const EmbeddingSpec& spec, double target, std::size_t cores) {
  spec.validate();
  const double budget = budget_params(spec, target);
  TtPlan plan;
  plan.shape.row_factors = balanced_cover(spec.n, cores);
  plan.shape.col_factors = balanced_factorization(spec.d, cores);
  auto with_rank = [&](Index r) {
    TtShape s = plan.shape;
    s.ranks.assign(cores + 1, r);
    s.ranks.front() = s.ranks.back() = 1;
    return s;
  };
  const double full = static_cast<double>(spec.full_params());
  const Index max_cache = spec.n / 10;
  const std::int64_t min_params = with_rank(1).core_params();
  if (static_cast<double>(min_params) > budget) {
    throw UnreachableSparsity("tt", target, 1.0 - (static_cast<double>(with_rank(spec.d).core_params() + max_cache * spec.d)) / full,
                              1.0 - static_cast<double>(min_params) / full);
  }
  Index r = 1;
  while (static_cast<double>(with_rank(r + 1).core_params()) <= budget && r < 4096) ++r;
  plan.shape = with_rank(r);
  const double residual = budget - static_cast<double>(plan.shape.core_params());
  plan.cache_rows = std::min<Index>(max_cache, static_cast<Index>(residual / static_cast<double>(spec.d)));
  const double achieved = 1.0 - static_cast<double>(plan.shape.core_params() + plan.cache_rows * spec.d) / full;
  if (std::abs(achieved - target) > kCompositionalTolerance) {
    throw UnreachableSparsity("tt", target, achieved, 1.0 - static_cast<double>(min_params) / full);
  }
  return plan;
}

Index solve_dhe_width(const EmbeddingSpec& spec, double target, std::size_t k) {
  spec.validate();
  const double budget = budget_params(spec, target);
  const auto per_unit = static_cast<double>(static_cast<Index>(k) + 1 + spec.d);
  // Nearest width; on small tables one hidden unit is a coarse step.
  const auto w = std::max<Index>(1, std::llround((budget - static_cast<double>(spec.d)) / per_unit));
  const double full = static_cast<double>(spec.full_params());
  const double hi = 1.0 - static_cast<double>(DheEncoder::params_for(k, 1, spec.d)) / full;
  const double achieved = 1.0 - static_cast<double>(DheEncoder::params_for(k, w, spec.d)) / full;
  if (std::abs(achieved - target) > kCompositionalTolerance) throw UnreachableSparsity("dhe", target, 0, hi);
  return w;
}

Index solve_cerp_buckets(const EmbeddingSpec& spec, double target) {
  spec.validate();
  budget_params(spec, target);
  const auto floor_rows = static_cast<Index>(std::ceil(std::sqrt(static_cast<double>(spec.n))));
  auto b = static_cast<Index>(std::llround((1.0 - target) * static_cast<double>(spec.n)));
  b = std::clamp<Index>(b, floor_rows, spec.n);
  while (b * b < spec.n) ++b;
  return b;
}

std::unique_ptr<EmbeddingLayer> make_layer(LayerKind kind, const EmbeddingSpec& spec, const LayerOptions& opts,
                                           std::mt19937_64& rng) {
  spec.validate();
  switch (kind) {
    case LayerKind::Full: return FullTable::random(spec, opts.stddev, rng);
    case LayerKind::Qr: return QrTable::random(spec, solve_qr_p(spec, opts.target), opts.stddev, rng);
    case LayerKind::Tt: {
      auto plan = solve_tt(spec, opts.target);
      return TtTable::random(spec, plan.shape, plan.cache_rows, opts.stddev, rng);
    }
    case LayerKind::Dhe: {
      const std::size_t k = opts.dhe_k ? opts.dhe_k : static_cast<std::size_t>(2 * spec.d);
      return DheEncoder::random(spec, k, solve_dhe_width(spec, opts.target, k), opts.hash_seed, opts.stddev, rng);
    }
    case LayerKind::Str: return StrTable::random(spec, opts.stddev, opts.str_init, opts.str_per_row, rng);
    case LayerKind::Cerp:
      return CerpTable::random(spec, solve_cerp_buckets(spec, opts.target), opts.stddev, opts.str_init, rng);
    case LayerKind::Supernet:
      return Supernet::random(spec, opts.layout.value_or(FieldLayout::from_sizes({spec.n})), opts.stddev, rng);
    case LayerKind::Csr:
      throw std::invalid_argument("csr tables are produced by pruning a trained table, not initialized directly");
  }
  throw std::invalid_argument("unknown layer kind");
}

}  // namespace lers
