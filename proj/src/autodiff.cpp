// Copyright 2026 The LERS Kit Authors
// SPDX-License-Identifier: Apache-2.0

#include "lers/autodiff.hpp"

#include <algorithm>
#include <cmath>
#include <string>
#include <unordered_set>

namespace lers::ad {

namespace {

[[noreturn]] void shape_fail(const char* op, const Tensor& a, const Tensor& b) {
  throw ShapeError(std::string(op) + ": incompatible shapes " + shape_string(a.shape()) + " and " +
                   shape_string(b.shape()));
}

void require_rank2(const char* op, const Tensor& t) {
  if (t.rank() != 2) throw ShapeError(std::string(op) + ": expected rank-2 operand, got " + shape_string(t.shape()));
}

inline std::size_t bidx(std::size_t i, std::size_t j, std::size_t r, std::size_t c) {
  return (r == 1 ? 0 : i) * c + (c == 1 ? 0 : j);
}

struct Broadcast {
  std::size_t rows, cols;
};

Broadcast broadcast(const char* op, const Tensor& a, const Tensor& b) {
  require_rank2(op, a);
  require_rank2(op, b);
  auto dim = [&](std::size_t x, std::size_t y) {
    if (x == y || y == 1) return x;
    if (x == 1) return y;
    shape_fail(op, a, b);
  };
  return {dim(a.rows(), b.rows()), dim(a.cols(), b.cols())};
}

// Elementwise binary op with broadcasting. `da`/`db` return the local partials.
template <typename F, typename DA, typename DB>
Var binary(const char* op, const Var& a, const Var& b, F f, DA da, DB db) {
  const Tensor& A = a.value();
  const Tensor& B = b.value();
  const auto [R, C] = broadcast(op, A, B);
  const std::size_t ar = A.rows(), ac = A.cols(), br = B.rows(), bc = B.cols();
  Tensor out = Tensor::uninitialized({R, C});
  for (std::size_t i = 0; i < R; ++i) {
    for (std::size_t j = 0; j < C; ++j) out[i * C + j] = f(A[bidx(i, j, ar, ac)], B[bidx(i, j, br, bc)]);
  }
  return make_op(op, std::move(out), {a, b}, [a, b, R, C, ar, ac, br, bc, da, db](const Tensor& g, std::span<Tensor* const> gi) {
    const Tensor& A = a.value();
    const Tensor& B = b.value();
    for (std::size_t i = 0; i < R; ++i) {
      for (std::size_t j = 0; j < C; ++j) {
        const std::size_t ia = bidx(i, j, ar, ac), ib = bidx(i, j, br, bc);
        const Real go = g[i * C + j];
        if (gi[0]) (*gi[0])[ia] += go * da(A[ia], B[ib]);
        if (gi[1]) (*gi[1])[ib] += go * db(A[ia], B[ib]);
      }
    }
  });
}

// Elementwise unary op; `d` receives (x, y) and returns dy/dx.
template <typename F, typename D>
Var unary(const char* op, const Var& a, F f, D d) {
  const Tensor& A = a.value();
  Tensor out = Tensor::uninitialized(A.shape());
  for (std::size_t i = 0; i < A.size(); ++i) out[i] = f(A[i]);
  return make_op(op, std::move(out), {a}, [a, d](const Tensor& g, std::span<Tensor* const> gi) {
    const Tensor& A = a.value();
    for (std::size_t i = 0; i < A.size(); ++i) (*gi[0])[i] += g[i] * d(A[i]);
  });
}

inline Real stable_sigmoid(Real x) {
  if (x >= 0) return 1 / (1 + std::exp(-x));
  const Real e = std::exp(x);
  return e / (1 + e);
}

inline Real stable_softplus(Real x) { return x > 0 ? x + std::log1p(std::exp(-x)) : std::log1p(std::exp(x)); }

}  // namespace

Var constant(Tensor value) {
  auto n = std::make_shared<Node>();
  n->value = std::move(value);
  n->op = "constant";
  return Var(std::move(n));
}

Var parameter(Tensor value) {
  auto n = std::make_shared<Node>();
  n->value = std::move(value);
  n->requires_grad = true;
  n->op = "parameter";
  return Var(std::move(n));
}

Var make_op(const char* name, Tensor value, std::vector<Var> parents, BackwardFn backward_fn) {
  auto n = std::make_shared<Node>();
  n->value = std::move(value);
  n->op = name;
  n->requires_grad = std::any_of(parents.begin(), parents.end(), [](const Var& p) { return p.requires_grad(); });
  if (n->requires_grad) {
    n->parents.reserve(parents.size());
    for (auto& p : parents) n->parents.push_back(p.node_);
    n->backward = std::move(backward_fn);
  }
  return Var(std::move(n));
}

void backward(const Var& loss) {
  if (loss.value().size() != 1) {
    throw ShapeError(std::string("backward: loss from op '") + loss.op() + "' has shape " +
                     shape_string(loss.shape()) + ", expected a scalar");
  }
  Node* root = loss.node();
  if (!root->requires_grad) return;

  std::vector<Node*> order;
  std::unordered_set<Node*> seen;
  std::vector<std::pair<Node*, std::size_t>> stack{{root, 0}};
  seen.insert(root);
  while (!stack.empty()) {
    auto& [node, next] = stack.back();
    if (next < node->parents.size()) {
      Node* p = node->parents[next++].get();
      if (p->requires_grad && seen.insert(p).second) stack.emplace_back(p, 0);
    } else {
      order.push_back(node);
      stack.pop_back();
    }
  }

  if (root->grad.empty()) root->grad = Tensor(root->value.shape(), 0);
  root->grad[0] += 1;
  std::vector<Tensor*> grads_in;
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    Node* node = *it;
    if (!node->backward || node->grad.empty()) continue;
    grads_in.assign(node->parents.size(), nullptr);
    for (std::size_t i = 0; i < node->parents.size(); ++i) {
      Node* p = node->parents[i].get();
      if (!p->requires_grad) continue;
      if (p->grad.empty()) p->grad = Tensor(p->value.shape(), 0);
      grads_in[i] = &p->grad;
    }
    node->backward(node->grad, grads_in);
  }
}

Var add(const Var& a, const Var& b) {
  return binary("add", a, b, [](Real x, Real y) { return x + y; }, [](Real, Real) { return Real(1); },
                [](Real, Real) { return Real(1); });
}

Var sub(const Var& a, const Var& b) {
  return binary("sub", a, b, [](Real x, Real y) { return x - y; }, [](Real, Real) { return Real(1); },
                [](Real, Real) { return Real(-1); });
}

Var mul(const Var& a, const Var& b) {
  return binary("mul", a, b, [](Real x, Real y) { return x * y; }, [](Real, Real y) { return y; },
                [](Real x, Real) { return x; });
}

Var div(const Var& a, const Var& b) {
  return binary("div", a, b, [](Real x, Real y) { return x / y; }, [](Real, Real y) { return 1 / y; },
                [](Real x, Real y) { return -x / (y * y); });
}

Var neg(const Var& a) { return scale(a, -1); }

Var scale(const Var& a, Real factor) {
  return unary("scale", a, [factor](Real x) { return factor * x; }, [factor](Real) { return factor; });
}

Var add_scalar(const Var& a, Real c) {
  return unary("add_scalar", a, [c](Real x) { return x + c; }, [](Real) { return Real(1); });
}

namespace {

// out[n, m] += a[n, k] * b[k, m]
void gemm_acc(const Real* __restrict a, const Real* __restrict b, Real* __restrict out, std::size_t n,
              std::size_t k, std::size_t m) {
  for (std::size_t i = 0; i < n; ++i) {
    Real* __restrict o = out + i * m;
    for (std::size_t p = 0; p < k; ++p) {
      const Real x = a[i * k + p];
      if (x == 0) continue;
      const Real* __restrict row = b + p * m;
      for (std::size_t j = 0; j < m; ++j) o[j] += x * row[j];
    }
  }
}

}  // namespace

Var matmul(const Var& a, const Var& b) {
  const Tensor& A = a.value();
  const Tensor& B = b.value();
  require_rank2("matmul", A);
  require_rank2("matmul", B);
  if (A.cols() != B.rows()) shape_fail("matmul", A, B);
  const std::size_t n = A.rows(), k = A.cols(), m = B.cols();
  Tensor out({n, m}, 0);
  gemm_acc(A.data(), B.data(), out.data(), n, k, m);
  return make_op("matmul", std::move(out), {a, b}, [a, b, n, k, m](const Tensor& g, std::span<Tensor* const> gi) {
    const Tensor& A = a.value();
    const Tensor& B = b.value();
    if (gi[0]) {
      // dA = g * B^T
      Tensor bt = Tensor::uninitialized({m, k});
      for (std::size_t p = 0; p < k; ++p)
        for (std::size_t j = 0; j < m; ++j) bt[j * k + p] = B[p * m + j];
      gemm_acc(g.data(), bt.data(), gi[0]->data(), n, m, k);
    }
    if (gi[1]) {
      // dB = A^T * g
      for (std::size_t i = 0; i < n; ++i) {
        const Real* __restrict grow = g.data() + i * m;
        for (std::size_t p = 0; p < k; ++p) {
          const Real x = A[i * k + p];
          if (x == 0) continue;
          Real* __restrict dst = gi[1]->data() + p * m;
          for (std::size_t j = 0; j < m; ++j) dst[j] += x * grow[j];
        }
      }
    }
  });
}

Var transpose(const Var& a) {
  const Tensor& A = a.value();
  require_rank2("transpose", A);
  const std::size_t r = A.rows(), c = A.cols();
  Tensor out = Tensor::uninitialized({c, r});
  for (std::size_t i = 0; i < r; ++i)
    for (std::size_t j = 0; j < c; ++j) out[j * r + i] = A[i * c + j];
  return make_op("transpose", std::move(out), {a}, [r, c](const Tensor& g, std::span<Tensor* const> gi) {
    for (std::size_t i = 0; i < r; ++i)
      for (std::size_t j = 0; j < c; ++j) (*gi[0])[i * c + j] += g[j * r + i];
  });
}

Var sigmoid(const Var& a) {
  return unary("sigmoid", a, stable_sigmoid, [](Real x) {
    const Real s = stable_sigmoid(x);
    return s * (1 - s);
  });
}

Var tanh(const Var& a) {
  return unary("tanh", a, [](Real x) { return std::tanh(x); }, [](Real x) {
    const Real t = std::tanh(x);
    return 1 - t * t;
  });
}

Var relu(const Var& a) {
  return unary("relu", a, [](Real x) { return x > 0 ? x : Real(0); }, [](Real x) { return x > 0 ? Real(1) : Real(0); });
}

Var log(const Var& a) {
  for (std::size_t i = 0; i < a.value().size(); ++i) {
    if (!(a.value()[i] > 0)) throw NonFiniteError("log: non-positive input");
  }
  return unary("log", a, [](Real x) { return std::log(x); }, [](Real x) { return 1 / x; });
}

Var exp(const Var& a) {
  return unary("exp", a, [](Real x) { return std::exp(x); }, [](Real x) { return std::exp(x); });
}

Var softplus(const Var& a) { return unary("softplus", a, stable_softplus, stable_sigmoid); }

Var abs(const Var& a) {
  return unary("abs", a, [](Real x) { return std::abs(x); },
               [](Real x) { return x > 0 ? Real(1) : (x < 0 ? Real(-1) : Real(0)); });
}

Var square(const Var& a) {
  return unary("square", a, [](Real x) { return x * x; }, [](Real x) { return 2 * x; });
}

Var clamp(const Var& a, Real lo, Real hi) {
  return unary("clamp", a, [lo, hi](Real x) { return std::clamp(x, lo, hi); },
               [lo, hi](Real x) { return (x >= lo && x <= hi) ? Real(1) : Real(0); });
}

Var sum(const Var& a) {
  const Tensor& A = a.value();
  Real s = 0;
  for (std::size_t i = 0; i < A.size(); ++i) s += A[i];
  Tensor out = Tensor::uninitialized({1, 1});
  out[0] = s;
  return make_op("sum", std::move(out), {a}, [](const Tensor& g, std::span<Tensor* const> gi) {
    for (auto& v : gi[0]->span()) v += g[0];
  });
}

Var mean(const Var& a) {
  const auto n = static_cast<Real>(a.value().size());
  if (n == 0) throw ShapeError("mean: empty operand");
  return scale(sum(a), 1 / n);
}

Var sum_rows(const Var& a) {
  const Tensor& A = a.value();
  require_rank2("sum_rows", A);
  const std::size_t r = A.rows(), c = A.cols();
  Tensor out({r, 1}, 0);
  for (std::size_t i = 0; i < r; ++i)
    for (std::size_t j = 0; j < c; ++j) out[i] += A[i * c + j];
  return make_op("sum_rows", std::move(out), {a}, [r, c](const Tensor& g, std::span<Tensor* const> gi) {
    for (std::size_t i = 0; i < r; ++i)
      for (std::size_t j = 0; j < c; ++j) (*gi[0])[i * c + j] += g[i];
  });
}

Var sum_cols(const Var& a) {
  const Tensor& A = a.value();
  require_rank2("sum_cols", A);
  const std::size_t r = A.rows(), c = A.cols();
  Tensor out({1, c}, 0);
  for (std::size_t i = 0; i < r; ++i)
    for (std::size_t j = 0; j < c; ++j) out[j] += A[i * c + j];
  return make_op("sum_cols", std::move(out), {a}, [r, c](const Tensor& g, std::span<Tensor* const> gi) {
    for (std::size_t i = 0; i < r; ++i)
      for (std::size_t j = 0; j < c; ++j) (*gi[0])[i * c + j] += g[j];
  });
}

Var dot_rows(const Var& a, const Var& b) {
  if (a.shape() != b.shape()) shape_fail("dot_rows", a.value(), b.value());
  return sum_rows(mul(a, b));
}

Var logsumexp_rows(const Var& a) {
  const Tensor& A = a.value();
  require_rank2("logsumexp_rows", A);
  const std::size_t r = A.rows(), c = A.cols();
  if (c == 0) throw ShapeError("logsumexp_rows: zero columns");
  Tensor out = Tensor::uninitialized({r, 1});
  for (std::size_t i = 0; i < r; ++i) {
    const Real* row = A.data() + i * c;
    const Real m = *std::max_element(row, row + c);
    Real s = 0;
    for (std::size_t j = 0; j < c; ++j) s += std::exp(row[j] - m);
    out[i] = m + std::log(s);
  }
  Tensor lse = out;
  return make_op("logsumexp_rows", std::move(out), {a}, [a, lse, r, c](const Tensor& g, std::span<Tensor* const> gi) {
    const Tensor& A = a.value();
    for (std::size_t i = 0; i < r; ++i)
      for (std::size_t j = 0; j < c; ++j) (*gi[0])[i * c + j] += g[i] * std::exp(A[i * c + j] - lse[i]);
  });
}

Var l2_normalize_rows(const Var& a, Real eps) {
  const Tensor& A = a.value();
  require_rank2("l2_normalize_rows", A);
  const std::size_t r = A.rows(), c = A.cols();
  Tensor out = Tensor::uninitialized({r, c});
  Tensor norms = Tensor::uninitialized({r, 1});
  for (std::size_t i = 0; i < r; ++i) {
    Real s = 0;
    for (std::size_t j = 0; j < c; ++j) s += A[i * c + j] * A[i * c + j];
    norms[i] = std::max(std::sqrt(s), eps);
    for (std::size_t j = 0; j < c; ++j) out[i * c + j] = A[i * c + j] / norms[i];
  }
  Tensor y = out;
  return make_op("l2_normalize_rows", std::move(out), {a}, [y, norms, r, c](const Tensor& g, std::span<Tensor* const> gi) {
    for (std::size_t i = 0; i < r; ++i) {
      Real yg = 0;
      for (std::size_t j = 0; j < c; ++j) yg += y[i * c + j] * g[i * c + j];
      for (std::size_t j = 0; j < c; ++j) (*gi[0])[i * c + j] += (g[i * c + j] - y[i * c + j] * yg) / norms[i];
    }
  });
}

Var concat_cols(const std::vector<Var>& parts) {
  if (parts.empty()) throw ShapeError("concat_cols: no operands");
  const std::size_t r = parts[0].rows();
  std::size_t total = 0;
  std::vector<std::size_t> widths;
  for (const auto& p : parts) {
    require_rank2("concat_cols", p.value());
    if (p.rows() != r) shape_fail("concat_cols", parts[0].value(), p.value());
    widths.push_back(p.cols());
    total += p.cols();
  }
  Tensor out = Tensor::uninitialized({r, total});
  std::size_t off = 0;
  for (std::size_t k = 0; k < parts.size(); ++k) {
    const Tensor& P = parts[k].value();
    for (std::size_t i = 0; i < r; ++i)
      std::copy_n(P.data() + i * widths[k], widths[k], out.data() + i * total + off);
    off += widths[k];
  }
  return make_op("concat_cols", std::move(out), parts, [widths, r, total](const Tensor& g, std::span<Tensor* const> gi) {
    std::size_t off = 0;
    for (std::size_t k = 0; k < widths.size(); ++k) {
      if (gi[k]) {
        for (std::size_t i = 0; i < r; ++i)
          for (std::size_t j = 0; j < widths[k]; ++j) (*gi[k])[i * widths[k] + j] += g[i * total + off + j];
      }
      off += widths[k];
    }
  });
}

Var concat_rows(const std::vector<Var>& parts) {
  if (parts.empty()) throw ShapeError("concat_rows: no operands");
  const std::size_t c = parts[0].cols();
  std::size_t total = 0;
  std::vector<std::size_t> sizes;
  for (const auto& p : parts) {
    require_rank2("concat_rows", p.value());
    if (p.cols() != c) shape_fail("concat_rows", parts[0].value(), p.value());
    sizes.push_back(p.value().size());
    total += p.rows();
  }
  Tensor out = Tensor::uninitialized({total, c});
  std::size_t off = 0;
  for (const auto& p : parts) {
    std::copy_n(p.value().data(), p.value().size(), out.data() + off);
    off += p.value().size();
  }
  return make_op("concat_rows", std::move(out), parts, [sizes](const Tensor& g, std::span<Tensor* const> gi) {
    std::size_t off = 0;
    for (std::size_t k = 0; k < sizes.size(); ++k) {
      if (gi[k]) {
        for (std::size_t i = 0; i < sizes[k]; ++i) (*gi[k])[i] += g[off + i];
      }
      off += sizes[k];
    }
  });
}

Var slice_cols(const Var& a, std::size_t begin, std::size_t end) {
  const Tensor& A = a.value();
  require_rank2("slice_cols", A);
  const std::size_t r = A.rows(), c = A.cols();
  if (begin > end || end > c) throw ShapeError("slice_cols: range out of bounds for " + shape_string(A.shape()));
  const std::size_t w = end - begin;
  Tensor out = Tensor::uninitialized({r, w});
  for (std::size_t i = 0; i < r; ++i) std::copy_n(A.data() + i * c + begin, w, out.data() + i * w);
  return make_op("slice_cols", std::move(out), {a}, [r, c, w, begin](const Tensor& g, std::span<Tensor* const> gi) {
    for (std::size_t i = 0; i < r; ++i)
      for (std::size_t j = 0; j < w; ++j) (*gi[0])[i * c + begin + j] += g[i * w + j];
  });
}

Var reshape(const Var& a, std::size_t rows, std::size_t cols) {
  const Tensor& A = a.value();
  if (rows * cols != A.size()) {
    throw ShapeError("reshape: cannot view " + shape_string(A.shape()) + " as [" + std::to_string(rows) + "," +
                     std::to_string(cols) + "]");
  }
  return make_op("reshape", A.reshaped({rows, cols}), {a}, [](const Tensor& g, std::span<Tensor* const> gi) {
    Real* dst = gi[0]->data();
    for (std::size_t i = 0; i < g.size(); ++i) dst[i] += g[i];
  });
}

Var gather_rows(const Var& table, std::span<const Index> ids) {
  const Tensor& T = table.value();
  require_rank2("gather_rows", T);
  const std::size_t n = T.rows(), d = T.cols();
  std::vector<Index> idx(ids.begin(), ids.end());
  Tensor out = Tensor::uninitialized({idx.size(), d});
  for (std::size_t i = 0; i < idx.size(); ++i) {
    if (idx[i] < 0 || static_cast<std::size_t>(idx[i]) >= n) {
      throw std::out_of_range("gather_rows: id " + std::to_string(idx[i]) + " outside [0," + std::to_string(n) + ")");
    }
    std::copy_n(T.data() + idx[i] * d, d, out.data() + i * d);
  }
  return make_op("gather_rows", std::move(out), {table}, [idx = std::move(idx), d](const Tensor& g, std::span<Tensor* const> gi) {
    for (std::size_t i = 0; i < idx.size(); ++i) {
      Real* dst = gi[0]->data() + idx[i] * d;
      for (std::size_t j = 0; j < d; ++j) dst[j] += g[i * d + j];
    }
  });
}

Var spmm(const SparseMatrix& m, const Var& dense) {
  Tensor out = m.multiply(dense.value());
  const std::size_t d = dense.cols();
  const SparseMatrix* mp = &m;
  return make_op("spmm", std::move(out), {dense}, [mp, d](const Tensor& g, std::span<Tensor* const> gi) {
    for (std::size_t r = 0; r < mp->rows; ++r) {
      const Real* grow = g.data() + r * d;
      for (auto k = mp->row_ptr[r]; k < mp->row_ptr[r + 1]; ++k) {
        Real* dst = gi[0]->data() + mp->col_idx[k] * d;
        const Real w = mp->values[k];
        for (std::size_t j = 0; j < d; ++j) dst[j] += w * grow[j];
      }
    }
  });
}

Var soft_threshold(const Var& w, const Var& s) {
  const Tensor& W = w.value();
  const Tensor& S = s.value();
  require_rank2("soft_threshold", W);
  const std::size_t r = W.rows(), c = W.cols();
  const bool per_row = S.size() != 1;
  if (per_row && (S.rows() != r || S.cols() != 1)) shape_fail("soft_threshold", W, S);
  Tensor out = Tensor::uninitialized({r, c});
  for (std::size_t i = 0; i < r; ++i) {
    const Real th = stable_sigmoid(S[per_row ? i : 0]);
    for (std::size_t j = 0; j < c; ++j) {
      const Real x = W[i * c + j];
      const Real mag = std::abs(x) - th;
      out[i * c + j] = mag > 0 ? std::copysign(mag, x) : Real(0);
    }
  }
  return make_op("soft_threshold", std::move(out), {w, s}, [w, s, r, c, per_row](const Tensor& g, std::span<Tensor* const> gi) {
    const Tensor& W = w.value();
    const Tensor& S = s.value();
    for (std::size_t i = 0; i < r; ++i) {
      const Real th = stable_sigmoid(S[per_row ? i : 0]);
      const Real dth = th * (1 - th);
      for (std::size_t j = 0; j < c; ++j) {
        const Real x = W[i * c + j];
        if (std::abs(x) <= th) continue;
        const Real go = g[i * c + j];
        if (gi[0]) (*gi[0])[i * c + j] += go;
        if (gi[1]) (*gi[1])[per_row ? i : 0] += go * (x > 0 ? -dth : dth);
      }
    }
  });
}

Var dropout(const Var& a, Real rate, std::mt19937_64& rng, bool training) {
  if (!training || rate <= 0) return a;
  Tensor mask(a.shape(), 0);
  if (rate < 1) {
    std::uniform_real_distribution<Real> u(0, 1);
    const Real keep = 1 / (1 - rate);
    for (auto& v : mask.span()) v = u(rng) >= rate ? keep : Real(0);
  }
  return mul(a, constant(std::move(mask)));
}

Tensor finite_diff_grad(const std::function<Real(const Tensor&)>& f, const Tensor& x, Real h) {
  if (!(h > 0)) throw std::invalid_argument("finite_diff_grad: step must be positive");
  Tensor grad(x.shape(), 0);
  Tensor probe = x;
  for (std::size_t i = 0; i < x.size(); ++i) {
    const Real orig = probe[i];
    probe[i] = orig + h;
    const Real up = f(probe);
    probe[i] = orig - h;
    const Real down = f(probe);
    probe[i] = orig;
    grad[i] = (up - down) / (2 * h);
  }
  return grad;
}

Real max_relative_error(const Tensor& a, const Tensor& b, Real floor) {
  if (a.size() != b.size()) throw ShapeError("max_relative_error: size mismatch");
  Real worst = 0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    const Real denom = std::max({std::abs(a[i]), std::abs(b[i]), floor});
    worst = std::max(worst, std::abs(a[i] - b[i]) / denom);
  }
  return worst;
}

ForwardBackwardResult forward_backward(const Record& record, std::span<const Tensor> inputs) {
  std::vector<Var> leaves;
  leaves.reserve(inputs.size());
  for (const auto& t : inputs) {
    check_finite(t, "forward_backward input");
    leaves.push_back(parameter(t));
  }
  std::vector<Var> outputs = record(leaves);
  if (outputs.empty()) throw std::invalid_argument("forward_backward: record produced no outputs");
  backward(outputs[0]);
  ForwardBackwardResult result;
  for (const auto& o : outputs) result.outputs.push_back(o.value());
  for (const auto& l : leaves) result.grads.push_back(l.has_grad() ? l.grad() : Tensor(l.shape(), 0));
  return result;
}

}  // namespace lers::ad
