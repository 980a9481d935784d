// Copyright 2026 The LERS Kit Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <functional>
#include <memory>
#include <random>
#include <span>
#include <vector>

#include "lers/sparse.hpp"
#include "lers/tensor.hpp"

/// Reverse-mode automatic differentiation over rank-2 tensors.
///
/// A forward pass builds a DAG of Nodes; backward() walks it in reverse
/// topological order and accumulates gradients into every node that requires
/// one. Leaf parameters keep their gradient across calls until zero_grad().
/// The primitive set is exactly what the recommenders in this kit need.
namespace lers::ad {

// grads_in[i] is null when parent i needs no gradient.
using BackwardFn = std::function<void(const Tensor& grad_out, std::span<Tensor* const> grads_in)>;

struct Node {
  Tensor value;
  Tensor grad;
  bool requires_grad = false;
  const char* op = "leaf";
  std::vector<std::shared_ptr<Node>> parents;
  BackwardFn backward;
};

class Var {
 public:
  Var() = default;
  explicit Var(std::shared_ptr<Node> node) : node_(std::move(node)) {}

  const Tensor& value() const { return node_->value; }
  Tensor& mutable_value() { return node_->value; }
  const Tensor& grad() const { return node_->grad; }
  Tensor& mutable_grad() { return node_->grad; }
  bool has_grad() const { return !node_->grad.empty(); }
  void zero_grad() { node_->grad = Tensor(); }
  bool requires_grad() const { return node_->requires_grad; }
  const char* op() const { return node_->op; }
  const Shape& shape() const { return node_->value.shape(); }
  std::size_t rows() const { return node_->value.rows(); }
  std::size_t cols() const { return node_->value.cols(); }
  Node* node() const { return node_.get(); }
  explicit operator bool() const { return static_cast<bool>(node_); }

 private:
  friend Var make_op(const char*, Tensor, std::vector<Var>, BackwardFn);
  std::shared_ptr<Node> node_;
};

Var constant(Tensor value);
Var parameter(Tensor value);

/// Registers a custom primitive. The result requires a gradient iff any parent does.
Var make_op(const char* name, Tensor value, std::vector<Var> parents, BackwardFn backward);

/// Backpropagates from a 1x1 loss. Throws ShapeError for non-scalar losses.
void backward(const Var& loss);

// Elementwise binary ops broadcast [r,c] against [r|1, c|1].
Var add(const Var& a, const Var& b);
Var sub(const Var& a, const Var& b);
Var mul(const Var& a, const Var& b);
Var div(const Var& a, const Var& b);
Var neg(const Var& a);
Var scale(const Var& a, Real factor);
Var add_scalar(const Var& a, Real c);

Var matmul(const Var& a, const Var& b);
Var transpose(const Var& a);

Var sigmoid(const Var& a);
Var tanh(const Var& a);
Var relu(const Var& a);
Var log(const Var& a);
Var exp(const Var& a);
Var softplus(const Var& a);
Var abs(const Var& a);
Var square(const Var& a);
// Gradient is zero outside [lo, hi].
Var clamp(const Var& a, Real lo, Real hi);

Var sum(const Var& a);
Var mean(const Var& a);
Var sum_rows(const Var& a);  // [r,c] -> [r,1]
Var sum_cols(const Var& a);  // [r,c] -> [1,c]
Var dot_rows(const Var& a, const Var& b);  // rowwise <a_i, b_i> -> [r,1]
Var logsumexp_rows(const Var& a);           // [r,c] -> [r,1]
Var l2_normalize_rows(const Var& a, Real eps = 1e-12);

Var concat_cols(const std::vector<Var>& parts);
Var concat_rows(const std::vector<Var>& parts);
Var slice_cols(const Var& a, std::size_t begin, std::size_t end);
/// Same row-major values under a new [rows, cols] shape.
Var reshape(const Var& a, std::size_t rows, std::size_t cols);
Var gather_rows(const Var& table, std::span<const Index> ids);
Var spmm(const SparseMatrix& m, const Var& dense);

/// Soft-threshold reparameterization: sign(w) * max(|w| - sigmoid(s), 0).
/// `s` is [1,1] (shared) or [rows,1] (per row).
Var soft_threshold(const Var& w, const Var& s);

/// Inverted dropout on activations; identity when !training or rate == 0.
Var dropout(const Var& a, Real rate, std::mt19937_64& rng, bool training);

/// Central finite-difference gradient of a scalar function.
Tensor finite_diff_grad(const std::function<Real(const Tensor&)>& f, const Tensor& x, Real h = 1e-5);

/// max_i |a_i - b_i| / max(|a_i|, |b_i|, floor)
Real max_relative_error(const Tensor& a, const Tensor& b, Real floor = 1e-6);

// Evaluates `record` on fresh leaves built from `inputs` and differentiates its
// first output (the scalar loss) with respect to every input.
struct ForwardBackwardResult {
  std::vector<Tensor> outputs;
  std::vector<Tensor> grads;
};
using Record = std::function<std::vector<Var>(std::span<const Var>)>;
ForwardBackwardResult forward_backward(const Record& record, std::span<const Tensor> inputs);

}  // namespace lers::ad
