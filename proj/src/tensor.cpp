// Copyright 2026 The LERS Kit Authors
// SPDX-License-Identifier: Apache-2.0

#include "lers/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>

namespace lers {

namespace memory {
namespace {
std::atomic<std::size_t> g_current{0};
std::atomic<std::size_t> g_peak{0};
}  // namespace

std::size_t current_bytes() { return g_current.load(); }
std::size_t peak_bytes() { return g_peak.load(); }
void reset_peak() { g_peak.store(g_current.load()); }

void on_allocate(std::size_t bytes) {
  const std::size_t now = g_current.fetch_add(bytes) + bytes;
  std::size_t prev = g_peak.load();
  while (now > prev && !g_peak.compare_exchange_weak(prev, now)) {
  }
}

void on_deallocate(std::size_t bytes) { g_current.fetch_sub(bytes); }
}  // namespace memory

std::size_t shape_size(const Shape& shape) {
  std::size_t n = 1;
  for (auto s : shape) n *= s;
  return n;
}

std::string shape_string(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? "," : "") << shape[i];
  os << ']';
  return os.str();
}

Tensor::Tensor(Shape shape, Real fill) : shape_(std::move(shape)), values_(shape_size(shape_), fill) {
  if (!std::isfinite(fill)) throw NonFiniteError("tensor fill value is not finite");
}

Tensor::Tensor(Shape shape, std::span<const Real> values)
    : shape_(std::move(shape)), values_(values.begin(), values.end()) {
  if (values_.size() != shape_size(shape_)) {
    throw ShapeError("tensor: " + std::to_string(values_.size()) + " values for shape " +
                     shape_string(shape_));
  }
  check_finite(*this, "tensor");
}

Tensor::Tensor(Shape shape, std::initializer_list<Real> values)
    : Tensor(std::move(shape), std::span<const Real>(values.begin(), values.size())) {}

Tensor Tensor::uninitialized(Shape shape) {
  Tensor t;
  t.values_.resize(shape_size(shape));
  t.shape_ = std::move(shape);
  return t;
}

std::size_t Tensor::rows() const {
  if (shape_.size() == 1) return 1;
  if (shape_.size() != 2) throw ShapeError("rows(): tensor of shape " + shape_string(shape_) + " is not rank 2");
  return shape_[0];
}

std::size_t Tensor::cols() const {
  if (shape_.size() == 1) return shape_[0];
  if (shape_.size() != 2) throw ShapeError("cols(): tensor of shape " + shape_string(shape_) + " is not rank 2");
  return shape_[1];
}

Real Tensor::item() const {
  if (values_.size() != 1) throw ShapeError("item(): tensor of shape " + shape_string(shape_) + " is not a scalar");
  return values_[0];
}

void Tensor::fill(Real v) { std::fill(values_.begin(), values_.end(), v); }

bool Tensor::all_finite() const {
  return std::all_of(values_.begin(), values_.end(), [](Real v) { return std::isfinite(v); });
}

std::size_t Tensor::count_nonzero() const {
  return static_cast<std::size_t>(std::count_if(values_.begin(), values_.end(), [](Real v) { return v != 0; }));
}

Tensor Tensor::reshaped(Shape shape) const {
  if (shape_size(shape) != values_.size()) {
    throw ShapeError("reshape: " + shape_string(shape_) + " -> " + shape_string(shape));
  }
  Tensor t = *this;
  t.shape_ = std::move(shape);
  return t;
}

void check_finite(const Tensor& t, const std::string& what) {
  if (!t.all_finite()) throw NonFiniteError(what + ": non-finite value");
}

}  // namespace lers
