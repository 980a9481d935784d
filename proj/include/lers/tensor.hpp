// Copyright 2026 The LERS Kit Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <algorithm>
#include <atomic>
#include <cstddef>
#include <cstdint>
#include <initializer_list>
#include <limits>
#include <memory>
#include <new>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace lers {

#ifdef LERS_FLOAT32
using Real = float;
#else
using Real = double;
#endif

using Index = std::int64_t;
using Shape = std::vector<std::size_t>;

/// Raised when operand shapes are incompatible; the message names the op.
class ShapeError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// Raised when a non-finite value enters a tensor or an optimizer.
class NonFiniteError : public std::domain_error {
 public:
  using std::domain_error::domain_error;
};

// Byte counters behind every tensor buffer. Peak is the high-water mark since
// the last reset_peak(); the bench module reads it as "peak memory".
namespace memory {
std::size_t current_bytes();
std::size_t peak_bytes();
void reset_peak();
void on_allocate(std::size_t bytes);
void on_deallocate(std::size_t bytes);
}  // namespace memory

template <typename T>
struct TrackingAllocator {
  using value_type = T;

  TrackingAllocator() = default;
  template <typename U>
  TrackingAllocator(const TrackingAllocator<U>&) noexcept {}

  T* allocate(std::size_t n) {
    memory::on_allocate(n * sizeof(T));
    return std::allocator<T>{}.allocate(n);
  }
  void deallocate(T* p, std::size_t n) noexcept {
    memory::on_deallocate(n * sizeof(T));
    std::allocator<T>{}.deallocate(p, n);
  }

  template <typename U>
  bool operator==(const TrackingAllocator<U>&) const noexcept { return true; }
};

using Storage = std::vector<Real, TrackingAllocator<Real>>;

std::size_t shape_size(const Shape& shape);
std::string shape_string(const Shape& shape);

// Dense row-major tensor. Public constructors reject NaN/Inf; kernels that
// produce results go through uninitialized() and write via data().
class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(Shape shape, Real fill = 0);
  Tensor(Shape shape, std::span<const Real> values);
  Tensor(Shape shape, std::initializer_list<Real> values);

  static Tensor uninitialized(Shape shape);
  static Tensor zeros(std::size_t rows, std::size_t cols) { return Tensor({rows, cols}, 0); }
  static Tensor scalar(Real v) { return Tensor({1, 1}, {v}); }
  static Tensor matrix(std::size_t rows, std::size_t cols, std::initializer_list<Real> values) {
    return Tensor({rows, cols}, values);
  }

  const Shape& shape() const { return shape_; }
  std::size_t rank() const { return shape_.size(); }
  std::size_t size() const { return values_.size(); }
  bool empty() const { return values_.empty(); }

  // Rank-2 accessors; a rank-1 tensor is viewed as a single row.
  std::size_t rows() const;
  std::size_t cols() const;

  Real* data() { return values_.data(); }
  const Real* data() const { return values_.data(); }
  std::span<Real> span() { return {values_.data(), values_.size()}; }
  std::span<const Real> span() const { return {values_.data(), values_.size()}; }
  std::span<Real> row(std::size_t r) { return {values_.data() + r * cols(), cols()}; }
  std::span<const Real> row(std::size_t r) const { return {values_.data() + r * cols(), cols()}; }

  Real& operator[](std::size_t i) { return values_[i]; }
  Real operator[](std::size_t i) const { return values_[i]; }
  Real& at(std::size_t r, std::size_t c) { return values_[r * cols() + c]; }
  Real at(std::size_t r, std::size_t c) const { return values_[r * cols() + c]; }

  Real item() const;
  void fill(Real v);
  bool all_finite() const;
  std::size_t count_nonzero() const;
  Tensor reshaped(Shape shape) const;

  bool operator==(const Tensor& other) const {
    return shape_ == other.shape_ &&
           std::equal(values_.begin(), values_.end(), other.values_.begin(), other.values_.end());
  }

 private:
  Shape shape_;
  Storage values_;
};

void check_finite(const Tensor& t, const std::string& what);

}  // namespace lers
