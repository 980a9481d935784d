// Copyright 2026 The LERS Kit Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstdint>
#include <tuple>
#include <vector>

#include "lers/tensor.hpp"

namespace lers {

// Constant CSR matrix used for graph propagation.
struct SparseMatrix {
  std::size_t rows = 0;
  std::size_t cols = 0;
  std::vector<std::int64_t> row_ptr{0};
  std::vector<std::int64_t> col_idx;
  std::vector<Real> values;

  std::size_t nnz() const { return col_idx.size(); }

  // Builds from unsorted (row, col, value) triplets; duplicates are summed.
  static SparseMatrix from_triplets(std::size_t rows, std::size_t cols,
                                    std::vector<std::tuple<std::int64_t, std::int64_t, Real>> triplets);

  Tensor multiply(const Tensor& dense) const;
  SparseMatrix transposed() const;
  Tensor to_dense() const;
};

}  // namespace lers
