// Copyright 2026 The LERS Kit Authors
// SPDX-License-Identifier: Apache-2.0

#include "lers/sparse.hpp"

#include <algorithm>
#include <tuple>

namespace lers {

SparseMatrix SparseMatrix::from_triplets(std::size_t rows, std::size_t cols,
                                         std::vector<std::tuple<std::int64_t, std::int64_t, Real>> triplets) {
  std::sort(triplets.begin(), triplets.end(), [](const auto& a, const auto& b) {
    return std::tie(std::get<0>(a), std::get<1>(a)) < std::tie(std::get<0>(b), std::get<1>(b));
  });
  SparseMatrix m;
  m.rows = rows;
  m.cols = cols;
  m.row_ptr.assign(rows + 1, 0);
  std::int64_t last_r = -1, last_c = -1;
  for (const auto& [r, c, v] : triplets) {
    if (r < 0 || c < 0 || static_cast<std::size_t>(r) >= rows || static_cast<std::size_t>(c) >= cols) {
      throw ShapeError("sparse triplet (" + std::to_string(r) + "," + std::to_string(c) + ") out of range");
    }
    if (r == last_r && c == last_c) {
      m.values.back() += v;
      continue;
    }
    m.col_idx.push_back(c);
    m.values.push_back(v);
    ++m.row_ptr[r + 1];
    last_r = r;
    last_c = c;
  }
  for (std::size_t r = 0; r < rows; ++r) m.row_ptr[r + 1] += m.row_ptr[r];
  return m;
}

Tensor SparseMatrix::multiply(const Tensor& dense) const {
  if (dense.rows() != cols) {
    throw ShapeError("spmm: sparse [" + std::to_string(rows) + "," + std::to_string(cols) + "] x dense " +
                     shape_string(dense.shape()));
  }
  const std::size_t d = dense.cols();
  Tensor out({rows, d}, 0);
  for (std::size_t r = 0; r < rows; ++r) {
    Real* dst = out.data() + r * d;
    for (auto k = row_ptr[r]; k < row_ptr[r + 1]; ++k) {
      const Real w = values[k];
      const Real* src = dense.data() + col_idx[k] * d;
      for (std::size_t j = 0; j < d; ++j) dst[j] += w * src[j];
    }
  }
  return out;
}

SparseMatrix SparseMatrix::transposed() const {
  std::vector<std::tuple<std::int64_t, std::int64_t, Real>> t;
  t.reserve(nnz());
  for (std::size_t r = 0; r < rows; ++r) {
    for (auto k = row_ptr[r]; k < row_ptr[r + 1]; ++k) t.emplace_back(col_idx[k], r, values[k]);
  }
  return from_triplets(cols, rows, std::move(t));
}

Tensor SparseMatrix::to_dense() const {
  Tensor out({rows, cols}, 0);
  for (std::size_t r = 0; r < rows; ++r) {
    for (auto k = row_ptr[r]; k < row_ptr[r + 1]; ++k) out.at(r, col_idx[k]) += values[k];
  }
  return out;
}

}  // namespace lers
