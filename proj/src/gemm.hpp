#pragma once

#include <cstddef>
#include <vector>

namespace vitc::detail {

// Rows x (kTile floats or doubles) block of C kept in registers while the k
// loop streams through A and B.
template <class T, std::size_t Rows, std::size_t Cols>
inline void gemm_tile(std::size_t k, const T* a, std::size_t a_row_stride, std::size_t a_k_stride,
                      const T* b, std::size_t ldb, T* c, std::size_t ldc, std::size_t cols,
                      bool accumulate) {
  T acc[Rows][Cols];
  for (std::size_t r = 0; r < Rows; ++r) {
    for (std::size_t j = 0; j < Cols; ++j) acc[r][j] = accumulate && j < cols ? c[r * ldc + j] : T(0);
  }
  if (cols == Cols) {
    for (std::size_t p = 0; p < k; ++p) {
      const T* __restrict brow = b + p * ldb;
      for (std::size_t r = 0; r < Rows; ++r) {
        const T av = a[r * a_row_stride + p * a_k_stride];
        for (std::size_t j = 0; j < Cols; ++j) acc[r][j] += av * brow[j];
      }
    }
  } else {
    for (std::size_t p = 0; p < k; ++p) {
      const T* __restrict brow = b + p * ldb;
      for (std::size_t r = 0; r < Rows; ++r) {
        const T av = a[r * a_row_stride + p * a_k_stride];
        for (std::size_t j = 0; j < cols; ++j) acc[r][j] += av * brow[j];
      }
    }
  }
  for (std::size_t r = 0; r < Rows; ++r) {
    for (std::size_t j = 0; j < cols; ++j) c[r * ldc + j] = acc[r][j];
  }
}

// C[m x n] (+)= op(A) * op(B) over row-major storage with explicit leading
// dimensions. Accumulation over k runs in increasing order for every output,
// so results do not depend on the tiling.
//   trans_a: A is stored [k x m]; trans_b: B is stored [n x k].
template <class T>
void gemm(bool trans_a, bool trans_b, std::size_t m, std::size_t n, std::size_t k, const T* a,
          std::size_t lda, const T* b, std::size_t ldb, T* c, std::size_t ldc, bool accumulate) {
  std::vector<T> bt;
  if (trans_b) {
    // Materialize B as [k x n] so the inner loop streams contiguous rows.
    bt.resize(k * n);
    for (std::size_t j = 0; j < n; ++j) {
      const T* brow = b + j * ldb;
      for (std::size_t p = 0; p < k; ++p) bt[p * n + j] = brow[p];
    }
    b = bt.data();
    ldb = n;
  }
  const std::size_t a_row = trans_a ? 1 : lda;
  const std::size_t a_k = trans_a ? lda : 1;
  constexpr std::size_t kCols = 128 / sizeof(T);
  constexpr std::size_t kRows = 4;
  std::size_t i = 0;
  for (; i + kRows <= m; i += kRows) {
    for (std::size_t j = 0; j < n; j += kCols) {
      const std::size_t cols = n - j < kCols ? n - j : kCols;
      gemm_tile<T, kRows, kCols>(k, a + i * a_row, a_row, a_k, b + j, ldb, c + i * ldc + j, ldc,
                                 cols, accumulate);
    }
  }
  for (; i < m; ++i) {
    for (std::size_t j = 0; j < n; j += kCols) {
      const std::size_t cols = n - j < kCols ? n - j : kCols;
      gemm_tile<T, 1, kCols>(k, a + i * a_row, a_row, a_k, b + j, ldb, c + i * ldc + j, ldc, cols,
                            accumulate);
    }
  }
}

}  // namespace vitc::detail
