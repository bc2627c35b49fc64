#include "hapnet/gemm.hpp"

#include <algorithm>
#include <vector>

namespace hapnet::kernels {

namespace {

const double* pack_transposed(const double* src, std::size_t rows, std::size_t cols, std::vector<double>& buf) {
  // src is rows x cols; produce cols x rows.
  buf.resize(rows * cols);
  constexpr std::size_t kTile = 32;
  for (std::size_t r0 = 0; r0 < rows; r0 += kTile) {
    const std::size_t r1 = std::min(rows, r0 + kTile);
    for (std::size_t c0 = 0; c0 < cols; c0 += kTile) {
      const std::size_t c1 = std::min(cols, c0 + kTile);
      for (std::size_t r = r0; r < r1; ++r) {
        for (std::size_t c = c0; c < c1; ++c) buf[c * rows + r] = src[r * cols + c];
      }
    }
  }
  return buf.data();
}

}  // namespace

void gemm(std::size_t m, std::size_t n, std::size_t k, const double* a, bool trans_a, const double* b,
          bool trans_b, double* c, bool accumulate) {
  thread_local std::vector<double> a_buf;
  thread_local std::vector<double> b_buf;
  const double* A = trans_a ? pack_transposed(a, k, m, a_buf) : a;
  const double* B = trans_b ? pack_transposed(b, n, k, b_buf) : b;
  if (!accumulate) std::fill(c, c + m * n, 0.0);

  std::size_t i = 0;
  for (; i + 4 <= m; i += 4) {
    double* __restrict c0 = c + (i + 0) * n;
    double* __restrict c1 = c + (i + 1) * n;
    double* __restrict c2 = c + (i + 2) * n;
    double* __restrict c3 = c + (i + 3) * n;
    const double* a0 = A + (i + 0) * k;
    const double* a1 = A + (i + 1) * k;
    const double* a2 = A + (i + 2) * k;
    const double* a3 = A + (i + 3) * k;
    for (std::size_t p = 0; p < k; ++p) {
      const double* __restrict bp = B + p * n;
      const double x0 = a0[p], x1 = a1[p], x2 = a2[p], x3 = a3[p];
      for (std::size_t j = 0; j < n; ++j) {
        const double bv = bp[j];
        c0[j] += x0 * bv;
        c1[j] += x1 * bv;
        c2[j] += x2 * bv;
        c3[j] += x3 * bv;
      }
    }
  }
  for (; i < m; ++i) {
    double* __restrict ci = c + i * n;
    const double* ai = A + i * k;
    for (std::size_t p = 0; p < k; ++p) {
      const double* __restrict bp = B + p * n;
      const double x = ai[p];
      for (std::size_t j = 0; j < n; ++j) ci[j] += x * bp[j];
    }
  }
}

}  // namespace hapnet::kernels
