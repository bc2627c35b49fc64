#pragma once

#include <cstddef>

namespace hapnet::kernels {

/// C (m x n) = op(A) * op(B), or C += ... when accumulate is set.
/// A is m x k row-major (k x m when trans_a); B is k x n (n x k when trans_b).
/// Summation order is fixed, so results are bit-reproducible.
void gemm(std::size_t m, std::size_t n, std::size_t k, const double* a, bool trans_a, const double* b,
          bool trans_b, double* c, bool accumulate);

}  // namespace hapnet::kernels
