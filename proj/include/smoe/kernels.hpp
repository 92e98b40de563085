// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstddef>
#include <span>

// Dense inner loops used by the tape. Each kernel has a serial reference in
// smoe::kernels::reference and an OpenMP version in smoe::kernels. The
// parallel versions split work over output rows only, so every output element
// is produced by the same instruction sequence as the reference and results are
// bit-identical regardless of thread count.

namespace smoe::kernels {

enum class Transpose { kNo, kYes };

/// Operand layout for C(m x n) = op(A) * op(B), where op(A) is m x k and
/// op(B) is k x n. A and B are stored row-major in their untransposed form.
struct GemmDims {
  std::size_t m = 0;
  std::size_t k = 0;
  std::size_t n = 0;
  Transpose trans_a = Transpose::kNo;
  Transpose trans_b = Transpose::kNo;
};

/// C = op(A) op(B) when accumulate is false, C += op(A) op(B) otherwise.
void gemm(const GemmDims& dims, std::span<const double> a, std::span<const double> b, std::span<double> c,
          bool accumulate = false);

/// Row-wise softmax over a rows x cols buffer.
void softmax_rows(std::span<const double> x, std::span<double> y, std::size_t rows, std::size_t cols);

/// Number of OpenMP threads available, 1 when built without OpenMP.
int max_threads();

/// Thread count for later parallel regions; ignored without OpenMP.
void set_threads(int n);

namespace reference {

void gemm(const GemmDims& dims, std::span<const double> a, std::span<const double> b, std::span<double> c,
          bool accumulate = false);

void softmax_rows(std::span<const double> x, std::span<double> y, std::size_t rows, std::size_t cols);

}  // namespace reference

}  // namespace smoe::kernels
