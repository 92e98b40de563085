// SPDX-License-Identifier: Apache-2.0
#include "smoe/kernels.hpp"

#include <algorithm>
#include <cmath>

#ifdef _OPENMP
#include <omp.h>
#endif

#include "smoe/errors.hpp"

namespace smoe::kernels {

namespace {

// Below this many multiply-adds the fork/join overhead dominates.
constexpr std::size_t kParallelGemmWork = 1 << 15;
constexpr std::size_t kParallelSoftmaxWork = 1 << 14;

void check_gemm(const GemmDims& d, std::span<const double> a, std::span<const double> b, std::span<double> c) {
  if (a.size() != d.m * d.k || b.size() != d.k * d.n || c.size() != d.m * d.n) {
    throw DimensionError("gemm buffer sizes do not match dims");
  }
}

// One output row. Shared by the serial and the parallel driver so both
// produce the same floating-point sequence per element.
inline void gemm_row(const GemmDims& d, const double* a, const double* b, double* c, std::size_t i, bool accumulate) {
  const bool ta = d.trans_a == Transpose::kYes;
  const bool tb = d.trans_b == Transpose::kYes;
  double* crow = c + i * d.n;
  if (!accumulate) std::fill(crow, crow + d.n, 0.0);
  for (std::size_t p = 0; p < d.k; ++p) {
    const double aip = ta ? a[p * d.m + i] : a[i * d.k + p];
    if (tb) {
      for (std::size_t j = 0; j < d.n; ++j) crow[j] += aip * b[j * d.k + p];
    } else {
      const double* brow = b + p * d.n;
      for (std::size_t j = 0; j < d.n; ++j) crow[j] += aip * brow[j];
    }
  }
}

inline void softmax_row(const double* x, double* y, std::size_t cols) {
  double max_v = x[0];
  for (std::size_t j = 1; j < cols; ++j) max_v = std::max(max_v, x[j]);
  double total = 0.0;
  for (std::size_t j = 0; j < cols; ++j) {
    y[j] = std::exp(x[j] - max_v);
    total += y[j];
  }
  for (std::size_t j = 0; j < cols; ++j) y[j] /= total;
}

}  // namespace

namespace reference {

void gemm(const GemmDims& dims, std::span<const double> a, std::span<const double> b, std::span<double> c,
          bool accumulate) {
  check_gemm(dims, a, b, c);
  for (std::size_t i = 0; i < dims.m; ++i) gemm_row(dims, a.data(), b.data(), c.data(), i, accumulate);
}

void softmax_rows(std::span<const double> x, std::span<double> y, std::size_t rows, std::size_t cols) {
  for (std::size_t r = 0; r < rows; ++r) softmax_row(x.data() + r * cols, y.data() + r * cols, cols);
}

}  // namespace reference

void gemm(const GemmDims& dims, std::span<const double> a, std::span<const double> b, std::span<double> c,
          bool accumulate) {
  check_gemm(dims, a, b, c);
  const auto rows = static_cast<std::ptrdiff_t>(dims.m);
  [[maybe_unused]] const bool big = dims.m * dims.k * dims.n >= kParallelGemmWork && dims.m > 1;
#pragma omp parallel for schedule(static) if (big)
  for (std::ptrdiff_t i = 0; i < rows; ++i) {
    gemm_row(dims, a.data(), b.data(), c.data(), static_cast<std::size_t>(i), accumulate);
  }
}

void softmax_rows(std::span<const double> x, std::span<double> y, std::size_t rows, std::size_t cols) {
  const auto n = static_cast<std::ptrdiff_t>(rows);
  [[maybe_unused]] const bool big = rows * cols >= kParallelSoftmaxWork && rows > 1;
#pragma omp parallel for schedule(static) if (big)
  for (std::ptrdiff_t r = 0; r < n; ++r) {
    softmax_row(x.data() + r * cols, y.data() + r * cols, cols);
  }
}

int max_threads() {
#ifdef _OPENMP
  return omp_get_max_threads();
#else
  return 1;
#endif
}

void set_threads([[maybe_unused]] int n) {
  if (n < 1) throw ContractError("thread count must be positive");
#ifdef _OPENMP
  omp_set_num_threads(n);
#endif
}

}  // namespace smoe::kernels
