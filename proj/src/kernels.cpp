#include "synthehr/kernels.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <limits>

#include "synthehr/error.hpp"

namespace synthehr {
namespace kernels {

namespace {
std::atomic<Backend> g_backend{Backend::kParallel};

// Below this many multiply-adds thread startup dominates.
constexpr long kParallelThreshold = 32 * 1024;

inline void gemm_row(int i, int n, int k, const double* a, const double* b, double* c, bool accumulate) {
  double* ci = c + static_cast<std::size_t>(i) * n;
  if (!accumulate) std::fill(ci, ci + n, 0.0);
  const double* ai = a + static_cast<std::size_t>(i) * k;
  for (int p = 0; p < k; ++p) {
    const double av = ai[p];
    if (av == 0.0) continue;
    const double* bp = b + static_cast<std::size_t>(p) * n;
    for (int j = 0; j < n; ++j) ci[j] += av * bp[j];
  }
}

inline void gemm_nt_row(int i, int n, int k, const double* a, const double* b, double* c, bool accumulate) {
  const double* ai = a + static_cast<std::size_t>(i) * k;
  double* ci = c + static_cast<std::size_t>(i) * n;
  for (int j = 0; j < n; ++j) {
    const double* bj = b + static_cast<std::size_t>(j) * k;
    double s = 0.0;
    for (int p = 0; p < k; ++p) s += ai[p] * bj[p];
    ci[j] = accumulate ? ci[j] + s : s;
  }
}

inline void gemm_tn_row(int i, int m, int n, int k, const double* a, const double* b, double* c, bool accumulate) {
  double* ci = c + static_cast<std::size_t>(i) * n;
  if (!accumulate) std::fill(ci, ci + n, 0.0);
  for (int p = 0; p < k; ++p) {
    const double av = a[static_cast<std::size_t>(p) * m + i];
    if (av == 0.0) continue;
    const double* bp = b + static_cast<std::size_t>(p) * n;
    for (int j = 0; j < n; ++j) ci[j] += av * bp[j];
  }
}

bool worth_parallel(int m, int n, int k) { return static_cast<long>(m) * n * k >= kParallelThreshold && m > 1; }
}  // namespace

void set_backend(Backend backend) { g_backend = backend; }
Backend backend() { return g_backend; }

void gemm_serial(int m, int n, int k, const double* a, const double* b, double* c, bool accumulate) {
  for (int i = 0; i < m; ++i) gemm_row(i, n, k, a, b, c, accumulate);
}

void gemm_parallel(int m, int n, int k, const double* a, const double* b, double* c, bool accumulate) {
#pragma omp parallel for schedule(static) if (worth_parallel(m, n, k))
  for (int i = 0; i < m; ++i) gemm_row(i, n, k, a, b, c, accumulate);
}

void gemm_nt_serial(int m, int n, int k, const double* a, const double* b, double* c, bool accumulate) {
  for (int i = 0; i < m; ++i) gemm_nt_row(i, n, k, a, b, c, accumulate);
}

void gemm_nt_parallel(int m, int n, int k, const double* a, const double* b, double* c, bool accumulate) {
#pragma omp parallel for schedule(static) if (worth_parallel(m, n, k))
  for (int i = 0; i < m; ++i) gemm_nt_row(i, n, k, a, b, c, accumulate);
}

void gemm_tn_serial(int m, int n, int k, const double* a, const double* b, double* c, bool accumulate) {
  for (int i = 0; i < m; ++i) gemm_tn_row(i, m, n, k, a, b, c, accumulate);
}

void gemm_tn_parallel(int m, int n, int k, const double* a, const double* b, double* c, bool accumulate) {
#pragma omp parallel for schedule(static) if (worth_parallel(m, n, k))
  for (int i = 0; i < m; ++i) gemm_tn_row(i, m, n, k, a, b, c, accumulate);
}

void gemm(int m, int n, int k, const double* a, const double* b, double* c, bool accumulate) {
  if (g_backend == Backend::kParallel) gemm_parallel(m, n, k, a, b, c, accumulate);
  else gemm_serial(m, n, k, a, b, c, accumulate);
}

void gemm_nt(int m, int n, int k, const double* a, const double* b, double* c, bool accumulate) {
  if (g_backend == Backend::kParallel) gemm_nt_parallel(m, n, k, a, b, c, accumulate);
  else gemm_nt_serial(m, n, k, a, b, c, accumulate);
}

void gemm_tn(int m, int n, int k, const double* a, const double* b, double* c, bool accumulate) {
  if (g_backend == Backend::kParallel) gemm_tn_parallel(m, n, k, a, b, c, accumulate);
  else gemm_tn_serial(m, n, k, a, b, c, accumulate);
}

void log_softmax_rows(Matrix& m) {
  for (int r = 0; r < m.rows; ++r) {
    double* x = m.row(r);
    double mx = -std::numeric_limits<double>::infinity();
    for (int j = 0; j < m.cols; ++j) {
      if (std::isnan(x[j]) || x[j] == std::numeric_limits<double>::infinity())
        throw Error(ErrorCode::kNumericOverflow, "non-finite logits");
      mx = std::max(mx, x[j]);
    }
    if (!std::isfinite(mx)) throw Error(ErrorCode::kNumericOverflow, "non-finite logits");
    double s = 0.0;
    for (int j = 0; j < m.cols; ++j) s += std::exp(x[j] - mx);
    const double lse = mx + std::log(s);
    for (int j = 0; j < m.cols; ++j) x[j] -= lse;
  }
}

}  // namespace kernels

Matrix matmul(const Matrix& a, const Matrix& b) {
  if (a.cols != b.rows) throw Error(ErrorCode::kDimensionMismatch, "matmul inner dimensions");
  Matrix c(a.rows, b.cols);
  kernels::gemm(a.rows, b.cols, a.cols, a.data.data(), b.data.data(), c.data.data(), false);
  return c;
}

Matrix matmul_nt(const Matrix& a, const Matrix& b) {
  if (a.cols != b.cols) throw Error(ErrorCode::kDimensionMismatch, "matmul_nt inner dimensions");
  Matrix c(a.rows, b.rows);
  kernels::gemm_nt(a.rows, b.rows, a.cols, a.data.data(), b.data.data(), c.data.data(), false);
  return c;
}

Matrix matmul_tn(const Matrix& a, const Matrix& b) {
  if (a.rows != b.rows) throw Error(ErrorCode::kDimensionMismatch, "matmul_tn inner dimensions");
  Matrix c(a.cols, b.cols);
  kernels::gemm_tn(a.cols, b.cols, a.rows, a.data.data(), b.data.data(), c.data.data(), false);
  return c;
}

}  // namespace synthehr
