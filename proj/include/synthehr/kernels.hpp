#pragma once

#include <cstddef>
#include <vector>

namespace synthehr {

// Dense row-major matrix of doubles.
struct Matrix {
  int rows = 0;
  int cols = 0;
  std::vector<double> data;

  Matrix() = default;
  Matrix(int r, int c, double fill = 0.0) : rows(r), cols(c), data(static_cast<std::size_t>(r) * c, fill) {}

  double& operator()(int r, int c) { return data[static_cast<std::size_t>(r) * cols + c]; }
  double operator()(int r, int c) const { return data[static_cast<std::size_t>(r) * cols + c]; }
  double* row(int r) { return data.data() + static_cast<std::size_t>(r) * cols; }
  const double* row(int r) const { return data.data() + static_cast<std::size_t>(r) * cols; }
  std::size_t size() const { return data.size(); }
  bool operator==(const Matrix&) const = default;
};

namespace kernels {

// The parallel variants split work over output rows and keep the serial
// summation order, so both produce bit-identical results.
enum class Backend { kSerial, kParallel };

void set_backend(Backend backend);
Backend backend();

// C(m×n) (+)= A(m×k) · B(k×n)
void gemm_serial(int m, int n, int k, const double* a, const double* b, double* c, bool accumulate);
void gemm_parallel(int m, int n, int k, const double* a, const double* b, double* c, bool accumulate);
// C(m×n) (+)= A(m×k) · B(n×k)ᵀ
void gemm_nt_serial(int m, int n, int k, const double* a, const double* b, double* c, bool accumulate);
void gemm_nt_parallel(int m, int n, int k, const double* a, const double* b, double* c, bool accumulate);
// C(m×n) (+)= A(k×m)ᵀ · B(k×n)
void gemm_tn_serial(int m, int n, int k, const double* a, const double* b, double* c, bool accumulate);
void gemm_tn_parallel(int m, int n, int k, const double* a, const double* b, double* c, bool accumulate);

// Dispatch on the active backend.
void gemm(int m, int n, int k, const double* a, const double* b, double* c, bool accumulate);
void gemm_nt(int m, int n, int k, const double* a, const double* b, double* c, bool accumulate);
void gemm_tn(int m, int n, int k, const double* a, const double* b, double* c, bool accumulate);

// Row-wise log-softmax, in place.
void log_softmax_rows(Matrix& m);

}  // namespace kernels

Matrix matmul(const Matrix& a, const Matrix& b);
Matrix matmul_nt(const Matrix& a, const Matrix& b);
Matrix matmul_tn(const Matrix& a, const Matrix& b);

}  // namespace synthehr
