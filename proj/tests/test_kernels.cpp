#include <doctest.h>

#include <array>
#include <cmath>

#include "synthehr/error.hpp"
#include "synthehr/kernels.hpp"
#include "synthehr/rng.hpp"

using namespace synthehr;

namespace {
std::vector<double> random_vec(std::size_t n, Rng& rng) {
  std::normal_distribution<double> nd;
  std::vector<double> v(n);
  for (auto& x : v) x = nd(rng);
  return v;
}
}  // namespace

TEST_CASE("parallel kernels equal the serial reference bit for bit") {
  Rng rng(1);
  const std::vector<std::array<int, 3>> shapes{{1, 1, 1}, {3, 5, 7}, {64, 48, 80}, {200, 130, 64}, {17, 300, 33}};
  for (const auto& [m, n, k] : shapes) {
    const auto a = random_vec(static_cast<std::size_t>(m) * k, rng);
    const auto b = random_vec(static_cast<std::size_t>(k) * n, rng);
    const auto bt = random_vec(static_cast<std::size_t>(n) * k, rng);
    const auto at = random_vec(static_cast<std::size_t>(k) * m, rng);
    const auto init = random_vec(static_cast<std::size_t>(m) * n, rng);
    for (bool acc : {false, true}) {
      auto c1 = init, c2 = init;
      kernels::gemm_serial(m, n, k, a.data(), b.data(), c1.data(), acc);
      kernels::gemm_parallel(m, n, k, a.data(), b.data(), c2.data(), acc);
      CHECK(c1 == c2);
      c1 = c2 = init;
      kernels::gemm_nt_serial(m, n, k, a.data(), bt.data(), c1.data(), acc);
      kernels::gemm_nt_parallel(m, n, k, a.data(), bt.data(), c2.data(), acc);
      CHECK(c1 == c2);
      c1 = c2 = init;
      kernels::gemm_tn_serial(m, n, k, at.data(), b.data(), c1.data(), acc);
      kernels::gemm_tn_parallel(m, n, k, at.data(), b.data(), c2.data(), acc);
      CHECK(c1 == c2);
    }
  }
}

TEST_CASE("gemm matches a naive triple loop") {
  Rng rng(2);
  const int m = 7, n = 9, k = 5;
  const auto a = random_vec(m * k, rng), b = random_vec(k * n, rng);
  std::vector<double> c(m * n);
  kernels::gemm(m, n, k, a.data(), b.data(), c.data(), false);
  for (int i = 0; i < m; ++i)
    for (int j = 0; j < n; ++j) {
      double s = 0.0;
      for (int l = 0; l < k; ++l) s += a[i * k + l] * b[l * n + j];
      CHECK(c[i * n + j] == doctest::Approx(s).epsilon(1e-12));
    }
  Matrix A(m, k), B(n, k);
  A.data = a;
  B.data = random_vec(n * k, rng);
  const Matrix C = matmul_nt(A, B);
  for (int i = 0; i < m; ++i)
    for (int j = 0; j < n; ++j) {
      double s = 0.0;
      for (int l = 0; l < k; ++l) s += A(i, l) * B(j, l);
      CHECK(C(i, j) == doctest::Approx(s).epsilon(1e-12));
    }
}

TEST_CASE("log_softmax rows") {
  Matrix m(2, 3);
  m.data = {1.0, 2.0, 3.0, 1000.0, 1000.0, -1000.0};
  kernels::log_softmax_rows(m);
  for (int r = 0; r < 2; ++r) {
    double s = 0.0;
    for (int c = 0; c < 3; ++c) s += std::exp(m(r, c));
    CHECK(s == doctest::Approx(1.0).epsilon(1e-12));
  }
  CHECK(m(1, 0) == doctest::Approx(-std::log(2.0)));
  Matrix bad(1, 2);
  bad.data = {std::nan(""), 0.0};
  CHECK_THROWS_AS(kernels::log_softmax_rows(bad), Error);
}
