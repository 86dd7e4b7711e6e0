#pragma once

// Dense inner loops shared by the op implementations. All matrices are
// row-major and contiguous; every routine accumulates into its output.

#include <cstddef>
#include <vector>

namespace moemamba::kernels {

// c[m, n] += a[m, k] * b[k, n]
template <typename T>
void gemm_acc(const T* a, const T* b, T* c, std::size_t m, std::size_t k, std::size_t n) {
  constexpr std::size_t kRowBlock = 4;
  std::size_t i = 0;
  for (; i + kRowBlock <= m; i += kRowBlock) {
    T* c0 = c + (i + 0) * n;
    T* c1 = c + (i + 1) * n;
    T* c2 = c + (i + 2) * n;
    T* c3 = c + (i + 3) * n;
    for (std::size_t p = 0; p < k; ++p) {
      const T a0 = a[(i + 0) * k + p];
      const T a1 = a[(i + 1) * k + p];
      const T a2 = a[(i + 2) * k + p];
      const T a3 = a[(i + 3) * k + p];
      const T* brow = b + p * n;
      for (std::size_t j = 0; j < n; ++j) {
        const T bv = brow[j];
        c0[j] += a0 * bv;
        c1[j] += a1 * bv;
        c2[j] += a2 * bv;
        c3[j] += a3 * bv;
      }
    }
  }
  for (; i < m; ++i) {
    T* crow = c + i * n;
    const T* arow = a + i * k;
    for (std::size_t p = 0; p < k; ++p) {
      const T av = arow[p];
      const T* brow = b + p * n;
      for (std::size_t j = 0; j < n; ++j) crow[j] += av * brow[j];
    }
  }
}

// out[n, m] = transpose(x[m, n])
template <typename T>
std::vector<T> transpose(const T* x, std::size_t m, std::size_t n) {
  std::vector<T> out(m * n);
  for (std::size_t i = 0; i < m; ++i) {
    for (std::size_t j = 0; j < n; ++j) out[j * m + i] = x[i * n + j];
  }
  return out;
}

// c[m, n] += a[m, k] * transpose(b[n, k])
template <typename T>
void gemm_abt_acc(const T* a, const T* b, T* c, std::size_t m, std::size_t k, std::size_t n) {
  const std::vector<T> bt = transpose(b, n, k);
  gemm_acc(a, bt.data(), c, m, k, n);
}

// c[k, n] += transpose(a[m, k]) * b[m, n]
template <typename T>
void gemm_atb_acc(const T* a, const T* b, T* c, std::size_t m, std::size_t k, std::size_t n) {
  const std::vector<T> at = transpose(a, m, k);
  gemm_acc(at.data(), b, c, k, m, n);
}

}  // namespace moemamba::kernels
