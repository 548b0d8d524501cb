#pragma once

#include <cmath>
#include <cstddef>
#include <span>

namespace iceformer {

// Eight independent partial sums so the compiler can keep several lanes in flight.
// Every inner product in the library goes through this one kernel, which keeps
// rankings computed on different paths bit-identical.
template <typename T>
inline T dot(const T* a, const T* b, std::size_t n) {
  T acc0 = 0, acc1 = 0, acc2 = 0, acc3 = 0, acc4 = 0, acc5 = 0, acc6 = 0, acc7 = 0;
  std::size_t i = 0;
  for (; i + 8 <= n; i += 8) {
    acc0 += a[i] * b[i];
    acc1 += a[i + 1] * b[i + 1];
    acc2 += a[i + 2] * b[i + 2];
    acc3 += a[i + 3] * b[i + 3];
    acc4 += a[i + 4] * b[i + 4];
    acc5 += a[i + 5] * b[i + 5];
    acc6 += a[i + 6] * b[i + 6];
    acc7 += a[i + 7] * b[i + 7];
  }
  T tail = 0;
  for (; i < n; ++i) tail += a[i] * b[i];
  return ((acc0 + acc1) + (acc2 + acc3)) + ((acc4 + acc5) + (acc6 + acc7)) + tail;
}

template <typename T>
inline T dot(std::span<const T> a, std::span<const T> b) {
  return dot(a.data(), b.data(), a.size());
}

// y += alpha * x
template <typename T>
inline void axpy(T alpha, const T* x, T* y, std::size_t n) {
  for (std::size_t i = 0; i < n; ++i) y[i] += alpha * x[i];
}

/// Euclidean norm accumulated in double regardless of storage type.
template <typename T>
inline double norm2(std::span<const T> v) {
  double s = 0.0;
  for (T x : v) s += static_cast<double>(x) * static_cast<double>(x);
  return std::sqrt(s);
}

}  // namespace iceformer
