#pragma once

#include <algorithm>
#include <cstddef>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <type_traits>
#include <vector>

// Dense kernels used by the autograd ops. All loops have a fixed evaluation
// order, so results are bit-identical run to run.
namespace natf::kernels {

namespace detail {

constexpr std::size_t kRowBlock = 4;
constexpr std::size_t kColBlock = 16;

// 64-byte vector of T (GCC/Clang extension); kColBlock columns span kLanes
// of them.
constexpr std::size_t kVecBytes = 64;

template <typename T>
using Vec [[gnu::vector_size(kVecBytes)]] = T;

template <typename T>
constexpr std::size_t kWidth = kVecBytes / sizeof(T);

template <typename T>
constexpr std::size_t kLanes = kColBlock / kWidth<T>;

template <typename T>
inline Vec<T> load(const T* p) {
  Vec<T> v;
  std::memcpy(&v, p, sizeof v);
  return v;
}

template <typename T>
inline void store(T* p, const Vec<T>& v) {
  std::memcpy(p, &v, sizeof v);
}

// c[r][0..kColBlock) (+)= sum_k a[r][k] * b[k][0..kColBlock) for a full tile.
template <typename T, std::size_t Rows>
inline void gemm_tile(const T* a, const T* b, T* c, std::size_t k, std::size_t m, bool accumulate) {
  constexpr std::size_t lanes = kLanes<T>;
  constexpr std::size_t width = kWidth<T>;
  Vec<T> acc[Rows][lanes];
  for (std::size_t r = 0; r < Rows; ++r) {
    for (std::size_t l = 0; l < lanes; ++l) acc[r][l] = accumulate ? load<T>(c + r * m + l * width) : Vec<T>{};
  }
  for (std::size_t p = 0; p < k; ++p) {
    Vec<T> brow[lanes];
    for (std::size_t l = 0; l < lanes; ++l) brow[l] = load<T>(b + p * m + l * width);
    for (std::size_t r = 0; r < Rows; ++r) {
      const T av = a[r * k + p];
      for (std::size_t l = 0; l < lanes; ++l) acc[r][l] += av * brow[l];
    }
  }
  for (std::size_t r = 0; r < Rows; ++r) {
    for (std::size_t l = 0; l < lanes; ++l) store<T>(c + r * m + l * width, acc[r][l]);
  }
}

// Columns past the last full tile: B's edge is copied into a zero-padded
// k x kColBlock panel and run through the same tile kernel.
template <typename T>
inline void gemm_edge(const T* a, const T* b, T* c, std::size_t rows, std::size_t k, std::size_t m,
                      std::size_t width, bool accumulate) {
  thread_local std::vector<T> panel;
  panel.assign(k * kColBlock, T(0));
  for (std::size_t p = 0; p < k; ++p) std::copy_n(b + p * m, width, panel.data() + p * kColBlock);
  T tile[kRowBlock * kColBlock];
  for (std::size_t r = 0; r < rows; r += kRowBlock) {
    const std::size_t h = std::min(kRowBlock, rows - r);
    std::fill(tile, tile + kRowBlock * kColBlock, T(0));
    for (std::size_t i = 0; i < h; ++i) {
      if (accumulate) std::copy_n(c + (r + i) * m, width, tile + i * kColBlock);
    }
    if (h == kRowBlock) {
      gemm_tile<T, kRowBlock>(a + r * k, panel.data(), tile, k, kColBlock, accumulate);
    } else {
      for (std::size_t i = 0; i < h; ++i) {
        gemm_tile<T, 1>(a + (r + i) * k, panel.data(), tile + i * kColBlock, k, kColBlock, accumulate);
      }
    }
    for (std::size_t i = 0; i < h; ++i) std::copy_n(tile + i * kColBlock, width, c + (r + i) * m);
  }
}

}  // namespace detail

// C[n x m] = A[n x k] * B[k x m]  (or += when accumulate is set).
template <typename T>
void gemm_nn(const T* a, const T* b, T* c, std::size_t n, std::size_t k, std::size_t m,
             bool accumulate = false) {
  using detail::kColBlock;
  using detail::kRowBlock;
  const std::size_t full = m - m % kColBlock;
  std::size_t i = 0;
  for (; i + kRowBlock <= n; i += kRowBlock) {
    for (std::size_t j = 0; j < full; j += kColBlock) {
      detail::gemm_tile<T, kRowBlock>(a + i * k, b + j, c + i * m + j, k, m, accumulate);
    }
  }
  for (; i < n; ++i) {
    for (std::size_t j = 0; j < full; j += kColBlock) {
      detail::gemm_tile<T, 1>(a + i * k, b + j, c + i * m + j, k, m, accumulate);
    }
  }
  if (full < m) detail::gemm_edge(a, b + full, c + full, n, k, m, m - full, accumulate);
}

// x[i] = exp(x[i]). Floats use a vectorized range reduction plus degree-6
// polynomial (about 2 ulp); inputs below -87.3 give exactly 0 and inputs
// above 88.376 saturate. Doubles use
// std::exp.
template <typename T>
void exp_inplace(T* x, std::size_t n) {
  if constexpr (std::is_same_v<T, float>) {
    using VF = detail::Vec<float>;
    using VI [[gnu::vector_size(detail::kVecBytes)]] = std::int32_t;
    constexpr std::size_t width = detail::kWidth<float>;
    auto vexp = [](VF v) {
      const VI flush = v < -87.3f;
      v = v > 88.37626f ? VF{} + 88.37626f : v;
      v = v < -87.3f ? VF{} - 87.3f : v;
      const VF magic = VF{} + 12582912.0f;
      const VF k = (v * 1.44269504088896341f + magic) - magic;
      VF r = v - k * 0.693359375f;
      r = r - k * -2.12194440e-4f;
      VF p = VF{} + 1.9875691500e-4f;
      p = p * r + 1.3981999507e-3f;
      p = p * r + 8.3334519073e-3f;
      p = p * r + 4.1665795894e-2f;
      p = p * r + 1.6666665459e-1f;
      p = p * r + 5.0000001201e-1f;
      p = p * r * r + r + 1.0f;
      const VI bits = (__builtin_convertvector(k, VI) + 127) << 23;
      VF scale;
      std::memcpy(&scale, &bits, sizeof scale);
      const VF out = p * scale;
      VI ob;
      std::memcpy(&ob, &out, sizeof ob);
      ob &= ~flush;
      VF res;
      std::memcpy(&res, &ob, sizeof res);
      return res;
    };
    std::size_t i = 0;
    for (; i + width <= n; i += width) detail::store<float>(x + i, vexp(detail::load<float>(x + i)));
    if (i < n) {
      float tail[width] = {};
      std::copy(x + i, x + n, tail);
      detail::store<float>(tail, vexp(detail::load<float>(tail)));
      std::copy(tail, tail + (n - i), x + i);
    }
  } else {
    for (std::size_t i = 0; i < n; ++i) x[i] = std::exp(x[i]);
  }
}

// False if any element is inf or nan.
template <typename T>
bool all_finite(const T* p, std::size_t n) {
  constexpr std::size_t width = detail::kWidth<T>;
  std::size_t i = 0;
  detail::Vec<T> acc{};
  for (; i + width <= n; i += width) {
    const detail::Vec<T> v = detail::load<T>(p + i);
    acc += v - v;
  }
  T total = T(0);
  for (std::size_t l = 0; l < width; ++l) total += acc[l];
  for (; i < n; ++i) total += p[i] - p[i];
  return total == T(0);
}

// Sum of x[i] and of (x[i] - mean)^2 in f64, accumulated lane-wise over
// eight-element chunks and then summed in a fixed order.
namespace detail {

using Vec8d [[gnu::vector_size(64)]] = double;
using Vec8f [[gnu::vector_size(32)]] = float;

template <typename T>
inline Vec8d load8d(const T* x) {
  if constexpr (std::is_same_v<T, float>) {
    Vec8f f;
    std::memcpy(&f, x, sizeof f);
    return __builtin_convertvector(f, Vec8d);
  } else {
    Vec8d v;
    for (std::size_t l = 0; l < 8; ++l) v[l] = static_cast<double>(x[l]);
    return v;
  }
}

inline double hsum(const Vec8d& v) {
  return ((v[0] + v[1]) + (v[2] + v[3])) + ((v[4] + v[5]) + (v[6] + v[7]));
}

}  // namespace detail

template <typename T>
double sum_f64(const T* x, std::size_t n) {
  detail::Vec8d acc{};
  std::size_t i = 0;
  for (; i + 8 <= n; i += 8) acc += detail::load8d(x + i);
  double s = detail::hsum(acc);
  for (; i < n; ++i) s += static_cast<double>(x[i]);
  return s;
}

template <typename T>
double sq_dev_f64(const T* x, std::size_t n, double mean) {
  detail::Vec8d acc{};
  std::size_t i = 0;
  for (; i + 8 <= n; i += 8) {
    const detail::Vec8d c = detail::load8d(x + i) - mean;
    acc += c * c;
  }
  double s = detail::hsum(acc);
  for (; i < n; ++i) {
    const double c = static_cast<double>(x[i]) - mean;
    s += c * c;
  }
  return s;
}

template <typename T>
std::vector<T> transpose(const T* a, std::size_t rows, std::size_t cols) {
  std::vector<T> out(rows * cols);
  for (std::size_t r = 0; r < rows; ++r) {
    for (std::size_t c = 0; c < cols; ++c) {
      out[c * rows + r] = a[r * cols + c];
    }
  }
  return out;
}

// C[n x k] += A[n x m] * B[k x m]^T
template <typename T>
void gemm_nt_acc(const T* a, const T* b, T* c, std::size_t n, std::size_t m, std::size_t k) {
  const std::vector<T> bt = transpose(b, k, m);
  gemm_nn(a, bt.data(), c, n, m, k, true);
}

// C[k x m] += A[n x k]^T * B[n x m]
template <typename T>
void gemm_tn_acc(const T* a, const T* b, T* c, std::size_t n, std::size_t k, std::size_t m) {
  const std::vector<T> at = transpose(a, n, k);
  gemm_nn(at.data(), b, c, k, n, m, true);
}

}  // namespace natf::kernels
