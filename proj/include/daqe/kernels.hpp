#pragma once

// Plain loop kernels shared by the differentiable ops. Row-major throughout.

#include <algorithm>
#include <cstddef>

namespace daqe::kernels {

namespace detail {

/// C[M,N] += A * B[K,N] where A(i, k) = A[i * si + k * sk]. Columns are
/// processed in blocks and rows four at a time so C stays in cache.
template <typename T>
void gemm_rows(std::size_t M, std::size_t N, std::size_t K, const T* A, std::size_t si,
               std::size_t sk, const T* B, T* C) {
  constexpr std::size_t kBlock = 256;
  for (std::size_t j0 = 0; j0 < N; j0 += kBlock) {
    const std::size_t jn = std::min(kBlock, N - j0);
    std::size_t i = 0;
    for (; i + 4 <= M; i += 4) {
      T* c0 = C + i * N + j0;
      T* c1 = c0 + N;
      T* c2 = c1 + N;
      T* c3 = c2 + N;
      for (std::size_t k = 0; k < K; ++k) {
        const T a0 = A[i * si + k * sk], a1 = A[(i + 1) * si + k * sk];
        const T a2 = A[(i + 2) * si + k * sk], a3 = A[(i + 3) * si + k * sk];
        const T* b = B + k * N + j0;
        for (std::size_t j = 0; j < jn; ++j) {
          const T bv = b[j];
          c0[j] += a0 * bv;
          c1[j] += a1 * bv;
          c2[j] += a2 * bv;
          c3[j] += a3 * bv;
        }
      }
    }
    for (; i < M; ++i) {
      T* c = C + i * N + j0;
      for (std::size_t k = 0; k < K; ++k) {
        const T av = A[i * si + k * sk];
        const T* b = B + k * N + j0;
        for (std::size_t j = 0; j < jn; ++j) c[j] += av * b[j];
      }
    }
  }
}

}  // namespace detail

/// C[M,N] (+)= A[M,K] * B[K,N]
template <typename T>
void gemm_nn(std::size_t M, std::size_t N, std::size_t K, const T* A, const T* B, T* C,
             bool accumulate) {
  if (!accumulate) std::fill(C, C + M * N, T(0));
  detail::gemm_rows(M, N, K, A, K, 1, B, C);
}

/// C[M,N] (+)= A[M,K] * B[N,K]^T
template <typename T>
void gemm_nt(std::size_t M, std::size_t N, std::size_t K, const T* A, const T* B, T* C,
             bool accumulate) {
  for (std::size_t i = 0; i < M; ++i) {
    const T* a = A + i * K;
    for (std::size_t j = 0; j < N; ++j) {
      const T* b = B + j * K;
      T acc[8] = {};
      std::size_t k = 0;
      for (; k + 8 <= K; k += 8)
        for (std::size_t l = 0; l < 8; ++l) acc[l] += a[k + l] * b[k + l];
      T s = ((acc[0] + acc[1]) + (acc[2] + acc[3])) + ((acc[4] + acc[5]) + (acc[6] + acc[7]));
      for (; k < K; ++k) s += a[k] * b[k];
      C[i * N + j] = accumulate ? C[i * N + j] + s : s;
    }
  }
}

/// C[M,N] (+)= A[K,M]^T * B[K,N]
template <typename T>
void gemm_tn(std::size_t M, std::size_t N, std::size_t K, const T* A, const T* B, T* C,
             bool accumulate) {
  if (!accumulate) std::fill(C, C + M * N, T(0));
  detail::gemm_rows(M, N, K, A, 1, M, B, C);
}

/// 3x3, stride 1, zero padding 1. cols is [C*9, H*W].
template <typename T>
void im2col3(const T* x, std::size_t C, std::size_t H, std::size_t W, T* cols) {
  const std::size_t HW = H * W;
  for (std::size_t c = 0; c < C; ++c) {
    const T* xc = x + c * HW;
    for (int ky = 0; ky < 3; ++ky) {
      for (int kx = 0; kx < 3; ++kx) {
        T* row = cols + ((c * 9) + static_cast<std::size_t>(ky * 3 + kx)) * HW;
        const int dy = ky - 1, dx = kx - 1;
        for (std::size_t y = 0; y < H; ++y) {
          const long sy = static_cast<long>(y) + dy;
          T* r = row + y * W;
          if (sy < 0 || sy >= static_cast<long>(H)) {
            std::fill(r, r + W, T(0));
            continue;
          }
          const T* src = xc + static_cast<std::size_t>(sy) * W;
          const std::size_t x0 = dx < 0 ? 1 : 0;
          const std::size_t x1 = dx > 0 ? W - 1 : W;
          if (dx < 0) r[0] = T(0);
          if (dx > 0) r[W - 1] = T(0);
          for (std::size_t xx = x0; xx < x1; ++xx) r[xx] = src[static_cast<long>(xx) + dx];
        }
      }
    }
  }
}

/// Adjoint of im2col3: accumulates cols into x.
template <typename T>
void col2im3(const T* cols, std::size_t C, std::size_t H, std::size_t W, T* x) {
  const std::size_t HW = H * W;
  for (std::size_t c = 0; c < C; ++c) {
    T* xc = x + c * HW;
    for (int ky = 0; ky < 3; ++ky) {
      for (int kx = 0; kx < 3; ++kx) {
        const T* row = cols + ((c * 9) + static_cast<std::size_t>(ky * 3 + kx)) * HW;
        const int dy = ky - 1, dx = kx - 1;
        for (std::size_t y = 0; y < H; ++y) {
          const long sy = static_cast<long>(y) + dy;
          if (sy < 0 || sy >= static_cast<long>(H)) continue;
          const T* r = row + y * W;
          T* dst = xc + static_cast<std::size_t>(sy) * W;
          const std::size_t x0 = dx < 0 ? 1 : 0;
          const std::size_t x1 = dx > 0 ? W - 1 : W;
          for (std::size_t xx = x0; xx < x1; ++xx) dst[static_cast<long>(xx) + dx] += r[xx];
        }
      }
    }
  }
}

}  // namespace daqe::kernels
