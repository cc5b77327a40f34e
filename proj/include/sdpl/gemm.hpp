#pragma once

// Small dense kernels backing the tensor ops. Row-major throughout.
// The nn form is the only tuned loop; transposed operand forms go through an
// explicit transpose into thread-local scratch so every hot path runs the
// same contiguous-axpy inner loop. All loops have a fixed iteration order,
// which keeps results bit-identical from run to run.

#include <cstdint>
#include <vector>

namespace sdpl::detail {

using i64 = std::int64_t;

template <typename T>
inline std::vector<T>& gemm_scratch() {
  static thread_local std::vector<T> buf;
  return buf;
}

template <typename T>
inline void transpose(const T* src, T* dst, i64 rows, i64 cols) {
  for (i64 r = 0; r < rows; ++r)
    for (i64 c = 0; c < cols; ++c) dst[c * rows + r] = src[r * cols + c];
}

template <typename T>
inline void gemm_rows_ref(const T* A, const T* B, T* C, i64 rows, i64 N, i64 K, i64 n0,
                          i64 n1) {
  for (i64 m = 0; m < rows; ++m) {
    const T* a = A + m * K;
    T* c = C + m * N;
    for (i64 k = 0; k < K; ++k) {
      const T av = a[k];
      const T* b = B + k * N;
      for (i64 n = n0; n < n1; ++n) c[n] += av * b[n];
    }
  }
}

/// C[M,N] (+)= A[M,K] * B[K,N]
/// Register-tiled 4x32 microkernel; per-element accumulation stays in k order,
/// so results are bit-identical to the reference loop.
template <typename T>
inline void gemm_nn(const T* A, const T* B, T* C, i64 M, i64 N, i64 K,
                    bool accumulate) {
  if (!accumulate) std::fill(C, C + M * N, T(0));
  constexpr i64 MB = 4;
  constexpr i64 NB = sizeof(T) == 4 ? 32 : 16;
  const i64 m_main = M - M % MB;
  const i64 n_main = N - N % NB;
  for (i64 m = 0; m < m_main; m += MB) {
    const T* a0 = A + (m + 0) * K;
    const T* a1 = A + (m + 1) * K;
    const T* a2 = A + (m + 2) * K;
    const T* a3 = A + (m + 3) * K;
    for (i64 n = 0; n < n_main; n += NB) {
      T acc0[NB], acc1[NB], acc2[NB], acc3[NB];
      T* c0 = C + (m + 0) * N + n;
      T* c1 = C + (m + 1) * N + n;
      T* c2 = C + (m + 2) * N + n;
      T* c3 = C + (m + 3) * N + n;
      for (i64 j = 0; j < NB; ++j) {
        acc0[j] = c0[j];
        acc1[j] = c1[j];
        acc2[j] = c2[j];
        acc3[j] = c3[j];
      }
      for (i64 k = 0; k < K; ++k) {
        const T* b = B + k * N + n;
        const T v0 = a0[k], v1 = a1[k], v2 = a2[k], v3 = a3[k];
        for (i64 j = 0; j < NB; ++j) {
          acc0[j] += v0 * b[j];
          acc1[j] += v1 * b[j];
          acc2[j] += v2 * b[j];
          acc3[j] += v3 * b[j];
        }
      }
      for (i64 j = 0; j < NB; ++j) {
        c0[j] = acc0[j];
        c1[j] = acc1[j];
        c2[j] = acc2[j];
        c3[j] = acc3[j];
      }
    }
    if (n_main < N) gemm_rows_ref(A + m * K, B, C + m * N, MB, N, K, n_main, N);
  }
  if (m_main < M)
    gemm_rows_ref(A + m_main * K, B, C + m_main * N, M - m_main, N, K, 0, N);
}

/// C[M,N] (+)= A[M,K] * B[N,K]^T
template <typename T>
inline void gemm_nt(const T* A, const T* B, T* C, i64 M, i64 N, i64 K,
                    bool accumulate) {
  auto& buf = gemm_scratch<T>();
  buf.resize(static_cast<size_t>(N * K));
  transpose(B, buf.data(), N, K);  // -> [K,N]
  gemm_nn(A, buf.data(), C, M, N, K, accumulate);
}

/// C[M,N] (+)= A[K,M]^T * B[K,N]
template <typename T>
inline void gemm_tn(const T* A, const T* B, T* C, i64 M, i64 N, i64 K,
                    bool accumulate) {
  auto& buf = gemm_scratch<T>();
  buf.resize(static_cast<size_t>(K * M));
  transpose(A, buf.data(), K, M);  // -> [M,K]
  gemm_nn(buf.data(), B, C, M, N, K, accumulate);
}

}  // namespace sdpl::detail
