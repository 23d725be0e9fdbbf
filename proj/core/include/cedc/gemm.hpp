#pragma once

#include <algorithm>
#include <cstdint>
#include <vector>

#include "cedc/thread_pool.hpp"

namespace cedc::nn {

// Row-major matrix kernels. All of them vectorize as elementwise AXPY updates
// along the contiguous output row, so no floating-point reassociation is
// required and results do not depend on the thread count (each output row is
// owned by exactly one thread, accumulation order fixed by the k loop).

namespace detail {
constexpr std::int64_t kParallelFlops = 1 << 17;
}

/// c[R,N] = a[R,K] * b[K,N], or += when accumulate.
template <typename S>
void gemm_nn(const S* a, const S* b, S* c, std::int64_t R, std::int64_t K, std::int64_t N,
             bool accumulate = false) {
  auto rows = [=](std::int64_t r0, std::int64_t r1) {
    for (std::int64_t i = r0; i < r1; ++i) {
      S* crow = c + i * N;
      if (!accumulate) std::fill(crow, crow + N, S(0));
      const S* arow = a + i * K;
      for (std::int64_t k = 0; k < K; ++k) {
        const S aik = arow[k];
        if (aik == S(0)) continue;
        const S* brow = b + k * N;
        for (std::int64_t j = 0; j < N; ++j) crow[j] += aik * brow[j];
      }
    }
  };
  if (R * K * N >= detail::kParallelFlops) {
    parallel_for(0, R, rows);
  } else {
    rows(0, R);
  }
}

/// c[K,N] = aT * b with a[R,K], b[R,N]; or += when accumulate.
/// This is the dW = Xt * dY pattern; parallel over output (k) rows.
template <typename S>
void gemm_tn(const S* a, const S* b, S* c, std::int64_t R, std::int64_t K, std::int64_t N,
             bool accumulate = false) {
  auto cols = [=](std::int64_t k0, std::int64_t k1) {
    if (!accumulate) {
      for (std::int64_t k = k0; k < k1; ++k) std::fill(c + k * N, c + k * N + N, S(0));
    }
    for (std::int64_t i = 0; i < R; ++i) {
      const S* arow = a + i * K;
      const S* brow = b + i * N;
      for (std::int64_t k = k0; k < k1; ++k) {
        const S aik = arow[k];
        if (aik == S(0)) continue;
        S* crow = c + k * N;
        for (std::int64_t j = 0; j < N; ++j) crow[j] += aik * brow[j];
      }
    }
  };
  if (R * K * N >= detail::kParallelFlops) {
    parallel_for(0, K, cols);
  } else {
    cols(0, K);
  }
}

/// out[C,R] = transpose of m[R,C].
template <typename S>
void transpose(const S* m, S* out, std::int64_t R, std::int64_t C) {
  for (std::int64_t i = 0; i < R; ++i)
    for (std::int64_t j = 0; j < C; ++j) out[j * R + i] = m[i * C + j];
}

}  // namespace cedc::nn
