#include "refil/kernels.hpp"

#include <omp.h>

#include <algorithm>
#include <cmath>
#include <limits>
#include <vector>

namespace refil::kernels {

namespace {

constexpr std::size_t kRowTile = 8;
constexpr std::size_t kColTile = 16;
constexpr std::size_t kDepthTile = 256;

// Element (r, kk) of A, stored as is or transposed.
template <bool TransA>
inline double a_at(const double* a, std::size_t lda, std::size_t r, std::size_t kk) {
  return TransA ? a[kk * lda + r] : a[r * lda + kk];
}

// One output tile over depth range [k0, k1). Each element is a sequential fma
// chain over k, identical to the serial reference.
template <bool TransA>
inline void gemm_tile_full(const double* a, std::size_t lda, const double* b, std::size_t ldb,
                           double* c, std::size_t ldc, std::size_t k0, std::size_t k1,
                           bool load) {
  double acc[kRowTile][kColTile];
  for (std::size_t r = 0; r < kRowTile; ++r) {
#pragma omp simd
    for (std::size_t j = 0; j < kColTile; ++j) acc[r][j] = load ? c[r * ldc + j] : 0.0;
  }
  for (std::size_t kk = k0; kk < k1; ++kk) {
    const double* brow = b + kk * ldb;
    for (std::size_t r = 0; r < kRowTile; ++r) {
      const double av = a_at<TransA>(a, lda, r, kk);
#pragma omp simd
      for (std::size_t j = 0; j < kColTile; ++j) acc[r][j] = std::fma(av, brow[j], acc[r][j]);
    }
  }
  for (std::size_t r = 0; r < kRowTile; ++r) {
#pragma omp simd
    for (std::size_t j = 0; j < kColTile; ++j) c[r * ldc + j] = acc[r][j];
  }
}

template <bool TransA>
inline void gemm_tile_edge(const double* a, std::size_t lda, const double* b, std::size_t ldb,
                           double* c, std::size_t ldc, std::size_t rows, std::size_t cols,
                           std::size_t k0, std::size_t k1, bool load) {
  for (std::size_t r = 0; r < rows; ++r) {
    double* crow = c + r * ldc;
    if (!load) std::fill(crow, crow + cols, 0.0);
    for (std::size_t kk = k0; kk < k1; ++kk) {
      const double av = a_at<TransA>(a, lda, r, kk);
      const double* brow = b + kk * ldb;
      for (std::size_t j = 0; j < cols; ++j) crow[j] = std::fma(av, brow[j], crow[j]);
    }
  }
}

template <bool TransA>
void gemm_row_tiles(std::size_t tile_begin, std::size_t tile_end, std::size_t m, std::size_t n,
                    std::size_t k, const double* a, const double* b, double* c, std::size_t k0,
                    std::size_t k1, bool load) {
  for (std::size_t t = tile_begin; t < tile_end; ++t) {
    const std::size_t i0 = t * kRowTile;
    const std::size_t rows = std::min(kRowTile, m - i0);
    for (std::size_t j0 = 0; j0 < n; j0 += kColTile) {
      const std::size_t cols = std::min(kColTile, n - j0);
      const double* at = TransA ? a + i0 : a + i0 * k;
      const std::size_t lda = TransA ? m : k;
      const double* bt = b + j0;
      double* ct = c + i0 * n + j0;
      if (rows == kRowTile && cols == kColTile) {
        gemm_tile_full<TransA>(at, lda, bt, n, ct, n, k0, k1, load);
      } else {
        gemm_tile_edge<TransA>(at, lda, bt, n, ct, n, rows, cols, k0, k1, load);
      }
    }
  }
}

inline double dot(const double* x, const double* y, std::size_t n) {
  double s = 0.0;
  for (std::size_t i = 0; i < n; ++i) s = std::fma(x[i], y[i], s);
  return s;
}

void attention_forward_block(const AttentionDims& d, std::size_t block, const double* q,
                             const double* k, const double* v, const std::uint8_t* mask,
                             double* out, double* probs) {
  const std::size_t width = d.width();
  const double scale = 1.0 / std::sqrt(static_cast<double>(d.head_dim));
  std::vector<double> scores(d.n_key);
  for (std::size_t var = 0; var < d.n_variants; ++var) {
    for (std::size_t i = 0; i < d.n_query; ++i) {
      const std::size_t row = d.out_row(block, var, i);
      const std::uint8_t* mrow = mask + row * d.n_key;
      const double* qrow = q + (block * d.n_query + i) * width;
      double* orow = out + row * width;
      std::fill(orow, orow + width, 0.0);
      for (std::size_t h = 0; h < d.n_heads; ++h) {
        const std::size_t off = h * d.head_dim;
        double* prow = probs + (row * d.n_heads + h) * d.n_key;
        double best = -std::numeric_limits<double>::infinity();
        bool any = false;
        for (std::size_t e = 0; e < d.n_key; ++e) {
          if (!mrow[e]) continue;
          const double* krow = k + (block * d.n_key + e) * width + off;
          scores[e] = dot(qrow + off, krow, d.head_dim) * scale;
          best = std::max(best, scores[e]);
          any = true;
        }
        std::fill(prow, prow + d.n_key, 0.0);
        if (!any) continue;
        double total = 0.0;
        for (std::size_t e = 0; e < d.n_key; ++e) {
          if (!mrow[e]) continue;
          prow[e] = std::exp(scores[e] - best);
          total += prow[e];
        }
        for (std::size_t e = 0; e < d.n_key; ++e) {
          if (!mrow[e]) continue;
          prow[e] /= total;
          const double* vrow = v + (block * d.n_key + e) * width + off;
          for (std::size_t c = 0; c < d.head_dim; ++c) {
            orow[off + c] = std::fma(prow[e], vrow[c], orow[off + c]);
          }
        }
      }
    }
  }
}

void attention_backward_block(const AttentionDims& d, std::size_t block, const double* q,
                              const double* k, const double* v, const double* probs,
                              const double* dout, double* dq, double* dk, double* dv) {
  const std::size_t width = d.width();
  const double scale = 1.0 / std::sqrt(static_cast<double>(d.head_dim));
  std::vector<double> dp(d.n_key);
  for (std::size_t var = 0; var < d.n_variants; ++var) {
    for (std::size_t i = 0; i < d.n_query; ++i) {
      const std::size_t row = d.out_row(block, var, i);
      const double* qrow = q + (block * d.n_query + i) * width;
      double* dqrow = dq + (block * d.n_query + i) * width;
      const double* grow = dout + row * width;
      for (std::size_t h = 0; h < d.n_heads; ++h) {
        const std::size_t off = h * d.head_dim;
        const double* prow = probs + (row * d.n_heads + h) * d.n_key;
        double weighted = 0.0;
        for (std::size_t e = 0; e < d.n_key; ++e) {
          if (prow[e] == 0.0) {
            dp[e] = 0.0;
            continue;
          }
          const std::size_t kv = (block * d.n_key + e) * width + off;
          dp[e] = dot(grow + off, v + kv, d.head_dim);
          weighted += prow[e] * dp[e];
          for (std::size_t c = 0; c < d.head_dim; ++c) {
            dv[kv + c] = std::fma(prow[e], grow[off + c], dv[kv + c]);
          }
        }
        for (std::size_t e = 0; e < d.n_key; ++e) {
          if (prow[e] == 0.0) continue;
          const double ds = prow[e] * (dp[e] - weighted) * scale;
          const std::size_t kv = (block * d.n_key + e) * width + off;
          for (std::size_t c = 0; c < d.head_dim; ++c) {
            dqrow[off + c] = std::fma(ds, k[kv + c], dqrow[off + c]);
            dk[kv + c] = std::fma(ds, qrow[off + c], dk[kv + c]);
          }
        }
      }
    }
  }
}

}  // namespace

namespace serial {

void gemm(std::size_t m, std::size_t n, std::size_t k, const double* a, const double* b,
          double* c, bool accumulate) {
  for (std::size_t i = 0; i < m; ++i) {
    for (std::size_t j = 0; j < n; ++j) {
      double s = accumulate ? c[i * n + j] : 0.0;
      for (std::size_t kk = 0; kk < k; ++kk) s = std::fma(a[i * k + kk], b[kk * n + j], s);
      c[i * n + j] = s;
    }
  }
}

void gemm_tn(std::size_t m, std::size_t n, std::size_t k, const double* a, const double* b,
             double* c, bool accumulate) {
  for (std::size_t i = 0; i < m; ++i) {
    for (std::size_t j = 0; j < n; ++j) {
      double s = accumulate ? c[i * n + j] : 0.0;
      for (std::size_t kk = 0; kk < k; ++kk) s = std::fma(a[kk * m + i], b[kk * n + j], s);
      c[i * n + j] = s;
    }
  }
}

void attention_forward(const AttentionDims& dims, const double* q, const double* k,
                       const double* v, const std::uint8_t* mask, double* out, double* probs) {
  for (std::size_t j = 0; j < dims.n_blocks(); ++j) {
    attention_forward_block(dims, j, q, k, v, mask, out, probs);
  }
}

void attention_backward(const AttentionDims& dims, const double* q, const double* k,
                        const double* v, const double* probs, const double* dout, double* dq,
                        double* dk, double* dv) {
  for (std::size_t j = 0; j < dims.n_blocks(); ++j) {
    attention_backward_block(dims, j, q, k, v, probs, dout, dq, dk, dv);
  }
}

}  // namespace serial

namespace parallel {

namespace {

template <bool TransA>
void gemm_impl(std::size_t m, std::size_t n, std::size_t k, const double* a, const double* b,
               double* c, bool accumulate) {
  const std::size_t tiles = (m + kRowTile - 1) / kRowTile;
  if (k == 0) {
    if (!accumulate) std::fill(c, c + m * n, 0.0);
    return;
  }
  for (std::size_t k0 = 0; k0 < k; k0 += kDepthTile) {
    const std::size_t k1 = std::min(k, k0 + kDepthTile);
    const bool load = accumulate || k0 > 0;
    const auto work = static_cast<long long>(tiles);
#pragma omp parallel for schedule(static) if (m * n * (k1 - k0) > 65536)
    for (long long t = 0; t < work; ++t) {
      gemm_row_tiles<TransA>(static_cast<std::size_t>(t), static_cast<std::size_t>(t) + 1, m, n,
                             k, a, b, c, k0, k1, load);
    }
  }
}

}  // namespace

void gemm(std::size_t m, std::size_t n, std::size_t k, const double* a, const double* b,
          double* c, bool accumulate) {
  gemm_impl<false>(m, n, k, a, b, c, accumulate);
}

void gemm_tn(std::size_t m, std::size_t n, std::size_t k, const double* a, const double* b,
             double* c, bool accumulate) {
  gemm_impl<true>(m, n, k, a, b, c, accumulate);
}

void attention_forward(const AttentionDims& dims, const double* q, const double* k,
                       const double* v, const std::uint8_t* mask, double* out, double* probs) {
  const auto blocks = static_cast<long long>(dims.n_blocks());
#pragma omp parallel for schedule(static) if (blocks > 16)
  for (long long j = 0; j < blocks; ++j) {
    attention_forward_block(dims, static_cast<std::size_t>(j), q, k, v, mask, out, probs);
  }
}

void attention_backward(const AttentionDims& dims, const double* q, const double* k,
                        const double* v, const double* probs, const double* dout, double* dq,
                        double* dk, double* dv) {
  const auto blocks = static_cast<long long>(dims.n_blocks());
#pragma omp parallel for schedule(static) if (blocks > 16)
  for (long long j = 0; j < blocks; ++j) {
    attention_backward_block(dims, static_cast<std::size_t>(j), q, k, v, probs, dout, dq, dk,
                             dv);
  }
}

}  // namespace parallel

int max_threads() { return omp_get_max_threads(); }

}  // namespace refil::kernels
