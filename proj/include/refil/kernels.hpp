#pragma once

// Numeric kernels behind the autodiff tape. Every kernel exists twice: a plain
// serial reference kept for testing, and a tiled OpenMP version used in
// training. Both accumulate each output element with the same fused
// multiply-add sequence, so their results are bit-identical and independent of
// the thread count and of an element's position inside a tile.

#include <cstddef>
#include <cstdint>

namespace refil::kernels {

/// Geometry of a batched masked multi-head attention call.
///
/// Blocks are indexed j = outer * n_inner + inner. Queries and keys/values
/// are shared by all mask variants of a block; output and mask rows are laid
/// out as ((outer * n_variants + variant) * n_inner + inner) * n_query + i so
/// that one time step of every variant is contiguous.
struct AttentionDims {
  std::size_t n_outer = 1;
  std::size_t n_inner = 1;
  std::size_t n_variants = 1;
  std::size_t n_query = 1;
  std::size_t n_key = 1;
  std::size_t n_heads = 1;
  std::size_t head_dim = 1;

  std::size_t n_blocks() const { return n_outer * n_inner; }
  std::size_t width() const { return n_heads * head_dim; }
  std::size_t out_rows() const { return n_blocks() * n_variants * n_query; }
  std::size_t prob_size() const { return out_rows() * n_heads * n_key; }
  std::size_t out_row(std::size_t block, std::size_t variant, std::size_t query) const {
    const std::size_t outer = block / n_inner;
    const std::size_t inner = block % n_inner;
    return ((outer * n_variants + variant) * n_inner + inner) * n_query + query;
  }
};

namespace serial {

/// C[m×n] = A[m×k]·B[k×n] (or C += when accumulate). Row-major, dense.
void gemm(std::size_t m, std::size_t n, std::size_t k, const double* a, const double* b,
          double* c, bool accumulate);

/// C[m×n] = Aᵀ·B with A stored k×m.
void gemm_tn(std::size_t m, std::size_t n, std::size_t k, const double* a, const double* b,
             double* c, bool accumulate);

void attention_forward(const AttentionDims& dims, const double* q, const double* k,
                       const double* v, const std::uint8_t* mask, double* out, double* probs);

/// Accumulates into dq, dk, dv.
void attention_backward(const AttentionDims& dims, const double* q, const double* k,
                        const double* v, const double* probs, const double* dout, double* dq,
                        double* dk, double* dv);

}  // namespace serial

namespace parallel {

void gemm(std::size_t m, std::size_t n, std::size_t k, const double* a, const double* b,
          double* c, bool accumulate);
void gemm_tn(std::size_t m, std::size_t n, std::size_t k, const double* a, const double* b,
             double* c, bool accumulate);

void attention_forward(const AttentionDims& dims, const double* q, const double* k,
                       const double* v, const std::uint8_t* mask, double* out, double* probs);

void attention_backward(const AttentionDims& dims, const double* q, const double* k,
                        const double* v, const double* probs, const double* dout, double* dq,
                        double* dk, double* dv);

}  // namespace parallel

int max_threads();

}  // namespace refil::kernels
