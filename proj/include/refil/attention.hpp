#pragma once

// Entity-wise feedforward and masked multi-head attention.
//
// Two routes compute the same layer. The reference functions
// (entity_ff / attention_head / multi_head_attention) compose tape primitives
// for a single state and follow the layer definition literally. The batched
// MultiHeadAttention module runs many states and mask variants through the
// fused attention kernel and is what the networks use.

#include <cstddef>
#include <span>
#include <string>

#include "refil/autodiff.hpp"
#include "refil/layers.hpp"

namespace refil {

/// Projection weights of all heads, stacked column-wise: head j owns columns
/// [j·head_dim, (j+1)·head_dim) of each matrix.
struct AttentionParams {
  ad::Parameter* query = nullptr;  // d × heads·head_dim
  ad::Parameter* key = nullptr;
  ad::Parameter* value = nullptr;
  std::size_t heads = 0;
  std::size_t head_dim = 0;

  std::size_t width() const { return heads * head_dim; }
};

/// X·W + bᵀ, identically for every entity row.
ad::Var entity_ff(ad::Var x, ad::Var w, ad::Var b);

/// One head: softmax(mask(Q Kᵀ / sqrt(head_dim), M)) V with Q from rows `queries`.
ad::Var attention_head(ad::Tape& tape, std::span<const std::size_t> queries, ad::Var x,
                       const BinaryMatrix& mask, const AttentionParams& params, std::size_t head);

/// Column-wise concatenation of all heads.
ad::Var multi_head_attention(ad::Tape& tape, std::span<const std::size_t> queries, ad::Var x,
                             const BinaryMatrix& mask, const AttentionParams& params);

/// Row layout of a batch of entity states: `n_outer · n_inner` blocks of
/// `n_entities` rows each, block j = outer·n_inner + inner. The same agent
/// (query) indices apply to every block.
struct EntityLayout {
  std::size_t n_outer = 1;
  std::size_t n_inner = 1;
  std::size_t n_entities = 0;
  std::vector<std::size_t> agents;

  std::size_t n_blocks() const { return n_outer * n_inner; }
  std::size_t rows() const { return n_blocks() * n_entities; }
  /// Global row index of every agent in every block, block-major.
  std::vector<std::size_t> agent_rows() const;
  /// Agent rows repeated for each variant in attention output order.
  std::vector<std::size_t> agent_rows_by_variant(std::size_t variants) const;
  kernels::AttentionDims attention_dims(std::size_t variants, std::size_t heads,
                                        std::size_t head_dim) const;
};

class MultiHeadAttention {
 public:
  MultiHeadAttention() = default;
  MultiHeadAttention(ParamStore& store, const std::string& name, std::size_t input,
                     std::size_t heads, std::size_t head_dim, Rng& rng);

  const AttentionParams& params() const { return params_; }
  std::size_t width() const { return params_.width(); }

  /// Projects once and attends under every mask variant. `masks` stacks one
  /// |A|×|E| mask per (block, variant) in kernels::AttentionDims output order.
  /// Result rows follow the same order.
  ad::Var forward(ad::Tape& tape, ad::Var x, const EntityLayout& layout, const BinaryMatrix& masks,
                  std::size_t variants) const;

 private:
  AttentionParams params_;
};

}  // namespace refil
