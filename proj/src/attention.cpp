#include "refil/attention.hpp"

#include <cmath>
#include <vector>

namespace refil {

ad::Var entity_ff(ad::Var x, ad::Var w, ad::Var b) {
  if (x.cols() != w.rows()) {
    throw DimensionError("entity_ff: input " + shape_str(x.value()) + " with weights " +
                         shape_str(w.value()));
  }
  return ad::add_row(ad::matmul(x, w), b);
}

ad::Var attention_head(ad::Tape& tape, std::span<const std::size_t> queries, ad::Var x,
                       const BinaryMatrix& mask, const AttentionParams& params,
                       std::size_t head) {
  if (head >= params.heads) throw std::out_of_range("attention_head: head index");
  for (std::size_t q : queries) {
    if (q >= x.rows()) {
      throw std::out_of_range("attention_head: query index " + std::to_string(q) +
                              " >= entity count " + std::to_string(x.rows()));
    }
  }
  if (mask.rows() != queries.size() || mask.cols() != x.rows()) {
    throw DimensionError("attention_head: mask " + shape_str(mask) + ", expected " +
                         shape_str(queries.size(), x.rows()));
  }
  const std::size_t c0 = head * params.head_dim;
  const std::size_t c1 = c0 + params.head_dim;
  ad::Var wq = ad::slice_cols(tape.param(*params.query), c0, c1);
  ad::Var wk = ad::slice_cols(tape.param(*params.key), c0, c1);
  ad::Var wv = ad::slice_cols(tape.param(*params.value), c0, c1);
  ad::Var q = ad::matmul(ad::gather_rows(x, queries), wq);
  ad::Var k = ad::matmul(x, wk);
  ad::Var v = ad::matmul(x, wv);
  ad::Var logits =
      ad::scale(ad::matmul(q, ad::transpose(k)), 1.0 / std::sqrt(double(params.head_dim)));
  return ad::matmul(ad::masked_softmax(logits, mask), v);
}

ad::Var multi_head_attention(ad::Tape& tape, std::span<const std::size_t> queries, ad::Var x,
                             const BinaryMatrix& mask, const AttentionParams& params) {
  std::vector<ad::Var> heads;
  heads.reserve(params.heads);
  for (std::size_t h = 0; h < params.heads; ++h) {
    heads.push_back(attention_head(tape, queries, x, mask, params, h));
  }
  return ad::concat_cols(heads);
}

std::vector<std::size_t> EntityLayout::agent_rows() const {
  std::vector<std::size_t> rows;
  rows.reserve(n_blocks() * agents.size());
  for (std::size_t j = 0; j < n_blocks(); ++j) {
    for (std::size_t a : agents) rows.push_back(j * n_entities + a);
  }
  return rows;
}

std::vector<std::size_t> EntityLayout::agent_rows_by_variant(std::size_t variants) const {
  std::vector<std::size_t> rows;
  rows.reserve(n_blocks() * variants * agents.size());
  for (std::size_t o = 0; o < n_outer; ++o) {
    for (std::size_t v = 0; v < variants; ++v) {
      for (std::size_t i = 0; i < n_inner; ++i) {
        const std::size_t block = o * n_inner + i;
        for (std::size_t a : agents) rows.push_back(block * n_entities + a);
      }
    }
  }
  return rows;
}

kernels::AttentionDims EntityLayout::attention_dims(std::size_t variants, std::size_t heads,
                                                    std::size_t head_dim) const {
  kernels::AttentionDims d;
  d.n_outer = n_outer;
  d.n_inner = n_inner;
  d.n_variants = variants;
  d.n_query = agents.size();
  d.n_key = n_entities;
  d.n_heads = heads;
  d.head_dim = head_dim;
  return d;
}

MultiHeadAttention::MultiHeadAttention(ParamStore& store, const std::string& name,
                                       std::size_t input, std::size_t heads,
                                       std::size_t head_dim, Rng& rng) {
  if (heads == 0 || head_dim == 0) throw std::invalid_argument("attention: empty head");
  const std::size_t width = heads * head_dim;
  params_.query = &store.add(name + ".query", input, width, input, rng);
  params_.key = &store.add(name + ".key", input, width, input, rng);
  params_.value = &store.add(name + ".value", input, width, input, rng);
  params_.heads = heads;
  params_.head_dim = head_dim;
}

ad::Var MultiHeadAttention::forward(ad::Tape& tape, ad::Var x, const EntityLayout& layout,
                                    const BinaryMatrix& masks, std::size_t variants) const {
  if (x.rows() != layout.rows()) {
    throw DimensionError("attention: input rows " + std::to_string(x.rows()) +
                         " for layout with " + std::to_string(layout.rows()));
  }
  for (std::size_t a : layout.agents) {
    if (a >= layout.n_entities) throw std::out_of_range("attention: agent index out of range");
  }
  const auto rows = layout.agent_rows();
  ad::Var q = ad::matmul(ad::gather_rows(x, rows), tape.param(*params_.query));
  ad::Var k = ad::matmul(x, tape.param(*params_.key));
  ad::Var v = ad::matmul(x, tape.param(*params_.value));
  return ad::attention(q, k, v, masks, layout.attention_dims(variants, params_.heads,
                                                             params_.head_dim));
}

}  // namespace refil
