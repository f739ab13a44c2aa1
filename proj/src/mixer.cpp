#include "refil/mixer.hpp"

#include <stdexcept>
#include <string>

namespace refil {

HyperNetwork::HyperNetwork(ParamStore& store, const std::string& name, const MixerConfig& cfg,
                           Rng& rng) {
  if (cfg.heads == 0 || cfg.embed_dim % cfg.heads != 0) {
    throw std::invalid_argument("hypernetwork: embed_dim must be a multiple of heads");
  }
  encoder_ = Linear(store, name + ".encoder", cfg.feature_dim, cfg.embed_dim, rng);
  attention_ = MultiHeadAttention(store, name + ".attention", cfg.embed_dim, cfg.heads,
                                  cfg.embed_dim / cfg.heads, rng);
  output_ = Linear(store, name + ".output", cfg.embed_dim, cfg.mixing_dim, rng);
}

ad::Var HyperNetwork::forward(ad::Tape& tape, ad::Var entities, const EntityLayout& layout,
                              const BinaryMatrix& masks, std::size_t variants) const {
  ad::Var encoded = ad::relu(encoder_(tape, entities));
  ad::Var readout = attention_.forward(tape, encoded, layout, masks, variants);
  return output_(tape, ad::relu(readout));
}

MixingHypernetworks::MixingHypernetworks(ParamStore& store, const MixerConfig& cfg, Rng& rng)
    : cfg_(cfg),
      w1_(store, "hyper.w1", cfg, rng),
      b1_(store, "hyper.b1", cfg, rng),
      w2_(store, "hyper.w2", cfg, rng),
      b2_(store, "hyper.b2", cfg, rng) {}

MixerParams MixingHypernetworks::generate(ad::Tape& tape, const Matrix& entities,
                                          const EntityLayout& layout, const BinaryMatrix& masks,
                                          std::size_t variants) const {
  if (entities.rows() != layout.rows() || entities.cols() != cfg_.feature_dim) {
    throw DimensionError("generate_mixer: entities " + shape_str(entities) + ", expected " +
                         shape_str(layout.rows(), cfg_.feature_dim));
  }
  const std::size_t na = layout.agents.size();
  if (na == 0) throw std::invalid_argument("generate_mixer: no agents");
  ad::Var x = tape.constant(entities);
  MixerParams p;
  p.factors = na;
  p.w1 = ad::softmax_rows(w1_.forward(tape, x, layout, masks, variants));
  p.b1 = ad::block_mean_rows(b1_.forward(tape, x, layout, masks, variants), na);
  p.w2 = ad::softmax_rows(ad::block_mean_rows(w2_.forward(tape, x, layout, masks, variants), na));
  p.b2 = ad::row_mean(ad::block_mean_rows(b2_.forward(tape, x, layout, masks, variants), na));
  return p;
}

MixerParams select_samples(const MixerParams& params, std::span<const std::size_t> samples) {
  const std::size_t k = params.factors;
  std::vector<std::size_t> w1_rows;
  w1_rows.reserve(samples.size() * k);
  for (std::size_t s : samples) {
    if (s >= params.samples()) throw std::out_of_range("select_samples: sample index");
    for (std::size_t j = 0; j < k; ++j) w1_rows.push_back(s * k + j);
  }
  MixerParams out;
  out.factors = k;
  out.w1 = ad::gather_rows(params.w1, w1_rows);
  out.b1 = ad::gather_rows(params.b1, samples);
  out.w2 = ad::gather_rows(params.w2, samples);
  out.b2 = ad::gather_rows(params.b2, samples);
  return out;
}

ad::Var mix(ad::Var q, const MixerParams& params) {
  if (q.cols() != params.factors || q.rows() != params.samples()) {
    throw DimensionError("mix: utilities " + shape_str(q.value()) + " for " +
                         std::to_string(params.samples()) + " samples of " +
                         std::to_string(params.factors) + " factors");
  }
  ad::Var hidden = ad::elu(ad::add(ad::block_vecmat(q, params.w1), params.b1));
  return ad::add(ad::row_dot(hidden, params.w2), params.b2);
}

MixerParams combine_aux(const MixerParams& in_group, const MixerParams& out_group) {
  if (in_group.factors != out_group.factors || in_group.samples() != out_group.samples()) {
    throw DimensionError("combine_aux: in-group and out-group parameters differ in shape");
  }
  const std::size_t k = in_group.factors;
  const std::size_t n = in_group.samples();
  std::vector<std::size_t> rows;
  rows.reserve(2 * n * k);
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = 0; j < k; ++j) rows.push_back(i * k + j);
    for (std::size_t j = 0; j < k; ++j) rows.push_back(n * k + i * k + j);
  }
  ad::Var stacked[] = {in_group.w1, out_group.w1};
  MixerParams out;
  out.factors = 2 * k;
  out.w1 = ad::gather_rows(ad::concat_rows(stacked), rows);
  out.b1 = ad::scale(ad::add(in_group.b1, out_group.b1), 0.5);
  out.w2 = ad::scale(ad::add(in_group.w2, out_group.w2), 0.5);
  out.b2 = ad::scale(ad::add(in_group.b2, out_group.b2), 0.5);
  return out;
}

ad::Var mix_aux(ad::Var q_in, ad::Var q_out, const MixerParams& in_group,
                const MixerParams& out_group) {
  ad::Var q[] = {q_in, q_out};
  return mix(ad::concat_cols(q), combine_aux(in_group, out_group));
}

ad::Var mix_aux(ad::Tape& tape, ad::Var q_in, ad::Var q_out, const Matrix& entities,
                std::span<const std::size_t> agents, const BinaryMatrix& in_mask,
                const BinaryMatrix& out_mask, const MixingHypernetworks& hyper) {
  require_same_shape(in_mask, out_mask, "mix_aux: masks");
  BinaryMatrix masks(2 * in_mask.rows(), in_mask.cols());
  std::copy(in_mask.begin(), in_mask.end(), masks.begin());
  std::copy(out_mask.begin(), out_mask.end(), masks.begin() + in_mask.size());
  const EntityLayout layout{1, 1, entities.rows(), {agents.begin(), agents.end()}};
  const MixerParams both = hyper.generate(tape, entities, layout, masks, 2);
  const std::size_t first[] = {0}, second[] = {1};
  return mix_aux(q_in, q_out, select_samples(both, first), select_samples(both, second));
}

ad::Var mix_vdn(ad::Var q) {
  return ad::matmul(q, q.tape().constant(Matrix(q.cols(), 1, 1.0)));
}

}  // namespace refil
