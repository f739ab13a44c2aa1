#include "refil/agent_network.hpp"

#include <stdexcept>
#include <string>

namespace refil {

AgentNetwork::AgentNetwork(ParamStore& store, const AgentNetworkConfig& cfg, Rng& rng)
    : cfg_(cfg) {
  if (cfg.feature_dim == 0 || cfg.n_actions == 0) {
    throw std::invalid_argument("agent network: feature_dim and n_actions must be positive");
  }
  if (cfg.heads == 0 || cfg.embed_dim % cfg.heads != 0) {
    throw std::invalid_argument("agent network: embed_dim must be a multiple of heads");
  }
  encoder_ = Linear(store, "agent.encoder", cfg.feature_dim, cfg.embed_dim, rng);
  attention_ = MultiHeadAttention(store, "agent.attention", cfg.embed_dim, cfg.heads,
                                  cfg.embed_dim / cfg.heads, rng);
  gru_ = GruCell(store, "agent.gru", 2 * cfg.embed_dim, cfg.hidden_dim, rng);
  head_ = Linear(store, "agent.head", cfg.hidden_dim, cfg.n_actions, rng);
}

SequenceOutput AgentNetwork::forward(ad::Tape& tape, const SequenceInput& in) const {
  const EntityLayout& layout = in.layout;
  if (in.entities == nullptr || in.masks == nullptr) {
    throw std::invalid_argument("agent network: missing entities or masks");
  }
  if (in.entities->rows() != layout.rows() || in.entities->cols() != cfg_.feature_dim) {
    throw DimensionError("agent network: entities " + shape_str(*in.entities) + ", expected " +
                         shape_str(layout.rows(), cfg_.feature_dim));
  }
  const std::size_t steps = layout.n_outer;
  const std::size_t rows_per_step = in.variants * layout.n_inner * layout.agents.size();
  if (in.masks->rows() != steps * rows_per_step || in.masks->cols() != layout.n_entities) {
    throw DimensionError("agent network: masks " + shape_str(*in.masks) + ", expected " +
                         shape_str(steps * rows_per_step, layout.n_entities));
  }
  Matrix h0 = in.initial_hidden;
  if (h0.empty()) h0 = Matrix(rows_per_step, cfg_.hidden_dim);
  if (h0.rows() != rows_per_step || h0.cols() != cfg_.hidden_dim) {
    throw DimensionError("agent network: recurrent state " + shape_str(h0) + ", expected " +
                         shape_str(rows_per_step, cfg_.hidden_dim));
  }

  ad::Var x = tape.constant(*in.entities);
  ad::Var encoded = ad::relu(encoder_(tape, x));
  ad::Var readout = attention_.forward(tape, encoded, layout, *in.masks, in.variants);
  // GRU input is [own encoding, readout]; the own half is the same for every
  // mask variant, so project it once and broadcast.
  const std::size_t na = layout.agents.size(), half = cfg_.embed_dim;
  ad::Var w_in = tape.param(gru_.input_weight());
  ad::Var own = ad::matmul(ad::gather_rows(encoded, layout.agent_rows()),
                           ad::slice_rows(w_in, 0, half));
  std::vector<std::size_t> broadcast;
  broadcast.reserve(steps * rows_per_step);
  for (std::size_t t = 0; t < steps; ++t) {
    for (std::size_t v = 0; v < in.variants; ++v) {
      for (std::size_t i = 0; i < layout.n_inner * na; ++i) {
        broadcast.push_back(t * layout.n_inner * na + i);
      }
    }
  }
  ad::Var projected = ad::add_row(
      ad::add(ad::gather_rows(own, broadcast), ad::matmul(readout, ad::slice_rows(w_in, half, 2 * half))),
      tape.param(gru_.bias()));

  ad::Var h = tape.constant(std::move(h0));
  std::vector<ad::Var> hidden;
  hidden.reserve(steps);
  for (std::size_t t = 0; t < steps; ++t) {
    ad::Var step_in = ad::slice_rows(projected, t * rows_per_step, (t + 1) * rows_per_step);
    h = gru_.step_projected(tape, step_in, h);
    hidden.push_back(h);
  }
  ad::Var all_hidden = steps == 1 ? hidden[0] : ad::concat_rows(hidden);
  return SequenceOutput{head_(tape, all_hidden), h};
}

std::pair<ad::Var, Matrix> AgentNetwork::utilities(ad::Tape& tape, const Matrix& entities,
                                                   std::span<const std::size_t> agents,
                                                   const BinaryMatrix& mask,
                                                   const RecurrentState& state) const {
  if (!state.initialized()) throw std::logic_error("agent network: uninitialized recurrent state");
  if (mask.rows() != agents.size()) {
    throw DimensionError("agent network: mask has " + std::to_string(mask.rows()) +
                         " rows for " + std::to_string(agents.size()) + " agents");
  }
  SequenceInput in;
  in.entities = &entities;
  in.layout = EntityLayout{1, 1, entities.rows(), {agents.begin(), agents.end()}};
  in.masks = &mask;
  in.initial_hidden = state.hidden;
  SequenceOutput out = forward(tape, in);
  return {out.q, out.final_hidden.value()};
}

AgentNetwork::TripleOutput AgentNetwork::triple_pass(
    ad::Tape& tape, const Matrix& entities, std::span<const std::size_t> agents,
    const BinaryMatrix& mask, const BinaryMatrix& mask_in, const BinaryMatrix& mask_out,
    const RecurrentState& state, const RecurrentState& state_in,
    const RecurrentState& state_out) const {
  for (const RecurrentState* s : {&state, &state_in, &state_out}) {
    if (!s->initialized()) throw std::logic_error("agent network: uninitialized recurrent state");
  }
  require_same_shape(mask, mask_in, "triple_pass: in-group mask");
  require_same_shape(mask, mask_out, "triple_pass: out-group mask");
  const std::size_t na = agents.size();
  if (mask.rows() != na) throw DimensionError("triple_pass: mask rows must equal agent count");

  BinaryMatrix masks(3 * na, mask.cols());
  Matrix h0(3 * na, cfg_.hidden_dim);
  const BinaryMatrix* parts[] = {&mask, &mask_in, &mask_out};
  const RecurrentState* states[] = {&state, &state_in, &state_out};
  for (std::size_t v = 0; v < 3; ++v) {
    require_same_shape(states[v]->hidden, Matrix(na, cfg_.hidden_dim), "triple_pass: state");
    std::copy(parts[v]->begin(), parts[v]->end(), masks.begin() + v * parts[v]->size());
    std::copy(states[v]->hidden.begin(), states[v]->hidden.end(),
              h0.begin() + v * states[v]->hidden.size());
  }
  SequenceInput in;
  in.entities = &entities;
  in.layout = EntityLayout{1, 1, entities.rows(), {agents.begin(), agents.end()}};
  in.masks = &masks;
  in.variants = 3;
  in.initial_hidden = std::move(h0);
  SequenceOutput out = forward(tape, in);

  TripleOutput result;
  ad::Var* q[] = {&result.q, &result.q_in, &result.q_out};
  RecurrentState* s[] = {&result.state, &result.state_in, &result.state_out};
  const Matrix& hv = out.final_hidden.value();
  for (std::size_t v = 0; v < 3; ++v) {
    *q[v] = ad::slice_rows(out.q, v * na, (v + 1) * na);
    s[v]->hidden = Matrix(na, cfg_.hidden_dim,
                          std::vector<double>(hv.data() + v * na * cfg_.hidden_dim,
                                              hv.data() + (v + 1) * na * cfg_.hidden_dim));
  }
  return result;
}

std::vector<std::size_t> greedy_actions(const Matrix& q, const BinaryMatrix& available) {
  require_same_shape(q, available, "greedy_actions");
  std::vector<std::size_t> actions(q.rows());
  for (std::size_t a = 0; a < q.rows(); ++a) {
    bool found = false;
    for (std::size_t u = 0; u < q.cols(); ++u) {
      if (!available(a, u)) continue;
      if (!found || q(a, u) > q(a, actions[a])) {
        actions[a] = u;
        found = true;
      }
    }
    if (!found) {
      throw std::invalid_argument("greedy_actions: agent " + std::to_string(a) +
                                  " has no available action");
    }
  }
  return actions;
}

}  // namespace refil
