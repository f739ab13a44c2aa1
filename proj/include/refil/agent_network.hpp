#pragma once

// Shared per-agent utility network: entity encoder, one masked attention
// layer, GRU, linear action head. The same parameters serve the real pass
// (observability mask) and the imagined in-group / out-group passes.

#include <cstddef>
#include <span>
#include <vector>

#include "refil/attention.hpp"
#include "refil/layers.hpp"

namespace refil {

struct AgentNetworkConfig {
  std::size_t feature_dim = 0;
  std::size_t n_actions = 0;
  std::size_t embed_dim = 128;  // h^a
  std::size_t heads = 4;
  std::size_t hidden_dim = 64;  // h^r
};

/// Per-agent GRU state for one mask variant.
struct RecurrentState {
  Matrix hidden;  // |A| × h^r, or empty when uninitialized

  static RecurrentState zeros(std::size_t n_agents, std::size_t hidden_dim) {
    return RecurrentState{Matrix(n_agents, hidden_dim)};
  }
  bool initialized() const { return !hidden.empty(); }
};

/// A batch of entity-state sequences for the network. Entity rows are ordered
/// (t, b, e); mask rows are ordered (t, variant, b, agent) with one |E| column
/// per entity.
struct SequenceInput {
  const Matrix* entities = nullptr;
  EntityLayout layout;  // n_outer = time steps, n_inner = batch
  const BinaryMatrix* masks = nullptr;
  std::size_t variants = 1;
  /// (variant, b, agent) rows × h^r; empty means zeros.
  Matrix initial_hidden;
};

struct SequenceOutput {
  ad::Var q;             // rows (t, variant, b, agent) × n_actions
  ad::Var final_hidden;  // rows (variant, b, agent) × h^r
};

class AgentNetwork {
 public:
  /// Exactly one attention layer sits on the decentralized path; a second
  /// layer would relay information from entities an agent cannot observe.
  static constexpr std::size_t kAttentionLayers = 1;

  AgentNetwork(ParamStore& store, const AgentNetworkConfig& cfg, Rng& rng);

  const AgentNetworkConfig& config() const { return cfg_; }

  SequenceOutput forward(ad::Tape& tape, const SequenceInput& in) const;

  /// One time step for one state under one mask.
  std::pair<ad::Var, Matrix> utilities(ad::Tape& tape, const Matrix& entities,
                                       std::span<const std::size_t> agents,
                                       const BinaryMatrix& mask,
                                       const RecurrentState& state) const;

  struct TripleOutput {
    ad::Var q, q_in, q_out;
    RecurrentState state, state_in, state_out;
  };
  /// Utilities under M^μ, M^μ_I and M^μ_O for one state, each with its own
  /// recurrent stream, evaluated together.
  TripleOutput triple_pass(ad::Tape& tape, const Matrix& entities,
                           std::span<const std::size_t> agents, const BinaryMatrix& mask,
                           const BinaryMatrix& mask_in, const BinaryMatrix& mask_out,
                           const RecurrentState& state, const RecurrentState& state_in,
                           const RecurrentState& state_out) const;

 private:
  AgentNetworkConfig cfg_;
  Linear encoder_;
  MultiHeadAttention attention_;
  GruCell gru_;
  Linear head_;
};

/// Per-agent argmax over available actions; ties go to the lowest index.
/// Throws std::invalid_argument when an agent has no available action.
std::vector<std::size_t> greedy_actions(const Matrix& q, const BinaryMatrix& available);

}  // namespace refil
