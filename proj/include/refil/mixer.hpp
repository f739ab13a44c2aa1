#pragma once

// Monotonic mixing of per-agent utilities with state-conditioned weights.
//
// Four attention hypernetworks (one per mixer parameter) read the full entity
// state with the agents as queries, so the generated first layer has one row
// per agent whatever the agent count:
//   W1 = softmax over h^m of the |A|×h^m output        (per agent row)
//   b1 = mean over agents of the |A|×h^m output
//   w2 = softmax over h^m of the agent-mean
//   b2 = mean of every element
// Softmax keeps W1 and w2 strictly positive, which makes Q_tot monotone.

#include <cstddef>
#include <vector>

#include "refil/attention.hpp"
#include "refil/layers.hpp"

namespace refil {

enum class MixerKind { qmix, vdn };

struct MixerConfig {
  std::size_t feature_dim = 0;
  std::size_t embed_dim = 128;  // h^a
  std::size_t heads = 4;
  std::size_t mixing_dim = 32;  // h^m
};

/// Generated mixing parameters for N samples of k factors each.
struct MixerParams {
  ad::Var w1;  // N·k × h^m, rows of sample i are i·k .. i·k+k-1
  ad::Var b1;  // N × h^m
  ad::Var w2;  // N × h^m
  ad::Var b2;  // N × 1
  std::size_t factors = 0;

  std::size_t samples() const { return b1.rows(); }
};

/// eFF + ReLU, one attention layer with agents as queries, ReLU, linear to h^m.
class HyperNetwork {
 public:
  HyperNetwork() = default;
  HyperNetwork(ParamStore& store, const std::string& name, const MixerConfig& cfg, Rng& rng);

  /// Output rows follow the attention order (t, variant, b, agent).
  ad::Var forward(ad::Tape& tape, ad::Var entities, const EntityLayout& layout,
                  const BinaryMatrix& masks, std::size_t variants) const;

 private:
  Linear encoder_;
  MultiHeadAttention attention_;
  Linear output_;
};

class MixingHypernetworks {
 public:
  MixingHypernetworks(ParamStore& store, const MixerConfig& cfg, Rng& rng);

  const MixerConfig& config() const { return cfg_; }

  /// Mixer parameters for every (t, variant, b) sample in that order, with
  /// |A| factors each.
  MixerParams generate(ad::Tape& tape, const Matrix& entities, const EntityLayout& layout,
                       const BinaryMatrix& masks, std::size_t variants) const;

 private:
  MixerConfig cfg_;
  HyperNetwork w1_, b1_, w2_, b2_;
};

/// Restricts generated parameters to the listed samples, in order.
MixerParams select_samples(const MixerParams& params, std::span<const std::size_t> samples);

/// Q_tot = ELU(qᵀ W1 + b1ᵀ) w2 + b2 for each row of q [N × k] → [N × 1].
ad::Var mix(ad::Var q, const MixerParams& params);

/// 2|A|-factor parameters: W1 rows of the in-group pass followed by those of
/// the out-group pass; b1, w2 and b2 are the average of the two passes.
MixerParams combine_aux(const MixerParams& in_group, const MixerParams& out_group);

/// mix([q_in, q_out], combine_aux(in_group, out_group)).
ad::Var mix_aux(ad::Var q_in, ad::Var q_out, const MixerParams& in_group,
                const MixerParams& out_group);

/// Single-state form: generates both parameter sets from `entities` with the
/// in-group and out-group hypernetwork masks, then mixes the 2|A| factors.
ad::Var mix_aux(ad::Tape& tape, ad::Var q_in, ad::Var q_out, const Matrix& entities,
                std::span<const std::size_t> agents, const BinaryMatrix& in_mask,
                const BinaryMatrix& out_mask, const MixingHypernetworks& hyper);

/// Row sums [N × k] → [N × 1].
ad::Var mix_vdn(ad::Var q);

}  // namespace refil
