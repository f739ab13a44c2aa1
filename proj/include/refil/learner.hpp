#pragma once

#include <cstddef>
#include <cstdint>
#include <deque>
#include <memory>
#include <optional>
#include <span>
#include <vector>

#include "refil/agent_network.hpp"
#include "refil/env.hpp"
#include "refil/mixer.hpp"
#include "refil/partition.hpp"

namespace refil {

enum class PartitionStrategy { random, fixed_oracle, randomized_oracle };

struct LearnerConfig {
  double lr = 0.0005;
  double rms_alpha = 0.99;
  double rms_eps = 1e-5;
  double gamma = 0.99;
  std::size_t target_update_interval = 200;  // episodes
  double grad_clip = 10.0;
  std::size_t buffer_capacity = 5000;  // episodes
  std::size_t batch_size = 32;         // episodes
  double lambda = 0.5;
  double epsilon_start = 1.0;
  double epsilon_end = 0.05;
  std::size_t epsilon_anneal_steps = 50000;
  MixerKind mixer = MixerKind::qmix;
  PartitionStrategy partition = PartitionStrategy::random;
  std::size_t partition_groups = 2;

  void validate() const;
  /// Linear anneal from epsilon_start to epsilon_end over epsilon_anneal_steps.
  double epsilon_at(std::size_t env_steps) const;
};

struct ModelConfig {
  AgentNetworkConfig agent;
  MixerConfig mixer;
  MixerKind kind = MixerKind::qmix;
};

/// Agent network plus (for QMIX mixing) the hypernetworks, with their
/// parameters in one store.
class QModel {
 public:
  QModel(const ModelConfig& cfg, std::uint64_t seed);
  QModel(const QModel&) = delete;
  QModel& operator=(const QModel&) = delete;

  const ModelConfig& config() const { return cfg_; }
  ParamStore& params() { return store_; }
  const ParamStore& params() const { return store_; }
  const AgentNetwork& agent() const { return *agent_; }
  /// Null for VDN mixing.
  const MixingHypernetworks* hyper() const { return hyper_.get(); }

 private:
  ModelConfig cfg_;
  ParamStore store_;
  std::unique_ptr<AgentNetwork> agent_;
  std::unique_ptr<MixingHypernetworks> hyper_;
};

/// One collected episode: length + 1 observations (the last one is the state
/// after the final transition).
struct Episode {
  std::vector<env::Observation> states;
  std::vector<std::vector<std::size_t>> actions;
  std::vector<double> rewards;
  /// 1 when the transition ended the episode by success (no bootstrap).
  std::vector<std::uint8_t> terminated;
  std::vector<int> ground_truth;
  bool win = false;

  std::size_t length() const { return rewards.size(); }
  double total_return() const;
};

/// Padded tensors for a batch of B episodes over T = longest length steps.
struct EpisodeBatch {
  std::size_t batch = 0;
  std::size_t steps = 0;
  std::size_t n_entities = 0;
  std::size_t n_actions = 0;
  std::size_t feature_dim = 0;
  std::vector<std::size_t> agents;

  Matrix entities;             // (T+1)·B·|E| × d, rows (t, b, e)
  BinaryMatrix observability;  // (T+1)·B·|A| × |E|, rows (t, b, a)
  BinaryMatrix active;         // (T+1)·B × |E|
  BinaryMatrix available;      // (T+1)·B·|A| × n_actions
  std::vector<std::size_t> actions;  // T·B·|A|
  Matrix rewards;              // T·B × 1, rows (t, b)
  Matrix terminated;           // T·B × 1
  Matrix filled;               // T·B × 1, 0 on padding
  std::vector<std::vector<int>> ground_truth;  // per episode

  std::size_t n_agents() const { return agents.size(); }
  static EpisodeBatch from_episodes(std::span<const Episode* const> episodes);
};

/// FIFO episode store; sampling is uniform with replacement.
class ReplayBuffer {
 public:
  explicit ReplayBuffer(std::size_t capacity);
  void insert(Episode episode);
  std::size_t size() const { return episodes_.size(); }
  std::size_t capacity() const { return capacity_; }
  const Episode& at(std::size_t i) const { return episodes_.at(i); }
  std::vector<const Episode*> sample(std::size_t n, Rng& rng) const;

 private:
  std::size_t capacity_;
  std::deque<Episode> episodes_;
};

struct TrainMetrics {
  double loss = 0.0;
  double loss_q = 0.0;
  double loss_aux = 0.0;
  double grad_norm = 0.0;  // before clipping
};

class Learner {
 public:
  Learner(const ModelConfig& model, const LearnerConfig& cfg, std::uint64_t seed);

  const LearnerConfig& config() const { return cfg_; }
  QModel& live() { return *live_; }
  QModel& target() { return *target_; }
  const QModel& live() const { return *live_; }
  const QModel& target() const { return *target_; }

  /// y_t = r_t + γ (1 − terminal_t) Q_tot_target(τ_{t+1}, argmax of live
  /// utilities at t+1). Rows (t, b).
  Matrix compute_targets(const EpisodeBatch& batch) const;

  /// One partition per episode, drawn with the configured strategy.
  std::vector<partition::GroupLabels> sample_partitions(const EpisodeBatch& batch);

  /// Masked mean squared TD error of Q_tot against detached targets.
  ad::Var loss_q(ad::Tape& tape, const EpisodeBatch& batch, const Matrix& targets) const;
  /// Same targets, Q_tot_aux from in-group / out-group utilities.
  ad::Var loss_aux(ad::Tape& tape, const EpisodeBatch& batch, const Matrix& targets,
                   std::span<const partition::GroupLabels> partitions) const;

  /// One RMSProp step on (1 − λ) L_Q + λ L_aux with global norm clipping.
  TrainMetrics train_step(const EpisodeBatch& batch);

  /// Copies live parameters to the target when `episode_count` has advanced by
  /// at least the interval since the previous copy. Returns true on copy.
  bool update_target(std::size_t episode_count);

  std::size_t train_steps() const { return train_steps_; }
  Rng& partition_rng() { return partition_rng_; }

 private:
  struct Losses {
    std::optional<ad::Var> q;
    std::optional<ad::Var> aux;
    Matrix live_q_full;  // (T+1)·B·|A| × n_actions, detached
  };
  Losses build(ad::Tape& tape, const EpisodeBatch& batch, const Matrix* targets,
               const std::vector<partition::GroupLabels>* partitions, bool want_q) const;
  Matrix targets_from(const EpisodeBatch& batch, const Matrix& live_q_full) const;
  void apply_gradients();

  ModelConfig model_cfg_;
  LearnerConfig cfg_;
  std::unique_ptr<QModel> live_;
  std::unique_ptr<QModel> target_;
  std::vector<Matrix> square_avg_;
  Rng partition_rng_;
  std::size_t last_target_update_ = 0;
  std::size_t train_steps_ = 0;
};

}  // namespace refil
