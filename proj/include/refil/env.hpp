#pragma once

// Environment contract for entity-based cooperative tasks, and the group
// matching game.

#include <cstddef>
#include <cstdint>
#include <span>
#include <vector>

#include "refil/layers.hpp"
#include "refil/tensor.hpp"

namespace refil::env {

/// What every environment hands to the learner at each step.
struct Observation {
  Matrix entities;             // |E| × d, inactive rows zeroed
  BinaryMatrix observability;  // |A| × |E|
  BinaryMatrix available;      // |A| × n_actions
  std::vector<std::size_t> agents;
  std::vector<std::uint8_t> active;  // |E|
};

struct StepInfo {
  bool win = false;
  bool truncated = false;  // step limit reached without success
  int completed = 0;
  int broken = 0;
};

struct StepResult {
  Observation observation;
  double reward = 0.0;
  bool terminated = false;  // success or step limit
  StepInfo info;
};

struct EnvSpec {
  std::size_t n_entities = 0;
  std::size_t n_agents = 0;
  std::size_t feature_dim = 0;
  std::size_t n_actions = 0;
  std::size_t episode_limit = 0;
};

class Environment {
 public:
  virtual ~Environment() = default;
  virtual EnvSpec spec() const = 0;
  virtual Observation reset(Rng& rng) = 0;
  virtual StepResult step(std::span<const std::size_t> actions) = 0;
  /// True group per entity; consumed only by oracle partitions.
  virtual std::vector<int> ground_truth_groups() const = 0;
};

struct GroupMatchingConfig {
  std::size_t n_agents = 8;
  std::size_t n_cells = 6;
  std::size_t n_groups = 2;
  std::size_t episode_limit = 50;

  /// Throws std::invalid_argument unless n_agents >= n_groups >= 1 and n_cells >= 2.
  void validate() const;
};

enum Move : std::size_t { kClockwise = 0, kStay = 1, kCounterClockwise = 2 };

/// Agents on a ring of cells must gather with the rest of their group.
/// Reward per step: -0.1, +2.5 per group that becomes complete, -2.5 per
/// complete group that breaks. The episode ends when every group is complete
/// at once, or at the step limit.
class GroupMatchingGame final : public Environment {
 public:
  static constexpr double kStepPenalty = -0.1;
  static constexpr double kGroupReward = 2.5;
  static constexpr std::size_t kActions = 3;

  explicit GroupMatchingGame(GroupMatchingConfig cfg);

  EnvSpec spec() const override;
  Observation reset(Rng& rng) override;
  StepResult step(std::span<const std::size_t> actions) override;
  std::vector<int> ground_truth_groups() const override;

  /// Places agents explicitly; used by tests and scripted scenarios.
  Observation reset_to(std::vector<std::size_t> cells, std::vector<std::size_t> groups);

  const GroupMatchingConfig& config() const { return cfg_; }
  const std::vector<std::size_t>& cells() const { return cells_; }
  const std::vector<std::size_t>& groups() const { return groups_; }
  const std::vector<bool>& formed() const { return formed_; }
  std::size_t steps() const { return steps_; }

 private:
  Observation observe() const;
  std::vector<bool> complete_groups() const;

  GroupMatchingConfig cfg_;
  std::vector<std::size_t> cells_;
  std::vector<std::size_t> groups_;
  std::vector<bool> formed_;
  std::size_t steps_ = 0;
  bool started_ = false;
};

}  // namespace refil::env
