#include "refil/env.hpp"

#include <algorithm>
#include <stdexcept>
#include <string>

namespace refil::env {

void GroupMatchingConfig::validate() const {
  if (n_groups < 1) throw std::invalid_argument("group matching: n_groups must be >= 1");
  if (n_agents < n_groups) throw std::invalid_argument("group matching: n_agents < n_groups");
  if (n_cells < 2) throw std::invalid_argument("group matching: n_cells must be >= 2");
  if (episode_limit < 1) throw std::invalid_argument("group matching: episode_limit must be >= 1");
}

GroupMatchingGame::GroupMatchingGame(GroupMatchingConfig cfg) : cfg_(cfg) { cfg_.validate(); }

EnvSpec GroupMatchingGame::spec() const {
  return EnvSpec{cfg_.n_agents, cfg_.n_agents, cfg_.n_cells + cfg_.n_groups, kActions,
                 cfg_.episode_limit};
}

Observation GroupMatchingGame::reset(Rng& rng) {
  std::uniform_int_distribution<std::size_t> cell(0, cfg_.n_cells - 1);
  std::uniform_int_distribution<std::size_t> group(0, cfg_.n_groups - 1);
  std::vector<std::size_t> cells(cfg_.n_agents), groups(cfg_.n_agents);
  for (std::size_t a = 0; a < cfg_.n_agents; ++a) {
    cells[a] = cell(rng);
    groups[a] = group(rng);
  }
  return reset_to(std::move(cells), std::move(groups));
}

Observation GroupMatchingGame::reset_to(std::vector<std::size_t> cells,
                                        std::vector<std::size_t> groups) {
  if (cells.size() != cfg_.n_agents || groups.size() != cfg_.n_agents) {
    throw std::invalid_argument("group matching: one cell and group per agent required");
  }
  for (std::size_t a = 0; a < cfg_.n_agents; ++a) {
    if (cells[a] >= cfg_.n_cells || groups[a] >= cfg_.n_groups) {
      throw std::invalid_argument("group matching: cell or group out of range");
    }
  }
  cells_ = std::move(cells);
  groups_ = std::move(groups);
  steps_ = 0;
  started_ = true;
  formed_ = complete_groups();
  return observe();
}

std::vector<bool> GroupMatchingGame::complete_groups() const {
  // A group is complete when all of its members share one cell. Empty groups
  // are vacuously complete and never produce events.
  std::vector<bool> complete(cfg_.n_groups, true);
  std::vector<long> where(cfg_.n_groups, -1);
  for (std::size_t a = 0; a < cfg_.n_agents; ++a) {
    const std::size_t g = groups_[a];
    if (where[g] < 0) {
      where[g] = static_cast<long>(cells_[a]);
    } else if (where[g] != static_cast<long>(cells_[a])) {
      complete[g] = false;
    }
  }
  return complete;
}

StepResult GroupMatchingGame::step(std::span<const std::size_t> actions) {
  if (!started_) throw std::logic_error("group matching: step before reset");
  if (actions.size() != cfg_.n_agents) {
    throw std::invalid_argument("group matching: expected " + std::to_string(cfg_.n_agents) +
                                " actions, got " + std::to_string(actions.size()));
  }
  for (std::size_t u : actions) {
    if (u >= kActions) throw std::invalid_argument("group matching: invalid action id " +
                                                   std::to_string(u));
  }
  const std::size_t n = cfg_.n_cells;
  for (std::size_t a = 0; a < cfg_.n_agents; ++a) {
    if (actions[a] == kClockwise) cells_[a] = (cells_[a] + 1) % n;
    if (actions[a] == kCounterClockwise) cells_[a] = (cells_[a] + n - 1) % n;
  }
  ++steps_;

  StepResult out;
  const std::vector<bool> now = complete_groups();
  for (std::size_t g = 0; g < cfg_.n_groups; ++g) {
    if (now[g] && !formed_[g]) ++out.info.completed;
    if (!now[g] && formed_[g]) ++out.info.broken;
  }
  formed_ = now;
  out.reward = kStepPenalty + kGroupReward * out.info.completed - kGroupReward * out.info.broken;
  out.info.win = std::all_of(now.begin(), now.end(), [](bool c) { return c; });
  out.info.truncated = !out.info.win && steps_ >= cfg_.episode_limit;
  out.terminated = out.info.win || out.info.truncated;
  if (out.terminated) started_ = false;
  out.observation = observe();
  return out;
}

std::vector<int> GroupMatchingGame::ground_truth_groups() const {
  return std::vector<int>(groups_.begin(), groups_.end());
}

Observation GroupMatchingGame::observe() const {
  const std::size_t na = cfg_.n_agents;
  Observation obs;
  obs.entities = Matrix(na, cfg_.n_cells + cfg_.n_groups);
  for (std::size_t a = 0; a < na; ++a) {
    obs.entities(a, cells_[a]) = 1.0;
    obs.entities(a, cfg_.n_cells + groups_[a]) = 1.0;
  }
  obs.observability = BinaryMatrix(na, na, 1);
  obs.available = BinaryMatrix(na, kActions, 1);
  obs.agents.resize(na);
  for (std::size_t a = 0; a < na; ++a) obs.agents[a] = a;
  obs.active.assign(na, 1);
  return obs;
}

}  // namespace refil::env
