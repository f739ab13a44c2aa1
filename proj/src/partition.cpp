#include "refil/partition.hpp"

#include <algorithm>
#include <map>
#include <random>
#include <stdexcept>
#include <string>

namespace refil::partition {

PartitionVector sample_partition(std::size_t n_entities, Rng& rng) {
  if (n_entities == 0) throw std::invalid_argument("sample_partition: no entities");
  std::uniform_real_distribution<double> uniform(0.0, 1.0);
  return sample_partition_with(n_entities, uniform(rng), rng);
}

PartitionVector sample_partition_with(std::size_t n_entities, double p, Rng& rng) {
  std::bernoulli_distribution draw(std::clamp(p, 0.0, 1.0));
  PartitionVector m(n_entities);
  for (auto& bit : m) bit = draw(rng) ? 1 : 0;
  return m;
}

GroupLabels labels_from_vector(const PartitionVector& m) {
  return GroupLabels(m.begin(), m.end());
}

GroupMasks build_group_masks(const PartitionVector& m, std::span<const std::size_t> agents) {
  GroupMasks out{BinaryMatrix(agents.size(), m.size()), BinaryMatrix(agents.size(), m.size())};
  for (std::size_t i = 0; i < agents.size(); ++i) {
    if (agents[i] >= m.size()) {
      throw std::out_of_range("build_group_masks: agent index " + std::to_string(agents[i]));
    }
    const bool ma = m[agents[i]] != 0;
    for (std::size_t e = 0; e < m.size(); ++e) {
      const bool me = m[e] != 0;
      const bool same = (ma && me) || (!ma && !me);
      out.in_group(i, e) = same ? 1 : 0;
      out.out_group(i, e) = same ? 0 : 1;
    }
  }
  return out;
}

GroupMasks build_group_masks(std::span<const int> labels, std::span<const std::size_t> agents) {
  GroupMasks out{BinaryMatrix(agents.size(), labels.size()),
                 BinaryMatrix(agents.size(), labels.size())};
  for (std::size_t i = 0; i < agents.size(); ++i) {
    if (agents[i] >= labels.size()) {
      throw std::out_of_range("build_group_masks: agent index " + std::to_string(agents[i]));
    }
    for (std::size_t e = 0; e < labels.size(); ++e) {
      const bool same = labels[agents[i]] == labels[e];
      out.in_group(i, e) = same ? 1 : 0;
      out.out_group(i, e) = same ? 0 : 1;
    }
  }
  return out;
}

GroupMasks apply_observability(const GroupMasks& masks, const BinaryMatrix& observability) {
  require_same_shape(masks.in_group, observability, "apply_observability");
  require_same_shape(masks.out_group, observability, "apply_observability");
  GroupMasks out = masks;
  for (std::size_t i = 0; i < observability.size(); ++i) {
    out.in_group[i] &= observability[i];
    out.out_group[i] &= observability[i];
  }
  return out;
}

std::vector<PartitionVector> sample_multi_partition(std::size_t n_entities, std::size_t k_groups,
                                                    Rng& rng) {
  if (k_groups < 2) throw std::invalid_argument("sample_multi_partition: need k >= 2");
  if (k_groups == 2) {
    PartitionVector m = sample_partition(n_entities, rng);
    PartitionVector rest(m.size());
    for (std::size_t e = 0; e < m.size(); ++e) rest[e] = m[e] ? 0 : 1;
    return {std::move(m), std::move(rest)};
  }
  if (n_entities == 0) throw std::invalid_argument("sample_multi_partition: no entities");
  // Uniform point on the simplex: normalized unit exponentials.
  std::exponential_distribution<double> expo(1.0);
  std::vector<double> weights(k_groups);
  for (double& w : weights) w = expo(rng);
  std::discrete_distribution<std::size_t> pick(weights.begin(), weights.end());
  std::vector<PartitionVector> groups(k_groups, PartitionVector(n_entities, 0));
  for (std::size_t e = 0; e < n_entities; ++e) groups[pick(rng)][e] = 1;
  return groups;
}

GroupLabels labels_from_vectors(std::span<const PartitionVector> groups) {
  if (groups.empty()) return {};
  const std::size_t n = groups[0].size();
  GroupLabels labels(n, -1);
  for (std::size_t g = 0; g < groups.size(); ++g) {
    if (groups[g].size() != n) throw DimensionError("labels_from_vectors: length mismatch");
    for (std::size_t e = 0; e < n; ++e) {
      if (!groups[g][e]) continue;
      if (labels[e] != -1) throw std::invalid_argument("labels_from_vectors: groups overlap");
      labels[e] = static_cast<int>(g);
    }
  }
  if (std::find(labels.begin(), labels.end(), -1) != labels.end()) {
    throw std::invalid_argument("labels_from_vectors: groups do not cover every entity");
  }
  return labels;
}

GroupLabels oracle_labels(std::span<const int> ground_truth, OracleMode mode, Rng& rng) {
  for (std::size_t e = 0; e < ground_truth.size(); ++e) {
    if (ground_truth[e] < 0) {
      throw std::invalid_argument("oracle partition: entity " + std::to_string(e) +
                                  " has no group assignment");
    }
  }
  GroupLabels labels(ground_truth.begin(), ground_truth.end());
  if (mode == OracleMode::fixed) return labels;

  std::map<int, std::vector<std::size_t>> members;
  for (std::size_t e = 0; e < ground_truth.size(); ++e) members[ground_truth[e]].push_back(e);
  for (const auto& [group, entities] : members) {
    const PartitionVector split = sample_partition(entities.size(), rng);
    for (std::size_t i = 0; i < entities.size(); ++i) labels[entities[i]] = 2 * group + split[i];
  }
  return labels;
}

GroupMasks oracle_masks(std::span<const int> ground_truth, std::span<const std::size_t> agents,
                        OracleMode mode, Rng& rng) {
  const GroupLabels labels = oracle_labels(ground_truth, mode, rng);
  return build_group_masks(labels, agents);
}

}  // namespace refil::partition
