#pragma once

// Random entity partitions and the in-group / out-group attention masks built
// from them.

#include <cstddef>
#include <cstdint>
#include <span>
#include <vector>

#include "refil/layers.hpp"
#include "refil/tensor.hpp"

namespace refil::partition {

/// m_e = 1 iff entity e is in the first group.
using PartitionVector = std::vector<std::uint8_t>;

/// Group label per entity; two entities share a group iff their labels match.
using GroupLabels = std::vector<int>;

/// Agent × entity masks. in_group[a, e] = 1 iff a and e share a group.
struct GroupMasks {
  BinaryMatrix in_group;
  BinaryMatrix out_group;
};

/// Draws p ~ U(0, 1) once, then m_e ~ Bernoulli(p) independently.
PartitionVector sample_partition(std::size_t n_entities, Rng& rng);

/// The second stage alone, with a fixed inclusion probability.
PartitionVector sample_partition_with(std::size_t n_entities, double p, Rng& rng);

/// M_I = m_A mᵀ ∨ ¬m_A ¬mᵀ, M_O = ¬M_I.
GroupMasks build_group_masks(const PartitionVector& m, std::span<const std::size_t> agents);

/// Same-label co-membership for any number of groups.
GroupMasks build_group_masks(std::span<const int> labels, std::span<const std::size_t> agents);

/// Elementwise AND of both masks with the observability mask.
GroupMasks apply_observability(const GroupMasks& masks, const BinaryMatrix& observability);

/// k disjoint vectors covering every entity. Group weights are drawn uniformly
/// from the simplex and each entity picks a group from them; k = 2 is exactly
/// {m, ¬m} for m = sample_partition(n).
std::vector<PartitionVector> sample_multi_partition(std::size_t n_entities, std::size_t k_groups,
                                                    Rng& rng);

GroupLabels labels_from_vectors(std::span<const PartitionVector> groups);
GroupLabels labels_from_vector(const PartitionVector& m);

enum class OracleMode { fixed, randomized };

/// Partition derived from true groups. Fixed mode uses them as is; randomized
/// mode splits every true group with sample_partition over its own members,
/// so entities from different true groups never share a sub-group.
GroupLabels oracle_labels(std::span<const int> ground_truth, OracleMode mode, Rng& rng);

GroupMasks oracle_masks(std::span<const int> ground_truth, std::span<const std::size_t> agents,
                        OracleMode mode, Rng& rng);

}  // namespace refil::partition
