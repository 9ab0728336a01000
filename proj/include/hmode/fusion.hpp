#pragma once

#include <cstddef>
#include <span>
#include <vector>

#include "hmode/groundtruth.hpp"
#include "hmode/tensor.hpp"

namespace hmode {

/// Overlapping first-level groups: every N-subset of the K experts.
struct GroupPlan {
  std::size_t experts = 0;     // K
  std::size_t group_size = 0;  // N
  // 0-based expert indices, increasing within a group; groups in lexicographic order.
  std::vector<std::vector<std::size_t>> groups;

  std::size_t group_count() const { return groups.size(); }
};

std::size_t binomial(std::size_t n, std::size_t k);

/// Requires 1 <= N < K.
GroupPlan enumerate_groups(std::size_t experts, std::size_t group_size);

/// Number of supervised density outputs: K experts, M groups and the final map.
inline std::size_t supervised_output_count(const GroupPlan& plan) {
  return plan.experts + plan.group_count() + 1;
}

/// Gr_i = sum_j G1_ij * E_{groups[i][j]}, element-wise.
template <typename T>
std::vector<DensityMap<T>> fuse_level1(std::span<const DensityMap<T>> experts,
                                       const std::vector<std::vector<Tensor<T>>>& level1_weights,
                                       const GroupPlan& plan);

/// E_out = sum_i G2_i * Gr_i, element-wise.
template <typename T>
DensityMap<T> fuse_level2(std::span<const DensityMap<T>> group_outputs,
                          std::span<const Tensor<T>> level2_weights);

/// Per-pixel arithmetic mean of the experts.
template <typename T>
DensityMap<T> fuse_baseline_average(std::span<const DensityMap<T>> experts);

/// Single-level mixture: sum_k G_k * E_k.
template <typename T>
DensityMap<T> fuse_single_level_moe(std::span<const DensityMap<T>> experts,
                                    std::span<const Tensor<T>> weights);

}  // namespace hmode
