#pragma once

#include <array>
#include <cstddef>
#include <vector>

#include "hmode/backbone.hpp"
#include "hmode/fusion.hpp"
#include "hmode/groundtruth.hpp"

namespace hmode {

/// Hard regions of one density output, ranked by ground-truth count.
template <typename T>
struct HardRegionRanking {
  std::vector<std::size_t> selected;  // flat cell indices, largest local error first
  std::vector<std::size_t> order;     // the same cells by descending GT count
  Tensor<T> lx;                       // predicted counts in `order`; carries gradient
  std::array<std::vector<std::size_t>, 3> sublists;  // positions into lx with stride 3
};

inline constexpr std::size_t kDefaultHardRegions = 9;

/// Mean squared pixel error.
template <typename T>
Tensor<T> loss_density(const DensityMap<T>& pred, const DensityMap<T>& gt);

/// Picks the `count` cells with the largest local error (ties: lower flat
/// index first) and orders them by descending GT count with the same
/// tie-break. `count` is clamped to the number of cells.
template <typename T>
HardRegionRanking<T> select_hard_regions(const LocalCountingMap<T>& predicted,
                                         const LocalCountingMap<T>& truth,
                                         const LocalErrorMap<T>& error, std::size_t count);

/// Sum over the three sub-lists of max(0, x_{j+3} - x_j) for consecutive pairs.
template <typename T>
Tensor<T> loss_relative(const HardRegionRanking<T>& ranking);

/// Mean binary cross-entropy between the attention map and the foreground mask.
template <typename T>
Tensor<T> loss_attention(const Tensor<T>& attention, const Tensor<T>& mask);

/// Sum over groups of the squared coefficient of variation (population
/// deviation) of the pixel-integrated level-1 weights.
template <typename T>
Tensor<T> loss_expert_importance(const std::vector<std::vector<Tensor<T>>>& level1_weights,
                                 const GroupPlan& plan);

/// Everything the composite loss compares a forward pass against.
template <typename T>
struct LossTargets {
  DensityMap<T> density;
  Tensor<T> attention_mask;
  LocalCountingMap<T> local_counts;
};

struct LossConfig {
  std::size_t region_size = 16;
  std::size_t hard_regions = kDefaultHardRegions;
  double attention_threshold = kAttentionThreshold;
};

template <typename T>
LossTargets<T> make_loss_targets(const DensityMap<T>& gt_density, const LossConfig& cfg);

template <typename T>
struct LossBreakdown {
  Tensor<T> total;
  Tensor<T> density;     // summed over supervised outputs
  Tensor<T> relative;    // summed over supervised outputs
  Tensor<T> attention;   // zero scalar when the model has no attention module
  Tensor<T> importance;  // zero scalar outside two-level fusion
};

/// Unit-weighted sum of density and relative losses over every supervised
/// output, plus the attention and expert-importance terms.
template <typename T>
LossBreakdown<T> loss_total(const ExpertSet<T>& outputs, const GatingOutputs<T>& gating,
                            const LossTargets<T>& targets, const GroupPlan& plan,
                            const LossConfig& cfg);

}  // namespace hmode
