#include "hmode/losses.hpp"

#include <algorithm>
#include <numeric>

#include "hmode/ops.hpp"

namespace hmode {

template <typename T>
Tensor<T> loss_density(const DensityMap<T>& pred, const DensityMap<T>& gt) {
  if (pred.shape() != gt.shape()) {
    throw InvalidShape("loss_density: " + shape_string(pred.shape()) + " vs " +
                       shape_string(gt.shape()));
  }
  const Tensor<T> diff = ops::sub(pred, gt);
  return ops::mean(ops::mul(diff, diff));
}

template <typename T>
HardRegionRanking<T> select_hard_regions(const LocalCountingMap<T>& predicted,
                                         const LocalCountingMap<T>& truth,
                                         const LocalErrorMap<T>& error, std::size_t count) {
  const Shape& shape = predicted.counts.shape();
  if (truth.counts.shape() != shape || error.errors.shape() != shape) {
    throw InvalidShape("select_hard_regions: local maps differ in shape");
  }
  if (count < 1) throw InvalidArgument("select_hard_regions: need at least one region");
  const std::size_t cells = predicted.counts.numel();
  count = std::min(count, cells);

  auto r = error.errors.values();
  std::vector<std::size_t> idx(cells);
  std::iota(idx.begin(), idx.end(), std::size_t{0});
  std::stable_sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) { return r[a] > r[b]; });

  HardRegionRanking<T> out;
  out.selected.assign(idx.begin(), idx.begin() + static_cast<std::ptrdiff_t>(count));
  out.order = out.selected;
  std::sort(out.order.begin(), out.order.end());
  auto g = truth.counts.values();
  std::stable_sort(out.order.begin(), out.order.end(),
                   [&](std::size_t a, std::size_t b) { return g[a] > g[b]; });
  out.lx = ops::gather(predicted.counts, out.order);
  for (std::size_t pos = 0; pos < count; ++pos) out.sublists[pos % 3].push_back(pos);
  return out;
}

template <typename T>
Tensor<T> loss_relative(const HardRegionRanking<T>& ranking) {
  std::vector<std::size_t> earlier, later;
  for (const auto& sub : ranking.sublists) {
    for (std::size_t j = 0; j + 1 < sub.size(); ++j) {
      earlier.push_back(sub[j]);
      later.push_back(sub[j + 1]);
    }
  }
  if (earlier.empty()) return Tensor<T>::scalar(T(0));
  const Tensor<T> gap = ops::sub(ops::gather(ranking.lx, later), ops::gather(ranking.lx, earlier));
  return ops::sum(ops::relu(gap));
}

template <typename T>
Tensor<T> loss_attention(const Tensor<T>& attention, const Tensor<T>& mask) {
  return ops::binary_cross_entropy(attention, mask);
}

template <typename T>
Tensor<T> loss_expert_importance(const std::vector<std::vector<Tensor<T>>>& level1_weights,
                                 const GroupPlan& plan) {
  if (level1_weights.size() != plan.group_count()) {
    throw InvalidArgument("loss_expert_importance: expected " +
                          std::to_string(plan.group_count()) + " weight groups");
  }
  Tensor<T> total;
  for (const auto& group : level1_weights) {
    if (group.size() != plan.group_size) {
      throw InvalidArgument("loss_expert_importance: group has wrong number of weight maps");
    }
    std::vector<Tensor<T>> importance;
    for (const auto& w : group) importance.push_back(ops::sum(w));
    const Tensor<T> scores = ops::stack<T>(importance);
    const Tensor<T> mu = ops::mean(scores);
    const Tensor<T> centred = ops::sub(scores, mu);
    const Tensor<T> variance = ops::mean(ops::mul(centred, centred));
    const Tensor<T> term = ops::div(variance, ops::mul(mu, mu));
    total = total.defined() ? ops::add(total, term) : term;
  }
  return total.defined() ? total : Tensor<T>::scalar(T(0));
}

template <typename T>
LossTargets<T> make_loss_targets(const DensityMap<T>& gt_density, const LossConfig& cfg) {
  return {gt_density, make_attention_gt(gt_density, cfg.attention_threshold),
          make_local_count_map(gt_density, cfg.region_size)};
}

template <typename T>
LossBreakdown<T> loss_total(const ExpertSet<T>& outputs, const GatingOutputs<T>& gating,
                            const LossTargets<T>& targets, const GroupPlan& plan,
                            const LossConfig& cfg) {
  LossBreakdown<T> b;
  for (const DensityMap<T>& pred : outputs.supervised()) {
    const Tensor<T> des = loss_density(pred, targets.density);
    b.density = b.density.defined() ? ops::add(b.density, des) : des;

    // Each output ranks its own hard regions.
    LocalErrorMap<T> err = make_local_error_map(pred, targets.density, cfg.region_size);
    auto ranking = select_hard_regions(make_local_count_map(pred, cfg.region_size),
                                       targets.local_counts, err, cfg.hard_regions);
    const Tensor<T> rel = loss_relative(ranking);
    b.relative = b.relative.defined() ? ops::add(b.relative, rel) : rel;
  }
  b.attention = gating.attention.defined() ? loss_attention(gating.attention, targets.attention_mask)
                                           : Tensor<T>::scalar(T(0));
  b.importance = gating.level1.empty() ? Tensor<T>::scalar(T(0))
                                       : loss_expert_importance(gating.level1, plan);
  b.total = ops::add(ops::add(b.density, b.relative), ops::add(b.attention, b.importance));
  return b;
}

#define HMODE_INSTANTIATE_LOSSES(T)                                                            \
  template Tensor<T> loss_density(const DensityMap<T>&, const DensityMap<T>&);                 \
  template HardRegionRanking<T> select_hard_regions(const LocalCountingMap<T>&,                \
                                                    const LocalCountingMap<T>&,                \
                                                    const LocalErrorMap<T>&, std::size_t);     \
  template Tensor<T> loss_relative(const HardRegionRanking<T>&);                               \
  template Tensor<T> loss_attention(const Tensor<T>&, const Tensor<T>&);                       \
  template Tensor<T> loss_expert_importance(const std::vector<std::vector<Tensor<T>>>&,        \
                                            const GroupPlan&);                                 \
  template LossTargets<T> make_loss_targets(const DensityMap<T>&, const LossConfig&);          \
  template LossBreakdown<T> loss_total(const ExpertSet<T>&, const GatingOutputs<T>&,           \
                                       const LossTargets<T>&, const GroupPlan&, const LossConfig&);

HMODE_INSTANTIATE_LOSSES(float)
HMODE_INSTANTIATE_LOSSES(double)

}  // namespace hmode
