#include "hmode/fusion.hpp"

#include "hmode/ops.hpp"

namespace hmode {

std::size_t binomial(std::size_t n, std::size_t k) {
  if (k > n) return 0;
  std::size_t r = 1;
  for (std::size_t i = 1; i <= k; ++i) r = r * (n - k + i) / i;
  return r;
}

GroupPlan enumerate_groups(std::size_t experts, std::size_t group_size) {
  if (group_size < 1 || group_size >= experts) {
    throw InvalidArgument("enumerate_groups: need 1 <= N < K, got K=" + std::to_string(experts) +
                          " N=" + std::to_string(group_size));
  }
  GroupPlan plan{experts, group_size, {}};
  std::vector<std::size_t> pick(group_size);
  for (std::size_t i = 0; i < group_size; ++i) pick[i] = i;
  while (true) {
    plan.groups.push_back(pick);
    // Advance to the next combination in lexicographic order.
    std::size_t i = group_size;
    while (i > 0 && pick[i - 1] == experts - group_size + (i - 1)) --i;
    if (i == 0) break;
    ++pick[i - 1];
    for (std::size_t j = i; j < group_size; ++j) pick[j] = pick[j - 1] + 1;
  }
  return plan;
}

namespace {

template <typename T>
void require_same_shape(const Tensor<T>& a, const Tensor<T>& b, const char* op) {
  if (a.shape() != b.shape()) {
    throw InvalidShape(std::string(op) + ": " + shape_string(a.shape()) + " vs " +
                       shape_string(b.shape()));
  }
}

template <typename T>
Tensor<T> weighted_sum(std::span<const Tensor<T>> maps, std::span<const Tensor<T>> weights,
                       const char* op) {
  if (maps.empty() || maps.size() != weights.size()) {
    throw InvalidArgument(std::string(op) + ": expected " + std::to_string(maps.size()) +
                          " weight maps, got " + std::to_string(weights.size()));
  }
  Tensor<T> acc;
  for (std::size_t i = 0; i < maps.size(); ++i) {
    require_same_shape(maps[i], weights[i], op);
    auto term = ops::mul(weights[i], maps[i]);
    acc = acc.defined() ? ops::add(acc, term) : term;
  }
  return acc;
}

}  // namespace

template <typename T>
std::vector<DensityMap<T>> fuse_level1(std::span<const DensityMap<T>> experts,
                                       const std::vector<std::vector<Tensor<T>>>& level1_weights,
                                       const GroupPlan& plan) {
  if (experts.size() != plan.experts) {
    throw InvalidArgument("fuse_level1: plan expects " + std::to_string(plan.experts) +
                          " experts, got " + std::to_string(experts.size()));
  }
  if (level1_weights.size() != plan.group_count()) {
    throw InvalidArgument("fuse_level1: expected " + std::to_string(plan.group_count()) +
                          " weight groups");
  }
  std::vector<DensityMap<T>> out;
  out.reserve(plan.group_count());
  for (std::size_t i = 0; i < plan.group_count(); ++i) {
    std::vector<Tensor<T>> members;
    for (std::size_t e : plan.groups[i]) members.push_back(experts[e]);
    out.push_back(weighted_sum<T>(members, level1_weights[i], "fuse_level1"));
  }
  return out;
}

template <typename T>
DensityMap<T> fuse_level2(std::span<const DensityMap<T>> group_outputs,
                          std::span<const Tensor<T>> level2_weights) {
  return weighted_sum<T>(group_outputs, level2_weights, "fuse_level2");
}

template <typename T>
DensityMap<T> fuse_baseline_average(std::span<const DensityMap<T>> experts) {
  if (experts.empty()) throw InvalidArgument("fuse_baseline_average: no experts");
  Tensor<T> acc = experts[0];
  for (std::size_t k = 1; k < experts.size(); ++k) {
    require_same_shape(experts[0], experts[k], "fuse_baseline_average");
    acc = ops::add(acc, experts[k]);
  }
  return ops::scale(acc, T(1) / static_cast<T>(experts.size()));
}

template <typename T>
DensityMap<T> fuse_single_level_moe(std::span<const DensityMap<T>> experts,
                                    std::span<const Tensor<T>> weights) {
  return weighted_sum<T>(experts, weights, "fuse_single_level_moe");
}

#define HMODE_INSTANTIATE_FUSION(T)                                                        \
  template std::vector<DensityMap<T>> fuse_level1(std::span<const DensityMap<T>>,          \
                                                  const std::vector<std::vector<Tensor<T>>>&, \
                                                  const GroupPlan&);                       \
  template DensityMap<T> fuse_level2(std::span<const DensityMap<T>>,                       \
                                     std::span<const Tensor<T>>);                          \
  template DensityMap<T> fuse_baseline_average(std::span<const DensityMap<T>>);            \
  template DensityMap<T> fuse_single_level_moe(std::span<const DensityMap<T>>,             \
                                               std::span<const Tensor<T>>);

HMODE_INSTANTIATE_FUSION(float)
HMODE_INSTANTIATE_FUSION(double)

}  // namespace hmode
