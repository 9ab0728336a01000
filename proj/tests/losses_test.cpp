#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>

#include "fd_oracle.hpp"
#include "hmode/losses.hpp"
#include "hmode/ops.hpp"

namespace hmode {
namespace {

using TD = Tensor<double>;

TD from(std::vector<double> v, Shape s) { return TD(std::move(s), std::move(v)); }

HardRegionRanking<double> ranking_of(std::vector<double> lx) {
  HardRegionRanking<double> r;
  const std::size_t n = lx.size();
  r.lx = from(std::move(lx), {n});
  for (std::size_t p = 0; p < n; ++p) r.sublists[p % 3].push_back(p);
  return r;
}

// Independent brute force: repeated argmax instead of sorting.
struct OracleRanking {
  std::vector<std::size_t> selected, order;
  double loss = 0;
};

OracleRanking oracle(const std::vector<double>& x, const std::vector<double>& xg,
                     const std::vector<double>& r, std::size_t s) {
  OracleRanking o;
  s = std::min(s, x.size());
  std::vector<bool> taken(x.size(), false);
  for (std::size_t k = 0; k < s; ++k) {
    std::size_t best = x.size();
    for (std::size_t i = 0; i < x.size(); ++i) {
      if (!taken[i] && (best == x.size() || r[i] > r[best])) best = i;
    }
    taken[best] = true;
    o.selected.push_back(best);
  }
  std::vector<bool> placed(x.size(), true);
  for (std::size_t i : o.selected) placed[i] = false;
  for (std::size_t k = 0; k < s; ++k) {
    std::size_t best = x.size();
    for (std::size_t i = 0; i < x.size(); ++i) {
      if (!placed[i] && (best == x.size() || xg[i] > xg[best])) best = i;
    }
    placed[best] = true;
    o.order.push_back(best);
  }
  for (std::size_t j = 0; j + 3 < s; ++j) o.loss += std::max(0.0, x[o.order[j + 3]] - x[o.order[j]]);
  return o;
}

TEST(LossDensity, Examples) {
  Rng rng(1);
  const TD gt = hmode::testing::random_tensor({5, 7}, rng, 0, 1, false);
  EXPECT_EQ(loss_density(gt, gt).item(), 0.0);
  EXPECT_NEAR(loss_density(ops::add(gt, TD::scalar(1.0)), gt).item(), 1.0, 1e-12);
  const TD pred = hmode::testing::random_tensor({5, 7}, rng, 0, 1, false);
  double s = 0;
  for (std::size_t i = 0; i < 35; ++i) s += (pred[i] - gt[i]) * (pred[i] - gt[i]);
  EXPECT_NEAR(loss_density(pred, gt).item(), s / 35, 1e-12);
  EXPECT_THROW(loss_density(pred, TD::zeros({7, 5})), InvalidShape);
}

TEST(LossRelative, WorkedExample) {
  EXPECT_EQ(loss_relative(ranking_of({1, 1, 1, 2, 2, 2, 1, 1, 1})).item(), 3.0);
}

TEST(LossRelative, DescendingIsZeroAndShortListsAreZero) {
  EXPECT_EQ(loss_relative(ranking_of({9, 8, 7, 6, 5, 4, 3, 2, 1})).item(), 0.0);
  EXPECT_EQ(loss_relative(ranking_of({1, 2, 3})).item(), 0.0);
  EXPECT_EQ(loss_relative(ranking_of({5})).item(), 0.0);
}

TEST(LossRelative, ScaleAndShift) {
  const std::vector<double> lx{0.3, 1.2, 0.1, 0.9, 0.4, 2.0, 1.5, 0.2, 0.8};
  const double base = loss_relative(ranking_of(lx)).item();
  auto scaled = lx, shifted = lx;
  for (double& v : scaled) v *= 2.5;
  for (double& v : shifted) v += 7.0;
  EXPECT_NEAR(loss_relative(ranking_of(scaled)).item(), 2.5 * base, 1e-12);
  EXPECT_NEAR(loss_relative(ranking_of(shifted)).item(), base, 1e-12);
}

TEST(SelectHardRegions, SublistsForNine) {
  const TD x = TD::zeros({3, 3});
  const auto r = select_hard_regions<double>({x, 1}, {x, 1}, {x, 1}, 9);
  EXPECT_EQ(r.sublists[0], (std::vector<std::size_t>{0, 3, 6}));
  EXPECT_EQ(r.sublists[1], (std::vector<std::size_t>{1, 4, 7}));
  EXPECT_EQ(r.sublists[2], (std::vector<std::size_t>{2, 5, 8}));
  // All ties: lower flat index wins.
  EXPECT_EQ(r.selected, (std::vector<std::size_t>{0, 1, 2, 3, 4, 5, 6, 7, 8}));
}

TEST(SelectHardRegions, UniqueMaximumAlone) {
  TD err = TD::zeros({2, 2});
  err.mutable_values()[2] = 5.0;
  const TD x = TD::zeros({2, 2});
  const auto r = select_hard_regions<double>({x, 1}, {x, 1}, {err, 1}, 1);
  EXPECT_EQ(r.selected, (std::vector<std::size_t>{2}));
  EXPECT_THROW(select_hard_regions<double>({x, 1}, {x, 1}, {err, 1}, 0), InvalidArgument);
}

TEST(SelectHardRegions, MatchesBruteForce) {
  Rng rng(2);
  for (int trial = 0; trial < 300; ++trial) {
    std::vector<double> x(16), xg(16), r(16);
    for (std::size_t i = 0; i < 16; ++i) {
      // Coarse values so ties are common.
      x[i] = static_cast<double>(uniform_index(rng, 5));
      xg[i] = static_cast<double>(uniform_index(rng, 4));
      r[i] = static_cast<double>(uniform_index(rng, 6));
    }
    const std::size_t s = 1 + uniform_index(rng, 20);
    const auto got = select_hard_regions<double>({from(x, {4, 4}), 1}, {from(xg, {4, 4}), 1},
                                                 {from(r, {4, 4}), 1}, s);
    const auto want = oracle(x, xg, r, s);
    ASSERT_EQ(got.selected, want.selected);
    ASSERT_EQ(got.order, want.order);
    for (std::size_t p = 0; p < got.order.size(); ++p) ASSERT_EQ(got.lx[p], x[got.order[p]]);
    ASSERT_EQ(loss_relative(got).item(), want.loss);
  }
}

TEST(SelectHardRegions, GradientOnlyThroughSelectedCells) {
  Rng rng(3);
  const TD gt = hmode::testing::random_tensor({8, 8}, rng, 0, 1, false);
  TD pred = hmode::testing::random_tensor({8, 8}, rng, 0, 1, true);
  const auto err = make_local_error_map(pred, gt, 2);
  const auto r = select_hard_regions(make_local_count_map(pred, 2), make_local_count_map(gt, 2), err, 5);
  const TD loss = loss_relative(r);
  backward(loss);
  const auto g = pred.grad();
  for (std::size_t i = 0; i < 8; ++i) {
    for (std::size_t j = 0; j < 8; ++j) {
      const std::size_t cell = (i / 2) * 4 + j / 2;
      if (std::find(r.selected.begin(), r.selected.end(), cell) == r.selected.end()) {
        EXPECT_EQ(g[i * 8 + j], 0.0);
      }
    }
  }
}

TEST(LossAttention, UniformPredictionIsLog2) {
  Rng rng(4);
  TD mask = TD::zeros({4, 4});
  for (std::size_t i = 0; i < 16; i += 3) mask.mutable_values()[i] = 1.0;
  EXPECT_NEAR(loss_attention(TD::full({4, 4}, 0.5), mask).item(), std::log(2.0), 1e-12);
  const TD pred = hmode::testing::random_tensor({4, 4}, rng, 0.01, 0.99, false);
  double s = 0;
  for (std::size_t i = 0; i < 16; ++i) {
    s -= mask[i] * std::log(pred[i]) + (1 - mask[i]) * std::log(1 - pred[i]);
  }
  EXPECT_NEAR(loss_attention(pred, mask).item(), s / 16, 1e-9);
  EXPECT_THROW(loss_attention(pred, TD::zeros({2, 8})), InvalidShape);
}

TEST(LossExpertImportance, Examples) {
  const GroupPlan plan = enumerate_groups(3, 2);
  std::vector<std::vector<TD>> uniform(3, {TD::full({4, 4}, 0.5), TD::full({4, 4}, 0.5)});
  EXPECT_EQ(loss_expert_importance(uniform, plan).item(), 0.0);

  auto skew = uniform;
  skew[1] = {TD::full({4, 4}, 0.75), TD::full({4, 4}, 0.25)};
  EXPECT_NEAR(loss_expert_importance(skew, plan).item(), 0.25, 1e-12);

  // Invariant to group order and to swapping within a group.
  auto permuted = skew;
  std::swap(permuted[0], permuted[1]);
  std::swap(permuted[0][0], permuted[0][1]);
  EXPECT_NEAR(loss_expert_importance(permuted, plan).item(), 0.25, 1e-12);

  skew.pop_back();
  EXPECT_THROW(loss_expert_importance(skew, plan), InvalidArgument);
}

TEST(LossTotal, PerfectPredictionIsNearZero) {
  HeadAnnotation ann{{{3.5, 4.5}, {10.2, 12.0}, {13.0, 2.0}}, 16, 16};
  const TD gt = make_density_gt<double>(ann, 2.0);
  LossConfig cfg;
  cfg.region_size = 4;
  const auto targets = make_loss_targets(gt, cfg);
  const GroupPlan plan = enumerate_groups(3, 2);

  ExpertSet<double> outs;
  outs.experts = {gt, gt, gt};
  outs.group_outputs = {gt, gt, gt};
  outs.final = gt;
  GatingOutputs<double> gating;
  gating.level1.assign(3, {TD::full({16, 16}, 0.5), TD::full({16, 16}, 0.5)});
  gating.level2.assign(3, TD::full({16, 16}, 1.0 / 3));
  TD clamped = targets.attention_mask.clone();
  for (double& v : clamped.mutable_values()) v = std::clamp(v, ops::kSigmoidEpsilon, 1 - ops::kSigmoidEpsilon);
  gating.attention = clamped;

  const auto b = loss_total(outs, gating, targets, plan, cfg);
  EXPECT_EQ(b.density.item(), 0.0);
  EXPECT_EQ(b.relative.item(), 0.0);
  EXPECT_EQ(b.importance.item(), 0.0);
  EXPECT_LT(b.attention.item(), 1e-3);
  EXPECT_LT(b.total.item(), 1e-3);
}

TEST(LossTotal, SumsSevenOutputs) {
  Rng rng(5);
  HeadAnnotation ann{{{3.5, 4.5}, {10.2, 12.0}}, 16, 16};
  const TD gt = make_density_gt<double>(ann, 2.0);
  LossConfig cfg;
  cfg.region_size = 4;
  const auto targets = make_loss_targets(gt, cfg);
  ExpertSet<double> outs;
  double want = 0;
  auto next = [&] {
    TD d = hmode::testing::random_tensor({16, 16}, rng, 0, 0.02, false);
    want += loss_density(d, gt).item();
    return d;
  };
  for (int k = 0; k < 3; ++k) outs.experts.push_back(next());
  for (int k = 0; k < 3; ++k) outs.group_outputs.push_back(next());
  outs.final = next();
  const auto b = loss_total(outs, GatingOutputs<double>{}, targets, enumerate_groups(3, 2), cfg);
  EXPECT_NEAR(b.density.item(), want, 1e-12);
  EXPECT_EQ(b.attention.item(), 0.0);
  EXPECT_NEAR(b.total.item(), b.density.item() + b.relative.item(), 1e-12);
}

}  // namespace
}  // namespace hmode
