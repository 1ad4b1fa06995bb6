#include <cmath>

#include <gtest/gtest.h>

#include "cps3d/losses.hpp"
#include "helpers.hpp"

using namespace cps3d;
using testing_util::code_of;

namespace {

ConfidenceMap<double> one_hot(const LabelMap& lab, int C) {
  ConfidenceMap<double> p(C, lab.dims);
  for (std::size_t v = 0; v < lab.values.size(); ++v) p.at(lab.values[v], v) = 1.0;
  return p;
}

ConfidenceMap<double> random_probs(Dims d, int C, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> u(0.05, 1.0);
  ConfidenceMap<double> p(C, d);
  for (std::size_t v = 0; v < p.voxels(); ++v) {
    double s = 0;
    for (int c = 0; c < C; ++c) s += p.at(c, v) = u(rng);
    for (int c = 0; c < C; ++c) p.at(c, v) /= s;
  }
  return p;
}

}  // namespace

TEST(DiceCe, PerfectPredictionIsNearZero) {
  const LabelMap gt = testing_util::random_labels({4, 4, 4}, 3, 1);
  EXPECT_LT(dice_ce(one_hot(gt, 3), gt).total(), 1e-4);
}

TEST(DiceCe, UniformPredictionCrossEntropyIsLogC) {
  for (int C : {2, 3, 5}) {
    const LabelMap gt = testing_util::random_labels({3, 3, 3}, C, 2);
    const ConfidenceMap<double> p(C, gt.dims, 1.0 / C);
    EXPECT_NEAR(dice_ce(p, gt).ce, std::log(static_cast<double>(C)), 1e-9);
  }
}

TEST(DiceCe, HandCountedBinaryDice) {
  // 8 voxels, 4 foreground; the prediction is certain and right on 2 of them
  // and puts 2 false positives elsewhere: dice = 2*2 / (4 + 4).
  LabelMap gt({2, 2, 2}, {1, 1, 1});
  gt.values = {1, 1, 1, 1, 0, 0, 0, 0};
  LabelMap guess = gt;
  guess.values = {1, 1, 0, 0, 1, 1, 0, 0};
  const double d = 1.0 - dice_ce(one_hot(guess, 2), gt).dice;
  EXPECT_NEAR(d, 0.5, 1e-6);
}

TEST(DiceCe, LogIsClampedForZeroProbability) {
  LabelMap gt({1, 1, 1}, {1, 1, 1});
  gt.values = {1};
  ConfidenceMap<double> p(2, gt.dims);
  p.at(0, 0) = 1.0;
  const DiceCe l = dice_ce(p, gt);
  EXPECT_DOUBLE_EQ(l.ce, -std::log(kLogClamp));
  EXPECT_DOUBLE_EQ(l.dice, 1.0 - kDiceSmooth / (1.0 + kDiceSmooth));
  // Both networks wrong in the same way: the supervised term is twice one share.
  const std::vector<ConfidenceMap<double>> outs{p};
  EXPECT_DOUBLE_EQ(sup_loss(outs, outs, std::optional<LabelMap>(gt)), 2.0 * l.total());
}

TEST(DiceCe, InvalidTargetAndShape) {
  LabelMap gt({2, 2, 2}, {1, 1, 1});
  gt.values[3] = 3;
  const ConfidenceMap<double> p(3, gt.dims, 1.0 / 3);
  EXPECT_EQ(code_of([&] { dice_ce(p, gt); }), ErrorCode::InvalidTarget);
  const ConfidenceMap<double> q(3, {2, 2, 1}, 1.0 / 3);
  EXPECT_EQ(code_of([&] { dice_ce(q, gt); }), ErrorCode::ShapeMismatch);
}

TEST(DiceCe, GradientMatchesFiniteDifference) {
  const LabelMap gt = testing_util::random_labels({2, 3, 2}, 3, 4);
  ConfidenceMap<double> p = random_probs(gt.dims, 3, 5);
  Tensor<double> g(3, gt.dims);
  dice_ce(p, gt, &g, 0.7);
  for (std::size_t i = 0; i < p.data.size(); ++i) {
    const double keep = p.data[i];
    p.data[i] = keep + 1e-6;
    const double up = dice_ce(p, gt).total();
    p.data[i] = keep - 1e-6;
    const double down = dice_ce(p, gt).total();
    p.data[i] = keep;
    EXPECT_NEAR(g.data[i], 0.7 * (up - down) / 2e-6, 1e-7);
  }
}

TEST(PseudoLabel, ArgmaxWithLowestIndexOnTies) {
  ConfidenceMap<double> p(3, {1, 1, 2});
  p.at(0, 0) = 0.1, p.at(1, 0) = 0.7, p.at(2, 0) = 0.2;
  p.at(0, 1) = 0.4, p.at(1, 1) = 0.4, p.at(2, 1) = 0.2;
  const LabelMap y = make_pseudo_label(p);
  EXPECT_EQ(y.values[0], 1);
  EXPECT_EQ(y.values[1], 0);
}

TEST(PseudoLabel, OneHotIsIdempotent) {
  const LabelMap lab = testing_util::random_labels({3, 4, 5}, 4, 6);
  EXPECT_EQ(make_pseudo_label(one_hot(lab, 4)).values, lab.values);
}

TEST(Terms, SymmetricInTheTwoNetworks) {
  const LabelMap gt = testing_util::random_labels({4, 4, 4}, 3, 7);
  const std::vector<ConfidenceMap<double>> a{random_probs(gt.dims, 3, 8)}, b{random_probs(gt.dims, 3, 9)};
  EXPECT_DOUBLE_EQ(sup_loss(a, b, std::optional<LabelMap>(gt)), sup_loss(b, a, std::optional<LabelMap>(gt)));
  EXPECT_DOUBLE_EQ(cps_loss(a, b), cps_loss(b, a));
  EXPECT_EQ(code_of([&] { sup_loss(a, b, std::optional<LabelMap>()); }), ErrorCode::MissingGroundTruth);
}

TEST(Terms, SingleHeadCollapsesToPlainDiceCe) {
  const LabelMap gt = testing_util::random_labels({4, 4, 4}, 3, 10);
  const std::vector<ConfidenceMap<double>> a{random_probs(gt.dims, 3, 11)};
  EXPECT_EQ(ds_weights(1), std::vector<double>{1.0});
  EXPECT_DOUBLE_EQ(ds_dice_ce(a, {gt}), dice_ce(a[0], gt).total());
}

TEST(Terms, DeepSupervisionWeightsHalve) {
  const auto w = ds_weights(3);
  EXPECT_DOUBLE_EQ(w[0], 4.0 / 7.0);
  EXPECT_DOUBLE_EQ(w[1], 2.0 / 7.0);
  EXPECT_DOUBLE_EQ(w[2], 1.0 / 7.0);
}

TEST(Terms, CoarseHeadTargetsAreDownsampled) {
  const LabelMap gt = testing_util::random_labels({4, 4, 4}, 2, 12);
  const std::vector<ConfidenceMap<double>> outs{ConfidenceMap<double>(2, {4, 4, 4}), ConfidenceMap<double>(2, {2, 2, 2})};
  const auto pyr = label_pyramid(gt, outs);
  ASSERT_EQ(pyr.size(), 2u);
  EXPECT_EQ(pyr[0].values, gt.values);
  EXPECT_EQ(pyr[1].dims, (Dims{2, 2, 2}));
}

TEST(Lambda, RampValues) {
  const LambdaSchedule s{0.5, 20};
  EXPECT_EQ(s.at(0), 0.0);
  EXPECT_EQ(s.at(10), 0.25);
  EXPECT_EQ(s.at(20), 0.5);
  EXPECT_EQ(s.at(35), 0.5);
  EXPECT_EQ(LambdaSchedule({0.0, 20}).at(15), 0.0);
}

TEST(Lambda, TotalAtEpochZeroIsSupervisedOnly) {
  const LossReport r = total_loss(1.25, 3.0, 4.0, 0, LambdaSchedule{0.5, 20});
  EXPECT_EQ(r.total, 1.25);
  EXPECT_EQ(r.lambda, 0.0);
  EXPECT_DOUBLE_EQ(total_loss(1.25, 3.0, 4.0, 10, LambdaSchedule{0.5, 20}).total, 1.25 + 0.25 * 7.0);
}
