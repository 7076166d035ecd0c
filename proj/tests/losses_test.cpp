#include <gtest/gtest.h>

#include <cmath>
#include <random>

#include "dtc/losses.hpp"
#include "dtc/selftest.hpp"

namespace dtc {
namespace {

Tensor image(std::vector<double> v) {
  const std::size_t n = v.size();
  return Tensor(Shape{1, 1, 1, n}, std::move(v));
}

TEST(DiceLoss, PerfectOverlapIsZero) {
  Tape tape;
  const Tensor y = image({1, 1, 0, 0, 1});
  EXPECT_LT(dice_loss(tape.leaf(y), tape.constant(y)).value().item(), 1e-4);
}

TEST(DiceLoss, DisjointIsOne) {
  Tape tape;
  EXPECT_NEAR(dice_loss(tape.leaf(image({1, 1, 0, 0})), tape.constant(image({0, 0, 1, 1}))).value().item(), 1.0, 1e-12);
}

TEST(DiceLoss, HalfProbabilities) {
  Tape tape;
  const double v = dice_loss(tape.leaf(image({0.5, 0.5, 0.5, 0.5})), tape.constant(image({1, 1, 0, 0}))).value().item();
  EXPECT_NEAR(v, 0.5, 1e-5);
  EXPECT_DOUBLE_EQ(v, 1.0 - 2.0 * 1.0 / (4.0 + kDiceSmoothing));
}

TEST(DiceLoss, AveragesPerImage) {
  Tape tape;
  const Tensor p(Shape{2, 1, 1, 2}, std::vector<double>{1, 0, 1, 0});
  const Tensor y(Shape{2, 1, 1, 2}, std::vector<double>{1, 0, 0, 1});
  EXPECT_NEAR(dice_loss(tape.leaf(p), tape.constant(y)).value().item(), 0.5, 1e-5);
}

TEST(LsfLoss, ConstantOffset) {
  Tape tape;
  const Tensor t = image({-1, -0.5, 0, 0.3, 0.9});
  Tensor p = t;
  for (double& v : p.data()) v += 0.1;
  EXPECT_NEAR(lsf_loss(tape.leaf(p), tape.constant(t)).value().item(), 0.01, 1e-12);
  EXPECT_EQ(lsf_loss(tape.leaf(t), tape.constant(t)).value().item(), 0.0);
}

TEST(LsfLoss, MatchesDirectMeanSquare) {
  std::mt19937_64 rng(4);
  const Tensor a = selftest::detail::random_tensor(rng, {3, 1, 5, 7});
  const Tensor b = selftest::detail::random_tensor(rng, {3, 1, 5, 7});
  double want = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) want += (a[i] - b[i]) * (a[i] - b[i]);
  want /= static_cast<double>(a.size());
  Tape tape;
  EXPECT_NEAR(lsf_loss(tape.leaf(a), tape.constant(b)).value().item(), want, 1e-12);
}

TEST(DtcLoss, ReferenceCases) {
  Tape tape;
  EXPECT_EQ(dtc_loss(tape.leaf(image({0.5, 0.5})), tape.leaf(image({0, 0}))).value().item(), 0.0);
  const double saturated = dtc_loss(tape.leaf(image({1, 1})), tape.leaf(image({1, 1}))).value().item();
  const double s = inverse_transform(1.0);
  EXPECT_NEAR(saturated, 1.0, 1e-12);
  EXPECT_DOUBLE_EQ(saturated, (1.0 - s) * (1.0 - s));
}

TEST(DtcLoss, ConsistentHeadsGiveZero) {
  std::mt19937_64 rng(8);
  const Tensor z = selftest::detail::random_tensor(rng, {2, 1, 4, 4}, -0.01, 0.01);
  Tape tape;
  EXPECT_EQ(dtc_loss(tape.leaf(inverse_transform(z)), tape.leaf(z)).value().item(), 0.0);
}

TEST(DtcLoss, EqualsMeanSquareAgainstMaterializedTransform) {
  std::mt19937_64 rng(9);
  const Tensor p = selftest::detail::random_tensor(rng, {2, 1, 6, 6}, 0.0, 1.0);
  const Tensor z = selftest::detail::random_tensor(rng, {2, 1, 6, 6}, -0.005, 0.005);
  Tape tape;
  const double a = dtc_loss(tape.leaf(p), tape.leaf(z)).value().item();
  const double b = lsf_loss(tape.leaf(p), tape.constant(inverse_transform(z))).value().item();
  EXPECT_NEAR(a, b, 1e-12);
}

TEST(RampWeight, ReferenceValues) {
  EXPECT_NEAR(ramp_weight(0, 100), 0.0067379, 1e-7);
  EXPECT_EQ(ramp_weight(0, 100), std::exp(-5.0));
  EXPECT_NEAR(ramp_weight(50, 100), 0.28650, 1e-5);
  EXPECT_EQ(ramp_weight(100, 100), 1.0);
  EXPECT_EQ(ramp_weight(250, 100), 1.0);
}

TEST(RampWeight, StrictlyIncreasing) {
  double prev = -1.0;
  for (int t = 0; t <= 2000; ++t) {
    const double w = ramp_weight(t, 2000);
    ASSERT_GT(w, prev);
    prev = w;
  }
}

TEST(RampWeight, RejectsBadArguments) {
  EXPECT_THROW(ramp_weight(0, 0), std::invalid_argument);
  EXPECT_THROW(ramp_weight(-1, 10), std::invalid_argument);
}

struct Batch {
  Tensor images, masks, levels;
};

Batch toy(std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  Batch b{selftest::detail::random_tensor(rng, {4, 1, 8, 8}), Tensor(Shape{2, 1, 8, 8}), Tensor(Shape{2, 1, 8, 8})};
  for (std::size_t n = 0; n < 2; ++n) {
    Mask m(8, 8, 0);
    for (std::size_t y = 1; y < 6; ++y)
      for (std::size_t x = 2 + n; x < 7; ++x) m(y, x) = 1;
    const auto l = signed_distance(m);
    for (std::size_t i = 0; i < 64; ++i) {
      b.masks[n * 64 + i] = m.cells[i];
      b.levels[n * 64 + i] = l.values.cells[i];
    }
  }
  return b;
}

NetConfig toy_net() {
  NetConfig c;
  c.base_channels = 2;
  c.depth = 1;
  c.seed = 4;
  return c;
}

TEST(TotalLoss, BreakdownRecomposes) {
  const Batch b = toy(1);
  DualTaskNet net = init(toy_net());
  Tape tape;
  const DualOutputs out = forward(net, bind(tape, net), tape.constant(b.images));
  const LabeledTargets targets{2, tape.constant(b.masks), tape.constant(b.levels)};
  const LossResult r = total_loss(out, targets, 37.0, 100.0, Sharpness(), LossTerms{});
  const LossBreakdown& br = r.breakdown;
  EXPECT_NEAR(br.total, br.seg + br.lsf + br.lambda_d * br.dtc, 1e-12);
  EXPECT_EQ(br.lambda_d, ramp_weight(37.0, 100.0));
  // Each component equals the standalone loss on the right slice of the batch.
  EXPECT_NEAR(br.seg, dice_loss(slice_batch(out.seg_prob, 0, 2), targets.masks).value().item(), 1e-12);
  EXPECT_NEAR(br.lsf, lsf_loss(slice_batch(out.lsf_pred, 0, 2), targets.lsf_targets).value().item(), 1e-12);
  EXPECT_NEAR(br.dtc, dtc_loss(out.seg_prob, out.lsf_pred).value().item(), 1e-12);
  EXPECT_GE(br.seg, 0.0);
  EXPECT_GE(br.lsf, 0.0);
  EXPECT_GE(br.dtc, 0.0);
}

TEST(TotalLoss, ZeroHeadsHaveNoConsistencyTerm) {
  const Batch b = toy(2);
  DualTaskNet net = init(toy_net());
  zero_heads(net);
  Tape tape;
  const DualOutputs out = forward(net, bind(tape, net), tape.constant(b.images));
  const LabeledTargets targets{2, tape.constant(b.masks), tape.constant(b.levels)};
  const LossResult r = total_loss(out, targets, 0.0, 100.0, Sharpness(), LossTerms{});
  EXPECT_LT(r.breakdown.dtc, 1e-12);
  EXPECT_EQ(r.breakdown.total, r.breakdown.seg + r.breakdown.lsf);
}

TEST(TotalLoss, DisabledTermsReportZero) {
  const Batch b = toy(3);
  DualTaskNet net = init(toy_net());
  Tape tape;
  const DualOutputs out = forward(net, bind(tape, net), tape.constant(b.images));
  const LabeledTargets targets{2, tape.constant(b.masks), tape.constant(b.levels)};
  const LossResult r = total_loss(out, targets, 10.0, 100.0, Sharpness(), LossTerms{true, false, false});
  EXPECT_EQ(r.breakdown.lsf, 0.0);
  EXPECT_EQ(r.breakdown.dtc, 0.0);
  EXPECT_EQ(r.breakdown.total, r.breakdown.seg);
}

TEST(TotalLoss, RejectsInvalidTermSets) {
  const Batch b = toy(4);
  DualTaskNet net = init(toy_net());
  Tape tape;
  const DualOutputs out = forward(net, bind(tape, net), tape.constant(b.images));
  const LabeledTargets none{0, {}, {}};
  EXPECT_THROW(total_loss(out, none, 0.0, 10.0, Sharpness(), LossTerms{false, false, false}), std::invalid_argument);
  EXPECT_THROW(total_loss(out, none, 0.0, 10.0, Sharpness(), LossTerms{true, false, true}), std::invalid_argument);
}

}  // namespace
}  // namespace dtc
