#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>
#include <random>

#include "dtc/losses.hpp"
#include "dtc/nn.hpp"
#include "dtc/selftest.hpp"

namespace dtc {
namespace {

NetConfig small_config(std::uint64_t seed = 3) {
  NetConfig c;
  c.base_channels = 4;
  c.depth = 2;
  c.seed = seed;
  return c;
}

Tensor random_images(std::size_t n, std::size_t side, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  return selftest::detail::random_tensor(rng, {n, 1, side, side});
}

TEST(Network, ParameterCountRegression) {
  NetConfig c;  // base 8, depth 3, one input channel
  EXPECT_EQ(parameter_count(c), 134130u);
  EXPECT_EQ(init(c).parameter_count(), 134130u);
}

TEST(Network, ParameterCountIsPureFunctionOfConfig) {
  NetConfig a = small_config(1), b = small_config(99);
  EXPECT_EQ(parameter_count(a), parameter_count(b));
  a.depth = 3;
  EXPECT_NE(parameter_count(a), parameter_count(b));
}

TEST(Network, SameSeedSameParameters) { EXPECT_EQ(init(small_config(5)), init(small_config(5))); }

TEST(Network, DifferentSeedsDiffer) { EXPECT_NE(init(small_config(5)), init(small_config(6))); }

TEST(Network, BiasesStartAtZero) {
  DualTaskNet net = init(small_config());
  for (const auto& p : net.parameters()) {
    if (!p.name.ends_with(".bias")) continue;
    for (double v : p.tensor->data()) EXPECT_EQ(v, 0.0);
  }
}

TEST(Network, ParameterGroupsAreDisjointAndComplete) {
  DualTaskNet net = init(small_config());
  std::size_t backbone = 0, seg = 0, lsf = 0;
  for (const auto& p : net.parameters()) {
    (p.group == ParamGroup::backbone ? backbone : p.group == ParamGroup::seg_head ? seg : lsf) += p.tensor->size();
  }
  EXPECT_EQ(seg, 4u + 1u);
  EXPECT_EQ(lsf, 4u + 1u);
  EXPECT_EQ(backbone + seg + lsf, net.parameter_count());
}

TEST(Network, OutputRangesAndShapes) {
  DualTaskNet net = init(small_config());
  const auto [seg, lsf] = predict(net, random_images(3, 16, 1));
  EXPECT_EQ(seg.shape(), (Shape{3, 1, 16, 16}));
  EXPECT_EQ(lsf.shape(), (Shape{3, 1, 16, 16}));
  for (double v : seg.data()) {
    EXPECT_GT(v, 0.0);
    EXPECT_LT(v, 1.0);
  }
  for (double v : lsf.data()) {
    EXPECT_GT(v, -1.0);
    EXPECT_LT(v, 1.0);
  }
}

TEST(Network, NonSquareInputsKeepSpatialShape) {
  DualTaskNet net = init(small_config());
  EXPECT_EQ(predict(net, Tensor(Shape{1, 1, 8, 20})).first.shape(), (Shape{1, 1, 8, 20}));
}

TEST(Network, ZeroHeadsGiveNeutralOutputs) {
  DualTaskNet net = init(small_config());
  zero_heads(net);
  const auto [seg, lsf] = predict(net, random_images(2, 16, 2));
  for (double v : seg.data()) EXPECT_EQ(v, 0.5);
  for (double v : lsf.data()) EXPECT_EQ(v, 0.0);
}

TEST(Network, IdenticalImagesGiveIdenticalSlices) {
  DualTaskNet net = init(small_config());
  Tensor one = random_images(1, 16, 9);
  Tensor two(Shape{2, 1, 16, 16});
  for (std::size_t i = 0; i < 256; ++i) two[i] = two[256 + i] = one[i];
  const Tensor seg = predict(net, two).first;
  for (std::size_t i = 0; i < 256; ++i) ASSERT_EQ(seg[i], seg[256 + i]);
}

TEST(Network, RejectsBadInputShapes) {
  DualTaskNet net = init(small_config());
  EXPECT_THROW(predict(net, Tensor(Shape{1, 1, 10, 16})), ShapeError);
  EXPECT_THROW(predict(net, Tensor(Shape{1, 2, 16, 16})), ShapeError);
  EXPECT_THROW(predict(net, Tensor(Shape{16, 16})), ShapeError);
}

TEST(Network, ConfigValidation) {
  NetConfig c;
  c.depth = 0;
  EXPECT_THROW(init(c), std::invalid_argument);
  c = NetConfig{};
  c.base_channels = 0;
  EXPECT_THROW(init(c), std::invalid_argument);
}

struct Toy {
  Tensor images, masks, levels;
};

Toy toy_batch(std::size_t n, std::size_t labeled) {
  Toy t{random_images(n, 16, 17), Tensor(Shape{labeled, 1, 16, 16}), Tensor(Shape{labeled, 1, 16, 16})};
  for (std::size_t i = 0; i < labeled; ++i) {
    Mask m(16, 16, 0);
    for (std::size_t y = 3 + i; y < 11; ++y)
      for (std::size_t x = 4; x < 12 - i; ++x) m(y, x) = 1;
    const LevelSetMap l = signed_distance(m);
    for (std::size_t j = 0; j < 256; ++j) {
      t.masks[i * 256 + j] = m.cells[j];
      t.levels[i * 256 + j] = l.values.cells[j];
    }
  }
  return t;
}

bool any_nonzero(const Tensor& t) {
  for (double v : t.data())
    if (v != 0.0) return true;
  return false;
}

TEST(Network, LabeledBatchReachesEveryParameter) {
  DualTaskNet net = init(small_config());
  const Toy toy = toy_batch(2, 2);
  Tape tape;
  const BoundNet bound = bind(tape, net);
  const DualOutputs out = forward(net, bound, tape.constant(toy.images));
  const LabeledTargets targets{2, tape.constant(toy.masks), tape.constant(toy.levels)};
  const Gradients g = backward(total_loss(out, targets, 50.0, 100.0, Sharpness(), LossTerms{}).total);
  const auto refs = net.parameters();
  for (std::size_t i = 0; i < refs.size(); ++i) EXPECT_TRUE(any_nonzero(g[bound.params[i]])) << refs[i].name;
}

TEST(Network, UnlabeledBatchReachesSegHeadThroughConsistency) {
  // k small enough that the transformed level set is not saturated, so the
  // lsf head output crosses the transition region.
  DualTaskNet net = init(small_config());
  const Toy toy = toy_batch(2, 0);
  Tape tape;
  const BoundNet bound = bind(tape, net);
  const DualOutputs out = forward(net, bound, tape.constant(toy.images));
  const LabeledTargets targets{0, {}, {}};
  const LossResult loss = total_loss(out, targets, 100.0, 100.0, Sharpness(10.0), LossTerms{false, false, true});
  EXPECT_EQ(loss.breakdown.total, loss.breakdown.lambda_d * loss.breakdown.dtc);
  const Gradients g = backward(loss.total);
  bool seg_head = false, lsf_head = false, backbone = false;
  const auto refs = net.parameters();
  for (std::size_t i = 0; i < refs.size(); ++i) {
    const bool nz = any_nonzero(g[bound.params[i]]);
    (refs[i].group == ParamGroup::seg_head ? seg_head : refs[i].group == ParamGroup::lsf_head ? lsf_head : backbone) |= nz;
  }
  EXPECT_TRUE(seg_head);
  EXPECT_TRUE(lsf_head);
  EXPECT_TRUE(backbone);
}

TEST(Checkpoint, RoundTripIsExact) {
  DualTaskNet net = init(small_config(11));
  const auto bytes = encode_checkpoint(net);
  DualTaskNet back = decode_checkpoint(bytes);
  EXPECT_EQ(back, net);
  EXPECT_EQ(encode_checkpoint(back), bytes);
}

TEST(Checkpoint, FileRoundTrip) {
  const auto dir = std::filesystem::path(testing::TempDir()) / "dtc_nn_test";
  DualTaskNet net = init(small_config(12));
  save_checkpoint(net, dir / "net.dtcn");
  EXPECT_EQ(load_checkpoint(dir / "net.dtcn"), net);
  std::filesystem::remove_all(dir);
}

TEST(Checkpoint, RejectsCorruption) {
  DualTaskNet net = init(small_config());
  auto bytes = encode_checkpoint(net);
  auto bad_magic = bytes;
  bad_magic[0] = 'X';
  EXPECT_THROW(decode_checkpoint(bad_magic), FormatError);
  auto bad_version = bytes;
  bad_version[4] = 2;
  try {
    decode_checkpoint(bad_version);
    FAIL() << "version accepted";
  } catch (const FormatError& e) {
    EXPECT_NE(std::string(e.what()).find("version"), std::string::npos);
  }
  auto truncated = bytes;
  truncated.resize(truncated.size() - 3);
  EXPECT_THROW(decode_checkpoint(truncated), FormatError);
  auto extra = bytes;
  extra.push_back(0);
  EXPECT_THROW(decode_checkpoint(extra), FormatError);
}

}  // namespace
}  // namespace dtc
