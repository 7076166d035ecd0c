#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>
#include <limits>
#include <numeric>

#include "dtc/trainer.hpp"

namespace dtc {
namespace {

Dataset toy_dataset(double fraction = 0.5, std::uint32_t train = 10) {
  GenConfig g;
  g.image_size = 16;
  g.train_count = train;
  g.test_count = 2;
  g.axis_min = 0.15;
  g.axis_max = 0.3;
  g.deform_amplitude = 0.1;
  g.noise_std = 0.1;
  Dataset ds = split(generate(g, 21), fraction, 4);
  precompute_lsf(ds);
  return ds;
}

NetConfig toy_net() {
  NetConfig c;
  c.base_channels = 4;
  c.depth = 2;
  c.seed = 2;
  return c;
}

TrainConfig toy_train(TrainMode mode, std::uint64_t iters) {
  TrainConfig c;
  c.mode = mode;
  c.t_max = iters;
  c.seed = 5;
  return c;
}

TEST(Sgd, PlainStep) {
  Tensor p(Shape{1}, 0.0);
  std::vector<Tensor*> params{&p};
  std::vector<Tensor> v{Tensor(Shape{1})};
  sgd_step(params, {Tensor(Shape{1}, 1.0)}, 0.1, 0.0, v);
  EXPECT_DOUBLE_EQ(p[0], -0.1);
}

TEST(Sgd, MomentumTwoSteps) {
  Tensor p(Shape{1}, 0.0);
  std::vector<Tensor*> params{&p};
  std::vector<Tensor> v{Tensor(Shape{1})};
  for (int i = 0; i < 2; ++i) sgd_step(params, {Tensor(Shape{1}, 1.0)}, 1.0, 0.9, v);
  EXPECT_DOUBLE_EQ(p[0], -2.9);
}

TEST(Sgd, ZeroGradientLeavesParameters) {
  Tensor p(Shape{3}, std::vector<double>{1, -2, 3});
  const Tensor before = p;
  std::vector<Tensor*> params{&p};
  std::vector<Tensor> v{Tensor(Shape{3})};
  sgd_step(params, {Tensor(Shape{3})}, 0.5, 0.9, v);
  EXPECT_EQ(p, before);
}

TEST(Sgd, NonFiniteGradientNamesIteration) {
  Tensor p(Shape{2});
  std::vector<Tensor*> params{&p};
  std::vector<Tensor> v{Tensor(Shape{2})};
  Tensor g(Shape{2});
  g[1] = std::numeric_limits<double>::quiet_NaN();
  try {
    sgd_step(params, {g}, 0.1, 0.9, v, 17);
    FAIL() << "NaN accepted";
  } catch (const std::runtime_error& e) {
    EXPECT_NE(std::string(e.what()).find("iteration 17"), std::string::npos);
  }
  EXPECT_EQ(p[0], 0.0);
}

TEST(LrSchedule, StepDecay) {
  TrainConfig c;  // t_max 2000
  EXPECT_EQ(c.milestone(), 833u);
  EXPECT_EQ(lr_schedule(0, c), 0.01);
  EXPECT_EQ(lr_schedule(832, c), 0.01);
  EXPECT_DOUBLE_EQ(lr_schedule(833, c), 0.001);
  EXPECT_DOUBLE_EQ(lr_schedule(1700, c), 0.0001);
  c.t_max = 6000;
  EXPECT_EQ(c.milestone(), 2500u);
  c.lr_milestone = 10;
  EXPECT_DOUBLE_EQ(lr_schedule(25, c), 0.0001);
}

TEST(TrainConfig, Validation) {
  TrainConfig c;
  c.lr0 = 0.0;
  EXPECT_THROW(c.validate(), std::invalid_argument);
  c = TrainConfig{};
  c.lr_decay = 1.5;
  EXPECT_THROW(c.validate(), std::invalid_argument);
  c = TrainConfig{};
  c.t_max = 0;
  EXPECT_THROW(c.validate(), std::invalid_argument);
}

TEST(Modes, NamesRoundTrip) {
  for (TrainMode m : kAllModes) EXPECT_EQ(parse_mode(to_string(m)), m);
  EXPECT_THROW(parse_mode("dtc"), std::invalid_argument);
}

TEST(Train, LambdaLoggedAtEnds) {
  const Dataset ds = toy_dataset();
  const TrainState s = train(ds, toy_net(), toy_train(TrainMode::seg_lsf_dtc, 6));
  ASSERT_EQ(s.history.size(), 7u);
  EXPECT_EQ(s.history.front().loss.lambda_d, std::exp(-5.0));
  EXPECT_EQ(s.history.back().loss.lambda_d, 1.0);
  EXPECT_EQ(s.history.back().t, 6u);
}

TEST(Train, ZeroHeadsStartConsistent) {
  const Dataset ds = toy_dataset();
  TrainConfig c = toy_train(TrainMode::seg_lsf_dtc, 2);
  c.zero_init_heads = true;
  const TrainState s = train(ds, toy_net(), c);
  EXPECT_LT(s.history.front().loss.dtc, 1e-12);
}

TEST(Train, SegModeLogsOnlySegmentation) {
  const Dataset ds = toy_dataset();
  const TrainState s = train(ds, toy_net(), toy_train(TrainMode::seg, 3));
  for (const auto& r : s.history) {
    EXPECT_EQ(r.loss.dtc, 0.0);
    EXPECT_EQ(r.loss.lsf, 0.0);
    EXPECT_EQ(r.loss.total, r.loss.seg);
  }
}

TEST(Train, SmoothedSegLossDecreases) {
  const Dataset ds = toy_dataset(1.0);
  TrainConfig c = toy_train(TrainMode::seg, 199);
  const TrainState s = train(ds, toy_net(), c);
  ASSERT_EQ(s.history.size(), 200u);
  auto window = [&](std::size_t begin) {
    double total = 0.0;
    for (std::size_t i = begin; i < begin + 50; ++i) total += s.history[i].loss.seg;
    return total / 50.0;
  };
  EXPECT_LT(window(150), window(0));
  EXPECT_LT(window(150), window(75));
}

TEST(Train, FullyLabeledDtcRuns) {
  const Dataset ds = toy_dataset(1.0);
  ASSERT_TRUE(ds.unlabeled_ids.empty());
  const TrainState s = train(ds, toy_net(), toy_train(TrainMode::seg_lsf_dtc, 3));
  EXPECT_GT(s.history.back().loss.dtc, 0.0);
}

TEST(Train, RejectsMissingLevelSets) {
  Dataset ds = toy_dataset();
  for (auto& s : ds.samples) s.lsf_target.reset();
  EXPECT_THROW(train(ds, toy_net(), toy_train(TrainMode::seg_lsf, 2)), std::invalid_argument);
  EXPECT_NO_THROW(train(ds, toy_net(), toy_train(TrainMode::seg, 1)));
}

TEST(Train, RejectsIncompatibleImageSize) {
  const Dataset ds = toy_dataset();
  NetConfig deep = toy_net();
  deep.depth = 5;
  EXPECT_THROW(train(ds, deep, toy_train(TrainMode::seg, 1)), ShapeError);
}

TEST(Train, Deterministic) {
  const Dataset ds = toy_dataset();
  const TrainState a = train(ds, toy_net(), toy_train(TrainMode::seg_lsf_dtc, 8));
  const TrainState b = train(ds, toy_net(), toy_train(TrainMode::seg_lsf_dtc, 8));
  EXPECT_EQ(a.net, b.net);
  EXPECT_EQ(log_csv(a.history), log_csv(b.history));
}

TEST(Train, ResumeIsBitIdentical) {
  const Dataset ds = toy_dataset();
  TrainConfig c = toy_train(TrainMode::seg_lsf_dtc, 12);
  const TrainState full = train(ds, toy_net(), c);

  const auto dir = std::filesystem::path(testing::TempDir()) / "dtc_resume_test";
  TrainState partial = start_training(ds, toy_net(), c);
  for (int i = 0; i < 5; ++i) train_step(partial, ds, c);
  save_state(partial, dir / "net.dtcn", dir / "state.dtcs");
  TrainState resumed = load_state(dir / "net.dtcn", dir / "state.dtcs");
  EXPECT_EQ(resumed.t, 5u);
  continue_training(resumed, ds, c);
  EXPECT_EQ(resumed.net, full.net);
  EXPECT_EQ(resumed.history, full.history);
  EXPECT_EQ(resumed.velocity, full.velocity);
  std::filesystem::remove_all(dir);
}

TEST(Train, CheckpointHookCadence) {
  const Dataset ds = toy_dataset();
  TrainConfig c = toy_train(TrainMode::seg, 9);
  c.checkpoint_every = 4;
  std::vector<std::uint64_t> seen;
  train(ds, toy_net(), c, [&](const TrainState& s) { seen.push_back(s.t); });
  EXPECT_EQ(seen, (std::vector<std::uint64_t>{4, 8}));
}

TEST(State, RejectsMismatchedNetwork) {
  const Dataset ds = toy_dataset();
  TrainConfig c = toy_train(TrainMode::seg, 1);
  const TrainState s = train(ds, toy_net(), c);
  NetConfig other = toy_net();
  other.base_channels = 2;
  EXPECT_THROW(decode_state(encode_state(s), init(other)), FormatError);
  auto bytes = encode_state(s);
  bytes[0] = 'Q';
  EXPECT_THROW(decode_state(bytes, s.net), FormatError);
}

TEST(LogCsv, HeaderAndNotes) {
  LogRow r;
  r.t = 3;
  r.lr = 0.01;
  r.loss = {0.5, 0.25, 0.125, 0.0067379, 0.75};
  const std::string csv = log_csv({r}, {"labeled=16 unlabeled=64"});
  EXPECT_EQ(csv, "# labeled=16 unlabeled=64\nt,lr,lambda_d,loss_seg,loss_lsf,loss_dtc,loss_total\n"
                 "3,0.01,0.0067379,0.5,0.25,0.125,0.75\n");
}

}  // namespace
}  // namespace dtc
