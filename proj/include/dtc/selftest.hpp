#pragma once

// Property suites run by `dtc selftest` and the acceptance binary: gradient
// checks, the distance-transform oracle, the inverse-transform round trip and
// the surface-metric oracle.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <functional>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include "dtc/grad_check.hpp"
#include "dtc/losses.hpp"
#include "dtc/lsf.hpp"
#include "dtc/metrics.hpp"
#include "dtc/nn.hpp"
#include "dtc/oracles.hpp"

namespace dtc::selftest {

struct PropertyResult {
  std::string name;
  bool passed = false;
  double max_error = 0.0;
  double tolerance = 0.0;
  std::string detail;
};

/// Tolerances for the finite-difference suites.
inline constexpr double kGradRelTol = 1e-4;
inline constexpr double kGradAbsTol = 1e-8;
inline constexpr double kFdStep = 1e-5;

namespace detail {

inline Tensor random_tensor(std::mt19937_64& rng, Shape shape, double lo = -1.0, double hi = 1.0) {
  std::uniform_real_distribution<double> u(lo, hi);
  Tensor t(std::move(shape));
  for (double& v : t.data()) v = u(rng);
  return t;
}

/// Values bounded away from zero by `gap`, random sign.
inline Tensor away_from_zero(std::mt19937_64& rng, Shape shape, double gap) {
  Tensor t = random_tensor(rng, std::move(shape), gap, 1.0);
  std::bernoulli_distribution flip(0.5);
  for (double& v : t.data())
    if (flip(rng)) v = -v;
  return t;
}

inline PropertyResult grad_property(const std::string& name, const ScalarFn& fn, const std::vector<Tensor>& inputs) {
  const GradCheckResult r = grad_check(fn, inputs, kFdStep);
  PropertyResult p{name, r.max_error < kGradRelTol, r.max_error, kGradRelTol, {}};
  std::ostringstream os;
  os << "worst input " << r.worst_input << " element " << r.worst_element;
  p.detail = os.str();
  return p;
}

/// Contracts an arbitrary tensor to a scalar with fixed random weights so
/// every output element carries a distinct gradient.
inline Var weighted_sum(const Var& v, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  return sum(mul(v, v.tape->constant(random_tensor(rng, v.shape()))));
}

}  // namespace detail

inline std::vector<PropertyResult> check_primitive_gradients(std::uint64_t seed = 7) {
  using detail::grad_property;
  using detail::weighted_sum;
  std::mt19937_64 rng(seed);
  auto rt = [&](Shape s, double lo = -1.0, double hi = 1.0) { return detail::random_tensor(rng, std::move(s), lo, hi); };
  std::vector<PropertyResult> out;
  const Shape s{2, 3, 4, 4};

  out.push_back(grad_property("grad:add", [](Tape&, auto v) { return weighted_sum(add(v[0], v[1]), 1); }, {rt(s), rt(s)}));
  out.push_back(grad_property("grad:sub", [](Tape&, auto v) { return weighted_sum(sub(v[0], v[1]), 2); }, {rt(s), rt(s)}));
  out.push_back(grad_property("grad:mul", [](Tape&, auto v) { return weighted_sum(mul(v[0], v[1]), 3); }, {rt(s), rt(s)}));
  out.push_back(grad_property("grad:div", [](Tape&, auto v) { return weighted_sum(div(v[0], v[1]), 4); },
                              {rt(s), rt(s, 0.5, 2.0)}));
  out.push_back(grad_property("grad:scale", [](Tape&, auto v) { return weighted_sum(scale(v[0], -2.5), 5); }, {rt(s)}));
  out.push_back(grad_property("grad:add_scalar", [](Tape&, auto v) { return weighted_sum(add_scalar(v[0], 0.7), 6); },
                              {rt(s)}));
  out.push_back(grad_property("grad:square", [](Tape&, auto v) { return weighted_sum(square(v[0]), 7); }, {rt(s)}));
  out.push_back(grad_property("grad:sum", [](Tape&, auto v) { return sum(v[0]); }, {rt(s)}));
  out.push_back(grad_property("grad:mean", [](Tape&, auto v) { return mean(v[0]); }, {rt(s)}));
  out.push_back(grad_property("grad:sum_per_sample",
                              [](Tape&, auto v) { return weighted_sum(sum_per_sample(v[0]), 8); }, {rt(s)}));
  out.push_back(grad_property("grad:conv2d(3x3,pad1)",
                              [](Tape&, auto v) { return weighted_sum(conv2d(v[0], v[1], 1, 1), 9); },
                              {rt({2, 3, 6, 6}), rt({4, 3, 3, 3})}));
  out.push_back(grad_property("grad:conv2d(3x3,stride2)",
                              [](Tape&, auto v) { return weighted_sum(conv2d(v[0], v[1], 2, 1), 10); },
                              {rt({1, 2, 7, 7}), rt({3, 2, 3, 3})}));
  out.push_back(grad_property("grad:conv2d(1x1)", [](Tape&, auto v) { return weighted_sum(conv2d(v[0], v[1]), 11); },
                              {rt({2, 3, 4, 4}), rt({2, 3, 1, 1})}));
  out.push_back(grad_property("grad:bias_add", [](Tape&, auto v) { return weighted_sum(bias_add(v[0], v[1]), 12); },
                              {rt(s), rt({3})}));
  out.push_back(grad_property("grad:leaky_relu",
                              [](Tape&, auto v) { return weighted_sum(leaky_relu(v[0], 0.1), 13); },
                              {detail::away_from_zero(rng, s, 1e-3)}));
  out.push_back(grad_property("grad:sigmoid", [](Tape&, auto v) { return weighted_sum(sigmoid(v[0]), 14); },
                              {rt(s, -4.0, 4.0)}));
  out.push_back(grad_property("grad:tanh", [](Tape&, auto v) { return weighted_sum(tanh(v[0]), 15); },
                              {rt(s, -3.0, 3.0)}));
  {
    // Distinct values spaced far beyond the step keep the argmax stable.
    Tensor x(s);
    std::vector<double> vals(x.size());
    for (std::size_t i = 0; i < vals.size(); ++i) vals[i] = 0.01 * static_cast<double>(i);
    std::shuffle(vals.begin(), vals.end(), rng);
    for (std::size_t i = 0; i < vals.size(); ++i) x[i] = vals[i];
    out.push_back(grad_property("grad:max_pool2d", [](Tape&, auto v) { return weighted_sum(max_pool2d(v[0]), 16); },
                                {x}));
  }
  out.push_back(grad_property("grad:upsample2x", [](Tape&, auto v) { return weighted_sum(upsample2x(v[0]), 17); },
                              {rt(s)}));
  out.push_back(grad_property("grad:concat_channels",
                              [](Tape&, auto v) { return weighted_sum(concat_channels(v[0], v[1]), 18); },
                              {rt(s), rt({2, 2, 4, 4})}));
  out.push_back(grad_property("grad:slice_batch",
                              [](Tape&, auto v) { return weighted_sum(slice_batch(v[0], 1, 2), 19); }, {rt(s)}));
  out.push_back(grad_property("grad:conv2d+leaky_relu+mean",
                              [](Tape&, auto v) { return mean(leaky_relu(conv2d(v[0], v[1], 1, 1), 0.1)); },
                              {rt({2, 2, 5, 5}), rt({3, 2, 3, 3})}));
  return out;
}

/// Inverse transform at k = 1500 away from the transition: the analytic
/// derivative vanishes and finite differences must agree in absolute terms.
inline PropertyResult check_saturated_inverse(std::uint64_t seed = 21) {
  std::mt19937_64 rng(seed);
  const Tensor z = detail::away_from_zero(rng, {64}, 0.05);
  const GradCheckResult r = grad_check([](Tape&, auto v) { return sum(inverse_transform(v[0], Sharpness(1500.0))); },
                                       std::vector<Tensor>{z}, kFdStep);
  const bool ok = r.max_abs_error < kGradAbsTol && r.max_abs_analytic < 1e-20;
  std::ostringstream os;
  os << "max |analytic| " << r.max_abs_analytic;
  return {"grad:inverse_transform(k=1500,saturated)", ok, r.max_abs_error, kGradAbsTol, os.str()};
}

/// Closed-form derivative -k s (1 - s) against the tape.
inline PropertyResult check_inverse_gradient(std::uint64_t seed = 22) {
  std::mt19937_64 rng(seed);
  double worst = 0.0;
  for (double k : {4.0, 50.0, 1500.0}) {
    const Tensor z = detail::random_tensor(rng, {256}, -3.0 / k, 3.0 / k);
    Tape tape;
    const Var zv = tape.leaf(z);
    const Gradients g = backward(sum(inverse_transform(zv, Sharpness(k))));
    const Tensor closed = inverse_gradient(z, Sharpness(k));
    for (std::size_t i = 0; i < z.size(); ++i) {
      const double a = g[zv][i], c = closed[i];
      worst = std::max(worst, std::abs(a - c) / std::max(std::abs(c), 1e-300));
    }
  }
  return {"inverse_gradient==autodiff", worst < 1e-10, worst, 1e-10, "k in {4, 50, 1500}"};
}

/// Whole objective through a small dual-task network on an 8x8 toy batch
/// (two labeled, two unlabeled images), differentiated w.r.t. every parameter.
inline PropertyResult check_total_loss_gradient(double k = 1500.0, std::uint64_t seed = 23) {
  NetConfig config;
  config.base_channels = 2;
  config.depth = 1;
  config.seed = seed;
  DualTaskNet net = init(config);

  std::mt19937_64 rng(seed);
  Tensor images = detail::random_tensor(rng, {4, 1, 8, 8});
  Tensor masks(Shape{2, 1, 8, 8});
  Tensor levels(Shape{2, 1, 8, 8});
  for (std::size_t n = 0; n < 2; ++n) {
    Mask m(8, 8, 0);
    for (std::size_t y = 2 + n; y < 6; ++y)
      for (std::size_t x = 1; x < 5 + n; ++x) m(y, x) = 1;
    const LevelSetMap lsf = signed_distance(m);
    for (std::size_t i = 0; i < 64; ++i) {
      masks[n * 64 + i] = m.cells[i];
      levels[n * 64 + i] = lsf.values.cells[i];
    }
  }

  std::vector<Tensor> inputs;
  for (const auto& p : net.parameters()) inputs.push_back(*p.tensor);
  const std::size_t count = inputs.size();
  auto fn = [&, count](Tape& tape, std::span<const Var> params) {
    const BoundNet bound{std::vector<Var>(params.begin(), params.begin() + static_cast<std::ptrdiff_t>(count))};
    const DualOutputs out = forward(config, bound, tape.constant(images));
    const LabeledTargets targets{2, tape.constant(masks), tape.constant(levels)};
    return total_loss(out, targets, 30.0, 100.0, Sharpness(k), LossTerms{}).total;
  };
  const GradCheckResult r = grad_check(fn, inputs, kFdStep);
  std::ostringstream os;
  os << "k=" << k << ", " << net.parameter_count() << " parameters, worst tensor " << r.worst_input << " element "
     << r.worst_element;
  return {"grad:total_loss(8x8 toy net)", r.max_error < kGradRelTol, r.max_error, kGradRelTol, os.str()};
}

/// Separable EDT against the all-pairs oracle, normalized and raw.
inline PropertyResult check_distance_oracle(std::size_t masks = 200, std::size_t max_side = 32, std::uint64_t seed = 31) {
  std::mt19937_64 rng(seed);
  double worst = 0.0;
  std::size_t failures = 0;
  for (std::size_t i = 0; i < masks; ++i) {
    const Mask m = oracle::random_mask(rng, max_side);
    for (bool normalized : {true, false}) {
      const LevelSetMap got = signed_distance(m, normalized ? DistanceScale::normalized : DistanceScale::raw);
      const oracle::SignedDistance want = oracle::signed_distance(m, normalized);
      double err = std::abs(got.pos_max - want.pos_max) + std::abs(got.neg_max - want.neg_max);
      for (std::size_t j = 0; j < m.size(); ++j)
        err = std::max(err, std::abs(got.values.cells[j] - want.values.cells[j]));
      worst = std::max(worst, err);
      failures += err > 1e-12;
    }
  }
  std::ostringstream os;
  os << masks << " masks up to " << max_side << "x" << max_side << ", " << failures << " mismatches";
  return {"signed_distance==brute_force", failures == 0, worst, 1e-12, os.str()};
}

using InverseFn = std::function<double(double z, double k)>;

inline double default_inverse(double z, double k) { return inverse_transform(z, Sharpness(k)); }

/// Thresholding inverse(signed_distance(mask)) at 0.5 gives the mask back on
/// non-boundary pixels; boundary pixels land on exactly 0.5.
inline PropertyResult check_round_trip(std::size_t masks = 200, std::size_t max_side = 32, std::uint64_t seed = 32,
                                       const InverseFn& inverse = default_inverse) {
  std::mt19937_64 rng(seed);
  std::size_t wrong = 0, boundary_off = 0;
  double worst_boundary = 0.0;
  for (std::size_t i = 0; i < masks; ++i) {
    const Mask m = oracle::random_nondegenerate_mask(rng, max_side);
    const LevelSetMap lsf = signed_distance(m);
    const auto classes = classify_pixels(m);
    for (std::size_t j = 0; j < m.size(); ++j) {
      const double p = inverse(lsf.values.cells[j], 1500.0);
      if (classes.cells[j] == PixelClass::boundary) {
        worst_boundary = std::max(worst_boundary, std::abs(p - 0.5));
        boundary_off += p != 0.5;
      } else {
        wrong += (p > 0.5 ? 1 : 0) != m.cells[j];
      }
    }
  }
  std::ostringstream os;
  os << masks << " masks, " << wrong << " non-boundary mismatches, " << boundary_off << " boundary pixels off 0.5";
  return {"round_trip(inverse_transform(signed_distance))", wrong == 0 && boundary_off == 0,
          static_cast<double>(wrong) + worst_boundary, 0.0, os.str()};
}

/// ASD / HD95 against the all-pairs oracle on random mask pairs.
inline PropertyResult check_surface_oracle(std::size_t pairs = 200, std::size_t max_side = 16, std::uint64_t seed = 33) {
  std::mt19937_64 rng(seed);
  double worst = 0.0;
  std::size_t failures = 0;
  for (std::size_t i = 0; i < pairs; ++i) {
    const Mask a = oracle::random_mask(rng, max_side);
    const Mask b = oracle::random_mask(rng, a.height, a.width);
    const SurfaceDistances got = surface_distances(a, b);
    const oracle::SurfaceScores want = oracle::surface_distances(a, b);
    const double err = std::max(std::abs(got.asd - want.asd), std::abs(got.hd95 - want.hd95));
    worst = std::max(worst, err);
    failures += err != 0.0 || got.degenerate != want.degenerate;
  }
  std::ostringstream os;
  os << pairs << " pairs up to " << max_side << "x" << max_side << ", " << failures << " mismatches";
  return {"surface_distances==brute_force", failures == 0, worst, 0.0, os.str()};
}

/// 2x2 square against the same square shifted by one pixel: Dice 50,
/// Jaccard 100/3.
inline PropertyResult check_overlap_hand_case() {
  Mask p(4, 4, 0), g(4, 4, 0);
  for (std::size_t y = 1; y < 3; ++y)
    for (std::size_t x = 0; x < 2; ++x) {
      p(y, x) = 1;
      g(y, x + 1) = 1;
    }
  const Overlap o = overlap_metrics(p, g);
  const double err = std::max(std::abs(o.dice - 50.0), std::abs(o.jaccard - 100.0 / 3.0));
  return {"overlap(shifted 2x2 square)", o.dice == 50.0 && err < 1e-12, err, 0.0,
          "dice " + std::to_string(o.dice) + ", jaccard " + std::to_string(o.jaccard)};
}

struct Options {
  std::size_t distance_masks = 200;
  std::size_t round_trip_masks = 200;
  std::size_t surface_pairs = 200;
  double total_loss_k = 1500.0;
};

inline std::vector<PropertyResult> run_all(const Options& opt = {}) {
  std::vector<PropertyResult> results = check_primitive_gradients();
  results.push_back(check_saturated_inverse());
  results.push_back(check_inverse_gradient());
  results.push_back(check_total_loss_gradient(opt.total_loss_k));
  results.push_back(check_distance_oracle(opt.distance_masks));
  results.push_back(check_round_trip(opt.round_trip_masks));
  results.push_back(check_surface_oracle(opt.surface_pairs));
  results.push_back(check_overlap_hand_case());
  return results;
}

inline std::string format_report(const std::vector<PropertyResult>& results) {
  std::ostringstream os;
  char buf[512];
  for (const auto& r : results) {
    std::snprintf(buf, sizeof buf, "[%s] %-48s max_error=%.3e tol=%.1e  %s\n", r.passed ? "PASS" : "FAIL",
                  r.name.c_str(), r.max_error, r.tolerance, r.detail.c_str());
    os << buf;
  }
  return os.str();
}

}  // namespace dtc::selftest
