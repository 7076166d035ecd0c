#pragma once

#include <cmath>
#include <cstddef>
#include <optional>
#include <stdexcept>
#include <string>

#include "dtc/autodiff.hpp"
#include "dtc/lsf.hpp"
#include "dtc/nn.hpp"

namespace dtc {

/// Denominator smoothing of the soft Dice loss.
inline constexpr double kDiceSmoothing = 1e-5;

struct LossBreakdown {
  double seg = 0.0;
  double lsf = 0.0;
  double dtc = 0.0;
  double lambda_d = 0.0;
  double total = 0.0;
};

/// Mean over images of 1 - 2 sum(p y) / (sum p + sum y + eps).
inline Var dice_loss(const Var& pred, const Var& target) {
  if (pred.shape() != target.shape()) throw_shape_mismatch("dice_loss", pred.shape(), target.shape());
  const Var overlap = sum_per_sample(mul(pred, target));
  const Var denom = add_scalar(add(sum_per_sample(pred), sum_per_sample(target)), kDiceSmoothing);
  return add_scalar(scale(mean(div(overlap, denom)), -2.0), 1.0);
}

/// Per-pixel mean squared error against the level-set target.
inline Var lsf_loss(const Var& pred, const Var& target) {
  if (pred.shape() != target.shape()) throw_shape_mismatch("lsf_loss", pred.shape(), target.shape());
  return mean(square(sub(pred, target)));
}

/// Per-pixel mean squared disagreement between the segmentation map and the
/// transformed level-set prediction.
inline Var dtc_loss(const Var& seg_prob, const Var& lsf_pred, Sharpness k = {}) {
  if (seg_prob.shape() != lsf_pred.shape()) throw_shape_mismatch("dtc_loss", seg_prob.shape(), lsf_pred.shape());
  return mean(square(sub(seg_prob, inverse_transform(lsf_pred, k))));
}

/// Gaussian warm-up exp(-5 (1 - t/t_max)^2); clamped to 1 past t_max.
inline double ramp_weight(double t, double t_max) {
  if (!(t_max > 0.0)) throw std::invalid_argument("ramp_weight: t_max must be positive");
  if (t < 0.0) throw std::invalid_argument("ramp_weight: t must be non-negative");
  if (t >= t_max) return 1.0;
  const double phase = 1.0 - t / t_max;
  return std::exp(-5.0 * phase * phase);
}

/// Which terms enter the objective.
struct LossTerms {
  bool seg = true;
  bool lsf = true;
  bool dtc = true;

  bool supervised() const { return seg || lsf; }
};

struct LossResult {
  Var total;
  LossBreakdown breakdown;
};

/// Supervised targets for the first `labeled` rows of a batch.
struct LabeledTargets {
  std::size_t labeled = 0;
  Var masks;        // [labeled, 1, H, W]
  Var lsf_targets;  // [labeled, 1, H, W]
};

/// seg + lsf + lambda_d * dtc: the supervised terms over the labeled rows and
/// the consistency term over the whole batch. Disabled terms report 0.
inline LossResult total_loss(const DualOutputs& out, const LabeledTargets& targets, double t, double t_max,
                             Sharpness k, LossTerms terms) {
  if (!terms.seg && !terms.lsf && !terms.dtc) throw std::invalid_argument("total_loss: no loss term enabled");
  if (terms.supervised() && targets.labeled == 0)
    throw std::invalid_argument("total_loss: supervised terms requested on an empty labeled sub-batch");
  const std::size_t batch = out.seg_prob.shape()[0];
  if (targets.labeled > batch)
    throw std::invalid_argument("total_loss: labeled count " + std::to_string(targets.labeled) + " exceeds batch " +
                                std::to_string(batch));

  LossResult result;
  LossBreakdown& b = result.breakdown;
  b.lambda_d = ramp_weight(t, t_max);
  std::optional<Var> total;
  auto accumulate = [&](const Var& term) { total = total ? add(*total, term) : term; };

  if (terms.seg) {
    const Var v = dice_loss(slice_batch(out.seg_prob, 0, targets.labeled), targets.masks);
    b.seg = v.value().item();
    accumulate(v);
  }
  if (terms.lsf) {
    const Var v = lsf_loss(slice_batch(out.lsf_pred, 0, targets.labeled), targets.lsf_targets);
    b.lsf = v.value().item();
    accumulate(v);
  }
  if (terms.dtc) {
    const Var v = dtc_loss(out.seg_prob, out.lsf_pred, k);
    b.dtc = v.value().item();
    accumulate(scale(v, b.lambda_d));
  }
  result.total = *total;
  b.total = result.total.value().item();
  return result;
}

}  // namespace dtc
