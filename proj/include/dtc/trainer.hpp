#pragma once

// Semi-supervised training loop: sample labeled and unlabeled sub-batches,
// forward both heads, combine the losses, back-propagate, SGD with momentum
// and step-decayed learning rate.

#include <cmath>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <functional>
#include <random>
#include <sstream>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

#include "dtc/autodiff.hpp"
#include "dtc/binary_io.hpp"
#include "dtc/data.hpp"
#include "dtc/losses.hpp"
#include "dtc/metrics.hpp"
#include "dtc/nn.hpp"

namespace dtc {

enum class TrainMode { seg, lsf, seg_lsf, seg_lsf_dtc };

inline constexpr TrainMode kAllModes[] = {TrainMode::seg, TrainMode::lsf, TrainMode::seg_lsf, TrainMode::seg_lsf_dtc};

inline std::string to_string(TrainMode mode) {
  switch (mode) {
    case TrainMode::seg: return "seg";
    case TrainMode::lsf: return "lsf";
    case TrainMode::seg_lsf: return "seg+lsf";
    case TrainMode::seg_lsf_dtc: return "seg+lsf+dtc";
  }
  return "?";
}

inline TrainMode parse_mode(std::string_view s) {
  for (TrainMode m : kAllModes)
    if (s == to_string(m)) return m;
  throw std::invalid_argument("unknown mode '" + std::string(s) + "' (expected seg, lsf, seg+lsf or seg+lsf+dtc)");
}

inline LossTerms terms_for(TrainMode mode) {
  switch (mode) {
    case TrainMode::seg: return {true, false, false};
    case TrainMode::lsf: return {false, true, false};
    case TrainMode::seg_lsf: return {true, true, false};
    case TrainMode::seg_lsf_dtc: return {true, true, true};
  }
  return {};
}

/// The lsf-only mode has no trained segmentation head, so it segments through
/// the inverse transform of the level-set head.
inline InferenceHead head_for(TrainMode mode) { return mode == TrainMode::lsf ? InferenceHead::lsf : InferenceHead::seg; }

struct TrainConfig {
  std::uint64_t t_max = 2000;
  double lr0 = 0.01;
  double lr_decay = 0.1;
  std::uint64_t lr_milestone = 0;  // 0 selects round(t_max * 2500 / 6000)
  double momentum = 0.9;
  double k = 1500.0;
  TrainMode mode = TrainMode::seg_lsf_dtc;
  std::uint32_t labeled_batch = 2;
  std::uint32_t unlabeled_batch = 2;
  std::uint64_t seed = 0;  // batch sampling and augmentation
  bool augment = true;
  bool zero_init_heads = false;
  std::uint64_t checkpoint_every = 0;  // 0 disables periodic checkpoints

  std::uint64_t milestone() const {
    if (lr_milestone > 0) return lr_milestone;
    return std::max<std::uint64_t>(1, static_cast<std::uint64_t>(std::llround(static_cast<double>(t_max) * 2500.0 / 6000.0)));
  }

  void validate() const {
    if (t_max == 0) throw std::invalid_argument("train: t_max must be positive");
    if (!(lr0 > 0.0)) throw std::invalid_argument("train: lr0 must be positive");
    if (!(lr_decay > 0.0 && lr_decay <= 1.0)) throw std::invalid_argument("train: lr_decay must be in (0, 1]");
    if (!(momentum >= 0.0 && momentum < 1.0)) throw std::invalid_argument("train: momentum must be in [0, 1)");
    if (!(k > 0.0)) throw std::invalid_argument("train: k must be positive");
    if (labeled_batch + unlabeled_batch == 0) throw std::invalid_argument("train: empty batch");
  }
};

/// lr0 * decay^floor(t / milestone).
inline double lr_schedule(std::uint64_t t, const TrainConfig& config) {
  return config.lr0 * std::pow(config.lr_decay, static_cast<double>(t / config.milestone()));
}

/// v <- momentum v + g; p <- p - lr v. Rejects non-finite gradients.
inline void sgd_step(std::vector<Tensor*>& params, const std::vector<Tensor>& grads, double lr, double momentum,
                     std::vector<Tensor>& velocity, std::uint64_t iteration = 0) {
  if (params.size() != grads.size() || params.size() != velocity.size())
    throw std::invalid_argument("sgd_step: parameter, gradient and buffer counts differ");
  for (std::size_t i = 0; i < params.size(); ++i) {
    if (params[i]->shape() != grads[i].shape()) throw_shape_mismatch("sgd_step", params[i]->shape(), grads[i].shape());
    if (params[i]->shape() != velocity[i].shape()) throw_shape_mismatch("sgd_step", params[i]->shape(), velocity[i].shape());
    for (double g : grads[i].data())
      if (!std::isfinite(g))
        throw std::runtime_error("sgd_step: non-finite gradient in parameter tensor " + std::to_string(i) +
                                 " at iteration " + std::to_string(iteration));
  }
  for (std::size_t i = 0; i < params.size(); ++i) {
    auto p = params[i]->data();
    auto v = velocity[i].data();
    const auto g = grads[i].data();
    for (std::size_t j = 0; j < p.size(); ++j) {
      v[j] = momentum * v[j] + g[j];
      p[j] -= lr * v[j];
    }
  }
}

struct LogRow {
  std::uint64_t t = 0;
  double lr = 0.0;
  LossBreakdown loss;

  friend bool operator==(const LogRow& a, const LogRow& b) {
    return a.t == b.t && a.lr == b.lr && a.loss.seg == b.loss.seg && a.loss.lsf == b.loss.lsf &&
           a.loss.dtc == b.loss.dtc && a.loss.lambda_d == b.loss.lambda_d && a.loss.total == b.loss.total;
  }
};

/// Everything needed to continue a run bit-identically. Iterations are
/// numbered 0..t_max inclusive; `t` is the next one to run.
struct TrainState {
  std::uint64_t t = 0;
  DualTaskNet net;
  std::vector<Tensor> velocity;
  std::mt19937_64 rng;
  std::vector<LogRow> history;

  bool finished(const TrainConfig& c) const { return t > c.t_max; }
};

inline void check_compatible(const Dataset& ds, const NetConfig& net, const TrainConfig& config) {
  if (ds.labeled_ids.empty()) throw std::invalid_argument("train: dataset has no labeled samples");
  for (std::uint32_t id : ds.labeled_ids) {
    const Sample& s = ds.sample(id);
    if (!s.lsf_target && terms_for(config.mode).lsf)
      throw std::invalid_argument("train: labeled sample " + std::to_string(id) + " has no precomputed level set");
    check_input(net, Shape{1, net.in_channels, s.image.height, s.image.width});
  }
}

inline TrainState start_training(const Dataset& ds, const NetConfig& net_config, const TrainConfig& config) {
  config.validate();
  net_config.validate();
  check_compatible(ds, net_config, config);
  TrainState state;
  state.net = init(net_config);
  if (config.zero_init_heads) zero_heads(state.net);
  for (const auto& p : state.net.parameters()) state.velocity.emplace_back(p.tensor->shape());
  state.rng.seed(config.seed);
  return state;
}

/// Sub-batch sizes: the consistency mode draws from both pools, falling back to
/// an all-labeled batch when the unlabeled pool is empty; the supervised modes
/// spend the whole batch on labeled samples.
inline BatchSizes batch_sizes(const Dataset& ds, const TrainConfig& config) {
  const std::size_t total = config.labeled_batch + config.unlabeled_batch;
  if (config.mode == TrainMode::seg_lsf_dtc && !ds.unlabeled_ids.empty())
    return {config.labeled_batch, config.unlabeled_batch};
  return {total, 0};
}

/// Runs one iteration of the training loop.
inline void train_step(TrainState& state, const Dataset& ds, const TrainConfig& config) {
  if (state.finished(config)) throw std::logic_error("train_step: run already finished");
  const Batch batch = sample_batch(ds, state.rng, batch_sizes(ds, config));

  std::vector<Sample> samples;
  for (std::uint32_t id : batch.labeled) samples.push_back(augment(ds.sample(id), state.rng, config.augment));
  for (std::uint32_t id : batch.unlabeled) samples.push_back(augment(ds.sample(id), state.rng, config.augment));

  std::vector<const Image*> images;
  std::vector<const Mask*> masks;
  std::vector<const Image*> levels;
  const LossTerms terms = terms_for(config.mode);
  for (std::size_t i = 0; i < samples.size(); ++i) {
    images.push_back(&samples[i].image);
    if (i < batch.labeled.size()) {
      masks.push_back(&*samples[i].mask);
      if (terms.lsf) levels.push_back(&samples[i].lsf_target->values);
    }
  }

  Tape tape;
  const BoundNet bound = bind(tape, state.net);
  const DualOutputs out = forward(state.net, bound, tape.constant(stack(images)));
  LabeledTargets targets;
  targets.labeled = batch.labeled.size();
  targets.masks = tape.constant(stack(masks));
  targets.lsf_targets = terms.lsf ? tape.constant(stack(levels)) : targets.masks;
  const LossResult loss = total_loss(out, targets, static_cast<double>(state.t), static_cast<double>(config.t_max),
                                     Sharpness(config.k), terms);

  const Gradients grads = backward(loss.total);
  std::vector<Tensor*> params;
  std::vector<Tensor> grad_list;
  auto refs = state.net.parameters();
  for (std::size_t i = 0; i < refs.size(); ++i) {
    params.push_back(refs[i].tensor);
    grad_list.push_back(grads[bound.params[i]]);
  }
  const double lr = lr_schedule(state.t, config);
  sgd_step(params, grad_list, lr, config.momentum, state.velocity, state.t);
  state.history.push_back({state.t, lr, loss.breakdown});
  ++state.t;
}

using CheckpointHook = std::function<void(const TrainState&)>;

inline void continue_training(TrainState& state, const Dataset& ds, const TrainConfig& config,
                              const CheckpointHook& hook = {}) {
  while (!state.finished(config)) {
    train_step(state, ds, config);
    if (hook && config.checkpoint_every > 0 && state.t % config.checkpoint_every == 0) hook(state);
  }
}

inline TrainState train(const Dataset& ds, const NetConfig& net_config, const TrainConfig& config,
                        const CheckpointHook& hook = {}) {
  TrainState state = start_training(ds, net_config, config);
  continue_training(state, ds, config, hook);
  return state;
}

// ---------------------------------------------------------------------------
// Training log CSV and "DTCS" resume state.

inline std::string log_csv(const std::vector<LogRow>& rows, const std::vector<std::string>& notes = {}) {
  std::ostringstream os;
  for (const auto& n : notes) os << "# " << n << '\n';
  os << "t,lr,lambda_d,loss_seg,loss_lsf,loss_dtc,loss_total\n";
  char buf[256];
  for (const auto& r : rows) {
    std::snprintf(buf, sizeof buf, "%llu,%.10g,%.10g,%.10g,%.10g,%.10g,%.10g\n", static_cast<unsigned long long>(r.t),
                  r.lr, r.loss.lambda_d, r.loss.seg, r.loss.lsf, r.loss.dtc, r.loss.total);
    os << buf;
  }
  return os.str();
}

inline constexpr std::uint32_t kStateVersion = 1;

/// "DTCS": magic, u32 version, u64 t, rng state text, u32 buffer count and
/// per buffer u64 length + f64 values, u64 history length and 7 fields per row.
/// Parameters live in the companion "DTCN" checkpoint.
inline std::vector<std::uint8_t> encode_state(const TrainState& state) {
  ByteWriter w;
  w.magic("DTCS");
  w.u32(kStateVersion);
  w.u64(state.t);
  std::ostringstream rng;
  rng << state.rng;
  w.string(rng.str());
  w.u32(static_cast<std::uint32_t>(state.velocity.size()));
  for (const Tensor& v : state.velocity) {
    w.u64(v.size());
    for (double x : v.data()) w.f64(x);
  }
  w.u64(state.history.size());
  for (const LogRow& r : state.history) {
    w.u64(r.t);
    w.f64(r.lr);
    w.f64(r.loss.lambda_d);
    w.f64(r.loss.seg);
    w.f64(r.loss.lsf);
    w.f64(r.loss.dtc);
    w.f64(r.loss.total);
  }
  return std::move(w.bytes());
}

inline TrainState decode_state(std::span<const std::uint8_t> bytes, DualTaskNet net, const std::string& what = "state") {
  ByteReader r(bytes, what);
  r.expect_magic("DTCS");
  const std::uint32_t version = r.u32();
  if (version != kStateVersion) r.fail("unsupported state version " + std::to_string(version));
  TrainState state;
  state.t = r.u64();
  std::istringstream rng(r.string());
  rng >> state.rng;
  if (!rng) r.fail("unreadable rng state");
  state.net = std::move(net);
  const auto refs = state.net.parameters();
  const std::uint32_t buffers = r.u32();
  if (buffers != refs.size()) r.fail("momentum buffer count does not match the network");
  for (const auto& p : refs) {
    if (r.u64() != p.tensor->size()) r.fail("momentum buffer size does not match " + p.name);
    Tensor v(p.tensor->shape());
    for (double& x : v.data()) x = r.f64();
    state.velocity.push_back(std::move(v));
  }
  const std::uint64_t rows = r.u64();
  for (std::uint64_t i = 0; i < rows; ++i) {
    LogRow row;
    row.t = r.u64();
    row.lr = r.f64();
    row.loss.lambda_d = r.f64();
    row.loss.seg = r.f64();
    row.loss.lsf = r.f64();
    row.loss.dtc = r.f64();
    row.loss.total = r.f64();
    state.history.push_back(row);
  }
  if (r.remaining() != 0) r.fail("trailing bytes after history");
  return state;
}

inline void save_state(const TrainState& state, const std::filesystem::path& net_path,
                       const std::filesystem::path& state_path) {
  DualTaskNet net = state.net;
  save_checkpoint(net, net_path);
  write_file(state_path, encode_state(state));
}

inline TrainState load_state(const std::filesystem::path& net_path, const std::filesystem::path& state_path) {
  return decode_state(read_file(state_path), load_checkpoint(net_path), state_path.string());
}

}  // namespace dtc
