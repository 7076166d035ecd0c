#pragma once

// Dual-task encoder-decoder: a shared 2D U-shaped backbone feeding a
// segmentation head (sigmoid) and a level-set regression head (tanh).

#include <cmath>
#include <cstdint>
#include <filesystem>
#include <random>
#include <stdexcept>
#include <string>
#include <vector>

#include "dtc/autodiff.hpp"
#include "dtc/binary_io.hpp"

namespace dtc {

struct NetConfig {
  std::uint32_t in_channels = 1;
  std::uint32_t base_channels = 8;
  std::uint32_t depth = 3;
  double leaky_slope = 0.1;
  std::uint64_t seed = 0;

  void validate() const {
    if (in_channels == 0) throw std::invalid_argument("net: in_channels must be positive");
    if (base_channels == 0) throw std::invalid_argument("net: base_channels must be positive");
    if (depth < 1 || depth > 16) throw std::invalid_argument("net: depth must be in [1, 16]");
    if (!(leaky_slope >= 0.0 && leaky_slope < 1.0)) throw std::invalid_argument("net: leaky_slope must be in [0, 1)");
  }

  std::uint32_t channels_at(std::uint32_t level) const { return base_channels << level; }
  std::size_t spatial_multiple() const { return std::size_t{1} << depth; }

  friend bool operator==(const NetConfig&, const NetConfig&) = default;
};

struct ConvLayer {
  Tensor weight;  // [out, in, k, k]
  Tensor bias;    // [out]

  std::size_t parameter_count() const { return weight.size() + bias.size(); }
  friend bool operator==(const ConvLayer&, const ConvLayer&) = default;
};

/// Which of the three disjoint parameter sets a tensor belongs to.
enum class ParamGroup { backbone, seg_head, lsf_head };

struct ParamRef {
  Tensor* tensor;
  ParamGroup group;
  std::string name;
};

struct DualTaskNet {
  NetConfig config;
  std::vector<ConvLayer> backbone;  // encoder levels, bottleneck, decoder levels (deepest first)
  ConvLayer seg_head;
  ConvLayer lsf_head;

  /// Parameters in checkpoint order: every backbone layer (weight, bias),
  /// then the segmentation head, then the level-set head.
  std::vector<ParamRef> parameters() {
    std::vector<ParamRef> out;
    for (std::size_t i = 0; i < backbone.size(); ++i) {
      out.push_back({&backbone[i].weight, ParamGroup::backbone, "backbone." + std::to_string(i) + ".weight"});
      out.push_back({&backbone[i].bias, ParamGroup::backbone, "backbone." + std::to_string(i) + ".bias"});
    }
    out.push_back({&seg_head.weight, ParamGroup::seg_head, "seg_head.weight"});
    out.push_back({&seg_head.bias, ParamGroup::seg_head, "seg_head.bias"});
    out.push_back({&lsf_head.weight, ParamGroup::lsf_head, "lsf_head.weight"});
    out.push_back({&lsf_head.bias, ParamGroup::lsf_head, "lsf_head.bias"});
    return out;
  }

  std::size_t parameter_count() const {
    std::size_t total = seg_head.parameter_count() + lsf_head.parameter_count();
    for (const auto& l : backbone) total += l.parameter_count();
    return total;
  }

  friend bool operator==(const DualTaskNet&, const DualTaskNet&) = default;
};

namespace detail {

struct LayerShape {
  std::uint32_t in, out, kernel;
};

inline std::vector<LayerShape> backbone_shapes(const NetConfig& c) {
  std::vector<LayerShape> shapes;
  for (std::uint32_t l = 0; l < c.depth; ++l) {
    const std::uint32_t in = l == 0 ? c.in_channels : c.channels_at(l - 1);
    shapes.push_back({in, c.channels_at(l), 3});
    shapes.push_back({c.channels_at(l), c.channels_at(l), 3});
  }
  shapes.push_back({c.channels_at(c.depth - 1), c.channels_at(c.depth), 3});
  shapes.push_back({c.channels_at(c.depth), c.channels_at(c.depth), 3});
  for (std::uint32_t l = c.depth; l-- > 0;) {
    shapes.push_back({c.channels_at(l + 1), c.channels_at(l), 3});  // after upsampling
    shapes.push_back({2 * c.channels_at(l), c.channels_at(l), 3});  // after skip concat
    shapes.push_back({c.channels_at(l), c.channels_at(l), 3});
  }
  return shapes;
}

inline ConvLayer make_layer(const LayerShape& s, std::mt19937_64& rng) {
  ConvLayer layer{Tensor(Shape{s.out, s.in, s.kernel, s.kernel}), Tensor(Shape{s.out})};
  const double fan_in = static_cast<double>(s.in) * s.kernel * s.kernel;
  std::normal_distribution<double> normal(0.0, std::sqrt(2.0 / fan_in));
  for (double& w : layer.weight.data()) w = normal(rng);
  return layer;
}

}  // namespace detail

/// Total parameter count as a function of the configuration alone.
inline std::size_t parameter_count(const NetConfig& config) {
  std::size_t total = 0;
  for (const auto& s : detail::backbone_shapes(config)) total += std::size_t{s.in} * s.out * s.kernel * s.kernel + s.out;
  return total + 2 * (config.base_channels + 1);
}

/// He-normal weights (std = sqrt(2 / fan_in)), zero biases; deterministic in
/// config.seed.
inline DualTaskNet init(const NetConfig& config) {
  config.validate();
  std::mt19937_64 rng(config.seed);
  DualTaskNet net;
  net.config = config;
  for (const auto& s : detail::backbone_shapes(config)) net.backbone.push_back(detail::make_layer(s, rng));
  net.seg_head = detail::make_layer({config.base_channels, 1, 1}, rng);
  net.lsf_head = detail::make_layer({config.base_channels, 1, 1}, rng);
  return net;
}

/// Zeroes both heads so that seg_prob == 0.5 and lsf_pred == 0 everywhere.
inline void zero_heads(DualTaskNet& net) {
  for (ConvLayer* head : {&net.seg_head, &net.lsf_head}) {
    head->weight.fill(0.0);
    head->bias.fill(0.0);
  }
}

/// Parameters placed on a tape, in DualTaskNet::parameters() order.
struct BoundNet {
  std::vector<Var> params;
};

inline BoundNet bind(Tape& tape, DualTaskNet& net, bool track = true) {
  BoundNet bound;
  for (const auto& p : net.parameters()) bound.params.push_back(track ? tape.leaf(*p.tensor) : tape.constant(*p.tensor));
  return bound;
}

struct DualOutputs {
  Var seg_prob;  // sigmoid of segmentation logits
  Var lsf_pred;  // tanh of level-set regression
};

inline void check_input(const NetConfig& config, const Shape& shape) {
  if (shape.size() != 4 || shape[1] != config.in_channels)
    throw ShapeError("forward: expected [N," + std::to_string(config.in_channels) + ",H,W] input, got " + shape_string(shape));
  const std::size_t m = config.spatial_multiple();
  if (shape[2] % m != 0 || shape[3] % m != 0 || shape[2] == 0 || shape[3] == 0)
    throw ShapeError("forward: spatial dims " + shape_string(shape) + " must be positive multiples of " + std::to_string(m));
}

inline DualOutputs forward(const NetConfig& config, const BoundNet& bound, const Var& images) {
  check_input(config, images.shape());
  const double slope = config.leaky_slope;
  std::size_t next = 0;
  auto conv = [&](const Var& x) {
    const Var& w = bound.params[next++];
    const Var& b = bound.params[next++];
    const std::size_t pad = w.value().dim(2) / 2;
    return bias_add(conv2d(x, w, 1, pad), b);
  };
  auto block = [&](const Var& x) { return leaky_relu(conv(leaky_relu(conv(x), slope)), slope); };

  std::vector<Var> skips;
  Var x = images;
  for (std::uint32_t l = 0; l < config.depth; ++l) {
    x = block(x);
    skips.push_back(x);
    x = max_pool2d(x);
  }
  x = block(x);
  for (std::uint32_t l = config.depth; l-- > 0;) {
    x = leaky_relu(conv(upsample2x(x)), slope);
    x = block(concat_channels(skips[l], x));
  }
  const Var seg_logits = conv(x);
  const Var lsf_raw = conv(x);
  return {sigmoid(seg_logits), tanh(lsf_raw)};
}

inline DualOutputs forward(DualTaskNet& net, const BoundNet& bound, const Var& images) {
  return forward(net.config, bound, images);
}

/// Untracked forward pass; returns (seg_prob, lsf_pred).
inline std::pair<Tensor, Tensor> predict(DualTaskNet& net, const Tensor& images) {
  Tape tape;
  const BoundNet bound = bind(tape, net, false);
  const DualOutputs out = forward(net, bound, tape.constant(images));
  return {out.seg_prob.value(), out.lsf_pred.value()};
}

// ---------------------------------------------------------------------------
// Checkpoint: "DTCN", u32 version, config, u64 parameter count, f64 values in
// DualTaskNet::parameters() order. Little-endian throughout.

inline constexpr std::uint32_t kCheckpointVersion = 1;

inline void write_net_config(ByteWriter& w, const NetConfig& c) {
  w.u32(c.in_channels);
  w.u32(c.base_channels);
  w.u32(c.depth);
  w.f64(c.leaky_slope);
  w.u64(c.seed);
}

inline NetConfig read_net_config(ByteReader& r) {
  NetConfig c;
  c.in_channels = r.u32();
  c.base_channels = r.u32();
  c.depth = r.u32();
  c.leaky_slope = r.f64();
  c.seed = r.u64();
  try {
    c.validate();
  } catch (const std::invalid_argument& e) {
    r.fail(e.what());
  }
  return c;
}

inline std::vector<std::uint8_t> encode_checkpoint(DualTaskNet& net) {
  ByteWriter w;
  w.magic("DTCN");
  w.u32(kCheckpointVersion);
  write_net_config(w, net.config);
  w.u64(net.parameter_count());
  for (const auto& p : net.parameters())
    for (double v : p.tensor->data()) w.f64(v);
  return std::move(w.bytes());
}

inline DualTaskNet decode_checkpoint(std::span<const std::uint8_t> bytes, const std::string& what = "checkpoint") {
  ByteReader r(bytes, what);
  r.expect_magic("DTCN");
  const std::uint32_t version = r.u32();
  if (version != kCheckpointVersion)
    r.fail("unsupported checkpoint version " + std::to_string(version) + " (expected " +
           std::to_string(kCheckpointVersion) + ")");
  const NetConfig config = read_net_config(r);
  DualTaskNet net = init(config);
  const std::uint64_t count = r.u64();
  if (count != net.parameter_count())
    r.fail("parameter count " + std::to_string(count) + " does not match config (" +
           std::to_string(net.parameter_count()) + ")");
  for (const auto& p : net.parameters())
    for (double& v : p.tensor->data()) v = r.f64();
  if (r.remaining() != 0) r.fail("trailing bytes after parameters");
  return net;
}

inline void save_checkpoint(DualTaskNet& net, const std::filesystem::path& path) {
  write_file(path, encode_checkpoint(net));
}

inline DualTaskNet load_checkpoint(const std::filesystem::path& path) {
  return decode_checkpoint(read_file(path), path.string());
}

}  // namespace dtc
