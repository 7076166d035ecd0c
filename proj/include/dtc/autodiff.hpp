#pragma once

// Define-by-run reverse-mode differentiation. A Tape records every primitive
// applied to its Vars; backward() walks the record in reverse. The tape is
// meant to be rebuilt for every forward pass.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <optional>
#include <string>
#include <unordered_map>
#include <vector>

#include <Eigen/Core>

#include "dtc/tensor.hpp"

namespace dtc {

using NodeId = std::size_t;

enum class Op : std::uint8_t {
  leaf,
  add,
  sub,
  mul,
  div,
  scale,
  add_scalar,
  square,
  sum,
  mean,
  sum_per_sample,
  conv2d,
  bias_add,
  leaky_relu,
  sigmoid,
  tanh,
  max_pool2d,
  upsample2x,
  concat_channels,
  slice_batch,
};

class Tape;

/// Handle to a tape node.
struct Var {
  Tape* tape = nullptr;
  NodeId id = 0;

  const Tensor& value() const;
  const Shape& shape() const { return value().shape(); }
};

class Tape {
 public:
  struct Node {
    Op op = Op::leaf;
    NodeId a = 0;
    NodeId b = 0;
    Tensor value;
    bool requires_grad = false;
    double scalar = 0.0;     // scale factor, additive constant, or leaky slope
    std::size_t stride = 1;  // conv2d
    std::size_t pad = 0;     // conv2d
    std::size_t begin = 0;   // slice_batch
    std::vector<std::uint32_t> argmax;  // max_pool2d winners, one per output element
  };

  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  /// Gradient-tracked input.
  Var leaf(Tensor value) { return push_leaf(std::move(value), true); }
  /// Untracked input; backward never produces a gradient for it.
  Var constant(Tensor value) { return push_leaf(std::move(value), false); }

  const Node& node(NodeId id) const { return nodes_.at(id); }
  std::size_t size() const noexcept { return nodes_.size(); }

  Var push(Node node) {
    nodes_.push_back(std::move(node));
    return Var{this, nodes_.size() - 1};
  }

 private:
  Var push_leaf(Tensor value, bool tracked) {
    Node n;
    n.op = Op::leaf;
    n.value = std::move(value);
    n.requires_grad = tracked;
    return push(std::move(n));
  }

  std::vector<Node> nodes_;
};

inline const Tensor& Var::value() const { return tape->node(id).value; }

namespace detail {

inline Tape& same_tape(const Var& a, const Var& b, const char* op) {
  if (a.tape == nullptr || a.tape != b.tape) throw std::invalid_argument(std::string(op) + ": operands live on different tapes");
  return *a.tape;
}

inline Tape::Node make_node(Op op, const Var& a, Tensor value) {
  Tape::Node n;
  n.op = op;
  n.a = a.id;
  n.value = std::move(value);
  n.requires_grad = a.tape->node(a.id).requires_grad;
  return n;
}

inline Tape::Node make_node(Op op, const Var& a, const Var& b, Tensor value) {
  Tape::Node n = make_node(op, a, std::move(value));
  n.b = b.id;
  n.requires_grad = n.requires_grad || b.tape->node(b.id).requires_grad;
  return n;
}

inline void require_rank4(const char* op, const Shape& s) {
  if (s.size() != 4) throw ShapeError(std::string(op) + ": expected NCHW input, got " + shape_string(s));
}

template <typename F>
Var elementwise_binary(Op op, const char* name, const Var& a, const Var& b, F f) {
  Tape& tape = same_tape(a, b, name);
  const Tensor& x = a.value();
  const Tensor& y = b.value();
  if (x.shape() != y.shape()) throw_shape_mismatch(name, x.shape(), y.shape());
  Tensor out(x.shape());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = f(x[i], y[i]);
  return tape.push(make_node(op, a, b, std::move(out)));
}

template <typename F>
Var elementwise_unary(Op op, const Var& a, double scalar, F f) {
  const Tensor& x = a.value();
  Tensor out(x.shape());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = f(x[i]);
  Tape::Node n = make_node(op, a, std::move(out));
  n.scalar = scalar;
  return a.tape->push(std::move(n));
}

inline double stable_sigmoid(double x) {
  if (x >= 0.0) return 1.0 / (1.0 + std::exp(-x));
  const double e = std::exp(x);
  return e / (1.0 + e);
}

using RowMatrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MatrixMap = Eigen::Map<RowMatrix>;
using ConstMatrixMap = Eigen::Map<const RowMatrix>;

struct ConvGeometry {
  std::size_t n, c, h, w;     // input
  std::size_t o, kh, kw;      // kernel
  std::size_t oh, ow;         // output
  std::size_t stride, pad;

  std::size_t patch() const { return c * kh * kw; }
  std::size_t pixels() const { return oh * ow; }
  bool is_pointwise() const { return kh == 1 && kw == 1 && stride == 1 && pad == 0; }
};

inline ConvGeometry conv_geometry(const Shape& in, const Shape& k, std::size_t stride, std::size_t pad) {
  require_rank4("conv2d", in);
  if (k.size() != 4 || k[1] != in[1]) throw_shape_mismatch("conv2d", in, k);
  if (k[2] % 2 == 0 || k[3] % 2 == 0) throw ShapeError("conv2d: kernel spatial dims must be odd, got " + shape_string(k));
  if (stride == 0) throw ShapeError("conv2d: stride must be positive");
  if (in[2] + 2 * pad < k[2] || in[3] + 2 * pad < k[3]) throw_shape_mismatch("conv2d", in, k);
  ConvGeometry g{in[0], in[1], in[2], in[3], k[0], k[2], k[3], 0, 0, stride, pad};
  g.oh = (g.h + 2 * pad - g.kh) / stride + 1;
  g.ow = (g.w + 2 * pad - g.kw) / stride + 1;
  return g;
}

// Unfolds one image into a (C*kh*kw) x (oh*ow) column matrix.
inline void im2col(const ConvGeometry& g, const double* image, double* cols) {
  const std::size_t pixels = g.pixels();
  for (std::size_t ch = 0; ch < g.c; ++ch) {
    for (std::size_t ky = 0; ky < g.kh; ++ky) {
      for (std::size_t kx = 0; kx < g.kw; ++kx) {
        double* row = cols + ((ch * g.kh + ky) * g.kw + kx) * pixels;
        for (std::size_t oy = 0; oy < g.oh; ++oy) {
          const auto iy = static_cast<std::ptrdiff_t>(oy * g.stride + ky) - static_cast<std::ptrdiff_t>(g.pad);
          double* dst = row + oy * g.ow;
          if (iy < 0 || iy >= static_cast<std::ptrdiff_t>(g.h)) {
            std::fill(dst, dst + g.ow, 0.0);
            continue;
          }
          const double* src = image + (ch * g.h + static_cast<std::size_t>(iy)) * g.w;
          for (std::size_t ox = 0; ox < g.ow; ++ox) {
            const auto ix = static_cast<std::ptrdiff_t>(ox * g.stride + kx) - static_cast<std::ptrdiff_t>(g.pad);
            dst[ox] = (ix < 0 || ix >= static_cast<std::ptrdiff_t>(g.w)) ? 0.0 : src[ix];
          }
        }
      }
    }
  }
}

// Adjoint of im2col: scatters-adds columns back into an image gradient.
inline void col2im_add(const ConvGeometry& g, const double* cols, double* image) {
  const std::size_t pixels = g.pixels();
  for (std::size_t ch = 0; ch < g.c; ++ch) {
    for (std::size_t ky = 0; ky < g.kh; ++ky) {
      for (std::size_t kx = 0; kx < g.kw; ++kx) {
        const double* row = cols + ((ch * g.kh + ky) * g.kw + kx) * pixels;
        for (std::size_t oy = 0; oy < g.oh; ++oy) {
          const auto iy = static_cast<std::ptrdiff_t>(oy * g.stride + ky) - static_cast<std::ptrdiff_t>(g.pad);
          if (iy < 0 || iy >= static_cast<std::ptrdiff_t>(g.h)) continue;
          const double* src = row + oy * g.ow;
          double* dst = image + (ch * g.h + static_cast<std::size_t>(iy)) * g.w;
          for (std::size_t ox = 0; ox < g.ow; ++ox) {
            const auto ix = static_cast<std::ptrdiff_t>(ox * g.stride + kx) - static_cast<std::ptrdiff_t>(g.pad);
            if (ix >= 0 && ix < static_cast<std::ptrdiff_t>(g.w)) dst[ix] += src[ox];
          }
        }
      }
    }
  }
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Forward primitives

inline Var add(const Var& a, const Var& b) {
  return detail::elementwise_binary(Op::add, "add", a, b, [](double x, double y) { return x + y; });
}

inline Var sub(const Var& a, const Var& b) {
  return detail::elementwise_binary(Op::sub, "sub", a, b, [](double x, double y) { return x - y; });
}

inline Var mul(const Var& a, const Var& b) {
  return detail::elementwise_binary(Op::mul, "mul", a, b, [](double x, double y) { return x * y; });
}

/// Elementwise quotient; the caller keeps the divisor away from zero.
inline Var div(const Var& a, const Var& b) {
  return detail::elementwise_binary(Op::div, "div", a, b, [](double x, double y) { return x / y; });
}

inline Var scale(const Var& a, double factor) {
  return detail::elementwise_unary(Op::scale, a, factor, [factor](double x) { return factor * x; });
}

inline Var add_scalar(const Var& a, double offset) {
  return detail::elementwise_unary(Op::add_scalar, a, offset, [offset](double x) { return x + offset; });
}

inline Var square(const Var& a) {
  return detail::elementwise_unary(Op::square, a, 0.0, [](double x) { return x * x; });
}

inline Var leaky_relu(const Var& a, double slope) {
  return detail::elementwise_unary(Op::leaky_relu, a, slope, [slope](double x) { return x > 0.0 ? x : slope * x; });
}

inline Var sigmoid(const Var& a) {
  return detail::elementwise_unary(Op::sigmoid, a, 0.0, detail::stable_sigmoid);
}

inline Var tanh(const Var& a) {
  return detail::elementwise_unary(Op::tanh, a, 0.0, [](double x) { return std::tanh(x); });
}

inline Var sum(const Var& a) {
  double total = 0.0;
  for (double v : a.value().data()) total += v;
  return a.tape->push(detail::make_node(Op::sum, a, Tensor::scalar(total)));
}

inline Var mean(const Var& a) {
  const Tensor& x = a.value();
  if (x.empty()) throw ShapeError("mean: empty tensor");
  double total = 0.0;
  for (double v : x.data()) total += v;
  return a.tape->push(detail::make_node(Op::mean, a, Tensor::scalar(total / static_cast<double>(x.size()))));
}

/// Reduces every axis but the leading one: [N, ...] -> [N].
inline Var sum_per_sample(const Var& a) {
  const Tensor& x = a.value();
  if (x.rank() < 1 || x.dim(0) == 0) throw ShapeError("sum_per_sample: needs a nonempty leading axis, got " + shape_string(x.shape()));
  const std::size_t n = x.dim(0);
  const std::size_t stride = x.size() / n;
  Tensor out(Shape{n});
  for (std::size_t i = 0; i < n; ++i) {
    double total = 0.0;
    for (std::size_t j = 0; j < stride; ++j) total += x[i * stride + j];
    out[i] = total;
  }
  return a.tape->push(detail::make_node(Op::sum_per_sample, a, std::move(out)));
}

/// 2D cross-correlation of an NCHW input with an OCkhkw kernel.
inline Var conv2d(const Var& input, const Var& kernel, std::size_t stride = 1, std::size_t pad = 0) {
  Tape& tape = detail::same_tape(input, kernel, "conv2d");
  const Tensor& x = input.value();
  const Tensor& k = kernel.value();
  const auto g = detail::conv_geometry(x.shape(), k.shape(), stride, pad);

  Tensor out(Shape{g.n, g.o, g.oh, g.ow});
  detail::ConstMatrixMap weights(k.data().data(), static_cast<Eigen::Index>(g.o), static_cast<Eigen::Index>(g.patch()));
  std::vector<double> cols(g.is_pointwise() ? 0 : g.patch() * g.pixels());
  for (std::size_t n = 0; n < g.n; ++n) {
    const double* image = x.data().data() + n * g.c * g.h * g.w;
    const double* col_data = image;
    if (!g.is_pointwise()) {
      detail::im2col(g, image, cols.data());
      col_data = cols.data();
    }
    detail::ConstMatrixMap col_mat(col_data, static_cast<Eigen::Index>(g.patch()), static_cast<Eigen::Index>(g.pixels()));
    detail::MatrixMap dst(out.data().data() + n * g.o * g.pixels(), static_cast<Eigen::Index>(g.o),
                          static_cast<Eigen::Index>(g.pixels()));
    dst.noalias() = weights * col_mat;
  }
  Tape::Node node = detail::make_node(Op::conv2d, input, kernel, std::move(out));
  node.stride = stride;
  node.pad = pad;
  return tape.push(std::move(node));
}

/// Adds a per-channel bias [C] to an NCHW tensor.
inline Var bias_add(const Var& input, const Var& bias) {
  Tape& tape = detail::same_tape(input, bias, "bias_add");
  const Tensor& x = input.value();
  const Tensor& b = bias.value();
  detail::require_rank4("bias_add", x.shape());
  if (b.rank() != 1 || b.dim(0) != x.dim(1)) throw_shape_mismatch("bias_add", x.shape(), b.shape());
  Tensor out = x;
  const std::size_t plane = x.dim(2) * x.dim(3);
  for (std::size_t n = 0; n < x.dim(0); ++n)
    for (std::size_t c = 0; c < x.dim(1); ++c) {
      double* p = out.data().data() + (n * x.dim(1) + c) * plane;
      for (std::size_t i = 0; i < plane; ++i) p[i] += b[c];
    }
  return tape.push(detail::make_node(Op::bias_add, input, bias, std::move(out)));
}

/// 2x2 max pooling with stride 2. Ties go to the first element in scan order.
inline Var max_pool2d(const Var& input) {
  const Tensor& x = input.value();
  detail::require_rank4("max_pool2d", x.shape());
  if (x.dim(2) % 2 != 0 || x.dim(3) % 2 != 0)
    throw ShapeError("max_pool2d: spatial dims must be even, got " + shape_string(x.shape()));
  const std::size_t n = x.dim(0), c = x.dim(1), h = x.dim(2), w = x.dim(3);
  Tensor out(Shape{n, c, h / 2, w / 2});
  std::vector<std::uint32_t> argmax(out.size());
  std::size_t o = 0;
  for (std::size_t p = 0; p < n * c; ++p) {
    const std::size_t base = p * h * w;
    for (std::size_t y = 0; y < h; y += 2)
      for (std::size_t xx = 0; xx < w; xx += 2, ++o) {
        std::size_t best = base + y * w + xx;
        for (std::size_t cand : {base + y * w + xx + 1, base + (y + 1) * w + xx, base + (y + 1) * w + xx + 1})
          if (x[cand] > x[best]) best = cand;
        out[o] = x[best];
        argmax[o] = static_cast<std::uint32_t>(best);
      }
  }
  Tape::Node node = detail::make_node(Op::max_pool2d, input, std::move(out));
  node.argmax = std::move(argmax);
  return input.tape->push(std::move(node));
}

/// Nearest-neighbour 2x spatial upsampling.
inline Var upsample2x(const Var& input) {
  const Tensor& x = input.value();
  detail::require_rank4("upsample2x", x.shape());
  const std::size_t n = x.dim(0), c = x.dim(1), h = x.dim(2), w = x.dim(3);
  Tensor out(Shape{n, c, 2 * h, 2 * w});
  for (std::size_t p = 0; p < n * c; ++p)
    for (std::size_t y = 0; y < 2 * h; ++y) {
      const double* src = x.data().data() + (p * h + y / 2) * w;
      double* dst = out.data().data() + (p * 2 * h + y) * 2 * w;
      for (std::size_t xx = 0; xx < 2 * w; ++xx) dst[xx] = src[xx / 2];
    }
  return input.tape->push(detail::make_node(Op::upsample2x, input, std::move(out)));
}

/// Concatenates two NCHW tensors along the channel axis.
inline Var concat_channels(const Var& a, const Var& b) {
  Tape& tape = detail::same_tape(a, b, "concat_channels");
  const Tensor& x = a.value();
  const Tensor& y = b.value();
  detail::require_rank4("concat_channels", x.shape());
  detail::require_rank4("concat_channels", y.shape());
  if (x.dim(0) != y.dim(0) || x.dim(2) != y.dim(2) || x.dim(3) != y.dim(3))
    throw_shape_mismatch("concat_channels", x.shape(), y.shape());
  const std::size_t n = x.dim(0), plane = x.dim(2) * x.dim(3);
  const std::size_t ca = x.dim(1), cb = y.dim(1);
  Tensor out(Shape{n, ca + cb, x.dim(2), x.dim(3)});
  for (std::size_t i = 0; i < n; ++i) {
    std::copy_n(x.data().data() + i * ca * plane, ca * plane, out.data().data() + i * (ca + cb) * plane);
    std::copy_n(y.data().data() + i * cb * plane, cb * plane, out.data().data() + (i * (ca + cb) + ca) * plane);
  }
  return tape.push(detail::make_node(Op::concat_channels, a, b, std::move(out)));
}

/// Rows [begin, end) of the leading axis.
inline Var slice_batch(const Var& a, std::size_t begin, std::size_t end) {
  const Tensor& x = a.value();
  if (x.rank() < 1 || begin > end || end > x.dim(0))
    throw ShapeError("slice_batch: range [" + std::to_string(begin) + "," + std::to_string(end) + ") out of " +
                     shape_string(x.shape()));
  Shape shape = x.shape();
  shape[0] = end - begin;
  const std::size_t stride = x.dim(0) == 0 ? 0 : x.size() / x.dim(0);
  Tensor out(shape);
  std::copy_n(x.data().data() + begin * stride, (end - begin) * stride, out.data().data());
  Tape::Node node = detail::make_node(Op::slice_batch, a, std::move(out));
  node.begin = begin;
  return a.tape->push(std::move(node));
}

// ---------------------------------------------------------------------------
// Reverse pass

/// Gradients of a scalar with respect to every tracked leaf of a tape.
class Gradients {
 public:
  const Tensor* find(const Var& v) const {
    auto it = grads_.find(v.id);
    return it == grads_.end() ? nullptr : &it->second;
  }

  const Tensor& operator[](const Var& v) const {
    const Tensor* g = find(v);
    if (g == nullptr) throw std::out_of_range("gradient requested for untracked node " + std::to_string(v.id));
    return *g;
  }

  std::size_t size() const noexcept { return grads_.size(); }

 private:
  friend Gradients backward(const Var& loss);
  std::unordered_map<NodeId, Tensor> grads_;
};

namespace detail {

inline void conv2d_backward(const Tape::Node& node, const Tensor& x, const Tensor& k, const Tensor& grad_out,
                            bool want_input, bool want_kernel, Tensor& grad_in, Tensor& grad_kernel) {
  const auto g = conv_geometry(x.shape(), k.shape(), node.stride, node.pad);
  const auto patch = static_cast<Eigen::Index>(g.patch());
  const auto pixels = static_cast<Eigen::Index>(g.pixels());
  const auto outs = static_cast<Eigen::Index>(g.o);
  ConstMatrixMap weights(k.data().data(), outs, patch);
  std::vector<double> cols(g.patch() * g.pixels());
  std::vector<double> grad_cols(want_input && !g.is_pointwise() ? g.patch() * g.pixels() : 0);
  std::optional<MatrixMap> dw;
  if (want_kernel) dw.emplace(grad_kernel.data().data(), outs, patch);
  for (std::size_t n = 0; n < g.n; ++n) {
    const double* image = x.data().data() + n * g.c * g.h * g.w;
    ConstMatrixMap dy(grad_out.data().data() + n * g.o * g.pixels(), outs, pixels);
    if (want_kernel) {
      const double* col_data = image;
      if (!g.is_pointwise()) {
        im2col(g, image, cols.data());
        col_data = cols.data();
      }
      ConstMatrixMap col_mat(col_data, patch, pixels);
      dw->noalias() += dy * col_mat.transpose();
    }
    if (want_input) {
      double* dx = grad_in.data().data() + n * g.c * g.h * g.w;
      if (g.is_pointwise()) {
        MatrixMap dx_mat(dx, patch, pixels);
        dx_mat.noalias() += weights.transpose() * dy;
      } else {
        MatrixMap dcols(grad_cols.data(), patch, pixels);
        dcols.noalias() = weights.transpose() * dy;
        col2im_add(g, grad_cols.data(), dx);
      }
    }
  }
}

}  // namespace detail

/// Reverse sweep from a scalar node. Every tracked leaf receives a gradient,
/// zero-filled when the loss does not depend on it.
inline Gradients backward(const Var& loss) {
  if (loss.tape == nullptr) throw std::invalid_argument("backward: loss is not on a tape");
  const Tape& tape = *loss.tape;
  if (loss.value().size() != 1)
    throw ShapeError("backward: loss must be scalar, got shape " + shape_string(loss.value().shape()));

  std::vector<Tensor> grads(loss.id + 1);
  grads[loss.id] = Tensor(loss.value().shape(), 1.0);

  auto slot = [&](NodeId id) -> Tensor* {
    const auto& n = tape.node(id);
    if (!n.requires_grad) return nullptr;
    if (grads[id].empty() && !n.value.empty()) grads[id] = Tensor(n.value.shape());
    if (grads[id].empty()) return nullptr;
    return &grads[id];
  };

  for (NodeId id = loss.id + 1; id-- > 0;) {
    const Tape::Node& node = tape.node(id);
    if (node.op == Op::leaf || !node.requires_grad || grads[id].empty()) continue;
    const Tensor& g = grads[id];
    const Tensor& a = tape.node(node.a).value;
    switch (node.op) {
      case Op::leaf:
        break;
      case Op::add:
      case Op::sub: {
        const double sign = node.op == Op::add ? 1.0 : -1.0;
        if (Tensor* ga = slot(node.a))
          for (std::size_t i = 0; i < g.size(); ++i) (*ga)[i] += g[i];
        if (Tensor* gb = slot(node.b))
          for (std::size_t i = 0; i < g.size(); ++i) (*gb)[i] += sign * g[i];
        break;
      }
      case Op::mul: {
        const Tensor& b = tape.node(node.b).value;
        if (Tensor* ga = slot(node.a))
          for (std::size_t i = 0; i < g.size(); ++i) (*ga)[i] += g[i] * b[i];
        if (Tensor* gb = slot(node.b))
          for (std::size_t i = 0; i < g.size(); ++i) (*gb)[i] += g[i] * a[i];
        break;
      }
      case Op::div: {
        const Tensor& b = tape.node(node.b).value;
        if (Tensor* ga = slot(node.a))
          for (std::size_t i = 0; i < g.size(); ++i) (*ga)[i] += g[i] / b[i];
        if (Tensor* gb = slot(node.b))
          for (std::size_t i = 0; i < g.size(); ++i) (*gb)[i] -= g[i] * a[i] / (b[i] * b[i]);
        break;
      }
      case Op::scale:
        if (Tensor* ga = slot(node.a))
          for (std::size_t i = 0; i < g.size(); ++i) (*ga)[i] += node.scalar * g[i];
        break;
      case Op::add_scalar:
        if (Tensor* ga = slot(node.a))
          for (std::size_t i = 0; i < g.size(); ++i) (*ga)[i] += g[i];
        break;
      case Op::square:
        if (Tensor* ga = slot(node.a))
          for (std::size_t i = 0; i < g.size(); ++i) (*ga)[i] += 2.0 * a[i] * g[i];
        break;
      case Op::sum:
      case Op::mean: {
        if (Tensor* ga = slot(node.a)) {
          const double d = node.op == Op::sum ? g[0] : g[0] / static_cast<double>(a.size());
          for (std::size_t i = 0; i < ga->size(); ++i) (*ga)[i] += d;
        }
        break;
      }
      case Op::sum_per_sample:
        if (Tensor* ga = slot(node.a)) {
          const std::size_t stride = a.size() / a.dim(0);
          for (std::size_t i = 0; i < ga->size(); ++i) (*ga)[i] += g[i / stride];
        }
        break;
      case Op::conv2d: {
        Tensor* ga = slot(node.a);
        Tensor* gb = slot(node.b);
        Tensor dummy;
        detail::conv2d_backward(node, a, tape.node(node.b).value, g, ga != nullptr, gb != nullptr, ga ? *ga : dummy,
                                gb ? *gb : dummy);
        break;
      }
      case Op::bias_add: {
        if (Tensor* ga = slot(node.a))
          for (std::size_t i = 0; i < g.size(); ++i) (*ga)[i] += g[i];
        if (Tensor* gb = slot(node.b)) {
          const std::size_t channels = a.dim(1), plane = a.dim(2) * a.dim(3);
          for (std::size_t n = 0; n < a.dim(0); ++n)
            for (std::size_t c = 0; c < channels; ++c) {
              const double* p = g.data().data() + (n * channels + c) * plane;
              double total = 0.0;
              for (std::size_t i = 0; i < plane; ++i) total += p[i];
              (*gb)[c] += total;
            }
        }
        break;
      }
      case Op::leaky_relu:
        if (Tensor* ga = slot(node.a))
          for (std::size_t i = 0; i < g.size(); ++i) (*ga)[i] += a[i] > 0.0 ? g[i] : node.scalar * g[i];
        break;
      case Op::sigmoid:
        if (Tensor* ga = slot(node.a))
          for (std::size_t i = 0; i < g.size(); ++i) {
            const double y = node.value[i];
            (*ga)[i] += g[i] * y * (1.0 - y);
          }
        break;
      case Op::tanh:
        if (Tensor* ga = slot(node.a))
          for (std::size_t i = 0; i < g.size(); ++i) {
            const double y = node.value[i];
            (*ga)[i] += g[i] * (1.0 - y * y);
          }
        break;
      case Op::max_pool2d:
        if (Tensor* ga = slot(node.a))
          for (std::size_t i = 0; i < g.size(); ++i) (*ga)[node.argmax[i]] += g[i];
        break;
      case Op::upsample2x:
        if (Tensor* ga = slot(node.a)) {
          const std::size_t h = a.dim(2), w = a.dim(3);
          const std::size_t planes = a.dim(0) * a.dim(1);
          for (std::size_t p = 0; p < planes; ++p)
            for (std::size_t y = 0; y < 2 * h; ++y) {
              const double* src = g.data().data() + (p * 2 * h + y) * 2 * w;
              double* dst = ga->data().data() + (p * h + y / 2) * w;
              for (std::size_t x = 0; x < 2 * w; ++x) dst[x / 2] += src[x];
            }
        }
        break;
      case Op::concat_channels: {
        const Tensor& b = tape.node(node.b).value;
        const std::size_t n = a.dim(0), plane = a.dim(2) * a.dim(3);
        const std::size_t ca = a.dim(1), cb = b.dim(1);
        Tensor* ga = slot(node.a);
        Tensor* gb = slot(node.b);
        for (std::size_t i = 0; i < n; ++i) {
          const double* src = g.data().data() + i * (ca + cb) * plane;
          if (ga)
            for (std::size_t j = 0; j < ca * plane; ++j) (*ga)[i * ca * plane + j] += src[j];
          if (gb)
            for (std::size_t j = 0; j < cb * plane; ++j) (*gb)[i * cb * plane + j] += src[ca * plane + j];
        }
        break;
      }
      case Op::slice_batch:
        if (Tensor* ga = slot(node.a)) {
          const std::size_t stride = a.size() / a.dim(0);
          const std::size_t offset = node.begin * stride;
          for (std::size_t i = 0; i < g.size(); ++i) (*ga)[offset + i] += g[i];
        }
        break;
    }
  }

  Gradients result;
  for (NodeId id = 0; id < tape.size(); ++id) {
    const auto& n = tape.node(id);
    if (n.op != Op::leaf || !n.requires_grad) continue;
    if (id <= loss.id && !grads[id].empty())
      result.grads_.emplace(id, std::move(grads[id]));
    else
      result.grads_.emplace(id, Tensor(n.value.shape()));
  }
  return result;
}

}  // namespace dtc
