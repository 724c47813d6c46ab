#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <limits>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "bseg/error.hpp"
#include "bseg/grid.hpp"

namespace bseg {

class Tape;

/// Handle to a node on a Tape. Cheap to copy; only valid while its tape lives.
class Var {
 public:
  Var() = default;
  Var(Tape* tape, std::size_t id) : tape_(tape), id_(id) {}

  const Grid& value() const;
  const Shape& shape() const { return value().shape(); }
  Tape& tape() const { return *tape_; }
  std::size_t id() const noexcept { return id_; }
  bool valid() const noexcept { return tape_ != nullptr; }

 private:
  Tape* tape_ = nullptr;
  std::size_t id_ = 0;
};

/// Linear record of operations. Nodes are appended in evaluation order, so
/// walking the record backwards is a reverse topological traversal.
class Tape {
 public:
  /// Receives the gradient flowing into a node and scatters it into parents.
  using Backward = std::function<void(Tape&, const Grid& out_grad)>;

  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  Var constant(Grid value) { return push(std::move(value), false, false, nullptr); }

  /// A differentiable input (parameter). Its gradient is available after backward().
  Var leaf(Grid value) { return push(std::move(value), true, true, nullptr); }

  /// Records an operation result. `parents` decides whether the node needs a gradient.
  Var record(Grid value, std::initializer_list<Var> parents, Backward backward) {
    bool needs = false;
    for (const Var& p : parents) needs = needs || node(p).requires_grad;
    if (!value.all_finite()) fail(ErrorCode::NonFinite, "operation produced a non-finite value");
    return push(std::move(value), needs, false, needs ? std::move(backward) : nullptr);
  }

  const Grid& value(std::size_t id) const { return nodes_.at(id).value; }
  bool requires_grad(Var v) const { return node(v).requires_grad; }
  std::size_t size() const noexcept { return nodes_.size(); }

  /// Adds `g` into the gradient buffer of `v`. No-op for constants.
  void accumulate(Var v, const Grid& g) {
    Node& n = node(v);
    if (!n.requires_grad) return;
    Grid& buf = grad_buffer(n);
    for (std::size_t i = 0; i < g.size(); ++i) buf[i] += g[i];
  }

  /// Direct access for kernels that scatter into a parent; nullptr for constants.
  Grid* grad_target(Var v) {
    Node& n = node(v);
    return n.requires_grad ? &grad_buffer(n) : nullptr;
  }

  /// Reverse-mode sweep from a scalar node. Leaf gradients accumulate across
  /// calls until clear_grads().
  void backward(Var loss) {
    if (&loss.tape() != this) fail(ErrorCode::DisconnectedLeaf, "loss node belongs to a different tape");
    if (node(loss).value.size() != 1)
      fail(ErrorCode::ShapeMismatch, "backward needs a scalar loss, got " + shape_str(node(loss).value.shape()));
    if (!node(loss).requires_grad) return;
    grad_buffer(node(loss))[0] += 1.0;
    for (std::size_t i = loss.id() + 1; i-- > 0;) {
      Node& n = nodes_[i];
      if (!n.backward || n.grad.empty()) continue;
      // Leaves carry no closure, so only interior buffers are released here.
      const Grid g = std::move(n.grad);
      n.grad = Grid();
      n.backward(*this, g);
    }
  }

  /// Gradient of the last backward() with respect to a leaf. A leaf that the
  /// loss does not depend on gets a zero grid.
  Grid gradient(Var leaf) const {
    if (!leaf.valid() || &leaf.tape() != this || leaf.id() >= nodes_.size())
      fail(ErrorCode::DisconnectedLeaf, "variable is not recorded on this tape");
    const Node& n = nodes_[leaf.id()];
    if (!n.is_leaf) fail(ErrorCode::DisconnectedLeaf, "gradient requested for a non-leaf node");
    if (n.grad.empty()) return Grid(n.value.shape(), 0.0);
    return n.grad;
  }

  void clear_grads() {
    for (auto& n : nodes_) n.grad = Grid();
  }

 private:
  struct Node {
    Grid value;
    Grid grad;
    bool requires_grad = false;
    bool is_leaf = false;
    Backward backward;
  };

  Var push(Grid value, bool requires_grad, bool is_leaf, Backward backward) {
    nodes_.push_back(Node{std::move(value), Grid(), requires_grad, is_leaf, std::move(backward)});
    return Var(this, nodes_.size() - 1);
  }

  Node& node(Var v) {
    if (&v.tape() != this) fail(ErrorCode::DisconnectedLeaf, "variable belongs to a different tape");
    return nodes_.at(v.id());
  }
  const Node& node(Var v) const {
    if (&v.tape() != this) fail(ErrorCode::DisconnectedLeaf, "variable belongs to a different tape");
    return nodes_.at(v.id());
  }

  static Grid& grad_buffer(Node& n) {
    if (n.grad.empty()) n.grad = Grid(n.value.shape(), 0.0);
    return n.grad;
  }

  std::vector<Node> nodes_;
};

inline const Grid& Var::value() const { return tape_->value(id_); }

namespace ad {

namespace detail {

inline Tape& same_tape(Var a, Var b) {
  if (&a.tape() != &b.tape()) fail(ErrorCode::ShapeMismatch, "operands recorded on different tapes");
  return a.tape();
}

template <class Fwd, class Dfdx>
Var unary(Var x, Fwd fwd, Dfdx dfdx) {
  const Grid& xv = x.value();
  Grid out(xv.shape());
  for (std::size_t i = 0; i < xv.size(); ++i) out[i] = fwd(xv[i]);
  return x.tape().record(std::move(out), {x}, [x, dfdx](Tape& t, const Grid& g) {
    Grid* gx = t.grad_target(x);
    if (!gx) return;
    const Grid& xv = x.value();
    for (std::size_t i = 0; i < g.size(); ++i) (*gx)[i] += g[i] * dfdx(xv[i]);
  });
}

// Valid output index range [lo, hi) such that o*stride + k - pad lies in [0, in).
inline std::pair<std::size_t, std::size_t> tap_range(std::size_t in, std::size_t out, std::size_t stride,
                                                     std::size_t k, std::size_t pad) {
  const long long s = static_cast<long long>(stride);
  const long long off = static_cast<long long>(k) - static_cast<long long>(pad);
  long long lo = off >= 0 ? 0 : (-off + s - 1) / s;
  long long hi = (static_cast<long long>(in) - 1 - off);
  hi = hi < 0 ? 0 : hi / s + 1;
  hi = std::min<long long>(hi, static_cast<long long>(out));
  if (lo > hi) lo = hi;
  return {static_cast<std::size_t>(lo), static_cast<std::size_t>(hi)};
}

inline void require_rank(const Grid& g, std::size_t rank, const char* where) {
  if (g.rank() != rank)
    fail(ErrorCode::ShapeMismatch,
         std::string(where) + ": expected rank " + std::to_string(rank) + ", got " + shape_str(g.shape()));
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Elementwise arithmetic. Operands must have identical shapes; use
// broadcast_to() first when they do not.

inline Var add(Var a, Var b) {
  Tape& t = detail::same_tape(a, b);
  require_same_shape(a.value(), b.value(), "add");
  Grid out = a.value();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] += b.value()[i];
  return t.record(std::move(out), {a, b}, [a, b](Tape& t, const Grid& g) {
    t.accumulate(a, g);
    t.accumulate(b, g);
  });
}

inline Var sub(Var a, Var b) {
  Tape& t = detail::same_tape(a, b);
  require_same_shape(a.value(), b.value(), "sub");
  Grid out = a.value();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] -= b.value()[i];
  return t.record(std::move(out), {a, b}, [a, b](Tape& t, const Grid& g) {
    t.accumulate(a, g);
    if (Grid* gb = t.grad_target(b))
      for (std::size_t i = 0; i < g.size(); ++i) (*gb)[i] -= g[i];
  });
}

inline Var mul(Var a, Var b) {
  Tape& t = detail::same_tape(a, b);
  require_same_shape(a.value(), b.value(), "mul");
  Grid out = a.value();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] *= b.value()[i];
  return t.record(std::move(out), {a, b}, [a, b](Tape& t, const Grid& g) {
    if (Grid* ga = t.grad_target(a))
      for (std::size_t i = 0; i < g.size(); ++i) (*ga)[i] += g[i] * b.value()[i];
    if (Grid* gb = t.grad_target(b))
      for (std::size_t i = 0; i < g.size(); ++i) (*gb)[i] += g[i] * a.value()[i];
  });
}

inline Var div(Var a, Var b) {
  Tape& t = detail::same_tape(a, b);
  require_same_shape(a.value(), b.value(), "div");
  Grid out = a.value();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] /= b.value()[i];
  return t.record(std::move(out), {a, b}, [a, b](Tape& t, const Grid& g) {
    const Grid& av = a.value();
    const Grid& bv = b.value();
    if (Grid* ga = t.grad_target(a))
      for (std::size_t i = 0; i < g.size(); ++i) (*ga)[i] += g[i] / bv[i];
    if (Grid* gb = t.grad_target(b))
      for (std::size_t i = 0; i < g.size(); ++i) (*gb)[i] -= g[i] * av[i] / (bv[i] * bv[i]);
  });
}

inline Var scale(Var x, double s) {
  return detail::unary(x, [s](double v) { return s * v; }, [s](double) { return s; });
}

inline Var add_scalar(Var x, double c) {
  return detail::unary(x, [c](double v) { return v + c; }, [](double) { return 1.0; });
}

inline Var neg(Var x) { return scale(x, -1.0); }

/// c - x
inline Var rsub_scalar(double c, Var x) {
  return detail::unary(x, [c](double v) { return c - v; }, [](double) { return -1.0; });
}

inline Var square(Var x) {
  return detail::unary(x, [](double v) { return v * v; }, [](double v) { return 2.0 * v; });
}

inline Var exp(Var x) {
  return detail::unary(x, [](double v) { return std::exp(v); }, [](double v) { return std::exp(v); });
}

inline Var log(Var x) {
  return detail::unary(x, [](double v) { return std::log(v); }, [](double v) { return 1.0 / v; });
}

inline Var sigmoid(Var x) {
  return detail::unary(x, [](double v) { return bseg::sigmoid(v); },
                       [](double v) {
                         const double s = bseg::sigmoid(v);
                         return s * (1.0 - s);
                       });
}

inline Var softplus(Var x) {
  return detail::unary(x, [](double v) { return bseg::softplus(v); }, [](double v) { return bseg::sigmoid(v); });
}

inline Var relu(Var x) {
  return detail::unary(x, [](double v) { return v > 0.0 ? v : 0.0; }, [](double v) { return v > 0.0 ? 1.0 : 0.0; });
}

// ---------------------------------------------------------------------------
// Shape manipulation and reductions.

inline Var reshape(Var x, Shape shape) {
  Grid out = x.value().reshaped(std::move(shape));
  return x.tape().record(std::move(out), {x}, [x](Tape& t, const Grid& g) {
    if (Grid* gx = t.grad_target(x))
      for (std::size_t i = 0; i < g.size(); ++i) (*gx)[i] += g[i];
  });
}

/// Numpy-style broadcast: `x` is right-aligned against `shape`; each of its
/// extents must equal the target extent or be 1.
inline Var broadcast_to(Var x, const Shape& shape) {
  const Shape& in = x.shape();
  if (in.size() > shape.size())
    fail(ErrorCode::ShapeMismatch, "broadcast " + shape_str(in) + " to lower rank " + shape_str(shape));
  const std::size_t lead = shape.size() - in.size();
  Shape padded(lead, 1);
  padded.insert(padded.end(), in.begin(), in.end());
  for (std::size_t d = 0; d < shape.size(); ++d)
    if (padded[d] != shape[d] && padded[d] != 1)
      fail(ErrorCode::ShapeMismatch, "cannot broadcast " + shape_str(in) + " to " + shape_str(shape));

  // Source stride per target axis (0 on broadcast axes).
  std::vector<std::size_t> src_stride(shape.size(), 0);
  std::size_t s = 1;
  for (std::size_t d = shape.size(); d-- > 0;) {
    src_stride[d] = padded[d] == 1 ? 0 : s;
    s *= padded[d];
  }
  const std::size_t total = shape_size(shape);
  std::vector<std::size_t> src_index(total);
  std::vector<std::size_t> idx(shape.size(), 0);
  for (std::size_t i = 0; i < total; ++i) {
    std::size_t off = 0;
    for (std::size_t d = 0; d < shape.size(); ++d) off += idx[d] * src_stride[d];
    src_index[i] = off;
    for (std::size_t d = shape.size(); d-- > 0;) {
      if (++idx[d] < shape[d]) break;
      idx[d] = 0;
    }
  }
  Grid out(shape);
  const Grid& xv = x.value();
  for (std::size_t i = 0; i < total; ++i) out[i] = xv[src_index[i]];
  return x.tape().record(std::move(out), {x}, [x, src_index = std::move(src_index)](Tape& t, const Grid& g) {
    if (Grid* gx = t.grad_target(x))
      for (std::size_t i = 0; i < g.size(); ++i) (*gx)[src_index[i]] += g[i];
  });
}

inline Var sum(Var x) {
  Grid out = Grid::scalar(x.value().sum());
  return x.tape().record(std::move(out), {x}, [x](Tape& t, const Grid& g) {
    if (Grid* gx = t.grad_target(x))
      for (auto& v : gx->raw()) v += g[0];
  });
}

inline Var mean(Var x) { return scale(sum(x), 1.0 / static_cast<double>(x.value().size())); }

/// Sums everything after the first axis: shape (R, ...) -> (R).
inline Var row_sum(Var x) {
  const Grid& xv = x.value();
  const std::size_t rows = xv.dim(0);
  const std::size_t cols = xv.size() / rows;
  Grid out(Shape{rows}, 0.0);
  for (std::size_t r = 0; r < rows; ++r)
    for (std::size_t c = 0; c < cols; ++c) out[r] += xv[r * cols + c];
  return x.tape().record(std::move(out), {x}, [x, cols](Tape& t, const Grid& g) {
    if (Grid* gx = t.grad_target(x))
      for (std::size_t i = 0; i < gx->size(); ++i) (*gx)[i] += g[i / cols];
  });
}

/// Global average pool: (N, C, H, W) -> (N, C).
inline Var spatial_mean(Var x) {
  detail::require_rank(x.value(), 4, "spatial_mean");
  const Shape s = x.shape();
  const double hw = static_cast<double>(s[2] * s[3]);
  Var flat = reshape(x, Shape{s[0] * s[1], s[2] * s[3]});
  return reshape(scale(row_sum(flat), 1.0 / hw), Shape{s[0], s[1]});
}

// ---------------------------------------------------------------------------
// Convolutions (NCHW, zero padding).

/// Cross-correlation. weight: (Cout, Cin, K, K); bias: (Cout) or none.
/// Output extent: (H + 2*pad - K) / stride + 1.
inline Var conv2d(Var x, Var weight, std::optional<Var> bias, std::size_t stride = 1, std::size_t pad = 0) {
  const Grid& xv = x.value();
  const Grid& wv = weight.value();
  detail::require_rank(xv, 4, "conv2d input");
  detail::require_rank(wv, 4, "conv2d weight");
  const std::size_t N = xv.dim(0), C = xv.dim(1), H = xv.dim(2), W = xv.dim(3);
  const std::size_t O = wv.dim(0), K = wv.dim(2);
  if (wv.dim(1) != C || wv.dim(3) != K)
    fail(ErrorCode::ShapeMismatch, "conv2d: weight " + shape_str(wv.shape()) + " vs input " + shape_str(xv.shape()));
  if (stride == 0 || H + 2 * pad < K || W + 2 * pad < K)
    fail(ErrorCode::ShapeMismatch, "conv2d: kernel larger than padded input");
  if (bias && bias->value().shape() != Shape{O})
    fail(ErrorCode::ShapeMismatch, "conv2d: bias shape " + shape_str(bias->shape()));
  const std::size_t Ho = (H + 2 * pad - K) / stride + 1;
  const std::size_t Wo = (W + 2 * pad - K) / stride + 1;

  Grid out(Shape{N, O, Ho, Wo}, 0.0);
  for (std::size_t n = 0; n < N; ++n)
    for (std::size_t o = 0; o < O; ++o) {
      double* dst = &out.at(n, o, 0, 0);
      if (bias) std::fill(dst, dst + Ho * Wo, bias->value()[o]);
      for (std::size_t c = 0; c < C; ++c) {
        const double* src = &xv.at(n, c, 0, 0);
        for (std::size_t ky = 0; ky < K; ++ky) {
          const auto [y0, y1] = detail::tap_range(H, Ho, stride, ky, pad);
          for (std::size_t kx = 0; kx < K; ++kx) {
            const auto [x0, x1] = detail::tap_range(W, Wo, stride, kx, pad);
            const double wk = wv.at(o, c, ky, kx);
            for (std::size_t y = y0; y < y1; ++y) {
              const double* row = src + (y * stride + ky - pad) * W;
              double* orow = dst + y * Wo;
              for (std::size_t xo = x0; xo < x1; ++xo) orow[xo] += wk * row[xo * stride + kx - pad];
            }
          }
        }
      }
    }

  auto backward = [x, weight, bias, stride, pad](Tape& t, const Grid& g) {
    const Grid& xv = x.value();
    const Grid& wv = weight.value();
    const std::size_t N = xv.dim(0), C = xv.dim(1), H = xv.dim(2), W = xv.dim(3);
    const std::size_t O = wv.dim(0), K = wv.dim(2);
    const std::size_t Ho = g.dim(2), Wo = g.dim(3);
    Grid* gx = t.grad_target(x);
    Grid* gw = t.grad_target(weight);
    Grid* gb = bias ? t.grad_target(*bias) : nullptr;
    for (std::size_t n = 0; n < N; ++n)
      for (std::size_t o = 0; o < O; ++o) {
        const double* gout = &g.at(n, o, 0, 0);
        if (gb)
          for (std::size_t i = 0; i < Ho * Wo; ++i) (*gb)[o] += gout[i];
        for (std::size_t c = 0; c < C; ++c) {
          const double* src = &xv.at(n, c, 0, 0);
          double* gsrc = gx ? &gx->at(n, c, 0, 0) : nullptr;
          for (std::size_t ky = 0; ky < K; ++ky) {
            const auto [y0, y1] = detail::tap_range(H, Ho, stride, ky, pad);
            for (std::size_t kx = 0; kx < K; ++kx) {
              const auto [x0, x1] = detail::tap_range(W, Wo, stride, kx, pad);
              const double wk = wv.at(o, c, ky, kx);
              double acc = 0.0;
              for (std::size_t y = y0; y < y1; ++y) {
                const std::size_t off = (y * stride + ky - pad) * W;
                const double* grow = gout + y * Wo;
                if (gw) {
                  const double* row = src + off;
                  for (std::size_t xo = x0; xo < x1; ++xo) acc += grow[xo] * row[xo * stride + kx - pad];
                }
                if (gsrc) {
                  double* grow_in = gsrc + off;
                  for (std::size_t xo = x0; xo < x1; ++xo) grow_in[xo * stride + kx - pad] += wk * grow[xo];
                }
              }
              if (gw) gw->at(o, c, ky, kx) += acc;
            }
          }
        }
      }
  };
  Tape& t = detail::same_tape(x, weight);
  if (bias) return t.record(std::move(out), {x, weight, *bias}, std::move(backward));
  return t.record(std::move(out), {x, weight}, std::move(backward));
}

/// Transposed convolution (adjoint of conv2d with the same stride/pad).
/// weight: (Cin, Cout, K, K); output extent: (H - 1) * stride - 2*pad + K.
inline Var conv_transpose2d(Var x, Var weight, std::optional<Var> bias, std::size_t stride = 2, std::size_t pad = 0) {
  const Grid& xv = x.value();
  const Grid& wv = weight.value();
  detail::require_rank(xv, 4, "conv_transpose2d input");
  detail::require_rank(wv, 4, "conv_transpose2d weight");
  const std::size_t N = xv.dim(0), C = xv.dim(1), H = xv.dim(2), W = xv.dim(3);
  const std::size_t O = wv.dim(1), K = wv.dim(2);
  if (wv.dim(0) != C || wv.dim(3) != K)
    fail(ErrorCode::ShapeMismatch,
         "conv_transpose2d: weight " + shape_str(wv.shape()) + " vs input " + shape_str(xv.shape()));
  if (stride == 0 || (H - 1) * stride + K <= 2 * pad || (W - 1) * stride + K <= 2 * pad)
    fail(ErrorCode::ShapeMismatch, "conv_transpose2d: padding consumes the whole output");
  if (bias && bias->value().shape() != Shape{O})
    fail(ErrorCode::ShapeMismatch, "conv_transpose2d: bias shape " + shape_str(bias->shape()));
  const std::size_t Ho = (H - 1) * stride + K - 2 * pad;
  const std::size_t Wo = (W - 1) * stride + K - 2 * pad;

  // Output pixel (y*stride + ky - pad) receives input pixel y; equivalently
  // input y is the "output" of a strided conv over the result, so tap_range
  // with the roles swapped gives the valid input rows.
  Grid out(Shape{N, O, Ho, Wo}, 0.0);
  for (std::size_t n = 0; n < N; ++n)
    for (std::size_t o = 0; o < O; ++o) {
      double* dst = &out.at(n, o, 0, 0);
      if (bias) std::fill(dst, dst + Ho * Wo, bias->value()[o]);
      for (std::size_t c = 0; c < C; ++c) {
        const double* src = &xv.at(n, c, 0, 0);
        for (std::size_t ky = 0; ky < K; ++ky) {
          const auto [y0, y1] = detail::tap_range(Ho, H, stride, ky, pad);
          for (std::size_t kx = 0; kx < K; ++kx) {
            const auto [x0, x1] = detail::tap_range(Wo, W, stride, kx, pad);
            const double wk = wv.at(c, o, ky, kx);
            for (std::size_t y = y0; y < y1; ++y) {
              double* orow = dst + (y * stride + ky - pad) * Wo;
              const double* row = src + y * W;
              for (std::size_t xi = x0; xi < x1; ++xi) orow[xi * stride + kx - pad] += wk * row[xi];
            }
          }
        }
      }
    }

  auto backward = [x, weight, bias, stride, pad](Tape& t, const Grid& g) {
    const Grid& xv = x.value();
    const Grid& wv = weight.value();
    const std::size_t N = xv.dim(0), C = xv.dim(1), H = xv.dim(2), W = xv.dim(3);
    const std::size_t O = wv.dim(1), K = wv.dim(2);
    const std::size_t Ho = g.dim(2), Wo = g.dim(3);
    Grid* gx = t.grad_target(x);
    Grid* gw = t.grad_target(weight);
    Grid* gb = bias ? t.grad_target(*bias) : nullptr;
    for (std::size_t n = 0; n < N; ++n)
      for (std::size_t o = 0; o < O; ++o) {
        const double* gout = &g.at(n, o, 0, 0);
        if (gb)
          for (std::size_t i = 0; i < Ho * Wo; ++i) (*gb)[o] += gout[i];
        for (std::size_t c = 0; c < C; ++c) {
          const double* src = &xv.at(n, c, 0, 0);
          double* gsrc = gx ? &gx->at(n, c, 0, 0) : nullptr;
          for (std::size_t ky = 0; ky < K; ++ky) {
            const auto [y0, y1] = detail::tap_range(Ho, H, stride, ky, pad);
            for (std::size_t kx = 0; kx < K; ++kx) {
              const auto [x0, x1] = detail::tap_range(Wo, W, stride, kx, pad);
              const double wk = wv.at(c, o, ky, kx);
              double acc = 0.0;
              for (std::size_t y = y0; y < y1; ++y) {
                const double* grow = gout + (y * stride + ky - pad) * Wo;
                if (gw) {
                  const double* row = src + y * W;
                  for (std::size_t xi = x0; xi < x1; ++xi) acc += grow[xi * stride + kx - pad] * row[xi];
                }
                if (gsrc) {
                  double* grow_in = gsrc + y * W;
                  for (std::size_t xi = x0; xi < x1; ++xi) grow_in[xi] += wk * grow[xi * stride + kx - pad];
                }
              }
              if (gw) gw->at(c, o, ky, kx) += acc;
            }
          }
        }
      }
  };
  Tape& t = detail::same_tape(x, weight);
  if (bias) return t.record(std::move(out), {x, weight, *bias}, std::move(backward));
  return t.record(std::move(out), {x, weight}, std::move(backward));
}

/// 2x2 max pool, stride 2. Ties route the gradient to the first maximum in
/// row-major window order.
inline Var maxpool2x2(Var x) {
  const Grid& xv = x.value();
  detail::require_rank(xv, 4, "maxpool2x2");
  const std::size_t N = xv.dim(0), C = xv.dim(1), H = xv.dim(2), W = xv.dim(3);
  if (H % 2 || W % 2) fail(ErrorCode::ShapeMismatch, "maxpool2x2 needs even extents, got " + shape_str(xv.shape()));
  const std::size_t Ho = H / 2, Wo = W / 2;
  Grid out(Shape{N, C, Ho, Wo});
  std::vector<std::size_t> argmax(out.size());
  std::size_t k = 0;
  for (std::size_t n = 0; n < N; ++n)
    for (std::size_t c = 0; c < C; ++c)
      for (std::size_t y = 0; y < Ho; ++y)
        for (std::size_t xo = 0; xo < Wo; ++xo, ++k) {
          const std::size_t base = ((n * C + c) * H + 2 * y) * W + 2 * xo;
          const std::size_t cand[4] = {base, base + 1, base + W, base + W + 1};
          std::size_t best = cand[0];
          for (std::size_t j = 1; j < 4; ++j)
            if (xv[cand[j]] > xv[best]) best = cand[j];
          argmax[k] = best;
          out[k] = xv[best];
        }
  return x.tape().record(std::move(out), {x}, [x, argmax = std::move(argmax)](Tape& t, const Grid& g) {
    if (Grid* gx = t.grad_target(x))
      for (std::size_t i = 0; i < g.size(); ++i) (*gx)[argmax[i]] += g[i];
  });
}

/// Nearest-neighbour 2x upsample.
inline Var upsample2x(Var x) {
  const Grid& xv = x.value();
  detail::require_rank(xv, 4, "upsample2x");
  const std::size_t N = xv.dim(0), C = xv.dim(1), H = xv.dim(2), W = xv.dim(3);
  Grid out(Shape{N, C, 2 * H, 2 * W});
  for (std::size_t n = 0; n < N; ++n)
    for (std::size_t c = 0; c < C; ++c)
      for (std::size_t y = 0; y < 2 * H; ++y)
        for (std::size_t xo = 0; xo < 2 * W; ++xo) out.at(n, c, y, xo) = xv.at(n, c, y / 2, xo / 2);
  return x.tape().record(std::move(out), {x}, [x](Tape& t, const Grid& g) {
    Grid* gx = t.grad_target(x);
    if (!gx) return;
    const std::size_t N = g.dim(0), C = g.dim(1), H2 = g.dim(2), W2 = g.dim(3);
    for (std::size_t n = 0; n < N; ++n)
      for (std::size_t c = 0; c < C; ++c)
        for (std::size_t y = 0; y < H2; ++y)
          for (std::size_t xo = 0; xo < W2; ++xo) gx->at(n, c, y / 2, xo / 2) += g.at(n, c, y, xo);
  });
}

/// Concatenate along the channel axis: (N,Ca,H,W) + (N,Cb,H,W) -> (N,Ca+Cb,H,W).
inline Var concat_channels(Var a, Var b) {
  Tape& t = detail::same_tape(a, b);
  const Grid& av = a.value();
  const Grid& bv = b.value();
  detail::require_rank(av, 4, "concat_channels");
  detail::require_rank(bv, 4, "concat_channels");
  if (av.dim(0) != bv.dim(0) || av.dim(2) != bv.dim(2) || av.dim(3) != bv.dim(3))
    fail(ErrorCode::ShapeMismatch, "concat_channels: " + shape_str(av.shape()) + " vs " + shape_str(bv.shape()));
  const std::size_t N = av.dim(0), Ca = av.dim(1), Cb = bv.dim(1), HW = av.dim(2) * av.dim(3);
  Grid out(Shape{N, Ca + Cb, av.dim(2), av.dim(3)});
  for (std::size_t n = 0; n < N; ++n) {
    std::copy_n(&av[n * Ca * HW], Ca * HW, &out[n * (Ca + Cb) * HW]);
    std::copy_n(&bv[n * Cb * HW], Cb * HW, &out[(n * (Ca + Cb) + Ca) * HW]);
  }
  return t.record(std::move(out), {a, b}, [a, b, N, Ca, Cb, HW](Tape& t, const Grid& g) {
    if (Grid* ga = t.grad_target(a))
      for (std::size_t n = 0; n < N; ++n)
        for (std::size_t i = 0; i < Ca * HW; ++i) (*ga)[n * Ca * HW + i] += g[n * (Ca + Cb) * HW + i];
    if (Grid* gb = t.grad_target(b))
      for (std::size_t n = 0; n < N; ++n)
        for (std::size_t i = 0; i < Cb * HW; ++i) (*gb)[n * Cb * HW + i] += g[(n * (Ca + Cb) + Ca) * HW + i];
  });
}

/// Channels [begin, begin + count) of an NCHW grid.
inline Var slice_channels(Var x, std::size_t begin, std::size_t count) {
  const Grid& xv = x.value();
  detail::require_rank(xv, 4, "slice_channels");
  const std::size_t N = xv.dim(0), C = xv.dim(1), HW = xv.dim(2) * xv.dim(3);
  if (count == 0 || begin + count > C) fail(ErrorCode::ShapeMismatch, "slice_channels: range outside channel axis");
  Grid out(Shape{N, count, xv.dim(2), xv.dim(3)});
  for (std::size_t n = 0; n < N; ++n) std::copy_n(&xv[(n * C + begin) * HW], count * HW, &out[n * count * HW]);
  return x.tape().record(std::move(out), {x}, [x, N, C, HW, begin, count](Tape& t, const Grid& g) {
    if (Grid* gx = t.grad_target(x))
      for (std::size_t n = 0; n < N; ++n)
        for (std::size_t i = 0; i < count * HW; ++i) (*gx)[(n * C + begin) * HW + i] += g[n * count * HW + i];
  });
}

/// Fully connected layer: x (N, In), weight (Out, In), bias (Out) -> (N, Out).
inline Var affine(Var x, Var weight, std::optional<Var> bias) {
  const Grid& xv = x.value();
  const Grid& wv = weight.value();
  detail::require_rank(xv, 2, "affine input");
  detail::require_rank(wv, 2, "affine weight");
  const std::size_t N = xv.dim(0), In = xv.dim(1), Out = wv.dim(0);
  if (wv.dim(1) != In)
    fail(ErrorCode::ShapeMismatch, "affine: weight " + shape_str(wv.shape()) + " vs input " + shape_str(xv.shape()));
  if (bias && bias->value().shape() != Shape{Out})
    fail(ErrorCode::ShapeMismatch, "affine: bias shape " + shape_str(bias->shape()));
  Grid out(Shape{N, Out}, 0.0);
  for (std::size_t n = 0; n < N; ++n)
    for (std::size_t o = 0; o < Out; ++o) {
      double acc = bias ? bias->value()[o] : 0.0;
      for (std::size_t i = 0; i < In; ++i) acc += wv[o * In + i] * xv[n * In + i];
      out[n * Out + o] = acc;
    }
  auto backward = [x, weight, bias, N, In, Out](Tape& t, const Grid& g) {
    const Grid& xv = x.value();
    const Grid& wv = weight.value();
    Grid* gx = t.grad_target(x);
    Grid* gw = t.grad_target(weight);
    Grid* gb = bias ? t.grad_target(*bias) : nullptr;
    for (std::size_t n = 0; n < N; ++n)
      for (std::size_t o = 0; o < Out; ++o) {
        const double go = g[n * Out + o];
        if (gb) (*gb)[o] += go;
        for (std::size_t i = 0; i < In; ++i) {
          if (gw) (*gw)[o * In + i] += go * xv[n * In + i];
          if (gx) (*gx)[n * In + i] += go * wv[o * In + i];
        }
      }
  };
  Tape& t = detail::same_tape(x, weight);
  if (bias) return t.record(std::move(out), {x, weight, *bias}, std::move(backward));
  return t.record(std::move(out), {x, weight}, std::move(backward));
}

}  // namespace ad

}  // namespace bseg
