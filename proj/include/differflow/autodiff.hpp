#pragma once

// Reverse-mode automatic differentiation over dense tensors.
//
// A Graph is a static, append-only list of primitive nodes in topological
// order. Leaves (inputs and parameters) carry no value; a Session binds
// tensors to them through a Feed, runs the forward pass, and backpropagates
// into its own gradient buffers. Graphs are never mutated by a Session, so
// one Graph can back any number of concurrent Sessions.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <limits>
#include <map>
#include <optional>
#include <string>
#include <string_view>
#include <unordered_map>
#include <utility>
#include <vector>

#include "differflow/bilinear.hpp"
#include "differflow/tensor.hpp"

namespace differflow::autodiff {

// Wildcard extent for leaf signatures (e.g. a variable batch size).
inline constexpr std::size_t kAnyDim = std::numeric_limits<std::size_t>::max();

struct NodeId {
  std::size_t index = 0;
  friend bool operator==(NodeId, NodeId) = default;
};

enum class Op {
  Input,
  Parameter,
  MatMul,
  Add,
  Mul,
  Exp,
  Arctan,
  Relu,
  Negate,
  Scale,
  Sum,
  SumLast,
  SquaredNormLast,
  Permute,
  Slice,
  Concat,
  Conv2d,
  MaxPool2d,
  GlobalAvgPool,
  ResizeBilinear,
  ChannelAffine,
  Reshape,
};

inline const char* op_name(Op op) {
  switch (op) {
    case Op::Input: return "input";
    case Op::Parameter: return "parameter";
    case Op::MatMul: return "matmul";
    case Op::Add: return "add";
    case Op::Mul: return "mul";
    case Op::Exp: return "exp";
    case Op::Arctan: return "arctan";
    case Op::Relu: return "relu";
    case Op::Negate: return "negate";
    case Op::Scale: return "scale";
    case Op::Sum: return "sum";
    case Op::SumLast: return "sum_last";
    case Op::SquaredNormLast: return "squared_norm_last";
    case Op::Permute: return "permute";
    case Op::Slice: return "slice";
    case Op::Concat: return "concat";
    case Op::Conv2d: return "conv2d";
    case Op::MaxPool2d: return "max_pool2d";
    case Op::GlobalAvgPool: return "global_avg_pool";
    case Op::ResizeBilinear: return "resize_bilinear";
    case Op::ChannelAffine: return "channel_affine";
    case Op::Reshape: return "reshape";
  }
  return "?";
}

template <typename T>
struct Node {
  Op op = Op::Input;
  std::vector<std::size_t> inputs;
  std::string name;               // leaves only
  Shape shape;                    // leaf signature or reshape target
  std::vector<std::size_t> perm;  // permute
  std::size_t a = 0;              // slice begin | stride | pool size | height
  std::size_t b = 0;              // slice end | padding | pool stride | width
  T factor = T(1);                // scale
  std::vector<T> coeffs;          // channel affine multipliers
  std::vector<T> offsets;         // channel affine offsets
};

// Named tensors bound to graph leaves. Stores pointers: bound tensors must
// outlive every Session::forward call that uses this Feed.
template <typename T>
class Feed {
 public:
  Feed& bind(const std::string& name, const Tensor<T>& t) {
    bound_[name] = &t;
    return *this;
  }
  Feed& bind(const std::string&, const Tensor<T>&&) = delete;

  const Tensor<T>* find(const std::string& name) const {
    auto it = bound_.find(name);
    return it == bound_.end() ? nullptr : it->second;
  }

 private:
  std::unordered_map<std::string, const Tensor<T>*> bound_;
};

template <typename T>
using Gradients = std::map<std::string, Tensor<T>>;

template <typename T>
class Graph {
 public:
  Graph() {
#ifndef NDEBUG
    check_finite_ = true;
#endif
  }

  // Eager NaN/Inf detection after every primitive. On by default in debug
  // builds only.
  void set_check_finite(bool on) { check_finite_ = on; }
  bool check_finite() const { return check_finite_; }

  NodeId input(std::string name, Shape signature) {
    return leaf(Op::Input, std::move(name), std::move(signature));
  }

  NodeId parameter(std::string name, Shape shape) {
    return leaf(Op::Parameter, std::move(name), std::move(shape));
  }

  NodeId matmul(NodeId a, NodeId b) { return push(Op::MatMul, {a, b}); }
  // Same-shape add, or add a rank-1 tensor to every row of `a`.
  NodeId add(NodeId a, NodeId b) { return push(Op::Add, {a, b}); }
  NodeId mul(NodeId a, NodeId b) { return push(Op::Mul, {a, b}); }
  NodeId exp(NodeId x) { return push(Op::Exp, {x}); }
  NodeId arctan(NodeId x) { return push(Op::Arctan, {x}); }
  NodeId relu(NodeId x) { return push(Op::Relu, {x}); }
  NodeId negate(NodeId x) { return push(Op::Negate, {x}); }
  NodeId sub(NodeId a, NodeId b) { return add(a, negate(b)); }

  NodeId scale(NodeId x, T factor) {
    Node<T> n;
    n.factor = factor;
    return push(Op::Scale, {x}, std::move(n));
  }

  // Sum of every element into a scalar.
  NodeId sum(NodeId x) { return push(Op::Sum, {x}); }
  NodeId sum_last(NodeId x) { return push(Op::SumLast, {x}); }
  NodeId squared_norm_last(NodeId x) { return push(Op::SquaredNormLast, {x}); }

  // out[..., i] = x[..., perm[i]]
  NodeId permute(NodeId x, std::vector<std::size_t> perm) {
    std::vector<bool> seen(perm.size(), false);
    for (auto p : perm) {
      if (p >= perm.size() || seen[p]) {
        throw ShapeError("permute: index list is not a bijection");
      }
      seen[p] = true;
    }
    Node<T> n;
    n.perm = std::move(perm);
    return push(Op::Permute, {x}, std::move(n));
  }

  // Columns [begin, end) of the last axis.
  NodeId slice_last(NodeId x, std::size_t begin, std::size_t end) {
    if (begin >= end) throw ShapeError("slice_last: empty range");
    Node<T> n;
    n.a = begin;
    n.b = end;
    return push(Op::Slice, {x}, std::move(n));
  }

  NodeId concat_last(const std::vector<NodeId>& parts) {
    if (parts.empty()) throw ShapeError("concat_last: no inputs");
    return push(Op::Concat, parts);
  }

  // x [C,H,W], weight [O,C,kh,kw], bias [O] -> [O,H',W'] with zero padding.
  NodeId conv2d(NodeId x, NodeId weight, NodeId bias, std::size_t stride,
                std::size_t padding) {
    if (stride == 0) throw ShapeError("conv2d: stride must be positive");
    Node<T> n;
    n.a = stride;
    n.b = padding;
    return push(Op::Conv2d, {x, weight, bias}, std::move(n));
  }

  NodeId max_pool2d(NodeId x, std::size_t size, std::size_t stride) {
    if (size == 0 || stride == 0) throw ShapeError("max_pool2d: zero size");
    Node<T> n;
    n.a = size;
    n.b = stride;
    return push(Op::MaxPool2d, {x}, std::move(n));
  }

  // [C,H,W] -> [C]
  NodeId global_avg_pool(NodeId x) { return push(Op::GlobalAvgPool, {x}); }

  NodeId resize_bilinear(NodeId x, std::size_t height, std::size_t width) {
    if (height == 0 || width == 0) throw ShapeError("resize: zero extent");
    Node<T> n;
    n.a = height;
    n.b = width;
    return push(Op::ResizeBilinear, {x}, std::move(n));
  }

  // out[c,...] = x[c,...] * coeffs[c] + offsets[c]
  NodeId channel_affine(NodeId x, std::vector<T> coeffs,
                        std::vector<T> offsets) {
    if (coeffs.size() != offsets.size()) {
      throw ShapeError("channel_affine: coefficient count mismatch");
    }
    Node<T> n;
    n.coeffs = std::move(coeffs);
    n.offsets = std::move(offsets);
    return push(Op::ChannelAffine, {x}, std::move(n));
  }

  NodeId reshape(NodeId x, Shape shape) {
    Node<T> n;
    n.shape = std::move(shape);
    return push(Op::Reshape, {x}, std::move(n));
  }

  void mark_output(const std::string& name, NodeId id) {
    check(id);
    outputs_[name] = id.index;
  }

  std::optional<NodeId> find_output(std::string_view name) const {
    auto it = outputs_.find(std::string(name));
    if (it == outputs_.end()) return std::nullopt;
    return NodeId{it->second};
  }

  const std::map<std::string, std::size_t>& outputs() const { return outputs_; }
  const std::vector<Node<T>>& nodes() const { return nodes_; }
  std::size_t size() const { return nodes_.size(); }

 private:
  NodeId leaf(Op op, std::string name, Shape signature) {
    for (const auto& n : nodes_) {
      if ((n.op == Op::Input || n.op == Op::Parameter) && n.name == name) {
        throw ShapeError("duplicate leaf name '" + name + "'");
      }
    }
    Node<T> n;
    n.op = op;
    n.name = std::move(name);
    n.shape = std::move(signature);
    nodes_.push_back(std::move(n));
    return {nodes_.size() - 1};
  }

  NodeId push(Op op, std::initializer_list<NodeId> in, Node<T> n = {}) {
    return push(op, std::vector<NodeId>(in), std::move(n));
  }

  NodeId push(Op op, const std::vector<NodeId>& in, Node<T> n = {}) {
    n.op = op;
    for (auto id : in) {
      check(id);
      n.inputs.push_back(id.index);
    }
    nodes_.push_back(std::move(n));
    return {nodes_.size() - 1};
  }

  void check(NodeId id) const {
    if (id.index >= nodes_.size()) throw ShapeError("unknown node id");
  }

  std::vector<Node<T>> nodes_;
  std::map<std::string, std::size_t> outputs_;
  bool check_finite_ = false;
};

namespace detail {

[[noreturn]] inline void shape_fail(Op op, const std::string& what) {
  throw ShapeError(std::string(op_name(op)) + ": " + what);
}

inline std::size_t leading(const Shape& s) {
  return s.empty() ? 1 : shape_size(s) / s.back();
}

template <typename T>
Tensor<T> forward_op(const Node<T>& n,
                     const std::vector<const Tensor<T>*>& in) {
  switch (n.op) {
    case Op::MatMul: {
      const auto& a = *in[0];
      const auto& b = *in[1];
      if (a.rank() != 2 || b.rank() != 2 || a.dim(1) != b.dim(0)) {
        shape_fail(n.op, to_string(a.shape()) + " x " + to_string(b.shape()));
      }
      const std::size_t m = a.dim(0), k = a.dim(1), cols = b.dim(1);
      Tensor<T> out(Shape{m, cols});
      const T* pa = a.data().data();
      const T* pb = b.data().data();
      T* po = out.data().data();
      for (std::size_t i = 0; i < m; ++i) {
        T* row = po + i * cols;
        for (std::size_t p = 0; p < k; ++p) {
          const T av = pa[i * k + p];
          if (av == T(0)) continue;
          const T* brow = pb + p * cols;
          for (std::size_t j = 0; j < cols; ++j) row[j] += av * brow[j];
        }
      }
      return out;
    }
    case Op::Add: {
      const auto& a = *in[0];
      const auto& b = *in[1];
      Tensor<T> out = a;
      if (a.shape() == b.shape()) {
        for (std::size_t i = 0; i < a.size(); ++i) out[i] += b[i];
      } else if (b.rank() == 1 && a.rank() >= 1 && b.size() == a.last_dim()) {
        const std::size_t cols = b.size();
        for (std::size_t i = 0; i < a.size(); ++i) out[i] += b[i % cols];
      } else {
        shape_fail(n.op, to_string(a.shape()) + " + " + to_string(b.shape()));
      }
      return out;
    }
    case Op::Mul: {
      const auto& a = *in[0];
      const auto& b = *in[1];
      if (a.shape() != b.shape()) {
        shape_fail(n.op, to_string(a.shape()) + " * " + to_string(b.shape()));
      }
      Tensor<T> out = a;
      for (std::size_t i = 0; i < a.size(); ++i) out[i] *= b[i];
      return out;
    }
    case Op::Exp:
    case Op::Arctan:
    case Op::Relu:
    case Op::Negate:
    case Op::Scale: {
      Tensor<T> out = *in[0];
      for (auto& v : out.values()) {
        switch (n.op) {
          case Op::Exp: v = std::exp(v); break;
          case Op::Arctan: v = std::atan(v); break;
          case Op::Relu: v = v > T(0) ? v : T(0); break;
          case Op::Negate: v = -v; break;
          default: v *= n.factor; break;
        }
      }
      return out;
    }
    case Op::Sum: {
      T s = 0;
      for (T v : in[0]->values()) s += v;
      return Tensor<T>::scalar(s);
    }
    case Op::SumLast:
    case Op::SquaredNormLast: {
      const auto& x = *in[0];
      if (x.rank() == 0) shape_fail(n.op, "scalar input");
      Shape s(x.shape().begin(), x.shape().end() - 1);
      Tensor<T> out(s);
      const std::size_t cols = x.last_dim();
      for (std::size_t r = 0; r < out.size(); ++r) {
        T acc = 0;
        for (std::size_t j = 0; j < cols; ++j) {
          const T v = x[r * cols + j];
          acc += n.op == Op::SumLast ? v : v * v;
        }
        out[r] = acc;
      }
      return out;
    }
    case Op::Permute: {
      const auto& x = *in[0];
      if (x.rank() == 0 || x.last_dim() != n.perm.size()) {
        shape_fail(n.op, "last axis of " + to_string(x.shape()) +
                             " != permutation length " +
                             std::to_string(n.perm.size()));
      }
      Tensor<T> out(x.shape());
      const std::size_t cols = x.last_dim();
      for (std::size_t r = 0; r < leading(x.shape()); ++r) {
        for (std::size_t j = 0; j < cols; ++j) {
          out[r * cols + j] = x[r * cols + n.perm[j]];
        }
      }
      return out;
    }
    case Op::Slice: {
      const auto& x = *in[0];
      if (x.rank() == 0 || n.b > x.last_dim()) {
        shape_fail(n.op, "range exceeds " + to_string(x.shape()));
      }
      Shape s = x.shape();
      s.back() = n.b - n.a;
      Tensor<T> out(s);
      const std::size_t cols = x.last_dim(), w = n.b - n.a;
      for (std::size_t r = 0; r < leading(x.shape()); ++r) {
        std::copy_n(x.data().begin() + r * cols + n.a, w,
                    out.data().begin() + r * w);
      }
      return out;
    }
    case Op::Concat: {
      Shape s = in[0]->shape();
      if (s.empty()) shape_fail(n.op, "scalar input");
      const std::size_t rows = leading(s);
      std::size_t total = 0;
      for (const auto* t : in) {
        if (t->rank() != s.size() || leading(t->shape()) != rows ||
            !std::equal(s.begin(), s.end() - 1, t->shape().begin())) {
          shape_fail(n.op, to_string(s) + " with " + to_string(t->shape()));
        }
        total += t->last_dim();
      }
      s.back() = total;
      Tensor<T> out(s);
      for (std::size_t r = 0; r < rows; ++r) {
        std::size_t off = r * total;
        for (const auto* t : in) {
          const std::size_t w = t->last_dim();
          std::copy_n(t->data().begin() + r * w, w, out.data().begin() + off);
          off += w;
        }
      }
      return out;
    }
    case Op::Conv2d: {
      const auto& x = *in[0];
      const auto& w = *in[1];
      const auto& bias = *in[2];
      if (x.rank() != 3 || w.rank() != 4 || w.dim(1) != x.dim(0) ||
          bias.rank() != 1 || bias.size() != w.dim(0)) {
        shape_fail(n.op, "input " + to_string(x.shape()) + ", weight " +
                             to_string(w.shape()) + ", bias " +
                             to_string(bias.shape()));
      }
      const std::size_t C = x.dim(0), H = x.dim(1), W = x.dim(2);
      const std::size_t O = w.dim(0), kh = w.dim(2), kw = w.dim(3);
      const std::size_t stride = n.a, pad = n.b;
      if (H + 2 * pad < kh || W + 2 * pad < kw) {
        shape_fail(n.op, "kernel larger than padded input");
      }
      const std::size_t Ho = (H + 2 * pad - kh) / stride + 1;
      const std::size_t Wo = (W + 2 * pad - kw) / stride + 1;
      Tensor<T> out(Shape{O, Ho, Wo});
      const T* px = x.data().data();
      const T* pw = w.data().data();
      T* po = out.data().data();
      for (std::size_t o = 0; o < O; ++o) {
        T* plane = po + o * Ho * Wo;
        std::fill(plane, plane + Ho * Wo, bias[o]);
        for (std::size_t c = 0; c < C; ++c) {
          const T* xc = px + c * H * W;
          for (std::size_t i = 0; i < kh; ++i) {
            for (std::size_t j = 0; j < kw; ++j) {
              const T wv = pw[((o * C + c) * kh + i) * kw + j];
              for (std::size_t y = 0; y < Ho; ++y) {
                const std::ptrdiff_t sy =
                    static_cast<std::ptrdiff_t>(y * stride + i) -
                    static_cast<std::ptrdiff_t>(pad);
                if (sy < 0 || sy >= static_cast<std::ptrdiff_t>(H)) continue;
                const T* xrow = xc + sy * W;
                T* orow = plane + y * Wo;
                for (std::size_t xo = 0; xo < Wo; ++xo) {
                  const std::ptrdiff_t sx =
                      static_cast<std::ptrdiff_t>(xo * stride + j) -
                      static_cast<std::ptrdiff_t>(pad);
                  if (sx < 0 || sx >= static_cast<std::ptrdiff_t>(W)) continue;
                  orow[xo] += wv * xrow[sx];
                }
              }
            }
          }
        }
      }
      return out;
    }
    case Op::MaxPool2d: {
      const auto& x = *in[0];
      if (x.rank() != 3 || x.dim(1) < n.a || x.dim(2) < n.a) {
        shape_fail(n.op, "input " + to_string(x.shape()) + " smaller than " +
                             std::to_string(n.a));
      }
      const std::size_t C = x.dim(0), H = x.dim(1), W = x.dim(2);
      const std::size_t Ho = (H - n.a) / n.b + 1, Wo = (W - n.a) / n.b + 1;
      Tensor<T> out(Shape{C, Ho, Wo});
      for (std::size_t c = 0; c < C; ++c) {
        for (std::size_t y = 0; y < Ho; ++y) {
          for (std::size_t xo = 0; xo < Wo; ++xo) {
            T m = -std::numeric_limits<T>::infinity();
            for (std::size_t i = 0; i < n.a; ++i) {
              for (std::size_t j = 0; j < n.a; ++j) {
                m = std::max(m, x[(c * H + y * n.b + i) * W + xo * n.b + j]);
              }
            }
            out[(c * Ho + y) * Wo + xo] = m;
          }
        }
      }
      return out;
    }
    case Op::GlobalAvgPool: {
      const auto& x = *in[0];
      if (x.rank() != 3) shape_fail(n.op, "expects [C,H,W]");
      const std::size_t C = x.dim(0), hw = x.dim(1) * x.dim(2);
      Tensor<T> out(Shape{C});
      for (std::size_t c = 0; c < C; ++c) {
        T acc = 0;
        for (std::size_t i = 0; i < hw; ++i) acc += x[c * hw + i];
        out[c] = acc / static_cast<T>(hw);
      }
      return out;
    }
    case Op::ResizeBilinear: {
      const auto& x = *in[0];
      if (x.rank() != 3) shape_fail(n.op, "expects [C,H,W]");
      if (x.dim(1) == n.a && x.dim(2) == n.b) return x;
      const std::size_t C = x.dim(0), H = x.dim(1), W = x.dim(2);
      const auto ty = bilinear_taps(H, n.a);
      const auto tx = bilinear_taps(W, n.b);
      Tensor<T> out(Shape{C, n.a, n.b});
      for (std::size_t c = 0; c < C; ++c) {
        const T* src = x.data().data() + c * H * W;
        for (std::size_t y = 0; y < n.a; ++y) {
          const T fy = static_cast<T>(ty[y].frac);
          for (std::size_t xo = 0; xo < n.b; ++xo) {
            const T fx = static_cast<T>(tx[xo].frac);
            const T top = src[ty[y].lo * W + tx[xo].lo] * (T(1) - fx) +
                          src[ty[y].lo * W + tx[xo].hi] * fx;
            const T bot = src[ty[y].hi * W + tx[xo].lo] * (T(1) - fx) +
                          src[ty[y].hi * W + tx[xo].hi] * fx;
            out[(c * n.a + y) * n.b + xo] = top * (T(1) - fy) + bot * fy;
          }
        }
      }
      return out;
    }
    case Op::ChannelAffine: {
      const auto& x = *in[0];
      if (x.rank() == 0 || x.dim(0) != n.coeffs.size()) {
        shape_fail(n.op, "channel count of " + to_string(x.shape()));
      }
      Tensor<T> out = x;
      const std::size_t plane = x.size() / x.dim(0);
      for (std::size_t i = 0; i < x.size(); ++i) {
        const std::size_t c = i / plane;
        out[i] = x[i] * n.coeffs[c] + n.offsets[c];
      }
      return out;
    }
    case Op::Reshape: {
      if (shape_size(n.shape) != in[0]->size()) {
        shape_fail(n.op, to_string(in[0]->shape()) + " -> " +
                             to_string(n.shape));
      }
      return in[0]->reshaped(n.shape);
    }
    case Op::Input:
    case Op::Parameter:
      break;
  }
  shape_fail(n.op, "not a computed node");
}

// Accumulates d(out)/d(inputs) given `g` = d(loss)/d(out). `grads[k]` is the
// accumulator for input k, or nullptr when that input needs no gradient.
template <typename T>
void backward_op(const Node<T>& n, const std::vector<const Tensor<T>*>& in,
                 const Tensor<T>& out, const Tensor<T>& g,
                 const std::vector<Tensor<T>*>& grads) {
  auto* g0 = grads[0];
  switch (n.op) {
    case Op::MatMul: {
      const auto& a = *in[0];
      const auto& b = *in[1];
      const std::size_t m = a.dim(0), k = a.dim(1), cols = b.dim(1);
      const T* pa = a.data().data();
      const T* pb = b.data().data();
      const T* pg = g.data().data();
      if (g0) {
        T* da = g0->data().data();
        std::vector<T> bt(k * cols);
        for (std::size_t p = 0; p < k; ++p) {
          for (std::size_t j = 0; j < cols; ++j) bt[j * k + p] = pb[p * cols + j];
        }
        for (std::size_t i = 0; i < m; ++i) {
          const T* grow = pg + i * cols;
          T* darow = da + i * k;
          for (std::size_t j = 0; j < cols; ++j) {
            const T gv = grow[j];
            if (gv == T(0)) continue;
            const T* btrow = bt.data() + j * k;
            for (std::size_t p = 0; p < k; ++p) darow[p] += gv * btrow[p];
          }
        }
      }
      if (grads[1]) {
        T* db = grads[1]->data().data();
        for (std::size_t i = 0; i < m; ++i) {
          const T* grow = pg + i * cols;
          for (std::size_t p = 0; p < k; ++p) {
            const T av = pa[i * k + p];
            if (av == T(0)) continue;
            T* drow = db + p * cols;
            for (std::size_t j = 0; j < cols; ++j) drow[j] += av * grow[j];
          }
        }
      }
      return;
    }
    case Op::Add: {
      if (g0) {
        for (std::size_t i = 0; i < g.size(); ++i) (*g0)[i] += g[i];
      }
      if (auto* g1 = grads[1]) {
        const std::size_t cols = g1->size();
        for (std::size_t i = 0; i < g.size(); ++i) (*g1)[i % cols] += g[i];
      }
      return;
    }
    case Op::Mul: {
      if (g0) {
        for (std::size_t i = 0; i < g.size(); ++i) (*g0)[i] += g[i] * (*in[1])[i];
      }
      if (auto* g1 = grads[1]) {
        for (std::size_t i = 0; i < g.size(); ++i) (*g1)[i] += g[i] * (*in[0])[i];
      }
      return;
    }
    case Op::Exp:
      if (g0) {
        for (std::size_t i = 0; i < g.size(); ++i) (*g0)[i] += g[i] * out[i];
      }
      return;
    case Op::Arctan:
      if (g0) {
        for (std::size_t i = 0; i < g.size(); ++i) {
          const T x = (*in[0])[i];
          (*g0)[i] += g[i] / (T(1) + x * x);
        }
      }
      return;
    case Op::Relu:
      if (g0) {
        for (std::size_t i = 0; i < g.size(); ++i) {
          if ((*in[0])[i] > T(0)) (*g0)[i] += g[i];
        }
      }
      return;
    case Op::Negate:
      if (g0) {
        for (std::size_t i = 0; i < g.size(); ++i) (*g0)[i] -= g[i];
      }
      return;
    case Op::Scale:
      if (g0) {
        for (std::size_t i = 0; i < g.size(); ++i) (*g0)[i] += g[i] * n.factor;
      }
      return;
    case Op::Sum:
      if (g0) {
        const T s = g[0];
        for (auto& v : g0->values()) v += s;
      }
      return;
    case Op::SumLast:
    case Op::SquaredNormLast:
      if (g0) {
        const std::size_t cols = in[0]->last_dim();
        for (std::size_t i = 0; i < g0->size(); ++i) {
          const T gv = g[i / cols];
          (*g0)[i] += n.op == Op::SumLast ? gv : T(2) * (*in[0])[i] * gv;
        }
      }
      return;
    case Op::Permute:
      if (g0) {
        const std::size_t cols = n.perm.size();
        for (std::size_t r = 0; r < g.size() / cols; ++r) {
          for (std::size_t j = 0; j < cols; ++j) {
            (*g0)[r * cols + n.perm[j]] += g[r * cols + j];
          }
        }
      }
      return;
    case Op::Slice:
      if (g0) {
        const std::size_t cols = in[0]->last_dim(), w = n.b - n.a;
        for (std::size_t r = 0; r < g.size() / w; ++r) {
          for (std::size_t j = 0; j < w; ++j) {
            (*g0)[r * cols + n.a + j] += g[r * w + j];
          }
        }
      }
      return;
    case Op::Concat: {
      const std::size_t total = out.last_dim();
      const std::size_t rows = g.size() / total;
      std::size_t off = 0;
      for (std::size_t k = 0; k < in.size(); ++k) {
        const std::size_t w = in[k]->last_dim();
        if (auto* gk = grads[k]) {
          for (std::size_t r = 0; r < rows; ++r) {
            for (std::size_t j = 0; j < w; ++j) {
              (*gk)[r * w + j] += g[r * total + off + j];
            }
          }
        }
        off += w;
      }
      return;
    }
    case Op::Conv2d: {
      const auto& x = *in[0];
      const auto& w = *in[1];
      const std::size_t C = x.dim(0), H = x.dim(1), W = x.dim(2);
      const std::size_t O = w.dim(0), kh = w.dim(2), kw = w.dim(3);
      const std::size_t Ho = out.dim(1), Wo = out.dim(2);
      const std::size_t stride = n.a, pad = n.b;
      T* dx = g0 ? g0->data().data() : nullptr;
      T* dw = grads[1] ? grads[1]->data().data() : nullptr;
      const T* px = x.data().data();
      const T* pw = w.data().data();
      const T* pg = g.data().data();
      for (std::size_t o = 0; o < O; ++o) {
        const T* gplane = pg + o * Ho * Wo;
        if (auto* db = grads[2]) {
          T acc = 0;
          for (std::size_t i = 0; i < Ho * Wo; ++i) acc += gplane[i];
          (*db)[o] += acc;
        }
        if (!dx && !dw) continue;
        for (std::size_t c = 0; c < C; ++c) {
          for (std::size_t i = 0; i < kh; ++i) {
            for (std::size_t j = 0; j < kw; ++j) {
              const std::size_t widx = ((o * C + c) * kh + i) * kw + j;
              const T wv = pw[widx];
              T wacc = 0;
              for (std::size_t y = 0; y < Ho; ++y) {
                const std::ptrdiff_t sy =
                    static_cast<std::ptrdiff_t>(y * stride + i) -
                    static_cast<std::ptrdiff_t>(pad);
                if (sy < 0 || sy >= static_cast<std::ptrdiff_t>(H)) continue;
                const std::size_t rowoff = c * H * W + sy * W;
                const T* grow = gplane + y * Wo;
                for (std::size_t xo = 0; xo < Wo; ++xo) {
                  const std::ptrdiff_t sx =
                      static_cast<std::ptrdiff_t>(xo * stride + j) -
                      static_cast<std::ptrdiff_t>(pad);
                  if (sx < 0 || sx >= static_cast<std::ptrdiff_t>(W)) continue;
                  if (dx) dx[rowoff + sx] += wv * grow[xo];
                  wacc += px[rowoff + sx] * grow[xo];
                }
              }
              if (dw) dw[widx] += wacc;
            }
          }
        }
      }
      return;
    }
    case Op::MaxPool2d: {
      if (!g0) return;
      const auto& x = *in[0];
      const std::size_t C = x.dim(0), H = x.dim(1), W = x.dim(2);
      const std::size_t Ho = out.dim(1), Wo = out.dim(2);
      for (std::size_t c = 0; c < C; ++c) {
        for (std::size_t y = 0; y < Ho; ++y) {
          for (std::size_t xo = 0; xo < Wo; ++xo) {
            // Route to the first maximal element in scan order.
            std::size_t best = (c * H + y * n.b) * W + xo * n.b;
            for (std::size_t i = 0; i < n.a; ++i) {
              for (std::size_t j = 0; j < n.a; ++j) {
                const std::size_t idx = (c * H + y * n.b + i) * W + xo * n.b + j;
                if (x[idx] > x[best]) best = idx;
              }
            }
            (*g0)[best] += g[(c * Ho + y) * Wo + xo];
          }
        }
      }
      return;
    }
    case Op::GlobalAvgPool:
      if (g0) {
        const std::size_t hw = in[0]->dim(1) * in[0]->dim(2);
        const T inv = T(1) / static_cast<T>(hw);
        for (std::size_t i = 0; i < g0->size(); ++i) (*g0)[i] += g[i / hw] * inv;
      }
      return;
    case Op::ResizeBilinear: {
      if (!g0) return;
      const auto& x = *in[0];
      const std::size_t C = x.dim(0), H = x.dim(1), W = x.dim(2);
      if (H == n.a && W == n.b) {
        for (std::size_t i = 0; i < g.size(); ++i) (*g0)[i] += g[i];
        return;
      }
      const auto ty = bilinear_taps(H, n.a);
      const auto tx = bilinear_taps(W, n.b);
      for (std::size_t c = 0; c < C; ++c) {
        T* dst = g0->data().data() + c * H * W;
        for (std::size_t y = 0; y < n.a; ++y) {
          const T fy = static_cast<T>(ty[y].frac);
          for (std::size_t xo = 0; xo < n.b; ++xo) {
            const T fx = static_cast<T>(tx[xo].frac);
            const T gv = g[(c * n.a + y) * n.b + xo];
            dst[ty[y].lo * W + tx[xo].lo] += gv * (T(1) - fy) * (T(1) - fx);
            dst[ty[y].lo * W + tx[xo].hi] += gv * (T(1) - fy) * fx;
            dst[ty[y].hi * W + tx[xo].lo] += gv * fy * (T(1) - fx);
            dst[ty[y].hi * W + tx[xo].hi] += gv * fy * fx;
          }
        }
      }
      return;
    }
    case Op::ChannelAffine:
      if (g0) {
        const std::size_t plane = g.size() / n.coeffs.size();
        for (std::size_t i = 0; i < g.size(); ++i) {
          (*g0)[i] += g[i] * n.coeffs[i / plane];
        }
      }
      return;
    case Op::Reshape:
      if (g0) {
        for (std::size_t i = 0; i < g.size(); ++i) (*g0)[i] += g[i];
      }
      return;
    case Op::Input:
    case Op::Parameter:
      return;
  }
}

}  // namespace detail

// Per-call execution state for one Graph: bound leaves, node values and
// gradient buffers.
template <typename T>
class Session {
 public:
  explicit Session(const Graph<T>& graph) : graph_(&graph) {}

  void forward(const Feed<T>& feed) {
    const auto& nodes = graph_->nodes();
    values_.assign(nodes.size(), Tensor<T>{});
    view_.assign(nodes.size(), nullptr);
    for (std::size_t i = 0; i < nodes.size(); ++i) {
      const auto& n = nodes[i];
      if (n.op == Op::Input || n.op == Op::Parameter) {
        const Tensor<T>* t = feed.find(n.name);
        if (!t) throw ShapeError("no tensor bound to '" + n.name + "'");
        if (!matches(n.shape, t->shape())) {
          throw ShapeError("'" + n.name + "' expects shape " +
                           signature_string(n.shape) + ", got " +
                           to_string(t->shape()));
        }
        view_[i] = t;
        continue;
      }
      std::vector<const Tensor<T>*> in;
      in.reserve(n.inputs.size());
      for (auto k : n.inputs) in.push_back(view_[k]);
      values_[i] = detail::forward_op(n, in);
      if (graph_->check_finite() && !values_[i].all_finite()) {
        throw NumericalError(std::string("non-finite value produced by ") +
                             op_name(n.op) + " (node " + std::to_string(i) +
                             ")");
      }
      view_[i] = &values_[i];
    }
    evaluated_ = true;
  }

  bool evaluated() const { return evaluated_; }

  const Tensor<T>& value(NodeId id) const {
    require_forward();
    return *view_.at(id.index);
  }

  const Tensor<T>& output(std::string_view name) const {
    return value(output_id(name));
  }

  std::map<std::string, Tensor<T>> outputs() const {
    require_forward();
    std::map<std::string, Tensor<T>> out;
    for (const auto& [name, idx] : graph_->outputs()) out[name] = *view_[idx];
    return out;
  }

  // Gradients of sum(seed * output) with respect to every leaf, keyed by
  // leaf name. Leaves the output does not depend on get zero gradients.
  Gradients<T> backward(std::string_view output, const Tensor<T>& seed) const {
    if (!evaluated_) throw Error("backward called before forward");
    const NodeId root = output_id(output);
    const auto& nodes = graph_->nodes();
    if (seed.shape() != view_[root.index]->shape()) {
      throw ShapeError("seed shape " + to_string(seed.shape()) +
                       " does not match output shape " +
                       to_string(view_[root.index]->shape()));
    }
    std::vector<std::optional<Tensor<T>>> grads(nodes.size());
    grads[root.index] = seed;
    for (std::size_t i = root.index + 1; i-- > 0;) {
      if (!grads[i]) continue;
      const auto& n = nodes[i];
      if (n.op == Op::Input || n.op == Op::Parameter) continue;
      std::vector<const Tensor<T>*> in;
      std::vector<Tensor<T>*> acc;
      for (auto k : n.inputs) {
        in.push_back(view_[k]);
        if (!grads[k]) grads[k] = Tensor<T>(view_[k]->shape());
        acc.push_back(&*grads[k]);
      }
      detail::backward_op(n, in, *view_[i], *grads[i], acc);
      if (i != root.index) grads[i].reset();
    }
    Gradients<T> out;
    for (std::size_t i = 0; i < nodes.size(); ++i) {
      const auto& n = nodes[i];
      if (n.op != Op::Input && n.op != Op::Parameter) continue;
      out[n.name] = grads[i] ? std::move(*grads[i]) : Tensor<T>(view_[i]->shape());
    }
    return out;
  }

  // Scalar-output convenience: seed of one.
  Gradients<T> backward(std::string_view output) const {
    const auto& v = value(output_id(output));
    return backward(output, Tensor<T>(v.shape(), T(1)));
  }

 private:
  static bool matches(const Shape& sig, const Shape& s) {
    if (sig.size() != s.size()) return false;
    for (std::size_t i = 0; i < s.size(); ++i) {
      if (sig[i] != kAnyDim && sig[i] != s[i]) return false;
    }
    return true;
  }

  static std::string signature_string(const Shape& sig) {
    std::string out = "[";
    for (std::size_t i = 0; i < sig.size(); ++i) {
      if (i) out += ',';
      out += sig[i] == kAnyDim ? "*" : std::to_string(sig[i]);
    }
    return out + "]";
  }

  NodeId output_id(std::string_view name) const {
    auto id = graph_->find_output(name);
    if (!id) throw ShapeError("graph has no output '" + std::string(name) + "'");
    return *id;
  }

  void require_forward() const {
    if (!evaluated_) throw Error("session has not run forward");
  }

  const Graph<T>* graph_;
  std::vector<Tensor<T>> values_;
  std::vector<const Tensor<T>*> view_;
  bool evaluated_ = false;
};

// One-shot forward pass returning every marked output.
template <typename T>
std::map<std::string, Tensor<T>> evaluate(const Graph<T>& graph,
                                          const Feed<T>& feed) {
  Session<T> s(graph);
  s.forward(feed);
  return s.outputs();
}

}  // namespace differflow::autodiff
