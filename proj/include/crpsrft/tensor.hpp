#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstring>
#include <functional>
#include <initializer_list>
#include <memory>
#include <numeric>
#include <sstream>
#include <string>
#include <unordered_set>
#include <utility>
#include <vector>

#include "crpsrft/errors.hpp"

namespace crpsrft {

using Shape = std::vector<std::size_t>;

inline std::size_t shape_numel(const Shape& s) {
  std::size_t n = 1;
  for (std::size_t e : s) n *= e;
  return n;
}

inline std::string shape_str(const Shape& s) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < s.size(); ++i) {
    if (i) os << ',';
    os << s[i];
  }
  os << ']';
  return os.str();
}

namespace detail {

struct TensorNode {
  Shape shape;
  std::vector<double> value;
  std::vector<double> grad;  // allocated on first use
  bool requires_grad = false;
  const char* op = "leaf";
  std::vector<std::shared_ptr<TensorNode>> parents;
  std::function<void(TensorNode&)> backprop;  // reads this->grad, accumulates into parents

  void ensure_grad() {
    if (grad.size() != value.size()) grad.assign(value.size(), 0.0);
  }
};

/// Thread-local switch: when disabled, ops do not record the graph.
inline bool& grad_mode_flag() {
  thread_local bool enabled = true;
  return enabled;
}

}  // namespace detail

/// RAII guard disabling gradient recording (evaluation / rollout paths).
class NoGradGuard {
 public:
  NoGradGuard() : prev_(detail::grad_mode_flag()) {
    detail::grad_mode_flag() = false;
  }
  ~NoGradGuard() { detail::grad_mode_flag() = prev_; }
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool prev_;
};

inline bool grad_mode_enabled() { return detail::grad_mode_flag(); }

/// Dense n-dimensional f64 array with reverse-mode autodiff.
///
/// Value semantics over a shared node: copies alias the same storage. Values
/// are treated as immutable once created, except for parameter updates between
/// training steps (mutable_data) and grad buffers.
class Tensor {
 public:
  Tensor() : node_(std::make_shared<detail::TensorNode>()) {}

  static Tensor zeros(Shape shape, bool requires_grad = false) {
    return filled(std::move(shape), 0.0, requires_grad);
  }

  static Tensor filled(Shape shape, double v, bool requires_grad = false) {
    Tensor t;
    t.node_->shape = std::move(shape);
    t.node_->value.assign(shape_numel(t.node_->shape), v);
    t.node_->requires_grad = requires_grad;
    return t;
  }

  static Tensor from_data(Shape shape, std::vector<double> data,
                          bool requires_grad = false) {
    if (shape_numel(shape) != data.size())
      throw ShapeError("from_data: shape " + shape_str(shape) + " wants " +
                       std::to_string(shape_numel(shape)) + " values, got " +
                       std::to_string(data.size()));
    Tensor t;
    t.node_->shape = std::move(shape);
    t.node_->value = std::move(data);
    t.node_->requires_grad = requires_grad;
    return t;
  }

  static Tensor scalar(double v, bool requires_grad = false) {
    return from_data({}, {v}, requires_grad);
  }

  /// Factory for custom primitives (used by the loss module).
  static Tensor from_op(const char* op, Shape shape, std::vector<double> value,
                        std::vector<Tensor> parents,
                        std::function<void(detail::TensorNode&)> backprop) {
    Tensor t;
    t.node_->shape = std::move(shape);
    t.node_->value = std::move(value);
    t.node_->op = op;
    bool rg = false;
    if (grad_mode_enabled())
      for (const Tensor& p : parents) rg = rg || p.requires_grad();
    if (rg) {
      t.node_->requires_grad = true;
      t.node_->parents.reserve(parents.size());
      for (Tensor& p : parents) t.node_->parents.push_back(std::move(p.node_));
      t.node_->backprop = std::move(backprop);
    }
    return t;
  }

  const Shape& shape() const { return node_->shape; }
  std::size_t ndim() const { return node_->shape.size(); }
  std::size_t size() const { return node_->value.size(); }
  std::size_t extent(std::size_t axis) const { return node_->shape.at(axis); }
  bool requires_grad() const { return node_->requires_grad; }

  void set_requires_grad(bool rg) {
    if (rg && node_->backprop)
      throw ValueError("set_requires_grad: only leaf tensors may be toggled");
    node_->requires_grad = rg;
  }

  const std::vector<double>& data() const { return node_->value; }
  /// Direct storage access for parameter updates between steps.
  std::vector<double>& mutable_data() { return node_->value; }

  bool has_grad() const { return !node_->grad.empty(); }
  const std::vector<double>& grad() const {
    if (node_->grad.empty())
      throw ValueError("grad: no gradient populated; call backward first");
    return node_->grad;
  }
  std::vector<double>& mutable_grad() {
    node_->ensure_grad();
    return node_->grad;
  }
  void zero_grad() {
    if (!node_->grad.empty()) std::fill(node_->grad.begin(), node_->grad.end(), 0.0);
  }

  double item() const {
    if (size() != 1)
      throw ShapeError("item: tensor is not scalar, shape " + shape_str(shape()));
    return node_->value[0];
  }

  /// Reverse-mode accumulation from a scalar. Repeated calls without zeroing
  /// grads accumulate.
  void backward() const;

  detail::TensorNode* node() const { return node_.get(); }
  const std::shared_ptr<detail::TensorNode>& node_ptr() const { return node_; }

 private:
  std::shared_ptr<detail::TensorNode> node_;
};

/// Topologically ordered record of the operations reachable from a scalar
/// loss; replayed in reverse for exact chain-rule accumulation. Built on
/// demand by backward() and discarded afterwards; the graph itself is freed
/// once the tensors holding it go out of scope (cleared between steps).
struct ComputationTape {
  std::vector<detail::TensorNode*> order;  // parents before children

  static ComputationTape build(detail::TensorNode* root) {
    ComputationTape tape;
    std::unordered_set<detail::TensorNode*> visited;
    // Iterative post-order DFS.
    std::vector<std::pair<detail::TensorNode*, std::size_t>> stack;
    if (root->requires_grad) stack.emplace_back(root, 0);
    while (!stack.empty()) {
      auto& [node, next_child] = stack.back();
      if (next_child == 0 && visited.count(node)) {
        stack.pop_back();
        continue;
      }
      if (next_child < node->parents.size()) {
        detail::TensorNode* p = node->parents[next_child++].get();
        if (p->requires_grad && !visited.count(p)) stack.emplace_back(p, 0);
      } else {
        visited.insert(node);
        tape.order.push_back(node);
        stack.pop_back();
      }
    }
    return tape;
  }
};

inline void Tensor::backward() const {
  if (size() != 1)
    throw ValueError("backward: loss must be scalar, got shape " +
                     shape_str(shape()));
  if (!node_->requires_grad) return;
  ComputationTape tape = ComputationTape::build(node_.get());
  for (detail::TensorNode* n : tape.order) n->ensure_grad();
  node_->grad[0] += 1.0;
  for (auto it = tape.order.rbegin(); it != tape.order.rend(); ++it)
    if ((*it)->backprop) (*it)->backprop(**it);
}

// ---------------------------------------------------------------------------
// Broadcasting machinery
// ---------------------------------------------------------------------------

inline Shape broadcast_shape(const char* op, const Shape& a, const Shape& b) {
  const std::size_t rank = std::max(a.size(), b.size());
  Shape out(rank);
  for (std::size_t i = 0; i < rank; ++i) {
    const std::size_t ea = i < rank - a.size() ? 1 : a[i - (rank - a.size())];
    const std::size_t eb = i < rank - b.size() ? 1 : b[i - (rank - b.size())];
    if (ea != eb && ea != 1 && eb != 1)
      throw ShapeError(std::string(op) + ": incompatible shapes " +
                       shape_str(a) + " vs " + shape_str(b));
    out[i] = std::max(ea, eb);
  }
  return out;
}

namespace detail {

/// Row-major strides of `shape` aligned to the (right-aligned) rank of `out`,
/// with zero stride on broadcast axes.
inline std::vector<std::size_t> bcast_strides(const Shape& shape,
                                              const Shape& out) {
  std::vector<std::size_t> strides(out.size(), 0);
  std::size_t s = 1;
  for (std::size_t i = 0; i < shape.size(); ++i) {
    const std::size_t src = shape.size() - 1 - i;
    const std::size_t dst = out.size() - 1 - i;
    strides[dst] = (shape[src] == 1 && out[dst] != 1) ? 0 : s;
    s *= shape[src];
  }
  return strides;
}

/// Calls f(out_flat, a_flat, b_flat) for every element of `out` in order.
template <class F>
void for_each_bcast2(const Shape& out, const std::vector<std::size_t>& sa,
                     const std::vector<std::size_t>& sb, F&& f) {
  const std::size_t n = shape_numel(out);
  const std::size_t rank = out.size();
  if (rank == 0) {
    if (n) f(std::size_t{0}, std::size_t{0}, std::size_t{0});
    return;
  }
  std::vector<std::size_t> idx(rank, 0);
  std::size_t ia = 0, ib = 0;
  for (std::size_t flat = 0; flat < n; ++flat) {
    f(flat, ia, ib);
    for (std::size_t d = rank; d-- > 0;) {
      ++idx[d];
      ia += sa[d];
      ib += sb[d];
      if (idx[d] < out[d]) break;
      idx[d] = 0;
      ia -= sa[d] * out[d];
      ib -= sb[d] * out[d];
    }
  }
}

/// Calls f(out_flat, in_flat) where `in` broadcasts to `out`.
template <class F>
void for_each_bcast1(const Shape& out, const std::vector<std::size_t>& si,
                     F&& f) {
  const std::size_t n = shape_numel(out);
  const std::size_t rank = out.size();
  if (rank == 0) {
    if (n) f(std::size_t{0}, std::size_t{0});
    return;
  }
  std::vector<std::size_t> idx(rank, 0);
  std::size_t ii = 0;
  for (std::size_t flat = 0; flat < n; ++flat) {
    f(flat, ii);
    for (std::size_t d = rank; d-- > 0;) {
      ++idx[d];
      ii += si[d];
      if (idx[d] < out[d]) break;
      idx[d] = 0;
      ii -= si[d] * out[d];
    }
  }
}

inline bool same_shape(const Shape& a, const Shape& b) { return a == b; }

}  // namespace detail

// ---------------------------------------------------------------------------
// Elementwise binary primitives
// ---------------------------------------------------------------------------

namespace detail {

/// Generic broadcasting binary op. fwd(a, b) -> value;
/// dfa/dfb give local partials evaluated at (a, b, out).
template <class Fwd, class Dfa, class Dfb>
Tensor binary_op(const char* op, const Tensor& a, const Tensor& b, Fwd fwd,
                 Dfa dfa, Dfb dfb) {
  const Shape out_shape = broadcast_shape(op, a.shape(), b.shape());
  const std::size_t n = shape_numel(out_shape);
  std::vector<double> value(n);
  const double* pa = a.data().data();
  const double* pb = b.data().data();
  const bool flat = same_shape(a.shape(), out_shape) &&
                    same_shape(b.shape(), out_shape);
  if (flat) {
    for (std::size_t i = 0; i < n; ++i) value[i] = fwd(pa[i], pb[i]);
  } else {
    const auto sa = bcast_strides(a.shape(), out_shape);
    const auto sb = bcast_strides(b.shape(), out_shape);
    for_each_bcast2(out_shape, sa, sb,
                    [&](std::size_t o, std::size_t ia, std::size_t ib) {
                      value[o] = fwd(pa[ia], pb[ib]);
                    });
  }
  Tensor an = a, bn = b;
  return Tensor::from_op(
      op, out_shape, std::move(value), {a, b},
      [an, bn, out_shape, flat, dfa, dfb](detail::TensorNode& self) {
        detail::TensorNode* na = an.node();
        detail::TensorNode* nb = bn.node();
        const double* pa = na->value.data();
        const double* pb = nb->value.data();
        const double* pv = self.value.data();
        const double* g = self.grad.data();
        if (na->requires_grad) na->ensure_grad();
        if (nb->requires_grad) nb->ensure_grad();
        if (flat) {
          const std::size_t n = self.value.size();
          if (na->requires_grad) {
            double* ga = na->grad.data();
            for (std::size_t i = 0; i < n; ++i)
              ga[i] += g[i] * dfa(pa[i], pb[i], pv[i]);
          }
          if (nb->requires_grad) {
            double* gb = nb->grad.data();
            for (std::size_t i = 0; i < n; ++i)
              gb[i] += g[i] * dfb(pa[i], pb[i], pv[i]);
          }
        } else {
          const auto sa = bcast_strides(na->shape, out_shape);
          const auto sb = bcast_strides(nb->shape, out_shape);
          double* ga = na->requires_grad ? na->grad.data() : nullptr;
          double* gb = nb->requires_grad ? nb->grad.data() : nullptr;
          for_each_bcast2(out_shape, sa, sb,
                          [&](std::size_t o, std::size_t ia, std::size_t ib) {
                            if (ga) ga[ia] += g[o] * dfa(pa[ia], pb[ib], pv[o]);
                            if (gb) gb[ib] += g[o] * dfb(pa[ia], pb[ib], pv[o]);
                          });
        }
      });
}

}  // namespace detail

inline Tensor add(const Tensor& a, const Tensor& b) {
  return detail::binary_op(
      "add", a, b, [](double x, double y) { return x + y; },
      [](double, double, double) { return 1.0; },
      [](double, double, double) { return 1.0; });
}

inline Tensor sub(const Tensor& a, const Tensor& b) {
  return detail::binary_op(
      "sub", a, b, [](double x, double y) { return x - y; },
      [](double, double, double) { return 1.0; },
      [](double, double, double) { return -1.0; });
}

inline Tensor mul(const Tensor& a, const Tensor& b) {
  return detail::binary_op(
      "mul", a, b, [](double x, double y) { return x * y; },
      [](double, double y, double) { return y; },
      [](double x, double, double) { return x; });
}

inline Tensor divide(const Tensor& a, const Tensor& b) {
  return detail::binary_op(
      "div", a, b, [](double x, double y) { return x / y; },
      [](double, double y, double) { return 1.0 / y; },
      [](double, double y, double v) { return -v / y; });
}

inline Tensor operator+(const Tensor& a, const Tensor& b) { return add(a, b); }
inline Tensor operator-(const Tensor& a, const Tensor& b) { return sub(a, b); }
inline Tensor operator*(const Tensor& a, const Tensor& b) { return mul(a, b); }
inline Tensor operator/(const Tensor& a, const Tensor& b) { return divide(a, b); }
inline Tensor operator+(const Tensor& a, double c) { return add(a, Tensor::scalar(c)); }
inline Tensor operator+(double c, const Tensor& a) { return add(Tensor::scalar(c), a); }
inline Tensor operator-(const Tensor& a, double c) { return sub(a, Tensor::scalar(c)); }
inline Tensor operator-(double c, const Tensor& a) { return sub(Tensor::scalar(c), a); }
inline Tensor operator*(const Tensor& a, double c) { return mul(a, Tensor::scalar(c)); }
inline Tensor operator*(double c, const Tensor& a) { return mul(Tensor::scalar(c), a); }
inline Tensor operator/(const Tensor& a, double c) { return divide(a, Tensor::scalar(c)); }
inline Tensor operator/(double c, const Tensor& a) { return divide(Tensor::scalar(c), a); }

// ---------------------------------------------------------------------------
// Elementwise unary primitives
// ---------------------------------------------------------------------------

namespace detail {

template <class Fwd, class Df>
Tensor unary_op(const char* op, const Tensor& a, Fwd fwd, Df df) {
  const std::size_t n = a.size();
  std::vector<double> value(n);
  const double* pa = a.data().data();
  for (std::size_t i = 0; i < n; ++i) value[i] = fwd(pa[i]);
  Tensor an = a;
  return Tensor::from_op(op, a.shape(), std::move(value), {a},
                         [an, df](detail::TensorNode& self) {
                           detail::TensorNode* na = an.node();
                           if (!na->requires_grad) return;
                           na->ensure_grad();
                           const double* pa = na->value.data();
                           const double* pv = self.value.data();
                           const double* g = self.grad.data();
                           double* ga = na->grad.data();
                           const std::size_t n = self.value.size();
                           for (std::size_t i = 0; i < n; ++i)
                             ga[i] += g[i] * df(pa[i], pv[i]);
                         });
}

}  // namespace detail

/// |x| with subgradient 0 at exactly 0.
inline Tensor abs(const Tensor& a) {
  return detail::unary_op(
      "abs", a, [](double x) { return std::fabs(x); },
      [](double x, double) { return x > 0.0 ? 1.0 : (x < 0.0 ? -1.0 : 0.0); });
}

inline Tensor sqrt(const Tensor& a) {
  return detail::unary_op(
      "sqrt", a, [](double x) { return std::sqrt(x); },
      [](double, double v) { return 0.5 / v; });
}

inline Tensor rsqrt(const Tensor& a) {
  return detail::unary_op(
      "rsqrt", a, [](double x) { return 1.0 / std::sqrt(x); },
      [](double x, double v) { return -0.5 * v / x; });
}

inline Tensor exp(const Tensor& a) {
  return detail::unary_op(
      "exp", a, [](double x) { return std::exp(x); },
      [](double, double v) { return v; });
}

inline Tensor neg(const Tensor& a) {
  return detail::unary_op(
      "neg", a, [](double x) { return -x; },
      [](double, double) { return -1.0; });
}
inline Tensor operator-(const Tensor& a) { return neg(a); }

inline Tensor silu(const Tensor& a) {
  return detail::unary_op(
      "silu", a,
      [](double x) { return x / (1.0 + std::exp(-x)); },
      [](double x, double) {
        const double s = 1.0 / (1.0 + std::exp(-x));
        return s * (1.0 + x * (1.0 - s));
      });
}

inline Tensor gelu(const Tensor& a) {
  return detail::unary_op(
      "gelu", a,
      [](double x) { return 0.5 * x * (1.0 + std::erf(x * M_SQRT1_2)); },
      [](double x, double) {
        const double cdf = 0.5 * (1.0 + std::erf(x * M_SQRT1_2));
        const double pdf = std::exp(-0.5 * x * x) / std::sqrt(2.0 * M_PI);
        return cdf + x * pdf;
      });
}

// ---------------------------------------------------------------------------
// Reductions
// ---------------------------------------------------------------------------

namespace detail {

inline std::vector<std::size_t> normalize_axes(const char* op,
                                               const Shape& shape,
                                               std::vector<int> axes) {
  std::vector<std::size_t> out;
  out.reserve(axes.size());
  for (int ax : axes) {
    const int rank = static_cast<int>(shape.size());
    if (ax < -rank || ax >= rank)
      throw ShapeError(std::string(op) + ": axis " + std::to_string(ax) +
                       " out of range for shape " + shape_str(shape));
    out.push_back(static_cast<std::size_t>(ax < 0 ? ax + rank : ax));
  }
  std::sort(out.begin(), out.end());
  if (std::adjacent_find(out.begin(), out.end()) != out.end())
    throw ValueError(std::string(op) + ": duplicate axis");
  return out;
}

}  // namespace detail

/// Sum over the given axes (all axes when empty). keepdims retains the
/// reduced axes with extent 1.
inline Tensor sum(const Tensor& a, std::vector<int> axes = {},
                  bool keepdims = false) {
  const Shape& in = a.shape();
  std::vector<std::size_t> red;
  if (axes.empty()) {
    red.resize(in.size());
    std::iota(red.begin(), red.end(), 0);
  } else {
    red = detail::normalize_axes("sum", in, std::move(axes));
  }
  std::vector<bool> is_red(in.size(), false);
  for (std::size_t ax : red) is_red[ax] = true;

  Shape kept_shape(in.size());  // reduced axes -> 1
  Shape out_shape;
  for (std::size_t i = 0; i < in.size(); ++i) {
    kept_shape[i] = is_red[i] ? 1 : in[i];
    if (!is_red[i]) out_shape.push_back(in[i]);
  }
  if (!keepdims && out_shape.empty()) out_shape = {};  // scalar
  const Shape& result_shape = keepdims ? kept_shape : out_shape;

  std::vector<double> value(shape_numel(kept_shape), 0.0);
  const double* pa = a.data().data();
  const auto so = detail::bcast_strides(kept_shape, in);  // out strides over in
  detail::for_each_bcast1(in, so, [&](std::size_t i, std::size_t o) {
    value[o] += pa[i];
  });

  Tensor an = a;
  Shape in_shape = in;
  return Tensor::from_op(
      "sum", result_shape, std::move(value), {a},
      [an, in_shape, kept_shape](detail::TensorNode& self) {
        detail::TensorNode* na = an.node();
        if (!na->requires_grad) return;
        na->ensure_grad();
        const double* g = self.grad.data();
        double* ga = na->grad.data();
        const auto so = detail::bcast_strides(kept_shape, in_shape);
        detail::for_each_bcast1(in_shape, so,
                                [&](std::size_t i, std::size_t o) {
                                  ga[i] += g[o];
                                });
      });
}

inline Tensor mean(const Tensor& a, std::vector<int> axes = {},
                   bool keepdims = false) {
  const std::size_t before = a.size();
  Tensor s = sum(a, std::move(axes), keepdims);
  const std::size_t after = s.size();
  const double count = static_cast<double>(before) / static_cast<double>(after);
  return s * (1.0 / count);
}

// ---------------------------------------------------------------------------
// Shape ops
// ---------------------------------------------------------------------------

inline Tensor reshape(const Tensor& a, Shape shape) {
  if (shape_numel(shape) != a.size())
    throw ShapeError("reshape: cannot view " + shape_str(a.shape()) + " as " +
                     shape_str(shape));
  Tensor an = a;
  return Tensor::from_op("reshape", std::move(shape),
                         std::vector<double>(a.data()), {a},
                         [an](detail::TensorNode& self) {
                           detail::TensorNode* na = an.node();
                           if (!na->requires_grad) return;
                           na->ensure_grad();
                           const double* g = self.grad.data();
                           double* ga = na->grad.data();
                           const std::size_t n = self.value.size();
                           for (std::size_t i = 0; i < n; ++i) ga[i] += g[i];
                         });
}

inline Tensor broadcast_to(const Tensor& a, const Shape& shape) {
  const Shape check = broadcast_shape("broadcast", a.shape(), shape);
  if (check != shape)
    throw ShapeError("broadcast: cannot broadcast " + shape_str(a.shape()) +
                     " to " + shape_str(shape));
  std::vector<double> value(shape_numel(shape));
  const double* pa = a.data().data();
  const auto sa = detail::bcast_strides(a.shape(), shape);
  detail::for_each_bcast1(shape, sa, [&](std::size_t o, std::size_t i) {
    value[o] = pa[i];
  });
  Tensor an = a;
  Shape out_shape = shape;
  return Tensor::from_op(
      "broadcast", shape, std::move(value), {a},
      [an, out_shape](detail::TensorNode& self) {
        detail::TensorNode* na = an.node();
        if (!na->requires_grad) return;
        na->ensure_grad();
        const double* g = self.grad.data();
        double* ga = na->grad.data();
        const auto sa = detail::bcast_strides(na->shape, out_shape);
        detail::for_each_bcast1(out_shape, sa,
                                [&](std::size_t o, std::size_t i) {
                                  ga[i] += g[o];
                                });
      });
}

/// Elements [start, stop) along `axis`.
inline Tensor slice(const Tensor& a, int axis, std::size_t start,
                    std::size_t stop) {
  const Shape& in = a.shape();
  const std::size_t ax =
      detail::normalize_axes("slice", in, {axis}).front();
  if (start > stop || stop > in[ax])
    throw ShapeError("slice: range [" + std::to_string(start) + "," +
                     std::to_string(stop) + ") invalid for axis " +
                     std::to_string(axis) + " of " + shape_str(in));
  Shape out = in;
  out[ax] = stop - start;
  std::size_t outer = 1, inner = 1;
  for (std::size_t i = 0; i < ax; ++i) outer *= in[i];
  for (std::size_t i = ax + 1; i < in.size(); ++i) inner *= in[i];
  const std::size_t in_block = in[ax] * inner;
  const std::size_t out_block = (stop - start) * inner;

  std::vector<double> value(shape_numel(out));
  const double* pa = a.data().data();
  for (std::size_t o = 0; o < outer; ++o)
    std::memcpy(value.data() + o * out_block,
                pa + o * in_block + start * inner, out_block * sizeof(double));

  Tensor an = a;
  return Tensor::from_op(
      "slice", std::move(out), std::move(value), {a},
      [an, outer, inner, in_block, out_block, start](detail::TensorNode& self) {
        detail::TensorNode* na = an.node();
        if (!na->requires_grad) return;
        na->ensure_grad();
        const double* g = self.grad.data();
        double* ga = na->grad.data();
        for (std::size_t o = 0; o < outer; ++o) {
          double* dst = ga + o * in_block + start * inner;
          const double* src = g + o * out_block;
          for (std::size_t i = 0; i < out_block; ++i) dst[i] += src[i];
        }
      });
}

inline Tensor concat(const std::vector<Tensor>& parts, int axis) {
  if (parts.empty()) throw ValueError("concat: no inputs");
  const Shape& first = parts.front().shape();
  const std::size_t ax =
      detail::normalize_axes("concat", first, {axis}).front();
  Shape out = first;
  out[ax] = 0;
  for (const Tensor& p : parts) {
    const Shape& s = p.shape();
    if (s.size() != first.size())
      throw ShapeError("concat: rank mismatch " + shape_str(first) + " vs " +
                       shape_str(s));
    for (std::size_t i = 0; i < s.size(); ++i)
      if (i != ax && s[i] != first[i])
        throw ShapeError("concat: incompatible shapes " + shape_str(first) +
                         " vs " + shape_str(s));
    out[ax] += s[ax];
  }
  std::size_t outer = 1, inner = 1;
  for (std::size_t i = 0; i < ax; ++i) outer *= out[i];
  for (std::size_t i = ax + 1; i < out.size(); ++i) inner *= out[i];
  const std::size_t out_block = out[ax] * inner;

  std::vector<double> value(shape_numel(out));
  std::vector<std::size_t> offsets;  // start offset of each part along axis
  {
    std::size_t off = 0;
    for (const Tensor& p : parts) {
      offsets.push_back(off);
      const std::size_t blk = p.shape()[ax] * inner;
      const double* src = p.data().data();
      for (std::size_t o = 0; o < outer; ++o)
        std::memcpy(value.data() + o * out_block + off * inner,
                    src + o * blk, blk * sizeof(double));
      off += p.shape()[ax];
    }
  }
  std::vector<Tensor> parents = parts;
  return Tensor::from_op(
      "concat", std::move(out), std::move(value), parts,
      [parents, offsets, outer, inner, out_block, ax](detail::TensorNode& self) {
        const double* g = self.grad.data();
        for (std::size_t pi = 0; pi < parents.size(); ++pi) {
          detail::TensorNode* np = parents[pi].node();
          if (!np->requires_grad) continue;
          np->ensure_grad();
          double* gp = np->grad.data();
          const std::size_t blk = np->shape[ax] * inner;
          for (std::size_t o = 0; o < outer; ++o) {
            const double* src = g + o * out_block + offsets[pi] * inner;
            double* dst = gp + o * blk;
            for (std::size_t i = 0; i < blk; ++i) dst[i] += src[i];
          }
        }
      });
}

/// Circular shift along `axis`; element i of the output is element
/// (i - shift) mod extent of the input.
inline Tensor roll(const Tensor& a, long shift, int axis) {
  const std::size_t ax = detail::normalize_axes("roll", a.shape(), {axis}).front();
  const long n = static_cast<long>(a.shape()[ax]);
  long s = shift % n;
  if (s < 0) s += n;
  if (s == 0) return a;
  Tensor head = slice(a, axis, static_cast<std::size_t>(n - s),
                      static_cast<std::size_t>(n));
  Tensor tail = slice(a, axis, 0, static_cast<std::size_t>(n - s));
  return concat({head, tail}, static_cast<int>(ax));
}

// ---------------------------------------------------------------------------
// Matmul
// ---------------------------------------------------------------------------

namespace detail {

inline void gemm(double* __restrict c, const double* __restrict a,
                 const double* __restrict b, std::size_t m, std::size_t k,
                 std::size_t n) {
  // c[m,n] += a[m,k] * b[k,n]
  for (std::size_t i = 0; i < m; ++i) {
    double* ci = c + i * n;
    const double* ai = a + i * k;
    for (std::size_t l = 0; l < k; ++l) {
      const double av = ai[l];
      const double* bl = b + l * n;
      for (std::size_t j = 0; j < n; ++j) ci[j] += av * bl[j];
    }
  }
}

inline void gemm_abt(double* __restrict c, const double* __restrict a,
                     const double* __restrict b, std::size_t m, std::size_t k,
                     std::size_t n) {
  // c[m,n] += a[m,k] * b[n,k]^T
  for (std::size_t i = 0; i < m; ++i) {
    const double* ai = a + i * k;
    double* ci = c + i * n;
    for (std::size_t j = 0; j < n; ++j) {
      const double* bj = b + j * k;
      double acc = 0.0;
      for (std::size_t l = 0; l < k; ++l) acc += ai[l] * bj[l];
      ci[j] += acc;
    }
  }
}

inline void gemm_atb(double* __restrict c, const double* __restrict a,
                     const double* __restrict b, std::size_t m, std::size_t k,
                     std::size_t n) {
  // c[k,n] += a[m,k]^T * b[m,n]
  for (std::size_t i = 0; i < m; ++i) {
    const double* ai = a + i * k;
    const double* bi = b + i * n;
    for (std::size_t l = 0; l < k; ++l) {
      const double av = ai[l];
      double* cl = c + l * n;
      for (std::size_t j = 0; j < n; ++j) cl[j] += av * bi[j];
    }
  }
}

}  // namespace detail

/// Batched matrix product a[..., m, k] @ b[..., k, n] with numpy-style
/// broadcasting of the leading batch dimensions.
inline Tensor matmul(const Tensor& a, const Tensor& b) {
  const Shape& sa = a.shape();
  const Shape& sb = b.shape();
  if (sa.size() < 2 || sb.size() < 2)
    throw ShapeError("matmul: operands must have rank >= 2, got " +
                     shape_str(sa) + " and " + shape_str(sb));
  const std::size_t m = sa[sa.size() - 2], ka = sa[sa.size() - 1];
  const std::size_t kb = sb[sb.size() - 2], n = sb[sb.size() - 1];
  if (ka != kb)
    throw ShapeError("matmul: incompatible shapes " + shape_str(sa) + " and " +
                     shape_str(sb));
  const Shape batch_a(sa.begin(), sa.end() - 2);
  const Shape batch_b(sb.begin(), sb.end() - 2);
  const Shape batch = broadcast_shape("matmul", batch_a, batch_b);
  Shape out_shape = batch;
  out_shape.push_back(m);
  out_shape.push_back(n);

  const std::size_t n_batch = shape_numel(batch);
  const std::size_t blk_a = m * ka, blk_b = ka * n, blk_c = m * n;
  const auto stra = detail::bcast_strides(batch_a, batch);
  const auto strb = detail::bcast_strides(batch_b, batch);

  std::vector<double> value(n_batch * blk_c, 0.0);
  const double* pa = a.data().data();
  const double* pb = b.data().data();
  detail::for_each_bcast2(batch, stra, strb,
                          [&](std::size_t o, std::size_t ia, std::size_t ib) {
                            detail::gemm(value.data() + o * blk_c,
                                         pa + ia * blk_a, pb + ib * blk_b, m,
                                         ka, n);
                          });

  Tensor an = a, bn = b;
  const std::size_t k = ka;
  return Tensor::from_op(
      "matmul", std::move(out_shape), std::move(value), {a, b},
      [an, bn, batch, batch_a, batch_b, m, k, n, blk_a, blk_b,
       blk_c](detail::TensorNode& self) {
        detail::TensorNode* na = an.node();
        detail::TensorNode* nb = bn.node();
        const double* g = self.grad.data();
        const double* pa = na->value.data();
        const double* pb = nb->value.data();
        if (na->requires_grad) na->ensure_grad();
        if (nb->requires_grad) nb->ensure_grad();
        double* ga = na->requires_grad ? na->grad.data() : nullptr;
        double* gb = nb->requires_grad ? nb->grad.data() : nullptr;
        const auto stra = detail::bcast_strides(batch_a, batch);
        const auto strb = detail::bcast_strides(batch_b, batch);
        detail::for_each_bcast2(
            batch, stra, strb,
            [&](std::size_t o, std::size_t ia, std::size_t ib) {
              if (ga)
                detail::gemm_abt(ga + ia * blk_a, g + o * blk_c,
                                 pb + ib * blk_b, m, n, k);
              if (gb)
                detail::gemm_atb(gb + ib * blk_b, pa + ia * blk_a,
                                 g + o * blk_c, m, k, n);
            });
      });
}

// ---------------------------------------------------------------------------
// Softmax and layer norm
// ---------------------------------------------------------------------------

inline Tensor softmax(const Tensor& a, int axis = -1) {
  const Shape& in = a.shape();
  const std::size_t ax = detail::normalize_axes("softmax", in, {axis}).front();
  std::size_t outer = 1, inner = 1;
  const std::size_t lane = in[ax];
  for (std::size_t i = 0; i < ax; ++i) outer *= in[i];
  for (std::size_t i = ax + 1; i < in.size(); ++i) inner *= in[i];

  std::vector<double> value(a.size());
  const double* pa = a.data().data();
  for (std::size_t o = 0; o < outer; ++o)
    for (std::size_t i = 0; i < inner; ++i) {
      const std::size_t base = o * lane * inner + i;
      double mx = -INFINITY;
      for (std::size_t l = 0; l < lane; ++l)
        mx = std::max(mx, pa[base + l * inner]);
      double z = 0.0;
      for (std::size_t l = 0; l < lane; ++l) {
        const double e = std::exp(pa[base + l * inner] - mx);
        value[base + l * inner] = e;
        z += e;
      }
      const double invz = 1.0 / z;
      for (std::size_t l = 0; l < lane; ++l) value[base + l * inner] *= invz;
    }

  Tensor an = a;
  return Tensor::from_op(
      "softmax", in, std::move(value), {a},
      [an, outer, inner, lane](detail::TensorNode& self) {
        detail::TensorNode* na = an.node();
        if (!na->requires_grad) return;
        na->ensure_grad();
        const double* s = self.value.data();
        const double* g = self.grad.data();
        double* ga = na->grad.data();
        for (std::size_t o = 0; o < outer; ++o)
          for (std::size_t i = 0; i < inner; ++i) {
            const std::size_t base = o * lane * inner + i;
            double dot = 0.0;
            for (std::size_t l = 0; l < lane; ++l)
              dot += g[base + l * inner] * s[base + l * inner];
            for (std::size_t l = 0; l < lane; ++l) {
              const std::size_t idx = base + l * inner;
              ga[idx] += s[idx] * (g[idx] - dot);
            }
          }
      });
}

inline constexpr double kLayerNormEps = 1e-5;

/// Normalises over `axis` to zero mean / unit variance (variance uses
/// eps=1e-5 inside the sqrt), then applies gain and bias broadcast along that
/// axis. gain/bias may be scalars or vectors of the axis extent.
inline Tensor layer_norm(const Tensor& x, const Tensor& gain,
                         const Tensor& bias, int axis = -1) {
  const Shape& in = x.shape();
  const std::size_t ax = detail::normalize_axes("layer_norm", in, {axis}).front();
  Tensor mu = mean(x, {static_cast<int>(ax)}, true);
  Tensor centered = x - mu;
  Tensor var = mean(centered * centered, {static_cast<int>(ax)}, true);
  Tensor normed = centered * rsqrt(var + kLayerNormEps);

  auto along_axis = [&](const Tensor& t) {
    if (t.size() == 1) return t;
    if (t.ndim() == 1 && t.extent(0) == in[ax]) {
      Shape s(in.size(), 1);
      s[ax] = in[ax];
      return reshape(t, s);
    }
    if (t.shape() == in) return t;
    throw ShapeError("layer_norm: gain/bias shape " + shape_str(t.shape()) +
                     " incompatible with axis extent " +
                     std::to_string(in[ax]) + " of " + shape_str(in));
  };
  return normed * along_axis(gain) + along_axis(bias);
}

// ---------------------------------------------------------------------------
// Utilities
// ---------------------------------------------------------------------------

inline bool all_finite(const Tensor& t) {
  for (double v : t.data())
    if (!std::isfinite(v)) return false;
  return true;
}

/// Stops gradient flow: value copy with no graph edge.
inline Tensor detach(const Tensor& t) {
  return Tensor::from_data(t.shape(), t.data(), false);
}

}  // namespace crpsrft
