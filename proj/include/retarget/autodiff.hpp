// Copyright 2026 The retarget Authors
// SPDX-License-Identifier: Apache-2.0

// Reverse-mode automatic differentiation over Tensor values.
//
// Every operation returns a Var whose node remembers its parents and a
// backward rule. The graph is built while the forward pass runs and is
// released by backward(). A node only keeps its parents when at least one
// of them requires a gradient, so constant sub-computations cost nothing
// extra.

#pragma once

#include <array>
#include <cmath>
#include <functional>
#include <memory>
#include <optional>
#include <unordered_set>
#include <utility>
#include <vector>

#include "retarget/errors.hpp"
#include "retarget/tensor.hpp"

namespace retarget::ad {

struct Node {
  Tensor value;
  Tensor grad;
  bool has_grad = false;
  bool requires_grad = false;
  std::vector<std::shared_ptr<Node>> parents;
  std::function<void(Node&)> backward;

  /// Gradient storage, zero-filled on first access.
  Tensor& grad_buffer() {
    if (!has_grad) {
      grad = Tensor::zeros_like(value);
      has_grad = true;
    }
    return grad;
  }
};

/// Handle to a graph node. Copies share the node.
class Var {
 public:
  Var() : node_(std::make_shared<Node>()) {}
  explicit Var(Tensor value, bool requires_grad = false) : node_(std::make_shared<Node>()) {
    node_->value = std::move(value);
    node_->requires_grad = requires_grad;
  }
  explicit Var(std::shared_ptr<Node> node) : node_(std::move(node)) {}

  const Tensor& value() const noexcept { return node_->value; }
  /// In-place access for optimizer updates; never use on interior nodes.
  Tensor& mutable_value() noexcept { return node_->value; }
  const Shape& shape() const noexcept { return node_->value.shape(); }
  bool requires_grad() const noexcept { return node_->requires_grad; }
  void set_requires_grad(bool on) noexcept { node_->requires_grad = on; }

  /// Accumulated adjoint; zeros when nothing has been accumulated.
  Tensor grad() const {
    return node_->has_grad ? node_->grad : Tensor::zeros_like(node_->value);
  }
  bool has_grad() const noexcept { return node_->has_grad; }
  void zero_grad() {
    node_->grad = Tensor();
    node_->has_grad = false;
  }

  const std::shared_ptr<Node>& node() const noexcept { return node_; }

 private:
  std::shared_ptr<Node> node_;
};

inline Var constant(Tensor t) { return Var(std::move(t), false); }
inline Var parameter(Tensor t) { return Var(std::move(t), true); }

namespace detail {

/// Builds the result node. Parents and the backward rule are kept only when
/// some parent needs a gradient.
inline Var make_result(Tensor value, std::vector<Var> parents, std::function<void(Node&)> backward) {
  auto node = std::make_shared<Node>();
  node->value = std::move(value);
  for (const auto& p : parents) {
    if (p.requires_grad()) {
      node->requires_grad = true;
      break;
    }
  }
  if (node->requires_grad) {
    node->parents.reserve(parents.size());
    for (auto& p : parents) node->parents.push_back(p.node());
    node->backward = std::move(backward);
  }
  return Var(std::move(node));
}

inline bool wants_grad(const std::shared_ptr<Node>& n) { return n->requires_grad; }

/// Right-aligned broadcast of up to two shapes into a 4-D iteration plan.
struct BroadcastPlan {
  Shape out;
  std::array<std::size_t, 4> extent{1, 1, 1, 1};
  std::array<std::size_t, 4> stride_a{0, 0, 0, 0};
  std::array<std::size_t, 4> stride_b{0, 0, 0, 0};
  bool same = false;

  template <typename F>
  void for_each(F&& f) const {
    std::size_t o = 0;
    for (std::size_t i0 = 0; i0 < extent[0]; ++i0)
      for (std::size_t i1 = 0; i1 < extent[1]; ++i1)
        for (std::size_t i2 = 0; i2 < extent[2]; ++i2) {
          std::size_t a = i0 * stride_a[0] + i1 * stride_a[1] + i2 * stride_a[2];
          std::size_t b = i0 * stride_b[0] + i1 * stride_b[1] + i2 * stride_b[2];
          for (std::size_t i3 = 0; i3 < extent[3]; ++i3, ++o) {
            f(o, a + i3 * stride_a[3], b + i3 * stride_b[3]);
          }
        }
  }
};

inline std::array<std::size_t, 4> padded_shape(const Shape& s) {
  std::array<std::size_t, 4> p{1, 1, 1, 1};
  for (std::size_t i = 0; i < s.size(); ++i) p[4 - s.size() + i] = s[i];
  return p;
}

inline std::array<std::size_t, 4> strides_for(const std::array<std::size_t, 4>& ext,
                                              const std::array<std::size_t, 4>& out) {
  std::array<std::size_t, 4> st{};
  std::size_t acc = 1;
  for (int i = 3; i >= 0; --i) {
    st[i] = (ext[i] == 1 && out[i] != 1) ? 0 : acc;
    acc *= ext[i];
  }
  return st;
}

inline BroadcastPlan plan_broadcast(const Shape& a, const Shape& b) {
  BroadcastPlan plan;
  plan.same = (a == b);
  const std::size_t rank = std::max(a.size(), b.size());
  auto pa = padded_shape(a);
  auto pb = padded_shape(b);
  for (int i = 0; i < 4; ++i) {
    if (pa[i] != pb[i] && pa[i] != 1 && pb[i] != 1) {
      throw DimensionError("cannot broadcast " + shape_str(a) + " with " + shape_str(b));
    }
    plan.extent[i] = std::max(pa[i], pb[i]);
  }
  plan.out.assign(plan.extent.begin() + (4 - rank), plan.extent.end());
  plan.stride_a = strides_for(pa, plan.extent);
  plan.stride_b = strides_for(pb, plan.extent);
  return plan;
}

template <typename Fwd, typename Da, typename Db>
Var binary(const Var& a, const Var& b, Fwd fwd, Da da, Db db) {
  auto plan = plan_broadcast(a.shape(), b.shape());
  Tensor out(plan.out);
  const auto& av = a.value().storage();
  const auto& bv = b.value().storage();
  auto& ov = out.storage();
  if (plan.same) {
    for (std::size_t i = 0; i < ov.size(); ++i) ov[i] = fwd(av[i], bv[i]);
  } else {
    plan.for_each([&](std::size_t o, std::size_t ia, std::size_t ib) { ov[o] = fwd(av[ia], bv[ib]); });
  }
  return make_result(std::move(out), {a, b}, [plan, da, db](Node& self) {
    auto& pa = *self.parents[0];
    auto& pb = *self.parents[1];
    const auto& g = self.grad.storage();
    const auto& x = pa.value.storage();
    const auto& y = pb.value.storage();
    if (pa.requires_grad) {
      auto& ga = pa.grad_buffer().storage();
      plan.for_each([&](std::size_t o, std::size_t ia, std::size_t ib) { ga[ia] += g[o] * da(x[ia], y[ib]); });
    }
    if (pb.requires_grad) {
      auto& gb = pb.grad_buffer().storage();
      plan.for_each([&](std::size_t o, std::size_t ia, std::size_t ib) { gb[ib] += g[o] * db(x[ia], y[ib]); });
    }
  });
}

/// Pointwise op with derivative expressed through input x and output y.
template <typename Fwd, typename Deriv>
Var unary(const Var& a, Fwd fwd, Deriv deriv) {
  Tensor out(a.shape());
  const auto& av = a.value().storage();
  auto& ov = out.storage();
  for (std::size_t i = 0; i < ov.size(); ++i) ov[i] = fwd(av[i]);
  return make_result(std::move(out), {a}, [deriv](Node& self) {
    auto& p = *self.parents[0];
    const auto& g = self.grad.storage();
    const auto& x = p.value.storage();
    const auto& y = self.value.storage();
    auto& gp = p.grad_buffer().storage();
    for (std::size_t i = 0; i < g.size(); ++i) gp[i] += g[i] * deriv(x[i], y[i]);
  });
}

inline double stable_sigmoid(double x) {
  if (x >= 0) return 1.0 / (1.0 + std::exp(-x));
  const double e = std::exp(x);
  return e / (1.0 + e);
}

}  // namespace detail

inline constexpr double kLogClamp = 1e-12;

// ---------------------------------------------------------------------------
// Pointwise

inline Var add(const Var& a, const Var& b) {
  return detail::binary(
      a, b, [](double x, double y) { return x + y; }, [](double, double) { return 1.0; },
      [](double, double) { return 1.0; });
}

inline Var sub(const Var& a, const Var& b) {
  return detail::binary(
      a, b, [](double x, double y) { return x - y; }, [](double, double) { return 1.0; },
      [](double, double) { return -1.0; });
}

inline Var mul(const Var& a, const Var& b) {
  return detail::binary(
      a, b, [](double x, double y) { return x * y; }, [](double, double y) { return y; },
      [](double x, double) { return x; });
}

inline Var div(const Var& a, const Var& b) {
  return detail::binary(
      a, b, [](double x, double y) { return x / y; }, [](double, double y) { return 1.0 / y; },
      [](double x, double y) { return -x / (y * y); });
}

inline Var scale(const Var& a, double s) {
  return detail::unary(a, [s](double x) { return s * x; }, [s](double, double) { return s; });
}

inline Var add_scalar(const Var& a, double s) {
  return detail::unary(a, [s](double x) { return x + s; }, [](double, double) { return 1.0; });
}

inline Var exp(const Var& a) {
  return detail::unary(a, [](double x) { return std::exp(x); }, [](double, double y) { return y; });
}

/// Natural log with the argument clamped at 1e-12; zero gradient below the clamp.
inline Var log(const Var& a) {
  return detail::unary(
      a, [](double x) { return std::log(std::max(x, kLogClamp)); },
      [](double x, double) { return x > kLogClamp ? 1.0 / x : 0.0; });
}

inline Var sigmoid(const Var& a) {
  return detail::unary(a, detail::stable_sigmoid, [](double, double y) { return y * (1.0 - y); });
}

inline Var elu(const Var& a, double alpha = 1.0) {
  return detail::unary(
      a, [alpha](double x) { return x > 0 ? x : alpha * std::expm1(x); },
      [alpha](double x, double y) { return x > 0 ? 1.0 : y + alpha; });
}

inline Var relu(const Var& a) {
  return detail::unary(
      a, [](double x) { return x > 0 ? x : 0.0; }, [](double x, double) { return x > 0 ? 1.0 : 0.0; });
}

inline Var abs(const Var& a) {
  return detail::unary(
      a, [](double x) { return std::abs(x); },
      [](double x, double) { return x > 0 ? 1.0 : (x < 0 ? -1.0 : 0.0); });
}

enum class ElementwiseKind { add, sub, mul, scalar_mul, exp, log, sigmoid, elu, relu };

/// Dispatch by kind. Binary kinds need `b`; scalar_mul uses `scalar`.
inline Var elementwise(ElementwiseKind kind, const Var& a, const std::optional<Var>& b = std::nullopt,
                       double scalar = 1.0) {
  auto need_b = [&]() -> const Var& {
    if (!b) throw ContractError("binary elementwise op needs a second operand");
    return *b;
  };
  switch (kind) {
    case ElementwiseKind::add: return add(a, need_b());
    case ElementwiseKind::sub: return sub(a, need_b());
    case ElementwiseKind::mul: return mul(a, need_b());
    case ElementwiseKind::scalar_mul: return scale(a, scalar);
    case ElementwiseKind::exp: return exp(a);
    case ElementwiseKind::log: return log(a);
    case ElementwiseKind::sigmoid: return sigmoid(a);
    case ElementwiseKind::elu: return elu(a, scalar);
    case ElementwiseKind::relu: return relu(a);
  }
  throw ContractError("unknown elementwise kind");
}

// ---------------------------------------------------------------------------
// Shape manipulation and reductions

inline Var reshape(const Var& a, Shape shape) {
  Tensor out = a.value().reshaped(std::move(shape));
  return detail::make_result(std::move(out), {a}, [](Node& self) {
    auto& p = *self.parents[0];
    auto& gp = p.grad_buffer().storage();
    const auto& g = self.grad.storage();
    for (std::size_t i = 0; i < g.size(); ++i) gp[i] += g[i];
  });
}

/// Repeats singleton extents up to `shape` (numpy rules).
inline Var broadcast_to(const Var& a, const Shape& shape) {
  auto plan = detail::plan_broadcast(a.shape(), shape);
  if (plan.out != shape) {
    throw DimensionError("cannot broadcast " + shape_str(a.shape()) + " to " + shape_str(shape));
  }
  Tensor out(shape);
  const auto& av = a.value().storage();
  auto& ov = out.storage();
  plan.for_each([&](std::size_t o, std::size_t ia, std::size_t) { ov[o] = av[ia]; });
  return detail::make_result(std::move(out), {a}, [plan](Node& self) {
    auto& p = *self.parents[0];
    auto& gp = p.grad_buffer().storage();
    const auto& g = self.grad.storage();
    plan.for_each([&](std::size_t o, std::size_t ia, std::size_t) { gp[ia] += g[o]; });
  });
}

enum class ReduceKind { sum, mean };

/// Reduces over `axes`, keeping them as singleton extents.
inline Var reduce(ReduceKind kind, const Var& a, const std::vector<std::size_t>& axes) {
  Shape out_shape = a.shape();
  std::size_t count = 1;
  for (auto ax : axes) {
    if (ax >= out_shape.size()) throw DimensionError("reduce axis out of range for " + shape_str(a.shape()));
    count *= out_shape[ax];
    out_shape[ax] = 1;
  }
  // Iterate the input as the "output" of a broadcast from out_shape.
  auto plan = detail::plan_broadcast(out_shape, a.shape());
  Tensor out(out_shape);
  const auto& av = a.value().storage();
  auto& ov = out.storage();
  plan.for_each([&](std::size_t i, std::size_t io, std::size_t) { ov[io] += av[i]; });
  const double factor = kind == ReduceKind::mean ? 1.0 / static_cast<double>(count) : 1.0;
  if (factor != 1.0) {
    for (auto& v : ov) v *= factor;
  }
  return detail::make_result(std::move(out), {a}, [plan, factor](Node& self) {
    auto& p = *self.parents[0];
    auto& gp = p.grad_buffer().storage();
    const auto& g = self.grad.storage();
    plan.for_each([&](std::size_t i, std::size_t io, std::size_t) { gp[i] += g[io] * factor; });
  });
}

inline Var sum(const Var& a) {
  double s = 0.0;
  for (double v : a.value().data()) s += v;
  return detail::make_result(Tensor::scalar(s), {a}, [](Node& self) {
    auto& p = *self.parents[0];
    const double g = self.grad[0];
    for (auto& v : p.grad_buffer().storage()) v += g;
  });
}

inline Var mean(const Var& a) { return scale(sum(a), 1.0 / static_cast<double>(a.value().size())); }

/// Exclusive prefix sum along the last axis: out[..., k] = sum_{j<k} x[..., j].
inline Var cumsum_row_exclusive(const Var& a) {
  if (a.value().rank() == 0) throw DimensionError("cumsum needs at least one axis");
  const std::size_t n = a.shape().back();
  const std::size_t rows = a.value().size() / n;
  Tensor out(a.shape());
  const auto& av = a.value().storage();
  auto& ov = out.storage();
  for (std::size_t r = 0; r < rows; ++r) {
    double acc = 0.0;
    for (std::size_t k = 0; k < n; ++k) {
      ov[r * n + k] = acc;
      acc += av[r * n + k];
    }
  }
  return detail::make_result(std::move(out), {a}, [n, rows](Node& self) {
    auto& p = *self.parents[0];
    auto& gp = p.grad_buffer().storage();
    const auto& g = self.grad.storage();
    // d out[k] / d x[j] = 1 for j < k, so grad x[j] = sum_{k>j} g[k].
    for (std::size_t r = 0; r < rows; ++r) {
      double acc = 0.0;
      for (std::size_t k = n; k-- > 0;) {
        gp[r * n + k] += acc;
        acc += g[r * n + k];
      }
    }
  });
}

/// Dense layer: x[N,K], w[M,K], b[M] -> [N,M].
inline Var linear(const Var& x, const Var& w, const Var& b) {
  if (x.value().rank() != 2 || w.value().rank() != 2 || b.value().rank() != 1 || x.shape()[1] != w.shape()[1] ||
      b.shape()[0] != w.shape()[0]) {
    throw DimensionError("linear: incompatible shapes " + shape_str(x.shape()) + ", " + shape_str(w.shape()) +
                         ", " + shape_str(b.shape()));
  }
  const std::size_t n = x.shape()[0], k = x.shape()[1], m = w.shape()[0];
  Tensor out({n, m});
  const auto& xv = x.value().storage();
  const auto& wv = w.value().storage();
  const auto& bv = b.value().storage();
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < m; ++j) {
      double acc = bv[j];
      for (std::size_t t = 0; t < k; ++t) acc += xv[i * k + t] * wv[j * k + t];
      out[i * m + j] = acc;
    }
  return detail::make_result(std::move(out), {x, w, b}, [n, k, m](Node& self) {
    auto& px = *self.parents[0];
    auto& pw = *self.parents[1];
    auto& pb = *self.parents[2];
    const auto& g = self.grad.storage();
    if (px.requires_grad) {
      auto& gx = px.grad_buffer().storage();
      const auto& wv = pw.value.storage();
      for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j < m; ++j)
          for (std::size_t t = 0; t < k; ++t) gx[i * k + t] += g[i * m + j] * wv[j * k + t];
    }
    if (pw.requires_grad) {
      auto& gw = pw.grad_buffer().storage();
      const auto& xv = px.value.storage();
      for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j < m; ++j)
          for (std::size_t t = 0; t < k; ++t) gw[j * k + t] += g[i * m + j] * xv[i * k + t];
    }
    if (pb.requires_grad) {
      auto& gb = pb.grad_buffer().storage();
      for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j < m; ++j) gb[j] += g[i * m + j];
    }
  });
}

// ---------------------------------------------------------------------------
// Backward pass

/// Seeds the scalar root with 1 and propagates adjoints in reverse
/// topological order, then releases the graph links.
inline void backward(const Var& root) {
  if (root.value().size() != 1) {
    throw ContractError("backward needs a scalar root, got shape " + shape_str(root.shape()));
  }
  if (!root.requires_grad()) return;

  std::vector<Node*> order;
  std::unordered_set<Node*> visited;
  std::vector<std::pair<Node*, std::size_t>> stack;
  stack.emplace_back(root.node().get(), 0);
  visited.insert(root.node().get());
  while (!stack.empty()) {
    auto& [node, next] = stack.back();
    if (next < node->parents.size()) {
      Node* parent = node->parents[next++].get();
      if (parent->requires_grad && visited.insert(parent).second) stack.emplace_back(parent, 0);
    } else {
      order.push_back(node);
      stack.pop_back();
    }
  }

  root.node()->grad_buffer().fill(1.0);
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    Node* node = *it;
    if (node->backward && node->has_grad) node->backward(*node);
  }
  for (Node* node : order) {
    if (node->backward) {
      node->backward = nullptr;
      node->parents.clear();
    }
  }
}

}  // namespace retarget::ad
