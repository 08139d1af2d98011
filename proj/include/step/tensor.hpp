#pragma once

// Reverse-mode automatic differentiation over dense row-major float64 arrays.
//
// `Tensor` is a plain value (shape + data). `Var` is a handle to a node in the
// differentiation graph: it owns a Tensor value, an optional gradient buffer and
// the backward rule that routes its gradient to its parents. The graph is built
// implicitly as operations run and is released when the last Var referencing it
// goes away. Leaves created with requires_grad=true act as parameters and
// accumulate gradients across backward() calls until zero_grad().

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <memory>
#include <numeric>
#include <span>
#include <sstream>
#include <string>
#include <unordered_set>
#include <utility>
#include <vector>

#include "step/error.hpp"

namespace step {

using Shape = std::vector<std::size_t>;

inline std::size_t numel(const Shape& s) {
  return std::accumulate(s.begin(), s.end(), std::size_t{1}, std::multiplies<>());
}

inline std::string to_string(const Shape& s) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < s.size(); ++i) os << (i ? "," : "") << s[i];
  os << ']';
  return os.str();
}

struct Tensor {
  Shape shape;
  std::vector<double> data;

  Tensor() : shape{}, data(1, 0.0) {}
  explicit Tensor(Shape s, double fill = 0.0) : shape(std::move(s)), data(step::numel(shape), fill) {}
  Tensor(Shape s, std::vector<double> values) : shape(std::move(s)), data(std::move(values)) {
    if (data.size() != step::numel(shape)) {
      throw ShapeError("Tensor: " + std::to_string(data.size()) + " values for shape " + to_string(shape));
    }
  }

  static Tensor scalar(double v) { return Tensor(Shape{}, std::vector<double>{v}); }

  std::size_t numel() const { return data.size(); }
  std::size_t rank() const { return shape.size(); }
  std::size_t dim(std::size_t i) const { return shape.at(i); }

  double& operator[](std::size_t i) { return data[i]; }
  double operator[](std::size_t i) const { return data[i]; }

  /// Element access for rank-2 tensors.
  double& at(std::size_t r, std::size_t c) { return data[r * shape[1] + c]; }
  double at(std::size_t r, std::size_t c) const { return data[r * shape[1] + c]; }

  bool operator==(const Tensor&) const = default;
};

namespace detail {

struct Node {
  Tensor value;
  std::vector<double> grad;
  std::vector<std::shared_ptr<Node>> parents;
  std::function<void(Node&)> backward_fn;
  bool requires_grad = false;
  std::uint64_t id = 0;

  std::vector<double>& ensure_grad() {
    if (grad.size() != value.numel()) grad.assign(value.numel(), 0.0);
    return grad;
  }
};

inline std::uint64_t next_node_id() {
  static std::atomic<std::uint64_t> counter{1};
  return counter.fetch_add(1, std::memory_order_relaxed);
}

inline bool& grad_mode() {
  thread_local bool enabled = true;
  return enabled;
}

}  // namespace detail

/// Disables graph construction on the current thread while alive.
class NoGradGuard {
 public:
  NoGradGuard() : previous_(detail::grad_mode()) { detail::grad_mode() = false; }
  ~NoGradGuard() { detail::grad_mode() = previous_; }
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool previous_;
};

inline bool grad_enabled() { return detail::grad_mode(); }

class Var {
 public:
  Var() : node_(std::make_shared<detail::Node>()) { node_->id = detail::next_node_id(); }
  explicit Var(Tensor value, bool requires_grad = false) : node_(std::make_shared<detail::Node>()) {
    node_->value = std::move(value);
    node_->requires_grad = requires_grad;
    node_->id = detail::next_node_id();
  }

  const Tensor& value() const { return node_->value; }
  /// Direct write access for optimizers and initializers; never call mid-graph.
  Tensor& mutable_value() { return node_->value; }
  const Shape& shape() const { return node_->value.shape; }
  std::size_t numel() const { return node_->value.numel(); }
  std::size_t dim(std::size_t i) const { return node_->value.shape.at(i); }
  double item() const { return node_->value.data.at(0); }
  bool requires_grad() const { return node_->requires_grad; }
  std::uint64_t id() const { return node_->id; }

  bool has_grad() const { return node_->grad.size() == numel(); }
  /// Gradient as a tensor; all zeros when nothing has been accumulated.
  Tensor grad() const {
    if (!has_grad()) return Tensor(shape());
    return Tensor(shape(), node_->grad);
  }
  std::vector<double>& grad_buffer() { return node_->ensure_grad(); }
  void zero_grad() {
    if (node_->requires_grad) node_->grad.assign(numel(), 0.0);
  }

  /// Stops gradient flow: returns a leaf sharing no graph with this node.
  Var detach() const { return Var(node_->value, false); }

  void backward() const;

  const std::shared_ptr<detail::Node>& node() const { return node_; }

 private:
  explicit Var(std::shared_ptr<detail::Node> n) : node_(std::move(n)) {}
  std::shared_ptr<detail::Node> node_;

  friend Var make_op(Tensor, std::vector<Var>, std::function<void(detail::Node&)>);
};

/// Creates the result node of a primitive. The backward rule receives the
/// result node; its `grad` holds ∂loss/∂result and it must accumulate into
/// `parents[i]->grad` for every parent that requires grad.
inline Var make_op(Tensor value, std::vector<Var> inputs, std::function<void(detail::Node&)> backward_fn) {
  auto node = std::make_shared<detail::Node>();
  node->value = std::move(value);
  node->id = detail::next_node_id();
  bool any = false;
  if (detail::grad_mode()) {
    for (const auto& in : inputs) any = any || in.requires_grad();
  }
  if (any) {
    node->requires_grad = true;
    node->parents.reserve(inputs.size());
    for (auto& in : inputs) node->parents.push_back(in.node_);
    node->backward_fn = std::move(backward_fn);
  }
  return Var(std::move(node));
}

inline void Var::backward() const {
  if (numel() != 1) {
    throw ShapeError("backward: loss must be scalar-shaped, got " + to_string(shape()));
  }
  // Iterative post-order DFS; parents are visited in declaration order so the
  // schedule, and hence floating-point accumulation order, is deterministic.
  std::vector<detail::Node*> order;
  std::unordered_set<const detail::Node*> seen;
  std::vector<std::pair<detail::Node*, std::size_t>> stack;
  if (node_->requires_grad) {
    stack.emplace_back(node_.get(), 0);
    seen.insert(node_.get());
  }
  while (!stack.empty()) {
    auto& [n, next] = stack.back();
    if (next < n->parents.size()) {
      detail::Node* p = n->parents[next++].get();
      if (p->requires_grad && seen.insert(p).second) stack.emplace_back(p, 0);
    } else {
      order.push_back(n);
      stack.pop_back();
    }
  }
  for (detail::Node* n : order) {
    if (!n->parents.empty()) n->grad.assign(n->value.numel(), 0.0);
  }
  node_->ensure_grad();
  node_->grad[0] = 1.0;
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    detail::Node* n = *it;
    if (n->backward_fn) {
      for (auto& p : n->parents) {
        if (p->requires_grad) p->ensure_grad();
      }
      n->backward_fn(*n);
    }
  }
}

// ---------------------------------------------------------------------------
// Primitives
// ---------------------------------------------------------------------------

namespace detail {

inline void require_same(const char* op, const Shape& a, const Shape& b) {
  if (a != b) throw ShapeError(std::string(op) + ": shape mismatch " + to_string(a) + " vs " + to_string(b));
}

inline std::size_t norm_axis(const char* op, long axis, std::size_t rank) {
  const long r = static_cast<long>(rank);
  const long a = axis < 0 ? axis + r : axis;
  if (a < 0 || a >= r) {
    throw ShapeError(std::string(op) + ": axis " + std::to_string(axis) + " out of range for rank " +
                     std::to_string(rank));
  }
  return static_cast<std::size_t>(a);
}

/// (outer, extent, inner) decomposition of a shape around one axis.
struct AxisView {
  std::size_t outer = 1, extent = 1, inner = 1;
};

inline AxisView axis_view(const Shape& s, std::size_t axis) {
  AxisView v;
  for (std::size_t i = 0; i < axis; ++i) v.outer *= s[i];
  v.extent = s[axis];
  for (std::size_t i = axis + 1; i < s.size(); ++i) v.inner *= s[i];
  return v;
}

inline bool wants(const std::shared_ptr<Node>& p) { return p->requires_grad; }

template <typename F>
Var unary(const Var& x, F&& f, std::function<double(double /*x*/, double /*y*/)> dfdx) {
  Tensor out(x.shape());
  const auto& in = x.value().data;
  for (std::size_t i = 0; i < in.size(); ++i) out.data[i] = f(in[i]);
  return make_op(std::move(out), {x}, [dfdx = std::move(dfdx)](Node& self) {
    auto& p = *self.parents[0];
    for (std::size_t i = 0; i < self.grad.size(); ++i) {
      p.grad[i] += self.grad[i] * dfdx(p.value.data[i], self.value.data[i]);
    }
  });
}

}  // namespace detail

inline Var add(const Var& a, const Var& b) {
  detail::require_same("add", a.shape(), b.shape());
  Tensor out(a.shape());
  for (std::size_t i = 0; i < out.numel(); ++i) out.data[i] = a.value().data[i] + b.value().data[i];
  return make_op(std::move(out), {a, b}, [](detail::Node& self) {
    for (auto& p : self.parents) {
      if (!p->requires_grad) continue;
      for (std::size_t i = 0; i < self.grad.size(); ++i) p->grad[i] += self.grad[i];
    }
  });
}

inline Var sub(const Var& a, const Var& b) {
  detail::require_same("sub", a.shape(), b.shape());
  Tensor out(a.shape());
  for (std::size_t i = 0; i < out.numel(); ++i) out.data[i] = a.value().data[i] - b.value().data[i];
  return make_op(std::move(out), {a, b}, [](detail::Node& self) {
    const double sign[2] = {1.0, -1.0};
    for (std::size_t k = 0; k < 2; ++k) {
      auto& p = self.parents[k];
      if (!p->requires_grad) continue;
      for (std::size_t i = 0; i < self.grad.size(); ++i) p->grad[i] += sign[k] * self.grad[i];
    }
  });
}

inline Var mul(const Var& a, const Var& b) {
  detail::require_same("mul", a.shape(), b.shape());
  Tensor out(a.shape());
  for (std::size_t i = 0; i < out.numel(); ++i) out.data[i] = a.value().data[i] * b.value().data[i];
  return make_op(std::move(out), {a, b}, [](detail::Node& self) {
    auto& pa = *self.parents[0];
    auto& pb = *self.parents[1];
    if (pa.requires_grad) {
      for (std::size_t i = 0; i < self.grad.size(); ++i) pa.grad[i] += self.grad[i] * pb.value.data[i];
    }
    if (pb.requires_grad) {
      for (std::size_t i = 0; i < self.grad.size(); ++i) pb.grad[i] += self.grad[i] * pa.value.data[i];
    }
  });
}

inline Var scale(const Var& x, double s) {
  Tensor out(x.shape());
  for (std::size_t i = 0; i < out.numel(); ++i) out.data[i] = x.value().data[i] * s;
  return make_op(std::move(out), {x}, [s](detail::Node& self) {
    auto& p = *self.parents[0];
    for (std::size_t i = 0; i < self.grad.size(); ++i) p.grad[i] += s * self.grad[i];
  });
}

inline Var add_scalar(const Var& x, double s) {
  Tensor out(x.shape());
  for (std::size_t i = 0; i < out.numel(); ++i) out.data[i] = x.value().data[i] + s;
  return make_op(std::move(out), {x}, [](detail::Node& self) {
    auto& p = *self.parents[0];
    for (std::size_t i = 0; i < self.grad.size(); ++i) p.grad[i] += self.grad[i];
  });
}

namespace detail {

/// True when `v`'s shape equals the trailing axes of `x`'s shape.
inline bool trailing_match(const Shape& x, const Shape& v) {
  if (v.empty() || v.size() > x.size()) return false;
  return std::equal(v.begin(), v.end(), x.end() - static_cast<long>(v.size()));
}

}  // namespace detail

/// x + v with v broadcast over the leading axes of x (v's shape must equal x's trailing axes).
inline Var add_row(const Var& x, const Var& v) {
  if (!detail::trailing_match(x.shape(), v.shape())) {
    throw ShapeError("add_row: shape mismatch " + to_string(x.shape()) + " vs " + to_string(v.shape()));
  }
  const std::size_t w = v.numel();
  Tensor out(x.shape());
  for (std::size_t i = 0; i < out.numel(); ++i) out.data[i] = x.value().data[i] + v.value().data[i % w];
  return make_op(std::move(out), {x, v}, [w](detail::Node& self) {
    auto& px = *self.parents[0];
    auto& pv = *self.parents[1];
    if (px.requires_grad) {
      for (std::size_t i = 0; i < self.grad.size(); ++i) px.grad[i] += self.grad[i];
    }
    if (pv.requires_grad) {
      for (std::size_t i = 0; i < self.grad.size(); ++i) pv.grad[i % w] += self.grad[i];
    }
  });
}

/// x ⊙ v with v broadcast over the leading axes of x.
inline Var mul_row(const Var& x, const Var& v) {
  if (!detail::trailing_match(x.shape(), v.shape())) {
    throw ShapeError("mul_row: shape mismatch " + to_string(x.shape()) + " vs " + to_string(v.shape()));
  }
  const std::size_t w = v.numel();
  Tensor out(x.shape());
  for (std::size_t i = 0; i < out.numel(); ++i) out.data[i] = x.value().data[i] * v.value().data[i % w];
  return make_op(std::move(out), {x, v}, [w](detail::Node& self) {
    auto& px = *self.parents[0];
    auto& pv = *self.parents[1];
    if (px.requires_grad) {
      for (std::size_t i = 0; i < self.grad.size(); ++i) px.grad[i] += self.grad[i] * pv.value.data[i % w];
    }
    if (pv.requires_grad) {
      for (std::size_t i = 0; i < self.grad.size(); ++i) pv.grad[i % w] += self.grad[i] * px.value.data[i];
    }
  });
}

inline Var relu(const Var& x) {
  return detail::unary(
      x, [](double v) { return v > 0.0 ? v : 0.0; }, [](double v, double) { return v > 0.0 ? 1.0 : 0.0; });
}

inline Var tanh(const Var& x) {
  return detail::unary(
      x, [](double v) { return std::tanh(v); }, [](double, double y) { return 1.0 - y * y; });
}

inline Var sigmoid(const Var& x) {
  return detail::unary(
      x, [](double v) { return 1.0 / (1.0 + std::exp(-v)); }, [](double, double y) { return y * (1.0 - y); });
}

/// |x|; subgradient 0 at the kink.
inline Var abs(const Var& x) {
  return detail::unary(
      x, [](double v) { return std::abs(v); },
      [](double v, double) { return v > 0.0 ? 1.0 : (v < 0.0 ? -1.0 : 0.0); });
}

/// log(max(x, eps)); no gradient flows where the floor is active.
inline Var clamp_log(const Var& x, double eps) {
  return detail::unary(
      x, [eps](double v) { return std::log(std::max(v, eps)); },
      [eps](double v, double) { return v > eps ? 1.0 / v : 0.0; });
}

inline Var sum(const Var& x) {
  double s = 0.0;
  for (double v : x.value().data) s += v;
  return make_op(Tensor::scalar(s), {x}, [](detail::Node& self) {
    auto& p = *self.parents[0];
    const double g = self.grad[0];
    for (double& v : p.grad) v += g;
  });
}

inline Var mean(const Var& x) {
  if (x.numel() == 0) throw ShapeError("mean: empty tensor");
  return scale(sum(x), 1.0 / static_cast<double>(x.numel()));
}

/// Mean over one axis; the axis is removed from the result shape.
inline Var mean_axis(const Var& x, long axis) {
  const std::size_t ax = detail::norm_axis("mean_axis", axis, x.value().rank());
  const auto v = detail::axis_view(x.shape(), ax);
  Shape s = x.shape();
  s.erase(s.begin() + static_cast<long>(ax));
  Tensor out(s);
  const double inv = 1.0 / static_cast<double>(v.extent);
  for (std::size_t o = 0; o < v.outer; ++o)
    for (std::size_t e = 0; e < v.extent; ++e)
      for (std::size_t i = 0; i < v.inner; ++i)
        out.data[o * v.inner + i] += x.value().data[(o * v.extent + e) * v.inner + i] * inv;
  return make_op(std::move(out), {x}, [v, inv](detail::Node& self) {
    auto& p = *self.parents[0];
    for (std::size_t o = 0; o < v.outer; ++o)
      for (std::size_t e = 0; e < v.extent; ++e)
        for (std::size_t i = 0; i < v.inner; ++i)
          p.grad[(o * v.extent + e) * v.inner + i] += self.grad[o * v.inner + i] * inv;
  });
}

inline Var reshape(const Var& x, Shape s) {
  if (numel(s) != x.numel()) {
    throw ShapeError("reshape: cannot view " + to_string(x.shape()) + " as " + to_string(s));
  }
  Tensor out(std::move(s), x.value().data);
  return make_op(std::move(out), {x}, [](detail::Node& self) {
    auto& p = *self.parents[0];
    for (std::size_t i = 0; i < self.grad.size(); ++i) p.grad[i] += self.grad[i];
  });
}

/// General axis permutation: result axis k is input axis perm[k].
inline Var permute(const Var& x, const std::vector<std::size_t>& perm) {
  const Shape& in = x.shape();
  const std::size_t r = in.size();
  if (perm.size() != r) throw ShapeError("permute: permutation rank mismatch for " + to_string(in));
  std::vector<bool> used(r, false);
  for (auto p : perm) {
    if (p >= r || used[p]) throw ShapeError("permute: invalid permutation for " + to_string(in));
    used[p] = true;
  }
  Shape out_shape(r);
  for (std::size_t k = 0; k < r; ++k) out_shape[k] = in[perm[k]];
  std::vector<std::size_t> in_stride(r, 1);
  for (std::size_t k = r; k-- > 1;) in_stride[k - 1] = in_stride[k] * in[k];
  // Source offset for every destination element, shared by forward and backward.
  auto src = std::make_shared<std::vector<std::size_t>>(x.numel());
  std::vector<std::size_t> idx(r, 0);
  for (std::size_t flat = 0; flat < x.numel(); ++flat) {
    std::size_t off = 0;
    for (std::size_t k = 0; k < r; ++k) off += idx[k] * in_stride[perm[k]];
    (*src)[flat] = off;
    for (std::size_t k = r; k-- > 0;) {
      if (++idx[k] < out_shape[k]) break;
      idx[k] = 0;
    }
  }
  Tensor out(out_shape);
  for (std::size_t i = 0; i < out.numel(); ++i) out.data[i] = x.value().data[(*src)[i]];
  return make_op(std::move(out), {x}, [src](detail::Node& self) {
    auto& p = *self.parents[0];
    for (std::size_t i = 0; i < self.grad.size(); ++i) p.grad[(*src)[i]] += self.grad[i];
  });
}

inline Var transpose(const Var& x) {
  if (x.value().rank() != 2) throw ShapeError("transpose: expected rank 2, got " + to_string(x.shape()));
  return permute(x, {1, 0});
}

/// x[..., k] · w[k, m] → [..., m]; leading axes of x are treated as rows.
inline Var matmul(const Var& x, const Var& w) {
  const auto& xs = x.shape();
  const auto& ws = w.shape();
  if (ws.size() != 2 || xs.empty() || xs.back() != ws[0]) {
    throw ShapeError("matmul: shape mismatch " + to_string(xs) + " vs " + to_string(ws));
  }
  const std::size_t k = ws[0], m = ws[1], rows = x.numel() / k;
  Shape os = xs;
  os.back() = m;
  Tensor out(os);
  const double* xd = x.value().data.data();
  const double* wd = w.value().data.data();
  double* od = out.data.data();
  for (std::size_t i = 0; i < rows; ++i) {
    double* orow = od + i * m;
    for (std::size_t p = 0; p < k; ++p) {
      const double a = xd[i * k + p];
      if (a == 0.0) continue;
      const double* wrow = wd + p * m;
      for (std::size_t j = 0; j < m; ++j) orow[j] += a * wrow[j];
    }
  }
  return make_op(std::move(out), {x, w}, [rows, k, m](detail::Node& self) {
    auto& px = *self.parents[0];
    auto& pw = *self.parents[1];
    const double* g = self.grad.data();
    if (px.requires_grad) {
      const double* wd = pw.value.data.data();
      for (std::size_t i = 0; i < rows; ++i)
        for (std::size_t p = 0; p < k; ++p) {
          double acc = 0.0;
          for (std::size_t j = 0; j < m; ++j) acc += g[i * m + j] * wd[p * m + j];
          px.grad[i * k + p] += acc;
        }
    }
    if (pw.requires_grad) {
      const double* xd = px.value.data.data();
      for (std::size_t i = 0; i < rows; ++i)
        for (std::size_t p = 0; p < k; ++p) {
          const double a = xd[i * k + p];
          if (a == 0.0) continue;
          double* gw = pw.grad.data() + p * m;
          for (std::size_t j = 0; j < m; ++j) gw[j] += a * g[i * m + j];
        }
    }
  });
}

/// Batched product. With transpose_b=false: a[B,n,k]·b[B,k,m]; with true: a[B,n,k]·b[B,m,k]ᵀ.
inline Var bmm(const Var& a, const Var& b, bool transpose_b = false) {
  const auto& as = a.shape();
  const auto& bs = b.shape();
  const bool ok = as.size() == 3 && bs.size() == 3 && as[0] == bs[0] &&
                  (transpose_b ? as[2] == bs[2] : as[2] == bs[1]);
  if (!ok) throw ShapeError("bmm: shape mismatch " + to_string(as) + " vs " + to_string(bs));
  const std::size_t B = as[0], n = as[1], k = as[2], m = transpose_b ? bs[1] : bs[2];
  Tensor out(Shape{B, n, m});
  const double* ad = a.value().data.data();
  const double* bd = b.value().data.data();
  // b element (batch, p, j) in the un-transposed sense.
  auto bidx = [=](std::size_t bb, std::size_t p, std::size_t j) {
    return transpose_b ? (bb * m + j) * k + p : (bb * k + p) * m + j;
  };
  for (std::size_t bb = 0; bb < B; ++bb)
    for (std::size_t i = 0; i < n; ++i) {
      double* orow = out.data.data() + (bb * n + i) * m;
      const double* arow = ad + (bb * n + i) * k;
      if (transpose_b) {
        for (std::size_t j = 0; j < m; ++j) {
          const double* brow = bd + (bb * m + j) * k;
          double acc = 0.0;
          for (std::size_t p = 0; p < k; ++p) acc += arow[p] * brow[p];
          orow[j] = acc;
        }
      } else {
        for (std::size_t p = 0; p < k; ++p) {
          const double av = arow[p];
          const double* brow = bd + (bb * k + p) * m;
          for (std::size_t j = 0; j < m; ++j) orow[j] += av * brow[j];
        }
      }
    }
  return make_op(std::move(out), {a, b}, [=](detail::Node& self) {
    auto& pa = *self.parents[0];
    auto& pb = *self.parents[1];
    const double* g = self.grad.data();
    const double* ad = pa.value.data.data();
    const double* bd = pb.value.data.data();
    for (std::size_t bb = 0; bb < B; ++bb)
      for (std::size_t i = 0; i < n; ++i) {
        const double* grow = g + (bb * n + i) * m;
        for (std::size_t p = 0; p < k; ++p) {
          if (pa.requires_grad) {
            double acc = 0.0;
            for (std::size_t j = 0; j < m; ++j) acc += grow[j] * bd[bidx(bb, p, j)];
            pa.grad[(bb * n + i) * k + p] += acc;
          }
          if (pb.requires_grad) {
            const double av = ad[(bb * n + i) * k + p];
            for (std::size_t j = 0; j < m; ++j) pb.grad[bidx(bb, p, j)] += av * grow[j];
          }
        }
      }
  });
}

/// Softmax along `axis`.
inline Var softmax(const Var& x, long axis = -1) {
  const std::size_t ax = detail::norm_axis("softmax", axis, x.value().rank());
  const auto v = detail::axis_view(x.shape(), ax);
  Tensor out(x.shape());
  const auto& in = x.value().data;
  for (std::size_t o = 0; o < v.outer; ++o)
    for (std::size_t i = 0; i < v.inner; ++i) {
      auto at = [&](std::size_t e) { return (o * v.extent + e) * v.inner + i; };
      double mx = -INFINITY;
      for (std::size_t e = 0; e < v.extent; ++e) mx = std::max(mx, in[at(e)]);
      double z = 0.0;
      for (std::size_t e = 0; e < v.extent; ++e) z += (out.data[at(e)] = std::exp(in[at(e)] - mx));
      for (std::size_t e = 0; e < v.extent; ++e) out.data[at(e)] /= z;
    }
  return make_op(std::move(out), {x}, [v](detail::Node& self) {
    auto& p = *self.parents[0];
    const auto& y = self.value.data;
    for (std::size_t o = 0; o < v.outer; ++o)
      for (std::size_t i = 0; i < v.inner; ++i) {
        auto at = [&](std::size_t e) { return (o * v.extent + e) * v.inner + i; };
        double dot = 0.0;
        for (std::size_t e = 0; e < v.extent; ++e) dot += self.grad[at(e)] * y[at(e)];
        for (std::size_t e = 0; e < v.extent; ++e) p.grad[at(e)] += y[at(e)] * (self.grad[at(e)] - dot);
      }
  });
}

inline constexpr double kLayerNormVarianceFloor = 1e-12;

/// Normalizes the last axis to zero mean and unit variance (no affine).
/// Constant input rows map to zeros because the variance is floored.
inline Var layer_norm(const Var& x) {
  if (x.value().rank() == 0) throw ShapeError("layer_norm: scalar input");
  const std::size_t w = x.shape().back();
  const std::size_t rows = x.numel() / w;
  Tensor out(x.shape());
  auto inv_std = std::make_shared<std::vector<double>>(rows);
  const auto& in = x.value().data;
  for (std::size_t r = 0; r < rows; ++r) {
    const double* row = in.data() + r * w;
    double mu = 0.0;
    for (std::size_t j = 0; j < w; ++j) mu += row[j];
    mu /= static_cast<double>(w);
    double var = 0.0;
    for (std::size_t j = 0; j < w; ++j) var += (row[j] - mu) * (row[j] - mu);
    var /= static_cast<double>(w);
    const double is = 1.0 / std::sqrt(std::max(var, kLayerNormVarianceFloor));
    (*inv_std)[r] = is;
    for (std::size_t j = 0; j < w; ++j) out.data[r * w + j] = (row[j] - mu) * is;
  }
  return make_op(std::move(out), {x}, [w, rows, inv_std](detail::Node& self) {
    auto& p = *self.parents[0];
    const auto& y = self.value.data;
    const double inv_w = 1.0 / static_cast<double>(w);
    for (std::size_t r = 0; r < rows; ++r) {
      const double* g = self.grad.data() + r * w;
      const double* yr = y.data() + r * w;
      double gs = 0.0, gy = 0.0;
      for (std::size_t j = 0; j < w; ++j) {
        gs += g[j];
        gy += g[j] * yr[j];
      }
      const double is = (*inv_std)[r];
      for (std::size_t j = 0; j < w; ++j) p.grad[r * w + j] += is * (g[j] - inv_w * gs - yr[j] * inv_w * gy);
    }
  });
}

/// Concatenation along `axis`; all other extents must agree.
inline Var concat(const std::vector<Var>& xs, long axis) {
  if (xs.empty()) throw ShapeError("concat: no inputs");
  const std::size_t ax = detail::norm_axis("concat", axis, xs[0].value().rank());
  Shape s = xs[0].shape();
  std::size_t total = 0;
  for (const auto& x : xs) {
    Shape a = x.shape(), b = s;
    if (a.size() != b.size()) throw ShapeError("concat: rank mismatch " + to_string(a) + " vs " + to_string(b));
    a[ax] = b[ax] = 0;
    if (a != b) throw ShapeError("concat: shape mismatch " + to_string(x.shape()) + " vs " + to_string(s));
    total += x.dim(ax);
  }
  s[ax] = total;
  const auto ov = detail::axis_view(s, ax);
  Tensor out(s);
  std::vector<std::size_t> offsets;
  std::size_t off = 0;
  for (const auto& x : xs) {
    offsets.push_back(off);
    const std::size_t e = x.dim(ax);
    for (std::size_t o = 0; o < ov.outer; ++o)
      std::copy_n(x.value().data.begin() + static_cast<long>(o * e * ov.inner), e * ov.inner,
                  out.data.begin() + static_cast<long>((o * ov.extent + off) * ov.inner));
    off += e;
  }
  return make_op(std::move(out), xs, [ov, offsets](detail::Node& self) {
    for (std::size_t k = 0; k < self.parents.size(); ++k) {
      auto& p = *self.parents[k];
      if (!p.requires_grad) continue;
      const std::size_t e = p.value.numel() / (ov.outer * ov.inner);
      for (std::size_t o = 0; o < ov.outer; ++o)
        for (std::size_t t = 0; t < e * ov.inner; ++t)
          p.grad[o * e * ov.inner + t] += self.grad[(o * ov.extent + offsets[k]) * ov.inner + t];
    }
  });
}

/// Half-open range [begin, end) along `axis`.
inline Var slice(const Var& x, long axis, std::size_t begin, std::size_t end) {
  const std::size_t ax = detail::norm_axis("slice", axis, x.value().rank());
  if (begin > end || end > x.dim(ax)) {
    throw ShapeError("slice: range [" + std::to_string(begin) + "," + std::to_string(end) + ") invalid for " +
                     to_string(x.shape()));
  }
  const auto v = detail::axis_view(x.shape(), ax);
  Shape s = x.shape();
  s[ax] = end - begin;
  const std::size_t e = end - begin;
  Tensor out(s);
  for (std::size_t o = 0; o < v.outer; ++o)
    std::copy_n(x.value().data.begin() + static_cast<long>((o * v.extent + begin) * v.inner), e * v.inner,
                out.data.begin() + static_cast<long>(o * e * v.inner));
  return make_op(std::move(out), {x}, [v, begin, e](detail::Node& self) {
    auto& p = *self.parents[0];
    for (std::size_t o = 0; o < v.outer; ++o)
      for (std::size_t t = 0; t < e * v.inner; ++t)
        p.grad[(o * v.extent + begin) * v.inner + t] += self.grad[o * e * v.inner + t];
  });
}

/// Gathers entries `indices` along `axis` (repeats allowed). Used for
/// embedding lookup and for selecting/reordering patch rows.
inline Var index_select(const Var& x, long axis, std::vector<std::size_t> indices) {
  const std::size_t ax = detail::norm_axis("index_select", axis, x.value().rank());
  const auto v = detail::axis_view(x.shape(), ax);
  for (auto i : indices) {
    if (i >= v.extent) {
      throw ShapeError("index_select: index " + std::to_string(i) + " out of range for " + to_string(x.shape()));
    }
  }
  Shape s = x.shape();
  s[ax] = indices.size();
  const std::size_t e = indices.size();
  Tensor out(s);
  for (std::size_t o = 0; o < v.outer; ++o)
    for (std::size_t k = 0; k < e; ++k)
      std::copy_n(x.value().data.begin() + static_cast<long>((o * v.extent + indices[k]) * v.inner), v.inner,
                  out.data.begin() + static_cast<long>((o * e + k) * v.inner));
  return make_op(std::move(out), {x}, [v, e, idx = std::move(indices)](detail::Node& self) {
    auto& p = *self.parents[0];
    for (std::size_t o = 0; o < v.outer; ++o)
      for (std::size_t k = 0; k < e; ++k)
        for (std::size_t t = 0; t < v.inner; ++t)
          p.grad[(o * v.extent + idx[k]) * v.inner + t] += self.grad[(o * e + k) * v.inner + t];
  });
}

inline Var embedding(const Var& table, std::vector<std::size_t> ids) {
  if (table.value().rank() != 2) throw ShapeError("embedding: table must be rank 2, got " + to_string(table.shape()));
  return index_select(table, 0, std::move(ids));
}

/// 1-D convolution over time. x: [B, T, Cin], kernel: [K, Cin, Cout].
/// Output step t reads inputs t·stride − (K−1−k)·dilation for k = 0..K−1 when
/// `causal` (left zero padding, output length ⌈T/stride⌉), otherwise
/// t·stride + k·dilation (valid, output length ⌊(T − (K−1)·dilation − 1)/stride⌋ + 1).
inline Var conv1d(const Var& x, const Var& kernel, std::size_t dilation = 1, std::size_t stride = 1,
                  bool causal = true) {
  const auto& xs = x.shape();
  const auto& ks = kernel.shape();
  if (xs.size() != 3 || ks.size() != 3 || xs[2] != ks[1] || dilation == 0 || stride == 0) {
    throw ShapeError("conv1d: shape mismatch " + to_string(xs) + " vs " + to_string(ks));
  }
  const std::size_t B = xs[0], T = xs[1], Ci = xs[2], K = ks[0], Co = ks[2];
  const std::size_t span = (K - 1) * dilation;
  std::size_t To;
  if (causal) {
    To = (T + stride - 1) / stride;
  } else {
    if (T <= span) throw ShapeError("conv1d: input length " + std::to_string(T) + " shorter than receptive field");
    To = (T - span - 1) / stride + 1;
  }
  // Input time index feeding output step t through tap k, or -1 for padding.
  auto src = [=](std::size_t t, std::size_t k) -> long {
    if (causal) return static_cast<long>(t * stride) - static_cast<long>((K - 1 - k) * dilation);
    return static_cast<long>(t * stride + k * dilation);
  };
  Tensor out(Shape{B, To, Co});
  const double* xd = x.value().data.data();
  const double* kd = kernel.value().data.data();
  for (std::size_t b = 0; b < B; ++b)
    for (std::size_t t = 0; t < To; ++t) {
      double* orow = out.data.data() + (b * To + t) * Co;
      for (std::size_t k = 0; k < K; ++k) {
        const long s = src(t, k);
        if (s < 0) continue;
        const double* xrow = xd + (b * T + static_cast<std::size_t>(s)) * Ci;
        for (std::size_t c = 0; c < Ci; ++c) {
          const double a = xrow[c];
          const double* krow = kd + (k * Ci + c) * Co;
          for (std::size_t o = 0; o < Co; ++o) orow[o] += a * krow[o];
        }
      }
    }
  return make_op(std::move(out), {x, kernel}, [=](detail::Node& self) {
    auto& px = *self.parents[0];
    auto& pk = *self.parents[1];
    const double* xd = px.value.data.data();
    const double* kd = pk.value.data.data();
    for (std::size_t b = 0; b < B; ++b)
      for (std::size_t t = 0; t < To; ++t) {
        const double* g = self.grad.data() + (b * To + t) * Co;
        for (std::size_t k = 0; k < K; ++k) {
          const long s = src(t, k);
          if (s < 0) continue;
          const std::size_t xoff = (b * T + static_cast<std::size_t>(s)) * Ci;
          for (std::size_t c = 0; c < Ci; ++c) {
            const double* krow = kd + (k * Ci + c) * Co;
            if (px.requires_grad) {
              double acc = 0.0;
              for (std::size_t o = 0; o < Co; ++o) acc += g[o] * krow[o];
              px.grad[xoff + c] += acc;
            }
            if (pk.requires_grad) {
              const double a = xd[xoff + c];
              double* gk = pk.grad.data() + (k * Ci + c) * Co;
              for (std::size_t o = 0; o < Co; ++o) gk[o] += a * g[o];
            }
          }
        }
      }
  });
}

/// out[i, j, :] = a[i, :] + b[j, :] for a: [N, h], b: [M, h].
inline Var pair_sum(const Var& a, const Var& b) {
  const auto& as = a.shape();
  const auto& bs = b.shape();
  if (as.size() != 2 || bs.size() != 2 || as[1] != bs[1]) {
    throw ShapeError("pair_sum: shape mismatch " + to_string(as) + " vs " + to_string(bs));
  }
  const std::size_t N = as[0], M = bs[0], h = as[1];
  Tensor out(Shape{N, M, h});
  for (std::size_t i = 0; i < N; ++i)
    for (std::size_t j = 0; j < M; ++j)
      for (std::size_t c = 0; c < h; ++c)
        out.data[(i * M + j) * h + c] = a.value().data[i * h + c] + b.value().data[j * h + c];
  return make_op(std::move(out), {a, b}, [N, M, h](detail::Node& self) {
    auto& pa = *self.parents[0];
    auto& pb = *self.parents[1];
    for (std::size_t i = 0; i < N; ++i)
      for (std::size_t j = 0; j < M; ++j)
        for (std::size_t c = 0; c < h; ++c) {
          const double g = self.grad[(i * M + j) * h + c];
          if (pa.requires_grad) pa.grad[i * h + c] += g;
          if (pb.requires_grad) pb.grad[j * h + c] += g;
        }
  });
}

/// Row-stochastic normalization a_ij / Σ_k a_ik of a non-negative square matrix.
inline Var row_normalize(const Var& a) {
  const auto& s = a.shape();
  if (s.size() != 2) throw ShapeError("row_normalize: expected rank 2, got " + to_string(s));
  const std::size_t R = s[0], C = s[1];
  auto sums = std::make_shared<std::vector<double>>(R, 0.0);
  Tensor out(s);
  for (std::size_t i = 0; i < R; ++i) {
    for (std::size_t j = 0; j < C; ++j) (*sums)[i] += a.value().data[i * C + j];
    if (!((*sums)[i] > 0.0)) throw DataError("row_normalize: row " + std::to_string(i) + " has non-positive sum");
    for (std::size_t j = 0; j < C; ++j) out.data[i * C + j] = a.value().data[i * C + j] / (*sums)[i];
  }
  return make_op(std::move(out), {a}, [R, C, sums](detail::Node& self) {
    auto& p = *self.parents[0];
    const auto& y = self.value.data;
    for (std::size_t i = 0; i < R; ++i) {
      double dot = 0.0;
      for (std::size_t j = 0; j < C; ++j) dot += self.grad[i * C + j] * y[i * C + j];
      for (std::size_t j = 0; j < C; ++j) p.grad[i * C + j] += (self.grad[i * C + j] - dot) / (*sums)[i];
    }
  });
}

/// Graph propagation: out[b, i, :] = Σ_j a[i, j] · x[b, j, :] for a: [N, N], x: [B, N, F].
inline Var node_mix(const Var& a, const Var& x) {
  const auto& as = a.shape();
  const auto& xs = x.shape();
  if (as.size() != 2 || xs.size() != 3 || as[0] != as[1] || as[1] != xs[1]) {
    throw ShapeError("node_mix: shape mismatch " + to_string(as) + " vs " + to_string(xs));
  }
  const std::size_t B = xs[0], N = xs[1], F = xs[2];
  Tensor out(xs);
  const double* ad = a.value().data.data();
  const double* xd = x.value().data.data();
  for (std::size_t b = 0; b < B; ++b)
    for (std::size_t i = 0; i < N; ++i) {
      double* orow = out.data.data() + (b * N + i) * F;
      for (std::size_t j = 0; j < N; ++j) {
        const double w = ad[i * N + j];
        if (w == 0.0) continue;
        const double* xrow = xd + (b * N + j) * F;
        for (std::size_t f = 0; f < F; ++f) orow[f] += w * xrow[f];
      }
    }
  return make_op(std::move(out), {a, x}, [B, N, F](detail::Node& self) {
    auto& pa = *self.parents[0];
    auto& px = *self.parents[1];
    const double* ad = pa.value.data.data();
    const double* xd = px.value.data.data();
    for (std::size_t b = 0; b < B; ++b)
      for (std::size_t i = 0; i < N; ++i) {
        const double* g = self.grad.data() + (b * N + i) * F;
        for (std::size_t j = 0; j < N; ++j) {
          const double* xrow = xd + (b * N + j) * F;
          if (pa.requires_grad) {
            double acc = 0.0;
            for (std::size_t f = 0; f < F; ++f) acc += g[f] * xrow[f];
            pa.grad[i * N + j] += acc;
          }
          if (px.requires_grad) {
            const double w = ad[i * N + j];
            double* gx = px.grad.data() + (b * N + j) * F;
            for (std::size_t f = 0; f < F; ++f) gx[f] += w * g[f];
          }
        }
      }
  });
}

}  // namespace step
