#pragma once

// Reverse-mode differentiation over dense tensors.
//
// Every operation records a node holding its value, its inputs and a backward
// closure. Backward closures are themselves written with the differentiable
// operations below, so running `grad(..., create_graph=true)` yields gradient
// nodes that can be differentiated again. Hessian-vector products are the
// gradient of <grad f, v>.
//
// Graphs are built per evaluation and never mutated after construction, so a
// single graph can be traversed by several `grad` calls.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <memory>
#include <span>
#include <unordered_map>
#include <unordered_set>
#include <utility>
#include <vector>

#include "bissl/errors.hpp"
#include "bissl/tensor.hpp"

namespace bissl::ad {

struct Node;

class Var {
 public:
  Var() = default;
  explicit Var(std::shared_ptr<Node> node) : node_(std::move(node)) {}

  bool defined() const { return static_cast<bool>(node_); }
  const Tensor& value() const;
  const Shape& shape() const { return value().shape(); }
  double item() const { return value().item(); }
  bool requires_grad() const;
  const std::shared_ptr<Node>& node() const { return node_; }

 private:
  std::shared_ptr<Node> node_;
};

using BackwardFn = std::function<std::vector<Var>(const Var& self, const Var& grad_out)>;

struct Node {
  Tensor value;
  std::vector<Var> inputs;
  BackwardFn backward;
  bool requires_grad = false;
};

inline const Tensor& Var::value() const { return node_->value; }
inline bool Var::requires_grad() const { return node_ && node_->requires_grad; }

// ---------------------------------------------------------------------------
// Recording switch

inline bool& grad_mode_flag() {
  thread_local bool enabled = true;
  return enabled;
}

inline bool grad_enabled() { return grad_mode_flag(); }

/// Scoped override of graph recording for the current thread.
class GradModeGuard {
 public:
  explicit GradModeGuard(bool enabled) : previous_(grad_mode_flag()) { grad_mode_flag() = enabled; }
  ~GradModeGuard() { grad_mode_flag() = previous_; }
  GradModeGuard(const GradModeGuard&) = delete;
  GradModeGuard& operator=(const GradModeGuard&) = delete;

 private:
  bool previous_;
};

// ---------------------------------------------------------------------------
// Leaves

inline Var parameter(Tensor value) {
  auto n = std::make_shared<Node>();
  n->value = std::move(value);
  n->requires_grad = true;
  return Var(std::move(n));
}

inline Var constant(Tensor value) {
  auto n = std::make_shared<Node>();
  n->value = std::move(value);
  return Var(std::move(n));
}

inline Var make_op(Tensor value, std::vector<Var> inputs, BackwardFn backward) {
  auto n = std::make_shared<Node>();
  n->value = std::move(value);
  if (grad_enabled() && std::any_of(inputs.begin(), inputs.end(), [](const Var& v) { return v.requires_grad(); })) {
    n->inputs = std::move(inputs);
    n->backward = std::move(backward);
    n->requires_grad = true;
  }
  return Var(std::move(n));
}

namespace detail {
inline bool needs(const Var& self, std::size_t i) { return self.node()->inputs[i].requires_grad(); }
inline const Var& input(const Var& self, std::size_t i) { return self.node()->inputs[i]; }

inline void require_matrix(const Tensor& t, const char* op) {
  if (t.rank() != 2) throw LayoutError(std::string(op) + " expects a matrix, got " + shape_str(t.shape()));
}
}  // namespace detail

// ---------------------------------------------------------------------------
// Elementwise

inline Var add(const Var& a, const Var& b);
inline Var sub(const Var& a, const Var& b);
inline Var mul(const Var& a, const Var& b);
inline Var neg(const Var& a);
inline Var scale(const Var& a, double c);

inline Var add(const Var& a, const Var& b) {
  return make_op(kernels::zip(a.value(), b.value(), [](double x, double y) { return x + y; }), {a, b},
                 [](const Var&, const Var& g) { return std::vector<Var>{g, g}; });
}

inline Var sub(const Var& a, const Var& b) {
  return make_op(kernels::zip(a.value(), b.value(), [](double x, double y) { return x - y; }), {a, b},
                 [](const Var& self, const Var& g) {
                   return std::vector<Var>{g, detail::needs(self, 1) ? neg(g) : Var()};
                 });
}

inline Var mul(const Var& a, const Var& b) {
  return make_op(kernels::zip(a.value(), b.value(), [](double x, double y) { return x * y; }), {a, b},
                 [](const Var& self, const Var& g) {
                   const auto& x = detail::input(self, 0);
                   const auto& y = detail::input(self, 1);
                   return std::vector<Var>{detail::needs(self, 0) ? mul(g, y) : Var(),
                                           detail::needs(self, 1) ? mul(g, x) : Var()};
                 });
}

inline Var neg(const Var& a) {
  return make_op(kernels::map(a.value(), [](double x) { return -x; }), {a},
                 [](const Var&, const Var& g) { return std::vector<Var>{neg(g)}; });
}

inline Var scale(const Var& a, double c) {
  return make_op(kernels::map(a.value(), [c](double x) { return c * x; }), {a},
                 [c](const Var&, const Var& g) { return std::vector<Var>{scale(g, c)}; });
}

/// a + c for a constant scalar c.
inline Var add_scalar(const Var& a, double c) {
  return make_op(kernels::map(a.value(), [c](double x) { return x + c; }), {a},
                 [](const Var&, const Var& g) { return std::vector<Var>{g}; });
}

inline Var square(const Var& a);
inline Var reshape(const Var& a, Shape shape);
inline Var recip(const Var& a);

inline Var exp(const Var& a) {
  return make_op(kernels::map(a.value(), [](double x) { return std::exp(x); }), {a},
                 [](const Var& self, const Var& g) { return std::vector<Var>{mul(g, self)}; });
}

inline Var log(const Var& a) {
  return make_op(kernels::map(a.value(), [](double x) { return std::log(x); }), {a},
                 [](const Var& self, const Var& g) {
                   return std::vector<Var>{mul(g, recip(detail::input(self, 0)))};
                 });
}

inline Var square(const Var& a) {
  return make_op(kernels::map(a.value(), [](double x) { return x * x; }), {a},
                 [](const Var& self, const Var& g) {
                   return std::vector<Var>{scale(mul(g, detail::input(self, 0)), 2.0)};
                 });
}

inline Var recip(const Var& a) {
  return make_op(kernels::map(a.value(), [](double x) { return 1.0 / x; }), {a},
                 [](const Var& self, const Var& g) { return std::vector<Var>{neg(mul(g, square(self)))}; });
}

inline Var sqrt(const Var& a) {
  return make_op(kernels::map(a.value(), [](double x) { return std::sqrt(x); }), {a},
                 [](const Var& self, const Var& g) {
                   return std::vector<Var>{scale(mul(g, recip(self)), 0.5)};
                 });
}

/// max(0, x) with subgradient 0 at exactly 0. The mask is a constant, so the
/// second derivative through the kink is zero.
inline Var relu(const Var& a) {
  return make_op(kernels::map(a.value(), [](double x) { return x > 0.0 ? x : 0.0; }), {a},
                 [](const Var& self, const Var& g) {
                   auto mask = kernels::map(detail::input(self, 0).value(), [](double x) { return x > 0.0 ? 1.0 : 0.0; });
                   return std::vector<Var>{mul(g, constant(std::move(mask)))};
                 });
}

// ---------------------------------------------------------------------------
// Linear algebra and reductions

/// op(a) * op(b) where op optionally transposes.
inline Var matmul(const Var& a, const Var& b, bool trans_a = false, bool trans_b = false) {
  return make_op(kernels::matmul(a.value(), b.value(), trans_a, trans_b), {a, b},
                 [trans_a, trans_b](const Var& self, const Var& g) {
                   const auto& x = detail::input(self, 0);
                   const auto& y = detail::input(self, 1);
                   Var gx, gy;
                   const bool nx = detail::needs(self, 0);
                   const bool ny = detail::needs(self, 1);
                   if (!trans_a && !trans_b) {
                     if (nx) gx = matmul(g, y, false, true);
                     if (ny) gy = matmul(x, g, true, false);
                   } else if (!trans_a && trans_b) {
                     if (nx) gx = matmul(g, y, false, false);
                     if (ny) gy = matmul(g, x, true, false);
                   } else if (trans_a && !trans_b) {
                     if (nx) gx = matmul(y, g, false, true);
                     if (ny) gy = matmul(x, g, false, false);
                   } else {
                     if (nx) gx = matmul(y, g, true, true);
                     if (ny) gy = matmul(g, x, true, true);
                   }
                   return std::vector<Var>{gx, gy};
                 });
}

inline Var sum_rows(const Var& a);
inline Var broadcast_rows(const Var& v, std::size_t rows);
inline Var sum_cols(const Var& a);
inline Var broadcast_cols(const Var& v, std::size_t cols);

/// a (m x n) + b (n) broadcast over rows.
inline Var add_row(const Var& a, const Var& b) {
  detail::require_matrix(a.value(), "add_row");
  const std::size_t m = a.value().rows(), n = a.value().cols();
  if (b.value().numel() != n) {
    throw LayoutError("add_row: bias of shape " + shape_str(b.shape()) + " for matrix " + shape_str(a.shape()));
  }
  Tensor out = a.value();
  const auto& bv = b.value().vec();
  for (std::size_t i = 0; i < m; ++i) {
    for (std::size_t j = 0; j < n; ++j) out(i, j) += bv[j];
  }
  return make_op(std::move(out), {a, b}, [](const Var& self, const Var& g) {
    return std::vector<Var>{g, detail::needs(self, 1) ? sum_rows(g) : Var()};
  });
}

/// Column sums of an (m x n) matrix, shape (n).
inline Var sum_rows(const Var& a) {
  detail::require_matrix(a.value(), "sum_rows");
  const std::size_t m = a.value().rows(), n = a.value().cols();
  Tensor out(Shape{n});
  for (std::size_t i = 0; i < m; ++i) {
    for (std::size_t j = 0; j < n; ++j) out[j] += a.value()(i, j);
  }
  return make_op(std::move(out), {a}, [m](const Var&, const Var& g) { return std::vector<Var>{broadcast_rows(g, m)}; });
}

/// Repeats a vector of length n as each of `rows` rows.
inline Var broadcast_rows(const Var& v, std::size_t rows) {
  const std::size_t n = v.value().numel();
  Tensor out(Shape{rows, n});
  for (std::size_t i = 0; i < rows; ++i) {
    std::copy(v.value().vec().begin(), v.value().vec().end(), out.vec().begin() + static_cast<std::ptrdiff_t>(i * n));
  }
  return make_op(std::move(out), {v}, [](const Var& self, const Var& g) {
    auto s = sum_rows(g);
    const auto& shape = detail::input(self, 0).shape();
    return std::vector<Var>{s.shape() == shape ? s : reshape(s, shape)};
  });
}

/// Row sums of an (m x n) matrix, shape (m).
inline Var sum_cols(const Var& a) {
  detail::require_matrix(a.value(), "sum_cols");
  const std::size_t m = a.value().rows(), n = a.value().cols();
  Tensor out(Shape{m});
  for (std::size_t i = 0; i < m; ++i) {
    double s = 0.0;
    for (std::size_t j = 0; j < n; ++j) s += a.value()(i, j);
    out[i] = s;
  }
  return make_op(std::move(out), {a}, [n](const Var&, const Var& g) { return std::vector<Var>{broadcast_cols(g, n)}; });
}

/// Repeats a vector of length m as each of `cols` columns.
inline Var broadcast_cols(const Var& v, std::size_t cols) {
  const std::size_t m = v.value().numel();
  Tensor out(Shape{m, cols});
  for (std::size_t i = 0; i < m; ++i) {
    for (std::size_t j = 0; j < cols; ++j) out(i, j) = v.value()[i];
  }
  return make_op(std::move(out), {v}, [](const Var& self, const Var& g) {
    auto s = sum_cols(g);
    const auto& shape = detail::input(self, 0).shape();
    return std::vector<Var>{s.shape() == shape ? s : reshape(s, shape)};
  });
}

inline Var broadcast_scalar(const Var& s, const Shape& shape);

/// Sum of all entries; a scalar.
inline Var sum(const Var& a) {
  double s = 0.0;
  for (double v : a.value().vec()) s += v;
  return make_op(Tensor::scalar(s), {a}, [](const Var& self, const Var& g) {
    return std::vector<Var>{broadcast_scalar(g, detail::input(self, 0).shape())};
  });
}

inline Var mean(const Var& a) { return scale(sum(a), 1.0 / static_cast<double>(a.value().numel())); }

inline Var broadcast_scalar(const Var& s, const Shape& shape) {
  return make_op(Tensor(shape, s.value().item()), {s}, [](const Var&, const Var& g) {
    return std::vector<Var>{sum(g)};
  });
}

/// <a, b> over all entries.
inline Var dot(const Var& a, const Var& b) { return sum(mul(a, b)); }

inline Var reshape(const Var& a, Shape shape) {
  if (shape_numel(shape) != a.value().numel()) {
    throw LayoutError("reshape " + shape_str(a.shape()) + " -> " + shape_str(shape));
  }
  Tensor out(std::move(shape), a.value().vec());
  return make_op(std::move(out), {a}, [](const Var& self, const Var& g) {
    return std::vector<Var>{reshape(g, detail::input(self, 0).shape())};
  });
}

// ---------------------------------------------------------------------------
// Indexing

inline Var scatter_cols(const Var& v, std::vector<std::size_t> idx, std::size_t cols);

/// out[i] = a(i, idx[i]).
inline Var gather_cols(const Var& a, std::vector<std::size_t> idx) {
  detail::require_matrix(a.value(), "gather_cols");
  const std::size_t m = a.value().rows(), n = a.value().cols();
  if (idx.size() != m) throw LayoutError("gather_cols: index count does not match rows");
  Tensor out(Shape{m});
  for (std::size_t i = 0; i < m; ++i) {
    if (idx[i] >= n) throw LayoutError("gather_cols: column index out of range");
    out[i] = a.value()(i, idx[i]);
  }
  return make_op(std::move(out), {a}, [idx = std::move(idx), n](const Var&, const Var& g) {
    return std::vector<Var>{scatter_cols(g, idx, n)};
  });
}

/// Zero (m x cols) matrix with v[i] placed at (i, idx[i]).
inline Var scatter_cols(const Var& v, std::vector<std::size_t> idx, std::size_t cols) {
  const std::size_t m = v.value().numel();
  Tensor out(Shape{m, cols});
  for (std::size_t i = 0; i < m; ++i) out(i, idx[i]) = v.value()[i];
  return make_op(std::move(out), {v}, [idx = std::move(idx)](const Var&, const Var& g) {
    return std::vector<Var>{gather_cols(g, idx)};
  });
}

inline Var slice_rows(const Var& a, std::size_t start, std::size_t count);
inline Var pad_rows(const Var& a, std::size_t start, std::size_t total);

/// Stacks a (p x n) over b (q x n).
inline Var concat_rows(const Var& a, const Var& b) {
  detail::require_matrix(a.value(), "concat_rows");
  detail::require_matrix(b.value(), "concat_rows");
  if (a.value().cols() != b.value().cols()) throw LayoutError("concat_rows: column mismatch");
  const std::size_t p = a.value().rows(), q = b.value().rows(), n = a.value().cols();
  std::vector<double> data;
  data.reserve((p + q) * n);
  data.insert(data.end(), a.value().vec().begin(), a.value().vec().end());
  data.insert(data.end(), b.value().vec().begin(), b.value().vec().end());
  return make_op(Tensor(Shape{p + q, n}, std::move(data)), {a, b}, [p, q](const Var& self, const Var& g) {
    return std::vector<Var>{detail::needs(self, 0) ? slice_rows(g, 0, p) : Var(),
                            detail::needs(self, 1) ? slice_rows(g, p, q) : Var()};
  });
}

inline Var slice_rows(const Var& a, std::size_t start, std::size_t count) {
  detail::require_matrix(a.value(), "slice_rows");
  const std::size_t m = a.value().rows(), n = a.value().cols();
  if (start + count > m || count == 0) throw LayoutError("slice_rows: range out of bounds");
  auto first = a.value().vec().begin() + static_cast<std::ptrdiff_t>(start * n);
  Tensor out(Shape{count, n}, std::vector<double>(first, first + static_cast<std::ptrdiff_t>(count * n)));
  return make_op(std::move(out), {a}, [start, m](const Var&, const Var& g) {
    return std::vector<Var>{pad_rows(g, start, m)};
  });
}

/// Embeds a (c x n) block at row `start` of a zero (total x n) matrix.
inline Var pad_rows(const Var& a, std::size_t start, std::size_t total) {
  detail::require_matrix(a.value(), "pad_rows");
  const std::size_t c = a.value().rows(), n = a.value().cols();
  if (start + c > total) throw LayoutError("pad_rows: block exceeds target");
  Tensor out(Shape{total, n});
  std::copy(a.value().vec().begin(), a.value().vec().end(), out.vec().begin() + static_cast<std::ptrdiff_t>(start * n));
  return make_op(std::move(out), {a}, [start, c](const Var&, const Var& g) {
    return std::vector<Var>{slice_rows(g, start, c)};
  });
}

// ---------------------------------------------------------------------------
// Differentiation

/// Gradients of the scalar `y` with respect to each of `wrt`. With
/// `create_graph` the returned gradients are themselves differentiable.
/// Inputs that `y` does not depend on receive zeros.
inline std::vector<Var> grad(const Var& y, std::span<const Var> wrt, bool create_graph = false) {
  if (y.value().numel() != 1) throw LayoutError("grad: output must be a scalar, got " + shape_str(y.shape()));

  std::vector<Var> result;
  result.reserve(wrt.size());
  if (!y.requires_grad()) {
    for (const auto& w : wrt) result.push_back(constant(Tensor(w.shape())));
    return result;
  }

  // Post-order DFS over nodes that require gradients.
  std::vector<Node*> order;
  std::unordered_map<Node*, std::shared_ptr<Node>> owners;
  {
    std::unordered_set<Node*> visited;
    std::vector<std::pair<Node*, std::size_t>> stack;
    stack.emplace_back(y.node().get(), 0);
    visited.insert(y.node().get());
    owners.emplace(y.node().get(), y.node());
    while (!stack.empty()) {
      auto& [node, next] = stack.back();
      if (next < node->inputs.size()) {
        const auto& in = node->inputs[next++];
        Node* child = in.node().get();
        if (in.requires_grad() && visited.insert(child).second) {
          owners.emplace(child, in.node());
          stack.emplace_back(child, 0);
        }
      } else {
        order.push_back(node);
        stack.pop_back();
      }
    }
  }

  GradModeGuard mode(create_graph);
  std::unordered_map<Node*, Var> grads;
  grads.emplace(y.node().get(), constant(Tensor(y.shape(), 1.0)));

  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    Node* node = *it;
    auto found = grads.find(node);
    if (found == grads.end() || !node->backward) continue;
    const Var g = found->second;
    const Var self(owners.at(node));
    auto input_grads = node->backward(self, g);
    for (std::size_t i = 0; i < node->inputs.size(); ++i) {
      const auto& in = node->inputs[i];
      if (!in.requires_grad() || !input_grads[i].defined()) continue;
      Node* key = in.node().get();
      auto slot = grads.find(key);
      if (slot == grads.end()) grads.emplace(key, input_grads[i]);
      else slot->second = add(slot->second, input_grads[i]);
    }
  }

  for (const auto& w : wrt) {
    auto found = grads.find(w.node().get());
    if (found != grads.end()) result.push_back(found->second);
    else result.push_back(constant(Tensor(w.shape())));
  }
  return result;
}

}  // namespace bissl::ad
