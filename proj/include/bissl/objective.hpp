#pragma once

#include <cmath>
#include <functional>
#include <memory>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "bissl/autodiff.hpp"
#include "bissl/errors.hpp"
#include "bissl/params.hpp"

namespace bissl {

/// A twice-differentiable scalar function of a parameter vector, optionally
/// coupled with a second (auxiliary) parameter vector. Data batches are bound
/// into the builder when the objective is constructed.
class Objective {
 public:
  enum class Arity { single, coupled_pair };
  using Fn = std::function<ad::Var(std::span<const ad::Var> params, std::span<const ad::Var> aux)>;

  Objective(std::shared_ptr<const ParamLayout> layout, Fn fn)
      : layout_(std::move(layout)), aux_layout_(std::make_shared<const ParamLayout>()), fn_(std::move(fn)),
        arity_(Arity::single) {}

  Objective(std::shared_ptr<const ParamLayout> layout, std::shared_ptr<const ParamLayout> aux_layout, Fn fn)
      : layout_(std::move(layout)), aux_layout_(std::move(aux_layout)), fn_(std::move(fn)),
        arity_(Arity::coupled_pair) {}

  Arity arity() const { return arity_; }
  const ParamLayout& layout() const { return *layout_; }
  const ParamLayout& aux_layout() const { return *aux_layout_; }
  const std::shared_ptr<const ParamLayout>& layout_ptr() const { return layout_; }
  const std::shared_ptr<const ParamLayout>& aux_layout_ptr() const { return aux_layout_; }

  ad::Var build(std::span<const ad::Var> params, std::span<const ad::Var> aux) const { return fn_(params, aux); }

  void check(const ParamVector& params, const ParamVector* aux) const {
    if (params.layout() != *layout_) throw LayoutError("objective: parameter layout does not match the model");
    if (arity_ == Arity::coupled_pair) {
      if (aux == nullptr) throw LayoutError("objective: coupled objective needs auxiliary parameters");
      if (aux->layout() != *aux_layout_) throw LayoutError("objective: auxiliary layout does not match the model");
    }
  }

 private:
  std::shared_ptr<const ParamLayout> layout_;
  std::shared_ptr<const ParamLayout> aux_layout_;
  Fn fn_;
  Arity arity_;
};

/// One graph leaf per segment, shaped like the segment.
inline std::vector<ad::Var> as_vars(const ParamVector& p, bool trainable) {
  std::vector<ad::Var> vars;
  vars.reserve(p.layout().num_segments());
  for (std::size_t i = 0; i < p.layout().num_segments(); ++i) {
    vars.push_back(trainable ? ad::parameter(p.segment_tensor(i)) : ad::constant(p.segment_tensor(i)));
  }
  return vars;
}

/// Packs per-segment tensors back into a flat vector, rejecting non-finite entries.
inline ParamVector pack(const std::shared_ptr<const ParamLayout>& layout, const std::vector<ad::Var>& parts) {
  ParamVector out(layout);
  for (std::size_t i = 0; i < parts.size(); ++i) {
    const auto& v = parts[i].value().vec();
    const auto& seg = layout->segment(i);
    if (v.size() != seg.size()) throw LayoutError("pack: segment '" + seg.name + "' size mismatch");
    for (std::size_t k = 0; k < v.size(); ++k) {
      if (!std::isfinite(v[k])) throw NumericalError("non-finite gradient in segment '" + seg.name + "'");
    }
    std::copy(v.begin(), v.end(), out.values().begin() + static_cast<std::ptrdiff_t>(seg.offset));
  }
  return out;
}

namespace detail {
inline const ParamVector& empty_aux() {
  static const ParamVector empty;
  return empty;
}

inline void check_loss(const ad::Var& loss) {
  if (loss.value().numel() != 1) throw LayoutError("objective must return a scalar");
  if (!std::isfinite(loss.item())) throw NumericalError("non-finite loss value");
}
}  // namespace detail

inline double eval_loss(const Objective& obj, const ParamVector& params, const ParamVector* aux = nullptr) {
  obj.check(params, aux);
  ad::GradModeGuard off(false);
  const auto p = as_vars(params, false);
  const auto a = as_vars(aux ? *aux : detail::empty_aux(), false);
  auto loss = obj.build(p, a);
  detail::check_loss(loss);
  return loss.item();
}

/// Gradient with respect to the primary parameters; auxiliary parameters are held fixed.
inline ParamVector grad(const Objective& obj, const ParamVector& params, const ParamVector* aux = nullptr) {
  obj.check(params, aux);
  ad::GradModeGuard on(true);
  const auto p = as_vars(params, true);
  const auto a = as_vars(aux ? *aux : detail::empty_aux(), false);
  auto loss = obj.build(p, a);
  detail::check_loss(loss);
  return pack(params.layout_ptr(), ad::grad(loss, p));
}

struct PairGradient {
  double loss = 0.0;
  ParamVector params;
  ParamVector aux;
};

/// Loss plus gradients with respect to both parameter blocks from one backward
/// pass. For a single-block objective the auxiliary gradient is empty.
inline PairGradient grad_pair(const Objective& obj, const ParamVector& params, const ParamVector& aux) {
  obj.check(params, &aux);
  ad::GradModeGuard on(true);
  auto vars = as_vars(params, true);
  const std::size_t np = vars.size();
  const bool coupled = obj.arity() == Objective::Arity::coupled_pair;
  auto avars = as_vars(coupled ? aux : detail::empty_aux(), true);
  auto loss = obj.build(std::span<const ad::Var>(vars), std::span<const ad::Var>(avars));
  detail::check_loss(loss);
  vars.insert(vars.end(), avars.begin(), avars.end());
  auto g = ad::grad(loss, vars);
  std::vector<ad::Var> gp(g.begin(), g.begin() + static_cast<std::ptrdiff_t>(np));
  std::vector<ad::Var> ga(g.begin() + static_cast<std::ptrdiff_t>(np), g.end());
  return {loss.item(), pack(params.layout_ptr(), gp),
          coupled ? pack(aux.layout_ptr(), ga) : ParamVector()};
}

/// First-order gradient graph of an objective at a fixed point, kept alive so
/// that repeated Hessian-vector products share one forward/backward build.
/// Each product differentiates <grad, v> (reverse-over-reverse).
class GradientGraph {
 public:
  GradientGraph(const Objective& obj, const ParamVector& params, const ParamVector* aux = nullptr)
      : layout_(params.layout_ptr()) {
    obj.check(params, aux);
    ad::GradModeGuard on(true);
    leaves_ = as_vars(params, true);
    const auto a = as_vars(aux ? *aux : detail::empty_aux(), false);
    loss_ = obj.build(leaves_, a);
    detail::check_loss(loss_);
    grads_ = ad::grad(loss_, leaves_, /*create_graph=*/true);
  }

  double loss() const { return loss_.item(); }
  ParamVector gradient() const { return pack(layout_, grads_); }

  /// Hessian times v. Segments where v is identically zero are skipped.
  ParamVector hvp(const ParamVector& v) const {
    if (v.layout() != *layout_) throw LayoutError("hvp: direction layout differs from parameters");
    ad::GradModeGuard on(true);
    ad::Var inner;
    for (std::size_t i = 0; i < leaves_.size(); ++i) {
      auto seg = v.segment(i);
      if (std::all_of(seg.begin(), seg.end(), [](double x) { return x == 0.0; })) continue;
      auto term = ad::dot(grads_[i], ad::constant(v.segment_tensor(i)));
      inner = inner.defined() ? ad::add(inner, term) : term;
    }
    if (!inner.defined()) return ParamVector(layout_);
    return pack(layout_, ad::grad(inner, leaves_));
  }

 private:
  std::shared_ptr<const ParamLayout> layout_;
  std::vector<ad::Var> leaves_;
  ad::Var loss_;
  std::vector<ad::Var> grads_;
};

/// Hessian (w.r.t. the primary parameters) times v.
inline ParamVector hvp(const Objective& obj, const ParamVector& params, const ParamVector* aux, const ParamVector& v) {
  return GradientGraph(obj, params, aux).hvp(v);
}

/// Central differences: entry i is (f(p + eps e_i) - f(p - eps e_i)) / (2 eps).
inline ParamVector finite_diff_grad(const Objective& obj, const ParamVector& params, const ParamVector* aux,
                                    double eps) {
  if (!(eps > 0.0)) throw ConfigError("finite_diff_grad: eps must be positive");
  ParamVector out = ParamVector::zeros_like(params);
  ParamVector probe = params;
  for (std::size_t i = 0; i < params.size(); ++i) {
    const double base = params[i];
    probe[i] = base + eps;
    const double up = eval_loss(obj, probe, aux);
    probe[i] = base - eps;
    const double down = eval_loss(obj, probe, aux);
    probe[i] = base;
    out[i] = (up - down) / (2.0 * eps);
  }
  return out;
}

}  // namespace bissl
