#pragma once

#include <algorithm>
#include <cmath>
#include <limits>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include "bissl/autodiff.hpp"
#include "bissl/errors.hpp"
#include "bissl/models.hpp"
#include "bissl/objective.hpp"
#include "bissl/params.hpp"

namespace bissl {

/// Two augmented views of the same B samples; row i of each view is a positive pair.
struct ViewBatch {
  Tensor view_a;
  Tensor view_b;

  std::size_t size() const { return view_a.rows(); }
  void validate() const {
    if (view_a.rank() != 2 || view_a.shape() != view_b.shape()) {
      throw LayoutError("view batch: views must be equal-shape matrices, got " + shape_str(view_a.shape()) + " and " +
                        shape_str(view_b.shape()));
    }
  }
};

struct LabeledBatch {
  Tensor inputs;
  std::vector<std::size_t> labels;

  std::size_t size() const { return labels.size(); }
  void validate(std::size_t num_classes) const {
    if (inputs.rank() != 2 || inputs.rows() != labels.size()) {
      throw LayoutError("labeled batch: " + std::to_string(labels.size()) + " labels for inputs " +
                        shape_str(inputs.shape()));
    }
    for (auto y : labels) {
      if (y >= num_classes) throw LayoutError("labeled batch: label " + std::to_string(y) + " out of range");
    }
  }
};

namespace detail {
/// Row-wise max as a constant; used to stabilize log-sum-exp without
/// contributing to derivatives (the shift cancels exactly).
inline Tensor row_max(const Tensor& a, const Tensor* mask) {
  const std::size_t m = a.rows(), n = a.cols();
  Tensor out(Shape{m});
  for (std::size_t i = 0; i < m; ++i) {
    double best = -std::numeric_limits<double>::infinity();
    for (std::size_t j = 0; j < n; ++j) {
      if (mask && (*mask)(i, j) == 0.0) continue;
      best = std::max(best, a(i, j));
    }
    out[i] = best;
  }
  return out;
}

/// log sum_j mask_ij exp(a_ij), per row.
inline ad::Var masked_logsumexp(const ad::Var& a, const Tensor* mask) {
  const std::size_t n = a.value().cols();
  Tensor shift = row_max(a.value(), mask);
  auto shift_var = ad::constant(shift);
  auto e = ad::exp(ad::sub(a, ad::broadcast_cols(shift_var, n)));
  if (mask) e = ad::mul(e, ad::constant(*mask));
  return ad::add(ad::log(ad::sum_cols(e)), shift_var);
}
}  // namespace detail

/// Contrastive loss over stacked views: rows i and i+B of `z` form a positive
/// pair, every other row is a negative. Cosine similarity scaled by 1/tau;
/// the anchor itself is excluded from the denominator. Mean over all 2B anchors.
inline ad::Var nt_xent_stacked(const ad::Var& z, double temperature) {
  if (!(temperature > 0.0)) throw ConfigError("nt_xent: temperature must be positive");
  const auto& zv = z.value();
  if (zv.rank() != 2 || zv.rows() % 2 != 0) throw LayoutError("nt_xent: expected an even number of stacked rows");
  const std::size_t n = zv.rows(), d = zv.cols(), b = n / 2;
  for (std::size_t i = 0; i < n; ++i) {
    double s = 0.0;
    for (std::size_t j = 0; j < d; ++j) s += zv(i, j) * zv(i, j);
    if (s == 0.0) throw DegenerateEmbeddingError("nt_xent: embedding row " + std::to_string(i) + " has zero norm");
  }
  auto inv_norm = ad::recip(ad::sqrt(ad::sum_cols(ad::square(z))));
  auto zn = ad::mul(z, ad::broadcast_cols(inv_norm, d));
  auto sim = ad::scale(ad::matmul(zn, zn, false, true), 1.0 / temperature);

  Tensor off_diag(Shape{n, n}, 1.0);
  for (std::size_t i = 0; i < n; ++i) off_diag(i, i) = 0.0;
  std::vector<std::size_t> partner(n);
  for (std::size_t i = 0; i < n; ++i) partner[i] = i < b ? i + b : i - b;

  auto lse = detail::masked_logsumexp(sim, &off_diag);
  auto positive = ad::gather_cols(sim, std::move(partner));
  return ad::mean(ad::sub(lse, positive));
}

inline ad::Var nt_xent(const ad::Var& a, const ad::Var& b, double temperature) {
  if (a.shape() != b.shape()) throw LayoutError("nt_xent: embeddings must have equal shapes");
  return nt_xent_stacked(ad::concat_rows(a, b), temperature);
}

inline double nt_xent(const Tensor& a, const Tensor& b, double temperature) {
  ad::GradModeGuard off(false);
  return nt_xent(ad::constant(a), ad::constant(b), temperature).item();
}

/// Mean negative log-softmax of the true class.
inline ad::Var cross_entropy(const ad::Var& logits, const std::vector<std::size_t>& labels) {
  const auto& lv = logits.value();
  if (lv.rank() != 2 || lv.rows() != labels.size()) throw LayoutError("cross_entropy: logits/labels mismatch");
  for (auto y : labels) {
    if (y >= lv.cols()) throw LayoutError("cross_entropy: label out of range");
  }
  auto lse = detail::masked_logsumexp(logits, nullptr);
  return ad::mean(ad::sub(lse, ad::gather_cols(logits, labels)));
}

inline double cross_entropy(const Tensor& logits, const std::vector<std::size_t>& labels) {
  ad::GradModeGuard off(false);
  return cross_entropy(ad::constant(logits), labels).item();
}

/// 1/2 sum_i ||a_i - b_i||^2 over matching segment leaves.
inline ad::Var l2_coupling(std::span<const ad::Var> a, std::span<const ad::Var> b) {
  if (a.size() != b.size() || a.empty()) throw LayoutError("l2_coupling: segment count mismatch");
  ad::Var total;
  for (std::size_t i = 0; i < a.size(); ++i) {
    auto term = ad::sum(ad::square(ad::sub(a[i], b[i])));
    total = total.defined() ? ad::add(total, term) : term;
  }
  return ad::scale(total, 0.5);
}

inline double l2_coupling(const ParamVector& a, const ParamVector& b) {
  a.require_same_layout(b, "l2_coupling");
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    const double d = a[i] - b[i];
    s += d * d;
  }
  return 0.5 * s;
}

inline Tensor stack_views(const ViewBatch& batch) {
  batch.validate();
  std::vector<double> data = batch.view_a.vec();
  data.insert(data.end(), batch.view_b.vec().begin(), batch.view_b.vec().end());
  return Tensor(Shape{2 * batch.view_a.rows(), batch.view_a.cols()}, std::move(data));
}

/// Pretext loss as a function of (backbone, pretext head).
inline Objective pretext_objective(const ModelSpec& spec, const ViewBatch& batch, double temperature) {
  auto x = ad::constant(stack_views(batch));
  const Norm norm = spec.norm;
  return Objective(backbone_layout(spec), head_layout(spec, Head::pretext),
                   [x, temperature, norm](std::span<const ad::Var> theta, std::span<const ad::Var> phi) {
                     auto features = mlp_forward(theta, x, norm);
                     return nt_xent_stacked(mlp_forward(phi, features, norm), temperature);
                   });
}

/// Downstream loss as a function of (backbone, downstream head).
inline Objective downstream_objective(const ModelSpec& spec, const LabeledBatch& batch) {
  batch.validate(spec.output_dim);
  auto x = ad::constant(batch.inputs);
  const Norm norm = spec.norm;
  return Objective(backbone_layout(spec), head_layout(spec, Head::downstream),
                   [x, labels = batch.labels, norm](std::span<const ad::Var> theta, std::span<const ad::Var> phi) {
                     return cross_entropy(mlp_forward(phi, mlp_forward(theta, x, norm), norm), labels);
                   });
}

/// G(theta_P) = L^P(theta_P, phi_P) + lambda * 1/2 ||theta_D - theta_P||^2, with the
/// anchor theta_D held fixed.
inline Objective lower_level_objective(const Objective& pretext, const ParamVector& anchor, double lambda) {
  if (lambda < 0.0) throw ConfigError("lower objective: lambda must be non-negative");
  if (anchor.layout() != pretext.layout()) throw LayoutError("lower objective: anchor layout differs from parameters");
  auto anchor_vars = std::make_shared<const std::vector<ad::Var>>(as_vars(anchor, false));
  auto fn = [pretext, anchor_vars, lambda](std::span<const ad::Var> theta, std::span<const ad::Var> phi) {
    auto loss = pretext.build(theta, phi);
    if (lambda == 0.0) return loss;
    return ad::add(loss, ad::scale(l2_coupling(theta, *anchor_vars), lambda));
  };
  if (pretext.arity() == Objective::Arity::single) return Objective(pretext.layout_ptr(), fn);
  return Objective(pretext.layout_ptr(), pretext.aux_layout_ptr(), fn);
}

inline double lower_objective(const Objective& pretext, const ParamVector& theta_p, const ParamVector& phi_p,
                              const ParamVector& theta_d, double lambda) {
  return eval_loss(lower_level_objective(pretext, theta_d, lambda), theta_p, &phi_p);
}

/// Concatenation of two layouts; segment names keep their prefixes.
inline std::shared_ptr<const ParamLayout> concat_layouts(const ParamLayout& a, const ParamLayout& b) {
  std::vector<std::pair<std::string, Shape>> blocks;
  for (const auto& s : a.segments()) blocks.push_back({s.name, s.shape});
  for (const auto& s : b.segments()) blocks.push_back({s.name, s.shape});
  return make_layout(ParamLayout::packed(blocks));
}

inline ParamVector concat(const ParamVector& a, const ParamVector& b) {
  std::vector<double> v = a.values();
  v.insert(v.end(), b.values().begin(), b.values().end());
  return ParamVector(concat_layouts(a.layout(), b.layout()), std::move(v));
}

/// (1 - w) L^P(theta, phi_P) + w L^D(theta, phi_D), each term on its own batch.
/// The auxiliary vector is phi_P followed by phi_D (see `concat`).
inline Objective weighted_sum_objective(const Objective& pretext, const Objective& downstream, double w) {
  if (w < 0.0 || w > 1.0) throw ConfigError("weighted sum: w must lie in [0, 1]");
  if (pretext.layout() != downstream.layout()) throw LayoutError("weighted sum: backbone layouts differ");
  const std::size_t np = pretext.aux_layout().num_segments();
  return Objective(pretext.layout_ptr(), concat_layouts(pretext.aux_layout(), downstream.aux_layout()),
                   [pretext, downstream, w, np](std::span<const ad::Var> theta, std::span<const ad::Var> heads) {
                     auto lp = pretext.build(theta, heads.first(np));
                     auto ld = downstream.build(theta, heads.subspan(np));
                     return ad::add(ad::scale(lp, 1.0 - w), ad::scale(ld, w));
                   });
}

}  // namespace bissl
