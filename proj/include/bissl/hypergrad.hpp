#pragma once

#include <cmath>
#include <cstddef>
#include <functional>
#include <string>
#include <utility>

#include "bissl/errors.hpp"
#include "bissl/losses.hpp"
#include "bissl/objective.hpp"
#include "bissl/params.hpp"

namespace bissl {

enum class CGFallback {
  identity,  // return v for the offending segment
  none,      // keep the CG iterate
};

struct CGConfig {
  int iterations = 5;
  double damping = 10.0;
  double residual_tol = 0.0;
  CGFallback fallback = CGFallback::identity;

  void validate() const {
    if (iterations < 1) throw ConfigError("cg: iterations must be >= 1");
    if (damping < 0.0) throw ConfigError("cg: damping must be non-negative");
    if (residual_tol < 0.0) throw ConfigError("cg: residual_tol must be non-negative");
  }
};

/// Residuals are root-sum-of-squares over segments. `cg_final_residual` is the
/// residual of the CG iterate, before any fallback replaced it.
struct HypergradReport {
  double cg_initial_residual = 0.0;
  double cg_final_residual = 0.0;
  bool fell_back = false;
  std::size_t segments_fell_back = 0;
  std::size_t iterations = 0;  // total across segments
  double ij_vector_norm = 0.0;
};

using LinearOperator = std::function<ParamVector(const ParamVector&)>;

struct LowerGradients {
  ParamVector theta;
  ParamVector phi;
  double loss = 0.0;      // pretext loss alone
  double coupling = 0.0;  // lambda/2 ||theta_P - theta_D||^2
};

/// Gradients of the lower objective: the pretext gradient plus the coupling
/// pull lambda (theta_P - theta_D) for the backbone, the plain pretext gradient
/// for the head.
inline LowerGradients lower_gradients(const Objective& pretext, const ParamVector& theta_p, const ParamVector& phi_p,
                                      const ParamVector& theta_d, double lambda) {
  theta_p.require_same_layout(theta_d, "lower_gradients");
  auto g = grad_pair(pretext, theta_p, phi_p);
  ParamVector g_theta = std::move(g.params);
  if (lambda != 0.0) {
    for (std::size_t i = 0; i < g_theta.size(); ++i) g_theta[i] += lambda * (theta_p[i] - theta_d[i]);
  }
  return {std::move(g_theta), std::move(g.aux), g.loss, lambda * l2_coupling(theta_p, theta_d)};
}

/// v -> v + H v / (lambda + damping), H the backbone Hessian of the pretext
/// loss at (theta_P, phi_P). The first-order gradient graph is built once and
/// shared by every application.
class DampedHessianOperator {
 public:
  DampedHessianOperator(const Objective& pretext, const ParamVector& theta_p, const ParamVector& phi_p, double lambda,
                        double damping)
      : graph_(pretext, theta_p, &phi_p) {
    if (!(lambda + damping > 0.0)) throw ConfigError("damped operator: lambda + damping must be positive");
    scale_ = 1.0 / (lambda + damping);
  }

  ParamVector operator()(const ParamVector& v) const {
    ParamVector out = graph_.hvp(v);
    out *= scale_;
    out += v;
    return out;
  }

 private:
  GradientGraph graph_;
  double scale_ = 0.0;
};

namespace detail {
struct SegmentSolve {
  double initial = 0.0;
  double final = 0.0;
  int iterations = 0;
  bool fell_back = false;
};

/// CG on one segment. Each new direction is A-conjugated against every stored
/// direction rather than only the previous one; the iterates equal textbook CG
/// in exact arithmetic, but N_c = dim reaches the exact solution in floating
/// point too. Storage is at most N_c directions per segment.
inline SegmentSolve cg_segment(const LinearOperator& apply, const ParamVector& v, std::size_t seg, const CGConfig& cfg,
                               ParamVector& x_out) {
  using span = std::span<const double>;
  const auto vs = v.segment(seg);
  const std::size_t n = vs.size();
  std::vector<double> x(n, 0.0), r(vs.begin(), vs.end()), p = r;
  std::vector<std::vector<double>> dirs, adirs;
  std::vector<double> curv;
  double rs = dot(span(r), span(r));
  SegmentSolve s;
  s.initial = std::sqrt(rs);
  const double stop = cfg.residual_tol * s.initial;
  bool indefinite = false;

  ParamVector probe = ParamVector::zeros_like(v);
  for (int it = 0; it < cfg.iterations; ++it) {
    if (rs == 0.0 || std::sqrt(rs) <= stop) break;
    auto ps = probe.segment(seg);
    std::copy(p.begin(), p.end(), ps.begin());
    const ParamVector ap_full = apply(probe);
    const auto ap = ap_full.segment(seg);
    const double pap = dot(span(p), ap);
    ++s.iterations;
    if (!(pap > 0.0) || !std::isfinite(pap)) {
      indefinite = true;
      break;
    }
    const double alpha = dot(span(p), span(r)) / pap;
    for (std::size_t i = 0; i < n; ++i) {
      x[i] += alpha * p[i];
      r[i] -= alpha * ap[i];
    }
    rs = dot(span(r), span(r));
    if (it + 1 == cfg.iterations) break;
    dirs.push_back(p);
    adirs.emplace_back(ap.begin(), ap.end());
    curv.push_back(pap);
    p = r;
    for (std::size_t j = 0; j < dirs.size(); ++j) {
      const double beta = dot(span(r), span(adirs[j])) / curv[j];
      for (std::size_t i = 0; i < n; ++i) p[i] -= beta * dirs[j][i];
    }
  }
  s.final = std::sqrt(rs);

  auto out = x_out.segment(seg);
  const bool bad = indefinite || !std::isfinite(s.final) || s.final > s.initial;
  if (bad && cfg.fallback == CGFallback::identity) {
    s.fell_back = true;
    std::copy(vs.begin(), vs.end(), out.begin());
  } else {
    std::copy(x.begin(), x.end(), out.begin());
  }
  return s;
}
}  // namespace detail

/// Approximates A^{-1} v by conjugate gradient, run independently on each
/// layout segment (cross-segment blocks of A are ignored). Starts from zero;
/// stops after cfg.iterations or once ||r_s|| <= residual_tol * ||v_s||.
/// A segment whose residual grows, or whose curvature p^T A p is not positive,
/// falls back to x_s = v_s.
inline std::pair<ParamVector, HypergradReport> conjugate_gradient(const LinearOperator& apply, const ParamVector& v,
                                                                  const CGConfig& cfg) {
  cfg.validate();
  ParamVector x = ParamVector::zeros_like(v);
  HypergradReport rep;
  double init2 = 0.0, fin2 = 0.0;
  for (std::size_t s = 0; s < v.layout().num_segments(); ++s) {
    auto res = detail::cg_segment(apply, v, s, cfg, x);
    init2 += res.initial * res.initial;
    fin2 += res.final * res.final;
    rep.iterations += static_cast<std::size_t>(res.iterations);
    if (res.fell_back) {
      rep.fell_back = true;
      ++rep.segments_fell_back;
    }
  }
  rep.cg_initial_residual = std::sqrt(init2);
  rep.cg_final_residual = std::sqrt(fin2);
  rep.ij_vector_norm = norm(x);
  return {std::move(x), rep};
}

/// [I + H/(lambda + damping)]^{-1} v. With damping 0 this is the implicit
/// Jacobian (transposed) applied to v for the l2 coupling.
inline std::pair<ParamVector, HypergradReport> ij_vector(const Objective& pretext, const ParamVector& theta_p,
                                                         const ParamVector& phi_p, double lambda, const ParamVector& v,
                                                         const CGConfig& cfg) {
  theta_p.require_same_layout(v, "ij_vector");
  DampedHessianOperator op(pretext, theta_p, phi_p, lambda, cfg.damping);
  return conjugate_gradient([&op](const ParamVector& d) { return op(d); }, v, cfg);
}

struct UpperGradients {
  ParamVector theta;
  ParamVector phi;
  double loss = 0.0;  // L^D(theta_P, phi_D) + L^D(theta_D, phi_D)
  HypergradReport report;
};

/// Upper-level gradients. The head receives the downstream head gradient at
/// both backbones; the downstream backbone receives the implicit-Jacobian
/// correction of the downstream gradient at theta_P plus the plain gradient
/// at theta_D. With `discard_ij` the correction term is dropped entirely.
inline UpperGradients upper_gradients(const Objective& pretext, const Objective& downstream, const ParamVector& theta_p,
                                      const ParamVector& theta_d, const ParamVector& phi_p, const ParamVector& phi_d,
                                      double lambda, const CGConfig& cfg, bool discard_ij) {
  theta_p.require_same_layout(theta_d, "upper_gradients");
  auto at_p = grad_pair(downstream, theta_p, phi_d);
  auto at_d = grad_pair(downstream, theta_d, phi_d);

  UpperGradients out;
  out.loss = at_p.loss + at_d.loss;
  out.phi = std::move(at_p.aux);
  if (!out.phi.empty()) out.phi += at_d.aux;

  if (discard_ij) {
    out.theta = std::move(at_d.params);
    return out;
  }
  auto [v_ij, rep] = ij_vector(pretext, theta_p, phi_p, lambda, at_p.params, cfg);
  out.report = rep;
  out.theta = std::move(v_ij);
  out.theta += at_d.params;
  return out;
}

/// Rescales g onto the ball of radius `threshold` when it lies outside.
inline ParamVector clip_by_norm(ParamVector g, double threshold) {
  if (!(threshold > 0.0)) throw ConfigError("clip_by_norm: threshold must be positive");
  const double n = norm(g);
  if (n > threshold) g *= threshold / n;
  return g;
}

}  // namespace bissl
