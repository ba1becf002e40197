#pragma once

// Oracle suite behind `bissl verify` and the acceptance gate. Every check
// compares the production path against an independent route: central finite
// differences, dense Eigen factorizations, or hand-derived arithmetic.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <functional>
#include <iomanip>
#include <sstream>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "bissl/batch_stack.hpp"
#include "bissl/hypergrad.hpp"
#include "bissl/losses.hpp"
#include "bissl/models.hpp"
#include "bissl/oracle.hpp"
#include "bissl/train.hpp"

namespace bissl::verify {

using Eigen::MatrixXd;
using Eigen::VectorXd;

struct CheckResult {
  std::string name;
  double value = 0.0;  // worst observed error
  double tolerance = 0.0;
  bool pass = false;
  double seconds = 0.0;
  std::string detail;
};

inline double rel_err(const ParamVector& a, const ParamVector& b) {
  return norm(a - b) / std::max(norm(b), 1e-300);
}

inline double rel_err(const VectorXd& a, const VectorXd& b) { return (a - b).norm() / std::max(b.norm(), 1e-300); }

namespace detail {

inline CheckResult finish(std::string name, double worst, double tol, std::chrono::steady_clock::time_point t0,
                          std::string detail = {}) {
  CheckResult r;
  r.name = std::move(name);
  r.value = worst;
  r.tolerance = tol;
  r.pass = std::isfinite(worst) && worst <= tol;
  r.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  r.detail = std::move(detail);
  return r;
}

inline Tensor random_matrix(std::size_t r, std::size_t c, Rng& rng) {
  Tensor t(Shape{r, c});
  for (auto& x : t.vec()) x = rng.normal();
  return t;
}

inline ParamVector random_like(const ParamVector& like, Rng& rng) {
  ParamVector v = ParamVector::zeros_like(like);
  for (auto& x : v.values()) x = rng.normal();
  return v;
}

/// Same function with the roles of parameters and auxiliary block exchanged,
/// so the auxiliary gradient can be checked with the same tools.
inline Objective swap_roles(const Objective& obj) {
  return Objective(obj.aux_layout_ptr(), obj.layout_ptr(),
                   [obj](std::span<const ad::Var> p, std::span<const ad::Var> a) { return obj.build(a, p); });
}

/// Smallest |pre-activation| over every ReLU the layer stack applies to x.
inline double min_abs_preactivation(const ParamVector& params, const Tensor& x) {
  double best = std::numeric_limits<double>::infinity();
  Tensor h = x;
  const std::size_t layers = params.layout().num_segments() / 2;
  for (std::size_t i = 0; i + 1 < layers; ++i) {
    Tensor z = kernels::matmul(h, params.segment_tensor(2 * i), false, false);
    const Tensor b = params.segment_tensor(2 * i + 1);
    for (std::size_t r = 0; r < z.rows(); ++r)
      for (std::size_t c = 0; c < z.cols(); ++c) z(r, c) += b[c];
    for (double v : z.vec()) best = std::min(best, std::abs(v));
    h = kernels::map(z, [](double v) { return v > 0 ? v : 0.0; });
  }
  return best;
}

}  // namespace detail

/// Model used by the derivative suite: small enough for per-coordinate finite
/// differences over every parameter.
inline ModelSpec check_spec() {
  ModelSpec s;
  s.input_dim = 6;
  s.hidden = {8};
  s.feature_dim = 5;
  s.pretext_head = {6, 4};
  s.output_dim = 3;
  return s;
}

/// One objective instance for the derivative suite.
struct DerivativeCase {
  Objective objective;
  ParamVector params;
  ParamVector aux;
};

struct DerivativeErrors {
  double grad = 0.0;      // parameters and auxiliary block, worst of the two
  double hvp = 0.0;
  double symmetry = 0.0;  // |u^T H v - v^T H u| / (1 + |u^T H v|)
};

inline DerivativeErrors derivative_errors(const DerivativeCase& c, Rng& rng, double fd_eps = 1e-6,
                                          double hvp_eps = 1e-5) {
  DerivativeErrors e;
  const auto* aux = c.aux.size() ? &c.aux : nullptr;
  auto g = grad_pair(c.objective, c.params, aux ? c.aux : ParamVector());
  e.grad = rel_err(g.params, finite_diff_grad(c.objective, c.params, aux, fd_eps));
  if (aux) {
    auto swapped = detail::swap_roles(c.objective);
    e.grad = std::max(e.grad, rel_err(g.aux, finite_diff_grad(swapped, c.aux, &c.params, fd_eps)));
  }
  GradientGraph graph(c.objective, c.params, aux);
  const auto u = detail::random_like(c.params, rng), v = detail::random_like(c.params, rng);
  const auto hv = graph.hvp(v), hu = graph.hvp(u);
  const auto gp = grad(c.objective, c.params + hvp_eps * v, aux);
  const auto gm = grad(c.objective, c.params - hvp_eps * v, aux);
  e.hvp = rel_err(hv, (1.0 / (2.0 * hvp_eps)) * (gp - gm));
  const double uhv = dot(u, hv);
  e.symmetry = std::abs(uhv - dot(v, hu)) / (1.0 + std::abs(uhv));
  return e;
}

/// Random instances of every shipped objective, drawn away from ReLU kinks so
/// finite differences see a smooth function.
inline std::vector<std::pair<std::string, std::function<DerivativeCase(Rng&)>>> shipped_objectives() {
  const ModelSpec spec = check_spec();
  auto model = [spec](Rng& rng, const Tensor& x) {
    for (;;) {
      auto m = flatten(init_model(spec, rng.next_u64()), spec);
      for (auto* v : {&m.theta, &m.phi_pretext, &m.phi_downstream})
        for (auto& w : v->values()) w += rng.normal(0.0, 0.1);
      if (detail::min_abs_preactivation(m.theta, x) < 1e-3) continue;
      if (detail::min_abs_preactivation(m.phi_pretext, forward_backbone(m.theta, x, spec)) < 1e-3) continue;
      return m;
    }
  };
  auto views = [spec](Rng& rng) {
    return ViewBatch{detail::random_matrix(6, spec.input_dim, rng), detail::random_matrix(6, spec.input_dim, rng)};
  };
  auto labeled = [spec](Rng& rng) {
    LabeledBatch b{detail::random_matrix(8, spec.input_dim, rng), {}};
    for (std::size_t i = 0; i < 8; ++i) b.labels.push_back(rng.below(spec.output_dim));
    return b;
  };
  using Case = std::function<DerivativeCase(Rng&)>;
  std::vector<std::pair<std::string, Case>> out;
  out.emplace_back("nt_xent", Case([=](Rng& rng) {
                     auto vb = views(rng);
                     auto m = model(rng, stack_views(vb));
                     return DerivativeCase{pretext_objective(spec, vb, 0.5), m.theta, m.phi_pretext};
                   }));
  out.emplace_back("cross_entropy", Case([=](Rng& rng) {
                     auto lb = labeled(rng);
                     auto m = model(rng, lb.inputs);
                     return DerivativeCase{downstream_objective(spec, lb), m.theta, m.phi_downstream};
                   }));
  out.emplace_back("lower_level", Case([=](Rng& rng) {
                     auto vb = views(rng);
                     auto m = model(rng, stack_views(vb));
                     auto anchor = m.theta;
                     for (auto& w : anchor.values()) w += rng.normal(0.0, 0.5);
                     auto obj = lower_level_objective(pretext_objective(spec, vb, 0.5), anchor, 0.3);
                     return DerivativeCase{obj, m.theta, m.phi_pretext};
                   }));
  out.emplace_back("weighted_sum", Case([=](Rng& rng) {
                     auto vb = views(rng);
                     auto lb = labeled(rng);
                     Tensor both(Shape{2 * vb.size() + lb.size(), spec.input_dim});
                     const Tensor sv = stack_views(vb);
                     std::copy(sv.vec().begin(), sv.vec().end(), both.vec().begin());
                     std::copy(lb.inputs.vec().begin(), lb.inputs.vec().end(),
                               both.vec().begin() + static_cast<std::ptrdiff_t>(sv.vec().size()));
                     auto m = model(rng, both);
                     auto obj = weighted_sum_objective(pretext_objective(spec, vb, 0.5),
                                                       downstream_objective(spec, lb), 0.25);
                     return DerivativeCase{obj, m.theta, concat(m.phi_pretext, m.phi_downstream)};
                   }));
  return out;
}

inline std::vector<CheckResult> check_derivatives(std::uint64_t seed, int instances = 10) {
  std::vector<CheckResult> out;
  Rng root(seed);
  for (const auto& [name, make] : shipped_objectives()) {
    const auto t0 = std::chrono::steady_clock::now();
    Rng rng = root.child(name);
    DerivativeErrors worst;
    for (int i = 0; i < instances; ++i) {
      const auto e = derivative_errors(make(rng), rng);
      worst.grad = std::max(worst.grad, e.grad);
      worst.hvp = std::max(worst.hvp, e.hvp);
      worst.symmetry = std::max(worst.symmetry, e.symmetry);
    }
    out.push_back(detail::finish(name + " grad vs finite differences", worst.grad, 1e-5, t0));
    out.push_back(detail::finish(name + " hvp vs gradient differences", worst.hvp, 1e-4, t0));
    out.push_back(detail::finish(name + " hvp symmetry", worst.symmetry, 1e-8, t0));
  }
  return out;
}

/// Layer-wise CG with N_c = d and no damping on a dense SPD system, against an
/// LDL^T solve.
inline CheckResult check_cg_exactness(std::uint64_t seed, int per_size = 10) {
  const auto t0 = std::chrono::steady_clock::now();
  Rng rng(seed);
  double worst = 0.0;
  for (std::size_t d : {5u, 20u, 50u}) {
    auto layout = make_layout(ParamLayout::packed({{"x", Shape{d}}}));
    for (int i = 0; i < per_size; ++i) {
      const MatrixXd a = oracle::random_spd(d, rng);
      const VectorXd b = oracle::random_vector(d, rng);
      LinearOperator apply = [&](const ParamVector& v) {
        return oracle::from_eigen(layout, a * oracle::to_eigen(v));
      };
      CGConfig cfg;
      cfg.iterations = static_cast<int>(d);
      cfg.damping = 0.0;
      cfg.fallback = CGFallback::none;
      auto [x, rep] = conjugate_gradient(apply, oracle::from_eigen(layout, b), cfg);
      worst = std::max(worst, rel_err(oracle::to_eigen(x), VectorXd(a.ldlt().solve(b))));
    }
  }
  return detail::finish("cg exactness d in {5,20,50}", worst, 1e-6, t0);
}

inline CGConfig exact_cg(std::size_t d) {
  CGConfig cfg;
  cfg.iterations = static_cast<int>(d);
  cfg.damping = 0.0;
  cfg.residual_tol = 0.0;
  return cfg;
}

/// Quadratic bilevel instance: L^P = 1/2 t^T A t + b^T t, L^D = 1/2 (t - c)^T C (t - c).
struct QuadraticBilevel {
  MatrixXd a, c_mat;
  VectorXd b, c;
  Objective pretext, downstream;

  QuadraticBilevel(MatrixXd a_, VectorXd b_, MatrixXd c_mat_, VectorXd c_)
      : a(std::move(a_)), c_mat(std::move(c_mat_)), b(std::move(b_)), c(std::move(c_)),
        pretext(oracle::quadratic_objective(a, b)), downstream(oracle::quadratic_target_objective(c_mat, c)) {}

  static QuadraticBilevel random(std::size_t d, Rng& rng) {
    MatrixXd a = oracle::random_spd(d, rng);
    VectorXd b = oracle::random_vector(d, rng);
    MatrixXd c_mat = oracle::random_spd(d, rng);
    VectorXd c = oracle::random_vector(d, rng);
    return QuadraticBilevel(std::move(a), std::move(b), std::move(c_mat), std::move(c));
  }
  ParamVector vec(const VectorXd& v) const { return oracle::from_eigen(pretext.layout_ptr(), v); }
};

inline CheckResult check_ij_equivalence(std::uint64_t seed, int instances = 10, std::size_t d = 10) {
  const auto t0 = std::chrono::steady_clock::now();
  Rng rng(seed);
  double worst = 0.0;
  for (int i = 0; i < instances; ++i) {
    auto q = QuadraticBilevel::random(d, rng);
    const VectorXd v = oracle::random_vector(d, rng);
    const VectorXd at = oracle::random_vector(d, rng);
    for (double lambda : {1e-3, 1.0, 1e3}) {
      auto [out, rep] = ij_vector(q.pretext, q.vec(at), ParamVector(), lambda, q.vec(v), exact_cg(d));
      worst = std::max(worst, rel_err(oracle::to_eigen(out), VectorXd(oracle::exact_ij_dense(q.a, lambda) * v)));
    }
  }
  return detail::finish("implicit jacobian vs dense inverse", worst, 1e-6, t0);
}

inline CheckResult check_upper_equivalence(std::uint64_t seed, int instances = 10, std::size_t d = 10) {
  const auto t0 = std::chrono::steady_clock::now();
  Rng rng(seed);
  double worst = 0.0;
  for (int i = 0; i < instances; ++i) {
    auto q = QuadraticBilevel::random(d, rng);
    const double lambda = std::pow(10.0, rng.uniform(-3.0, 3.0));
    const VectorXd theta_d = oracle::random_vector(d, rng);
    const VectorXd theta_p = oracle::quadratic_lower_solution(q.a, q.b, theta_d, lambda);
    auto g = upper_gradients(q.pretext, q.downstream, q.vec(theta_p), q.vec(theta_d), ParamVector(), ParamVector(),
                             lambda, exact_cg(d), false);
    const VectorXd dense = oracle::dense_upper_gradient(q.a, q.b, q.c_mat, q.c, theta_d, lambda);
    worst = std::max(worst, rel_err(oracle::to_eigen(g.theta), dense));
  }
  return detail::finish("upper gradient vs dense evaluation", worst, 1e-6, t0);
}

/// Large lambda: the implicit Jacobian tends to the identity. Small lambda: it
/// tends to lambda A^{-1}. Both on one fixed quadratic with exact CG.
inline std::vector<CheckResult> check_lambda_limits(std::uint64_t seed, std::size_t d = 10) {
  Rng rng(seed);
  auto q = QuadraticBilevel::random(d, rng);
  const VectorXd v = oracle::random_vector(d, rng);
  Eigen::SelfAdjointEigenSolver<MatrixXd> es(q.a);
  const double a_norm = es.eigenvalues().maxCoeff(), sigma_min = es.eigenvalues().minCoeff();
  const auto at = q.vec(VectorXd::Zero(static_cast<Eigen::Index>(d)));

  std::vector<CheckResult> out;
  auto t0 = std::chrono::steady_clock::now();
  auto [big, r1] = ij_vector(q.pretext, at, ParamVector(), 1e6 * a_norm, q.vec(v), exact_cg(d));
  out.push_back(detail::finish("large lambda: implicit jacobian -> identity", rel_err(oracle::to_eigen(big), v), 1e-3,
                               t0));

  t0 = std::chrono::steady_clock::now();
  const double lambda = 1e-4 * sigma_min;
  auto [small, r2] = ij_vector(q.pretext, at, ParamVector(), lambda, q.vec(v), exact_cg(d));
  const double ratio = norm(small) / (lambda * q.a.ldlt().solve(v).norm());
  std::ostringstream os;
  os << "norm ratio " << std::setprecision(6) << ratio;
  out.push_back(detail::finish("small lambda: norm scales with lambda", std::abs(ratio - 1.0), 0.05, t0, os.str()));
  return out;
}

/// Multinomial logistic regression with a small ridge (strongly convex) and a
/// contrastive loss through the same linear map.
struct LinearSoftmaxProblem {
  ModelSpec spec;
  LabeledBatch data;
  ViewBatch views;
  double ridge = 1e-3;

  static LinearSoftmaxProblem make(std::uint64_t seed, std::size_t n = 4, std::size_t k = 3,
                                   std::size_t samples = 24) {
    Rng rng(seed);
    LinearSoftmaxProblem p;
    p.spec.input_dim = n;
    p.spec.hidden = {};
    p.spec.feature_dim = k;
    p.spec.output_dim = k;
    p.data.inputs = detail::random_matrix(samples, n, rng);
    for (std::size_t i = 0; i < samples; ++i) {
      p.data.labels.push_back(rng.below(k));
      p.data.inputs(i, p.data.labels.back() % n) += 2.0;
    }
    p.views = {detail::random_matrix(6, n, rng), detail::random_matrix(6, n, rng)};
    return p;
  }

  Objective downstream() const {
    auto x = ad::constant(data.inputs);
    return Objective(backbone_layout(spec), [x, labels = data.labels, ridge = ridge](std::span<const ad::Var> t,
                                                                                     std::span<const ad::Var>) {
      auto penalty = ad::add(ad::sum(ad::square(t[0])), ad::sum(ad::square(t[1])));
      return ad::add(cross_entropy(mlp_forward(t, x), labels), ad::scale(penalty, 0.5 * ridge));
    });
  }

  Objective pretext() const {
    auto x = ad::constant(stack_views(views));
    return Objective(backbone_layout(spec), [x](std::span<const ad::Var> t, std::span<const ad::Var>) {
      return nt_xent_stacked(mlp_forward(t, x), 0.5);
    });
  }

  ParamVector init(std::uint64_t seed) const { return flatten(init_model(spec, seed), spec).theta; }
};

/// Fit the convex downstream model by Newton to ||grad|| <= 1e-9, then build
/// the stationary bilevel pair from it.
inline std::vector<CheckResult> check_stationary_pair(std::uint64_t seed) {
  const auto t0 = std::chrono::steady_clock::now();
  auto p = LinearSoftmaxProblem::make(seed);
  auto down = p.downstream();
  auto fit = oracle::newton_minimize(down, p.init(seed + 1), nullptr, 1e-10);
  std::vector<CheckResult> out;
  out.push_back(detail::finish("convex fit gradient norm", fit.grad_norm, 1e-9, t0));
  double worst = 0.0;
  for (double lambda : {1e-3, 1.0, 1e3}) {
    auto r = oracle::stationary_pair_check(down, nullptr, p.pretext(), nullptr, fit.params, lambda, 1e-8);
    worst = std::max({worst, r.upper_residual, r.lower_residual});
  }
  out.push_back(detail::finish("stationary pair residuals", worst, 1e-8, t0));
  return out;
}

/// One alternation on scalar quadratics (L^P = a t^2 / 2, L^D = b (t - c)^2 / 2)
/// with plain SGD, against arithmetic written out by hand.
inline CheckResult check_hand_unroll() {
  const auto t0 = std::chrono::steady_clock::now();
  const double a = 2.0, b = 3.0, c = 1.0, t_init = 0.5, lambda = 0.5, lr_lower = 0.1, lr_upper = 0.05;
  auto pretext = oracle::quadratic_objective(MatrixXd::Constant(1, 1, a), VectorXd::Zero(1));
  auto downstream = oracle::quadratic_target_objective(MatrixXd::Constant(1, 1, b), VectorXd::Constant(1, c));
  BilevelProblem problem{[&](const std::vector<std::size_t>&, Rng&) { return pretext; },
                         [&](const std::vector<std::size_t>&) { return downstream; }};
  BiSSLConfig cfg;
  cfg.alternations = 1;
  cfg.lower_steps = cfg.upper_steps = 1;
  cfg.lambda = lambda;
  cfg.cg = exact_cg(1);
  cfg.clip_threshold = 1e6;
  cfg.lower = {OptimizerKind::sgd, lr_lower, 0.0, 0.0, 0.001, ScheduleKind::constant, 0};
  cfg.upper = {OptimizerKind::sgd, lr_upper, 0.0, 0.0, 0.001, ScheduleKind::constant, 0};
  cfg.wall_clock = false;
  auto start = oracle::from_eigen(pretext.layout_ptr(), VectorXd::Constant(1, t_init));
  auto state = TrainState::start(start, ParamVector(), ParamVector(), BatchStack(1, 1, 0), BatchStack(1, 1, 0), Rng(0));
  bissl_run(cfg, state, problem);

  const double theta_p = t_init - lr_lower * a * t_init;  // coupling gradient is zero at the shared start
  const double v = b * (theta_p - c);
  const double theta_d = t_init - lr_upper * (v / (1.0 + a / lambda) + b * (t_init - c));
  const double err = std::max(std::abs(state.theta_p[0] - theta_p), std::abs(state.theta_d[0] - theta_d));
  return detail::finish("one alternation vs hand arithmetic", err, 1e-12, t0);
}

/// 100 batches per pass, 20 per draw: reshuffles before draws 6, 11, 16, ...
inline CheckResult check_batch_stack() {
  const auto t0 = std::chrono::steady_clock::now();
  BatchStack s(400, 4, 0);
  for (int i = 0; i < 50; ++i) s.next(20);
  std::vector<std::size_t> expected;
  for (std::size_t d = 6; d <= 50; d += 5) expected.push_back(d);
  const bool ok = s.reshuffle_draws() == expected;
  std::ostringstream os;
  for (auto d : s.reshuffle_draws()) os << d << ' ';
  return detail::finish("batch stack reshuffle draws", ok ? 0.0 : 1.0, 0.0, t0, os.str());
}

inline std::vector<CheckResult> check_clipping(std::uint64_t seed, int trials = 1000, double threshold = 10.0) {
  const auto t0 = std::chrono::steady_clock::now();
  Rng rng(seed);
  double over = 0.0, angle = 0.0;
  for (int i = 0; i < trials; ++i) {
    const std::size_t d = 1 + rng.below(64);
    auto layout = make_layout(ParamLayout::packed({{"g", Shape{d}}}));
    ParamVector g(layout);
    const double scale = rng.log_uniform(1e-3, 1e3);
    for (auto& x : g.values()) x = scale * rng.normal();
    const auto clipped = clip_by_norm(g, threshold);
    over = std::max(over, norm(clipped) - threshold);
    const double n = norm(g) * norm(clipped);
    if (n > 0.0) angle = std::max(angle, 1.0 - dot(g, clipped) / n);
  }
  return {detail::finish("clipped norm excess", std::max(over, 0.0), 1e-12, t0),
          detail::finish("clipped direction 1 - cosine", angle, 1e-12, t0)};
}

inline std::vector<CheckResult> run_all(std::uint64_t seed) {
  std::vector<CheckResult> out;
  auto add = [&](std::vector<CheckResult> rs) { out.insert(out.end(), rs.begin(), rs.end()); };
  add(check_derivatives(seed));
  out.push_back(check_cg_exactness(seed + 1));
  out.push_back(check_ij_equivalence(seed + 2));
  out.push_back(check_upper_equivalence(seed + 3));
  add(check_lambda_limits(seed + 4));
  add(check_stationary_pair(seed + 5));
  out.push_back(check_hand_unroll());
  out.push_back(check_batch_stack());
  add(check_clipping(seed + 6));
  return out;
}

inline bool all_passed(const std::vector<CheckResult>& rs) {
  return std::all_of(rs.begin(), rs.end(), [](const CheckResult& r) { return r.pass; });
}

inline std::string format_table(const std::vector<CheckResult>& rs) {
  std::size_t width = 5;
  for (const auto& r : rs) width = std::max(width, r.name.size());
  std::ostringstream os;
  os << std::left << std::setw(static_cast<int>(width)) << "check" << "  result  " << std::setw(12) << "value"
     << std::setw(12) << "tolerance" << "seconds\n";
  for (const auto& r : rs) {
    os << std::left << std::setw(static_cast<int>(width)) << r.name << "  " << (r.pass ? "PASS  " : "FAIL  ") << "  "
       << std::setw(12) << std::setprecision(3) << std::scientific << r.value << std::setw(12) << r.tolerance
       << std::fixed << std::setprecision(2) << r.seconds << std::defaultfloat;
    if (!r.detail.empty()) os << "  " << r.detail;
    os << '\n';
  }
  return os.str();
}

}  // namespace bissl::verify
