#pragma once

// Dense ground truth for the hypergradient machinery: closed-form quadratic
// bilevel solutions, explicit inverses, and stationarity diagnostics. Only
// Eigen factorizations are used here, never the CG path under test.

#include <cmath>
#include <cstdint>
#include <string>

#include <Eigen/Dense>

#include "bissl/autodiff.hpp"
#include "bissl/errors.hpp"
#include "bissl/hypergrad.hpp"
#include "bissl/objective.hpp"
#include "bissl/params.hpp"
#include "bissl/rng.hpp"

namespace bissl::oracle {

using Eigen::MatrixXd;
using Eigen::VectorXd;

inline constexpr std::size_t kMaxDenseDim = 200;

inline VectorXd to_eigen(const ParamVector& v) {
  return Eigen::Map<const VectorXd>(v.values().data(), static_cast<Eigen::Index>(v.size()));
}

inline ParamVector from_eigen(const std::shared_ptr<const ParamLayout>& layout, const VectorXd& v) {
  return ParamVector(layout, std::vector<double>(v.data(), v.data() + v.size()));
}

namespace detail {
inline void require_dim(Eigen::Index d) {
  if (static_cast<std::size_t>(d) > kMaxDenseDim) {
    throw ConfigError("dense oracle: dimension " + std::to_string(d) + " exceeds " + std::to_string(kMaxDenseDim));
  }
}

/// Solves M x = rhs with full-pivot LU, raising on numerical singularity.
inline MatrixXd solve(const MatrixXd& m, const MatrixXd& rhs, const char* what) {
  require_dim(m.rows());
  Eigen::FullPivLU<MatrixXd> lu(m);
  lu.setThreshold(1e-13);
  if (!lu.isInvertible()) throw SingularMatrixError(std::string(what) + ": matrix is singular");
  return lu.solve(rhs);
}
}  // namespace detail

/// A = Q^T D Q with Q Haar-orthogonal and eigenvalues log-uniform in [lo, hi].
inline MatrixXd random_spd(std::size_t d, Rng& rng, double lo = 0.1, double hi = 10.0) {
  MatrixXd g(d, d);
  for (Eigen::Index i = 0; i < g.rows(); ++i)
    for (Eigen::Index j = 0; j < g.cols(); ++j) g(i, j) = rng.normal();
  Eigen::HouseholderQR<MatrixXd> qr(g);
  MatrixXd q = qr.householderQ();
  VectorXd eig(d);
  for (auto& e : eig) e = rng.log_uniform(lo, hi);
  MatrixXd a = q.transpose() * eig.asDiagonal() * q;
  return 0.5 * (a + a.transpose());
}

inline VectorXd random_vector(std::size_t d, Rng& rng) {
  VectorXd v(d);
  for (auto& x : v) x = rng.normal();
  return v;
}

/// 1/2 theta^T A theta + b^T theta as a single-block objective named "theta".
inline Objective quadratic_objective(const MatrixXd& a, const VectorXd& b) {
  const auto d = static_cast<std::size_t>(a.rows());
  auto layout = make_layout(ParamLayout::packed({{"theta", Shape{d}}}));
  Tensor at(Shape{d, d});
  for (std::size_t i = 0; i < d; ++i)
    for (std::size_t j = 0; j < d; ++j) at(i, j) = a(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j));
  auto av = ad::constant(std::move(at));
  auto bv = ad::constant(Tensor(Shape{d, 1}, std::vector<double>(b.data(), b.data() + b.size())));
  return Objective(layout, [av, bv, d](std::span<const ad::Var> p, std::span<const ad::Var>) {
    auto col = ad::reshape(p[0], Shape{d, 1});
    auto quad = ad::scale(ad::sum(ad::mul(col, ad::matmul(av, col))), 0.5);
    return ad::add(quad, ad::sum(ad::mul(bv, col)));
  });
}

/// 1/2 (theta - c)^T C (theta - c).
inline Objective quadratic_target_objective(const MatrixXd& c_mat, const VectorXd& c) {
  const VectorXd b = -c_mat * c;
  auto base = quadratic_objective(c_mat, b);
  const double offset = 0.5 * c.dot(c_mat * c);
  return Objective(base.layout_ptr(), [base, offset](std::span<const ad::Var> p, std::span<const ad::Var> a) {
    return ad::add_scalar(base.build(p, a), offset);
  });
}

/// Unique stationary point of 1/2 t^T A t + b^T t + lambda/2 ||theta_D - t||^2:
/// (A + lambda I)^{-1} (lambda theta_D - b).
inline VectorXd quadratic_lower_solution(const MatrixXd& a, const VectorXd& b, const VectorXd& theta_d, double lambda) {
  const MatrixXd m = a + lambda * MatrixXd::Identity(a.rows(), a.cols());
  return detail::solve(m, lambda * theta_d - b, "quadratic_lower_solution");
}

/// [A / lambda + I]^{-1}
inline MatrixXd exact_ij_dense(const MatrixXd& a, double lambda) {
  if (!(lambda > 0.0)) throw ConfigError("exact_ij_dense: lambda must be positive");
  const MatrixXd id = MatrixXd::Identity(a.rows(), a.cols());
  return detail::solve(a / lambda + id, id, "exact_ij_dense");
}

/// Upper gradient for quadratic levels, L^P = 1/2 t^T A t + b^T t and
/// L^D = 1/2 (t - c)^T C (t - c):
/// [A/lambda + I]^{-1} grad L^D(theta_P*) + grad L^D(theta_D).
inline VectorXd dense_upper_gradient(const MatrixXd& a, const VectorXd& b, const MatrixXd& c_mat, const VectorXd& c,
                                     const VectorXd& theta_d, double lambda) {
  const VectorXd theta_p = quadratic_lower_solution(a, b, theta_d, lambda);
  const VectorXd g_p = c_mat * (theta_p - c);
  const VectorXd g_d = c_mat * (theta_d - c);
  const MatrixXd id = MatrixXd::Identity(a.rows(), a.cols());
  return detail::solve(a / lambda + id, g_p, "dense_upper_gradient") + g_d;
}

/// Dense Hessian of obj at params, one Hessian-vector product per column.
inline MatrixXd dense_hessian(const Objective& obj, const ParamVector& params, const ParamVector* aux = nullptr) {
  detail::require_dim(static_cast<Eigen::Index>(params.size()));
  GradientGraph graph(obj, params, aux);
  const auto d = static_cast<Eigen::Index>(params.size());
  MatrixXd h(d, d);
  ParamVector e = ParamVector::zeros_like(params);
  for (Eigen::Index j = 0; j < d; ++j) {
    e[static_cast<std::size_t>(j)] = 1.0;
    h.col(j) = to_eigen(graph.hvp(e));
    e[static_cast<std::size_t>(j)] = 0.0;
  }
  return h;
}

struct NewtonResult {
  ParamVector params;
  double grad_norm = 0.0;
  int iterations = 0;
};

/// Damped Newton with backtracking on a smooth, strongly convex objective.
inline NewtonResult newton_minimize(const Objective& obj, ParamVector params, const ParamVector* aux, double grad_tol,
                                    int max_iterations = 100) {
  NewtonResult res;
  for (res.iterations = 0; res.iterations < max_iterations; ++res.iterations) {
    const ParamVector g = grad(obj, params, aux);
    res.grad_norm = norm(g);
    if (res.grad_norm <= grad_tol) break;
    const MatrixXd h = dense_hessian(obj, params, aux);
    const VectorXd step = h.ldlt().solve(to_eigen(g));
    const double f0 = eval_loss(obj, params, aux);
    const double slope = to_eigen(g).dot(step);
    double t = 1.0;
    ParamVector trial = params;
    for (int k = 0; k < 60; ++k) {
      trial = params - t * from_eigen(params.layout_ptr(), step);
      if (eval_loss(obj, trial, aux) <= f0 - 1e-4 * t * slope) break;
      t *= 0.5;
    }
    if (trial == params) break;
    params = trial;
  }
  res.params = std::move(params);
  return res;
}

struct StationaryPairReport {
  ParamVector theta_d_star;
  double upper_residual = 0.0;  // ||grad L^D(theta_bar)||
  double lower_residual = 0.0;  // ||grad L^P(theta_bar) + lambda (theta_bar - theta_D*)||
  bool pass = false;
};

/// Given theta_bar stationary for L^D, builds the downstream backbone that makes
/// (theta_D*, theta_P* = theta_bar) stationary for the bilevel problem with
/// l2 coupling and no direct downstream term: the lower condition
/// grad L^P(theta_P) + lambda (theta_P - theta_D) = 0 fixes
/// theta_D* = theta_bar + grad L^P(theta_bar) / lambda, and the upper gradient
/// is the implicit Jacobian applied to grad L^D(theta_bar) = 0.
inline StationaryPairReport stationary_pair_check(const Objective& downstream, const ParamVector* downstream_aux,
                                     const Objective& pretext, const ParamVector* pretext_aux,
                                     const ParamVector& theta_bar, double lambda, double tol) {
  if (!(lambda > 0.0)) throw ConfigError("stationary_pair_check: lambda must be positive");
  const ParamVector gp = grad(pretext, theta_bar, pretext_aux);
  StationaryPairReport r;
  r.theta_d_star = theta_bar + (1.0 / lambda) * gp;
  r.upper_residual = norm(grad(downstream, theta_bar, downstream_aux));
  ParamVector lower = gp;
  lower.axpy(lambda, theta_bar - r.theta_d_star);
  r.lower_residual = norm(lower);
  r.pass = r.upper_residual <= tol && r.lower_residual <= tol;
  return r;
}

/// ||grad_theta L^P(theta_P, phi_P) + lambda (theta_P - theta_D)||
inline double stationarity_residual(const Objective& pretext, const ParamVector& theta_d, const ParamVector& theta_p,
                                    const ParamVector& phi_p, double lambda) {
  ParamVector g = grad(pretext, theta_p, &phi_p);
  g.axpy(lambda, theta_p - theta_d);
  return norm(g);
}

}  // namespace bissl::oracle
