#include <gtest/gtest.h>

#include <cmath>

#include "bissl/oracle.hpp"
#include "bissl/verify.hpp"
#include "quadratic_fixtures.hpp"
#include "test_util.hpp"

using namespace bissl;
using namespace bissl::oracle;
using testutil::QuadraticInstance;

namespace {
MatrixXd scalar_matrix(double a) { return MatrixXd::Constant(1, 1, a); }
VectorXd scalar_vector(double a) { return VectorXd::Constant(1, a); }
}  // namespace

TEST(QuadraticLowerSolution, PureCouplingReturnsAnchor) {
  Rng rng(1);
  VectorXd theta_d = random_vector(5, rng);
  auto sol = quadratic_lower_solution(MatrixXd::Zero(5, 5), VectorXd::Zero(5), theta_d, 0.7);
  EXPECT_LE((sol - theta_d).norm(), 1e-15);
}

TEST(QuadraticLowerSolution, DominantCouplingApproachesAnchor) {
  Rng rng(2);
  MatrixXd a = random_spd(5, rng);
  VectorXd theta_d = random_vector(5, rng);
  auto sol = quadratic_lower_solution(a, VectorXd::Zero(5), theta_d, 1e9);
  EXPECT_LE((sol - theta_d).norm() / theta_d.norm(), 1e-7);
}

TEST(QuadraticLowerSolution, ScalarCase) {
  auto sol = quadratic_lower_solution(scalar_matrix(2), scalar_vector(1), scalar_vector(0), 1.0);
  EXPECT_NEAR(sol(0), -1.0 / 3.0, 1e-15);
}

TEST(QuadraticLowerSolution, SingularSystemRaises) {
  EXPECT_THROW(quadratic_lower_solution(scalar_matrix(-1), scalar_vector(0), scalar_vector(0), 1.0),
               SingularMatrixError);
}

TEST(ExactIjDense, ZeroHessianGivesIdentity) {
  EXPECT_LE((exact_ij_dense(MatrixXd::Zero(4, 4), 0.1) - MatrixXd::Identity(4, 4)).norm(), 1e-15);
}

TEST(ExactIjDense, UnitCase) { EXPECT_DOUBLE_EQ(exact_ij_dense(scalar_matrix(1), 1.0)(0, 0), 0.5); }

TEST(ExactIjDense, MultipliesBackToIdentity) {
  Rng rng(3);
  MatrixXd a = random_spd(20, rng);
  for (double lambda : {1e-2, 1.0, 1e2}) {
    MatrixXd ij = exact_ij_dense(a, lambda);
    EXPECT_LE((ij * (a / lambda + MatrixXd::Identity(20, 20)) - MatrixXd::Identity(20, 20)).cwiseAbs().maxCoeff(),
              1e-10);
  }
}

TEST(ExactIjDense, RejectsOversizedInputs) {
  EXPECT_THROW(exact_ij_dense(MatrixXd::Zero(201, 201), 1.0), ConfigError);
}

TEST(RandomSpd, EigenvaluesInRange) {
  Rng rng(4);
  MatrixXd a = random_spd(12, rng);
  Eigen::SelfAdjointEigenSolver<MatrixXd> es(a);
  EXPECT_GE(es.eigenvalues().minCoeff(), 0.1 - 1e-10);
  EXPECT_LE(es.eigenvalues().maxCoeff(), 10.0 + 1e-10);
}

TEST(DenseUpperGradient, ZeroDownstreamCurvatureGivesZero) {
  Rng rng(5);
  MatrixXd a = random_spd(4, rng);
  auto g = dense_upper_gradient(a, random_vector(4, rng), MatrixXd::Zero(4, 4), random_vector(4, rng),
                                random_vector(4, rng), 0.5);
  EXPECT_EQ(g.norm(), 0.0);
}

TEST(DenseUpperGradient, LargeLambdaSumsBothGradients) {
  Rng rng(6);
  MatrixXd a = random_spd(4, rng), c_mat = random_spd(4, rng);
  VectorXd b = random_vector(4, rng), c = random_vector(4, rng), theta_d = random_vector(4, rng);
  auto g = dense_upper_gradient(a, b, c_mat, c, theta_d, 1e10);
  VectorXd expected = 2.0 * c_mat * (theta_d - c);
  EXPECT_LE(testutil::rel_err(g, expected), 1e-8);
}

TEST(DenseUpperGradient, ScalarWorkedCase) {
  auto g = dense_upper_gradient(scalar_matrix(2), scalar_vector(0), scalar_matrix(1), scalar_vector(1),
                                scalar_vector(0), 1.0);
  EXPECT_NEAR(g(0), -4.0 / 3.0, 1e-15);
}

TEST(StationaryPair, ConstantPretextLeavesAnchorUnchanged) {
  auto layout = make_layout(ParamLayout::packed({{"theta", Shape{2}}}));
  Objective flat(layout, [](std::span<const ad::Var>, std::span<const ad::Var>) {
    return ad::constant(Tensor::scalar(0.0));
  });
  auto q = QuadraticInstance(MatrixXd::Identity(2, 2), VectorXd::Zero(2), MatrixXd::Identity(2, 2),
                             VectorXd::Constant(2, 1.0));
  auto theta_bar = ParamVector(layout, {1.0, 1.0});
  auto r = stationary_pair_check(q.downstream, nullptr, flat, nullptr, theta_bar, 0.3, 1e-12);
  EXPECT_EQ(r.theta_d_star, theta_bar);
  EXPECT_EQ(r.lower_residual, 0.0);
  EXPECT_TRUE(r.pass);
}

TEST(StationaryPair, LowerResidualVanishesForAnyPoint) {
  Rng rng(7);
  auto q = QuadraticInstance::random(6, rng);
  for (double lambda : {1e-3, 0.1, 10.0}) {
    auto theta = q.vec(random_vector(6, rng));
    auto r = stationary_pair_check(q.downstream, nullptr, q.pretext, nullptr, theta, lambda, 1e-8);
    EXPECT_LE(r.lower_residual, 1e-10 * std::max(1.0, norm(grad(q.pretext, theta))));
  }
}

TEST(StationaryPair, ScalarWorkedCase) {
  // L^D = 1/2 (t - 3)^2, L^P = 1/2 t^2, lambda = 2, theta_bar = 3.
  QuadraticInstance q(scalar_matrix(1), scalar_vector(0), scalar_matrix(1), scalar_vector(3));
  auto r = stationary_pair_check(q.downstream, nullptr, q.pretext, nullptr, flat_vector("theta", {3.0}), 2.0, 1e-12);
  EXPECT_DOUBLE_EQ(r.theta_d_star[0], 4.5);
  EXPECT_LE(r.upper_residual, 1e-12);
  EXPECT_LE(r.lower_residual, 1e-12);
  EXPECT_TRUE(r.pass);
}

TEST(StationaryPair, MinusSignConstructionIsNotStationary) {
  // theta_D = theta_bar - grad L^P / lambda leaves a lower residual of 2 ||grad L^P||.
  QuadraticInstance q(scalar_matrix(1), scalar_vector(0), scalar_matrix(1), scalar_vector(3));
  auto theta_bar = flat_vector("theta", {3.0});
  auto minus = flat_vector("theta", {3.0 - 3.0 / 2.0});
  EXPECT_DOUBLE_EQ(stationarity_residual(q.pretext, minus, theta_bar, ParamVector(), 2.0), 6.0);
}

TEST(StationaryPair, HoldsAfterFittingLinearSoftmax) {
  auto p = verify::LinearSoftmaxProblem::make(8);
  auto down = p.downstream();
  auto fit = newton_minimize(down, p.init(1), nullptr, 1e-10);
  ASSERT_LE(fit.grad_norm, 1e-9);
  for (double lambda : {1e-3, 1.0}) {
    auto r = stationary_pair_check(down, nullptr, p.pretext(), nullptr, fit.params, lambda, 1e-8);
    EXPECT_TRUE(r.pass) << "upper " << r.upper_residual << " lower " << r.lower_residual;
  }
}

TEST(StationarityResidual, ZeroAtClosedFormLowerSolution) {
  Rng rng(9);
  auto q = QuadraticInstance::random(5, rng);
  VectorXd theta_d = random_vector(5, rng);
  const double lambda = 0.4;
  VectorXd theta_p = quadratic_lower_solution(q.a, q.b, theta_d, lambda);
  EXPECT_LE(stationarity_residual(q.pretext, q.vec(theta_d), q.vec(theta_p), ParamVector(), lambda), 1e-10);
}

TEST(StationarityResidual, ZeroLambdaAtPretextMinimum) {
  Rng rng(10);
  auto q = QuadraticInstance::random(5, rng);
  VectorXd minimum = -q.a.ldlt().solve(q.b);
  EXPECT_LE(stationarity_residual(q.pretext, q.vec(random_vector(5, rng)), q.vec(minimum), ParamVector(), 0.0), 1e-10);
}

TEST(StationarityResidual, EqualsLowerGradientNorm) {
  auto spec = testutil::small_spec();
  Rng rng(11);
  auto m = testutil::random_model(spec, rng);
  auto theta_d = testutil::random_model(spec, rng).theta;
  auto pre = pretext_objective(spec, testutil::random_views(5, spec.input_dim, rng), 0.5);
  auto g = lower_gradients(pre, m.theta, m.phi_pretext, theta_d, 0.01);
  EXPECT_NEAR(stationarity_residual(pre, theta_d, m.theta, m.phi_pretext, 0.01), norm(g.theta), 1e-12);
}

TEST(DenseHessian, MatchesQuadraticMatrix) {
  Rng rng(12);
  auto q = QuadraticInstance::random(7, rng);
  auto h = dense_hessian(q.pretext, q.vec(random_vector(7, rng)));
  EXPECT_LE((h - q.a).cwiseAbs().maxCoeff(), 1e-12);
}

// Cross-checks of the CG-based path against the dense oracles.
TEST(OracleAgreement, IjVectorMatchesDenseInverse) {
  Rng rng(13);
  for (int t = 0; t < 10; ++t) {
    auto q = QuadraticInstance::random(10, rng);
    auto v = random_vector(10, rng);
    for (double lambda : {1e-3, 1.0, 1e3}) {
      auto [out, rep] = ij_vector(q.pretext, q.vec(random_vector(10, rng)), ParamVector(), lambda, q.vec(v),
                                  testutil::exact_cg(10));
      EXPECT_LE(testutil::rel_err(to_eigen(out), exact_ij_dense(q.a, lambda) * v), 1e-6) << "lambda " << lambda;
    }
  }
}

TEST(OracleAgreement, UpperGradientMatchesDenseEvaluation) {
  Rng rng(14);
  for (int t = 0; t < 10; ++t) {
    auto q = QuadraticInstance::random(10, rng);
    const double lambda = std::pow(10.0, rng.uniform(-3, 3));
    VectorXd theta_d = random_vector(10, rng);
    VectorXd theta_p = quadratic_lower_solution(q.a, q.b, theta_d, lambda);
    auto g = upper_gradients(q.pretext, q.downstream, q.vec(theta_p), q.vec(theta_d), ParamVector(), ParamVector(),
                             lambda, testutil::exact_cg(10), false);
    EXPECT_LE(testutil::rel_err(to_eigen(g.theta), dense_upper_gradient(q.a, q.b, q.c_mat, q.c, theta_d, lambda)),
              1e-6);
  }
}

TEST(VerifySuite, EveryCheckPasses) {
  auto rows = verify::run_all(2024);
  for (const auto& r : rows) EXPECT_TRUE(r.pass) << r.name << ": " << r.value << " > " << r.tolerance;
  EXPECT_TRUE(verify::all_passed(rows));
  const auto table = verify::format_table(rows);
  EXPECT_NE(table.find("PASS"), std::string::npos);
  EXPECT_EQ(table.find("FAIL"), std::string::npos);
}

TEST(VerifySuite, DetectsAWrongGradient) {
  // A deliberately broken gradient: the loss is t^2 but the graph reports 3t^2 derivatives.
  auto layout = make_layout(ParamLayout::packed({{"t", Shape{3}}}));
  Objective broken(layout, [](std::span<const ad::Var> p, std::span<const ad::Var>) {
    auto detached = ad::constant(p[0].value());
    return ad::add(ad::sum(ad::square(p[0])), ad::sum(ad::mul(ad::sub(p[0], detached), ad::scale(p[0], 2.0))));
  });
  Rng rng(1);
  verify::DerivativeCase c{broken, ParamVector(layout, {0.3, -1.0, 2.0}), ParamVector()};
  EXPECT_GT(verify::derivative_errors(c, rng).grad, 0.1);
}
