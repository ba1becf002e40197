#include <gtest/gtest.h>

#include <cmath>

#include "bissl/hypergrad.hpp"
#include "quadratic_fixtures.hpp"
#include "test_util.hpp"

using namespace bissl;
using testutil::QuadraticInstance;

namespace {

LinearOperator matrix_operator(const Eigen::MatrixXd& m, std::shared_ptr<const ParamLayout> layout) {
  return [m, layout](const ParamVector& v) { return oracle::from_eigen(layout, m * oracle::to_eigen(v)); };
}

QuadraticInstance diag_instance(std::vector<double> diag) {
  const auto d = static_cast<Eigen::Index>(diag.size());
  Eigen::VectorXd dv = Eigen::Map<Eigen::VectorXd>(diag.data(), d);
  return QuadraticInstance(dv.asDiagonal(), Eigen::VectorXd::Zero(d), Eigen::MatrixXd::Identity(d, d),
                           Eigen::VectorXd::Zero(d));
}

}  // namespace

TEST(LowerGradients, QuadraticWithCoupling) {
  auto q = diag_instance({2, 3});
  auto theta_p = flat_vector("theta", {1, 1}), theta_d = flat_vector("theta", {0, 0});
  auto g = lower_gradients(q.pretext, theta_p, ParamVector(), theta_d, 1.0);
  EXPECT_EQ(g.theta.values(), (std::vector<double>{3, 4}));
  EXPECT_DOUBLE_EQ(g.coupling, 1.0);
}

TEST(LowerGradients, ZeroLambdaGivesPretextGradient) {
  auto spec = testutil::small_spec();
  Rng rng(1);
  auto m = testutil::random_model(spec, rng);
  auto other = testutil::random_model(spec, rng);
  auto obj = pretext_objective(spec, testutil::random_views(4, spec.input_dim, rng), 0.5);
  auto g = lower_gradients(obj, m.theta, m.phi_pretext, other.theta, 0.0);
  EXPECT_EQ(g.theta, grad(obj, m.theta, &m.phi_pretext));
  EXPECT_EQ(g.phi, grad_pair(obj, m.theta, m.phi_pretext).aux);
}

TEST(LowerGradients, CouplingVanishesWhenBackbonesAgree) {
  auto spec = testutil::small_spec();
  Rng rng(2);
  auto m = testutil::random_model(spec, rng);
  auto obj = pretext_objective(spec, testutil::random_views(4, spec.input_dim, rng), 0.5);
  auto g = lower_gradients(obj, m.theta, m.phi_pretext, m.theta, 0.7);
  EXPECT_EQ(g.theta, grad(obj, m.theta, &m.phi_pretext));
  EXPECT_EQ(g.coupling, 0.0);
}

TEST(DampedOperator, ConstantLossIsIdentity) {
  auto layout = make_layout(ParamLayout::packed({{"theta", Shape{3}}}));
  Objective flat(layout, [](std::span<const ad::Var>, std::span<const ad::Var>) {
    return ad::constant(Tensor::scalar(1.0));
  });
  DampedHessianOperator op(flat, ParamVector(layout), ParamVector(), 0.5, 0.5);
  auto v = ParamVector(layout, {1, -2, 3});
  EXPECT_EQ(op(v), v);
}

TEST(DampedOperator, UnitHessian) {
  auto q = diag_instance({1, 1});
  DampedHessianOperator op(q.pretext, flat_vector("theta", {0.3, -0.1}), ParamVector(), 0.25, 0.75);
  EXPECT_EQ(op(flat_vector("theta", {2, 2})).values(), (std::vector<double>{4, 4}));
}

TEST(DampedOperator, RejectsNonPositiveShift) {
  auto q = diag_instance({1, 1});
  EXPECT_THROW(DampedHessianOperator(q.pretext, flat_vector("theta", {0, 0}), ParamVector(), 0.0, 0.0), ConfigError);
}

TEST(DampedOperator, SymmetricOnModel) {
  auto spec = testutil::small_spec();
  Rng rng(3);
  auto m = testutil::random_model(spec, rng);
  auto obj = pretext_objective(spec, testutil::random_views(6, spec.input_dim, rng), 0.5);
  DampedHessianOperator op(obj, m.theta, m.phi_pretext, 0.001, 10.0);
  for (int t = 0; t < 5; ++t) {
    auto u = testutil::random_vector(m.theta.layout_ptr(), rng);
    auto v = testutil::random_vector(m.theta.layout_ptr(), rng);
    EXPECT_LE(std::abs(dot(u, op(v)) - dot(v, op(u))), 1e-8);
  }
}

TEST(ConjugateGradient, IdentityConvergesInOneIteration) {
  auto v = flat_vector("x", {1, -2, 5});
  CGConfig cfg;
  auto [x, rep] = conjugate_gradient([](const ParamVector& p) { return p; }, v, cfg);
  EXPECT_EQ(x, v);
  EXPECT_EQ(rep.iterations, 1u);
  EXPECT_EQ(rep.cg_final_residual, 0.0);
  EXPECT_FALSE(rep.fell_back);
}

TEST(ConjugateGradient, ScalarSystem) {
  auto v = flat_vector("x", {6});
  auto [x, rep] = conjugate_gradient([](const ParamVector& p) { return 2.0 * p; }, v, CGConfig{});
  EXPECT_DOUBLE_EQ(x[0], 3.0);
}

TEST(ConjugateGradient, RandomSpdMatchesDenseSolve) {
  Rng rng(4);
  for (int t = 0; t < 5; ++t) {
    auto a = oracle::random_spd(10, rng);
    auto layout = make_layout(ParamLayout::packed({{"x", Shape{10}}}));
    auto v = oracle::from_eigen(layout, oracle::random_vector(10, rng));
    auto [x, rep] = conjugate_gradient(matrix_operator(a, layout), v, testutil::exact_cg(10));
    Eigen::VectorXd ref = a.ldlt().solve(oracle::to_eigen(v));
    EXPECT_LE(testutil::rel_err(oracle::to_eigen(x), ref), 1e-6);
  }
}

TEST(ConjugateGradient, ExactOnAnySizeUpToFifty) {
  Rng rng(5);
  for (std::size_t d : {1u, 2u, 7u, 33u, 50u}) {
    auto a = oracle::random_spd(d, rng);
    auto layout = make_layout(ParamLayout::packed({{"x", Shape{d}}}));
    auto v = oracle::from_eigen(layout, oracle::random_vector(d, rng));
    auto [x, rep] = conjugate_gradient(matrix_operator(a, layout), v, testutil::exact_cg(d));
    EXPECT_LE(testutil::rel_err(oracle::to_eigen(x), a.ldlt().solve(oracle::to_eigen(v))), 1e-6) << "d=" << d;
  }
}

TEST(ConjugateGradient, ToleranceStopsEarly) {
  Rng rng(6);
  auto a = oracle::random_spd(30, rng, 0.5, 2.0);
  auto layout = make_layout(ParamLayout::packed({{"x", Shape{30}}}));
  auto v = oracle::from_eigen(layout, oracle::random_vector(30, rng));
  CGConfig cfg = testutil::exact_cg(30);
  cfg.residual_tol = 1e-3;
  auto [x, rep] = conjugate_gradient(matrix_operator(a, layout), v, cfg);
  EXPECT_LT(rep.iterations, 30u);
  EXPECT_LE(rep.cg_final_residual, 1e-3 * rep.cg_initial_residual);
}

TEST(ConjugateGradient, SolvesEachSegmentIndependently) {
  // Block operator with cross-segment coupling; the layer-wise solve must ignore it.
  Rng rng(7);
  auto layout = make_layout(ParamLayout::packed({{"first", Shape{3}}, {"second", Shape{4}}}));
  Eigen::MatrixXd a = oracle::random_spd(7, rng);
  auto v = oracle::from_eigen(layout, oracle::random_vector(7, rng));
  auto [x, rep] = conjugate_gradient(matrix_operator(a, layout), v, testutil::exact_cg(7));
  Eigen::VectorXd vv = oracle::to_eigen(v), ref(7);
  ref.head(3) = a.topLeftCorner(3, 3).ldlt().solve(vv.head(3));
  ref.tail(4) = a.bottomRightCorner(4, 4).ldlt().solve(vv.tail(4));
  EXPECT_LE(testutil::rel_err(oracle::to_eigen(x), ref), 1e-9);
}

TEST(ConjugateGradient, NegativeCurvatureFallsBackToInput) {
  auto v = flat_vector("x", {1, 2});
  auto [x, rep] = conjugate_gradient([](const ParamVector& p) { return -1.0 * p; }, v, CGConfig{});
  EXPECT_TRUE(rep.fell_back);
  EXPECT_EQ(x, v);
}

TEST(ConjugateGradient, ResidualGrowthFallsBackPerSegment) {
  // Indefinite but with positive curvature along v: one CG step overshoots and
  // the residual grows. The well-posed segment keeps its solution.
  auto layout = make_layout(ParamLayout::packed({{"bad", Shape{2}}, {"good", Shape{1}}}));
  Eigen::MatrixXd a = Eigen::MatrixXd::Zero(3, 3);
  a(0, 0) = 10.0;
  a(1, 1) = -9.0;
  a(2, 2) = 4.0;
  auto v = ParamVector(layout, {1, 1, 8});
  CGConfig cfg;
  cfg.iterations = 1;
  auto [x, rep] = conjugate_gradient(matrix_operator(a, layout), v, cfg);
  EXPECT_TRUE(rep.fell_back);
  EXPECT_EQ(rep.segments_fell_back, 1u);
  EXPECT_EQ(x[0], 1.0);
  EXPECT_EQ(x[1], 1.0);
  EXPECT_DOUBLE_EQ(x[2], 2.0);
}

TEST(ConjugateGradient, FallbackCanBeDisabled) {
  auto v = flat_vector("x", {1, 2});
  CGConfig cfg;
  cfg.fallback = CGFallback::none;
  auto [x, rep] = conjugate_gradient([](const ParamVector& p) { return -1.0 * p; }, v, cfg);
  EXPECT_FALSE(rep.fell_back);
  EXPECT_EQ(x.values(), (std::vector<double>{0, 0}));
}

TEST(IjVector, LargeLambdaApproachesIdentity) {
  Rng rng(8);
  auto q = QuadraticInstance::random(8, rng);
  const double lambda = 1e6 * q.a.norm();
  auto v = q.vec(oracle::random_vector(8, rng));
  auto [out, rep] = ij_vector(q.pretext, q.vec(Eigen::VectorXd::Zero(8)), ParamVector(), lambda, v,
                              testutil::exact_cg(8));
  EXPECT_LE(testutil::rel_err(out, v), 1e-3);
}

TEST(IjVector, SmallLambdaScalesLinearly) {
  Rng rng(9);
  auto q = QuadraticInstance::random(6, rng);
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(q.a);
  const double sigma_min = es.eigenvalues().minCoeff();
  auto v = q.vec(oracle::random_vector(6, rng));
  for (double factor : {1e-4, 1e-3}) {
    const double lambda = factor * sigma_min;
    auto [out, rep] = ij_vector(q.pretext, q.vec(Eigen::VectorXd::Zero(6)), ParamVector(), lambda, v,
                                testutil::exact_cg(6));
    const double expected = lambda * q.a.ldlt().solve(oracle::to_eigen(v)).norm();
    EXPECT_NEAR(norm(out) / expected, 1.0, 0.05) << "lambda factor " << factor;
  }
}

TEST(IjVector, DampedOperatorMatchesDenseInverse) {
  Rng rng(10);
  for (double damping : {0.0, 0.5, 10.0}) {
    auto q = QuadraticInstance::random(7, rng);
    const double lambda = 0.3;
    auto v = q.vec(oracle::random_vector(7, rng));
    CGConfig cfg = testutil::exact_cg(7);
    cfg.damping = damping;
    auto [out, rep] = ij_vector(q.pretext, q.vec(Eigen::VectorXd::Zero(7)), ParamVector(), lambda, v, cfg);
    Eigen::MatrixXd m = Eigen::MatrixXd::Identity(7, 7) + q.a / (lambda + damping);
    EXPECT_LE(testutil::rel_err(oracle::to_eigen(out), m.ldlt().solve(oracle::to_eigen(v))), 1e-6);
  }
}

TEST(IjVector, DistanceFromInputShrinksAsLambdaGrows) {
  Rng rng(11);
  auto q = QuadraticInstance::random(6, rng);
  auto v = q.vec(oracle::random_vector(6, rng));
  double previous = std::numeric_limits<double>::infinity();
  for (double lambda : {1e-2, 1.0, 1e2, 1e4, 1e6}) {
    auto [out, rep] = ij_vector(q.pretext, q.vec(Eigen::VectorXd::Zero(6)), ParamVector(), lambda, v,
                                testutil::exact_cg(6));
    const double dist = norm(out - v);
    EXPECT_LE(dist, previous);
    previous = dist;
  }
}

TEST(UpperGradients, ZeroDownstreamGradients) {
  auto spec = testutil::small_spec();
  Rng rng(12);
  auto m = testutil::random_model(spec, rng);
  auto pre = pretext_objective(spec, testutil::random_views(4, spec.input_dim, rng), 0.5);
  auto layout_d = head_layout(spec, Head::downstream);
  Objective flat(backbone_layout(spec), layout_d, [](std::span<const ad::Var> t, std::span<const ad::Var>) {
    return ad::scale(ad::sum(t[0]), 0.0);
  });
  auto g = upper_gradients(pre, flat, m.theta, m.theta, m.phi_pretext, m.phi_downstream, 0.001, CGConfig{}, false);
  for (double x : g.theta.values()) EXPECT_EQ(x, 0.0);
  for (double x : g.phi.values()) EXPECT_EQ(x, 0.0);
}

TEST(UpperGradients, DiscardingIjGivesPlainDownstreamGradient) {
  auto spec = testutil::small_spec();
  Rng rng(13);
  auto m = testutil::random_model(spec, rng);
  auto theta_p = testutil::random_model(spec, rng).theta;
  auto pre = pretext_objective(spec, testutil::random_views(4, spec.input_dim, rng), 0.5);
  auto down = downstream_objective(spec, testutil::random_labeled(6, spec.input_dim, spec.output_dim, rng));
  auto g = upper_gradients(pre, down, theta_p, m.theta, m.phi_pretext, m.phi_downstream, 0.001, CGConfig{}, true);
  EXPECT_EQ(g.theta, grad(down, m.theta, &m.phi_downstream));
  auto full = upper_gradients(pre, down, theta_p, m.theta, m.phi_pretext, m.phi_downstream, 0.001, CGConfig{}, false);
  EXPECT_EQ(g.phi, full.phi);
}

TEST(UpperGradients, MatchesDenseEvaluationOnQuadratics) {
  Rng rng(14);
  for (int t = 0; t < 5; ++t) {
    auto q = QuadraticInstance::random(6, rng);
    const double lambda = std::pow(10.0, rng.uniform(-2, 2));
    Eigen::VectorXd theta_d = oracle::random_vector(6, rng);
    Eigen::VectorXd theta_p = oracle::quadratic_lower_solution(q.a, q.b, theta_d, lambda);
    auto g = upper_gradients(q.pretext, q.downstream, q.vec(theta_p), q.vec(theta_d), ParamVector(), ParamVector(),
                             lambda, testutil::exact_cg(6), false);
    auto ref = oracle::dense_upper_gradient(q.a, q.b, q.c_mat, q.c, theta_d, lambda);
    EXPECT_LE(testutil::rel_err(oracle::to_eigen(g.theta), ref), 1e-6);
  }
}

TEST(ClipByNorm, Contract) {
  auto g = flat_vector("g", {12, 16});  // norm 20
  auto c = clip_by_norm(g, 10.0);
  EXPECT_NEAR(norm(c), 10.0, 1e-12);
  EXPECT_NEAR(c[0] / c[1], 0.75, 1e-15);
  auto small = flat_vector("g", {3, 4});
  EXPECT_EQ(clip_by_norm(small, 10.0), small);
  auto zero = flat_vector("g", {0, 0});
  EXPECT_EQ(clip_by_norm(zero, 10.0), zero);
  EXPECT_THROW(clip_by_norm(zero, 0.0), ConfigError);
}

TEST(ClipByNorm, FuzzNormBoundAndDirection) {
  Rng rng(15);
  for (int t = 0; t < 1000; ++t) {
    const std::size_t d = 1 + rng.below(64);
    std::vector<double> v(d);
    const double scale = std::pow(10.0, rng.uniform(-3, 4));
    for (auto& x : v) x = scale * rng.normal();
    auto g = flat_vector("g", v);
    auto c = clip_by_norm(g, 10.0);
    EXPECT_LE(norm(c), 10.0 + 1e-12);
    EXPECT_GE(dot(c, g) / (norm(c) * norm(g)), 1.0 - 1e-12);
  }
}
