#include <gtest/gtest.h>

#include <cmath>

#include "bissl/losses.hpp"
#include "bissl/oracle.hpp"
#include "bissl/verify.hpp"
#include "test_util.hpp"

using namespace bissl;

namespace {

// Direct transcription of the contrastive softmax: for each of the 2B anchors,
// -log(exp(s_pos/tau) / sum_{k != anchor} exp(s_k/tau)).
double naive_nt_xent(const Tensor& a, const Tensor& b, double tau) {
  const std::size_t bsz = a.rows(), d = a.cols();
  std::vector<std::vector<double>> z;
  for (const Tensor* t : {&a, &b})
    for (std::size_t i = 0; i < bsz; ++i) {
      std::vector<double> row(d);
      for (std::size_t j = 0; j < d; ++j) row[j] = (*t)(i, j);
      z.push_back(row);
    }
  auto cos = [&](std::size_t i, std::size_t k) {
    double ik = 0, ii = 0, kk = 0;
    for (std::size_t j = 0; j < d; ++j) {
      ik += z[i][j] * z[k][j];
      ii += z[i][j] * z[i][j];
      kk += z[k][j] * z[k][j];
    }
    return ik / std::sqrt(ii * kk);
  };
  double total = 0.0;
  for (std::size_t i = 0; i < 2 * bsz; ++i) {
    const std::size_t pos = (i + bsz) % (2 * bsz);
    double denom = 0.0;
    for (std::size_t k = 0; k < 2 * bsz; ++k)
      if (k != i) denom += std::exp(cos(i, k) / tau);
    total += -std::log(std::exp(cos(i, pos) / tau) / denom);
  }
  return total / static_cast<double>(2 * bsz);
}

double naive_cross_entropy(const Tensor& logits, const std::vector<std::size_t>& labels) {
  double total = 0.0;
  for (std::size_t i = 0; i < logits.rows(); ++i) {
    double denom = 0.0;
    for (std::size_t c = 0; c < logits.cols(); ++c) denom += std::exp(logits(i, c));
    total += -std::log(std::exp(logits(i, labels[i])) / denom);
  }
  return total / static_cast<double>(logits.rows());
}

ParamVector pair_vec(double a, double b) {
  return ParamVector(make_layout(ParamLayout::packed({{"x", Shape{2}}})), {a, b});
}

}  // namespace

TEST(NtXent, SinglePairHasNoNegatives) {
  Rng rng(1);
  auto a = testutil::random_matrix(1, 4, rng), b = testutil::random_matrix(1, 4, rng);
  EXPECT_NEAR(nt_xent(a, b, 0.5), 0.0, 1e-15);
}

TEST(NtXent, IdenticalEmbeddingsGiveLogThree) {
  Tensor z(Shape{2, 3}, {0.3, -1.0, 2.0, 0.3, -1.0, 2.0});
  EXPECT_NEAR(nt_xent(z, z, 0.5), std::log(3.0), 1e-14);
}

TEST(NtXent, MatchesNaiveSummation) {
  Rng rng(2);
  for (int t = 0; t < 10; ++t) {
    auto a = testutil::random_matrix(3, 5, rng), b = testutil::random_matrix(3, 5, rng);
    EXPECT_NEAR(nt_xent(a, b, 0.5), naive_nt_xent(a, b, 0.5), 1e-10);
  }
  auto a = testutil::random_matrix(16, 8, rng), b = testutil::random_matrix(16, 8, rng);
  EXPECT_NEAR(nt_xent(a, b, 0.1), naive_nt_xent(a, b, 0.1), 1e-10);
}

TEST(NtXent, InvariantToCommonPositiveRescaling) {
  Rng rng(3);
  auto a = testutil::random_matrix(5, 4, rng), b = testutil::random_matrix(5, 4, rng);
  const double base = nt_xent(a, b, 0.5);
  for (double alpha : {1e-3, 0.7, 42.0}) {
    auto sa = kernels::map(a, [&](double v) { return alpha * v; });
    auto sb = kernels::map(b, [&](double v) { return alpha * v; });
    EXPECT_NEAR(nt_xent(sa, sb, 0.5), base, 1e-10);
  }
}

TEST(NtXent, ZeroRowIsDegenerate) {
  Rng rng(4);
  auto a = testutil::random_matrix(3, 4, rng), b = testutil::random_matrix(3, 4, rng);
  for (std::size_t j = 0; j < 4; ++j) b(1, j) = 0.0;
  EXPECT_THROW(nt_xent(a, b, 0.5), DegenerateEmbeddingError);
}

TEST(NtXent, RejectsBadShapesAndTemperature) {
  Rng rng(5);
  auto a = testutil::random_matrix(3, 4, rng);
  EXPECT_THROW(nt_xent(a, testutil::random_matrix(2, 4, rng), 0.5), LayoutError);
  EXPECT_THROW(nt_xent(a, a, 0.0), ConfigError);
}

TEST(CrossEntropy, ZeroLogitsGiveLogClassCount) {
  EXPECT_NEAR(cross_entropy(Tensor(Shape{3, 4}), {0, 1, 3}), std::log(4.0), 1e-15);
}

TEST(CrossEntropy, SaturatedLogitsGiveZero) {
  Tensor logits(Shape{2, 3});
  logits(0, 2) = 1000.0;
  logits(1, 0) = 1000.0;
  const double ce = cross_entropy(logits, {2, 0});
  EXPECT_TRUE(std::isfinite(ce));
  EXPECT_NEAR(ce, 0.0, 1e-12);
}

TEST(CrossEntropy, MatchesNaiveSummation) {
  Rng rng(6);
  for (int t = 0; t < 10; ++t) {
    auto b = testutil::random_labeled(7, 5, 5, rng);
    EXPECT_NEAR(cross_entropy(b.inputs, b.labels), naive_cross_entropy(b.inputs, b.labels), 1e-12);
  }
}

TEST(CrossEntropy, RejectsBadLabels) {
  EXPECT_THROW(cross_entropy(Tensor(Shape{2, 3}), {0, 3}), LayoutError);
  EXPECT_THROW(cross_entropy(Tensor(Shape{2, 3}), {0}), LayoutError);
}

TEST(L2Coupling, Examples) {
  EXPECT_EQ(l2_coupling(pair_vec(1, 2), pair_vec(1, 2)), 0.0);
  EXPECT_EQ(l2_coupling(pair_vec(1, 0), pair_vec(0, 0)), 0.5);
  EXPECT_THROW(l2_coupling(pair_vec(1, 0), flat_vector("y", {0.0, 0.0})), LayoutError);
}

TEST(L2Coupling, GradientMatchesFiniteDifferences) {
  Rng rng(7);
  auto layout = make_layout(ParamLayout::packed({{"u", Shape{2, 3}}, {"v", Shape{4}}}));
  auto a = testutil::random_vector(layout, rng), b = testutil::random_vector(layout, rng);
  auto a_vars = std::make_shared<const std::vector<ad::Var>>(as_vars(a, false));
  Objective coupling(layout, [a_vars](std::span<const ad::Var> p, std::span<const ad::Var>) {
    return l2_coupling(std::span<const ad::Var>(*a_vars), p);
  });
  auto g = grad(coupling, b);
  EXPECT_LE(testutil::max_abs_diff(g, b - a), 1e-15);
  EXPECT_LE(testutil::max_abs_diff(g, finite_diff_grad(coupling, b, nullptr, 1e-6)), 1e-9);
  EXPECT_NEAR(eval_loss(coupling, b), l2_coupling(a, b), 1e-14);
}

class LowerObjective : public ::testing::Test {
 protected:
  ModelSpec spec = testutil::small_spec();
  Rng rng{8};
  FlatModel m = testutil::random_model(spec, rng);
  ViewBatch views = testutil::random_views(5, spec.input_dim, rng);
  Objective pretext = pretext_objective(spec, views, 0.5);
};

TEST_F(LowerObjective, ZeroLambdaIsPretextAlone) {
  auto theta_d = testutil::random_model(spec, rng).theta;
  EXPECT_EQ(lower_objective(pretext, m.theta, m.phi_pretext, theta_d, 0.0), eval_loss(pretext, m.theta, &m.phi_pretext));
}

TEST_F(LowerObjective, EqualBackbonesIsPretextAlone) {
  EXPECT_NEAR(lower_objective(pretext, m.theta, m.phi_pretext, m.theta, 5.0),
              eval_loss(pretext, m.theta, &m.phi_pretext), 1e-15);
}

TEST_F(LowerObjective, SumOfSeparateTerms) {
  auto theta_d = testutil::random_model(spec, rng).theta;
  const double expected = eval_loss(pretext, m.theta, &m.phi_pretext) + 0.001 * l2_coupling(theta_d, m.theta);
  EXPECT_NEAR(lower_objective(pretext, m.theta, m.phi_pretext, theta_d, 0.001), expected, 1e-12);
}

TEST_F(LowerObjective, RejectsNegativeLambdaAndForeignAnchor) {
  EXPECT_THROW(lower_level_objective(pretext, m.theta, -1.0), ConfigError);
  EXPECT_THROW(lower_level_objective(pretext, m.phi_pretext, 1.0), LayoutError);
}

TEST(LowerObjectiveConvexity, StrongCouplingMakesHessianPositiveDefinite) {
  // L^P = 1/2 t^T A t with A indefinite; lambda >= 10 ||A|| dominates.
  Rng rng(9);
  for (int t = 0; t < 10; ++t) {
    const std::size_t d = 8;
    Eigen::MatrixXd g(d, d);
    for (Eigen::Index i = 0; i < g.rows(); ++i)
      for (Eigen::Index j = 0; j < g.cols(); ++j) g(i, j) = rng.normal();
    Eigen::MatrixXd a = 0.5 * (g + g.transpose());
    Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(a);
    ASSERT_LT(es.eigenvalues().minCoeff(), 0.0);
    const double lambda = 10.0 * es.eigenvalues().cwiseAbs().maxCoeff();
    auto pretext = oracle::quadratic_objective(a, Eigen::VectorXd::Zero(d));
    auto anchor = oracle::from_eigen(pretext.layout_ptr(), oracle::random_vector(d, rng));
    auto lower = lower_level_objective(pretext, anchor, lambda);
    auto h = oracle::dense_hessian(lower, oracle::from_eigen(pretext.layout_ptr(), oracle::random_vector(d, rng)));
    EXPECT_LE((h - (a + lambda * Eigen::MatrixXd::Identity(d, d))).cwiseAbs().maxCoeff(), 1e-10);
    Eigen::LLT<Eigen::MatrixXd> llt(h);
    EXPECT_EQ(llt.info(), Eigen::Success);
  }
}

class WeightedSum : public ::testing::Test {
 protected:
  ModelSpec spec = testutil::small_spec();
  Rng rng{10};
  FlatModel m = testutil::random_model(spec, rng);
  Objective pretext = pretext_objective(spec, testutil::random_views(4, spec.input_dim, rng), 0.5);
  Objective downstream = downstream_objective(spec, testutil::random_labeled(6, spec.input_dim, spec.output_dim, rng));
  ParamVector heads = concat(m.phi_pretext, m.phi_downstream);
};

TEST_F(WeightedSum, EndpointsRecoverSingleTasks) {
  EXPECT_NEAR(eval_loss(weighted_sum_objective(pretext, downstream, 0.0), m.theta, &heads),
              eval_loss(pretext, m.theta, &m.phi_pretext), 1e-15);
  EXPECT_NEAR(eval_loss(weighted_sum_objective(pretext, downstream, 1.0), m.theta, &heads),
              eval_loss(downstream, m.theta, &m.phi_downstream), 1e-15);
}

TEST_F(WeightedSum, GradientsAreScaledAndSummed) {
  const double w = 0.25;
  auto g = grad_pair(weighted_sum_objective(pretext, downstream, w), m.theta, heads);
  auto gp = grad_pair(pretext, m.theta, m.phi_pretext);
  auto gd = grad_pair(downstream, m.theta, m.phi_downstream);
  EXPECT_LE(testutil::max_abs_diff(g.params, (1 - w) * gp.params + w * gd.params), 1e-14);
  EXPECT_LE(testutil::max_abs_diff(g.aux, concat((1 - w) * gp.aux, w * gd.aux)), 1e-14);
}

TEST_F(WeightedSum, RejectsWeightOutsideUnitInterval) {
  EXPECT_THROW(weighted_sum_objective(pretext, downstream, 1.5), ConfigError);
  EXPECT_THROW(weighted_sum_objective(pretext, downstream, -0.1), ConfigError);
}

TEST(ViewBatch, ValidatesShapes) {
  Rng rng(11);
  ViewBatch bad{testutil::random_matrix(3, 4, rng), testutil::random_matrix(3, 5, rng)};
  EXPECT_THROW(bad.validate(), LayoutError);
  LabeledBatch lb = testutil::random_labeled(3, 4, 2, rng);
  lb.labels[0] = 7;
  EXPECT_THROW(lb.validate(2), LayoutError);
}

// The shipped-objective derivative suite, per objective.
TEST(ShippedObjectives, GradientHvpAndSymmetryWithinTolerance) {
  for (const auto& [name, make] : verify::shipped_objectives()) {
    Rng rng(Rng::derive(12, name));
    for (int i = 0; i < 10; ++i) {
      const auto e = verify::derivative_errors(make(rng), rng);
      EXPECT_LE(e.grad, 1e-5) << name;
      EXPECT_LE(e.hvp, 1e-4) << name;
      EXPECT_LE(e.symmetry, 1e-8) << name;
    }
  }
}
