#include <chrono>
#include <cmath>
#include <random>

#include <gtest/gtest.h>

#include "lrvb/linear_response.hpp"
#include "lrvb/mfvb.hpp"
#include "lrvb/models/conjugate.hpp"
#include "support.hpp"

using namespace lrvb;
using lrvb::testing::fd_hessian;
using lrvb::testing::max_rel_err;

namespace {

models::NormalData four_obs() {
  // n = 4, mean 1
  return models::NormalData::from({0.5, 1.5, 0.0, 2.0});
}

Eigen::Matrix3d three_d_precision() {
  Eigen::Matrix3d lam;
  lam << 2.0, 0.6, -0.3,
         0.6, 1.5, 0.4,
        -0.3, 0.4, 1.0;
  return lam;
}

}  // namespace

TEST(Elbo, NormalNormalEqualsLogEvidenceAtPosterior) {
  auto model = models::normal_normal_model(four_obs(), 1.0);
  // posterior N(0.8, 0.2)
  Eigen::Vector2d m_post(0.8, 0.8 * 0.8 + 0.2);
  // marginal: x ~ N(0, I + 11^T)
  Eigen::Vector4d x(0.5, 1.5, 0.0, 2.0);
  Eigen::Matrix4d cov = Eigen::Matrix4d::Identity() + Eigen::Matrix4d::Ones();
  const double log_ev = -0.5 * (4 * kLog2Pi + std::log(cov.determinant()) + x.dot(cov.inverse() * x));
  EXPECT_NEAR(elbo(model, m_post), log_ev, 1e-12);
}

TEST(Elbo, ConstantShiftInvariance) {
  auto model = models::normal_inverse_gamma_model(four_obs());
  ModelSpec shifted = model;
  const double c = 3.25;
  auto base = model.expected_log_prior;
  shifted.expected_log_prior = ScalarObjective{
      [base, c](const VecT<double>& m, const VecT<double>& a) { return base(m, a) + c; },
      [base, c](const VecT<D1>& m, const VecT<D1>& a) { return base(m, a) + c; },
      [base, c](const VecT<D2>& m, const VecT<D2>& a) { return base(m, a) + c; }};
  EXPECT_NEAR(elbo(shifted, model.default_init) - elbo(model, model.default_init), c, 1e-12);
  auto s1 = fit(model);
  auto s2 = fit(shifted);
  EXPECT_EQ(s1.iterations, s2.iterations);
  EXPECT_LT((s1.mean - s2.mean).cwiseAbs().maxCoeff(), 1e-12);
}

TEST(Elbo, RejectsBadInput) {
  auto model = models::normal_normal_model(four_obs(), 1.0);
  EXPECT_THROW(elbo(model, Eigen::Vector3d(0, 1, 2)), DimensionMismatch);
  EXPECT_THROW(elbo(model, Eigen::Vector2d(1.0, 0.5)), DomainError);
}

TEST(Fit, NormalNormalMatchesConjugatePosterior) {
  auto model = models::normal_normal_model(four_obs(), 1.0);
  auto sol = fit(model);
  ASSERT_TRUE(sol.converged);
  EXPECT_NEAR(sol.mean(0), 0.8, 1e-8);
  EXPECT_NEAR(sol.mean(1), 0.84, 1e-8);
  EXPECT_LE(sol.grad_norm, 1e-8);
  std::mt19937_64 rng(1);
  std::normal_distribution<double> z(0.0, 0.5);
  for (int i = 0; i < 50; ++i) {
    const double mu = 0.8 + z(rng), var = 0.2 * std::exp(z(rng));
    EXPECT_LE(elbo(model, Eigen::Vector2d(mu, mu * mu + var)), sol.elbo + 1e-12);
  }
}

TEST(Fit, GaussianTargetMeanField) {
  Eigen::Matrix3d lam = three_d_precision();
  Eigen::Vector3d b(1.0, -2.0, 0.5);
  auto model = models::gaussian_target_model(lam, b);
  auto sol = fit(model);
  Eigen::Vector3d exact_mean = lam.ldlt().solve(b);
  for (int i = 0; i < 3; ++i) {
    EXPECT_NEAR(sol.mean(2 * i), exact_mean(i), 1e-9);
    const double var = sol.mean(2 * i + 1) - sol.mean(2 * i) * sol.mean(2 * i);
    EXPECT_NEAR(var, 1.0 / lam(i, i), 1e-9);
  }
}

TEST(Fit, ElboTraceNonDecreasingAndDeterministic) {
  auto model = models::normal_inverse_gamma_model(four_obs(), Eigen::Vector4d(-1.0, 0.5, 3.0, 1.0));
  auto a = fit(model);
  auto b = fit(model);
  ASSERT_TRUE(a.converged);
  for (std::size_t i = 1; i < a.elbo_trace.size(); ++i) EXPECT_GE(a.elbo_trace[i], a.elbo_trace[i - 1]);
  EXPECT_EQ(a.elbo_trace, b.elbo_trace);
  EXPECT_EQ(a.mean, b.mean);
  // VB mean of mu is exact for this model
  const double kn = 0.5 + 4.0;
  EXPECT_NEAR(a.mean(0), (0.5 * -1.0 + 4.0) / kn, 1e-9);
}

TEST(Fit, GradientAtOptimumByFiniteDifferences) {
  auto model = models::normal_inverse_gamma_model(four_obs());
  auto sol = fit(model);
  const Eigen::VectorXd& u = sol.unconstrained;
  for (Eigen::Index i = 0; i < u.size(); ++i) {
    const double h = 1e-5;
    Eigen::VectorXd p = u, q = u;
    p(i) += h;
    q(i) -= h;
    const double fd = (elbo_unconstrained<double>(model, p, model.hyperparams) -
                       elbo_unconstrained<double>(model, q, model.hyperparams)) / (2 * h);
    EXPECT_LT(std::abs(fd), 1e-5 * std::max(1.0, std::abs(sol.elbo)));
  }
}

TEST(Fit, NonConvergenceCarriesLastIterate) {
  auto model = models::normal_inverse_gamma_model(four_obs());
  FitOptions opts;
  opts.max_iter = 1;
  try {
    fit(model, model.default_init, opts);
    FAIL() << "expected NonConvergence";
  } catch (const FitNonConvergence& e) {
    EXPECT_FALSE(e.last().converged);
    EXPECT_EQ(e.last().iterations, 1);
    EXPECT_STREQ(e.kind(), "NonConvergence");
  }
}

TEST(Lrvb, LinearObjectiveGivesSigmaEqualV) {
  auto model = models::normal_normal_model(four_obs(), 1.0);
  auto sol = fit(model);
  auto sys = build_system(model, sol);
  EXPECT_LT(sys.H.cwiseAbs().maxCoeff(), 1e-14);
  EXPECT_LT(max_rel_err(sys.sigma_hat, sys.V), 1e-14);
}

TEST(Lrvb, TwoDimensionalGaussianRestoresOffDiagonal) {
  Eigen::Matrix2d lam;
  lam << 1.0, -0.5, -0.5, 1.0;
  auto model = models::gaussian_target_model(lam, Eigen::Vector2d(0.3, -0.1));
  auto sol = fit(model);
  auto sys = build_system(model, sol);
  EXPECT_NEAR(sys.V(0, 0), 1.0, 1e-9);
  EXPECT_NEAR(sys.V(2, 2), 1.0, 1e-9);
  EXPECT_NEAR(sys.sigma_hat(0, 0), 4.0 / 3.0, 1e-9);
  EXPECT_NEAR(sys.sigma_hat(0, 2), 2.0 / 3.0, 1e-9);
  EXPECT_NEAR(sys.sigma_hat(2, 2), 4.0 / 3.0, 1e-9);
  EXPECT_NEAR(function_sensitivity(sys, unit_vector(4, 0), unit_vector(4, 2)), 2.0 / 3.0, 1e-9);
  EXPECT_EQ(function_sensitivity(sys, unit_vector(4, 0), unit_vector(4, 2)), sys.sigma_hat(0, 2));
  EXPECT_THROW(function_sensitivity(sys, unit_vector(3, 0), unit_vector(4, 2)), DimensionMismatch);
}

TEST(Lrvb, ThreeDimensionalGaussianExact) {
  Eigen::Matrix3d lam = three_d_precision();
  auto t0 = std::chrono::steady_clock::now();
  auto model = models::gaussian_target_model(lam, Eigen::Vector3d(1.0, -2.0, 0.5));
  auto sol = fit(model);
  auto sys = build_system(model, sol);
  const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  Eigen::Matrix3d exact = lam.inverse();
  Eigen::Matrix3d block;
  for (int i = 0; i < 3; ++i)
    for (int j = 0; j < 3; ++j) block(i, j) = sys.sigma_hat(2 * i, 2 * j);
  EXPECT_LT(max_rel_err(block, exact), 1e-6);
  EXPECT_LT(secs, 1.0);
}

TEST(Lrvb, SingularSystemDetected) {
  Eigen::Matrix2d v = Eigen::Matrix2d::Identity();
  Eigen::Matrix2d h;
  h << 1.0, 0.0, 0.0, 0.3;  // VH has eigenvalue 1
  EXPECT_THROW(LrvbSystem::from_matrices(v, h), SingularSystem);
}

TEST(Lrvb, RequiresConvergedSolution) {
  auto model = models::normal_normal_model(four_obs(), 1.0);
  VbSolution sol;
  sol.mean = model.default_init;
  EXPECT_THROW(build_system(model, sol), NonConvergence);
}

TEST(Lrvb, HessianMatchesFiniteDifferences) {
  std::mt19937_64 rng(8);
  std::normal_distribution<double> z(0.0, 0.3);
  auto model = models::normal_inverse_gamma_model(four_obs(), Eigen::Vector4d(0.2, 2.0, 3.0, 1.5));
  auto sol = fit(model);
  for (int rep = 0; rep < 10; ++rep) {
    Eigen::VectorXd u = sol.unconstrained;
    for (Eigen::Index i = 0; i < u.size(); ++i) u(i) += z(rng);
    Eigen::VectorXd m = mean_from_unconstrained(model, u);
    Eigen::MatrixXd h = objective_hessian(model, m);
    EXPECT_LT(max_rel_err(fd_hessian(model, m), h), 1e-5);
  }
}

TEST(Lrvb, SolverMatchesDenseSolve) {
  auto model = models::normal_inverse_gamma_model(four_obs());
  auto sol = fit(model);
  auto sys = build_system(model, sol);
  Eigen::MatrixXd a = Eigen::MatrixXd::Identity(4, 4) - sys.V * sys.H;
  std::mt19937_64 rng(3);
  std::normal_distribution<double> z(0.0, 1.0);
  for (int rep = 0; rep < 5; ++rep) {
    Eigen::VectorXd v(4);
    for (int i = 0; i < 4; ++i) v(i) = z(rng);
    Eigen::VectorXd dense = a.fullPivLu().solve(sys.V * v);
    EXPECT_LT((sys.apply(v) - dense).norm(), 1e-10 * std::max(1.0, dense.norm()));
    EXPECT_LT((a.transpose() * sys.solve_transpose(v) - v).norm(), 1e-10 * std::max(1.0, v.norm()));
  }
  EXPECT_LT((sys.sigma_hat - sys.sigma_hat.transpose()).cwiseAbs().maxCoeff(), 1e-15);
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> eig(sys.sigma_hat);
  EXPECT_GT(eig.eigenvalues().minCoeff(), -1e-8 * eig.eigenvalues().cwiseAbs().maxCoeff());
}
