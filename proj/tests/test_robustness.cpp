#include <cmath>
#include <random>
#include <vector>

#include <gtest/gtest.h>

#include "lrvb/linear_response.hpp"
#include "lrvb/mfvb.hpp"
#include "lrvb/models/conjugate.hpp"
#include "lrvb/models/microcredit.hpp"
#include "lrvb/robustness.hpp"
#include "support.hpp"

using namespace lrvb;
using lrvb::testing::gk;
using lrvb::testing::normal_logpdf;
using lrvb::testing::rel_err;

namespace {

// Normal prior N(pm, pv), observations x_i ~ N(theta, v). Contaminated
// posterior means by direct quadrature.
struct NormalNormalOracle {
  std::vector<double> x;
  double v = 1.0, pm = 0.0, pv = 1.0;

  double loglik(double t) const {
    double out = 0.0;
    for (double xi : x) out += normal_logpdf(xi, t, v);
    return out;
  }
  double logprior(double t) const { return normal_logpdf(t, pm, pv); }
  double integral(const std::function<double(double)>& f) const {
    return gk(f, -30.0, 1.0) + gk(f, 1.0, 30.0);
  }
  // E[theta] under the prior (1 - eps) p + eps delta_t0
  double mean_dirac(double eps, double t0) const {
    const double a = integral([&](double t) { return t * std::exp(logprior(t) + loglik(t)); });
    const double z = integral([&](double t) { return std::exp(logprior(t) + loglik(t)); });
    const double l0 = std::exp(loglik(t0));
    return ((1 - eps) * a + eps * t0 * l0) / ((1 - eps) * z + eps * l0);
  }
  // E[theta] under the prior (1 - eps) p + eps p_c
  double mean_density(double eps, const std::function<double(double)>& log_pc) const {
    auto mix = [&](double t) { return (1 - eps) * std::exp(logprior(t)) + eps * std::exp(log_pc(t)); };
    const double a = integral([&](double t) { return t * mix(t) * std::exp(loglik(t)); });
    const double z = integral([&](double t) { return mix(t) * std::exp(loglik(t)); });
    return a / z;
  }
};

// Richardson-extrapolated forward difference in eps.
template <typename F>
double richardson(F mean_at, double eps, double* gap = nullptr) {
  const double m0 = mean_at(0.0);
  const double d1 = (mean_at(eps) - m0) / eps;
  const double d2 = (mean_at(0.5 * eps) - m0) / (0.5 * eps);
  if (gap) *gap = std::abs(d2 - d1);
  return 2 * d2 - d1;
}

struct NormalNormalFixture {
  NormalNormalOracle oracle{{0.5, 1.5, 0.0, 2.0}, 1.0, 0.0, 1.0};
  ModelSpec model = models::normal_normal_model(models::NormalData::from(oracle.x), 1.0);
  VbSolution sol = fit(model);
  LrvbSystem sys = build_system(model, sol);
  Eigen::VectorXd target = model.quantity("theta").gradient;
};

}  // namespace

// ---------------------------------------------------------------------------

TEST(HyperparamSensitivity, NormalNormalColumnsOfSigmaHatAndClosedForm) {
  NormalNormalFixture f;
  // posterior precision 5, mean 0.8
  const Eigen::VectorXd d1 = hyperparam_sensitivity(f.model, f.sol, f.sys, unit_vector(2, 0));
  const Eigen::VectorXd d2 = hyperparam_sensitivity(f.model, f.sol, f.sys, unit_vector(2, 1));
  for (int i = 0; i < 2; ++i) {
    EXPECT_EQ(d1(i), f.sys.sigma_hat(i, 0));
    EXPECT_EQ(d2(i), f.sys.sigma_hat(i, 1));
  }
  EXPECT_NEAR(d1(0), 1.0 / 5.0, 1e-8);
  EXPECT_NEAR(d2(0), 2.0 * 0.8 / 5.0, 1e-8);
}

TEST(HyperparamSensitivity, GaussianTargetIsInversePrecision) {
  Eigen::Matrix2d lam;
  lam << 2.0, 0.5, 0.5, 1.0;
  auto model = models::gaussian_target_model(lam, Eigen::Vector2d(1.0, -1.0));
  auto sol = fit(model);
  auto sys = build_system(model, sol);
  const Eigen::Matrix2d cov = lam.inverse();
  for (int j = 0; j < 2; ++j) {
    const Eigen::VectorXd d = hyperparam_sensitivity(model, sol, sys, unit_vector(2, static_cast<std::size_t>(j)));
    for (int i = 0; i < 2; ++i) EXPECT_NEAR(d(2 * i), cov(i, j), 1e-9);
  }
}

TEST(HyperparamSensitivity, MatchesRefitOnNormalInverseGamma) {
  auto model = models::normal_inverse_gamma_model(models::NormalData::from({1.2, 0.4, 2.2, 1.9, 0.7, 1.1}));
  auto sol = fit(model);
  auto sys = build_system(model, sol);
  FitOptions tight;
  tight.tol = 1e-10;
  for (std::size_t j = 0; j < 4; ++j) {
    const Eigen::VectorXd d = hyperparam_sensitivity(model, sol, sys, unit_vector(4, j));
    const double h = 1e-4 * std::max(1.0, std::abs(model.hyperparams(static_cast<Eigen::Index>(j))));
    const Eigen::VectorXd e = unit_vector(4, j);
    const auto up = fit(model, sol.mean, tight, model.hyperparams + h * e);
    const auto dn = fit(model, sol.mean, tight, model.hyperparams - h * e);
    const Eigen::VectorXd fd = (up.mean - dn.mean) / (2 * h);
    EXPECT_LT((d - fd).cwiseAbs().maxCoeff(), 1e-5 * std::max(1.0, fd.cwiseAbs().maxCoeff())) << "hyper " << j;
  }
}

TEST(HyperparamSensitivity, WrongDirectionLength) {
  NormalNormalFixture f;
  EXPECT_THROW(hyperparam_sensitivity(f.model, f.sol, f.sys, Eigen::VectorXd::Ones(3)), DimensionMismatch);
}

TEST(HyperparamSensitivity, NonDifferentiablePrior) {
  NormalNormalFixture f;
  ModelSpec bad = f.model;
  bad.expected_log_prior = ScalarObjective::from([](const auto& m, const auto& a) {
    using T = typename std::decay_t<decltype(m)>::Scalar;
    return T(m(0) * sqrt(a(0) - a(0)));  // derivative of sqrt at 0 is infinite
  });
  EXPECT_THROW(prior_cross_gradient(bad, f.sol.mean, unit_vector(2, 0)), NonDifferentiablePrior);
}

// ---------------------------------------------------------------------------

TEST(Influence, MatchesContaminatedPosteriorQuadrature) {
  NormalNormalFixture f;
  const double mu = 0.8, sd = std::sqrt(0.2);
  for (int i = -10; i <= 10; ++i) {
    const double t0 = mu + 0.5 * i * sd;
    const double lr = f.target.dot(influence_function(f.model, f.sol, f.sys, 0, Eigen::VectorXd::Constant(1, t0)));
    double gap = 0.0;
    const double fd = richardson([&](double e) { return f.oracle.mean_dirac(e, t0); }, 1e-4, &gap);
    if (i == 0) {
      EXPECT_EQ(lr, 0.0);
      EXPECT_LT(std::abs(fd), 1e-8);
      continue;
    }
    EXPECT_LT(gap, 1e-2 * std::abs(fd)) << "theta0 = " << t0;
    EXPECT_LT(rel_err(lr, fd), 1e-4) << "theta0 = " << t0;
  }
}

TEST(Influence, GridEqualsPointwiseDirac) {
  NormalNormalFixture f;
  std::vector<Eigen::VectorXd> pts;
  for (int i = 0; i < 7; ++i) pts.push_back(Eigen::VectorXd::Constant(1, -1.0 + 0.5 * i));
  const auto grid = influence_grid(f.model, f.sol, f.sys, 0, f.target, pts, 3);
  for (std::size_t i = 0; i < pts.size(); ++i) {
    const double single = contamination_sensitivity(f.model, f.sol, f.sys, {0, Contaminant::dirac(pts[i]), 0.0}, f.target);
    EXPECT_EQ(grid[i], single);
    EXPECT_EQ(grid[i], f.target.dot(influence_function(f.model, f.sol, f.sys, 0, pts[i])));
  }
}

TEST(Influence, ZeroPriorDensityFarOut) {
  NormalNormalFixture f;
  EXPECT_THROW(influence_function(f.model, f.sol, f.sys, 0, Eigen::VectorXd::Constant(1, 1e3)), ZeroPriorDensity);
}

TEST(Influence, RequiresFactorizedPrior) {
  auto model = models::normal_inverse_gamma_model(models::NormalData::from({1.0, 2.0, 0.5}));
  auto sol = fit(model);
  auto sys = build_system(model, sol);
  EXPECT_THROW(influence_function(model, sol, sys, 0, Eigen::VectorXd::Constant(1, 1.0)), DomainError);
}

TEST(Influence, WrongPointDimension) {
  NormalNormalFixture f;
  EXPECT_THROW(influence_function(f.model, f.sol, f.sys, 0, Eigen::VectorXd::Ones(2)), DimensionMismatch);
}

// ---------------------------------------------------------------------------

TEST(Contamination, DensityMatchesContaminatedPosteriorQuadrature) {
  NormalNormalFixture f;
  for (const auto& [c, s2] : std::vector<std::pair<double, double>>{{2.0, 0.25}, {-1.0, 1.0}, {0.8, 4.0}}) {
    auto lpc = [c = c, s2 = s2](double t) { return normal_logpdf(t, c, s2); };
    ContaminationSpec spec{0, Contaminant::density([lpc](const Eigen::VectorXd& p) { return lpc(p(0)); }), 0.0};
    const double lr = contamination_sensitivity(f.model, f.sol, f.sys, spec, f.target);
    const double fd = richardson([&](double e) { return f.oracle.mean_density(e, lpc); }, 1e-4);
    EXPECT_LT(rel_err(lr, fd), 1e-4) << "contaminant N(" << c << ", " << s2 << ")";
  }
}

TEST(Contamination, LinearInMixtureOfContaminants) {
  NormalNormalFixture f;
  auto l1 = [](const Eigen::VectorXd& p) { return normal_logpdf(p(0), 1.5, 0.3); };
  auto l2 = [](const Eigen::VectorXd& p) { return normal_logpdf(p(0), -0.5, 2.0); };
  auto mix = [&](const Eigen::VectorXd& p) { return std::log(0.3 * std::exp(l1(p)) + 0.7 * std::exp(l2(p))); };
  auto s = [&](std::function<double(const Eigen::VectorXd&)> lp) {
    return contamination_sensitivity(f.model, f.sol, f.sys, {0, Contaminant::density(lp), 0.0}, f.target);
  };
  EXPECT_NEAR(s(mix), 0.3 * s(l1) + 0.7 * s(l2), 1e-9);
}

TEST(Contamination, PriorItselfGivesZero) {
  NormalNormalFixture f;
  auto lp = [](const Eigen::VectorXd& p) { return normal_logpdf(p(0), 0.0, 1.0); };
  EXPECT_NEAR(contamination_sensitivity(f.model, f.sol, f.sys, {0, Contaminant::density(lp), 0.0}, f.target), 0.0,
              1e-10);
}

TEST(Contamination, UnnormalizedDensityRejected) {
  NormalNormalFixture f;
  auto lp = [](const Eigen::VectorXd& p) { return std::log(2.0) + normal_logpdf(p(0), 0.0, 1.0); };
  EXPECT_THROW(contamination_sensitivity(f.model, f.sol, f.sys, {0, Contaminant::density(lp), 0.0}, f.target),
               NormalizationFailure);
}

TEST(Contamination, WrongTargetLength) {
  NormalNormalFixture f;
  EXPECT_THROW(contamination_sensitivity(f.model, f.sol, f.sys, {0, Contaminant::dirac(Eigen::VectorXd::Zero(1)), 0.0},
                                         Eigen::VectorXd::Ones(3)),
               DimensionMismatch);
}

// ---------------------------------------------------------------------------

namespace {

struct Microcredit {
  ModelSpec model = models::microcredit_model(models::default_synthetic_data());
  VbSolution sol = fit(model);
  LrvbSystem sys = build_system(model, sol);
};

const Microcredit& microcredit() {
  static const Microcredit m;
  return m;
}

// log N(theta0; mu, Sigma) from MVG(2) mean parameters, generic in the scalar type.
template <typename T>
T mvg2_logpdf(const VecT<T>& m, std::size_t off, const Eigen::Vector2d& x) {
  const auto o = static_cast<Eigen::Index>(off);
  const T m1 = m(o), m2 = m(o + 1);
  const T s11 = m(o + 2) - m1 * m1, s21 = m(o + 3) - m1 * m2, s22 = m(o + 4) - m2 * m2;
  const T det = s11 * s22 - s21 * s21;
  const T d1 = x(0) - m1, d2 = x(1) - m2;
  const T quad = (s22 * d1 * d1 - 2.0 * s21 * d1 * d2 + s11 * d2 * d2) / det;
  return T(-std::log(2.0 * M_PI)) - 0.5 * log(det) - 0.5 * quad;
}

}  // namespace

// Refit the VB objective with the linearized Dirac contamination term added
// and difference the fitted means.
TEST(Influence, MicrocreditTopLevelMatchesVbRefit) {
  const auto& mc = microcredit();
  const std::size_t top = mc.model.block_index("mu_tau");
  const std::size_t off = mc.model.blocks[top].offset;
  const Eigen::Vector2d mean(mc.sol.mean(static_cast<Eigen::Index>(off)), mc.sol.mean(static_cast<Eigen::Index>(off + 1)));
  const Eigen::Vector2d x0 = mean + Eigen::Vector2d(0.2, -0.3);
  const double log_p0 = mc.model.prior_marginals.at(top)(x0, mc.model.hyperparams);

  const Eigen::VectorXd infl = influence_function(mc.model, mc.sol, mc.sys, top, x0);
  auto refit = [&](double eps) {
    ModelSpec pert = mc.model;
    const ScalarObjective base = mc.model.expected_log_prior;
    pert.expected_log_prior = ScalarObjective::from([=](const auto& m, const auto& a) {
      using T = typename std::decay_t<decltype(m)>::Scalar;
      return T(base(m, a) + eps * exp(mvg2_logpdf<T>(m, off, x0) - log_p0));
    });
    FitOptions o;
    o.tol = 1e-10;
    return fit(pert, mc.sol.mean, o).mean;
  };
  const double eps = 1e-5;
  const Eigen::VectorXd fd = (refit(eps) - refit(-eps)) / (2 * eps);
  for (const char* q : {"mu", "tau", "mu_1", "tau_7", "log_sigma2_3"}) {
    const Eigen::VectorXd& g = mc.model.quantity(q).gradient;
    EXPECT_LT(std::abs(g.dot(infl) - g.dot(fd)), 1e-3 * std::abs(g.dot(fd)) + 1e-7) << q;
  }
}

TEST(Influence, WishartBlockUnsupportedForDensities) {
  const auto& mc = microcredit();
  const std::size_t w = mc.model.block_index("C_inv");
  auto lp = [](const Eigen::VectorXd&) { return 0.0; };
  EXPECT_THROW(contamination_sensitivity(mc.model, mc.sol, mc.sys, {w, Contaminant::density(lp), 0.0},
                                         mc.model.quantity("mu").gradient),
               DomainError);
}

// ---------------------------------------------------------------------------

namespace {

// Checks the worst case against random nonnegative unit-norm perturbations
// u, evaluating each derivative as Z * contamination_sensitivity(u p / Z).
void check_worst_case(const ModelSpec& model, const VbSolution& sol, const LrvbSystem& sys, std::size_t block,
                      const Eigen::VectorXd& target, double p, double lo, double hi, double center, double spread,
                      std::uint64_t seed) {
  const WorstCaseResult wc = worst_case_perturbation(model, sol, sys, block, target, p);
  const PriorMarginal& lp = model.prior_marginals.at(block);
  auto prior = [&](double t) { return std::exp(lp(Eigen::VectorXd::Constant(1, t), model.hyperparams)); };

  // the worst density itself: unit norm and attains the bound
  const double nrm = std::pow(gk([&](double t) {
                                const double pt = prior(t);
                                return pt > 0 ? std::pow(wc.worst_density(t) / pt, p) * pt : 0.0;
                              }, lo, hi),
                              1.0 / p);
  EXPECT_NEAR(nrm, 1.0, 1e-6);
  const double zw = gk(wc.worst_density, lo, hi);
  const double attained_check =
      zw * contamination_sensitivity(model, sol, sys,
                                     {block, Contaminant::density([&](const Eigen::VectorXd& x) {
                                        return std::log(wc.worst_density(x(0)) / zw);
                                      }),
                                      0.0},
                                     target);
  EXPECT_LT(rel_err(attained_check, wc.attained_derivative), 1e-5);

  std::mt19937_64 rng(seed);
  std::normal_distribution<double> n01(0.0, 1.0);
  std::uniform_real_distribution<double> u01(0.0, 1.0);
  for (int trial = 0; trial < 50; ++trial) {
    std::vector<double> w(3), c(3), s(3);
    for (int j = 0; j < 3; ++j) {
      w[j] = u01(rng);
      c[j] = center + 2.0 * spread * n01(rng);
      s[j] = spread * (0.2 + 1.5 * u01(rng));
    }
    auto u_raw = [&](double t) {
      double v = 0.0;
      for (int j = 0; j < 3; ++j) v += w[j] * std::exp(-0.5 * (t - c[j]) * (t - c[j]) / (s[j] * s[j]));
      return v;
    };
    const double norm = std::pow(gk([&](double t) { return std::pow(u_raw(t), p) * prior(t); }, lo, hi), 1.0 / p);
    auto u = [&](double t) { return u_raw(t) / norm; };
    const double z = gk([&](double t) { return u(t) * prior(t); }, lo, hi);
    auto log_pc = [&](const Eigen::VectorXd& x) { return std::log(u(x(0)) * prior(x(0)) / z); };
    const double d = z * contamination_sensitivity(model, sol, sys, {block, Contaminant::density(log_pc), 0.0}, target);
    EXPECT_GE(std::abs(wc.attained_derivative) - std::abs(d), -1e-6) << "trial " << trial << " p = " << p;
  }
}

}  // namespace

TEST(WorstCase, DominatesRandomPerturbationsNormalNormal) {
  NormalNormalFixture f;
  for (double p : {2.0, 3.0}) check_worst_case(f.model, f.sol, f.sys, 0, f.target, p, -12.0, 12.0, 0.8, 0.45, 11);
}

TEST(WorstCase, DominatesRandomPerturbationsMicrocreditNoise) {
  const auto& mc = microcredit();
  const std::size_t b = mc.model.block_index("sigma2_1");
  const Eigen::VectorXd& target = mc.model.quantity("mu").gradient;
  const ExpFamBlock q = mc.model.block(mc.sol.mean, b);
  const double center = 1.0 / q.mean(0);
  check_worst_case(mc.model, mc.sol, mc.sys, b, target, 2.0, 1e-3, 40.0 * center, center, 0.15 * center, 12);
}

TEST(WorstCase, SignAndNormsConsistent) {
  NormalNormalFixture f;
  const auto wc = worst_case_perturbation(f.model, f.sol, f.sys, 0, f.target, 2.0);
  EXPECT_EQ(std::abs(wc.attained_derivative), std::max(wc.norm_positive, wc.norm_negative));
  const auto neg = worst_case_perturbation(f.model, f.sol, f.sys, 0, -f.target, 2.0);
  EXPECT_DOUBLE_EQ(neg.attained_derivative, -wc.attained_derivative);
}

TEST(WorstCase, InvalidNorm) {
  NormalNormalFixture f;
  EXPECT_THROW(worst_case_perturbation(f.model, f.sol, f.sys, 0, f.target, 1.0), DomainError);
  EXPECT_THROW(worst_case_perturbation(f.model, f.sol, f.sys, 0, f.target, INFINITY), DomainError);
}

// ---------------------------------------------------------------------------

TEST(Report, NormalizesBySigmaHatAndFlagsErrors) {
  NormalNormalFixture f;
  std::vector<SensitivityQuery> qs = hyperparameter_queries(f.model, {"theta"}, {"a1", "a2"});
  SensitivityQuery zero;
  zero.quantity = "nothing";
  zero.target = Eigen::VectorXd::Zero(2);
  zero.direction = "a1";
  zero.delta_alpha = unit_vector(2, 0);
  qs.push_back(zero);
  SensitivityQuery both = qs[0];
  both.contamination = ContaminationSpec{0, Contaminant::dirac(Eigen::VectorXd::Zero(1)), 0.0};
  qs.push_back(both);

  const auto rep = make_report(f.model, f.sol, f.sys, qs);
  ASSERT_EQ(rep.entries.size(), 4u);
  EXPECT_TRUE(rep.entries[0].ok());
  EXPECT_NEAR(rep.entries[0].value, 0.2, 1e-8);
  EXPECT_NEAR(rep.entries[0].normalized, 0.2 / std::sqrt(0.2), 1e-8);
  EXPECT_FALSE(rep.entries[2].ok());
  EXPECT_NE(rep.entries[2].error.find("DomainError"), std::string::npos);
  EXPECT_FALSE(rep.entries[3].ok());
  EXPECT_EQ(rep.model_hash, model_hash(f.model));
  EXPECT_THROW(hyperparameter_queries(f.model, {"theta"}, {"nope"}), DomainError);
}
