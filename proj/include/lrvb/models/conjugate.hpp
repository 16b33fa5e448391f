#pragma once

// Small models with closed-form posteriors, used as fixtures and oracles.
//
//   normal-normal          x_i ~ N(theta, s2), s2 known; prior on theta in
//                          natural form exp(a1 theta + a2 theta^2 - A(a)).
//   normal-inverse-gamma   x_i ~ N(mu, sigma2); mu | sigma2 ~ N(mu0, sigma2 / kappa0),
//                          sigma2 ~ InvGamma(a0, b0).
//   gaussian               log p(theta) = b^T theta - theta^T Lambda theta / 2 (+ const),
//                          fit with one univariate Gaussian block per coordinate.

#include <cmath>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "lrvb/dual.hpp"
#include "lrvb/errors.hpp"
#include "lrvb/expfam.hpp"
#include "lrvb/model.hpp"
#include "lrvb/special.hpp"

namespace lrvb::models {

struct NormalData {
  double count = 0.0;
  double sum = 0.0;
  double sum_squares = 0.0;

  static NormalData from(const std::vector<double>& x) {
    NormalData d;
    for (double v : x) {
      if (!std::isfinite(v)) throw DomainError("observations must be finite");
      d.count += 1.0;
      d.sum += v;
      d.sum_squares += v * v;
    }
    return d;
  }
};

inline std::uint64_t hash_of(const NormalData& d) {
  Fnv1a h;
  h.add(d.count);
  h.add(d.sum);
  h.add(d.sum_squares);
  return h.value();
}

/// Prior hyperparameters (a1, a2) are the natural parameters of the normal
/// prior; the default (0, -1/2) is N(0, 1).
inline ModelSpec normal_normal_model(const NormalData& data, double noise_variance,
                                     const Eigen::Vector2d& alpha = Eigen::Vector2d(0.0, -0.5)) {
  if (!(noise_variance > 0.0)) throw DomainError("noise variance must be positive");
  if (!(alpha(1) < 0.0)) throw DomainError("prior natural parameter a2 must be negative");
  if (data.count < 0.0) throw DomainError("negative observation count");
  ModelSpec m;
  m.name = "normal-normal";
  add_block(m.blocks, "theta", {Family::GaussianUnivariate, 1});
  m.hyper_names = {"a1", "a2"};
  m.hyperparams = alpha;

  const double n = data.count, s1 = data.sum, s2 = data.sum_squares, v = noise_variance;
  m.expected_log_lik = ScalarObjective::from([=](const auto& mm, const auto&) {
    using T = typename std::decay_t<decltype(mm)>::Scalar;
    return T(-0.5 * n * (kLog2Pi + std::log(v)) - (s2 - 2.0 * s1 * mm(0) + n * mm(1)) / (2.0 * v));
  });
  m.expected_log_prior = ScalarObjective::from([](const auto& mm, const auto& a) {
    using T = typename std::decay_t<decltype(mm)>::Scalar;
    const T log_norm = -a(0) * a(0) / (4.0 * a(1)) - 0.5 * log(T(-2.0 * a(1))) + 0.5 * kLog2Pi;
    return T(a(0) * mm(0) + a(1) * mm(1) - log_norm);
  });

  const double prior_var = -0.5 / alpha(1);
  const double prior_mean = alpha(0) * prior_var;
  m.default_init = Eigen::Vector2d(prior_mean, prior_mean * prior_mean + prior_var);
  m.quantities = {{"theta", unit_vector(2, 0)}};

  auto log_prior = [](double theta, const Eigen::VectorXd& a) {
    const double log_norm = -a(0) * a(0) / (4.0 * a(1)) - 0.5 * std::log(-2.0 * a(1)) + 0.5 * kLog2Pi;
    return a(0) * theta + a(1) * theta * theta - log_norm;
  };
  m.prior_marginals[0] = [log_prior](const Eigen::VectorXd& p, const Eigen::VectorXd& a) {
    return log_prior(p(0), a);
  };

  ParameterDensity pd;
  pd.dim = 1;
  pd.coordinate_names = {"theta"};
  pd.log_joint = [=](const Eigen::VectorXd& z, const Eigen::VectorXd& a) {
    const double t = z(0);
    return log_prior(t, a) - 0.5 * n * (kLog2Pi + std::log(v)) - (s2 - 2.0 * s1 * t + n * t * t) / (2.0 * v);
  };
  pd.quantities = [](const Eigen::VectorXd& z) { return Eigen::VectorXd::Constant(1, z(0)); };
  pd.init_from_mean = [](const Eigen::VectorXd& mm) { return Eigen::VectorXd::Constant(1, mm(0)); };
  m.parameter_density = pd;

  ConjugateForm cf;
  cf.kind = ConjugateForm::Kind::NormalNormal;
  cf.count = n;
  cf.sum = s1;
  cf.sum_squares = s2;
  cf.noise_variance = v;
  m.conjugate = cf;
  Fnv1a h;
  const std::uint64_t dh = hash_of(data);
  h.add_bytes(&dh, sizeof dh);
  h.add(v);
  m.data_hash = h.value();
  return m;
}

/// Hyperparameters (mu0, kappa0, a0, b0).
inline ModelSpec normal_inverse_gamma_model(const NormalData& data,
                                            const Eigen::Vector4d& alpha = Eigen::Vector4d(0.0, 1.0, 2.0, 2.0)) {
  if (!(alpha(1) > 0.0 && alpha(2) > 0.0 && alpha(3) > 0.0))
    throw DomainError("normal-inverse-gamma prior requires kappa0, a0, b0 > 0");
  ModelSpec m;
  m.name = "normal-inverse-gamma";
  add_block(m.blocks, "mu", {Family::GaussianUnivariate, 1});
  add_block(m.blocks, "sigma2", {Family::InverseGamma, 1});
  m.hyper_names = {"mu0", "kappa0", "a0", "b0"};
  m.hyperparams = alpha;
  const double n = data.count, s1 = data.sum, s2 = data.sum_squares;

  // mean layout: (E mu, E mu^2, E 1/sigma2, E log sigma2)
  m.expected_log_lik = ScalarObjective::from([=](const auto& mm, const auto&) {
    using T = typename std::decay_t<decltype(mm)>::Scalar;
    return T(-0.5 * n * kLog2Pi - 0.5 * n * mm(3) - 0.5 * mm(2) * (s2 - 2.0 * s1 * mm(0) + n * mm(1)));
  });
  m.expected_log_prior = ScalarObjective::from([](const auto& mm, const auto& a) {
    using T = typename std::decay_t<decltype(mm)>::Scalar;
    const T quad = mm(1) - 2.0 * a(0) * mm(0) + a(0) * a(0);
    const T mu_part = -0.5 * kLog2Pi - 0.5 * mm(3) + 0.5 * log(a(1)) - 0.5 * a(1) * mm(2) * quad;
    const T s_part = a(2) * log(a(3)) - lgamma(a(2)) - (a(2) + 1.0) * mm(3) - a(3) * mm(2);
    return T(mu_part + s_part);
  });

  const double mu0 = alpha(0), kappa0 = alpha(1), a0 = alpha(2), b0 = alpha(3);
  m.default_init.resize(4);
  m.default_init << mu0, mu0 * mu0 + b0 / (a0 * kappa0), a0 / b0, std::log(b0) - digamma(a0);
  m.quantities = {{"mu", unit_vector(4, 0)}, {"inv_sigma2", unit_vector(4, 2)}, {"log_sigma2", unit_vector(4, 3)}};

  ParameterDensity pd;
  pd.dim = 2;
  pd.coordinate_names = {"mu", "log_sigma2"};
  pd.log_joint = [=](const Eigen::VectorXd& z, const Eigen::VectorXd& a) {
    const double mu = z(0), ls = z(1), inv = std::exp(-ls);
    const double lp_mu = -0.5 * kLog2Pi - 0.5 * ls + 0.5 * std::log(a(1)) - 0.5 * a(1) * inv * (mu - a(0)) * (mu - a(0));
    const double lp_s = a(2) * std::log(a(3)) - lgamma(a(2)) - (a(2) + 1.0) * ls - a(3) * inv;
    const double ll = -0.5 * n * kLog2Pi - 0.5 * n * ls - 0.5 * inv * (s2 - 2.0 * s1 * mu + n * mu * mu);
    return lp_mu + lp_s + ll + ls;  // + log Jacobian of sigma2 = exp(z)
  };
  pd.quantities = [](const Eigen::VectorXd& z) { return Eigen::Vector3d(z(0), std::exp(-z(1)), z(1)); };
  pd.init_from_mean = [](const Eigen::VectorXd& mm) { return Eigen::Vector2d(mm(0), -std::log(mm(2))); };
  m.parameter_density = pd;

  ConjugateForm cf;
  cf.kind = ConjugateForm::Kind::NormalInverseGamma;
  cf.count = n;
  cf.sum = s1;
  cf.sum_squares = s2;
  m.conjugate = cf;
  m.data_hash = hash_of(data);
  return m;
}

/// Gaussian target with fixed precision; hyperparameters are the linear
/// coefficients b (posterior mean Lambda^-1 b).
inline ModelSpec gaussian_target_model(const Eigen::MatrixXd& precision, const Eigen::VectorXd& linear) {
  const Eigen::Index d = precision.rows();
  if (precision.cols() != d || linear.size() != d) throw DimensionMismatch("precision / linear size mismatch");
  Eigen::LLT<Eigen::MatrixXd> llt(precision);
  if (d == 0 || llt.info() != Eigen::Success || !precision.isApprox(precision.transpose()))
    throw DomainError("precision must be symmetric positive definite");
  ModelSpec m;
  m.name = "gaussian";
  m.hyperparams = linear;
  for (Eigen::Index i = 0; i < d; ++i) {
    add_block(m.blocks, "theta_" + std::to_string(i + 1), {Family::GaussianUnivariate, 1});
    m.hyper_names.push_back("b_" + std::to_string(i + 1));
  }
  const Eigen::MatrixXd lam = precision;
  const Eigen::MatrixXd cov = llt.solve(Eigen::MatrixXd::Identity(d, d));
  const double logdet = 2.0 * llt.matrixL().toDenseMatrix().diagonal().array().log().sum();

  m.expected_log_lik = ScalarObjective::from([](const auto& mm, const auto&) {
    using T = typename std::decay_t<decltype(mm)>::Scalar;
    return T(0.0);
  });
  m.expected_log_prior = ScalarObjective::from([=](const auto& mm, const auto& b) {
    using T = typename std::decay_t<decltype(mm)>::Scalar;
    T out(-0.5 * static_cast<double>(d) * kLog2Pi + 0.5 * logdet);
    for (Eigen::Index i = 0; i < d; ++i) {
      out += b(i) * mm(2 * i) - 0.5 * lam(i, i) * mm(2 * i + 1);
      for (Eigen::Index j = i + 1; j < d; ++j) out -= lam(i, j) * mm(2 * i) * mm(2 * j);
      for (Eigen::Index j = 0; j < d; ++j) out -= 0.5 * cov(i, j) * b(i) * b(j);
    }
    return out;
  });

  m.default_init = Eigen::VectorXd::Zero(2 * d);
  for (Eigen::Index i = 0; i < d; ++i) {
    m.default_init(2 * i + 1) = 1.0 / lam(i, i);
    m.quantities.push_back({"theta_" + std::to_string(i + 1), unit_vector(static_cast<std::size_t>(2 * d), static_cast<std::size_t>(2 * i))});
  }

  ParameterDensity pd;
  pd.dim = static_cast<std::size_t>(d);
  for (Eigen::Index i = 0; i < d; ++i) pd.coordinate_names.push_back("theta_" + std::to_string(i + 1));
  pd.log_joint = [lam](const Eigen::VectorXd& z, const Eigen::VectorXd& b) { return b.dot(z) - 0.5 * z.dot(lam * z); };
  pd.quantities = [](const Eigen::VectorXd& z) { return z; };
  pd.init_from_mean = [d](const Eigen::VectorXd& mm) {
    Eigen::VectorXd z(d);
    for (Eigen::Index i = 0; i < d; ++i) z(i) = mm(2 * i);
    return z;
  };
  m.parameter_density = pd;

  ConjugateForm cf;
  cf.kind = ConjugateForm::Kind::GaussianTarget;
  cf.precision = lam;
  m.conjugate = cf;
  Fnv1a h;
  for (Eigen::Index i = 0; i < d; ++i) h.add(Eigen::VectorXd(lam.col(i)));
  m.data_hash = h.value();
  return m;
}

}  // namespace lrvb::models
