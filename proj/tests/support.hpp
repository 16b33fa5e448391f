#pragma once

// Shared helpers for the test binaries: independent samplers and simple
// Monte Carlo summaries. Nothing here calls into the closed forms under test.

#include <algorithm>
#include <cmath>
#include <random>
#include <vector>

#include <Eigen/Dense>
#include <boost/math/quadrature/gauss_kronrod.hpp>

namespace lrvb::testing {

/// Wishart(V, n) draw via the Bartlett decomposition.
inline Eigen::MatrixXd sample_wishart(double n, const Eigen::MatrixXd& v, std::mt19937_64& rng) {
  const Eigen::Index k = v.rows();
  Eigen::MatrixXd l = v.llt().matrixL();
  Eigen::MatrixXd a = Eigen::MatrixXd::Zero(k, k);
  std::normal_distribution<double> z(0.0, 1.0);
  for (Eigen::Index i = 0; i < k; ++i) {
    std::chi_squared_distribution<double> chi(n - static_cast<double>(i));
    a(i, i) = std::sqrt(chi(rng));
    for (Eigen::Index j = 0; j < i; ++j) a(i, j) = z(rng);
  }
  Eigen::MatrixXd la = l * a;
  return la * la.transpose();
}

inline double sample_inverse_gamma(double shape, double scale, std::mt19937_64& rng) {
  std::gamma_distribution<double> g(shape, 1.0 / scale);
  return 1.0 / g(rng);
}

/// Running mean and standard error of iid draws.
struct MeanSe {
  double sum = 0.0, sum_sq = 0.0;
  long n = 0;
  void add(double x) {
    sum += x;
    sum_sq += x * x;
    ++n;
  }
  double mean() const { return sum / static_cast<double>(n); }
  double se() const {
    const double m = mean();
    const double var = (sum_sq / static_cast<double>(n) - m * m) * static_cast<double>(n) / static_cast<double>(n - 1);
    return std::sqrt(std::max(var, 0.0) / static_cast<double>(n));
  }
  /// |mean - target| in units of standard error (absolute slack guards exact-variance-0 cases).
  double z(double target) const { return std::abs(mean() - target) / std::max(se(), 1e-15 * std::max(1.0, std::abs(target))); }
};

inline double rel_err(double a, double b) { return std::abs(a - b) / std::max(std::abs(b), 1e-300); }

inline double max_rel_err(const Eigen::MatrixXd& a, const Eigen::MatrixXd& b) {
  return (a - b).cwiseAbs().maxCoeff() / std::max(b.cwiseAbs().maxCoeff(), 1e-300);
}

/// Adaptive Gauss-Kronrod over [a, b], straight from Boost.
template <typename F>
double gk(F f, double a, double b) {
  double err = 0.0;
  return boost::math::quadrature::gauss_kronrod<double, 61>::integrate(f, a, b, 20, 1e-13, &err);
}

inline double normal_logpdf(double x, double mean, double var) {
  return -0.5 * std::log(2.0 * M_PI * var) - 0.5 * (x - mean) * (x - mean) / var;
}

// Central differences of the gradient of L (itself by central differences of L).
template <typename Model>
Eigen::MatrixXd fd_hessian(const Model& model, const Eigen::VectorXd& m, double h = 1e-4) {
  const Eigen::Index n = m.size();
  auto grad = [&](const Eigen::VectorXd& x) {
    Eigen::VectorXd g(n);
    for (Eigen::Index i = 0; i < n; ++i) {
      const double hi = h * std::max(1.0, std::abs(x(i)));
      Eigen::VectorXd p = x, q = x;
      p(i) += hi;
      q(i) -= hi;
      g(i) = (model.template expected_log_joint<double>(p, model.hyperparams) -
              model.template expected_log_joint<double>(q, model.hyperparams)) / (2 * hi);
    }
    return g;
  };
  Eigen::MatrixXd out(n, n);
  for (Eigen::Index j = 0; j < n; ++j) {
    const double hj = h * std::max(1.0, std::abs(m(j)));
    Eigen::VectorXd p = m, q = m;
    p(j) += hj;
    q(j) -= hj;
    out.col(j) = (grad(p) - grad(q)) / (2 * hj);
  }
  return 0.5 * (out + out.transpose());
}

}  // namespace lrvb::testing
