#pragma once

// Exponential-family blocks of the mean-field approximation.
//
// Sufficient-statistic layouts (fixed; V and H are assembled in this order):
//   GaussianUnivariate     T = (theta, theta^2)
//   GaussianMultivariate   T = (theta, vech(theta theta^T))         d + d(d+1)/2
//   Gamma(shape a, rate b) T = (theta, log theta)
//   InverseGamma(a, b)     T = (1/theta, log theta)
//   Wishart(V, n), K x K   T = (vech(Lambda), log|Lambda|)          K(K+1)/2 + 1
//
// Natural parameters pair with T entry by entry, so off-diagonal vech
// entries carry the full (not halved) coefficient. Symmetric matrices are
// always stored as vech (column-major lower triangle).
//
// Unconstrained coordinates used by the optimizer:
//   GaussianUnivariate     (mu, log sigma)
//   GaussianMultivariate   (mu, vech(L)) with Sigma = L L^T, log on diag(L)
//   Gamma / InverseGamma   (log a, log b)
//   Wishart                (vech(L)) with V = L L^T, log on diag(L); then log(n - K - 1)

#include <cmath>
#include <cstddef>
#include <limits>
#include <string>
#include <type_traits>
#include <utility>
#include <vector>

#include <Eigen/Dense>

#include "lrvb/dual.hpp"
#include "lrvb/errors.hpp"
#include "lrvb/special.hpp"

namespace lrvb {

enum class Family { GaussianUnivariate, GaussianMultivariate, Gamma, InverseGamma, Wishart };

inline const char* family_name(Family f) {
  switch (f) {
    case Family::GaussianUnivariate: return "GaussianUnivariate";
    case Family::GaussianMultivariate: return "GaussianMultivariate";
    case Family::Gamma: return "Gamma";
    case Family::InverseGamma: return "InverseGamma";
    case Family::Wishart: return "Wishart";
  }
  return "?";
}

/// Family plus the dimension of the underlying variable (d for a
/// multivariate Gaussian, K for a K x K Wishart, 1 otherwise).
struct BlockShape {
  Family family = Family::GaussianUnivariate;
  std::size_t order = 1;

  std::size_t stat_dim() const {
    switch (family) {
      case Family::GaussianMultivariate: return order + vech_size(order);
      case Family::Wishart: return vech_size(order) + 1;
      default: return 2;
    }
  }
  /// Length of a point theta in this block's sample space (vech for Wishart).
  std::size_t point_dim() const {
    switch (family) {
      case Family::GaussianMultivariate: return order;
      case Family::Wishart: return vech_size(order);
      default: return 1;
    }
  }
  bool operator==(const BlockShape&) const = default;
};

/// One factor q(theta_k) of the mean-field approximation.
struct ExpFamBlock {
  Family family = Family::GaussianUnivariate;
  std::size_t dim = 2;
  std::size_t order = 1;
  Eigen::VectorXd natural;
  Eigen::VectorXd mean;

  BlockShape shape() const { return {family, order}; }

  static ExpFamBlock from_natural(BlockShape shape, const Eigen::VectorXd& eta);
  static ExpFamBlock from_mean(BlockShape shape, const Eigen::VectorXd& m);
};

namespace detail {

inline void check_size(BlockShape shape, Eigen::Index n, const char* what) {
  if (static_cast<std::size_t>(n) != shape.stat_dim())
    throw DimensionMismatch(std::string(what) + ": expected " + std::to_string(shape.stat_dim()) +
                            " entries for " + family_name(shape.family) + ", got " +
                            std::to_string(n));
}

// Standard parameterizations recovered from natural parameters.
struct GaussianParams {
  Eigen::VectorXd mu;
  Eigen::MatrixXd sigma;
};
struct ShapeScale {
  double shape;
  double rate;  // rate for Gamma, scale for InverseGamma
};
struct WishartParams {
  Eigen::MatrixXd v;
  double n;
};

inline GaussianParams gaussian_from_natural(BlockShape shape, const Eigen::VectorXd& eta) {
  const auto d = static_cast<Eigen::Index>(shape.order);
  Eigen::MatrixXd precision(d, d);
  if (shape.family == Family::GaussianUnivariate) {
    precision(0, 0) = -2.0 * eta(1);
  } else {
    Eigen::Index idx = d;
    for (Eigen::Index j = 0; j < d; ++j)
      for (Eigen::Index i = j; i < d; ++i, ++idx) {
        if (i == j) {
          precision(i, i) = -2.0 * eta(idx);
        } else {
          precision(i, j) = -eta(idx);
          precision(j, i) = -eta(idx);
        }
      }
  }
  Eigen::LLT<Eigen::MatrixXd> llt(precision);
  if (llt.info() != Eigen::Success || !(precision.diagonal().array() > 0.0).all())
    throw DomainError("Gaussian natural parameters: precision not positive definite");
  GaussianParams out;
  out.sigma = llt.solve(Eigen::MatrixXd::Identity(d, d));
  out.mu = out.sigma * eta.head(d);
  return out;
}

inline ShapeScale gamma_from_natural(const Eigen::VectorXd& eta) {
  ShapeScale p{eta(1) + 1.0, -eta(0)};
  if (!(p.shape > 0.0 && p.rate > 0.0)) throw DomainError("Gamma natural parameters out of domain");
  return p;
}

inline ShapeScale invgamma_from_natural(const Eigen::VectorXd& eta) {
  ShapeScale p{-eta(1) - 1.0, -eta(0)};
  if (!(p.shape > 0.0 && p.rate > 0.0))
    throw DomainError("InverseGamma natural parameters out of domain");
  return p;
}

inline WishartParams wishart_from_natural(BlockShape shape, const Eigen::VectorXd& eta) {
  const std::size_t k = shape.order;
  const auto kk = static_cast<Eigen::Index>(k);
  Eigen::MatrixXd w(kk, kk);
  Eigen::Index idx = 0;
  for (Eigen::Index j = 0; j < kk; ++j)
    for (Eigen::Index i = j; i < kk; ++i, ++idx) {
      if (i == j) {
        w(i, i) = -2.0 * eta(idx);
      } else {
        w(i, j) = -eta(idx);
        w(j, i) = -eta(idx);
      }
    }
  Eigen::LLT<Eigen::MatrixXd> llt(w);
  if (llt.info() != Eigen::Success || !(w.diagonal().array() > 0.0).all())
    throw DomainError("Wishart natural parameters: scale matrix not positive definite");
  WishartParams p;
  p.v = llt.solve(Eigen::MatrixXd::Identity(kk, kk));
  p.n = 2.0 * eta(idx) + static_cast<double>(k) + 1.0;
  if (!(p.n > static_cast<double>(k) + 1.0))
    throw DomainError("Wishart degrees of freedom must exceed K + 1");
  return p;
}

inline Eigen::VectorXd wishart_natural(const Eigen::MatrixXd& v, double n) {
  const Eigen::Index k = v.rows();
  Eigen::MatrixXd w = v.inverse();
  Eigen::VectorXd eta(vech_size(static_cast<std::size_t>(k)) + 1);
  Eigen::Index idx = 0;
  for (Eigen::Index j = 0; j < k; ++j)
    for (Eigen::Index i = j; i < k; ++i, ++idx) eta(idx) = (i == j) ? -0.5 * w(i, i) : -w(i, j);
  eta(idx) = 0.5 * (n - static_cast<double>(k) - 1.0);
  return eta;
}

inline Eigen::VectorXd gaussian_natural(const Eigen::VectorXd& mu, const Eigen::MatrixXd& sigma,
                                        bool univariate) {
  const Eigen::Index d = mu.size();
  Eigen::MatrixXd p = sigma.inverse();
  p = 0.5 * (p + p.transpose());
  Eigen::VectorXd h = p * mu;
  if (univariate) return Eigen::Vector2d(h(0), -0.5 * p(0, 0));
  Eigen::VectorXd eta(d + static_cast<Eigen::Index>(vech_size(static_cast<std::size_t>(d))));
  eta.head(d) = h;
  Eigen::Index idx = d;
  for (Eigen::Index j = 0; j < d; ++j)
    for (Eigen::Index i = j; i < d; ++i, ++idx) eta(idx) = (i == j) ? -0.5 * p(i, i) : -p(i, j);
  return eta;
}

// Solves psi(a) - log(a) = target (< 0) for a > 0. The left side is
// increasing from -inf to 0.
inline double solve_digamma_log(double target) {
  if (!(target < 0.0)) throw DomainError("mean parameters violate Jensen's inequality");
  auto g = [&](double a) { return digamma(a) - std::log(a) - target; };
  // psi(a) - log(a) ~ -1/(2a) for large a, ~ -1/a for small a
  double lo = 1e-300, hi = std::max(1.0, -1.0 / target);
  while (g(hi) < 0.0) hi *= 2.0;
  lo = hi;
  while (g(lo) > 0.0 && lo > 1e-300) lo *= 0.5;
  double a = 0.5 * (lo + hi);
  for (int it = 0; it < 200; ++it) {
    const double val = g(a);
    if (val > 0.0) hi = a; else lo = a;
    const double step = val / (trigamma(a) - 1.0 / a);
    double next = a - step;
    if (!(next > lo && next < hi)) next = 0.5 * (lo + hi);
    if (std::abs(next - a) <= 1e-15 * a) { a = next; break; }
    a = next;
  }
  return a;
}

// Wishart: phi(n) = psi_K(n/2) - K log(n/2), increasing on (K - 1, inf)
// from -inf to 0. Solves phi(n) = target.
inline double wishart_phi(double n, std::size_t k) {
  return mv_digamma(0.5 * n, k) - static_cast<double>(k) * std::log(0.5 * n);
}

inline double solve_wishart_dof(double target, std::size_t k) {
  if (!(target < 0.0)) throw DomainError("Wishart mean parameters violate Jensen's inequality");
  const double kd = static_cast<double>(k);
  auto g = [&](double n) { return wishart_phi(n, k) - target; };
  double lo = kd - 1.0 + 1e-12;
  double hi = kd + 2.0;
  while (g(hi) < 0.0) hi = kd - 1.0 + 2.0 * (hi - kd + 1.0);
  double n = 0.5 * (lo + hi);
  for (int it = 0; it < 300; ++it) {
    const double val = g(n);
    if (val > 0.0) hi = n; else lo = n;
    const double slope = 0.5 * mv_trigamma(0.5 * n, k) - kd / n;
    double next = n - val / slope;
    if (!(next > lo && next < hi)) next = 0.5 * (lo + hi);
    if (std::abs(next - n) <= 1e-15 * n) { n = next; break; }
    n = next;
  }
  return n;
}

// Newton refinement in an AD scalar type: starting from the converged double
// root, two steps recover exact first and second derivatives of the root.
template <typename T, typename G, typename GPrime>
T refine_root(double root, G&& g, GPrime&& gprime) {
  if constexpr (std::is_same_v<T, double>) {
    return root;
  } else {
    T x(root);
    for (int i = 0; i < 2; ++i) x = x - g(x) / gprime(x);
    return x;
  }
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Scalar-generic views used inside objectives.

/// Wishart quantities derived from the block's mean parameters
/// m = (vech(E[Lambda]), E[log|Lambda|]). The degrees of freedom have no
/// closed form in m and are recovered by a 1-D root solve; derivatives flow
/// through the solve exactly.
template <typename T>
struct WishartMoments {
  MatT<T> mean_precision;   // E[Lambda] = n V
  T logdet;                 // E[log |Lambda|]
  T n;                      // degrees of freedom
  MatT<T> v_inverse;        // V^-1 = n E[Lambda]^-1
  VecT<T> log_sigma_diag;   // E[log Sigma_kk], Sigma = Lambda^-1
  VecT<T> inv_sigma_diag;   // E[1 / Sigma_kk]
  VecT<T> sqrt_sigma_diag;  // E[sqrt(Sigma_kk)]
};

template <typename T, typename Vec>
WishartMoments<T> wishart_moments_from_mean(const Vec& m, std::size_t k) {
  const auto kk = static_cast<Eigen::Index>(k);
  const double kd = static_cast<double>(k);
  WishartMoments<T> out;
  VecT<T> vh(static_cast<Eigen::Index>(vech_size(k)));
  for (Eigen::Index i = 0; i < vh.size(); ++i) vh(i) = m(i);
  out.mean_precision = unvech<T>(vh, k);
  out.logdet = m(vh.size());
  const T logdet_mean = logdet_pd<T>(out.mean_precision);
  const double target = value_of(out.logdet) - value_of(logdet_mean);
  const double n0 = detail::solve_wishart_dof(target, k);
  const T target_t = out.logdet - logdet_mean;
  out.n = detail::refine_root<T>(
      n0,
      [&](const T& n) { return mv_digamma(T(0.5 * n), k) - kd * log(T(0.5 * n)) - target_t; },
      [&](const T& n) { return 0.5 * mv_trigamma(T(0.5 * n), k) - kd / n; });
  if (!(value_of(out.n) > kd + 1.0)) throw DomainError("Wishart degrees of freedom must exceed K + 1");
  MatT<T> mean_inv = inverse_pd<T>(out.mean_precision);
  out.v_inverse = mean_inv * out.n;
  out.log_sigma_diag.resize(kk);
  out.inv_sigma_diag.resize(kk);
  out.sqrt_sigma_diag.resize(kk);
  const T shape = 0.5 * (out.n - kd + 1.0);
  const T dig = digamma(shape);
  const T gamma_ratio = exp(lgamma(T(shape - 0.5)) - lgamma(shape));
  for (Eigen::Index i = 0; i < kk; ++i) {
    const T scale = 0.5 * out.v_inverse(i, i);
    out.log_sigma_diag(i) = log(scale) - dig;
    out.inv_sigma_diag(i) = shape / scale;
    out.sqrt_sigma_diag(i) = sqrt(scale) * gamma_ratio;
  }
  return out;
}

/// Mean parameters from unconstrained optimizer coordinates.
template <typename T, typename Vec>
VecT<T> mean_from_unconstrained(BlockShape shape, const Vec& u) {
  const auto d = static_cast<Eigen::Index>(shape.order);
  VecT<T> m(static_cast<Eigen::Index>(shape.stat_dim()));
  switch (shape.family) {
    case Family::GaussianUnivariate: {
      const T mu = u(0);
      m(0) = mu;
      m(1) = mu * mu + exp(2.0 * T(u(1)));
      break;
    }
    case Family::GaussianMultivariate: {
      MatT<T> l = MatT<T>::Constant(d, d, T(0.0));
      Eigen::Index idx = d;
      for (Eigen::Index j = 0; j < d; ++j)
        for (Eigen::Index i = j; i < d; ++i, ++idx) l(i, j) = (i == j) ? exp(T(u(idx))) : T(u(idx));
      MatT<T> second = l * l.transpose();
      for (Eigen::Index i = 0; i < d; ++i)
        for (Eigen::Index j = 0; j < d; ++j) second(i, j) += T(u(i)) * T(u(j));
      for (Eigen::Index i = 0; i < d; ++i) m(i) = u(i);
      m.tail(m.size() - d) = vech<T>(second);
      break;
    }
    case Family::Gamma: {
      const T a = exp(T(u(0))), b = exp(T(u(1)));
      m(0) = a / b;
      m(1) = digamma(a) - T(u(1));
      break;
    }
    case Family::InverseGamma: {
      const T a = exp(T(u(0))), b = exp(T(u(1)));
      m(0) = a / b;
      m(1) = T(u(1)) - digamma(a);
      break;
    }
    case Family::Wishart: {
      const std::size_t k = shape.order;
      const auto kk = static_cast<Eigen::Index>(k);
      MatT<T> l = MatT<T>::Constant(kk, kk, T(0.0));
      Eigen::Index idx = 0;
      T logdet_v(0.0);
      for (Eigen::Index j = 0; j < kk; ++j)
        for (Eigen::Index i = j; i < kk; ++i, ++idx) {
          if (i == j) {
            l(i, i) = exp(T(u(idx)));
            logdet_v += 2.0 * T(u(idx));
          } else {
            l(i, j) = u(idx);
          }
        }
      const T n = static_cast<double>(k) + 1.0 + exp(T(u(idx)));
      MatT<T> v = l * l.transpose();
      m.head(idx) = vech<T>(MatT<T>(v * n));
      m(idx) = mv_digamma(T(0.5 * n), k) + logdet_v + static_cast<double>(k) * kLog2;
      break;
    }
  }
  return m;
}

/// Entropy -E_q[log q] as a function of unconstrained coordinates.
template <typename T, typename Vec>
T entropy_from_unconstrained(BlockShape shape, const Vec& u) {
  const auto d = static_cast<Eigen::Index>(shape.order);
  const double dd = static_cast<double>(shape.order);
  switch (shape.family) {
    case Family::GaussianUnivariate:
      return 0.5 * (kLog2Pi + 1.0) + T(u(1));
    case Family::GaussianMultivariate: {
      T out(0.5 * dd * (kLog2Pi + 1.0));
      Eigen::Index idx = d;
      for (Eigen::Index j = 0; j < d; ++j)
        for (Eigen::Index i = j; i < d; ++i, ++idx)
          if (i == j) out += T(u(idx));
      return out;
    }
    case Family::Gamma: {
      const T a = exp(T(u(0)));
      return a - T(u(1)) + lgamma(a) + (1.0 - a) * digamma(a);
    }
    case Family::InverseGamma: {
      const T a = exp(T(u(0)));
      return a + T(u(1)) + lgamma(a) - (1.0 + a) * digamma(a);
    }
    case Family::Wishart: {
      const std::size_t k = shape.order;
      const auto kk = static_cast<Eigen::Index>(k);
      T logdet_v(0.0);
      Eigen::Index idx = 0;
      for (Eigen::Index j = 0; j < kk; ++j)
        for (Eigen::Index i = j; i < kk; ++i, ++idx)
          if (i == j) logdet_v += 2.0 * T(u(idx));
      const T n = dd + 1.0 + exp(T(u(idx)));
      const T half_n = 0.5 * n;
      return 0.5 * (dd + 1.0) * logdet_v + 0.5 * dd * (dd + 1.0) * kLog2 + mv_lgamma(half_n, k) -
             0.5 * (n - dd - 1.0) * mv_digamma(half_n, k) + 0.5 * n * dd;
    }
  }
  return T(0.0);
}

// ---------------------------------------------------------------------------
// Plain-double API.

inline Eigen::VectorXd mean_from_natural(const ExpFamBlock& block) {
  const BlockShape shape = block.shape();
  detail::check_size(shape, block.natural.size(), "natural parameters");
  const Eigen::VectorXd& eta = block.natural;
  switch (shape.family) {
    case Family::GaussianUnivariate:
    case Family::GaussianMultivariate: {
      auto g = detail::gaussian_from_natural(shape, eta);
      const Eigen::Index d = g.mu.size();
      Eigen::MatrixXd second = g.sigma + g.mu * g.mu.transpose();
      Eigen::VectorXd m(static_cast<Eigen::Index>(shape.stat_dim()));
      m.head(d) = g.mu;
      m.tail(m.size() - d) = vech<double>(second);
      return m;
    }
    case Family::Gamma: {
      auto p = detail::gamma_from_natural(eta);
      return Eigen::Vector2d(p.shape / p.rate, digamma(p.shape) - std::log(p.rate));
    }
    case Family::InverseGamma: {
      auto p = detail::invgamma_from_natural(eta);
      return Eigen::Vector2d(p.shape / p.rate, std::log(p.rate) - digamma(p.shape));
    }
    case Family::Wishart: {
      auto p = detail::wishart_from_natural(shape, eta);
      const std::size_t k = shape.order;
      Eigen::VectorXd m(static_cast<Eigen::Index>(shape.stat_dim()));
      m.head(m.size() - 1) = vech<double>(Eigen::MatrixXd(p.n * p.v));
      m(m.size() - 1) = mv_digamma(0.5 * p.n, k) + std::log(p.v.determinant()) +
                        static_cast<double>(k) * kLog2;
      return m;
    }
  }
  return {};
}

inline Eigen::VectorXd natural_from_mean(BlockShape shape, const Eigen::VectorXd& m) {
  detail::check_size(shape, m.size(), "mean parameters");
  if (!m.allFinite()) throw DomainError("mean parameters not finite");
  switch (shape.family) {
    case Family::GaussianUnivariate:
    case Family::GaussianMultivariate: {
      const auto d = static_cast<Eigen::Index>(shape.order);
      Eigen::VectorXd mu = m.head(d);
      Eigen::MatrixXd sigma = unvech<double>(m.tail(m.size() - d), shape.order) - mu * mu.transpose();
      Eigen::LLT<Eigen::MatrixXd> llt(sigma);
      if (llt.info() != Eigen::Success || !(sigma.diagonal().array() > 0.0).all())
        throw DomainError("Gaussian mean parameters: covariance not positive definite");
      return detail::gaussian_natural(mu, sigma, shape.family == Family::GaussianUnivariate);
    }
    case Family::Gamma: {
      if (!(m(0) > 0.0)) throw DomainError("Gamma mean parameters out of domain");
      const double a = detail::solve_digamma_log(m(1) - std::log(m(0)));
      return Eigen::Vector2d(-a / m(0), a - 1.0);
    }
    case Family::InverseGamma: {
      if (!(m(0) > 0.0)) throw DomainError("InverseGamma mean parameters out of domain");
      // log a - psi(a) = E[log x] + log E[1/x]
      const double a = detail::solve_digamma_log(-(m(1) + std::log(m(0))));
      return Eigen::Vector2d(-a / m(0), -a - 1.0);
    }
    case Family::Wishart: {
      const std::size_t k = shape.order;
      Eigen::MatrixXd mean_precision = unvech<double>(m.head(m.size() - 1), k);
      Eigen::LLT<Eigen::MatrixXd> llt(mean_precision);
      if (llt.info() != Eigen::Success) throw DomainError("Wishart mean parameters: E[Lambda] not positive definite");
      const double logdet_mean = 2.0 * llt.matrixL().toDenseMatrix().diagonal().array().log().sum();
      const double n = detail::solve_wishart_dof(m(m.size() - 1) - logdet_mean, k);
      if (!(n > static_cast<double>(k) + 1.0)) throw DomainError("Wishart degrees of freedom must exceed K + 1");
      return detail::wishart_natural(mean_precision / n, n);
    }
  }
  return {};
}

inline ExpFamBlock ExpFamBlock::from_natural(BlockShape shape, const Eigen::VectorXd& eta) {
  ExpFamBlock b;
  b.family = shape.family;
  b.order = shape.order;
  b.dim = shape.stat_dim();
  b.natural = eta;
  b.mean = mean_from_natural(b);
  return b;
}

inline ExpFamBlock ExpFamBlock::from_mean(BlockShape shape, const Eigen::VectorXd& m) {
  ExpFamBlock b;
  b.family = shape.family;
  b.order = shape.order;
  b.dim = shape.stat_dim();
  b.natural = natural_from_mean(shape, m);
  b.mean = m;
  return b;
}

// Convenience constructors from standard parameterizations.

inline ExpFamBlock gaussian_block(double mu, double variance) {
  if (!(variance > 0.0)) throw DomainError("Gaussian variance must be positive");
  return ExpFamBlock::from_natural({Family::GaussianUnivariate, 1},
                                   Eigen::Vector2d(mu / variance, -0.5 / variance));
}

inline ExpFamBlock mvn_block(const Eigen::VectorXd& mu, const Eigen::MatrixXd& sigma) {
  const auto d = static_cast<std::size_t>(mu.size());
  return ExpFamBlock::from_natural({Family::GaussianMultivariate, d},
                                   detail::gaussian_natural(mu, sigma, false));
}

inline ExpFamBlock gamma_block(double shape, double rate) {
  return ExpFamBlock::from_natural({Family::Gamma, 1}, Eigen::Vector2d(-rate, shape - 1.0));
}

inline ExpFamBlock inverse_gamma_block(double shape, double scale) {
  return ExpFamBlock::from_natural({Family::InverseGamma, 1}, Eigen::Vector2d(-scale, -shape - 1.0));
}

inline ExpFamBlock wishart_block(const Eigen::MatrixXd& v, double n) {
  Eigen::LLT<Eigen::MatrixXd> llt(v);
  if (llt.info() != Eigen::Success) throw DomainError("Wishart scale matrix not positive definite");
  const auto k = static_cast<std::size_t>(v.rows());
  return ExpFamBlock::from_natural({Family::Wishart, k}, detail::wishart_natural(v, n));
}

/// Covariance of the sufficient statistics (the Hessian of the
/// log-partition function at the block's natural parameters).
inline Eigen::MatrixXd suff_stat_covariance(const ExpFamBlock& block) {
  const BlockShape shape = block.shape();
  detail::check_size(shape, block.natural.size(), "natural parameters");
  const auto n_stat = static_cast<Eigen::Index>(shape.stat_dim());
  Eigen::MatrixXd cov = Eigen::MatrixXd::Zero(n_stat, n_stat);
  switch (shape.family) {
    case Family::GaussianUnivariate:
    case Family::GaussianMultivariate: {
      auto g = detail::gaussian_from_natural(shape, block.natural);
      const Eigen::Index d = g.mu.size();
      const Eigen::VectorXd& mu = g.mu;
      const Eigen::MatrixXd& s = g.sigma;
      // pair list for second-moment coordinates
      std::vector<std::pair<Eigen::Index, Eigen::Index>> pairs;
      for (Eigen::Index j = 0; j < d; ++j)
        for (Eigen::Index i = j; i < d; ++i) pairs.emplace_back(i, j);
      cov.topLeftCorner(d, d) = s;
      for (Eigen::Index i = 0; i < d; ++i)
        for (std::size_t p = 0; p < pairs.size(); ++p) {
          auto [a, b] = pairs[p];
          const double c = mu(a) * s(i, b) + mu(b) * s(i, a);
          cov(i, d + static_cast<Eigen::Index>(p)) = c;
          cov(d + static_cast<Eigen::Index>(p), i) = c;
        }
      for (std::size_t p = 0; p < pairs.size(); ++p)
        for (std::size_t q = 0; q < pairs.size(); ++q) {
          auto [a, b] = pairs[p];
          auto [c, e] = pairs[q];
          cov(d + static_cast<Eigen::Index>(p), d + static_cast<Eigen::Index>(q)) =
              s(a, c) * s(b, e) + s(a, e) * s(b, c) + mu(a) * mu(c) * s(b, e) +
              mu(a) * mu(e) * s(b, c) + mu(b) * mu(c) * s(a, e) + mu(b) * mu(e) * s(a, c);
        }
      return cov;
    }
    case Family::Gamma: {
      auto p = detail::gamma_from_natural(block.natural);
      cov << p.shape / (p.rate * p.rate), 1.0 / p.rate, 1.0 / p.rate, trigamma(p.shape);
      return cov;
    }
    case Family::InverseGamma: {
      auto p = detail::invgamma_from_natural(block.natural);
      cov << p.shape / (p.rate * p.rate), -1.0 / p.rate, -1.0 / p.rate, trigamma(p.shape);
      return cov;
    }
    case Family::Wishart: {
      auto p = detail::wishart_from_natural(shape, block.natural);
      const auto k = static_cast<Eigen::Index>(shape.order);
      std::vector<std::pair<Eigen::Index, Eigen::Index>> pairs;
      for (Eigen::Index j = 0; j < k; ++j)
        for (Eigen::Index i = j; i < k; ++i) pairs.emplace_back(i, j);
      const Eigen::MatrixXd& v = p.v;
      const auto np = static_cast<Eigen::Index>(pairs.size());
      for (Eigen::Index a = 0; a < np; ++a) {
        auto [i, j] = pairs[static_cast<std::size_t>(a)];
        for (Eigen::Index b = 0; b < np; ++b) {
          auto [r, s] = pairs[static_cast<std::size_t>(b)];
          cov(a, b) = p.n * (v(i, r) * v(j, s) + v(i, s) * v(j, r));
        }
        cov(a, np) = 2.0 * v(i, j);
        cov(np, a) = 2.0 * v(i, j);
      }
      cov(np, np) = mv_trigamma(0.5 * p.n, shape.order);
      return cov;
    }
  }
  return cov;
}

/// Unconstrained optimizer coordinates for a block.
inline Eigen::VectorXd unconstrained_from_block(const ExpFamBlock& block) {
  const BlockShape shape = block.shape();
  Eigen::VectorXd u(static_cast<Eigen::Index>(shape.stat_dim()));
  switch (shape.family) {
    case Family::GaussianUnivariate: {
      auto g = detail::gaussian_from_natural(shape, block.natural);
      u << g.mu(0), 0.5 * std::log(g.sigma(0, 0));
      return u;
    }
    case Family::GaussianMultivariate: {
      auto g = detail::gaussian_from_natural(shape, block.natural);
      const Eigen::Index d = g.mu.size();
      Eigen::MatrixXd l = g.sigma.llt().matrixL();
      u.head(d) = g.mu;
      Eigen::Index idx = d;
      for (Eigen::Index j = 0; j < d; ++j)
        for (Eigen::Index i = j; i < d; ++i, ++idx) u(idx) = (i == j) ? std::log(l(i, i)) : l(i, j);
      return u;
    }
    case Family::Gamma: {
      auto p = detail::gamma_from_natural(block.natural);
      u << std::log(p.shape), std::log(p.rate);
      return u;
    }
    case Family::InverseGamma: {
      auto p = detail::invgamma_from_natural(block.natural);
      u << std::log(p.shape), std::log(p.rate);
      return u;
    }
    case Family::Wishart: {
      auto p = detail::wishart_from_natural(shape, block.natural);
      const auto k = static_cast<Eigen::Index>(shape.order);
      Eigen::MatrixXd l = p.v.llt().matrixL();
      Eigen::Index idx = 0;
      for (Eigen::Index j = 0; j < k; ++j)
        for (Eigen::Index i = j; i < k; ++i, ++idx) u(idx) = (i == j) ? std::log(l(i, i)) : l(i, j);
      u(idx) = std::log(p.n - static_cast<double>(k) - 1.0);
      return u;
    }
  }
  return u;
}

inline double entropy(const ExpFamBlock& block) {
  return entropy_from_unconstrained<double>(block.shape(), unconstrained_from_block(block));
}

/// Sufficient statistics T(theta) of a point in the block's sample space.
inline Eigen::VectorXd sufficient_statistics(BlockShape shape, const Eigen::VectorXd& point) {
  if (static_cast<std::size_t>(point.size()) != shape.point_dim())
    throw DimensionMismatch("point has wrong dimension for block");
  switch (shape.family) {
    case Family::GaussianUnivariate:
      return Eigen::Vector2d(point(0), point(0) * point(0));
    case Family::GaussianMultivariate: {
      const Eigen::Index d = point.size();
      Eigen::VectorXd t(static_cast<Eigen::Index>(shape.stat_dim()));
      t.head(d) = point;
      t.tail(t.size() - d) = vech<double>(Eigen::MatrixXd(point * point.transpose()));
      return t;
    }
    case Family::Gamma:
      if (!(point(0) > 0.0)) throw DomainError("Gamma point must be positive");
      return Eigen::Vector2d(point(0), std::log(point(0)));
    case Family::InverseGamma:
      if (!(point(0) > 0.0)) throw DomainError("InverseGamma point must be positive");
      return Eigen::Vector2d(1.0 / point(0), std::log(point(0)));
    case Family::Wishart: {
      Eigen::MatrixXd lam = unvech<double>(point, shape.order);
      Eigen::LLT<Eigen::MatrixXd> llt(lam);
      if (llt.info() != Eigen::Success) throw DomainError("Wishart point not positive definite");
      Eigen::VectorXd t(static_cast<Eigen::Index>(shape.stat_dim()));
      t.head(point.size()) = point;
      t(point.size()) = 2.0 * llt.matrixL().toDenseMatrix().diagonal().array().log().sum();
      return t;
    }
  }
  return {};
}

/// log q(theta) for a point in the block's sample space.
inline double log_density(const ExpFamBlock& block, const Eigen::VectorXd& point) {
  const BlockShape shape = block.shape();
  if (static_cast<std::size_t>(point.size()) != shape.point_dim())
    throw DimensionMismatch("point has wrong dimension for block");
  switch (shape.family) {
    case Family::GaussianUnivariate:
    case Family::GaussianMultivariate: {
      auto g = detail::gaussian_from_natural(shape, block.natural);
      const double d = static_cast<double>(g.mu.size());
      Eigen::LLT<Eigen::MatrixXd> llt(g.sigma);
      Eigen::VectorXd r = llt.matrixL().solve(point - g.mu);
      const double logdet = 2.0 * llt.matrixL().toDenseMatrix().diagonal().array().log().sum();
      return -0.5 * (d * kLog2Pi + logdet + r.squaredNorm());
    }
    case Family::Gamma: {
      auto p = detail::gamma_from_natural(block.natural);
      const double x = point(0);
      if (!(x > 0.0)) return -std::numeric_limits<double>::infinity();
      return p.shape * std::log(p.rate) - lgamma(p.shape) + (p.shape - 1.0) * std::log(x) - p.rate * x;
    }
    case Family::InverseGamma: {
      auto p = detail::invgamma_from_natural(block.natural);
      const double x = point(0);
      if (!(x > 0.0)) return -std::numeric_limits<double>::infinity();
      return p.shape * std::log(p.rate) - lgamma(p.shape) - (p.shape + 1.0) * std::log(x) - p.rate / x;
    }
    case Family::Wishart: {
      auto p = detail::wishart_from_natural(shape, block.natural);
      const std::size_t k = shape.order;
      const double kd = static_cast<double>(k);
      Eigen::MatrixXd lam = unvech<double>(point, k);
      Eigen::LLT<Eigen::MatrixXd> llt(lam);
      if (llt.info() != Eigen::Success) return -std::numeric_limits<double>::infinity();
      const double logdet_lam = 2.0 * llt.matrixL().toDenseMatrix().diagonal().array().log().sum();
      const double tr = p.v.llt().solve(lam).trace();
      return 0.5 * (p.n - kd - 1.0) * logdet_lam - 0.5 * tr - 0.5 * p.n * kd * kLog2 -
             0.5 * p.n * std::log(p.v.determinant()) - mv_lgamma(0.5 * p.n, k);
    }
  }
  return 0.0;
}

/// Closed-form Wishart expectations for q(Lambda) = Wishart(V, n), including
/// the marginals of Sigma = Lambda^-1 (Sigma_kk ~ InvGamma((n-K+1)/2, (V^-1)_kk / 2)).
struct WishartExpectations {
  Eigen::MatrixXd mean_precision;
  double logdet = 0.0;
  Eigen::MatrixXd mean_covariance;  // E[Sigma] = V^-1 / (n - K - 1)
  Eigen::VectorXd log_sigma_diag;
  Eigen::VectorXd sqrt_sigma_diag;
  Eigen::VectorXd inv_sigma_diag;
};

inline WishartExpectations wishart_expectations(double n, const Eigen::MatrixXd& v) {
  const Eigen::Index k = v.rows();
  if (v.cols() != k) throw DimensionMismatch("Wishart scale matrix must be square");
  const double kd = static_cast<double>(k);
  if (!(n > kd + 1.0)) throw DomainError("Wishart degrees of freedom must exceed K + 1");
  Eigen::LLT<Eigen::MatrixXd> llt(v);
  if (llt.info() != Eigen::Success || !v.isApprox(v.transpose()))
    throw DomainError("Wishart scale matrix not symmetric positive definite");
  WishartExpectations out;
  out.mean_precision = n * v;
  const double logdet_v = 2.0 * llt.matrixL().toDenseMatrix().diagonal().array().log().sum();
  out.logdet = mv_digamma(0.5 * n, static_cast<std::size_t>(k)) + logdet_v + kd * kLog2;
  Eigen::MatrixXd v_inv = llt.solve(Eigen::MatrixXd::Identity(k, k));
  out.mean_covariance = v_inv / (n - kd - 1.0);
  const double shape = 0.5 * (n - kd + 1.0);
  const double ratio = std::exp(lgamma(shape - 0.5) - lgamma(shape));
  out.log_sigma_diag.resize(k);
  out.sqrt_sigma_diag.resize(k);
  out.inv_sigma_diag.resize(k);
  for (Eigen::Index i = 0; i < k; ++i) {
    const double scale = 0.5 * v_inv(i, i);
    out.log_sigma_diag(i) = std::log(scale) - digamma(shape);
    out.sqrt_sigma_diag(i) = std::sqrt(scale) * ratio;
    out.inv_sigma_diag(i) = shape / scale;
  }
  return out;
}

/// E[x^(1/2)] for x ~ InverseGamma(shape, scale).
inline double invgamma_sqrt_expectation(double shape, double scale) {
  if (!(shape > 0.5)) throw DomainError("inverse-gamma shape must exceed 1/2");
  if (!(scale > 0.0)) throw DomainError("inverse-gamma scale must be positive");
  return std::sqrt(scale) * std::exp(lgamma(shape - 0.5) - lgamma(shape));
}

}  // namespace lrvb
