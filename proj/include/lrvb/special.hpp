#pragma once

#include <cmath>
#include <cstddef>

#include <boost/math/constants/constants.hpp>

#include "lrvb/dual.hpp"
#include "lrvb/errors.hpp"

namespace lrvb {

inline constexpr double kLogPi = 1.1447298858494002;
inline constexpr double kLog2 = 0.69314718055994531;
inline constexpr double kLog2Pi = 1.8378770664093455;

/// Multivariate digamma: sum_{i=1..p} psi(x + (1 - i) / 2).
template <typename T>
T mv_digamma(const T& x, std::size_t p) {
  T out(0.0);
  for (std::size_t i = 1; i <= p; ++i) out += digamma(x + 0.5 * (1.0 - static_cast<double>(i)));
  return out;
}

/// Derivative of mv_digamma in x.
template <typename T>
T mv_trigamma(const T& x, std::size_t p) {
  T out(0.0);
  for (std::size_t i = 1; i <= p; ++i) out += trigamma(x + 0.5 * (1.0 - static_cast<double>(i)));
  return out;
}

/// log of the multivariate gamma function Gamma_p(x).
template <typename T>
T mv_lgamma(const T& x, std::size_t p) {
  const double pd = static_cast<double>(p);
  T out(0.25 * pd * (pd - 1.0) * kLogPi);
  for (std::size_t i = 1; i <= p; ++i) out += lgamma(x + 0.5 * (1.0 - static_cast<double>(i)));
  return out;
}

template <typename T>
T log_beta(const T& a, const T& b) {
  return lgamma(a) + lgamma(b) - lgamma(a + b);
}

/// log of the LKJ normalizer c_d(eta) = integral over d x d correlation
/// matrices of |R|^(eta - 1).
template <typename T>
T lkj_log_normalizer(const T& eta, std::size_t dim) {
  if (dim < 2) return T(0.0);
  const double d = static_cast<double>(dim);
  T out(0.0);
  for (std::size_t k = 1; k < dim; ++k) {
    const double kd = static_cast<double>(k);
    const double shift = 0.5 * (d - kd - 1.0);
    out += (2.0 * eta - 2.0 + d - kd) * (d - kd) * kLog2;
    out += (d - kd) * log_beta(eta + shift, eta + shift);
  }
  return out;
}

// Small dense routines that work for any scalar (double or Dual). Eigen's
// decompositions are used for plain doubles elsewhere.

/// Lower Cholesky factor. Throws DomainError when the matrix is not
/// positive definite.
template <typename T>
MatT<T> cholesky_lower(const MatT<T>& a) {
  const Eigen::Index n = a.rows();
  MatT<T> l = MatT<T>::Constant(n, n, T(0.0));
  for (Eigen::Index j = 0; j < n; ++j) {
    T diag = a(j, j);
    for (Eigen::Index k = 0; k < j; ++k) diag -= l(j, k) * l(j, k);
    if (!(value_of(diag) > 0.0)) throw DomainError("matrix is not positive definite");
    l(j, j) = sqrt(diag);
    for (Eigen::Index i = j + 1; i < n; ++i) {
      T s = a(i, j);
      for (Eigen::Index k = 0; k < j; ++k) s -= l(i, k) * l(j, k);
      l(i, j) = s / l(j, j);
    }
  }
  return l;
}

template <typename T>
T logdet_pd(const MatT<T>& a) {
  MatT<T> l = cholesky_lower(a);
  T out(0.0);
  for (Eigen::Index i = 0; i < l.rows(); ++i) out += 2.0 * log(l(i, i));
  return out;
}

template <typename T>
MatT<T> inverse_pd(const MatT<T>& a) {
  MatT<T> l = cholesky_lower(a);
  const Eigen::Index n = a.rows();
  // invert L by forward substitution, then A^-1 = L^-T L^-1
  MatT<T> li = MatT<T>::Constant(n, n, T(0.0));
  for (Eigen::Index j = 0; j < n; ++j) {
    li(j, j) = 1.0 / l(j, j);
    for (Eigen::Index i = j + 1; i < n; ++i) {
      T s(0.0);
      for (Eigen::Index k = j; k < i; ++k) s -= l(i, k) * li(k, j);
      li(i, j) = s / l(i, i);
    }
  }
  MatT<T> out = MatT<T>::Constant(n, n, T(0.0));
  for (Eigen::Index i = 0; i < n; ++i)
    for (Eigen::Index j = 0; j <= i; ++j) {
      T s(0.0);
      for (Eigen::Index k = i; k < n; ++k) s += li(k, i) * li(k, j);
      out(i, j) = s;
      out(j, i) = s;
    }
  return out;
}

/// Number of entries in the half-vectorization of a k x k symmetric matrix.
constexpr std::size_t vech_size(std::size_t k) { return k * (k + 1) / 2; }

/// Half-vectorization, column-major lower triangle: (0,0), (1,0), ..., (1,1), ...
template <typename T>
VecT<T> vech(const MatT<T>& a) {
  const Eigen::Index n = a.rows();
  VecT<T> out(static_cast<Eigen::Index>(vech_size(static_cast<std::size_t>(n))));
  Eigen::Index idx = 0;
  for (Eigen::Index j = 0; j < n; ++j)
    for (Eigen::Index i = j; i < n; ++i) out(idx++) = a(i, j);
  return out;
}

template <typename T, typename Vec>
MatT<T> unvech(const Vec& v, std::size_t k) {
  const auto n = static_cast<Eigen::Index>(k);
  MatT<T> out(n, n);
  Eigen::Index idx = 0;
  for (Eigen::Index j = 0; j < n; ++j)
    for (Eigen::Index i = j; i < n; ++i) {
      out(i, j) = v(idx);
      out(j, i) = v(idx);
      ++idx;
    }
  return out;
}

/// Position of entry (i, j), i >= j, inside vech.
constexpr std::size_t vech_index(std::size_t i, std::size_t j, std::size_t k) {
  if (i < j) return vech_index(j, i, k);
  return j * k - j * (j - 1) / 2 + (i - j);
}

}  // namespace lrvb
