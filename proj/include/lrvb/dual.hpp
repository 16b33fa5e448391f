#pragma once

// Forward-mode dual numbers. Dual<double> carries one directional first
// derivative; Dual<Dual<double>> carries a mixed second derivative, which is
// how the library forms exact Hessians and cross-derivatives of the
// variational objective.

#include <cmath>
#include <limits>
#include <type_traits>

#include <Eigen/Core>
#include <boost/math/special_functions/digamma.hpp>
#include <boost/math/special_functions/gamma.hpp>
#include <boost/math/special_functions/polygamma.hpp>
#include <boost/math/special_functions/trigamma.hpp>

namespace lrvb {

using std::abs;
using std::exp;
using std::log;
using std::log1p;
using std::pow;
using std::sqrt;

inline double lgamma(double x) { return boost::math::lgamma(x); }
inline double digamma(double x) { return boost::math::digamma(x); }
inline double trigamma(double x) { return boost::math::trigamma(x); }
inline double polygamma(int order, double x) {
  if (order == 0) return digamma(x);
  if (order == 1) return trigamma(x);
  return boost::math::polygamma(order, x);
}

template <typename T>
struct Dual {
  T v{};
  T d{};

  constexpr Dual() = default;
  constexpr Dual(double x) : v(x), d(0.0) {}
  template <typename U = T, std::enable_if_t<!std::is_same_v<U, double>, int> = 0>
  constexpr Dual(const T& x) : v(x), d(0.0) {}
  constexpr Dual(const T& x, const T& dx) : v(x), d(dx) {}

  Dual& operator+=(const Dual& o) { v += o.v; d += o.d; return *this; }
  Dual& operator-=(const Dual& o) { v -= o.v; d -= o.d; return *this; }
  Dual& operator*=(const Dual& o) { *this = *this * o; return *this; }
  Dual& operator/=(const Dual& o) { *this = *this / o; return *this; }

  friend Dual operator-(const Dual& a) { return {-a.v, -a.d}; }
  friend Dual operator+(const Dual& a) { return a; }

  friend Dual operator+(const Dual& a, const Dual& b) { return {a.v + b.v, a.d + b.d}; }
  friend Dual operator-(const Dual& a, const Dual& b) { return {a.v - b.v, a.d - b.d}; }
  friend Dual operator*(const Dual& a, const Dual& b) { return {a.v * b.v, a.d * b.v + a.v * b.d}; }
  friend Dual operator/(const Dual& a, const Dual& b) {
    T q = a.v / b.v;
    return {q, (a.d - q * b.d) / b.v};
  }

  friend Dual operator+(const Dual& a, double b) { return {a.v + b, a.d}; }
  friend Dual operator+(double a, const Dual& b) { return {a + b.v, b.d}; }
  friend Dual operator-(const Dual& a, double b) { return {a.v - b, a.d}; }
  friend Dual operator-(double a, const Dual& b) { return {a - b.v, -b.d}; }
  friend Dual operator*(const Dual& a, double b) { return {a.v * b, a.d * b}; }
  friend Dual operator*(double a, const Dual& b) { return {a * b.v, a * b.d}; }
  friend Dual operator/(const Dual& a, double b) { return {a.v / b, a.d / b}; }
  friend Dual operator/(double a, const Dual& b) {
    T q = a / b.v;
    return {q, -q * b.d / b.v};
  }
};

template <typename T>
struct is_dual : std::false_type {};
template <typename T>
struct is_dual<Dual<T>> : std::true_type {};

inline double value_of(double x) { return x; }
template <typename T>
double value_of(const Dual<T>& x) {
  return value_of(x.v);
}

inline bool all_finite(double x) { return std::isfinite(x); }
template <typename T>
bool all_finite(const Dual<T>& x) {
  return all_finite(x.v) && all_finite(x.d);
}

#define LRVB_DUAL_COMPARE(op)                                                                 \
  template <typename T>                                                                       \
  bool operator op(const Dual<T>& a, const Dual<T>& b) { return value_of(a) op value_of(b); } \
  template <typename T>                                                                       \
  bool operator op(const Dual<T>& a, double b) { return value_of(a) op b; }                  \
  template <typename T>                                                                       \
  bool operator op(double a, const Dual<T>& b) { return a op value_of(b); }

LRVB_DUAL_COMPARE(<)
LRVB_DUAL_COMPARE(>)
LRVB_DUAL_COMPARE(<=)
LRVB_DUAL_COMPARE(>=)
LRVB_DUAL_COMPARE(==)
LRVB_DUAL_COMPARE(!=)
#undef LRVB_DUAL_COMPARE

template <typename T>
Dual<T> exp(const Dual<T>& x) {
  T e = exp(x.v);
  return {e, e * x.d};
}

template <typename T>
Dual<T> log(const Dual<T>& x) {
  return {log(x.v), x.d / x.v};
}

template <typename T>
Dual<T> log1p(const Dual<T>& x) {
  return {log1p(x.v), x.d / (1.0 + x.v)};
}

template <typename T>
Dual<T> sqrt(const Dual<T>& x) {
  T s = sqrt(x.v);
  return {s, x.d / (2.0 * s)};
}

template <typename T>
Dual<T> pow(const Dual<T>& x, double p) {
  return {pow(x.v, p), p * pow(x.v, p - 1.0) * x.d};
}

template <typename T>
Dual<T> abs(const Dual<T>& x) {
  return x.v < 0.0 ? -x : x;
}

template <typename T>
Dual<T> lgamma(const Dual<T>& x) {
  return {lgamma(x.v), digamma(x.v) * x.d};
}

template <typename T>
Dual<T> polygamma(int order, const Dual<T>& x) {
  return {polygamma(order, x.v), polygamma(order + 1, x.v) * x.d};
}

template <typename T>
Dual<T> digamma(const Dual<T>& x) {
  return polygamma(0, x);
}

template <typename T>
Dual<T> trigamma(const Dual<T>& x) {
  return polygamma(1, x);
}

using D1 = Dual<double>;
using D2 = Dual<D1>;

template <typename T>
using VecT = Eigen::Matrix<T, Eigen::Dynamic, 1>;
template <typename T>
using MatT = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic>;

}  // namespace lrvb

namespace Eigen {

template <typename T>
struct NumTraits<lrvb::Dual<T>> : NumTraits<double> {
  using Real = lrvb::Dual<T>;
  using NonInteger = lrvb::Dual<T>;
  using Nested = lrvb::Dual<T>;
  using Literal = lrvb::Dual<T>;
  enum {
    IsComplex = 0,
    IsInteger = 0,
    IsSigned = 1,
    RequireInitialization = 1,
    ReadCost = 2 * NumTraits<T>::ReadCost,
    AddCost = 2 * NumTraits<T>::AddCost,
    MulCost = 3 * NumTraits<T>::MulCost
  };
};

}  // namespace Eigen
