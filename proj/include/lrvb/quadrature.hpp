#pragma once

// Adaptive Gauss-Kronrod quadrature (Boost.Math) over 1-D and nested 2-D
// domains. Unbounded domains are centered and scaled before integration so
// the integrand's mass sits near the origin; (0, inf) is mapped through log.

#include <cmath>
#include <functional>
#include <limits>
#include <string>

#include <boost/math/quadrature/gauss_kronrod.hpp>

#include "lrvb/errors.hpp"

namespace lrvb {

struct QuadratureOptions {
  double abs_tol = 1e-8;
  double rel_tol = 1e-10;
  /// Reported error above max(abs_tol, fail_rel * |value|) raises QuadratureFailure.
  double fail_rel = 1e-6;
  unsigned max_depth = 18;
};

struct QuadResult {
  double value = 0.0;
  double error = 0.0;
};

/// A 1-D integration domain.
struct Domain1D {
  enum class Kind { Real, PositiveReal, Interval } kind = Kind::Real;
  double lo = 0.0, hi = 0.0;        // Interval only
  double center = 0.0, scale = 1.0;  // Real: x = center + scale t; PositiveReal: log x = center + scale t

  static Domain1D real(double center = 0.0, double scale = 1.0) { return {Kind::Real, 0, 0, center, scale}; }
  static Domain1D positive(double log_center = 0.0, double log_scale = 1.0) {
    return {Kind::PositiveReal, 0, 0, log_center, log_scale};
  }
  static Domain1D interval(double lo, double hi) { return {Kind::Interval, lo, hi, 0.0, 1.0}; }
};

namespace detail {

inline void check_quadrature(const QuadResult& r, const QuadratureOptions& opts, const char* what) {
  if (!std::isfinite(r.value) || !std::isfinite(r.error))
    throw QuadratureFailure(std::string(what) + ": non-finite integral");
  if (r.error > std::max(opts.abs_tol, opts.fail_rel * std::abs(r.value)))
    throw QuadratureFailure(std::string(what) + ": error estimate " + std::to_string(r.error) +
                            " exceeds tolerance for value " + std::to_string(r.value));
}

template <typename F>
QuadResult gk_raw(F&& f, double a, double b, const QuadratureOptions& opts) {
  double err = 0.0;
  double tol = opts.rel_tol;
  const double v = boost::math::quadrature::gauss_kronrod<double, 31>::integrate(f, a, b, opts.max_depth, tol, &err);
  return {v, err};
}

}  // namespace detail

/// Integral of f over the domain (not checked against the failure threshold).
inline QuadResult integrate_unchecked(const std::function<double(double)>& f, const Domain1D& dom,
                                      const QuadratureOptions& opts = {}) {
  const double inf = std::numeric_limits<double>::infinity();
  switch (dom.kind) {
    case Domain1D::Kind::Interval:
      return detail::gk_raw(f, dom.lo, dom.hi, opts);
    case Domain1D::Kind::Real: {
      auto g = [&](double t) {
        const double v = f(dom.center + dom.scale * t);
        return std::isfinite(v) ? v * dom.scale : 0.0;
      };
      return detail::gk_raw(g, -inf, inf, opts);
    }
    case Domain1D::Kind::PositiveReal: {
      auto g = [&](double t) {
        const double lx = dom.center + dom.scale * t;
        const double x = std::exp(lx);
        if (!(x > 0.0) || !std::isfinite(x)) return 0.0;
        const double v = f(x) * x * dom.scale;
        return std::isfinite(v) ? v : 0.0;
      };
      return detail::gk_raw(g, -inf, inf, opts);
    }
  }
  return {};
}

inline QuadResult integrate(const std::function<double(double)>& f, const Domain1D& dom,
                            const QuadratureOptions& opts = {}) {
  QuadResult r = integrate_unchecked(f, dom, opts);
  detail::check_quadrature(r, opts, "quadrature");
  return r;
}

/// Nested 2-D integral of f(x, y) over dx x dy.
inline QuadResult integrate2(const std::function<double(double, double)>& f, const Domain1D& dx, const Domain1D& dy,
                             const QuadratureOptions& opts = {}) {
  double inner_err = 0.0;
  QuadratureOptions inner = opts;
  inner.rel_tol = opts.rel_tol;
  auto outer = [&](double x) {
    QuadResult r = integrate_unchecked([&](double y) { return f(x, y); }, dy, inner);
    inner_err = std::max(inner_err, std::abs(r.error));
    return r.value;
  };
  QuadResult r = integrate_unchecked(outer, dx, opts);
  r.error += inner_err;
  detail::check_quadrature(r, opts, "2-D quadrature");
  return r;
}

/// E[g] under an unnormalized density exp(log_density) on a 1-D domain.
/// log_density is shifted by `log_shift` before exponentiation to avoid overflow.
inline double quadrature_expectation(const std::function<double(double)>& log_density,
                                     const std::function<double(double)>& g, const Domain1D& dom,
                                     double log_shift = 0.0, const QuadratureOptions& opts = {}) {
  auto w = [&](double x) { return std::exp(log_density(x) - log_shift); };
  const QuadResult z = integrate(w, dom, opts);
  const QuadResult num = integrate([&](double x) { return g(x) * w(x); }, dom, opts);
  if (!(z.value > 0.0)) throw QuadratureFailure("density integrates to zero");
  return num.value / z.value;
}

}  // namespace lrvb
