#pragma once

// Gradient / Hessian drivers over callables that are generic in the scalar
// type: `f(const VecT<T>&) -> T` must be instantiable for double, D1 and D2.

#include <Eigen/Core>

#include "lrvb/dual.hpp"

namespace lrvb {

template <typename T>
VecT<T> promote(const Eigen::VectorXd& x) {
  VecT<T> out(x.size());
  for (Eigen::Index i = 0; i < x.size(); ++i) out(i) = T(x(i));
  return out;
}

/// Gradient by one forward pass per coordinate.
template <typename F>
Eigen::VectorXd gradient(F&& f, const Eigen::VectorXd& x, double* value = nullptr) {
  const Eigen::Index n = x.size();
  Eigen::VectorXd g(n);
  VecT<D1> xd = promote<D1>(x);
  for (Eigen::Index i = 0; i < n; ++i) {
    xd(i).d = 1.0;
    D1 out = f(xd);
    xd(i).d = 0.0;
    g(i) = out.d;
    if (value && i == 0) *value = out.v;
  }
  if (value && n == 0) *value = value_of(f(xd));
  return g;
}

/// Dense Hessian from n(n+1)/2 second-order passes. Optionally returns the
/// gradient and value computed along the way.
template <typename F>
Eigen::MatrixXd hessian(F&& f, const Eigen::VectorXd& x, Eigen::VectorXd* grad = nullptr,
                        double* value = nullptr) {
  const Eigen::Index n = x.size();
  Eigen::MatrixXd h(n, n);
  if (grad) grad->resize(n);
  VecT<D2> xd = promote<D2>(x);
  for (Eigen::Index i = 0; i < n; ++i) {
    xd(i).v.d = 1.0;
    for (Eigen::Index j = i; j < n; ++j) {
      xd(j).d.v = 1.0;
      D2 out = f(xd);
      xd(j).d.v = 0.0;
      h(i, j) = out.d.d;
      h(j, i) = out.d.d;
      if (j == i) {
        if (grad) (*grad)(i) = out.v.d;
        if (value && i == 0) *value = out.v.v;
      }
    }
    xd(i).v.d = 0.0;
  }
  return h;
}

/// For f(x, a): returns d/dx [ grad_a f(x, a) . direction ] and, optionally,
/// grad_a f . direction itself.
template <typename F>
Eigen::VectorXd cross_gradient(F&& f, const Eigen::VectorXd& x, const Eigen::VectorXd& a,
                               const Eigen::VectorXd& direction, double* directional = nullptr) {
  const Eigen::Index n = x.size();
  Eigen::VectorXd out(n);
  VecT<D2> xd = promote<D2>(x);
  VecT<D2> ad = promote<D2>(a);
  for (Eigen::Index k = 0; k < a.size(); ++k) ad(k).v.d = direction(k);
  for (Eigen::Index i = 0; i < n; ++i) {
    xd(i).d.v = 1.0;
    D2 r = f(xd, ad);
    xd(i).d.v = 0.0;
    out(i) = r.d.d;
    if (directional && i == 0) *directional = r.v.d;
  }
  if (directional && n == 0) *directional = f(xd, ad).v.d;
  return out;
}

}  // namespace lrvb
