#pragma once

// Fits the mean-field approximation by maximizing ELBO = L - E_q[log q]
// over unconstrained block coordinates.

#include <cmath>
#include <limits>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "lrvb/autodiff.hpp"
#include "lrvb/errors.hpp"
#include "lrvb/expfam.hpp"
#include "lrvb/model.hpp"

namespace lrvb {

struct FitOptions {
  double tol = 1e-8;        // on the Euclidean norm of the unconstrained gradient
  int max_iter = 10000;
  /// Below this gradient norm the optimizer switches from BFGS to Newton
  /// steps with the exact (eigenvalue-modified) Hessian.
  double newton_threshold = 1e-3;
  /// Relative ELBO change treated as evaluation roundoff. Once the predicted
  /// gain of a Newton step falls below it, a step may be accepted on
  /// gradient reduction alone.
  double elbo_noise = 1e-12;
};

struct VbSolution {
  Eigen::VectorXd mean;
  Eigen::VectorXd unconstrained;
  double elbo = 0.0;
  int iterations = 0;
  bool converged = false;
  double grad_norm = 0.0;
  std::vector<double> elbo_trace;  // ELBO after every accepted step (first entry: init)
};

/// Thrown by fit() when the iteration budget runs out; carries the last iterate.
class FitNonConvergence : public NonConvergence {
 public:
  FitNonConvergence(const std::string& what, VbSolution last) : NonConvergence(what), last_(std::move(last)) {}
  const VbSolution& last() const { return last_; }

 private:
  VbSolution last_;
};

inline Eigen::VectorXd unconstrained_from_mean(const ModelSpec& model, const Eigen::VectorXd& m) {
  if (static_cast<std::size_t>(m.size()) != model.mean_dim())
    throw DimensionMismatch("mean vector has wrong length");
  Eigen::VectorXd u(m.size());
  for (std::size_t i = 0; i < model.blocks.size(); ++i) {
    const auto& b = model.blocks[i];
    u.segment(static_cast<Eigen::Index>(b.offset), static_cast<Eigen::Index>(b.shape.stat_dim())) =
        unconstrained_from_block(model.block(m, i));
  }
  return u;
}

template <typename T>
VecT<T> mean_from_unconstrained(const ModelSpec& model, const VecT<T>& u) {
  VecT<T> m(u.size());
  for (const auto& b : model.blocks) {
    const auto off = static_cast<Eigen::Index>(b.offset);
    const auto len = static_cast<Eigen::Index>(b.shape.stat_dim());
    m.segment(off, len) = mean_from_unconstrained<T>(b.shape, u.segment(off, len));
  }
  return m;
}

inline Eigen::VectorXd mean_from_unconstrained(const ModelSpec& model, const Eigen::VectorXd& u) {
  return mean_from_unconstrained<double>(model, VecT<double>(u));
}

/// ELBO as a function of unconstrained coordinates.
template <typename T>
T elbo_unconstrained(const ModelSpec& model, const VecT<T>& u, const VecT<T>& alpha) {
  VecT<T> m = mean_from_unconstrained<T>(model, u);
  T out = model.expected_log_joint<T>(m, alpha);
  for (const auto& b : model.blocks) {
    const auto off = static_cast<Eigen::Index>(b.offset);
    const auto len = static_cast<Eigen::Index>(b.shape.stat_dim());
    out += entropy_from_unconstrained<T>(b.shape, u.segment(off, len));
  }
  return out;
}

/// ELBO = L(m) + sum_k entropy(q_k) at mean parameters m. Additive constants
/// of the prior are whatever the model keeps; the conjugate fixtures keep all
/// of them, so there the ELBO at the exact posterior is the log evidence.
inline double elbo(const ModelSpec& model, const Eigen::VectorXd& m, const Eigen::VectorXd& alpha) {
  if (static_cast<std::size_t>(m.size()) != model.mean_dim())
    throw DimensionMismatch("mean vector has wrong length");
  double out = model.expected_log_joint<double>(m, alpha);
  for (std::size_t i = 0; i < model.blocks.size(); ++i) out += entropy(model.block(m, i));
  return out;
}

inline double elbo(const ModelSpec& model, const Eigen::VectorXd& m) {
  return elbo(model, m, model.hyperparams);
}

namespace detail {

struct ElboAt {
  const ModelSpec& model;
  const Eigen::VectorXd& alpha;
  template <typename T>
  T operator()(const VecT<T>& u) const {
    return elbo_unconstrained<T>(model, u, promote<T>(alpha));
  }
};

inline double safe_elbo(const ElboAt& f, const Eigen::VectorXd& u) {
  try {
    const double v = f(VecT<double>(u));
    return std::isfinite(v) ? v : -std::numeric_limits<double>::infinity();
  } catch (const DomainError&) {
    return -std::numeric_limits<double>::infinity();
  }
}

// Ascent direction from the exact Hessian with eigenvalues flipped/floored
// so that the quadratic model is concave.
inline Eigen::VectorXd newton_direction(const Eigen::MatrixXd& h, const Eigen::VectorXd& g) {
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> eig(h);
  const Eigen::VectorXd& lam = eig.eigenvalues();
  const double floor = 1e-10 * std::max(1.0, lam.cwiseAbs().maxCoeff());
  Eigen::VectorXd coef = eig.eigenvectors().transpose() * g;
  for (Eigen::Index i = 0; i < lam.size(); ++i) coef(i) /= std::max(std::abs(lam(i)), floor);
  return eig.eigenvectors() * coef;
}

}  // namespace detail

/// Local maximizer of the ELBO, starting from mean parameters `init`.
/// Deterministic in (model, init, opts).
inline VbSolution fit(const ModelSpec& model, const Eigen::VectorXd& init, const FitOptions& opts,
                      const Eigen::VectorXd& alpha) {
  if (static_cast<std::size_t>(init.size()) != model.mean_dim())
    throw DimensionMismatch("initial mean vector has wrong length");
  const detail::ElboAt f{model, alpha};
  Eigen::VectorXd u = unconstrained_from_mean(model, init);
  const Eigen::Index n = u.size();

  double value = 0.0;
  Eigen::VectorXd g = gradient(f, u, &value);
  if (!std::isfinite(value) || !g.allFinite()) throw DomainError("ELBO not finite at the initial point");

  VbSolution sol;
  sol.elbo_trace.push_back(value);
  Eigen::MatrixXd inv_hess = Eigen::MatrixXd::Identity(n, n);
  bool fresh_bfgs = true;

  const double c1 = 1e-4;
  int iter = 0;
  for (; iter < opts.max_iter; ++iter) {
    const double gnorm = g.norm();
    if (gnorm <= opts.tol) break;

    const bool use_newton = gnorm < opts.newton_threshold;
    Eigen::VectorXd dir;
    if (use_newton) {
      Eigen::VectorXd gh;
      Eigen::MatrixXd h = hessian(f, u, &gh);
      dir = detail::newton_direction(h, g);
    } else {
      dir = inv_hess * g;
    }
    double slope = g.dot(dir);
    if (!(slope > 0.0)) {
      // stale curvature; restart from steepest ascent
      inv_hess.setIdentity();
      fresh_bfgs = true;
      dir = g;
      slope = g.squaredNorm();
    }

    const double noise = opts.elbo_noise * (1.0 + std::abs(value));
    double t = 1.0;
    if (!use_newton && fresh_bfgs) t = std::min(1.0, 1.0 / gnorm);
    bool accepted = false;
    Eigen::VectorXd u_new, g_new;
    double v_new = 0.0;

    if (use_newton && 0.5 * slope <= noise) {
      // Roundoff regime: the ELBO can no longer resolve the predicted gain, so
      // Armijo would pass on noise. Accept a (damped) Newton step only if it
      // reduces the gradient norm without a drop beyond roundoff.
      for (int ls = 0; ls < 10 && !accepted; ++ls, t *= 0.5) {
        u_new = u + t * dir;
        v_new = detail::safe_elbo(f, u_new);
        if (!(v_new >= value - noise)) continue;
        double vv = 0.0;
        g_new = gradient(f, u_new, &vv);
        accepted = g_new.allFinite() && g_new.norm() < gnorm;
      }
      if (!accepted) {
        sol.unconstrained = u;
        sol.mean = mean_from_unconstrained(model, u);
        sol.elbo = value;
        sol.iterations = iter;
        sol.grad_norm = gnorm;
        throw FitNonConvergence("stalled at roundoff with gradient norm " + std::to_string(gnorm), sol);
      }
    } else {
      for (int ls = 0; ls < 60; ++ls) {
        u_new = u + t * dir;
        v_new = detail::safe_elbo(f, u_new);
        if (v_new >= value + c1 * t * slope) {
          accepted = true;
          break;
        }
        t *= 0.5;
      }
    }
    if (!accepted && !use_newton) {
      // BFGS stalled: retry with a Newton direction
      Eigen::VectorXd gh;
      Eigen::MatrixXd h = hessian(f, u, &gh);
      dir = detail::newton_direction(h, g);
      slope = g.dot(dir);
      t = 1.0;
      for (int ls = 0; ls < 60 && !accepted; ++ls) {
        u_new = u + t * dir;
        v_new = detail::safe_elbo(f, u_new);
        if (v_new >= value + c1 * t * slope) accepted = true;
        else t *= 0.5;
      }
    }
    if (!accepted) throw DomainViolation("line search failed at gradient norm " + std::to_string(gnorm));

    if (g_new.size() == 0) {
      double vv = 0.0;
      g_new = gradient(f, u_new, &vv);
    }
    // BFGS update of the inverse Hessian of -ELBO
    const Eigen::VectorXd s = u_new - u;
    const Eigen::VectorXd y = g - g_new;
    const double sy = s.dot(y);
    if (sy > 1e-12 * s.norm() * y.norm()) {
      if (fresh_bfgs) {
        inv_hess = (sy / y.squaredNorm()) * Eigen::MatrixXd::Identity(n, n);
        fresh_bfgs = false;
      }
      const double rho = 1.0 / sy;
      const Eigen::VectorXd hy = inv_hess * y;
      inv_hess += rho * rho * (y.dot(hy) + sy) * (s * s.transpose()) -
                  rho * (hy * s.transpose() + s * hy.transpose());
    }
    u = u_new;
    value = v_new;
    g = g_new;
    sol.elbo_trace.push_back(value);
  }

  sol.unconstrained = u;
  sol.mean = mean_from_unconstrained(model, u);
  sol.elbo = value;
  sol.iterations = iter;
  sol.grad_norm = g.norm();
  sol.converged = sol.grad_norm <= opts.tol;
  if (!sol.converged)
    throw FitNonConvergence("no convergence after " + std::to_string(opts.max_iter) +
                                " iterations (gradient norm " + std::to_string(sol.grad_norm) + ")",
                            sol);
  return sol;
}

inline VbSolution fit(const ModelSpec& model, const Eigen::VectorXd& init, const FitOptions& opts = {}) {
  return fit(model, init, opts, model.hyperparams);
}

inline VbSolution fit(const ModelSpec& model) { return fit(model, model.default_init, FitOptions{}); }

/// Gradient of the ELBO in unconstrained coordinates (for diagnostics).
inline Eigen::VectorXd elbo_gradient(const ModelSpec& model, const Eigen::VectorXd& u) {
  return gradient(detail::ElboAt{model, model.hyperparams}, u);
}

}  // namespace lrvb
