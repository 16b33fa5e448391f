#pragma once

// Linear-response covariance: Sigma_hat = (I - V H)^-1 V, with V the
// block-diagonal covariance of sufficient statistics under q and H the
// Hessian of L = E_q[log p(x | theta)] + E_q[log p(theta | alpha)] in mean
// coordinates.

#include <cmath>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "lrvb/autodiff.hpp"
#include "lrvb/errors.hpp"
#include "lrvb/expfam.hpp"
#include "lrvb/mfvb.hpp"
#include "lrvb/model.hpp"

namespace lrvb {

struct LrvbOptions {
  double max_condition = 1e12;
  double asymmetry_warning = 1e-6;
};

class LrvbSystem {
 public:
  Eigen::MatrixXd V;
  Eigen::MatrixXd H;
  Eigen::MatrixXd sigma_hat;
  double condition = 0.0;
  double asymmetry = 0.0;  // max |Sigma - Sigma^T| / max |Sigma| before symmetrizing
  std::vector<std::string> diagnostics;

  /// Builds directly from V and H.
  static LrvbSystem from_matrices(const Eigen::MatrixXd& v, const Eigen::MatrixXd& h, const LrvbOptions& opts = {}) {
    if (v.rows() != v.cols() || h.rows() != h.cols() || v.rows() != h.rows())
      throw DimensionMismatch("V and H must be square and of equal size");
    LrvbSystem s;
    s.V = v;
    s.H = h;
    const Eigen::Index n = v.rows();
    Eigen::MatrixXd a = Eigen::MatrixXd::Identity(n, n) - v * h;
    if (n > 0) {
      Eigen::JacobiSVD<Eigen::MatrixXd> svd(a);
      const auto& sv = svd.singularValues();
      s.condition = sv(n - 1) > 0.0 ? sv(0) / sv(n - 1) : std::numeric_limits<double>::infinity();
      if (!(s.condition <= opts.max_condition))
        throw SingularSystem("I - VH is numerically singular (condition number " + std::to_string(s.condition) + ")");
    }
    s.lu_ = a.partialPivLu();
    Eigen::MatrixXd raw = s.lu_.solve(v);
    const double scale = std::max(raw.cwiseAbs().maxCoeff(), 1e-300);
    s.asymmetry = n > 0 ? (raw - raw.transpose()).cwiseAbs().maxCoeff() / scale : 0.0;
    if (s.asymmetry > opts.asymmetry_warning)
      s.diagnostics.push_back("linear-response covariance asymmetric before symmetrization: " +
                              std::to_string(s.asymmetry));
    s.sigma_hat = 0.5 * (raw + raw.transpose());
    return s;
  }

  Eigen::Index dim() const { return V.rows(); }

  /// x = (I - VH)^-1 b
  Eigen::VectorXd solve(const Eigen::VectorXd& b) const {
    check(b);
    return lu_.solve(b);
  }
  /// x = (I - VH)^-T b
  Eigen::VectorXd solve_transpose(const Eigen::VectorXd& b) const {
    check(b);
    return lu_.transpose().solve(b);
  }
  /// (I - VH)^-1 V v, i.e. Sigma_hat v without symmetrization.
  Eigen::VectorXd apply(const Eigen::VectorXd& v) const {
    check(v);
    return lu_.solve(V * v);
  }

 private:
  void check(const Eigen::VectorXd& b) const {
    if (b.size() != V.rows()) throw DimensionMismatch("vector length does not match the linear-response system");
  }
  Eigen::PartialPivLU<Eigen::MatrixXd> lu_;
};

/// Block-diagonal V at mean parameters m.
inline Eigen::MatrixXd variational_covariance(const ModelSpec& model, const Eigen::VectorXd& m) {
  const auto n = static_cast<Eigen::Index>(model.mean_dim());
  Eigen::MatrixXd v = Eigen::MatrixXd::Zero(n, n);
  for (std::size_t i = 0; i < model.blocks.size(); ++i) {
    const auto off = static_cast<Eigen::Index>(model.blocks[i].offset);
    Eigen::MatrixXd c = suff_stat_covariance(model.block(m, i));
    v.block(off, off, c.rows(), c.cols()) = c;
  }
  return v;
}

namespace detail {
struct ExpectedLogJointAt {
  const ModelSpec& model;
  const Eigen::VectorXd& alpha;
  template <typename T>
  T operator()(const VecT<T>& m) const {
    return model.expected_log_joint<T>(m, promote<T>(alpha));
  }
};
}  // namespace detail

/// d^2 L / dm dm^T, differentiated exactly (forward-over-forward AD).
inline Eigen::MatrixXd objective_hessian(const ModelSpec& model, const Eigen::VectorXd& m,
                                         const Eigen::VectorXd& alpha) {
  return hessian(detail::ExpectedLogJointAt{model, alpha}, m);
}

inline Eigen::MatrixXd objective_hessian(const ModelSpec& model, const Eigen::VectorXd& m) {
  return objective_hessian(model, m, model.hyperparams);
}

inline Eigen::VectorXd objective_gradient(const ModelSpec& model, const Eigen::VectorXd& m) {
  return gradient(detail::ExpectedLogJointAt{model, model.hyperparams}, m);
}

inline LrvbSystem build_system(const ModelSpec& model, const VbSolution& sol, const LrvbOptions& opts = {}) {
  if (!sol.converged) throw NonConvergence("linear response requires a converged variational solution");
  if (static_cast<std::size_t>(sol.mean.size()) != model.mean_dim())
    throw DimensionMismatch("solution does not match the model layout");
  return LrvbSystem::from_matrices(variational_covariance(model, sol.mean),
                                   objective_hessian(model, sol.mean), opts);
}

/// grad_h^T Sigma_hat grad_f
inline double function_sensitivity(const LrvbSystem& sys, const Eigen::VectorXd& grad_h,
                                   const Eigen::VectorXd& grad_f) {
  if (grad_h.size() != sys.dim() || grad_f.size() != sys.dim())
    throw DimensionMismatch("sensitivity vectors do not match the linear-response system");
  return grad_h.dot(sys.sigma_hat * grad_f);
}

}  // namespace lrvb
