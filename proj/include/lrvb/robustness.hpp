#pragma once

// Local robustness measures built on the linear-response system:
// hyperparameter sensitivity, epsilon-contamination sensitivity, influence
// functions, and the worst-case perturbation in a p-norm ball.

#include <cmath>
#include <functional>
#include <limits>
#include <optional>
#include <random>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "lrvb/autodiff.hpp"
#include "lrvb/errors.hpp"
#include "lrvb/expfam.hpp"
#include "lrvb/linear_response.hpp"
#include "lrvb/mfvb.hpp"
#include "lrvb/model.hpp"
#include "lrvb/parallel.hpp"
#include "lrvb/quadrature.hpp"

namespace lrvb {

// ---------------------------------------------------------------------------
// Hyperparameters.

namespace detail {
struct PriorAt {
  const ModelSpec& model;
  template <typename T>
  T operator()(const VecT<T>& m, const VecT<T>& a) const {
    return model.expected_log_prior(m, a);
  }
};
}  // namespace detail

/// grad_f = d/dm [ d E_q[log p(theta | alpha)] / d alpha . delta_alpha ].
inline Eigen::VectorXd prior_cross_gradient(const ModelSpec& model, const Eigen::VectorXd& m,
                                            const Eigen::VectorXd& delta_alpha) {
  if (delta_alpha.size() != model.hyperparams.size())
    throw DimensionMismatch("hyperparameter direction has wrong length");
  Eigen::VectorXd g;
  try {
    g = cross_gradient(detail::PriorAt{model}, m, model.hyperparams, delta_alpha);
  } catch (const DomainError& e) {
    throw NonDifferentiablePrior(std::string("prior not differentiable in alpha: ") + e.what());
  }
  if (!g.allFinite()) throw NonDifferentiablePrior("prior derivative in alpha is not finite");
  return g;
}

/// dE_q[m] / dt along alpha(t) = alpha + t delta_alpha.
inline Eigen::VectorXd hyperparam_sensitivity(const ModelSpec& model, const VbSolution& sol, const LrvbSystem& sys,
                                              const Eigen::VectorXd& delta_alpha) {
  return sys.sigma_hat * prior_cross_gradient(model, sol.mean, delta_alpha);
}

/// d h / dt for h(m) = target . m.
inline double hyperparam_sensitivity(const ModelSpec& model, const VbSolution& sol, const LrvbSystem& sys,
                                     const Eigen::VectorXd& delta_alpha, const Eigen::VectorXd& target) {
  return function_sensitivity(sys, target, prior_cross_gradient(model, sol.mean, delta_alpha));
}

// ---------------------------------------------------------------------------
// Contamination.

struct Contaminant {
  enum class Kind { Dirac, Density } kind = Kind::Dirac;
  Eigen::VectorXd point;                                          // Dirac
  std::function<double(const Eigen::VectorXd&)> log_density;      // Density (normalized)
  std::function<Eigen::VectorXd(std::mt19937_64&)> sample;        // optional
  /// Optional location / spread of the density, used to place quadrature
  /// nodes for the normalization check (defaults to q's).
  Eigen::VectorXd center, scale;

  static Contaminant dirac(const Eigen::VectorXd& p) {
    Contaminant c;
    c.kind = Kind::Dirac;
    c.point = p;
    return c;
  }
  static Contaminant density(std::function<double(const Eigen::VectorXd&)> log_pdf,
                             std::function<Eigen::VectorXd(std::mt19937_64&)> sampler = {}) {
    Contaminant c;
    c.kind = Kind::Density;
    c.log_density = std::move(log_pdf);
    c.sample = std::move(sampler);
    return c;
  }
};

struct ContaminationSpec {
  std::size_t block_index = 0;
  Contaminant contaminant;
  double epsilon = 0.0;  // the mixing weight; derivatives are taken at 0
};

namespace detail {

inline const PriorMarginal& prior_marginal(const ModelSpec& model, std::size_t block) {
  if (block >= model.blocks.size()) throw DimensionMismatch("block index out of range");
  auto it = model.prior_marginals.find(block);
  if (it == model.prior_marginals.end())
    throw DomainError("the prior does not factor across block '" + model.blocks[block].name + "'");
  return it->second;
}

// Quadrature domains matched to q for one coordinate of a block.
inline std::vector<Domain1D> block_domains(const ExpFamBlock& q) {
  switch (q.family) {
    case Family::GaussianUnivariate: {
      const double mu = q.mean(0), sd = std::sqrt(q.mean(1) - mu * mu);
      return {Domain1D::real(mu, sd)};
    }
    case Family::GaussianMultivariate: {
      if (q.order != 2) throw DomainError("contamination quadrature supports 1-D and 2-D blocks only");
      std::vector<Domain1D> out;
      for (int i = 0; i < 2; ++i) {
        const double mu = q.mean(i);
        const double var = q.mean(2 + static_cast<Eigen::Index>(vech_index(i, i, 2))) - mu * mu;
        out.push_back(Domain1D::real(mu, std::sqrt(var)));
      }
      return out;
    }
    case Family::Gamma: {
      const double a = q.natural(1) + 1.0;
      return {Domain1D::positive(q.mean(1), std::sqrt(trigamma(a)))};
    }
    case Family::InverseGamma: {
      const double a = -q.natural(1) - 1.0;
      return {Domain1D::positive(q.mean(1), std::sqrt(trigamma(a)))};
    }
    case Family::Wishart:
      break;
  }
  throw DomainError("contamination quadrature is not available for Wishart blocks");
}

// Integral over the block's sample space of g(point), 1-D or nested 2-D.
inline QuadResult block_integral(const std::function<double(const Eigen::VectorXd&)>& g,
                                 const std::vector<Domain1D>& dom, const QuadratureOptions& opts) {
  if (dom.size() == 1) {
    Eigen::VectorXd p(1);
    return integrate([&](double x) { p(0) = x; return g(p); }, dom[0], opts);
  }
  return integrate2([&](double x, double y) { return g(Eigen::Vector2d(x, y)); }, dom[0], dom[1], opts);
}

}  // namespace detail

/// Right-hand side E_q[(T(theta_i) - m_i) p_c / p] placed in block i, zeros elsewhere.
inline Eigen::VectorXd contamination_rhs(const ModelSpec& model, const VbSolution& sol,
                                         const ContaminationSpec& spec, const QuadratureOptions& qopts = {}) {
  const PriorMarginal& log_prior = detail::prior_marginal(model, spec.block_index);
  const auto& layout = model.blocks[spec.block_index];
  const ExpFamBlock q = model.block(sol.mean, spec.block_index);
  const Eigen::VectorXd m_i = q.mean;
  const auto off = static_cast<Eigen::Index>(layout.offset);
  Eigen::VectorXd rhs = Eigen::VectorXd::Zero(sol.mean.size());
  const Contaminant& c = spec.contaminant;

  if (c.kind == Contaminant::Kind::Dirac) {
    if (static_cast<std::size_t>(c.point.size()) != layout.shape.point_dim())
      throw DimensionMismatch("contamination point has wrong dimension for block '" + layout.name + "'");
    const double lp = log_prior(c.point, model.hyperparams);
    if (!(lp > std::log(1e-300))) throw ZeroPriorDensity("prior density at the contamination point is below 1e-300");
    const double w = std::exp(log_density(q, c.point) - lp);
    rhs.segment(off, m_i.size()) = w * (sufficient_statistics(layout.shape, c.point) - m_i);
    return rhs;
  }

  if (!c.log_density) throw DomainError("density contaminant has no log density");
  std::vector<Domain1D> dom = detail::block_domains(q);
  std::vector<Domain1D> norm_dom = dom;
  if (c.center.size() == static_cast<Eigen::Index>(dom.size()) && c.scale.size() == c.center.size())
    for (std::size_t j = 0; j < dom.size(); ++j) {
      norm_dom[j].center = c.center(static_cast<Eigen::Index>(j));
      norm_dom[j].scale = c.scale(static_cast<Eigen::Index>(j));
    }
  const QuadResult z = detail::block_integral([&](const Eigen::VectorXd& p) { return std::exp(c.log_density(p)); },
                                              norm_dom, qopts);
  if (std::abs(z.value - 1.0) > 1e-4)
    throw NormalizationFailure("contaminating density integrates to " + std::to_string(z.value) + ", not 1");

  for (Eigen::Index j = 0; j < m_i.size(); ++j) {
    auto g = [&](const Eigen::VectorXd& p) {
      const double lw = log_density(q, p) + c.log_density(p) - log_prior(p, model.hyperparams);
      if (!std::isfinite(lw)) return 0.0;
      return std::exp(lw) * (sufficient_statistics(layout.shape, p)(j) - m_i(j));
    };
    rhs(off + j) = detail::block_integral(g, dom, qopts).value;
  }
  return rhs;
}

/// d E_q[h] / d epsilon at epsilon = 0 for h(m) = target . m.
inline double contamination_sensitivity(const ModelSpec& model, const VbSolution& sol, const LrvbSystem& sys,
                                        const ContaminationSpec& spec, const Eigen::VectorXd& target,
                                        const QuadratureOptions& qopts = {}) {
  if (target.size() != sys.dim()) throw DimensionMismatch("target gradient has wrong length");
  return target.dot(sys.solve(contamination_rhs(model, sol, spec, qopts)));
}

/// Influence function: dE_q[m] / d epsilon for a point mass at theta0 in block i.
inline Eigen::VectorXd influence_function(const ModelSpec& model, const VbSolution& sol, const LrvbSystem& sys,
                                          std::size_t block_index, const Eigen::VectorXd& theta0) {
  ContaminationSpec spec{block_index, Contaminant::dirac(theta0), 0.0};
  return sys.solve(contamination_rhs(model, sol, spec));
}

/// target . influence at each point; evaluated in parallel over points.
inline std::vector<double> influence_grid(const ModelSpec& model, const VbSolution& sol, const LrvbSystem& sys,
                                          std::size_t block_index, const Eigen::VectorXd& target,
                                          const std::vector<Eigen::VectorXd>& points,
                                          unsigned threads = default_threads()) {
  if (target.size() != sys.dim()) throw DimensionMismatch("target gradient has wrong length");
  std::vector<double> out(points.size());
  parallel_for(
      points.size(),
      [&](std::size_t i) {
        ContaminationSpec spec{block_index, Contaminant::dirac(points[i]), 0.0};
        out[i] = contamination_sensitivity(model, sol, sys, spec, target);
      },
      threads);
  return out;
}

// ---------------------------------------------------------------------------
// Worst case in the ball (integral |p_c / p|^p dP)^(1/p) <= 1.

struct WorstCaseResult {
  std::function<double(double)> a_values;
  double p_norm = 2.0;
  std::function<double(double)> worst_density;
  /// Signed derivative under worst_density; its magnitude bounds |derivative|
  /// for every nonnegative perturbation of unit size.
  double attained_derivative = 0.0;
  double norm_positive = 0.0, norm_negative = 0.0;  // ||a+||, ||a-|| in L^{p/(p-1)}(P)
};

inline WorstCaseResult worst_case_perturbation(const ModelSpec& model, const VbSolution& sol, const LrvbSystem& sys,
                                               std::size_t block_index, const Eigen::VectorXd& target, double p_norm,
                                               const QuadratureOptions& qopts = {}) {
  if (!(p_norm > 1.0) || !std::isfinite(p_norm)) throw DomainError("p_norm must lie in (1, inf)");
  if (target.size() != sys.dim()) throw DimensionMismatch("target gradient has wrong length");
  const PriorMarginal log_prior = detail::prior_marginal(model, block_index);
  const auto& layout = model.blocks[block_index];
  if (layout.shape.point_dim() != 1) throw DomainError("worst-case perturbations are implemented for scalar blocks");
  const ExpFamBlock q = model.block(sol.mean, block_index);
  const Eigen::VectorXd m_i = q.mean;
  const Eigen::VectorXd c_full = sys.solve_transpose(target);
  const Eigen::VectorXd c = c_full.segment(static_cast<Eigen::Index>(layout.offset), m_i.size());
  const Eigen::VectorXd alpha = model.hyperparams;
  const BlockShape shape = layout.shape;

  auto proj = [c, m_i, shape](double x) {
    return c.dot(sufficient_statistics(shape, Eigen::VectorXd::Constant(1, x)) - m_i);
  };
  auto lp = [log_prior, alpha](double x) { return log_prior(Eigen::VectorXd::Constant(1, x), alpha); };
  auto lq = [q](double x) { return log_density(q, Eigen::VectorXd::Constant(1, x)); };

  WorstCaseResult r;
  r.p_norm = p_norm;
  r.a_values = [proj, lp, lq](double x) {
    const double lw = lq(x) - lp(x);
    return std::isfinite(lw) ? proj(x) * std::exp(lw) : 0.0;
  };
  const double qd = p_norm / (p_norm - 1.0);
  const auto dom = detail::block_domains(q)[0];
  // integral of |a_s|^q' dP = |proj|^q' q^q' p^(1 - q')
  auto side_norm = [&](double sign) {
    auto g = [&](double x) {
      const double v = sign * proj(x);
      if (!(v > 0.0)) return 0.0;
      const double lw = qd * (std::log(v) + lq(x)) + (1.0 - qd) * lp(x);
      return std::isfinite(lw) ? std::exp(lw) : 0.0;
    };
    const QuadResult res = integrate(g, dom, qopts);
    return std::pow(res.value, 1.0 / qd);
  };
  r.norm_positive = side_norm(1.0);
  r.norm_negative = side_norm(-1.0);
  if (!std::isfinite(r.norm_positive) || !std::isfinite(r.norm_negative))
    throw NormalizationFailure("worst-case normalizer diverged");
  const double sign = r.norm_positive >= r.norm_negative ? 1.0 : -1.0;
  const double n_s = std::max(r.norm_positive, r.norm_negative);
  if (!(n_s > 0.0)) throw NormalizationFailure("a(theta) vanishes identically; no worst-case direction");
  r.attained_derivative = sign * n_s;
  const double denom_log = (qd / p_norm) * std::log(n_s);
  const double expo = 1.0 / (p_norm - 1.0);
  const auto a_fn = r.a_values;
  r.worst_density = [a_fn, lp, sign, expo, denom_log](double x) {
    const double v = sign * a_fn(x);
    if (!(v > 0.0)) return 0.0;
    return std::exp(lp(x) + expo * std::log(v) - denom_log);
  };
  return r;
}

// ---------------------------------------------------------------------------
// Reports.

struct SensitivityQuery {
  std::string quantity;
  Eigen::VectorXd target;
  std::string direction;  // hyperparameter or contamination label
  std::optional<Eigen::VectorXd> delta_alpha;
  std::optional<ContaminationSpec> contamination;
};

struct ReportEntry {
  std::string quantity;
  std::string direction;
  double value = std::numeric_limits<double>::quiet_NaN();
  double normalized = std::numeric_limits<double>::quiet_NaN();
  double posterior_sd = std::numeric_limits<double>::quiet_NaN();
  std::string error;  // "<ErrorKind>: message" when the entry failed
  bool ok() const { return error.empty(); }
};

struct SensitivityReport {
  std::vector<ReportEntry> entries;
  std::uint64_t model_hash = 0;
  std::uint64_t solution_hash = 0;
};

inline std::uint64_t solution_hash(const VbSolution& sol) {
  Fnv1a h;
  h.add(sol.mean);
  return h.value();
}

inline SensitivityReport make_report(const ModelSpec& model, const VbSolution& sol, const LrvbSystem& sys,
                                     const std::vector<SensitivityQuery>& queries) {
  SensitivityReport rep;
  rep.model_hash = model_hash(model);
  rep.solution_hash = solution_hash(sol);
  for (const auto& qy : queries) {
    ReportEntry e;
    e.quantity = qy.quantity;
    e.direction = qy.direction;
    try {
      if (qy.delta_alpha.has_value() == qy.contamination.has_value())
        throw DomainError("a query needs exactly one of a hyperparameter direction or a contamination");
      if (qy.target.size() != sys.dim()) throw DimensionMismatch("target gradient has wrong length");
      e.value = qy.delta_alpha ? hyperparam_sensitivity(model, sol, sys, *qy.delta_alpha, qy.target)
                               : contamination_sensitivity(model, sol, sys, *qy.contamination, qy.target);
      const double var = qy.target.dot(sys.sigma_hat * qy.target);
      if (!(var > 0.0)) throw DomainError("quantity '" + qy.quantity + "' has zero posterior variance");
      e.posterior_sd = std::sqrt(var);
      e.normalized = e.value / e.posterior_sd;
    } catch (const Error& err) {
      e.error = std::string(err.kind()) + ": " + err.what();
    }
    rep.entries.push_back(std::move(e));
  }
  return rep;
}

/// One hyperparameter query per (quantity, hyperparameter) pair.
inline std::vector<SensitivityQuery> hyperparameter_queries(const ModelSpec& model,
                                                            const std::vector<std::string>& quantities,
                                                            const std::vector<std::string>& hypers) {
  std::vector<SensitivityQuery> out;
  for (const auto& qn : quantities) {
    const TrackedQuantity& tq = model.quantity(qn);
    for (const auto& hn : hypers) {
      SensitivityQuery s;
      s.quantity = qn;
      s.target = tq.gradient;
      s.direction = hn;
      s.delta_alpha = unit_vector(static_cast<std::size_t>(model.hyperparams.size()), model.hyper_index(hn));
      out.push_back(std::move(s));
    }
  }
  return out;
}

}  // namespace lrvb
