#pragma once

// Reference answers to check linear-response output against: closed-form
// conjugate posteriors, quadrature over low-dimensional exact posteriors,
// random-walk Metropolis, and perturb-and-rerun finite differences.

#include <cmath>
#include <limits>
#include <map>
#include <optional>
#include <random>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "lrvb/errors.hpp"
#include "lrvb/linear_response.hpp"
#include "lrvb/mfvb.hpp"
#include "lrvb/model.hpp"
#include "lrvb/parallel.hpp"
#include "lrvb/quadrature.hpp"
#include "lrvb/robustness.hpp"
#include "lrvb/special.hpp"

namespace lrvb {

/// Posterior means and covariance of the model's tracked quantities.
struct PosteriorMoments {
  std::vector<std::string> names;
  Eigen::VectorXd mean;
  Eigen::MatrixXd cov;
};

inline std::vector<std::string> quantity_names(const ModelSpec& model) {
  std::vector<std::string> out;
  for (const auto& q : model.quantities) out.push_back(q.name);
  return out;
}

/// Closed-form posterior for the conjugate fixtures, at hyperparameters alpha.
inline PosteriorMoments exact_conjugate_posterior(const ModelSpec& model, const Eigen::VectorXd& alpha) {
  if (!model.conjugate) throw NotConjugate("model '" + model.name + "' has no closed-form posterior");
  const ConjugateForm& c = *model.conjugate;
  PosteriorMoments out;
  out.names = quantity_names(model);
  switch (c.kind) {
    case ConjugateForm::Kind::NormalNormal: {
      const double prec = -2.0 * alpha(1) + c.count / c.noise_variance;
      out.mean = Eigen::VectorXd::Constant(1, (alpha(0) + c.sum / c.noise_variance) / prec);
      out.cov = Eigen::MatrixXd::Constant(1, 1, 1.0 / prec);
      return out;
    }
    case ConjugateForm::Kind::NormalInverseGamma: {
      const double mu0 = alpha(0), k0 = alpha(1), a0 = alpha(2), b0 = alpha(3);
      const double kn = k0 + c.count;
      const double mun = (k0 * mu0 + c.sum) / kn;
      const double an = a0 + 0.5 * c.count;
      const double bn = b0 + 0.5 * (c.sum_squares + k0 * mu0 * mu0 - kn * mun * mun);
      if (!(an > 1.0)) throw NotConjugate("posterior variance of mu is infinite (a_n <= 1)");
      // quantities: mu, 1/sigma2, log sigma2
      out.mean = Eigen::Vector3d(mun, an / bn, std::log(bn) - digamma(an));
      out.cov = Eigen::MatrixXd::Zero(3, 3);
      out.cov(0, 0) = bn / ((an - 1.0) * kn);
      out.cov(1, 1) = an / (bn * bn);
      out.cov(2, 2) = trigamma(an);
      out.cov(1, 2) = out.cov(2, 1) = -1.0 / bn;
      return out;
    }
    case ConjugateForm::Kind::GaussianTarget: {
      Eigen::LLT<Eigen::MatrixXd> llt(c.precision);
      out.mean = llt.solve(alpha);
      out.cov = llt.solve(Eigen::MatrixXd::Identity(c.precision.rows(), c.precision.rows()));
      return out;
    }
  }
  throw NotConjugate("unknown conjugate form");
}

// ---------------------------------------------------------------------------
// Quadrature over the exact posterior (dimension 1 or 2).

/// Node placement for quadrature over z: centers and per-coordinate scales.
struct QuadratureFrame {
  Eigen::VectorXd center, scale;
};

/// Frame centered at z0 with scales from the diagonal curvature of log_joint.
inline QuadratureFrame quadrature_frame(const ParameterDensity& pd, const Eigen::VectorXd& alpha,
                                        const Eigen::VectorXd& z0) {
  QuadratureFrame fr{z0, Eigen::VectorXd::Ones(z0.size())};
  const double f0 = pd.log_joint(z0, alpha);
  for (Eigen::Index i = 0; i < z0.size(); ++i) {
    const double h = 1e-3 * std::max(1.0, std::abs(z0(i)));
    Eigen::VectorXd zp = z0, zm = z0;
    zp(i) += h;
    zm(i) -= h;
    const double d2 = (pd.log_joint(zp, alpha) - 2.0 * f0 + pd.log_joint(zm, alpha)) / (h * h);
    if (d2 < 0.0 && std::isfinite(d2)) fr.scale(i) = 1.0 / std::sqrt(-d2);
  }
  return fr;
}

inline PosteriorMoments quadrature_posterior(const ModelSpec& model, const Eigen::VectorXd& alpha,
                                             const QuadratureFrame& frame, const QuadratureOptions& opts = {}) {
  if (!model.parameter_density) throw DomainError("model '" + model.name + "' has no exact posterior density");
  const ParameterDensity& pd = *model.parameter_density;
  if (pd.dim < 1 || pd.dim > 2) throw DomainError("quadrature posterior supports 1-D and 2-D models only");
  const double shift = pd.log_joint(frame.center, alpha);
  const auto nq = static_cast<Eigen::Index>(model.quantities.size());
  std::vector<Domain1D> dom;
  for (std::size_t i = 0; i < pd.dim; ++i)
    dom.push_back(Domain1D::real(frame.center(static_cast<Eigen::Index>(i)), frame.scale(static_cast<Eigen::Index>(i))));

  auto integral = [&](const std::function<double(const Eigen::VectorXd&)>& g) {
    if (pd.dim == 1) {
      Eigen::VectorXd z(1);
      return integrate([&](double x) { z(0) = x; return g(z); }, dom[0], opts).value;
    }
    return integrate2([&](double x, double y) { return g(Eigen::Vector2d(x, y)); }, dom[0], dom[1], opts).value;
  };
  auto weight = [&](const Eigen::VectorXd& z) { return std::exp(pd.log_joint(z, alpha) - shift); };

  const double zsum = integral(weight);
  if (!(zsum > 0.0)) throw QuadratureFailure("posterior density integrates to zero");
  PosteriorMoments out;
  out.names = quantity_names(model);
  out.mean.resize(nq);
  out.cov.resize(nq, nq);
  for (Eigen::Index a = 0; a < nq; ++a)
    out.mean(a) = integral([&](const Eigen::VectorXd& z) { return pd.quantities(z)(a) * weight(z); }) / zsum;
  for (Eigen::Index a = 0; a < nq; ++a)
    for (Eigen::Index b = a; b < nq; ++b) {
      out.cov(a, b) = integral([&](const Eigen::VectorXd& z) {
                        const Eigen::VectorXd v = pd.quantities(z);
                        return (v(a) - out.mean(a)) * (v(b) - out.mean(b)) * weight(z);
                      }) /
                      zsum;
      out.cov(b, a) = out.cov(a, b);
    }
  return out;
}

// ---------------------------------------------------------------------------
// Metropolis.

/// Frozen proposal: component-wise random walk in coordinates
/// w = chol^-1 (z - center) with per-coordinate scales.
struct MetropolisProposal {
  Eigen::VectorXd center;
  Eigen::MatrixXd chol;  // lower triangular
  Eigen::VectorXd scale;
};

struct McmcConfig {
  std::size_t chain_length = 100000;  // sweeps, including burn-in
  std::size_t burn_in = 10000;
  std::uint64_t seed = 1;
  double target_acceptance = 0.44;
  std::size_t adapt_every = 50;
  /// Starting proposal scales in z (one per coordinate); defaults to 0.1.
  Eigen::VectorXd initial_scale;
  /// Estimate the posterior covariance during burn-in and propose in the
  /// whitened coordinates afterwards.
  bool whiten = true;
  /// If set, this proposal is used throughout and nothing adapts
  /// (burn-in draws are still discarded).
  std::optional<MetropolisProposal> frozen;
};

struct McmcResult {
  Eigen::MatrixXd draws;          // kept draws of the tracked quantities (rows: sweeps)
  Eigen::VectorXd mean, se, ess;  // per quantity; se by batch means
  Eigen::VectorXd acceptance;     // per coordinate, after burn-in
  MetropolisProposal proposal;    // proposal used after burn-in
  Eigen::VectorXd last;           // final state in z
};

namespace detail {

inline void batch_means(const Eigen::MatrixXd& x, Eigen::VectorXd& mean, Eigen::VectorXd& se, Eigen::VectorXd& ess) {
  const Eigen::Index n = x.rows();
  const Eigen::Index nb = std::max<Eigen::Index>(2, static_cast<Eigen::Index>(std::sqrt(static_cast<double>(n))));
  const Eigen::Index bs = n / nb;
  mean = x.colwise().mean().transpose();
  se.resize(x.cols());
  ess.resize(x.cols());
  for (Eigen::Index j = 0; j < x.cols(); ++j) {
    const double var = (x.col(j).array() - mean(j)).square().sum() / static_cast<double>(n - 1);
    double acc = 0.0;
    for (Eigen::Index b = 0; b < nb; ++b) {
      const double bm = x.col(j).segment(b * bs, bs).mean();
      acc += (bm - mean(j)) * (bm - mean(j));
    }
    const double var_bm = acc / static_cast<double>(nb - 1);
    se(j) = std::sqrt(var_bm * static_cast<double>(bs) / static_cast<double>(n));
    ess(j) = se(j) > 0.0 ? var / (se(j) * se(j)) : static_cast<double>(n);
  }
}

// One chain segment of component-wise random-walk Metropolis.
class MetropolisChain {
 public:
  MetropolisChain(const ParameterDensity& pd, const Eigen::VectorXd& alpha, Eigen::VectorXd z, std::uint64_t seed)
      : pd_(pd), alpha_(alpha), z_(std::move(z)), rng_(seed) {
    lp_ = pd_.log_joint(z_, alpha_);
    if (!std::isfinite(lp_)) throw DomainError("log posterior not finite at the initial state");
  }

  // One sweep over all coordinates; acc(i) += 1 on acceptance.
  void sweep(const MetropolisProposal& prop, Eigen::VectorXd& acc) {
    const Eigen::Index d = z_.size();
    for (Eigen::Index i = 0; i < d; ++i) {
      // always draw both variates so paired chains stay aligned
      const double step = prop.scale(i) * normal_(rng_);
      const double u = unif_(rng_);
      trial_ = z_;
      trial_.tail(d - i) += step * prop.chol.col(i).tail(d - i);
      const double lp_new = pd_.log_joint(trial_, alpha_);
      if (std::isfinite(lp_new) && std::log(u) < lp_new - lp_) {
        z_.swap(trial_);
        lp_ = lp_new;
        acc(i) += 1.0;
      }
    }
  }

  // Adaptive sweeps: scales move toward the target acceptance.
  void adapt(MetropolisProposal& prop, std::size_t sweeps, const McmcConfig& cfg,
             std::vector<Eigen::VectorXd>* trace = nullptr) {
    const Eigen::Index d = z_.size();
    Eigen::VectorXd acc = Eigen::VectorXd::Zero(d);
    std::size_t window = 0, rounds = 0;
    for (std::size_t s = 0; s < sweeps; ++s) {
      sweep(prop, acc);
      if (trace) trace->push_back(z_);
      if (++window == cfg.adapt_every) {
        ++rounds;
        const double delta = std::min(0.1, 1.0 / std::sqrt(static_cast<double>(rounds)));
        for (Eigen::Index i = 0; i < d; ++i)
          prop.scale(i) *= std::exp(acc(i) / static_cast<double>(window) > cfg.target_acceptance ? delta : -delta);
        acc.setZero();
        window = 0;
      }
    }
  }

  const Eigen::VectorXd& state() const { return z_; }

 private:
  const ParameterDensity& pd_;
  const Eigen::VectorXd& alpha_;
  Eigen::VectorXd z_, trial_;
  double lp_ = 0.0;
  std::mt19937_64 rng_;
  std::normal_distribution<double> normal_{0.0, 1.0};
  std::uniform_real_distribution<double> unif_{0.0, 1.0};
};

}  // namespace detail

/// Component-wise random-walk Metropolis over the model's exact posterior in
/// unconstrained coordinates. Unless a frozen proposal is given, the burn-in
/// adapts proposal scales toward the target acceptance (first half in z; with
/// whitening, the second half in coordinates decorrelated by the covariance
/// of the first half's draws). The proposal is frozen after burn-in.
inline McmcResult metropolis_sample(const ModelSpec& model, const Eigen::VectorXd& alpha, const Eigen::VectorXd& z0,
                                    const McmcConfig& cfg) {
  if (!model.parameter_density) throw DomainError("model '" + model.name + "' has no exact posterior density");
  const ParameterDensity& pd = *model.parameter_density;
  const auto d = static_cast<Eigen::Index>(pd.dim);
  if (z0.size() != d) throw DimensionMismatch("initial state has wrong dimension");
  if (cfg.burn_in >= cfg.chain_length) throw DomainError("burn_in must be shorter than chain_length");
  if (cfg.chain_length - cfg.burn_in < 4) throw DomainError("too few kept draws");

  detail::MetropolisChain chain(pd, alpha, z0, cfg.seed);
  MetropolisProposal prop;
  if (cfg.frozen) {
    prop = *cfg.frozen;
    if (prop.scale.size() != d || prop.chol.rows() != d || prop.chol.cols() != d)
      throw DimensionMismatch("frozen proposal has wrong dimension");
    if ((prop.scale.array() <= 0.0).any()) throw DomainError("proposal scales must be positive");
    Eigen::VectorXd acc = Eigen::VectorXd::Zero(d);
    for (std::size_t s = 0; s < cfg.burn_in; ++s) chain.sweep(prop, acc);
  } else {
    prop.center = z0;
    prop.chol = Eigen::MatrixXd::Identity(d, d);
    prop.scale = cfg.initial_scale.size() == d ? cfg.initial_scale : Eigen::VectorXd::Constant(d, 0.1);
    if ((prop.scale.array() <= 0.0).any()) throw DomainError("proposal scales must be positive");
    if (cfg.whiten && cfg.burn_in >= 4) {
      std::vector<Eigen::VectorXd> trace;
      const std::size_t first = cfg.burn_in / 2;
      chain.adapt(prop, first, cfg, &trace);
      Eigen::MatrixXd zs(static_cast<Eigen::Index>(trace.size() - trace.size() / 2), d);
      for (std::size_t r = trace.size() / 2; r < trace.size(); ++r)
        zs.row(static_cast<Eigen::Index>(r - trace.size() / 2)) = trace[r].transpose();
      const Eigen::VectorXd mu = zs.colwise().mean().transpose();
      const Eigen::MatrixXd cen = zs.rowwise() - mu.transpose();
      const Eigen::MatrixXd cov = cen.transpose() * cen / static_cast<double>(std::max<Eigen::Index>(1, zs.rows() - 1));
      Eigen::LLT<Eigen::MatrixXd> llt(cov);
      if (llt.info() == Eigen::Success && cov.allFinite()) {
        prop.center = mu;
        prop.chol = llt.matrixL();
        prop.scale = Eigen::VectorXd::Constant(d, 2.4);
      }
      chain.adapt(prop, cfg.burn_in - first, cfg);
    } else {
      chain.adapt(prop, cfg.burn_in, cfg);
    }
  }

  const auto kept = static_cast<Eigen::Index>(cfg.chain_length - cfg.burn_in);
  McmcResult res;
  res.draws.resize(kept, static_cast<Eigen::Index>(model.quantities.size()));
  Eigen::VectorXd acc = Eigen::VectorXd::Zero(d);
  for (Eigen::Index s = 0; s < kept; ++s) {
    chain.sweep(prop, acc);
    res.draws.row(s) = pd.quantities(chain.state()).transpose();
  }
  res.acceptance = acc / static_cast<double>(kept);
  for (Eigen::Index i = 0; i < d; ++i)
    if (res.acceptance(i) < 0.01 || res.acceptance(i) > 0.99)
      throw DegenerateChain("acceptance rate " + std::to_string(res.acceptance(i)) + " for proposal coordinate " +
                            std::to_string(i) + (prop.chol.isIdentity() ? " ('" + pd.coordinate_names[static_cast<std::size_t>(i)] + "')" : std::string()));
  res.proposal = prop;
  res.last = chain.state();
  detail::batch_means(res.draws, res.mean, res.se, res.ess);
  return res;
}

// ---------------------------------------------------------------------------
// Perturb and rerun.

enum class Engine { Quadrature, Vb, Mcmc };

inline const char* engine_name(Engine e) {
  switch (e) {
    case Engine::Quadrature: return "quadrature";
    case Engine::Vb: return "vb";
    case Engine::Mcmc: return "mcmc";
  }
  return "?";
}

struct ComparisonOptions {
  Engine engine = Engine::Vb;
  std::vector<std::string> hypers;      // empty: all
  std::vector<std::string> quantities;  // empty: all
  /// Step for hyperparameter j: steps[name] if given, else
  /// relative_step * max(|alpha_j|, 1).
  double relative_step = 0.01;
  std::map<std::string, double> steps;
  bool richardson = true;  // deterministic engines only
  FitOptions fit;
  QuadratureOptions quadrature;
  McmcConfig mcmc;
  unsigned threads = default_threads();
};

struct ComparisonPoint {
  std::string quantity;
  std::string hyper;
  double step = 0.0;
  double predicted = 0.0;  // linear response
  double actual = 0.0;     // finite difference from the engine
  double se = 0.0;  // Richardson gap (deterministic engines; NaN without Richardson) or batch-means SE (Mcmc)
};

struct ComparisonResult {
  Engine engine = Engine::Vb;
  std::vector<ComparisonPoint> points;
  double slope = 0.0;        // least squares through the origin of actual on predicted
  double correlation = 0.0;  // Pearson
};

namespace detail {

inline void summarize(ComparisonResult& r) {
  double pa = 0.0, pp = 0.0;
  for (const auto& p : r.points) {
    pa += p.predicted * p.actual;
    pp += p.predicted * p.predicted;
  }
  r.slope = pp > 0.0 ? pa / pp : 0.0;
  const auto n = static_cast<double>(r.points.size());
  if (r.points.size() < 2) {
    r.correlation = 0.0;
    return;
  }
  double mp = 0.0, ma = 0.0;
  for (const auto& p : r.points) {
    mp += p.predicted / n;
    ma += p.actual / n;
  }
  double sxy = 0.0, sxx = 0.0, syy = 0.0;
  for (const auto& p : r.points) {
    sxy += (p.predicted - mp) * (p.actual - ma);
    sxx += (p.predicted - mp) * (p.predicted - mp);
    syy += (p.actual - ma) * (p.actual - ma);
  }
  r.correlation = (sxx > 0.0 && syy > 0.0) ? sxy / std::sqrt(sxx * syy) : 0.0;
}

}  // namespace detail

/// Compares predicted d E[quantity] / d alpha_j with finite differences of
/// posterior means recomputed by the chosen engine at perturbed alpha.
inline ComparisonResult perturb_and_rerun(const ModelSpec& model, const VbSolution& sol, const LrvbSystem& sys,
                                          const ComparisonOptions& opts) {
  std::vector<std::size_t> hyper_idx;
  if (opts.hypers.empty())
    for (std::size_t j = 0; j < model.hyper_names.size(); ++j) hyper_idx.push_back(j);
  else
    for (const auto& h : opts.hypers) hyper_idx.push_back(model.hyper_index(h));
  std::vector<std::size_t> q_idx;
  if (opts.quantities.empty())
    for (std::size_t a = 0; a < model.quantities.size(); ++a) q_idx.push_back(a);
  else
    for (const auto& name : opts.quantities) {
      std::size_t a = 0;
      while (a < model.quantities.size() && model.quantities[a].name != name) ++a;
      if (a == model.quantities.size()) model.quantity(name);  // throws with the valid names
      q_idx.push_back(a);
    }
  if ((opts.engine == Engine::Quadrature || opts.engine == Engine::Mcmc) && !model.parameter_density)
    throw DomainError(std::string(engine_name(opts.engine)) + " engine needs the model's exact posterior density");

  const Eigen::VectorXd alpha0 = model.hyperparams;
  const auto nh = hyper_idx.size();

  // Quantity means from the engine at a given alpha.
  std::function<Eigen::VectorXd(const Eigen::VectorXd&)> vb_means = [&](const Eigen::VectorXd& a) {
    const VbSolution s = fit(model, sol.mean, opts.fit, a);
    Eigen::VectorXd out(static_cast<Eigen::Index>(model.quantities.size()));
    for (std::size_t k = 0; k < model.quantities.size(); ++k)
      out(static_cast<Eigen::Index>(k)) = model.quantities[k].gradient.dot(s.mean);
    return out;
  };
  std::optional<QuadratureFrame> frame;
  if (opts.engine == Engine::Quadrature)
    frame = quadrature_frame(*model.parameter_density, alpha0, model.parameter_density->init_from_mean(sol.mean));
  auto quad_means = [&](const Eigen::VectorXd& a) {
    return quadrature_posterior(model, a, *frame, opts.quadrature).mean;
  };

  // MCMC base chain: adapt once, then rerun with frozen scales so that all
  // chains share their random numbers.
  std::optional<McmcResult> base;
  McmcConfig frozen = opts.mcmc;
  Eigen::VectorXd z0;
  if (opts.engine == Engine::Mcmc) {
    z0 = model.parameter_density->init_from_mean(sol.mean);
    if (!opts.mcmc.frozen) {
      McmcConfig tune = opts.mcmc;
      tune.chain_length = opts.mcmc.burn_in + std::max<std::size_t>(opts.mcmc.burn_in / 10, 100);
      frozen.frozen = metropolis_sample(model, alpha0, z0, tune).proposal;
    }
    base = metropolis_sample(model, alpha0, z0, frozen);
  }

  Eigen::VectorXd base_means;
  if (opts.engine == Engine::Vb) base_means = vb_means(alpha0);
  if (opts.engine == Engine::Quadrature) base_means = quad_means(alpha0);

  std::vector<std::vector<ComparisonPoint>> per_hyper(nh);
  parallel_for(
      nh,
      [&](std::size_t jj) {
        const std::size_t j = hyper_idx[jj];
        const std::string& hname = model.hyper_names[j];
        const auto it = opts.steps.find(hname);
        const double h = it != opts.steps.end() ? it->second
                                                 : opts.relative_step * std::max(std::abs(alpha0(static_cast<Eigen::Index>(j))), 1.0);
        if (!(h != 0.0) || !std::isfinite(h)) throw DomainError("step for '" + hname + "' must be finite and nonzero");
        const Eigen::VectorXd e = unit_vector(static_cast<std::size_t>(alpha0.size()), j);
        const Eigen::VectorXd dm = hyperparam_sensitivity(model, sol, sys, e);

        Eigen::VectorXd actual, se;
        if (opts.engine == Engine::Mcmc) {
          const McmcResult pert = metropolis_sample(model, alpha0 + h * e, z0, frozen);
          Eigen::MatrixXd diff = (pert.draws - base->draws) / h;
          Eigen::VectorXd mean, ess;
          detail::batch_means(diff, mean, se, ess);
          actual = mean;
        } else {
          auto means = [&](const Eigen::VectorXd& a) {
            return opts.engine == Engine::Vb ? vb_means(a) : quad_means(a);
          };
          const Eigen::VectorXd d_full = (means(alpha0 + h * e) - base_means) / h;
          if (opts.richardson) {
            const Eigen::VectorXd d_half = (means(alpha0 + 0.5 * h * e) - base_means) / (0.5 * h);
            actual = 2.0 * d_half - d_full;
            // gap between the two difference quotients, floored at roundoff
            se = (d_half - d_full).cwiseAbs().cwiseMax(
                std::numeric_limits<double>::epsilon() * actual.cwiseAbs().cwiseMax(1.0));
          } else {
            actual = d_full;
            se = Eigen::VectorXd::Constant(d_full.size(), std::numeric_limits<double>::quiet_NaN());
          }
        }
        for (std::size_t a : q_idx) {
          ComparisonPoint p;
          p.quantity = model.quantities[a].name;
          p.hyper = hname;
          p.step = h;
          p.predicted = model.quantities[a].gradient.dot(dm);
          p.actual = actual(static_cast<Eigen::Index>(a));
          p.se = se(static_cast<Eigen::Index>(a));
          per_hyper[jj].push_back(p);
        }
      },
      opts.threads);

  ComparisonResult r;
  r.engine = opts.engine;
  for (const auto& v : per_hyper) r.points.insert(r.points.end(), v.begin(), v.end());
  detail::summarize(r);
  return r;
}

}  // namespace lrvb
