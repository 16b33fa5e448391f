#pragma once

// Hierarchical model for K randomized trials ("microcredit" style):
//
//   y_ik | mu_k, tau_k, sigma2_k ~ N(mu_k + T_ik tau_k, sigma2_k)
//   (mu_k, tau_k)               ~ N((mu, tau), C)
//   sigma2_k                    ~ InvGamma(alpha_tau, beta_tau)
//   (mu, tau)                   ~ N(0, Lambda^-1)
//   C = S R S,  R ~ LKJ(eta),  S_jj^2 ~ InvGamma(alpha_scale, beta_scale)
//
// Variational blocks, in order: for each site a bivariate Gaussian on
// (mu_k, tau_k) and an inverse gamma on sigma2_k; then a bivariate Gaussian
// on (mu, tau) and a 2 x 2 Wishart on C^-1. The prior on C^-1 is the density
// above evaluated at C^-1 (no change-of-variables term), both in the ELBO and
// in the exact posterior used by the oracles.

#include <algorithm>
#include <cmath>
#include <fstream>
#include <map>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "lrvb/dual.hpp"
#include "lrvb/errors.hpp"
#include "lrvb/expfam.hpp"
#include "lrvb/model.hpp"
#include "lrvb/special.hpp"

namespace lrvb::models {

struct MicrocreditData {
  std::vector<long> site;  // raw site labels, one per observation
  std::vector<int> treatment;
  std::vector<double> outcome;

  std::size_t size() const { return outcome.size(); }
  /// Distinct site labels in ascending order.
  std::vector<long> site_labels() const {
    std::vector<long> s = site;
    std::sort(s.begin(), s.end());
    s.erase(std::unique(s.begin(), s.end()), s.end());
    return s;
  }
  void validate() const {
    if (site.size() != treatment.size() || site.size() != outcome.size())
      throw DimensionMismatch("site, treatment and outcome columns differ in length");
    for (std::size_t i = 0; i < size(); ++i) {
      if (treatment[i] != 0 && treatment[i] != 1) throw DomainError("treatment flags must be 0 or 1");
      if (!std::isfinite(outcome[i])) throw DomainError("outcomes must be finite");
    }
  }
};

/// Per-site sufficient statistics of the likelihood.
struct SiteStats {
  double n = 0, sum_y = 0, sum_y2 = 0, sum_t = 0, sum_ty = 0;
};

inline std::vector<SiteStats> site_statistics(const MicrocreditData& data) {
  data.validate();
  const auto labels = data.site_labels();
  std::map<long, std::size_t> index;
  for (std::size_t k = 0; k < labels.size(); ++k) index[labels[k]] = k;
  std::vector<SiteStats> out(labels.size());
  for (std::size_t i = 0; i < data.size(); ++i) {
    SiteStats& s = out[index[data.site[i]]];
    const double y = data.outcome[i], t = data.treatment[i];
    s.n += 1;
    s.sum_y += y;
    s.sum_y2 += y * y;
    s.sum_t += t;
    s.sum_ty += t * y;
  }
  return out;
}

struct MicrocreditPriors {
  Eigen::Matrix2d Lambda = 0.02 * Eigen::Matrix2d::Identity();
  double eta = 15.01;
  double alpha_scale = 20.01, beta_scale = 20.01;
  double alpha_tau = 2.01, beta_tau = 2.01;

  static const std::vector<std::string>& names() {
    static const std::vector<std::string> n = {"Lambda_11", "Lambda_12", "Lambda_22", "eta",
                                               "alpha_scale", "beta_scale", "alpha_tau", "beta_tau"};
    return n;
  }
  Eigen::VectorXd to_vector() const {
    Eigen::VectorXd a(8);
    a << Lambda(0, 0), Lambda(1, 0), Lambda(1, 1), eta, alpha_scale, beta_scale, alpha_tau, beta_tau;
    return a;
  }
  static MicrocreditPriors from_vector(const Eigen::VectorXd& a) {
    if (a.size() != 8) throw DimensionMismatch("microcredit prior vector has 8 entries");
    MicrocreditPriors p;
    p.Lambda << a(0), a(1), a(1), a(2);
    p.eta = a(3);
    p.alpha_scale = a(4);
    p.beta_scale = a(5);
    p.alpha_tau = a(6);
    p.beta_tau = a(7);
    return p;
  }
  void validate() const {
    Eigen::LLT<Eigen::Matrix2d> llt(Lambda);
    if (llt.info() != Eigen::Success || !(Lambda(0, 0) > 0 && Lambda(1, 1) > 0))
      throw DomainError("Lambda must be positive definite");
    if (!(eta > 0)) throw DomainError("eta must be positive");
    if (!(alpha_scale > 0 && beta_scale > 0 && alpha_tau > 0 && beta_tau > 0))
      throw DomainError("inverse-gamma prior parameters must be positive");
  }
};

/// Index helpers for the mean-parameter layout.
struct MicrocreditLayout {
  std::size_t sites = 0;
  std::size_t site_effect(std::size_t k) const { return 7 * k; }      // 5 entries
  std::size_t site_noise(std::size_t k) const { return 7 * k + 5; }   // (E 1/sigma2, E log sigma2)
  std::size_t top() const { return 7 * sites; }                       // 5 entries
  std::size_t wishart() const { return 7 * sites + 5; }               // vech(E C^-1), E log|C^-1|
  std::size_t dim() const { return 7 * sites + 9; }
};

namespace detail {

template <typename T, typename Vec, typename A>
T microcredit_log_lik(const Vec& m, const A&, const std::vector<SiteStats>& stats) {
  const MicrocreditLayout lay{stats.size()};
  T out(0.0);
  for (std::size_t k = 0; k < stats.size(); ++k) {
    const SiteStats& s = stats[k];
    const auto b = static_cast<Eigen::Index>(lay.site_effect(k));
    const auto e = static_cast<Eigen::Index>(lay.site_noise(k));
    const T mu = m(b), tau = m(b + 1), mu2 = m(b + 2), mutau = m(b + 3), tau2 = m(b + 4);
    const T ss = s.sum_y2 - 2.0 * s.sum_y * mu - 2.0 * s.sum_ty * tau + s.n * mu2 + 2.0 * s.sum_t * mutau +
                 s.sum_t * tau2;
    out += -0.5 * s.n * kLog2Pi - 0.5 * s.n * T(m(e + 1)) - 0.5 * T(m(e)) * ss;
  }
  return out;
}

template <typename T, typename Vec, typename A>
T microcredit_log_prior(const Vec& m, const A& a, std::size_t sites) {
  const MicrocreditLayout lay{sites};
  const auto top = static_cast<Eigen::Index>(lay.top());
  const auto wi = static_cast<Eigen::Index>(lay.wishart());
  const T l11 = a(0), l12 = a(1), l22 = a(2), eta = a(3);
  const T as = a(4), bs = a(5), at = a(6), bt = a(7);

  // Wishart q(C^-1): E[C^-1] entries, E log|C^-1|, and the inverse-gamma
  // marginals of diag(C).
  VecT<T> wm(4);
  for (Eigen::Index i = 0; i < 4; ++i) wm(i) = m(wi + i);
  const WishartMoments<T> w = wishart_moments_from_mean<T>(wm, 2);
  const T w00 = wm(0), w10 = wm(1), w11 = wm(2), logdet_w = wm(3);

  const T mu = m(top), tau = m(top + 1), mu2 = m(top + 2), mutau = m(top + 3), tau2 = m(top + 4);
  T out(0.0);
  for (std::size_t k = 0; k < sites; ++k) {
    const auto b = static_cast<Eigen::Index>(lay.site_effect(k));
    const auto e = static_cast<Eigen::Index>(lay.site_noise(k));
    const T mk = m(b), tk = m(b + 1), mk2 = m(b + 2), mktk = m(b + 3), tk2 = m(b + 4);
    // E[(b_k - b)(b_k - b)^T]
    const T d00 = mk2 - 2.0 * mk * mu + mu2;
    const T d11 = tk2 - 2.0 * tk * tau + tau2;
    const T d10 = mktk - mk * tau - mu * tk + mutau;
    out += -kLog2Pi + 0.5 * logdet_w - 0.5 * (w00 * d00 + 2.0 * w10 * d10 + w11 * d11);
    out += at * log(bt) - lgamma(at) - (at + 1.0) * T(m(e + 1)) - bt * T(m(e));
  }
  // (mu, tau) ~ N(0, Lambda^-1)
  out += -kLog2Pi + 0.5 * log(T(l11 * l22 - l12 * l12)) - 0.5 * (l11 * mu2 + 2.0 * l12 * mutau + l22 * tau2);
  // scales and LKJ correlation
  T log_sigma_sum(0.0);
  for (Eigen::Index j = 0; j < 2; ++j) {
    out += as * log(bs) - lgamma(as) - (as + 1.0) * w.log_sigma_diag(j) - bs * w.inv_sigma_diag(j);
    log_sigma_sum += w.log_sigma_diag(j);
  }
  const T log_det_r = -logdet_w - log_sigma_sum;
  out += (eta - 1.0) * log_det_r - lkj_log_normalizer(eta, 2);
  return out;
}

}  // namespace detail

inline std::uint64_t hash_of(const std::vector<SiteStats>& stats) {
  Fnv1a h;
  for (const auto& s : stats) {
    h.add(s.n);
    h.add(s.sum_y);
    h.add(s.sum_y2);
    h.add(s.sum_t);
    h.add(s.sum_ty);
  }
  return h.value();
}

inline ModelSpec microcredit_model(const MicrocreditData& data, const MicrocreditPriors& priors = {}) {
  priors.validate();
  const std::vector<SiteStats> stats = site_statistics(data);
  const std::size_t K = stats.size();
  if (K < 2) throw DomainError("the hierarchical model needs at least two sites (got " + std::to_string(K) + ")");
  const MicrocreditLayout lay{K};
  const auto labels = data.site_labels();

  ModelSpec m;
  m.name = "microcredit";
  for (std::size_t k = 0; k < K; ++k) {
    const std::string tag = std::to_string(labels[k]);
    add_block(m.blocks, "site_" + tag, {Family::GaussianMultivariate, 2});
    add_block(m.blocks, "sigma2_" + tag, {Family::InverseGamma, 1});
  }
  const std::size_t top_block = add_block(m.blocks, "mu_tau", {Family::GaussianMultivariate, 2});
  add_block(m.blocks, "C_inv", {Family::Wishart, 2});
  m.hyper_names = MicrocreditPriors::names();
  m.hyperparams = priors.to_vector();

  m.expected_log_lik = ScalarObjective::from([stats](const auto& mm, const auto& a) {
    using T = typename std::decay_t<decltype(mm)>::Scalar;
    return detail::microcredit_log_lik<T>(mm, a, stats);
  });
  m.expected_log_prior = ScalarObjective::from([K](const auto& mm, const auto& a) {
    using T = typename std::decay_t<decltype(mm)>::Scalar;
    return detail::microcredit_log_prior<T>(mm, a, K);
  });

  // Prior-implied initialization.
  const Eigen::Matrix2d prior_cov = priors.Lambda.inverse();
  const double scale_mean = priors.alpha_scale > 1.0 ? priors.beta_scale / (priors.alpha_scale - 1.0)
                                                     : priors.beta_scale / priors.alpha_scale;
  const Eigen::Matrix2d c_guess = scale_mean * Eigen::Matrix2d::Identity();
  const double n0 = 10.0;
  Eigen::VectorXd init(static_cast<Eigen::Index>(lay.dim()));
  auto put = [&](std::size_t off, const Eigen::VectorXd& v) { init.segment(static_cast<Eigen::Index>(off), v.size()) = v; };
  const Eigen::Vector2d zero2 = Eigen::Vector2d::Zero();
  for (std::size_t k = 0; k < K; ++k) {
    put(lay.site_effect(k), mvn_block(zero2, prior_cov + c_guess).mean);
    put(lay.site_noise(k), inverse_gamma_block(priors.alpha_tau, priors.beta_tau).mean);
  }
  put(lay.top(), mvn_block(zero2, prior_cov).mean);
  put(lay.wishart(), wishart_block(c_guess.inverse() / n0, n0).mean);
  m.default_init = init;

  const auto dim = lay.dim();
  m.quantities.push_back({"mu", unit_vector(dim, lay.top())});
  m.quantities.push_back({"tau", unit_vector(dim, lay.top() + 1)});
  for (std::size_t k = 0; k < K; ++k)
    m.quantities.push_back({"mu_" + std::to_string(labels[k]), unit_vector(dim, lay.site_effect(k))});
  for (std::size_t k = 0; k < K; ++k)
    m.quantities.push_back({"tau_" + std::to_string(labels[k]), unit_vector(dim, lay.site_effect(k) + 1)});
  for (std::size_t k = 0; k < K; ++k)
    m.quantities.push_back({"log_sigma2_" + std::to_string(labels[k]), unit_vector(dim, lay.site_noise(k) + 1)});
  m.quantities.push_back({"C_inv_11", unit_vector(dim, lay.wishart())});
  m.quantities.push_back({"C_inv_12", unit_vector(dim, lay.wishart() + 1)});
  m.quantities.push_back({"C_inv_22", unit_vector(dim, lay.wishart() + 2)});

  // Blocks whose prior factors from the rest: (mu, tau) and each sigma2_k.
  m.prior_marginals[top_block] = [](const Eigen::VectorXd& p, const Eigen::VectorXd& a) {
    Eigen::Matrix2d lam;
    lam << a(0), a(1), a(1), a(2);
    return -kLog2Pi + 0.5 * std::log(lam.determinant()) - 0.5 * p.dot(lam * p);
  };
  for (std::size_t k = 0; k < K; ++k)
    m.prior_marginals[2 * k + 1] = [](const Eigen::VectorXd& p, const Eigen::VectorXd& a) {
      const double x = p(0);
      if (!(x > 0.0)) return -std::numeric_limits<double>::infinity();
      return a(6) * std::log(a(7)) - lgamma(a(6)) - (a(6) + 1.0) * std::log(x) - a(7) / x;
    };

  // Exact posterior over z = (b_1..b_K, log sigma2_1..K, b, log L11, L21, log L22), C^-1 = L L^T.
  ParameterDensity pd;
  pd.dim = 3 * K + 5;
  for (std::size_t k = 0; k < K; ++k) {
    pd.coordinate_names.push_back("mu_" + std::to_string(labels[k]));
    pd.coordinate_names.push_back("tau_" + std::to_string(labels[k]));
  }
  for (std::size_t k = 0; k < K; ++k) pd.coordinate_names.push_back("log_sigma2_" + std::to_string(labels[k]));
  for (const char* n : {"mu", "tau", "log_L11", "L21", "log_L22"}) pd.coordinate_names.emplace_back(n);
  const auto kk = static_cast<Eigen::Index>(K);
  pd.log_joint = [stats, kk](const Eigen::VectorXd& z, const Eigen::VectorXd& a) {
    const double l11 = std::exp(z(3 * kk + 2)), l21 = z(3 * kk + 3), l22 = std::exp(z(3 * kk + 4));
    Eigen::Matrix2d w;  // C^-1
    w << l11 * l11, l11 * l21, l11 * l21, l21 * l21 + l22 * l22;
    const double logdet_w = 2.0 * (z(3 * kk + 2) + z(3 * kk + 4));
    const Eigen::Vector2d b(z(3 * kk), z(3 * kk + 1));
    double out = 0.0;
    for (Eigen::Index k = 0; k < kk; ++k) {
      const SiteStats& s = stats[static_cast<std::size_t>(k)];
      const double mu = z(2 * k), tau = z(2 * k + 1), ls = z(2 * kk + k), inv = std::exp(-ls);
      const double ss = s.sum_y2 - 2.0 * s.sum_y * mu - 2.0 * s.sum_ty * tau + s.n * mu * mu +
                        2.0 * s.sum_t * mu * tau + s.sum_t * tau * tau;
      out += -0.5 * s.n * (kLog2Pi + ls) - 0.5 * inv * ss;
      const Eigen::Vector2d d = Eigen::Vector2d(mu, tau) - b;
      out += -kLog2Pi + 0.5 * logdet_w - 0.5 * d.dot(w * d);
      out += a(6) * std::log(a(7)) - lgamma(a(6)) - (a(6) + 1.0) * ls - a(7) * inv + ls;
    }
    Eigen::Matrix2d lam;
    lam << a(0), a(1), a(1), a(2);
    out += -kLog2Pi + 0.5 * std::log(lam.determinant()) - 0.5 * b.dot(lam * b);
    const Eigen::Matrix2d c = w.inverse();
    double log_sigma_sum = 0.0;
    for (int j = 0; j < 2; ++j) {
      const double ls = std::log(c(j, j));
      out += a(4) * std::log(a(5)) - lgamma(a(4)) - (a(4) + 1.0) * ls - a(5) / c(j, j);
      log_sigma_sum += ls;
    }
    out += (a(3) - 1.0) * (-logdet_w - log_sigma_sum) - lkj_log_normalizer(a(3), 2);
    // d vech(C^-1) / d(log L11, L21, log L22)
    out += std::log(4.0) + 3.0 * z(3 * kk + 2) + 2.0 * z(3 * kk + 4);
    return out;
  };
  pd.quantities = [kk](const Eigen::VectorXd& z) {
    Eigen::VectorXd q(3 * kk + 5);
    q(0) = z(3 * kk);
    q(1) = z(3 * kk + 1);
    for (Eigen::Index k = 0; k < kk; ++k) {
      q(2 + k) = z(2 * k);
      q(2 + kk + k) = z(2 * k + 1);
      q(2 + 2 * kk + k) = z(2 * kk + k);
    }
    const double l11 = std::exp(z(3 * kk + 2)), l21 = z(3 * kk + 3), l22 = std::exp(z(3 * kk + 4));
    q(3 * kk + 2) = l11 * l11;
    q(3 * kk + 3) = l11 * l21;
    q(3 * kk + 4) = l21 * l21 + l22 * l22;
    return q;
  };
  pd.init_from_mean = [lay, kk](const Eigen::VectorXd& mm) {
    Eigen::VectorXd z(3 * kk + 5);
    for (Eigen::Index k = 0; k < kk; ++k) {
      const auto b = static_cast<Eigen::Index>(lay.site_effect(static_cast<std::size_t>(k)));
      const auto e = static_cast<Eigen::Index>(lay.site_noise(static_cast<std::size_t>(k)));
      z(2 * k) = mm(b);
      z(2 * k + 1) = mm(b + 1);
      z(2 * kk + k) = -std::log(mm(e));
    }
    const auto t = static_cast<Eigen::Index>(lay.top());
    z(3 * kk) = mm(t);
    z(3 * kk + 1) = mm(t + 1);
    const auto wi = static_cast<Eigen::Index>(lay.wishart());
    Eigen::Matrix2d w = unvech<double>(mm.segment(wi, 3), 2);
    Eigen::Matrix2d l = w.llt().matrixL();
    z(3 * kk + 2) = std::log(l(0, 0));
    z(3 * kk + 3) = l(1, 0);
    z(3 * kk + 4) = std::log(l(1, 1));
    return z;
  };
  m.parameter_density = pd;
  m.data_hash = hash_of(stats);
  return m;
}

// ---------------------------------------------------------------------------
// CSV input / output (columns site, treatment, outcome; header required).

inline MicrocreditData parse_microcredit_csv(std::istream& in) {
  std::string line;
  if (!std::getline(in, line)) throw DomainError("empty CSV input");
  auto split = [](const std::string& s) {
    std::vector<std::string> out;
    std::stringstream ss(s);
    std::string cell;
    while (std::getline(ss, cell, ',')) {
      cell.erase(0, cell.find_first_not_of(" \t\r"));
      cell.erase(cell.find_last_not_of(" \t\r") + 1);
      out.push_back(cell);
    }
    return out;
  };
  if (line.size() >= 3 && static_cast<unsigned char>(line[0]) == 0xEF) line.erase(0, 3);  // BOM
  const auto header = split(line);
  int col_site = -1, col_t = -1, col_y = -1;
  for (std::size_t i = 0; i < header.size(); ++i) {
    if (header[i] == "site") col_site = static_cast<int>(i);
    else if (header[i] == "treatment") col_t = static_cast<int>(i);
    else if (header[i] == "outcome") col_y = static_cast<int>(i);
  }
  if (col_site < 0 || col_t < 0 || col_y < 0)
    throw DomainError("CSV header must contain the columns site, treatment, outcome");
  MicrocreditData d;
  std::size_t row = 1;
  while (std::getline(in, line)) {
    ++row;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    const auto cells = split(line);
    const auto need = static_cast<std::size_t>(std::max({col_site, col_t, col_y}));
    if (cells.size() <= need) throw DomainError("CSV row " + std::to_string(row) + " has too few columns");
    try {
      std::size_t pos = 0;
      const long s = std::stol(cells[static_cast<std::size_t>(col_site)], &pos);
      const int t = std::stoi(cells[static_cast<std::size_t>(col_t)]);
      const double y = std::stod(cells[static_cast<std::size_t>(col_y)]);
      d.site.push_back(s);
      d.treatment.push_back(t);
      d.outcome.push_back(y);
    } catch (const std::logic_error&) {
      throw DomainError("CSV row " + std::to_string(row) + " is not numeric");
    }
  }
  d.validate();
  return d;
}

inline MicrocreditData read_microcredit_csv(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw DomainError("cannot open data file '" + path + "'");
  return parse_microcredit_csv(in);
}

inline void write_microcredit_csv(std::ostream& out, const MicrocreditData& d) {
  out << "site,treatment,outcome\n";
  out.precision(17);
  for (std::size_t i = 0; i < d.size(); ++i) out << d.site[i] << ',' << d.treatment[i] << ',' << d.outcome[i] << '\n';
}

// ---------------------------------------------------------------------------
// Synthetic data.

struct MicrocreditTruth {
  double mu = 5.0;
  double tau = 1.0;
  Eigen::Matrix2d C;
  std::vector<double> sigma;                  // per-site noise sd
  std::vector<Eigen::Vector2d> site_effects;  // drawn from N((mu, tau), C) when empty

  /// Default truth for K sites: unit-ish scale, moderate correlation,
  /// noise sd spread over [2, 5].
  static MicrocreditTruth standard(std::size_t sites) {
    MicrocreditTruth t;
    t.C << 1.0, 0.3, 0.3, 0.64;
    for (std::size_t k = 0; k < sites; ++k)
      t.sigma.push_back(sites > 1 ? 2.0 + 3.0 * static_cast<double>(k) / static_cast<double>(sites - 1) : 3.0);
    return t;
  }
};

inline MicrocreditData simulate_microcredit(const MicrocreditTruth& truth, const std::vector<std::size_t>& counts,
                                            std::uint64_t seed,
                                            std::vector<Eigen::Vector2d>* effects_out = nullptr) {
  const std::size_t K = counts.size();
  if (truth.sigma.size() != K) throw DimensionMismatch("need one noise sd per site");
  if (!truth.site_effects.empty() && truth.site_effects.size() != K)
    throw DimensionMismatch("need one site effect per site");
  Eigen::LLT<Eigen::Matrix2d> llt(truth.C);
  if (llt.info() != Eigen::Success) throw DomainError("C must be positive definite");
  for (double s : truth.sigma)
    if (!(s > 0.0)) throw DomainError("noise sd must be positive");
  for (auto n : counts)
    if (n == 0) throw DomainError("site counts must be positive");
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> z(0.0, 1.0);
  std::bernoulli_distribution coin(0.5);
  const Eigen::Matrix2d l = llt.matrixL();
  MicrocreditData d;
  std::vector<Eigen::Vector2d> effects;
  for (std::size_t k = 0; k < K; ++k) {
    Eigen::Vector2d e;
    if (truth.site_effects.empty()) {
      const double z0 = z(rng), z1 = z(rng);
      e = Eigen::Vector2d(truth.mu, truth.tau) + l * Eigen::Vector2d(z0, z1);
    } else {
      e = truth.site_effects[k];
    }
    effects.push_back(e);
    for (std::size_t i = 0; i < counts[k]; ++i) {
      const int t = coin(rng) ? 1 : 0;
      d.site.push_back(static_cast<long>(k + 1));
      d.treatment.push_back(t);
      d.outcome.push_back(e(0) + t * e(1) + truth.sigma[k] * z(rng));
    }
  }
  if (effects_out) *effects_out = effects;
  return d;
}

/// The bundled default: K = 7 sites with 200 observations each.
inline MicrocreditData default_synthetic_data(std::uint64_t seed = 20240607) {
  return simulate_microcredit(MicrocreditTruth::standard(7), std::vector<std::size_t>(7, 200), seed);
}

}  // namespace lrvb::models
