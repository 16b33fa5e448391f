// lrvb: fit MFVB models and emit linear-response robustness reports.
//
//   lrvb fit            --model M [--data F] [--prior k=v ...] [--out F] [--format json|csv]
//   lrvb sensitivity    ... [--hyper a,b] [--quantity q,r]
//   lrvb influence-grid ... [--block B] [--quantity q] [--box lo,hi[,lo,hi]] [--points N]
//   lrvb compare        ... --engine quadrature|vb|mcmc [--hyper ..] [--step h] [--draws N] [--seed S]
//   lrvb simulate       [--sites K] [--per-site N] [--seed S] [--out F]
//
// Exit codes: 0 success, 2 validation error, 3 numerical failure.

#include <cinttypes>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <iostream>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "lrvb/all.hpp"

namespace {

using json = nlohmann::ordered_json;
using namespace lrvb;

constexpr int kSchemaVersion = 1;

struct RunConfig {
  std::string model = "microcredit";
  std::string data;
  std::vector<std::string> priors;
  std::string out;
  std::string format = "json";
  std::uint64_t seed = 1;
  double tol = 1e-8;
  int max_iter = 10000;
  double noise_variance = 1.0;
  std::string precision;

  std::vector<std::string> hypers, quantities;

  std::string block, quantity;
  std::vector<double> box;
  int points = 41;

  std::string engine = "vb";
  double step = 0.0;
  double relative_step = 0.01;
  std::size_t draws = 100000, burn_in = 10000;
  bool no_richardson = false;

  std::size_t sites = 7, per_site = 200;
};

// ---------------------------------------------------------------------------
// JSON with every double written as %.17g; NaN and infinities become null.

void emit(const json& j, std::string& out, int depth) {
  const std::string pad(static_cast<std::size_t>(2 * (depth + 1)), ' ');
  const std::string close(static_cast<std::size_t>(2 * depth), ' ');
  switch (j.type()) {
    case json::value_t::object: {
      if (j.empty()) { out += "{}"; return; }
      out += "{\n";
      bool first = true;
      for (auto it = j.begin(); it != j.end(); ++it) {
        if (!first) out += ",\n";
        first = false;
        out += pad + json(it.key()).dump() + ": ";
        emit(it.value(), out, depth + 1);
      }
      out += "\n" + close + "}";
      return;
    }
    case json::value_t::array: {
      if (j.empty()) { out += "[]"; return; }
      const bool flat = std::all_of(j.begin(), j.end(), [](const json& e) { return e.is_primitive(); });
      out += flat ? "[" : "[\n";
      bool first = true;
      for (const auto& e : j) {
        if (!first) out += flat ? ", " : ",\n";
        first = false;
        if (!flat) out += pad;
        emit(e, out, depth + 1);
      }
      out += flat ? "]" : "\n" + close + "]";
      return;
    }
    case json::value_t::number_float: {
      const double v = j.get<double>();
      if (!std::isfinite(v)) { out += "null"; return; }
      char buf[40];
      std::snprintf(buf, sizeof buf, "%.17g", v);
      out += buf;
      return;
    }
    default:
      out += j.dump();
  }
}

std::string to_text(const json& j) {
  std::string s;
  emit(j, s, 0);
  return s + "\n";
}

std::string fmt17(double v) {
  if (!std::isfinite(v)) return std::isnan(v) ? "nan" : (v > 0 ? "inf" : "-inf");
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

std::string csv_cell(const std::string& s) {
  if (s.find_first_of(",\"\n") == std::string::npos) return s;
  std::string q = "\"";
  for (char c : s) q += c == '"' ? std::string("\"\"") : std::string(1, c);
  return q + "\"";
}

std::string hex(std::uint64_t h) {
  char buf[24];
  std::snprintf(buf, sizeof buf, "%016" PRIx64, h);
  return buf;
}

json vec(const Eigen::VectorXd& v) {
  json a = json::array();
  for (Eigen::Index i = 0; i < v.size(); ++i) a.push_back(v(i));
  return a;
}

void write_output(const RunConfig& cfg, const std::string& text) {
  if (cfg.out.empty() || cfg.out == "-") {
    std::cout << text;
    return;
  }
  std::ofstream f(cfg.out, std::ios::binary);
  if (!f) throw DomainError("cannot open output file '" + cfg.out + "'");
  f << text;
  if (!f) throw DomainError("failed writing output file '" + cfg.out + "'");
}

// ---------------------------------------------------------------------------
// Models.

std::vector<double> read_x_column(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw DomainError("cannot open data file '" + path + "'");
  std::string line;
  if (!std::getline(in, line)) throw DomainError("empty CSV input");
  std::vector<std::string> header;
  {
    std::stringstream ss(line);
    std::string cell;
    while (std::getline(ss, cell, ',')) {
      cell.erase(0, cell.find_first_not_of(" \t\r"));
      cell.erase(cell.find_last_not_of(" \t\r") + 1);
      header.push_back(cell);
    }
  }
  const auto col = std::find(header.begin(), header.end(), "x");
  if (col == header.end()) throw DomainError("CSV header must contain the column x");
  const auto idx = static_cast<std::size_t>(col - header.begin());
  std::vector<double> xs;
  std::size_t row = 1;
  while (std::getline(in, line)) {
    ++row;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    std::stringstream ss(line);
    std::string cell;
    for (std::size_t i = 0; i <= idx; ++i)
      if (!std::getline(ss, cell, ',')) throw DomainError("CSV row " + std::to_string(row) + " has too few columns");
    try {
      std::size_t pos = 0;
      xs.push_back(std::stod(cell, &pos));
    } catch (const std::logic_error&) {
      throw DomainError("CSV row " + std::to_string(row) + " is not numeric");
    }
  }
  return xs;
}

Eigen::MatrixXd parse_matrix(const std::string& s) {
  std::vector<std::vector<double>> rows;
  std::stringstream rs(s);
  std::string row;
  while (std::getline(rs, row, ';')) {
    std::vector<double> r;
    std::stringstream cs(row);
    std::string cell;
    while (std::getline(cs, cell, ',')) {
      try {
        r.push_back(std::stod(cell));
      } catch (const std::logic_error&) {
        throw DomainError("cannot parse precision entry '" + cell + "'");
      }
    }
    rows.push_back(r);
  }
  const auto n = static_cast<Eigen::Index>(rows.size());
  if (n == 0) throw DomainError("--precision is empty");
  Eigen::MatrixXd m(n, n);
  for (Eigen::Index i = 0; i < n; ++i) {
    if (static_cast<Eigen::Index>(rows[static_cast<std::size_t>(i)].size()) != n)
      throw DomainError("--precision must be a square matrix written as 'a,b;c,d'");
    for (Eigen::Index j = 0; j < n; ++j) m(i, j) = rows[static_cast<std::size_t>(i)][static_cast<std::size_t>(j)];
  }
  return m;
}

ModelSpec build_model(const RunConfig& cfg) {
  std::function<ModelSpec(const Eigen::VectorXd&)> make;
  ModelSpec base;
  if (cfg.model == "microcredit") {
    if (cfg.data.empty()) throw DomainError("model 'microcredit' needs --data (columns site, treatment, outcome)");
    const auto data = models::read_microcredit_csv(cfg.data);
    make = [data](const Eigen::VectorXd& a) {
      return models::microcredit_model(data, models::MicrocreditPriors::from_vector(a));
    };
    base = models::microcredit_model(data);
  } else if (cfg.model == "normal-normal" || cfg.model == "normal-inverse-gamma") {
    if (cfg.data.empty()) throw DomainError("model '" + cfg.model + "' needs --data (column x)");
    const auto data = models::NormalData::from(read_x_column(cfg.data));
    if (cfg.model == "normal-normal") {
      const double v = cfg.noise_variance;
      make = [data, v](const Eigen::VectorXd& a) { return models::normal_normal_model(data, v, a); };
      base = models::normal_normal_model(data, v);
    } else {
      make = [data](const Eigen::VectorXd& a) { return models::normal_inverse_gamma_model(data, a); };
      base = models::normal_inverse_gamma_model(data);
    }
  } else if (cfg.model == "gaussian") {
    if (cfg.precision.empty()) throw DomainError("model 'gaussian' needs --precision 'a,b;c,d'");
    const Eigen::MatrixXd lam = parse_matrix(cfg.precision);
    make = [lam](const Eigen::VectorXd& b) { return models::gaussian_target_model(lam, b); };
    base = models::gaussian_target_model(lam, Eigen::VectorXd::Zero(lam.rows()));
  } else {
    throw DomainError("unknown model '" + cfg.model +
                      "'; valid models: microcredit, normal-normal, normal-inverse-gamma, gaussian");
  }
  if (cfg.priors.empty()) return base;
  Eigen::VectorXd alpha = base.hyperparams;
  for (const auto& kv : cfg.priors) {
    const auto eq = kv.find('=');
    if (eq == std::string::npos) throw DomainError("prior override '" + kv + "' is not key=value");
    const std::size_t j = base.hyper_index(kv.substr(0, eq));
    try {
      std::size_t pos = 0;
      const std::string val = kv.substr(eq + 1);
      alpha(static_cast<Eigen::Index>(j)) = std::stod(val, &pos);
      if (pos != val.size()) throw std::invalid_argument(val);
    } catch (const std::logic_error&) {
      throw DomainError("prior override '" + kv + "' has a non-numeric value");
    }
  }
  return make(alpha);
}

FitOptions fit_options(const RunConfig& cfg) {
  if (!(cfg.tol > 0.0)) throw DomainError("--tol must be positive");
  if (cfg.max_iter <= 0) throw DomainError("--max-iter must be positive");
  FitOptions o;
  o.tol = cfg.tol;
  o.max_iter = cfg.max_iter;
  return o;
}

json header(const char* command, const ModelSpec& model) {
  json j;
  j["schema_version"] = kSchemaVersion;
  j["command"] = command;
  j["model"] = model.name;
  j["model_hash"] = hex(model_hash(model));
  json h = json::object();
  for (std::size_t i = 0; i < model.hyper_names.size(); ++i)
    h[model.hyper_names[i]] = model.hyperparams(static_cast<Eigen::Index>(i));
  j["hyperparameters"] = h;
  return j;
}

std::vector<std::string> all_or(const std::vector<std::string>& given, const std::vector<std::string>& all) {
  return given.empty() ? all : given;
}

// ---------------------------------------------------------------------------
// Subcommands.

int run_fit(const RunConfig& cfg) {
  const ModelSpec model = build_model(cfg);
  VbSolution sol;
  std::string failure;
  try {
    sol = fit(model, model.default_init, fit_options(cfg));
  } catch (const FitNonConvergence& e) {
    sol = e.last();
    failure = std::string(e.kind()) + ": " + e.what();
  }
  std::optional<LrvbSystem> sys;
  if (failure.empty()) sys = build_system(model, sol);
  const Eigen::MatrixXd v = variational_covariance(model, sol.mean);

  json j = header("fit", model);
  j["solution_hash"] = hex(solution_hash(sol));
  j["converged"] = sol.converged && failure.empty();
  j["iterations"] = sol.iterations;
  j["elbo"] = sol.elbo;
  j["grad_norm"] = sol.grad_norm;
  j["elbo_trace"] = json(sol.elbo_trace);
  json blocks = json::array();
  for (std::size_t i = 0; i < model.blocks.size(); ++i)
    blocks.push_back({{"name", model.blocks[i].name},
                      {"family", family_name(model.blocks[i].shape.family)},
                      {"mean", vec(model.block_mean(sol.mean, i))}});
  j["blocks"] = blocks;
  json qs = json::array();
  std::ostringstream csv;
  csv << "quantity,vb_mean,vb_sd,lrvb_sd\n";
  for (const auto& q : model.quantities) {
    const double mean = q.gradient.dot(sol.mean);
    const double vb_sd = std::sqrt(std::max(0.0, q.gradient.dot(v * q.gradient)));
    const double lr_sd =
        sys ? std::sqrt(std::max(0.0, q.gradient.dot(sys->sigma_hat * q.gradient))) : std::nan("");
    qs.push_back({{"name", q.name}, {"vb_mean", mean}, {"vb_sd", vb_sd}, {"lrvb_sd", lr_sd}});
    csv << csv_cell(q.name) << ',' << fmt17(mean) << ',' << fmt17(vb_sd) << ',' << fmt17(lr_sd) << '\n';
  }
  j["quantities"] = qs;
  if (sys) {
    j["lrvb"] = {{"condition", sys->condition}, {"asymmetry", sys->asymmetry}, {"diagnostics", sys->diagnostics}};
  } else {
    j["lrvb"] = nullptr;
  }
  j["error"] = failure.empty() ? json(nullptr) : json(failure);
  write_output(cfg, cfg.format == "csv" ? csv.str() : to_text(j));
  if (!failure.empty()) {
    std::cerr << "error: " << failure << "\n";
    return 3;
  }
  return 0;
}

struct Fitted {
  ModelSpec model;
  VbSolution sol;
  LrvbSystem sys;
};

Fitted fit_and_linearize(const RunConfig& cfg) {
  Fitted f{build_model(cfg), {}, {}};
  f.sol = fit(f.model, f.model.default_init, fit_options(cfg));
  f.sys = build_system(f.model, f.sol);
  return f;
}

int run_sensitivity(const RunConfig& cfg) {
  const Fitted f = fit_and_linearize(cfg);
  const auto qnames = all_or(cfg.quantities, quantity_names(f.model));
  const auto hnames = all_or(cfg.hypers, f.model.hyper_names);
  const SensitivityReport rep = make_report(f.model, f.sol, f.sys, hyperparameter_queries(f.model, qnames, hnames));
  json j = header("sensitivity", f.model);
  j["solution_hash"] = hex(rep.solution_hash);
  json entries = json::array();
  std::ostringstream csv;
  csv << "quantity,direction,value,normalized,posterior_sd,error\n";
  for (const auto& e : rep.entries) {
    entries.push_back({{"quantity", e.quantity},
                       {"direction", e.direction},
                       {"value", e.value},
                       {"normalized", e.normalized},
                       {"posterior_sd", e.posterior_sd},
                       {"error", e.ok() ? json(nullptr) : json(e.error)}});
    csv << csv_cell(e.quantity) << ',' << csv_cell(e.direction) << ',' << fmt17(e.value) << ','
        << fmt17(e.normalized) << ',' << fmt17(e.posterior_sd) << ',' << csv_cell(e.error) << '\n';
  }
  j["entries"] = entries;
  write_output(cfg, cfg.format == "csv" ? csv.str() : to_text(j));
  return 0;
}

int run_influence_grid(const RunConfig& cfg) {
  const Fitted f = fit_and_linearize(cfg);
  const ModelSpec& model = f.model;
  std::size_t bi = 0;
  if (!cfg.block.empty()) {
    bi = model.block_index(cfg.block);
  } else {
    if (model.prior_marginals.empty()) throw DomainError("no block of this model has a factorizing prior");
    bi = model.prior_marginals.begin()->first;
  }
  const std::string qname = cfg.quantity.empty() ? model.quantities.front().name : cfg.quantity;
  const Eigen::VectorXd target = model.quantity(qname).gradient;
  const auto& layout = model.blocks[bi];
  const ExpFamBlock q = model.block(f.sol.mean, bi);
  const std::size_t dim = layout.shape.family == Family::GaussianMultivariate ? layout.shape.order : 1;
  if (layout.shape.family == Family::Wishart) throw DomainError("influence grids are not available for Wishart blocks");
  if (dim > 2) throw DomainError("influence grids support 1-D and 2-D blocks only");
  if (cfg.points < 2) throw DomainError("--points must be at least 2");

  // Default box: +-3 posterior sds per axis (linear-response sds for Gaussian
  // coordinates, q sds for a variance block).
  std::vector<std::pair<double, double>> box;
  if (!cfg.box.empty()) {
    if (cfg.box.size() != 2 * dim)
      throw DomainError("--box needs " + std::to_string(2 * dim) + " numbers for block '" + layout.name + "'");
    for (std::size_t a = 0; a < dim; ++a) {
      if (!(cfg.box[2 * a] < cfg.box[2 * a + 1])) throw DomainError("--box bounds must satisfy lo < hi");
      box.emplace_back(cfg.box[2 * a], cfg.box[2 * a + 1]);
    }
  } else if (layout.shape.family == Family::InverseGamma || layout.shape.family == Family::Gamma) {
    double mean = 0.0, sd = 0.0;
    if (layout.shape.family == Family::InverseGamma) {
      const auto p = lrvb::detail::invgamma_from_natural(q.natural);
      if (!(p.shape > 2.0)) throw DomainError("q variance is infinite; pass --box explicitly");
      mean = p.rate / (p.shape - 1.0);
      sd = mean / std::sqrt(p.shape - 2.0);
    } else {
      const auto p = lrvb::detail::gamma_from_natural(q.natural);
      mean = p.shape / p.rate;
      sd = std::sqrt(p.shape) / p.rate;
    }
    box.emplace_back(std::max(mean - 3.0 * sd, 1e-3 * mean), mean + 3.0 * sd);
  } else {
    for (std::size_t a = 0; a < dim; ++a) {
      const auto k = static_cast<Eigen::Index>(layout.offset + a);
      const double sd = std::sqrt(f.sys.sigma_hat(k, k));
      box.emplace_back(f.sol.mean(k) - 3.0 * sd, f.sol.mean(k) + 3.0 * sd);
    }
  }

  const auto n = static_cast<std::size_t>(cfg.points);
  auto axis = [n](std::pair<double, double> b, std::size_t i) {
    return b.first + (b.second - b.first) * static_cast<double>(i) / static_cast<double>(n - 1);
  };
  std::vector<Eigen::VectorXd> pts;
  if (dim == 1) {
    for (std::size_t i = 0; i < n; ++i) pts.push_back(Eigen::VectorXd::Constant(1, axis(box[0], i)));
  } else {
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t k = 0; k < n; ++k) pts.push_back(Eigen::Vector2d(axis(box[0], i), axis(box[1], k)));
  }
  const std::vector<double> vals = influence_grid(model, f.sol, f.sys, bi, target, pts);
  const double psd = std::sqrt(target.dot(f.sys.sigma_hat * target));

  json j = header("influence-grid", model);
  j["solution_hash"] = hex(solution_hash(f.sol));
  j["block"] = layout.name;
  j["quantity"] = qname;
  j["posterior_sd"] = psd;
  json axes = json::array();
  for (std::size_t a = 0; a < dim; ++a) axes.push_back({{"lo", box[a].first}, {"hi", box[a].second}, {"points", n}});
  j["axes"] = axes;
  json grid = json::array();
  std::ostringstream csv;
  csv << (dim == 1 ? "x,value\n" : "x,y,value\n");
  for (std::size_t i = 0; i < pts.size(); ++i) {
    grid.push_back({{"point", vec(pts[i])}, {"value", vals[i]}});
    for (Eigen::Index a = 0; a < pts[i].size(); ++a) csv << fmt17(pts[i](a)) << ',';
    csv << fmt17(vals[i]) << '\n';
  }
  j["grid"] = grid;
  write_output(cfg, cfg.format == "csv" ? csv.str() : to_text(j));
  return 0;
}

int run_compare(const RunConfig& cfg) {
  const Fitted f = fit_and_linearize(cfg);
  ComparisonOptions o;
  if (cfg.engine == "quadrature") o.engine = Engine::Quadrature;
  else if (cfg.engine == "vb") o.engine = Engine::Vb;
  else if (cfg.engine == "mcmc") o.engine = Engine::Mcmc;
  else throw DomainError("unknown engine '" + cfg.engine + "'; valid engines: quadrature, vb, mcmc");
  if (o.engine != Engine::Vb && !f.model.parameter_density)
    throw DomainError("model '" + f.model.name + "' has no exact density for the " + cfg.engine + " engine");
  if (o.engine == Engine::Quadrature && f.model.parameter_density->dim > 2)
    throw DomainError("the quadrature engine handles at most two parameters");
  o.hypers = cfg.hypers;
  o.quantities = cfg.quantities;
  if (!(cfg.relative_step > 0.0)) throw DomainError("--relative-step must be positive");
  o.relative_step = cfg.relative_step;
  if (cfg.step != 0.0)
    for (const auto& h : all_or(cfg.hypers, f.model.hyper_names)) o.steps[h] = cfg.step;
  o.richardson = !cfg.no_richardson;
  o.fit = fit_options(cfg);
  if (cfg.draws < 100) throw DomainError("--draws must be at least 100");
  o.mcmc.burn_in = cfg.burn_in;
  o.mcmc.chain_length = cfg.burn_in + cfg.draws;
  o.mcmc.seed = cfg.seed;
  const ComparisonResult r = perturb_and_rerun(f.model, f.sol, f.sys, o);

  json j = header("compare", f.model);
  j["solution_hash"] = hex(solution_hash(f.sol));
  j["engine"] = engine_name(r.engine);
  j["seed"] = cfg.seed;
  j["slope"] = r.slope;
  j["correlation"] = r.correlation;
  json pts = json::array();
  std::ostringstream csv;
  csv << "quantity,hyper,step,predicted,actual,se\n";
  for (const auto& p : r.points) {
    pts.push_back({{"quantity", p.quantity},
                   {"hyper", p.hyper},
                   {"step", p.step},
                   {"predicted", p.predicted},
                   {"actual", p.actual},
                   {"se", p.se}});
    csv << csv_cell(p.quantity) << ',' << csv_cell(p.hyper) << ',' << fmt17(p.step) << ',' << fmt17(p.predicted)
        << ',' << fmt17(p.actual) << ',' << fmt17(p.se) << '\n';
  }
  j["points"] = pts;
  write_output(cfg, cfg.format == "csv" ? csv.str() : to_text(j));
  return 0;
}

int run_simulate(const RunConfig& cfg) {
  if (cfg.sites < 2) throw DomainError("--sites must be at least 2");
  if (cfg.per_site < 1) throw DomainError("--per-site must be positive");
  const auto data = models::simulate_microcredit(models::MicrocreditTruth::standard(cfg.sites),
                                                 std::vector<std::size_t>(cfg.sites, cfg.per_site), cfg.seed);
  std::ostringstream os;
  models::write_microcredit_csv(os, data);
  write_output(cfg, os.str());
  return 0;
}

bool validation_error(const Error& e) {
  return dynamic_cast<const DomainError*>(&e) || dynamic_cast<const DimensionMismatch*>(&e) ||
         dynamic_cast<const NotConjugate*>(&e);
}

}  // namespace

int main(int argc, char** argv) {
  RunConfig cfg;
  CLI::App app{"Mean-field VB with linear-response covariances and prior sensitivity."};
  app.require_subcommand(1);

  auto common = [&](CLI::App* s) {
    s->add_option("--model", cfg.model, "microcredit | normal-normal | normal-inverse-gamma | gaussian")
        ->capture_default_str();
    s->add_option("--data", cfg.data, "input CSV (microcredit: site,treatment,outcome; normal models: x)");
    s->add_option("--prior", cfg.priors, "hyperparameter override key=value (repeatable)");
    s->add_option("--out", cfg.out, "output file (default: stdout)");
    s->add_option("--format", cfg.format, "json | csv")->check(CLI::IsMember({"json", "csv"}))->capture_default_str();
    s->add_option("--tol", cfg.tol, "optimizer gradient-norm tolerance")->capture_default_str();
    s->add_option("--max-iter", cfg.max_iter, "optimizer iteration budget")->capture_default_str();
    s->add_option("--noise-variance", cfg.noise_variance, "known noise variance (normal-normal)")
        ->capture_default_str();
    s->add_option("--precision", cfg.precision, "target precision 'a,b;c,d' (gaussian)");
  };

  auto* fit_cmd = app.add_subcommand("fit", "fit the model and write the VB solution summary");
  common(fit_cmd);

  auto* sens = app.add_subcommand("sensitivity", "hyperparameter sensitivity report");
  common(sens);
  sens->add_option("--hyper", cfg.hypers, "hyperparameters (default: all)")->delimiter(',');
  sens->add_option("--quantity", cfg.quantities, "quantities (default: all)")->delimiter(',');

  auto* infl = app.add_subcommand("influence-grid", "influence function on a lattice");
  common(infl);
  infl->add_option("--block", cfg.block, "block to contaminate (default: first with a factorizing prior)");
  infl->add_option("--quantity", cfg.quantity, "quantity of interest (default: first)");
  infl->add_option("--box", cfg.box, "lo,hi per axis (default: +-3 posterior sds)")->delimiter(',');
  infl->add_option("--points", cfg.points, "lattice points per axis")->capture_default_str();

  auto* cmp = app.add_subcommand("compare", "linear response vs perturb-and-rerun");
  common(cmp);
  cmp->add_option("--engine", cfg.engine, "quadrature | vb | mcmc")->capture_default_str();
  cmp->add_option("--hyper", cfg.hypers, "hyperparameters (default: all)")->delimiter(',');
  cmp->add_option("--quantity", cfg.quantities, "quantities (default: all)")->delimiter(',');
  cmp->add_option("--step", cfg.step, "absolute step for every hyperparameter (default: relative)");
  cmp->add_option("--relative-step", cfg.relative_step, "step as a fraction of |alpha_j|")->capture_default_str();
  cmp->add_flag("--no-richardson", cfg.no_richardson, "skip the halved-step check");
  cmp->add_option("--draws", cfg.draws, "kept MCMC sweeps")->capture_default_str();
  cmp->add_option("--burn-in", cfg.burn_in, "MCMC burn-in sweeps")->capture_default_str();
  cmp->add_option("--seed", cfg.seed, "MCMC seed")->capture_default_str();

  auto* sim = app.add_subcommand("simulate", "write a synthetic microcredit dataset");
  sim->add_option("--sites", cfg.sites, "number of sites")->capture_default_str();
  sim->add_option("--per-site", cfg.per_site, "observations per site")->capture_default_str();
  sim->add_option("--seed", cfg.seed, "seed")->capture_default_str();
  sim->add_option("--out", cfg.out, "output CSV (default: stdout)");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    if (e.get_exit_code() == 0) return app.exit(e);
    std::cerr << "usage error: " << e.what() << "\n\n";
    const auto subs = app.get_subcommands();
    std::cerr << (subs.empty() ? app.help() : subs.front()->help());
    if (!subs.empty() && subs.front()->get_name() != "simulate")
      std::cerr << "\noutput schema: schemas/" << subs.front()->get_name() << ".schema.json\n";
    return 2;
  }

  try {
    if (fit_cmd->parsed()) return run_fit(cfg);
    if (sens->parsed()) return run_sensitivity(cfg);
    if (infl->parsed()) return run_influence_grid(cfg);
    if (cmp->parsed()) return run_compare(cfg);
    if (sim->parsed()) return run_simulate(cfg);
  } catch (const Error& e) {
    std::cerr << "error: " << e.kind() << ": " << e.what() << "\n";
    return validation_error(e) ? 2 : 3;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 3;
  }
  return 2;
}
