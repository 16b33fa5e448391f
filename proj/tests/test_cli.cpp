#include <sys/wait.h>

#include <cstdio>
#include <fstream>
#include <sstream>
#include <string>

#include <gtest/gtest.h>
#include <json.hpp>

#include "lrvb/all.hpp"

using json = nlohmann::json;

namespace {

struct RunResult {
  int code = -1;
  std::string out, err;
};

std::string slurp(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  std::stringstream ss;
  ss << f.rdbuf();
  return ss.str();
}

std::string tmp(const std::string& name) { return ::testing::TempDir() + "lrvb_cli_" + name; }

RunResult run(const std::string& args) {
  const std::string err = tmp("stderr.txt");
  const std::string cmd = std::string(LRVB_CLI_PATH) + " " + args + " 2>" + err;
  RunResult r;
  FILE* p = popen(cmd.c_str(), "r");
  if (!p) return r;
  char buf[4096];
  std::size_t n;
  while ((n = fread(buf, 1, sizeof buf, p)) > 0) r.out.append(buf, n);
  const int status = pclose(p);
  r.code = WIFEXITED(status) ? WEXITSTATUS(status) : -1;
  r.err = slurp(err);
  return r;
}

const std::string kData = std::string(LRVB_SOURCE_DIR) + "/data/microcredit_synthetic.csv";

std::string normal_fixture() {
  const std::string path = tmp("normal.csv");
  std::ofstream f(path);
  f << "x\n0.5\n1.2\n-0.3\n2.0\n0.7\n";
  return path;
}

json schema(const std::string& name) {
  return json::parse(slurp(std::string(LRVB_SOURCE_DIR) + "/schemas/" + name + ".schema.json"));
}

// Every object key in the output is declared in the schema, recursively.
void expect_documented(const json& value, const json& sch, const std::string& where) {
  if (value.is_object()) {
    const bool open_map = sch.contains("additionalProperties") && sch["additionalProperties"].is_object();
    ASSERT_TRUE(sch.contains("properties") || open_map) << where;
    const json props = sch.value("properties", json::object());
    for (auto it = value.begin(); it != value.end(); ++it) {
      if (props.contains(it.key())) {
        expect_documented(it.value(), props[it.key()], where + "." + it.key());
      } else {
        EXPECT_TRUE(open_map) << "undocumented field " << where << "." << it.key();
      }
    }
    if (sch.contains("required"))
      for (const auto& k : sch["required"]) EXPECT_TRUE(value.contains(k.get<std::string>())) << where << " lacks " << k;
  } else if (value.is_array() && sch.contains("items")) {
    for (const auto& e : value) expect_documented(e, sch["items"], where + "[]");
  }
}

}  // namespace

TEST(Cli, FitOnBundledFixtureConverges) {
  const std::string out = tmp("fit.json");
  const RunResult r = run("fit --model microcredit --data " + kData + " --out " + out);
  ASSERT_EQ(r.code, 0) << r.err;
  const json j = json::parse(slurp(out));
  EXPECT_EQ(j["schema_version"], 1);
  EXPECT_TRUE(j["converged"].get<bool>());
  EXPECT_EQ(j["quantities"].size(), 2u + 3u * 7u + 3u);
  expect_documented(j, schema("fit"), "fit");
}

TEST(Cli, IdenticalRunsGiveIdenticalBytes) {
  const RunResult a = run("fit --data " + kData);
  const RunResult b = run("fit --data " + kData);
  ASSERT_EQ(a.code, 0);
  EXPECT_EQ(a.out, b.out);
  const std::string cmp = "compare --data " + kData + " --engine mcmc --hyper Lambda_11 --quantity mu,tau --step 0.1 "
                          "--draws 2000 --burn-in 1000 --seed 9";
  const RunResult c = run(cmp), d = run(cmp);
  ASSERT_EQ(c.code, 0) << c.err;
  EXPECT_EQ(c.out, d.out);
  const json j = json::parse(c.out);
  EXPECT_EQ(j["seed"], 9);
  EXPECT_EQ(j["points"].size(), 2u);
  expect_documented(j, schema("compare"), "compare");
}

TEST(Cli, DoublesUseSeventeenDigits) {
  const RunResult r = run("fit --data " + kData);
  ASSERT_EQ(r.code, 0);
  const json j = json::parse(r.out);
  const double elbo = j["elbo"].get<double>();
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.17g", elbo);
  EXPECT_NE(r.out.find(std::string("\"elbo\": ") + buf), std::string::npos);
}

TEST(Cli, ConjugateSensitivityEqualsCovarianceEntry) {
  const std::string data = normal_fixture();
  const RunResult r = run("sensitivity --model normal-normal --data " + data + " --prior a1=0.4 --prior a2=-0.8");
  ASSERT_EQ(r.code, 0) << r.err;
  const json j = json::parse(r.out);
  expect_documented(j, schema("sensitivity"), "sensitivity");
  ASSERT_EQ(j["entries"].size(), 2u);

  // Same fixture through the library.
  const auto nd = lrvb::models::NormalData::from({0.5, 1.2, -0.3, 2.0, 0.7});
  const auto model = lrvb::models::normal_normal_model(nd, 1.0, Eigen::Vector2d(0.4, -0.8));
  const auto sol = lrvb::fit(model);
  const auto sys = lrvb::build_system(model, sol);
  const json& e = j["entries"][0];
  EXPECT_EQ(e["quantity"], "theta");
  EXPECT_EQ(e["direction"], "a1");
  EXPECT_EQ(e["value"].get<double>(), sys.sigma_hat(0, 0));
  EXPECT_EQ(j["entries"][1]["value"].get<double>(), sys.sigma_hat(0, 1));
  // Closed form: posterior variance 1 / (1.6 + n).
  EXPECT_NEAR(e["value"].get<double>(), 1.0 / (1.6 + 5.0), 1e-8);
  EXPECT_TRUE(e["error"].is_null());
}

TEST(Cli, UnknownHyperparameterNamesValidKeys) {
  const RunResult r = run("sensitivity --data " + kData + " --prior Lambda_33=1");
  EXPECT_EQ(r.code, 2);
  EXPECT_NE(r.err.find("Lambda_33"), std::string::npos);
  EXPECT_NE(r.err.find("valid keys: Lambda_11, Lambda_12, Lambda_22, eta"), std::string::npos);
  const RunResult s = run("sensitivity --data " + kData + " --hyper nope");
  EXPECT_EQ(s.code, 2);
}

TEST(Cli, UsageErrorsPrintSchemaAndExitTwo) {
  const RunResult r = run("fit --no-such-flag");
  EXPECT_EQ(r.code, 2);
  EXPECT_NE(r.err.find("--model"), std::string::npos);
  EXPECT_NE(r.err.find("schemas/fit.schema.json"), std::string::npos);
  EXPECT_EQ(run("").code, 2);
  EXPECT_EQ(run("fit --format xml --data " + kData).code, 2);
  EXPECT_EQ(run("fit --model nothing").code, 2);
  EXPECT_EQ(run("fit --model microcredit").code, 2);  // no data
  EXPECT_EQ(run("fit --data /nonexistent.csv").code, 2);
  EXPECT_EQ(run("fit --data " + kData + " --prior eta=-1").code, 2);
  EXPECT_EQ(run("--help").code, 0);
}

TEST(Cli, NumericalFailureExitsThreeWithErrorName) {
  const std::string out = tmp("fail.json");
  const RunResult r = run("fit --data " + kData + " --max-iter 3 --out " + out);
  EXPECT_EQ(r.code, 3);
  EXPECT_NE(r.err.find("NonConvergence"), std::string::npos);
  const json j = json::parse(slurp(out));
  EXPECT_FALSE(j["converged"].get<bool>());
  EXPECT_TRUE(j["lrvb"].is_null());
  expect_documented(j, schema("fit"), "fit");
}

TEST(Cli, InfluenceGridDefaultsAndZeroAtMean) {
  const std::string data = normal_fixture();
  const RunResult r = run("influence-grid --model normal-normal --data " + data);
  ASSERT_EQ(r.code, 0) << r.err;
  const json j = json::parse(r.out);
  expect_documented(j, schema("influence-grid"), "influence-grid");
  ASSERT_EQ(j["grid"].size(), 41u);
  // The default box is symmetric about E_q[theta], so the centre point is the mean.
  EXPECT_EQ(j["grid"][20]["value"].get<double>(), 0.0);
  const double sd = j["posterior_sd"].get<double>();
  const double lo = j["axes"][0]["lo"].get<double>(), hi = j["axes"][0]["hi"].get<double>();
  EXPECT_NEAR(hi - lo, 6.0 * sd, 1e-12);

  const RunResult g = run("influence-grid --data " + kData + " --block mu_tau --quantity tau");
  ASSERT_EQ(g.code, 0) << g.err;
  EXPECT_EQ(json::parse(g.out)["grid"].size(), 41u * 41u);

  const RunResult c = run("influence-grid --data " + kData + " --block mu_tau --box 4,6,0,2 --points 3 --format csv");
  ASSERT_EQ(c.code, 0);
  std::istringstream lines(c.out);
  std::string line;
  std::getline(lines, line);
  EXPECT_EQ(line, "x,y,value");
  int rows = 0;
  while (std::getline(lines, line)) ++rows;
  EXPECT_EQ(rows, 9);

  EXPECT_EQ(run("influence-grid --data " + kData + " --block C_inv").code, 2);
  EXPECT_EQ(run("influence-grid --data " + kData + " --block mu_tau --box 1,2").code, 2);
}

TEST(Cli, CsvProjections) {
  const RunResult f = run("fit --data " + kData + " --format csv");
  ASSERT_EQ(f.code, 0);
  EXPECT_EQ(f.out.substr(0, f.out.find('\n')), "quantity,vb_mean,vb_sd,lrvb_sd");
  const RunResult s = run("sensitivity --data " + kData + " --hyper eta --quantity mu --format csv");
  ASSERT_EQ(s.code, 0);
  EXPECT_EQ(s.out.substr(0, s.out.find('\n')), "quantity,direction,value,normalized,posterior_sd,error");
  const RunResult c = run("compare --data " + kData + " --engine vb --hyper eta --quantity mu --format csv");
  ASSERT_EQ(c.code, 0) << c.err;
  EXPECT_EQ(c.out.substr(0, c.out.find('\n')), "quantity,hyper,step,predicted,actual,se");
}

TEST(Cli, CompareEngines) {
  const std::string data = normal_fixture();
  const RunResult q = run("compare --model normal-normal --data " + data + " --engine quadrature");
  ASSERT_EQ(q.code, 0) << q.err;
  EXPECT_NEAR(json::parse(q.out)["slope"].get<double>(), 1.0, 1e-3);
  EXPECT_EQ(run("compare --data " + kData + " --engine quadrature").code, 2);
  EXPECT_EQ(run("compare --data " + kData + " --engine gibbs").code, 2);
}

TEST(Cli, SimulateReproducesBundledFixture) {
  const RunResult r = run("simulate --seed 20240607");
  ASSERT_EQ(r.code, 0);
  EXPECT_EQ(r.out, slurp(kData));
  EXPECT_NE(run("simulate --seed 1").out, r.out);
  EXPECT_EQ(run("simulate --sites 1").code, 2);
}
