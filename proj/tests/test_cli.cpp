#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include "mfg/cli.hpp"
#include "support.hpp"

#include <cmath>
#include <cstdlib>
#include <fstream>
#include <sstream>
#include <sys/wait.h>

using namespace mfg;
using namespace testing_support;
using nlohmann::json;
namespace fs = std::filesystem;

namespace {

fs::path scratch(const std::string& name) {
  const auto p = fs::temp_directory_path() / "mfg_cli_test" / name;
  fs::remove_all(p);
  fs::create_directories(p);
  return p;
}

std::string slurp(const fs::path& p) {
  std::ifstream is(p);
  std::stringstream ss;
  ss << is.rdbuf();
  return ss.str();
}

struct Outcome {
  int code;
  std::string err;
};

Outcome run_cli(const fs::path& config, const std::string& extra = "") {
  const auto err = config.parent_path() / "stderr.txt";
  const std::string cmd =
      std::string(MFG_CLI_PATH) + " --config " + config.string() + " " + extra + " 2> " + err.string();
  const int status = std::system(cmd.c_str());
  return {WIFEXITED(status) ? WEXITSTATUS(status) : -1, slurp(err)};
}

json small_config(const std::string& task) {
  return {{"schema_version", 1},
          {"task", task},
          {"seed", 11},
          {"model", model_to_json(tanh_data())},
          {"mu", {{1.0}}},
          {"solver", {{"N", 200}, {"K", 10}}},
          {"x", {{0.5}}},
          {"output", {{"dir", "out"}}}};
}

fs::path write_config(const fs::path& dir, const json& j) {
  const auto p = dir / "config.json";
  std::ofstream(p) << j.dump(2);
  return p;
}

}  // namespace

TEST_CASE("parse_config defaults and model file") {
  const auto dir = scratch("parse");
  std::ofstream(dir / "model.json") << model_to_json(tanh_data()).dump();
  json j = small_config("value");
  j.erase("model");
  j["model_file"] = "model.json";
  const auto c = cli::parse_config(j, dir);
  CHECK(c.value.params.N == 200);
  CHECK(c.value.params.seed == 11);
  CHECK(c.value.K == 10);
  CHECK(c.tol.relative == 0.02);
  CHECK(c.out == dir / "out");
  CHECK(c.x.size() == 1);
  CHECK(json::parse(c.config_text).contains("model"));
}

TEST_CASE("malformed configs name the offending key") {
  auto expect_key = [](json j, const std::string& key) {
    try {
      cli::parse_config(j, ".");
      FAIL("expected ConfigError for " << key);
    } catch (const ConfigError& e) {
      CHECK(e.key == key);
    }
  };
  auto j = small_config("value");
  j["solver"]["N"] = "many";
  expect_key(j, "solver.N");
  j = small_config("value");
  j.erase("seed");
  expect_key(j, "seed");
  j = small_config("value");
  j["bogus"] = 1;
  expect_key(j, "bogus");
  j = small_config("value");
  j["mu"] = {{1.0, 2.0}};
  expect_key(j, "mu[0]");
  j = small_config("teleport");
  expect_key(j, "task");
  j = small_config("value");
  j["model"]["F2"] = "one";
  expect_key(j, "model.F2");
  j = small_config("value");
  j["schema_version"] = 2;
  expect_key(j, "schema_version");

  const auto dir = scratch("malformed");
  j = small_config("value");
  j["tolerances"] = {{"master", -1.0}};
  const auto r = run_cli(write_config(dir, j));
  CHECK(r.code == cli::kConfigError);
  CHECK(r.err.find("tolerances.master") != std::string::npos);
  CHECK(run_cli(dir / "missing.json").code == cli::kConfigError);
  std::ofstream(dir / "broken.json") << "{ \"task\": ";
  CHECK(run_cli(dir / "broken.json").code == cli::kConfigError);
}

TEST_CASE("identical config and seed give identical outputs") {
  const auto dir = scratch("determinism");
  const auto cfg = write_config(dir, small_config("solve-mfg"));
  REQUIRE(run_cli(cfg, "--out " + (dir / "a").string()).code == 0);
  REQUIRE(run_cli(cfg, "--out " + (dir / "b").string()).code == 0);
  for (const auto* f : {"summary.json", "manifest.json", "mfg_paths.csv", "flow_moments.csv"}) {
    INFO(f);
    CHECK(slurp(dir / "a" / f) == slurp(dir / "b" / f));
    CHECK_FALSE(slurp(dir / "a" / f).empty());
  }
  REQUIRE(run_cli(cfg, "--out " + (dir / "c").string() + " --seed 12").code == 0);
  const auto a = json::parse(slurp(dir / "a" / "manifest.json"));
  const auto c = json::parse(slurp(dir / "c" / "manifest.json"));
  CHECK(c["seed"] == 12);
  CHECK(a["config_sha256"] != c["config_sha256"]);
  CHECK(a["config_sha256"].get<std::string>().size() == 64);
  CHECK(slurp(dir / "a" / "mfg_paths.csv") != slurp(dir / "c" / "mfg_paths.csv"));
  const auto s = json::parse(slurp(dir / "a" / "summary.json"));
  CHECK(s["schema_version"] == 1);
  CHECK(s["status"] == "ok");
  CHECK(s["checks"][0]["pass"] == true);
}

TEST_CASE("assumption check failure exits 4 with a witness") {
  const auto dir = scratch("concave");
  auto D = MomentModelData::zeros(1, 1, 1.0);
  D.b2 = scalar(1.0);
  D.F1 = scalar(1.0);
  D.F2 = scalar(-1.0);
  json j = small_config("check-assumptions");
  j["model"] = model_to_json(D);
  j["assumptions"] = {{"samples", 50}};
  const auto r = run_cli(write_config(dir, j));
  CHECK(r.code == cli::kCheckFailed);
  const auto s = json::parse(slurp(dir / "out" / "summary.json"));
  CHECK(s["status"] == "check_failed");
  CHECK(s["witness"].get<std::string>().find("convexity") != std::string::npos);

  j["model"] = model_to_json(tanh_data());
  CHECK(run_cli(write_config(dir, j)).code == cli::kOk);
}

TEST_CASE("solver divergence exits 3 with diagnostics") {
  const auto dir = scratch("diverge");
  auto D = tanh_data(0.3, -40.0, 1.0);
  D.constants.lambda_g = 0.0;
  json j = small_config("solve-mfg");
  j["model"] = model_to_json(D);
  j["solver"] = {{"N", 64}, {"K", 20}, {"max_sweeps", 30}};
  const auto r = run_cli(write_config(dir, j));
  CHECK(r.code == cli::kDivergence);
  const auto d = json::parse(slurp(dir / "out" / "diagnostics.json"));
  CHECK(d["type"] == "FlowDivergence");
  CHECK(json::parse(slurp(dir / "out" / "summary.json"))["status"] == "diverged");
}

TEST_CASE("lq-oracle and compare tasks") {
  const auto dir = scratch("oracle");
  json j = small_config("lq-oracle");
  j["x"] = {{1.0}};
  REQUIRE(run_cli(write_config(dir, j)).code == 0);
  const auto s = json::parse(slurp(dir / "out" / "summary.json"));
  CHECK(std::abs(s["results"]["V2_0"][0][0].get<double>() - std::tanh(1.0)) <= 1e-8);
  CHECK(slurp(dir / "out" / "lq_oracle.csv").rfind("node,t,V2_0_0,V1_0,V0,mean0\n", 0) == 0);

  j["task"] = "compare";
  j["solver"] = {{"N", 1000}, {"K", 20}};
  j["tolerances"] = {{"relative", 0.05}};
  REQUIRE(run_cli(write_config(dir, j)).code == 0);
  const auto c = json::parse(slurp(dir / "out" / "summary.json"));
  CHECK(c["results"]["points"][0]["rel_error_DxV"].get<double>() <= 0.05);

  // A non-LQ model has no oracle.
  auto D = tanh_data();
  D.kind = "moment_coupled";
  D.eps_x = 0.1;
  j["model"] = model_to_json(D);
  const auto r = run_cli(write_config(dir, j));
  CHECK(r.code == cli::kConfigError);
  CHECK(r.err.find("model") != std::string::npos);
}
