#pragma once

#include "mfg/value.hpp"

#include <filesystem>
#include <iosfwd>
#include <string>
#include <vector>

namespace mfg::cli {

inline constexpr int kSchemaVersion = 1;

enum ExitCode { kOk = 0, kConfigError = 2, kDivergence = 3, kCheckFailed = 4 };

struct Tolerances {
  double relative = 0.02;        // solver vs oracle
  double relative_floor = 1e-2;  // denominator floor for near-zero references
  double optimality = 1e-8;
  double master = 0.05;          // scaled by 1 + |x|^2
  double dpp = 1e-2;
  double decoupling = 0.05;      // scaled by 1 + |x|^2
};

struct RunConfig {
  std::string task;
  std::uint64_t seed = 0;
  nlohmann::json model_json;
  std::vector<std::vector<double>> mu;
  double t = 0.0;
  ValueSettings value;             // K, solver parameters, probes, fd step
  int lq_K = 1000;
  std::vector<Vec> x;
  std::vector<Vec> probes;
  int master_count = 10;
  double master_t_lo = 0.0, master_t_hi = 0.8, master_x_lo = -2.0, master_x_hi = 2.0;
  double dpp_eps = 0.1;
  std::vector<double> decoupling_s;
  int assumption_samples = 500;
  double assumption_half_width = 3.0;
  int max_particles = 100;
  Tolerances tol;
  std::filesystem::path out = "out";
  std::string config_text;         // canonical dump, hashed into the manifest
};

/// Validates every key; errors are ConfigError naming the offending key.
RunConfig parse_config(const nlohmann::json& j, const std::filesystem::path& base_dir);
RunConfig load_config(const std::filesystem::path& path);

/// Runs the task, writes summary.json, manifest.json and CSV files into cfg.out.
int run(const RunConfig& cfg, std::ostream& err);

int main_entry(int argc, char** argv);

}  // namespace mfg::cli
