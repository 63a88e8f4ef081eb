#include "mfg/cli.hpp"

#include "mfg/lq.hpp"

#include <CLI11.hpp>
#include <openssl/evp.h>

#include <algorithm>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <optional>
#include <random>
#include <set>
#include <sstream>

namespace mfg::cli {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

const std::vector<std::string> kTasks = {"solve-mfg", "solve-control", "value",     "derivatives",
                                         "check-master", "check-assumptions", "lq-oracle", "compare"};

void only_keys(const json& j, const std::string& where, const std::set<std::string>& allowed) {
  if (!j.is_object()) throw ConfigError(where.empty() ? "<root>" : where, "expected an object");
  for (const auto& [k, v] : j.items()) {
    if (!allowed.count(k)) throw ConfigError(where.empty() ? k : where + "." + k, "unknown key");
  }
}

std::string join(const std::string& where, const std::string& key) { return where.empty() ? key : where + "." + key; }

double get_double(const json& j, const std::string& where, const std::string& key, double fallback) {
  if (!j.contains(key)) return fallback;
  const auto& v = j.at(key);
  if (!v.is_number()) throw ConfigError(join(where, key), "expected a number");
  const double x = v.get<double>();
  if (!std::isfinite(x)) throw ConfigError(join(where, key), "must be finite");
  return x;
}

int get_int(const json& j, const std::string& where, const std::string& key, int fallback, int min_value) {
  if (!j.contains(key)) return fallback;
  const auto& v = j.at(key);
  if (!v.is_number_integer()) throw ConfigError(join(where, key), "expected an integer");
  const auto x = v.get<long long>();
  if (x < min_value || x > 100000000) throw ConfigError(join(where, key), "out of range");
  return static_cast<int>(x);
}

double positive(double x, const std::string& key) {
  if (!(x > 0.0)) throw ConfigError(key, "must be positive");
  return x;
}

/// A point is a number (1D) or an array of numbers.
std::vector<double> point(const json& v, const std::string& key) {
  if (v.is_number()) return {v.get<double>()};
  if (!v.is_array() || v.empty()) throw ConfigError(key, "expected a number or a non-empty array of numbers");
  std::vector<double> out;
  for (const auto& e : v) {
    if (!e.is_number()) throw ConfigError(key, "expected numbers");
    out.push_back(e.get<double>());
  }
  return out;
}

std::vector<std::vector<double>> points(const json& v, const std::string& key, int n) {
  if (!v.is_array() || v.empty()) throw ConfigError(key, "expected a non-empty array of points");
  std::vector<std::vector<double>> out;
  for (std::size_t i = 0; i < v.size(); ++i) {
    const auto key_i = key + "[" + std::to_string(i) + "]";
    auto p = point(v[i], key_i);
    if (static_cast<int>(p.size()) != n) throw ConfigError(key_i, "dimension must be " + std::to_string(n));
    out.push_back(std::move(p));
  }
  return out;
}

std::vector<Vec> as_vecs(const std::vector<std::vector<double>>& ps) {
  std::vector<Vec> out;
  for (const auto& p : ps) out.push_back(Eigen::Map<const Eigen::VectorXd>(p.data(), p.size()));
  return out;
}

std::pair<double, double> range(const json& j, const std::string& where, const std::string& key,
                                std::pair<double, double> fallback) {
  if (!j.contains(key)) return fallback;
  const auto r = point(j.at(key), join(where, key));
  if (r.size() != 2 || !(r[0] <= r[1])) throw ConfigError(join(where, key), "expected [lo, hi] with lo <= hi");
  return {r[0], r[1]};
}

std::string sha256_hex(const std::string& text) {
  unsigned char digest[EVP_MAX_MD_SIZE];
  unsigned int len = 0;
  EVP_Digest(text.data(), text.size(), digest, &len, EVP_sha256(), nullptr);
  std::ostringstream os;
  for (unsigned int i = 0; i < len; ++i) os << std::hex << std::setw(2) << std::setfill('0') << int(digest[i]);
  return os.str();
}

json vec_json(const Vec& v) { return std::vector<double>(v.data(), v.data() + v.size()); }

json mat_json(const Mat& m) {
  json rows = json::array();
  for (int r = 0; r < m.rows(); ++r) rows.push_back(vec_json(m.row(r).transpose()));
  return rows;
}

double rel_error(double a, double ref, double floor) { return std::abs(a - ref) / std::max(std::abs(ref), floor); }

double rel_error(const Mat& a, const Mat& ref, double floor) {
  return (a - ref).norm() / std::max(ref.norm(), floor);
}

/// Collects outputs of one task.
struct Report {
  json results = json::object();
  json checks = json::array();
  std::vector<std::string> files;
  std::string witness;
  bool failed = false;

  void check(const std::string& name, double value, double tolerance, const std::string& why = "") {
    const bool pass = std::isfinite(value) && value <= tolerance;
    checks.push_back({{"name", name}, {"value", value}, {"tolerance", tolerance}, {"pass", pass}});
    if (!pass) {
      failed = true;
      if (witness.empty()) witness = name + " = " + std::to_string(value) + (why.empty() ? "" : " (" + why + ")");
    }
  }
  void flag(const std::string& name, bool pass, double margin, const std::string& w) {
    json c = {{"name", name}, {"value", margin}, {"pass", pass}};
    if (!pass) c["witness"] = w;
    checks.push_back(c);
    if (!pass) {
      failed = true;
      if (witness.empty()) witness = name + ": " + w;
    }
  }
};

class Runner {
 public:
  Runner(const RunConfig& cfg) : cfg_(cfg) {
    model_ = model_from_json(cfg.model_json);
    mu_ = std::make_unique<ParticleMeasure>(ParticleMeasure::from_atoms(cfg.mu));
    settings_ = cfg.value;
    settings_.params.seed = cfg.seed;
  }

  void execute(Report& r) {
    const auto& t = cfg_.task;
    if (t == "solve-mfg") solve_mfg_task(r);
    else if (t == "solve-control") solve_control_task(r);
    else if (t == "value") value_task(r);
    else if (t == "derivatives") derivatives_task(r);
    else if (t == "check-master") master_task(r);
    else if (t == "check-assumptions") assumptions_task(r);
    else if (t == "lq-oracle") oracle_task(r);
    else compare_task(r);
  }

 private:
  const RunConfig& cfg_;
  std::shared_ptr<MomentModel> model_;
  std::unique_ptr<ParticleMeasure> mu_;
  ValueSettings settings_;

  TimeGrid grid() const { return TimeGrid(cfg_.t, model_->horizon(), settings_.K); }

  std::ofstream open(Report& r, const std::string& name) {
    r.files.push_back(name);
    std::ofstream os(cfg_.out / name);
    os << std::setprecision(17);
    return os;
  }

  void need_points(const std::vector<Vec>& v, const std::string& key) const {
    if (v.empty()) throw ConfigError(key, "required by task " + cfg_.task);
  }

  json flow_summary(const MfgResult& m) const {
    return {{"flow_iterations", m.flow_iterations},
            {"flow_distance", m.flow_distance},
            {"continuation_used", m.continuation_used},
            {"sweeps", m.solution.sweeps},
            {"last_change", m.solution.last_change}};
  }

  void write_moments(Report& r, const MeasureFlow& flow) {
    auto os = open(r, "flow_moments.csv");
    os << "node,t";
    for (int i = 0; i < flow.dim(); ++i) os << ",mean" << i;
    os << ",m2\n";
    for (std::size_t k = 0; k < flow.feats.size(); ++k) {
      os << k << ',' << flow.grid.node(static_cast<int>(k));
      for (int i = 0; i < flow.dim(); ++i) os << ',' << flow.feats[k].mean(i);
      os << ',' << flow.feats[k].m2 << '\n';
    }
  }

  void solve_mfg_task(Report& r) {
    const auto m = solve_mfg(*model_, cfg_.t, *mu_, grid(), settings_.params);
    r.results = flow_summary(m);
    const double opt = max_optimality_residual(*model_, m.solution, m.flow);
    r.results["optimality_residual"] = opt;
    r.results["bsde_residual"] = bsde_residual(*model_, m.solution, m.flow);
    r.results["expected_cost"] = expected_cost(*model_, m.solution, m.flow);
    r.results["p0_mean"] = vec_json(m.solution.p[0].rowwise().mean());
    r.check("optimality_residual", opt, cfg_.tol.optimality);
    auto os = open(r, "mfg_paths.csv");
    write_solution_csv(os, m.solution, "base", cfg_.max_particles);
    write_moments(r, m.flow);
  }

  void solve_control_task(Report& r) {
    need_points(cfg_.x, "x");
    const auto m = solve_mfg(*model_, cfg_.t, *mu_, grid(), settings_.params);
    r.results["mfg"] = flow_summary(m);
    r.results["points"] = json::array();
    for (std::size_t i = 0; i < cfg_.x.size(); ++i) {
      const auto c = solve_control(*model_, cfg_.t, cfg_.x[i], m.flow, grid(), settings_.params);
      const double opt = max_optimality_residual(*model_, c, m.flow);
      r.results["points"].push_back({{"x", vec_json(cfg_.x[i])},
                                     {"p0", vec_json(c.p[0].rowwise().mean())},
                                     {"v0", vec_json(c.v[0].rowwise().mean())},
                                     {"value", expected_cost(*model_, c, m.flow)},
                                     {"optimality_residual", opt},
                                     {"sweeps", c.sweeps}});
      r.check("optimality_residual[" + std::to_string(i) + "]", opt, cfg_.tol.optimality);
      auto os = open(r, "control_" + std::to_string(i) + ".csv");
      write_solution_csv(os, c, "control", cfg_.max_particles);
    }
  }

  void value_task(Report& r) {
    need_points(cfg_.x, "x");
    const ValuePipeline pipe(*model_, cfg_.t, *mu_, settings_);
    r.results["mfg"] = flow_summary(pipe.mfg());
    r.results["points"] = json::array();
    for (const auto& x : cfg_.x) {
      const auto g = pipe.grad(x);
      json p = {{"x", vec_json(x)}, {"V", pipe.value(x)}, {"DxV", vec_json(g.DxV)}, {"Dx2V", mat_json(g.Dx2V)},
                {"Dx2V_asymmetry", g.asymmetry}};
      try {
        p["dtV"] = pipe.dt_value(x);
      } catch (const MissingA4&) {
        p["dtV"] = nullptr;
      }
      r.results["points"].push_back(p);
    }
  }

  void derivatives_task(Report& r) {
    need_points(cfg_.x, "x");
    need_points(cfg_.probes, "probes");
    const ValuePipeline pipe(*model_, cfg_.t, *mu_, settings_);
    const bool second = model_->n() == 1 && model_->d() == 1;
    r.results["mfg"] = flow_summary(pipe.mfg());
    r.results["points"] = json::array();
    for (std::size_t i = 0; i < cfg_.x.size(); ++i) {
      const auto& x = cfg_.x[i];
      const auto g = pipe.grad(x);
      json lfd = json::array();
      for (const auto& y : cfg_.probes) {
        const auto s = pipe.lfd(x, y, second);
        json e = {{"y", vec_json(s.y)}, {"D1", vec_json(s.D1)}};
        if (s.D2) e["D2"] = mat_json(*s.D2);
        lfd.push_back(e);
      }
      r.results["points"].push_back(
          {{"x", vec_json(x)}, {"DxV", vec_json(g.DxV)}, {"Dx2V", mat_json(g.Dx2V)}, {"lfd", lfd}});

      const auto probe = probe_data(*model_, pipe.mfg().flow, x, settings_.params, false);
      auto os = open(r, "jacobian_" + std::to_string(i) + ".csv");
      write_flow_csv(os, probe.jac, cfg_.max_particles);
    }
  }

  void master_task(Report& r) {
    std::mt19937_64 rng(cfg_.seed);
    std::uniform_real_distribution<double> ut(cfg_.master_t_lo, cfg_.master_t_hi);
    std::uniform_real_distribution<double> ux(cfg_.master_x_lo, cfg_.master_x_hi);
    const int n = model_->n();
    json pts = json::array();
    double worst = 0.0;
    for (int i = 0; i < cfg_.master_count; ++i) {
      const double t = ut(rng);
      Vec x(n);
      for (int j = 0; j < n; ++j) x(j) = ux(rng);
      const auto m = master_residual(*model_, t, x, *mu_, settings_);
      const double scaled = std::abs(m.residual) / (1.0 + x.squaredNorm());
      worst = std::max(worst, scaled);
      pts.push_back({{"t", t}, {"x", vec_json(x)}, {"dt_fd", m.dt_fd}, {"dt_formula", m.dt_formula}, {"H", m.H},
                     {"integral", m.integral}, {"residual", m.residual}, {"scaled_residual", scaled}});
    }
    r.results["master"] = pts;
    r.check("master_scaled_residual", worst, cfg_.tol.master);

    if (cfg_.dpp_eps > 0.0 && !cfg_.x.empty()) {
      double dpp = 0.0;
      json d = json::array();
      for (const auto& x : cfg_.x) {
        const double e = dpp_check(*model_, cfg_.t, x, *mu_, cfg_.dpp_eps, settings_);
        dpp = std::max(dpp, e);
        d.push_back({{"x", vec_json(x)}, {"residual", e}});
      }
      r.results["dpp"] = d;
      r.check("dpp_residual", dpp, cfg_.tol.dpp);
    }
    if (!cfg_.decoupling_s.empty() && !cfg_.x.empty()) {
      double worst_dec = 0.0;
      json d = json::array();
      for (double s : cfg_.decoupling_s) {
        for (const auto& x : cfg_.x) {
          const double e = decoupling_check(*model_, cfg_.t, *mu_, s, x, settings_);
          const double scaled = std::abs(e) / (1.0 + x.squaredNorm());
          worst_dec = std::max(worst_dec, scaled);
          d.push_back({{"s", s}, {"x", vec_json(x)}, {"residual", e}});
        }
      }
      r.results["decoupling"] = d;
      r.check("decoupling_scaled_residual", worst_dec, cfg_.tol.decoupling);
    }
  }

  void assumptions_task(Report& r) {
    std::mt19937_64 rng(cfg_.seed);
    SamplingBox box;
    box.half_width = cfg_.assumption_half_width;
    const int count = cfg_.assumption_samples;
    const auto& c = model_->constants();

    const auto conv = check_convexity(*model_, rng, count, box);
    r.flag("convexity", conv.passes, conv.worst_margin, conv.witness);
    const auto cons = check_derivative_consistency(*model_, rng, count, 1e-4, 1e-6, box);
    r.flag("derivative_consistency", cons.passes, cons.worst_margin, cons.witness);

    const bool small = check_small_mf_effect(c);
    bool mono_pass = false;
    json mono = nullptr;
    if (c.has_A3prime) {
      const auto m = check_monotonicity(*model_, rng, count, box);
      mono_pass = m.passes;
      mono = {{"pass", m.passes}, {"worst_margin", m.worst_margin}, {"witness", m.witness}};
    }
    r.results["small_mean_field_effect"] = small;
    r.results["monotonicity"] = mono;
    r.results["has_A4"] = c.has_A4;
    r.flag("small_mean_field_effect_or_monotone", small || mono_pass, 0.0,
           small || mono_pass ? "" : "neither the small mean field condition nor monotonicity holds");
  }

  LQModel oracle() const {
    try {
      return lq_from_moment(model_->data());
    } catch (const UnsupportedMeasureDependence& e) {
      throw ConfigError("model", std::string("no LQ oracle: ") + e.what());
    }
  }

  void oracle_task(Report& r) {
    const auto lq = oracle();
    const TimeGrid g(cfg_.t, model_->horizon(), cfg_.lq_K);
    const auto sol = lq_solve(lq, g, *mu_);
    r.results["V2_0"] = mat_json(sol.V2[0]);
    r.results["V1_0"] = vec_json(sol.V1[0]);
    r.results["V0_0"] = sol.V0[0];
    r.results["points"] = json::array();
    for (const auto& x : cfg_.x) {
      const auto p = lq_value_and_feedback(lq, sol, 0, x);
      r.results["points"].push_back(
          {{"x", vec_json(x)}, {"V", p.V}, {"DxV", vec_json(p.DxV)}, {"Dx2V", mat_json(p.D2xV)}, {"vhat", vec_json(p.vhat)}});
    }
    auto os = open(r, "lq_oracle.csv");
    const int n = lq.n;
    os << "node,t";
    for (int a = 0; a < n; ++a)
      for (int b = 0; b < n; ++b) os << ",V2_" << a << '_' << b;
    for (int a = 0; a < n; ++a) os << ",V1_" << a;
    os << ",V0";
    for (int a = 0; a < n; ++a) os << ",mean" << a;
    os << '\n';
    for (int k = 0; k <= g.K; ++k) {
      os << k << ',' << g.node(k);
      for (int a = 0; a < n; ++a)
        for (int b = 0; b < n; ++b) os << ',' << sol.V2[k](a, b);
      for (int a = 0; a < n; ++a) os << ',' << sol.V1[k](a);
      os << ',' << sol.V0[k];
      for (int a = 0; a < n; ++a) os << ',' << sol.mean[k](a);
      os << '\n';
    }
  }

  void compare_task(Report& r) {
    need_points(cfg_.x, "x");
    const auto lq = oracle();
    const auto sol = lq_solve(lq, TimeGrid(cfg_.t, model_->horizon(), cfg_.lq_K), *mu_);
    const ValuePipeline pipe(*model_, cfg_.t, *mu_, settings_);
    const double fl = cfg_.tol.relative_floor;
    r.results["mfg"] = flow_summary(pipe.mfg());
    r.results["points"] = json::array();
    for (std::size_t i = 0; i < cfg_.x.size(); ++i) {
      const auto& x = cfg_.x[i];
      const auto ref = lq_value_and_feedback(lq, sol, 0, x);
      const double V = pipe.value(x);
      const auto g = pipe.grad(x);
      const double eV = rel_error(V, ref.V, fl);
      const double eD = rel_error(Mat(g.DxV), Mat(ref.DxV), fl);
      const double eH = rel_error(g.Dx2V, ref.D2xV, fl);
      r.results["points"].push_back({{"x", vec_json(x)},
                                     {"V", V},
                                     {"V_oracle", ref.V},
                                     {"DxV", vec_json(g.DxV)},
                                     {"DxV_oracle", vec_json(ref.DxV)},
                                     {"Dx2V", mat_json(g.Dx2V)},
                                     {"Dx2V_oracle", mat_json(ref.D2xV)},
                                     {"rel_error_V", eV},
                                     {"rel_error_DxV", eD},
                                     {"rel_error_Dx2V", eH}});
      const auto tag = "[" + std::to_string(i) + "]";
      r.check("rel_error_V" + tag, eV, cfg_.tol.relative);
      r.check("rel_error_DxV" + tag, eD, cfg_.tol.relative);
      r.check("rel_error_Dx2V" + tag, eH, cfg_.tol.relative);
    }
  }
};

void write_json(const fs::path& p, const json& j) {
  std::ofstream os(p);
  os << j.dump(2) << '\n';
}

json provenance(const RunConfig& cfg) {
  const auto& P = cfg.value.params;
  return {{"t", cfg.t}, {"K", cfg.value.K}, {"N", P.N}, {"basis_degree", P.basis_degree}, {"seed", cfg.seed},
          {"lq_K", cfg.lq_K}};
}

void write_manifest(const RunConfig& cfg, std::vector<std::string> files) {
  files.insert(files.begin(), "summary.json");
  write_json(cfg.out / "manifest.json", {{"schema_version", kSchemaVersion},
                                          {"config_sha256", sha256_hex(cfg.config_text)},
                                          {"seed", cfg.seed},
                                          {"task", cfg.task},
                                          {"files", files}});
}

template <class E>
bool is(const std::exception& e) {
  return dynamic_cast<const E*>(&e) != nullptr;
}

}  // namespace

RunConfig parse_config(const json& j, const fs::path& base_dir) {
  only_keys(j, "", {"schema_version", "task", "seed", "model", "model_file", "mu", "t", "solver", "x", "probes",
                    "master", "dpp_eps", "decoupling_s", "assumptions", "tolerances", "output"});
  if (!j.contains("schema_version")) throw ConfigError("schema_version", "missing");
  if (!j["schema_version"].is_number_integer() || j["schema_version"].get<int>() != kSchemaVersion)
    throw ConfigError("schema_version", "unsupported, expected " + std::to_string(kSchemaVersion));

  RunConfig c;
  if (!j.contains("task") || !j["task"].is_string()) throw ConfigError("task", "missing or not a string");
  c.task = j["task"].get<std::string>();
  if (std::find(kTasks.begin(), kTasks.end(), c.task) == kTasks.end()) throw ConfigError("task", "unknown task " + c.task);
  if (!j.contains("seed")) throw ConfigError("seed", "missing");
  if (!j["seed"].is_number_integer() || (!j["seed"].is_number_unsigned() && j["seed"].get<long long>() < 0))
    throw ConfigError("seed", "expected a non-negative integer");
  c.seed = j["seed"].get<std::uint64_t>();

  if (j.contains("model") == j.contains("model_file")) throw ConfigError("model", "give exactly one of model, model_file");
  if (j.contains("model")) {
    c.model_json = j["model"];
  } else {
    if (!j["model_file"].is_string()) throw ConfigError("model_file", "expected a path");
    const auto path = base_dir / j["model_file"].get<std::string>();
    std::ifstream is(path);
    if (!is) throw ConfigError("model_file", "cannot open " + path.string());
    try {
      c.model_json = json::parse(is);
    } catch (const json::parse_error& e) {
      throw ConfigError("model_file", e.what());
    }
  }
  const auto model = model_from_json(c.model_json);
  const int n = model->n();

  if (!j.contains("mu")) throw ConfigError("mu", "missing");
  c.mu = points(j["mu"], "mu", n);
  c.t = get_double(j, "", "t", 0.0);
  if (!(c.t < model->horizon())) throw ConfigError("t", "must be below the horizon");

  if (j.contains("solver")) {
    const auto& s = j["solver"];
    only_keys(s, "solver", {"N", "K", "basis_degree", "theta", "max_sweeps", "sweep_tol", "max_flow_iter", "flow_tol",
                            "continuation_steps", "newton_tol", "newton_max_iter", "max_probes", "fd_step", "lq_K"});
    auto& P = c.value.params;
    P.N = get_int(s, "solver", "N", P.N, 2);
    c.value.K = get_int(s, "solver", "K", c.value.K, 1);
    P.basis_degree = get_int(s, "solver", "basis_degree", P.basis_degree, 1);
    P.theta = get_double(s, "solver", "theta", P.theta);
    if (!(P.theta > 0.0 && P.theta <= 1.0)) throw ConfigError("solver.theta", "must lie in (0, 1]");
    P.max_sweeps = get_int(s, "solver", "max_sweeps", P.max_sweeps, 1);
    P.sweep_tol = positive(get_double(s, "solver", "sweep_tol", P.sweep_tol), "solver.sweep_tol");
    P.max_flow_iter = get_int(s, "solver", "max_flow_iter", P.max_flow_iter, 1);
    P.flow_tol = positive(get_double(s, "solver", "flow_tol", P.flow_tol), "solver.flow_tol");
    P.continuation_steps = get_int(s, "solver", "continuation_steps", P.continuation_steps, 1);
    P.newton.tol = positive(get_double(s, "solver", "newton_tol", P.newton.tol), "solver.newton_tol");
    P.newton.max_iter = get_int(s, "solver", "newton_max_iter", P.newton.max_iter, 1);
    c.value.max_probes = get_int(s, "solver", "max_probes", c.value.max_probes, 1);
    c.value.fd_step = positive(get_double(s, "solver", "fd_step", c.value.fd_step), "solver.fd_step");
    c.lq_K = get_int(s, "solver", "lq_K", c.lq_K, 1);
  }
  c.value.params.seed = c.seed;

  if (j.contains("x")) c.x = as_vecs(points(j["x"], "x", n));
  if (j.contains("probes")) c.probes = as_vecs(points(j["probes"], "probes", n));

  if (j.contains("master")) {
    const auto& m = j["master"];
    only_keys(m, "master", {"count", "t_range", "x_range"});
    c.master_count = get_int(m, "master", "count", c.master_count, 1);
    std::tie(c.master_t_lo, c.master_t_hi) = range(m, "master", "t_range", {c.master_t_lo, c.master_t_hi});
    std::tie(c.master_x_lo, c.master_x_hi) = range(m, "master", "x_range", {c.master_x_lo, c.master_x_hi});
    if (c.master_t_lo < 0.0 || !(c.master_t_hi < model->horizon()))
      throw ConfigError("master.t_range", "must lie in [0, T)");
  }
  c.dpp_eps = get_double(j, "", "dpp_eps", c.dpp_eps);
  if (c.dpp_eps < 0.0) throw ConfigError("dpp_eps", "must be non-negative");
  if (j.contains("decoupling_s")) c.decoupling_s = point(j["decoupling_s"], "decoupling_s");

  if (j.contains("assumptions")) {
    const auto& a = j["assumptions"];
    only_keys(a, "assumptions", {"samples", "half_width"});
    c.assumption_samples = get_int(a, "assumptions", "samples", c.assumption_samples, 1);
    c.assumption_half_width =
        positive(get_double(a, "assumptions", "half_width", c.assumption_half_width), "assumptions.half_width");
  }
  if (j.contains("tolerances")) {
    const auto& t = j["tolerances"];
    only_keys(t, "tolerances", {"relative", "relative_floor", "optimality", "master", "dpp", "decoupling"});
    auto& T = c.tol;
    T.relative = positive(get_double(t, "tolerances", "relative", T.relative), "tolerances.relative");
    T.relative_floor = positive(get_double(t, "tolerances", "relative_floor", T.relative_floor), "tolerances.relative_floor");
    T.optimality = positive(get_double(t, "tolerances", "optimality", T.optimality), "tolerances.optimality");
    T.master = positive(get_double(t, "tolerances", "master", T.master), "tolerances.master");
    T.dpp = positive(get_double(t, "tolerances", "dpp", T.dpp), "tolerances.dpp");
    T.decoupling = positive(get_double(t, "tolerances", "decoupling", T.decoupling), "tolerances.decoupling");
  }
  if (j.contains("output")) {
    const auto& o = j["output"];
    only_keys(o, "output", {"dir", "max_particles"});
    if (o.contains("dir")) {
      if (!o["dir"].is_string()) throw ConfigError("output.dir", "expected a path");
      c.out = base_dir / o["dir"].get<std::string>();
    }
    c.max_particles = get_int(o, "output", "max_particles", c.max_particles, -1);
  }

  json canonical = j;
  canonical.erase("model_file");
  canonical["model"] = c.model_json;
  c.config_text = canonical.dump();
  return c;
}

RunConfig load_config(const fs::path& path) {
  std::ifstream is(path);
  if (!is) throw ConfigError("config", "cannot open " + path.string());
  json j;
  try {
    j = json::parse(is);
  } catch (const json::parse_error& e) {
    throw ConfigError("config", e.what());
  }
  return parse_config(j, path.parent_path());
}

int run(const RunConfig& cfg, std::ostream& err) {
  fs::create_directories(cfg.out);
  Report r;
  json summary = {{"schema_version", kSchemaVersion}, {"task", cfg.task}, {"seed", cfg.seed},
                  {"provenance", provenance(cfg)}};
  try {
    Runner runner(cfg);
    runner.execute(r);
  } catch (const ConfigError& e) {
    err << "config error: " << e.what() << '\n';
    return kConfigError;
  } catch (const Error& e) {
    const bool diverged = is<PicardDivergence>(e) || is<FlowDivergence>(e) || is<NewtonDivergence>(e) ||
                          is<BlowUp>(e) || is<SingularHessian>(e);
    if (!diverged) {
      err << "config error: " << e.what() << '\n';
      return kConfigError;
    }
    json diag = {{"error", e.what()}};
    if (const auto* f = dynamic_cast<const FlowDivergence*>(&e)) {
      diag["type"] = "FlowDivergence";
      diag["last_distance"] = f->last_distance;
      diag["previous_distance"] = f->previous_distance;
    } else if (is<PicardDivergence>(e)) {
      diag["type"] = "PicardDivergence";
    } else if (is<NewtonDivergence>(e)) {
      diag["type"] = "NewtonDivergence";
    } else if (is<BlowUp>(e)) {
      diag["type"] = "BlowUp";
    } else {
      diag["type"] = "SingularHessian";
    }
    write_json(cfg.out / "diagnostics.json", diag);
    summary["status"] = "diverged";
    summary["results"] = json::object();
    summary["checks"] = json::array();
    write_json(cfg.out / "summary.json", summary);
    write_manifest(cfg, {"diagnostics.json"});
    err << "solver divergence: " << e.what() << '\n';
    return kDivergence;
  }
  summary["status"] = r.failed ? "check_failed" : "ok";
  summary["results"] = r.results;
  summary["checks"] = r.checks;
  if (r.failed) summary["witness"] = r.witness;
  write_json(cfg.out / "summary.json", summary);
  write_manifest(cfg, r.files);
  if (r.failed) {
    err << "check failed: " << r.witness << '\n';
    return kCheckFailed;
  }
  return kOk;
}

int main_entry(int argc, char** argv) {
  CLI::App app{"Degenerate mean field game solver"};
  std::string config, out, task_flag, task_pos;
  std::optional<std::uint64_t> seed;
  app.add_option("subcommand", task_pos, "task to run (overrides the config)")
      ->check(CLI::IsMember(kTasks));
  app.add_option("--config", config, "run config (JSON)")->required();
  app.add_option("--out", out, "output directory");
  app.add_option("--seed", seed, "random seed");
  app.add_option("--task", task_flag, "task to run")->check(CLI::IsMember(kTasks));
  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? kOk : kConfigError;
  }
  try {
    std::ifstream is(config);
    if (!is) throw ConfigError("config", "cannot open " + config);
    json j;
    try {
      j = json::parse(is);
    } catch (const json::parse_error& e) {
      throw ConfigError("config", e.what());
    }
    if (seed) j["seed"] = *seed;
    if (!task_flag.empty()) j["task"] = task_flag;
    if (!task_pos.empty()) j["task"] = task_pos;
    auto cfg = parse_config(j, fs::path(config).parent_path());
    if (!out.empty()) cfg.out = out;
    return run(cfg, std::cerr);
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << '\n';
    return kConfigError;
  } catch (const Error& e) {
    std::cerr << "config error: " << e.what() << '\n';
    return kConfigError;
  }
}

}  // namespace mfg::cli
