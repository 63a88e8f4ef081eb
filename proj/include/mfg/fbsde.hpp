#pragma once

#include "mfg/grid.hpp"
#include "mfg/hamiltonian.hpp"
#include "mfg/measure.hpp"
#include "mfg/model.hpp"
#include "mfg/regression.hpp"

#include <cstdint>
#include <iosfwd>
#include <memory>
#include <string>
#include <vector>

namespace mfg {

struct SolverParams {
  int N = 10000;
  int basis_degree = 2;
  double theta = 0.5;          // flow damping
  int max_sweeps = 200;        // forward/backward sweeps per frozen-flow solve
  double sweep_tol = 1e-10;    // sup change of (Y, p) between sweeps
  int max_flow_iter = 100;
  double flow_tol = 1e-7;      // max_k W2 between successive flows
  int continuation_steps = 4;
  std::uint64_t seed = 1;
  NewtonOptions newton;
};

/// Brownian increments dB[k] (n x N) for one (seed, N, K). Particles 2i and 2i+1 carry
/// opposite increments; each pair draws from its own seed-derived stream.
class BrownianIncrements {
 public:
  BrownianIncrements(std::uint64_t seed, int N, int K, int n, double dt);
  const Eigen::MatrixXd& at(int k) const { return dB_[k]; }
  int steps() const { return static_cast<int>(dB_.size()); }
  int particles() const { return N_; }
  int dim() const { return n_; }
  double dt() const { return dt_; }

 private:
  std::vector<Eigen::MatrixXd> dB_;
  int N_, n_;
  double dt_;
};

/// Time-indexed particle clouds m_0..m_K with cached features.
struct MeasureFlow {
  TimeGrid grid;
  std::vector<Eigen::MatrixXd> clouds;  // n x N each
  std::vector<MeasureFeatures> feats;

  static MeasureFlow from_clouds(const TimeGrid& grid, std::vector<Eigen::MatrixXd> clouds);
  ParticleMeasure measure(int k) const { return ParticleMeasure(clouds[k]); }
  int dim() const { return static_cast<int>(clouds.front().rows()); }
};

/// Particle paths on a grid. q[k] stores the n x n costate column-major per particle:
/// row r + n*j holds q^j_r.
struct FbsdeSolution {
  TimeGrid grid;
  int n = 0, d = 0, N = 0;
  std::vector<Eigen::MatrixXd> Y, p, q, v;
  std::shared_ptr<const BrownianIncrements> dB;
  std::vector<Regressor> reg;              // basis on Y_k, k < K
  std::vector<Eigen::MatrixXd> law_p, law_q;  // feedback law coefficients, k < K
  int sweeps = 0;
  double last_change = 0.0;
  std::vector<double> sweep_trace;

  Vec Yat(int k, int i) const { return Y[k].col(i); }
  Vec pat(int k, int i) const { return p[k].col(i); }
  Vec vat(int k, int i) const { return v[k].col(i); }
  Mat qat(int k, int i) const { return Eigen::Map<const Eigen::MatrixXd>(q[k].col(i).data(), n, n); }
};

struct MfgResult {
  FbsdeSolution solution;
  MeasureFlow flow;
  int flow_iterations = 0;
  double flow_distance = 0.0;
  std::vector<double> distance_trace;
  bool continuation_used = false;
};

std::shared_ptr<const BrownianIncrements> brownian_for(const SolverParams& params, const TimeGrid& grid, int n);

/// Initial particle cloud for mu: atoms sorted lexicographically, particle i placed on
/// atom floor(i M / N). With M dividing N the empirical law is exactly mu, and antithetic
/// pairs share an atom whenever N / M is even.
Eigen::MatrixXd initial_cloud(const ParticleMeasure& mu, int N);

/// Standard FBSDE along a fixed flow, started from the given cloud.
FbsdeSolution solve_frozen(const Model& model, const MeasureFlow& flow, const Eigen::MatrixXd& Y0,
                           const SolverParams& params, std::shared_ptr<const BrownianIncrements> dB,
                           const FbsdeSolution* warm = nullptr);

MfgResult solve_mfg(const Model& model, double t, const ParticleMeasure& mu, const TimeGrid& grid,
                    const SolverParams& params);
MfgResult solve_mfg_cloud(const Model& model, const TimeGrid& grid, const Eigen::MatrixXd& Y0, const SolverParams& params);

FbsdeSolution solve_control(const Model& model, double t, const Vec& x, const MeasureFlow& flow, const TimeGrid& grid,
                            const SolverParams& params);

double bsde_residual(const Model& model, const FbsdeSolution& sol, const MeasureFlow& flow);

/// sup_k E[|dY_k|^2 + |dp_k|^2] / E|xi' - xi|^2 for two atom-by-atom coupled measures.
double stability_probe(const Model& model, double t, const ParticleMeasure& mu, const ParticleMeasure& mu2,
                       const TimeGrid& grid, const SolverParams& params);

/// Max over nodes and particles of the first-order condition residual.
double max_optimality_residual(const Model& model, const FbsdeSolution& sol, const MeasureFlow& flow);

/// Particle mean of sum_{k < k_end} p_k . sigma_k dB_k. It has mean zero and tracks the noise
/// of the realised cost, so it serves as a control variate.
double cost_martingale(const Model& model, const FbsdeSolution& sol, const MeasureFlow& flow, int k_end);

/// Expected cost: trapezoidal running cost plus terminal cost, averaged over particles, minus
/// cost_martingale over the whole horizon.
double expected_cost(const Model& model, const FbsdeSolution& sol, const MeasureFlow& flow);

/// CSV with columns flow_kind,node,particle,Y*,p*,q*,v*.
void write_solution_csv(std::ostream& os, const FbsdeSolution& sol, const std::string& kind = "base",
                        int max_particles = -1);

}  // namespace mfg
