#pragma once

#include "mfg/grid.hpp"
#include "mfg/measure.hpp"
#include "mfg/model.hpp"

#include <functional>
#include <vector>

namespace mfg {

/// Coefficients of the linear-quadratic problem at one time. The inhomogeneous parts
/// (b0, sigma0, f0, f1, f2) may depend on the mean of the measure in the mean-coupled case.
struct LQCoefficients {
  Mat b1, b2, F1, F2;
  std::vector<Mat> s1;
  Vec b0, f1, f2;
  std::vector<Vec> s0;
  double f0 = 0.0;
};

struct LQModel {
  int n = 1, d = 1;
  double T = 1.0;
  bool mean_coupled = false;
  std::function<LQCoefficients(double t, const Vec& mean)> coefficients;
  Mat G;
  std::function<Vec(const Vec& mean)> g1;
  std::function<double(const Vec& mean)> g0;
  double blowup_bound = 1e8;
};

/// LQ view of a built-in model of kind "lq" (or any MomentModel without second-moment,
/// quartic or x-v cross terms).
LQModel lq_from_moment(const MomentModelData& data);

/// V2 at the grid nodes by backward RK4 with symmetrization after each step.
std::vector<Mat> solve_riccati(const LQModel& lq, const TimeGrid& grid);

/// V1 for measure-independent inhomogeneities.
std::vector<Vec> solve_v1(const LQModel& lq, const TimeGrid& grid);

/// Moments of the equilibrium flow started from mu at grid.t0, together with V1 and V0
/// evaluated along it. V is then V0 + V1.x + x'V2x/2 at each node.
struct LQValue {
  TimeGrid grid;
  std::vector<Mat> V2;
  std::vector<Vec> V1;
  std::vector<double> V0;
  std::vector<Vec> mean;
  std::vector<Mat> cov;
};

LQValue lq_solve(const LQModel& lq, const TimeGrid& grid, const ParticleMeasure& mu);
LQValue lq_solve(const LQModel& lq, const TimeGrid& grid, const Vec& mean0, const Mat& cov0);

std::vector<double> solve_v0(const LQModel& lq, const TimeGrid& grid, const ParticleMeasure& mu);

struct LQPoint {
  double V = 0.0;
  Vec DxV;
  Mat D2xV;
  Vec vhat;
};

/// Value, gradient and feedback at grid node k.
LQPoint lq_value_and_feedback(const LQModel& lq, const LQValue& sol, int k, const Vec& x);

/// d/d(mean of mu) of V(t0, x, mu) by central differences of the exact oracle; for a
/// mean-coupled model this is D_y dV/dnu(t0, x, mu)(y), independent of y.
Vec lq_mean_sensitivity(const LQModel& lq, const TimeGrid& grid, const ParticleMeasure& mu, const Vec& x);

}  // namespace mfg
