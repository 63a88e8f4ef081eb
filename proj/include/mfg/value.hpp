#pragma once

#include "mfg/flows.hpp"

#include <memory>
#include <optional>
#include <vector>

namespace mfg {

struct ValueSettings {
  int K = 50;                 // steps on [t, T]
  SolverParams params;
  int max_probes = 64;        // atoms used for integrals against mu
  double fd_step = 0.02;      // step of the time difference in master_residual
};

struct GradValue {
  Vec DxV;
  Mat Dx2V;            // symmetrized
  double asymmetry = 0.0;
};

struct LfdSample {
  Vec y;
  Vec D1;                      // D_y dV/dnu(t, x, mu)(y)
  std::optional<Mat> D2;       // D_y^2 dV/dnu, n = 1 only
};

/// Terms of the master equation at one point. residual uses a finite difference of V in t;
/// dt_formula is the closed expression -H - integral.
struct MasterTerms {
  double dt_fd = 0.0;
  double dt_formula = 0.0;
  double H = 0.0;
  double integral = 0.0;
  double residual = 0.0;
};

/// Solves the MFG from (t, mu) once and evaluates V and its derivatives at any x.
class ValuePipeline {
 public:
  ValuePipeline(const Model& model, double t, const ParticleMeasure& mu, const ValueSettings& settings);

  double t() const { return t_; }
  const MfgResult& mfg() const { return mfg_; }
  const ValueSettings& settings() const { return settings_; }

  double value(const Vec& x) const;
  GradValue grad(const Vec& x) const;
  LfdSample lfd(const Vec& x, const Vec& y, bool second_order) const;
  /// Integral term of the master equation at x; zero for measure-free models.
  double measure_integral(const Vec& x) const;
  /// Hamiltonian at (x, D_xV, D_x^2V sigma / 2). Throws MissingA4 when sigma2 != 0.
  double hamiltonian_term(const Vec& x, const GradValue& g) const;
  double dt_value(const Vec& x) const;

 private:
  const Model* model_;
  double t_;
  ParticleMeasure mu_;
  ValueSettings settings_;
  MfgResult mfg_;
  std::unique_ptr<Linearization> lin_mfg_;

  const Linearization& lin_mfg() const;
  std::vector<std::pair<Vec, double>> probe_atoms() const;
};

/// Cost derivative along a control solution for a derivative flow d with measure sources S,
/// integrated like expected_cost. Returns one entry per direction of d.
Eigen::RowVectorXd cost_derivative(const Model& model, const FbsdeSolution& base, const MeasureFlow& flow,
                                   const LinearFlow& d, const SourceStats& S);

double value(const Model& model, double t, const Vec& x, const ParticleMeasure& mu, const ValueSettings& s);
GradValue grad_value(const Model& model, double t, const Vec& x, const ParticleMeasure& mu, const ValueSettings& s);
std::vector<LfdSample> lfd_value(const Model& model, double t, const Vec& x, const ParticleMeasure& mu,
                                 const std::vector<Vec>& probes, bool second_order, const ValueSettings& s);
double dt_value(const Model& model, double t, const Vec& x, const ParticleMeasure& mu, const ValueSettings& s);
MasterTerms master_residual(const Model& model, double t, const Vec& x, const ParticleMeasure& mu,
                            const ValueSettings& s);
/// |V(t,x,mu) - E int_t^{t+eps} f - E V(t+eps, Y(t+eps), m(t+eps))|; eps must be a multiple of
/// the step.
double dpp_check(const Model& model, double t, const Vec& x, const ParticleMeasure& mu, double eps,
                 const ValueSettings& s);
/// HJB residual of v(s, x) = V(s, x, m(s)) along the equilibrium flow from (t, mu); s must lie
/// on the grid.
double decoupling_check(const Model& model, double t, const ParticleMeasure& mu, double s_time, const Vec& x,
                        const ValueSettings& s);

}  // namespace mfg
