#pragma once

#include "mfg/fbsde.hpp"

#include <iosfwd>
#include <optional>
#include <string>
#include <vector>

namespace mfg {

/// Derivative processes along a base solution, for ncol directions at once. Per node,
/// column i of Y (p) holds the n x ncol block of particle i, column-major. q holds, for
/// each direction c, the n x n costate block at rows c n^2 + r + n j. v holds d x ncol.
struct LinearFlow {
  std::string kind;
  TimeGrid grid;
  int n = 0, d = 0, N = 0, ncol = 0;
  std::vector<Eigen::MatrixXd> Y, p, q, v;

  Eigen::MatrixXd Yat(int k, int i) const { return Eigen::Map<const Eigen::MatrixXd>(Y[k].col(i).data(), n, ncol); }
  Eigen::MatrixXd pat(int k, int i) const { return Eigen::Map<const Eigen::MatrixXd>(p[k].col(i).data(), n, ncol); }
  Eigen::MatrixXd vat(int k, int i) const { return Eigen::Map<const Eigen::MatrixXd>(v[k].col(i).data(), d, ncol); }
  /// Particle averages of Y and p at node k (n x ncol).
  Eigen::MatrixXd meanY(int k) const;
  Eigen::MatrixXd meanP(int k) const;
  /// Largest absolute entry over all nodes of Y and p.
  double sup_norm() const;
};

/// this = a x + b y, entrywise, for flows on the same base and shape.
LinearFlow combine(double a, const LinearFlow& x, double b, const LinearFlow& y);

/// Global averages that carry every measure-derivative source term of the moment family:
/// per node and direction, mean = E[dY] (n x ncol) and cross = E[Y . dY] (1 x ncol).
struct SourceStats {
  std::vector<Eigen::MatrixXd> mean;
  std::vector<Eigen::RowVectorXd> cross;

  static SourceStats zeros(int K, int n, int ncol);
  SourceStats& operator+=(const SourceStats& o);
  double sup_norm() const;
};

SourceStats flow_stats(const std::vector<Eigen::MatrixXd>& Y, const LinearFlow& dY);
/// Second-order (1D) statistics: mean = E[D2], cross = E[Y D2] + E[D1^2].
SourceStats quadratic_stats(const std::vector<Eigen::MatrixXd>& Y, const LinearFlow& D1, const LinearFlow& D2);

/// Frozen first- and second-order data along a base solution plus the decoupling field
/// dp = A dY, dq^j = Q^j dY of the homogeneous linear system, computed once per base.
class Linearization {
 public:
  Linearization(const Model& model, const FbsdeSolution& base, const MeasureFlow& flow);

  const Model& model() const { return *model_; }
  const FbsdeSolution& base() const { return *base_; }
  const MeasureFlow& flow() const { return *flow_; }

  /// Homogeneous solve: initial value init ((n ncol) x N), no sources.
  LinearFlow propagate(const Eigen::MatrixXd& init, int ncol, const std::string& kind) const;

  /// Per-particle raw sources, used by second-order flows (ncol = 1).
  struct RawSources {
    std::vector<Eigen::MatrixXd> sf, sv;  // per node k <= K: n x N, d x N
    Eigen::MatrixXd sg;                   // n x N
  };

  /// Affine solve. Sources are the moment-family terms built from `ext` plus, when
  /// self_coupled, the statistics of the solution itself (found by fixed-point iteration).
  LinearFlow solve(const Eigen::MatrixXd& init, int ncol, const SourceStats& ext, bool self_coupled,
                   const std::string& kind, const RawSources* raw = nullptr,
                   const std::vector<Regressor>* regs = nullptr) const;

  int self_iterations() const { return last_self_iterations_; }

  // Layout of per-particle coefficients; public for the second-order flows.
  struct Offsets {
    int Vx, Vp, Vq, fxx, fxv, fxm, fxm2, dvm, dvm2, f3, rows;
  };
  const Offsets& offsets() const { return off_; }
  const Eigen::MatrixXd& coef(int k) const { return coef_[k]; }
  double gxxx(int i) const { return gxxx_(i); }

 private:
  const Model* model_;
  const FbsdeSolution* base_;
  const MeasureFlow* flow_;
  int n_, d_, N_, K_;
  double dt_;
  std::vector<Coefficients> nodes_;
  Offsets off_{};
  std::vector<Eigen::MatrixXd> coef_;       // per node: off_.rows x N
  Eigen::MatrixXd gxx_, gxm_, gxm2_;        // terminal: n*n, n*n, n rows
  Eigen::VectorXd gxxx_;
  std::vector<Eigen::MatrixXd> A_, Q_, G_;  // A: n*n (k <= K), Q: n*n*n, G: n*n (k < K)
  mutable int last_self_iterations_ = 0;

  LinearFlow affine(const Eigen::MatrixXd& init, int ncol, const SourceStats& S, const RawSources* raw,
                    const std::vector<Regressor>* regs, const std::string& kind) const;
};

/// D_x flow of the control problem (ncol = n, initial value I).
LinearFlow solve_jacobian_x(const Linearization& lin);

/// Gateaux derivative of the MFG solution along eta (n x N, one direction per particle).
LinearFlow solve_directional(const Linearization& lin_mfg, const Eigen::MatrixXd& eta);

struct Decomposition {
  LinearFlow jacobian_part;  // D_xY|_{x=xi} eta, propagated along the MFG paths
  LinearFlow measure_part;   // zero initial value
};
Decomposition decompose_directional(const Linearization& lin_mfg, const Eigen::MatrixXd& eta);

/// Control solution started at a probe point z together with its x-derivatives.
struct ProbeData {
  Vec z;
  FbsdeSolution control;
  LinearFlow jac;
  std::optional<LinearFlow> hess;
};
ProbeData probe_data(const Model& model, const MeasureFlow& flow, const Vec& z, const SolverParams& params,
                     bool second_order);

/// Kernels of the linear functional derivative at z: `xi` along the MFG paths, `mu` along
/// the control paths of lin_ctrl (ncol = n). With second_order (n = d = 1) also their
/// z-derivatives.
struct LfdKernel {
  Vec z;
  LinearFlow xi, mu;
  std::optional<LinearFlow> xi_z, mu_z;
  SourceStats mu_sources;  // measure terms driving mu (and mu_z)
  std::optional<SourceStats> mu_z_sources;
};
LfdKernel solve_lfd_kernel(const Linearization& lin_mfg, const Linearization& lin_ctrl, const ProbeData& probe,
                           bool second_order = false);

/// Restriction of a flow to nodes k..K.
MeasureFlow tail(const MeasureFlow& flow, int k);

/// Second-order x-derivatives of the control solution (n = d = 1).
LinearFlow solve_hessian_x(const Linearization& lin, const LinearFlow& jac);

/// Same schema as the solution CSV; flow_kind holds the flow name and direction index.
void write_flow_csv(std::ostream& os, const LinearFlow& flow, int max_particles = -1);

}  // namespace mfg
