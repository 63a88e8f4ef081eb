#pragma once

#include "mfg/model.hpp"

#include <vector>

namespace mfg {

/// Adjoint pair (p, q); column j of q pairs with diffusion column sigma^j.
struct Costate {
  Vec p;
  Mat q;
};

struct NewtonOptions {
  double tol = 1e-10;
  int max_iter = 50;
};

double lagrangian(const Coefficients& c, const RunningCost& rc, const Vec& x, const Vec& v, const Vec& p, const Mat& q);
double lagrangian(const Model& model, double s, const Vec& x, const MeasureFeatures& m, const Vec& v, const Costate& cs);

/// Gradient of the Lagrangian in v: b2' p + sum_j sigma2^j' q^j + D_v f.
Vec lagrangian_gradient_v(const Coefficients& c, const RunningCost& rc, const Vec& p, const Mat& q);

Vec minimize_v(const Model& model, const Coefficients& c, double s, const Vec& x, const MeasureFeatures& m, const Vec& p,
               const Mat& q, const NewtonOptions& opt = {});
Vec minimize_v(const Model& model, double s, const Vec& x, const MeasureFeatures& m, const Costate& cs,
               const NewtonOptions& opt = {});

double hamiltonian(const Model& model, double s, const Vec& x, const MeasureFeatures& m, const Costate& cs,
                   const NewtonOptions& opt = {});

double optimality_residual(const Model& model, double s, const Vec& x, const MeasureFeatures& m, const Vec& v,
                           const Costate& cs);

/// D_x H = b1' p + sum_j sigma1^j' q^j + D_x f, with f evaluated at the supplied v.
Vec hamiltonian_gradient_x(const Coefficients& c, const RunningCost& rc, const Vec& p, const Mat& q);

/// Sensitivities of v-hat from the first-order condition, each solved with D_v^2 f as
/// the system matrix. Rows index the control, columns the perturbed argument.
struct VhatDerivatives {
  Mat dx;                // d x n
  Mat dp;                // d x n
  std::vector<Mat> dq;   // n blocks of d x n
  Mat dmean;             // d x n
  Vec dm2;               // d
};

VhatDerivatives vhat_derivatives(const Coefficients& c, const RunningCost& rc_at_vhat);

}  // namespace mfg
