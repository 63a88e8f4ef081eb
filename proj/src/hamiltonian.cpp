#include "mfg/hamiltonian.hpp"

#include <cmath>
#include <sstream>

namespace mfg {

double lagrangian(const Coefficients& c, const RunningCost& rc, const Vec& x, const Vec& v, const Vec& p, const Mat& q) {
  double out = p.dot(c.drift(x, v)) + rc.f;
  for (int j = 0; j < static_cast<int>(c.s0.size()); ++j) out += q.col(j).dot(c.diffusion(j, x, v));
  return out;
}

double lagrangian(const Model& model, double s, const Vec& x, const MeasureFeatures& m, const Vec& v, const Costate& cs) {
  const auto c = model.coefficients(s, m);
  return lagrangian(c, model.running(s, x, m, v), x, v, cs.p, cs.q);
}

Vec lagrangian_gradient_v(const Coefficients& c, const RunningCost& rc, const Vec& p, const Mat& q) {
  Vec g = c.b2.transpose() * p + rc.fv;
  for (int j = 0; j < static_cast<int>(c.s2.size()); ++j) g.noalias() += c.s2[j].transpose() * q.col(j);
  return g;
}

Vec hamiltonian_gradient_x(const Coefficients& c, const RunningCost& rc, const Vec& p, const Mat& q) {
  Vec g = c.b1.transpose() * p + rc.fx;
  for (int j = 0; j < static_cast<int>(c.s1.size()); ++j) g.noalias() += c.s1[j].transpose() * q.col(j);
  return g;
}

namespace {

[[noreturn]] void singular(const Mat& h) {
  std::ostringstream os;
  os << "D_v^2 f is numerically singular: " << h;
  throw SingularHessian(os.str());
}

Vec newton_step(const Mat& h, const Vec& grad) {
  Eigen::LLT<Mat> llt(h);
  if (llt.info() == Eigen::Success) return -llt.solve(grad);
  Eigen::SelfAdjointEigenSolver<Mat> es(h);
  const double scale = es.eigenvalues().cwiseAbs().maxCoeff();
  if (!(scale > 0.0) || es.eigenvalues().cwiseAbs().minCoeff() <= 1e-14 * scale) singular(h);
  return Vec();  // indefinite: caller falls back to steepest descent
}

}  // namespace

Vec minimize_v(const Model& model, const Coefficients& c, double s, const Vec& x, const MeasureFeatures& m, const Vec& p,
               const Mat& q, const NewtonOptions& opt) {
  const int d = model.d();
  Vec v = Vec::Zero(d);
  RunningCost rc = model.running(s, x, m, v);
  Vec grad = lagrangian_gradient_v(c, rc, p, q);
  if (rc.fvv.isZero(0.0) && grad.norm() <= opt.tol) {
    // L does not depend on v at all: every v is a minimizer, take v = 0.
    return v;
  }
  if (model.quadratic_in_v()) {
    Vec step = newton_step(rc.fvv, grad);
    if (step.size() == 0) throw NewtonDivergence("minimize_v: D_v^2 f is not positive definite");
    return step;
  }
  double lval = lagrangian(c, rc, x, v, p, q);
  for (int it = 0; it < opt.max_iter; ++it) {
    if (grad.norm() <= opt.tol) return v;
    Vec step = newton_step(rc.fvv, grad);
    if (step.size() == 0 || step.dot(grad) >= 0.0) step = -grad;
    double alpha = 1.0;
    bool accepted = false;
    if (grad.norm() < 1e-6) {
      // Near the minimizer the Armijo test is dominated by rounding; take the full step
      // when it shrinks the gradient.
      Vec trial = v + step;
      RunningCost rt = model.running(s, x, m, trial);
      if (lagrangian_gradient_v(c, rt, p, q).norm() < grad.norm()) {
        v = trial;
        rc = rt;
        lval = lagrangian(c, rt, x, trial, p, q);
        accepted = true;
      }
    }
    for (int ls = 0; ls < 40 && !accepted; ++ls) {
      Vec trial = v + alpha * step;
      RunningCost rt = model.running(s, x, m, trial);
      const double lt = lagrangian(c, rt, x, trial, p, q);
      if (lt <= lval + 1e-4 * alpha * grad.dot(step)) {
        v = trial;
        rc = rt;
        lval = lt;
        accepted = true;
        break;
      }
      alpha *= 0.5;
    }
    grad = lagrangian_gradient_v(c, rc, p, q);
    if (!accepted && grad.norm() > opt.tol) break;
  }
  if (grad.norm() <= opt.tol) return v;
  std::ostringstream os;
  os << "minimize_v: no convergence after " << opt.max_iter << " iterations, |grad| = " << grad.norm();
  throw NewtonDivergence(os.str());
}

Vec minimize_v(const Model& model, double s, const Vec& x, const MeasureFeatures& m, const Costate& cs,
               const NewtonOptions& opt) {
  return minimize_v(model, model.coefficients(s, m), s, x, m, cs.p, cs.q, opt);
}

double hamiltonian(const Model& model, double s, const Vec& x, const MeasureFeatures& m, const Costate& cs,
                   const NewtonOptions& opt) {
  const auto c = model.coefficients(s, m);
  const Vec v = minimize_v(model, c, s, x, m, cs.p, cs.q, opt);
  return lagrangian(c, model.running(s, x, m, v), x, v, cs.p, cs.q);
}

double optimality_residual(const Model& model, double s, const Vec& x, const MeasureFeatures& m, const Vec& v,
                           const Costate& cs) {
  const auto c = model.coefficients(s, m);
  return lagrangian_gradient_v(c, model.running(s, x, m, v), cs.p, cs.q).norm();
}

VhatDerivatives vhat_derivatives(const Coefficients& c, const RunningCost& rc) {
  Eigen::LDLT<Mat> ldlt(rc.fvv);
  if (ldlt.info() != Eigen::Success || !ldlt.isPositive()) singular(rc.fvv);
  VhatDerivatives out;
  out.dx = -ldlt.solve(Mat(rc.fxv.transpose()));
  out.dp = -ldlt.solve(Mat(c.b2.transpose()));
  out.dq.reserve(c.s2.size());
  for (const auto& s2 : c.s2) out.dq.push_back(-ldlt.solve(Mat(s2.transpose())));
  out.dmean = -ldlt.solve(rc.fv_mean);
  out.dm2 = -ldlt.solve(rc.fv_m2);
  return out;
}

}  // namespace mfg
