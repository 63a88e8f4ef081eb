#include "mfg/lq.hpp"

#include <cmath>
#include <sstream>

namespace mfg {

LQModel lq_from_moment(const MomentModelData& D) {
  bool s0q = false;
  for (const auto& v : D.s0q) s0q = s0q || !v.isZero(0.0);
  if (!D.b0q.isZero(0.0) || s0q || D.kf != 0.0 || D.kxm2 != 0.0 || D.kg != 0.0 || D.eps_x != 0.0 || D.eps_v != 0.0 ||
      D.eps_g != 0.0 || !D.Fxv.isZero(0.0))
    throw UnsupportedMeasureDependence("LQ oracle needs a model without second-moment, quartic or x-v cross terms");
  LQModel lq;
  lq.n = D.n;
  lq.d = D.d;
  lq.T = D.T;
  bool sm = false;
  for (const auto& m : D.S0m) sm = sm || !m.isZero(0.0);
  lq.mean_coupled = !D.B0m.isZero(0.0) || sm || !D.fm.isZero(0.0) || !D.Cx.isZero(0.0) || !D.Cv.isZero(0.0) ||
                    !D.gm.isZero(0.0) || !D.Gm.isZero(0.0);
  lq.coefficients = [D](double, const Vec& mean) {
    LQCoefficients c;
    c.b1 = D.b1;
    c.b2 = D.b2;
    c.F1 = D.F1;
    c.F2 = D.F2;
    c.s1 = D.S1;
    c.b0 = D.b0c + D.B0m * mean;
    c.s0.resize(D.n);
    for (int j = 0; j < D.n; ++j) c.s0[j] = D.s0c[j] + D.S0m[j] * mean;
    c.f0 = D.f0 + D.fm.dot(mean);
    c.f1 = D.f1 + D.Cx * mean;
    c.f2 = D.f2 + D.Cv * mean;
    return c;
  };
  lq.G = D.G;
  lq.g1 = [D](const Vec& mean) -> Vec { return D.g1 + D.Gm * mean; };
  lq.g0 = [D](const Vec& mean) { return D.g0 + D.gm.dot(mean); };
  return lq;
}

namespace {

Mat riccati_rate(const LQCoefficients& c, const Mat& V) {
  // dV/d(tau) with tau = T - t
  Mat r = V * c.b1 + c.b1.transpose() * V + c.F1 - V * c.b2 * c.F2.ldlt().solve(Mat(c.b2.transpose())) * V;
  for (const auto& s1 : c.s1) r += s1.transpose() * V * s1;
  return r;
}

void check_bound(const Mat& V, double bound, double t) {
  if (!V.allFinite() || V.cwiseAbs().maxCoeff() > bound) {
    std::ostringstream os;
    os << "Riccati solution exceeds " << bound << " at t = " << t;
    throw BlowUp(os.str());
  }
}

/// V2 at t0 + i (T - t0)/steps, i = 0..steps.
std::vector<Mat> riccati_path(const LQModel& lq, double t0, int steps) {
  const Vec zero = Vec::Zero(lq.n);
  const double h = (lq.T - t0) / steps;
  std::vector<Mat> out(steps + 1);
  Mat V = 0.5 * (lq.G + lq.G.transpose());
  out[steps] = V;
  for (int i = steps; i > 0; --i) {
    const double t = t0 + i * h;
    const auto c0 = lq.coefficients(t, zero);
    const auto cm = lq.coefficients(t - 0.5 * h, zero);
    const auto c1 = lq.coefficients(t - h, zero);
    const Mat k1 = riccati_rate(c0, V);
    const Mat k2 = riccati_rate(cm, V + 0.5 * h * k1);
    const Mat k3 = riccati_rate(cm, V + 0.5 * h * k2);
    const Mat k4 = riccati_rate(c1, V + h * k3);
    V += h / 6.0 * (k1 + 2 * k2 + 2 * k3 + k4);
    V = 0.5 * (V + V.transpose()).eval();
    check_bound(V, lq.blowup_bound, t - h);
    out[i - 1] = V;
  }
  return out;
}

struct Packing {
  int n;
  int size() const { return 2 * n + n * n + 1; }
};

/// Forward rates of (mean, V1, cov, W) along the equilibrium flow, W being the running
/// integral of the V0 source.
Eigen::VectorXd flow_rate(const LQModel& lq, double t, const Mat& V2, const Eigen::VectorXd& z) {
  const int n = lq.n;
  const Vec m = z.segment(0, n);
  const Vec V1 = z.segment(n, n);
  const Mat P = Eigen::Map<const Eigen::MatrixXd>(z.data() + 2 * n, n, n);
  const auto c = lq.coefficients(t, m);
  const auto F2 = c.F2.ldlt();
  const Mat K = F2.solve(Mat(c.b2.transpose()));  // F2^{-1} b2'
  const Mat Acl = c.b1 - c.b2 * K * V2;
  const Vec a = c.b2.transpose() * V1 + c.f2;
  const Vec Fa = F2.solve(a);
  Eigen::VectorXd r(z.size());
  r.segment(0, n) = Acl * m + c.b0 - c.b2 * Fa;
  Vec dV1 = Acl.transpose() * V1 + V2 * c.b0 - V2 * c.b2 * F2.solve(c.f2) + c.f1;
  Mat dP = Acl * P + P * Acl.transpose();
  double w = c.f0 - c.f2.dot(Fa) + 0.5 * a.dot(Fa) + V1.dot(c.b0 - c.b2 * Fa);
  for (int j = 0; j < n; ++j) {
    dV1 += c.s1[j].transpose() * V2 * c.s0[j];
    const Vec s = c.s0[j] + c.s1[j] * m;
    dP += s * s.transpose() + c.s1[j] * P * c.s1[j].transpose();
    w += 0.5 * c.s0[j].dot(V2 * c.s0[j]);
  }
  r.segment(n, n) = -dV1;
  Eigen::Map<Eigen::MatrixXd>(r.data() + 2 * n, n, n) = dP;
  r(r.size() - 1) = w;
  return r;
}

std::vector<Eigen::VectorXd> integrate_flow(const LQModel& lq, const TimeGrid& grid, const std::vector<Mat>& V2fine,
                                            const Eigen::VectorXd& z0) {
  const double h = grid.dt();
  std::vector<Eigen::VectorXd> path(grid.K + 1);
  path[0] = z0;
  Eigen::VectorXd z = z0;
  for (int k = 0; k < grid.K; ++k) {
    const double t = grid.node(k);
    const auto k1 = flow_rate(lq, t, V2fine[2 * k], z);
    const auto k2 = flow_rate(lq, t + 0.5 * h, V2fine[2 * k + 1], z + 0.5 * h * k1);
    const auto k3 = flow_rate(lq, t + 0.5 * h, V2fine[2 * k + 1], z + 0.5 * h * k2);
    const auto k4 = flow_rate(lq, t + h, V2fine[2 * k + 2], z + h * k3);
    z += h / 6.0 * (k1 + 2 * k2 + 2 * k3 + k4);
    path[k + 1] = z;
  }
  return path;
}

}  // namespace

std::vector<Mat> solve_riccati(const LQModel& lq, const TimeGrid& grid) {
  if (std::abs(grid.T - lq.T) > 1e-12) throw Error("solve_riccati: grid must end at the model horizon");
  return riccati_path(lq, grid.t0, grid.K);
}

std::vector<Vec> solve_v1(const LQModel& lq, const TimeGrid& grid) {
  if (lq.mean_coupled) throw UnsupportedMeasureDependence("solve_v1 needs measure-independent coefficients");
  const auto V2 = riccati_path(lq, grid.t0, 2 * grid.K);
  const Vec zero = Vec::Zero(lq.n);
  auto rate = [&](double t, const Mat& V2t, const Vec& V1) -> Vec {
    const auto c = lq.coefficients(t, zero);
    const auto F2 = c.F2.ldlt();
    const Mat Acl = c.b1 - c.b2 * F2.solve(Mat(c.b2.transpose())) * V2t;
    Vec r = Acl.transpose() * V1 + V2t * c.b0 - V2t * c.b2 * F2.solve(c.f2) + c.f1;
    for (int j = 0; j < lq.n; ++j) r += c.s1[j].transpose() * V2t * c.s0[j];
    return r;  // -dV1/dt
  };
  const double h = grid.dt();
  std::vector<Vec> out(grid.K + 1);
  Vec V1 = lq.g1(zero);
  out[grid.K] = V1;
  for (int k = grid.K; k > 0; --k) {
    const double t = grid.node(k);
    const Vec k1 = rate(t, V2[2 * k], V1);
    const Vec k2 = rate(t - 0.5 * h, V2[2 * k - 1], V1 + 0.5 * h * k1);
    const Vec k3 = rate(t - 0.5 * h, V2[2 * k - 1], V1 + 0.5 * h * k2);
    const Vec k4 = rate(t - h, V2[2 * k - 2], V1 + h * k3);
    V1 += h / 6.0 * (k1 + 2 * k2 + 2 * k3 + k4);
    out[k - 1] = V1;
  }
  return out;
}

LQValue lq_solve(const LQModel& lq, const TimeGrid& grid, const Vec& mean0, const Mat& cov0) {
  if (std::abs(grid.T - lq.T) > 1e-12) throw Error("lq_solve: grid must end at the model horizon");
  const int n = lq.n;
  const auto V2fine = riccati_path(lq, grid.t0, 2 * grid.K);
  const Packing pk{n};
  auto start = [&](const Vec& V1_0) {
    Eigen::VectorXd z = Eigen::VectorXd::Zero(pk.size());
    z.segment(0, n) = mean0;
    z.segment(n, n) = V1_0;
    Eigen::Map<Eigen::MatrixXd>(z.data() + 2 * n, n, n) = cov0;
    return z;
  };
  // (mean, V1) solve a linear two-point problem; shoot on V1(t0).
  auto residual = [&](const Vec& V1_0) -> Vec {
    const auto path = integrate_flow(lq, grid, V2fine, start(V1_0));
    const Eigen::VectorXd& zT = path.back();
    return zT.segment(n, n) - lq.g1(zT.segment(0, n));
  };
  const Vec r0 = residual(Vec::Zero(n));
  Eigen::MatrixXd R(n, n);
  for (int k = 0; k < n; ++k) R.col(k) = residual(Vec::Unit(n, k)) - r0;
  const Vec V1_0 = R.fullPivLu().solve(-Eigen::VectorXd(r0));
  const auto path = integrate_flow(lq, grid, V2fine, start(V1_0));

  LQValue out;
  out.grid = grid;
  const double WT = path.back()(pk.size() - 1);
  const double gT = lq.g0(path.back().segment(0, n));
  for (int k = 0; k <= grid.K; ++k) {
    const auto& z = path[k];
    out.V2.push_back(V2fine[2 * k]);
    out.mean.push_back(z.segment(0, n));
    out.V1.push_back(z.segment(n, n));
    out.cov.push_back(Eigen::Map<const Eigen::MatrixXd>(z.data() + 2 * n, n, n));
    out.V0.push_back(gT + WT - z(pk.size() - 1));
  }
  return out;
}

LQValue lq_solve(const LQModel& lq, const TimeGrid& grid, const ParticleMeasure& mu) {
  if (mu.dim() != lq.n) throw DimensionError("lq_solve: measure dimension mismatch");
  const Eigen::VectorXd mean = moment(mu, 1);
  const Eigen::MatrixXd cov = moment(mu, 2) - mean * mean.transpose();
  return lq_solve(lq, grid, Vec(mean), Mat(cov));
}

std::vector<double> solve_v0(const LQModel& lq, const TimeGrid& grid, const ParticleMeasure& mu) {
  return lq_solve(lq, grid, mu).V0;
}

LQPoint lq_value_and_feedback(const LQModel& lq, const LQValue& sol, int k, const Vec& x) {
  LQPoint p;
  const Mat& V2 = sol.V2[k];
  p.V = sol.V0[k] + sol.V1[k].dot(x) + 0.5 * x.dot(V2 * x);
  p.DxV = sol.V1[k] + V2 * x;
  p.D2xV = V2;
  const auto c = lq.coefficients(sol.grid.node(k), sol.mean[k]);
  p.vhat = -c.F2.ldlt().solve(Vec(c.b2.transpose() * p.DxV + c.f2));
  return p;
}

Vec lq_mean_sensitivity(const LQModel& lq, const TimeGrid& grid, const ParticleMeasure& mu, const Vec& x) {
  const Eigen::VectorXd mean = moment(mu, 1);
  const Mat cov = moment(mu, 2) - mean * mean.transpose();
  const double h = 1e-4;
  Vec out(lq.n);
  for (int a = 0; a < lq.n; ++a) {
    Vec mp = mean, mm = mean;
    mp(a) += h;
    mm(a) -= h;
    const double vp = lq_value_and_feedback(lq, lq_solve(lq, grid, mp, cov), 0, x).V;
    const double vm = lq_value_and_feedback(lq, lq_solve(lq, grid, mm, cov), 0, x).V;
    out(a) = (vp - vm) / (2 * h);
  }
  return out;
}

}  // namespace mfg
