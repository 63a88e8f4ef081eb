#include "mfg/model.hpp"

#include "mfg/hamiltonian.hpp"

#include <cmath>
#include <functional>
#include <limits>
#include <sstream>

namespace mfg {

bool Coefficients::sigma2_zero() const {
  for (const auto& m : s2)
    if (!m.isZero(0.0)) return false;
  return true;
}

MomentModelData MomentModelData::zeros(int n, int d, double T) {
  MomentModelData z;
  z.n = n;
  z.d = d;
  z.T = T;
  z.b0c = Vec::Zero(n);
  z.b0q = Vec::Zero(n);
  z.B0m = Mat::Zero(n, n);
  z.b1 = Mat::Zero(n, n);
  z.b2 = Mat::Zero(n, d);
  z.s0c.assign(n, Vec::Zero(n));
  z.s0q.assign(n, Vec::Zero(n));
  z.S0m.assign(n, Mat::Zero(n, n));
  z.S1.assign(n, Mat::Zero(n, n));
  z.S2.assign(n, Mat::Zero(n, d));
  z.f1 = Vec::Zero(n);
  z.f2 = Vec::Zero(d);
  z.fm = Vec::Zero(n);
  z.F1 = Mat::Zero(n, n);
  z.F2 = Mat::Zero(d, d);
  z.Fxv = Mat::Zero(n, d);
  z.Cx = Mat::Zero(n, n);
  z.Cv = Mat::Zero(d, n);
  z.g1 = Vec::Zero(n);
  z.gm = Vec::Zero(n);
  z.G = Mat::Zero(n, n);
  z.Gm = Mat::Zero(n, n);
  return z;
}

namespace {

void check_shape(const Mat& m, int r, int c, const char* name) {
  if (m.rows() != r || m.cols() != c) {
    std::ostringstream os;
    os << name << " must be " << r << "x" << c << ", got " << m.rows() << "x" << m.cols();
    throw DimensionError(os.str());
  }
}
void check_shape(const Vec& v, int r, const char* name) {
  if (v.size() != r) {
    std::ostringstream os;
    os << name << " must have length " << r << ", got " << v.size();
    throw DimensionError(os.str());
  }
}

}  // namespace

MomentModel::MomentModel(MomentModelData data) : data_(std::move(data)) {
  const int n = data_.n, d = data_.d;
  if (n < 1 || d < 1 || n > kMaxDim || d > kMaxDim) throw DimensionError("model dimensions must lie in [1, kMaxDim]");
  if (!(data_.T > 0.0)) throw DimensionError("horizon T must be positive");
  check_shape(data_.b0c, n, "b0");
  check_shape(data_.b0q, n, "b0_m2");
  check_shape(data_.B0m, n, n, "b0_mean");
  check_shape(data_.b1, n, n, "b1");
  check_shape(data_.b2, n, d, "b2");
  if (static_cast<int>(data_.s0c.size()) != n || static_cast<int>(data_.s0q.size()) != n ||
      static_cast<int>(data_.S0m.size()) != n || static_cast<int>(data_.S1.size()) != n ||
      static_cast<int>(data_.S2.size()) != n)
    throw DimensionError("diffusion must have n columns");
  for (int j = 0; j < n; ++j) {
    check_shape(data_.s0c[j], n, "sigma0");
    check_shape(data_.s0q[j], n, "sigma0_m2");
    check_shape(data_.S0m[j], n, n, "sigma0_mean");
    check_shape(data_.S1[j], n, n, "sigma1");
    check_shape(data_.S2[j], n, d, "sigma2");
  }
  check_shape(data_.f1, n, "f1");
  check_shape(data_.f2, d, "f2");
  check_shape(data_.fm, n, "fm");
  check_shape(data_.F1, n, n, "F1");
  check_shape(data_.F2, d, d, "F2");
  check_shape(data_.Fxv, n, d, "Fxv");
  check_shape(data_.Cx, n, n, "Cx");
  check_shape(data_.Cv, d, n, "Cv");
  check_shape(data_.g1, n, "g1");
  check_shape(data_.gm, n, "gm");
  check_shape(data_.G, n, n, "G");
  check_shape(data_.Gm, n, n, "Gm");
}

Coefficients MomentModel::coefficients(double, const MeasureFeatures& m) const {
  const auto& D = data_;
  Coefficients c;
  c.b0 = D.b0c + D.B0m * m.mean + D.b0q * m.m2;
  c.b1 = D.b1;
  c.b2 = D.b2;
  c.b0_mean = D.B0m;
  c.b0_m2 = D.b0q;
  c.s0.resize(D.n);
  for (int j = 0; j < D.n; ++j) c.s0[j] = D.s0c[j] + D.S0m[j] * m.mean + D.s0q[j] * m.m2;
  c.s1 = D.S1;
  c.s2 = D.S2;
  c.s0_mean = D.S0m;
  c.s0_m2 = D.s0q;
  return c;
}

RunningCost MomentModel::running(double, const Vec& x, const MeasureFeatures& m, const Vec& v) const {
  const auto& D = data_;
  RunningCost r;
  const Vec x2 = x.cwiseAbs2();
  const Vec v2 = v.cwiseAbs2();
  r.f = D.f0 + D.f1.dot(x) + D.f2.dot(v) + 0.5 * x.dot(D.F1 * x) + 0.5 * v.dot(D.F2 * v) + x.dot(D.Fxv * v) +
        x.dot(D.Cx * m.mean) + v.dot(D.Cv * m.mean) + D.fm.dot(m.mean) + D.kf * m.m2 + 0.5 * D.kxm2 * m.m2 * x.squaredNorm() +
        D.eps_x * x2.squaredNorm() + D.eps_v * v2.squaredNorm();
  r.fx = D.f1 + D.F1 * x + D.Fxv * v + D.Cx * m.mean + D.kxm2 * m.m2 * x + 4.0 * D.eps_x * x.cwiseProduct(x2);
  r.fv = D.f2 + D.F2 * v + D.Fxv.transpose() * x + D.Cv * m.mean + 4.0 * D.eps_v * v.cwiseProduct(v2);
  r.fxx = D.F1 + D.kxm2 * m.m2 * Mat::Identity(D.n, D.n);
  r.fxx.diagonal() += 12.0 * D.eps_x * x2;
  r.fxv = D.Fxv;
  r.fvv = D.F2;
  r.fvv.diagonal() += 12.0 * D.eps_v * v2;
  r.f_mean = D.Cx.transpose() * x + D.Cv.transpose() * v + D.fm;
  r.f_m2 = D.kf + 0.5 * D.kxm2 * x.squaredNorm();
  r.fx_mean = D.Cx;
  r.fx_m2 = D.kxm2 * x;
  r.fv_mean = D.Cv;
  r.fv_m2 = Vec::Zero(D.d);
  if (D.n == 1 && D.d == 1) {
    r.fxxx = 24.0 * D.eps_x * x(0);
    r.fvvv = 24.0 * D.eps_v * v(0);
  }
  return r;
}

TerminalCost MomentModel::terminal(const Vec& x, const MeasureFeatures& m) const {
  const auto& D = data_;
  TerminalCost t;
  const Vec x2 = x.cwiseAbs2();
  t.g = D.g0 + D.g1.dot(x) + 0.5 * x.dot(D.G * x) + x.dot(D.Gm * m.mean) + D.gm.dot(m.mean) + D.kg * m.m2 +
        D.eps_g * x2.squaredNorm();
  t.gx = D.g1 + D.G * x + D.Gm * m.mean + 4.0 * D.eps_g * x.cwiseProduct(x2);
  t.gxx = D.G;
  t.gxx.diagonal() += 12.0 * D.eps_g * x2;
  t.g_mean = D.Gm.transpose() * x + D.gm;
  t.g_m2 = D.kg;
  t.gx_mean = D.Gm;
  t.gx_m2 = Vec::Zero(D.n);
  if (D.n == 1) t.gxxx = 24.0 * D.eps_g * x(0);
  return t;
}

bool MomentModel::dynamics_coupled() const {
  const auto& D = data_;
  bool any = !D.B0m.isZero(0.0) || !D.b0q.isZero(0.0) || !D.Cx.isZero(0.0) || !D.Cv.isZero(0.0) ||
             !D.Gm.isZero(0.0) || D.kxm2 != 0.0;
  for (int j = 0; j < D.n; ++j) any = any || !D.S0m[j].isZero(0.0) || !D.s0q[j].isZero(0.0);
  return any;
}

bool MomentModel::measure_free() const {
  const auto& D = data_;
  return !dynamics_coupled() && D.fm.isZero(0.0) && D.gm.isZero(0.0) && D.kf == 0.0 && D.kg == 0.0;
}

// ---- continuation wrapper ---------------------------------------------------

MeasureFeatures ScaledCouplingModel::scaled(const MeasureFeatures& m) const {
  return MeasureFeatures{lambda_ * m.mean, lambda_ * m.m2};
}

Coefficients ScaledCouplingModel::coefficients(double s, const MeasureFeatures& m) const {
  Coefficients c = base_->coefficients(s, scaled(m));
  c.b0_mean *= lambda_;
  c.b0_m2 *= lambda_;
  for (auto& a : c.s0_mean) a *= lambda_;
  for (auto& a : c.s0_m2) a *= lambda_;
  return c;
}

RunningCost ScaledCouplingModel::running(double s, const Vec& x, const MeasureFeatures& m, const Vec& v) const {
  RunningCost r = base_->running(s, x, scaled(m), v);
  r.f_mean *= lambda_;
  r.f_m2 *= lambda_;
  r.fx_mean *= lambda_;
  r.fx_m2 *= lambda_;
  r.fv_mean *= lambda_;
  r.fv_m2 *= lambda_;
  return r;
}

TerminalCost ScaledCouplingModel::terminal(const Vec& x, const MeasureFeatures& m) const {
  TerminalCost t = base_->terminal(x, scaled(m));
  t.g_mean *= lambda_;
  t.g_m2 *= lambda_;
  t.gx_mean *= lambda_;
  t.gx_m2 *= lambda_;
  return t;
}

// ---- validators -------------------------------------------------------------

namespace {

struct Sampler {
  std::mt19937_64& rng;
  SamplingBox box;
  double uniform(double lo, double hi) { return std::uniform_real_distribution<double>(lo, hi)(rng); }
  Vec vec(int n) {
    Vec v(n);
    for (int i = 0; i < n; ++i) v(i) = uniform(-box.half_width, box.half_width);
    return v;
  }
  Eigen::MatrixXd cloud(int n) {
    Eigen::MatrixXd c(n, box.cloud_size);
    for (int i = 0; i < box.cloud_size; ++i) c.col(i) = vec(n);
    return c;
  }
};

std::string fmt_vec(const Vec& v) {
  std::ostringstream os;
  os << "(";
  for (int i = 0; i < v.size(); ++i) os << (i ? "," : "") << v(i);
  os << ")";
  return os.str();
}

void ensure_finite(double value, const std::string& what) {
  if (!std::isfinite(value)) throw ModelEvaluationError("non-finite value from " + what);
}

void record(CheckReport& rep, double margin, double tol, const std::string& label, const std::string& witness) {
  if (margin < rep.worst_margin) {
    rep.worst_margin = margin;
    rep.witness = label + " at " + witness;
  }
  if (margin < -tol) {
    bool seen = false;
    for (const auto& f : rep.failures) seen = seen || f.rfind(label + " ", 0) == 0;
    if (!seen) rep.failures.push_back(label + " violated at " + witness);
    rep.passes = false;
  }
}

}  // namespace

CheckReport check_convexity(const Model& model, std::mt19937_64& rng, int sample_count, SamplingBox box) {
  if (sample_count < 1) throw Error("check_convexity: sample_count must be >= 1");
  Sampler S{rng, box};
  const auto& k = model.constants();
  const int n = model.n(), d = model.d();
  CheckReport rep;
  rep.worst_margin = std::numeric_limits<double>::infinity();

  struct Probe {
    double s = 0.0;
    MeasureFeatures mf;
    Vec x, v, x2, v2;
  };
  struct Eval {
    double margin, tol, spread;  // spread = squared length of the increment
  };
  enum Kind { kA3, kA3p, kG };
  auto eval = [&](Kind kind, const Probe& p) -> Eval {
    const auto r1 = model.running(p.s, p.x, p.mf, p.v);
    ensure_finite(r1.f, "f at " + fmt_vec(p.x) + " v=" + fmt_vec(p.v));
    const Vec dv = p.v2 - p.v, dx = p.x2 - p.x;
    if (kind == kA3) {
      const auto r2 = model.running(p.s, p.x, p.mf, p.v2);
      ensure_finite(r2.f, "f at " + fmt_vec(p.x) + " v=" + fmt_vec(p.v2));
      const double lin = r1.fv.dot(dv);
      return {r2.f - r1.f - lin - k.lambda_v * dv.squaredNorm(),
              1e-12 * (1.0 + std::abs(r1.f) + std::abs(r2.f) + std::abs(lin)), dv.squaredNorm()};
    }
    if (kind == kA3p) {
      const auto r3 = model.running(p.s, p.x2, p.mf, p.v2);
      const double lin = r1.fx.dot(dx) + r1.fv.dot(dv);
      return {r3.f - r1.f - lin - k.lambda_v * dv.squaredNorm() - k.lambda_x * dx.squaredNorm(),
              1e-12 * (1.0 + std::abs(r1.f) + std::abs(r3.f) + std::abs(lin)), dx.squaredNorm() + dv.squaredNorm()};
    }
    const auto t1 = model.terminal(p.x, p.mf), t2 = model.terminal(p.x2, p.mf);
    const double lin = t1.gx.dot(dx);
    return {t2.g - t1.g - lin - k.lambda_g * dx.squaredNorm(), 1e-12 * (1.0 + std::abs(t1.g) + std::abs(t2.g) + std::abs(lin)),
            dx.squaredNorm()};
  };
  auto label = [](Kind kind) { return kind == kA3 ? "A3" : kind == kA3p ? "A3'" : "g-convexity"; };
  auto witness = [&](Kind kind, const Probe& p) {
    if (kind == kA3) return "s=" + std::to_string(p.s) + " x=" + fmt_vec(p.x) + " v=" + fmt_vec(p.v) + " v'=" + fmt_vec(p.v2);
    if (kind == kA3p) return "x=" + fmt_vec(p.x) + " x'=" + fmt_vec(p.x2) + " v=" + fmt_vec(p.v) + " v'=" + fmt_vec(p.v2);
    return "x=" + fmt_vec(p.x) + " x'=" + fmt_vec(p.x2);
  };
  auto normalized = [](const Eval& e) { return e.spread > 0.0 ? e.margin / e.spread : 0.0; };

  const Kind kinds[3] = {kA3, kA3p, kG};
  const int active = k.has_A3prime ? 3 : 1;
  Probe worst[3];
  double worst_norm[3] = {std::numeric_limits<double>::infinity(), std::numeric_limits<double>::infinity(),
                          std::numeric_limits<double>::infinity()};
  for (int it = 0; it < sample_count; ++it) {
    Probe p;
    p.s = S.uniform(0.0, model.horizon());
    p.mf = features(S.cloud(n));
    p.x = S.vec(n);
    p.v = S.vec(d);
    p.v2 = S.vec(d);
    p.x2 = k.has_A3prime ? S.vec(n) : p.x;
    for (int a = 0; a < active; ++a) {
      const auto e = eval(kinds[a], p);
      record(rep, e.margin, e.tol, label(kinds[a]), witness(kinds[a], p));
      if (normalized(e) < worst_norm[a]) {
        worst_norm[a] = normalized(e);
        worst[a] = p;
      }
    }
  }

  // Local search from the worst sample on the slack per squared increment, which for a quadratic
  // cost only depends on the direction; random sampling alone misses thin violating cones.
  const double hw = box.half_width;
  for (int a = 0; a < active; ++a) {
    const Kind kind = kinds[a];
    const bool move_x = kind != kA3, move_v = kind != kG;
    Probe best = worst[a];
    double best_norm = worst_norm[a];
    double step = 0.25;
    int fails = 0;
    for (int it = 0; it < 4000 && step > 1e-10; ++it) {
      Probe t = best;
      const double len = std::sqrt(eval(kind, best).spread) + 1e-12;
      std::normal_distribution<double> nd(0.0, step * len);
      if (move_x)
        for (int i = 0; i < n; ++i) t.x2(i) += nd(rng);
      if (move_v)
        for (int i = 0; i < d; ++i) t.v2(i) += nd(rng);
      const bool inside = t.x2.cwiseAbs().maxCoeff() <= hw && t.v2.cwiseAbs().maxCoeff() <= hw;
      const double r = inside ? normalized(eval(kind, t)) : std::numeric_limits<double>::infinity();
      if (r < best_norm) {
        best = t;
        best_norm = r;
        fails = 0;
      } else if (++fails >= 30) {
        step *= 0.5;
        fails = 0;
      }
    }
    const auto e = eval(kind, best);
    record(rep, e.margin, e.tol, label(kind), witness(kind, best));
  }
  return rep;
}

bool check_small_mf_effect(const AssumptionConstants& c) {
  return c.lambda_x >= c.Lv * c.Lv / (8.0 * c.lambda_v) + c.Lx / 2.0 && c.lambda_g >= c.Lg / 2.0;
}

CheckReport check_monotonicity(const Model& model, std::mt19937_64& rng, int sample_count, SamplingBox box) {
  Sampler S{rng, box};
  const auto& k = model.constants();
  const int n = model.n(), N = box.cloud_size;
  // alpha = C(L)(1 + 1/lambda_v) in the general case; zero under the small mean field effect.
  const double alpha = k.has_A3prime ? 0.0 : k.L * (1.0 + k.L) * (1.0 + 1.0 / k.lambda_v);
  CheckReport rep;
  rep.worst_margin = std::numeric_limits<double>::infinity();
  for (int it = 0; it < sample_count; ++it) {
    const double s = S.uniform(0.0, model.horizon());
    const Eigen::MatrixXd X = S.cloud(n), X2 = S.cloud(n);
    const Eigen::MatrixXd P = S.cloud(n), P2 = S.cloud(n);
    std::vector<Mat> Q(N), Q2(N);
    for (int i = 0; i < N; ++i) {
      Q[i] = Mat(n, n);
      Q2[i] = Mat(n, n);
      for (int j = 0; j < n; ++j) {
        Q[i].col(j) = S.vec(n);
        Q2[i].col(j) = S.vec(n);
      }
    }
    const MeasureFeatures m1 = features(X), m2 = features(X2);
    const auto c1 = model.coefficients(s, m1), c2 = model.coefficients(s, m2);
    double lhs = 0.0, rhs = 0.0, giii = 0.0, scale = 0.0;
    for (int i = 0; i < N; ++i) {
      const Vec x1 = X.col(i), x2 = X2.col(i), p1 = P.col(i), p2 = P2.col(i);
      const Vec v1 = minimize_v(model, c1, s, x1, m1, p1, Q[i]);
      const Vec v2 = minimize_v(model, c2, s, x2, m2, p2, Q2[i]);
      const auto r1 = model.running(s, x1, m1, v1), r2 = model.running(s, x2, m2, v2);
      const Vec F1 = -hamiltonian_gradient_x(c1, r1, p1, Q[i]);
      const Vec F2 = -hamiltonian_gradient_x(c2, r2, p2, Q2[i]);
      const Vec dX = x2 - x1, dP = p2 - p1;
      double term = (F2 - F1).dot(dX) + (c2.drift(x2, v2) - c1.drift(x1, v1)).dot(dP);
      double dq2 = 0.0;
      for (int j = 0; j < n; ++j) {
        const Vec dq = Q2[i].col(j) - Q[i].col(j);
        term += (c2.diffusion(j, x2, v2) - c1.diffusion(j, x1, v1)).dot(dq);
        dq2 += dq.squaredNorm();
      }
      lhs += term;
      rhs += -k.lambda_v * (v2 - v1).squaredNorm() + alpha * (dX.squaredNorm() + dP.squaredNorm() + dq2);
      scale += std::abs(term);
      if (k.has_A3prime) giii += (model.terminal(x2, m2).gx - model.terminal(x1, m1).gx).dot(dX);
    }
    lhs /= N;
    rhs /= N;
    giii /= N;
    const double tol = 1e-10 * (1.0 + scale / N);
    record(rep, rhs - lhs, tol, "Condition 1(i)", "sample " + std::to_string(it) + " s=" + std::to_string(s));
    if (k.has_A3prime) record(rep, giii, tol, "Condition 1(iii)", "sample " + std::to_string(it));
  }
  return rep;
}

namespace {

struct FdChecker {
  CheckReport& rep;
  double tol;
  void compare(const std::string& name, double analytic, double fd) {
    const double err = std::abs(analytic - fd) / (1.0 + std::abs(analytic));
    if (err > rep.worst_margin) {
      rep.worst_margin = err;
      rep.witness = name;
    }
    if (err > tol) {
      bool seen = false;
      for (const auto& f : rep.failures) seen = seen || f == name;
      if (!seen) rep.failures.push_back(name);
      rep.passes = false;
    }
  }
};

}  // namespace

CheckReport check_derivative_consistency(const Model& model, std::mt19937_64& rng, int sample_count, double h,
                                         double tol, SamplingBox box) {
  if (!(h > 0.0)) throw Error("check_derivative_consistency: h must be positive");
  Sampler S{rng, box};
  const int n = model.n(), d = model.d(), N = box.cloud_size;
  CheckReport rep;
  FdChecker chk{rep, tol};
  for (int it = 0; it < sample_count; ++it) {
    const double s = S.uniform(0.0, model.horizon());
    const Eigen::MatrixXd cloud = S.cloud(n);
    const MeasureFeatures mf = features(cloud);
    const Vec x = S.vec(n), v = S.vec(d);
    const auto r = model.running(s, x, mf, v);
    const auto t = model.terminal(x, mf);
    for (int a = 0; a < n; ++a) {
      Vec xp = x, xm = x;
      xp(a) += h;
      xm(a) -= h;
      const auto rp = model.running(s, xp, mf, v), rm = model.running(s, xm, mf, v);
      const auto tp = model.terminal(xp, mf), tm = model.terminal(xm, mf);
      chk.compare("D_x f", r.fx(a), (rp.f - rm.f) / (2 * h));
      chk.compare("D_x g", t.gx(a), (tp.g - tm.g) / (2 * h));
      for (int b = 0; b < n; ++b) {
        chk.compare("D_x^2 f", r.fxx(b, a), (rp.fx(b) - rm.fx(b)) / (2 * h));
        chk.compare("D_x^2 g", t.gxx(b, a), (tp.gx(b) - tm.gx(b)) / (2 * h));
      }
      for (int b = 0; b < d; ++b) chk.compare("D_vD_x f", r.fxv(a, b), (rp.fv(b) - rm.fv(b)) / (2 * h));
      if (n == 1 && d == 1) {
        chk.compare("D_x^3 f", r.fxxx, (rp.fxx(0, 0) - rm.fxx(0, 0)) / (2 * h));
        chk.compare("D_x^2D_v f", r.fxxv, (rp.fxv(0, 0) - rm.fxv(0, 0)) / (2 * h));
        chk.compare("D_xD_v^2 f", r.fxvv, (rp.fvv(0, 0) - rm.fvv(0, 0)) / (2 * h));
        chk.compare("D_x^3 g", t.gxxx, (tp.gxx(0, 0) - tm.gxx(0, 0)) / (2 * h));
      }
    }
    for (int a = 0; a < d; ++a) {
      Vec vp = v, vm = v;
      vp(a) += h;
      vm(a) -= h;
      const auto rp = model.running(s, x, mf, vp), rm = model.running(s, x, mf, vm);
      chk.compare("D_v f", r.fv(a), (rp.f - rm.f) / (2 * h));
      for (int b = 0; b < d; ++b) chk.compare("D_v^2 f", r.fvv(b, a), (rp.fv(b) - rm.fv(b)) / (2 * h));
      if (n == 1 && d == 1) chk.compare("D_v^3 f", r.fvvv, (rp.fvv(0, 0) - rm.fvv(0, 0)) / (2 * h));
    }
    // Measure derivatives along the lifted direction: moving atom i by h e_c moves the
    // functional by h/N * D_y dk/dnu(y_i) e_c.
    const auto c = model.coefficients(s, mf);
    const int i = static_cast<int>(std::uniform_int_distribution<int>(0, N - 1)(rng));
    const Vec y = cloud.col(i);
    for (int a = 0; a < n; ++a) {
      Eigen::MatrixXd cp = cloud, cm = cloud;
      cp(a, i) += h;
      cm(a, i) -= h;
      const MeasureFeatures mp = features(cp), mm = features(cm);
      const double scale = static_cast<double>(N) / (2 * h);
      const auto rp = model.running(s, x, mp, v), rm = model.running(s, x, mm, v);
      const auto tp = model.terminal(x, mp), tm = model.terminal(x, mm);
      const auto cpp = model.coefficients(s, mp), cmm = model.coefficients(s, mm);
      chk.compare("D_y df/dnu", r.f_mean(a) + 2 * r.f_m2 * y(a), (rp.f - rm.f) * scale);
      chk.compare("D_y dg/dnu", t.g_mean(a) + 2 * t.g_m2 * y(a), (tp.g - tm.g) * scale);
      for (int b = 0; b < n; ++b) {
        chk.compare("D_y d(D_x f)/dnu", r.fx_mean(b, a) + 2 * r.fx_m2(b) * y(a), (rp.fx(b) - rm.fx(b)) * scale);
        chk.compare("D_y d(D_x g)/dnu", t.gx_mean(b, a) + 2 * t.gx_m2(b) * y(a), (tp.gx(b) - tm.gx(b)) * scale);
        chk.compare("D db0/dnu", c.b0_mean(b, a) + 2 * c.b0_m2(b) * y(a), (cpp.b0(b) - cmm.b0(b)) * scale);
        for (int j = 0; j < n; ++j)
          chk.compare("D dsigma0/dnu", c.s0_mean[j](b, a) + 2 * c.s0_m2[j](b) * y(a),
                      (cpp.s0[j](b) - cmm.s0[j](b)) * scale);
      }
      for (int b = 0; b < d; ++b)
        chk.compare("D_y d(D_v f)/dnu", r.fv_mean(b, a) + 2 * r.fv_m2(b) * y(a), (rp.fv(b) - rm.fv(b)) * scale);
    }
  }
  return rep;
}

// ---- config -----------------------------------------------------------------

namespace {

using nlohmann::json;

Vec read_vec(const json& j, const std::string& key, int n) {
  const json& v = j.at(key);
  Vec out(n);
  if (v.is_number()) {
    if (n != 1) throw ConfigError(key, "scalar given for a vector of length " + std::to_string(n));
    out(0) = v.get<double>();
    return out;
  }
  if (!v.is_array() || static_cast<int>(v.size()) != n)
    throw ConfigError(key, "expected an array of length " + std::to_string(n));
  for (int i = 0; i < n; ++i) {
    if (!v[i].is_number()) throw ConfigError(key, "non-numeric entry");
    out(i) = v[i].get<double>();
  }
  return out;
}

Mat read_mat(const json& j, const std::string& key, int r, int c) {
  const json& v = j.at(key);
  Mat out(r, c);
  if (v.is_number()) {
    if (r != 1 || c != 1) throw ConfigError(key, "scalar given for a matrix");
    out(0, 0) = v.get<double>();
    return out;
  }
  if (!v.is_array() || static_cast<int>(v.size()) != r) throw ConfigError(key, "expected " + std::to_string(r) + " rows");
  for (int a = 0; a < r; ++a) {
    if (!v[a].is_array() || static_cast<int>(v[a].size()) != c)
      throw ConfigError(key, "expected rows of length " + std::to_string(c));
    for (int b = 0; b < c; ++b) {
      if (!v[a][b].is_number()) throw ConfigError(key, "non-numeric entry");
      out(a, b) = v[a][b].get<double>();
    }
  }
  return out;
}

double read_num(const json& j, const std::string& key) {
  if (!j.at(key).is_number()) throw ConfigError(key, "expected a number");
  return j.at(key).get<double>();
}

json vec_json(const Vec& v) {
  if (v.size() == 1) return v(0);
  json a = json::array();
  for (int i = 0; i < v.size(); ++i) a.push_back(v(i));
  return a;
}

json mat_json(const Mat& m) {
  if (m.rows() == 1 && m.cols() == 1) return m(0, 0);
  json a = json::array();
  for (int r = 0; r < m.rows(); ++r) {
    json row = json::array();
    for (int c = 0; c < m.cols(); ++c) row.push_back(m(r, c));
    a.push_back(row);
  }
  return a;
}

// Diffusion tables: one entry per column j; in 1D a bare scalar is accepted.
template <class T, class Reader>
std::vector<T> read_columns(const json& j, const std::string& key, int n, Reader reader) {
  const json& v = j.at(key);
  std::vector<T> out;
  if (n == 1 && !(v.is_array() && v.size() == 1 && v[0].is_array())) {
    json wrap;
    wrap[key] = v.is_array() && v.size() == 1 ? v[0] : v;
    out.push_back(reader(wrap, key));
    return out;
  }
  if (!v.is_array() || static_cast<int>(v.size()) != n) throw ConfigError(key, "expected one entry per diffusion column");
  for (int c = 0; c < n; ++c) {
    json wrap;
    wrap[key] = v[c];
    out.push_back(reader(wrap, key));
  }
  return out;
}

const char* const kModelKeys[] = {"kind", "n", "d", "T", "b0", "b0_mean", "b0_m2", "b1", "b2", "sigma0", "sigma0_mean",
                                  "sigma0_m2", "sigma1", "sigma2", "f0", "f1", "f2", "F1", "F2", "Fxv", "Cx", "Cv",
                                  "fm", "kf", "kxm2", "eps_x", "eps_v", "g0", "g1", "G", "Gm", "gm", "kg", "eps_g",
                                  "constants"};
const char* const kConstKeys[] = {"L", "Lx", "Lv", "Lg", "lambda_v", "lambda_x", "lambda_g", "has_A3prime", "has_A4"};

}  // namespace

std::shared_ptr<MomentModel> model_from_json(const json& j) {
  if (!j.is_object()) throw ConfigError("model", "expected an object");
  for (auto it = j.begin(); it != j.end(); ++it) {
    bool known = false;
    for (const char* k : kModelKeys) known = known || it.key() == k;
    if (!known) throw ConfigError("model." + it.key(), "unknown key");
  }
  if (!j.contains("kind") || !j["kind"].is_string()) throw ConfigError("model.kind", "missing or not a string");
  const std::string kind = j["kind"].get<std::string>();
  if (kind != "lq" && kind != "moment_coupled") throw ConfigError("model.kind", "must be 'lq' or 'moment_coupled'");
  auto geti = [&](const char* key) {
    if (!j.contains(key) || !j[key].is_number_integer()) throw ConfigError(std::string("model.") + key, "missing integer");
    return j[key].get<int>();
  };
  const int n = geti("n"), d = geti("d");
  if (n < 1 || n > kMaxDim) throw ConfigError("model.n", "out of range");
  if (d < 1 || d > kMaxDim) throw ConfigError("model.d", "out of range");
  if (!j.contains("T")) throw ConfigError("model.T", "missing");
  MomentModelData D = MomentModelData::zeros(n, d, read_num(j, "T"));
  D.kind = kind;
  if (!(D.T > 0.0)) throw ConfigError("model.T", "must be positive");

  auto wrap = [](const std::string& key, auto fn) {
    try {
      fn();
    } catch (const ConfigError& e) {
      throw ConfigError("model." + e.key, std::string(e.what()).substr(e.key.size() + 2));
    } catch (const json::exception& e) {
      throw ConfigError("model." + key, e.what());
    }
  };
  auto vec = [&](const char* key, Vec& dst, int len) {
    if (j.contains(key)) wrap(key, [&] { dst = read_vec(j, key, len); });
  };
  auto mat = [&](const char* key, Mat& dst, int r, int c) {
    if (j.contains(key)) wrap(key, [&] { dst = read_mat(j, key, r, c); });
  };
  auto num = [&](const char* key, double& dst) {
    if (j.contains(key)) wrap(key, [&] { dst = read_num(j, key); });
  };
  vec("b0", D.b0c, n);
  mat("b0_mean", D.B0m, n, n);
  vec("b0_m2", D.b0q, n);
  mat("b1", D.b1, n, n);
  mat("b2", D.b2, n, d);
  auto cols_vec = [&](const char* key, std::vector<Vec>& dst) {
    if (j.contains(key))
      wrap(key, [&] { dst = read_columns<Vec>(j, key, n, [n](const json& w, const std::string& k) { return read_vec(w, k, n); }); });
  };
  auto cols_mat = [&](const char* key, std::vector<Mat>& dst, int c) {
    if (j.contains(key))
      wrap(key, [&] {
        dst = read_columns<Mat>(j, key, n, [n, c](const json& w, const std::string& k) { return read_mat(w, k, n, c); });
      });
  };
  cols_vec("sigma0", D.s0c);
  cols_mat("sigma0_mean", D.S0m, n);
  cols_vec("sigma0_m2", D.s0q);
  cols_mat("sigma1", D.S1, n);
  cols_mat("sigma2", D.S2, d);
  num("f0", D.f0);
  vec("f1", D.f1, n);
  vec("f2", D.f2, d);
  mat("F1", D.F1, n, n);
  mat("F2", D.F2, d, d);
  mat("Fxv", D.Fxv, n, d);
  mat("Cx", D.Cx, n, n);
  mat("Cv", D.Cv, d, n);
  vec("fm", D.fm, n);
  num("kf", D.kf);
  num("kxm2", D.kxm2);
  num("eps_x", D.eps_x);
  num("eps_v", D.eps_v);
  num("g0", D.g0);
  vec("g1", D.g1, n);
  mat("G", D.G, n, n);
  mat("Gm", D.Gm, n, n);
  vec("gm", D.gm, n);
  num("kg", D.kg);
  num("eps_g", D.eps_g);

  if (j.contains("constants")) {
    const json& c = j["constants"];
    if (!c.is_object()) throw ConfigError("model.constants", "expected an object");
    for (auto it = c.begin(); it != c.end(); ++it) {
      bool known = false;
      for (const char* k : kConstKeys) known = known || it.key() == k;
      if (!known) throw ConfigError("model.constants." + it.key(), "unknown key");
    }
    auto cn = [&](const char* key, double& dst) {
      if (!c.contains(key)) return;
      if (!c[key].is_number()) throw ConfigError(std::string("model.constants.") + key, "expected a number");
      dst = c[key].get<double>();
    };
    auto cb = [&](const char* key, bool& dst) {
      if (!c.contains(key)) return;
      if (!c[key].is_boolean()) throw ConfigError(std::string("model.constants.") + key, "expected a boolean");
      dst = c[key].get<bool>();
    };
    auto& K = D.constants;
    cn("L", K.L);
    cn("Lx", K.Lx);
    cn("Lv", K.Lv);
    cn("Lg", K.Lg);
    cn("lambda_v", K.lambda_v);
    cn("lambda_x", K.lambda_x);
    cn("lambda_g", K.lambda_g);
    cb("has_A3prime", K.has_A3prime);
    cb("has_A4", K.has_A4);
    if (!(K.lambda_v > 0.0)) throw ConfigError("model.constants.lambda_v", "must be positive");
    if (K.Lx > K.L || K.Lv > K.L || K.Lg > K.L) throw ConfigError("model.constants.L", "L_x, L_v, L_g must not exceed L");
  }
  bool s2zero = true;
  for (const auto& m : D.S2) s2zero = s2zero && m.isZero(0.0);
  if (!s2zero && j.contains("constants") && j["constants"].contains("has_A4") && D.constants.has_A4)
    throw ConfigError("model.constants.has_A4", "declared but sigma2 is nonzero");
  if (!s2zero) D.constants.has_A4 = false;

  if (kind == "lq") {
    const char* forbidden[] = {"b0_m2", "sigma0_m2", "kf", "kxm2", "eps_x", "eps_v", "eps_g", "kg", "Fxv"};
    for (const char* k : forbidden)
      if (j.contains(k)) throw ConfigError(std::string("model.") + k, "not allowed for kind 'lq'");
  }
  return std::make_shared<MomentModel>(std::move(D));
}

json model_to_json(const MomentModelData& D) {
  json j;
  j["kind"] = D.kind;
  j["n"] = D.n;
  j["d"] = D.d;
  j["T"] = D.T;
  j["b0"] = vec_json(D.b0c);
  j["b0_mean"] = mat_json(D.B0m);
  j["b1"] = mat_json(D.b1);
  j["b2"] = mat_json(D.b2);
  auto cols = [&](const auto& v, auto conv) {
    if (D.n == 1) return conv(v[0]);
    json a = json::array();
    for (const auto& e : v) a.push_back(conv(e));
    return a;
  };
  j["sigma0"] = cols(D.s0c, vec_json);
  j["sigma0_mean"] = cols(D.S0m, mat_json);
  j["sigma1"] = cols(D.S1, mat_json);
  j["sigma2"] = cols(D.S2, mat_json);
  j["f0"] = D.f0;
  j["f1"] = vec_json(D.f1);
  j["f2"] = vec_json(D.f2);
  j["F1"] = mat_json(D.F1);
  j["F2"] = mat_json(D.F2);
  j["Cx"] = mat_json(D.Cx);
  j["Cv"] = mat_json(D.Cv);
  j["fm"] = vec_json(D.fm);
  j["g0"] = D.g0;
  j["g1"] = vec_json(D.g1);
  j["G"] = mat_json(D.G);
  j["Gm"] = mat_json(D.Gm);
  j["gm"] = vec_json(D.gm);
  if (D.kind != "lq") {
    j["b0_m2"] = vec_json(D.b0q);
    j["sigma0_m2"] = cols(D.s0q, vec_json);
    j["Fxv"] = mat_json(D.Fxv);
    j["kf"] = D.kf;
    j["kxm2"] = D.kxm2;
    j["eps_x"] = D.eps_x;
    j["eps_v"] = D.eps_v;
    j["kg"] = D.kg;
    j["eps_g"] = D.eps_g;
  }
  const auto& K = D.constants;
  j["constants"] = {{"L", K.L},
                    {"Lx", K.Lx},
                    {"Lv", K.Lv},
                    {"Lg", K.Lg},
                    {"lambda_v", K.lambda_v},
                    {"lambda_x", K.lambda_x},
                    {"lambda_g", K.lambda_g},
                    {"has_A3prime", K.has_A3prime},
                    {"has_A4", K.has_A4}};
  return j;
}

}  // namespace mfg
