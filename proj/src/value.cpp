#include "mfg/value.hpp"

#include <algorithm>
#include <cmath>
#include <map>
#include <random>

namespace mfg {

namespace {

TimeGrid grid_from(const Model& model, double t, int K) { return TimeGrid(t, model.horizon(), K); }

double trapezoid_weight(int k, int K, double dt) { return (k == 0 || k == K) ? 0.5 * dt : dt; }

double mean_running(const Model& model, const FbsdeSolution& sol, const MeasureFlow& flow, int k) {
  const double s = sol.grid.node(k);
  double acc = 0.0;
  for (int i = 0; i < sol.N; ++i) acc += model.running(s, sol.Y[k].col(i), flow.feats[k], sol.v[k].col(i)).f;
  return acc / sol.N;
}

GradValue grad_from(const Model& model, const FbsdeSolution& control, const MeasureFlow& flow) {
  const Linearization lin(model, control, flow);
  const auto J = solve_jacobian_x(lin);
  GradValue g;
  g.DxV = control.p[0].rowwise().mean();
  const Mat A = J.meanP(0);
  g.Dx2V = 0.5 * (A + A.transpose());
  g.asymmetry = (A - A.transpose()).cwiseAbs().maxCoeff();
  return g;
}

double sigma_sq_norm(const Coefficients& c, const Vec& y, int d) {
  double s = 0.0;
  for (std::size_t j = 0; j < c.s0.size(); ++j) s += c.diffusion(static_cast<int>(j), y, Vec::Zero(d)).squaredNorm();
  return s;
}

}  // namespace

Eigen::RowVectorXd cost_derivative(const Model& model, const FbsdeSolution& base, const MeasureFlow& flow,
                                   const LinearFlow& d, const SourceStats& S) {
  const int K = base.grid.K, n = base.n, dd = base.d, N = base.N, nc = d.ncol;
  const double dt = base.grid.dt();
  Eigen::RowVectorXd acc = Eigen::RowVectorXd::Zero(nc);
  for (int k = 0; k <= K; ++k) {
    const double s = base.grid.node(k), w = trapezoid_weight(k, K, dt) / N;
    for (int i = 0; i < N; ++i) {
      const auto rc = model.running(s, base.Y[k].col(i), flow.feats[k], base.v[k].col(i));
      for (int c = 0; c < nc; ++c) {
        const double direct = rc.fx.dot(d.Y[k].col(i).segment(c * n, n)) + rc.fv.dot(d.v[k].col(i).segment(c * dd, dd));
        const double measure = rc.f_mean.dot(S.mean[k].col(c)) + 2.0 * rc.f_m2 * S.cross[k](c);
        acc(c) += w * (direct + measure);
      }
    }
  }
  for (int i = 0; i < N; ++i) {
    const auto tc = model.terminal(base.Y[K].col(i), flow.feats[K]);
    for (int c = 0; c < nc; ++c)
      acc(c) += (tc.gx.dot(d.Y[K].col(i).segment(c * n, n)) + tc.g_mean.dot(S.mean[K].col(c)) +
                 2.0 * tc.g_m2 * S.cross[K](c)) /
                N;
  }
  return acc;
}

ValuePipeline::ValuePipeline(const Model& model, double t, const ParticleMeasure& mu, const ValueSettings& settings)
    : model_(&model), t_(t), mu_(mu), settings_(settings),
      mfg_(solve_mfg(model, t, mu, grid_from(model, t, settings.K), settings.params)) {}

const Linearization& ValuePipeline::lin_mfg() const {
  if (!lin_mfg_) const_cast<ValuePipeline*>(this)->lin_mfg_ = std::make_unique<Linearization>(*model_, mfg_.solution, mfg_.flow);
  return *lin_mfg_;
}

std::vector<std::pair<Vec, double>> ValuePipeline::probe_atoms() const {
  const auto& P = mu_.points();
  const int M = mu_.size();
  std::vector<std::pair<Vec, double>> out;
  std::map<std::vector<double>, int> index;
  for (int a = 0; a < M; ++a) {
    std::vector<double> key(P.col(a).data(), P.col(a).data() + P.rows());
    auto [it, fresh] = index.emplace(key, static_cast<int>(out.size()));
    if (fresh) out.emplace_back(Vec(P.col(a)), 0.0);
    out[it->second].second += 1.0 / M;
  }
  if (static_cast<int>(out.size()) <= settings_.max_probes) return out;
  // Too many distinct atoms: equal-weight subsample of the atoms, seeded.
  std::vector<int> idx(M);
  for (int a = 0; a < M; ++a) idx[a] = a;
  std::mt19937_64 rng(settings_.params.seed);
  std::shuffle(idx.begin(), idx.end(), rng);
  out.clear();
  for (int a = 0; a < settings_.max_probes; ++a) out.emplace_back(Vec(P.col(idx[a])), 1.0 / settings_.max_probes);
  return out;
}

double ValuePipeline::value(const Vec& x) const {
  const auto c = solve_control(*model_, t_, x, mfg_.flow, mfg_.flow.grid, settings_.params);
  return expected_cost(*model_, c, mfg_.flow);
}

GradValue ValuePipeline::grad(const Vec& x) const {
  const auto c = solve_control(*model_, t_, x, mfg_.flow, mfg_.flow.grid, settings_.params);
  return grad_from(*model_, c, mfg_.flow);
}

LfdSample ValuePipeline::lfd(const Vec& x, const Vec& y, bool second_order) const {
  require_dim(!second_order || (model_->n() == 1 && model_->d() == 1), "second-order measure derivative needs n = d = 1");
  const auto& flow = mfg_.flow;
  const auto c = solve_control(*model_, t_, x, flow, flow.grid, settings_.params);
  const Linearization lin_ctrl(*model_, c, flow);
  const auto probe = probe_data(*model_, flow, y, settings_.params, second_order);
  const auto K = solve_lfd_kernel(lin_mfg(), lin_ctrl, probe, second_order);
  LfdSample out;
  out.y = y;
  out.D1 = cost_derivative(*model_, c, flow, K.mu, K.mu_sources).transpose();
  if (second_order) out.D2 = Mat::Constant(1, 1, cost_derivative(*model_, c, flow, *K.mu_z, *K.mu_z_sources)(0));
  return out;
}

double ValuePipeline::measure_integral(const Vec& x) const {
  if (model_->measure_free()) return 0.0;
  const auto& flow = mfg_.flow;
  const auto c = solve_control(*model_, t_, x, flow, flow.grid, settings_.params);
  const Linearization lin_ctrl(*model_, c, flow);
  const auto coef = model_->coefficients(t_, flow.feats[0]);
  double total = 0.0;
  for (const auto& [y, w] : probe_atoms()) {
    const double sig2 = sigma_sq_norm(coef, y, model_->d());
    const bool second = sig2 > 0.0;
    require_dim(!second || (model_->n() == 1 && model_->d() == 1),
                "measure integral with nonzero diffusion needs n = d = 1");
    const auto probe = probe_data(*model_, flow, y, settings_.params, second);
    const auto K = solve_lfd_kernel(lin_mfg(), lin_ctrl, probe, second);
    const Vec D1 = cost_derivative(*model_, c, flow, K.mu, K.mu_sources).transpose();
    const Vec v = probe.control.v[0].col(0);
    double term = coef.drift(y, v).dot(D1);
    if (second) term += 0.5 * sig2 * cost_derivative(*model_, c, flow, *K.mu_z, *K.mu_z_sources)(0);
    total += w * term;
  }
  return total;
}

double ValuePipeline::hamiltonian_term(const Vec& x, const GradValue& g) const {
  const auto coef = model_->coefficients(t_, mfg_.flow.feats[0]);
  if (!coef.sigma2_zero()) throw MissingA4("time derivative needs sigma2 = 0");
  const int n = model_->n();
  Mat q(n, n);
  for (int j = 0; j < n; ++j) q.col(j) = 0.5 * g.Dx2V * coef.diffusion(j, x, Vec::Zero(model_->d()));
  return hamiltonian(*model_, t_, x, mfg_.flow.feats[0], Costate{g.DxV, q}, settings_.params.newton);
}

double ValuePipeline::dt_value(const Vec& x) const {
  const double H = hamiltonian_term(x, grad(x));
  return -H - measure_integral(x);
}

double value(const Model& model, double t, const Vec& x, const ParticleMeasure& mu, const ValueSettings& s) {
  if (t >= model.horizon()) return model.terminal(x, features(mu)).g;
  return ValuePipeline(model, t, mu, s).value(x);
}

GradValue grad_value(const Model& model, double t, const Vec& x, const ParticleMeasure& mu, const ValueSettings& s) {
  if (t >= model.horizon()) {
    const auto tc = model.terminal(x, features(mu));
    return {tc.gx, tc.gxx, 0.0};
  }
  return ValuePipeline(model, t, mu, s).grad(x);
}

std::vector<LfdSample> lfd_value(const Model& model, double t, const Vec& x, const ParticleMeasure& mu,
                                 const std::vector<Vec>& probes, bool second_order, const ValueSettings& s) {
  const ValuePipeline P(model, t, mu, s);
  std::vector<LfdSample> out;
  out.reserve(probes.size());
  for (const auto& y : probes) out.push_back(P.lfd(x, y, second_order));
  return out;
}

double dt_value(const Model& model, double t, const Vec& x, const ParticleMeasure& mu, const ValueSettings& s) {
  return ValuePipeline(model, t, mu, s).dt_value(x);
}

MasterTerms master_residual(const Model& model, double t, const Vec& x, const ParticleMeasure& mu,
                            const ValueSettings& s) {
  const ValuePipeline P(model, t, mu, s);
  MasterTerms m;
  m.H = P.hamiltonian_term(x, P.grad(x));
  m.integral = P.measure_integral(x);
  m.dt_formula = -m.H - m.integral;
  // Same step count and seed at every start time, so the paths of the three solves share
  // their normals.
  const double T = model.horizon(), e = s.fd_step;
  auto V = [&](double tt) { return tt == t ? P.value(x) : value(model, tt, x, mu, s); };
  if (t - e >= 0.0 && t + e <= T)
    m.dt_fd = (V(t + e) - V(t - e)) / (2 * e);
  else if (t + 2 * e <= T)
    m.dt_fd = (-3 * V(t) + 4 * V(t + e) - V(t + 2 * e)) / (2 * e);
  else
    m.dt_fd = (3 * V(t) - 4 * V(t - e) + V(t - 2 * e)) / (2 * e);
  m.residual = m.dt_fd + m.H + m.integral;
  return m;
}

double dpp_check(const Model& model, double t, const Vec& x, const ParticleMeasure& mu, double eps,
                 const ValueSettings& s) {
  if (eps == 0.0) return 0.0;
  const ValuePipeline P(model, t, mu, s);
  const auto& flow = P.mfg().flow;
  const int K = flow.grid.K;
  const double dt = flow.grid.dt();
  const int ke = static_cast<int>(std::lround(eps / dt));
  if (ke < 1 || ke > K || std::abs(ke * dt - eps) > 1e-9 * model.horizon())
    throw Error("dpp_check: eps must be a positive multiple of the step within the horizon");
  const auto c = solve_control(model, t, x, flow, flow.grid, s.params);
  const double V = expected_cost(model, c, flow);
  double running = 0.0;
  for (int k = 0; k <= ke; ++k) running += trapezoid_weight(k, ke, dt) * mean_running(model, c, flow, k);
  running -= cost_martingale(model, c, flow, ke);
  double rest = 0.0;
  if (ke == K) {
    for (int i = 0; i < c.N; ++i) rest += model.terminal(c.Y[K].col(i), flow.feats[K]).g;
    rest /= c.N;
  } else {
    // Restart the equilibrium from the evolved cloud; expand V(t + eps, ., m) to second
    // order around the mean of Y(t + eps).
    const TimeGrid g2(flow.grid.node(ke), model.horizon(), K - ke);
    const auto m2 = solve_mfg_cloud(model, g2, P.mfg().solution.Y[ke], s.params);
    const Eigen::MatrixXd& Ye = c.Y[ke];
    const Vec ybar = Ye.rowwise().mean();
    const Eigen::MatrixXd centered = Ye.colwise() - Ye.rowwise().mean();
    const Eigen::MatrixXd cov = centered * centered.transpose() / c.N;
    const auto c2 = solve_control(model, g2.t0, ybar, m2.flow, g2, s.params);
    const auto g = grad_from(model, c2, m2.flow);
    rest = expected_cost(model, c2, m2.flow) + 0.5 * (g.Dx2V * cov).trace();
  }
  return std::abs(V - running - rest);
}

double decoupling_check(const Model& model, double t, const ParticleMeasure& mu, double s_time, const Vec& x,
                        const ValueSettings& s) {
  const ValuePipeline P(model, t, mu, s);
  const auto& flow = P.mfg().flow;
  const int K = flow.grid.K;
  const double dt = flow.grid.dt();
  const int ks = static_cast<int>(std::lround((s_time - t) / dt));
  if (ks < 0 || ks > K || std::abs(flow.grid.node(ks) - s_time) > 1e-9 * model.horizon())
    throw Error("decoupling_check: s must be a grid node");
  auto v = [&](int k) {
    if (k == K) return model.terminal(x, flow.feats[K]).g;
    const auto tl = tail(flow, k);
    return expected_cost(model, solve_control(model, tl.grid.t0, x, tl, tl.grid, s.params), tl);
  };
  if (ks == K) return v(K) - model.terminal(x, flow.feats[K]).g;
  if (ks == 0 && K < 2) throw Error("decoupling_check: needs K >= 2");
  const double ds = ks >= 1 ? (v(ks + 1) - v(ks - 1)) / (2 * dt) : (-3 * v(0) + 4 * v(1) - v(2)) / (2 * dt);
  const auto tl = tail(flow, ks);
  const auto c = solve_control(model, tl.grid.t0, x, tl, tl.grid, s.params);
  const auto g = grad_from(model, c, tl);
  const auto coef = model.coefficients(tl.grid.t0, tl.feats[0]);
  if (!coef.sigma2_zero()) throw MissingA4("decoupling check needs sigma2 = 0");
  const int n = model.n();
  Mat q(n, n);
  for (int j = 0; j < n; ++j) q.col(j) = 0.5 * g.Dx2V * coef.diffusion(j, x, Vec::Zero(model.d()));
  return ds + hamiltonian(model, tl.grid.t0, x, tl.feats[0], Costate{g.DxV, q}, s.params.newton);
}

}  // namespace mfg
