#include "mfg/fbsde.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <ostream>
#include <random>
#include <sstream>

namespace mfg {

namespace {

std::uint64_t splitmix(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

std::uint64_t stream_seed(std::uint64_t seed, int N, int K, int pair) {
  std::uint64_t h = splitmix(seed);
  h = splitmix(h ^ static_cast<std::uint64_t>(N));
  h = splitmix(h ^ (static_cast<std::uint64_t>(K) << 32));
  return splitmix(h ^ (static_cast<std::uint64_t>(pair) * 0x2545f4914f6cdd1dULL));
}

}  // namespace

BrownianIncrements::BrownianIncrements(std::uint64_t seed, int N, int K, int n, double dt)
    : dB_(K, Eigen::MatrixXd(n, N)), N_(N), n_(n), dt_(dt) {
  if (N < 1 || K < 1 || n < 1) throw Error("BrownianIncrements: N, K, n must be positive");
  const double sd = std::sqrt(dt);
  const int pairs = (N + 1) / 2;
  for (int pr = 0; pr < pairs; ++pr) {
    std::mt19937_64 rng(stream_seed(seed, N, K, pr));
    std::normal_distribution<double> normal;
    const int a = 2 * pr, b = 2 * pr + 1;
    for (int k = 0; k < K; ++k)
      for (int r = 0; r < n; ++r) {
        const double z = sd * normal(rng);
        dB_[k](r, a) = z;
        if (b < N) dB_[k](r, b) = -z;
      }
  }
}

std::shared_ptr<const BrownianIncrements> brownian_for(const SolverParams& params, const TimeGrid& grid, int n) {
  return std::make_shared<BrownianIncrements>(params.seed, params.N, grid.K, n, grid.dt());
}

MeasureFlow MeasureFlow::from_clouds(const TimeGrid& grid, std::vector<Eigen::MatrixXd> clouds) {
  if (static_cast<int>(clouds.size()) != grid.K + 1) throw DimensionError("MeasureFlow: need K + 1 clouds");
  MeasureFlow f;
  f.grid = grid;
  f.feats.reserve(clouds.size());
  for (const auto& c : clouds) {
    if (c.rows() != clouds.front().rows()) throw DimensionError("MeasureFlow: dimension changes along the flow");
    f.feats.push_back(features(c));
  }
  f.clouds = std::move(clouds);
  return f;
}

namespace {

std::vector<int> atom_index(const ParticleMeasure& mu, int N) {
  const int M = mu.size();
  std::vector<int> order(M);
  std::iota(order.begin(), order.end(), 0);
  const auto& P = mu.points();
  std::stable_sort(order.begin(), order.end(), [&](int a, int b) {
    for (int r = 0; r < P.rows(); ++r) {
      if (P(r, a) < P(r, b)) return true;
      if (P(r, a) > P(r, b)) return false;
    }
    return false;
  });
  std::vector<int> idx(N);
  for (int i = 0; i < N; ++i)
    idx[i] = order[static_cast<int>(static_cast<long long>(i) * M / N)];
  return idx;
}

Eigen::MatrixXd cloud_from_index(const ParticleMeasure& mu, const std::vector<int>& idx) {
  Eigen::MatrixXd Y(mu.dim(), static_cast<Eigen::Index>(idx.size()));
  for (std::size_t i = 0; i < idx.size(); ++i) Y.col(static_cast<Eigen::Index>(i)) = mu.points().col(idx[i]);
  return Y;
}

// Per-node quantities shared by every particle. When D_v^2 f is constant, v-hat is
// affine in (p, q) and D_x f is affine in v, so one cost evaluation at v = 0 suffices.
struct Node {
  double s;
  Coefficients c;
  const MeasureFeatures* m;
  bool fast = false;
  Mat Finv;
};

struct Law {
  Vec p, v;
  Mat q;
};

Vec vhat_fast(const Node& nd, const RunningCost& rc0, const Vec& p, const Mat& q) {
  Vec g = nd.c.b2.transpose() * p + rc0.fv;
  for (int j = 0; j < static_cast<int>(nd.c.s2.size()); ++j) g.noalias() += nd.c.s2[j].transpose() * q.col(j);
  return -nd.Finv * g;
}

Law eval_law(const Model& model, const FbsdeSolution& sol, const Node& nd, int k, const Vec& y,
             const NewtonOptions& opt, Eigen::VectorXd& phi) {
  const int n = sol.n;
  sol.reg[k].basis(y, phi);
  Law out;
  const Vec ph = sol.law_p[k] * phi;
  out.q.resize(n, n);
  for (int j = 0; j < n; ++j) out.q.col(j) = sol.law_q[k].middleRows(j * n, n) * phi;
  const double dt = sol.grid.dt();
  if (nd.fast) {
    const RunningCost rc0 = model.running(nd.s, y, *nd.m, Vec::Zero(sol.d));
    const Vec v0 = vhat_fast(nd, rc0, ph, out.q);
    Vec dxh = nd.c.b1.transpose() * ph + rc0.fx + rc0.fxv * v0;
    for (int j = 0; j < n; ++j) dxh.noalias() += nd.c.s1[j].transpose() * out.q.col(j);
    out.p = ph + dt * dxh;
    out.v = vhat_fast(nd, rc0, out.p, out.q);
    return out;
  }
  const Vec v0 = minimize_v(model, nd.c, nd.s, y, *nd.m, ph, out.q, opt);
  const RunningCost rc = model.running(nd.s, y, *nd.m, v0);
  out.p = ph + dt * hamiltonian_gradient_x(nd.c, rc, ph, out.q);
  out.v = minimize_v(model, nd.c, nd.s, y, *nd.m, out.p, out.q, opt);
  return out;
}

void store_q(Eigen::MatrixXd& Q, int i, const Mat& q) {
  const int n = static_cast<int>(q.rows());
  for (int j = 0; j < n; ++j) Q.col(i).segment(j * n, n) = q.col(j);
}

std::vector<Node> make_nodes(const Model& model, const MeasureFlow& flow) {
  std::vector<Node> nodes;
  nodes.reserve(flow.grid.K + 1);
  for (int k = 0; k <= flow.grid.K; ++k) {
    const double s = flow.grid.node(k);
    Node nd{s, model.coefficients(s, flow.feats[k]), &flow.feats[k]};
    if (model.quadratic_in_v()) {
      const Mat fvv = model.running(s, Vec::Zero(model.n()), flow.feats[k], Vec::Zero(model.d())).fvv;
      Eigen::LLT<Mat> llt(fvv);
      if (llt.info() == Eigen::Success && fvv.norm() > 0.0) {
        nd.fast = true;
        nd.Finv = llt.solve(Mat::Identity(model.d(), model.d()));
      }
    }
    nodes.push_back(std::move(nd));
  }
  return nodes;
}

// Euler step from node k under the stored controls v[k].
void advance(const FbsdeSolution& sol, const Node& nd, int k, Eigen::MatrixXd& next) {
  const double dt = sol.grid.dt();
  const auto& dB = sol.dB->at(k);
  const int n = sol.n;
  for (int i = 0; i < sol.N; ++i) {
    const Vec y = sol.Y[k].col(i);
    const Vec v = sol.v[k].col(i);
    Vec out = y + dt * nd.c.drift(y, v);
    for (int j = 0; j < n; ++j) out.noalias() += nd.c.diffusion(j, y, v) * dB(j, i);
    next.col(i) = out;
  }
}

// relax < 1 blends the new feedback control with the control that drove the previous
// forward pass, particle by particle; `used` holds and receives those controls.
void forward_pass(const Model& model, const std::vector<Node>& nodes, FbsdeSolution& sol, bool use_law,
                  const NewtonOptions& opt, std::vector<Eigen::MatrixXd>& used, double relax = 1.0) {
  const int K = sol.grid.K;
  for (int k = 0; k < K; ++k) {
    if (use_law) {
      Eigen::VectorXd phi;
      for (int i = 0; i < sol.N; ++i) {
        const Law l = eval_law(model, sol, nodes[k], k, sol.Y[k].col(i), opt, phi);
        sol.p[k].col(i) = l.p;
        store_q(sol.q[k], i, l.q);
        sol.v[k].col(i) = relax * l.v + (1.0 - relax) * used[k].col(i);
      }
    } else {
      sol.v[k].setZero();
    }
    used[k] = sol.v[k];
    advance(sol, nodes[k], k, sol.Y[k + 1]);
  }
}

void terminal(const Model& model, const std::vector<Node>& nodes, FbsdeSolution& sol, const NewtonOptions& opt) {
  const int K = sol.grid.K;
  const Node& nd = nodes[K];
  for (int i = 0; i < sol.N; ++i) sol.p[K].col(i) = model.terminal(sol.Y[K].col(i), *nd.m).gx;
  sol.q[K] = sol.q[K - 1];
  for (int i = 0; i < sol.N; ++i) {
    const Vec y = sol.Y[K].col(i);
    const Mat q = sol.qat(K, i);
    sol.v[K].col(i) = minimize_v(model, nd.c, nd.s, y, *nd.m, Vec(sol.p[K].col(i)), q, opt);
  }
}

void backward_pass(const Model& model, const std::vector<Node>& nodes, FbsdeSolution& sol, int degree,
                   const NewtonOptions& opt) {
  const int K = sol.grid.K;
  const int n = sol.n;
  const double dt = sol.grid.dt();
  terminal(model, nodes, sol, opt);
  for (int k = K - 1; k >= 0; --k) {
    sol.reg[k] = Regressor(sol.Y[k], degree);
    const Regressor& R = sol.reg[k];
    sol.law_p[k] = R.fit(sol.p[k + 1]);
    const Eigen::MatrixXd resid = sol.p[k + 1] - R.predict(sol.law_p[k]);
    const auto& dB = sol.dB->at(k);
    Eigen::MatrixXd T(n * n, sol.N);
    for (int j = 0; j < n; ++j) T.middleRows(j * n, n) = resid.array().rowwise() * dB.row(j).array();
    sol.law_q[k] = R.fit(T) / dt;
    Eigen::VectorXd phi;
    for (int i = 0; i < sol.N; ++i) {
      const Law l = eval_law(model, sol, nodes[k], k, sol.Y[k].col(i), opt, phi);
      sol.p[k].col(i) = l.p;
      store_q(sol.q[k], i, l.q);
      sol.v[k].col(i) = l.v;
    }
  }
}

double sup_change(const std::vector<Eigen::MatrixXd>& a, const std::vector<Eigen::MatrixXd>& b) {
  double m = 0.0;
  for (std::size_t k = 0; k < a.size(); ++k) m = std::max(m, (a[k] - b[k]).cwiseAbs().maxCoeff());
  return m;
}

double sup_abs(const std::vector<Eigen::MatrixXd>& a) {
  double m = 0.0;
  for (const auto& x : a) m = std::max(m, x.cwiseAbs().maxCoeff());
  return m;
}

bool finite(const std::vector<Eigen::MatrixXd>& a) {
  for (const auto& x : a)
    if (!x.allFinite()) return false;
  return true;
}

std::string trace_text(const std::vector<double>& trace) {
  std::ostringstream os;
  os << "sweep changes:";
  for (double t : trace) os << ' ' << t;
  return os.str();
}

}  // namespace

Eigen::MatrixXd initial_cloud(const ParticleMeasure& mu, int N) { return cloud_from_index(mu, atom_index(mu, N)); }

FbsdeSolution solve_frozen(const Model& model, const MeasureFlow& flow, const Eigen::MatrixXd& Y0,
                           const SolverParams& params, std::shared_ptr<const BrownianIncrements> dB,
                           const FbsdeSolution* warm) {
  const TimeGrid& grid = flow.grid;
  const int n = model.n(), d = model.d(), N = static_cast<int>(Y0.cols()), K = grid.K;
  require_dim(Y0.rows() == n, "solve_frozen: initial cloud dimension differs from model");
  require_dim(flow.dim() == n, "solve_frozen: flow dimension differs from model");
  if (!dB || dB->particles() != N || dB->steps() != K || dB->dim() != n)
    throw DimensionError("solve_frozen: Brownian increments do not match (N, K, n)");

  FbsdeSolution sol;
  sol.grid = grid;
  sol.n = n;
  sol.d = d;
  sol.N = N;
  sol.dB = std::move(dB);
  sol.Y.assign(K + 1, Eigen::MatrixXd::Zero(n, N));
  sol.p.assign(K + 1, Eigen::MatrixXd::Zero(n, N));
  sol.q.assign(K + 1, Eigen::MatrixXd::Zero(n * n, N));
  sol.v.assign(K + 1, Eigen::MatrixXd::Zero(d, N));
  sol.Y[0] = Y0;
  sol.reg.resize(K);
  sol.law_p.resize(K);
  sol.law_q.resize(K);

  const auto nodes = make_nodes(model, flow);
  const bool have_warm = warm && warm->grid.K == K && warm->n == n && static_cast<int>(warm->reg.size()) == K;
  if (have_warm) {
    sol.reg = warm->reg;
    sol.law_p = warm->law_p;
    sol.law_q = warm->law_q;
  }
  std::vector<Eigen::MatrixXd> used(K, Eigen::MatrixXd::Zero(d, N));
  forward_pass(model, nodes, sol, have_warm, params.newton, used);
  backward_pass(model, nodes, sol, params.basis_degree, params.newton);

  auto prevY = sol.Y;
  auto prevP = sol.p;
  double relax = 1.0;
  for (int sweep = 1; sweep <= params.max_sweeps; ++sweep) {
    forward_pass(model, nodes, sol, true, params.newton, used, relax);
    backward_pass(model, nodes, sol, params.basis_degree, params.newton);
    sol.sweeps = sweep;
    if (!finite(sol.Y) || !finite(sol.p)) throw PicardDivergence("solve_frozen: non-finite iterate; " + trace_text(sol.sweep_trace));
    const double change = std::max(sup_change(sol.Y, prevY), sup_change(sol.p, prevP));
    sol.sweep_trace.push_back(change);
    sol.last_change = change;
    if (std::max(sup_abs(sol.Y), sup_abs(sol.p)) > 1e8)
      throw PicardDivergence("solve_frozen: iterates exceed 1e8; " + trace_text(sol.sweep_trace));
    if (change <= params.sweep_tol) return sol;
    // Oscillating or stagnating sweeps: relax the control update.
    if (sol.sweep_trace.size() >= 2 && change > 0.9 * sol.sweep_trace[sol.sweep_trace.size() - 2])
      relax = std::max(relax * 0.5, 1.0 / 64.0);
    prevY = sol.Y;
    prevP = sol.p;
  }
  throw PicardDivergence("solve_frozen: no convergence in " + std::to_string(params.max_sweeps) + " sweeps; " +
                         trace_text(sol.sweep_trace));
}

namespace {

MeasureFlow constant_flow(const TimeGrid& grid, const Eigen::MatrixXd& Y0) {
  return MeasureFlow::from_clouds(grid, std::vector<Eigen::MatrixXd>(grid.K + 1, Y0));
}

double flow_distance(const std::vector<Eigen::MatrixXd>& a, const std::vector<Eigen::MatrixXd>& b) {
  double out = 0.0;
  for (std::size_t k = 0; k < a.size(); ++k) {
    double d;
    if (a[k].rows() == 1) {
      d = w2_distance(ParticleMeasure(a[k]), ParticleMeasure(b[k]));
    } else {
      // Synchronous coupling: an upper bound on W2 that vanishes at the fixed point.
      d = std::sqrt((a[k] - b[k]).colwise().squaredNorm().mean());
    }
    out = std::max(out, d);
  }
  return out;
}

struct FlowAttempt {
  bool ok = false;
  FbsdeSolution sol;
  MeasureFlow flow;
  int iterations = 0;
  std::vector<double> trace;
};

FlowAttempt flow_iteration(const Model& model, const TimeGrid& grid, const Eigen::MatrixXd& Y0, const SolverParams& params,
                           const std::shared_ptr<const BrownianIncrements>& dB, MeasureFlow start,
                           const FbsdeSolution* warm) {
  FlowAttempt at;
  at.flow = std::move(start);
  try {
    at.sol = solve_frozen(model, at.flow, Y0, params, dB, warm);
    if (!model.dynamics_coupled()) {
      at.flow = MeasureFlow::from_clouds(grid, at.sol.Y);
      at.ok = true;
      return at;
    }
    for (int it = 1; it <= params.max_flow_iter; ++it) {
      at.iterations = it;
      const double dist = flow_distance(at.sol.Y, at.flow.clouds);
      at.trace.push_back(dist);
      if (!std::isfinite(dist)) return at;
      if (dist <= params.flow_tol) {
        at.ok = true;
        return at;
      }
      const double th = it == 1 ? 1.0 : params.theta;
      std::vector<Eigen::MatrixXd> mixed(grid.K + 1);
      for (int k = 0; k <= grid.K; ++k) mixed[k] = th * at.sol.Y[k] + (1.0 - th) * at.flow.clouds[k];
      at.flow = MeasureFlow::from_clouds(grid, std::move(mixed));
      // Far from the fixed point the inner solve only needs to resolve the flow update.
      SolverParams inner = params;
      inner.sweep_tol = std::max(params.sweep_tol, 1e-3 * dist);
      FbsdeSolution next = solve_frozen(model, at.flow, Y0, inner, dB, &at.sol);
      next.sweeps += at.sol.sweeps;
      at.sol = std::move(next);
    }
  } catch (const PicardDivergence&) {
    at.ok = false;
  }
  return at;
}

}  // namespace

MfgResult solve_mfg_cloud(const Model& model, const TimeGrid& grid, const Eigen::MatrixXd& Y0, const SolverParams& params) {
  if (params.N < 1 || params.basis_degree < 0 || !(params.theta > 0.0 && params.theta <= 1.0) || params.max_sweeps < 1 ||
      params.max_flow_iter < 1 || params.continuation_steps < 1)
    throw Error("SolverParams: values must be positive and theta in (0, 1]");
  const auto dB = std::make_shared<BrownianIncrements>(params.seed, static_cast<int>(Y0.cols()), grid.K, model.n(), grid.dt());

  FlowAttempt at = flow_iteration(model, grid, Y0, params, dB, constant_flow(grid, Y0), nullptr);
  bool continuation = false;
  if (!at.ok) {
    continuation = true;
    std::shared_ptr<const Model> base(&model, [](const Model*) {});
    MeasureFlow flow = constant_flow(grid, Y0);
    FbsdeSolution warm;
    bool have = false;
    std::vector<double> trace;
    for (int step = 1; step <= params.continuation_steps; ++step) {
      const double lam = static_cast<double>(step) / params.continuation_steps;
      ScaledCouplingModel scaled(base, lam);
      at = flow_iteration(scaled, grid, Y0, params, dB, flow, have ? &warm : nullptr);
      trace.insert(trace.end(), at.trace.begin(), at.trace.end());
      if (!at.ok) break;
      flow = at.flow;
      warm = at.sol;
      have = true;
    }
    at.trace = trace;
    if (!at.ok) {
      const auto& t = at.trace;
      const double nan = std::numeric_limits<double>::quiet_NaN();
      throw FlowDivergence("solve_mfg: flow fixed point failed after continuation", t.empty() ? nan : t.back(),
                           t.size() < 2 ? nan : t[t.size() - 2]);
    }
  }
  MfgResult res;
  res.solution = std::move(at.sol);
  res.flow = std::move(at.flow);
  res.flow_iterations = at.iterations;
  res.distance_trace = at.trace;
  res.flow_distance = at.trace.empty() ? 0.0 : at.trace.back();
  res.continuation_used = continuation;
  return res;
}

MfgResult solve_mfg(const Model& model, double t, const ParticleMeasure& mu, const TimeGrid& grid,
                    const SolverParams& params) {
  require_dim(mu.dim() == model.n(), "solve_mfg: measure dimension differs from model");
  if (std::abs(grid.t0 - t) > 1e-14 * (1.0 + std::abs(t))) throw Error("solve_mfg: grid must start at t");
  return solve_mfg_cloud(model, grid, initial_cloud(mu, params.N), params);
}

FbsdeSolution solve_control(const Model& model, double t, const Vec& x, const MeasureFlow& flow, const TimeGrid& grid,
                            const SolverParams& params) {
  require_dim(x.size() == model.n(), "solve_control: x dimension differs from model");
  if (flow.grid.K != grid.K || std::abs(flow.grid.t0 - grid.t0) > 1e-14 || std::abs(grid.t0 - t) > 1e-14 * (1.0 + std::abs(t)))
    throw Error("solve_control: flow grid must match the grid starting at t");
  const Eigen::MatrixXd Y0 = Eigen::VectorXd(x).replicate(1, params.N);
  return solve_frozen(model, flow, Y0, params, brownian_for(params, grid, model.n()));
}

double bsde_residual(const Model& model, const FbsdeSolution& sol, const MeasureFlow& flow) {
  const auto nodes = make_nodes(model, flow);
  const double dt = sol.grid.dt();
  const int n = sol.n;
  double worst = 0.0;
  for (int k = 0; k < sol.grid.K; ++k) {
    Eigen::MatrixXd r = sol.p[k + 1] - sol.p[k];
    const auto& dB = sol.dB->at(k);
    for (int i = 0; i < sol.N; ++i) {
      const Vec y = sol.Y[k].col(i);
      const Vec p = sol.p[k].col(i);
      const Mat q = sol.qat(k, i);
      const RunningCost rc = model.running(nodes[k].s, y, *nodes[k].m, Vec(sol.v[k].col(i)));
      Vec ri = r.col(i) + dt * hamiltonian_gradient_x(nodes[k].c, rc, p, q);
      for (int j = 0; j < n; ++j) ri -= q.col(j) * dB(j, i);
      r.col(i) = ri;
    }
    const Regressor R = sol.reg[k].samples() == sol.N ? sol.reg[k] : Regressor(sol.Y[k], 2);
    worst = std::max(worst, R.project(r).colwise().norm().maxCoeff());
  }
  return worst;
}

double stability_probe(const Model& model, double t, const ParticleMeasure& mu, const ParticleMeasure& mu2,
                       const TimeGrid& grid, const SolverParams& params) {
  require_dim(mu.dim() == mu2.dim() && mu.size() == mu2.size(), "stability_probe: measures must be coupled atom-by-atom");
  double den = 0.0;
  for (int i = 0; i < mu.size(); ++i) den += (mu2.points().col(i) - mu.points().col(i)).squaredNorm();
  den /= mu.size();
  if (den == 0.0) return 0.0;
  if (std::abs(grid.t0 - t) > 1e-14 * (1.0 + std::abs(t))) throw Error("stability_probe: grid must start at t");
  const auto idx = atom_index(mu, params.N);
  const MfgResult a = solve_mfg_cloud(model, grid, cloud_from_index(mu, idx), params);
  const MfgResult b = solve_mfg_cloud(model, grid, cloud_from_index(mu2, idx), params);
  double num = 0.0;
  for (int k = 0; k <= grid.K; ++k) {
    const double e = (b.solution.Y[k] - a.solution.Y[k]).colwise().squaredNorm().mean() +
                     (b.solution.p[k] - a.solution.p[k]).colwise().squaredNorm().mean();
    num = std::max(num, e);
  }
  return num / den;
}

double max_optimality_residual(const Model& model, const FbsdeSolution& sol, const MeasureFlow& flow) {
  const auto nodes = make_nodes(model, flow);
  double worst = 0.0;
  for (int k = 0; k <= sol.grid.K; ++k)
    for (int i = 0; i < sol.N; ++i) {
      const Vec y = sol.Y[k].col(i);
      const RunningCost rc = model.running(nodes[k].s, y, *nodes[k].m, Vec(sol.v[k].col(i)));
      worst = std::max(worst, lagrangian_gradient_v(nodes[k].c, rc, Vec(sol.p[k].col(i)), sol.qat(k, i)).norm());
    }
  return worst;
}

double cost_martingale(const Model& model, const FbsdeSolution& sol, const MeasureFlow& flow, int k_end) {
  if (!sol.dB) return 0.0;
  double mart = 0.0;
  for (int k = 0; k < k_end; ++k) {
    const auto c = model.coefficients(sol.grid.node(k), flow.feats[k]);
    const auto& dB = sol.dB->at(k);
    for (int i = 0; i < sol.N; ++i) {
      const Vec y = sol.Y[k].col(i), v = sol.v[k].col(i), p = sol.p[k].col(i);
      for (int j = 0; j < sol.n; ++j) mart += p.dot(c.diffusion(j, y, v)) * dB(j, i);
    }
  }
  return mart / sol.N;
}

double expected_cost(const Model& model, const FbsdeSolution& sol, const MeasureFlow& flow) {
  const int K = sol.grid.K;
  const double dt = sol.grid.dt();
  double acc = 0.0;
  for (int k = 0; k <= K; ++k) {
    const double w = (k == 0 || k == K) ? 0.5 * dt : dt;
    const double s = sol.grid.node(k);
    double fk = 0.0;
    for (int i = 0; i < sol.N; ++i) fk += model.running(s, Vec(sol.Y[k].col(i)), flow.feats[k], Vec(sol.v[k].col(i))).f;
    acc += w * fk / sol.N;
  }
  double g = 0.0;
  for (int i = 0; i < sol.N; ++i) g += model.terminal(Vec(sol.Y[K].col(i)), flow.feats[K]).g;
  return acc + g / sol.N - cost_martingale(model, sol, flow, K);
}

void write_solution_csv(std::ostream& os, const FbsdeSolution& sol, const std::string& kind, int max_particles) {
  const int n = sol.n, d = sol.d;
  const int M = max_particles < 0 ? sol.N : std::min(sol.N, max_particles);
  os.precision(17);
  os << "flow_kind,node,particle";
  for (int r = 0; r < n; ++r) os << ",Y" << r;
  for (int r = 0; r < n; ++r) os << ",p" << r;
  for (int j = 0; j < n; ++j)
    for (int r = 0; r < n; ++r) os << ",q" << r << "_" << j;
  for (int r = 0; r < d; ++r) os << ",v" << r;
  os << '\n';
  for (int k = 0; k <= sol.grid.K; ++k)
    for (int i = 0; i < M; ++i) {
      os << kind << ',' << k << ',' << i;
      for (int r = 0; r < n; ++r) os << ',' << sol.Y[k](r, i);
      for (int r = 0; r < n; ++r) os << ',' << sol.p[k](r, i);
      for (int r = 0; r < n * n; ++r) os << ',' << sol.q[k](r, i);
      for (int r = 0; r < d; ++r) os << ',' << sol.v[k](r, i);
      os << '\n';
    }
}

}  // namespace mfg
