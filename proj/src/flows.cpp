#include "mfg/flows.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <ostream>

namespace mfg {

namespace {

using CMap = Eigen::Map<const Eigen::MatrixXd>;
using MMap = Eigen::Map<Eigen::MatrixXd>;

constexpr int kMaxInner = 200;
constexpr int kMaxSelf = 500;
constexpr double kInnerTol = 1e-14;
constexpr double kSelfTol = 1e-13;
constexpr double kStallTol = 1e-9;
constexpr int kHessianDegree = 4;

// Inner fixed points stop at the tolerance, or once they stall at the rounding floor of
// the regression.
struct InnerStop {
  double previous = std::numeric_limits<double>::infinity();
  bool operator()(double change, double scale) {
    const bool done = change <= kInnerTol * scale || (change <= kStallTol * scale && change >= 0.5 * previous);
    previous = change;
    return done;
  }
};

CMap block(const Eigen::MatrixXd& M, int i, int offset, int rows, int cols) {
  return CMap(M.col(i).data() + offset, rows, cols);
}
MMap block(Eigen::MatrixXd& M, int i, int offset, int rows, int cols) {
  return MMap(M.col(i).data() + offset, rows, cols);
}

void check_finite(const Eigen::MatrixXd& M, const char* what) {
  if (!M.allFinite()) throw PicardDivergence(std::string("non-finite values in ") + what);
}

}  // namespace

Eigen::MatrixXd LinearFlow::meanY(int k) const {
  const Eigen::VectorXd m = Y[k].rowwise().mean();
  return CMap(m.data(), n, ncol);
}

Eigen::MatrixXd LinearFlow::meanP(int k) const {
  const Eigen::VectorXd m = p[k].rowwise().mean();
  return CMap(m.data(), n, ncol);
}

double LinearFlow::sup_norm() const {
  double s = 0.0;
  for (std::size_t k = 0; k < Y.size(); ++k) s = std::max({s, Y[k].cwiseAbs().maxCoeff(), p[k].cwiseAbs().maxCoeff()});
  return s;
}

LinearFlow combine(double a, const LinearFlow& x, double b, const LinearFlow& y) {
  if (x.Y.size() != y.Y.size() || x.N != y.N || x.ncol != y.ncol || x.n != y.n)
    throw DimensionError("combine: flows of different shape");
  LinearFlow r = x;
  for (std::size_t k = 0; k < x.Y.size(); ++k) {
    r.Y[k] = a * x.Y[k] + b * y.Y[k];
    r.p[k] = a * x.p[k] + b * y.p[k];
    r.q[k] = a * x.q[k] + b * y.q[k];
    r.v[k] = a * x.v[k] + b * y.v[k];
  }
  return r;
}

SourceStats SourceStats::zeros(int K, int n, int ncol) {
  SourceStats s;
  s.mean.assign(K + 1, Eigen::MatrixXd::Zero(n, ncol));
  s.cross.assign(K + 1, Eigen::RowVectorXd::Zero(ncol));
  return s;
}

SourceStats& SourceStats::operator+=(const SourceStats& o) {
  if (o.mean.size() != mean.size()) throw DimensionError("SourceStats: node count mismatch");
  for (std::size_t k = 0; k < mean.size(); ++k) {
    mean[k] += o.mean[k];
    cross[k] += o.cross[k];
  }
  return *this;
}

double SourceStats::sup_norm() const {
  double s = 0.0;
  for (std::size_t k = 0; k < mean.size(); ++k)
    s = std::max({s, mean[k].cwiseAbs().maxCoeff(), cross[k].cwiseAbs().maxCoeff()});
  return s;
}

SourceStats flow_stats(const std::vector<Eigen::MatrixXd>& Y, const LinearFlow& dY) {
  const int K = static_cast<int>(dY.Y.size()) - 1;
  const int n = dY.n, nc = dY.ncol;
  if (static_cast<int>(Y.size()) != K + 1 || Y[0].cols() != dY.N) throw DimensionError("flow_stats: base mismatch");
  auto s = SourceStats::zeros(K, n, nc);
  for (int k = 0; k <= K; ++k) {
    const Eigen::VectorXd m = dY.Y[k].rowwise().mean();
    s.mean[k] = CMap(m.data(), n, nc);
    for (int c = 0; c < nc; ++c)
      s.cross[k](c) = (Y[k].cwiseProduct(dY.Y[k].middleRows(c * n, n))).sum() / dY.N;
  }
  return s;
}

SourceStats quadratic_stats(const std::vector<Eigen::MatrixXd>& Y, const LinearFlow& D1, const LinearFlow& D2) {
  require_dim(D1.n == 1 && D1.ncol == 1 && D2.n == 1 && D2.ncol == 1, "quadratic_stats needs n = 1");
  auto s = flow_stats(Y, D2);
  for (std::size_t k = 0; k < s.cross.size(); ++k) s.cross[k](0) += D1.Y[k].squaredNorm() / D1.N;
  return s;
}

Linearization::Linearization(const Model& model, const FbsdeSolution& base, const MeasureFlow& flow)
    : model_(&model), base_(&base), flow_(&flow), n_(base.n), d_(base.d), N_(base.N), K_(base.grid.K),
      dt_(base.grid.dt()) {
  require_dim(model.n() == n_ && model.d() == d_, "Linearization: model and base dimensions differ");
  require_dim(flow.grid.K == K_, "Linearization: flow and base grids differ");
  const int n = n_, d = d_;
  int r = 0;
  auto take = [&r](int rows) { const int o = r; r += rows; return o; };
  off_.Vx = take(d * n);
  off_.Vp = take(d * n);
  off_.Vq = take(n * d * n);
  off_.fxx = take(n * n);
  off_.fxv = take(n * d);
  off_.fxm = take(n * n);
  off_.fxm2 = take(n);
  off_.dvm = take(d * n);
  off_.dvm2 = take(d);
  off_.f3 = take(5);  // fxxx, fxxv, fxvv, fvvv, 1/fvv (1D only)
  off_.rows = r;

  nodes_.reserve(K_ + 1);
  coef_.assign(K_ + 1, Eigen::MatrixXd::Zero(off_.rows, N_));
  for (int k = 0; k <= K_; ++k) {
    const double s = base.grid.node(k);
    const auto& m = flow.feats[k];
    nodes_.push_back(model.coefficients(s, m));
    const auto& c = nodes_.back();
    auto& C = coef_[k];
    for (int i = 0; i < N_; ++i) {
      const Vec y = base.Y[k].col(i), v = base.v[k].col(i);
      const auto rc = model.running(s, y, m, v);
      block(C, i, off_.fxx, n, n) = rc.fxx;
      block(C, i, off_.fxv, n, d) = rc.fxv;
      block(C, i, off_.fxm, n, n) = rc.fx_mean;
      block(C, i, off_.fxm2, n, 1) = rc.fx_m2;
      if (!rc.fvv.isZero(0.0)) {
        const auto vd = vhat_derivatives(c, rc);
        block(C, i, off_.Vx, d, n) = vd.dx;
        block(C, i, off_.Vp, d, n) = vd.dp;
        for (int j = 0; j < n; ++j) block(C, i, off_.Vq + j * d * n, d, n) = vd.dq[j];
        block(C, i, off_.dvm, d, n) = vd.dmean;
        block(C, i, off_.dvm2, d, 1) = vd.dm2;
        if (d == 1) C(off_.f3 + 4, i) = 1.0 / rc.fvv(0, 0);
      }
      C(off_.f3 + 0, i) = rc.fxxx;
      C(off_.f3 + 1, i) = rc.fxxv;
      C(off_.f3 + 2, i) = rc.fxvv;
      C(off_.f3 + 3, i) = rc.fvvv;
    }
  }

  gxx_.resize(n * n, N_);
  gxm_.resize(n * n, N_);
  gxm2_.resize(n, N_);
  gxxx_.resize(N_);
  for (int i = 0; i < N_; ++i) {
    const auto tc = model.terminal(base.Y[K_].col(i), flow.feats[K_]);
    block(gxx_, i, 0, n, n) = tc.gxx;
    block(gxm_, i, 0, n, n) = tc.gx_mean;
    block(gxm2_, i, 0, n, 1) = tc.gx_m2;
    gxxx_(i) = tc.gxxx;
  }

  // Homogeneous decoupling field, node by node backwards.
  A_.assign(K_ + 1, Eigen::MatrixXd());
  Q_.assign(K_, Eigen::MatrixXd());
  G_.assign(K_, Eigen::MatrixXd());
  A_[K_] = gxx_;
  const Mat I = Mat::Identity(n, n);
  Eigen::MatrixXd M(n * n, N_), T(n * n * n, N_);
  for (int k = K_ - 1; k >= 0; --k) {
    const auto& c = nodes_[k];
    const auto& C = coef_[k];
    const auto& R = base.reg[k];
    const auto& dB = base.dB->at(k);
    Eigen::MatrixXd Ak = A_[k + 1], Qk = Eigen::MatrixXd::Zero(n * n * n, N_), G(n * n, N_);
    bool converged = false;
    InnerStop stop;
    for (int it = 0; it < kMaxInner && !converged; ++it) {
      for (int i = 0; i < N_; ++i) {
        Mat W = block(C, i, off_.Vx, d, n) + block(C, i, off_.Vp, d, n) * block(Ak, i, 0, n, n);
        for (int j = 0; j < n; ++j) W += block(C, i, off_.Vq + j * d * n, d, n) * block(Qk, i, j * n * n, n, n);
        Mat Gi = I + dt_ * (c.b1 + c.b2 * W);
        for (int j = 0; j < n; ++j) Gi += (c.s1[j] + c.s2[j] * W) * dB(j, i);
        block(G, i, 0, n, n) = Gi;
        block(M, i, 0, n, n) = block(A_[k + 1], i, 0, n, n) * Gi;
      }
      const Eigen::MatrixXd Ahat = R.project(M);
      const Eigen::MatrixXd res = M - Ahat;
      for (int j = 0; j < n; ++j) T.middleRows(j * n * n, n * n) = res.array().rowwise() * dB.row(j).array();
      const Eigen::MatrixXd Qn = R.project(T) / dt_;
      Eigen::MatrixXd An(n * n, N_);
      for (int i = 0; i < N_; ++i) {
        const Mat Ah = block(Ahat, i, 0, n, n);
        Mat W = block(C, i, off_.Vx, d, n) + block(C, i, off_.Vp, d, n) * Ah;
        Mat dH = c.b1.transpose() * Ah + block(C, i, off_.fxx, n, n);
        for (int j = 0; j < n; ++j) {
          const Mat Qj = block(Qn, i, j * n * n, n, n);
          W += block(C, i, off_.Vq + j * d * n, d, n) * Qj;
          dH += c.s1[j].transpose() * Qj;
        }
        dH += block(C, i, off_.fxv, n, d) * W;
        block(An, i, 0, n, n) = Ah + dt_ * dH;
      }
      check_finite(An, "decoupling field");
      const double change = std::max((An - Ak).cwiseAbs().maxCoeff(), (Qn - Qk).cwiseAbs().maxCoeff());
      converged = stop(change, 1.0 + An.cwiseAbs().maxCoeff() + Qn.cwiseAbs().maxCoeff());
      Ak = An;
      Qk = Qn;
      G_[k] = G;
    }
    if (!converged) throw PicardDivergence("decoupling field did not converge at node " + std::to_string(k));
    A_[k] = std::move(Ak);
    Q_[k] = std::move(Qk);
  }
}

LinearFlow Linearization::affine(const Eigen::MatrixXd& init, int ncol, const SourceStats& S, const RawSources* raw,
                                 const std::vector<Regressor>* regs, const std::string& kind) const {
  const int n = n_, d = d_, N = N_, K = K_;
  const int nn = n * n;
  require_dim(init.rows() == n * ncol && init.cols() == N, "initial value must be (n ncol) x N");

  auto sv_at = [&](int k, int i, int c) -> Vec {
    const auto& C = coef_[k];
    Vec s = block(C, i, off_.dvm, d, n) * S.mean[k].col(c) + 2.0 * S.cross[k](c) * block(C, i, off_.dvm2, d, 1);
    if (raw) s += raw->sv[k].col(i);
    return s;
  };

  // Backward: affine parts c (n ncol), cq (n^2 ncol), forward increments h (n ncol).
  std::vector<Eigen::MatrixXd> cs(K + 1), cqs(K), hs(K);
  cs[K].resize(n * ncol, N);
  for (int i = 0; i < N; ++i)
    for (int c = 0; c < ncol; ++c) {
      Vec g = block(gxm_, i, 0, n, n) * S.mean[K].col(c) + 2.0 * S.cross[K](c) * gxm2_.col(i);
      if (raw) g += raw->sg.col(i);
      cs[K].block(c * n, i, n, 1) = g;
    }

  Eigen::MatrixXd Mm(n * ncol, N), T(nn * ncol, N), H(n * ncol, N);
  for (int k = K - 1; k >= 0; --k) {
    const auto& cf = nodes_[k];
    const auto& C = coef_[k];
    const auto& R = regs ? (*regs)[k] : base_->reg[k];
    const auto& dB = base_->dB->at(k);
    std::vector<Vec> sb(ncol);
    std::vector<std::vector<Vec>> ss(ncol, std::vector<Vec>(n));
    for (int c = 0; c < ncol; ++c) {
      sb[c] = cf.b0_mean * S.mean[k].col(c) + 2.0 * S.cross[k](c) * cf.b0_m2;
      for (int j = 0; j < n; ++j) ss[c][j] = cf.s0_mean[j] * S.mean[k].col(c) + 2.0 * S.cross[k](c) * cf.s0_m2[j];
    }
    Eigen::MatrixXd ck = cs[k + 1], cq = Eigen::MatrixXd::Zero(nn * ncol, N);
    bool converged = false;
    InnerStop stop;
    for (int it = 0; it < kMaxInner && !converged; ++it) {
      for (int i = 0; i < N; ++i) {
        const auto A1 = block(A_[k + 1], i, 0, n, n);
        for (int c = 0; c < ncol; ++c) {
          Vec w = block(C, i, off_.Vp, d, n) * ck.block(c * n, i, n, 1) + sv_at(k, i, c);
          for (int j = 0; j < n; ++j)
            w += block(C, i, off_.Vq + j * d * n, d, n) * cq.block(c * nn + j * n, i, n, 1);
          Vec h = dt_ * (sb[c] + cf.b2 * w);
          for (int j = 0; j < n; ++j) h += (ss[c][j] + cf.s2[j] * w) * dB(j, i);
          H.block(c * n, i, n, 1) = h;
          Mm.block(c * n, i, n, 1) = A1 * h + cs[k + 1].block(c * n, i, n, 1);
        }
      }
      const Eigen::MatrixXd chat = R.project(Mm);
      const Eigen::MatrixXd res = Mm - chat;
      for (int c = 0; c < ncol; ++c)
        for (int j = 0; j < n; ++j)
          T.middleRows(c * nn + j * n, n) = res.middleRows(c * n, n).array().rowwise() * dB.row(j).array();
      const Eigen::MatrixXd cqn = R.project(T) / dt_;
      Eigen::MatrixXd cn(n * ncol, N);
      for (int i = 0; i < N; ++i)
        for (int c = 0; c < ncol; ++c) {
          const Vec ch = chat.block(c * n, i, n, 1);
          Vec w = block(C, i, off_.Vp, d, n) * ch + sv_at(k, i, c);
          Vec dH = cf.b1.transpose() * ch + block(C, i, off_.fxm, n, n) * S.mean[k].col(c) +
                   2.0 * S.cross[k](c) * block(C, i, off_.fxm2, n, 1);
          if (raw) dH += raw->sf[k].col(i);
          for (int j = 0; j < n; ++j) {
            const Vec qj = cqn.block(c * nn + j * n, i, n, 1);
            w += block(C, i, off_.Vq + j * d * n, d, n) * qj;
            dH += cf.s1[j].transpose() * qj;
          }
          dH += block(C, i, off_.fxv, n, d) * w;
          cn.block(c * n, i, n, 1) = ch + dt_ * dH;
        }
      check_finite(cn, kind.c_str());
      const double change = std::max((cn - ck).cwiseAbs().maxCoeff(), (cqn - cq).cwiseAbs().maxCoeff());
      converged = stop(change, 1.0 + cn.cwiseAbs().maxCoeff() + cqn.cwiseAbs().maxCoeff());
      ck = cn;
      cq = cqn;
      hs[k] = H;
    }
    if (!converged) throw PicardDivergence(kind + ": affine part did not converge at node " + std::to_string(k));
    cs[k] = std::move(ck);
    cqs[k] = std::move(cq);
  }

  LinearFlow f;
  f.kind = kind;
  f.grid = base_->grid;
  f.n = n;
  f.d = d;
  f.N = N;
  f.ncol = ncol;
  f.Y.assign(K + 1, Eigen::MatrixXd(n * ncol, N));
  f.p.assign(K + 1, Eigen::MatrixXd(n * ncol, N));
  f.q.assign(K + 1, Eigen::MatrixXd(nn * ncol, N));
  f.v.assign(K + 1, Eigen::MatrixXd(d * ncol, N));
  f.Y[0] = init;
  for (int k = 0; k <= K; ++k) {
    const auto& C = coef_[k];
    for (int i = 0; i < N; ++i) {
      const auto Ak = block(A_[k], i, 0, n, n);
      for (int c = 0; c < ncol; ++c) {
        const Vec y = f.Y[k].block(c * n, i, n, 1);
        const Vec pk = Ak * y + cs[k].block(c * n, i, n, 1);
        f.p[k].block(c * n, i, n, 1) = pk;
        if (k < K)
          for (int j = 0; j < n; ++j)
            f.q[k].block(c * nn + j * n, i, n, 1) =
                block(Q_[k], i, j * nn, n, n) * y + cqs[k].block(c * nn + j * n, i, n, 1);
        else
          f.q[K].block(c * nn, i, nn, 1) = f.q[K - 1].block(c * nn, i, nn, 1);
        Vec w = block(C, i, off_.Vx, d, n) * y + block(C, i, off_.Vp, d, n) * pk + sv_at(k, i, c);
        for (int j = 0; j < n; ++j)
          w += block(C, i, off_.Vq + j * d * n, d, n) * f.q[k].block(c * nn + j * n, i, n, 1);
        f.v[k].block(c * d, i, d, 1) = w;
        if (k < K)
          f.Y[k + 1].block(c * n, i, n, 1) = block(G_[k], i, 0, n, n) * y + hs[k].block(c * n, i, n, 1);
      }
    }
  }
  return f;
}

LinearFlow Linearization::propagate(const Eigen::MatrixXd& init, int ncol, const std::string& kind) const {
  return affine(init, ncol, SourceStats::zeros(K_, n_, ncol), nullptr, nullptr, kind);
}

LinearFlow Linearization::solve(const Eigen::MatrixXd& init, int ncol, const SourceStats& ext, bool self_coupled,
                                const std::string& kind, const RawSources* raw,
                                const std::vector<Regressor>* regs) const {
  last_self_iterations_ = 0;
  if (!self_coupled) return affine(init, ncol, ext, raw, regs, kind);
  // Anderson-accelerated fixed point on the packed statistics.
  const int per = (n_ + 1) * ncol;
  const int dim = (K_ + 1) * per;
  auto pack = [&](const SourceStats& s) {
    Eigen::VectorXd x(dim);
    for (int k = 0; k <= K_; ++k) {
      x.segment(k * per, n_ * ncol) = CMap(s.mean[k].data(), n_ * ncol, 1);
      x.segment(k * per + n_ * ncol, ncol) = s.cross[k].transpose();
    }
    return x;
  };
  auto unpack = [&](const Eigen::VectorXd& x) {
    auto s = SourceStats::zeros(K_, n_, ncol);
    for (int k = 0; k <= K_; ++k) {
      s.mean[k] = CMap(x.data() + k * per, n_, ncol);
      s.cross[k] = x.segment(k * per + n_ * ncol, ncol).transpose();
    }
    return s;
  };
  constexpr int kMemory = 5;
  std::vector<Eigen::VectorXd> dF, dG;
  Eigen::VectorXd x = Eigen::VectorXd::Zero(dim), f_prev, g_prev;
  for (int it = 1; it <= kMaxSelf; ++it) {
    auto total = ext;
    total += unpack(x);
    auto flow = affine(init, ncol, total, raw, regs, kind);
    const Eigen::VectorXd g = pack(flow_stats(base_->Y, flow));
    const Eigen::VectorXd f = g - x;
    const double change = f.cwiseAbs().maxCoeff();
    last_self_iterations_ = it;
    if (!std::isfinite(change) || change > 1e8) throw PicardDivergence(kind + ": measure terms diverged");
    if (change <= kSelfTol * (1.0 + g.cwiseAbs().maxCoeff())) return flow;
    if (it > 1) {
      dF.push_back(f - f_prev);
      dG.push_back(g - g_prev);
      if (static_cast<int>(dF.size()) > kMemory) {
        dF.erase(dF.begin());
        dG.erase(dG.begin());
      }
    }
    f_prev = f;
    g_prev = g;
    Eigen::VectorXd next = g;
    if (!dF.empty()) {
      Eigen::MatrixXd F(dim, dF.size()), Gm(dim, dG.size());
      for (std::size_t c = 0; c < dF.size(); ++c) {
        F.col(c) = dF[c];
        Gm.col(c) = dG[c];
      }
      const Eigen::VectorXd gamma = F.completeOrthogonalDecomposition().solve(f);
      next = g - Gm * gamma;
    }
    x = next;
  }
  throw PicardDivergence(kind + ": measure terms did not converge");
}

LinearFlow solve_jacobian_x(const Linearization& lin) {
  const int n = lin.base().n, N = lin.base().N;
  Eigen::MatrixXd init(n * n, N);
  const Eigen::MatrixXd I = Eigen::MatrixXd::Identity(n, n);
  for (int i = 0; i < N; ++i) init.col(i) = CMap(I.data(), n * n, 1);
  return lin.propagate(init, n, "FB:x");
}

LinearFlow solve_directional(const Linearization& lin_mfg, const Eigen::MatrixXd& eta) {
  const int K = lin_mfg.base().grid.K, n = lin_mfg.base().n;
  return lin_mfg.solve(eta, 1, SourceStats::zeros(K, n, 1), true, "FB:dr");
}

Decomposition decompose_directional(const Linearization& lin_mfg, const Eigen::MatrixXd& eta) {
  const auto& base = lin_mfg.base();
  Decomposition out;
  out.jacobian_part = lin_mfg.propagate(eta, 1, "FB:x.eta");
  out.measure_part = lin_mfg.solve(Eigen::MatrixXd::Zero(base.n, base.N), 1, flow_stats(base.Y, out.jacobian_part),
                                   true, "FB:dr'");
  return out;
}

ProbeData probe_data(const Model& model, const MeasureFlow& flow, const Vec& z, const SolverParams& params,
                     bool second_order) {
  ProbeData pd{z, solve_control(model, flow.grid.t0, z, flow, flow.grid, params), {}, std::nullopt};
  const Linearization lin(model, pd.control, flow);
  pd.jac = solve_jacobian_x(lin);
  if (second_order) pd.hess = solve_hessian_x(lin, pd.jac);
  return pd;
}

LfdKernel solve_lfd_kernel(const Linearization& lin_mfg, const Linearization& lin_ctrl, const ProbeData& probe,
                           bool second_order) {
  const auto& mb = lin_mfg.base();
  const auto& cb = lin_ctrl.base();
  const int n = mb.n;
  LfdKernel out;
  out.z = probe.z;
  const auto ext = flow_stats(probe.control.Y, probe.jac);
  out.xi = lin_mfg.solve(Eigen::MatrixXd::Zero(n * n, mb.N), n, ext, true, "FB:xi_y");
  auto ext_mu = ext;
  ext_mu += flow_stats(mb.Y, out.xi);
  out.mu = lin_ctrl.solve(Eigen::MatrixXd::Zero(n * n, cb.N), n, ext_mu, false, "FB:mu_y");
  out.mu_sources = std::move(ext_mu);
  if (second_order) {
    require_dim(n == 1 && mb.d == 1, "second-order kernels need n = d = 1");
    if (!probe.hess) throw Error("solve_lfd_kernel: probe has no second-order data");
    const auto q = quadratic_stats(probe.control.Y, probe.jac, *probe.hess);
    out.xi_z = lin_mfg.solve(Eigen::MatrixXd::Zero(1, mb.N), 1, q, true, "FB:xi_yy");
    auto q_mu = q;
    q_mu += flow_stats(mb.Y, *out.xi_z);
    out.mu_z = lin_ctrl.solve(Eigen::MatrixXd::Zero(1, cb.N), 1, q_mu, false, "FB:mu_yy");
    out.mu_z_sources = std::move(q_mu);
  }
  return out;
}

MeasureFlow tail(const MeasureFlow& flow, int k) {
  if (k < 0 || k >= flow.grid.K) throw Error("tail: node out of range");
  MeasureFlow out;
  out.grid = TimeGrid(flow.grid.node(k), flow.grid.T, flow.grid.K - k);
  out.clouds.assign(flow.clouds.begin() + k, flow.clouds.end());
  out.feats.assign(flow.feats.begin() + k, flow.feats.end());
  return out;
}

LinearFlow solve_hessian_x(const Linearization& lin, const LinearFlow& jac) {
  const auto& base = lin.base();
  require_dim(base.n == 1 && base.d == 1, "solve_hessian_x needs n = d = 1");
  const int K = base.grid.K, N = base.N;
  const auto& off = lin.offsets();
  Linearization::RawSources raw;
  raw.sf.assign(K + 1, Eigen::MatrixXd::Zero(1, N));
  raw.sv.assign(K + 1, Eigen::MatrixXd::Zero(1, N));
  raw.sg.resize(1, N);
  for (int k = 0; k <= K; ++k) {
    const auto& C = lin.coef(k);
    for (int i = 0; i < N; ++i) {
      const double a = jac.Y[k](0, i), b = jac.v[k](0, i);
      const double fxxx = C(off.f3, i), fxxv = C(off.f3 + 1, i), fxvv = C(off.f3 + 2, i), fvvv = C(off.f3 + 3, i);
      raw.sf[k](0, i) = fxxx * a * a + 2.0 * fxxv * a * b + fxvv * b * b;
      raw.sv[k](0, i) = -(fxxv * a * a + 2.0 * fxvv * a * b + fvvv * b * b) * C(off.f3 + 4, i);
    }
  }
  for (int i = 0; i < N; ++i) raw.sg(0, i) = lin.gxxx(i) * jac.Y[K](0, i) * jac.Y[K](0, i);
  // The affine part depends on the first-order path as well as the state.
  std::vector<Regressor> regs;
  regs.reserve(K);
  Eigen::MatrixXd stacked(2, N);
  for (int k = 0; k < K; ++k) {
    stacked.row(0) = base.Y[k];
    stacked.row(1) = jac.Y[k];
    regs.emplace_back(stacked, kHessianDegree);
  }
  return lin.solve(Eigen::MatrixXd::Zero(1, N), 1, SourceStats::zeros(K, 1, 1), false, "FB:xx", &raw, &regs);
}

void write_flow_csv(std::ostream& os, const LinearFlow& f, int max_particles) {
  const int n = f.n, d = f.d;
  const int M = max_particles < 0 ? f.N : std::min(f.N, max_particles);
  os.precision(17);
  os << "flow_kind,node,particle";
  for (int r = 0; r < n; ++r) os << ",Y" << r;
  for (int r = 0; r < n; ++r) os << ",p" << r;
  for (int j = 0; j < n; ++j)
    for (int r = 0; r < n; ++r) os << ",q" << r << "_" << j;
  for (int r = 0; r < d; ++r) os << ",v" << r;
  os << '\n';
  for (int c = 0; c < f.ncol; ++c)
    for (std::size_t k = 0; k < f.Y.size(); ++k)
      for (int i = 0; i < M; ++i) {
        os << f.kind << '/' << c << ',' << k << ',' << i;
        for (int r = 0; r < n; ++r) os << ',' << f.Y[k](c * n + r, i);
        for (int r = 0; r < n; ++r) os << ',' << f.p[k](c * n + r, i);
        for (int r = 0; r < n * n; ++r) os << ',' << f.q[k](c * n * n + r, i);
        for (int r = 0; r < d; ++r) os << ',' << f.v[k](c * d + r, i);
        os << '\n';
      }
}

}  // namespace mfg
