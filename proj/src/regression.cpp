#include "mfg/regression.hpp"

#include <cmath>

namespace mfg {

namespace {

void monomials(int vars, int degree, std::vector<int>& cur, int start_var, int remaining,
               std::vector<std::vector<int>>& out) {
  out.push_back(cur);
  if (remaining == 0) return;
  for (int v = start_var; v < vars; ++v) {
    ++cur[v];
    monomials(vars, degree, cur, v, remaining - 1, out);
    --cur[v];
  }
}

}  // namespace

Regressor::Regressor(const Eigen::MatrixXd& Y, int degree) {
  if (degree < 0) throw Error("Regressor: degree must be >= 0");
  const int n = static_cast<int>(Y.rows());
  const int N = static_cast<int>(Y.cols());
  if (N < 1) throw Error("Regressor: no samples");
  center_ = Y.rowwise().mean();
  scale_ = Vec::Ones(n);
  for (int r = 0; r < n; ++r) {
    const double sd = std::sqrt((Y.row(r).array() - center_(r)).square().mean());
    if (sd > 1e-12 * (1.0 + std::abs(center_(r)))) {
      scale_(r) = sd;
      active_.push_back(r);
    }
  }
  std::vector<int> cur(active_.size(), 0);
  monomials(static_cast<int>(active_.size()), degree, cur, 0, degree, exponents_);
  const int nb = size();
  phi_.resize(nb, N);
  for (int i = 0; i < N; ++i) phi_.col(i) = basis(Y.col(i));
  const Eigen::MatrixXd gram = phi_ * phi_.transpose() / N;
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(gram);
  const Eigen::VectorXd ev = es.eigenvalues();
  const double cut = 1e-10 * ev.cwiseAbs().maxCoeff();
  Eigen::VectorXd inv = Eigen::VectorXd::Zero(nb);
  for (int b = 0; b < nb; ++b)
    if (ev(b) > cut) inv(b) = 1.0 / ev(b);
  ginv_ = es.eigenvectors() * inv.asDiagonal() * es.eigenvectors().transpose();
}

Eigen::VectorXd Regressor::basis(const Vec& y) const {
  Eigen::VectorXd out;
  basis(y, out);
  return out;
}

void Regressor::basis(const Vec& y, Eigen::VectorXd& out) const {
  const int na = static_cast<int>(active_.size());
  double z[kMaxDim];
  for (int a = 0; a < na; ++a) z[a] = (y(active_[a]) - center_(active_[a])) / scale_(active_[a]);
  out.resize(static_cast<Eigen::Index>(exponents_.size()));
  for (std::size_t b = 0; b < exponents_.size(); ++b) {
    double v = 1.0;
    for (int a = 0; a < na; ++a)
      for (int e = 0; e < exponents_[b][a]; ++e) v *= z[a];
    out(b) = v;
  }
}

Eigen::MatrixXd Regressor::fit(const Eigen::MatrixXd& targets) const {
  return (targets * phi_.transpose() / static_cast<double>(samples())) * ginv_;
}

}  // namespace mfg
