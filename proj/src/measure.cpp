#include "mfg/measure.hpp"

#include <algorithm>
#include <cmath>
#include <istream>
#include <limits>
#include <numeric>
#include <ostream>
#include <sstream>
#include <string>

namespace mfg {

ParticleMeasure::ParticleMeasure(Eigen::MatrixXd points) : points_(std::move(points)) {
  if (points_.rows() < 1 || points_.cols() < 1) throw DimensionError("ParticleMeasure needs n >= 1 and N >= 1");
  if (points_.rows() > kMaxDim) throw DimensionError("ParticleMeasure dimension exceeds kMaxDim");
  if (!points_.allFinite()) throw DimensionError("ParticleMeasure atoms must be finite");
}

ParticleMeasure ParticleMeasure::from_atoms(const std::vector<std::vector<double>>& atoms) {
  if (atoms.empty()) throw DimensionError("empty atom list");
  const auto n = atoms.front().size();
  Eigen::MatrixXd pts(static_cast<Eigen::Index>(n), static_cast<Eigen::Index>(atoms.size()));
  for (std::size_t i = 0; i < atoms.size(); ++i) {
    if (atoms[i].size() != n) throw DimensionError("atoms of unequal dimension");
    for (std::size_t r = 0; r < n; ++r) pts(r, i) = atoms[i][r];
  }
  return ParticleMeasure(std::move(pts));
}

ParticleMeasure ParticleMeasure::dirac(const Eigen::VectorXd& x) { return ParticleMeasure(Eigen::MatrixXd(x)); }

MeasureFeatures features(const Eigen::MatrixXd& points) {
  MeasureFeatures mf;
  const double inv = 1.0 / static_cast<double>(points.cols());
  mf.mean = points.rowwise().sum() * inv;
  mf.m2 = points.squaredNorm() * inv;
  return mf;
}

namespace {

double w2_1d(const Eigen::MatrixXd& pa, const Eigen::MatrixXd& pb) {
  std::vector<double> a(pa.data(), pa.data() + pa.cols());
  std::vector<double> b(pb.data(), pb.data() + pb.cols());
  std::sort(a.begin(), a.end());
  std::sort(b.begin(), b.end());
  // Quantile functions are step functions with jumps at i/N and j/M. Walk the
  // common refinement in integer units of 1/(N*M).
  const long long N = static_cast<long long>(a.size());
  const long long M = static_cast<long long>(b.size());
  long long cur = 0;
  std::size_t i = 0, j = 0;
  double acc = 0.0;
  while (i < a.size() && j < b.size()) {
    const long long ea = (static_cast<long long>(i) + 1) * M;
    const long long eb = (static_cast<long long>(j) + 1) * N;
    const long long next = std::min(ea, eb);
    const double diff = a[i] - b[j];
    acc += diff * diff * static_cast<double>(next - cur);
    cur = next;
    if (ea == next) ++i;
    if (eb == next) ++j;
  }
  return std::sqrt(acc / static_cast<double>(N * M));
}

}  // namespace

double w2_distance(const ParticleMeasure& a, const ParticleMeasure& b) {
  if (a.dim() != b.dim()) throw DimensionError("w2_distance: dimension mismatch");
  if (a.dim() == 1) return w2_1d(a.points(), b.points());
  if (a.size() != b.size()) throw UnsupportedCoupling("w2_distance: unequal particle counts need n == 1");
  const int N = a.size();
  Eigen::MatrixXd cost(N, N);
  for (int i = 0; i < N; ++i)
    for (int j = 0; j < N; ++j) cost(i, j) = (a.points().col(i) - b.points().col(j)).squaredNorm();
  const auto assign = solve_assignment(cost);
  double acc = 0.0;
  for (int i = 0; i < N; ++i) acc += cost(i, assign[i]);
  return std::sqrt(acc / N);
}

std::vector<int> solve_assignment(const Eigen::MatrixXd& cost) {
  // Hungarian method with row/column potentials, O(N^3).
  const int n = static_cast<int>(cost.rows());
  if (cost.cols() != n) throw DimensionError("solve_assignment needs a square matrix");
  const double inf = std::numeric_limits<double>::infinity();
  std::vector<double> u(n + 1, 0.0), v(n + 1, 0.0), minv(n + 1);
  std::vector<int> p(n + 1, 0), way(n + 1, 0);
  std::vector<char> used(n + 1);
  for (int i = 1; i <= n; ++i) {
    p[0] = i;
    int j0 = 0;
    std::fill(minv.begin(), minv.end(), inf);
    std::fill(used.begin(), used.end(), 0);
    do {
      used[j0] = 1;
      const int i0 = p[j0];
      double delta = inf;
      int j1 = 0;
      for (int j = 1; j <= n; ++j) {
        if (used[j]) continue;
        const double cur = cost(i0 - 1, j - 1) - u[i0] - v[j];
        if (cur < minv[j]) {
          minv[j] = cur;
          way[j] = j0;
        }
        if (minv[j] < delta) {
          delta = minv[j];
          j1 = j;
        }
      }
      for (int j = 0; j <= n; ++j) {
        if (used[j]) {
          u[p[j]] += delta;
          v[j] -= delta;
        } else {
          minv[j] -= delta;
        }
      }
      j0 = j1;
    } while (p[j0] != 0);
    do {
      const int j1 = way[j0];
      p[j0] = p[j1];
      j0 = j1;
    } while (j0 != 0);
  }
  std::vector<int> assign(n, -1);
  for (int j = 1; j <= n; ++j)
    if (p[j] > 0) assign[p[j] - 1] = j - 1;
  return assign;
}

Eigen::MatrixXd moment(const ParticleMeasure& m, int order) {
  const double inv = 1.0 / m.size();
  if (order == 1) return m.points().rowwise().sum() * inv;
  if (order == 2) return m.points() * m.points().transpose() * inv;
  throw DimensionError("moment: order must be 1 or 2");
}

ParticleMeasure independent_copy(const ParticleMeasure& m, std::mt19937_64& rng) {
  std::vector<int> perm(m.size());
  std::iota(perm.begin(), perm.end(), 0);
  std::shuffle(perm.begin(), perm.end(), rng);
  Eigen::MatrixXd pts(m.dim(), m.size());
  for (int i = 0; i < m.size(); ++i) pts.col(i) = m.points().col(perm[i]);
  return ParticleMeasure(std::move(pts));
}

void write_csv(std::ostream& os, const ParticleMeasure& m) {
  os.precision(17);
  for (int r = 0; r < m.dim(); ++r) os << (r ? "," : "") << "x" << r;
  os << '\n';
  for (int i = 0; i < m.size(); ++i) {
    for (int r = 0; r < m.dim(); ++r) os << (r ? "," : "") << m.points()(r, i);
    os << '\n';
  }
}

ParticleMeasure read_csv(std::istream& is) {
  std::string line;
  std::vector<std::vector<double>> atoms;
  bool header = true;
  while (std::getline(is, line)) {
    if (line.empty()) continue;
    if (header) {
      header = false;
      if (line.find_first_of("xX") != std::string::npos) continue;
    }
    std::vector<double> row;
    std::stringstream ss(line);
    std::string cell;
    while (std::getline(ss, cell, ',')) row.push_back(std::stod(cell));
    atoms.push_back(std::move(row));
  }
  return ParticleMeasure::from_atoms(atoms);
}

}  // namespace mfg
