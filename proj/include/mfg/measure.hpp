#pragma once

#include "mfg/types.hpp"

#include <iosfwd>
#include <random>
#include <vector>

namespace mfg {

/// Equal-weight empirical measure. Atoms are stored as the columns of an n x N matrix.
class ParticleMeasure {
 public:
  explicit ParticleMeasure(Eigen::MatrixXd points);
  static ParticleMeasure from_atoms(const std::vector<std::vector<double>>& atoms);
  /// Single atom at the given location; dirac(Vec::Zero(n)) is the origin mass.
  static ParticleMeasure dirac(const Eigen::VectorXd& x);

  int dim() const { return static_cast<int>(points_.rows()); }
  int size() const { return static_cast<int>(points_.cols()); }
  const Eigen::MatrixXd& points() const { return points_; }
  Eigen::VectorXd atom(int i) const { return points_.col(i); }

 private:
  Eigen::MatrixXd points_;
};

/// The moment data through which models may depend on a measure:
/// the mean vector and the scalar second moment E|X|^2 = W2(m, delta_0)^2.
struct MeasureFeatures {
  Vec mean;
  double m2 = 0.0;
};

MeasureFeatures features(const Eigen::MatrixXd& points);
inline MeasureFeatures features(const ParticleMeasure& m) { return features(m.points()); }

double w2_distance(const ParticleMeasure& a, const ParticleMeasure& b);

/// order 1: mean (n x 1); order 2: raw second moment matrix sum x x^T / N (n x n).
Eigen::MatrixXd moment(const ParticleMeasure& m, int order);

/// Same atoms under a fresh random indexing.
ParticleMeasure independent_copy(const ParticleMeasure& m, std::mt19937_64& rng);

void write_csv(std::ostream& os, const ParticleMeasure& m);
ParticleMeasure read_csv(std::istream& is);

/// Minimum-cost perfect matching for a square cost matrix. Returns assignment[row] = col.
std::vector<int> solve_assignment(const Eigen::MatrixXd& cost);

}  // namespace mfg
