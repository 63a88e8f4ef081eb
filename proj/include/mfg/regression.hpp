#pragma once

#include "mfg/types.hpp"

#include <vector>

namespace mfg {

/// Least-squares projection onto polynomials of total degree <= degree in the
/// standardized state. Coordinates with (numerically) zero spread are dropped, and the
/// Gram matrix is pseudo-inverted with a relative eigenvalue cutoff, so degenerate
/// clouds such as a single repeated point reduce to a plain average.
class Regressor {
 public:
  Regressor() = default;
  Regressor(const Eigen::MatrixXd& Y, int degree);

  int size() const { return static_cast<int>(exponents_.size()); }
  int samples() const { return static_cast<int>(phi_.cols()); }

  /// targets: m x N, one row per scalar target. Returns m x size() coefficients.
  Eigen::MatrixXd fit(const Eigen::MatrixXd& targets) const;
  /// Fitted values at the training points, m x N.
  Eigen::MatrixXd predict(const Eigen::MatrixXd& coef) const { return coef * phi_; }
  Eigen::MatrixXd project(const Eigen::MatrixXd& targets) const { return predict(fit(targets)); }
  /// Basis vector at an arbitrary point.
  Eigen::VectorXd basis(const Vec& y) const;
  /// Same, written into out (resized to size()).
  void basis(const Vec& y, Eigen::VectorXd& out) const;
  const Eigen::MatrixXd& design() const { return phi_; }

 private:
  Vec center_, scale_;
  std::vector<int> active_;
  std::vector<std::vector<int>> exponents_;
  Eigen::MatrixXd phi_;   // size() x N
  Eigen::MatrixXd ginv_;  // pseudo-inverse of phi phi' / N
};

}  // namespace mfg
