#pragma once

#include <Eigen/Dense>

#include <stdexcept>
#include <string>

namespace mfg {

/// Upper bound on the state and control dimensions. Small matrices in the hot
/// loops are stack allocated with this capacity.
inline constexpr int kMaxDim = 4;

using Vec = Eigen::Matrix<double, Eigen::Dynamic, 1, Eigen::ColMajor, kMaxDim, 1>;
using Mat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::ColMajor, kMaxDim, kMaxDim>;

struct Error : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct DimensionError : Error { using Error::Error; };
struct UnsupportedCoupling : Error { using Error::Error; };
struct ModelEvaluationError : Error { using Error::Error; };
struct NewtonDivergence : Error { using Error::Error; };
struct SingularHessian : Error { using Error::Error; };
struct PicardDivergence : Error { using Error::Error; };
struct FlowDivergence : Error {
  FlowDivergence(const std::string& msg, double last, double previous)
      : Error(msg), last_distance(last), previous_distance(previous) {}
  double last_distance;
  double previous_distance;
};
struct MissingA4 : Error { using Error::Error; };
struct BlowUp : Error { using Error::Error; };
struct UnsupportedMeasureDependence : Error { using Error::Error; };

/// Config problems carry the offending key so the CLI can report it.
struct ConfigError : Error {
  ConfigError(std::string k, const std::string& msg) : Error(k + ": " + msg), key(std::move(k)) {}
  std::string key;
};

inline void require_dim(bool ok, const std::string& what) {
  if (!ok) throw DimensionError(what);
}

}  // namespace mfg
