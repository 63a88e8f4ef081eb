#pragma once

#include "mfg/measure.hpp"
#include "mfg/types.hpp"

#include <memory>
#include <random>
#include <string>
#include <vector>

#include "json.hpp"

namespace mfg {

/// Coefficients of b(s,x,m,v) = b0(s,m) + b1(s) x + b2(s) v and of the diffusion
/// columns sigma^j = s0[j](s,m) + s1[j](s) x + s2[j](s) v. Measure dependence enters
/// only through the features (mean, m2); the *_mean and *_m2 fields are the partials
/// with respect to them.
struct Coefficients {
  Vec b0;
  Mat b1, b2;
  Mat b0_mean;  // n x n
  Vec b0_m2;    // n
  std::vector<Vec> s0;
  std::vector<Mat> s1, s2;
  std::vector<Mat> s0_mean;
  std::vector<Vec> s0_m2;

  Vec drift(const Vec& x, const Vec& v) const { return b0 + b1 * x + b2 * v; }
  Vec diffusion(int j, const Vec& x, const Vec& v) const { return s0[j] + s1[j] * x + s2[j] * v; }
  bool sigma2_zero() const;
};

/// f and its derivatives at one point. Third-order entries are only meaningful for n = d = 1.
struct RunningCost {
  double f = 0.0;
  Vec fx, fv;
  Mat fxx, fxv, fvv;  // fxv is n x d: d/dx of D_v f transposed
  Vec f_mean;
  double f_m2 = 0.0;
  Mat fx_mean;  // n x n
  Vec fx_m2;    // n
  Mat fv_mean;  // d x n
  Vec fv_m2;    // d
  double fxxx = 0.0, fxxv = 0.0, fxvv = 0.0, fvvv = 0.0;
};

struct TerminalCost {
  double g = 0.0;
  Vec gx;
  Mat gxx;
  Vec g_mean;
  double g_m2 = 0.0;
  Mat gx_mean;
  Vec gx_m2;
  double gxxx = 0.0;
};

struct AssumptionConstants {
  double L = 1.0, Lx = 0.0, Lv = 0.0, Lg = 0.0;
  double lambda_v = 0.5, lambda_x = 0.0, lambda_g = 0.0;
  bool has_A3prime = false;
  bool has_A4 = true;
};

class Model {
 public:
  virtual ~Model() = default;
  virtual int n() const = 0;
  virtual int d() const = 0;
  virtual double horizon() const = 0;
  virtual Coefficients coefficients(double s, const MeasureFeatures& m) const = 0;
  virtual RunningCost running(double s, const Vec& x, const MeasureFeatures& m, const Vec& v) const = 0;
  virtual TerminalCost terminal(const Vec& x, const MeasureFeatures& m) const = 0;
  virtual const AssumptionConstants& constants() const = 0;
  /// D_v^2 f is independent of (x, v): v-hat is one linear solve.
  virtual bool quadratic_in_v() const { return false; }
  /// The measure enters b, sigma, D_x f, D_v f or D_x g (i.e. the FBSDE itself).
  virtual bool dynamics_coupled() const { return true; }
  /// No measure dependence anywhere, including value-only terms.
  virtual bool measure_free() const { return false; }
};

using ModelPtr = std::shared_ptr<const Model>;

/// Built-in family. With eps_* = 0 and no second-moment terms it is the LQ model.
///   f = f0 + f1.x + f2.v + x'F1x/2 + v'F2v/2 + x'Fxv v + x'Cx mean + v'Cv mean + fm.mean
///       + kf m2 + kxm2 m2 |x|^2/2 + eps_x sum x_i^4 + eps_v sum v_i^4
///   g = g0 + g1.x + x'Gx/2 + x'Gm mean + gm.mean + kg m2 + eps_g sum x_i^4
///   b0 = b0c + B0m mean + b0q m2,  s0[j] = s0c[j] + S0m[j] mean + s0q[j] m2
struct MomentModelData {
  std::string kind = "moment_coupled";
  int n = 1, d = 1;
  double T = 1.0;
  Vec b0c, b0q;
  Mat B0m, b1, b2;
  std::vector<Vec> s0c, s0q;
  std::vector<Mat> S0m, S1, S2;
  double f0 = 0.0;
  Vec f1, f2, fm;
  Mat F1, F2, Fxv, Cx, Cv;
  double kf = 0.0, kxm2 = 0.0, eps_x = 0.0, eps_v = 0.0;
  double g0 = 0.0;
  Vec g1, gm;
  Mat G, Gm;
  double kg = 0.0, eps_g = 0.0;
  AssumptionConstants constants;

  /// All-zero data of the given dimensions.
  static MomentModelData zeros(int n, int d, double T);
};

class MomentModel final : public Model {
 public:
  explicit MomentModel(MomentModelData data);
  int n() const override { return data_.n; }
  int d() const override { return data_.d; }
  double horizon() const override { return data_.T; }
  Coefficients coefficients(double s, const MeasureFeatures& m) const override;
  RunningCost running(double s, const Vec& x, const MeasureFeatures& m, const Vec& v) const override;
  TerminalCost terminal(const Vec& x, const MeasureFeatures& m) const override;
  const AssumptionConstants& constants() const override { return data_.constants; }
  bool quadratic_in_v() const override { return data_.eps_v == 0.0; }
  bool dynamics_coupled() const override;
  bool measure_free() const override;
  const MomentModelData& data() const { return data_; }

 private:
  MomentModelData data_;
};

/// Continuation homotopy member: the base model evaluated at features scaled by lambda,
/// so lambda = 0 removes all measure dependence.
class ScaledCouplingModel final : public Model {
 public:
  ScaledCouplingModel(ModelPtr base, double lambda) : base_(std::move(base)), lambda_(lambda) {}
  int n() const override { return base_->n(); }
  int d() const override { return base_->d(); }
  double horizon() const override { return base_->horizon(); }
  Coefficients coefficients(double s, const MeasureFeatures& m) const override;
  RunningCost running(double s, const Vec& x, const MeasureFeatures& m, const Vec& v) const override;
  TerminalCost terminal(const Vec& x, const MeasureFeatures& m) const override;
  const AssumptionConstants& constants() const override { return base_->constants(); }
  bool quadratic_in_v() const override { return base_->quadratic_in_v(); }
  bool dynamics_coupled() const override { return lambda_ != 0.0 && base_->dynamics_coupled(); }
  bool measure_free() const override { return lambda_ == 0.0 || base_->measure_free(); }

 private:
  MeasureFeatures scaled(const MeasureFeatures& m) const;
  ModelPtr base_;
  double lambda_;
};

// ---- validators -------------------------------------------------------------

struct SamplingBox {
  double half_width = 3.0;
  int cloud_size = 16;
};

struct CheckReport {
  bool passes = true;
  double worst_margin = 0.0;
  std::string witness;
  std::vector<std::string> failures;
};

CheckReport check_convexity(const Model& model, std::mt19937_64& rng, int sample_count, SamplingBox box = {});
bool check_small_mf_effect(const AssumptionConstants& c);
CheckReport check_monotonicity(const Model& model, std::mt19937_64& rng, int sample_count, SamplingBox box = {});
CheckReport check_derivative_consistency(const Model& model, std::mt19937_64& rng, int sample_count, double h,
                                         double tol = 1e-6, SamplingBox box = {});

// ---- config -----------------------------------------------------------------

std::shared_ptr<MomentModel> model_from_json(const nlohmann::json& j);
nlohmann::json model_to_json(const MomentModelData& data);

}  // namespace mfg
