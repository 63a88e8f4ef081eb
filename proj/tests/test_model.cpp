#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include "mfg/model.hpp"
#include "support.hpp"

#include <cmath>

using namespace mfg;
using namespace testing_support;

namespace {

MomentModelData quadratic_v(double F2, double lambda_v) {
  auto D = MomentModelData::zeros(1, 1, 1.0);
  D.F2 = scalar(F2);
  D.constants.lambda_v = lambda_v;
  return D;
}

/// Wraps a model and returns a wrong D_v f.
class WrongDv final : public Model {
 public:
  explicit WrongDv(ModelPtr base) : base_(std::move(base)) {}
  int n() const override { return base_->n(); }
  int d() const override { return base_->d(); }
  double horizon() const override { return base_->horizon(); }
  Coefficients coefficients(double s, const MeasureFeatures& m) const override { return base_->coefficients(s, m); }
  RunningCost running(double s, const Vec& x, const MeasureFeatures& m, const Vec& v) const override {
    auto r = base_->running(s, x, m, v);
    r.fv *= 2.0;
    return r;
  }
  TerminalCost terminal(const Vec& x, const MeasureFeatures& m) const override { return base_->terminal(x, m); }
  const AssumptionConstants& constants() const override { return base_->constants(); }

 private:
  ModelPtr base_;
};

}  // namespace

TEST_CASE("convexity check on quadratic in v") {
  std::mt19937_64 rng(1);
  auto ok = check_convexity(MomentModel(quadratic_v(1.0, 0.5)), rng, 200);
  CHECK(ok.passes);
  CHECK(std::abs(ok.worst_margin) <= 1e-12);
  auto bad = check_convexity(MomentModel(quadratic_v(1.0, 0.6)), rng, 50);
  CHECK_FALSE(bad.passes);
  CHECK_FALSE(bad.witness.empty());
  auto concave = check_convexity(MomentModel(quadratic_v(-2.0, 0.1)), rng, 50);
  CHECK_FALSE(concave.passes);
}

TEST_CASE("2D convexity thresholds are sharp to 1e-9") {
  std::mt19937_64 rng(2);
  auto D = MomentModelData::zeros(2, 2, 1.0);
  D.F1 << 3.0, 1.0, 1.0, 2.0;
  D.F2 << 2.0, 0.5, 0.5, 1.0;
  D.G << 1.5, 0.0, 0.0, 4.0;
  D.constants.has_A3prime = true;
  const double lv = 0.5 * Eigen::SelfAdjointEigenSolver<Mat>(D.F2).eigenvalues().minCoeff();
  const double lx = 0.5 * Eigen::SelfAdjointEigenSolver<Mat>(D.F1).eigenvalues().minCoeff();
  const double lg = 0.5 * Eigen::SelfAdjointEigenSolver<Mat>(D.G).eigenvalues().minCoeff();
  auto with = [&](double a, double b, double c) {
    auto E = D;
    E.constants.lambda_v = a;
    E.constants.lambda_x = b;
    E.constants.lambda_g = c;
    return check_convexity(MomentModel(E), rng, 4000).passes;
  };
  CHECK(with(lv - 1e-9, lx - 1e-9, lg - 1e-9));
  CHECK(with(lv, lx, lg));
  CHECK_FALSE(with(lv + 1e-9, lx, lg));
  CHECK_FALSE(with(lv, lx + 1e-9, lg));
  CHECK_FALSE(with(lv, lx, lg + 1e-9));
}

TEST_CASE("1D convexity thresholds are sharp to 1e-9") {
  std::mt19937_64 rng(3);
  auto D = MomentModelData::zeros(1, 1, 1.0);
  D.F1 = scalar(3.0);
  D.F2 = scalar(2.0);
  D.G = scalar(0.5);
  D.constants.has_A3prime = true;
  auto with = [&](double a, double b, double c) {
    auto E = D;
    E.constants.lambda_v = a;
    E.constants.lambda_x = b;
    E.constants.lambda_g = c;
    return check_convexity(MomentModel(E), rng, 500).passes;
  };
  CHECK(with(1.0 - 1e-9, 1.5 - 1e-9, 0.25 - 1e-9));
  CHECK(with(1.0, 1.5, 0.25));
  CHECK_FALSE(with(1.0 + 1e-9, 1.5, 0.25));
  CHECK_FALSE(with(1.0, 1.5 + 1e-9, 0.25));
  CHECK_FALSE(with(1.0, 1.5, 0.25 + 1e-9));
}

TEST_CASE("small mean field effect") {
  AssumptionConstants c;
  c.lambda_v = 1.0;
  c.Lv = 2.0;
  c.Lx = 1.0;
  c.lambda_x = 1.0;
  CHECK(check_small_mf_effect(c));
  c.lambda_x = 0.99;
  CHECK_FALSE(check_small_mf_effect(c));
  c.lambda_x = 1.0 - 1e-12;
  CHECK_FALSE(check_small_mf_effect(c));
  AssumptionConstants z;
  z.Lv = z.Lx = z.Lg = 0.0;
  CHECK(check_small_mf_effect(z));
  // monotone in lambda_x and lambda_g
  c.lambda_x = 1.0;
  for (double add : {0.0, 0.1, 1.0, 10.0}) {
    auto e = c;
    e.lambda_x += add;
    e.lambda_g += add;
    CHECK(check_small_mf_effect(e));
  }
}

TEST_CASE("monotonicity condition") {
  std::mt19937_64 rng(4);
  auto D = tanh_data(0.0, 1.0);
  D.constants.has_A3prime = true;
  CHECK(check_monotonicity(MomentModel(D), rng, 50).passes);
  auto E = D;
  E.G = scalar(-1.0);
  auto rep = check_monotonicity(MomentModel(E), rng, 50);
  CHECK_FALSE(rep.passes);
  CHECK(rep.witness.find("(iii)") != std::string::npos);
  auto Z = MomentModelData::zeros(1, 1, 1.0);
  Z.F2 = scalar(1.0);  // v-hat needs a strictly convex f
  Z.constants.has_A3prime = true;
  auto zr = check_monotonicity(MomentModel(Z), rng, 20);
  CHECK(zr.passes);
}

TEST_CASE("derivative consistency") {
  std::mt19937_64 rng(5);
  auto D = MomentModelData::zeros(1, 1, 1.0);
  D.F2 = scalar(1.0);
  auto rep = check_derivative_consistency(MomentModel(D), rng, 50, 1e-4);
  CHECK(rep.passes);
  CHECK(rep.worst_margin <= 1e-7);
  auto wrong = check_derivative_consistency(WrongDv(make(D)), rng, 20, 1e-4);
  CHECK_FALSE(wrong.passes);
  CHECK(std::find(wrong.failures.begin(), wrong.failures.end(), "D_v f") != wrong.failures.end());
}

TEST_CASE("derivative consistency on a fully loaded moment model") {
  std::mt19937_64 rng(6);
  auto D = MomentModelData::zeros(2, 1, 1.0);
  D.b0c << 0.1, -0.2;
  D.B0m << 0.3, 0.1, -0.2, 0.4;
  D.b0q << 0.05, -0.02;
  D.b1 << -0.5, 0.1, 0.0, 0.2;
  D.b2 << 1.0, 0.5;
  D.S0m[0] << 0.1, 0.0, 0.0, 0.1;
  D.s0q[1] << 0.01, 0.02;
  D.F1 << 1.0, 0.2, 0.2, 2.0;
  D.F2 << 1.5;
  D.Fxv << 0.1, -0.1;
  D.Cx << 0.2, 0.0, 0.1, -0.3;
  D.Cv << 0.4, -0.1;
  D.fm << 0.5, 0.25;
  D.kf = 0.3;
  D.kxm2 = 0.2;
  D.eps_x = 0.01;
  D.eps_v = 0.02;
  D.G << 1.0, 0.0, 0.0, 0.5;
  D.Gm << 0.1, 0.2, 0.3, 0.4;
  D.gm << -0.3, 0.2;
  D.kg = 0.1;
  D.eps_g = 0.03;
  auto rep = check_derivative_consistency(MomentModel(D), rng, 100, 1e-4, 1e-6);
  INFO(rep.witness);
  CHECK(rep.passes);

  auto E = MomentModelData::zeros(1, 1, 1.0);
  E.F2 = scalar(1.0);
  E.eps_x = 0.05;
  E.eps_v = 0.01;
  E.eps_g = 0.05;
  E.Fxv = scalar(0.3);
  CHECK(check_derivative_consistency(MomentModel(E), rng, 100, 1e-4).passes);
}

TEST_CASE("b0 = mean: lifted measure derivative") {
  std::mt19937_64 rng(8);
  auto D = MomentModelData::zeros(1, 1, 1.0);
  D.B0m = scalar(1.0);
  D.F2 = scalar(1.0);
  auto rep = check_derivative_consistency(MomentModel(D), rng, 30, 1e-4);
  CHECK(rep.passes);
}

TEST_CASE("coupling flags") {
  auto D = tanh_data();
  CHECK(MomentModel(D).measure_free());
  CHECK_FALSE(MomentModel(D).dynamics_coupled());
  D.Cx = scalar(0.5);
  CHECK(MomentModel(D).dynamics_coupled());
  auto E = tanh_data();
  E.kf = 1.0;
  CHECK_FALSE(MomentModel(E).dynamics_coupled());
  CHECK_FALSE(MomentModel(E).measure_free());
}

TEST_CASE("scaled coupling model") {
  auto D = tanh_data();
  D.Cx = scalar(0.8);
  D.B0m = scalar(0.4);
  auto base = make(D);
  ScaledCouplingModel half(base, 0.5);
  MeasureFeatures mf{vscalar(2.0), 5.0};
  const auto r = half.running(0.0, vscalar(1.0), mf, vscalar(0.0));
  CHECK(r.fx(0) == doctest::Approx(1.0 + 0.8 * 1.0));
  CHECK(r.fx_mean(0, 0) == doctest::Approx(0.4));
  const auto c = half.coefficients(0.0, mf);
  CHECK(c.b0(0) == doctest::Approx(0.4));
  std::mt19937_64 rng(9);
  CHECK(check_derivative_consistency(half, rng, 30, 1e-4).passes);
  CHECK(ScaledCouplingModel(base, 0.0).measure_free());
}

TEST_CASE("config round trip and errors") {
  auto D = tanh_data();
  D.Cx = scalar(0.5);
  const auto j = model_to_json(D);
  auto m = model_from_json(j);
  CHECK(model_to_json(m->data()) == j);

  auto bad = j;
  bad["F2"] = "one";
  try {
    model_from_json(bad);
    FAIL("expected ConfigError");
  } catch (const ConfigError& e) {
    CHECK(e.key == "model.F2");
  }
  auto unknown = j;
  unknown["bogus"] = 1;
  CHECK_THROWS_AS(model_from_json(unknown), ConfigError);
  auto lq_quartic = j;
  lq_quartic["eps_x"] = 0.1;
  CHECK_THROWS_AS(model_from_json(lq_quartic), ConfigError);

  auto D2 = MomentModelData::zeros(2, 1, 2.0);
  D2.F1 << 1, 0.5, 0.5, 2;
  D2.F2 << 3;
  D2.S1[1] << 0.1, 0.2, 0.3, 0.4;
  D2.s0c[0] << 1, 2;
  D2.eps_x = 0.2;
  const auto j2 = model_to_json(D2);
  CHECK(model_to_json(model_from_json(j2)->data()) == j2);
}
