#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include "mfg/lq.hpp"
#include "support.hpp"

#include <chrono>
#include <cmath>

using namespace mfg;
using namespace testing_support;

namespace {

ParticleMeasure atoms(std::vector<double> xs) {
  Eigen::MatrixXd p(1, xs.size());
  for (std::size_t i = 0; i < xs.size(); ++i) p(0, i) = xs[i];
  return ParticleMeasure(p);
}

}  // namespace

TEST_CASE("Riccati tanh closed form") {
  const auto lq = lq_from_moment(tanh_data());
  const auto start = std::chrono::steady_clock::now();
  const auto V2 = solve_riccati(lq, TimeGrid(0.0, 1.0, 1000));
  const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  CHECK(std::abs(V2[0](0, 0) - std::tanh(1.0)) <= 1e-8);
  CHECK(V2[1000](0, 0) == 0.0);
  CHECK(secs < 1.0);
}

TEST_CASE("Riccati RK4 order") {
  const auto lq = lq_from_moment(tanh_data());
  const double e1 = std::abs(solve_riccati(lq, TimeGrid(0, 1, 10))[0](0, 0) - std::tanh(1.0));
  const double e2 = std::abs(solve_riccati(lq, TimeGrid(0, 1, 20))[0](0, 0) - std::tanh(1.0));
  CHECK(e1 / e2 >= 8.0);
  CHECK(e1 / e2 <= 32.0);
}

TEST_CASE("Riccati trivial, terminal, symmetry and PSD") {
  auto D = tanh_data();
  D.F1 = scalar(0.0);
  for (const auto& V : solve_riccati(lq_from_moment(D), TimeGrid(0, 1, 50))) CHECK(V(0, 0) == 0.0);

  auto E = MomentModelData::zeros(2, 2, 1.5);
  E.b1 << 0.1, 0.4, -0.3, 0.2;
  E.b2 << 1.0, 0.2, 0.0, 0.7;
  E.S1[0] << 0.2, 0.0, 0.1, 0.1;
  E.S1[1] << 0.0, 0.3, 0.0, 0.1;
  E.F1 << 1.0, 0.3, 0.3, 0.5;
  E.F2 << 2.0, 0.1, 0.1, 1.0;
  E.G << 0.5, 0.2, 0.2, 0.4;
  const auto path = solve_riccati(lq_from_moment(E), TimeGrid(0, 1.5, 200));
  CHECK((path.back() - E.G).norm() == 0.0);
  for (const auto& V : path) {
    CHECK((V - V.transpose()).norm() == 0.0);
    CHECK(Eigen::SelfAdjointEigenSolver<Mat>(V).eigenvalues().minCoeff() >= -1e-10);
  }
}

TEST_CASE("Riccati finite escape") {
  auto D = tanh_data(0.0, 0.0, 3.0);
  D.F2 = scalar(-1.0);  // dV/d(T-t) = 1 + V^2, V = tan(T - t + pi/4)
  D.G = scalar(1.0);
  auto lq = lq_from_moment(D);
  lq.blowup_bound = 1e6;
  CHECK_THROWS_AS(solve_riccati(lq, TimeGrid(0, 3, 3000)), BlowUp);
}

TEST_CASE("V1 and V0 on the tanh model") {
  auto D = tanh_data(0.3);
  const auto lq = lq_from_moment(D);
  const TimeGrid grid(0, 1, 1000);
  for (const auto& v : solve_v1(lq, grid)) CHECK(v(0) == 0.0);
  const auto V0 = solve_v0(lq, grid, atoms({1.0}));
  CHECK(V0[0] == doctest::Approx(0.045 * std::log(std::cosh(1.0))).epsilon(1e-6));
  CHECK(V0.back() == 0.0);

  auto E = tanh_data(0.0);
  E.g0 = 2.5;
  for (double v : solve_v0(lq_from_moment(E), grid, atoms({1.0}))) CHECK(v == 2.5);
}

TEST_CASE("V1 self convergence with a linear cost") {
  auto D = tanh_data(0.3);
  D.f1 = vscalar(1.0);
  D.g1 = vscalar(0.25);
  const auto lq = lq_from_moment(D);
  const double coarse = solve_v1(lq, TimeGrid(0, 1, 1000))[0](0);
  const double fine = solve_v1(lq, TimeGrid(0, 1, 10000))[0](0);
  CHECK(std::abs(coarse - fine) <= 1e-8);
  CHECK(solve_v1(lq, TimeGrid(0, 1, 10)).back()(0) == 0.25);
}

TEST_CASE("value and feedback") {
  const auto lq = lq_from_moment(tanh_data(0.3));
  const auto sol = lq_solve(lq, TimeGrid(0, 1, 1000), atoms({1.0}));
  const auto p = lq_value_and_feedback(lq, sol, 0, vscalar(1.0));
  CHECK(p.V == doctest::Approx(0.5 * std::tanh(1.0) + 0.045 * std::log(std::cosh(1.0))).epsilon(1e-8));
  CHECK(p.DxV(0) == doctest::Approx(std::tanh(1.0)).epsilon(1e-8));
  CHECK(p.vhat(0) == doctest::Approx(-std::tanh(1.0)).epsilon(1e-8));
  // polarization
  for (double x : {0.5, 2.0, -3.0}) {
    const double vp = lq_value_and_feedback(lq, sol, 10, vscalar(x)).V;
    const double vm = lq_value_and_feedback(lq, sol, 10, vscalar(-x)).V;
    const double v0 = lq_value_and_feedback(lq, sol, 10, vscalar(0.0)).V;
    CHECK(vp + vm - 2 * v0 == doctest::Approx(x * x * sol.V2[10](0, 0)).epsilon(1e-10));
  }
  auto D = tanh_data(0.0);
  D.f2 = vscalar(0.4);
  D.F2 = scalar(2.0);
  auto lq2 = lq_from_moment(D);
  const auto s2 = lq_solve(lq2, TimeGrid(0, 1, 100), atoms({0.0}));
  const auto q = lq_value_and_feedback(lq2, s2, 100, vscalar(0.0));
  CHECK(q.vhat(0) == doctest::Approx(-0.2));
}

TEST_CASE("equilibrium flow moments") {
  const auto lq = lq_from_moment(tanh_data(0.3));
  const TimeGrid grid(0, 1, 200);
  const auto sol = lq_solve(lq, grid, atoms({1.0}));
  for (int k = 0; k <= grid.K; ++k)
    CHECK(sol.mean[k](0) == doctest::Approx(std::cosh(1 - grid.node(k)) / std::cosh(1.0)).epsilon(1e-9));
  CHECK(sol.cov.back()(0, 0) == doctest::Approx(0.09 * std::tanh(1.0)).epsilon(1e-8));
  const auto zero = lq_solve(lq_from_moment(tanh_data(0.0)), grid, atoms({0.0}));
  for (const auto& m : zero.mean) CHECK(m(0) == 0.0);
}

TEST_CASE("mean-coupled equilibrium against a collocation BVP oracle") {
  // f = (x^2 + v^2)/2 + 0.5 x mean, b = v, sigma = 0.3, mu = {1}; reference values from
  // an independent collocation solve of the mean / V1 two-point problem.
  auto D = tanh_data(0.3);
  D.Cx = scalar(0.5);
  const auto lq = lq_from_moment(D);
  CHECK(lq.mean_coupled);
  CHECK_THROWS_AS(solve_v1(lq, TimeGrid(0, 1, 10)), UnsupportedMeasureDependence);
  const auto sol = lq_solve(lq, TimeGrid(0, 1, 1000), atoms({1.0}));
  CHECK(sol.V1[0](0) == doctest::Approx(0.26847538384909764).epsilon(1e-7));
  CHECK(sol.V0[0] == doctest::Approx(0.007701302361442505).epsilon(1e-6));
  CHECK(sol.mean[500](0) == doctest::Approx(0.645599693246419).epsilon(1e-7));
  CHECK(sol.mean[1000](0) == doctest::Approx(0.5409600990622746).epsilon(1e-7));
  CHECK(lq_value_and_feedback(lq, sol, 0, vscalar(2.0)).V == doctest::Approx(2.0678403819711675).epsilon(1e-7));
}

TEST_CASE("unsupported LQ data") {
  auto D = tanh_data();
  D.kf = 1.0;
  CHECK_THROWS_AS(lq_from_moment(D), UnsupportedMeasureDependence);
}
