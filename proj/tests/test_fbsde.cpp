#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include "mfg/fbsde.hpp"
#include "support.hpp"

#include <cmath>
#include <sstream>

using namespace mfg;
using namespace testing_support;

namespace {

constexpr double kTanh1 = 0.7615941559557649;
// Equilibrium mean at s = 1 for the tanh model with f += 0.5 x mean(m), mu = {1}
// (two-point boundary problem for the mean and V1, solved independently).
constexpr double kCoupledMean1 = 0.5409600990622746;

ParticleMeasure atoms(std::vector<double> xs) {
  Eigen::MatrixXd p(1, xs.size());
  for (std::size_t i = 0; i < xs.size(); ++i) p(0, i) = xs[i];
  return ParticleMeasure(p);
}

SolverParams params(int N) {
  SolverParams P;
  P.N = N;
  P.seed = 7;
  return P;
}

MomentModelData zero_dynamics() {
  auto D = MomentModelData::zeros(1, 1, 1.0);
  D.b2 = scalar(1.0);
  D.F2 = scalar(1.0);
  return D;
}

}  // namespace

TEST_CASE("Brownian increments are antithetic and reproducible") {
  BrownianIncrements a(3, 11, 4, 2, 0.25), b(3, 11, 4, 2, 0.25), c(4, 11, 4, 2, 0.25);
  for (int k = 0; k < 4; ++k) {
    CHECK((a.at(k) - b.at(k)).norm() == 0.0);
    CHECK((a.at(k) - c.at(k)).norm() > 0.0);
    for (int i = 0; i + 1 < 10; i += 2) CHECK((a.at(k).col(i) + a.at(k).col(i + 1)).norm() == 0.0);
  }
  double var = 0.0;
  BrownianIncrements big(1, 20000, 1, 1, 0.25);
  var = big.at(0).squaredNorm() / 20000;
  CHECK(var == doctest::Approx(0.25).epsilon(0.05));
}

TEST_CASE("initial cloud reproduces the measure") {
  const auto mu = atoms({2.0, 0.0, 1.0});
  const auto Y = initial_cloud(mu, 6);
  CHECK(Y(0, 0) == 0.0);
  CHECK(Y(0, 1) == 0.0);
  CHECK(Y(0, 2) == 1.0);
  CHECK(Y(0, 5) == 2.0);
  CHECK(w2_distance(ParticleMeasure(Y), mu) == 0.0);
  const auto id = initial_cloud(atoms({0.5, -1.0}), 2);
  CHECK(id(0, 0) == -1.0);
  CHECK(id(0, 1) == 0.5);
}

TEST_CASE("zero model stays at the origin") {
  const auto m = make(zero_dynamics());
  const TimeGrid g(0, 1, 10);
  const auto r = solve_mfg(*m, 0.0, ParticleMeasure::dirac(Eigen::VectorXd::Zero(1)), g, params(16));
  for (int k = 0; k <= 10; ++k) {
    CHECK(r.solution.Y[k].norm() == 0.0);
    CHECK(r.solution.p[k].norm() == 0.0);
    CHECK(r.solution.v[k].norm() == 0.0);
    CHECK(r.flow.clouds[k].norm() == 0.0);
  }
  CHECK(bsde_residual(*m, r.solution, r.flow) == 0.0);
}

TEST_CASE("tanh model matches the Riccati oracle") {
  const auto m = make(tanh_data());
  const TimeGrid g(0, 1, 50);
  const auto r = solve_mfg(*m, 0.0, atoms({1.0}), g, params(4000));
  const auto& s = r.solution;
  CHECK(s.p[0].mean() == doctest::Approx(kTanh1).epsilon(0.02));
  for (int i = 0; i < s.N; ++i) CHECK(s.p[50](0, i) == s.Y[50](0, i) * 0.0);
  CHECK(max_optimality_residual(*m, s, r.flow) <= 1e-8);
  CHECK(bsde_residual(*m, s, r.flow) <= 5e-3 * 2.0);
  CHECK(s.last_change <= SolverParams{}.sweep_tol);

  const auto c = solve_control(*m, 0.0, vscalar(2.0), r.flow, g, params(4000));
  CHECK(c.p[0](0, 0) == doctest::Approx(2.0 * kTanh1).epsilon(0.02));
  CHECK(c.Y[0].cwiseAbs().minCoeff() == 2.0);
  CHECK(max_optimality_residual(*m, c, r.flow) <= 1e-8);

  // One interior jump in p is visible in the discrete backward equation.
  auto bad = s;
  bad.p[25].array() += 1.0;
  CHECK(bsde_residual(*m, bad, r.flow) >= 0.5);
}

TEST_CASE("terminal condition is exact with a nonzero terminal cost") {
  const auto m = make(tanh_data(0.3, 0.7));
  const TimeGrid g(0, 1, 20);
  const auto r = solve_mfg(*m, 0.0, atoms({-1.0, 1.0}), g, params(200));
  for (int i = 0; i < 200; ++i) CHECK(r.solution.p[20](0, i) == 0.7 * r.solution.Y[20](0, i));
}

TEST_CASE("deterministic problem matches shooting") {
  // sigma = 0, b = v, f = v^2/2, g = x^2/2: p is constant and Y(T) = x - p T = p.
  auto D = zero_dynamics();
  D.G = scalar(1.0);
  const auto m = make(D);
  const TimeGrid g(0, 1, 40);
  const double x = 1.5;
  // Secant shooting on p(0) for the Hamiltonian system Y' = -p, p' = 0.
  auto miss = [&](double p0) { return (x - p0) - p0; };
  double a = 0.0, b = 2.0;
  for (int it = 0; it < 50 && std::abs(b - a) > 1e-14; ++it) {
    const double c = b - miss(b) * (b - a) / (miss(b) - miss(a));
    a = b;
    b = c;
  }
  const auto r = solve_mfg(*m, 0.0, atoms({x}), g, params(8));
  CHECK(std::abs(r.solution.p[0](0, 0) - b) <= 1e-3);
  const auto c = solve_control(*m, 0.0, vscalar(x), r.flow, g, params(8));
  CHECK(std::abs(c.p[0](0, 0) - b) <= 1e-3);
}

TEST_CASE("mean-coupled flow follows the LQ equilibrium") {
  auto D = tanh_data();
  D.Cx = scalar(0.5);
  const auto m = make(D);
  const TimeGrid g(0, 1, 50);
  const auto r = solve_mfg(*m, 0.0, atoms({1.0}), g, params(2000));
  CHECK(r.flow_iterations > 1);
  CHECK(r.flow_distance <= SolverParams{}.flow_tol);
  CHECK(r.flow.feats[50].mean(0) == doctest::Approx(kCoupledMean1).epsilon(0.02));
  CHECK(r.flow.feats[0].mean(0) == 1.0);
  CHECK(max_optimality_residual(*m, r.solution, r.flow) <= 1e-8);
  // Re-simulating against the returned flow moves it by at most the flow tolerance.
  double w = 0.0;
  for (int k = 0; k <= 50; ++k)
    w = std::max(w, w2_distance(ParticleMeasure(r.solution.Y[k]), r.flow.measure(k)));
  CHECK(w <= SolverParams{}.flow_tol);
}

TEST_CASE("control solve at an atom reproduces the MFG particles") {
  const auto m = make(tanh_data());
  const TimeGrid g(0, 1, 25);
  const auto r = solve_mfg(*m, 0.0, atoms({0.0, 1.0, 2.0}), g, params(3000));
  const auto c = solve_control(*m, 0.0, vscalar(1.0), r.flow, g, params(3000));
  const double mfg_p = r.solution.p[0].block(0, 1000, 1, 1000).mean();
  CHECK(c.p[0](0, 0) == doctest::Approx(mfg_p).epsilon(0.02));
}

TEST_CASE("stability ratio is stable under shrinking perturbations") {
  const auto m = make(tanh_data());
  const TimeGrid g(0, 1, 20);
  const auto mu = atoms({0.5, 1.0, 1.5, 2.0});
  CHECK(stability_probe(*m, 0.0, mu, mu, g, params(400)) == 0.0);
  std::vector<double> ratios;
  for (double eps : {0.1, 0.05, 0.025}) {
    Eigen::MatrixXd shifted = mu.points();
    shifted(0, 2) += eps;
    ratios.push_back(stability_probe(*m, 0.0, mu, ParticleMeasure(shifted), g, params(400)));
  }
  for (double r : ratios) {
    CHECK(std::isfinite(r));
    CHECK(r == doctest::Approx(ratios[0]).epsilon(0.2));
  }
}

TEST_CASE("unsolvable problem reports flow divergence") {
  // Strongly concave terminal cost: the backward map blows up.
  auto D = tanh_data(0.3, -40.0, 1.0);
  D.constants.lambda_g = 0.0;
  const auto m = make(D);
  const TimeGrid g(0, 1, 20);
  SolverParams P = params(64);
  P.max_sweeps = 30;
  CHECK_THROWS_AS(solve_mfg(*m, 0.0, atoms({1.0}), g, P), FlowDivergence);
}

TEST_CASE("solution CSV schema") {
  const auto m = make(tanh_data());
  const TimeGrid g(0, 1, 2);
  const auto r = solve_mfg(*m, 0.0, atoms({1.0}), g, params(4));
  std::ostringstream os;
  write_solution_csv(os, r.solution, "base", 2);
  std::istringstream is(os.str());
  std::string line;
  std::getline(is, line);
  CHECK(line == "flow_kind,node,particle,Y0,p0,q0_0,v0");
  int rows = 0;
  while (std::getline(is, line)) ++rows;
  CHECK(rows == 3 * 2);
}
