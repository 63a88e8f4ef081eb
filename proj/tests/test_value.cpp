#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include "mfg/lq.hpp"
#include "mfg/value.hpp"
#include "support.hpp"

#include <cmath>

using namespace mfg;
using namespace testing_support;

namespace {

constexpr double kTanh1 = 0.7615941559557649;
// d/dt [V2(t)/2 + V0(t)] at t = 0 for the tanh model with sigma0 = 0.3, x = 1.
constexpr double kTanhDt = 0.5 * (kTanh1 * kTanh1 - 1.0) - 0.5 * 0.09 * kTanh1;

ParticleMeasure atoms(std::vector<double> xs) {
  Eigen::MatrixXd p(1, xs.size());
  for (std::size_t i = 0; i < xs.size(); ++i) p(0, i) = xs[i];
  return ParticleMeasure(p);
}

ValueSettings settings(int K, int N) {
  ValueSettings s;
  s.K = K;
  s.params.N = N;
  s.params.seed = 7;
  return s;
}

double rel(double a, double b) { return std::abs(a - b) / std::max(std::abs(b), 1e-2); }

MomentModelData zero_model() {
  auto D = MomentModelData::zeros(1, 1, 1.0);
  D.b2 = scalar(1.0);
  D.F2 = scalar(1.0);
  return D;
}

MomentModelData mean_coupled(double kxm2 = 0.0) {
  auto D = tanh_data();
  D.Cx = scalar(0.5);
  D.kxm2 = kxm2;
  return D;
}

double lq_value(const MomentModelData& D, double t, double x, const ParticleMeasure& mu) {
  const auto lq = lq_from_moment(D);
  const auto sol = lq_solve(lq, TimeGrid(t, D.T, 1000), mu);
  return lq_value_and_feedback(lq, sol, 0, vscalar(x)).V;
}

}  // namespace

TEST_CASE("zero model gives zero value and derivatives") {
  const auto m = make(zero_model());
  const auto mu = atoms({0.5});
  const auto s = settings(10, 100);
  const ValuePipeline P(*m, 0.0, mu, s);
  CHECK(P.value(vscalar(1.0)) == 0.0);
  const auto g = P.grad(vscalar(1.0));
  CHECK(g.DxV(0) == 0.0);
  CHECK(g.Dx2V(0, 0) == 0.0);
  CHECK(P.dt_value(vscalar(1.0)) == 0.0);
  CHECK(master_residual(*m, 0.3, vscalar(1.0), mu, s).residual == 0.0);
  CHECK(decoupling_check(*m, 0.0, mu, 0.5, vscalar(1.0), s) == 0.0);
}

TEST_CASE("terminal slice is exact") {
  auto D = tanh_data(0.3, 0.7);
  D.eps_g = 0.1;
  const auto m = make(D);
  const auto mu = atoms({1.0, 2.0});
  const double g = m->terminal(vscalar(1.3), features(mu)).g;
  CHECK(value(*m, 1.0, vscalar(1.3), mu, settings(10, 10)) == g);
  CHECK(grad_value(*m, 1.0, vscalar(1.3), mu, settings(10, 10)).DxV(0) == m->terminal(vscalar(1.3), features(mu)).gx(0));
  const auto smooth = make(tanh_data(0.3, 0.7));
  CHECK(decoupling_check(*smooth, 0.0, mu, 1.0, vscalar(1.3), settings(10, 100)) == 0.0);
}

TEST_CASE("tanh model value, gradient and time derivative against the LQ oracle") {
  const auto D = tanh_data();
  const auto m = make(D);
  const auto mu = atoms({1.0});
  const auto s = settings(50, 2000);
  const ValuePipeline P(*m, 0.0, mu, s);
  CHECK(rel(P.value(vscalar(1.0)), lq_value(D, 0, 1.0, mu)) <= 2e-2);
  const auto g = P.grad(vscalar(1.0));
  CHECK(rel(g.DxV(0), kTanh1) <= 2e-2);
  CHECK(rel(g.Dx2V(0, 0), kTanh1) <= 2e-2);
  CHECK(g.asymmetry == 0.0);
  CHECK(rel(P.dt_value(vscalar(1.0)), kTanhDt) <= 5e-2);
  // finite differences with common random numbers
  const double h = 0.05;
  const double fd = (P.value(vscalar(1.0 + h)) - P.value(vscalar(1.0 - h))) / (2 * h);
  CHECK(rel(fd, g.DxV(0)) <= 1e-2);
  const double e = 0.02;
  const double fdt = (value(*m, e, vscalar(1.0), mu, s) - P.value(vscalar(1.0))) / e;
  CHECK(rel(fdt, P.dt_value(vscalar(1.0))) <= 5e-2);
}

TEST_CASE("master residual, DPP and decoupling on the tanh model") {
  const auto m = make(tanh_data());
  const auto mu = atoms({1.0});
  const auto s = settings(20, 1000);
  const auto r = master_residual(*m, 0.3, vscalar(1.5), mu, s);
  CHECK(std::abs(r.residual) <= 0.05 * (1 + 1.5 * 1.5));
  CHECK(r.integral == 0.0);
  CHECK(std::abs(r.dt_formula + r.H) == 0.0);
  CHECK(dpp_check(*m, 0.0, vscalar(1.0), mu, 0.1, s) <= 1e-2);
  CHECK(dpp_check(*m, 0.0, vscalar(1.0), mu, 0.0, s) == 0.0);
  CHECK(dpp_check(*m, 0.0, vscalar(1.0), mu, 1.0, s) <= 1e-12);
  CHECK_THROWS_AS(dpp_check(*m, 0.0, vscalar(1.0), mu, 0.07, s), Error);
  CHECK(std::abs(decoupling_check(*m, 0.0, mu, 0.5, vscalar(1.2), s)) <= 0.05 * (1 + 1.44));
  CHECK(std::abs(decoupling_check(*m, 0.0, mu, 0.0, vscalar(-0.8), s)) <= 0.05 * (1 + 0.64));
}

TEST_CASE("measure derivative vanishes without measure coupling") {
  const auto m = make(tanh_data());
  const auto l = lfd_value(*m, 0.0, vscalar(1.0), atoms({1.0}), {vscalar(0.3)}, true, settings(20, 500));
  REQUIRE(l.size() == 1);
  CHECK(l[0].D1(0) == 0.0);
  CHECK((*l[0].D2)(0, 0) == 0.0);
}

TEST_CASE("mean-coupled measure derivative against the LQ oracle and atom shifts") {
  const auto D = mean_coupled();
  const auto m = make(D);
  const auto mu = atoms({-0.5, 1.0});
  const auto s = settings(25, 1000);
  const ValuePipeline P(*m, 0.0, mu, s);
  const auto lq = lq_from_moment(D);
  const TimeGrid fine(0, 1, 1000);
  std::vector<double> d1;
  for (double x : {0.0, 1.0, 2.0}) {
    const auto l = P.lfd(vscalar(x), vscalar(0.3), true);
    CHECK(rel(l.D1(0), lq_mean_sensitivity(lq, fine, mu, vscalar(x))(0)) <= 5e-2);
    CHECK(std::abs((*l.D2)(0, 0)) <= 1e-10);
    d1.push_back(l.D1(0));
  }
  CHECK(std::abs(d1[0] - 2 * d1[1] + d1[2]) <= 1e-3 * std::abs(d1[2] - d1[0]));  // affine in x
  CHECK(P.lfd(vscalar(1.0), vscalar(-2.0), false).D1(0) == doctest::Approx(d1[1]).epsilon(1e-10));  // constant in y
  // shift one of the two atoms by eps: the mean moves by eps / 2
  const double eps = 0.1;
  const double dV = value(*m, 0.0, vscalar(1.0), atoms({-0.5, 1.0 + eps}), s) - P.value(vscalar(1.0));
  CHECK(rel(dV / (eps / 2), d1[1]) <= 5e-2);
}

TEST_CASE("mean-coupled time derivative against the LQ oracle") {
  const auto D = mean_coupled();
  const auto m = make(D);
  const auto mu = atoms({-0.5, 1.0});
  const double h = 1e-3;
  const double oracle = (lq_value(D, h, 0.7, mu) - lq_value(D, 0.0, 0.7, mu)) / h;
  const ValuePipeline P(*m, 0.0, mu, settings(25, 1000));
  CHECK(rel(P.dt_value(vscalar(0.7)), oracle) <= 5e-2);
  CHECK(P.measure_integral(vscalar(0.7)) != 0.0);
}

TEST_CASE("second-order measure derivative matches differences in y") {
  const auto m = make(mean_coupled(0.3));
  const auto mu = atoms({-0.5, 1.0});
  const ValuePipeline P(*m, 0.0, mu, settings(25, 1000));
  const double y = 0.4, h = 0.01;
  const auto l = P.lfd(vscalar(0.7), vscalar(y), true);
  const double fd = (P.lfd(vscalar(0.7), vscalar(y + h), false).D1(0) - P.lfd(vscalar(0.7), vscalar(y - h), false).D1(0)) / (2 * h);
  CHECK(rel((*l.D2)(0, 0), fd) <= 1e-3);
  CHECK(std::abs(fd) > 1e-2);
}

TEST_CASE("value is invariant under permutation of the atoms") {
  const auto m = make(mean_coupled());
  const auto s = settings(10, 200);
  CHECK(value(*m, 0.0, vscalar(0.5), atoms({-0.5, 1.0, 2.0}), s) == value(*m, 0.0, vscalar(0.5), atoms({2.0, -0.5, 1.0}), s));
}

TEST_CASE("time derivative needs sigma2 = 0") {
  auto D = tanh_data();
  D.S2[0] = scalar(0.1);
  const auto m = make(D);
  const ValuePipeline P(*m, 0.0, atoms({1.0}), settings(10, 100));
  CHECK_THROWS_AS(P.dt_value(vscalar(1.0)), MissingA4);
}
