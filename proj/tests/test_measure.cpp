#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include "mfg/measure.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>
#include <sstream>

using namespace mfg;

namespace {

ParticleMeasure line(std::vector<double> xs) {
  Eigen::MatrixXd p(1, xs.size());
  for (std::size_t i = 0; i < xs.size(); ++i) p(0, i) = xs[i];
  return ParticleMeasure(p);
}

double brute_force_w2(const std::vector<double>& a, const std::vector<double>& b) {
  std::vector<int> perm(b.size());
  std::iota(perm.begin(), perm.end(), 0);
  double best = 1e300;
  do {
    double c = 0;
    for (std::size_t i = 0; i < a.size(); ++i) c += (a[i] - b[perm[i]]) * (a[i] - b[perm[i]]);
    best = std::min(best, c / a.size());
  } while (std::next_permutation(perm.begin(), perm.end()));
  return std::sqrt(best);
}

}  // namespace

TEST_CASE("w2 on small hand examples") {
  CHECK(w2_distance(line({0}), line({1})) == doctest::Approx(1.0));
  CHECK(w2_distance(line({0, 2}), line({1, 3})) == doctest::Approx(1.0));
  CHECK(w2_distance(line({3.5, -1, 2}), line({3.5, -1, 2})) == 0.0);
  CHECK(w2_distance(line({2.5}), ParticleMeasure::dirac(Eigen::VectorXd::Zero(1))) == doctest::Approx(2.5));
}

TEST_CASE("w2 with unequal particle counts in 1D") {
  // {0,1} vs {0.5}: both atoms at distance 0.5
  CHECK(w2_distance(line({0, 1}), line({0.5})) == doctest::Approx(0.5));
  // {0,0,3} vs {0,3}: quantile mismatch on a mass 1/6 band of width 3
  CHECK(w2_distance(line({0, 0, 3}), line({0, 3})) == doctest::Approx(std::sqrt(9.0 / 6.0)));
}

TEST_CASE("w2 errors") {
  Eigen::MatrixXd two(2, 3);
  two.setZero();
  CHECK_THROWS_AS(w2_distance(line({0, 1, 2}), ParticleMeasure(two)), DimensionError);
  CHECK_THROWS_AS(w2_distance(ParticleMeasure(Eigen::MatrixXd::Zero(2, 3)), ParticleMeasure(Eigen::MatrixXd::Zero(2, 2))),
                  UnsupportedCoupling);
}

TEST_CASE("w2 in 2D matches brute force over assignments") {
  std::mt19937_64 rng(7);
  std::normal_distribution<double> nd;
  for (int rep = 0; rep < 20; ++rep) {
    const int N = 5;
    Eigen::MatrixXd a(2, N), b(2, N);
    for (int i = 0; i < N; ++i) {
      a.col(i) << nd(rng), nd(rng);
      b.col(i) << nd(rng), nd(rng);
    }
    std::vector<int> perm(N);
    std::iota(perm.begin(), perm.end(), 0);
    double best = 1e300;
    do {
      double c = 0;
      for (int i = 0; i < N; ++i) c += (a.col(i) - b.col(perm[i])).squaredNorm();
      best = std::min(best, c / N);
    } while (std::next_permutation(perm.begin(), perm.end()));
    CHECK(w2_distance(ParticleMeasure(a), ParticleMeasure(b)) == doctest::Approx(std::sqrt(best)).epsilon(1e-12));
  }
}

TEST_CASE("w2 metric axioms on random 1D clouds") {
  std::mt19937_64 rng(11);
  std::uniform_int_distribution<int> sz(1, 32);
  std::normal_distribution<double> nd;
  double worst = 0.0;
  for (int rep = 0; rep < 200; ++rep) {
    auto cloud = [&] {
      std::vector<double> v(sz(rng));
      for (auto& x : v) x = nd(rng);
      return line(v);
    };
    auto a = cloud(), b = cloud(), c = cloud();
    CHECK(w2_distance(a, b) == w2_distance(b, a));
    CHECK(w2_distance(a, a) == 0.0);
    worst = std::max(worst, w2_distance(a, c) - w2_distance(a, b) - w2_distance(b, c));
  }
  CHECK(worst <= 1e-12);
}

TEST_CASE("1D quantile coupling equals permutation brute force") {
  std::mt19937_64 rng(3);
  std::normal_distribution<double> nd;
  for (int N = 1; N <= 6; ++N) {
    for (int rep = 0; rep < 10; ++rep) {
      std::vector<double> a(N), b(N);
      for (auto& x : a) x = nd(rng);
      for (auto& x : b) x = nd(rng);
      CHECK(w2_distance(line(a), line(b)) == doctest::Approx(brute_force_w2(a, b)).epsilon(1e-12));
    }
  }
}

TEST_CASE("moments") {
  CHECK(moment(line({-1, 1}), 1)(0, 0) == 0.0);
  CHECK(moment(line({-1, 1}), 2)(0, 0) == 1.0);
  CHECK(moment(line({0, 1, 2}), 1)(0, 0) == doctest::Approx(1.0));
  CHECK_THROWS_AS(moment(line({0}), 3), DimensionError);
  const auto f = features(line({1, 3}));
  CHECK(f.mean(0) == 2.0);
  CHECK(f.m2 == 5.0);
}

TEST_CASE("independent copy preserves the law") {
  std::mt19937_64 rng(5);
  auto m = line({0, 1, 4, 9});
  auto c = independent_copy(m, rng);
  CHECK(w2_distance(m, c) == 0.0);
  std::vector<double> xs(50);
  std::normal_distribution<double> nd(1.0, 1.0);
  for (auto& x : xs) x = nd(rng);
  auto big = line(xs);
  const double mean = moment(big, 1)(0, 0);
  double acc = 0;
  const int reps = 10000;
  for (int r = 0; r < reps; ++r) {
    auto cp = independent_copy(big, rng);
    acc += big.points().cwiseProduct(cp.points()).sum() / xs.size();
  }
  // a uniform permutation pairs atom i with atom j w.p. 1/N, so the mean pairing product is mean^2
  CHECK(acc / reps == doctest::Approx(mean * mean).epsilon(0.02));
}

TEST_CASE("invalid measures rejected") {
  CHECK_THROWS_AS(ParticleMeasure(Eigen::MatrixXd(1, 0)), DimensionError);
  Eigen::MatrixXd bad(1, 2);
  bad << 0, std::nan("");
  CHECK_THROWS_AS(ParticleMeasure{bad}, DimensionError);
  CHECK_THROWS_AS(ParticleMeasure(Eigen::MatrixXd::Zero(5, 2)), DimensionError);
}

TEST_CASE("csv round trip") {
  Eigen::MatrixXd p(2, 3);
  p << 0.1, -2, 1.0 / 3.0, 4, 5e-7, 6;
  std::stringstream ss;
  write_csv(ss, ParticleMeasure(p));
  const auto back = read_csv(ss);
  CHECK(back.points() == p);
}
