#include <algorithm>
#include <cmath>
#include <vector>

#include "bimrl/curiosity.h"
#include "doctest.h"
#include "test_util.h"

using namespace bimrl;
using bimrl::testing::random_mat;

TEST_CASE("curiosity term examples") {
  CuriosityWeights eq;
  CHECK(curiosity_term(0, 0, 0, eq) == 0.0);
  CHECK(curiosity_term(3, 0, 0, CuriosityWeights{1, 0, 0}) == 3.0);
  // Equal weights over errors (state 1, action 2, reward 3).
  CHECK(curiosity_term(1, 2, 3, eq) == doctest::Approx(2.0).epsilon(1e-12));
  CHECK(curiosity_term(-5, 0, 0, CuriosityWeights{1, 0, 0}) == 0.0);
}

TEST_CASE("simplex projection") {
  auto w = project_to_simplex(1, 1, 1);
  CHECK(w.state == doctest::Approx(1.0 / 3));
  CHECK(w.reward == doctest::Approx(1.0 / 3));
  w = project_to_simplex(2, 0, 0);
  CHECK(w.state == doctest::Approx(1.0));
  CHECK(w.action == 0.0);
  w = project_to_simplex(0.2, 0.5, 0.3);
  CHECK(w.action == doctest::Approx(0.5));
  Rng rng(1);
  for (int i = 0; i < 200; ++i) {
    auto p = project_to_simplex(rng.normal(), rng.normal(), rng.normal());
    CHECK(p.state >= 0.0);
    CHECK(p.action >= 0.0);
    CHECK(p.reward >= 0.0);
    CHECK(std::abs(p.state + p.action + p.reward - 1.0) < 1e-12);
    auto again = project_to_simplex(p.state, p.action, p.reward);
    CHECK(again.state == doctest::Approx(p.state));
  }
}

TEST_CASE("newness") {
  std::vector<Vec> keys{Vec::Zero(2), (Vec(2) << 3.0, 4.0).finished()};
  CHECK(newness(Vec::Zero(2), keys, 1) == 0.0);
  CHECK(newness(Vec::Zero(2), keys, 2) == 5.0);
  CHECK(newness(Vec::Zero(2), std::vector<Vec>{}, 1, 1.0) == 1.0);
  CHECK(newness(Vec::Zero(2), keys, 3, 0.7) == 0.7);
  CHECK_THROWS_AS(newness(Vec::Zero(2), keys, 0), ContractError);

  Rng rng(2);
  for (int trial = 0; trial < 100; ++trial) {
    const int n = rng.uniform_int(1, 30);
    std::vector<Vec> ks;
    for (int i = 0; i < n; ++i) ks.push_back(random_mat(4, 1, rng));
    Vec q = random_mat(4, 1, rng);
    std::vector<double> d;
    for (const Vec& k : ks) d.push_back(std::sqrt((k - q).squaredNorm()));
    std::sort(d.begin(), d.end());
    const int k = rng.uniform_int(1, n + 1);
    CHECK(newness(q, ks, k) == d[k - 1]);
  }
}

TEST_CASE("intrinsic reward") {
  CHECK(intrinsic_reward(0.0, 5.0, 0.1) == 0.0);
  CHECK(intrinsic_reward(3.0, 0.0, 0.1) == 0.0);
  CHECK(intrinsic_reward(2.0, 1.5, 0.1) == doctest::Approx(0.3).epsilon(1e-12));
  Rng rng(3);
  for (int i = 0; i < 200; ++i) {
    const double a = rng.uniform(-1, 3), c = rng.uniform(-1, 3), da = rng.uniform(), dc = rng.uniform();
    const double base = intrinsic_reward(a, c, 0.1);
    CHECK(base >= 0.0);
    CHECK(intrinsic_reward(a + da, c, 0.1) >= base);
    CHECK(intrinsic_reward(a, c + dc, 0.1) >= base);
  }
}

TEST_CASE("revisiting a stored observation earns nothing with k = 1") {
  Rng rng(4);
  EpisodicMemory m(16);
  std::vector<Vec> seen;
  for (int i = 0; i < 6; ++i) {
    seen.push_back(random_mat(5, 1, rng));
    m.write(seen.back(), Vec::Zero(3), i + 1);
  }
  for (const Vec& k : seen) {
    const double alpha = newness(k, m, 1);
    CHECK(alpha == 0.0);
    CHECK(intrinsic_reward(alpha, curiosity_term(0.4, 1.9, 0.2, CuriosityWeights{}), 0.1) == 0.0);
  }
  CHECK(newness(random_mat(5, 1, rng), m, 1) > 0.0);
}
