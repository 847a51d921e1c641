#include <algorithm>
#include <cmath>
#include <numeric>
#include <sstream>
#include <vector>

#include "bimrl/neuromem.h"
#include "doctest.h"
#include "test_util.h"

using namespace bimrl;
using bimrl::testing::leaf_grad_error;
using bimrl::testing::param_grad_check;
using bimrl::testing::random_mat;

namespace {

Mat double_loop_update(const Mat& w, const Vec& key, const Vec& value, double gp, double gm,
                       double wmax) {
  Mat out = w;
  for (Eigen::Index k = 0; k < w.rows(); ++k) {
    for (Eigen::Index l = 0; l < w.cols(); ++l) {
      const double dw =
          gp * (wmax - w(k, l)) * value(k) * key(l) - gm * w(k, l) * key(l) * key(l);
      out(k, l) = w(k, l) + dw;
    }
  }
  return out;
}

MemoryDims tiny_dims() {
  MemoryDims d;
  d.key_dim = 5;
  d.value_dim = 6;
  d.query_dim = 6;
  d.heads = 2;
  d.head_dim = 3;
  d.combine_dim = 4;
  return d;
}

}  // namespace

TEST_CASE("hebbian update matches the element-wise oracle") {
  Rng rng(1);
  for (int trial = 0; trial < 100; ++trial) {
    const int dv = rng.uniform_int(1, 9), dk = rng.uniform_int(1, 9);
    HebbianStore s{random_mat(dv, dk, rng), rng.uniform(0.0, 0.5), rng.uniform(0.0, 0.5),
                   rng.uniform(0.1, 2.0)};
    Vec key = random_mat(dk, 1, rng), value = random_mat(dv, 1, rng);
    Mat expect = double_loop_update(s.w_assoc, key, value, s.gamma_plus, s.gamma_minus, s.w_max);
    CHECK((hebbian_update(s, key, value) - expect).cwiseAbs().maxCoeff() < 1e-6);

    ad::Tape tape;
    ad::Var w = ad::hebbian_step(tape.constant(s.w_assoc), value, key,
                                 tape.constant(s.gamma_plus), tape.constant(s.gamma_minus),
                                 tape.constant(s.w_max));
    CHECK((w.value() - expect).cwiseAbs().maxCoeff() < 1e-12);
  }
}

TEST_CASE("hebbian worked examples") {
  HebbianStore s{Mat::Zero(1, 1), 0.1, 0.01, 1.0};
  Vec one = Vec::Ones(1);
  CHECK(hebbian_update(s, one, one)(0, 0) == doctest::Approx(0.1).epsilon(1e-12));
  Rng rng(2);
  HebbianStore r{random_mat(3, 2, rng), 0.3, 0.2, 1.5};
  Vec key(2);
  key << 0.0, 1.0;
  Mat w1 = hebbian_update(r, key, random_mat(3, 1, rng));
  CHECK((w1.col(0) - r.w_assoc.col(0)).norm() == 0.0);
  HebbianStore sat{Mat::Constant(2, 2, 1.0), 0.5, 0.0, 1.0};
  CHECK(hebbian_update(sat, Vec::Ones(2), Vec::Ones(2)) == sat.w_assoc);
  CHECK_THROWS_AS(hebbian_update(s, Vec::Ones(2), one), ShapeError);
}

TEST_CASE("soft bound with gamma_minus = 0 and non-negative inputs") {
  Rng rng(3);
  for (int trial = 0; trial < 50; ++trial) {
    HebbianStore s{Mat::Zero(4, 3), rng.uniform(0.0, 1.0), 0.0, rng.uniform(0.2, 2.0)};
    for (Eigen::Index i = 0; i < s.w_assoc.size(); ++i) {
      s.w_assoc.data()[i] = rng.uniform(-1.0, s.w_max);
    }
    for (int step = 0; step < 30; ++step) {
      // gamma_plus * v_k * k_l <= 1 keeps each step a convex move toward w_max.
      Vec key(3), value(4);
      for (int i = 0; i < 3; ++i) key(i) = rng.uniform();
      for (int i = 0; i < 4; ++i) value(i) = rng.uniform();
      s.w_assoc = hebbian_update(s, key, value);
      CHECK(s.w_assoc.maxCoeff() <= s.w_max + 1e-12);
    }
  }
}

TEST_CASE("episodic write and eviction") {
  EpisodicMemory m(3);
  for (int i = 0; i < 5; ++i) m.write(Vec::Constant(2, i), Vec::Constant(1, i), i + 1);
  CHECK(m.size() == 3);
  CHECK(m.slot(0).key(0) == 2.0);
  CHECK(m.slot(2).written_at == 5);
  CHECK(m.slot(1).attention_mass == 0.0);
  CHECK_THROWS_AS(m.write(Vec::Zero(3), Vec::Zero(1), 6), ShapeError);
  m.clear();
  CHECK(m.empty());
  CHECK_THROWS_AS(EpisodicMemory(0), ContractError);
}

TEST_CASE("reference times") {
  EpisodicMemory m(8);
  m.write(Vec::Zero(2), Vec::Zero(2), 2);
  m.write(Vec::Ones(2), Vec::Zero(2), 3);
  for (int t = 3; t <= 6; ++t) m.add_attention((Vec(2) << 0.5, 0.0).finished());
  Vec r = reference_times(m, 6);
  CHECK(r(0) == doctest::Approx(0.5).epsilon(1e-12));
  CHECK(r(1) == 0.0);

  // Final-step slot and linearity.
  EpisodicMemory f(8);
  f.write(Vec::Zero(1), Vec::Zero(1), 6);
  f.add_attention(Vec::Constant(1, 0.7));
  CHECK(reference_times(f, 6)(0) == 0.0);

  Rng rng(4);
  EpisodicMemory a(16), b(16), doubled(16);
  const int n = 7;
  std::vector<int> at(n);
  std::vector<double> mass(n);
  for (int i = 0; i < n; ++i) {
    at[i] = rng.uniform_int(1, 10);
    mass[i] = rng.uniform();
  }
  std::vector<int> perm(n);
  std::iota(perm.begin(), perm.end(), 0);
  std::reverse(perm.begin(), perm.end());
  std::swap(perm[1], perm[4]);
  for (int i = 0; i < n; ++i) {
    a.write(Vec::Constant(1, i), Vec::Zero(1), at[i]);
    doubled.write(Vec::Constant(1, i), Vec::Zero(1), at[i]);
    b.write(Vec::Constant(1, perm[i]), Vec::Zero(1), at[perm[i]]);
  }
  Vec wa(n), wb(n);
  for (int i = 0; i < n; ++i) {
    wa(i) = mass[i];
    wb(i) = mass[perm[i]];
  }
  a.add_attention(wa);
  doubled.add_attention(2.0 * wa);
  b.add_attention(wb);
  Vec ra = reference_times(a, 12), rb = reference_times(b, 12), rd = reference_times(doubled, 12);
  for (int i = 0; i < n; ++i) {
    CHECK(rb(i) == ra(perm[i]));
    CHECK(rd(i) == doctest::Approx(2.0 * ra(i)));
  }
}

TEST_CASE("consolidation selects the top fraction") {
  Vec r(2);
  r << 0.9, 0.1;
  CHECK(consolidation_order(r, 0.5) == std::vector<int>{0});
  Vec r2(2);
  r2 << 0.1, 0.9;
  CHECK(consolidation_order(r2, 0.5) == std::vector<int>{1});
  Rng rng(5);
  for (int trial = 0; trial < 100; ++trial) {
    const int n = rng.uniform_int(1, 40);
    const double f = rng.uniform(0.01, 1.0);
    Vec times(n);
    for (int i = 0; i < n; ++i) times(i) = rng.uniform();
    auto order = consolidation_order(times, f);
    CHECK(static_cast<int>(order.size()) == static_cast<int>(std::ceil(f * n - 1e-9)));
    std::vector<double> sorted(times.data(), times.data() + n);
    std::sort(sorted.begin(), sorted.end(), std::greater<>());
    for (std::size_t i = 0; i < order.size(); ++i) CHECK(times(order[i]) == sorted[i]);
  }
  CHECK(consolidation_order(Vec::Ones(8), 0.25).size() == 2);
  CHECK_THROWS_AS(consolidation_order(r, 0.0), ContractError);

  // Full fraction applies every slot once, in descending r order.
  EpisodicMemory m(8);
  for (int i = 0; i < 4; ++i) {
    m.write(random_mat(3, 1, rng), random_mat(2, 1, rng), i + 1);
  }
  Vec w(4);
  w << 0.3, 0.9, 0.1, 0.5;
  m.add_attention(w);
  HebbianStore s{Mat::Zero(2, 3), 0.1, 0.01, 1.0};
  HebbianStore expect = s;
  for (int i : consolidation_order(reference_times(m, 8), 1.0)) {
    expect.w_assoc = hebbian_update(expect, m.slot(i).key, m.slot(i).value);
  }
  consolidate(m, s, 1.0, 8);
  CHECK(m.empty());
  CHECK((s.w_assoc - expect.w_assoc).norm() == 0.0);

  // Only selected slots change W.
  EpisodicMemory two(4);
  Vec k0 = Vec::Unit(3, 0), k1 = Vec::Unit(3, 1);
  two.write(k0, Vec::Ones(2), 1);
  two.write(k1, Vec::Ones(2), 1);
  Vec tw(2);
  tw << 0.9, 0.1;
  two.add_attention(tw);
  HebbianStore h{Mat::Zero(2, 3), 0.1, 0.01, 1.0};
  consolidate(two, h, 0.5, 2);
  CHECK(h.w_assoc.col(0).isApproxToConstant(0.1));
  CHECK(h.w_assoc.col(1).isZero(0.0));

  EpisodicMemory empty(4);
  HebbianStore untouched = h;
  consolidate(empty, untouched, 0.5, 4);
  CHECK(untouched.w_assoc == h.w_assoc);
}

TEST_CASE("hebbian read") {
  HebbianStore s{Mat::Zero(3, 4), 0.1, 0.0, 1.0};
  Rng rng(6);
  CHECK(read_hebbian(s, random_mat(4, 1, rng)).isZero(0.0));
  Vec k = Vec::Unit(4, 2), v = random_mat(3, 1, rng);
  s.w_assoc = hebbian_update(s, k, v);
  Vec out = read_hebbian(s, k);
  CHECK((out - s.gamma_plus * s.w_max * v * k.squaredNorm()).norm() < 1e-12);
  Vec a = random_mat(4, 1, rng), b = random_mat(4, 1, rng);
  CHECK((read_hebbian(s, 2.0 * a - b) - (2.0 * read_hebbian(s, a) - read_hebbian(s, b))).norm() <
        1e-12);
  CHECK_THROWS_AS(read_hebbian(s, Vec::Zero(3)), ShapeError);
}

TEST_CASE("episodic attention read") {
  Rng rng(7);
  ParameterStore store;
  MemoryModule mod(store, rng, tiny_dims());
  EpisodicMemory m(8);
  Vec q = random_mat(6, 1, rng);
  auto [empty_out, empty_w] = mod.read_episodic(m, q);
  CHECK(empty_out.isZero(0.0));
  CHECK(empty_w.size() == 0);

  Vec key = random_mat(5, 1, rng), value = random_mat(6, 1, rng);
  m.write(key, value, 1);
  auto [out, w] = mod.read_episodic(m, q);
  REQUIRE(w.size() == 1);
  CHECK(w(0) == doctest::Approx(1.0));
  const Parameter& vw = *store.find("mem.value_proj.w");
  const Parameter& vb = *store.find("mem.value_proj.b");
  const Parameter& ow = *store.find("mem.out_proj.w");
  const Parameter& ob = *store.find("mem.out_proj.b");
  Vec expect = ow.value * (vw.value * value + vb.value) + ob.value;
  CHECK((out - expect).norm() < 1e-12);
  CHECK(m.slot(0).attention_mass == doctest::Approx(1.0));

  m.write(key, random_mat(6, 1, rng), 2);
  auto [out2, w2] = mod.read_episodic(m, q);
  CHECK(w2(0) == doctest::Approx(0.5));
  CHECK(w2(1) == doctest::Approx(0.5));
  for (int i = 0; i < 5; ++i) m.write(random_mat(5, 1, rng), random_mat(6, 1, rng), 3 + i);
  auto [out3, w3] = mod.read_episodic(m, q);
  CHECK(std::abs(w3.sum() - 1.0) < 1e-6);
  CHECK((w3.array() >= 0.0).all());
}

TEST_CASE("two-way combine") {
  Rng rng(8);
  ParameterStore store;
  MemoryModule mod(store, rng, tiny_dims());
  Vec q = random_mat(6, 1, rng), a = random_mat(6, 1, rng), b = random_mat(6, 1, rng);
  Vec w;
  Vec same = mod.combine(q, a, a, &w);
  CHECK((same - a).norm() < 1e-12);
  Vec out = mod.combine(q, a, b, &w);
  REQUIRE(w.size() == 2);
  CHECK(std::abs(w.sum() - 1.0) < 1e-12);
  CHECK(((w.array() >= 0.0) && (w.array() <= 1.0)).all());
  CHECK((out - (b + w(0) * (a - b))).norm() < 1e-12);
  CHECK_THROWS_AS(mod.combine(q, Vec::Zero(3), b), ShapeError);
}

TEST_CASE("memory gradients and meta-plasticity") {
  Rng rng(9);
  ParameterStore store;
  MemoryModule mod(store, rng, tiny_dims());
  HebbianStore init = mod.make_store();
  CHECK(init.gamma_plus == doctest::Approx(0.1).epsilon(1e-12));
  CHECK(init.gamma_minus == doctest::Approx(0.01).epsilon(1e-12));
  CHECK(init.w_max == doctest::Approx(1.0).epsilon(1e-12));
  CHECK(init.w_assoc.isZero(0.0));

  std::vector<Vec> keys, values;
  for (int i = 0; i < 4; ++i) {
    keys.push_back(random_mat(5, 1, rng));
    values.push_back(random_mat(6, 1, rng));
  }
  Vec q = random_mat(6, 1, rng);
  auto loss = [&](ad::Tape& t) {
    std::vector<ad::Var> pk, pv;
    for (int i = 0; i < 4; ++i) {
      pk.push_back(mod.project_key(t, keys[i]));
      pv.push_back(mod.project_value(t, values[i]));
    }
    ad::Var query = t.constant(q);
    ad::Var epi = mod.read_projected(t, pk, pv, query, nullptr);
    ad::Var w = t.constant(Mat::Zero(6, 5));
    for (int i = 0; i < 2; ++i) {
      w = ad::hebbian_step(w, values[i], keys[i], mod.gamma_plus(t), mod.gamma_minus(t),
                           mod.w_max(t));
    }
    ad::Var heb = ad::matmul(w, t.constant(keys[3]));
    return ad::sum(ad::square(mod.combine(t, query, epi, heb)));
  };
  auto report = param_grad_check(store, loss, 40, rng);
  CHECK(report.worst_rel_error < 1e-3);
  for (const char* name : {"mem.gamma_plus", "mem.gamma_minus", "mem.w_max"}) {
    Parameter* p = store.find(name);
    REQUIRE(p);
    CHECK(p->grad.size() == 1);
    CHECK(std::abs(p->grad(0, 0)) > 0.0);
  }
}

TEST_CASE("memory serialization round trip") {
  Rng rng(10);
  EpisodicMemory m(5);
  for (int i = 0; i < 3; ++i) m.write(random_mat(4, 1, rng), random_mat(2, 1, rng), i);
  m.add_attention(Vec::LinSpaced(3, 0.1, 0.3));
  HebbianStore s{random_mat(2, 4, rng), 0.2, 0.03, 1.4};
  std::stringstream buf;
  write_memory(buf, m, s);
  EpisodicMemory m2;
  HebbianStore s2;
  read_memory(buf, m2, s2);
  REQUIRE(m2.size() == 3);
  CHECK(m2.capacity() == 5);
  for (std::size_t i = 0; i < 3; ++i) {
    CHECK(m2.slot(i).key == m.slot(i).key);
    CHECK(m2.slot(i).value == m.slot(i).value);
    CHECK(m2.slot(i).written_at == m.slot(i).written_at);
    CHECK(m2.slot(i).attention_mass == m.slot(i).attention_mass);
  }
  CHECK(s2.w_assoc == s.w_assoc);
  CHECK(s2.w_max == s.w_max);
}
