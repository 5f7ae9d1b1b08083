#include "doctest.h"
#include "support.hpp"

#include "forgetlab/errors.hpp"
#include "forgetlab/optim.hpp"

#include <cmath>

using namespace forgetlab;
using namespace forgetlab::optim;
using numerics::Array;
using numerics::Rng;

namespace {

/// Textbook scalar Adam with decoupled decay.
struct ScalarAdam {
  double m = 0, v = 0;
  int t = 0;
  double step(double theta, double g, const AdamWConfig& c) {
    ++t;
    m = c.beta1 * m + (1 - c.beta1) * g;
    v = c.beta2 * v + (1 - c.beta2) * g * g;
    const double mh = m / (1 - std::pow(c.beta1, t));
    const double vh = v / (1 - std::pow(c.beta2, t));
    return theta - c.lr * (mh / (std::sqrt(vh) + c.eps) + c.weight_decay * theta);
  }
};

model::ModelConfig small_model() {
  model::ModelConfig cfg;
  cfg.n_layers = 2;
  cfg.d_model = 8;
  cfg.d_ff = 16;
  cfg.vocab_size = 22;
  return cfg;
}

double group_norm(const Array& a) {
  double s = 0;
  for (double x : a.values()) s += x * x;
  return std::sqrt(s);
}

}  // namespace

TEST_SUITE("adamw") {
  TEST_CASE("single-step hand oracle") {
    Array theta = Array::vector({1.0});
    Array* ps[] = {&theta};
    const Array g = Array::vector({1.0});
    OptState st = OptState::zeros_like(std::span<const Array>(&theta, 1));
    AdamWConfig cfg;
    cfg.weight_decay = 0.01;
    adamw_step(ps, std::span<const Array>(&g, 1), st, cfg);
    CHECK(std::abs(theta[0] - (1.0 - 5.05e-5)) < 1e-12);
    CHECK(st.t == 1);
    CHECK(st.m[0][0] == doctest::Approx(0.1));
    CHECK(st.v[0][0] == doctest::Approx(0.001));
  }

  TEST_CASE("matches a scalar reference over many steps") {
    for (double wd : {0.0, 0.01, 0.1}) {
      AdamWConfig cfg;
      cfg.lr = 1e-2;
      cfg.weight_decay = wd;
      Rng rng(1);
      Array theta = testing::random_array({5}, rng);
      std::vector<double> ref(theta.values().begin(), theta.values().end());
      std::vector<ScalarAdam> oracle(5);
      OptState st = OptState::zeros_like(std::span<const Array>(&theta, 1));
      Array* ps[] = {&theta};
      for (int step = 0; step < 200; ++step) {
        Array g = testing::random_array({5}, rng);
        for (std::size_t i = 0; i < 5; ++i) g[i] += theta[i];
        for (std::size_t i = 0; i < 5; ++i) ref[i] = oracle[i].step(ref[i], g[i], cfg);
        adamw_step(ps, std::span<const Array>(&g, 1), st, cfg);
      }
      for (std::size_t i = 0; i < 5; ++i) CHECK(theta[i] == doctest::Approx(ref[i]).epsilon(1e-12));
    }
  }

  TEST_CASE("weight decay is decoupled from the gradient moments") {
    AdamWConfig with, without;
    with.weight_decay = 0.1;
    without.weight_decay = 0.0;
    Array a = Array::vector({2.0}), b = Array::vector({2.0});
    Array* pa[] = {&a};
    Array* pb[] = {&b};
    OptState sa = OptState::zeros_like(std::span<const Array>(&a, 1));
    OptState sb = sa;
    const Array g = Array::vector({0.5});
    adamw_step(pa, std::span<const Array>(&g, 1), sa, with);
    adamw_step(pb, std::span<const Array>(&g, 1), sb, without);
    CHECK(sa.m == sb.m);
    CHECK(sa.v == sb.v);
    CHECK(b[0] - a[0] == doctest::Approx(with.lr * 0.1 * 2.0).epsilon(1e-9));
  }

  TEST_CASE("non-finite gradient aborts without mutation") {
    Array a = Array::vector({1.0, 2.0}), b = Array::vector({3.0});
    Array* ps[] = {&a, &b};
    OptState st = OptState::zeros_like(std::vector<Array>{a, b});
    st.t = 4;
    const OptState before = st;
    for (double bad : {NAN, INFINITY, -INFINITY}) {
      const std::vector<Array> g{Array::vector({0.1, 0.2}), Array::vector({bad})};
      CHECK_THROWS_AS(adamw_step(ps, g, st, AdamWConfig{}), NumericError);
      CHECK(a == Array::vector({1.0, 2.0}));
      CHECK(b == Array::vector({3.0}));
      CHECK(st == before);
    }
  }

  TEST_CASE("shape mismatches and bad hyperparameters") {
    Array a = Array::vector({1.0, 2.0});
    Array* ps[] = {&a};
    OptState st = OptState::zeros_like(std::span<const Array>(&a, 1));
    const Array g = Array::vector({1.0});
    CHECK_THROWS_AS(adamw_step(ps, std::span<const Array>(&g, 1), st, AdamWConfig{}), DimensionError);
    AdamWConfig cfg;
    cfg.beta1 = 1.0;
    CHECK_THROWS_AS(cfg.validate(), ConfigError);
    cfg = {};
    cfg.lr = 0;
    CHECK_THROWS_AS(cfg.validate(), ConfigError);
    cfg = {};
    cfg.weight_decay = -0.1;
    CHECK_THROWS_AS(cfg.validate(), ConfigError);
  }
}

TEST_SUITE("forgetting") {
  TEST_CASE("should_reset") {
    const auto vanilla = ForgettingSchedule::vanilla();
    const auto active = ForgettingSchedule::active(1000);
    const auto temp = ForgettingSchedule::temporary(1000, 3000);
    for (std::uint64_t s : {0ull, 1ull, 999ull, 1000ull, 5000ull, 60000ull}) CHECK_FALSE(should_reset(s, vanilla));
    CHECK_FALSE(should_reset(0, active));
    CHECK_FALSE(should_reset(999, active));
    CHECK(should_reset(1000, active));
    CHECK(should_reset(59000, active));
    CHECK(should_reset(3000, temp));
    CHECK_FALSE(should_reset(3001, temp));
    CHECK_FALSE(should_reset(4000, temp));
  }

  TEST_CASE("active resets in T steps equal floor(T/k)") {
    for (std::uint64_t k : {1ull, 7ull, 1000ull})
      for (std::uint64_t T : {0ull, 6ull, 7ull, 6999ull, 60000ull}) {
        std::uint64_t n = 0;
        for (std::uint64_t s = 1; s <= T; ++s) n += should_reset(s, ForgettingSchedule::active(k));
        CHECK(n == T / k);
      }
  }

  TEST_CASE("temporary forgetting stops after the horizon") {
    const auto temp = ForgettingSchedule::temporary(500, 2600);
    std::uint64_t n = 0, last = 0;
    for (std::uint64_t s = 1; s <= 10000; ++s)
      if (should_reset(s, temp)) {
        ++n;
        last = s;
      }
    CHECK(n == 5);
    CHECK(last == 2500);
  }

  TEST_CASE("schedule validation") {
    CHECK_THROWS_AS((ForgettingSchedule{ScheduleKind::Active, 0, kUnbounded}.validate()), ConfigError);
    CHECK_THROWS_AS((ForgettingSchedule{ScheduleKind::Vanilla, 1000, 5}.validate()), ConfigError);
    CHECK_THROWS_AS((ForgettingSchedule{ScheduleKind::Temporary, 1000, kUnbounded}.validate()), ConfigError);
    CHECK_NOTHROW(ForgettingSchedule::temporary(1000, 20000).validate());
    CHECK(parse_schedule_kind("temporary") == ScheduleKind::Temporary);
    CHECK_THROWS_AS(parse_schedule_kind("sometimes"), ConfigError);
  }

  TEST_CASE("reset redraws the embedding and zeroes only its moments") {
    model::ModelConfig cfg = small_model();
    cfg.vocab_size = 10002;
    cfg.d_model = 64;
    cfg.d_ff = 16;
    Rng init(0);
    model::ModelParams p = model::init_params(cfg, init);
    OptState st = OptState::zeros_like(p);
    for (auto& m : st.m) m.fill(0.3);
    for (auto& v : st.v) v.fill(0.7);
    for (double& x : p.embedding.values()) x += 1.0;
    const model::ModelParams before = p;
    const OptState st_before = st;

    Rng rng(9);
    reset_embeddings(p, st, rng);

    double s = 0, s2 = 0;
    for (double x : p.embedding.values()) {
      s += x;
      s2 += x * x;
    }
    const double n = static_cast<double>(p.embedding.size());
    CHECK(std::abs(s / n) < 1e-3);
    CHECK(std::abs(std::sqrt(s2 / n - (s / n) * (s / n)) - 0.02) < 0.001);
    for (double x : st.m[0].values()) CHECK(x == 0.0);
    for (double x : st.v[0].values()) CHECK(x == 0.0);
    CHECK(st.t == st_before.t);
    CHECK(p.position == before.position);
    for (std::size_t g = 1; g < st.m.size(); ++g) {
      CHECK(st.m[g] == st_before.m[g]);
      CHECK(st.v[g] == st_before.v[g]);
    }
    std::vector<const Array*> a, b;
    p.for_each([&](const Array& x) { a.push_back(&x); });
    before.for_each([&](const Array& x) { b.push_back(&x); });
    for (std::size_t g = 1; g < a.size(); ++g) CHECK(group_norm(*a[g]) == group_norm(*b[g]));
  }

  TEST_CASE("reset covers reserved rows") {
    model::ModelConfig cfg = small_model();
    cfg.reserved_rows = 5;
    Rng init(0);
    model::ModelParams p = model::init_params(cfg, init);
    REQUIRE(p.embedding.rows() == 27);
    for (double& x : p.embedding.values()) x = 9.0;
    OptState st = OptState::zeros_like(p);
    Rng rng(1);
    reset_embeddings(p, st, rng);
    for (std::size_t j = 0; j < cfg.d_model; ++j) CHECK(std::abs(p.embedding(26, j)) < 0.2);
  }

  TEST_CASE("reset draws depend only on the reset stream") {
    const model::ModelConfig cfg = small_model();
    Rng init(0);
    model::ModelParams p = model::init_params(cfg, init);
    model::ModelParams q = p;
    OptState sp = OptState::zeros_like(p), sq = sp;
    Rng r1(5), r2(5);
    reset_embeddings(p, sp, r1);
    reset_embeddings(q, sq, r2);
    CHECK(p.embedding == q.embedding);
    reset_embeddings(p, sp, r1);
    CHECK_FALSE(p.embedding == q.embedding);
  }
}
