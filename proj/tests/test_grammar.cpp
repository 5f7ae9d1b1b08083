#include "doctest.h"
#include "support.hpp"

#include "forgetlab/errors.hpp"
#include "forgetlab/grammar.hpp"

#include <cmath>
#include <map>
#include <set>

using namespace forgetlab;
using namespace forgetlab::grammar;
using numerics::Rng;

namespace {

Lexicon make_lexicon(std::size_t v, double alpha, double eps, std::uint64_t seed = 0) {
  GrammarConfig cfg;
  cfg.v = v;
  cfg.alpha = alpha;
  cfg.epsilon = eps;
  cfg.seed = seed;
  return Lexicon(cfg);
}

}  // namespace

TEST_SUITE("zipf") {
  TEST_CASE("normalizes to one within 1e-12") {
    for (double alpha : {0.0, 0.5, 1.0001, 1.2, 1.5, 3.0})
      for (std::int64_t n : {1, 3, 500, 5000}) {
        const auto p = zipf_pmf(alpha, 1, n);
        double s = 0;
        for (double x : p) s += x;
        CHECK(std::abs(s - 1.0) < 1e-12);
      }
  }

  TEST_CASE("ratio law P(j)/P(k) = (k/j)^alpha") {
    const double alpha = 1.2;
    const auto p = zipf_pmf(alpha, 1, 1000);
    for (auto [j, k] : {std::pair{1, 2}, {3, 17}, {10, 1000}, {999, 1000}}) {
      const double ratio = p[j - 1] / p[k - 1];
      CHECK(ratio == doctest::Approx(std::pow(static_cast<double>(k) / j, alpha)).epsilon(1e-13));
    }
  }

  TEST_CASE("three ranks at alpha 1.5 by direct summation") {
    const double h = 1.0 + std::pow(2.0, -1.5) + std::pow(3.0, -1.5);
    const auto p = zipf_pmf(1.5, 1, 3);
    REQUIRE(p.size() == 3);
    CHECK(p[0] == doctest::Approx(1.0 / h).epsilon(1e-15));
    CHECK(p[1] == doctest::Approx(std::pow(2.0, -1.5) / h).epsilon(1e-15));
    CHECK(p[2] == doctest::Approx(std::pow(3.0, -1.5) / h).epsilon(1e-15));
    CHECK(p[0] == doctest::Approx(0.6468).epsilon(1e-3));
    CHECK(p[1] == doctest::Approx(0.2287).epsilon(1e-3));
    CHECK(p[2] == doctest::Approx(0.1245).epsilon(1e-3));
  }

  TEST_CASE("alpha 0 is uniform; empty support is a domain error") {
    for (double x : zipf_pmf(0.0, 5, 14)) CHECK(x == doctest::Approx(0.1).epsilon(1e-15));
    CHECK_THROWS_AS(zipf_pmf(1.0, 4, 3), DomainError);
  }
}

TEST_SUITE("lexicon") {
  TEST_CASE("token layout") {
    const Lexicon lex = make_lexicon(10000, 1.0001, 0.1);
    CHECK(lex.noun_id(1) == 0);
    CHECK(lex.noun_id(5000) == 4999);
    CHECK(lex.adj_id(1) == 5000);
    CHECK(lex.copula() == 10000);
    CHECK(lex.mask() == 10001);
    CHECK(lex.vocab_size() == 10002);
    CHECK(lex.rank_of(7) == 8);
    CHECK(lex.rank_of(5003) == 4);
    CHECK(lex.rank_of(10000) == 0);
    CHECK_THROWS_AS(lex.noun_id(0), IndexError);
    CHECK_THROWS_AS(lex.adj_id(5001), IndexError);
    CHECK(lex.stratum_size() == 500);
  }

  TEST_CASE("ambiguous count is ceil(eps * bin size) per bin") {
    const Lexicon lex = make_lexicon(10000, 1.0001, 0.1);
    CHECK(lex.ambiguous_count() >= 500);
    CHECK(lex.ambiguous_count() <= 510);
    std::size_t covered = 0;
    std::size_t expected_start = 1;
    for (const RankBin& b : lex.bins()) {
      CHECK(b.begin == expected_start);
      CHECK(b.size() >= 1);
      expected_start = b.end;
      covered += b.size();
      std::size_t amb = 0;
      for (std::size_t r = b.begin; r < b.end; ++r) amb += lex.ambiguous(r);
      CHECK(amb == static_cast<std::size_t>(std::ceil(0.1 * static_cast<double>(b.size()) - 1e-9)));
    }
    CHECK(covered == 5000);
    CHECK(lex.bins().size() == 10);
    CHECK(make_lexicon(10000, 1.0001, 0.0).ambiguous_count() == 0);
    CHECK(make_lexicon(1000, 1.0001, 1.0).ambiguous_count() == 500);
  }

  TEST_CASE("bins carry roughly equal mass") {
    const Lexicon lex = make_lexicon(10000, 1.0001, 0.1);
    for (const RankBin& b : lex.bins()) {
      double mass = 0;
      for (std::size_t r = b.begin; r < b.end; ++r) mass += lex.rank_probability(r);
      // the first bin is a handful of heavy ranks, so allow one rank of slack
      CHECK(mass == doctest::Approx(0.1).epsilon(0.35));
    }
  }

  TEST_CASE("fewer ranks than bins gives one rank per bin") {
    const Lexicon lex = make_lexicon(8, 1.5, 0.5);
    CHECK(lex.bins().size() == 4);
    for (const RankBin& b : lex.bins()) CHECK(b.size() == 1);
  }

  TEST_CASE("the lexicon is a pure function of its config") {
    const Lexicon a = make_lexicon(1000, 1.2, 0.1, 3), b = make_lexicon(1000, 1.2, 0.1, 3);
    const Lexicon c = make_lexicon(1000, 1.2, 0.1, 4);
    bool differs = false;
    for (std::size_t r = 1; r <= 500; ++r) {
      CHECK(a.ambiguous(r) == b.ambiguous(r));
      differs |= a.ambiguous(r) != c.ambiguous(r);
    }
    CHECK(differs);
  }

  TEST_CASE("sample_rank follows the pmf") {
    const Lexicon lex = make_lexicon(20, 1.5, 0.0);
    Rng rng(21);
    const int n = 200000;
    std::vector<int> counts(11, 0);
    for (int i = 0; i < n; ++i) ++counts[lex.sample_rank(rng)];
    for (std::size_t r = 1; r <= 10; ++r) {
      const double p = lex.rank_probability(r);
      const double sd = std::sqrt(p * (1 - p) / n);
      CHECK(std::abs(counts[r] / static_cast<double>(n) - p) < 5 * sd);
    }
  }

  TEST_CASE("config validation") {
    GrammarConfig cfg;
    cfg.v = 1001;
    CHECK_THROWS_AS(cfg.validate(), ConfigError);
    cfg.v = 2;
    CHECK_THROWS_AS(cfg.validate(), ConfigError);
    cfg = {};
    cfg.epsilon = 1.5;
    CHECK_THROWS_AS(cfg.validate(), ConfigError);
    cfg = {};
    cfg.alpha = -1;
    CHECK_THROWS_AS(cfg.validate(), ConfigError);
    cfg = {};
    cfg.n_bins = 0;
    CHECK_THROWS_AS(cfg.validate(), ConfigError);
  }
}

TEST_SUITE("examples") {
  TEST_CASE("noun-first noun query") {
    const Lexicon lex = make_lexicon(10000, 1.0001, 0.1);
    const Example ex = build_example(7, 5003, Order::NounFirst, Role::Noun, lex);
    CHECK(ex.tokens == Tokens{7, 10000, 5003, 7, 10001, 10001, 10001});
    CHECK(ex.targets == Triple{5003, 7, 7});
  }

  TEST_CASE("copula-first adjective query") {
    const Lexicon lex = make_lexicon(10000, 1.0001, 0.1);
    const Example ex = build_example(7, 5003, Order::CopulaFirst, Role::Adj, lex);
    CHECK(ex.tokens == Tokens{10000, 5003, 7, 5003, 10001, 10001, 10001});
    CHECK(ex.targets == Triple{5003, 5003, 5003});
    CHECK(ex.meta.noun_rank == 8);
    CHECK(ex.meta.adj_rank == 4);
  }

  TEST_CASE("sampled sentences round-trip through their tokens") {
    const Lexicon lex = make_lexicon(1000, 1.0001, 0.1);
    Rng rng(5);
    std::map<std::pair<Order, Role>, int> combos;
    for (int i = 0; i < 5000; ++i) {
      const Example ex = sample_example(lex, rng);
      const auto& m = ex.meta;
      const TokenId noun = m.order == Order::NounFirst ? ex.tokens[0] : ex.tokens[2];
      const TokenId adj = m.order == Order::NounFirst ? ex.tokens[2] : ex.tokens[1];
      CHECK(noun == m.noun);
      CHECK(adj == m.adj);
      CHECK(ex.tokens[m.order == Order::NounFirst ? 1 : 0] == lex.copula());
      CHECK(ex.tokens[3] == (m.query_role == Role::Noun ? noun : adj));
      for (std::size_t p : kMaskPositions) CHECK(ex.tokens[p] == lex.mask());
      CHECK(ex == build_example(m.noun, m.adj, m.order, m.query_role, lex));
      // unambiguous ranks keep their part of speech
      if (!lex.ambiguous(m.noun_rank)) CHECK(lex.is_noun(m.noun));
      if (!lex.ambiguous(m.adj_rank)) CHECK(lex.is_adj(m.adj));
      ++combos[{m.order, m.query_role}];
    }
    CHECK(combos.size() == 4);
    for (const auto& [_, n] : combos) CHECK(n == doctest::Approx(1250).epsilon(0.1));
  }

  TEST_CASE("ambiguous ranks appear in each part of speech about half the time") {
    const Lexicon lex = make_lexicon(20, 0.0, 0.5);
    Rng rng(8);
    int amb = 0, as_adj = 0;
    for (int i = 0; i < 40000; ++i) {
      const Example ex = sample_example(lex, rng);
      if (lex.ambiguous(ex.meta.noun_rank)) {
        ++amb;
        as_adj += lex.is_adj(ex.meta.noun);
      }
    }
    REQUIRE(amb > 1000);
    CHECK(static_cast<double>(as_adj) / amb == doctest::Approx(0.5).epsilon(0.05));
  }

  TEST_CASE("pair_probability sums to one over all slot occupants") {
    const Lexicon lex = make_lexicon(20, 1.2, 0.3);
    double s = 0;
    for (TokenId a = 0; a < 20; ++a)
      for (TokenId b = 0; b < 20; ++b) s += lex.pair_probability(a, b);
    CHECK(s == doctest::Approx(1.0).epsilon(1e-12));
  }
}

TEST_SUITE("registry") {
  TEST_CASE("digest ignores insertion order") {
    PairRegistry a, b;
    a.insert(1, 2);
    a.insert(3, 4);
    a.insert(1, 2);
    b.insert(3, 4);
    b.insert(1, 2);
    CHECK(a.size() == 2);
    CHECK(a.digest() == b.digest());
    CHECK(a.sorted_keys() == b.sorted_keys());
    CHECK(a.contains(1, 2));
    CHECK_FALSE(a.contains(2, 1));
    b.insert(5, 6);
    CHECK(a.digest() != b.digest());
  }
}

TEST_SUITE("eval sets") {
  TEST_CASE("strata respect rank ranges, ambiguity and the registry") {
    const Lexicon lex = make_lexicon(1000, 1.0001, 0.1);
    PairRegistry seen;
    Rng train(1);
    for (int i = 0; i < 20000; ++i) {
      const Example ex = sample_example(lex, train);
      seen.insert(ex.meta.noun, ex.meta.adj);
    }
    for (EvalKind kind : {EvalKind::Validation, EvalKind::Head, EvalKind::Tail, EvalKind::HeadSwitch,
                          EvalKind::TailSwitch}) {
      Rng rng(2);
      const EvalSet set = build_eval_set(kind, 300, lex, seen, rng);
      REQUIRE(set.size() == 300);
      CHECK(set.is_switch() == (kind == EvalKind::HeadSwitch || kind == EvalKind::TailSwitch));
      for (std::size_t i = 0; i < set.size(); ++i) {
        const auto& m = set.examples[i].meta;
        CHECK_FALSE(seen.contains(m.noun, m.adj));
        CHECK_FALSE(lex.ambiguous(m.noun_rank));
        CHECK_FALSE(lex.ambiguous(m.adj_rank));
        if (kind == EvalKind::Head || kind == EvalKind::HeadSwitch) {
          CHECK(lex.in_head(m.noun_rank));
          CHECK(lex.in_head(m.adj_rank));
        }
        if (kind == EvalKind::Tail || kind == EvalKind::TailSwitch) {
          CHECK(lex.in_tail(m.noun_rank));
          CHECK(lex.in_tail(m.adj_rank));
        }
        if (set.is_switch()) {
          // lexical adjective in the noun slot and vice versa
          CHECK(lex.is_adj(m.noun));
          CHECK(lex.is_noun(m.adj));
          CHECK(set.ic_targets[i] == set.examples[i].targets);
          const TokenId lex_noun = m.adj, lex_adj = m.noun;
          const TokenId query = set.examples[i].tokens[3];
          CHECK(set.iw_targets[i] == (query == lex_noun ? Triple{lex_adj, lex_noun, lex_noun}
                                                        : Triple{lex_adj, lex_adj, lex_adj}));
          CHECK(set.iw_targets[i] != set.ic_targets[i]);
        } else {
          CHECK(lex.is_noun(m.noun));
          CHECK(lex.is_adj(m.adj));
        }
      }
    }
  }

  TEST_CASE("switch targets on a hand example") {
    const Lexicon lex = make_lexicon(10000, 1.0001, 0.0);
    // lexical adjective 5003 sits in the noun slot, lexical noun 7 in the adjective slot
    const Example ex = build_example(5003, 7, Order::NounFirst, Role::Noun, lex);
    CHECK(ex.targets == Triple{7, 5003, 5003});  // in-context reading
    // in-weights reading: the query 5003 is an adjective, so the answer is (adj, adj, adj) = (5003, 5003, 5003)
  }

  TEST_CASE("pooled sets reuse a fixed number of pairs under a mass cap") {
    const Lexicon lex = make_lexicon(1000, 1.5, 0.1);
    EvalSetOptions opts;
    opts.pool_pairs = 16;
    opts.max_pair_probability = 1e-4;
    Rng rng(3);
    const EvalSet set = build_eval_set(EvalKind::Validation, 500, lex, PairRegistry{}, rng, opts);
    std::set<std::uint64_t> pairs;
    for (const auto& ex : set.examples) {
      pairs.insert(PairRegistry::key(ex.meta.noun, ex.meta.adj));
      CHECK(lex.pair_probability(ex.meta.noun, ex.meta.adj) <= 1e-4);
    }
    CHECK(pairs.size() == 16);
  }

  TEST_CASE("an exhausted stratum names itself") {
    const Lexicon lex = make_lexicon(8, 0.0, 0.0);
    PairRegistry all;
    for (TokenId n = 0; n < 4; ++n)
      for (TokenId a = 4; a < 8; ++a) {
        all.insert(n, a);
        all.insert(a, n);
      }
    for (EvalKind kind : {EvalKind::Head, EvalKind::TailSwitch, EvalKind::Validation}) {
      Rng rng(1);
      try {
        build_eval_set(kind, 5, lex, all, rng);
        FAIL("expected EvalSetError");
      } catch (const EvalSetError& e) {
        CHECK(e.stratum() == std::string(to_string(kind)));
      }
    }
  }

  TEST_CASE("unseen sets use fresh rows beyond the vocabulary") {
    const Lexicon lex = make_lexicon(1000, 1.0001, 0.1);
    EvalSetOptions opts;
    opts.unseen_count = 50;
    opts.embed_dim = 8;
    Rng rng(4);
    const EvalSet set = build_eval_set(EvalKind::Unseen, 200, lex, PairRegistry{}, rng, opts);
    CHECK(set.unseen_rows.rows() == 50);
    CHECK(set.unseen_rows.cols() == 8);
    for (const auto& ex : set.examples) {
      CHECK(ex.meta.noun >= 1002);
      CHECK(ex.meta.noun < 1052);
      CHECK(ex.meta.adj >= 1002);
      CHECK(ex.meta.adj != ex.meta.noun);
    }
  }

  TEST_CASE("unseen row distributions") {
    Rng rng(6);
    auto moments = [](const numerics::Array& a) {
      double s = 0, s2 = 0;
      for (double x : a.values()) {
        s += x;
        s2 += x * x;
      }
      const double n = static_cast<double>(a.size());
      return std::pair{s / n, std::sqrt(s2 / n - (s / n) * (s / n))};
    };
    auto [m0, s0] = moments(sample_unseen_rows(UnseenDist::Init, 1500, 64, rng));
    CHECK(std::abs(m0) < 1e-3);
    CHECK(s0 == doctest::Approx(0.02).epsilon(0.02));
    auto [m1, s1] = moments(sample_unseen_rows(UnseenDist::Uniform01, 1500, 64, rng));
    CHECK(m1 == doctest::Approx(0.5).epsilon(0.01));
    CHECK(s1 == doctest::Approx(std::sqrt(1.0 / 12)).epsilon(0.02));
    auto [m2, s2] = moments(sample_unseen_rows(UnseenDist::Normal55, 1500, 64, rng));
    CHECK(m2 == doctest::Approx(5.0).epsilon(0.02));
    CHECK(s2 == doctest::Approx(5.0).epsilon(0.02));
    CHECK_THROWS_AS(sample_unseen_rows(UnseenDist::Init, 1, 64, rng), ConfigError);
    CHECK_THROWS_AS(parse_unseen_dist("gaussian"), ConfigError);
    CHECK(parse_eval_kind("tail_switch") == EvalKind::TailSwitch);
    CHECK_THROWS_AS(parse_eval_kind("middle"), ConfigError);
  }
}
