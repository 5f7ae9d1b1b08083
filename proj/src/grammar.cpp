#include "forgetlab/grammar.hpp"

#include "forgetlab/errors.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

namespace forgetlab::grammar {

using numerics::Array;
using numerics::Rng;

void GrammarConfig::validate() const {
  if (v < 4 || v % 2 != 0) throw ConfigError("grammar.v must be even and >= 4, got " + std::to_string(v));
  if (v + 2 > std::numeric_limits<TokenId>::max() / 2) throw ConfigError("grammar.v too large");
  if (!(alpha >= 0.0) || !std::isfinite(alpha)) throw ConfigError("grammar.alpha must be finite and >= 0");
  if (!(epsilon >= 0.0 && epsilon <= 1.0)) throw ConfigError("grammar.epsilon must lie in [0, 1]");
  if (n_bins == 0) throw ConfigError("grammar.n_bins must be >= 1");
}

std::vector<double> zipf_pmf(double alpha, std::int64_t first, std::int64_t last) {
  if (last < first) {
    throw DomainError("zipf_pmf: empty support [" + std::to_string(first) + ", " + std::to_string(last) + "]");
  }
  const std::size_t n = static_cast<std::size_t>(last - first + 1);
  std::vector<double> p(n);
  for (std::size_t k = 1; k <= n; ++k) p[k - 1] = std::pow(static_cast<double>(k), -alpha);
  // Sum smallest terms first.
  double h = 0.0;
  for (std::size_t k = n; k-- > 0;) h += p[k];
  for (double& x : p) x /= h;
  return p;
}

Lexicon::Lexicon(const GrammarConfig& cfg) : cfg_(cfg) {
  cfg_.validate();
  const std::size_t n = half();
  pmf_ = zipf_pmf(cfg_.alpha, 0, static_cast<std::int64_t>(n) - 1);
  cdf_.resize(n);
  std::partial_sum(pmf_.begin(), pmf_.end(), cdf_.begin());
  cdf_.back() = 1.0;

  // Contiguous bins of roughly equal probability mass, each at least one rank.
  const std::size_t n_bins = std::min(cfg_.n_bins, n);
  std::size_t start = 1;
  for (std::size_t b = 0; b < n_bins; ++b) {
    std::size_t end = n + 1;
    if (b + 1 < n_bins) {
      const double target = static_cast<double>(b + 1) / static_cast<double>(n_bins) - 1e-9;
      const auto it = std::lower_bound(cdf_.begin() + static_cast<std::ptrdiff_t>(start - 1), cdf_.end(), target);
      end = static_cast<std::size_t>(it - cdf_.begin()) + 2;
      end = std::max(end, start + 1);
      end = std::min(end, n + 1 - (n_bins - 1 - b));
    }
    bins_.push_back({start, end});
    start = end;
  }

  ambiguous_.assign(n, false);
  Rng rng = Rng(cfg_.seed).split("lexicon");
  for (const RankBin& bin : bins_) {
    const std::size_t size = bin.size();
    const auto count =
        static_cast<std::size_t>(std::ceil(cfg_.epsilon * static_cast<double>(size) - 1e-9));
    std::vector<std::size_t> ranks(size);
    std::iota(ranks.begin(), ranks.end(), bin.begin);
    for (std::size_t i = 0; i < count; ++i) {
      const std::size_t j = i + rng.below(size - i);
      std::swap(ranks[i], ranks[j]);
      ambiguous_[ranks[i] - 1] = true;
    }
  }
}

TokenId Lexicon::noun_id(std::size_t rank) const {
  if (rank < 1 || rank > half()) throw IndexError("rank " + std::to_string(rank) + " outside 1.." + std::to_string(half()));
  return static_cast<TokenId>(rank - 1);
}

TokenId Lexicon::adj_id(std::size_t rank) const {
  if (rank < 1 || rank > half()) throw IndexError("rank " + std::to_string(rank) + " outside 1.." + std::to_string(half()));
  return static_cast<TokenId>(half() + rank - 1);
}

std::size_t Lexicon::rank_of(TokenId id) const noexcept {
  if (is_noun(id)) return id + 1;
  if (is_adj(id)) return id - half() + 1;
  return 0;
}

std::size_t Lexicon::ambiguous_count() const noexcept {
  return static_cast<std::size_t>(std::count(ambiguous_.begin(), ambiguous_.end(), true));
}

std::size_t Lexicon::sample_rank(Rng& rng) const {
  const double u = rng.uniform();
  const auto it = std::upper_bound(cdf_.begin(), cdf_.end(), u);
  return std::min(static_cast<std::size_t>(it - cdf_.begin()), cdf_.size() - 1) + 1;
}

std::size_t Lexicon::stratum_size() const noexcept { return std::max<std::size_t>(1, (cfg_.v + 19) / 20); }

double Lexicon::pair_probability(TokenId noun_slot, TokenId adj_slot) const {
  auto slot_prob = [this](TokenId id, bool noun_slot) {
    const std::size_t r = rank_of(id);
    if (r == 0) return 0.0;
    const bool nominal = noun_slot ? is_noun(id) : is_adj(id);
    if (ambiguous(r)) return 0.5 * rank_probability(r);
    return nominal ? rank_probability(r) : 0.0;
  };
  return slot_prob(noun_slot, true) * slot_prob(adj_slot, false);
}

std::string_view to_string(Order o) noexcept { return o == Order::NounFirst ? "noun-first" : "copula-first"; }

std::string_view to_string(Role r) noexcept { return r == Role::Noun ? "noun" : "adj"; }

Example build_example(TokenId noun, TokenId adj, Order order, Role query_role, const Lexicon& lex) {
  Example ex;
  const TokenId c = lex.copula();
  const TokenId m = lex.mask();
  const TokenId query = query_role == Role::Noun ? noun : adj;
  if (order == Order::NounFirst) {
    ex.tokens = {noun, c, adj, query, m, m, m};
  } else {
    ex.tokens = {c, adj, noun, query, m, m, m};
  }
  ex.targets = query_role == Role::Noun ? Triple{adj, noun, noun} : Triple{adj, adj, adj};
  ex.meta = {noun, adj, order, query_role, lex.rank_of(noun), lex.rank_of(adj)};
  return ex;
}

Example sample_example(const Lexicon& lex, Rng& rng) {
  const std::size_t noun_rank = lex.sample_rank(rng);
  const std::size_t adj_rank = lex.sample_rank(rng);
  TokenId noun = lex.noun_id(noun_rank);
  TokenId adj = lex.adj_id(adj_rank);
  if (lex.ambiguous(noun_rank) && rng.coin()) noun = lex.adj_id(noun_rank);
  if (lex.ambiguous(adj_rank) && rng.coin()) adj = lex.noun_id(adj_rank);
  const Order order = rng.coin() ? Order::CopulaFirst : Order::NounFirst;
  const Role role = rng.coin() ? Role::Adj : Role::Noun;
  return build_example(noun, adj, order, role, lex);
}

std::vector<std::uint64_t> PairRegistry::sorted_keys() const {
  std::vector<std::uint64_t> keys(pairs_.begin(), pairs_.end());
  std::sort(keys.begin(), keys.end());
  return keys;
}

std::uint64_t PairRegistry::digest() const noexcept {
  std::uint64_t acc = Rng::mix(pairs_.size());
  for (std::uint64_t k : pairs_) acc += Rng::mix(k ^ 0xa0761d6478bd642fULL);
  return acc;
}

std::string_view to_string(EvalKind k) noexcept {
  switch (k) {
    case EvalKind::Validation: return "validation";
    case EvalKind::Head: return "head";
    case EvalKind::Tail: return "tail";
    case EvalKind::HeadSwitch: return "head_switch";
    case EvalKind::TailSwitch: return "tail_switch";
    case EvalKind::Unseen: return "unseen";
  }
  return "?";
}

EvalKind parse_eval_kind(std::string_view name) {
  for (EvalKind k : kAllEvalKinds)
    if (to_string(k) == name) return k;
  throw ConfigError("unknown eval kind '" + std::string(name) + "'");
}

std::string_view to_string(UnseenDist d) noexcept {
  switch (d) {
    case UnseenDist::Init: return "init";
    case UnseenDist::Uniform01: return "uniform01";
    case UnseenDist::Normal55: return "normal_5_5";
  }
  return "?";
}

UnseenDist parse_unseen_dist(std::string_view name) {
  for (UnseenDist d : {UnseenDist::Init, UnseenDist::Uniform01, UnseenDist::Normal55})
    if (to_string(d) == name) return d;
  throw ConfigError("unknown unseen distribution '" + std::string(name) + "'");
}

Array sample_unseen_rows(UnseenDist dist, std::size_t m, std::size_t d, Rng& rng, double init_std) {
  if (m < 2) throw ConfigError("unseen rows: need at least 2 rows, got " + std::to_string(m));
  Array rows = Array::matrix(m, d);
  for (double& x : rows.values()) {
    switch (dist) {
      case UnseenDist::Init: x = rng.normal(0.0, init_std); break;
      case UnseenDist::Uniform01: x = rng.uniform(); break;
      case UnseenDist::Normal55: x = rng.normal(5.0, 5.0); break;
    }
  }
  return rows;
}

namespace {

struct Pair {
  TokenId noun_slot;
  TokenId adj_slot;
  std::size_t noun_rank;
  std::size_t adj_rank;
};

/// Sampling rules for one stratum: which ranks are eligible and whether the
/// lexical POS is swapped into the opposite slot.
struct Stratum {
  EvalKind kind;
  const Lexicon& lex;

  bool swapped() const noexcept { return kind == EvalKind::HeadSwitch || kind == EvalKind::TailSwitch; }
  bool enumerable() const noexcept { return kind != EvalKind::Validation; }

  std::size_t lo() const noexcept {
    switch (kind) {
      case EvalKind::Tail:
      case EvalKind::TailSwitch: return lex.half() - lex.stratum_size() + 1;
      default: return 1;
    }
  }
  std::size_t hi() const noexcept {
    switch (kind) {
      case EvalKind::Head:
      case EvalKind::HeadSwitch: return lex.stratum_size();
      default: return lex.half();
    }
  }

  std::size_t draw_rank(Rng& rng) const {
    if (kind == EvalKind::Validation) return lex.sample_rank(rng);
    return lo() + rng.below(hi() - lo() + 1);
  }

  /// Pair whose lexical noun has rank nr and lexical adjective rank ar.
  Pair make(std::size_t nr, std::size_t ar) const {
    if (swapped()) return {lex.adj_id(ar), lex.noun_id(nr), ar, nr};
    return {lex.noun_id(nr), lex.adj_id(ar), nr, ar};
  }
};

bool admissible(const Pair& p, const Stratum& s, const PairRegistry& seen, const EvalSetOptions& opts) {
  if (s.lex.ambiguous(p.noun_rank) || s.lex.ambiguous(p.adj_rank)) return false;
  if (seen.contains(p.noun_slot, p.adj_slot)) return false;
  return s.lex.pair_probability(p.noun_slot, p.adj_slot) <= opts.max_pair_probability;
}

std::optional<Pair> draw_pair(const Stratum& s, const PairRegistry& seen, const EvalSetOptions& opts, Rng& rng,
                              std::size_t attempts) {
  for (std::size_t i = 0; i < attempts; ++i) {
    const std::size_t nr = s.draw_rank(rng);
    const std::size_t ar = s.draw_rank(rng);
    const Pair p = s.make(nr, ar);
    if (admissible(p, s, seen, opts)) return p;
  }
  return std::nullopt;
}

std::vector<Pair> enumerate_pairs(const Stratum& s, const PairRegistry& seen, const EvalSetOptions& opts) {
  std::vector<Pair> out;
  for (std::size_t nr = s.lo(); nr <= s.hi(); ++nr)
    for (std::size_t ar = s.lo(); ar <= s.hi(); ++ar) {
      const Pair p = s.make(nr, ar);
      if (admissible(p, s, seen, opts)) out.push_back(p);
    }
  return out;
}

[[noreturn]] void exhausted(EvalKind kind) {
  const std::string name(to_string(kind));
  throw EvalSetError(name, "eval stratum '" + name + "' has no unambiguous (noun, adj) pair left that is absent "
                               "from the seen-pair registry");
}

void add_example(EvalSet& set, const Pair& p, const Stratum& s, Rng& rng) {
  const Order order = rng.coin() ? Order::CopulaFirst : Order::NounFirst;
  const Role role = rng.coin() ? Role::Adj : Role::Noun;
  Example ex = build_example(p.noun_slot, p.adj_slot, order, role, s.lex);
  if (s.swapped()) {
    const TokenId lexical_noun = p.adj_slot;
    const TokenId lexical_adj = p.noun_slot;
    const TokenId query = ex.tokens[3];
    set.ic_targets.push_back(ex.targets);
    set.iw_targets.push_back(query == lexical_noun ? Triple{lexical_adj, lexical_noun, lexical_noun}
                                                   : Triple{lexical_adj, lexical_adj, lexical_adj});
  }
  set.examples.push_back(ex);
}

EvalSet build_unseen(std::size_t n, const Lexicon& lex, Rng& rng, const EvalSetOptions& opts) {
  EvalSet set;
  set.kind = EvalKind::Unseen;
  if (opts.fresh_rows) {
    Rng row_rng = rng.split("rows");
    set.unseen_rows = sample_unseen_rows(opts.unseen_dist, opts.unseen_count, opts.embed_dim, row_rng,
                                         opts.init_std);
  } else if (opts.unseen_count < 2) {
    throw ConfigError("unseen_count must be >= 2");
  }
  const auto base = static_cast<TokenId>(lex.vocab_size());
  const std::size_t m = opts.unseen_count;
  set.examples.reserve(n);
  for (std::size_t i = 0; i < n; ++i) {
    const auto a = static_cast<TokenId>(rng.below(m));
    auto b = static_cast<TokenId>(rng.below(m - 1));
    if (b >= a) ++b;
    const Order order = rng.coin() ? Order::CopulaFirst : Order::NounFirst;
    const Role role = rng.coin() ? Role::Adj : Role::Noun;
    set.examples.push_back(build_example(base + a, base + b, order, role, lex));
  }
  return set;
}

}  // namespace

EvalSet build_eval_set(EvalKind kind, std::size_t n, const Lexicon& lex, const PairRegistry& seen, Rng& rng,
                       const EvalSetOptions& opts) {
  if (kind == EvalKind::Unseen) return build_unseen(n, lex, rng, opts);

  const Stratum s{kind, lex};
  EvalSet set;
  set.kind = kind;
  set.examples.reserve(n);
  const std::size_t attempts = 10000;

  std::optional<std::vector<Pair>> fallback;
  auto fallback_pairs = [&]() -> const std::vector<Pair>& {
    if (!fallback) fallback = s.enumerable() ? enumerate_pairs(s, seen, opts) : std::vector<Pair>{};
    return *fallback;
  };

  if (opts.pool_pairs == 0) {
    for (std::size_t i = 0; i < n; ++i) {
      std::optional<Pair> p = draw_pair(s, seen, opts, rng, attempts);
      if (!p) {
        const auto& all = fallback_pairs();
        if (all.empty()) exhausted(kind);
        p = all[rng.below(all.size())];
      }
      add_example(set, *p, s, rng);
    }
    return set;
  }

  std::vector<Pair> pool;
  std::unordered_set<std::uint64_t> in_pool;
  for (std::size_t duplicates = 0; pool.size() < opts.pool_pairs && duplicates < attempts;) {
    std::optional<Pair> p = draw_pair(s, seen, opts, rng, attempts);
    if (!p) break;
    if (in_pool.insert(PairRegistry::key(p->noun_slot, p->adj_slot)).second) {
      pool.push_back(*p);
    } else {
      ++duplicates;
    }
  }
  if (pool.size() < opts.pool_pairs) {
    for (const Pair& p : fallback_pairs()) {
      if (pool.size() >= opts.pool_pairs) break;
      if (in_pool.insert(PairRegistry::key(p.noun_slot, p.adj_slot)).second) pool.push_back(p);
    }
  }
  if (pool.empty()) exhausted(kind);
  for (std::size_t i = 0; i < n; ++i) add_example(set, pool[rng.below(pool.size())], s, rng);
  return set;
}

}  // namespace forgetlab::grammar
