#pragma once

#include "forgetlab/array.hpp"
#include "forgetlab/rng.hpp"

#include <array>
#include <cstddef>
#include <cstdint>
#include <limits>
#include <optional>
#include <string>
#include <string_view>
#include <unordered_set>
#include <vector>

namespace forgetlab::grammar {

using TokenId = std::uint32_t;

inline constexpr std::size_t kSequenceLength = 7;
inline constexpr std::size_t kPatternLength = 3;
inline constexpr std::array<std::size_t, kPatternLength> kMaskPositions{4, 5, 6};

using Tokens = std::array<TokenId, kSequenceLength>;
using Triple = std::array<TokenId, kPatternLength>;

struct GrammarConfig {
  std::size_t v = 1000;
  double alpha = 1.0001;
  double epsilon = 0.10;
  std::size_t n_bins = 10;
  std::uint64_t seed = 0;

  /// Throws ConfigError on an odd or too-small vocabulary, negative skew,
  /// epsilon outside [0, 1] or zero bins.
  void validate() const;
};

/// P(k) = k^-alpha / sum_j j^-alpha over ranks k = 1..(last - first + 1).
std::vector<double> zipf_pmf(double alpha, std::int64_t first, std::int64_t last);

/// Half-open rank interval [begin, end) over 1-based ranks.
struct RankBin {
  std::size_t begin = 1;
  std::size_t end = 1;
  std::size_t size() const noexcept { return end - begin; }
};

/// Token universe: nouns are {0..v/2-1}, adjectives {v/2..v-1}, then the
/// copula (v) and the mask token (v+1). Rank r (1-based) maps to noun id
/// r-1 and adjective id v/2+r-1; both share the sampling probability and
/// ambiguity flag of rank r.
class Lexicon {
 public:
  explicit Lexicon(const GrammarConfig& cfg);

  const GrammarConfig& config() const noexcept { return cfg_; }
  std::size_t v() const noexcept { return cfg_.v; }
  std::size_t half() const noexcept { return cfg_.v / 2; }
  std::size_t vocab_size() const noexcept { return cfg_.v + 2; }
  TokenId copula() const noexcept { return static_cast<TokenId>(cfg_.v); }
  TokenId mask() const noexcept { return static_cast<TokenId>(cfg_.v + 1); }

  TokenId noun_id(std::size_t rank) const;
  TokenId adj_id(std::size_t rank) const;
  bool is_noun(TokenId id) const noexcept { return id < half(); }
  bool is_adj(TokenId id) const noexcept { return id >= half() && id < cfg_.v; }
  /// 1-based rank of a noun or adjective id; 0 for anything else.
  std::size_t rank_of(TokenId id) const noexcept;

  const std::vector<double>& pmf() const noexcept { return pmf_; }
  double rank_probability(std::size_t rank) const { return pmf_.at(rank - 1); }
  bool ambiguous(std::size_t rank) const { return ambiguous_.at(rank - 1); }
  std::size_t ambiguous_count() const noexcept;
  const std::vector<RankBin>& bins() const noexcept { return bins_; }

  /// Rank drawn from the truncated Zipf by inverse CDF.
  std::size_t sample_rank(numerics::Rng& rng) const;

  /// Number of ranks in the head (and in the tail) stratum: ceil(v / 20).
  std::size_t stratum_size() const noexcept;
  bool in_head(std::size_t rank) const noexcept { return rank >= 1 && rank <= stratum_size(); }
  bool in_tail(std::size_t rank) const noexcept { return rank > half() - stratum_size() && rank <= half(); }

  /// Training-time probability that one sentence has exactly this
  /// (noun-slot, adj-slot) occupancy.
  double pair_probability(TokenId noun_slot, TokenId adj_slot) const;

 private:
  GrammarConfig cfg_;
  std::vector<double> pmf_;
  std::vector<double> cdf_;
  std::vector<bool> ambiguous_;
  std::vector<RankBin> bins_;
};

enum class Order { NounFirst, CopulaFirst };
enum class Role { Noun, Adj };

std::string_view to_string(Order o) noexcept;
std::string_view to_string(Role r) noexcept;

struct ExampleMeta {
  TokenId noun = 0;  ///< token occupying the noun slot
  TokenId adj = 0;   ///< token occupying the adjective slot
  Order order = Order::NounFirst;
  Role query_role = Role::Noun;
  std::size_t noun_rank = 0;  ///< rank of the noun-slot token (0 if outside the vocabulary)
  std::size_t adj_rank = 0;

  bool operator==(const ExampleMeta&) const = default;
};

struct Example {
  Tokens tokens{};
  Triple targets{};
  ExampleMeta meta;

  bool operator==(const Example&) const = default;
};

/// Seven-token cloze instance for the given slot occupants. The mask and
/// copula ids are taken from `lex`; slot ids may lie beyond the vocabulary
/// (unseen rows).
Example build_example(TokenId noun, TokenId adj, Order order, Role query_role, const Lexicon& lex);

/// One training sentence drawn from the grammar.
Example sample_example(const Lexicon& lex, numerics::Rng& rng);

/// Registry of (noun-slot id, adj-slot id) pairs observed during training.
class PairRegistry {
 public:
  static std::uint64_t key(TokenId noun_slot, TokenId adj_slot) noexcept {
    return (static_cast<std::uint64_t>(noun_slot) << 32) | adj_slot;
  }
  void insert(TokenId noun_slot, TokenId adj_slot) { pairs_.insert(key(noun_slot, adj_slot)); }
  void insert_key(std::uint64_t k) { pairs_.insert(k); }
  bool contains(TokenId noun_slot, TokenId adj_slot) const { return pairs_.contains(key(noun_slot, adj_slot)); }
  bool contains_key(std::uint64_t k) const { return pairs_.contains(k); }
  std::size_t size() const noexcept { return pairs_.size(); }
  /// Ascending keys.
  std::vector<std::uint64_t> sorted_keys() const;
  /// Order-independent 64-bit digest of the contents.
  std::uint64_t digest() const noexcept;

 private:
  std::unordered_set<std::uint64_t> pairs_;
};

enum class EvalKind { Validation, Head, Tail, HeadSwitch, TailSwitch, Unseen };

std::string_view to_string(EvalKind k) noexcept;
/// Accepts "validation", "head", "tail", "head_switch", "tail_switch", "unseen".
EvalKind parse_eval_kind(std::string_view name);
inline constexpr std::array<EvalKind, 6> kAllEvalKinds{EvalKind::Validation, EvalKind::Head,
                                                       EvalKind::Tail,       EvalKind::HeadSwitch,
                                                       EvalKind::TailSwitch, EvalKind::Unseen};

enum class UnseenDist { Init, Uniform01, Normal55 };

std::string_view to_string(UnseenDist d) noexcept;
/// Accepts "init", "uniform01", "normal_5_5"; anything else is a ConfigError.
UnseenDist parse_unseen_dist(std::string_view name);

inline constexpr double kInitStd = 0.02;

/// m fresh d-dimensional embedding rows. `Init` draws Normal(0, init_std^2)
/// with the same generator calls as the model initializer.
numerics::Array sample_unseen_rows(UnseenDist dist, std::size_t m, std::size_t d, numerics::Rng& rng,
                                   double init_std = kInitStd);

struct EvalSetOptions {
  /// Distinct (noun, adj) pairs drawn per set; examples reuse pairs with a
  /// fresh order and query role. 0 draws an independent pair per example.
  std::size_t pool_pairs = 0;
  /// Candidate pairs whose training probability exceeds this are rejected.
  double max_pair_probability = std::numeric_limits<double>::infinity();
  // Unseen sets only.
  std::size_t unseen_count = 1500;
  /// Draw the unseen rows here. Otherwise the ids refer to rows the model
  /// already holds after its vocabulary.
  bool fresh_rows = true;
  std::size_t embed_dim = 64;
  UnseenDist unseen_dist = UnseenDist::Init;
  double init_std = kInitStd;
};

struct EvalSet {
  EvalKind kind = EvalKind::Validation;
  std::vector<Example> examples;
  /// Switch sets only: pattern under slot-position POS and under lexical POS.
  std::vector<Triple> ic_targets;
  std::vector<Triple> iw_targets;
  /// Unseen sets with fresh rows only: rows appended after the vocabulary;
  /// row i has id vocab_size + i.
  numerics::Array unseen_rows;

  std::size_t size() const noexcept { return examples.size(); }
  bool is_switch() const noexcept { return kind == EvalKind::HeadSwitch || kind == EvalKind::TailSwitch; }
};

/// n examples of `kind` whose (noun-slot, adj-slot) pairs are absent from
/// `seen` and use only unambiguous ranks. Throws EvalSetError naming the
/// stratum when no admissible pair remains.
EvalSet build_eval_set(EvalKind kind, std::size_t n, const Lexicon& lex, const PairRegistry& seen,
                       numerics::Rng& rng, const EvalSetOptions& opts = {});

}  // namespace forgetlab::grammar
