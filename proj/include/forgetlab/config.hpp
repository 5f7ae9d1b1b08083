#pragma once

#include "forgetlab/grammar.hpp"
#include "forgetlab/model.hpp"
#include "forgetlab/optim.hpp"

#include "json.hpp"

#include <cstdint>
#include <filesystem>

namespace forgetlab::trainer {

/// Where the unseen-token embeddings live. Reserved rows sit after the
/// vocabulary from initialization on: no sentence ever contains them, but
/// they share the output softmax and every re-initialization of the
/// embedding. Fresh rows are drawn from `unseen_dist` when the evaluation
/// sets are built and exist only at evaluation time.
enum class UnseenRows { Reserved, Fresh };

std::string_view to_string(UnseenRows u) noexcept;
/// Accepts "reserved" and "fresh".
UnseenRows parse_unseen_rows(std::string_view name);

/// Everything that determines a run. (config, seed) fixes every emitted byte.
struct ExperimentConfig {
  grammar::GrammarConfig grammar;
  model::ModelConfig model;
  optim::AdamWConfig optim;
  optim::ForgettingSchedule schedule;
  std::uint64_t steps = 60000;
  std::size_t batch_size = 64;
  std::uint64_t eval_every = 500;
  std::size_t eval_set_size = 1000;
  std::size_t unseen_count = 1500;
  grammar::UnseenDist unseen_dist = grammar::UnseenDist::Init;
  UnseenRows unseen_rows = UnseenRows::Reserved;
  std::uint64_t seed = 0;
  /// Periodic checkpoint interval in steps; 0 writes only the final one.
  std::uint64_t checkpoint_every = 0;
  /// Distinct (noun, adj) pairs held out per evaluation set.
  std::size_t eval_pool_pairs = 64;
  /// Held-out pairs must have training probability at most this.
  double eval_max_pair_probability = 2.5e-4;

  /// Checks every section and that the model matches the grammar and the
  /// unseen-row placement.
  void validate() const;
  /// model.vocab_size and model.reserved_rows brought in line with the rest.
  ExperimentConfig resolved() const;
};

/// Parses a config object. Missing fields take their defaults; unknown
/// fields and type mismatches raise ConfigError.
ExperimentConfig config_from_json(const nlohmann::ordered_json& j);
nlohmann::ordered_json config_to_json(const ExperimentConfig& cfg);
ExperimentConfig load_config(const std::filesystem::path& path);

/// Horizon in JSON: an integer, or "inf" for unbounded.
nlohmann::ordered_json horizon_to_json(std::uint64_t horizon);
std::uint64_t horizon_from_json(const nlohmann::ordered_json& j);

}  // namespace forgetlab::trainer
