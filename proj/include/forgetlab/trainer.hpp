#pragma once

#include "forgetlab/config.hpp"
#include "forgetlab/grammar.hpp"
#include "forgetlab/model.hpp"
#include "forgetlab/optim.hpp"
#include "forgetlab/rng.hpp"

#include "json.hpp"

#include <array>
#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <optional>
#include <string>
#include <unordered_set>
#include <vector>

namespace forgetlab::trainer {

/// One evaluation snapshot. Accuracies are per masked position.
struct MetricsRecord {
  std::uint64_t step = 0;
  double train_loss = 0.0;  ///< mean batch loss since the previous record
  double val_acc = 0.0;
  double head_acc = 0.0;
  double tail_acc = 0.0;
  double head_iw_pref = 0.0;
  double tail_iw_pref = 0.0;
  double head_ic_acc = 0.0;
  double tail_ic_acc = 0.0;
  double unseen_acc = 0.0;
  std::optional<double> probe_acc;

  bool operator==(const MetricsRecord&) const = default;
};

nlohmann::ordered_json to_json(const MetricsRecord& r);
MetricsRecord metrics_from_json(const nlohmann::ordered_json& j);
/// Single-line JSON, as written to metrics.jsonl.
std::string to_jsonl(const MetricsRecord& r);

/// The fixed evaluation sets of a run, one per kind, and the (noun-slot,
/// adj-slot) pairs they use. Training never emits a reserved pair.
struct EvalSuite {
  std::array<grammar::EvalSet, grammar::kAllEvalKinds.size()> sets;
  std::unordered_set<std::uint64_t> reserved;

  const grammar::EvalSet& get(grammar::EvalKind k) const { return sets[static_cast<std::size_t>(k)]; }
  bool is_reserved(grammar::TokenId noun_slot, grammar::TokenId adj_slot) const {
    return reserved.contains(grammar::PairRegistry::key(noun_slot, adj_slot));
  }
};

/// Builds the suite from `cfg.seed` alone, so a run and any later
/// evaluation of its checkpoints see the same sets.
EvalSuite build_eval_suite(const ExperimentConfig& cfg, const grammar::Lexicon& lex);

/// Fraction of masked positions where the argmax equals the target.
/// Unseen sets are scored over the vocabulary extended by their rows.
double accuracy(const model::ModelParams& params, const model::ModelConfig& cfg, const grammar::EvalSet& set);
/// The same from precomputed masked logits ((n*3) x V).
double accuracy(const numerics::Array& masked_logits, const grammar::EvalSet& set);

struct Preference {
  double iw_pref = 0.0;
  double ic_acc = 0.0;
};

/// Preference over a switch set given its masked logits ((n*3) x V, three
/// rows per example). An example votes in-weights iff its iw triple has
/// strictly higher log-likelihood than its ic triple.
Preference preference_metrics(const numerics::Array& masked_logits, const grammar::EvalSet& switch_set);
Preference preference_metrics(const model::ModelParams& params, const model::ModelConfig& cfg,
                              const grammar::EvalSet& switch_set);

/// Every metric of the suite at the current parameters. Throws ContractError
/// if an evaluation pair has been seen in training. step and train_loss are
/// left for the caller.
MetricsRecord evaluate(const model::ModelParams& params, const model::ModelConfig& cfg, const EvalSuite& suite,
                       const grammar::PairRegistry& registry);

/// Full resumable training state.
struct Checkpoint {
  static constexpr std::uint32_t kVersion = 1;

  ExperimentConfig config;
  std::uint64_t step = 0;
  model::ModelParams params;
  optim::OptState opt;
  numerics::Rng train_rng;
  numerics::Rng reset_rng;
  grammar::PairRegistry registry;
  double loss_sum = 0.0;          ///< batch losses since the last record
  std::uint64_t loss_count = 0;
  double last_train_loss = 0.0;   ///< train_loss of the last record
};

/// Binary layout, all integers and floats little-endian:
///   8 bytes  magic "FGLBCKPT"
///   u32      format version
///   u64      header length n, then n bytes of JSON header (config, step,
///            optimizer step, rng states, registry size and digest, and the
///            name and shape of every array that follows)
///   f64[]    parameters in canonical order, then Adam m per parameter,
///            then Adam v per parameter, then [loss_sum, last_train_loss]
///   u64[]    registry keys, ascending
///   8 bytes  trailer "FGLBEND\0"
std::string serialize_checkpoint(const Checkpoint& ck);
Checkpoint deserialize_checkpoint(const std::string& bytes);
/// Writes to a temporary sibling and renames, so a crash never leaves a
/// partial checkpoint at `path`.
void save_checkpoint(const Checkpoint& ck, const std::filesystem::path& path);
Checkpoint load_checkpoint(const std::filesystem::path& path);

/// State at step 0 of a fresh run.
Checkpoint initial_state(const ExperimentConfig& cfg);

/// The record a run emitted (or would emit) at the checkpoint's step.
MetricsRecord evaluate_checkpoint(const Checkpoint& ck);

struct RunOptions {
  /// Continue from this checkpoint instead of starting fresh.
  std::optional<std::filesystem::path> resume;
  /// Progress lines go here when set.
  std::ostream* log = nullptr;
};

/// Trains per `cfg`, writing config.json, metrics.jsonl and checkpoint.bin
/// into `out_dir`. Returns the last metrics record.
MetricsRecord run_experiment(const ExperimentConfig& cfg, const std::filesystem::path& out_dir,
                             const RunOptions& opts = {});

inline constexpr const char* kMetricsFile = "metrics.jsonl";
inline constexpr const char* kCheckpointFile = "checkpoint.bin";
inline constexpr const char* kConfigFile = "config.json";

/// Axes of a sweep; empty axes keep the base value. N = 0 means vanilla,
/// kUnbounded means active, anything else temporary.
struct SweepGrid {
  std::vector<double> alpha;
  std::vector<double> epsilon;
  std::vector<std::size_t> v;
  std::vector<std::uint64_t> k;
  std::vector<std::uint64_t> N;
  std::vector<double> weight_decay;
  std::vector<std::uint64_t> seed;

  std::size_t cell_count() const noexcept;
};

SweepGrid grid_from_json(const nlohmann::ordered_json& j);

struct SweepCell {
  nlohmann::ordered_json params;  ///< axis name -> value for this cell
  std::string directory;
  std::string status;             ///< "ok" or "error: <diagnosis>"
};

/// Cell i of the Cartesian product (last axis fastest) applied to `base`.
/// The result is not validated.
ExperimentConfig cell_config(const ExperimentConfig& base, const SweepGrid& grid, std::size_t index,
                             nlohmann::ordered_json* params = nullptr);

/// Runs every cell into out_root/cell_NNN and keeps out_root/manifest.json
/// current after each cell. A failing cell is recorded and skipped.
std::vector<SweepCell> run_sweep(const ExperimentConfig& base, const SweepGrid& grid,
                                 const std::filesystem::path& out_root, const RunOptions& opts = {});

}  // namespace forgetlab::trainer
