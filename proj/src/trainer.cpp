#include "forgetlab/trainer.hpp"

#include "forgetlab/errors.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <ostream>
#include <sstream>

namespace forgetlab::trainer {

using json = nlohmann::ordered_json;
using grammar::EvalKind;
using grammar::EvalSet;
using numerics::Array;
using numerics::Rng;

json to_json(const MetricsRecord& r) {
  json j;
  j["step"] = r.step;
  j["train_loss"] = r.train_loss;
  j["val_acc"] = r.val_acc;
  j["head_acc"] = r.head_acc;
  j["tail_acc"] = r.tail_acc;
  j["head_iw_pref"] = r.head_iw_pref;
  j["tail_iw_pref"] = r.tail_iw_pref;
  j["head_ic_acc"] = r.head_ic_acc;
  j["tail_ic_acc"] = r.tail_ic_acc;
  j["unseen_acc"] = r.unseen_acc;
  if (r.probe_acc) j["probe_acc"] = *r.probe_acc;
  return j;
}

MetricsRecord metrics_from_json(const json& j) {
  MetricsRecord r;
  try {
    r.step = j.at("step").get<std::uint64_t>();
    r.train_loss = j.at("train_loss").get<double>();
    r.val_acc = j.at("val_acc").get<double>();
    r.head_acc = j.at("head_acc").get<double>();
    r.tail_acc = j.at("tail_acc").get<double>();
    r.head_iw_pref = j.at("head_iw_pref").get<double>();
    r.tail_iw_pref = j.at("tail_iw_pref").get<double>();
    r.head_ic_acc = j.at("head_ic_acc").get<double>();
    r.tail_ic_acc = j.at("tail_ic_acc").get<double>();
    r.unseen_acc = j.at("unseen_acc").get<double>();
    if (j.contains("probe_acc")) r.probe_acc = j.at("probe_acc").get<double>();
  } catch (const json::exception& e) {
    throw ConfigError(std::string("malformed metrics record: ") + e.what());
  }
  return r;
}

std::string to_jsonl(const MetricsRecord& r) { return to_json(r).dump(); }

EvalSuite build_eval_suite(const ExperimentConfig& cfg, const grammar::Lexicon& lex) {
  grammar::EvalSetOptions opts;
  opts.pool_pairs = cfg.eval_pool_pairs;
  opts.max_pair_probability = cfg.eval_max_pair_probability;
  opts.unseen_count = cfg.unseen_count;
  opts.embed_dim = cfg.model.d_model;
  opts.unseen_dist = cfg.unseen_dist;
  opts.fresh_rows = cfg.unseen_rows == UnseenRows::Fresh;
  opts.init_std = cfg.model.init_std;

  const Rng root = Rng(cfg.seed).split("eval");
  const grammar::PairRegistry none;
  EvalSuite suite;
  for (EvalKind kind : grammar::kAllEvalKinds) {
    Rng rng = root.split(grammar::to_string(kind));
    EvalSet set = grammar::build_eval_set(kind, cfg.eval_set_size, lex, none, rng, opts);
    if (kind != EvalKind::Unseen) {
      for (const auto& ex : set.examples) suite.reserved.insert(grammar::PairRegistry::key(ex.meta.noun, ex.meta.adj));
    }
    suite.sets[static_cast<std::size_t>(kind)] = std::move(set);
  }
  return suite;
}

namespace {

constexpr std::size_t kEvalChunk = 250;

/// Calls f(logits, row_offset, example_index) for every example of `set`,
/// computing masked logits a chunk at a time.
template <class F>
void for_each_scored(const model::ModelParams& params, const model::ModelConfig& cfg, const EvalSet& set, F&& f) {
  const Array* extra = set.unseen_rows.size() ? &set.unseen_rows : nullptr;
  std::vector<grammar::Tokens> seqs;
  for (std::size_t start = 0; start < set.size(); start += kEvalChunk) {
    const std::size_t end = std::min(set.size(), start + kEvalChunk);
    seqs.clear();
    for (std::size_t i = start; i < end; ++i) seqs.push_back(set.examples[i].tokens);
    const Array logits = model::masked_logits(params, cfg, seqs, extra);
    for (std::size_t i = start; i < end; ++i) f(logits, 3 * (i - start), i);
  }
}

std::array<std::size_t, 3> rows_at(std::size_t offset) { return {offset, offset + 1, offset + 2}; }

Preference tally(std::size_t n, std::size_t iw_votes, std::size_t ic_hits) {
  if (n == 0) return {};
  return {static_cast<double>(iw_votes) / static_cast<double>(n), static_cast<double>(ic_hits) / static_cast<double>(n)};
}

void vote(const Array& logits, std::size_t offset, const EvalSet& set, std::size_t i, std::size_t& iw_votes,
          std::size_t& ic_hits) {
  const auto rows = rows_at(offset);
  const double iw = model::pattern_loglik(logits, set.iw_targets[i], rows);
  const double ic = model::pattern_loglik(logits, set.ic_targets[i], rows);
  if (iw > ic) ++iw_votes;
  if (model::predict(logits, rows) == set.ic_targets[i]) ++ic_hits;
}

void require_switch(const EvalSet& set) {
  if (set.ic_targets.size() != set.size() || set.iw_targets.size() != set.size()) {
    throw ContractError("preference metrics need ic and iw targets for every example");
  }
}

}  // namespace

double accuracy(const model::ModelParams& params, const model::ModelConfig& cfg, const EvalSet& set) {
  if (set.size() == 0) return 0.0;
  std::size_t hits = 0;
  for_each_scored(params, cfg, set, [&](const Array& logits, std::size_t offset, std::size_t i) {
    const grammar::Triple got = model::predict(logits, rows_at(offset));
    for (std::size_t p = 0; p < got.size(); ++p) hits += got[p] == set.examples[i].targets[p];
  });
  return static_cast<double>(hits) / static_cast<double>(grammar::kPatternLength * set.size());
}

double accuracy(const Array& masked_logits, const EvalSet& set) {
  if (masked_logits.rows() != 3 * set.size()) {
    throw DimensionError("accuracy: " + std::to_string(masked_logits.rows()) + " logit rows for " +
                         std::to_string(set.size()) + " examples");
  }
  if (set.size() == 0) return 0.0;
  std::size_t hits = 0;
  for (std::size_t i = 0; i < set.size(); ++i) {
    const grammar::Triple got = model::predict(masked_logits, rows_at(3 * i));
    for (std::size_t p = 0; p < got.size(); ++p) hits += got[p] == set.examples[i].targets[p];
  }
  return static_cast<double>(hits) / static_cast<double>(grammar::kPatternLength * set.size());
}

Preference preference_metrics(const Array& masked_logits, const EvalSet& switch_set) {
  require_switch(switch_set);
  if (masked_logits.rows() != 3 * switch_set.size()) {
    throw DimensionError("preference_metrics: " + std::to_string(masked_logits.rows()) + " logit rows for " +
                         std::to_string(switch_set.size()) + " examples");
  }
  std::size_t iw_votes = 0, ic_hits = 0;
  for (std::size_t i = 0; i < switch_set.size(); ++i) vote(masked_logits, 3 * i, switch_set, i, iw_votes, ic_hits);
  return tally(switch_set.size(), iw_votes, ic_hits);
}

Preference preference_metrics(const model::ModelParams& params, const model::ModelConfig& cfg,
                              const EvalSet& switch_set) {
  require_switch(switch_set);
  std::size_t iw_votes = 0, ic_hits = 0;
  for_each_scored(params, cfg, switch_set, [&](const Array& logits, std::size_t offset, std::size_t i) {
    vote(logits, offset, switch_set, i, iw_votes, ic_hits);
  });
  return tally(switch_set.size(), iw_votes, ic_hits);
}

MetricsRecord evaluate(const model::ModelParams& params, const model::ModelConfig& cfg, const EvalSuite& suite,
                       const grammar::PairRegistry& registry) {
  for (std::uint64_t key : suite.reserved) {
    if (registry.contains_key(key)) {
      throw ContractError("evaluation pair " + std::to_string(key >> 32) + "/" + std::to_string(key & 0xffffffffu) +
                          " was seen in training");
    }
  }
  MetricsRecord r;
  r.val_acc = accuracy(params, cfg, suite.get(EvalKind::Validation));
  r.head_acc = accuracy(params, cfg, suite.get(EvalKind::Head));
  r.tail_acc = accuracy(params, cfg, suite.get(EvalKind::Tail));
  const Preference head = preference_metrics(params, cfg, suite.get(EvalKind::HeadSwitch));
  const Preference tail = preference_metrics(params, cfg, suite.get(EvalKind::TailSwitch));
  r.head_iw_pref = head.iw_pref;
  r.head_ic_acc = head.ic_acc;
  r.tail_iw_pref = tail.iw_pref;
  r.tail_ic_acc = tail.ic_acc;
  r.unseen_acc = accuracy(params, cfg, suite.get(EvalKind::Unseen));
  return r;
}

Checkpoint initial_state(const ExperimentConfig& cfg) {
  cfg.validate();
  Checkpoint ck;
  ck.config = cfg;
  const Rng root(cfg.seed);
  Rng init = root.split("init");
  ck.params = model::init_params(cfg.model, init);
  ck.opt = optim::OptState::zeros_like(ck.params);
  ck.train_rng = root.split("train");
  ck.reset_rng = root.split("reset");
  return ck;
}

MetricsRecord evaluate_checkpoint(const Checkpoint& ck) {
  const grammar::Lexicon lex(ck.config.grammar);
  const EvalSuite suite = build_eval_suite(ck.config, lex);
  MetricsRecord r = evaluate(ck.params, ck.config.model, suite, ck.registry);
  r.step = ck.step;
  r.train_loss = ck.last_train_loss;
  return r;
}

namespace {

/// Configs agree on everything that shapes the trajectory.
void require_resumable(const ExperimentConfig& saved, const ExperimentConfig& requested) {
  json a = config_to_json(saved);
  json b = config_to_json(requested);
  for (const char* free : {"steps", "checkpoint_every"}) {
    a.erase(free);
    b.erase(free);
  }
  if (a != b) throw ConfigError("checkpoint was written by a different experiment configuration");
}

/// Drops records past `step` left behind by an interrupted run.
void trim_metrics(const std::filesystem::path& path, std::uint64_t step) {
  std::ifstream in(path);
  if (!in) return;
  std::string kept, line;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    const json j = json::parse(line, nullptr, false);
    if (j.is_discarded() || !j.contains("step")) continue;
    if (j["step"].get<std::uint64_t>() <= step) kept += line + "\n";
  }
  in.close();
  std::ofstream out(path, std::ios::trunc);
  out << kept;
}

void write_text(const std::filesystem::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw Error("cannot write " + path.string());
  out << text;
}

void log_record(std::ostream* log, const MetricsRecord& r) {
  if (!log) return;
  char buf[256];
  std::snprintf(buf, sizeof buf,
                "step %llu loss %.4f val %.3f head %.3f tail %.3f unseen %.3f iw(h/t) %.3f/%.3f ic(h/t) %.3f/%.3f",
                static_cast<unsigned long long>(r.step), r.train_loss, r.val_acc, r.head_acc, r.tail_acc,
                r.unseen_acc, r.head_iw_pref, r.tail_iw_pref, r.head_ic_acc, r.tail_ic_acc);
  *log << buf << std::endl;
}

}  // namespace

MetricsRecord run_experiment(const ExperimentConfig& cfg, const std::filesystem::path& out_dir,
                             const RunOptions& opts) {
  cfg.validate();
  std::filesystem::create_directories(out_dir);
  const grammar::Lexicon lex(cfg.grammar);
  const EvalSuite suite = build_eval_suite(cfg, lex);
  const std::filesystem::path metrics_path = out_dir / kMetricsFile;
  const std::filesystem::path checkpoint_path = out_dir / kCheckpointFile;

  Checkpoint st;
  if (opts.resume) {
    st = load_checkpoint(*opts.resume);
    require_resumable(st.config, cfg);
    if (st.step > cfg.steps) {
      throw ConfigError("checkpoint is at step " + std::to_string(st.step) + ", beyond the requested " +
                        std::to_string(cfg.steps) + " steps");
    }
    st.config = cfg;
    trim_metrics(metrics_path, st.step);
  } else {
    st = initial_state(cfg);
  }
  write_text(out_dir / kConfigFile, config_to_json(cfg).dump(2) + "\n");

  std::ofstream metrics(metrics_path, opts.resume ? std::ios::app : std::ios::trunc);
  if (!metrics) throw Error("cannot write " + metrics_path.string());

  auto emit = [&](MetricsRecord r) {
    metrics << to_jsonl(r) << '\n';
    metrics.flush();
    log_record(opts.log, r);
    return r;
  };

  MetricsRecord last;
  if (!opts.resume) {
    last = evaluate(st.params, cfg.model, suite, st.registry);
    last.step = 0;
    last.train_loss = 0.0;
    emit(last);
  } else if (st.step == cfg.steps) {
    last = evaluate(st.params, cfg.model, suite, st.registry);
    last.step = st.step;
    last.train_loss = st.last_train_loss;
  }

  std::vector<grammar::Example> batch(cfg.batch_size);
  while (st.step < cfg.steps) {
    if (optim::should_reset(st.step, cfg.schedule)) {
      optim::reset_embeddings(st.params, st.opt, st.reset_rng, cfg.model.init_std);
    }
    for (auto& ex : batch) {
      do {
        ex = grammar::sample_example(lex, st.train_rng);
      } while (suite.is_reserved(ex.meta.noun, ex.meta.adj));
      st.registry.insert(ex.meta.noun, ex.meta.adj);
    }
    const model::LossAndGrad lg = model::loss_and_grad(st.params, cfg.model, batch);
    if (!std::isfinite(lg.loss)) {
      throw NumericError("non-finite training loss at step " + std::to_string(st.step + 1) +
                         "; the last checkpoint in " + out_dir.string() + " is retained");
    }
    optim::adamw_step(st.params, lg.grads, st.opt, cfg.optim);
    ++st.step;
    st.loss_sum += lg.loss;
    ++st.loss_count;

    if (st.step % cfg.eval_every == 0 || st.step == cfg.steps) {
      last = evaluate(st.params, cfg.model, suite, st.registry);
      last.step = st.step;
      last.train_loss = st.loss_sum / static_cast<double>(st.loss_count);
      emit(last);
      st.last_train_loss = last.train_loss;
      st.loss_sum = 0.0;
      st.loss_count = 0;
    }
    if (cfg.checkpoint_every != 0 && st.step % cfg.checkpoint_every == 0 && st.step != cfg.steps) {
      save_checkpoint(st, checkpoint_path);
    }
  }
  save_checkpoint(st, checkpoint_path);
  return last;
}

}  // namespace forgetlab::trainer
