#include "plot.hpp"

#include "forgetlab/analysis.hpp"
#include "forgetlab/errors.hpp"
#include "forgetlab/trainer.hpp"

#include "CLI11.hpp"
#include "json.hpp"

#include <fstream>
#include <iostream>
#include <set>

namespace {

using namespace forgetlab;
using json = nlohmann::ordered_json;

constexpr int kOk = 0;
constexpr int kRuntime = 1;
constexpr int kUsage = 2;

json triple_json(const grammar::Triple& t) { return json(std::vector<grammar::TokenId>(t.begin(), t.end())); }

json example_json(const grammar::Example& ex) {
  json j;
  j["tokens"] = std::vector<grammar::TokenId>(ex.tokens.begin(), ex.tokens.end());
  j["targets"] = triple_json(ex.targets);
  j["meta"] = {{"noun", ex.meta.noun},
               {"adj", ex.meta.adj},
               {"order", std::string(grammar::to_string(ex.meta.order))},
               {"query_role", std::string(grammar::to_string(ex.meta.query_role))},
               {"noun_rank", ex.meta.noun_rank},
               {"adj_rank", ex.meta.adj_rank}};
  return j;
}

int cmd_train(const std::string& config, const std::string& out, const std::string& resume) {
  const trainer::ExperimentConfig cfg = trainer::load_config(config);
  trainer::RunOptions opts;
  opts.log = &std::cerr;
  if (!resume.empty()) opts.resume = resume;
  const trainer::MetricsRecord last = trainer::run_experiment(cfg, out, opts);
  std::cout << trainer::to_jsonl(last) << '\n';
  return kOk;
}

int cmd_gen(const std::string& config, std::size_t n, const std::string& kind, const std::string& out_path) {
  const trainer::ExperimentConfig cfg = trainer::load_config(config);
  const grammar::Lexicon lex(cfg.grammar);
  std::vector<json> lines;
  if (kind == "train") {
    numerics::Rng rng = numerics::Rng(cfg.seed).split("train");
    for (std::size_t i = 0; i < n; ++i) lines.push_back(example_json(grammar::sample_example(lex, rng)));
  } else {
    grammar::EvalKind k;
    try {
      k = grammar::parse_eval_kind(kind);
    } catch (const Error&) {
      throw ConfigError("unknown --kind '" + kind + "' (expected train, validation, head, tail, head_switch, "
                        "tail_switch or unseen)");
    }
    grammar::EvalSetOptions opts;
    opts.pool_pairs = cfg.eval_pool_pairs;
    opts.max_pair_probability = cfg.eval_max_pair_probability;
    opts.unseen_count = cfg.unseen_count;
    opts.embed_dim = cfg.model.d_model;
    opts.unseen_dist = cfg.unseen_dist;
    opts.init_std = cfg.model.init_std;
    opts.fresh_rows = cfg.unseen_rows == trainer::UnseenRows::Fresh;
    numerics::Rng rng = numerics::Rng(cfg.seed).split("eval").split(grammar::to_string(k));
    const grammar::EvalSet set = grammar::build_eval_set(k, n, lex, grammar::PairRegistry{}, rng, opts);
    for (std::size_t i = 0; i < set.size(); ++i) {
      json j = example_json(set.examples[i]);
      if (set.is_switch()) {
        j["ic_targets"] = triple_json(set.ic_targets[i]);
        j["iw_targets"] = triple_json(set.iw_targets[i]);
      }
      lines.push_back(std::move(j));
    }
  }
  std::ofstream file;
  if (!out_path.empty()) {
    file.open(out_path, std::ios::trunc);
    if (!file) throw Error("cannot write " + out_path);
  }
  std::ostream& out = out_path.empty() ? std::cout : file;
  for (const auto& j : lines) out << j.dump() << '\n';
  return kOk;
}

int cmd_eval(const std::string& checkpoint, const std::string& out) {
  const trainer::Checkpoint ck = trainer::load_checkpoint(checkpoint);
  const trainer::MetricsRecord r = trainer::evaluate_checkpoint(ck);
  std::filesystem::create_directories(out);
  std::ofstream file(std::filesystem::path(out) / "metrics.json", std::ios::trunc);
  if (!file) throw Error("cannot write " + (std::filesystem::path(out) / "metrics.json").string());
  file << trainer::to_json(r).dump(2) << '\n';
  std::cout << trainer::to_jsonl(r) << '\n';
  return kOk;
}

int cmd_analyze(const std::string& checkpoint, const std::string& out) {
  const trainer::Checkpoint ck = trainer::load_checkpoint(checkpoint);
  const analysis::EmbeddingReport report = analysis::write_embedding_report(ck, out);
  for (const auto& p : report.probes) {
    std::cout << "probe " << p.stratum << ": train " << p.train_acc << " heldout " << p.heldout_acc << " (n "
              << p.n_train << "+" << p.n_heldout << ")\n";
  }
  return kOk;
}

int cmd_sweep(const std::string& config, const std::string& grid_path, const std::string& out) {
  const trainer::ExperimentConfig base = trainer::load_config(config);
  std::ifstream in(grid_path);
  if (!in) throw ConfigError("cannot open grid file " + grid_path);
  json j;
  try {
    j = json::parse(in);
  } catch (const json::parse_error& e) {
    throw ConfigError("grid file " + grid_path + " is not valid JSON: " + e.what());
  }
  const trainer::SweepGrid grid = trainer::grid_from_json(j);
  trainer::RunOptions opts;
  opts.log = &std::cerr;
  const auto cells = trainer::run_sweep(base, grid, out, opts);
  std::size_t failed = 0;
  for (const auto& c : cells) {
    std::cout << c.directory << ' ' << c.params.dump() << ' ' << c.status << '\n';
    failed += c.status != "ok";
  }
  if (failed) {
    std::cerr << failed << " of " << cells.size() << " cells failed; see manifest.json\n";
    return kRuntime;
  }
  return kOk;
}

int cmd_plot(const std::vector<std::string>& files, std::vector<std::string> labels, const std::string& out) {
  if (!labels.empty() && labels.size() != files.size()) {
    throw ConfigError("--label must be given once per --metrics file");
  }
  std::vector<cli::PlotInput> inputs;
  std::set<std::string> used;
  for (std::size_t i = 0; i < files.size(); ++i) {
    const std::filesystem::path p(files[i]);
    std::string label = !labels.empty() ? labels[i]
                        : p.has_parent_path() && p.filename() == trainer::kMetricsFile
                            ? p.parent_path().filename().string()
                            : p.stem().string();
    for (char& c : label)
      if (c == ',' || c == '\n') c = '_';
    if (label.empty()) label = "run";
    std::string unique = label;
    for (int k = 2; used.contains(unique); ++k) unique = label + "_" + std::to_string(k);
    used.insert(unique);
    inputs.push_back({p, unique});
  }
  const cli::PlotSummary s = cli::write_plots(inputs, out);
  if (s.skipped) std::cerr << "warning: skipped " << s.skipped << " malformed line(s)\n";
  if (s.records == 0) {
    std::cerr << "error: no records\n";
    return kRuntime;
  }
  std::cout << "wrote " << s.metrics.size() << " metric series from " << s.records << " records";
  if (s.skipped) std::cout << " (" << s.skipped << " malformed lines skipped)";
  std::cout << '\n';
  return kOk;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Forgetting-schedule experiments on a synthetic part-of-speech cloze task"};
  app.require_subcommand(1);

  std::string config, out, resume, checkpoint, grid, kind = "train";
  std::size_t n = 10;
  std::vector<std::string> metrics, labels;

  auto* train = app.add_subcommand("train", "train one model");
  train->add_option("--config", config, "experiment config (JSON)")->required();
  train->add_option("--out", out, "run directory")->required();
  train->add_option("--resume", resume, "checkpoint to continue from");

  auto* gen = app.add_subcommand("gen", "emit examples as JSONL");
  gen->add_option("--config", config, "experiment config (JSON)")->required();
  gen->add_option("--n", n, "number of examples")->required();
  gen->add_option("--kind", kind, "train, validation, head, tail, head_switch, tail_switch or unseen");
  gen->add_option("--out", out, "output file (default stdout)");

  auto* eval = app.add_subcommand("eval", "evaluate a checkpoint");
  eval->add_option("--checkpoint", checkpoint, "checkpoint file")->required();
  eval->add_option("--out", out, "output directory")->required();

  auto* analyze = app.add_subcommand("analyze", "embedding PCA and POS probes of a checkpoint");
  analyze->add_option("--checkpoint", checkpoint, "checkpoint file")->required();
  analyze->add_option("--out", out, "output directory")->required();

  auto* sweep = app.add_subcommand("sweep", "run a grid of experiments");
  sweep->add_option("--config", config, "base experiment config (JSON)")->required();
  sweep->add_option("--grid", grid, "grid of axis lists (JSON)")->required();
  sweep->add_option("--out", out, "sweep root directory")->required();

  auto* plot = app.add_subcommand("plot", "per-metric CSV series and SVG charts");
  plot->add_option("--metrics", metrics, "metrics.jsonl files")->required();
  plot->add_option("--label", labels, "run label per metrics file");
  plot->add_option("--out", out, "output directory")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? kOk : kUsage;
  }

  try {
    if (*train) return cmd_train(config, out, resume);
    if (*gen) return cmd_gen(config, n, kind, out);
    if (*eval) return cmd_eval(checkpoint, out);
    if (*analyze) return cmd_analyze(checkpoint, out);
    if (*sweep) return cmd_sweep(config, grid, out);
    if (*plot) return cmd_plot(metrics, labels, out);
  } catch (const ConfigError& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kUsage;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kRuntime;
  }
  return kUsage;
}
