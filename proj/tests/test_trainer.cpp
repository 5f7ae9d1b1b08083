#include "doctest.h"
#include "support.hpp"

#include "forgetlab/errors.hpp"
#include "forgetlab/trainer.hpp"

#include "json.hpp"

#include <cmath>
#include <fstream>

using namespace forgetlab;
using namespace forgetlab::trainer;
using json = nlohmann::ordered_json;
using grammar::EvalKind;
using numerics::Array;

namespace {

ExperimentConfig small_config(std::uint64_t steps = 40) {
  ExperimentConfig cfg;
  cfg.grammar.v = 200;
  cfg.model.n_layers = 1;
  cfg.model.d_model = 8;
  cfg.model.d_ff = 16;
  cfg.optim.lr = 1e-3;
  cfg.steps = steps;
  cfg.batch_size = 8;
  cfg.eval_every = 10;
  cfg.eval_set_size = 40;
  cfg.unseen_count = 30;
  cfg.eval_pool_pairs = 16;
  cfg.eval_max_pair_probability = 1.0;
  return cfg.resolved();
}

std::vector<MetricsRecord> read_metrics(const std::filesystem::path& p) {
  std::vector<MetricsRecord> out;
  std::ifstream in(p);
  std::string line;
  while (std::getline(in, line)) out.push_back(metrics_from_json(json::parse(line)));
  return out;
}

/// One row per masked position with `hot` at the given id.
void set_row(Array& logits, std::size_t row, grammar::TokenId id, double value = 5.0) { logits(row, id) = value; }

}  // namespace

TEST_SUITE("config") {
  TEST_CASE("json round trip") {
    ExperimentConfig cfg = small_config();
    cfg.schedule = optim::ForgettingSchedule::temporary(500, 3000);
    cfg.unseen_dist = grammar::UnseenDist::Normal55;
    cfg.unseen_rows = UnseenRows::Fresh;
    cfg.optim.weight_decay = 0.1;
    cfg = cfg.resolved();
    const json j = config_to_json(cfg);
    const ExperimentConfig back = config_from_json(j);
    CHECK(config_to_json(back).dump() == j.dump());
    CHECK(back.schedule == cfg.schedule);
    CHECK(j["schedule"]["N"] == 3000);

    cfg.schedule = optim::ForgettingSchedule::active(1000);
    CHECK(config_to_json(cfg)["schedule"]["N"] == "inf");
  }

  TEST_CASE("defaults and schedule horizon defaults") {
    const ExperimentConfig d = config_from_json(json::object());
    CHECK(d.steps == 60000);
    CHECK(d.batch_size == 64);
    CHECK(d.eval_every == 500);
    CHECK(d.unseen_count == 1500);
    CHECK(d.optim.lr == 5e-5);
    CHECK(d.model.vocab_size == 1002);
    CHECK(d.unseen_rows == UnseenRows::Reserved);
    CHECK(d.model.reserved_rows == 1500);
    CHECK(config_from_json(json::parse(R"({"unseen_rows": "fresh"})")).model.reserved_rows == 0);
    CHECK(config_from_json(json::parse(R"({"schedule": {"kind": "active"}})")).schedule.horizon == optim::kUnbounded);
    CHECK(config_from_json(json::parse(R"({"schedule": {"kind": "vanilla"}})")).schedule.horizon == 0);
    CHECK_THROWS_AS(config_from_json(json::parse(R"({"schedule": {"kind": "temporary"}})")), ConfigError);
  }

  TEST_CASE("unknown fields, wrong types and invalid values are rejected") {
    CHECK_THROWS_AS(config_from_json(json::parse(R"({"stepz": 10})")), ConfigError);
    CHECK_THROWS_AS(config_from_json(json::parse(R"({"grammar": {"v": 1000, "colour": 1}})")), ConfigError);
    CHECK_THROWS_AS(config_from_json(json::parse(R"({"steps": "many"})")), ConfigError);
    CHECK_THROWS_AS(config_from_json(json::parse(R"({"grammar": {"v": 1001}})")).validate(), ConfigError);
    CHECK_THROWS_AS(config_from_json(json::parse(R"({"unseen_dist": "cauchy"})")), ConfigError);
    CHECK_THROWS_AS(config_from_json(json::parse(R"({"unseen_dist": "uniform01"})")), ConfigError);
    CHECK_NOTHROW(config_from_json(json::parse(R"({"unseen_dist": "uniform01", "unseen_rows": "fresh"})")));
    ExperimentConfig cfg = small_config();
    cfg.model.vocab_size = 7;
    CHECK_THROWS_AS(cfg.validate(), ConfigError);
    cfg = small_config();
    cfg.eval_every = 0;
    CHECK_THROWS_AS(cfg.validate(), ConfigError);
    CHECK_THROWS_AS(load_config("/nonexistent/config.json"), ConfigError);
  }
}

TEST_SUITE("metrics") {
  TEST_CASE("record json keeps the field order and omits an absent probe") {
    MetricsRecord r;
    r.step = 500;
    r.val_acc = 0.25;
    const std::string line = to_jsonl(r);
    CHECK(line.find('\n') == std::string::npos);
    CHECK(line.rfind("{\"step\":500,\"train_loss\":", 0) == 0);
    CHECK(line.find("probe_acc") == std::string::npos);
    CHECK(metrics_from_json(json::parse(line)) == r);
    r.probe_acc = 0.5;
    CHECK(metrics_from_json(to_json(r)) == r);
  }

  TEST_CASE("accuracy counts masked positions") {
    grammar::EvalSet set;
    set.examples.resize(2);
    set.examples[0].targets = {1, 2, 2};
    set.examples[1].targets = {3, 3, 3};
    Array logits = Array::matrix(6, 5);
    set_row(logits, 0, 1);
    set_row(logits, 1, 2);
    set_row(logits, 2, 4);
    set_row(logits, 3, 3);
    set_row(logits, 4, 3);
    set_row(logits, 5, 3);
    CHECK(accuracy(logits, set) == doctest::Approx(5.0 / 6.0));
  }

  TEST_CASE("switch preference on a hand case") {
    grammar::EvalSet set;
    set.kind = EvalKind::HeadSwitch;
    set.examples.resize(4);
    set.ic_targets = {{1, 2, 2}, {1, 2, 2}, {1, 2, 2}, {1, 2, 2}};
    set.iw_targets = {{3, 3, 3}, {3, 3, 3}, {3, 3, 3}, {3, 3, 3}};
    for (std::size_t i = 0; i < 4; ++i) set.examples[i].targets = set.ic_targets[i];
    Array logits = Array::matrix(12, 6);
    // 0: prefers the in-weights triple
    for (std::size_t r = 0; r < 3; ++r) set_row(logits, r, 3);
    // 1: prefers and predicts the in-context triple
    set_row(logits, 3, 1);
    set_row(logits, 4, 2);
    set_row(logits, 5, 2);
    // 2: a tie is not an in-weights vote
    // 3: in-context wins the likelihood but the last position predicts neither
    set_row(logits, 9, 1);
    set_row(logits, 10, 2);
    set_row(logits, 11, 5);
    const Preference p = preference_metrics(logits, set);
    CHECK(p.iw_pref == doctest::Approx(0.25));
    CHECK(p.ic_acc == doctest::Approx(0.25));
  }
}

TEST_SUITE("evaluation") {
  TEST_CASE("an untrained model is near chance") {
    ExperimentConfig cfg = small_config();
    cfg.grammar.v = 1000;
    cfg.eval_set_size = 200;
    cfg = cfg.resolved();
    const Checkpoint ck = initial_state(cfg);
    const MetricsRecord r = evaluate_checkpoint(ck);
    CHECK(r.val_acc < 0.05);
    CHECK(r.unseen_acc < 0.05);
    CHECK(r.step == 0);
  }

  TEST_CASE("the suite is disjoint from training and from itself across runs") {
    const ExperimentConfig cfg = small_config();
    const grammar::Lexicon lex(cfg.grammar);
    const EvalSuite a = build_eval_suite(cfg, lex), b = build_eval_suite(cfg, lex);
    CHECK(a.reserved == b.reserved);
    for (EvalKind k : grammar::kAllEvalKinds) {
      CHECK(a.get(k).size() == cfg.eval_set_size);
      CHECK(a.get(k).examples == b.get(k).examples);
    }
    for (const auto& ex : a.get(EvalKind::Validation).examples) CHECK(a.is_reserved(ex.meta.noun, ex.meta.adj));

    grammar::PairRegistry reg;
    const auto& ex = a.get(EvalKind::Tail).examples.front();
    reg.insert(ex.meta.noun, ex.meta.adj);
    const Checkpoint ck = initial_state(cfg);
    CHECK_THROWS_AS(evaluate(ck.params, cfg.model, a, reg), ContractError);
  }
}

TEST_SUITE("unseen rows") {
  TEST_CASE("reserved rows live in the embedding and are never trained on as inputs") {
    const auto dir = testing::scratch_dir("reserved");
    ExperimentConfig cfg = small_config(30);
    cfg.schedule = optim::ForgettingSchedule::active(20);
    REQUIRE(cfg.model.reserved_rows == cfg.unseen_count);
    run_experiment(cfg, dir);
    const Checkpoint ck = load_checkpoint(dir / kCheckpointFile);
    CHECK(ck.params.embedding.rows() == cfg.grammar.v + 2 + cfg.unseen_count);
    for (std::uint64_t key : ck.registry.sorted_keys()) {
      CHECK((key >> 32) < cfg.grammar.v);
      CHECK((key & 0xffffffffu) < cfg.grammar.v);
    }
    const grammar::Lexicon lex(cfg.grammar);
    const EvalSuite suite = build_eval_suite(cfg, lex);
    const auto& unseen = suite.get(EvalKind::Unseen);
    CHECK(unseen.unseen_rows.size() == 0);
    for (const auto& ex : unseen.examples) {
      CHECK(ex.meta.noun >= lex.vocab_size());
      CHECK(ex.meta.noun < lex.vocab_size() + cfg.unseen_count);
    }
    // the softmax moves reserved rows even though no input contains them
    const Checkpoint start = initial_state(cfg);
    ExperimentConfig plain = small_config(10);
    const auto d2 = testing::scratch_dir("reserved_plain");
    run_experiment(plain, d2);
    const Checkpoint after = load_checkpoint(d2 / kCheckpointFile);
    CHECK(after.params.embedding.row(lex.vocab_size())[0] != start.params.embedding.row(lex.vocab_size())[0]);
  }

  TEST_CASE("fresh rows are drawn at evaluation time") {
    ExperimentConfig cfg = small_config();
    cfg.unseen_rows = UnseenRows::Fresh;
    cfg.unseen_dist = grammar::UnseenDist::Uniform01;
    cfg = cfg.resolved();
    CHECK(cfg.model.reserved_rows == 0);
    const grammar::Lexicon lex(cfg.grammar);
    const EvalSuite suite = build_eval_suite(cfg, lex);
    CHECK(suite.get(EvalKind::Unseen).unseen_rows.rows() == cfg.unseen_count);
    const Checkpoint ck = initial_state(cfg);
    CHECK(ck.params.embedding.rows() == cfg.grammar.v + 2);
    CHECK(evaluate_checkpoint(ck).unseen_acc < 0.2);
  }
}

TEST_SUITE("runs") {
  TEST_CASE("zero steps writes one record and a checkpoint") {
    const auto dir = testing::scratch_dir("zero");
    ExperimentConfig cfg = small_config(0);
    const MetricsRecord last = run_experiment(cfg, dir);
    CHECK(testing::count_lines(testing::read_file(dir / kMetricsFile)) == 1);
    CHECK(last.step == 0);
    CHECK(last.train_loss == 0.0);
    CHECK(load_checkpoint(dir / kCheckpointFile).step == 0);
    CHECK(std::filesystem::exists(dir / kConfigFile));
  }

  TEST_CASE("records at every eval_every and the final step; reruns are byte-identical") {
    const auto d1 = testing::scratch_dir("det1"), d2 = testing::scratch_dir("det2");
    ExperimentConfig cfg = small_config(35);
    cfg.schedule = optim::ForgettingSchedule::active(10);
    run_experiment(cfg, d1);
    run_experiment(cfg, d2);
    const auto recs = read_metrics(d1 / kMetricsFile);
    REQUIRE(recs.size() == 5);
    CHECK(recs[0].step == 0);
    CHECK(recs[3].step == 30);
    CHECK(recs[4].step == 35);
    for (std::size_t i = 1; i < recs.size(); ++i) CHECK(std::isfinite(recs[i].train_loss));
    CHECK(testing::read_file(d1 / kMetricsFile) == testing::read_file(d2 / kMetricsFile));
    CHECK(testing::read_file(d1 / kCheckpointFile) == testing::read_file(d2 / kCheckpointFile));
  }

  TEST_CASE("training records every pair it sees and never a reserved one") {
    const auto dir = testing::scratch_dir("registry");
    const ExperimentConfig cfg = small_config(30);
    run_experiment(cfg, dir);
    const Checkpoint ck = load_checkpoint(dir / kCheckpointFile);
    CHECK(ck.registry.size() > 0);
    CHECK(ck.registry.size() <= 30 * cfg.batch_size);
    const grammar::Lexicon lex(cfg.grammar);
    const EvalSuite suite = build_eval_suite(cfg, lex);
    for (std::uint64_t key : ck.registry.sorted_keys()) CHECK_FALSE(suite.reserved.contains(key));
  }

  TEST_CASE("resuming reproduces an uninterrupted run") {
    const auto full = testing::scratch_dir("full"), part = testing::scratch_dir("part");
    ExperimentConfig cfg = small_config(60);
    cfg.schedule = optim::ForgettingSchedule::temporary(15, 45);
    run_experiment(cfg, full);

    ExperimentConfig first = cfg;
    first.steps = 30;
    run_experiment(first, part);
    RunOptions opts;
    opts.resume = part / kCheckpointFile;
    const MetricsRecord last = run_experiment(cfg, part, opts);
    CHECK(last.step == 60);
    CHECK(testing::read_file(full / kMetricsFile) == testing::read_file(part / kMetricsFile));
    CHECK(testing::read_file(full / kCheckpointFile) == testing::read_file(part / kCheckpointFile));
    CHECK(evaluate_checkpoint(load_checkpoint(full / kCheckpointFile)) == [&] {
      MetricsRecord r = read_metrics(full / kMetricsFile).back();
      return r;
    }());
  }

  TEST_CASE("resuming from a periodic checkpoint after a crash drops the orphaned records") {
    const auto full = testing::scratch_dir("full2"), part = testing::scratch_dir("part2");
    ExperimentConfig cfg = small_config(50);
    run_experiment(cfg, full);
    ExperimentConfig crashed = cfg;
    crashed.checkpoint_every = 20;
    run_experiment(crashed, part);
    // pretend the run died after step 40: keep the step-40 checkpoint's predecessor
    ExperimentConfig shorter = cfg;
    shorter.steps = 20;
    const auto mid = testing::scratch_dir("mid2");
    run_experiment(shorter, mid);
    std::filesystem::copy_file(mid / kCheckpointFile, part / "step20.bin");
    RunOptions opts;
    opts.resume = part / "step20.bin";
    run_experiment(cfg, part, opts);
    CHECK(testing::read_file(full / kMetricsFile) == testing::read_file(part / kMetricsFile));
  }

  TEST_CASE("a resume with a different config is refused") {
    const auto dir = testing::scratch_dir("mismatch");
    ExperimentConfig cfg = small_config(10);
    run_experiment(cfg, dir);
    ExperimentConfig other = cfg;
    other.steps = 20;
    other.optim.weight_decay = 0.5;
    RunOptions opts;
    opts.resume = dir / kCheckpointFile;
    CHECK_THROWS_AS(run_experiment(other, dir, opts), ConfigError);
  }

  TEST_CASE("a diverging run aborts and keeps its last checkpoint") {
    const auto dir = testing::scratch_dir("diverge");
    ExperimentConfig cfg = small_config(20);
    cfg.optim.lr = 1e300;
    cfg.checkpoint_every = 1;
    CHECK_THROWS_AS(run_experiment(cfg, dir), NumericError);
    const Checkpoint ck = load_checkpoint(dir / kCheckpointFile);
    CHECK(ck.step >= 1);
    CHECK(ck.step < 20);
  }
}

TEST_SUITE("checkpoint") {
  TEST_CASE("serialization round trip is byte-stable") {
    const auto dir = testing::scratch_dir("ckpt");
    run_experiment(small_config(12), dir);
    const std::string bytes = testing::read_file(dir / kCheckpointFile);
    const Checkpoint ck = deserialize_checkpoint(bytes);
    CHECK(ck.step == 12);
    CHECK(serialize_checkpoint(ck) == bytes);
    save_checkpoint(ck, dir / "again.bin");
    CHECK(testing::read_file(dir / "again.bin") == bytes);
    CHECK(ck.opt.t == 12);
  }

  TEST_CASE("damaged files are reported") {
    const std::string bytes = serialize_checkpoint(initial_state(small_config()));
    CHECK_THROWS_AS(deserialize_checkpoint(bytes.substr(0, bytes.size() / 2)), CheckpointError);
    CHECK_THROWS_AS(deserialize_checkpoint(bytes.substr(0, 10)), CheckpointError);
    CHECK_THROWS_AS(deserialize_checkpoint(bytes + "x"), CheckpointError);
    std::string bad_magic = bytes;
    bad_magic[0] = 'X';
    CHECK_THROWS_AS(deserialize_checkpoint(bad_magic), CheckpointError);
    std::string future = bytes;
    future[8] = 2;
    try {
      deserialize_checkpoint(future);
      FAIL("expected CheckpointError");
    } catch (const CheckpointError& e) {
      CHECK(std::string(e.what()).find("version") != std::string::npos);
    }
    CHECK_THROWS_AS(load_checkpoint("/nonexistent/checkpoint.bin"), CheckpointError);
  }
}

TEST_SUITE("sweep") {
  TEST_CASE("cells follow the grid with the last axis fastest") {
    SweepGrid grid;
    grid.alpha = {0.0, 1.5};
    grid.N = {0, optim::kUnbounded, 30};
    CHECK(grid.cell_count() == 6);
    json params;
    const ExperimentConfig c = cell_config(small_config(), grid, 4, &params);
    CHECK(c.grammar.alpha == 1.5);
    CHECK(c.schedule.kind == optim::ScheduleKind::Active);
    CHECK(params.dump() == R"({"alpha":1.5,"N":"inf"})");
    CHECK(cell_config(small_config(), grid, 5).schedule == optim::ForgettingSchedule::temporary(1000, 30));
    CHECK(cell_config(small_config(), grid, 0).schedule.kind == optim::ScheduleKind::Vanilla);

    const SweepGrid parsed = grid_from_json(json::parse(R"({"alpha": [0, 1.5], "N": [0, "inf", 30]})"));
    CHECK(parsed.cell_count() == 6);
    CHECK(parsed.N[1] == optim::kUnbounded);
    CHECK_THROWS_AS(grid_from_json(json::parse(R"({"beta": [1]})")), ConfigError);
  }

  TEST_CASE("a 2x2 sweep with one bad cell") {
    const auto root = testing::scratch_dir("sweep");
    SweepGrid grid;
    grid.v = {200, 201};
    grid.seed = {0, 1};
    const auto cells = run_sweep(small_config(10), grid, root);
    REQUIRE(cells.size() == 4);
    CHECK(cells[0].status == "ok");
    CHECK(cells[1].status == "ok");
    CHECK(cells[2].status.rfind("error:", 0) == 0);
    CHECK(cells[3].status.rfind("error:", 0) == 0);
    CHECK(std::filesystem::exists(root / "cell_000" / kMetricsFile));
    CHECK(std::filesystem::exists(root / "cell_001" / kCheckpointFile));
    const json manifest = json::parse(testing::read_file(root / "manifest.json"));
    REQUIRE(manifest.size() == 4);
    CHECK(manifest[2]["status"] == cells[2].status);
    CHECK(manifest[1]["params"].dump() == R"({"v":200,"seed":1})");
    CHECK(testing::read_file(root / "cell_000" / kMetricsFile) !=
          testing::read_file(root / "cell_001" / kMetricsFile));
  }

  TEST_CASE("a one-cell sweep equals the plain run") {
    const auto root = testing::scratch_dir("sweep1"), single = testing::scratch_dir("single");
    SweepGrid grid;
    grid.seed = {0};
    run_sweep(small_config(15), grid, root);
    run_experiment(small_config(15), single);
    CHECK(testing::read_file(root / "cell_000" / kMetricsFile) == testing::read_file(single / kMetricsFile));
  }

  TEST_CASE("an empty grid is a config error") {
    CHECK_THROWS_AS(run_sweep(small_config(5), SweepGrid{}, testing::scratch_dir("empty")), ConfigError);
  }
}
