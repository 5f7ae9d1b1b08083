#include "forgetlab/config.hpp"

#include "forgetlab/errors.hpp"

#include <fstream>
#include <set>
#include <string>

namespace forgetlab::trainer {

using json = nlohmann::ordered_json;

void ExperimentConfig::validate() const {
  grammar.validate();
  model.validate();
  optim.validate();
  schedule.validate();
  if (model.vocab_size != grammar.v + 2) {
    throw ConfigError("model.vocab_size is " + std::to_string(model.vocab_size) + " but grammar.v + 2 is " +
                      std::to_string(grammar.v + 2));
  }
  if (batch_size == 0) throw ConfigError("batch_size must be >= 1");
  if (eval_every == 0) throw ConfigError("eval_every must be >= 1");
  if (steps > 0 && eval_every > steps) throw ConfigError("eval_every must not exceed steps");
  if (eval_set_size == 0) throw ConfigError("eval_set_size must be >= 1");
  if (unseen_count < 2) throw ConfigError("unseen_count must be >= 2");
  if (unseen_rows == UnseenRows::Reserved && unseen_dist != grammar::UnseenDist::Init) {
    throw ConfigError("unseen_dist " + std::string(grammar::to_string(unseen_dist)) +
                      " needs unseen_rows \"fresh\": reserved rows follow the model initializer");
  }
  const std::size_t reserved = unseen_rows == UnseenRows::Reserved ? unseen_count : 0;
  if (model.reserved_rows != reserved) {
    throw ConfigError("model.reserved_rows is " + std::to_string(model.reserved_rows) + " but the unseen rows need " +
                      std::to_string(reserved));
  }
  if (!(eval_max_pair_probability > 0.0)) throw ConfigError("eval_max_pair_probability must be > 0");
}

ExperimentConfig ExperimentConfig::resolved() const {
  ExperimentConfig out = *this;
  out.model.vocab_size = grammar.v + 2;
  out.model.reserved_rows = unseen_rows == UnseenRows::Reserved ? unseen_count : 0;
  return out;
}

std::string_view to_string(UnseenRows u) noexcept { return u == UnseenRows::Reserved ? "reserved" : "fresh"; }

UnseenRows parse_unseen_rows(std::string_view name) {
  if (name == "reserved") return UnseenRows::Reserved;
  if (name == "fresh") return UnseenRows::Fresh;
  throw ConfigError("unknown unseen_rows '" + std::string(name) + "' (expected reserved or fresh)");
}

json horizon_to_json(std::uint64_t horizon) {
  if (horizon == optim::kUnbounded) return "inf";
  return horizon;
}

std::uint64_t horizon_from_json(const json& j) {
  if (j.is_string()) {
    const auto s = j.get<std::string>();
    if (s == "inf" || s == "infinity") return optim::kUnbounded;
    throw ConfigError("schedule.N: expected an integer or \"inf\", got \"" + s + "\"");
  }
  if (j.is_number_unsigned()) return j.get<std::uint64_t>();
  if (j.is_number_integer()) throw ConfigError("schedule.N must be non-negative");
  throw ConfigError("schedule.N: expected an integer or \"inf\"");
}

namespace {

/// Reads fields of one JSON object, rejecting anything it was not asked for.
class ObjectReader {
 public:
  ObjectReader(const json& j, std::string where) : j_(j), where_(std::move(where)) {
    if (!j_.is_object()) throw ConfigError(where_ + ": expected a JSON object");
  }

  template <class T>
  void read(const char* name, T& out) {
    seen_.insert(name);
    const auto it = j_.find(name);
    if (it == j_.end()) return;
    try {
      if constexpr (std::is_unsigned_v<T>) {
        if (!it->is_number_unsigned()) throw ConfigError("expected a non-negative integer");
      } else if constexpr (std::is_floating_point_v<T>) {
        if (!it->is_number()) throw ConfigError("expected a number");
      }
      out = it->template get<T>();
    } catch (const json::exception& e) {
      throw ConfigError(path(name) + ": " + e.what());
    } catch (const ConfigError& e) {
      throw ConfigError(path(name) + ": " + e.what());
    }
  }

  const json* find(const char* name) {
    seen_.insert(name);
    const auto it = j_.find(name);
    return it == j_.end() ? nullptr : &*it;
  }

  std::string path(const std::string& name) const { return where_.empty() ? name : where_ + "." + name; }

  void finish() const {
    for (const auto& [key, _] : j_.items()) {
      if (!seen_.contains(key)) throw ConfigError("unknown config field \"" + path(key) + "\"");
    }
  }

 private:
  const json& j_;
  std::string where_;
  std::set<std::string> seen_;
};

template <class Enum, class Parse>
void read_enum(ObjectReader& r, const char* name, Enum& out, Parse parse) {
  const json* j = r.find(name);
  if (!j) return;
  if (!j->is_string()) throw ConfigError(r.path(name) + ": expected a string");
  try {
    out = parse(j->get<std::string>());
  } catch (const ConfigError& e) {
    throw ConfigError(r.path(name) + ": " + e.what());
  }
}

}  // namespace

ExperimentConfig config_from_json(const json& j) {
  ExperimentConfig cfg;
  ObjectReader top(j, "");

  if (const json* g = top.find("grammar")) {
    ObjectReader r(*g, "grammar");
    r.read("v", cfg.grammar.v);
    r.read("alpha", cfg.grammar.alpha);
    r.read("epsilon", cfg.grammar.epsilon);
    r.read("n_bins", cfg.grammar.n_bins);
    r.read("seed", cfg.grammar.seed);
    r.finish();
  }
  cfg.model.vocab_size = cfg.grammar.v + 2;
  if (const json* m = top.find("model")) {
    ObjectReader r(*m, "model");
    r.read("n_layers", cfg.model.n_layers);
    r.read("n_heads", cfg.model.n_heads);
    r.read("d_model", cfg.model.d_model);
    r.read("d_ff", cfg.model.d_ff);
    r.read("max_len", cfg.model.max_len);
    r.read("vocab_size", cfg.model.vocab_size);
    r.read("init_std", cfg.model.init_std);
    r.read("ln_eps", cfg.model.ln_eps);
    r.finish();
  }
  if (const json* o = top.find("optim")) {
    ObjectReader r(*o, "optim");
    r.read("lr", cfg.optim.lr);
    r.read("beta1", cfg.optim.beta1);
    r.read("beta2", cfg.optim.beta2);
    r.read("eps", cfg.optim.eps);
    r.read("weight_decay", cfg.optim.weight_decay);
    r.finish();
  }
  if (const json* s = top.find("schedule")) {
    ObjectReader r(*s, "schedule");
    read_enum(r, "kind", cfg.schedule.kind, optim::parse_schedule_kind);
    r.read("k", cfg.schedule.k);
    switch (cfg.schedule.kind) {
      case optim::ScheduleKind::Vanilla: cfg.schedule.horizon = 0; break;
      case optim::ScheduleKind::Active: cfg.schedule.horizon = optim::kUnbounded; break;
      case optim::ScheduleKind::Temporary: break;
    }
    if (const json* n = r.find("N")) {
      cfg.schedule.horizon = horizon_from_json(*n);
    } else if (cfg.schedule.kind == optim::ScheduleKind::Temporary) {
      throw ConfigError("schedule.N is required for a temporary schedule");
    }
    r.finish();
  }
  top.read("steps", cfg.steps);
  top.read("batch_size", cfg.batch_size);
  top.read("eval_every", cfg.eval_every);
  top.read("eval_set_size", cfg.eval_set_size);
  top.read("unseen_count", cfg.unseen_count);
  read_enum(top, "unseen_dist", cfg.unseen_dist, grammar::parse_unseen_dist);
  read_enum(top, "unseen_rows", cfg.unseen_rows, parse_unseen_rows);
  top.read("seed", cfg.seed);
  top.read("checkpoint_every", cfg.checkpoint_every);
  top.read("eval_pool_pairs", cfg.eval_pool_pairs);
  top.read("eval_max_pair_probability", cfg.eval_max_pair_probability);
  top.finish();

  cfg.model.reserved_rows = cfg.unseen_rows == UnseenRows::Reserved ? cfg.unseen_count : 0;
  cfg.validate();
  return cfg;
}

json config_to_json(const ExperimentConfig& cfg) {
  json j;
  j["grammar"] = {{"v", cfg.grammar.v},
                  {"alpha", cfg.grammar.alpha},
                  {"epsilon", cfg.grammar.epsilon},
                  {"n_bins", cfg.grammar.n_bins},
                  {"seed", cfg.grammar.seed}};
  j["model"] = {{"n_layers", cfg.model.n_layers},     {"n_heads", cfg.model.n_heads},
                {"d_model", cfg.model.d_model},       {"d_ff", cfg.model.d_ff},
                {"max_len", cfg.model.max_len},       {"vocab_size", cfg.model.vocab_size},
                {"init_std", cfg.model.init_std},     {"ln_eps", cfg.model.ln_eps}};
  j["optim"] = {{"lr", cfg.optim.lr},
                {"beta1", cfg.optim.beta1},
                {"beta2", cfg.optim.beta2},
                {"eps", cfg.optim.eps},
                {"weight_decay", cfg.optim.weight_decay}};
  j["schedule"] = {{"kind", std::string(optim::to_string(cfg.schedule.kind))},
                   {"k", cfg.schedule.k},
                   {"N", horizon_to_json(cfg.schedule.horizon)}};
  j["steps"] = cfg.steps;
  j["batch_size"] = cfg.batch_size;
  j["eval_every"] = cfg.eval_every;
  j["eval_set_size"] = cfg.eval_set_size;
  j["unseen_count"] = cfg.unseen_count;
  j["unseen_dist"] = std::string(grammar::to_string(cfg.unseen_dist));
  j["unseen_rows"] = std::string(to_string(cfg.unseen_rows));
  j["seed"] = cfg.seed;
  j["checkpoint_every"] = cfg.checkpoint_every;
  j["eval_pool_pairs"] = cfg.eval_pool_pairs;
  j["eval_max_pair_probability"] = cfg.eval_max_pair_probability;
  return j;
}

ExperimentConfig load_config(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open config file " + path.string());
  json j;
  try {
    j = json::parse(in);
  } catch (const json::parse_error& e) {
    throw ConfigError("config file " + path.string() + " is not valid JSON: " + e.what());
  }
  return config_from_json(j);
}

}  // namespace forgetlab::trainer
