#include "forgetlab/errors.hpp"
#include "forgetlab/trainer.hpp"

#include <cstdio>
#include <fstream>

namespace forgetlab::trainer {

using json = nlohmann::ordered_json;

namespace {

constexpr const char* kAxes[] = {"alpha", "epsilon", "v", "k", "N", "weight_decay", "seed"};

std::size_t axis_size(const SweepGrid& g, std::size_t axis) {
  switch (axis) {
    case 0: return g.alpha.size();
    case 1: return g.epsilon.size();
    case 2: return g.v.size();
    case 3: return g.k.size();
    case 4: return g.N.size();
    case 5: return g.weight_decay.size();
    default: return g.seed.size();
  }
}

template <class T>
std::vector<T> read_axis(const json& j, const std::string& name) {
  if (!j.is_array() || j.empty()) throw ConfigError("sweep axis \"" + name + "\" must be a non-empty array");
  std::vector<T> out;
  for (const auto& x : j) {
    if constexpr (std::is_unsigned_v<T>) {
      if (!x.is_number_unsigned()) throw ConfigError("sweep axis \"" + name + "\" takes non-negative integers");
    } else {
      if (!x.is_number()) throw ConfigError("sweep axis \"" + name + "\" takes numbers");
    }
    out.push_back(x.get<T>());
  }
  return out;
}

void write_manifest(const std::filesystem::path& root, const std::vector<SweepCell>& cells) {
  json m = json::array();
  for (const auto& c : cells) m.push_back({{"params", c.params}, {"directory", c.directory}, {"status", c.status}});
  const std::filesystem::path path = root / "manifest.json";
  std::filesystem::path tmp = path;
  tmp += ".tmp";
  {
    std::ofstream out(tmp, std::ios::trunc);
    if (!out) throw Error("cannot write " + tmp.string());
    out << m.dump(2) << '\n';
  }
  std::filesystem::rename(tmp, path);
}

}  // namespace

std::size_t SweepGrid::cell_count() const noexcept {
  std::size_t n = 1;
  bool any = false;
  for (std::size_t a = 0; a < std::size(kAxes); ++a) {
    if (const std::size_t s = axis_size(*this, a)) {
      n *= s;
      any = true;
    }
  }
  return any ? n : 0;
}

SweepGrid grid_from_json(const json& j) {
  if (!j.is_object()) throw ConfigError("sweep grid must be a JSON object of axis lists");
  SweepGrid g;
  for (const auto& [key, value] : j.items()) {
    if (key == "alpha") g.alpha = read_axis<double>(value, key);
    else if (key == "epsilon") g.epsilon = read_axis<double>(value, key);
    else if (key == "v") g.v = read_axis<std::size_t>(value, key);
    else if (key == "k") g.k = read_axis<std::uint64_t>(value, key);
    else if (key == "weight_decay") g.weight_decay = read_axis<double>(value, key);
    else if (key == "seed") g.seed = read_axis<std::uint64_t>(value, key);
    else if (key == "N") {
      if (!value.is_array() || value.empty()) throw ConfigError("sweep axis \"N\" must be a non-empty array");
      for (const auto& x : value) g.N.push_back(horizon_from_json(x));
    } else {
      throw ConfigError("unknown sweep axis \"" + key + "\"");
    }
  }
  if (g.cell_count() == 0) throw ConfigError("sweep grid has no axes");
  return g;
}

ExperimentConfig cell_config(const ExperimentConfig& base, const SweepGrid& grid, std::size_t index,
                             json* params) {
  if (index >= grid.cell_count()) throw IndexError("sweep cell " + std::to_string(index) + " out of range");
  std::size_t pick[std::size(kAxes)] = {};
  std::size_t rest = index;
  for (std::size_t a = std::size(kAxes); a-- > 0;) {
    if (const std::size_t s = axis_size(grid, a)) {
      pick[a] = rest % s;
      rest /= s;
    }
  }

  ExperimentConfig cfg = base;
  json p = json::object();
  if (!grid.alpha.empty()) p["alpha"] = cfg.grammar.alpha = grid.alpha[pick[0]];
  if (!grid.epsilon.empty()) p["epsilon"] = cfg.grammar.epsilon = grid.epsilon[pick[1]];
  if (!grid.v.empty()) {
    p["v"] = cfg.grammar.v = grid.v[pick[2]];
    cfg.model.vocab_size = cfg.grammar.v + 2;
  }
  if (!grid.k.empty()) p["k"] = cfg.schedule.k = grid.k[pick[3]];
  if (!grid.N.empty()) {
    const std::uint64_t n = grid.N[pick[4]];
    p["N"] = horizon_to_json(n);
    cfg.schedule.horizon = n;
    cfg.schedule.kind = n == 0                  ? optim::ScheduleKind::Vanilla
                        : n == optim::kUnbounded ? optim::ScheduleKind::Active
                                                 : optim::ScheduleKind::Temporary;
  }
  if (!grid.weight_decay.empty()) p["weight_decay"] = cfg.optim.weight_decay = grid.weight_decay[pick[5]];
  if (!grid.seed.empty()) {
    p["seed"] = cfg.seed = grid.seed[pick[6]];
    cfg.grammar.seed = cfg.seed;
  }
  if (params) *params = std::move(p);
  return cfg;
}

std::vector<SweepCell> run_sweep(const ExperimentConfig& base, const SweepGrid& grid,
                                 const std::filesystem::path& out_root, const RunOptions& opts) {
  const std::size_t n = grid.cell_count();
  if (n == 0) throw ConfigError("sweep grid has no axes");
  std::filesystem::create_directories(out_root);

  std::vector<SweepCell> cells;
  for (std::size_t i = 0; i < n; ++i) {
    SweepCell cell;
    char dir[32];
    std::snprintf(dir, sizeof dir, "cell_%03zu", i);
    cell.directory = dir;
    try {
      const ExperimentConfig cfg = cell_config(base, grid, i, &cell.params);
      cfg.validate();
      if (opts.log) *opts.log << "[" << dir << "] " << cell.params.dump() << std::endl;
      RunOptions run;
      run.log = opts.log;
      run_experiment(cfg, out_root / cell.directory, run);
      cell.status = "ok";
    } catch (const std::exception& e) {
      cell.status = std::string("error: ") + e.what();
    }
    cells.push_back(std::move(cell));
    write_manifest(out_root, cells);
  }
  return cells;
}

}  // namespace forgetlab::trainer
