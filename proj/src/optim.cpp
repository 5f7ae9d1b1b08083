#include "forgetlab/optim.hpp"

#include "forgetlab/errors.hpp"

#include <cmath>
#include <string>

namespace forgetlab::optim {

void AdamWConfig::validate() const {
  if (!(lr > 0.0)) throw ConfigError("optim.lr must be > 0");
  if (!(beta1 >= 0.0 && beta1 < 1.0)) throw ConfigError("optim.beta1 must lie in [0, 1)");
  if (!(beta2 >= 0.0 && beta2 < 1.0)) throw ConfigError("optim.beta2 must lie in [0, 1)");
  if (!(eps > 0.0)) throw ConfigError("optim.eps must be > 0");
  if (!(weight_decay >= 0.0)) throw ConfigError("optim.weight_decay must be >= 0");
}

OptState OptState::zeros_like(std::span<const Array> params) {
  OptState s;
  for (const Array& p : params) {
    s.m.emplace_back(p.shape(), 0.0);
    s.v.emplace_back(p.shape(), 0.0);
  }
  return s;
}

OptState OptState::zeros_like(const model::ModelParams& params) {
  OptState s;
  params.for_each([&](const Array& p) {
    s.m.emplace_back(p.shape(), 0.0);
    s.v.emplace_back(p.shape(), 0.0);
  });
  return s;
}

void adamw_step(std::span<Array* const> params, std::span<const Array> grads, OptState& state,
                const AdamWConfig& cfg) {
  if (params.size() != grads.size() || params.size() != state.m.size() || params.size() != state.v.size()) {
    throw DimensionError("adamw_step: " + std::to_string(params.size()) + " parameter groups, " +
                         std::to_string(grads.size()) + " gradients, " + std::to_string(state.m.size()) + " moments");
  }
  for (std::size_t i = 0; i < params.size(); ++i) {
    if (grads[i].shape() != params[i]->shape() || state.m[i].shape() != params[i]->shape()) {
      throw DimensionError("adamw_step: shape mismatch in group " + std::to_string(i));
    }
    if (!grads[i].all_finite()) {
      throw NumericError("adamw_step: non-finite gradient in parameter group " + std::to_string(i) +
                         " at step " + std::to_string(state.t + 1));
    }
  }
  state.t += 1;
  const double t = static_cast<double>(state.t);
  const double c1 = 1.0 - std::pow(cfg.beta1, t);
  const double c2 = 1.0 - std::pow(cfg.beta2, t);
  for (std::size_t i = 0; i < params.size(); ++i) {
    double* theta = params[i]->data();
    const double* g = grads[i].data();
    double* m = state.m[i].data();
    double* v = state.v[i].data();
    const std::size_t n = params[i]->size();
    for (std::size_t j = 0; j < n; ++j) {
      m[j] = cfg.beta1 * m[j] + (1.0 - cfg.beta1) * g[j];
      v[j] = cfg.beta2 * v[j] + (1.0 - cfg.beta2) * g[j] * g[j];
      const double m_hat = m[j] / c1;
      const double v_hat = v[j] / c2;
      theta[j] -= cfg.lr * (m_hat / (std::sqrt(v_hat) + cfg.eps) + cfg.weight_decay * theta[j]);
    }
  }
}

void adamw_step(model::ModelParams& params, std::span<const Array> grads, OptState& state, const AdamWConfig& cfg) {
  std::vector<Array*> ptrs;
  params.for_each([&](Array& a) { ptrs.push_back(&a); });
  adamw_step(ptrs, grads, state, cfg);
}

std::string_view to_string(ScheduleKind k) noexcept {
  switch (k) {
    case ScheduleKind::Vanilla: return "vanilla";
    case ScheduleKind::Active: return "active";
    case ScheduleKind::Temporary: return "temporary";
  }
  return "?";
}

ScheduleKind parse_schedule_kind(std::string_view name) {
  for (ScheduleKind k : {ScheduleKind::Vanilla, ScheduleKind::Active, ScheduleKind::Temporary})
    if (to_string(k) == name) return k;
  throw ConfigError("unknown schedule kind '" + std::string(name) + "'");
}

void ForgettingSchedule::validate() const {
  if (k < 1) throw ConfigError("schedule.k must be >= 1");
  switch (kind) {
    case ScheduleKind::Vanilla:
      if (horizon != 0) throw ConfigError("schedule: vanilla training requires N = 0");
      break;
    case ScheduleKind::Active:
      if (horizon != kUnbounded) throw ConfigError("schedule: active forgetting requires N = unbounded");
      break;
    case ScheduleKind::Temporary:
      if (horizon == kUnbounded) throw ConfigError("schedule: temporary forgetting requires a finite N");
      break;
  }
}

bool should_reset(std::uint64_t step, const ForgettingSchedule& sched) noexcept {
  return step > 0 && sched.k > 0 && step % sched.k == 0 && step <= sched.horizon;
}

void reset_embeddings(model::ModelParams& params, OptState& state, numerics::Rng& rng, double init_std) {
  for (double& x : params.embedding.values()) x = rng.normal(0.0, init_std);
  if (!state.m.empty()) state.m[0].fill(0.0);
  if (!state.v.empty()) state.v[0].fill(0.0);
}

}  // namespace forgetlab::optim
