#pragma once

#include "forgetlab/array.hpp"
#include "forgetlab/model.hpp"
#include "forgetlab/rng.hpp"

#include <cstdint>
#include <limits>
#include <span>
#include <string_view>
#include <vector>

namespace forgetlab::optim {

using numerics::Array;

struct AdamWConfig {
  double lr = 5e-5;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 0.01;

  void validate() const;
};

/// Adam moments, one pair per parameter group, plus the step counter.
struct OptState {
  std::vector<Array> m;
  std::vector<Array> v;
  std::uint64_t t = 0;

  static OptState zeros_like(std::span<const Array> params);
  static OptState zeros_like(const model::ModelParams& params);
  bool operator==(const OptState&) const = default;
};

/// One decoupled-weight-decay Adam update:
///   m <- b1 m + (1-b1) g,  v <- b2 v + (1-b2) g^2,  t <- t+1
///   theta <- theta - lr (m_hat / (sqrt(v_hat) + eps) + wd theta)
/// Throws NumericError, leaving everything untouched, if any gradient is
/// not finite.
void adamw_step(std::span<Array* const> params, std::span<const Array> grads, OptState& state,
                const AdamWConfig& cfg);
void adamw_step(model::ModelParams& params, std::span<const Array> grads, OptState& state, const AdamWConfig& cfg);

enum class ScheduleKind { Vanilla, Active, Temporary };

std::string_view to_string(ScheduleKind k) noexcept;
ScheduleKind parse_schedule_kind(std::string_view name);

/// Horizon value standing for "forget for the whole run".
inline constexpr std::uint64_t kUnbounded = std::numeric_limits<std::uint64_t>::max();

struct ForgettingSchedule {
  ScheduleKind kind = ScheduleKind::Vanilla;
  std::uint64_t k = 1000;  ///< reset period in steps
  std::uint64_t horizon = 0;  ///< last step at which a reset may fire

  static ForgettingSchedule vanilla() { return {ScheduleKind::Vanilla, 1000, 0}; }
  static ForgettingSchedule active(std::uint64_t k = 1000) { return {ScheduleKind::Active, k, kUnbounded}; }
  static ForgettingSchedule temporary(std::uint64_t k, std::uint64_t horizon) {
    return {ScheduleKind::Temporary, k, horizon};
  }

  /// k >= 1; vanilla has horizon 0, active is unbounded, temporary is finite.
  void validate() const;
  bool operator==(const ForgettingSchedule&) const = default;
};

/// True iff step > 0, step is a multiple of k and step <= horizon.
bool should_reset(std::uint64_t step, const ForgettingSchedule& sched) noexcept;

/// Redraws the token embedding from Normal(0, init_std^2) and zeroes its
/// Adam moments. Positions, other weights and their moments are untouched.
void reset_embeddings(model::ModelParams& params, OptState& state, numerics::Rng& rng,
                      double init_std = grammar::kInitStd);

}  // namespace forgetlab::optim
