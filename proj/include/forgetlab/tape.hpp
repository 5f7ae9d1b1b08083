#pragma once

#include "forgetlab/array.hpp"

#include <cstddef>
#include <deque>
#include <functional>
#include <span>
#include <vector>

namespace forgetlab::numerics {

/// Reverse-mode differentiation tape over whole-array operations.
///
/// Each operation evaluates eagerly and, when any input requires a gradient,
/// records a closure that pushes the output adjoint back to its inputs.
/// `backward` replays those closures in exact reverse recording order.
/// A tape is single-use: build it, call `backward` once, read the adjoints.
class Tape {
 public:
  struct Var {
    std::size_t id = 0;
  };

  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  /// Input that never receives an adjoint.
  Var constant(Array value);
  /// Owned leaf that receives an adjoint.
  Var variable(Array value);
  /// Borrowed leaf that receives an adjoint. `value` must outlive the tape
  /// and stay unchanged until `backward` returns.
  Var parameter(const Array& value);

  const Array& value(Var v) const;
  /// Adjoint of `v` after `backward`. Throws ContractError for constants.
  const Array& grad(Var v) const;
  bool requires_grad(Var v) const;
  std::size_t size() const noexcept { return nodes_.size(); }

  Var matmul(Var a, Var b);
  /// a · bᵀ
  Var matmul_nt(Var a, Var b);
  Var add(Var a, Var b);
  /// x[r×n] + bias[n] broadcast over rows.
  Var add_bias(Var x, Var bias);
  /// x[(B·T)×n] + tile[T×n] repeated over consecutive blocks of T rows.
  Var add_tiled(Var x, Var tile);
  /// Elementwise product.
  Var mul(Var a, Var b);
  Var scale(Var x, double factor);
  Var sum(Var x);
  Var gelu(Var x);
  /// Row-wise softmax over the last axis.
  Var softmax(Var x);
  Var layer_norm(Var x, Var gamma, Var beta, double eps);
  /// Single-head scaled dot-product attention applied independently to each
  /// consecutive block of `block` rows (one block per sequence).
  Var block_attention(Var q, Var k, Var v, std::size_t block, double scale);
  /// Rows `ids` of `table`; adjoints scatter-add back into the table.
  Var gather_rows(Var table, std::vector<std::size_t> ids);
  /// Vertical concatenation.
  Var concat_rows(Var top, Var bottom);
  /// Mean over rows of -log softmax(logits[r])[targets[r]].
  Var cross_entropy(Var logits, std::vector<std::size_t> targets);

  /// Seeds d(loss)/d(loss) = 1 and replays all recorded adjoint rules.
  void backward(Var loss);

  /// Softmax probabilities of the most recent `block_attention` call, one
  /// row per query position. Empty when no attention was recorded.
  const Array& last_attention() const noexcept { return last_attention_; }

 private:
  struct Node {
    Array owned;
    const Array* borrowed = nullptr;
    Array grad;
    bool requires_grad = false;
    std::function<void()> backprop;
    const Array& value() const { return borrowed ? *borrowed : owned; }
  };

  Var push(Array value, bool requires_grad);
  Node& node(Var v);
  const Node& node(Var v) const;
  Array& adjoint(Var v);
  bool any_grad(std::initializer_list<Var> vars) const;

  std::deque<Node> nodes_;
  Array last_attention_;
  bool backward_done_ = false;
};

}  // namespace forgetlab::numerics
