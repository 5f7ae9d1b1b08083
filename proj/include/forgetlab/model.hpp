#pragma once

#include "forgetlab/array.hpp"
#include "forgetlab/grammar.hpp"
#include "forgetlab/rng.hpp"
#include "forgetlab/tape.hpp"

#include <cstddef>
#include <span>
#include <string>
#include <vector>

namespace forgetlab::model {

using numerics::Array;
using grammar::Tokens;
using grammar::Triple;

struct ModelConfig {
  std::size_t n_layers = 6;
  std::size_t n_heads = 1;
  std::size_t d_model = 64;
  std::size_t d_ff = 128;
  std::size_t max_len = grammar::kSequenceLength;
  std::size_t vocab_size = 1002;
  /// Embedding rows after the vocabulary that no training sentence uses.
  /// They take part in the output softmax like any other row.
  std::size_t reserved_rows = 0;
  double init_std = grammar::kInitStd;
  double ln_eps = 1e-12;

  std::size_t embedding_rows() const noexcept { return vocab_size + reserved_rows; }
  void validate() const;
};

struct LayerParams {
  Array wq, wk, wv, wo;
  Array ln1_gain, ln1_bias;
  Array w1, b1, w2, b2;
  Array ln2_gain, ln2_bias;
};

/// Token embedding (also the output projection), positional embedding and
/// per-layer weights. There is no separate unembedding matrix.
struct ModelParams {
  Array embedding;
  Array position;
  std::vector<LayerParams> layers;

  /// Visits every parameter array in canonical order: embedding, position,
  /// then per layer wq wk wv wo ln1_gain ln1_bias w1 b1 w2 b2 ln2_gain ln2_bias.
  template <class F>
  void for_each(F&& f) {
    visit(*this, f);
  }
  template <class F>
  void for_each(F&& f) const {
    visit(*this, f);
  }

  std::size_t group_count() const noexcept { return 2 + 12 * layers.size(); }
  std::vector<std::string> names() const;
  bool operator==(const ModelParams& other) const;

 private:
  template <class Self, class F>
  static void visit(Self& self, F& f) {
    f(self.embedding);
    f(self.position);
    for (auto& l : self.layers) {
      for (auto* a : {&l.wq, &l.wk, &l.wv, &l.wo, &l.ln1_gain, &l.ln1_bias, &l.w1, &l.b1, &l.w2, &l.b2,
                      &l.ln2_gain, &l.ln2_bias})
        f(*a);
    }
  }
};

/// Weight matrices, embedding and positions ~ Normal(0, init_std^2) drawn in
/// canonical order; LayerNorm gains 1; biases 0.
ModelParams init_params(const ModelConfig& cfg, numerics::Rng& rng);

/// Nodes of one recorded forward pass.
struct Graph {
  numerics::Tape::Var logits;
  std::vector<numerics::Tape::Var> params;  ///< canonical order
};

/// Records a batched forward pass. With `masked_only` the logits hold the
/// three masked positions of each sequence ((B*3) x V'), otherwise every
/// position ((B*7) x V'). V' = vocab_size + rows of `extra_rows`.
Graph build_graph(numerics::Tape& tape, const ModelParams& params, const ModelConfig& cfg,
                  std::span<const Tokens> sequences, const Array* extra_rows, bool masked_only);

/// Logits of one sequence, 7 x (vocab_size + m) for m extra rows.
Array forward(const ModelParams& params, const ModelConfig& cfg, const Tokens& tokens,
              const Array* extra_rows = nullptr);

/// Masked-position logits for a batch, (B*3) x (vocab_size + m).
Array masked_logits(const ModelParams& params, const ModelConfig& cfg, std::span<const Tokens> sequences,
                    const Array* extra_rows = nullptr);

/// Mean cross-entropy over the masked positions.
double mlm_loss(const Array& logits, const Triple& targets,
                std::span<const std::size_t> positions = grammar::kMaskPositions);

/// Sum over the masked positions of log softmax(logits[pos])[triple[i]].
double pattern_loglik(const Array& logits, const Triple& triple,
                      std::span<const std::size_t> positions = grammar::kMaskPositions);

/// Per-position argmax, ties to the lower id.
Triple predict(const Array& logits, std::span<const std::size_t> positions = grammar::kMaskPositions);

/// Row offsets of one example inside a masked-logit block.
inline constexpr std::array<std::size_t, 3> kMaskedRows{0, 1, 2};

struct LossAndGrad {
  double loss = 0.0;
  std::vector<Array> grads;  ///< canonical order
};

/// Batch-mean masked LM loss and its gradient with respect to every parameter.
LossAndGrad loss_and_grad(const ModelParams& params, const ModelConfig& cfg,
                          std::span<const grammar::Example> batch);

}  // namespace forgetlab::model
