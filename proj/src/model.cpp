#include "forgetlab/model.hpp"

#include "forgetlab/errors.hpp"

#include <cmath>

namespace forgetlab::model {

using numerics::Tape;

void ModelConfig::validate() const {
  if (n_layers == 0) throw ConfigError("model.n_layers must be >= 1");
  if (n_heads != 1) throw ConfigError("model.n_heads: only single-head attention is implemented");
  if (d_model == 0 || d_model % n_heads != 0) throw ConfigError("model.d_model must be a positive multiple of n_heads");
  if (d_ff == 0) throw ConfigError("model.d_ff must be >= 1");
  if (max_len != grammar::kSequenceLength) throw ConfigError("model.max_len must be 7");
  if (vocab_size < 4) throw ConfigError("model.vocab_size must be >= 4");
  if (!(init_std > 0.0)) throw ConfigError("model.init_std must be > 0");
  if (!(ln_eps >= 0.0)) throw ConfigError("model.ln_eps must be >= 0");
}

std::vector<std::string> ModelParams::names() const {
  std::vector<std::string> out{"embedding", "position"};
  static constexpr const char* kLayer[] = {"wq", "wk",       "wv",       "wo", "ln1_gain", "ln1_bias",
                                           "w1", "b1",       "w2",       "b2", "ln2_gain", "ln2_bias"};
  for (std::size_t i = 0; i < layers.size(); ++i)
    for (const char* n : kLayer) out.push_back("layers." + std::to_string(i) + "." + n);
  return out;
}

bool ModelParams::operator==(const ModelParams& other) const {
  if (layers.size() != other.layers.size()) return false;
  std::vector<const Array*> mine, theirs;
  for_each([&](const Array& a) { mine.push_back(&a); });
  other.for_each([&](const Array& a) { theirs.push_back(&a); });
  for (std::size_t i = 0; i < mine.size(); ++i)
    if (!(*mine[i] == *theirs[i])) return false;
  return true;
}

ModelParams init_params(const ModelConfig& cfg, numerics::Rng& rng) {
  cfg.validate();
  const std::size_t d = cfg.d_model;
  ModelParams p;
  p.embedding = Array::matrix(cfg.embedding_rows(), d);
  p.position = Array::matrix(cfg.max_len, d);
  p.layers.resize(cfg.n_layers);
  for (auto& l : p.layers) {
    l.wq = Array::matrix(d, d);
    l.wk = Array::matrix(d, d);
    l.wv = Array::matrix(d, d);
    l.wo = Array::matrix(d, d);
    l.ln1_gain = Array({d}, 1.0);
    l.ln1_bias = Array({d}, 0.0);
    l.w1 = Array::matrix(d, cfg.d_ff);
    l.b1 = Array({cfg.d_ff}, 0.0);
    l.w2 = Array::matrix(cfg.d_ff, d);
    l.b2 = Array({d}, 0.0);
    l.ln2_gain = Array({d}, 1.0);
    l.ln2_bias = Array({d}, 0.0);
  }
  auto draw = [&](Array& a) {
    for (double& x : a.values()) x = rng.normal(0.0, cfg.init_std);
  };
  draw(p.embedding);
  draw(p.position);
  for (auto& l : p.layers)
    for (Array* a : {&l.wq, &l.wk, &l.wv, &l.wo, &l.w1, &l.w2}) draw(*a);
  return p;
}

Graph build_graph(Tape& tape, const ModelParams& params, const ModelConfig& cfg, std::span<const Tokens> sequences,
                  const Array* extra_rows, bool masked_only) {
  constexpr std::size_t T = grammar::kSequenceLength;
  if (params.embedding.cols() != cfg.d_model || params.embedding.rows() != cfg.embedding_rows() ||
      params.layers.size() != cfg.n_layers) {
    throw DimensionError("model parameters do not match the model config");
  }
  if (extra_rows && extra_rows->cols() != cfg.d_model) {
    throw DimensionError("extra rows have width " + std::to_string(extra_rows->cols()) + ", expected " +
                         std::to_string(cfg.d_model));
  }

  Graph g;
  params.for_each([&](const Array& a) { g.params.push_back(tape.parameter(a)); });
  const Tape::Var embedding = g.params[0];
  const Tape::Var position = g.params[1];

  Tape::Var table = embedding;
  if (extra_rows) table = tape.concat_rows(embedding, tape.constant(*extra_rows));

  std::vector<std::size_t> ids;
  ids.reserve(sequences.size() * T);
  for (const Tokens& seq : sequences)
    for (grammar::TokenId t : seq) ids.push_back(t);

  Tape::Var h = tape.add_tiled(tape.gather_rows(table, std::move(ids)), position);
  const double scale = 1.0 / std::sqrt(static_cast<double>(cfg.d_model / cfg.n_heads));
  const double eps = cfg.ln_eps;
  for (std::size_t i = 0; i < cfg.n_layers; ++i) {
    const Tape::Var* p = g.params.data() + 2 + 12 * i;
    // p: wq wk wv wo ln1_gain ln1_bias w1 b1 w2 b2 ln2_gain ln2_bias
    const Tape::Var q = tape.matmul(h, p[0]);
    const Tape::Var k = tape.matmul(h, p[1]);
    const Tape::Var v = tape.matmul(h, p[2]);
    const Tape::Var attn = tape.matmul(tape.block_attention(q, k, v, T, scale), p[3]);
    h = tape.layer_norm(tape.add(h, attn), p[4], p[5], eps);
    const Tape::Var hidden = tape.gelu(tape.add_bias(tape.matmul(h, p[6]), p[7]));
    const Tape::Var ff = tape.add_bias(tape.matmul(hidden, p[8]), p[9]);
    h = tape.layer_norm(tape.add(h, ff), p[10], p[11], eps);
  }

  if (masked_only) {
    std::vector<std::size_t> rows;
    rows.reserve(sequences.size() * grammar::kPatternLength);
    for (std::size_t b = 0; b < sequences.size(); ++b)
      for (std::size_t pos : grammar::kMaskPositions) rows.push_back(b * T + pos);
    h = tape.gather_rows(h, std::move(rows));
  }
  g.logits = tape.matmul_nt(h, table);
  return g;
}

Array forward(const ModelParams& params, const ModelConfig& cfg, const Tokens& tokens, const Array* extra_rows) {
  Tape tape;
  const Graph g = build_graph(tape, params, cfg, std::span<const Tokens>(&tokens, 1), extra_rows, false);
  return tape.value(g.logits);
}

Array masked_logits(const ModelParams& params, const ModelConfig& cfg, std::span<const Tokens> sequences,
                    const Array* extra_rows) {
  Tape tape;
  const Graph g = build_graph(tape, params, cfg, sequences, extra_rows, true);
  return tape.value(g.logits);
}

namespace {

double log_softmax_at(const Array& logits, std::size_t row, std::size_t col) {
  if (row >= logits.rows()) throw IndexError("logit row " + std::to_string(row) + " out of range");
  if (col >= logits.cols()) throw IndexError("token id " + std::to_string(col) + " out of range");
  const auto r = logits.mat().row(static_cast<Eigen::Index>(row));
  const double mx = r.maxCoeff();
  return logits(row, col) - mx - std::log((r.array() - mx).exp().sum());
}

}  // namespace

double pattern_loglik(const Array& logits, const Triple& triple, std::span<const std::size_t> positions) {
  if (positions.size() != triple.size()) throw DimensionError("pattern_loglik: positions/triple size mismatch");
  double s = 0.0;
  for (std::size_t i = 0; i < triple.size(); ++i) s += log_softmax_at(logits, positions[i], triple[i]);
  return s;
}

double mlm_loss(const Array& logits, const Triple& targets, std::span<const std::size_t> positions) {
  return -pattern_loglik(logits, targets, positions) / static_cast<double>(targets.size());
}

Triple predict(const Array& logits, std::span<const std::size_t> positions) {
  if (positions.size() != grammar::kPatternLength) throw DimensionError("predict: need 3 positions");
  Triple out{};
  for (std::size_t i = 0; i < positions.size(); ++i) {
    if (positions[i] >= logits.rows()) throw IndexError("predict: row out of range");
    const auto row = logits.row(positions[i]);
    std::size_t best = 0;
    for (std::size_t j = 1; j < row.size(); ++j)
      if (row[j] > row[best]) best = j;
    out[i] = static_cast<grammar::TokenId>(best);
  }
  return out;
}

LossAndGrad loss_and_grad(const ModelParams& params, const ModelConfig& cfg, std::span<const grammar::Example> batch) {
  if (batch.empty()) throw ContractError("loss_and_grad: empty batch");
  std::vector<Tokens> seqs;
  std::vector<std::size_t> targets;
  seqs.reserve(batch.size());
  targets.reserve(batch.size() * grammar::kPatternLength);
  for (const auto& ex : batch) {
    seqs.push_back(ex.tokens);
    for (grammar::TokenId t : ex.targets) targets.push_back(t);
  }
  Tape tape;
  const Graph g = build_graph(tape, params, cfg, seqs, nullptr, true);
  const Tape::Var loss = tape.cross_entropy(g.logits, std::move(targets));
  tape.backward(loss);
  LossAndGrad out;
  out.loss = tape.value(loss).item();
  out.grads.reserve(g.params.size());
  for (Tape::Var p : g.params) out.grads.push_back(tape.grad(p));
  return out;
}

}  // namespace forgetlab::model
