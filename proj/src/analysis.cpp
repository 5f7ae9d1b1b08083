#include "forgetlab/analysis.hpp"

#include "forgetlab/errors.hpp"
#include "forgetlab/grammar.hpp"

#include <Eigen/Eigenvalues>

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>

namespace forgetlab::analysis {

using numerics::Rng;

PcaResult pca(const Array& data, std::size_t n_components) {
  const std::size_t n = data.rows();
  const std::size_t d = data.cols();
  if (data.rank() != 2 || n < 2) throw DomainError("pca needs at least two rows of data");
  if (n_components == 0 || n_components > std::min(n, d)) {
    throw DomainError("pca: n_components must be in [1, " + std::to_string(std::min(n, d)) + "], got " +
                      std::to_string(n_components));
  }
  numerics::require_finite(data, "pca input");

  const Eigen::RowVectorXd mu = data.mat().colwise().mean();
  const Eigen::MatrixXd x = data.mat().rowwise() - mu;
  const Eigen::MatrixXd cov = (x.transpose() * x) / static_cast<double>(n - 1);
  const Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> eig(cov);
  if (eig.info() != Eigen::Success) throw NumericError("pca: eigendecomposition failed");

  const Eigen::VectorXd values = eig.eigenvalues().cwiseMax(0.0);
  const double total = values.sum();

  PcaResult out;
  out.mean = Array({d});
  for (std::size_t j = 0; j < d; ++j) out.mean[j] = mu(static_cast<Eigen::Index>(j));
  out.components = Array::matrix(n_components, d);
  for (std::size_t c = 0; c < n_components; ++c) {
    // eigenvalues ascend; take from the top
    const auto col = static_cast<Eigen::Index>(d - 1 - c);
    Eigen::VectorXd u = eig.eigenvectors().col(col);
    Eigen::Index big = 0;
    u.cwiseAbs().maxCoeff(&big);
    if (u(big) < 0) u = -u;
    for (std::size_t j = 0; j < d; ++j) out.components(c, j) = u(static_cast<Eigen::Index>(j));
    out.explained_variance_ratio.push_back(total > 0.0 ? values(col) / total : 0.0);
  }
  out.projections = Array::matrix(n, n_components);
  out.projections.mat() = x * out.components.mat().transpose();
  return out;
}

namespace {

double sigmoid(double z) { return z >= 0 ? 1.0 / (1.0 + std::exp(-z)) : std::exp(z) / (1.0 + std::exp(z)); }

double accuracy(const Eigen::MatrixXd& x, const Eigen::VectorXd& y, const Eigen::VectorXd& w, double b) {
  if (x.rows() == 0) return 0.0;
  const Eigen::VectorXd z = (x * w).array() + b;
  std::size_t hits = 0;
  for (Eigen::Index i = 0; i < z.size(); ++i) hits += (z(i) > 0.0) == (y(i) > 0.5);
  return static_cast<double>(hits) / static_cast<double>(z.size());
}

}  // namespace

ProbeResult train_probe(const Array& embeddings, std::span<const int> labels, Rng& rng, const ProbeOptions& opts,
                        std::string stratum) {
  const std::size_t n = embeddings.rows();
  const std::size_t d = embeddings.cols();
  if (labels.size() != n) throw DimensionError("train_probe: " + std::to_string(labels.size()) + " labels for " +
                                               std::to_string(n) + " rows");
  if (!(opts.split > 0.0 && opts.split <= 1.0)) throw DomainError("train_probe: split must be in (0, 1]");
  for (int l : labels)
    if (l != 0 && l != 1) throw DomainError("train_probe: labels must be 0 or 1");

  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), std::size_t{0});
  for (std::size_t i = n; i > 1; --i) std::swap(order[i - 1], order[rng.below(i)]);
  const auto n_train = static_cast<std::size_t>(std::floor(opts.split * static_cast<double>(n)));

  Eigen::MatrixXd xtr(n_train, d), xte(n - n_train, d);
  Eigen::VectorXd ytr(n_train), yte(n - n_train);
  const auto src = embeddings.mat();
  for (std::size_t i = 0; i < n; ++i) {
    const auto r = static_cast<Eigen::Index>(order[i]);
    if (i < n_train) {
      xtr.row(static_cast<Eigen::Index>(i)) = src.row(r);
      ytr(static_cast<Eigen::Index>(i)) = labels[order[i]];
    } else {
      xte.row(static_cast<Eigen::Index>(i - n_train)) = src.row(r);
      yte(static_cast<Eigen::Index>(i - n_train)) = labels[order[i]];
    }
  }
  const double positives = ytr.sum();
  if (n_train == 0 || positives == 0.0 || positives == static_cast<double>(n_train)) {
    throw DomainError("train_probe: the training split must contain both classes");
  }

  const Eigen::RowVectorXd mu = xtr.colwise().mean();
  Eigen::RowVectorXd sd = ((xtr.rowwise() - mu).array().square().colwise().sum() / static_cast<double>(n_train)).sqrt();
  for (Eigen::Index j = 0; j < sd.size(); ++j)
    if (!(sd(j) > 0.0)) sd(j) = 1.0;
  xtr = (xtr.rowwise() - mu).array().rowwise() / sd.array();
  xte = (xte.rowwise() - mu).array().rowwise() / sd.array();

  Eigen::VectorXd w = Eigen::VectorXd::Zero(static_cast<Eigen::Index>(d));
  double b = 0.0;
  const double inv_n = 1.0 / static_cast<double>(n_train);
  for (std::size_t it = 0; it < opts.iterations; ++it) {
    Eigen::VectorXd r = (xtr * w).array() + b;
    for (Eigen::Index i = 0; i < r.size(); ++i) r(i) = sigmoid(r(i)) - ytr(i);
    w -= opts.step * inv_n * (xtr.transpose() * r);
    b -= opts.step * inv_n * r.sum();
  }

  ProbeResult out;
  out.train_acc = accuracy(xtr, ytr, w, b);
  out.heldout_acc = accuracy(xte, yte, w, b);
  out.dim = d;
  out.stratum = std::move(stratum);
  out.n_train = n_train;
  out.n_heldout = n - n_train;
  return out;
}

const ProbeResult& EmbeddingReport::probe(const std::string& stratum) const {
  for (const auto& p : probes)
    if (p.stratum == stratum) return p;
  throw IndexError("no probe for stratum " + stratum);
}

EmbeddingReport embedding_report(const trainer::Checkpoint& ck) {
  const auto& cfg = ck.config;
  const grammar::Lexicon lex(cfg.grammar);
  const Array& emb = ck.params.embedding;
  const std::size_t d = emb.cols();
  const Rng root = Rng(cfg.seed).split("analysis");

  EmbeddingReport report;
  std::vector<const double*> rows;
  auto add_rank = [&](std::size_t rank, const char* stratum) {
    const char* pos = lex.ambiguous(rank) ? "ambiguous" : nullptr;
    for (grammar::TokenId id : {lex.noun_id(rank), lex.adj_id(rank)}) {
      report.tokens.push_back({id, stratum, pos ? pos : (lex.is_noun(id) ? "noun" : "adj")});
      rows.push_back(emb.row(id).data());
    }
  };
  for (std::size_t r = 1; r <= lex.half(); ++r)
    if (lex.in_head(r)) add_rank(r, "head");
  for (std::size_t r = 1; r <= lex.half(); ++r)
    if (lex.in_tail(r)) add_rank(r, "tail");

  Array unseen;
  if (cfg.unseen_rows == trainer::UnseenRows::Fresh) {
    Rng unseen_rng = root.split("unseen");
    unseen = grammar::sample_unseen_rows(cfg.unseen_dist, cfg.unseen_count, d, unseen_rng, cfg.model.init_std);
  }
  for (std::size_t i = 0; i < cfg.unseen_count; ++i) {
    report.tokens.push_back({lex.vocab_size() + i, "unseen", "none"});
    rows.push_back(unseen.size() ? unseen.row(i).data() : emb.row(lex.vocab_size() + i).data());
  }

  Array joint = Array::matrix(rows.size(), d);
  for (std::size_t i = 0; i < rows.size(); ++i) std::copy_n(rows[i], d, joint.row(i).data());
  const PcaResult p = pca(joint, std::min<std::size_t>(2, std::min(joint.rows(), d)));
  for (std::size_t i = 0; i < report.tokens.size(); ++i) {
    report.tokens[i].pc1 = p.projections(i, 0);
    report.tokens[i].pc2 = p.projections.cols() > 1 ? p.projections(i, 1) : 0.0;
  }
  report.explained_variance_ratio = p.explained_variance_ratio;

  auto probe = [&](const char* stratum, auto keep) {
    std::vector<int> labels;
    std::vector<std::size_t> ids;
    for (std::size_t r = 1; r <= lex.half(); ++r) {
      if (lex.ambiguous(r) || !keep(r)) continue;
      ids.push_back(lex.noun_id(r));
      labels.push_back(0);
      ids.push_back(lex.adj_id(r));
      labels.push_back(1);
    }
    Array x = Array::matrix(ids.size(), d);
    for (std::size_t i = 0; i < ids.size(); ++i) std::copy_n(emb.row(ids[i]).data(), d, x.row(i).data());
    Rng rng = root.split(std::string("probe.") + stratum);
    report.probes.push_back(train_probe(x, labels, rng, {}, stratum));
  };
  probe("all", [](std::size_t) { return true; });
  probe("head", [&](std::size_t r) { return lex.in_head(r); });
  probe("tail", [&](std::size_t r) { return lex.in_tail(r); });
  return report;
}

EmbeddingReport write_embedding_report(const trainer::Checkpoint& ck, const std::filesystem::path& out_dir) {
  EmbeddingReport report = embedding_report(ck);
  std::filesystem::create_directories(out_dir);
  auto open = [&](const std::string& name) {
    std::ofstream out(out_dir / name, std::ios::trunc);
    if (!out) throw Error("cannot write " + (out_dir / name).string());
    out.precision(17);
    return out;
  };
  for (const char* stratum : {"head", "tail", "unseen"}) {
    std::ofstream out = open(std::string("pca_") + stratum + ".csv");
    out << "token_id,stratum,pos_label,pc1,pc2\n";
    for (const auto& t : report.tokens)
      if (t.stratum == stratum) out << t.token_id << ',' << t.stratum << ',' << t.pos_label << ',' << t.pc1 << ','
                                    << t.pc2 << '\n';
  }
  std::ofstream out = open("probe_results.csv");
  out << "stratum,train_acc,heldout_acc,dim,n_train,n_heldout\n";
  for (const auto& p : report.probes)
    out << p.stratum << ',' << p.train_acc << ',' << p.heldout_acc << ',' << p.dim << ',' << p.n_train << ','
        << p.n_heldout << '\n';
  return report;
}

}  // namespace forgetlab::analysis
