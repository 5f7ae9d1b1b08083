#pragma once

#include "forgetlab/array.hpp"
#include "forgetlab/rng.hpp"
#include "forgetlab/trainer.hpp"

#include <cstddef>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

namespace forgetlab::analysis {

using numerics::Array;

struct PcaResult {
  Array components;  ///< n_components x d, orthonormal rows
  std::vector<double> explained_variance_ratio;
  Array projections;  ///< n x n_components, coordinates of the centered rows
  Array mean;         ///< d
};

/// Principal components of the rows of `data` from the eigendecomposition of
/// the sample covariance. Each component is signed so that its
/// largest-magnitude coordinate is positive. With zero total variance every
/// ratio is 0.
PcaResult pca(const Array& data, std::size_t n_components);

struct ProbeResult {
  double train_acc = 0.0;
  double heldout_acc = 0.0;
  std::size_t dim = 0;
  std::string stratum = "all";
  std::size_t n_train = 0;
  std::size_t n_heldout = 0;
};

struct ProbeOptions {
  double split = 0.8;
  std::size_t iterations = 1000;
  double step = 1e-2;
};

/// Logistic-regression probe for binary labels (0/1). Rows are shuffled by
/// `rng` and the first `split` fraction trains the probe by full-batch
/// gradient descent on features standardized with training statistics.
ProbeResult train_probe(const Array& embeddings, std::span<const int> labels, numerics::Rng& rng,
                        const ProbeOptions& opts = {}, std::string stratum = "all");

/// A token examined by the embedding report.
struct TokenRow {
  std::size_t token_id = 0;
  std::string stratum;    ///< head, tail or unseen
  std::string pos_label;  ///< noun, adj, ambiguous or none
  double pc1 = 0.0;
  double pc2 = 0.0;
};

struct EmbeddingReport {
  std::vector<TokenRow> tokens;
  std::vector<double> explained_variance_ratio;
  std::vector<ProbeResult> probes;  ///< strata all, head, tail

  const ProbeResult& probe(const std::string& stratum) const;
};

/// Joint 2-component PCA over the head, tail and unseen tokens of a
/// checkpoint's embedding, and POS probes on the all/head/tail strata.
/// Ambiguous tokens are kept in the PCA but never probed.
EmbeddingReport embedding_report(const trainer::Checkpoint& ck);

/// embedding_report written as pca_head.csv, pca_tail.csv, pca_unseen.csv
/// and probe_results.csv under `out_dir`.
EmbeddingReport write_embedding_report(const trainer::Checkpoint& ck, const std::filesystem::path& out_dir);

}  // namespace forgetlab::analysis
