#pragma once

#include <cstddef>
#include <filesystem>
#include <functional>
#include <iosfwd>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "denosent/model.hpp"
#include "denosent/tensor.hpp"
#include "denosent/text.hpp"

namespace denosent::evaluation {

// dot(a, b) / (|a| |b|), clamped to [-1, 1]. UndefinedSimilarity when either
// side is the zero vector.
double cosine(std::span<const float> a, std::span<const float> b);
double cosine(std::span<const double> a, std::span<const double> b);

// 1-based ranks; tied values share the mean of the ranks they span.
std::vector<double> average_ranks(std::span<const double> xs);

// Pearson correlation of average ranks. UndefinedCorrelation when either
// series is constant.
double spearman(std::span<const double> xs, std::span<const double> ys);

struct SpaceDiagnostics {
  double alignment = 0.0;             // mean |z_i/|z_i| - z+_i/|z+_i||^2
  double uniformity = 0.0;            // log mean_{i != j} exp(-2 |ẑ_i - ẑ_j|^2)
  double mean_pairwise_cosine = 0.0;  // over distinct i != j
};

// z and z_plus are [N, d] with N >= 2; uniformity and mean cosine are taken
// over the z side.
SpaceDiagnostics space_diagnostics(const Tensor<float>& z, const Tensor<float>& z_plus);

struct EvalReport {
  double spearman = 0.0;  // raw rho in [-1, 1]
  std::size_t n_pairs = 0;
  SpaceDiagnostics diagnostics;

  double spearman_x100() const { return 100.0 * spearman; }
};

// Maps N sentences to [N, d] vectors.
using Embedder = std::function<Tensor<float>(std::span<const std::string>)>;

Embedder model_embedder(const model::ModelParams<float>& params, const model::ModelConfig& config,
                        const text::Vocabulary& vocab);

// Cosine of each (a, b) pair, scored by Spearman against the gold column.
// diagnostics treats (a_i, b_i) as the pairs.
EvalReport eval_sts(std::span<const text::EvalRecord> records, const Embedder& embed);

struct RetrievalReport {
  double mrr = 0.0;
  double map = 0.0;
  std::size_t k = 0;
  std::size_t n_queries = 0;
};

// For each query, documents are ranked by cosine (ties keep the lower doc
// index first). MRR@k scores 1/rank of the first relevant doc within the
// top k, else 0. AP@k sums precision@i over relevant hits i <= k and divides
// by min(|relevant|, k); queries without relevant docs score 0.
RetrievalReport retrieval_metrics(const Tensor<float>& queries, const Tensor<float>& docs,
                                  const std::vector<std::vector<std::size_t>>& relevant,
                                  std::size_t k);

// `query_index<TAB>doc_index` per line (0-based). FormatError names the line.
std::vector<std::vector<std::size_t>> load_relevance(const std::filesystem::path& path,
                                                     std::size_t n_queries, std::size_t n_docs);

// Ordered, already formatted key=value pairs. write_report emits one
// `key=value` line each and, when `json` is set, a trailing `json={...}` line
// holding the same fields (numbers as numbers).
using ReportFields = std::vector<std::pair<std::string, std::string>>;

ReportFields report_fields(const EvalReport& report);
ReportFields report_fields(const RetrievalReport& report);
ReportFields report_fields(const SpaceDiagnostics& diagnostics);

void write_report(std::ostream& out, const ReportFields& fields, bool json);
void write_report(const std::filesystem::path& path, const ReportFields& fields, bool json);

}  // namespace denosent::evaluation
