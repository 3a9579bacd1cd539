#include "denosent/evaluation.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <fstream>
#include <numeric>
#include <ostream>
#include <nlohmann/json.hpp>

#include "denosent/errors.hpp"

namespace denosent::evaluation {

namespace {

template <typename T>
double cosine_impl(std::span<const T> a, std::span<const T> b) {
  if (a.size() != b.size()) {
    throw InvalidShape("cosine: lengths " + std::to_string(a.size()) + " and " +
                       std::to_string(b.size()) + " differ");
  }
  double dot = 0.0, na = 0.0, nb = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    dot += static_cast<double>(a[i]) * static_cast<double>(b[i]);
    na += static_cast<double>(a[i]) * static_cast<double>(a[i]);
    nb += static_cast<double>(b[i]) * static_cast<double>(b[i]);
  }
  if (na == 0.0 || nb == 0.0) throw UndefinedSimilarity("cosine of a zero vector");
  return std::clamp(dot / (std::sqrt(na) * std::sqrt(nb)), -1.0, 1.0);
}

void require_matrix(const Tensor<float>& t, const char* what) {
  if (t.dims().size() != 2) {
    throw InvalidShape(std::string(what) + ": expected [N, d], got " + shape_string(t.dims()));
  }
}

std::span<const float> row(const Tensor<float>& t, std::size_t i) {
  const std::size_t d = t.dims()[1];
  return t.values().subspan(i * d, d);
}

std::vector<std::vector<double>> unit_rows(const Tensor<float>& t) {
  const std::size_t n = t.dims()[0];
  std::vector<std::vector<double>> out(n);
  for (std::size_t i = 0; i < n; ++i) {
    const auto r = row(t, i);
    double norm = 0.0;
    for (float v : r) norm += static_cast<double>(v) * v;
    if (norm == 0.0) throw UndefinedSimilarity("zero embedding at row " + std::to_string(i));
    norm = std::sqrt(norm);
    out[i].reserve(r.size());
    for (float v : r) out[i].push_back(static_cast<double>(v) / norm);
  }
  return out;
}

double squared_distance(const std::vector<double>& a, const std::vector<double>& b) {
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) s += (a[i] - b[i]) * (a[i] - b[i]);
  return s;
}

std::string format_number(double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.6f", v);
  return buf;
}

}  // namespace

double cosine(std::span<const float> a, std::span<const float> b) { return cosine_impl(a, b); }
double cosine(std::span<const double> a, std::span<const double> b) { return cosine_impl(a, b); }

std::vector<double> average_ranks(std::span<const double> xs) {
  std::vector<std::size_t> order(xs.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return xs[a] < xs[b]; });
  std::vector<double> ranks(xs.size());
  for (std::size_t i = 0; i < order.size();) {
    std::size_t j = i;
    while (j + 1 < order.size() && xs[order[j + 1]] == xs[order[i]]) ++j;
    // Positions i..j (0-based) hold ranks i+1..j+1.
    const double mean_rank = 0.5 * static_cast<double>(i + j) + 1.0;
    for (std::size_t t = i; t <= j; ++t) ranks[order[t]] = mean_rank;
    i = j + 1;
  }
  return ranks;
}

double spearman(std::span<const double> xs, std::span<const double> ys) {
  if (xs.size() != ys.size()) {
    throw InvalidShape("spearman: series lengths " + std::to_string(xs.size()) + " and " +
                       std::to_string(ys.size()) + " differ");
  }
  if (xs.size() < 2) throw UndefinedCorrelation("spearman needs at least 2 points");
  for (std::size_t i = 0; i < xs.size(); ++i) {
    if (!std::isfinite(xs[i]) || !std::isfinite(ys[i])) {
      throw NonFinite("spearman: non-finite value at index " + std::to_string(i));
    }
  }
  const auto rx = average_ranks(xs);
  const auto ry = average_ranks(ys);
  const double n = static_cast<double>(rx.size());
  const double mx = std::accumulate(rx.begin(), rx.end(), 0.0) / n;
  const double my = std::accumulate(ry.begin(), ry.end(), 0.0) / n;
  double sxy = 0.0, sxx = 0.0, syy = 0.0;
  for (std::size_t i = 0; i < rx.size(); ++i) {
    sxy += (rx[i] - mx) * (ry[i] - my);
    sxx += (rx[i] - mx) * (rx[i] - mx);
    syy += (ry[i] - my) * (ry[i] - my);
  }
  if (sxx == 0.0 || syy == 0.0) throw UndefinedCorrelation("spearman of a constant series");
  return std::clamp(sxy / std::sqrt(sxx * syy), -1.0, 1.0);
}

SpaceDiagnostics space_diagnostics(const Tensor<float>& z, const Tensor<float>& z_plus) {
  require_matrix(z, "space_diagnostics");
  require_matrix(z_plus, "space_diagnostics");
  if (z.dims() != z_plus.dims()) {
    throw InvalidShape("space_diagnostics: " + shape_string(z.dims()) + " vs " +
                       shape_string(z_plus.dims()));
  }
  const std::size_t n = z.dims()[0];
  if (n < 2) throw DegenerateBatch("space_diagnostics needs at least 2 pairs");
  const auto a = unit_rows(z);
  const auto b = unit_rows(z_plus);

  SpaceDiagnostics out;
  for (std::size_t i = 0; i < n; ++i) out.alignment += squared_distance(a[i], b[i]);
  out.alignment /= static_cast<double>(n);

  double kernel = 0.0, cos_sum = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = i + 1; j < n; ++j) {
      const double d2 = squared_distance(a[i], a[j]);
      kernel += std::exp(-2.0 * d2);
      cos_sum += std::clamp(1.0 - 0.5 * d2, -1.0, 1.0);
    }
  }
  const double pairs = 0.5 * static_cast<double>(n) * static_cast<double>(n - 1);
  out.uniformity = std::log(kernel / pairs);
  out.mean_pairwise_cosine = cos_sum / pairs;
  return out;
}

Embedder model_embedder(const model::ModelParams<float>& params, const model::ModelConfig& config,
                        const text::Vocabulary& vocab) {
  return [&params, config, &vocab](std::span<const std::string> texts) {
    return model::embed_sentences(texts, params, config, vocab);
  };
}

EvalReport eval_sts(std::span<const text::EvalRecord> records, const Embedder& embed) {
  if (records.size() < 2) throw UndefinedCorrelation("eval_sts needs at least 2 records");
  std::vector<std::string> left, right;
  std::vector<double> gold;
  for (const auto& r : records) {
    left.push_back(r.sentence_a);
    right.push_back(r.sentence_b);
    gold.push_back(r.gold_score);
  }
  const auto za = embed(left);
  const auto zb = embed(right);
  require_matrix(za, "eval_sts");
  require_matrix(zb, "eval_sts");
  if (za.dims()[0] != records.size() || zb.dims() != za.dims()) {
    throw ContractViolation("eval_sts: embedder returned " + shape_string(za.dims()) + " and " +
                            shape_string(zb.dims()) + " for " + std::to_string(records.size()) +
                            " records");
  }
  std::vector<double> sims(records.size());
  for (std::size_t i = 0; i < records.size(); ++i) sims[i] = cosine(row(za, i), row(zb, i));

  EvalReport report;
  report.spearman = spearman(sims, gold);
  report.n_pairs = records.size();
  report.diagnostics = space_diagnostics(za, zb);
  return report;
}

RetrievalReport retrieval_metrics(const Tensor<float>& queries, const Tensor<float>& docs,
                                  const std::vector<std::vector<std::size_t>>& relevant,
                                  std::size_t k) {
  require_matrix(queries, "retrieval_metrics");
  require_matrix(docs, "retrieval_metrics");
  if (k < 1) throw InvalidParameter("retrieval_metrics: k must be >= 1");
  const std::size_t nq = queries.dims()[0];
  const std::size_t nd = docs.dims()[0];
  if (nd == 0) throw EmptyInput("retrieval_metrics: no documents");
  if (queries.dims()[1] != docs.dims()[1]) {
    throw InvalidShape("retrieval_metrics: query dim " + std::to_string(queries.dims()[1]) +
                       " vs doc dim " + std::to_string(docs.dims()[1]));
  }
  if (relevant.size() != nq) {
    throw InvalidShape("retrieval_metrics: " + std::to_string(relevant.size()) +
                       " relevance sets for " + std::to_string(nq) + " queries");
  }

  RetrievalReport report;
  report.k = k;
  report.n_queries = nq;
  std::vector<double> scores(nd);
  std::vector<std::size_t> order(nd);
  std::vector<std::uint8_t> is_relevant(nd);
  for (std::size_t q = 0; q < nq; ++q) {
    for (std::size_t d = 0; d < nd; ++d) scores[d] = cosine(row(queries, q), row(docs, d));
    std::iota(order.begin(), order.end(), 0);
    std::stable_sort(order.begin(), order.end(),
                     [&](std::size_t a, std::size_t b) { return scores[a] > scores[b]; });
    std::fill(is_relevant.begin(), is_relevant.end(), 0);
    std::size_t n_relevant = 0;
    for (std::size_t d : relevant[q]) {
      if (d >= nd) {
        throw InvalidParameter("retrieval_metrics: doc index " + std::to_string(d) +
                               " out of range for " + std::to_string(nd) + " docs");
      }
      if (!is_relevant[d]) ++n_relevant;
      is_relevant[d] = 1;
    }
    if (n_relevant == 0) continue;

    double reciprocal = 0.0, precision_sum = 0.0;
    std::size_t hits = 0;
    for (std::size_t i = 0; i < std::min(k, nd); ++i) {
      if (!is_relevant[order[i]]) continue;
      ++hits;
      if (hits == 1) reciprocal = 1.0 / static_cast<double>(i + 1);
      precision_sum += static_cast<double>(hits) / static_cast<double>(i + 1);
    }
    report.mrr += reciprocal;
    report.map += precision_sum / static_cast<double>(std::min(n_relevant, k));
  }
  if (nq > 0) {
    report.mrr /= static_cast<double>(nq);
    report.map /= static_cast<double>(nq);
  }
  return report;
}

std::vector<std::vector<std::size_t>> load_relevance(const std::filesystem::path& path,
                                                     std::size_t n_queries, std::size_t n_docs) {
  const auto lines = text::read_lines(path);
  const std::string source = path.string();
  std::vector<std::vector<std::size_t>> out(n_queries);
  auto parse_index = [&](std::string_view field, std::size_t line, std::size_t limit,
                         const char* what) {
    std::size_t v = 0;
    const auto [ptr, ec] = std::from_chars(field.data(), field.data() + field.size(), v);
    if (ec != std::errc() || ptr != field.data() + field.size()) {
      throw FormatError(source, line, std::string("bad ") + what + " index '" + std::string(field) + "'");
    }
    if (v >= limit) {
      throw FormatError(source, line, std::string(what) + " index " + std::to_string(v) +
                                          " out of range (" + std::to_string(limit) + ")");
    }
    return v;
  };
  for (std::size_t i = 0; i < lines.size(); ++i) {
    if (lines[i].empty()) continue;
    const auto fields = text::split_tabs(lines[i]);
    if (fields.size() != 2) {
      throw FormatError(source, i + 1, "expected query_index<TAB>doc_index");
    }
    const auto q = parse_index(fields[0], i + 1, n_queries, "query");
    const auto d = parse_index(fields[1], i + 1, n_docs, "doc");
    out[q].push_back(d);
  }
  return out;
}

ReportFields report_fields(const SpaceDiagnostics& diagnostics) {
  return {{"alignment", format_number(diagnostics.alignment)},
          {"uniformity", format_number(diagnostics.uniformity)},
          {"mean_pairwise_cosine", format_number(diagnostics.mean_pairwise_cosine)}};
}

ReportFields report_fields(const EvalReport& report) {
  ReportFields out{{"spearman", format_number(report.spearman)},
                   {"spearman_x100", format_number(report.spearman_x100())},
                   {"n_pairs", std::to_string(report.n_pairs)}};
  for (auto& f : report_fields(report.diagnostics)) out.push_back(std::move(f));
  return out;
}

ReportFields report_fields(const RetrievalReport& report) {
  const std::string k = std::to_string(report.k);
  return {{"mrr@" + k, format_number(report.mrr)},
          {"map@" + k, format_number(report.map)},
          {"k", k},
          {"n_queries", std::to_string(report.n_queries)},
          {"tie_break", "stable_doc_index"}};
}

void write_report(std::ostream& out, const ReportFields& fields, bool json) {
  for (const auto& [key, value] : fields) out << key << '=' << value << '\n';
  if (!json) return;
  nlohmann::ordered_json block = nlohmann::ordered_json::object();
  for (const auto& [key, value] : fields) {
    double number = 0.0;
    const auto [ptr, ec] = std::from_chars(value.data(), value.data() + value.size(), number);
    if (ec == std::errc() && ptr == value.data() + value.size()) {
      block[key] = number;
    } else {
      block[key] = value;
    }
  }
  out << "json=" << block.dump() << '\n';
}

void write_report(const std::filesystem::path& path, const ReportFields& fields, bool json) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot write report " + path.string());
  write_report(out, fields, json);
  if (!out) throw IoError("failed writing report " + path.string());
}

}  // namespace denosent::evaluation
