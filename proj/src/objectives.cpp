#include "denosent/objectives.hpp"

#include <algorithm>
#include <numeric>

#include "denosent/errors.hpp"

namespace denosent::objectives {

std::string_view to_string(InfoNceDenominator d) {
  return d == InfoNceDenominator::kIncludePositive ? "with_positive" : "negatives_only";
}

InfoNceDenominator parse_denominator(std::string_view s) {
  if (s == "with_positive") return InfoNceDenominator::kIncludePositive;
  if (s == "negatives_only") return InfoNceDenominator::kNegativesOnly;
  throw InvalidParameter("unknown InfoNCE denominator '" + std::string(s) +
                         "' (expected with_positive or negatives_only)");
}

std::string_view to_string(ops::Reduction r) { return r == ops::Reduction::kMean ? "mean" : "sum"; }

ops::Reduction parse_reduction(std::string_view s) {
  if (s == "mean") return ops::Reduction::kMean;
  if (s == "sum") return ops::Reduction::kSum;
  throw InvalidParameter("unknown reduction '" + std::string(s) + "' (expected mean or sum)");
}

namespace {

template <typename T>
void check_logits(const Tensor<T>& logits, const text::SentenceBatch& original) {
  if (logits.rank() != 3 || logits.dim(0) != original.rows || logits.dim(1) != original.width) {
    throw InvalidShape("denoising: logits " + shape_string(logits.dims()) +
                       " do not match batch [" + std::to_string(original.rows) + ", " +
                       std::to_string(original.width) + "]");
  }
}

}  // namespace

template <typename T>
Tensor<T> denoising_loss(const Tensor<T>& logits, const text::SentenceBatch& original,
                         ops::Reduction reduction) {
  check_logits(logits, original);
  if (std::none_of(original.mask.begin(), original.mask.end(), [](auto m) { return m != 0; })) {
    throw DegenerateBatch("denoising_loss: batch has no real tokens");
  }
  return ops::cross_entropy(logits, original.ids, original.mask, reduction);
}

template <typename T>
double token_accuracy(const Tensor<T>& logits, const text::SentenceBatch& original) {
  check_logits(logits, original);
  const std::size_t vocab = logits.dim(2);
  std::size_t hits = 0, total = 0;
  auto lv = logits.values();
  for (std::size_t r = 0; r < original.rows * original.width; ++r) {
    if (!original.mask[r]) continue;
    const T* row = lv.data() + r * vocab;
    const auto best = std::max_element(row, row + vocab) - row;
    hits += best == original.ids[r] ? 1 : 0;
    ++total;
  }
  return total == 0 ? 0.0 : static_cast<double>(hits) / static_cast<double>(total);
}

template <typename T>
Tensor<T> info_nce(const Tensor<T>& z, const Tensor<T>& z_plus, double tau,
                   InfoNceDenominator denominator) {
  if (z.rank() != 2 || z.dims() != z_plus.dims()) {
    throw InvalidShape("info_nce: z " + shape_string(z.dims()) + " vs z+ " +
                       shape_string(z_plus.dims()));
  }
  const std::size_t batch = z.dim(0), d = z.dim(1);
  if (batch < 2) throw DegenerateBatch("info_nce: need at least 2 pairs for in-batch negatives");
  if (!(tau > 0.0)) throw InvalidParameter("info_nce: temperature must be positive");

  auto zn = ops::reshape(ops::l2_normalize_rows(z), Shape{1, batch, d});
  auto pn = ops::reshape(ops::l2_normalize_rows(z_plus), Shape{1, batch, d});
  auto sims = ops::reshape(ops::scale(ops::batched_matmul(zn, pn, true), 1.0 / tau),
                           Shape{batch, batch});
  std::vector<std::size_t> diagonal(batch);
  std::iota(diagonal.begin(), diagonal.end(), 0);

  std::vector<std::uint8_t> include;
  if (denominator == InfoNceDenominator::kNegativesOnly) {
    include.assign(batch * batch, 1);
    for (std::size_t i = 0; i < batch; ++i) include[i * batch + i] = 0;
  }
  auto per_anchor = ops::sub(ops::logsumexp_rows(sims, include), ops::pick(sims, diagonal));
  return ops::mean(per_anchor);
}

template <typename T>
LossBreakdown<T> combined_loss(const std::optional<Tensor<T>>& contrastive,
                               const std::optional<Tensor<T>>& denoising, double w_contrastive,
                               double w_denoising, double token_acc) {
  if (!(w_contrastive >= 0.0) || !(w_denoising >= 0.0)) {
    throw InvalidParameter("combined_loss: weights must be non-negative");
  }
  if (w_contrastive > 0.0 && !contrastive) {
    throw ContractViolation("combined_loss: contrastive weight set but no contrastive loss");
  }
  if (w_denoising > 0.0 && !denoising) {
    throw ContractViolation("combined_loss: denoising weight set but no denoising loss");
  }
  if (!contrastive && !denoising) throw ContractViolation("combined_loss: no loss terms");

  LossBreakdown<T> out;
  out.token_accuracy = token_acc;
  std::optional<Tensor<T>> total;
  if (contrastive) {
    out.contrastive = static_cast<double>(contrastive->item());
    total = ops::scale(*contrastive, w_contrastive);
  }
  if (denoising) {
    out.denoising = static_cast<double>(denoising->item());
    auto term = ops::scale(*denoising, w_denoising);
    total = total ? ops::add(*total, term) : term;
  }
  out.combined = *total;
  return out;
}

#define DENOSENT_INSTANTIATE_OBJECTIVES(T)                                                  \
  template Tensor<T> denoising_loss(const Tensor<T>&, const text::SentenceBatch&,           \
                                    ops::Reduction);                                        \
  template double token_accuracy(const Tensor<T>&, const text::SentenceBatch&);             \
  template Tensor<T> info_nce(const Tensor<T>&, const Tensor<T>&, double, InfoNceDenominator); \
  template LossBreakdown<T> combined_loss(const std::optional<Tensor<T>>&,                  \
                                          const std::optional<Tensor<T>>&, double, double,  \
                                          double);

DENOSENT_INSTANTIATE_OBJECTIVES(float)
DENOSENT_INSTANTIATE_OBJECTIVES(double)

#undef DENOSENT_INSTANTIATE_OBJECTIVES

}  // namespace denosent::objectives
