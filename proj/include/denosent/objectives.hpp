#pragma once

#include <optional>
#include <string_view>

#include "denosent/ops.hpp"
#include "denosent/tensor.hpp"
#include "denosent/text.hpp"

namespace denosent::objectives {

// Whether the InfoNCE denominator includes the positive pair (in-batch
// SimCSE convention, the default) or sums over negatives only.
enum class InfoNceDenominator { kIncludePositive, kNegativesOnly };

std::string_view to_string(InfoNceDenominator d);
InfoNceDenominator parse_denominator(std::string_view s);
std::string_view to_string(ops::Reduction r);
ops::Reduction parse_reduction(std::string_view s);

inline constexpr double kDefaultTemperature = 0.03;

// Cross-entropy of logits [B, W, V] against the ORIGINAL ids at every
// position where the original row is non-pad, whatever the noisy copy holds
// there.
template <typename T>
Tensor<T> denoising_loss(const Tensor<T>& logits, const text::SentenceBatch& original,
                         ops::Reduction reduction = ops::Reduction::kMean);

// Fraction of original non-pad positions whose argmax logit is the target.
template <typename T>
double token_accuracy(const Tensor<T>& logits, const text::SentenceBatch& original);

// Mean over anchors i of
//   -log( exp(cos(z_i, z+_i)/tau) / sum_j exp(cos(z_i, z+_j)/tau) )
// with the other rows of z_plus as in-batch negatives.
template <typename T>
Tensor<T> info_nce(const Tensor<T>& z, const Tensor<T>& z_plus, double tau,
                   InfoNceDenominator denominator = InfoNceDenominator::kIncludePositive);

template <typename T>
struct LossBreakdown {
  Tensor<T> combined;  // differentiable
  double contrastive = 0.0;
  double denoising = 0.0;
  double token_accuracy = 0.0;
};

// combined = w_contrastive * contrastive + w_denoising * denoising. A term
// with zero weight may be absent; it then contributes 0 to the breakdown.
template <typename T>
LossBreakdown<T> combined_loss(const std::optional<Tensor<T>>& contrastive,
                               const std::optional<Tensor<T>>& denoising, double w_contrastive = 1.0,
                               double w_denoising = 1.0, double token_accuracy = 0.0);

}  // namespace denosent::objectives
