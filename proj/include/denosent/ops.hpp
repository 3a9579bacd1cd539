#pragma once

#include <cstdint>
#include <span>
#include <utility>
#include <vector>

#include "denosent/rng.hpp"
#include "denosent/tensor.hpp"

// Differentiable operations over Tensor<T>. Every op validates shapes, throws
// NonFinite on a non-finite result and registers its gradient when recording.
namespace denosent::ops {

using TokenId = std::int32_t;

enum class Reduction { kMean, kSum };

template <typename T> Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b);
template <typename T> Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b);
template <typename T> Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b);
// x [..., d] + b [d]
template <typename T> Tensor<T> add_bias(const Tensor<T>& x, const Tensor<T>& bias);
template <typename T> Tensor<T> scale(const Tensor<T>& a, double factor);
template <typename T> Tensor<T> sum(const Tensor<T>& a);
template <typename T> Tensor<T> mean(const Tensor<T>& a);
template <typename T> Tensor<T> reshape(const Tensor<T>& a, Shape dims);

// x [..., k] @ w [k, n] -> [..., n]
template <typename T> Tensor<T> matmul(const Tensor<T>& x, const Tensor<T>& w);
// a [G, m, k] @ b [G, k, n] (or b [G, n, k] transposed) -> [G, m, n]
template <typename T>
Tensor<T> batched_matmul(const Tensor<T>& a, const Tensor<T>& b, bool transpose_b);
// Concatenates along the leading axis; trailing extents must agree.
template <typename T> Tensor<T> concat(const Tensor<T>& a, const Tensor<T>& b);

// table [V, d], ids -> [ids.size(), d]; reshape afterwards for batch layout.
template <typename T>
Tensor<T> embedding(const Tensor<T>& table, std::span<const TokenId> ids);
// x [B, L, d] + table[0:L] broadcast over B.
template <typename T>
Tensor<T> add_positional(const Tensor<T>& x, const Tensor<T>& table);

// [B, L, h*dh] <-> [B*h, L, dh]
template <typename T> Tensor<T> split_heads(const Tensor<T>& x, std::size_t heads);
template <typename T> Tensor<T> merge_heads(const Tensor<T>& x, std::size_t heads);
// scores [B*h, Lq, Lk]; key_mask [B, Lk] (1 = attendable). Masked entries get
// a large negative constant so a following softmax assigns them exactly zero.
template <typename T>
Tensor<T> mask_keys(const Tensor<T>& scores, std::span<const std::uint8_t> key_mask,
                    std::size_t heads);

template <typename T> Tensor<T> softmax_rows(const Tensor<T>& t);
template <typename T>
Tensor<T> layer_norm(const Tensor<T>& x, const Tensor<T>& gain, const Tensor<T>& bias,
                     double eps = 1e-5);
// tanh-approximated GELU
template <typename T> Tensor<T> gelu(const Tensor<T>& x);

template <typename T>
struct DropoutResult {
  Tensor<T> output;
  Tensor<T> mask;  // 1 where kept, 0 where zeroed
};
// Inverted dropout: survivors are scaled by 1/(1-p).
template <typename T>
DropoutResult<T> dropout(const Tensor<T>& x, double p, RngStream rng);
// Same, but leading-axis slice b draws its mask from row_streams[b], so a
// row's mask does not depend on which other rows share the batch.
template <typename T>
DropoutResult<T> dropout_rows(const Tensor<T>& x, double p, std::span<const RngStream> row_streams);

// x [B, L, d], one position per row -> [B, d]
template <typename T>
Tensor<T> gather_positions(const Tensor<T>& x, std::span<const std::size_t> positions);
// x [R, d] -> rows scaled to unit L2 norm (norm clamped at 1e-12).
template <typename T> Tensor<T> l2_normalize_rows(const Tensor<T>& x);

// logits [B, n, V]; targets/mask [B, n]. Mean (or sum) over masked-in
// positions of -log softmax(logits)[target].
template <typename T>
Tensor<T> cross_entropy(const Tensor<T>& logits, std::span<const TokenId> targets,
                        std::span<const std::uint8_t> mask, Reduction reduction = Reduction::kMean);
template <typename T>
Tensor<T> cross_entropy_mean(const Tensor<T>& logits, std::span<const TokenId> targets,
                             std::span<const std::uint8_t> mask) {
  return cross_entropy(logits, targets, mask, Reduction::kMean);
}

// t [R, k] -> [R]: log sum_j exp(t[r, j]) over entries with include[r*k+j]
// (all entries when `include` is empty).
template <typename T>
Tensor<T> logsumexp_rows(const Tensor<T>& t, std::span<const std::uint8_t> include = {});
// t [R, k] -> [R] with out[r] = t[r, cols[r]]
template <typename T>
Tensor<T> pick(const Tensor<T>& t, std::span<const std::size_t> cols);

}  // namespace denosent::ops
