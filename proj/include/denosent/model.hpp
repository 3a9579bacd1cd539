#pragma once

#include <span>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "denosent/grad_check.hpp"
#include "denosent/rng.hpp"
#include "denosent/tensor.hpp"
#include "denosent/text.hpp"

namespace denosent::model {

enum class EncoderInput { kOriginal, kAugmented };
// kMaskToken reads the encoder state at the template's [MASK] slot;
// kFirstToken reads position 0 (the [CLS]-style ablation).
enum class Pooling { kMaskToken, kFirstToken };

std::string_view to_string(EncoderInput mode);
std::string_view to_string(Pooling pooling);
EncoderInput parse_encoder_input(std::string_view s);
Pooling parse_pooling(std::string_view s);

struct ModelConfig {
  std::size_t d = 64;
  std::size_t enc_layers = 2;
  std::size_t dec_layers = 2;
  std::size_t enc_heads = 4;
  std::size_t dec_heads = 1;
  std::size_t ffn_mult = 4;
  std::size_t vocab_size = 0;
  std::size_t max_len = text::kDefaultMaxLength;
  double internal_dropout = 0.1;
  double init_std = 0.02;
  EncoderInput encoder_input = EncoderInput::kOriginal;
  Pooling pooling = Pooling::kMaskToken;

  // Room for the template suffix "means [MASK] ." plus one spare slot.
  std::size_t encoder_length() const { return max_len + 4; }
  void validate() const;
};

template <typename T>
struct LayerNormWeights {
  Tensor<T> gain;
  Tensor<T> bias;
};

// Keys carry no bias: it would add the same score to every key of a query,
// which the softmax cancels, so it could never receive gradient.
template <typename T>
struct AttentionWeights {
  Tensor<T> wq, bq, wk, wv, bv, wo, bo;
};

template <typename T>
struct FeedForwardWeights {
  Tensor<T> w1, b1, w2, b2;
};

template <typename T>
struct EncoderLayer {
  LayerNormWeights<T> ln_attn;
  AttentionWeights<T> self_attn;
  LayerNormWeights<T> ln_ffn;
  FeedForwardWeights<T> ffn;
};

template <typename T>
struct DecoderLayer {
  LayerNormWeights<T> ln_self;
  AttentionWeights<T> self_attn;
  LayerNormWeights<T> ln_cross;
  AttentionWeights<T> cross_attn;
  LayerNormWeights<T> ln_ffn;
  FeedForwardWeights<T> ffn;
};

// Every learnable tensor of encoder, decoder and output head. The token
// table is shared by the encoder and decoder inputs; the head is untied.
template <typename T>
struct ModelParams {
  Tensor<T> token_embedding;    // [V, d]
  Tensor<T> encoder_positions;  // [L + 4, d]
  Tensor<T> decoder_positions;  // [L, d]
  std::vector<EncoderLayer<T>> encoder;
  LayerNormWeights<T> encoder_final;
  std::vector<DecoderLayer<T>> decoder;
  LayerNormWeights<T> decoder_final;
  Tensor<T> output_weight;  // [d, V]
  Tensor<T> output_bias;    // [V]

  // normal(0, init_std) for embeddings and projections, zero biases, unit
  // layer-norm gains.
  static ModelParams init(const ModelConfig& config, RngStream rng);

  // Stable (name, handle) listing; handles alias the stored tensors.
  std::vector<NamedTensor<T>> named() const;

  template <typename U>
  ModelParams<U> cast(const ModelConfig& config) const;
};

// True for parameters only the denoising path touches (decoder stack,
// decoder positions, output head).
bool is_decoder_parameter(std::string_view name);

struct WrappedSentence {
  text::TokenSequence ids;
  std::size_t mask_position = 0;
};

// [x_1..x_n] -> [x_1..x_n, means, MASK, .]; mask_position = n + 1. Input is
// truncated to max_len first.
WrappedSentence wrap_with_template(std::span<const text::TokenId> ids, const text::Vocabulary& vocab,
                                   std::size_t max_len);

struct EncoderBatch {
  text::SentenceBatch batch;
  std::vector<std::size_t> pool_positions;
};

// Wraps every sentence and pads to the longest wrapped row (at most
// config.encoder_length()).
EncoderBatch make_encoder_batch(std::span<const text::TokenSequence> sentences,
                                const text::Vocabulary& vocab, const ModelConfig& config);

// Projections + scaled dot-product attention of queries [B, n, d] over
// memory [B, m, d]; memory_mask [B*m] marks attendable memory slots (empty
// means all). Returns [B, n, d] before any residual connection.
template <typename T>
Tensor<T> multi_head_attention(const AttentionWeights<T>& w, const Tensor<T>& queries,
                               const Tensor<T>& memory, std::span<const std::uint8_t> memory_mask,
                               std::size_t heads);

// Decoder cross-attention: queries z_y attend over memory z_x.
template <typename T>
Tensor<T> cross_attention(const AttentionWeights<T>& w, const Tensor<T>& memory,
                          const Tensor<T>& queries, std::size_t heads);

// Pre-norm transformer encoder; returns the pooled state [B, d].
template <typename T>
Tensor<T> encode(const EncoderBatch& batch, const ModelParams<T>& params, const ModelConfig& config,
                 bool training, RngStream rng);

template <typename T>
struct DecodeTrace {
  // Per layer: cross-attention sublayer output [B, L, d] before the residual.
  std::vector<Tensor<T>> cross_attention_outputs;
};

// Non-causal decoder. Embeds the noisy ids, corrupts them at rate p while
// training, runs dec_layers blocks of {bidirectional self-attention,
// cross-attention over the single memory vector rep, FFN} and projects to
// vocabulary logits [B, L, V]. row_streams, when non-empty, gives one
// corruption stream per row.
template <typename T>
Tensor<T> decode_denoise(const Tensor<T>& rep, const text::SentenceBatch& noisy,
                         const ModelParams<T>& params, const ModelConfig& config, double p,
                         bool training, RngStream rng, std::span<const RngStream> row_streams = {},
                         DecodeTrace<T>* trace = nullptr);

// Inference-time sentence vectors [N, d]; the decoder is not used.
Tensor<float> embed_sentences(std::span<const std::string> texts, const ModelParams<float>& params,
                              const ModelConfig& config, const text::Vocabulary& vocab,
                              std::size_t batch_size = 64);

}  // namespace denosent::model
