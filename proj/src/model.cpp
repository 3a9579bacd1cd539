#include "denosent/model.hpp"

#include <algorithm>
#include <cmath>

#include "denosent/errors.hpp"
#include "denosent/noise.hpp"
#include "denosent/ops.hpp"

namespace denosent::model {

using text::TokenId;
using text::TokenSequence;

std::string_view to_string(EncoderInput mode) {
  return mode == EncoderInput::kOriginal ? "original" : "augmented";
}

std::string_view to_string(Pooling pooling) {
  return pooling == Pooling::kMaskToken ? "mask" : "first";
}

EncoderInput parse_encoder_input(std::string_view s) {
  if (s == "original") return EncoderInput::kOriginal;
  if (s == "augmented") return EncoderInput::kAugmented;
  throw InvalidParameter("unknown encoder input mode '" + std::string(s) +
                         "' (expected original or augmented)");
}

Pooling parse_pooling(std::string_view s) {
  if (s == "mask") return Pooling::kMaskToken;
  if (s == "first" || s == "cls") return Pooling::kFirstToken;
  throw InvalidParameter("unknown pooling '" + std::string(s) + "' (expected mask or first)");
}

void ModelConfig::validate() const {
  if (d == 0 || enc_layers == 0 || dec_layers == 0 || ffn_mult == 0 || max_len == 0) {
    throw InvalidParameter("model: d, layer counts, ffn_mult and max_len must be positive");
  }
  if (enc_heads == 0 || d % enc_heads != 0) {
    throw InvalidParameter("model: d=" + std::to_string(d) + " not divisible by enc_heads=" +
                           std::to_string(enc_heads));
  }
  if (dec_heads == 0 || d % dec_heads != 0) {
    throw InvalidParameter("model: d=" + std::to_string(d) + " not divisible by dec_heads=" +
                           std::to_string(dec_heads));
  }
  if (vocab_size < 5) throw InvalidParameter("model: vocab_size must cover the special tokens");
  if (!(internal_dropout >= 0.0 && internal_dropout < 1.0)) {
    throw InvalidParameter("model: internal_dropout must lie in [0, 1)");
  }
  if (!(init_std > 0.0)) throw InvalidParameter("model: init_std must be positive");
}

namespace {

template <typename T>
Tensor<T> normal_tensor(Shape dims, double std, RngStream& rng) {
  std::vector<T> v(shape_size(dims));
  for (auto& x : v) x = static_cast<T>(rng.normal() * std);
  return Tensor<T>(std::move(dims), std::move(v), true);
}

template <typename T>
Tensor<T> const_tensor(Shape dims, T value) {
  return Tensor<T>::full(std::move(dims), value, true);
}

template <typename T>
LayerNormWeights<T> init_layer_norm(std::size_t d) {
  return {const_tensor<T>({d}, T(1)), const_tensor<T>({d}, T(0))};
}

template <typename T>
AttentionWeights<T> init_attention(std::size_t d, double std, RngStream& rng) {
  AttentionWeights<T> w;
  w.wq = normal_tensor<T>({d, d}, std, rng);
  w.bq = const_tensor<T>({d}, T(0));
  w.wk = normal_tensor<T>({d, d}, std, rng);
  w.wv = normal_tensor<T>({d, d}, std, rng);
  w.bv = const_tensor<T>({d}, T(0));
  w.wo = normal_tensor<T>({d, d}, std, rng);
  w.bo = const_tensor<T>({d}, T(0));
  return w;
}

template <typename T>
FeedForwardWeights<T> init_ffn(std::size_t d, std::size_t hidden, double std, RngStream& rng) {
  return {normal_tensor<T>({d, hidden}, std, rng), const_tensor<T>({hidden}, T(0)),
          normal_tensor<T>({hidden, d}, std, rng), const_tensor<T>({d}, T(0))};
}

template <typename T>
void name_layer_norm(std::vector<NamedTensor<T>>& out, const std::string& prefix,
                     const LayerNormWeights<T>& w) {
  out.push_back({prefix + ".gain", w.gain});
  out.push_back({prefix + ".bias", w.bias});
}

template <typename T>
void name_attention(std::vector<NamedTensor<T>>& out, const std::string& prefix,
                    const AttentionWeights<T>& w) {
  out.push_back({prefix + ".wq", w.wq});
  out.push_back({prefix + ".bq", w.bq});
  out.push_back({prefix + ".wk", w.wk});
  out.push_back({prefix + ".wv", w.wv});
  out.push_back({prefix + ".bv", w.bv});
  out.push_back({prefix + ".wo", w.wo});
  out.push_back({prefix + ".bo", w.bo});
}

template <typename T>
void name_ffn(std::vector<NamedTensor<T>>& out, const std::string& prefix,
              const FeedForwardWeights<T>& w) {
  out.push_back({prefix + ".w1", w.w1});
  out.push_back({prefix + ".b1", w.b1});
  out.push_back({prefix + ".w2", w.w2});
  out.push_back({prefix + ".b2", w.b2});
}

template <typename T>
Tensor<T> internal_dropout(const Tensor<T>& x, const ModelConfig& config, bool training,
                           const RngStream& rng) {
  if (!training || config.internal_dropout == 0.0) return x;
  return ops::dropout(x, config.internal_dropout, rng).output;
}

template <typename T>
Tensor<T> feed_forward(const FeedForwardWeights<T>& w, const Tensor<T>& x) {
  auto h = ops::gelu(ops::add_bias(ops::matmul(x, w.w1), w.b1));
  return ops::add_bias(ops::matmul(h, w.w2), w.b2);
}

template <typename T>
Tensor<T> apply_layer_norm(const LayerNormWeights<T>& w, const Tensor<T>& x) {
  return ops::layer_norm(x, w.gain, w.bias);
}

}  // namespace

template <typename T>
ModelParams<T> ModelParams<T>::init(const ModelConfig& config, RngStream rng) {
  config.validate();
  const std::size_t d = config.d;
  const double std = config.init_std;
  ModelParams p;
  p.token_embedding = normal_tensor<T>({config.vocab_size, d}, std, rng);
  p.encoder_positions = normal_tensor<T>({config.encoder_length(), d}, std, rng);
  p.decoder_positions = normal_tensor<T>({config.max_len, d}, std, rng);
  for (std::size_t i = 0; i < config.enc_layers; ++i) {
    EncoderLayer<T> layer;
    layer.ln_attn = init_layer_norm<T>(d);
    layer.self_attn = init_attention<T>(d, std, rng);
    layer.ln_ffn = init_layer_norm<T>(d);
    layer.ffn = init_ffn<T>(d, d * config.ffn_mult, std, rng);
    p.encoder.push_back(std::move(layer));
  }
  p.encoder_final = init_layer_norm<T>(d);
  for (std::size_t i = 0; i < config.dec_layers; ++i) {
    DecoderLayer<T> layer;
    layer.ln_self = init_layer_norm<T>(d);
    layer.self_attn = init_attention<T>(d, std, rng);
    layer.ln_cross = init_layer_norm<T>(d);
    layer.cross_attn = init_attention<T>(d, std, rng);
    layer.ln_ffn = init_layer_norm<T>(d);
    layer.ffn = init_ffn<T>(d, d * config.ffn_mult, std, rng);
    p.decoder.push_back(std::move(layer));
  }
  p.decoder_final = init_layer_norm<T>(d);
  p.output_weight = normal_tensor<T>({d, config.vocab_size}, std, rng);
  p.output_bias = const_tensor<T>({config.vocab_size}, T(0));
  return p;
}

template <typename T>
std::vector<NamedTensor<T>> ModelParams<T>::named() const {
  std::vector<NamedTensor<T>> out;
  out.push_back({"embed.token", token_embedding});
  out.push_back({"embed.enc_pos", encoder_positions});
  out.push_back({"embed.dec_pos", decoder_positions});
  for (std::size_t i = 0; i < encoder.size(); ++i) {
    const std::string prefix = "enc." + std::to_string(i);
    name_layer_norm(out, prefix + ".ln_attn", encoder[i].ln_attn);
    name_attention(out, prefix + ".self", encoder[i].self_attn);
    name_layer_norm(out, prefix + ".ln_ffn", encoder[i].ln_ffn);
    name_ffn(out, prefix + ".ffn", encoder[i].ffn);
  }
  name_layer_norm(out, "enc.final", encoder_final);
  for (std::size_t i = 0; i < decoder.size(); ++i) {
    const std::string prefix = "dec." + std::to_string(i);
    name_layer_norm(out, prefix + ".ln_self", decoder[i].ln_self);
    name_attention(out, prefix + ".self", decoder[i].self_attn);
    name_layer_norm(out, prefix + ".ln_cross", decoder[i].ln_cross);
    name_attention(out, prefix + ".cross", decoder[i].cross_attn);
    name_layer_norm(out, prefix + ".ln_ffn", decoder[i].ln_ffn);
    name_ffn(out, prefix + ".ffn", decoder[i].ffn);
  }
  name_layer_norm(out, "dec.final", decoder_final);
  out.push_back({"head.weight", output_weight});
  out.push_back({"head.bias", output_bias});
  return out;
}

template <typename T>
template <typename U>
ModelParams<U> ModelParams<T>::cast(const ModelConfig& config) const {
  // Same structure, then copy values by name order.
  ModelConfig shape_only = config;
  ModelParams<U> out = ModelParams<U>::init(shape_only, RngStream(0));
  const auto src = named();
  auto dst = out.named();
  for (std::size_t i = 0; i < src.size(); ++i) {
    if (src[i].tensor.dims() != dst[i].tensor.dims()) {
      throw InvalidShape("cast: parameter " + src[i].name + " does not match config");
    }
    auto sv = src[i].tensor.values();
    auto dv = dst[i].tensor.mutable_values();
    for (std::size_t j = 0; j < sv.size(); ++j) dv[j] = static_cast<U>(sv[j]);
  }
  return out;
}

bool is_decoder_parameter(std::string_view name) {
  return name.starts_with("dec.") || name.starts_with("head.") || name == "embed.dec_pos";
}

WrappedSentence wrap_with_template(std::span<const TokenId> ids, const text::Vocabulary& vocab,
                                   std::size_t max_len) {
  if (ids.empty()) throw EmptySentence("wrap_with_template: empty sentence");
  const std::size_t n = std::min(ids.size(), max_len);
  WrappedSentence w;
  w.ids.assign(ids.begin(), ids.begin() + static_cast<std::ptrdiff_t>(n));
  w.ids.push_back(vocab.means_id());
  w.ids.push_back(text::kMaskId);
  w.ids.push_back(vocab.period_id());
  w.mask_position = n + 1;
  return w;
}

EncoderBatch make_encoder_batch(std::span<const TokenSequence> sentences,
                                const text::Vocabulary& vocab, const ModelConfig& config) {
  if (sentences.empty()) throw EmptyInput("make_encoder_batch: no sentences");
  std::vector<TokenSequence> wrapped;
  EncoderBatch out;
  wrapped.reserve(sentences.size());
  for (const auto& s : sentences) {
    auto w = wrap_with_template(s, vocab, config.max_len);
    out.pool_positions.push_back(config.pooling == Pooling::kMaskToken ? w.mask_position : 0);
    wrapped.push_back(std::move(w.ids));
  }
  out.batch = text::make_batch(wrapped, config.encoder_length(), /*fit_to_longest=*/true);
  return out;
}

template <typename T>
Tensor<T> multi_head_attention(const AttentionWeights<T>& w, const Tensor<T>& queries,
                               const Tensor<T>& memory, std::span<const std::uint8_t> memory_mask,
                               std::size_t heads) {
  if (queries.rank() != 3 || memory.rank() != 3 || queries.dim(0) != memory.dim(0) ||
      queries.dim(2) != memory.dim(2) || queries.dim(2) != w.wq.dim(0)) {
    throw InvalidShape("attention: queries " + shape_string(queries.dims()) + " memory " +
                       shape_string(memory.dims()) + " weights " + shape_string(w.wq.dims()));
  }
  if (memory.dim(1) == 0 || queries.dim(1) == 0) throw InvalidShape("attention: empty sequence");
  const std::size_t d = queries.dim(2);
  if (heads == 0 || d % heads != 0) {
    throw InvalidParameter("attention: d not divisible by head count");
  }
  const double inv_sqrt = 1.0 / std::sqrt(static_cast<double>(d / heads));

  auto q = ops::split_heads(ops::add_bias(ops::matmul(queries, w.wq), w.bq), heads);
  auto k = ops::split_heads(ops::matmul(memory, w.wk), heads);
  auto v = ops::split_heads(ops::add_bias(ops::matmul(memory, w.wv), w.bv), heads);
  auto scores = ops::scale(ops::batched_matmul(q, k, /*transpose_b=*/true), inv_sqrt);
  if (!memory_mask.empty()) scores = ops::mask_keys(scores, memory_mask, heads);
  auto attended = ops::merge_heads(ops::batched_matmul(ops::softmax_rows(scores), v, false), heads);
  return ops::add_bias(ops::matmul(attended, w.wo), w.bo);
}

template <typename T>
Tensor<T> cross_attention(const AttentionWeights<T>& w, const Tensor<T>& memory,
                          const Tensor<T>& queries, std::size_t heads) {
  return multi_head_attention(w, queries, memory, {}, heads);
}

template <typename T>
Tensor<T> encode(const EncoderBatch& input, const ModelParams<T>& params, const ModelConfig& config,
                 bool training, RngStream rng) {
  const auto& batch = input.batch;
  if (input.pool_positions.size() != batch.rows) {
    throw ContractViolation("encode: one pooling position per row required");
  }
  for (std::size_t b = 0; b < batch.rows; ++b) {
    if (input.pool_positions[b] >= batch.lengths[b]) {
      throw ContractViolation("encode: pooling position " + std::to_string(input.pool_positions[b]) +
                              " outside row of length " + std::to_string(batch.lengths[b]));
    }
  }
  if (batch.width > config.encoder_length()) {
    throw InvalidShape("encode: batch width exceeds encoder length");
  }
  const std::size_t d = config.d;
  auto x = ops::reshape(ops::embedding(params.token_embedding, batch.ids),
                        Shape{batch.rows, batch.width, d});
  x = ops::add_positional(x, params.encoder_positions);
  x = internal_dropout(x, config, training, rng.fork("embed"));
  for (std::size_t i = 0; i < params.encoder.size(); ++i) {
    const auto& layer = params.encoder[i];
    const RngStream layer_rng = rng.fork(i + 1);
    auto h = apply_layer_norm(layer.ln_attn, x);
    h = multi_head_attention(layer.self_attn, h, h, batch.mask, config.enc_heads);
    x = ops::add(x, internal_dropout(h, config, training, layer_rng.fork("attn")));
    h = feed_forward(layer.ffn, apply_layer_norm(layer.ln_ffn, x));
    x = ops::add(x, internal_dropout(h, config, training, layer_rng.fork("ffn")));
  }
  x = apply_layer_norm(params.encoder_final, x);
  return ops::gather_positions(x, input.pool_positions);
}

template <typename T>
Tensor<T> decode_denoise(const Tensor<T>& rep, const text::SentenceBatch& noisy,
                         const ModelParams<T>& params, const ModelConfig& config, double p,
                         bool training, RngStream rng, std::span<const RngStream> row_streams,
                         DecodeTrace<T>* trace) {
  const std::size_t d = config.d;
  if (rep.rank() != 2 || rep.dim(1) != d || rep.dim(0) != noisy.rows) {
    throw InvalidShape("decode_denoise: representation " + shape_string(rep.dims()) +
                       " does not match batch of " + std::to_string(noisy.rows) + " and d=" +
                       std::to_string(d));
  }
  if (noisy.width > config.max_len) throw InvalidShape("decode_denoise: batch wider than max_len");

  auto h = ops::reshape(ops::embedding(params.token_embedding, noisy.ids),
                        Shape{noisy.rows, noisy.width, d});
  h = ops::add_positional(h, params.decoder_positions);
  h = noise::continuous_corrupt(h, p, training, rng.fork("continuous"), row_streams);

  // Memory of length one per sentence.
  const auto memory = ops::reshape(rep, Shape{noisy.rows, 1, d});
  for (std::size_t i = 0; i < params.decoder.size(); ++i) {
    const auto& layer = params.decoder[i];
    const RngStream layer_rng = rng.fork(i + 1);
    auto a = apply_layer_norm(layer.ln_self, h);
    // Only padding is masked: every position sees the whole noisy sentence.
    a = multi_head_attention(layer.self_attn, a, a, noisy.mask, config.dec_heads);
    h = ops::add(h, internal_dropout(a, config, training, layer_rng.fork("self")));
    auto c = cross_attention(layer.cross_attn, memory, apply_layer_norm(layer.ln_cross, h),
                             config.dec_heads);
    if (trace != nullptr) trace->cross_attention_outputs.push_back(c);
    h = ops::add(h, internal_dropout(c, config, training, layer_rng.fork("cross")));
    auto f = feed_forward(layer.ffn, apply_layer_norm(layer.ln_ffn, h));
    h = ops::add(h, internal_dropout(f, config, training, layer_rng.fork("ffn")));
  }
  h = apply_layer_norm(params.decoder_final, h);
  return ops::add_bias(ops::matmul(h, params.output_weight), params.output_bias);
}

Tensor<float> embed_sentences(std::span<const std::string> texts, const ModelParams<float>& params,
                              const ModelConfig& config, const text::Vocabulary& vocab,
                              std::size_t batch_size) {
  if (texts.empty()) throw EmptyInput("embed_sentences: no sentences");
  if (vocab.size() != config.vocab_size) {
    throw InvalidParameter("embed_sentences: vocabulary has " + std::to_string(vocab.size()) +
                           " entries, model expects " + std::to_string(config.vocab_size));
  }
  NoGradGuard no_grad;
  std::vector<float> out;
  out.reserve(texts.size() * config.d);
  for (std::size_t start = 0; start < texts.size(); start += batch_size) {
    const std::size_t end = std::min(texts.size(), start + batch_size);
    std::vector<TokenSequence> seqs;
    for (std::size_t i = start; i < end; ++i) seqs.push_back(text::tokenize(texts[i], vocab));
    const auto batch = make_encoder_batch(seqs, vocab, config);
    const auto reps = encode(batch, params, config, /*training=*/false, RngStream(0));
    out.insert(out.end(), reps.values().begin(), reps.values().end());
  }
  return Tensor<float>(Shape{texts.size(), config.d}, std::move(out));
}

#define DENOSENT_INSTANTIATE_MODEL(T)                                                          \
  template struct ModelParams<T>;                                                              \
  template Tensor<T> multi_head_attention(const AttentionWeights<T>&, const Tensor<T>&,        \
                                          const Tensor<T>&, std::span<const std::uint8_t>,     \
                                          std::size_t);                                        \
  template Tensor<T> cross_attention(const AttentionWeights<T>&, const Tensor<T>&,             \
                                     const Tensor<T>&, std::size_t);                           \
  template Tensor<T> encode(const EncoderBatch&, const ModelParams<T>&, const ModelConfig&,    \
                            bool, RngStream);                                                  \
  template Tensor<T> decode_denoise(const Tensor<T>&, const text::SentenceBatch&,              \
                                    const ModelParams<T>&, const ModelConfig&, double, bool,   \
                                    RngStream, std::span<const RngStream>, DecodeTrace<T>*);

DENOSENT_INSTANTIATE_MODEL(float)
DENOSENT_INSTANTIATE_MODEL(double)

#undef DENOSENT_INSTANTIATE_MODEL

template ModelParams<double> ModelParams<float>::cast<double>(const ModelConfig&) const;
template ModelParams<float> ModelParams<double>::cast<float>(const ModelConfig&) const;
template ModelParams<float> ModelParams<float>::cast<float>(const ModelConfig&) const;

}  // namespace denosent::model
