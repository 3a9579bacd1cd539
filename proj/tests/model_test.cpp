#include <gtest/gtest.h>

#include <cmath>
#include <set>

#include "denosent/errors.hpp"
#include "denosent/model.hpp"
#include "denosent/ops.hpp"

namespace denosent::model {
namespace {

using text::TokenSequence;

text::Vocabulary toy_vocab() {
  return text::Vocabulary::from_tokens({"[PAD]", "[UNK]", "[MASK]", "means", ".", "cats", "purr",
                                        "dogs", "bark", "loudly", "hi", "birds", "sing"});
}

ModelConfig small_config(std::size_t vocab_size) {
  ModelConfig c;
  c.d = 16;
  c.enc_layers = 2;
  c.dec_layers = 2;
  c.enc_heads = 2;
  c.dec_heads = 1;
  c.vocab_size = vocab_size;
  c.max_len = 8;
  c.init_std = 0.2;
  return c;
}

template <typename T>
Tensor<T> random_tensor(Shape dims, std::uint64_t seed) {
  RngStream rng(seed, 5);
  std::vector<T> v(shape_size(dims));
  for (auto& x : v) x = static_cast<T>(rng.normal());
  return Tensor<T>(std::move(dims), std::move(v));
}

double max_abs_diff(std::span<const float> a, std::span<const float> b) {
  double m = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(static_cast<double>(a[i]) - b[i]));
  return m;
}

TEST(Template, WrapsWithMeansMaskPeriod) {
  const auto v = toy_vocab();
  const TokenSequence ids{v.id("cats"), v.id("purr")};
  const auto w = wrap_with_template(ids, v, 8);
  EXPECT_EQ(w.ids, (TokenSequence{v.id("cats"), v.id("purr"), v.means_id(), text::kMaskId, v.period_id()}));
  EXPECT_EQ(w.mask_position, 3u);
  EXPECT_EQ(wrap_with_template(TokenSequence{v.id("hi")}, v, 8).mask_position, 2u);
}

TEST(Template, FullLengthAndTruncation) {
  const auto v = toy_vocab();
  const TokenSequence full(8, v.id("hi"));
  const auto w = wrap_with_template(full, v, 8);
  EXPECT_EQ(w.ids.size(), 11u);
  EXPECT_EQ(w.mask_position, 9u);
  const TokenSequence longer(12, v.id("hi"));
  EXPECT_EQ(wrap_with_template(longer, v, 8).ids.size(), 11u);
}

TEST(Config, Validation) {
  auto c = small_config(13);
  c.dec_heads = 3;
  EXPECT_THROW(c.validate(), InvalidParameter);
  c = small_config(13);
  c.enc_heads = 5;
  EXPECT_THROW(c.validate(), InvalidParameter);
  EXPECT_NO_THROW(small_config(13).validate());
}

TEST(Params, NamesAreUniqueAndCoverDecoder) {
  const auto config = small_config(13);
  const auto params = ModelParams<float>::init(config, RngStream(1));
  std::set<std::string> names;
  std::size_t decoder = 0;
  for (const auto& p : params.named()) {
    EXPECT_TRUE(names.insert(p.name).second) << p.name;
    decoder += is_decoder_parameter(p.name);
  }
  EXPECT_TRUE(names.count("embed.token"));
  EXPECT_TRUE(names.count("head.weight"));
  EXPECT_GT(decoder, 0u);
  EXPECT_FALSE(is_decoder_parameter("embed.token"));
  EXPECT_FALSE(is_decoder_parameter("enc.0.self.wq"));
  EXPECT_TRUE(is_decoder_parameter("dec.1.cross.wk"));
}

TEST(Encode, ShapeAndEvalDeterminism) {
  const auto v = toy_vocab();
  const auto config = small_config(v.size());
  const auto params = ModelParams<float>::init(config, RngStream(2));
  const std::vector<TokenSequence> seqs{{v.id("cats"), v.id("purr")}, {v.id("dogs"), v.id("bark"), v.id("loudly")}};
  const auto batch = make_encoder_batch(seqs, v, config);
  const auto a = encode(batch, params, config, false, RngStream(1));
  const auto b = encode(batch, params, config, false, RngStream(2));
  EXPECT_EQ(a.dims(), (Shape{2, 16}));
  EXPECT_EQ(max_abs_diff(a.values(), b.values()), 0.0);
}

TEST(Encode, PaddingExtensionInvariance) {
  const auto v = toy_vocab();
  const auto config = small_config(v.size());
  const auto params = ModelParams<float>::init(config, RngStream(3));
  const std::vector<TokenSequence> seqs{{v.id("cats"), v.id("purr")}};
  const auto tight = make_encoder_batch(seqs, v, config);
  EncoderBatch wide = tight;
  std::vector<TokenSequence> wrapped{wrap_with_template(seqs[0], v, config.max_len).ids};
  wide.batch = text::make_batch(wrapped, config.encoder_length());
  ASSERT_GT(wide.batch.width, tight.batch.width);
  const auto a = encode(tight, params, config, false, RngStream(1));
  const auto b = encode(wide, params, config, false, RngStream(1));
  EXPECT_LT(max_abs_diff(a.values(), b.values()), 1e-5);
}

TEST(Encode, PoolPositionOutOfRange) {
  const auto v = toy_vocab();
  const auto config = small_config(v.size());
  const auto params = ModelParams<float>::init(config, RngStream(3));
  const std::vector<TokenSequence> seqs{{v.id("cats")}};
  auto batch = make_encoder_batch(seqs, v, config);
  batch.pool_positions[0] = batch.batch.width + 3;
  EXPECT_THROW(encode(batch, params, config, false, RngStream(1)), ContractViolation);
}

TEST(CrossAttention, SingleMemorySlotIsPositionConstantAndQueryInvariant) {
  const auto config = small_config(13);
  const auto params = ModelParams<float>::init(config, RngStream(4));
  const auto& w = params.decoder[0].cross_attn;
  const auto memory = random_tensor<float>({2, 1, 16}, 1);
  const auto q1 = random_tensor<float>({2, 5, 16}, 2);
  const auto q2 = random_tensor<float>({2, 5, 16}, 3);
  const auto o1 = cross_attention(w, memory, q1, 1);
  const auto o2 = cross_attention(w, memory, q2, 1);
  for (std::size_t b = 0; b < 2; ++b) {
    for (std::size_t j = 0; j < 5; ++j) {
      for (std::size_t k = 0; k < 16; ++k) {
        EXPECT_EQ(o1.at((b * 5 + j) * 16 + k), o1.at((b * 5) * 16 + k));
      }
    }
  }
  EXPECT_LT(max_abs_diff(o1.values(), o2.values()), 1e-6);
}

// Direct float64 evaluation of softmax(q k^T / sqrt(d)) v with projections.
std::vector<double> attention_oracle(const AttentionWeights<double>& w, const Tensor<double>& mem,
                                     const Tensor<double>& qry, std::size_t d) {
  const std::size_t m = mem.dim(0), n = qry.dim(0);
  auto project = [&](const Tensor<double>& x, const Tensor<double>& W, const Tensor<double>* b, std::size_t r) {
    std::vector<double> out(d);
    for (std::size_t c = 0; c < d; ++c) {
      out[c] = b ? b->at(c) : 0.0;
      for (std::size_t i = 0; i < d; ++i) out[c] += x.at(r * d + i) * W.at(i * d + c);
    }
    return out;
  };
  std::vector<std::vector<double>> k(m), v(m);
  for (std::size_t r = 0; r < m; ++r) {
    k[r] = project(mem, w.wk, nullptr, r);
    v[r] = project(mem, w.wv, &w.bv, r);
  }
  std::vector<double> out;
  for (std::size_t r = 0; r < n; ++r) {
    const auto q = project(qry, w.wq, &w.bq, r);
    std::vector<double> s(m);
    double mx = -1e300;
    for (std::size_t t = 0; t < m; ++t) {
      s[t] = 0.0;
      for (std::size_t c = 0; c < d; ++c) s[t] += q[c] * k[t][c];
      s[t] /= std::sqrt(static_cast<double>(d));
      mx = std::max(mx, s[t]);
    }
    double z = 0.0;
    for (auto& x : s) z += (x = std::exp(x - mx));
    std::vector<double> ctx(d, 0.0);
    for (std::size_t t = 0; t < m; ++t)
      for (std::size_t c = 0; c < d; ++c) ctx[c] += s[t] / z * v[t][c];
    for (std::size_t c = 0; c < d; ++c) {
      double o = w.bo.at(c);
      for (std::size_t i = 0; i < d; ++i) o += ctx[i] * w.wo.at(i * d + c);
      out.push_back(o);
    }
  }
  return out;
}

TEST(CrossAttention, TwoSlotRandomCaseMatchesOracle) {
  auto config = small_config(13);
  config.d = 8;
  config.enc_heads = 1;
  const auto params = ModelParams<float>::init(config, RngStream(5)).cast<double>(config);
  AttentionWeights<double> w = params.decoder[0].cross_attn;
  w.bq = random_tensor<double>({8}, 30);
  w.bo = random_tensor<double>({8}, 31);
  const auto mem = random_tensor<double>({1, 2, 8}, 6);
  const auto qry = random_tensor<double>({1, 3, 8}, 7);
  const auto got = cross_attention(w, mem, qry, 1);
  const auto expect = attention_oracle(w, ops::reshape(mem, {2, 8}), ops::reshape(qry, {3, 8}), 8);
  for (std::size_t i = 0; i < expect.size(); ++i) EXPECT_NEAR(got.at(i), expect[i], 1e-12);
}

TEST(CrossAttention, EqualKeysSplitWeightEvenly) {
  auto config = small_config(13);
  const auto params = ModelParams<float>::init(config, RngStream(6)).cast<double>(config);
  auto w = params.decoder[0].cross_attn;
  // Identity value/output projections expose the attention-weighted mix of
  // the memory rows; equal keys come from a zero key projection.
  w.wk = Tensor<double>::zeros({16, 16});
  w.wv = Tensor<double>::zeros({16, 16});
  w.wo = Tensor<double>::zeros({16, 16});
  for (std::size_t i = 0; i < 16; ++i) {
    w.wv.mutable_values()[i * 16 + i] = 1.0;
    w.wo.mutable_values()[i * 16 + i] = 1.0;
  }
  const auto mem = random_tensor<double>({1, 2, 16}, 8);
  const auto out = cross_attention(w, mem, random_tensor<double>({1, 4, 16}, 9), 1);
  for (std::size_t j = 0; j < 4; ++j) {
    for (std::size_t c = 0; c < 16; ++c) {
      EXPECT_NEAR(out.at(j * 16 + c), 0.5 * (mem.at(c) + mem.at(16 + c)), 1e-12);
    }
  }
}

struct DecodeFixture : ::testing::Test {
  text::Vocabulary vocab = toy_vocab();
  ModelConfig config = small_config(vocab.size());
  ModelParams<float> params = ModelParams<float>::init(config, RngStream(7));
  std::vector<TokenSequence> noisy_rows{{5, 6, 7, 8}, {9, 10, 11}};
  text::SentenceBatch noisy = text::make_batch(noisy_rows, 6);
};

TEST_F(DecodeFixture, LogitShape) {
  const auto rep = random_tensor<float>({2, 16}, 1);
  const auto logits = decode_denoise(rep, noisy, params, config, 0.825, true, RngStream(1));
  EXPECT_EQ(logits.dims(), (Shape{2, 6, vocab.size()}));
}

TEST_F(DecodeFixture, RepresentationReachesTheOutput) {
  const auto a = decode_denoise(random_tensor<float>({2, 16}, 1), noisy, params, config, 0.825, false, RngStream(1));
  const auto b = decode_denoise(random_tensor<float>({2, 16}, 2), noisy, params, config, 0.825, false, RngStream(1));
  EXPECT_GT(max_abs_diff(a.values(), b.values()), 0.0);
}

TEST_F(DecodeFixture, CrossAttentionSublayerIsPositionConstant) {
  DecodeTrace<float> trace;
  decode_denoise(random_tensor<float>({2, 16}, 1), noisy, params, config, 0.825, true, RngStream(4), {}, &trace);
  ASSERT_EQ(trace.cross_attention_outputs.size(), config.dec_layers);
  for (const auto& t : trace.cross_attention_outputs) {
    for (std::size_t b = 0; b < 2; ++b)
      for (std::size_t j = 0; j < 6; ++j)
        for (std::size_t k = 0; k < 16; ++k)
          EXPECT_LT(std::abs(t.at((b * 6 + j) * 16 + k) - t.at(b * 6 * 16 + k)), 1e-6);
  }
}

TEST_F(DecodeFixture, EarlierPositionsSeeLaterTokens) {
  const auto rep = random_tensor<float>({2, 16}, 1);
  const auto base = decode_denoise(rep, noisy, params, config, 0.0, false, RngStream(1));
  auto changed = noisy;
  changed.ids[3] = 12;  // last real token of row 0
  const auto after = decode_denoise(rep, changed, params, config, 0.0, false, RngStream(1));
  const std::size_t V = vocab.size();
  double diff = 0.0;
  for (std::size_t i = 0; i < V; ++i) diff = std::max(diff, std::abs(double(base.at(i)) - after.at(i)));
  EXPECT_GT(diff, 1e-6) << "position 0 ignored a later token";
}

TEST_F(DecodeFixture, WrongRepresentationWidth) {
  EXPECT_THROW(decode_denoise(random_tensor<float>({2, 8}, 1), noisy, params, config, 0.5, false, RngStream(1)),
               InvalidShape);
}

TEST(EmbedSentences, ShapeDuplicatesAndBatchInvariance) {
  const auto v = toy_vocab();
  const auto config = small_config(v.size());
  const auto params = ModelParams<float>::init(config, RngStream(8));
  EXPECT_EQ(embed_sentences(std::vector<std::string>{"cats purr"}, params, config, v).dims(), (Shape{1, 16}));

  const std::vector<std::string> eight{"cats purr", "dogs bark loudly", "hi", "birds sing .",
                                       "cats purr", "unknown words here", "dogs", "hi hi hi hi hi"};
  const auto batch = embed_sentences(eight, params, config, v);
  for (std::size_t k = 0; k < 16; ++k) EXPECT_EQ(batch.at(k), batch.at(4 * 16 + k));
  for (std::size_t i = 0; i < eight.size(); ++i) {
    const auto alone = embed_sentences(std::vector<std::string>{eight[i]}, params, config, v);
    for (std::size_t k = 0; k < 16; ++k) EXPECT_NEAR(alone.at(k), batch.at(i * 16 + k), 1e-5);
  }
  EXPECT_THROW(embed_sentences(std::vector<std::string>{}, params, config, v), EmptyInput);
}

}  // namespace
}  // namespace denosent::model
