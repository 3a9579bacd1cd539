#include <gtest/gtest.h>
#include <algorithm>
#include <set>

#include <cmath>
#include <cstring>
#include <fstream>
#include <sstream>

#include "denosent/checkpoint.hpp"
#include "denosent/errors.hpp"
#include "denosent/trainer.hpp"
#include "temp_dir.hpp"
#include "toy_corpus.hpp"

namespace denosent::training {
namespace {

using testing::TempDir;

std::vector<NamedTensor<double>> scalar_param(double value, double grad) {
  Tensor<double> p({1}, {value}, true);
  p.mutable_grad()[0] = grad;
  return {{"w", p}};
}

TEST(AdamW, ZeroGradLeavesParamsAndCountsStep) {
  auto params = scalar_param(0.5, 0.0);
  auto state = OptimizerState<double>::create(params, 1e-3, 0.0);
  adamw_step(params, state);
  EXPECT_EQ(params[0].tensor.at(0), 0.5);
  EXPECT_EQ(state.t, 1u);
}

TEST(AdamW, FirstStepMovesByLearningRate) {
  std::vector<double> values{0.1, -2.0, 3.0};
  Tensor<double> p({3}, values, true);
  const double g[] = {0.5, -4.0, 1e-3};
  for (int i = 0; i < 3; ++i) p.mutable_grad()[i] = g[i];
  std::vector<NamedTensor<double>> params{{"p", p}};
  auto state = OptimizerState<double>::create(params, 1e-2, 0.0);
  adamw_step(params, state);
  for (int i = 0; i < 3; ++i) {
    EXPECT_NEAR(p.at(i), values[i] - 1e-2 * (g[i] > 0 ? 1 : -1), 1e-6);
  }
}

TEST(AdamW, TwoStepsMatchScalarTrace) {
  const double lr = 0.01, wd = 0.1, b1 = 0.9, b2 = 0.999, eps = 1e-8;
  const double grads[] = {0.3, -0.7};
  double p = 1.5, m = 0.0, v = 0.0;
  for (int t = 1; t <= 2; ++t) {
    p -= lr * wd * p;
    m = b1 * m + (1 - b1) * grads[t - 1];
    v = b2 * v + (1 - b2) * grads[t - 1] * grads[t - 1];
    const double mh = m / (1 - std::pow(b1, t));
    const double vh = v / (1 - std::pow(b2, t));
    p -= lr * mh / (std::sqrt(vh) + eps);
  }
  auto params = scalar_param(1.5, grads[0]);
  auto state = OptimizerState<double>::create(params, lr, wd);
  adamw_step(params, state);
  params[0].tensor.mutable_grad()[0] = grads[1];
  adamw_step(params, state);
  EXPECT_NEAR(params[0].tensor.at(0), p, 1e-10);
  EXPECT_NEAR(state.m[0][0], m, 1e-10);
  EXPECT_NEAR(state.v[0][0], v, 1e-10);
}

TEST(AdamW, ZeroLearningRateIgnoresWeightDecay) {
  auto params = scalar_param(2.0, 1.0);
  auto state = OptimizerState<double>::create(params, 0.0, 0.5);
  adamw_step(params, state);
  EXPECT_EQ(params[0].tensor.at(0), 2.0);
}

TEST(AdamW, NonFiniteGradientNamesParameterAndChangesNothing) {
  auto params = scalar_param(2.0, std::nan(""));
  auto state = OptimizerState<double>::create(params, 0.1, 0.0);
  try {
    adamw_step(params, state);
    FAIL();
  } catch (const NonFinite& e) {
    EXPECT_NE(std::string(e.what()).find("w"), std::string::npos);
  }
  EXPECT_EQ(params[0].tensor.at(0), 2.0);
  EXPECT_EQ(state.t, 0u);
}

TEST(ClipGradNorm, RescalesToMaxNorm) {
  Tensor<double> p({2}, {0, 0}, true);
  p.mutable_grad()[0] = 3.0;
  p.mutable_grad()[1] = 4.0;
  std::vector<NamedTensor<double>> params{{"p", p}};
  EXPECT_DOUBLE_EQ(clip_grad_norm(params, 1.0), 5.0);
  EXPECT_NEAR(global_grad_norm(params), 1.0, 1e-12);
  EXPECT_DOUBLE_EQ(clip_grad_norm(params, 0.0), 1.0);  // disabled
}

// ---- trainer ---------------------------------------------------------------

struct TinyRun {
  std::vector<std::string> corpus = testing::toy_corpus(64, 3);
  text::Vocabulary vocab = text::Vocabulary::build(corpus, 1, 0);
  noise::SynonymTable synonyms = testing::toy_synonyms();
  model::ModelConfig model;
  noise::NoiseConfig noise;
  TrainConfig train;

  TinyRun() {
    model.d = 16;
    model.enc_layers = 1;
    model.dec_layers = 1;
    model.enc_heads = 2;
    model.vocab_size = vocab.size();
    model.max_len = 16;
    train.batch_size = 4;
    train.steps = 6;
    train.lr = 1e-3;
    train.eval_every = 3;
    train.seed = 5;
  }
  TrainingResources resources() const { return {&vocab, nullptr, &synonyms}; }
  Trainer make() const { return Trainer(model, noise, train, resources()); }
};

TEST(TrainConfig, Validation) {
  TrainConfig c;
  c.batch_size = 1;
  EXPECT_THROW(c.validate(), InvalidParameter);
  c.w_contrastive = 0.0;
  EXPECT_NO_THROW(c.validate());
  c.w_denoising = 0.0;
  EXPECT_THROW(c.validate(), InvalidParameter);
  c = TrainConfig{};
  c.steps = 0;
  EXPECT_THROW(c.validate(), InvalidParameter);
}

TEST(Trainer, StepReportsConsistentBreakdown) {
  TinyRun run;
  auto trainer = run.make();
  const auto batch = trainer.batch_for_step(run.corpus, 0);
  const auto m = trainer.train_step(batch);
  EXPECT_EQ(m.step, 1u);
  EXPECT_NEAR(m.combined, m.contrastive + m.denoising, 1e-5);
  EXPECT_GE(m.contrastive, 0.0);
  EXPECT_GT(m.denoising, 0.0);
  EXPECT_GE(m.token_accuracy, 0.0);
  EXPECT_LE(m.token_accuracy, 1.0);
  EXPECT_EQ(trainer.step(), 1u);
  EXPECT_EQ(trainer.optimizer().t, 1u);
}

TEST(Trainer, ContrastiveOnlyLeavesDecoderWithoutGradient) {
  TinyRun run;
  run.train.w_denoising = 0.0;
  auto trainer = run.make();
  const auto before = trainer.params().named();
  std::vector<std::vector<float>> snapshot;
  for (const auto& p : before) snapshot.emplace_back(p.tensor.values().begin(), p.tensor.values().end());
  trainer.train_step(trainer.batch_for_step(run.corpus, 0));
  const auto after = trainer.params().named();
  bool encoder_moved = false;
  for (std::size_t i = 0; i < after.size(); ++i) {
    const bool same = std::equal(snapshot[i].begin(), snapshot[i].end(), after[i].tensor.values().begin());
    if (model::is_decoder_parameter(after[i].name)) {
      ASSERT_TRUE(after[i].tensor.has_grad());
      for (float g : after[i].tensor.grad()) ASSERT_EQ(g, 0.f) << after[i].name;
      EXPECT_TRUE(same) << after[i].name;
    } else {
      encoder_moved |= !same;
    }
  }
  EXPECT_TRUE(encoder_moved);
}

TEST(Trainer, DenoisingOnlyAcceptsSingleSentenceBatches) {
  TinyRun run;
  run.train.w_contrastive = 0.0;
  run.train.batch_size = 1;
  auto trainer = run.make();
  const auto m = trainer.train_step(trainer.batch_for_step(run.corpus, 0));
  EXPECT_EQ(m.contrastive, 0.0);
  EXPECT_GT(m.denoising, 0.0);
}

TEST(Trainer, FreshRunsAreIdentical) {
  TinyRun run;
  auto a = run.make();
  auto b = run.make();
  for (std::uint64_t s = 0; s < 3; ++s) {
    const auto ma = a.train_step(a.batch_for_step(run.corpus, s));
    const auto mb = b.train_step(b.batch_for_step(run.corpus, s));
    EXPECT_EQ(ma.combined, mb.combined);
    EXPECT_EQ(ma.token_accuracy, mb.token_accuracy);
  }
}

TEST(Trainer, BatchesFollowSeededEpochShuffles) {
  TinyRun run;
  const auto trainer = run.make();
  // 16 steps of 4 cover the 64-sentence corpus exactly once.
  std::multiset<std::string> seen;
  for (std::uint64_t s = 0; s < 16; ++s) {
    for (auto& x : trainer.batch_for_step(run.corpus, s)) seen.insert(x);
  }
  EXPECT_EQ(seen, std::multiset<std::string>(run.corpus.begin(), run.corpus.end()));
  EXPECT_EQ(trainer.batch_for_step(run.corpus, 16), run.make().batch_for_step(run.corpus, 16));
  EXPECT_NE(trainer.batch_for_step(run.corpus, 0), trainer.batch_for_step(run.corpus, 16));
}

TEST(Trainer, SingleStepLoopWritesOneRecordAndOneCheckpoint) {
  TinyRun run;
  TempDir dir;
  run.train.steps = 1;
  run.train.checkpoint_path = dir / "model.ckpt";
  auto trainer = run.make();
  std::ostringstream log;
  LoopHooks hooks;
  hooks.metrics = &log;
  const auto result = trainer.train_loop(run.corpus, hooks);
  EXPECT_EQ(result.history.size(), 1u);
  EXPECT_EQ(result.checkpoints_written, 1u);
  EXPECT_TRUE(std::filesystem::exists(run.train.checkpoint_path));
  const auto text = log.str();
  EXPECT_EQ(std::count(text.begin(), text.end(), '\n'), 1);
  EXPECT_EQ(std::count(text.begin(), text.end(), '\t'), 4);
  EXPECT_EQ(text.substr(0, 2), "1\t");
}

TEST(Trainer, ResumeContinuesTheExactTrajectory) {
  TinyRun run;
  TempDir dir;
  auto straight = run.make();
  const auto full = straight.train_loop(run.corpus);

  auto first = run;
  first.train.steps = 3;
  first.train.checkpoint_path = dir / "half.ckpt";
  auto half = first.make();
  half.train_loop(run.corpus);

  auto resumed = Trainer::resume(load_checkpoint(dir / "half.ckpt"), run.noise, run.train, run.resources());
  EXPECT_EQ(resumed.step(), 3u);
  const auto rest = resumed.train_loop(run.corpus);
  ASSERT_EQ(rest.history.size(), 3u);
  for (std::size_t i = 0; i < 3; ++i) {
    EXPECT_EQ(rest.history[i].step, full.history[3 + i].step);
    EXPECT_EQ(rest.history[i].combined, full.history[3 + i].combined);
  }
}

TEST(Trainer, BestCheckpointFollowsEvaluationScore) {
  TinyRun run;
  TempDir dir;
  run.train.eval_every = 2;
  run.train.checkpoint_path = dir / "m.ckpt";
  auto trainer = run.make();
  LoopHooks hooks;
  std::vector<std::uint64_t> asked;
  hooks.evaluate = [&](std::uint64_t step) -> std::optional<double> {
    asked.push_back(step);
    return step == 4 ? 0.9 : 0.1;
  };
  const auto result = trainer.train_loop(run.corpus, hooks);
  EXPECT_EQ(asked, (std::vector<std::uint64_t>{2, 4, 6}));
  EXPECT_EQ(result.best_step, 4u);
  EXPECT_EQ(read_progress(load_checkpoint(dir / "m.ckpt.best")).step, 4u);
  EXPECT_EQ(read_progress(load_checkpoint(dir / "m.ckpt")).step, 6u);
}

TEST(EvaluateDenoising, ReportsAccuracyOverRealTokens) {
  TinyRun run;
  const auto trainer = run.make();
  const std::vector<std::string> held(run.corpus.begin(), run.corpus.begin() + 10);
  const auto a = evaluate_denoising(trainer.params(), run.model, run.noise, run.resources(), held, 4, RngStream(1));
  const auto b = evaluate_denoising(trainer.params(), run.model, run.noise, run.resources(), held, 4, RngStream(1));
  std::size_t tokens = 0;
  for (const auto& s : held) tokens += text::split_words(s).size();
  EXPECT_EQ(a.tokens, tokens);
  EXPECT_EQ(a.token_accuracy, b.token_accuracy);
  EXPECT_GE(a.token_accuracy, 0.0);
  EXPECT_LE(a.token_accuracy, 1.0);
  EXPECT_GT(a.loss, 0.0);
}

// ---- checkpoints -----------------------------------------------------------

TEST(Checkpoint, RoundTripIsBitExact) {
  TinyRun run;
  TempDir dir;
  auto trainer = run.make();
  trainer.train_step(trainer.batch_for_step(run.corpus, 0));
  trainer.save(dir / "c.ckpt");
  const auto loaded = load_checkpoint(dir / "c.ckpt");
  const auto config = read_model_config(loaded);
  EXPECT_EQ(config.d, run.model.d);
  EXPECT_EQ(config.vocab_size, run.model.vocab_size);
  const auto params = restore_params(loaded, config);
  const auto a = trainer.params().named();
  const auto b = params.named();
  ASSERT_EQ(a.size(), b.size());
  for (std::size_t i = 0; i < a.size(); ++i) {
    ASSERT_EQ(a[i].name, b[i].name);
    ASSERT_EQ(0, std::memcmp(a[i].tensor.values().data(), b[i].tensor.values().data(),
                             a[i].tensor.size() * sizeof(float)));
  }
  const auto opt = restore_optimizer(loaded, params);
  ASSERT_TRUE(opt.has_value());
  EXPECT_EQ(opt->t, 1u);
  EXPECT_EQ(opt->m, trainer.optimizer().m);
  EXPECT_EQ(opt->v, trainer.optimizer().v);
  EXPECT_EQ(read_progress(loaded).step, 1u);

  const std::vector<std::string> probe{"the big dog slept .", "a cat saw one bird ."};
  const auto before = model::embed_sentences(probe, trainer.params(), run.model, run.vocab);
  const auto after = model::embed_sentences(probe, params, config, run.vocab);
  ASSERT_EQ(0, std::memcmp(before.values().data(), after.values().data(), before.size() * sizeof(float)));
}

TEST(Checkpoint, TruncatedOrForeignFilesAreRejected) {
  TinyRun run;
  TempDir dir;
  run.make().save(dir / "c.ckpt");
  const auto bytes = testing::read_file(dir / "c.ckpt");
  for (std::size_t cut : {std::size_t{3}, std::size_t{10}, bytes.size() / 2, bytes.size() - 1}) {
    std::ofstream(dir / "cut.ckpt", std::ios::binary) << bytes.substr(0, cut);
    EXPECT_THROW(load_checkpoint(dir / "cut.ckpt"), IncompatibleCheckpoint) << cut;
  }
  auto wrong_version = bytes;
  wrong_version[4] = 9;
  std::ofstream(dir / "v.ckpt", std::ios::binary) << wrong_version;
  EXPECT_THROW(load_checkpoint(dir / "v.ckpt"), IncompatibleCheckpoint);
  dir.write("junk.ckpt", "not a checkpoint at all");
  EXPECT_THROW(load_checkpoint(dir / "junk.ckpt"), IncompatibleCheckpoint);
  EXPECT_THROW(load_checkpoint(dir / "missing.ckpt"), IoError);
}

TEST(Checkpoint, MagicAndHeaderLayout) {
  TinyRun run;
  TempDir dir;
  run.make().save(dir / "c.ckpt");
  const auto bytes = testing::read_file(dir / "c.ckpt");
  EXPECT_EQ(bytes.substr(0, 4), "DNSC");
  std::uint32_t version = 0;
  std::memcpy(&version, bytes.data() + 4, 4);
  EXPECT_EQ(version, kCheckpointVersion);
}

}  // namespace
}  // namespace denosent::training
