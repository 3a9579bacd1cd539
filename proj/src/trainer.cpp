#include "denosent/trainer.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <numeric>
#include <ostream>
#include <spdlog/spdlog.h>

#include "denosent/errors.hpp"

namespace denosent::training {

namespace {

using text::TokenSequence;

struct PreparedBatch {
  std::vector<TokenSequence> originals;
  std::vector<TokenSequence> augmented;
  std::vector<RngStream> corruption;
  text::SentenceBatch original_batch;
  text::SentenceBatch noisy_batch;
};

PreparedBatch prepare_batch(std::span<const std::string> sentences,
                            const model::ModelConfig& model_config,
                            const noise::NoiseConfig& noise_config,
                            const TrainingResources& resources, const RngStream& rng) {
  if (sentences.empty()) throw EmptyInput("training batch is empty");
  PreparedBatch out;
  for (std::size_t i = 0; i < sentences.size(); ++i) {
    auto pair = noise::make_training_pair(sentences[i], *resources.vocab, noise_config,
                                          resources.paraphrases, resources.synonyms, rng.fork(i));
    out.originals.push_back(std::move(pair.original_ids));
    out.augmented.push_back(std::move(pair.augmented_ids));
    out.corruption.push_back(pair.continuous_rng);
  }
  // Original and noisy copies share one width so position j lines up; the
  // loss only reads positions where the original is non-pad.
  std::size_t width = 1;
  for (const auto* group : {&out.originals, &out.augmented})
    for (const auto& s : *group) width = std::max(width, s.size());
  width = std::min(width, model_config.max_len);
  out.original_batch = text::make_batch(out.originals, width);
  out.noisy_batch = text::make_batch(out.augmented, width);
  return out;
}

RngStream root_stream(std::uint64_t seed) { return RngStream(seed, 0); }

std::vector<std::size_t> epoch_permutation(std::size_t n, std::uint64_t seed, std::uint64_t epoch) {
  std::vector<std::size_t> perm(n);
  std::iota(perm.begin(), perm.end(), 0);
  RngStream rng = root_stream(seed).fork("shuffle").fork(epoch);
  for (std::size_t i = n; i > 1; --i) std::swap(perm[i - 1], perm[rng.below(i)]);
  return perm;
}

}  // namespace

void TrainConfig::validate() const {
  std::vector<std::string> problems;
  if (steps < 1) problems.push_back("steps must be >= 1");
  if (batch_size < 1) problems.push_back("batch_size must be >= 1");
  if (w_contrastive > 0.0 && batch_size < 2) {
    problems.push_back("batch_size must be >= 2 when the contrastive objective is on");
  }
  if (!(w_contrastive >= 0.0) || !(w_denoising >= 0.0)) {
    problems.push_back("objective weights must be >= 0");
  } else if (w_contrastive == 0.0 && w_denoising == 0.0) {
    problems.push_back("at least one objective weight must be positive");
  }
  if (!(lr >= 0.0)) problems.push_back("lr must be >= 0");
  if (!(tau > 0.0)) problems.push_back("tau must be > 0");
  if (!(weight_decay >= 0.0)) problems.push_back("weight_decay must be >= 0");
  if (problems.empty()) return;
  std::string msg = "invalid training config:";
  for (const auto& p : problems) msg += "\n  " + p;
  throw InvalidParameter(msg);
}

std::string format_metrics_line(const StepMetrics& m) {
  char buf[160];
  std::snprintf(buf, sizeof buf, "%llu\t%.6f\t%.6f\t%.6f\t%.6f",
                static_cast<unsigned long long>(m.step), m.combined, m.contrastive, m.denoising,
                m.token_accuracy);
  return buf;
}

Trainer::Trainer(model::ModelConfig model_config, noise::NoiseConfig noise_config,
                 TrainConfig train_config, TrainingResources resources)
    : Trainer(model_config, noise_config, train_config, resources,
              model::ModelParams<float>::init(model_config,
                                              root_stream(train_config.seed).fork("init"))) {}

Trainer::Trainer(model::ModelConfig model_config, noise::NoiseConfig noise_config,
                 TrainConfig train_config, TrainingResources resources,
                 model::ModelParams<float> params)
    : model_config_(model_config),
      noise_config_(noise_config),
      train_config_(std::move(train_config)),
      resources_(resources),
      params_(std::move(params)) {
  model_config_.validate();
  noise_config_.validate();
  train_config_.validate();
  if (resources_.vocab == nullptr) throw InvalidParameter("trainer needs a vocabulary");
  if (resources_.vocab->size() != model_config_.vocab_size) {
    throw InvalidParameter("vocabulary has " + std::to_string(resources_.vocab->size()) +
                           " entries but the model expects " +
                           std::to_string(model_config_.vocab_size));
  }
  named_ = params_.named();
  optimizer_ = OptimizerState<float>::create(named_, train_config_.lr, train_config_.weight_decay);
}

Trainer Trainer::resume(const Checkpoint& checkpoint, noise::NoiseConfig noise_config,
                        TrainConfig train_config, TrainingResources resources) {
  const auto model_config = read_model_config(checkpoint);
  auto params = restore_params(checkpoint, model_config);
  const auto progress = read_progress(checkpoint);
  train_config.seed = progress.seed;
  Trainer trainer(model_config, noise_config, std::move(train_config), resources, std::move(params));
  if (auto opt = restore_optimizer(checkpoint, trainer.params_)) {
    opt->lr = trainer.train_config_.lr;
    opt->weight_decay = trainer.train_config_.weight_decay;
    trainer.optimizer_ = std::move(*opt);
  }
  trainer.step_ = progress.step;
  return trainer;
}

StepMetrics Trainer::train_step(std::span<const std::string> sentences) {
  const auto& tc = train_config_;
  const bool use_contrastive = tc.w_contrastive > 0.0;
  const bool use_denoising = tc.w_denoising > 0.0;
  if (use_contrastive && sentences.size() < 2) {
    throw DegenerateBatch("contrastive objective needs at least 2 sentences per batch");
  }
  const RngStream rng = root_stream(tc.seed).fork("step").fork(step_);
  const auto prepared =
      prepare_batch(sentences, model_config_, noise_config_, resources_, rng.fork("pairs"));

  for (auto& p : named_) p.tensor.zero_grad();

  const auto& anchor_source = model_config_.encoder_input == model::EncoderInput::kOriginal
                                  ? prepared.originals
                                  : prepared.augmented;
  const auto z = model::encode(model::make_encoder_batch(anchor_source, *resources_.vocab,
                                                         model_config_),
                               params_, model_config_, true, rng.fork("encode.anchor"));

  std::optional<Tensor<float>> contrastive;
  if (use_contrastive) {
    const auto z_plus =
        model::encode(model::make_encoder_batch(prepared.augmented, *resources_.vocab, model_config_),
                      params_, model_config_, true, rng.fork("encode.positive"));
    contrastive = objectives::info_nce(z, z_plus, tc.tau, tc.denominator);
  }

  std::optional<Tensor<float>> denoising;
  double accuracy = 0.0;
  if (use_denoising) {
    const auto logits =
        model::decode_denoise(z, prepared.noisy_batch, params_, model_config_,
                              noise_config_.continuous_rate, true, rng.fork("decode"),
                              prepared.corruption);
    denoising = objectives::denoising_loss(logits, prepared.original_batch, tc.reduction);
    accuracy = objectives::token_accuracy(logits, prepared.original_batch);
  }

  const auto losses = objectives::combined_loss(contrastive, denoising, tc.w_contrastive,
                                                tc.w_denoising, accuracy);
  if (!std::isfinite(losses.combined.item())) {
    throw NonFinite("step " + std::to_string(step_ + 1) + ": loss is not finite (contrastive=" +
                    std::to_string(losses.contrastive) + ", denoising=" +
                    std::to_string(losses.denoising) + ")");
  }
  losses.combined.backward();

  StepMetrics m;
  m.grad_norm = clip_grad_norm(named_, tc.clip_norm);
  const double lr_scale =
      tc.warmup_steps == 0
          ? 1.0
          : std::min(1.0, static_cast<double>(step_ + 1) / static_cast<double>(tc.warmup_steps));
  adamw_step(named_, optimizer_, lr_scale);
  ++step_;

  m.step = step_;
  m.combined = static_cast<double>(losses.combined.item());
  m.contrastive = losses.contrastive;
  m.denoising = losses.denoising;
  m.token_accuracy = losses.token_accuracy;
  return m;
}

std::vector<std::string> Trainer::batch_for_step(std::span<const std::string> corpus,
                                                 std::uint64_t step) const {
  if (corpus.empty()) throw EmptyInput("training corpus is empty");
  const std::size_t n = corpus.size();
  const std::size_t b = train_config_.batch_size;
  std::vector<std::string> batch;
  batch.reserve(b);
  std::uint64_t cached_epoch = ~std::uint64_t{0};
  std::vector<std::size_t> perm;
  for (std::size_t i = 0; i < b; ++i) {
    const std::uint64_t g = step * b + i;
    const std::uint64_t epoch = g / n;
    if (epoch != cached_epoch) {
      perm = epoch_permutation(n, train_config_.seed, epoch);
      cached_epoch = epoch;
    }
    batch.push_back(corpus[perm[g % n]]);
  }
  return batch;
}

TrainResult Trainer::train_loop(std::span<const std::string> corpus, const LoopHooks& hooks) {
  if (corpus.empty()) throw EmptyInput("training corpus is empty");
  const auto& tc = train_config_;
  TrainResult result;
  while (step_ < tc.steps) {
    const auto batch = batch_for_step(corpus, step_);
    const StepMetrics m = train_step(batch);
    result.history.push_back(m);
    if (hooks.metrics != nullptr) {
      *hooks.metrics << format_metrics_line(m) << '\n';
      hooks.metrics->flush();
    }
    if (hooks.on_step) hooks.on_step(m);

    const bool boundary = tc.eval_every > 0 && step_ % tc.eval_every == 0;
    if (boundary && hooks.evaluate) {
      if (auto score = hooks.evaluate(step_)) {
        spdlog::info("step {}: eval score {:.4f}", step_, *score);
        if (!result.best_score || *score > *result.best_score) {
          result.best_score = score;
          result.best_step = step_;
          if (!tc.checkpoint_path.empty()) {
            auto best = tc.checkpoint_path;
            best += ".best";
            save(best);
          }
        }
      }
    }
    if ((boundary || step_ == tc.steps) && !tc.checkpoint_path.empty()) {
      save(tc.checkpoint_path);
      ++result.checkpoints_written;
    }
  }
  return result;
}

Checkpoint Trainer::checkpoint() const {
  const auto& tc = train_config_;
  std::map<std::string, std::string> extra{
      {"train.batch_size", std::to_string(tc.batch_size)},
      {"train.w_contrastive", std::to_string(tc.w_contrastive)},
      {"train.w_denoising", std::to_string(tc.w_denoising)},
      {"noise.strategy", std::string(noise::to_string(noise_config_.strategy))},
      {"noise.continuous_rate", std::to_string(noise_config_.continuous_rate)},
  };
  return make_checkpoint(model_config_, params_, &optimizer_, {step_, tc.seed}, extra);
}

void Trainer::save(const std::filesystem::path& path) const { save_checkpoint(path, checkpoint()); }

DenoisingEval evaluate_denoising(const model::ModelParams<float>& params,
                                 const model::ModelConfig& model_config,
                                 const noise::NoiseConfig& noise_config,
                                 const TrainingResources& resources,
                                 std::span<const std::string> sentences, std::size_t batch_size,
                                 RngStream rng, bool with_corruption) {
  if (sentences.empty()) throw EmptyInput("evaluate_denoising: no sentences");
  if (batch_size == 0) throw InvalidParameter("evaluate_denoising: batch_size must be positive");
  NoGradGuard no_grad;
  // Architectural dropout is always off; the decoder runs in training mode
  // only to apply continuous corruption when asked.
  model::ModelConfig eval_config = model_config;
  eval_config.internal_dropout = 0.0;

  DenoisingEval out;
  double loss_sum = 0.0, hit_sum = 0.0;
  for (std::size_t start = 0; start < sentences.size(); start += batch_size) {
    const std::size_t end = std::min(sentences.size(), start + batch_size);
    const auto chunk = sentences.subspan(start, end - start);
    const auto prepared =
        prepare_batch(chunk, eval_config, noise_config, resources, rng.fork(start));
    const auto z = model::encode(
        model::make_encoder_batch(prepared.originals, *resources.vocab, eval_config), params,
        eval_config, false, rng);
    const auto logits =
        model::decode_denoise(z, prepared.noisy_batch, params, eval_config,
                              noise_config.continuous_rate, with_corruption, rng,
                              prepared.corruption);
    std::size_t tokens = 0;
    for (auto m : prepared.original_batch.mask) tokens += m;
    loss_sum += static_cast<double>(
                    objectives::denoising_loss(logits, prepared.original_batch).item()) *
                static_cast<double>(tokens);
    hit_sum += objectives::token_accuracy(logits, prepared.original_batch) *
               static_cast<double>(tokens);
    out.tokens += tokens;
  }
  out.loss = loss_sum / static_cast<double>(out.tokens);
  out.token_accuracy = hit_sum / static_cast<double>(out.tokens);
  return out;
}

}  // namespace denosent::training
