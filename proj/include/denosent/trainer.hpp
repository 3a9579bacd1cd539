#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <iosfwd>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "denosent/checkpoint.hpp"
#include "denosent/model.hpp"
#include "denosent/noise.hpp"
#include "denosent/objectives.hpp"
#include "denosent/optimizer.hpp"

namespace denosent::training {

struct TrainConfig {
  std::size_t batch_size = 32;
  std::size_t steps = 1000;
  double lr = 5e-5;
  double tau = objectives::kDefaultTemperature;
  double w_contrastive = 1.0;
  double w_denoising = 1.0;
  double weight_decay = 0.0;
  double clip_norm = 1.0;  // <= 0 disables clipping
  std::size_t warmup_steps = 0;
  std::uint64_t seed = 42;
  std::size_t eval_every = 100;
  objectives::InfoNceDenominator denominator = objectives::InfoNceDenominator::kIncludePositive;
  ops::Reduction reduction = ops::Reduction::kMean;
  std::filesystem::path checkpoint_path;

  void validate() const;
};

// Borrowed, read-only inputs shared by every step.
struct TrainingResources {
  const text::Vocabulary* vocab = nullptr;
  const noise::ParaphraseTable* paraphrases = nullptr;
  const noise::SynonymTable* synonyms = nullptr;
};

struct StepMetrics {
  std::uint64_t step = 0;  // 1-based index of the completed step
  double combined = 0.0;
  double contrastive = 0.0;
  double denoising = 0.0;
  double token_accuracy = 0.0;
  double grad_norm = 0.0;
};

// `step<TAB>combined<TAB>contrastive<TAB>denoising<TAB>token_accuracy`
std::string format_metrics_line(const StepMetrics& m);

struct LoopHooks {
  std::ostream* metrics = nullptr;
  // Called every eval_every steps; a returned score (higher is better)
  // drives best-checkpoint retention at <checkpoint_path>.best.
  std::function<std::optional<double>(std::uint64_t step)> evaluate;
  std::function<void(const StepMetrics&)> on_step;
};

struct TrainResult {
  std::vector<StepMetrics> history;
  std::optional<double> best_score;
  std::uint64_t best_step = 0;
  std::size_t checkpoints_written = 0;
};

// Owns parameters and optimizer state for one training run. Every random
// draw derives from (seed, step), so a run resumed from a checkpoint
// continues the exact trajectory of an uninterrupted one.
class Trainer {
 public:
  Trainer(model::ModelConfig model_config, noise::NoiseConfig noise_config, TrainConfig train_config,
          TrainingResources resources);
  Trainer(model::ModelConfig model_config, noise::NoiseConfig noise_config, TrainConfig train_config,
          TrainingResources resources, model::ModelParams<float> params);

  // Restores parameters, optimizer moments and step counter.
  static Trainer resume(const Checkpoint& checkpoint, noise::NoiseConfig noise_config,
                        TrainConfig train_config, TrainingResources resources);

  // One optimization step over `sentences`:
  //   noisy pairs -> z (encoder input per mode) -> z+ (augmented copies)
  //   -> decode(z, augmented, p) -> losses -> backward -> clip -> AdamW.
  // z feeds both objectives. Terms with zero weight are skipped entirely.
  StepMetrics train_step(std::span<const std::string> sentences);

  // Runs until `steps` total steps have completed, writing a checkpoint
  // every eval_every steps and at the end.
  TrainResult train_loop(std::span<const std::string> corpus, const LoopHooks& hooks = {});

  // Batch drawn at `step` (0-based): a seeded per-epoch shuffle of `corpus`.
  std::vector<std::string> batch_for_step(std::span<const std::string> corpus,
                                          std::uint64_t step) const;

  Checkpoint checkpoint() const;
  void save(const std::filesystem::path& path) const;

  const model::ModelParams<float>& params() const { return params_; }
  model::ModelParams<float>& mutable_params() { return params_; }
  const OptimizerState<float>& optimizer() const { return optimizer_; }
  const model::ModelConfig& model_config() const { return model_config_; }
  const noise::NoiseConfig& noise_config() const { return noise_config_; }
  const TrainConfig& train_config() const { return train_config_; }
  std::uint64_t step() const { return step_; }

 private:
  model::ModelConfig model_config_;
  noise::NoiseConfig noise_config_;
  TrainConfig train_config_;
  TrainingResources resources_;
  model::ModelParams<float> params_;
  std::vector<NamedTensor<float>> named_;
  OptimizerState<float> optimizer_;
  std::uint64_t step_ = 0;
};

struct DenoisingEval {
  double loss = 0.0;
  double token_accuracy = 0.0;
  std::size_t tokens = 0;
};

// Held-out reconstruction of original sentences from their discretely
// augmented copies, in eval mode: internal dropout off and, unless
// `with_corruption` is set, no continuous corruption (it is a training-time
// stage). With `with_corruption` the decoder input is also dropped at
// noise.continuous_rate, as during training. No gradients are recorded.
DenoisingEval evaluate_denoising(const model::ModelParams<float>& params,
                                 const model::ModelConfig& model_config,
                                 const noise::NoiseConfig& noise_config,
                                 const TrainingResources& resources,
                                 std::span<const std::string> sentences, std::size_t batch_size,
                                 RngStream rng, bool with_corruption = false);

}  // namespace denosent::training
