#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "denosent/model.hpp"
#include "denosent/optimizer.hpp"

// Binary checkpoint:
//   "DNSC" | u32 version | u64 n | n bytes of key=value lines |
//   records { u16 name_len | name | u8 rank | u64 dims[rank] | f32 values }
// All integers and floats little-endian. Optimizer moments are stored as
// records named opt.m.<param> and opt.v.<param>.
namespace denosent::training {

inline constexpr std::uint32_t kCheckpointVersion = 1;

struct StoredTensor {
  std::string name;
  Shape dims;
  std::vector<float> values;
};

struct Checkpoint {
  std::map<std::string, std::string> config;
  std::vector<StoredTensor> tensors;

  const StoredTensor* find(const std::string& name) const;
  const std::string& get(const std::string& key) const;
};

// Writes to a sibling temporary then renames over `path`.
void save_checkpoint(const std::filesystem::path& path, const Checkpoint& checkpoint);
// Throws IncompatibleCheckpoint on bad magic/version or any truncation; no
// partially parsed state escapes.
Checkpoint load_checkpoint(const std::filesystem::path& path);

struct TrainingProgress {
  std::uint64_t step = 0;
  std::uint64_t seed = 0;
};

void write_model_config(std::map<std::string, std::string>& out, const model::ModelConfig& config);
model::ModelConfig read_model_config(const Checkpoint& checkpoint);

Checkpoint make_checkpoint(const model::ModelConfig& config, const model::ModelParams<float>& params,
                           const OptimizerState<float>* optimizer, const TrainingProgress& progress,
                           const std::map<std::string, std::string>& extra = {});

// Rebuilds parameters (and optionally optimizer moments) from a checkpoint.
model::ModelParams<float> restore_params(const Checkpoint& checkpoint,
                                         const model::ModelConfig& config);
std::optional<OptimizerState<float>> restore_optimizer(const Checkpoint& checkpoint,
                                                       const model::ModelParams<float>& params);
TrainingProgress read_progress(const Checkpoint& checkpoint);

}  // namespace denosent::training
