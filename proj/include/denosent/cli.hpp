#pragma once

#include <filesystem>
#include <iosfwd>
#include <string>
#include <utility>
#include <vector>

#include "denosent/model.hpp"
#include "denosent/noise.hpp"
#include "denosent/trainer.hpp"

namespace denosent::cli {

enum ExitCode : int { kOk = 0, kRuntimeFailure = 1, kUsageError = 2 };

// Everything a subcommand can be configured with. Keys in config files and
// flags share names: `batch_size = 8` in a file, `--batch-size 8` on the
// command line.
struct RunConfig {
  model::ModelConfig model;
  noise::NoiseConfig noise;
  training::TrainConfig train;

  std::filesystem::path corpus;
  std::filesystem::path vocab;
  std::filesystem::path paraphrases;
  std::filesystem::path synonyms;
  std::filesystem::path sts;
  std::filesystem::path sts_dev;
  std::filesystem::path pairs;
  std::filesystem::path queries;
  std::filesystem::path docs;
  std::filesystem::path relevance;
  std::filesystem::path checkpoint;
  std::filesystem::path metrics;
  std::filesystem::path input;
  std::filesystem::path output;
  std::filesystem::path report;

  std::size_t min_count = 1;
  std::size_t max_vocab = 0;
  std::string mode = "sts";
  std::size_t k = 1;
  bool json = false;
  bool resume = false;
};

// `key = value` per line; `#` starts a comment; blank lines are skipped.
// Returns (key, value, line) in file order. FormatError on lines without '='.
struct ConfigEntry {
  std::string key;
  std::string value;
  std::size_t line = 0;
};
std::vector<ConfigEntry> read_config_file(const std::filesystem::path& path);

// Entry point shared by the executable and the tests. argv[0] is the
// program name. Returns an ExitCode.
int run_cli(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

}  // namespace denosent::cli
