#pragma once

#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

#include "denosent/rng.hpp"
#include "denosent/tensor.hpp"
#include "denosent/text.hpp"

// Two-stage perturbation: a discrete rewrite of the sentence text, then
// high-rate dropout on the embedded decoder input.
namespace denosent::noise {

enum class DiscreteStrategy { kTable, kRuleBased, kNone };

std::string_view to_string(DiscreteStrategy s);
DiscreteStrategy parse_strategy(std::string_view s);

struct NoiseConfig {
  DiscreteStrategy strategy = DiscreteStrategy::kRuleBased;
  double continuous_rate = 0.825;
  double swap_prob = 0.1;
  double synonym_prob = 0.3;

  void validate() const;
};

// original sentence text -> externally produced paraphrase.
class ParaphraseTable {
 public:
  // `original<TAB>paraphrase` per line. Duplicate keys: last wins, with a
  // warning. Blank paraphrases are rejected.
  static ParaphraseTable load(const std::filesystem::path& path);

  void insert(std::string original, std::string paraphrase);
  const std::string* find(std::string_view original) const;
  std::size_t size() const { return entries_.size(); }

 private:
  std::unordered_map<std::string, std::string> entries_;
};

// token -> list of substitutes, in file order.
class SynonymTable {
 public:
  // `token<TAB>synonym` per line; repeated tokens accumulate.
  static SynonymTable load(const std::filesystem::path& path);
  // Same format from in-memory lines; `source` names them in errors.
  static SynonymTable parse(std::span<const std::string> lines, const std::string& source);
  // The general-English list compiled into the library.
  static const SynonymTable& bundled();

  void add(std::string token, std::string synonym);
  const std::vector<std::string>* find(std::string_view token) const;
  std::size_t size() const { return entries_.size(); }

 private:
  std::unordered_map<std::string, std::vector<std::string>> entries_;
};

// Function words are never swapped; punctuation and special tokens are never
// touched at all.
bool is_content_word(std::string_view word);

// Rule-based rewrite, replayable from `rng`:
//   1. scan i = 0..n-2; where words i and i+1 are both content words, draw u;
//      if u < swap_prob swap them and skip past i+1;
//   2. for each content word with synonyms, draw u; if u < synonym_prob draw
//      an index uniformly from its list and substitute.
// Returns the input unchanged when no rule fires.
std::string rule_based_augment(std::string_view sentence, const NoiseConfig& config,
                               const SynonymTable* synonyms, RngStream rng);

// Throws EmptySentence for blank input and InvalidParameter when the table
// strategy has no table.
std::string discrete_augment(std::string_view sentence, const NoiseConfig& config,
                             const ParaphraseTable* table, const SynonymTable* synonyms,
                             RngStream rng);

struct NoisyTrainingPair {
  text::TokenSequence original_ids;
  text::TokenSequence augmented_ids;
  // Seeds this example's continuous corruption, applied later on embeddings.
  RngStream continuous_rng;
};

NoisyTrainingPair make_training_pair(std::string_view sentence, const text::Vocabulary& vocab,
                                     const NoiseConfig& config, const ParaphraseTable* table,
                                     const SynonymTable* synonyms, RngStream rng);

// Dropout at rate p over embedded [B, L, d]; identity outside training.
// row_streams, when given, supplies one stream per batch row.
template <typename T>
Tensor<T> continuous_corrupt(const Tensor<T>& embedded, double p, bool training, RngStream rng,
                             std::span<const RngStream> row_streams = {});

}  // namespace denosent::noise
