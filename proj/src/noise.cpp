#include "denosent/noise.hpp"

#include <algorithm>
#include <array>
#include <cctype>
#include <sstream>
#include <spdlog/spdlog.h>

#include "denosent/errors.hpp"
#include "denosent/ops.hpp"

namespace denosent::noise {

// Contents of data/synonyms.tsv, generated at build time.
std::string_view bundled_synonyms_tsv();

namespace {

constexpr std::array<std::string_view, 32> kFunctionWords = {
    "a",    "an",  "the",  "of",   "to",    "in",   "on",   "at",  "and",  "or",   "but",
    "is",   "are", "was",  "were", "be",    "been", "by",   "for", "with", "as",   "from",
    "that", "this", "it",  "its",  "not",   "no",   "do",   "does", "did", "means"};

std::pair<std::string_view, std::string_view> split_pair(std::string_view line) {
  const auto tab = line.find('\t');
  if (tab == std::string_view::npos) return {line, {}};
  return {line.substr(0, tab), line.substr(tab + 1)};
}

}  // namespace

std::string_view to_string(DiscreteStrategy s) {
  switch (s) {
    case DiscreteStrategy::kTable:
      return "table";
    case DiscreteStrategy::kRuleBased:
      return "rule_based";
    case DiscreteStrategy::kNone:
      return "none";
  }
  return "none";
}

DiscreteStrategy parse_strategy(std::string_view s) {
  if (s == "table") return DiscreteStrategy::kTable;
  if (s == "rule_based" || s == "rule-based") return DiscreteStrategy::kRuleBased;
  if (s == "none") return DiscreteStrategy::kNone;
  throw InvalidParameter("unknown discrete strategy '" + std::string(s) +
                         "' (expected table, rule_based or none)");
}

void NoiseConfig::validate() const {
  if (!(continuous_rate >= 0.0 && continuous_rate < 1.0)) {
    throw InvalidParameter("continuous noise rate must lie in [0, 1)");
  }
  if (!(swap_prob >= 0.0 && swap_prob <= 1.0) || !(synonym_prob >= 0.0 && synonym_prob <= 1.0)) {
    throw InvalidParameter("rule probabilities must lie in [0, 1]");
  }
}

ParaphraseTable ParaphraseTable::load(const std::filesystem::path& path) {
  ParaphraseTable table;
  const auto lines = text::read_lines(path);
  for (std::size_t i = 0; i < lines.size(); ++i) {
    if (lines[i].empty()) continue;
    auto [original, paraphrase] = split_pair(lines[i]);
    if (original.empty() || paraphrase.find_first_not_of(" \t") == std::string_view::npos) {
      throw FormatError(path.string(), i + 1, "expected original<TAB>paraphrase");
    }
    if (table.find(original) != nullptr) {
      spdlog::warn("{}:{}: duplicate paraphrase key, keeping the later entry", path.string(),
                   i + 1);
    }
    table.insert(std::string(original), std::string(paraphrase));
  }
  return table;
}

void ParaphraseTable::insert(std::string original, std::string paraphrase) {
  if (paraphrase.find_first_not_of(" \t") == std::string::npos) {
    throw InvalidParameter("paraphrase for '" + original + "' is empty");
  }
  entries_.insert_or_assign(std::move(original), std::move(paraphrase));
}

const std::string* ParaphraseTable::find(std::string_view original) const {
  auto it = entries_.find(std::string(original));
  return it == entries_.end() ? nullptr : &it->second;
}

SynonymTable SynonymTable::load(const std::filesystem::path& path) {
  return parse(text::read_lines(path), path.string());
}

SynonymTable SynonymTable::parse(std::span<const std::string> lines, const std::string& source) {
  SynonymTable table;
  for (std::size_t i = 0; i < lines.size(); ++i) {
    if (lines[i].empty() || lines[i][0] == '#') continue;
    auto [token, synonym] = split_pair(lines[i]);
    if (token.empty() || synonym.empty()) {
      throw FormatError(source, i + 1, "expected token<TAB>synonym");
    }
    table.add(std::string(token), std::string(synonym));
  }
  return table;
}

const SynonymTable& SynonymTable::bundled() {
  static const SynonymTable table = [] {
    std::vector<std::string> lines;
    std::istringstream in{std::string(bundled_synonyms_tsv())};
    for (std::string line; std::getline(in, line);) lines.push_back(line);
    return parse(lines, "bundled synonyms");
  }();
  return table;
}

void SynonymTable::add(std::string token, std::string synonym) {
  entries_[std::move(token)].push_back(std::move(synonym));
}

const std::vector<std::string>* SynonymTable::find(std::string_view token) const {
  auto it = entries_.find(std::string(token));
  return it == entries_.end() ? nullptr : &it->second;
}

bool is_content_word(std::string_view word) {
  if (word.empty() || word == text::kPadToken || word == text::kUnkToken ||
      word == text::kMaskToken) {
    return false;
  }
  const bool all_punct = std::all_of(word.begin(), word.end(), [](char c) {
    return static_cast<unsigned char>(c) < 128 && std::ispunct(static_cast<unsigned char>(c));
  });
  if (all_punct) return false;
  return std::find(kFunctionWords.begin(), kFunctionWords.end(), word) == kFunctionWords.end();
}

std::string rule_based_augment(std::string_view sentence, const NoiseConfig& config,
                               const SynonymTable* synonyms, RngStream rng) {
  auto words = text::split_words(sentence);
  bool changed = false;

  for (std::size_t i = 0; i + 1 < words.size(); ++i) {
    if (!is_content_word(words[i]) || !is_content_word(words[i + 1])) continue;
    if (rng.uniform() < config.swap_prob) {
      std::swap(words[i], words[i + 1]);
      changed = true;
      ++i;
    }
  }

  if (synonyms != nullptr) {
    for (auto& w : words) {
      if (!is_content_word(w)) continue;
      const auto* options = synonyms->find(w);
      if (options == nullptr || options->empty()) continue;
      if (rng.uniform() < config.synonym_prob) {
        w = (*options)[rng.below(options->size())];
        changed = true;
      }
    }
  }
  return changed ? text::join_words(words) : std::string(sentence);
}

std::string discrete_augment(std::string_view sentence, const NoiseConfig& config,
                             const ParaphraseTable* table, const SynonymTable* synonyms,
                             RngStream rng) {
  if (sentence.find_first_not_of(" \t\r\n") == std::string_view::npos) {
    throw EmptySentence("discrete_augment: empty sentence");
  }
  switch (config.strategy) {
    case DiscreteStrategy::kNone:
      return std::string(sentence);
    case DiscreteStrategy::kTable:
      if (table == nullptr) {
        throw InvalidParameter("discrete_augment: table strategy needs a paraphrase table");
      }
      if (const auto* hit = table->find(sentence)) return *hit;
      return rule_based_augment(sentence, config, synonyms, rng);
    case DiscreteStrategy::kRuleBased:
      return rule_based_augment(sentence, config, synonyms, rng);
  }
  return std::string(sentence);
}

NoisyTrainingPair make_training_pair(std::string_view sentence, const text::Vocabulary& vocab,
                                     const NoiseConfig& config, const ParaphraseTable* table,
                                     const SynonymTable* synonyms, RngStream rng) {
  NoisyTrainingPair pair;
  pair.original_ids = text::tokenize(sentence, vocab);
  pair.augmented_ids = text::tokenize(
      discrete_augment(sentence, config, table, synonyms, rng.fork("discrete")), vocab);
  pair.continuous_rng = rng.fork("continuous");
  return pair;
}

template <typename T>
Tensor<T> continuous_corrupt(const Tensor<T>& embedded, double p, bool training, RngStream rng,
                             std::span<const RngStream> row_streams) {
  if (!(p >= 0.0 && p < 1.0)) {
    throw InvalidParameter("continuous_corrupt: rate must lie in [0, 1), got " +
                           std::to_string(p));
  }
  if (!training || p == 0.0) return embedded;
  if (!row_streams.empty()) return ops::dropout_rows(embedded, p, row_streams).output;
  return ops::dropout(embedded, p, rng).output;
}

template Tensor<float> continuous_corrupt(const Tensor<float>&, double, bool, RngStream,
                                          std::span<const RngStream>);
template Tensor<double> continuous_corrupt(const Tensor<double>&, double, bool, RngStream,
                                           std::span<const RngStream>);

}  // namespace denosent::noise
