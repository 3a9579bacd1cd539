#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

namespace denosent::text {

using TokenId = std::int32_t;
using TokenSequence = std::vector<TokenId>;

inline constexpr TokenId kPadId = 0;
inline constexpr TokenId kUnkId = 1;
inline constexpr TokenId kMaskId = 2;
inline constexpr std::string_view kPadToken = "[PAD]";
inline constexpr std::string_view kUnkToken = "[UNK]";
inline constexpr std::string_view kMaskToken = "[MASK]";
// Required by template pooling.
inline constexpr std::string_view kMeansToken = "means";
inline constexpr std::string_view kPeriodToken = ".";

inline constexpr std::size_t kDefaultMaxLength = 32;

// Token <-> id map. Ids are dense in [0, size()); the three specials occupy
// 0..2 and the template tokens are always present.
class Vocabulary {
 public:
  // min_count >= 1; max_size == 0 means uncapped, otherwise it bounds the
  // total entry count including specials.
  static Vocabulary build(std::span<const std::string> sentences, std::size_t min_count,
                          std::size_t max_size);
  static Vocabulary from_tokens(std::vector<std::string> tokens);
  static Vocabulary load(const std::filesystem::path& path);
  void save(const std::filesystem::path& path) const;

  std::size_t size() const { return id_to_token_.size(); }
  bool contains(std::string_view token) const;
  // UNK for tokens outside the vocabulary.
  TokenId id(std::string_view token) const;
  const std::string& token(TokenId id) const;
  const std::vector<std::string>& tokens() const { return id_to_token_; }

  TokenId means_id() const { return id(kMeansToken); }
  TokenId period_id() const { return id(kPeriodToken); }

 private:
  std::vector<std::string> id_to_token_;
  std::unordered_map<std::string, TokenId> token_to_id_;
};

// Lowercase, whitespace split, leading/trailing ASCII punctuation detached
// into one token per character. The special surfaces [PAD]/[UNK]/[MASK]
// are kept verbatim. Throws EmptySentence when nothing remains.
std::vector<std::string> split_words(std::string_view text);
TokenSequence tokenize(std::string_view text, const Vocabulary& vocab);
std::string detokenize(std::span<const TokenId> ids, const Vocabulary& vocab);
std::string join_words(std::span<const std::string> words);

// Padded token-id matrix. ids[b*width + j] == PAD exactly where mask is 0.
struct SentenceBatch {
  std::size_t rows = 0;
  std::size_t width = 0;
  std::vector<TokenId> ids;
  std::vector<std::uint8_t> mask;
  std::vector<std::size_t> lengths;

  std::span<const TokenId> row(std::size_t b) const {
    return std::span(ids).subspan(b * width, lengths[b]);
  }
};

// Truncates each sequence to max_length and right-pads with PAD. The width is
// max_length, or the longest truncated row when fit_to_longest is set.
SentenceBatch make_batch(std::span<const TokenSequence> sequences, std::size_t max_length,
                         bool fit_to_longest = false);

struct EvalRecord {
  std::string sentence_a;
  std::string sentence_b;
  double gold_score = 0.0;
};

// `a<TAB>b<TAB>score` per line, score in [0, 5]. FormatError names the line.
std::vector<EvalRecord> load_sts(const std::filesystem::path& path);

// One sentence per line; blank lines skipped.
std::vector<std::string> read_corpus(const std::filesystem::path& path);
// All lines, keeping blanks. Strips a trailing '\r'.
std::vector<std::string> read_lines(const std::filesystem::path& path);
std::vector<std::string_view> split_tabs(std::string_view line);

}  // namespace denosent::text
