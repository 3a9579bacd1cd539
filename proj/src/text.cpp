#include "denosent/text.hpp"

#include <algorithm>
#include <cctype>
#include <charconv>
#include <fstream>
#include <map>

#include "denosent/errors.hpp"
#include <spdlog/spdlog.h>

namespace denosent::text {

namespace {

bool is_ascii_punct(char c) {
  return static_cast<unsigned char>(c) < 128 && std::ispunct(static_cast<unsigned char>(c));
}

bool is_special_surface(std::string_view word) {
  return word == kPadToken || word == kUnkToken || word == kMaskToken;
}

}  // namespace

Vocabulary Vocabulary::from_tokens(std::vector<std::string> tokens) {
  if (tokens.size() < 3 || tokens[0] != kPadToken || tokens[1] != kUnkToken ||
      tokens[2] != kMaskToken) {
    throw InvalidParameter("vocabulary must start with [PAD], [UNK], [MASK]");
  }
  Vocabulary v;
  v.id_to_token_ = std::move(tokens);
  for (std::size_t i = 0; i < v.id_to_token_.size(); ++i) {
    const auto& t = v.id_to_token_[i];
    if (t.empty()) throw InvalidParameter("vocabulary entry " + std::to_string(i) + " is empty");
    if (!v.token_to_id_.emplace(t, static_cast<TokenId>(i)).second) {
      throw InvalidParameter("duplicate vocabulary entry '" + t + "'");
    }
  }
  for (auto required : {kMeansToken, kPeriodToken}) {
    if (!v.contains(required)) {
      throw InvalidParameter("vocabulary lacks template token '" + std::string(required) + "'");
    }
  }
  return v;
}

Vocabulary Vocabulary::build(std::span<const std::string> sentences, std::size_t min_count,
                             std::size_t max_size) {
  if (min_count < 1) throw InvalidParameter("build_vocab: min_count must be >= 1");
  std::vector<std::string> tokens{std::string(kPadToken), std::string(kUnkToken),
                                  std::string(kMaskToken), std::string(kMeansToken),
                                  std::string(kPeriodToken)};
  if (max_size != 0 && max_size < tokens.size()) {
    throw InvalidParameter("build_vocab: max_size must be 0 or at least " +
                           std::to_string(tokens.size()));
  }
  std::map<std::string, std::size_t> counts;
  std::size_t total = 0;
  for (const auto& s : sentences) {
    if (s.find_first_not_of(" \t\r\n") == std::string::npos) continue;
    for (auto& w : split_words(s)) {
      ++counts[std::move(w)];
      ++total;
    }
  }
  if (total == 0) throw EmptyInput("build_vocab: corpus has no tokens");

  std::vector<std::pair<std::string, std::size_t>> ranked;
  for (auto& [word, count] : counts) {
    if (count < min_count || is_special_surface(word) || word == kMeansToken ||
        word == kPeriodToken) {
      continue;
    }
    ranked.emplace_back(word, count);
  }
  std::stable_sort(ranked.begin(), ranked.end(),
                   [](const auto& a, const auto& b) { return a.second > b.second; });
  for (auto& [word, count] : ranked) {
    if (max_size != 0 && tokens.size() >= max_size) break;
    tokens.push_back(std::move(word));
  }
  return from_tokens(std::move(tokens));
}

Vocabulary Vocabulary::load(const std::filesystem::path& path) {
  auto lines = read_lines(path);
  while (!lines.empty() && lines.back().empty()) lines.pop_back();
  const std::string source = path.string();
  const std::string_view expected[] = {kPadToken, kUnkToken, kMaskToken};
  for (std::size_t i = 0; i < 3; ++i) {
    if (i >= lines.size() || lines[i] != expected[i]) {
      throw FormatError(source, i + 1, "expected '" + std::string(expected[i]) + "'");
    }
  }
  for (std::size_t i = 3; i < lines.size(); ++i) {
    if (lines[i].empty()) throw FormatError(source, i + 1, "empty token");
  }
  try {
    return from_tokens(std::move(lines));
  } catch (const InvalidParameter& e) {
    throw FormatError(source, 0, e.what());
  }
}

void Vocabulary::save(const std::filesystem::path& path) const {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot write vocabulary to " + path.string());
  for (const auto& t : id_to_token_) out << t << '\n';
  if (!out) throw IoError("failed writing vocabulary to " + path.string());
}

bool Vocabulary::contains(std::string_view token) const {
  return token_to_id_.contains(std::string(token));
}

TokenId Vocabulary::id(std::string_view token) const {
  auto it = token_to_id_.find(std::string(token));
  return it == token_to_id_.end() ? kUnkId : it->second;
}

const std::string& Vocabulary::token(TokenId id) const {
  if (id < 0 || static_cast<std::size_t>(id) >= id_to_token_.size()) {
    throw InvalidToken("token id " + std::to_string(id) + " outside vocabulary of " +
                       std::to_string(id_to_token_.size()));
  }
  return id_to_token_[static_cast<std::size_t>(id)];
}

std::vector<std::string> split_words(std::string_view text) {
  std::vector<std::string> words;
  std::size_t i = 0;
  while (i < text.size()) {
    while (i < text.size() && std::isspace(static_cast<unsigned char>(text[i]))) ++i;
    std::size_t j = i;
    while (j < text.size() && !std::isspace(static_cast<unsigned char>(text[j]))) ++j;
    if (j == i) break;
    std::string_view raw = text.substr(i, j - i);
    i = j;
    if (is_special_surface(raw)) {
      words.emplace_back(raw);
      continue;
    }
    std::size_t lead = 0;
    while (lead < raw.size() && is_ascii_punct(raw[lead])) ++lead;
    std::size_t trail = raw.size();
    while (trail > lead && is_ascii_punct(raw[trail - 1])) --trail;
    for (std::size_t k = 0; k < lead; ++k) words.emplace_back(1, raw[k]);
    if (trail > lead) {
      std::string core(raw.substr(lead, trail - lead));
      for (char& c : core) {
        if (static_cast<unsigned char>(c) < 128) c = static_cast<char>(std::tolower(c));
      }
      words.push_back(std::move(core));
    }
    for (std::size_t k = trail; k < raw.size(); ++k) words.emplace_back(1, raw[k]);
  }
  if (words.empty()) throw EmptySentence("sentence is empty after tokenization");
  return words;
}

TokenSequence tokenize(std::string_view text, const Vocabulary& vocab) {
  TokenSequence ids;
  for (const auto& w : split_words(text)) ids.push_back(vocab.id(w));
  return ids;
}

std::string join_words(std::span<const std::string> words) {
  std::string out;
  for (const auto& w : words) {
    if (!out.empty()) out += ' ';
    out += w;
  }
  return out;
}

std::string detokenize(std::span<const TokenId> ids, const Vocabulary& vocab) {
  std::string out;
  for (TokenId id : ids) {
    if (!out.empty()) out += ' ';
    out += vocab.token(id);
  }
  return out;
}

SentenceBatch make_batch(std::span<const TokenSequence> sequences, std::size_t max_length,
                         bool fit_to_longest) {
  if (max_length < 1) throw InvalidParameter("make_batch: max length must be >= 1");
  if (sequences.empty()) throw EmptyInput("make_batch: no sequences");
  SentenceBatch batch;
  batch.rows = sequences.size();
  batch.lengths.reserve(batch.rows);
  for (const auto& s : sequences) {
    if (s.empty()) throw EmptySentence("make_batch: empty sequence");
    if (s.size() > max_length) {
      spdlog::debug("make_batch: truncating sequence of " + std::to_string(s.size()) + " to " +
                 std::to_string(max_length));
    }
    batch.lengths.push_back(std::min(s.size(), max_length));
  }
  batch.width = fit_to_longest ? *std::max_element(batch.lengths.begin(), batch.lengths.end())
                               : max_length;
  batch.ids.assign(batch.rows * batch.width, kPadId);
  batch.mask.assign(batch.rows * batch.width, 0);
  for (std::size_t b = 0; b < batch.rows; ++b) {
    for (std::size_t j = 0; j < batch.lengths[b]; ++j) {
      batch.ids[b * batch.width + j] = sequences[b][j];
      batch.mask[b * batch.width + j] = 1;
    }
  }
  return batch;
}

std::vector<std::string> read_lines(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path.string());
  std::vector<std::string> lines;
  std::string line;
  while (std::getline(in, line)) {
    if (!line.empty() && line.back() == '\r') line.pop_back();
    lines.push_back(std::move(line));
  }
  if (in.bad()) throw IoError("failed reading " + path.string());
  return lines;
}

std::vector<std::string> read_corpus(const std::filesystem::path& path) {
  std::vector<std::string> out;
  for (auto& line : read_lines(path)) {
    if (line.find_first_not_of(" \t") != std::string::npos) out.push_back(std::move(line));
  }
  return out;
}

std::vector<std::string_view> split_tabs(std::string_view line) {
  std::vector<std::string_view> cols;
  std::size_t start = 0;
  while (true) {
    const std::size_t tab = line.find('\t', start);
    if (tab == std::string_view::npos) {
      cols.push_back(line.substr(start));
      return cols;
    }
    cols.push_back(line.substr(start, tab - start));
    start = tab + 1;
  }
}

std::vector<EvalRecord> load_sts(const std::filesystem::path& path) {
  const auto lines = read_lines(path);
  const std::string source = path.string();
  std::vector<EvalRecord> records;
  for (std::size_t i = 0; i < lines.size(); ++i) {
    const std::string& line = lines[i];
    if (line.empty() && i + 1 == lines.size()) break;
    const auto cols = split_tabs(line);
    if (cols.size() != 3) {
      throw FormatError(source, i + 1,
                        "expected 3 tab-separated columns, found " + std::to_string(cols.size()));
    }
    auto score_text = cols[2];
    while (!score_text.empty() && score_text.front() == ' ') score_text.remove_prefix(1);
    while (!score_text.empty() && score_text.back() == ' ') score_text.remove_suffix(1);
    double score = 0.0;
    const auto [end, ec] =
        std::from_chars(score_text.data(), score_text.data() + score_text.size(), score);
    if (ec != std::errc() || end != score_text.data() + score_text.size()) {
      throw FormatError(source, i + 1, "unparsable score '" + std::string(cols[2]) + "'");
    }
    if (!(score >= 0.0 && score <= 5.0)) {
      throw FormatError(source, i + 1, "score outside [0, 5]");
    }
    auto blank = [](std::string_view s) { return s.find_first_not_of(" \t") == s.npos; };
    if (blank(cols[0]) || blank(cols[1])) throw FormatError(source, i + 1, "empty sentence");
    records.push_back({std::string(cols[0]), std::string(cols[1]), score});
  }
  return records;
}

}  // namespace denosent::text
