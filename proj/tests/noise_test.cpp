#include <gtest/gtest.h>
#include <set>

#include "denosent/errors.hpp"
#include "denosent/noise.hpp"
#include "temp_dir.hpp"
#include "toy_corpus.hpp"

namespace denosent::noise {
namespace {

using testing::TempDir;

text::Vocabulary small_vocab() {
  const std::vector<std::string> corpus{"the quick brown fox jumps", "a fast dark fox leaps ."};
  return text::Vocabulary::build(corpus, 1, 0);
}

SynonymTable fox_synonyms() {
  SynonymTable t;
  t.add("quick", "fast");
  t.add("quick", "speedy");
  t.add("brown", "dark");
  t.add("jumps", "leaps");
  return t;
}

// Independent replay of the documented rule sequence.
std::string replay_rules(const std::vector<std::string>& input, double swap_prob, double synonym_prob,
                         const SynonymTable& synonyms, RngStream rng) {
  static const std::set<std::string> kFunction{"the", "a", "an", "of", "to", "in", "on"};
  auto content = [&](const std::string& w) { return !kFunction.count(w) && w != "."; };
  auto words = input;
  for (std::size_t i = 0; i + 1 < words.size(); ++i) {
    if (content(words[i]) && content(words[i + 1]) && rng.uniform() < swap_prob) {
      std::swap(words[i], words[i + 1]);
      ++i;
    }
  }
  for (auto& w : words) {
    const auto* options = content(w) ? synonyms.find(w) : nullptr;
    if (options && rng.uniform() < synonym_prob) w = (*options)[rng.below(options->size())];
  }
  std::string out;
  for (const auto& w : words) out += (out.empty() ? "" : " ") + w;
  return out;
}

TEST(DiscreteAugment, NoneIsIdentity) {
  NoiseConfig config;
  config.strategy = DiscreteStrategy::kNone;
  EXPECT_EQ(discrete_augment("The Quick fox!", config, nullptr, nullptr, RngStream(1)), "The Quick fox!");
}

TEST(DiscreteAugment, TableHitIsVerbatimAndMissFallsBack) {
  ParaphraseTable table;
  table.insert("the quick brown fox jumps", "A Fox, Quick and Brown, Jumps.");
  NoiseConfig config;
  config.strategy = DiscreteStrategy::kTable;
  EXPECT_EQ(discrete_augment("the quick brown fox jumps", config, &table, nullptr, RngStream(1)),
            "A Fox, Quick and Brown, Jumps.");
  const auto syn = fox_synonyms();
  config.swap_prob = 0.0;
  config.synonym_prob = 1.0;
  const auto out = discrete_augment("quick fox", config, &table, &syn, RngStream(2));
  EXPECT_TRUE(out == "fast fox" || out == "speedy fox") << out;
  EXPECT_THROW(discrete_augment("x", config, nullptr, nullptr, RngStream(1)), InvalidParameter);
}

TEST(DiscreteAugment, RuleBasedMatchesReplayOracle) {
  const auto syn = fox_synonyms();
  NoiseConfig config;
  config.swap_prob = 0.3;
  config.synonym_prob = 0.5;
  const std::vector<std::string> words{"the", "quick", "brown", "fox", "jumps"};
  int changed = 0;
  for (std::uint64_t seed = 0; seed < 50; ++seed) {
    const RngStream rng(seed, 17);
    const auto got = discrete_augment("the quick brown fox jumps", config, nullptr, &syn, rng);
    EXPECT_EQ(got, replay_rules(words, 0.3, 0.5, syn, rng)) << "seed " << seed;
    changed += got != "the quick brown fox jumps";
  }
  EXPECT_GT(changed, 10);
}

TEST(DiscreteAugment, NeverMovesPunctuationOrFunctionWords) {
  const auto syn = testing::toy_synonyms();
  NoiseConfig config;
  config.swap_prob = 1.0;
  config.synonym_prob = 1.0;
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    const auto out = rule_based_augment("the big dog chased a small cat .", config, &syn, RngStream(seed));
    const auto words = text::split_words(out);
    ASSERT_EQ(words.size(), 8u);
    EXPECT_EQ(words[0], "the");
    EXPECT_EQ(words[4], "a");
    EXPECT_EQ(words[7], ".");
  }
}

TEST(DiscreteAugment, BlankInputRejected) {
  EXPECT_THROW(discrete_augment("  ", NoiseConfig{}, nullptr, nullptr, RngStream(1)), EmptySentence);
}

TEST(TrainingPair, OriginalIsTokenizedInputAndNoneCopiesIt) {
  const auto vocab = small_vocab();
  NoiseConfig config;
  config.strategy = DiscreteStrategy::kNone;
  const auto pair = make_training_pair("the quick brown fox jumps", vocab, config, nullptr, nullptr, RngStream(3));
  EXPECT_EQ(pair.original_ids, text::tokenize("the quick brown fox jumps", vocab));
  EXPECT_EQ(pair.augmented_ids, pair.original_ids);
}

TEST(TrainingPair, TableBackedPairTokenizesTheParaphrase) {
  const auto vocab = small_vocab();
  ParaphraseTable table;
  table.insert("the quick brown fox jumps", "a fast dark fox leaps .");
  NoiseConfig config;
  config.strategy = DiscreteStrategy::kTable;
  const auto pair = make_training_pair("the quick brown fox jumps", vocab, config, &table, nullptr, RngStream(3));
  EXPECT_EQ(pair.augmented_ids, text::tokenize("a fast dark fox leaps .", vocab));
  EXPECT_EQ(pair.original_ids, text::tokenize("the quick brown fox jumps", vocab));
}

TEST(TrainingPair, ReproducibleUnderSeed) {
  const auto vocab = small_vocab();
  const auto syn = fox_synonyms();
  NoiseConfig config;
  config.synonym_prob = 0.7;
  const auto a = make_training_pair("the quick brown fox jumps", vocab, config, nullptr, &syn, RngStream(9, 2));
  const auto b = make_training_pair("the quick brown fox jumps", vocab, config, nullptr, &syn, RngStream(9, 2));
  EXPECT_EQ(a.augmented_ids, b.augmented_ids);
  EXPECT_EQ(a.continuous_rng, b.continuous_rng);
}

TEST(ContinuousCorrupt, IdentityCasesAndRate) {
  const auto x = Tensor<float>::full({10, 40, 32}, 1.f);
  const auto same = continuous_corrupt(x, 0.0, true, RngStream(1));
  const auto eval = continuous_corrupt(x, 0.825, false, RngStream(1));
  for (std::size_t i = 0; i < x.size(); ++i) {
    EXPECT_EQ(same.at(i), 1.f);
    EXPECT_EQ(eval.at(i), 1.f);
  }
  const auto noisy = continuous_corrupt(x, 0.825, true, RngStream(5));
  std::size_t zeros = 0;
  for (float v : noisy.values()) zeros += v == 0.f;
  const double frac = static_cast<double>(zeros) / static_cast<double>(x.size());
  EXPECT_GE(frac, 0.80);
  EXPECT_LE(frac, 0.85);
  EXPECT_THROW(continuous_corrupt(x, 1.0, false, RngStream(1)), InvalidParameter);
}

TEST(Tables, LoadFormats) {
  TempDir dir;
  const auto table = ParaphraseTable::load(dir.write("p.tsv", "a b\tc d\na b\te f\nx\ty\n"));
  EXPECT_EQ(table.size(), 2u);
  EXPECT_EQ(*table.find("a b"), "e f");
  EXPECT_EQ(table.find("zzz"), nullptr);
  EXPECT_THROW(ParaphraseTable::load(dir.write("bad.tsv", "a b\t\n")), FormatError);

  const auto syn = SynonymTable::load(dir.write("s.tsv", "# comment\nbig\tlarge\nbig\thuge\n"));
  ASSERT_NE(syn.find("big"), nullptr);
  EXPECT_EQ(*syn.find("big"), (std::vector<std::string>{"large", "huge"}));
}

TEST(Tables, BundledSynonymsAreLoadedAndSymmetric) {
  const auto& table = SynonymTable::bundled();
  EXPECT_GT(table.size(), 50u);
  const auto* big = table.find("big");
  ASSERT_NE(big, nullptr);
  EXPECT_EQ((*big)[0], "large");
  const auto* large = table.find("large");
  ASSERT_NE(large, nullptr);
  EXPECT_EQ((*large)[0], "big");
  EXPECT_EQ(table.find("the"), nullptr);
}

TEST(Config, Validation) {
  NoiseConfig c;
  c.continuous_rate = 1.0;
  EXPECT_THROW(c.validate(), InvalidParameter);
  c.continuous_rate = 0.5;
  c.swap_prob = 1.5;
  EXPECT_THROW(c.validate(), InvalidParameter);
  EXPECT_EQ(parse_strategy("rule_based"), DiscreteStrategy::kRuleBased);
  EXPECT_THROW(parse_strategy("llm"), InvalidParameter);
}

}  // namespace
}  // namespace denosent::noise
