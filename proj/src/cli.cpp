#include "denosent/cli.hpp"

#include <CLI11.hpp>
#include <charconv>
#include <fstream>
#include <functional>
#include <map>
#include <optional>
#include <ostream>
#include <set>
#include <spdlog/sinks/ostream_sink.h>
#include <spdlog/spdlog.h>

#include "denosent/checkpoint.hpp"
#include "denosent/errors.hpp"
#include "denosent/evaluation.hpp"
#include "denosent/text.hpp"

namespace denosent::cli {

namespace fs = std::filesystem;
using training::load_checkpoint;
using training::read_model_config;
using training::restore_params;

namespace {

// ---- value parsing / printing -------------------------------------------

std::string_view trim(std::string_view s) {
  while (!s.empty() && (s.front() == ' ' || s.front() == '\t')) s.remove_prefix(1);
  while (!s.empty() && (s.back() == ' ' || s.back() == '\t' || s.back() == '\r')) s.remove_suffix(1);
  return s;
}

void parse_into(const std::string& v, std::size_t& out) {
  const auto [ptr, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
  if (ec != std::errc() || ptr != v.data() + v.size()) {
    throw InvalidParameter("expected a non-negative integer, got '" + v + "'");
  }
}

void parse_into(const std::string& v, double& out) {
  const auto [ptr, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
  if (ec != std::errc() || ptr != v.data() + v.size() || !std::isfinite(out)) {
    throw InvalidParameter("expected a number, got '" + v + "'");
  }
}

void parse_into(const std::string& v, bool& out) {
  if (v == "true" || v == "1" || v == "yes") {
    out = true;
  } else if (v == "false" || v == "0" || v == "no") {
    out = false;
  } else {
    throw InvalidParameter("expected true or false, got '" + v + "'");
  }
}

void parse_into(const std::string& v, fs::path& out) { out = v; }
void parse_into(const std::string& v, std::string& out) { out = v; }
void parse_into(const std::string& v, model::EncoderInput& out) { out = model::parse_encoder_input(v); }
void parse_into(const std::string& v, model::Pooling& out) { out = model::parse_pooling(v); }
void parse_into(const std::string& v, noise::DiscreteStrategy& out) { out = noise::parse_strategy(v); }
void parse_into(const std::string& v, objectives::InfoNceDenominator& out) {
  out = objectives::parse_denominator(v);
}
void parse_into(const std::string& v, ops::Reduction& out) { out = objectives::parse_reduction(v); }

std::string show(std::size_t v) { return std::to_string(v); }
std::string show(double v) {
  char buf[32];
  const auto [ptr, ec] = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, ptr);
}
std::string show(bool v) { return v ? "true" : "false"; }
std::string show(const fs::path& v) { return v.string(); }
std::string show(const std::string& v) { return v; }
template <typename E>
  requires std::is_enum_v<E>
std::string show(E v) {
  using model::to_string, noise::to_string, objectives::to_string;
  return std::string(to_string(v));
}

// ---- settings registry ----------------------------------------------------

struct Setting {
  std::string key;
  std::string help;
  std::function<void(RunConfig&, const std::string&)> apply;
  std::function<std::string(const RunConfig&)> print;
  bool is_flag = false;
};

template <typename Ref>
Setting field(std::string key, std::string help, Ref ref) {
  Setting s;
  s.key = std::move(key);
  s.help = std::move(help);
  s.apply = [ref](RunConfig& c, const std::string& v) { parse_into(v, ref(c)); };
  s.print = [ref](const RunConfig& c) { return show(ref(const_cast<RunConfig&>(c))); };
  return s;
}

std::string objective_name(const training::TrainConfig& t) {
  if (t.w_contrastive > 0.0 && t.w_denoising > 0.0) return "combined";
  if (t.w_contrastive > 0.0) return "contrastive";
  if (t.w_denoising > 0.0) return "denoising";
  return "none";
}

#define DS_FIELD(key, help, expr) field(key, help, [](RunConfig& c) -> auto& { return expr; })

const std::vector<Setting>& registry() {
  static const std::vector<Setting> settings = [] {
    std::vector<Setting> s{
        DS_FIELD("corpus", "training corpus, one sentence per line", c.corpus),
        DS_FIELD("vocab", "vocabulary file", c.vocab),
        DS_FIELD("paraphrases", "paraphrase table: original<TAB>paraphrase", c.paraphrases),
        DS_FIELD("synonyms", "synonym table (token<TAB>synonym); defaults to the bundled list", c.synonyms),
        DS_FIELD("sts", "STS file: a<TAB>b<TAB>score", c.sts),
        DS_FIELD("sts_dev", "STS dev file used for best-checkpoint selection", c.sts_dev),
        DS_FIELD("pairs", "sentence pairs a<TAB>b for diagnostics", c.pairs),
        DS_FIELD("queries", "retrieval queries, one per line", c.queries),
        DS_FIELD("docs", "retrieval documents, one per line", c.docs),
        DS_FIELD("relevance", "query_index<TAB>doc_index per line", c.relevance),
        DS_FIELD("checkpoint", "checkpoint path", c.checkpoint),
        DS_FIELD("metrics", "metrics log path (stdout when unset)", c.metrics),
        DS_FIELD("input", "input sentences, one per line", c.input),
        DS_FIELD("output", "output path", c.output),
        DS_FIELD("report", "report path (stdout when unset)", c.report),
        DS_FIELD("min_count", "minimum token frequency", c.min_count),
        DS_FIELD("max_vocab", "vocabulary size cap including specials (0 = none)", c.max_vocab),
        DS_FIELD("mode", "evaluation mode: sts, retrieval or diagnostics", c.mode),
        DS_FIELD("k", "retrieval cutoff", c.k),

        DS_FIELD("d_model", "hidden size", c.model.d),
        DS_FIELD("enc_layers", "encoder layers", c.model.enc_layers),
        DS_FIELD("dec_layers", "decoder layers", c.model.dec_layers),
        DS_FIELD("enc_heads", "encoder attention heads", c.model.enc_heads),
        DS_FIELD("dec_heads", "decoder attention heads", c.model.dec_heads),
        DS_FIELD("ffn_mult", "feed-forward width multiplier", c.model.ffn_mult),
        DS_FIELD("max_len", "maximum sentence length in tokens", c.model.max_len),
        DS_FIELD("internal_dropout", "dropout inside encoder and decoder blocks", c.model.internal_dropout),
        DS_FIELD("init_std", "std of the normal weight init", c.model.init_std),
        DS_FIELD("encoder_input", "sentence fed to the encoder: original or augmented", c.model.encoder_input),
        DS_FIELD("pooling", "pooled position: mask or first", c.model.pooling),

        DS_FIELD("strategy", "discrete noise: table, rule_based or none", c.noise.strategy),
        DS_FIELD("dropout_rate", "continuous noise rate on decoder input embeddings", c.noise.continuous_rate),
        DS_FIELD("swap_prob", "rule-based adjacent swap probability", c.noise.swap_prob),
        DS_FIELD("synonym_prob", "rule-based synonym substitution probability", c.noise.synonym_prob),
    };

    Setting objective;
    objective.key = "objective";
    objective.help = "combined, contrastive or denoising (sets both loss weights)";
    objective.apply = [](RunConfig& c, const std::string& v) {
      if (v == "combined") {
        c.train.w_contrastive = 1.0, c.train.w_denoising = 1.0;
      } else if (v == "contrastive") {
        c.train.w_contrastive = 1.0, c.train.w_denoising = 0.0;
      } else if (v == "denoising") {
        c.train.w_contrastive = 0.0, c.train.w_denoising = 1.0;
      } else {
        throw InvalidParameter("expected combined, contrastive or denoising, got '" + v + "'");
      }
    };
    objective.print = [](const RunConfig& c) { return objective_name(c.train); };
    s.push_back(objective);

    const std::vector<Setting> train{
        DS_FIELD("w_contrastive", "contrastive loss weight", c.train.w_contrastive),
        DS_FIELD("w_denoising", "denoising loss weight", c.train.w_denoising),
        DS_FIELD("batch_size", "sentences per step", c.train.batch_size),
        DS_FIELD("steps", "total optimization steps", c.train.steps),
        DS_FIELD("lr", "AdamW learning rate", c.train.lr),
        DS_FIELD("tau", "InfoNCE temperature", c.train.tau),
        DS_FIELD("weight_decay", "decoupled weight decay", c.train.weight_decay),
        DS_FIELD("clip_norm", "global gradient-norm clip (<= 0 disables)", c.train.clip_norm),
        DS_FIELD("warmup_steps", "linear warmup steps (0 = constant lr)", c.train.warmup_steps),
        DS_FIELD("seed", "seed for every random stream", c.train.seed),
        DS_FIELD("eval_every", "checkpoint / evaluation cadence in steps", c.train.eval_every),
        DS_FIELD("denominator", "InfoNCE denominator: with_positive or negatives_only", c.train.denominator),
        DS_FIELD("reduction", "denoising loss reduction: mean or sum", c.train.reduction),
    };
    s.insert(s.end(), train.begin(), train.end());

    Setting json = DS_FIELD("json", "append a JSON line to the report", c.json);
    json.is_flag = true;
    s.push_back(json);
    Setting resume = DS_FIELD("resume", "continue from --checkpoint when it exists", c.resume);
    resume.is_flag = true;
    s.push_back(resume);
    return s;
  }();
  return settings;
}

#undef DS_FIELD

const Setting* find_setting(std::string_view key) {
  for (const auto& s : registry()) {
    if (s.key == key) return &s;
  }
  return nullptr;
}

std::string flag_name(std::string key) {
  for (auto& ch : key) {
    if (ch == '_') ch = '-';
  }
  return "--" + key;
}

// ---- commands -------------------------------------------------------------

struct CommandSpec {
  std::string name;
  std::string help;
  std::vector<std::string> keys;
  std::vector<std::string> required;
  std::vector<std::string> inputs;  // paths that must exist when set
  std::function<int(const RunConfig&, std::ostream&)> run;
};

const std::vector<std::string> kModelKeys{"d_model",   "enc_layers", "dec_layers",       "enc_heads",
                                          "dec_heads", "ffn_mult",   "max_len",          "internal_dropout",
                                          "init_std",  "encoder_input", "pooling"};
const std::vector<std::string> kNoiseKeys{"strategy", "dropout_rate", "swap_prob", "synonym_prob",
                                          "paraphrases", "synonyms"};
const std::vector<std::string> kTrainKeys{"objective", "w_contrastive", "w_denoising", "batch_size",
                                          "steps", "lr", "tau", "weight_decay", "clip_norm",
                                          "warmup_steps", "seed", "eval_every", "denominator", "reduction"};

std::vector<std::string> concat(std::initializer_list<std::vector<std::string>> parts) {
  std::vector<std::string> out;
  for (const auto& p : parts) out.insert(out.end(), p.begin(), p.end());
  return out;
}

std::optional<noise::ParaphraseTable> load_paraphrases(const RunConfig& c) {
  if (c.paraphrases.empty()) return std::nullopt;
  return noise::ParaphraseTable::load(c.paraphrases);
}

// The bundled list unless a file is given.
std::optional<noise::SynonymTable> load_synonyms(const RunConfig& c) {
  if (c.synonyms.empty()) return noise::SynonymTable::bundled();
  return noise::SynonymTable::load(c.synonyms);
}

template <typename T>
const T* ptr(const std::optional<T>& o) {
  return o ? &*o : nullptr;
}

std::ofstream open_output(const fs::path& path, std::ios::openmode mode = std::ios::trunc) {
  std::ofstream out(path, std::ios::binary | std::ios::out | mode);
  if (!out) throw IoError("cannot open " + path.string() + " for writing");
  return out;
}

struct LoadedModel {
  model::ModelConfig config;
  model::ModelParams<float> params;
  text::Vocabulary vocab;
};

LoadedModel load_model(const RunConfig& c) {
  const auto checkpoint = load_checkpoint(c.checkpoint);
  auto config = read_model_config(checkpoint);
  auto vocab = text::Vocabulary::load(c.vocab);
  if (vocab.size() != config.vocab_size) {
    throw IncompatibleCheckpoint("vocabulary " + c.vocab.string() + " has " +
                                 std::to_string(vocab.size()) + " entries but checkpoint " +
                                 c.checkpoint.string() + " was trained with " +
                                 std::to_string(config.vocab_size));
  }
  auto params = restore_params(checkpoint, config);
  return {config, std::move(params), std::move(vocab)};
}

int cmd_build_vocab(const RunConfig& c, std::ostream& out) {
  const auto corpus = text::read_corpus(c.corpus);
  const auto vocab = text::Vocabulary::build(corpus, c.min_count, c.max_vocab);
  vocab.save(c.vocab);
  spdlog::info("wrote {} tokens to {}", vocab.size(), c.vocab.string());
  out << vocab.size() << '\n';
  return kOk;
}

int cmd_augment(const RunConfig& c, std::ostream&) {
  const auto corpus = text::read_corpus(c.corpus);
  const auto table = load_paraphrases(c);
  const auto synonyms = load_synonyms(c);
  const RngStream root = RngStream(c.train.seed, 0).fork("augment");
  auto out = open_output(c.output);
  for (std::size_t i = 0; i < corpus.size(); ++i) {
    out << corpus[i] << '\t'
        << noise::discrete_augment(corpus[i], c.noise, ptr(table), ptr(synonyms), root.fork(i)) << '\n';
  }
  if (!out) throw IoError("failed writing " + c.output.string());
  spdlog::info("wrote {} pairs to {}", corpus.size(), c.output.string());
  return kOk;
}

int cmd_train(const RunConfig& c, std::ostream& out) {
  const auto vocab = text::Vocabulary::load(c.vocab);
  const auto corpus = text::read_corpus(c.corpus);
  const auto table = load_paraphrases(c);
  const auto synonyms = load_synonyms(c);
  const training::TrainingResources resources{&vocab, ptr(table), ptr(synonyms)};

  auto train_config = c.train;
  train_config.checkpoint_path = c.checkpoint;
  auto model_config = c.model;
  model_config.vocab_size = vocab.size();

  std::optional<training::Trainer> trainer;
  const bool resuming = c.resume && fs::exists(c.checkpoint);
  if (resuming) {
    const auto checkpoint = load_checkpoint(c.checkpoint);
    if (read_model_config(checkpoint).vocab_size != vocab.size()) {
      throw IncompatibleCheckpoint("checkpoint " + c.checkpoint.string() +
                                   " was trained with a different vocabulary size than " +
                                   c.vocab.string());
    }
    trainer.emplace(training::Trainer::resume(checkpoint, c.noise, train_config, resources));
    spdlog::info("resuming {} at step {} (model shape taken from the checkpoint)",
                 c.checkpoint.string(), trainer->step());
  } else {
    trainer.emplace(model_config, c.noise, train_config, resources);
  }

  std::ofstream metrics_file;
  training::LoopHooks hooks;
  hooks.metrics = &out;
  if (!c.metrics.empty()) {
    metrics_file = open_output(c.metrics, resuming ? std::ios::app : std::ios::trunc);
    hooks.metrics = &metrics_file;
  }
  std::vector<text::EvalRecord> dev;
  if (!c.sts_dev.empty()) {
    dev = text::load_sts(c.sts_dev);
    hooks.evaluate = [&](std::uint64_t) -> std::optional<double> {
      const auto embed = evaluation::model_embedder(trainer->params(), trainer->model_config(), vocab);
      return evaluation::eval_sts(dev, embed).spearman;
    };
  }
  const auto result = trainer->train_loop(corpus, hooks);
  if (!result.history.empty()) {
    const auto& last = result.history.back();
    spdlog::info("finished at step {}: combined {:.4f} contrastive {:.4f} denoising {:.4f} acc {:.4f}",
                 last.step, last.combined, last.contrastive, last.denoising, last.token_accuracy);
  }
  if (result.best_score) {
    spdlog::info("best dev spearman {:.4f} at step {}", *result.best_score, result.best_step);
  }
  return kOk;
}

int cmd_embed(const RunConfig& c, std::ostream&) {
  const auto lines = text::read_lines(c.input);
  auto out = open_output(c.output);
  if (lines.empty()) {
    spdlog::warn("{} is empty; wrote an empty embeddings file", c.input.string());
    return kOk;
  }
  const auto loaded = load_model(c);
  const auto z = model::embed_sentences(lines, loaded.params, loaded.config, loaded.vocab);
  const std::size_t d = z.dims()[1];
  const auto values = z.values();
  char buf[32];
  for (std::size_t i = 0; i < lines.size(); ++i) {
    out << i << '\t';
    for (std::size_t j = 0; j < d; ++j) {
      const auto [end, ec] = std::to_chars(buf, buf + sizeof buf, values[i * d + j]);
      if (j > 0) out << ' ';
      out.write(buf, end - buf);
    }
    out << '\n';
  }
  if (!out) throw IoError("failed writing " + c.output.string());
  spdlog::info("wrote {} embeddings of width {} to {}", lines.size(), d, c.output.string());
  return kOk;
}

std::vector<std::pair<std::string, std::string>> load_pairs(const fs::path& path) {
  const auto lines = text::read_lines(path);
  std::vector<std::pair<std::string, std::string>> out;
  for (std::size_t i = 0; i < lines.size(); ++i) {
    if (lines[i].empty()) continue;
    const auto fields = text::split_tabs(lines[i]);
    if (fields.size() < 2 || fields[0].empty() || fields[1].empty()) {
      throw FormatError(path.string(), i + 1, "expected a<TAB>b");
    }
    out.emplace_back(std::string(fields[0]), std::string(fields[1]));
  }
  return out;
}

int cmd_eval(const RunConfig& c, std::ostream& out) {
  const auto loaded = load_model(c);
  const auto embed = evaluation::model_embedder(loaded.params, loaded.config, loaded.vocab);
  evaluation::ReportFields fields{{"mode", c.mode}};
  auto append = [&](const evaluation::ReportFields& more) {
    fields.insert(fields.end(), more.begin(), more.end());
  };
  if (c.mode == "sts") {
    const auto records = text::load_sts(c.sts);
    append(evaluation::report_fields(evaluation::eval_sts(records, embed)));
  } else if (c.mode == "retrieval") {
    const auto queries = text::read_lines(c.queries);
    const auto docs = text::read_lines(c.docs);
    if (queries.empty()) throw EmptyInput(c.queries.string() + " has no queries");
    if (docs.empty()) throw EmptyInput(c.docs.string() + " has no documents");
    const auto relevant = evaluation::load_relevance(c.relevance, queries.size(), docs.size());
    append(evaluation::report_fields(
        evaluation::retrieval_metrics(embed(queries), embed(docs), relevant, c.k)));
  } else {
    const auto pairs = load_pairs(c.pairs);
    std::vector<std::string> left, right;
    for (const auto& [a, b] : pairs) {
      left.push_back(a);
      right.push_back(b);
    }
    if (left.size() < 2) throw DegenerateBatch(c.pairs.string() + " needs at least 2 pairs");
    fields.emplace_back("n_pairs", std::to_string(left.size()));
    append(evaluation::report_fields(evaluation::space_diagnostics(embed(left), embed(right))));
  }
  if (c.report.empty()) {
    evaluation::write_report(out, fields, c.json);
  } else {
    evaluation::write_report(c.report, fields, c.json);
    spdlog::info("wrote report to {}", c.report.string());
  }
  return kOk;
}

const std::vector<CommandSpec>& commands() {
  static const std::vector<CommandSpec> specs{
      {"build-vocab", "Build a vocabulary file from a corpus",
       {"corpus", "vocab", "min_count", "max_vocab"},
       {"corpus", "vocab"},
       {"corpus"},
       cmd_build_vocab},
      {"augment", "Write original<TAB>augmented pairs using the discrete noise stage",
       concat({{"corpus", "output", "seed"}, kNoiseKeys}),
       {"corpus", "output"},
       {"corpus", "paraphrases", "synonyms"},
       cmd_augment},
      {"train", "Train a model and write checkpoints plus a metrics log",
       concat({{"corpus", "vocab", "checkpoint", "metrics", "sts_dev", "resume"}, kModelKeys, kNoiseKeys,
               kTrainKeys}),
       {"corpus", "vocab", "checkpoint"},
       {"corpus", "vocab", "paraphrases", "synonyms", "sts_dev"},
       cmd_train},
      {"embed", "Write one sentence vector per input line",
       {"checkpoint", "vocab", "input", "output"},
       {"checkpoint", "vocab", "input", "output"},
       {"checkpoint", "vocab", "input"},
       cmd_embed},
      {"eval", "Score a checkpoint: STS spearman, retrieval MRR/MAP or space diagnostics",
       {"checkpoint", "vocab", "mode", "sts", "queries", "docs", "relevance", "pairs", "k", "report", "json"},
       {"checkpoint", "vocab"},
       {"checkpoint", "vocab", "sts", "queries", "docs", "relevance", "pairs"},
       cmd_eval},
  };
  return specs;
}

// Collects every problem with a command's effective configuration.
std::vector<std::string> validate(const CommandSpec& spec, const RunConfig& c,
                                  const std::set<std::string>& given) {
  std::vector<std::string> problems;
  for (const auto& key : spec.required) {
    if (!given.count(key)) problems.push_back(flag_name(key) + " is required");
  }
  for (const auto& key : spec.inputs) {
    if (!given.count(key)) continue;
    const fs::path path = find_setting(key)->print(c);
    if (!fs::exists(path)) {
      if (key == "checkpoint" && spec.name == "train") continue;
      problems.push_back(flag_name(key) + ": " + path.string() + " does not exist");
    }
  }
  auto check = [&](auto&& fn) {
    try {
      fn();
    } catch (const Error& e) {
      problems.push_back(e.what());
    }
  };
  const std::set<std::string> keys(spec.keys.begin(), spec.keys.end());
  if (keys.count("d_model")) {
    check([&] {
      auto m = c.model;
      if (m.vocab_size == 0) m.vocab_size = 5;  // real size comes from the vocab file
      m.validate();
    });
  }
  if (keys.count("strategy")) {
    check([&] { c.noise.validate(); });
    if (c.noise.strategy == noise::DiscreteStrategy::kTable && c.paraphrases.empty()) {
      problems.push_back("strategy table needs --paraphrases");
    }
  }
  if (keys.count("steps")) check([&] { c.train.validate(); });
  if (spec.name == "eval") {
    if (c.mode == "sts") {
      if (c.sts.empty()) problems.push_back("--mode sts needs --sts");
    } else if (c.mode == "retrieval") {
      for (const char* k : {"queries", "docs", "relevance"}) {
        if (!given.count(k)) problems.push_back(std::string("--mode retrieval needs ") + flag_name(k));
      }
      if (c.k < 1) problems.push_back("--k must be >= 1");
    } else if (c.mode == "diagnostics") {
      if (c.pairs.empty()) problems.push_back("--mode diagnostics needs --pairs");
    } else {
      problems.push_back("--mode must be sts, retrieval or diagnostics, got '" + c.mode + "'");
    }
  }
  return problems;
}

// Routes spdlog's default logger to `err` for the lifetime of the guard.
class LogToStream {
 public:
  explicit LogToStream(std::ostream& err) : previous_(spdlog::default_logger()) {
    auto sink = std::make_shared<spdlog::sinks::ostream_sink_mt>(err, true);
    auto logger = std::make_shared<spdlog::logger>("denosent", sink);
    logger->set_pattern("[%l] %v");
    logger->set_level(previous_ ? previous_->level() : spdlog::level::info);
    spdlog::set_default_logger(logger);
  }
  ~LogToStream() { spdlog::set_default_logger(previous_); }
  LogToStream(const LogToStream&) = delete;
  LogToStream& operator=(const LogToStream&) = delete;

 private:
  std::shared_ptr<spdlog::logger> previous_;
};

}  // namespace

std::vector<ConfigEntry> read_config_file(const fs::path& path) {
  const auto lines = text::read_lines(path);
  std::vector<ConfigEntry> out;
  for (std::size_t i = 0; i < lines.size(); ++i) {
    std::string_view line = lines[i];
    if (const auto hash = line.find('#'); hash != std::string_view::npos) line = line.substr(0, hash);
    line = trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string_view::npos) throw FormatError(path.string(), i + 1, "expected key = value");
    const auto key = trim(line.substr(0, eq));
    const auto value = trim(line.substr(eq + 1));
    if (key.empty()) throw FormatError(path.string(), i + 1, "missing key");
    out.push_back({std::string(key), std::string(value), i + 1});
  }
  return out;
}

int run_cli(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  LogToStream log_guard(err);

  CLI::App app{"DenoSent sentence-representation training and evaluation"};
  app.require_subcommand(1);
  app.set_help_all_flag("--help-all", "Show help for every subcommand");

  struct Bound {
    const CommandSpec* spec;
    CLI::App* app;
    std::string config_path;
    std::map<std::string, std::string> values;
    std::map<std::string, CLI::Option*> options;
  };
  std::vector<Bound> bound(commands().size());
  for (std::size_t i = 0; i < commands().size(); ++i) {
    const auto& spec = commands()[i];
    auto& b = bound[i];
    b.spec = &spec;
    b.app = app.add_subcommand(spec.name, spec.help);
    b.app->add_option("--config", b.config_path, "flat key = value config file; flags override it");
    for (const auto& key : spec.keys) {
      const Setting* s = find_setting(key);
      auto& slot = b.values[key];
      if (s->is_flag) {
        b.options[key] = b.app->add_flag(flag_name(key), s->help);
      } else {
        b.options[key] = b.app->add_option(flag_name(key), slot, s->help);
      }
      // A repeated flag overrides its earlier value, as flags override the file.
      b.options[key]->multi_option_policy(CLI::MultiOptionPolicy::TakeLast);
    }
  }

  std::vector<const char*> argv;
  for (const auto& a : args) argv.push_back(a.c_str());
  try {
    app.parse(static_cast<int>(argv.size()), argv.data());
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e, out, err);
    return code == 0 ? kOk : kUsageError;
  }

  Bound* chosen = nullptr;
  for (auto& b : bound) {
    if (b.app->parsed()) chosen = &b;
  }
  const CommandSpec& spec = *chosen->spec;

  std::vector<std::string> problems;
  std::map<std::string, std::string> merged;
  if (!chosen->config_path.empty()) {
    try {
      for (const auto& entry : read_config_file(chosen->config_path)) {
        if (find_setting(entry.key) == nullptr) {
          problems.push_back(chosen->config_path + ":" + std::to_string(entry.line) +
                             ": unknown key '" + entry.key + "'");
        } else if (std::find(spec.keys.begin(), spec.keys.end(), entry.key) != spec.keys.end()) {
          merged[entry.key] = entry.value;
        }
      }
    } catch (const Error& e) {
      problems.push_back(e.what());
    }
  }
  for (const auto& [key, option] : chosen->options) {
    if (option->count() == 0) continue;
    merged[key] = find_setting(key)->is_flag ? "true" : chosen->values[key];
  }

  RunConfig config;
  std::set<std::string> given;
  for (const auto& setting : registry()) {
    const auto it = merged.find(setting.key);
    if (it == merged.end()) continue;
    try {
      setting.apply(config, it->second);
      given.insert(setting.key);
    } catch (const Error& e) {
      problems.push_back(flag_name(setting.key) + ": " + e.what());
    }
  }
  if (problems.empty()) {
    const auto more = validate(spec, config, given);
    problems.insert(problems.end(), more.begin(), more.end());
  }
  if (!problems.empty()) {
    err << "error: invalid " << spec.name << " configuration:\n";
    for (const auto& p : problems) err << "  " << p << '\n';
    err << '\n' << chosen->app->help();
    return kUsageError;
  }

  spdlog::info("denosent {}", spec.name);
  for (const auto& key : spec.keys) {
    spdlog::info("  {} = {}", key, find_setting(key)->print(config));
  }

  try {
    return spec.run(config, out);
  } catch (const std::exception& e) {
    spdlog::error("{}", e.what());
    return kRuntimeFailure;
  }
}

}  // namespace denosent::cli
