#include "denosent/checkpoint.hpp"

#include <bit>
#include <charconv>
#include <cstring>
#include <fstream>
#include <iterator>
#include <sstream>

#include "denosent/errors.hpp"

namespace denosent::training {

namespace {

constexpr char kMagic[4] = {'D', 'N', 'S', 'C'};

class Writer {
 public:
  template <typename U>
  void put(U value) {
    using Bits = std::conditional_t<sizeof(U) == 8, std::uint64_t,
                                    std::conditional_t<sizeof(U) == 4, std::uint32_t,
                                                       std::conditional_t<sizeof(U) == 2,
                                                                          std::uint16_t,
                                                                          std::uint8_t>>>;
    const Bits bits = std::bit_cast<Bits>(value);
    for (std::size_t i = 0; i < sizeof(U); ++i) bytes_.push_back(static_cast<char>(bits >> (8 * i)));
  }
  void put_bytes(std::string_view s) { bytes_.append(s); }
  const std::string& bytes() const { return bytes_; }

 private:
  std::string bytes_;
};

class Reader {
 public:
  explicit Reader(std::string bytes) : bytes_(std::move(bytes)) {}

  template <typename U>
  U get() {
    using Bits = std::conditional_t<sizeof(U) == 8, std::uint64_t,
                                    std::conditional_t<sizeof(U) == 4, std::uint32_t,
                                                       std::conditional_t<sizeof(U) == 2,
                                                                          std::uint16_t,
                                                                          std::uint8_t>>>;
    need(sizeof(U));
    Bits bits = 0;
    for (std::size_t i = 0; i < sizeof(U); ++i)
      bits |= static_cast<Bits>(static_cast<unsigned char>(bytes_[pos_ + i])) << (8 * i);
    pos_ += sizeof(U);
    return std::bit_cast<U>(bits);
  }

  std::string get_bytes(std::size_t n) {
    need(n);
    std::string out = bytes_.substr(pos_, n);
    pos_ += n;
    return out;
  }

  bool done() const { return pos_ == bytes_.size(); }

 private:
  void need(std::size_t n) const {
    if (bytes_.size() - pos_ < n) throw IncompatibleCheckpoint("checkpoint is truncated");
  }

  std::string bytes_;
  std::size_t pos_ = 0;
};

std::uint64_t parse_u64(const std::string& key, const std::string& value) {
  std::uint64_t out = 0;
  const auto [end, ec] = std::from_chars(value.data(), value.data() + value.size(), out);
  if (ec != std::errc() || end != value.data() + value.size()) {
    throw IncompatibleCheckpoint("checkpoint config key " + key + " is not an integer");
  }
  return out;
}

double parse_double(const std::string& key, const std::string& value) {
  double out = 0;
  const auto [end, ec] = std::from_chars(value.data(), value.data() + value.size(), out);
  if (ec != std::errc() || end != value.data() + value.size()) {
    throw IncompatibleCheckpoint("checkpoint config key " + key + " is not a number");
  }
  return out;
}

std::string format_double(double v) {
  char buf[64];
  const auto [end, ec] = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, end);
}

}  // namespace

const StoredTensor* Checkpoint::find(const std::string& name) const {
  for (const auto& t : tensors)
    if (t.name == name) return &t;
  return nullptr;
}

const std::string& Checkpoint::get(const std::string& key) const {
  auto it = config.find(key);
  if (it == config.end()) throw IncompatibleCheckpoint("checkpoint lacks config key " + key);
  return it->second;
}

void save_checkpoint(const std::filesystem::path& path, const Checkpoint& checkpoint) {
  Writer w;
  w.put_bytes(std::string_view(kMagic, 4));
  w.put(kCheckpointVersion);
  std::string block;
  auto config = checkpoint.config;
  config["tensor_count"] = std::to_string(checkpoint.tensors.size());
  for (const auto& [k, v] : config) {
    if (k.find_first_of("=\n") != std::string::npos || v.find('\n') != std::string::npos) {
      throw InvalidParameter("checkpoint config entry '" + k + "' cannot be encoded");
    }
    block += k + "=" + v + "\n";
  }
  w.put(static_cast<std::uint64_t>(block.size()));
  w.put_bytes(block);
  for (const auto& t : checkpoint.tensors) {
    if (t.name.size() > 0xFFFF || t.dims.size() > 0xFF || shape_size(t.dims) != t.values.size()) {
      throw InvalidParameter("checkpoint tensor '" + t.name + "' cannot be encoded");
    }
    w.put(static_cast<std::uint16_t>(t.name.size()));
    w.put_bytes(t.name);
    w.put(static_cast<std::uint8_t>(t.dims.size()));
    for (auto d : t.dims) w.put(static_cast<std::uint64_t>(d));
    for (float v : t.values) w.put(v);
  }

  auto tmp = path;
  tmp += ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw IoError("cannot write checkpoint " + tmp.string());
    out.write(w.bytes().data(), static_cast<std::streamsize>(w.bytes().size()));
    if (!out) throw IoError("failed writing checkpoint " + tmp.string());
  }
  std::error_code ec;
  std::filesystem::rename(tmp, path, ec);
  if (ec) throw IoError("cannot move checkpoint into place at " + path.string() + ": " + ec.message());
}

Checkpoint load_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open checkpoint " + path.string());
  std::string bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  Reader r(std::move(bytes));

  if (r.get_bytes(4) != std::string_view(kMagic, 4)) {
    throw IncompatibleCheckpoint(path.string() + " is not a checkpoint (bad magic)");
  }
  const auto version = r.get<std::uint32_t>();
  if (version != kCheckpointVersion) {
    throw IncompatibleCheckpoint(path.string() + ": unsupported checkpoint version " +
                                 std::to_string(version));
  }
  Checkpoint cp;
  const auto block_size = r.get<std::uint64_t>();
  std::istringstream block(r.get_bytes(block_size));
  std::string line;
  while (std::getline(block, line)) {
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) throw IncompatibleCheckpoint("malformed checkpoint config line");
    cp.config[line.substr(0, eq)] = line.substr(eq + 1);
  }
  const std::uint64_t count = parse_u64("tensor_count", cp.get("tensor_count"));
  for (std::uint64_t i = 0; i < count; ++i) {
    StoredTensor t;
    t.name = r.get_bytes(r.get<std::uint16_t>());
    const auto rank = r.get<std::uint8_t>();
    std::uint64_t total = 1;
    for (std::uint8_t k = 0; k < rank; ++k) {
      const auto d = r.get<std::uint64_t>();
      if (d == 0 || d > (std::uint64_t{1} << 32)) {
        throw IncompatibleCheckpoint("checkpoint tensor " + t.name + " has an invalid extent");
      }
      t.dims.push_back(static_cast<std::size_t>(d));
      total *= d;
      if (total > (std::uint64_t{1} << 34)) {
        throw IncompatibleCheckpoint("checkpoint tensor " + t.name + " is implausibly large");
      }
    }
    t.values.resize(static_cast<std::size_t>(total));
    for (auto& v : t.values) v = r.get<float>();
    cp.tensors.push_back(std::move(t));
  }
  if (!r.done()) throw IncompatibleCheckpoint("checkpoint has trailing bytes");
  return cp;
}

void write_model_config(std::map<std::string, std::string>& out, const model::ModelConfig& c) {
  out["model.d"] = std::to_string(c.d);
  out["model.enc_layers"] = std::to_string(c.enc_layers);
  out["model.dec_layers"] = std::to_string(c.dec_layers);
  out["model.enc_heads"] = std::to_string(c.enc_heads);
  out["model.dec_heads"] = std::to_string(c.dec_heads);
  out["model.ffn_mult"] = std::to_string(c.ffn_mult);
  out["model.vocab_size"] = std::to_string(c.vocab_size);
  out["model.max_len"] = std::to_string(c.max_len);
  out["model.internal_dropout"] = format_double(c.internal_dropout);
  out["model.init_std"] = format_double(c.init_std);
  out["model.encoder_input"] = std::string(model::to_string(c.encoder_input));
  out["model.pooling"] = std::string(model::to_string(c.pooling));
}

model::ModelConfig read_model_config(const Checkpoint& cp) {
  model::ModelConfig c;
  auto u = [&cp](const char* key) { return static_cast<std::size_t>(parse_u64(key, cp.get(key))); };
  c.d = u("model.d");
  c.enc_layers = u("model.enc_layers");
  c.dec_layers = u("model.dec_layers");
  c.enc_heads = u("model.enc_heads");
  c.dec_heads = u("model.dec_heads");
  c.ffn_mult = u("model.ffn_mult");
  c.vocab_size = u("model.vocab_size");
  c.max_len = u("model.max_len");
  c.internal_dropout = parse_double("model.internal_dropout", cp.get("model.internal_dropout"));
  c.init_std = parse_double("model.init_std", cp.get("model.init_std"));
  try {
    c.encoder_input = model::parse_encoder_input(cp.get("model.encoder_input"));
    c.pooling = model::parse_pooling(cp.get("model.pooling"));
    c.validate();
  } catch (const InvalidParameter& e) {
    throw IncompatibleCheckpoint(std::string("checkpoint model config: ") + e.what());
  }
  return c;
}

Checkpoint make_checkpoint(const model::ModelConfig& config, const model::ModelParams<float>& params,
                           const OptimizerState<float>* optimizer, const TrainingProgress& progress,
                           const std::map<std::string, std::string>& extra) {
  Checkpoint cp;
  cp.config = extra;
  write_model_config(cp.config, config);
  cp.config["train.step"] = std::to_string(progress.step);
  cp.config["rng.seed"] = std::to_string(progress.seed);
  const auto named = params.named();
  for (const auto& p : named) {
    cp.tensors.push_back({p.name, p.tensor.dims(),
                          std::vector<float>(p.tensor.values().begin(), p.tensor.values().end())});
  }
  if (optimizer != nullptr) {
    cp.config["opt.present"] = "1";
    cp.config["opt.t"] = std::to_string(optimizer->t);
    cp.config["opt.lr"] = format_double(optimizer->lr);
    cp.config["opt.beta1"] = format_double(optimizer->beta1);
    cp.config["opt.beta2"] = format_double(optimizer->beta2);
    cp.config["opt.eps"] = format_double(optimizer->eps);
    cp.config["opt.weight_decay"] = format_double(optimizer->weight_decay);
    for (std::size_t i = 0; i < named.size(); ++i) {
      cp.tensors.push_back({"opt.m." + named[i].name, named[i].tensor.dims(), optimizer->m[i]});
    }
    for (std::size_t i = 0; i < named.size(); ++i) {
      cp.tensors.push_back({"opt.v." + named[i].name, named[i].tensor.dims(), optimizer->v[i]});
    }
  }
  return cp;
}

model::ModelParams<float> restore_params(const Checkpoint& cp, const model::ModelConfig& config) {
  auto params = model::ModelParams<float>::init(config, RngStream(0));
  for (auto p : params.named()) {
    const StoredTensor* stored = cp.find(p.name);
    if (stored == nullptr) throw IncompatibleCheckpoint("checkpoint lacks parameter " + p.name);
    if (stored->dims != p.tensor.dims()) {
      throw IncompatibleCheckpoint("checkpoint parameter " + p.name + " has shape " +
                                   shape_string(stored->dims) + ", expected " +
                                   shape_string(p.tensor.dims()));
    }
    std::copy(stored->values.begin(), stored->values.end(), p.tensor.mutable_values().begin());
  }
  return params;
}

std::optional<OptimizerState<float>> restore_optimizer(const Checkpoint& cp,
                                                       const model::ModelParams<float>& params) {
  if (!cp.config.contains("opt.present")) return std::nullopt;
  OptimizerState<float> s;
  s.t = parse_u64("opt.t", cp.get("opt.t"));
  s.lr = parse_double("opt.lr", cp.get("opt.lr"));
  s.beta1 = parse_double("opt.beta1", cp.get("opt.beta1"));
  s.beta2 = parse_double("opt.beta2", cp.get("opt.beta2"));
  s.eps = parse_double("opt.eps", cp.get("opt.eps"));
  s.weight_decay = parse_double("opt.weight_decay", cp.get("opt.weight_decay"));
  for (const auto& p : params.named()) {
    for (auto [prefix, dst] : {std::pair{"opt.m.", &s.m}, std::pair{"opt.v.", &s.v}}) {
      const StoredTensor* stored = cp.find(prefix + p.name);
      if (stored == nullptr || stored->values.size() != p.tensor.size()) {
        throw IncompatibleCheckpoint("checkpoint optimizer state for " + p.name +
                                     " is missing or mis-sized");
      }
      dst->push_back(stored->values);
    }
  }
  return s;
}

TrainingProgress read_progress(const Checkpoint& cp) {
  TrainingProgress p;
  p.step = parse_u64("train.step", cp.get("train.step"));
  p.seed = parse_u64("rng.seed", cp.get("rng.seed"));
  return p;
}

}  // namespace denosent::training
