#include <cstdio>
#include <cstring>
#include <fstream>
#include <map>
#include <sstream>

#include "tokendrop/error.hpp"
#include "tokendrop/trainer.hpp"

// Checkpoint layout:
//   text header of "key value" lines, terminated by "end"
//   per array: "array <name> <rank> <dims...>\n" + raw little-endian doubles + "\n"
//   "eof\n"
// Doubles in the header are written as hex floats so they round-trip exactly.
namespace tokendrop {

namespace {

constexpr const char* kMagic = "tokendrop-checkpoint";
constexpr int kFormatVersion = 1;

std::string hex(double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%a", v);
  return buf;
}

using Header = std::map<std::string, std::string>;

struct Array {
  Shape shape;
  std::vector<double> data;
};

void write_array(std::ostream& out, const std::string& name, const Shape& shape,
                 const std::vector<double>& data) {
  out << "array " << name << ' ' << shape.size();
  for (auto d : shape) out << ' ' << d;
  out << '\n';
  out.write(reinterpret_cast<const char*>(data.data()),
            static_cast<std::streamsize>(data.size() * sizeof(double)));
  out << '\n';
}

const std::string& field(const Header& h, const std::string& key) {
  auto it = h.find(key);
  if (it == h.end()) throw CheckpointError("checkpoint header is missing '" + key + "'");
  return it->second;
}

std::size_t size_field(const Header& h, const std::string& key) {
  const auto& v = field(h, key);
  try {
    std::size_t pos = 0;
    const auto n = std::stoull(v, &pos);
    if (pos != v.size()) throw std::invalid_argument(v);
    return static_cast<std::size_t>(n);
  } catch (const std::exception&) {
    throw CheckpointError("checkpoint header field '" + key + "' is not an integer: " + v);
  }
}

double double_field(const Header& h, const std::string& key) {
  const auto& v = field(h, key);
  char* end = nullptr;
  const double d = std::strtod(v.c_str(), &end);
  if (end == v.c_str() || *end != '\0') {
    throw CheckpointError("checkpoint header field '" + key + "' is not a number: " + v);
  }
  return d;
}

bool bool_field(const Header& h, const std::string& key) { return size_field(h, key) != 0; }

void write_header(std::ostream& out, const TrainConfig& c, const TrainingData& data) {
  out << kMagic << '\n';
  out << "format_version " << kFormatVersion << '\n';
  const auto& m = c.model;
  out << "model.d_model " << m.d_model << '\n'
      << "model.d_ffn " << m.d_ffn << '\n'
      << "model.n_layers " << m.n_layers << '\n'
      << "model.n_heads " << m.n_heads << '\n'
      << "model.dropout " << hex(m.dropout) << '\n'
      << "model.max_length " << m.max_length << '\n'
      << "model.shared_vocab " << m.shared_vocab << '\n'
      << "model.tie_dtp " << m.tie_dtp << '\n'
      << "model.tie_output " << m.tie_output << '\n';
  out << "source_vocab " << data.source_vocab.size() << '\n'
      << "target_vocab " << data.target_vocab.size() << '\n'
      << "source_fingerprint " << data.source_vocab.fingerprint() << '\n'
      << "target_fingerprint " << data.target_vocab.fingerprint() << '\n';
  out << "train.max_steps " << c.max_steps << '\n'
      << "train.batch_size " << c.batch_size << '\n'
      << "train.learning_rate " << hex(c.learning_rate) << '\n'
      << "train.beta1 " << hex(c.beta1) << '\n'
      << "train.beta2 " << hex(c.beta2) << '\n'
      << "train.adam_eps " << hex(c.adam_eps) << '\n'
      << "train.warmup_steps " << c.warmup_steps << '\n'
      << "train.clip_norm " << hex(c.clip_norm) << '\n'
      << "train.valid_interval " << c.valid_interval << '\n'
      << "train.seed " << c.seed << '\n'
      << "train.token_drop " << c.token_drop << '\n'
      << "drop.p_source " << hex(c.drop.p_source) << '\n'
      << "drop.p_target " << hex(c.drop.p_target) << '\n'
      << "drop.strategy " << to_string(c.drop.strategy) << '\n'
      << "drop.seed " << c.drop.seed << '\n'
      << "objective.alpha " << hex(c.objective.alpha) << '\n'
      << "objective.beta " << hex(c.objective.beta) << '\n';
}

TrainConfig config_from_header(const Header& h) {
  TrainConfig c;
  auto& m = c.model;
  m.d_model = size_field(h, "model.d_model");
  m.d_ffn = size_field(h, "model.d_ffn");
  m.n_layers = size_field(h, "model.n_layers");
  m.n_heads = size_field(h, "model.n_heads");
  m.dropout = double_field(h, "model.dropout");
  m.max_length = size_field(h, "model.max_length");
  m.shared_vocab = bool_field(h, "model.shared_vocab");
  m.tie_dtp = bool_field(h, "model.tie_dtp");
  m.tie_output = bool_field(h, "model.tie_output");
  c.max_steps = size_field(h, "train.max_steps");
  c.batch_size = size_field(h, "train.batch_size");
  c.learning_rate = double_field(h, "train.learning_rate");
  c.beta1 = double_field(h, "train.beta1");
  c.beta2 = double_field(h, "train.beta2");
  c.adam_eps = double_field(h, "train.adam_eps");
  c.warmup_steps = size_field(h, "train.warmup_steps");
  c.clip_norm = double_field(h, "train.clip_norm");
  c.valid_interval = size_field(h, "train.valid_interval");
  c.seed = size_field(h, "train.seed");
  c.token_drop = bool_field(h, "train.token_drop");
  c.drop.p_source = double_field(h, "drop.p_source");
  c.drop.p_target = double_field(h, "drop.p_target");
  c.drop.strategy = parse_drop_strategy(field(h, "drop.strategy"));
  c.drop.seed = size_field(h, "drop.seed");
  c.objective.alpha = double_field(h, "objective.alpha");
  c.objective.beta = double_field(h, "objective.beta");
  try {
    c.validate();
  } catch (const ConfigError& e) {
    throw CheckpointError(std::string("checkpoint holds an invalid configuration: ") + e.what());
  }
  return c;
}

struct ParsedCheckpoint {
  Header header;
  std::vector<std::string> records;
  std::map<std::string, Array> arrays;
};

ParsedCheckpoint parse(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw CheckpointError("cannot open checkpoint " + path.string());
  ParsedCheckpoint parsed;
  std::string line;
  if (!std::getline(in, line) || line != kMagic) {
    throw CheckpointError(path.string() + " is not a tokendrop checkpoint");
  }
  bool ended = false;
  while (std::getline(in, line)) {
    if (line == "end") {
      ended = true;
      break;
    }
    const auto space = line.find(' ');
    if (space == std::string::npos) throw CheckpointError("malformed checkpoint header line: " + line);
    const std::string key = line.substr(0, space);
    if (key == "record") {
      parsed.records.push_back(line.substr(space + 1));
    } else {
      parsed.header[key] = line.substr(space + 1);
    }
  }
  if (!ended) throw CheckpointError("checkpoint header is truncated");
  if (size_field(parsed.header, "format_version") != kFormatVersion) {
    throw CheckpointError("unsupported checkpoint format version " +
                          field(parsed.header, "format_version"));
  }
  while (std::getline(in, line)) {
    if (line == "eof") return parsed;
    std::istringstream words(line);
    std::string tag, name;
    std::size_t rank = 0;
    words >> tag >> name >> rank;
    if (tag != "array" || words.fail() || rank == 0 || rank > 4) {
      throw CheckpointError("malformed array record in checkpoint: " + line);
    }
    Array array;
    array.shape.resize(rank);
    for (auto& d : array.shape) words >> d;
    if (words.fail()) throw CheckpointError("malformed array shape for " + name);
    array.data.resize(shape_numel(array.shape));
    in.read(reinterpret_cast<char*>(array.data.data()),
            static_cast<std::streamsize>(array.data.size() * sizeof(double)));
    if (!in || in.get() != '\n') throw CheckpointError("array " + name + " is truncated");
    parsed.arrays.emplace(name, std::move(array));
  }
  throw CheckpointError("checkpoint is truncated (no eof marker)");
}

void check_arrays(const ParsedCheckpoint& parsed, const std::vector<NamedTensor>& params,
                  const std::string& prefix) {
  for (const auto& p : params) {
    auto it = parsed.arrays.find(prefix + p.name);
    if (it == parsed.arrays.end()) throw CheckpointError("checkpoint lacks array " + prefix + p.name);
    if (it->second.shape != p.tensor.shape()) {
      throw CheckpointError("array " + prefix + p.name + " has shape " +
                            shape_string(it->second.shape) + ", expected " +
                            shape_string(p.tensor.shape()));
    }
  }
}

void load_parameters(const ParsedCheckpoint& parsed, std::vector<NamedTensor>& params) {
  check_arrays(parsed, params, "");
  for (auto& p : params) {
    const auto& src = parsed.arrays.at(p.name).data;
    std::copy(src.begin(), src.end(), p.tensor.data().begin());
  }
}

void check_vocab(const Header& h, const std::string& side, const Vocabulary& vocab) {
  if (size_field(h, side + "_vocab") != vocab.size()) {
    throw CheckpointError(side + " vocabulary has " + std::to_string(vocab.size()) +
                          " entries but the checkpoint expects " + field(h, side + "_vocab"));
  }
  if (field(h, side + "_fingerprint") != std::to_string(vocab.fingerprint())) {
    throw CheckpointError(side + " vocabulary does not match the one used for the checkpoint");
  }
}

MetricsRecord parse_record(const std::string& line) {
  std::istringstream in(line);
  MetricsRecord r;
  std::string fields[7];
  in >> r.step;
  for (auto& f : fields) in >> f;
  if (in.fail()) throw CheckpointError("malformed run-log record in checkpoint");
  double* targets[] = {&r.l_m, &r.l_rtd, &r.l_dtp, &r.joint, &r.perplexity, &r.valid_ppl, &r.elapsed_s};
  for (int i = 0; i < 7; ++i) *targets[i] = std::strtod(fields[i].c_str(), nullptr);
  return r;
}

}  // namespace

void save_checkpoint(const Trainer& trainer, const std::filesystem::path& path) {
  const auto tmp = std::filesystem::path(path.string() + ".tmp");
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw CheckpointError("cannot write checkpoint " + path.string());
    write_header(out, trainer.config_, trainer.data_);
    out << "step " << trainer.step_ << '\n'
        << "epoch " << trainer.epoch_ << '\n'
        << "cursor " << trainer.cursor_ << '\n'
        << "batches_built " << !trainer.epoch_batches_.empty() << '\n'
        << "adam_steps " << trainer.optimizer_.steps_taken() << '\n'
        << "drop_rng " << trainer.drop_rng_.serialize() << '\n'
        << "dropout_rng " << trainer.dropout_rng_.serialize() << '\n'
        << "interval_steps " << trainer.interval_steps_ << '\n'
        << "sum_l_m " << hex(trainer.sum_l_m_) << '\n'
        << "sum_l_rtd " << hex(trainer.sum_l_rtd_) << '\n'
        << "sum_l_dtp " << hex(trainer.sum_l_dtp_) << '\n'
        << "sum_joint " << hex(trainer.sum_joint_) << '\n'
        << "elapsed_offset " << hex(trainer.elapsed_offset_) << '\n';
    std::string nonzero;
    for (bool b : trainer.ever_nonzero_) nonzero += b ? '1' : '0';
    out << "ever_nonzero " << nonzero << '\n';
    for (const auto& r : trainer.log_) {
      out << "record " << r.step << ' ' << hex(r.l_m) << ' ' << hex(r.l_rtd) << ' ' << hex(r.l_dtp)
          << ' ' << hex(r.joint) << ' ' << hex(r.perplexity) << ' ' << hex(r.valid_ppl) << ' '
          << hex(r.elapsed_s) << '\n';
    }
    out << "end\n";
    const auto params = trainer.model_.params().named();
    const auto& optimizer = trainer.optimizer_;
    for (std::size_t i = 0; i < params.size(); ++i) {
      const auto& t = params[i].tensor;
      write_array(out, params[i].name, t.shape(), t.storage()->data);
      write_array(out, "adam_m." + params[i].name, t.shape(), optimizer.first_moments()[i]);
      write_array(out, "adam_v." + params[i].name, t.shape(), optimizer.second_moments()[i]);
    }
    out << "eof\n";
    if (!out) throw CheckpointError("failed while writing checkpoint " + path.string());
  }
  std::filesystem::rename(tmp, path);
}

Trainer load_checkpoint(const std::filesystem::path& path, TrainingData data) {
  const ParsedCheckpoint parsed = parse(path);
  const auto& h = parsed.header;
  TrainConfig config = config_from_header(h);
  check_vocab(h, "source", data.source_vocab);
  check_vocab(h, "target", data.target_vocab);

  std::vector<MetricsRecord> records;
  for (const auto& line : parsed.records) records.push_back(parse_record(line));
  const std::string nonzero = field(h, "ever_nonzero");
  Rng drop_rng = Rng::deserialize(field(h, "drop_rng"));
  Rng dropout_rng = Rng::deserialize(field(h, "dropout_rng"));

  Trainer trainer(config, std::move(data));
  auto params = trainer.model_.params().named();
  if (nonzero.size() != params.size()) throw CheckpointError("parameter list length mismatch");
  check_arrays(parsed, params, "adam_m.");
  check_arrays(parsed, params, "adam_v.");
  load_parameters(parsed, params);
  for (std::size_t i = 0; i < params.size(); ++i) {
    trainer.optimizer_.first_moments()[i] = parsed.arrays.at("adam_m." + params[i].name).data;
    trainer.optimizer_.second_moments()[i] = parsed.arrays.at("adam_v." + params[i].name).data;
    trainer.ever_nonzero_[i] = nonzero[i] == '1';
  }

  trainer.optimizer_.set_steps_taken(size_field(h, "adam_steps"));
  trainer.step_ = size_field(h, "step");
  trainer.epoch_ = size_field(h, "epoch");
  trainer.cursor_ = size_field(h, "cursor");
  if (bool_field(h, "batches_built")) {
    trainer.epoch_batches_ =
        make_batches(trainer.data_.train, trainer.config_.batch_size,
                     derive_seed(trainer.config_.seed, 1) + trainer.epoch_);
  }
  trainer.drop_rng_ = drop_rng;
  trainer.dropout_rng_ = dropout_rng;
  trainer.interval_steps_ = size_field(h, "interval_steps");
  trainer.sum_l_m_ = double_field(h, "sum_l_m");
  trainer.sum_l_rtd_ = double_field(h, "sum_l_rtd");
  trainer.sum_l_dtp_ = double_field(h, "sum_l_dtp");
  trainer.sum_joint_ = double_field(h, "sum_joint");
  trainer.elapsed_offset_ = double_field(h, "elapsed_offset");
  trainer.log_ = std::move(records);
  return trainer;
}

CheckpointInfo read_checkpoint_info(const std::filesystem::path& path) {
  const ParsedCheckpoint parsed = parse(path);
  CheckpointInfo info;
  info.config = config_from_header(parsed.header);
  info.source_vocab = size_field(parsed.header, "source_vocab");
  info.target_vocab = size_field(parsed.header, "target_vocab");
  info.source_fingerprint = std::stoull(field(parsed.header, "source_fingerprint"));
  info.target_fingerprint = std::stoull(field(parsed.header, "target_fingerprint"));
  info.step = size_field(parsed.header, "step");
  return info;
}

Transformer load_model(const std::filesystem::path& path, const Vocabulary& source_vocab,
                       const Vocabulary& target_vocab, CheckpointInfo* info) {
  const ParsedCheckpoint parsed = parse(path);
  const auto& h = parsed.header;
  const TrainConfig config = config_from_header(h);
  check_vocab(h, "source", source_vocab);
  check_vocab(h, "target", target_vocab);
  Transformer model(config.model, source_vocab.size(), target_vocab.size(), 0);
  auto params = model.params().named();
  load_parameters(parsed, params);
  if (info) {
    info->config = config;
    info->source_vocab = source_vocab.size();
    info->target_vocab = target_vocab.size();
    info->source_fingerprint = source_vocab.fingerprint();
    info->target_fingerprint = target_vocab.fingerprint();
    info->step = size_field(h, "step");
  }
  return model;
}

}  // namespace tokendrop
