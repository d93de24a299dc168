#include "tokendrop/run_config.hpp"

#include <cstdlib>
#include <fstream>
#include <functional>
#include <sstream>

#include "tokendrop/error.hpp"

namespace tokendrop {

namespace {

struct Field {
  std::string section;
  std::string key;
  std::function<void(const std::string&)> set;
  std::function<std::string()> get;
};

std::string trim(const std::string& s) {
  const auto first = s.find_first_not_of(" \t\r");
  if (first == std::string::npos) return "";
  const auto last = s.find_last_not_of(" \t\r");
  return s.substr(first, last - first + 1);
}

std::size_t parse_size(const std::string& v) {
  if (v.empty() || v[0] == '-') throw std::invalid_argument("expected a non-negative integer");
  std::size_t pos = 0;
  const auto n = std::stoull(v, &pos);
  if (pos != v.size()) throw std::invalid_argument("expected a non-negative integer");
  return static_cast<std::size_t>(n);
}

double parse_double(const std::string& v) {
  char* end = nullptr;
  const double d = std::strtod(v.c_str(), &end);
  if (v.empty() || *end != '\0') throw std::invalid_argument("expected a number");
  return d;
}

bool parse_bool(const std::string& v) {
  if (v == "true" || v == "1") return true;
  if (v == "false" || v == "0") return false;
  throw std::invalid_argument("expected true or false");
}

std::vector<double> parse_list(const std::string& v) {
  std::vector<double> out;
  std::stringstream in(v);
  std::string item;
  while (std::getline(in, item, ',')) out.push_back(parse_double(trim(item)));
  if (out.empty()) throw std::invalid_argument("expected a comma-separated list of numbers");
  return out;
}

std::string show_bool(bool b) { return b ? "true" : "false"; }

std::string show_list(const std::vector<double>& xs) {
  std::string out;
  for (std::size_t i = 0; i < xs.size(); ++i) out += (i ? ", " : "") + format_number(xs[i]);
  return out;
}

Field size_field(std::string section, std::string key, std::size_t& ref) {
  return {std::move(section), std::move(key), [&ref](const std::string& v) { ref = parse_size(v); },
          [&ref] { return std::to_string(ref); }};
}

Field u64_field(std::string section, std::string key, std::uint64_t& ref) {
  return {std::move(section), std::move(key), [&ref](const std::string& v) { ref = parse_size(v); },
          [&ref] { return std::to_string(ref); }};
}

Field double_field(std::string section, std::string key, double& ref) {
  return {std::move(section), std::move(key), [&ref](const std::string& v) { ref = parse_double(v); },
          [&ref] { return format_number(ref); }};
}

Field bool_field(std::string section, std::string key, bool& ref) {
  return {std::move(section), std::move(key), [&ref](const std::string& v) { ref = parse_bool(v); },
          [&ref] { return show_bool(ref); }};
}

Field string_field(std::string section, std::string key, std::string& ref) {
  return {std::move(section), std::move(key), [&ref](const std::string& v) { ref = v; },
          [&ref] { return ref; }};
}

Field list_field(std::string section, std::string key, std::vector<double>& ref) {
  return {std::move(section), std::move(key), [&ref](const std::string& v) { ref = parse_list(v); },
          [&ref] { return show_list(ref); }};
}

std::vector<Field> fields(RunConfig& c) {
  auto& t = c.train;
  auto& m = t.model;
  std::vector<Field> f;
  f.push_back({"data", "source",
               [&c](const std::string& v) {
                 if (v == "synthetic") c.synthetic = true;
                 else if (v == "files") c.synthetic = false;
                 else throw std::invalid_argument("expected synthetic or files");
               },
               [&c] { return std::string(c.synthetic ? "synthetic" : "files"); }});
  f.push_back(string_field("data", "train_prefix", c.train_prefix));
  f.push_back(string_field("data", "valid_prefix", c.valid_prefix));
  f.push_back(string_field("data", "test_prefix", c.test_prefix));
  f.push_back(size_field("data", "vocab_size", c.vocab_size));
  f.push_back(string_field("data", "source_vocab_file", c.source_vocab_file));
  f.push_back(string_field("data", "target_vocab_file", c.target_vocab_file));

  f.push_back(size_field("synthetic", "source_vocab", c.task.source_vocab));
  f.push_back(size_field("synthetic", "target_vocab", c.task.target_vocab));
  f.push_back(u64_field("synthetic", "seed", c.task.seed));
  f.push_back(size_field("synthetic", "reorder_window", c.task.reorder_window));
  f.push_back(size_field("synthetic", "train_size", c.task.train_size));
  f.push_back(size_field("synthetic", "valid_size", c.task.valid_size));
  f.push_back(size_field("synthetic", "test_size", c.task.test_size));
  f.push_back(size_field("synthetic", "min_length", c.task.min_length));
  f.push_back(size_field("synthetic", "max_length", c.task.max_length));
  f.push_back(bool_field("synthetic", "identity_mapping", c.task.identity_mapping));

  f.push_back(size_field("model", "d_model", m.d_model));
  f.push_back(size_field("model", "d_ffn", m.d_ffn));
  f.push_back(size_field("model", "n_layers", m.n_layers));
  f.push_back(size_field("model", "n_heads", m.n_heads));
  f.push_back(double_field("model", "dropout", m.dropout));
  f.push_back(size_field("model", "max_length", m.max_length));
  f.push_back(bool_field("model", "shared_vocab", m.shared_vocab));
  f.push_back(bool_field("model", "tie_dtp", m.tie_dtp));
  f.push_back(bool_field("model", "tie_output", m.tie_output));

  f.push_back(size_field("train", "max_steps", t.max_steps));
  f.push_back(size_field("train", "batch_size", t.batch_size));
  f.push_back(double_field("train", "learning_rate", t.learning_rate));
  f.push_back(double_field("train", "beta1", t.beta1));
  f.push_back(double_field("train", "beta2", t.beta2));
  f.push_back(double_field("train", "adam_eps", t.adam_eps));
  f.push_back(size_field("train", "warmup_steps", t.warmup_steps));
  f.push_back(double_field("train", "clip_norm", t.clip_norm));
  f.push_back(size_field("train", "valid_interval", t.valid_interval));
  f.push_back(u64_field("train", "seed", t.seed));
  f.push_back(bool_field("train", "token_drop", t.token_drop));

  f.push_back(double_field("drop", "p_source", t.drop.p_source));
  f.push_back(double_field("drop", "p_target", t.drop.p_target));
  f.push_back({"drop", "strategy",
               [&t](const std::string& v) { t.drop.strategy = parse_drop_strategy(v); },
               [&t] { return to_string(t.drop.strategy); }});
  f.push_back(u64_field("drop", "seed", t.drop.seed));

  f.push_back(double_field("objective", "alpha", t.objective.alpha));
  f.push_back(double_field("objective", "beta", t.objective.beta));

  f.push_back(list_field("eval", "noise_rates", c.noise.rates));
  f.push_back(size_field("eval", "noise_samples", c.noise.samples));
  f.push_back(u64_field("eval", "noise_seed", c.noise.seed));
  f.push_back(list_field("eval", "sweep_rates", c.sweep_rates));
  f.push_back(size_field("eval", "decode_max_len", c.decode.max_len));
  f.push_back(size_field("eval", "decode_batch_size", c.decode.batch_size));

  f.push_back(string_field("output", "dir", c.output_dir));
  f.push_back(bool_field("output", "write_hypotheses", c.write_hypotheses));
  return f;
}

void assign(std::vector<Field>& table, const std::string& section, const std::string& key,
            const std::string& value, const std::string& where) {
  for (auto& field : table) {
    if (field.section != section || field.key != key) continue;
    try {
      field.set(value);
    } catch (const std::exception& e) {
      throw ConfigError(where + ": bad value '" + value + "' for " + section + "." + key + " (" +
                        e.what() + ")");
    }
    return;
  }
  bool known_section = false;
  for (const auto& field : table) known_section = known_section || field.section == section;
  if (!known_section) throw ConfigError(where + ": unknown section [" + section + "]");
  throw ConfigError(where + ": unknown key '" + key + "' in section [" + section + "]");
}

}  // namespace

void RunConfig::validate() const {
  if (synthetic) {
    task.validate();
  } else if (train_prefix.empty() || valid_prefix.empty()) {
    throw ConfigError("data.source = files needs data.train_prefix and data.valid_prefix");
  }
  if (vocab_size <= kNumSpecials) throw ConfigError("data.vocab_size must exceed 5");
  train.validate();
  noise.validate();
  for (double r : sweep_rates)
    if (!(r >= 0.0 && r <= 1.0)) throw ConfigError("eval.sweep_rates entries must lie in [0, 1]");
  if (decode.batch_size == 0) throw ConfigError("eval.decode_batch_size must be positive");
  if (output_dir.empty()) throw ConfigError("output.dir must not be empty");
}

RunConfig parse_run_config(const std::string& text, const std::string& origin) {
  RunConfig config;
  auto table = fields(config);
  std::istringstream in(text);
  std::string raw;
  std::string section;
  std::size_t line_no = 0;
  while (std::getline(in, raw)) {
    ++line_no;
    const std::string where = origin + ":" + std::to_string(line_no);
    const auto hash = raw.find('#');
    const std::string line = trim(hash == std::string::npos ? raw : raw.substr(0, hash));
    if (line.empty()) continue;
    if (line.front() == '[') {
      if (line.back() != ']') throw ConfigError(where + ": malformed section header '" + line + "'");
      section = trim(line.substr(1, line.size() - 2));
      continue;
    }
    const auto eq = line.find('=');
    if (eq == std::string::npos) throw ConfigError(where + ": expected key = value, got '" + line + "'");
    const std::string key = trim(line.substr(0, eq));
    if (section.empty()) throw ConfigError(where + ": key '" + key + "' appears before any section");
    assign(table, section, key, trim(line.substr(eq + 1)), where);
  }
  return config;
}

RunConfig load_run_config(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot read config " + path.string());
  std::stringstream buffer;
  buffer << in.rdbuf();
  return parse_run_config(buffer.str(), path.string());
}

void apply_override(RunConfig& config, const std::string& assignment) {
  const auto eq = assignment.find('=');
  const auto dot = assignment.find('.');
  if (eq == std::string::npos || dot == std::string::npos || dot > eq) {
    throw ConfigError("override '" + assignment + "' is not of the form section.key=value");
  }
  auto table = fields(config);
  assign(table, trim(assignment.substr(0, dot)), trim(assignment.substr(dot + 1, eq - dot - 1)),
         trim(assignment.substr(eq + 1)), "--set " + assignment);
}

std::string to_text(const RunConfig& config) {
  auto copy = config;
  std::string out;
  std::string section;
  for (const auto& field : fields(copy)) {
    if (field.section != section) {
      section = field.section;
      out += (out.empty() ? "[" : "\n[") + section + "]\n";
    }
    out += field.key + " = " + field.get() + "\n";
  }
  return out;
}

std::vector<std::string> config_keys() {
  RunConfig config;
  std::vector<std::string> keys;
  for (const auto& field : fields(config)) keys.push_back(field.section + "." + field.key);
  return keys;
}

}  // namespace tokendrop
