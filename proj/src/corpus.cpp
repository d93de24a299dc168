#include "tokendrop/corpus.hpp"

#include <algorithm>
#include <fstream>
#include <numeric>

#include "tokendrop/error.hpp"
#include "tokendrop/rng.hpp"

namespace tokendrop {

void SyntheticTaskSpec::validate() const {
  if (source_vocab == 0) throw ConfigError("synthetic source_vocab must be positive");
  if (target_vocab < source_vocab) {
    throw ConfigError("synthetic target_vocab must be >= source_vocab for an injective mapping");
  }
  if (identity_mapping && target_vocab != source_vocab) {
    throw ConfigError("identity mapping needs equal source and target vocabularies");
  }
  if (reorder_window == 0) throw ConfigError("reorder_window must be at least 1");
  if (min_length == 0 || min_length > max_length) {
    throw ConfigError("synthetic lengths need 1 <= min_length <= max_length");
  }
}

std::string synthetic_source_token(std::size_t index) { return "s" + std::to_string(index); }

std::string synthetic_target_token(std::size_t index, bool identity_mapping) {
  return identity_mapping ? synthetic_source_token(index) : "t" + std::to_string(index);
}

namespace {

// The window's last token is left in place and acts as the key, so the same
// test undoes the permutation.
void reverse_keyed_windows(std::vector<std::size_t>& v, std::size_t window) {
  if (window <= 2) return;
  for (std::size_t begin = 0; begin < v.size(); begin += window) {
    const std::size_t len = std::min(window, v.size() - begin);
    if (len < 3 || v[begin + len - 1] % 2 == 0) continue;
    auto first = v.begin() + static_cast<std::ptrdiff_t>(begin);
    std::reverse(first, first + static_cast<std::ptrdiff_t>(len - 1));
  }
}

}  // namespace

void reorder_windows(std::vector<std::size_t>& target_indices, std::size_t window) {
  reverse_keyed_windows(target_indices, window);
}

void unreorder_windows(std::vector<std::size_t>& target_indices, std::size_t window) {
  reverse_keyed_windows(target_indices, window);
}

SyntheticCorpus generate_synthetic_corpus(const SyntheticTaskSpec& spec) {
  spec.validate();
  Rng rng(spec.seed);
  SyntheticCorpus corpus;

  std::vector<std::size_t> targets(spec.target_vocab);
  std::iota(targets.begin(), targets.end(), 0);
  if (!spec.identity_mapping) {
    for (std::size_t i = targets.size(); i > 1; --i) std::swap(targets[i - 1], targets[rng.below(i)]);
  }
  corpus.mapping.assign(targets.begin(), targets.begin() + static_cast<std::ptrdiff_t>(spec.source_vocab));

  auto make_pair = [&] {
    const std::size_t len = spec.min_length + rng.below(spec.max_length - spec.min_length + 1);
    SentencePair pair;
    std::vector<std::size_t> mapped(len);
    for (std::size_t i = 0; i < len; ++i) {
      const std::size_t s = rng.below(spec.source_vocab);
      pair.source.push_back(synthetic_source_token(s));
      mapped[i] = corpus.mapping[s];
    }
    reorder_windows(mapped, spec.reorder_window);
    for (auto t : mapped) pair.target.push_back(synthetic_target_token(t, spec.identity_mapping));
    return pair;
  };
  for (std::size_t i = 0; i < spec.train_size; ++i) corpus.train.push_back(make_pair());
  for (std::size_t i = 0; i < spec.valid_size; ++i) corpus.valid.push_back(make_pair());
  for (std::size_t i = 0; i < spec.test_size; ++i) corpus.test.push_back(make_pair());
  return corpus;
}

std::vector<std::string> tokenize(const std::string& line) {
  std::vector<std::string> words;
  std::size_t i = 0;
  while (i < line.size()) {
    while (i < line.size() && (line[i] == ' ' || line[i] == '\t' || line[i] == '\r')) ++i;
    const std::size_t start = i;
    while (i < line.size() && line[i] != ' ' && line[i] != '\t' && line[i] != '\r') ++i;
    if (i > start) words.push_back(line.substr(start, i - start));
  }
  return words;
}

namespace {

std::vector<std::string> read_lines(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot open corpus file " + path.string());
  std::vector<std::string> lines;
  for (std::string line; std::getline(in, line);) lines.push_back(line);
  return lines;
}

}  // namespace

ParallelText load_parallel(const std::filesystem::path& source_path,
                           const std::filesystem::path& target_path) {
  const auto src = read_lines(source_path);
  const auto tgt = read_lines(target_path);
  if (src.size() != tgt.size()) {
    throw DataError("line count mismatch: " + source_path.string() + " has " +
                    std::to_string(src.size()) + " lines, " + target_path.string() + " has " +
                    std::to_string(tgt.size()));
  }
  ParallelText text;
  text.reserve(src.size());
  for (std::size_t i = 0; i < src.size(); ++i) {
    SentencePair pair{tokenize(src[i]), tokenize(tgt[i])};
    if (pair.source.empty() || pair.target.empty()) {
      throw DataError("empty line " + std::to_string(i + 1) + " in " +
                      (pair.source.empty() ? source_path : target_path).string());
    }
    text.push_back(std::move(pair));
  }
  return text;
}

void save_parallel(const ParallelText& text, const std::filesystem::path& prefix) {
  std::ofstream src(prefix.string() + ".src");
  std::ofstream tgt(prefix.string() + ".tgt");
  if (!src || !tgt) throw DataError("cannot write corpus files under " + prefix.string());
  auto write = [](std::ofstream& out, const std::vector<std::string>& words) {
    for (std::size_t i = 0; i < words.size(); ++i) out << (i ? " " : "") << words[i];
    out << '\n';
  };
  for (const auto& pair : text) {
    write(src, pair.source);
    write(tgt, pair.target);
  }
}

std::vector<EncodedPair> encode_pairs(const ParallelText& text, const Vocabulary& source_vocab,
                                      const Vocabulary& target_vocab) {
  std::vector<EncodedPair> out;
  out.reserve(text.size());
  for (const auto& pair : text) {
    out.push_back({source_vocab.encode(pair.source), target_vocab.encode(pair.target)});
  }
  return out;
}

ParallelBatch make_batch(const std::vector<EncodedPair>& pairs,
                         const std::vector<std::size_t>& indices) {
  std::size_t src_len = 0, tgt_len = 0;
  for (auto i : indices) {
    src_len = std::max(src_len, pairs.at(i).source.size() + 1);
    tgt_len = std::max(tgt_len, pairs.at(i).target.size() + 1);
  }
  ParallelBatch batch;
  const std::size_t n = indices.size();
  batch.source = IdMatrix(n, src_len, kPadId);
  batch.target_input = IdMatrix(n, tgt_len, kPadId);
  batch.target_output = IdMatrix(n, tgt_len, kPadId);
  batch.pair_indices = indices;
  for (std::size_t r = 0; r < n; ++r) {
    const auto& pair = pairs[indices[r]];
    for (std::size_t j = 0; j < pair.source.size(); ++j) batch.source.at(r, j) = pair.source[j];
    batch.source.at(r, pair.source.size()) = kEosId;
    batch.target_input.at(r, 0) = kBosId;
    for (std::size_t j = 0; j < pair.target.size(); ++j) {
      batch.target_input.at(r, j + 1) = pair.target[j];
      batch.target_output.at(r, j) = pair.target[j];
    }
    batch.target_output.at(r, pair.target.size()) = kEosId;
    batch.source_lengths.push_back(pair.source.size() + 1);
    batch.target_lengths.push_back(pair.target.size() + 1);
  }
  return batch;
}

std::vector<std::size_t> shuffled_order(std::size_t n, std::uint64_t seed) {
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  Rng rng(seed);
  for (std::size_t i = n; i > 1; --i) std::swap(order[i - 1], order[rng.below(i)]);
  return order;
}

std::vector<ParallelBatch> make_batches(const std::vector<EncodedPair>& pairs,
                                        std::size_t batch_size, std::uint64_t seed) {
  if (batch_size == 0) throw ContractError("batch_size must be at least 1");
  const auto order = shuffled_order(pairs.size(), seed);
  std::vector<ParallelBatch> batches;
  for (std::size_t begin = 0; begin < order.size(); begin += batch_size) {
    const std::size_t end = std::min(order.size(), begin + batch_size);
    batches.push_back(make_batch(pairs, {order.begin() + static_cast<std::ptrdiff_t>(begin),
                                         order.begin() + static_cast<std::ptrdiff_t>(end)}));
  }
  return batches;
}

}  // namespace tokendrop
