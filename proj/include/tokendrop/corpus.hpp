#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "tokendrop/vocab.hpp"

namespace tokendrop {

struct SentencePair {
  std::vector<std::string> source;
  std::vector<std::string> target;
  bool operator==(const SentencePair&) const = default;
};

using ParallelText = std::vector<SentencePair>;

// A toy translation task. Source sentences are uniform draws over
// `source_vocab` content tokens. The target applies an injective token
// mapping position-wise, then reorders within consecutive windows: when the
// window's last target index is odd, the tokens before it are reversed. The
// key token never moves, so the reordering is its own inverse. Windows
// shorter than 3 tokens are left alone.
struct SyntheticTaskSpec {
  std::size_t source_vocab = 200;
  std::size_t target_vocab = 200;
  std::uint64_t seed = 1234;
  std::size_t reorder_window = 3;
  std::size_t train_size = 10000;
  std::size_t valid_size = 500;
  std::size_t test_size = 200;
  std::size_t min_length = 4;
  std::size_t max_length = 10;
  /// Map token i to itself and reuse source names; with window 1 this is a copy task.
  bool identity_mapping = false;

  void validate() const;
};

struct SyntheticCorpus {
  ParallelText train;
  ParallelText valid;
  ParallelText test;
  /// mapping[i] = target index of source token i.
  std::vector<std::size_t> mapping;
};

SyntheticCorpus generate_synthetic_corpus(const SyntheticTaskSpec& spec);

std::string synthetic_source_token(std::size_t index);
std::string synthetic_target_token(std::size_t index, bool identity_mapping);

/// In-place windowed reordering used by the synthetic task, and its inverse.
void reorder_windows(std::vector<std::size_t>& target_indices, std::size_t window);
void unreorder_windows(std::vector<std::size_t>& target_indices, std::size_t window);

/// Splits on runs of spaces and tabs.
std::vector<std::string> tokenize(const std::string& line);

/// Pairs line i of both files. Empty lines and unequal line counts throw.
ParallelText load_parallel(const std::filesystem::path& source_path,
                           const std::filesystem::path& target_path);

/// Writes `<prefix>.src` and `<prefix>.tgt`.
void save_parallel(const ParallelText& text, const std::filesystem::path& prefix);

struct EncodedPair {
  TokenSequence source;
  TokenSequence target;
};

std::vector<EncodedPair> encode_pairs(const ParallelText& text, const Vocabulary& source_vocab,
                                      const Vocabulary& target_vocab);

/// Row-major matrix of small values (ids or 0/1 flags).
template <typename T>
struct Grid {
  std::size_t rows = 0;
  std::size_t cols = 0;
  std::vector<T> data;

  Grid() = default;
  Grid(std::size_t r, std::size_t c, T fill = T{}) : rows(r), cols(c), data(r * c, fill) {}

  T& at(std::size_t r, std::size_t c) { return data[r * cols + c]; }
  const T& at(std::size_t r, std::size_t c) const { return data[r * cols + c]; }
  bool operator==(const Grid&) const = default;
};

using IdMatrix = Grid<TokenId>;
using BitMatrix = Grid<std::uint8_t>;

// One padded minibatch. Source rows are `tokens EOS PAD...`; target_input is
// `BOS y PAD...` and target_output is `y EOS PAD...`, so teacher forcing reads
// target_input and scores against target_output.
struct ParallelBatch {
  IdMatrix source;
  IdMatrix target_input;
  IdMatrix target_output;
  std::vector<std::size_t> source_lengths;  // including EOS
  std::vector<std::size_t> target_lengths;  // including BOS (equivalently EOS)
  std::vector<std::size_t> pair_indices;    // position of each row in the input pairs

  std::size_t size() const { return source.rows; }
};

ParallelBatch make_batch(const std::vector<EncodedPair>& pairs,
                         const std::vector<std::size_t>& indices);

/// Shuffles with `seed` and cuts into batches of at most batch_size rows.
std::vector<ParallelBatch> make_batches(const std::vector<EncodedPair>& pairs,
                                        std::size_t batch_size, std::uint64_t seed);

/// Fisher-Yates permutation of [0, n) driven by `seed`.
std::vector<std::size_t> shuffled_order(std::size_t n, std::uint64_t seed);

}  // namespace tokendrop
