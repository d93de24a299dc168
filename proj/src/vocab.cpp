#include "tokendrop/vocab.hpp"

#include <algorithm>
#include <fstream>

#include "tokendrop/error.hpp"

namespace tokendrop {

const std::vector<std::string>& special_token_names() {
  static const std::vector<std::string> names = {"<pad>", "<s>", "</s>", "<unk>", "<dropped>"};
  return names;
}

Vocabulary::Vocabulary() {
  for (const auto& name : special_token_names()) {
    index_.emplace(name, static_cast<TokenId>(tokens_.size()));
    tokens_.push_back(name);
  }
}

Vocabulary Vocabulary::from_tokens(const std::vector<std::string>& tokens) {
  Vocabulary vocab;
  for (const auto& t : tokens) {
    if (t.empty()) throw DataError("empty token in vocabulary");
    if (!vocab.index_.emplace(t, static_cast<TokenId>(vocab.tokens_.size())).second) {
      throw DataError("duplicate vocabulary token '" + t + "'");
    }
    vocab.tokens_.push_back(t);
  }
  return vocab;
}

Vocabulary Vocabulary::build(const std::vector<std::vector<std::string>>& corpus,
                             std::size_t max_size) {
  if (max_size <= kNumSpecials) {
    throw DataError("vocabulary max_size must exceed the " + std::to_string(kNumSpecials) +
                    " special tokens");
  }
  struct Stat {
    std::size_t count = 0;
    std::size_t first = 0;
  };
  std::unordered_map<std::string, Stat> stats;
  std::size_t position = 0;
  for (const auto& sentence : corpus) {
    for (const auto& word : sentence) {
      auto [it, inserted] = stats.try_emplace(word, Stat{0, position});
      ++it->second.count;
      ++position;
    }
  }
  if (position == 0) throw DataError("cannot build a vocabulary from an empty corpus");

  std::vector<std::pair<std::string, Stat>> ranked;
  for (auto& [word, stat] : stats) {
    if (std::find(special_token_names().begin(), special_token_names().end(), word) !=
        special_token_names().end()) {
      continue;
    }
    ranked.emplace_back(word, stat);
  }
  std::sort(ranked.begin(), ranked.end(), [](const auto& a, const auto& b) {
    if (a.second.count != b.second.count) return a.second.count > b.second.count;
    return a.second.first < b.second.first;
  });
  const std::size_t keep = std::min(ranked.size(), max_size - kNumSpecials);
  std::vector<std::string> tokens;
  tokens.reserve(keep);
  for (std::size_t i = 0; i < keep; ++i) tokens.push_back(ranked[i].first);
  return from_tokens(tokens);
}

Vocabulary Vocabulary::load(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot open vocabulary file " + path.string());
  std::vector<std::string> lines;
  for (std::string line; std::getline(in, line);) {
    if (!line.empty() && line.back() == '\r') line.pop_back();
    lines.push_back(line);
  }
  const auto& specials = special_token_names();
  if (lines.size() < specials.size() ||
      !std::equal(specials.begin(), specials.end(), lines.begin())) {
    throw DataError("vocabulary file " + path.string() + " does not start with the special tokens");
  }
  return from_tokens(std::vector<std::string>(lines.begin() + static_cast<std::ptrdiff_t>(specials.size()),
                                              lines.end()));
}

void Vocabulary::save(const std::filesystem::path& path) const {
  std::ofstream out(path);
  if (!out) throw DataError("cannot write vocabulary file " + path.string());
  for (const auto& t : tokens_) out << t << '\n';
}

TokenId Vocabulary::id(const std::string& token) const {
  auto it = index_.find(token);
  return it == index_.end() ? kUnkId : it->second;
}

const std::string& Vocabulary::token(TokenId id) const {
  if (id < 0 || static_cast<std::size_t>(id) >= tokens_.size()) {
    throw DataError("token id " + std::to_string(id) + " outside vocabulary of " +
                    std::to_string(tokens_.size()));
  }
  return tokens_[static_cast<std::size_t>(id)];
}

TokenSequence Vocabulary::encode(const std::vector<std::string>& words) const {
  TokenSequence ids;
  ids.reserve(words.size());
  for (const auto& w : words) ids.push_back(id(w));
  return ids;
}

std::vector<std::string> Vocabulary::decode(const TokenSequence& ids) const {
  std::vector<std::string> words;
  words.reserve(ids.size());
  for (auto i : ids) words.push_back(token(i));
  return words;
}

std::uint64_t Vocabulary::fingerprint() const {
  std::uint64_t h = 1469598103934665603ULL;
  for (const auto& t : tokens_) {
    for (unsigned char c : t) {
      h ^= c;
      h *= 1099511628211ULL;
    }
    h ^= 0xFF;  // token separator
    h *= 1099511628211ULL;
  }
  return h;
}

}  // namespace tokendrop
