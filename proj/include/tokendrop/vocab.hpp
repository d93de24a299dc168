#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <unordered_map>
#include <vector>

namespace tokendrop {

using TokenId = std::int32_t;
using TokenSequence = std::vector<TokenId>;

// Reserved ids, fixed so that vocabulary files and checkpoints stay stable.
inline constexpr TokenId kPadId = 0;
inline constexpr TokenId kBosId = 1;
inline constexpr TokenId kEosId = 2;
inline constexpr TokenId kUnkId = 3;
inline constexpr TokenId kDroppedId = 4;
inline constexpr std::size_t kNumSpecials = 5;

/// Specials that frame a sequence and are never corrupted.
inline bool is_structural(TokenId id) { return id == kPadId || id == kBosId || id == kEosId; }
inline bool is_special(TokenId id) { return id >= 0 && static_cast<std::size_t>(id) < kNumSpecials; }

class Vocabulary {
 public:
  /// Vocabulary holding only the five specials.
  Vocabulary();

  /// Specials followed by `tokens` in order. Duplicates or special names throw.
  static Vocabulary from_tokens(const std::vector<std::string>& tokens);

  /// Keeps the max_size - 5 most frequent tokens; ties go to the token seen first.
  static Vocabulary build(const std::vector<std::vector<std::string>>& corpus, std::size_t max_size);

  /// One token per line, line number = id.
  static Vocabulary load(const std::filesystem::path& path);
  void save(const std::filesystem::path& path) const;

  std::size_t size() const { return tokens_.size(); }
  bool contains(const std::string& token) const { return index_.count(token) > 0; }

  /// Id of `token`, or the UNK id for out-of-vocabulary tokens.
  TokenId id(const std::string& token) const;
  const std::string& token(TokenId id) const;

  TokenSequence encode(const std::vector<std::string>& words) const;
  std::vector<std::string> decode(const TokenSequence& ids) const;

  /// FNV-1a hash over the token list; used to detect vocabulary mismatches.
  std::uint64_t fingerprint() const;

  const std::vector<std::string>& tokens() const { return tokens_; }

 private:
  std::vector<std::string> tokens_;
  std::unordered_map<std::string, TokenId> index_;
};

const std::vector<std::string>& special_token_names();

}  // namespace tokendrop
