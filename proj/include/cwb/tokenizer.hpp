#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

namespace cwb {

using TokenId = int32_t;
using TokenSequence = std::vector<TokenId>;

// Byte-level BPE compatible with the published GPT-2 vocabulary and merge list.
class Tokenizer {
 public:
  static Tokenizer from_files(const std::filesystem::path& vocab_json,
                              const std::filesystem::path& merges_txt);

  TokenSequence encode(std::string_view text) const;
  // Throws std::out_of_range for ids outside the vocabulary.
  std::string decode(std::span<const TokenId> tokens) const;

  size_t vocab_size() const { return id_to_piece_.size(); }
  // Raw bytes of one token.
  std::string token_bytes(TokenId id) const;
  // Id of `text` if it encodes to exactly one token.
  std::optional<TokenId> single_token(std::string_view text) const;

  // Pre-tokenizer split (exposed for tests); returns byte ranges of each chunk.
  static std::vector<std::string_view> pretokenize(std::string_view text);

 private:
  void bpe(const std::string& mapped, TokenSequence& out) const;

  std::unordered_map<std::string, TokenId> piece_to_id_;
  std::vector<std::string> id_to_piece_;
  std::unordered_map<std::string, int> merge_rank_;  // "left right" -> rank
  std::string byte_to_unicode_[256];
  std::unordered_map<uint32_t, uint8_t> unicode_to_byte_;
};

}  // namespace cwb
