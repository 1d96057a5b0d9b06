#include "cwb/tokenizer.hpp"

#include "cwb/errors.hpp"

#include <json.hpp>

#include <algorithm>
#include <climits>
#include <fstream>
#include <sstream>

namespace cwb {
namespace {

struct CodepointRange {
  uint32_t lo, hi;
};

#include "unicode_tables.inc"

constexpr uint32_t kInvalid = 0xFFFFFFFFu;

template <size_t N>
bool in_ranges(const CodepointRange (&table)[N], uint32_t cp) {
  const auto* it = std::upper_bound(std::begin(table), std::end(table), cp,
                                    [](uint32_t v, const CodepointRange& r) { return v < r.lo; });
  if (it == std::begin(table)) return false;
  --it;
  return cp <= it->hi;
}

enum class Cls { Letter, Number, Space, Other };

Cls classify(uint32_t cp) {
  if (cp == kInvalid) return Cls::Other;
  if (cp < 128) {
    if ((cp >= 'a' && cp <= 'z') || (cp >= 'A' && cp <= 'Z')) return Cls::Letter;
    if (cp >= '0' && cp <= '9') return Cls::Number;
    if (cp == ' ' || (cp >= 9 && cp <= 13) || (cp >= 0x1C && cp <= 0x1F)) return Cls::Space;
    return Cls::Other;
  }
  if (in_ranges(kLetterRanges, cp)) return Cls::Letter;
  if (in_ranges(kNumberRanges, cp)) return Cls::Number;
  if (in_ranges(kSpaceRanges, cp)) return Cls::Space;
  return Cls::Other;
}

struct Cp {
  uint32_t value;
  size_t offset;  // byte offset of the first byte
};

// Decodes UTF-8 leniently: each byte of an invalid sequence becomes kInvalid.
std::vector<Cp> decode_utf8(std::string_view s) {
  std::vector<Cp> out;
  out.reserve(s.size());
  size_t i = 0;
  while (i < s.size()) {
    const auto b0 = static_cast<unsigned char>(s[i]);
    size_t len = 0;
    uint32_t cp = 0;
    if (b0 < 0x80) {
      len = 1;
      cp = b0;
    } else if ((b0 & 0xE0) == 0xC0) {
      len = 2;
      cp = b0 & 0x1F;
    } else if ((b0 & 0xF0) == 0xE0) {
      len = 3;
      cp = b0 & 0x0F;
    } else if ((b0 & 0xF8) == 0xF0) {
      len = 4;
      cp = b0 & 0x07;
    }
    bool ok = len > 0 && i + len <= s.size();
    for (size_t k = 1; ok && k < len; ++k) {
      const auto b = static_cast<unsigned char>(s[i + k]);
      if ((b & 0xC0) != 0x80) ok = false;
      cp = (cp << 6) | (b & 0x3F);
    }
    if (ok) {
      const bool overlong = (len == 2 && cp < 0x80) || (len == 3 && cp < 0x800) ||
                            (len == 4 && cp < 0x10000);
      if (overlong || cp > 0x10FFFF || (cp >= 0xD800 && cp <= 0xDFFF)) ok = false;
    }
    if (!ok) {
      out.push_back({kInvalid, i});
      ++i;
      continue;
    }
    out.push_back({cp, i});
    i += len;
  }
  return out;
}

void append_utf8(std::string& out, uint32_t cp) {
  if (cp < 0x80) {
    out.push_back(static_cast<char>(cp));
  } else if (cp < 0x800) {
    out.push_back(static_cast<char>(0xC0 | (cp >> 6)));
    out.push_back(static_cast<char>(0x80 | (cp & 0x3F)));
  } else if (cp < 0x10000) {
    out.push_back(static_cast<char>(0xE0 | (cp >> 12)));
    out.push_back(static_cast<char>(0x80 | ((cp >> 6) & 0x3F)));
    out.push_back(static_cast<char>(0x80 | (cp & 0x3F)));
  } else {
    out.push_back(static_cast<char>(0xF0 | (cp >> 18)));
    out.push_back(static_cast<char>(0x80 | ((cp >> 12) & 0x3F)));
    out.push_back(static_cast<char>(0x80 | ((cp >> 6) & 0x3F)));
    out.push_back(static_cast<char>(0x80 | (cp & 0x3F)));
  }
}

}  // namespace

// Hand-written equivalent of the GPT-2 split pattern
//   's|'t|'re|'ve|'m|'ll|'d| ?\p{L}+| ?\p{N}+| ?[^\s\p{L}\p{N}]+|\s+(?!\S)|\s+
std::vector<std::string_view> Tokenizer::pretokenize(std::string_view text) {
  const auto cps = decode_utf8(text);
  const size_t n = cps.size();
  std::vector<Cls> cls(n);
  for (size_t i = 0; i < n; ++i) cls[i] = classify(cps[i].value);
  auto byte_at = [&](size_t idx) { return idx < n ? cps[idx].offset : text.size(); };

  std::vector<std::string_view> out;
  size_t i = 0;
  while (i < n) {
    size_t j = i;
    const uint32_t c = cps[i].value;
    auto cp_is = [&](size_t k, char ch) { return k < n && cps[k].value == static_cast<uint32_t>(ch); };

    if (c == '\'') {
      if (cp_is(i + 1, 's') || cp_is(i + 1, 't') || cp_is(i + 1, 'm') || cp_is(i + 1, 'd')) {
        j = i + 2;
      } else if ((cp_is(i + 1, 'r') && cp_is(i + 2, 'e')) || (cp_is(i + 1, 'v') && cp_is(i + 2, 'e')) ||
                 (cp_is(i + 1, 'l') && cp_is(i + 2, 'l'))) {
        j = i + 3;
      }
    }
    if (j == i) {
      const size_t start = (c == ' ' && i + 1 < n && cls[i + 1] != Cls::Space) ? i + 1 : i;
      const Cls k = cls[start];
      if (k != Cls::Space) {
        j = start;
        while (j < n && cls[j] == k) ++j;
      }
    }
    if (j == i) {
      size_t r = i;
      while (r < n && cls[r] == Cls::Space) ++r;
      const size_t run = r - i;
      if (r == n || run == 1) {
        j = r == n ? r : i + 1;
      } else {
        j = r - 1;
      }
    }
    out.emplace_back(text.substr(byte_at(i), byte_at(j) - byte_at(i)));
    i = j;
  }
  return out;
}

Tokenizer Tokenizer::from_files(const std::filesystem::path& vocab_json,
                                const std::filesystem::path& merges_txt) {
  Tokenizer t;
  // Byte <-> printable code point table of the original encoder.
  std::vector<int> bs;
  for (int b = '!'; b <= '~'; ++b) bs.push_back(b);
  for (int b = 0xA1; b <= 0xAC; ++b) bs.push_back(b);
  for (int b = 0xAE; b <= 0xFF; ++b) bs.push_back(b);
  std::vector<bool> direct(256, false);
  for (int b : bs) direct[b] = true;
  int extra = 0;
  for (int b = 0; b < 256; ++b) {
    const uint32_t cp = direct[b] ? static_cast<uint32_t>(b) : static_cast<uint32_t>(256 + extra++);
    append_utf8(t.byte_to_unicode_[b], cp);
    t.unicode_to_byte_[cp] = static_cast<uint8_t>(b);
  }

  std::ifstream vin(vocab_json);
  if (!vin) throw ConfigError("cannot open tokenizer vocabulary " + vocab_json.string());
  nlohmann::json vocab;
  try {
    vocab = nlohmann::json::parse(vin);
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError("bad tokenizer vocabulary: " + std::string(e.what()));
  }
  t.id_to_piece_.resize(vocab.size());
  for (auto& [piece, id] : vocab.items()) {
    const auto idx = id.get<int64_t>();
    if (idx < 0 || idx >= static_cast<int64_t>(vocab.size())) {
      throw ConfigError("tokenizer vocabulary ids are not dense");
    }
    t.id_to_piece_[idx] = piece;
    t.piece_to_id_[piece] = static_cast<TokenId>(idx);
  }

  std::ifstream min(merges_txt);
  if (!min) throw ConfigError("cannot open merge rules " + merges_txt.string());
  std::string line;
  int rank = 0;
  while (std::getline(min, line)) {
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty() || line.rfind("#version", 0) == 0) continue;
    if (line.find(' ') == std::string::npos) throw ConfigError("malformed merge rule: " + line);
    t.merge_rank_.emplace(line, rank++);
  }
  return t;
}

void Tokenizer::bpe(const std::string& mapped, TokenSequence& out) const {
  if (auto it = piece_to_id_.find(mapped); it != piece_to_id_.end()) {
    out.push_back(it->second);
    return;
  }
  std::vector<std::string> parts;
  const auto cps = decode_utf8(mapped);
  for (size_t i = 0; i < cps.size(); ++i) {
    const size_t end = i + 1 < cps.size() ? cps[i + 1].offset : mapped.size();
    parts.emplace_back(mapped.substr(cps[i].offset, end - cps[i].offset));
  }
  std::string key;
  while (parts.size() > 1) {
    int best = INT_MAX;
    size_t best_i = 0;
    for (size_t i = 0; i + 1 < parts.size(); ++i) {
      key = parts[i] + ' ' + parts[i + 1];
      auto it = merge_rank_.find(key);
      if (it != merge_rank_.end() && it->second < best) {
        best = it->second;
        best_i = i;
      }
    }
    if (best == INT_MAX) break;
    const std::string left = parts[best_i], right = parts[best_i + 1];
    std::vector<std::string> merged;
    merged.reserve(parts.size());
    for (size_t i = 0; i < parts.size();) {
      if (i + 1 < parts.size() && parts[i] == left && parts[i + 1] == right) {
        merged.push_back(left + right);
        i += 2;
      } else {
        merged.push_back(parts[i]);
        ++i;
      }
    }
    parts = std::move(merged);
  }
  for (const auto& p : parts) {
    auto it = piece_to_id_.find(p);
    if (it == piece_to_id_.end()) throw std::logic_error("BPE produced a piece outside the vocabulary");
    out.push_back(it->second);
  }
}

TokenSequence Tokenizer::encode(std::string_view text) const {
  TokenSequence out;
  std::string mapped;
  for (auto chunk : pretokenize(text)) {
    mapped.clear();
    for (char ch : chunk) mapped += byte_to_unicode_[static_cast<unsigned char>(ch)];
    bpe(mapped, out);
  }
  return out;
}

std::string Tokenizer::token_bytes(TokenId id) const {
  if (id < 0 || static_cast<size_t>(id) >= id_to_piece_.size()) {
    throw std::out_of_range("token id " + std::to_string(id) + " outside vocabulary");
  }
  std::string out;
  for (const auto& cp : decode_utf8(id_to_piece_[id])) {
    auto it = unicode_to_byte_.find(cp.value);
    if (it == unicode_to_byte_.end()) throw std::logic_error("vocabulary piece has unmapped code point");
    out.push_back(static_cast<char>(it->second));
  }
  return out;
}

std::string Tokenizer::decode(std::span<const TokenId> tokens) const {
  std::string out;
  for (TokenId id : tokens) out += token_bytes(id);
  return out;
}

std::optional<TokenId> Tokenizer::single_token(std::string_view text) const {
  const auto ids = encode(text);
  if (ids.size() != 1) return std::nullopt;
  return ids[0];
}

}  // namespace cwb
