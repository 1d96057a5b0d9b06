#pragma once

#include "cwb/forward.hpp"
#include "cwb/rng.hpp"
#include "cwb/tokenizer.hpp"

#include <json.hpp>

#include <array>
#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <vector>

namespace cwb {

inline constexpr int kNumTemplates = 15;
// The 15 p_IOI templates in BABA form: [A] is the indirect object, [B] the subject.
extern const std::array<const char*, kNumTemplates> kTemplates;
// Templates whose first clause ends in ". ", where a filler sentence can be inserted.
std::vector<int> sentence_break_templates();

enum class Pattern { ABBA, BABA };
enum class Role { IO, S1, S1_plus_1, S2, END };

const char* role_name(Role r);
std::optional<Role> parse_role(const std::string& s);

struct RolePositions {
  int io = -1;
  int s1 = -1;
  int s1_plus_1 = -1;
  int s2 = -1;
  int end = -1;

  int at(Role r) const;
  friend bool operator==(const RolePositions&, const RolePositions&) = default;
};

struct PromptSample {
  TokenSequence tokens;
  int template_id = 0;
  Pattern pattern = Pattern::ABBA;
  TokenId io_name = -1;
  TokenId s_name = -1;
  RolePositions pos;
  std::string dist = "ioi";  // ioi | abc | flip | adv_io | adv_s | prefixed
  TokenId place = -1;
  TokenId object = -1;

  int length() const { return static_cast<int>(tokens.size()); }
  nlohmann::json to_json(const Tokenizer* tok = nullptr) const;
  static PromptSample from_json(const nlohmann::json& j);
};

struct WordLists {
  std::vector<std::string> names, places, objects, fillers;
  // Token ids of " word", filled by verify().
  std::vector<TokenId> name_ids, place_ids, object_ids;

  static WordLists load(const std::filesystem::path& path);
  static WordLists from_json(const nlohmann::json& j);
  // Throws ConfigError naming the first word that is not a single token.
  void verify(const Tokenizer& tok);
};

struct GeneratorOptions {
  double abba_fraction = 0.5;
  bool prepend_bos = false;
  TokenId bos_id = 50256;
};

class IoiGenerator {
 public:
  IoiGenerator(const Tokenizer& tok, WordLists words, GeneratorOptions opts = {});

  // Template chosen uniformly per sample.
  std::vector<PromptSample> gen_ioi(int n, uint64_t seed) const;
  // Templates assigned round-robin so every template appears (used for mean references).
  std::vector<PromptSample> gen_ioi_stratified(int n, uint64_t seed) const;
  // Same templates and lengths with three fresh distinct names at the name slots.
  std::vector<PromptSample> gen_abc(const std::vector<PromptSample>& ioi, uint64_t seed) const;

  enum class Variant { extra_io, extra_s };
  std::vector<PromptSample> gen_adversarial(int n, uint64_t seed, Variant v) const;
  // Each IOI sample prefixed by a filler sentence about a third name.
  std::vector<PromptSample> gen_prefixed(const std::vector<PromptSample>& ioi, uint64_t seed) const;

  // Builds one sample; exposed for tests and the service.
  PromptSample make(int template_id, Pattern pattern, int io_idx, int s_idx, int place_idx, int object_idx) const;

  const WordLists& words() const { return words_; }
  const Tokenizer& tokenizer() const { return tok_; }
  const GeneratorOptions& options() const { return opts_; }

 private:
  PromptSample build(const std::string& text, int template_id, Pattern pattern, TokenId io, TokenId s,
                     const std::string& dist) const;
  PromptSample random_sample(Rng& rng, int template_id) const;

  const Tokenizer& tok_;
  WordLists words_;
  GeneratorOptions opts_;
};

// Fills role positions from the tokens: IO is the first occurrence of io_name,
// S1 the first and S2 the last occurrence of s_name before END.
RolePositions resolve_positions(const TokenSequence& tokens, TokenId io, TokenId s);
// Throws std::logic_error describing the first violated invariant.
void check_invariants(const PromptSample& s);

// Signal-flip counterfactuals, applied in the order listed.
enum class Flip { RandomNames, Swap_IO_S1, Replace_IO_by_S };
PromptSample signal_flip(const PromptSample& sample, const std::vector<Flip>& flips, const WordLists& words,
                         uint64_t seed);

struct SignalState {
  int s_tok = 0;  // +1 same S token as the original, -1 original IO token, 0 neither
  int s_pos = 0;  // +1 duplicate first occurs at the original S1 position, -1 at the original IO position
  friend bool operator==(const SignalState&, const SignalState&) = default;
};
SignalState signal_state(const PromptSample& original, const PromptSample& flipped);

// Random halves of uniform tokens followed by an exact copy.
std::vector<TokenSequence> gen_repeated_random(int half_len, int n, uint64_t seed, int vocab_size);

void write_jsonl(const std::filesystem::path& path, const std::vector<PromptSample>& samples,
                 const Tokenizer* tok = nullptr);
std::vector<PromptSample> read_jsonl(const std::filesystem::path& path);

// Per-template mean activations of a reference distribution, stored per absolute position.
class MeanCache {
 public:
  static MeanCache build(const Model& model, const std::vector<PromptSample>& reference,
                         const std::vector<HookKey>& keys, int batch_size = 32);

  bool covers(int template_id, const HookKey& key) const;
  // [N, w] mean for a template; throws PreconditionError when not covered.
  const Tensor& mean(int template_id, const HookKey& key) const;
  int length(int template_id) const;
  std::vector<int> templates() const;
  const std::vector<HookKey>& keys() const { return keys_; }
  int group_size(int template_id) const { return counts_.at(template_id); }

 private:
  std::vector<HookKey> keys_;
  std::map<std::pair<int, HookKey>, Tensor> means_;
  std::map<int, int> lengths_;
  std::map<int, int> counts_;
};

// Every head_z site plus every mlp_output site.
std::vector<HookKey> ablatable_keys(const ModelConfig& cfg);

}  // namespace cwb
