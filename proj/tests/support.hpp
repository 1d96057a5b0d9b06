#pragma once

#include "cwb/ioi_data.hpp"
#include "cwb/model.hpp"
#include "cwb/tokenizer.hpp"

#include <json.hpp>

#include <filesystem>
#include <fstream>
#include <memory>

namespace cwb::testing {

inline std::filesystem::path source_dir() { return CWB_SOURCE_DIR; }
inline std::filesystem::path fixture(const std::string& name) { return source_dir() / "fixtures" / name; }

inline nlohmann::json read_json(const std::filesystem::path& p) {
  std::ifstream in(p);
  if (!in) throw std::runtime_error("missing file " + p.string());
  return nlohmann::json::parse(in);
}

inline const Tokenizer& tokenizer() {
  static const Tokenizer tok = Tokenizer::from_files(source_dir() / "assets/tokenizer/encoder.json",
                                                     source_dir() / "assets/tokenizer/vocab.bpe");
  return tok;
}

// Tiny random model matching fixtures/logits_tiny.json.
inline std::shared_ptr<const Model> tiny_model() {
  static const auto m = random_model(tiny_test_config(), 7);
  return m;
}

inline const IoiGenerator& generator() {
  static const IoiGenerator gen(tokenizer(), WordLists::load(source_dir() / "config/word_lists.json"));
  return gen;
}

}  // namespace cwb::testing
