#pragma once

#include "cwb/tensor.hpp"

#include <json.hpp>

#include <cstdint>
#include <filesystem>
#include <functional>
#include <map>
#include <memory>
#include <string>
#include <vector>

namespace cwb {

class Tokenizer;

struct ModelConfig {
  int n_layers = 0;
  int n_heads = 0;
  int d_model = 0;
  int mlp_hidden = 0;
  int vocab_size = 0;
  int max_context = 0;
  float layer_norm_epsilon = 1e-5f;

  int head_dim() const { return d_model / n_heads; }
  void validate() const;
  nlohmann::json to_json() const;
  static ModelConfig gpt2_small();
  friend bool operator==(const ModelConfig&, const ModelConfig&) = default;
};

struct LayerNormParams {
  RowVector gain;
  RowVector bias;
};

struct BlockParams {
  LayerNormParams ln1;
  MatrixRM w_qkv;  // [d, 3d]; columns are q | k | v, each split into heads of head_dim
  RowVector b_qkv;
  MatrixRM w_out;  // [d, d]; rows j*head_dim.. belong to head j
  RowVector b_out;
  LayerNormParams ln2;
  MatrixRM w_fc;  // [d, D]
  RowVector b_fc;
  MatrixRM w_proj;  // [D, d]
  RowVector b_proj;
};

struct ModelParams {
  MatrixRM token_embed;  // [V, d]
  MatrixRM pos_embed;    // [N_max, d]
  std::vector<BlockParams> blocks;
  LayerNormParams ln_final;
  // Unembedding rows [V, d]; empty when tied to token_embed.
  MatrixRM untied_unembed;

  const MatrixRM& unembed() const { return untied_unembed.size() ? untied_unembed : token_embed; }
};

struct Model {
  ModelConfig config;
  ModelParams params;
  std::string source;  // archive path or generator description
};

// Translates published checkpoint tensor names to internal roles.
struct NameMap {
  std::vector<std::string> prefixes{"", "transformer."};
  std::map<std::string, std::string> globals;
  std::map<std::string, std::string> per_layer;  // values contain "{layer}"
  int default_n_heads = 12;
  float default_epsilon = 1e-5f;

  static NameMap gpt2_default();
  static NameMap from_json(const nlohmann::json& j);
  static NameMap load(const std::filesystem::path& path);
  nlohmann::json to_json() const;
  std::string layer_name(const std::string& role, int layer) const;
};

// Abstract source of named tensors (archive on disk or an in-memory map).
struct TensorSource {
  std::function<bool(const std::string&)> has;
  std::function<Tensor(const std::string&)> read;
  std::function<std::vector<int64_t>(const std::string&)> shape;
  std::map<std::string, std::string> metadata;
};

// Builds parameters from named tensors, inferring the config from tensor shapes and
// cross-checking it against any metadata (archive metadata or an HF config.json).
std::shared_ptr<const Model> build_model(const TensorSource& source, const NameMap& names,
                                         const std::string& description);

struct ModelPaths {
  std::filesystem::path weights;      // .safetensors
  std::filesystem::path vocab;        // encoder.json / vocab.json
  std::filesystem::path merges;       // vocab.bpe / merges.txt
  std::filesystem::path name_map;     // optional; defaults to the built-in GPT-2 map
  std::filesystem::path config_json;  // optional HF config.json; defaults to weights' sibling
};

struct LoadedModel {
  std::shared_ptr<const Model> model;
  std::shared_ptr<const Tokenizer> tokenizer;
};

std::shared_ptr<const Model> load_weights(const ModelPaths& paths);
LoadedModel load_model(const ModelPaths& paths);

// Deterministic random checkpoint with the published GPT-2 tensor names, used by the
// reference-oracle fixtures and the weight-free test suites.
std::map<std::string, Tensor> random_checkpoint_tensors(const ModelConfig& config, uint64_t seed);
std::map<std::string, std::string> checkpoint_metadata(const ModelConfig& config, uint64_t seed);
std::shared_ptr<const Model> random_model(const ModelConfig& config, uint64_t seed);
uint64_t write_random_checkpoint(const std::filesystem::path& path, const ModelConfig& config,
                                 uint64_t seed);
TensorSource memory_source(const std::map<std::string, Tensor>& tensors,
                           std::map<std::string, std::string> metadata = {});

// Small config used by unit and property tests (full GPT-2 vocabulary so real prompts work).
ModelConfig tiny_test_config();
// GPT-2 small's 12x12 head layout at a small width, so experiments that name
// specific heads run end to end on random weights.
ModelConfig layout12_test_config();

}  // namespace cwb
