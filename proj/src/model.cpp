#include "cwb/model.hpp"

#include "cwb/errors.hpp"
#include "cwb/rng.hpp"
#include "cwb/safetensors.hpp"
#include "cwb/tokenizer.hpp"

#include <cmath>
#include <fstream>

namespace cwb {

using nlohmann::json;

void ModelConfig::validate() const {
  if (n_layers <= 0 || n_heads <= 0 || d_model <= 0 || mlp_hidden <= 0 || vocab_size <= 0 ||
      max_context <= 0) {
    throw ConfigError("model config has non-positive dimensions");
  }
  if (d_model % n_heads != 0) {
    throw ConfigError("d_model " + std::to_string(d_model) + " not divisible by n_heads " +
                      std::to_string(n_heads));
  }
  if (!(layer_norm_epsilon > 0.0f)) throw ConfigError("layer_norm_epsilon must be positive");
}

json ModelConfig::to_json() const {
  return {{"n_layers", n_layers},     {"n_heads", n_heads},       {"d_model", d_model},
          {"head_dim", head_dim()},   {"mlp_hidden", mlp_hidden}, {"vocab_size", vocab_size},
          {"max_context", max_context}, {"layer_norm_epsilon", layer_norm_epsilon}};
}

ModelConfig ModelConfig::gpt2_small() {
  return ModelConfig{12, 12, 768, 3072, 50257, 1024, 1e-5f};
}

ModelConfig tiny_test_config() { return ModelConfig{3, 4, 32, 128, 50257, 160, 1e-5f}; }
ModelConfig layout12_test_config() { return ModelConfig{12, 12, 48, 96, 50257, 256, 1e-5f}; }

// ---------------------------------------------------------------------------
// Name map

NameMap NameMap::gpt2_default() {
  NameMap m;
  m.globals = {{"token_embed", "wte.weight"},
               {"pos_embed", "wpe.weight"},
               {"unembed", "wte.weight"},
               {"ln_final.gain", "ln_f.weight"},
               {"ln_final.bias", "ln_f.bias"}};
  m.per_layer = {{"ln1.gain", "h.{layer}.ln_1.weight"},
                 {"ln1.bias", "h.{layer}.ln_1.bias"},
                 {"attn.qkv.weight", "h.{layer}.attn.c_attn.weight"},
                 {"attn.qkv.bias", "h.{layer}.attn.c_attn.bias"},
                 {"attn.out.weight", "h.{layer}.attn.c_proj.weight"},
                 {"attn.out.bias", "h.{layer}.attn.c_proj.bias"},
                 {"ln2.gain", "h.{layer}.ln_2.weight"},
                 {"ln2.bias", "h.{layer}.ln_2.bias"},
                 {"mlp.fc.weight", "h.{layer}.mlp.c_fc.weight"},
                 {"mlp.fc.bias", "h.{layer}.mlp.c_fc.bias"},
                 {"mlp.proj.weight", "h.{layer}.mlp.c_proj.weight"},
                 {"mlp.proj.bias", "h.{layer}.mlp.c_proj.bias"}};
  return m;
}

NameMap NameMap::from_json(const json& j) {
  NameMap m = gpt2_default();
  if (j.contains("prefixes")) m.prefixes = j.at("prefixes").get<std::vector<std::string>>();
  if (j.contains("tensors")) {
    for (auto& [k, v] : j.at("tensors").items()) m.globals[k] = v.get<std::string>();
  }
  if (j.contains("layer_tensors")) {
    for (auto& [k, v] : j.at("layer_tensors").items()) m.per_layer[k] = v.get<std::string>();
  }
  if (j.contains("defaults")) {
    const auto& d = j.at("defaults");
    m.default_n_heads = d.value("n_heads", m.default_n_heads);
    m.default_epsilon = d.value("layer_norm_epsilon", m.default_epsilon);
  }
  return m;
}

NameMap NameMap::load(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open name map " + path.string());
  try {
    return from_json(json::parse(in));
  } catch (const json::exception& e) {
    throw ConfigError("bad name map " + path.string() + ": " + e.what());
  }
}

json NameMap::to_json() const {
  return {{"schema", 1},
          {"prefixes", prefixes},
          {"tensors", globals},
          {"layer_tensors", per_layer},
          {"defaults", {{"n_heads", default_n_heads}, {"layer_norm_epsilon", default_epsilon}}}};
}

std::string NameMap::layer_name(const std::string& role, int layer) const {
  std::string pattern = per_layer.at(role);
  const std::string key = "{layer}";
  const auto pos = pattern.find(key);
  if (pos != std::string::npos) pattern.replace(pos, key.size(), std::to_string(layer));
  return pattern;
}

// ---------------------------------------------------------------------------
// Parameter construction

namespace {

MatrixRM to_matrix(const Tensor& t) {
  MatrixRM m(t.dim(0), t.dim(1));
  std::copy(t.data(), t.data() + t.numel(), m.data());
  return m;
}

RowVector to_row(const Tensor& t) {
  RowVector v(t.numel());
  std::copy(t.data(), t.data() + t.numel(), v.data());
  return v;
}

void require_finite(const Tensor& t, const std::string& name) {
  for (float v : t.values()) {
    if (!std::isfinite(v)) throw ModelLoadError("non-finite value in tensor " + name);
  }
}

std::optional<int> metadata_int(const std::map<std::string, std::string>& md,
                                std::initializer_list<const char*> keys) {
  for (const char* k : keys) {
    auto it = md.find(k);
    if (it != md.end()) {
      try {
        return std::stoi(it->second);
      } catch (const std::exception&) {
        throw ModelLoadError(std::string("non-integer metadata value for ") + k);
      }
    }
  }
  return std::nullopt;
}

class Resolver {
 public:
  Resolver(const TensorSource& src, const NameMap& names) : src_(src), names_(names) {
    const std::string probe = names.globals.at("token_embed");
    for (const auto& p : names.prefixes) {
      if (src.has(p + probe)) {
        prefix_ = p;
        return;
      }
    }
    throw ModelLoadError("missing tensor: " + probe);
  }

  std::string full(const std::string& name) const { return prefix_ + name; }
  bool has(const std::string& name) const { return src_.has(full(name)); }

  Tensor get(const std::string& name, const std::vector<int64_t>& expected) const {
    if (!has(name)) throw ModelLoadError("missing tensor: " + full(name));
    const auto shape = src_.shape(full(name));
    if (shape != expected) {
      throw ModelLoadError("shape mismatch for " + full(name) + ": archive has " +
                           shape_string(shape) + ", config expects " + shape_string(expected));
    }
    Tensor t = src_.read(full(name));
    require_finite(t, full(name));
    return t;
  }

  std::vector<int64_t> shape(const std::string& name) const {
    if (!has(name)) throw ModelLoadError("missing tensor: " + full(name));
    return src_.shape(full(name));
  }

 private:
  const TensorSource& src_;
  const NameMap& names_;
  std::string prefix_;
};

}  // namespace

std::shared_ptr<const Model> build_model(const TensorSource& source, const NameMap& names,
                                         const std::string& description) {
  Resolver r(source, names);
  const auto& g = names.globals;

  ModelConfig cfg;
  const auto we = r.shape(g.at("token_embed"));
  const auto pe = r.shape(g.at("pos_embed"));
  if (we.size() != 2 || pe.size() != 2) throw ModelLoadError("embedding tensors must be 2-D");
  cfg.vocab_size = static_cast<int>(we[0]);
  cfg.d_model = static_cast<int>(we[1]);
  cfg.max_context = static_cast<int>(pe[0]);
  int layers = 0;
  while (r.has(names.layer_name("ln1.gain", layers))) ++layers;
  if (layers == 0) throw ModelLoadError("missing tensor: " + r.full(names.layer_name("ln1.gain", 0)));
  cfg.n_layers = layers;
  const auto fc = r.shape(names.layer_name("mlp.fc.weight", 0));
  if (fc.size() != 2) throw ModelLoadError("mlp fc weight must be 2-D");
  cfg.mlp_hidden = static_cast<int>(fc[1]);

  const auto& md = source.metadata;
  cfg.n_heads = metadata_int(md, {"n_head", "n_heads"}).value_or(names.default_n_heads);
  cfg.layer_norm_epsilon = names.default_epsilon;
  if (auto it = md.find("layer_norm_epsilon"); it != md.end()) {
    cfg.layer_norm_epsilon = std::stof(it->second);
  }
  // Cross-check declared dimensions against the tensors actually present.
  auto check = [&](std::initializer_list<const char*> keys, int actual, const char* what) {
    if (auto v = metadata_int(md, keys); v && *v != actual) {
      throw ModelLoadError(std::string("checkpoint metadata ") + what + "=" + std::to_string(*v) +
                           " disagrees with tensors (" + std::to_string(actual) + ")");
    }
  };
  check({"n_layer", "n_layers"}, cfg.n_layers, "n_layer");
  check({"n_embd", "d_model"}, cfg.d_model, "n_embd");
  check({"vocab_size"}, cfg.vocab_size, "vocab_size");
  check({"n_positions", "n_ctx"}, cfg.max_context, "n_positions");
  check({"n_inner", "mlp_hidden"}, cfg.mlp_hidden, "n_inner");
  try {
    cfg.validate();
  } catch (const ConfigError& e) {
    throw ModelLoadError(e.what());
  }

  const int64_t d = cfg.d_model, D = cfg.mlp_hidden, V = cfg.vocab_size;
  auto model = std::make_shared<Model>();
  model->config = cfg;
  model->source = description;
  ModelParams& p = model->params;
  p.token_embed = to_matrix(r.get(g.at("token_embed"), {V, d}));
  p.pos_embed = to_matrix(r.get(g.at("pos_embed"), {cfg.max_context, d}));
  if (g.at("unembed") != g.at("token_embed")) {
    p.untied_unembed = to_matrix(r.get(g.at("unembed"), {V, d}));
  }
  p.ln_final.gain = to_row(r.get(g.at("ln_final.gain"), {d}));
  p.ln_final.bias = to_row(r.get(g.at("ln_final.bias"), {d}));
  p.blocks.resize(cfg.n_layers);
  for (int l = 0; l < cfg.n_layers; ++l) {
    BlockParams& b = p.blocks[l];
    auto name = [&](const char* role) { return names.layer_name(role, l); };
    b.ln1.gain = to_row(r.get(name("ln1.gain"), {d}));
    b.ln1.bias = to_row(r.get(name("ln1.bias"), {d}));
    b.w_qkv = to_matrix(r.get(name("attn.qkv.weight"), {d, 3 * d}));
    b.b_qkv = to_row(r.get(name("attn.qkv.bias"), {3 * d}));
    b.w_out = to_matrix(r.get(name("attn.out.weight"), {d, d}));
    b.b_out = to_row(r.get(name("attn.out.bias"), {d}));
    b.ln2.gain = to_row(r.get(name("ln2.gain"), {d}));
    b.ln2.bias = to_row(r.get(name("ln2.bias"), {d}));
    b.w_fc = to_matrix(r.get(name("mlp.fc.weight"), {d, D}));
    b.b_fc = to_row(r.get(name("mlp.fc.bias"), {D}));
    b.w_proj = to_matrix(r.get(name("mlp.proj.weight"), {D, d}));
    b.b_proj = to_row(r.get(name("mlp.proj.bias"), {d}));
  }
  return model;
}

namespace {

std::map<std::string, std::string> read_hf_config(const std::filesystem::path& path) {
  std::map<std::string, std::string> out;
  std::ifstream in(path);
  if (!in) return out;
  json j;
  try {
    j = json::parse(in);
  } catch (const json::exception& e) {
    throw ModelLoadError("bad config.json " + path.string() + ": " + e.what());
  }
  for (const char* k : {"n_layer", "n_head", "n_embd", "vocab_size", "n_positions", "n_inner",
                        "layer_norm_epsilon"}) {
    if (j.contains(k) && !j.at(k).is_null()) {
      const auto& v = j.at(k);
      out[k] = v.is_number_float() ? std::to_string(v.get<double>()) : v.dump();
    }
  }
  return out;
}

}  // namespace

std::shared_ptr<const Model> load_weights(const ModelPaths& paths) {
  if (!std::filesystem::exists(paths.weights)) {
    throw ModelLoadError("weight archive not found: " + paths.weights.string());
  }
  auto archive = std::make_shared<safetensors::Archive>(safetensors::Archive::open(paths.weights));
  TensorSource src;
  src.has = [archive](const std::string& n) { return archive->contains(n); };
  src.read = [archive](const std::string& n) { return archive->read(n); };
  src.shape = [archive](const std::string& n) { return archive->info(n).shape; };
  src.metadata = archive->metadata();
  const auto cfg_path =
      paths.config_json.empty() ? paths.weights.parent_path() / "config.json" : paths.config_json;
  for (auto& [k, v] : read_hf_config(cfg_path)) src.metadata.emplace(k, v);
  const NameMap names = paths.name_map.empty() ? NameMap::gpt2_default() : NameMap::load(paths.name_map);
  return build_model(src, names, paths.weights.string());
}

LoadedModel load_model(const ModelPaths& paths) {
  LoadedModel out;
  out.model = load_weights(paths);
  out.tokenizer = std::make_shared<const Tokenizer>(Tokenizer::from_files(paths.vocab, paths.merges));
  if (static_cast<int>(out.tokenizer->vocab_size()) != out.model->config.vocab_size) {
    throw ModelLoadError("tokenizer vocabulary size " + std::to_string(out.tokenizer->vocab_size()) +
                         " differs from model vocab_size " +
                         std::to_string(out.model->config.vocab_size));
  }
  return out;
}

// ---------------------------------------------------------------------------
// Random checkpoints

namespace {

// Uniform values in [lo, hi) from a per-tensor stream keyed by (seed, name).
Tensor random_tensor(std::vector<int64_t> shape, uint64_t seed, const std::string& name, double lo,
                     double hi) {
  Tensor t(std::move(shape));
  uint64_t state = splitmix64(
      seed ^ fnv1a64({reinterpret_cast<const unsigned char*>(name.data()), name.size()}));
  float* out = t.data();
  for (int64_t i = 0; i < t.numel(); ++i) {
    state = splitmix64(state);
    const double u = static_cast<double>(state >> 40) * 0x1.0p-24;
    out[i] = static_cast<float>(lo + (hi - lo) * u);
  }
  return t;
}

}  // namespace

std::map<std::string, Tensor> random_checkpoint_tensors(const ModelConfig& cfg, uint64_t seed) {
  cfg.validate();
  const int64_t d = cfg.d_model, D = cfg.mlp_hidden;
  const double sd = 1.0 / std::sqrt(static_cast<double>(d));
  const double sD = 1.0 / std::sqrt(static_cast<double>(D));
  // Bounds are sqrt(3) * target std; attention weights are scaled up so patterns are peaked.
  const double k3 = std::sqrt(3.0);
  std::map<std::string, Tensor> t;
  auto add = [&](const std::string& name, std::vector<int64_t> shape, double lo, double hi) {
    t.emplace(name, random_tensor(std::move(shape), seed, name, lo, hi));
  };
  add("wte.weight", {cfg.vocab_size, d}, -0.5 * k3, 0.5 * k3);
  add("wpe.weight", {cfg.max_context, d}, -0.3 * k3, 0.3 * k3);
  for (int l = 0; l < cfg.n_layers; ++l) {
    const std::string p = "h." + std::to_string(l) + ".";
    add(p + "ln_1.weight", {d}, 0.6, 1.4);
    add(p + "ln_1.bias", {d}, -0.2, 0.2);
    add(p + "attn.c_attn.weight", {d, 3 * d}, -1.5 * sd * k3, 1.5 * sd * k3);
    add(p + "attn.c_attn.bias", {3 * d}, -0.1, 0.1);
    add(p + "attn.c_proj.weight", {d, d}, -0.8 * sd * k3, 0.8 * sd * k3);
    add(p + "attn.c_proj.bias", {d}, -0.05, 0.05);
    add(p + "ln_2.weight", {d}, 0.6, 1.4);
    add(p + "ln_2.bias", {d}, -0.2, 0.2);
    add(p + "mlp.c_fc.weight", {d, D}, -1.2 * sd * k3, 1.2 * sd * k3);
    add(p + "mlp.c_fc.bias", {D}, -0.1, 0.1);
    add(p + "mlp.c_proj.weight", {D, d}, -0.8 * sD * k3, 0.8 * sD * k3);
    add(p + "mlp.c_proj.bias", {d}, -0.05, 0.05);
  }
  add("ln_f.weight", {d}, 0.6, 1.4);
  add("ln_f.bias", {d}, -0.2, 0.2);
  return t;
}

std::map<std::string, std::string> checkpoint_metadata(const ModelConfig& cfg, uint64_t seed) {
  return {{"format", "pt"},
          {"generator", "cwb-random-v1"},
          {"seed", std::to_string(seed)},
          {"n_layer", std::to_string(cfg.n_layers)},
          {"n_head", std::to_string(cfg.n_heads)},
          {"n_embd", std::to_string(cfg.d_model)},
          {"n_inner", std::to_string(cfg.mlp_hidden)},
          {"vocab_size", std::to_string(cfg.vocab_size)},
          {"n_positions", std::to_string(cfg.max_context)},
          {"layer_norm_epsilon", "1e-05"}};
}

TensorSource memory_source(const std::map<std::string, Tensor>& tensors,
                           std::map<std::string, std::string> metadata) {
  TensorSource src;
  const auto* m = &tensors;
  src.has = [m](const std::string& n) { return m->count(n) > 0; };
  src.read = [m](const std::string& n) { return m->at(n); };
  src.shape = [m](const std::string& n) { return m->at(n).shape(); };
  src.metadata = std::move(metadata);
  return src;
}

std::shared_ptr<const Model> random_model(const ModelConfig& cfg, uint64_t seed) {
  const auto tensors = random_checkpoint_tensors(cfg, seed);
  return build_model(memory_source(tensors, checkpoint_metadata(cfg, seed)), NameMap::gpt2_default(),
                     "random(seed=" + std::to_string(seed) + ")");
}

uint64_t write_random_checkpoint(const std::filesystem::path& path, const ModelConfig& cfg,
                                 uint64_t seed) {
  return safetensors::write(path, random_checkpoint_tensors(cfg, seed), checkpoint_metadata(cfg, seed));
}

}  // namespace cwb
