#pragma once

#include "cwb/circuit_eval.hpp"
#include "cwb/head_profiles.hpp"

#include <filesystem>
#include <functional>

namespace cwb {

// Paths and defaults shared by the CLI and the service.
struct WorkbenchConfig {
  // `weights` may be "random:<tiny|layout12|gpt2-small>:<seed>" for a deterministic random model.
  ModelPaths model;
  std::filesystem::path word_lists;
  std::filesystem::path results_dir = "results";
  std::filesystem::path ui_dir;
  uint64_t seed = 0;
  int n_samples = 0;  // 0 keeps each experiment's default
  int threads = 0;
  bool prepend_bos = false;

  // Tokenizer and word lists from the source tree; weights from $CWB_GPT2_DIR when set.
  static WorkbenchConfig defaults();
  // Keys missing from the file keep their defaults; relative paths resolve against the file.
  static WorkbenchConfig load(const std::filesystem::path& path);
  static WorkbenchConfig from_json(const nlohmann::json& j, const std::filesystem::path& base = {});
  nlohmann::json to_json() const;
};

// Loaded model, tokenizer and prompt generator; immutable after construction.
struct Engine {
  WorkbenchConfig config;
  std::shared_ptr<const Model> model;
  std::shared_ptr<const Tokenizer> tokenizer;
  std::shared_ptr<const IoiGenerator> generator;

  static std::shared_ptr<const Engine> load(const WorkbenchConfig& cfg);
  // Stable hash of the model source, its config, the word lists and the generator options.
  std::string fingerprint() const;
};

struct ExperimentInfo {
  std::string id;
  std::string title;
  std::string citation;  // figure or table reproduced
  std::string description;
  int default_n = 0;
  nlohmann::json params;  // accepted parameters with their defaults
  nlohmann::json to_json() const;
};

const std::vector<ExperimentInfo>& catalog();
// Throws NotFoundError.
const ExperimentInfo& catalog_entry(const std::string& id);

struct ExperimentSpec {
  std::string id;
  nlohmann::json params = nlohmann::json::object();
  uint64_t seed = 0;
  int n_samples = 0;  // 0 means the catalog default

  static ExperimentSpec from_json(const nlohmann::json& j);
  nlohmann::json to_json() const;
};

struct Check {
  std::string name;
  bool passed = false;
  nlohmann::json measured;
  std::string expected;
  bool primary = true;  // informative checks never fail a run
};

struct Artifact {
  std::string name;  // file name, e.g. "sweep.svg"
  std::string content;
};

struct ResultRecord {
  static constexpr int kSchema = 1;
  std::string experiment;
  std::string fingerprint;
  double wall_time_s = 0.0;
  uint64_t seed = 0;
  int n_samples = 0;
  nlohmann::json params;
  nlohmann::json payload;
  std::vector<Check> checks;
  std::vector<Artifact> artifacts;

  bool passed() const;
  nlohmann::json to_json() const;  // artifacts listed by name
  static ResultRecord from_json(const nlohmann::json& j);
};

struct RunHooks {
  std::function<void(double)> progress;
};

// Catalog defaults plus batch_size, overridden by `given`. Throws NotFoundError for an
// unknown id and ConfigError for unknown keys, wrong types or negative values.
nlohmann::json validated_params(const std::string& id, const nlohmann::json& given);

// Throws NotFoundError for an unknown id and ConfigError for bad parameters.
ResultRecord run_experiment(const Engine& engine, const ExperimentSpec& spec, const RunHooks& hooks = {});

// Writes <root>/<id>/<timestamp>/record.json plus artifacts and appends to
// <root>/manifest.json. Returns the record reference "<id>/<timestamp>".
std::string persist(const ResultRecord& record, const std::filesystem::path& root);
// Manifest entries, oldest first.
nlohmann::json list_results(const std::filesystem::path& root);
// Throws NotFoundError for an unknown reference.
nlohmann::json load_result(const std::filesystem::path& root, const std::string& ref);

// Seed of stream k within a run; the catalog experiments and the service share these.
uint64_t derive_seed(uint64_t seed, uint64_t stream);
// p_IOI samples of a run (stream 1) and their p_ABC counterparts (stream 2).
std::vector<PromptSample> run_ioi_samples(const Engine& engine, uint64_t seed, int n);
std::vector<PromptSample> run_abc_samples(const Engine& engine, uint64_t seed, const std::vector<PromptSample>& x);
// Per-template means over p_ABC prompts (streams 3 and 4), used for mean ablation.
MeanCache run_reference_means(const Engine& engine, uint64_t seed, int mean_n, int batch_size = 32);

// Mean logit difference, IO-over-S and S-over-IO rates, mean IO probability and n.
nlohmann::json outcomes_json(const Outcomes& o);

// CSV of a [layer][head] matrix.
std::string matrix_csv(const std::vector<std::vector<double>>& m, const std::string& value_name);

}  // namespace cwb
