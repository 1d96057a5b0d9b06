#pragma once

#include "cwb/interventions.hpp"

#include <mutex>

namespace cwb {

// One (head, position) node. Positions are a role or all positions.
struct CircuitNode {
  int layer = 0;
  int head = 0;
  PositionSpec pos;

  std::string str() const { return std::to_string(layer) + "." + std::to_string(head) + "@" + pos.str(); }
  friend bool operator==(const CircuitNode& a, const CircuitNode& b) = default;
  friend bool operator<(const CircuitNode& a, const CircuitNode& b) {
    if (a.layer != b.layer) return a.layer < b.layer;
    if (a.head != b.head) return a.head < b.head;
    return a.pos.str() < b.pos.str();
  }
};

using NodeSet = std::vector<CircuitNode>;  // sorted, unique

NodeSet make_node_set(std::vector<CircuitNode> nodes);

// [layer, head] or [layer, head, position]; throws PreconditionError.
CircuitNode circuit_node_from_json(const nlohmann::json& j);
nlohmann::json to_json(const CircuitNode& n);

inline const std::vector<std::string>& head_class_names() {
  static const std::vector<std::string> names = {"NameMover",      "NegativeNameMover", "SInhibition",
                                                 "Induction",      "DuplicateToken",    "PreviousToken",
                                                 "BackupNameMover"};
  return names;
}

class Circuit {
 public:
  Circuit() = default;
  explicit Circuit(std::map<std::string, NodeSet> classes, std::string name = "");

  static Circuit from_json(const nlohmann::json& j);
  static Circuit load(const std::filesystem::path& path);
  nlohmann::json to_json() const;

  const std::string& name() const { return name_; }
  const std::map<std::string, NodeSet>& classes() const { return classes_; }
  const NodeSet& nodes() const { return nodes_; }
  size_t size() const { return nodes_.size(); }
  bool contains(const CircuitNode& n) const;
  // Node with this (layer, head); throws PreconditionError when absent or ambiguous.
  const CircuitNode& find(int layer, int head) const;
  // Throws PreconditionError for an unknown class.
  const NodeSet& class_nodes(const std::string& name) const;
  void validate(const ModelConfig& cfg) const;

  Circuit without(const NodeSet& removed) const;

 private:
  std::string name_;
  std::map<std::string, NodeSet> classes_;
  NodeSet nodes_;
};

// Every (head, position) pair of the model: one all-positions node per head.
Circuit full_circuit(const ModelConfig& cfg);
Circuit canonical_circuit();
Circuit naive_circuit();

// Per-node K sets for the minimality criterion.
struct MinimalityTable {
  std::map<std::pair<int, int>, std::vector<std::pair<int, int>>> k;

  static MinimalityTable from_json(const nlohmann::json& j);
  static MinimalityTable load(const std::filesystem::path& path);
  static MinimalityTable canonical();
  nlohmann::json to_json() const;
};

// Model, evaluation samples and mean cache shared by all circuit evaluations.
class EvalContext {
 public:
  EvalContext(const Model& model, std::vector<PromptSample> samples, const MeanCache& means, int batch_size = 32);

  const Model& model() const { return model_; }
  const std::vector<PromptSample>& samples() const { return samples_; }
  const MeanCache& means() const { return means_; }
  int threads = 0;

  // F(M): mean logit difference of the unablated model.
  double F_model() const;
  // F of the model with every (head, position) pair outside `kept` mean-ablated.
  double F_kept(const NodeSet& kept) const;
  // F(M \ K): only the nodes in K are mean-ablated.
  double F_model_without(const NodeSet& K) const;
  size_t evaluations() const;

 private:
  double memoized(const std::string& key, const std::function<double()>& fn) const;

  const Model& model_;
  std::vector<PromptSample> samples_;
  const MeanCache& means_;
  int batch_size_;
  mutable std::mutex mu_;
  mutable std::map<std::string, double> memo_;
  mutable size_t evaluations_ = 0;
};

// Nodes to mean-ablate so that only `kept` survives.
std::vector<NodeRef> complement_ablation(const ModelConfig& cfg, const NodeSet& kept);

double eval_F(const Circuit& c, const EvalContext& ctx);
double faithfulness(const Circuit& c, const EvalContext& ctx);
// |F(C \ K) - F(M \ K)|; K must be a subset of the circuit.
double incompleteness(const Circuit& c, const NodeSet& K, const EvalContext& ctx);
// |F(C \ (K u {v})) - F(C \ K)|; v in C, K a subset of C \ {v}.
double minimality_score(const Circuit& c, const CircuitNode& v, const NodeSet& K, const EvalContext& ctx);

struct KSample {
  NodeSet K;
  double score = 0.0;  // incompleteness
  double F_circuit = 0.0;  // F(C \ K)
  double F_model = 0.0;    // F(M \ K)
  std::string source;      // uniform | class:<name> | greedy:<restart>:<step>
};

struct KStrategy {
  enum class Kind { uniform, by_class, greedy };
  Kind kind = Kind::uniform;
  int count = 10;  // uniform: number of sets
  std::string class_name;  // by_class; empty means every class
  int k = 10;  // greedy candidate subset size
  int n_steps = 10;
  int restarts = 10;
  int keep = 5;
  // Greedy objective: the incompleteness of K u {v} by default, or the change
  // |F(C \ (K u {v})) - F(C \ K)| when set.
  bool circuit_only_objective = false;
  uint64_t seed = 0;

  static KStrategy uniform(int count, uint64_t seed) {
    KStrategy s;
    s.count = count;
    s.seed = seed;
    return s;
  }
  static KStrategy by_class(std::string name) {
    KStrategy s;
    s.kind = Kind::by_class;
    s.class_name = std::move(name);
    return s;
  }
  static KStrategy greedy(int k, int n_steps, uint64_t seed) {
    KStrategy s;
    s.kind = Kind::greedy;
    s.k = k;
    s.n_steps = n_steps;
    s.seed = seed;
    return s;
  }
};

// Sampled K sets with their incompleteness scores. Greedy results keep the best
// `keep` sets over all restarts, intermediate sets included, best first.
std::vector<KSample> sample_K(const KStrategy& strategy, const Circuit& c, const EvalContext& ctx);

struct MinimalityEntry {
  CircuitNode v;
  NodeSet K;
  double F_without_v = 0.0;  // F(C \ (K u {v}))
  double F_with_v = 0.0;     // F(C \ K)
  double score = 0.0;
};

std::vector<MinimalityEntry> minimality_suite(const Circuit& c, const MinimalityTable& table,
                                              const EvalContext& ctx);

nlohmann::json to_json(const KSample& s);
nlohmann::json to_json(const MinimalityEntry& e);

}  // namespace cwb
