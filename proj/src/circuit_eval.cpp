#include "cwb/circuit_eval.hpp"

#include "cwb/errors.hpp"
#include "cwb/parallel.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <set>

namespace cwb {

using nlohmann::json;

NodeSet make_node_set(std::vector<CircuitNode> nodes) {
  std::sort(nodes.begin(), nodes.end());
  nodes.erase(std::unique(nodes.begin(), nodes.end()), nodes.end());
  return nodes;
}

namespace {

std::string key_of(const NodeSet& s) {
  std::string k;
  for (const auto& n : s) k += n.str() + ";";
  return k;
}

bool subset(const NodeSet& a, const NodeSet& b) { return std::includes(b.begin(), b.end(), a.begin(), a.end()); }

NodeSet set_minus(const NodeSet& a, const NodeSet& b) {
  NodeSet out;
  std::set_difference(a.begin(), a.end(), b.begin(), b.end(), std::back_inserter(out));
  return out;
}

NodeSet with(NodeSet s, const CircuitNode& v) {
  s.push_back(v);
  return make_node_set(std::move(s));
}

}  // namespace

CircuitNode circuit_node_from_json(const json& j) {
  if (!j.is_array() || j.size() < 2 || j.size() > 3) {
    throw PreconditionError("circuit node must be [layer, head] or [layer, head, position]");
  }
  CircuitNode n{j.at(0).get<int>(), j.at(1).get<int>(), PositionSpec::all()};
  if (j.size() == 3) n.pos = PositionSpec::parse(j.at(2).get<std::string>());
  if (n.pos.kind != PositionSpec::Kind::all && n.pos.kind != PositionSpec::Kind::role) {
    throw PreconditionError("circuit node positions must be a role or all");
  }
  return n;
}

json to_json(const CircuitNode& n) { return json::array({n.layer, n.head, n.pos.str()}); }

// ---------------------------------------------------------------------------

Circuit::Circuit(std::map<std::string, NodeSet> classes, std::string name)
    : name_(std::move(name)), classes_(std::move(classes)) {
  std::vector<CircuitNode> all;
  for (auto& [cls, nodes] : classes_) {
    nodes = make_node_set(nodes);
    all.insert(all.end(), nodes.begin(), nodes.end());
  }
  nodes_ = make_node_set(all);
  if (nodes_.size() != all.size()) throw PreconditionError("circuit classes overlap");
}

Circuit Circuit::from_json(const json& j) {
  std::map<std::string, NodeSet> classes;
  try {
    for (const auto& [cls, arr] : j.at("classes").items()) {
      NodeSet s;
      for (const auto& n : arr) s.push_back(circuit_node_from_json(n));
      classes[cls] = std::move(s);
    }
  } catch (const json::exception& e) {
    throw PreconditionError(std::string("bad circuit: ") + e.what());
  }
  return Circuit(std::move(classes), j.value("name", ""));
}

Circuit Circuit::load(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open circuit file " + path.string());
  try {
    return from_json(json::parse(in));
  } catch (const json::parse_error& e) {
    throw ConfigError("bad circuit file " + path.string() + ": " + e.what());
  }
}

json Circuit::to_json() const {
  json classes = json::object();
  for (const auto& [cls, nodes] : classes_) {
    json arr = json::array();
    for (const auto& n : nodes) arr.push_back(cwb::to_json(n));
    classes[cls] = arr;
  }
  return {{"schema", 1}, {"name", name_}, {"classes", classes}};
}

bool Circuit::contains(const CircuitNode& n) const { return std::binary_search(nodes_.begin(), nodes_.end(), n); }

const CircuitNode& Circuit::find(int layer, int head) const {
  const CircuitNode* hit = nullptr;
  for (const auto& n : nodes_) {
    if (n.layer == layer && n.head == head) {
      if (hit) throw PreconditionError("head " + n.str() + " appears at several positions");
      hit = &n;
    }
  }
  if (!hit) {
    throw PreconditionError("head " + std::to_string(layer) + "." + std::to_string(head) + " is not in the circuit");
  }
  return *hit;
}

const NodeSet& Circuit::class_nodes(const std::string& name) const {
  auto it = classes_.find(name);
  if (it == classes_.end()) throw PreconditionError("circuit has no class '" + name + "'");
  return it->second;
}

void Circuit::validate(const ModelConfig& cfg) const {
  for (const auto& n : nodes_) {
    if (n.layer < 0 || n.layer >= cfg.n_layers || n.head < 0 || n.head >= cfg.n_heads) {
      throw PreconditionError("circuit node " + n.str() + " is outside the model");
    }
  }
}

Circuit Circuit::without(const NodeSet& removed) const {
  std::map<std::string, NodeSet> classes;
  for (const auto& [cls, nodes] : classes_) classes[cls] = set_minus(nodes, removed);
  return Circuit(std::move(classes), name_);
}

Circuit full_circuit(const ModelConfig& cfg) {
  NodeSet all;
  for (int l = 0; l < cfg.n_layers; ++l) {
    for (int h = 0; h < cfg.n_heads; ++h) all.push_back({l, h, PositionSpec::all()});
  }
  return Circuit({{"All", all}}, "full");
}

namespace {

NodeSet heads_at(std::initializer_list<std::pair<int, int>> heads, Role r) {
  NodeSet s;
  for (auto [l, h] : heads) s.push_back({l, h, PositionSpec::of(r)});
  return s;
}

}  // namespace

Circuit canonical_circuit() {
  return Circuit({{"NameMover", heads_at({{9, 9}, {9, 6}, {10, 0}}, Role::END)},
                  {"NegativeNameMover", heads_at({{10, 7}, {11, 10}}, Role::END)},
                  {"SInhibition", heads_at({{7, 3}, {7, 9}, {8, 6}, {8, 10}}, Role::END)},
                  {"Induction", heads_at({{5, 5}, {5, 8}, {5, 9}, {6, 9}}, Role::S2)},
                  {"DuplicateToken", heads_at({{0, 1}, {0, 10}, {3, 0}}, Role::S2)},
                  {"PreviousToken", heads_at({{2, 2}, {4, 11}}, Role::S1_plus_1)},
                  {"BackupNameMover", heads_at({{9, 0}, {9, 7}, {10, 1}, {10, 2}, {10, 6}, {10, 10}, {11, 2}, {11, 9}},
                                               Role::END)}},
                 "canonical");
}

Circuit naive_circuit() {
  return Circuit({{"NameMover", heads_at({{9, 9}, {9, 6}, {10, 0}}, Role::END)},
                  {"SInhibition", heads_at({{7, 3}, {7, 9}, {8, 6}, {8, 10}}, Role::END)},
                  {"Induction", heads_at({{5, 5}, {6, 9}}, Role::S2)},
                  {"DuplicateToken", heads_at({{0, 1}, {3, 0}}, Role::S2)},
                  {"PreviousToken", heads_at({{2, 2}, {4, 11}}, Role::S1_plus_1)}},
                 "naive");
}

// ---------------------------------------------------------------------------

MinimalityTable MinimalityTable::from_json(const json& j) {
  MinimalityTable t;
  try {
    for (const auto& e : j.at("entries")) {
      const auto v = std::make_pair(e.at("node").at(0).get<int>(), e.at("node").at(1).get<int>());
      std::vector<std::pair<int, int>> K;
      for (const auto& n : e.at("K")) K.emplace_back(n.at(0).get<int>(), n.at(1).get<int>());
      t.k[v] = std::move(K);
    }
  } catch (const json::exception& e) {
    throw PreconditionError(std::string("bad minimality table: ") + e.what());
  }
  return t;
}

MinimalityTable MinimalityTable::load(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open minimality table " + path.string());
  return from_json(json::parse(in));
}

json MinimalityTable::to_json() const {
  json entries = json::array();
  for (const auto& [v, K] : k) {
    json ks = json::array();
    for (const auto& n : K) ks.push_back({n.first, n.second});
    entries.push_back({{"node", {v.first, v.second}}, {"K", ks}});
  }
  return {{"schema", 1}, {"entries", entries}};
}

MinimalityTable MinimalityTable::canonical() {
  using P = std::pair<int, int>;
  const std::vector<P> nm = {{9, 9}, {10, 0}, {9, 6}};
  const std::vector<P> neg = {{10, 7}, {11, 10}};
  MinimalityTable t;
  auto others = [](const std::vector<P>& cls, P v) {
    std::vector<P> out;
    for (P x : cls) {
      if (x != v) out.push_back(x);
    }
    return out;
  };
  auto join = [](std::vector<P> a, const std::vector<P>& b) {
    a.insert(a.end(), b.begin(), b.end());
    return a;
  };
  // Name Movers are removed one after the other.
  t.k[{9, 9}] = {};
  t.k[{10, 0}] = {{9, 9}};
  t.k[{9, 6}] = {{9, 9}, {10, 0}};
  // Negative heads compensate for each other.
  t.k[{10, 7}] = {{11, 10}};
  t.k[{11, 10}] = {{10, 7}};
  for (const auto& cls : std::vector<std::vector<P>>{{{7, 3}, {7, 9}, {8, 6}, {8, 10}},
                                                     {{0, 1}, {0, 10}, {3, 0}},
                                                     {{2, 2}, {4, 11}}}) {
    for (P v : cls) t.k[v] = others(cls, v);
  }
  const std::vector<P> induction = {{5, 5}, {5, 8}, {5, 9}, {6, 9}};
  t.k[{5, 5}] = others(induction, {5, 5});
  t.k[{6, 9}] = others(induction, {6, 9});
  t.k[{5, 8}] = neg;
  t.k[{5, 9}] = neg;
  // Backup Name Movers: all Name Movers and the backups removed before them.
  const std::vector<P> chain = {{10, 10}, {10, 6}, {10, 2}, {10, 1}, {11, 2}, {9, 7}};
  for (size_t i = 0; i < chain.size(); ++i) {
    t.k[chain[i]] = join(nm, std::vector<P>(chain.begin(), chain.begin() + i));
  }
  t.k[{11, 9}] = join(nm, neg);
  t.k[{9, 0}] = join(nm, neg);
  return t;
}

// ---------------------------------------------------------------------------

EvalContext::EvalContext(const Model& model, std::vector<PromptSample> samples, const MeanCache& means,
                         int batch_size)
    : model_(model), samples_(std::move(samples)), means_(means), batch_size_(batch_size) {
  if (samples_.empty()) throw PreconditionError("evaluation needs at least one sample");
  for (const auto& s : samples_) {
    for (int l = 0; l < model.config.n_layers; ++l) {
      for (int h = 0; h < model.config.n_heads; ++h) {
        if (!means_.covers(s.template_id, HookKey::of_head(Site::head_z, l, h))) {
          throw PreconditionError("mean cache does not cover every head for template " +
                                  std::to_string(s.template_id));
        }
      }
    }
  }
}

double EvalContext::memoized(const std::string& key, const std::function<double()>& fn) const {
  {
    std::lock_guard lock(mu_);
    if (auto it = memo_.find(key); it != memo_.end()) return it->second;
  }
  const double v = fn();
  std::lock_guard lock(mu_);
  ++evaluations_;
  memo_.emplace(key, v);
  return v;
}

size_t EvalContext::evaluations() const {
  std::lock_guard lock(mu_);
  return evaluations_;
}

double EvalContext::F_model() const {
  return memoized("M", [&] { return baseline(model_, samples_, {batch_size_, false}).mean_logit_diff(); });
}

double EvalContext::F_kept(const NodeSet& kept) const {
  return memoized("C:" + key_of(kept), [&] {
    const auto nodes = complement_ablation(model_.config, kept);
    if (nodes.empty()) return F_model();
    return knockout(model_, samples_, nodes, AblationMode::mean(means_), {batch_size_, false}).mean_logit_diff();
  });
}

double EvalContext::F_model_without(const NodeSet& K) const {
  if (K.empty()) return F_model();
  return memoized("M-:" + key_of(K), [&] {
    std::vector<NodeRef> nodes;
    for (const auto& n : K) nodes.push_back(NodeRef::head_at(n.layer, n.head, n.pos));
    return knockout(model_, samples_, nodes, AblationMode::mean(means_), {batch_size_, false}).mean_logit_diff();
  });
}

std::vector<NodeRef> complement_ablation(const ModelConfig& cfg, const NodeSet& kept) {
  std::vector<NodeRef> out;
  for (int l = 0; l < cfg.n_layers; ++l) {
    for (int h = 0; h < cfg.n_heads; ++h) {
      std::vector<Role> roles;
      bool everywhere = false;
      for (const auto& n : kept) {
        if (n.layer != l || n.head != h) continue;
        if (n.pos.is_all()) everywhere = true;
        if (n.pos.kind == PositionSpec::Kind::role) roles.push_back(n.pos.roles.at(0));
      }
      if (everywhere) continue;
      out.push_back(NodeRef::head_at(l, h, roles.empty() ? PositionSpec::all() : PositionSpec::except(roles)));
    }
  }
  return out;
}

double eval_F(const Circuit& c, const EvalContext& ctx) {
  c.validate(ctx.model().config);
  return ctx.F_kept(c.nodes());
}

double faithfulness(const Circuit& c, const EvalContext& ctx) { return std::abs(ctx.F_model() - eval_F(c, ctx)); }

double incompleteness(const Circuit& c, const NodeSet& K, const EvalContext& ctx) {
  const NodeSet k = make_node_set(K);
  if (!subset(k, c.nodes())) throw PreconditionError("K must be a subset of the circuit");
  return std::abs(ctx.F_kept(set_minus(c.nodes(), k)) - ctx.F_model_without(k));
}

double minimality_score(const Circuit& c, const CircuitNode& v, const NodeSet& K, const EvalContext& ctx) {
  const NodeSet k = make_node_set(K);
  if (!c.contains(v)) throw PreconditionError("node " + v.str() + " is not in the circuit");
  if (std::binary_search(k.begin(), k.end(), v)) throw PreconditionError("K must not contain v");
  if (!subset(k, c.nodes())) throw PreconditionError("K must be a subset of the circuit");
  const NodeSet rest = set_minus(c.nodes(), k);
  return std::abs(ctx.F_kept(set_minus(rest, {v})) - ctx.F_kept(rest));
}

namespace {

KSample scored(const Circuit& c, NodeSet K, const EvalContext& ctx, std::string source) {
  KSample s;
  s.K = make_node_set(std::move(K));
  s.F_circuit = ctx.F_kept(set_minus(c.nodes(), s.K));
  s.F_model = ctx.F_model_without(s.K);
  s.score = std::abs(s.F_circuit - s.F_model);
  s.source = std::move(source);
  return s;
}

}  // namespace

std::vector<KSample> sample_K(const KStrategy& st, const Circuit& c, const EvalContext& ctx) {
  c.validate(ctx.model().config);
  std::vector<KSample> out;
  const NodeSet& C = c.nodes();
  switch (st.kind) {
    case KStrategy::Kind::uniform: {
      if (st.count < 0) throw PreconditionError("count must be non-negative");
      Rng rng(st.seed);
      std::vector<NodeSet> sets(st.count);
      for (auto& K : sets) {
        for (const auto& n : C) {
          if (rng.bernoulli(0.5)) K.push_back(n);
        }
      }
      out.resize(sets.size());
      parallel_for(static_cast<int>(sets.size()),
                   [&](int i) { out[i] = scored(c, sets[i], ctx, "uniform:" + std::to_string(i)); }, ctx.threads);
      break;
    }
    case KStrategy::Kind::by_class: {
      std::vector<std::string> names;
      if (st.class_name.empty()) {
        for (const auto& [name, _] : c.classes()) names.push_back(name);
      } else {
        c.class_nodes(st.class_name);
        names.push_back(st.class_name);
      }
      for (const auto& name : names) out.push_back(scored(c, c.class_nodes(name), ctx, "class:" + name));
      break;
    }
    case KStrategy::Kind::greedy: {
      if (st.k < 1 || st.n_steps < 1) throw PreconditionError("greedy search needs k >= 1 and n_steps >= 1");
      std::vector<KSample> all;
      for (int r = 0; r < st.restarts; ++r) {
        Rng rng(splitmix64(st.seed + static_cast<uint64_t>(r)));
        NodeSet K;
        for (int step = 0; step < st.n_steps; ++step) {
          const NodeSet rest = set_minus(C, K);
          if (rest.empty()) break;
          const auto pick = rng.sample_distinct(rest.size(), std::min<size_t>(st.k, rest.size()));
          std::vector<double> obj(pick.size());
          const double F_ck = ctx.F_kept(rest);
          parallel_for(static_cast<int>(pick.size()), [&](int i) {
            const NodeSet cand = with(K, rest[pick[i]]);
            obj[i] = st.circuit_only_objective ? std::abs(ctx.F_kept(set_minus(C, cand)) - F_ck)
                                               : std::abs(ctx.F_kept(set_minus(C, cand)) - ctx.F_model_without(cand));
          }, ctx.threads);
          // First maximum in draw order.
          size_t best = 0;
          for (size_t i = 1; i < obj.size(); ++i) {
            if (obj[i] > obj[best]) best = i;
          }
          K = with(K, rest[pick[best]]);
          all.push_back(scored(c, K, ctx, "greedy:" + std::to_string(r) + ":" + std::to_string(step)));
        }
      }
      std::stable_sort(all.begin(), all.end(), [](const KSample& a, const KSample& b) { return a.score > b.score; });
      std::set<std::string> seen;
      for (auto& s : all) {
        if (static_cast<int>(out.size()) >= st.keep) break;
        if (seen.insert(key_of(s.K)).second) out.push_back(std::move(s));
      }
      break;
    }
  }
  return out;
}

std::vector<MinimalityEntry> minimality_suite(const Circuit& c, const MinimalityTable& table,
                                              const EvalContext& ctx) {
  c.validate(ctx.model().config);
  std::vector<MinimalityEntry> out(c.size());
  for (const auto& v : c.nodes()) {
    if (!table.k.count({v.layer, v.head})) throw PreconditionError("minimality table has no entry for " + v.str());
  }
  parallel_for(static_cast<int>(c.size()), [&](int i) {
    const CircuitNode& v = c.nodes()[i];
    MinimalityEntry e;
    e.v = v;
    for (const auto& [l, h] : table.k.at({v.layer, v.head})) e.K.push_back(c.find(l, h));
    e.K = make_node_set(e.K);
    const NodeSet rest = set_minus(c.nodes(), e.K);
    e.F_with_v = ctx.F_kept(rest);
    e.F_without_v = ctx.F_kept(set_minus(rest, {v}));
    e.score = minimality_score(c, v, e.K, ctx);
    out[i] = std::move(e);
  }, ctx.threads);
  return out;
}

json to_json(const KSample& s) {
  json K = json::array();
  for (const auto& n : s.K) K.push_back(to_json(n));
  return {{"K", K}, {"score", s.score}, {"F_circuit_minus_K", s.F_circuit}, {"F_model_minus_K", s.F_model},
          {"source", s.source}};
}

json to_json(const MinimalityEntry& e) {
  json K = json::array();
  for (const auto& n : e.K) K.push_back(to_json(n));
  return {{"node", to_json(e.v)}, {"K", K}, {"F_without_v", e.F_without_v}, {"F_with_v", e.F_with_v},
          {"score", e.score}};
}

}  // namespace cwb
