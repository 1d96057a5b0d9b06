#include "cwb/experiments.hpp"

#include "cwb/errors.hpp"
#include "cwb/plots.hpp"
#include "cwb/rng.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdlib>
#include <ctime>
#include <fstream>
#include <mutex>
#include <set>
#include <sstream>

namespace cwb {

using nlohmann::json;
namespace fs = std::filesystem;

// ---------------------------------------------------------------------------
// Configuration and engine

WorkbenchConfig WorkbenchConfig::defaults() {
  WorkbenchConfig c;
  const fs::path src = CWB_SOURCE_DIR;
  c.model.vocab = src / "assets/tokenizer/encoder.json";
  c.model.merges = src / "assets/tokenizer/vocab.bpe";
  c.word_lists = src / "config/word_lists.json";
  if (const char* dir = std::getenv("CWB_GPT2_DIR"); dir && *dir) c.model.weights = fs::path(dir) / "model.safetensors";
  return c;
}

WorkbenchConfig WorkbenchConfig::from_json(const json& j, const fs::path& base) {
  static const std::set<std::string> top = {"model",   "word_lists", "results_dir", "ui_dir",
                                            "seed",    "n_samples",  "threads",     "prepend_bos"};
  static const std::set<std::string> model_keys = {"weights", "vocab", "merges", "name_map", "config_json"};
  if (!j.is_object()) throw ConfigError("workbench config must be a JSON object");
  WorkbenchConfig c = defaults();
  auto path = [&](const json& v) {
    const fs::path p = v.get<std::string>();
    if (p.empty() || p.is_absolute() || base.empty() || p.string().rfind("random:", 0) == 0) return p;
    return base / p;
  };
  try {
    for (const auto& [k, v] : j.items()) {
      if (!top.count(k)) throw ConfigError("unknown config key '" + k + "'");
    }
    if (j.contains("model")) {
      for (const auto& [k, v] : j.at("model").items()) {
        if (!model_keys.count(k)) throw ConfigError("unknown model key '" + k + "'");
      }
      const auto& m = j.at("model");
      if (m.contains("weights")) c.model.weights = path(m.at("weights"));
      if (m.contains("vocab")) c.model.vocab = path(m.at("vocab"));
      if (m.contains("merges")) c.model.merges = path(m.at("merges"));
      if (m.contains("name_map")) c.model.name_map = path(m.at("name_map"));
      if (m.contains("config_json")) c.model.config_json = path(m.at("config_json"));
    }
    if (j.contains("word_lists")) c.word_lists = path(j.at("word_lists"));
    if (j.contains("results_dir")) c.results_dir = path(j.at("results_dir"));
    if (j.contains("ui_dir")) c.ui_dir = path(j.at("ui_dir"));
    c.seed = j.value("seed", c.seed);
    c.n_samples = j.value("n_samples", c.n_samples);
    c.threads = j.value("threads", c.threads);
    c.prepend_bos = j.value("prepend_bos", c.prepend_bos);
  } catch (const json::exception& e) {
    throw ConfigError(std::string("bad workbench config: ") + e.what());
  }
  if (c.n_samples < 0) throw ConfigError("n_samples must be non-negative");
  return c;
}

WorkbenchConfig WorkbenchConfig::load(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open config file " + path.string());
  try {
    return from_json(json::parse(in), fs::absolute(path).parent_path());
  } catch (const json::parse_error& e) {
    throw ConfigError("bad config file " + path.string() + ": " + e.what());
  }
}

json WorkbenchConfig::to_json() const {
  return {{"model",
           {{"weights", model.weights.string()},
            {"vocab", model.vocab.string()},
            {"merges", model.merges.string()},
            {"name_map", model.name_map.string()},
            {"config_json", model.config_json.string()}}},
          {"word_lists", word_lists.string()},
          {"results_dir", results_dir.string()},
          {"ui_dir", ui_dir.string()},
          {"seed", seed},
          {"n_samples", n_samples},
          {"threads", threads},
          {"prepend_bos", prepend_bos}};
}

namespace {

std::shared_ptr<const Model> random_from_spec(const std::string& spec) {
  // random:<shape>:<seed>
  const auto a = spec.find(':'), b = spec.find(':', a + 1);
  const std::string shape = spec.substr(a + 1, b == std::string::npos ? std::string::npos : b - a - 1);
  uint64_t seed = 1;
  if (b != std::string::npos) {
    try {
      seed = std::stoull(spec.substr(b + 1));
    } catch (const std::exception&) {
      throw ConfigError("bad random model seed in '" + spec + "'");
    }
  }
  if (shape == "tiny") return random_model(tiny_test_config(), seed);
  if (shape == "layout12") return random_model(layout12_test_config(), seed);
  if (shape == "gpt2-small") return random_model(ModelConfig::gpt2_small(), seed);
  throw ConfigError("unknown random model shape '" + shape + "'");
}

uint64_t fnv1a(const std::string& s, uint64_t h = 1469598103934665603ull) {
  for (unsigned char c : s) {
    h ^= c;
    h *= 1099511628211ull;
  }
  return h;
}

std::string hex64(uint64_t v) {
  char buf[20];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(v));
  return buf;
}

}  // namespace

std::shared_ptr<const Engine> Engine::load(const WorkbenchConfig& cfg) {
  auto e = std::make_shared<Engine>();
  e->config = cfg;
  const std::string w = cfg.model.weights.string();
  if (w.empty()) {
    throw ModelLoadError("no model weights configured (set CWB_GPT2_DIR or model.weights in the config)");
  }
  if (w.rfind("random:", 0) == 0) {
    e->model = random_from_spec(w);
    e->tokenizer = std::make_shared<const Tokenizer>(Tokenizer::from_files(cfg.model.vocab, cfg.model.merges));
  } else {
    auto loaded = load_model(cfg.model);
    e->model = loaded.model;
    e->tokenizer = loaded.tokenizer;
  }
  GeneratorOptions go;
  go.prepend_bos = cfg.prepend_bos;
  e->generator = std::make_shared<const IoiGenerator>(*e->tokenizer, WordLists::load(cfg.word_lists), go);
  return e;
}

std::string Engine::fingerprint() const {
  std::string s = model->source + "|" + model->config.to_json().dump() + "|";
  const auto& w = generator->words();
  for (const auto* list : {&w.names, &w.places, &w.objects, &w.fillers}) {
    for (const auto& x : *list) s += x + ",";
    s += ";";
  }
  s += generator->options().prepend_bos ? "bos" : "nobos";
  return hex64(fnv1a(s));
}

// ---------------------------------------------------------------------------
// Catalog

json ExperimentInfo::to_json() const {
  return {{"id", id},       {"title", title},         {"citation", citation},
          {"description", description}, {"default_n", default_n}, {"params", params}};
}

const std::vector<ExperimentInfo>& catalog() {
  static const std::vector<ExperimentInfo> c = {
      {"e01", "Baseline metrics", "task metrics on p_IOI (text)",
       "Mean logit difference, IO-over-S rate and IO probability on p_IOI.", 1000, json::object()},
      {"e02", "Name Mover sweep", "figure: heads-to-logits path patching",
       "Path patching from every head to the END residual with p_ABC as the counterfactual.", 256, json::object()},
      {"e03", "Name Mover attention and copy scores", "figure: Name Mover attention vs name projection",
       "Attention to a name against the head's projection on that name, plus OV copy scores.", 500,
       {{"copy_n", 1000}, {"copy_grid_n", 200}, {"top_k", 5}}},
      {"e04", "S-Inhibition query sweep", "figure: heads-to-Name-Mover-queries path patching",
       "Path patching from every head to the Name Mover queries at END.", 256, json::object()},
      {"e05", "S-Inhibition patch on Name Mover attention", "figure: Name Mover attention after S-Inhibition patching",
       "Name Mover attention before and after jointly path patching the four S-Inhibition heads into their queries.",
       256, json::object()},
      {"e06", "S-Inhibition value sweep", "figure: heads-to-S-Inhibition-values path patching",
       "Path patching from every head to the S-Inhibition values at S2.", 256, json::object()},
      {"e07", "S-Inhibition key sweep", "figure: heads-to-S-Inhibition-keys path patching",
       "Path patching from every head to the S-Inhibition keys at S2.", 256, json::object()},
      {"e08", "Previous-token head sweep", "figure: heads-to-Induction-keys path patching",
       "Path patching from every head to the Induction head keys at S1+1.", 256, json::object()},
      {"e09", "Token and position signals", "table: token and position signal decomposition",
       "S-Inhibition outputs patched from six signal-flip datasets, fitted as a*S_pos + b*S_tok.", 256,
       json::object()},
      {"e10", "Backup Name Movers", "figure: logit sweep with Name Movers knocked out",
       "Logit sweep after mean-ablating the three Name Mover heads.", 256, {{"threshold", 0.02}, {"mean_n", 300}}},
      {"e11", "Repeated random tokens", "figures: attention scores on repeated random tokens",
       "Attention scores and copying contributions on repeated random token sequences.", 100,
       {{"half_len", 100}, {"stability", true}}},
      {"e12", "MLP knockouts", "figure: MLP knockouts and direct effects",
       "Mean-ablation of each MLP, of all MLPs but the first, and their direct effects on the logits.", 256,
       {{"mean_n", 300}}},
      {"e13", "Circuit criteria", "figures: faithfulness, completeness and minimality",
       "Faithfulness, completeness and minimality of the canonical and naive circuits.", 256,
       {{"mean_n", 300},
        {"greedy_n", 64},
        {"greedy_restarts", 3},
        {"greedy_steps", 6},
        {"greedy_k", 5},
        {"uniform_count", 10}}},
      {"e14", "Adversarial prompts", "table: adversarial examples",
       "Metrics on prompts with a duplicated IO or a third S occurrence.", 512, json::object()},
  };
  return c;
}

const ExperimentInfo& catalog_entry(const std::string& id) {
  for (const auto& e : catalog()) {
    if (e.id == id) return e;
  }
  throw NotFoundError("unknown experiment '" + id + "'");
}

ExperimentSpec ExperimentSpec::from_json(const json& j) {
  ExperimentSpec s;
  try {
    s.id = j.at("id").get<std::string>();
    s.params = j.value("params", json::object());
    s.seed = j.value("seed", uint64_t{0});
    s.n_samples = j.value("n", j.value("n_samples", 0));
  } catch (const json::exception& e) {
    throw ConfigError(std::string("bad experiment spec: ") + e.what());
  }
  if (!s.params.is_object()) throw ConfigError("experiment params must be an object");
  return s;
}

json ExperimentSpec::to_json() const { return {{"id", id}, {"params", params}, {"seed", seed}, {"n_samples", n_samples}}; }

bool ResultRecord::passed() const {
  return std::all_of(checks.begin(), checks.end(), [](const Check& c) { return c.passed || !c.primary; });
}

json ResultRecord::to_json() const {
  json cs = json::array();
  for (const auto& c : checks) {
    cs.push_back({{"name", c.name}, {"passed", c.passed}, {"measured", c.measured}, {"expected", c.expected},
                  {"primary", c.primary}});
  }
  json arts = json::array();
  for (const auto& a : artifacts) arts.push_back(a.name);
  return {{"schema", kSchema},   {"experiment", experiment}, {"fingerprint", fingerprint},
          {"wall_time_s", wall_time_s}, {"seed", seed},       {"n_samples", n_samples},
          {"params", params},    {"payload", payload},       {"checks", cs},
          {"artifacts", arts},   {"passed", passed()}};
}

ResultRecord ResultRecord::from_json(const json& j) {
  ResultRecord r;
  try {
    if (j.at("schema").get<int>() != kSchema) throw ConfigError("unsupported result schema");
    r.experiment = j.at("experiment").get<std::string>();
    r.fingerprint = j.at("fingerprint").get<std::string>();
    r.wall_time_s = j.at("wall_time_s").get<double>();
    r.seed = j.at("seed").get<uint64_t>();
    r.n_samples = j.at("n_samples").get<int>();
    r.params = j.at("params");
    r.payload = j.at("payload");
    for (const auto& c : j.at("checks")) {
      r.checks.push_back({c.at("name").get<std::string>(), c.at("passed").get<bool>(), c.at("measured"),
                          c.at("expected").get<std::string>(), c.at("primary").get<bool>()});
    }
    for (const auto& a : j.at("artifacts")) r.artifacts.push_back({a.get<std::string>(), ""});
  } catch (const json::exception& e) {
    throw ConfigError(std::string("bad result record: ") + e.what());
  }
  return r;
}

std::string matrix_csv(const std::vector<std::vector<double>>& m, const std::string& value_name) {
  std::ostringstream o;
  o.precision(9);
  o << "layer,head," << value_name << "\n";
  for (size_t l = 0; l < m.size(); ++l) {
    for (size_t h = 0; h < m[l].size(); ++h) o << l << "," << h << "," << m[l][h] << "\n";
  }
  return o.str();
}

// ---------------------------------------------------------------------------
// Shared sample streams

json outcomes_json(const Outcomes& o) {
  double s_over_io = 0;
  for (const auto& r : o.rows) s_over_io += r.logit_diff < 0;
  return {{"mean_logit_diff", o.mean_logit_diff()},
          {"io_over_s_rate", o.io_over_s_rate()},
          {"s_over_io_rate", o.rows.empty() ? 0.0 : s_over_io / o.rows.size()},
          {"mean_io_prob", o.mean_io_prob()},
          {"n", o.rows.size()}};
}

uint64_t derive_seed(uint64_t seed, uint64_t stream) { return splitmix64(seed * 0x9E3779B97F4A7C15ull + stream); }

std::vector<PromptSample> run_ioi_samples(const Engine& engine, uint64_t seed, int n) {
  return engine.generator->gen_ioi(n, derive_seed(seed, 1));
}

std::vector<PromptSample> run_abc_samples(const Engine& engine, uint64_t seed, const std::vector<PromptSample>& x) {
  return engine.generator->gen_abc(x, derive_seed(seed, 2));
}

MeanCache run_reference_means(const Engine& engine, uint64_t seed, int mean_n, int batch_size) {
  if (mean_n < 1) throw ConfigError("mean_n must be positive");
  const auto& gen = *engine.generator;
  const auto ref = gen.gen_abc(gen.gen_ioi_stratified(mean_n, derive_seed(seed, 3)), derive_seed(seed, 4));
  return MeanCache::build(*engine.model, ref, ablatable_keys(engine.model->config), batch_size);
}

// ---------------------------------------------------------------------------
// Experiments

namespace {

using Head = std::pair<int, int>;
const std::vector<Head> kNameMovers = {{9, 9}, {9, 6}, {10, 0}};
const std::vector<Head> kNegative = {{10, 7}, {11, 10}};
const std::vector<Head> kSInhibition = {{7, 3}, {7, 9}, {8, 6}, {8, 10}};
const std::vector<Head> kInduction = {{5, 5}, {5, 8}, {5, 9}, {6, 9}};
const std::vector<Head> kDuplicate = {{0, 1}, {0, 10}, {3, 0}};
const std::vector<Head> kPrevious = {{2, 2}, {4, 11}};
const std::vector<Head> kBackup = {{9, 0}, {9, 7}, {10, 1}, {10, 2}, {10, 6}, {10, 10}, {11, 2}, {11, 9}};

std::string head_str(Head h) { return std::to_string(h.first) + "." + std::to_string(h.second); }

json heads_json(const std::vector<Head>& hs) {
  json a = json::array();
  for (auto h : hs) a.push_back(head_str(h));
  return a;
}

std::vector<Head> first(const std::vector<Head>& v, size_t k) { return {v.begin(), v.begin() + std::min(k, v.size())}; }

bool contains_all(const std::vector<Head>& pool, const std::vector<Head>& want) {
  return std::all_of(want.begin(), want.end(),
                     [&](Head h) { return std::find(pool.begin(), pool.end(), h) != pool.end(); });
}

size_t overlap(const std::vector<Head>& a, const std::vector<Head>& b) {
  size_t n = 0;
  for (auto h : a) n += std::find(b.begin(), b.end(), h) != b.end();
  return n;
}

std::string fmt(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.4g", v);
  return buf;
}


struct Run {
  const Engine& engine;
  const Model& model;
  const IoiGenerator& gen;
  const ExperimentSpec& spec;
  json params;
  int n = 0;
  int batch = 32;
  int threads = 0;
  const RunHooks& hooks;
  ResultRecord& rec;
  int stages = 1;
  int stage = 0;

  uint64_t derive(uint64_t k) const { return derive_seed(spec.seed, k); }

  void begin(int n_stages) { stages = std::max(1, n_stages); }
  void step() {
    ++stage;
    report(0.0);
  }
  void report(double within) const {
    if (hooks.progress) hooks.progress(std::min(1.0, (stage + std::clamp(within, 0.0, 1.0)) / stages));
  }
  std::function<void(double)> sub() const {
    return [this](double f) { report(f); };
  }

  int param_int(const char* k) const { return params.at(k).get<int>(); }
  double param_num(const char* k) const { return params.at(k).get<double>(); }
  bool param_bool(const char* k) const { return params.at(k).get<bool>(); }

  std::vector<PromptSample> ioi() const { return run_ioi_samples(engine, spec.seed, n); }
  std::vector<PromptSample> abc(const std::vector<PromptSample>& s) const { return run_abc_samples(engine, spec.seed, s); }
  MeanCache means(int mean_n) const { return run_reference_means(engine, spec.seed, mean_n, batch); }
  PathPatchOptions patch_opts() const {
    PathPatchOptions o;
    o.batch_size = batch;
    o.threads = threads;
    o.progress = sub();
    return o;
  }

  void check(std::string name, bool ok, json measured, std::string expected, bool primary = true) {
    rec.checks.push_back({std::move(name), ok, std::move(measured), std::move(expected), primary});
  }
  void artifact(std::string name, std::string content) { rec.artifacts.push_back({std::move(name), std::move(content)}); }

  void require_layout() const {
    if (model.config.n_layers != 12 || model.config.n_heads != 12) {
      throw ConfigError("experiment " + spec.id + " names GPT-2 small heads and needs a 12x12 head layout");
    }
  }
};

std::vector<NodeRef> head_nodes(const std::vector<Head>& hs, PositionSpec p = PositionSpec::all()) {
  std::vector<NodeRef> out;
  for (auto [l, h] : hs) out.push_back(NodeRef::head_at(l, h, p));
  return out;
}

std::vector<Head> ranked_desc(const SweepResult& s) {
  auto r = s.ranked();
  std::reverse(r.begin(), r.end());
  return r;
}

void sweep_payload(Run& r, const SweepResult& s, const std::string& title) {
  r.rec.payload["sweep"] = s.to_json();
  r.rec.payload["most_negative"] = heads_json(first(s.ranked(), 10));
  r.rec.payload["most_positive"] = heads_json(first(ranked_desc(s), 10));
  r.artifact("sweep.csv", matrix_csv(s.matrix, "delta_logit_diff"));
  r.artifact("sweep.svg", heatmap_svg(s.matrix, title));
}

SweepResult run_sweep(Run& r, const std::vector<ReceiverRef>& receivers) {
  const auto x = r.ioi();
  const auto y = r.abc(x);
  auto s = sweep(r.model, x, y, receivers, PositionSpec::all(), r.n, r.patch_opts());
  s.seed = r.spec.seed;
  return s;
}

std::vector<ReceiverRef> queries(const std::vector<Head>& hs, Role role) {
  std::vector<ReceiverRef> out;
  for (auto [l, h] : hs) out.push_back(ReceiverRef::query(l, h, PositionSpec::of(role)));
  return out;
}

void e01(Run& r) {
  r.begin(1);
  const auto x = r.ioi();
  const auto out = baseline(r.model, x, {r.batch, false});
  r.rec.payload = outcomes_json(out);
  const double ld = out.mean_logit_diff(), rate = out.io_over_s_rate(), p = out.mean_io_prob();
  r.check("mean logit difference", ld >= 3.0 && ld <= 4.1, ld, "in [3.0, 4.1]");
  r.check("IO over S rate", rate >= 0.98, rate, ">= 0.98");
  r.check("mean IO probability", p >= 0.35 && p <= 0.60, p, "in [0.35, 0.60]");
  std::ostringstream csv;
  csv.precision(9);
  csv << "index,template,pattern,logit_diff,io_prob\n";
  std::vector<double> lds;
  for (size_t i = 0; i < x.size(); ++i) {
    csv << i << "," << x[i].template_id << "," << (x[i].pattern == Pattern::ABBA ? "ABBA" : "BABA") << ","
        << out.rows[i].logit_diff << "," << out.rows[i].io_prob << "\n";
    lds.push_back(out.rows[i].logit_diff);
  }
  r.artifact("samples.csv", csv.str());
  r.artifact("logit_diff.svg", histogram_svg(lds, 30, "Logit difference on p_IOI", "logit(IO) - logit(S)"));
  r.step();
}

void e02(Run& r) {
  r.require_layout();
  r.begin(1);
  const auto s = run_sweep(r, {ReceiverRef::final_residual(PositionSpec::of(Role::END))});
  sweep_payload(r, s, "Path patching: heads to logits");
  const auto neg = s.ranked();
  const auto pos = ranked_desc(s);
  if (r.n >= 128) {
    r.check("Name Movers are the three most negative", contains_all(first(neg, 3), kNameMovers),
            heads_json(first(neg, 3)), "{9.9, 9.6, 10.0}");
    r.check("Negative Name Movers are the two most positive", contains_all(first(pos, 2), kNegative),
            heads_json(first(pos, 2)), "{10.7, 11.10}");
  } else {
    r.check("Name Movers among the five most negative", contains_all(first(neg, 5), kNameMovers),
            heads_json(first(neg, 5)), "{9.9, 9.6, 10.0} in top 5 (small-n mode)");
    r.check("Negative Name Movers among the five most positive", contains_all(first(pos, 5), kNegative),
            heads_json(first(pos, 5)), "{10.7, 11.10} in top 5 (small-n mode)");
  }
  r.step();
}

void e03(Run& r) {
  r.require_layout();
  r.begin(3);
  const auto x = r.ioi();
  json scatter = json::object();
  for (auto hd : kNameMovers) {
    const auto io = nm_scatter(r.model, hd.first, hd.second, x, Role::IO, r.batch);
    const auto s = nm_scatter(r.model, hd.first, hd.second, x, Role::S2, r.batch);
    scatter[head_str(hd)] = {{"IO", io.to_json()}, {"S", s.to_json()}};
    std::vector<XY> pts;
    for (const auto& p : io.points) pts.push_back({p.attention, p.projection});
    r.artifact("scatter_" + head_str(hd) + "_io.svg",
               scatter_svg(pts, "Head " + head_str(hd) + ": attention to IO vs projection on IO", "attention",
                           "projection"));
    const double rho = io.correlation.value_or(std::nan(""));
    r.check("correlation for " + head_str(hd) + " on IO", io.correlation && rho > 0.7,
            io.correlation ? json(rho) : json(nullptr), "> 0.7", false);
  }
  r.rec.payload["scatter"] = scatter;
  const auto attn = attention_stat(r.model, kNameMovers, x, Role::END, Role::IO, r.batch);
  r.rec.payload["nm_attention_end_to_io"] = {{"mean", attn.mean}, {"std", attn.std}};
  r.check("Name Mover END->IO attention", attn.mean >= 0.45 && attn.mean <= 0.75, attn.mean, "in [0.45, 0.75]",
          false);
  r.step();

  const auto cs = r.gen.gen_ioi(r.param_int("copy_n"), r.derive(5));
  CopyScoreOptions plus, minus;
  plus.top_k = minus.top_k = r.param_int("top_k");
  plus.batch_size = minus.batch_size = r.batch;
  plus.threads = minus.threads = r.threads;
  minus.sign = -1;
  json copy = json::object(), negcopy = json::object();
  for (auto hd : kNameMovers) {
    const double v = copy_score(r.model, hd.first, hd.second, cs, plus);
    copy[head_str(hd)] = v;
    r.check("copy score " + head_str(hd), v > 0.90, v, "> 0.90");
  }
  for (auto hd : kNegative) {
    const double v = copy_score(r.model, hd.first, hd.second, cs, minus);
    negcopy[head_str(hd)] = v;
    r.check("negative copy score " + head_str(hd), v > 0.90, v, "> 0.90");
  }
  r.rec.payload["copy_score"] = copy;
  r.rec.payload["negative_copy_score"] = negcopy;
  r.step();

  const int gn = std::min<int>(r.param_int("copy_grid_n"), static_cast<int>(cs.size()));
  const auto grid = copy_scores(r.model, std::span(cs).first(gn), plus);
  double mean = 0;
  for (const auto& row : grid.grid) {
    for (double v : row) mean += v;
  }
  mean /= r.model.config.n_layers * r.model.config.n_heads;
  r.rec.payload["copy_grid"] = grid.to_json();
  r.rec.payload["copy_grid_mean"] = mean;
  r.check("mean copy score over all heads", mean < 0.30, mean, "< 0.30");
  r.artifact("copy_scores.csv", grid.to_csv());
  r.artifact("copy_scores.svg", heatmap_svg(grid.grid, "Copy score per head"));
  r.step();
}

void e04(Run& r) {
  r.require_layout();
  r.begin(2);
  const auto s = run_sweep(r, queries(kNameMovers, Role::END));
  sweep_payload(r, s, "Path patching: heads to Name Mover queries");
  const auto top6 = first(s.ranked(), 6);
  r.check("S-Inhibition heads in the six most negative", contains_all(top6, kSInhibition), heads_json(top6),
          "{7.3, 7.9, 8.6, 8.10} in top 6");
  r.step();
  const auto x = r.ioi();
  const auto st = attention_stat(r.model, kSInhibition, x, Role::END, Role::S2, r.batch);
  r.rec.payload["sinh_attention_end_to_s2"] = {{"mean", st.mean}, {"std", st.std}};
  r.check("S-Inhibition END->S2 attention", st.mean >= 0.35 && st.mean <= 0.65, st.mean, "in [0.35, 0.65]");
  r.step();
}

struct AttnAcc {
  std::vector<double> io, s1, s2;
};

MeanStd mean_std(const std::vector<double>& v) {
  MeanStd m;
  m.n = static_cast<int>(v.size());
  if (v.empty()) return m;
  for (double x : v) m.mean += x;
  m.mean /= v.size();
  for (double x : v) m.std += (x - m.mean) * (x - m.mean);
  m.std = std::sqrt(m.std / v.size());
  return m;
}

json ms_json(const MeanStd& m) { return {{"mean", m.mean}, {"std", m.std}}; }

void e05(Run& r) {
  r.require_layout();
  r.begin(2);
  const auto x = r.ioi();
  const auto y = r.abc(x);
  std::map<Head, AttnAcc> before, after;
  auto collect = [&](std::map<Head, AttnAcc>& acc, const std::vector<int>& idx, const ActivationCache& cache,
                     std::span<const PromptSample> samples) {
    for (auto hd : kNameMovers) {
      const Tensor& p = cache.at(HookKey::of_head(Site::head_pattern, hd.first, hd.second));
      const int64_t N = p.dim(1);
      for (size_t b = 0; b < idx.size(); ++b) {
        const auto& s = samples[idx[b]];
        const float* row = p.data() + (b * N + s.pos.end) * N;
        acc[hd].io.push_back(row[s.pos.io]);
        acc[hd].s1.push_back(row[s.pos.s1]);
        acc[hd].s2.push_back(row[s.pos.s2]);
      }
    }
  };
  ForwardOptions fo;
  fo.logits = LogitsMode::none;
  for (auto hd : kNameMovers) fo.capture.insert(HookKey::of_head(Site::head_pattern, hd.first, hd.second));
  for (const auto& idx : length_batches(x, r.batch)) {
    std::vector<TokenSequence> toks;
    for (int i : idx) toks.push_back(x[i].tokens);
    collect(before, idx, forward(r.model, toks, {}, fo).cache, x);
  }
  r.step();
  const auto senders = head_nodes(kSInhibition);
  PatchSpec spec{senders[0], queries(kNameMovers, Role::END), {senders.begin() + 1, senders.end()}};
  auto po = r.patch_opts();
  po.capture = fo.capture;
  po.inspect = [&](const std::vector<int>& idx, const ActivationCache& cache) { collect(after, idx, cache, x); };
  const auto out = path_patch(r.model, x, y, spec, po);
  json heads = json::object();
  std::vector<Bar> bars;
  double io_b = 0, io_a = 0, s1_b = 0, s1_a = 0;
  for (auto hd : kNameMovers) {
    const auto b_io = mean_std(before[hd].io), b_s1 = mean_std(before[hd].s1), b_s2 = mean_std(before[hd].s2);
    const auto a_io = mean_std(after[hd].io), a_s1 = mean_std(after[hd].s1), a_s2 = mean_std(after[hd].s2);
    heads[head_str(hd)] = {{"before", {{"IO", ms_json(b_io)}, {"S1", ms_json(b_s1)}, {"S2", ms_json(b_s2)}}},
                           {"after", {{"IO", ms_json(a_io)}, {"S1", ms_json(a_s1)}, {"S2", ms_json(a_s2)}}}};
    bars.push_back({head_str(hd) + " IO before", b_io.mean, b_io.std});
    bars.push_back({head_str(hd) + " IO after", a_io.mean, a_io.std});
    bars.push_back({head_str(hd) + " S1 before", b_s1.mean, b_s1.std});
    bars.push_back({head_str(hd) + " S1 after", a_s1.mean, a_s1.std});
    io_b += b_io.mean;
    io_a += a_io.mean;
    s1_b += b_s1.mean;
    s1_a += a_s1.mean;
  }
  r.rec.payload["attention"] = heads;
  r.rec.payload["patched"] = outcomes_json(out);
  r.check("patching lowers Name Mover attention to IO", io_a < io_b, json{{"before", io_b / 3}, {"after", io_a / 3}},
          "after < before", false);
  r.check("patching raises Name Mover attention to S1", s1_a > s1_b, json{{"before", s1_b / 3}, {"after", s1_a / 3}},
          "after > before", false);
  r.artifact("attention.svg", bar_svg(bars, "Name Mover attention before/after S-Inhibition patching", "probability"));
  r.step();
}

void e06(Run& r) {
  r.require_layout();
  r.begin(1);
  std::vector<ReceiverRef> recv;
  for (auto [l, h] : kSInhibition) recv.push_back(ReceiverRef::value(l, h, PositionSpec::of(Role::S2)));
  const auto s = run_sweep(r, recv);
  sweep_payload(r, s, "Path patching: heads to S-Inhibition values");
  std::vector<Head> pool = kInduction;
  pool.insert(pool.end(), kDuplicate.begin(), kDuplicate.end());
  const auto top8 = first(s.ranked(), 8);
  const size_t k = overlap(top8, pool);
  r.check("Induction/Duplicate heads among the eight most negative", k >= 3, heads_json(top8), ">= 3 of them", false);
  r.step();
}

void e07(Run& r) {
  r.require_layout();
  r.begin(1);
  std::vector<ReceiverRef> recv;
  for (auto [l, h] : kSInhibition) recv.push_back(ReceiverRef::key(l, h, PositionSpec::of(Role::S2)));
  const auto s = run_sweep(r, recv);
  sweep_payload(r, s, "Path patching: heads to S-Inhibition keys");
  r.step();
}

void e08(Run& r) {
  r.require_layout();
  r.begin(1);
  std::vector<ReceiverRef> recv;
  for (auto [l, h] : kInduction) recv.push_back(ReceiverRef::key(l, h, PositionSpec::of(Role::S1_plus_1)));
  const auto s = run_sweep(r, recv);
  sweep_payload(r, s, "Path patching: heads to Induction keys at S1+1");
  const auto top3 = first(s.ranked(), 3);
  r.check("Previous Token heads among the three most negative", contains_all(top3, kPrevious), heads_json(top3),
          "{2.2, 4.11} in top 3", false);
  r.step();
}

const std::map<std::pair<int, int>, double>& published_signal_table() {
  static const std::map<std::pair<int, int>, double> t = {{{1, 1}, 3.55},   {{0, 1}, 2.45},  {{-1, 1}, 1.77},
                                                          {{1, -1}, -0.99}, {{0, -1}, -1.96}, {{-1, -1}, -3.16}};
  return t;
}

void e09(Run& r) {
  r.require_layout();
  using F = Flip;
  const std::vector<std::pair<std::vector<Flip>, SignalState>> cells = {
      {{F::RandomNames}, {0, 1}},        {{F::Swap_IO_S1, F::Replace_IO_by_S}, {-1, 1}},
      {{F::Swap_IO_S1}, {1, -1}},        {{F::RandomNames, F::Swap_IO_S1}, {0, -1}},
      {{F::Replace_IO_by_S}, {-1, -1}},
  };
  r.begin(static_cast<int>(cells.size()) + 1);
  const auto x = r.ioi();
  const auto nodes = head_nodes(kSInhibition, PositionSpec::of(Role::END));
  std::map<std::pair<int, int>, double> measured;
  measured[{1, 1}] = baseline(r.model, x, {r.batch, false}).mean_logit_diff();
  r.step();
  json rows = json::array();
  rows.push_back({{"flips", json::array()}, {"S_tok", 1}, {"S_pos", 1}, {"logit_diff", measured[{1, 1}]}});
  uint64_t k = 10;
  for (const auto& [flips, state] : cells) {
    std::vector<PromptSample> y;
    for (size_t i = 0; i < x.size(); ++i) {
      y.push_back(signal_flip(x[i], flips, r.gen.words(), r.derive(k) + i));
      if (!(signal_state(x[i], y.back()) == state)) throw std::logic_error("signal flip reached an unexpected state");
    }
    ++k;
    const double ld = activation_patch(r.model, x, y, nodes, {r.batch, false}).mean_logit_diff();
    measured[{state.s_tok, state.s_pos}] = ld;
    json names = json::array();
    for (auto f : flips) {
      names.push_back(f == F::RandomNames ? "RandomNames" : f == F::Swap_IO_S1 ? "Swap_IO_S1" : "Replace_IO_by_S");
    }
    rows.push_back({{"flips", names}, {"S_tok", state.s_tok}, {"S_pos", state.s_pos}, {"logit_diff", ld}});
    r.step();
  }
  const auto fit = token_position_fit(measured);
  const auto pub = token_position_fit(published_signal_table());
  r.rec.payload = {{"cells", rows}, {"fit", fit.to_json()}, {"published_table_fit", pub.to_json()}};
  r.check("published table: a", std::abs(pub.a - 2.31) <= 0.02, pub.a, "2.31 +/- 0.02");
  r.check("published table: b", std::abs(pub.b - 0.99) <= 0.02, pub.b, "0.99 +/- 0.02");
  r.check("published table: mean error", std::abs(pub.mean_rel_error - 0.07) <= 0.01, pub.mean_rel_error,
          "0.07 +/- 0.01");
  r.check("measured fit: a", fit.a >= 1.6 && fit.a <= 3.0, fit.a, "in [1.6, 3.0]");
  r.check("measured fit: b", fit.b >= 0.5 && fit.b <= 1.5, fit.b, "in [0.5, 1.5]");
  r.check("measured fit: mean error", fit.mean_rel_error < 0.15, fit.mean_rel_error, "< 0.15");
  std::ostringstream csv;
  csv.precision(9);
  csv << "S_tok,S_pos,logit_diff,fit\n";
  std::vector<Bar> bars;
  for (const auto& [key, v] : measured) {
    const double f = fit.a * key.second + fit.b * key.first;
    csv << key.first << "," << key.second << "," << v << "," << f << "\n";
    bars.push_back({"tok " + std::to_string(key.first) + " pos " + std::to_string(key.second), v, 0.0});
  }
  r.artifact("signals.csv", csv.str());
  r.artifact("signals.svg", bar_svg(bars, "Logit difference after S-Inhibition patching", "logit difference"));
}

void e10(Run& r) {
  r.require_layout();
  r.begin(2);
  const auto x = r.ioi();
  const auto y = r.abc(x);
  const auto means = r.means(r.param_int("mean_n"));
  r.step();
  BackupOptions o;
  o.knocked = head_nodes(kNameMovers);
  o.mode = AblationMode::mean(means);
  o.threshold = r.param_num("threshold");
  for (const auto* cls : {&kNameMovers, &kNegative, &kSInhibition, &kInduction, &kDuplicate, &kPrevious}) {
    o.exclude.insert(o.exclude.end(), cls->begin(), cls->end());
  }
  o.batch_size = r.batch;
  o.threads = r.threads;
  auto res = backup_discovery(r.model, x, y, o);
  res.sweep.seed = r.spec.seed;
  r.rec.payload = res.to_json();
  const double drop = res.F_model != 0 ? (res.F_model - res.F_knocked) / res.F_model : 0.0;
  r.rec.payload["relative_drop"] = drop;
  std::vector<Head> found;
  for (const auto& h : res.heads) found.push_back({h.layer, h.head});
  r.check("logit difference drop after Name Mover knockout", drop < 0.30, drop, "< 0.30");
  r.check("new heads above threshold", found.size() >= 4, heads_json(found), ">= 4 heads");
  r.check("overlap with the eight Backup Name Movers", overlap(found, kBackup) >= 4,
          static_cast<int>(overlap(found, kBackup)), ">= 4", false);
  r.artifact("sweep.csv", matrix_csv(res.sweep.matrix, "delta_logit_diff"));
  r.artifact("sweep.svg", heatmap_svg(res.sweep.matrix, "Heads to logits after Name Mover knockout"));
  r.step();
}

double jaccard(const std::vector<Head>& a, const std::vector<Head>& b) {
  std::set<Head> sa(a.begin(), a.end()), sb(b.begin(), b.end()), u = sa;
  u.insert(sb.begin(), sb.end());
  size_t inter = 0;
  for (auto h : sa) inter += sb.count(h);
  return u.empty() ? 1.0 : static_cast<double>(inter) / u.size();
}

void e11(Run& r) {
  r.require_layout();
  const bool stability = r.param_bool("stability");
  r.begin(stability ? 3 : 2);
  const int L = r.param_int("half_len");
  if (L < 2) throw ConfigError("half_len must be at least 2");
  const auto seqs = gen_repeated_random(L, r.n, r.derive(7), r.model.config.vocab_size);
  RepeatedOptions ro;
  ro.seed = r.spec.seed;
  const auto reps = repeated_token_scores(r.model, seqs, ro);
  r.step();
  const auto copying = copy_on_repeats(r.model, seqs, ro);
  r.step();
  json scores = json::object();
  for (const auto& rep : reps) {
    scores[score_kind_name(rep.kind)] = rep.to_json();
    r.artifact(std::string(score_kind_name(rep.kind)) + ".csv", rep.to_csv());
    r.artifact(std::string(score_kind_name(rep.kind)) + ".svg",
               heatmap_svg(rep.grid, std::string(score_kind_name(rep.kind)) + " score"));
  }
  scores["copy_on_repeats"] = copying.to_json();
  r.artifact("copy_on_repeats.csv", copying.to_csv());
  r.artifact("copy_on_repeats.svg", heatmap_svg(copying.grid, "Contribution to the next token"));
  r.rec.payload["scores"] = scores;
  const auto prev2 = reps[0].top(2), ind5 = reps[1].top(5), dup3 = reps[2].top(3);
  r.rec.payload["top"] = {{"previous_token", heads_json(prev2)}, {"induction", heads_json(ind5)},
                          {"duplicate", heads_json(dup3)}};
  r.check("previous-token top 2", contains_all(prev2, kPrevious), heads_json(prev2), "{2.2, 4.11}");
  r.check("induction top 5", contains_all(ind5, {{5, 5}, {6, 9}}), heads_json(ind5), "contains {5.5, 6.9}");
  r.check("duplicate top 3", contains_all(dup3, {{0, 1}, {3, 0}}), heads_json(dup3), "contains {0.1, 3.0}");
  const auto copy20 = copying.top(20);
  r.check("induction heads copy", contains_all(copy20, {{5, 5}, {6, 9}}), heads_json(copy20),
          "{5.5, 6.9} in the top 20 contributors", false);
  r.check("negative heads contribute negatively", copying.at(10, 7) < 0 && copying.at(11, 10) < 0,
          json{{"10.7", copying.at(10, 7)}, {"11.10", copying.at(11, 10)}}, "< 0", false);
  if (stability) {
    const auto other = repeated_token_scores(
        r.model, gen_repeated_random(L, r.n, r.derive(8), r.model.config.vocab_size), ro);
    const double j0 = jaccard(prev2, other[0].top(2)), j1 = jaccard(ind5, other[1].top(5)),
                 j2 = jaccard(dup3, other[2].top(3));
    r.rec.payload["stability_jaccard"] = {{"previous_token", j0}, {"induction", j1}, {"duplicate", j2}};
    r.check("top sets stable across batches", j0 >= 0.6 && j1 >= 0.6 && j2 >= 0.6,
            json{{"previous_token", j0}, {"induction", j1}, {"duplicate", j2}}, "Jaccard >= 0.6", false);
    r.step();
  }
}

void e12(Run& r) {
  const int Lc = r.model.config.n_layers;
  r.begin(Lc + 3);
  const auto x = r.ioi();
  const auto y = r.abc(x);
  const auto means = r.means(r.param_int("mean_n"));
  const double F = baseline(r.model, x, {r.batch, false}).mean_logit_diff();
  r.step();
  std::vector<double> single(Lc), direct(Lc);
  for (int l = 0; l < Lc; ++l) {
    single[l] = knockout(r.model, x, {NodeRef::mlp_at(l)}, AblationMode::mean(means), {r.batch, false})
                    .mean_logit_diff();
    r.step();
  }
  std::vector<NodeRef> rest;
  for (int l = 1; l < Lc; ++l) rest.push_back(NodeRef::mlp_at(l));
  const double all_but_0 = knockout(r.model, x, rest, AblationMode::mean(means), {r.batch, false}).mean_logit_diff();
  r.step();
  auto po = r.patch_opts();
  po.progress = nullptr;
  for (int l = 0; l < Lc; ++l) {
    const PatchSpec spec{NodeRef::mlp_at(l), {ReceiverRef::final_residual(PositionSpec::of(Role::END))}, {}};
    direct[l] = path_patch(r.model, x, y, spec, po).mean_logit_diff() - F;
    r.report(static_cast<double>(l + 1) / Lc);
  }
  r.step();
  r.rec.payload = {{"F_model", F},
                   {"knockout_logit_diff", single},
                   {"all_but_first_logit_diff", all_but_0},
                   {"direct_effect", direct}};
  r.check("ablating all MLPs but the first", all_but_0 < 0, all_but_0, "< 0");
  double worst = std::numeric_limits<double>::infinity();
  int worst_l = -1;
  for (int l = 1; l < Lc; ++l) {
    if (single[l] < worst) {
      worst = single[l];
      worst_l = l;
    }
  }
  r.check("single MLP knockouts keep half the logit difference", worst > 0.5 * F,
          json{{"layer", worst_l}, {"logit_diff", worst}, {"F_model", F}}, "> 0.5 * F(M) for layers 1..11");
  std::ostringstream csv;
  csv.precision(9);
  csv << "layer,knockout_logit_diff,direct_effect\n";
  std::vector<Bar> kb, db;
  for (int l = 0; l < Lc; ++l) {
    csv << l << "," << single[l] << "," << direct[l] << "\n";
    kb.push_back({"MLP " + std::to_string(l), single[l] - F, 0.0});
    db.push_back({"MLP " + std::to_string(l), direct[l], 0.0});
  }
  r.artifact("mlps.csv", csv.str());
  r.artifact("knockout.svg", bar_svg(kb, "Change in logit difference from MLP knockout", "delta logit diff"));
  r.artifact("direct.svg", bar_svg(db, "Direct effect of each MLP on the logits", "delta logit diff"));
}

void e13(Run& r) {
  r.require_layout();
  r.begin(5);
  const auto x = r.ioi();
  const auto means = r.means(r.param_int("mean_n"));
  EvalContext ctx(r.model, x, means, r.batch);
  ctx.threads = r.threads;
  const double FM = ctx.F_model();
  const auto canon = canonical_circuit();
  const auto naive = naive_circuit();
  const double f_c = faithfulness(canon, ctx), f_n = faithfulness(naive, ctx);
  json payload = {{"F_model", FM},
                  {"canonical", {{"F", eval_F(canon, ctx)}, {"faithfulness", f_c}}},
                  {"naive", {{"F", eval_F(naive, ctx)}, {"faithfulness", f_n}}}};
  r.check("canonical faithfulness", f_c <= 0.30 * std::abs(FM), f_c, "<= 0.30 * F(M)");
  r.check("naive faithfulness", f_n <= 0.30 * std::abs(FM), f_n, "<= 0.30 * F(M)");
  r.step();

  const double inc_naive = incompleteness(naive, naive.class_nodes("NameMover"), ctx);
  payload["naive"]["incompleteness_without_name_movers"] = inc_naive;
  r.check("naive circuit incompleteness with K = Name Movers", inc_naive >= 2 * f_n,
          json{{"incompleteness", inc_naive}, {"faithfulness", f_n}}, ">= 2 * faithfulness");
  json by_class = json::array();
  for (const auto& k : sample_K(KStrategy::by_class(""), canon, ctx)) by_class.push_back(to_json(k));
  payload["canonical"]["class_incompleteness"] = by_class;
  json uni = json::array();
  for (const auto& k : sample_K(KStrategy::uniform(r.param_int("uniform_count"), r.derive(20)), canon, ctx)) {
    uni.push_back(to_json(k));
  }
  payload["canonical"]["uniform_incompleteness"] = uni;
  r.step();

  // The search runs on a smaller sample; its best sets are rescored on the full one.
  const int gn = std::min<int>(r.param_int("greedy_n"), static_cast<int>(x.size()));
  EvalContext gctx(r.model, std::vector<PromptSample>(x.begin(), x.begin() + gn), means, r.batch);
  gctx.threads = r.threads;
  auto st = KStrategy::greedy(r.param_int("greedy_k"), r.param_int("greedy_steps"), r.derive(21));
  st.restarts = r.param_int("greedy_restarts");
  json greedy = json::array();
  double best = 0;
  for (const auto& k : sample_K(st, canon, gctx)) {
    const double full = incompleteness(canon, k.K, ctx);
    auto j = to_json(k);
    j["score_full_sample"] = full;
    greedy.push_back(j);
    best = std::max(best, full);
  }
  payload["canonical"]["greedy"] = greedy;
  r.check("greedy incompleteness on the canonical circuit", best >= 0.4 * std::abs(FM), best, ">= 0.4 * F(M)");
  r.step();

  const auto mins = minimality_suite(canon, MinimalityTable::canonical(), ctx);
  json mj = json::array();
  double lowest = std::numeric_limits<double>::infinity();
  std::string lowest_node;
  std::ostringstream csv;
  csv.precision(9);
  csv << "node,score,relative\n";
  std::vector<Bar> bars;
  for (const auto& m : mins) {
    mj.push_back(to_json(m));
    if (m.score < lowest) {
      lowest = m.score;
      lowest_node = m.v.str();
    }
    csv << m.v.str() << "," << m.score << "," << (FM != 0 ? m.score / std::abs(FM) : 0.0) << "\n";
    bars.push_back({m.v.str(), FM != 0 ? m.score / std::abs(FM) : 0.0, 0.0});
  }
  payload["canonical"]["minimality"] = mj;
  r.check("all minimality scores", lowest >= 0.01 * std::abs(FM), json{{"min", lowest}, {"node", lowest_node}},
          ">= 0.01 * F(M)");
  r.artifact("minimality.csv", csv.str());
  r.artifact("minimality.svg", bar_svg(bars, "Minimality score relative to F(M)", "score / F(M)"));
  r.step();
  payload["evaluations"] = ctx.evaluations() + gctx.evaluations();
  r.rec.payload = payload;
  r.step();
}

void e14(Run& r) {
  r.begin(3);
  const auto x = r.ioi();
  const auto base = baseline(r.model, x, {r.batch, false});
  r.step();
  const auto io = baseline(r.model, r.gen.gen_adversarial(r.n, r.derive(30), IoiGenerator::Variant::extra_io),
                           {r.batch, false});
  r.step();
  const auto s = baseline(r.model, r.gen.gen_adversarial(r.n, r.derive(31), IoiGenerator::Variant::extra_s),
                          {r.batch, false});
  r.step();
  const auto jb = outcomes_json(base), ji = outcomes_json(io), js = outcomes_json(s);
  r.rec.payload = {{"ioi", jb}, {"extra_io", ji}, {"extra_s", js}};
  const double b = base.mean_logit_diff();
  r.check("extra IO: S over IO rate", ji.at("s_over_io_rate").get<double>() > 0.10, ji.at("s_over_io_rate"), "> 0.10");
  r.check("extra IO: logit difference", io.mean_logit_diff() < 0.5 * b, io.mean_logit_diff(),
          "< 0.5 * baseline (" + fmt(b) + ")");
  r.check("extra S: S over IO rate", js.at("s_over_io_rate").get<double>() < 0.02, js.at("s_over_io_rate"), "< 0.02");
  r.check("extra S: logit difference", s.mean_logit_diff() >= b - 0.3, s.mean_logit_diff(),
          ">= baseline - 0.3 (" + fmt(b - 0.3) + ")", false);
  std::vector<Bar> bars = {{"p_IOI", b, 0.0}, {"extra IO", io.mean_logit_diff(), 0.0}, {"extra S", s.mean_logit_diff(), 0.0}};
  r.artifact("adversarial.svg", bar_svg(bars, "Logit difference on adversarial prompts", "logit difference"));
}

}  // namespace

json validated_params(const std::string& id, const json& given) {
  const auto& info = catalog_entry(id);
  if (!given.is_object()) throw ConfigError("experiment params must be an object");
  json p = info.params;
  p["batch_size"] = 32;
  for (const auto& [k, v] : given.items()) {
    if (!p.contains(k)) throw ConfigError("experiment " + info.id + " has no parameter '" + k + "'");
    const auto& d = p.at(k);
    const bool ok = (d.is_boolean() && v.is_boolean()) || (d.is_number_integer() && v.is_number_integer()) ||
                    (d.is_number_float() && v.is_number());
    if (!ok) throw ConfigError("parameter '" + k + "' of " + info.id + " has the wrong type");
    if (v.is_number() && v.get<double>() < 0) throw ConfigError("parameter '" + k + "' must be non-negative");
    p[k] = v;
  }
  if (p.at("batch_size").get<int>() < 1) throw ConfigError("batch_size must be positive");
  return p;
}

ResultRecord run_experiment(const Engine& engine, const ExperimentSpec& spec, const RunHooks& hooks) {
  const auto& info = catalog_entry(spec.id);
  if (spec.n_samples < 0) throw ConfigError("n must be non-negative");
  ResultRecord rec;
  rec.experiment = spec.id;
  rec.fingerprint = engine.fingerprint();
  rec.seed = spec.seed;
  rec.params = validated_params(spec.id, spec.params);
  rec.n_samples = spec.n_samples > 0 ? spec.n_samples : info.default_n;
  Run run{engine,       *engine.model,        *engine.generator, spec, rec.params, rec.n_samples,
          rec.params.at("batch_size").get<int>(), engine.config.threads, hooks, rec};
  rec.payload = json::object();
  const auto t0 = std::chrono::steady_clock::now();
  static const std::map<std::string, void (*)(Run&)> table = {
      {"e01", e01}, {"e02", e02}, {"e03", e03}, {"e04", e04}, {"e05", e05}, {"e06", e06}, {"e07", e07},
      {"e08", e08}, {"e09", e09}, {"e10", e10}, {"e11", e11}, {"e12", e12}, {"e13", e13}, {"e14", e14}};
  table.at(spec.id)(run);
  rec.wall_time_s = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  if (hooks.progress) hooks.progress(1.0);
  return rec;
}

// ---------------------------------------------------------------------------
// Persistence

namespace {

std::mutex& manifest_mutex() {
  static std::mutex m;
  return m;
}

void write_file(const fs::path& p, const std::string& content) {
  const fs::path tmp = p.string() + ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary);
    if (!out) throw std::runtime_error("cannot write " + tmp.string());
    out << content;
  }
  fs::rename(tmp, p);
}

json read_manifest(const fs::path& root) {
  std::ifstream in(root / "manifest.json");
  if (!in) return {{"schema", 1}, {"results", json::array()}};
  try {
    return json::parse(in);
  } catch (const json::parse_error&) {
    throw ConfigError("corrupt results manifest in " + root.string());
  }
}

std::string utc_stamp() {
  const auto now = std::chrono::system_clock::now();
  const std::time_t t = std::chrono::system_clock::to_time_t(now);
  std::tm tm{};
  gmtime_r(&t, &tm);
  char buf[32];
  std::strftime(buf, sizeof buf, "%Y%m%dT%H%M%SZ", &tm);
  return buf;
}

bool safe_ref(const std::string& ref) {
  if (ref.empty() || ref.find("..") != std::string::npos || ref.front() == '/') return false;
  return std::all_of(ref.begin(), ref.end(), [](char c) { return std::isalnum(static_cast<unsigned char>(c)) || c == '/' || c == '-' || c == '_'; });
}

}  // namespace

std::string persist(const ResultRecord& record, const fs::path& root) {
  std::lock_guard lock(manifest_mutex());
  const std::string stamp = utc_stamp();
  fs::create_directories(root / record.experiment);
  std::string name = stamp;
  for (int k = 1; fs::exists(root / record.experiment / name); ++k) name = stamp + "-" + std::to_string(k);
  const fs::path dir = root / record.experiment / name;
  fs::create_directories(dir);
  write_file(dir / "record.json", record.to_json().dump(2) + "\n");
  for (const auto& a : record.artifacts) {
    if (a.name.find('/') != std::string::npos) throw std::logic_error("artifact names must be plain file names");
    write_file(dir / a.name, a.content);
  }
  const std::string ref = record.experiment + "/" + name;
  json m = read_manifest(root);
  m["results"].push_back({{"ref", ref},
                          {"experiment", record.experiment},
                          {"timestamp", stamp},
                          {"passed", record.passed()},
                          {"fingerprint", record.fingerprint},
                          {"seed", record.seed},
                          {"n_samples", record.n_samples}});
  write_file(root / "manifest.json", m.dump(2) + "\n");
  return ref;
}

json list_results(const fs::path& root) {
  std::lock_guard lock(manifest_mutex());
  return read_manifest(root).at("results");
}

json load_result(const fs::path& root, const std::string& ref) {
  if (!safe_ref(ref)) throw NotFoundError("unknown result '" + ref + "'");
  const fs::path p = root / ref / "record.json";
  std::ifstream in(p);
  if (!in) throw NotFoundError("unknown result '" + ref + "'");
  json j = json::parse(in);
  j["ref"] = ref;
  return j;
}

}  // namespace cwb
