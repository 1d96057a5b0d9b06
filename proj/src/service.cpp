#include "cwb/service.hpp"

#include "cwb/errors.hpp"
#include "cwb/forward.hpp"

#include <httplib.h>

#include <algorithm>
#include <condition_variable>
#include <deque>
#include <mutex>
#include <numeric>
#include <set>
#include <sstream>
#include <thread>

namespace cwb {

using nlohmann::json;

const char* job_state_name(JobState s) {
  switch (s) {
    case JobState::queued:
      return "queued";
    case JobState::running:
      return "running";
    case JobState::done:
      return "done";
    case JobState::failed:
      return "failed";
  }
  return "?";
}

json Job::to_json() const {
  json j = {{"id", id}, {"kind", kind}, {"spec", spec}, {"state", job_state_name(state)}, {"progress", progress}};
  j["result"] = result_ref.empty() ? json(nullptr) : json(result_ref);
  j["error"] = error.empty() ? json(nullptr) : json(error);
  return j;
}

namespace {

struct HttpError : std::runtime_error {
  int status;
  HttpError(int s, const std::string& m) : std::runtime_error(m), status(s) {}
};

// Reads optional keys from a JSON object and rejects any it was not asked about.
class Fields {
 public:
  explicit Fields(const json& j) : j_(j) {
    if (!j_.is_object()) throw PreconditionError("request body must be a JSON object");
  }
  template <class T>
  T get(const std::string& k, T fallback) {
    seen_.insert(k);
    if (!j_.contains(k) || j_.at(k).is_null()) return fallback;
    try {
      return j_.at(k).get<T>();
    } catch (const json::exception&) {
      throw PreconditionError("field '" + k + "' has the wrong type");
    }
  }
  const json* raw(const std::string& k) {
    seen_.insert(k);
    return j_.contains(k) && !j_.at(k).is_null() ? &j_.at(k) : nullptr;
  }
  void finish() const {
    for (const auto& [k, v] : j_.items()) {
      if (!seen_.count(k)) throw PreconditionError("unknown field '" + k + "'");
    }
  }

 private:
  const json& j_;
  std::set<std::string> seen_;
};

int positive(int v, const char* what, int cap = 1 << 20) {
  if (v < 1 || v > cap) throw PreconditionError(std::string(what) + " must be in [1, " + std::to_string(cap) + "]");
  return v;
}

json rows_json(const Tensor& t, int64_t b) {
  // [B, N, w] -> N rows of width w
  const int64_t N = t.dim(1), w = t.dim(2);
  json rows = json::array();
  for (int64_t i = 0; i < N; ++i) {
    const float* p = t.data() + (b * N + i) * w;
    rows.push_back(std::vector<float>(p, p + w));
  }
  return rows;
}

json token_strings(const Tokenizer& tok, const TokenSequence& ids) {
  json out = json::array();
  for (TokenId id : ids) out.push_back(tok.decode(std::span(&id, 1)));
  return out;
}

int query_int(const ApiRequest& r, const std::string& k, int fallback) {
  const auto it = r.query.find(k);
  if (it == r.query.end() || it->second.empty()) return fallback;
  try {
    size_t used = 0;
    const int v = std::stoi(it->second, &used);
    if (used != it->second.size()) throw std::invalid_argument(k);
    return v;
  } catch (const std::exception&) {
    throw PreconditionError("query parameter '" + k + "' must be an integer");
  }
}

std::string query_str(const ApiRequest& r, const std::string& k, const std::string& fallback) {
  const auto it = r.query.find(k);
  return it == r.query.end() ? fallback : it->second;
}

std::vector<std::string> split_path(const std::string& path) {
  std::vector<std::string> out;
  std::stringstream in(path);
  for (std::string p; std::getline(in, p, '/');) {
    if (!p.empty()) out.push_back(p);
  }
  return out;
}

}  // namespace

struct Service::Impl {
  std::shared_ptr<const Engine> engine;
  ServiceOptions opts;

  mutable std::mutex mu;
  mutable std::condition_variable changed;
  std::map<std::string, Job> jobs;
  std::deque<std::pair<std::string, std::function<std::string(const std::function<void(double)>&)>>> queue;
  std::vector<std::thread> workers;
  bool stopping = false;
  uint64_t next_id = 1;

  std::mutex means_mu;
  std::map<std::tuple<uint64_t, int, int>, std::shared_ptr<const MeanCache>> means;

  std::mutex server_mu;
  httplib::Server* server = nullptr;

  Impl(std::shared_ptr<const Engine> e, ServiceOptions o) : engine(std::move(e)), opts(std::move(o)) {
    for (int i = 0; i < std::max(1, opts.workers); ++i) workers.emplace_back([this] { work(); });
  }

  ~Impl() {
    {
      std::lock_guard lock(mu);
      stopping = true;
      for (auto& [id, fn] : queue) {
        jobs[id].state = JobState::failed;
        jobs[id].error = "service stopped";
      }
      queue.clear();
    }
    changed.notify_all();
    for (auto& t : workers) t.join();
  }

  void work() {
    for (;;) {
      std::string id;
      std::function<std::string(const std::function<void(double)>&)> fn;
      {
        std::unique_lock lock(mu);
        changed.wait(lock, [&] { return stopping || !queue.empty(); });
        if (queue.empty()) return;
        std::tie(id, fn) = std::move(queue.front());
        queue.pop_front();
        jobs[id].state = JobState::running;
      }
      auto progress = [this, id](double f) {
        std::lock_guard lock(mu);
        auto& j = jobs[id];
        j.progress = std::max(j.progress, std::clamp(f, 0.0, 1.0));
      };
      std::string ref, error;
      try {
        ref = fn(progress);
      } catch (const std::exception& e) {
        error = e.what();
      }
      {
        std::lock_guard lock(mu);
        auto& j = jobs[id];
        if (error.empty()) {
          j.state = JobState::done;
          j.progress = 1.0;
          j.result_ref = ref;
        } else {
          j.state = JobState::failed;
          j.error = error;
        }
      }
      changed.notify_all();
    }
  }

  std::string submit(const std::string& kind, const json& spec,
                     std::function<std::string(const std::function<void(double)>&)> fn) {
    std::lock_guard lock(mu);
    if (stopping) throw HttpError(503, "service is stopping");
    if (queue.size() >= opts.max_queued) throw HttpError(503, "job queue is full");
    char buf[24];
    std::snprintf(buf, sizeof buf, "job-%06llu", static_cast<unsigned long long>(next_id++));
    Job j;
    j.id = buf;
    j.kind = kind;
    j.spec = spec;
    jobs[j.id] = j;
    queue.emplace_back(j.id, std::move(fn));
    changed.notify_all();
    return j.id;
  }

  const Engine& need_engine() const {
    if (!engine) throw HttpError(409, "no model is loaded");
    return *engine;
  }

  std::shared_ptr<const MeanCache> mean_cache(uint64_t seed, int mean_n, int batch) {
    std::lock_guard lock(means_mu);
    auto& slot = means[{seed, mean_n, batch}];
    if (!slot) slot = std::make_shared<const MeanCache>(run_reference_means(need_engine(), seed, mean_n, batch));
    return slot;
  }

  // A list of samples or {dist, seed, n}.
  std::vector<PromptSample> samples(const json& j, uint64_t* seed_out = nullptr) {
    const Engine& e = need_engine();
    if (j.is_array()) {
      std::vector<PromptSample> out;
      for (const auto& s : j) {
        PromptSample p;
        try {
          p = PromptSample::from_json(s);
          check_invariants(p);
        } catch (const json::exception& ex) {
          throw PreconditionError(std::string("bad sample: ") + ex.what());
        } catch (const std::logic_error& ex) {
          throw PreconditionError(std::string("bad sample: ") + ex.what());
        }
        for (TokenId t : p.tokens) {
          if (t < 0 || t >= e.model->config.vocab_size) throw PreconditionError("sample token out of range");
        }
        out.push_back(std::move(p));
      }
      if (out.empty()) throw PreconditionError("no samples given");
      return out;
    }
    Fields f(j);
    const auto dist = f.get<std::string>("dist", "ioi");
    const auto seed = f.get<uint64_t>("seed", 0);
    const int n = positive(f.get<int>("n", 32), "n", opts.max_sync_samples);
    f.finish();
    if (seed_out) *seed_out = seed;
    return dataset(dist, seed, n);
  }

  std::vector<PromptSample> dataset(const std::string& dist, uint64_t seed, int n) {
    const Engine& e = need_engine();
    if (dist == "ioi") return run_ioi_samples(e, seed, n);
    if (dist == "abc") return run_abc_samples(e, seed, run_ioi_samples(e, seed, n));
    if (dist == "adv_io") return e.generator->gen_adversarial(n, derive_seed(seed, 30), IoiGenerator::Variant::extra_io);
    if (dist == "adv_s") return e.generator->gen_adversarial(n, derive_seed(seed, 31), IoiGenerator::Variant::extra_s);
    throw PreconditionError("unknown dist '" + dist + "' (ioi, abc, adv_io, adv_s)");
  }

  // --- endpoints -----------------------------------------------------------

  json model_info() {
    const Engine& e = need_engine();
    return {{"source", e.model->source},
            {"config", e.model->config.to_json()},
            {"fingerprint", e.fingerprint()},
            {"vocab_size", e.tokenizer->vocab_size()},
            {"prepend_bos", e.generator->options().prepend_bos},
            {"head_classes", canonical_circuit().to_json().at("classes")}};
  }

  json forward_api(const json& body) {
    const Engine& e = need_engine();
    const auto& cfg = e.model->config;
    Fields f(body);
    TokenSequence tokens;
    const json* text = f.raw("text");
    const json* toks = f.raw("tokens");
    if ((text == nullptr) == (toks == nullptr)) throw PreconditionError("give exactly one of 'text' or 'tokens'");
    if (text) {
      if (!text->is_string()) throw PreconditionError("'text' must be a string");
      if (e.generator->options().prepend_bos) tokens.push_back(e.generator->options().bos_id);
      const auto enc = e.tokenizer->encode(text->get<std::string>());
      tokens.insert(tokens.end(), enc.begin(), enc.end());
    } else {
      try {
        tokens = toks->get<TokenSequence>();
      } catch (const json::exception&) {
        throw PreconditionError("'tokens' must be a list of token ids");
      }
    }
    if (tokens.empty()) throw PreconditionError("empty input");
    if (static_cast<int>(tokens.size()) > cfg.max_context) throw PreconditionError("input longer than the context");
    for (TokenId t : tokens) {
      if (t < 0 || t >= cfg.vocab_size) throw PreconditionError("token id out of range");
    }
    ForwardOptions fo;
    for (const auto& k : f.get<std::vector<std::string>>("capture", {})) {
      const HookKey key = HookKey::parse(k);
      validate_key(cfg, key);
      fo.capture.insert(key);
    }
    const int top_k = positive(f.get<int>("top_k", 10), "top_k", cfg.vocab_size);
    const bool full = f.get<bool>("full_logits", false);
    f.finish();
    const auto res = forward(*e.model, {tokens}, {}, fo);
    const auto last = res.logits.values().subspan(0, cfg.vocab_size);
    std::vector<int> idx(cfg.vocab_size);
    std::iota(idx.begin(), idx.end(), 0);
    std::partial_sort(idx.begin(), idx.begin() + top_k, idx.end(), [&](int a, int b) {
      return last[a] != last[b] ? last[a] > last[b] : a < b;
    });
    json top = json::array();
    for (int i = 0; i < top_k; ++i) {
      const TokenId id = idx[i];
      top.push_back({{"token", id}, {"string", e.tokenizer->decode(std::span(&id, 1))}, {"logit", last[id]}});
    }
    json acts = json::object();
    for (const auto& key : fo.capture) {
      const Tensor& t = res.cache.at(key);
      acts[key.str()] = {{"shape", {t.dim(1), t.dim(2)}}, {"data", rows_json(t, 0)}};
    }
    json out = {{"tokens", tokens}, {"token_strings", token_strings(*e.tokenizer, tokens)}, {"top", top},
                {"activations", acts}};
    if (full) out["logits"] = std::vector<float>(last.begin(), last.end());
    return out;
  }

  json patch_api(const json& body) {
    const Engine& e = need_engine();
    const auto& cfg = e.model->config;
    Fields f(body);
    const auto kind = f.get<std::string>("kind", "");
    const json* sj = f.raw("samples");
    uint64_t seed = 0;
    const auto x = samples(sj ? *sj : json::object(), &seed);
    const int batch = positive(f.get<int>("batch_size", 32), "batch_size", 4096);
    const bool per_sample = f.get<bool>("per_sample", false);
    auto nodes_of = [&](const char* k) {
      std::vector<NodeRef> out;
      if (const json* a = f.raw(k)) {
        if (!a->is_array()) throw PreconditionError(std::string("'") + k + "' must be a list");
        for (const auto& n : *a) {
          out.push_back(node_from_json(n));
          out.back().validate(cfg);
        }
      }
      return out;
    };
    auto mode_of = [&](std::shared_ptr<const MeanCache>& holder) {
      const auto m = f.get<std::string>("mode", "mean");
      const int mean_n = positive(f.get<int>("mean_n", 300), "mean_n", 100000);
      if (m == "zero") return AblationMode::zero();
      if (m != "mean") throw PreconditionError("mode must be 'mean' or 'zero'");
      holder = mean_cache(seed, mean_n, batch);
      return AblationMode::mean(*holder);
    };
    auto counterfactual = [&]() {
      const json* xn = f.raw("x_new");
      if (!xn || (xn->is_string() && *xn == "abc")) return run_abc_samples(e, seed, x);
      if (xn->is_string() && *xn == "same") return x;
      auto y = samples(*xn);
      if (y.size() != x.size()) throw PreconditionError("x_new must have as many samples as x_orig");
      for (size_t i = 0; i < x.size(); ++i) {
        if (y[i].length() != x[i].length() || y[i].template_id != x[i].template_id) {
          throw PreconditionError("x_new samples must match x_orig templates and lengths");
        }
      }
      return y;
    };
    const Outcomes base = baseline(*e.model, x, {batch, false});
    Outcomes out;
    std::shared_ptr<const MeanCache> holder;
    if (kind == "knockout") {
      const auto nodes = nodes_of("nodes");
      if (nodes.empty()) throw PreconditionError("knockout needs 'nodes'");
      const auto mode = mode_of(holder);
      f.finish();
      out = knockout(*e.model, x, nodes, mode, {batch, false});
    } else if (kind == "activation") {
      const auto nodes = nodes_of("nodes");
      if (nodes.empty()) throw PreconditionError("activation patching needs 'nodes'");
      const auto y = counterfactual();
      f.finish();
      out = activation_patch(*e.model, x, y, nodes, {batch, false});
    } else if (kind == "path") {
      const json* sp = f.raw("spec");
      if (!sp || !sp->is_object()) throw PreconditionError("path patching needs 'spec'");
      Fields g(*sp);
      PatchSpec spec;
      const json* sender = g.raw("sender");
      if (!sender) throw PreconditionError("spec needs 'sender'");
      spec.sender = node_from_json(*sender);
      if (const json* more = g.raw("more_senders")) {
        for (const auto& n : *more) spec.more_senders.push_back(node_from_json(n));
      }
      const json* recv = g.raw("receivers");
      if (!recv || !recv->is_array() || recv->empty()) throw PreconditionError("spec needs 'receivers'");
      for (const auto& r : *recv) spec.receivers.push_back(receiver_from_json(r));
      g.finish();
      spec.validate(cfg);
      PathPatchOptions po;
      po.batch_size = batch;
      po.threads = e.config.threads;
      po.knockout = nodes_of("knockout");
      if (!po.knockout.empty()) po.knockout_mode = mode_of(holder);
      const auto y = counterfactual();
      f.finish();
      out = path_patch(*e.model, x, y, spec, po);
    } else {
      throw PreconditionError("kind must be knockout, activation or path");
    }
    json res = {{"kind", kind},
                {"n", x.size()},
                {"baseline", outcomes_json(base)},
                {"patched", outcomes_json(out)},
                {"delta_logit_diff", out.mean_logit_diff() - base.mean_logit_diff()}};
    if (per_sample) {
      json rows = json::array();
      for (size_t i = 0; i < x.size(); ++i) {
        rows.push_back({{"baseline", base.rows[i].logit_diff}, {"patched", out.rows[i].logit_diff}});
      }
      res["rows"] = rows;
    }
    return res;
  }

  ResultRecord record(const std::string& name, uint64_t seed, int n, json params) {
    ResultRecord r;
    r.experiment = name;
    r.fingerprint = need_engine().fingerprint();
    r.seed = seed;
    r.n_samples = n;
    r.params = std::move(params);
    r.payload = json::object();
    return r;
  }

  json sweep_api(const json& body) {
    const Engine& e = need_engine();
    Fields f(body);
    std::vector<ReceiverRef> receivers;
    if (const json* rj = f.raw("receivers")) {
      if (!rj->is_array() || rj->empty()) throw PreconditionError("'receivers' must be a non-empty list");
      for (const auto& r : *rj) {
        receivers.push_back(receiver_from_json(r));
        receivers.back().validate(e.model->config);
      }
    } else {
      receivers.push_back(ReceiverRef::final_residual(PositionSpec::of(Role::END)));
    }
    const PositionSpec role = PositionSpec::parse(f.get<std::string>("role", "all"));
    const int n = positive(f.get<int>("n", 256), "n");
    const auto seed = f.get<uint64_t>("seed", 0);
    const int batch = positive(f.get<int>("batch_size", 32), "batch_size", 4096);
    f.finish();
    json rj = json::array();
    for (const auto& r : receivers) rj.push_back(to_json(r));
    const json spec = {{"receivers", rj}, {"role", role.str()}, {"n", n}, {"seed", seed}, {"batch_size", batch}};
    auto eng = engine;
    const auto id = submit("sweep", spec, [this, eng, receivers, role, n, seed, batch, spec](const auto& progress) {
      const auto x = run_ioi_samples(*eng, seed, n);
      const auto y = run_abc_samples(*eng, seed, x);
      PathPatchOptions po;
      po.batch_size = batch;
      po.threads = eng->config.threads;
      po.progress = progress;
      auto s = sweep(*eng->model, x, y, receivers, role, n, po);
      s.seed = seed;
      auto rec = record("sweep", seed, n, spec);
      rec.payload["sweep"] = s.to_json();
      rec.artifacts.push_back({"sweep.csv", matrix_csv(s.matrix, "delta_logit_diff")});
      return persist(rec, opts.results_dir);
    });
    return {{"job", id}};
  }

  json circuit_api(const json& body) {
    const Engine& e = need_engine();
    Fields f(body);
    Circuit circuit;
    const json* cj = f.raw("circuit");
    const std::string cname = cj && cj->is_string() ? cj->get<std::string>() : cj ? "custom" : "canonical";
    if (!cj || cname == "canonical") {
      circuit = canonical_circuit();
    } else if (cname == "naive") {
      circuit = naive_circuit();
    } else if (cj->is_object()) {
      circuit = Circuit::from_json(*cj);
    } else {
      throw PreconditionError("circuit must be 'canonical', 'naive' or a circuit object");
    }
    circuit.validate(e.model->config);
    const auto criterion = f.get<std::string>("criterion", "faithfulness");
    if (criterion != "faithfulness" && criterion != "completeness" && criterion != "minimality") {
      throw PreconditionError("criterion must be faithfulness, completeness or minimality");
    }
    const json params = f.get<json>("params", json::object());
    f.finish();
    Fields p(params);
    const int n = positive(p.get<int>("n", 256), "n");
    const auto seed = p.get<uint64_t>("seed", 0);
    const int mean_n = positive(p.get<int>("mean_n", 300), "mean_n");
    const int batch = positive(p.get<int>("batch_size", 32), "batch_size", 4096);
    auto nodes_in = [&](const json& arr) {
      NodeSet ks;
      if (!arr.is_array()) throw PreconditionError("K must be a list of nodes");
      for (const auto& v : arr) {
        const auto node = v.is_array() && v.size() == 2 ? circuit.find(v.at(0).get<int>(), v.at(1).get<int>())
                                                        : circuit_node_from_json(v);
        if (!circuit.contains(node)) throw PreconditionError("node " + node.str() + " is not in the circuit");
        ks.push_back(node);
      }
      return make_node_set(std::move(ks));
    };
    std::optional<NodeSet> K;
    std::optional<KStrategy> strategy;
    std::optional<MinimalityTable> table;
    if (const json* kj = p.raw("K")) K = nodes_in(*kj);
    if (criterion == "completeness" && !K) {
      Fields s(p.get<json>("strategy", json{{"kind", "by_class"}}));
      const auto kind = s.get<std::string>("kind", "by_class");
      if (kind == "uniform") {
        strategy = KStrategy::uniform(positive(s.get<int>("count", 10), "count"), s.get<uint64_t>("seed", seed));
      } else if (kind == "by_class") {
        strategy = KStrategy::by_class(s.get<std::string>("class", ""));
      } else if (kind == "greedy") {
        strategy = KStrategy::greedy(positive(s.get<int>("k", 10), "k"), positive(s.get<int>("steps", 10), "steps"),
                                     s.get<uint64_t>("seed", seed));
        strategy->restarts = positive(s.get<int>("restarts", 10), "restarts");
        strategy->keep = positive(s.get<int>("keep", 5), "keep");
        strategy->circuit_only_objective = s.get<bool>("circuit_only_objective", false);
      } else {
        throw PreconditionError("strategy kind must be uniform, by_class or greedy");
      }
      s.finish();
    } else {
      p.raw("strategy");
    }
    if (criterion == "minimality") {
      if (const json* tj = p.raw("table")) {
        table = MinimalityTable::from_json(*tj);
      } else if (cname == "canonical") {
        table = MinimalityTable::canonical();
      } else {
        throw PreconditionError("minimality on this circuit needs a 'table'");
      }
    } else {
      p.raw("table");
    }
    p.finish();
    const json spec = {{"circuit", cj ? *cj : json("canonical")}, {"criterion", criterion}, {"params", params}};
    auto eng = engine;
    const auto id = submit("circuit", spec, [=, this](const auto& progress) {
      const auto means = mean_cache(seed, mean_n, batch);
      progress(0.2);
      EvalContext ctx(*eng->model, run_ioi_samples(*eng, seed, n), *means, batch);
      ctx.threads = eng->config.threads;
      auto rec = record("circuit", seed, n, spec);
      json& out = rec.payload;
      out["F_model"] = ctx.F_model();
      out["F_circuit"] = eval_F(circuit, ctx);
      out["faithfulness"] = faithfulness(circuit, ctx);
      if (criterion == "completeness") {
        json samples = json::array();
        if (K) {
          KSample k;
          k.K = *K;
          k.F_circuit = ctx.F_kept(set_difference(circuit.nodes(), *K));
          k.F_model = ctx.F_model_without(*K);
          k.score = incompleteness(circuit, *K, ctx);
          k.source = "given";
          samples.push_back(to_json(k));
        } else {
          for (const auto& k : sample_K(*strategy, circuit, ctx)) samples.push_back(to_json(k));
        }
        out["K_samples"] = samples;
      } else if (criterion == "minimality") {
        json entries = json::array();
        for (const auto& m : minimality_suite(circuit, *table, ctx)) entries.push_back(to_json(m));
        out["minimality"] = entries;
      }
      out["evaluations"] = ctx.evaluations();
      return persist(rec, opts.results_dir);
    });
    return {{"job", id}};
  }

  static NodeSet set_difference(const NodeSet& a, const NodeSet& b) {
    NodeSet out;
    std::set_difference(a.begin(), a.end(), b.begin(), b.end(), std::back_inserter(out));
    return out;
  }

  json experiment_api(const std::string& id, const json& body) {
    need_engine();
    catalog_entry(id);
    Fields f(body);
    ExperimentSpec spec;
    spec.id = id;
    spec.params = f.get<json>("params", json::object());
    spec.seed = f.get<uint64_t>("seed", 0);
    spec.n_samples = f.get<int>("n", 0);
    f.finish();
    validated_params(id, spec.params);
    if (spec.n_samples < 0) throw PreconditionError("n must be non-negative");
    auto eng = engine;
    const auto job = submit("experiment", spec.to_json(), [this, eng, spec](const auto& progress) {
      RunHooks hooks;
      hooks.progress = progress;
      return persist(run_experiment(*eng, spec, hooks), opts.results_dir);
    });
    return {{"job", job}};
  }

  json attention_api(int layer, int head, const ApiRequest& req) {
    const Engine& e = need_engine();
    const auto& cfg = e.model->config;
    if (layer < 0 || layer >= cfg.n_layers || head < 0 || head >= cfg.n_heads) {
      throw PreconditionError("no head " + std::to_string(layer) + "." + std::to_string(head));
    }
    TokenSequence tokens;
    json roles = nullptr;
    const auto text = query_str(req, "text", "");
    if (!text.empty()) {
      if (e.generator->options().prepend_bos) tokens.push_back(e.generator->options().bos_id);
      const auto enc = e.tokenizer->encode(text);
      tokens.insert(tokens.end(), enc.begin(), enc.end());
      if (static_cast<int>(tokens.size()) > cfg.max_context) throw PreconditionError("input longer than the context");
    } else {
      const auto s = dataset(query_str(req, "dist", "ioi"), query_int(req, "sample", 0), 1).at(0);
      tokens = s.tokens;
      roles = {{"IO", s.pos.io}, {"S1", s.pos.s1}, {"S1+1", s.pos.s1_plus_1}, {"S2", s.pos.s2}, {"END", s.pos.end}};
    }
    if (tokens.empty()) throw PreconditionError("empty input");
    ForwardOptions fo;
    fo.logits = LogitsMode::none;
    fo.stop_after_layer = layer;
    const HookKey key = HookKey::of_head(Site::head_pattern, layer, head);
    fo.capture.insert(key);
    const auto res = forward(*e.model, {tokens}, {}, fo);
    return {{"layer", layer},
            {"head", head},
            {"tokens", tokens},
            {"token_strings", token_strings(*e.tokenizer, tokens)},
            {"roles", roles},
            {"pattern", rows_json(res.cache.at(key), 0)}};
  }

  json datasets_api(const ApiRequest& req) {
    const Engine& e = need_engine();
    const int n = positive(query_int(req, "n", 1), "n", 1000);
    const auto seed = static_cast<uint64_t>(query_int(req, "seed", 0));
    json out = json::array();
    for (const auto& s : dataset(query_str(req, "dist", "ioi"), seed, n)) out.push_back(s.to_json(e.tokenizer.get()));
    return {{"samples", out}};
  }

  json job_json(const std::string& id) {
    Job j;
    {
      std::lock_guard lock(mu);
      const auto it = jobs.find(id);
      if (it == jobs.end()) throw NotFoundError("unknown job '" + id + "'");
      j = it->second;
    }
    json out = j.to_json();
    if (j.state == JobState::done) out["record"] = load_result(opts.results_dir, j.result_ref);
    return out;
  }

  ApiResponse route(const ApiRequest& req) {
    const auto parts = split_path(req.path);
    if (parts.empty() || parts[0] != "api") throw NotFoundError("no route " + req.path);
    const auto body = [&] {
      if (req.body.empty()) return json::object();
      try {
        return json::parse(req.body);
      } catch (const json::parse_error& e) {
        throw PreconditionError(std::string("request body is not JSON: ") + e.what());
      }
    };
    const bool get = req.method == "GET", post = req.method == "POST";
    const size_t n = parts.size();
    auto is = [&](std::initializer_list<const char*> p) {
      if (n != p.size()) return false;
      size_t i = 0;
      for (const char* s : p) {
        if (*s != '*' && parts[i] != s) return false;
        ++i;
      }
      return true;
    };
    if (get && is({"api", "model"})) return {200, model_info()};
    if (get && is({"api", "experiments"})) {
      json out = json::array();
      for (const auto& c : catalog()) out.push_back(c.to_json());
      return {200, out};
    }
    if (post && is({"api", "experiments", "*"})) return {202, experiment_api(parts[2], body())};
    if (post && is({"api", "forward"})) return {200, forward_api(body())};
    if (post && is({"api", "patch"})) return {200, patch_api(body())};
    if (post && is({"api", "sweep"})) return {202, sweep_api(body())};
    if (post && is({"api", "circuit", "eval"})) return {202, circuit_api(body())};
    if (get && is({"api", "jobs"})) {
      json out = json::array();
      std::lock_guard lock(mu);
      for (const auto& [id, j] : jobs) out.push_back(j.to_json());
      return {200, out};
    }
    if (get && is({"api", "jobs", "*"})) return {200, job_json(parts[2])};
    if (get && is({"api", "attention", "*", "*"})) {
      int l = 0, h = 0;
      try {
        l = std::stoi(parts[2]);
        h = std::stoi(parts[3]);
      } catch (const std::exception&) {
        throw PreconditionError("layer and head must be integers");
      }
      return {200, attention_api(l, h, req)};
    }
    if (get && is({"api", "datasets", "sample"})) return {200, datasets_api(req)};
    if (get && is({"api", "results"})) return {200, list_results(opts.results_dir)};
    if (get && n >= 3 && parts[0] == "api" && parts[1] == "results") {
      std::string ref = parts[2];
      for (size_t i = 3; i < n; ++i) ref += "/" + parts[i];
      return {200, load_result(opts.results_dir, ref)};
    }
    throw NotFoundError("no route " + req.method + " " + req.path);
  }
};

Service::Service(std::shared_ptr<const Engine> engine, ServiceOptions opts)
    : impl_(std::make_unique<Impl>(std::move(engine), std::move(opts))) {}

Service::~Service() { stop(); }

ApiResponse Service::handle(const ApiRequest& req) {
  auto error = [](int status, const std::string& msg) { return ApiResponse{status, {{"error", msg}}}; };
  try {
    return impl_->route(req);
  } catch (const HttpError& e) {
    return error(e.status, e.what());
  } catch (const NotFoundError& e) {
    return error(404, e.what());
  } catch (const ConfigError& e) {
    return error(400, e.what());
  } catch (const std::invalid_argument& e) {
    // PreconditionError and InvalidHookError
    return error(400, e.what());
  } catch (const json::exception& e) {
    return error(400, e.what());
  } catch (const std::exception& e) {
    return error(500, e.what());
  }
}

bool Service::listen(const std::string& host, int port, const std::function<void(int)>& on_bound) {
  httplib::Server server;
  server.set_default_headers({{"Access-Control-Allow-Origin", "*"},
                              {"Access-Control-Allow-Methods", "GET, POST, OPTIONS"},
                              {"Access-Control-Allow-Headers", "Content-Type"}});
  if (!impl_->opts.ui_dir.empty() && std::filesystem::is_directory(impl_->opts.ui_dir)) {
    server.set_mount_point("/", impl_->opts.ui_dir.string());
  }
  auto handler = [this](const httplib::Request& rq, httplib::Response& rs) {
    ApiRequest req{rq.method, rq.path, {}, rq.body};
    for (const auto& [k, v] : rq.params) req.query[k] = v;
    const auto out = handle(req);
    rs.status = out.status;
    rs.set_content(out.body.dump(), "application/json");
  };
  server.Get(R"(/api/.*)", handler);
  server.Post(R"(/api/.*)", handler);
  server.Options(R"(/api/.*)", [](const httplib::Request&, httplib::Response& rs) { rs.status = 204; });
  const int bound = port == 0 ? server.bind_to_any_port(host) : (server.bind_to_port(host, port) ? port : -1);
  if (bound < 0) return false;
  {
    std::lock_guard lock(impl_->server_mu);
    impl_->server = &server;
  }
  if (on_bound) on_bound(bound);
  const bool ok = server.listen_after_bind();
  std::lock_guard lock(impl_->server_mu);
  impl_->server = nullptr;
  return ok;
}

void Service::stop() {
  std::lock_guard lock(impl_->server_mu);
  if (impl_->server) impl_->server->stop();
}

std::optional<Job> Service::job(const std::string& id) const {
  std::lock_guard lock(impl_->mu);
  const auto it = impl_->jobs.find(id);
  if (it == impl_->jobs.end()) return std::nullopt;
  return it->second;
}

Job Service::wait(const std::string& id) const {
  std::unique_lock lock(impl_->mu);
  if (!impl_->jobs.count(id)) throw NotFoundError("unknown job '" + id + "'");
  impl_->changed.wait(lock, [&] {
    const auto s = impl_->jobs.at(id).state;
    return s == JobState::done || s == JobState::failed;
  });
  return impl_->jobs.at(id);
}

}  // namespace cwb
