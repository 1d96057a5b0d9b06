#include "cwb/errors.hpp"
#include "cwb/experiments.hpp"
#include "cwb/service.hpp"

#include <CLI11.hpp>
#include <json.hpp>

#include <csignal>
#include <cstdio>
#include <iostream>

namespace {

using nlohmann::json;

cwb::WorkbenchConfig load_config(const std::string& path, const std::string& weights) {
  auto cfg = path.empty() ? cwb::WorkbenchConfig::defaults() : cwb::WorkbenchConfig::load(path);
  if (!weights.empty()) cfg.model.weights = weights;
  return cfg;
}

json parse_params(const std::vector<std::string>& kvs) {
  json p = json::object();
  for (const auto& kv : kvs) {
    const auto eq = kv.find('=');
    if (eq == std::string::npos || eq == 0) throw cwb::ConfigError("--param expects key=value, got '" + kv + "'");
    const std::string k = kv.substr(0, eq), v = kv.substr(eq + 1);
    const auto parsed = json::parse(v, nullptr, false);
    p[k] = parsed.is_discarded() ? json(v) : parsed;
  }
  return p;
}

void print_checks(const cwb::ResultRecord& rec) {
  for (const auto& c : rec.checks) {
    const char* tag = c.passed ? "PASS" : c.primary ? "FAIL" : "info";
    std::printf("%s  %s: %s (expected %s)\n", tag, c.name.c_str(), c.measured.dump().c_str(), c.expected.c_str());
  }
}

cwb::Service* g_service = nullptr;
void on_signal(int) {
  if (g_service) g_service->stop();
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"IOI circuit workbench"};
  app.require_subcommand(1);
  std::string config_path, weights;
  app.add_option("--config", config_path, "workbench config (JSON)");
  app.add_option("--weights", weights, "model weights; overrides the config (e.g. random:layout12:3)");

  auto* run = app.add_subcommand("run", "run one catalog experiment and persist its record");
  std::string run_id, run_out;
  int run_n = 0;
  uint64_t run_seed = 0;
  bool run_assert = false, run_no_save = false;
  std::vector<std::string> run_params;
  run->add_option("id", run_id, "experiment id, e.g. e02")->required();
  run->add_option("--n", run_n, "number of samples (default: the catalog value)");
  run->add_option("--seed", run_seed, "seed");
  run->add_option("--out", run_out, "results directory (default: from the config)");
  run->add_option("--param", run_params, "experiment parameter key=value (repeatable)");
  run->add_flag("--assert", run_assert, "exit with status 2 when a primary check fails");
  run->add_flag("--no-save", run_no_save, "do not write the record to disk");

  auto* list = app.add_subcommand("list", "list the experiment catalog");
  bool list_json = false;
  list->add_flag("--json", list_json, "print the catalog as JSON");

  auto* results = app.add_subcommand("results", "list persisted results");
  std::string results_dir;
  results->add_option("--out", results_dir, "results directory (default: from the config)");

  auto* serve = app.add_subcommand("serve", "serve the JSON API and the UI bundle");
  int port = 8080, workers = 1;
  std::string host = "127.0.0.1", ui_dir, serve_out;
  serve->add_option("--port", port, "port (0 picks a free one)");
  serve->add_option("--host", host, "bind address");
  serve->add_option("--ui", ui_dir, "static UI directory (default: from the config)");
  serve->add_option("--out", serve_out, "results directory (default: from the config)");
  serve->add_option("--workers", workers, "job worker threads")->check(CLI::Range(1, 64));

  auto* tok = app.add_subcommand("tokenize", "print the token ids and pieces of a text");
  std::string tok_text;
  tok->add_option("text", tok_text, "text to encode")->required();

  auto* mk = app.add_subcommand("make-random-checkpoint", "write a deterministic random GPT-2-shaped checkpoint");
  std::string mk_out, mk_shape = "tiny";
  uint64_t mk_seed = 1;
  mk->add_option("--out", mk_out, "output .safetensors path")->required();
  mk->add_option("--shape", mk_shape, "tiny | layout12 | gpt2-small")
      ->check(CLI::IsMember({"tiny", "layout12", "gpt2-small"}));
  mk->add_option("--seed", mk_seed, "generator seed");

  CLI11_PARSE(app, argc, argv);

  try {
    if (*mk) {
      const auto cfg = mk_shape == "tiny"       ? cwb::tiny_test_config()
                       : mk_shape == "layout12" ? cwb::layout12_test_config()
                                                : cwb::ModelConfig::gpt2_small();
      const uint64_t fp = cwb::write_random_checkpoint(mk_out, cfg, mk_seed);
      std::printf("%016llx\n", static_cast<unsigned long long>(fp));
      return 0;
    }
    if (*list) {
      if (list_json) {
        json out = json::array();
        for (const auto& e : cwb::catalog()) out.push_back(e.to_json());
        std::cout << out.dump(2) << "\n";
      } else {
        for (const auto& e : cwb::catalog()) {
          std::printf("%s  %-44s %s\n", e.id.c_str(), e.title.c_str(), e.citation.c_str());
        }
      }
      return 0;
    }
    const auto cfg = load_config(config_path, weights);
    if (*results) {
      const auto root = results_dir.empty() ? cfg.results_dir : std::filesystem::path(results_dir);
      std::cout << cwb::list_results(root).dump(2) << "\n";
      return 0;
    }
    if (*run) {
      const auto engine = cwb::Engine::load(cfg);
      cwb::ExperimentSpec spec;
      spec.id = run_id;
      spec.seed = run->count("--seed") ? run_seed : cfg.seed;
      spec.n_samples = run_n > 0 ? run_n : cfg.n_samples;
      spec.params = parse_params(run_params);
      cwb::RunHooks hooks;
      int last = -1;
      hooks.progress = [&](double f) {
        const int pct = static_cast<int>(f * 100);
        if (pct / 10 != last / 10) std::fprintf(stderr, "\r%s %3d%%", run_id.c_str(), pct);
        last = pct;
      };
      const auto rec = cwb::run_experiment(*engine, spec, hooks);
      std::fprintf(stderr, "\n");
      print_checks(rec);
      std::printf("%s: %s in %.1f s (n=%d, seed=%llu)\n", rec.experiment.c_str(), rec.passed() ? "passed" : "FAILED",
                  rec.wall_time_s, rec.n_samples, static_cast<unsigned long long>(rec.seed));
      if (!run_no_save) {
        const auto root = run_out.empty() ? cfg.results_dir : std::filesystem::path(run_out);
        std::printf("saved %s\n", (root / cwb::persist(rec, root)).string().c_str());
      }
      return run_assert && !rec.passed() ? 2 : 0;
    }
    if (*tok) {
      const auto t = cwb::Tokenizer::from_files(cfg.model.vocab, cfg.model.merges);
      for (cwb::TokenId id : t.encode(tok_text)) {
        std::printf("%d\t%s\n", id, json(t.decode(std::span(&id, 1))).dump().c_str());
      }
      return 0;
    }
    if (*serve) {
      std::shared_ptr<const cwb::Engine> engine;
      try {
        engine = cwb::Engine::load(cfg);
      } catch (const cwb::ModelLoadError& e) {
        std::fprintf(stderr, "warning: %s; model endpoints will answer 409\n", e.what());
      }
      cwb::ServiceOptions so;
      so.results_dir = serve_out.empty() ? cfg.results_dir : std::filesystem::path(serve_out);
      so.ui_dir = ui_dir.empty() ? cfg.ui_dir : std::filesystem::path(ui_dir);
      so.workers = workers;
      cwb::Service service(engine, so);
      g_service = &service;
      std::signal(SIGINT, on_signal);
      std::signal(SIGTERM, on_signal);
      const bool ok = service.listen(host, port, [&](int p) {
        std::printf("listening on http://%s:%d\n", host.c_str(), p);
        std::fflush(stdout);
      });
      g_service = nullptr;
      if (!ok) {
        std::fprintf(stderr, "cannot bind %s:%d\n", host.c_str(), port);
        return 1;
      }
      return 0;
    }
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 1;
  }
  return 0;
}
