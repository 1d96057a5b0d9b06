#include "support.hpp"

#include "cwb/errors.hpp"
#include "cwb/experiments.hpp"

#include <doctest.h>

#include <set>

#include <unistd.h>

using namespace cwb;
using cwb::testing::read_json;
using cwb::testing::source_dir;
namespace fs = std::filesystem;

namespace {

std::shared_ptr<const Engine> engine_for(const std::string& weights) {
  static std::map<std::string, std::shared_ptr<const Engine>> cache;
  auto& e = cache[weights];
  if (!e) {
    auto cfg = WorkbenchConfig::defaults();
    cfg.model.weights = weights;
    e = Engine::load(cfg);
  }
  return e;
}

const Engine& tiny() { return *engine_for("random:tiny:7"); }
const Engine& layout12() { return *engine_for("random:layout12:3"); }

ExperimentSpec spec(const std::string& id, int n, nlohmann::json params = nlohmann::json::object(), uint64_t seed = 5) {
  ExperimentSpec s;
  s.id = id;
  s.n_samples = n;
  s.params = std::move(params);
  s.seed = seed;
  return s;
}

struct TempDir {
  fs::path path;
  TempDir() {
    path = fs::temp_directory_path() / ("cwb_results_" + std::to_string(::getpid()) + "_" + std::to_string(counter()++));
    fs::remove_all(path);
  }
  ~TempDir() { fs::remove_all(path); }
  static int& counter() {
    static int c = 0;
    return c;
  }
};

}  // namespace

TEST_SUITE("experiments") {
  TEST_CASE("catalog lists e01 to e14 with distinct citations") {
    const auto& c = catalog();
    REQUIRE(c.size() == 14);
    std::set<std::string> citations;
    for (size_t i = 0; i < c.size(); ++i) {
      char id[8];
      std::snprintf(id, sizeof id, "e%02zu", i + 1);
      CHECK(c[i].id == id);
      CHECK_FALSE(c[i].citation.empty());
      CHECK(c[i].default_n > 0);
      citations.insert(c[i].citation);
    }
    CHECK(citations.size() == c.size());
    CHECK_THROWS_AS(catalog_entry("e99"), NotFoundError);
    CHECK(catalog_entry("e03").params.at("top_k") == 5);
  }

  TEST_CASE("checked-in catalog mapping matches the built-in catalog") {
    const auto j = read_json(source_dir() / "config/catalog.json");
    const auto& list = j.at("experiments");
    REQUIRE(list.size() == catalog().size());
    for (size_t i = 0; i < list.size(); ++i) {
      CHECK(list[i].at("id") == catalog()[i].id);
      CHECK(list[i].at("title") == catalog()[i].title);
      CHECK(list[i].at("citation") == catalog()[i].citation);
    }
  }

  TEST_CASE("config parsing") {
    const auto base = fs::path("/tmp/cfgbase");
    const auto cfg = WorkbenchConfig::from_json(
        {{"model", {{"weights", "w.safetensors"}}}, {"results_dir", "out"}, {"seed", 9}, {"n_samples", 40}}, base);
    CHECK(cfg.model.weights == base / "w.safetensors");
    CHECK(cfg.results_dir == base / "out");
    CHECK(cfg.seed == 9);
    CHECK(cfg.n_samples == 40);
    CHECK(cfg.word_lists == WorkbenchConfig::defaults().word_lists);
    CHECK(WorkbenchConfig::from_json({{"model", {{"weights", "random:tiny:1"}}}}, base).model.weights ==
          "random:tiny:1");
    CHECK_THROWS_AS(WorkbenchConfig::from_json({{"sead", 1}}), ConfigError);
    CHECK_THROWS_AS(WorkbenchConfig::from_json({{"model", {{"wieghts", "x"}}}}), ConfigError);
    CHECK_THROWS_AS(WorkbenchConfig::from_json({{"seed", "one"}}), ConfigError);
    CHECK_THROWS_AS(WorkbenchConfig::load("/nonexistent/cfg.json"), ConfigError);
    const auto round = WorkbenchConfig::from_json(cfg.to_json());
    CHECK(round.to_json() == cfg.to_json());
  }

  TEST_CASE("engine loading") {
    auto cfg = WorkbenchConfig::defaults();
    cfg.model.weights = "random:nosuch:1";
    CHECK_THROWS_AS(Engine::load(cfg), ConfigError);
    cfg.model.weights = "";
    CHECK_THROWS_AS(Engine::load(cfg), ModelLoadError);
    CHECK(tiny().fingerprint() == engine_for("random:tiny:7")->fingerprint());
    CHECK(tiny().fingerprint() != engine_for("random:tiny:8")->fingerprint());
    CHECK(layout12().model->config.n_layers == 12);
  }

  TEST_CASE("runs are reproducible") {
    const auto a = run_experiment(tiny(), spec("e01", 24));
    const auto b = run_experiment(tiny(), spec("e01", 24));
    CHECK(a.payload == b.payload);
    CHECK(a.payload.at("n") == 24);
    CHECK(a.checks.size() == 3);
    CHECK(a.artifacts.size() == 2);
    const auto c = run_experiment(tiny(), spec("e01", 24, nlohmann::json::object(), 6));
    CHECK(c.payload != a.payload);
  }

  TEST_CASE("parameter validation") {
    CHECK_THROWS_AS(run_experiment(tiny(), spec("e99", 8)), NotFoundError);
    CHECK_THROWS_AS(run_experiment(tiny(), spec("e01", 8, {{"top_k", 3}})), ConfigError);
    CHECK_THROWS_AS(run_experiment(tiny(), spec("e01", 8, {{"batch_size", "big"}})), ConfigError);
    CHECK_THROWS_AS(run_experiment(tiny(), spec("e01", 8, {{"batch_size", 0}})), ConfigError);
    CHECK_THROWS_AS(run_experiment(tiny(), spec("e01", -1)), ConfigError);
    // Experiments naming GPT-2 small heads need the 12x12 layout.
    CHECK_THROWS_AS(run_experiment(tiny(), spec("e02", 8)), ConfigError);
    const auto r = run_experiment(tiny(), spec("e01", 8, {{"batch_size", 4}}));
    CHECK(r.params.at("batch_size") == 4);
  }

  TEST_CASE("every experiment runs on a 12x12 random model") {
    const std::map<std::string, nlohmann::json> small = {
        {"e03", {{"copy_n", 8}, {"copy_grid_n", 4}}},
        {"e10", {{"mean_n", 64}}},
        {"e11", {{"half_len", 6}}},
        {"e12", {{"mean_n", 64}}},
        {"e13", {{"mean_n", 64}, {"greedy_n", 4}, {"greedy_restarts", 1}, {"greedy_steps", 2}, {"greedy_k", 2},
                 {"uniform_count", 2}}},
    };
    for (const auto& info : catalog()) {
      CAPTURE(info.id);
      const auto it = small.find(info.id);
      const int n = info.id == "e11" ? 3 : 6;
      std::vector<double> progress;
      RunHooks hooks;
      hooks.progress = [&](double f) { progress.push_back(f); };
      const auto rec = run_experiment(layout12(), spec(info.id, n, it == small.end() ? nlohmann::json::object() : it->second),
                                      hooks);
      CHECK(rec.experiment == info.id);
      CHECK(rec.n_samples == n);
      CHECK(rec.payload.is_object());
      CHECK_FALSE(rec.payload.empty());
      REQUIRE_FALSE(progress.empty());
      CHECK(progress.back() == 1.0);
      CHECK(std::is_sorted(progress.begin(), progress.end()));
      for (const auto& a : rec.artifacts) {
        CHECK_FALSE(a.content.empty());
        if (a.name.size() > 4 && a.name.substr(a.name.size() - 4) == ".svg") CHECK(a.content.rfind("<svg", 0) == 0);
      }
      if (info.id != "e07") CHECK_FALSE(rec.checks.empty());
    }
  }

  TEST_CASE("signal experiment checks the published table fit") {
    const auto rec = run_experiment(layout12(), spec("e09", 4));
    int published = 0;
    for (const auto& c : rec.checks) {
      if (c.name.rfind("published table", 0) == 0) {
        ++published;
        CHECK(c.passed);
      }
    }
    CHECK(published == 3);
    CHECK(rec.payload.at("cells").size() == 6);
  }

  TEST_CASE("persist, list and load results") {
    TempDir dir;
    auto rec = run_experiment(tiny(), spec("e01", 8));
    const auto ref1 = persist(rec, dir.path);
    const auto ref2 = persist(rec, dir.path);
    CHECK(ref1 != ref2);
    CHECK(ref1.rfind("e01/", 0) == 0);
    CHECK(fs::exists(dir.path / ref1 / "record.json"));
    CHECK(fs::exists(dir.path / ref1 / "samples.csv"));
    CHECK(fs::exists(dir.path / ref1 / "logit_diff.svg"));
    const auto list = list_results(dir.path);
    REQUIRE(list.size() == 2);
    CHECK(list[0].at("ref") == ref1);
    CHECK(list[1].at("ref") == ref2);
    const auto j = load_result(dir.path, ref1);
    CHECK(j.at("payload") == rec.payload);
    const auto back = ResultRecord::from_json(j);
    CHECK(back.payload == rec.payload);
    CHECK(back.checks.size() == rec.checks.size());
    CHECK(back.passed() == rec.passed());
    CHECK_THROWS_AS(load_result(dir.path, "e01/nothing"), NotFoundError);
    CHECK_THROWS_AS(load_result(dir.path, "../etc"), NotFoundError);
    CHECK(list_results(dir.path / "empty").empty());
  }

  TEST_CASE("informative checks do not fail a record") {
    ResultRecord r;
    r.checks.push_back({"a", true, 1, "", true});
    r.checks.push_back({"b", false, 0, "", false});
    CHECK(r.passed());
    r.checks.push_back({"c", false, 0, "", true});
    CHECK_FALSE(r.passed());
  }

  TEST_CASE("matrix csv") {
    CHECK(matrix_csv({{1, 2}, {3, 4}}, "v") == "layer,head,v\n0,0,1\n0,1,2\n1,0,3\n1,1,4\n");
  }
}
