#include "support.hpp"

#include "cwb/forward.hpp"
#include "cwb/service.hpp"

#include <doctest.h>
#include <httplib.h>

#include <cmath>
#include <condition_variable>
#include <mutex>
#include <thread>

#include <unistd.h>

using namespace cwb;
using nlohmann::json;
namespace fs = std::filesystem;

namespace {

std::shared_ptr<const Engine> engine() {
  static const auto e = [] {
    auto cfg = WorkbenchConfig::defaults();
    cfg.model.weights = "random:layout12:3";
    return Engine::load(cfg);
  }();
  return e;
}

struct Fixture {
  fs::path dir = fs::temp_directory_path() / ("cwb_service_" + std::to_string(::getpid()));
  Service svc;
  Fixture() : svc(engine(), [this] {
      fs::remove_all(dir);
      ServiceOptions o;
      o.results_dir = dir;
      return o;
    }()) {}
  ~Fixture() { fs::remove_all(dir); }

  ApiResponse get(const std::string& path, std::map<std::string, std::string> q = {}) {
    return svc.handle({"GET", path, std::move(q), ""});
  }
  ApiResponse post(const std::string& path, const json& body) { return svc.handle({"POST", path, {}, body.dump()}); }
  json finished(const ApiResponse& submitted) {
    REQUIRE(submitted.status == 202);
    const auto id = submitted.body.at("job").get<std::string>();
    const auto job = svc.wait(id);
    CHECK(job.state == JobState::done);
    CHECK(job.error == "");
    const auto r = get("/api/jobs/" + id);
    REQUIRE(r.status == 200);
    return r.body;
  }
};

}  // namespace

TEST_SUITE("service") {
  TEST_CASE("model summary and missing model") {
    Fixture f;
    const auto r = f.get("/api/model");
    CHECK(r.status == 200);
    CHECK(r.body.at("config").at("n_layers") == 12);
    CHECK(r.body.at("fingerprint") == engine()->fingerprint());
    CHECK(r.body.at("head_classes").contains("NameMover"));

    Service empty(nullptr, {});
    CHECK(empty.handle({"GET", "/api/model", {}, ""}).status == 409);
    CHECK(empty.handle({"POST", "/api/forward", {}, R"({"text":"hi"})"}).status == 409);
    CHECK(empty.handle({"GET", "/api/experiments", {}, ""}).status == 200);
  }

  TEST_CASE("routing errors") {
    Fixture f;
    CHECK(f.get("/api/nothing").status == 404);
    CHECK(f.get("/elsewhere").status == 404);
    CHECK(f.get("/api/jobs/job-999999").status == 404);
    CHECK(f.get("/api/results/e01/none").status == 404);
    CHECK(f.get("/api/results/../secrets").status == 404);
    CHECK(f.svc.handle({"POST", "/api/forward", {}, "{not json"}).status == 400);
    CHECK(f.post("/api/forward", {{"text", "a"}, {"bogus", 1}}).status == 400);
    CHECK(f.post("/api/experiments/e99", json::object()).status == 404);
    CHECK(f.get("/api/experiments").body.size() == 14);
  }

  TEST_CASE("forward returns logits and captured activations") {
    Fixture f;
    const auto r = f.post("/api/forward", {{"text", "When Mary and John went to the store, John gave a drink to"},
                                           {"capture", {"head_pattern.9.9", "resid_final"}},
                                           {"top_k", 3},
                                           {"full_logits", true}});
    REQUIRE(r.status == 200);
    const auto tokens = r.body.at("tokens").get<TokenSequence>();
    CHECK(tokens == engine()->tokenizer->encode("When Mary and John went to the store, John gave a drink to"));
    const auto direct = forward_one(*engine()->model, tokens);
    const auto logits = r.body.at("logits").get<std::vector<float>>();
    REQUIRE(logits.size() == static_cast<size_t>(engine()->model->config.vocab_size));
    for (size_t i = 0; i < logits.size(); i += 997) CHECK(logits[i] == doctest::Approx(direct.logits.data()[i]));
    CHECK(r.body.at("top").size() == 3);
    CHECK(r.body.at("top")[0].at("logit").get<double>() >= r.body.at("top")[1].at("logit").get<double>());
    const auto& pat = r.body.at("activations").at("head_pattern.9.9");
    CHECK(pat.at("shape") == json::array({tokens.size(), tokens.size()}));
    CHECK(r.body.at("activations").at("resid_final").at("shape")[1] == engine()->model->config.d_model);

    CHECK(f.post("/api/forward", {{"tokens", {1, 2, 3}}, {"capture", {"head_pattern.12.0"}}}).status == 400);
    CHECK(f.post("/api/forward", {{"tokens", {1, 2, 3}}, {"capture", {"nonsense"}}}).status == 400);
    CHECK(f.post("/api/forward", {{"tokens", {-1}}}).status == 400);
    CHECK(f.post("/api/forward", {{"tokens", json::array()}}).status == 400);
    CHECK(f.post("/api/forward", {{"text", "a"}, {"tokens", {1}}}).status == 400);
  }

  TEST_CASE("patching against the same prompts changes nothing") {
    Fixture f;
    const json samples = {{"dist", "ioi"}, {"seed", 4}, {"n", 6}};
    const auto act = f.post("/api/patch", {{"kind", "activation"},
                                           {"samples", samples},
                                           {"x_new", "same"},
                                           {"nodes", {{9, 9}, {{"kind", "mlp"}, {"layer", 4}}}}});
    REQUIRE(act.status == 200);
    CHECK(std::abs(act.body.at("delta_logit_diff").get<double>()) < 1e-5);
    const json spec = {{"sender", {9, 6}}, {"receivers", {{{"site", "resid_final"}, {"position", "END"}}}}};
    const auto path =
        f.post("/api/patch", {{"kind", "path"}, {"samples", samples}, {"x_new", "same"}, {"spec", spec}});
    REQUIRE(path.status == 200);
    CHECK(std::abs(path.body.at("delta_logit_diff").get<double>()) < 1e-4);
    const auto abc = f.post("/api/patch", {{"kind", "path"}, {"samples", samples}, {"spec", spec}});
    REQUIRE(abc.status == 200);
    CHECK(std::abs(abc.body.at("delta_logit_diff").get<double>()) > 0);
    const auto ko = f.post("/api/patch", {{"kind", "knockout"},
                                          {"samples", samples},
                                          {"nodes", {{9, 9, "END"}}},
                                          {"mode", "mean"},
                                          {"mean_n", 64},
                                          {"per_sample", true}});
    REQUIRE(ko.status == 200);
    CHECK(ko.body.at("rows").size() == 6);
    CHECK(f.post("/api/patch", {{"kind", "melt"}, {"samples", samples}}).status == 400);
    CHECK(f.post("/api/patch", {{"kind", "knockout"}, {"samples", samples}}).status == 400);
    CHECK(f.post("/api/patch", {{"kind", "path"},
                                {"samples", samples},
                                {"spec", {{"sender", {9, 6}}, {"receivers", {{{"site", "head_query"}, {"layer", 3},
                                                                              {"head", 0}, {"position", "END"}}}}}}})
              .status == 400);
  }

  TEST_CASE("sweep job matches the catalog sweep") {
    Fixture f;
    const auto job = f.finished(f.post("/api/sweep", {{"n", 8}, {"seed", 11}}));
    CHECK(job.at("state") == "done");
    CHECK(job.at("progress") == 1.0);
    const auto& matrix = job.at("record").at("payload").at("sweep").at("matrix");
    CHECK(matrix.size() == 12);
    ExperimentSpec spec;
    spec.id = "e02";
    spec.seed = 11;
    spec.n_samples = 8;
    const auto cli = run_experiment(*engine(), spec);
    CHECK(cli.payload.at("sweep").at("matrix") == matrix);
    const auto listed = f.get("/api/results");
    REQUIRE(listed.body.size() == 1);
    CHECK(f.get("/api/results/" + listed.body[0].at("ref").get<std::string>()).status == 200);
    CHECK(f.post("/api/sweep", {{"n", 0}}).status == 400);
    CHECK(f.post("/api/sweep", {{"receivers", {{{"site", "head_key"}}}}}).status == 400);
  }

  TEST_CASE("circuit evaluation jobs") {
    Fixture f;
    const json params = {{"n", 4}, {"mean_n", 64}, {"seed", 2}};
    const auto faith = f.finished(f.post("/api/circuit/eval", {{"criterion", "faithfulness"}, {"params", params}}));
    const auto& p = faith.at("record").at("payload");
    CHECK(p.at("faithfulness").get<double>() ==
          doctest::Approx(std::abs(p.at("F_model").get<double>() - p.at("F_circuit").get<double>())));
    json with_k = params;
    with_k["K"] = {{9, 9}, {9, 6}, {10, 0}};
    const auto comp = f.finished(f.post("/api/circuit/eval", {{"criterion", "completeness"}, {"params", with_k}}));
    const auto& ks = comp.at("record").at("payload").at("K_samples");
    REQUIRE(ks.size() == 1);
    CHECK(ks[0].at("K").size() == 3);
    const auto mini = f.finished(f.post("/api/circuit/eval", {{"criterion", "minimality"}, {"params", params}}));
    CHECK(mini.at("record").at("payload").at("minimality").size() == 26);
    CHECK(f.post("/api/circuit/eval", {{"criterion", "beauty"}}).status == 400);
    CHECK(f.post("/api/circuit/eval", {{"criterion", "minimality"}, {"circuit", "naive"}}).status == 400);
    json bad_k = params;
    bad_k["K"] = {{1, 1}};
    CHECK(f.post("/api/circuit/eval", {{"criterion", "completeness"}, {"params", bad_k}}).status == 400);
  }

  TEST_CASE("experiment jobs persist catalog runs") {
    Fixture f;
    const auto job = f.finished(f.post("/api/experiments/e01", {{"n", 8}, {"seed", 3}}));
    CHECK(job.at("record").at("experiment") == "e01");
    CHECK(f.post("/api/experiments/e01", {{"params", {{"nope", 1}}}}).status == 400);
  }

  TEST_CASE("attention and dataset endpoints") {
    Fixture f;
    const auto ds = f.get("/api/datasets/sample", {{"dist", "abc"}, {"seed", "5"}, {"n", "2"}});
    REQUIRE(ds.status == 200);
    CHECK(ds.body.at("samples").size() == 2);
    CHECK(ds.body.at("samples")[0].at("dist") == "abc");
    CHECK(f.get("/api/datasets/sample", {{"dist", "weird"}}).status == 400);
    CHECK(f.get("/api/datasets/sample", {{"seed", "x"}}).status == 400);

    const auto a = f.get("/api/attention/9/9", {{"sample", "5"}});
    REQUIRE(a.status == 200);
    const auto pat = a.body.at("pattern").get<std::vector<std::vector<double>>>();
    const size_t N = a.body.at("tokens").size();
    REQUIRE(pat.size() == N);
    for (size_t q = 0; q < N; ++q) {
      double sum = 0;
      for (size_t k = 0; k < N; ++k) {
        sum += pat[q][k];
        if (k > q) CHECK(pat[q][k] == 0.0);
      }
      CHECK(sum == doctest::Approx(1.0).epsilon(1e-5));
    }
    CHECK(a.body.at("roles").at("END") == static_cast<int>(N) - 1);
    CHECK(f.get("/api/attention/12/0").status == 400);
    CHECK(f.get("/api/attention/a/b").status == 400);
    const auto t = f.get("/api/attention/0/1", {{"text", "Hello there"}});
    CHECK(t.status == 200);
    CHECK(t.body.at("roles").is_null());
  }

  TEST_CASE("concurrent requests agree") {
    Fixture f;
    const json body = {{"text", "Then, Anna and Tom had a long argument. Afterwards Tom said to"}, {"top_k", 5}};
    const auto expected = f.post("/api/forward", body).body;
    std::vector<std::thread> ts;
    std::vector<json> got(6);
    for (int i = 0; i < 6; ++i) ts.emplace_back([&, i] { got[i] = f.post("/api/forward", body).body; });
    for (auto& t : ts) t.join();
    for (const auto& g : got) CHECK(g == expected);
  }

  TEST_CASE("http transport with CORS") {
    Fixture f;
    int port = 0;
    std::mutex m;
    std::condition_variable cv;
    std::thread server([&] {
      f.svc.listen("127.0.0.1", 0, [&](int p) {
        std::lock_guard lock(m);
        port = p;
        cv.notify_all();
      });
    });
    {
      std::unique_lock lock(m);
      cv.wait(lock, [&] { return port != 0; });
    }
    httplib::Client cli("127.0.0.1", port);
    const auto r = cli.Get("/api/model");
    REQUIRE(r);
    CHECK(r->status == 200);
    CHECK(r->get_header_value("Access-Control-Allow-Origin") == "*");
    CHECK(json::parse(r->body).at("config").at("n_heads") == 12);
    const auto bad = cli.Post("/api/forward", R"({"tokens": []})", "application/json");
    REQUIRE(bad);
    CHECK(bad->status == 400);
    const auto ds = cli.Get("/api/datasets/sample?dist=ioi&seed=2&n=1");
    REQUIRE(ds);
    CHECK(json::parse(ds->body).at("samples").size() == 1);
    const auto opt = cli.Options("/api/forward");
    REQUIRE(opt);
    CHECK(opt->status == 204);
    f.svc.stop();
    server.join();
  }
}
