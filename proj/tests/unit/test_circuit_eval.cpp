#include "support.hpp"

#include "cwb/circuit_eval.hpp"
#include "cwb/errors.hpp"

#include <doctest.h>

#include <algorithm>
#include <cmath>

using namespace cwb;
using cwb::testing::generator;
using cwb::testing::tiny_model;

namespace {

const MeanCache& means() {
  static const MeanCache mc = [] {
    const auto ref = generator().gen_abc(generator().gen_ioi_stratified(45, 203), 204);
    return MeanCache::build(*tiny_model(), ref, ablatable_keys(tiny_model()->config));
  }();
  return mc;
}

EvalContext make_ctx() { return EvalContext(*tiny_model(), generator().gen_ioi(20, 201), means(), 8); }

CircuitNode node(int l, int h, Role r) { return {l, h, PositionSpec::of(r)}; }

// A small circuit that fits the 3x4 test model.
Circuit small_circuit() {
  return Circuit({{"Late", {node(2, 0, Role::END), node(2, 3, Role::END)}},
                  {"Mid", {node(1, 1, Role::S2), node(1, 2, Role::END)}},
                  {"Early", {node(0, 0, Role::S1_plus_1), node(0, 3, Role::S2)}}},
                 "small");
}

}  // namespace

TEST_SUITE("circuit_eval") {
  TEST_CASE("checked-in circuit files match the built-in circuits") {
    const auto dir = testing::source_dir() / "config/circuits";
    CHECK(Circuit::load(dir / "canonical.json").to_json() == canonical_circuit().to_json());
    CHECK(Circuit::load(dir / "naive.json").to_json() == naive_circuit().to_json());
    CHECK(MinimalityTable::load(dir / "minimality_canonical.json").to_json() ==
          MinimalityTable::canonical().to_json());
  }

  TEST_CASE("circuit composition") {
    const auto c = canonical_circuit();
    CHECK(c.size() == 26);
    CHECK(c.classes().size() == head_class_names().size());
    for (const auto& name : head_class_names()) CHECK_FALSE(c.class_nodes(name).empty());
    CHECK(c.class_nodes("NameMover").size() == 3);
    CHECK(c.find(9, 9).pos == PositionSpec::of(Role::END));
    CHECK(c.find(4, 11).pos == PositionSpec::of(Role::S1_plus_1));
    CHECK_THROWS_AS(c.find(1, 1), PreconditionError);
    CHECK_THROWS_AS(c.class_nodes("Nope"), PreconditionError);

    const auto n = naive_circuit();
    CHECK(n.size() == 13);
    CHECK_FALSE(n.classes().count("BackupNameMover"));
    CHECK_FALSE(n.classes().count("NegativeNameMover"));
    for (const auto& v : n.nodes()) CHECK(c.contains(v));

    CHECK_THROWS_AS(Circuit({{"A", {node(1, 1, Role::END)}}, {"B", {node(1, 1, Role::END)}}}), PreconditionError);
    CHECK_THROWS_AS(canonical_circuit().validate(tiny_model()->config), PreconditionError);
    CHECK_NOTHROW(small_circuit().validate(tiny_model()->config));

    const auto w = c.without(c.class_nodes("NameMover"));
    CHECK(w.size() == 23);
    CHECK(w.class_nodes("NameMover").empty());
  }

  TEST_CASE("circuit JSON round trip and errors") {
    const auto c = small_circuit();
    CHECK(Circuit::from_json(c.to_json()).to_json() == c.to_json());
    CHECK_THROWS_AS(Circuit::from_json(nlohmann::json::parse(R"({"classes":{"A":[[1]]}})")), PreconditionError);
    CHECK_THROWS_AS(Circuit::from_json(nlohmann::json::parse(R"({"classes":{"A":[[1,1,"except:END"]]}})")),
                    PreconditionError);
    CHECK_THROWS_AS(Circuit::from_json(nlohmann::json::parse(R"({"nodes":[]})")), PreconditionError);
    CHECK_THROWS_AS(Circuit::load("/nonexistent/circuit.json"), ConfigError);
  }

  TEST_CASE("complement ablation") {
    const auto& cfg = tiny_model()->config;
    CHECK(complement_ablation(cfg, full_circuit(cfg).nodes()).empty());
    const auto all = complement_ablation(cfg, {});
    CHECK(all.size() == static_cast<size_t>(cfg.n_layers * cfg.n_heads));
    for (const auto& n : all) CHECK(n.pos.is_all());

    const auto part = complement_ablation(cfg, make_node_set({node(1, 2, Role::END), node(1, 2, Role::S2)}));
    CHECK(part.size() == all.size());
    const auto it = std::find_if(part.begin(), part.end(), [](const NodeRef& n) { return n.layer == 1 && n.head == 2; });
    REQUIRE(it != part.end());
    CHECK(it->pos.kind == PositionSpec::Kind::except_roles);
    CHECK(it->pos.roles.size() == 2);
  }

  TEST_CASE("F of the full circuit equals F of the model") {
    const auto ctx = make_ctx();
    const auto full = full_circuit(tiny_model()->config);
    CHECK(eval_F(full, ctx) == ctx.F_model());
    CHECK(faithfulness(full, ctx) == 0.0);
    const double plain = baseline(*tiny_model(), ctx.samples()).mean_logit_diff();
    CHECK(ctx.F_model() == doctest::Approx(plain).epsilon(1e-6));
  }

  TEST_CASE("F of a kept set matches an explicit knockout") {
    const auto ctx = make_ctx();
    const auto c = small_circuit();
    const auto ablate = complement_ablation(tiny_model()->config, c.nodes());
    const double direct =
        knockout(*tiny_model(), ctx.samples(), ablate, AblationMode::mean(means())).mean_logit_diff();
    CHECK(eval_F(c, ctx) == doctest::Approx(direct).epsilon(1e-9));
    // Ablating every head is the empty circuit; it differs from the model.
    CHECK(ctx.F_kept({}) != doctest::Approx(ctx.F_model()).epsilon(1e-4));
  }

  TEST_CASE("incompleteness and minimality") {
    const auto ctx = make_ctx();
    const auto c = small_circuit();
    CHECK(incompleteness(c, {}, ctx) == doctest::Approx(faithfulness(c, ctx)).epsilon(1e-12));
    // Removing the whole circuit leaves the empty circuit on one side and M \ C on the other.
    const double whole = incompleteness(c, c.nodes(), ctx);
    CHECK(whole == doctest::Approx(std::abs(ctx.F_kept({}) - ctx.F_model_without(c.nodes()))));
    CHECK(whole >= 0.0);

    const auto v = node(2, 0, Role::END);
    const NodeSet K = {node(2, 3, Role::END)};
    const double m = minimality_score(c, v, K, ctx);
    CHECK(m >= 0.0);
    CHECK(m == doctest::Approx(std::abs(ctx.F_kept(make_node_set({node(0, 0, Role::S1_plus_1), node(0, 3, Role::S2),
                                                                     node(1, 1, Role::S2), node(1, 2, Role::END)})) -
                                        ctx.F_kept(make_node_set({node(0, 0, Role::S1_plus_1), node(0, 3, Role::S2),
                                                                  node(1, 1, Role::S2), node(1, 2, Role::END),
                                                                  node(2, 0, Role::END)})))));
    CHECK_THROWS_AS(minimality_score(c, v, {v}, ctx), PreconditionError);
    CHECK_THROWS_AS(minimality_score(c, node(2, 1, Role::END), {}, ctx), PreconditionError);
    CHECK_THROWS_AS(incompleteness(c, {node(2, 1, Role::END)}, ctx), PreconditionError);
  }

  TEST_CASE("evaluations are memoized") {
    const auto ctx = make_ctx();
    const auto c = small_circuit();
    const double a = eval_F(c, ctx);
    const auto n = ctx.evaluations();
    CHECK(eval_F(c, ctx) == a);
    CHECK(ctx.evaluations() == n);
  }

  TEST_CASE("uniform and class K sampling") {
    auto ctx = make_ctx();
    const auto c = small_circuit();
    const auto u1 = sample_K(KStrategy::uniform(6, 9), c, ctx);
    ctx.threads = 1;
    const auto u2 = sample_K(KStrategy::uniform(6, 9), c, ctx);
    REQUIRE(u1.size() == 6);
    for (size_t i = 0; i < u1.size(); ++i) {
      CHECK(u1[i].K == u2[i].K);
      CHECK(u1[i].score == u2[i].score);
      CHECK(u1[i].score == doctest::Approx(incompleteness(c, u1[i].K, ctx)));
    }

    const auto one = sample_K(KStrategy::by_class("Mid"), c, ctx);
    REQUIRE(one.size() == 1);
    CHECK(one[0].K == c.class_nodes("Mid"));
    CHECK(one[0].source == "class:Mid");
    CHECK(sample_K(KStrategy::by_class(""), c, ctx).size() == 3);
    CHECK_THROWS_AS(sample_K(KStrategy::by_class("Nope"), c, ctx), PreconditionError);
  }

  TEST_CASE("name mover class on the canonical layout") {
    const auto c = canonical_circuit();
    CHECK(c.class_nodes("NameMover") ==
          make_node_set({node(9, 9, Role::END), node(9, 6, Role::END), node(10, 0, Role::END)}));
  }

  TEST_CASE("greedy K search") {
    const auto ctx = make_ctx();
    const auto c = small_circuit();
    auto st = KStrategy::greedy(3, 3, 17);
    st.restarts = 3;
    const auto g1 = sample_K(st, c, ctx);
    const auto g2 = sample_K(st, c, ctx);
    REQUIRE(g1.size() == 5);
    for (size_t i = 0; i < g1.size(); ++i) {
      CHECK(g1[i].K == g2[i].K);
      CHECK(g1[i].source == g2[i].source);
      if (i > 0) CHECK(g1[i - 1].score >= g1[i].score);
      CHECK(g1[i].score == doctest::Approx(incompleteness(c, g1[i].K, ctx)));
      CHECK(g1[i].source.rfind("greedy:", 0) == 0);
    }

    st.circuit_only_objective = true;
    const auto g3 = sample_K(st, c, ctx);
    CHECK_FALSE(g3.empty());
    CHECK_THROWS_AS(sample_K(KStrategy::greedy(0, 3, 1), c, ctx), PreconditionError);
  }

  TEST_CASE("canonical minimality table") {
    const auto t = MinimalityTable::canonical();
    const auto c = canonical_circuit();
    CHECK(t.k.size() == c.size());
    for (const auto& v : c.nodes()) {
      REQUIRE(t.k.count({v.layer, v.head}));
      for (const auto& [l, h] : t.k.at({v.layer, v.head})) {
        CHECK_FALSE((l == v.layer && h == v.head));
        CHECK_NOTHROW(c.find(l, h));
      }
    }
    CHECK(t.k.at({9, 9}).empty());
    CHECK(t.k.at({9, 7}).size() == 8);
    CHECK(t.k.at({11, 9}).size() == 5);
  }

  TEST_CASE("minimality suite") {
    const auto ctx = make_ctx();
    const auto c = small_circuit();
    MinimalityTable t;
    t.k[{2, 0}] = {{2, 3}};
    t.k[{2, 3}] = {{2, 0}};
    t.k[{1, 1}] = {};
    t.k[{1, 2}] = {{1, 1}};
    t.k[{0, 0}] = {{0, 3}};
    t.k[{0, 3}] = {};
    const auto rows = minimality_suite(c, t, ctx);
    REQUIRE(rows.size() == c.size());
    for (const auto& r : rows) {
      CHECK(r.score == doctest::Approx(std::abs(r.F_without_v - r.F_with_v)));
      CHECK(r.score == doctest::Approx(minimality_score(c, r.v, r.K, ctx)));
      const auto j = to_json(r);
      CHECK(j.at("node").at(2) == r.v.pos.str());
    }
    t.k.erase({0, 3});
    CHECK_THROWS_AS(minimality_suite(c, t, ctx), PreconditionError);
  }
}
