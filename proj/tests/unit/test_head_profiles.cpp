#include "support.hpp"

#include "cwb/errors.hpp"
#include "cwb/head_profiles.hpp"

#include <doctest.h>

#include <algorithm>
#include <cmath>

using namespace cwb;
using cwb::testing::generator;
using cwb::testing::tiny_model;

namespace {

const std::vector<PromptSample>& ioi() {
  static const auto s = generator().gen_ioi(16, 301);
  return s;
}

const MeanCache& means() {
  static const MeanCache mc = [] {
    const auto ref = generator().gen_abc(generator().gen_ioi_stratified(30, 303), 304);
    return MeanCache::build(*tiny_model(), ref, ablatable_keys(tiny_model()->config));
  }();
  return mc;
}

// Copy of the test model with head (l, h)'s output matrix multiplied by `scale`.
Model scaled_ov(int l, int h, float scale) {
  Model m = *tiny_model();
  const int dh = m.config.head_dim();
  m.params.blocks[l].w_out.middleRows(h * dh, dh) *= scale;
  return m;
}

// Independent copy score: double precision and an explicit rank count.
double reference_copy_score(const Model& m, int l, int h, const std::vector<PromptSample>& samples, int top_k) {
  const auto& cfg = m.config;
  const int d = cfg.d_model, dh = cfg.head_dim();
  auto ln = [&](Eigen::RowVectorXd x, const LayerNormParams& p) {
    const double mu = x.mean();
    x.array() -= mu;
    const double sd = std::sqrt(x.array().square().mean() + cfg.layer_norm_epsilon);
    return Eigen::RowVectorXd((x / sd).cwiseProduct(p.gain.cast<double>()) + p.bias.cast<double>());
  };
  const auto& blk = m.params.blocks[l];
  const Eigen::MatrixXd Wv = blk.w_qkv.middleCols(2 * d + h * dh, dh).cast<double>();
  const Eigen::RowVectorXd bv = blk.b_qkv.segment(2 * d + h * dh, dh).cast<double>();
  const Eigen::MatrixXd Wo = blk.w_out.middleRows(h * dh, dh).cast<double>();
  const Eigen::MatrixXd WU = m.params.unembed().cast<double>();
  int hits = 0, total = 0;
  for (const auto& s : samples) {
    ForwardOptions fo;
    fo.capture = {HookKey::resid_post(0)};
    fo.logits = LogitsMode::none;
    const auto res = forward_one(m, s.tokens, {}, fo);
    const Tensor& x = res.cache.at(HookKey::resid_post(0));
    for (auto [pos, tok] : {std::pair{s.pos.io, s.io_name}, std::pair{s.pos.s1, s.s_name}}) {
      Eigen::RowVectorXd r(d);
      for (int i = 0; i < d; ++i) r(i) = x.data()[pos * d + i];
      const Eigen::RowVectorXd out = ln((ln(r, blk.ln1) * Wv + bv) * Wo, m.params.ln_final);
      const Eigen::VectorXd logits = WU * out.transpose();
      int above = 0;
      for (int j = 0; j < logits.size(); ++j) above += logits(j) > logits(tok);
      hits += above < top_k;
      ++total;
    }
  }
  return static_cast<double>(hits) / total;
}

std::vector<TokenSequence> repeated(int n, uint64_t seed) {
  return gen_repeated_random(12, n, seed, tiny_model()->config.vocab_size);
}

}  // namespace

TEST_SUITE("head_profiles") {
  TEST_CASE("copy score matches an independent computation") {
    const auto& m = *tiny_model();
    const std::vector<PromptSample> few(ioi().begin(), ioi().begin() + 6);
    for (auto [l, h] : {std::pair{0, 0}, std::pair{1, 3}, std::pair{2, 2}}) {
      for (int k : {1, 5, 200}) {
        CopyScoreOptions o;
        o.top_k = k;
        CHECK(copy_score(m, l, h, few, o) == doctest::Approx(reference_copy_score(m, l, h, few, k)));
      }
    }
    CopyScoreOptions all;
    all.top_k = m.config.vocab_size;
    CHECK(copy_score(m, 1, 1, few, all) == 1.0);
    CHECK_THROWS_AS(copy_score(m, 3, 0, few), PreconditionError);
    CopyScoreOptions bad;
    bad.sign = 0;
    CHECK_THROWS_AS(copy_score(m, 0, 0, few, bad), PreconditionError);
  }

  TEST_CASE("negating OV swaps copy and negative copy scores") {
    const Model neg = scaled_ov(1, 2, -1.0f);
    CopyScoreOptions plus, minus;
    minus.sign = -1;
    plus.top_k = minus.top_k = 50;
    CHECK(copy_score(neg, 1, 2, ioi(), plus) == copy_score(*tiny_model(), 1, 2, ioi(), minus));
    CHECK(copy_score(neg, 1, 2, ioi(), minus) == copy_score(*tiny_model(), 1, 2, ioi(), plus));
  }

  TEST_CASE("copy score grid") {
    CopyScoreOptions o;
    o.top_k = 50;
    const auto rep = copy_scores(*tiny_model(), ioi(), o);
    CHECK(rep.kind == ScoreKind::copy);
    REQUIRE(rep.grid.size() == 3);
    for (int l = 0; l < 3; ++l) {
      REQUIRE(rep.grid[l].size() == 4);
      for (int h = 0; h < 4; ++h) {
        CHECK(rep.at(l, h) >= 0.0);
        CHECK(rep.at(l, h) <= 1.0);
        CHECK(rep.at(l, h) == copy_score(*tiny_model(), l, h, ioi(), o));
      }
    }
    o.sign = -1;
    CHECK(copy_scores(*tiny_model(), ioi(), o).kind == ScoreKind::negative_copy);
  }

  TEST_CASE("attention statistics") {
    const auto& m = *tiny_model();
    const std::vector<std::pair<int, int>> heads = {{1, 0}, {2, 3}};
    const auto st = attention_stat(m, heads, ioi(), Role::END, Role::IO);
    CHECK(st.n == static_cast<int>(heads.size() * ioi().size()));
    double sum = 0, sq = 0;
    for (const auto& s : ioi()) {
      ForwardOptions fo;
      for (auto [l, h] : heads) fo.capture.insert(HookKey::of_head(Site::head_pattern, l, h));
      const auto res = forward_one(m, s.tokens, {}, fo);
      for (auto [l, h] : heads) {
        const Tensor& p = res.cache.at(HookKey::of_head(Site::head_pattern, l, h));
        const int N = s.length();
        double row = 0;
        for (int j = 0; j < N; ++j) row += p.data()[s.pos.end * N + j];
        CHECK(row == doctest::Approx(1.0).epsilon(1e-5));
        const double v = p.data()[s.pos.end * N + s.pos.io];
        sum += v;
        sq += v * v;
      }
    }
    const double mean = sum / st.n;
    CHECK(st.mean == doctest::Approx(mean).epsilon(1e-5));
    CHECK(st.std == doctest::Approx(std::sqrt(sq / st.n - mean * mean)).epsilon(1e-4));
    CHECK_THROWS_AS(attention_stat(m, {}, ioi(), Role::END, Role::IO), PreconditionError);
    CHECK_THROWS_AS(attention_stat(m, {{0, 4}}, ioi(), Role::END, Role::IO), PreconditionError);
  }

  TEST_CASE("pearson correlation") {
    const std::vector<double> x = {1, 2, 3, 4};
    const std::vector<double> y = {2, 4, 6, 8.5};
    const std::vector<double> neg = {-1, -2, -3, -4};
    const std::vector<double> flat = {0.3, 0.3, 0.3, 0.3};
    CHECK(*pearson(x, x) == doctest::Approx(1.0));
    CHECK(*pearson(x, neg) == doctest::Approx(-1.0));
    CHECK(*pearson(x, y) > 0.99);
    CHECK_FALSE(pearson(flat, x).has_value());
    CHECK_FALSE(pearson(std::vector<double>{1.0}, std::vector<double>{2.0}).has_value());
    CHECK_THROWS_AS(pearson(x, std::vector<double>{1, 2}), PreconditionError);
  }

  TEST_CASE("name projection is linear in the head output") {
    const auto& m = *tiny_model();
    const int d = m.config.d_model;
    std::vector<float> v(d), r(d), vn(d), v2(d);
    Rng rng(5);
    for (int i = 0; i < d; ++i) {
      v[i] = static_cast<float>(rng.uniform01() - 0.5);
      r[i] = static_cast<float>(rng.uniform01() * 3 - 1);
      vn[i] = -v[i];
      v2[i] = 2 * v[i];
    }
    const double p = name_projection(m, v, r, 1000);
    CHECK(name_projection(m, vn, r, 1000) == doctest::Approx(-p));
    CHECK(name_projection(m, v2, r, 1000) == doctest::Approx(2 * p));
    CHECK_THROWS_AS(name_projection(m, std::vector<float>(3), r, 1), PreconditionError);
  }

  TEST_CASE("name mover scatter") {
    const auto& m = *tiny_model();
    const auto sc = nm_scatter(m, 2, 1, ioi(), Role::IO);
    REQUIRE(sc.points.size() == ioi().size());
    const auto st = attention_stat(m, {{2, 1}}, ioi(), Role::END, Role::IO);
    double mean = 0;
    for (const auto& p : sc.points) {
      CHECK(p.attention >= 0.0);
      CHECK(p.attention <= 1.0);
      mean += p.attention;
    }
    CHECK(mean / sc.points.size() == doctest::Approx(st.mean).epsilon(1e-5));
    CHECK(sc.correlation.has_value());
    const auto s = nm_scatter(m, 2, 1, ioi(), Role::S2);
    const auto s1 = attention_stat(m, {{2, 1}}, ioi(), Role::END, Role::S1).mean;
    const auto s2 = attention_stat(m, {{2, 1}}, ioi(), Role::END, Role::S2).mean;
    double ms = 0;
    for (const auto& p : s.points) ms += p.attention;
    CHECK(ms / s.points.size() == doctest::Approx(s1 + s2).epsilon(1e-5));
    const auto j = sc.to_json();
    CHECK(j.at("n") == ioi().size());
  }

  TEST_CASE("repeated token scores") {
    const auto& m = *tiny_model();
    const auto seqs = repeated(6, 11);
    const auto reps = repeated_token_scores(m, seqs);
    REQUIRE(reps.size() == 3);
    CHECK(reps[0].kind == ScoreKind::previous_token);
    CHECK(reps[1].kind == ScoreKind::induction);
    CHECK(reps[2].kind == ScoreKind::duplicate);
    for (const auto& r : reps) {
      for (const auto& row : r.grid) {
        for (double v : row) {
          CHECK(v >= 0.0);
          CHECK(v <= 1.0);
        }
      }
    }
    // Direct recomputation for one head.
    const int L = 12, l = 1, h = 2;
    double prev = 0, ind = 0, dup = 0;
    for (const auto& s : seqs) {
      TokenSequence t = {50256};
      t.insert(t.end(), s.begin(), s.end());
      ForwardOptions fo;
      fo.capture = {HookKey::of_head(Site::head_pattern, l, h)};
      const auto res = forward_one(m, t, {}, fo);
      const float* p = res.cache.at(HookKey::of_head(Site::head_pattern, l, h)).data();
      const int N = 2 * L + 1;
      for (int i = 2; i < N; ++i) prev += p[i * N + i - 1];
      for (int i = L + 1; i < N; ++i) {
        ind += p[i * N + i - L + 1];
        dup += p[i * N + i - L];
      }
    }
    const double n = static_cast<double>(seqs.size());
    CHECK(reps[0].at(l, h) == doctest::Approx(prev / (n * (2 * L - 1))).epsilon(1e-5));
    CHECK(reps[1].at(l, h) == doctest::Approx(ind / (n * L)).epsilon(1e-5));
    CHECK(reps[2].at(l, h) == doctest::Approx(dup / (n * L)).epsilon(1e-5));

    RepeatedOptions no_bos;
    no_bos.prepend_bos = false;
    CHECK(repeated_token_scores(m, seqs, no_bos)[0].grid != reps[0].grid);

    TokenSequence broken = seqs[0];
    broken.back() = broken.back() == 1 ? 2 : 1;
    CHECK_THROWS_AS(repeated_token_scores(m, {broken}), PreconditionError);
    CHECK_THROWS_AS(repeated_token_scores(m, {TokenSequence{1, 2, 1}}), PreconditionError);
    CHECK_THROWS_AS(repeated_token_scores(m, {}), PreconditionError);
  }

  TEST_CASE("copy on repeats") {
    const auto seqs = repeated(4, 12);
    const auto rep = copy_on_repeats(*tiny_model(), seqs);
    CHECK(rep.kind == ScoreKind::copy_on_repeats);
    const Model stub = scaled_ov(2, 1, 0.0f);
    const auto zero = copy_on_repeats(stub, seqs);
    CHECK(zero.at(2, 1) == 0.0);
    CHECK(zero.at(1, 1) == doctest::Approx(rep.at(1, 1)));
    const Model neg = scaled_ov(2, 1, -1.0f);
    CHECK(copy_on_repeats(neg, seqs).at(2, 1) == doctest::Approx(-rep.at(2, 1)));
  }

  TEST_CASE("backup discovery") {
    const auto& m = *tiny_model();
    const auto abc = generator().gen_abc(ioi(), 302);
    BackupOptions none;
    none.threshold = 0.0;
    none.n_samples = 8;
    const auto r0 = backup_discovery(m, ioi(), abc, none);
    CHECK(r0.F_knocked == r0.F_model);
    CHECK(r0.sweep.baseline == doctest::Approx(r0.F_model).epsilon(1e-5));
    CHECK(r0.heads.size() == 12);
    for (size_t i = 1; i < r0.heads.size(); ++i) CHECK(std::abs(r0.heads[i - 1].effect) >= std::abs(r0.heads[i].effect));

    BackupOptions knock;
    knock.knocked = {NodeRef::head_at(2, 0), NodeRef::head_at(2, 3)};
    knock.mode = AblationMode::mean(means());
    knock.n_samples = 8;
    knock.threshold = 0.0;
    knock.exclude = {{0, 0}};
    const auto r1 = backup_discovery(m, ioi(), abc, knock);
    const std::vector<PromptSample> first(ioi().begin(), ioi().begin() + 8);
    CHECK(r1.F_knocked ==
          doctest::Approx(knockout(m, first, knock.knocked, knock.mode).mean_logit_diff()).epsilon(1e-6));
    CHECK(r1.sweep.baseline == doctest::Approx(r1.F_knocked).epsilon(1e-5));
    CHECK(r1.heads.size() == 9);
    for (const auto& h : r1.heads) {
      CHECK_FALSE((h.layer == 2 && (h.head == 0 || h.head == 3)));
      CHECK_FALSE((h.layer == 0 && h.head == 0));
    }
    knock.threshold = 1e9;
    CHECK(backup_discovery(m, ioi(), abc, knock).heads.empty());
    knock.knocked = {NodeRef::mlp_at(1)};
    CHECK_THROWS_AS(backup_discovery(m, ioi(), abc, knock), PreconditionError);
  }

  TEST_CASE("token and position fit") {
    const std::map<std::pair<int, int>, double> table = {{{1, 1}, 3.55},   {{0, 1}, 2.45},  {{-1, 1}, 1.77},
                                                         {{1, -1}, -0.99}, {{0, -1}, -1.96}, {{-1, -1}, -3.16}};
    const auto fit = token_position_fit(table);
    CHECK(fit.a == doctest::Approx(13.88 / 6));
    CHECK(fit.b == doctest::Approx(3.95 / 4));
    CHECK(std::abs(fit.a - 2.31) <= 0.02);
    CHECK(std::abs(fit.b - 0.99) <= 0.02);
    CHECK(std::abs(fit.mean_rel_error - 0.07) <= 0.01);

    std::map<std::pair<int, int>, double> lin, zero;
    for (int t : {1, 0, -1}) {
      for (int p : {1, -1}) {
        lin[{t, p}] = 2.0 * p + 1.0 * t;
        zero[{t, p}] = 0.0;
      }
    }
    const auto exact = token_position_fit(lin);
    CHECK(exact.a == doctest::Approx(2.0));
    CHECK(exact.b == doctest::Approx(1.0));
    CHECK(exact.mean_rel_error == doctest::Approx(0.0));
    const auto z = token_position_fit(zero);
    CHECK(z.a == 0.0);
    CHECK(z.b == 0.0);
    CHECK(z.mean_rel_error == 0.0);
    lin.erase({0, -1});
    CHECK_THROWS_AS(token_position_fit(lin), PreconditionError);
  }

  TEST_CASE("score reports serialize") {
    ScoreReport r;
    r.kind = ScoreKind::induction;
    r.grid = {{0.1, 0.5}, {0.9, 0.2}};
    r.n_samples = 3;
    r.seed = 4;
    CHECK(r.top(2) == std::vector<std::pair<int, int>>{{1, 0}, {0, 1}});
    const auto j = r.to_json();
    CHECK(j.at("score_kind") == "induction");
    CHECK(j.at("n") == 3);
    CHECK(j.at("seed") == 4);
    CHECK(j.at("grid").at(1).at(0) == 0.9);
    const auto csv = r.to_csv();
    CHECK(csv.rfind("layer,head,induction\n", 0) == 0);
    CHECK(csv.find("1,0,0.9\n") != std::string::npos);
  }
}
