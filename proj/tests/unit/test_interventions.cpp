#include "support.hpp"

#include "cwb/errors.hpp"
#include "cwb/interventions.hpp"

#include <doctest.h>

#include <algorithm>
#include <cmath>

using namespace cwb;
using cwb::testing::generator;
using cwb::testing::tiny_model;

namespace {

float max_abs_diff(const Tensor& a, const Tensor& b) {
  REQUIRE(a.shape() == b.shape());
  float m = 0;
  for (int64_t i = 0; i < a.numel(); ++i) m = std::max(m, std::abs(a.data()[i] - b.data()[i]));
  return m;
}

const std::vector<PromptSample>& ioi() {
  static const auto s = generator().gen_ioi(24, 101);
  return s;
}

const std::vector<PromptSample>& abc() {
  static const auto s = generator().gen_abc(ioi(), 102);
  return s;
}

const MeanCache& means() {
  static const MeanCache mc = [] {
    const auto ref = generator().gen_abc(generator().gen_ioi_stratified(45, 103), 104);
    return MeanCache::build(*tiny_model(), ref, ablatable_keys(tiny_model()->config));
  }();
  return mc;
}

std::vector<TokenSequence> tokens(std::span<const PromptSample> s) {
  std::vector<TokenSequence> out;
  for (const auto& x : s) out.push_back(x.tokens);
  return out;
}

// Straightforward four-pass path patching on one sample, without position gathering
// or resumption.
Tensor reference_path_patch(const Model& m, const PromptSample& orig, const PromptSample& fresh,
                            const PatchSpec& spec, const EditSet& knock_orig, const EditSet& knock_new) {
  const auto& cfg = m.config;
  std::set<HookKey> all_z;
  for (int l = 0; l < cfg.n_layers; ++l) {
    for (int h = 0; h < cfg.n_heads; ++h) all_z.insert(HookKey::of_head(Site::head_z, l, h));
  }
  ForwardOptions cap;
  cap.capture = all_z;
  for (const auto& snd : spec.senders()) cap.capture.insert(snd.site());
  const auto a = forward_one(m, fresh.tokens, knock_new, cap);
  const auto b = forward_one(m, orig.tokens, knock_orig, cap);

  EditSet c_edits;
  for (const auto& key : all_z) {
    c_edits.freeze_to(key, b.cache);
    for (const auto& snd : spec.senders()) {
      if (snd.kind == NodeKind::attention_head && key.layer == snd.layer && key.head == snd.head) {
        std::vector<std::vector<int>> where{snd.pos.resolve(orig)};
        c_edits.add(Edit::overwrite(key, a.cache.shared(key), Selection::sets(where)));
      }
    }
  }
  for (const auto& snd : spec.senders()) {
    if (snd.kind != NodeKind::mlp) continue;
    std::vector<std::vector<int>> where{snd.pos.resolve(orig)};
    c_edits.add(Edit::overwrite(snd.site(), a.cache.shared(snd.site()), Selection::sets(where)));
  }
  // Ablated MLPs stay ablated when recomputed.
  for (const auto& e : knock_orig.edits()) {
    if (e.key.site == Site::mlp_output) c_edits.add(e);
  }
  ForwardOptions c_opts;
  for (const auto& r : spec.receivers) c_opts.capture.insert(r.hook());
  const auto c = forward_one(m, orig.tokens, c_edits, c_opts);

  EditSet d_edits = knock_orig;
  for (const auto& r : spec.receivers) {
    std::vector<std::vector<int>> where{r.pos.resolve(orig)};
    d_edits.add(Edit::overwrite(r.hook(), c.cache.shared(r.hook()), Selection::sets(where)));
  }
  return forward_one(m, orig.tokens, d_edits).logits;
}

}  // namespace

TEST_SUITE("interventions") {
  TEST_CASE("position specs resolve and parse") {
    const auto& s = ioi()[0];
    CHECK(PositionSpec::of(Role::END).resolve(s) == std::vector<int>{s.length() - 1});
    CHECK(static_cast<int>(PositionSpec::all().resolve(s).size()) == s.length());
    CHECK(static_cast<int>(PositionSpec::except({Role::END, Role::S2}).resolve(s).size()) == s.length() - 2);
    for (std::string text : {"all", "END", "S1+1", "3", "except:END,S2"}) {
      CHECK(PositionSpec::parse(text).str() == text);
    }
    CHECK_THROWS_AS(PositionSpec::parse("middle"), PreconditionError);
    CHECK_THROWS_AS(PositionSpec::at(999).resolve(s), PreconditionError);
  }

  TEST_CASE("empty knockout is the plain forward") {
    const auto out = knockout(*tiny_model(), ioi(), {}, AblationMode::zero(), {8, true});
    const auto direct = forward(*tiny_model(), tokens(std::span(ioi()).first(1)), {}, {});
    CHECK(max_abs_diff(direct.logits, Tensor({1, 1, direct.logits.dim(2)},
                                             std::vector<float>(out.logits.data(),
                                                                out.logits.data() + direct.logits.dim(2)))) < 1e-4f);
    const auto base = baseline(*tiny_model(), ioi());
    for (size_t i = 0; i < ioi().size(); ++i) CHECK(base.rows[i].logit_diff == out.rows[i].logit_diff);
  }

  TEST_CASE("zero-ablating every head leaves the embedding and MLP path") {
    const auto& m = *tiny_model();
    std::vector<NodeRef> heads;
    for (int l = 0; l < m.config.n_layers; ++l) {
      for (int h = 0; h < m.config.n_heads; ++h) heads.push_back(NodeRef::head_at(l, h));
    }
    const auto out = knockout(m, ioi(), heads, AblationMode::zero(), {32, true});

    auto no_attn = std::make_shared<Model>(m);
    for (auto& blk : no_attn->params.blocks) {
      blk.w_out.setZero();
      blk.b_out.setZero();
    }
    const auto ref = knockout(*no_attn, ioi(), {}, AblationMode::zero(), {32, true});
    CHECK(max_abs_diff(out.logits, ref.logits) < 1e-4f);
  }

  TEST_CASE("mean ablation writes the template mean") {
    const auto& m = *tiny_model();
    std::vector<const PromptSample*> rows;
    for (const auto& s : ioi()) {
      if (s.length() == ioi()[0].length()) rows.push_back(&s);
    }
    const NodeRef node = NodeRef::head_at(1, 2, PositionSpec::of(Role::END));
    const auto edits = knockout_edits(m.config, rows, {node}, AblationMode::mean(means()));
    std::vector<TokenSequence> toks;
    for (const auto* r : rows) toks.push_back(r->tokens);
    ForwardOptions o;
    o.capture = {node.site()};
    const auto knocked = forward(m, toks, edits, o);
    const auto plain = forward(m, toks, {}, o);
    const Tensor& z = knocked.cache.at(node.site());
    const Tensor& z0 = plain.cache.at(node.site());
    const int64_t N = z.dim(1), w = z.dim(2);
    for (size_t b = 0; b < rows.size(); ++b) {
      const Tensor& mean = means().mean(rows[b]->template_id, node.site());
      for (int64_t n = 0; n < N; ++n) {
        for (int64_t c = 0; c < w; ++c) {
          const float got = z.data()[(b * N + n) * w + c];
          if (n == rows[b]->pos.end) {
            CHECK(got == mean.data()[n * w + c]);
          } else {
            // Un-ablated positions are recomputed untouched (nothing upstream changed).
            CHECK(got == z0.data()[(b * N + n) * w + c]);
          }
        }
      }
    }
  }

  TEST_CASE("mean ablation requires a covering cache") {
    const auto& m = *tiny_model();
    const auto ref = generator().gen_ioi_stratified(30, 5);
    const auto partial = MeanCache::build(m, ref, {HookKey::mlp(0)});
    CHECK_THROWS_AS(knockout(m, ioi(), {NodeRef::head_at(0, 0)}, AblationMode::mean(partial)), PreconditionError);
    CHECK_NOTHROW(knockout(m, ioi(), {NodeRef::mlp_at(0)}, AblationMode::mean(partial)));
    const auto adv = generator().gen_adversarial(4, 6, IoiGenerator::Variant::extra_io);
    CHECK_THROWS_AS(knockout(m, adv, {NodeRef::mlp_at(0)}, AblationMode::mean(partial)), PreconditionError);
    CHECK_THROWS_AS(knockout(m, ioi(), {NodeRef::head_at(5, 0)}, AblationMode::zero()), InvalidHookError);
  }

  TEST_CASE("null activation patch is the identity") {
    const auto& m = *tiny_model();
    const std::vector<NodeRef> nodes = {NodeRef::head_at(1, 1), NodeRef::head_at(2, 3, PositionSpec::of(Role::END)),
                                        NodeRef::mlp_at(0)};
    const auto patched = activation_patch(m, ioi(), ioi(), nodes, {8, true});
    const auto base = baseline(m, ioi(), {8, true});
    CHECK(max_abs_diff(patched.logits, base.logits) < 1e-4f);
  }

  TEST_CASE("activation patch transplants role-aligned values") {
    const auto& m = *tiny_model();
    const auto pre = generator().gen_prefixed(ioi(), 7);
    const std::vector<NodeRef> nodes = {NodeRef::head_at(2, 0, PositionSpec::of(Role::END))};
    const auto out = activation_patch(m, std::span(ioi()).first(4), std::span(pre).first(4), nodes, {8, true});
    // Reference: capture z on the prefixed prompt and write it in by hand.
    for (int i = 0; i < 4; ++i) {
      ForwardOptions o;
      o.capture = {nodes[0].site()};
      const auto src = forward_one(m, pre[i].tokens, {}, o);
      const Tensor& z = src.cache.at(nodes[0].site());
      const int64_t w = z.dim(2), N = ioi()[i].length();
      auto vals = std::make_shared<Tensor>(std::vector<int64_t>{1, N, w});
      std::copy_n(z.data() + pre[i].pos.end * w, w, vals->data() + ioi()[i].pos.end * w);
      EditSet e;
      e.add(Edit::overwrite(nodes[0].site(), vals, Selection::at(ioi()[i].pos.end)));
      const auto ref = forward_one(m, ioi()[i].tokens, e);
      const float* got = out.logits.data() + i * out.logits.dim(1);
      float worst = 0;
      for (int64_t v = 0; v < out.logits.dim(1); ++v) worst = std::max(worst, std::abs(got[v] - ref.logits.data()[v]));
      CHECK(worst < 1e-5f);
    }
    std::vector<NodeRef> all_pos = {NodeRef::head_at(2, 0)};
    CHECK_THROWS_AS(activation_patch(m, ioi(), pre, all_pos), PreconditionError);
  }

  TEST_CASE("null path patch is the identity") {
    const auto& m = *tiny_model();
    const PatchSpec spec{NodeRef::head_at(0, 1, PositionSpec::of(Role::END)),
                         {ReceiverRef::final_residual(PositionSpec::of(Role::END)),
                          ReceiverRef::query(2, 0, PositionSpec::of(Role::END))}};
    PathPatchOptions o;
    o.keep_logits = true;
    const auto patched = path_patch(m, ioi(), ioi(), spec, o);
    const auto base = baseline(m, ioi(), {32, true});
    CHECK(max_abs_diff(patched.logits, base.logits) < 1e-4f);
  }

  TEST_CASE("path patch matches the unoptimized four-pass procedure") {
    const auto& m = *tiny_model();
    struct Case {
      PatchSpec spec;
      std::vector<NodeRef> knock;
    };
    const std::vector<Case> cases = {
        {{NodeRef::head_at(1, 2, PositionSpec::of(Role::END)), {ReceiverRef::final_residual(PositionSpec::of(Role::END))}},
         {}},
        {{NodeRef::head_at(0, 3, PositionSpec::of(Role::S2)),
          {ReceiverRef::value(2, 1, PositionSpec::of(Role::S2)), ReceiverRef::key(1, 0, PositionSpec::all())}},
         {}},
        {{NodeRef::head_at(0, 0), {ReceiverRef::query(2, 2, PositionSpec::of(Role::END)),
                                   ReceiverRef::final_residual(PositionSpec::of(Role::END))}},
         {NodeRef::mlp_at(1, PositionSpec::of(Role::END)), NodeRef::head_at(1, 3)}},
        {{NodeRef::head_at(1, 0, PositionSpec::of(Role::S1_plus_1)),
          {ReceiverRef::query(2, 3, PositionSpec::of(Role::END))}},
         {NodeRef::mlp_at(2), NodeRef::head_at(2, 3, PositionSpec::of(Role::END))}},
        // Joint senders in different layers and at different positions.
        {{NodeRef::head_at(1, 1, PositionSpec::of(Role::END)),
          {ReceiverRef::query(2, 0, PositionSpec::of(Role::END)), ReceiverRef::query(2, 1, PositionSpec::of(Role::END))},
          {NodeRef::head_at(0, 2, PositionSpec::of(Role::S2)), NodeRef::head_at(1, 3, PositionSpec::of(Role::END))}},
         {}},
        // MLP senders, alone and with a head.
        {{NodeRef::mlp_at(1, PositionSpec::of(Role::END)), {ReceiverRef::final_residual(PositionSpec::of(Role::END))}},
         {}},
        {{NodeRef::mlp_at(0), {ReceiverRef::query(2, 2, PositionSpec::of(Role::END))},
          {NodeRef::head_at(1, 0, PositionSpec::of(Role::S2))}},
         {NodeRef::head_at(1, 3)}},
    };
    for (const auto& c : cases) {
      CAPTURE(c.spec.sender.str());
      PathPatchOptions o;
      o.keep_logits = true;
      o.batch_size = 5;
      o.knockout = c.knock;
      o.knockout_mode = AblationMode::mean(means());
      const auto n = 6;
      const auto got = path_patch(m, std::span(ioi()).first(n), std::span(abc()).first(n), c.spec, o);
      for (int i = 0; i < n; ++i) {
        const PromptSample* orow[] = {&ioi()[i]};
        const PromptSample* nrow[] = {&abc()[i]};
        const auto ko = knockout_edits(m.config, orow, c.knock, o.knockout_mode);
        const auto kn = knockout_edits(m.config, nrow, c.knock, o.knockout_mode);
        const Tensor ref = reference_path_patch(m, ioi()[i], abc()[i], c.spec, ko, kn);
        float worst = 0;
        const int64_t V = ref.dim(2);
        for (int64_t v = 0; v < V; ++v) worst = std::max(worst, std::abs(got.logits.data()[i * V + v] - ref.data()[v]));
        CHECK(worst < 1e-4f);
      }
      // The sender actually changes something.
      const auto base = baseline(m, std::span(ioi()).first(n), {32, true});
      CHECK(max_abs_diff(got.logits, base.logits) > 1e-4f);
    }
  }

  TEST_CASE("path patch exposes pass D activations") {
    const auto& m = *tiny_model();
    const PatchSpec spec{NodeRef::head_at(1, 1, PositionSpec::of(Role::END)),
                         {ReceiverRef::query(2, 0, PositionSpec::of(Role::END))}};
    const auto pat = HookKey::of_head(Site::head_pattern, 2, 0);
    PathPatchOptions o;
    o.batch_size = 4;
    o.capture = {pat};
    const auto n = 6;
    int seen = 0;
    o.inspect = [&](const std::vector<int>& idx, const ActivationCache& cache) {
      const Tensor& p = cache.at(pat);
      CHECK(p.dim(0) == static_cast<int64_t>(idx.size()));
      seen += static_cast<int>(idx.size());
    };
    path_patch(m, std::span(ioi()).first(n), std::span(abc()).first(n), spec, o);
    CHECK(seen == n);
    o.capture = {HookKey::of_head(Site::head_pattern, 1, 0)};
    CHECK_THROWS_AS(path_patch(m, std::span(ioi()).first(n), std::span(abc()).first(n), spec, o),
                    PreconditionError);
    const PatchSpec dup{NodeRef::head_at(1, 1), {ReceiverRef::query(2, 0, PositionSpec::of(Role::END))},
                        {NodeRef::head_at(1, 1, PositionSpec::of(Role::END))}};
    CHECK_THROWS_AS(dup.validate(m.config), PreconditionError);
    const PatchSpec late{NodeRef::head_at(0, 1), {ReceiverRef::query(2, 0, PositionSpec::of(Role::END))},
                         {NodeRef::head_at(2, 1)}};
    CHECK_THROWS_AS(late.validate(m.config), PreconditionError);
  }

  TEST_CASE("path patch preconditions") {
    const auto& m = *tiny_model();
    const PatchSpec upstream{NodeRef::head_at(2, 0, PositionSpec::of(Role::END)),
                             {ReceiverRef::query(1, 0, PositionSpec::of(Role::END))}};
    CHECK_THROWS_AS(path_patch(m, ioi(), abc(), upstream), PreconditionError);
    const PatchSpec same_layer{NodeRef::head_at(1, 0), {ReceiverRef::query(1, 1, PositionSpec::of(Role::END))}};
    CHECK_THROWS_AS(path_patch(m, ioi(), abc(), same_layer), PreconditionError);
    const auto pre = generator().gen_prefixed(ioi(), 1);
    const PatchSpec ok{NodeRef::head_at(0, 0), {ReceiverRef::final_residual(PositionSpec::of(Role::END))}};
    CHECK_THROWS_AS(path_patch(m, ioi(), pre, ok), PreconditionError);
  }

  TEST_CASE("sweep entries equal single path patches and are thread-order independent") {
    const auto& m = *tiny_model();
    const std::vector<ReceiverRef> recv = {ReceiverRef::query(2, 1, PositionSpec::of(Role::END)),
                                           ReceiverRef::final_residual(PositionSpec::of(Role::END))};
    PathPatchOptions o;
    o.batch_size = 7;
    o.threads = 1;
    const auto one = sweep(m, ioi(), abc(), recv, PositionSpec::of(Role::END), 20, o);
    o.threads = 3;
    const auto three = sweep(m, ioi(), abc(), recv, PositionSpec::of(Role::END), 20, o);
    CHECK(one.matrix == three.matrix);
    CHECK(one.matrix.size() == 3);
    CHECK(one.matrix[0].size() == 4);

    const auto base = baseline(m, std::span(ioi()).first(20)).mean_logit_diff();
    CHECK(one.baseline == doctest::Approx(base).epsilon(1e-9));
    // Layer 2 senders only reach the final residual.
    const PatchSpec s21{NodeRef::head_at(2, 1, PositionSpec::of(Role::END)), {recv[1]}};
    const double d21 = path_patch(m, std::span(ioi()).first(20), std::span(abc()).first(20), s21).mean_logit_diff() - base;
    CHECK(one.matrix[2][1] == doctest::Approx(d21).epsilon(1e-6));
    const PatchSpec s03{NodeRef::head_at(0, 3, PositionSpec::of(Role::END)), recv};
    const double d03 = path_patch(m, std::span(ioi()).first(20), std::span(abc()).first(20), s03).mean_logit_diff() - base;
    CHECK(one.matrix[0][3] == doctest::Approx(d03).epsilon(1e-6));

    const auto j = one.to_json();
    CHECK(j["n_samples"] == 20);
    CHECK(j["position_role"] == "END");
    CHECK(j["matrix"].size() == 3);
    CHECK(one.ranked().size() == 12);
  }

  TEST_CASE("final-residual path patch is the sender's direct effect") {
    // Without the last MLP, patching a last-layer head into the final residual only
    // moves the END residual by the difference of that head's outputs. The head's
    // output is scaled down so that the first-order (frozen scale) estimate applies.
    auto m = std::make_shared<Model>(*tiny_model());
    auto& last = m->params.blocks.back();
    last.w_proj.setZero();
    last.b_proj.setZero();
    last.w_out *= 0.05f;
    last.b_out *= 0.05f;
    const int L = m->config.n_layers - 1;
    const PatchSpec spec{NodeRef::head_at(L, 2, PositionSpec::of(Role::END)),
                         {ReceiverRef::final_residual(PositionSpec::of(Role::END))}};
    PathPatchOptions o;
    o.keep_logits = true;
    const int n = 8;
    const auto got = path_patch(*m, std::span(ioi()).first(n), std::span(abc()).first(n), spec, o);
    const auto base = baseline(*m, std::span(ioi()).first(n));
    double err = 0, mag = 0;
    for (int i = 0; i < n; ++i) {
      const HookKey hout = HookKey::of_head(Site::head_output, L, 2);
      ForwardOptions cap;
      cap.capture = {hout, HookKey::resid_final()};
      const auto a = forward_one(*m, abc()[i].tokens, {}, cap);
      const auto b = forward_one(*m, ioi()[i].tokens, {}, cap);
      const int64_t d = m->config.d_model, end = ioi()[i].pos.end;
      RowVector delta(d), resid(d);
      for (int64_t c = 0; c < d; ++c) {
        delta[c] = a.cache.at(hout).data()[end * d + c] - b.cache.at(hout).data()[end * d + c];
        resid[c] = b.cache.at(HookKey::resid_final()).data()[end * d + c];
      }
      const auto& s = ioi()[i];
      // Exact: live final layer norm on the shifted residual.
      const RowVector shifted = resid + delta;
      const float exact = unembed_projection(*m, shifted, s.io_name, true) -
                          unembed_projection(*m, shifted, s.s_name, true);
      const float bias_io = m->params.ln_final.bias.dot(m->params.unembed().row(s.io_name));
      const float bias_s = m->params.ln_final.bias.dot(m->params.unembed().row(s.s_name));
      CHECK(got.rows[i].logit_diff == doctest::Approx(exact + bias_io - bias_s).epsilon(1e-4));
      // First order in the head's output, including the change of the layer-norm scale.
      const Eigen::RowVectorXd r = resid.cast<double>(), dl = delta.cast<double>();
      const Eigen::RowVectorXd u = r.array() - r.mean(), e = dl.array() - dl.mean();
      const double var = u.array().square().mean() + m->config.layer_norm_epsilon, sd = std::sqrt(var);
      const Eigen::RowVectorXd g = m->params.ln_final.gain.cast<double>();
      const Eigen::RowVectorXd dir =
          (m->params.unembed().row(s.io_name) - m->params.unembed().row(s.s_name)).cast<double>();
      const double gu = (g.array() * u.array() * dir.array()).sum(), ge = (g.array() * e.array() * dir.array()).sum();
      const double linear = ge / sd - gu / sd * ((u.array() * e.array()).mean() / var);
      const double actual = got.rows[i].logit_diff - base.rows[i].logit_diff;
      err += std::abs(linear - actual);
      mag += std::abs(actual);
    }
    CHECK(mag > 0);
    CHECK(err / mag < 0.01);
  }
}
