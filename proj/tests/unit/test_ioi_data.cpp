#include "support.hpp"

#include "cwb/errors.hpp"
#include "cwb/ioi_data.hpp"

#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <set>

#include <unistd.h>

using namespace cwb;
using cwb::testing::generator;
using cwb::testing::tokenizer;

namespace {

int count(const TokenSequence& t, TokenId id) { return static_cast<int>(std::count(t.begin(), t.end(), id)); }

// Chi-square critical value, 14 degrees of freedom, p = 0.01.
constexpr double kChi2Crit14 = 29.141;

}  // namespace

TEST_SUITE("ioi_data") {
  TEST_CASE("templates in BABA form end with the answer slot") {
    for (const char* t : kTemplates) {
      const std::string s = t;
      CAPTURE(s);
      CHECK(s.size() > 4);
      CHECK(s.substr(s.size() - 4) == " [A]");
      CHECK(s.find("[B]") < s.find("[A]"));
    }
    CHECK(sentence_break_templates() == std::vector<int>{0, 1, 2, 3, 10, 11, 12, 13, 14});
  }

  TEST_CASE("known sample layout") {
    const auto& w = generator().words();
    const int mary = static_cast<int>(std::find(w.names.begin(), w.names.end(), "Mary") - w.names.begin());
    const int john = static_cast<int>(std::find(w.names.begin(), w.names.end(), "John") - w.names.begin());
    REQUIRE(mary < static_cast<int>(w.names.size()));
    const auto s = generator().make(0, Pattern::BABA, mary, john, 0, 0);
    CHECK(tokenizer().decode(s.tokens) == "Then, John and Mary went to the store. John gave a ring to");
    CHECK(s.pos.s1 == 2);
    CHECK(s.pos.io == 4);
    CHECK(s.pos.s1_plus_1 == 3);
    CHECK(s.tokens[s.pos.end] == *tokenizer().single_token(" to"));
    const auto a = generator().make(0, Pattern::ABBA, mary, john, 0, 0);
    CHECK(tokenizer().decode(a.tokens) == "Then, Mary and John went to the store. John gave a ring to");
    CHECK(a.pos.io == 2);
    CHECK(a.pos.s1 == 4);
  }

  TEST_CASE("generated samples satisfy the invariants") {
    const auto samples = generator().gen_ioi(1000, 1);
    int abba = 0;
    for (const auto& s : samples) {
      CHECK_NOTHROW(check_invariants(s));
      CHECK(count(s.tokens, s.io_name) == 1);
      CHECK(count(s.tokens, s.s_name) == 2);
      abba += s.pattern == Pattern::ABBA;
      if (s.pattern == Pattern::ABBA) {
        CHECK(s.pos.io < s.pos.s1);
      } else {
        CHECK(s.pos.s1 < s.pos.io);
      }
    }
    CHECK(abba > 430);
    CHECK(abba < 570);
  }

  TEST_CASE("template frequencies are uniform") {
    const auto samples = generator().gen_ioi(15000, 2);
    std::array<int, kNumTemplates> freq{};
    for (const auto& s : samples) ++freq[s.template_id];
    double chi2 = 0;
    const double expected = 15000.0 / kNumTemplates;
    for (int f : freq) chi2 += (f - expected) * (f - expected) / expected;
    CHECK(chi2 < kChi2Crit14);
  }

  TEST_CASE("generation is deterministic in the seed") {
    const auto a = generator().gen_ioi(20, 5), b = generator().gen_ioi(20, 5), c = generator().gen_ioi(20, 6);
    bool all_same = true, any_diff = false;
    for (size_t i = 0; i < a.size(); ++i) {
      all_same &= a[i].tokens == b[i].tokens;
      any_diff |= a[i].tokens != c[i].tokens;
    }
    CHECK(all_same);
    CHECK(any_diff);
  }

  TEST_CASE("ABC samples keep the layout with three fresh names") {
    const auto ioi = generator().gen_ioi(300, 3);
    const auto abc = generator().gen_abc(ioi, 4);
    REQUIRE(abc.size() == ioi.size());
    for (size_t i = 0; i < ioi.size(); ++i) {
      const auto& o = ioi[i];
      const auto& a = abc[i];
      REQUIRE(a.length() == o.length());
      const std::set<TokenId> fresh{a.tokens[o.pos.io], a.tokens[o.pos.s1], a.tokens[o.pos.s2]};
      CHECK(fresh.size() == 3);
      CHECK_FALSE(fresh.count(o.io_name));
      CHECK_FALSE(fresh.count(o.s_name));
      for (int p = 0; p < o.length(); ++p) {
        if (p != o.pos.io && p != o.pos.s1 && p != o.pos.s2) CHECK(a.tokens[p] == o.tokens[p]);
      }
      CHECK(a.template_id == o.template_id);
      CHECK(a.pos == o.pos);
    }
  }

  TEST_CASE("signal flips reach the six states") {
    const auto& w = generator().words();
    const auto base = generator().gen_ioi(50, 9);
    using F = Flip;
    const std::vector<std::pair<std::vector<Flip>, SignalState>> table = {
        {{F::RandomNames}, {0, 1}},
        {{F::Swap_IO_S1}, {1, -1}},
        {{F::Replace_IO_by_S}, {-1, -1}},
        {{F::RandomNames, F::Swap_IO_S1}, {0, -1}},
        {{F::Swap_IO_S1, F::Replace_IO_by_S}, {-1, 1}},
        {{F::RandomNames, F::Replace_IO_by_S}, {0, -1}},
        {{F::RandomNames, F::Swap_IO_S1, F::Replace_IO_by_S}, {0, 1}},
    };
    std::set<std::pair<int, int>> reached{{1, 1}};  // the unflipped prompt
    for (const auto& s : base) {
      for (const auto& [flips, want] : table) {
        const auto f = signal_flip(s, flips, w, 17);
        CHECK(signal_state(s, f) == want);
        CHECK(f.length() == s.length());
        CHECK_NOTHROW(check_invariants(f));
        reached.insert({want.s_tok, want.s_pos});
      }
    }
    CHECK(reached.size() == 6);
    CHECK_THROWS_AS(signal_flip(base[0], {}, w, 1), PreconditionError);
  }

  TEST_CASE("swapping IO and S1 twice is the identity") {
    const auto& w = generator().words();
    for (const auto& s : generator().gen_ioi(50, 10)) {
      const auto twice = signal_flip(signal_flip(s, {Flip::Swap_IO_S1}, w, 1), {Flip::Swap_IO_S1}, w, 1);
      CHECK(twice.tokens == s.tokens);
      CHECK(twice.pos == s.pos);
    }
  }

  TEST_CASE("adversarial prompts repeat one name") {
    for (auto v : {IoiGenerator::Variant::extra_io, IoiGenerator::Variant::extra_s}) {
      const auto samples = generator().gen_adversarial(200, 11, v);
      const auto allowed = sentence_break_templates();
      for (const auto& s : samples) {
        CHECK(std::find(allowed.begin(), allowed.end(), s.template_id) != allowed.end());
        CHECK_NOTHROW(check_invariants(s));
        if (v == IoiGenerator::Variant::extra_io) {
          CHECK(count(s.tokens, s.io_name) == 2);
          CHECK(count(s.tokens, s.s_name) == 2);
        } else {
          CHECK(count(s.tokens, s.io_name) == 1);
          CHECK(count(s.tokens, s.s_name) == 3);
        }
      }
    }
  }

  TEST_CASE("prefixed prompts add a third name and keep roles") {
    const auto ioi = generator().gen_ioi(100, 12);
    const auto pre = generator().gen_prefixed(ioi, 13);
    for (size_t i = 0; i < ioi.size(); ++i) {
      const auto& a = ioi[i];
      const auto& b = pre[i];
      CHECK_NOTHROW(check_invariants(b));
      const int shift = b.length() - a.length();
      CHECK(shift > 0);
      CHECK(b.pos.io - a.pos.io == shift);
      CHECK(b.pos.s2 - a.pos.s2 == shift);
      CHECK(count(b.tokens, b.io_name) == 1);
    }
  }

  TEST_CASE("repeated random sequences") {
    const auto seqs = gen_repeated_random(50, 8, 3, 50257);
    REQUIRE(seqs.size() == 8);
    for (const auto& s : seqs) {
      REQUIRE(s.size() == 100);
      CHECK(std::equal(s.begin(), s.begin() + 50, s.begin() + 50));
      for (auto t : s) CHECK((t >= 0 && t < 50257));
    }
    CHECK(seqs[0] != seqs[1]);
  }

  TEST_CASE("word lists reject multi-token entries") {
    auto j = cwb::testing::read_json(cwb::testing::source_dir() / "config/word_lists.json");
    j["names"].push_back("Bartholomew-Smith");
    auto w = WordLists::from_json(j);
    try {
      w.verify(tokenizer());
      FAIL("expected ConfigError");
    } catch (const ConfigError& e) {
      CHECK(std::string(e.what()).find("Bartholomew-Smith") != std::string::npos);
    }
  }

  TEST_CASE("JSONL round trip") {
    const auto samples = generator().gen_ioi(10, 14);
    const auto path = std::filesystem::temp_directory_path() / ("cwb_ioi_" + std::to_string(::getpid()) + ".jsonl");
    write_jsonl(path, samples, &tokenizer());
    const auto back = read_jsonl(path);
    std::filesystem::remove(path);
    REQUIRE(back.size() == samples.size());
    for (size_t i = 0; i < back.size(); ++i) {
      CHECK(back[i].tokens == samples[i].tokens);
      CHECK(back[i].pos == samples[i].pos);
      CHECK(back[i].template_id == samples[i].template_id);
      CHECK(back[i].pattern == samples[i].pattern);
    }
  }

  TEST_CASE("BOS prefix shifts every role by one") {
    GeneratorOptions o;
    o.prepend_bos = true;
    const IoiGenerator g(tokenizer(), generator().words(), o);
    const auto a = generator().gen_ioi(5, 15), b = g.gen_ioi(5, 15);
    for (size_t i = 0; i < a.size(); ++i) {
      CHECK(b[i].tokens.front() == 50256);
      CHECK(b[i].pos.io == a[i].pos.io + 1);
      CHECK(b[i].pos.end == a[i].pos.end + 1);
    }
  }

  TEST_CASE("mean cache") {
    const auto model = cwb::testing::tiny_model();
    const auto ref = generator().gen_ioi_stratified(60, 21);
    std::vector<HookKey> keys = {HookKey::of_head(Site::head_z, 1, 2), HookKey::mlp(0),
                                 HookKey::of_head(Site::head_pattern, 2, 0)};
    const auto mc = MeanCache::build(*model, ref, keys, 7);
    CHECK(mc.templates().size() == kNumTemplates);

    // Brute force mean for one template.
    std::vector<TokenSequence> group;
    for (const auto& s : ref) {
      if (s.template_id == 4) group.push_back(s.tokens);
    }
    CHECK(mc.group_size(4) == static_cast<int>(group.size()));
    ForwardOptions o;
    o.capture = {keys[0]};
    const auto r = forward(*model, group, {}, o);
    const Tensor& z = r.cache.at(keys[0]);
    const Tensor& m = mc.mean(4, keys[0]);
    REQUIRE(m.dim(0) == z.dim(1));
    double worst = 0;
    const int64_t per = z.numel() / z.dim(0);
    for (int64_t i = 0; i < per; ++i) {
      double acc = 0;
      for (int64_t b = 0; b < z.dim(0); ++b) acc += z.data()[b * per + i];
      worst = std::max(worst, std::abs(acc / z.dim(0) - m.data()[i]));
    }
    CHECK(worst < 1e-6);

    // Averaged attention patterns stay row-stochastic.
    const Tensor& p = mc.mean(4, keys[2]);
    const auto rows = p.as_matrix();
    for (int i = 0; i < rows.rows(); ++i) CHECK(rows.row(i).sum() == doctest::Approx(1.0).epsilon(1e-5));

    CHECK(mc.covers(4, keys[1]));
    CHECK_FALSE(mc.covers(4, HookKey::mlp(1)));
    CHECK_THROWS_AS(mc.mean(4, HookKey::mlp(1)), PreconditionError);

    // Groups must share one length.
    auto mixed = ref;
    mixed.push_back(generator().gen_adversarial(1, 3, IoiGenerator::Variant::extra_s)[0]);
    mixed.back().template_id = 0;
    CHECK_THROWS_AS(MeanCache::build(*model, mixed, keys), PreconditionError);
  }
}
