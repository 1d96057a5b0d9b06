#include "cwb/ioi_data.hpp"

#include "cwb/errors.hpp"

#include <algorithm>
#include <fstream>
#include <set>

namespace cwb {

using nlohmann::json;

const std::array<const char*, kNumTemplates> kTemplates = {
    "Then, [B] and [A] went to the [PLACE]. [B] gave a [OBJECT] to [A]",
    "Then, [B] and [A] had a lot of fun at the [PLACE]. [B] gave a [OBJECT] to [A]",
    "Then, [B] and [A] were working at the [PLACE]. [B] decided to give a [OBJECT] to [A]",
    "Then, [B] and [A] were thinking about going to the [PLACE]. [B] wanted to give a [OBJECT] to [A]",
    "Then, [B] and [A] had a long argument, and afterwards [B] said to [A]",
    "After [B] and [A] went to the [PLACE], [B] gave a [OBJECT] to [A]",
    "When [B] and [A] got a [OBJECT] at the [PLACE], [B] decided to give it to [A]",
    "When [B] and [A] got a [OBJECT] at the [PLACE], [B] decided to give the [OBJECT] to [A]",
    "While [B] and [A] were working at the [PLACE], [B] gave a [OBJECT] to [A]",
    "While [B] and [A] were commuting to the [PLACE], [B] gave a [OBJECT] to [A]",
    "After the lunch, [B] and [A] went to the [PLACE]. [B] gave a [OBJECT] to [A]",
    "Afterwards, [B] and [A] went to the [PLACE]. [B] gave a [OBJECT] to [A]",
    "Then, [B] and [A] had a long argument. Afterwards [B] said to [A]",
    "The [PLACE] [B] and [A] went to had a [OBJECT]. [B] gave it to [A]",
    "Friends [B] and [A] found a [OBJECT] at the [PLACE]. [B] gave it to [A]",
};

std::vector<int> sentence_break_templates() {
  std::vector<int> out;
  for (int t = 0; t < kNumTemplates; ++t) {
    if (std::string_view(kTemplates[t]).find(". ") != std::string_view::npos) out.push_back(t);
  }
  return out;
}

namespace {

constexpr std::pair<Role, const char*> kRoleNames[] = {
    {Role::IO, "IO"}, {Role::S1, "S1"}, {Role::S1_plus_1, "S1+1"}, {Role::S2, "S2"}, {Role::END, "END"}};

void replace_all(std::string& s, const std::string& from, const std::string& to) {
  for (size_t p = s.find(from); p != std::string::npos; p = s.find(from, p + to.size())) {
    s.replace(p, from.size(), to);
  }
}

TokenId pick_other_name(Rng& rng, const WordLists& w, const std::set<TokenId>& avoid) {
  for (;;) {
    const TokenId id = w.name_ids[rng.uniform_index(w.name_ids.size())];
    if (!avoid.count(id)) return id;
  }
}

}  // namespace

const char* role_name(Role r) {
  for (auto& [role, name] : kRoleNames) {
    if (role == r) return name;
  }
  return "?";
}

std::optional<Role> parse_role(const std::string& s) {
  for (auto& [role, name] : kRoleNames) {
    if (s == name) return role;
  }
  if (s == "S1_plus_1" || s == "S1p1") return Role::S1_plus_1;
  return std::nullopt;
}

int RolePositions::at(Role r) const {
  switch (r) {
    case Role::IO: return io;
    case Role::S1: return s1;
    case Role::S1_plus_1: return s1_plus_1;
    case Role::S2: return s2;
    case Role::END: return end;
  }
  return -1;
}

json PromptSample::to_json(const Tokenizer* tok) const {
  json j = {{"tokens", tokens},
            {"template_id", template_id},
            {"pattern", pattern == Pattern::ABBA ? "ABBA" : "BABA"},
            {"io_name", io_name},
            {"s_name", s_name},
            {"positions", {{"IO", pos.io}, {"S1", pos.s1}, {"S1+1", pos.s1_plus_1}, {"S2", pos.s2}, {"END", pos.end}}},
            {"dist", dist},
            {"place", place},
            {"object", object}};
  if (tok) {
    j["text"] = tok->decode(tokens);
    std::vector<std::string> pieces;
    for (TokenId t : tokens) pieces.push_back(tok->token_bytes(t));
    j["token_strings"] = pieces;
  }
  return j;
}

PromptSample PromptSample::from_json(const json& j) {
  PromptSample s;
  s.tokens = j.at("tokens").get<TokenSequence>();
  s.template_id = j.at("template_id");
  s.pattern = j.at("pattern") == "ABBA" ? Pattern::ABBA : Pattern::BABA;
  s.io_name = j.at("io_name");
  s.s_name = j.at("s_name");
  const auto& p = j.at("positions");
  s.pos = {p.at("IO"), p.at("S1"), p.at("S1+1"), p.at("S2"), p.at("END")};
  s.dist = j.value("dist", "ioi");
  s.place = j.value("place", -1);
  s.object = j.value("object", -1);
  return s;
}

WordLists WordLists::from_json(const json& j) {
  WordLists w;
  try {
    w.names = j.at("names").get<std::vector<std::string>>();
    w.places = j.at("places").get<std::vector<std::string>>();
    w.objects = j.at("objects").get<std::vector<std::string>>();
    w.fillers = j.at("fillers").get<std::vector<std::string>>();
  } catch (const json::exception& e) {
    throw ConfigError(std::string("bad word list: ") + e.what());
  }
  if (w.names.size() < 5 || w.places.empty() || w.objects.empty() || w.fillers.empty()) {
    throw ConfigError("word list needs at least 5 names and one place, object and filler");
  }
  for (const auto& f : w.fillers) {
    if (f.find("[A]") == std::string::npos) throw ConfigError("filler without [A] slot: " + f);
  }
  return w;
}

WordLists WordLists::load(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open word list " + path.string());
  try {
    return from_json(json::parse(in));
  } catch (const json::parse_error& e) {
    throw ConfigError("bad word list " + path.string() + ": " + e.what());
  }
}

void WordLists::verify(const Tokenizer& tok) {
  auto ids = [&](const std::vector<std::string>& words, const char* kind) {
    std::vector<TokenId> out;
    std::set<TokenId> seen;
    for (const auto& w : words) {
      const auto id = tok.single_token(" " + w);
      if (!id) throw ConfigError(std::string(kind) + " '" + w + "' is not a single token with a leading space");
      if (!seen.insert(*id).second) throw ConfigError(std::string("duplicate ") + kind + " '" + w + "'");
      out.push_back(*id);
    }
    return out;
  };
  name_ids = ids(names, "name");
  place_ids = ids(places, "place");
  object_ids = ids(objects, "object");
}

RolePositions resolve_positions(const TokenSequence& tokens, TokenId io, TokenId s) {
  RolePositions p;
  p.end = static_cast<int>(tokens.size()) - 1;
  for (int i = 0; i < p.end; ++i) {
    if (tokens[i] == io && p.io < 0) p.io = i;
    if (tokens[i] == s) {
      if (p.s1 < 0) p.s1 = i;
      p.s2 = i;
    }
  }
  p.s1_plus_1 = p.s1 >= 0 ? p.s1 + 1 : -1;
  return p;
}

void check_invariants(const PromptSample& s) {
  const auto& p = s.pos;
  const int n = s.length();
  auto fail = [&](const std::string& what) { throw std::logic_error("prompt sample invariant violated: " + what); };
  if (p.end != n - 1) fail("END is not the last token");
  if (p.io < 0 || p.io >= n || s.tokens[p.io] != s.io_name) fail("IO position does not hold io_name");
  if (p.s1 < 0 || p.s2 <= p.s1 || p.s2 >= p.end) fail("S1 < S2 < END does not hold");
  if (s.tokens[p.s1] != s.s_name || s.tokens[p.s2] != s.s_name) fail("S positions do not hold s_name");
  if (p.s1_plus_1 != p.s1 + 1) fail("S1+1 != S1 + 1");
  if (s.io_name == s.s_name) fail("io and s names coincide");
}

// ---------------------------------------------------------------------------

IoiGenerator::IoiGenerator(const Tokenizer& tok, WordLists words, GeneratorOptions opts)
    : tok_(tok), words_(std::move(words)), opts_(opts) {
  words_.verify(tok_);
}

PromptSample IoiGenerator::build(const std::string& text, int template_id, Pattern pattern, TokenId io, TokenId s,
                                 const std::string& dist) const {
  PromptSample out;
  if (opts_.prepend_bos) out.tokens.push_back(opts_.bos_id);
  const auto body = tok_.encode(text);
  out.tokens.insert(out.tokens.end(), body.begin(), body.end());
  out.template_id = template_id;
  out.pattern = pattern;
  out.io_name = io;
  out.s_name = s;
  out.dist = dist;
  out.pos = resolve_positions(out.tokens, io, s);
  check_invariants(out);
  return out;
}

namespace {

// Fills a template; the trailing " [A]" (the answer) is dropped so the prompt ends at END.
std::string fill_template(int template_id, Pattern pattern, const std::string& io, const std::string& s,
                          const std::string& place, const std::string& object) {
  std::string t = kTemplates.at(template_id);
  const std::string tail = " [A]";
  t.erase(t.size() - tail.size());
  if (pattern == Pattern::ABBA) {
    // Swap the first instances of [B] and [A].
    const size_t b = t.find("[B]"), a = t.find("[A]");
    t.replace(a, 3, "[X]");
    t.replace(b, 3, "[A]");
    t.replace(a, 3, "[B]");
  }
  replace_all(t, "[A]", io);
  replace_all(t, "[B]", s);
  replace_all(t, "[PLACE]", place);
  replace_all(t, "[OBJECT]", object);
  return t;
}

}  // namespace

PromptSample IoiGenerator::make(int template_id, Pattern pattern, int io_idx, int s_idx, int place_idx,
                                int object_idx) const {
  if (template_id < 0 || template_id >= kNumTemplates) throw PreconditionError("template id out of range");
  const auto& w = words_;
  const std::string text = fill_template(template_id, pattern, w.names.at(io_idx), w.names.at(s_idx),
                                         w.places.at(place_idx), w.objects.at(object_idx));
  PromptSample out = build(text, template_id, pattern, w.name_ids[io_idx], w.name_ids[s_idx], "ioi");
  out.place = w.place_ids[place_idx];
  out.object = w.object_ids[object_idx];
  return out;
}

PromptSample IoiGenerator::random_sample(Rng& rng, int template_id) const {
  const Pattern pattern = rng.bernoulli(opts_.abba_fraction) ? Pattern::ABBA : Pattern::BABA;
  const auto names = rng.sample_distinct(words_.names.size(), 2);
  const int place = static_cast<int>(rng.uniform_index(words_.places.size()));
  const int object = static_cast<int>(rng.uniform_index(words_.objects.size()));
  return make(template_id, pattern, static_cast<int>(names[0]), static_cast<int>(names[1]), place, object);
}

std::vector<PromptSample> IoiGenerator::gen_ioi(int n, uint64_t seed) const {
  if (n < 0) throw PreconditionError("n must be non-negative");
  Rng rng(seed);
  std::vector<PromptSample> out;
  out.reserve(n);
  for (int i = 0; i < n; ++i) {
    const int t = static_cast<int>(rng.uniform_index(kNumTemplates));
    out.push_back(random_sample(rng, t));
  }
  return out;
}

std::vector<PromptSample> IoiGenerator::gen_ioi_stratified(int n, uint64_t seed) const {
  if (n < 0) throw PreconditionError("n must be non-negative");
  Rng rng(seed);
  std::vector<PromptSample> out;
  out.reserve(n);
  for (int i = 0; i < n; ++i) out.push_back(random_sample(rng, i % kNumTemplates));
  return out;
}

std::vector<PromptSample> IoiGenerator::gen_abc(const std::vector<PromptSample>& ioi, uint64_t seed) const {
  Rng rng(seed);
  std::vector<PromptSample> out;
  out.reserve(ioi.size());
  for (const auto& src : ioi) {
    std::set<TokenId> avoid{src.io_name, src.s_name};
    const TokenId a = pick_other_name(rng, words_, avoid);
    avoid.insert(a);
    const TokenId b = pick_other_name(rng, words_, avoid);
    avoid.insert(b);
    const TokenId c = pick_other_name(rng, words_, avoid);
    PromptSample s = src;
    s.tokens[src.pos.io] = a;
    s.tokens[src.pos.s1] = b;
    s.tokens[src.pos.s2] = c;
    s.io_name = a;
    s.s_name = b;
    s.dist = "abc";
    out.push_back(std::move(s));
  }
  return out;
}

std::vector<PromptSample> IoiGenerator::gen_adversarial(int n, uint64_t seed, Variant v) const {
  if (n < 0) throw PreconditionError("n must be non-negative");
  const auto allowed = sentence_break_templates();
  Rng rng(seed);
  std::vector<PromptSample> out;
  out.reserve(n);
  for (int i = 0; i < n; ++i) {
    const int t = allowed[rng.uniform_index(allowed.size())];
    const Pattern pattern = rng.bernoulli(opts_.abba_fraction) ? Pattern::ABBA : Pattern::BABA;
    const auto names = rng.sample_distinct(words_.names.size(), 2);
    const int place = static_cast<int>(rng.uniform_index(words_.places.size()));
    const int object = static_cast<int>(rng.uniform_index(words_.objects.size()));
    const std::string& filler = words_.fillers[rng.uniform_index(words_.fillers.size())];
    const std::string& io = words_.names[names[0]];
    const std::string& s = words_.names[names[1]];
    std::string text = fill_template(t, pattern, io, s, words_.places[place], words_.objects[object]);
    std::string sentence = filler;
    replace_all(sentence, "[A]", v == Variant::extra_io ? io : s);
    const size_t brk = text.find(". ");
    text.insert(brk + 2, sentence + " ");
    PromptSample p = build(text, t, pattern, words_.name_ids[names[0]], words_.name_ids[names[1]],
                           v == Variant::extra_io ? "adv_io" : "adv_s");
    p.place = words_.place_ids[place];
    p.object = words_.object_ids[object];
    out.push_back(std::move(p));
  }
  return out;
}

std::vector<PromptSample> IoiGenerator::gen_prefixed(const std::vector<PromptSample>& ioi, uint64_t seed) const {
  Rng rng(seed);
  std::vector<PromptSample> out;
  out.reserve(ioi.size());
  for (const auto& src : ioi) {
    std::set<TokenId> avoid{src.io_name, src.s_name};
    TokenId third = pick_other_name(rng, words_, avoid);
    const auto it = std::find(words_.name_ids.begin(), words_.name_ids.end(), third);
    std::string sentence = words_.fillers[rng.uniform_index(words_.fillers.size())];
    replace_all(sentence, "[A]", words_.names[it - words_.name_ids.begin()]);
    const size_t skip = opts_.prepend_bos ? 1 : 0;
    const std::string body = tok_.decode(std::span<const TokenId>(src.tokens).subspan(skip));
    PromptSample p = build(sentence + " " + body, src.template_id, src.pattern, src.io_name, src.s_name, "prefixed");
    p.place = src.place;
    p.object = src.object;
    out.push_back(std::move(p));
  }
  return out;
}

// ---------------------------------------------------------------------------

PromptSample signal_flip(const PromptSample& sample, const std::vector<Flip>& flips, const WordLists& words,
                         uint64_t seed) {
  if (flips.empty()) throw PreconditionError("signal_flip needs at least one flip");
  const std::set<Flip> chosen(flips.begin(), flips.end());
  PromptSample s = sample;
  s.dist = "flip";
  if (chosen.count(Flip::RandomNames)) {
    Rng rng(seed);
    std::set<TokenId> avoid{sample.io_name, sample.s_name};
    const TokenId a = pick_other_name(rng, words, avoid);
    avoid.insert(a);
    const TokenId b = pick_other_name(rng, words, avoid);
    for (auto& t : s.tokens) {
      if (t == sample.io_name) {
        t = a;
      } else if (t == sample.s_name) {
        t = b;
      }
    }
    s.io_name = a;
    s.s_name = b;
  }
  if (chosen.count(Flip::Swap_IO_S1)) {
    std::swap(s.tokens[s.pos.io], s.tokens[s.pos.s1]);
    std::swap(s.pos.io, s.pos.s1);
    s.pos.s1_plus_1 = s.pos.s1 + 1;
  }
  if (chosen.count(Flip::Replace_IO_by_S)) {
    // The second subject mention becomes the IO name: the duplicated token is now IO.
    s.tokens[s.pos.s2] = s.io_name;
    std::swap(s.io_name, s.s_name);
    std::swap(s.pos.io, s.pos.s1);
    s.pos.s1_plus_1 = s.pos.s1 + 1;
  }
  return s;
}

SignalState signal_state(const PromptSample& original, const PromptSample& flipped) {
  SignalState st;
  const TokenId dup = flipped.tokens.at(flipped.pos.s2);
  st.s_tok = dup == original.s_name ? 1 : dup == original.io_name ? -1 : 0;
  int first = -1;
  for (int i = 0; i < flipped.pos.s2; ++i) {
    if (flipped.tokens[i] == dup) {
      first = i;
      break;
    }
  }
  st.s_pos = first == original.pos.s1 ? 1 : first == original.pos.io ? -1 : 0;
  return st;
}

std::vector<TokenSequence> gen_repeated_random(int half_len, int n, uint64_t seed, int vocab_size) {
  if (half_len < 2) throw PreconditionError("half_len must be at least 2");
  Rng rng(seed);
  std::vector<TokenSequence> out(n);
  for (auto& seq : out) {
    seq.resize(2 * half_len);
    for (int i = 0; i < half_len; ++i) seq[i] = static_cast<TokenId>(rng.uniform_index(vocab_size));
    std::copy_n(seq.begin(), half_len, seq.begin() + half_len);
  }
  return out;
}

void write_jsonl(const std::filesystem::path& path, const std::vector<PromptSample>& samples, const Tokenizer* tok) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  for (const auto& s : samples) out << s.to_json(tok).dump() << "\n";
}

std::vector<PromptSample> read_jsonl(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot read " + path.string());
  std::vector<PromptSample> out;
  std::string line;
  while (std::getline(in, line)) {
    if (!line.empty()) out.push_back(PromptSample::from_json(json::parse(line)));
  }
  return out;
}

// ---------------------------------------------------------------------------

std::vector<HookKey> ablatable_keys(const ModelConfig& cfg) {
  std::vector<HookKey> keys;
  for (int l = 0; l < cfg.n_layers; ++l) {
    for (int h = 0; h < cfg.n_heads; ++h) keys.push_back(HookKey::of_head(Site::head_z, l, h));
    keys.push_back(HookKey::mlp(l));
  }
  return keys;
}

MeanCache MeanCache::build(const Model& model, const std::vector<PromptSample>& reference,
                           const std::vector<HookKey>& keys, int batch_size) {
  MeanCache mc;
  mc.keys_ = keys;
  std::map<int, std::vector<const PromptSample*>> groups;
  for (const auto& s : reference) groups[s.template_id].push_back(&s);
  ForwardOptions opts;
  opts.capture = std::set<HookKey>(keys.begin(), keys.end());
  opts.logits = LogitsMode::none;
  int last_layer = -1;
  for (const auto& k : keys) {
    if (k.site == Site::resid_final || k.site == Site::embed) last_layer = model.config.n_layers - 1;
    last_layer = std::max(last_layer, k.layer);
  }
  opts.stop_after_layer = last_layer;

  for (const auto& [tid, members] : groups) {
    const int len = members.front()->length();
    for (const auto* m : members) {
      if (m->length() != len) {
        throw PreconditionError("template " + std::to_string(tid) + " group has unequal sequence lengths");
      }
    }
    if (members.size() < 2) {
      throw PreconditionError("template " + std::to_string(tid) + " needs at least 2 reference samples");
    }
    std::map<HookKey, std::vector<double>> sums;
    for (size_t start = 0; start < members.size(); start += batch_size) {
      const size_t stop = std::min(members.size(), start + batch_size);
      std::vector<TokenSequence> batch;
      for (size_t i = start; i < stop; ++i) batch.push_back(members[i]->tokens);
      const auto r = forward(model, batch, {}, opts);
      for (const auto& k : keys) {
        const Tensor& t = r.cache.at(k);
        const int64_t per = t.numel() / t.dim(0);
        auto& acc = sums[k];
        acc.resize(per, 0.0);
        for (int64_t b = 0; b < t.dim(0); ++b) {
          const float* src = t.data() + b * per;
          for (int64_t i = 0; i < per; ++i) acc[i] += src[i];
        }
      }
    }
    for (const auto& k : keys) {
      const auto& acc = sums[k];
      const int64_t w = site_width(model.config, k, len);
      Tensor mean({len, w});
      for (int64_t i = 0; i < mean.numel(); ++i) mean.data()[i] = static_cast<float>(acc[i] / members.size());
      mc.means_.emplace(std::make_pair(tid, k), std::move(mean));
    }
    mc.lengths_[tid] = len;
    mc.counts_[tid] = static_cast<int>(members.size());
  }
  return mc;
}

bool MeanCache::covers(int template_id, const HookKey& key) const {
  return means_.count({template_id, key}) > 0;
}

const Tensor& MeanCache::mean(int template_id, const HookKey& key) const {
  auto it = means_.find({template_id, key});
  if (it == means_.end()) {
    throw PreconditionError("mean cache does not cover template " + std::to_string(template_id) + " at " + key.str());
  }
  return it->second;
}

int MeanCache::length(int template_id) const {
  auto it = lengths_.find(template_id);
  if (it == lengths_.end()) throw PreconditionError("mean cache does not cover template " + std::to_string(template_id));
  return it->second;
}

std::vector<int> MeanCache::templates() const {
  std::vector<int> out;
  for (const auto& [t, _] : lengths_) out.push_back(t);
  return out;
}

}  // namespace cwb
