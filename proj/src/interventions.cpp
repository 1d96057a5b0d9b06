#include "cwb/interventions.hpp"

#include "cwb/errors.hpp"
#include "cwb/parallel.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <set>

namespace cwb {

using nlohmann::json;

// ---------------------------------------------------------------------------
// References

std::vector<int> PositionSpec::resolve(const PromptSample& s) const {
  const int n = s.length();
  std::vector<int> out;
  auto check = [&](int p, const std::string& what) {
    if (p < 0 || p >= n) {
      throw PreconditionError("position " + what + " resolves to " + std::to_string(p) + " in a sample of length " +
                              std::to_string(n));
    }
    return p;
  };
  switch (kind) {
    case Kind::all:
      out.resize(n);
      std::iota(out.begin(), out.end(), 0);
      break;
    case Kind::index:
      out.push_back(check(index, std::to_string(index)));
      break;
    case Kind::role:
      out.push_back(check(s.pos.at(roles.at(0)), role_name(roles.at(0))));
      break;
    case Kind::except_roles: {
      std::set<int> skip;
      for (Role r : roles) skip.insert(check(s.pos.at(r), role_name(r)));
      for (int p = 0; p < n; ++p) {
        if (!skip.count(p)) out.push_back(p);
      }
      break;
    }
  }
  return out;
}

std::string PositionSpec::str() const {
  switch (kind) {
    case Kind::all: return "all";
    case Kind::index: return std::to_string(index);
    case Kind::role: return role_name(roles.at(0));
    case Kind::except_roles: {
      std::string s = "except:";
      for (size_t i = 0; i < roles.size(); ++i) s += (i ? "," : "") + std::string(role_name(roles[i]));
      return s;
    }
  }
  return "?";
}

PositionSpec PositionSpec::parse(const std::string& text) {
  if (text == "all" || text.empty()) return all();
  if (const auto r = parse_role(text)) return of(*r);
  if (text.rfind("except:", 0) == 0) {
    std::vector<Role> rs;
    size_t start = 7;
    while (start <= text.size()) {
      const size_t comma = std::min(text.find(',', start), text.size());
      const auto r = parse_role(text.substr(start, comma - start));
      if (!r) throw PreconditionError("unknown role in position '" + text + "'");
      rs.push_back(*r);
      start = comma + 1;
    }
    return except(std::move(rs));
  }
  size_t used = 0;
  int idx = -1;
  try {
    idx = std::stoi(text, &used);
  } catch (const std::exception&) {
    used = 0;
  }
  if (used != text.size() || idx < 0) throw PreconditionError("bad position '" + text + "'");
  return at(idx);
}

HookKey NodeRef::site() const {
  return kind == NodeKind::mlp ? HookKey::mlp(layer) : HookKey::of_head(Site::head_z, layer, head);
}

void NodeRef::validate(const ModelConfig& cfg) const {
  if (layer < 0 || layer >= cfg.n_layers) throw InvalidHookError("node " + str() + ": layer out of range");
  if (kind == NodeKind::attention_head && (head < 0 || head >= cfg.n_heads)) {
    throw InvalidHookError("node " + str() + ": head out of range");
  }
}

std::string NodeRef::str() const {
  const std::string base =
      kind == NodeKind::mlp ? "mlp" + std::to_string(layer) : std::to_string(layer) + "." + std::to_string(head);
  return base + "@" + pos.str();
}

HookKey ReceiverRef::hook() const {
  return site == Site::resid_final ? HookKey::resid_final() : HookKey::of_head(site, layer, head);
}

int ReceiverRef::depth(const ModelConfig& cfg) const { return site == Site::resid_final ? cfg.n_layers : layer; }

void ReceiverRef::validate(const ModelConfig& cfg) const {
  if (site != Site::resid_final && site != Site::head_query && site != Site::head_key && site != Site::head_value) {
    throw InvalidHookError(std::string("receiver site must be a query, key, value or resid_final, got ") +
                           site_name(site));
  }
  validate_key(cfg, hook());
}

std::string ReceiverRef::str() const {
  if (site == Site::resid_final) return "resid_final@" + pos.str();
  return std::string(site_name(site)) + ":" + std::to_string(layer) + "." + std::to_string(head) + "@" + pos.str();
}

std::vector<NodeRef> PatchSpec::senders() const {
  std::vector<NodeRef> out = {sender};
  out.insert(out.end(), more_senders.begin(), more_senders.end());
  return out;
}

void PatchSpec::validate(const ModelConfig& cfg) const {
  if (receivers.empty()) throw PreconditionError("path patching needs at least one receiver");
  const auto all = senders();
  for (size_t i = 0; i < all.size(); ++i) {
    const auto& s = all[i];
    s.validate(cfg);
    for (size_t j = 0; j < i; ++j) {
      if (all[j].kind == s.kind && all[j].layer == s.layer && all[j].head == s.head) {
        throw PreconditionError("duplicate sender " + s.str());
      }
    }
    for (const auto& r : receivers) {
      r.validate(cfg);
      if (r.depth(cfg) <= s.layer) {
        throw PreconditionError("receiver " + r.str() + " is not downstream of sender " + s.str());
      }
    }
  }
}

// ---------------------------------------------------------------------------
// Outcomes

double Outcomes::mean_logit_diff() const {
  double s = 0;
  for (const auto& r : rows) s += r.logit_diff;
  return rows.empty() ? 0.0 : s / rows.size();
}

double Outcomes::mean_io_prob() const {
  double s = 0;
  for (const auto& r : rows) s += r.io_prob;
  return rows.empty() ? 0.0 : s / rows.size();
}

double Outcomes::io_over_s_rate() const {
  size_t k = 0;
  for (const auto& r : rows) k += r.logit_diff > 0;
  return rows.empty() ? 0.0 : static_cast<double>(k) / rows.size();
}

SampleOutcome score_logits(std::span<const float> logits, const PromptSample& s) {
  SampleOutcome o;
  o.logit_diff = logit_diff(logits, s.io_name, s.s_name);
  const float mx = *std::max_element(logits.begin(), logits.end());
  double z = 0;
  for (float v : logits) z += std::exp(static_cast<double>(v) - mx);
  o.io_prob = std::exp(static_cast<double>(logits[s.io_name]) - mx) / z;
  o.s_prob = std::exp(static_cast<double>(logits[s.s_name]) - mx) / z;
  o.top = static_cast<TokenId>(std::max_element(logits.begin(), logits.end()) - logits.begin());
  return o;
}

std::vector<std::vector<int>> length_batches(std::span<const PromptSample> samples, int max_batch) {
  if (max_batch < 1) throw PreconditionError("batch size must be positive");
  std::map<int, std::vector<int>> by_len;
  for (int i = 0; i < static_cast<int>(samples.size()); ++i) by_len[samples[i].length()].push_back(i);
  std::vector<std::vector<int>> out;
  for (auto& [len, idx] : by_len) {
    for (size_t s = 0; s < idx.size(); s += max_batch) {
      out.emplace_back(idx.begin() + s, idx.begin() + std::min(idx.size(), s + max_batch));
    }
  }
  return out;
}

namespace {

std::vector<const PromptSample*> rows_of(std::span<const PromptSample> samples, const std::vector<int>& idx) {
  std::vector<const PromptSample*> out;
  for (int i : idx) out.push_back(&samples[i]);
  return out;
}

std::vector<TokenSequence> tokens_of(const std::vector<const PromptSample*>& rows) {
  std::vector<TokenSequence> out;
  for (const auto* r : rows) out.push_back(r->tokens);
  return out;
}

Selection selection_for(const PositionSpec& pos, std::span<const PromptSample* const> rows) {
  if (pos.is_all()) return Selection::all();
  std::vector<std::vector<int>> sets;
  for (const auto* r : rows) sets.push_back(pos.resolve(*r));
  return Selection::sets(std::move(sets));
}

void start_outcomes(Outcomes& out, size_t n, const RunOptions& opts, int vocab) {
  out.rows.assign(n, {});
  if (opts.keep_logits) out.logits = Tensor({static_cast<int64_t>(n), vocab});
}

void record(Outcomes& out, const Tensor& logits, const std::vector<int>& idx, std::span<const PromptSample> samples,
            bool keep) {
  for (size_t b = 0; b < idx.size(); ++b) {
    const auto row = last_logits(logits, static_cast<int64_t>(b));
    out.rows[idx[b]] = score_logits(row, samples[idx[b]]);
    if (keep) std::copy(row.begin(), row.end(), out.logits.data() + static_cast<int64_t>(idx[b]) * row.size());
  }
}

// out[b, j] = full[b, pos[b][j]]
std::shared_ptr<Tensor> gather(const Tensor& full, const std::vector<std::vector<int>>& pos) {
  const int64_t B = full.dim(0), N = full.dim(1), w = full.dim(2);
  const int64_t n2 = static_cast<int64_t>(pos.at(0).size());
  auto out = std::make_shared<Tensor>(std::vector<int64_t>{B, n2, w});
  for (int64_t b = 0; b < B; ++b) {
    for (int64_t j = 0; j < n2; ++j) {
      std::copy_n(full.data() + (b * N + pos[b][j]) * w, w, out->data() + (b * n2 + j) * w);
    }
  }
  return out;
}

HookKey resid_before(int layer) { return layer == 0 ? HookKey::embed() : HookKey::resid_post(layer - 1); }

}  // namespace

EditSet knockout_edits(const ModelConfig& cfg, std::span<const PromptSample* const> batch,
                       const std::vector<NodeRef>& nodes, const AblationMode& mode) {
  EditSet edits;
  if (batch.empty()) return edits;
  const int N = batch[0]->length();
  const bool mean = mode.variant == AblationMode::Variant::mean;
  if (mean && !mode.cache) throw PreconditionError("mean ablation needs a mean cache");
  std::vector<int> templates, row_of;
  if (mean) {
    for (const auto* r : batch) {
      auto it = std::find(templates.begin(), templates.end(), r->template_id);
      if (it == templates.end()) {
        templates.push_back(r->template_id);
        it = templates.end() - 1;
      }
      row_of.push_back(static_cast<int>(it - templates.begin()));
    }
    for (int t : templates) {
      if (mode.cache->length(t) != N) {
        throw PreconditionError("mean cache for template " + std::to_string(t) + " has length " +
                                std::to_string(mode.cache->length(t)) + ", sample has " + std::to_string(N));
      }
    }
  }
  std::map<HookKey, std::shared_ptr<const Tensor>> stacked;
  for (const auto& node : nodes) {
    node.validate(cfg);
    const HookKey key = node.site();
    Selection where = selection_for(node.pos, batch);
    if (!mean) {
      // Zeroing z would leave the head's share of the output bias; zero the output itself.
      const HookKey out = node.kind == NodeKind::mlp ? key : HookKey::of_head(Site::head_output, node.layer, node.head);
      edits.add(Edit::zero(out, std::move(where)));
      continue;
    }
    auto& values = stacked[key];
    if (!values) {
      const int64_t w = site_width(cfg, key, N);
      auto t = std::make_shared<Tensor>(std::vector<int64_t>{static_cast<int64_t>(templates.size()), N, w});
      for (size_t i = 0; i < templates.size(); ++i) {
        const Tensor& m = mode.cache->mean(templates[i], key);
        std::copy_n(m.data(), m.numel(), t->data() + i * N * w);
      }
      values = std::move(t);
    }
    edits.add(Edit::overwrite(key, values, std::move(where), row_of));
  }
  return edits;
}

Outcomes baseline(const Model& model, std::span<const PromptSample> samples, const RunOptions& opts) {
  return knockout(model, samples, {}, AblationMode::zero(), opts);
}

Outcomes knockout(const Model& model, std::span<const PromptSample> samples, const std::vector<NodeRef>& nodes,
                  const AblationMode& mode, const RunOptions& opts) {
  for (const auto& n : nodes) n.validate(model.config);
  Outcomes out;
  start_outcomes(out, samples.size(), opts, model.config.vocab_size);
  for (const auto& idx : length_batches(samples, opts.batch_size)) {
    const auto rows = rows_of(samples, idx);
    const EditSet edits = knockout_edits(model.config, rows, nodes, mode);
    const auto r = forward(model, tokens_of(rows), edits);
    record(out, r.logits, idx, samples, opts.keep_logits);
  }
  return out;
}

Outcomes activation_patch(const Model& model, std::span<const PromptSample> x_orig,
                          std::span<const PromptSample> x_new, const std::vector<NodeRef>& nodes,
                          const RunOptions& opts) {
  const ModelConfig& cfg = model.config;
  if (x_orig.size() != x_new.size()) throw PreconditionError("activation patch needs paired datasets");
  for (const auto& n : nodes) n.validate(cfg);
  const size_t S = x_orig.size();

  // Source and destination positions per (sample, node).
  std::vector<std::vector<std::vector<int>>> src(S), dst(S);
  for (size_t i = 0; i < S; ++i) {
    for (const auto& n : nodes) {
      src[i].push_back(n.pos.resolve(x_new[i]));
      dst[i].push_back(n.pos.resolve(x_orig[i]));
      if (src[i].back().size() != dst[i].back().size()) {
        throw PreconditionError("activation patch length mismatch at sample " + std::to_string(i));
      }
    }
  }

  // Pass 1: record node activations on x_new.
  std::vector<std::vector<std::vector<float>>> saved(S, std::vector<std::vector<float>>(nodes.size()));
  ForwardOptions cap;
  cap.logits = LogitsMode::none;
  int last = 0;
  for (const auto& n : nodes) {
    cap.capture.insert(n.site());
    last = std::max(last, n.layer);
  }
  cap.stop_after_layer = last;
  if (!nodes.empty()) {
    for (const auto& idx : length_batches(x_new, opts.batch_size)) {
      const auto rows = rows_of(x_new, idx);
      const auto r = forward(model, tokens_of(rows), {}, cap);
      for (size_t k = 0; k < nodes.size(); ++k) {
        const Tensor& t = r.cache.at(nodes[k].site());
        const int64_t N = t.dim(1), w = t.dim(2);
        for (size_t b = 0; b < idx.size(); ++b) {
          auto& v = saved[idx[b]][k];
          for (int p : src[idx[b]][k]) {
            const float* row = t.data() + (b * N + p) * w;
            v.insert(v.end(), row, row + w);
          }
        }
      }
    }
  }

  // Pass 2: x_orig with the recorded values written in.
  Outcomes out;
  start_outcomes(out, S, opts, cfg.vocab_size);
  for (const auto& idx : length_batches(x_orig, opts.batch_size)) {
    const auto rows = rows_of(x_orig, idx);
    const int64_t B = static_cast<int64_t>(idx.size()), N = rows[0]->length();
    EditSet edits;
    for (size_t k = 0; k < nodes.size(); ++k) {
      const HookKey key = nodes[k].site();
      const int64_t w = site_width(cfg, key, N);
      auto values = std::make_shared<Tensor>(std::vector<int64_t>{B, N, w});
      std::vector<std::vector<int>> where;
      for (int64_t b = 0; b < B; ++b) {
        const auto& d = dst[idx[b]][k];
        const auto& v = saved[idx[b]][k];
        for (size_t j = 0; j < d.size(); ++j) {
          std::copy_n(v.data() + j * w, w, values->data() + (b * N + d[j]) * w);
        }
        where.push_back(d);
      }
      edits.add(Edit::overwrite(key, values, Selection::sets(std::move(where))));
    }
    const auto r = forward(model, tokens_of(rows), edits);
    record(out, r.logits, idx, x_orig, opts.keep_logits);
  }
  return out;
}

// ---------------------------------------------------------------------------
// Path patching

namespace {

// Passes A and B for one batch, shared by every sender.
struct PairCache {
  std::vector<const PromptSample*> orig;
  ForwardResult a, b;
  EditSet knock_orig;
};

PairCache build_pair_cache(const Model& model, const std::vector<const PromptSample*>& orig,
                           const std::vector<const PromptSample*>& fresh, const std::vector<NodeRef>& senders,
                           const std::vector<ReceiverRef>& receivers, const PathPatchOptions& opts) {
  const ModelConfig& cfg = model.config;
  PairCache pc;
  pc.orig = orig;
  pc.knock_orig = knockout_edits(cfg, orig, opts.knockout, opts.knockout_mode);

  ForwardOptions a_opts;
  a_opts.logits = LogitsMode::none;
  int min_sender = cfg.n_layers, max_sender = 0;
  for (const auto& s : senders) {
    a_opts.capture.insert(s.site());
    min_sender = std::min(min_sender, s.layer);
    max_sender = std::max(max_sender, s.layer);
  }
  a_opts.stop_after_layer = max_sender;
  pc.a = forward(model, tokens_of(fresh), knockout_edits(cfg, fresh, opts.knockout, opts.knockout_mode), a_opts);

  ForwardOptions b_opts;
  b_opts.logits = LogitsMode::last;
  for (int l = min_sender; l < cfg.n_layers; ++l) {
    for (int h = 0; h < cfg.n_heads; ++h) b_opts.capture.insert(HookKey::of_head(Site::head_z, l, h));
  }
  for (int l = 0; l <= cfg.n_layers; ++l) b_opts.capture.insert(resid_before(l));
  for (const auto& r : receivers) b_opts.capture.insert(r.hook());
  for (const auto& k : opts.knockout) {
    if (k.kind == NodeKind::mlp) b_opts.capture.insert(k.site());
  }
  pc.b = forward(model, tokens_of(orig), pc.knock_orig, b_opts);
  return pc;
}

// Passes C and D for one set of senders; returns pass D.
ForwardResult run_senders(const Model& model, const PairCache& pc, const std::vector<NodeRef>& senders,
                          const std::vector<ReceiverRef>& receivers, const PathPatchOptions& opts,
                          const std::set<HookKey>& d_capture = {}) {
  const ModelConfig& cfg = model.config;
  const auto& orig = pc.orig;
  const int64_t B = static_cast<int64_t>(orig.size()), N = orig[0]->length();
  int Ls = cfg.n_layers;
  for (const auto& s : senders) Ls = std::min(Ls, s.layer);

  // Heads are frozen in pass C, so positions do not interact and only the senders'
  // positions can differ from pass B. Those are gathered into a shorter batch.
  std::vector<std::vector<std::vector<int>>> sender_pos(senders.size());
  std::vector<std::vector<int>> G(B);
  for (size_t si = 0; si < senders.size(); ++si) {
    for (int64_t b = 0; b < B; ++b) {
      sender_pos[si].push_back(senders[si].pos.resolve(*orig[b]));
      G[b].insert(G[b].end(), sender_pos[si][b].begin(), sender_pos[si][b].end());
    }
  }
  bool uniform = true;
  for (auto& g : G) {
    std::sort(g.begin(), g.end());
    g.erase(std::unique(g.begin(), g.end()), g.end());
    uniform &= g.size() == G[0].size();
  }
  if (!uniform) {
    for (auto& g : G) {
      g.resize(N);
      std::iota(g.begin(), g.end(), 0);
    }
  }
  const bool gathered = static_cast<int64_t>(G[0].size()) < N;

  EditSet c_edits;
  for (int l = Ls; l < cfg.n_layers; ++l) {
    for (int h = 0; h < cfg.n_heads; ++h) {
      const HookKey key = HookKey::of_head(Site::head_z, l, h);
      const auto si = static_cast<size_t>(
          std::find_if(senders.begin(), senders.end(),
                       [&](const NodeRef& s) { return s.kind == NodeKind::attention_head && s.layer == l && s.head == h; }) -
          senders.begin());
      const bool is_sender = si < senders.size();
      if (!is_sender && !gathered) {
        c_edits.add(Edit::overwrite(key, pc.b.cache.shared(key)));
        continue;
      }
      auto t = gather(pc.b.cache.at(key), G);
      if (is_sender) {
        const Tensor& a = pc.a.cache.at(key);
        const int64_t w = a.dim(2), n2 = t->dim(1);
        for (int64_t b = 0; b < B; ++b) {
          for (int p : sender_pos[si][b]) {
            const auto j = std::find(G[b].begin(), G[b].end(), p) - G[b].begin();
            std::copy_n(a.data() + (b * N + p) * w, w, t->data() + (b * n2 + j) * w);
          }
        }
      }
      c_edits.add(Edit::overwrite(key, std::move(t)));
    }
  }
  // MLP senders take their x_new output at the sender positions and are otherwise recomputed.
  for (size_t si = 0; si < senders.size(); ++si) {
    if (senders[si].kind != NodeKind::mlp) continue;
    std::vector<std::vector<int>> where;
    for (int64_t b = 0; b < B; ++b) {
      std::vector<int> js;
      for (int p : sender_pos[si][b]) {
        js.push_back(static_cast<int>(std::find(G[b].begin(), G[b].end(), p) - G[b].begin()));
      }
      where.push_back(std::move(js));
    }
    c_edits.add(Edit::overwrite(senders[si].site(), gather(pc.a.cache.at(senders[si].site()), G),
                                Selection::sets(std::move(where))));
  }
  // Ablated MLP outputs do not depend on their input, so they equal pass B's.
  for (const auto& k : opts.knockout) {
    if (k.kind != NodeKind::mlp || k.layer < Ls) continue;
    std::vector<std::vector<int>> where;
    for (int64_t b = 0; b < B; ++b) {
      const auto knocked = k.pos.resolve(*orig[b]);
      std::vector<int> js;
      for (size_t j = 0; j < G[b].size(); ++j) {
        if (std::binary_search(knocked.begin(), knocked.end(), G[b][j])) js.push_back(static_cast<int>(j));
      }
      where.push_back(std::move(js));
    }
    c_edits.add(Edit::overwrite(k.site(), gather(pc.b.cache.at(k.site()), G), Selection::sets(std::move(where))));
  }

  ForwardOptions c_opts;
  c_opts.logits = LogitsMode::none;
  c_opts.start_layer = Ls;
  c_opts.start_residual = gather(pc.b.cache.at(resid_before(Ls)), G);
  int min_depth = cfg.n_layers, max_depth = 0;
  for (const auto& r : receivers) {
    c_opts.capture.insert(r.hook());
    min_depth = std::min(min_depth, r.depth(cfg));
    max_depth = std::max(max_depth, r.depth(cfg));
  }
  c_opts.stop_after_layer = max_depth >= cfg.n_layers ? -1 : max_depth;
  const auto c = forward(model, {}, c_edits, c_opts);

  // Receiver values from C spliced into B's full-length activations.
  std::map<HookKey, std::shared_ptr<const Tensor>> recorded;
  for (const auto& r : receivers) {
    const HookKey key = r.hook();
    if (recorded.count(key)) continue;
    const Tensor& part = c.cache.at(key);
    auto full = std::make_shared<Tensor>(pc.b.cache.at(key));
    const int64_t w = full->dim(2), n2 = part.dim(1);
    for (int64_t b = 0; b < B; ++b) {
      for (int64_t j = 0; j < n2; ++j) {
        std::copy_n(part.data() + (b * n2 + j) * w, w, full->data() + (b * N + G[b][j]) * w);
      }
    }
    recorded[key] = std::move(full);
  }

  EditSet d_edits = pc.knock_orig;
  for (const auto& r : receivers) {
    d_edits.add(Edit::overwrite(r.hook(), recorded.at(r.hook()), selection_for(r.pos, orig)));
  }
  ForwardOptions d_opts;
  d_opts.start_layer = min_depth;
  d_opts.start_residual = pc.b.cache.shared(resid_before(min_depth));
  d_opts.capture = d_capture;
  return forward(model, {}, d_edits, d_opts);
}

void check_pairs(std::span<const PromptSample> x_orig, std::span<const PromptSample> x_new, size_t n) {
  if (x_orig.size() < n || x_new.size() < n) throw PreconditionError("path patching needs paired datasets");
  for (size_t i = 0; i < n; ++i) {
    if (x_orig[i].length() != x_new[i].length()) {
      throw PreconditionError("path patching length mismatch at sample " + std::to_string(i));
    }
  }
}

}  // namespace

Outcomes path_patch(const Model& model, std::span<const PromptSample> x_orig, std::span<const PromptSample> x_new,
                    const PatchSpec& spec, const PathPatchOptions& opts) {
  spec.validate(model.config);
  for (const auto& k : opts.knockout) k.validate(model.config);
  check_pairs(x_orig, x_new, x_orig.size());
  int min_depth = model.config.n_layers;
  for (const auto& r : spec.receivers) min_depth = std::min(min_depth, r.depth(model.config));
  for (const auto& key : opts.capture) {
    validate_key(model.config, key);
    if (key.site == Site::embed || (key.site != Site::resid_final && key.layer < min_depth)) {
      throw PreconditionError("pass D cannot capture " + key.str() + " before the first receiver layer");
    }
  }
  const auto senders = spec.senders();
  Outcomes out;
  start_outcomes(out, x_orig.size(), RunOptions{opts.batch_size, opts.keep_logits}, model.config.vocab_size);
  const auto batches = length_batches(x_orig, opts.batch_size);
  for (size_t bi = 0; bi < batches.size(); ++bi) {
    const auto& idx = batches[bi];
    const auto pc = build_pair_cache(model, rows_of(x_orig, idx), rows_of(x_new, idx), senders, spec.receivers, opts);
    const auto d = run_senders(model, pc, senders, spec.receivers, opts, opts.capture);
    record(out, d.logits, idx, x_orig, opts.keep_logits);
    if (opts.inspect) opts.inspect(idx, d.cache);
    if (opts.progress) opts.progress(static_cast<double>(bi + 1) / batches.size());
  }
  return out;
}

SweepResult sweep(const Model& model, std::span<const PromptSample> x_orig, std::span<const PromptSample> x_new,
                  const std::vector<ReceiverRef>& receivers, const PositionSpec& sender_pos, int n_samples,
                  const PathPatchOptions& opts) {
  const ModelConfig& cfg = model.config;
  if (n_samples < 1) throw PreconditionError("sweep needs at least one sample");
  if (receivers.empty()) throw PreconditionError("sweep needs at least one receiver");
  for (const auto& r : receivers) r.validate(cfg);
  for (const auto& k : opts.knockout) k.validate(cfg);
  check_pairs(x_orig, x_new, n_samples);
  const auto orig = x_orig.first(n_samples);
  const auto fresh = x_new.first(n_samples);

  struct Job {
    NodeRef sender;
    std::vector<ReceiverRef> receivers;
  };
  std::vector<Job> jobs;
  SweepResult res;
  res.receivers = receivers;
  res.sender_pos = sender_pos;
  res.n_samples = n_samples;
  res.matrix.assign(cfg.n_layers, std::vector<double>(cfg.n_heads, 0.0));
  res.valid.assign(cfg.n_layers, std::vector<bool>(cfg.n_heads, false));
  for (int l = 0; l < cfg.n_layers; ++l) {
    for (int h = 0; h < cfg.n_heads; ++h) {
      Job j{NodeRef::head_at(l, h, sender_pos), {}};
      for (const auto& r : receivers) {
        if (r.depth(cfg) > l) j.receivers.push_back(r);
      }
      if (!j.receivers.empty()) {
        res.valid[l][h] = true;
        jobs.push_back(std::move(j));
      }
    }
  }
  std::vector<NodeRef> senders;
  for (const auto& j : jobs) senders.push_back(j.sender);

  std::vector<double> sums(jobs.size(), 0.0);
  double base_sum = 0.0;
  const auto batches = length_batches(orig, opts.batch_size);
  for (size_t bi = 0; bi < batches.size(); ++bi) {
    const auto& idx = batches[bi];
    const auto pc = build_pair_cache(model, rows_of(orig, idx), rows_of(fresh, idx), senders, receivers, opts);
    for (size_t b = 0; b < idx.size(); ++b) {
      base_sum += score_logits(last_logits(pc.b.logits, b), orig[idx[b]]).logit_diff;
    }
    std::vector<double> part(jobs.size(), 0.0);
    parallel_for(static_cast<int>(jobs.size()), [&](int ji) {
      const Tensor logits = run_senders(model, pc, {jobs[ji].sender}, jobs[ji].receivers, opts).logits;
      double s = 0.0;
      for (size_t b = 0; b < idx.size(); ++b) s += score_logits(last_logits(logits, b), orig[idx[b]]).logit_diff;
      part[ji] = s;
    }, opts.threads);
    for (size_t ji = 0; ji < jobs.size(); ++ji) sums[ji] += part[ji];
    if (opts.progress) opts.progress(static_cast<double>(bi + 1) / batches.size());
  }
  res.baseline = base_sum / n_samples;
  for (size_t ji = 0; ji < jobs.size(); ++ji) {
    res.matrix[jobs[ji].sender.layer][jobs[ji].sender.head] = sums[ji] / n_samples - res.baseline;
  }
  return res;
}

json SweepResult::to_json() const {
  json recv = json::array();
  for (const auto& r : receivers) recv.push_back(cwb::to_json(r));
  return {{"receivers", recv}, {"position_role", sender_pos.str()}, {"n_samples", n_samples},
          {"seed", seed},      {"baseline", baseline},             {"matrix", matrix}};
}

std::vector<std::pair<int, int>> SweepResult::ranked() const {
  std::vector<std::pair<int, int>> out;
  for (size_t l = 0; l < matrix.size(); ++l) {
    for (size_t h = 0; h < matrix[l].size(); ++h) {
      if (valid[l][h]) out.emplace_back(static_cast<int>(l), static_cast<int>(h));
    }
  }
  std::stable_sort(out.begin(), out.end(),
                   [&](auto a, auto b) { return matrix[a.first][a.second] < matrix[b.first][b.second]; });
  return out;
}

// ---------------------------------------------------------------------------
// JSON

json to_json(const PositionSpec& p) { return p.str(); }

json to_json(const NodeRef& n) {
  json j = {{"kind", n.kind == NodeKind::mlp ? "mlp" : "head"}, {"layer", n.layer}, {"position", n.pos.str()}};
  if (n.kind == NodeKind::attention_head) j["head"] = n.head;
  return j;
}

json to_json(const ReceiverRef& r) {
  json j = {{"site", site_name(r.site)}, {"position", r.pos.str()}};
  if (r.site != Site::resid_final) {
    j["layer"] = r.layer;
    j["head"] = r.head;
  }
  return j;
}

NodeRef node_from_json(const json& j) {
  try {
    if (j.is_array()) {
      // [layer, head] or [layer, head, position]
      NodeRef n = NodeRef::head_at(j.at(0).get<int>(), j.at(1).get<int>());
      if (j.size() > 2) n.pos = PositionSpec::parse(j.at(2).get<std::string>());
      return n;
    }
    const std::string kind = j.value("kind", "head");
    const PositionSpec pos = PositionSpec::parse(j.value("position", "all"));
    if (kind == "mlp") return NodeRef::mlp_at(j.at("layer").get<int>(), pos);
    if (kind != "head") throw PreconditionError("unknown node kind '" + kind + "'");
    return NodeRef::head_at(j.at("layer").get<int>(), j.at("head").get<int>(), pos);
  } catch (const json::exception& e) {
    throw PreconditionError(std::string("bad node: ") + e.what());
  }
}

ReceiverRef receiver_from_json(const json& j) {
  try {
    const auto site = parse_site(j.at("site").get<std::string>());
    if (!site) throw PreconditionError("unknown receiver site");
    const PositionSpec pos = PositionSpec::parse(j.value("position", "END"));
    if (*site == Site::resid_final) return ReceiverRef::final_residual(pos);
    return ReceiverRef{*site, j.at("layer").get<int>(), j.at("head").get<int>(), pos};
  } catch (const json::exception& e) {
    throw PreconditionError(std::string("bad receiver: ") + e.what());
  }
}

}  // namespace cwb
