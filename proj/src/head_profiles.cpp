#include "cwb/head_profiles.hpp"

#include "cwb/errors.hpp"
#include "cwb/parallel.hpp"

#include <Eigen/QR>

#include <algorithm>
#include <cmath>
#include <sstream>

namespace cwb {

using nlohmann::json;

const char* score_kind_name(ScoreKind k) {
  switch (k) {
    case ScoreKind::copy: return "copy";
    case ScoreKind::negative_copy: return "negative_copy";
    case ScoreKind::duplicate: return "duplicate";
    case ScoreKind::induction: return "induction";
    case ScoreKind::previous_token: return "previous_token";
    case ScoreKind::copy_on_repeats: return "copy_on_repeats";
  }
  return "?";
}

std::vector<std::pair<int, int>> ScoreReport::ranked() const {
  std::vector<std::pair<int, int>> out;
  for (size_t l = 0; l < grid.size(); ++l) {
    for (size_t h = 0; h < grid[l].size(); ++h) out.emplace_back(static_cast<int>(l), static_cast<int>(h));
  }
  std::stable_sort(out.begin(), out.end(), [&](auto a, auto b) { return at(a.first, a.second) > at(b.first, b.second); });
  return out;
}

std::vector<std::pair<int, int>> ScoreReport::top(size_t k) const {
  auto r = ranked();
  if (r.size() > k) r.resize(k);
  return r;
}

json ScoreReport::to_json() const {
  return {{"score_kind", score_kind_name(kind)}, {"grid", grid}, {"n", n_samples}, {"seed", seed}};
}

std::string ScoreReport::to_csv() const {
  std::ostringstream out;
  out.precision(9);
  out << "layer,head," << score_kind_name(kind) << "\n";
  for (size_t l = 0; l < grid.size(); ++l) {
    for (size_t h = 0; h < grid[l].size(); ++h) out << l << "," << h << "," << grid[l][h] << "\n";
  }
  return out.str();
}

namespace {

void check_head(const ModelConfig& cfg, int layer, int head) {
  if (layer < 0 || layer >= cfg.n_layers || head < 0 || head >= cfg.n_heads) {
    throw PreconditionError("invalid head " + std::to_string(layer) + "." + std::to_string(head));
  }
}

std::vector<std::vector<double>> empty_grid(const ModelConfig& cfg) {
  return std::vector<std::vector<double>>(cfg.n_layers, std::vector<double>(cfg.n_heads, 0.0));
}

const float* row_at(const Tensor& t, int64_t b, int64_t pos) { return t.data() + (b * t.dim(1) + pos) * t.dim(2); }

template <typename Fn>
void for_each_batch(std::span<const PromptSample> samples, int batch_size, Fn&& fn) {
  for (const auto& idx : length_batches(samples, batch_size)) {
    std::vector<TokenSequence> toks;
    for (int i : idx) toks.push_back(samples[i].tokens);
    fn(idx, toks);
  }
}

struct NameRows {
  MatrixRM resid;  // [R, d]
  std::vector<TokenId> target;
};

NameRows name_residuals(const Model& model, std::span<const PromptSample> samples, int batch_size) {
  NameRows out;
  const int d = model.config.d_model;
  out.resid.resize(static_cast<int64_t>(samples.size()) * 2, d);
  int64_t r = 0;
  ForwardOptions fo;
  fo.capture = {HookKey::resid_post(0)};
  fo.logits = LogitsMode::none;
  fo.stop_after_layer = 0;
  for_each_batch(samples, batch_size, [&](const std::vector<int>& idx, const std::vector<TokenSequence>& toks) {
    const auto res = forward(model, toks, {}, fo);
    const Tensor& x = res.cache.at(HookKey::resid_post(0));
    for (size_t b = 0; b < idx.size(); ++b) {
      const auto& s = samples[idx[b]];
      for (auto [pos, tok] : {std::pair{s.pos.io, s.io_name}, std::pair{s.pos.s1, s.s_name}}) {
        out.resid.row(r) = Eigen::Map<const RowVector>(row_at(x, b, pos), d);
        out.target.push_back(tok);
        ++r;
      }
    }
  });
  return out;
}

double copy_score_rows(const Model& model, int layer, int head, const NameRows& rows, const CopyScoreOptions& o) {
  const auto& cfg = model.config;
  const auto& blk = model.params.blocks[layer];
  const int dh = cfg.head_dim();
  const int d = cfg.d_model;
  const auto& W_U = model.params.unembed();
  const int64_t R = rows.resid.rows();
  if (R == 0) throw PreconditionError("copy score needs at least one sample");
  if (o.top_k >= cfg.vocab_size) return 1.0;
  int64_t hits = 0;
  constexpr int64_t kChunk = 128;
  for (int64_t r0 = 0; r0 < R; r0 += kChunk) {
    const int64_t n = std::min(kChunk, R - r0);
    MatrixRM x = rows.resid.middleRows(r0, n);
    layer_norm_rows(x, blk.ln1, cfg.layer_norm_epsilon);
    MatrixRM v = x * blk.w_qkv.middleCols(2 * d + head * dh, dh);
    v.rowwise() += blk.b_qkv.segment(2 * d + head * dh, dh);
    MatrixRM out = static_cast<float>(o.sign) * (v * blk.w_out.middleRows(head * dh, dh));
    layer_norm_rows(out, model.params.ln_final, cfg.layer_norm_epsilon);
    const MatrixRM logits = out * W_U.transpose();
    for (int64_t i = 0; i < n; ++i) {
      const float t = logits(i, rows.target[r0 + i]);
      int above = 0;
      for (int64_t j = 0; j < logits.cols() && above < o.top_k; ++j) above += logits(i, j) > t;
      hits += above < o.top_k;
    }
  }
  return static_cast<double>(hits) / static_cast<double>(R);
}

}  // namespace

double copy_score(const Model& model, int layer, int head, std::span<const PromptSample> samples,
                  const CopyScoreOptions& opts) {
  check_head(model.config, layer, head);
  if (opts.sign != 1 && opts.sign != -1) throw PreconditionError("sign must be +1 or -1");
  if (opts.top_k < 1) throw PreconditionError("top_k must be positive");
  return copy_score_rows(model, layer, head, name_residuals(model, samples, opts.batch_size), opts);
}

ScoreReport copy_scores(const Model& model, std::span<const PromptSample> samples, const CopyScoreOptions& opts) {
  if (opts.sign != 1 && opts.sign != -1) throw PreconditionError("sign must be +1 or -1");
  if (opts.top_k < 1) throw PreconditionError("top_k must be positive");
  const auto& cfg = model.config;
  const auto rows = name_residuals(model, samples, opts.batch_size);
  ScoreReport rep;
  rep.kind = opts.sign > 0 ? ScoreKind::copy : ScoreKind::negative_copy;
  rep.grid = empty_grid(cfg);
  rep.n_samples = static_cast<int>(samples.size());
  parallel_for(cfg.n_layers * cfg.n_heads, [&](int i) {
    const int l = i / cfg.n_heads, h = i % cfg.n_heads;
    rep.grid[l][h] = copy_score_rows(model, l, h, rows, opts);
  }, opts.threads);
  return rep;
}

MeanStd attention_stat(const Model& model, const std::vector<std::pair<int, int>>& heads,
                       std::span<const PromptSample> samples, Role from, Role to, int batch_size) {
  if (heads.empty()) throw PreconditionError("attention_stat needs at least one head");
  ForwardOptions fo;
  fo.logits = LogitsMode::none;
  int max_layer = 0;
  for (auto [l, h] : heads) {
    check_head(model.config, l, h);
    fo.capture.insert(HookKey::of_head(Site::head_pattern, l, h));
    max_layer = std::max(max_layer, l);
  }
  fo.stop_after_layer = max_layer;
  double sum = 0.0, sq = 0.0;
  int n = 0;
  for_each_batch(samples, batch_size, [&](const std::vector<int>& idx, const std::vector<TokenSequence>& toks) {
    const auto res = forward(model, toks, {}, fo);
    for (auto [l, h] : heads) {
      const Tensor& p = res.cache.at(HookKey::of_head(Site::head_pattern, l, h));
      for (size_t b = 0; b < idx.size(); ++b) {
        const auto& s = samples[idx[b]];
        const double v = row_at(p, b, s.pos.at(from))[s.pos.at(to)];
        sum += v;
        sq += v * v;
        ++n;
      }
    }
  });
  MeanStd out;
  out.n = n;
  if (n == 0) return out;
  out.mean = sum / n;
  out.std = std::sqrt(std::max(0.0, sq / n - out.mean * out.mean));
  return out;
}

std::optional<double> pearson(std::span<const double> x, std::span<const double> y) {
  if (x.size() != y.size()) throw PreconditionError("pearson inputs differ in length");
  const size_t n = x.size();
  if (n < 2) return std::nullopt;
  double mx = 0, my = 0;
  for (size_t i = 0; i < n; ++i) {
    mx += x[i];
    my += y[i];
  }
  mx /= n;
  my /= n;
  double sxy = 0, sxx = 0, syy = 0;
  for (size_t i = 0; i < n; ++i) {
    sxy += (x[i] - mx) * (y[i] - my);
    sxx += (x[i] - mx) * (x[i] - mx);
    syy += (y[i] - my) * (y[i] - my);
  }
  // Relative tolerance so that float noise on a constant input counts as no variance.
  auto flat = [n](double ss, double m) { return ss <= 1e-24 * n * std::max(1.0, m * m); };
  if (flat(sxx, mx) || flat(syy, my)) return std::nullopt;
  return sxy / std::sqrt(sxx * syy);
}

json Scatter::to_json() const {
  json pts = json::array();
  for (const auto& p : points) pts.push_back({p.attention, p.projection});
  return {{"points", pts}, {"n", points.size()},
          {"correlation", correlation ? json(*correlation) : json(nullptr)}};
}

double name_projection(const Model& model, std::span<const float> v, std::span<const float> resid, TokenId token) {
  const int d = model.config.d_model;
  if (static_cast<int>(v.size()) != d || static_cast<int>(resid.size()) != d) {
    throw PreconditionError("projection vectors must have width d_model");
  }
  const Eigen::Map<const RowVector> r(resid.data(), d);
  const Eigen::Map<const RowVector> x(v.data(), d);
  const double var = (r.array() - r.mean()).square().mean();
  const double sd = std::sqrt(var + model.config.layer_norm_epsilon);
  const RowVector centered = (x.array() - x.mean()).matrix();
  return centered.cwiseProduct(model.params.ln_final.gain).dot(model.params.unembed().row(token)) / sd;
}

Scatter nm_scatter(const Model& model, int layer, int head, std::span<const PromptSample> samples, Role name,
                   int batch_size) {
  check_head(model.config, layer, head);
  const auto& cfg = model.config;
  const int d = cfg.d_model;
  const auto pat_key = HookKey::of_head(Site::head_pattern, layer, head);
  const auto out_key = HookKey::of_head(Site::head_output, layer, head);
  ForwardOptions fo;
  fo.capture = {pat_key, out_key, HookKey::resid_final()};
  fo.logits = LogitsMode::none;
  const bool is_s = name == Role::S1 || name == Role::S2;
  Scatter out;
  std::vector<ScatterPoint> pts(samples.size());
  for_each_batch(samples, batch_size, [&](const std::vector<int>& idx, const std::vector<TokenSequence>& toks) {
    const auto res = forward(model, toks, {}, fo);
    const Tensor& p = res.cache.at(pat_key);
    const Tensor& h = res.cache.at(out_key);
    const Tensor& rf = res.cache.at(HookKey::resid_final());
    for (size_t b = 0; b < idx.size(); ++b) {
      const auto& s = samples[idx[b]];
      const int end = s.pos.end;
      const float* prow = row_at(p, b, end);
      const double attn = is_s ? prow[s.pos.s1] + prow[s.pos.s2] : prow[s.pos.at(name)];
      const TokenId tok = is_s ? s.s_name : s.tokens.at(s.pos.at(name));
      const double proj = name_projection(model, {row_at(h, b, end), static_cast<size_t>(d)},
                                          {row_at(rf, b, end), static_cast<size_t>(d)}, tok);
      pts[idx[b]] = {attn, proj};
    }
  });
  out.points = std::move(pts);
  std::vector<double> xs, ys;
  for (const auto& q : out.points) {
    xs.push_back(q.attention);
    ys.push_back(q.projection);
  }
  out.correlation = pearson(xs, ys);
  return out;
}

namespace {

// Validates AA structure and returns half-length; sequences are grouped by length.
int check_repeated(const TokenSequence& s) {
  if (s.size() < 4 || s.size() % 2 != 0) throw PreconditionError("repeated sequence must have even length >= 4");
  const size_t L = s.size() / 2;
  if (!std::equal(s.begin(), s.begin() + L, s.begin() + L)) {
    throw PreconditionError("sequence is not two identical halves");
  }
  return static_cast<int>(L);
}

template <typename Fn>
void for_each_repeated_batch(const std::vector<TokenSequence>& seqs, const RepeatedOptions& o, Fn&& fn) {
  if (seqs.empty()) throw PreconditionError("no sequences");
  if (o.batch_size < 1) throw PreconditionError("batch size must be positive");
  std::map<int, std::vector<int>> by_half;
  for (size_t i = 0; i < seqs.size(); ++i) by_half[check_repeated(seqs[i])].push_back(static_cast<int>(i));
  for (const auto& [L, ids] : by_half) {
    for (size_t i0 = 0; i0 < ids.size(); i0 += o.batch_size) {
      std::vector<TokenSequence> batch;
      std::vector<int> idx;
      for (size_t i = i0; i < std::min(ids.size(), i0 + o.batch_size); ++i) {
        TokenSequence t;
        if (o.prepend_bos) t.push_back(o.bos_id);
        t.insert(t.end(), seqs[ids[i]].begin(), seqs[ids[i]].end());
        batch.push_back(std::move(t));
        idx.push_back(ids[i]);
      }
      fn(L, idx, batch);
    }
  }
}

}  // namespace

std::vector<ScoreReport> repeated_token_scores(const Model& model, const std::vector<TokenSequence>& sequences,
                                               const RepeatedOptions& opts) {
  const auto& cfg = model.config;
  ForwardOptions fo;
  fo.logits = LogitsMode::none;
  for (int l = 0; l < cfg.n_layers; ++l) {
    for (int h = 0; h < cfg.n_heads; ++h) fo.capture.insert(HookKey::of_head(Site::head_pattern, l, h));
  }
  std::vector<ScoreReport> reps(3);
  const ScoreKind kinds[3] = {ScoreKind::previous_token, ScoreKind::induction, ScoreKind::duplicate};
  std::vector<std::vector<std::vector<double>>> sums(3, empty_grid(cfg));
  int64_t counts[3] = {0, 0, 0};
  const int o = opts.prepend_bos ? 1 : 0;
  for_each_repeated_batch(sequences, opts, [&](int L, const std::vector<int>& idx,
                                               const std::vector<TokenSequence>& batch) {
    const auto res = forward(model, batch, {}, fo);
    const int64_t B = static_cast<int64_t>(idx.size());
    counts[0] += B * (2 * L - 1);
    counts[1] += B * L;
    counts[2] += B * L;
    const int N = 2 * L + o;
    for (int l = 0; l < cfg.n_layers; ++l) {
      for (int h = 0; h < cfg.n_heads; ++h) {
        const Tensor& p = res.cache.at(HookKey::of_head(Site::head_pattern, l, h));
        double prev = 0, ind = 0, dup = 0;
        for (int64_t b = 0; b < B; ++b) {
          const float* base = p.data() + b * N * N;
          // Queries start after the first real token; the start token is never a target.
          for (int t = 1; t < 2 * L; ++t) prev += base[(o + t) * N + (o + t - 1)];
          for (int t = L; t < 2 * L; ++t) {
            ind += base[(o + t) * N + (o + t - L + 1)];
            dup += base[(o + t) * N + (o + t - L)];
          }
        }
        sums[0][l][h] += prev;
        sums[1][l][h] += ind;
        sums[2][l][h] += dup;
      }
    }
  });
  for (int k = 0; k < 3; ++k) {
    reps[k].kind = kinds[k];
    reps[k].grid = sums[k];
    for (auto& row : reps[k].grid) {
      for (auto& v : row) v /= static_cast<double>(counts[k]);
    }
    reps[k].n_samples = static_cast<int>(sequences.size());
    reps[k].seed = opts.seed;
  }
  return reps;
}

ScoreReport copy_on_repeats(const Model& model, const std::vector<TokenSequence>& sequences,
                            const RepeatedOptions& opts) {
  const auto& cfg = model.config;
  const int dh = cfg.head_dim();
  ForwardOptions fo;
  fo.logits = LogitsMode::none;
  for (int l = 0; l < cfg.n_layers; ++l) {
    for (int h = 0; h < cfg.n_heads; ++h) fo.capture.insert(HookKey::of_head(Site::head_z, l, h));
  }
  auto sums = empty_grid(cfg);
  int64_t count = 0;
  const int o = opts.prepend_bos ? 1 : 0;
  const auto& W_U = model.params.unembed();
  for_each_repeated_batch(sequences, opts, [&](int L, const std::vector<int>& idx,
                                               const std::vector<TokenSequence>& batch) {
    const auto res = forward(model, batch, {}, fo);
    const int N = 2 * L + o;
    for (size_t b = 0; b < idx.size(); ++b) {
      for (int t = L; t < 2 * L - 1; ++t) {
        const int q = o + t;
        const RowVector u = W_U.row(batch[b][q + 1]);
        ++count;
        for (int l = 0; l < cfg.n_layers; ++l) {
          // w = W_O u for all heads at once; head h uses rows h*dh..(h+1)*dh.
          const Eigen::VectorXf w = model.params.blocks[l].w_out * u.transpose();
          for (int h = 0; h < cfg.n_heads; ++h) {
            const Tensor& z = res.cache.at(HookKey::of_head(Site::head_z, l, h));
            const Eigen::Map<const Eigen::VectorXf> zr(z.data() + (b * N + q) * dh, dh);
            sums[l][h] += zr.dot(w.segment(h * dh, dh));
          }
        }
      }
    }
  });
  ScoreReport rep;
  rep.kind = ScoreKind::copy_on_repeats;
  rep.grid = sums;
  if (count > 0) {
    for (auto& row : rep.grid) {
      for (auto& v : row) v /= static_cast<double>(count);
    }
  }
  rep.n_samples = static_cast<int>(sequences.size());
  rep.seed = opts.seed;
  return rep;
}

json BackupResult::to_json() const {
  json hs = json::array();
  for (const auto& h : heads) hs.push_back({{"layer", h.layer}, {"head", h.head}, {"effect", h.effect}});
  return {{"F_model", F_model}, {"F_knocked", F_knocked}, {"heads", hs}, {"sweep", sweep.to_json()}};
}

BackupResult backup_discovery(const Model& model, std::span<const PromptSample> x_orig,
                              std::span<const PromptSample> x_new, const BackupOptions& opts) {
  for (const auto& n : opts.knocked) {
    if (n.kind != NodeKind::attention_head) throw PreconditionError("knocked nodes must be attention heads");
    n.validate(model.config);
  }
  const int n = opts.n_samples > 0 ? std::min<int>(opts.n_samples, static_cast<int>(x_orig.size()))
                                   : static_cast<int>(x_orig.size());
  const auto orig = x_orig.first(n);
  BackupResult out;
  out.F_model = baseline(model, orig, {opts.batch_size, false}).mean_logit_diff();
  out.F_knocked = opts.knocked.empty()
                      ? out.F_model
                      : knockout(model, orig, opts.knocked, opts.mode, {opts.batch_size, false}).mean_logit_diff();
  PathPatchOptions po;
  po.batch_size = opts.batch_size;
  po.knockout = opts.knocked;
  po.knockout_mode = opts.mode;
  po.threads = opts.threads;
  out.sweep = sweep(model, x_orig, x_new, {ReceiverRef::final_residual(PositionSpec::of(Role::END))},
                    PositionSpec::all(), n, po);
  std::set<std::pair<int, int>> skip(opts.exclude.begin(), opts.exclude.end());
  for (const auto& k : opts.knocked) skip.insert({k.layer, k.head});
  const double cut = opts.threshold * std::abs(out.F_model);
  for (int l = 0; l < model.config.n_layers; ++l) {
    for (int h = 0; h < model.config.n_heads; ++h) {
      if (!out.sweep.valid[l][h] || skip.count({l, h})) continue;
      const double e = out.sweep.matrix[l][h];
      if (std::abs(e) >= cut) out.heads.push_back({l, h, e});
    }
  }
  std::stable_sort(out.heads.begin(), out.heads.end(),
                   [](const BackupHead& a, const BackupHead& b) { return std::abs(a.effect) > std::abs(b.effect); });
  return out;
}

json SignalFit::to_json() const { return {{"a", a}, {"b", b}, {"mean_rel_error", mean_rel_error}}; }

SignalFit token_position_fit(const std::map<std::pair<int, int>, double>& cells) {
  Eigen::MatrixXd X(6, 2);
  Eigen::VectorXd y(6);
  int r = 0;
  for (int tok : {1, 0, -1}) {
    for (int pos : {1, -1}) {
      auto it = cells.find({tok, pos});
      if (it == cells.end()) {
        throw PreconditionError("missing cell (S_tok=" + std::to_string(tok) + ", S_pos=" + std::to_string(pos) + ")");
      }
      X(r, 0) = pos;
      X(r, 1) = tok;
      y(r) = it->second;
      ++r;
    }
  }
  const Eigen::Vector2d coef = X.colPivHouseholderQr().solve(y);
  SignalFit fit;
  fit.a = coef(0);
  fit.b = coef(1);
  const double err = (X * coef - y).cwiseAbs().mean();
  const double base = std::abs(cells.at({1, 1}));
  fit.mean_rel_error = base > 0 ? err / base : (err == 0 ? 0.0 : std::numeric_limits<double>::infinity());
  return fit;
}

}  // namespace cwb
