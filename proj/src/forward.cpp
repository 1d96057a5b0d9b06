#include "cwb/forward.hpp"

#include "cwb/errors.hpp"

#include <cmath>

namespace cwb {

float gelu_new(float x) {
  constexpr float kC = 0.7978845608028654f;  // sqrt(2/pi)
  return 0.5f * x * (1.0f + std::tanh(kC * (x + 0.044715f * x * x * x)));
}

void layer_norm_rows(MatrixRM& x, const LayerNormParams& ln, float eps) {
  const int64_t d = x.cols();
  for (int64_t r = 0; r < x.rows(); ++r) {
    float* row = x.data() + r * d;
    double mean = 0.0;
    for (int64_t c = 0; c < d; ++c) mean += row[c];
    mean /= static_cast<double>(d);
    double var = 0.0;
    for (int64_t c = 0; c < d; ++c) {
      const double dv = row[c] - mean;
      var += dv * dv;
    }
    var /= static_cast<double>(d);
    const float inv = static_cast<float>(1.0 / std::sqrt(var + eps));
    const float m = static_cast<float>(mean);
    for (int64_t c = 0; c < d; ++c) row[c] = (row[c] - m) * inv * ln.gain[c] + ln.bias[c];
  }
}

RowVector layer_norm_scale_only(const RowVector& x, const LayerNormParams& ln, float eps) {
  const double mean = x.cast<double>().mean();
  const double var = (x.cast<double>().array() - mean).square().mean();
  const float inv = static_cast<float>(1.0 / std::sqrt(var + eps));
  RowVector out = ((x.array() - static_cast<float>(mean)) * inv * ln.gain.array()).matrix();
  return out;
}

namespace {

// Strided window onto a [B, N, w] activation inside a larger buffer.
struct View {
  float* base;
  int64_t batch_stride;
  int64_t pos_stride;
  int64_t width;

  float* at(int64_t b, int64_t n) const { return base + b * batch_stride + n * pos_stride; }
};

class HookRunner {
 public:
  HookRunner(const ModelConfig& cfg, int64_t batch, int64_t len, const EditSet& edits,
             const ForwardOptions& opts, ActivationCache& cache)
      : cfg_(cfg), B_(batch), N_(len), capture_(opts.capture), cache_(cache) {
    for (const auto& key : capture_) validate_key(cfg, key);
    for (const Edit& e : edits.edits()) {
      validate_key(cfg, e.key);
      e.where.check(B_, N_);
      if (e.action == Edit::Action::overwrite) {
        const int64_t w = site_width(cfg, e.key, N_);
        const Tensor* t = e.values.data.get();
        if (!t || t->rank() != 3 || t->dim(1) != N_ || t->dim(2) != w) {
          throw InvalidHookError("overwrite values for " + e.key.str() + " must be [R, " +
                                 std::to_string(N_) + ", " + std::to_string(w) + "]" +
                                 (t ? ", got " + shape_string(t->shape()) : std::string()));
        }
        if (e.values.row_of.empty() ? t->dim(0) != B_
                                    : static_cast<int64_t>(e.values.row_of.size()) != B_) {
          throw InvalidHookError("overwrite values for " + e.key.str() + " do not cover the batch");
        }
        for (int r : e.values.row_of) {
          if (r < 0 || r >= t->dim(0)) throw InvalidHookError("edit row map out of range");
        }
      }
      by_key_[e.key].push_back(&e);
    }
  }

  bool has_edit(const HookKey& k) const { return by_key_.count(k) > 0; }
  bool captures(const HookKey& k) const { return capture_.count(k) > 0; }
  bool touches(const HookKey& k) const { return has_edit(k) || captures(k); }

  // True when some edit replaces every entry of the site.
  bool fully_replaced(const HookKey& k) const {
    auto it = by_key_.find(k);
    if (it == by_key_.end()) return false;
    for (const Edit* e : it->second) {
      if (e->where.covers_all()) return true;
    }
    return false;
  }

  void run(const HookKey& key, const View& v) {
    if (auto it = by_key_.find(key); it != by_key_.end()) {
      for (const Edit* e : it->second) apply(*e, v);
    }
    if (captures(key)) {
      auto t = std::make_shared<Tensor>(std::vector<int64_t>{B_, N_, v.width});
      float* out = t->data();
      for (int64_t b = 0; b < B_; ++b) {
        for (int64_t n = 0; n < N_; ++n) {
          std::copy_n(v.at(b, n), v.width, out + (b * N_ + n) * v.width);
        }
      }
      cache_.put(key, std::move(t));
    }
  }

 private:
  void apply(const Edit& e, const View& v) {
    for (int64_t b = 0; b < B_; ++b) {
      const float* src = e.action == Edit::Action::overwrite ? e.values.row(b) : nullptr;
      for (int64_t n = 0; n < N_; ++n) {
        if (!e.where.selected(b, n)) continue;
        float* dst = v.at(b, n);
        if (src) {
          std::copy_n(src + n * v.width, v.width, dst);
        } else {
          std::fill_n(dst, v.width, 0.0f);
        }
      }
    }
  }

  const ModelConfig& cfg_;
  int64_t B_, N_;
  const std::set<HookKey>& capture_;
  ActivationCache& cache_;
  std::map<HookKey, std::vector<const Edit*>> by_key_;
};

View dense_view(MatrixRM& m, int64_t len) {
  return View{m.data(), len * m.cols(), m.cols(), m.cols()};
}

}  // namespace

ForwardResult forward(const Model& model, const std::vector<TokenSequence>& batch, const EditSet& edits,
                      const ForwardOptions& opts) {
  const ModelConfig& cfg = model.config;
  const ModelParams& P = model.params;
  const int64_t d = cfg.d_model, H = cfg.n_heads, dh = cfg.head_dim();
  const bool resume = opts.start_residual != nullptr;
  int64_t B = 0, N = 0;
  if (resume) {
    const Tensor& r = *opts.start_residual;
    if (r.rank() != 3 || r.dim(2) != d) throw InvalidHookError("start residual must be [B, N, d]");
    B = r.dim(0);
    N = r.dim(1);
  } else {
    if (opts.start_layer != 0) throw InvalidHookError("start_layer > 0 requires a start residual");
    B = static_cast<int64_t>(batch.size());
    N = B ? static_cast<int64_t>(batch[0].size()) : 0;
    for (const auto& seq : batch) {
      if (static_cast<int64_t>(seq.size()) != N) throw PreconditionError("batch sequences differ in length");
      for (TokenId t : seq) {
        if (t < 0 || t >= cfg.vocab_size) throw PreconditionError("token id out of range");
      }
    }
  }
  if (N > cfg.max_context) {
    throw PreconditionError("sequence length " + std::to_string(N) + " exceeds context " +
                            std::to_string(cfg.max_context));
  }
  if (opts.start_layer < 0 || opts.start_layer > cfg.n_layers) throw InvalidHookError("bad start layer");

  ForwardResult result;
  result.cache.set_shape(B, N);
  if (B == 0 || N == 0) return result;
  HookRunner hooks(cfg, B, N, edits, opts, result.cache);
  const int64_t BN = B * N;

  MatrixRM x(BN, d);
  if (resume) {
    std::copy_n(opts.start_residual->data(), BN * d, x.data());
  } else {
    for (int64_t b = 0; b < B; ++b) {
      for (int64_t n = 0; n < N; ++n) {
        x.row(b * N + n) = P.token_embed.row(batch[b][n]) + P.pos_embed.row(n);
      }
    }
    hooks.run(HookKey::embed(), dense_view(x, N));
  }

  const float scale = 1.0f / std::sqrt(static_cast<float>(dh));
  MatrixRM h_in, qkv, z, attn_out, mlp_hidden, mlp_out, head_out;
  std::vector<float> pattern;
  std::vector<char> need_qkv(H), need_attn(H), out_replaced(H), z_replaced(H);

  const int last_layer = opts.stop_after_layer < 0 ? cfg.n_layers - 1 : opts.stop_after_layer;
  for (int l = opts.start_layer; l <= last_layer && l < cfg.n_layers; ++l) {
    const BlockParams& blk = P.blocks[l];

    // Decide which heads must actually be computed.
    bool any_qkv = false, all_qkv = true, any_head_out_hook = false;
    for (int h = 0; h < H; ++h) {
      auto key = [&](Site s) { return HookKey::of_head(s, l, h); };
      out_replaced[h] = hooks.fully_replaced(key(Site::head_output));
      z_replaced[h] = hooks.fully_replaced(key(Site::head_z));
      const bool z_needed = !out_replaced[h] || hooks.captures(key(Site::head_z));
      const bool pattern_hooked = hooks.touches(key(Site::head_pattern));
      need_attn[h] = (z_needed && !z_replaced[h]) || pattern_hooked;
      need_qkv[h] = need_attn[h] || hooks.touches(key(Site::head_query)) ||
                    hooks.touches(key(Site::head_key)) || hooks.touches(key(Site::head_value));
      any_qkv |= need_qkv[h];
      all_qkv &= need_qkv[h];
      any_head_out_hook |= hooks.touches(key(Site::head_output));
    }

    z.setZero(BN, d);
    if (any_qkv) {
      h_in = x;
      layer_norm_rows(h_in, blk.ln1, cfg.layer_norm_epsilon);
      if (all_qkv) {
        qkv.noalias() = h_in * blk.w_qkv;
        qkv.rowwise() += blk.b_qkv;
      } else {
        qkv.setZero(BN, 3 * d);
        for (int h = 0; h < H; ++h) {
          if (!need_qkv[h]) continue;
          for (int part = 0; part < 3; ++part) {
            const int64_t c0 = part * d + h * dh;
            qkv.middleCols(c0, dh).noalias() = h_in * blk.w_qkv.middleCols(c0, dh);
            qkv.middleCols(c0, dh).rowwise() += blk.b_qkv.segment(c0, dh);
          }
        }
      }
      for (int h = 0; h < H; ++h) {
        if (!need_qkv[h]) continue;
        const Site sites[3] = {Site::head_query, Site::head_key, Site::head_value};
        for (int part = 0; part < 3; ++part) {
          hooks.run(HookKey::of_head(sites[part], l, h),
                    View{qkv.data() + part * d + h * dh, N * 3 * d, 3 * d, dh});
        }
      }
      pattern.assign(static_cast<size_t>(B * H * N * N), 0.0f);
      for (int h = 0; h < H; ++h) {
        if (!need_attn[h]) continue;
        for (int64_t b = 0; b < B; ++b) {
          const auto rows = qkv.middleRows(b * N, N);
          float* pat = pattern.data() + ((b * H + h) * N) * N;
          Eigen::Map<MatrixRM> p(pat, N, N);
          p.noalias() = rows.middleCols(h * dh, dh) * rows.middleCols(d + h * dh, dh).transpose();
          for (int64_t q = 0; q < N; ++q) {
            float mx = -INFINITY;
            for (int64_t k = 0; k <= q; ++k) {
              pat[q * N + k] *= scale;
              mx = std::max(mx, pat[q * N + k]);
            }
            double sum = 0.0;
            for (int64_t k = 0; k <= q; ++k) {
              const float e = std::exp(pat[q * N + k] - mx);
              pat[q * N + k] = e;
              sum += e;
            }
            const float inv = static_cast<float>(1.0 / sum);
            for (int64_t k = 0; k <= q; ++k) pat[q * N + k] *= inv;
            for (int64_t k = q + 1; k < N; ++k) pat[q * N + k] = 0.0f;
          }
        }
        hooks.run(HookKey::of_head(Site::head_pattern, l, h),
                  View{pattern.data() + h * N * N, H * N * N, N, N});
        for (int64_t b = 0; b < B; ++b) {
          Eigen::Map<const MatrixRM> p(pattern.data() + ((b * H + h) * N) * N, N, N);
          z.block(b * N, h * dh, N, dh).noalias() =
              p * qkv.block(b * N, 2 * d + h * dh, N, dh);
        }
      }
    }
    for (int h = 0; h < H; ++h) {
      const HookKey zk = HookKey::of_head(Site::head_z, l, h);
      if (hooks.touches(zk)) hooks.run(zk, View{z.data() + h * dh, N * d, d, dh});
    }

    if (any_head_out_hook) {
      attn_out.setZero(BN, d);
      const RowVector bias_share = blk.b_out / static_cast<float>(H);
      for (int h = 0; h < H; ++h) {
        if (out_replaced[h]) {
          head_out.setZero(BN, d);
        } else {
          head_out.noalias() = z.middleCols(h * dh, dh) * blk.w_out.middleRows(h * dh, dh);
          head_out.rowwise() += bias_share;
        }
        hooks.run(HookKey::of_head(Site::head_output, l, h), dense_view(head_out, N));
        attn_out += head_out;
      }
    } else {
      attn_out.noalias() = z * blk.w_out;
      attn_out.rowwise() += blk.b_out;
    }
    x += attn_out;

    const HookKey mk = HookKey::mlp(l);
    if (hooks.fully_replaced(mk)) {
      mlp_out.setZero(BN, d);
    } else {
      h_in = x;
      layer_norm_rows(h_in, blk.ln2, cfg.layer_norm_epsilon);
      mlp_hidden.noalias() = h_in * blk.w_fc;
      mlp_hidden.rowwise() += blk.b_fc;
      float* hp = mlp_hidden.data();
      for (int64_t i = 0; i < mlp_hidden.size(); ++i) hp[i] = gelu_new(hp[i]);
      mlp_out.noalias() = mlp_hidden * blk.w_proj;
      mlp_out.rowwise() += blk.b_proj;
    }
    hooks.run(mk, dense_view(mlp_out, N));
    x += mlp_out;
    hooks.run(HookKey::resid_post(l), dense_view(x, N));
  }

  if (opts.stop_after_layer >= 0 && opts.stop_after_layer < cfg.n_layers - 1) return result;
  hooks.run(HookKey::resid_final(), dense_view(x, N));
  if (opts.logits == LogitsMode::none) return result;

  const int64_t per = opts.logits == LogitsMode::all ? N : 1;
  MatrixRM final_rows(B * per, d);
  for (int64_t b = 0; b < B; ++b) {
    for (int64_t i = 0; i < per; ++i) {
      const int64_t n = opts.logits == LogitsMode::all ? i : N - 1;
      final_rows.row(b * per + i) = x.row(b * N + n);
    }
  }
  layer_norm_rows(final_rows, P.ln_final, cfg.layer_norm_epsilon);
  result.logits = Tensor({B, per, cfg.vocab_size});
  Eigen::Map<MatrixRM> out(result.logits.data(), B * per, cfg.vocab_size);
  out.noalias() = final_rows * P.unembed().transpose();
  return result;
}

ForwardResult forward_one(const Model& model, const TokenSequence& tokens, const EditSet& edits,
                          const ForwardOptions& options) {
  return forward(model, std::vector<TokenSequence>{tokens}, edits, options);
}

}  // namespace cwb
