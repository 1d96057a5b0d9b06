#include "cwb/metrics.hpp"

#include "cwb/errors.hpp"

#include <Eigen/SVD>

#include <cmath>
#include <stdexcept>

namespace cwb {

namespace {
void check_id(TokenId id, size_t vocab) {
  if (id < 0 || static_cast<size_t>(id) >= vocab) {
    throw std::out_of_range("token id " + std::to_string(id) + " outside vocabulary");
  }
}
}  // namespace

float logit_diff(std::span<const float> logits, TokenId io, TokenId s) {
  check_id(io, logits.size());
  check_id(s, logits.size());
  return logits[io] - logits[s];
}

double io_probability(std::span<const float> logits, TokenId io) {
  check_id(io, logits.size());
  float mx = -INFINITY;
  for (float v : logits) mx = std::max(mx, v);
  double sum = 0.0;
  for (float v : logits) sum += std::exp(static_cast<double>(v) - mx);
  return std::exp(static_cast<double>(logits[io]) - mx) / sum;
}

std::span<const float> last_logits(const Tensor& logits, int64_t b) {
  const int64_t per = logits.dim(1), V = logits.dim(2);
  return {logits.data() + (b * per + per - 1) * V, static_cast<size_t>(V)};
}

float unembed_projection(const Model& model, const RowVector& v, TokenId token, bool apply_final_ln) {
  check_id(token, static_cast<size_t>(model.config.vocab_size));
  const auto& U = model.params.unembed();
  if (apply_final_ln) {
    const RowVector n = layer_norm_scale_only(v, model.params.ln_final, model.config.layer_norm_epsilon);
    return n.dot(U.row(token));
  }
  return v.dot(U.row(token));
}

EffectiveMatrices effective_matrices(const Model& model, int layer, int head) {
  const auto& cfg = model.config;
  if (layer < 0 || layer >= cfg.n_layers || head < 0 || head >= cfg.n_heads) {
    throw PreconditionError("head index out of range");
  }
  const auto& blk = model.params.blocks[layer];
  const int64_t d = cfg.d_model, dh = cfg.head_dim();
  const auto wq = blk.w_qkv.middleCols(head * dh, dh);
  const auto wk = blk.w_qkv.middleCols(d + head * dh, dh);
  const auto wv = blk.w_qkv.middleCols(2 * d + head * dh, dh);
  const auto wo = blk.w_out.middleRows(head * dh, dh);
  EffectiveMatrices m;
  m.qk = wq * wk.transpose();
  m.ov = wv * wo;
  return m;
}

Tensor head_output(const Model& model, const ActivationCache& cache, int layer, int head) {
  const HookKey out_key = HookKey::of_head(Site::head_output, layer, head);
  if (cache.contains(out_key)) return cache.at(out_key);
  const HookKey z_key = HookKey::of_head(Site::head_z, layer, head);
  if (!cache.contains(z_key)) {
    throw PreconditionError("head " + std::to_string(layer) + "." + std::to_string(head) +
                            " output was not captured");
  }
  const Tensor& z = cache.at(z_key);
  const auto& cfg = model.config;
  const auto& blk = model.params.blocks[layer];
  const int64_t dh = cfg.head_dim();
  Tensor out({z.dim(0), z.dim(1), cfg.d_model});
  auto o = out.as_matrix();
  o.noalias() = z.as_matrix() * blk.w_out.middleRows(head * dh, dh);
  o.rowwise() += blk.b_out / static_cast<float>(cfg.n_heads);
  return out;
}

int numerical_rank(const MatrixRM& m, double tol) {
  Eigen::MatrixXd md = m.cast<double>();
  Eigen::BDCSVD<Eigen::MatrixXd> svd(md);
  const auto& s = svd.singularValues();
  if (s.size() == 0 || s[0] == 0.0) return 0;
  int r = 0;
  for (int i = 0; i < s.size(); ++i) {
    if (s[i] > tol * s[0]) ++r;
  }
  return r;
}

}  // namespace cwb
