#pragma once

#include "cwb/forward.hpp"

#include <span>

namespace cwb {

// logits[io] - logits[s]; throws std::out_of_range on bad ids.
float logit_diff(std::span<const float> logits, TokenId io, TokenId s);
// Softmax over the full vocabulary evaluated at io.
double io_probability(std::span<const float> logits, TokenId io);

// Logits of batch row b at the last captured logit position.
std::span<const float> last_logits(const Tensor& logits, int64_t b);

// <v', W_U[token]> where v' is v passed through the final layer norm's
// centering, normalization and gain when apply_final_ln is set.
float unembed_projection(const Model& model, const RowVector& v, TokenId token, bool apply_final_ln);

struct EffectiveMatrices {
  MatrixRM qk;  // W_Q W_K^T, [d, d]
  MatrixRM ov;  // W_V W_O, [d, d] (row-vector convention: x -> x * ov)
};
EffectiveMatrices effective_matrices(const Model& model, int layer, int head);

// Per-head output h_{l,j}(x), [B, N, d]. Uses a captured head_output when present,
// otherwise rebuilds it from a captured head_z.
Tensor head_output(const Model& model, const ActivationCache& cache, int layer, int head);

// Numerical rank by singular values above tol * largest.
int numerical_rank(const MatrixRM& m, double tol = 1e-5);

}  // namespace cwb
