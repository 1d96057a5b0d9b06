#pragma once

#include "cwb/hooks.hpp"
#include "cwb/model.hpp"
#include "cwb/tokenizer.hpp"

#include <set>

namespace cwb {

enum class LogitsMode { all, last, none };

struct ForwardOptions {
  std::set<HookKey> capture;
  LogitsMode logits = LogitsMode::last;
  // Resume from the residual stream entering `start_layer` ([B, N, d]); tokens are
  // then only used for their shape and may be empty. Edits at sites in earlier
  // layers (and on embed) are ignored.
  int start_layer = 0;
  std::shared_ptr<const Tensor> start_residual;
  // Stop after this block (no logits); -1 runs the full model.
  int stop_after_layer = -1;
};

struct ForwardResult {
  Tensor logits;  // [B, N, V] for LogitsMode::all, [B, 1, V] for last, empty for none
  ActivationCache cache;
};

// Batched forward over equal-length sequences. Captured activations hold the
// post-edit values at edited sites.
ForwardResult forward(const Model& model, const std::vector<TokenSequence>& batch,
                      const EditSet& edits = {}, const ForwardOptions& options = {});

ForwardResult forward_one(const Model& model, const TokenSequence& tokens, const EditSet& edits = {},
                          const ForwardOptions& options = {});

// Final layer norm applied to rows of x, in place.
void layer_norm_rows(MatrixRM& x, const LayerNormParams& ln, float eps);
// Normalization and gain only (no bias), as used for direct logit attribution.
RowVector layer_norm_scale_only(const RowVector& x, const LayerNormParams& ln, float eps);

float gelu_new(float x);

}  // namespace cwb
