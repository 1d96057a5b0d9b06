#pragma once

#include "cwb/interventions.hpp"

#include <optional>

namespace cwb {

enum class ScoreKind { copy, negative_copy, duplicate, induction, previous_token, copy_on_repeats };

const char* score_kind_name(ScoreKind k);

// One value per head, [layer][head].
struct ScoreReport {
  ScoreKind kind = ScoreKind::copy;
  std::vector<std::vector<double>> grid;
  int n_samples = 0;
  uint64_t seed = 0;

  double at(int layer, int head) const { return grid.at(layer).at(head); }
  // Heads sorted by descending value (ties by layer, head).
  std::vector<std::pair<int, int>> ranked() const;
  std::vector<std::pair<int, int>> top(size_t k) const;
  nlohmann::json to_json() const;
  // layer,head,value rows.
  std::string to_csv() const;
};

struct CopyScoreOptions {
  int sign = 1;
  int top_k = 5;
  int batch_size = 32;
  int threads = 0;
};

// Fraction of (sample, name) pairs whose name token is among the top_k logits after
// the residual at the IO and S1 positions (post block 0) is passed through the head's
// layer norm, sign * OV, the final layer norm and the unembedding.
double copy_score(const Model& model, int layer, int head, std::span<const PromptSample> samples,
                  const CopyScoreOptions& opts = {});
// Every head; kind is copy for sign +1 and negative_copy for sign -1.
ScoreReport copy_scores(const Model& model, std::span<const PromptSample> samples, const CopyScoreOptions& opts = {});

struct MeanStd {
  double mean = 0.0;
  double std = 0.0;
  int n = 0;
};

// Attention probability from `from` to `to`, over samples and heads.
MeanStd attention_stat(const Model& model, const std::vector<std::pair<int, int>>& heads,
                       std::span<const PromptSample> samples, Role from, Role to, int batch_size = 32);

// Pearson correlation; nullopt when either input has no variance.
std::optional<double> pearson(std::span<const double> x, std::span<const double> y);

struct ScatterPoint {
  double attention = 0.0;
  double projection = 0.0;
};

struct Scatter {
  std::vector<ScatterPoint> points;
  std::optional<double> correlation;
  nlohmann::json to_json() const;
};

// <LN_final(v), W_U[token]> with the final layer norm's scale taken from `resid`
// (the residual v contributes to) and no bias; linear in v.
double name_projection(const Model& model, std::span<const float> v, std::span<const float> resid, TokenId token);

// Attention from END to the name against the projection of the head's END output on
// W_U[name] (scaled by the final layer norm of the END residual). For Role::S1 or
// Role::S2 the attention sums over both S positions and the name is S; otherwise it
// is the token at the role.
Scatter nm_scatter(const Model& model, int layer, int head, std::span<const PromptSample> samples, Role name,
                   int batch_size = 32);

struct RepeatedOptions {
  bool prepend_bos = true;
  TokenId bos_id = 50256;
  int batch_size = 4;
  uint64_t seed = 0;  // recorded in the reports
};

// previous_token, induction and duplicate scores on AA sequences; throws
// PreconditionError unless each sequence is two identical halves.
std::vector<ScoreReport> repeated_token_scores(const Model& model, const std::vector<TokenSequence>& sequences,
                                               const RepeatedOptions& opts = {});

// Mean <z W_O^h, W_U[next token]> over second-half positions (no bias share).
ScoreReport copy_on_repeats(const Model& model, const std::vector<TokenSequence>& sequences,
                            const RepeatedOptions& opts = {});

struct BackupOptions {
  std::vector<NodeRef> knocked;
  AblationMode mode;
  double threshold = 0.02;
  // Heads left out of the result (already classified or knocked out).
  std::vector<std::pair<int, int>> exclude;
  int n_samples = 0;  // 0 means all
  int batch_size = 32;
  int threads = 0;
};

struct BackupHead {
  int layer = 0;
  int head = 0;
  double effect = 0.0;  // patched minus baseline logit difference
};

struct BackupResult {
  double F_model = 0.0;
  double F_knocked = 0.0;
  SweepResult sweep;
  std::vector<BackupHead> heads;  // |effect| >= threshold * |F_model|, largest first
  nlohmann::json to_json() const;
};

// Logits path-patching sweep (sender at every position, receiver the END residual)
// with the knockout active in every pass.
BackupResult backup_discovery(const Model& model, std::span<const PromptSample> x_orig,
                              std::span<const PromptSample> x_new, const BackupOptions& opts);

struct SignalFit {
  double a = 0.0;  // S_pos coefficient
  double b = 0.0;  // S_tok coefficient
  double mean_rel_error = 0.0;  // mean |fit - value| over the cells, divided by |value at (1, 1)|
  nlohmann::json to_json() const;
};

// Least-squares fit of a * S_pos + b * S_tok without intercept. Keys are
// (S_tok, S_pos); all six cells with S_tok in {1, 0, -1} and S_pos in {1, -1} are required.
SignalFit token_position_fit(const std::map<std::pair<int, int>, double>& cells);

}  // namespace cwb
