#pragma once

#include "cwb/ioi_data.hpp"
#include "cwb/metrics.hpp"

#include <functional>
#include <span>

namespace cwb {

// Which token positions of a sample a node or receiver refers to.
struct PositionSpec {
  enum class Kind { all, index, role, except_roles };
  Kind kind = Kind::all;
  int index = -1;
  std::vector<Role> roles;  // one role for Kind::role

  static PositionSpec all() { return {}; }
  static PositionSpec at(int i) { return {Kind::index, i, {}}; }
  static PositionSpec of(Role r) { return {Kind::role, -1, {r}}; }
  static PositionSpec except(std::vector<Role> rs) { return {Kind::except_roles, -1, std::move(rs)}; }

  bool is_all() const { return kind == Kind::all; }
  // Ascending positions; throws PreconditionError when a position is outside the sample.
  std::vector<int> resolve(const PromptSample& s) const;
  // "all", "7", "END", "except:END,S2"
  std::string str() const;
  static PositionSpec parse(const std::string& text);

  friend bool operator==(const PositionSpec&, const PositionSpec&) = default;
};

enum class NodeKind { attention_head, mlp };

struct NodeRef {
  NodeKind kind = NodeKind::attention_head;
  int layer = 0;
  int head = -1;
  PositionSpec pos;

  static NodeRef head_at(int layer, int head, PositionSpec p = PositionSpec::all()) {
    return {NodeKind::attention_head, layer, head, std::move(p)};
  }
  static NodeRef mlp_at(int layer, PositionSpec p = PositionSpec::all()) {
    return {NodeKind::mlp, layer, -1, std::move(p)};
  }
  // The site mean ablation and patching edit: head_z for heads, mlp_output for MLPs.
  // Zero ablation of a head edits head_output instead.
  HookKey site() const;
  void validate(const ModelConfig& cfg) const;
  std::string str() const;  // "9.9@END", "mlp3@all"

  friend bool operator==(const NodeRef&, const NodeRef&) = default;
};

// A receiver of a path-patching intervention.
struct ReceiverRef {
  Site site = Site::resid_final;  // head_query, head_key, head_value or resid_final
  int layer = 0;
  int head = -1;
  PositionSpec pos;

  static ReceiverRef query(int l, int h, PositionSpec p) { return {Site::head_query, l, h, std::move(p)}; }
  static ReceiverRef key(int l, int h, PositionSpec p) { return {Site::head_key, l, h, std::move(p)}; }
  static ReceiverRef value(int l, int h, PositionSpec p) { return {Site::head_value, l, h, std::move(p)}; }
  static ReceiverRef final_residual(PositionSpec p) { return {Site::resid_final, 0, -1, std::move(p)}; }

  HookKey hook() const;
  // Layer in which the receiver is read; n_layers for the final residual.
  int depth(const ModelConfig& cfg) const;
  void validate(const ModelConfig& cfg) const;
  std::string str() const;

  friend bool operator==(const ReceiverRef&, const ReceiverRef&) = default;
};

struct PatchSpec {
  NodeRef sender;
  std::vector<ReceiverRef> receivers;
  // Patched together with `sender`. Senders may be heads or MLPs.
  std::vector<NodeRef> more_senders;

  std::vector<NodeRef> senders() const;
  // Throws PreconditionError unless every receiver is strictly downstream of every sender.
  void validate(const ModelConfig& cfg) const;
};

struct AblationMode {
  enum class Variant { zero, mean };
  Variant variant = Variant::zero;
  const MeanCache* cache = nullptr;

  static AblationMode zero() { return {}; }
  static AblationMode mean(const MeanCache& c) { return {Variant::mean, &c}; }
};

struct SampleOutcome {
  float logit_diff = 0.0f;
  double io_prob = 0.0;
  double s_prob = 0.0;
  TokenId top = -1;
};

struct Outcomes {
  std::vector<SampleOutcome> rows;
  Tensor logits;  // [S, V] END logits when RunOptions::keep_logits is set

  double mean_logit_diff() const;
  double mean_io_prob() const;
  // Fraction of samples with logit(IO) > logit(S).
  double io_over_s_rate() const;
};

struct RunOptions {
  int batch_size = 32;
  bool keep_logits = false;
};

// Groups sample indices into batches of equal length (stable within a length).
std::vector<std::vector<int>> length_batches(std::span<const PromptSample> samples, int max_batch);

SampleOutcome score_logits(std::span<const float> logits, const PromptSample& s);

// Edits ablating `nodes` for one batch of equal-length samples.
EditSet knockout_edits(const ModelConfig& cfg, std::span<const PromptSample* const> batch,
                       const std::vector<NodeRef>& nodes, const AblationMode& mode);

Outcomes baseline(const Model& model, std::span<const PromptSample> samples, const RunOptions& opts = {});

Outcomes knockout(const Model& model, std::span<const PromptSample> samples, const std::vector<NodeRef>& nodes,
                  const AblationMode& mode, const RunOptions& opts = {});

// Nodes take their x_new activations at role-aligned positions; everything else recomputes.
Outcomes activation_patch(const Model& model, std::span<const PromptSample> x_orig,
                          std::span<const PromptSample> x_new, const std::vector<NodeRef>& nodes,
                          const RunOptions& opts = {});

struct PathPatchOptions {
  int batch_size = 32;
  bool keep_logits = false;
  // Ablated in every pass.
  std::vector<NodeRef> knockout;
  AblationMode knockout_mode;
  int threads = 0;
  std::function<void(double)> progress;
  // path_patch only: activations captured in pass D (sites at or after the first
  // receiver layer), handed to `inspect` with the batch's sample indices.
  std::set<HookKey> capture;
  std::function<void(const std::vector<int>&, const ActivationCache&)> inspect;
};

// Four-pass path patching: A = cache on x_new, B = cache on x_orig, C = x_orig with
// every head frozen to B except the senders (taken from A) and MLPs recomputed,
// D = x_orig with receivers overwritten by their values in C.
Outcomes path_patch(const Model& model, std::span<const PromptSample> x_orig, std::span<const PromptSample> x_new,
                    const PatchSpec& spec, const PathPatchOptions& opts = {});

struct SweepResult {
  std::vector<ReceiverRef> receivers;
  PositionSpec sender_pos;
  int n_samples = 0;
  uint64_t seed = 0;
  double baseline = 0.0;  // mean logit difference without patching
  // [layer][head] mean of patched minus baseline logit difference; entries for
  // senders with no downstream receiver are 0 and flagged false in `valid`.
  std::vector<std::vector<double>> matrix;
  std::vector<std::vector<bool>> valid;

  nlohmann::json to_json() const;
  // (layer, head) pairs sorted by ascending value.
  std::vector<std::pair<int, int>> ranked() const;
};

// Path patching of every head as sender, over the first n_samples pairs.
SweepResult sweep(const Model& model, std::span<const PromptSample> x_orig, std::span<const PromptSample> x_new,
                  const std::vector<ReceiverRef>& receivers, const PositionSpec& sender_pos, int n_samples,
                  const PathPatchOptions& opts = {});

nlohmann::json to_json(const PositionSpec& p);
nlohmann::json to_json(const NodeRef& n);
nlohmann::json to_json(const ReceiverRef& r);
NodeRef node_from_json(const nlohmann::json& j);
ReceiverRef receiver_from_json(const nlohmann::json& j);

}  // namespace cwb
