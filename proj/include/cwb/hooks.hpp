#pragma once

#include "cwb/tensor.hpp"

#include <compare>
#include <map>
#include <memory>
#include <optional>
#include <string>
#include <vector>

namespace cwb {

struct ModelConfig;

enum class Site {
  embed,             // token + position embedding, [N, d]
  head_query,        // per head, after projection, [N, d/H]
  head_key,
  head_value,
  head_pattern,      // attention probabilities, [N_query, N_key]
  head_z,            // attention-weighted values before W_O, [N, d/H]
  head_output,       // per head, after W_O and its share of the output bias, [N, d]
  mlp_output,        // [N, d]
  resid_post_layer,  // residual after block `layer`, [N, d]
  resid_final,       // residual entering the final layer norm, [N, d]
};

const char* site_name(Site s);
std::optional<Site> parse_site(const std::string& name);
bool is_head_site(Site s);

// Identifies one activation tensor (all positions). Layer is ignored for
// embed and resid_final; head is -1 for non-head sites.
struct HookKey {
  Site site = Site::embed;
  int layer = 0;
  int head = -1;

  static HookKey embed() { return {Site::embed, 0, -1}; }
  static HookKey of_head(Site s, int layer, int head) { return {s, layer, head}; }
  static HookKey mlp(int layer) { return {Site::mlp_output, layer, -1}; }
  static HookKey resid_post(int layer) { return {Site::resid_post_layer, layer, -1}; }
  static HookKey resid_final() { return {Site::resid_final, 0, -1}; }

  std::string str() const;
  // Inverse of str(): "embed", "mlp_output.3", "head_pattern.9.9". Throws InvalidHookError.
  static HookKey parse(const std::string& text);
  auto operator<=>(const HookKey&) const = default;
};

// Last-axis width of the activation at `key` for a sequence of length n.
int64_t site_width(const ModelConfig& cfg, const HookKey& key, int64_t n);

// Throws InvalidHookError for keys that do not exist in this model.
void validate_key(const ModelConfig& cfg, const HookKey& key);

// Which (row, position) entries of a batch an edit touches.
class Selection {
 public:
  static Selection all() { return Selection(Kind::All, {}); }
  static Selection at(int position) { return Selection(Kind::Fixed, {position}); }
  // One position per batch row.
  static Selection per_row(std::vector<int> positions) { return Selection(Kind::PerRow, std::move(positions)); }
  // Every position except the given one, per batch row.
  static Selection per_row_except(std::vector<int> positions) {
    return Selection(Kind::PerRowExcept, std::move(positions));
  }
  // Arbitrary per-row position sets.
  static Selection sets(std::vector<std::vector<int>> positions);

  bool covers_all() const { return kind_ == Kind::All; }
  bool selected(int64_t row, int64_t position) const;
  // Validates against a batch shape; throws InvalidHookError.
  void check(int64_t batch, int64_t length) const;
  std::string describe() const;

 private:
  enum class Kind { All, Fixed, PerRow, PerRowExcept, Sets };
  Selection(Kind k, std::vector<int> p) : kind_(k), positions_(std::move(p)) {}
  Kind kind_;
  std::vector<int> positions_;
  std::vector<std::vector<int>> sets_;
};

// Replacement values for an edit: rows of `data` ([R, N, w]) are mapped to batch
// rows through `row_of` (identity when empty).
struct EditValues {
  std::shared_ptr<const Tensor> data;
  std::vector<int> row_of;

  const float* row(int64_t batch_row) const;
};

struct Edit {
  enum class Action { overwrite, zero };
  HookKey key;
  Selection where = Selection::all();
  Action action = Action::zero;
  EditValues values;  // overwrite only

  static Edit zero(HookKey key, Selection where = Selection::all()) {
    return Edit{key, std::move(where), Action::zero, {}};
  }
  static Edit overwrite(HookKey key, std::shared_ptr<const Tensor> values,
                        Selection where = Selection::all(), std::vector<int> row_of = {}) {
    return Edit{key, std::move(where), Action::overwrite, {std::move(values), std::move(row_of)}};
  }
};

class ActivationCache;

// Ordered list of edits; applied in list order at each site.
class EditSet {
 public:
  EditSet& add(Edit e) {
    edits_.push_back(std::move(e));
    return *this;
  }
  // Overwrite `key` with the value stored in `reference` (same batch layout).
  EditSet& freeze_to(const HookKey& key, const ActivationCache& reference,
                     Selection where = Selection::all());
  EditSet& zero(const HookKey& key, Selection where = Selection::all()) {
    return add(Edit::zero(key, std::move(where)));
  }
  EditSet& append(const EditSet& other) {
    edits_.insert(edits_.end(), other.edits_.begin(), other.edits_.end());
    return *this;
  }
  const std::vector<Edit>& edits() const { return edits_; }
  bool empty() const { return edits_.empty(); }
  size_t size() const { return edits_.size(); }

 private:
  std::vector<Edit> edits_;
};

// Activations captured during one batched forward pass; each entry is [B, N, w].
class ActivationCache {
 public:
  void put(const HookKey& key, std::shared_ptr<Tensor> t) { entries_[key] = std::move(t); }
  bool contains(const HookKey& key) const { return entries_.count(key) > 0; }
  // Throws PreconditionError when the key was not captured.
  const Tensor& at(const HookKey& key) const;
  std::shared_ptr<const Tensor> shared(const HookKey& key) const;
  const std::map<HookKey, std::shared_ptr<Tensor>>& entries() const { return entries_; }
  int64_t sequence_length() const { return seq_len_; }
  int64_t batch_size() const { return batch_; }
  void set_shape(int64_t batch, int64_t seq_len) {
    batch_ = batch;
    seq_len_ = seq_len;
  }

 private:
  std::map<HookKey, std::shared_ptr<Tensor>> entries_;
  int64_t batch_ = 0;
  int64_t seq_len_ = 0;
};

}  // namespace cwb
