#include "cwb/hooks.hpp"

#include "cwb/errors.hpp"
#include "cwb/model.hpp"

#include <sstream>

namespace cwb {

namespace {
constexpr std::pair<Site, const char*> kSiteNames[] = {
    {Site::embed, "embed"},
    {Site::head_query, "head_query"},
    {Site::head_key, "head_key"},
    {Site::head_value, "head_value"},
    {Site::head_pattern, "head_pattern"},
    {Site::head_z, "head_z"},
    {Site::head_output, "head_output"},
    {Site::mlp_output, "mlp_output"},
    {Site::resid_post_layer, "resid_post_layer"},
    {Site::resid_final, "resid_final"},
};
}  // namespace

const char* site_name(Site s) {
  for (auto& [site, name] : kSiteNames) {
    if (site == s) return name;
  }
  return "?";
}

std::optional<Site> parse_site(const std::string& name) {
  for (auto& [site, n] : kSiteNames) {
    if (name == n) return site;
  }
  return std::nullopt;
}

bool is_head_site(Site s) {
  switch (s) {
    case Site::head_query:
    case Site::head_key:
    case Site::head_value:
    case Site::head_pattern:
    case Site::head_z:
    case Site::head_output:
      return true;
    default:
      return false;
  }
}

std::string HookKey::str() const {
  std::string out = site_name(site);
  if (site == Site::embed || site == Site::resid_final) return out;
  out += "." + std::to_string(layer);
  if (head >= 0) out += "." + std::to_string(head);
  return out;
}

HookKey HookKey::parse(const std::string& text) {
  std::vector<std::string> parts;
  std::stringstream in(text);
  for (std::string p; std::getline(in, p, '.');) parts.push_back(p);
  const auto site = parts.empty() ? std::nullopt : parse_site(parts[0]);
  if (!site) throw InvalidHookError("unknown hook site in '" + text + "'");
  const size_t want = (*site == Site::embed || *site == Site::resid_final) ? 1 : is_head_site(*site) ? 3 : 2;
  if (parts.size() != want) throw InvalidHookError("malformed hook key '" + text + "'");
  HookKey k{*site, 0, -1};
  try {
    if (want >= 2) k.layer = std::stoi(parts[1]);
    if (want == 3) k.head = std::stoi(parts[2]);
  } catch (const std::exception&) {
    throw InvalidHookError("malformed hook key '" + text + "'");
  }
  return k;
}

int64_t site_width(const ModelConfig& cfg, const HookKey& key, int64_t n) {
  switch (key.site) {
    case Site::head_query:
    case Site::head_key:
    case Site::head_value:
    case Site::head_z:
      return cfg.head_dim();
    case Site::head_pattern:
      return n;
    default:
      return cfg.d_model;
  }
}

void validate_key(const ModelConfig& cfg, const HookKey& key) {
  const bool head_site = is_head_site(key.site);
  if (head_site != (key.head >= 0)) {
    throw InvalidHookError("hook " + key.str() + ": head index must be given exactly for head sites");
  }
  if (key.site != Site::embed && key.site != Site::resid_final &&
      (key.layer < 0 || key.layer >= cfg.n_layers)) {
    throw InvalidHookError("hook " + key.str() + ": layer out of range");
  }
  if (head_site && key.head >= cfg.n_heads) {
    throw InvalidHookError("hook " + key.str() + ": head out of range");
  }
}

Selection Selection::sets(std::vector<std::vector<int>> positions) {
  Selection s(Kind::Sets, {});
  s.sets_ = std::move(positions);
  return s;
}

bool Selection::selected(int64_t row, int64_t position) const {
  switch (kind_) {
    case Kind::All:
      return true;
    case Kind::Fixed:
      return positions_[0] == position;
    case Kind::PerRow:
      return positions_[row] == position;
    case Kind::PerRowExcept:
      return positions_[row] != position;
    case Kind::Sets:
      for (int p : sets_[row]) {
        if (p == position) return true;
      }
      return false;
  }
  return false;
}

void Selection::check(int64_t batch, int64_t length) const {
  auto bad = [&](int p) { return p < 0 || p >= length; };
  switch (kind_) {
    case Kind::All:
      return;
    case Kind::Fixed:
      if (bad(positions_[0])) {
        throw InvalidHookError("hook position " + std::to_string(positions_[0]) +
                               " outside sequence of length " + std::to_string(length));
      }
      return;
    case Kind::PerRow:
    case Kind::PerRowExcept:
      if (static_cast<int64_t>(positions_.size()) != batch) {
        throw InvalidHookError("per-row selection size does not match batch");
      }
      for (int p : positions_) {
        if (bad(p)) throw InvalidHookError("hook position " + std::to_string(p) + " outside sequence");
      }
      return;
    case Kind::Sets:
      if (static_cast<int64_t>(sets_.size()) != batch) {
        throw InvalidHookError("per-row selection size does not match batch");
      }
      for (const auto& row : sets_) {
        for (int p : row) {
          if (bad(p)) throw InvalidHookError("hook position " + std::to_string(p) + " outside sequence");
        }
      }
      return;
  }
}

std::string Selection::describe() const {
  switch (kind_) {
    case Kind::All: return "all";
    case Kind::Fixed: return "at(" + std::to_string(positions_[0]) + ")";
    case Kind::PerRow: return "per_row";
    case Kind::PerRowExcept: return "per_row_except";
    case Kind::Sets: return "sets";
  }
  return "?";
}

const float* EditValues::row(int64_t batch_row) const {
  const int64_t r = row_of.empty() ? batch_row : row_of[batch_row];
  const int64_t stride = data->numel() / data->dim(0);
  return data->data() + r * stride;
}

EditSet& EditSet::freeze_to(const HookKey& key, const ActivationCache& reference, Selection where) {
  return add(Edit::overwrite(key, reference.shared(key), std::move(where)));
}

const Tensor& ActivationCache::at(const HookKey& key) const {
  auto it = entries_.find(key);
  if (it == entries_.end()) throw PreconditionError("activation " + key.str() + " was not captured");
  return *it->second;
}

std::shared_ptr<const Tensor> ActivationCache::shared(const HookKey& key) const {
  auto it = entries_.find(key);
  if (it == entries_.end()) throw PreconditionError("activation " + key.str() + " was not captured");
  return it->second;
}

}  // namespace cwb
