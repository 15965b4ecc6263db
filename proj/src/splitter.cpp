#include "pbench/splitter.hpp"

#include <algorithm>
#include <cmath>
#include <functional>
#include <map>
#include <numeric>
#include <random>
#include <set>
#include <unordered_map>

#include "pbench/text_io.hpp"

namespace pbench {

std::string_view to_string(SplitLabel label) noexcept {
  switch (label) {
    case SplitLabel::Train: return "train";
    case SplitLabel::Val: return "val";
    case SplitLabel::Test: return "test";
  }
  return "?";
}

SplitLabel parse_split_label(std::string_view token) {
  if (token == "train") return SplitLabel::Train;
  if (token == "val") return SplitLabel::Val;
  if (token == "test") return SplitLabel::Test;
  throw Error(ErrorCode::Format, "unknown split label '" + std::string(token) + "'");
}

std::string_view to_string(SplitKind kind) noexcept {
  switch (kind) {
    case SplitKind::CovariateTransfer: return "covariate_transfer";
    case SplitKind::Combo: return "combo";
    case SplitKind::InverseCombo: return "inverse_combo";
  }
  return "?";
}

SplitKind parse_split_kind(std::string_view token) {
  for (auto k : {SplitKind::CovariateTransfer, SplitKind::Combo, SplitKind::InverseCombo}) {
    if (to_string(k) == token) return k;
  }
  throw Error(ErrorCode::Config, "unknown split kind '" + std::string(token) + "'");
}

std::vector<Index> SplitAssignment::rows(SplitLabel label) const {
  std::vector<Index> out;
  for (std::size_t i = 0; i < labels.size(); ++i) {
    if (labels[i] == label) out.push_back(static_cast<Index>(i));
  }
  return out;
}

Index SplitAssignment::count(SplitLabel label) const {
  return static_cast<Index>(std::count(labels.begin(), labels.end(), label));
}

void validate(const SplitSpec& spec) {
  if (!(spec.heldout_fraction > 0.0 && spec.heldout_fraction < 1.0)) {
    throw Error(ErrorCode::Invalid, "held-out fraction must lie in (0, 1)");
  }
  if (spec.max_heldout_levels < 1) throw Error(ErrorCode::Invalid, "max held-out levels must be at least 1");
  if (!(spec.val_test_ratio > 0.0 && spec.val_test_ratio < 1.0)) {
    throw Error(ErrorCode::Invalid, "val_test_ratio must lie in (0, 1)");
  }
  if (spec.min_perturbations_per_level < 0 || spec.max_retries < 1) {
    throw Error(ErrorCode::Invalid, "min perturbations and retries must be non-negative / positive");
  }
}

namespace {

using PertSet = std::vector<std::string>;

std::size_t key_position(const PerturbationDataset& d, const std::string& key) {
  if (d.meta.covariate_keys.empty()) throw Error(ErrorCode::Invalid, "dataset has no covariate keys to split on");
  if (key.empty()) return 0;
  const auto& keys = d.meta.covariate_keys;
  const auto it = std::find(keys.begin(), keys.end(), key);
  if (it == keys.end()) throw Error(ErrorCode::UnknownName, "unknown covariate key '" + key + "'");
  return static_cast<std::size_t>(it - keys.begin());
}

SplitAssignment all_train(const PerturbationDataset& d) {
  SplitAssignment s;
  s.cell_ids = d.cell_ids;
  s.labels.assign(d.cell_ids.size(), SplitLabel::Train);
  return s;
}

// The epsilon keeps products like 0.29 * 100 from flooring to 28.
Index holdout_count(double fraction, std::size_t n) {
  return std::max<Index>(1, static_cast<Index>(std::floor(fraction * static_cast<double>(n) + 1e-9)));
}

/// Shuffles the held-out units and sends the first round(ratio * n) to val.
template <typename Unit>
std::map<Unit, SplitLabel> divide_val_test(std::vector<Unit> units, double ratio, std::mt19937_64& rng) {
  std::shuffle(units.begin(), units.end(), rng);
  const auto n = static_cast<Index>(units.size());
  Index n_val = static_cast<Index>(std::llround(ratio * static_cast<double>(n)));
  if (n >= 2) n_val = std::clamp<Index>(n_val, 1, n - 1);
  else n_val = 0;
  std::map<Unit, SplitLabel> out;
  for (Index i = 0; i < n; ++i) {
    out[units[static_cast<std::size_t>(i)]] = i < n_val ? SplitLabel::Val : SplitLabel::Test;
  }
  return out;
}

}  // namespace

std::vector<std::pair<std::string, std::vector<PertSet>>> perturbations_per_level(const PerturbationDataset& d,
                                                                                 const std::string& key) {
  const auto pos = key_position(d, key);
  std::map<std::string, std::set<PertSet>> by_level;
  for (const auto& c : d.cells) {
    auto& s = by_level[c.covariates[pos]];
    if (!c.is_control(d.meta.control_value)) s.insert(c.perturbations);
  }
  std::vector<std::pair<std::string, std::vector<PertSet>>> out;
  for (auto& [level, perts] : by_level) out.emplace_back(level, std::vector<PertSet>(perts.begin(), perts.end()));
  return out;
}

SplitAssignment split_covariate_transfer(const PerturbationDataset& d, const SplitSpec& spec) {
  validate(spec);
  const auto pos = key_position(d, spec.split_key);
  const auto levels = perturbations_per_level(d, spec.split_key);
  const auto n_levels = levels.size();
  if (n_levels < 2) throw Error(ErrorCode::Invalid, "covariate transfer needs at least 2 levels on the split key");

  std::map<PertSet, std::set<std::size_t>> present_in;
  for (std::size_t l = 0; l < n_levels; ++l) {
    for (const auto& p : levels[l].second) present_in[p].insert(l);
  }

  std::mt19937_64 rng(spec.seed);
  using Unit = std::pair<PertSet, std::string>;  // (perturbation set, level)
  std::set<std::pair<PertSet, std::size_t>> held;
  bool ok = false;
  std::string reason;
  for (int attempt = 0; attempt < spec.max_retries && !ok; ++attempt) {
    held.clear();
    const int h_max = std::min<int>(spec.max_heldout_levels, static_cast<int>(n_levels));
    const int h = std::uniform_int_distribution<int>(1, h_max)(rng);
    std::vector<std::size_t> order(n_levels);
    std::iota(order.begin(), order.end(), std::size_t{0});
    std::shuffle(order.begin(), order.end(), rng);
    ok = true;
    for (int k = 0; k < h && ok; ++k) {
      const auto l = order[static_cast<std::size_t>(k)];
      const auto& perts = levels[l].second;
      const Index n_hold = holdout_count(spec.heldout_fraction, perts.size());
      if (static_cast<Index>(perts.size()) - n_hold < spec.min_perturbations_per_level) {
        ok = false;
        reason = "level '" + levels[l].first + "' would keep fewer than " +
                 std::to_string(spec.min_perturbations_per_level) + " training perturbations";
        break;
      }
      std::vector<PertSet> eligible;
      for (const auto& p : perts) {
        if (present_in[p].size() >= 2) eligible.push_back(p);
      }
      if (static_cast<Index>(eligible.size()) < n_hold) {
        ok = false;
        reason = "level '" + levels[l].first + "' has too few perturbations observed in other levels";
        break;
      }
      std::shuffle(eligible.begin(), eligible.end(), rng);
      for (Index i = 0; i < n_hold; ++i) held.emplace(eligible[static_cast<std::size_t>(i)], l);
    }
    if (!ok) continue;
    for (const auto& [p, l] : held) {
      bool seen = false;
      for (auto other : present_in[p]) {
        if (other != l && held.count({p, other}) == 0) seen = true;
      }
      if (!seen) {
        ok = false;
        reason = "a held-out perturbation is not observed in training under another level";
        break;
      }
    }
  }
  if (!ok) {
    throw Error(ErrorCode::Unsatisfiable, "covariate transfer split failed after " +
                                              std::to_string(spec.max_retries) + " draws: " + reason);
  }

  std::vector<Unit> units;
  for (const auto& [p, l] : held) units.emplace_back(p, levels[l].first);
  const auto label_of = divide_val_test(units, spec.val_test_ratio, rng);

  auto split = all_train(d);
  for (std::size_t i = 0; i < d.cells.size(); ++i) {
    const auto& c = d.cells[i];
    if (c.is_control(d.meta.control_value)) continue;
    const auto it = label_of.find(Unit{c.perturbations, c.covariates[pos]});
    if (it != label_of.end()) split.labels[i] = it->second;
  }
  return split;
}

SplitAssignment split_combo(const PerturbationDataset& d, const SplitSpec& spec, Warnings* warnings) {
  validate(spec);
  if (spec.kind != SplitKind::Combo && spec.kind != SplitKind::InverseCombo) {
    throw Error(ErrorCode::Invalid, "split_combo needs kind combo or inverse_combo");
  }
  std::set<Condition> conditions;
  for (const auto& c : d.cells) conditions.insert(c);
  std::vector<Condition> combos;
  for (const auto& c : conditions) {
    if (c.is_combination()) combos.push_back(c);
  }
  if (combos.empty()) throw Error(ErrorCode::Empty, "dataset contains no perturbation combinations");
  auto singleton = [](const std::string& p, const CovariateAssignment& covs) { return Condition({p}, covs); };
  auto has_all_singletons = [&](const Condition& c) {
    return std::all_of(c.perturbations.begin(), c.perturbations.end(),
                       [&](const std::string& p) { return conditions.count(singleton(p, c.covariates)) > 0; });
  };

  std::mt19937_64 rng(spec.seed);
  const Index n_hold = holdout_count(spec.heldout_fraction, combos.size());
  std::vector<Condition> held;

  if (spec.kind == SplitKind::Combo) {
    std::vector<Condition> eligible;
    for (const auto& c : combos) {
      if (has_all_singletons(c)) {
        eligible.push_back(c);
      } else {
        warn(warnings, "combination '" + c.label(d.meta.combination_delimiter) +
                           "' lacks an observed constituent singleton; kept in train");
      }
    }
    std::shuffle(eligible.begin(), eligible.end(), rng);
    eligible.resize(static_cast<std::size_t>(std::min<Index>(n_hold, static_cast<Index>(eligible.size()))));
    held = std::move(eligible);
  } else {
    std::vector<Condition> order = combos;
    std::shuffle(order.begin(), order.end(), rng);
    std::set<Condition> heldout_singletons;
    std::set<Condition> pinned_train;
    for (const auto& c : order) {
      if (static_cast<Index>(heldout_singletons.size()) >= n_hold) break;
      if (!has_all_singletons(c)) continue;
      std::vector<std::string> candidates = c.perturbations;
      std::shuffle(candidates.begin(), candidates.end(), rng);
      for (const auto& out : candidates) {
        const auto s = singleton(out, c.covariates);
        if (pinned_train.count(s) > 0) continue;
        bool partners_free = true;
        for (const auto& p : c.perturbations) {
          if (p != out && heldout_singletons.count(singleton(p, c.covariates)) > 0) partners_free = false;
        }
        if (!partners_free) continue;
        heldout_singletons.insert(s);
        for (const auto& p : c.perturbations) {
          if (p != out) pinned_train.insert(singleton(p, c.covariates));
        }
        break;
      }
    }
    held.assign(heldout_singletons.begin(), heldout_singletons.end());
  }
  if (held.empty()) throw Error(ErrorCode::Unsatisfiable, "no combination is eligible for holdout");

  std::sort(held.begin(), held.end());
  const auto label_of = divide_val_test(held, spec.val_test_ratio, rng);
  auto split = all_train(d);
  for (std::size_t i = 0; i < d.cells.size(); ++i) {
    const auto it = label_of.find(d.cells[i]);
    if (it != label_of.end()) split.labels[i] = it->second;
  }
  return split;
}

SplitAssignment make_split(const PerturbationDataset& d, const SplitSpec& spec, Warnings* warnings) {
  auto split = spec.kind == SplitKind::CovariateTransfer ? split_covariate_transfer(d, spec)
                                                         : split_combo(d, spec, warnings);
  return split;
}

double compute_imbalance(std::span<const Index> counts) {
  if (counts.size() < 2) throw Error(ErrorCode::Invalid, "imbalance needs at least 2 levels");
  double total = 0.0;
  for (Index c : counts) {
    if (c < 0) throw Error(ErrorCode::Invalid, "negative level count");
    total += static_cast<double>(c);
  }
  if (!(total > 0.0)) throw Error(ErrorCode::Invalid, "imbalance needs a positive total");
  if (std::adjacent_find(counts.begin(), counts.end(), std::not_equal_to<>()) == counts.end()) return 0.0;
  double entropy = 0.0;
  for (Index c : counts) {
    if (c == 0) continue;
    const double p = static_cast<double>(c) / total;
    entropy -= p * std::log(p);
  }
  const double value = 1.0 - entropy / std::log(static_cast<double>(counts.size()));
  return std::clamp(value, 0.0, 1.0);
}

PerturbationDataset downsample_to_imbalance(const PerturbationDataset& d, double target_balance, Seed seed,
                                            const DownsampleOptions& options) {
  if (!(target_balance > 0.0 && target_balance <= 1.0)) {
    throw Error(ErrorCode::Invalid, "target balance must lie in (0, 1]");
  }
  const auto pos = key_position(d, options.split_key);
  const auto levels = perturbations_per_level(d, options.split_key);
  if (levels.size() < 2) throw Error(ErrorCode::Invalid, "downsampling needs at least 2 levels");

  std::vector<Index> full;
  for (const auto& [_, perts] : levels) full.push_back(static_cast<Index>(perts.size()));
  if (target_balance == 1.0 && compute_imbalance(full) == 0.0) return d;
  for (std::size_t l = 1; l < levels.size(); ++l) {
    if (full[l] < options.min_perturbations_per_level) {
      throw Error(ErrorCode::Unsatisfiable, "level '" + levels[l].first + "' has fewer than the minimum perturbations");
    }
  }

  std::mt19937_64 rng(seed);
  std::vector<Index> counts = full;
  bool found = false;
  for (int draw = 0; draw < options.max_draws && !found; ++draw) {
    for (std::size_t l = 1; l < levels.size(); ++l) {
      counts[l] = std::uniform_int_distribution<Index>(options.min_perturbations_per_level, full[l])(rng);
    }
    found = std::abs(1.0 - compute_imbalance(counts) - target_balance) <= options.tolerance;
  }
  if (!found) {
    throw Error(ErrorCode::Unsatisfiable, "target balance " + text::format_double(target_balance) +
                                              " unreachable under the minimum perturbation constraint");
  }

  std::map<std::string, std::set<PertSet>> kept;
  for (std::size_t l = 0; l < levels.size(); ++l) {
    auto perts = levels[l].second;
    if (l > 0) {
      std::shuffle(perts.begin(), perts.end(), rng);
      perts.resize(static_cast<std::size_t>(counts[l]));
    }
    kept[levels[l].first] = std::set<PertSet>(perts.begin(), perts.end());
  }
  std::vector<Index> rows;
  for (Index r = 0; r < d.n_cells(); ++r) {
    const auto& c = d.cells[static_cast<std::size_t>(r)];
    if (c.is_control(d.meta.control_value) || kept[c.covariates[pos]].count(c.perturbations) > 0) {
      rows.push_back(r);
    }
  }
  return subset_cells(d, rows);
}

std::pair<PerturbationDataset, SplitAssignment> restrict_training_levels(const PerturbationDataset& d,
                                                                         const SplitAssignment& split,
                                                                         const std::string& key,
                                                                         const std::vector<std::string>& levels) {
  const auto pos = key_position(d, key);
  const std::set<std::string> allowed(levels.begin(), levels.end());
  std::vector<Index> rows;
  SplitAssignment out;
  for (Index r = 0; r < d.n_cells(); ++r) {
    const auto i = static_cast<std::size_t>(r);
    const auto& c = d.cells[i];
    const bool keep = split.labels[i] != SplitLabel::Train || c.is_control(d.meta.control_value) ||
                      allowed.count(c.covariates[pos]) > 0;
    if (!keep) continue;
    rows.push_back(r);
    out.cell_ids.push_back(split.cell_ids[i]);
    out.labels.push_back(split.labels[i]);
  }
  return {subset_cells(d, rows), std::move(out)};
}

void write_split(const SplitAssignment& split, const std::filesystem::path& path) {
  std::string out = "cell_id,split\n";
  for (std::size_t i = 0; i < split.cell_ids.size(); ++i) {
    out += split.cell_ids[i];
    out += ',';
    out += to_string(split.labels[i]);
    out += '\n';
  }
  text::write_file(path, out);
}

SplitAssignment read_split(const std::filesystem::path& path, const PerturbationDataset& d) {
  const auto lines = text::read_lines(path);
  if (lines.empty() || lines.front() != "cell_id,split") {
    throw Error(ErrorCode::Format, path.string() + ": expected header 'cell_id,split'");
  }
  std::unordered_map<std::string, std::size_t> row_of;
  for (std::size_t i = 0; i < d.cell_ids.size(); ++i) row_of.emplace(d.cell_ids[i], i);
  auto split = all_train(d);
  std::vector<bool> seen(d.cell_ids.size(), false);
  for (std::size_t i = 1; i < lines.size(); ++i) {
    if (lines[i].empty()) continue;
    const auto comma = lines[i].rfind(',');
    if (comma == std::string::npos) throw Error(ErrorCode::Format, path.string() + ": line without comma");
    const auto id = lines[i].substr(0, comma);
    const auto label = parse_split_label(lines[i].substr(comma + 1));
    const auto it = row_of.find(id);
    if (it == row_of.end()) throw Error(ErrorCode::UnknownName, path.string() + ": unknown cell_id '" + id + "'");
    if (seen[it->second]) throw Error(ErrorCode::Format, path.string() + ": duplicate cell_id '" + id + "'");
    seen[it->second] = true;
    split.labels[it->second] = label;
  }
  for (std::size_t i = 0; i < seen.size(); ++i) {
    if (!seen[i]) throw Error(ErrorCode::Invalid, path.string() + ": missing cell_id '" + d.cell_ids[i] + "'");
  }
  return split;
}

}  // namespace pbench
