#pragma once

#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "pbench/dataset.hpp"

namespace pbench {

enum class SplitLabel : std::uint8_t { Train, Val, Test };

std::string_view to_string(SplitLabel label) noexcept;
SplitLabel parse_split_label(std::string_view token);

/// One label per dataset row, in row order.
struct SplitAssignment {
  std::vector<std::string> cell_ids;
  std::vector<SplitLabel> labels;

  std::vector<Index> rows(SplitLabel label) const;
  Index count(SplitLabel label) const;
};

enum class SplitKind { CovariateTransfer, Combo, InverseCombo };

std::string_view to_string(SplitKind kind) noexcept;
SplitKind parse_split_kind(std::string_view token);

struct SplitSpec {
  SplitKind kind = SplitKind::CovariateTransfer;
  /// Maximum number of held-out covariate levels.
  int max_heldout_levels = 1;
  /// Fraction of perturbations (or combinations) held out.
  double heldout_fraction = 0.3;
  /// Share of the held-out units sent to val; the rest go to test.
  double val_test_ratio = 0.5;
  Seed seed = 0;
  int min_perturbations_per_level = 30;
  /// Covariate key whose levels are held out; empty selects the first key.
  std::string split_key;
  int max_retries = 100;
  /// Nested data-scaling subsets: when set, only perturbed training cells
  /// from these levels are kept (see restrict_training_levels).
  std::optional<std::vector<std::string>> train_levels;
};

/// Throws E_INVALID when a field is out of range.
void validate(const SplitSpec& spec);

SplitAssignment split_covariate_transfer(const PerturbationDataset& d, const SplitSpec& spec);
SplitAssignment split_combo(const PerturbationDataset& d, const SplitSpec& spec, Warnings* warnings = nullptr);
/// Dispatches on spec.kind.
SplitAssignment make_split(const PerturbationDataset& d, const SplitSpec& spec, Warnings* warnings = nullptr);

/// 1 - H / log k with H the Shannon entropy of the count proportions.
double compute_imbalance(std::span<const Index> counts_per_level);

/// Distinct non-control perturbation sets per level of `key`, levels sorted.
std::vector<std::pair<std::string, std::vector<std::vector<std::string>>>> perturbations_per_level(
    const PerturbationDataset& d, const std::string& key);

struct DownsampleOptions {
  std::string split_key;
  int min_perturbations_per_level = 30;
  double tolerance = 0.02;
  int max_draws = 100000;
};

/// Keeps every perturbation of the first level and draws how many to keep in
/// each other level so that 1 - imbalance is within tolerance of the target;
/// the kept perturbations are a uniform subset. Control cells always stay.
PerturbationDataset downsample_to_imbalance(const PerturbationDataset& d, double target_balance, Seed seed,
                                            const DownsampleOptions& options = {});

/// Drops perturbed training cells outside `levels`; val/test and controls
/// are untouched. Returns the reduced dataset with its aligned assignment.
std::pair<PerturbationDataset, SplitAssignment> restrict_training_levels(const PerturbationDataset& d,
                                                                         const SplitAssignment& split,
                                                                         const std::string& key,
                                                                         const std::vector<std::string>& levels);

/// CSV with header `cell_id,split`.
void write_split(const SplitAssignment& split, const std::filesystem::path& path);
/// Reads a split CSV and aligns it to `d`'s rows; every dataset cell must be
/// present exactly once.
SplitAssignment read_split(const std::filesystem::path& path, const PerturbationDataset& d);

}  // namespace pbench
