#pragma once

// Perturbational expression datasets: the in-memory container, its on-disk
// directory format, and control matching.

#include <compare>
#include <filesystem>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "pbench/error.hpp"
#include "pbench/types.hpp"

namespace pbench {

enum class ValueSpace { Counts, LogNorm };

std::string_view to_string(ValueSpace space) noexcept;
ValueSpace parse_value_space(std::string_view token);

/// A covariate assignment lists one category per covariate key, in the
/// dataset's covariate_keys order.
using CovariateAssignment = std::vector<std::string>;

/// (perturbation set, covariate assignment). Perturbation names are kept
/// sorted and unique so that equality and ordering are well defined.
struct Condition {
  std::vector<std::string> perturbations;
  CovariateAssignment covariates;

  Condition() = default;
  Condition(std::vector<std::string> perts, CovariateAssignment covs);

  bool is_control(std::string_view control_value) const;
  bool is_combination() const { return perturbations.size() > 1; }
  std::string perturbation_label(std::string_view delimiter = "+") const;
  /// "drugX+drugY|A549", used in reports and similarity matrix headers.
  std::string label(std::string_view delimiter = "+") const;

  auto operator<=>(const Condition&) const = default;
  bool operator==(const Condition&) const = default;
};

struct DatasetMeta {
  std::string control_value = "control";
  std::string combination_delimiter = "+";
  std::vector<std::string> covariate_keys;
  ValueSpace value_space = ValueSpace::Counts;
};

/// Cells x genes expression with per-cell perturbation and covariate labels.
/// Treated as immutable once validated; transforms return new datasets.
struct PerturbationDataset {
  CountMatrix counts;
  std::vector<std::string> cell_ids;
  std::vector<Condition> cells;
  std::vector<std::string> gene_names;
  DatasetMeta meta;

  Index n_cells() const { return counts.rows(); }
  Index n_genes() const { return counts.cols(); }
  bool is_control(Index row) const {
    return cells[static_cast<std::size_t>(row)].is_control(meta.control_value);
  }
  Condition control_condition(const CovariateAssignment& covs) const {
    return Condition({meta.control_value}, covs);
  }
  /// Dense copy of one cell's expression vector.
  VectorXd cell_vector(Index row) const;
  /// Distinct conditions in first-appearance row order.
  std::vector<Condition> distinct_conditions() const;
};

/// Throws E_INVALID / E_DIMENSION / E_NON_FINITE on the first violated invariant.
void validate(const PerturbationDataset& d);

PerturbationDataset subset_cells(const PerturbationDataset& d, std::span<const Index> rows);
PerturbationDataset subset_genes(const PerturbationDataset& d, std::span<const Index> cols);

/// Reads matrix.mtx, obs.tsv, var.tsv and meta.tsv from `dir`.
PerturbationDataset load_dataset(const std::filesystem::path& dir);
void save_dataset(const PerturbationDataset& d, const std::filesystem::path& dir);

/// Control rows grouped by covariate assignment.
struct ControlIndex {
  std::map<CovariateAssignment, std::vector<Index>> rows;

  const std::vector<Index>& at(const CovariateAssignment& covs) const;
  bool contains(const CovariateAssignment& covs) const { return rows.count(covs) > 0; }
};

ControlIndex build_control_index(const PerturbationDataset& d);

/// `n` rows drawn uniformly with replacement from the matching control list.
std::vector<Index> sample_matched_controls(const ControlIndex& idx, const CovariateAssignment& covs,
                                           Index n, Seed seed);

struct CounterfactualRequest {
  Condition target;
  std::vector<Index> control_rows;
  /// Rows of the reference dataset observed under `target`.
  std::vector<Index> reference_rows;
  bool has_reference = false;
  bool empty_reference = false;
};

std::vector<CounterfactualRequest> build_counterfactual_requests(
    const PerturbationDataset& d, const ControlIndex& idx, std::span<const Condition> targets,
    const PerturbationDataset* reference = nullptr);

}  // namespace pbench
