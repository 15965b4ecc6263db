#pragma once

#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "pbench/dataset.hpp"

namespace pbench {

/// Scaling factor applied to per-cell library-normalized counts.
inline constexpr double kNormalizationTarget = 1e4;

/// x -> log(1 + x / total * 1e4) per cell, natural log; zeros stay zero.
PerturbationDataset log_normalize(const PerturbationDataset& d);

struct GeneSelectionOptions {
  Index n_hvg = 4000;
  Index n_de_per_condition = 25;
  /// Genetic screens: keep genes named by a perturbation.
  bool include_perturbed_genes = false;
};

struct GeneSelection {
  PerturbationDataset dataset;
  std::vector<std::string> genes;
};

/// Union of the top variance genes, the top |Welch t| genes per perturbed
/// condition against its matched controls, and optionally perturbed genes.
/// Retained genes keep their original order.
GeneSelection select_genes(const PerturbationDataset& d, const GeneSelectionOptions& options,
                           Warnings* warnings = nullptr);

/// Welch two-sample t statistic for every gene, (mean_a - mean_b) / se.
VectorXd welch_t(const PerturbationDataset& d, std::span<const Index> rows_a,
                 std::span<const Index> rows_b);

struct ConditionAggregate {
  Condition condition;
  VectorXd mean;
  Index n_cells = 0;
  VectorXd logfc;
};

/// Ordered per-condition aggregates sharing one gene list; the unit the
/// metrics and evaluator work on. Also the in-memory form of
/// aggregates.tsv + logfc.tsv.
struct AggregateTable {
  std::vector<std::string> covariate_keys;
  std::vector<std::string> genes;
  std::string control_value = "control";
  std::string delimiter = "+";
  std::vector<ConditionAggregate> rows;

  const ConditionAggregate* find(const Condition& c) const;
  bool is_control(const ConditionAggregate& a) const { return a.condition.is_control(control_value); }
};

/// Arithmetic mean per distinct condition over `rows` (all cells when empty),
/// accumulated in row order. Conditions with fewer than `min_cells` cells are
/// dropped with a warning.
AggregateTable aggregate_means(const PerturbationDataset& d, Index min_cells,
                               std::optional<std::span<const Index>> rows = std::nullopt,
                               Warnings* warnings = nullptr);

/// logfc = mean - mean of the control aggregate with the same covariates.
AggregateTable compute_logfc(AggregateTable table);

enum class AggregateField { Mean, LogFc };

/// One aggregates.tsv-layout file holding the chosen vector per condition.
void write_aggregate_file(const AggregateTable& table, const std::filesystem::path& path, AggregateField field);

void write_aggregates(const AggregateTable& table, const std::filesystem::path& means_path,
                      const std::filesystem::path& logfc_path);

/// Reads a means/logfc pair. A missing logfc file leaves logfc empty so the
/// caller can derive it with compute_logfc.
AggregateTable read_aggregates(const std::filesystem::path& means_path,
                               const std::optional<std::filesystem::path>& logfc_path,
                               const std::string& control_value = "control",
                               const std::string& delimiter = "+");

}  // namespace pbench
