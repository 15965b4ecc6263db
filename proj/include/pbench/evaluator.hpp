#pragma once

// Matches predicted and observed condition aggregates, runs the metric suite
// and writes the report files.

#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "pbench/dataset.hpp"
#include "pbench/metrics.hpp"
#include "pbench/preprocess.hpp"

namespace pbench {

struct MetricConfig {
  /// Computed on mean expression vectors.
  std::vector<FitMetric> mean_metrics = {FitMetric::Rmse, FitMetric::Mae, FitMetric::Mse, FitMetric::R2};
  /// Computed on LogFC vectors.
  std::vector<FitMetric> logfc_metrics = {FitMetric::Cosine, FitMetric::Pearson};
  RankScope rank_scope = RankScope::Global;
  /// Verdict thresholds. The matrix signal uses the root mean square entry
  /// difference, i.e. matrix_distance / p.
  double collapse_rank_threshold = 0.25;
  double collapse_matrix_threshold = 0.2;
};

/// Column names: "<metric>_mean" / "<metric>_logfc".
std::string metric_column(FitMetric kind, bool on_logfc);

struct MatchResult {
  std::vector<ConditionAggregate> preds;
  std::vector<ConditionAggregate> obs;
  std::vector<Condition> unmatched_predictions;
  std::vector<Condition> unmatched_reference;
};

/// Inner join on condition equality, in reference order.
MatchResult match_conditions(const AggregateTable& preds, const AggregateTable& reference);

struct ConditionMetrics {
  Condition condition;
  Index n_cells_pred = 0;
  Index n_cells_obs = 0;
  std::map<std::string, double> values;
};

struct MacroValue {
  double mean = 0.0;
  /// Sample standard deviation across seeds; empty for a single run.
  std::optional<double> std;
  Index n = 1;
};

struct Diagnostics {
  SimilarityMatrix pred;
  SimilarityMatrix obs;
  double matrix_distance = 0.0;
  double rank_rmse = 0.0;
  double transposed_rank_rmse = 0.0;
  double rank_cosine = 0.0;
  double transposed_rank_cosine = 0.0;
  std::vector<std::string> signals;
  std::string verdict;
};

struct MetricReport {
  std::string delimiter = "+";
  std::vector<std::string> covariate_keys;
  /// Per-condition column order.
  std::vector<std::string> columns;
  std::vector<ConditionMetrics> per_condition;
  std::map<std::string, MacroValue> macro;
  std::optional<Diagnostics> diagnostics;
  std::vector<std::pair<std::string, std::string>> provenance;
  std::vector<Condition> unmatched_predictions;
  std::vector<Condition> unmatched_reference;
  Index excluded_controls = 0;
  Warnings warnings;

  double value(const std::string& metric) const;
};

/// Fit metrics per matched perturbed condition, ranks and transposed ranks
/// for the RMSE and cosine distances, macro averages, the hpo objective, and
/// the collapse diagnostics. Control conditions are matched but not scored.
/// Tables lacking LogFC get it from their control rows.
MetricReport evaluate(const AggregateTable& preds, const AggregateTable& reference, const MetricConfig& config = {});

/// Similarity matrices, matrix distance, both rank flavors and a verdict.
Diagnostics diagnose_collapse(const AggregateTable& preds, const AggregateTable& reference,
                              const MetricConfig& config = {});

/// Adds a per-condition "<mmd|energy>_cells" column comparing cell
/// populations. At most `max_cells` cells per side are used, subsampled
/// without replacement.
void add_distributional(MetricReport& report, const PerturbationDataset& pred_cells,
                        const PerturbationDataset& ref_cells, DistributionalMetric kind, Index max_cells, Seed seed);

/// Mean and sample standard deviation of every macro value across runs;
/// per-condition values are averaged. Conditions must agree across runs.
MetricReport summarize_runs(const std::vector<MetricReport>& runs);

/// "0.38 ± 6e-3": two significant digits for the mean, one for the std.
std::string format_mean_std(double mean, double std);

/// summary.tsv, per_condition.tsv, similarity_matrix_{pred,obs}.tsv (when
/// diagnostics exist) and report.txt.
void write_report(const MetricReport& report, const std::filesystem::path& dir);

}  // namespace pbench
