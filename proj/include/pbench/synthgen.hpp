#pragma once

// Synthetic perturb-seq data with known ground truth.
//
// Per cell: log rate = gene baseline + covariate offsets + sum of member
// perturbation effects + pair interaction + N(0, cell_noise^2) per gene;
// library size ~ LogNormal(library_log_mean, library_log_sd); counts ~
// Poisson(library * normalized rate).

#include <filesystem>
#include <map>
#include <string>
#include <vector>

#include "pbench/dataset.hpp"
#include "pbench/preprocess.hpp"

namespace pbench {

struct SynthSpec {
  Index n_genes = 200;
  Index n_perturbations = 20;
  /// One entry per covariate key: number of levels.
  std::vector<Index> covariate_levels = {3};
  std::vector<std::string> covariate_keys = {"cell_type"};
  Index cells_per_condition = 100;
  /// Control cells per covariate assignment; 0 uses cells_per_condition.
  Index control_cells = 0;
  /// Non-zero genes per perturbation effect.
  Index effect_sparsity = 10;
  double effect_scale = 1.0;
  double covariate_scale = 0.5;
  double gene_baseline_sd = 1.0;
  /// Number of dual-perturbation conditions (drawn without replacement).
  Index n_combinations = 0;
  double interaction_fraction = 0.0;
  double interaction_scale = 0.0;
  double cell_noise = 0.1;
  double library_log_mean = 8.5;
  double library_log_sd = 0.3;
  /// Simulated cells per condition used to estimate expected lognorm means.
  Index truth_cells = 2000;
  Seed seed = 0;
};

void validate(const SynthSpec& spec);

struct GroundTruth {
  std::vector<std::string> genes;
  std::vector<std::string> covariate_keys;
  std::string control_value = "control";
  /// Gene baseline plus covariate offsets, log-rate space.
  std::map<CovariateAssignment, VectorXd> base_log_rate;
  /// Per-perturbation additive effect, log-rate space.
  std::map<std::string, VectorXd> effects;
  /// Interaction term of a combination; absent means no interaction.
  std::map<std::vector<std::string>, VectorXd> interactions;
  /// Expected lognorm mean and LogFC (mean minus control mean) per condition.
  AggregateTable expected;

  /// Sum of member effects plus interaction; zero for the control.
  VectorXd log_rate_effect(const Condition& c) const;
};

struct SynthResult {
  PerturbationDataset dataset;
  GroundTruth truth;
};

SynthResult generate(const SynthSpec& spec);

enum class OracleKind { Perfect, Collapsed, Noisy };

OracleKind parse_oracle_kind(std::string_view token);

/// Predictions derived from the truth, optionally restricted to `conditions`.
///   perfect:   expected means;
///   collapsed: per covariate assignment, the average expected mean over its
///              perturbed conditions (what a covariate-only model converges
///              to), plus N(0, jitter^2) per condition;
///   noisy:     expected means plus N(0, jitter^2).
/// LogFC is always the prediction minus the expected control mean.
AggregateTable oracle_predict(OracleKind kind, const GroundTruth& truth, double jitter, Seed seed,
                              const std::vector<Condition>& conditions = {});

/// truth_means.tsv, truth_logfc.tsv and truth_effects.tsv (log-rate effects)
/// in the aggregates layout.
void export_truth(const GroundTruth& truth, const std::filesystem::path& dir);

}  // namespace pbench
