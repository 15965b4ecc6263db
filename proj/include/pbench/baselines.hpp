#pragma once

// Baseline counterfactual models:
//   linear          x' = x + W [p; cov] + b
//   latent_additive x' = f_dec(f_ctrl(x) + f_pert(p))
//   decoder_only    x' = f_dec(input), input one of p, cov or [p; cov]
// plus the trainer, counterfactual prediction, random-search HPO and seed
// reruns.

#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "pbench/dataset.hpp"
#include "pbench/evaluator.hpp"
#include "pbench/nn.hpp"
#include "pbench/preprocess.hpp"
#include "pbench/splitter.hpp"

namespace pbench {

class OneHotVocab {
 public:
  OneHotVocab() = default;
  /// Sorted perturbation names (control excluded) and covariate levels of `d`.
  static OneHotVocab from_dataset(const PerturbationDataset& d);

  Index n_perturbations() const { return static_cast<Index>(perturbations_.size()); }
  Index n_covariates() const;
  Index dimension() const { return n_perturbations() + n_covariates(); }

  /// [multi-hot perturbation block; one-hot block per covariate key]. The
  /// control maps to a zero perturbation block.
  VectorXd encode(const Condition& c) const;
  VectorXd encode_perturbations(const Condition& c) const;
  VectorXd encode_covariates(const CovariateAssignment& covs) const;

  const std::vector<std::string>& perturbations() const { return perturbations_; }
  const std::vector<std::vector<std::string>>& covariate_levels() const { return levels_; }
  const std::vector<std::string>& covariate_keys() const { return keys_; }
  const std::string& control_value() const { return control_value_; }

  void save(const std::filesystem::path& path) const;
  static OneHotVocab load(const std::filesystem::path& path);

  bool operator==(const OneHotVocab&) const = default;

 private:
  std::string control_value_ = "control";
  std::vector<std::string> perturbations_;
  std::vector<std::string> keys_;
  std::vector<std::vector<std::string>> levels_;
};

enum class Architecture { Linear, LatentAdditive, DecoderOnly };
enum class DecoderInput { Pert, Cov, PertCov };

std::string_view to_string(Architecture a) noexcept;
std::string_view to_string(DecoderInput m) noexcept;
Architecture parse_architecture(std::string_view token);
DecoderInput parse_decoder_input(std::string_view token);

struct ModelConfig {
  Architecture architecture = Architecture::Linear;
  DecoderInput decoder_input = DecoderInput::PertCov;
  Index latent_dim = 64;
  /// Shared by f_ctrl, f_pert and f_dec. Ignored by the linear model.
  nn::MlpSpec mlp;
  double lr = 1e-3;
  double weight_decay = 1e-6;
  Index batch_size = 256;
  int max_epochs = 200;
  int patience = 10;
  /// Sampled controls per condition when predicting.
  Index n_controls = 100;
  Seed seed = 0;
};

void validate(const ModelConfig& cfg);

/// One training/prediction batch, one column per sample.
struct Batch {
  MatrixXd control;  // genes x n, empty for decoder_only
  MatrixXd pert;     // perturbation block
  MatrixXd cov;      // covariate blocks
};

class BaselineModel {
 public:
  BaselineModel() = default;
  BaselineModel(const ModelConfig& cfg, Index n_genes, Index n_pert, Index n_cov);

  /// Random initialization for the networks; the linear model starts at zero.
  void init(Seed seed);

  MatrixXd forward(const Batch& batch, bool training, Rng* rng);
  /// Accumulates parameter gradients for dLoss/dOutput = `d_out`.
  void backward(const MatrixXd& d_out);

  nn::ParameterSet& params() { return params_; }
  const nn::ParameterSet& params() const { return params_; }
  const ModelConfig& config() const { return cfg_; }
  bool uses_controls() const { return cfg_.architecture != Architecture::DecoderOnly; }

 private:
  MatrixXd decoder_input(const Batch& batch) const;

  ModelConfig cfg_;
  Index n_genes_ = 0, n_pert_ = 0, n_cov_ = 0;
  nn::ParameterSet params_;
  nn::Dense linear_;
  nn::Mlp ctrl_, pert_, dec_;
  // Latent additive: columns whose perturbation block is zero get no z_pert.
  Eigen::RowVectorXd pert_mask_;
};

/// Mean squared error over all entries and its gradient with respect to `pred`.
double mse_loss(const MatrixXd& pred, const MatrixXd& target, MatrixXd* grad);

struct TrainState {
  ModelConfig config;
  OneHotVocab vocab;
  std::vector<std::string> genes;
  BaselineModel model;
  std::vector<double> train_loss;
  /// NaN entries when there is no validation split.
  std::vector<double> val_objective;
  int best_epoch = -1;
};

/// Minimizes the MSE between the model output and the observed lognorm
/// vector of training cells. Matching architectures pair every cell with a
/// matched control drawn afresh each epoch. With validation cells the
/// parameters of the epoch with the lowest validation objective are kept.
TrainState train_model(const PerturbationDataset& d, const SplitAssignment& split, const ModelConfig& cfg,
                       Warnings* warnings = nullptr);

/// Predicted mean (average over n_controls sampled matched controls, or the
/// single decoded vector for decoder_only) and LogFC against the observed
/// control mean over all of the request's control rows.
AggregateTable predict(const TrainState& state, const PerturbationDataset& d,
                       const std::vector<CounterfactualRequest>& requests, Index n_controls, Seed seed);

/// Builds requests for `conditions` from the control cells in `control_rows`
/// and predicts them.
AggregateTable predict_conditions(const TrainState& state, const PerturbationDataset& d,
                                  const std::vector<Condition>& conditions, std::span<const Index> control_rows,
                                  Index n_controls, Seed seed);

/// Observed aggregates of the `label` cells with control rows taken from the
/// same split when present there, otherwise from all control cells.
AggregateTable observed_aggregates(const PerturbationDataset& d, const SplitAssignment& split, SplitLabel label);

/// Predicts every perturbed condition of `label` and evaluates it.
MetricReport evaluate_split(const TrainState& state, const PerturbationDataset& d, const SplitAssignment& split,
                            SplitLabel label, const MetricConfig& metrics = {});

void save_model(const TrainState& state, const std::filesystem::path& dir);
TrainState load_model(const std::filesystem::path& dir);

// ---------------------------------------------------------------------------
// Hyperparameter search

struct SearchDimension {
  enum class Kind { LogFloat, Float, Int, Categorical };
  std::string name;
  Kind kind = Kind::Float;
  double low = 0.0;
  double high = 0.0;
  /// Grid step for Float/Int; 0 means continuous (Float only).
  double step = 0.0;
  std::vector<double> choices;
};

using SearchSpace = std::vector<SearchDimension>;

/// Search ranges per architecture, as published for the baselines.
SearchSpace default_search_space(Architecture a);

/// Throws E_CONFIG when `space` strays outside the published bounds.
void check_search_space(const SearchSpace& space, Architecture a);

double sample_dimension(const SearchDimension& dim, Rng& rng);

/// Writes sampled values into a config (lr, wd, n_layers, encoder_width,
/// latent_dim, dropout, softplus_output).
ModelConfig apply_hyperparameters(ModelConfig cfg, const std::map<std::string, double>& values);

struct HpoTrial {
  int index = 0;
  std::map<std::string, double> params;
  Seed seed = 0;
  double objective = 0.0;
  /// "ok" or "failed: <message>".
  std::string status;
  ModelConfig config;
};

struct HpoResult {
  ModelConfig best;
  std::size_t best_index = 0;
  std::vector<HpoTrial> trials;
};

/// Uniform random search. Each trial trains on train and is scored with the
/// validation objective; trials run on up to `threads` threads and results do
/// not depend on the thread count.
HpoResult hpo_search(const PerturbationDataset& d, const SplitAssignment& split, const ModelConfig& base,
                     const SearchSpace& space, int n_trials, Seed seed, int threads = 1);

void write_trials(const std::vector<HpoTrial>& trials, const std::filesystem::path& path);

struct StabilityResult {
  std::vector<Seed> seeds;
  std::vector<MetricReport> runs;
  /// Macro mean and sample std per metric.
  MetricReport summary;
};

/// Retrains `cfg` under `seeds` (or n_seeds derived ones) and evaluates on test.
StabilityResult stability_reruns(const PerturbationDataset& d, const SplitAssignment& split, const ModelConfig& cfg,
                                 int n_seeds, const std::vector<Seed>& seeds = {}, const MetricConfig& metrics = {});

}  // namespace pbench
