#include "pbench/config.hpp"

#include <algorithm>

#include "pbench/error.hpp"
#include "pbench/text_io.hpp"

namespace pbench {

namespace {

std::string trim(std::string_view s) {
  const auto b = s.find_first_not_of(" \t");
  if (b == std::string_view::npos) return {};
  const auto e = s.find_last_not_of(" \t");
  return std::string(s.substr(b, e - b + 1));
}

}  // namespace

const std::map<std::string, std::string>& RunConfig::defaults() {
  static const std::map<std::string, std::string> d = {
      {"seed", "0"},
      {"threads", ""},
      // inputs
      {"data.dataset", ""},
      {"data.split", ""},
      {"data.model", ""},
      {"data.predictions", ""},
      {"data.predictions_logfc", ""},
      {"data.reference", ""},
      {"data.reference_means", ""},
      {"data.reference_logfc", ""},
      {"data.pred_cells", ""},
      // preprocess
      {"preprocess.n_hvg", "4000"},
      {"preprocess.n_de", "25"},
      {"preprocess.include_perturbed_genes", "false"},
      {"preprocess.min_cells", "1"},
      // split
      {"split.kind", "covariate_transfer"},
      {"split.max_heldout_levels", "1"},
      {"split.heldout_fraction", "0.3"},
      {"split.val_test_ratio", "0.5"},
      {"split.min_perturbations_per_level", "30"},
      {"split.key", ""},
      {"split.max_retries", "100"},
      {"split.train_levels", ""},
      {"split.target_balance", ""},
      {"split.balance_tolerance", "0.02"},
      // model
      {"model.architecture", "linear"},
      {"model.decoder_input", "pert+cov"},
      {"model.latent_dim", "64"},
      {"model.n_layers", "1"},
      {"model.hidden_width", "128"},
      {"model.dropout", "0"},
      {"model.layer_norm", "true"},
      {"model.softplus_output", "false"},
      {"model.lr", "0.001"},
      {"model.weight_decay", "1e-6"},
      {"model.batch_size", "256"},
      {"model.max_epochs", "200"},
      {"model.patience", "10"},
      {"model.n_controls", "100"},
      // prediction / evaluation
      {"predict.split", "test"},
      {"eval.split", "test"},
      {"eval.mean_metrics", "rmse,mae,mse,r2"},
      {"eval.logfc_metrics", "cosine,pearson"},
      {"eval.rank_scope", "global"},
      {"eval.distributional", ""},
      {"eval.max_cells", "200"},
      {"eval.collapse_rank_threshold", "0.25"},
      {"eval.collapse_matrix_threshold", "0.2"},
      // search
      {"hpo.n_trials", "60"},
      {"hpo.stability_seeds", "0"},
      {"hpo.range.lr", ""},
      {"hpo.range.wd", ""},
      {"hpo.range.n_layers", ""},
      {"hpo.range.encoder_width", ""},
      {"hpo.range.latent_dim", ""},
      {"hpo.range.dropout", ""},
      {"hpo.range.softplus_output", ""},
      // simulate
      {"synth.n_genes", "200"},
      {"synth.n_perturbations", "20"},
      {"synth.covariate_levels", "3"},
      {"synth.covariate_keys", "cell_type"},
      {"synth.cells_per_condition", "100"},
      {"synth.control_cells", "0"},
      {"synth.effect_sparsity", "10"},
      {"synth.effect_scale", "1"},
      {"synth.covariate_scale", "0.5"},
      {"synth.gene_baseline_sd", "1"},
      {"synth.n_combinations", "0"},
      {"synth.interaction_fraction", "0"},
      {"synth.interaction_scale", "0"},
      {"synth.cell_noise", "0.1"},
      {"synth.library_log_mean", "8.5"},
      {"synth.library_log_sd", "0.3"},
      {"synth.truth_cells", "2000"},
      {"synth.oracle", ""},
      {"synth.oracle_jitter", "0"},
  };
  return d;
}

void RunConfig::set(const std::string& key, const std::string& value) {
  const auto it = values_.find(key);
  if (it == values_.end()) throw Error(ErrorCode::Config, "unknown config key '" + key + "'");
  it->second = value;
}

void RunConfig::set(const std::string& assignment) {
  const auto eq = assignment.find('=');
  if (eq == std::string::npos) throw Error(ErrorCode::Config, "expected key=value, got '" + assignment + "'");
  set(trim(std::string_view(assignment).substr(0, eq)), trim(std::string_view(assignment).substr(eq + 1)));
}

void RunConfig::merge_text(const std::string& text, const std::string& origin) {
  int line_no = 0;
  for (const auto& raw : text::split(text, '\n')) {
    ++line_no;
    std::string_view line = raw;
    if (const auto hash = line.find('#'); hash != std::string_view::npos) line = line.substr(0, hash);
    const auto t = trim(line);
    if (t.empty()) continue;
    if (t.find('=') == std::string::npos) {
      throw Error(ErrorCode::Config, origin + ":" + std::to_string(line_no) + ": expected key = value");
    }
    try {
      set(t);
    } catch (const Error& e) {
      throw Error(ErrorCode::Config, origin + ":" + std::to_string(line_no) + ": " + e.what());
    }
  }
}

void RunConfig::merge_file(const std::filesystem::path& path) {
  std::string all;
  for (const auto& l : text::read_lines(path)) all += l + '\n';
  merge_text(all, path.string());
}

const std::string& RunConfig::get(const std::string& key) const {
  const auto it = values_.find(key);
  if (it == values_.end()) throw Error(ErrorCode::Config, "unknown config key '" + key + "'");
  return it->second;
}

const std::string& RunConfig::require(const std::string& key) const {
  const auto& v = get(key);
  if (v.empty()) throw Error(ErrorCode::Config, "config key '" + key + "' must be set");
  return v;
}

double RunConfig::get_double(const std::string& key) const {
  try {
    return text::parse_double(require(key), key);
  } catch (const Error& e) {
    throw Error(ErrorCode::Config, e.what());
  }
}

long long RunConfig::get_int(const std::string& key) const {
  try {
    return text::parse_int(require(key), key);
  } catch (const Error& e) {
    throw Error(ErrorCode::Config, e.what());
  }
}

bool RunConfig::get_bool(const std::string& key) const {
  const auto& v = require(key);
  if (v == "true" || v == "1") return true;
  if (v == "false" || v == "0") return false;
  throw Error(ErrorCode::Config, "config key '" + key + "' must be true or false");
}

std::vector<std::string> RunConfig::get_list(const std::string& key) const {
  const auto& v = get(key);
  if (v.empty()) return {};
  std::vector<std::string> out;
  for (const auto& item : text::split(v, ',')) out.push_back(trim(item));
  return out;
}

std::string RunConfig::resolved() const {
  std::string out;
  for (const auto& [k, v] : values_) out += k + " = " + v + '\n';
  return out;
}

}  // namespace pbench
