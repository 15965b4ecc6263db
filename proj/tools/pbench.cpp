// pbench: command-line driver for the benchmark pipeline.
//
//   pbench <subcommand> [--config FILE] [--set key=value]... [--out DIR] [--seed N] [--threads N]
//
// Outputs are staged in a hidden directory under --out and moved into place
// only when the subcommand succeeds. Failures print one line
// "error <CODE>: <message>" on stderr and exit 1.

#include <CLI11.hpp>

#include <filesystem>
#include <functional>
#include <iostream>
#include <set>
#include <thread>
#include <unistd.h>

#include "pbench/baselines.hpp"
#include "pbench/config.hpp"
#include "pbench/evaluator.hpp"
#include "pbench/preprocess.hpp"
#include "pbench/splitter.hpp"
#include "pbench/synthgen.hpp"
#include "pbench/text_io.hpp"

namespace fs = std::filesystem;
using namespace pbench;

namespace {

struct Context {
  RunConfig config;
  fs::path stage;
  Warnings warnings;
};

Seed seed_of(const RunConfig& c) {
  try {
    return static_cast<Seed>(std::stoull(c.require("seed")));
  } catch (const std::logic_error&) {
    throw Error(ErrorCode::Config, "seed must be a non-negative integer");
  }
}

SplitLabel split_label(const std::string& v) {
  try {
    return parse_split_label(v);
  } catch (const Error& e) {
    throw Error(ErrorCode::Config, e.what());
  }
}

ModelConfig model_config(const RunConfig& c) {
  ModelConfig m;
  m.architecture = parse_architecture(c.require("model.architecture"));
  m.decoder_input = parse_decoder_input(c.require("model.decoder_input"));
  m.latent_dim = c.get_int("model.latent_dim");
  m.mlp.n_layers = static_cast<int>(c.get_int("model.n_layers"));
  m.mlp.hidden_width = c.get_int("model.hidden_width");
  m.mlp.dropout = c.get_double("model.dropout");
  m.mlp.layer_norm = c.get_bool("model.layer_norm");
  m.mlp.softplus_output = c.get_bool("model.softplus_output");
  m.lr = c.get_double("model.lr");
  m.weight_decay = c.get_double("model.weight_decay");
  m.batch_size = c.get_int("model.batch_size");
  m.max_epochs = static_cast<int>(c.get_int("model.max_epochs"));
  m.patience = static_cast<int>(c.get_int("model.patience"));
  m.n_controls = c.get_int("model.n_controls");
  m.seed = seed_of(c);
  try {
    validate(m);
  } catch (const Error& e) {
    throw Error(ErrorCode::Config, e.what());
  }
  return m;
}

MetricConfig metric_config(const RunConfig& c) {
  MetricConfig m;
  m.mean_metrics.clear();
  m.logfc_metrics.clear();
  for (const auto& t : c.get_list("eval.mean_metrics")) m.mean_metrics.push_back(parse_fit_metric(t));
  for (const auto& t : c.get_list("eval.logfc_metrics")) m.logfc_metrics.push_back(parse_fit_metric(t));
  m.rank_scope = parse_rank_scope(c.require("eval.rank_scope"));
  m.collapse_rank_threshold = c.get_double("eval.collapse_rank_threshold");
  m.collapse_matrix_threshold = c.get_double("eval.collapse_matrix_threshold");
  return m;
}

SplitSpec split_spec(const RunConfig& c) {
  SplitSpec s;
  s.kind = parse_split_kind(c.require("split.kind"));
  s.max_heldout_levels = static_cast<int>(c.get_int("split.max_heldout_levels"));
  s.heldout_fraction = c.get_double("split.heldout_fraction");
  s.val_test_ratio = c.get_double("split.val_test_ratio");
  s.min_perturbations_per_level = static_cast<int>(c.get_int("split.min_perturbations_per_level"));
  s.split_key = c.get("split.key");
  s.max_retries = static_cast<int>(c.get_int("split.max_retries"));
  s.seed = seed_of(c);
  if (c.has("split.train_levels")) s.train_levels = c.get_list("split.train_levels");
  try {
    validate(s);
  } catch (const Error& e) {
    throw Error(ErrorCode::Config, e.what());
  }
  return s;
}

SynthSpec synth_spec(const RunConfig& c) {
  SynthSpec s;
  s.n_genes = c.get_int("synth.n_genes");
  s.n_perturbations = c.get_int("synth.n_perturbations");
  s.covariate_levels.clear();
  for (const auto& t : c.get_list("synth.covariate_levels")) s.covariate_levels.push_back(text::parse_int(t, "synth.covariate_levels"));
  s.covariate_keys = c.get_list("synth.covariate_keys");
  s.cells_per_condition = c.get_int("synth.cells_per_condition");
  s.control_cells = c.get_int("synth.control_cells");
  s.effect_sparsity = c.get_int("synth.effect_sparsity");
  s.effect_scale = c.get_double("synth.effect_scale");
  s.covariate_scale = c.get_double("synth.covariate_scale");
  s.gene_baseline_sd = c.get_double("synth.gene_baseline_sd");
  s.n_combinations = c.get_int("synth.n_combinations");
  s.interaction_fraction = c.get_double("synth.interaction_fraction");
  s.interaction_scale = c.get_double("synth.interaction_scale");
  s.cell_noise = c.get_double("synth.cell_noise");
  s.library_log_mean = c.get_double("synth.library_log_mean");
  s.library_log_sd = c.get_double("synth.library_log_sd");
  s.truth_cells = c.get_int("synth.truth_cells");
  s.seed = seed_of(c);
  try {
    validate(s);
  } catch (const Error& e) {
    throw Error(ErrorCode::Config, e.what());
  }
  return s;
}

SearchSpace search_space(const RunConfig& c, Architecture a) {
  SearchSpace space = default_search_space(a);
  for (auto& dim : space) {
    const auto key = "hpo.range." + dim.name;
    if (!c.has(key)) continue;
    std::vector<double> v;
    for (const auto& t : c.get_list(key)) v.push_back(text::parse_double(t, key));
    if (dim.kind == SearchDimension::Kind::Categorical) {
      dim.choices = v;
    } else if (v.size() == 2) {
      dim.low = v[0];
      dim.high = v[1];
    } else {
      throw Error(ErrorCode::Config, key + " expects low,high");
    }
  }
  for (const auto& [k, v] : RunConfig::defaults()) {
    if (!k.starts_with("hpo.range.") || !c.has(k)) continue;
    const auto name = k.substr(10);
    if (std::none_of(space.begin(), space.end(), [&](const auto& d) { return d.name == name; })) {
      throw Error(ErrorCode::Config, k + " does not apply to " + std::string(to_string(a)));
    }
  }
  check_search_space(space, a);
  return space;
}

PerturbationDataset load_split_dataset(const Context& ctx, SplitAssignment* split) {
  auto d = load_dataset(ctx.config.require("data.dataset"));
  if (split != nullptr) *split = read_split(ctx.config.require("data.split"), d);
  return d;
}

// ---------------------------------------------------------------------------

void cmd_simulate(Context& ctx) {
  const auto spec = synth_spec(ctx.config);
  const auto result = generate(spec);
  save_dataset(result.dataset, ctx.stage / "dataset");
  export_truth(result.truth, ctx.stage / "truth");
  if (ctx.config.has("synth.oracle")) {
    const auto kind = parse_oracle_kind(ctx.config.get("synth.oracle"));
    const auto preds = oracle_predict(kind, result.truth, ctx.config.get_double("synth.oracle_jitter"),
                                      derive_seed(spec.seed, {99}));
    write_aggregates(preds, ctx.stage / "oracle_aggregates.tsv", ctx.stage / "oracle_logfc.tsv");
  }
}

void cmd_preprocess(Context& ctx) {
  auto d = load_dataset(ctx.config.require("data.dataset"));
  if (d.meta.value_space == ValueSpace::Counts) d = log_normalize(d);
  GeneSelectionOptions opt;
  opt.n_hvg = ctx.config.get_int("preprocess.n_hvg");
  opt.n_de_per_condition = ctx.config.get_int("preprocess.n_de");
  opt.include_perturbed_genes = ctx.config.get_bool("preprocess.include_perturbed_genes");
  if (opt.n_hvg > d.n_genes()) {
    warn(&ctx.warnings, "preprocess.n_hvg " + std::to_string(opt.n_hvg) + " exceeds the gene count; using " +
                            std::to_string(d.n_genes()));
    opt.n_hvg = d.n_genes();
  }
  opt.n_de_per_condition = std::min(opt.n_de_per_condition, d.n_genes());
  auto sel = select_genes(d, opt, &ctx.warnings);
  save_dataset(sel.dataset, ctx.stage / "dataset");
  const auto agg = compute_logfc(
      aggregate_means(sel.dataset, ctx.config.get_int("preprocess.min_cells"), std::nullopt, &ctx.warnings));
  write_aggregates(agg, ctx.stage / "aggregates.tsv", ctx.stage / "logfc.tsv");
}

void cmd_split(Context& ctx) {
  auto d = load_dataset(ctx.config.require("data.dataset"));
  const auto spec = split_spec(ctx.config);
  bool changed = false;
  if (ctx.config.has("split.target_balance")) {
    DownsampleOptions opt;
    opt.split_key = spec.split_key;
    opt.min_perturbations_per_level = spec.min_perturbations_per_level;
    opt.tolerance = ctx.config.get_double("split.balance_tolerance");
    d = downsample_to_imbalance(d, ctx.config.get_double("split.target_balance"), derive_seed(spec.seed, {1}), opt);
    changed = true;
  }
  auto split = make_split(d, spec, &ctx.warnings);
  if (spec.train_levels) {
    const auto key = spec.split_key.empty() ? d.meta.covariate_keys.at(0) : spec.split_key;
    auto [reduced, assignment] = restrict_training_levels(d, split, key, *spec.train_levels);
    d = std::move(reduced);
    split = std::move(assignment);
    changed = true;
  }
  if (changed) save_dataset(d, ctx.stage / "dataset");
  write_split(split, ctx.stage / "split.csv");
  std::string counts = "split\tcells\n";
  for (auto l : {SplitLabel::Train, SplitLabel::Val, SplitLabel::Test}) {
    counts += std::string(to_string(l)) + '\t' + std::to_string(split.count(l)) + '\n';
  }
  text::write_file(ctx.stage / "split_counts.tsv", counts);
}

void cmd_train(Context& ctx) {
  SplitAssignment split;
  const auto d = load_split_dataset(ctx, &split);
  const auto state = train_model(d, split, model_config(ctx.config), &ctx.warnings);
  save_model(state, ctx.stage / "model");
}

void cmd_predict(Context& ctx) {
  SplitAssignment split;
  const auto d = load_split_dataset(ctx, &split);
  const auto state = load_model(ctx.config.require("data.model"));
  const auto label = split_label(ctx.config.require("predict.split"));
  std::vector<Condition> conditions;
  std::set<Condition> seen;
  std::vector<Index> controls, all_controls;
  for (Index r = 0; r < d.n_cells(); ++r) {
    const bool in = split.labels[static_cast<std::size_t>(r)] == label;
    if (d.is_control(r)) {
      all_controls.push_back(r);
      if (in) controls.push_back(r);
    } else if (in && seen.insert(d.cells[static_cast<std::size_t>(r)]).second) {
      conditions.push_back(d.cells[static_cast<std::size_t>(r)]);
    }
  }
  if (conditions.empty()) throw Error(ErrorCode::Empty, "no perturbed conditions in the requested split");
  if (controls.empty()) controls = all_controls;
  const auto preds = predict_conditions(state, d, conditions, controls, ctx.config.get_int("model.n_controls"),
                                        seed_of(ctx.config));
  write_aggregates(preds, ctx.stage / "aggregates.tsv", ctx.stage / "logfc.tsv");
}

std::pair<AggregateTable, AggregateTable> evaluation_inputs(Context& ctx) {
  const auto& c = ctx.config;
  std::optional<fs::path> pred_logfc;
  if (c.has("data.predictions_logfc")) pred_logfc = c.get("data.predictions_logfc");
  AggregateTable preds = read_aggregates(c.require("data.predictions"), pred_logfc);
  AggregateTable ref;
  if (c.has("data.reference_means")) {
    std::optional<fs::path> ref_logfc;
    if (c.has("data.reference_logfc")) ref_logfc = c.get("data.reference_logfc");
    ref = read_aggregates(c.get("data.reference_means"), ref_logfc, preds.control_value, preds.delimiter);
  } else {
    const auto d = load_dataset(c.require("data.reference"));
    if (c.has("data.split")) {
      const auto split = read_split(c.get("data.split"), d);
      ref = observed_aggregates(d, split, split_label(c.require("eval.split")));
    } else {
      ref = compute_logfc(aggregate_means(d, 1, std::nullopt, &ctx.warnings));
    }
  }
  return {std::move(preds), std::move(ref)};
}

void add_provenance(Context& ctx, MetricReport& report) {
  const auto& c = ctx.config;
  report.provenance.emplace_back("predictions", c.get("data.predictions"));
  report.provenance.emplace_back("reference",
                                 c.has("data.reference_means") ? c.get("data.reference_means") : c.get("data.reference"));
  report.provenance.emplace_back("split_file", c.get("data.split"));
  report.provenance.emplace_back("seed", c.get("seed"));
  report.provenance.emplace_back("config_digest", std::to_string(std::hash<std::string>{}(c.resolved())));
}

void cmd_evaluate(Context& ctx) {
  const auto [preds, ref] = evaluation_inputs(ctx);
  auto report = evaluate(preds, ref, metric_config(ctx.config));
  if (ctx.config.has("eval.distributional")) {
    const auto kind = parse_distributional_metric(ctx.config.get("eval.distributional"));
    const auto pred_cells = load_dataset(ctx.config.require("data.pred_cells"));
    const auto ref_cells = load_dataset(ctx.config.require("data.reference"));
    add_distributional(report, pred_cells, ref_cells, kind, ctx.config.get_int("eval.max_cells"), seed_of(ctx.config));
  }
  add_provenance(ctx, report);
  report.warnings.insert(report.warnings.end(), ctx.warnings.begin(), ctx.warnings.end());
  write_report(report, ctx.stage);
}

void cmd_diagnose(Context& ctx) {
  const auto [preds, ref] = evaluation_inputs(ctx);
  MetricReport report;
  report.delimiter = ref.delimiter;
  report.covariate_keys = ref.covariate_keys;
  report.diagnostics = diagnose_collapse(preds, ref, metric_config(ctx.config));
  const auto& d = *report.diagnostics;
  report.macro["rank_rmse_mean"] = {d.rank_rmse, std::nullopt, 1};
  report.macro["transposed_rank_rmse_mean"] = {d.transposed_rank_rmse, std::nullopt, 1};
  report.macro["rank_cosine_logfc"] = {d.rank_cosine, std::nullopt, 1};
  report.macro["transposed_rank_cosine_logfc"] = {d.transposed_rank_cosine, std::nullopt, 1};
  report.macro["matrix_distance"] = {d.matrix_distance, std::nullopt, 1};
  add_provenance(ctx, report);
  report.warnings = ctx.warnings;
  write_report(report, ctx.stage);
}

void cmd_hpo(Context& ctx, int threads) {
  SplitAssignment split;
  const auto d = load_split_dataset(ctx, &split);
  const auto base = model_config(ctx.config);
  const auto space = search_space(ctx.config, base.architecture);
  const auto result = hpo_search(d, split, base, space, static_cast<int>(ctx.config.get_int("hpo.n_trials")),
                                 seed_of(ctx.config), threads);
  write_trials(result.trials, ctx.stage / "trials.tsv");
  const auto& best = result.trials[result.best_index];
  std::string s = "trial\t" + std::to_string(best.index) + "\nobjective\t" + text::format_double(best.objective) + '\n';
  for (const auto& [k, v] : best.params) s += k + '\t' + text::format_double(v) + '\n';
  s += "seed\t" + std::to_string(best.seed) + '\n';
  text::write_file(ctx.stage / "best_trial.tsv", s);

  const auto n_seeds = ctx.config.get_int("hpo.stability_seeds");
  if (n_seeds > 0) {
    const auto stab = stability_reruns(d, split, result.best, static_cast<int>(n_seeds), {}, metric_config(ctx.config));
    auto summary = stab.summary;
    for (std::size_t i = 0; i < stab.seeds.size(); ++i) {
      summary.provenance.emplace_back("seed_" + std::to_string(i), std::to_string(stab.seeds[i]));
      write_report(stab.runs[i], ctx.stage / "stability" / ("seed_" + std::to_string(i)));
    }
    write_report(summary, ctx.stage / "stability");
  }
}

// Moves staged outputs into `out`, replacing same-named entries.
void commit(const fs::path& stage, const fs::path& out) {
  for (const auto& entry : fs::directory_iterator(stage)) {
    const auto target = out / entry.path().filename();
    fs::remove_all(target);
    fs::rename(entry.path(), target);
  }
  fs::remove_all(stage);
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Single-cell perturbation response benchmark"};
  app.require_subcommand(1, 1);
  std::string config_path;
  std::vector<std::string> sets;
  std::string out_dir = ".";
  std::optional<long long> seed;
  std::optional<int> threads_flag;
  app.add_option("--config", config_path, "flat key = value config file");
  app.add_option("--set", sets, "override, key=value (repeatable)");
  app.add_option("--out", out_dir, "output directory");
  app.add_option("--seed", seed, "base seed");
  app.add_option("--threads", threads_flag, "worker threads")->check(CLI::PositiveNumber);
  app.fallthrough();

  const std::vector<std::pair<std::string, std::string>> commands = {
      {"simulate", "generate a synthetic dataset with ground truth"},
      {"preprocess", "log-normalize, select genes and aggregate"},
      {"split", "assign cells to train/val/test"},
      {"train", "train a baseline model"},
      {"predict", "predict aggregates for a split"},
      {"evaluate", "score predictions against a reference"},
      {"diagnose", "collapse diagnostics only"},
      {"hpo", "random hyperparameter search"},
  };
  for (const auto& [name, help] : commands) app.add_subcommand(name, help);

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    std::cerr << "error " << error_code_name(ErrorCode::Usage) << ": " << e.what() << '\n';
    return 1;
  }
  const std::string sub = app.get_subcommands().front()->get_name();

  const fs::path out(out_dir);
  const bool out_existed = fs::exists(out);
  const fs::path stage = out / (".stage-" + sub + "-" + std::to_string(::getpid()));
  auto discard = [&] {
    std::error_code ec;
    fs::remove_all(stage, ec);
    if (!out_existed && fs::is_empty(out, ec)) fs::remove(out, ec);
  };
  try {
    Context ctx;
    if (!config_path.empty()) ctx.config.merge_file(config_path);
    for (const auto& s : sets) ctx.config.set(s);
    if (seed) ctx.config.set("seed", std::to_string(*seed));
    if (threads_flag) ctx.config.set("threads", std::to_string(*threads_flag));
    const int threads = ctx.config.has("threads") ? static_cast<int>(ctx.config.get_int("threads"))
                                                  : static_cast<int>(std::max(1u, std::thread::hardware_concurrency()));
    fs::create_directories(stage);
    ctx.stage = stage;

    if (sub == "simulate") cmd_simulate(ctx);
    else if (sub == "preprocess") cmd_preprocess(ctx);
    else if (sub == "split") cmd_split(ctx);
    else if (sub == "train") cmd_train(ctx);
    else if (sub == "predict") cmd_predict(ctx);
    else if (sub == "evaluate") cmd_evaluate(ctx);
    else if (sub == "diagnose") cmd_diagnose(ctx);
    else if (sub == "hpo") cmd_hpo(ctx, threads);

    text::write_file(stage / ("resolved_" + sub + ".cfg"), ctx.config.resolved());
    for (const auto& w : ctx.warnings) std::cerr << "warning: " << w << '\n';
    commit(stage, out);
  } catch (const Error& e) {
    discard();
    std::cerr << "error " << error_code_name(e.code()) << ": " << e.what() << '\n';
    return 1;
  } catch (const std::exception& e) {
    discard();
    std::cerr << "error " << error_code_name(ErrorCode::Io) << ": " << e.what() << '\n';
    return 1;
  }
  return 0;
}
