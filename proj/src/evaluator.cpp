#include "pbench/evaluator.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <numeric>
#include <set>

#include "pbench/random.hpp"
#include "pbench/text_io.hpp"

namespace pbench {

namespace {

bool has_logfc(const AggregateTable& t) {
  for (const auto& r : t.rows) {
    if (r.logfc.size() != r.mean.size()) return false;
  }
  return true;
}

void check_genes(const AggregateTable& preds, const AggregateTable& reference) {
  if (preds.genes == reference.genes) return;
  std::string detail = std::to_string(preds.genes.size()) + " vs " + std::to_string(reference.genes.size()) + " genes";
  const auto n = std::min(preds.genes.size(), reference.genes.size());
  for (std::size_t i = 0; i < n; ++i) {
    if (preds.genes[i] != reference.genes[i]) {
      detail += ", first difference at position " + std::to_string(i) + " ('" + preds.genes[i] + "' vs '" +
                reference.genes[i] + "')";
      break;
    }
  }
  throw Error(ErrorCode::GeneMismatch, "prediction and reference gene lists differ: " + detail);
}

// Scored pairs: matched, non-control, LogFC available.
struct Scored {
  std::vector<ConditionAggregate> preds;
  std::vector<ConditionAggregate> obs;
  Index excluded_controls = 0;
  std::vector<Condition> unmatched_predictions;
  std::vector<Condition> unmatched_reference;
};

Scored prepare(const AggregateTable& preds_in, const AggregateTable& ref_in) {
  check_genes(preds_in, ref_in);
  const AggregateTable preds = has_logfc(preds_in) ? preds_in : compute_logfc(preds_in);
  const AggregateTable ref = has_logfc(ref_in) ? ref_in : compute_logfc(ref_in);
  auto m = match_conditions(preds, ref);
  Scored s;
  s.unmatched_predictions = std::move(m.unmatched_predictions);
  s.unmatched_reference = std::move(m.unmatched_reference);
  for (std::size_t i = 0; i < m.obs.size(); ++i) {
    if (ref.is_control(m.obs[i])) {
      ++s.excluded_controls;
      continue;
    }
    s.preds.push_back(std::move(m.preds[i]));
    s.obs.push_back(std::move(m.obs[i]));
  }
  if (s.obs.empty()) throw Error(ErrorCode::Empty, "no perturbed condition is shared by predictions and reference");
  return s;
}

double nan_mean(const std::vector<double>& v) {
  double sum = 0.0;
  Index n = 0;
  for (double x : v) {
    if (std::isnan(x)) continue;
    sum += x;
    ++n;
  }
  return n == 0 ? std::nan("") : sum / static_cast<double>(n);
}

Diagnostics diagnose_scored(const Scored& s, const MetricConfig& config, const std::string& delimiter) {
  if (s.obs.size() < 2) throw Error(ErrorCode::Invalid, "collapse diagnostics need at least 2 matched conditions");
  Diagnostics d;
  d.pred = similarity_matrix(s.preds, delimiter);
  d.obs = similarity_matrix(s.obs, delimiter);
  d.matrix_distance = matrix_distance(d.pred, d.obs);
  d.rank_rmse = rank_metric(s.preds, s.obs, RankDistance::RmseMean, config.rank_scope).average;
  d.transposed_rank_rmse = transposed_rank_metric(s.preds, s.obs, RankDistance::RmseMean, config.rank_scope).average;
  d.rank_cosine = rank_metric(s.preds, s.obs, RankDistance::CosineLfc, config.rank_scope).average;
  d.transposed_rank_cosine =
      transposed_rank_metric(s.preds, s.obs, RankDistance::CosineLfc, config.rank_scope).average;

  const double p = static_cast<double>(s.obs.size());
  if (d.rank_rmse >= config.collapse_rank_threshold) d.signals.push_back("rank=" + text::format_double(d.rank_rmse));
  if (d.transposed_rank_rmse >= config.collapse_rank_threshold) {
    d.signals.push_back("transposed_rank=" + text::format_double(d.transposed_rank_rmse));
  }
  if (d.matrix_distance / p >= config.collapse_matrix_threshold) {
    d.signals.push_back("matrix_distance=" + text::format_double(d.matrix_distance));
  }
  d.verdict = d.signals.empty() ? "no collapse signal" : "collapse signal: " + text::join(d.signals, ", ");
  return d;
}

std::string condition_cells(const Condition& c, const std::string& delimiter) {
  std::string out = c.perturbation_label(delimiter);
  for (const auto& v : c.covariates) out += '\t' + v;
  return out;
}

std::string format_or_na(double v) { return std::isnan(v) ? "NA" : text::format_double(v); }

}  // namespace

std::string metric_column(FitMetric kind, bool on_logfc) {
  return std::string(to_string(kind)) + (on_logfc ? "_logfc" : "_mean");
}

MatchResult match_conditions(const AggregateTable& preds, const AggregateTable& reference) {
  check_genes(preds, reference);
  std::map<Condition, std::size_t> by_condition;
  for (std::size_t i = 0; i < preds.rows.size(); ++i) {
    if (!by_condition.emplace(preds.rows[i].condition, i).second) {
      throw Error(ErrorCode::Invalid, "duplicate prediction for '" + preds.rows[i].condition.label(preds.delimiter) + "'");
    }
  }
  MatchResult out;
  std::set<Condition> seen;
  for (const auto& r : reference.rows) {
    if (!seen.insert(r.condition).second) {
      throw Error(ErrorCode::Invalid, "duplicate reference row for '" + r.condition.label(reference.delimiter) + "'");
    }
    const auto it = by_condition.find(r.condition);
    if (it == by_condition.end()) {
      out.unmatched_reference.push_back(r.condition);
      continue;
    }
    out.preds.push_back(preds.rows[it->second]);
    out.obs.push_back(r);
  }
  for (const auto& p : preds.rows) {
    if (!seen.count(p.condition)) out.unmatched_predictions.push_back(p.condition);
  }
  if (out.obs.empty()) throw Error(ErrorCode::Empty, "predictions and reference share no condition");
  return out;
}

double MetricReport::value(const std::string& metric) const {
  const auto it = macro.find(metric);
  if (it == macro.end()) throw Error(ErrorCode::UnknownName, "report has no metric '" + metric + "'");
  return it->second.mean;
}

MetricReport evaluate(const AggregateTable& preds, const AggregateTable& reference, const MetricConfig& config) {
  const Scored s = prepare(preds, reference);
  MetricReport report;
  report.delimiter = reference.delimiter;
  report.covariate_keys = reference.covariate_keys;
  report.unmatched_predictions = s.unmatched_predictions;
  report.unmatched_reference = s.unmatched_reference;
  report.excluded_controls = s.excluded_controls;

  for (auto k : config.mean_metrics) report.columns.push_back(metric_column(k, false));
  for (auto k : config.logfc_metrics) report.columns.push_back(metric_column(k, true));

  for (std::size_t i = 0; i < s.obs.size(); ++i) {
    ConditionMetrics cm;
    cm.condition = s.obs[i].condition;
    cm.n_cells_pred = s.preds[i].n_cells;
    cm.n_cells_obs = s.obs[i].n_cells;
    try {
      for (auto k : config.mean_metrics) cm.values[metric_column(k, false)] = fit_metric(k, s.preds[i].mean, s.obs[i].mean);
      for (auto k : config.logfc_metrics) {
        cm.values[metric_column(k, true)] = fit_metric(k, s.preds[i].logfc, s.obs[i].logfc);
      }
    } catch (const Error& e) {
      throw Error(e.code(), "condition '" + cm.condition.label(reference.delimiter) + "': " + e.what());
    }
    report.per_condition.push_back(std::move(cm));
  }

  const bool want_rmse = std::count(config.mean_metrics.begin(), config.mean_metrics.end(), FitMetric::Rmse) > 0;
  const bool want_cos = std::count(config.logfc_metrics.begin(), config.logfc_metrics.end(), FitMetric::Cosine) > 0;
  if (s.obs.size() >= 2) {
    auto add_rank = [&](RankDistance kind, bool transposed) {
      const std::string name = std::string(transposed ? "transposed_rank_" : "rank_") +
                               (kind == RankDistance::RmseMean ? "rmse_mean" : "cosine_logfc");
      const auto r = transposed ? transposed_rank_metric(s.preds, s.obs, kind, config.rank_scope, &report.warnings)
                                : rank_metric(s.preds, s.obs, kind, config.rank_scope, &report.warnings);
      report.columns.push_back(name);
      for (std::size_t i = 0; i < r.per_condition.size(); ++i) report.per_condition[i].values[name] = r.per_condition[i];
    };
    try {
      if (want_rmse) {
        add_rank(RankDistance::RmseMean, false);
        add_rank(RankDistance::RmseMean, true);
      }
      if (want_cos) {
        add_rank(RankDistance::CosineLfc, false);
        add_rank(RankDistance::CosineLfc, true);
      }
    } catch (const Error& e) {
      warn(&report.warnings, std::string("rank metrics skipped: ") + e.what());
    }
  } else {
    warn(&report.warnings, "rank metrics need at least 2 matched conditions; skipped");
  }

  for (const auto& col : report.columns) {
    std::vector<double> v;
    for (const auto& cm : report.per_condition) {
      const auto it = cm.values.find(col);
      v.push_back(it == cm.values.end() ? std::nan("") : it->second);
    }
    report.macro[col] = MacroValue{nan_mean(v), std::nullopt, 1};
  }
  if (report.macro.count("rmse_mean") && report.macro.count("rank_rmse_mean")) {
    report.macro["hpo_objective"] =
        MacroValue{hpo_objective(report.macro["rmse_mean"].mean, report.macro["rank_rmse_mean"].mean), std::nullopt, 1};
  }

  if (s.obs.size() >= 2) {
    try {
      report.diagnostics = diagnose_scored(s, config, reference.delimiter);
      report.macro["matrix_distance"] = MacroValue{report.diagnostics->matrix_distance, std::nullopt, 1};
    } catch (const Error& e) {
      warn(&report.warnings, std::string("collapse diagnostics skipped: ") + e.what());
    }
  }
  return report;
}

Diagnostics diagnose_collapse(const AggregateTable& preds, const AggregateTable& reference, const MetricConfig& config) {
  return diagnose_scored(prepare(preds, reference), config, reference.delimiter);
}

void add_distributional(MetricReport& report, const PerturbationDataset& pred_cells,
                        const PerturbationDataset& ref_cells, DistributionalMetric kind, Index max_cells, Seed seed) {
  if (pred_cells.gene_names != ref_cells.gene_names) {
    throw Error(ErrorCode::GeneMismatch, "cell-level prediction and reference gene lists differ");
  }
  if (max_cells < 2) throw Error(ErrorCode::Invalid, "distributional metrics need max_cells >= 2");
  auto rows_by_condition = [](const PerturbationDataset& d) {
    std::map<Condition, std::vector<Index>> m;
    for (Index r = 0; r < d.n_cells(); ++r) m[d.cells[static_cast<std::size_t>(r)]].push_back(r);
    return m;
  };
  const auto pred_rows = rows_by_condition(pred_cells);
  const auto ref_rows = rows_by_condition(ref_cells);
  auto sample = [&](const PerturbationDataset& d, std::vector<Index> rows, Seed s) {
    if (static_cast<Index>(rows.size()) > max_cells) {
      Rng rng(s);
      std::shuffle(rows.begin(), rows.end(), rng);
      rows.resize(static_cast<std::size_t>(max_cells));
      std::sort(rows.begin(), rows.end());
    }
    MatrixXd m(static_cast<Index>(rows.size()), d.n_genes());
    for (std::size_t i = 0; i < rows.size(); ++i) m.row(static_cast<Index>(i)) = d.cell_vector(rows[i]).transpose();
    return m;
  };
  const std::string col = kind == DistributionalMetric::MmdRbf ? "mmd_rbf_cells" : "energy_cells";
  std::vector<double> values;
  for (std::size_t i = 0; i < report.per_condition.size(); ++i) {
    auto& cm = report.per_condition[i];
    const auto p = pred_rows.find(cm.condition);
    const auto o = ref_rows.find(cm.condition);
    double v = std::nan("");
    if (p == pred_rows.end() || o == ref_rows.end() || p->second.size() < 2 || o->second.size() < 2) {
      warn(&report.warnings, "no cell populations for '" + cm.condition.label(report.delimiter) + "'; " + col + " skipped");
    } else {
      const auto a = sample(pred_cells, p->second, derive_seed(seed, {i, 0}));
      const auto b = sample(ref_cells, o->second, derive_seed(seed, {i, 1}));
      v = distributional_metric(kind, a, b);
    }
    cm.values[col] = v;
    values.push_back(v);
  }
  report.columns.push_back(col);
  report.macro[col] = MacroValue{nan_mean(values), std::nullopt, 1};
}

MetricReport summarize_runs(const std::vector<MetricReport>& runs) {
  if (runs.empty()) throw Error(ErrorCode::Empty, "no runs to summarize");
  MetricReport out = runs.front();
  out.diagnostics.reset();
  const auto n = static_cast<double>(runs.size());
  for (const auto& r : runs) {
    if (r.per_condition.size() != out.per_condition.size()) {
      throw Error(ErrorCode::Invalid, "runs evaluated different condition sets");
    }
    for (std::size_t i = 0; i < r.per_condition.size(); ++i) {
      if (!(r.per_condition[i].condition == out.per_condition[i].condition)) {
        throw Error(ErrorCode::Invalid, "runs evaluated different condition sets");
      }
    }
  }
  for (std::size_t i = 0; i < out.per_condition.size(); ++i) {
    for (auto& [name, value] : out.per_condition[i].values) {
      double sum = 0.0;
      for (const auto& r : runs) sum += r.per_condition[i].values.at(name);
      value = sum / n;
    }
  }
  for (auto& [name, macro] : out.macro) {
    std::vector<double> v;
    for (const auto& r : runs) {
      const auto it = r.macro.find(name);
      if (it != r.macro.end()) v.push_back(it->second.mean);
    }
    const double mean = std::accumulate(v.begin(), v.end(), 0.0) / static_cast<double>(v.size());
    double ss = 0.0;
    for (double x : v) ss += (x - mean) * (x - mean);
    macro.mean = mean;
    macro.n = static_cast<Index>(v.size());
    macro.std = v.size() >= 2 ? std::optional<double>(std::sqrt(ss / static_cast<double>(v.size() - 1))) : std::nullopt;
  }
  out.provenance.emplace_back("runs", std::to_string(runs.size()));
  out.provenance.emplace_back("std", "sample (n - 1)");
  return out;
}

std::string format_mean_std(double mean, double std) {
  if (!std::isfinite(mean) || !std::isfinite(std)) return "NA";
  char buf[64];
  int decimals = 0;
  if (mean != 0.0) decimals = std::max(0, 1 - static_cast<int>(std::floor(std::log10(std::abs(mean)))));
  std::snprintf(buf, sizeof buf, "%.*f", decimals, mean);
  std::string out = std::string(buf) + " \u00b1 ";
  if (std == 0.0) return out + "0";
  int e = static_cast<int>(std::floor(std::log10(std)));
  long m = std::lround(std / std::pow(10.0, e));
  if (m == 10) {
    m = 1;
    ++e;
  }
  return out + std::to_string(m) + "e" + std::to_string(e);
}

void write_report(const MetricReport& report, const std::filesystem::path& dir) {
  std::filesystem::create_directories(dir);

  std::string summary = "metric\tmean\tstd\tn\treported\n";
  for (const auto& [name, m] : report.macro) {
    summary += name + '\t' + format_or_na(m.mean) + '\t' + (m.std ? format_or_na(*m.std) : "NA") + '\t' +
               std::to_string(m.n) + '\t' + (m.std ? format_mean_std(m.mean, *m.std) : format_or_na(m.mean)) + '\n';
  }
  text::write_file(dir / "summary.tsv", summary);

  std::string per = "perturbation";
  for (const auto& k : report.covariate_keys) per += '\t' + k;
  per += "\tn_cells_pred\tn_cells_obs";
  for (const auto& c : report.columns) per += '\t' + c;
  per += '\n';
  for (const auto& cm : report.per_condition) {
    per += condition_cells(cm.condition, report.delimiter) + '\t' + std::to_string(cm.n_cells_pred) + '\t' +
           std::to_string(cm.n_cells_obs);
    for (const auto& c : report.columns) {
      const auto it = cm.values.find(c);
      per += '\t' + (it == cm.values.end() ? std::string("NA") : format_or_na(it->second));
    }
    per += '\n';
  }
  text::write_file(dir / "per_condition.tsv", per);

  auto write_matrix = [&](const SimilarityMatrix& s, const std::string& name) {
    std::string out = "condition";
    for (const auto& l : s.labels) out += '\t' + l;
    out += '\n';
    for (Index i = 0; i < s.values.rows(); ++i) {
      out += s.labels[static_cast<std::size_t>(i)];
      for (Index j = 0; j < s.values.cols(); ++j) out += '\t' + format_or_na(s.values(i, j));
      out += '\n';
    }
    text::write_file(dir / name, out);
  };

  std::string txt;
  txt += "[provenance]\n";
  for (const auto& [k, v] : report.provenance) txt += k + " = " + v + '\n';
  txt += "\n[conditions]\n";
  txt += "evaluated = " + std::to_string(report.per_condition.size()) + '\n';
  txt += "excluded_controls = " + std::to_string(report.excluded_controls) + '\n';
  txt += "unmatched_predictions = " + std::to_string(report.unmatched_predictions.size()) + '\n';
  for (const auto& c : report.unmatched_predictions) txt += "  " + c.label(report.delimiter) + '\n';
  txt += "unmatched_reference = " + std::to_string(report.unmatched_reference.size()) + '\n';
  for (const auto& c : report.unmatched_reference) txt += "  " + c.label(report.delimiter) + '\n';
  if (report.diagnostics) {
    const auto& d = *report.diagnostics;
    write_matrix(d.pred, "similarity_matrix_pred.tsv");
    write_matrix(d.obs, "similarity_matrix_obs.tsv");
    txt += "\n[diagnostics]\n";
    txt += "rank_rmse_mean = " + text::format_double(d.rank_rmse) + '\n';
    txt += "transposed_rank_rmse_mean = " + text::format_double(d.transposed_rank_rmse) + '\n';
    txt += "rank_cosine_logfc = " + text::format_double(d.rank_cosine) + '\n';
    txt += "transposed_rank_cosine_logfc = " + text::format_double(d.transposed_rank_cosine) + '\n';
    txt += "matrix_distance = " + text::format_double(d.matrix_distance) + '\n';
    txt += "verdict = " + d.verdict + '\n';
  }
  txt += "\n[warnings]\n";
  for (const auto& w : report.warnings) txt += w + '\n';
  text::write_file(dir / "report.txt", txt);
}

}  // namespace pbench
