#include "pbench/preprocess.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <map>
#include <numeric>
#include <set>

#include "pbench/text_io.hpp"

namespace pbench {

PerturbationDataset log_normalize(const PerturbationDataset& d) {
  if (d.meta.value_space != ValueSpace::Counts) {
    throw Error(ErrorCode::Invalid, "log_normalize expects a counts dataset");
  }
  PerturbationDataset out = d;
  out.counts.makeCompressed();
  for (Index r = 0; r < out.counts.outerSize(); ++r) {
    double total = 0.0;
    for (CountMatrix::InnerIterator it(out.counts, r); it; ++it) total += it.value();
    if (!(total > 0.0)) {
      throw Error(ErrorCode::Invalid,
                  "cell '" + d.cell_ids[static_cast<std::size_t>(r)] + "' has zero total count");
    }
    const double scale = kNormalizationTarget / total;
    for (CountMatrix::InnerIterator it(out.counts, r); it; ++it) {
      it.valueRef() = std::log1p(it.value() * scale);
    }
  }
  out.meta.value_space = ValueSpace::LogNorm;
  return out;
}

namespace {

struct Moments {
  VectorXd mean;
  VectorXd var;  // sample variance, 0 when n < 2
};

Moments column_moments(const PerturbationDataset& d, std::span<const Index> rows) {
  const Index g = d.n_genes();
  VectorXd sum = VectorXd::Zero(g);
  VectorXd sumsq = VectorXd::Zero(g);
  for (Index r : rows) {
    for (CountMatrix::InnerIterator it(d.counts, r); it; ++it) {
      sum(it.col()) += it.value();
      sumsq(it.col()) += it.value() * it.value();
    }
  }
  const double n = static_cast<double>(rows.size());
  Moments m;
  m.mean = sum / n;
  if (rows.size() < 2) {
    m.var = VectorXd::Zero(g);
  } else {
    m.var = ((sumsq - n * m.mean.cwiseAbs2()) / (n - 1.0)).cwiseMax(0.0);
  }
  return m;
}

/// Indices of the k largest scores; ties go to the lower index.
std::vector<Index> top_k(const VectorXd& score, Index k) {
  std::vector<Index> order(static_cast<std::size_t>(score.size()));
  std::iota(order.begin(), order.end(), Index{0});
  std::stable_sort(order.begin(), order.end(), [&](Index a, Index b) { return score(a) > score(b); });
  order.resize(static_cast<std::size_t>(std::min<Index>(k, score.size())));
  return order;
}

}  // namespace

VectorXd welch_t(const PerturbationDataset& d, std::span<const Index> rows_a,
                 std::span<const Index> rows_b) {
  const auto a = column_moments(d, rows_a);
  const auto b = column_moments(d, rows_b);
  const double na = static_cast<double>(rows_a.size());
  const double nb = static_cast<double>(rows_b.size());
  VectorXd t(d.n_genes());
  for (Index g = 0; g < t.size(); ++g) {
    const double diff = a.mean(g) - b.mean(g);
    const double se = std::sqrt(a.var(g) / na + b.var(g) / nb);
    if (se > 0.0) {
      t(g) = diff / se;
    } else if (diff == 0.0) {
      t(g) = 0.0;
    } else {
      t(g) = std::copysign(std::numeric_limits<double>::max(), diff);
    }
  }
  return t;
}

GeneSelection select_genes(const PerturbationDataset& d, const GeneSelectionOptions& options,
                           Warnings* warnings) {
  if (d.meta.value_space != ValueSpace::LogNorm) {
    throw Error(ErrorCode::Invalid, "select_genes expects a lognorm dataset");
  }
  if (options.n_hvg > d.n_genes() || options.n_hvg < 0) {
    throw Error(ErrorCode::Invalid, "n_hvg " + std::to_string(options.n_hvg) + " exceeds gene count " +
                                        std::to_string(d.n_genes()));
  }
  std::vector<Index> all(static_cast<std::size_t>(d.n_cells()));
  std::iota(all.begin(), all.end(), Index{0});
  std::vector<bool> keep(static_cast<std::size_t>(d.n_genes()), false);
  for (Index g : top_k(column_moments(d, all).var, options.n_hvg)) keep[static_cast<std::size_t>(g)] = true;

  if (options.n_de_per_condition > 0) {
    std::map<Condition, std::vector<Index>> groups;
    for (Index r = 0; r < d.n_cells(); ++r) groups[d.cells[static_cast<std::size_t>(r)]].push_back(r);
    for (const auto& [cond, rows] : groups) {
      if (cond.is_control(d.meta.control_value)) continue;
      const auto ctrl = groups.find(d.control_condition(cond.covariates));
      const std::size_t n_ctrl = ctrl == groups.end() ? 0 : ctrl->second.size();
      if (rows.size() < 2 || n_ctrl < 2) {
        warn(warnings, "skipping DE for condition '" + cond.label(d.meta.combination_delimiter) +
                           "': fewer than 2 perturbed or control cells");
        continue;
      }
      const VectorXd t = welch_t(d, rows, ctrl->second).cwiseAbs();
      for (Index g : top_k(t, options.n_de_per_condition)) keep[static_cast<std::size_t>(g)] = true;
    }
  }

  if (options.include_perturbed_genes) {
    std::set<std::string> perturbed;
    for (const auto& c : d.cells) {
      for (const auto& p : c.perturbations) perturbed.insert(p);
    }
    for (std::size_t g = 0; g < d.gene_names.size(); ++g) {
      if (perturbed.count(d.gene_names[g]) > 0) keep[g] = true;
    }
  }

  std::vector<Index> cols;
  for (std::size_t g = 0; g < keep.size(); ++g) {
    if (keep[g]) cols.push_back(static_cast<Index>(g));
  }
  GeneSelection out{subset_genes(d, cols), {}};
  out.genes = out.dataset.gene_names;
  return out;
}

const ConditionAggregate* AggregateTable::find(const Condition& c) const {
  for (const auto& a : rows) {
    if (a.condition == c) return &a;
  }
  return nullptr;
}

AggregateTable aggregate_means(const PerturbationDataset& d, Index min_cells,
                               std::optional<std::span<const Index>> rows, Warnings* warnings) {
  if (d.meta.value_space != ValueSpace::LogNorm) {
    throw Error(ErrorCode::Invalid, "aggregate_means expects a lognorm dataset");
  }
  std::vector<Index> selected;
  if (rows) {
    selected.assign(rows->begin(), rows->end());
  } else {
    selected.resize(static_cast<std::size_t>(d.n_cells()));
    std::iota(selected.begin(), selected.end(), Index{0});
  }
  // first-appearance order of conditions, each with rows in the given order
  std::vector<Condition> order;
  std::map<Condition, std::vector<Index>> groups;
  for (Index r : selected) {
    const auto& c = d.cells[static_cast<std::size_t>(r)];
    auto [it, inserted] = groups.try_emplace(c);
    if (inserted) order.push_back(c);
    it->second.push_back(r);
  }

  AggregateTable table;
  table.covariate_keys = d.meta.covariate_keys;
  table.genes = d.gene_names;
  table.control_value = d.meta.control_value;
  table.delimiter = d.meta.combination_delimiter;
  std::vector<std::string> dropped;
  for (const auto& c : order) {
    const auto& members = groups[c];
    if (static_cast<Index>(members.size()) < min_cells) {
      dropped.push_back(c.label(d.meta.combination_delimiter));
      continue;
    }
    VectorXd sum = VectorXd::Zero(d.n_genes());
    for (Index r : members) {
      for (CountMatrix::InnerIterator it(d.counts, r); it; ++it) sum(it.col()) += it.value();
    }
    ConditionAggregate agg;
    agg.condition = c;
    agg.n_cells = static_cast<Index>(members.size());
    agg.mean = sum / static_cast<double>(members.size());
    table.rows.push_back(std::move(agg));
  }
  if (!dropped.empty()) {
    warn(warnings, "conditions below min_cells=" + std::to_string(min_cells) + " excluded: " +
                       text::join(dropped, ", "));
  }
  return table;
}

AggregateTable compute_logfc(AggregateTable table) {
  std::map<CovariateAssignment, const ConditionAggregate*> controls;
  for (const auto& a : table.rows) {
    if (table.is_control(a)) controls[a.condition.covariates] = &a;
  }
  std::vector<VectorXd> logfc;
  logfc.reserve(table.rows.size());
  for (const auto& a : table.rows) {
    const auto it = controls.find(a.condition.covariates);
    if (it == controls.end()) {
      throw Error(ErrorCode::MissingControl, "no control aggregate for covariates '" +
                                                 text::join(a.condition.covariates, "|") + "'");
    }
    if (table.is_control(a)) {
      logfc.push_back(VectorXd::Zero(a.mean.size()));
    } else {
      logfc.push_back(a.mean - it->second->mean);
    }
  }
  for (std::size_t i = 0; i < table.rows.size(); ++i) table.rows[i].logfc = std::move(logfc[i]);
  return table;
}

namespace {

std::string aggregate_header(const AggregateTable& t) {
  std::string out = "perturbation";
  for (const auto& k : t.covariate_keys) out += '\t' + k;
  out += "\tn_cells";
  for (const auto& g : t.genes) out += '\t' + g;
  out += '\n';
  return out;
}

std::string aggregate_body(const AggregateTable& t, bool logfc) {
  std::string out = aggregate_header(t);
  for (const auto& a : t.rows) {
    const VectorXd& v = logfc ? a.logfc : a.mean;
    if (v.size() != static_cast<Index>(t.genes.size())) {
      throw Error(ErrorCode::Dimension, "aggregate '" + a.condition.label(t.delimiter) +
                                            "' has a vector of the wrong length");
    }
    out += a.condition.perturbation_label(t.delimiter);
    for (const auto& c : a.condition.covariates) out += '\t' + c;
    out += '\t' + std::to_string(a.n_cells);
    for (Index g = 0; g < v.size(); ++g) out += '\t' + text::format_double(v(g));
    out += '\n';
  }
  return out;
}

struct ParsedTable {
  std::vector<std::string> covariate_keys;
  std::vector<std::string> genes;
  std::vector<Condition> conditions;
  std::vector<Index> n_cells;
  std::vector<VectorXd> values;
};

ParsedTable parse_aggregate_file(const std::filesystem::path& path, const std::string& delimiter) {
  const auto lines = text::read_lines(path);
  if (lines.empty()) throw Error(ErrorCode::Format, path.string() + ": empty file");
  const auto header = text::split(lines.front(), '\t');
  const auto n_col = std::find(header.begin(), header.end(), "n_cells");
  if (header.empty() || header.front() != "perturbation" || n_col == header.end()) {
    throw Error(ErrorCode::Format, path.string() + ": header must start with 'perturbation' and contain 'n_cells'");
  }
  ParsedTable t;
  const auto n_pos = static_cast<std::size_t>(n_col - header.begin());
  t.covariate_keys.assign(header.begin() + 1, n_col);
  t.genes.assign(n_col + 1, header.end());
  for (std::size_t i = 1; i < lines.size(); ++i) {
    if (lines[i].empty()) continue;
    const auto f = text::split(lines[i], '\t');
    if (f.size() != header.size()) {
      throw Error(ErrorCode::Format, path.string() + " line " + std::to_string(i + 1) + ": expected " +
                                         std::to_string(header.size()) + " fields");
    }
    CovariateAssignment covs(f.begin() + 1, f.begin() + static_cast<std::ptrdiff_t>(n_pos));
    t.conditions.emplace_back(text::split(f[0], delimiter), std::move(covs));
    t.n_cells.push_back(static_cast<Index>(text::parse_int(f[n_pos], "n_cells")));
    VectorXd v(static_cast<Index>(t.genes.size()));
    for (std::size_t g = 0; g < t.genes.size(); ++g) {
      v(static_cast<Index>(g)) = text::parse_double(f[n_pos + 1 + g], path.string());
    }
    t.values.push_back(std::move(v));
  }
  return t;
}

}  // namespace

void write_aggregate_file(const AggregateTable& table, const std::filesystem::path& path, AggregateField field) {
  text::write_file(path, aggregate_body(table, field == AggregateField::LogFc));
}

void write_aggregates(const AggregateTable& table, const std::filesystem::path& means_path,
                      const std::filesystem::path& logfc_path) {
  write_aggregate_file(table, means_path, AggregateField::Mean);
  write_aggregate_file(table, logfc_path, AggregateField::LogFc);
}

AggregateTable read_aggregates(const std::filesystem::path& means_path,
                               const std::optional<std::filesystem::path>& logfc_path,
                               const std::string& control_value, const std::string& delimiter) {
  auto means = parse_aggregate_file(means_path, delimiter);
  AggregateTable table;
  table.covariate_keys = means.covariate_keys;
  table.genes = means.genes;
  table.control_value = control_value;
  table.delimiter = delimiter;
  for (std::size_t i = 0; i < means.conditions.size(); ++i) {
    ConditionAggregate a;
    a.condition = means.conditions[i];
    a.n_cells = means.n_cells[i];
    a.mean = std::move(means.values[i]);
    table.rows.push_back(std::move(a));
  }
  if (logfc_path) {
    auto lfc = parse_aggregate_file(*logfc_path, delimiter);
    if (lfc.genes != table.genes) {
      throw Error(ErrorCode::GeneMismatch, "gene columns of " + logfc_path->string() + " differ from " +
                                               means_path.string());
    }
    if (lfc.conditions != means.conditions) {
      throw Error(ErrorCode::Format, "condition rows of " + logfc_path->string() + " differ from " +
                                         means_path.string());
    }
    for (std::size_t i = 0; i < lfc.values.size(); ++i) table.rows[i].logfc = std::move(lfc.values[i]);
  }
  return table;
}

}  // namespace pbench
