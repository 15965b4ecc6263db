#include "pbench/dataset.hpp"

#include <algorithm>
#include <cmath>
#include <random>
#include <set>
#include <sstream>
#include <unordered_map>
#include <unordered_set>

#include "pbench/text_io.hpp"

namespace pbench {

namespace fs = std::filesystem;

std::string_view to_string(ValueSpace space) noexcept {
  return space == ValueSpace::Counts ? "counts" : "lognorm";
}

ValueSpace parse_value_space(std::string_view token) {
  if (token == "counts") return ValueSpace::Counts;
  if (token == "lognorm") return ValueSpace::LogNorm;
  throw Error(ErrorCode::Format, "unknown value_space '" + std::string(token) + "'");
}

Condition::Condition(std::vector<std::string> perts, CovariateAssignment covs)
    : perturbations(std::move(perts)), covariates(std::move(covs)) {
  std::sort(perturbations.begin(), perturbations.end());
  perturbations.erase(std::unique(perturbations.begin(), perturbations.end()), perturbations.end());
}

bool Condition::is_control(std::string_view control_value) const {
  return perturbations.size() == 1 && perturbations.front() == control_value;
}

std::string Condition::perturbation_label(std::string_view delimiter) const {
  return text::join(perturbations, delimiter);
}

std::string Condition::label(std::string_view delimiter) const {
  std::string out = perturbation_label(delimiter);
  for (const auto& c : covariates) {
    out += '|';
    out += c;
  }
  return out;
}

VectorXd PerturbationDataset::cell_vector(Index row) const {
  VectorXd v = VectorXd::Zero(n_genes());
  for (CountMatrix::InnerIterator it(counts, row); it; ++it) v(it.col()) = it.value();
  return v;
}

std::vector<Condition> PerturbationDataset::distinct_conditions() const {
  std::vector<Condition> out;
  std::set<Condition> seen;
  for (const auto& c : cells) {
    if (seen.insert(c).second) out.push_back(c);
  }
  return out;
}

void validate(const PerturbationDataset& d) {
  const auto n = static_cast<std::size_t>(d.n_cells());
  if (d.cell_ids.size() != n || d.cells.size() != n) {
    throw Error(ErrorCode::Dimension, "matrix has " + std::to_string(n) + " rows but metadata has " +
                                          std::to_string(d.cell_ids.size()) + " cells");
  }
  if (d.gene_names.size() != static_cast<std::size_t>(d.n_genes())) {
    throw Error(ErrorCode::Dimension, "matrix has " + std::to_string(d.n_genes()) +
                                          " columns but " + std::to_string(d.gene_names.size()) +
                                          " gene names");
  }
  std::unordered_set<std::string> seen;
  for (const auto& id : d.cell_ids) {
    if (!seen.insert(id).second) throw Error(ErrorCode::Invalid, "duplicate cell_id '" + id + "'");
  }
  seen.clear();
  for (const auto& g : d.gene_names) {
    if (!seen.insert(g).second) throw Error(ErrorCode::Invalid, "duplicate gene name '" + g + "'");
  }
  const auto n_keys = d.meta.covariate_keys.size();
  for (std::size_t i = 0; i < n; ++i) {
    const auto& c = d.cells[i];
    if (c.perturbations.empty()) {
      throw Error(ErrorCode::Invalid, "cell '" + d.cell_ids[i] + "' has an empty perturbation set");
    }
    if (c.perturbations.size() > 1 &&
        std::find(c.perturbations.begin(), c.perturbations.end(), d.meta.control_value) !=
            c.perturbations.end()) {
      throw Error(ErrorCode::Invalid, "cell '" + d.cell_ids[i] + "' combines the control value");
    }
    if (c.covariates.size() != n_keys) {
      throw Error(ErrorCode::Invalid, "cell '" + d.cell_ids[i] + "' lacks a covariate value");
    }
  }
  for (Index k = 0; k < d.counts.outerSize(); ++k) {
    for (CountMatrix::InnerIterator it(d.counts, k); it; ++it) {
      if (!std::isfinite(it.value())) {
        throw Error(ErrorCode::NonFinite, "non-finite value at cell '" +
                                              d.cell_ids[static_cast<std::size_t>(it.row())] + "'");
      }
      if (it.value() < 0) {
        throw Error(ErrorCode::Invalid, "negative value at cell '" +
                                            d.cell_ids[static_cast<std::size_t>(it.row())] + "'");
      }
    }
  }
}

PerturbationDataset subset_cells(const PerturbationDataset& d, std::span<const Index> rows) {
  PerturbationDataset out;
  out.meta = d.meta;
  out.gene_names = d.gene_names;
  std::vector<Eigen::Triplet<double, int>> trips;
  for (std::size_t r = 0; r < rows.size(); ++r) {
    const Index src = rows[r];
    out.cell_ids.push_back(d.cell_ids[static_cast<std::size_t>(src)]);
    out.cells.push_back(d.cells[static_cast<std::size_t>(src)]);
    for (CountMatrix::InnerIterator it(d.counts, src); it; ++it) {
      trips.emplace_back(static_cast<int>(r), static_cast<int>(it.col()), it.value());
    }
  }
  out.counts.resize(static_cast<Index>(rows.size()), d.n_genes());
  out.counts.setFromTriplets(trips.begin(), trips.end());
  return out;
}

PerturbationDataset subset_genes(const PerturbationDataset& d, std::span<const Index> cols) {
  PerturbationDataset out;
  out.meta = d.meta;
  out.cell_ids = d.cell_ids;
  out.cells = d.cells;
  std::vector<int> remap(static_cast<std::size_t>(d.n_genes()), -1);
  for (std::size_t j = 0; j < cols.size(); ++j) {
    remap[static_cast<std::size_t>(cols[j])] = static_cast<int>(j);
    out.gene_names.push_back(d.gene_names[static_cast<std::size_t>(cols[j])]);
  }
  std::vector<Eigen::Triplet<double, int>> trips;
  for (Index r = 0; r < d.n_cells(); ++r) {
    for (CountMatrix::InnerIterator it(d.counts, r); it; ++it) {
      const int c = remap[static_cast<std::size_t>(it.col())];
      if (c >= 0) trips.emplace_back(static_cast<int>(r), c, it.value());
    }
  }
  out.counts.resize(d.n_cells(), static_cast<Index>(cols.size()));
  out.counts.setFromTriplets(trips.begin(), trips.end());
  return out;
}

namespace {

constexpr std::string_view kMtxHeader = "%%MatrixMarket matrix coordinate real general";

void require_file(const fs::path& p) {
  if (!fs::is_regular_file(p)) throw Error(ErrorCode::Io, "missing file " + p.string());
}

CountMatrix read_mtx(const fs::path& path) {
  const auto lines = text::read_lines(path);
  if (lines.empty() || lines.front().rfind("%%MatrixMarket", 0) != 0) {
    throw Error(ErrorCode::Format, path.string() + ": missing MatrixMarket header");
  }
  if (lines.front() != kMtxHeader) {
    throw Error(ErrorCode::Format, path.string() + ": only '" + std::string(kMtxHeader) +
                                       "' is supported");
  }
  std::size_t i = 1;
  while (i < lines.size() && (lines[i].empty() || lines[i].front() == '%')) ++i;
  if (i == lines.size()) throw Error(ErrorCode::Format, path.string() + ": missing size line");
  std::istringstream size_line(lines[i++]);
  long long rows = -1, cols = -1, nnz = -1;
  if (!(size_line >> rows >> cols >> nnz) || rows < 0 || cols < 0 || nnz < 0) {
    throw Error(ErrorCode::Format, path.string() + ": malformed size line");
  }
  std::vector<Eigen::Triplet<double, int>> trips;
  trips.reserve(static_cast<std::size_t>(nnz));
  for (; i < lines.size(); ++i) {
    if (lines[i].empty()) continue;
    const auto parts = text::split(lines[i], ' ');
    if (parts.size() != 3) throw Error(ErrorCode::Format, path.string() + ": malformed triplet");
    const auto r = text::parse_int(parts[0], "matrix.mtx row");
    const auto c = text::parse_int(parts[1], "matrix.mtx col");
    const double v = text::parse_double(parts[2], "matrix.mtx value");
    if (r < 1 || r > rows || c < 1 || c > cols) {
      throw Error(ErrorCode::Dimension, path.string() + ": triplet index out of range");
    }
    if (!std::isfinite(v)) throw Error(ErrorCode::NonFinite, path.string() + ": non-finite value");
    if (v < 0) throw Error(ErrorCode::Invalid, path.string() + ": negative value");
    trips.emplace_back(static_cast<int>(r - 1), static_cast<int>(c - 1), v);
  }
  if (static_cast<long long>(trips.size()) != nnz) {
    throw Error(ErrorCode::Format, path.string() + ": triplet count does not match header");
  }
  CountMatrix m(static_cast<Index>(rows), static_cast<Index>(cols));
  m.setFromTriplets(trips.begin(), trips.end(), [](double, double) -> double {
    throw Error(ErrorCode::Format, "matrix.mtx: duplicate entry");
  });
  return m;
}

std::string write_mtx(const CountMatrix& m) {
  std::string out(kMtxHeader);
  out += '\n';
  Index nnz = 0;
  for (Index r = 0; r < m.outerSize(); ++r) {
    for (CountMatrix::InnerIterator it(m, r); it; ++it) {
      if (it.value() != 0.0) ++nnz;
    }
  }
  out += std::to_string(m.rows()) + ' ' + std::to_string(m.cols()) + ' ' + std::to_string(nnz) + '\n';
  for (Index r = 0; r < m.outerSize(); ++r) {
    for (CountMatrix::InnerIterator it(m, r); it; ++it) {
      if (it.value() == 0.0) continue;
      out += std::to_string(it.row() + 1);
      out += ' ';
      out += std::to_string(it.col() + 1);
      out += ' ';
      out += text::format_double(it.value());
      out += '\n';
    }
  }
  return out;
}

DatasetMeta read_meta(const fs::path& path) {
  DatasetMeta meta;
  bool have_keys = false;
  for (const auto& line : text::read_lines(path)) {
    if (line.empty() || line.front() == '#') continue;
    const auto tab = line.find('\t');
    if (tab == std::string::npos) throw Error(ErrorCode::Format, "meta.tsv: line without tab");
    const auto key = line.substr(0, tab);
    const auto value = line.substr(tab + 1);
    if (key == "control_value") {
      meta.control_value = value;
    } else if (key == "combination_delimiter") {
      meta.combination_delimiter = value;
    } else if (key == "covariate_keys") {
      have_keys = true;
      meta.covariate_keys = value.empty() ? std::vector<std::string>{} : text::split(value, ',');
    } else if (key == "value_space") {
      meta.value_space = parse_value_space(value);
    } else {
      throw Error(ErrorCode::Format, "meta.tsv: unknown key '" + key + "'");
    }
  }
  if (!have_keys) throw Error(ErrorCode::Format, "meta.tsv: missing covariate_keys");
  if (meta.control_value.empty() || meta.combination_delimiter.empty()) {
    throw Error(ErrorCode::Format, "meta.tsv: control_value and combination_delimiter must be non-empty");
  }
  return meta;
}

}  // namespace

PerturbationDataset load_dataset(const fs::path& dir) {
  const auto mtx = dir / "matrix.mtx";
  const auto obs = dir / "obs.tsv";
  const auto var = dir / "var.tsv";
  const auto meta_path = dir / "meta.tsv";
  for (const auto& p : {mtx, obs, var, meta_path}) require_file(p);

  PerturbationDataset d;
  d.meta = read_meta(meta_path);
  d.counts = read_mtx(mtx);

  const auto var_lines = text::read_lines(var);
  if (var_lines.empty() || var_lines.front() != "gene_name") {
    throw Error(ErrorCode::Format, "var.tsv: expected header 'gene_name'");
  }
  for (std::size_t i = 1; i < var_lines.size(); ++i) {
    if (!var_lines[i].empty()) d.gene_names.push_back(var_lines[i]);
  }

  const auto obs_lines = text::read_lines(obs);
  if (obs_lines.empty()) throw Error(ErrorCode::Format, "obs.tsv: missing header");
  const auto header = text::split(obs_lines.front(), '\t');
  if (header.front() != "cell_id") throw Error(ErrorCode::Format, "obs.tsv: first column must be cell_id");
  auto column_of = [&](const std::string& name) -> std::size_t {
    const auto it = std::find(header.begin(), header.end(), name);
    if (it == header.end()) {
      throw Error(ErrorCode::UnknownName, "obs.tsv: no column '" + name + "'");
    }
    return static_cast<std::size_t>(it - header.begin());
  };
  const auto pert_col = column_of("perturbation");
  std::vector<std::size_t> cov_cols;
  for (const auto& key : d.meta.covariate_keys) cov_cols.push_back(column_of(key));

  for (std::size_t i = 1; i < obs_lines.size(); ++i) {
    if (obs_lines[i].empty()) continue;
    const auto fields = text::split(obs_lines[i], '\t');
    if (fields.size() != header.size()) {
      throw Error(ErrorCode::Format, "obs.tsv line " + std::to_string(i + 1) + ": expected " +
                                         std::to_string(header.size()) + " fields");
    }
    d.cell_ids.push_back(fields[0]);
    CovariateAssignment covs;
    for (auto c : cov_cols) covs.push_back(fields[c]);
    auto perts = text::split(fields[pert_col], d.meta.combination_delimiter);
    for (const auto& p : perts) {
      if (p.empty()) {
        throw Error(ErrorCode::Format, "obs.tsv: empty perturbation name for cell '" + fields[0] + "'");
      }
    }
    d.cells.emplace_back(std::move(perts), std::move(covs));
  }
  validate(d);
  return d;
}

void save_dataset(const PerturbationDataset& d, const fs::path& dir) {
  validate(d);
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec || !fs::is_directory(dir)) throw Error(ErrorCode::Io, "cannot create directory " + dir.string());

  text::write_file(dir / "matrix.mtx", write_mtx(d.counts));

  std::string obs = "cell_id\tperturbation";
  for (const auto& k : d.meta.covariate_keys) obs += '\t' + k;
  obs += '\n';
  for (std::size_t i = 0; i < d.cell_ids.size(); ++i) {
    obs += d.cell_ids[i];
    obs += '\t';
    obs += d.cells[i].perturbation_label(d.meta.combination_delimiter);
    for (const auto& c : d.cells[i].covariates) obs += '\t' + c;
    obs += '\n';
  }
  text::write_file(dir / "obs.tsv", obs);

  std::string var = "gene_name\n";
  for (const auto& g : d.gene_names) var += g + '\n';
  text::write_file(dir / "var.tsv", var);

  std::string meta;
  meta += "control_value\t" + d.meta.control_value + '\n';
  meta += "combination_delimiter\t" + d.meta.combination_delimiter + '\n';
  meta += "covariate_keys\t" + text::join(d.meta.covariate_keys, ",") + '\n';
  meta += "value_space\t" + std::string(to_string(d.meta.value_space)) + '\n';
  text::write_file(dir / "meta.tsv", meta);
}

const std::vector<Index>& ControlIndex::at(const CovariateAssignment& covs) const {
  const auto it = rows.find(covs);
  if (it == rows.end()) {
    throw Error(ErrorCode::UnknownName, "no control cells for covariates '" + text::join(covs, "|") + "'");
  }
  return it->second;
}

ControlIndex build_control_index(const PerturbationDataset& d) {
  ControlIndex idx;
  std::set<CovariateAssignment> perturbed;
  for (Index r = 0; r < d.n_cells(); ++r) {
    const auto& c = d.cells[static_cast<std::size_t>(r)];
    if (c.is_control(d.meta.control_value)) {
      idx.rows[c.covariates].push_back(r);
    } else {
      perturbed.insert(c.covariates);
    }
  }
  for (const auto& covs : perturbed) {
    if (!idx.contains(covs)) {
      throw Error(ErrorCode::MissingControl,
                  "covariate combination '" + text::join(covs, "|") + "' has perturbed cells but no controls");
    }
  }
  return idx;
}

std::vector<Index> sample_matched_controls(const ControlIndex& idx, const CovariateAssignment& covs,
                                           Index n, Seed seed) {
  if (n < 1) throw Error(ErrorCode::Invalid, "sample size must be at least 1");
  const auto& pool = idx.at(covs);
  std::mt19937_64 rng(seed);
  std::uniform_int_distribution<std::size_t> pick(0, pool.size() - 1);
  std::vector<Index> out(static_cast<std::size_t>(n));
  for (auto& r : out) r = pool[pick(rng)];
  return out;
}

std::vector<CounterfactualRequest> build_counterfactual_requests(
    const PerturbationDataset& d, const ControlIndex& idx, std::span<const Condition> targets,
    const PerturbationDataset* reference) {
  (void)d;
  std::map<Condition, std::vector<Index>> by_condition;
  if (reference != nullptr) {
    for (Index r = 0; r < reference->n_cells(); ++r) {
      by_condition[reference->cells[static_cast<std::size_t>(r)]].push_back(r);
    }
  }
  std::vector<CounterfactualRequest> out;
  out.reserve(targets.size());
  for (const auto& t : targets) {
    CounterfactualRequest req;
    req.target = t;
    req.control_rows = idx.at(t.covariates);
    if (reference != nullptr) {
      req.has_reference = true;
      const auto it = by_condition.find(t);
      if (it != by_condition.end()) req.reference_rows = it->second;
      req.empty_reference = req.reference_rows.empty();
    }
    out.push_back(std::move(req));
  }
  return out;
}

}  // namespace pbench
