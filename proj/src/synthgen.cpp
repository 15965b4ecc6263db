#include "pbench/synthgen.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <set>

#include "pbench/random.hpp"
#include "pbench/text_io.hpp"

namespace pbench {

void validate(const SynthSpec& spec) {
  auto require = [](bool ok, const char* what) {
    if (!ok) throw Error(ErrorCode::Invalid, std::string("synthetic spec: ") + what);
  };
  require(spec.n_genes >= 1 && spec.n_perturbations >= 1, "gene and perturbation counts must be >= 1");
  require(spec.cells_per_condition >= 1 && spec.control_cells >= 0, "cell counts must be >= 1");
  require(spec.truth_cells >= 1, "truth_cells must be >= 1");
  require(spec.covariate_levels.size() == spec.covariate_keys.size(), "one level count per covariate key");
  for (auto l : spec.covariate_levels) require(l >= 1, "covariate level counts must be >= 1");
  require(spec.effect_sparsity >= 0 && spec.effect_sparsity <= spec.n_genes, "effect sparsity out of range");
  require(spec.effect_scale >= 0 && spec.covariate_scale >= 0 && spec.gene_baseline_sd >= 0 &&
              spec.interaction_scale >= 0 && spec.cell_noise >= 0 && spec.library_log_sd >= 0,
          "scales must be >= 0");
  require(spec.interaction_fraction >= 0 && spec.interaction_fraction <= 1, "interaction fraction must lie in [0, 1]");
  const Index pairs = spec.n_perturbations * (spec.n_perturbations - 1) / 2;
  require(spec.n_combinations >= 0 && spec.n_combinations <= pairs, "more combinations than distinct pairs");
}

VectorXd GroundTruth::log_rate_effect(const Condition& c) const {
  VectorXd out = VectorXd::Zero(static_cast<Index>(genes.size()));
  if (c.is_control(control_value)) return out;
  for (const auto& p : c.perturbations) out += effects.at(p);
  const auto it = interactions.find(c.perturbations);
  if (it != interactions.end()) out += it->second;
  return out;
}

namespace {

enum Stream : std::uint64_t { kParams = 1, kCells = 2, kTruth = 3, kOracle = 4 };

std::string padded(const char* prefix, Index i, int width) {
  auto digits_str = std::to_string(i);
  if (static_cast<int>(digits_str.size()) < width) digits_str.insert(0, static_cast<std::size_t>(width) - digits_str.size(), '0');
  return prefix + digits_str;
}

int digits(Index n) { return n < 10 ? 1 : 1 + digits(n / 10); }

VectorXd sparse_normal(Index n, Index k, double scale, Rng& rng) {
  VectorXd v = VectorXd::Zero(n);
  if (k == 0 || scale == 0.0) return v;
  std::vector<Index> idx(static_cast<std::size_t>(n));
  std::iota(idx.begin(), idx.end(), Index{0});
  std::shuffle(idx.begin(), idx.end(), rng);
  std::normal_distribution<double> normal(0.0, scale);
  for (Index i = 0; i < k; ++i) v(idx[static_cast<std::size_t>(i)]) = normal(rng);
  return v;
}

/// Draws one cell's counts for a given noise-free log-rate vector.
void simulate_cell(const VectorXd& log_rate, const SynthSpec& spec, Rng& rng, VectorXd& counts) {
  std::normal_distribution<double> noise(0.0, spec.cell_noise);
  std::normal_distribution<double> lib(spec.library_log_mean, spec.library_log_sd);
  VectorXd w(log_rate.size());
  do {
    for (Index g = 0; g < w.size(); ++g) w(g) = std::exp(log_rate(g) + (spec.cell_noise > 0 ? noise(rng) : 0.0));
    w /= w.sum();
    const double library = std::exp(lib(rng));
    for (Index g = 0; g < w.size(); ++g) {
      std::poisson_distribution<long long> pois(library * w(g));
      counts(g) = static_cast<double>(pois(rng));
    }
  } while (counts.sum() <= 0.0);
}

void lognorm_in_place(VectorXd& counts) {
  const double scale = kNormalizationTarget / counts.sum();
  counts = (counts * scale).array().log1p().matrix();
}

}  // namespace

OracleKind parse_oracle_kind(std::string_view token) {
  if (token == "perfect") return OracleKind::Perfect;
  if (token == "collapsed") return OracleKind::Collapsed;
  if (token == "noisy") return OracleKind::Noisy;
  throw Error(ErrorCode::Config, "unknown oracle kind '" + std::string(token) + "'");
}

SynthResult generate(const SynthSpec& spec) {
  validate(spec);
  const Index g = spec.n_genes;
  Rng rng(derive_seed(spec.seed, {kParams}));

  GroundTruth truth;
  truth.covariate_keys = spec.covariate_keys;
  for (Index i = 0; i < g; ++i) truth.genes.push_back(padded("gene_", i, std::max(3, digits(g - 1))));

  std::normal_distribution<double> normal(0.0, 1.0);
  VectorXd gene_base(g);
  for (Index i = 0; i < g; ++i) gene_base(i) = spec.gene_baseline_sd * normal(rng);

  std::vector<std::vector<VectorXd>> cov_offsets(spec.covariate_levels.size());
  std::vector<std::vector<std::string>> level_names(spec.covariate_levels.size());
  for (std::size_t k = 0; k < spec.covariate_levels.size(); ++k) {
    for (Index l = 0; l < spec.covariate_levels[k]; ++l) {
      VectorXd off(g);
      for (Index i = 0; i < g; ++i) off(i) = spec.covariate_scale * normal(rng);
      cov_offsets[k].push_back(std::move(off));
      level_names[k].push_back(spec.covariate_keys[k] + "_" + std::to_string(l));
    }
  }

  std::vector<std::string> perts;
  for (Index p = 0; p < spec.n_perturbations; ++p) {
    perts.push_back(padded("pert_", p, std::max(2, digits(spec.n_perturbations - 1))));
    truth.effects[perts.back()] = sparse_normal(g, spec.effect_sparsity, spec.effect_scale, rng);
  }

  std::vector<std::pair<Index, Index>> all_pairs;
  for (Index a = 0; a < spec.n_perturbations; ++a) {
    for (Index b = a + 1; b < spec.n_perturbations; ++b) all_pairs.emplace_back(a, b);
  }
  std::shuffle(all_pairs.begin(), all_pairs.end(), rng);
  all_pairs.resize(static_cast<std::size_t>(spec.n_combinations));
  std::sort(all_pairs.begin(), all_pairs.end());
  std::vector<std::vector<std::string>> combos;
  std::bernoulli_distribution interacts(spec.interaction_fraction);
  for (const auto& [a, b] : all_pairs) {
    combos.push_back({perts[static_cast<std::size_t>(a)], perts[static_cast<std::size_t>(b)]});
    if (interacts(rng)) {
      truth.interactions[combos.back()] = sparse_normal(g, spec.effect_sparsity, spec.interaction_scale, rng);
    }
  }

  // covariate assignments: cartesian product of levels, first key slowest
  std::vector<CovariateAssignment> assignments{{}};
  std::vector<VectorXd> assignment_base{gene_base};
  for (std::size_t k = 0; k < spec.covariate_levels.size(); ++k) {
    std::vector<CovariateAssignment> next;
    std::vector<VectorXd> next_base;
    for (std::size_t a = 0; a < assignments.size(); ++a) {
      for (std::size_t l = 0; l < level_names[k].size(); ++l) {
        auto covs = assignments[a];
        covs.push_back(level_names[k][l]);
        next.push_back(std::move(covs));
        next_base.push_back(assignment_base[a] + cov_offsets[k][l]);
      }
    }
    assignments = std::move(next);
    assignment_base = std::move(next_base);
  }

  std::vector<Condition> conditions;
  for (std::size_t a = 0; a < assignments.size(); ++a) {
    truth.base_log_rate[assignments[a]] = assignment_base[a];
    conditions.emplace_back(std::vector<std::string>{truth.control_value}, assignments[a]);
    for (const auto& p : perts) conditions.emplace_back(std::vector<std::string>{p}, assignments[a]);
    for (const auto& c : combos) conditions.emplace_back(c, assignments[a]);
  }

  SynthResult out;
  auto& d = out.dataset;
  d.meta.covariate_keys = spec.covariate_keys;
  d.meta.value_space = ValueSpace::Counts;
  d.gene_names = truth.genes;

  truth.expected.covariate_keys = spec.covariate_keys;
  truth.expected.genes = truth.genes;
  truth.expected.control_value = truth.control_value;

  std::vector<Eigen::Triplet<double, int>> trips;
  VectorXd counts(g);
  Index row = 0;
  const Index n_ctrl = spec.control_cells > 0 ? spec.control_cells : spec.cells_per_condition;
  for (std::size_t ci = 0; ci < conditions.size(); ++ci) {
    const auto& cond = conditions[ci];
    const VectorXd log_rate = truth.base_log_rate.at(cond.covariates) + truth.log_rate_effect(cond);
    const bool control = cond.is_control(truth.control_value);

    Rng cell_rng(derive_seed(spec.seed, {kCells, ci}));
    const Index n = control ? n_ctrl : spec.cells_per_condition;
    for (Index c = 0; c < n; ++c, ++row) {
      simulate_cell(log_rate, spec, cell_rng, counts);
      for (Index j = 0; j < g; ++j) {
        if (counts(j) != 0.0) trips.emplace_back(static_cast<int>(row), static_cast<int>(j), counts(j));
      }
      d.cell_ids.push_back(padded("cell_", row, 7));
      d.cells.push_back(cond);
    }

    Rng truth_rng(derive_seed(spec.seed, {kTruth, ci}));
    VectorXd sum = VectorXd::Zero(g);
    for (Index c = 0; c < spec.truth_cells; ++c) {
      simulate_cell(log_rate, spec, truth_rng, counts);
      lognorm_in_place(counts);
      sum += counts;
    }
    ConditionAggregate agg;
    agg.condition = cond;
    agg.n_cells = n;
    agg.mean = sum / static_cast<double>(spec.truth_cells);
    truth.expected.rows.push_back(std::move(agg));
  }
  d.counts.resize(row, g);
  d.counts.setFromTriplets(trips.begin(), trips.end());
  truth.expected = compute_logfc(std::move(truth.expected));
  validate(d);
  out.truth = std::move(truth);
  return out;
}

AggregateTable oracle_predict(OracleKind kind, const GroundTruth& truth, double jitter, Seed seed,
                              const std::vector<Condition>& conditions) {
  if (jitter < 0) throw Error(ErrorCode::Invalid, "jitter must be >= 0");
  const auto& expected = truth.expected;
  std::map<CovariateAssignment, VectorXd> control_mean;
  std::map<CovariateAssignment, std::pair<VectorXd, Index>> perturbed_sum;
  for (const auto& a : expected.rows) {
    if (expected.is_control(a)) {
      control_mean[a.condition.covariates] = a.mean;
    } else {
      auto [it, inserted] = perturbed_sum.try_emplace(a.condition.covariates, VectorXd::Zero(a.mean.size()), 0);
      it->second.first += a.mean;
      it->second.second += 1;
    }
  }

  std::vector<const ConditionAggregate*> targets;
  if (conditions.empty()) {
    for (const auto& a : expected.rows) targets.push_back(&a);
  } else {
    for (const auto& c : conditions) {
      const auto* a = expected.find(c);
      if (a == nullptr) throw Error(ErrorCode::UnknownName, "no ground truth for condition '" + c.label() + "'");
      targets.push_back(a);
    }
  }

  AggregateTable out;
  out.covariate_keys = expected.covariate_keys;
  out.genes = expected.genes;
  out.control_value = expected.control_value;
  out.delimiter = expected.delimiter;
  Rng rng(derive_seed(seed, {kOracle}));
  std::normal_distribution<double> noise(0.0, jitter);
  for (const auto* a : targets) {
    ConditionAggregate p;
    p.condition = a->condition;
    p.n_cells = a->n_cells;
    const auto& ctrl = control_mean.at(a->condition.covariates);
    if (expected.is_control(*a)) {
      p.mean = a->mean;
    } else if (kind == OracleKind::Collapsed) {
      const auto& [sum, n] = perturbed_sum.at(a->condition.covariates);
      p.mean = sum / static_cast<double>(n);
    } else {
      p.mean = a->mean;
    }
    if (kind != OracleKind::Perfect && jitter > 0 && !expected.is_control(*a)) {
      for (Index i = 0; i < p.mean.size(); ++i) p.mean(i) += noise(rng);
    }
    p.logfc = expected.is_control(*a) ? VectorXd::Zero(p.mean.size()) : VectorXd(p.mean - ctrl);
    out.rows.push_back(std::move(p));
  }
  return out;
}

void export_truth(const GroundTruth& truth, const std::filesystem::path& dir) {
  std::error_code ec;
  std::filesystem::create_directories(dir, ec);
  if (ec || !std::filesystem::is_directory(dir)) throw Error(ErrorCode::Io, "cannot create directory " + dir.string());
  write_aggregates(truth.expected, dir / "truth_means.tsv", dir / "truth_logfc.tsv");
  AggregateTable effects = truth.expected;
  for (auto& a : effects.rows) a.logfc = truth.log_rate_effect(a.condition);
  write_aggregate_file(effects, dir / "truth_effects.tsv", AggregateField::LogFc);
}

}  // namespace pbench
