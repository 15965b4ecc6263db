#pragma once

// Oracles and fixtures shared by the unit tests and the acceptance suite.
// Everything here is written independently of the library code it checks.

#include <unistd.h>

#include <cmath>
#include <filesystem>
#include <map>
#include <set>
#include <string>
#include <vector>

#include "pbench/baselines.hpp"
#include "pbench/dataset.hpp"
#include "pbench/splitter.hpp"
#include "pbench/synthgen.hpp"

namespace pbtest {

using namespace pbench;

// ---------------------------------------------------------------------------
// Fixtures

struct CellLabel {
  std::vector<std::string> perturbations;
  CovariateAssignment covariates;
};

/// Dataset from a dense cells x genes matrix; cell ids c0.., genes g0...
inline PerturbationDataset make_dataset(const MatrixXd& dense, const std::vector<CellLabel>& labels,
                                        std::vector<std::string> keys = {"cell_type"}) {
  PerturbationDataset d;
  d.counts = dense.sparseView();
  d.meta.covariate_keys = std::move(keys);
  for (std::size_t i = 0; i < labels.size(); ++i) {
    d.cell_ids.push_back("c" + std::to_string(i));
    d.cells.emplace_back(labels[i].perturbations, labels[i].covariates);
  }
  for (Index g = 0; g < dense.cols(); ++g) d.gene_names.push_back("g" + std::to_string(g));
  return d;
}

/// Per-test scratch directory under the system temp dir, removed on exit.
struct TempDir {
  std::filesystem::path path;
  TempDir() {
    static int counter = 0;
    path = std::filesystem::temp_directory_path() /
           ("pbench_test_" + std::to_string(::getpid()) + "_" + std::to_string(counter++));
    std::filesystem::remove_all(path);
    std::filesystem::create_directories(path);
  }
  ~TempDir() {
    std::error_code ec;
    std::filesystem::remove_all(path, ec);
  }
  TempDir(const TempDir&) = delete;
  TempDir& operator=(const TempDir&) = delete;
};

// ---------------------------------------------------------------------------
// Rank oracle: plain loops over std::vector columns.

using Columns = std::vector<std::vector<double>>;

inline double oracle_rmse(const std::vector<double>& a, const std::vector<double>& b) {
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) s += (a[i] - b[i]) * (a[i] - b[i]);
  return std::sqrt(s / static_cast<double>(a.size()));
}

inline double oracle_cosine_distance(const std::vector<double>& a, const std::vector<double>& b) {
  double ab = 0.0, aa = 0.0, bb = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    ab += a[i] * b[i];
    aa += a[i] * a[i];
    bb += b[i] * b[i];
  }
  return 1.0 - ab / (std::sqrt(aa) * std::sqrt(bb));
}

/// rank (or transposed rank) of every condition, counting ties as closer.
inline std::vector<double> oracle_ranks(const Columns& pred, const Columns& obs, bool cosine, bool transposed) {
  auto dist = [&](std::size_t pi, std::size_t oi) {
    return cosine ? oracle_cosine_distance(pred[pi], obs[oi]) : oracle_rmse(pred[pi], obs[oi]);
  };
  const std::size_t p = pred.size();
  std::vector<double> out(p);
  for (std::size_t i = 0; i < p; ++i) {
    const double own = dist(i, i);
    int closer = 0;
    for (std::size_t j = 0; j < p; ++j) {
      if (j == i) continue;
      const double other = transposed ? dist(i, j) : dist(j, i);
      if (other <= own) ++closer;
    }
    out[i] = static_cast<double>(closer) / static_cast<double>(p - 1);
  }
  return out;
}

inline MatrixXd to_matrix(const Columns& cols) {
  MatrixXd m(static_cast<Index>(cols.front().size()), static_cast<Index>(cols.size()));
  for (std::size_t j = 0; j < cols.size(); ++j) {
    for (std::size_t i = 0; i < cols[j].size(); ++i) m(static_cast<Index>(i), static_cast<Index>(j)) = cols[j][i];
  }
  return m;
}

// ---------------------------------------------------------------------------
// Finite-difference gradient check

struct GradientError {
  std::string tensor;
  double relative = 0.0;
};

/// Per-tensor |analytic - numeric| / (|analytic| + |numeric|) for
/// the MSE loss of `model` on one batch, central differences with step h.
inline std::vector<GradientError> gradient_check(BaselineModel& model, const Batch& batch, const MatrixXd& target,
                                                 double h = 1e-6) {
  auto loss_at = [&] { return mse_loss(model.forward(batch, false, nullptr), target, nullptr); };
  model.params().zero_grad();
  MatrixXd grad;
  mse_loss(model.forward(batch, false, nullptr), target, &grad);
  model.backward(grad);
  std::vector<GradientError> out;
  for (auto& p : model.params()) {
    MatrixXd numeric(p.value.rows(), p.value.cols());
    for (Index k = 0; k < p.value.size(); ++k) {
      const double keep = p.value.data()[k];
      p.value.data()[k] = keep + h;
      const double up = loss_at();
      p.value.data()[k] = keep - h;
      const double down = loss_at();
      p.value.data()[k] = keep;
      numeric.data()[k] = (up - down) / (2.0 * h);
    }
    // tensors with no gradient at all (masked, dead units) compare at FD noise level
    const double scale = p.grad.norm() + numeric.norm();
    out.push_back({p.name, scale < 1e-9 ? 0.0 : (p.grad - numeric).norm() / scale});
  }
  return out;
}

// ---------------------------------------------------------------------------
// Closed-form linear oracle

/// Ridge solution of (x - mean matched control) ~ W [p; cov] + b over the
/// training cells, i.e. the linear model's optimum in expectation over
/// control pairings. Returns genes x (n_pert + n_cov + 1), intercept last.
inline MatrixXd ridge_linear_oracle(const PerturbationDataset& d, const SplitAssignment& split,
                                    const OneHotVocab& vocab, double lambda = 1e-8) {
  const auto rows = split.rows(SplitLabel::Train);
  std::map<CovariateAssignment, std::pair<VectorXd, double>> ctrl;
  for (Index r : rows) {
    if (!d.is_control(r)) continue;
    auto& [sum, n] = ctrl.try_emplace(d.cells[static_cast<std::size_t>(r)].covariates,
                                      VectorXd::Zero(d.n_genes()), 0.0).first->second;
    sum += d.cell_vector(r);
    n += 1.0;
  }
  const Index k = vocab.dimension() + 1;
  MatrixXd xtx = MatrixXd::Zero(k, k);
  MatrixXd ytx = MatrixXd::Zero(d.n_genes(), k);
  for (Index r : rows) {
    const auto& c = d.cells[static_cast<std::size_t>(r)];
    VectorXd x(k);
    x << vocab.encode(c), 1.0;
    const auto& [sum, n] = ctrl.at(c.covariates);
    const VectorXd y = d.cell_vector(r) - sum / n;
    xtx += x * x.transpose();
    ytx += y * x.transpose();
  }
  xtx += lambda * MatrixXd::Identity(k, k);
  return xtx.ldlt().solve(ytx.transpose()).transpose();
}

// ---------------------------------------------------------------------------
// Split invariants

struct SplitCheck {
  bool ok = true;
  std::string failure;
  void fail(const std::string& m) {
    if (ok) failure = m;
    ok = false;
  }
};

/// Partition, condition integrity, controls in train, and the kind-specific
/// coverage rules.
inline SplitCheck check_split(const PerturbationDataset& d, const SplitAssignment& s, SplitKind kind,
                              const std::string& key, int min_per_level) {
  SplitCheck out;
  if (s.labels.size() != static_cast<std::size_t>(d.n_cells()) || s.cell_ids != d.cell_ids) {
    out.fail("labels do not cover every cell exactly once");
    return out;
  }
  if (s.count(SplitLabel::Train) + s.count(SplitLabel::Val) + s.count(SplitLabel::Test) != d.n_cells()) {
    out.fail("label counts do not add up");
  }
  std::map<Condition, SplitLabel> label_of;
  for (Index r = 0; r < d.n_cells(); ++r) {
    const auto& c = d.cells[static_cast<std::size_t>(r)];
    const auto l = s.labels[static_cast<std::size_t>(r)];
    const auto [it, inserted] = label_of.emplace(c, l);
    if (!inserted && it->second != l) out.fail("condition " + c.label() + " spans several splits");
    if (d.is_control(r) && l != SplitLabel::Train) out.fail("control cell outside train");
  }
  std::set<Condition> train;
  for (const auto& [c, l] : label_of) {
    if (l == SplitLabel::Train) train.insert(c);
  }
  std::size_t key_index = 0;
  for (std::size_t k = 0; k < d.meta.covariate_keys.size(); ++k) {
    if (d.meta.covariate_keys[k] == key) key_index = k;
  }
  for (const auto& [c, l] : label_of) {
    if (l == SplitLabel::Train || c.is_control(d.meta.control_value)) continue;
    if (kind == SplitKind::CovariateTransfer) {
      // seen in training under a different level of the split key
      bool seen = false;
      for (const auto& t : train) {
        if (t.perturbations == c.perturbations && t.covariates[key_index] != c.covariates[key_index]) seen = true;
      }
      if (!seen) out.fail("held-out " + c.label() + " never trained under another level");
    } else {
      if (!c.is_combination()) out.fail("combo split held out singleton " + c.label());
      for (const auto& p : c.perturbations) {
        if (!train.count(Condition({p}, c.covariates))) out.fail("constituent of " + c.label() + " not in train");
      }
    }
  }
  if (kind != SplitKind::CovariateTransfer) {
    for (const auto& [c, l] : label_of) {
      if (!c.is_combination() && l != SplitLabel::Train) out.fail("singleton " + c.label() + " outside train");
    }
  } else {
    std::map<std::string, std::set<std::vector<std::string>>> per_level;
    for (const auto& t : train) {
      if (!t.is_control(d.meta.control_value)) per_level[t.covariates[key_index]].insert(t.perturbations);
    }
    for (const auto& [level, perts] : per_level) {
      if (static_cast<int>(perts.size()) < min_per_level) out.fail("level " + level + " below the training minimum");
    }
  }
  return out;
}

}  // namespace pbtest
