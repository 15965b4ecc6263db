#pragma once

// Fit, rank, similarity and two-sample metrics. Vector and matrix routines are
// templated on the Eigen expression so they accept blocks, maps and columns
// without copies; the aggregate-level overloads at the bottom pick the mean
// or LogFC vectors out of condition aggregates.

#include <algorithm>
#include <cmath>
#include <numeric>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "pbench/error.hpp"
#include "pbench/preprocess.hpp"
#include "pbench/types.hpp"

namespace pbench {

enum class FitMetric { Rmse, Mae, Mse, R2, Pearson, Cosine };

std::string_view to_string(FitMetric kind) noexcept;
FitMetric parse_fit_metric(std::string_view token);

namespace detail {

template <typename DA, typename DB>
void check_pair(const Eigen::MatrixBase<DA>& a, const Eigen::MatrixBase<DB>& b, Index min_size) {
  if (a.size() != b.size()) throw Error(ErrorCode::Dimension, "metric inputs differ in length");
  if (a.size() < min_size) {
    throw Error(ErrorCode::Invalid, "metric needs at least " + std::to_string(min_size) + " entries");
  }
  if (!a.allFinite() || !b.allFinite()) throw Error(ErrorCode::NonFinite, "metric input is not finite");
}

}  // namespace detail

template <typename DA, typename DB>
typename DA::Scalar mse(const Eigen::MatrixBase<DA>& a, const Eigen::MatrixBase<DB>& b) {
  detail::check_pair(a, b, 1);
  return (a - b).squaredNorm() / static_cast<typename DA::Scalar>(a.size());
}

template <typename DA, typename DB>
typename DA::Scalar rmse(const Eigen::MatrixBase<DA>& a, const Eigen::MatrixBase<DB>& b) {
  return std::sqrt(mse(a, b));
}

template <typename DA, typename DB>
typename DA::Scalar mae(const Eigen::MatrixBase<DA>& a, const Eigen::MatrixBase<DB>& b) {
  detail::check_pair(a, b, 1);
  return (a - b).cwiseAbs().sum() / static_cast<typename DA::Scalar>(a.size());
}

/// dot(a, b) / (|a| |b|). Throws on a zero-norm input.
template <typename DA, typename DB>
typename DA::Scalar cosine(const Eigen::MatrixBase<DA>& a, const Eigen::MatrixBase<DB>& b) {
  detail::check_pair(a, b, 1);
  const auto na = a.norm();
  const auto nb = b.norm();
  if (na == 0 || nb == 0) throw Error(ErrorCode::Invalid, "cosine of a zero-norm vector");
  return a.dot(b) / (na * nb);
}

/// Sample correlation; invariant to shifting either vector.
template <typename DA, typename DB>
typename DA::Scalar pearson(const Eigen::MatrixBase<DA>& a, const Eigen::MatrixBase<DB>& b) {
  detail::check_pair(a, b, 2);
  using S = typename DA::Scalar;
  const auto n = static_cast<S>(a.size());
  const auto ca = (a.array() - a.sum() / n).matrix().eval();
  const auto cb = (b.array() - b.sum() / n).matrix().eval();
  const S sa = ca.norm();
  const S sb = cb.norm();
  if (sa == 0 || sb == 0) throw Error(ErrorCode::Invalid, "pearson of a zero-variance vector");
  return ca.dot(cb) / (sa * sb);
}

/// Coefficient of determination of prediction `a` against reference `b`.
template <typename DA, typename DB>
typename DA::Scalar r2(const Eigen::MatrixBase<DA>& a, const Eigen::MatrixBase<DB>& b) {
  detail::check_pair(a, b, 2);
  using S = typename DA::Scalar;
  const S ss_tot = (b.array() - b.mean()).square().sum();
  if (ss_tot == 0) throw Error(ErrorCode::Invalid, "r2 against a zero-variance reference");
  return S(1) - (a - b).squaredNorm() / ss_tot;
}

template <typename DA, typename DB>
typename DA::Scalar fit_metric(FitMetric kind, const Eigen::MatrixBase<DA>& a,
                               const Eigen::MatrixBase<DB>& b) {
  switch (kind) {
    case FitMetric::Rmse: return rmse(a, b);
    case FitMetric::Mae: return mae(a, b);
    case FitMetric::Mse: return mse(a, b);
    case FitMetric::R2: return r2(a, b);
    case FitMetric::Pearson: return pearson(a, b);
    case FitMetric::Cosine: return cosine(a, b);
  }
  throw Error(ErrorCode::Invalid, "unknown fit metric");
}

/// Model-selection objective: rmse + 0.1 * rank over RMSE.
inline double hpo_objective(double rmse_mean, double rmse_rank) {
  if (!std::isfinite(rmse_mean) || !std::isfinite(rmse_rank)) {
    throw Error(ErrorCode::NonFinite, "hpo objective input is not finite");
  }
  if (rmse_rank < 0.0 || rmse_rank > 1.0) throw Error(ErrorCode::Invalid, "rank must lie in [0, 1]");
  return rmse_mean + 0.1 * rmse_rank;
}

// ---------------------------------------------------------------------------
// Rank metrics

enum class RankDistance { RmseMean, CosineLfc };
enum class RankScope { Global, WithinCovariate };

std::string_view to_string(RankDistance kind) noexcept;
std::string_view to_string(RankScope scope) noexcept;
RankDistance parse_rank_distance(std::string_view token);
RankScope parse_rank_scope(std::string_view token);

struct RankResult {
  /// NaN for conditions in a group of size one.
  std::vector<double> per_condition;
  double average = 0.0;
};

template <typename DA, typename DB>
typename DA::Scalar rank_distance(RankDistance kind, const Eigen::MatrixBase<DA>& pred,
                                  const Eigen::MatrixBase<DB>& obs) {
  if (kind == RankDistance::RmseMean) return rmse(pred, obs);
  return typename DA::Scalar(1) - cosine(pred, obs);
}

/// Columns are conditions. Entry (j, i) = dist(pred_j, obs_i).
template <typename DP, typename DO>
Matrix<typename DP::Scalar> cross_distances(RankDistance kind, const Eigen::MatrixBase<DP>& pred,
                                            const Eigen::MatrixBase<DO>& obs) {
  if (pred.rows() != obs.rows() || pred.cols() != obs.cols()) {
    throw Error(ErrorCode::Dimension, "prediction and observation matrices differ in shape");
  }
  const Index p = pred.cols();
  Matrix<typename DP::Scalar> d(p, p);
  for (Index i = 0; i < p; ++i) {
    for (Index j = 0; j < p; ++j) d(j, i) = rank_distance(kind, pred.col(j), obs.col(i));
  }
  return d;
}

/// rank(i)   = #{j != i : dist(pred_j, obs_i) <= dist(pred_i, obs_i)} / (p - 1)
/// rank^T(i) = #{j != i : dist(pred_i, obs_j) <= dist(pred_i, obs_i)} / (p - 1)
/// with j restricted to the group of i. `groups` empty means one global
/// group. Groups of size one are skipped with a warning; the average is the
/// mean over groups of their mean rank (a single group reduces to the plain
/// mean over conditions).
template <typename DP, typename DO>
RankResult rank_metric(const Eigen::MatrixBase<DP>& pred, const Eigen::MatrixBase<DO>& obs,
                       RankDistance kind, bool transposed = false, std::span<const int> groups = {},
                       Warnings* warnings = nullptr) {
  const Index p = pred.cols();
  if (!groups.empty() && static_cast<Index>(groups.size()) != p) {
    throw Error(ErrorCode::Dimension, "group labels do not match the condition count");
  }
  const auto dist = cross_distances(kind, pred, obs);
  auto group_of = [&](Index i) { return groups.empty() ? 0 : groups[static_cast<std::size_t>(i)]; };

  std::vector<int> labels;
  for (Index i = 0; i < p; ++i) labels.push_back(group_of(i));
  std::vector<int> distinct = labels;
  std::sort(distinct.begin(), distinct.end());
  distinct.erase(std::unique(distinct.begin(), distinct.end()), distinct.end());

  RankResult out;
  out.per_condition.assign(static_cast<std::size_t>(p), std::nan(""));
  double group_sum = 0.0;
  int n_groups = 0;
  for (int g : distinct) {
    std::vector<Index> members;
    for (Index i = 0; i < p; ++i) {
      if (labels[static_cast<std::size_t>(i)] == g) members.push_back(i);
    }
    if (members.size() < 2) {
      warn(warnings, "rank group " + std::to_string(g) + " has a single condition; skipped");
      continue;
    }
    double sum = 0.0;
    for (Index i : members) {
      const auto own = dist(i, i);
      Index closer = 0;
      for (Index j : members) {
        if (j == i) continue;
        const auto other = transposed ? dist(i, j) : dist(j, i);
        if (other <= own) ++closer;
      }
      const double r = static_cast<double>(closer) / static_cast<double>(members.size() - 1);
      out.per_condition[static_cast<std::size_t>(i)] = r;
      sum += r;
    }
    group_sum += sum / static_cast<double>(members.size());
    ++n_groups;
  }
  if (n_groups == 0) throw Error(ErrorCode::Invalid, "rank metric needs a group with at least 2 conditions");
  out.average = group_sum / n_groups;
  return out;
}

// ---------------------------------------------------------------------------
// Similarity matrices

/// Pairwise cosine similarity of LogFC columns. Entries involving a zero-norm
/// column are NaN (missing).
template <typename D>
Matrix<typename D::Scalar> cosine_similarity_matrix(const Eigen::MatrixBase<D>& columns) {
  using S = typename D::Scalar;
  const Index p = columns.cols();
  Matrix<S> s(p, p);
  for (Index i = 0; i < p; ++i) {
    for (Index j = i; j < p; ++j) {
      const S ni = columns.col(i).norm();
      const S nj = columns.col(j).norm();
      const S v = (ni == 0 || nj == 0) ? std::numeric_limits<S>::quiet_NaN()
                                       : columns.col(i).dot(columns.col(j)) / (ni * nj);
      s(i, j) = v;
      s(j, i) = v;
    }
  }
  return s;
}

/// Frobenius norm of the entrywise difference, skipping entries missing in
/// either matrix.
template <typename DA, typename DB>
typename DA::Scalar matrix_distance(const Eigen::MatrixBase<DA>& a, const Eigen::MatrixBase<DB>& b) {
  if (a.rows() != b.rows() || a.cols() != b.cols()) {
    throw Error(ErrorCode::Dimension, "similarity matrices differ in shape");
  }
  typename DA::Scalar sum = 0;
  for (Index j = 0; j < a.cols(); ++j) {
    for (Index i = 0; i < a.rows(); ++i) {
      if (std::isnan(a(i, j)) || std::isnan(b(i, j))) continue;
      const auto d = a(i, j) - b(i, j);
      sum += d * d;
    }
  }
  return std::sqrt(sum);
}

struct SimilarityMatrix {
  std::vector<std::string> labels;
  MatrixXd values;
  Index missing_entries() const { return values.array().isNaN().count(); }
};

/// Must share the same ordered label list.
double matrix_distance(const SimilarityMatrix& a, const SimilarityMatrix& b);

// ---------------------------------------------------------------------------
// Two-sample distances over cell populations (rows = cells)

enum class DistributionalMetric { MmdRbf, Energy };

DistributionalMetric parse_distributional_metric(std::string_view token);

namespace detail {

template <typename DA, typename DB>
typename DA::Scalar row_distance(const Eigen::MatrixBase<DA>& a, Index i, const Eigen::MatrixBase<DB>& b,
                                 Index j) {
  return (a.row(i) - b.row(j)).norm();
}

}  // namespace detail

/// Median of all pairwise Euclidean distances among the pooled rows.
template <typename DA, typename DB>
typename DA::Scalar median_pooled_distance(const Eigen::MatrixBase<DA>& a, const Eigen::MatrixBase<DB>& b) {
  using S = typename DA::Scalar;
  Matrix<S> pooled(a.rows() + b.rows(), a.cols());
  pooled << a, b;
  std::vector<S> d;
  d.reserve(static_cast<std::size_t>(pooled.rows() * (pooled.rows() - 1) / 2));
  for (Index i = 0; i < pooled.rows(); ++i) {
    for (Index j = i + 1; j < pooled.rows(); ++j) d.push_back((pooled.row(i) - pooled.row(j)).norm());
  }
  if (d.empty()) return S(0);
  const auto mid = d.begin() + static_cast<std::ptrdiff_t>(d.size() / 2);
  std::nth_element(d.begin(), mid, d.end());
  if (d.size() % 2 == 1) return *mid;
  const S upper = *mid;
  const S lower = *std::max_element(d.begin(), mid);
  return (lower + upper) / 2;
}

/// Unbiased squared MMD with k(x, y) = exp(-|x - y|^2 / (2 h^2)), h the
/// median pooled distance; clamped at zero.
template <typename DA, typename DB>
typename DA::Scalar mmd_rbf(const Eigen::MatrixBase<DA>& a, const Eigen::MatrixBase<DB>& b) {
  using S = typename DA::Scalar;
  if (a.cols() != b.cols()) throw Error(ErrorCode::Dimension, "samples differ in gene dimension");
  if (a.rows() < 2 || b.rows() < 2) throw Error(ErrorCode::Invalid, "mmd needs at least 2 cells per sample");
  const S h = median_pooled_distance(a, b);
  const S denom = h > 0 ? S(2) * h * h : S(1);
  auto k = [&](const auto& x, Index i, const auto& y, Index j) {
    const S d = detail::row_distance(x, i, y, j);
    return std::exp(-d * d / denom);
  };
  const Index n = a.rows();
  const Index m = b.rows();
  S kaa = 0, kbb = 0, kab = 0;
  for (Index i = 0; i < n; ++i) {
    for (Index j = 0; j < n; ++j) {
      if (i != j) kaa += k(a, i, a, j);
    }
  }
  for (Index i = 0; i < m; ++i) {
    for (Index j = 0; j < m; ++j) {
      if (i != j) kbb += k(b, i, b, j);
    }
  }
  for (Index i = 0; i < n; ++i) {
    for (Index j = 0; j < m; ++j) kab += k(a, i, b, j);
  }
  const S value = kaa / S(n * (n - 1)) + kbb / S(m * (m - 1)) - S(2) * kab / S(n * m);
  return std::max(value, S(0));
}

/// 2 E|a - b| - E|a - a'| - E|b - b'| with unbiased within-sample terms,
/// clamped at zero.
template <typename DA, typename DB>
typename DA::Scalar energy_distance(const Eigen::MatrixBase<DA>& a, const Eigen::MatrixBase<DB>& b) {
  using S = typename DA::Scalar;
  if (a.cols() != b.cols()) throw Error(ErrorCode::Dimension, "samples differ in gene dimension");
  if (a.rows() < 2 || b.rows() < 2) {
    throw Error(ErrorCode::Invalid, "energy distance needs at least 2 cells per sample");
  }
  const Index n = a.rows();
  const Index m = b.rows();
  S daa = 0, dbb = 0, dab = 0;
  for (Index i = 0; i < n; ++i) {
    for (Index j = i + 1; j < n; ++j) daa += detail::row_distance(a, i, a, j);
  }
  for (Index i = 0; i < m; ++i) {
    for (Index j = i + 1; j < m; ++j) dbb += detail::row_distance(b, i, b, j);
  }
  for (Index i = 0; i < n; ++i) {
    for (Index j = 0; j < m; ++j) dab += detail::row_distance(a, i, b, j);
  }
  const S value = S(2) * dab / S(n * m) - S(2) * daa / S(n * (n - 1)) - S(2) * dbb / S(m * (m - 1));
  return std::max(value, S(0));
}

template <typename DA, typename DB>
typename DA::Scalar distributional_metric(DistributionalMetric kind, const Eigen::MatrixBase<DA>& a,
                                          const Eigen::MatrixBase<DB>& b) {
  return kind == DistributionalMetric::MmdRbf ? mmd_rbf(a, b) : energy_distance(a, b);
}

// ---------------------------------------------------------------------------
// Aggregate-level entry points

/// Stacks mean (RmseMean) or LogFC (CosineLfc) vectors as columns.
MatrixXd stack_columns(std::span<const ConditionAggregate> aggs, RankDistance kind);

/// Group ids per aggregate by covariate assignment; empty for Global scope.
std::vector<int> covariate_groups(std::span<const ConditionAggregate> aggs, RankScope scope);

/// `preds[i]` and `obs[i]` must describe the same condition.
RankResult rank_metric(std::span<const ConditionAggregate> preds, std::span<const ConditionAggregate> obs,
                       RankDistance kind, RankScope scope, Warnings* warnings = nullptr);
RankResult transposed_rank_metric(std::span<const ConditionAggregate> preds,
                                  std::span<const ConditionAggregate> obs, RankDistance kind,
                                  RankScope scope, Warnings* warnings = nullptr);

SimilarityMatrix similarity_matrix(std::span<const ConditionAggregate> aggs, std::string_view delimiter = "+");

}  // namespace pbench
