#include "pbench/metrics.hpp"

#include <map>

namespace pbench {

std::string_view to_string(FitMetric kind) noexcept {
  switch (kind) {
    case FitMetric::Rmse: return "rmse";
    case FitMetric::Mae: return "mae";
    case FitMetric::Mse: return "mse";
    case FitMetric::R2: return "r2";
    case FitMetric::Pearson: return "pearson";
    case FitMetric::Cosine: return "cosine";
  }
  return "?";
}

FitMetric parse_fit_metric(std::string_view token) {
  for (auto k : {FitMetric::Rmse, FitMetric::Mae, FitMetric::Mse, FitMetric::R2, FitMetric::Pearson,
                 FitMetric::Cosine}) {
    if (to_string(k) == token) return k;
  }
  throw Error(ErrorCode::Config, "unknown fit metric '" + std::string(token) + "'");
}

std::string_view to_string(RankDistance kind) noexcept {
  return kind == RankDistance::RmseMean ? "rmse_mean" : "cosine_lfc";
}

std::string_view to_string(RankScope scope) noexcept {
  return scope == RankScope::Global ? "global" : "within_covariate";
}

RankDistance parse_rank_distance(std::string_view token) {
  if (token == "rmse_mean") return RankDistance::RmseMean;
  if (token == "cosine_lfc") return RankDistance::CosineLfc;
  throw Error(ErrorCode::Config, "unknown rank distance '" + std::string(token) + "'");
}

RankScope parse_rank_scope(std::string_view token) {
  if (token == "global") return RankScope::Global;
  if (token == "within_covariate") return RankScope::WithinCovariate;
  throw Error(ErrorCode::Config, "unknown rank scope '" + std::string(token) + "'");
}

DistributionalMetric parse_distributional_metric(std::string_view token) {
  if (token == "mmd_rbf") return DistributionalMetric::MmdRbf;
  if (token == "energy") return DistributionalMetric::Energy;
  throw Error(ErrorCode::Config, "unknown distributional metric '" + std::string(token) + "'");
}

double matrix_distance(const SimilarityMatrix& a, const SimilarityMatrix& b) {
  if (a.labels != b.labels) throw Error(ErrorCode::Dimension, "similarity matrices have different condition order");
  return matrix_distance(a.values, b.values);
}

MatrixXd stack_columns(std::span<const ConditionAggregate> aggs, RankDistance kind) {
  if (aggs.empty()) return {};
  const Index g = kind == RankDistance::RmseMean ? aggs.front().mean.size() : aggs.front().logfc.size();
  MatrixXd m(g, static_cast<Index>(aggs.size()));
  for (std::size_t i = 0; i < aggs.size(); ++i) {
    const VectorXd& v = kind == RankDistance::RmseMean ? aggs[i].mean : aggs[i].logfc;
    if (v.size() != g) {
      throw Error(ErrorCode::Dimension, "aggregate '" + aggs[i].condition.label() + "' lacks a " +
                                            std::string(kind == RankDistance::RmseMean ? "mean" : "logfc") +
                                            " vector of length " + std::to_string(g));
    }
    m.col(static_cast<Index>(i)) = v;
  }
  return m;
}

std::vector<int> covariate_groups(std::span<const ConditionAggregate> aggs, RankScope scope) {
  if (scope == RankScope::Global) return {};
  std::map<CovariateAssignment, int> ids;
  std::vector<int> out;
  for (const auto& a : aggs) {
    const auto [it, inserted] = ids.try_emplace(a.condition.covariates, static_cast<int>(ids.size()));
    out.push_back(it->second);
  }
  return out;
}

namespace {

RankResult aggregate_rank(std::span<const ConditionAggregate> preds, std::span<const ConditionAggregate> obs,
                          RankDistance kind, RankScope scope, bool transposed, Warnings* warnings) {
  if (preds.size() != obs.size()) throw Error(ErrorCode::Dimension, "prediction and observation lists differ in length");
  for (std::size_t i = 0; i < preds.size(); ++i) {
    if (!(preds[i].condition == obs[i].condition)) {
      throw Error(ErrorCode::Invalid, "condition lists are not aligned at position " + std::to_string(i));
    }
  }
  const auto groups = covariate_groups(obs, scope);
  return rank_metric(stack_columns(preds, kind), stack_columns(obs, kind), kind, transposed, groups, warnings);
}

}  // namespace

RankResult rank_metric(std::span<const ConditionAggregate> preds, std::span<const ConditionAggregate> obs,
                       RankDistance kind, RankScope scope, Warnings* warnings) {
  return aggregate_rank(preds, obs, kind, scope, false, warnings);
}

RankResult transposed_rank_metric(std::span<const ConditionAggregate> preds,
                                  std::span<const ConditionAggregate> obs, RankDistance kind,
                                  RankScope scope, Warnings* warnings) {
  return aggregate_rank(preds, obs, kind, scope, true, warnings);
}

SimilarityMatrix similarity_matrix(std::span<const ConditionAggregate> aggs, std::string_view delimiter) {
  if (aggs.size() < 2) throw Error(ErrorCode::Invalid, "similarity matrix needs at least 2 conditions");
  SimilarityMatrix s;
  for (const auto& a : aggs) s.labels.push_back(a.condition.label(delimiter));
  s.values = cosine_similarity_matrix(stack_columns(aggs, RankDistance::CosineLfc));
  return s;
}

}  // namespace pbench
