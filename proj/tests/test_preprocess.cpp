#include "pbench/preprocess.hpp"

#include <cmath>

#include "gtest_support.hpp"
#include "support.hpp"

using namespace pbench;
using pbtest::make_dataset;

namespace {

PerturbationDataset lognorm_fixture() {
  // gene 0 separates drugX from control, gene 1 is noisy everywhere, gene 2
  // is constant
  MatrixXd m(8, 3);
  m << 0.0, 1.0, 2.0,  //
      0.1, 3.0, 2.0,   //
      0.2, 0.0, 2.0,   //
      0.1, 2.0, 2.0,   //
      3.0, 0.5, 2.0,   //
      3.2, 2.5, 2.0,   //
      2.9, 1.0, 2.0,   //
      3.1, 2.0, 2.0;
  std::vector<pbtest::CellLabel> labels;
  for (int i = 0; i < 4; ++i) labels.push_back({{"control"}, {"A"}});
  for (int i = 0; i < 4; ++i) labels.push_back({{"drugX"}, {"A"}});
  auto d = make_dataset(m, labels);
  d.meta.value_space = ValueSpace::LogNorm;
  return d;
}

}  // namespace

TEST(LogNormalize, MatchesHandComputation) {
  MatrixXd m(2, 3);
  m << 1, 0, 3,  //
      0, 5, 0;
  const auto out = log_normalize(make_dataset(m, {{{"control"}, {"A"}}, {{"control"}, {"A"}}}));
  const MatrixXd x(out.counts);
  EXPECT_DOUBLE_EQ(x(0, 0), std::log1p(2500.0));
  EXPECT_DOUBLE_EQ(x(0, 2), std::log1p(7500.0));
  EXPECT_EQ(x(0, 1), 0.0);
  EXPECT_DOUBLE_EQ(x(1, 1), std::log1p(1e4));
  EXPECT_EQ(out.meta.value_space, ValueSpace::LogNorm);
  EXPECT_ERROR_CODE(log_normalize(out), ErrorCode::Invalid);
}

TEST(LogNormalize, ZeroTotalCellIsAnError) {
  MatrixXd m = MatrixXd::Zero(1, 2);
  EXPECT_ERROR_CODE(log_normalize(make_dataset(m, {{{"control"}, {"A"}}})), ErrorCode::Invalid);
}

TEST(WelchT, MatchesDirectFormula) {
  const auto d = lognorm_fixture();
  const std::vector<Index> a = {4, 5, 6, 7}, b = {0, 1, 2, 3};
  const auto t = welch_t(d, a, b);
  // gene 0 by hand
  const double ma = (3.0 + 3.2 + 2.9 + 3.1) / 4, mb = (0.0 + 0.1 + 0.2 + 0.1) / 4;
  double va = 0, vb = 0;
  for (double x : {3.0, 3.2, 2.9, 3.1}) va += (x - ma) * (x - ma) / 3;
  for (double x : {0.0, 0.1, 0.2, 0.1}) vb += (x - mb) * (x - mb) / 3;
  EXPECT_NEAR(t(0), (ma - mb) / std::sqrt(va / 4 + vb / 4), 1e-10 * std::abs(t(0)));
  EXPECT_EQ(t(2), 0.0);
}

TEST(SelectGenes, UnionOfVarianceAndDe) {
  const auto d = lognorm_fixture();
  GeneSelectionOptions opt;
  opt.n_hvg = 1;
  opt.n_de_per_condition = 0;
  // highest overall variance is gene 0 (bimodal)
  EXPECT_EQ(select_genes(d, opt).genes, (std::vector<std::string>{"g0"}));
  opt.n_hvg = 0;
  opt.n_de_per_condition = 1;
  EXPECT_EQ(select_genes(d, opt).genes, (std::vector<std::string>{"g0"}));
  opt.n_de_per_condition = 2;
  EXPECT_EQ(select_genes(d, opt).genes, (std::vector<std::string>{"g0", "g1"}));
  opt.n_hvg = 4;
  EXPECT_ERROR_CODE(select_genes(d, opt), ErrorCode::Invalid);
}

TEST(SelectGenes, KeepsPerturbedGenes) {
  auto d = lognorm_fixture();
  d.gene_names[2] = "drugX";
  GeneSelectionOptions opt;
  opt.n_hvg = 0;
  opt.n_de_per_condition = 0;
  opt.include_perturbed_genes = true;
  EXPECT_EQ(select_genes(d, opt).genes, (std::vector<std::string>{"drugX"}));
}

TEST(SelectGenes, WarnsWhenDeIsImpossible) {
  auto d = lognorm_fixture();
  for (int i = 5; i < 8; ++i) d.cells[static_cast<std::size_t>(i)] = Condition({"drugY"}, {"A"});
  GeneSelectionOptions opt;
  opt.n_hvg = 0;
  Warnings w;
  select_genes(d, opt, &w);
  ASSERT_EQ(w.size(), 1u);
  EXPECT_NE(w[0].find("drugX"), std::string::npos);
}

TEST(Aggregates, MeansAndLogFc) {
  const auto d = lognorm_fixture();
  const auto t = compute_logfc(aggregate_means(d, 1));
  ASSERT_EQ(t.rows.size(), 2u);
  const auto* x = t.find(Condition({"drugX"}, {"A"}));
  ASSERT_NE(x, nullptr);
  EXPECT_EQ(x->n_cells, 4);
  EXPECT_NEAR(x->mean(0), 3.05, 1e-12);
  EXPECT_NEAR(x->logfc(0), 3.05 - 0.1, 1e-12);
  EXPECT_EQ(t.find(Condition({"control"}, {"A"}))->logfc, VectorXd::Zero(3));
}

TEST(Aggregates, MinCellsDropsWithWarning) {
  auto d = lognorm_fixture();
  d.cells[7] = Condition({"drugY"}, {"A"});
  Warnings w;
  const auto t = aggregate_means(d, 2, std::nullopt, &w);
  EXPECT_EQ(t.rows.size(), 2u);
  EXPECT_EQ(w.size(), 1u);
}

TEST(Aggregates, LogFcNeedsControls) {
  auto d = lognorm_fixture();
  for (int i = 0; i < 4; ++i) d.cells[static_cast<std::size_t>(i)] = Condition({"drugY"}, {"A"});
  EXPECT_ERROR_CODE(compute_logfc(aggregate_means(d, 1)), ErrorCode::MissingControl);
}

TEST(Aggregates, FileRoundTrip) {
  pbtest::TempDir tmp;
  const auto t = compute_logfc(aggregate_means(lognorm_fixture(), 1));
  write_aggregates(t, tmp.path / "m.tsv", tmp.path / "l.tsv");
  const auto back = read_aggregates(tmp.path / "m.tsv", tmp.path / "l.tsv");
  ASSERT_EQ(back.rows.size(), t.rows.size());
  EXPECT_EQ(back.genes, t.genes);
  for (std::size_t i = 0; i < t.rows.size(); ++i) {
    EXPECT_EQ(back.rows[i].condition, t.rows[i].condition);
    EXPECT_EQ(back.rows[i].mean, t.rows[i].mean);
    EXPECT_EQ(back.rows[i].logfc, t.rows[i].logfc);
    EXPECT_EQ(back.rows[i].n_cells, t.rows[i].n_cells);
  }
  const auto no_lfc = read_aggregates(tmp.path / "m.tsv", std::nullopt);
  EXPECT_EQ(no_lfc.rows[0].logfc.size(), 0);
}
