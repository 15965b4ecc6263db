#include "pbench/dataset.hpp"

#include "gtest_support.hpp"
#include "pbench/text_io.hpp"
#include "support.hpp"

using namespace pbench;
using pbtest::make_dataset;

namespace {

PerturbationDataset small() {
  MatrixXd m(5, 3);
  m << 1, 0, 2,  //
      0, 3, 0,   //
      4, 0, 0,   //
      0, 0, 5,   //
      1, 1, 1;
  return make_dataset(m, {{{"control"}, {"A"}},
                          {{"drugX"}, {"A"}},
                          {{"drugY", "drugX"}, {"A"}},
                          {{"control"}, {"B"}},
                          {{"drugX"}, {"B"}}});
}

}  // namespace

TEST(Condition, SortsPerturbationsAndLabels) {
  const Condition c({"b", "a", "b"}, {"K562"});
  EXPECT_EQ(c.perturbations, (std::vector<std::string>{"a", "b"}));
  EXPECT_TRUE(c.is_combination());
  EXPECT_EQ(c.label(), "a+b|K562");
  EXPECT_EQ(c, Condition({"a", "b"}, {"K562"}));
  EXPECT_TRUE(Condition({"control"}, {"x"}).is_control("control"));
  EXPECT_FALSE(c.is_control("control"));
}

TEST(Dataset, SaveLoadRoundTrip) {
  pbtest::TempDir tmp;
  const auto d = small();
  save_dataset(d, tmp.path / "ds");
  const auto back = load_dataset(tmp.path / "ds");
  EXPECT_EQ(back.cell_ids, d.cell_ids);
  EXPECT_EQ(back.cells, d.cells);
  EXPECT_EQ(back.gene_names, d.gene_names);
  EXPECT_EQ(back.meta.covariate_keys, d.meta.covariate_keys);
  EXPECT_EQ(MatrixXd(back.counts), MatrixXd(d.counts));
}

TEST(Dataset, LoadRejectsBadFiles) {
  pbtest::TempDir tmp;
  const auto dir = tmp.path / "ds";
  save_dataset(small(), dir);
  EXPECT_ERROR_CODE(load_dataset(tmp.path / "nope"), ErrorCode::Io);

  text::write_file(dir / "matrix.mtx", "%%MatrixMarket matrix array real general\n5 3\n");
  EXPECT_ERROR_CODE(load_dataset(dir), ErrorCode::Format);

  text::write_file(dir / "matrix.mtx", "%%MatrixMarket matrix coordinate real general\n5 3 1\n9 1 1\n");
  EXPECT_ERROR_CODE(load_dataset(dir), ErrorCode::Dimension);

  text::write_file(dir / "matrix.mtx", "%%MatrixMarket matrix coordinate real general\n5 3 1\n1 1 -2\n");
  EXPECT_ERROR_CODE(load_dataset(dir), ErrorCode::Invalid);

  save_dataset(small(), dir);
  text::write_file(dir / "meta.tsv", "control_value\tcontrol\ncovariate_keys\tdonor\n");
  EXPECT_ERROR_CODE(load_dataset(dir), ErrorCode::UnknownName);
}

TEST(Dataset, ValidateCatchesInconsistencies) {
  auto d = small();
  d.cell_ids[1] = d.cell_ids[0];
  EXPECT_ERROR_CODE(validate(d), ErrorCode::Invalid);

  d = small();
  d.cells.pop_back();
  EXPECT_ERROR_CODE(validate(d), ErrorCode::Dimension);

  d = small();
  d.cells[1] = Condition({"control", "drugX"}, {"A"});
  EXPECT_ERROR_CODE(validate(d), ErrorCode::Invalid);

  d = small();
  d.counts.coeffRef(0, 0) = std::nan("");
  EXPECT_ERROR_CODE(validate(d), ErrorCode::NonFinite);
}

TEST(Dataset, SubsetsKeepAlignment) {
  const auto d = small();
  const std::vector<Index> rows = {4, 1};
  const auto s = subset_cells(d, rows);
  EXPECT_EQ(s.cell_ids, (std::vector<std::string>{"c4", "c1"}));
  EXPECT_EQ(s.cell_vector(1), d.cell_vector(1));
  const std::vector<Index> cols = {2, 0};
  const auto g = subset_genes(d, cols);
  EXPECT_EQ(g.gene_names, (std::vector<std::string>{"g2", "g0"}));
  EXPECT_DOUBLE_EQ(g.cell_vector(0)(0), 2.0);
  EXPECT_DOUBLE_EQ(g.cell_vector(0)(1), 1.0);
}

TEST(Dataset, DistinctConditionsInRowOrder) {
  const auto conds = small().distinct_conditions();
  ASSERT_EQ(conds.size(), 5u);
  EXPECT_EQ(conds[2], Condition({"drugX", "drugY"}, {"A"}));
}

TEST(ControlMatching, IndexAndSampling) {
  const auto d = small();
  const auto idx = build_control_index(d);
  EXPECT_EQ(idx.at({"A"}), (std::vector<Index>{0}));
  EXPECT_ERROR_CODE(idx.at({"C"}), ErrorCode::UnknownName);
  const auto a = sample_matched_controls(idx, {"B"}, 10, 3);
  EXPECT_EQ(a, sample_matched_controls(idx, {"B"}, 10, 3));
  for (Index r : a) EXPECT_EQ(r, 3);
  EXPECT_ERROR_CODE(sample_matched_controls(idx, {"B"}, 0, 3), ErrorCode::Invalid);
}

TEST(ControlMatching, MissingControlIsAnError) {
  auto d = small();
  d.cells[3] = Condition({"drugY"}, {"B"});
  EXPECT_ERROR_CODE(build_control_index(d), ErrorCode::MissingControl);
}

TEST(ControlMatching, CounterfactualRequests) {
  const auto d = small();
  const auto idx = build_control_index(d);
  const std::vector<Condition> targets = {Condition({"drugX"}, {"B"}), Condition({"drugY"}, {"B"})};
  const auto reqs = build_counterfactual_requests(d, idx, targets, &d);
  ASSERT_EQ(reqs.size(), 2u);
  EXPECT_EQ(reqs[0].control_rows, (std::vector<Index>{3}));
  EXPECT_EQ(reqs[0].reference_rows, (std::vector<Index>{4}));
  EXPECT_TRUE(reqs[1].empty_reference);
}
