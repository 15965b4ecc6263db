#include "pbench/splitter.hpp"

#include <cmath>
#include <set>

#include "gtest_support.hpp"
#include "pbench/synthgen.hpp"
#include "pbench/text_io.hpp"
#include "support.hpp"

using namespace pbench;

namespace {

PerturbationDataset synth(Index perts, Index levels, Index combos = 0, Seed seed = 1) {
  SynthSpec s;
  s.n_genes = 10;
  s.n_perturbations = perts;
  s.covariate_levels = {levels};
  s.cells_per_condition = 2;
  s.effect_sparsity = 2;
  s.n_combinations = combos;
  s.truth_cells = 2;
  s.seed = seed;
  return generate(s).dataset;
}

std::set<Condition> conditions_with(const PerturbationDataset& d, const SplitAssignment& s, SplitLabel l) {
  std::set<Condition> out;
  for (Index r : s.rows(l)) out.insert(d.cells[static_cast<std::size_t>(r)]);
  return out;
}

}  // namespace

TEST(CovariateTransfer, HoldsOutOneLevelFraction) {
  const auto d = synth(10, 3);
  SplitSpec spec;
  spec.heldout_fraction = 0.3;
  spec.min_perturbations_per_level = 5;
  spec.seed = 4;
  const auto s = split_covariate_transfer(d, spec);
  const auto check = pbtest::check_split(d, s, SplitKind::CovariateTransfer, "cell_type", 5);
  EXPECT_TRUE(check.ok) << check.failure;
  const auto val = conditions_with(d, s, SplitLabel::Val);
  const auto test = conditions_with(d, s, SplitLabel::Test);
  // 3 of 10 held out in one level, rounded split between val and test
  EXPECT_EQ(val.size() + test.size(), 3u);
  std::set<std::string> levels;
  for (const auto& c : val) levels.insert(c.covariates[0]);
  for (const auto& c : test) levels.insert(c.covariates[0]);
  EXPECT_EQ(levels.size(), 1u);
}

TEST(CovariateTransfer, DeterministicAndSeedSensitive) {
  const auto d = synth(12, 3);
  SplitSpec spec;
  spec.min_perturbations_per_level = 4;
  spec.max_heldout_levels = 2;
  spec.seed = 9;
  const auto a = make_split(d, spec);
  EXPECT_EQ(a.labels, make_split(d, spec).labels);
  bool differs = false;
  for (Seed s = 10; s < 20 && !differs; ++s) {
    spec.seed = s;
    differs = make_split(d, spec).labels != a.labels;
  }
  EXPECT_TRUE(differs);
}

TEST(CovariateTransfer, UnsatisfiableMinimum) {
  const auto d = synth(6, 2);
  SplitSpec spec;
  spec.min_perturbations_per_level = 6;
  spec.max_retries = 5;
  EXPECT_ERROR_CODE(split_covariate_transfer(d, spec), ErrorCode::Unsatisfiable);
}

TEST(CovariateTransfer, NeedsTwoLevels) {
  SplitSpec spec;
  spec.min_perturbations_per_level = 1;
  EXPECT_ERROR_CODE(split_covariate_transfer(synth(6, 1), spec), ErrorCode::Invalid);
}

TEST(Combo, HoldsOutOnlyCombinations) {
  const auto d = synth(8, 1, 12);
  SplitSpec spec;
  spec.kind = SplitKind::Combo;
  spec.heldout_fraction = 0.5;
  spec.seed = 2;
  const auto s = make_split(d, spec);
  const auto check = pbtest::check_split(d, s, SplitKind::Combo, "cell_type", 0);
  EXPECT_TRUE(check.ok) << check.failure;
  EXPECT_EQ(conditions_with(d, s, SplitLabel::Val).size() + conditions_with(d, s, SplitLabel::Test).size(), 6u);
}

TEST(Combo, NoCombinationsIsEmpty) {
  SplitSpec spec;
  spec.kind = SplitKind::Combo;
  EXPECT_ERROR_CODE(make_split(synth(4, 1), spec), ErrorCode::Empty);
}

TEST(InverseCombo, HoldsOutSingletonsKeepingPartners) {
  const auto d = synth(8, 1, 10);
  SplitSpec spec;
  spec.kind = SplitKind::InverseCombo;
  spec.heldout_fraction = 0.3;
  spec.seed = 5;
  const auto s = make_split(d, spec);
  const auto train = conditions_with(d, s, SplitLabel::Train);
  std::set<Condition> held = conditions_with(d, s, SplitLabel::Val);
  for (const auto& c : conditions_with(d, s, SplitLabel::Test)) held.insert(c);
  ASSERT_FALSE(held.empty());
  for (const auto& h : held) {
    EXPECT_FALSE(h.is_combination());
    // some combination containing the held-out singleton has its partner in train
    bool partner = false;
    for (const auto& c : train) {
      if (!c.is_combination()) continue;
      const auto& p = c.perturbations;
      if (std::find(p.begin(), p.end(), h.perturbations[0]) == p.end()) continue;
      for (const auto& q : p) {
        if (q != h.perturbations[0] && train.count(Condition({q}, h.covariates))) partner = true;
      }
    }
    EXPECT_TRUE(partner) << h.label();
  }
}

TEST(SplitSpec, Validation) {
  SplitSpec spec;
  spec.heldout_fraction = 0.0;
  EXPECT_ERROR_CODE(validate(spec), ErrorCode::Invalid);
  spec = {};
  spec.val_test_ratio = 1.5;
  EXPECT_ERROR_CODE(validate(spec), ErrorCode::Invalid);
  EXPECT_EQ(parse_split_kind("inverse_combo"), SplitKind::InverseCombo);
  EXPECT_EQ(parse_split_label(to_string(SplitLabel::Val)), SplitLabel::Val);
}

TEST(Imbalance, Entropy) {
  const std::vector<Index> two = {3, 1};
  const double p = 0.75, q = 0.25;
  EXPECT_NEAR(compute_imbalance(two), 1.0 + (p * std::log(p) + q * std::log(q)) / std::log(2.0), 1e-15);
  const std::vector<Index> concentrated = {10, 0, 0};
  EXPECT_DOUBLE_EQ(compute_imbalance(concentrated), 1.0);
  const std::vector<Index> one = {5};
  EXPECT_ERROR_CODE(compute_imbalance(one), ErrorCode::Invalid);
  const std::vector<Index> zero = {0, 0};
  EXPECT_ERROR_CODE(compute_imbalance(zero), ErrorCode::Invalid);
}

TEST(Imbalance, DownsampleHitsTarget) {
  const auto d = synth(30, 3, 0, 3);
  DownsampleOptions opt;
  opt.min_perturbations_per_level = 3;
  opt.tolerance = 0.02;
  const auto out = downsample_to_imbalance(d, 0.8, 11, opt);
  std::vector<Index> counts;
  for (const auto& [level, perts] : perturbations_per_level(out, "cell_type")) counts.push_back(perts.size());
  EXPECT_EQ(counts[0], 30);
  EXPECT_NEAR(1.0 - compute_imbalance(counts), 0.8, 0.02);
  // controls survive
  Index controls = 0;
  for (Index r = 0; r < out.n_cells(); ++r) controls += out.is_control(r);
  EXPECT_EQ(controls, 3 * 2);
  opt.min_perturbations_per_level = 30;
  EXPECT_ERROR_CODE(downsample_to_imbalance(d, 0.5, 11, opt), ErrorCode::Unsatisfiable);
}

TEST(DataScaling, RestrictTrainingLevels) {
  const auto d = synth(10, 3);
  SplitSpec spec;
  spec.min_perturbations_per_level = 5;
  spec.seed = 1;
  const auto s = make_split(d, spec);
  const auto [rd, rs] = restrict_training_levels(d, s, "cell_type", {"cell_type_0"});
  ASSERT_EQ(rs.labels.size(), static_cast<std::size_t>(rd.n_cells()));
  EXPECT_EQ(rs.count(SplitLabel::Val), s.count(SplitLabel::Val));
  EXPECT_EQ(rs.count(SplitLabel::Test), s.count(SplitLabel::Test));
  for (Index r : rs.rows(SplitLabel::Train)) {
    const auto& c = rd.cells[static_cast<std::size_t>(r)];
    EXPECT_TRUE(rd.is_control(r) || c.covariates[0] == "cell_type_0") << c.label();
  }
}

TEST(SplitFile, RoundTripAndErrors) {
  pbtest::TempDir tmp;
  const auto d = synth(6, 2);
  SplitSpec spec;
  spec.min_perturbations_per_level = 2;
  const auto s = make_split(d, spec);
  write_split(s, tmp.path / "split.csv");
  const auto back = read_split(tmp.path / "split.csv", d);
  EXPECT_EQ(back.labels, s.labels);
  EXPECT_EQ(back.cell_ids, s.cell_ids);

  auto lines = text::read_lines(tmp.path / "split.csv");
  lines.pop_back();
  text::write_file(tmp.path / "short.csv", text::join(lines, "\n") + "\n");
  EXPECT_ERROR_CODE(read_split(tmp.path / "short.csv", d), ErrorCode::Invalid);
  text::write_file(tmp.path / "bad.csv", "cell_id,split\nnobody,train\n");
  EXPECT_ERROR_CODE(read_split(tmp.path / "bad.csv", d), ErrorCode::UnknownName);
  text::write_file(tmp.path / "hdr.csv", "id,label\n");
  EXPECT_ERROR_CODE(read_split(tmp.path / "hdr.csv", d), ErrorCode::Format);
}
