#include "pbench/baselines.hpp"

#include <cmath>
#include <filesystem>

#include "gtest_support.hpp"
#include "pbench/synthgen.hpp"
#include "pbench/text_io.hpp"
#include "support.hpp"

using namespace pbench;

namespace {

struct Fixture {
  PerturbationDataset data;
  SplitAssignment split;
};

Fixture small(Seed seed = 3) {
  SynthSpec s;
  s.n_genes = 20;
  s.n_perturbations = 8;
  s.covariate_levels = {2};
  s.cells_per_condition = 12;
  s.effect_sparsity = 4;
  s.truth_cells = 10;
  s.seed = seed;
  Fixture f{log_normalize(generate(s).dataset), {}};
  SplitSpec spec;
  spec.min_perturbations_per_level = 4;
  spec.heldout_fraction = 0.5;
  spec.seed = 1;
  f.split = make_split(f.data, spec);
  return f;
}

ModelConfig quick(Architecture a) {
  ModelConfig c;
  c.architecture = a;
  c.latent_dim = 8;
  c.mlp.hidden_width = 16;
  c.max_epochs = 15;
  c.batch_size = 32;
  c.n_controls = 20;
  c.lr = 5e-3;
  c.seed = 2;
  return c;
}

}  // namespace

TEST(OneHotVocab, EncodesConditions) {
  const auto f = small();
  const auto v = OneHotVocab::from_dataset(f.data);
  EXPECT_EQ(v.n_perturbations(), 8);
  EXPECT_EQ(v.n_covariates(), 2);
  const VectorXd e = v.encode(Condition({"pert_03"}, {"cell_type_1"}));
  ASSERT_EQ(e.size(), 10);
  EXPECT_EQ(e.sum(), 2.0);
  EXPECT_EQ(e(3), 1.0);
  EXPECT_EQ(e(9), 1.0);
  EXPECT_EQ(v.encode_perturbations(Condition({"control"}, {"cell_type_0"})), VectorXd::Zero(8));
  EXPECT_EQ(v.encode_perturbations(Condition({"pert_01", "pert_05"}, {"cell_type_0"})).sum(), 2.0);
  EXPECT_ERROR_CODE(v.encode(Condition({"pert_99"}, {"cell_type_0"})), ErrorCode::UnknownName);
  EXPECT_ERROR_CODE(v.encode_covariates({"cell_type_7"}), ErrorCode::UnknownName);
  EXPECT_ERROR_CODE(v.encode_covariates({"a", "b"}), ErrorCode::Dimension);

  pbtest::TempDir tmp;
  v.save(tmp.path / "vocab.tsv");
  EXPECT_EQ(OneHotVocab::load(tmp.path / "vocab.tsv"), v);
}

TEST(ModelConfig, ValidationAndTokens) {
  ModelConfig c;
  EXPECT_NO_THROW(validate(c));
  c.mlp.dropout = 0.9;
  EXPECT_ERROR_CODE(validate(c), ErrorCode::Invalid);
  c = {};
  c.batch_size = 0;
  EXPECT_ERROR_CODE(validate(c), ErrorCode::Invalid);
  for (auto a : {Architecture::Linear, Architecture::LatentAdditive, Architecture::DecoderOnly}) {
    EXPECT_EQ(parse_architecture(to_string(a)), a);
  }
  for (auto m : {DecoderInput::Pert, DecoderInput::Cov, DecoderInput::PertCov}) {
    EXPECT_EQ(parse_decoder_input(to_string(m)), m);
  }
  EXPECT_ERROR_CODE(parse_architecture("transformer"), ErrorCode::Config);
}

TEST(BaselineModel, LinearIsControlPlusAffine) {
  BaselineModel m(ModelConfig{}, 3, 2, 1);
  m.init(1);
  Batch b;
  b.control = MatrixXd::Constant(3, 1, 2.0);
  b.pert = (MatrixXd(2, 1) << 1, 0).finished();
  b.cov = MatrixXd::Ones(1, 1);
  const auto& w = m.params()[0].value;
  const auto& bias = m.params()[1].value;
  EXPECT_EQ(m.params()[0].name, "linear.weight");
  const VectorXd want = b.control.col(0) + w.col(0) + w.col(2) + bias.col(0);
  EXPECT_TRUE(m.forward(b, false, nullptr).col(0).isApprox(want));
}

TEST(BaselineModel, DecoderOnlyNeedsAnInputBlock) {
  ModelConfig c;
  c.architecture = Architecture::DecoderOnly;
  c.decoder_input = DecoderInput::Cov;
  EXPECT_ERROR_CODE(BaselineModel(c, 3, 2, 0), ErrorCode::Invalid);
}

TEST(BaselineModel, ControlsHaveNoPerturbationLatent) {
  auto c = quick(Architecture::LatentAdditive);
  BaselineModel m(c, 4, 2, 1);
  m.init(5);
  Rng rng(1);
  Batch b;
  b.control = MatrixXd::Random(4, 2);
  b.pert = MatrixXd::Zero(2, 2);
  b.cov = MatrixXd::Ones(1, 2);
  const MatrixXd ctrl_only = m.forward(b, false, nullptr);
  // changing the perturbation network does not move predictions for controls
  for (auto& p : m.params()) {
    if (p.name.rfind("pert.", 0) == 0) p.value.setConstant(3.0);
  }
  EXPECT_EQ(m.forward(b, false, nullptr), ctrl_only);
}

TEST(BaselineModel, GradientsMatchFiniteDifferences) {
  for (auto a : {Architecture::Linear, Architecture::LatentAdditive, Architecture::DecoderOnly}) {
    auto c = quick(a);
    c.mlp.hidden_width = 5;
    c.latent_dim = 3;
    BaselineModel m(c, 4, 3, 2);
    m.init(7);
    Rng rng(8);
    std::normal_distribution<double> n;
    for (auto& p : m.params()) p.value = p.value.unaryExpr([&](double v) { return v + 0.3 * n(rng); });
    Batch b;
    b.control = MatrixXd::Random(4, 3);
    b.pert = (MatrixXd(3, 3) << 1, 0, 0, 0, 1, 0, 0, 1, 0).finished();
    b.cov = (MatrixXd(2, 3) << 1, 0, 1, 0, 1, 0).finished();
    for (const auto& e : pbtest::gradient_check(m, b, MatrixXd::Random(4, 3))) {
      EXPECT_LT(e.relative, 1e-5) << to_string(a) << " " << e.tensor;
    }
  }
}

TEST(Training, LossDecreasesAndIsDeterministic) {
  const auto f = small();
  const auto cfg = quick(Architecture::Linear);
  const auto a = train_model(f.data, f.split, cfg);
  ASSERT_FALSE(a.train_loss.empty());
  EXPECT_LT(a.train_loss.back(), a.train_loss.front());
  EXPECT_GE(a.best_epoch, 0);
  const auto b = train_model(f.data, f.split, cfg);
  EXPECT_EQ(a.train_loss, b.train_loss);
  EXPECT_EQ(a.model.params()[0].value, b.model.params()[0].value);
}

TEST(Training, RejectsSplitOfWrongSize) {
  const auto f = small();
  auto split = f.split;
  split.labels.pop_back();
  split.cell_ids.pop_back();
  EXPECT_ERROR_CODE(train_model(f.data, split, quick(Architecture::Linear)), ErrorCode::Dimension);
}

TEST(Prediction, SaveLoadReproducesPredictions) {
  const auto f = small();
  for (auto a : {Architecture::Linear, Architecture::LatentAdditive, Architecture::DecoderOnly}) {
    auto cfg = quick(a);
    cfg.max_epochs = 3;
    const auto state = train_model(f.data, f.split, cfg);
    pbtest::TempDir tmp;
    save_model(state, tmp.path / "model");
    const auto back = load_model(tmp.path / "model");
    EXPECT_EQ(back.vocab, state.vocab);
    EXPECT_EQ(back.config.architecture, a);
    const auto conds = std::vector<Condition>{Condition({"pert_00"}, {"cell_type_0"}),
                                              Condition({"pert_01", "pert_02"}, {"cell_type_1"})};
    const auto ctrl = f.split.rows(SplitLabel::Train);
    std::vector<Index> ctrl_rows;
    for (Index r : ctrl) {
      if (f.data.is_control(r)) ctrl_rows.push_back(r);
    }
    const auto p1 = predict_conditions(state, f.data, conds, ctrl_rows, 10, 4);
    const auto p2 = predict_conditions(back, f.data, conds, ctrl_rows, 10, 4);
    ASSERT_EQ(p1.rows.size(), 2u);
    for (std::size_t i = 0; i < 2; ++i) EXPECT_EQ(p1.rows[i].mean, p2.rows[i].mean) << to_string(a);
  }
}

TEST(Prediction, GeneMismatchIsReported) {
  const auto f = small();
  auto cfg = quick(Architecture::Linear);
  cfg.max_epochs = 1;
  const auto state = train_model(f.data, f.split, cfg);
  auto other = f.data;
  other.gene_names[0] = "renamed";
  std::vector<Index> ctrl;
  for (Index r = 0; r < other.n_cells(); ++r) {
    if (other.is_control(r)) ctrl.push_back(r);
  }
  EXPECT_ERROR_CODE(predict_conditions(state, other, {Condition({"pert_00"}, {"cell_type_0"})}, ctrl, 5, 1),
                    ErrorCode::GeneMismatch);
}

TEST(Prediction, LoadRejectsTruncatedParameters) {
  const auto f = small();
  auto cfg = quick(Architecture::Linear);
  cfg.max_epochs = 1;
  pbtest::TempDir tmp;
  save_model(train_model(f.data, f.split, cfg), tmp.path);
  std::filesystem::resize_file(tmp.path / "params.bin", 16);
  EXPECT_ERROR_CODE(load_model(tmp.path), ErrorCode::Format);
}

TEST(SearchSpace, DefaultsSampleInsideBounds) {
  Rng rng(9);
  for (auto a : {Architecture::Linear, Architecture::LatentAdditive, Architecture::DecoderOnly}) {
    const auto space = default_search_space(a);
    EXPECT_NO_THROW(check_search_space(space, a));
    for (const auto& dim : space) {
      for (int i = 0; i < 200; ++i) {
        const double v = sample_dimension(dim, rng);
        if (dim.kind == SearchDimension::Kind::Categorical) {
          EXPECT_NE(std::find(dim.choices.begin(), dim.choices.end(), v), dim.choices.end());
          continue;
        }
        EXPECT_GE(v, dim.low);
        EXPECT_LE(v, dim.high);
        if (dim.step > 0) EXPECT_NEAR(std::remainder(v - dim.low, dim.step), 0.0, 1e-9) << dim.name;
      }
    }
  }
  auto space = default_search_space(Architecture::Linear);
  space[0].high = 0.1;
  EXPECT_ERROR_CODE(check_search_space(space, Architecture::Linear), ErrorCode::Config);
  space = default_search_space(Architecture::LatentAdditive);
  EXPECT_ERROR_CODE(check_search_space(space, Architecture::Linear), ErrorCode::Config);
}

TEST(SearchSpace, ApplyHyperparameters) {
  const auto c = apply_hyperparameters(ModelConfig{}, {{"lr", 1e-4}, {"n_layers", 3}, {"softplus_output", 0}});
  EXPECT_EQ(c.lr, 1e-4);
  EXPECT_EQ(c.mlp.n_layers, 3);
  EXPECT_FALSE(c.mlp.softplus_output);
  EXPECT_ERROR_CODE(apply_hyperparameters(ModelConfig{}, {{"momentum", 0.9}}), ErrorCode::Config);
}

TEST(Hpo, BestTrialIsArgminAndTrialsAreWritten) {
  const auto f = small();
  auto base = quick(Architecture::Linear);
  base.max_epochs = 3;
  const auto r = hpo_search(f.data, f.split, base, default_search_space(Architecture::Linear), 4, 11, 2);
  ASSERT_EQ(r.trials.size(), 4u);
  for (const auto& t : r.trials) {
    if (t.status == "ok") EXPECT_LE(r.trials[r.best_index].objective, t.objective);
  }
  EXPECT_EQ(r.best.lr, r.trials[r.best_index].config.lr);
  const auto again = hpo_search(f.data, f.split, base, default_search_space(Architecture::Linear), 4, 11, 1);
  for (std::size_t i = 0; i < 4; ++i) EXPECT_EQ(again.trials[i].objective, r.trials[i].objective);

  pbtest::TempDir tmp;
  write_trials(r.trials, tmp.path / "trials.tsv");
  EXPECT_EQ(text::read_lines(tmp.path / "trials.tsv").size(), 5u);
  EXPECT_ERROR_CODE(hpo_search(f.data, f.split, base, {}, 0, 1), ErrorCode::Invalid);
}

TEST(Stability, SummaryIsMeanAndStd) {
  const auto f = small();
  auto cfg = quick(Architecture::Linear);
  cfg.max_epochs = 3;
  const auto r = stability_reruns(f.data, f.split, cfg, 3);
  ASSERT_EQ(r.runs.size(), 3u);
  double sum = 0.0;
  for (const auto& run : r.runs) sum += run.value("rmse_mean");
  EXPECT_NEAR(r.summary.value("rmse_mean"), sum / 3.0, 1e-12);
  EXPECT_ERROR_CODE(stability_reruns(f.data, f.split, cfg, 1), ErrorCode::Invalid);
}
