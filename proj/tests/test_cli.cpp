// Drives the pbench binary through a shell.

#include <sys/wait.h>

#include <cstdlib>
#include <filesystem>

#include "gtest_support.hpp"
#include "pbench/text_io.hpp"
#include "support.hpp"

namespace fs = std::filesystem;
using namespace pbench;

namespace {

struct Run {
  int status = -1;
  std::string err;
};

Run pbench_cli(const std::string& args, const fs::path& tmp) {
  const auto err_file = tmp / "stderr.txt";
  const std::string cmd = std::string(PBENCH_CLI_PATH) + " " + args + " 2> " + err_file.string() + " > /dev/null";
  const int raw = std::system(cmd.c_str());
  Run r;
  r.status = WIFEXITED(raw) ? WEXITSTATUS(raw) : -1;
  for (const auto& l : text::read_lines(err_file)) r.err += l + '\n';
  return r;
}

std::string simulate_args(const fs::path& out, int genes) {
  return "simulate --out " + out.string() + " --seed 3 --set synth.n_genes=" + std::to_string(genes) +
         " --set synth.n_perturbations=8 --set synth.covariate_levels=2 --set synth.cells_per_condition=10"
         " --set synth.effect_sparsity=4 --set synth.truth_cells=20 --set synth.oracle=perfect";
}

}  // namespace

TEST(Cli, UsageErrorsExitOne) {
  pbtest::TempDir tmp;
  auto r = pbench_cli("", tmp.path);
  EXPECT_EQ(r.status, 1);
  EXPECT_EQ(r.err.rfind("error E_USAGE:", 0), 0u) << r.err;
  r = pbench_cli("teleport", tmp.path);
  EXPECT_EQ(r.status, 1);
  EXPECT_EQ(r.err.rfind("error E_USAGE:", 0), 0u) << r.err;
  r = pbench_cli("simulate --threads 0", tmp.path);
  EXPECT_EQ(r.status, 1);
  EXPECT_EQ(r.err.rfind("error E_USAGE:", 0), 0u) << r.err;
}

TEST(Cli, ConfigErrorsLeaveNoOutput) {
  pbtest::TempDir tmp;
  const auto out = tmp.path / "out";
  const auto r = pbench_cli("simulate --out " + out.string() + " --set synth.n_gens=3", tmp.path);
  EXPECT_EQ(r.status, 1);
  EXPECT_EQ(r.err.rfind("error E_CONFIG:", 0), 0u) << r.err;
  EXPECT_FALSE(fs::exists(out));
  const auto missing = pbench_cli("train --out " + out.string(), tmp.path);
  EXPECT_EQ(missing.status, 1);
  EXPECT_EQ(missing.err.rfind("error E_CONFIG:", 0), 0u) << missing.err;
}

TEST(Cli, PipelineEndToEnd) {
  pbtest::TempDir tmp;
  const auto sim = tmp.path / "sim";
  ASSERT_EQ(pbench_cli(simulate_args(sim, 30), tmp.path).status, 0);
  for (const char* f : {"dataset", "truth", "oracle_aggregates.tsv", "resolved_simulate.cfg"}) {
    EXPECT_TRUE(fs::exists(sim / f)) << f;
  }

  const auto pre = tmp.path / "pre";
  auto r = pbench_cli("preprocess --out " + pre.string() + " --set data.dataset=" + (sim / "dataset").string() +
                          " --set preprocess.n_hvg=20 --set preprocess.n_de=2",
                      tmp.path);
  ASSERT_EQ(r.status, 0) << r.err;

  const auto split = tmp.path / "split";
  r = pbench_cli("split --out " + split.string() + " --seed 1 --set data.dataset=" + (pre / "dataset").string() +
                     " --set split.min_perturbations_per_level=4 --set split.heldout_fraction=0.5",
                 tmp.path);
  ASSERT_EQ(r.status, 0) << r.err;
  EXPECT_EQ(text::read_lines(split / "split_counts.tsv").size(), 4u);

  const std::string data = " --set data.dataset=" + (pre / "dataset").string() +
                           " --set data.split=" + (split / "split.csv").string();
  const auto model = tmp.path / "train";
  r = pbench_cli("train --out " + model.string() + data + " --set model.max_epochs=5 --set model.n_controls=10",
                 tmp.path);
  ASSERT_EQ(r.status, 0) << r.err;

  const auto pred = tmp.path / "pred";
  r = pbench_cli("predict --out " + pred.string() + data + " --set data.model=" + (model / "model").string() +
                     " --set model.n_controls=10",
                 tmp.path);
  ASSERT_EQ(r.status, 0) << r.err;

  const auto eval = tmp.path / "eval";
  r = pbench_cli("evaluate --out " + eval.string() + " --set data.predictions=" + (pred / "aggregates.tsv").string() +
                     " --set data.predictions_logfc=" + (pred / "logfc.tsv").string() +
                     " --set data.reference=" + (pre / "dataset").string() +
                     " --set data.split=" + (split / "split.csv").string(),
                 tmp.path);
  ASSERT_EQ(r.status, 0) << r.err;
  EXPECT_TRUE(fs::exists(eval / "summary.tsv"));
  EXPECT_TRUE(fs::exists(eval / "report.txt"));
}

TEST(Cli, GeneMismatchIsReported) {
  pbtest::TempDir tmp;
  const auto a = tmp.path / "a", b = tmp.path / "b";
  ASSERT_EQ(pbench_cli(simulate_args(a, 30), tmp.path).status, 0);
  ASSERT_EQ(pbench_cli(simulate_args(b, 25), tmp.path).status, 0);
  const auto out = tmp.path / "eval";
  const auto r = pbench_cli("evaluate --out " + out.string() + " --set data.predictions=" +
                                (a / "oracle_aggregates.tsv").string() +
                                " --set data.reference_means=" + (b / "oracle_aggregates.tsv").string(),
                            tmp.path);
  EXPECT_EQ(r.status, 1);
  EXPECT_EQ(r.err.rfind("error E_GENE_MISMATCH:", 0), 0u) << r.err;
  EXPECT_FALSE(fs::exists(out));
}
