#include "pbench/baselines.hpp"

#include <algorithm>
#include <atomic>
#include <bit>
#include <cmath>
#include <fstream>
#include <mutex>
#include <set>
#include <thread>

#include "pbench/text_io.hpp"

namespace pbench {

namespace {

// derive_seed stream ids
enum : std::uint64_t { kInit = 1, kTrain = 2, kPredict = 3, kRerun = 5, kTrial = 6 };

MatrixXd gather(const PerturbationDataset& d, std::span<const Index> rows) {
  MatrixXd out = MatrixXd::Zero(d.n_genes(), static_cast<Index>(rows.size()));
  for (std::size_t j = 0; j < rows.size(); ++j) {
    for (CountMatrix::InnerIterator it(d.counts, rows[j]); it; ++it) out(it.col(), static_cast<Index>(j)) = it.value();
  }
  return out;
}

std::vector<Index> control_rows_for(const PerturbationDataset& d, const SplitAssignment& split, SplitLabel label) {
  std::vector<Index> in_split, all;
  for (Index r = 0; r < d.n_cells(); ++r) {
    if (!d.is_control(r)) continue;
    all.push_back(r);
    if (split.labels[static_cast<std::size_t>(r)] == label) in_split.push_back(r);
  }
  return in_split.empty() ? all : in_split;
}

std::vector<Condition> perturbed_conditions(const PerturbationDataset& d, const SplitAssignment& split,
                                            SplitLabel label) {
  std::vector<Condition> out;
  std::set<Condition> seen;
  for (Index r = 0; r < d.n_cells(); ++r) {
    if (split.labels[static_cast<std::size_t>(r)] != label || d.is_control(r)) continue;
    const auto& c = d.cells[static_cast<std::size_t>(r)];
    if (seen.insert(c).second) out.push_back(c);
  }
  return out;
}

std::map<CovariateAssignment, std::vector<Index>> controls_by_covariates(const PerturbationDataset& d,
                                                                         std::span<const Index> rows) {
  std::map<CovariateAssignment, std::vector<Index>> out;
  for (Index r : rows) {
    if (d.is_control(r)) out[d.cells[static_cast<std::size_t>(r)].covariates].push_back(r);
  }
  return out;
}

AggregateTable predict_with(BaselineModel& model, const OneHotVocab& vocab, const std::vector<std::string>& genes,
                            const PerturbationDataset& d, const std::vector<CounterfactualRequest>& requests,
                            Index n_controls, Seed seed) {
  if (genes != d.gene_names) throw Error(ErrorCode::GeneMismatch, "model genes differ from the dataset's genes");
  if (n_controls < 1) throw Error(ErrorCode::Invalid, "n_controls must be positive");
  AggregateTable out;
  out.genes = genes;
  out.covariate_keys = d.meta.covariate_keys;
  out.control_value = d.meta.control_value;
  out.delimiter = d.meta.combination_delimiter;
  for (std::size_t i = 0; i < requests.size(); ++i) {
    const auto& req = requests[i];
    if (req.control_rows.empty()) {
      throw Error(ErrorCode::MissingControl, "no control cells for '" + req.target.label(out.delimiter) + "'");
    }
    const VectorXd p = vocab.encode_perturbations(req.target);
    const VectorXd c = vocab.encode_covariates(req.target.covariates);
    Batch batch;
    Index n = 1;
    if (model.uses_controls()) {
      Rng rng(derive_seed(seed, {i}));
      std::uniform_int_distribution<std::size_t> pick(0, req.control_rows.size() - 1);
      std::vector<Index> rows(static_cast<std::size_t>(n_controls));
      for (auto& r : rows) r = req.control_rows[pick(rng)];
      batch.control = gather(d, rows);
      n = n_controls;
    }
    batch.pert = p.replicate(1, n);
    batch.cov = c.replicate(1, n);
    const MatrixXd y = model.forward(batch, false, nullptr);
    ConditionAggregate agg;
    agg.condition = req.target;
    agg.mean = y.rowwise().mean();
    agg.n_cells = n;
    agg.logfc = agg.mean - gather(d, req.control_rows).rowwise().mean();
    if (!agg.mean.allFinite()) {
      throw Error(ErrorCode::NonFinite, "non-finite prediction for '" + req.target.label(out.delimiter) + "'");
    }
    out.rows.push_back(std::move(agg));
  }
  return out;
}

std::vector<CounterfactualRequest> requests_for(const PerturbationDataset& d, const std::vector<Condition>& conditions,
                                                std::span<const Index> control_rows) {
  const auto by_cov = controls_by_covariates(d, control_rows);
  std::vector<CounterfactualRequest> out;
  for (const auto& c : conditions) {
    CounterfactualRequest req;
    req.target = c;
    const auto it = by_cov.find(c.covariates);
    if (it == by_cov.end()) {
      throw Error(ErrorCode::MissingControl, "no control cells for covariates '" + text::join(c.covariates, "|") + "'");
    }
    req.control_rows = it->second;
    out.push_back(std::move(req));
  }
  return out;
}

// Validation objective on mean vectors only: rmse + 0.1 rank(rmse).
double objective_on(BaselineModel& model, const OneHotVocab& vocab, const std::vector<std::string>& genes,
                    const PerturbationDataset& d, const SplitAssignment& split, const ModelConfig& cfg,
                    const AggregateTable& observed, const std::vector<Condition>& conditions) {
  const auto controls = control_rows_for(d, split, SplitLabel::Val);
  const auto preds = predict_with(model, vocab, genes, d, requests_for(d, conditions, controls), cfg.n_controls,
                                  derive_seed(cfg.seed, {kPredict}));
  std::vector<ConditionAggregate> p, o;
  double rmse_sum = 0.0;
  for (const auto& pr : preds.rows) {
    const auto* ob = observed.find(pr.condition);
    if (ob == nullptr) continue;
    rmse_sum += rmse(pr.mean, ob->mean);
    p.push_back(pr);
    o.push_back(*ob);
  }
  if (o.empty()) throw Error(ErrorCode::Empty, "no validation condition could be scored");
  const double macro = rmse_sum / static_cast<double>(o.size());
  const double rank = o.size() >= 2 ? rank_metric(p, o, RankDistance::RmseMean, RankScope::Global).average : 0.0;
  return hpo_objective(macro, rank);
}

nn::MlpSpec without_softplus(nn::MlpSpec s) {
  s.softplus_output = false;
  return s;
}

}  // namespace

// ---------------------------------------------------------------------------
// Vocabulary

OneHotVocab OneHotVocab::from_dataset(const PerturbationDataset& d) {
  OneHotVocab v;
  v.control_value_ = d.meta.control_value;
  v.keys_ = d.meta.covariate_keys;
  std::set<std::string> perts;
  std::vector<std::set<std::string>> levels(v.keys_.size());
  for (const auto& c : d.cells) {
    if (!c.is_control(v.control_value_)) perts.insert(c.perturbations.begin(), c.perturbations.end());
    for (std::size_t k = 0; k < c.covariates.size() && k < levels.size(); ++k) levels[k].insert(c.covariates[k]);
  }
  v.perturbations_.assign(perts.begin(), perts.end());
  for (const auto& l : levels) v.levels_.emplace_back(l.begin(), l.end());
  return v;
}

Index OneHotVocab::n_covariates() const {
  Index n = 0;
  for (const auto& l : levels_) n += static_cast<Index>(l.size());
  return n;
}

VectorXd OneHotVocab::encode_perturbations(const Condition& c) const {
  VectorXd out = VectorXd::Zero(n_perturbations());
  if (c.is_control(control_value_)) return out;
  for (const auto& name : c.perturbations) {
    const auto it = std::lower_bound(perturbations_.begin(), perturbations_.end(), name);
    if (it == perturbations_.end() || *it != name) {
      throw Error(ErrorCode::UnknownName, "perturbation '" + name + "' is not in the vocabulary");
    }
    out(it - perturbations_.begin()) = 1.0;
  }
  return out;
}

VectorXd OneHotVocab::encode_covariates(const CovariateAssignment& covs) const {
  if (covs.size() != keys_.size()) throw Error(ErrorCode::Dimension, "covariate assignment has the wrong arity");
  VectorXd out = VectorXd::Zero(n_covariates());
  Index offset = 0;
  for (std::size_t k = 0; k < keys_.size(); ++k) {
    const auto& l = levels_[k];
    const auto it = std::lower_bound(l.begin(), l.end(), covs[k]);
    if (it == l.end() || *it != covs[k]) {
      throw Error(ErrorCode::UnknownName, keys_[k] + " level '" + covs[k] + "' is not in the vocabulary");
    }
    out(offset + (it - l.begin())) = 1.0;
    offset += static_cast<Index>(l.size());
  }
  return out;
}

VectorXd OneHotVocab::encode(const Condition& c) const {
  VectorXd out(dimension());
  out << encode_perturbations(c), encode_covariates(c.covariates);
  return out;
}

void OneHotVocab::save(const std::filesystem::path& path) const {
  std::string s = "control_value\t" + control_value_ + '\n';
  for (const auto& p : perturbations_) s += "perturbation\t" + p + '\n';
  for (std::size_t k = 0; k < keys_.size(); ++k) {
    s += "covariate_key\t" + keys_[k] + '\n';
    for (const auto& l : levels_[k]) s += "covariate_level\t" + keys_[k] + '\t' + l + '\n';
  }
  text::write_file(path, s);
}

OneHotVocab OneHotVocab::load(const std::filesystem::path& path) {
  OneHotVocab v;
  for (const auto& line : text::read_lines(path)) {
    if (line.empty()) continue;
    const auto f = text::split(line, '\t');
    if (f[0] == "control_value" && f.size() == 2) {
      v.control_value_ = f[1];
    } else if (f[0] == "perturbation" && f.size() == 2) {
      v.perturbations_.push_back(f[1]);
    } else if (f[0] == "covariate_key" && f.size() == 2) {
      v.keys_.push_back(f[1]);
      v.levels_.emplace_back();
    } else if (f[0] == "covariate_level" && f.size() == 3 && !v.keys_.empty() && v.keys_.back() == f[1]) {
      v.levels_.back().push_back(f[2]);
    } else {
      throw Error(ErrorCode::Format, path.string() + ": bad vocabulary line '" + line + "'");
    }
  }
  if (!std::is_sorted(v.perturbations_.begin(), v.perturbations_.end())) {
    throw Error(ErrorCode::Format, path.string() + ": perturbations are not sorted");
  }
  return v;
}

// ---------------------------------------------------------------------------
// Config

std::string_view to_string(Architecture a) noexcept {
  switch (a) {
    case Architecture::Linear: return "linear";
    case Architecture::LatentAdditive: return "latent_additive";
    case Architecture::DecoderOnly: return "decoder_only";
  }
  return "?";
}

std::string_view to_string(DecoderInput m) noexcept {
  switch (m) {
    case DecoderInput::Pert: return "pert";
    case DecoderInput::Cov: return "cov";
    case DecoderInput::PertCov: return "pert+cov";
  }
  return "?";
}

Architecture parse_architecture(std::string_view token) {
  for (auto a : {Architecture::Linear, Architecture::LatentAdditive, Architecture::DecoderOnly}) {
    if (to_string(a) == token) return a;
  }
  throw Error(ErrorCode::Config, "unknown architecture '" + std::string(token) + "'");
}

DecoderInput parse_decoder_input(std::string_view token) {
  for (auto m : {DecoderInput::Pert, DecoderInput::Cov, DecoderInput::PertCov}) {
    if (to_string(m) == token) return m;
  }
  throw Error(ErrorCode::Config, "unknown decoder input '" + std::string(token) + "'");
}

void validate(const ModelConfig& cfg) {
  auto fail = [](const std::string& m) { throw Error(ErrorCode::Invalid, "model config: " + m); };
  if (cfg.latent_dim < 1) fail("latent_dim must be >= 1");
  if (cfg.mlp.n_layers < 0) fail("n_layers must be >= 0");
  if (cfg.mlp.hidden_width < 1) fail("hidden width must be >= 1");
  if (cfg.mlp.dropout < 0.0 || cfg.mlp.dropout > 0.8) fail("dropout must lie in [0, 0.8]");
  if (!(cfg.lr > 0.0)) fail("lr must be positive");
  if (cfg.weight_decay < 0.0) fail("weight decay must be >= 0");
  if (cfg.batch_size < 1) fail("batch_size must be >= 1");
  if (cfg.max_epochs < 1) fail("max_epochs must be >= 1");
  if (cfg.patience < 1) fail("patience must be >= 1");
  if (cfg.n_controls < 1) fail("n_controls must be >= 1");
}

// ---------------------------------------------------------------------------
// Model

BaselineModel::BaselineModel(const ModelConfig& cfg, Index n_genes, Index n_pert, Index n_cov)
    : cfg_(cfg), n_genes_(n_genes), n_pert_(n_pert), n_cov_(n_cov) {
  switch (cfg.architecture) {
    case Architecture::Linear:
      linear_ = nn::Dense(params_, "linear", n_pert + n_cov, n_genes);
      break;
    case Architecture::LatentAdditive:
      ctrl_ = nn::Mlp(params_, "ctrl", n_genes, cfg.latent_dim, without_softplus(cfg.mlp));
      pert_ = nn::Mlp(params_, "pert", n_pert, cfg.latent_dim, without_softplus(cfg.mlp));
      dec_ = nn::Mlp(params_, "dec", cfg.latent_dim, n_genes, cfg.mlp);
      break;
    case Architecture::DecoderOnly: {
      const Index in = cfg.decoder_input == DecoderInput::Pert  ? n_pert
                       : cfg.decoder_input == DecoderInput::Cov ? n_cov
                                                                : n_pert + n_cov;
      if (in == 0) throw Error(ErrorCode::Invalid, "decoder_only input block is empty");
      dec_ = nn::Mlp(params_, "dec", in, n_genes, cfg.mlp);
      break;
    }
  }
}

void BaselineModel::init(Seed seed) {
  Rng rng(seed);
  for (auto& p : params_) {
    p.value.setZero();
    p.grad.setZero();
    p.m.setZero();
    p.v.setZero();
  }
  if (cfg_.architecture == Architecture::Linear) return;
  // LayerNorm gains start at one.
  for (auto& p : params_) {
    if (p.name.ends_with(".gamma")) p.value.setOnes();
  }
  if (cfg_.architecture == Architecture::LatentAdditive) {
    ctrl_.init(params_, rng);
    pert_.init(params_, rng);
  }
  dec_.init(params_, rng);
}

MatrixXd BaselineModel::decoder_input(const Batch& b) const {
  switch (cfg_.decoder_input) {
    case DecoderInput::Pert: return b.pert;
    case DecoderInput::Cov: return b.cov;
    case DecoderInput::PertCov: break;
  }
  MatrixXd x(b.pert.rows() + b.cov.rows(), b.pert.cols());
  x << b.pert, b.cov;
  return x;
}

MatrixXd BaselineModel::forward(const Batch& b, bool training, Rng* rng) {
  switch (cfg_.architecture) {
    case Architecture::Linear: {
      MatrixXd x(b.pert.rows() + b.cov.rows(), b.pert.cols());
      x << b.pert, b.cov;
      return b.control + linear_.forward(params_, x);
    }
    case Architecture::LatentAdditive: {
      pert_mask_ = (b.pert.colwise().squaredNorm().array() > 0.0).cast<double>().matrix();
      const MatrixXd z_ctrl = ctrl_.forward(params_, b.control, training, rng);
      const MatrixXd z_pert = pert_.forward(params_, b.pert, training, rng) * pert_mask_.asDiagonal();
      return dec_.forward(params_, z_ctrl + z_pert, training, rng);
    }
    case Architecture::DecoderOnly:
      return dec_.forward(params_, decoder_input(b), training, rng);
  }
  throw Error(ErrorCode::Invalid, "unknown architecture");
}

void BaselineModel::backward(const MatrixXd& d_out) {
  switch (cfg_.architecture) {
    case Architecture::Linear:
      linear_.backward(params_, d_out);
      return;
    case Architecture::LatentAdditive: {
      const MatrixXd dz = dec_.backward(params_, d_out);
      ctrl_.backward(params_, dz);
      pert_.backward(params_, dz * pert_mask_.asDiagonal());
      return;
    }
    case Architecture::DecoderOnly:
      dec_.backward(params_, d_out);
      return;
  }
}

double mse_loss(const MatrixXd& pred, const MatrixXd& target, MatrixXd* grad) {
  const MatrixXd diff = pred - target;
  const double n = static_cast<double>(diff.size());
  if (grad != nullptr) *grad = (2.0 / n) * diff;
  return diff.squaredNorm() / n;
}

// ---------------------------------------------------------------------------
// Training and prediction

TrainState train_model(const PerturbationDataset& d, const SplitAssignment& split, const ModelConfig& cfg,
                       Warnings* warnings) {
  validate(cfg);
  if (split.labels.size() != static_cast<std::size_t>(d.n_cells())) {
    throw Error(ErrorCode::Dimension, "split does not cover the dataset");
  }
  if (d.meta.value_space != ValueSpace::LogNorm) warn(warnings, "training on a dataset that is not log-normalized");

  TrainState state;
  state.config = cfg;
  state.vocab = OneHotVocab::from_dataset(d);
  state.genes = d.gene_names;
  state.model = BaselineModel(cfg, d.n_genes(), state.vocab.n_perturbations(), state.vocab.n_covariates());
  state.model.init(derive_seed(cfg.seed, {kInit}));
  BaselineModel& model = state.model;

  const auto train_rows = split.rows(SplitLabel::Train);
  if (train_rows.empty()) throw Error(ErrorCode::Empty, "training split is empty");
  const auto controls = controls_by_covariates(d, train_rows);
  if (model.uses_controls()) {
    for (Index r : train_rows) {
      const auto& covs = d.cells[static_cast<std::size_t>(r)].covariates;
      if (!controls.count(covs)) {
        throw Error(ErrorCode::MissingControl,
                    "no training control cells for covariates '" + text::join(covs, "|") + "'");
      }
    }
  }

  // Encodings per distinct condition.
  std::map<Condition, std::size_t> cond_id;
  std::vector<VectorXd> pert_codes, cov_codes;
  std::vector<std::size_t> row_code(static_cast<std::size_t>(d.n_cells()));
  for (Index r : train_rows) {
    const auto& c = d.cells[static_cast<std::size_t>(r)];
    auto [it, inserted] = cond_id.try_emplace(c, pert_codes.size());
    if (inserted) {
      pert_codes.push_back(state.vocab.encode_perturbations(c));
      cov_codes.push_back(state.vocab.encode_covariates(c.covariates));
    }
    row_code[static_cast<std::size_t>(r)] = it->second;
  }

  const auto val_conditions = perturbed_conditions(d, split, SplitLabel::Val);
  std::optional<AggregateTable> val_observed;
  if (!val_conditions.empty()) {
    val_observed = observed_aggregates(d, split, SplitLabel::Val);
  } else {
    warn(warnings, "no validation conditions; training runs all epochs without early stopping");
  }

  nn::AdamW opt;
  opt.lr = cfg.lr;
  opt.weight_decay = cfg.weight_decay;
  Rng rng(derive_seed(cfg.seed, {kTrain}));
  std::vector<MatrixXd> best;
  double best_objective = std::numeric_limits<double>::infinity();
  int since_best = 0;
  std::vector<Index> order = train_rows;
  std::vector<Index> paired(order.size());
  const auto bs = static_cast<std::size_t>(cfg.batch_size);

  for (int epoch = 0; epoch < cfg.max_epochs; ++epoch) {
    std::shuffle(order.begin(), order.end(), rng);
    if (model.uses_controls()) {
      for (std::size_t i = 0; i < order.size(); ++i) {
        const auto& pool = controls.at(d.cells[static_cast<std::size_t>(order[i])].covariates);
        paired[i] = pool[std::uniform_int_distribution<std::size_t>(0, pool.size() - 1)(rng)];
      }
    }
    double loss_sum = 0.0;
    for (std::size_t start = 0; start < order.size(); start += bs) {
      const std::size_t n = std::min(bs, order.size() - start);
      const std::span<const Index> rows(order.data() + start, n);
      Batch batch;
      if (model.uses_controls()) batch.control = gather(d, std::span<const Index>(paired.data() + start, n));
      batch.pert.resize(state.vocab.n_perturbations(), static_cast<Index>(n));
      batch.cov.resize(state.vocab.n_covariates(), static_cast<Index>(n));
      for (std::size_t j = 0; j < n; ++j) {
        const auto code = row_code[static_cast<std::size_t>(rows[j])];
        batch.pert.col(static_cast<Index>(j)) = pert_codes[code];
        batch.cov.col(static_cast<Index>(j)) = cov_codes[code];
      }
      const MatrixXd target = gather(d, rows);
      model.params().zero_grad();
      const MatrixXd out = model.forward(batch, true, &rng);
      MatrixXd grad;
      const double loss = mse_loss(out, target, &grad);
      if (!std::isfinite(loss)) {
        throw Error(ErrorCode::NonFinite, "non-finite training loss at epoch " + std::to_string(epoch) + ", batch " +
                                              std::to_string(start / bs) + " (lr " + text::format_double(cfg.lr) + ")");
      }
      model.backward(grad);
      opt.step(model.params());
      loss_sum += loss * static_cast<double>(n);
    }
    state.train_loss.push_back(loss_sum / static_cast<double>(order.size()));

    if (!val_observed) {
      state.val_objective.push_back(std::nan(""));
      state.best_epoch = epoch;
      continue;
    }
    const double obj = objective_on(model, state.vocab, state.genes, d, split, cfg, *val_observed, val_conditions);
    state.val_objective.push_back(obj);
    if (obj < best_objective) {
      best_objective = obj;
      state.best_epoch = epoch;
      since_best = 0;
      best.clear();
      for (const auto& p : model.params()) best.push_back(p.value);
    } else if (++since_best >= cfg.patience) {
      break;
    }
  }
  if (!best.empty()) {
    std::size_t i = 0;
    for (auto& p : model.params()) p.value = best[i++];
  }
  return state;
}

AggregateTable predict(const TrainState& state, const PerturbationDataset& d,
                       const std::vector<CounterfactualRequest>& requests, Index n_controls, Seed seed) {
  BaselineModel model = state.model;
  return predict_with(model, state.vocab, state.genes, d, requests, n_controls, seed);
}

AggregateTable predict_conditions(const TrainState& state, const PerturbationDataset& d,
                                  const std::vector<Condition>& conditions, std::span<const Index> control_rows,
                                  Index n_controls, Seed seed) {
  return predict(state, d, requests_for(d, conditions, control_rows), n_controls, seed);
}

AggregateTable observed_aggregates(const PerturbationDataset& d, const SplitAssignment& split, SplitLabel label) {
  std::vector<Index> rows;
  for (Index r = 0; r < d.n_cells(); ++r) {
    if (split.labels[static_cast<std::size_t>(r)] == label && !d.is_control(r)) rows.push_back(r);
  }
  const auto controls = control_rows_for(d, split, label);
  rows.insert(rows.end(), controls.begin(), controls.end());
  std::sort(rows.begin(), rows.end());
  return compute_logfc(aggregate_means(d, 1, std::span<const Index>(rows)));
}

MetricReport evaluate_split(const TrainState& state, const PerturbationDataset& d, const SplitAssignment& split,
                            SplitLabel label, const MetricConfig& metrics) {
  const auto conditions = perturbed_conditions(d, split, label);
  if (conditions.empty()) throw Error(ErrorCode::Empty, std::string("no perturbed conditions in ") + std::string(to_string(label)));
  const auto controls = control_rows_for(d, split, label);
  const auto preds = predict_conditions(state, d, conditions, controls, state.config.n_controls,
                                        derive_seed(state.config.seed, {kPredict}));
  auto report = evaluate(preds, observed_aggregates(d, split, label), metrics);
  report.provenance.emplace_back("model", std::string(to_string(state.config.architecture)));
  if (state.config.architecture == Architecture::DecoderOnly) {
    report.provenance.emplace_back("decoder_input", std::string(to_string(state.config.decoder_input)));
    report.provenance.emplace_back("logfc_reference", "observed control means");
  }
  report.provenance.emplace_back("seed", std::to_string(state.config.seed));
  report.provenance.emplace_back("split", std::string(to_string(label)));
  report.provenance.emplace_back("best_epoch", std::to_string(state.best_epoch));
  return report;
}

// ---------------------------------------------------------------------------
// Archive

static_assert(std::endian::native == std::endian::little, "params.bin is written in host byte order");

namespace {

std::map<std::string, std::string> config_entries(const ModelConfig& c) {
  return {
      {"architecture", std::string(to_string(c.architecture))},
      {"decoder_input", std::string(to_string(c.decoder_input))},
      {"latent_dim", std::to_string(c.latent_dim)},
      {"n_layers", std::to_string(c.mlp.n_layers)},
      {"hidden_width", std::to_string(c.mlp.hidden_width)},
      {"dropout", text::format_double(c.mlp.dropout)},
      {"layer_norm", c.mlp.layer_norm ? "true" : "false"},
      {"softplus_output", c.mlp.softplus_output ? "true" : "false"},
      {"lr", text::format_double(c.lr)},
      {"weight_decay", text::format_double(c.weight_decay)},
      {"batch_size", std::to_string(c.batch_size)},
      {"max_epochs", std::to_string(c.max_epochs)},
      {"patience", std::to_string(c.patience)},
      {"n_controls", std::to_string(c.n_controls)},
      {"seed", std::to_string(c.seed)},
  };
}

bool parse_bool(const std::string& v, const std::string& key) {
  if (v == "true") return true;
  if (v == "false") return false;
  throw Error(ErrorCode::Format, "config.tsv: '" + key + "' must be true or false");
}

}  // namespace

void save_model(const TrainState& state, const std::filesystem::path& dir) {
  std::filesystem::create_directories(dir);
  std::string cfg;
  for (const auto& [k, v] : config_entries(state.config)) cfg += k + '\t' + v + '\n';
  cfg += "best_epoch\t" + std::to_string(state.best_epoch) + '\n';
  text::write_file(dir / "config.tsv", cfg);
  state.vocab.save(dir / "vocab.tsv");
  text::write_file(dir / "genes.tsv", "gene_name\n" + text::join(state.genes, "\n") + '\n');

  std::string trace = "epoch\ttrain_loss\tval_objective\n";
  for (std::size_t e = 0; e < state.train_loss.size(); ++e) {
    const double v = e < state.val_objective.size() ? state.val_objective[e] : std::nan("");
    trace += std::to_string(e) + '\t' + text::format_double(state.train_loss[e]) + '\t' +
             (std::isnan(v) ? "NA" : text::format_double(v)) + '\n';
  }
  text::write_file(dir / "trace.tsv", trace);

  std::string idx;
  std::string bin;
  for (const auto& p : state.model.params()) {
    idx += p.name + '\t' + std::to_string(p.value.rows()) + '\t' + std::to_string(p.value.cols()) + '\n';
    bin.append(reinterpret_cast<const char*>(p.value.data()), static_cast<std::size_t>(p.value.size()) * sizeof(double));
  }
  text::write_file(dir / "params.idx", idx);
  text::write_file(dir / "params.bin", bin);
}

TrainState load_model(const std::filesystem::path& dir) {
  std::map<std::string, std::string> kv;
  for (const auto& line : text::read_lines(dir / "config.tsv")) {
    if (line.empty()) continue;
    const auto f = text::split(line, '\t');
    if (f.size() != 2) throw Error(ErrorCode::Format, "config.tsv: bad line '" + line + "'");
    kv[f[0]] = f[1];
  }
  auto get = [&](const std::string& k) -> const std::string& {
    const auto it = kv.find(k);
    if (it == kv.end()) throw Error(ErrorCode::Format, "config.tsv: missing '" + k + "'");
    return it->second;
  };
  TrainState s;
  ModelConfig& c = s.config;
  c.architecture = parse_architecture(get("architecture"));
  c.decoder_input = parse_decoder_input(get("decoder_input"));
  c.latent_dim = text::parse_int(get("latent_dim"), "latent_dim");
  c.mlp.n_layers = static_cast<int>(text::parse_int(get("n_layers"), "n_layers"));
  c.mlp.hidden_width = text::parse_int(get("hidden_width"), "hidden_width");
  c.mlp.dropout = text::parse_double(get("dropout"), "dropout");
  c.mlp.layer_norm = parse_bool(get("layer_norm"), "layer_norm");
  c.mlp.softplus_output = parse_bool(get("softplus_output"), "softplus_output");
  c.lr = text::parse_double(get("lr"), "lr");
  c.weight_decay = text::parse_double(get("weight_decay"), "weight_decay");
  c.batch_size = text::parse_int(get("batch_size"), "batch_size");
  c.max_epochs = static_cast<int>(text::parse_int(get("max_epochs"), "max_epochs"));
  c.patience = static_cast<int>(text::parse_int(get("patience"), "patience"));
  c.n_controls = text::parse_int(get("n_controls"), "n_controls");
  c.seed = static_cast<Seed>(std::stoull(get("seed")));
  s.best_epoch = static_cast<int>(text::parse_int(get("best_epoch"), "best_epoch"));

  s.vocab = OneHotVocab::load(dir / "vocab.tsv");
  const auto gene_lines = text::read_lines(dir / "genes.tsv");
  if (gene_lines.empty() || gene_lines[0] != "gene_name") throw Error(ErrorCode::Format, "genes.tsv: bad header");
  for (std::size_t i = 1; i < gene_lines.size(); ++i) {
    if (!gene_lines[i].empty()) s.genes.push_back(gene_lines[i]);
  }
  s.model = BaselineModel(c, static_cast<Index>(s.genes.size()), s.vocab.n_perturbations(), s.vocab.n_covariates());

  std::ifstream bin(dir / "params.bin", std::ios::binary);
  if (!bin) throw Error(ErrorCode::Io, "cannot open " + (dir / "params.bin").string());
  const auto idx = text::read_lines(dir / "params.idx");
  std::size_t i = 0;
  for (auto& p : s.model.params()) {
    if (i >= idx.size()) throw Error(ErrorCode::Format, "params.idx: fewer tensors than the model has");
    const auto f = text::split(idx[i++], '\t');
    if (f.size() != 3 || f[0] != p.name || text::parse_int(f[1], "rows") != p.value.rows() ||
        text::parse_int(f[2], "cols") != p.value.cols()) {
      throw Error(ErrorCode::Format, "params.idx: entry " + std::to_string(i) + " does not match tensor '" + p.name + "'");
    }
    bin.read(reinterpret_cast<char*>(p.value.data()), static_cast<std::streamsize>(p.value.size() * sizeof(double)));
    if (!bin) throw Error(ErrorCode::Format, "params.bin: truncated at tensor '" + p.name + "'");
  }
  if (i != idx.size() && !(i + 1 == idx.size() && idx[i].empty())) {
    throw Error(ErrorCode::Format, "params.idx: more tensors than the model has");
  }
  return s;
}

// ---------------------------------------------------------------------------
// Search

SearchSpace default_search_space(Architecture a) {
  using K = SearchDimension::Kind;
  const SearchDimension lr{"lr", K::LogFloat, 5e-6, 5e-3, 0.0, {}};
  const SearchDimension wd{"wd", K::LogFloat, 1e-8, 1e-3, 0.0, {}};
  const SearchDimension layers{"n_layers", K::Int, 1, 7, 2, {}};
  const SearchDimension width{"encoder_width", K::Int, 256, 5376, 1024, {}};
  switch (a) {
    case Architecture::Linear: return {lr, wd};
    case Architecture::LatentAdditive:
      return {layers, width, {"latent_dim", K::Categorical, 0, 0, 0, {64, 128, 192, 256, 512}}, lr, wd,
              {"dropout", K::Float, 0.0, 0.8, 0.1, {}}};
    case Architecture::DecoderOnly:
      return {layers, width, lr, wd, {"softplus_output", K::Categorical, 0, 0, 0, {1, 0}}};
  }
  return {};
}

void check_search_space(const SearchSpace& space, Architecture a) {
  const auto defaults = default_search_space(a);
  constexpr double kTol = 1e-12;
  for (const auto& dim : space) {
    const auto it = std::find_if(defaults.begin(), defaults.end(), [&](const auto& d) { return d.name == dim.name; });
    if (it == defaults.end()) {
      throw Error(ErrorCode::Config, "'" + dim.name + "' is not searched for " + std::string(to_string(a)));
    }
    if (dim.kind != it->kind) throw Error(ErrorCode::Config, "'" + dim.name + "' has the wrong distribution kind");
    if (dim.kind == SearchDimension::Kind::Categorical) {
      if (dim.choices.empty()) throw Error(ErrorCode::Config, "'" + dim.name + "' has no choices");
      for (double c : dim.choices) {
        if (std::find(it->choices.begin(), it->choices.end(), c) == it->choices.end()) {
          throw Error(ErrorCode::Config, "'" + dim.name + "' choice " + text::format_double(c) + " is outside the published set");
        }
      }
      continue;
    }
    if (dim.low > dim.high) throw Error(ErrorCode::Config, "'" + dim.name + "' has low > high");
    if (dim.low < it->low * (1 - kTol) - kTol || dim.high > it->high * (1 + kTol) + kTol) {
      throw Error(ErrorCode::Config, "'" + dim.name + "' range [" + text::format_double(dim.low) + ", " +
                                         text::format_double(dim.high) + "] exceeds the published bounds");
    }
  }
}

double sample_dimension(const SearchDimension& dim, Rng& rng) {
  using K = SearchDimension::Kind;
  switch (dim.kind) {
    case K::LogFloat:
      if (dim.low == dim.high) return dim.low;
      return std::exp(std::uniform_real_distribution<double>(std::log(dim.low), std::log(dim.high))(rng));
    case K::Float:
    case K::Int: {
      const double step = dim.step > 0 ? dim.step : (dim.kind == K::Int ? 1.0 : 0.0);
      if (step == 0.0) {
        if (dim.low == dim.high) return dim.low;
        return std::uniform_real_distribution<double>(dim.low, dim.high)(rng);
      }
      const auto n = static_cast<long long>(std::floor((dim.high - dim.low) / step + 1e-9));
      const auto k = std::uniform_int_distribution<long long>(0, n)(rng);
      return dim.low + static_cast<double>(k) * step;
    }
    case K::Categorical:
      return dim.choices[std::uniform_int_distribution<std::size_t>(0, dim.choices.size() - 1)(rng)];
  }
  return dim.low;
}

ModelConfig apply_hyperparameters(ModelConfig cfg, const std::map<std::string, double>& values) {
  for (const auto& [k, v] : values) {
    if (k == "lr") cfg.lr = v;
    else if (k == "wd") cfg.weight_decay = v;
    else if (k == "n_layers") cfg.mlp.n_layers = static_cast<int>(std::llround(v));
    else if (k == "encoder_width") cfg.mlp.hidden_width = std::llround(v);
    else if (k == "latent_dim") cfg.latent_dim = std::llround(v);
    else if (k == "dropout") cfg.mlp.dropout = v;
    else if (k == "softplus_output") cfg.mlp.softplus_output = v != 0.0;
    else throw Error(ErrorCode::Config, "unknown hyperparameter '" + k + "'");
  }
  return cfg;
}

HpoResult hpo_search(const PerturbationDataset& d, const SplitAssignment& split, const ModelConfig& base,
                     const SearchSpace& space, int n_trials, Seed seed, int threads) {
  if (n_trials < 1) throw Error(ErrorCode::Invalid, "n_trials must be >= 1");
  check_search_space(space, base.architecture);
  const auto val_conditions = perturbed_conditions(d, split, SplitLabel::Val);
  if (val_conditions.empty()) throw Error(ErrorCode::Empty, "hyperparameter search needs validation conditions");
  const auto observed = observed_aggregates(d, split, SplitLabel::Val);

  // Sampling happens up front so trial contents do not depend on scheduling.
  std::vector<HpoTrial> trials(static_cast<std::size_t>(n_trials));
  Rng rng(seed);
  for (int i = 0; i < n_trials; ++i) {
    auto& t = trials[static_cast<std::size_t>(i)];
    t.index = i;
    for (const auto& dim : space) t.params[dim.name] = sample_dimension(dim, rng);
    t.seed = derive_seed(seed, {kTrial, static_cast<std::uint64_t>(i)});
    t.config = apply_hyperparameters(base, t.params);
    t.config.seed = t.seed;
  }

  std::mutex ledger;
  std::atomic<int> next{0};
  auto worker = [&] {
    for (int i = next++; i < n_trials; i = next++) {
      const auto cfg = trials[static_cast<std::size_t>(i)].config;
      double objective = std::nan("");
      std::string status = "ok";
      try {
        TrainState st = train_model(d, split, cfg);
        objective = objective_on(st.model, st.vocab, st.genes, d, split, cfg, observed, val_conditions);
      } catch (const std::exception& e) {
        status = std::string("failed: ") + e.what();
      }
      std::lock_guard lock(ledger);
      trials[static_cast<std::size_t>(i)].objective = objective;
      trials[static_cast<std::size_t>(i)].status = status;
    }
  };
  const int n_threads = std::max(1, std::min(threads, n_trials));
  if (n_threads == 1) {
    worker();
  } else {
    std::vector<std::jthread> pool;
    for (int t = 0; t < n_threads; ++t) pool.emplace_back(worker);
  }

  HpoResult result;
  result.trials = std::move(trials);
  bool found = false;
  for (std::size_t i = 0; i < result.trials.size(); ++i) {
    const auto& t = result.trials[i];
    if (t.status != "ok") continue;
    if (!found || t.objective < result.trials[result.best_index].objective) {
      result.best_index = i;
      found = true;
    }
  }
  if (!found) throw Error(ErrorCode::Unsatisfiable, "all " + std::to_string(n_trials) + " trials failed");
  result.best = result.trials[result.best_index].config;
  return result;
}

void write_trials(const std::vector<HpoTrial>& trials, const std::filesystem::path& path) {
  std::vector<std::string> names;
  if (!trials.empty()) {
    for (const auto& [k, v] : trials.front().params) names.push_back(k);
  }
  std::string s = "trial\tseed\tstatus\tobjective";
  for (const auto& n : names) s += '\t' + n;
  s += '\n';
  for (const auto& t : trials) {
    s += std::to_string(t.index) + '\t' + std::to_string(t.seed) + '\t' + t.status + '\t' +
         (std::isnan(t.objective) ? "NA" : text::format_double(t.objective));
    for (const auto& n : names) s += '\t' + text::format_double(t.params.at(n));
    s += '\n';
  }
  text::write_file(path, s);
}

StabilityResult stability_reruns(const PerturbationDataset& d, const SplitAssignment& split, const ModelConfig& cfg,
                                 int n_seeds, const std::vector<Seed>& seeds, const MetricConfig& metrics) {
  StabilityResult out;
  out.seeds = seeds;
  if (out.seeds.empty()) {
    for (int i = 0; i < n_seeds; ++i) out.seeds.push_back(derive_seed(cfg.seed, {kRerun, static_cast<std::uint64_t>(i)}));
  }
  if (out.seeds.size() < 2) throw Error(ErrorCode::Invalid, "stability reruns need at least 2 seeds");
  for (Seed s : out.seeds) {
    ModelConfig c = cfg;
    c.seed = s;
    try {
      const auto state = train_model(d, split, c);
      out.runs.push_back(evaluate_split(state, d, split, SplitLabel::Test, metrics));
    } catch (const Error& e) {
      throw Error(e.code(), "seed " + std::to_string(s) + ": " + e.what());
    }
  }
  out.summary = summarize_runs(out.runs);
  return out;
}

}  // namespace pbench
