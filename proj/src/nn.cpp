#include "pbench/nn.hpp"

#include <cmath>

namespace pbench::nn {

std::size_t ParameterSet::add(std::string name, Index rows, Index cols) {
  Parameter p;
  p.name = std::move(name);
  p.value = MatrixXd::Zero(rows, cols);
  p.grad = MatrixXd::Zero(rows, cols);
  p.m = MatrixXd::Zero(rows, cols);
  p.v = MatrixXd::Zero(rows, cols);
  params_.push_back(std::move(p));
  return params_.size() - 1;
}

void ParameterSet::zero_grad() {
  for (auto& p : params_) p.grad.setZero();
}

Index ParameterSet::total_size() const {
  Index n = 0;
  for (const auto& p : params_) n += p.value.size();
  return n;
}

void AdamW::step(ParameterSet& params) {
  ++step_count;
  const double bc1 = 1.0 - std::pow(beta1, static_cast<double>(step_count));
  const double bc2 = 1.0 - std::pow(beta2, static_cast<double>(step_count));
  for (auto& p : params) {
    if (weight_decay > 0.0) p.value *= (1.0 - lr * weight_decay);
    p.m = beta1 * p.m + (1.0 - beta1) * p.grad;
    p.v = beta2 * p.v + (1.0 - beta2) * p.grad.cwiseAbs2();
    p.value.array() -= lr * (p.m.array() / bc1) / ((p.v.array() / bc2).sqrt() + eps);
  }
}

Dense::Dense(ParameterSet& params, const std::string& name, Index in, Index out)
    : w_(params.add(name + ".weight", out, in)), b_(params.add(name + ".bias", out, 1)) {}

void Dense::init_uniform(ParameterSet& params, Rng& rng) const {
  const double bound = 1.0 / std::sqrt(static_cast<double>(params[w_].value.cols()));
  std::uniform_real_distribution<double> u(-bound, bound);
  for (auto id : {w_, b_}) {
    auto& v = params[id].value;
    for (Index j = 0; j < v.cols(); ++j) {
      for (Index i = 0; i < v.rows(); ++i) v(i, j) = u(rng);
    }
  }
}

MatrixXd Dense::forward(const ParameterSet& params, const MatrixXd& x) {
  input_ = x;
  MatrixXd y = params[w_].value * x;
  y.colwise() += params[b_].value.col(0);
  return y;
}

MatrixXd Dense::backward(ParameterSet& params, const MatrixXd& dy) {
  params[w_].grad.noalias() += dy * input_.transpose();
  params[b_].grad.col(0) += dy.rowwise().sum();
  return params[w_].value.transpose() * dy;
}

LayerNorm::LayerNorm(ParameterSet& params, const std::string& name, Index width)
    : gamma_(params.add(name + ".gamma", width, 1)), beta_(params.add(name + ".beta", width, 1)) {
  params[gamma_].value.setOnes();
}

MatrixXd LayerNorm::forward(const ParameterSet& params, const MatrixXd& x) {
  const double n = static_cast<double>(x.rows());
  const Eigen::RowVectorXd mean = x.colwise().sum() / n;
  MatrixXd centered = x.rowwise() - mean;
  const Eigen::RowVectorXd var = centered.cwiseAbs2().colwise().sum() / n;
  inv_std_ = (var.array() + kEps).rsqrt().matrix();
  xhat_ = centered * inv_std_.asDiagonal();
  MatrixXd y = params[gamma_].value.col(0).asDiagonal() * xhat_;
  y.colwise() += params[beta_].value.col(0);
  return y;
}

MatrixXd LayerNorm::backward(ParameterSet& params, const MatrixXd& dy) {
  const double n = static_cast<double>(dy.rows());
  params[gamma_].grad.col(0) += (dy.cwiseProduct(xhat_)).rowwise().sum();
  params[beta_].grad.col(0) += dy.rowwise().sum();
  const MatrixXd dxhat = params[gamma_].value.col(0).asDiagonal() * dy;
  const Eigen::RowVectorXd sum_dxhat = dxhat.colwise().sum();
  const Eigen::RowVectorXd sum_dxhat_xhat = dxhat.cwiseProduct(xhat_).colwise().sum();
  MatrixXd dx = (n * dxhat).rowwise() - sum_dxhat;
  dx -= xhat_ * sum_dxhat_xhat.asDiagonal();
  return dx * (inv_std_ / n).asDiagonal();
}

Mlp::Mlp(ParameterSet& params, const std::string& name, Index in, Index out, const MlpSpec& spec) : spec_(spec) {
  Index width = in;
  for (int l = 0; l < spec.n_layers; ++l) {
    Block b;
    const auto prefix = name + ".layer" + std::to_string(l);
    b.dense = Dense(params, prefix, width, spec.hidden_width);
    if (spec.layer_norm) b.norm = LayerNorm(params, prefix + ".norm", spec.hidden_width);
    blocks_.push_back(std::move(b));
    width = spec.hidden_width;
  }
  out_ = Dense(params, name + ".out", width, out);
}

void Mlp::init(ParameterSet& params, Rng& rng) const {
  for (const auto& b : blocks_) b.dense.init_uniform(params, rng);
  out_.init_uniform(params, rng);
}

MatrixXd Mlp::forward(const ParameterSet& params, const MatrixXd& x, bool training, Rng* rng) {
  MatrixXd h = x;
  const bool use_dropout = training && spec_.dropout > 0.0;
  for (auto& b : blocks_) {
    h = b.dense.forward(params, h);
    if (spec_.layer_norm) h = b.norm.forward(params, h);
    b.relu_mask = (h.array() > 0.0).cast<double>().matrix();
    h = h.cwiseProduct(b.relu_mask);
    if (use_dropout) {
      std::bernoulli_distribution keep(1.0 - spec_.dropout);
      b.dropout_mask.resize(h.rows(), h.cols());
      const double scale = 1.0 / (1.0 - spec_.dropout);
      for (Index j = 0; j < h.cols(); ++j) {
        for (Index i = 0; i < h.rows(); ++i) b.dropout_mask(i, j) = keep(*rng) ? scale : 0.0;
      }
      h = h.cwiseProduct(b.dropout_mask);
    } else {
      b.dropout_mask.resize(0, 0);
    }
  }
  MatrixXd y = out_.forward(params, h);
  if (spec_.softplus_output) {
    pre_softplus_ = y;
    y = y.unaryExpr([](double v) { return v > 30.0 ? v : std::log1p(std::exp(v)); });
  }
  return y;
}

MatrixXd Mlp::backward(ParameterSet& params, const MatrixXd& dy) {
  MatrixXd g = dy;
  if (spec_.softplus_output) {
    g = g.cwiseProduct(pre_softplus_.unaryExpr([](double v) { return 1.0 / (1.0 + std::exp(-v)); }));
  }
  g = out_.backward(params, g);
  for (auto it = blocks_.rbegin(); it != blocks_.rend(); ++it) {
    if (it->dropout_mask.size() > 0) g = g.cwiseProduct(it->dropout_mask);
    g = g.cwiseProduct(it->relu_mask);
    if (spec_.layer_norm) g = it->norm.backward(params, g);
    g = it->dense.backward(params, g);
  }
  return g;
}

}  // namespace pbench::nn
