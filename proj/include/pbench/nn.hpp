#pragma once

// Minimal feed-forward building blocks with hand-written backward passes.
// Activations are feature-major: one column per sample.

#include <deque>
#include <string>
#include <vector>

#include "pbench/random.hpp"
#include "pbench/types.hpp"

namespace pbench::nn {

struct Parameter {
  std::string name;
  MatrixXd value;
  MatrixXd grad;
  MatrixXd m;  // first moment
  MatrixXd v;  // second moment
};

/// Owns every tensor of a model. Layers refer to parameters by index so a
/// model stays copyable.
class ParameterSet {
 public:
  std::size_t add(std::string name, Index rows, Index cols);

  Parameter& operator[](std::size_t i) { return params_[i]; }
  const Parameter& operator[](std::size_t i) const { return params_[i]; }
  std::size_t size() const { return params_.size(); }
  auto begin() { return params_.begin(); }
  auto end() { return params_.end(); }
  auto begin() const { return params_.begin(); }
  auto end() const { return params_.end(); }

  void zero_grad();
  Index total_size() const;

 private:
  std::deque<Parameter> params_;
};

/// AdamW: Adam moments with weight decay applied directly to the weights.
struct AdamW {
  double lr = 1e-3;
  double weight_decay = 0.0;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  long step_count = 0;

  void step(ParameterSet& params);
};

class Dense {
 public:
  Dense() = default;
  Dense(ParameterSet& params, const std::string& name, Index in, Index out);

  /// U(-1/sqrt(in), 1/sqrt(in)) for weights and bias.
  void init_uniform(ParameterSet& params, Rng& rng) const;

  MatrixXd forward(const ParameterSet& params, const MatrixXd& x);
  MatrixXd backward(ParameterSet& params, const MatrixXd& dy);

  std::size_t weight() const { return w_; }
  std::size_t bias() const { return b_; }

 private:
  std::size_t w_ = 0, b_ = 0;
  MatrixXd input_;
};

/// Normalizes each column over features, then scales and shifts.
class LayerNorm {
 public:
  LayerNorm() = default;
  LayerNorm(ParameterSet& params, const std::string& name, Index width);

  MatrixXd forward(const ParameterSet& params, const MatrixXd& x);
  MatrixXd backward(ParameterSet& params, const MatrixXd& dy);

 private:
  static constexpr double kEps = 1e-5;
  std::size_t gamma_ = 0, beta_ = 0;
  MatrixXd xhat_;
  Eigen::RowVectorXd inv_std_;
};

struct MlpSpec {
  /// Hidden blocks (Dense -> LayerNorm -> ReLU -> Dropout) before the output layer.
  int n_layers = 1;
  Index hidden_width = 128;
  double dropout = 0.0;
  bool layer_norm = true;
  bool softplus_output = false;
};

class Mlp {
 public:
  Mlp() = default;
  Mlp(ParameterSet& params, const std::string& name, Index in, Index out, const MlpSpec& spec);

  void init(ParameterSet& params, Rng& rng) const;

  /// `rng` is only used when training with dropout > 0.
  MatrixXd forward(const ParameterSet& params, const MatrixXd& x, bool training, Rng* rng);
  MatrixXd backward(ParameterSet& params, const MatrixXd& dy);

 private:
  struct Block {
    Dense dense;
    LayerNorm norm;
    MatrixXd relu_mask;
    MatrixXd dropout_mask;
  };
  MlpSpec spec_;
  std::vector<Block> blocks_;
  Dense out_;
  MatrixXd pre_softplus_;
};

}  // namespace pbench::nn
