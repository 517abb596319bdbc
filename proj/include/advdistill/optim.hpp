#pragma once

#include <cstddef>
#include <string>
#include <vector>

#include "advdistill/tensor.hpp"

namespace advdistill {

enum class OptimizerKind { sgd_momentum, adam };

std::string to_string(OptimizerKind kind);
OptimizerKind parse_optimizer(const std::string& name);

struct OptimizerConfig {
  OptimizerKind kind = OptimizerKind::sgd_momentum;
  double learning_rate = 0.001;
  double momentum = 0.9;
  double weight_decay = 0.0002;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
  // Step index at which the rate is multiplied by decay_factor; 0 = never.
  std::size_t decay_step = 0;
  double decay_factor = 0.1;

  void validate() const;
};

// Updates a fixed list of parameter tensors in place.
//   sgd_momentum: v <- m*v - lr*(g + wd*w);  w <- w + v
//   adam: g' = g + wd*w, bias-corrected first/second moments.
class Optimizer {
 public:
  Optimizer(OptimizerConfig config, std::vector<Tensor> params);

  // Applies one update from the current gradients, then advances the step
  // counter. Parameters without a gradient buffer are skipped.
  void step();
  void zero_grad();

  double current_lr() const;
  std::size_t steps_taken() const { return steps_; }
  const OptimizerConfig& config() const { return config_; }
  const std::vector<std::vector<double>>& velocity() const { return first_; }

 private:
  OptimizerConfig config_;
  std::vector<Tensor> params_;
  std::vector<std::vector<double>> first_;
  std::vector<std::vector<double>> second_;
  std::size_t steps_ = 0;
};

}  // namespace advdistill
