#include "advdistill/optim.hpp"

#include <cmath>

#include "advdistill/errors.hpp"

namespace advdistill {

std::string to_string(OptimizerKind kind) { return kind == OptimizerKind::adam ? "adam" : "sgd_momentum"; }

OptimizerKind parse_optimizer(const std::string& name) {
  if (name == "sgd_momentum" || name == "sgd") return OptimizerKind::sgd_momentum;
  if (name == "adam") return OptimizerKind::adam;
  throw ConfigError("unknown optimizer '" + name + "' (expected sgd_momentum or adam)");
}

void OptimizerConfig::validate() const {
  if (!(learning_rate > 0.0) || !std::isfinite(learning_rate)) throw ConfigError("learning rate must be positive");
  if (!(momentum >= 0.0 && momentum < 1.0)) throw ConfigError("momentum must lie in [0, 1)");
  if (!(weight_decay >= 0.0)) throw ConfigError("weight decay must be non-negative");
  if (!(decay_factor > 0.0)) throw ConfigError("decay factor must be positive");
  if (!(beta1 >= 0.0 && beta1 < 1.0) || !(beta2 >= 0.0 && beta2 < 1.0)) throw ConfigError("adam betas must lie in [0, 1)");
  if (!(epsilon > 0.0)) throw ConfigError("adam epsilon must be positive");
}

Optimizer::Optimizer(OptimizerConfig config, std::vector<Tensor> params)
    : config_(config), params_(std::move(params)) {
  config_.validate();
  for (const auto& p : params_) {
    first_.emplace_back(p.numel(), 0.0);
    if (config_.kind == OptimizerKind::adam) second_.emplace_back(p.numel(), 0.0);
  }
}

double Optimizer::current_lr() const {
  const bool decayed = config_.decay_step > 0 && steps_ >= config_.decay_step;
  return decayed ? config_.learning_rate * config_.decay_factor : config_.learning_rate;
}

void Optimizer::step() {
  const double lr = current_lr();
  const double wd = config_.weight_decay;
  const auto t = static_cast<double>(steps_ + 1);
  for (std::size_t i = 0; i < params_.size(); ++i) {
    auto& p = params_[i];
    if (!p.has_grad()) continue;
    auto w = p.mutable_data();
    const auto g = p.grad();
    auto& v = first_[i];
    if (config_.kind == OptimizerKind::sgd_momentum) {
      for (std::size_t j = 0; j < w.size(); ++j) {
        v[j] = config_.momentum * v[j] - lr * (g[j] + wd * w[j]);
        w[j] += v[j];
      }
    } else {
      auto& s = second_[i];
      const double c1 = 1.0 - std::pow(config_.beta1, t);
      const double c2 = 1.0 - std::pow(config_.beta2, t);
      for (std::size_t j = 0; j < w.size(); ++j) {
        const double gj = g[j] + wd * w[j];
        v[j] = config_.beta1 * v[j] + (1.0 - config_.beta1) * gj;
        s[j] = config_.beta2 * s[j] + (1.0 - config_.beta2) * gj * gj;
        w[j] -= lr * (v[j] / c1) / (std::sqrt(s[j] / c2) + config_.epsilon);
      }
    }
  }
  ++steps_;
}

void Optimizer::zero_grad() {
  for (auto& p : params_) p.zero_grad();
}

}  // namespace advdistill
