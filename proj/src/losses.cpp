#include "advdistill/losses.hpp"

#include <cmath>

#include "advdistill/errors.hpp"

namespace advdistill {

std::string to_string(RegularizerKind kind) {
  switch (kind) {
    case RegularizerKind::none: return "none";
    case RegularizerKind::l2: return "l2";
    case RegularizerKind::l1: return "l1";
    case RegularizerKind::adversarial_samples: return "adversarial_samples";
  }
  return "?";
}

RegularizerKind parse_regularizer(const std::string& name) {
  for (auto k : {RegularizerKind::none, RegularizerKind::l2, RegularizerKind::l1, RegularizerKind::adversarial_samples}) {
    if (to_string(k) == name) return k;
  }
  throw ConfigError("unknown regularizer '" + name + "' (expected none, l2, l1 or adversarial_samples)");
}

namespace {

void require_probabilities(const Tensor& d, const char* what) {
  if (d.rank() != 2 || d.dim(1) != 1) {
    throw DimensionError(std::string(what) + ": expected N x 1 probabilities, got " + shape_str(d.shape()));
  }
  for (double v : d.data()) {
    if (!(v >= 0.0 && v <= 1.0)) {
      throw ContractError(std::string(what) + ": discriminator output " + std::to_string(v) + " is not a probability");
    }
  }
}

Tensor clamped(const Tensor& d) { return clamp(d, kProbFloor, 1.0 - kProbFloor); }

}  // namespace

Tensor adv_loss(const Tensor& d_teacher, const Tensor& d_student) {
  require_probabilities(d_teacher, "adv_loss");
  require_probabilities(d_student, "adv_loss");
  Tensor real = mean(log(clamped(d_teacher)));
  Tensor fake = mean(log(add_scalar(neg(clamped(d_student)), 1.0)));
  return add(real, fake);
}

Tensor student_adv_loss(const Tensor& d_student) {
  require_probabilities(d_student, "student_adv_loss");
  return neg(mean(log(clamped(d_student))));
}

Tensor data_loss(const Tensor& teacher_logits, const Tensor& student_logits) {
  if (teacher_logits.shape() != student_logits.shape() || teacher_logits.rank() != 2) {
    throw DimensionError("data_loss: teacher logits " + shape_str(teacher_logits.shape()) + " vs student logits " +
                         shape_str(student_logits.shape()));
  }
  return mean(row_sum(square(sub(student_logits, teacher_logits.detach()))));
}

Tensor d_regularizer(RegularizerKind kind, std::span<const Tensor> d_params, const Tensor& d_on_student, double mu) {
  switch (kind) {
    case RegularizerKind::none:
      return Tensor::scalar(0.0);
    case RegularizerKind::l2:
    case RegularizerKind::l1: {
      if (!(mu >= 0.0)) throw ConfigError("regularizer weight mu must be non-negative");
      Tensor total = Tensor::scalar(0.0);
      for (const auto& w : d_params) total = add(total, sum(kind == RegularizerKind::l2 ? square(w) : abs(w)));
      return scale(total, -mu);
    }
    case RegularizerKind::adversarial_samples:
      require_probabilities(d_on_student, "d_regularizer");
      return mean(log(clamped(d_on_student)));
  }
  throw ConfigError("unknown regularizer kind");
}

Tensor kd_loss(const Tensor& teacher_logits, const Tensor& student_logits, double temperature) {
  if (!(temperature > 0.0)) throw ConfigError("kd_loss: temperature must be positive");
  if (teacher_logits.shape() != student_logits.shape() || teacher_logits.rank() != 2) {
    throw DimensionError("kd_loss: teacher logits " + shape_str(teacher_logits.shape()) + " vs student logits " +
                         shape_str(student_logits.shape()));
  }
  Tensor targets = softmax(teacher_logits.detach(), temperature);
  Tensor cross = neg(mean(row_sum(mul(targets, log_softmax(student_logits, temperature)))));
  return scale(cross, temperature * temperature);
}

Tensor ce_loss(const Tensor& logits, std::span<const int> labels) {
  if (logits.rank() != 2 || logits.dim(0) != labels.size()) {
    throw DimensionError("ce_loss: logits " + shape_str(logits.shape()) + " vs " + std::to_string(labels.size()) +
                         " labels");
  }
  const std::size_t n = logits.dim(0), c = logits.dim(1);
  std::vector<double> onehot(n * c, 0.0);
  for (std::size_t i = 0; i < n; ++i) {
    if (labels[i] < 0 || static_cast<std::size_t>(labels[i]) >= c) {
      throw DataError("ce_loss: label " + std::to_string(labels[i]) + " at row " + std::to_string(i) +
                      " outside [0, " + std::to_string(c) + ")");
    }
    onehot[i * c + static_cast<std::size_t>(labels[i])] = 1.0;
  }
  return neg(mean(row_sum(mul(Tensor({n, c}, std::move(onehot)), log_softmax(logits)))));
}

}  // namespace advdistill
