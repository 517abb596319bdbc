#pragma once

#include <span>
#include <string>
#include <vector>

#include "advdistill/tensor.hpp"

namespace advdistill {

// Discriminator probabilities are clamped to [kProbFloor, 1 - kProbFloor]
// before any log.
inline constexpr double kProbFloor = 1e-7;

enum class RegularizerKind { none, l2, l1, adversarial_samples };

std::string to_string(RegularizerKind kind);
RegularizerKind parse_regularizer(const std::string& name);

// Loss values of one compression step.
struct LossBreakdown {
  // Adversarial objective on true labels, as maximized by D.
  double adv_d = 0.0;
  // Student's inverted-label term.
  double adv_student = 0.0;
  // Squared logit distance.
  double data = 0.0;
  // Discriminator regularizer value.
  double regul = 0.0;
  // Objective maximized in the D phase: adv_d + regul.
  double total_d = 0.0;
  // Objective minimized in the student phase: adv_student + lambda * data.
  double total_student = 0.0;
  // Fraction of the D-phase batch D classified correctly.
  double d_accuracy = 0.0;
};

// mean(log D(teacher)) + mean(log(1 - D(student))). D maximizes this.
Tensor adv_loss(const Tensor& d_teacher, const Tensor& d_student);

// -mean(log D(student)): the student's loss with its samples labeled teacher.
Tensor student_adv_loss(const Tensor& d_student);

// mean over rows of ||teacher - student||^2. The teacher side is detached.
Tensor data_loss(const Tensor& teacher_logits, const Tensor& student_logits);

// Term added to D's maximization objective:
//   l2: -mu * sum w^2    l1: -mu * sum |w|
//   adversarial_samples: mean(log D(student))    none: 0
Tensor d_regularizer(RegularizerKind kind, std::span<const Tensor> d_params, const Tensor& d_on_student, double mu);

// T^2 * mean over rows of the cross-entropy between softmax(teacher / T) and
// softmax(student / T). The teacher side is detached.
Tensor kd_loss(const Tensor& teacher_logits, const Tensor& student_logits, double temperature);

// Mean negative log-likelihood of the true class.
Tensor ce_loss(const Tensor& logits, std::span<const int> labels);

}  // namespace advdistill
