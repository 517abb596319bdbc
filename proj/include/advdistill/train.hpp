#pragma once

#include <cstdint>
#include <filesystem>
#include <random>
#include <string>

#include <json.hpp>

#include "advdistill/data.hpp"
#include "advdistill/losses.hpp"
#include "advdistill/metrics.hpp"
#include "advdistill/nn.hpp"
#include "advdistill/optim.hpp"

namespace advdistill {

enum class DInput { features, logits };

std::string to_string(DInput input);
DInput parse_d_input(const std::string& name);

// Settings shared by every training loop.
struct TrainConfig {
  OptimizerConfig optimizer;
  std::size_t batch_size = 128;
  std::size_t total_steps = 2000;
  // The learning rate drops by decay_factor after this fraction of the steps.
  double decay_fraction = 0.4;
  std::uint64_t seed = 1;
  // Evaluate every this many steps (0: only at the end).
  std::size_t eval_every = 0;
  bool augment = false;
  AugmentPolicy augment_policy;

  void validate() const;
  // Optimizer settings with the decay step resolved for total_steps.
  OptimizerConfig scheduled_optimizer() const;
};

struct CompressionConfig {
  TrainConfig train;
  // Discriminator optimizer; the decay schedule of `train` applies to it too.
  OptimizerConfig d_optimizer;
  // Weight of the data term in the student objective.
  double lambda = 1.0;
  // Weight of the l1/l2 discriminator regularizers.
  double mu = 0.99;
  RegularizerKind regularizer = RegularizerKind::adversarial_samples;
  DInput d_input = DInput::features;
  double dropout_rate = 0.5;
  // Dropout on the student's D-input branch during the student update.
  bool student_dropout = true;
  // Dropout on the adversarial sample fed to D by the adversarial_samples regularizer.
  bool adv_sample_dropout = true;
  // D updates per student update.
  std::size_t d_steps = 1;

  void validate() const;
};

nlohmann::json to_json(const OptimizerConfig& c);
nlohmann::json to_json(const TrainConfig& c);
nlohmann::json to_json(const CompressionConfig& c);

// Dropout modes used on the discriminator inputs during one step.
struct PhaseTrace {
  // Student sample D sees with its true label in the D phase.
  Mode true_sample = Mode::eval;
  // Adversarial sample of the adversarial_samples regularizer in the D phase.
  Mode adversarial_sample = Mode::eval;
  // Student branch in the student phase.
  Mode student_branch = Mode::eval;
  bool adversarial_sample_used = false;
};

// Test hook called between the phases of compress_step.
class StepObserver {
 public:
  virtual ~StepObserver() = default;
  virtual void after_d_phase(const PhaseTrace&) {}
  virtual void after_student_phase(const PhaseTrace&) {}
};

// One alternating update: D phase(s) maximizing adv + regul over w_D, then a
// student phase minimizing student_adv + lambda * data over w_s. The teacher
// must be frozen; batch labels are never read.
LossBreakdown compress_step(const Network& teacher, Network& student, Network& discriminator, const BatchRecord& batch,
                            const CompressionConfig& cfg, Optimizer& student_opt, Optimizer& d_opt,
                            std::mt19937_64& rng, StepObserver* observer = nullptr);

// Classification error of argmax logits, eval mode.
double error_rate(const Network& net, const Dataset& ds);
// Fraction of samples where two networks' argmax predictions differ.
double disagreement(const Network& a, const Network& b, const Dataset& ds);
// Mean squared logit distance between two networks over a dataset.
double mean_logit_l2(const Network& teacher, const Network& student, const Dataset& ds);
// Accuracy of D separating teacher (label 1) from student (label 0) samples.
double discriminator_accuracy(const Network& teacher, const Network& student, const Network& discriminator,
                              const Dataset& ds, DInput input);

struct TrainResult {
  Network network;
  RunMetrics metrics;
};

struct CompressionResult {
  Network student;
  Network discriminator;
  RunMetrics metrics;
};

// Supervised cross-entropy training from a fresh initialization.
TrainResult train_teacher(const NetworkSpec& spec, const Dataset& train, const Dataset& test, const TrainConfig& cfg);

CompressionResult run_compression(const Network& teacher, const NetworkSpec& student_spec, const NetworkSpec& d_spec,
                                  const Dataset& train, const Dataset& test, const CompressionConfig& cfg,
                                  StepObserver* observer = nullptr);
CompressionResult run_compression(const std::filesystem::path& teacher_checkpoint, const NetworkSpec& student_spec,
                                  const NetworkSpec& d_spec, const Dataset& train, const Dataset& test,
                                  const CompressionConfig& cfg);

enum class BaselineKind { supervised, l2_logits, kd };

std::string to_string(BaselineKind kind);
BaselineKind parse_baseline(const std::string& name);

// supervised: ce on labels (teacher unused). l2_logits: data_loss against the
// teacher. kd: kd_loss at `temperature`, no label term.
TrainResult run_baseline(BaselineKind kind, const Network* teacher, const NetworkSpec& student_spec,
                         const Dataset& train, const Dataset& test, const TrainConfig& cfg, double temperature = 4.0);

// Discriminator spec matching what compression feeds it.
NetworkSpec discriminator_for(const Network& teacher, const NetworkSpec& student_spec, DInput input,
                              const std::vector<std::size_t>& hidden);

}  // namespace advdistill
