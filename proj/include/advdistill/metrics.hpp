#pragma once

#include <cstdint>
#include <filesystem>
#include <limits>
#include <ostream>
#include <string>
#include <vector>

#include <json.hpp>

namespace advdistill {

inline constexpr double kMissing = std::numeric_limits<double>::quiet_NaN();

// One optimization step. Loss columns a run does not produce stay NaN and are
// written as empty CSV cells. Baseline runs report their training objective
// in data_loss.
struct StepRecord {
  std::size_t step = 0;
  double lr = 0.0;
  double adv_d = kMissing;
  double adv_student = kMissing;
  double data_loss = kMissing;
  double regul = kMissing;
  double d_accuracy = kMissing;
  double train_err = kMissing;
  double test_err = kMissing;
};

struct EvalRecord {
  std::size_t step = 0;
  double train_err = kMissing;
  double test_err = kMissing;
  // Discriminator accuracy on test-split teacher vs student features.
  double d_heldout_accuracy = kMissing;
  // Mean squared logit distance to the teacher on the test split.
  double test_logit_l2 = kMissing;
};

struct RunMetrics {
  std::string kind;
  std::uint64_t seed = 0;
  nlohmann::json config;
  std::vector<StepRecord> steps;
  std::vector<EvalRecord> evals;
  std::size_t params = 0;
  std::uint64_t flops = 0;
  double final_train_err = kMissing;
  double final_test_err = kMissing;
  double final_test_logit_l2 = kMissing;
};

inline constexpr const char* kCsvHeader = "step,lr,adv_d,adv_student,data_loss,regul,d_accuracy,train_err,test_err";

void write_csv(const RunMetrics& metrics, std::ostream& os);
void write_csv(const RunMetrics& metrics, const std::filesystem::path& path);
nlohmann::json summary_json(const RunMetrics& metrics);
void write_json(const nlohmann::json& j, const std::filesystem::path& path);

double median(std::vector<double> values);

}  // namespace advdistill
