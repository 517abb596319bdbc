#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <iosfwd>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "advdistill/data.hpp"
#include "advdistill/train.hpp"

namespace advdistill {

struct DataConfig {
  // blobs | idx | manifest
  std::string source = "blobs";
  std::size_t classes = 4;
  std::size_t dims = 8;
  std::size_t train_per_class = 500;
  std::size_t test_per_class = 250;
  double separation = 3.0;
  std::uint64_t seed = 1;
  std::filesystem::path manifest;
  std::filesystem::path train_images, train_labels, test_images, test_labels;
  bool normalize = true;
  // auto | true | false. auto augments spatial inputs only.
  std::string augment = "auto";
  AugmentPolicy augment_policy;
};

struct TeacherConfig {
  std::string preset = "teacher-mlp";
  // When empty, every seed trains its own teacher with that seed.
  std::filesystem::path checkpoint;
  TrainConfig train;
};

inline const std::vector<std::string> kCompareMethods = {"supervised_teacher", "supervised_student", "l2_logits", "kd",
                                                         "adversarial"};

struct ExperimentConfig {
  // Directory relative paths resolve against when ADVDISTILL_DATA_DIR is unset.
  std::filesystem::path base_dir = ".";
  DataConfig data;
  TeacherConfig teacher;
  std::string student_preset = "student-mlp";
  // compression.train drives every student run, baselines included.
  CompressionConfig compression;
  std::vector<std::size_t> d_hidden = default_discriminator_hidden();
  BaselineKind baseline = BaselineKind::supervised;
  double temperature = 4.0;
  std::vector<std::uint64_t> seeds = {1};
  std::vector<std::vector<std::size_t>> sweep_candidates;
  std::vector<std::string> compare_methods = kCompareMethods;
  // Method that throws on start; exercises abort handling.
  std::string fail_method;
  // Restricts fail_method to one seed; 0 fails every seed.
  std::uint64_t fail_seed = 0;
};

// INI-style text: [section] headers, key = value lines, '#' or ';' comments.
// Errors are ConfigError messages carrying `origin` and the line number.
ExperimentConfig parse_config(const std::string& text, const std::string& origin = "<config>");
ExperimentConfig load_config(const std::filesystem::path& path);
nlohmann::json to_json(const ExperimentConfig& cfg);

// "1-3,7" -> {1, 2, 3, 7}
std::vector<std::uint64_t> parse_seed_list(const std::string& text);

struct DataBundle {
  Dataset train;
  Dataset test;
};

// Relative paths resolve against $ADVDISTILL_DATA_DIR, else cfg.base_dir.
DataBundle load_data(const ExperimentConfig& cfg);
std::filesystem::path resolve_data_path(const ExperimentConfig& cfg, const std::filesystem::path& p);

struct CommandOptions {
  std::filesystem::path out = "runs";
  bool overwrite = false;
  std::size_t jobs = 1;
  bool quiet = false;
  std::filesystem::path checkpoint;
};

// <out>/<command>-<timestamp>[-n], or <out>/<command> wiped when overwriting.
std::filesystem::path prepare_output_dir(const std::filesystem::path& out, const std::string& command, bool overwrite);

// Runs task(0..count-1) on up to `jobs` threads. Tasks must not throw.
void run_parallel(std::size_t count, std::size_t jobs, const std::function<void(std::size_t)>& task);

struct RunOutcome {
  std::string method;
  std::uint64_t seed = 0;
  bool aborted = false;
  std::string error;
  RunMetrics metrics;
};

struct TableRow {
  std::string method;
  double median_test_err = kMissing;
  std::size_t params = 0;
  std::uint64_t flops = 0;
  std::vector<RunOutcome> runs;
  std::size_t aborted() const;
};

std::string markdown_table(const std::vector<TableRow>& rows);
std::string csv_table(const std::vector<TableRow>& rows);
std::string seeds_csv(const std::vector<TableRow>& rows);

// Each returns the process exit status: 0 when every run finished, 1 when any
// aborted. Configuration problems throw ConfigError.
int cmd_train_teacher(const ExperimentConfig& cfg, const CommandOptions& opts, std::ostream& out);
int cmd_compress(const ExperimentConfig& cfg, const CommandOptions& opts, std::ostream& out);
int cmd_baseline(const ExperimentConfig& cfg, const CommandOptions& opts, std::ostream& out);
int cmd_eval(const ExperimentConfig& cfg, const CommandOptions& opts, std::ostream& out);
int cmd_sweep_discriminator(const ExperimentConfig& cfg, const CommandOptions& opts, std::ostream& out);
int cmd_compare(const ExperimentConfig& cfg, const CommandOptions& opts, std::ostream& out);
int cmd_gradcheck(std::uint64_t seed, std::ostream& out);

}  // namespace advdistill
