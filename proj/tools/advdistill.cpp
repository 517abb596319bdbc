// Command-line front end: train-teacher, compress, baseline, eval, sweep-d,
// compare, gradcheck.
#include <CLI11.hpp>

#include <cstdint>
#include <iostream>
#include <optional>
#include <string>

#include "advdistill/errors.hpp"
#include "advdistill/experiment.hpp"

namespace ad = advdistill;

int main(int argc, char** argv) {
  CLI::App app{"Adversarial network compression: teacher/student/discriminator training and baselines"};
  app.require_subcommand(1);

  std::string config_path;
  std::optional<std::uint64_t> seed;
  ad::CommandOptions opts;
  std::string out_dir = opts.out.string();
  std::string checkpoint;

  auto add_common = [&](CLI::App* cmd) {
    cmd->add_option("--config", config_path, "Experiment config file (INI); defaults apply when omitted");
    cmd->add_option("--seed", seed, "Run only this seed (overrides [run] seeds)");
    cmd->add_option("--out", out_dir, "Output root directory")->capture_default_str();
    cmd->add_flag("--overwrite", opts.overwrite, "Write to <out>/<command> instead of a fresh timestamped directory");
    cmd->add_option("--jobs", opts.jobs, "Parallel runs")->check(CLI::PositiveNumber)->capture_default_str();
    cmd->add_flag("-q,--quiet", opts.quiet, "No progress lines on stderr");
  };

  auto* train_teacher = app.add_subcommand("train-teacher", "Train the teacher on labeled data");
  auto* compress = app.add_subcommand("compress", "Adversarial compression of the teacher into the student");
  auto* baseline = app.add_subcommand("baseline", "Train the student with a baseline loss ([baseline] kind)");
  auto* eval = app.add_subcommand("eval", "Report error, parameters and FLOPs of a checkpoint");
  auto* sweep = app.add_subcommand("sweep-d", "Rank discriminator architectures by median student error");
  auto* compare = app.add_subcommand("compare", "Consolidated method table on one dataset");
  auto* gradcheck = app.add_subcommand("gradcheck", "Finite-difference gradient oracle suite");
  for (auto* cmd : {train_teacher, compress, baseline, eval, sweep, compare}) add_common(cmd);
  eval->add_option("--checkpoint", checkpoint, "Checkpoint to evaluate")->required();
  gradcheck->add_option("--seed", seed, "Random seed of the suite");

  CLI11_PARSE(app, argc, argv);

  try {
    if (gradcheck->parsed()) return ad::cmd_gradcheck(seed.value_or(1), std::cout);

    ad::ExperimentConfig cfg = config_path.empty() ? ad::parse_config("") : ad::load_config(config_path);
    if (seed) cfg.seeds = {*seed};
    opts.out = out_dir;
    opts.checkpoint = checkpoint;

    if (train_teacher->parsed()) return ad::cmd_train_teacher(cfg, opts, std::cout);
    if (compress->parsed()) return ad::cmd_compress(cfg, opts, std::cout);
    if (baseline->parsed()) return ad::cmd_baseline(cfg, opts, std::cout);
    if (eval->parsed()) return ad::cmd_eval(cfg, opts, std::cout);
    if (sweep->parsed()) return ad::cmd_sweep_discriminator(cfg, opts, std::cout);
    if (compare->parsed()) return ad::cmd_compare(cfg, opts, std::cout);
  } catch (const ad::ConfigError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
