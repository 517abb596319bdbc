#include "advdistill/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>

#include "advdistill/errors.hpp"

namespace advdistill {

namespace {

std::string cell(double v) {
  if (std::isnan(v)) return "";
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

nlohmann::json num(double v) { return std::isfinite(v) ? nlohmann::json(v) : nlohmann::json(nullptr); }

}  // namespace

void write_csv(const RunMetrics& m, std::ostream& os) {
  os << kCsvHeader << '\n';
  for (const auto& r : m.steps) {
    os << r.step << ',' << cell(r.lr) << ',' << cell(r.adv_d) << ',' << cell(r.adv_student) << ',' << cell(r.data_loss)
       << ',' << cell(r.regul) << ',' << cell(r.d_accuracy) << ',' << cell(r.train_err) << ',' << cell(r.test_err)
       << '\n';
  }
}

void write_csv(const RunMetrics& m, const std::filesystem::path& path) {
  std::ofstream os(path);
  if (!os) throw Error("cannot open " + path.string() + " for writing");
  write_csv(m, os);
}

nlohmann::json summary_json(const RunMetrics& m) {
  nlohmann::json evals = nlohmann::json::array();
  for (const auto& e : m.evals) {
    evals.push_back({{"step", e.step},
                     {"train_err", num(e.train_err)},
                     {"test_err", num(e.test_err)},
                     {"d_heldout_accuracy", num(e.d_heldout_accuracy)},
                     {"test_logit_l2", num(e.test_logit_l2)}});
  }
  return {{"kind", m.kind},
          {"seed", m.seed},
          {"config", m.config},
          {"params", m.params},
          {"flops", m.flops},
          {"steps", m.steps.size()},
          {"final_train_err", num(m.final_train_err)},
          {"final_test_err", num(m.final_test_err)},
          {"final_test_logit_l2", num(m.final_test_logit_l2)},
          {"evals", evals}};
}

void write_json(const nlohmann::json& j, const std::filesystem::path& path) {
  std::ofstream os(path);
  if (!os) throw Error("cannot open " + path.string() + " for writing");
  os << j.dump(2) << '\n';
}

double median(std::vector<double> values) {
  if (values.empty()) return kMissing;
  std::sort(values.begin(), values.end());
  const std::size_t n = values.size();
  return n % 2 ? values[n / 2] : 0.5 * (values[n / 2 - 1] + values[n / 2]);
}

}  // namespace advdistill
