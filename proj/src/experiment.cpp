#include "advdistill/experiment.hpp"

#include <algorithm>
#include <atomic>
#include <charconv>
#include <chrono>
#include <cmath>
#include <cstdlib>
#include <ctime>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <map>
#include <mutex>
#include <set>
#include <sstream>
#include <thread>

#include "advdistill/errors.hpp"
#include "advdistill/gradcheck.hpp"

namespace advdistill {

// ---- config parsing ----

namespace {

// Thrown by value converters; rethrown as ConfigError with the line attached.
struct BadValue {
  std::string message;
};

std::string trim(std::string_view s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string_view::npos) return {};
  const auto e = s.find_last_not_of(" \t\r");
  return std::string(s.substr(b, e - b + 1));
}

std::vector<std::string> split(const std::string& s, char sep) {
  std::vector<std::string> parts;
  std::string cur;
  std::istringstream is(s);
  while (std::getline(is, cur, sep)) parts.push_back(trim(cur));
  if (!s.empty() && s.back() == sep) parts.emplace_back();
  return parts;
}

std::size_t to_size(const std::string& v) {
  std::size_t out = 0;
  auto [p, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
  if (ec != std::errc() || p != v.data() + v.size() || v.empty()) {
    throw BadValue{"expected a non-negative integer, got '" + v + "'"};
  }
  return out;
}

double to_double(const std::string& v) {
  double out = 0.0;
  auto [p, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
  if (ec != std::errc() || p != v.data() + v.size() || v.empty() || !std::isfinite(out)) {
    throw BadValue{"expected a number, got '" + v + "'"};
  }
  return out;
}

bool to_bool(const std::string& v) {
  if (v == "true" || v == "yes" || v == "on" || v == "1") return true;
  if (v == "false" || v == "no" || v == "off" || v == "0") return false;
  throw BadValue{"expected true or false, got '" + v + "'"};
}

std::vector<std::size_t> to_size_list(const std::string& v) {
  std::vector<std::size_t> out;
  for (const auto& part : split(v, ',')) out.push_back(to_size(part));
  return out;
}

template <typename Fn>
auto converted(Fn fn, const std::string& v) {
  try {
    return fn(v);
  } catch (const ConfigError& e) {
    throw BadValue{e.what()};
  }
}

using Setter = std::function<void(ExperimentConfig&, const std::string&)>;

void add_optimizer_keys(std::map<std::string, Setter>& keys, const std::string& section,
                        std::function<OptimizerConfig&(ExperimentConfig&)> get) {
  keys[section + ".optimizer"] = [get](ExperimentConfig& c, const std::string& v) {
    get(c).kind = converted(parse_optimizer, v);
  };
  keys[section + ".learning_rate"] = [get](ExperimentConfig& c, const std::string& v) { get(c).learning_rate = to_double(v); };
  keys[section + ".momentum"] = [get](ExperimentConfig& c, const std::string& v) { get(c).momentum = to_double(v); };
  keys[section + ".weight_decay"] = [get](ExperimentConfig& c, const std::string& v) { get(c).weight_decay = to_double(v); };
}

void add_train_keys(std::map<std::string, Setter>& keys, const std::string& section,
                    std::function<TrainConfig&(ExperimentConfig&)> get) {
  add_optimizer_keys(keys, section, [get](ExperimentConfig& c) -> OptimizerConfig& { return get(c).optimizer; });
  keys[section + ".steps"] = [get](ExperimentConfig& c, const std::string& v) { get(c).total_steps = to_size(v); };
  keys[section + ".batch_size"] = [get](ExperimentConfig& c, const std::string& v) { get(c).batch_size = to_size(v); };
  keys[section + ".decay_fraction"] = [get](ExperimentConfig& c, const std::string& v) {
    get(c).decay_fraction = to_double(v);
  };
  keys[section + ".eval_every"] = [get](ExperimentConfig& c, const std::string& v) { get(c).eval_every = to_size(v); };
}

const std::map<std::string, Setter>& config_keys() {
  static const std::map<std::string, Setter> keys = [] {
    std::map<std::string, Setter> k;
    auto data = [](ExperimentConfig& c) -> DataConfig& { return c.data; };
    k["data.source"] = [data](ExperimentConfig& c, const std::string& v) {
      if (v != "blobs" && v != "idx" && v != "manifest") throw BadValue{"expected blobs, idx or manifest, got '" + v + "'"};
      data(c).source = v;
    };
    k["data.classes"] = [](ExperimentConfig& c, const std::string& v) { c.data.classes = to_size(v); };
    k["data.dims"] = [](ExperimentConfig& c, const std::string& v) { c.data.dims = to_size(v); };
    k["data.train_per_class"] = [](ExperimentConfig& c, const std::string& v) { c.data.train_per_class = to_size(v); };
    k["data.test_per_class"] = [](ExperimentConfig& c, const std::string& v) { c.data.test_per_class = to_size(v); };
    k["data.separation"] = [](ExperimentConfig& c, const std::string& v) { c.data.separation = to_double(v); };
    k["data.seed"] = [](ExperimentConfig& c, const std::string& v) { c.data.seed = to_size(v); };
    k["data.manifest"] = [](ExperimentConfig& c, const std::string& v) { c.data.manifest = v; };
    k["data.train_images"] = [](ExperimentConfig& c, const std::string& v) { c.data.train_images = v; };
    k["data.train_labels"] = [](ExperimentConfig& c, const std::string& v) { c.data.train_labels = v; };
    k["data.test_images"] = [](ExperimentConfig& c, const std::string& v) { c.data.test_images = v; };
    k["data.test_labels"] = [](ExperimentConfig& c, const std::string& v) { c.data.test_labels = v; };
    k["data.normalize"] = [](ExperimentConfig& c, const std::string& v) { c.data.normalize = to_bool(v); };
    k["data.augment"] = [](ExperimentConfig& c, const std::string& v) {
      if (v != "auto") to_bool(v);
      c.data.augment = v == "auto" ? v : (to_bool(v) ? "true" : "false");
    };
    k["data.flip"] = [](ExperimentConfig& c, const std::string& v) { c.data.augment_policy.flip = to_bool(v); };
    k["data.flip_probability"] = [](ExperimentConfig& c, const std::string& v) {
      c.data.augment_policy.flip_probability = to_double(v);
    };
    k["data.crop_padding"] = [](ExperimentConfig& c, const std::string& v) { c.data.augment_policy.crop_padding = to_size(v); };

    k["teacher.preset"] = [](ExperimentConfig& c, const std::string& v) { c.teacher.preset = v; };
    k["teacher.checkpoint"] = [](ExperimentConfig& c, const std::string& v) { c.teacher.checkpoint = v; };
    add_train_keys(k, "teacher", [](ExperimentConfig& c) -> TrainConfig& { return c.teacher.train; });

    k["student.preset"] = [](ExperimentConfig& c, const std::string& v) { c.student_preset = v; };
    add_train_keys(k, "train", [](ExperimentConfig& c) -> TrainConfig& { return c.compression.train; });

    k["discriminator.hidden"] = [](ExperimentConfig& c, const std::string& v) { c.d_hidden = to_size_list(v); };
    k["discriminator.input"] = [](ExperimentConfig& c, const std::string& v) {
      c.compression.d_input = converted(parse_d_input, v);
    };
    k["discriminator.steps_per_update"] = [](ExperimentConfig& c, const std::string& v) {
      c.compression.d_steps = to_size(v);
    };
    add_optimizer_keys(k, "discriminator", [](ExperimentConfig& c) -> OptimizerConfig& { return c.compression.d_optimizer; });

    k["compression.lambda"] = [](ExperimentConfig& c, const std::string& v) { c.compression.lambda = to_double(v); };
    k["compression.mu"] = [](ExperimentConfig& c, const std::string& v) { c.compression.mu = to_double(v); };
    k["compression.regularizer"] = [](ExperimentConfig& c, const std::string& v) {
      c.compression.regularizer = converted(parse_regularizer, v);
    };
    k["compression.dropout"] = [](ExperimentConfig& c, const std::string& v) { c.compression.dropout_rate = to_double(v); };
    k["compression.student_dropout"] = [](ExperimentConfig& c, const std::string& v) {
      c.compression.student_dropout = to_bool(v);
    };
    k["compression.adversarial_sample_dropout"] = [](ExperimentConfig& c, const std::string& v) {
      c.compression.adv_sample_dropout = to_bool(v);
    };

    k["baseline.kind"] = [](ExperimentConfig& c, const std::string& v) { c.baseline = converted(parse_baseline, v); };
    k["baseline.temperature"] = [](ExperimentConfig& c, const std::string& v) { c.temperature = to_double(v); };

    k["run.seeds"] = [](ExperimentConfig& c, const std::string& v) { c.seeds = converted(parse_seed_list, v); };

    k["sweep.candidates"] = [](ExperimentConfig& c, const std::string& v) {
      c.sweep_candidates.clear();
      for (const auto& part : split(v, ';')) c.sweep_candidates.push_back(to_size_list(part));
    };
    k["compare.methods"] = [](ExperimentConfig& c, const std::string& v) {
      c.compare_methods = split(v, ',');
      for (const auto& m : c.compare_methods) {
        if (std::find(kCompareMethods.begin(), kCompareMethods.end(), m) == kCompareMethods.end()) {
          throw BadValue{"unknown method '" + m + "'"};
        }
      }
    };
    k["debug.fail_method"] = [](ExperimentConfig& c, const std::string& v) { c.fail_method = v; };
    k["debug.fail_seed"] = [](ExperimentConfig& c, const std::string& v) { c.fail_seed = to_size(v); };
    return k;
  }();
  return keys;
}

bool is_path_set(const std::filesystem::path& p) { return !p.empty(); }

void require_key(bool present, const std::string& key, const std::string& why) {
  if (!present) throw ConfigError("[" + key.substr(0, key.find('.')) + "] " + key.substr(key.find('.') + 1) +
                                  " is required " + why);
}

void validate(const ExperimentConfig& c) {
  const auto& d = c.data;
  if (d.source == "idx") {
    for (const auto& [key, path] : {std::pair{"data.train_images", d.train_images}, {"data.train_labels", d.train_labels},
                                   {"data.test_images", d.test_images}, {"data.test_labels", d.test_labels}}) {
      require_key(is_path_set(path), key, "when source = idx");
    }
  }
  if (d.source == "manifest") require_key(is_path_set(d.manifest), "data.manifest", "when source = manifest");
  if (d.source == "blobs" && (d.train_per_class == 0 || d.test_per_class == 0)) {
    throw ConfigError("[data] blobs need train_per_class and test_per_class >= 1");
  }
  const auto names = preset_names();
  for (const auto& [key, name] : {std::pair{"[teacher] preset", c.teacher.preset}, {"[student] preset", c.student_preset}}) {
    if (std::find(names.begin(), names.end(), name) == names.end()) {
      throw ConfigError(std::string(key) + ": unknown preset '" + name + "'");
    }
  }
  c.teacher.train.validate();
  c.compression.validate();
  if (c.d_hidden.empty()) throw ConfigError("[discriminator] hidden needs at least one layer");
  if (!(c.temperature > 0.0)) throw ConfigError("[baseline] temperature must be positive");
  if (c.seeds.empty()) throw ConfigError("[run] seeds must list at least one seed");
  for (const auto& cand : c.sweep_candidates) {
    if (cand.empty() || std::find(cand.begin(), cand.end(), 0u) != cand.end()) {
      throw ConfigError("[sweep] candidates: every candidate needs positive layer widths");
    }
  }
  if (!c.fail_method.empty() && std::find(kCompareMethods.begin(), kCompareMethods.end(), c.fail_method) == kCompareMethods.end() &&
      c.fail_method != "teacher") {
    throw ConfigError("[debug] fail_method: unknown method '" + c.fail_method + "'");
  }
}

}  // namespace

std::vector<std::uint64_t> parse_seed_list(const std::string& text) {
  std::vector<std::uint64_t> seeds;
  for (const auto& part : split(text, ',')) {
    const auto dash = part.find('-');
    try {
      if (dash == std::string::npos) {
        seeds.push_back(to_size(part));
      } else {
        const auto lo = to_size(trim(part.substr(0, dash)));
        const auto hi = to_size(trim(part.substr(dash + 1)));
        if (hi < lo) throw ConfigError("seed range '" + part + "' is empty");
        for (auto s = lo; s <= hi; ++s) seeds.push_back(s);
      }
    } catch (const BadValue& bad) {
      throw ConfigError("seed list: " + bad.message);
    }
  }
  if (seeds.empty()) throw ConfigError("seed list is empty");
  return seeds;
}

ExperimentConfig parse_config(const std::string& text, const std::string& origin) {
  ExperimentConfig cfg;
  const auto& keys = config_keys();
  std::set<std::string> seen;
  std::string section;
  std::istringstream is(text);
  std::string raw;
  std::size_t line_no = 0;
  auto fail = [&](const std::string& msg) -> ConfigError {
    return ConfigError(origin + ":" + std::to_string(line_no) + ": " + msg);
  };
  while (std::getline(is, raw)) {
    ++line_no;
    std::string line = trim(raw);
    if (line.empty() || line[0] == '#' || line[0] == ';') continue;
    if (line.front() == '[') {
      if (line.back() != ']') throw fail("unterminated section header '" + line + "'");
      section = trim(line.substr(1, line.size() - 2));
      const bool known = std::any_of(keys.begin(), keys.end(), [&](const auto& kv) { return kv.first.starts_with(section + "."); });
      if (!known) throw fail("unknown section [" + section + "]");
      continue;
    }
    const auto eq = line.find('=');
    if (eq == std::string::npos) throw fail("expected key = value, got '" + line + "'");
    if (section.empty()) throw fail("key outside of any [section]");
    std::string key = trim(line.substr(0, eq));
    std::string value = trim(line.substr(eq + 1));
    // Trailing comments need whitespace before the marker.
    for (const char* marker : {" #", " ;", "\t#", "\t;"}) {
      if (auto pos = value.find(marker); pos != std::string::npos) value = trim(value.substr(0, pos));
    }
    const std::string full = section + "." + key;
    auto it = keys.find(full);
    if (it == keys.end()) throw fail("unknown key '" + key + "' in [" + section + "]");
    if (!seen.insert(full).second) throw fail("duplicate key '" + key + "' in [" + section + "]");
    try {
      it->second(cfg, value);
    } catch (const BadValue& bad) {
      throw fail("[" + section + "] " + key + ": " + bad.message);
    } catch (const ConfigError& e) {
      throw fail("[" + section + "] " + key + ": " + e.what());
    }
  }
  try {
    validate(cfg);
  } catch (const ConfigError& e) {
    throw ConfigError(origin + ": " + e.what());
  }
  return cfg;
}

ExperimentConfig load_config(const std::filesystem::path& path) {
  std::ifstream is(path);
  if (!is) throw ConfigError("cannot open config file " + path.string());
  std::stringstream ss;
  ss << is.rdbuf();
  ExperimentConfig cfg = parse_config(ss.str(), path.string());
  cfg.base_dir = path.parent_path().empty() ? std::filesystem::path(".") : path.parent_path();
  return cfg;
}

nlohmann::json to_json(const ExperimentConfig& c) {
  const auto& d = c.data;
  nlohmann::json data = {{"source", d.source},
                         {"normalize", d.normalize},
                         {"augment", d.augment},
                         {"flip", d.augment_policy.flip},
                         {"flip_probability", d.augment_policy.flip_probability},
                         {"crop_padding", d.augment_policy.crop_padding}};
  if (d.source == "blobs") {
    data.update({{"classes", d.classes},
                 {"dims", d.dims},
                 {"train_per_class", d.train_per_class},
                 {"test_per_class", d.test_per_class},
                 {"separation", d.separation},
                 {"seed", d.seed}});
  } else if (d.source == "idx") {
    data.update({{"train_images", d.train_images.string()},
                 {"train_labels", d.train_labels.string()},
                 {"test_images", d.test_images.string()},
                 {"test_labels", d.test_labels.string()}});
  } else {
    data["manifest"] = d.manifest.string();
  }
  nlohmann::json sweep = nlohmann::json::array();
  for (const auto& cand : c.sweep_candidates) sweep.push_back(cand);
  return {{"data", data},
          {"teacher",
           {{"preset", c.teacher.preset}, {"checkpoint", c.teacher.checkpoint.string()}, {"train", to_json(c.teacher.train)}}},
          {"student", {{"preset", c.student_preset}}},
          {"compression", to_json(c.compression)},
          {"discriminator", {{"hidden", c.d_hidden}}},
          {"baseline", {{"kind", to_string(c.baseline)}, {"temperature", c.temperature}}},
          {"run", {{"seeds", c.seeds}}},
          {"sweep", {{"candidates", sweep}}},
          {"compare", {{"methods", c.compare_methods}}},
          {"debug", {{"fail_method", c.fail_method}, {"fail_seed", c.fail_seed}}}};
}

// ---- data ----

std::filesystem::path resolve_data_path(const ExperimentConfig& cfg, const std::filesystem::path& p) {
  if (p.is_absolute()) return p;
  if (const char* root = std::getenv("ADVDISTILL_DATA_DIR"); root && *root) return std::filesystem::path(root) / p;
  return cfg.base_dir / p;
}

namespace {

std::filesystem::path existing(const ExperimentConfig& cfg, const std::filesystem::path& p, const std::string& key) {
  const auto resolved = resolve_data_path(cfg, p);
  if (!std::filesystem::exists(resolved)) {
    throw ConfigError("[data] " + key + ": no such file '" + resolved.string() + "'");
  }
  return resolved;
}

Dataset take_first(Dataset ds, std::size_t n) {
  if (n == 0 || n >= ds.size()) return ds;
  BatchRecord b = slice_batch(ds, 0, n);
  ds.inputs = b.inputs;
  ds.labels = b.labels;
  return ds;
}

}  // namespace

DataBundle load_data(const ExperimentConfig& cfg) {
  const auto& d = cfg.data;
  DataBundle bundle;
  if (d.source == "blobs") {
    std::mt19937_64 rng(d.seed);
    bundle.train = gen_gaussian_blobs(d.classes, d.dims, d.train_per_class, d.separation, rng, Split::train);
    bundle.test = gen_gaussian_blobs(d.classes, d.dims, d.test_per_class, d.separation, rng, Split::test);
  } else if (d.source == "idx") {
    // Checked in file order so the first missing key is the one reported.
    const auto train_images = existing(cfg, d.train_images, "train_images");
    const auto train_labels = existing(cfg, d.train_labels, "train_labels");
    const auto test_images = existing(cfg, d.test_images, "test_images");
    const auto test_labels = existing(cfg, d.test_labels, "test_labels");
    bundle.train = load_idx(train_images, train_labels, Split::train);
    bundle.test = load_idx(test_images, test_labels, Split::test, bundle.train.num_classes);
  } else {
    const auto m = read_manifest(existing(cfg, d.manifest, "manifest"));
    bundle.train = take_first(load_idx(m.train_images, m.train_labels, Split::train, m.classes), m.train_size);
    bundle.test = take_first(load_idx(m.test_images, m.test_labels, Split::test, m.classes), m.test_size);
  }
  if (bundle.test.num_classes != bundle.train.num_classes) {
    bundle.test.num_classes = std::max(bundle.test.num_classes, bundle.train.num_classes);
    bundle.train.num_classes = bundle.test.num_classes;
  }
  if (d.normalize) {
    const auto stats = compute_stats(bundle.train);
    bundle.train = normalize(bundle.train, stats);
    bundle.test = normalize(bundle.test, stats);
  }
  return bundle;
}

// ---- output ----

std::filesystem::path prepare_output_dir(const std::filesystem::path& out, const std::string& command, bool overwrite) {
  namespace fs = std::filesystem;
  fs::path dir;
  if (overwrite) {
    dir = out / command;
    fs::remove_all(dir);
  } else {
    const std::time_t now = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
    std::tm tm{};
    localtime_r(&now, &tm);
    char stamp[32];
    std::strftime(stamp, sizeof stamp, "%Y%m%d-%H%M%S", &tm);
    dir = out / (command + "-" + stamp);
    for (int n = 2; fs::exists(dir); ++n) dir = out / (command + "-" + stamp + "-" + std::to_string(n));
  }
  fs::create_directories(dir);
  return dir;
}

void run_parallel(std::size_t count, std::size_t jobs, const std::function<void(std::size_t)>& task) {
  jobs = std::max<std::size_t>(1, std::min(jobs, count));
  if (jobs == 1) {
    for (std::size_t i = 0; i < count; ++i) task(i);
    return;
  }
  std::atomic<std::size_t> next{0};
  std::vector<std::jthread> workers;
  for (std::size_t j = 0; j < jobs; ++j) {
    workers.emplace_back([&] {
      for (std::size_t i = next++; i < count; i = next++) task(i);
    });
  }
}

std::size_t TableRow::aborted() const {
  return static_cast<std::size_t>(std::count_if(runs.begin(), runs.end(), [](const RunOutcome& r) { return r.aborted; }));
}

namespace {

std::string percent(double v) {
  if (std::isnan(v)) return "n/a";
  std::ostringstream os;
  os << std::fixed << std::setprecision(2) << 100.0 * v;
  return os.str();
}

std::string num_or_empty(double v) {
  if (std::isnan(v)) return "";
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

void finalize_row(TableRow& row) {
  std::vector<double> errs;
  for (const auto& r : row.runs) {
    if (!r.aborted) errs.push_back(r.metrics.final_test_err);
  }
  row.median_test_err = median(errs);
}

std::vector<std::uint64_t> row_seeds(const std::vector<TableRow>& rows) {
  std::vector<std::uint64_t> seeds;
  for (const auto& row : rows) {
    for (const auto& r : row.runs) {
      if (std::find(seeds.begin(), seeds.end(), r.seed) == seeds.end()) seeds.push_back(r.seed);
    }
  }
  return seeds;
}

}  // namespace

std::string markdown_table(const std::vector<TableRow>& rows) {
  std::ostringstream os;
  os << "| method | test error (median %) | params | FLOPs | runs | aborted |\n";
  os << "|---|---:|---:|---:|---:|---:|\n";
  for (const auto& row : rows) {
    os << "| " << row.method << " | " << percent(row.median_test_err) << " | " << row.params << " | " << row.flops << " | "
       << row.runs.size() << " | " << row.aborted() << " |\n";
  }
  const auto seeds = row_seeds(rows);
  os << "\nPer-seed test error (%):\n\n| method |";
  for (auto s : seeds) os << " seed " << s << " |";
  os << "\n|---|";
  for (std::size_t i = 0; i < seeds.size(); ++i) os << "---:|";
  os << "\n";
  for (const auto& row : rows) {
    os << "| " << row.method << " |";
    for (auto s : seeds) {
      auto it = std::find_if(row.runs.begin(), row.runs.end(), [s](const RunOutcome& r) { return r.seed == s; });
      if (it == row.runs.end()) {
        os << " |";
      } else if (it->aborted) {
        os << " aborted |";
      } else {
        os << " " << percent(it->metrics.final_test_err) << " |";
      }
    }
    os << "\n";
  }
  return os.str();
}

std::string csv_table(const std::vector<TableRow>& rows) {
  std::ostringstream os;
  os << "method,median_test_err,params,flops,runs,aborted\n";
  for (const auto& row : rows) {
    os << row.method << "," << num_or_empty(row.median_test_err) << "," << row.params << "," << row.flops << ","
       << row.runs.size() << "," << row.aborted() << "\n";
  }
  return os.str();
}

std::string seeds_csv(const std::vector<TableRow>& rows) {
  std::ostringstream os;
  os << "method,seed,status,train_err,test_err,test_logit_l2\n";
  for (const auto& row : rows) {
    for (const auto& r : row.runs) {
      os << row.method << "," << r.seed << "," << (r.aborted ? "aborted" : "ok") << ","
         << (r.aborted ? "" : num_or_empty(r.metrics.final_train_err)) << ","
         << (r.aborted ? "" : num_or_empty(r.metrics.final_test_err)) << ","
         << (r.aborted ? "" : num_or_empty(r.metrics.final_test_logit_l2)) << "\n";
    }
  }
  return os.str();
}

// ---- commands ----

namespace {

class Log {
 public:
  explicit Log(bool quiet) : quiet_(quiet) {}
  void operator()(const std::string& msg) {
    if (quiet_) return;
    std::lock_guard lock(mu_);
    std::cerr << msg << std::endl;
  }

 private:
  bool quiet_;
  std::mutex mu_;
};

void write_text(const std::filesystem::path& path, const std::string& text) {
  std::ofstream os(path);
  if (!os) throw Error("cannot open " + path.string() + " for writing");
  os << text;
}

// Resolves dataset-dependent run settings (augmentation) for one seed.
TrainConfig resolved(TrainConfig t, const ExperimentConfig& cfg, const Dataset& train, std::uint64_t seed) {
  const bool spatial = train.inputs.rank() == 4;
  if (cfg.data.augment == "auto") {
    t.augment = spatial;
  } else {
    t.augment = cfg.data.augment == "true";
    if (t.augment && !spatial) throw ConfigError("[data] augment = true needs spatial (image) inputs");
  }
  t.augment_policy = cfg.data.augment_policy;
  t.seed = seed;
  return t;
}

NetworkSpec teacher_spec(const ExperimentConfig& cfg, const Dataset& train) {
  return preset(cfg.teacher.preset, train.sample_shape(), train.num_classes);
}

NetworkSpec student_spec(const ExperimentConfig& cfg, const Dataset& train) {
  return preset(cfg.student_preset, train.sample_shape(), train.num_classes);
}

std::string file_stem(const std::string& method, std::uint64_t seed) { return method + "-seed" + std::to_string(seed); }

void inject_failure(const ExperimentConfig& cfg, const std::string& method, std::uint64_t seed) {
  if (cfg.fail_method == method && (cfg.fail_seed == 0 || cfg.fail_seed == seed)) {
    throw Error("injected failure in " + method + " seed " + std::to_string(seed) + " ([debug] fail_method)");
  }
}

// Writes <method>-seed<N>.{json,csv,ckpt}. Aborted runs only get the JSON.
void write_run(const std::filesystem::path& dir, const ExperimentConfig& cfg, const RunOutcome& run, const Network* model) {
  const std::string stem = file_stem(run.method, run.seed);
  nlohmann::json j;
  if (run.aborted) {
    j = {{"kind", run.method}, {"seed", run.seed}};
    j["status"] = "aborted";
    j["error"] = run.error;
  } else {
    j = summary_json(run.metrics);
    j["status"] = "ok";
    write_csv(run.metrics, dir / (stem + ".csv"));
    if (model) save_checkpoint(*model, dir / (stem + ".ckpt"));
  }
  j["method"] = run.method;
  j["experiment"] = to_json(cfg);
  write_json(j, dir / (stem + ".json"));
}

struct TeacherRun {
  std::optional<Network> network;
  RunOutcome outcome;
};

// Loads the configured checkpoint or trains a teacher with `seed`.
TeacherRun obtain_teacher(const ExperimentConfig& cfg, const DataBundle& data, std::uint64_t seed,
                          const std::string& method) {
  TeacherRun t;
  t.outcome.method = method;
  t.outcome.seed = seed;
  try {
    inject_failure(cfg, method, seed);
    if (!cfg.teacher.checkpoint.empty()) {
      Network net = load_checkpoint(resolve_data_path(cfg, cfg.teacher.checkpoint));
      RunMetrics m;
      m.kind = "teacher_checkpoint";
      m.seed = seed;
      m.config = {{"checkpoint", cfg.teacher.checkpoint.string()}};
      m.params = count_params(net);
      m.flops = estimate_flops(net);
      EvalRecord e;
      e.train_err = error_rate(net, data.train);
      e.test_err = error_rate(net, data.test);
      m.evals.push_back(e);
      m.final_train_err = e.train_err;
      m.final_test_err = e.test_err;
      t.outcome.metrics = std::move(m);
      t.network = std::move(net);
    } else {
      auto r = train_teacher(teacher_spec(cfg, data.train), data.train, data.test,
                             resolved(cfg.teacher.train, cfg, data.train, seed));
      t.outcome.metrics = std::move(r.metrics);
      t.network = std::move(r.network);
    }
  } catch (const ConfigError&) {
    throw;
  } catch (const std::exception& e) {
    t.outcome.aborted = true;
    t.outcome.error = e.what();
  }
  return t;
}

std::string method_of(BaselineKind kind) {
  return kind == BaselineKind::supervised ? "supervised_student" : to_string(kind);
}

// Runs one student method. The teacher may be null only for supervised_student.
RunOutcome run_student_method(const std::string& method, const ExperimentConfig& cfg, const DataBundle& data,
                              const TeacherRun* teacher, std::uint64_t seed, const std::vector<std::size_t>& hidden,
                              std::optional<Network>* model) {
  RunOutcome out;
  out.method = method;
  out.seed = seed;
  try {
    inject_failure(cfg, method, seed);
    const NetworkSpec s_spec = student_spec(cfg, data.train);
    if (method != "supervised_student" && (!teacher || !teacher->network)) {
      throw Error("teacher unavailable" + (teacher ? ": " + teacher->outcome.error : std::string()));
    }
    if (method == "adversarial" || method.starts_with("d-")) {
      CompressionConfig cc = cfg.compression;
      cc.train = resolved(cc.train, cfg, data.train, seed);
      const NetworkSpec d_spec = discriminator_for(*teacher->network, s_spec, cc.d_input, hidden);
      auto r = run_compression(*teacher->network, s_spec, d_spec, data.train, data.test, cc);
      out.metrics = std::move(r.metrics);
      if (model) *model = std::move(r.student);
    } else {
      const BaselineKind kind = method == "supervised_student" ? BaselineKind::supervised : parse_baseline(method);
      const Network* t = teacher && teacher->network ? &*teacher->network : nullptr;
      auto r = run_baseline(kind, kind == BaselineKind::supervised ? nullptr : t, s_spec, data.train, data.test,
                            resolved(cfg.compression.train, cfg, data.train, seed), cfg.temperature);
      out.metrics = std::move(r.metrics);
      if (model) *model = std::move(r.network);
    }
  } catch (const ConfigError&) {
    throw;
  } catch (const std::exception& e) {
    out.aborted = true;
    out.error = e.what();
  }
  return out;
}

std::string describe(const RunOutcome& r) {
  std::string s = r.method + " seed " + std::to_string(r.seed) + ": ";
  return s + (r.aborted ? "ABORTED (" + r.error + ")" : "test error " + percent(r.metrics.final_test_err) + "%");
}

// Per-seed runs of one method written to `dir`; prints one line per seed.
int run_per_seed(const ExperimentConfig& cfg, const CommandOptions& opts, std::ostream& out, const std::string& command,
                 const std::string& method, bool needs_teacher) {
  const DataBundle data = load_data(cfg);
  const auto dir = prepare_output_dir(opts.out, command, opts.overwrite);
  Log log(opts.quiet);
  std::vector<RunOutcome> runs(cfg.seeds.size());
  std::exception_ptr config_error;
  std::mutex mu;
  run_parallel(cfg.seeds.size(), opts.jobs, [&](std::size_t i) {
    const std::uint64_t seed = cfg.seeds[i];
    try {
      std::optional<Network> model;
      if (method == "teacher") {
        TeacherRun t = obtain_teacher(cfg, data, seed, "teacher");
        runs[i] = t.outcome;
        model = std::move(t.network);
      } else {
        std::optional<TeacherRun> t;
        if (needs_teacher) t = obtain_teacher(cfg, data, seed, "teacher");
        runs[i] = run_student_method(method, cfg, data, t ? &*t : nullptr, seed, cfg.d_hidden, &model);
      }
      write_run(dir, cfg, runs[i], model ? &*model : nullptr);
      log("[" + command + "] " + describe(runs[i]));
    } catch (...) {
      std::lock_guard lock(mu);
      if (!config_error) config_error = std::current_exception();
    }
  });
  if (config_error) std::rethrow_exception(config_error);

  TableRow row;
  row.method = method;
  row.runs = runs;
  const NetworkSpec spec = method == "teacher" ? teacher_spec(cfg, data.train) : student_spec(cfg, data.train);
  row.params = count_params(spec);
  row.flops = estimate_flops(spec);
  finalize_row(row);
  for (const auto& r : runs) out << describe(r) << "\n";
  out << "median test error: " << percent(row.median_test_err) << "% over " << runs.size() - row.aborted() << " run(s)\n";
  out << "params: " << row.params << "  FLOPs: " << row.flops << "\n";
  out << "output: " << dir.string() << "\n";
  return row.aborted() > 0 ? 1 : 0;
}

nlohmann::json rows_json(const std::vector<TableRow>& rows) {
  nlohmann::json arr = nlohmann::json::array();
  for (const auto& row : rows) {
    nlohmann::json runs = nlohmann::json::array();
    for (const auto& r : row.runs) {
      nlohmann::json j = {{"seed", r.seed}, {"status", r.aborted ? "aborted" : "ok"}};
      if (r.aborted) {
        j["error"] = r.error;
      } else {
        j["test_err"] = r.metrics.final_test_err;
        j["train_err"] = r.metrics.final_train_err;
      }
      runs.push_back(j);
    }
    arr.push_back({{"method", row.method},
                   {"median_test_err", std::isnan(row.median_test_err) ? nlohmann::json(nullptr)
                                                                        : nlohmann::json(row.median_test_err)},
                   {"params", row.params},
                   {"flops", row.flops},
                   {"aborted", row.aborted()},
                   {"runs", runs}});
  }
  return arr;
}

void write_grid(const std::filesystem::path& dir, const std::string& name, const ExperimentConfig& cfg,
                const std::vector<TableRow>& rows) {
  write_text(dir / (name + ".md"), markdown_table(rows));
  write_text(dir / (name + ".csv"), csv_table(rows));
  write_text(dir / "seeds.csv", seeds_csv(rows));
  write_json({{"rows", rows_json(rows)}, {"experiment", to_json(cfg)}}, dir / "summary.json");
}

std::string hidden_name(const std::vector<std::size_t>& hidden) {
  std::string s;
  for (std::size_t i = 0; i < hidden.size(); ++i) s += (i ? "fc-" : "") + std::to_string(hidden[i]);
  return s + "fc";
}

}  // namespace

int cmd_train_teacher(const ExperimentConfig& cfg, const CommandOptions& opts, std::ostream& out) {
  return run_per_seed(cfg, opts, out, "train-teacher", "teacher", false);
}

int cmd_compress(const ExperimentConfig& cfg, const CommandOptions& opts, std::ostream& out) {
  return run_per_seed(cfg, opts, out, "compress", "adversarial", true);
}

int cmd_baseline(const ExperimentConfig& cfg, const CommandOptions& opts, std::ostream& out) {
  return run_per_seed(cfg, opts, out, "baseline", method_of(cfg.baseline), cfg.baseline != BaselineKind::supervised);
}

int cmd_eval(const ExperimentConfig& cfg, const CommandOptions& opts, std::ostream& out) {
  if (opts.checkpoint.empty()) throw ConfigError("eval needs --checkpoint PATH");
  const Network net = load_checkpoint(opts.checkpoint);
  const DataBundle data = load_data(cfg);
  if (net.spec().input_shape != data.test.sample_shape()) {
    throw DimensionError("checkpoint '" + net.spec().name + "' expects samples " + shape_str(net.spec().input_shape) +
                         " but the dataset holds " + shape_str(data.test.sample_shape()));
  }
  if (net.spec().num_classes() != data.test.num_classes) {
    throw DimensionError("checkpoint '" + net.spec().name + "' has " + std::to_string(net.spec().num_classes()) +
                         " outputs but the dataset has " + std::to_string(data.test.num_classes) + " classes");
  }
  out << "network: " << net.spec().name << "\n";
  out << "test error: " << percent(error_rate(net, data.test)) << "%\n";
  out << "train error: " << percent(error_rate(net, data.train)) << "%\n";
  out << "params: " << count_params(net) << "\n";
  out << "FLOPs: " << estimate_flops(net) << "\n";
  return 0;
}

int cmd_sweep_discriminator(const ExperimentConfig& cfg, const CommandOptions& opts, std::ostream& out) {
  if (cfg.sweep_candidates.size() < 2) throw ConfigError("[sweep] candidates needs at least two architectures");
  const DataBundle data = load_data(cfg);
  const auto dir = prepare_output_dir(opts.out, "sweep-d", opts.overwrite);
  Log log(opts.quiet);
  const std::size_t n_seeds = cfg.seeds.size();

  std::vector<TeacherRun> teachers(n_seeds);
  run_parallel(n_seeds, opts.jobs, [&](std::size_t i) { teachers[i] = obtain_teacher(cfg, data, cfg.seeds[i], "teacher"); });

  const std::size_t n_cand = cfg.sweep_candidates.size();
  std::vector<RunOutcome> runs(n_cand * n_seeds);
  run_parallel(runs.size(), opts.jobs, [&](std::size_t job) {
    const std::size_t c = job / n_seeds, s = job % n_seeds;
    const std::string method = "d-" + hidden_name(cfg.sweep_candidates[c]);
    runs[job] = run_student_method(method, cfg, data, &teachers[s], cfg.seeds[s], cfg.sweep_candidates[c], nullptr);
    runs[job].method = hidden_name(cfg.sweep_candidates[c]);
    log("[sweep-d] " + describe(runs[job]));
  });

  std::vector<TableRow> rows;
  for (std::size_t c = 0; c < n_cand; ++c) {
    TableRow row;
    row.method = hidden_name(cfg.sweep_candidates[c]);
    const std::size_t dim = cfg.compression.d_input == DInput::features
                                ? student_spec(cfg, data.train).feature_dim()
                                : data.train.num_classes;
    const NetworkSpec d_spec = make_discriminator(dim, cfg.sweep_candidates[c]);
    row.params = count_params(d_spec);
    row.flops = estimate_flops(d_spec);
    row.runs.assign(runs.begin() + static_cast<std::ptrdiff_t>(c * n_seeds),
                    runs.begin() + static_cast<std::ptrdiff_t>((c + 1) * n_seeds));
    finalize_row(row);
    rows.push_back(std::move(row));
  }
  // Missing medians (all runs aborted) sort last.
  std::stable_sort(rows.begin(), rows.end(), [](const TableRow& a, const TableRow& b) {
    if (std::isnan(a.median_test_err)) return false;
    if (std::isnan(b.median_test_err)) return true;
    return a.median_test_err < b.median_test_err;
  });
  write_grid(dir, "sweep", cfg, rows);
  out << "Discriminator sweep (params/FLOPs are the discriminator's), ranked by median student test error:\n\n"
      << markdown_table(rows) << "\noutput: " << dir.string() << "\n";
  bool aborted = std::any_of(rows.begin(), rows.end(), [](const TableRow& r) { return r.aborted() > 0; });
  aborted = aborted || std::any_of(teachers.begin(), teachers.end(), [](const TeacherRun& t) { return t.outcome.aborted; });
  return aborted ? 1 : 0;
}

int cmd_compare(const ExperimentConfig& cfg, const CommandOptions& opts, std::ostream& out) {
  const DataBundle data = load_data(cfg);
  const auto dir = prepare_output_dir(opts.out, "compare", opts.overwrite);
  const auto runs_dir = dir / "runs";
  std::filesystem::create_directories(runs_dir);
  Log log(opts.quiet);
  const auto& methods = cfg.compare_methods;
  const std::size_t n_seeds = cfg.seeds.size();
  const bool needs_teacher = std::any_of(methods.begin(), methods.end(), [](const std::string& m) { return m != "supervised_student"; });

  // One job per seed; the seed's teacher feeds every distillation method.
  std::vector<std::vector<RunOutcome>> by_seed(n_seeds);
  std::exception_ptr config_error;
  std::mutex mu;
  run_parallel(n_seeds, opts.jobs, [&](std::size_t i) {
    const std::uint64_t seed = cfg.seeds[i];
    try {
      std::optional<TeacherRun> teacher;
      if (needs_teacher) teacher = obtain_teacher(cfg, data, seed, "supervised_teacher");
      for (const auto& method : methods) {
        RunOutcome r;
        std::optional<Network> model;
        if (method == "supervised_teacher") {
          r = teacher->outcome;
          if (teacher->network) model = teacher->network->clone();
        } else {
          r = run_student_method(method, cfg, data, teacher ? &*teacher : nullptr, seed, cfg.d_hidden, &model);
        }
        write_run(runs_dir, cfg, r, model ? &*model : nullptr);
        log("[compare] " + describe(r));
        by_seed[i].push_back(std::move(r));
      }
    } catch (...) {
      std::lock_guard lock(mu);
      if (!config_error) config_error = std::current_exception();
    }
  });
  if (config_error) std::rethrow_exception(config_error);

  std::vector<TableRow> rows;
  for (std::size_t m = 0; m < methods.size(); ++m) {
    TableRow row;
    row.method = methods[m];
    const NetworkSpec spec = methods[m] == "supervised_teacher" && cfg.teacher.checkpoint.empty()
                                 ? teacher_spec(cfg, data.train)
                             : methods[m] == "supervised_teacher"
                                 ? load_checkpoint(resolve_data_path(cfg, cfg.teacher.checkpoint)).spec()
                                 : student_spec(cfg, data.train);
    row.params = count_params(spec);
    row.flops = estimate_flops(spec);
    for (std::size_t s = 0; s < n_seeds; ++s) row.runs.push_back(by_seed[s][m]);
    finalize_row(row);
    rows.push_back(std::move(row));
  }
  write_grid(dir, "table", cfg, rows);
  out << markdown_table(rows) << "\noutput: " << dir.string() << "\n";
  return std::any_of(rows.begin(), rows.end(), [](const TableRow& r) { return r.aborted() > 0; }) ? 1 : 0;
}

int cmd_gradcheck(std::uint64_t seed, std::ostream& out) {
  const auto start = std::chrono::steady_clock::now();
  const GradCheckReport r = run_gradcheck_suite(seed);
  const double seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  out << "op instances: " << r.op_instances << "\nnetworks: " << r.networks << "\nvalues checked: " << r.values_checked
      << "\nmax relative error: " << r.max_rel_error << " (" << r.worst_case << ")\ntolerance: " << kGradRelTolerance
      << "\ntime: " << std::fixed << std::setprecision(2) << seconds << " s\n"
      << (r.passed() ? "PASS" : "FAIL") << "\n";
  return r.passed() ? 0 : 1;
}

}  // namespace advdistill
