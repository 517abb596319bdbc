#include "advdistill/train.hpp"

#include <cmath>
#include <functional>

#include "advdistill/errors.hpp"

namespace advdistill {

std::string to_string(DInput input) { return input == DInput::features ? "features" : "logits"; }

DInput parse_d_input(const std::string& name) {
  if (name == "features") return DInput::features;
  if (name == "logits") return DInput::logits;
  throw ConfigError("unknown discriminator input '" + name + "' (expected features or logits)");
}

std::string to_string(BaselineKind kind) {
  switch (kind) {
    case BaselineKind::supervised: return "supervised";
    case BaselineKind::l2_logits: return "l2_logits";
    case BaselineKind::kd: return "kd";
  }
  return "?";
}

BaselineKind parse_baseline(const std::string& name) {
  for (auto k : {BaselineKind::supervised, BaselineKind::l2_logits, BaselineKind::kd}) {
    if (to_string(k) == name) return k;
  }
  throw ConfigError("unknown baseline '" + name + "' (expected supervised, l2_logits or kd)");
}

// ---- configuration ----

void TrainConfig::validate() const {
  optimizer.validate();
  if (batch_size == 0) throw ConfigError("batch_size must be positive");
  if (!(decay_fraction >= 0.0 && decay_fraction <= 1.0)) throw ConfigError("decay_fraction must lie in [0, 1]");
  if (augment && augment_policy.flip && !(augment_policy.flip_probability >= 0.0 && augment_policy.flip_probability <= 1.0)) {
    throw ConfigError("flip probability must lie in [0, 1]");
  }
}

OptimizerConfig TrainConfig::scheduled_optimizer() const {
  OptimizerConfig c = optimizer;
  c.decay_step = decay_fraction > 0.0
                     ? static_cast<std::size_t>(std::llround(decay_fraction * static_cast<double>(total_steps)))
                     : 0;
  return c;
}

void CompressionConfig::validate() const {
  train.validate();
  d_optimizer.validate();
  if (!(lambda >= 0.0) || !std::isfinite(lambda)) throw ConfigError("lambda must be finite and non-negative");
  if (!(mu >= 0.0) || !std::isfinite(mu)) throw ConfigError("mu must be finite and non-negative");
  if (!(dropout_rate >= 0.0 && dropout_rate < 1.0)) throw ConfigError("dropout rate must lie in [0, 1)");
  if (d_steps == 0) throw ConfigError("d_steps must be at least 1");
}

nlohmann::json to_json(const OptimizerConfig& c) {
  return {{"kind", to_string(c.kind)},   {"learning_rate", c.learning_rate}, {"momentum", c.momentum},
          {"weight_decay", c.weight_decay}, {"beta1", c.beta1},             {"beta2", c.beta2},
          {"epsilon", c.epsilon},         {"decay_step", c.decay_step},     {"decay_factor", c.decay_factor}};
}

nlohmann::json to_json(const TrainConfig& c) {
  return {{"optimizer", to_json(c.scheduled_optimizer())},
          {"batch_size", c.batch_size},
          {"total_steps", c.total_steps},
          {"decay_fraction", c.decay_fraction},
          {"seed", c.seed},
          {"eval_every", c.eval_every},
          {"augment", c.augment},
          {"augment_flip", c.augment_policy.flip},
          {"augment_flip_probability", c.augment_policy.flip_probability},
          {"augment_crop_padding", c.augment_policy.crop_padding}};
}

nlohmann::json to_json(const CompressionConfig& c) {
  OptimizerConfig d = c.d_optimizer;
  d.decay_step = c.train.scheduled_optimizer().decay_step;
  return {{"train", to_json(c.train)},
          {"d_optimizer", to_json(d)},
          {"lambda", c.lambda},
          {"mu", c.mu},
          {"regularizer", to_string(c.regularizer)},
          {"d_input", to_string(c.d_input)},
          {"dropout_rate", c.dropout_rate},
          {"student_dropout", c.student_dropout},
          {"adv_sample_dropout", c.adv_sample_dropout},
          {"d_steps", c.d_steps}};
}

// ---- compression step ----

namespace {

Tensor d_input_of(const ForwardResult& fr, DInput input) {
  if (input == DInput::logits) return fr.logits;
  return fr.feature.rank() == 2 ? fr.feature : flatten(fr.feature);
}

void require_finite(double v, const char* what, std::size_t step) {
  if (!std::isfinite(v)) throw DivergenceError(std::string(what) + " is not finite", step);
}

// Freezes a network for a scope; restores trainability on exit.
class FreezeScope {
 public:
  explicit FreezeScope(Network& net) : net_(net) { net_.freeze(); }
  ~FreezeScope() { net_.unfreeze(); }
  FreezeScope(const FreezeScope&) = delete;
  FreezeScope& operator=(const FreezeScope&) = delete;

 private:
  Network& net_;
};

double binary_accuracy(std::span<const double> d_teacher, std::span<const double> d_student) {
  std::size_t correct = 0;
  for (double p : d_teacher) correct += p > 0.5;
  for (double p : d_student) correct += p < 0.5;
  return static_cast<double>(correct) / static_cast<double>(d_teacher.size() + d_student.size());
}

}  // namespace

LossBreakdown compress_step(const Network& teacher, Network& student, Network& discriminator, const BatchRecord& batch,
                            const CompressionConfig& cfg, Optimizer& student_opt, Optimizer& d_opt,
                            std::mt19937_64& rng, StepObserver* observer) {
  if (!teacher.frozen()) throw ContractError("compress_step: the teacher must be frozen");
  const std::size_t step = student_opt.steps_taken() + 1;
  const std::size_t n = batch.inputs.dim(0);
  const bool adversarial_samples = cfg.regularizer == RegularizerKind::adversarial_samples;

  Tensor teacher_logits, teacher_in;
  {
    NoGradGuard no_grad;
    auto tf = teacher.forward(batch.inputs, Mode::eval);
    teacher_logits = tf.logits;
    teacher_in = d_input_of(tf, cfg.d_input);
  }

  LossBreakdown out;
  PhaseTrace trace;

  // D phase: true labels for both samples, plus the configured regularizer.
  for (std::size_t k = 0; k < cfg.d_steps; ++k) {
    Tensor student_in;
    {
      NoGradGuard no_grad;
      student_in = d_input_of(student.forward(batch.inputs, Mode::eval), cfg.d_input);
    }
    trace.true_sample = Mode::eval;
    std::vector<Tensor> parts{teacher_in, student_in};
    if (adversarial_samples) {
      trace.adversarial_sample = cfg.adv_sample_dropout ? Mode::train : Mode::eval;
      trace.adversarial_sample_used = true;
      parts.push_back(dropout(student_in, cfg.dropout_rate, trace.adversarial_sample, &rng));
    }
    Tensor probs = discriminator.forward(concat_rows(parts), Mode::eval).logits;
    Tensor d_teacher = slice_rows(probs, 0, n);
    Tensor d_student = slice_rows(probs, n, 2 * n);
    Tensor d_adversarial = adversarial_samples ? slice_rows(probs, 2 * n, 3 * n) : Tensor();
    Tensor adv = adv_loss(d_teacher, d_student);
    Tensor reg = d_regularizer(cfg.regularizer, discriminator.parameters(), d_adversarial, cfg.mu);
    Tensor objective = add(adv, reg);

    out.adv_d = adv.item();
    out.regul = reg.item();
    out.total_d = objective.item();
    out.d_accuracy = binary_accuracy(d_teacher.data(), d_student.data());
    require_finite(out.total_d, "discriminator objective", step);

    d_opt.zero_grad();
    neg(objective).backward();
    d_opt.step();
  }
  if (observer) observer->after_d_phase(trace);

  // Student phase: student samples labeled teacher, dropout on the D branch.
  {
    FreezeScope d_frozen(discriminator);
    auto sf = student.forward(batch.inputs, Mode::train, &rng);
    trace.student_branch = cfg.student_dropout ? Mode::train : Mode::eval;
    Tensor branch = dropout(d_input_of(sf, cfg.d_input), cfg.dropout_rate, trace.student_branch, &rng);
    Tensor d_student = discriminator.forward(branch, Mode::eval).logits;
    Tensor adv = student_adv_loss(d_student);
    Tensor data = data_loss(teacher_logits, sf.logits);
    Tensor total = add(adv, scale(data, cfg.lambda));

    out.adv_student = adv.item();
    out.data = data.item();
    out.total_student = total.item();
    require_finite(out.total_student, "student objective", step);

    student_opt.zero_grad();
    total.backward();
    student_opt.step();
  }
  if (observer) observer->after_student_phase(trace);
  return out;
}

// ---- evaluation ----

namespace {

constexpr std::size_t kEvalChunk = 1000;

template <typename Fn>
void for_each_chunk(const Dataset& ds, Fn fn) {
  NoGradGuard no_grad;
  for (std::size_t begin = 0; begin < ds.size(); begin += kEvalChunk) {
    const std::size_t end = std::min(ds.size(), begin + kEvalChunk);
    fn(slice_batch(ds, begin, end));
  }
}

std::size_t argmax_row(std::span<const double> logits, std::size_t row, std::size_t c) {
  std::size_t best = 0;
  for (std::size_t j = 1; j < c; ++j) {
    if (logits[row * c + j] > logits[row * c + best]) best = j;
  }
  return best;
}

}  // namespace

double error_rate(const Network& net, const Dataset& ds) {
  std::size_t wrong = 0;
  for_each_chunk(ds, [&](const BatchRecord& b) {
    const Tensor logits = net.forward(b.inputs, Mode::eval).logits;
    const std::size_t c = logits.dim(1);
    for (std::size_t i = 0; i < b.labels.size(); ++i) {
      wrong += argmax_row(logits.data(), i, c) != static_cast<std::size_t>(b.labels[i]);
    }
  });
  return static_cast<double>(wrong) / static_cast<double>(ds.size());
}

double disagreement(const Network& a, const Network& b, const Dataset& ds) {
  std::size_t differ = 0;
  for_each_chunk(ds, [&](const BatchRecord& batch) {
    const Tensor la = a.forward(batch.inputs, Mode::eval).logits;
    const Tensor lb = b.forward(batch.inputs, Mode::eval).logits;
    const std::size_t c = la.dim(1);
    for (std::size_t i = 0; i < batch.labels.size(); ++i) differ += argmax_row(la.data(), i, c) != argmax_row(lb.data(), i, c);
  });
  return static_cast<double>(differ) / static_cast<double>(ds.size());
}

double mean_logit_l2(const Network& teacher, const Network& student, const Dataset& ds) {
  double total = 0.0;
  for_each_chunk(ds, [&](const BatchRecord& b) {
    const Tensor lt = teacher.forward(b.inputs, Mode::eval).logits;
    const Tensor ls = student.forward(b.inputs, Mode::eval).logits;
    total += data_loss(lt, ls).item() * static_cast<double>(b.labels.size());
  });
  return total / static_cast<double>(ds.size());
}

double discriminator_accuracy(const Network& teacher, const Network& student, const Network& discriminator,
                              const Dataset& ds, DInput input) {
  double correct = 0.0;
  for_each_chunk(ds, [&](const BatchRecord& b) {
    const Tensor dt = discriminator.forward(d_input_of(teacher.forward(b.inputs, Mode::eval), input), Mode::eval).logits;
    const Tensor ds_ = discriminator.forward(d_input_of(student.forward(b.inputs, Mode::eval), input), Mode::eval).logits;
    correct += binary_accuracy(dt.data(), ds_.data()) * 2.0 * static_cast<double>(b.labels.size());
  });
  return correct / (2.0 * static_cast<double>(ds.size()));
}

// ---- run loops ----

namespace {

// Independent streams derived from one run seed.
struct RunStreams {
  std::mt19937_64 init, noise, augment;
  std::uint64_t batch_seed;

  explicit RunStreams(std::uint64_t seed) {
    std::seed_seq seq{seed, std::uint64_t{0x5eedu}};
    std::vector<std::uint64_t> s(4);
    std::vector<std::uint32_t> raw(8);
    seq.generate(raw.begin(), raw.end());
    for (std::size_t i = 0; i < 4; ++i) s[i] = (std::uint64_t{raw[2 * i]} << 32) | raw[2 * i + 1];
    init.seed(s[0]);
    noise.seed(s[1]);
    augment.seed(s[2]);
    batch_seed = s[3];
  }
};

void require_input_match(const NetworkSpec& spec, const Dataset& ds, const char* role) {
  if (spec.input_shape != ds.sample_shape()) {
    throw DimensionError(std::string(role) + " '" + spec.name + "' expects samples " + shape_str(spec.input_shape) +
                         " but the dataset holds " + shape_str(ds.sample_shape()));
  }
  if (spec.num_classes() != ds.num_classes) {
    throw DimensionError(std::string(role) + " '" + spec.name + "' has " + std::to_string(spec.num_classes()) +
                         " outputs but the dataset has " + std::to_string(ds.num_classes) + " classes");
  }
}

bool is_eval_step(std::size_t step, const TrainConfig& cfg) {
  return step == cfg.total_steps || (cfg.eval_every > 0 && step % cfg.eval_every == 0);
}

BatchRecord maybe_augment(BatchRecord batch, const TrainConfig& cfg, std::mt19937_64& rng) {
  return cfg.augment ? augment(batch, cfg.augment_policy, rng) : batch;
}

void finish(RunMetrics& m) {
  if (!m.evals.empty()) {
    m.final_train_err = m.evals.back().train_err;
    m.final_test_err = m.evals.back().test_err;
    m.final_test_logit_l2 = m.evals.back().test_logit_l2;
  }
}

using BatchLoss = std::function<Tensor(const BatchRecord&, const ForwardResult&)>;

TrainResult supervised_loop(const std::string& kind, const NetworkSpec& spec, const Network* teacher,
                            const Dataset& train, const Dataset& test, const TrainConfig& cfg, const BatchLoss& loss_fn) {
  cfg.validate();
  require_input_match(spec, train, "network");
  RunStreams streams(cfg.seed);
  Network net = build(spec, streams.init);
  Optimizer opt(cfg.scheduled_optimizer(), net.parameters());
  BatchIterator batches(train, cfg.batch_size, streams.batch_seed);

  RunMetrics m;
  m.kind = kind;
  m.seed = cfg.seed;
  m.config = to_json(cfg);
  m.params = count_params(net);
  m.flops = estimate_flops(net);

  auto evaluate = [&](std::size_t step) {
    EvalRecord e;
    e.step = step;
    e.train_err = error_rate(net, train);
    e.test_err = error_rate(net, test);
    if (teacher) e.test_logit_l2 = mean_logit_l2(*teacher, net, test);
    m.evals.push_back(e);
    return e;
  };
  if (cfg.total_steps == 0) evaluate(0);

  for (std::size_t step = 1; step <= cfg.total_steps; ++step) {
    BatchRecord batch = maybe_augment(batches.next(), cfg, streams.augment);
    StepRecord rec;
    rec.step = step;
    rec.lr = opt.current_lr();
    auto fr = net.forward(batch.inputs, Mode::train, &streams.noise);
    Tensor loss = loss_fn(batch, fr);
    rec.data_loss = loss.item();
    require_finite(rec.data_loss, (kind + " loss").c_str(), step);
    opt.zero_grad();
    loss.backward();
    opt.step();
    if (is_eval_step(step, cfg)) {
      auto e = evaluate(step);
      rec.train_err = e.train_err;
      rec.test_err = e.test_err;
    }
    m.steps.push_back(rec);
  }
  finish(m);
  return {std::move(net), std::move(m)};
}

Tensor teacher_logits_for(const Network& teacher, const BatchRecord& batch) {
  NoGradGuard no_grad;
  return teacher.forward(batch.inputs, Mode::eval).logits;
}

}  // namespace

TrainResult train_teacher(const NetworkSpec& spec, const Dataset& train, const Dataset& test, const TrainConfig& cfg) {
  return supervised_loop("teacher", spec, nullptr, train, test, cfg, [](const BatchRecord& b, const ForwardResult& fr) {
    return ce_loss(fr.logits, b.labels);
  });
}

TrainResult run_baseline(BaselineKind kind, const Network* teacher, const NetworkSpec& student_spec,
                         const Dataset& train, const Dataset& test, const TrainConfig& cfg, double temperature) {
  if (kind != BaselineKind::supervised && teacher == nullptr) {
    throw ConfigError("baseline '" + to_string(kind) + "' needs a teacher network");
  }
  if (kind == BaselineKind::kd && !(temperature > 0.0)) throw ConfigError("kd temperature must be positive");
  std::optional<Network> frozen;
  if (teacher) {
    require_input_match(teacher->spec(), train, "teacher");
    frozen = teacher->clone();
    frozen->freeze();
  }
  const Network* t = frozen ? &*frozen : nullptr;
  BatchLoss loss;
  switch (kind) {
    case BaselineKind::supervised:
      loss = [](const BatchRecord& b, const ForwardResult& fr) { return ce_loss(fr.logits, b.labels); };
      break;
    case BaselineKind::l2_logits:
      loss = [t](const BatchRecord& b, const ForwardResult& fr) { return data_loss(teacher_logits_for(*t, b), fr.logits); };
      break;
    case BaselineKind::kd:
      loss = [t, temperature](const BatchRecord& b, const ForwardResult& fr) {
        return kd_loss(teacher_logits_for(*t, b), fr.logits, temperature);
      };
      break;
  }
  auto result = supervised_loop(to_string(kind), student_spec, t, train, test, cfg, loss);
  if (kind == BaselineKind::kd) result.metrics.config["temperature"] = temperature;
  return result;
}

NetworkSpec discriminator_for(const Network& teacher, const NetworkSpec& student_spec, DInput input,
                              const std::vector<std::size_t>& hidden) {
  std::size_t dim = 0;
  if (input == DInput::features) {
    dim = teacher.spec().feature_dim();
    if (student_spec.feature_dim() != dim) {
      throw ConfigError("teacher feature tap has " + std::to_string(dim) + " values but student '" + student_spec.name +
                        "' has " + std::to_string(student_spec.feature_dim()) +
                        "; feature-input discriminators need equal widths (or use d_input = logits)");
    }
  } else {
    dim = teacher.spec().num_classes();
  }
  return make_discriminator(dim, hidden);
}

CompressionResult run_compression(const Network& teacher, const NetworkSpec& student_spec, const NetworkSpec& d_spec,
                                  const Dataset& train, const Dataset& test, const CompressionConfig& cfg,
                                  StepObserver* observer) {
  cfg.validate();
  require_input_match(teacher.spec(), train, "teacher");
  require_input_match(student_spec, train, "student");
  const std::size_t d_in = cfg.d_input == DInput::features ? student_spec.feature_dim() : student_spec.num_classes();
  const std::size_t t_in = cfg.d_input == DInput::features ? teacher.spec().feature_dim() : teacher.spec().num_classes();
  if (d_spec.input_shape != Shape{d_in} || t_in != d_in) {
    throw DimensionError("discriminator '" + d_spec.name + "' takes " + shape_str(d_spec.input_shape) +
                         " but teacher/student provide [" + std::to_string(t_in) + "]/[" + std::to_string(d_in) + "] " +
                         to_string(cfg.d_input));
  }

  Network frozen_teacher = teacher.clone();
  frozen_teacher.freeze();

  RunStreams streams(cfg.train.seed);
  Network student = build(student_spec, streams.init);
  Network discriminator = build(d_spec, streams.init);
  const OptimizerConfig s_cfg = cfg.train.scheduled_optimizer();
  OptimizerConfig d_cfg = cfg.d_optimizer;
  d_cfg.decay_step = s_cfg.decay_step;
  Optimizer student_opt(s_cfg, student.parameters());
  Optimizer d_opt(d_cfg, discriminator.parameters());
  BatchIterator batches(train, cfg.train.batch_size, streams.batch_seed);

  RunMetrics m;
  m.kind = "adversarial";
  m.seed = cfg.train.seed;
  m.config = to_json(cfg);
  m.params = count_params(student);
  m.flops = estimate_flops(student);

  auto evaluate = [&](std::size_t step) {
    EvalRecord e;
    e.step = step;
    e.train_err = error_rate(student, train);
    e.test_err = error_rate(student, test);
    e.d_heldout_accuracy = discriminator_accuracy(frozen_teacher, student, discriminator, test, cfg.d_input);
    e.test_logit_l2 = mean_logit_l2(frozen_teacher, student, test);
    m.evals.push_back(e);
    return e;
  };
  if (cfg.train.total_steps == 0) evaluate(0);

  for (std::size_t step = 1; step <= cfg.train.total_steps; ++step) {
    BatchRecord batch = maybe_augment(batches.next(), cfg.train, streams.augment);
    StepRecord rec;
    rec.step = step;
    rec.lr = student_opt.current_lr();
    const auto losses =
        compress_step(frozen_teacher, student, discriminator, batch, cfg, student_opt, d_opt, streams.noise, observer);
    rec.adv_d = losses.adv_d;
    rec.adv_student = losses.adv_student;
    rec.data_loss = losses.data;
    rec.regul = losses.regul;
    rec.d_accuracy = losses.d_accuracy;
    if (is_eval_step(step, cfg.train)) {
      auto e = evaluate(step);
      rec.train_err = e.train_err;
      rec.test_err = e.test_err;
    }
    m.steps.push_back(rec);
  }
  finish(m);
  return {std::move(student), std::move(discriminator), std::move(m)};
}

CompressionResult run_compression(const std::filesystem::path& teacher_checkpoint, const NetworkSpec& student_spec,
                                  const NetworkSpec& d_spec, const Dataset& train, const Dataset& test,
                                  const CompressionConfig& cfg) {
  return run_compression(load_checkpoint(teacher_checkpoint), student_spec, d_spec, train, test, cfg);
}

}  // namespace advdistill
