#include <gtest/gtest.h>

#include <cmath>
#include <memory>

#include "advdistill/errors.hpp"
#include "advdistill/train.hpp"

using namespace advdistill;

namespace {

struct Blobs {
  Dataset train, test;
};

Blobs make_blobs(std::size_t classes, std::size_t dims, double sep, std::size_t per_class, std::uint64_t seed = 1) {
  std::mt19937_64 rng(seed);
  Blobs b;
  b.train = gen_gaussian_blobs(classes, dims, per_class, sep, rng);
  b.test = gen_gaussian_blobs(classes, dims, per_class / 2, sep, rng, Split::test);
  return b;
}

TrainConfig quick_train(std::size_t steps, double lr = 0.01) {
  TrainConfig c;
  c.total_steps = steps;
  c.batch_size = 64;
  c.optimizer.learning_rate = lr;
  c.eval_every = 0;
  return c;
}

CompressionConfig quick_compression(std::size_t steps) {
  CompressionConfig c;
  c.train = quick_train(steps);
  c.d_optimizer.learning_rate = 0.001;
  return c;
}

class Compression : public ::testing::Test {
 protected:
  static void SetUpTestSuite() {
    data_ = std::make_unique<Blobs>(make_blobs(4, 8, 3.0, 200));
    auto r = train_teacher(teacher_mlp(8, 4), data_->train, data_->test, quick_train(600));
    teacher_ = std::make_unique<Network>(std::move(r.network));
    teacher_->freeze();
  }
  static void TearDownTestSuite() {
    teacher_.reset();
    data_.reset();
  }

  static NetworkSpec d_spec(DInput input = DInput::features) {
    return discriminator_for(*teacher_, student_mlp(8, 4), input, {32, 32});
  }

  static std::unique_ptr<Blobs> data_;
  static std::unique_ptr<Network> teacher_;
};

std::unique_ptr<Blobs> Compression::data_;
std::unique_ptr<Network> Compression::teacher_;

struct Recorder : StepObserver {
  const Network* student = nullptr;
  const Network* discriminator = nullptr;
  std::vector<double> student_after_d, d_after_d;
  std::vector<PhaseTrace> d_traces, student_traces;
  void after_d_phase(const PhaseTrace& t) override {
    d_traces.push_back(t);
    if (student) student_after_d = student->snapshot();
    if (discriminator) d_after_d = discriminator->snapshot();
  }
  void after_student_phase(const PhaseTrace& t) override { student_traces.push_back(t); }
};

}  // namespace

TEST(Optimizer, SgdMomentumClosedForm) {
  OptimizerConfig c;
  c.learning_rate = 0.1;
  c.momentum = 0.9;
  c.weight_decay = 0.0;
  Tensor w({1, 1}, {1.0}, true);
  Optimizer opt(c, {w});
  for (double expected : {0.8, 0.46}) {
    opt.zero_grad();
    data_loss(Tensor::zeros({1, 1}), w).backward();  // d/dw w^2 = 2w
    opt.step();
    EXPECT_NEAR(w.data()[0], expected, 1e-12);
  }
}

TEST(Optimizer, WeightDecayPullsTowardZero) {
  OptimizerConfig c;
  c.learning_rate = 0.5;
  c.momentum = 0.0;
  c.weight_decay = 0.1;
  Tensor w({1}, {2.0}, true);
  Optimizer opt(c, {w});
  opt.zero_grad();
  scale(w, 0.0).backward();
  opt.step();
  EXPECT_NEAR(w.data()[0], 2.0 - 0.5 * 0.1 * 2.0, 1e-12);
}

TEST(Optimizer, StepDecayAtFortyPercent) {
  TrainConfig t = quick_train(10, 0.2);
  const auto c = t.scheduled_optimizer();
  EXPECT_EQ(c.decay_step, 4u);
  Tensor w({1}, {0.0}, true);
  Optimizer opt(c, {w});
  for (std::size_t s = 0; s < 10; ++s) {
    EXPECT_NEAR(opt.current_lr(), s < 4 ? 0.2 : 0.02, 1e-15) << s;
    opt.step();
  }
}

TEST_F(Compression, StepTouchesOnlyTheIntendedNetworks) {
  std::mt19937_64 rng(3);
  Network student = build(student_mlp(8, 4), rng);
  Network d = build(d_spec(), rng);
  auto cfg = quick_compression(1);
  Optimizer s_opt(cfg.train.optimizer, student.parameters()), d_opt(cfg.d_optimizer, d.parameters());
  const auto teacher0 = teacher_->snapshot(), student0 = student.snapshot(), d0 = d.snapshot();
  Recorder rec;
  rec.student = &student;
  rec.discriminator = &d;
  auto batch = slice_batch(data_->train, 0, 64);
  compress_step(*teacher_, student, d, batch, cfg, s_opt, d_opt, rng, &rec);

  EXPECT_EQ(teacher_->snapshot(), teacher0);
  // D phase moves D only; student phase moves the student only.
  EXPECT_EQ(rec.student_after_d, student0);
  EXPECT_NE(rec.d_after_d, d0);
  EXPECT_EQ(d.snapshot(), rec.d_after_d);
  EXPECT_NE(student.snapshot(), student0);
  EXPECT_FALSE(d.frozen());
}

TEST_F(Compression, DropoutModesFollowConfig) {
  for (bool student_dropout : {true, false})
    for (bool adv_dropout : {true, false})
      for (auto reg : {RegularizerKind::adversarial_samples, RegularizerKind::l2}) {
        std::mt19937_64 rng(4);
        Network student = build(student_mlp(8, 4), rng);
        Network d = build(d_spec(), rng);
        auto cfg = quick_compression(1);
        cfg.student_dropout = student_dropout;
        cfg.adv_sample_dropout = adv_dropout;
        cfg.regularizer = reg;
        Optimizer s_opt(cfg.train.optimizer, student.parameters()), d_opt(cfg.d_optimizer, d.parameters());
        Recorder rec;
        compress_step(*teacher_, student, d, slice_batch(data_->train, 0, 32), cfg, s_opt, d_opt, rng, &rec);
        ASSERT_EQ(rec.d_traces.size(), 1u);
        ASSERT_EQ(rec.student_traces.size(), 1u);
        EXPECT_EQ(rec.d_traces[0].true_sample, Mode::eval);
        EXPECT_EQ(rec.d_traces[0].adversarial_sample_used, reg == RegularizerKind::adversarial_samples);
        if (reg == RegularizerKind::adversarial_samples) {
          EXPECT_EQ(rec.d_traces[0].adversarial_sample, adv_dropout ? Mode::train : Mode::eval);
        }
        EXPECT_EQ(rec.student_traces[0].student_branch, student_dropout ? Mode::train : Mode::eval);
      }
}

TEST_F(Compression, MultipleDiscriminatorSteps) {
  std::mt19937_64 rng(4);
  Network student = build(student_mlp(8, 4), rng);
  Network d = build(d_spec(), rng);
  auto cfg = quick_compression(1);
  cfg.d_steps = 3;
  Optimizer s_opt(cfg.train.optimizer, student.parameters()), d_opt(cfg.d_optimizer, d.parameters());
  compress_step(*teacher_, student, d, slice_batch(data_->train, 0, 32), cfg, s_opt, d_opt, rng);
  EXPECT_EQ(d_opt.steps_taken(), 3u);
  EXPECT_EQ(s_opt.steps_taken(), 1u);
}

TEST_F(Compression, RequiresFrozenTeacher) {
  std::mt19937_64 rng(5);
  Network teacher = teacher_->clone();
  teacher.unfreeze();
  Network student = build(student_mlp(8, 4), rng);
  Network d = build(d_spec(), rng);
  auto cfg = quick_compression(1);
  Optimizer s_opt(cfg.train.optimizer, student.parameters()), d_opt(cfg.d_optimizer, d.parameters());
  EXPECT_THROW(compress_step(teacher, student, d, slice_batch(data_->train, 0, 8), cfg, s_opt, d_opt, rng),
               ContractError);
}

TEST_F(Compression, LabelsAreNeverRead) {
  auto run = [&](bool scramble) {
    std::mt19937_64 rng(6);
    Network student = build(student_mlp(8, 4), rng);
    Network d = build(d_spec(), rng);
    auto cfg = quick_compression(1);
    Optimizer s_opt(cfg.train.optimizer, student.parameters()), d_opt(cfg.d_optimizer, d.parameters());
    auto batch = slice_batch(data_->train, 0, 32);
    if (scramble)
      for (auto& l : batch.labels) l = 99;
    compress_step(*teacher_, student, d, batch, cfg, s_opt, d_opt, rng);
    return student.snapshot();
  };
  EXPECT_EQ(run(false), run(true));
}

TEST_F(Compression, SameSeedIsBitIdentical) {
  auto cfg = quick_compression(60);
  cfg.train.eval_every = 20;
  auto a = run_compression(*teacher_, student_mlp(8, 4), d_spec(), data_->train, data_->test, cfg);
  auto b = run_compression(*teacher_, student_mlp(8, 4), d_spec(), data_->train, data_->test, cfg);
  EXPECT_EQ(a.student.snapshot(), b.student.snapshot());
  EXPECT_EQ(a.discriminator.snapshot(), b.discriminator.snapshot());
  EXPECT_EQ(summary_json(a.metrics).dump(), summary_json(b.metrics).dump());
  cfg.train.seed = 2;
  auto c = run_compression(*teacher_, student_mlp(8, 4), d_spec(), data_->train, data_->test, cfg);
  EXPECT_NE(a.student.snapshot(), c.student.snapshot());
}

TEST_F(Compression, ZeroStepsLeavesChanceError) {
  auto cfg = quick_compression(0);
  auto r = run_compression(*teacher_, student_mlp(8, 4), d_spec(), data_->train, data_->test, cfg);
  ASSERT_EQ(r.metrics.evals.size(), 1u);
  EXPECT_GE(r.metrics.final_test_err, 0.5);
  EXPECT_TRUE(r.metrics.steps.empty());
}

TEST_F(Compression, FreshDiscriminatorNearChance) {
  auto cfg = quick_compression(1);
  // A single random D can still lean on the teacher/student scale gap, so the
  // band is checked on the median over seeds.
  std::vector<double> acc;
  for (std::uint64_t seed = 1; seed <= 20; ++seed) {
    cfg.train.seed = seed;
    auto r = run_compression(*teacher_, student_mlp(8, 4), d_spec(), data_->train, data_->test, cfg);
    acc.push_back(r.metrics.steps[0].d_accuracy);
  }
  EXPECT_NEAR(median(acc), 0.5, 0.15);
}

TEST_F(Compression, DataTermShrinksLogitDistance) {
  auto cfg = quick_compression(400);
  cfg.train.eval_every = 50;
  cfg.lambda = 100.0;
  cfg.train.optimizer.learning_rate = 0.0002;
  auto r = run_compression(*teacher_, student_mlp(8, 4), d_spec(), data_->train, data_->test, cfg);
  ASSERT_EQ(r.metrics.evals.size(), 8u);
  for (std::size_t i = 1; i < r.metrics.evals.size(); ++i) {
    EXPECT_LT(r.metrics.evals[i].test_logit_l2, r.metrics.evals[i - 1].test_logit_l2) << i;
  }

  auto no_data = cfg;
  no_data.lambda = 0.0;
  auto z = run_compression(*teacher_, student_mlp(8, 4), d_spec(), data_->train, data_->test, no_data);
  EXPECT_GT(z.metrics.final_test_logit_l2, r.metrics.final_test_logit_l2);
}

TEST_F(Compression, InputChoiceChangesTraining) {
  auto cfg = quick_compression(30);
  auto f = run_compression(*teacher_, student_mlp(8, 4), d_spec(DInput::features), data_->train, data_->test, cfg);
  cfg.d_input = DInput::logits;
  auto l = run_compression(*teacher_, student_mlp(8, 4), d_spec(DInput::logits), data_->train, data_->test, cfg);
  EXPECT_NE(f.student.snapshot(), l.student.snapshot());
  EXPECT_EQ(l.discriminator.spec().input_shape, (Shape{4}));
  EXPECT_THROW(run_compression(*teacher_, student_mlp(8, 4), d_spec(DInput::features), data_->train, data_->test, cfg),
               DimensionError);
}

TEST_F(Compression, FeatureWidthMismatchIsConfigError) {
  NetworkSpec narrow;
  narrow.name = "narrow";
  narrow.input_shape = {8};
  narrow.layers = {LayerSpec::dense(8, 5), LayerSpec::relu(), LayerSpec::dense(5, 4)};
  narrow.feature_tap = 1;
  EXPECT_THROW(discriminator_for(*teacher_, narrow, DInput::features, {8}), ConfigError);
  EXPECT_NO_THROW(discriminator_for(*teacher_, narrow, DInput::logits, {8}));
}

TEST_F(Compression, SameArchitectureL2MimicAgrees) {
  auto r = run_baseline(BaselineKind::l2_logits, teacher_.get(), teacher_mlp(8, 4), data_->train, data_->test,
                        quick_train(1500, 0.01));
  EXPECT_LT(disagreement(*teacher_, r.network, data_->test), 0.01);
}

TEST_F(Compression, KdAtUnitTemperatureLearns) {
  const double teacher_err = error_rate(*teacher_, data_->test);
  auto r = run_baseline(BaselineKind::kd, teacher_.get(), student_mlp(8, 4), data_->train, data_->test,
                        quick_train(600), 1.0);
  EXPECT_LT(r.metrics.final_test_err, teacher_err + 0.05);
  EXPECT_EQ(r.metrics.config["temperature"], 1.0);
}

TEST_F(Compression, BaselinesCheckTheirInputs) {
  EXPECT_THROW(run_baseline(BaselineKind::kd, nullptr, student_mlp(8, 4), data_->train, data_->test, quick_train(1)),
               ConfigError);
  EXPECT_THROW(run_baseline(BaselineKind::kd, teacher_.get(), student_mlp(8, 4), data_->train, data_->test,
                            quick_train(1), 0.0),
               ConfigError);
  EXPECT_NO_THROW(
      run_baseline(BaselineKind::supervised, nullptr, student_mlp(8, 4), data_->train, data_->test, quick_train(1)));
}

TEST(Teacher, SeparableBlobsTrainWell) {
  auto data = make_blobs(2, 2, 3.0, 300);
  auto r = train_teacher(teacher_mlp(2, 2), data.train, data.test, quick_train(500));
  EXPECT_LT(r.metrics.final_train_err, 0.02);
  EXPECT_EQ(r.metrics.kind, "teacher");
}

TEST(Teacher, RecordsEvaluations) {
  auto data = make_blobs(3, 4, 3.0, 50);
  auto cfg = quick_train(25);
  cfg.eval_every = 10;
  auto r = train_teacher(teacher_mlp(4, 3), data.train, data.test, cfg);
  ASSERT_EQ(r.metrics.steps.size(), 25u);
  ASSERT_EQ(r.metrics.evals.size(), 3u);
  EXPECT_EQ(r.metrics.evals[0].step, 10u);
  EXPECT_EQ(r.metrics.evals.back().step, 25u);
  EXPECT_FALSE(std::isnan(r.metrics.steps[9].test_err));
  EXPECT_TRUE(std::isnan(r.metrics.steps[8].test_err));
}

TEST(Teacher, HugeLearningRateDiverges) {
  auto data = make_blobs(2, 4, 3.0, 100);
  try {
    train_teacher(teacher_mlp(4, 2), data.train, data.test, quick_train(200, 1e8));
    FAIL() << "expected DivergenceError";
  } catch (const DivergenceError& e) {
    EXPECT_GE(e.step(), 1u);
  }
}

TEST(Teacher, InputMismatchIsReported) {
  auto data = make_blobs(2, 4, 3.0, 10);
  EXPECT_THROW(train_teacher(teacher_mlp(5, 2), data.train, data.test, quick_train(1)), Error);
}
