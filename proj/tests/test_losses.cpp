#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <random>

#include "advdistill/errors.hpp"
#include "advdistill/gradcheck.hpp"
#include "advdistill/losses.hpp"
#include "oracles.hpp"

using namespace advdistill;

namespace {

Tensor col(std::vector<double> v) {
  const std::size_t n = v.size();
  return Tensor({n, 1}, std::move(v));
}

std::vector<double> values(const Tensor& t) { return {t.data().begin(), t.data().end()}; }

Tensor random_tensor(const Shape& s, std::mt19937_64& rng, double lo, double hi) {
  std::uniform_real_distribution<double> d(lo, hi);
  std::vector<double> v(shape_numel(s));
  for (auto& x : v) x = d(rng);
  return Tensor(s, v);
}

}  // namespace

TEST(AdvLoss, Examples) {
  EXPECT_NEAR(adv_loss(col({0.8}), col({0.3})).item(), -0.5798, 1e-4);
  EXPECT_NEAR(adv_loss(col({0.5}), col({0.5})).item(), -1.3863, 1e-4);
  // Perfect D approaches the supremum 0.
  EXPECT_NEAR(adv_loss(col({1.0}), col({0.0})).item(), 0.0, 1e-6);
  EXPECT_LT(adv_loss(col({1.0}), col({0.0})).item(), 0.0);
}

TEST(AdvLoss, Contracts) {
  EXPECT_THROW(adv_loss(col({1.2}), col({0.5})), ContractError);
  EXPECT_THROW(adv_loss(col({0.5}), col({-0.1})), ContractError);
  EXPECT_THROW(adv_loss(Tensor({1, 2}, {0.5, 0.5}), col({0.5})), DimensionError);
}

TEST(AdvLoss, InvariantUnderBatchPermutation) {
  std::vector<double> t{0.9, 0.2, 0.6, 0.4}, s{0.1, 0.7, 0.3, 0.5};
  const double base = adv_loss(col(t), col(s)).item();
  std::mt19937_64 rng(3);
  for (int i = 0; i < 10; ++i) {
    std::shuffle(t.begin(), t.end(), rng);
    std::shuffle(s.begin(), s.end(), rng);
    EXPECT_NEAR(adv_loss(col(t), col(s)).item(), base, 1e-12);
  }
}

TEST(StudentAdvLoss, Examples) {
  EXPECT_NEAR(student_adv_loss(col({std::nextafter(1.0, 0.0)})).item(), 0.0, 1e-6);
  EXPECT_NEAR(student_adv_loss(col({0.5})).item(), 0.6931, 1e-4);
  EXPECT_NEAR(student_adv_loss(col({0.25, 0.25})).item(), 1.3863, 1e-4);
}

TEST(StudentAdvLoss, StrictlyDecreasingInD) {
  double prev = student_adv_loss(col({0.01})).item();
  for (double d = 0.05; d < 1.0; d += 0.05) {
    const double cur = student_adv_loss(col({d})).item();
    EXPECT_LT(cur, prev);
    prev = cur;
  }
}

TEST(DataLoss, Examples) {
  EXPECT_EQ(data_loss(Tensor({1, 2}, {1, 2}), Tensor({1, 2}, {1, 2})).item(), 0.0);
  EXPECT_NEAR(data_loss(Tensor({1, 2}, {1, 2}), Tensor({1, 2}, {0, 0})).item(), 5.0, 1e-12);
}

TEST(DataLoss, ZeroOnlyForIdenticalLogits) {
  std::mt19937_64 rng(4);
  for (int i = 0; i < 50; ++i) {
    Tensor t = random_tensor({3, 4}, rng, -2, 2);
    Tensor s = t.clone();
    s.mutable_data()[rng() % 12] += 1e-6;
    EXPECT_GT(data_loss(t, s).item(), 0.0);
    EXPECT_EQ(data_loss(t, t.clone()).item(), 0.0);
  }
}

TEST(DataLoss, GradientIsTwiceDifferenceOverN) {
  Tensor t({2, 2}, {1, 2, 3, 4});
  Tensor s({2, 2}, {0, 1, 5, 2}, true);
  data_loss(t, s).backward();
  for (std::size_t i = 0; i < 4; ++i) EXPECT_NEAR(s.grad()[i], 2.0 * (s.data()[i] - t.data()[i]) / 2.0, 1e-12);
  auto r = check_gradients([&](const std::vector<Tensor>& in) { return data_loss(t, in[0]); },
                           {Tensor({2, 2}, {0, 1, 5, 2})});
  EXPECT_LT(r.max_rel_error, kGradRelTolerance);
}

TEST(DataLoss, TeacherSideIsDetached) {
  Tensor t({1, 2}, {1, 2}, true);
  Tensor s({1, 2}, {0, 0}, true);
  data_loss(t, s).backward();
  EXPECT_FALSE(t.has_grad() && (t.grad()[0] != 0.0 || t.grad()[1] != 0.0));
}

TEST(Regularizer, Examples) {
  std::vector<Tensor> w{Tensor({2}, {1, -2})};
  EXPECT_NEAR(d_regularizer(RegularizerKind::l2, w, Tensor(), 0.99).item(), -4.95, 1e-12);
  EXPECT_NEAR(d_regularizer(RegularizerKind::l1, w, Tensor(), 0.99).item(), -2.97, 1e-12);
  EXPECT_NEAR(d_regularizer(RegularizerKind::adversarial_samples, {}, col({0.5}), 0.99).item(), -0.6931, 1e-4);
  EXPECT_NEAR(d_regularizer(RegularizerKind::adversarial_samples, {}, col({1.0}), 0.99).item(), 0.0, 1e-6);
  EXPECT_EQ(d_regularizer(RegularizerKind::none, w, Tensor(), 0.99).item(), 0.0);
}

TEST(Regularizer, WeightPenaltiesNonPositive) {
  std::mt19937_64 rng(5);
  for (int i = 0; i < 50; ++i) {
    std::vector<Tensor> w{random_tensor({3, 2}, rng, -3, 3), random_tensor({2}, rng, -3, 3)};
    EXPECT_LT(d_regularizer(RegularizerKind::l2, w, Tensor(), 0.99).item(), 0.0);
    EXPECT_LT(d_regularizer(RegularizerKind::l1, w, Tensor(), 0.99).item(), 0.0);
  }
  std::vector<Tensor> zero{Tensor::zeros({3, 2})};
  EXPECT_EQ(d_regularizer(RegularizerKind::l2, zero, Tensor(), 0.99).item(), 0.0);
  EXPECT_EQ(d_regularizer(RegularizerKind::l1, zero, Tensor(), 0.99).item(), 0.0);
}

TEST(KdLoss, Examples) {
  Tensor t({1, 2}, {10, 0}), s({1, 2}, {0, 10});
  const double direct = oracle::kd_loss({10, 0}, {0, 10}, 2, 1.0);
  EXPECT_NEAR(kd_loss(t, s, 1.0).item(), direct, 1e-12);
  EXPECT_NEAR(kd_loss(t, s, 1.0).item(), 10.0, 1e-3);
}

TEST(KdLoss, MatchedLogitsGiveSelfEntropyAndZeroGradient) {
  Tensor t({1, 3}, {1.0, 2.0, 0.5});
  Tensor s({1, 3}, {1.0, 2.0, 0.5}, true);
  const double temp = 2.0;
  Tensor loss = kd_loss(t, s, temp);
  auto p = oracle::softmax_row({1.0, 2.0, 0.5}, temp);
  double h = 0.0;
  for (double v : p) h -= v * std::log(v);
  EXPECT_NEAR(loss.item(), temp * temp * h, 1e-12);
  loss.backward();
  for (double g : s.grad()) EXPECT_NEAR(g, 0.0, 1e-12);
}

TEST(KdLoss, HighTemperatureFlattensGradientBeforeRescaling) {
  double prev = 1e300;
  for (double temp : {1.0, 4.0, 16.0, 64.0}) {
    Tensor s({1, 2}, {0, 3}, true);
    kd_loss(Tensor({1, 2}, {3, 0}), s, temp).backward();
    const double unscaled = std::fabs(s.grad()[0]) / (temp * temp);
    EXPECT_LT(unscaled, prev);
    prev = unscaled;
  }
}

TEST(CeLoss, Examples) {
  EXPECT_NEAR(ce_loss(Tensor({1, 2}, {0, 0}), std::vector<int>{0}).item(), std::log(2.0), 1e-12);
  EXPECT_NEAR(ce_loss(Tensor({1, 2}, {100, 0}), std::vector<int>{0}).item(), 0.0, 1e-12);
  EXPECT_NEAR(ce_loss(Tensor({1, 3}, {1, 2, 3}), std::vector<int>{2}).item(), 0.4076, 1e-4);
  EXPECT_THROW(ce_loss(Tensor({1, 3}, {1, 2, 3}), std::vector<int>{3}), DataError);
}

TEST(Losses, MatchNaiveOracles) {
  std::mt19937_64 rng(21);
  for (int trial = 0; trial < 200; ++trial) {
    const std::size_t n = 1 + rng() % 8, m = 2 + rng() % 7;
    Tensor dt = random_tensor({n, 1}, rng, 0, 1), ds = random_tensor({n, 1}, rng, 0, 1);
    ASSERT_NEAR(adv_loss(dt, ds).item(), oracle::adv_loss(values(dt), values(ds)), 1e-12);
    ASSERT_NEAR(student_adv_loss(ds).item(), oracle::student_adv_loss(values(ds)), 1e-12);
    ASSERT_NEAR(d_regularizer(RegularizerKind::adversarial_samples, {}, ds, 0.99).item(),
                -oracle::student_adv_loss(values(ds)), 1e-12);

    Tensor t = random_tensor({n, m}, rng, -5, 5), s = random_tensor({n, m}, rng, -5, 5);
    ASSERT_NEAR(data_loss(t, s).item(), oracle::data_loss(values(t), values(s), m), 1e-12);
    const double temp = 0.5 + (rng() % 8);
    ASSERT_NEAR(kd_loss(t, s, temp).item(), oracle::kd_loss(values(t), values(s), m, temp), 1e-12);
    std::vector<int> labels(n);
    for (auto& l : labels) l = static_cast<int>(rng() % m);
    ASSERT_NEAR(ce_loss(s, labels).item(), oracle::ce_loss(values(s), m, labels), 1e-12);

    std::vector<Tensor> w{t, s};
    ASSERT_NEAR(d_regularizer(RegularizerKind::l2, w, Tensor(), 0.99).item(), oracle::l2_reg({values(t), values(s)}, 0.99),
                1e-12);
    ASSERT_NEAR(d_regularizer(RegularizerKind::l1, w, Tensor(), 0.99).item(), oracle::l1_reg({values(t), values(s)}, 0.99),
                1e-12);
  }
}

TEST(Losses, ParseNames) {
  for (auto k : {RegularizerKind::none, RegularizerKind::l2, RegularizerKind::l1, RegularizerKind::adversarial_samples}) {
    EXPECT_EQ(parse_regularizer(to_string(k)), k);
  }
  EXPECT_THROW(parse_regularizer("l3"), ConfigError);
}
