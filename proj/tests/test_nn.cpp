#include <gtest/gtest.h>

#include <filesystem>
#include <random>

#include "advdistill/errors.hpp"
#include "advdistill/nn.hpp"

using namespace advdistill;

namespace {

std::size_t dense_params(std::size_t in, std::size_t out) { return in * out + out; }
std::uint64_t dense_flops(std::size_t in, std::size_t out) { return 2 * in * out + out; }

NetworkSpec single_dense(std::size_t in, std::size_t out) {
  NetworkSpec s;
  s.name = "single";
  s.input_shape = {in};
  s.layers = {LayerSpec::flatten(), LayerSpec::dense(in, out)};
  s.feature_tap = 0;
  return s;
}

}  // namespace

TEST(Accounting, DenseFourToThree) {
  const auto spec = single_dense(4, 3);
  EXPECT_EQ(count_params(spec), 15u);
  EXPECT_EQ(estimate_flops(spec), 27u);
  std::mt19937_64 rng(1);
  EXPECT_EQ(count_params(build(spec, rng)), 15u);
}

TEST(Accounting, EmptyNetworkHasNoParameters) {
  NetworkSpec empty;
  empty.input_shape = {3};
  EXPECT_EQ(count_params(empty), 0u);
  EXPECT_EQ(estimate_flops(empty), 0u);
}

TEST(Accounting, ConvFlopsUseOutputSize) {
  NetworkSpec s;
  s.name = "conv";
  s.input_shape = {1, 5, 5};
  s.layers = {LayerSpec::conv(1, 1, 3), LayerSpec::flatten(), LayerSpec::dense(9, 2)};
  s.feature_tap = 1;
  // conv: 2*1*3*3*1*3*3 = 162; dense 9->2: 38
  EXPECT_EQ(estimate_flops(s), 162u + 38u);
  EXPECT_EQ(count_params(s), 10u + 20u);
}

TEST(Accounting, DiscriminatorParameterCounts) {
  EXPECT_EQ(count_params(make_discriminator(64, {128, 256, 128})), 74369u);
  EXPECT_EQ(count_params(make_discriminator(4, {8})), 49u);
}

TEST(Accounting, PresetsMatchClosedForms) {
  // 8 inputs, 4 classes
  EXPECT_EQ(count_params(teacher_mlp(8, 4)), dense_params(8, 64) + dense_params(64, 8) + dense_params(8, 4));
  EXPECT_EQ(estimate_flops(teacher_mlp(8, 4)), dense_flops(8, 64) + dense_flops(64, 8) + dense_flops(8, 4));
  EXPECT_EQ(count_params(student_mlp(8, 4)), dense_params(8, 8) + dense_params(8, 4));
  EXPECT_EQ(estimate_flops(student_mlp(8, 4)), dense_flops(8, 8) + dense_flops(8, 4));
  // 1x8x8 images, 10 classes
  const std::size_t tc = (16 * 1 * 9 + 16) + (16 * 16 * 9 + 16) + dense_params(16, 10);
  EXPECT_EQ(count_params(teacher_cnn(1, 8, 8, 10)), tc);
  EXPECT_EQ(estimate_flops(teacher_cnn(1, 8, 8, 10)), 2u * 1 * 9 * 16 * 64 + 2u * 16 * 9 * 16 * 64 + dense_flops(16, 10));
  // stride 2, pad 1 on 8x8 -> 4x4
  EXPECT_EQ(count_params(student_cnn(1, 8, 8, 10)), (16u * 9 + 16) + dense_params(16, 10));
  EXPECT_EQ(estimate_flops(student_cnn(1, 8, 8, 10)), 2u * 1 * 9 * 16 * 16 + dense_flops(16, 10));
}

TEST(Accounting, ParamCountMatchesTensorSizes) {
  std::mt19937_64 rng(4);
  for (const auto& name : preset_names()) {
    const auto spec = preset(name, {1, 6, 6}, 3);
    EXPECT_EQ(count_params(spec), count_params(build(spec, rng))) << name;
  }
}

TEST(Network, SameSeedBuildsIdenticalParameters) {
  std::mt19937_64 a(9), b(9);
  EXPECT_EQ(build(teacher_mlp(5, 3), a).snapshot(), build(teacher_mlp(5, 3), b).snapshot());
}

TEST(Network, GlorotBoundsAndZeroBias) {
  std::mt19937_64 rng(2);
  Network net = build(single_dense(30, 20), rng);
  const double bound = std::sqrt(6.0 / 50.0);
  for (double w : net.parameters()[0].data()) EXPECT_LE(std::fabs(w), bound);
  for (double b : net.parameters()[1].data()) EXPECT_EQ(b, 0.0);
}

TEST(Network, IdentityDenseLayer) {
  std::mt19937_64 rng(1);
  Network net = build(single_dense(2, 2), rng, InitPolicy::identity);
  auto out = net.forward(Tensor({1, 2}, {1, 2}), Mode::eval).logits;
  EXPECT_EQ(out.data()[0], 1.0);
  EXPECT_EQ(out.data()[1], 2.0);
}

TEST(Network, FeatureTapShape) {
  NetworkSpec s;
  s.name = "mlp";
  s.input_shape = {2};
  s.layers = {LayerSpec::dense(2, 16), LayerSpec::relu(), LayerSpec::dense(16, 8), LayerSpec::relu(),
              LayerSpec::dense(8, 3)};
  s.feature_tap = 3;
  std::mt19937_64 rng(1);
  auto r = build(s, rng).forward(Tensor::zeros({5, 2}), Mode::eval);
  EXPECT_EQ(r.feature.shape(), (Shape{5, 8}));
  EXPECT_EQ(r.logits.shape(), (Shape{5, 3}));
}

TEST(Network, DiscriminatorLayout) {
  const auto d = make_discriminator(16, {128, 256, 128});
  std::size_t dense = 0;
  for (const auto& l : d.layers) dense += l.kind == LayerKind::dense;
  EXPECT_EQ(dense, 4u);
  EXPECT_EQ(d.layers.back().kind, LayerKind::sigmoid);
  EXPECT_EQ(d.layers[d.layers.size() - 2].out, 1u);
  const auto wide = make_discriminator(16, {500, 500});
  dense = 0;
  for (const auto& l : wide.layers) dense += l.kind == LayerKind::dense;
  EXPECT_EQ(dense, 3u);
  EXPECT_THROW(make_discriminator(16, {}), ConfigError);
}

TEST(Network, DiscriminatorOutputsProbabilities) {
  std::mt19937_64 rng(1);
  Network d = build(make_discriminator(4, {8}), rng);
  auto p = d.forward(Tensor({3, 4}, std::vector<double>(12, 5.0)), Mode::eval).logits;
  EXPECT_EQ(p.shape(), (Shape{3, 1}));
  for (double v : p.data()) {
    EXPECT_GT(v, 0.0);
    EXPECT_LT(v, 1.0);
  }
}

TEST(Network, EvalForwardIsPure) {
  std::mt19937_64 rng(1);
  NetworkSpec s = student_mlp(4, 3);
  s.layers.insert(s.layers.begin() + 2, LayerSpec::dropout(0.5));
  Network net = build(s, rng);
  Tensor x({2, 4}, {1, 2, 3, 4, -1, -2, -3, -4});
  auto a = net.forward(x, Mode::eval).logits;
  auto b = net.forward(x, Mode::eval).logits;
  EXPECT_TRUE(std::equal(a.data().begin(), a.data().end(), b.data().begin()));
}

TEST(Network, ValidationNamesTheBrokenJoint) {
  NetworkSpec s;
  s.name = "broken";
  s.input_shape = {4};
  s.layers = {LayerSpec::dense(4, 8), LayerSpec::relu(), LayerSpec::dense(7, 2)};
  s.feature_tap = 1;
  try {
    s.validate();
    FAIL() << "expected BuildError";
  } catch (const BuildError& e) {
    EXPECT_NE(std::string(e.what()).find("layer 2"), std::string::npos) << e.what();
  }
  s.layers[2] = LayerSpec::dense(8, 2);
  s.feature_tap = 2;
  EXPECT_THROW(s.validate(), BuildError);
}

TEST(Network, ForwardRejectsWrongInput) {
  std::mt19937_64 rng(1);
  Network net = build(student_mlp(4, 3), rng);
  EXPECT_THROW(net.forward(Tensor::zeros({2, 5}), Mode::eval), DimensionError);
}

TEST(Network, FreezeStopsGradients) {
  std::mt19937_64 rng(1);
  Network net = build(student_mlp(4, 3), rng);
  net.freeze();
  EXPECT_TRUE(net.frozen());
  for (const auto& p : net.parameters()) EXPECT_FALSE(p.requires_grad());
  net.unfreeze();
  EXPECT_FALSE(net.frozen());
}

TEST(Network, SpecTextRoundTrip) {
  for (const auto& name : preset_names()) {
    const auto spec = preset(name, {1, 8, 8}, 10);
    EXPECT_EQ(parse_spec(serialize_spec(spec)), spec) << name;
  }
  const auto d = make_discriminator(8, {128, 256, 128});
  EXPECT_EQ(parse_spec(serialize_spec(d)), d);
}

TEST(Checkpoint, RoundTripIsExact) {
  std::mt19937_64 rng(6);
  Network net = build(teacher_cnn(1, 6, 6, 3), rng);
  Network back = decode_checkpoint(encode_checkpoint(net));
  EXPECT_EQ(back.spec(), net.spec());
  EXPECT_EQ(back.snapshot(), net.snapshot());

  const auto path = std::filesystem::temp_directory_path() / "advdistill_ckpt_test.ckpt";
  save_checkpoint(net, path);
  EXPECT_EQ(load_checkpoint(path).snapshot(), net.snapshot());
  std::filesystem::remove(path);
}

TEST(Checkpoint, CorruptionIsPositioned) {
  std::mt19937_64 rng(6);
  auto bytes = encode_checkpoint(build(student_mlp(4, 3), rng));
  auto bad_magic = bytes;
  bad_magic[0] = 'X';
  try {
    decode_checkpoint(bad_magic);
    FAIL();
  } catch (const FormatError& e) {
    EXPECT_EQ(e.offset(), 0u);
  }
  auto truncated = bytes;
  truncated.resize(bytes.size() - 3);
  EXPECT_THROW(decode_checkpoint(truncated), FormatError);
  auto trailing = bytes;
  trailing.push_back(0);
  try {
    decode_checkpoint(trailing);
    FAIL();
  } catch (const FormatError& e) {
    EXPECT_EQ(e.offset(), bytes.size());
  }
}
