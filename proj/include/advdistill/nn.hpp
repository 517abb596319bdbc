#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <random>
#include <string>
#include <vector>

#include "advdistill/tensor.hpp"

namespace advdistill {

enum class LayerKind { dense, conv2d, relu, sigmoid, dropout, avgpool, flatten };

std::string to_string(LayerKind kind);
LayerKind parse_layer_kind(const std::string& name);

struct LayerSpec {
  LayerKind kind = LayerKind::relu;
  // dense: in_features -> out_features. conv2d: in/out channels.
  std::size_t in = 0;
  std::size_t out = 0;
  // conv2d kernel; avgpool window (0 = global pool to N x C).
  std::size_t kernel = 0;
  std::size_t stride = 1;
  std::size_t padding = 0;
  double rate = 0.0;

  static LayerSpec dense(std::size_t in, std::size_t out);
  static LayerSpec conv(std::size_t in_ch, std::size_t out_ch, std::size_t kernel, std::size_t stride = 1,
                        std::size_t padding = 0);
  static LayerSpec relu();
  static LayerSpec sigmoid();
  static LayerSpec dropout(double rate);
  static LayerSpec avgpool(std::size_t kernel = 0, std::size_t stride = 0);
  static LayerSpec flatten();

  bool has_params() const { return kind == LayerKind::dense || kind == LayerKind::conv2d; }

  friend bool operator==(const LayerSpec&, const LayerSpec&) = default;
};

struct NetworkSpec {
  std::string name;
  // Per-sample input shape: {features} or {channels, height, width}.
  Shape input_shape;
  std::vector<LayerSpec> layers;
  // Layer whose output is the feature fed to the discriminator. The last layer
  // is dense (logits), optionally followed by a sigmoid head.
  std::size_t feature_tap = 0;

  // Throws BuildError naming the offending layer pair.
  void validate() const;
  // Per-sample output shape of every layer, in order. Validates.
  std::vector<Shape> layer_output_shapes() const;
  // Index of the final dense layer.
  std::size_t logits_layer() const;
  std::size_t num_classes() const;
  std::size_t feature_dim() const;

  friend bool operator==(const NetworkSpec&, const NetworkSpec&) = default;
};

// Single-line textual form, e.g.
//   name=student-mlp;input=8;tap=1;layers=dense:8:8,relu,dense:8:4
std::string serialize_spec(const NetworkSpec& spec);
NetworkSpec parse_spec(const std::string& text);

enum class InitPolicy {
  // Weights ~ U(-sqrt(6/(fan_in+fan_out)), +sqrt(6/(fan_in+fan_out))), zero bias.
  glorot_uniform,
  // Square dense layers start as identity, zero bias. Test helper.
  identity,
};

struct ForwardResult {
  Tensor logits;
  Tensor feature;
};

class Network {
 public:
  Network() = default;
  Network(NetworkSpec spec, std::vector<Tensor> params);

  const NetworkSpec& spec() const { return spec_; }
  // Weight then bias for each parametric layer, in layer order.
  const std::vector<Tensor>& parameters() const { return params_; }
  std::vector<Tensor>& parameters() { return params_; }

  // Train-mode dropout layers draw from `rng`; eval mode ignores it.
  ForwardResult forward(const Tensor& x, Mode mode, std::mt19937_64* rng = nullptr) const;

  // Copy with its own parameter storage; Network copies otherwise share it.
  Network clone() const;

  void freeze();
  void unfreeze();
  bool frozen() const;

  void zero_grad();
  // Flat copy of every parameter value, for bitwise comparisons.
  std::vector<double> snapshot() const;

 private:
  NetworkSpec spec_;
  std::vector<Tensor> params_;
};

Network build(const NetworkSpec& spec, std::mt19937_64& rng, InitPolicy init = InitPolicy::glorot_uniform);

std::size_t count_params(const NetworkSpec& spec);
std::size_t count_params(const Network& net);
// Per-sample forward FLOPs: dense 2*in*out + out, conv 2*C*k*k*F*H'*W'; other
// layers are free. `input_shape` is per sample and defaults to the spec's.
std::uint64_t estimate_flops(const NetworkSpec& spec, std::optional<Shape> input_shape = std::nullopt);
std::uint64_t estimate_flops(const Network& net, std::optional<Shape> input_shape = std::nullopt);

// Fully connected stack feature_dim -> hidden... -> 1 with ReLU between hidden
// layers and a sigmoid head.
NetworkSpec make_discriminator(std::size_t feature_dim, const std::vector<std::size_t>& hidden);
std::vector<std::size_t> default_discriminator_hidden();

// Desk-scale stand-ins for the large and small architectures.
NetworkSpec teacher_mlp(std::size_t in, std::size_t classes);
NetworkSpec student_mlp(std::size_t in, std::size_t classes);
NetworkSpec teacher_cnn(std::size_t channels, std::size_t height, std::size_t width, std::size_t classes);
NetworkSpec student_cnn(std::size_t channels, std::size_t height, std::size_t width, std::size_t classes);
// Looks up one of the names above ("teacher-mlp", ...) for the given input.
NetworkSpec preset(const std::string& name, const Shape& input_shape, std::size_t classes);
std::vector<std::string> preset_names();

// "ADVC" | u32 version | u32 spec length | spec text | u32 tensor count |
// per tensor: u32 rank, u32 dims..., float64 values. All little-endian.
inline constexpr std::uint32_t kCheckpointVersion = 1;
void save_checkpoint(const Network& net, const std::filesystem::path& path);
Network load_checkpoint(const std::filesystem::path& path);
std::vector<std::uint8_t> encode_checkpoint(const Network& net);
Network decode_checkpoint(const std::vector<std::uint8_t>& bytes);

}  // namespace advdistill
