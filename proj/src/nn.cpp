#include "advdistill/nn.hpp"

#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <iterator>
#include <sstream>

#include "advdistill/errors.hpp"

namespace advdistill {

namespace {

std::vector<std::string> split(const std::string& s, char sep) {
  std::vector<std::string> parts;
  std::string cur;
  std::istringstream is(s);
  while (std::getline(is, cur, sep)) parts.push_back(cur);
  return parts;
}

std::size_t parse_size(const std::string& s, const std::string& what) {
  try {
    std::size_t pos = 0;
    long long v = std::stoll(s, &pos);
    if (pos != s.size() || v < 0) throw std::invalid_argument(s);
    return static_cast<std::size_t>(v);
  } catch (const std::exception&) {
    throw ConfigError("invalid " + what + " '" + s + "'");
  }
}

std::string describe(const LayerSpec& l, std::size_t index) {
  std::ostringstream os;
  os << "layer " << index << " (" << to_string(l.kind);
  if (l.kind == LayerKind::dense || l.kind == LayerKind::conv2d) os << " " << l.in << "->" << l.out;
  os << ")";
  return os.str();
}

}  // namespace

std::string to_string(LayerKind kind) {
  switch (kind) {
    case LayerKind::dense: return "dense";
    case LayerKind::conv2d: return "conv2d";
    case LayerKind::relu: return "relu";
    case LayerKind::sigmoid: return "sigmoid";
    case LayerKind::dropout: return "dropout";
    case LayerKind::avgpool: return "avgpool";
    case LayerKind::flatten: return "flatten";
  }
  return "?";
}

LayerKind parse_layer_kind(const std::string& name) {
  for (auto k : {LayerKind::dense, LayerKind::conv2d, LayerKind::relu, LayerKind::sigmoid, LayerKind::dropout,
                 LayerKind::avgpool, LayerKind::flatten}) {
    if (to_string(k) == name) return k;
  }
  throw ConfigError("unknown layer kind '" + name + "'");
}

LayerSpec LayerSpec::dense(std::size_t in, std::size_t out) {
  LayerSpec l;
  l.kind = LayerKind::dense;
  l.in = in;
  l.out = out;
  return l;
}

LayerSpec LayerSpec::conv(std::size_t in_ch, std::size_t out_ch, std::size_t kernel, std::size_t stride,
                          std::size_t padding) {
  LayerSpec l;
  l.kind = LayerKind::conv2d;
  l.in = in_ch;
  l.out = out_ch;
  l.kernel = kernel;
  l.stride = stride;
  l.padding = padding;
  return l;
}

LayerSpec LayerSpec::relu() { return LayerSpec{}; }

LayerSpec LayerSpec::sigmoid() {
  LayerSpec l;
  l.kind = LayerKind::sigmoid;
  return l;
}

LayerSpec LayerSpec::dropout(double rate) {
  LayerSpec l;
  l.kind = LayerKind::dropout;
  l.rate = rate;
  return l;
}

LayerSpec LayerSpec::avgpool(std::size_t kernel, std::size_t stride) {
  LayerSpec l;
  l.kind = LayerKind::avgpool;
  l.kernel = kernel;
  l.stride = stride == 0 ? kernel : stride;
  return l;
}

LayerSpec LayerSpec::flatten() {
  LayerSpec l;
  l.kind = LayerKind::flatten;
  return l;
}

// ---- NetworkSpec ----

std::vector<Shape> NetworkSpec::layer_output_shapes() const {
  if (input_shape.empty() || input_shape.size() == 2 || input_shape.size() > 3) {
    throw BuildError("network '" + name + "': input shape " + shape_str(input_shape) +
                     " must be {features} or {channels, height, width}");
  }
  for (auto d : input_shape) {
    if (d == 0) throw BuildError("network '" + name + "': zero-sized input dimension");
  }
  std::vector<Shape> shapes;
  Shape cur = input_shape;
  std::string prev = "input " + shape_str(input_shape);
  for (std::size_t i = 0; i < layers.size(); ++i) {
    const auto& l = layers[i];
    auto fail = [&](const std::string& why) {
      throw BuildError("network '" + name + "': " + prev + " -> " + describe(l, i) + ": " + why);
    };
    switch (l.kind) {
      case LayerKind::dense:
        if (l.in == 0 || l.out == 0) fail("zero-sized dense layer");
        if (cur.size() != 1 || cur[0] != l.in) fail("expects " + std::to_string(l.in) + " features, got " + shape_str(cur));
        cur = {l.out};
        break;
      case LayerKind::conv2d: {
        if (l.in == 0 || l.out == 0 || l.kernel == 0 || l.stride == 0) fail("zero-sized conv layer");
        if (cur.size() != 3 || cur[0] != l.in) fail("expects " + std::to_string(l.in) + " channels, got " + shape_str(cur));
        if (l.kernel > cur[1] + 2 * l.padding || l.kernel > cur[2] + 2 * l.padding) fail("kernel larger than padded input");
        cur = {l.out, conv_output_size(cur[1], l.kernel, l.stride, l.padding),
               conv_output_size(cur[2], l.kernel, l.stride, l.padding)};
        break;
      }
      case LayerKind::avgpool:
        if (cur.size() != 3) fail("needs spatial input, got " + shape_str(cur));
        if (l.kernel == 0) {
          cur = {cur[0]};
        } else {
          if (l.stride == 0) fail("zero stride");
          if (l.kernel > cur[1] || l.kernel > cur[2]) fail("window larger than input");
          cur = {cur[0], conv_output_size(cur[1], l.kernel, l.stride, 0), conv_output_size(cur[2], l.kernel, l.stride, 0)};
        }
        break;
      case LayerKind::flatten:
        cur = {shape_numel(cur)};
        break;
      case LayerKind::dropout:
        if (!(l.rate >= 0.0 && l.rate < 1.0)) fail("dropout rate must lie in [0, 1)");
        break;
      case LayerKind::relu:
      case LayerKind::sigmoid:
        break;
    }
    shapes.push_back(cur);
    prev = describe(l, i);
  }
  return shapes;
}

void NetworkSpec::validate() const {
  if (layers.empty()) throw BuildError("network '" + name + "' has no layers");
  layer_output_shapes();
  const std::size_t head = logits_layer();
  if (feature_tap >= head) {
    throw BuildError("network '" + name + "': feature tap " + std::to_string(feature_tap) +
                     " must point before the logits layer " + std::to_string(head));
  }
}

std::size_t NetworkSpec::logits_layer() const {
  // The last layer is dense, or a dense layer followed by one sigmoid head.
  std::size_t last = layers.size() - 1;
  if (layers[last].kind == LayerKind::sigmoid && last > 0) --last;
  if (layers[last].kind != LayerKind::dense) {
    throw BuildError("network '" + name + "': last layer must be dense (the logits), got " + to_string(layers.back().kind));
  }
  return last;
}

std::size_t NetworkSpec::num_classes() const {
  validate();
  return layers[logits_layer()].out;
}

std::size_t NetworkSpec::feature_dim() const {
  validate();
  return shape_numel(layer_output_shapes()[feature_tap]);
}

std::string serialize_spec(const NetworkSpec& spec) {
  std::ostringstream os;
  os << "name=" << spec.name << ";input=";
  for (std::size_t i = 0; i < spec.input_shape.size(); ++i) os << (i ? "x" : "") << spec.input_shape[i];
  os << ";tap=" << spec.feature_tap << ";layers=";
  for (std::size_t i = 0; i < spec.layers.size(); ++i) {
    const auto& l = spec.layers[i];
    if (i) os << ',';
    os << to_string(l.kind);
    switch (l.kind) {
      case LayerKind::dense: os << ':' << l.in << ':' << l.out; break;
      case LayerKind::conv2d: os << ':' << l.in << ':' << l.out << ':' << l.kernel << ':' << l.stride << ':' << l.padding; break;
      case LayerKind::avgpool: os << ':' << l.kernel << ':' << l.stride; break;
      case LayerKind::dropout: {
        std::ostringstream r;
        r.precision(17);
        r << l.rate;
        os << ':' << r.str();
        break;
      }
      default: break;
    }
  }
  return os.str();
}

NetworkSpec parse_spec(const std::string& text) {
  NetworkSpec spec;
  bool have_layers = false;
  for (const auto& field : split(text, ';')) {
    auto eq = field.find('=');
    if (eq == std::string::npos) throw ConfigError("network spec field '" + field + "' lacks '='");
    const std::string key = field.substr(0, eq), value = field.substr(eq + 1);
    if (key == "name") {
      spec.name = value;
    } else if (key == "input") {
      for (const auto& d : split(value, 'x')) spec.input_shape.push_back(parse_size(d, "input dimension"));
    } else if (key == "tap") {
      spec.feature_tap = parse_size(value, "feature tap");
    } else if (key == "layers") {
      have_layers = true;
      for (const auto& item : split(value, ',')) {
        auto parts = split(item, ':');
        if (parts.empty()) throw ConfigError("empty layer entry in '" + value + "'");
        auto kind = parse_layer_kind(parts[0]);
        auto arg = [&](std::size_t i) {
          if (i >= parts.size()) throw ConfigError("layer '" + item + "' is missing arguments");
          return parse_size(parts[i], "layer argument in '" + item + "'");
        };
        switch (kind) {
          case LayerKind::dense: spec.layers.push_back(LayerSpec::dense(arg(1), arg(2))); break;
          case LayerKind::conv2d: spec.layers.push_back(LayerSpec::conv(arg(1), arg(2), arg(3), arg(4), arg(5))); break;
          case LayerKind::avgpool: spec.layers.push_back(LayerSpec::avgpool(arg(1), arg(2))); break;
          case LayerKind::dropout: {
            if (parts.size() < 2) throw ConfigError("dropout layer needs a rate");
            try {
              spec.layers.push_back(LayerSpec::dropout(std::stod(parts[1])));
            } catch (const std::logic_error&) {
              throw ConfigError("invalid dropout rate '" + parts[1] + "'");
            }
            break;
          }
          case LayerKind::relu: spec.layers.push_back(LayerSpec::relu()); break;
          case LayerKind::sigmoid: spec.layers.push_back(LayerSpec::sigmoid()); break;
          case LayerKind::flatten: spec.layers.push_back(LayerSpec::flatten()); break;
        }
      }
    } else {
      throw ConfigError("unknown network spec field '" + key + "'");
    }
  }
  if (!have_layers) throw ConfigError("network spec has no 'layers' field");
  return spec;
}

// ---- Network ----

Network::Network(NetworkSpec spec, std::vector<Tensor> params) : spec_(std::move(spec)), params_(std::move(params)) {
  spec_.validate();
  std::size_t p = 0;
  for (const auto& l : spec_.layers) {
    if (!l.has_params()) continue;
    Shape w = l.kind == LayerKind::dense ? Shape{l.in, l.out} : Shape{l.out, l.in, l.kernel, l.kernel};
    Shape b = {l.out};
    if (p + 2 > params_.size() || params_[p].shape() != w || params_[p + 1].shape() != b) {
      throw BuildError("network '" + spec_.name + "': parameter tensors do not match " + to_string(l.kind) + " layer " +
                       std::to_string(l.in) + "->" + std::to_string(l.out));
    }
    p += 2;
  }
  if (p != params_.size()) throw BuildError("network '" + spec_.name + "': unexpected extra parameter tensors");
}

ForwardResult Network::forward(const Tensor& x, Mode mode, std::mt19937_64* rng) const {
  Shape expected = {x.rank() > 0 ? x.dim(0) : 0};
  expected.insert(expected.end(), spec_.input_shape.begin(), spec_.input_shape.end());
  if (x.shape() != expected) {
    throw DimensionError("network '" + spec_.name + "' expects input [N" +
                         shape_str(spec_.input_shape).replace(0, 1, "x") + ", got " + shape_str(x.shape()));
  }
  ForwardResult result;
  Tensor h = x;
  std::size_t p = 0;
  for (std::size_t i = 0; i < spec_.layers.size(); ++i) {
    const auto& l = spec_.layers[i];
    switch (l.kind) {
      case LayerKind::dense:
        h = add_row(matmul(h, params_[p]), params_[p + 1]);
        p += 2;
        break;
      case LayerKind::conv2d:
        h = add_channel(conv2d(h, params_[p], l.stride, l.padding), params_[p + 1]);
        p += 2;
        break;
      case LayerKind::relu: h = relu(h); break;
      case LayerKind::sigmoid: h = sigmoid(h); break;
      case LayerKind::dropout: h = dropout(h, l.rate, mode, rng); break;
      case LayerKind::avgpool: h = l.kernel == 0 ? global_avg_pool(h) : avg_pool2d(h, l.kernel, l.stride); break;
      case LayerKind::flatten: h = flatten(h); break;
    }
    if (i == spec_.feature_tap) result.feature = h;
  }
  result.logits = h;
  return result;
}

Network Network::clone() const {
  std::vector<Tensor> copies;
  for (const auto& t : params_) copies.emplace_back(t.shape(), std::vector<double>(t.data().begin(), t.data().end()), t.requires_grad());
  return Network(spec_, std::move(copies));
}

void Network::freeze() {
  for (auto& t : params_) t.set_requires_grad(false);
}

void Network::unfreeze() {
  for (auto& t : params_) t.set_requires_grad(true);
}

bool Network::frozen() const {
  for (const auto& t : params_) {
    if (t.requires_grad()) return false;
  }
  return true;
}

void Network::zero_grad() {
  for (auto& t : params_) t.zero_grad();
}

std::vector<double> Network::snapshot() const {
  std::vector<double> flat;
  for (const auto& t : params_) flat.insert(flat.end(), t.data().begin(), t.data().end());
  return flat;
}

Network build(const NetworkSpec& spec, std::mt19937_64& rng, InitPolicy init) {
  spec.validate();
  std::vector<Tensor> params;
  for (const auto& l : spec.layers) {
    if (!l.has_params()) continue;
    const bool dense = l.kind == LayerKind::dense;
    Shape w_shape = dense ? Shape{l.in, l.out} : Shape{l.out, l.in, l.kernel, l.kernel};
    std::vector<double> w(shape_numel(w_shape));
    if (init == InitPolicy::identity) {
      if (!dense || l.in != l.out) throw ConfigError("identity init needs square dense layers");
      for (std::size_t i = 0; i < l.in; ++i) w[i * l.in + i] = 1.0;
    } else {
      const double rf = dense ? 1.0 : static_cast<double>(l.kernel * l.kernel);
      const double fan_in = static_cast<double>(l.in) * rf, fan_out = static_cast<double>(l.out) * rf;
      const double bound = std::sqrt(6.0 / (fan_in + fan_out));
      std::uniform_real_distribution<double> dist(-bound, bound);
      for (auto& v : w) v = dist(rng);
    }
    params.emplace_back(w_shape, std::move(w), true);
    params.push_back(Tensor::zeros({l.out}, true));
  }
  return Network(spec, std::move(params));
}

// ---- accounting ----

std::size_t count_params(const NetworkSpec& spec) {
  std::size_t total = 0;
  for (const auto& l : spec.layers) {
    if (l.kind == LayerKind::dense) total += l.in * l.out + l.out;
    if (l.kind == LayerKind::conv2d) total += l.out * l.in * l.kernel * l.kernel + l.out;
  }
  return total;
}

std::size_t count_params(const Network& net) {
  std::size_t total = 0;
  for (const auto& t : net.parameters()) total += t.numel();
  return total;
}

std::uint64_t estimate_flops(const NetworkSpec& spec, std::optional<Shape> input_shape) {
  if (spec.layers.empty()) return 0;
  NetworkSpec probe = spec;
  if (input_shape) probe.input_shape = *input_shape;
  const auto shapes = probe.layer_output_shapes();
  std::uint64_t flops = 0;
  for (std::size_t i = 0; i < probe.layers.size(); ++i) {
    const auto& l = probe.layers[i];
    if (l.kind == LayerKind::dense) flops += 2ull * l.in * l.out + l.out;
    if (l.kind == LayerKind::conv2d) flops += 2ull * l.in * l.kernel * l.kernel * l.out * shapes[i][1] * shapes[i][2];
  }
  return flops;
}

std::uint64_t estimate_flops(const Network& net, std::optional<Shape> input_shape) {
  return estimate_flops(net.spec(), std::move(input_shape));
}

// ---- presets ----

NetworkSpec make_discriminator(std::size_t feature_dim, const std::vector<std::size_t>& hidden) {
  if (hidden.empty()) throw ConfigError("discriminator needs at least one hidden layer");
  if (feature_dim == 0) throw ConfigError("discriminator feature dimension must be positive");
  NetworkSpec spec;
  spec.name = "discriminator";
  spec.input_shape = {feature_dim};
  std::size_t prev = feature_dim;
  for (std::size_t i = 0; i < hidden.size(); ++i) {
    if (hidden[i] == 0) throw ConfigError("discriminator hidden width must be positive");
    spec.layers.push_back(LayerSpec::dense(prev, hidden[i]));
    spec.layers.push_back(LayerSpec::relu());
    prev = hidden[i];
  }
  spec.feature_tap = spec.layers.size() - 1;
  spec.layers.push_back(LayerSpec::dense(prev, 1));
  spec.layers.push_back(LayerSpec::sigmoid());
  return spec;
}

std::vector<std::size_t> default_discriminator_hidden() { return {128, 256, 128}; }

NetworkSpec teacher_mlp(std::size_t in, std::size_t classes) {
  return {"teacher-mlp",
          {in},
          {LayerSpec::dense(in, 64), LayerSpec::relu(), LayerSpec::dense(64, 8), LayerSpec::relu(),
           LayerSpec::dense(8, classes)},
          3};
}

NetworkSpec student_mlp(std::size_t in, std::size_t classes) {
  return {"student-mlp", {in}, {LayerSpec::dense(in, 8), LayerSpec::relu(), LayerSpec::dense(8, classes)}, 1};
}

NetworkSpec teacher_cnn(std::size_t channels, std::size_t height, std::size_t width, std::size_t classes) {
  return {"teacher-cnn",
          {channels, height, width},
          {LayerSpec::conv(channels, 16, 3, 1, 1), LayerSpec::relu(), LayerSpec::conv(16, 16, 3, 1, 1), LayerSpec::relu(),
           LayerSpec::avgpool(), LayerSpec::dense(16, classes)},
          4};
}

NetworkSpec student_cnn(std::size_t channels, std::size_t height, std::size_t width, std::size_t classes) {
  return {"student-cnn",
          {channels, height, width},
          {LayerSpec::conv(channels, 16, 3, 2, 1), LayerSpec::relu(), LayerSpec::avgpool(), LayerSpec::dense(16, classes)},
          2};
}

std::vector<std::string> preset_names() { return {"teacher-mlp", "student-mlp", "teacher-cnn", "student-cnn"}; }

NetworkSpec preset(const std::string& name, const Shape& input_shape, std::size_t classes) {
  const bool flat = input_shape.size() == 1;
  const bool spatial = input_shape.size() == 3;
  if (name == "teacher-mlp" || name == "student-mlp") {
    const std::size_t in = shape_numel(input_shape);
    NetworkSpec spec = name == "teacher-mlp" ? teacher_mlp(in, classes) : student_mlp(in, classes);
    if (!flat) {
      // Image inputs are flattened in front of the MLP.
      spec.input_shape = input_shape;
      spec.layers.insert(spec.layers.begin(), LayerSpec::flatten());
      spec.feature_tap += 1;
    }
    return spec;
  }
  if (name == "teacher-cnn" || name == "student-cnn") {
    if (!spatial) throw ConfigError("preset '" + name + "' needs {channels, height, width} input, got " + shape_str(input_shape));
    return name == "teacher-cnn" ? teacher_cnn(input_shape[0], input_shape[1], input_shape[2], classes)
                                 : student_cnn(input_shape[0], input_shape[1], input_shape[2], classes);
  }
  throw ConfigError("unknown network preset '" + name + "'");
}

// ---- checkpoints ----

namespace {

constexpr char kMagic[4] = {'A', 'D', 'V', 'C'};

void put_u32(std::vector<std::uint8_t>& out, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
}

void put_f64(std::vector<std::uint8_t>& out, double v) {
  auto bits = std::bit_cast<std::uint64_t>(v);
  for (int i = 0; i < 8; ++i) out.push_back(static_cast<std::uint8_t>(bits >> (8 * i)));
}

class Reader {
 public:
  explicit Reader(const std::vector<std::uint8_t>& bytes) : bytes_(bytes) {}

  void need(std::size_t n, const char* what) const {
    if (bytes_.size() - pos_ < n) throw FormatError(std::string("checkpoint truncated while reading ") + what, pos_);
  }
  std::uint32_t u32(const char* what) {
    need(4, what);
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(bytes_[pos_ + i]) << (8 * i);
    pos_ += 4;
    return v;
  }
  double f64() {
    need(8, "parameter values");
    std::uint64_t v = 0;
    for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(bytes_[pos_ + i]) << (8 * i);
    pos_ += 8;
    return std::bit_cast<double>(v);
  }
  std::string text(std::size_t n) {
    need(n, "network spec");
    std::string s(bytes_.begin() + static_cast<std::ptrdiff_t>(pos_), bytes_.begin() + static_cast<std::ptrdiff_t>(pos_ + n));
    pos_ += n;
    return s;
  }
  std::size_t pos() const { return pos_; }
  std::size_t remaining() const { return bytes_.size() - pos_; }

 private:
  const std::vector<std::uint8_t>& bytes_;
  std::size_t pos_ = 0;
};

}  // namespace

std::vector<std::uint8_t> encode_checkpoint(const Network& net) {
  std::vector<std::uint8_t> out(std::begin(kMagic), std::end(kMagic));
  put_u32(out, kCheckpointVersion);
  const std::string spec = serialize_spec(net.spec());
  put_u32(out, static_cast<std::uint32_t>(spec.size()));
  out.insert(out.end(), spec.begin(), spec.end());
  put_u32(out, static_cast<std::uint32_t>(net.parameters().size()));
  for (const auto& t : net.parameters()) {
    put_u32(out, static_cast<std::uint32_t>(t.rank()));
    for (auto d : t.shape()) put_u32(out, static_cast<std::uint32_t>(d));
    for (double v : t.data()) put_f64(out, v);
  }
  return out;
}

Network decode_checkpoint(const std::vector<std::uint8_t>& bytes) {
  Reader r(bytes);
  r.need(4, "magic");
  if (std::memcmp(bytes.data(), kMagic, 4) != 0) throw FormatError("bad checkpoint magic (expected \"ADVC\")", 0);
  r.text(4);
  const std::size_t version_at = r.pos();
  if (auto version = r.u32("version"); version != kCheckpointVersion) {
    throw FormatError("unsupported checkpoint version " + std::to_string(version), version_at);
  }
  const std::uint32_t spec_len = r.u32("spec length");
  const std::size_t spec_at = r.pos();
  NetworkSpec spec;
  try {
    spec = parse_spec(r.text(spec_len));
    spec.validate();
  } catch (const FormatError&) {
    throw;
  } catch (const Error& e) {
    throw FormatError(std::string("invalid network spec in checkpoint: ") + e.what(), spec_at);
  }
  const std::size_t count_at = r.pos();
  const std::uint32_t count = r.u32("tensor count");
  std::size_t expected_tensors = 0;
  for (const auto& l : spec.layers) expected_tensors += l.has_params() ? 2 : 0;
  if (count != expected_tensors) {
    throw FormatError("checkpoint holds " + std::to_string(count) + " tensors, spec needs " +
                          std::to_string(expected_tensors),
                      count_at);
  }
  std::vector<Tensor> params;
  std::size_t total = 0;
  for (std::uint32_t i = 0; i < count; ++i) {
    const std::uint32_t rank = r.u32("tensor rank");
    Shape shape;
    for (std::uint32_t d = 0; d < rank; ++d) shape.push_back(r.u32("tensor shape"));
    const std::size_t values_at = r.pos();
    const std::size_t n = shape_numel(shape);
    if (rank == 0 || n == 0 || r.remaining() / 8 < n) {
      throw FormatError("tensor " + std::to_string(i) + " declares " + shape_str(shape) + " but only " +
                            std::to_string(r.remaining()) + " bytes remain",
                        values_at);
    }
    std::vector<double> values(n);
    for (auto& v : values) v = r.f64();
    total += n;
    params.emplace_back(shape, std::move(values), true);
  }
  if (r.remaining() != 0) throw FormatError("trailing bytes after parameters", r.pos());
  if (total != count_params(spec)) throw FormatError("parameter total does not match spec", r.pos());
  try {
    return Network(std::move(spec), std::move(params));
  } catch (const BuildError& e) {
    throw FormatError(e.what(), count_at);
  }
}

void save_checkpoint(const Network& net, const std::filesystem::path& path) {
  const auto bytes = encode_checkpoint(net);
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) throw Error("cannot open " + path.string() + " for writing");
  os.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!os) throw Error("failed writing " + path.string());
}

Network load_checkpoint(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw Error("cannot open checkpoint " + path.string());
  std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(is)), std::istreambuf_iterator<char>());
  return decode_checkpoint(bytes);
}

}  // namespace advdistill
