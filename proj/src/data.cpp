#include "advdistill/data.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <iterator>
#include <numbers>
#include <numeric>

#include "advdistill/errors.hpp"

namespace advdistill {

std::string to_string(Split split) { return split == Split::train ? "train" : "test"; }

Shape Dataset::sample_shape() const {
  Shape s(inputs.shape().begin() + 1, inputs.shape().end());
  return s;
}

void Dataset::validate() const {
  if (!inputs.defined()) throw DataError("dataset has no inputs");
  if (inputs.dim(0) != labels.size()) {
    throw DataError("dataset has " + std::to_string(inputs.dim(0)) + " inputs but " + std::to_string(labels.size()) +
                    " labels");
  }
  for (std::size_t i = 0; i < labels.size(); ++i) {
    if (labels[i] < 0 || static_cast<std::size_t>(labels[i]) >= num_classes) {
      throw DataError("label " + std::to_string(labels[i]) + " at sample " + std::to_string(i) + " outside [0, " +
                      std::to_string(num_classes) + ")");
    }
  }
}

// ---- synthetic blobs ----

std::vector<std::vector<double>> blob_directions(std::size_t classes, std::size_t dims) {
  if (classes < 2 || dims < 1) {
    throw ConfigError("gaussian blobs need classes >= 2 and dims >= 1, got classes=" + std::to_string(classes) +
                      " dims=" + std::to_string(dims));
  }
  std::vector<std::vector<double>> dirs(classes, std::vector<double>(dims, 0.0));
  const double k = static_cast<double>(classes);
  if (classes <= dims) {
    // e_c - centroid has norm sqrt((K-1)/K).
    const double norm = std::sqrt((k - 1.0) / k);
    for (std::size_t c = 0; c < classes; ++c)
      for (std::size_t j = 0; j < classes; ++j) dirs[c][j] = ((j == c ? 1.0 : 0.0) - 1.0 / k) / norm;
  } else if (dims >= 2) {
    for (std::size_t c = 0; c < classes; ++c) {
      const double angle = 2.0 * std::numbers::pi * static_cast<double>(c) / k;
      dirs[c][0] = std::cos(angle);
      dirs[c][1] = std::sin(angle);
    }
  } else {
    for (std::size_t c = 0; c < classes; ++c) dirs[c][0] = -1.0 + 2.0 * static_cast<double>(c) / (k - 1.0);
  }
  return dirs;
}

Dataset gen_gaussian_blobs(std::size_t classes, std::size_t dims, std::size_t n_per_class, double separation,
                           std::mt19937_64& rng, Split split) {
  if (n_per_class == 0) throw ConfigError("gaussian blobs need at least one sample per class");
  if (!std::isfinite(separation) || separation < 0.0) throw ConfigError("blob separation must be finite and >= 0");
  const auto dirs = blob_directions(classes, dims);
  std::normal_distribution<double> noise(0.0, 1.0);
  std::vector<double> x;
  x.reserve(classes * n_per_class * dims);
  std::vector<int> labels;
  labels.reserve(classes * n_per_class);
  for (std::size_t c = 0; c < classes; ++c) {
    for (std::size_t i = 0; i < n_per_class; ++i) {
      for (std::size_t j = 0; j < dims; ++j) x.push_back(separation * dirs[c][j] + noise(rng));
      labels.push_back(static_cast<int>(c));
    }
  }
  Dataset ds;
  ds.inputs = Tensor({classes * n_per_class, dims}, std::move(x));
  ds.labels = std::move(labels);
  ds.split = split;
  ds.num_classes = classes;
  return ds;
}

// ---- IDX ----

namespace {

std::uint32_t read_be32(const std::vector<std::uint8_t>& b, std::size_t at, const char* what) {
  if (b.size() < at + 4) throw FormatError(std::string("IDX file truncated in ") + what, b.size());
  return (static_cast<std::uint32_t>(b[at]) << 24) | (static_cast<std::uint32_t>(b[at + 1]) << 16) |
         (static_cast<std::uint32_t>(b[at + 2]) << 8) | static_cast<std::uint32_t>(b[at + 3]);
}

void put_be32(std::vector<std::uint8_t>& out, std::uint32_t v) {
  for (int shift = 24; shift >= 0; shift -= 8) out.push_back(static_cast<std::uint8_t>(v >> shift));
}

void check_magic(const std::vector<std::uint8_t>& b, std::uint32_t expected) {
  const auto magic = read_be32(b, 0, "magic");
  if (magic != expected) {
    char buf[64];
    std::snprintf(buf, sizeof buf, "bad IDX magic 0x%08x (expected 0x%08x)", magic, expected);
    throw FormatError(buf, 0);
  }
}

void check_payload(const std::vector<std::uint8_t>& b, std::size_t header, std::size_t count) {
  const std::size_t remaining = b.size() - header;
  if (remaining != count) {
    throw FormatError("IDX header declares " + std::to_string(count) + " elements but " + std::to_string(remaining) +
                          " bytes follow",
                      remaining < count ? b.size() : header + count);
  }
}

}  // namespace

Tensor decode_idx_images(const std::vector<std::uint8_t>& bytes) {
  check_magic(bytes, kIdxImageMagic);
  const std::size_t n = read_be32(bytes, 4, "image count");
  const std::size_t rows = read_be32(bytes, 8, "row count");
  const std::size_t cols = read_be32(bytes, 12, "column count");
  if (n == 0 || rows == 0 || cols == 0) throw FormatError("IDX image file declares a zero dimension", 4);
  check_payload(bytes, 16, n * rows * cols);
  std::vector<double> px(n * rows * cols);
  for (std::size_t i = 0; i < px.size(); ++i) px[i] = static_cast<double>(bytes[16 + i]) / 255.0;
  return Tensor({n, 1, rows, cols}, std::move(px));
}

std::vector<int> decode_idx_labels(const std::vector<std::uint8_t>& bytes) {
  check_magic(bytes, kIdxLabelMagic);
  const std::size_t n = read_be32(bytes, 4, "label count");
  check_payload(bytes, 8, n);
  return std::vector<int>(bytes.begin() + 8, bytes.end());
}

std::vector<std::uint8_t> encode_idx_images(const Tensor& images) {
  if (images.rank() != 4 || images.dim(1) != 1) {
    throw DimensionError("IDX images must be N x 1 x rows x cols, got " + shape_str(images.shape()));
  }
  std::vector<std::uint8_t> out;
  put_be32(out, kIdxImageMagic);
  put_be32(out, static_cast<std::uint32_t>(images.dim(0)));
  put_be32(out, static_cast<std::uint32_t>(images.dim(2)));
  put_be32(out, static_cast<std::uint32_t>(images.dim(3)));
  for (double v : images.data()) out.push_back(static_cast<std::uint8_t>(std::lround(std::clamp(v, 0.0, 1.0) * 255.0)));
  return out;
}

std::vector<std::uint8_t> encode_idx_labels(const std::vector<int>& labels) {
  std::vector<std::uint8_t> out;
  put_be32(out, kIdxLabelMagic);
  put_be32(out, static_cast<std::uint32_t>(labels.size()));
  for (int l : labels) {
    if (l < 0 || l > 255) throw DataError("IDX labels must fit in one byte, got " + std::to_string(l));
    out.push_back(static_cast<std::uint8_t>(l));
  }
  return out;
}

std::vector<std::uint8_t> read_file(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw Error("cannot open " + path.string());
  return {std::istreambuf_iterator<char>(is), std::istreambuf_iterator<char>()};
}

Dataset load_idx(const std::filesystem::path& images_path, const std::filesystem::path& labels_path, Split split,
                 std::size_t num_classes) {
  Dataset ds;
  ds.inputs = decode_idx_images(read_file(images_path));
  ds.labels = decode_idx_labels(read_file(labels_path));
  if (ds.labels.size() != ds.inputs.dim(0)) {
    throw FormatError(labels_path.string() + " holds " + std::to_string(ds.labels.size()) + " labels but " +
                          images_path.string() + " holds " + std::to_string(ds.inputs.dim(0)) + " images",
                      4);
  }
  ds.split = split;
  ds.num_classes = num_classes ? num_classes
                               : static_cast<std::size_t>(*std::max_element(ds.labels.begin(), ds.labels.end())) + 1;
  ds.validate();
  return ds;
}

// ---- normalization ----

namespace {

// (channels, samples, positions per channel) for the dataset layout.
struct ChannelLayout {
  std::size_t channels, samples, plane;
};

ChannelLayout layout_of(const Tensor& x) {
  if (x.rank() == 2) return {x.dim(1), x.dim(0), 1};
  if (x.rank() == 4) return {x.dim(1), x.dim(0), x.dim(2) * x.dim(3)};
  throw DimensionError("datasets hold N x features or N x C x H x W inputs, got " + shape_str(x.shape()));
}

}  // namespace

NormalizationStats compute_stats(const Dataset& ds) {
  const auto [channels, samples, plane] = layout_of(ds.inputs);
  const auto x = ds.inputs.data();
  NormalizationStats stats;
  stats.source = ds.split;
  stats.mean.assign(channels, 0.0);
  stats.std.assign(channels, 0.0);
  const double count = static_cast<double>(samples * plane);
  for (std::size_t c = 0; c < channels; ++c) {
    double s = 0.0;
    for (std::size_t n = 0; n < samples; ++n)
      for (std::size_t p = 0; p < plane; ++p) s += x[(n * channels + c) * plane + p];
    const double m = s / count;
    double v = 0.0;
    for (std::size_t n = 0; n < samples; ++n)
      for (std::size_t p = 0; p < plane; ++p) {
        const double d = x[(n * channels + c) * plane + p] - m;
        v += d * d;
      }
    stats.mean[c] = m;
    stats.std[c] = std::sqrt(v / count);
  }
  return stats;
}

Dataset normalize(const Dataset& ds, const NormalizationStats& stats) {
  if (stats.source != Split::train) throw ContractError("normalization statistics must come from a train split");
  const auto [channels, samples, plane] = layout_of(ds.inputs);
  if (stats.mean.size() != channels) {
    throw DimensionError("normalization stats have " + std::to_string(stats.mean.size()) + " channels, data has " +
                         std::to_string(channels));
  }
  Dataset out = ds;
  out.inputs = ds.inputs.clone();
  auto x = out.inputs.mutable_data();
  for (std::size_t n = 0; n < samples; ++n)
    for (std::size_t c = 0; c < channels; ++c) {
      const double inv = 1.0 / std::max(stats.std[c], 1e-8);
      for (std::size_t p = 0; p < plane; ++p) {
        auto& v = x[(n * channels + c) * plane + p];
        v = (v - stats.mean[c]) * inv;
      }
    }
  out.normalization = stats;
  return out;
}

Dataset normalize(const Dataset& ds, const Dataset& stats_from) {
  if (stats_from.split != Split::train) throw ContractError("normalization statistics must come from a train split");
  return normalize(ds, compute_stats(stats_from));
}

// ---- augmentation ----

namespace {

void require_spatial(const Tensor& images, const char* what) {
  if (images.rank() != 4) {
    throw ConfigError(std::string(what) + " needs N x C x H x W images, got " + shape_str(images.shape()));
  }
}

}  // namespace

void flip_horizontal(Tensor& images, std::size_t index) {
  require_spatial(images, "flip");
  const std::size_t c = images.dim(1), h = images.dim(2), w = images.dim(3);
  auto x = images.mutable_data();
  for (std::size_t ch = 0; ch < c; ++ch)
    for (std::size_t y = 0; y < h; ++y) {
      auto* row = &x[((index * c + ch) * h + y) * w];
      std::reverse(row, row + w);
    }
}

void pad_crop(Tensor& images, std::size_t index, std::size_t pad, std::size_t offset_y, std::size_t offset_x) {
  require_spatial(images, "crop");
  if (offset_y > 2 * pad || offset_x > 2 * pad) throw ConfigError("crop offset exceeds twice the padding");
  const std::size_t c = images.dim(1), h = images.dim(2), w = images.dim(3);
  auto x = images.mutable_data();
  std::vector<double> plane(h * w);
  for (std::size_t ch = 0; ch < c; ++ch) {
    double* src = &x[(index * c + ch) * h * w];
    std::copy(src, src + h * w, plane.begin());
    for (std::size_t y = 0; y < h; ++y)
      for (std::size_t xx = 0; xx < w; ++xx) {
        const auto sy = static_cast<std::ptrdiff_t>(y + offset_y) - static_cast<std::ptrdiff_t>(pad);
        const auto sx = static_cast<std::ptrdiff_t>(xx + offset_x) - static_cast<std::ptrdiff_t>(pad);
        const bool inside = sy >= 0 && sx >= 0 && sy < static_cast<std::ptrdiff_t>(h) && sx < static_cast<std::ptrdiff_t>(w);
        src[y * w + xx] = inside ? plane[static_cast<std::size_t>(sy) * w + static_cast<std::size_t>(sx)] : 0.0;
      }
  }
}

BatchRecord augment(const BatchRecord& batch, const AugmentPolicy& policy, std::mt19937_64& rng) {
  require_spatial(batch.inputs, "augment");
  BatchRecord out = batch;
  out.inputs = batch.inputs.clone();
  std::bernoulli_distribution flip(policy.flip_probability);
  std::uniform_int_distribution<std::size_t> offset(0, 2 * policy.crop_padding);
  for (std::size_t i = 0; i < out.inputs.dim(0); ++i) {
    if (policy.flip && flip(rng)) flip_horizontal(out.inputs, i);
    if (policy.crop_padding > 0) {
      const std::size_t oy = offset(rng);
      const std::size_t ox = offset(rng);
      pad_crop(out.inputs, i, policy.crop_padding, oy, ox);
    }
  }
  out.augmented = true;
  return out;
}

// ---- batching ----

BatchRecord make_batch(const Dataset& ds, const std::vector<std::size_t>& indices) {
  if (indices.empty()) throw ContractError("empty batch");
  const std::size_t per = ds.inputs.numel() / ds.inputs.dim(0);
  const auto x = ds.inputs.data();
  std::vector<double> values;
  values.reserve(indices.size() * per);
  BatchRecord b;
  for (auto i : indices) {
    values.insert(values.end(), x.begin() + static_cast<std::ptrdiff_t>(i * per),
                  x.begin() + static_cast<std::ptrdiff_t>((i + 1) * per));
    b.labels.push_back(ds.labels[i]);
  }
  Shape shape = ds.inputs.shape();
  shape[0] = indices.size();
  b.inputs = Tensor(shape, std::move(values));
  return b;
}

BatchRecord slice_batch(const Dataset& ds, std::size_t begin, std::size_t end) {
  std::vector<std::size_t> idx(end - begin);
  std::iota(idx.begin(), idx.end(), begin);
  return make_batch(ds, idx);
}

BatchIterator::BatchIterator(const Dataset& ds, std::size_t batch_size, std::uint64_t seed, bool shuffle)
    : ds_(&ds), batch_size_(batch_size), shuffle_(shuffle), rng_(seed) {
  if (batch_size == 0) throw ConfigError("batch size must be positive");
  if (ds.size() == 0) throw DataError("cannot iterate an empty dataset");
  order_.resize(ds.size());
  reshuffle();
}

void BatchIterator::reshuffle() {
  std::iota(order_.begin(), order_.end(), std::size_t{0});
  if (shuffle_) std::shuffle(order_.begin(), order_.end(), rng_);
  cursor_ = 0;
}

BatchRecord BatchIterator::next() {
  if (cursor_ >= order_.size()) {
    reshuffle();
    ++epoch_;
  }
  const std::size_t end = std::min(order_.size(), cursor_ + batch_size_);
  last_.assign(order_.begin() + static_cast<std::ptrdiff_t>(cursor_), order_.begin() + static_cast<std::ptrdiff_t>(end));
  cursor_ = end;
  return make_batch(*ds_, last_);
}

// ---- manifest ----

DatasetManifest read_manifest(const std::filesystem::path& path) {
  std::ifstream is(path);
  if (!is) throw ConfigError("cannot open dataset manifest " + path.string());
  DatasetManifest m;
  const auto base = path.parent_path();
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(is, line)) {
    ++lineno;
    const auto first = line.find_first_not_of(" \t\r");
    if (first == std::string::npos || line[first] == '#') continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) {
      throw ConfigError(path.string() + ":" + std::to_string(lineno) + ": expected key=value");
    }
    auto trim = [](std::string s) {
      s.erase(0, s.find_first_not_of(" \t\r"));
      s.erase(s.find_last_not_of(" \t\r") + 1);
      return s;
    };
    const std::string key = trim(line.substr(0, eq)), value = trim(line.substr(eq + 1));
    auto as_path = [&] { return std::filesystem::path(value).is_absolute() ? std::filesystem::path(value) : base / value; };
    auto as_size = [&] {
      try {
        return static_cast<std::size_t>(std::stoull(value));
      } catch (const std::exception&) {
        throw ConfigError(path.string() + ":" + std::to_string(lineno) + ": '" + key + "' needs an integer");
      }
    };
    if (key == "train_images") m.train_images = as_path();
    else if (key == "train_labels") m.train_labels = as_path();
    else if (key == "test_images") m.test_images = as_path();
    else if (key == "test_labels") m.test_labels = as_path();
    else if (key == "classes") m.classes = as_size();
    else if (key == "train_size") m.train_size = as_size();
    else if (key == "test_size") m.test_size = as_size();
    else throw ConfigError(path.string() + ":" + std::to_string(lineno) + ": unknown manifest key '" + key + "'");
  }
  for (auto [key, value] : {std::pair{"train_images", &m.train_images}, {"train_labels", &m.train_labels},
                            {"test_images", &m.test_images}, {"test_labels", &m.test_labels}}) {
    if (value->empty()) throw ConfigError(path.string() + ": manifest is missing '" + key + "'");
  }
  return m;
}

}  // namespace advdistill
