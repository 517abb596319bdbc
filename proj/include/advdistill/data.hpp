#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <random>
#include <string>
#include <vector>

#include "advdistill/tensor.hpp"

namespace advdistill {

enum class Split { train, test };

std::string to_string(Split split);

// Per-channel statistics. For flat inputs every feature is its own channel.
struct NormalizationStats {
  std::vector<double> mean;
  std::vector<double> std;
  // Always train: normalize() rejects stats computed from a test split.
  Split source = Split::train;
};

struct Dataset {
  // N x features, or N x C x H x W.
  Tensor inputs;
  std::vector<int> labels;
  Split split = Split::train;
  std::size_t num_classes = 0;
  // Set once normalize() has been applied.
  std::optional<NormalizationStats> normalization;

  std::size_t size() const { return labels.size(); }
  Shape sample_shape() const;
  // Checks N consistency and label range. Throws DataError.
  void validate() const;
};

struct BatchRecord {
  Tensor inputs;
  std::vector<int> labels;
  bool augmented = false;
};

// Class c is centered at separation * u_c with identity covariance. The u_c
// are the unit vertices of a centered regular simplex in the first `classes`
// coordinates when classes <= dims, otherwise evenly spaced on the unit circle
// of the first two coordinates (evenly spaced in [-1, 1] when dims == 1).
// Samples are emitted class by class.
Dataset gen_gaussian_blobs(std::size_t classes, std::size_t dims, std::size_t n_per_class, double separation,
                           std::mt19937_64& rng, Split split = Split::train);
std::vector<std::vector<double>> blob_directions(std::size_t classes, std::size_t dims);

// IDX files: big-endian magic 0x00000803 (u8 images, rank 3) or 0x00000801
// (u8 labels, rank 1), big-endian u32 dimensions, raw bytes. Pixels are
// scaled to [0, 1] and returned as N x 1 x rows x cols.
inline constexpr std::uint32_t kIdxImageMagic = 0x00000803;
inline constexpr std::uint32_t kIdxLabelMagic = 0x00000801;

Tensor decode_idx_images(const std::vector<std::uint8_t>& bytes);
std::vector<int> decode_idx_labels(const std::vector<std::uint8_t>& bytes);
// Pixels are rounded from [0, 1] back to bytes.
std::vector<std::uint8_t> encode_idx_images(const Tensor& images);
std::vector<std::uint8_t> encode_idx_labels(const std::vector<int>& labels);

Dataset load_idx(const std::filesystem::path& images_path, const std::filesystem::path& labels_path,
                 Split split = Split::train, std::size_t num_classes = 0);

NormalizationStats compute_stats(const Dataset& ds);
// Applies (x - mean) / max(std, 1e-8) using statistics of `stats_from`, which
// must be a train split.
Dataset normalize(const Dataset& ds, const Dataset& stats_from);
Dataset normalize(const Dataset& ds, const NormalizationStats& stats);

struct AugmentPolicy {
  bool flip = true;
  double flip_probability = 0.5;
  // Zero padding added on every side before the random crop; 0 disables crop.
  std::size_t crop_padding = 4;
};

BatchRecord augment(const BatchRecord& batch, const AugmentPolicy& policy, std::mt19937_64& rng);
// Mirrors one image (C x H x W, sample `index`) left-right in place.
void flip_horizontal(Tensor& images, std::size_t index);
// Zero-pads sample `index` by `pad` on every side and crops the original size
// at (offset_y, offset_x) of the padded image, in place.
void pad_crop(Tensor& images, std::size_t index, std::size_t pad, std::size_t offset_y, std::size_t offset_x);

// Epoch-wise minibatches over a seed-deterministic permutation. The last batch
// of an epoch may be smaller.
class BatchIterator {
 public:
  BatchIterator(const Dataset& ds, std::size_t batch_size, std::uint64_t seed, bool shuffle = true);

  BatchRecord next();
  std::size_t epoch() const { return epoch_; }
  // Sample indices of the batch most recently returned.
  const std::vector<std::size_t>& last_indices() const { return last_; }

 private:
  void reshuffle();

  const Dataset* ds_;
  std::size_t batch_size_;
  bool shuffle_;
  std::mt19937_64 rng_;
  std::vector<std::size_t> order_;
  std::vector<std::size_t> last_;
  std::size_t cursor_ = 0;
  std::size_t epoch_ = 0;
};

// Gathers the given samples into a batch.
BatchRecord make_batch(const Dataset& ds, const std::vector<std::size_t>& indices);
// Contiguous batch [begin, end).
BatchRecord slice_batch(const Dataset& ds, std::size_t begin, std::size_t end);

// Plain-text key=value manifest. Known keys: train_images, train_labels,
// test_images, test_labels, classes, train_size, test_size. Relative paths
// resolve against the manifest's directory.
struct DatasetManifest {
  std::filesystem::path train_images, train_labels, test_images, test_labels;
  std::size_t classes = 0;
  std::size_t train_size = 0;
  std::size_t test_size = 0;
};

DatasetManifest read_manifest(const std::filesystem::path& path);

std::vector<std::uint8_t> read_file(const std::filesystem::path& path);

}  // namespace advdistill
