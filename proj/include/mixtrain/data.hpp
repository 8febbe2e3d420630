#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "mixtrain/rng.hpp"
#include "mixtrain/tensor.hpp"

namespace mixtrain {

enum class DatasetRole { ssl, sl, both };
enum class DataFormat { idx, cifar_binary, synthetic_spec };

std::string to_string(DatasetRole role);
std::string to_string(DataFormat format);
DataFormat parse_data_format(const std::string& text);

inline constexpr int kNoLabel = -1;

/// Images of one shape stored contiguously as float pixels, item-major.
struct Dataset {
  std::string name;
  std::size_t channels = 0;
  std::size_t height = 0;
  std::size_t width = 0;
  std::vector<float> pixels;
  std::vector<int> labels;  // kNoLabel for unlabeled items
  std::optional<std::size_t> num_classes;
  DatasetRole role = DatasetRole::both;

  std::size_t size() const { return labels.size(); }
  std::size_t item_size() const { return channels * height * width; }
  Shape item_shape() const { return {channels, height, width}; }
  bool labeled() const;  // every item carries a label
  std::span<const float> item(std::size_t i) const;
  std::span<float> item(std::size_t i);

  // Rows [indices...] in the given order.
  Dataset select(std::span<const std::size_t> indices) const;
  void validate() const;  // throws ValidationError
};

bool same_shape(const Dataset& a, const Dataset& b);

/// Gaussian-cluster images: every class owns a smooth prototype drawn from
/// `seed`, and items are prototype plus per-pixel noise of stddev `sigma`.
struct SyntheticSpec {
  std::size_t classes = 10;
  std::size_t per_class = 100;
  std::size_t channels = 1;
  std::size_t height = 16;
  std::size_t width = 16;
  double sigma = 1.0;
  // Weight of the class-specific component of each prototype against a
  // component shared by all classes; lower is harder.
  double separation = 0.5;
  std::size_t blobs = 4;
  std::uint64_t seed = 7;
  std::string name = "synthetic";

  void validate() const;  // throws ConfigError
};

// key=value lines; unknown keys are ConfigError.
SyntheticSpec parse_synthetic_spec(const std::string& text);
Dataset make_synthetic(const SyntheticSpec& spec);

// MNIST-style idx pair; pixels are scaled to [0, 1].
Dataset load_idx(const std::filesystem::path& images, const std::optional<std::filesystem::path>& labels,
                 std::size_t num_classes = 10);
// 3073-byte records: one label byte then 3x32x32 channel-major pixels.
Dataset load_cifar_binary(const std::filesystem::path& path, std::size_t num_classes = 10);

struct DataSource {
  DataFormat format = DataFormat::synthetic_spec;
  std::filesystem::path path;
  std::optional<std::filesystem::path> labels_path;  // idx only
  std::size_t num_classes = 10;
};

// For idx images without an explicit labels path, a sibling file with
// "images-idx3" replaced by "labels-idx1" is used when present.
Dataset load(const DataSource& source);

// (x - mean) / stddev on every pixel.
void normalize(Dataset& ds, float mean, float stddev);

// Uniform subset of floor(p * n) items without replacement, stratified by
// class when labeled: each class keeps floor(p * n_c) items and the
// leftover quota goes to the classes with the largest fractional parts.
Dataset subsample(const Dataset& ds, double p, std::uint64_t seed);

// Stratified (train, held_out) partition; held-out gets round(fraction * n_c)
// items of each class, at least one when the class has two or more items.
std::pair<Dataset, Dataset> split_holdout(const Dataset& ds, double fraction, std::uint64_t seed);

enum class MixMode { identity, mixup };

/// Supervised items blended with self-supervised partners.
struct MixedDataset {
  Dataset data;                   // x_mix with the supervised labels
  std::vector<int> task_ids;      // one per item
  std::vector<std::size_t> ssl_sources;  // partner index in d_ssl (mixup only)
  float lambda = 0.5f;
  MixMode mode = MixMode::identity;
};

// λ·x_sl + (1-λ)·x_ssl with x_ssl drawn uniformly with replacement from
// d_ssl. Passing the same object twice (or `identical`) yields identity mode.
MixedDataset mix(const Dataset& d_ssl, const Dataset& d_sl, float lambda, std::uint64_t seed, int task_id = 0,
                 bool identical = false);

struct AugmentConfig {
  bool enabled = false;
  std::size_t crop_pad = 4;
  bool flip = true;
};

struct Batch {
  Tensor<float> images;  // [b, C, H, W]
  std::vector<int> labels;
  std::vector<int> task_ids;
  std::vector<std::size_t> indices;  // rows of the source dataset
  std::size_t size() const { return labels.size(); }
};

// Per-epoch permutation keyed by (seed, epoch), cut into batches of
// `batch_size` with the last partial batch kept.
std::vector<std::vector<std::size_t>> batch_order(std::size_t n, std::size_t batch_size, std::uint64_t seed,
                                                  std::uint64_t epoch);

Batch gather(const Dataset& ds, std::span<const std::size_t> indices, int task_id = 0);

std::vector<Batch> batches(const Dataset& ds, std::size_t batch_size, std::uint64_t seed, std::uint64_t epoch,
                           int task_id = 0);

// Pad-and-crop plus horizontal flip, drawn per image. Operates on the
// batch copy only; stored datasets are never touched.
void augment(Batch& batch, const AugmentConfig& cfg, RngStream& rng);

// Interleave per-task batch sequences: task order repeats until each task
// is exhausted, exhausted tasks drop out. Entries are (task, batch index).
std::vector<std::pair<std::size_t, std::size_t>> round_robin(std::span<const std::size_t> batch_counts);

}  // namespace mixtrain
