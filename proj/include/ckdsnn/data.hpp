#pragma once

#include "ckdsnn/rng.hpp"
#include "ckdsnn/tensor.hpp"

#include <cstdint>
#include <filesystem>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

namespace ckdsnn {

/// images[N, C, H, W] with values in [0, 1]; labels in [0, num_classes).
struct Dataset {
  TensorF images;
  std::vector<int> labels;
  int num_classes = 0;

  Index size() const { return static_cast<Index>(labels.size()); }
  Index channels() const { return images.dim(1); }
  Index height() const { return images.dim(2); }
  Index width() const { return images.dim(3); }

  Dataset take(const std::vector<Index>& indices) const;
  Dataset head(Index count) const;
};

class DataError : public std::runtime_error {
 public:
  enum class Kind { io, bad_magic, truncated, count_mismatch, label_out_of_range, bad_size, bad_dimensions };

  DataError(Kind kind, const std::string& what) : std::runtime_error(what), kind_(kind) {}
  Kind kind() const { return kind_; }

 private:
  Kind kind_;
};

/// Big-endian IDX pair: images magic 0x00000803, labels magic 0x00000801.
Dataset load_mnist_idx(const std::filesystem::path& images_path, const std::filesystem::path& labels_path);
void write_mnist_idx(const Dataset& data, const std::filesystem::path& images_path,
                     const std::filesystem::path& labels_path);

/// One CIFAR-10 binary batch: records of 1 label byte + 3072 planar RGB bytes.
Dataset load_cifar10_file(const std::filesystem::path& path);
/// data_batch_*.bin (train) or test_batch.bin from `dir` or `dir/cifar-10-batches-bin`.
Dataset load_cifar10_bin(const std::filesystem::path& dir, bool train = true);
void write_cifar10_bin(const Dataset& data, const std::filesystem::path& path);

struct SynthOptions {
  double noise_std = 0.0;         // additive Gaussian pixel noise
  int clutter = 0;                // random distractor strokes per image
  double min_scale = 0.45;        // shape half-extent as a fraction of size/2
  double max_scale = 0.8;
  bool jitter_position = true;
  double min_intensity = 0.6;

  /// Fixed-size centred shapes on a clean background.
  static SynthOptions trivial() { return {0.0, 0, 0.7, 0.7, false, 1.0}; }
  /// Noisy, cluttered variant used for the distillation experiments.
  static SynthOptions hard() { return {0.25, 2, 0.35, 0.8, true, 0.5}; }
};

/// Filled square / circle / triangle / cross at random positions. Sample i
/// has label i % classes; everything else is a pure function of `seed`.
Dataset synth_shapes(Index n, int classes = 4, Index size = 16, std::uint64_t seed = 0,
                     const SynthOptions& options = {});

/// Per-channel mean/std from a training split.
struct Normalizer {
  std::vector<float> mean;
  std::vector<float> stddev;

  static Normalizer fit(const Dataset& data);
  static Normalizer identity(Index channels);
  TensorF apply(const TensorF& images) const;
};

struct AugmentConfig {
  int crop_pad = 4;
  bool hflip = true;
};

/// Reflect-pad, random crop back to size, 50% horizontal flip per sample.
TensorF augment(const TensorF& batch, const AugmentConfig& config, Rng& rng);
/// Mirror the samples whose coin is set.
TensorF hflip(const TensorF& batch, const std::vector<bool>& coins);

struct Batch {
  TensorF images;
  std::vector<int> labels;
};

/// Mini-batches over a dataset; the visiting order is a pure function of (seed, epoch).
class BatchIterator {
 public:
  BatchIterator(const Dataset& data, Index batch_size, std::uint64_t seed, bool shuffle = true);

  std::vector<Index> order(std::int64_t epoch) const;
  std::vector<Batch> batches(std::int64_t epoch) const;
  Index batch_count() const;

 private:
  const Dataset* data_;
  Index batch_size_;
  std::uint64_t seed_;
  bool shuffle_;
};

enum class DatasetKind { mnist, cifar10, synthetic };
DatasetKind parse_dataset_kind(std::string_view text);
std::string to_string(DatasetKind kind);

struct DataSplits {
  Dataset train;
  Dataset test;
};

struct DataRequest {
  DatasetKind kind = DatasetKind::synthetic;
  std::filesystem::path data_dir;
  Index train_size = 4000;  // 0 keeps the full split
  Index test_size = 1000;
  Index synth_image_size = 16;
  std::uint64_t seed = 0;
};

/// Resolves the --data-dir layout (see README) or generates the synthetic set.
DataSplits load_splits(const DataRequest& request);

}  // namespace ckdsnn
