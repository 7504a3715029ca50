#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include <torch/torch.h>

#include "mbafl/trigger.hpp"

namespace mbafl {

/// Images in [0,1] as float32 [N, C, H, W] plus int64 labels [N].
struct Dataset {
  std::string name;
  std::int64_t num_classes = 0;
  torch::Tensor images;
  torch::Tensor labels;

  std::int64_t size() const { return labels.defined() ? labels.size(0) : 0; }
  bool empty() const { return size() == 0; }
  ImageShape image_shape() const;

  Dataset subset(std::span<const std::int64_t> indices) const;
  std::vector<std::int64_t> label_vector() const;
  std::vector<std::int64_t> class_histogram() const;

  /// Throws IngestionError when a label or pixel is out of range.
  void validate() const;
};

struct DatasetSplit {
  Dataset train;
  Dataset test;
};

struct LoadOptions {
  /// When positive, keep a class-balanced prefix of this many samples
  /// (file order within each class).
  std::int64_t train_subset = 0;
  std::int64_t test_subset = 0;
};

/// Dataset ids: cifar10, cifar100, gtsrb, fashion-mnist, synthetic.
///
/// Expected layouts under root:
///   cifar10        cifar-10-batches-bin/{data_batch_1..5,test_batch}.bin
///   cifar100       cifar-100-binary/{train,test}.bin
///   fashion-mnist  fashion-mnist/{train,t10k}-{images-idx3,labels-idx1}-ubyte
///   gtsrb          GTSRB/Final_Training/Images/<class>/GT-<class>.csv and
///                  GTSRB/Final_Test/Images/GT-final_test.csv (ppm images,
///                  resized to 32x32)
///   synthetic      generated in memory (no files)
DatasetSplit load_dataset(std::string_view name, const std::filesystem::path& root,
                          const LoadOptions& options = {});

bool is_known_dataset(std::string_view name);

/// Per-channel normalization statistics applied inside the model.
struct Normalization {
  std::vector<double> mean;
  std::vector<double> std;
};
Normalization dataset_normalization(std::string_view name, std::int64_t channels);

/// Class-conditional toy data: each class is a fixed random template plus
/// per-sample noise. Deterministic in seed.
Dataset make_synthetic_dataset(std::int64_t samples, std::int64_t num_classes,
                               ImageShape shape, std::uint64_t seed, double noise = 0.15);

/// First `count` samples of each class in dataset order, spread as evenly
/// as the class sizes allow; result keeps dataset order.
std::vector<std::int64_t> balanced_prefix(const Dataset& dataset, std::int64_t count);

struct Partition {
  std::vector<std::vector<std::int64_t>> client_indices;
  double alpha = 1.0;
  std::uint64_t seed = 0;

  std::int64_t num_clients() const {
    return static_cast<std::int64_t>(client_indices.size());
  }
};

Partition dirichlet_partition(const Dataset& dataset, std::int64_t n_clients, double alpha,
                              std::uint64_t seed);

/// Throws ConfigError unless the sets are non-empty, disjoint, and cover
/// [0, dataset_size).
void validate_partition(const Partition& partition, std::int64_t dataset_size);

struct PoisonedDataset {
  Dataset data;
  std::vector<std::int64_t> poisoned_positions;  // sorted
};

PoisonedDataset poison_dataset(const Dataset& client_data, const Trigger& trigger,
                               std::int64_t target_class, double poison_fraction,
                               std::uint64_t seed);

/// Balanced binary set: '+' (label 1) are untouched target-class samples,
/// '-' (label 0) are triggered non-target samples.
struct DetectorDataset {
  torch::Tensor images;  // [M, C, H, W]
  torch::Tensor labels;  // float32 [M], 1 = '+'
  std::vector<std::int64_t> source_position;
  std::vector<std::int64_t> source_label;
  std::int64_t target_class = 0;

  std::int64_t size() const { return static_cast<std::int64_t>(source_position.size()); }
  std::int64_t positives() const;
  std::int64_t negatives() const { return size() - positives(); }
};

DetectorDataset build_detector_dataset(const Dataset& client_data, const Trigger& trigger,
                                       std::int64_t target_class, std::uint64_t seed);

}  // namespace mbafl
