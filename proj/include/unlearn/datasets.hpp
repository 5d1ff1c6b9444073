#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <torch/torch.h>

#include "json.hpp"

namespace unlearn {

/// One indexed item. Index is stable across runs; features are channel-major in [0, 1].
struct LabeledExample {
  std::int64_t index = 0;
  torch::Tensor features;
  std::int64_t label = 0;
};

/// Contiguous block of examples with consecutive indices [first_index, first_index + size).
class Dataset {
 public:
  Dataset() = default;
  Dataset(torch::Tensor features, torch::Tensor labels, int num_classes, std::int64_t first_index = 0);

  std::int64_t size() const { return labels_.defined() ? labels_.size(0) : 0; }
  bool empty() const { return size() == 0; }
  int num_classes() const { return num_classes_; }
  std::int64_t first_index() const { return first_index_; }
  std::vector<std::int64_t> indices() const;
  bool contains(std::int64_t index) const {
    return index >= first_index_ && index < first_index_ + size();
  }
  /// [channels, height, width]
  std::vector<std::int64_t> example_shape() const;

  const torch::Tensor& features() const { return features_; }
  const torch::Tensor& labels() const { return labels_; }
  LabeledExample example(std::int64_t index) const;

  torch::Tensor gather_features(std::span<const std::int64_t> indices) const;
  torch::Tensor gather_labels(std::span<const std::int64_t> indices) const;
  std::string digest() const;

 private:
  torch::Tensor features_;  // [N, C, H, W] float32
  torch::Tensor labels_;    // [N] int64
  int num_classes_ = 0;
  std::int64_t first_index_ = 0;
};

/// Train and held-out test data; test indices continue after the training indices.
struct DatasetBundle {
  std::string name;
  Dataset train;
  Dataset test;

  std::string digest() const;
  int num_classes() const { return train.num_classes(); }
};

/// A subset of one dataset addressed by index.
class DataView {
 public:
  DataView() = default;
  DataView(const Dataset& data, std::vector<std::int64_t> indices);

  const Dataset& data() const { return *data_; }
  const std::vector<std::int64_t>& indices() const { return indices_; }
  std::int64_t size() const { return static_cast<std::int64_t>(indices_.size()); }
  bool empty() const { return indices_.empty(); }

  torch::Tensor features() const { return data_->gather_features(indices_); }
  torch::Tensor labels() const { return data_->gather_labels(indices_); }

 private:
  const Dataset* data_ = nullptr;
  std::vector<std::int64_t> indices_;
};

struct Batch {
  std::vector<std::int64_t> indices;
  torch::Tensor x;
  torch::Tensor y;
};

Batch make_batch(const Dataset& data, std::vector<std::int64_t> indices);

/// Declarative dataset source; the digest of the loaded bundle, not this struct, identifies data.
struct DatasetSpec {
  /// synthetic-cifar | synthetic-shapes | raw | cifar10-bin
  std::string source = "synthetic-cifar";
  std::int64_t train_size = 5000;
  std::int64_t test_size = 1000;
  std::uint64_t seed = 0;
  int image_size = 32;
  /// Directory for raw / cifar10-bin sources; relative paths resolve against UNLEARN_DATA_DIR.
  std::string path;
};

void to_json(nlohmann::json& j, const DatasetSpec& spec);
void from_json(const nlohmann::json& j, DatasetSpec& spec);

DatasetBundle load_dataset(const DatasetSpec& spec);

/// Ten-class, three-channel images built from class-specific colored gratings
/// mixed with a distractor class and pixel noise; example difficulty varies
/// with the mixing weight, and a small fraction of labels is flipped.
DatasetBundle make_synthetic_cifar(std::int64_t train_size, std::int64_t test_size,
                                   std::uint64_t seed, int image_size = 32);

/// Ten-class grayscale shapes (squares, rings, bars, ...) with position and scale jitter.
DatasetBundle make_synthetic_shapes(std::int64_t train_size, std::int64_t test_size,
                                    std::uint64_t seed, int image_size = 16);

/// Raw-array directory: manifest.json plus little-endian float32 features and uint8 labels.
/// See docs/data_format.md.
DatasetBundle load_raw_dataset(const std::filesystem::path& dir);
void save_raw_dataset(const DatasetBundle& bundle, const std::filesystem::path& dir);

/// CIFAR-10 binary batches (data_batch_1..5.bin, test_batch.bin); keeps the first
/// train_size / test_size records.
DatasetBundle load_cifar10_binary(const std::filesystem::path& dir, std::int64_t train_size,
                                  std::int64_t test_size);

std::filesystem::path resolve_data_path(const std::string& path);

}  // namespace unlearn
