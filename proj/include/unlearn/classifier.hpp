#pragma once

#include <cstdint>
#include <filesystem>
#include <memory>
#include <string>
#include <vector>

#include <torch/torch.h>

#include "json.hpp"
#include "unlearn/datasets.hpp"

namespace unlearn {

/// Any image classifier: [B, C, H, W] -> [B, num_classes] logits.
struct ClassifierNet : torch::nn::Module {
  virtual torch::Tensor forward(torch::Tensor x) = 0;
};

struct ArchitectureSpec {
  /// small-cnn | resnet18
  std::string id = "small-cnn";
  int in_channels = 3;
  int image_size = 32;
  int num_classes = 10;
  /// Channel count of the first block; later blocks double it.
  int width = 16;
};

void to_json(nlohmann::json& j, const ArchitectureSpec& a);
void from_json(const nlohmann::json& j, ArchitectureSpec& a);

/// Three conv-ReLU-maxpool blocks and a linear head; no normalization layers,
/// so per-example outputs never depend on batch composition.
struct SmallCnn : ClassifierNet {
  SmallCnn(int in_channels, int image_size, int num_classes, int width);
  torch::Tensor forward(torch::Tensor x) override;

  torch::nn::Conv2d conv1{nullptr}, conv2{nullptr}, conv3{nullptr};
  torch::nn::Linear head{nullptr};
};

/// CIFAR-style ResNet-18 (3x3 stem, no initial pooling).
struct ResNet18 : ClassifierNet {
  ResNet18(int in_channels, int num_classes, int width = 64);
  torch::Tensor forward(torch::Tensor x) override;

  torch::nn::Sequential stem{nullptr}, layers{nullptr};
  torch::nn::Linear head{nullptr};
};

std::shared_ptr<ClassifierNet> make_classifier(const ArchitectureSpec& arch);

/// Deterministic He-uniform weights, zero biases, unit norm scales, drawn from `seed`.
void initialize_parameters(torch::nn::Module& module, std::uint64_t seed);

struct ClassifierCheckpoint {
  std::shared_ptr<ClassifierNet> net;
  ArchitectureSpec arch;
  std::string train_config_digest;
  std::uint64_t rng_seed = 0;
  std::string parent_digest;

  /// Digest over architecture and every parameter/buffer value.
  std::string digest() const;
  /// Deep copy with independent parameters.
  ClassifierCheckpoint clone() const;
};

ClassifierCheckpoint initialize_classifier(const ArchitectureSpec& arch, std::uint64_t seed);

struct TrainConfig {
  int epochs = 15;
  double lr = 0.05;
  int batch_size = 128;
  std::uint64_t seed = 0;
  double momentum = 0.9;
  double weight_decay = 5e-4;

  std::string digest() const;
};

void to_json(nlohmann::json& j, const TrainConfig& c);
void from_json(const nlohmann::json& j, TrainConfig& c);

struct TrainLogRow {
  int epoch = 0;
  std::string split;
  double loss = 0.0;
  double accuracy = 0.0;
  double wall_seconds = 0.0;
};

struct TrainingLog {
  std::vector<TrainLogRow> rows;
  void write_csv(const std::filesystem::path& path) const;
};

struct TrainResult {
  ClassifierCheckpoint checkpoint;
  TrainingLog log;
};

/// Minibatch SGD (momentum, weight decay, cosine learning-rate decay) on `view`.
/// The retrain reference is this function applied to the retain indices.
/// Throws DivergedError when the loss turns non-finite.
TrainResult train_classifier(const DataView& view, const ArchitectureSpec& arch, const TrainConfig& config,
                             const DataView* eval_view = nullptr);

/// Classifier used to label generated images; same trainer, separate name for the role.
TrainResult train_external_classifier(const DataView& real_data, const ArchitectureSpec& arch,
                                      const TrainConfig& config);

/// Cross-entropy of each example against its label, [B].
torch::Tensor per_sample_ce(ClassifierNet& net, const torch::Tensor& x, const torch::Tensor& y);
torch::Tensor per_sample_ce_from_logits(const torch::Tensor& logits, const torch::Tensor& y);

/// Inference helpers; run in eval mode without autograd, in chunks of `chunk`.
torch::Tensor predict_logits(ClassifierNet& net, const torch::Tensor& x, std::int64_t chunk = 512);
std::vector<double> per_sample_ce(ClassifierNet& net, const DataView& view, std::int64_t chunk = 512);
torch::Tensor predict_labels(ClassifierNet& net, const torch::Tensor& x, std::int64_t chunk = 512);

}  // namespace unlearn
