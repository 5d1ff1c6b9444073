#pragma once

#include <cmath>
#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include <gtest/gtest.h>
#include <torch/torch.h>

#include "unlearn/classifier.hpp"
#include "unlearn/datasets.hpp"
#include "unlearn/diffusion.hpp"
#include "unlearn/error.hpp"
#include "unlearn/rng.hpp"

namespace unlearn::testing {

#define EXPECT_ERROR_CODE(stmt, expected)                                        \
  do {                                                                           \
    try {                                                                        \
      stmt;                                                                      \
      ADD_FAILURE() << "expected " << ::unlearn::to_string(expected);           \
    } catch (const ::unlearn::Error& e) {                                        \
      EXPECT_EQ(e.code(), expected) << e.what();                                 \
    }                                                                            \
  } while (0)

/// Balanced toy classification set; pixel (0,0,0) carries label / 10 so a lookup model can read it.
inline DatasetBundle labeled_toy(std::int64_t train, std::int64_t test, int classes = 10, int size = 4,
                                 std::uint64_t seed = 0) {
  auto make = [&](std::int64_t n, std::int64_t first, std::uint64_t s) {
    auto gen = make_torch_generator(s);
    auto x = torch::rand({n, 1, size, size}, gen);
    auto y = torch::arange(n, torch::kInt64).remainder(classes);
    x.select(1, 0).select(1, 0).select(1, 0).copy_(y.to(torch::kFloat32) / 10.0);
    return Dataset(x, y, classes, first);
  };
  DatasetBundle b;
  b.name = "toy";
  b.train = make(train, 0, seed);
  b.test = make(test, train, seed + 1);
  return b;
}

/// Emits confident logits for the label encoded in pixel (0,0,0).
struct LookupNet : ClassifierNet {
  explicit LookupNet(int classes, double margin = 20.0) : classes(classes), margin(margin) {}
  torch::Tensor forward(torch::Tensor x) override {
    auto y = (x.select(1, 0).select(1, 0).select(1, 0) * 10.0).round().to(torch::kInt64);
    return torch::one_hot(y, classes).to(torch::kFloat32) * margin;
  }
  int classes;
  double margin;
};

/// Always predicts the same logits for every input.
struct ConstantNet : ClassifierNet {
  explicit ConstantNet(torch::Tensor logits) : logits(std::move(logits)) {}
  torch::Tensor forward(torch::Tensor x) override { return logits.unsqueeze(0).expand({x.size(0), logits.size(0)}); }
  torch::Tensor logits;
};

/// Returns zeros, so the noise loss equals ||noise||^2.
struct ZeroEpsilon : EpsilonModel {
  torch::Tensor forward(torch::Tensor x_t, torch::Tensor, torch::Tensor) override { return torch::zeros_like(x_t); }
};

/// Recovers the injected noise exactly when x0 = 0.
struct EchoEpsilon : EpsilonModel {
  explicit EchoEpsilon(NoiseSchedule s) : schedule(std::move(s)) {}
  torch::Tensor forward(torch::Tensor x_t, torch::Tensor t, torch::Tensor) override {
    auto abar = torch::tensor(schedule.alpha_bars, torch::kFloat64).index_select(0, t - 1);
    return x_t / (1.0 - abar).sqrt().to(torch::kFloat32).view({-1, 1, 1, 1});
  }
  NoiseSchedule schedule;
};

/// Small trainable epsilon model that ignores its class input.
struct Unconditional : EpsilonModel {
  Unconditional() { conv = register_module("conv", torch::nn::Conv2d(torch::nn::Conv2dOptions(1, 1, 3).padding(1))); }
  torch::Tensor forward(torch::Tensor x_t, torch::Tensor t, torch::Tensor) override {
    return conv->forward(x_t) * (1.0 + t.to(torch::kFloat32).view({-1, 1, 1, 1}) / 100.0);
  }
  torch::nn::Conv2d conv{nullptr};
};

inline DiffusionCheckpoint wrap_epsilon(std::shared_ptr<EpsilonModel> net, int T, int size = 4, int classes = 10) {
  DiffusionCheckpoint c;
  c.net = std::move(net);
  c.arch.in_channels = 1;
  c.arch.image_size = size;
  c.arch.num_classes = classes;
  c.schedule = NoiseSchedule::linear(T);
  return c;
}

/// Constant-valued image set (features 0.5, so model-space x0 = 0).
inline DatasetBundle flat_images(std::int64_t n, int classes = 10, int size = 4) {
  DatasetBundle b;
  b.name = "flat";
  auto y = torch::arange(n, torch::kInt64).remainder(classes);
  b.train = Dataset(torch::full({n, 1, size, size}, 0.5f), y, classes, 0);
  b.test = Dataset(torch::full({classes, 1, size, size}, 0.5f), torch::arange(classes, torch::kInt64), classes, n);
  return b;
}

inline std::filesystem::path scratch_dir(const std::string& name) {
  auto dir = std::filesystem::temp_directory_path() / ("unlearn_test_" + name);
  std::filesystem::remove_all(dir);
  std::filesystem::create_directories(dir);
  return dir;
}

inline std::vector<double> to_vector(const torch::Tensor& t) {
  auto c = t.detach().to(torch::kFloat64).contiguous();
  return {c.data_ptr<double>(), c.data_ptr<double>() + c.numel()};
}

}  // namespace unlearn::testing
