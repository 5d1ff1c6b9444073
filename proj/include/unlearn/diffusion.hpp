#pragma once

#include <cstdint>
#include <memory>
#include <string>
#include <vector>

#include <torch/torch.h>

#include "json.hpp"
#include "unlearn/classifier.hpp"
#include "unlearn/datasets.hpp"

namespace unlearn {

/// Linear beta schedule over timesteps 1..T. The DDPM endpoints (1e-4, 0.02 at
/// T = 1000) are rescaled by 1000 / T so that shorter chains still end near pure noise.
struct NoiseSchedule {
  int T = 0;
  std::vector<double> betas;       // betas[t - 1]
  std::vector<double> alpha_bars;  // cumulative product of (1 - beta) up to t

  static NoiseSchedule linear(int T, double beta_start = 1e-4, double beta_end = 0.02);

  double beta(int t) const { return betas.at(static_cast<std::size_t>(t - 1)); }
  double alpha_bar(int t) const { return alpha_bars.at(static_cast<std::size_t>(t - 1)); }
};

/// Noise predictor eps(x_t | t, y). `t` holds 1-based timesteps, `y` class ids
/// where num_classes is the null (unconditional) token.
struct EpsilonModel : torch::nn::Module {
  virtual torch::Tensor forward(torch::Tensor x_t, torch::Tensor t, torch::Tensor y) = 0;
};

struct UNetSpec {
  int in_channels = 1;
  int image_size = 16;
  int num_classes = 10;
  int base_channels = 32;
  int time_dim = 64;
};

void to_json(nlohmann::json& j, const UNetSpec& s);
void from_json(const nlohmann::json& j, UNetSpec& s);

struct UNetResBlock;

/// Two-level U-Net with GroupNorm residual blocks; timestep and class
/// embeddings are summed and injected into every block.
struct TinyUNet : EpsilonModel {
  explicit TinyUNet(const UNetSpec& spec);
  torch::Tensor forward(torch::Tensor x_t, torch::Tensor t, torch::Tensor y) override;

  UNetSpec spec;
  torch::nn::Sequential time_mlp{nullptr};
  torch::nn::Embedding class_embedding{nullptr};
  torch::nn::Conv2d conv_in{nullptr}, down1{nullptr}, down2{nullptr}, up1{nullptr}, up2{nullptr}, conv_out{nullptr};
  torch::nn::GroupNorm norm_out{nullptr};
  std::shared_ptr<UNetResBlock> enc1, enc2, mid, dec2, dec1;
};

struct DiffusionCheckpoint {
  std::shared_ptr<EpsilonModel> net;
  UNetSpec arch;
  NoiseSchedule schedule;
  std::uint64_t rng_seed = 0;
  std::string train_config_digest;
  std::string parent_digest;

  int T() const { return schedule.T; }
  int num_classes() const { return arch.num_classes; }
  int null_token() const { return arch.num_classes; }

  std::string digest() const;
  DiffusionCheckpoint clone() const;
};

DiffusionCheckpoint initialize_diffusion(const UNetSpec& arch, int T, std::uint64_t seed);

/// Dataset features live in [0, 1]; the diffusion process runs on [-1, 1].
torch::Tensor to_model_space(const torch::Tensor& features);
torch::Tensor from_model_space(const torch::Tensor& x);

/// x_t = sqrt(abar_t) x + sqrt(1 - abar_t) noise, per example.
torch::Tensor forward_noise(const NoiseSchedule& schedule, const torch::Tensor& x0, const torch::Tensor& t,
                            const torch::Tensor& noise);

/// ||noise - eps(x_t | y)||^2 per example (sum over pixels). `x0` in model space.
/// Throws invalid-argument when any t falls outside [1, T].
torch::Tensor diffusion_noise_loss(DiffusionCheckpoint& model, const torch::Tensor& x0, const torch::Tensor& y,
                                   const torch::Tensor& t, const torch::Tensor& noise);
/// Same loss from an already computed prediction.
torch::Tensor squared_error_per_example(const torch::Tensor& a, const torch::Tensor& b);

/// Standard-normal noise for one (example index, timestep) pair under `seed`;
/// reference tables and static evaluation use it so every pair is reproducible alone.
torch::Tensor example_noise(std::uint64_t seed, std::int64_t index, int t, torch::IntArrayRef shape);

void check_timesteps(const torch::Tensor& t, int T);

struct DiffusionTrainConfig {
  int steps = 4000;
  int batch_size = 64;
  double lr = 2e-3;
  std::uint64_t seed = 0;
  /// Probability of replacing the class with the null token during training.
  double cond_dropout = 0.1;
  int T = 200;

  std::string digest() const;
};

void to_json(nlohmann::json& j, const DiffusionTrainConfig& c);
void from_json(const nlohmann::json& j, DiffusionTrainConfig& c);

/// Adam on the epsilon-matching loss with uniform timesteps and classifier-free
/// condition dropout. Throws DivergedError on a non-finite loss.
DiffusionCheckpoint train_diffusion(const DataView& view, const UNetSpec& arch, const DiffusionTrainConfig& config,
                                    TrainingLog* log = nullptr);

/// Guided noise estimate eps_u + s * (eps_c - eps_u); s = 0 (or the null class)
/// evaluates only the unconditional branch.
torch::Tensor guided_epsilon(EpsilonModel& net, const torch::Tensor& x_t, const torch::Tensor& t, int class_id,
                             int null_token, double guidance_scale);

/// Ancestral DDPM sampling over all T steps with classifier-free guidance.
/// Returns [count, C, H, W] clipped to [0, 1]; deterministic given `seed`.
torch::Tensor sample_diffusion(DiffusionCheckpoint& model, int class_id, int count, double guidance_scale,
                               std::uint64_t seed);

}  // namespace unlearn
