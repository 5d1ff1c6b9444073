#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <torch/torch.h>

#include "unlearn/datasets.hpp"
#include "unlearn/diffusion.hpp"
#include "unlearn/rng.hpp"
#include "unlearn/weighting.hpp"

namespace unlearn {

/// Guards the division by m(t).
inline constexpr double kTableFloor = 1e-8;

enum class TableSource { Exhaustive, Fitted };

const char* to_string(TableSource s);

struct ExponentialFit {
  double a = 0.0;
  double b = 0.0;
  double c = 0.0;
  /// Root-mean-square residual divided by the mean |y|.
  double relative_rms = 0.0;
  bool converged = false;

  double operator()(double t) const;
};

/// Least squares fit of y = a * exp(b * t) + c. For fixed b the problem is
/// linear in (a, c), so b is searched on a coarse grid and refined by golden
/// section. Needs at least three points.
ExponentialFit fit_exponential(std::span<const double> t, std::span<const double> y);

/// Mean forgetting-set loss of the original model per timestep.
struct TimestepLossTable {
  int T = 0;
  std::vector<double> mean_loss;  // mean_loss[t - 1]
  TableSource source = TableSource::Exhaustive;
  std::optional<ExponentialFit> fit;
  /// Fitted source whose curve fit failed; entries interpolate the sampled means linearly.
  bool piecewise_fallback = false;
  int num_examples = 0;
  int num_timesteps = 0;
  std::int64_t evaluations = 0;
  std::string model_digest;
  std::uint64_t seed = 0;

  double m(int t) const;

  /// CSV (t,mean_loss) preceded by one `# {json header}` line.
  void save_csv(const std::filesystem::path& path) const;
  static TimestepLossTable load_csv(const std::filesystem::path& path);
};

/// Noise loss of every (example, timestep) pair, [N][timesteps.size()], with
/// noise from example_noise(noise_seed, index, t).
std::vector<std::vector<double>> timestep_loss_matrix(DiffusionCheckpoint& model, const DataView& view,
                                                      std::span<const int> timesteps, std::uint64_t noise_seed);

/// Every (example, t) pair, N * T evaluations. Throws degenerate-table when some m(t) < kTableFloor.
TimestepLossTable build_reference_table_exhaustive(DiffusionCheckpoint& model, const DataView& forget,
                                                   std::uint64_t noise_seed);

/// Evenly spaced grid of `count` timesteps in [1, T], endpoints included.
std::vector<int> timestep_grid(int T, int count);

/// Table from sampled means: exponential fit, or linear interpolation if the fit fails
/// (fewer than three points, non-finite parameters, relative RMS above 0.25).
TimestepLossTable table_from_samples(int T, std::span<const int> timesteps, std::span<const double> means);

/// Samples `num_examples` forgetting examples and `num_timesteps` grid points,
/// num_examples * num_timesteps evaluations in total, and fits the curve.
TimestepLossTable fit_reference_table(DiffusionCheckpoint& model, const DataView& forget, int num_examples,
                                      int num_timesteps, std::uint64_t seed);

/// Draws t with probability proportional to 1 / m(t).
class TimestepSampler {
 public:
  explicit TimestepSampler(const TimestepLossTable& table);
  int sample(Rng& rng) const;
  double probability(int t) const;
  int T() const { return static_cast<int>(cumulative_.size()); }

 private:
  std::vector<double> cumulative_;
};

int sample_timestep(const TimestepLossTable& table, Rng& rng);

/// loss / m(t), with m(t) floored.
double rescale_loss(double loss, const TimestepLossTable& table, int t);
torch::Tensor rescale_losses(const torch::Tensor& losses, const TimestepLossTable& table, const torch::Tensor& t);

/// Noise loss of the current model divided by the reference mean at each example's t.
torch::Tensor estimated_eval_loss(DiffusionCheckpoint& model, const torch::Tensor& x0, const torch::Tensor& y,
                                  const torch::Tensor& t, const torch::Tensor& noise, const TimestepLossTable& table);

/// Uniform average over the timestep grid (all T, or an evenly strided subset) for each example.
std::vector<double> static_eval_losses(DiffusionCheckpoint& model, const DataView& view,
                                       const StaticEvalOptions& options = {});
double static_eval_loss(DiffusionCheckpoint& model, const Dataset& data, std::int64_t index,
                        const StaticEvalOptions& options = {});

}  // namespace unlearn
