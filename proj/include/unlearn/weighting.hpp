#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <span>
#include <string>
#include <vector>

#include <torch/torch.h>

#include "json.hpp"
#include "unlearn/datasets.hpp"

namespace unlearn {

struct ClassifierCheckpoint;
struct DiffusionCheckpoint;

enum class WeightingVariant { Off, Static, Dynamic };

const char* to_string(WeightingVariant v);
WeightingVariant weighting_variant_from_string(const std::string& s);

/// Loss-based reweighting of the forgetting batch. `off` is the uniform baseline.
struct WeightingConfig {
  double tau = 10.0;
  WeightingVariant variant = WeightingVariant::Off;
};

void to_json(nlohmann::json& j, const WeightingConfig& c);
void from_json(const nlohmann::json& j, WeightingConfig& c);

/// Smallest raw weight ever emitted, so a batch never normalizes to 0/0.
inline constexpr double kWeightFloor = 1e-30;

/// exp(-eval_loss / tau), floored at kWeightFloor. Lower loss means the example
/// is better learned, harder to forget, and gets more weight.
double raw_weight(double eval_loss, double tau);

/// Divides by the batch sum. Throws invalid-argument on an empty batch or a non-positive entry.
std::vector<double> normalize_batch_weights(std::span<const double> raw);

/// normalize_batch_weights(raw_weight(loss_i, tau)) computed in log space, so
/// shifting every loss by a constant leaves the result unchanged and very
/// large losses do not underflow the whole batch.
std::vector<double> dynamic_batch_weights(std::span<const double> eval_losses, double tau);

torch::Tensor weights_tensor(std::span<const double> weights);

struct WeightEntry {
  double reference_loss = 0.0;
  double raw_weight = 1.0;
};

/// Per-example reference losses of the original model and their raw weights.
struct WeightTable {
  double tau = 10.0;
  std::map<std::int64_t, WeightEntry> entries;
  std::string source_model_digest;

  /// Normalized weights for a batch of indices. Throws incomplete-table on a missing index.
  std::vector<double> batch_weights(std::span<const std::int64_t> indices) const;
  const WeightEntry& at(std::int64_t index) const;

  /// CSV (index,reference_loss,raw_weight) preceded by one `# {json header}` line.
  void save_csv(const std::filesystem::path& path) const;
  static WeightTable load_csv(const std::filesystem::path& path);
};

/// Table over the forgetting view from cross-entropy on the original classifier.
WeightTable build_static_table(ClassifierCheckpoint& original, const DataView& forget, double tau);

struct StaticEvalOptions {
  std::uint64_t noise_seed = 0;
  /// 0 evaluates every timestep; otherwise an evenly strided subsample of this many.
  int max_timesteps = 0;
};

/// Table over the forgetting view from the timestep-averaged noise loss of the original diffusion model.
WeightTable build_static_table(DiffusionCheckpoint& original, const DataView& forget, double tau,
                               const StaticEvalOptions& options = {});

/// Checks that every forgetting index has an entry.
void require_complete(const WeightTable& table, std::span<const std::int64_t> forget_indices);

}  // namespace unlearn
