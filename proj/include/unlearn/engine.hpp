#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "unlearn/classifier.hpp"
#include "unlearn/datasets.hpp"
#include "unlearn/diffusion.hpp"
#include "unlearn/diffusion_eval.hpp"
#include "unlearn/error.hpp"
#include "unlearn/objectives.hpp"
#include "unlearn/weighting.hpp"

namespace unlearn {

struct PairedBatch {
  std::vector<std::int64_t> forget;
  std::vector<std::int64_t> retain;  // empty without a retain view
};

/// Forgetting examples reshuffled per (seed, epoch) and cut into batches, each paired
/// with one retain batch taken from a per-epoch retain permutation (wrapping when
/// exhausted). Batch sizes above a view's size are clamped with a warning on stderr.
std::vector<PairedBatch> pair_batches(const DataView& forget, const DataView* retain, int batch_size,
                                      std::uint64_t seed, int epoch);

struct TrajectoryRow {
  int epoch = 0;
  /// NaN when the epoch evaluator is disabled.
  double ua = 0.0;
  double forget_loss_mean = 0.0;
  double retain_loss_mean = 0.0;
  /// Cumulative unlearning time, excluding the per-epoch UA evaluation.
  double wall_seconds = 0.0;
};

/// Per-epoch summary of batch-relative weights n * w', where 1 is the uniform weight.
struct WeightSnapshot {
  int epoch = 0;
  double min = 0.0;
  double median = 0.0;
  double max = 0.0;
  std::vector<std::pair<std::int64_t, double>> entries;
};

struct UnlearnRun {
  UnlearnRecipe recipe;
  std::string recipe_digest;
  std::string start_digest;
  std::string final_digest;
  std::vector<TrajectoryRow> trajectory;
  std::vector<WeightSnapshot> weight_snapshots;
  std::optional<ClassifierCheckpoint> classifier;
  std::optional<DiffusionCheckpoint> diffusion;

  /// recipe.json, trajectory.csv, weights_epochN.csv, final checkpoint as final.{bin,json}.
  void save(const std::filesystem::path& dir) const;
};

/// Thrown on a non-finite loss; carries the epochs completed so far.
class UnlearnDivergedError : public DivergedError {
 public:
  UnlearnDivergedError(int epoch, const std::string& what, std::vector<TrajectoryRow> partial)
      : DivergedError(epoch, what), partial_(std::move(partial)) {}
  const std::vector<TrajectoryRow>& partial_trajectory() const { return partial_; }

 private:
  std::vector<TrajectoryRow> partial_;
};

struct UnlearnTables {
  const WeightTable* weights = nullptr;
  const TimestepLossTable* timesteps = nullptr;
  /// Masked recipes build their own mask from the original model when none is given.
  const SaliencyMask* mask = nullptr;
};

struct EngineOptions {
  /// Classifier runs default to accuracy on the forgetting view.
  std::function<double(ClassifierNet&)> classifier_epoch_eval;
  std::function<double(DiffusionCheckpoint&)> diffusion_epoch_eval;
  bool track_ua = true;
  bool keep_weight_snapshots = true;
};

UnlearnRun run_unlearning(const ClassifierCheckpoint& original, const DataView& forget, const DataView& retain,
                          const UnlearnRecipe& recipe, const UnlearnTables& tables = {},
                          const EngineOptions& options = {});

/// Random-label diffusion unlearning; each forgetting example gets one (t, noise)
/// draw per step that feeds both its loss and its weight. Dynamic weighting draws
/// t from the reference table, otherwise t is uniform.
UnlearnRun run_unlearning(const DiffusionCheckpoint& original, const DataView& forget, const DataView& retain,
                          const UnlearnRecipe& recipe, const UnlearnTables& tables = {},
                          const EngineOptions& options = {});

void write_trajectory_csv(const std::vector<TrajectoryRow>& rows, const std::filesystem::path& path);

}  // namespace unlearn
