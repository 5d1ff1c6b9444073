#pragma once

#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <optional>
#include <string>
#include <vector>

#include "json.hpp"
#include "unlearn/classifier.hpp"
#include "unlearn/datasets.hpp"
#include "unlearn/diffusion.hpp"
#include "unlearn/objectives.hpp"
#include "unlearn/splits.hpp"

namespace unlearn {

struct SplitPlan {
  std::string name;
  SplitMode mode = SplitMode::Random;
  double fraction = 0.1;
  int class_id = 0;
  /// Overrides the plan-level retrain flag for this split.
  std::optional<bool> retrain;
};

struct RecipePlan {
  std::string name;
  std::string split;
  UnlearnRecipe recipe;
  /// False when the plan omitted `seed`; the seed then derives from the global seed.
  bool explicit_seed = false;
};

/// How diffusion recipes build their reference tables.
struct TablePlan {
  bool exhaustive = false;
  int num_examples = 50;
  int num_timesteps = 10;
  /// Timesteps averaged per example for static weights; 0 = all T.
  int static_max_timesteps = 0;
};

struct DiffusionPlan {
  UNetSpec unet;
  DiffusionTrainConfig train;
  ArchitectureSpec external_arch;
  TrainConfig external;
  double guidance_scale = 2.0;
  int samples = 100;
  std::optional<TablePlan> table;
};

struct EvaluationPlan {
  bool mia = true;
  bool difficulty = true;
};

struct ExperimentPlan {
  std::string name = "experiment";
  std::uint64_t seed = 0;
  Task task = Task::Classifier;
  DatasetSpec dataset;
  ArchitectureSpec architecture;
  TrainConfig pretrain;
  bool retrain = true;
  std::vector<SplitPlan> splits;
  std::vector<RecipePlan> recipes;
  EvaluationPlan evaluation;
  std::optional<DiffusionPlan> diffusion;
  std::string output;

  std::string digest() const;
};

void to_json(nlohmann::json& j, const ExperimentPlan& p);

struct Diagnostic {
  std::string field;
  std::string message;
};

/// Empty iff the document describes a runnable plan. Never throws.
std::vector<Diagnostic> validate_plan(const nlohmann::json& doc);
std::vector<Diagnostic> validate_plan(const ExperimentPlan& plan);

/// Throws invalid-argument listing every diagnostic when the plan does not validate.
ExperimentPlan parse_plan(const nlohmann::json& doc);
ExperimentPlan load_plan(const std::filesystem::path& path);

/// Seeds used by a plan, derived from the global seed:
///   pretrain/retrain/external  derive_seed(g, "pretrain") etc.
///   split i                    derive_seed(g, "split", i)
///   recipe i (unless explicit) derive_seed(g, "recipe", i)
///   evaluation noise           derive_seed(g, "eval")
std::uint64_t plan_seed(const ExperimentPlan& plan, const std::string& stage, std::uint64_t counter = 0);

struct RunOptions {
  std::filesystem::path output;
  bool resume = false;
  int jobs = 1;
  std::optional<std::uint64_t> seed;
  std::ostream* log = nullptr;
};

struct StageRecord {
  std::string name;
  std::string kind;  // pretrain, external, split, retrain, table, run, report
  bool computed = false;
};

struct PlanResult {
  std::filesystem::path root;
  std::vector<StageRecord> stages;
  int computed() const;
  int computed(const std::string& kind) const;
};

/// Runs every stage of the plan under `options.output` (or plan.output). Stages whose
/// input digest and output files are unchanged are skipped. Writes state.json while
/// running and index.json at the end; a failure leaves state.json marked failed and a
/// later call needs `resume` to continue in that directory.
PlanResult run_plan(ExperimentPlan plan, const RunOptions& options);

/// Checks that every artifact in index.json exists and matches its digest; returns problems.
std::vector<std::string> verify_index(const std::filesystem::path& root);

}  // namespace unlearn
