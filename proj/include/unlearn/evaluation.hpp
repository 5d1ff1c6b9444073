#pragma once

#include <array>
#include <cstdint>
#include <functional>
#include <map>
#include <string>
#include <utility>
#include <vector>

#include <torch/torch.h>

#include "json.hpp"
#include "unlearn/classifier.hpp"
#include "unlearn/datasets.hpp"
#include "unlearn/diffusion.hpp"
#include "unlearn/engine.hpp"
#include "unlearn/splits.hpp"

namespace unlearn {

/// Percentage of argmax-correct predictions. Throws invalid-argument on an empty view.
double accuracy(ClassifierNet& net, const DataView& view);

struct AccuracyTriple {
  double ua = 0.0;
  double ra = 0.0;
  double ta = 0.0;
};

/// prod over forget/retain/test of (1 - |gap| / 100), in percent.
double tow(const AccuracyTriple& unlearned, const AccuracyTriple& retrained);
double tow_from_gaps(double gap_f, double gap_r, double gap_t);

/// Mean of the four absolute gaps (UA, RA, TA, MIA).
double avg_gap(const std::array<double, 4>& gaps);

struct MiaResult {
  double score = 50.0;
  /// Loss at or below which an example is called a member.
  double threshold = 0.0;
  double balanced_accuracy = 0.5;
  bool degenerate = false;
};

/// Global loss-threshold attacker fit on members (retain) vs non-members (test);
/// the score is the percentage of forgetting losses called non-members.
MiaResult mia_from_losses(std::vector<double> member, std::vector<double> non_member,
                          const std::vector<double>& forget);
MiaResult mia_score(ClassifierNet& net, const DataView& retain, const DataView& test, const DataView& forget);

/// Generates `count` images and returns the percentage the external classifier
/// assigns to `forgotten_class`. Throws invalid-argument when count < 1.
using ImageSampler = std::function<torch::Tensor(int count, std::uint64_t seed)>;
double generation_ua(const ImageSampler& sampler, int forgotten_class, ClassifierNet& external, int count,
                     std::uint64_t seed);
double generation_ua(DiffusionCheckpoint& model, int class_id, ClassifierNet& external, int count, std::uint64_t seed,
                     double guidance_scale = 2.0);

struct DifficultyRecord {
  std::int64_t index = 0;
  double loss_on_original = 0.0;
  bool forgotten = false;
};

std::vector<DifficultyRecord> difficulty_scatter(ClassifierNet& original, ClassifierNet& unlearned,
                                                 const DataView& forget);
void write_difficulty_csv(const std::vector<DifficultyRecord>& records, const std::filesystem::path& path);

/// rte in minutes: the final cumulative wall time of the trajectory.
double rte(const UnlearnRun& run);

struct ModelMetrics {
  double ua = 0.0;
  double ra = 0.0;
  double ta = 0.0;
  double mia = 0.0;
  bool mia_degenerate = false;
};

ModelMetrics measure(ClassifierNet& net, const DataView& forget, const DataView& retain, const DataView& test);

struct EvalReport {
  std::string label;
  ModelMetrics metrics;
  ModelMetrics reference;
  std::array<double, 4> gaps{};
  double tow = 100.0;
  double avg_gap = 0.0;
  double rte_minutes = 0.0;
  std::string model_digest;
  std::string retrain_digest;
  std::string split_digest;
};

EvalReport make_report(const ModelMetrics& unlearned, const ModelMetrics& retrained, double rte_minutes);

void to_json(nlohmann::json& j, const EvalReport& r);
void from_json(const nlohmann::json& j, EvalReport& r);
/// Flat CSV. Timing lives in a separate file so that metric CSVs stay reproducible.
std::string eval_csv_header();
std::string eval_csv_row(const EvalReport& r);

struct EasyHardResult {
  SplitSpec easy_split;
  SplitSpec hard_split;
  EvalReport easy;
  EvalReport hard;
};

/// Builds easy and hard splits from original-model losses, retrains a reference on
/// each retain set, runs the same recipe on both and reports each against its reference.
EasyHardResult easy_hard_comparison(const DatasetBundle& data, const ClassifierCheckpoint& original,
                                    const std::map<std::int64_t, double>& loss_table, const UnlearnRecipe& recipe,
                                    double fraction, const TrainConfig& retrain_config);

}  // namespace unlearn
