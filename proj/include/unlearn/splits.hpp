#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "json.hpp"
#include "unlearn/datasets.hpp"

namespace unlearn {

enum class SplitMode { Random, Classwise, DifficultyEasy, DifficultyHard };

const char* to_string(SplitMode mode);
SplitMode split_mode_from_string(const std::string& s);

/// Forget/retain partition of the training set plus the held-out test indices.
struct SplitSpec {
  std::vector<std::int64_t> forget_indices;
  std::vector<std::int64_t> retain_indices;
  std::vector<std::int64_t> test_indices;
  std::uint64_t seed = 0;
  SplitMode mode = SplitMode::Random;
  std::optional<double> fraction;
  std::optional<int> class_id;
  std::string dataset_digest;

  std::string digest() const;
};

void to_json(nlohmann::json& j, const SplitSpec& s);
void from_json(const nlohmann::json& j, SplitSpec& s);
void save_split(const SplitSpec& split, const std::filesystem::path& path);
SplitSpec load_split(const std::filesystem::path& path);

/// Throws invalid-argument unless forget and retain partition `train` exactly and
/// test indices avoid the training range.
void validate_split(const SplitSpec& split, const DatasetBundle& data);

/// |forget| = round(fraction * |train|), drawn uniformly without replacement.
SplitSpec make_random_forget_split(const DatasetBundle& data, double fraction, std::uint64_t seed);

SplitSpec make_classwise_forget_split(const DatasetBundle& data, int class_id);

enum class Difficulty { Easy, Hard };

/// Easy selects the largest losses on the original model, hard the smallest;
/// ties go to the lower index. Retain is every other key of `loss_table`.
SplitSpec make_difficulty_split(const std::map<std::int64_t, double>& loss_table, double fraction,
                                Difficulty mode, std::vector<std::int64_t> test_indices = {});

}  // namespace unlearn
