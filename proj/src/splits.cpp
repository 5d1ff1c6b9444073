#include "unlearn/splits.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>

#include "unlearn/digest.hpp"
#include "unlearn/error.hpp"
#include "unlearn/rng.hpp"

namespace unlearn {

const char* to_string(SplitMode mode) {
  switch (mode) {
    case SplitMode::Random: return "random";
    case SplitMode::Classwise: return "classwise";
    case SplitMode::DifficultyEasy: return "difficulty-easy";
    case SplitMode::DifficultyHard: return "difficulty-hard";
  }
  return "random";
}

SplitMode split_mode_from_string(const std::string& s) {
  if (s == "random") return SplitMode::Random;
  if (s == "classwise") return SplitMode::Classwise;
  if (s == "difficulty-easy") return SplitMode::DifficultyEasy;
  if (s == "difficulty-hard") return SplitMode::DifficultyHard;
  fail(ErrorCode::InvalidArgument, "unknown split mode '" + s + "'");
}

void to_json(nlohmann::json& j, const SplitSpec& s) {
  j = {{"mode", to_string(s.mode)},   {"seed", s.seed},
       {"forget", s.forget_indices},  {"retain", s.retain_indices},
       {"test", s.test_indices},      {"dataset_digest", s.dataset_digest}};
  if (s.fraction) j["fraction"] = *s.fraction;
  if (s.class_id) j["class_id"] = *s.class_id;
}

void from_json(const nlohmann::json& j, SplitSpec& s) {
  s.mode = split_mode_from_string(j.at("mode").get<std::string>());
  s.seed = j.value("seed", std::uint64_t{0});
  s.forget_indices = j.at("forget").get<std::vector<std::int64_t>>();
  s.retain_indices = j.at("retain").get<std::vector<std::int64_t>>();
  s.test_indices = j.value("test", std::vector<std::int64_t>{});
  s.dataset_digest = j.value("dataset_digest", "");
  s.fraction = j.contains("fraction") ? std::optional<double>(j.at("fraction").get<double>()) : std::nullopt;
  s.class_id = j.contains("class_id") ? std::optional<int>(j.at("class_id").get<int>()) : std::nullopt;
}

std::string SplitSpec::digest() const { return json_digest(nlohmann::json(*this)); }

void save_split(const SplitSpec& split, const std::filesystem::path& path) {
  std::ofstream out(path);
  require(static_cast<bool>(out), ErrorCode::Io, "cannot write " + path.string());
  out << nlohmann::json(split).dump() << '\n';
}

SplitSpec load_split(const std::filesystem::path& path) {
  std::ifstream in(path);
  require(static_cast<bool>(in), ErrorCode::Io, "cannot open split " + path.string());
  return nlohmann::json::parse(in).get<SplitSpec>();
}

void validate_split(const SplitSpec& split, const DatasetBundle& data) {
  std::vector<std::int64_t> all;
  all.reserve(split.forget_indices.size() + split.retain_indices.size());
  all.insert(all.end(), split.forget_indices.begin(), split.forget_indices.end());
  all.insert(all.end(), split.retain_indices.begin(), split.retain_indices.end());
  std::sort(all.begin(), all.end());
  require(all == data.train.indices(), ErrorCode::InvalidArgument,
          "forget and retain do not partition the training set");
  for (auto t : split.test_indices) {
    require(!data.train.contains(t), ErrorCode::InvalidArgument, "test index overlaps training set");
  }
  if (!split.dataset_digest.empty()) {
    require(split.dataset_digest == data.digest(), ErrorCode::InvalidArgument,
            "split was built for a different dataset");
  }
}

namespace {

SplitSpec partition(const std::vector<std::int64_t>& train, std::vector<std::int64_t> forget) {
  std::sort(forget.begin(), forget.end());
  SplitSpec s;
  s.retain_indices.reserve(train.size() - forget.size());
  std::set_difference(train.begin(), train.end(), forget.begin(), forget.end(),
                      std::back_inserter(s.retain_indices));
  s.forget_indices = std::move(forget);
  return s;
}

}  // namespace

SplitSpec make_random_forget_split(const DatasetBundle& data, double fraction, std::uint64_t seed) {
  require(!data.train.empty(), ErrorCode::InvalidArgument, "empty dataset");
  require(fraction > 0.0 && fraction < 1.0, ErrorCode::InvalidArgument, "fraction must lie in (0, 1)");
  const auto train = data.train.indices();
  const auto n = static_cast<std::int64_t>(train.size());
  const auto k = static_cast<std::int64_t>(std::llround(fraction * static_cast<double>(n)));
  Rng rng(derive_seed(seed, "split/random"));
  auto picks = rng.sample_without_replacement(n, k);
  std::vector<std::int64_t> forget;
  forget.reserve(picks.size());
  for (auto p : picks) forget.push_back(train[p]);
  auto s = partition(train, std::move(forget));
  s.test_indices = data.test.indices();
  s.seed = seed;
  s.mode = SplitMode::Random;
  s.fraction = fraction;
  s.dataset_digest = data.digest();
  return s;
}

SplitSpec make_classwise_forget_split(const DatasetBundle& data, int class_id) {
  require(class_id >= 0 && class_id < data.num_classes(), ErrorCode::InvalidArgument,
          "class_id outside [0, C)");
  const auto labels = data.train.labels();
  const auto* lp = labels.data_ptr<std::int64_t>();
  std::vector<std::int64_t> forget;
  for (std::int64_t i = 0; i < data.train.size(); ++i) {
    if (lp[i] == class_id) forget.push_back(data.train.first_index() + i);
  }
  require(!forget.empty(), ErrorCode::EmptyForgetSet, "class " + std::to_string(class_id) + " absent");
  auto s = partition(data.train.indices(), std::move(forget));
  s.test_indices = data.test.indices();
  s.mode = SplitMode::Classwise;
  s.class_id = class_id;
  s.dataset_digest = data.digest();
  return s;
}

SplitSpec make_difficulty_split(const std::map<std::int64_t, double>& loss_table, double fraction,
                                Difficulty mode, std::vector<std::int64_t> test_indices) {
  const auto n = static_cast<double>(loss_table.size());
  require(fraction > 0.0 && fraction < 1.0 && fraction * n >= 1.0, ErrorCode::InvalidArgument,
          "fraction * N must be at least 1");
  const auto k = static_cast<std::size_t>(std::llround(fraction * n));
  std::vector<std::pair<std::int64_t, double>> ranked(loss_table.begin(), loss_table.end());
  // std::map iterates in ascending index, so a stable sort leaves ties in index order.
  if (mode == Difficulty::Easy) {
    std::stable_sort(ranked.begin(), ranked.end(), [](auto& a, auto& b) { return a.second > b.second; });
  } else {
    std::stable_sort(ranked.begin(), ranked.end(), [](auto& a, auto& b) { return a.second < b.second; });
  }
  std::vector<std::int64_t> forget;
  for (std::size_t i = 0; i < k; ++i) forget.push_back(ranked[i].first);
  std::vector<std::int64_t> train;
  for (const auto& [idx, loss] : loss_table) train.push_back(idx);
  auto s = partition(train, std::move(forget));
  s.test_indices = std::move(test_indices);
  s.mode = mode == Difficulty::Easy ? SplitMode::DifficultyEasy : SplitMode::DifficultyHard;
  s.fraction = fraction;
  return s;
}

}  // namespace unlearn
