#include <fstream>
#include <sstream>

#include "support.hpp"
#include "unlearn/digest.hpp"
#include "unlearn/harness.hpp"

namespace unlearn {
namespace {

using nlohmann::json;

json tiny_plan() {
  return json::parse(R"({
    "name": "tiny",
    "seed": 3,
    "dataset": {"source": "synthetic-cifar", "train_size": 200, "test_size": 60, "image_size": 16},
    "architecture": {"id": "small-cnn", "width": 4},
    "pretrain": {"epochs": 1, "lr": 0.05, "batch_size": 50},
    "retrain": false,
    "splits": [{"name": "r", "mode": "random", "fraction": 0.1}],
    "recipes": [{"name": "ga", "split": "r", "method": "GA", "epochs": 1, "lr": 0.01, "batch_size": 10}]
  })");
}

std::string slurp(const std::filesystem::path& p) {
  std::ifstream in(p);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

bool has_field(const std::vector<Diagnostic>& ds, const std::string& field) {
  for (const auto& d : ds) {
    if (d.field == field) return true;
  }
  return false;
}

TEST(ValidatePlan, AcceptsShippedPlans) {
  for (const auto& entry : std::filesystem::directory_iterator(UNLEARN_PLANS_DIR)) {
    if (entry.path().extension() != ".json") continue;
    std::ifstream in(entry.path());
    const auto diags = validate_plan(json::parse(in));
    EXPECT_TRUE(diags.empty()) << entry.path() << ": " << (diags.empty() ? "" : diags[0].field + " " + diags[0].message);
  }
}

TEST(ValidatePlan, PointsAtTheOffendingField) {
  auto p = tiny_plan();
  p["recipes"][0]["weighting"] = {{"tau", -1.0}, {"variant", "dynamic"}};
  EXPECT_TRUE(has_field(validate_plan(p), "recipes[0].weighting.tau"));

  p = tiny_plan();
  p["recipes"][0]["split"] = "nope";
  EXPECT_TRUE(has_field(validate_plan(p), "recipes[0].split"));

  p = tiny_plan();
  p["splits"].push_back(p["splits"][0]);
  EXPECT_TRUE(has_field(validate_plan(p), "splits[1].name"));

  p = tiny_plan();
  p["splits"][0]["fraction"] = 1.5;
  EXPECT_TRUE(has_field(validate_plan(p), "splits[0].fraction"));

  p = tiny_plan();
  p["dataset"]["source"] = "imagenet";
  EXPECT_TRUE(has_field(validate_plan(p), "dataset.source"));

  p = tiny_plan();
  p["recipes"][0]["method"] = "XX";
  EXPECT_TRUE(has_field(validate_plan(p), "recipes[0].method"));

  EXPECT_TRUE(validate_plan(tiny_plan()).empty());
  EXPECT_ERROR_CODE(parse_plan(json::array()), ErrorCode::InvalidArgument);
}

TEST(ValidatePlan, DiffusionRules) {
  auto p = json::parse(R"({
    "task": "diffusion",
    "dataset": {"source": "synthetic-shapes", "train_size": 100, "test_size": 20, "image_size": 16},
    "diffusion": {"unet": {"base_channels": 8}, "train": {"steps": 10, "T": 20}},
    "splits": [{"name": "c", "mode": "classwise", "class_id": 1}],
    "recipes": [{"name": "rl-d", "split": "c", "method": "RL", "weighting": {"variant": "dynamic"}}]
  })");
  EXPECT_TRUE(has_field(validate_plan(p), "recipes[0].weighting.variant"));
  p["diffusion"]["table"] = {{"num_examples", 5}, {"num_timesteps", 5}};
  EXPECT_TRUE(validate_plan(p).empty());
  p["recipes"][0]["method"] = "GAR";
  EXPECT_TRUE(has_field(validate_plan(p), "recipes[0].method"));
}

TEST(PlanSeed, StageLabelsSeparateStreams) {
  const auto plan = parse_plan(tiny_plan());
  EXPECT_NE(plan_seed(plan, "pretrain"), plan_seed(plan, "split"));
  EXPECT_NE(plan_seed(plan, "split", 0), plan_seed(plan, "split", 1));
  EXPECT_EQ(plan_seed(plan, "recipe", 2), derive_seed(3, "recipe", 2));
}

TEST(RunPlan, StageCountsAndZeroRecomputation) {
  const auto dir = testing::scratch_dir("plan_counts");
  RunOptions opts;
  opts.output = dir;
  const auto first = run_plan(parse_plan(tiny_plan()), opts);
  EXPECT_EQ(first.computed("pretrain"), 1);
  EXPECT_EQ(first.computed("split"), 1);
  EXPECT_EQ(first.computed("run"), 1);
  EXPECT_EQ(first.computed("report"), 1);
  EXPECT_EQ(first.computed("retrain"), 0);
  EXPECT_EQ(first.computed("table"), 0);
  EXPECT_TRUE(verify_index(dir).empty());
  for (const char* f : {"metrics.csv", "timings.csv", "plan.json", "reports/ga.json", "runs/ga/trajectory.csv"}) {
    EXPECT_TRUE(std::filesystem::exists(dir / f)) << f;
  }
  const auto metrics = slurp(dir / "metrics.csv");

  const auto second = run_plan(parse_plan(tiny_plan()), opts);
  EXPECT_EQ(second.computed(), 0);
  EXPECT_EQ(slurp(dir / "metrics.csv"), metrics);
  EXPECT_EQ(json::parse(slurp(dir / "reports/ga.json")).at("reference_kind"), "original");
}

TEST(RunPlan, TamperedOutputIsRecomputed) {
  const auto dir = testing::scratch_dir("plan_tamper");
  RunOptions opts;
  opts.output = dir;
  run_plan(parse_plan(tiny_plan()), opts);
  std::ofstream(dir / "splits" / "r.json", std::ios::app) << " ";
  EXPECT_FALSE(verify_index(dir).empty());
  const auto again = run_plan(parse_plan(tiny_plan()), opts);
  EXPECT_EQ(again.computed("split"), 1);
  EXPECT_EQ(again.computed("pretrain"), 0);
  EXPECT_TRUE(verify_index(dir).empty());
}

TEST(RunPlan, IdenticalPlansGiveIdenticalMetrics) {
  const auto a = testing::scratch_dir("plan_same_a");
  const auto b = testing::scratch_dir("plan_same_b");
  RunOptions oa, ob;
  oa.output = a;
  ob.output = b;
  run_plan(parse_plan(tiny_plan()), oa);
  run_plan(parse_plan(tiny_plan()), ob);
  EXPECT_EQ(slurp(a / "metrics.csv"), slurp(b / "metrics.csv"));
}

TEST(RunPlan, SeedChangesDigests) {
  const auto a = testing::scratch_dir("plan_seed_a");
  const auto b = testing::scratch_dir("plan_seed_b");
  RunOptions oa, ob;
  oa.output = a;
  ob.output = b;
  ob.seed = 4;
  run_plan(parse_plan(tiny_plan()), oa);
  run_plan(parse_plan(tiny_plan()), ob);
  const auto ra = json::parse(slurp(a / "reports/ga.json"));
  const auto rb = json::parse(slurp(b / "reports/ga.json"));
  EXPECT_NE(ra["provenance"]["model_digest"], rb["provenance"]["model_digest"]);
  EXPECT_NE(ra["provenance"]["split_digest"], rb["provenance"]["split_digest"]);
  EXPECT_NE(sha256_file(a / "models/original.bin"), sha256_file(b / "models/original.bin"));
}

TEST(RunPlan, UnfinishedStateNeedsResume) {
  const auto dir = testing::scratch_dir("plan_resume");
  RunOptions opts;
  opts.output = dir;
  run_plan(parse_plan(tiny_plan()), opts);
  auto state = json::parse(slurp(dir / "state.json"));
  state["status"] = "running";
  std::ofstream(dir / "state.json") << state.dump();
  EXPECT_ERROR_CODE(run_plan(parse_plan(tiny_plan()), opts), ErrorCode::Precondition);
  opts.resume = true;
  EXPECT_EQ(run_plan(parse_plan(tiny_plan()), opts).computed(), 0);
}

TEST(RunPlan, AddingARecipeOnlyRunsTheNewRecipe) {
  const auto dir = testing::scratch_dir("plan_extend");
  RunOptions opts;
  opts.output = dir;
  run_plan(parse_plan(tiny_plan()), opts);
  auto p = tiny_plan();
  p["recipes"].push_back({{"name", "gar"}, {"split", "r"}, {"method", "GAR"}, {"epochs", 1}, {"batch_size", 10}});
  const auto r = run_plan(parse_plan(p), opts);
  EXPECT_EQ(r.computed("run"), 1);
  EXPECT_EQ(r.computed("pretrain"), 0);
  EXPECT_EQ(r.computed("split"), 0);
}

TEST(RunPlan, PerSplitRetrainOverride) {
  const auto dir = testing::scratch_dir("plan_split_retrain");
  RunOptions opts;
  opts.output = dir;
  auto p = tiny_plan();
  p["retrain"] = true;
  p["splits"].push_back({{"name", "c"}, {"mode", "classwise"}, {"class_id", 1}, {"retrain", false}});
  p["recipes"].push_back({{"name", "ga-c"}, {"split", "c"}, {"method", "GA"}, {"epochs", 1}, {"batch_size", 10}});
  ASSERT_TRUE(validate_plan(p).empty());
  const auto r = run_plan(parse_plan(p), opts);
  EXPECT_EQ(r.computed("retrain"), 1);
  EXPECT_EQ(json::parse(slurp(dir / "reports/ga.json")).at("reference_kind"), "retrain");
  EXPECT_EQ(json::parse(slurp(dir / "reports/ga-c.json")).at("reference_kind"), "original");

  p["splits"][1]["retrain"] = "no";
  EXPECT_TRUE(has_field(validate_plan(p), "splits[1].retrain"));
}

}  // namespace
}  // namespace unlearn
