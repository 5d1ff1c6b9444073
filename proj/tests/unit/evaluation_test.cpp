#include <algorithm>
#include <cmath>
#include <fstream>

#include "support.hpp"
#include "unlearn/engine.hpp"
#include "unlearn/evaluation.hpp"

namespace unlearn {
namespace {

TEST(Accuracy, MatchesLoopOnHundredExamples) {
  const auto data = make_synthetic_cifar(100, 10, 2, 16);
  ArchitectureSpec arch;
  arch.image_size = 16;
  arch.width = 4;
  auto model = initialize_classifier(arch, 7);
  model.net->eval();
  const DataView view(data.train, data.train.indices());
  int correct = 0;
  {
    torch::NoGradGuard g;
    for (std::int64_t i = 0; i < 100; ++i) {
      const auto ex = data.train.example(i);
      correct += model.net->forward(ex.features.unsqueeze(0)).argmax(1).item<std::int64_t>() == ex.label;
    }
  }
  EXPECT_DOUBLE_EQ(accuracy(*model.net, view), correct);
  testing::LookupNet lookup(10);
  EXPECT_DOUBLE_EQ(accuracy(lookup, DataView(testing::labeled_toy(50, 1).train, testing::labeled_toy(50, 1).train.indices())),
                   100.0);
  EXPECT_ERROR_CODE(accuracy(lookup, DataView(data.train, {})), ErrorCode::InvalidArgument);
}

TEST(Tow, PublishedRows) {
  const double gar = tow_from_gaps(0.14, 0.25, 0.50);
  EXPECT_GE(gar, 99.11);
  EXPECT_LE(gar, 99.13);
  EXPECT_EQ(tow_from_gaps(0, 0, 0), 100.0);
  EXPECT_NEAR(avg_gap({0.14, 0.25, 0.50, 4.29}), 1.295, 1e-12);
}

// Property: tow is symmetric in the sign of each gap and never exceeds 100.
TEST(Tow, RandomTriples) {
  Rng gen(2);
  for (int i = 0; i < 200; ++i) {
    AccuracyTriple a{100 * gen.uniform01(), 100 * gen.uniform01(), 100 * gen.uniform01()};
    AccuracyTriple b{100 * gen.uniform01(), 100 * gen.uniform01(), 100 * gen.uniform01()};
    const double t = tow(a, b);
    EXPECT_NEAR(t, tow(b, a), 1e-12);
    EXPECT_NEAR(t, tow_from_gaps(a.ua - b.ua, a.ra - b.ra, a.ta - b.ta), 1e-12);
    EXPECT_LE(t, 100.0);
    EXPECT_GE(t, 0.0);
    EXPECT_EQ(tow(a, a), 100.0);
  }
}

std::vector<double> normal_sample(Rng& rng, int n, double mu) {
  std::vector<double> v(static_cast<std::size_t>(n));
  for (auto& x : v) x = mu + rng.normal();
  return v;
}

TEST(Mia, ShiftedGaussiansGiveKnownScore) {
  Rng rng(1);
  const auto member = normal_sample(rng, 20000, 0.0);
  const auto non_member = normal_sample(rng, 20000, 1.0);
  const auto forget = normal_sample(rng, 20000, 1.0);
  const auto r = mia_from_losses(member, non_member, forget);
  EXPECT_FALSE(r.degenerate);
  EXPECT_NEAR(r.threshold, 0.5, 0.1);
  EXPECT_NEAR(r.balanced_accuracy, 0.6915, 0.01);
  EXPECT_NEAR(r.score, 69.15, 1.0);
}

TEST(Mia, ForgetLikeTestGivesTestNonMemberRate) {
  Rng rng(2);
  const auto member = normal_sample(rng, 2000, 0.0);
  const auto non_member = normal_sample(rng, 2000, 0.7);
  const auto r = mia_from_losses(member, non_member, non_member);
  double above = 0;
  for (double v : non_member) above += v > r.threshold;
  EXPECT_DOUBLE_EQ(r.score, 100.0 * above / 2000.0);
}

TEST(Mia, IdenticalDistributionsAreDegenerate) {
  const std::vector<double> same{0.1, 0.2, 0.3, 0.4};
  const auto r = mia_from_losses(same, same, {0.5, 0.05});
  EXPECT_TRUE(r.degenerate);
  EXPECT_EQ(r.score, 50.0);
}

// Property: any strictly increasing transform of all losses leaves the score unchanged.
TEST(Mia, InvariantUnderMonotoneTransforms) {
  Rng rng(3);
  for (int trial = 0; trial < 20; ++trial) {
    const auto member = normal_sample(rng, 300, 0.0);
    const auto non_member = normal_sample(rng, 300, 0.5 + rng.uniform01());
    const auto forget = normal_sample(rng, 200, rng.uniform01());
    const auto base = mia_from_losses(member, non_member, forget);
    auto map = [](std::vector<double> v, double s) {
      for (auto& x : v) x = std::exp(s * x) + 3.0;
      return v;
    };
    const double s = 0.2 + rng.uniform01();
    const auto moved = mia_from_losses(map(member, s), map(non_member, s), map(forget, s));
    EXPECT_DOUBLE_EQ(moved.score, base.score);
    EXPECT_DOUBLE_EQ(moved.balanced_accuracy, base.balanced_accuracy);
  }
}

TEST(Mia, ModelScoreUsesLosses) {
  const auto data = testing::labeled_toy(40, 20);
  testing::LookupNet net(10);
  const DataView retain(data.train, {0, 1, 2, 3, 4, 5, 6, 7, 8, 9});
  const DataView test(data.test, data.test.indices());
  const DataView forget(data.train, {10, 11});
  // every loss is identical, so the attacker has nothing to go on
  const auto r = mia_score(net, retain, test, forget);
  EXPECT_TRUE(r.degenerate);
}

TEST(GenerationUa, CopyingSamplerGivesRecall) {
  const auto data = testing::labeled_toy(100, 1, 10, 4);
  testing::LookupNet external(10);
  auto class_images = [&](int c) {
    std::vector<std::int64_t> idx;
    for (std::int64_t i = c; i < 100; i += 10) idx.push_back(i);
    return DataView(data.train, idx).features();
  };
  ImageSampler copy3 = [&](int count, std::uint64_t) { return class_images(3).slice(0, 0, count); };
  EXPECT_DOUBLE_EQ(generation_ua(copy3, 3, external, 10, 0), 100.0);
  EXPECT_DOUBLE_EQ(generation_ua(copy3, 4, external, 10, 0), 0.0);
  // half the images come from class 5
  ImageSampler mixed = [&](int count, std::uint64_t) {
    return torch::cat({class_images(3).slice(0, 0, count / 2), class_images(5).slice(0, 0, count - count / 2)});
  };
  EXPECT_DOUBLE_EQ(generation_ua(mixed, 3, external, 10, 0), 50.0);
  EXPECT_ERROR_CODE(generation_ua(copy3, 3, external, 0, 0), ErrorCode::InvalidArgument);
}

TEST(Rte, FinalCumulativeMinutes) {
  UnlearnRun run;
  run.trajectory = {{1, 0, 0, 0, 40.0}, {2, 0, 0, 0, 120.0}};
  EXPECT_DOUBLE_EQ(rte(run), 2.0);
  EXPECT_DOUBLE_EQ(rte(UnlearnRun{}), 0.0);
}

TEST(Difficulty, ScatterMarksMisclassifiedAsForgotten) {
  const auto data = testing::labeled_toy(20, 2);
  testing::LookupNet original(10, 5.0);
  testing::ConstantNet unlearned(torch::one_hot(torch::tensor(4), 10).to(torch::kFloat32));
  const DataView forget(data.train, {3, 4, 14, 15});
  const auto records = difficulty_scatter(original, unlearned, forget);
  ASSERT_EQ(records.size(), 4u);
  for (const auto& r : records) {
    EXPECT_EQ(r.forgotten, data.train.example(r.index).label != 4) << r.index;
    EXPECT_NEAR(r.loss_on_original, std::log(1 + 9 * std::exp(-5.0)), 1e-5);
  }
  const auto dir = testing::scratch_dir("difficulty");
  write_difficulty_csv(records, dir / "d.csv");
  std::ifstream in(dir / "d.csv");
  std::string header;
  std::getline(in, header);
  EXPECT_EQ(header, "index,loss,forgotten");
}

TEST(Report, GapsAndSerialization) {
  ModelMetrics u{90.0, 99.0, 93.0, 20.0, false};
  ModelMetrics r{94.0, 100.0, 94.0, 10.0, false};
  const auto rep = make_report(u, r, 1.5);
  EXPECT_DOUBLE_EQ(rep.gaps[0], 4.0);
  EXPECT_DOUBLE_EQ(rep.gaps[3], 10.0);
  EXPECT_NEAR(rep.avg_gap, (4 + 1 + 1 + 10) / 4.0, 1e-12);
  EXPECT_NEAR(rep.tow, 100 * 0.96 * 0.99 * 0.99, 1e-9);
  const auto back = nlohmann::json(rep).get<EvalReport>();
  EXPECT_EQ(back.tow, rep.tow);
  EXPECT_EQ(back.metrics.mia, 20.0);
  auto count = [](const std::string& s) { return std::count(s.begin(), s.end(), ','); };
  EXPECT_EQ(count(eval_csv_header()), count(eval_csv_row(rep)));
  EXPECT_EQ(eval_csv_header().find("rte"), std::string::npos);
}

}  // namespace
}  // namespace unlearn
