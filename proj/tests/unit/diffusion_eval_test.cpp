#include <cmath>
#include <numeric>

#include "support.hpp"
#include "unlearn/diffusion_eval.hpp"
#include "unlearn/stats.hpp"
#include "unlearn/weighting.hpp"

namespace unlearn {
namespace {

UNetSpec tiny_unet() {
  UNetSpec s;
  s.image_size = 8;
  s.base_channels = 8;
  s.time_dim = 16;
  return s;
}

// Plain loop over (example, t) pairs, one forward pass each.
double looped_loss(DiffusionCheckpoint& model, const Dataset& data, std::int64_t index, int t, std::uint64_t seed) {
  torch::NoGradGuard g;
  model.net->eval();
  const auto ex = data.example(index);
  const auto x0 = to_model_space(ex.features).unsqueeze(0);
  const auto noise = example_noise(seed, index, t, data.example_shape()).unsqueeze(0);
  const auto x_t = std::sqrt(model.schedule.alpha_bar(t)) * x0 + std::sqrt(1 - model.schedule.alpha_bar(t)) * noise;
  const auto eps = model.net->forward(x_t, torch::tensor({t}, torch::kInt64), torch::tensor({ex.label}, torch::kInt64));
  return (noise - eps).pow(2).sum().item<double>();
}

TEST(ExhaustiveTable, TwoExamplesThreeStepsMatchHandLoop) {
  const auto data = make_synthetic_shapes(6, 2, 0, 8);
  auto model = initialize_diffusion(tiny_unet(), 3, 4);
  const DataView forget(data.train, {1, 4});
  const auto table = build_reference_table_exhaustive(model, forget, 77);
  ASSERT_EQ(table.mean_loss.size(), 3u);
  EXPECT_EQ(table.evaluations, 6);
  EXPECT_EQ(table.source, TableSource::Exhaustive);
  for (int t = 1; t <= 3; ++t) {
    const double expect = 0.5 * (looped_loss(model, data.train, 1, t, 77) + looped_loss(model, data.train, 4, t, 77));
    EXPECT_NEAR(table.m(t), expect, 1e-6 * std::max(1.0, expect)) << t;
  }
}

TEST(ExhaustiveTable, PerfectPredictorIsDegenerate) {
  const auto data = testing::flat_images(4);
  auto model = testing::wrap_epsilon(std::make_shared<testing::EchoEpsilon>(NoiseSchedule::linear(5)), 5);
  EXPECT_ERROR_CODE(build_reference_table_exhaustive(model, DataView(data.train, {0, 1}), 1),
                    ErrorCode::DegenerateTable);
}

TEST(ExhaustiveTable, SeedDeterminesTable) {
  const auto data = make_synthetic_shapes(6, 2, 0, 8);
  auto model = initialize_diffusion(tiny_unet(), 4, 4);
  const DataView forget(data.train, {0, 2, 3});
  const auto a = build_reference_table_exhaustive(model, forget, 1);
  EXPECT_EQ(a.mean_loss, build_reference_table_exhaustive(model, forget, 1).mean_loss);
  EXPECT_NE(a.mean_loss, build_reference_table_exhaustive(model, forget, 2).mean_loss);
}

TEST(ExponentialFit, RecoversSyntheticCurve) {
  Rng rng(10);
  std::vector<double> ts, ys;
  for (int t : timestep_grid(1000, 60)) {
    const double clean = 2.0 * std::exp(-0.01 * t) + 0.1;
    ts.push_back(t);
    ys.push_back(clean * (1.0 + 0.01 * rng.normal()));
  }
  const auto fit = fit_exponential(ts, ys);
  EXPECT_TRUE(fit.converged);
  EXPECT_NEAR(fit.a, 2.0, 0.2);
  EXPECT_NEAR(fit.b, -0.01, 0.001);
  EXPECT_NEAR(fit.c, 0.1, 0.01);
  EXPECT_LT(fit.relative_rms, 0.05);
}

// Property: noiseless curves with random parameters are recovered closely.
TEST(ExponentialFit, RandomNoiselessCurves) {
  Rng gen(4);
  for (int trial = 0; trial < 30; ++trial) {
    const double a = 0.5 + 3.0 * gen.uniform01();
    const double b = -(0.002 + 0.03 * gen.uniform01());
    const double c = 0.05 + gen.uniform01();
    std::vector<double> ts, ys;
    for (int t : timestep_grid(500, 25)) {
      ts.push_back(t);
      ys.push_back(a * std::exp(b * t) + c);
    }
    const auto fit = fit_exponential(ts, ys);
    for (std::size_t i = 0; i < ts.size(); ++i) EXPECT_NEAR(fit(ts[i]), ys[i], 1e-3 * ys[i]);
  }
}

TEST(TableFromSamples, FallsBackToInterpolation) {
  const std::vector<int> ts{1, 10};
  const std::vector<double> ms{4.0, 2.0};
  const auto table = table_from_samples(10, ts, ms);
  EXPECT_TRUE(table.piecewise_fallback);
  EXPECT_FALSE(table.fit.has_value());
  EXPECT_DOUBLE_EQ(table.m(1), 4.0);
  EXPECT_NEAR(table.m(4), 4.0 - 2.0 * 3.0 / 9.0, 1e-12);
  EXPECT_DOUBLE_EQ(table.m(10), 2.0);

  // zig-zag data has no exponential shape
  const std::vector<int> zt{1, 3, 5, 7, 9};
  const std::vector<double> zm{1.0, 9.0, 1.0, 9.0, 1.0};
  EXPECT_TRUE(table_from_samples(9, zt, zm).piecewise_fallback);
}

TEST(TimestepGrid, EvenlySpacedWithEndpoints) {
  EXPECT_EQ(timestep_grid(10, 10), (std::vector<int>{1, 2, 3, 4, 5, 6, 7, 8, 9, 10}));
  EXPECT_EQ(timestep_grid(1000, 2), (std::vector<int>{1, 1000}));
  const auto g = timestep_grid(1000, 10);
  EXPECT_EQ(g.front(), 1);
  EXPECT_EQ(g.back(), 1000);
  EXPECT_TRUE(std::is_sorted(g.begin(), g.end()));
  EXPECT_ERROR_CODE(timestep_grid(10, 11), ErrorCode::InvalidArgument);
}

TEST(FittedTable, EvaluationCountIsExamplesTimesTimesteps) {
  const auto data = make_synthetic_shapes(60, 2, 1, 8);
  auto model = initialize_diffusion(tiny_unet(), 40, 2);
  const DataView forget(data.train, data.train.indices());
  const auto table = fit_reference_table(model, forget, 50, 10, 3);
  EXPECT_EQ(table.evaluations, 500);
  EXPECT_EQ(table.num_examples, 50);
  EXPECT_EQ(table.num_timesteps, 10);
  EXPECT_EQ(table.source, TableSource::Fitted);
  EXPECT_EQ(table.mean_loss.size(), 40u);
  for (int t = 1; t <= 40; ++t) EXPECT_GT(table.m(t), 0.0);
  EXPECT_ERROR_CODE(fit_reference_table(model, forget, 61, 10, 3), ErrorCode::InvalidArgument);
}

TEST(FittedTable, FullSampleMeansEqualExhaustiveTable) {
  const auto data = make_synthetic_shapes(8, 2, 1, 8);
  auto model = initialize_diffusion(tiny_unet(), 6, 2);
  const DataView forget(data.train, data.train.indices());
  const auto noise_seed = derive_seed(5, "table/noise");
  const auto exhaustive = build_reference_table_exhaustive(model, forget, noise_seed);
  const auto grid = timestep_grid(6, 6);
  const auto matrix = timestep_loss_matrix(model, forget, grid, noise_seed);
  for (std::size_t k = 0; k < grid.size(); ++k) {
    double mean = 0;
    for (const auto& row : matrix) mean += row[k] / static_cast<double>(matrix.size());
    EXPECT_DOUBLE_EQ(mean, exhaustive.m(grid[k]));
  }
}

TEST(TimestepTable, CsvRoundTrip) {
  std::vector<double> ts, ys;
  for (int t : timestep_grid(100, 8)) {
    ts.push_back(t);
    ys.push_back(3.0 * std::exp(-0.02 * t) + 0.5);
  }
  const std::vector<int> its(ts.begin(), ts.end());
  auto table = table_from_samples(100, its, ys);
  table.model_digest = "m";
  table.seed = 12;
  const auto dir = testing::scratch_dir("table_csv");
  table.save_csv(dir / "t.csv");
  const auto back = TimestepLossTable::load_csv(dir / "t.csv");
  EXPECT_EQ(back.T, 100);
  EXPECT_EQ(back.source, TableSource::Fitted);
  ASSERT_TRUE(back.fit.has_value());
  EXPECT_DOUBLE_EQ(back.fit->b, table.fit->b);
  EXPECT_EQ(back.mean_loss, table.mean_loss);
  EXPECT_EQ(back.model_digest, "m");
  EXPECT_EQ(back.seed, 12u);
}

TimestepLossTable table_of(std::vector<double> m) {
  TimestepLossTable t;
  t.T = static_cast<int>(m.size());
  t.mean_loss = std::move(m);
  return t;
}

TEST(TimestepSampler, Examples) {
  const TimestepSampler flat(table_of(std::vector<double>(7, 2.5)));
  for (int t = 1; t <= 7; ++t) EXPECT_NEAR(flat.probability(t), 1.0 / 7, 1e-12);
  const TimestepSampler two(table_of({1.0, 3.0}));
  EXPECT_NEAR(two.probability(1), 0.75, 1e-12);
  EXPECT_NEAR(two.probability(2), 0.25, 1e-12);
}

TEST(TimestepSampler, FrequenciesMatchInverseLoss) {
  const auto table = table_of({0.5, 1.0, 2.0, 4.0, 0.8, 3.0, 10.0, 0.3});
  const TimestepSampler sampler(table);
  Rng rng(6);
  std::vector<double> counts(8, 0.0);
  for (int i = 0; i < 100000; ++i) {
    const int t = sampler.sample(rng);
    ASSERT_GE(t, 1);
    ASSERT_LE(t, 8);
    counts[static_cast<std::size_t>(t - 1)] += 1;
  }
  std::vector<double> p;
  for (int t = 1; t <= 8; ++t) p.push_back(sampler.probability(t));
  EXPECT_GT(chi_square_p_value(counts, p), 0.01);
}

TEST(TimestepSampler, FloorGuardsZeroEntries) {
  const TimestepSampler s(table_of({0.0, 1.0}));
  EXPECT_GT(s.probability(1), 0.999);
  EXPECT_NEAR(rescale_loss(2.0, table_of({0.0, 1.0}), 1), 2.0 / kTableFloor, 1e-3);
}

TEST(Rescale, TrackingReferenceGivesOnesAndScalesLinearly) {
  Rng gen(1);
  std::vector<double> m(50);
  for (auto& v : m) v = 0.01 + 5.0 * gen.uniform01();
  const auto table = table_of(m);
  std::vector<std::int64_t> ts;
  std::vector<double> losses;
  for (int i = 0; i < 200; ++i) {
    const int t = 1 + static_cast<int>(gen.uniform_index(50));
    ts.push_back(t);
    losses.push_back(table.m(t));
  }
  const auto r = testing::to_vector(rescale_losses(torch::tensor(losses, torch::kFloat64), table, torch::tensor(ts)));
  std::vector<double> doubled;
  for (double v : losses) doubled.push_back(2 * v);
  const auto r2 = testing::to_vector(rescale_losses(torch::tensor(doubled, torch::kFloat64), table, torch::tensor(ts)));
  for (std::size_t i = 0; i < r.size(); ++i) {
    EXPECT_NEAR(r[i], 1.0, 1e-9);
    EXPECT_NEAR(r2[i], 2.0, 1e-9);
  }
  EXPECT_LT(sample_variance(r), 1e-18);
}

TEST(Rescale, OriginalModelEstimatesAverageToOne) {
  const auto data = make_synthetic_shapes(40, 2, 2, 8);
  auto model = initialize_diffusion(tiny_unet(), 20, 6);
  const DataView forget(data.train, data.train.indices());
  const auto table = build_reference_table_exhaustive(model, forget, 3);
  Rng rng(9);
  auto gen = make_torch_generator(9);
  std::vector<double> estimates;
  const auto x_all = to_model_space(forget.features());
  const auto y_all = forget.labels();
  torch::NoGradGuard g;
  for (int chunk = 0; chunk < 10; ++chunk) {
    std::vector<std::int64_t> rows, ts;
    for (int i = 0; i < 100; ++i) {
      rows.push_back(static_cast<std::int64_t>(rng.uniform_index(40)));
      ts.push_back(1 + static_cast<std::int64_t>(rng.uniform_index(20)));
    }
    const auto r = torch::tensor(rows);
    const auto x0 = x_all.index_select(0, r);
    const auto est = estimated_eval_loss(model, x0, y_all.index_select(0, r), torch::tensor(ts),
                                         torch::randn(x0.sizes(), gen), table);
    for (double v : testing::to_vector(est)) estimates.push_back(v);
  }
  const double se = std::sqrt(sample_variance(estimates) / static_cast<double>(estimates.size()));
  EXPECT_NEAR(mean(estimates), 1.0, 3 * se);
}

TEST(StaticEval, MatchesLoopOverAllTimesteps) {
  const auto data = make_synthetic_shapes(5, 2, 3, 8);
  auto model = initialize_diffusion(tiny_unet(), 10, 1);
  const DataView view(data.train, data.train.indices());
  StaticEvalOptions opts;
  opts.noise_seed = 4;
  const auto losses = static_eval_losses(model, view, opts);
  for (std::int64_t i = 0; i < 5; ++i) {
    double expect = 0;
    for (int t = 1; t <= 10; ++t) expect += looped_loss(model, data.train, i, t, 4) / 10.0;
    EXPECT_NEAR(losses[static_cast<std::size_t>(i)], expect, 1e-6 * std::max(1.0, expect));
    EXPECT_NEAR(static_eval_loss(model, data.train, i, opts), losses[static_cast<std::size_t>(i)], 1e-6 * expect);
  }
  opts.max_timesteps = 10;
  EXPECT_EQ(static_eval_losses(model, view, opts), losses);
}

TEST(StaticEval, SingleStepChainIsOneNoiseLoss) {
  const auto data = make_synthetic_shapes(3, 2, 3, 8);
  auto model = initialize_diffusion(tiny_unet(), 1, 1);
  StaticEvalOptions opts;
  opts.noise_seed = 8;
  EXPECT_NEAR(static_eval_loss(model, data.train, 2, opts), looped_loss(model, data.train, 2, 1, 8), 1e-5);
}

TEST(StaticEval, WeightTableUsesStaticLosses) {
  const auto data = make_synthetic_shapes(6, 2, 3, 8);
  auto model = initialize_diffusion(tiny_unet(), 8, 1);
  const DataView forget(data.train, {0, 3, 5});
  StaticEvalOptions opts;
  opts.noise_seed = 2;
  opts.max_timesteps = 4;
  const auto table = build_static_table(model, forget, 5.0, opts);
  const auto losses = static_eval_losses(model, forget, opts);
  for (std::size_t k = 0; k < 3; ++k) {
    EXPECT_DOUBLE_EQ(table.at(forget.indices()[k]).reference_loss, losses[k]);
  }
}

}  // namespace
}  // namespace unlearn
