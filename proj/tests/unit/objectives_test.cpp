#include <algorithm>
#include <cmath>
#include <numeric>

#include "support.hpp"
#include "unlearn/checkpoint.hpp"
#include "unlearn/objectives.hpp"
#include "unlearn/stats.hpp"

namespace unlearn {
namespace {

// Double precision linear classifier for gradient checks.
struct LinearNet : ClassifierNet {
  LinearNet(int in, int classes) {
    fc = register_module("fc", torch::nn::Linear(in, classes));
    to(torch::kFloat64);
  }
  torch::Tensor forward(torch::Tensor x) override { return fc->forward(x.flatten(1)); }
  torch::nn::Linear fc{nullptr};
};

TEST(WrongLabels, TwoClassesGiveTheOtherClass) {
  Rng rng(1);
  const auto y = torch::tensor({0, 1, 1, 0}, torch::kInt64);
  EXPECT_TRUE(torch::equal(draw_wrong_labels(y, 2, rng), torch::tensor({1, 0, 0, 1}, torch::kInt64)));
  EXPECT_EQ(wrong_label_for(1, 2, 9, 4), 0);
}

TEST(WrongLabels, SingleClassIsInvalidTask) {
  Rng rng(1);
  EXPECT_ERROR_CODE(draw_wrong_labels(torch::zeros({2}, torch::kInt64), 1, rng), ErrorCode::InvalidTask);
  EXPECT_ERROR_CODE(wrong_label_for(0, 1, 0, 0), ErrorCode::InvalidTask);
}

TEST(WrongLabels, UniformOverWrongClasses) {
  Rng rng(5);
  std::vector<double> counts(10, 0.0);
  const auto y = torch::full({100}, 3, torch::kInt64);
  for (int i = 0; i < 100; ++i) {
    const auto yp = draw_wrong_labels(y, 10, rng);
    for (auto v : testing::to_vector(yp)) counts[static_cast<std::size_t>(v)] += 1;
  }
  EXPECT_EQ(counts[3], 0.0);
  counts.erase(counts.begin() + 3);
  EXPECT_GT(chi_square_p_value(counts, std::vector<double>(9, 1.0 / 9)), 0.01);

  std::vector<double> per_index(10, 0.0);
  for (std::int64_t i = 0; i < 10000; ++i) per_index[static_cast<std::size_t>(wrong_label_for(7, 10, 4, i))] += 1;
  EXPECT_EQ(per_index[7], 0.0);
  per_index.erase(per_index.begin() + 7);
  EXPECT_GT(chi_square_p_value(per_index, std::vector<double>(9, 1.0 / 9)), 0.01);
  EXPECT_EQ(wrong_label_for(7, 10, 4, 12), wrong_label_for(7, 10, 4, 12));
}

TEST(RlForgetLoss, ConfidentWrongLabelGivesNearZero) {
  // C = 2, so y' is fixed and the model already predicts it
  testing::ConstantNet net(torch::tensor({-30.0f, 30.0f}));
  Rng rng(0);
  const auto loss = rl_forget_loss(net, torch::zeros({3, 1, 2, 2}), torch::zeros({3}, torch::kInt64), 2, rng);
  EXPECT_LT(loss.max().item<double>(), 1e-6);
}

TEST(GarForgetLoss, UniformLogitsGiveMinusLogC) {
  testing::ConstantNet net(torch::zeros({10}));
  const auto loss = gar_forget_loss(net, torch::zeros({2, 1, 2, 2}), torch::tensor({1, 4}, torch::kInt64));
  for (double v : testing::to_vector(loss)) EXPECT_NEAR(v, -2.302585, 1e-6);
}

TEST(GarForgetLoss, GradientIsNegatedCeGradientByCentralDifferences) {
  torch::manual_seed(0);
  LinearNet net(6, 4);
  const auto x = torch::randn({5, 6}, torch::kFloat64);
  const auto y = torch::tensor({0, 3, 1, 1, 2}, torch::kInt64);
  net.zero_grad();
  gar_forget_loss(net, x, y).sum().backward();
  const auto grad = net.fc->weight.grad().clone();

  auto ce_sum = [&] { return per_sample_ce(net, x, y).sum().item<double>(); };
  const double h = 1e-5;
  torch::NoGradGuard g;
  auto w = net.fc->weight;
  for (std::int64_t r = 0; r < w.size(0); ++r) {
    for (std::int64_t c = 0; c < w.size(1); ++c) {
      const double orig = w[r][c].item<double>();
      w[r][c] = orig + h;
      const double up = ce_sum();
      w[r][c] = orig - h;
      const double down = ce_sum();
      w[r][c] = orig;
      const double fd = -(up - down) / (2 * h);
      const double analytic = grad[r][c].item<double>();
      EXPECT_LT(std::abs(fd - analytic), 1e-4 * std::max(1e-3, std::abs(analytic))) << r << "," << c;
    }
  }
}

TEST(RetainLoss, TaskMismatchIsInvalid) {
  testing::ConstantNet net(torch::zeros({10}));
  EXPECT_ERROR_CODE(retain_loss(net, torch::zeros({1, 1, 2, 2}), torch::zeros({1}, torch::kInt64), Task::Diffusion),
                    ErrorCode::InvalidArgument);
  auto model = testing::wrap_epsilon(std::make_shared<testing::ZeroEpsilon>(), 5);
  const auto x = torch::zeros({1, 1, 4, 4});
  EXPECT_ERROR_CODE(retain_loss(model, x, torch::zeros({1}, torch::kInt64), torch::ones({1}, torch::kInt64), x,
                                Task::Classifier),
                    ErrorCode::InvalidArgument);
  const auto ce = retain_loss(net, torch::zeros({2, 1, 2, 2}), torch::zeros({2}, torch::kInt64), Task::Classifier);
  EXPECT_NEAR(ce[0].item<double>(), std::log(10.0), 1e-6);
}

TEST(DmForget, ConditionBlindModelGivesZero) {
  auto model = testing::wrap_epsilon(std::make_shared<testing::Unconditional>(), 20);
  auto gen = make_torch_generator(1);
  const auto x0 = torch::randn({4, 1, 4, 4}, gen);
  const auto noise = torch::randn({4, 1, 4, 4}, gen);
  const auto t = torch::tensor({1, 5, 10, 20}, torch::kInt64);
  const auto terms = dm_forget_terms(model, x0, torch::tensor({0, 1, 2, 3}, torch::kInt64),
                                     torch::tensor({1, 2, 3, 4}, torch::kInt64), t, noise);
  EXPECT_LT(terms.forget.abs().max().item<double>(), 1e-12);
  EXPECT_TRUE(torch::allclose(terms.noise_loss,
                              diffusion_noise_loss(model, x0, torch::zeros({4}, torch::kInt64), t, noise), 1e-6));
}

TEST(DmForget, SameLabelIsInvalid) {
  auto model = testing::wrap_epsilon(std::make_shared<testing::ZeroEpsilon>(), 5);
  const auto x = torch::zeros({2, 1, 4, 4});
  EXPECT_ERROR_CODE(dm_forget_terms(model, x, torch::tensor({1, 2}, torch::kInt64), torch::tensor({3, 2}, torch::kInt64),
                                    torch::ones({2}, torch::kInt64), x),
                    ErrorCode::InvalidArgument);
}

UNetSpec tiny_unet() {
  UNetSpec s;
  s.image_size = 8;
  s.base_channels = 8;
  s.time_dim = 16;
  return s;
}

TEST(DmForget, MatchesCapturedPredictionsAndStopsGradientOnTarget) {
  auto model = initialize_diffusion(tiny_unet(), 20, 3);
  model.net->eval();
  auto gen = make_torch_generator(2);
  const auto x0 = torch::randn({3, 1, 8, 8}, gen);
  const auto noise = torch::randn({3, 1, 8, 8}, gen);
  const auto t = torch::tensor({2, 9, 17}, torch::kInt64);
  const auto y = torch::tensor({0, 5, 9}, torch::kInt64);
  const auto yp = torch::tensor({4, 1, 2}, torch::kInt64);

  model.net->zero_grad();
  const auto terms = dm_forget_terms(model, x0, y, yp, t, noise);
  terms.forget.sum().backward();
  std::vector<torch::Tensor> grads;
  for (auto& p : model.net->parameters()) grads.push_back(p.grad().defined() ? p.grad().clone() : torch::zeros_like(p));

  const auto x_t = forward_noise(model.schedule, x0, t, noise);
  torch::Tensor target;
  {
    torch::NoGradGuard g;
    target = model.net->forward(x_t, t, yp);
  }
  model.net->zero_grad();
  const auto pred = model.net->forward(x_t, t, y);
  const auto manual = (target - pred).pow(2).sum({1, 2, 3});
  EXPECT_TRUE(torch::allclose(terms.forget, manual, 1e-6, 1e-6));
  manual.sum().backward();
  const auto params = model.net->parameters();
  for (std::size_t i = 0; i < params.size(); ++i) {
    const auto g = params[i].grad().defined() ? params[i].grad() : torch::zeros_like(params[i]);
    EXPECT_TRUE(torch::allclose(grads[i], g, 1e-4, 1e-6)) << i;
  }
  EXPECT_TRUE(torch::allclose(terms.noise_loss, squared_error_per_example(noise, pred.detach()), 1e-6, 1e-6));
  EXPECT_FALSE(terms.noise_loss.requires_grad());
}

TEST(CombinedObjective, Examples) {
  const auto forget = torch::tensor({3.0, 100.0}, torch::kFloat64);
  const auto retain = torch::tensor({2.0, 2.0}, torch::kFloat64);
  EXPECT_DOUBLE_EQ(combined_objective(forget, torch::tensor({1.0, 0.0}, torch::kFloat64), retain, 1.0).item<double>(),
                   5.0);
  EXPECT_DOUBLE_EQ(
      combined_objective(forget, torch::tensor({0.5, 0.5}, torch::kFloat64), retain, 0.0).item<double>(), 51.5);
  EXPECT_DOUBLE_EQ(
      combined_objective(forget, torch::tensor({0.5, 0.5}, torch::kFloat64), torch::Tensor(), 3.0).item<double>(),
      51.5);
  EXPECT_ERROR_CODE(combined_objective(forget, torch::tensor({0.5, 0.6}, torch::kFloat64), retain, 1.0),
                    ErrorCode::ContractViolation);
}

// Property: uniform weights reproduce the plain batch mean; any weights reproduce the direct sum.
TEST(CombinedObjective, RandomBatchesMatchDirectFormula) {
  Rng gen(8);
  for (int trial = 0; trial < 200; ++trial) {
    const auto n = 1 + static_cast<std::int64_t>(gen.uniform_index(50));
    const auto m = 1 + static_cast<std::int64_t>(gen.uniform_index(50));
    std::vector<double> f(n), r(m), w(n);
    for (auto& v : f) v = gen.normal() * 5;
    for (auto& v : r) v = gen.uniform01() * 3;
    for (auto& v : w) v = gen.uniform01() + 1e-3;
    const double wsum = std::accumulate(w.begin(), w.end(), 0.0);
    for (auto& v : w) v /= wsum;
    const double alpha = gen.uniform01() * 2;
    const double fmean = std::accumulate(f.begin(), f.end(), 0.0) / n;
    const double rmean = std::accumulate(r.begin(), r.end(), 0.0) / m;
    const auto ft = torch::tensor(f, torch::kFloat64);
    const auto rt = torch::tensor(r, torch::kFloat64);
    const auto uniform = torch::full({n}, 1.0 / n, torch::kFloat64);
    EXPECT_NEAR(combined_objective(ft, uniform, rt, alpha).item<double>(), fmean + alpha * rmean, 1e-9);
    double direct = alpha * rmean;
    for (std::int64_t i = 0; i < n; ++i) direct += w[i] * f[i];
    EXPECT_NEAR(combined_objective(ft, torch::tensor(w, torch::kFloat64), rt, alpha).item<double>(), direct, 1e-9);
  }
}

// Property: top-k selection equals a full sort of |score| with ties broken by position.
TEST(SaliencyMask, TopKMatchesSortOracle) {
  Rng gen(12);
  for (int trial = 0; trial < 100; ++trial) {
    std::vector<torch::Tensor> scores;
    std::vector<double> flat;
    for (auto shape : std::vector<std::vector<std::int64_t>>{{10, 20}, {20}, {4, 5, 3, 3}, {600}}) {
      auto t = torch::zeros(shape, torch::kFloat32);
      auto acc = t.view({-1});
      for (std::int64_t i = 0; i < acc.numel(); ++i) {
        // integer-valued scores with both signs so ties are frequent
        const float v = static_cast<float>(static_cast<int>(gen.uniform_index(41)) - 20);
        acc[i] = v;
        flat.push_back(std::abs(v));
      }
      scores.push_back(t);
    }
    ASSERT_EQ(flat.size(), 1000u);
    const double fraction = 0.001 + gen.uniform01() * 0.998;
    const auto mask = top_k_mask(scores, fraction);

    std::vector<std::size_t> order(flat.size());
    std::iota(order.begin(), order.end(), 0);
    std::stable_sort(order.begin(), order.end(), [&](auto a, auto b) { return flat[a] > flat[b]; });
    const auto k = static_cast<std::size_t>(std::llround(fraction * 1000));
    std::vector<float> expected(1000, 0.0f);
    for (std::size_t i = 0; i < k; ++i) expected[order[i]] = 1.0f;

    std::vector<float> got;
    for (std::size_t i = 0; i < scores.size(); ++i) {
      ASSERT_EQ(mask.masks[i].sizes(), scores[i].sizes());
      auto v = mask.masks[i].flatten().contiguous();
      got.insert(got.end(), v.data_ptr<float>(), v.data_ptr<float>() + v.numel());
    }
    EXPECT_EQ(got, expected) << "fraction " << fraction;
    EXPECT_EQ(mask.kept, static_cast<std::int64_t>(k));
    EXPECT_LE(std::abs(mask.fraction_kept - fraction), 1.0 / 1000 + 1e-12);
  }
}

TEST(SaliencyMask, FullFractionKeepsEverything) {
  const auto mask = top_k_mask({torch::randn({3, 3}), torch::zeros({4})}, 1.0);
  EXPECT_EQ(mask.kept, 13);
  for (const auto& m : mask.masks) EXPECT_TRUE(torch::all(m == 1).item<bool>());
  EXPECT_ERROR_CODE(top_k_mask({torch::ones({2})}, 0.0), ErrorCode::InvalidArgument);
}

TEST(SaliencyMask, ClassifierMaskMatchesParameterShapes) {
  const auto data = testing::labeled_toy(30, 2, 10, 8);
  ArchitectureSpec arch;
  arch.in_channels = 1;
  arch.image_size = 8;
  arch.width = 4;
  auto model = initialize_classifier(arch, 1);
  const auto mask = build_saliency_mask(model, DataView(data.train, {0, 1, 2, 3, 4}), 0.3);
  const auto params = model.net->parameters();
  ASSERT_EQ(mask.masks.size(), params.size());
  for (std::size_t i = 0; i < params.size(); ++i) EXPECT_EQ(mask.masks[i].sizes(), params[i].sizes());
  EXPECT_EQ(mask.total, parameter_count(*model.net));
  EXPECT_NEAR(mask.fraction_kept, 0.3, 1.0 / static_cast<double>(mask.total));
}

TEST(SaliencyMask, DiffusionMaskIsSeeded) {
  const auto data = testing::flat_images(8, 10, 8);
  auto model = initialize_diffusion(tiny_unet(), 10, 0);
  const DataView forget(data.train, {0, 1, 2});
  const auto a = build_saliency_mask(model, forget, 0.5, 3);
  const auto b = build_saliency_mask(model, forget, 0.5, 3);
  for (std::size_t i = 0; i < a.masks.size(); ++i) EXPECT_TRUE(torch::equal(a.masks[i], b.masks[i]));
  EXPECT_NEAR(a.fraction_kept, 0.5, 1.0 / static_cast<double>(a.total));
}

TEST(Recipe, JsonDefaultsAndDigest) {
  auto r = nlohmann::json::parse(R"({"method": "RL", "epochs": 3})").get<UnlearnRecipe>();
  EXPECT_EQ(r.method, Method::RL);
  EXPECT_EQ(r.weighting.tau, 50.0);
  EXPECT_EQ(r.weighting.variant, WeightingVariant::Off);
  auto g = nlohmann::json::parse(R"({"method": "GAR-m", "weighting": {"variant": "dynamic"}})").get<UnlearnRecipe>();
  EXPECT_EQ(g.method, Method::GARm);
  EXPECT_EQ(g.weighting.tau, 10.0);
  EXPECT_TRUE(g.masked());
  const auto back = nlohmann::json(r).get<UnlearnRecipe>();
  EXPECT_EQ(back.digest(), r.digest());
  r.seed = 1;
  EXPECT_NE(back.digest(), r.digest());
  EXPECT_ERROR_CODE(method_from_string("GD"), ErrorCode::InvalidArgument);
}

}  // namespace
}  // namespace unlearn
