#include <algorithm>
#include <fstream>
#include <numeric>
#include <set>

#include "support.hpp"
#include "unlearn/digest.hpp"
#include "unlearn/stats.hpp"

namespace unlearn {
namespace {

TEST(Sha256, KnownVectors) {
  EXPECT_EQ(sha256_hex(""), "e3b0c44298fc1c149afbf4c8996fb92427ae41e4649b934ca495991b7852b855");
  EXPECT_EQ(sha256_hex("abc"), "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad");
  Sha256 h;
  h.update(std::string_view("a")).update(std::string_view("bc"));
  EXPECT_EQ(h.hex(), sha256_hex("abc"));
}

TEST(Sha256, FileMatchesText) {
  const auto dir = testing::scratch_dir("sha_file");
  std::ofstream(dir / "f.txt") << "abc";
  EXPECT_EQ(sha256_file(dir / "f.txt"), sha256_hex("abc"));
}

TEST(JsonDigest, IgnoresKeyOrder) {
  const auto a = nlohmann::json::parse(R"({"b": 1, "a": [1, 2, {"y": 0, "x": 1}]})");
  const auto b = nlohmann::json::parse(R"({"a": [1, 2, {"x": 1, "y": 0}], "b": 1})");
  EXPECT_EQ(json_digest(a), json_digest(b));
  EXPECT_NE(json_digest(a), json_digest(nlohmann::json::parse(R"({"a": [2, 1], "b": 1})")));
}

TEST(TensorDigest, SensitiveToValuesAndShape) {
  auto digest = [](const torch::Tensor& t) {
    Sha256 h;
    h.update(t);
    return h.hex();
  };
  const auto x = torch::arange(6, torch::kFloat32);
  EXPECT_EQ(digest(x), digest(x.clone()));
  EXPECT_NE(digest(x), digest(x.view({2, 3})));
  auto y = x.clone();
  y[3] = 3.0001f;
  EXPECT_NE(digest(x), digest(y));
}

TEST(DeriveSeed, StableAndLabelSensitive) {
  EXPECT_EQ(derive_seed(1, "split"), derive_seed(1, "split"));
  EXPECT_NE(derive_seed(1, "split"), derive_seed(2, "split"));
  EXPECT_NE(derive_seed(1, "split"), derive_seed(1, "splits"));
  EXPECT_NE(derive_seed(1, "split", 0), derive_seed(1, "split", 1));
  // FNV-1a offset basis for the empty label
  EXPECT_EQ(hash_label(""), 0xcbf29ce484222325ULL);
  EXPECT_EQ(hash_label("a"), 0xaf63dc4c8601ec8cULL);
}

TEST(Rng, UniformIndexIsUniform) {
  Rng rng(3);
  std::vector<double> counts(7, 0.0);
  for (int i = 0; i < 70000; ++i) counts[rng.uniform_index(7)] += 1;
  EXPECT_GT(chi_square_p_value(counts, std::vector<double>(7, 1.0 / 7)), 0.001);
}

TEST(Rng, NormalMoments) {
  Rng rng(4);
  std::vector<double> xs(50000);
  for (auto& x : xs) x = rng.normal();
  EXPECT_NEAR(mean(xs), 0.0, 0.02);
  EXPECT_NEAR(sample_variance(xs), 1.0, 0.03);
}

// Property: sample_without_replacement returns k sorted distinct values in range.
TEST(Rng, SampleWithoutReplacementProperties) {
  Rng gen(99);
  for (int trial = 0; trial < 500; ++trial) {
    const auto n = static_cast<std::int64_t>(gen.uniform_index(300));
    const auto k = n == 0 ? 0 : static_cast<std::int64_t>(gen.uniform_index(static_cast<std::uint64_t>(n) + 1));
    Rng rng(gen.next());
    const auto s = rng.sample_without_replacement(n, k);
    ASSERT_EQ(static_cast<std::int64_t>(s.size()), k);
    EXPECT_TRUE(std::is_sorted(s.begin(), s.end()));
    EXPECT_TRUE(std::adjacent_find(s.begin(), s.end()) == s.end());
    if (k > 0) {
      EXPECT_GE(s.front(), 0);
      EXPECT_LT(s.back(), n);
    }
  }
}

TEST(Rng, ShuffleIsPermutation) {
  Rng rng(1);
  std::vector<int> v(100);
  std::iota(v.begin(), v.end(), 0);
  auto w = v;
  rng.shuffle(std::span<int>(w));
  EXPECT_NE(v, w);
  std::sort(w.begin(), w.end());
  EXPECT_EQ(v, w);
}

TEST(TorchGenerator, Reproducible) {
  auto a = torch::randn({16}, make_torch_generator(5));
  auto b = torch::randn({16}, make_torch_generator(5));
  EXPECT_TRUE(torch::equal(a, b));
  EXPECT_FALSE(torch::equal(a, torch::randn({16}, make_torch_generator(6))));
}

TEST(Stats, WelchMatchesHandComputation) {
  // means 5 and 3, variances 2.5 and 2.5, n = 5 each -> t = 2, dof = 8
  const std::vector<double> a{3, 4, 5, 6, 7};
  const std::vector<double> b{1, 2, 3, 4, 5};
  const auto r = welch_t_test_greater(a, b);
  EXPECT_NEAR(r.t, 2.0, 1e-12);
  EXPECT_NEAR(r.dof, 8.0, 1e-12);
  // one-sided p of t=2 at 8 dof
  EXPECT_NEAR(r.p_value, 0.040258, 1e-5);
}

}  // namespace
}  // namespace unlearn
