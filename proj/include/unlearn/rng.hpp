#pragma once

#include <cstdint>
#include <random>
#include <span>
#include <string_view>
#include <vector>

#include <torch/torch.h>

namespace unlearn {

/// SplitMix64 finalizer; the mixing step of every derived seed.
std::uint64_t mix64(std::uint64_t x);

/// FNV-1a over a stage label, so seed derivation is stable across builds.
std::uint64_t hash_label(std::string_view label);

/// Seed for the `counter`-th draw of stage `label` under a global seed:
/// mix64(mix64(global ^ hash_label(label)) + counter).
std::uint64_t derive_seed(std::uint64_t global, std::string_view label, std::uint64_t counter = 0);

/// Portable RNG. The standard distributions are implementation-defined, so
/// bounded integers, uniforms, normals and shuffles are spelled out here to
/// keep splits and batch orders identical across toolchains.
class Rng {
 public:
  explicit Rng(std::uint64_t seed) : engine_(seed) {}

  std::uint64_t next() { return engine_(); }
  /// Uniform integer in [0, n).
  std::uint64_t uniform_index(std::uint64_t n);
  /// Uniform double in [0, 1).
  double uniform01();
  double normal();

  template <typename T>
  void shuffle(std::span<T> values) {
    for (std::size_t i = values.size(); i > 1; --i) {
      std::swap(values[i - 1], values[uniform_index(i)]);
    }
  }

  /// `k` distinct values from [0, n), returned in ascending order.
  std::vector<std::int64_t> sample_without_replacement(std::int64_t n, std::int64_t k);

 private:
  std::mt19937_64 engine_;
};

/// Torch CPU generator seeded deterministically; owned by whoever draws noise.
at::Generator make_torch_generator(std::uint64_t seed);

}  // namespace unlearn
