#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <string_view>

#include <torch/torch.h>

#include "json.hpp"

namespace unlearn {

/// Incremental SHA-256; hex digests identify datasets, checkpoints, recipes and artifacts.
class Sha256 {
 public:
  Sha256();
  ~Sha256();
  Sha256(const Sha256&) = delete;
  Sha256& operator=(const Sha256&) = delete;

  Sha256& update(std::span<const std::byte> bytes);
  Sha256& update(std::string_view text);
  Sha256& update(const torch::Tensor& tensor);
  template <typename T>
  Sha256& update_value(const T& v) {
    return update(std::as_bytes(std::span<const T>(&v, 1)));
  }
  std::string hex();

 private:
  void* ctx_;
};

std::string sha256_hex(std::string_view text);
std::string sha256_file(const std::filesystem::path& path);
/// Digest of the canonical (sorted-key, compact) serialization.
std::string json_digest(const nlohmann::json& doc);

}  // namespace unlearn
