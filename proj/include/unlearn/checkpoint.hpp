#pragma once

#include <filesystem>
#include <string>

#include <torch/torch.h>

#include "json.hpp"

namespace unlearn {

struct ClassifierCheckpoint;
struct DiffusionCheckpoint;

/// Copies every parameter and buffer of `from` into the identically shaped `to`.
void copy_state(torch::nn::Module& from, torch::nn::Module& to);

/// All parameters concatenated in registration order, detached, float64.
torch::Tensor flatten_parameters(const torch::nn::Module& module);
std::int64_t parameter_count(const torch::nn::Module& module);
/// ||a - b|| / max(||b||, tiny)
double relative_l2_distance(const torch::Tensor& a, const torch::Tensor& b);

/// Binary parameter blob (`<prefix>.bin`) plus JSON sidecar (`<prefix>.json`).
/// Blob layout is documented in docs/checkpoint_format.md.
void save_checkpoint(const ClassifierCheckpoint& ckpt, const std::filesystem::path& prefix);
ClassifierCheckpoint load_classifier_checkpoint(const std::filesystem::path& prefix);
void save_checkpoint(const DiffusionCheckpoint& ckpt, const std::filesystem::path& prefix);
DiffusionCheckpoint load_diffusion_checkpoint(const std::filesystem::path& prefix);

/// Reads only the sidecar; `kind` is "classifier" or "diffusion".
nlohmann::json read_checkpoint_manifest(const std::filesystem::path& prefix);

std::filesystem::path blob_path(const std::filesystem::path& prefix);
std::filesystem::path manifest_path(const std::filesystem::path& prefix);

}  // namespace unlearn
