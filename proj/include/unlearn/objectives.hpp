#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include <torch/torch.h>

#include "json.hpp"
#include "unlearn/classifier.hpp"
#include "unlearn/datasets.hpp"
#include "unlearn/diffusion.hpp"
#include "unlearn/rng.hpp"
#include "unlearn/weighting.hpp"

namespace unlearn {

/// GA: -CE only. GAR: -CE + retain CE. RL: CE on random wrong labels + retain.
/// GAR-m and SalUn are GAR and RL restricted to a saliency mask.
enum class Method { GA, RL, GAR, GARm, SalUn };
enum class Task { Classifier, Diffusion };

const char* to_string(Method m);
Method method_from_string(const std::string& s);
const char* to_string(Task t);
Task task_from_string(const std::string& s);

struct UnlearnRecipe {
  Method method = Method::GAR;
  double alpha = 1.0;
  WeightingConfig weighting;
  int epochs = 10;
  double lr = 0.01;
  int batch_size = 256;
  double mask_fraction = 0.5;
  std::uint64_t seed = 0;
  Task task = Task::Classifier;
  double momentum = 0.0;
  /// Classifier RL only: a fresh wrong label every step (true) or one per example per epoch.
  bool redraw_labels_per_step = true;

  bool masked() const { return method == Method::GARm || method == Method::SalUn; }
  bool random_labels() const { return method == Method::RL || method == Method::SalUn; }
  bool uses_retain() const { return method != Method::GA; }
  std::string digest() const;
};

void to_json(nlohmann::json& j, const UnlearnRecipe& r);
void from_json(const nlohmann::json& j, UnlearnRecipe& r);

/// Default temperature for a method family: 10 for gradient ascent, 50 for random labels.
double default_tau(Method m);

/// (y + 1 + u) mod C with u uniform on [0, C - 1): uniform over the wrong classes.
/// Throws invalid-task when C < 2.
torch::Tensor draw_wrong_labels(const torch::Tensor& y, int num_classes, Rng& rng);
/// Same draw for one example, reproducible from (seed, index) alone.
std::int64_t wrong_label_for(std::int64_t y, int num_classes, std::uint64_t seed, std::int64_t index);

/// Per-example cross-entropy against freshly drawn wrong labels.
torch::Tensor rl_forget_loss(ClassifierNet& net, const torch::Tensor& x, const torch::Tensor& y, int num_classes,
                             Rng& rng);
/// -CE per example.
torch::Tensor gar_forget_loss(ClassifierNet& net, const torch::Tensor& x, const torch::Tensor& y);

torch::Tensor retain_loss(ClassifierNet& net, const torch::Tensor& x, const torch::Tensor& y, Task task);
/// x0 in model space. Throws invalid-argument unless task is diffusion.
torch::Tensor retain_loss(DiffusionCheckpoint& model, const torch::Tensor& x0, const torch::Tensor& y,
                          const torch::Tensor& t, const torch::Tensor& noise, Task task);

struct DmForgetTerms {
  /// ||eps(x_t | y').detach() - eps(x_t | y)||^2 per example.
  torch::Tensor forget;
  /// ||noise - eps(x_t | y)||^2 per example from the same prediction, detached.
  torch::Tensor noise_loss;
};

/// Both branches see the same x_t. Throws invalid-argument when any y' equals y.
DmForgetTerms dm_forget_terms(DiffusionCheckpoint& model, const torch::Tensor& x0, const torch::Tensor& y,
                              const torch::Tensor& y_prime, const torch::Tensor& t, const torch::Tensor& noise);
torch::Tensor dm_forget_loss(DiffusionCheckpoint& model, const torch::Tensor& x0, const torch::Tensor& y,
                             const torch::Tensor& y_prime, const torch::Tensor& t, const torch::Tensor& noise);

/// sum_i w_i * forget_i + alpha * mean(retain). `retain` may be undefined (GA).
/// Throws contract-violation when the weights do not sum to 1 within 1e-6.
torch::Tensor combined_objective(const torch::Tensor& forget_losses, const torch::Tensor& weights,
                                 const torch::Tensor& retain_losses, double alpha);

/// One 0/1 tensor per parameter, in module parameter order.
struct SaliencyMask {
  std::vector<torch::Tensor> masks;
  double fraction_kept = 1.0;
  std::int64_t kept = 0;
  std::int64_t total = 0;
};

/// Top-k parameters by |sum of gradients| over `scores`, k = round(fraction * P);
/// ties go to the earlier parameter position.
SaliencyMask top_k_mask(const std::vector<torch::Tensor>& scores, double fraction);

/// Gradient of the summed true-label cross-entropy over the forgetting set at the original model.
SaliencyMask build_saliency_mask(ClassifierCheckpoint& original, const DataView& forget, double fraction);
/// Same with the noise loss at uniformly drawn timesteps.
SaliencyMask build_saliency_mask(DiffusionCheckpoint& original, const DataView& forget, double fraction,
                                 std::uint64_t seed);

}  // namespace unlearn
