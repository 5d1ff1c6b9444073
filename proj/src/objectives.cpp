#include "unlearn/objectives.hpp"

#include <cmath>

#include "unlearn/digest.hpp"
#include "unlearn/error.hpp"

namespace unlearn {

const char* to_string(Method m) {
  switch (m) {
    case Method::GA: return "GA";
    case Method::RL: return "RL";
    case Method::GAR: return "GAR";
    case Method::GARm: return "GAR-m";
    case Method::SalUn: return "SalUn";
  }
  return "GA";
}

Method method_from_string(const std::string& s) {
  if (s == "GA") return Method::GA;
  if (s == "RL") return Method::RL;
  if (s == "GAR") return Method::GAR;
  if (s == "GAR-m") return Method::GARm;
  if (s == "SalUn") return Method::SalUn;
  fail(ErrorCode::InvalidArgument, "unknown method '" + s + "'");
}

const char* to_string(Task t) { return t == Task::Diffusion ? "diffusion" : "classifier"; }

Task task_from_string(const std::string& s) {
  if (s == "classifier") return Task::Classifier;
  if (s == "diffusion") return Task::Diffusion;
  fail(ErrorCode::InvalidArgument, "unknown task '" + s + "'");
}

double default_tau(Method m) { return (m == Method::RL || m == Method::SalUn) ? 50.0 : 10.0; }

void to_json(nlohmann::json& j, const UnlearnRecipe& r) {
  j = {{"method", to_string(r.method)},   {"alpha", r.alpha},
       {"weighting", r.weighting},        {"epochs", r.epochs},
       {"lr", r.lr},                      {"batch_size", r.batch_size},
       {"mask_fraction", r.mask_fraction}, {"seed", r.seed},
       {"task", to_string(r.task)},       {"momentum", r.momentum},
       {"redraw_labels_per_step", r.redraw_labels_per_step}};
}

void from_json(const nlohmann::json& j, UnlearnRecipe& r) {
  UnlearnRecipe d;
  r.method = method_from_string(j.value("method", std::string(to_string(d.method))));
  r.alpha = j.value("alpha", d.alpha);
  if (j.contains("weighting")) {
    r.weighting = j.at("weighting").get<WeightingConfig>();
    if (!j.at("weighting").contains("tau")) r.weighting.tau = default_tau(r.method);
  } else {
    r.weighting = WeightingConfig{default_tau(r.method), WeightingVariant::Off};
  }
  r.epochs = j.value("epochs", d.epochs);
  r.lr = j.value("lr", d.lr);
  r.batch_size = j.value("batch_size", d.batch_size);
  r.mask_fraction = j.value("mask_fraction", d.mask_fraction);
  r.seed = j.value("seed", d.seed);
  r.task = task_from_string(j.value("task", std::string("classifier")));
  r.momentum = j.value("momentum", d.momentum);
  r.redraw_labels_per_step = j.value("redraw_labels_per_step", d.redraw_labels_per_step);
}

std::string UnlearnRecipe::digest() const { return json_digest(nlohmann::json(*this)); }

torch::Tensor draw_wrong_labels(const torch::Tensor& y, int num_classes, Rng& rng) {
  require(num_classes >= 2, ErrorCode::InvalidTask, "random labels need at least two classes");
  auto yc = y.to(torch::kInt64).contiguous();
  auto out = torch::empty_like(yc);
  const auto* src = yc.data_ptr<std::int64_t>();
  auto* dst = out.data_ptr<std::int64_t>();
  const auto c = static_cast<std::uint64_t>(num_classes);
  for (std::int64_t i = 0; i < yc.numel(); ++i) {
    dst[i] = static_cast<std::int64_t>((static_cast<std::uint64_t>(src[i]) + 1 + rng.uniform_index(c - 1)) % c);
  }
  return out;
}

std::int64_t wrong_label_for(std::int64_t y, int num_classes, std::uint64_t seed, std::int64_t index) {
  require(num_classes >= 2, ErrorCode::InvalidTask, "random labels need at least two classes");
  Rng rng(derive_seed(seed, "relabel", static_cast<std::uint64_t>(index)));
  const auto c = static_cast<std::uint64_t>(num_classes);
  return static_cast<std::int64_t>((static_cast<std::uint64_t>(y) + 1 + rng.uniform_index(c - 1)) % c);
}

torch::Tensor rl_forget_loss(ClassifierNet& net, const torch::Tensor& x, const torch::Tensor& y, int num_classes,
                             Rng& rng) {
  const auto y_prime = draw_wrong_labels(y, num_classes, rng);
  return per_sample_ce(net, x, y_prime);
}

torch::Tensor gar_forget_loss(ClassifierNet& net, const torch::Tensor& x, const torch::Tensor& y) {
  return -per_sample_ce(net, x, y);
}

torch::Tensor retain_loss(ClassifierNet& net, const torch::Tensor& x, const torch::Tensor& y, Task task) {
  require(task == Task::Classifier, ErrorCode::InvalidArgument, "classifier retain loss on a diffusion task");
  return per_sample_ce(net, x, y);
}

torch::Tensor retain_loss(DiffusionCheckpoint& model, const torch::Tensor& x0, const torch::Tensor& y,
                          const torch::Tensor& t, const torch::Tensor& noise, Task task) {
  require(task == Task::Diffusion, ErrorCode::InvalidArgument, "diffusion retain loss on a classifier task");
  return diffusion_noise_loss(model, x0, y, t, noise);
}

DmForgetTerms dm_forget_terms(DiffusionCheckpoint& model, const torch::Tensor& x0, const torch::Tensor& y,
                              const torch::Tensor& y_prime, const torch::Tensor& t, const torch::Tensor& noise) {
  require(y.sizes() == y_prime.sizes(), ErrorCode::InvalidArgument, "label shapes differ");
  require(!y.eq(y_prime).any().item<bool>(), ErrorCode::InvalidArgument, "y' must differ from y");
  check_timesteps(t, model.T());
  const auto x_t = forward_noise(model.schedule, x0, t, noise);
  torch::Tensor target;
  {
    torch::NoGradGuard guard;
    target = model.net->forward(x_t, t, y_prime);
  }
  const auto eps = model.net->forward(x_t, t, y);
  return {squared_error_per_example(target, eps), squared_error_per_example(noise, eps.detach())};
}

torch::Tensor dm_forget_loss(DiffusionCheckpoint& model, const torch::Tensor& x0, const torch::Tensor& y,
                             const torch::Tensor& y_prime, const torch::Tensor& t, const torch::Tensor& noise) {
  return dm_forget_terms(model, x0, y, y_prime, t, noise).forget;
}

torch::Tensor combined_objective(const torch::Tensor& forget_losses, const torch::Tensor& weights,
                                 const torch::Tensor& retain_losses, double alpha) {
  require(forget_losses.dim() == 1 && weights.sizes() == forget_losses.sizes(), ErrorCode::InvalidArgument,
          "weights and forgetting losses differ in shape");
  const double sum = weights.to(torch::kFloat64).sum().item<double>();
  require(std::abs(sum - 1.0) <= 1e-6, ErrorCode::ContractViolation,
          "forgetting weights sum to " + std::to_string(sum));
  auto objective = (weights.to(forget_losses.scalar_type()) * forget_losses).sum();
  if (retain_losses.defined() && retain_losses.numel() > 0 && alpha != 0.0) {
    objective = objective + alpha * retain_losses.mean();
  }
  return objective;
}

SaliencyMask top_k_mask(const std::vector<torch::Tensor>& scores, double fraction) {
  require(fraction > 0.0 && fraction <= 1.0, ErrorCode::InvalidArgument, "mask fraction must lie in (0, 1]");
  std::vector<torch::Tensor> flat;
  for (const auto& s : scores) flat.push_back(s.detach().abs().to(torch::kFloat64).flatten());
  const auto all = torch::cat(flat);
  const auto total = all.numel();
  const auto k = std::llround(fraction * static_cast<double>(total));
  auto chosen = torch::zeros({total}, torch::kFloat32);
  if (k >= total) {
    chosen.fill_(1.0f);
  } else if (k > 0) {
    const auto order = std::get<1>(torch::sort(all, /*stable=*/true, /*dim=*/0, /*descending=*/true));
    chosen.index_fill_(0, order.slice(0, 0, k), 1.0f);
  }
  SaliencyMask mask;
  std::int64_t offset = 0;
  for (const auto& s : scores) {
    mask.masks.push_back(chosen.slice(0, offset, offset + s.numel()).view(s.sizes()).clone());
    offset += s.numel();
  }
  mask.total = total;
  mask.kept = std::min<std::int64_t>(k, total);
  mask.fraction_kept = static_cast<double>(mask.kept) / static_cast<double>(total);
  return mask;
}

namespace {

std::vector<torch::Tensor> gradient_scores(torch::nn::Module& net) {
  std::vector<torch::Tensor> scores;
  for (auto& p : net.parameters()) {
    scores.push_back(p.grad().defined() ? p.grad().detach().clone() : torch::zeros_like(p));
  }
  return scores;
}

void clear_grads(torch::nn::Module& net) {
  for (auto& p : net.parameters()) {
    if (p.grad().defined()) p.mutable_grad() = torch::Tensor();
  }
}

}  // namespace

SaliencyMask build_saliency_mask(ClassifierCheckpoint& original, const DataView& forget, double fraction) {
  require(!forget.empty(), ErrorCode::EmptyForgetSet, "saliency needs forgetting examples");
  auto& net = *original.net;
  const bool was_training = net.is_training();
  net.eval();
  clear_grads(net);
  const auto x = forget.features();
  const auto y = forget.labels();
  constexpr std::int64_t kChunk = 256;
  for (std::int64_t s = 0; s < x.size(0); s += kChunk) {
    const auto e = std::min(x.size(0), s + kChunk);
    (-per_sample_ce(net, x.slice(0, s, e), y.slice(0, s, e)).sum()).backward();
  }
  auto mask = top_k_mask(gradient_scores(net), fraction);
  clear_grads(net);
  net.train(was_training);
  return mask;
}

SaliencyMask build_saliency_mask(DiffusionCheckpoint& original, const DataView& forget, double fraction,
                                 std::uint64_t seed) {
  require(!forget.empty(), ErrorCode::EmptyForgetSet, "saliency needs forgetting examples");
  auto& net = *original.net;
  clear_grads(net);
  auto gen = make_torch_generator(derive_seed(seed, "saliency"));
  const auto x = to_model_space(forget.features());
  const auto y = forget.labels();
  constexpr std::int64_t kChunk = 128;
  for (std::int64_t s = 0; s < x.size(0); s += kChunk) {
    const auto e = std::min(x.size(0), s + kChunk);
    const auto x0 = x.slice(0, s, e);
    const auto t = torch::randint(1, original.T() + 1, {e - s}, gen, torch::kInt64);
    const auto noise = torch::randn(x0.sizes(), gen, torch::kFloat32);
    (-diffusion_noise_loss(original, x0, y.slice(0, s, e), t, noise).sum()).backward();
  }
  auto mask = top_k_mask(gradient_scores(net), fraction);
  clear_grads(net);
  return mask;
}

}  // namespace unlearn
