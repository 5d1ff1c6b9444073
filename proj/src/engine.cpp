#include "unlearn/engine.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <fstream>
#include <iostream>
#include <limits>

#include "unlearn/checkpoint.hpp"
#include "unlearn/rng.hpp"

namespace unlearn {

std::vector<PairedBatch> pair_batches(const DataView& forget, const DataView* retain, int batch_size,
                                      std::uint64_t seed, int epoch) {
  require(!forget.empty(), ErrorCode::EmptyForgetSet, "no forgetting examples to batch");
  require(batch_size >= 1, ErrorCode::InvalidArgument, "batch size must be positive");
  std::int64_t n = batch_size;
  if (n > forget.size()) {
    std::cerr << "warning: batch size " << n << " exceeds forgetting set (" << forget.size() << "), clamping\n";
    n = forget.size();
  }
  auto order = forget.indices();
  Rng(derive_seed(seed, "engine/forget-order", static_cast<std::uint64_t>(epoch))).shuffle(std::span(order));

  std::vector<std::int64_t> pool;
  std::int64_t retain_n = 0;
  if (retain != nullptr && !retain->empty()) {
    pool = retain->indices();
    Rng(derive_seed(seed, "engine/retain-order", static_cast<std::uint64_t>(epoch))).shuffle(std::span(pool));
    retain_n = std::min<std::int64_t>(batch_size, retain->size());
  }

  std::vector<PairedBatch> batches;
  std::size_t cursor = 0;
  for (std::size_t s = 0; s < order.size(); s += static_cast<std::size_t>(n)) {
    PairedBatch b;
    b.forget.assign(order.begin() + static_cast<std::ptrdiff_t>(s),
                    order.begin() + static_cast<std::ptrdiff_t>(std::min(order.size(), s + static_cast<std::size_t>(n))));
    for (std::int64_t k = 0; k < retain_n; ++k) {
      b.retain.push_back(pool[cursor]);
      cursor = (cursor + 1) % pool.size();
    }
    batches.push_back(std::move(b));
  }
  return batches;
}

void write_trajectory_csv(const std::vector<TrajectoryRow>& rows, const std::filesystem::path& path) {
  std::ofstream out(path);
  require(static_cast<bool>(out), ErrorCode::Io, "cannot write " + path.string());
  out << "epoch,ua,forget_loss_mean,retain_loss_mean,wall_seconds\n";
  out.precision(10);
  for (const auto& r : rows) {
    out << r.epoch << ',' << r.ua << ',' << r.forget_loss_mean << ',' << r.retain_loss_mean << ',' << r.wall_seconds
        << '\n';
  }
}

void UnlearnRun::save(const std::filesystem::path& dir) const {
  std::filesystem::create_directories(dir);
  {
    std::ofstream out(dir / "recipe.json");
    out << nlohmann::json(recipe).dump(2) << '\n';
  }
  write_trajectory_csv(trajectory, dir / "trajectory.csv");
  for (const auto& snap : weight_snapshots) {
    std::ofstream out(dir / ("weights_epoch" + std::to_string(snap.epoch) + ".csv"));
    out.precision(10);
    out << "index,relative_weight\n";
    for (const auto& [idx, w] : snap.entries) out << idx << ',' << w << '\n';
  }
  if (classifier) save_checkpoint(*classifier, dir / "final");
  if (diffusion) save_checkpoint(*diffusion, dir / "final");
}

namespace {

using Clock = std::chrono::steady_clock;

// Plain SGD with optional momentum; masked entries receive an exact zero step.
class MaskedSgd {
 public:
  MaskedSgd(std::vector<torch::Tensor> params, const SaliencyMask* mask, double lr, double momentum)
      : params_(std::move(params)), lr_(lr), momentum_(momentum) {
    if (mask != nullptr) {
      require(mask->masks.size() == params_.size(), ErrorCode::InvalidArgument, "mask does not match the model");
      for (std::size_t i = 0; i < params_.size(); ++i) {
        require(mask->masks[i].sizes() == params_[i].sizes(), ErrorCode::InvalidArgument,
                "mask shape differs from parameter");
        keep_.push_back(mask->masks[i].gt(0.5));
      }
    }
    if (momentum_ > 0) {
      for (auto& p : params_) velocity_.push_back(torch::zeros_like(p));
    }
  }

  void zero_grad() {
    for (auto& p : params_) {
      if (p.grad().defined()) p.mutable_grad() = torch::Tensor();
    }
  }

  void step() {
    torch::NoGradGuard guard;
    for (std::size_t i = 0; i < params_.size(); ++i) {
      auto g = params_[i].grad();
      if (!g.defined()) continue;
      if (!keep_.empty()) g = torch::where(keep_[i], g, torch::zeros_like(g));
      if (momentum_ > 0) {
        velocity_[i].mul_(momentum_).add_(g);
        g = velocity_[i];
      }
      params_[i].sub_(g * lr_);
    }
  }

 private:
  std::vector<torch::Tensor> params_;
  std::vector<torch::Tensor> keep_;
  std::vector<torch::Tensor> velocity_;
  double lr_;
  double momentum_;
};

class StopWatch {
 public:
  void start() { since_ = Clock::now(); }
  void stop() { total_ += std::chrono::duration<double>(Clock::now() - since_).count(); }
  double seconds() const { return total_; }

 private:
  Clock::time_point since_{};
  double total_ = 0.0;
};

struct EpochStats {
  double forget_sum = 0.0;
  std::int64_t forget_count = 0;
  double retain_sum = 0.0;
  std::int64_t retain_count = 0;
  std::vector<std::pair<std::int64_t, double>> weights;

  void add(const torch::Tensor& forget, const torch::Tensor& retain) {
    forget_sum += forget.detach().to(torch::kFloat64).sum().item<double>();
    forget_count += forget.size(0);
    if (retain.defined() && retain.numel() > 0) {
      retain_sum += retain.detach().to(torch::kFloat64).sum().item<double>();
      retain_count += retain.size(0);
    }
  }

  void add_weights(const std::vector<std::int64_t>& idx, const std::vector<double>& w) {
    const double n = static_cast<double>(w.size());
    for (std::size_t i = 0; i < w.size(); ++i) weights.emplace_back(idx[i], n * w[i]);
  }
};

std::vector<double> uniform_weights(std::size_t n) { return std::vector<double>(n, 1.0 / static_cast<double>(n)); }

WeightSnapshot summarize(int epoch, std::vector<std::pair<std::int64_t, double>> entries) {
  WeightSnapshot s;
  s.epoch = epoch;
  std::sort(entries.begin(), entries.end());
  std::vector<double> v;
  for (const auto& e : entries) v.push_back(e.second);
  std::sort(v.begin(), v.end());
  if (!v.empty()) {
    s.min = v.front();
    s.max = v.back();
    s.median = v.size() % 2 ? v[v.size() / 2] : 0.5 * (v[v.size() / 2 - 1] + v[v.size() / 2]);
  }
  s.entries = std::move(entries);
  return s;
}

void check_recipe(const UnlearnRecipe& recipe, Task task) {
  require(recipe.task == task, ErrorCode::InvalidTask, "recipe task does not match the model");
  require(recipe.epochs >= 0, ErrorCode::InvalidArgument, "epochs must be non-negative");
  require(recipe.lr > 0, ErrorCode::InvalidArgument, "learning rate must be positive");
  require(recipe.alpha >= 0, ErrorCode::InvalidArgument, "alpha must be non-negative");
  require(recipe.weighting.tau > 0, ErrorCode::InvalidArgument, "weighting.tau must be positive");
  require(recipe.mask_fraction > 0 && recipe.mask_fraction <= 1, ErrorCode::InvalidArgument,
          "mask_fraction must lie in (0, 1]");
}

void finish_epoch(UnlearnRun& run, int epoch, const EpochStats& stats, double ua, const StopWatch& watch,
                  bool keep_snapshots, const UnlearnRecipe& recipe) {
  TrajectoryRow row;
  row.epoch = epoch;
  row.ua = ua;
  row.forget_loss_mean = stats.forget_count ? stats.forget_sum / static_cast<double>(stats.forget_count) : 0.0;
  row.retain_loss_mean = stats.retain_count ? stats.retain_sum / static_cast<double>(stats.retain_count) : 0.0;
  row.wall_seconds = watch.seconds();
  run.trajectory.push_back(row);
  if (keep_snapshots && recipe.weighting.variant != WeightingVariant::Off) {
    run.weight_snapshots.push_back(summarize(epoch, stats.weights));
  }
}

}  // namespace

UnlearnRun run_unlearning(const ClassifierCheckpoint& original, const DataView& forget, const DataView& retain,
                          const UnlearnRecipe& recipe, const UnlearnTables& tables, const EngineOptions& options) {
  check_recipe(recipe, Task::Classifier);
  require(!forget.empty(), ErrorCode::EmptyForgetSet, "no forgetting examples");
  if (recipe.uses_retain()) require(!retain.empty(), ErrorCode::Precondition, "recipe needs retain data");
  if (recipe.weighting.variant == WeightingVariant::Static) {
    require(tables.weights != nullptr, ErrorCode::Precondition, "static weighting needs a weight table");
    require_complete(*tables.weights, forget.indices());
  }

  UnlearnRun run;
  run.recipe = recipe;
  run.recipe_digest = recipe.digest();
  run.start_digest = original.digest();
  auto ckpt = original.clone();
  ckpt.parent_digest = run.start_digest;
  auto& net = *ckpt.net;
  const int num_classes = ckpt.arch.num_classes;
  const auto& data = forget.data();

  StopWatch watch;
  watch.start();
  std::optional<SaliencyMask> own_mask;
  const SaliencyMask* mask = nullptr;
  if (recipe.masked()) {
    if (tables.mask != nullptr) {
      mask = tables.mask;
    } else {
      own_mask = build_saliency_mask(ckpt, forget, recipe.mask_fraction);
      mask = &*own_mask;
    }
  }
  MaskedSgd sgd(net.parameters(), mask, recipe.lr, recipe.momentum);
  Rng label_rng(derive_seed(recipe.seed, "engine/labels"));
  net.train();
  watch.stop();

  auto epoch_eval = options.classifier_epoch_eval;
  if (!epoch_eval) {
    epoch_eval = [&forget](ClassifierNet& m) {
      const auto pred = predict_labels(m, forget.features());
      return 100.0 * pred.eq(forget.labels()).sum().item<double>() / static_cast<double>(forget.size());
    };
  }

  for (int epoch = 1; epoch <= recipe.epochs; ++epoch) {
    watch.start();
    EpochStats stats;
    const auto relabel_seed = derive_seed(recipe.seed, "engine/relabel", static_cast<std::uint64_t>(epoch));
    for (const auto& b : pair_batches(forget, recipe.uses_retain() ? &retain : nullptr, recipe.batch_size,
                                      recipe.seed, epoch)) {
      sgd.zero_grad();
      const auto xf = data.gather_features(b.forget);
      const auto yf = data.gather_labels(b.forget);
      const auto logits = net.forward(xf);
      const auto ce_true = per_sample_ce_from_logits(logits, yf);

      torch::Tensor forget_loss;
      if (recipe.random_labels()) {
        torch::Tensor y_prime;
        if (recipe.redraw_labels_per_step) {
          y_prime = draw_wrong_labels(yf, num_classes, label_rng);
        } else {
          y_prime = torch::empty_like(yf);
          for (std::size_t i = 0; i < b.forget.size(); ++i) {
            y_prime[static_cast<std::int64_t>(i)] =
                wrong_label_for(yf[static_cast<std::int64_t>(i)].item<std::int64_t>(), num_classes, relabel_seed, b.forget[i]);
          }
        }
        forget_loss = per_sample_ce_from_logits(logits, y_prime);
      } else {
        forget_loss = -ce_true;
      }

      std::vector<double> w;
      switch (recipe.weighting.variant) {
        case WeightingVariant::Off: w = uniform_weights(b.forget.size()); break;
        case WeightingVariant::Static: w = tables.weights->batch_weights(b.forget); break;
        case WeightingVariant::Dynamic: {
          const auto l = ce_true.detach().to(torch::kFloat64).contiguous();
          std::vector<double> losses(l.data_ptr<double>(), l.data_ptr<double>() + l.numel());
          // A blown-up model shows here first; report it as divergence, not bad input.
          if (!std::all_of(losses.begin(), losses.end(), [](double v) { return std::isfinite(v); })) {
            throw UnlearnDivergedError(epoch, "evaluation loss is not finite", run.trajectory);
          }
          w = dynamic_batch_weights(losses, recipe.weighting.tau);
          break;
        }
      }

      torch::Tensor retain_losses;
      if (recipe.uses_retain() && !b.retain.empty()) {
        retain_losses = retain_loss(net, data.gather_features(b.retain), data.gather_labels(b.retain), recipe.task);
      }
      const auto objective = combined_objective(forget_loss, weights_tensor(w), retain_losses, recipe.alpha);
      if (!std::isfinite(objective.item<double>())) {
        throw UnlearnDivergedError(epoch, "unlearning objective is not finite", run.trajectory);
      }
      objective.backward();
      sgd.step();
      stats.add(forget_loss, retain_losses);
      if (recipe.weighting.variant != WeightingVariant::Off) stats.add_weights(b.forget, w);
    }
    watch.stop();
    const double ua = options.track_ua ? epoch_eval(net) : std::numeric_limits<double>::quiet_NaN();
    net.train();
    finish_epoch(run, epoch, stats, ua, watch, options.keep_weight_snapshots, recipe);
  }
  net.eval();
  run.final_digest = ckpt.digest();
  run.classifier = std::move(ckpt);
  return run;
}

UnlearnRun run_unlearning(const DiffusionCheckpoint& original, const DataView& forget, const DataView& retain,
                          const UnlearnRecipe& recipe, const UnlearnTables& tables, const EngineOptions& options) {
  check_recipe(recipe, Task::Diffusion);
  require(recipe.random_labels(), ErrorCode::InvalidTask, "diffusion unlearning supports RL and SalUn only");
  require(!forget.empty(), ErrorCode::EmptyForgetSet, "no forgetting examples");
  if (recipe.uses_retain()) require(!retain.empty(), ErrorCode::Precondition, "recipe needs retain data");
  if (recipe.weighting.variant == WeightingVariant::Static) {
    require(tables.weights != nullptr, ErrorCode::Precondition, "static weighting needs a weight table");
    require_complete(*tables.weights, forget.indices());
  }
  std::optional<TimestepSampler> sampler;
  if (recipe.weighting.variant == WeightingVariant::Dynamic) {
    require(tables.timesteps != nullptr, ErrorCode::Precondition, "dynamic diffusion weighting needs a timestep table");
    require(tables.timesteps->T == original.T(), ErrorCode::Precondition, "timestep table T differs from the model");
    sampler.emplace(*tables.timesteps);
  }

  UnlearnRun run;
  run.recipe = recipe;
  run.recipe_digest = recipe.digest();
  run.start_digest = original.digest();
  auto ckpt = original.clone();
  ckpt.parent_digest = run.start_digest;
  auto& net = *ckpt.net;
  const int num_classes = ckpt.num_classes();
  const int T = ckpt.T();
  const auto& data = forget.data();

  StopWatch watch;
  watch.start();
  std::optional<SaliencyMask> own_mask;
  const SaliencyMask* mask = nullptr;
  if (recipe.masked()) {
    if (tables.mask != nullptr) {
      mask = tables.mask;
    } else {
      own_mask = build_saliency_mask(ckpt, forget, recipe.mask_fraction, recipe.seed);
      mask = &*own_mask;
    }
  }
  MaskedSgd sgd(net.parameters(), mask, recipe.lr, recipe.momentum);
  Rng t_rng(derive_seed(recipe.seed, "engine/timesteps"));
  auto gen = make_torch_generator(derive_seed(recipe.seed, "engine/noise"));
  net.train();
  watch.stop();

  auto draw_t = [&](std::size_t n, bool importance) {
    std::vector<std::int64_t> t(n);
    for (auto& v : t) {
      v = importance ? sampler->sample(t_rng) : static_cast<std::int64_t>(t_rng.uniform_index(static_cast<std::uint64_t>(T))) + 1;
    }
    return torch::tensor(t, torch::kInt64);
  };

  for (int epoch = 1; epoch <= recipe.epochs; ++epoch) {
    watch.start();
    EpochStats stats;
    const auto relabel_seed = derive_seed(recipe.seed, "engine/relabel", static_cast<std::uint64_t>(epoch));
    for (const auto& b : pair_batches(forget, recipe.uses_retain() ? &retain : nullptr, recipe.batch_size,
                                      recipe.seed, epoch)) {
      sgd.zero_grad();
      const auto x0 = to_model_space(data.gather_features(b.forget));
      const auto y = data.gather_labels(b.forget);
      auto y_prime = torch::empty_like(y);
      for (std::size_t i = 0; i < b.forget.size(); ++i) {
        const auto k = static_cast<std::int64_t>(i);
        y_prime[k] = wrong_label_for(y[k].item<std::int64_t>(), num_classes, relabel_seed, b.forget[i]);
      }
      const auto t = draw_t(b.forget.size(), sampler.has_value());
      const auto noise = torch::randn(x0.sizes(), gen, torch::kFloat32);
      const auto terms = dm_forget_terms(ckpt, x0, y, y_prime, t, noise);

      std::vector<double> w;
      switch (recipe.weighting.variant) {
        case WeightingVariant::Off: w = uniform_weights(b.forget.size()); break;
        case WeightingVariant::Static: w = tables.weights->batch_weights(b.forget); break;
        case WeightingVariant::Dynamic: {
          const auto l = rescale_losses(terms.noise_loss.to(torch::kFloat64), *tables.timesteps, t).contiguous();
          std::vector<double> losses(l.data_ptr<double>(), l.data_ptr<double>() + l.numel());
          // A blown-up model shows here first; report it as divergence, not bad input.
          if (!std::all_of(losses.begin(), losses.end(), [](double v) { return std::isfinite(v); })) {
            throw UnlearnDivergedError(epoch, "evaluation loss is not finite", run.trajectory);
          }
          w = dynamic_batch_weights(losses, recipe.weighting.tau);
          break;
        }
      }

      torch::Tensor retain_losses;
      if (recipe.uses_retain() && !b.retain.empty()) {
        const auto xr = to_model_space(data.gather_features(b.retain));
        const auto tr = draw_t(b.retain.size(), false);
        const auto nr = torch::randn(xr.sizes(), gen, torch::kFloat32);
        retain_losses = retain_loss(ckpt, xr, data.gather_labels(b.retain), tr, nr, recipe.task);
      }
      const auto objective = combined_objective(terms.forget, weights_tensor(w), retain_losses, recipe.alpha);
      if (!std::isfinite(objective.item<double>())) {
        throw UnlearnDivergedError(epoch, "unlearning objective is not finite", run.trajectory);
      }
      objective.backward();
      sgd.step();
      stats.add(terms.forget, retain_losses);
      if (recipe.weighting.variant != WeightingVariant::Off) stats.add_weights(b.forget, w);
    }
    watch.stop();
    double ua = std::numeric_limits<double>::quiet_NaN();
    if (options.track_ua && options.diffusion_epoch_eval) ua = options.diffusion_epoch_eval(ckpt);
    net.train();
    finish_epoch(run, epoch, stats, ua, watch, options.keep_weight_snapshots, recipe);
  }
  net.eval();
  run.final_digest = ckpt.digest();
  run.diffusion = std::move(ckpt);
  return run;
}

}  // namespace unlearn
