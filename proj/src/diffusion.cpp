#include "unlearn/diffusion.hpp"

#include <chrono>
#include <cmath>

#include "unlearn/checkpoint.hpp"
#include "unlearn/digest.hpp"
#include "unlearn/error.hpp"
#include "unlearn/rng.hpp"

namespace unlearn {

namespace nn = torch::nn;
namespace F = torch::nn::functional;

NoiseSchedule NoiseSchedule::linear(int T, double beta_start, double beta_end) {
  require(T >= 1, ErrorCode::InvalidArgument, "T must be positive");
  NoiseSchedule s;
  s.T = T;
  const double scale = 1000.0 / T;
  const double lo = std::min(beta_start * scale, 0.999);
  const double hi = std::min(beta_end * scale, 0.999);
  double abar = 1.0;
  for (int t = 1; t <= T; ++t) {
    const double beta = T == 1 ? hi : lo + (hi - lo) * (t - 1) / (T - 1);
    abar *= 1.0 - beta;
    s.betas.push_back(beta);
    s.alpha_bars.push_back(abar);
  }
  return s;
}

void to_json(nlohmann::json& j, const UNetSpec& s) {
  j = {{"in_channels", s.in_channels}, {"image_size", s.image_size}, {"num_classes", s.num_classes},
       {"base_channels", s.base_channels}, {"time_dim", s.time_dim}};
}

void from_json(const nlohmann::json& j, UNetSpec& s) {
  UNetSpec d;
  s.in_channels = j.value("in_channels", d.in_channels);
  s.image_size = j.value("image_size", d.image_size);
  s.num_classes = j.value("num_classes", d.num_classes);
  s.base_channels = j.value("base_channels", d.base_channels);
  s.time_dim = j.value("time_dim", d.time_dim);
}

struct UNetResBlock : nn::Module {
  UNetResBlock(int in, int out, int emb_dim) {
    norm1 = register_module("norm1", nn::GroupNorm(nn::GroupNormOptions(std::min(8, in), in)));
    conv1 = register_module("conv1", nn::Conv2d(nn::Conv2dOptions(in, out, 3).padding(1)));
    emb_proj = register_module("emb_proj", nn::Linear(emb_dim, out));
    norm2 = register_module("norm2", nn::GroupNorm(nn::GroupNormOptions(std::min(8, out), out)));
    conv2 = register_module("conv2", nn::Conv2d(nn::Conv2dOptions(out, out, 3).padding(1)));
    if (in != out) skip = register_module("skip", nn::Conv2d(nn::Conv2dOptions(in, out, 1)));
  }

  torch::Tensor forward(const torch::Tensor& x, const torch::Tensor& emb) {
    auto h = conv1(torch::silu(norm1(x)));
    h = h + emb_proj(emb).unsqueeze(-1).unsqueeze(-1);
    h = conv2(torch::silu(norm2(h)));
    return h + (skip ? skip(x) : x);
  }

  nn::GroupNorm norm1{nullptr}, norm2{nullptr};
  nn::Conv2d conv1{nullptr}, conv2{nullptr}, skip{nullptr};
  nn::Linear emb_proj{nullptr};
};

TinyUNet::TinyUNet(const UNetSpec& s) : spec(s) {
  require(s.image_size % 4 == 0, ErrorCode::InvalidArgument, "U-Net needs image_size divisible by 4");
  const int ch = s.base_channels;
  const int emb = 4 * ch;
  time_mlp = register_module("time_mlp", nn::Sequential(nn::Linear(s.time_dim, emb), nn::SiLU(), nn::Linear(emb, emb)));
  class_embedding = register_module("class_embedding", nn::Embedding(s.num_classes + 1, emb));
  conv_in = register_module("conv_in", nn::Conv2d(nn::Conv2dOptions(s.in_channels, ch, 3).padding(1)));
  enc1 = register_module("enc1", std::make_shared<UNetResBlock>(ch, ch, emb));
  down1 = register_module("down1", nn::Conv2d(nn::Conv2dOptions(ch, ch, 3).stride(2).padding(1)));
  enc2 = register_module("enc2", std::make_shared<UNetResBlock>(ch, 2 * ch, emb));
  down2 = register_module("down2", nn::Conv2d(nn::Conv2dOptions(2 * ch, 2 * ch, 3).stride(2).padding(1)));
  mid = register_module("mid", std::make_shared<UNetResBlock>(2 * ch, 2 * ch, emb));
  up2 = register_module("up2", nn::Conv2d(nn::Conv2dOptions(2 * ch, 2 * ch, 3).padding(1)));
  dec2 = register_module("dec2", std::make_shared<UNetResBlock>(4 * ch, 2 * ch, emb));
  up1 = register_module("up1", nn::Conv2d(nn::Conv2dOptions(2 * ch, 2 * ch, 3).padding(1)));
  dec1 = register_module("dec1", std::make_shared<UNetResBlock>(3 * ch, ch, emb));
  norm_out = register_module("norm_out", nn::GroupNorm(nn::GroupNormOptions(std::min(8, ch), ch)));
  conv_out = register_module("conv_out", nn::Conv2d(nn::Conv2dOptions(ch, s.in_channels, 3).padding(1)));
}

namespace {

torch::Tensor timestep_embedding(const torch::Tensor& t, int dim) {
  const int half = dim / 2;
  auto freqs = torch::exp(-std::log(10000.0) * torch::arange(half, torch::kFloat32) / half);
  auto args = t.to(torch::kFloat32).unsqueeze(1) * freqs.unsqueeze(0);
  return torch::cat({torch::sin(args), torch::cos(args)}, 1);
}

torch::Tensor upsample(const torch::Tensor& x) {
  return F::interpolate(x, F::InterpolateFuncOptions().scale_factor(std::vector<double>{2.0, 2.0}).mode(torch::kNearest));
}

}  // namespace

torch::Tensor TinyUNet::forward(torch::Tensor x, torch::Tensor t, torch::Tensor y) {
  const auto emb = time_mlp->forward(timestep_embedding(t, spec.time_dim)) + class_embedding(y);
  auto h0 = conv_in(x);
  auto h1 = enc1->forward(h0, emb);
  auto h2 = enc2->forward(down1(h1), emb);
  auto h = mid->forward(down2(h2), emb);
  h = dec2->forward(torch::cat({up2(upsample(h)), h2}, 1), emb);
  h = dec1->forward(torch::cat({up1(upsample(h)), h1}, 1), emb);
  return conv_out(torch::silu(norm_out(h)));
}

std::string DiffusionCheckpoint::digest() const {
  Sha256 h;
  h.update(nlohmann::json(arch).dump()).update_value(schedule.T);
  for (double b : schedule.betas) h.update_value(b);
  for (const auto& item : net->named_parameters()) h.update(item.key()).update(item.value());
  return h.hex();
}

DiffusionCheckpoint DiffusionCheckpoint::clone() const {
  DiffusionCheckpoint c = *this;
  c.net = std::make_shared<TinyUNet>(arch);
  copy_state(*net, *c.net);
  return c;
}

DiffusionCheckpoint initialize_diffusion(const UNetSpec& arch, int T, std::uint64_t seed) {
  DiffusionCheckpoint c;
  c.arch = arch;
  c.schedule = NoiseSchedule::linear(T);
  auto net = std::make_shared<TinyUNet>(arch);
  initialize_parameters(*net, seed);
  {
    torch::NoGradGuard guard;
    net->conv_out->weight.mul_(0.1);
    for (auto& p : net->class_embedding->parameters()) p.mul_(0.1);
  }
  c.net = net;
  c.rng_seed = seed;
  return c;
}

torch::Tensor to_model_space(const torch::Tensor& f) { return f * 2.0 - 1.0; }
torch::Tensor from_model_space(const torch::Tensor& x) { return ((x + 1.0) * 0.5).clamp(0.0, 1.0); }

void check_timesteps(const torch::Tensor& t, int T) {
  if (t.numel() == 0) return;
  const auto lo = t.min().item<std::int64_t>();
  const auto hi = t.max().item<std::int64_t>();
  require(lo >= 1 && hi <= T, ErrorCode::InvalidArgument,
          "timestep outside [1, " + std::to_string(T) + "]");
}

torch::Tensor forward_noise(const NoiseSchedule& schedule, const torch::Tensor& x0, const torch::Tensor& t,
                            const torch::Tensor& noise) {
  check_timesteps(t, schedule.T);
  auto abar = torch::tensor(schedule.alpha_bars, torch::kFloat64).index_select(0, t.to(torch::kInt64) - 1);
  const auto view_shape = std::vector<std::int64_t>{x0.size(0), 1, 1, 1};
  auto a = abar.sqrt().to(x0.scalar_type()).view(view_shape);
  auto b = (1.0 - abar).sqrt().to(x0.scalar_type()).view(view_shape);
  return a * x0 + b * noise;
}

torch::Tensor squared_error_per_example(const torch::Tensor& a, const torch::Tensor& b) {
  return (a - b).pow(2).flatten(1).sum(1);
}

torch::Tensor diffusion_noise_loss(DiffusionCheckpoint& model, const torch::Tensor& x0, const torch::Tensor& y,
                                   const torch::Tensor& t, const torch::Tensor& noise) {
  check_timesteps(t, model.T());
  require(noise.sizes() == x0.sizes(), ErrorCode::InvalidArgument, "noise shape differs from x");
  const auto x_t = forward_noise(model.schedule, x0, t, noise);
  return squared_error_per_example(noise, model.net->forward(x_t, t, y));
}

torch::Tensor example_noise(std::uint64_t seed, std::int64_t index, int t, torch::IntArrayRef shape) {
  auto gen = make_torch_generator(derive_seed(derive_seed(seed, "example-noise", static_cast<std::uint64_t>(index)),
                                              "timestep", static_cast<std::uint64_t>(t)));
  return torch::randn(shape, gen, torch::kFloat32);
}

void to_json(nlohmann::json& j, const DiffusionTrainConfig& c) {
  j = {{"steps", c.steps}, {"batch_size", c.batch_size}, {"lr", c.lr}, {"seed", c.seed},
       {"cond_dropout", c.cond_dropout}, {"T", c.T}};
}

void from_json(const nlohmann::json& j, DiffusionTrainConfig& c) {
  DiffusionTrainConfig d;
  c.steps = j.value("steps", d.steps);
  c.batch_size = j.value("batch_size", d.batch_size);
  c.lr = j.value("lr", d.lr);
  c.seed = j.value("seed", d.seed);
  c.cond_dropout = j.value("cond_dropout", d.cond_dropout);
  c.T = j.value("T", d.T);
}

std::string DiffusionTrainConfig::digest() const { return json_digest(nlohmann::json(*this)); }

DiffusionCheckpoint train_diffusion(const DataView& view, const UNetSpec& arch, const DiffusionTrainConfig& config,
                                    TrainingLog* log) {
  require(!view.empty(), ErrorCode::InvalidArgument, "cannot train on an empty view");
  auto ckpt = initialize_diffusion(arch, config.T, config.seed);
  ckpt.train_config_digest = config.digest();
  auto& net = *ckpt.net;
  net.train();
  torch::optim::Adam opt(net.parameters(), torch::optim::AdamOptions(config.lr));
  Rng rng(derive_seed(config.seed, "diffusion/batches"));
  auto gen = make_torch_generator(derive_seed(config.seed, "diffusion/noise"));
  const auto& data = view.data();
  std::vector<std::int64_t> order = view.indices();
  std::size_t cursor = order.size();
  const auto start = std::chrono::steady_clock::now();
  double running = 0.0;
  const int warmup = std::max(1, config.steps / 20);
  for (int step = 1; step <= config.steps; ++step) {
    std::vector<std::int64_t> idx;
    while (static_cast<int>(idx.size()) < config.batch_size) {
      if (cursor >= order.size()) {
        rng.shuffle(std::span<std::int64_t>(order));
        cursor = 0;
      }
      idx.push_back(order[cursor++]);
    }
    auto batch = make_batch(data, std::move(idx));
    const auto n = batch.y.size(0);
    std::vector<std::int64_t> ts(static_cast<std::size_t>(n));
    std::vector<std::int64_t> ys(static_cast<std::size_t>(n));
    const auto* yp = batch.y.data_ptr<std::int64_t>();
    for (std::int64_t i = 0; i < n; ++i) {
      ts[i] = 1 + static_cast<std::int64_t>(rng.uniform_index(static_cast<std::uint64_t>(config.T)));
      ys[i] = rng.uniform01() < config.cond_dropout ? arch.num_classes : yp[i];
    }
    const auto t = torch::tensor(ts, torch::kInt64);
    const auto y = torch::tensor(ys, torch::kInt64);
    const auto x0 = to_model_space(batch.x);
    const auto noise = torch::randn(x0.sizes(), gen, torch::kFloat32);
    const auto x_t = forward_noise(ckpt.schedule, x0, t, noise);
    // Learning rate: linear warmup, then cosine decay to 10%.
    const double progress = static_cast<double>(step) / config.steps;
    const double lr = step < warmup ? config.lr * step / warmup
                                    : config.lr * (0.1 + 0.9 * 0.5 * (1.0 + std::cos(M_PI * progress)));
    for (auto& group : opt.param_groups()) static_cast<torch::optim::AdamOptions&>(group.options()).lr(lr);
    opt.zero_grad();
    const auto loss = F::mse_loss(net.forward(x_t, t, y), noise);
    const double lv = loss.item<double>();
    if (!std::isfinite(lv)) throw DivergedError(step, "diffusion training loss is not finite");
    loss.backward();
    nn::utils::clip_grad_norm_(net.parameters(), 1.0);
    opt.step();
    running = step == 1 ? lv : 0.98 * running + 0.02 * lv;
    if (log && (step % 100 == 0 || step == config.steps)) {
      const double wall = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
      log->rows.push_back({step, "train", running, 0.0, wall});
    }
  }
  net.eval();
  return ckpt;
}

torch::Tensor guided_epsilon(EpsilonModel& net, const torch::Tensor& x_t, const torch::Tensor& t, int class_id,
                             int null_token, double guidance_scale) {
  const auto n = x_t.size(0);
  const auto y_null = torch::full({n}, null_token, torch::kInt64);
  if (guidance_scale == 0.0 || class_id == null_token) return net.forward(x_t, t, y_null);
  const auto y_cond = torch::full({n}, class_id, torch::kInt64);
  const auto eps = net.forward(torch::cat({x_t, x_t}), torch::cat({t, t}), torch::cat({y_cond, y_null}));
  const auto eps_c = eps.slice(0, 0, n);
  const auto eps_u = eps.slice(0, n, 2 * n);
  return eps_u + guidance_scale * (eps_c - eps_u);
}

torch::Tensor sample_diffusion(DiffusionCheckpoint& model, int class_id, int count, double guidance_scale,
                               std::uint64_t seed) {
  require(class_id >= 0 && class_id <= model.null_token(), ErrorCode::InvalidArgument, "class id out of range");
  require(count >= 0, ErrorCode::InvalidArgument, "negative sample count");
  torch::NoGradGuard guard;
  auto& net = *model.net;
  const bool was_training = net.is_training();
  net.eval();
  auto gen = make_torch_generator(derive_seed(seed, "sample"));
  const auto& a = model.arch;
  auto x = torch::randn({count, a.in_channels, a.image_size, a.image_size}, gen, torch::kFloat32);
  for (int t = model.T(); t >= 1; --t) {
    const auto tt = torch::full({count}, t, torch::kInt64);
    const auto eps = guided_epsilon(net, x, tt, class_id, model.null_token(), guidance_scale);
    // Posterior q(x_{t-1} | x_t, x0) with the predicted x0 clipped to the data range.
    const double beta = model.schedule.beta(t);
    const double abar = model.schedule.alpha_bar(t);
    const double abar_prev = t > 1 ? model.schedule.alpha_bar(t - 1) : 1.0;
    const auto x0 = ((x - std::sqrt(1.0 - abar) * eps) / std::sqrt(abar)).clamp(-1.0, 1.0);
    const double c0 = beta * std::sqrt(abar_prev) / (1.0 - abar);
    const double ct = (1.0 - abar_prev) * std::sqrt(1.0 - beta) / (1.0 - abar);
    x = c0 * x0 + ct * x;
    if (t > 1) {
      const double var = beta * (1.0 - abar_prev) / (1.0 - abar);
      x = x + std::sqrt(var) * torch::randn(x.sizes(), gen, torch::kFloat32);
    }
  }
  net.train(was_training);
  return from_model_space(x);
}

}  // namespace unlearn
