#include "unlearn/classifier.hpp"

#include <chrono>
#include <cmath>
#include <fstream>

#include "unlearn/checkpoint.hpp"
#include "unlearn/digest.hpp"
#include "unlearn/error.hpp"
#include "unlearn/rng.hpp"

namespace unlearn {

namespace nn = torch::nn;
namespace F = torch::nn::functional;

void to_json(nlohmann::json& j, const ArchitectureSpec& a) {
  j = {{"id", a.id}, {"in_channels", a.in_channels}, {"image_size", a.image_size},
       {"num_classes", a.num_classes}, {"width", a.width}};
}

void from_json(const nlohmann::json& j, ArchitectureSpec& a) {
  ArchitectureSpec d;
  a.id = j.value("id", d.id);
  a.in_channels = j.value("in_channels", d.in_channels);
  a.image_size = j.value("image_size", d.image_size);
  a.num_classes = j.value("num_classes", d.num_classes);
  a.width = j.value("width", d.width);
}

SmallCnn::SmallCnn(int in_channels, int image_size, int num_classes, int width) {
  require(image_size % 8 == 0, ErrorCode::InvalidArgument, "small-cnn needs image_size divisible by 8");
  conv1 = register_module("conv1", nn::Conv2d(nn::Conv2dOptions(in_channels, width, 3).padding(1)));
  conv2 = register_module("conv2", nn::Conv2d(nn::Conv2dOptions(width, 2 * width, 3).padding(1)));
  conv3 = register_module("conv3", nn::Conv2d(nn::Conv2dOptions(2 * width, 4 * width, 3).padding(1)));
  const int spatial = image_size / 8;
  head = register_module("head", nn::Linear(4 * width * spatial * spatial, num_classes));
}

torch::Tensor SmallCnn::forward(torch::Tensor x) {
  x = F::max_pool2d(torch::relu(conv1(x)), F::MaxPool2dFuncOptions(2));
  x = F::max_pool2d(torch::relu(conv2(x)), F::MaxPool2dFuncOptions(2));
  x = F::max_pool2d(torch::relu(conv3(x)), F::MaxPool2dFuncOptions(2));
  return head(x.flatten(1));
}

namespace {

struct BasicBlock : nn::Module {
  BasicBlock(int in, int out, int stride) {
    conv1 = register_module("conv1", nn::Conv2d(nn::Conv2dOptions(in, out, 3).stride(stride).padding(1).bias(false)));
    bn1 = register_module("bn1", nn::BatchNorm2d(out));
    conv2 = register_module("conv2", nn::Conv2d(nn::Conv2dOptions(out, out, 3).padding(1).bias(false)));
    bn2 = register_module("bn2", nn::BatchNorm2d(out));
    if (stride != 1 || in != out) {
      shortcut = register_module(
          "shortcut", nn::Sequential(nn::Conv2d(nn::Conv2dOptions(in, out, 1).stride(stride).bias(false)),
                                     nn::BatchNorm2d(out)));
    }
  }

  torch::Tensor forward(torch::Tensor x) {
    auto out = torch::relu(bn1(conv1(x)));
    out = bn2(conv2(out));
    return torch::relu(out + (shortcut ? shortcut->forward(x) : x));
  }

  nn::Conv2d conv1{nullptr}, conv2{nullptr};
  nn::BatchNorm2d bn1{nullptr}, bn2{nullptr};
  nn::Sequential shortcut{nullptr};
};

}  // namespace

ResNet18::ResNet18(int in_channels, int num_classes, int width) {
  stem = register_module("stem", nn::Sequential(nn::Conv2d(nn::Conv2dOptions(in_channels, width, 3).padding(1).bias(false)),
                                                nn::BatchNorm2d(width), nn::Functional(torch::relu)));
  layers = register_module("layers", nn::Sequential());
  int in = width;
  for (int stage = 0; stage < 4; ++stage) {
    const int out = width << stage;
    for (int b = 0; b < 2; ++b) {
      layers->push_back(std::make_shared<BasicBlock>(in, out, (b == 0 && stage > 0) ? 2 : 1));
      in = out;
    }
  }
  head = register_module("head", nn::Linear(in, num_classes));
}

torch::Tensor ResNet18::forward(torch::Tensor x) {
  x = layers->forward(stem->forward(x));
  return head(F::adaptive_avg_pool2d(x, F::AdaptiveAvgPool2dFuncOptions(1)).flatten(1));
}

std::shared_ptr<ClassifierNet> make_classifier(const ArchitectureSpec& a) {
  if (a.id == "small-cnn") return std::make_shared<SmallCnn>(a.in_channels, a.image_size, a.num_classes, a.width);
  if (a.id == "resnet18") return std::make_shared<ResNet18>(a.in_channels, a.num_classes, a.width);
  fail(ErrorCode::InvalidArgument, "unknown architecture '" + a.id + "'");
}

void initialize_parameters(nn::Module& module, std::uint64_t seed) {
  torch::NoGradGuard guard;
  auto gen = make_torch_generator(derive_seed(seed, "init"));
  for (auto& item : module.named_parameters()) {
    auto& p = item.value();
    const auto& name = item.key();
    const bool is_bias = name.size() >= 4 && name.compare(name.size() - 4, 4, "bias") == 0;
    if (p.dim() >= 2) {
      const double fan_in = static_cast<double>(p.numel() / p.size(0));
      const double bound = std::sqrt(6.0 / fan_in);
      p.uniform_(-bound, bound, gen);
    } else if (is_bias) {
      p.zero_();
    } else {
      p.fill_(1.0);
    }
  }
}

std::string ClassifierCheckpoint::digest() const {
  Sha256 h;
  h.update(nlohmann::json(arch).dump());
  for (const auto& item : net->named_parameters()) h.update(item.key()).update(item.value());
  for (const auto& item : net->named_buffers()) h.update(item.key()).update(item.value());
  return h.hex();
}

ClassifierCheckpoint ClassifierCheckpoint::clone() const {
  ClassifierCheckpoint c = *this;
  c.net = make_classifier(arch);
  copy_state(*net, *c.net);
  c.net->train(net->is_training());
  return c;
}

ClassifierCheckpoint initialize_classifier(const ArchitectureSpec& arch, std::uint64_t seed) {
  ClassifierCheckpoint c;
  c.arch = arch;
  c.net = make_classifier(arch);
  initialize_parameters(*c.net, seed);
  c.rng_seed = seed;
  return c;
}

void to_json(nlohmann::json& j, const TrainConfig& c) {
  j = {{"epochs", c.epochs}, {"lr", c.lr}, {"batch_size", c.batch_size}, {"seed", c.seed},
       {"momentum", c.momentum}, {"weight_decay", c.weight_decay}};
}

void from_json(const nlohmann::json& j, TrainConfig& c) {
  TrainConfig d;
  c.epochs = j.value("epochs", d.epochs);
  c.lr = j.value("lr", d.lr);
  c.batch_size = j.value("batch_size", d.batch_size);
  c.seed = j.value("seed", d.seed);
  c.momentum = j.value("momentum", d.momentum);
  c.weight_decay = j.value("weight_decay", d.weight_decay);
}

std::string TrainConfig::digest() const { return json_digest(nlohmann::json(*this)); }

void TrainingLog::write_csv(const std::filesystem::path& path) const {
  std::ofstream out(path);
  require(static_cast<bool>(out), ErrorCode::Io, "cannot write " + path.string());
  out << "epoch,split,loss,accuracy,wall_seconds\n";
  for (const auto& r : rows) {
    out << r.epoch << ',' << r.split << ',' << r.loss << ',' << r.accuracy << ',' << r.wall_seconds << '\n';
  }
}

torch::Tensor per_sample_ce_from_logits(const torch::Tensor& logits, const torch::Tensor& y) {
  return F::cross_entropy(logits, y, F::CrossEntropyFuncOptions().reduction(torch::kNone));
}

torch::Tensor per_sample_ce(ClassifierNet& net, const torch::Tensor& x, const torch::Tensor& y) {
  return per_sample_ce_from_logits(net.forward(x), y);
}

torch::Tensor predict_logits(ClassifierNet& net, const torch::Tensor& x, std::int64_t chunk) {
  torch::NoGradGuard guard;
  const bool was_training = net.is_training();
  net.eval();
  std::vector<torch::Tensor> parts;
  for (std::int64_t s = 0; s < x.size(0); s += chunk) {
    parts.push_back(net.forward(x.slice(0, s, std::min(x.size(0), s + chunk))));
  }
  net.train(was_training);
  return parts.empty() ? torch::empty({0}) : torch::cat(parts);
}

torch::Tensor predict_labels(ClassifierNet& net, const torch::Tensor& x, std::int64_t chunk) {
  return predict_logits(net, x, chunk).argmax(1);
}

std::vector<double> per_sample_ce(ClassifierNet& net, const DataView& view, std::int64_t chunk) {
  if (view.empty()) return {};
  const auto logits = predict_logits(net, view.features(), chunk);
  const auto ce = per_sample_ce_from_logits(logits, view.labels()).to(torch::kFloat64).contiguous();
  return {ce.data_ptr<double>(), ce.data_ptr<double>() + ce.numel()};
}

namespace {

double view_accuracy(ClassifierNet& net, const DataView& view) {
  if (view.empty()) return 0.0;
  const auto pred = predict_labels(net, view.features());
  return 100.0 * pred.eq(view.labels()).sum().item<double>() / static_cast<double>(view.size());
}

}  // namespace

TrainResult train_classifier(const DataView& view, const ArchitectureSpec& arch, const TrainConfig& config,
                             const DataView* eval_view) {
  require(!view.empty(), ErrorCode::InvalidArgument, "cannot train on an empty view");
  require(config.epochs >= 0 && config.batch_size > 0 && config.lr > 0, ErrorCode::InvalidArgument,
          "invalid training config");
  TrainResult result;
  result.checkpoint = initialize_classifier(arch, config.seed);
  result.checkpoint.train_config_digest = config.digest();
  auto& net = *result.checkpoint.net;

  std::vector<torch::Tensor> params = net.parameters();
  std::vector<torch::Tensor> velocity;
  for (auto& p : params) velocity.push_back(torch::zeros_like(p));

  const auto& data = view.data();
  const auto n = view.size();
  const auto steps_per_epoch = (n + config.batch_size - 1) / config.batch_size;
  const auto total_steps = std::max<std::int64_t>(1, steps_per_epoch * config.epochs);
  std::int64_t step = 0;
  const auto start = std::chrono::steady_clock::now();

  for (int epoch = 1; epoch <= config.epochs; ++epoch) {
    net.train();
    std::vector<std::int64_t> order = view.indices();
    Rng rng(derive_seed(config.seed, "train/shuffle", static_cast<std::uint64_t>(epoch)));
    rng.shuffle(std::span<std::int64_t>(order));
    double loss_sum = 0.0;
    std::int64_t correct = 0;
    for (std::int64_t s = 0; s < n; s += config.batch_size) {
      std::vector<std::int64_t> idx(order.begin() + s, order.begin() + std::min(n, s + config.batch_size));
      const auto batch = make_batch(data, std::move(idx));
      const double lr = 0.5 * config.lr * (1.0 + std::cos(M_PI * static_cast<double>(step) / total_steps));
      net.zero_grad();
      const auto logits = net.forward(batch.x);
      const auto loss = per_sample_ce_from_logits(logits, batch.y).mean();
      const double lv = loss.item<double>();
      if (!std::isfinite(lv)) throw DivergedError(epoch, "classifier training loss is not finite");
      loss.backward();
      {
        torch::NoGradGuard guard;
        for (std::size_t i = 0; i < params.size(); ++i) {
          auto g = params[i].grad();
          if (!g.defined()) continue;
          if (config.weight_decay > 0) g = g + config.weight_decay * params[i];
          velocity[i].mul_(config.momentum).add_(g);
          params[i].add_(velocity[i], -lr);
        }
      }
      loss_sum += lv * static_cast<double>(batch.y.size(0));
      correct += logits.argmax(1).eq(batch.y).sum().item<std::int64_t>();
      ++step;
    }
    const double wall = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
    result.log.rows.push_back({epoch, "train", loss_sum / n, 100.0 * correct / n, wall});
    if (eval_view && !eval_view->empty()) {
      const auto ce = per_sample_ce(net, *eval_view);
      double mean = 0.0;
      for (double v : ce) mean += v;
      result.log.rows.push_back({epoch, "eval", mean / ce.size(), view_accuracy(net, *eval_view), wall});
    }
  }
  net.eval();
  return result;
}

TrainResult train_external_classifier(const DataView& real_data, const ArchitectureSpec& arch,
                                      const TrainConfig& config) {
  return train_classifier(real_data, arch, config);
}

}  // namespace unlearn
