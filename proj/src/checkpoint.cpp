#include "unlearn/checkpoint.hpp"

#include <cstring>
#include <fstream>

#include "unlearn/classifier.hpp"
#include "unlearn/diffusion.hpp"
#include "unlearn/digest.hpp"
#include "unlearn/error.hpp"

namespace unlearn {

namespace fs = std::filesystem;

void copy_state(torch::nn::Module& from, torch::nn::Module& to) {
  torch::NoGradGuard guard;
  auto src_p = from.named_parameters();
  auto dst_p = to.named_parameters();
  require(src_p.size() == dst_p.size(), ErrorCode::InvalidArgument, "parameter sets differ");
  for (const auto& item : src_p) dst_p[item.key()].copy_(item.value());
  auto src_b = from.named_buffers();
  auto dst_b = to.named_buffers();
  for (const auto& item : src_b) dst_b[item.key()].copy_(item.value());
}

torch::Tensor flatten_parameters(const torch::nn::Module& module) {
  std::vector<torch::Tensor> parts;
  for (const auto& p : module.parameters()) parts.push_back(p.detach().flatten().to(torch::kFloat64));
  return parts.empty() ? torch::empty({0}, torch::kFloat64) : torch::cat(parts);
}

std::int64_t parameter_count(const torch::nn::Module& module) {
  std::int64_t n = 0;
  for (const auto& p : module.parameters()) n += p.numel();
  return n;
}

double relative_l2_distance(const torch::Tensor& a, const torch::Tensor& b) {
  const double denom = std::max(b.norm().item<double>(), 1e-300);
  return (a - b).norm().item<double>() / denom;
}

fs::path blob_path(const fs::path& prefix) { return fs::path(prefix.string() + ".bin"); }
fs::path manifest_path(const fs::path& prefix) { return fs::path(prefix.string() + ".json"); }

namespace {

constexpr char kMagic[4] = {'U', 'L', 'C', 'K'};
constexpr std::uint32_t kVersion = 1;

template <typename T>
void put(std::ostream& out, const T& v) {
  out.write(reinterpret_cast<const char*>(&v), sizeof(T));
}

template <typename T>
T get(std::istream& in) {
  T v{};
  in.read(reinterpret_cast<char*>(&v), sizeof(T));
  require(static_cast<bool>(in), ErrorCode::Io, "truncated checkpoint blob");
  return v;
}

void write_blob(torch::nn::Module& module, const fs::path& path) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary);
  require(static_cast<bool>(out), ErrorCode::Io, "cannot write " + path.string());
  std::vector<std::pair<std::string, torch::Tensor>> entries;
  for (const auto& item : module.named_parameters()) entries.emplace_back(item.key(), item.value());
  for (const auto& item : module.named_buffers()) entries.emplace_back(item.key(), item.value());
  out.write(kMagic, 4);
  put(out, kVersion);
  put(out, static_cast<std::uint64_t>(entries.size()));
  for (const auto& [name, value] : entries) {
    const auto t = value.detach().contiguous().cpu();
    put(out, static_cast<std::uint32_t>(name.size()));
    out.write(name.data(), static_cast<std::streamsize>(name.size()));
    put(out, static_cast<std::int8_t>(t.scalar_type()));
    put(out, static_cast<std::uint32_t>(t.dim()));
    for (auto d : t.sizes()) put(out, static_cast<std::int64_t>(d));
    out.write(static_cast<const char*>(t.data_ptr()), static_cast<std::streamsize>(t.nbytes()));
  }
  require(out.good(), ErrorCode::Io, "failed writing " + path.string());
}

void read_blob(torch::nn::Module& module, const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  require(static_cast<bool>(in), ErrorCode::Io, "cannot open " + path.string());
  char magic[4];
  in.read(magic, 4);
  require(in && std::memcmp(magic, kMagic, 4) == 0, ErrorCode::Io, "not a checkpoint blob: " + path.string());
  require(get<std::uint32_t>(in) == kVersion, ErrorCode::Io, "unsupported checkpoint version");
  auto params = module.named_parameters();
  auto buffers = module.named_buffers();
  const auto count = get<std::uint64_t>(in);
  require(count == params.size() + buffers.size(), ErrorCode::Io, "checkpoint does not match architecture");
  torch::NoGradGuard guard;
  for (std::uint64_t e = 0; e < count; ++e) {
    std::string name(get<std::uint32_t>(in), '\0');
    in.read(name.data(), static_cast<std::streamsize>(name.size()));
    const auto dtype = static_cast<c10::ScalarType>(get<std::int8_t>(in));
    std::vector<std::int64_t> shape(get<std::uint32_t>(in));
    for (auto& d : shape) d = get<std::int64_t>(in);
    auto t = torch::empty(shape, torch::TensorOptions().dtype(dtype));
    in.read(static_cast<char*>(t.data_ptr()), static_cast<std::streamsize>(t.nbytes()));
    require(static_cast<bool>(in), ErrorCode::Io, "truncated tensor " + name);
    torch::Tensor* target = params.find(name);
    if (!target) target = buffers.find(name);
    require(target != nullptr && target->sizes() == t.sizes(), ErrorCode::Io, "unexpected tensor " + name);
    target->copy_(t);
  }
}

void write_manifest(const nlohmann::json& m, const fs::path& path) {
  std::ofstream out(path);
  require(static_cast<bool>(out), ErrorCode::Io, "cannot write " + path.string());
  out << m.dump(2) << '\n';
}

}  // namespace

nlohmann::json read_checkpoint_manifest(const fs::path& prefix) {
  std::ifstream in(manifest_path(prefix));
  require(static_cast<bool>(in), ErrorCode::Io, "missing checkpoint manifest " + manifest_path(prefix).string());
  return nlohmann::json::parse(in);
}

void save_checkpoint(const ClassifierCheckpoint& ckpt, const fs::path& prefix) {
  write_blob(*ckpt.net, blob_path(prefix));
  nlohmann::json m = {{"kind", "classifier"},
                      {"architecture_id", ckpt.arch.id},
                      {"architecture", ckpt.arch},
                      {"seed", ckpt.rng_seed},
                      {"config_digest", ckpt.train_config_digest},
                      {"digest", ckpt.digest()},
                      {"blob_sha256", sha256_file(blob_path(prefix))}};
  if (!ckpt.parent_digest.empty()) m["parent_checkpoint"] = ckpt.parent_digest;
  write_manifest(m, manifest_path(prefix));
}

ClassifierCheckpoint load_classifier_checkpoint(const fs::path& prefix) {
  const auto m = read_checkpoint_manifest(prefix);
  require(m.value("kind", "") == "classifier", ErrorCode::Io, "not a classifier checkpoint");
  ClassifierCheckpoint c;
  c.arch = m.at("architecture").get<ArchitectureSpec>();
  c.net = make_classifier(c.arch);
  read_blob(*c.net, blob_path(prefix));
  c.net->eval();
  c.rng_seed = m.value("seed", std::uint64_t{0});
  c.train_config_digest = m.value("config_digest", "");
  c.parent_digest = m.value("parent_checkpoint", "");
  return c;
}

void save_checkpoint(const DiffusionCheckpoint& ckpt, const fs::path& prefix) {
  write_blob(*ckpt.net, blob_path(prefix));
  nlohmann::json m = {{"kind", "diffusion"},
                      {"architecture_id", "tiny-unet"},
                      {"architecture", ckpt.arch},
                      {"T", ckpt.T()},
                      {"noise_schedule", ckpt.schedule.betas},
                      {"null_token", ckpt.null_token()},
                      {"seed", ckpt.rng_seed},
                      {"config_digest", ckpt.train_config_digest},
                      {"digest", ckpt.digest()},
                      {"blob_sha256", sha256_file(blob_path(prefix))}};
  if (!ckpt.parent_digest.empty()) m["parent_checkpoint"] = ckpt.parent_digest;
  write_manifest(m, manifest_path(prefix));
}

DiffusionCheckpoint load_diffusion_checkpoint(const fs::path& prefix) {
  const auto m = read_checkpoint_manifest(prefix);
  require(m.value("kind", "") == "diffusion", ErrorCode::Io, "not a diffusion checkpoint");
  DiffusionCheckpoint c;
  c.arch = m.at("architecture").get<UNetSpec>();
  c.schedule.T = m.at("T").get<int>();
  c.schedule.betas = m.at("noise_schedule").get<std::vector<double>>();
  double abar = 1.0;
  for (double b : c.schedule.betas) {
    abar *= 1.0 - b;
    c.schedule.alpha_bars.push_back(abar);
  }
  c.net = std::make_shared<TinyUNet>(c.arch);
  read_blob(*c.net, blob_path(prefix));
  c.net->eval();
  c.rng_seed = m.value("seed", std::uint64_t{0});
  c.train_config_digest = m.value("config_digest", "");
  c.parent_digest = m.value("parent_checkpoint", "");
  return c;
}

}  // namespace unlearn
