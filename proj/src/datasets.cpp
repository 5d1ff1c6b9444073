#include "unlearn/datasets.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdlib>
#include <fstream>

#include "unlearn/digest.hpp"
#include "unlearn/error.hpp"
#include "unlearn/rng.hpp"

namespace unlearn {

namespace fs = std::filesystem;

Dataset::Dataset(torch::Tensor features, torch::Tensor labels, int num_classes,
                 std::int64_t first_index)
    : features_(features.to(torch::kFloat32).contiguous()),
      labels_(labels.to(torch::kInt64).contiguous()),
      num_classes_(num_classes),
      first_index_(first_index) {
  require(features_.dim() == 4, ErrorCode::InvalidArgument, "features must be [N, C, H, W]");
  require(features_.size(0) == labels_.size(0), ErrorCode::InvalidArgument,
          "feature and label counts differ");
  if (labels_.numel() > 0) {
    const auto lo = labels_.min().item<std::int64_t>();
    const auto hi = labels_.max().item<std::int64_t>();
    require(lo >= 0 && hi < num_classes_, ErrorCode::InvalidArgument, "label outside [0, C)");
  }
}

std::vector<std::int64_t> Dataset::indices() const {
  std::vector<std::int64_t> out(static_cast<std::size_t>(size()));
  for (std::int64_t i = 0; i < size(); ++i) out[i] = first_index_ + i;
  return out;
}

std::vector<std::int64_t> Dataset::example_shape() const {
  return {features_.size(1), features_.size(2), features_.size(3)};
}

LabeledExample Dataset::example(std::int64_t index) const {
  require(contains(index), ErrorCode::InvalidArgument, "index " + std::to_string(index) + " not in dataset");
  const auto row = index - first_index_;
  return {index, features_[row], labels_[row].item<std::int64_t>()};
}

namespace {

torch::Tensor rows_tensor(const Dataset& d, std::span<const std::int64_t> indices) {
  std::vector<std::int64_t> rows(indices.size());
  for (std::size_t i = 0; i < indices.size(); ++i) {
    require(d.contains(indices[i]), ErrorCode::InvalidArgument,
            "index " + std::to_string(indices[i]) + " not in dataset");
    rows[i] = indices[i] - d.first_index();
  }
  return torch::tensor(rows, torch::kInt64);
}

}  // namespace

torch::Tensor Dataset::gather_features(std::span<const std::int64_t> indices) const {
  return features_.index_select(0, rows_tensor(*this, indices));
}

torch::Tensor Dataset::gather_labels(std::span<const std::int64_t> indices) const {
  return labels_.index_select(0, rows_tensor(*this, indices));
}

std::string Dataset::digest() const {
  Sha256 h;
  h.update_value(first_index_).update_value(num_classes_);
  if (size() > 0) h.update(features_).update(labels_);
  return h.hex();
}

std::string DatasetBundle::digest() const {
  return Sha256().update(train.digest()).update(test.digest()).hex();
}

DataView::DataView(const Dataset& data, std::vector<std::int64_t> indices)
    : data_(&data), indices_(std::move(indices)) {
  for (auto i : indices_) {
    require(data.contains(i), ErrorCode::InvalidArgument, "view index " + std::to_string(i) + " not in dataset");
  }
}

Batch make_batch(const Dataset& data, std::vector<std::int64_t> indices) {
  Batch b;
  b.x = data.gather_features(indices);
  b.y = data.gather_labels(indices);
  b.indices = std::move(indices);
  return b;
}

void to_json(nlohmann::json& j, const DatasetSpec& s) {
  j = {{"source", s.source}, {"train_size", s.train_size}, {"test_size", s.test_size},
       {"seed", s.seed}, {"image_size", s.image_size}, {"path", s.path}};
}

void from_json(const nlohmann::json& j, DatasetSpec& s) {
  DatasetSpec d;
  s.source = j.value("source", d.source);
  s.train_size = j.value("train_size", d.train_size);
  s.test_size = j.value("test_size", d.test_size);
  s.seed = j.value("seed", d.seed);
  s.image_size = j.value("image_size", s.source == "synthetic-shapes" ? 16 : d.image_size);
  s.path = j.value("path", d.path);
}

fs::path resolve_data_path(const std::string& path) {
  fs::path p(path);
  if (p.is_absolute()) return p;
  if (const char* root = std::getenv("UNLEARN_DATA_DIR")) return fs::path(root) / p;
  return p;
}

DatasetBundle load_dataset(const DatasetSpec& spec) {
  require(spec.train_size > 0, ErrorCode::InvalidArgument, "train_size must be positive");
  if (spec.source == "synthetic-cifar") {
    return make_synthetic_cifar(spec.train_size, spec.test_size, spec.seed, spec.image_size);
  }
  if (spec.source == "synthetic-shapes") {
    return make_synthetic_shapes(spec.train_size, spec.test_size, spec.seed, spec.image_size);
  }
  if (spec.source == "raw") return load_raw_dataset(resolve_data_path(spec.path));
  if (spec.source == "cifar10-bin") {
    return load_cifar10_binary(resolve_data_path(spec.path), spec.train_size, spec.test_size);
  }
  fail(ErrorCode::InvalidArgument, "unknown dataset source '" + spec.source + "'");
}

// ---------------------------------------------------------------------------
// Synthetic CIFAR-shaped data

namespace {

struct GratingClass {
  double orientation;  // radians
  double frequency;    // cycles per image
  std::array<double, 3> color;
};

std::array<GratingClass, 10> grating_classes() {
  std::array<GratingClass, 10> out{};
  for (int c = 0; c < 10; ++c) {
    const double hue = 2.0 * M_PI * ((c * 3) % 10) / 10.0;
    out[c].orientation = M_PI * (c % 5) / 5.0;
    out[c].frequency = c < 5 ? 2.0 : 3.5;
    out[c].color = {0.5 + 0.5 * std::cos(hue), 0.5 + 0.5 * std::cos(hue - 2.094),
                    0.5 + 0.5 * std::cos(hue + 2.094)};
  }
  return out;
}

void render_grating(const GratingClass& g, double amplitude, double phase, double dx, double dy,
                    int size, std::vector<double>& img) {
  for (int y = 0; y < size; ++y) {
    for (int x = 0; x < size; ++x) {
      const double u = (x + dx) / size - 0.5;
      const double v = (y + dy) / size - 0.5;
      const double r2 = u * u + v * v;
      const double envelope = std::exp(-r2 / 0.18);
      const double s = std::sin(2.0 * M_PI * g.frequency *
                                    (u * std::cos(g.orientation) + v * std::sin(g.orientation)) + phase);
      for (int ch = 0; ch < 3; ++ch) {
        img[(ch * size + y) * size + x] += amplitude * envelope * (g.color[ch] - 0.5 + 0.45 * s);
      }
    }
  }
}

Dataset make_cifar_block(std::int64_t n, Rng& rng, int size, std::int64_t first_index) {
  const auto classes = grating_classes();
  const std::int64_t pixels = 3LL * size * size;
  auto features = torch::empty({n, 3, size, size}, torch::kFloat32);
  auto labels = torch::empty({n}, torch::kInt64);
  float* fptr = features.data_ptr<float>();
  std::int64_t* lptr = labels.data_ptr<std::int64_t>();
  std::vector<double> img(static_cast<std::size_t>(pixels));
  for (std::int64_t i = 0; i < n; ++i) {
    const int label = static_cast<int>(i % 10);
    const int distractor = static_cast<int>((label + 1 + rng.uniform_index(9)) % 10);
    // Typicality in (0.35, 1]; low values make the distractor nearly as strong.
    const double typicality = 0.35 + 0.65 * std::sqrt(rng.uniform01());
    const double noise = 0.12 + 0.10 * rng.uniform01();
    std::fill(img.begin(), img.end(), 0.5);
    render_grating(classes[label], typicality, 2 * M_PI * rng.uniform01(), 4 * (rng.uniform01() - 0.5) ,
                   4 * (rng.uniform01() - 0.5), size, img);
    render_grating(classes[distractor], 1.0 - typicality + 0.25, 2 * M_PI * rng.uniform01(),
                   4 * (rng.uniform01() - 0.5), 4 * (rng.uniform01() - 0.5), size, img);
    for (std::int64_t p = 0; p < pixels; ++p) {
      fptr[i * pixels + p] = static_cast<float>(std::clamp(img[p] + noise * rng.normal(), 0.0, 1.0));
    }
    // A few flipped labels: atypical, memorized-only examples as in natural data.
    int stored = label;
    if (rng.uniform01() < 0.03) stored = static_cast<int>((label + 1 + rng.uniform_index(9)) % 10);
    lptr[i] = stored;
  }
  // Interleaved labels above; shuffle rows so classes are not periodic in index.
  std::vector<std::int64_t> perm(static_cast<std::size_t>(n));
  std::iota(perm.begin(), perm.end(), 0);
  rng.shuffle(std::span<std::int64_t>(perm));
  auto p = torch::tensor(perm, torch::kInt64);
  return Dataset(features.index_select(0, p), labels.index_select(0, p), 10, first_index);
}

}  // namespace

DatasetBundle make_synthetic_cifar(std::int64_t train_size, std::int64_t test_size,
                                   std::uint64_t seed, int image_size) {
  require(image_size >= 8, ErrorCode::InvalidArgument, "image_size must be >= 8");
  Rng train_rng(derive_seed(seed, "synthetic-cifar/train"));
  Rng test_rng(derive_seed(seed, "synthetic-cifar/test"));
  DatasetBundle b;
  b.name = "synthetic-cifar";
  b.train = make_cifar_block(train_size, train_rng, image_size, 0);
  b.test = make_cifar_block(test_size, test_rng, image_size, train_size);
  return b;
}

// ---------------------------------------------------------------------------
// Synthetic shapes

namespace {

double shape_value(int cls, double u, double v, double r) {
  const double au = std::abs(u), av = std::abs(v);
  const double rad = std::sqrt(u * u + v * v);
  const double w = 0.22 * r;  // stroke width
  switch (cls) {
    case 0: return (au <= r && av <= r) ? 1.0 : 0.0;                              // filled square
    case 1: return (std::max(au, av) <= r && std::max(au, av) >= r - w) ? 1.0 : 0.0;  // hollow square
    case 2: return rad <= r ? 1.0 : 0.0;                                          // disc
    case 3: return (rad <= r && rad >= r - w) ? 1.0 : 0.0;                        // ring
    case 4: return ((au <= w / 2 && av <= r) || (av <= w / 2 && au <= r)) ? 1.0 : 0.0;  // plus
    case 5: {                                                                      // x
      const double d1 = std::abs(u - v) / std::sqrt(2.0), d2 = std::abs(u + v) / std::sqrt(2.0);
      return ((d1 <= w / 2 || d2 <= w / 2) && std::max(au, av) <= r) ? 1.0 : 0.0;
    }
    case 6: return (au <= r && av <= w) ? 1.0 : 0.0;                              // horizontal bar
    case 7: return (av <= r && au <= w) ? 1.0 : 0.0;                              // vertical bar
    case 8: return (v <= r && v >= -r && au <= (v + r) / 2.0) ? 1.0 : 0.0;        // triangle
    case 9: {                                                                      // two dots
      const double a = std::hypot(u - r * 0.6, v), b = std::hypot(u + r * 0.6, v);
      return (a <= r * 0.38 || b <= r * 0.38) ? 1.0 : 0.0;
    }
    default: return 0.0;
  }
}

Dataset make_shapes_block(std::int64_t n, Rng& rng, int size, std::int64_t first_index) {
  auto features = torch::empty({n, 1, size, size}, torch::kFloat32);
  auto labels = torch::empty({n}, torch::kInt64);
  float* fptr = features.data_ptr<float>();
  std::int64_t* lptr = labels.data_ptr<std::int64_t>();
  const std::int64_t pixels = static_cast<std::int64_t>(size) * size;
  for (std::int64_t i = 0; i < n; ++i) {
    const int cls = static_cast<int>(rng.uniform_index(10));
    // Shape radius in normalized coordinates where the image spans [-1, 1].
    const double r = 0.55 + 0.25 * rng.uniform01();
    const double cx = 0.08 * (rng.uniform01() - 0.5) * 2.0;
    const double cy = 0.08 * (rng.uniform01() - 0.5) * 2.0;
    const double intensity = 0.8 + 0.2 * rng.uniform01();
    for (int y = 0; y < size; ++y) {
      for (int x = 0; x < size; ++x) {
        // 2x2 supersampling for softer edges.
        double acc = 0.0;
        for (int sy = 0; sy < 2; ++sy) {
          for (int sx = 0; sx < 2; ++sx) {
            const double u = (x + 0.25 + 0.5 * sx) / size - 0.5 - cx;
            const double v = (y + 0.25 + 0.5 * sy) / size - 0.5 - cy;
            acc += shape_value(cls, 2.0 * u, 2.0 * v, r);
          }
        }
        fptr[i * pixels + y * size + x] = static_cast<float>(intensity * acc / 4.0);
      }
    }
    lptr[i] = cls;
  }
  return Dataset(features, labels, 10, first_index);
}

}  // namespace

DatasetBundle make_synthetic_shapes(std::int64_t train_size, std::int64_t test_size,
                                    std::uint64_t seed, int image_size) {
  require(image_size >= 8, ErrorCode::InvalidArgument, "image_size must be >= 8");
  Rng train_rng(derive_seed(seed, "synthetic-shapes/train"));
  Rng test_rng(derive_seed(seed, "synthetic-shapes/test"));
  DatasetBundle b;
  b.name = "synthetic-shapes";
  b.train = make_shapes_block(train_size, train_rng, image_size, 0);
  b.test = make_shapes_block(test_size, test_rng, image_size, train_size);
  return b;
}

// ---------------------------------------------------------------------------
// Raw-array directories

namespace {

template <typename T>
std::vector<T> read_array(const fs::path& path, std::size_t count) {
  std::ifstream in(path, std::ios::binary);
  require(static_cast<bool>(in), ErrorCode::Io, "cannot open " + path.string());
  std::vector<T> out(count);
  in.read(reinterpret_cast<char*>(out.data()), static_cast<std::streamsize>(count * sizeof(T)));
  require(static_cast<std::size_t>(in.gcount()) == count * sizeof(T), ErrorCode::Io,
          "short read from " + path.string());
  return out;
}

Dataset read_raw_split(const fs::path& dir, const nlohmann::json& entry, int c, int h, int w,
                       int num_classes, std::int64_t first_index) {
  const auto count = entry.at("count").get<std::int64_t>();
  const auto feats = read_array<float>(dir / entry.at("features").get<std::string>(),
                                       static_cast<std::size_t>(count * c * h * w));
  const auto labs = read_array<std::uint8_t>(dir / entry.at("labels").get<std::string>(),
                                             static_cast<std::size_t>(count));
  auto features = torch::from_blob(const_cast<float*>(feats.data()), {count, c, h, w}, torch::kFloat32).clone();
  auto labels = torch::from_blob(const_cast<std::uint8_t*>(labs.data()), {count}, torch::kUInt8)
                    .to(torch::kInt64);
  return Dataset(features, labels, num_classes, first_index);
}

void write_raw_split(const Dataset& d, const fs::path& features, const fs::path& labels) {
  const auto f = d.features().contiguous();
  std::ofstream fo(features, std::ios::binary);
  fo.write(static_cast<const char*>(f.data_ptr()), static_cast<std::streamsize>(f.nbytes()));
  const auto l = d.labels().to(torch::kUInt8).contiguous();
  std::ofstream lo(labels, std::ios::binary);
  lo.write(static_cast<const char*>(l.data_ptr()), static_cast<std::streamsize>(l.nbytes()));
  require(fo.good() && lo.good(), ErrorCode::Io, "failed writing raw arrays");
}

}  // namespace

DatasetBundle load_raw_dataset(const fs::path& dir) {
  std::ifstream in(dir / "manifest.json");
  require(static_cast<bool>(in), ErrorCode::Io, "missing manifest.json in " + dir.string());
  const auto m = nlohmann::json::parse(in);
  require(m.value("format", "") == "unlearn-raw-v1", ErrorCode::Io, "unsupported raw format");
  const int c = m.at("channels"), h = m.at("height"), w = m.at("width");
  const int num_classes = m.at("num_classes");
  DatasetBundle b;
  b.name = m.value("name", dir.filename().string());
  b.train = read_raw_split(dir, m.at("train"), c, h, w, num_classes, 0);
  b.test = read_raw_split(dir, m.at("test"), c, h, w, num_classes, b.train.size());
  return b;
}

void save_raw_dataset(const DatasetBundle& b, const fs::path& dir) {
  fs::create_directories(dir);
  write_raw_split(b.train, dir / "train_features.f32", dir / "train_labels.u8");
  write_raw_split(b.test, dir / "test_features.f32", dir / "test_labels.u8");
  const auto shape = b.train.example_shape();
  nlohmann::json m = {
      {"format", "unlearn-raw-v1"},
      {"name", b.name},
      {"num_classes", b.num_classes()},
      {"channels", shape[0]},
      {"height", shape[1]},
      {"width", shape[2]},
      {"train", {{"features", "train_features.f32"}, {"labels", "train_labels.u8"}, {"count", b.train.size()}}},
      {"test", {{"features", "test_features.f32"}, {"labels", "test_labels.u8"}, {"count", b.test.size()}}},
  };
  std::ofstream(dir / "manifest.json") << m.dump(2) << '\n';
}

DatasetBundle load_cifar10_binary(const fs::path& dir, std::int64_t train_size, std::int64_t test_size) {
  constexpr std::int64_t kRecord = 1 + 3072;
  auto read_files = [&](const std::vector<std::string>& names, std::int64_t want, std::int64_t first) {
    std::vector<float> feats;
    std::vector<std::int64_t> labels;
    std::vector<unsigned char> rec(kRecord);
    for (const auto& name : names) {
      std::ifstream in(dir / name, std::ios::binary);
      require(static_cast<bool>(in), ErrorCode::Io, "cannot open " + (dir / name).string());
      while (static_cast<std::int64_t>(labels.size()) < want &&
             in.read(reinterpret_cast<char*>(rec.data()), kRecord)) {
        labels.push_back(rec[0]);
        for (std::int64_t p = 1; p < kRecord; ++p) feats.push_back(rec[p] / 255.0f);
      }
      if (static_cast<std::int64_t>(labels.size()) >= want) break;
    }
    const auto n = static_cast<std::int64_t>(labels.size());
    require(n == want, ErrorCode::Io, "CIFAR-10 directory holds fewer records than requested");
    return Dataset(torch::from_blob(feats.data(), {n, 3, 32, 32}, torch::kFloat32).clone(),
                   torch::tensor(labels, torch::kInt64), 10, first);
  };
  DatasetBundle b;
  b.name = "cifar10";
  b.train = read_files({"data_batch_1.bin", "data_batch_2.bin", "data_batch_3.bin", "data_batch_4.bin",
                        "data_batch_5.bin"},
                       train_size, 0);
  b.test = read_files({"test_batch.bin"}, test_size, train_size);
  return b;
}

}  // namespace unlearn
