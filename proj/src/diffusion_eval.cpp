#include "unlearn/diffusion_eval.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <limits>
#include <sstream>

#include "unlearn/error.hpp"

namespace unlearn {

const char* to_string(TableSource s) { return s == TableSource::Fitted ? "fitted" : "exhaustive"; }

double ExponentialFit::operator()(double t) const { return a * std::exp(b * t) + c; }

namespace {

struct LinearPart {
  double a = 0.0;
  double c = 0.0;
  double sse = std::numeric_limits<double>::infinity();
};

// For fixed rate beta, (a, c) solve a 2x2 least squares problem.
LinearPart solve_linear(std::span<const double> s, std::span<const double> y, double beta) {
  const double n = static_cast<double>(s.size());
  double se = 0, see = 0, sy = 0, sey = 0;
  for (std::size_t i = 0; i < s.size(); ++i) {
    const double e = std::exp(beta * s[i]);
    se += e;
    see += e * e;
    sy += y[i];
    sey += e * y[i];
  }
  LinearPart out;
  const double det = n * see - se * se;
  if (!(std::abs(det) > 1e-12 * std::max(1.0, n * see))) {
    out.a = 0.0;
    out.c = sy / n;
  } else {
    out.a = (n * sey - se * sy) / det;
    out.c = (see * sy - se * sey) / det;
  }
  double sse = 0;
  for (std::size_t i = 0; i < s.size(); ++i) {
    const double r = y[i] - (out.a * std::exp(beta * s[i]) + out.c);
    sse += r * r;
  }
  out.sse = std::isfinite(sse) ? sse : std::numeric_limits<double>::infinity();
  return out;
}

}  // namespace

ExponentialFit fit_exponential(std::span<const double> t, std::span<const double> y) {
  require(t.size() == y.size(), ErrorCode::InvalidArgument, "fit inputs differ in length");
  require(t.size() >= 3, ErrorCode::InvalidArgument, "exponential fit needs at least three points");
  const auto [lo_it, hi_it] = std::minmax_element(t.begin(), t.end());
  const double t0 = *lo_it;
  const double span = std::max(*hi_it - *lo_it, 1.0);
  std::vector<double> s(t.size());
  for (std::size_t i = 0; i < t.size(); ++i) s[i] = (t[i] - t0) / span;

  // Rates are searched on the normalized axis, where |beta| <= 20 covers any
  // curve that is not flat to machine precision over most of the range.
  constexpr double kMaxRate = 20.0;
  constexpr double kStep = 0.25;
  double best_beta = 0.0;
  double best_sse = std::numeric_limits<double>::infinity();
  for (double beta = -kMaxRate; beta <= kMaxRate + 1e-9; beta += kStep) {
    const double sse = solve_linear(s, y, beta).sse;
    if (sse < best_sse) {
      best_sse = sse;
      best_beta = beta;
    }
  }
  double lo = best_beta - kStep, hi = best_beta + kStep;
  const double g = (std::sqrt(5.0) - 1.0) / 2.0;
  double x1 = hi - g * (hi - lo), x2 = lo + g * (hi - lo);
  double f1 = solve_linear(s, y, x1).sse, f2 = solve_linear(s, y, x2).sse;
  for (int it = 0; it < 80; ++it) {
    if (f1 < f2) {
      hi = x2;
      x2 = x1;
      f2 = f1;
      x1 = hi - g * (hi - lo);
      f1 = solve_linear(s, y, x1).sse;
    } else {
      lo = x1;
      x1 = x2;
      f1 = f2;
      x2 = lo + g * (hi - lo);
      f2 = solve_linear(s, y, x2).sse;
    }
  }
  double beta = 0.5 * (lo + hi);
  auto part = solve_linear(s, y, beta);
  if (best_sse < part.sse) {
    beta = best_beta;
    part = solve_linear(s, y, beta);
  }

  ExponentialFit fit;
  fit.b = beta / span;
  fit.a = part.a * std::exp(-fit.b * t0);
  fit.c = part.c;
  double mean_abs = 0;
  for (double v : y) mean_abs += std::abs(v);
  mean_abs /= static_cast<double>(y.size());
  fit.relative_rms = std::sqrt(part.sse / static_cast<double>(y.size())) / std::max(mean_abs, 1e-300);
  fit.converged = std::isfinite(fit.a) && std::isfinite(fit.b) && std::isfinite(fit.c) && std::isfinite(fit.relative_rms);
  return fit;
}

double TimestepLossTable::m(int t) const {
  require(t >= 1 && t <= T, ErrorCode::InvalidArgument, "timestep outside table");
  return mean_loss[static_cast<std::size_t>(t - 1)];
}

void TimestepLossTable::save_csv(const std::filesystem::path& path) const {
  std::ofstream out(path);
  require(static_cast<bool>(out), ErrorCode::Io, "cannot write " + path.string());
  nlohmann::json header = {{"T", T},
                           {"source", to_string(source)},
                           {"piecewise_fallback", piecewise_fallback},
                           {"sample_plan", {{"num_examples", num_examples}, {"num_timesteps", num_timesteps}}},
                           {"evaluations", evaluations},
                           {"model_digest", model_digest},
                           {"seed", seed}};
  if (fit) {
    header["fit_params"] = {{"a", fit->a}, {"b", fit->b}, {"c", fit->c}, {"relative_rms", fit->relative_rms}};
  } else {
    header["fit_params"] = nullptr;
  }
  out << "# " << header.dump() << "\nt,mean_loss\n";
  out.precision(17);
  for (int t = 1; t <= T; ++t) out << t << ',' << mean_loss[static_cast<std::size_t>(t - 1)] << '\n';
}

TimestepLossTable TimestepLossTable::load_csv(const std::filesystem::path& path) {
  std::ifstream in(path);
  require(static_cast<bool>(in), ErrorCode::Io, "cannot open " + path.string());
  std::string line;
  std::getline(in, line);
  require(line.rfind("# ", 0) == 0, ErrorCode::Io, "timestep table lacks JSON header");
  const auto h = nlohmann::json::parse(line.substr(2));
  TimestepLossTable table;
  table.T = h.at("T").get<int>();
  table.source = h.at("source").get<std::string>() == "fitted" ? TableSource::Fitted : TableSource::Exhaustive;
  table.piecewise_fallback = h.value("piecewise_fallback", false);
  table.num_examples = h.at("sample_plan").at("num_examples").get<int>();
  table.num_timesteps = h.at("sample_plan").at("num_timesteps").get<int>();
  table.evaluations = h.value("evaluations", std::int64_t{0});
  table.model_digest = h.value("model_digest", "");
  table.seed = h.value("seed", std::uint64_t{0});
  if (!h.at("fit_params").is_null()) {
    const auto& f = h["fit_params"];
    ExponentialFit fit;
    fit.a = f.at("a");
    fit.b = f.at("b");
    fit.c = f.at("c");
    fit.relative_rms = f.value("relative_rms", 0.0);
    fit.converged = true;
    table.fit = fit;
  }
  std::getline(in, line);
  table.mean_loss.assign(static_cast<std::size_t>(table.T), 0.0);
  int rows = 0;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    const auto comma = line.find(',');
    const int t = std::stoi(line.substr(0, comma));
    require(t >= 1 && t <= table.T, ErrorCode::Io, "timestep row out of range");
    table.mean_loss[static_cast<std::size_t>(t - 1)] = std::stod(line.substr(comma + 1));
    ++rows;
  }
  require(rows == table.T, ErrorCode::Io, "timestep table has missing rows");
  return table;
}

std::vector<std::vector<double>> timestep_loss_matrix(DiffusionCheckpoint& model, const DataView& view,
                                                      std::span<const int> timesteps, std::uint64_t noise_seed) {
  torch::NoGradGuard guard;
  auto& net = *model.net;
  const bool was_training = net.is_training();
  net.eval();
  const auto& idx = view.indices();
  const auto n = static_cast<std::int64_t>(idx.size());
  const auto x_all = to_model_space(view.features());
  const auto y_all = view.labels();
  const auto shape = view.data().example_shape();
  std::vector<std::vector<double>> out(idx.size(), std::vector<double>(timesteps.size()));
  constexpr std::int64_t kChunk = 256;
  for (std::size_t k = 0; k < timesteps.size(); ++k) {
    const int t = timesteps[k];
    for (std::int64_t start = 0; start < n; start += kChunk) {
      const auto end = std::min(n, start + kChunk);
      std::vector<torch::Tensor> noise;
      for (auto i = start; i < end; ++i) noise.push_back(example_noise(noise_seed, idx[static_cast<std::size_t>(i)], t, shape));
      const auto tt = torch::full({end - start}, t, torch::kInt64);
      const auto loss = diffusion_noise_loss(model, x_all.slice(0, start, end), y_all.slice(0, start, end), tt,
                                             torch::stack(noise))
                            .to(torch::kFloat64)
                            .contiguous();
      const double* p = loss.data_ptr<double>();
      for (auto i = start; i < end; ++i) out[static_cast<std::size_t>(i)][k] = p[i - start];
    }
  }
  net.train(was_training);
  return out;
}

TimestepLossTable build_reference_table_exhaustive(DiffusionCheckpoint& model, const DataView& forget,
                                                   std::uint64_t noise_seed) {
  require(!forget.empty(), ErrorCode::EmptyForgetSet, "reference table needs forgetting examples");
  std::vector<int> grid(static_cast<std::size_t>(model.T()));
  for (int t = 1; t <= model.T(); ++t) grid[static_cast<std::size_t>(t - 1)] = t;
  const auto losses = timestep_loss_matrix(model, forget, grid, noise_seed);
  TimestepLossTable table;
  table.T = model.T();
  table.source = TableSource::Exhaustive;
  table.num_examples = static_cast<int>(forget.size());
  table.num_timesteps = model.T();
  table.evaluations = forget.size() * model.T();
  table.model_digest = model.digest();
  table.seed = noise_seed;
  table.mean_loss.assign(grid.size(), 0.0);
  for (const auto& row : losses) {
    for (std::size_t k = 0; k < grid.size(); ++k) table.mean_loss[k] += row[k];
  }
  for (std::size_t k = 0; k < grid.size(); ++k) {
    table.mean_loss[k] /= static_cast<double>(losses.size());
    require(table.mean_loss[k] >= kTableFloor, ErrorCode::DegenerateTable,
            "reference loss vanishes at t=" + std::to_string(k + 1));
  }
  return table;
}

std::vector<int> timestep_grid(int T, int count) {
  require(count >= 1 && count <= T, ErrorCode::InvalidArgument, "timestep count must lie in [1, T]");
  if (count == 1) return {(T + 1) / 2};
  std::vector<int> grid;
  for (int k = 0; k < count; ++k) {
    grid.push_back(1 + static_cast<int>(std::lround(static_cast<double>(k) * (T - 1) / (count - 1))));
  }
  return grid;
}

TimestepLossTable table_from_samples(int T, std::span<const int> timesteps, std::span<const double> means) {
  require(T >= 1, ErrorCode::InvalidArgument, "T must be positive");
  require(!timesteps.empty() && timesteps.size() == means.size(), ErrorCode::InvalidArgument,
          "sampled timesteps and means differ");
  TimestepLossTable table;
  table.T = T;
  table.source = TableSource::Fitted;
  table.num_timesteps = static_cast<int>(timesteps.size());
  table.mean_loss.assign(static_cast<std::size_t>(T), 0.0);

  std::vector<double> ts(timesteps.begin(), timesteps.end());
  std::optional<ExponentialFit> fit;
  if (ts.size() >= 3) {
    auto f = fit_exponential(ts, means);
    if (f.converged && f.relative_rms <= 0.25) fit = f;
  }
  if (fit) {
    table.fit = fit;
    for (int t = 1; t <= T; ++t) table.mean_loss[static_cast<std::size_t>(t - 1)] = std::max((*fit)(t), kTableFloor);
    return table;
  }

  table.piecewise_fallback = true;
  std::vector<std::pair<int, double>> pts;
  for (std::size_t i = 0; i < ts.size(); ++i) pts.emplace_back(timesteps[i], means[i]);
  std::sort(pts.begin(), pts.end());
  for (int t = 1; t <= T; ++t) {
    double v;
    if (t <= pts.front().first) {
      v = pts.front().second;
    } else if (t >= pts.back().first) {
      v = pts.back().second;
    } else {
      auto hi = std::upper_bound(pts.begin(), pts.end(), t, [](int x, const auto& p) { return x < p.first; });
      auto lo = hi - 1;
      const double w = static_cast<double>(t - lo->first) / (hi->first - lo->first);
      v = lo->second + w * (hi->second - lo->second);
    }
    table.mean_loss[static_cast<std::size_t>(t - 1)] = std::max(v, kTableFloor);
  }
  return table;
}

TimestepLossTable fit_reference_table(DiffusionCheckpoint& model, const DataView& forget, int num_examples,
                                      int num_timesteps, std::uint64_t seed) {
  require(num_examples >= 1 && num_examples <= forget.size(), ErrorCode::InvalidArgument,
          "num_examples must lie in [1, |forget|]");
  Rng rng(derive_seed(seed, "table/examples"));
  std::vector<std::int64_t> chosen;
  for (auto pos : rng.sample_without_replacement(forget.size(), num_examples)) {
    chosen.push_back(forget.indices()[static_cast<std::size_t>(pos)]);
  }
  const DataView subset(forget.data(), chosen);
  const auto grid = timestep_grid(model.T(), num_timesteps);
  const auto losses = timestep_loss_matrix(model, subset, grid, derive_seed(seed, "table/noise"));
  std::vector<double> means(grid.size(), 0.0);
  for (const auto& row : losses) {
    for (std::size_t k = 0; k < grid.size(); ++k) means[k] += row[k] / static_cast<double>(losses.size());
  }
  auto table = table_from_samples(model.T(), grid, means);
  table.num_examples = num_examples;
  table.evaluations = static_cast<std::int64_t>(num_examples) * num_timesteps;
  table.model_digest = model.digest();
  table.seed = seed;
  return table;
}

TimestepSampler::TimestepSampler(const TimestepLossTable& table) {
  require(table.T >= 1 && static_cast<int>(table.mean_loss.size()) == table.T, ErrorCode::InvalidArgument,
          "malformed timestep table");
  double total = 0;
  for (double m : table.mean_loss) {
    total += 1.0 / std::max(m, kTableFloor);
    cumulative_.push_back(total);
  }
  for (double& c : cumulative_) c /= total;
  cumulative_.back() = 1.0;
}

int TimestepSampler::sample(Rng& rng) const {
  const double u = rng.uniform01();
  const auto it = std::upper_bound(cumulative_.begin(), cumulative_.end(), u);
  return static_cast<int>(std::min<std::ptrdiff_t>(it - cumulative_.begin(), std::ssize(cumulative_) - 1)) + 1;
}

double TimestepSampler::probability(int t) const {
  require(t >= 1 && t <= T(), ErrorCode::InvalidArgument, "timestep outside table");
  const auto k = static_cast<std::size_t>(t - 1);
  return k == 0 ? cumulative_[0] : cumulative_[k] - cumulative_[k - 1];
}

int sample_timestep(const TimestepLossTable& table, Rng& rng) { return TimestepSampler(table).sample(rng); }

double rescale_loss(double loss, const TimestepLossTable& table, int t) {
  return loss / std::max(table.m(t), kTableFloor);
}

torch::Tensor rescale_losses(const torch::Tensor& losses, const TimestepLossTable& table, const torch::Tensor& t) {
  check_timesteps(t, table.T);
  auto m = torch::tensor(table.mean_loss, torch::kFloat64).clamp_min(kTableFloor).index_select(0, t.to(torch::kInt64) - 1);
  return losses / m.to(losses.scalar_type());
}

torch::Tensor estimated_eval_loss(DiffusionCheckpoint& model, const torch::Tensor& x0, const torch::Tensor& y,
                                  const torch::Tensor& t, const torch::Tensor& noise, const TimestepLossTable& table) {
  require(table.T == model.T(), ErrorCode::InvalidArgument, "table and model disagree on T");
  return rescale_losses(diffusion_noise_loss(model, x0, y, t, noise), table, t);
}

std::vector<double> static_eval_losses(DiffusionCheckpoint& model, const DataView& view,
                                       const StaticEvalOptions& options) {
  const int count = options.max_timesteps > 0 ? std::min(options.max_timesteps, model.T()) : model.T();
  const auto grid = timestep_grid(model.T(), count);
  const auto losses = timestep_loss_matrix(model, view, grid, options.noise_seed);
  std::vector<double> out;
  out.reserve(losses.size());
  for (const auto& row : losses) {
    double s = 0;
    for (double v : row) s += v;
    out.push_back(s / static_cast<double>(row.size()));
  }
  return out;
}

double static_eval_loss(DiffusionCheckpoint& model, const Dataset& data, std::int64_t index,
                        const StaticEvalOptions& options) {
  return static_eval_losses(model, DataView(data, {index}), options).front();
}

}  // namespace unlearn
