#include "unlearn/weighting.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <sstream>

#include "unlearn/classifier.hpp"
#include "unlearn/diffusion.hpp"
#include "unlearn/diffusion_eval.hpp"
#include "unlearn/error.hpp"

namespace unlearn {

const char* to_string(WeightingVariant v) {
  switch (v) {
    case WeightingVariant::Off: return "off";
    case WeightingVariant::Static: return "static";
    case WeightingVariant::Dynamic: return "dynamic";
  }
  return "off";
}

WeightingVariant weighting_variant_from_string(const std::string& s) {
  if (s == "off") return WeightingVariant::Off;
  if (s == "static") return WeightingVariant::Static;
  if (s == "dynamic") return WeightingVariant::Dynamic;
  fail(ErrorCode::InvalidArgument, "unknown weighting variant '" + s + "'");
}

void to_json(nlohmann::json& j, const WeightingConfig& c) {
  j = {{"tau", c.tau}, {"variant", to_string(c.variant)}};
}

void from_json(const nlohmann::json& j, WeightingConfig& c) {
  c.tau = j.value("tau", 10.0);
  c.variant = weighting_variant_from_string(j.value("variant", std::string("off")));
}

double raw_weight(double eval_loss, double tau) {
  require(tau > 0.0, ErrorCode::InvalidArgument, "tau must be positive");
  require(eval_loss >= 0.0, ErrorCode::InvalidArgument, "evaluation loss must be non-negative");
  return std::max(std::exp(-eval_loss / tau), kWeightFloor);
}

std::vector<double> normalize_batch_weights(std::span<const double> raw) {
  require(!raw.empty(), ErrorCode::InvalidArgument, "empty weight batch");
  double sum = 0.0;
  for (double w : raw) {
    require(w > 0.0 && std::isfinite(w), ErrorCode::InvalidArgument, "weights must be positive and finite");
    sum += w;
  }
  std::vector<double> out(raw.begin(), raw.end());
  for (double& w : out) w /= sum;
  return out;
}

std::vector<double> dynamic_batch_weights(std::span<const double> eval_losses, double tau) {
  require(!eval_losses.empty(), ErrorCode::InvalidArgument, "empty weight batch");
  require(tau > 0.0, ErrorCode::InvalidArgument, "tau must be positive");
  double lowest = eval_losses[0];
  for (double l : eval_losses) {
    require(std::isfinite(l), ErrorCode::InvalidArgument, "non-finite evaluation loss");
    lowest = std::min(lowest, l);
  }
  std::vector<double> shifted;
  shifted.reserve(eval_losses.size());
  for (double l : eval_losses) shifted.push_back(std::max(std::exp(-(l - lowest) / tau), kWeightFloor));
  return normalize_batch_weights(shifted);
}

torch::Tensor weights_tensor(std::span<const double> weights) {
  return torch::tensor(std::vector<double>(weights.begin(), weights.end()), torch::kFloat64);
}

const WeightEntry& WeightTable::at(std::int64_t index) const {
  auto it = entries.find(index);
  require(it != entries.end(), ErrorCode::IncompleteTable, "no weight for example " + std::to_string(index));
  return it->second;
}

std::vector<double> WeightTable::batch_weights(std::span<const std::int64_t> indices) const {
  std::vector<double> losses;
  losses.reserve(indices.size());
  for (auto i : indices) losses.push_back(at(i).reference_loss);
  return dynamic_batch_weights(losses, tau);
}

void WeightTable::save_csv(const std::filesystem::path& path) const {
  std::ofstream out(path);
  require(static_cast<bool>(out), ErrorCode::Io, "cannot write " + path.string());
  nlohmann::json header = {{"tau", tau}, {"variant", "static"}, {"model_digest", source_model_digest}};
  out << "# " << header.dump() << '\n' << "index,reference_loss,raw_weight\n";
  out.precision(17);
  for (const auto& [idx, e] : entries) out << idx << ',' << e.reference_loss << ',' << e.raw_weight << '\n';
}

WeightTable WeightTable::load_csv(const std::filesystem::path& path) {
  std::ifstream in(path);
  require(static_cast<bool>(in), ErrorCode::Io, "cannot open " + path.string());
  WeightTable t;
  std::string line;
  std::getline(in, line);
  require(line.rfind("# ", 0) == 0, ErrorCode::Io, "weight table lacks JSON header");
  const auto header = nlohmann::json::parse(line.substr(2));
  t.tau = header.at("tau").get<double>();
  t.source_model_digest = header.value("model_digest", "");
  std::getline(in, line);
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    std::stringstream ss(line);
    std::string a, b, c;
    std::getline(ss, a, ',');
    std::getline(ss, b, ',');
    std::getline(ss, c, ',');
    t.entries[std::stoll(a)] = {std::stod(b), std::stod(c)};
  }
  return t;
}

namespace {

WeightTable table_from_losses(const std::vector<std::int64_t>& indices, const std::vector<double>& losses,
                              double tau, std::string digest) {
  require(tau > 0.0, ErrorCode::InvalidArgument, "tau must be positive");
  WeightTable t;
  t.tau = tau;
  t.source_model_digest = std::move(digest);
  for (std::size_t i = 0; i < indices.size(); ++i) {
    const double loss = std::max(losses[i], 0.0);
    t.entries[indices[i]] = {loss, raw_weight(loss, tau)};
  }
  return t;
}

}  // namespace

WeightTable build_static_table(ClassifierCheckpoint& original, const DataView& forget, double tau) {
  const auto losses = per_sample_ce(*original.net, forget);
  return table_from_losses(forget.indices(), losses, tau, original.digest());
}

WeightTable build_static_table(DiffusionCheckpoint& original, const DataView& forget, double tau,
                               const StaticEvalOptions& options) {
  const auto losses = static_eval_losses(original, forget, options);
  return table_from_losses(forget.indices(), losses, tau, original.digest());
}

void require_complete(const WeightTable& table, std::span<const std::int64_t> forget_indices) {
  for (auto i : forget_indices) {
    require(table.entries.count(i) == 1, ErrorCode::IncompleteTable,
            "weight table lacks forgetting example " + std::to_string(i));
  }
}

}  // namespace unlearn
