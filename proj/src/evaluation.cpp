#include "unlearn/evaluation.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <limits>
#include <sstream>

#include "unlearn/error.hpp"

namespace unlearn {

double accuracy(ClassifierNet& net, const DataView& view) {
  require(!view.empty(), ErrorCode::InvalidArgument, "accuracy of an empty view");
  const auto pred = predict_labels(net, view.features());
  return 100.0 * pred.eq(view.labels()).sum().item<double>() / static_cast<double>(view.size());
}

double tow_from_gaps(double gap_f, double gap_r, double gap_t) {
  return 100.0 * (1.0 - std::abs(gap_f) / 100.0) * (1.0 - std::abs(gap_r) / 100.0) * (1.0 - std::abs(gap_t) / 100.0);
}

double tow(const AccuracyTriple& u, const AccuracyTriple& r) {
  return tow_from_gaps(u.ua - r.ua, u.ra - r.ra, u.ta - r.ta);
}

double avg_gap(const std::array<double, 4>& gaps) {
  double s = 0;
  for (double g : gaps) s += std::abs(g);
  return s / 4.0;
}

MiaResult mia_from_losses(std::vector<double> member, std::vector<double> non_member,
                          const std::vector<double>& forget) {
  require(!member.empty() && !non_member.empty() && !forget.empty(), ErrorCode::InvalidArgument,
          "membership inference needs members, non-members and forgetting losses");
  std::sort(member.begin(), member.end());
  std::sort(non_member.begin(), non_member.end());
  const double nm = static_cast<double>(member.size());
  const double nn = static_cast<double>(non_member.size());

  // Candidate thresholds are the observed losses themselves, so the attacker
  // depends only on the rank order of all losses.
  std::vector<double> candidates(member);
  candidates.insert(candidates.end(), non_member.begin(), non_member.end());
  std::sort(candidates.begin(), candidates.end());
  candidates.erase(std::unique(candidates.begin(), candidates.end()), candidates.end());

  MiaResult best;
  best.threshold = -std::numeric_limits<double>::infinity();
  best.balanced_accuracy = 0.5;
  for (double v : candidates) {
    const double tpr = static_cast<double>(std::upper_bound(member.begin(), member.end(), v) - member.begin()) / nm;
    const double tnr =
        1.0 - static_cast<double>(std::upper_bound(non_member.begin(), non_member.end(), v) - non_member.begin()) / nn;
    const double bal = 0.5 * (tpr + tnr);
    if (bal > best.balanced_accuracy + 1e-15) {
      best.balanced_accuracy = bal;
      best.threshold = v;
    }
  }
  if (!(best.balanced_accuracy > 0.5)) {
    best.degenerate = true;
    best.score = 50.0;
    return best;
  }
  std::int64_t called_non_member = 0;
  for (double l : forget) called_non_member += l > best.threshold ? 1 : 0;
  best.score = 100.0 * static_cast<double>(called_non_member) / static_cast<double>(forget.size());
  return best;
}

MiaResult mia_score(ClassifierNet& net, const DataView& retain, const DataView& test, const DataView& forget) {
  require(!retain.empty() && !test.empty() && !forget.empty(), ErrorCode::InvalidArgument,
          "membership inference needs non-empty views");
  return mia_from_losses(per_sample_ce(net, retain), per_sample_ce(net, test), per_sample_ce(net, forget));
}

double generation_ua(const ImageSampler& sampler, int forgotten_class, ClassifierNet& external, int count,
                     std::uint64_t seed) {
  require(count >= 1, ErrorCode::InvalidArgument, "generation UA needs at least one sample");
  const auto images = sampler(count, seed);
  require(images.size(0) == count, ErrorCode::ContractViolation, "sampler returned the wrong number of images");
  const auto pred = predict_labels(external, images);
  return 100.0 * pred.eq(forgotten_class).sum().item<double>() / static_cast<double>(count);
}

double generation_ua(DiffusionCheckpoint& model, int class_id, ClassifierNet& external, int count, std::uint64_t seed,
                     double guidance_scale) {
  return generation_ua([&](int n, std::uint64_t s) { return sample_diffusion(model, class_id, n, guidance_scale, s); },
                       class_id, external, count, seed);
}

std::vector<DifficultyRecord> difficulty_scatter(ClassifierNet& original, ClassifierNet& unlearned,
                                                 const DataView& forget) {
  const auto losses = per_sample_ce(original, forget);
  std::vector<DifficultyRecord> out;
  if (forget.empty()) return out;
  const auto pred = predict_labels(unlearned, forget.features());
  const auto wrong = pred.ne(forget.labels()).contiguous();
  const bool* w = wrong.data_ptr<bool>();
  for (std::size_t i = 0; i < losses.size(); ++i) {
    out.push_back({forget.indices()[i], losses[i], w[i]});
  }
  return out;
}

void write_difficulty_csv(const std::vector<DifficultyRecord>& records, const std::filesystem::path& path) {
  std::ofstream out(path);
  require(static_cast<bool>(out), ErrorCode::Io, "cannot write " + path.string());
  out.precision(10);
  out << "index,loss,forgotten\n";
  for (const auto& r : records) out << r.index << ',' << r.loss_on_original << ',' << (r.forgotten ? 1 : 0) << '\n';
}

double rte(const UnlearnRun& run) {
  return run.trajectory.empty() ? 0.0 : run.trajectory.back().wall_seconds / 60.0;
}

ModelMetrics measure(ClassifierNet& net, const DataView& forget, const DataView& retain, const DataView& test) {
  ModelMetrics m;
  m.ua = accuracy(net, forget);
  m.ra = accuracy(net, retain);
  m.ta = accuracy(net, test);
  const auto mia = mia_score(net, retain, test, forget);
  m.mia = mia.score;
  m.mia_degenerate = mia.degenerate;
  return m;
}

EvalReport make_report(const ModelMetrics& u, const ModelMetrics& r, double rte_minutes) {
  EvalReport rep;
  rep.metrics = u;
  rep.reference = r;
  rep.gaps = {std::abs(u.ua - r.ua), std::abs(u.ra - r.ra), std::abs(u.ta - r.ta), std::abs(u.mia - r.mia)};
  rep.tow = tow_from_gaps(rep.gaps[0], rep.gaps[1], rep.gaps[2]);
  rep.avg_gap = avg_gap(rep.gaps);
  rep.rte_minutes = rte_minutes;
  return rep;
}

namespace {

nlohmann::json metrics_json(const ModelMetrics& m) {
  return {{"ua", m.ua}, {"ra", m.ra}, {"ta", m.ta}, {"mia", m.mia}, {"mia_degenerate", m.mia_degenerate}};
}

ModelMetrics metrics_from(const nlohmann::json& j) {
  return {j.at("ua"), j.at("ra"), j.at("ta"), j.at("mia"), j.value("mia_degenerate", false)};
}

}  // namespace

void to_json(nlohmann::json& j, const EvalReport& r) {
  j = {{"label", r.label},
       {"ua", r.metrics.ua},
       {"ra", r.metrics.ra},
       {"ta", r.metrics.ta},
       {"mia", r.metrics.mia},
       {"mia_degenerate", r.metrics.mia_degenerate},
       {"reference", metrics_json(r.reference)},
       {"gaps", {{"ua", r.gaps[0]}, {"ra", r.gaps[1]}, {"ta", r.gaps[2]}, {"mia", r.gaps[3]}}},
       {"tow", r.tow},
       {"avg_gap", r.avg_gap},
       {"rte_minutes", r.rte_minutes},
       {"provenance",
        {{"model_digest", r.model_digest}, {"retrain_digest", r.retrain_digest}, {"split_digest", r.split_digest}}}};
}

void from_json(const nlohmann::json& j, EvalReport& r) {
  r.label = j.value("label", "");
  r.metrics = metrics_from(j);
  r.reference = metrics_from(j.at("reference"));
  const auto& g = j.at("gaps");
  r.gaps = {g.at("ua"), g.at("ra"), g.at("ta"), g.at("mia")};
  r.tow = j.at("tow");
  r.avg_gap = j.at("avg_gap");
  r.rte_minutes = j.value("rte_minutes", 0.0);
  const auto& p = j.at("provenance");
  r.model_digest = p.value("model_digest", "");
  r.retrain_digest = p.value("retrain_digest", "");
  r.split_digest = p.value("split_digest", "");
}

std::string eval_csv_header() { return "label,ua,ra,ta,mia,gap_ua,gap_ra,gap_ta,gap_mia,tow,avg_gap,model_digest"; }

std::string eval_csv_row(const EvalReport& r) {
  std::ostringstream out;
  out.precision(10);
  out << r.label << ',' << r.metrics.ua << ',' << r.metrics.ra << ',' << r.metrics.ta << ',' << r.metrics.mia << ','
      << r.gaps[0] << ',' << r.gaps[1] << ',' << r.gaps[2] << ',' << r.gaps[3] << ',' << r.tow << ',' << r.avg_gap
      << ',' << r.model_digest;
  return out.str();
}

EasyHardResult easy_hard_comparison(const DatasetBundle& data, const ClassifierCheckpoint& original,
                                    const std::map<std::int64_t, double>& loss_table, const UnlearnRecipe& recipe,
                                    double fraction, const TrainConfig& retrain_config) {
  EasyHardResult result;
  const auto test_indices = data.test.indices();
  const DataView test(data.test, test_indices);
  auto one = [&](Difficulty mode, SplitSpec& split) {
    split = make_difficulty_split(loss_table, fraction, mode, test_indices);
    split.dataset_digest = data.digest();
    validate_split(split, data);
    const DataView forget(data.train, split.forget_indices);
    const DataView retain(data.train, split.retain_indices);
    auto retrained = train_classifier(retain, original.arch, retrain_config).checkpoint;
    auto run = run_unlearning(original, forget, retain, recipe);
    auto& unlearned = *run.classifier;
    auto report = make_report(measure(*unlearned.net, forget, retain, test),
                              measure(*retrained.net, forget, retain, test), rte(run));
    report.label = mode == Difficulty::Easy ? "easy" : "hard";
    report.model_digest = run.final_digest;
    report.retrain_digest = retrained.digest();
    report.split_digest = split.digest();
    return report;
  };
  result.easy = one(Difficulty::Easy, result.easy_split);
  result.hard = one(Difficulty::Hard, result.hard_split);
  return result;
}

}  // namespace unlearn
