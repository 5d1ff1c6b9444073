// unlearn: command-line front end. Exit codes: 0 ok, 2 validation failure, 3 diverged run, 1 other errors.
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <optional>
#include <set>

#include "CLI11.hpp"
#include "json.hpp"
#include "unlearn/checkpoint.hpp"
#include "unlearn/diffusion_eval.hpp"
#include "unlearn/digest.hpp"
#include "unlearn/engine.hpp"
#include "unlearn/evaluation.hpp"
#include "unlearn/harness.hpp"
#include "unlearn/splits.hpp"
#include "unlearn/weighting.hpp"

namespace fs = std::filesystem;
using nlohmann::json;
using namespace unlearn;

namespace {

json read_json_file(const fs::path& path) {
  std::ifstream in(path);
  require(static_cast<bool>(in), ErrorCode::Io, "cannot open " + path.string());
  try {
    return json::parse(in);
  } catch (const json::parse_error& e) {
    fail(ErrorCode::InvalidArgument, path.string() + " is not valid JSON: " + e.what());
  }
}

void write_json_file(const fs::path& path, const json& doc) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream out(path);
  require(static_cast<bool>(out), ErrorCode::Io, "cannot write " + path.string());
  out << doc.dump(2) << '\n';
}

DatasetBundle load_data(const std::string& dataset_file) {
  DatasetSpec spec;
  if (!dataset_file.empty()) spec = read_json_file(dataset_file).get<DatasetSpec>();
  return load_dataset(spec);
}

SplitSpec load_checked_split(const std::string& path, const DatasetBundle& data) {
  auto split = load_split(path);
  require(split.dataset_digest.empty() || split.dataset_digest == data.digest(), ErrorCode::InvalidArgument,
          "split " + path + " was made for a different dataset");
  validate_split(split, data);
  return split;
}

bool is_diffusion(const fs::path& prefix) {
  return read_checkpoint_manifest(prefix).value("kind", std::string("classifier")) == "diffusion";
}

struct Common {
  std::string dataset;
  std::string out;
  std::optional<std::uint64_t> seed;
};

// ---- subcommands

int cmd_pretrain(const std::string& config_file, const std::string& split_file, const Common& c) {
  const auto cfg = read_json_file(config_file);
  const auto data = load_dataset(cfg.value("dataset", json::object()).get<DatasetSpec>());
  std::vector<std::int64_t> indices = data.train.indices();
  if (!split_file.empty()) indices = load_checked_split(split_file, data).retain_indices;
  const DataView view(data.train, indices);
  const auto task = task_from_string(cfg.value("task", std::string("classifier")));
  if (task == Task::Classifier) {
    auto arch = cfg.value("architecture", json::object()).get<ArchitectureSpec>();
    const auto shape = data.train.example_shape();
    arch.in_channels = static_cast<int>(shape[0]);
    arch.image_size = static_cast<int>(shape[1]);
    arch.num_classes = data.num_classes();
    auto train = cfg.value("pretrain", json::object()).get<TrainConfig>();
    if (c.seed) train.seed = *c.seed;
    const DataView test(data.test, data.test.indices());
    auto res = train_classifier(view, arch, train, &test);
    res.checkpoint.train_config_digest = train.digest();
    save_checkpoint(res.checkpoint, c.out);
    res.log.write_csv(c.out + "_log.csv");
    std::cout << res.checkpoint.digest() << '\n';
  } else {
    const auto d = cfg.at("diffusion");
    auto unet = d.value("unet", json::object()).get<UNetSpec>();
    const auto shape = data.train.example_shape();
    unet.in_channels = static_cast<int>(shape[0]);
    unet.image_size = static_cast<int>(shape[1]);
    unet.num_classes = data.num_classes();
    auto train = d.value("train", json::object()).get<DiffusionTrainConfig>();
    if (c.seed) train.seed = *c.seed;
    TrainingLog log;
    auto ckpt = train_diffusion(view, unet, train, &log);
    save_checkpoint(ckpt, c.out);
    log.write_csv(c.out + "_log.csv");
    std::cout << ckpt.digest() << '\n';
  }
  return 0;
}

int cmd_split(const std::string& mode, double fraction, int class_id, const std::string& model, const Common& c) {
  const auto data = load_data(c.dataset);
  const auto m = split_mode_from_string(mode);
  const std::uint64_t seed = c.seed.value_or(0);
  SplitSpec split;
  if (m == SplitMode::Random) {
    split = make_random_forget_split(data, fraction, seed);
  } else if (m == SplitMode::Classwise) {
    split = make_classwise_forget_split(data, class_id);
  } else {
    require(!model.empty(), ErrorCode::InvalidArgument, "difficulty splits need --model");
    auto original = load_classifier_checkpoint(model);
    const DataView train(data.train, data.train.indices());
    const auto ce = per_sample_ce(*original.net, train);
    std::map<std::int64_t, double> losses;
    for (std::size_t i = 0; i < ce.size(); ++i) losses[train.indices()[i]] = ce[i];
    split = make_difficulty_split(losses, fraction, m == SplitMode::DifficultyEasy ? Difficulty::Easy : Difficulty::Hard,
                                  data.test.indices());
    split.seed = seed;
    split.dataset_digest = data.digest();
  }
  save_split(split, c.out);
  std::cout << split.forget_indices.size() << " forget / " << split.retain_indices.size() << " retain\n";
  return 0;
}

int cmd_table(const std::string& model, const std::string& split_file, const std::string& kind, double tau,
              bool exhaustive, int examples, int timesteps, const Common& c) {
  const auto data = load_data(c.dataset);
  const auto split = load_checked_split(split_file, data);
  const DataView forget(data.train, split.forget_indices);
  const std::uint64_t seed = c.seed.value_or(0);
  if (kind == "weights") {
    if (is_diffusion(model)) {
      auto ckpt = load_diffusion_checkpoint(model);
      build_static_table(ckpt, forget, tau, {seed, timesteps}).save_csv(c.out);
    } else {
      auto ckpt = load_classifier_checkpoint(model);
      build_static_table(ckpt, forget, tau).save_csv(c.out);
    }
  } else if (kind == "timesteps") {
    auto ckpt = load_diffusion_checkpoint(model);
    const auto table = exhaustive ? build_reference_table_exhaustive(ckpt, forget, seed)
                                  : fit_reference_table(ckpt, forget, std::min<int>(examples, static_cast<int>(forget.size())),
                                                        std::min(timesteps, ckpt.T()), seed);
    table.save_csv(c.out);
    std::cout << table.evaluations << " evaluations\n";
  } else {
    fail(ErrorCode::InvalidArgument, "--kind must be weights or timesteps");
  }
  return 0;
}

int cmd_run(const std::string& recipe_file, const std::string& split_file, const std::string& model,
            const std::string& table_file, const Common& c) {
  const auto data = load_data(c.dataset);
  const auto split = load_checked_split(split_file, data);
  auto recipe = read_json_file(recipe_file).get<UnlearnRecipe>();
  if (c.seed) recipe.seed = *c.seed;
  const DataView forget(data.train, split.forget_indices);
  const DataView retain(data.train, split.retain_indices);
  std::optional<WeightTable> wt;
  std::optional<TimestepLossTable> tt;
  UnlearnTables tables;
  if (!table_file.empty()) {
    std::ifstream in(table_file);
    std::string header;
    std::getline(in, header);
    if (header.find("\"T\"") != std::string::npos) {
      tt = TimestepLossTable::load_csv(table_file);
      tables.timesteps = &*tt;
    } else {
      wt = WeightTable::load_csv(table_file);
      tables.weights = &*wt;
    }
  }
  UnlearnRun run;
  try {
    if (is_diffusion(model)) {
      run = run_unlearning(load_diffusion_checkpoint(model), forget, retain, recipe, tables);
    } else {
      run = run_unlearning(load_classifier_checkpoint(model), forget, retain, recipe, tables);
    }
  } catch (const UnlearnDivergedError& e) {
    fs::create_directories(c.out);
    write_trajectory_csv(e.partial_trajectory(), fs::path(c.out) / "trajectory.csv");
    throw;
  }
  run.save(c.out);
  std::cout << run.final_digest << '\n';
  return 0;
}

int cmd_eval(const std::string& model, const std::string& retrain, const std::string& split_file,
             const std::string& run_dir, const Common& c) {
  const auto data = load_data(c.dataset);
  const auto split = load_checked_split(split_file, data);
  const DataView forget(data.train, split.forget_indices);
  const DataView retain(data.train, split.retain_indices);
  const DataView test(data.test, split.test_indices);
  auto u = load_classifier_checkpoint(model);
  auto r = load_classifier_checkpoint(retrain);
  double minutes = 0.0;
  if (!run_dir.empty()) {
    std::ifstream in(fs::path(run_dir) / "trajectory.csv");
    std::string line, last;
    while (std::getline(in, line)) {
      if (!line.empty()) last = line;
    }
    if (!last.empty() && last.rfind("epoch", 0) != 0) minutes = std::stod(last.substr(last.rfind(',') + 1)) / 60.0;
  }
  auto report = make_report(measure(*u.net, forget, retain, test), measure(*r.net, forget, retain, test), minutes);
  report.label = fs::path(model).filename().string();
  report.model_digest = u.digest();
  report.retrain_digest = r.digest();
  report.split_digest = split.digest();
  write_json_file(c.out, report);
  std::cout << eval_csv_header() << '\n' << eval_csv_row(report) << '\n';
  return 0;
}

int cmd_analyze(const std::string& original, const std::string& model, const std::string& split_file, const Common& c) {
  const auto data = load_data(c.dataset);
  const auto split = load_checked_split(split_file, data);
  const DataView forget(data.train, split.forget_indices);
  auto o = load_classifier_checkpoint(original);
  auto u = load_classifier_checkpoint(model);
  const auto records = difficulty_scatter(*o.net, *u.net, forget);
  write_difficulty_csv(records, c.out);
  std::vector<double> hit, kept;
  for (const auto& r : records) (r.forgotten ? hit : kept).push_back(r.loss_on_original);
  std::cout << "forgotten " << hit.size() << " kept " << kept.size() << '\n';
  return 0;
}

int cmd_plan(const std::string& plan_file, bool resume, int jobs, bool validate_only, const Common& c) {
  const auto doc = read_json_file(plan_file);
  const auto diagnostics = validate_plan(doc);
  if (!diagnostics.empty()) {
    for (const auto& d : diagnostics) std::cerr << d.field << ": " << d.message << '\n';
    return 2;
  }
  if (validate_only) {
    std::cout << "plan ok\n";
    return 0;
  }
  RunOptions options;
  options.output = c.out;
  options.resume = resume;
  options.jobs = jobs;
  options.seed = c.seed;
  options.log = &std::cerr;
  const auto result = run_plan(parse_plan(doc), options);
  std::cout << result.computed() << " stages computed, " << result.stages.size() - result.computed() << " skipped\n";
  return 0;
}

// Figure-shaped CSVs from a finished classifier plan directory.
int cmd_plot_data(const std::string& root_dir, const Common& c) {
  const fs::path root(root_dir);
  const fs::path out(c.out);
  fs::create_directories(out);
  const auto plan = parse_plan(read_json_file(root / "plan.json"));
  require(plan.task == Task::Classifier, ErrorCode::InvalidArgument, "plot-data expects a classifier plan");
  const auto data = load_dataset(plan.dataset);

  std::ofstream scatter(out / "difficulty_scatter.csv");
  scatter << "recipe,index,loss,forgotten\n";
  std::ofstream easy_hard(out / "easy_hard.csv");
  easy_hard << "recipe,split_mode,ua,ra,ta,mia,avg_gap,tow\n";
  std::ofstream ua_epoch(out / "ua_by_epoch.csv");
  ua_epoch << "recipe,epoch,ua\n";
  std::ofstream set_losses(out / "set_losses.csv");
  set_losses << "model,set,mean_loss\n";

  std::map<std::string, SplitMode> split_modes;
  for (const auto& s : plan.splits) split_modes[s.name] = s.mode;
  auto mean_loss = [](ClassifierNet& net, const DataView& v) {
    const auto l = per_sample_ce(net, v);
    double s = 0;
    for (double x : l) s += x;
    return l.empty() ? 0.0 : s / static_cast<double>(l.size());
  };
  auto original = load_classifier_checkpoint(root / "models" / "original");
  std::set<std::string> retrains_done;
  for (const auto& rp : plan.recipes) {
    const auto split = load_split(root / "splits" / (rp.split + ".json"));
    const DataView forget(data.train, split.forget_indices), retain(data.train, split.retain_indices),
        test(data.test, split.test_indices);
    const auto diff = root / "reports" / (rp.name + "_difficulty.csv");
    if (fs::exists(diff)) {
      std::ifstream in(diff);
      std::string line;
      std::getline(in, line);
      while (std::getline(in, line)) scatter << rp.name << ',' << line << '\n';
    }
    const auto report = read_json_file(root / "reports" / (rp.name + ".json")).get<EvalReport>();
    easy_hard << rp.name << ',' << to_string(split_modes[rp.split]) << ',' << report.metrics.ua << ','
              << report.metrics.ra << ',' << report.metrics.ta << ',' << report.metrics.mia << ',' << report.avg_gap
              << ',' << report.tow << '\n';
    {
      std::ifstream in(root / "runs" / rp.name / "trajectory.csv");
      std::string line;
      std::getline(in, line);
      while (std::getline(in, line)) {
        const auto a = line.find(',');
        const auto b = line.find(',', a + 1);
        ua_epoch << rp.name << ',' << line.substr(0, a) << ',' << line.substr(a + 1, b - a - 1) << '\n';
      }
    }
    auto emit = [&](const std::string& label, ClassifierNet& net) {
      set_losses << label << ",forget," << mean_loss(net, forget) << '\n'
                 << label << ",retain," << mean_loss(net, retain) << '\n'
                 << label << ",test," << mean_loss(net, test) << '\n';
    };
    if (retrains_done.insert(rp.split).second) {
      emit("original/" + rp.split, *original.net);
      const auto rprefix = root / "models" / ("retrain_" + rp.split);
      if (fs::exists(manifest_path(rprefix))) {
        auto r = load_classifier_checkpoint(rprefix);
        emit("retrain/" + rp.split, *r.net);
      }
    }
    auto u = load_classifier_checkpoint(root / "runs" / rp.name / "final");
    emit(rp.name, *u.net);
  }
  std::cout << "wrote " << out.string() << '\n';
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Loss-based reweighting for machine unlearning"};
  app.require_subcommand(1);
  Common common;
  std::int64_t seed_value = 0;
  auto add_common = [&](CLI::App* sub, bool needs_out) {
    sub->add_option("--dataset", common.dataset, "Dataset spec JSON (default: synthetic-cifar 5000/1000)");
    auto* o = sub->add_option("--out", common.out, "Output path");
    if (needs_out) o->required();
    sub->add_option("--seed", seed_value, "Seed");
  };

  std::string config, split_file, mode = "random", model, kind = "weights", recipe, table, retrain, run_dir, plan_file,
                                  original, root_dir;
  double fraction = 0.1, tau = 10.0;
  int class_id = 0, examples = 50, timesteps = 10, jobs = 1;
  bool exhaustive = false, resume = false, validate_only = false;

  auto* pretrain = app.add_subcommand("pretrain", "Train an original model or, with --split, a retrain reference");
  add_common(pretrain, true);
  pretrain->add_option("--config", config, "JSON with dataset, architecture, pretrain (or diffusion)")->required();
  pretrain->add_option("--split", split_file, "Train on this split's retain set only");

  auto* split = app.add_subcommand("split", "Build a forget/retain split");
  add_common(split, true);
  split->add_option("--mode", mode, "random | classwise | difficulty-easy | difficulty-hard");
  split->add_option("--fraction", fraction, "Forget fraction");
  split->add_option("--class", class_id, "Class for classwise mode");
  split->add_option("--model", model, "Original checkpoint (difficulty modes)");

  auto* tablec = app.add_subcommand("table", "Build a static weight table or a timestep reference table");
  add_common(tablec, true);
  tablec->add_option("--model", model, "Original checkpoint prefix")->required();
  tablec->add_option("--split", split_file, "Split file")->required();
  tablec->add_option("--kind", kind, "weights | timesteps");
  tablec->add_option("--tau", tau, "Temperature for weight tables");
  tablec->add_flag("--exhaustive", exhaustive, "Evaluate every (example, t) pair");
  tablec->add_option("--examples", examples, "Sampled examples for the fitted table");
  tablec->add_option("--timesteps", timesteps, "Sampled timesteps (fitted table) or static subsample");

  auto* run = app.add_subcommand("run", "Run one unlearning recipe");
  add_common(run, true);
  run->add_option("--recipe", recipe, "Recipe JSON")->required();
  run->add_option("--split", split_file, "Split file")->required();
  run->add_option("--model", model, "Original checkpoint prefix")->required();
  run->add_option("--table", table, "Weight or timestep table CSV");

  auto* eval = app.add_subcommand("eval", "Evaluate an unlearned classifier against a retrain reference");
  add_common(eval, true);
  eval->add_option("--model", model, "Unlearned checkpoint prefix")->required();
  eval->add_option("--retrain", retrain, "Retrain checkpoint prefix")->required();
  eval->add_option("--split", split_file, "Split file")->required();
  eval->add_option("--run", run_dir, "Run directory, for RTE");

  auto* analyze = app.add_subcommand("analyze", "Loss-vs-forgetting records of the forgetting set");
  add_common(analyze, true);
  analyze->add_option("--original", original, "Original checkpoint prefix")->required();
  analyze->add_option("--model", model, "Unlearned checkpoint prefix")->required();
  analyze->add_option("--split", split_file, "Split file")->required();

  auto* plan = app.add_subcommand("plan", "Validate and run an experiment plan");
  add_common(plan, false);
  plan->add_option("--plan", plan_file, "Plan JSON")->required();
  plan->add_flag("--resume", resume, "Continue an interrupted plan in --out");
  plan->add_option("--jobs", jobs, "Recipes run in parallel");
  plan->add_flag("--validate", validate_only, "Only validate");

  auto* plot = app.add_subcommand("plot-data", "Figure-shaped CSVs from a finished plan directory");
  add_common(plot, true);
  plot->add_option("--root", root_dir, "Plan output directory")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? 0 : 2;
  }
  for (auto* sub : app.get_subcommands()) {
    if (sub->count("--seed") > 0) common.seed = static_cast<std::uint64_t>(seed_value);
  }

  try {
    if (*pretrain) return cmd_pretrain(config, split_file, common);
    if (*split) return cmd_split(mode, fraction, class_id, model, common);
    if (*tablec) return cmd_table(model, split_file, kind, tau, exhaustive, examples, timesteps, common);
    if (*run) return cmd_run(recipe, split_file, model, table, common);
    if (*eval) return cmd_eval(model, retrain, split_file, run_dir, common);
    if (*analyze) return cmd_analyze(original, model, split_file, common);
    if (*plan) return cmd_plan(plan_file, resume, jobs, validate_only, common);
    if (*plot) return cmd_plot_data(root_dir, common);
  } catch (const DivergedError& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 3;
  } catch (const Error& e) {
    std::cerr << "error: " << e.what() << '\n';
    const bool validation = e.code() == ErrorCode::InvalidArgument || e.code() == ErrorCode::Precondition ||
                            e.code() == ErrorCode::InvalidTask || e.code() == ErrorCode::EmptyForgetSet;
    return validation ? 2 : 1;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 1;
  }
  return 0;
}
