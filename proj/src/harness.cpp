#include "unlearn/harness.hpp"

#include <algorithm>
#include <fstream>
#include <future>
#include <iostream>
#include <mutex>
#include <set>
#include <sstream>

#include "unlearn/checkpoint.hpp"
#include "unlearn/diffusion_eval.hpp"
#include "unlearn/digest.hpp"
#include "unlearn/engine.hpp"
#include "unlearn/error.hpp"
#include "unlearn/evaluation.hpp"
#include "unlearn/weighting.hpp"

namespace unlearn {

namespace fs = std::filesystem;
using nlohmann::json;

// ---------------------------------------------------------------- plan parsing

namespace {

json split_plan_json(const SplitPlan& s) {
  json j = {{"name", s.name}, {"mode", to_string(s.mode)}};
  if (s.mode == SplitMode::Classwise) {
    j["class_id"] = s.class_id;
  } else {
    j["fraction"] = s.fraction;
  }
  if (s.retrain) j["retrain"] = *s.retrain;
  return j;
}

json recipe_plan_json(const RecipePlan& r) {
  json j = r.recipe;
  j["name"] = r.name;
  j["split"] = r.split;
  if (!r.explicit_seed) j.erase("seed");
  return j;
}

class Checker {
 public:
  explicit Checker(std::vector<Diagnostic>& out) : out_(out) {}

  void operator()(bool ok, const std::string& field, const std::string& message) {
    if (!ok) out_.push_back({field, message});
  }

  // Runs `fn`, turning any conversion error into a diagnostic on `field`.
  template <typename Fn>
  void guard(const std::string& field, Fn&& fn) {
    try {
      fn();
    } catch (const std::exception& e) {
      out_.push_back({field, e.what()});
    }
  }

 private:
  std::vector<Diagnostic>& out_;
};

const std::set<std::string> kSources = {"synthetic-cifar", "synthetic-shapes", "raw", "cifar10-bin"};

}  // namespace

std::string ExperimentPlan::digest() const { return json_digest(json(*this)); }

void to_json(json& j, const ExperimentPlan& p) {
  j = {{"name", p.name},
       {"seed", p.seed},
       {"task", to_string(p.task)},
       {"dataset", p.dataset},
       {"architecture", p.architecture},
       {"pretrain", p.pretrain},
       {"retrain", p.retrain},
       {"evaluation", {{"mia", p.evaluation.mia}, {"difficulty", p.evaluation.difficulty}}}};
  j["pretrain"].erase("seed");
  j["splits"] = json::array();
  for (const auto& s : p.splits) j["splits"].push_back(split_plan_json(s));
  j["recipes"] = json::array();
  for (const auto& r : p.recipes) j["recipes"].push_back(recipe_plan_json(r));
  if (p.diffusion) {
    const auto& d = *p.diffusion;
    json dj = {{"unet", d.unet},
               {"train", d.train},
               {"external_architecture", d.external_arch},
               {"external", d.external},
               {"guidance_scale", d.guidance_scale},
               {"samples", d.samples}};
    dj["train"].erase("seed");
    dj["external"].erase("seed");
    if (d.table) {
      dj["table"] = {{"exhaustive", d.table->exhaustive},
                     {"num_examples", d.table->num_examples},
                     {"num_timesteps", d.table->num_timesteps},
                     {"static_max_timesteps", d.table->static_max_timesteps}};
    }
    j["diffusion"] = dj;
  }
  if (!p.output.empty()) j["output"] = p.output;
}

std::vector<Diagnostic> validate_plan(const json& doc) {
  std::vector<Diagnostic> out;
  Checker check(out);
  if (!doc.is_object()) {
    out.push_back({"", "plan must be a JSON object"});
    return out;
  }

  Task task = Task::Classifier;
  check.guard("task", [&] { task = task_from_string(doc.value("task", std::string("classifier"))); });
  check.guard("seed", [&] { (void)doc.value("seed", std::uint64_t{0}); });

  check(doc.contains("dataset"), "dataset", "missing dataset section");
  int num_classes = 10;
  if (doc.contains("dataset")) {
    check.guard("dataset", [&] {
      const auto spec = doc.at("dataset").get<DatasetSpec>();
      check(kSources.count(spec.source) == 1, "dataset.source", "unknown source '" + spec.source + "'");
      check(spec.train_size > 0, "dataset.train_size", "must be positive");
      check(spec.test_size > 0, "dataset.test_size", "must be positive");
      check(spec.image_size >= 4, "dataset.image_size", "must be at least 4");
      check((spec.source != "raw" && spec.source != "cifar10-bin") || !spec.path.empty(), "dataset.path",
            "file-backed sources need a path");
    });
  }

  if (task == Task::Classifier) {
    check.guard("architecture", [&] {
      const auto arch = doc.value("architecture", json::object()).get<ArchitectureSpec>();
      check(arch.id == "small-cnn" || arch.id == "resnet18", "architecture.id", "unknown architecture '" + arch.id + "'");
      check(arch.width >= 1, "architecture.width", "must be positive");
      check(arch.num_classes >= 2, "architecture.num_classes", "needs at least two classes");
      num_classes = arch.num_classes;
    });
    check.guard("pretrain", [&] {
      const auto cfg = doc.value("pretrain", json::object()).get<TrainConfig>();
      check(cfg.epochs >= 0, "pretrain.epochs", "must be non-negative");
      check(cfg.lr > 0, "pretrain.lr", "must be positive");
      check(cfg.batch_size >= 1, "pretrain.batch_size", "must be positive");
    });
  } else {
    check(doc.contains("diffusion"), "diffusion", "diffusion task needs a diffusion section");
    if (doc.contains("diffusion")) {
      const auto& d = doc.at("diffusion");
      check.guard("diffusion.unet", [&] {
        const auto u = d.value("unet", json::object()).get<UNetSpec>();
        check(u.base_channels >= 8 && u.base_channels % 8 == 0, "diffusion.unet.base_channels",
              "must be a positive multiple of 8");
        check(u.image_size % 4 == 0, "diffusion.unet.image_size", "must be divisible by 4");
        num_classes = u.num_classes;
      });
      check.guard("diffusion.train", [&] {
        const auto c = d.value("train", json::object()).get<DiffusionTrainConfig>();
        check(c.T >= 1, "diffusion.train.T", "must be positive");
        check(c.steps >= 0, "diffusion.train.steps", "must be non-negative");
        check(c.cond_dropout >= 0 && c.cond_dropout < 1, "diffusion.train.cond_dropout", "must lie in [0, 1)");
      });
      check.guard("diffusion.samples", [&] { check(d.value("samples", 100) >= 1, "diffusion.samples", "must be positive"); });
      if (d.contains("table")) {
        check.guard("diffusion.table", [&] {
          const auto& t = d.at("table");
          check(t.value("num_examples", 50) >= 1, "diffusion.table.num_examples", "must be positive");
          check(t.value("num_timesteps", 10) >= 1, "diffusion.table.num_timesteps", "must be positive");
        });
      }
    }
  }

  std::set<std::string> split_names;
  if (!doc.contains("splits") || !doc.at("splits").is_array() || doc.at("splits").empty()) {
    out.push_back({"splits", "at least one split is required"});
  } else {
    for (std::size_t i = 0; i < doc.at("splits").size(); ++i) {
      const auto& s = doc.at("splits")[i];
      const auto field = "splits[" + std::to_string(i) + "]";
      check.guard(field, [&] {
        const auto name = s.at("name").get<std::string>();
        check(split_names.insert(name).second, field + ".name", "duplicate split name '" + name + "'");
        const auto mode = split_mode_from_string(s.at("mode").get<std::string>());
        if (mode == SplitMode::Classwise) {
          const int c = s.at("class_id").get<int>();
          check(c >= 0 && c < num_classes, field + ".class_id", "class outside [0, C)");
        } else {
          const double f = s.at("fraction").get<double>();
          check(f > 0 && f < 1, field + ".fraction", "must lie in (0, 1)");
        }
        check(task == Task::Classifier || mode == SplitMode::Classwise || mode == SplitMode::Random,
              field + ".mode", "difficulty splits are classifier-only");
        check(!s.contains("retrain") || s.at("retrain").is_boolean(), field + ".retrain", "must be true or false");
      });
    }
  }

  std::set<std::string> recipe_names;
  if (!doc.contains("recipes") || !doc.at("recipes").is_array()) {
    out.push_back({"recipes", "recipes must be an array"});
  } else {
    const bool has_table = doc.contains("diffusion") && doc.at("diffusion").contains("table");
    for (std::size_t i = 0; i < doc.at("recipes").size(); ++i) {
      const auto& r = doc.at("recipes")[i];
      const auto field = "recipes[" + std::to_string(i) + "]";
      check.guard(field, [&] {
        const auto name = r.at("name").get<std::string>();
        check(recipe_names.insert(name).second, field + ".name", "duplicate recipe name '" + name + "'");
        const auto split = r.at("split").get<std::string>();
        check(split_names.count(split) == 1, field + ".split", "unknown split '" + split + "'");
      });
      check.guard(field + ".method", [&] { method_from_string(r.value("method", std::string("GAR"))); });
      if (r.contains("weighting")) {
        check.guard(field + ".weighting", [&] {
          const auto& w = r.at("weighting");
          if (w.contains("tau")) check(w.at("tau").get<double>() > 0, field + ".weighting.tau", "tau must be positive");
          weighting_variant_from_string(w.value("variant", std::string("off")));
        });
      }
      check.guard(field, [&] {
        auto copy = r;
        if (copy.contains("weighting")) copy["weighting"]["tau"] = 1.0;  // reported above
        copy["task"] = to_string(task);
        const auto recipe = copy.get<UnlearnRecipe>();
        check(recipe.alpha >= 0, field + ".alpha", "must be non-negative");
        check(recipe.epochs >= 0, field + ".epochs", "must be non-negative");
        check(recipe.lr > 0, field + ".lr", "must be positive");
        check(recipe.batch_size >= 1, field + ".batch_size", "must be positive");
        check(recipe.mask_fraction > 0 && recipe.mask_fraction <= 1, field + ".mask_fraction", "must lie in (0, 1]");
        check(!r.contains("task") || r.at("task").get<std::string>() == to_string(task), field + ".task",
              "recipe task differs from plan task");
        if (task == Task::Diffusion) {
          check(recipe.random_labels(), field + ".method", "diffusion recipes must be RL or SalUn");
          check(recipe.weighting.variant == WeightingVariant::Off || has_table, field + ".weighting.variant",
                "weighted diffusion recipe needs a diffusion.table stage");
        }
      });
    }
  }
  return out;
}

std::vector<Diagnostic> validate_plan(const ExperimentPlan& plan) { return validate_plan(json(plan)); }

ExperimentPlan parse_plan(const json& doc) {
  const auto diagnostics = validate_plan(doc);
  if (!diagnostics.empty()) {
    std::ostringstream msg;
    msg << "plan does not validate:";
    for (const auto& d : diagnostics) msg << "\n  " << d.field << ": " << d.message;
    fail(ErrorCode::InvalidArgument, msg.str());
  }
  ExperimentPlan p;
  p.name = doc.value("name", p.name);
  p.seed = doc.value("seed", std::uint64_t{0});
  p.task = task_from_string(doc.value("task", std::string("classifier")));
  p.dataset = doc.at("dataset").get<DatasetSpec>();
  p.architecture = doc.value("architecture", json::object()).get<ArchitectureSpec>();
  p.pretrain = doc.value("pretrain", json::object()).get<TrainConfig>();
  p.retrain = doc.value("retrain", true);
  p.output = doc.value("output", std::string());
  const auto ev = doc.value("evaluation", json::object());
  p.evaluation.mia = ev.value("mia", true);
  p.evaluation.difficulty = ev.value("difficulty", true);
  for (const auto& s : doc.at("splits")) {
    SplitPlan sp;
    sp.name = s.at("name");
    sp.mode = split_mode_from_string(s.at("mode"));
    sp.fraction = s.value("fraction", 0.1);
    sp.class_id = s.value("class_id", 0);
    if (s.contains("retrain")) sp.retrain = s.at("retrain").get<bool>();
    p.splits.push_back(sp);
  }
  for (const auto& r : doc.at("recipes")) {
    RecipePlan rp;
    rp.name = r.at("name");
    rp.split = r.at("split");
    auto copy = r;
    copy["task"] = to_string(p.task);
    rp.recipe = copy.get<UnlearnRecipe>();
    rp.explicit_seed = r.contains("seed");
    p.recipes.push_back(rp);
  }
  if (doc.contains("diffusion")) {
    const auto& d = doc.at("diffusion");
    DiffusionPlan dp;
    dp.unet = d.value("unet", json::object()).get<UNetSpec>();
    dp.train = d.value("train", json::object()).get<DiffusionTrainConfig>();
    dp.external_arch = d.value("external_architecture", json::object()).get<ArchitectureSpec>();
    dp.external = d.value("external", json::object()).get<TrainConfig>();
    dp.guidance_scale = d.value("guidance_scale", 2.0);
    dp.samples = d.value("samples", 100);
    if (d.contains("table")) {
      TablePlan t;
      const auto& tj = d.at("table");
      t.exhaustive = tj.value("exhaustive", false);
      t.num_examples = tj.value("num_examples", 50);
      t.num_timesteps = tj.value("num_timesteps", 10);
      t.static_max_timesteps = tj.value("static_max_timesteps", 0);
      dp.table = t;
    }
    p.diffusion = dp;
  }
  return p;
}

ExperimentPlan load_plan(const fs::path& path) {
  std::ifstream in(path);
  require(static_cast<bool>(in), ErrorCode::Io, "cannot open plan " + path.string());
  json doc;
  try {
    doc = json::parse(in);
  } catch (const json::parse_error& e) {
    fail(ErrorCode::InvalidArgument, "plan is not valid JSON: " + std::string(e.what()));
  }
  return parse_plan(doc);
}

std::uint64_t plan_seed(const ExperimentPlan& plan, const std::string& stage, std::uint64_t counter) {
  return derive_seed(plan.seed, stage, counter);
}

int PlanResult::computed() const {
  return static_cast<int>(std::count_if(stages.begin(), stages.end(), [](const auto& s) { return s.computed; }));
}

int PlanResult::computed(const std::string& kind) const {
  return static_cast<int>(
      std::count_if(stages.begin(), stages.end(), [&](const auto& s) { return s.computed && s.kind == kind; }));
}

// ---------------------------------------------------------------- stage store

namespace {

std::string relative_to(const fs::path& root, const fs::path& p) { return fs::relative(p, root).generic_string(); }

void write_text(const fs::path& path, const std::string& text) {
  fs::create_directories(path.parent_path());
  const auto tmp = path.string() + ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary);
    require(static_cast<bool>(out), ErrorCode::Io, "cannot write " + path.string());
    out << text;
  }
  fs::rename(tmp, path);
}

json read_json(const fs::path& path) {
  std::ifstream in(path);
  require(static_cast<bool>(in), ErrorCode::Io, "cannot open " + path.string());
  return json::parse(in);
}

class StageStore {
 public:
  StageStore(fs::path root, std::string plan_digest, bool resume, std::ostream* log)
      : root_(std::move(root)), log_(log) {
    const auto path = root_ / "state.json";
    if (fs::exists(path)) {
      state_ = read_json(path);
      const auto status = state_.value("status", std::string("complete"));
      require(status == "complete" || resume, ErrorCode::Precondition,
              "output directory holds an unfinished plan (status " + status + "); rerun with --resume");
    }
    if (!state_.contains("stages")) state_["stages"] = json::object();
    state_["plan_digest"] = plan_digest;
    state_["status"] = "running";
    save();
  }

  const fs::path& root() const { return root_; }

  // True when the stage ran before with the same inputs and its outputs are intact.
  bool lookup(const std::string& name, const std::string& kind, const std::string& input_digest, json* meta) {
    std::lock_guard lock(mutex_);
    const auto& stages = state_["stages"];
    bool hit = false;
    if (stages.contains(name) && stages[name].value("input_digest", "") == input_digest) {
      hit = true;
      for (const auto& [rel, sha] : stages[name].at("outputs").items()) {
        const auto p = root_ / rel;
        if (!fs::exists(p) || sha256_file(p) != sha.get<std::string>()) {
          hit = false;
          break;
        }
      }
      if (hit && meta != nullptr) *meta = stages[name].value("meta", json::object());
    }
    records_.push_back({name, kind, !hit});
    if (log_ != nullptr) *log_ << (hit ? "[skip] " : "[run]  ") << name << std::endl;
    return hit;
  }

  void record(const std::string& name, const std::string& kind, const std::string& input_digest,
              const std::vector<fs::path>& outputs, const json& meta) {
    json outs = json::object();
    for (const auto& p : outputs) outs[relative_to(root_, p)] = sha256_file(p);
    std::lock_guard lock(mutex_);
    state_["stages"][name] = {{"kind", kind}, {"input_digest", input_digest}, {"outputs", outs}, {"meta", meta}};
    save();
  }

  void finish(const std::string& status) {
    std::lock_guard lock(mutex_);
    state_["status"] = status;
    save();
  }

  const json& stages() const { return state_["stages"]; }
  std::vector<StageRecord> records() const { return records_; }

 private:
  void save() { write_text(root_ / "state.json", state_.dump(2) + "\n"); }

  fs::path root_;
  std::ostream* log_;
  json state_;
  std::mutex mutex_;
  std::vector<StageRecord> records_;
};

std::vector<fs::path> files_under(const fs::path& dir) {
  std::vector<fs::path> out;
  if (!fs::exists(dir)) return out;
  for (const auto& e : fs::recursive_directory_iterator(dir)) {
    if (e.is_regular_file()) out.push_back(e.path());
  }
  std::sort(out.begin(), out.end());
  return out;
}

std::vector<fs::path> checkpoint_files(const fs::path& prefix) { return {blob_path(prefix), manifest_path(prefix)}; }

void write_index(const fs::path& root, const StageStore& store, const std::string& plan_digest) {
  std::map<std::string, std::string> owner;
  for (const auto& [name, st] : store.stages().items()) {
    for (const auto& [rel, sha] : st.at("outputs").items()) owner[rel] = name;
  }
  json artifacts = json::array();
  for (const auto& p : files_under(root)) {
    const auto rel = relative_to(root, p);
    if (rel == "index.json" || rel == "state.json") continue;
    json a = {{"path", rel}, {"sha256", sha256_file(p)}};
    if (owner.count(rel)) a["stage"] = owner[rel];
    artifacts.push_back(a);
  }
  write_text(root / "index.json", json{{"plan_digest", plan_digest}, {"artifacts", artifacts}}.dump(2) + "\n");
}

// ---------------------------------------------------------------- pipelines

struct Context {
  const ExperimentPlan& plan;
  StageStore& store;
  const DatasetBundle& data;
  std::string data_digest;
  fs::path root;
};

struct SplitArtifact {
  SplitSpec spec;
  std::string digest;
};

std::string stage_digest(const json& inputs) { return json_digest(inputs); }

TrainConfig seeded(TrainConfig c, std::uint64_t seed) {
  c.seed = seed;
  return c;
}

UnlearnRecipe seeded_recipe(const ExperimentPlan& plan, std::size_t i) {
  auto r = plan.recipes[i].recipe;
  if (!plan.recipes[i].explicit_seed) r.seed = plan_seed(plan, "recipe", i);
  return r;
}

ArchitectureSpec classifier_arch(const ArchitectureSpec& a, const DatasetBundle& data) {
  auto arch = a;
  const auto shape = data.train.example_shape();
  arch.in_channels = static_cast<int>(shape[0]);
  arch.image_size = static_cast<int>(shape[1]);
  arch.num_classes = data.num_classes();
  return arch;
}

SplitArtifact ensure_split(Context& ctx, std::size_t i, const std::function<std::map<std::int64_t, double>()>& losses,
                           const std::string& original_digest) {
  const auto& sp = ctx.plan.splits[i];
  const auto path = ctx.root / "splits" / (sp.name + ".json");
  const auto seed = plan_seed(ctx.plan, "split", i);
  const bool difficulty = sp.mode == SplitMode::DifficultyEasy || sp.mode == SplitMode::DifficultyHard;
  const auto input = stage_digest({{"dataset", ctx.data_digest},
                                   {"split", split_plan_json(sp)},
                                   {"seed", seed},
                                   {"original", difficulty ? original_digest : ""}});
  const auto name = "split/" + sp.name;
  if (!ctx.store.lookup(name, "split", input, nullptr)) {
    SplitSpec spec;
    switch (sp.mode) {
      case SplitMode::Random: spec = make_random_forget_split(ctx.data, sp.fraction, seed); break;
      case SplitMode::Classwise: spec = make_classwise_forget_split(ctx.data, sp.class_id); break;
      case SplitMode::DifficultyEasy:
      case SplitMode::DifficultyHard:
        spec = make_difficulty_split(losses(), sp.fraction,
                                     sp.mode == SplitMode::DifficultyEasy ? Difficulty::Easy : Difficulty::Hard,
                                     ctx.data.test.indices());
        spec.seed = seed;
        spec.dataset_digest = ctx.data_digest;
        break;
    }
    validate_split(spec, ctx.data);
    fs::create_directories(path.parent_path());
    save_split(spec, path);
    ctx.store.record(name, "split", input, {path}, json::object());
  }
  auto spec = load_split(path);
  return {spec, spec.digest()};
}

void write_lines(const fs::path& path, const std::string& header, const std::vector<std::string>& rows) {
  std::string text = header + "\n";
  for (const auto& r : rows) text += r + "\n";
  write_text(path, text);
}

PlanResult run_classifier_plan(Context& ctx, const RunOptions& options) {
  const auto& plan = ctx.plan;
  const auto arch = classifier_arch(plan.architecture, ctx.data);
  const auto pretrain_cfg = seeded(plan.pretrain, plan_seed(plan, "pretrain"));
  const DataView train_all(ctx.data.train, ctx.data.train.indices());
  const DataView test(ctx.data.test, ctx.data.test.indices());

  // Pretrain.
  const auto original_prefix = ctx.root / "models" / "original";
  const auto pre_input =
      stage_digest({{"dataset", ctx.data_digest}, {"architecture", arch}, {"config", pretrain_cfg}});
  if (!ctx.store.lookup("pretrain", "pretrain", pre_input, nullptr)) {
    auto res = train_classifier(train_all, arch, pretrain_cfg, &test);
    res.checkpoint.train_config_digest = pretrain_cfg.digest();
    fs::create_directories(original_prefix.parent_path());
    save_checkpoint(res.checkpoint, original_prefix);
    const auto log_path = ctx.root / "models" / "original_log.csv";
    res.log.write_csv(log_path);
    auto outs = checkpoint_files(original_prefix);
    outs.push_back(log_path);
    ctx.store.record("pretrain", "pretrain", pre_input, outs, {{"digest", res.checkpoint.digest()}});
  }
  auto original = load_classifier_checkpoint(original_prefix);
  const auto original_digest = original.digest();

  std::optional<std::map<std::int64_t, double>> loss_cache;
  auto losses = [&]() {
    if (!loss_cache) {
      const auto ce = per_sample_ce(*original.net, train_all);
      loss_cache.emplace();
      for (std::size_t i = 0; i < ce.size(); ++i) (*loss_cache)[train_all.indices()[i]] = ce[i];
    }
    return *loss_cache;
  };

  std::map<std::string, SplitArtifact> splits;
  for (std::size_t i = 0; i < plan.splits.size(); ++i) {
    splits[plan.splits[i].name] = ensure_split(ctx, i, losses, original_digest);
  }

  // Retrain references, one per split used by a recipe.
  std::map<std::string, std::string> retrain_prefix;
  for (const auto& sp : plan.splits) {
    if (!sp.retrain.value_or(plan.retrain)) continue;
    const bool used = std::any_of(plan.recipes.begin(), plan.recipes.end(), [&](const auto& r) { return r.split == sp.name; });
    if (!used) continue;
    const auto& split = splits.at(sp.name);
    const auto prefix = ctx.root / "models" / ("retrain_" + sp.name);
    const auto input = stage_digest({{"split", split.digest}, {"architecture", arch}, {"config", pretrain_cfg}});
    const auto name = "retrain/" + sp.name;
    if (!ctx.store.lookup(name, "retrain", input, nullptr)) {
      const DataView retain(ctx.data.train, split.spec.retain_indices);
      auto res = train_classifier(retain, arch, pretrain_cfg);
      res.checkpoint.train_config_digest = pretrain_cfg.digest();
      save_checkpoint(res.checkpoint, prefix);
      ctx.store.record(name, "retrain", input, checkpoint_files(prefix), {{"digest", res.checkpoint.digest()}});
    }
    retrain_prefix[sp.name] = prefix.string();
  }

  auto pipeline = [&](std::size_t i) {
    const auto& rp = plan.recipes[i];
    const auto recipe = seeded_recipe(plan, i);
    const auto& split = splits.at(rp.split);
    const DataView forget(ctx.data.train, split.spec.forget_indices);
    const DataView retain(ctx.data.train, split.spec.retain_indices);
    auto start = load_classifier_checkpoint(original_prefix);

    // Static weight table.
    std::optional<WeightTable> table;
    std::string table_sha;
    if (recipe.weighting.variant == WeightingVariant::Static) {
      const auto path = ctx.root / "tables" / (rp.name + "_weights.csv");
      const auto input = stage_digest(
          {{"original", original_digest}, {"split", split.digest}, {"tau", recipe.weighting.tau}, {"kind", "ce"}});
      const auto name = "table/" + rp.name;
      if (!ctx.store.lookup(name, "table", input, nullptr)) {
        const auto t = build_static_table(start, forget, recipe.weighting.tau);
        fs::create_directories(path.parent_path());
        t.save_csv(path);
        ctx.store.record(name, "table", input, {path}, json::object());
      }
      table = WeightTable::load_csv(path);
      table_sha = sha256_file(path);
    }

    // Unlearning run.
    const auto run_dir = ctx.root / "runs" / rp.name;
    const auto run_input = stage_digest(
        {{"original", original_digest}, {"split", split.digest}, {"recipe", recipe.digest()}, {"table", table_sha}});
    const auto run_name = "run/" + rp.name;
    json run_meta;
    if (!ctx.store.lookup(run_name, "run", run_input, &run_meta)) {
      UnlearnTables tables;
      if (table) tables.weights = &*table;
      UnlearnRun run;
      try {
        run = run_unlearning(start, forget, retain, recipe, tables);
      } catch (const UnlearnDivergedError& e) {
        fs::create_directories(run_dir);
        write_trajectory_csv(e.partial_trajectory(), run_dir / "trajectory.csv");
        throw;
      }
      fs::remove_all(run_dir);
      run.save(run_dir);
      run_meta = {{"final_digest", run.final_digest}, {"rte_minutes", rte(run)}};
      ctx.store.record(run_name, "run", run_input, files_under(run_dir), run_meta);
    }
    auto unlearned = load_classifier_checkpoint(run_dir / "final");

    // Report.
    const auto report_path = ctx.root / "reports" / (rp.name + ".json");
    const auto scatter_path = ctx.root / "reports" / (rp.name + "_difficulty.csv");
    const bool has_retrain = retrain_prefix.count(rp.split) == 1;
    const std::string retrain_digest =
        has_retrain ? read_checkpoint_manifest(retrain_prefix.at(rp.split)).at("digest").get<std::string>() : "";
    const auto rep_input = stage_digest({{"model", run_meta.at("final_digest")},
                                         {"retrain", retrain_digest},
                                         {"split", split.digest},
                                         {"original", original_digest},
                                         {"evaluation", {{"mia", plan.evaluation.mia}, {"difficulty", plan.evaluation.difficulty}}}});
    const auto rep_name = "report/" + rp.name;
    if (!ctx.store.lookup(rep_name, "report", rep_input, nullptr)) {
      auto measure_model = [&](ClassifierNet& net) {
        ModelMetrics m;
        if (plan.evaluation.mia) return measure(net, forget, retain, test);
        m.ua = accuracy(net, forget);
        m.ra = accuracy(net, retain);
        m.ta = accuracy(net, test);
        return m;
      };
      const auto mu = measure_model(*unlearned.net);
      ModelMetrics mr;
      if (has_retrain) {
        auto retrained = load_classifier_checkpoint(retrain_prefix.at(rp.split));
        mr = measure_model(*retrained.net);
      } else {
        mr = measure_model(*start.net);
      }
      auto report = make_report(mu, mr, run_meta.at("rte_minutes").get<double>());
      report.label = rp.name;
      report.model_digest = run_meta.at("final_digest");
      report.retrain_digest = has_retrain ? retrain_digest : original_digest;
      report.split_digest = split.digest;
      json rj = report;
      rj["reference_kind"] = has_retrain ? "retrain" : "original";
      write_text(report_path, rj.dump(2) + "\n");
      std::vector<fs::path> outs{report_path};
      if (plan.evaluation.difficulty) {
        write_difficulty_csv(difficulty_scatter(*start.net, *unlearned.net, forget), scatter_path);
        outs.push_back(scatter_path);
      }
      ctx.store.record(rep_name, "report", rep_input, outs, json::object());
    }
  };

  const int jobs = std::max(1, options.jobs);
  if (jobs == 1 || plan.recipes.size() <= 1) {
    for (std::size_t i = 0; i < plan.recipes.size(); ++i) pipeline(i);
  } else {
    std::vector<std::future<void>> pending;
    std::size_t next = 0;
    while (next < plan.recipes.size() || !pending.empty()) {
      while (next < plan.recipes.size() && static_cast<int>(pending.size()) < jobs) {
        pending.push_back(std::async(std::launch::async, pipeline, next++));
      }
      pending.front().get();
      pending.erase(pending.begin());
    }
  }

  std::vector<std::string> metric_rows, timing_rows;
  for (const auto& rp : plan.recipes) {
    const auto report = read_json(ctx.root / "reports" / (rp.name + ".json")).get<EvalReport>();
    metric_rows.push_back(eval_csv_row(report));
    std::ostringstream t;
    t.precision(10);
    t << rp.name << ',' << report.rte_minutes;
    timing_rows.push_back(t.str());
  }
  write_lines(ctx.root / "metrics.csv", eval_csv_header(), metric_rows);
  write_lines(ctx.root / "timings.csv", "label,rte_minutes", timing_rows);
  return {};
}

json generation_profile(DiffusionCheckpoint& model, ClassifierNet& external, int samples, double scale,
                        std::uint64_t seed) {
  json per_class = json::array();
  for (int c = 0; c < model.num_classes(); ++c) {
    per_class.push_back(generation_ua(model, c, external, samples, derive_seed(seed, "class", c), scale));
  }
  return per_class;
}

PlanResult run_diffusion_plan(Context& ctx, const RunOptions& options) {
  const auto& plan = ctx.plan;
  const auto& dp = *plan.diffusion;
  const DataView train_all(ctx.data.train, ctx.data.train.indices());
  auto unet = dp.unet;
  const auto shape = ctx.data.train.example_shape();
  unet.in_channels = static_cast<int>(shape[0]);
  unet.image_size = static_cast<int>(shape[1]);
  unet.num_classes = ctx.data.num_classes();
  auto train_cfg = dp.train;
  train_cfg.seed = plan_seed(plan, "pretrain");

  const auto original_prefix = ctx.root / "models" / "original";
  const auto pre_input = stage_digest({{"dataset", ctx.data_digest}, {"unet", unet}, {"config", train_cfg}});
  if (!ctx.store.lookup("pretrain", "pretrain", pre_input, nullptr)) {
    TrainingLog log;
    auto ckpt = train_diffusion(train_all, unet, train_cfg, &log);
    fs::create_directories(original_prefix.parent_path());
    save_checkpoint(ckpt, original_prefix);
    const auto log_path = ctx.root / "models" / "original_log.csv";
    log.write_csv(log_path);
    auto outs = checkpoint_files(original_prefix);
    outs.push_back(log_path);
    ctx.store.record("pretrain", "pretrain", pre_input, outs, {{"digest", ckpt.digest()}});
  }
  auto original = load_diffusion_checkpoint(original_prefix);
  const auto original_digest = original.digest();

  const auto ext_arch = classifier_arch(dp.external_arch, ctx.data);
  const auto ext_cfg = seeded(dp.external, plan_seed(plan, "external"));
  const auto ext_prefix = ctx.root / "models" / "external";
  const auto ext_input = stage_digest({{"dataset", ctx.data_digest}, {"architecture", ext_arch}, {"config", ext_cfg}});
  if (!ctx.store.lookup("external", "external", ext_input, nullptr)) {
    auto res = train_external_classifier(train_all, ext_arch, ext_cfg);
    save_checkpoint(res.checkpoint, ext_prefix);
    ctx.store.record("external", "external", ext_input, checkpoint_files(ext_prefix), json::object());
  }
  auto external = load_classifier_checkpoint(ext_prefix);
  const auto eval_seed = plan_seed(plan, "eval");

  const auto base_path = ctx.root / "reports" / "original_generation.json";
  const auto base_input = stage_digest({{"model", original_digest},
                                        {"external", external.digest()},
                                        {"samples", dp.samples},
                                        {"guidance", dp.guidance_scale},
                                        {"seed", eval_seed}});
  if (!ctx.store.lookup("baseline", "baseline", base_input, nullptr)) {
    const auto prof = generation_profile(original, *external.net, dp.samples, dp.guidance_scale, eval_seed);
    write_text(base_path, json{{"per_class", prof}}.dump(2) + "\n");
    ctx.store.record("baseline", "baseline", base_input, {base_path}, json::object());
  }
  const auto baseline = read_json(base_path).at("per_class").get<std::vector<double>>();

  std::map<std::string, SplitArtifact> splits;
  for (std::size_t i = 0; i < plan.splits.size(); ++i) {
    splits[plan.splits[i].name] = ensure_split(ctx, i, [] { return std::map<std::int64_t, double>{}; }, original_digest);
  }

  std::vector<std::string> metric_rows, timing_rows;
  for (std::size_t i = 0; i < plan.recipes.size(); ++i) {
    const auto& rp = plan.recipes[i];
    const auto recipe = seeded_recipe(plan, i);
    const auto& split = splits.at(rp.split);
    const DataView forget(ctx.data.train, split.spec.forget_indices);
    const DataView retain(ctx.data.train, split.spec.retain_indices);
    const auto table_seed = derive_seed(recipe.seed, "table");

    std::optional<WeightTable> wtable;
    std::optional<TimestepLossTable> ttable;
    std::string table_sha;
    if (recipe.weighting.variant != WeightingVariant::Off) {
      const auto& tp = *dp.table;
      const bool is_static = recipe.weighting.variant == WeightingVariant::Static;
      const auto path = ctx.root / "tables" / (rp.name + (is_static ? "_weights.csv" : "_timesteps.csv"));
      const auto input = stage_digest({{"original", original_digest},
                                       {"split", split.digest},
                                       {"tau", recipe.weighting.tau},
                                       {"variant", to_string(recipe.weighting.variant)},
                                       {"exhaustive", tp.exhaustive},
                                       {"num_examples", tp.num_examples},
                                       {"num_timesteps", tp.num_timesteps},
                                       {"static_max_timesteps", tp.static_max_timesteps},
                                       {"seed", table_seed}});
      const auto name = "table/" + rp.name;
      if (!ctx.store.lookup(name, "table", input, nullptr)) {
        fs::create_directories(path.parent_path());
        if (is_static) {
          build_static_table(original, forget, recipe.weighting.tau, {table_seed, tp.static_max_timesteps}).save_csv(path);
        } else if (tp.exhaustive) {
          build_reference_table_exhaustive(original, forget, table_seed).save_csv(path);
        } else {
          fit_reference_table(original, forget, std::min<int>(tp.num_examples, static_cast<int>(forget.size())),
                              std::min(tp.num_timesteps, original.T()), table_seed)
              .save_csv(path);
        }
        ctx.store.record(name, "table", input, {path}, json::object());
      }
      if (is_static) {
        wtable = WeightTable::load_csv(path);
      } else {
        ttable = TimestepLossTable::load_csv(path);
      }
      table_sha = sha256_file(path);
    }

    const auto run_dir = ctx.root / "runs" / rp.name;
    const auto run_input = stage_digest(
        {{"original", original_digest}, {"split", split.digest}, {"recipe", recipe.digest()}, {"table", table_sha}});
    const auto run_name = "run/" + rp.name;
    json run_meta;
    if (!ctx.store.lookup(run_name, "run", run_input, &run_meta)) {
      UnlearnTables tables;
      if (wtable) tables.weights = &*wtable;
      if (ttable) tables.timesteps = &*ttable;
      UnlearnRun run;
      try {
        run = run_unlearning(original, forget, retain, recipe, tables);
      } catch (const UnlearnDivergedError& e) {
        fs::create_directories(run_dir);
        write_trajectory_csv(e.partial_trajectory(), run_dir / "trajectory.csv");
        throw;
      }
      fs::remove_all(run_dir);
      run.save(run_dir);
      run_meta = {{"final_digest", run.final_digest}, {"rte_minutes", rte(run)}};
      ctx.store.record(run_name, "run", run_input, files_under(run_dir), run_meta);
    }

    const auto report_path = ctx.root / "reports" / (rp.name + ".json");
    const auto rep_input = stage_digest({{"model", run_meta.at("final_digest")}, {"baseline", base_input}});
    const auto rep_name = "report/" + rp.name;
    if (!ctx.store.lookup(rep_name, "report", rep_input, nullptr)) {
      auto unlearned = load_diffusion_checkpoint(run_dir / "final");
      const auto prof = generation_profile(unlearned, *external.net, dp.samples, dp.guidance_scale, eval_seed);
      const int fc = split.spec.class_id.value_or(-1);
      json rep = {{"label", rp.name},
                  {"forgotten_class", fc},
                  {"per_class", prof},
                  {"per_class_before", baseline},
                  {"rte_minutes", run_meta.at("rte_minutes")},
                  {"model_digest", run_meta.at("final_digest")},
                  {"split_digest", split.digest}};
      write_text(report_path, rep.dump(2) + "\n");
      ctx.store.record(rep_name, "report", rep_input, {report_path}, json::object());
    }
    const auto rep = read_json(report_path);
    const auto after = rep.at("per_class").get<std::vector<double>>();
    const int fc = rep.at("forgotten_class").get<int>();
    double kept_after = 0, kept_before = 0;
    int kept = 0;
    for (std::size_t c = 0; c < after.size(); ++c) {
      if (static_cast<int>(c) == fc) continue;
      kept_after += after[c];
      kept_before += baseline[c];
      ++kept;
    }
    std::ostringstream row;
    row.precision(10);
    row << rp.name << ',' << fc << ',' << (fc >= 0 ? after[static_cast<std::size_t>(fc)] : 0.0) << ','
        << (fc >= 0 ? baseline[static_cast<std::size_t>(fc)] : 0.0) << ',' << kept_after / std::max(kept, 1) << ','
        << kept_before / std::max(kept, 1) << ',' << rep.at("model_digest").get<std::string>();
    metric_rows.push_back(row.str());
    std::ostringstream t;
    t.precision(10);
    t << rp.name << ',' << rep.at("rte_minutes").get<double>();
    timing_rows.push_back(t.str());
  }
  write_lines(ctx.root / "metrics.csv",
              "label,forgotten_class,ua_forget,ua_forget_before,retained_mean,retained_mean_before,model_digest",
              metric_rows);
  write_lines(ctx.root / "timings.csv", "label,rte_minutes", timing_rows);
  (void)options;
  return {};
}

}  // namespace

PlanResult run_plan(ExperimentPlan plan, const RunOptions& options) {
  if (options.seed) plan.seed = *options.seed;
  const auto diagnostics = validate_plan(plan);
  if (!diagnostics.empty()) {
    fail(ErrorCode::InvalidArgument, "plan does not validate: " + diagnostics.front().field + ": " +
                                         diagnostics.front().message);
  }
  fs::path root = !options.output.empty() ? options.output : fs::path(plan.output);
  require(!root.empty(), ErrorCode::InvalidArgument, "no output directory given");
  fs::create_directories(root);
  const auto plan_digest = plan.digest();
  StageStore store(root, plan_digest, options.resume, options.log);
  write_text(root / "plan.json", json(plan).dump(2) + "\n");

  try {
    const auto data = load_dataset(plan.dataset);
    Context ctx{plan, store, data, data.digest(), root};
    if (plan.task == Task::Classifier) {
      run_classifier_plan(ctx, options);
    } else {
      run_diffusion_plan(ctx, options);
    }
  } catch (...) {
    store.finish("failed");
    throw;
  }
  write_index(root, store, plan_digest);
  store.finish("complete");
  PlanResult result;
  result.root = root;
  result.stages = store.records();
  return result;
}

std::vector<std::string> verify_index(const fs::path& root) {
  std::vector<std::string> problems;
  const auto index = read_json(root / "index.json");
  std::set<std::string> listed;
  for (const auto& a : index.at("artifacts")) {
    const auto rel = a.at("path").get<std::string>();
    listed.insert(rel);
    const auto p = root / rel;
    if (!fs::exists(p)) {
      problems.push_back("missing " + rel);
    } else if (sha256_file(p) != a.at("sha256").get<std::string>()) {
      problems.push_back("digest mismatch " + rel);
    }
  }
  for (const auto& p : files_under(root)) {
    const auto rel = relative_to(root, p);
    if (rel != "index.json" && rel != "state.json" && !listed.count(rel)) problems.push_back("unindexed " + rel);
  }
  return problems;
}

}  // namespace unlearn
