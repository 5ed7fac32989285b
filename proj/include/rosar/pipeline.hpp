#pragma once

// End-to-end experiment driver: data -> train -> bound search -> adversarial
// datasets -> patch -> retrain -> evaluate -> validation search -> report.
// Every stage writes into its own directory under the run root and drops a
// run_manifest.json when complete; a stage whose manifest exists is skipped.

#include <chrono>
#include <cmath>
#include <ctime>
#include <functional>
#include <iostream>
#include <map>
#include <set>
#include <string>
#include <vector>

#include <json.hpp>

#include "rosar/bound_search.hpp"
#include "rosar/detector.hpp"
#include "rosar/patch.hpp"
#include "rosar/retrain_eval.hpp"
#include "rosar/sonar_synth.hpp"

namespace rosar {

inline constexpr const char* kToolVersion = "0.1.0";
inline constexpr int kConfigVersion = 1;

using nlohmann::json;

// ---- run manifest ------------------------------------------------------------

struct RunManifest {
  std::string subcommand;
  json parameters = json::object();
  std::vector<std::string> inputs;
  std::vector<std::string> outputs;
  json seeds = json::object();
  double wall_clock_seconds = 0;

  json to_json() const {
    return {{"subcommand", subcommand},
            {"parameters", parameters},
            {"inputs", inputs},
            {"outputs", outputs},
            {"seeds", seeds},
            {"tool_version", kToolVersion},
            {"wall_clock_seconds", wall_clock_seconds},
            {"finished_at", static_cast<std::int64_t>(std::time(nullptr))}};
  }
};

inline fs::path run_manifest_path(const fs::path& dir) { return dir / "run_manifest.json"; }

inline void write_run_manifest(const fs::path& dir, const RunManifest& m) {
  write_file_atomic(run_manifest_path(dir), m.to_json().dump(2) + "\n");
}

/// True iff the file exists and parses according to its extension.
inline bool output_parses(const fs::path& p) {
  if (!fs::exists(p)) return false;
  try {
    const auto ext = p.extension().string();
    if (fs::is_directory(p)) return fs::exists(p / "manifest.json") ? (read_dataset(p), true) : true;
    if (ext == ".json") {
      const json parsed = json::parse(read_file(p));
      (void)parsed;
    } else if (ext == ".jsonl") {
      std::istringstream in(read_file(p));
      std::string line;
      while (std::getline(in, line)) {
        if (line.empty()) continue;
        const json parsed = json::parse(line);
        (void)parsed;
      }
    } else if (ext == ".pgm") {
      read_pgm(p);
    } else if (ext == ".bin") {
      load_model(p);
    }
    return true;
  } catch (const std::exception&) {
    return false;
  }
}

inline void verify_outputs(const std::vector<std::string>& outputs) {
  for (const auto& o : outputs)
    if (!output_parses(o)) throw std::runtime_error("declared output missing or unparsable: " + o);
}

// ---- config --------------------------------------------------------------------

struct DataSpec {
  Variant variant = Variant::Clean;
  int count = 0;
  std::uint64_t seed = 0;
};

struct PipelineConfig {
  int version = kConfigVersion;
  std::uint64_t seed = 7;
  int image_size = 64;
  int num_classes = 2;
  double conf_threshold = kDefaultConfThreshold;
  double iou_threshold = 0.5;
  int workers = 1;

  std::vector<DataSpec> train_data;
  std::vector<DataSpec> attack_data;
  std::map<std::string, std::vector<DataSpec>> val_data;
  SynthParams synth;

  TrainConfig train;
  std::uint64_t model_seed = 1;
  std::uint64_t surrogate_seed = 2;

  AttackConfig attack;
  SearchConfig p1 = SearchConfig::defaults(PropertyKind::P1);
  SearchConfig p2 = SearchConfig::defaults(PropertyKind::P2);

  bool patch_enabled = true;
  PatchTrainConfig patch;

  std::vector<int> finetune_epochs{5, 10, 15, 20};
  int robustness_epoch = 15;
  bool validate_patch_model = true;

  json source = json::object();
};

namespace detail {

inline const json& require(const json& j, const std::string& key, const std::string& path) {
  if (!j.is_object() || !j.contains(key)) throw std::invalid_argument("config: missing required key '" + path + "'");
  return j.at(key);
}

inline double parse_time_limit(const json& v) {
  if (v.is_null()) return INFINITY;
  if (v.is_string()) {
    const auto s = v.get<std::string>();
    if (s == "inf" || s == "none") return INFINITY;
    return std::stod(s);
  }
  const double t = v.get<double>();
  return t <= 0 ? INFINITY : t;
}

inline std::vector<DataSpec> parse_data_list(const json& j, const std::string& path) {
  if (!j.is_array()) throw std::invalid_argument("config: '" + path + "' must be an array");
  std::vector<DataSpec> out;
  for (std::size_t i = 0; i < j.size(); ++i) {
    const std::string p = path + "[" + std::to_string(i) + "]";
    DataSpec d;
    d.variant = parse_variant(require(j[i], "variant", p + ".variant").get<std::string>());
    d.count = require(j[i], "count", p + ".count").get<int>();
    d.seed = require(j[i], "seed", p + ".seed").get<std::uint64_t>();
    out.push_back(d);
  }
  return out;
}

inline SearchConfig parse_search(const json& j, SearchConfig c) {
  c.lower = j.value("lower", c.lower);
  c.upper = j.value("upper", c.upper);
  c.max_iter = j.value("max_iter", c.max_iter);
  if (j.contains("direction")) c.direction = parse_direction(j.at("direction").get<std::string>());
  return c;
}

}  // namespace detail

/// Parses a config document. `seed_override` (e.g. from ROSAR_SEED) replaces
/// the top-level seed when the document does not set one.
inline PipelineConfig parse_pipeline_config(const json& j, std::optional<std::uint64_t> seed_override = {}) {
  using detail::require;
  PipelineConfig c;
  c.source = j;
  c.version = require(j, "version", "version").get<int>();
  if (c.version != kConfigVersion) throw std::invalid_argument("config: unsupported version " + std::to_string(c.version));
  if (j.contains("seed"))
    c.seed = j.at("seed").get<std::uint64_t>();
  else if (seed_override)
    c.seed = *seed_override;
  c.image_size = j.value("image_size", c.image_size);
  c.num_classes = j.value("num_classes", c.num_classes);
  c.conf_threshold = j.value("conf_threshold", c.conf_threshold);
  c.iou_threshold = j.value("iou_threshold", c.iou_threshold);
  c.workers = j.value("workers", c.workers);

  const json& data = require(j, "data", "data");
  c.train_data = detail::parse_data_list(require(data, "train", "data.train"), "data.train");
  c.attack_data = detail::parse_data_list(require(data, "attack", "data.attack"), "data.attack");
  if (data.contains("val"))
    for (const auto& [name, list] : data.at("val").items())
      c.val_data[name] = detail::parse_data_list(list, "data.val." + name);
  if (j.contains("synth")) c.synth = SynthParams::from_json(j.at("synth"));

  if (j.contains("train")) {
    const auto& t = j.at("train");
    c.train.epochs = t.value("epochs", c.train.epochs);
    c.train.lr = t.value("lr", c.train.lr);
    c.train.momentum = t.value("momentum", c.train.momentum);
    c.train.grad_clip = t.value("grad_clip", c.train.grad_clip);
    c.train.seed = t.value("seed", c.seed);
    c.model_seed = t.value("model_seed", c.model_seed);
    c.surrogate_seed = t.value("surrogate_seed", c.surrogate_seed);
  } else {
    c.train.seed = c.seed;
  }
  c.attack.seed = c.seed;
  if (j.contains("attack")) {
    const auto& a = j.at("attack");
    c.attack.steps = a.value("steps", c.attack.steps);
    c.attack.restarts = a.value("restarts", c.attack.restarts);
    c.attack.step_size = a.value("step_size", c.attack.step_size);
    if (a.contains("time_limit")) c.attack.time_limit = detail::parse_time_limit(a.at("time_limit"));
    c.attack.seed = a.value("seed", c.attack.seed);
  }
  if (j.contains("search")) {
    const auto& s = j.at("search");
    if (s.contains("p1")) c.p1 = detail::parse_search(s.at("p1"), c.p1);
    if (s.contains("p2")) c.p2 = detail::parse_search(s.at("p2"), c.p2);
    if (s.contains("selection")) {
      const auto sel = s.at("selection").get<std::string>();
      if (sel != "all" && sel != "top") throw std::invalid_argument("config: search.selection must be 'all' or 'top'");
      c.p1.selection = c.p2.selection = sel == "all" ? BoxSelection::All : BoxSelection::TopConfidence;
    }
  }
  c.p1.xi_obj = c.p2.xi_obj = c.conf_threshold;
  if (j.contains("patch")) {
    const auto& p = j.at("patch");
    c.patch_enabled = p.value("enabled", c.patch_enabled);
    c.patch.size = p.value("size", c.patch.size);
    c.patch.epochs = p.value("epochs", c.patch.epochs);
    c.patch.w_obj = p.value("w_obj", c.patch.w_obj);
    c.patch.w_tv = p.value("w_tv", c.patch.w_tv);
    c.patch.lr = p.value("lr", c.patch.lr);
    c.patch.scale = p.value("scale", c.patch.scale);
  }
  if (j.contains("finetune")) {
    const auto& f = j.at("finetune");
    c.finetune_epochs = f.value("epochs", c.finetune_epochs);
    c.robustness_epoch = f.value("robustness_epoch", c.robustness_epoch);
  }
  c.validate_patch_model = j.value("validate_patch_model", c.validate_patch_model);

  ModelConfig{c.image_size, c.image_size, 1, c.num_classes}.validate();
  c.train.validate();
  c.attack.validate();
  c.p1.validate();
  c.p2.validate();
  if (c.train_data.empty()) throw std::invalid_argument("config: data.train must not be empty");
  if (c.attack_data.empty()) throw std::invalid_argument("config: data.attack must not be empty");
  if (std::find(c.finetune_epochs.begin(), c.finetune_epochs.end(), c.robustness_epoch) == c.finetune_epochs.end())
    throw std::invalid_argument("config: finetune.robustness_epoch must be one of finetune.epochs");
  return c;
}

inline PipelineConfig load_pipeline_config(const fs::path& path, std::optional<std::uint64_t> seed_override = {}) {
  json j;
  try {
    j = json::parse(read_file(path));
  } catch (const json::parse_error& e) {
    throw std::invalid_argument("config: " + path.string() + " is not valid JSON: " + e.what());
  }
  return parse_pipeline_config(j, seed_override);
}

// ---- dataset groups ------------------------------------------------------------

inline std::string data_dir_name(const std::string& group, std::size_t index, const DataSpec& d) {
  return group + "_" + std::to_string(index) + "_" + to_string(d.variant);
}

inline std::vector<Sample> load_group(const std::vector<fs::path>& dirs) {
  std::vector<Sample> out;
  for (const auto& d : dirs) {
    auto s = load_samples(d);
    out.insert(out.end(), std::make_move_iterator(s.begin()), std::make_move_iterator(s.end()));
  }
  return out;
}

// ---- pipeline ------------------------------------------------------------------

struct StageOutcome {
  std::string name;
  bool skipped = false;
  double seconds = 0;
};

class Pipeline {
 public:
  Pipeline(PipelineConfig cfg, fs::path root, std::ostream* log = &std::cerr)
      : cfg_(std::move(cfg)), root_(std::move(root)), log_(log) {}

  std::vector<StageOutcome> run() {
    fs::create_directories(root_);
    write_file_atomic(root_ / "config.resolved.json", cfg_.source.dump(2) + "\n");
    outcomes_.clear();
    stage("gen-data", root_ / "data", [&](RunManifest& m) { gen_data(m); });
    stage("train", root_ / "models" / "original", [&](RunManifest& m) { train_models(m); });
    stage("bound-search:original:p1", search_dir("original", PropertyKind::P1),
          [&](RunManifest& m) { search("original", model_path("original"), PropertyKind::P1, m); });
    stage("bound-search:original:p2", search_dir("original", PropertyKind::P2),
          [&](RunManifest& m) { search("original", model_path("original"), PropertyKind::P2, m); });
    stage("gen-adv-dataset:p1", adv_dir("p1_swdd"),
          [&](RunManifest& m) { adv_dataset(search_dir("original", PropertyKind::P1), "p1_swdd", m); });
    stage("gen-adv-dataset:p2", adv_dir("p2_swdd"),
          [&](RunManifest& m) { adv_dataset(search_dir("original", PropertyKind::P2), "p2_swdd", m); });
    if (cfg_.patch_enabled) {
      stage("train-patch", root_ / "patch", [&](RunManifest& m) { train_patch_stage(m); });
      stage("patch-dataset", adv_dir("patch_swdd"), [&](RunManifest& m) { patch_dataset_stage(m); });
    }
    for (const auto& adv : adv_names())
      stage("retrain:" + adv, root_ / "models" / (adv + "_runs"), [&](RunManifest& m) { retrain(adv, m); });
    stage("evaluate", root_ / "eval", [&](RunManifest& m) { evaluate_stage(m); });
    for (const auto& [model, kind] : validation_targets())
      stage("bound-search:" + model + ":" + to_string(kind), search_dir(model, kind),
            [&, model = model, kind = kind](RunManifest& m) {
              if (fs::exists(model_path(model))) search(model, model_path(model), kind, m);
              else m.parameters["skipped"] = "model not trained (empty adversarial dataset)";
            });
    stage("report", root_ / "report", [&](RunManifest& m) { report_stage(m); });
    return outcomes_;
  }

  const fs::path& root() const { return root_; }
  fs::path model_path(const std::string& id) const { return root_ / "models" / id / "weights.bin"; }
  fs::path search_dir(const std::string& model, PropertyKind k) const {
    return root_ / "search" / (model + "_" + to_string(k));
  }
  fs::path adv_dir(const std::string& name) const { return root_ / "adv" / name; }
  std::string robustness_model(const std::string& adv) const {
    return adv + "_e" + std::to_string(cfg_.robustness_epoch);
  }

  std::vector<std::string> adv_names() const {
    std::vector<std::string> v{"p1_swdd", "p2_swdd"};
    if (cfg_.patch_enabled) v.push_back("patch_swdd");
    return v;
  }

  /// (model id, property) pairs searched after retraining, in report order.
  std::vector<std::pair<std::string, PropertyKind>> validation_targets() const {
    std::vector<std::pair<std::string, PropertyKind>> t{{robustness_model("p1_swdd"), PropertyKind::P1},
                                                        {robustness_model("p2_swdd"), PropertyKind::P2}};
    if (cfg_.patch_enabled && cfg_.validate_patch_model) {
      t.emplace_back(robustness_model("patch_swdd"), PropertyKind::P1);
      t.emplace_back(robustness_model("patch_swdd"), PropertyKind::P2);
    }
    return t;
  }

 private:
  void stage(const std::string& name, const fs::path& dir, const std::function<void(RunManifest&)>& body) {
    if (fs::exists(run_manifest_path(dir))) {
      outcomes_.push_back({name, true, 0});
      if (log_) *log_ << "[skip] " << name << " (outputs present)\n";
      return;
    }
    if (log_) *log_ << "[run ] " << name << std::endl;
    const auto t0 = std::chrono::steady_clock::now();
    RunManifest m;
    m.subcommand = name;
    m.seeds = {{"seed", cfg_.seed}, {"model_seed", cfg_.model_seed}, {"attack_seed", cfg_.attack.seed}};
    try {
      fs::create_directories(dir);
      body(m);
      verify_outputs(m.outputs);
    } catch (const std::exception& e) {
      throw std::runtime_error("stage '" + name + "' failed: " + e.what());
    }
    m.wall_clock_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    write_run_manifest(dir, m);
    outcomes_.push_back({name, false, m.wall_clock_seconds});
    if (log_) *log_ << "[done] " << name << " (" << m.wall_clock_seconds << " s)\n";
  }

  std::vector<fs::path> group_dirs(const std::string& group, const std::vector<DataSpec>& specs) const {
    std::vector<fs::path> dirs;
    for (std::size_t i = 0; i < specs.size(); ++i) dirs.push_back(root_ / "data" / data_dir_name(group, i, specs[i]));
    return dirs;
  }

  void gen_data(RunManifest& m) {
    auto gen = [&](const std::string& group, const std::vector<DataSpec>& specs) {
      for (std::size_t i = 0; i < specs.size(); ++i) {
        const fs::path dir = root_ / "data" / data_dir_name(group, i, specs[i]);
        generate_dataset(dir, data_dir_name(group, i, specs[i]), specs[i].variant, specs[i].count, specs[i].seed,
                         cfg_.image_size, cfg_.image_size, cfg_.synth);
        m.outputs.push_back(dir.string());
      }
    };
    gen("train", cfg_.train_data);
    gen("attack", cfg_.attack_data);
    for (const auto& [name, specs] : cfg_.val_data) gen("val_" + name, specs);
    m.parameters = cfg_.source.value("data", json::object());
  }

  void train_models(RunManifest& m) {
    const auto samples = load_group(group_dirs("train", cfg_.train_data));
    const ModelConfig mc{cfg_.image_size, cfg_.image_size, 1, cfg_.num_classes};
    auto train_one = [&](const std::string& id, std::uint64_t seed) {
      json log = json::array();
      auto model = train(init_model(mc, seed), samples, cfg_.train,
                         [&](int e, const ModelParams&, double l) { log.push_back({{"epoch", e}, {"loss", l}}); });
      save_model(model_path(id), model);
      write_file_atomic(model_path(id).parent_path() / "train_log.json", log.dump(2) + "\n");
      m.outputs.push_back(model_path(id).string());
    };
    if (cfg_.patch_enabled) train_one("surrogate", cfg_.surrogate_seed);
    train_one("original", cfg_.model_seed);
    m.parameters = {{"epochs", cfg_.train.epochs},
                    {"lr", cfg_.train.lr},
                    {"momentum", cfg_.train.momentum},
                    {"grad_clip", cfg_.train.grad_clip}};
  }

  void search(const std::string& model_id, const fs::path& weights, PropertyKind kind, RunManifest& m) {
    const auto model = load_model(weights);
    const auto samples = load_group(group_dirs("attack", cfg_.attack_data));
    std::set<std::string> ids;
    for (const auto& s : samples)
      if (!ids.insert(s.id).second) throw std::invalid_argument("attack data: duplicate image id " + s.id);
    const SearchConfig& sc = kind == PropertyKind::P1 ? cfg_.p1 : cfg_.p2;
    const fs::path dir = search_dir(model_id, kind);
    const auto res = binary_search_bound(model, model_id, samples, sc, cfg_.attack, dir, cfg_.workers);
    m.inputs = {weights.string()};
    m.outputs = {(dir / "records.jsonl").string()};
    m.parameters = {{"property", to_string(kind)}, {"lower", sc.lower},       {"upper", sc.upper},
                    {"max_iter", sc.max_iter},     {"direction", to_string(sc.direction)},
                    {"xi_obj", sc.xi_obj},         {"attack", to_json(cfg_.attack)},
                    {"instances", res.records.size()}, {"skipped", res.skipped},
                    {"counterexamples", res.counterexamples}};
  }

  void adv_dataset(const fs::path& search, const std::string& name, RunManifest& m) {
    const auto records = read_records(search / "records.jsonl");
    const auto man = assemble_adv_dataset(records, search, adv_dir(name), name);
    m.inputs = {(search / "records.jsonl").string()};
    m.outputs = {adv_dir(name).string()};
    m.parameters = {{"entries", man.entries.size()}};
  }

  void train_patch_stage(RunManifest& m) {
    const auto surrogate = load_model(model_path("surrogate"));
    const auto victim = load_model(model_path("original"));
    const auto samples = load_group(group_dirs("train", cfg_.train_data));
    auto res = rosar::train_patch(surrogate, samples, cfg_.patch, "surrogate");
    save_patch(root_ / "patch", res.patch);
    const auto tr = transfer_report(surrogate, victim, samples, res.patch, cfg_.patch.scale);
    write_file_atomic(root_ / "patch" / "transfer.json", tr.to_json().dump(2) + "\n");
    m.inputs = {model_path("surrogate").string(), model_path("original").string()};
    m.outputs = {(root_ / "patch" / "patch.pgm").string(), (root_ / "patch" / "patch.json").string(),
                 (root_ / "patch" / "transfer.json").string()};
    m.parameters = res.patch.meta;
  }

  void patch_dataset_stage(RunManifest& m) {
    const auto patch = load_patch(root_ / "patch");
    const auto samples = load_group(group_dirs("train", cfg_.train_data));
    build_patch_dataset(samples, patch, cfg_.patch.scale, adv_dir("patch_swdd"), "patch_swdd");
    m.outputs = {adv_dir("patch_swdd").string()};
    m.parameters = {{"scale", cfg_.patch.scale}};
  }

  void retrain(const std::string& adv, RunManifest& m) {
    const auto adv_samples = load_samples(adv_dir(adv));
    m.inputs = {model_path("original").string(), adv_dir(adv).string()};
    if (adv_samples.empty()) {
      m.parameters = {{"skipped", "adversarial dataset is empty"}};
      return;
    }
    const int max_epochs = *std::max_element(cfg_.finetune_epochs.begin(), cfg_.finetune_epochs.end());
    json log = json::array();
    finetune(load_model(model_path("original")), adv_samples, max_epochs, cfg_.train,
             [&](int e, const ModelParams& model, double loss) {
               log.push_back({{"epoch", e}, {"loss", loss}});
               if (std::find(cfg_.finetune_epochs.begin(), cfg_.finetune_epochs.end(), e) != cfg_.finetune_epochs.end()) {
                 const std::string id = adv + "_e" + std::to_string(e);
                 save_model(model_path(id), model);
                 m.outputs.push_back(model_path(id).string());
               }
             });
    write_file_atomic(root_ / "models" / (adv + "_runs") / "finetune_log.json", log.dump(2) + "\n");
    m.parameters = {{"epochs", cfg_.finetune_epochs},
                    {"lr", cfg_.train.lr * kFinetuneLrScale},
                    {"grad_clip", cfg_.train.grad_clip}};
  }

  std::vector<std::string> evaluated_models() const {
    std::vector<std::string> ids{"original"};
    for (const auto& adv : adv_names())
      for (int e : cfg_.finetune_epochs) {
        const std::string id = adv + "_e" + std::to_string(e);
        if (fs::exists(model_path(id))) ids.push_back(id);
      }
    return ids;
  }

  void evaluate_stage(RunManifest& m) {
    std::map<std::string, std::vector<Sample>> sets;
    sets["train"] = load_group(group_dirs("train", cfg_.train_data));
    sets["attack"] = load_group(group_dirs("attack", cfg_.attack_data));
    for (const auto& [name, specs] : cfg_.val_data) sets["val_" + name] = load_group(group_dirs("val_" + name, specs));
    json out = json::object();
    for (const auto& id : evaluated_models()) {
      const auto model = load_model(model_path(id));
      for (const auto& [name, samples] : sets) {
        if (samples.empty()) continue;
        out[id][name] = evaluate(model, samples, cfg_.iou_threshold, cfg_.conf_threshold, cfg_.workers).to_json();
      }
    }
    write_file_atomic(root_ / "eval" / "eval.json", out.dump(2) + "\n");
    m.outputs = {(root_ / "eval" / "eval.json").string()};
    m.parameters = {{"iou_threshold", cfg_.iou_threshold}, {"conf_threshold", cfg_.conf_threshold}};
  }

  void report_stage(RunManifest& m) {
    ReportInput in;
    const auto eval = json::parse(read_file(root_ / "eval" / "eval.json"));
    for (const auto& [model, dsets] : eval.items())
      for (const auto& [ds, r] : dsets.items()) {
        EvalReport rep;
        rep.tp_percent = r.at("tp_percent");
        rep.tp_count = r.at("tp");
        rep.gt_count = r.at("gt");
        rep.fp_count = r.at("fp");
        rep.ap = r.at("ap");
        rep.iou_threshold = r.at("iou_threshold");
        rep.conf_threshold = r.at("conf_threshold");
        in.eval[model][ds] = rep;
      }
    std::vector<std::pair<std::string, PropertyKind>> searches{{"original", PropertyKind::P1},
                                                               {"original", PropertyKind::P2}};
    for (const auto& t : validation_targets()) searches.push_back(t);
    json skipped = json::object();
    for (const auto& [model, kind] : searches) {
      const fs::path rec = search_dir(model, kind) / "records.jsonl";
      if (!fs::exists(rec)) continue;
      auto r = read_records(rec);
      in.records.insert(in.records.end(), r.begin(), r.end());
      const auto man = json::parse(read_file(run_manifest_path(search_dir(model, kind))));
      skipped[model][to_string(kind)] = man.at("parameters").value("skipped", json(0));
    }
    in.extra["skipped_instances"] = skipped;
    in.extra["conf_threshold"] = cfg_.conf_threshold;
    in.extra["iou_threshold"] = cfg_.iou_threshold;
    in.extra["robustness_epoch"] = cfg_.robustness_epoch;
    if (fs::exists(root_ / "patch" / "transfer.json"))
      in.extra["patch_transfer"] = json::parse(read_file(root_ / "patch" / "transfer.json"));
    report(in, root_ / "report");
    m.outputs = {(root_ / "report" / "robustness.csv").string(), (root_ / "report" / "summary.json").string()};
  }

  PipelineConfig cfg_;
  fs::path root_;
  std::ostream* log_;
  std::vector<StageOutcome> outcomes_;
};

inline std::vector<StageOutcome> run_pipeline(const PipelineConfig& cfg, const fs::path& root,
                                              std::ostream* log = &std::cerr) {
  Pipeline p(cfg, root, log);
  return p.run();
}

}  // namespace rosar
