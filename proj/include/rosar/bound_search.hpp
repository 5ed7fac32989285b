#pragma once

// Per-(image, box) bisection of the perturbation bound at which a property
// first fails, with every counter-example found along the way saved to disk.

#include <cmath>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "rosar/detector.hpp"
#include "rosar/parallel.hpp"
#include "rosar/pgd.hpp"
#include "rosar/properties.hpp"
#include "rosar/sonar_synth.hpp"

namespace rosar {

/// Which side of the bracket admits counter-examples. P1 grows noise with
/// epsilon (high side unsafe); P2 darkens more as epsilon shrinks.
enum class UnsafeDirection { HighEpsUnsafe, LowEpsUnsafe };

inline std::string to_string(UnsafeDirection d) {
  return d == UnsafeDirection::HighEpsUnsafe ? "high_eps_unsafe" : "low_eps_unsafe";
}
inline UnsafeDirection parse_direction(const std::string& s) {
  if (s == "high_eps_unsafe" || s == "verbatim") return UnsafeDirection::HighEpsUnsafe;
  if (s == "low_eps_unsafe") return UnsafeDirection::LowEpsUnsafe;
  throw std::invalid_argument("unknown direction '" + s + "' (expected high_eps_unsafe or low_eps_unsafe)");
}

enum class BoxSelection { All, TopConfidence };

struct SearchConfig {
  PropertyKind kind = PropertyKind::P1;
  double lower = 0.0;
  double upper = 0.08;
  int max_iter = 5;
  UnsafeDirection direction = UnsafeDirection::HighEpsUnsafe;
  double xi_obj = kDefaultConfThreshold;
  BoxSelection selection = BoxSelection::All;

  static SearchConfig defaults(PropertyKind kind) {
    SearchConfig c;
    c.kind = kind;
    if (kind == PropertyKind::P2) {
      c.lower = 0.60;
      c.upper = 1.0;
      c.direction = UnsafeDirection::LowEpsUnsafe;
    }
    return c;
  }

  void validate() const {
    if (!(lower < upper)) throw std::invalid_argument("search config: lower must be < upper");
    if (max_iter < 1) throw std::invalid_argument("search config: max_iter must be >= 1");
  }
};

struct BisectionStep {
  double mid = 0;
  bool found = false;
  bool deadline_fired = false;
  double low = 0;   // bracket after the update
  double high = 0;
};

struct EvalOutcome {
  bool found = false;
  bool deadline_fired = false;
};

struct Bisection {
  double threshold = 0;
  std::vector<BisectionStep> log;
};

/// Bisects [lower, upper] for max_iter rounds with `eval(mid, iter)` as the
/// property oracle; the threshold is the final bracket midpoint.
inline Bisection bisect(const SearchConfig& cfg, const std::function<EvalOutcome(double, int)>& eval) {
  cfg.validate();
  double low = cfg.lower, high = cfg.upper;
  Bisection b;
  for (int it = 0; it < cfg.max_iter; ++it) {
    const double mid = (low + high) / 2.0;
    const EvalOutcome o = eval(mid, it);
    const bool unsafe_is_high = cfg.direction == UnsafeDirection::HighEpsUnsafe;
    if (o.found == unsafe_is_high)
      high = mid;
    else
      low = mid;
    b.log.push_back({mid, o.found, o.deadline_fired, low, high});
  }
  b.threshold = (low + high) / 2.0;
  return b;
}

struct RobustnessRecord {
  std::string model_id;
  std::string image_id;
  Cell cell;
  PropertyKind kind = PropertyKind::P1;
  int target_class = 0;
  double threshold = 0;
  double lower_init = 0, upper_init = 0;
  UnsafeDirection direction = UnsafeDirection::HighEpsUnsafe;
  std::vector<int> lines;
  std::vector<BisectionStep> log;
  std::vector<std::string> ce_paths;  // sidecar JSON paths relative to the search dir

  bool any_deadline_fired() const {
    return std::any_of(log.begin(), log.end(), [](const BisectionStep& s) { return s.deadline_fired; });
  }
};

inline nlohmann::json to_json(const RobustnessRecord& r) {
  nlohmann::json log = nlohmann::json::array();
  for (const auto& s : r.log)
    log.push_back({{"mid", s.mid}, {"found_ce", s.found}, {"deadline_fired", s.deadline_fired}, {"low", s.low},
                   {"high", s.high}});
  return {{"model_id", r.model_id},   {"image_id", r.image_id},       {"cell", {r.cell.i, r.cell.j}},
          {"property", to_string(r.kind)}, {"p", r.target_class},     {"threshold", r.threshold},
          {"lower_init", r.lower_init}, {"upper_init", r.upper_init}, {"direction", to_string(r.direction)},
          {"lines", r.lines},         {"log", log},                   {"ce_paths", r.ce_paths}};
}

inline RobustnessRecord record_from_json(const nlohmann::json& j) {
  RobustnessRecord r;
  r.model_id = j.at("model_id").get<std::string>();
  r.image_id = j.at("image_id").get<std::string>();
  r.cell = {j.at("cell").at(0).get<int>(), j.at("cell").at(1).get<int>()};
  r.kind = parse_property(j.at("property").get<std::string>());
  r.target_class = j.at("p").get<int>();
  r.threshold = j.at("threshold").get<double>();
  r.lower_init = j.at("lower_init").get<double>();
  r.upper_init = j.at("upper_init").get<double>();
  r.direction = parse_direction(j.at("direction").get<std::string>());
  r.lines = j.at("lines").get<std::vector<int>>();
  for (const auto& s : j.at("log"))
    r.log.push_back({s.at("mid").get<double>(), s.at("found_ce").get<bool>(), s.at("deadline_fired").get<bool>(),
                     s.at("low").get<double>(), s.at("high").get<double>()});
  r.ce_paths = j.at("ce_paths").get<std::vector<std::string>>();
  return r;
}

inline void write_records(const fs::path& path, const std::vector<RobustnessRecord>& records) {
  std::string out;
  for (const auto& r : records) out += to_json(r).dump() + "\n";
  write_file_atomic(path, out);
}

inline std::vector<RobustnessRecord> read_records(const fs::path& path) {
  std::vector<RobustnessRecord> out;
  std::istringstream in(read_file(path));
  std::string line;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty()) continue;
    try {
      out.push_back(record_from_json(nlohmann::json::parse(line)));
    } catch (const std::exception& e) {
      throw std::runtime_error(path.string() + ":" + std::to_string(lineno) + ": " + e.what());
    }
  }
  return out;
}

// ---- counter-example files -------------------------------------------------

/// Files written per counter-example, all sharing one stem:
///   <stem>.pgm / <stem>.jsonl  dataset-ready image and copied labels
///   <stem>.raw / <stem>.orig.raw  lossless adversarial and source images
///   <stem>.json  metadata sidecar

inline std::string save_counterexample(const fs::path& dir, const std::string& stem, const CounterExample& ce,
                                       const Image& original, const std::vector<Annotation>& labels,
                                       const std::string& model_id, const AttackConfig& attack) {
  write_pgm(dir / (stem + ".pgm"), ce.x_adv);
  write_labels(dir / (stem + ".jsonl"), labels);
  write_raw_image(dir / (stem + ".raw"), ce.x_adv);
  write_raw_image(dir / (stem + ".orig.raw"), original);
  nlohmann::json j{{"stem", stem},
                   {"source_id", ce.source_id},
                   {"model_id", model_id},
                   {"spec", to_json(ce.spec)},
                   {"epsilon", ce.spec.epsilon},
                   {"margin", ce.margin},
                   {"steps_used", ce.steps_used},
                   {"restart", ce.restart},
                   {"attack", to_json(attack)},
                   {"image", stem + ".pgm"},
                   {"labels", stem + ".jsonl"},
                   {"raw", stem + ".raw"},
                   {"original_raw", stem + ".orig.raw"}};
  write_file_atomic(dir / (stem + ".json"), j.dump(2) + "\n");
  return stem + ".json";
}

struct LoadedCounterExample {
  nlohmann::json meta;
  PropertySpec spec;
  Image x_adv;
  Image original;
};

inline LoadedCounterExample load_counterexample(const fs::path& sidecar) {
  if (!fs::exists(sidecar)) throw std::runtime_error("counter-example file missing: " + sidecar.string());
  LoadedCounterExample ce;
  ce.meta = nlohmann::json::parse(read_file(sidecar));
  const fs::path dir = sidecar.parent_path();
  ce.spec = spec_from_json(ce.meta.at("spec"));
  ce.x_adv = read_raw_image(dir / ce.meta.at("raw").get<std::string>());
  ce.original = read_raw_image(dir / ce.meta.at("original_raw").get<std::string>());
  return ce;
}

struct ReplayResult {
  bool in_region = false;
  bool violates = false;
};

/// Re-derives the region from the stored source image and re-runs the model.
inline ReplayResult replay(const ModelParams& model, const LoadedCounterExample& ce) {
  const FeasibleRegion region = make_region(ce.original, ce.spec);
  return {region.contains(ce.x_adv), check_violation(model, ce.x_adv, ce.spec)};
}

// ---- search ----------------------------------------------------------------

inline std::uint64_t fnv1a(const std::string& s) {
  std::uint64_t h = 1469598103934665603ULL;
  for (unsigned char ch : s) h = (h ^ ch) * 1099511628211ULL;
  return h;
}

struct Instance {
  std::size_t sample_index = 0;
  Detection baseline;
};

/// Baseline detections that the search attacks, per image.
inline std::vector<Instance> baseline_instances(const ModelParams& model, const std::vector<Sample>& samples,
                                                double xi_obj, BoxSelection selection) {
  std::vector<Instance> out;
  for (std::size_t s = 0; s < samples.size(); ++s) {
    auto dets = detect(model, samples[s].image, xi_obj);
    if (selection == BoxSelection::TopConfidence && dets.size() > 1) dets.resize(1);
    for (auto& d : dets) out.push_back({s, std::move(d)});
  }
  return out;
}

inline PropertySpec instance_spec(const SearchConfig& cfg, const Sample& sample, const Detection& det,
                                  std::uint64_t seed) {
  PropertySpec spec;
  spec.kind = cfg.kind;
  spec.xi_obj = cfg.xi_obj;
  spec.target_cell = det.cell;
  spec.target_class = det.class_argmax;
  if (cfg.kind == PropertyKind::P2)
    spec.lines = sample_lines(sample.image.h, derive_seed(seed, {fnv1a(sample.id), static_cast<std::uint64_t>(det.cell.i),
                                                                 static_cast<std::uint64_t>(det.cell.j)}));
  return spec;
}

struct PropertyEvaluation {
  bool found = false;
  bool deadline_fired = false;
  std::optional<CounterExample> ce;
};

/// One property check at `epsilon` for a fixed instance spec (L already fixed).
inline PropertyEvaluation eval_prop(const ModelParams& model, const Image& image, PropertySpec spec, double epsilon,
                                    const AttackConfig& attack, const std::string& source_id = {}) {
  spec.epsilon = epsilon;
  if (check_violation(model, image, spec))
    throw std::invalid_argument("eval_prop: no valid baseline detection at target cell");
  const bool degenerate = spec.kind == PropertyKind::P1 ? epsilon <= 0.0 : epsilon >= 1.0;
  if (degenerate) return {};
  PgdResult r = pgd(model, image, spec, attack, source_id);
  PropertyEvaluation e;
  e.found = r.ce.has_value();
  e.deadline_fired = r.deadline_fired;
  e.ce = std::move(r.ce);
  return e;
}

struct SearchResult {
  std::vector<RobustnessRecord> records;
  std::size_t skipped = 0;  // instances without a valid baseline
  std::size_t counterexamples = 0;
};

/// Runs the bisection for every baseline detection of every sample. CEs are
/// written under out_dir/counterexamples; records to out_dir/records.jsonl.
inline SearchResult binary_search_bound(const ModelParams& model, const std::string& model_id,
                                        const std::vector<Sample>& samples, const SearchConfig& cfg,
                                        const AttackConfig& attack, const fs::path& out_dir, int workers = 1) {
  cfg.validate();
  if (samples.empty()) throw std::invalid_argument("binary_search_bound: dataset is empty");
  const auto instances = baseline_instances(model, samples, cfg.xi_obj, cfg.selection);
  const fs::path ce_dir = out_dir / "counterexamples";
  fs::create_directories(ce_dir);

  std::vector<std::optional<RobustnessRecord>> slots(instances.size());
  parallel_for(instances.size(), workers, [&](std::size_t k) {
    const Instance& inst = instances[k];
    const Sample& sample = samples[inst.sample_index];
    const PropertySpec base = instance_spec(cfg, sample, inst.baseline, attack.seed);
    if (check_violation(model, sample.image, base)) return;  // baseline not satisfied: skip

    RobustnessRecord rec;
    rec.model_id = model_id;
    rec.image_id = sample.id;
    rec.cell = inst.baseline.cell;
    rec.kind = cfg.kind;
    rec.target_class = base.target_class;
    rec.lower_init = cfg.lower;
    rec.upper_init = cfg.upper;
    rec.direction = cfg.direction;
    rec.lines = base.lines;
    const auto bis = bisect(cfg, [&](double mid, int it) {
      AttackConfig a = attack;
      a.seed = derive_seed(attack.seed, {fnv1a(sample.id), static_cast<std::uint64_t>(rec.cell.i),
                                         static_cast<std::uint64_t>(rec.cell.j), static_cast<std::uint64_t>(it)});
      PropertyEvaluation e = eval_prop(model, sample.image, base, mid, a, sample.id);
      if (e.ce) {
        const std::string stem = to_string(cfg.kind) + "_" + sample.id + "_c" + std::to_string(rec.cell.i) + "_" +
                                 std::to_string(rec.cell.j) + "_it" + std::to_string(it);
        rec.ce_paths.push_back("counterexamples/" +
                               save_counterexample(ce_dir, stem, *e.ce, sample.image, sample.annotations, model_id, a));
      }
      return EvalOutcome{e.found, e.deadline_fired};
    });
    rec.threshold = bis.threshold;
    rec.log = bis.log;
    slots[k] = std::move(rec);
  });

  SearchResult result;
  for (auto& s : slots) {
    if (!s) {
      ++result.skipped;
      continue;
    }
    result.counterexamples += s->ce_paths.size();
    result.records.push_back(std::move(*s));
  }
  write_records(out_dir / "records.jsonl", result.records);
  return result;
}

/// Collects every saved counter-example into a dataset directory.
inline DatasetManifest assemble_adv_dataset(const std::vector<RobustnessRecord>& records, const fs::path& search_dir,
                                            const fs::path& out_dir, const std::string& name) {
  std::vector<Sample> samples;
  std::vector<fs::path> sidecars;
  for (const auto& r : records) {
    for (const auto& rel : r.ce_paths) {
      const fs::path sidecar = search_dir / rel;
      if (!fs::exists(sidecar)) throw std::runtime_error("assemble_adv_dataset: missing counter-example " + sidecar.string());
      const auto meta = nlohmann::json::parse(read_file(sidecar));
      const fs::path dir = sidecar.parent_path();
      for (const char* key : {"image", "labels", "raw", "original_raw"})
        if (!fs::exists(dir / meta.at(key).get<std::string>()))
          throw std::runtime_error("assemble_adv_dataset: missing counter-example file " +
                                   (dir / meta.at(key).get<std::string>()).string());
      samples.push_back({meta.at("stem").get<std::string>(), read_pgm(dir / meta.at("image").get<std::string>()),
                         read_labels(dir / meta.at("labels").get<std::string>())});
      sidecars.push_back(sidecar);
    }
  }
  DatasetManifest m;
  m.name = name;
  m.variant = Variant::Adversarial;
  m.generator = {{"source", "counterexamples"}, {"records", records.size()}};
  m = write_dataset(out_dir, m, samples);
  // keep lossless copies next to the dataset so it replays on its own
  const fs::path ce_out = out_dir / "counterexamples";
  fs::create_directories(ce_out);
  for (const auto& sc : sidecars) {
    const auto meta = nlohmann::json::parse(read_file(sc));
    for (const char* key : {"raw", "original_raw"}) {
      const std::string f = meta.at(key).get<std::string>();
      fs::copy_file(sc.parent_path() / f, ce_out / f, fs::copy_options::overwrite_existing);
    }
    fs::copy_file(sc, ce_out / sc.filename(), fs::copy_options::overwrite_existing);
  }
  return m;
}

}  // namespace rosar
