#pragma once

// Synthetic side-scan-sonar waterfall generator and dataset directory I/O.
//
// Three regimes: clean (straight wall), surface (wavy wall, wave-modulated
// background), noisy (clean geometry plus zeroed horizontal dropout bands).
// Layout on disk: manifest.json, images/NNNN.pgm, labels/NNNN.jsonl.

#include <algorithm>
#include <cmath>
#include <numbers>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include <json.hpp>

#include "rosar/image.hpp"
#include "rosar/rng.hpp"

namespace rosar {

enum class Variant { Clean, Surface, Noisy, Adversarial };

inline std::string to_string(Variant v) {
  switch (v) {
    case Variant::Clean: return "clean";
    case Variant::Surface: return "surface";
    case Variant::Noisy: return "noisy";
    case Variant::Adversarial: return "adversarial";
  }
  return "?";
}

inline Variant parse_variant(const std::string& s) {
  if (s == "clean") return Variant::Clean;
  if (s == "surface") return Variant::Surface;
  if (s == "noisy") return Variant::Noisy;
  if (s == "adversarial") return Variant::Adversarial;
  throw std::invalid_argument("unknown variant '" + s + "' (expected clean, surface, noisy or adversarial)");
}

/// Generator knobs. Values are chosen for visual plausibility; they are not
/// calibrated against field recordings.
struct SynthParams {
  double background_mean = 0.3;
  double nadir_intensity = 0.8;
  int nadir_width = 2;
  double wall_intensity = 0.9;
  int wall_thickness = 4;
  double shadow_factor = 0.35;
  int shadow_width = 6;
  double gap_probability = 0.3;
  double debris_density = 0.5;
  double wall_probability = 1.0;
  int segment_rows = 16;
  int max_dropout_bands = 5;
  int max_dropout_thickness = 3;

  nlohmann::json to_json() const {
    return {{"background_mean", background_mean}, {"nadir_intensity", nadir_intensity},
            {"nadir_width", nadir_width},         {"wall_intensity", wall_intensity},
            {"wall_thickness", wall_thickness},   {"shadow_factor", shadow_factor},
            {"shadow_width", shadow_width},       {"gap_probability", gap_probability},
            {"debris_density", debris_density},   {"wall_probability", wall_probability},
            {"segment_rows", segment_rows},       {"max_dropout_bands", max_dropout_bands},
            {"max_dropout_thickness", max_dropout_thickness}};
  }
  static SynthParams from_json(const nlohmann::json& j) {
    SynthParams p;
    p.background_mean = j.value("background_mean", p.background_mean);
    p.nadir_intensity = j.value("nadir_intensity", p.nadir_intensity);
    p.nadir_width = j.value("nadir_width", p.nadir_width);
    p.wall_intensity = j.value("wall_intensity", p.wall_intensity);
    p.wall_thickness = j.value("wall_thickness", p.wall_thickness);
    p.shadow_factor = j.value("shadow_factor", p.shadow_factor);
    p.shadow_width = j.value("shadow_width", p.shadow_width);
    p.gap_probability = j.value("gap_probability", p.gap_probability);
    p.debris_density = j.value("debris_density", p.debris_density);
    p.wall_probability = j.value("wall_probability", p.wall_probability);
    p.segment_rows = j.value("segment_rows", p.segment_rows);
    p.max_dropout_bands = j.value("max_dropout_bands", p.max_dropout_bands);
    p.max_dropout_thickness = j.value("max_dropout_thickness", p.max_dropout_thickness);
    return p;
  }
};

/// Union of 1..max_bands contiguous row bands, each 1..max_thickness rows.
inline std::set<int> sample_row_bands(int h, Rng& rng, int max_bands = 5, int max_thickness = 3) {
  std::set<int> rows;
  const int bands = uniform_int(rng, 1, max_bands);
  for (int b = 0; b < bands; ++b) {
    const int t = uniform_int(rng, 1, max_thickness);
    const int start = uniform_int(rng, 0, h - t);
    for (int r = start; r < start + t; ++r) rows.insert(r);
  }
  return rows;
}

namespace detail {

// Rayleigh sample with unit mean.
inline double rayleigh_unit(Rng& rng) {
  constexpr double sigma = 0.7978845608028654;  // sqrt(2/pi)
  const double u = std::max(uniform01(rng), 1e-12);
  return sigma * std::sqrt(-2.0 * std::log(u));
}

}  // namespace detail

struct Sample {
  std::string id;
  Image image;
  std::vector<Annotation> annotations;
};

inline Sample gen_waterfall(Variant variant, std::uint64_t seed, int h, int w, const SynthParams& p = {}) {
  if (variant == Variant::Adversarial) throw std::invalid_argument("gen_waterfall: adversarial is not a generator variant");
  if (h < 32 || w < 32) throw std::invalid_argument("gen_waterfall: h and w must be >= 32");
  Rng rng(derive_seed(seed, {static_cast<std::uint64_t>(variant), 0x736f6e6172ULL}));
  Sample s;
  s.image = Image(h, w, 1);
  Image& im = s.image;

  const double wave_period = uniform(rng, 12.0, 24.0);
  const double wave_phase = uniform(rng, 0.0, 2 * std::numbers::pi);
  for (int i = 0; i < h; ++i) {
    double row_gain = 1.0;
    if (variant == Variant::Surface) row_gain = 1.0 + 0.35 * std::sin(2 * std::numbers::pi * i / wave_period + wave_phase);
    for (int j = 0; j < w; ++j) im.at(i, j) = p.background_mean * row_gain * detail::rayleigh_unit(rng);
  }

  const int nadir0 = w / 2 - p.nadir_width / 2;
  for (int i = 0; i < h; ++i)
    for (int j = nadir0; j < nadir0 + p.nadir_width; ++j) im.at(i, j) = p.nadir_intensity * (0.9 + 0.2 * uniform01(rng));

  const bool has_wall = uniform01(rng) < p.wall_probability;
  if (has_wall) {
    const bool left = uniform01(rng) < 0.5;
    const int margin = p.wall_thickness + 4;
    const int lo = left ? margin : w / 2 + p.nadir_width + 4;
    const int hi = left ? w / 2 - p.nadir_width - 4 - p.wall_thickness : w - margin - p.wall_thickness;
    const double base_col = uniform(rng, lo, std::max(lo, hi));
    const double tilt = uniform(rng, -0.05, 0.05);
    const double amp = variant == Variant::Surface ? uniform(rng, 2.0, 3.5) : 0.0;
    const double period = uniform(rng, 20.0, 40.0);
    const double phase = uniform(rng, 0.0, 2 * std::numbers::pi);
    auto wall_col = [&](int i) {
      return base_col + tilt * (i - h / 2.0) + amp * std::sin(2 * std::numbers::pi * i / period + phase);
    };
    // shadow extends away from nadir
    const int shadow_dir = left ? -1 : 1;

    const int segments = h / p.segment_rows;
    std::vector<bool> gap(segments);
    int walls = 0;
    for (int sgi = 0; sgi < segments; ++sgi) {
      gap[sgi] = uniform01(rng) < p.gap_probability;
      walls += gap[sgi] ? 0 : 1;
    }
    if (walls == 0) gap[uniform_int(rng, 0, segments - 1)] = false;

    for (int sgi = 0; sgi < segments; ++sgi) {
      const int r0 = sgi * p.segment_rows;
      const int r1 = std::min(h, r0 + p.segment_rows);
      double cmin = 1e9, cmax = -1e9;
      for (int i = r0; i < r1; ++i) {
        const int c0 = static_cast<int>(std::lround(wall_col(i)));
        cmin = std::min<double>(cmin, c0);
        cmax = std::max<double>(cmax, c0 + p.wall_thickness);
        for (int dj = 0; dj < p.wall_thickness; ++dj) {
          const int j = c0 + dj;
          if (j < 0 || j >= w) continue;
          if (!gap[sgi]) {
            im.at(i, j) = p.wall_intensity * (0.85 + 0.3 * uniform01(rng));
          } else if (uniform01(rng) < p.debris_density) {
            im.at(i, j) = p.wall_intensity * (0.7 + 0.3 * uniform01(rng));
          }
        }
        if (!gap[sgi]) {
          for (int k = 1; k <= p.shadow_width; ++k) {
            const int j = shadow_dir < 0 ? c0 - k : c0 + p.wall_thickness - 1 + k;
            if (j >= 0 && j < w) im.at(i, j) *= p.shadow_factor;
          }
        }
      }
      const double x0 = std::max(0.0, cmin - 1.0), x1 = std::min<double>(w, cmax + 1.0);
      Annotation a;
      a.class_id = gap[sgi] ? kClassNoWall : kClassWall;
      a.bbox = {(x0 + x1) / 2.0 / w, (r0 + r1) / 2.0 / h, (x1 - x0) / w, static_cast<double>(r1 - r0) / h};
      s.annotations.push_back(a);
    }
  }

  clamp_unit(im);
  if (variant == Variant::Noisy) {
    for (int r : sample_row_bands(h, rng, p.max_dropout_bands, p.max_dropout_thickness))
      for (int j = 0; j < w; ++j) im.at(r, j) = 0.0;
  }
  return s;
}

// ---- dataset directory -----------------------------------------------------

struct DatasetEntry {
  std::string id;
  std::string image;   // relative to dataset root
  std::string labels;  // relative to dataset root
  bool operator==(const DatasetEntry&) const = default;
};

struct DatasetManifest {
  int format_version = 1;
  std::string name;
  Variant variant = Variant::Clean;
  std::uint64_t seed = 0;
  nlohmann::json generator;  // parameters sufficient for regeneration
  std::vector<DatasetEntry> entries;

  bool operator==(const DatasetManifest& o) const {
    return name == o.name && variant == o.variant && seed == o.seed && generator == o.generator && entries == o.entries;
  }
};

inline nlohmann::json to_json(const DatasetManifest& m) {
  nlohmann::json j;
  j["format_version"] = m.format_version;
  j["name"] = m.name;
  j["variant"] = to_string(m.variant);
  j["seed"] = m.seed;
  j["generator"] = m.generator.is_null() ? nlohmann::json::object() : m.generator;
  j["entries"] = nlohmann::json::array();
  for (const auto& e : m.entries) j["entries"].push_back({{"id", e.id}, {"image", e.image}, {"labels", e.labels}});
  return j;
}

inline DatasetManifest manifest_from_json(const nlohmann::json& j) {
  DatasetManifest m;
  m.format_version = j.at("format_version").get<int>();
  m.name = j.at("name").get<std::string>();
  m.variant = parse_variant(j.at("variant").get<std::string>());
  m.seed = j.at("seed").get<std::uint64_t>();
  m.generator = j.value("generator", nlohmann::json::object());
  for (const auto& e : j.at("entries"))
    m.entries.push_back({e.at("id").get<std::string>(), e.at("image").get<std::string>(), e.at("labels").get<std::string>()});
  return m;
}

/// Writes images, labels and manifest. Entry paths in `manifest` are rebuilt
/// from sample ids; the completed manifest is returned.
inline DatasetManifest write_dataset(const fs::path& dir, DatasetManifest manifest, const std::vector<Sample>& samples) {
  fs::create_directories(dir / "images");
  fs::create_directories(dir / "labels");
  manifest.entries.clear();
  for (const auto& s : samples) {
    DatasetEntry e{s.id, "images/" + s.id + ".pgm", "labels/" + s.id + ".jsonl"};
    write_pgm(dir / e.image, s.image);
    write_labels(dir / e.labels, s.annotations);
    manifest.entries.push_back(e);
  }
  write_file_atomic(dir / "manifest.json", to_json(manifest).dump(2) + "\n");
  return manifest;
}

/// Reads and validates manifest.json; every referenced file must exist and parse.
inline DatasetManifest read_dataset(const fs::path& dir) {
  const fs::path mpath = dir / "manifest.json";
  if (!fs::exists(mpath)) throw std::runtime_error("dataset manifest missing: " + mpath.string());
  DatasetManifest m;
  try {
    m = manifest_from_json(nlohmann::json::parse(read_file(mpath)));
  } catch (const nlohmann::json::exception& e) {
    throw std::runtime_error(mpath.string() + ": " + e.what());
  }
  for (const auto& e : m.entries) {
    read_pgm(dir / e.image);
    read_labels(dir / e.labels);
  }
  return m;
}

inline std::vector<Sample> load_samples(const fs::path& dir, const DatasetManifest& m) {
  std::vector<Sample> out;
  out.reserve(m.entries.size());
  for (const auto& e : m.entries) out.push_back({e.id, read_pgm(dir / e.image), read_labels(dir / e.labels)});
  return out;
}

inline std::vector<Sample> load_samples(const fs::path& dir) { return load_samples(dir, read_dataset(dir)); }

inline std::string sample_id(std::size_t index) {
  char buf[16];
  std::snprintf(buf, sizeof buf, "%04zu", index);
  return buf;
}

/// Generates `count` images of one variant; image k uses derive_seed(seed, k).
inline std::vector<Sample> generate_samples(Variant variant, int count, std::uint64_t seed, int h, int w,
                                            const SynthParams& p = {}) {
  std::vector<Sample> out;
  for (int k = 0; k < count; ++k) {
    Sample s = gen_waterfall(variant, derive_seed(seed, {static_cast<std::uint64_t>(k)}), h, w, p);
    s.id = to_string(variant) + "_" + sample_id(static_cast<std::size_t>(k));
    out.push_back(std::move(s));
  }
  return out;
}

inline DatasetManifest generate_dataset(const fs::path& dir, const std::string& name, Variant variant, int count,
                                        std::uint64_t seed, int h, int w, const SynthParams& p = {}) {
  DatasetManifest m;
  m.name = name;
  m.variant = variant;
  m.seed = seed;
  m.generator = p.to_json();
  m.generator["h"] = h;
  m.generator["w"] = w;
  m.generator["count"] = count;
  return write_dataset(dir, m, generate_samples(variant, count, seed, h, w, p));
}

}  // namespace rosar
