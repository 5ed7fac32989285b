#pragma once

// Safety properties over one targeted grid cell.
//
//   P1: (1-eps)*x0 <= x <= (1+eps)*x0 on every pixel/channel (clamped to [0,1]).
//   P2: eps*x0 <= x <= x0 on rows in L, x == x0 elsewhere.
//
// Output side for both: objectness >= xi_obj and the class-p score strictly
// above every other class score. A violation is the negation.

#include <algorithm>
#include <set>
#include <string>
#include <vector>

#include <json.hpp>

#include "rosar/detector.hpp"
#include "rosar/image.hpp"
#include "rosar/sonar_synth.hpp"

namespace rosar {

enum class PropertyKind { P1, P2 };

inline std::string to_string(PropertyKind k) { return k == PropertyKind::P1 ? "p1" : "p2"; }
inline PropertyKind parse_property(const std::string& s) {
  if (s == "p1" || s == "P1") return PropertyKind::P1;
  if (s == "p2" || s == "P2") return PropertyKind::P2;
  throw std::invalid_argument("unknown property '" + s + "' (expected p1 or p2)");
}

struct PropertySpec {
  PropertyKind kind = PropertyKind::P1;
  double epsilon = 0.0;
  std::vector<int> lines;  // 0-based row indices, P2 only
  double xi_obj = kDefaultConfThreshold;
  Cell target_cell;
  int target_class = 0;

  bool operator==(const PropertySpec&) const = default;
};

inline nlohmann::json to_json(const PropertySpec& s) {
  return {{"kind", to_string(s.kind)},
          {"epsilon", s.epsilon},
          {"lines", s.lines},
          {"xi_obj", s.xi_obj},
          {"target_cell", {s.target_cell.i, s.target_cell.j}},
          {"p", s.target_class}};
}

inline PropertySpec spec_from_json(const nlohmann::json& j) {
  PropertySpec s;
  s.kind = parse_property(j.at("kind").get<std::string>());
  s.epsilon = j.at("epsilon").get<double>();
  s.lines = j.at("lines").get<std::vector<int>>();
  s.xi_obj = j.at("xi_obj").get<double>();
  s.target_cell = {j.at("target_cell").at(0).get<int>(), j.at("target_cell").at(1).get<int>()};
  s.target_class = j.at("p").get<int>();
  return s;
}

struct FeasibleRegion {
  Image lower;
  Image upper;

  bool contains(const Image& x) const {
    if (!x.same_shape(lower)) return false;
    for (std::size_t i = 0; i < x.size(); ++i)
      if (!(x.pixels[i] >= lower.pixels[i] && x.pixels[i] <= upper.pixels[i])) return false;
    return true;
  }
  bool is_singleton() const { return lower.pixels == upper.pixels; }
  /// Interval containment: this region inside `outer`.
  bool subset_of(const FeasibleRegion& outer) const {
    for (std::size_t i = 0; i < lower.size(); ++i)
      if (lower.pixels[i] < outer.lower.pixels[i] || upper.pixels[i] > outer.upper.pixels[i]) return false;
    return true;
  }
};

inline FeasibleRegion region_p1(const Image& x0, double epsilon) {
  if (!(epsilon >= 0.0 && epsilon < 1.0)) throw std::invalid_argument("region_p1: epsilon must be in [0,1)");
  FeasibleRegion r{x0, x0};
  for (std::size_t i = 0; i < x0.size(); ++i) {
    r.lower.pixels[i] = std::clamp((1.0 - epsilon) * x0.pixels[i], 0.0, 1.0);
    r.upper.pixels[i] = std::clamp((1.0 + epsilon) * x0.pixels[i], 0.0, 1.0);
  }
  return r;
}

inline FeasibleRegion region_p2(const Image& x0, double epsilon, const std::vector<int>& lines) {
  if (!(epsilon > 0.0 && epsilon <= 1.0)) throw std::invalid_argument("region_p2: epsilon must be in (0,1]");
  if (lines.empty()) throw std::invalid_argument("region_p2: line set L must be nonempty");
  FeasibleRegion r{x0, x0};
  for (int row : lines) {
    if (row < 0 || row >= x0.h)
      throw std::out_of_range("region_p2: row " + std::to_string(row) + " outside image of height " +
                              std::to_string(x0.h));
    for (int j = 0; j < x0.w; ++j)
      for (int k = 0; k < x0.c; ++k) r.lower.at(row, j, k) = epsilon * x0.at(row, j, k);
  }
  return r;
}

inline FeasibleRegion make_region(const Image& x0, const PropertySpec& spec) {
  return spec.kind == PropertyKind::P1 ? region_p1(x0, spec.epsilon) : region_p2(x0, spec.epsilon, spec.lines);
}

/// Random dark-line configuration, sorted 0-based rows.
inline std::vector<int> sample_lines(int h, std::uint64_t seed) {
  if (h < 8) throw std::invalid_argument("sample_lines: h must be >= 8");
  Rng rng(derive_seed(seed, {0x6c696e6573ULL}));
  const auto rows = sample_row_bands(h, rng, 5, 3);
  return {rows.begin(), rows.end()};
}

inline Image project(const Image& x, const FeasibleRegion& region) {
  if (!x.same_shape(region.lower)) throw std::invalid_argument("project: shape mismatch");
  Image out = x;
  for (std::size_t i = 0; i < out.size(); ++i)
    out.pixels[i] = std::clamp(out.pixels[i], region.lower.pixels[i], region.upper.pixels[i]);
  return out;
}

/// True iff the output-side conjunction fails for the given scores.
inline bool violates(const CellScores& s, const PropertySpec& spec) {
  if (!(s.objectness >= spec.xi_obj)) return true;
  const double yp = s.class_scores.at(spec.target_class);
  for (std::size_t l = 0; l < s.class_scores.size(); ++l)
    if (static_cast<int>(l) != spec.target_class && !(yp > s.class_scores[l])) return true;
  return false;
}

inline bool check_violation(const ModelParams& model, const Image& x, const PropertySpec& spec) {
  Graph g;
  const auto f = forward(g, model, x);
  return violates(cell_scores(f.raw, spec.target_cell), spec);
}

}  // namespace rosar
