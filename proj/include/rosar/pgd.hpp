#pragma once

// Projected sign-gradient descent on the property margin.

#include <chrono>
#include <cmath>
#include <limits>
#include <optional>
#include <string>

#include <json.hpp>

#include "rosar/detector.hpp"
#include "rosar/properties.hpp"
#include "rosar/rng.hpp"

namespace rosar {

struct AttackConfig {
  int steps = 40;
  double step_size = 0.0;  // 0 selects 2.5 * mean region width / steps
  int restarts = 3;
  double time_limit = 10.0;  // seconds; infinity disables the deadline
  std::uint64_t seed = 0;

  void validate() const {
    if (steps < 1) throw std::invalid_argument("attack config: steps must be >= 1");
    if (restarts < 1) throw std::invalid_argument("attack config: restarts must be >= 1");
    if (!(time_limit > 0)) throw std::invalid_argument("attack config: time_limit must be > 0");
    if (step_size < 0) throw std::invalid_argument("attack config: step_size must be >= 0");
  }
};

inline nlohmann::json to_json(const AttackConfig& c) {
  return {{"steps", c.steps},
          {"step_size", c.step_size},
          {"restarts", c.restarts},
          {"time_limit", std::isinf(c.time_limit) ? nlohmann::json("inf") : nlohmann::json(c.time_limit)},
          {"seed", c.seed}};
}

struct CounterExample {
  Image x_adv;
  std::string source_id;
  PropertySpec spec;
  double margin = 0;
  int steps_used = 0;
  int restart = 0;
};

/// min(obj - xi, y_p - max_{l != p} y_l) at the target cell. Negative implies
/// a violation; zero with a class tie is also a violation.
inline Var attack_margin(const RawGrid& raw, const PropertySpec& spec) {
  const int g = raw.grid, n = raw.num_classes;
  const auto& c = spec.target_cell;
  if (c.i < 0 || c.j < 0 || c.i >= g || c.j >= g) throw std::out_of_range("attack_margin: target cell outside grid");
  if (spec.target_class < 0 || spec.target_class >= n) throw std::out_of_range("attack_margin: class out of range");
  const std::size_t flat = static_cast<std::size_t>(c.i) * g + c.j;
  Var obj = add_scalar(sigmoid(gather(raw.obj, {flat})), -spec.xi_obj);
  std::vector<std::size_t> cls_idx;
  for (int k = 0; k < n; ++k) cls_idx.push_back(flat * n + k);
  Var probs = softmax_lastdim(gather(raw.cls, cls_idx));
  std::vector<std::size_t> others;
  for (int k = 0; k < n; ++k)
    if (k != spec.target_class) others.push_back(static_cast<std::size_t>(k));
  Var best_other = max_reduce(gather(probs, others));
  Var yp = gather(probs, {static_cast<std::size_t>(spec.target_class)});
  Var class_gap = reshape(yp, Shape{}) - best_other;
  return minimum(reshape(obj, Shape{}), class_gap);
}

struct MarginEval {
  double margin = 0;
  bool violated = false;
  std::vector<double> grad;  // d margin / d x, empty unless requested
};

inline MarginEval evaluate_margin(const ModelParams& model, const Image& x, const PropertySpec& spec, bool with_grad) {
  Graph g;
  auto f = forward(g, model, x, with_grad);
  Var m = attack_margin(f.raw, spec);
  MarginEval r;
  r.margin = m.item();
  r.violated = violates(cell_scores(f.raw, spec.target_cell), spec);
  if (with_grad) {
    g.backward(m);
    r.grad = f.input.grad();
  }
  return r;
}

struct PgdResult {
  std::optional<CounterExample> ce;
  bool deadline_fired = false;
  int evaluations = 0;
};

inline double default_step_size(const FeasibleRegion& region, int steps) {
  double width = 0.0;
  std::size_t count = 0;
  for (std::size_t i = 0; i < region.lower.size(); ++i) {
    const double d = region.upper.pixels[i] - region.lower.pixels[i];
    if (d > 0) {
      width += d;
      ++count;
    }
  }
  return count ? 2.5 * (width / static_cast<double>(count)) / steps : 0.0;
}

/// Searches the property's feasible region around `x0` for a violating input.
/// Every iterate is projected; the first violating iterate is returned.
inline PgdResult pgd(const ModelParams& model, const Image& x0, const PropertySpec& spec, const AttackConfig& cfg,
                     const std::string& source_id = {}) {
  cfg.validate();
  using clock = std::chrono::steady_clock;
  const bool timed = std::isfinite(cfg.time_limit);
  const auto deadline = timed ? clock::now() + std::chrono::duration_cast<clock::duration>(
                                                   std::chrono::duration<double>(cfg.time_limit))
                              : clock::time_point::max();
  PgdResult result;
  const FeasibleRegion region = make_region(x0, spec);
  if (region.is_singleton()) return result;

  std::vector<std::size_t> free_idx;
  for (std::size_t i = 0; i < region.lower.size(); ++i)
    if (region.upper.pixels[i] > region.lower.pixels[i]) free_idx.push_back(i);
  const double alpha = cfg.step_size > 0 ? cfg.step_size : default_step_size(region, cfg.steps);

  Rng rng(cfg.seed);
  for (int restart = 0; restart < cfg.restarts; ++restart) {
    Image x = x0;
    for (std::size_t i : free_idx) x.pixels[i] = uniform(rng, region.lower.pixels[i], region.upper.pixels[i]);
    x = project(x, region);
    for (int t = 0; t <= cfg.steps; ++t) {
      if (timed && clock::now() >= deadline) {
        result.deadline_fired = true;
        return result;
      }
      const bool last = t == cfg.steps;
      MarginEval e = evaluate_margin(model, x, spec, !last);
      ++result.evaluations;
      if (e.violated) {
        result.ce = CounterExample{x, source_id, spec, e.margin, t, restart};
        return result;
      }
      if (last) break;
      for (std::size_t i : free_idx) {
        const double gi = e.grad[i];
        const double s = gi > 0 ? 1.0 : (gi < 0 ? -1.0 : 0.0);
        x.pixels[i] = std::clamp(x.pixels[i] - alpha * s, region.lower.pixels[i], region.upper.pixels[i]);
      }
    }
  }
  return result;
}

}  // namespace rosar
