#pragma once

// Training, adversarial fine-tuning, detection metrics and robustness
// statistics, plus the CSV/JSON report files.

#include <algorithm>
#include <cmath>
#include <functional>
#include <map>
#include <numeric>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "rosar/bound_search.hpp"
#include "rosar/detector.hpp"
#include "rosar/parallel.hpp"
#include "rosar/sonar_synth.hpp"

namespace rosar {

struct TrainConfig {
  int epochs = 30;
  double lr = 0.01;
  double momentum = 0.9;
  std::uint64_t seed = 0;
  double grad_clip = 10.0;  // global gradient-norm bound; <= 0 disables

  void validate() const {
    if (epochs < 0) throw std::invalid_argument("train config: epochs must be >= 0");
    if (!(lr > 0)) throw std::invalid_argument("train config: lr must be > 0");
    if (!std::isfinite(grad_clip)) throw std::invalid_argument("train config: grad_clip must be finite");
  }
};

inline constexpr double kFinetuneLrScale = 0.1;

/// Mean detection loss over a dataset at the current weights.
inline double dataset_loss(const ModelParams& model, const std::vector<Sample>& samples) {
  double total = 0;
  for (const auto& s : samples) {
    Graph g;
    auto f = forward(g, model, s.image);
    total += detection_loss(f.raw, s.annotations).item();
  }
  return samples.empty() ? 0.0 : total / static_cast<double>(samples.size());
}

using EpochCallback = std::function<void(int epoch, const ModelParams&, double mean_loss)>;

/// Shuffled per-image SGD with global gradient-norm clipping. Throws if the
/// loss stops being finite. The shuffle stream depends only on cfg.seed, so a
/// shorter run is an exact prefix of a longer one.
inline ModelParams train(ModelParams model, const std::vector<Sample>& samples, const TrainConfig& cfg,
                         const EpochCallback& on_epoch = {}) {
  cfg.validate();
  if (samples.empty()) throw std::invalid_argument("train: dataset is empty");
  Rng rng(derive_seed(cfg.seed, {0x747261696eULL}));
  MomentumBuffers velocity;
  std::vector<std::size_t> order(samples.size());
  std::iota(order.begin(), order.end(), 0);
  for (int epoch = 1; epoch <= cfg.epochs; ++epoch) {
    std::shuffle(order.begin(), order.end(), rng);
    double total = 0;
    for (std::size_t idx : order) {
      const Sample& s = samples[idx];
      Graph g;
      auto f = forward(g, model, s.image, false, true);
      Var loss = detection_loss(f.raw, s.annotations);
      if (!std::isfinite(loss.item()))
        throw std::runtime_error("train: loss became non-finite at epoch " + std::to_string(epoch) + " on " + s.id);
      g.backward(loss);
      total += loss.item();
      for (std::size_t p = 0; p < model.params.size(); ++p) model.params[p].grad = f.params[p].grad();
      clip_grad_norm(model.params, cfg.grad_clip);
      sgd_step(model.params, cfg.lr, cfg.momentum, velocity);
    }
    if (on_epoch) on_epoch(epoch, model, total / static_cast<double>(samples.size()));
  }
  return model;
}

/// Continues training on an adversarial dataset at 0.1x the base rate.
inline ModelParams finetune(ModelParams model, const std::vector<Sample>& adv, int epochs, TrainConfig cfg,
                            const EpochCallback& on_epoch = {}) {
  if (epochs == 0) return model;
  if (adv.empty()) throw std::invalid_argument("finetune: adversarial dataset is empty");
  cfg.epochs = epochs;
  cfg.lr *= kFinetuneLrScale;
  return train(std::move(model), adv, cfg, on_epoch);
}

// ---- evaluation ------------------------------------------------------------

struct ImageDetections {
  std::vector<Detection> detections;
  std::vector<Annotation> ground_truth;
};

struct EvalReport {
  double tp_percent = 0;
  int tp_count = 0;
  int gt_count = 0;
  int fp_count = 0;
  double ap = 0;
  double iou_threshold = 0.5;
  double conf_threshold = kDefaultConfThreshold;
  std::vector<int> per_image_matches;

  nlohmann::json to_json() const {
    return {{"tp_percent", tp_percent}, {"tp", tp_count},          {"gt", gt_count},
            {"fp", fp_count},           {"ap", ap},                {"iou_threshold", iou_threshold},
            {"conf_threshold", conf_threshold}, {"ap_method", "all-point interpolation, single IoU"}};
  }
};

namespace detail {

struct Scored {
  std::size_t image;
  double score;
  Box box;
  int cls;
};

// Canonical order: descending score, ties broken by content (never input order).
inline bool scored_before(const Scored& a, const Scored& b) {
  if (a.score != b.score) return a.score > b.score;
  if (a.image != b.image) return a.image < b.image;
  if (a.cls != b.cls) return a.cls < b.cls;
  return std::tie(a.box.cx, a.box.cy, a.box.w, a.box.h) < std::tie(b.box.cx, b.box.cy, b.box.w, b.box.h);
}

}  // namespace detail

/// Greedy matching in descending objectness: each detection takes the
/// unmatched same-class GT of highest IoU (>= threshold) in its image.
inline EvalReport evaluate_detections(const std::vector<ImageDetections>& images, double iou_threshold = 0.5) {
  std::vector<detail::Scored> all;
  int gt_total = 0;
  for (std::size_t i = 0; i < images.size(); ++i) {
    gt_total += static_cast<int>(images[i].ground_truth.size());
    for (const auto& d : images[i].detections) all.push_back({i, d.objectness, d.bbox, d.class_argmax});
  }
  if (gt_total == 0) throw std::invalid_argument("evaluate: dataset has no ground-truth boxes");
  std::sort(all.begin(), all.end(), detail::scored_before);

  std::vector<std::vector<char>> used(images.size());
  for (std::size_t i = 0; i < images.size(); ++i) used[i].assign(images[i].ground_truth.size(), 0);
  EvalReport r;
  r.iou_threshold = iou_threshold;
  r.gt_count = gt_total;
  r.per_image_matches.assign(images.size(), 0);
  std::vector<char> is_tp(all.size(), 0);
  for (std::size_t k = 0; k < all.size(); ++k) {
    const auto& d = all[k];
    const auto& gts = images[d.image].ground_truth;
    int best = -1;
    double best_iou = iou_threshold;
    for (std::size_t gi = 0; gi < gts.size(); ++gi) {
      if (used[d.image][gi] || gts[gi].class_id != d.cls) continue;
      const double v = iou(d.box, gts[gi].bbox);
      if (v >= best_iou && (best < 0 || v > best_iou)) {
        best = static_cast<int>(gi);
        best_iou = v;
      }
    }
    if (best >= 0) {
      used[d.image][best] = 1;
      is_tp[k] = 1;
      ++r.tp_count;
      ++r.per_image_matches[d.image];
    } else {
      ++r.fp_count;
    }
  }
  r.tp_percent = 100.0 * r.tp_count / gt_total;

  // all-point interpolated area under the PR curve
  std::vector<double> prec, rec;
  int tp = 0;
  for (std::size_t k = 0; k < all.size(); ++k) {
    tp += is_tp[k];
    prec.push_back(static_cast<double>(tp) / static_cast<double>(k + 1));
    rec.push_back(static_cast<double>(tp) / gt_total);
  }
  for (std::size_t k = prec.size(); k-- > 1;) prec[k - 1] = std::max(prec[k - 1], prec[k]);
  double ap = 0, prev_r = 0;
  for (std::size_t k = 0; k < prec.size(); ++k) {
    ap += (rec[k] - prev_r) * prec[k];
    prev_r = rec[k];
  }
  r.ap = ap;
  return r;
}

inline EvalReport evaluate(const ModelParams& model, const std::vector<Sample>& samples, double iou_threshold = 0.5,
                           double conf_threshold = kDefaultConfThreshold, int workers = 1) {
  if (samples.empty()) throw std::invalid_argument("evaluate: dataset is empty");
  std::vector<ImageDetections> images(samples.size());
  parallel_for(samples.size(), workers, [&](std::size_t i) {
    images[i] = {detect(model, samples[i].image, conf_threshold), samples[i].annotations};
  });
  EvalReport r = evaluate_detections(images, iou_threshold);
  r.conf_threshold = conf_threshold;
  return r;
}

// ---- robustness statistics ---------------------------------------------------

struct RobustnessStats {
  double mean = 0, median = 0, q1 = 0, q3 = 0;
  std::size_t count = 0;
  std::vector<double> values;

  nlohmann::json to_json() const {
    return {{"mean", mean}, {"median", median}, {"q1", q1}, {"q3", q3}, {"count", count}};
  }
};

/// Linear-interpolation quantile of sorted data (position q*(n-1)).
inline double quantile_sorted(const std::vector<double>& sorted, double q) {
  const double pos = q * static_cast<double>(sorted.size() - 1);
  const auto lo = static_cast<std::size_t>(std::floor(pos));
  const std::size_t hi = std::min(lo + 1, sorted.size() - 1);
  return sorted[lo] + (pos - static_cast<double>(lo)) * (sorted[hi] - sorted[lo]);
}

inline RobustnessStats robustness_stats(std::vector<double> values) {
  if (values.empty()) throw std::invalid_argument("robustness_stats: no records");
  RobustnessStats s;
  s.values = values;
  s.count = values.size();
  std::sort(values.begin(), values.end());
  s.mean = std::accumulate(values.begin(), values.end(), 0.0) / static_cast<double>(values.size());
  s.median = quantile_sorted(values, 0.5);
  s.q1 = quantile_sorted(values, 0.25);
  s.q3 = quantile_sorted(values, 0.75);
  return s;
}

inline RobustnessStats robustness_stats(const std::vector<RobustnessRecord>& records) {
  std::vector<double> v;
  for (const auto& r : records) v.push_back(r.threshold);
  return robustness_stats(std::move(v));
}

// ---- report files ------------------------------------------------------------

inline constexpr int kReportSchemaVersion = 1;

struct ReportInput {
  // model id -> dataset name -> metrics
  std::map<std::string, std::map<std::string, EvalReport>> eval;
  // per-instance records, any mix of models and properties
  std::vector<RobustnessRecord> records;
  std::string baseline_model = "original";
  nlohmann::json extra = nlohmann::json::object();
};

inline std::string format_double(double v) {
  std::ostringstream ss;
  ss.precision(17);
  ss << v;
  return ss.str();
}

inline std::string robustness_csv(const std::vector<RobustnessRecord>& records) {
  std::string out = "model_id,property,image_id,cell_i,cell_j,threshold,iterations,any_deadline_fired\n";
  for (const auto& r : records)
    out += r.model_id + "," + to_string(r.kind) + "," + r.image_id + "," + std::to_string(r.cell.i) + "," +
           std::to_string(r.cell.j) + "," + format_double(r.threshold) + "," + std::to_string(r.log.size()) + "," +
           (r.any_deadline_fired() ? "1" : "0") + "\n";
  return out;
}

/// property -> model -> stats over that model's records.
inline std::map<std::string, std::map<std::string, RobustnessStats>> group_stats(
    const std::vector<RobustnessRecord>& records) {
  std::map<std::string, std::map<std::string, std::vector<double>>> grouped;
  for (const auto& r : records) grouped[to_string(r.kind)][r.model_id].push_back(r.threshold);
  std::map<std::string, std::map<std::string, RobustnessStats>> out;
  for (auto& [prop, models] : grouped)
    for (auto& [model, vals] : models) out[prop][model] = robustness_stats(vals);
  return out;
}

inline nlohmann::json summary_json(const ReportInput& in) {
  nlohmann::json j;
  j["schema_version"] = kReportSchemaVersion;
  j["baseline_model"] = in.baseline_model;
  j["eval"] = nlohmann::json::object();
  for (const auto& [model, dsets] : in.eval)
    for (const auto& [ds, rep] : dsets) j["eval"][model][ds] = rep.to_json();
  j["robustness"] = nlohmann::json::object();
  j["deltas"] = nlohmann::json::object();
  const auto stats = group_stats(in.records);
  for (const auto& [prop, models] : stats) {
    for (const auto& [model, st] : models) j["robustness"][prop][model] = st.to_json();
    const auto base = models.find(in.baseline_model);
    if (base == models.end()) continue;
    for (const auto& [model, st] : models) {
      if (model == in.baseline_model) continue;
      j["deltas"][prop][model] = {{"mean", st.mean - base->second.mean}, {"median", st.median - base->second.median}};
    }
  }
  j["extra"] = in.extra;
  return j;
}

inline void report(const ReportInput& in, const fs::path& out_dir) {
  std::error_code ec;
  fs::create_directories(out_dir, ec);
  if (ec || !fs::is_directory(out_dir)) throw std::runtime_error("report: cannot create " + out_dir.string());
  write_file_atomic(out_dir / "robustness.csv", robustness_csv(in.records));
  write_file_atomic(out_dir / "summary.json", summary_json(in).dump(2) + "\n");
}

}  // namespace rosar
