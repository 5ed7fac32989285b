#pragma once

// Universal adversarial patch: pasted over every ground-truth box, trained on
// a surrogate detector to suppress objectness at the boxes' assigned cells.

#include <array>
#include <cmath>
#include <iostream>
#include <map>
#include <string>
#include <vector>

#include <json.hpp>

#include "rosar/detector.hpp"
#include "rosar/image.hpp"
#include "rosar/sonar_synth.hpp"

namespace rosar {

struct PatchTrainConfig {
  int size = 16;
  int epochs = 10;
  double w_obj = 1.0;
  double w_tv = 0.1;
  double lr = 0.01;  // sign-gradient step per image
  double scale = 0.4;
};

struct Patch {
  Image pixels;  // p x p x c, values in [0,1]
  nlohmann::json meta;

  int size() const { return pixels.h; }
  static Patch gray(int p, int c) { return {Image(p, p, c, 0.5), nlohmann::json::object()}; }
};

/// One destination pixel of a pasted patch: bilinear taps into the patch.
struct PasteTap {
  std::size_t dst;                 // flat index into the image (channel included)
  std::array<std::size_t, 4> src;  // flat indices into the patch
  std::array<double, 4> weight;
};

/// Destination footprint of the patch for every annotation. Later boxes
/// overwrite earlier ones where footprints overlap.
inline std::vector<PasteTap> paste_taps(int h, int w, int c, int p, const std::vector<Annotation>& annotations,
                                        double scale, bool warn = false) {
  if (!(scale > 0 && scale <= 1)) throw std::invalid_argument("apply_patch: scale must be in (0,1]");
  std::map<std::size_t, PasteTap> taps;
  for (const auto& a : annotations) {
    const double bw = a.bbox.w * w, bh = a.bbox.h * h;
    if (std::min(bw, bh) <= 1.0) {
      if (warn) std::cerr << "warning: skipping degenerate box for patch placement\n";
      continue;
    }
    const int side = static_cast<int>(std::lround(scale * std::min(bw, bh)));
    if (side < 1) continue;
    const int x0 = static_cast<int>(std::lround(a.bbox.cx * w - side / 2.0));
    const int y0 = static_cast<int>(std::lround(a.bbox.cy * h - side / 2.0));
    for (int u = 0; u < side; ++u) {
      const int y = y0 + u;
      if (y < 0 || y >= h) continue;
      const double py = std::clamp((u + 0.5) * p / side - 0.5, 0.0, p - 1.0);
      const int r0 = static_cast<int>(std::floor(py));
      const int r1 = std::min(r0 + 1, p - 1);
      const double fy = py - r0;
      for (int v = 0; v < side; ++v) {
        const int x = x0 + v;
        if (x < 0 || x >= w) continue;
        const double px = std::clamp((v + 0.5) * p / side - 0.5, 0.0, p - 1.0);
        const int c0 = static_cast<int>(std::floor(px));
        const int c1 = std::min(c0 + 1, p - 1);
        const double fx = px - c0;
        for (int k = 0; k < c; ++k) {
          auto pidx = [&](int r, int col) { return (static_cast<std::size_t>(r) * p + col) * c + k; };
          const std::size_t dst = (static_cast<std::size_t>(y) * w + x) * c + k;
          taps[dst] = PasteTap{dst,
                               {pidx(r0, c0), pidx(r0, c1), pidx(r1, c0), pidx(r1, c1)},
                               {(1 - fy) * (1 - fx), (1 - fy) * fx, fy * (1 - fx), fy * fx}};
        }
      }
    }
  }
  std::vector<PasteTap> out;
  out.reserve(taps.size());
  for (auto& [_, t] : taps) out.push_back(t);
  return out;
}

inline Image apply_patch(const Image& image, const std::vector<Annotation>& annotations, const Patch& patch,
                         double scale) {
  if (patch.pixels.c != image.c) throw std::invalid_argument("apply_patch: channel mismatch");
  Image out = image;
  for (const auto& t : paste_taps(image.h, image.w, image.c, patch.size(), annotations, scale, true)) {
    double v = 0;
    for (int q = 0; q < 4; ++q) v += t.weight[q] * patch.pixels.pixels[t.src[q]];
    out.pixels[t.dst] = v;
  }
  clamp_unit(out);
  return out;
}

/// Differentiable paste of `patch` ([p,p,c] Var) onto a fixed image.
inline Var paste_patch(Graph& g, Var patch, const Image& image, const std::vector<Annotation>& annotations,
                       double scale) {
  const int p = static_cast<int>(patch.shape()[0]);
  auto taps = paste_taps(image.h, image.w, image.c, p, annotations, scale);
  Tensor out = image.to_tensor();
  const auto& pv = patch.value().data;
  for (const auto& t : taps) {
    double v = 0;
    for (int q = 0; q < 4; ++q) v += t.weight[q] * pv[t.src[q]];
    out.data[t.dst] = v;
  }
  return g.record(OpKind::Custom, {patch}, std::move(out), [taps = std::move(taps)](Graph& gr, int self) {
    const auto& up = gr.node(self).value.grad;
    auto& dp = gr.grad_of(gr.node(self).inputs[0]);
    for (const auto& t : taps)
      for (int q = 0; q < 4; ++q) dp[t.src[q]] += t.weight[q] * up[t.dst];
  });
}

/// Mean of squared horizontal and vertical neighbour differences.
inline Var tv_loss(Var patch) {
  const Shape& s = patch.shape();
  if (s.size() != 3 || s[0] < 2 || s[1] < 2) throw std::invalid_argument("tv_loss: patch must be [p,p,c] with p >= 2");
  const std::size_t h = s[0], w = s[1], c = s[2];
  auto at = [&](std::size_t i, std::size_t j, std::size_t k) { return (i * w + j) * c + k; };
  std::vector<std::size_t> a, b;
  for (std::size_t i = 0; i < h; ++i)
    for (std::size_t j = 0; j < w; ++j)
      for (std::size_t k = 0; k < c; ++k) {
        if (j + 1 < w) {
          a.push_back(at(i, j, k));
          b.push_back(at(i, j + 1, k));
        }
        if (i + 1 < h) {
          a.push_back(at(i, j, k));
          b.push_back(at(i + 1, j, k));
        }
      }
  Var d = gather(patch, std::move(a)) - gather(patch, std::move(b));
  return mean(d * d);
}

inline Var tv_loss(Graph& g, const Patch& patch) { return tv_loss(g.constant(patch.pixels.to_tensor())); }

/// Flat obj-grid indices of the cells assigned to each annotation (deduplicated).
inline std::vector<std::size_t> gt_cells(const std::vector<Annotation>& anns, int grid) {
  std::vector<std::size_t> out;
  for (const auto& a : anns) {
    const Cell c = assigned_cell(a.bbox, grid);
    const std::size_t f = static_cast<std::size_t>(c.i) * grid + c.j;
    if (std::find(out.begin(), out.end(), f) == out.end()) out.push_back(f);
  }
  return out;
}

/// Mean objectness at GT-assigned cells with the patch pasted, over a dataset.
inline double mean_gt_objectness(const ModelParams& model, const std::vector<Sample>& samples, const Patch& patch,
                                 double scale) {
  double total = 0;
  std::size_t n = 0;
  for (const auto& s : samples) {
    const auto cells = gt_cells(s.annotations, model.config.grid());
    if (cells.empty()) continue;
    Graph g;
    auto f = forward(g, model, apply_patch(s.image, s.annotations, patch, scale));
    for (auto c : cells) total += sigmoid_scalar(f.raw.obj.value().data[c]);
    n += cells.size();
  }
  return n ? total / static_cast<double>(n) : 0.0;
}

struct PatchTrainResult {
  Patch patch;
  std::vector<double> epoch_loss;  // mean per-image loss during each epoch
};

inline PatchTrainResult train_patch(const ModelParams& surrogate, const std::vector<Sample>& samples,
                                    const PatchTrainConfig& cfg, const std::string& surrogate_id = "surrogate") {
  if (samples.empty()) throw std::invalid_argument("train_patch: dataset is empty");
  PatchTrainResult r{Patch::gray(cfg.size, surrogate.config.c), {}};
  Image& px = r.patch.pixels;
  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    double epoch_total = 0;
    int counted = 0;
    for (const auto& s : samples) {
      const auto cells = gt_cells(s.annotations, surrogate.config.grid());
      if (cells.empty()) continue;
      Graph g;
      Var pv = g.leaf(px.to_tensor(), true);
      Var img = paste_patch(g, pv, s.image, s.annotations, cfg.scale);
      auto f = forward(g, surrogate, img);
      Var obj = mean(sigmoid(gather(f.raw.obj, cells)));
      Var loss = add(scale(obj, cfg.w_obj), scale(tv_loss(pv), cfg.w_tv));
      g.backward(loss);
      epoch_total += loss.item();
      ++counted;
      const auto& grad = pv.grad();
      for (std::size_t i = 0; i < px.size(); ++i) {
        const double sgn = grad[i] > 0 ? 1.0 : (grad[i] < 0 ? -1.0 : 0.0);
        px.pixels[i] = std::clamp(px.pixels[i] - cfg.lr * sgn, 0.0, 1.0);
      }
    }
    r.epoch_loss.push_back(counted ? epoch_total / counted : 0.0);
  }
  r.patch.meta = {{"epochs", cfg.epochs}, {"size", cfg.size},   {"w_obj", cfg.w_obj},
                  {"w_tv", cfg.w_tv},     {"lr", cfg.lr},       {"scale", cfg.scale},
                  {"surrogate", surrogate_id}, {"epoch_loss", r.epoch_loss}};
  return r;
}

inline void save_patch(const fs::path& dir, const Patch& patch) {
  fs::create_directories(dir);
  write_pgm(dir / "patch.pgm", patch.pixels);
  write_raw_image(dir / "patch.raw", patch.pixels);
  write_file_atomic(dir / "patch.json", patch.meta.dump(2) + "\n");
}

inline Patch load_patch(const fs::path& dir) {
  Patch p;
  p.pixels = fs::exists(dir / "patch.raw") ? read_raw_image(dir / "patch.raw") : read_pgm(dir / "patch.pgm");
  p.meta = nlohmann::json::parse(read_file(dir / "patch.json"));
  return p;
}

inline DatasetManifest build_patch_dataset(const std::vector<Sample>& samples, const Patch& patch, double scale,
                                           const fs::path& out_dir, const std::string& name) {
  std::vector<Sample> out;
  out.reserve(samples.size());
  for (const auto& s : samples) out.push_back({s.id, apply_patch(s.image, s.annotations, patch, scale), s.annotations});
  DatasetManifest m;
  m.name = name;
  m.variant = Variant::Adversarial;
  m.generator = {{"source", "patch"}, {"scale", scale}, {"patch", patch.meta}};
  return write_dataset(out_dir, m, out);
}

struct TransferReport {
  double surrogate_gray = 0, surrogate_trained = 0;
  double victim_gray = 0, victim_trained = 0;

  double surrogate_delta() const { return surrogate_trained - surrogate_gray; }
  double victim_delta() const { return victim_trained - victim_gray; }

  nlohmann::json to_json() const {
    return {{"surrogate", {{"gray", surrogate_gray}, {"trained", surrogate_trained}, {"delta", surrogate_delta()}}},
            {"victim", {{"gray", victim_gray}, {"trained", victim_trained}, {"delta", victim_delta()}}}};
  }
};

inline TransferReport transfer_report(const ModelParams& surrogate, const ModelParams& victim,
                                      const std::vector<Sample>& samples, const Patch& patch, double scale) {
  const Patch gray = Patch::gray(patch.size(), patch.pixels.c);
  return {mean_gt_objectness(surrogate, samples, gray, scale), mean_gt_objectness(surrogate, samples, patch, scale),
          mean_gt_objectness(victim, samples, gray, scale), mean_gt_objectness(victim, samples, patch, scale)};
}

}  // namespace rosar
