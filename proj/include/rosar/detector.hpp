#pragma once

// Micro anchor-free single-stage detector.
//
// Backbone: four 3x3 SiLU convs (c->8 s2, 8->16 s2, 16->32 s2, 32->32 s1),
// giving a g x g grid with g = h/8. Three decoupled 1x1 heads produce box
// (tx,ty,tw,th), objectness and class logits per cell. One box per cell.

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <string>
#include <vector>

#include <json.hpp>

#include "rosar/image.hpp"
#include "rosar/rng.hpp"
#include "rosar/tensor.hpp"

namespace rosar {

struct ModelConfig {
  int h = 64, w = 64, c = 1;
  int num_classes = 2;

  int grid() const { return h / 8; }

  void validate() const {
    if (h != w) throw std::invalid_argument("model config: h must equal w");
    if (h <= 0 || h % 8 != 0) throw std::invalid_argument("model config: h must be a positive multiple of 8");
    if (c < 1) throw std::invalid_argument("model config: c must be >= 1");
    if (num_classes < 2) throw std::invalid_argument("model config: num_classes must be >= 2");
  }
  bool operator==(const ModelConfig&) const = default;
};

struct LayerSpec {
  std::string name;
  Shape shape;
};

inline std::vector<LayerSpec> layer_specs(const ModelConfig& cfg) {
  const auto c = static_cast<std::size_t>(cfg.c);
  const auto n = static_cast<std::size_t>(cfg.num_classes);
  return {
      {"conv1.w", {3, 3, c, 8}},    {"conv1.b", {8}},    {"conv2.w", {3, 3, 8, 16}}, {"conv2.b", {16}},
      {"conv3.w", {3, 3, 16, 32}},  {"conv3.b", {32}},   {"conv4.w", {3, 3, 32, 32}}, {"conv4.b", {32}},
      {"box.w", {1, 1, 32, 4}},     {"box.b", {4}},      {"obj.w", {1, 1, 32, 1}},    {"obj.b", {1}},
      {"cls.w", {1, 1, 32, n}},     {"cls.b", {n}},
  };
}

struct ModelParams {
  ModelConfig config;
  std::uint64_t seed = 0;
  std::vector<Tensor> params;  // layer_specs order

  bool operator==(const ModelParams& o) const {
    if (!(config == o.config) || params.size() != o.params.size()) return false;
    for (std::size_t i = 0; i < params.size(); ++i)
      if (params[i].shape != o.params[i].shape || params[i].data != o.params[i].data) return false;
    return true;
  }
};

inline constexpr double kObjectnessPriorBias = -2.0;

inline ModelParams init_model(const ModelConfig& cfg, std::uint64_t seed) {
  cfg.validate();
  ModelParams m{cfg, seed, {}};
  Rng rng(derive_seed(seed, {0x6d6f64656cULL}));
  for (const auto& spec : layer_specs(cfg)) {
    Tensor t(spec.shape);
    if (spec.shape.size() == 4) {
      const double fan_in = static_cast<double>(spec.shape[0] * spec.shape[1] * spec.shape[2]);
      const bool head = spec.shape[0] == 1;
      const double bound = head ? std::sqrt(1.0 / fan_in) : std::sqrt(6.0 / fan_in);
      for (double& v : t.data) v = uniform(rng, -bound, bound);
    } else if (spec.name == "obj.b") {
      t.data.assign(t.size(), kObjectnessPriorBias);
    }
    m.params.push_back(std::move(t));
  }
  return m;
}

/// Raw head outputs. Values live in the Graph used for the forward pass.
struct RawGrid {
  Var box;  // [g,g,4]
  Var obj;  // [g,g,1], pre-sigmoid
  Var cls;  // [g,g,N], pre-softmax
  int grid = 0;
  int num_classes = 0;
};

struct ForwardResult {
  Var input;
  RawGrid raw;
  std::vector<Var> params;  // leaves in layer_specs order
};

inline void check_input_shape(const ModelConfig& cfg, const Shape& s) {
  if (s.size() != 3 || s[0] != static_cast<std::size_t>(cfg.h) || s[1] != static_cast<std::size_t>(cfg.w) ||
      s[2] != static_cast<std::size_t>(cfg.c))
    throw std::invalid_argument("forward: input shape " + shape_str(s) + " does not match model config [" +
                                std::to_string(cfg.h) + "," + std::to_string(cfg.w) + "," + std::to_string(cfg.c) +
                                "]");
}

/// Runs the network on an input Var already living in `graph`.
inline ForwardResult forward(Graph& graph, const ModelParams& model, Var input, bool params_require_grad = false) {
  check_input_shape(model.config, input.shape());
  ForwardResult r;
  r.input = input;
  for (const auto& p : model.params) r.params.push_back(graph.leaf(Tensor(p.shape, p.data), params_require_grad));
  const auto& P = r.params;
  Var x = silu(bias_add(conv2d(input, P[0], 2, 1), P[1]));
  x = silu(bias_add(conv2d(x, P[2], 2, 1), P[3]));
  x = silu(bias_add(conv2d(x, P[4], 2, 1), P[5]));
  x = silu(bias_add(conv2d(x, P[6], 1, 1), P[7]));
  r.raw.box = bias_add(conv2d(x, P[8], 1, 0), P[9]);
  r.raw.obj = bias_add(conv2d(x, P[10], 1, 0), P[11]);
  r.raw.cls = bias_add(conv2d(x, P[12], 1, 0), P[13]);
  r.raw.grid = model.config.grid();
  r.raw.num_classes = model.config.num_classes;
  return r;
}

inline ForwardResult forward(Graph& graph, const ModelParams& model, const Image& image,
                             bool input_requires_grad = false, bool params_require_grad = false) {
  return forward(graph, model, graph.leaf(image.to_tensor(), input_requires_grad), params_require_grad);
}

// ---- decoding --------------------------------------------------------------

struct Cell {
  int i = 0, j = 0;
  bool operator==(const Cell&) const = default;
  auto operator<=>(const Cell&) const = default;
};

struct CellScores {
  double objectness = 0;
  std::vector<double> class_scores;
};

/// Scalar decode of objectness and class scores at one grid cell.
inline CellScores cell_scores(const RawGrid& raw, Cell cell) {
  const int g = raw.grid, n = raw.num_classes;
  if (cell.i < 0 || cell.j < 0 || cell.i >= g || cell.j >= g) throw std::out_of_range("cell outside grid");
  const std::size_t base = static_cast<std::size_t>(cell.i) * g + cell.j;
  CellScores s;
  s.objectness = sigmoid_scalar(raw.obj.value().data[base]);
  const double* z = raw.cls.value().data.data() + base * n;
  const double m = *std::max_element(z, z + n);
  s.class_scores.resize(n);
  double total = 0.0;
  for (int k = 0; k < n; ++k) total += (s.class_scores[k] = std::exp(z[k] - m));
  for (double& v : s.class_scores) v /= total;
  return s;
}

struct Detection {
  Box bbox;
  double objectness = 0;
  std::vector<double> class_scores;
  Cell cell;
  int class_argmax = 0;
};

inline constexpr double kDefaultConfThreshold = 0.25;
inline constexpr double kNmsIou = 0.45;

/// Greedy class-agnostic NMS by descending objectness. Ties keep cell order.
inline std::vector<Detection> nms(std::vector<Detection> dets, double iou_threshold = kNmsIou) {
  std::stable_sort(dets.begin(), dets.end(),
                   [](const Detection& a, const Detection& b) { return a.objectness > b.objectness; });
  std::vector<Detection> kept;
  for (auto& d : dets) {
    bool suppressed = false;
    for (const auto& k : kept)
      if (iou(d.bbox, k.bbox) > iou_threshold) {
        suppressed = true;
        break;
      }
    if (!suppressed) kept.push_back(std::move(d));
  }
  return kept;
}

/// All cells decoded, before thresholding and NMS.
inline std::vector<Detection> decode_cells(const RawGrid& raw) {
  const int g = raw.grid;
  const auto& box = raw.box.value().data;
  std::vector<Detection> out;
  out.reserve(static_cast<std::size_t>(g) * g);
  for (int i = 0; i < g; ++i) {
    for (int j = 0; j < g; ++j) {
      const std::size_t b = (static_cast<std::size_t>(i) * g + j) * 4;
      Detection d;
      d.cell = {i, j};
      d.bbox = {(j + sigmoid_scalar(box[b])) / g, (i + sigmoid_scalar(box[b + 1])) / g, std::exp(box[b + 2]) / g,
                std::exp(box[b + 3]) / g};
      auto s = cell_scores(raw, d.cell);
      d.objectness = s.objectness;
      d.class_scores = std::move(s.class_scores);
      d.class_argmax = static_cast<int>(std::max_element(d.class_scores.begin(), d.class_scores.end()) -
                                        d.class_scores.begin());
      out.push_back(std::move(d));
    }
  }
  return out;
}

inline std::vector<Detection> decode(const RawGrid& raw, double conf_threshold = kDefaultConfThreshold,
                                     double nms_iou = kNmsIou) {
  if (conf_threshold < 0 || conf_threshold > 1) throw std::invalid_argument("decode: conf_threshold outside [0,1]");
  std::vector<Detection> cand;
  for (auto& d : decode_cells(raw))
    if (d.objectness >= conf_threshold) cand.push_back(std::move(d));
  return nms(std::move(cand), nms_iou);
}

/// Forward + decode without recording gradients.
inline std::vector<Detection> detect(const ModelParams& model, const Image& image,
                                     double conf_threshold = kDefaultConfThreshold) {
  Graph g;
  auto f = forward(g, model, image);
  return decode(f.raw, conf_threshold);
}

// ---- training loss ---------------------------------------------------------

inline Cell assigned_cell(const Box& b, int grid) {
  const int j = std::clamp(static_cast<int>(std::floor(b.cx * grid)), 0, grid - 1);
  const int i = std::clamp(static_cast<int>(std::floor(b.cy * grid)), 0, grid - 1);
  return {i, j};
}

inline double logit(double p) { return std::log(p / (1.0 - p)); }

/// Raw-parameter regression target (tx,ty,tw,th) for a box at its assigned cell.
inline std::array<double, 4> box_target(const Box& b, int grid) {
  const Cell c = assigned_cell(b, grid);
  constexpr double kEdge = 0.05;
  const double fx = std::clamp(b.cx * grid - c.j, kEdge, 1.0 - kEdge);
  const double fy = std::clamp(b.cy * grid - c.i, kEdge, 1.0 - kEdge);
  return {logit(fx), logit(fy), std::log(b.w * grid), std::log(b.h * grid)};
}

/// BCE(objectness, assignment mask) over all cells + softmax-CE over positive
/// cells + squared error of raw box params at positive cells (mean over
/// positives). An annotation landing on an already-assigned cell is ignored.
inline Var detection_loss(const RawGrid& raw, const std::vector<Annotation>& annotations) {
  const int g = raw.grid;
  Graph& graph = *raw.obj.graph;
  std::vector<double> mask(static_cast<std::size_t>(g) * g, 0.0);
  std::vector<std::size_t> pos_cells;
  std::vector<int> labels;
  std::vector<double> box_targets;
  for (const auto& a : annotations) {
    validate(a);
    if (a.class_id < 0 || a.class_id >= raw.num_classes)
      throw std::invalid_argument("detection_loss: class id out of range");
    const Cell c = assigned_cell(a.bbox, g);
    const std::size_t flat = static_cast<std::size_t>(c.i) * g + c.j;
    if (mask[flat] > 0) continue;
    mask[flat] = 1.0;
    pos_cells.push_back(flat);
    labels.push_back(a.class_id);
    const auto t = box_target(a.bbox, g);
    box_targets.insert(box_targets.end(), t.begin(), t.end());
  }
  Var loss = bce_with_logits(raw.obj, mask);
  if (pos_cells.empty()) return loss;

  std::vector<std::size_t> cls_idx, box_idx;
  const auto n = static_cast<std::size_t>(raw.num_classes);
  for (auto flat : pos_cells) {
    for (std::size_t k = 0; k < n; ++k) cls_idx.push_back(flat * n + k);
    for (std::size_t k = 0; k < 4; ++k) box_idx.push_back(flat * 4 + k);
  }
  Var cls_logits = gather(raw.cls, std::move(cls_idx));
  Var cls2 = reshape(cls_logits, Shape{pos_cells.size(), n});
  loss = loss + softmax_cross_entropy(cls2, labels);

  Var box_pred = gather(raw.box, std::move(box_idx));
  Var diff = box_pred - graph.constant(Tensor(Shape{box_targets.size()}, box_targets));
  loss = loss + scale(sum(diff * diff), 1.0 / static_cast<double>(pos_cells.size()));
  return loss;
}

// ---- weight file -----------------------------------------------------------

inline constexpr int kWeightFormatVersion = 1;

/// "RSRW", uint32 LE header length, JSON header, float32 LE blob.
inline std::string encode_weights(const ModelParams& m) {
  nlohmann::json header;
  header["format_version"] = kWeightFormatVersion;
  header["config"] = {{"h", m.config.h}, {"w", m.config.w}, {"c", m.config.c}, {"num_classes", m.config.num_classes}};
  header["seed"] = m.seed;
  const auto specs = layer_specs(m.config);
  header["layers"] = nlohmann::json::array();
  for (std::size_t i = 0; i < specs.size(); ++i) header["layers"].push_back({{"name", specs[i].name}, {"shape", m.params[i].shape}});
  const std::string hs = header.dump();
  std::string out = "RSRW";
  const auto len = static_cast<std::uint32_t>(hs.size());
  out.append(reinterpret_cast<const char*>(&len), 4);
  out += hs;
  for (const auto& p : m.params)
    for (double v : p.data) {
      const float f = static_cast<float>(v);
      out.append(reinterpret_cast<const char*>(&f), 4);
    }
  return out;
}

inline ModelParams decode_weights(const std::string& bytes, const std::string& name = "<weights>") {
  if (bytes.size() < 8 || bytes.compare(0, 4, "RSRW") != 0) throw std::runtime_error(name + ": not a weight file");
  std::uint32_t len = 0;
  std::memcpy(&len, bytes.data() + 4, 4);
  if (bytes.size() < 8 + static_cast<std::size_t>(len)) throw std::runtime_error(name + ": truncated header");
  const auto header = nlohmann::json::parse(bytes.substr(8, len));
  if (header.at("format_version").get<int>() != kWeightFormatVersion)
    throw std::runtime_error(name + ": unsupported weight format version");
  ModelParams m;
  const auto& c = header.at("config");
  m.config = {c.at("h").get<int>(), c.at("w").get<int>(), c.at("c").get<int>(), c.at("num_classes").get<int>()};
  m.config.validate();
  m.seed = header.at("seed").get<std::uint64_t>();
  const auto specs = layer_specs(m.config);
  const auto& layers = header.at("layers");
  if (layers.size() != specs.size()) throw std::runtime_error(name + ": layer count mismatch");
  std::size_t pos = 8 + len;
  for (std::size_t i = 0; i < specs.size(); ++i) {
    if (layers[i].at("shape").get<Shape>() != specs[i].shape)
      throw std::runtime_error(name + ": layer " + specs[i].name + " has unexpected shape");
    Tensor t(specs[i].shape);
    if (bytes.size() < pos + 4 * t.size()) throw std::runtime_error(name + ": truncated weight blob");
    for (double& v : t.data) {
      float f;
      std::memcpy(&f, bytes.data() + pos, 4);
      pos += 4;
      v = f;
    }
    m.params.push_back(std::move(t));
  }
  if (pos != bytes.size()) throw std::runtime_error(name + ": trailing bytes after weight blob");
  return m;
}

inline void save_model(const fs::path& path, const ModelParams& m) { write_file_atomic(path, encode_weights(m)); }
inline ModelParams load_model(const fs::path& path) { return decode_weights(read_file(path), path.string()); }

/// Rounds parameters to float32, matching what a save/load cycle yields.
inline ModelParams round_to_float(ModelParams m) {
  for (auto& p : m.params)
    for (double& v : p.data) v = static_cast<float>(v);
  return m;
}

}  // namespace rosar
