#include <gtest/gtest.h>

#include <random>

#include "rosar/detector.hpp"
#include "test_util.hpp"

using namespace rosar;
using testutil::rel_err;

namespace {

ModelConfig small_cfg() { return {32, 32, 1, 2}; }

Image random_image(int h, int w, int c, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> d(0, 1);
  Image im(h, w, c, 0.0);
  for (auto& p : im.pixels) p = d(rng);
  return im;
}

// RawGrid backed by constant leaves with the given values.
RawGrid make_raw(Graph& g, int grid, int n, const std::vector<double>& box, const std::vector<double>& obj,
                 const std::vector<double>& cls, bool rg = false) {
  const auto gs = static_cast<std::size_t>(grid);
  RawGrid r;
  r.box = g.leaf(Tensor({gs, gs, 4}, box), rg);
  r.obj = g.leaf(Tensor({gs, gs, 1}, obj), rg);
  r.cls = g.leaf(Tensor({gs, gs, static_cast<std::size_t>(n)}, cls), rg);
  r.grid = grid;
  r.num_classes = n;
  return r;
}

std::vector<double> rand_vec(std::size_t n, std::mt19937_64& rng, double lo, double hi) {
  return testutil::random_vec(n, rng, lo, hi);
}

// Greedy suppression written as a plain O(n^2) loop over an index order.
std::vector<int> nms_oracle(const std::vector<Detection>& d, double thr) {
  std::vector<int> order(d.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](int a, int b) { return d[a].objectness > d[b].objectness; });
  std::vector<bool> removed(d.size(), false);
  std::vector<int> kept;
  for (std::size_t a = 0; a < order.size(); ++a) {
    if (removed[order[a]]) continue;
    kept.push_back(order[a]);
    for (std::size_t b = a + 1; b < order.size(); ++b) {
      const Box& p = d[order[a]].bbox;
      const Box& q = d[order[b]].bbox;
      const double ix = std::max(0.0, std::min(p.cx + p.w / 2, q.cx + q.w / 2) - std::max(p.cx - p.w / 2, q.cx - q.w / 2));
      const double iy = std::max(0.0, std::min(p.cy + p.h / 2, q.cy + q.h / 2) - std::max(p.cy - p.h / 2, q.cy - q.h / 2));
      const double inter = ix * iy;
      if (inter / (p.w * p.h + q.w * q.h - inter) > thr) removed[order[b]] = true;
    }
  }
  return kept;
}

}  // namespace

TEST(InitModelTest, DeterministicInSeed) {
  EXPECT_EQ(init_model(small_cfg(), 1), init_model(small_cfg(), 1));
  EXPECT_FALSE(init_model(small_cfg(), 1) == init_model(small_cfg(), 2));
}

TEST(InitModelTest, RejectsInvalidConfig) {
  EXPECT_THROW(init_model({30, 30, 1, 2}, 1), std::invalid_argument);
  EXPECT_THROW(init_model({32, 40, 1, 2}, 1), std::invalid_argument);
  EXPECT_THROW(init_model({32, 32, 1, 1}, 1), std::invalid_argument);
}

TEST(InitModelTest, ZeroImageGivesFiniteOutputs) {
  const auto m = init_model(small_cfg(), 3);
  Graph g;
  auto f = forward(g, m, Image(32, 32, 1, 0.0));
  for (Var v : {f.raw.box, f.raw.obj, f.raw.cls})
    for (double x : v.value().data) EXPECT_TRUE(std::isfinite(x));
}

TEST(ForwardTest, GridShapes) {
  const auto m = init_model({64, 64, 1, 3}, 1);
  Graph g;
  auto f = forward(g, m, random_image(64, 64, 1, 1));
  EXPECT_EQ(f.raw.box.shape(), (Shape{8, 8, 4}));
  EXPECT_EQ(f.raw.obj.shape(), (Shape{8, 8, 1}));
  EXPECT_EQ(f.raw.cls.shape(), (Shape{8, 8, 3}));
}

TEST(ForwardTest, ShapeMismatchThrows) {
  const auto m = init_model(small_cfg(), 1);
  Graph g;
  EXPECT_THROW(forward(g, m, Image(64, 64, 1, 0.0)), std::invalid_argument);
  EXPECT_THROW(forward(g, m, Image(32, 32, 2, 0.0)), std::invalid_argument);
}

TEST(ForwardTest, PureForIdenticalImages) {
  const auto m = init_model(small_cfg(), 5);
  const auto im = random_image(32, 32, 1, 9);
  Graph a, b;
  auto fa = forward(a, m, im), fb = forward(b, m, im);
  EXPECT_EQ(fa.raw.box.value().data, fb.raw.box.value().data);
  EXPECT_EQ(fa.raw.obj.value().data, fb.raw.obj.value().data);
  EXPECT_EQ(fa.raw.cls.value().data, fb.raw.cls.value().data);
}

TEST(ForwardTest, PixelPerturbationChangesCoveringCell) {
  const auto m = init_model(small_cfg(), 6);
  const auto im = random_image(32, 32, 1, 10);
  std::mt19937_64 rng(1);
  for (int trial = 0; trial < 10; ++trial) {
    const int y = std::uniform_int_distribution<int>(0, 31)(rng), x = std::uniform_int_distribution<int>(0, 31)(rng);
    Image p = im;
    p.at(y, x, 0) = p.at(y, x, 0) > 0.5 ? 0.0 : 1.0;
    Graph a, b;
    auto fa = forward(a, m, im), fb = forward(b, m, p);
    const std::size_t cell = static_cast<std::size_t>(y / 8) * 4 + x / 8;
    EXPECT_NE(fa.raw.obj.value().data[cell], fb.raw.obj.value().data[cell]) << y << "," << x;
  }
}

TEST(DecodeTest, ZeroOffsetsGiveCellMidpoint) {
  Graph g;
  const int gs = 4;
  auto raw = make_raw(g, gs, 2, std::vector<double>(gs * gs * 4, 0.0), std::vector<double>(gs * gs, 0.0),
                      std::vector<double>(gs * gs * 2, 0.0));
  for (const auto& d : decode_cells(raw)) {
    EXPECT_DOUBLE_EQ(d.bbox.cx, (d.cell.j + 0.5) / gs);
    EXPECT_DOUBLE_EQ(d.bbox.cy, (d.cell.i + 0.5) / gs);
    EXPECT_DOUBLE_EQ(d.bbox.w, 1.0 / gs);
    EXPECT_DOUBLE_EQ(d.objectness, 0.5);
  }
}

TEST(DecodeTest, SaturatedNegativeObjectnessGivesNoDetections) {
  Graph g;
  std::mt19937_64 rng(3);
  auto raw = make_raw(g, 8, 2, rand_vec(256, rng, -1, 1), std::vector<double>(64, -20.0), rand_vec(128, rng, -2, 2));
  EXPECT_TRUE(decode(raw, 0.25).empty());
}

TEST(DecodeTest, DetectionInvariants) {
  std::mt19937_64 rng(8);
  for (int trial = 0; trial < 20; ++trial) {
    Graph g;
    auto raw = make_raw(g, 8, 3, rand_vec(256, rng, -2, 1), rand_vec(64, rng, -3, 3), rand_vec(192, rng, -5, 5));
    const double thr = std::uniform_real_distribution<double>(0, 1)(rng);
    const auto dets = decode(raw, thr);
    for (std::size_t a = 0; a < dets.size(); ++a) {
      EXPECT_GE(dets[a].objectness, thr);
      EXPECT_LE(dets[a].objectness, 1.0);
      double s = 0;
      for (double p : dets[a].class_scores) s += p;
      EXPECT_NEAR(s, 1.0, 1e-9);
      for (std::size_t b = a + 1; b < dets.size(); ++b) EXPECT_LE(iou(dets[a].bbox, dets[b].bbox), kNmsIou);
    }
  }
}

TEST(DecodeTest, NmsMatchesBruteForceOracle) {
  std::mt19937_64 rng(12);
  for (int trial = 0; trial < 30; ++trial) {
    Graph g;
    // positive tw/th so neighbouring boxes overlap and suppression matters
    auto raw = make_raw(g, 8, 2, rand_vec(256, rng, -1, 1.2), rand_vec(64, rng, -4, 4), rand_vec(128, rng, -1, 1));
    const auto all = decode_cells(raw);
    const auto kept = decode(raw, 0.0);
    const auto ref = nms_oracle(all, kNmsIou);
    ASSERT_EQ(kept.size(), ref.size()) << "trial " << trial;
    for (std::size_t k = 0; k < ref.size(); ++k) EXPECT_EQ(kept[k].cell, all[ref[k]].cell);
  }
}

TEST(DecodeTest, RejectsThresholdOutsideUnitInterval) {
  Graph g;
  auto raw = make_raw(g, 2, 2, std::vector<double>(16), std::vector<double>(4), std::vector<double>(8));
  EXPECT_THROW(decode(raw, -0.1), std::invalid_argument);
  EXPECT_THROW(decode(raw, 1.1), std::invalid_argument);
}

TEST(LossTest, SaturatedNegativesNearZero) {
  Graph g;
  auto raw = make_raw(g, 8, 2, std::vector<double>(256, 0.3), std::vector<double>(64, -20.0),
                      std::vector<double>(128, 0.1));
  EXPECT_LT(detection_loss(raw, {}).item(), 1e-6);
}

TEST(LossTest, PerfectPredictionsGiveTinyLoss) {
  const int gs = 8;
  const Annotation a{1, {0.30, 0.55, 0.2, 0.3}};
  const Cell c = assigned_cell(a.bbox, gs);
  const std::size_t flat = static_cast<std::size_t>(c.i) * gs + c.j;
  std::vector<double> box(gs * gs * 4, 0.0), obj(gs * gs, -40.0), cls(gs * gs * 2, 0.0);
  const auto t = box_target(a.bbox, gs);
  for (int k = 0; k < 4; ++k) box[flat * 4 + k] = t[k];
  obj[flat] = 40.0;
  cls[flat * 2 + 0] = -30.0;
  cls[flat * 2 + 1] = 30.0;
  Graph g;
  auto raw = make_raw(g, gs, 2, box, obj, cls);
  EXPECT_LT(detection_loss(raw, {a}).item(), 1e-9);
  // the target decodes back to the annotated box
  const auto dets = decode_cells(raw);
  EXPECT_NEAR(dets[flat].bbox.cx, a.bbox.cx, 1e-12);
  EXPECT_NEAR(dets[flat].bbox.cy, a.bbox.cy, 1e-12);
  EXPECT_NEAR(dets[flat].bbox.w, a.bbox.w, 1e-12);
  EXPECT_NEAR(dets[flat].bbox.h, a.bbox.h, 1e-12);
}

TEST(LossTest, MatchesScriptedFormula) {
  std::mt19937_64 rng(21);
  for (int trial = 0; trial < 20; ++trial) {
    const int gs = 8, n = 2;
    auto box = rand_vec(gs * gs * 4, rng, -2, 2), obj = rand_vec(gs * gs, rng, -4, 4),
         cls = rand_vec(gs * gs * n, rng, -3, 3);
    std::uniform_real_distribution<double> s(0.05, 0.5), u(0, 1);
    const double w = s(rng), h = s(rng);
    const Annotation a{static_cast<int>(trial % n), {w / 2 + u(rng) * (1 - w), h / 2 + u(rng) * (1 - h), w, h}};
    Graph g;
    auto raw = make_raw(g, gs, n, box, obj, cls);
    const double got = detection_loss(raw, {a}).item();

    const int j = std::min(gs - 1, static_cast<int>(a.bbox.cx * gs)), i = std::min(gs - 1, static_cast<int>(a.bbox.cy * gs));
    const int flat = i * gs + j;
    double bce = 0;
    for (int k = 0; k < gs * gs; ++k) {
      const double y = k == flat ? 1.0 : 0.0, p = 1 / (1 + std::exp(-obj[k]));
      bce += -(y * std::log(p) + (1 - y) * std::log(1 - p));
    }
    bce /= gs * gs;
    const double z0 = cls[flat * n], z1 = cls[flat * n + 1];
    const double lse = std::log(std::exp(z0) + std::exp(z1));
    const double ce = lse - (a.class_id == 0 ? z0 : z1);
    auto clamp_logit = [](double f) {
      f = std::min(0.95, std::max(0.05, f));
      return std::log(f / (1 - f));
    };
    const double tgt[4] = {clamp_logit(a.bbox.cx * gs - j), clamp_logit(a.bbox.cy * gs - i), std::log(a.bbox.w * gs),
                           std::log(a.bbox.h * gs)};
    double l2 = 0;
    for (int k = 0; k < 4; ++k) l2 += (box[flat * 4 + k] - tgt[k]) * (box[flat * 4 + k] - tgt[k]);
    EXPECT_NEAR(got, bce + ce + l2, 1e-9) << "trial " << trial;
  }
}

TEST(LossTest, RejectsDegenerateAnnotation) {
  Graph g;
  auto raw = make_raw(g, 2, 2, std::vector<double>(16), std::vector<double>(4), std::vector<double>(8));
  EXPECT_THROW(detection_loss(raw, {{0, {0.5, 0.5, 0.0, 0.2}}}), std::invalid_argument);
  EXPECT_THROW(detection_loss(raw, {{0, {0.5, 0.5, 0.2, -0.1}}}), std::invalid_argument);
  EXPECT_THROW(detection_loss(raw, {{2, {0.5, 0.5, 0.2, 0.2}}}), std::invalid_argument);
}

TEST(LossTest, ParameterGradientsMatchFiniteDifferences) {
  auto m = init_model(small_cfg(), 4);
  const auto im = random_image(32, 32, 1, 4);
  const std::vector<Annotation> anns{{0, {0.3, 0.4, 0.25, 0.2}}, {1, {0.8, 0.7, 0.1, 0.3}}};
  Graph g;
  auto f = forward(g, m, im, false, true);
  g.backward(detection_loss(f.raw, anns));
  auto loss_at = [&] {
    Graph h;
    auto r = forward(h, m, im);
    return detection_loss(r.raw, anns).item();
  };
  std::mt19937_64 rng(2);
  for (std::size_t p = 0; p < m.params.size(); ++p) {
    for (int k = 0; k < 3; ++k) {
      const std::size_t idx = std::uniform_int_distribution<std::size_t>(0, m.params[p].size() - 1)(rng);
      const double fd = testutil::central_diff(m.params[p].data, idx, loss_at);
      const double an = f.params[p].grad()[idx];
      if (std::abs(fd) < 1e-7 && std::abs(an) < 1e-7) continue;
      EXPECT_LT(rel_err(an, fd), 1e-3) << "param " << p << " idx " << idx;
    }
  }
}

TEST(WeightsTest, RoundTripIsLosslessAtFloatPrecision) {
  testutil::TempDir dir;
  const auto m = round_to_float(init_model({64, 64, 1, 3}, 7));
  save_model(dir / "w.bin", m);
  const auto back = load_model(dir / "w.bin");
  EXPECT_EQ(back, m);
  EXPECT_EQ(back.seed, 7u);
  EXPECT_EQ(back.config, m.config);
}

TEST(WeightsTest, CorruptFilesRejected) {
  const auto bytes = encode_weights(init_model(small_cfg(), 1));
  EXPECT_THROW(decode_weights("XXXX" + bytes.substr(4)), std::runtime_error);
  EXPECT_THROW(decode_weights(bytes.substr(0, bytes.size() - 5)), std::runtime_error);
  EXPECT_THROW(decode_weights(bytes.substr(0, 6)), std::runtime_error);
}

TEST(DetectTest, DeterministicAndAboveThreshold) {
  const auto m = init_model(small_cfg(), 2);
  const auto im = random_image(32, 32, 1, 3);
  const auto a = detect(m, im, 0.1), b = detect(m, im, 0.1);
  ASSERT_EQ(a.size(), b.size());
  for (std::size_t k = 0; k < a.size(); ++k) {
    EXPECT_EQ(a[k].cell, b[k].cell);
    EXPECT_EQ(a[k].objectness, b[k].objectness);
    EXPECT_GE(a[k].objectness, 0.1);
  }
}
