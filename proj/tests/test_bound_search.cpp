#include <gtest/gtest.h>

#include <chrono>
#include <random>

#include "rosar/bound_search.hpp"
#include "rosar/retrain_eval.hpp"
#include "test_util.hpp"

using namespace rosar;

namespace {

// Oracle that reports a counter-example exactly on the unsafe side of t.
std::function<EvalOutcome(double, int)> monotone_stub(double t, UnsafeDirection d, std::vector<double>* ce_eps = nullptr,
                                                     std::vector<double>* safe_eps = nullptr) {
  return [=](double eps, int) {
    const bool found = d == UnsafeDirection::HighEpsUnsafe ? eps >= t : eps <= t;
    if (found && ce_eps) ce_eps->push_back(eps);
    if (!found && safe_eps) safe_eps->push_back(eps);
    return EvalOutcome{found, false};
  };
}

struct SmallWorld {
  ModelParams model;
  std::vector<Sample> samples;
};

const SmallWorld& world() {
  static const SmallWorld w = [] {
    auto train_set = generate_samples(Variant::Clean, 6, 1, 64, 64);
    const auto noisy = generate_samples(Variant::Noisy, 6, 2, 64, 64);
    train_set.insert(train_set.end(), noisy.begin(), noisy.end());
    TrainConfig cfg;
    cfg.epochs = 40;
    cfg.seed = 11;
    auto model = train(init_model({64, 64, 1, 2}, 1), train_set, cfg);
    return SmallWorld{model, generate_samples(Variant::Clean, 2, 3, 64, 64)};
  }();
  return w;
}

AttackConfig quick_attack() {
  AttackConfig a;
  a.steps = 10;
  a.restarts = 1;
  a.time_limit = INFINITY;
  a.seed = 3;
  return a;
}

}  // namespace

TEST(BisectTest, RecoversThresholdHighEpsUnsafe) {
  const auto start = std::chrono::steady_clock::now();
  std::mt19937_64 rng(1);
  const auto cfg = SearchConfig::defaults(PropertyKind::P1);
  std::uniform_real_distribution<double> u(cfg.lower, cfg.upper);
  for (int k = 0; k < 50; ++k) {
    const double t = u(rng);
    const auto b = bisect(cfg, monotone_stub(t, cfg.direction));
    EXPECT_LE(std::abs(b.threshold - t), (cfg.upper - cfg.lower) / 32) << t;
    EXPECT_EQ(b.log.size(), 5u);
  }
  EXPECT_LT(std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count(), 5.0);
}

TEST(BisectTest, RecoversThresholdLowEpsUnsafe) {
  std::mt19937_64 rng(2);
  const auto cfg = SearchConfig::defaults(PropertyKind::P2);
  EXPECT_EQ(cfg.direction, UnsafeDirection::LowEpsUnsafe);
  std::uniform_real_distribution<double> u(cfg.lower, cfg.upper);
  for (int k = 0; k < 50; ++k) {
    const double t = u(rng);
    const auto b = bisect(cfg, monotone_stub(t, cfg.direction));
    EXPECT_LE(std::abs(b.threshold - t), (cfg.upper - cfg.lower) / 32) << t;
  }
}

TEST(BisectTest, ExampleThresholdAtFivePercent) {
  const auto b = bisect(SearchConfig::defaults(PropertyKind::P1), monotone_stub(0.05, UnsafeDirection::HighEpsUnsafe));
  EXPECT_LE(std::abs(b.threshold - 0.05), 0.0025);
}

TEST(BisectTest, AllSafeWalksLowToUpper) {
  const auto cfg = SearchConfig::defaults(PropertyKind::P1);
  const auto b = bisect(cfg, [](double, int) { return EvalOutcome{}; });
  const double step = (cfg.upper - cfg.lower) / 32;
  EXPECT_NEAR(b.log.back().low, cfg.upper - step, 1e-15);
  EXPECT_EQ(b.log.back().high, cfg.upper);
  EXPECT_NEAR(b.threshold, ((cfg.upper - step) + cfg.upper) / 2, 1e-15);
}

TEST(BisectTest, BracketHalvesEachIteration) {
  for (auto kind : {PropertyKind::P1, PropertyKind::P2}) {
    auto cfg = SearchConfig::defaults(kind);
    cfg.max_iter = 12;
    std::mt19937_64 rng(3);
    const auto b = bisect(cfg, [&](double, int) { return EvalOutcome{rng() % 2 == 0, false}; });
    ASSERT_EQ(b.log.size(), 12u);
    for (std::size_t k = 0; k < b.log.size(); ++k) {
      const double width = (cfg.upper - cfg.lower) / std::ldexp(1.0, static_cast<int>(k) + 1);
      EXPECT_NEAR(b.log[k].high - b.log[k].low, width, 1e-15);
      EXPECT_GE(b.log[k].low, cfg.lower);
      EXPECT_LE(b.log[k].high, cfg.upper);
    }
    EXPECT_GE(b.threshold, cfg.lower);
    EXPECT_LE(b.threshold, cfg.upper);
  }
}

TEST(BisectTest, BracketInvariantAgainstMonotoneOracle) {
  std::mt19937_64 rng(4);
  for (auto kind : {PropertyKind::P1, PropertyKind::P2}) {
    const auto cfg = SearchConfig::defaults(kind);
    std::uniform_real_distribution<double> u(cfg.lower, cfg.upper);
    for (int k = 0; k < 50; ++k) {
      std::vector<double> ce, safe;
      const auto b = bisect(cfg, monotone_stub(u(rng), cfg.direction, &ce, &safe));
      for (const auto& step : b.log) {
        const double safe_bound = cfg.direction == UnsafeDirection::HighEpsUnsafe ? step.low : step.high;
        const double unsafe_bound = cfg.direction == UnsafeDirection::HighEpsUnsafe ? step.high : step.low;
        // the safe side is either the initial bound or a probed safe epsilon
        const bool initial = safe_bound == (cfg.direction == UnsafeDirection::HighEpsUnsafe ? cfg.lower : cfg.upper);
        EXPECT_TRUE(initial || std::find(safe.begin(), safe.end(), safe_bound) != safe.end());
        EXPECT_TRUE(std::find(ce.begin(), ce.end(), safe_bound) == ce.end());
        const bool unsafe_initial =
            unsafe_bound == (cfg.direction == UnsafeDirection::HighEpsUnsafe ? cfg.upper : cfg.lower);
        EXPECT_TRUE(unsafe_initial || std::find(ce.begin(), ce.end(), unsafe_bound) != ce.end());
      }
    }
  }
}

TEST(BisectTest, VerbatimModeFollowsHighUpdate) {
  EXPECT_EQ(parse_direction("verbatim"), UnsafeDirection::HighEpsUnsafe);
  EXPECT_THROW(parse_direction("sideways"), std::invalid_argument);
  auto cfg = SearchConfig::defaults(PropertyKind::P2);
  cfg.direction = parse_direction("verbatim");
  // with P2 semantics (unsafe below 0.8) the verbatim update drifts to the low end
  const auto b = bisect(cfg, monotone_stub(0.8, UnsafeDirection::LowEpsUnsafe));
  EXPECT_LT(b.threshold, 0.62);
}

TEST(BisectTest, ConfigValidation) {
  SearchConfig c;
  c.lower = c.upper;
  EXPECT_THROW(bisect(c, monotone_stub(0, c.direction)), std::invalid_argument);
  c = {};
  c.max_iter = 0;
  EXPECT_THROW(c.validate(), std::invalid_argument);
}

TEST(RecordsTest, JsonlRoundTripAndErrorLocation) {
  testutil::TempDir dir;
  RobustnessRecord r;
  r.model_id = "m";
  r.image_id = "img_0001";
  r.cell = {3, 4};
  r.kind = PropertyKind::P2;
  r.target_class = 1;
  r.threshold = 0.8125;
  r.lower_init = 0.6;
  r.upper_init = 1.0;
  r.direction = UnsafeDirection::LowEpsUnsafe;
  r.lines = {1, 2, 9};
  r.log = {{0.8, true, false, 0.8, 1.0}, {0.9, false, true, 0.8, 0.9}};
  r.ce_paths = {"counterexamples/a.json"};
  RobustnessRecord q = r;
  q.image_id = "img_0002";
  q.log.clear();
  q.ce_paths.clear();
  write_records(dir / "records.jsonl", {r, q});
  const auto back = read_records(dir / "records.jsonl");
  ASSERT_EQ(back.size(), 2u);
  EXPECT_EQ(to_json(back[0]), to_json(r));
  EXPECT_EQ(to_json(back[1]), to_json(q));
  EXPECT_TRUE(back[0].any_deadline_fired());
  EXPECT_FALSE(back[1].any_deadline_fired());

  write_file_atomic(dir / "bad.jsonl", to_json(r).dump() + "\n{\"model_id\": 1}\n");
  try {
    read_records(dir / "bad.jsonl");
    FAIL();
  } catch (const std::runtime_error& e) {
    EXPECT_NE(std::string(e.what()).find("bad.jsonl:2"), std::string::npos) << e.what();
  }
}

TEST(EvalPropTest, DegenerateRegionsAndMissingBaseline) {
  const auto& w = world();
  const auto inst = baseline_instances(w.model, w.samples, kDefaultConfThreshold, BoxSelection::All);
  ASSERT_FALSE(inst.empty());
  const Sample& s = w.samples[inst[0].sample_index];
  const auto attack = quick_attack();
  const auto p1 = instance_spec(SearchConfig::defaults(PropertyKind::P1), s, inst[0].baseline, 1);
  EXPECT_FALSE(eval_prop(w.model, s.image, p1, 0.0, attack).found);
  const auto p2 = instance_spec(SearchConfig::defaults(PropertyKind::P2), s, inst[0].baseline, 1);
  EXPECT_FALSE(p2.lines.empty());
  EXPECT_EQ(p2.lines, instance_spec(SearchConfig::defaults(PropertyKind::P2), s, inst[0].baseline, 1).lines);
  EXPECT_FALSE(eval_prop(w.model, s.image, p2, 1.0, attack).found);
  PropertySpec wrong = p1;
  wrong.xi_obj = 1.0;  // no detection can clear this
  EXPECT_THROW(eval_prop(w.model, s.image, wrong, 0.05, attack), std::invalid_argument);
}

TEST(SearchTest, RecordsCounterExamplesAndDatasetAgree) {
  const auto& w = world();
  testutil::TempDir dir;
  auto cfg = SearchConfig::defaults(PropertyKind::P1);
  cfg.upper = 0.3;
  const auto attack = quick_attack();
  const auto res = binary_search_bound(w.model, "small", w.samples, cfg, attack, dir.path());
  const auto expected = baseline_instances(w.model, w.samples, cfg.xi_obj, cfg.selection);
  EXPECT_EQ(res.records.size() + res.skipped, expected.size());
  ASSERT_FALSE(res.records.empty());
  std::size_t ce_total = 0;
  for (const auto& r : res.records) {
    EXPECT_GE(r.threshold, cfg.lower);
    EXPECT_LE(r.threshold, cfg.upper);
    EXPECT_LE(r.log.size(), static_cast<std::size_t>(cfg.max_iter));
    EXPECT_EQ(r.model_id, "small");
    std::size_t found = 0;
    for (const auto& st : r.log) found += st.found;
    EXPECT_EQ(found, r.ce_paths.size());
    for (const auto& rel : r.ce_paths) {
      const auto ce = load_counterexample(dir / rel);
      const auto rep = replay(w.model, ce);
      EXPECT_TRUE(rep.in_region) << rel;
      EXPECT_TRUE(rep.violates) << rel;
      EXPECT_EQ(ce.spec.target_cell, r.cell);
    }
    ce_total += r.ce_paths.size();
  }
  EXPECT_EQ(ce_total, res.counterexamples);
  EXPECT_GT(ce_total, 0u);

  const auto stored = read_records(dir / "records.jsonl");
  ASSERT_EQ(stored.size(), res.records.size());
  for (std::size_t k = 0; k < stored.size(); ++k) EXPECT_EQ(to_json(stored[k]), to_json(res.records[k]));

  // parallel search gives the same records
  testutil::TempDir dir2;
  const auto par = binary_search_bound(w.model, "small", w.samples, cfg, attack, dir2.path(), 3);
  ASSERT_EQ(par.records.size(), res.records.size());
  for (std::size_t k = 0; k < par.records.size(); ++k) EXPECT_EQ(to_json(par.records[k]), to_json(res.records[k]));

  testutil::TempDir adv;
  const auto m = assemble_adv_dataset(res.records, dir.path(), adv.path(), "p1_adv");
  EXPECT_EQ(m.entries.size(), ce_total);
  EXPECT_EQ(m.variant, Variant::Adversarial);
  const auto samples = load_samples(adv.path());
  EXPECT_EQ(samples.size(), ce_total);
  for (const auto& s : samples) {
    const auto src = std::find_if(w.samples.begin(), w.samples.end(),
                                  [&](const Sample& o) { return s.id.find(o.id) != std::string::npos; });
    ASSERT_NE(src, w.samples.end()) << s.id;
    EXPECT_EQ(s.annotations, src->annotations);
  }
  // the assembled dataset carries its own lossless copies
  for (const auto& r : res.records)
    for (const auto& rel : r.ce_paths) {
      const auto ce = load_counterexample(adv / "counterexamples" / fs::path(rel).filename());
      EXPECT_TRUE(replay(w.model, ce).violates);
    }
}

TEST(SearchTest, P2SearchKeepsLinesFixedPerInstance) {
  const auto& w = world();
  testutil::TempDir dir;
  auto cfg = SearchConfig::defaults(PropertyKind::P2);
  cfg.max_iter = 3;
  const auto res = binary_search_bound(w.model, "small", w.samples, cfg, quick_attack(), dir.path());
  ASSERT_FALSE(res.records.empty());
  for (const auto& r : res.records) {
    EXPECT_FALSE(r.lines.empty());
    for (const auto& rel : r.ce_paths) EXPECT_EQ(load_counterexample(dir / rel).spec.lines, r.lines);
    for (const auto& st : r.log) EXPECT_GE(st.low, cfg.lower - 1e-15);
  }
}

TEST(SearchTest, RejectsEmptyDataset) {
  testutil::TempDir dir;
  EXPECT_THROW(binary_search_bound(world().model, "m", {}, SearchConfig{}, quick_attack(), dir.path()),
               std::invalid_argument);
}

TEST(AssembleTest, ZeroCounterExamplesGiveEmptyDataset) {
  testutil::TempDir search, out;
  RobustnessRecord r;
  r.image_id = "x";
  const auto m = assemble_adv_dataset({r}, search.path(), out.path(), "empty");
  EXPECT_TRUE(m.entries.empty());
  EXPECT_TRUE(read_dataset(out.path()).entries.empty());
}

TEST(AssembleTest, MissingCounterExampleIsAnError) {
  testutil::TempDir search, out;
  RobustnessRecord r;
  r.ce_paths = {"counterexamples/nope.json"};
  EXPECT_THROW(assemble_adv_dataset({r}, search.path(), out.path(), "x"), std::runtime_error);
  EXPECT_THROW(load_counterexample(search / "counterexamples/nope.json"), std::runtime_error);
}
