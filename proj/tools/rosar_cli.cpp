#include <chrono>
#include <cstdlib>
#include <functional>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "rosar/pipeline.hpp"

using namespace rosar;
using nlohmann::json;

namespace {

std::optional<std::uint64_t> env_seed() {
  const char* s = std::getenv("ROSAR_SEED");
  if (!s || !*s) return std::nullopt;
  try {
    return std::stoull(s);
  } catch (const std::exception&) {
    throw std::invalid_argument(std::string("ROSAR_SEED: not an unsigned integer: ") + s);
  }
}

std::uint64_t resolve_seed(const std::optional<std::uint64_t>& flag, std::uint64_t fallback = 7) {
  if (flag) return *flag;
  if (auto e = env_seed()) return *e;
  return fallback;
}

double parse_time_limit_flag(const std::string& s) {
  if (s == "inf" || s == "none") return INFINITY;
  double v = 0;
  try {
    v = std::stod(s);
  } catch (const std::exception&) {
    throw std::invalid_argument("--time-limit: expected seconds or 'inf', got '" + s + "'");
  }
  return v <= 0 ? INFINITY : v;
}

std::vector<Sample> load_all(const std::vector<std::string>& dirs) {
  std::vector<fs::path> p(dirs.begin(), dirs.end());
  return load_group(p);
}

// Runs one subcommand body, then checks outputs and writes the manifest.
int run_command(const std::string& name, const fs::path& out, const std::function<void(RunManifest&)>& body) {
  const auto t0 = std::chrono::steady_clock::now();
  RunManifest m;
  m.subcommand = name;
  try {
    fs::create_directories(out);
    body(m);
    verify_outputs(m.outputs);
    m.wall_clock_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    write_run_manifest(out, m);
  } catch (const std::exception& e) {
    std::cerr << name << ": error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"rosar: robustness analysis for a synthetic side-scan sonar wall detector"};
  app.require_subcommand(1);
  std::function<int()> action;

  const std::vector<std::string> variants{"clean", "surface", "noisy"};

  // gen-data
  {
    auto* c = app.add_subcommand("gen-data", "generate a synthetic waterfall dataset");
    auto variant = std::make_shared<std::string>();
    auto count = std::make_shared<int>(10);
    auto seed = std::make_shared<std::optional<std::uint64_t>>();
    auto out = std::make_shared<std::string>("data");
    auto size = std::make_shared<int>(64);
    auto name = std::make_shared<std::string>();
    c->add_option("--variant", *variant, "clean | surface | noisy")->required()->check(CLI::IsMember(variants));
    c->add_option("--count", *count, "number of images")->check(CLI::NonNegativeNumber);
    c->add_option("--seed", *seed, "generator seed (default: $ROSAR_SEED or 7)");
    c->add_option("--out", *out, "output dataset directory");
    c->add_option("--size", *size, "image height and width")->check(CLI::Range(32, 4096));
    c->add_option("--name", *name, "dataset name (default: variant)");
    c->callback([=, &action] {
      action = [=] {
        return run_command("gen-data", *out, [&](RunManifest& m) {
          const auto s = resolve_seed(*seed);
          generate_dataset(*out, name->empty() ? *variant : *name, parse_variant(*variant), *count, s, *size, *size);
          m.parameters = {{"variant", *variant}, {"count", *count}, {"size", *size}};
          m.seeds = {{"seed", s}};
          m.outputs = {*out, (fs::path(*out) / "manifest.json").string()};
        });
      };
    });
  }

  // train
  {
    auto* c = app.add_subcommand("train", "train a detector from scratch (or continue from --init)");
    auto data = std::make_shared<std::vector<std::string>>();
    auto out = std::make_shared<std::string>("model");
    auto init = std::make_shared<std::string>();
    auto cfg = std::make_shared<TrainConfig>();
    auto seed = std::make_shared<std::optional<std::uint64_t>>();
    auto model_seed = std::make_shared<std::uint64_t>(1);
    auto size = std::make_shared<int>(64);
    auto classes = std::make_shared<int>(2);
    c->add_option("--data", *data, "dataset directories")->required()->check(CLI::ExistingDirectory);
    c->add_option("--out", *out, "output directory (weights.bin)");
    c->add_option("--init", *init, "initial weights")->check(CLI::ExistingFile);
    c->add_option("--epochs", cfg->epochs)->check(CLI::PositiveNumber);
    c->add_option("--lr", cfg->lr)->check(CLI::PositiveNumber);
    c->add_option("--momentum", cfg->momentum)->check(CLI::Range(0.0, 0.999999));
    c->add_option("--grad-clip", cfg->grad_clip, "global gradient-norm bound (<= 0 disables)");
    c->add_option("--seed", *seed, "shuffle seed (default: $ROSAR_SEED or 7)");
    c->add_option("--model-seed", *model_seed, "weight init seed");
    c->add_option("--size", *size, "input height and width");
    c->add_option("--num-classes", *classes)->check(CLI::PositiveNumber);
    c->callback([=, &action] {
      action = [=] {
        return run_command("train", *out, [&](RunManifest& m) {
          TrainConfig t = *cfg;
          t.seed = resolve_seed(*seed);
          const auto samples = load_all(*data);
          ModelParams start = init->empty() ? init_model({*size, *size, 1, *classes}, *model_seed) : load_model(*init);
          json log = json::array();
          auto model =
              train(start, samples, t, [&](int e, const ModelParams&, double l) { log.push_back({{"epoch", e}, {"loss", l}}); });
          const fs::path w = fs::path(*out) / "weights.bin";
          save_model(w, model);
          write_file_atomic(fs::path(*out) / "train_log.json", log.dump(2) + "\n");
          m.parameters = {{"epochs", t.epochs}, {"lr", t.lr}, {"momentum", t.momentum}, {"grad_clip", t.grad_clip}, {"init", *init}};
          m.seeds = {{"seed", t.seed}, {"model_seed", *model_seed}};
          m.inputs = *data;
          m.outputs = {w.string(), (fs::path(*out) / "train_log.json").string()};
        });
      };
    });
  }

  // bound-search
  {
    auto* c = app.add_subcommand("bound-search", "bisect the robustness threshold of every detection");
    auto weights = std::make_shared<std::string>();
    auto model_id = std::make_shared<std::string>("model");
    auto data = std::make_shared<std::vector<std::string>>();
    auto out = std::make_shared<std::string>("search");
    auto property = std::make_shared<std::string>();
    auto lower = std::make_shared<std::optional<double>>();
    auto upper = std::make_shared<std::optional<double>>();
    auto max_iter = std::make_shared<int>(5);
    auto time_limit = std::make_shared<std::string>("10");
    auto direction = std::make_shared<std::string>();
    auto xi = std::make_shared<double>(kDefaultConfThreshold);
    auto selection = std::make_shared<std::string>("all");
    auto attack = std::make_shared<AttackConfig>();
    auto seed = std::make_shared<std::optional<std::uint64_t>>();
    auto workers = std::make_shared<int>(1);
    c->add_option("--model", *weights, "weights file")->required()->check(CLI::ExistingFile);
    c->add_option("--model-id", *model_id, "id recorded in the output");
    c->add_option("--data", *data, "dataset directories")->required()->check(CLI::ExistingDirectory);
    c->add_option("--out", *out, "output directory");
    c->add_option("--property", *property, "p1 | p2")->required()->check(CLI::IsMember({"p1", "p2"}));
    c->add_option("--lower", *lower, "initial lower bound");
    c->add_option("--upper", *upper, "initial upper bound");
    c->add_option("--max-iter", *max_iter)->check(CLI::PositiveNumber);
    c->add_option("--time-limit", *time_limit, "seconds per attack, or 'inf'");
    c->add_option("--direction", *direction, "high_eps_unsafe | low_eps_unsafe | verbatim")
        ->check(CLI::IsMember({"high_eps_unsafe", "low_eps_unsafe", "verbatim"}));
    c->add_option("--xi-obj", *xi, "objectness threshold")->check(CLI::Range(0.0, 1.0));
    c->add_option("--selection", *selection, "all | top")->check(CLI::IsMember({"all", "top"}));
    c->add_option("--steps", attack->steps)->check(CLI::PositiveNumber);
    c->add_option("--restarts", attack->restarts)->check(CLI::PositiveNumber);
    c->add_option("--step-size", attack->step_size, "0 selects the default")->check(CLI::NonNegativeNumber);
    c->add_option("--seed", *seed, "attack seed (default: $ROSAR_SEED or 7)");
    c->add_option("--workers", *workers)->check(CLI::PositiveNumber);
    c->callback([=, &action] {
      action = [=] {
        return run_command("bound-search", *out, [&](RunManifest& m) {
          SearchConfig sc = SearchConfig::defaults(parse_property(*property));
          if (*lower) sc.lower = **lower;
          if (*upper) sc.upper = **upper;
          sc.max_iter = *max_iter;
          if (!direction->empty()) sc.direction = parse_direction(*direction);
          sc.xi_obj = *xi;
          sc.selection = *selection == "all" ? BoxSelection::All : BoxSelection::TopConfidence;
          AttackConfig a = *attack;
          a.time_limit = parse_time_limit_flag(*time_limit);
          a.seed = resolve_seed(*seed);
          a.validate();
          const auto res =
              binary_search_bound(load_model(*weights), *model_id, load_all(*data), sc, a, *out, *workers);
          m.parameters = {{"property", *property},   {"lower", sc.lower},    {"upper", sc.upper},
                          {"max_iter", sc.max_iter}, {"direction", to_string(sc.direction)},
                          {"xi_obj", sc.xi_obj},     {"selection", *selection}, {"attack", to_json(a)},
                          {"workers", *workers},     {"instances", res.records.size()},
                          {"skipped", res.skipped},  {"counterexamples", res.counterexamples}};
          m.seeds = {{"attack_seed", a.seed}};
          m.inputs = *data;
          m.inputs.push_back(*weights);
          m.outputs = {(fs::path(*out) / "records.jsonl").string()};
        });
      };
    });
  }

  // gen-adv-dataset
  {
    auto* c = app.add_subcommand("gen-adv-dataset", "collect counter-examples of a search into a dataset");
    auto search = std::make_shared<std::string>();
    auto out = std::make_shared<std::string>("adv");
    auto name = std::make_shared<std::string>("adv_swdd");
    c->add_option("--search", *search, "bound-search output directory")->required()->check(CLI::ExistingDirectory);
    c->add_option("--out", *out, "output dataset directory");
    c->add_option("--name", *name, "dataset name");
    c->callback([=, &action] {
      action = [=] {
        return run_command("gen-adv-dataset", *out, [&](RunManifest& m) {
          const auto man = assemble_adv_dataset(read_records(fs::path(*search) / "records.jsonl"), *search, *out, *name);
          m.parameters = {{"name", *name}, {"entries", man.entries.size()}};
          m.inputs = {*search};
          m.outputs = {*out};
        });
      };
    });
  }

  // train-patch
  {
    auto* c = app.add_subcommand("train-patch", "train a universal patch against a surrogate detector");
    auto weights = std::make_shared<std::string>();
    auto victim = std::make_shared<std::string>();
    auto data = std::make_shared<std::vector<std::string>>();
    auto out = std::make_shared<std::string>("patch");
    auto cfg = std::make_shared<PatchTrainConfig>();
    c->add_option("--surrogate", *weights, "surrogate weights")->required()->check(CLI::ExistingFile);
    c->add_option("--victim", *victim, "victim weights for the transfer report")->check(CLI::ExistingFile);
    c->add_option("--data", *data, "dataset directories")->required()->check(CLI::ExistingDirectory);
    c->add_option("--out", *out, "output directory");
    c->add_option("--size", cfg->size)->check(CLI::Range(2, 512));
    c->add_option("--epochs", cfg->epochs)->check(CLI::PositiveNumber);
    c->add_option("--w-obj", cfg->w_obj)->check(CLI::NonNegativeNumber);
    c->add_option("--w-tv", cfg->w_tv)->check(CLI::NonNegativeNumber);
    c->add_option("--lr", cfg->lr)->check(CLI::PositiveNumber);
    c->add_option("--scale", cfg->scale)->check(CLI::Range(0.0, 1.0));
    c->callback([=, &action] {
      action = [=] {
        return run_command("train-patch", *out, [&](RunManifest& m) {
          const auto surrogate = load_model(*weights);
          const auto samples = load_all(*data);
          auto res = rosar::train_patch(surrogate, samples, *cfg, fs::path(*weights).string());
          save_patch(*out, res.patch);
          m.outputs = {(fs::path(*out) / "patch.pgm").string(), (fs::path(*out) / "patch.json").string()};
          if (!victim->empty()) {
            const auto tr = transfer_report(surrogate, load_model(*victim), samples, res.patch, cfg->scale);
            write_file_atomic(fs::path(*out) / "transfer.json", tr.to_json().dump(2) + "\n");
            m.outputs.push_back((fs::path(*out) / "transfer.json").string());
          }
          m.parameters = res.patch.meta;
          m.inputs = *data;
          m.inputs.push_back(*weights);
        });
      };
    });
  }

  // patch-dataset
  {
    auto* c = app.add_subcommand("patch-dataset", "paste a trained patch over every box of a dataset");
    auto patch = std::make_shared<std::string>();
    auto data = std::make_shared<std::vector<std::string>>();
    auto out = std::make_shared<std::string>("patch_swdd");
    auto scale = std::make_shared<double>(0.4);
    auto name = std::make_shared<std::string>("patch_swdd");
    c->add_option("--patch", *patch, "train-patch output directory")->required()->check(CLI::ExistingDirectory);
    c->add_option("--data", *data, "dataset directories")->required()->check(CLI::ExistingDirectory);
    c->add_option("--out", *out, "output dataset directory");
    c->add_option("--scale", *scale)->check(CLI::Range(0.0, 1.0));
    c->add_option("--name", *name, "dataset name");
    c->callback([=, &action] {
      action = [=] {
        return run_command("patch-dataset", *out, [&](RunManifest& m) {
          build_patch_dataset(load_all(*data), load_patch(*patch), *scale, *out, *name);
          m.parameters = {{"scale", *scale}, {"name", *name}};
          m.inputs = *data;
          m.inputs.push_back(*patch);
          m.outputs = {*out};
        });
      };
    });
  }

  // retrain
  {
    auto* c = app.add_subcommand("retrain", "fine-tune a model on an adversarial dataset");
    auto weights = std::make_shared<std::string>();
    auto data = std::make_shared<std::vector<std::string>>();
    auto out = std::make_shared<std::string>("retrained");
    auto snapshots = std::make_shared<std::vector<int>>(std::vector<int>{5, 10, 15, 20});
    auto cfg = std::make_shared<TrainConfig>();
    auto seed = std::make_shared<std::optional<std::uint64_t>>();
    c->add_option("--model", *weights, "weights to fine-tune")->required()->check(CLI::ExistingFile);
    c->add_option("--data", *data, "adversarial dataset directories")->required()->check(CLI::ExistingDirectory);
    c->add_option("--out", *out, "output directory (e<N>/weights.bin per snapshot)");
    c->add_option("--epochs", *snapshots, "snapshot epochs")->check(CLI::PositiveNumber);
    c->add_option("--lr", cfg->lr, "base learning rate (scaled by 0.1 for fine-tuning)")->check(CLI::PositiveNumber);
    c->add_option("--momentum", cfg->momentum)->check(CLI::Range(0.0, 0.999999));
    c->add_option("--grad-clip", cfg->grad_clip, "global gradient-norm bound (<= 0 disables)");
    c->add_option("--seed", *seed, "shuffle seed (default: $ROSAR_SEED or 7)");
    c->callback([=, &action] {
      action = [=] {
        return run_command("retrain", *out, [&](RunManifest& m) {
          TrainConfig t = *cfg;
          t.seed = resolve_seed(*seed);
          const auto adv = load_all(*data);
          const int max_e = *std::max_element(snapshots->begin(), snapshots->end());
          finetune(load_model(*weights), adv, max_e, t, [&](int e, const ModelParams& model, double) {
            if (std::find(snapshots->begin(), snapshots->end(), e) == snapshots->end()) return;
            const fs::path w = fs::path(*out) / ("e" + std::to_string(e)) / "weights.bin";
            save_model(w, model);
            m.outputs.push_back(w.string());
          });
          m.parameters = {{"epochs", *snapshots}, {"lr", t.lr * kFinetuneLrScale}, {"momentum", t.momentum}, {"grad_clip", t.grad_clip}};
          m.seeds = {{"seed", t.seed}};
          m.inputs = *data;
          m.inputs.push_back(*weights);
        });
      };
    });
  }

  // evaluate
  {
    auto* c = app.add_subcommand("evaluate", "TP%, FP count and AP of a model on datasets");
    auto weights = std::make_shared<std::string>();
    auto data = std::make_shared<std::vector<std::string>>();
    auto out = std::make_shared<std::string>("eval");
    auto iou_t = std::make_shared<double>(0.5);
    auto conf = std::make_shared<double>(kDefaultConfThreshold);
    auto workers = std::make_shared<int>(1);
    c->add_option("--model", *weights, "weights file")->required()->check(CLI::ExistingFile);
    c->add_option("--data", *data, "dataset directories")->required()->check(CLI::ExistingDirectory);
    c->add_option("--out", *out, "output directory (eval.json)");
    c->add_option("--iou", *iou_t)->check(CLI::Range(0.0, 1.0));
    c->add_option("--conf", *conf)->check(CLI::Range(0.0, 1.0));
    c->add_option("--workers", *workers)->check(CLI::PositiveNumber);
    c->callback([=, &action] {
      action = [=] {
        return run_command("evaluate", *out, [&](RunManifest& m) {
          const auto rep = evaluate(load_model(*weights), load_all(*data), *iou_t, *conf, *workers);
          const fs::path f = fs::path(*out) / "eval.json";
          write_file_atomic(f, rep.to_json().dump(2) + "\n");
          m.parameters = {{"iou_threshold", *iou_t}, {"conf_threshold", *conf}};
          m.inputs = *data;
          m.inputs.push_back(*weights);
          m.outputs = {f.string()};
        });
      };
    });
  }

  // report
  {
    auto* c = app.add_subcommand("report", "write robustness.csv and summary.json");
    auto searches = std::make_shared<std::vector<std::string>>();
    auto evals = std::make_shared<std::vector<std::string>>();
    auto out = std::make_shared<std::string>("report");
    auto baseline = std::make_shared<std::string>("original");
    c->add_option("--search", *searches, "bound-search output directories")->required()->check(CLI::ExistingDirectory);
    c->add_option("--eval", *evals, "MODEL:DATASET=eval.json entries");
    c->add_option("--out", *out, "output directory");
    c->add_option("--baseline", *baseline, "model id deltas are taken against");
    c->callback([=, &action] {
      action = [=] {
        return run_command("report", *out, [&](RunManifest& m) {
          ReportInput in;
          in.baseline_model = *baseline;
          for (const auto& s : *searches) {
            auto r = read_records(fs::path(s) / "records.jsonl");
            in.records.insert(in.records.end(), r.begin(), r.end());
            m.inputs.push_back(s);
          }
          for (const auto& e : *evals) {
            const auto colon = e.find(':'), eq = e.find('=');
            if (colon == std::string::npos || eq == std::string::npos || eq < colon)
              throw std::invalid_argument("--eval: expected MODEL:DATASET=FILE, got '" + e + "'");
            const auto j = json::parse(read_file(e.substr(eq + 1)));
            EvalReport rep;
            rep.tp_percent = j.at("tp_percent");
            rep.tp_count = j.at("tp");
            rep.gt_count = j.at("gt");
            rep.fp_count = j.at("fp");
            rep.ap = j.at("ap");
            rep.iou_threshold = j.at("iou_threshold");
            rep.conf_threshold = j.at("conf_threshold");
            in.eval[e.substr(0, colon)][e.substr(colon + 1, eq - colon - 1)] = rep;
            m.inputs.push_back(e.substr(eq + 1));
          }
          report(in, *out);
          m.parameters = {{"baseline", *baseline}};
          m.outputs = {(fs::path(*out) / "robustness.csv").string(), (fs::path(*out) / "summary.json").string()};
        });
      };
    });
  }

  // pipeline
  {
    auto* c = app.add_subcommand("pipeline", "run every stage from a config file (resumable)");
    auto config = std::make_shared<std::string>();
    auto out = std::make_shared<std::string>("run");
    auto workers = std::make_shared<std::optional<int>>();
    auto seed = std::make_shared<std::optional<std::uint64_t>>();
    auto time_limit = std::make_shared<std::optional<std::string>>();
    c->add_option("--config", *config, "JSON config")->required()->check(CLI::ExistingFile);
    c->add_option("--out", *out, "run directory; every artifact is written below it");
    c->add_option("--workers", *workers, "attack/eval worker cap")->check(CLI::PositiveNumber);
    c->add_option("--seed", *seed, "overrides the config seed");
    c->add_option("--time-limit", *time_limit, "overrides attack.time_limit (seconds or 'inf')");
    c->callback([=, &action] {
      action = [=] {
        try {
          auto j = json::parse(read_file(*config));
          if (*seed) j["seed"] = **seed;
          if (*time_limit) {
            const double t = parse_time_limit_flag(**time_limit);
            j["attack"]["time_limit"] = std::isinf(t) ? json("inf") : json(t);
          }
          if (*workers) j["workers"] = **workers;
          const auto cfg = parse_pipeline_config(j, env_seed());
          run_pipeline(cfg, *out);
          std::cout << "pipeline complete: " << (fs::path(*out) / "report" / "summary.json").string() << "\n";
          return 0;
        } catch (const std::exception& e) {
          std::cerr << "pipeline: error: " << e.what() << "\n";
          return 1;
        }
      };
    });
  }

  CLI11_PARSE(app, argc, argv);
  return action ? action() : 1;
}
