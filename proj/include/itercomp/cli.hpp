#pragma once

// Command-line front end. Every subcommand seeds its randomness from the
// config seed (or --seed) through the same named streams run_itercomp uses,
// so stage-by-stage invocations reproduce the corresponding loop artifacts.

#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "itercomp/config.hpp"
#include "itercomp/diffusion.hpp"
#include "itercomp/error.hpp"
#include "itercomp/eval.hpp"
#include "itercomp/iterate.hpp"
#include "itercomp/log.hpp"
#include "itercomp/prefs.hpp"
#include "itercomp/reward.hpp"
#include "itercomp/theory.hpp"

namespace itercomp {

enum ExitCode : int { kExitOk = 0, kExitConfig = 1, kExitData = 2, kExitVerify = 3 };

namespace cli_detail {

struct Globals {
  std::string config;
  std::optional<std::uint64_t> seed;
  std::string workdir;
  unsigned jobs = 1;
  std::string out;
};

inline void add_globals(CLI::App* sub, Globals& g) {
  sub->add_option("--config", g.config, "Run configuration JSON");
  sub->add_option("--seed", g.seed, "Top-level seed (overrides the config)");
  sub->add_option("--workdir", g.workdir, "Work directory");
  sub->add_option("--jobs", g.jobs, "Worker threads")->check(CLI::PositiveNumber);
  sub->add_option("--out", g.out, "Output path");
}

inline RunConfig resolve_config(const Globals& g) {
  RunConfig c = g.config.empty() ? RunConfig{} : load_config(g.config);
  if (g.seed) c.seed = *g.seed;
  if (!g.workdir.empty()) c.workdir = g.workdir;
  c.validate();
  return c;
}

inline void require_out(const Globals& g, const char* cmd) {
  if (g.out.empty()) throw ConfigError(std::string(cmd) + " requires --out");
}

inline void ensure_parent(const std::string& path) {
  const auto parent = std::filesystem::path(path).parent_path();
  if (!parent.empty()) std::filesystem::create_directories(parent);
}

inline void emit_json(const Globals& g, const nlohmann::json& j, std::ostream& out) {
  if (g.out.empty()) {
    out << j.dump(2) << '\n';
  } else {
    ensure_parent(g.out);
    write_json_file(g.out, j);
  }
}

inline std::vector<std::string> split_commas(const std::string& s) {
  std::vector<std::string> out;
  std::stringstream ss(s);
  std::string part;
  while (std::getline(ss, part, ','))
    if (!part.empty()) out.push_back(part);
  return out;
}

}  // namespace cli_detail

/// Parses argv, runs one subcommand and maps failures to exit codes.
inline int run_cli(int argc, char** argv, std::ostream& out = std::cout, std::ostream& err = std::cerr) {
  using namespace cli_detail;
  CLI::App app{"Composition-aware iterative reward feedback learning on synthetic scenes", "itercomp"};
  app.require_subcommand(1);
  Globals g;

  auto* init = app.add_subcommand("init-config", "Write the default configuration");
  add_globals(init, g);
  bool paper_scale = false;
  init->add_flag("--paper-scale", paper_scale, "Use 1500/1000/1000 prompts");

  auto* gen = app.add_subcommand("gen-prefs", "Build the initial preference dataset");
  add_globals(gen, g);
  std::string stats_path;
  gen->add_option("--stats", stats_path, "Also write dataset statistics JSON here");

  auto* pre = app.add_subcommand("pretrain", "Pretrain the diffusion model on gallery images");
  add_globals(pre, g);
  std::string data_path;
  std::optional<int> steps;
  pre->add_option("--data", data_path, "prefs.jsonl")->required();
  pre->add_option("--steps", steps, "Override pretraining steps");

  auto* rw = app.add_subcommand("train-reward", "Train one category reward model");
  add_globals(rw, g);
  std::string category_name, init_path;
  std::optional<int> epochs;
  rw->add_option("--category", category_name, "attribute | spatial | nonspatial")->required();
  rw->add_option("--data", data_path, "prefs.jsonl")->required();
  rw->add_option("--epochs", epochs, "Override training epochs");
  rw->add_option("--init", init_path, "Warm-start checkpoint");

  auto* refl = app.add_subcommand("refl", "Finetune a diffusion model against reward models");
  add_globals(refl, g);
  std::string base_path, rewards_arg;
  refl->add_option("--base", base_path, "Diffusion checkpoint")->required();
  refl->add_option("--rewards", rewards_arg, "Comma-separated reward checkpoints")->required();
  refl->add_option("--data", data_path, "prefs.jsonl for the rho anchor term");

  auto* it = app.add_subcommand("iterate", "Run the closed loop");
  add_globals(it, g);
  std::optional<int> iters;
  bool resume = false;
  it->add_option("--iters", iters, "Number of iterations");
  it->add_flag("--resume", resume, "Reuse completed iterations in the work directory");

  auto* ev = app.add_subcommand("eval", "Score a diffusion model with the oracles");
  add_globals(ev, g);
  std::string model_path;
  std::optional<std::size_t> prompts;
  bool canonical = false;
  ev->add_option("--model", model_path, "Diffusion checkpoint");
  ev->add_flag("--canonical", canonical, "Evaluate the canonical scene generator instead");
  ev->add_option("--prompts", prompts, "Prompts per category");

  auto* vt = app.add_subcommand("verify-theory", "Check the discrete sandbox identities");
  add_globals(vt, g);
  double tol_lemma = 1e-10, tol_theorem = 1e-4;
  int trials = 20;
  vt->add_option("--tol-lemma", tol_lemma, "Tolerance on the marginal residual");
  vt->add_option("--tol-theorem", tol_theorem, "Tolerance on the optimum error");
  vt->add_option("--trials", trials, "Number of random sandboxes");

  auto* rep = app.add_subcommand("report", "Print the report table of a work directory");
  add_globals(rep, g);

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e, out, err);
    return code == 0 ? kExitOk : kExitConfig;
  }

  try {
    if (*init) {
      require_out(g, "init-config");
      RunConfig c = paper_scale ? paper_scale_config() : RunConfig{};
      if (g.seed) c.seed = *g.seed;
      if (!g.workdir.empty()) c.workdir = g.workdir;
      ensure_parent(g.out);
      write_json_file(g.out, config_to_json(c));
      return kExitOk;
    }

    if (*vt) {
      const std::uint64_t seed = g.seed.value_or(RunConfig{}.seed);
      const auto report = theory::verify_theory(seed, trials, tol_lemma, tol_theorem);
      out << report.to_json().dump(2) << '\n';
      if (!g.out.empty()) {
        ensure_parent(g.out);
        write_json_file(g.out, report.to_json());
      }
      return report.pass() ? kExitOk : kExitVerify;
    }

    if (*rep) {
      const std::filesystem::path root(g.workdir.empty() ? resolve_config(g).workdir : g.workdir);
      const auto j = read_json_file((root / "report.json").string());
      RunReport r;
      r.seed = j.at("seed").get<std::uint64_t>();
      for (const auto& row : j.at("iterations")) r.iterations.push_back(metrics_from_json(row));
      const std::string csv = report_csv(r);
      if (g.out.empty()) {
        out << csv;
      } else {
        ensure_parent(g.out);
        std::ofstream f(g.out);
        if (!f) throw DataError("cannot write " + g.out);
        f << csv;
      }
      return kExitOk;
    }

    const RunConfig config = resolve_config(g);
    const Rng base(config.seed);

    if (*gen) {
      require_out(g, "gen-prefs");
      DatasetConfig dcfg = config.dataset;
      dcfg.jobs = g.jobs;
      auto ds = build_dataset(dcfg, base.child("dataset"));
      ensure_parent(g.out);
      write_prefs_jsonl(g.out, ds);
      const auto stats = stats_to_json(dataset_stats(ds, &dcfg.gallery));
      if (!stats_path.empty()) {
        ensure_parent(stats_path);
        write_json_file(stats_path, stats);
      }
      out << stats.dump(2) << '\n';
      return kExitOk;
    }

    if (*pre) {
      require_out(g, "pretrain");
      const auto ds = read_prefs_jsonl(data_path);
      PretrainHyper hyper = config.diffusion.pretrain;
      if (steps) hyper.steps = *steps;
      Rng init_rng = base.child("pretrain-init");
      Rng train_rng = base.child("pretrain");
      auto [model, report] = pretrain(detail::pretraining_examples(ds), hyper, train_rng,
                                      make_diffusion_model(init_rng, config.diffusion.schedule(),
                                                           config.diffusion.hidden));
      model.iteration = ds.iteration;
      ensure_parent(g.out);
      write_json_file(g.out, diffusion_to_json(model, config_to_json(config)["diffusion"]));
      out << report.to_json().dump(2) << '\n';
      return kExitOk;
    }

    if (*rw) {
      require_out(g, "train-reward");
      Category cat;
      try {
        cat = category_from_string(category_name);
      } catch (const std::exception&) {
        throw ConfigError("--category: unknown category '" + category_name + "'");
      }
      const auto ds = read_prefs_jsonl(data_path);
      RewardHyper hyper = config.reward;
      if (epochs) hyper.epochs = hyper.warm_start_epochs = *epochs;
      std::optional<RewardModel> warm;
      if (!init_path.empty()) {
        warm = reward_from_json(read_json_file(init_path));
      } else {
        Rng irng = base.child("reward-init-" + to_string(cat));
        warm = make_reward_model(cat, irng, hyper.hidden);
      }
      const int next = ds.iteration + 1;
      Rng rrng = base.child("reward-" + std::to_string(next) + "-" + to_string(cat));
      auto [rm, report] = train_reward(ds, cat, hyper, rrng, std::move(warm));
      rm.iteration = next;
      ensure_parent(g.out);
      write_json_file(g.out, reward_to_json(rm, config_to_json(config)["reward"]));
      out << report.to_json().dump(2) << '\n';
      return kExitOk;
    }

    if (*refl) {
      require_out(g, "refl");
      DiffusionModel model = diffusion_from_json(read_json_file(base_path));
      RewardSet rms;
      for (const auto& path : split_commas(rewards_arg)) {
        auto rm = reward_from_json(read_json_file(path));
        if (rms.count(rm.category)) throw ConfigError("--rewards: duplicate category " + to_string(rm.category));
        rms[rm.category] = std::move(rm);
      }
      for (Category c : kCategories)
        if (!rms.count(c)) throw ConfigError("--rewards: missing " + to_string(c) + " reward model");
      std::vector<TrainingExample> anchors;
      if (!data_path.empty()) anchors = detail::pretraining_examples(read_prefs_jsonl(data_path));
      const int next = model.iteration + 1;
      const auto prompts_set = detail::refl_prompt_set(config.refl.prompts, base.child("refl-prompts"));
      Rng frng = base.child("refl-" + std::to_string(next));
      const auto ptrs = reward_pointers(rms);
      auto [tuned, report] = refl_finetune(std::move(model), ptrs, prompts_set, config.refl, frng, &anchors);
      tuned.iteration = next;
      ensure_parent(g.out);
      write_json_file(g.out, diffusion_to_json(tuned, config_to_json(config)["refl"]));
      out << nlohmann::json{{"steps", report.steps},
                            {"first_loss", report.loss_curve.empty() ? 0.0 : report.loss_curve.front()},
                            {"last_loss", report.loss_curve.empty() ? 0.0 : report.loss_curve.back()}}
                 .dump(2)
          << '\n';
      return kExitOk;
    }

    if (*it) {
      RunConfig c = config;
      if (iters) c.iterations = *iters;
      c.validate();
      IterateOptions opts;
      opts.workdir = c.workdir;
      opts.resume = resume;
      opts.jobs = g.jobs;
      const auto report = run_itercomp(c, opts);
      out << report_csv(report);
      return kExitOk;
    }

    if (*ev) {
      const std::size_t n = prompts.value_or(config.eval.prompts_per_category);
      EvalReport report;
      const Rng eval_rng = base.child("eval");
      if (canonical) {
        report = evaluate_model(canonical_source(config.dataset.oracle), n, eval_rng, config.dataset.oracle,
                                config.eval.bootstrap, g.jobs, "canonical");
      } else {
        if (model_path.empty()) throw ConfigError("eval requires --model or --canonical");
        const DiffusionModel model = diffusion_from_json(read_json_file(model_path));
        report = evaluate_model(diffusion_source(model), n, eval_rng, config.dataset.oracle,
                                config.eval.bootstrap, g.jobs, model_path);
      }
      emit_json(g, report.to_json(), out);
      return kExitOk;
    }
  } catch (const ConfigError& e) {
    err << "config error: " << e.what() << '\n';
    return kExitConfig;
  } catch (const DataError& e) {
    err << "data error: " << e.what() << '\n';
    return kExitData;
  } catch (const std::filesystem::filesystem_error& e) {
    err << "data error: " << e.what() << '\n';
    return kExitData;
  } catch (const nlohmann::json::exception& e) {
    err << "data error: " << e.what() << '\n';
    return kExitData;
  }
  err << app.help();
  return kExitConfig;
}

}  // namespace itercomp
