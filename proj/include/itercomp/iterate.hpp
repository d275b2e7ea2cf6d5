#pragma once

// Closed-loop training: retrain reward models on the current preference
// dataset, finetune the diffusion model against them, then grow every ranking
// with one policy sample placed by the fresh reward model.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <limits>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "itercomp/config.hpp"
#include "itercomp/diffusion.hpp"
#include "itercomp/eval.hpp"
#include "itercomp/log.hpp"
#include "itercomp/parallel.hpp"
#include "itercomp/prefs.hpp"
#include "itercomp/reward.hpp"

namespace itercomp {

/// Inserts new_image into the ranking at 1 + (number of existing images the
/// reward model scores at least as high). Existing images keep their
/// relative order; ties go to the existing image.
inline PreferenceRanking rank_insert(const PreferenceRanking& ranking, RankedImage new_image,
                                     const RewardModel& rm) {
  if (rm.category != ranking.category)
    throw DataError("rank_insert: reward model category " + to_string(rm.category) +
                    " does not match ranking category " + to_string(ranking.category));
  const auto emb = embed_prompt(ranking.prompt);
  const double s_new = rm.score(emb, new_image.scene);
  std::size_t ahead = 0;
  for (const auto& img : ranking.images)
    if (rm.score(emb, img.scene) >= s_new) ++ahead;

  PreferenceRanking out = ranking;
  new_image.aggregate = s_new;
  out.images.insert(out.images.begin() + static_cast<std::ptrdiff_t>(ahead), std::move(new_image));
  for (std::size_t r = 0; r < out.images.size(); ++r) out.images[r].rank = static_cast<int>(r + 1);
  return out;
}

using RewardSet = std::map<Category, RewardModel>;

inline std::vector<const RewardModel*> reward_pointers(const RewardSet& rms) {
  std::vector<const RewardModel*> out;
  for (Category c : kCategories) out.push_back(&rms.at(c));
  return out;
}

struct ExpansionResult {
  PreferenceDataset dataset;
  std::vector<int> policy_insert_ranks;  // one per ranking
};

/// One policy sample per ranking, decoded and rank-inserted with the
/// ranking's category reward model. The new dataset carries tag `iteration`.
inline ExpansionResult expand_dataset(const PreferenceDataset& ds, const DiffusionModel& model,
                                      const RewardSet& rms, const Rng& rng, int iteration,
                                      unsigned jobs = 1) {
  ExpansionResult res;
  res.dataset.iteration = iteration;
  res.dataset.rankings.resize(ds.rankings.size());
  res.policy_insert_ranks.resize(ds.rankings.size());
  parallel_for(ds.rankings.size(), jobs, [&](std::size_t i) {
    const auto& r = ds.rankings[i];
    Rng local = rng.child(i);
    RankedImage img;
    try {
      img.scene = decode_scene(sample(model, r.prompt, local)).to_vector();
    } catch (const std::exception& e) {
      throw DataError("sampling failed for prompt " + std::to_string(r.prompt.id) + ": " + e.what());
    }
    img.provenance = Provenance::policy(iteration);
    auto expanded = rank_insert(r, std::move(img), rms.at(r.category));
    for (std::size_t k = 0; k < expanded.images.size(); ++k)
      if (expanded.images[k].provenance == Provenance::policy(iteration))
        res.policy_insert_ranks[i] = expanded.images[k].rank;
    expanded.iteration = iteration;
    res.dataset.rankings[i] = std::move(expanded);
  });
  return res;
}

/// Adds one sample from each new gallery member to every ranking.
inline void insert_gallery_additions(PreferenceDataset& ds, const Gallery& gallery,
                                     std::size_t first_new, const RewardSet& rms, const Rng& rng,
                                     const OracleConfig& oracle, unsigned jobs = 1) {
  parallel_for(ds.rankings.size(), jobs, [&](std::size_t i) {
    auto& r = ds.rankings[i];
    Rng local = rng.child(i);
    for (std::size_t g = first_new; g < gallery.size(); ++g) {
      RankedImage img;
      img.scene = generate(gallery.profiles[g], r.prompt, local, oracle).to_vector();
      img.provenance = Provenance::generator(static_cast<int>(g));
      r = rank_insert(r, std::move(img), rms.at(r.category));
    }
  });
}

inline double median(std::vector<double> xs) {
  if (xs.empty()) return std::numeric_limits<double>::quiet_NaN();
  std::sort(xs.begin(), xs.end());
  const std::size_t n = xs.size();
  return n % 2 == 1 ? xs[n / 2] : 0.5 * (xs[n / 2 - 1] + xs[n / 2]);
}

/// True when `before` appears in `after` as an order-preserving subsequence,
/// matching images by scene and provenance.
inline bool preserves_order(const PreferenceRanking& before, const PreferenceRanking& after) {
  std::size_t j = 0;
  for (const auto& img : after.images) {
    if (j == before.images.size()) break;
    const auto& want = before.images[j];
    if (img.scene == want.scene && img.provenance == want.provenance) ++j;
  }
  return j == before.images.size() && after.images.size() >= before.images.size();
}

struct IterationMetrics {
  int iteration = 0;
  EvalReport eval;
  std::map<Category, double> rm_accuracy;  // empty at iteration 0
  double median_policy_insert_rank = std::numeric_limits<double>::quiet_NaN();
  std::map<Category, ProvenanceFractions> ranked_first;
  std::size_t rank_violations = 0;
  nlohmann::json details;

  nlohmann::json to_json() const {
    nlohmann::json acc = nlohmann::json::object();
    for (const auto& [c, a] : rm_accuracy) acc[to_string(c)] = a;
    nlohmann::json rf = nlohmann::json::object();
    for (const auto& [c, f] : ranked_first) rf[to_string(c)] = f;
    nlohmann::json j{{"iteration", iteration},
                     {"eval", eval.to_json()},
                     {"rm_accuracy", acc},
                     {"ranked_first", rf},
                     {"rank_violations", rank_violations},
                     {"details", details}};
    j["median_policy_insert_rank"] =
        std::isnan(median_policy_insert_rank) ? nlohmann::json(nullptr) : nlohmann::json(median_policy_insert_rank);
    return j;
  }
};

inline IterationMetrics metrics_from_json(const nlohmann::json& j) {
  IterationMetrics m;
  m.iteration = j.at("iteration").get<int>();
  const auto& e = j.at("eval");
  m.eval.model_id = e.at("model").get<std::string>();
  m.eval.samples_per_category = e.at("samples_per_category").get<std::size_t>();
  m.eval.composite = e.at("composite").get<double>();
  for (const auto& [k, v] : e.at("axes").items())
    m.eval.axes[category_from_string(k)] = {v.at("mean").get<double>(), v.at("ci_low").get<double>(),
                                            v.at("ci_high").get<double>()};
  for (const auto& [k, v] : j.at("rm_accuracy").items()) m.rm_accuracy[category_from_string(k)] = v.get<double>();
  for (const auto& [k, v] : j.at("ranked_first").items())
    m.ranked_first[category_from_string(k)] = v.get<ProvenanceFractions>();
  const auto& med = j.at("median_policy_insert_rank");
  if (!med.is_null()) m.median_policy_insert_rank = med.get<double>();
  m.rank_violations = j.at("rank_violations").get<std::size_t>();
  m.details = j.at("details");
  return m;
}

struct RunReport {
  std::uint64_t seed = 0;
  nlohmann::json config;
  std::vector<IterationMetrics> iterations;
  std::vector<double> wall_clock_seconds;  // per iteration; not part of the deterministic outputs

  std::size_t total_rank_violations() const {
    std::size_t n = 0;
    for (const auto& m : iterations) n += m.rank_violations;
    return n;
  }

  nlohmann::json to_json() const {
    nlohmann::json rows = nlohmann::json::array();
    for (const auto& m : iterations) rows.push_back(m.to_json());
    return {{"seed", seed}, {"config", config}, {"iterations", rows}};
  }
};

inline std::string format_number(double v) {
  if (std::isnan(v)) return "";
  std::ostringstream os;
  os << std::fixed << std::setprecision(6) << v;
  return os.str();
}

inline std::string report_csv(const RunReport& rep) {
  std::ostringstream os;
  os << "iteration,oracle_attr,oracle_spatial,oracle_nonspatial,composite,rm_acc_attr,rm_acc_spatial,"
        "rm_acc_nonspatial,median_policy_insert_rank\n";
  auto acc = [](const IterationMetrics& m, Category c) {
    auto it = m.rm_accuracy.find(c);
    return it == m.rm_accuracy.end() ? std::numeric_limits<double>::quiet_NaN() : it->second;
  };
  for (const auto& m : rep.iterations) {
    os << m.iteration << ',' << format_number(m.eval.axes.at(Category::attribute).mean) << ','
       << format_number(m.eval.axes.at(Category::spatial).mean) << ','
       << format_number(m.eval.axes.at(Category::nonspatial).mean) << ','
       << format_number(m.eval.composite) << ',' << format_number(acc(m, Category::attribute)) << ','
       << format_number(acc(m, Category::spatial)) << ',' << format_number(acc(m, Category::nonspatial))
       << ',' << format_number(m.median_policy_insert_rank) << '\n';
  }
  return os.str();
}

struct IterateOptions {
  std::string workdir;
  bool resume = false;
  unsigned jobs = 1;
};

namespace detail {

inline std::vector<TrainingExample> pretraining_examples(const PreferenceDataset& ds) {
  std::vector<TrainingExample> out;
  for (const auto& r : ds.rankings)
    for (const auto& img : r.images)
      if (img.provenance.kind == Provenance::Kind::generator) out.push_back({r.prompt, img.scene});
  return out;
}

inline constexpr std::uint64_t kReflPromptBase = 9000000;

inline std::vector<Prompt> refl_prompt_set(std::size_t n, const Rng& rng) {
  std::vector<Prompt> out;
  out.reserve(n);
  for (std::size_t i = 0; i < n; ++i) {
    Rng local = rng.child(i);
    out.push_back(sample_prompt(local, kCategories[i % kCategories.size()], kReflPromptBase + i));
  }
  return out;
}

inline std::string rm_file(Category c) { return "rm_" + to_string(c) + ".json"; }

inline void write_text(const std::filesystem::path& p, const std::string& s) {
  std::ofstream out(p);
  if (!out) throw DataError("cannot write " + p.string());
  out << s;
}

}  // namespace detail

/// The full closed loop. Checkpoints, datasets and per-iteration metrics are
/// written under opts.workdir; with opts.resume, completed iterations found on
/// disk are loaded instead of recomputed. All randomness derives from
/// config.seed through named sub-streams.
inline RunReport run_itercomp(const RunConfig& config, const IterateOptions& opts) {
  namespace fs = std::filesystem;
  config.validate();
  const fs::path root(opts.workdir.empty() ? config.workdir : opts.workdir);
  fs::create_directories(root);
  const Rng base(config.seed);
  const auto cfg_json = config_to_json(config);
  write_json_file((root / "config.json").string(), cfg_json);

  RunReport report;
  report.seed = config.seed;
  report.config = cfg_json;

  DatasetConfig dcfg = config.dataset;
  dcfg.jobs = opts.jobs;
  Gallery gallery = dcfg.gallery;
  const RewardHyper& rh = config.reward;
  const std::vector<Prompt> refl_prompts = detail::refl_prompt_set(config.refl.prompts, base.child("refl-prompts"));
  const Rng eval_rng = base.child("eval");

  auto stage = [&](const char* name, int k, auto&& fn) {
    try {
      return fn();
    } catch (const ConfigError&) {
      throw;
    } catch (const std::exception& e) {
      throw DataError(std::string("stage ") + name + " (iteration " + std::to_string(k) + "): " + e.what());
    }
  };
  auto evaluate = [&](const DiffusionModel& m, const std::string& id) {
    return evaluate_model(diffusion_source(m), config.eval.prompts_per_category, eval_rng,
                          dcfg.oracle, config.eval.bootstrap, opts.jobs, id);
  };

  // Iteration 0: dataset and pretrained base model.
  PreferenceDataset dataset;
  DiffusionModel model;
  RewardSet rms;
  const fs::path dir0 = root / "iter_0";
  bool loaded = opts.resume && fs::exists(dir0 / "metrics.json");
  auto t_start = std::chrono::steady_clock::now();
  if (loaded) {
    dataset = read_prefs_jsonl((dir0 / "prefs.jsonl").string());
    model = diffusion_from_json(read_json_file((dir0 / "base.json").string()));
    report.iterations.push_back(metrics_from_json(read_json_file((dir0 / "metrics.json").string())));
    log::info("resumed iteration 0 from ", dir0.string());
  } else {
    fs::create_directories(dir0);
    dataset = stage("gen-prefs", 0, [&] { return build_dataset(dcfg, base.child("dataset")); });
    dataset.iteration = 0;
    write_prefs_jsonl((dir0 / "prefs.jsonl").string(), dataset);
    log::info("built dataset: ", dataset.rankings.size(), " rankings");

    auto [pre, pre_report] = stage("pretrain", 0, [&] {
      Rng init = base.child("pretrain-init");
      Rng train = base.child("pretrain");
      return pretrain(detail::pretraining_examples(dataset), config.diffusion.pretrain, train,
                      make_diffusion_model(init, config.diffusion.schedule(), config.diffusion.hidden));
    });
    model = std::move(pre);
    model.iteration = 0;
    write_json_file((dir0 / "base.json").string(), diffusion_to_json(model, cfg_json["diffusion"]));
    log::info("pretrained base model, loss ", pre_report.initial_loss, " -> ", pre_report.final_loss);

    IterationMetrics m;
    m.iteration = 0;
    m.eval = evaluate(model, "base-iter-0");
    m.ranked_first = ranked_first_proportions(dataset, &gallery);
    m.details = {{"dataset", stats_to_json(dataset_stats(dataset, &gallery))}, {"pretrain", pre_report.to_json()}};
    write_json_file((dir0 / "metrics.json").string(), m.to_json());
    report.iterations.push_back(std::move(m));
  }
  report.wall_clock_seconds.push_back(
      std::chrono::duration<double>(std::chrono::steady_clock::now() - t_start).count());
  log::info("iteration 0 composite ", report.iterations.back().eval.composite);

  for (int k = 0; k < config.iterations; ++k) {
    const int next = k + 1;
    const fs::path dir = root / ("iter_" + std::to_string(next));
    t_start = std::chrono::steady_clock::now();
    for (const auto& add : config.gallery_additions)
      if (add.iteration == next)
        for (const auto& p : add.profiles) gallery.profiles.push_back(p);

    if (opts.resume && fs::exists(dir / "metrics.json")) {
      dataset = read_prefs_jsonl((dir / "prefs.jsonl").string());
      model = diffusion_from_json(read_json_file((dir / "base.json").string()));
      for (Category c : kCategories)
        rms[c] = reward_from_json(read_json_file((dir / detail::rm_file(c)).string()));
      report.iterations.push_back(metrics_from_json(read_json_file((dir / "metrics.json").string())));
      report.wall_clock_seconds.push_back(0.0);
      log::info("resumed iteration ", next, " from ", dir.string());
      continue;
    }
    fs::create_directories(dir);
    IterationMetrics m;
    m.iteration = next;
    nlohmann::json reward_reports = nlohmann::json::object();

    // Reward models R^{k+1}, warm-started from R^k and trained on D_k only.
    for (Category c : kCategories) {
      auto [rm, rep] = stage("train-reward", next, [&] {
        Rng rrng = base.child("reward-" + std::to_string(next) + "-" + to_string(c));
        std::optional<RewardModel> init;
        if (rms.count(c)) {
          init = rms.at(c);
        } else {
          Rng irng = base.child("reward-init-" + to_string(c));
          init = make_reward_model(c, irng, rh.hidden);
        }
        return train_reward(dataset, c, rh, rrng, std::move(init));
      });
      if (rm.iteration != k) throw DataError("reward model trained on a dataset not tagged " + std::to_string(k));
      rm.iteration = next;
      m.rm_accuracy[c] = rep.holdout_accuracy;
      reward_reports[to_string(c)] = rep.to_json();
      write_json_file((dir / detail::rm_file(c)).string(), reward_to_json(rm, cfg_json["reward"]));
      rms[c] = std::move(rm);
    }

    // Base model p^{k+1}.
    const auto anchors = detail::pretraining_examples(dataset);
    auto [tuned, refl_report] = stage("refl", next, [&] {
      Rng frng = base.child("refl-" + std::to_string(next));
      const auto ptrs = reward_pointers(rms);
      return refl_finetune(model, ptrs, refl_prompts, config.refl, frng, &anchors);
    });
    model = std::move(tuned);
    model.iteration = next;
    write_json_file((dir / "base.json").string(), diffusion_to_json(model, cfg_json["refl"]));

    // D_{k+1}.
    auto expansion = stage("expand", next, [&] {
      return expand_dataset(dataset, model, rms, base.child("expand-" + std::to_string(next)), next, opts.jobs);
    });
    const std::size_t first_new = dcfg.gallery.size() + [&] {
      std::size_t n = 0;
      for (const auto& add : config.gallery_additions)
        if (add.iteration < next) n += add.profiles.size();
      return n;
    }();
    if (gallery.size() > first_new)
      insert_gallery_additions(expansion.dataset, gallery, first_new, rms,
                               base.child("gallery-add-" + std::to_string(next)), dcfg.oracle, opts.jobs);
    for (std::size_t i = 0; i < dataset.rankings.size(); ++i)
      if (!preserves_order(dataset.rankings[i], expansion.dataset.rankings[i])) ++m.rank_violations;

    std::vector<double> ranks(expansion.policy_insert_ranks.begin(), expansion.policy_insert_ranks.end());
    m.median_policy_insert_rank = median(ranks);
    dataset = std::move(expansion.dataset);
    write_prefs_jsonl((dir / "prefs.jsonl").string(), dataset);

    m.eval = evaluate(model, "base-iter-" + std::to_string(next));
    m.ranked_first = ranked_first_proportions(dataset, &gallery);
    const std::size_t steps = refl_report.loss_curve.size();
    m.details = {{"reward", reward_reports},
                 {"refl", {{"steps", steps},
                           {"first_loss", steps ? refl_report.loss_curve.front() : 0.0},
                           {"last_loss", steps ? refl_report.loss_curve.back() : 0.0}}},
                 {"dataset", stats_to_json(dataset_stats(dataset, &gallery))}};
    write_json_file((dir / "metrics.json").string(), m.to_json());
    log::info("iteration ", next, " composite ", m.eval.composite, " median insert rank ",
              m.median_policy_insert_rank);
    report.iterations.push_back(std::move(m));
    report.wall_clock_seconds.push_back(
        std::chrono::duration<double>(std::chrono::steady_clock::now() - t_start).count());
  }

  detail::write_text(root / "report.csv", report_csv(report));
  write_json_file((root / "report.json").string(), report.to_json());
  write_json_file((root / "timing.json").string(), {{"wall_clock_seconds", report.wall_clock_seconds}});
  return report;
}

}  // namespace itercomp
