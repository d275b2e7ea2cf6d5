#pragma once

// Oracle evaluation of a scene source over fresh prompts, with percentile
// bootstrap intervals.

#include <algorithm>
#include <functional>
#include <map>
#include <numeric>
#include <string>
#include <vector>

#include <json.hpp>

#include "itercomp/diffusion.hpp"
#include "itercomp/parallel.hpp"
#include "itercomp/rng.hpp"
#include "itercomp/scene.hpp"

namespace itercomp {

/// Produces one raw (possibly undecoded) scene for a prompt.
using SceneSource = std::function<SceneVector(const Prompt&, Rng&)>;

struct AxisScore {
  double mean = 0.0;
  double ci_low = 0.0;
  double ci_high = 0.0;
};

struct EvalReport {
  std::string model_id;
  std::size_t samples_per_category = 0;
  std::map<Category, AxisScore> axes;
  double composite = 0.0;

  nlohmann::json to_json() const {
    nlohmann::json a = nlohmann::json::object();
    for (const auto& [c, s] : axes)
      a[to_string(c)] = {{"mean", s.mean}, {"ci_low", s.ci_low}, {"ci_high", s.ci_high}};
    return {{"model", model_id}, {"samples_per_category", samples_per_category},
            {"axes", a}, {"composite", composite}};
  }
};

inline AxisScore bootstrap_mean(const std::vector<double>& xs, int resamples, Rng& rng) {
  AxisScore s;
  s.mean = std::accumulate(xs.begin(), xs.end(), 0.0) / static_cast<double>(xs.size());
  std::vector<double> means(resamples);
  const int last = static_cast<int>(xs.size()) - 1;
  for (int r = 0; r < resamples; ++r) {
    double acc = 0.0;
    for (std::size_t i = 0; i < xs.size(); ++i) acc += xs[rng.uniform_int(0, last)];
    means[r] = acc / static_cast<double>(xs.size());
  }
  std::sort(means.begin(), means.end());
  auto quantile = [&](double q) {
    const double pos = q * (resamples - 1);
    const auto lo = static_cast<std::size_t>(pos);
    const auto hi = std::min<std::size_t>(lo + 1, means.size() - 1);
    return means[lo] + (pos - lo) * (means[hi] - means[lo]);
  };
  s.ci_low = std::min(quantile(0.025), s.mean);
  s.ci_high = std::max(quantile(0.975), s.mean);
  return s;
}

inline constexpr std::uint64_t kEvalPromptBase = 8000000;

/// Samples prompt_count prompts per category, draws one scene each, decodes
/// it and scores it with the category's oracle. Each prompt gets its own
/// sub-stream so the report does not depend on the worker count.
inline EvalReport evaluate_model(const SceneSource& source, std::size_t prompt_count, const Rng& rng,
                                 const OracleConfig& oracle = {}, int bootstrap = 1000,
                                 unsigned jobs = 1, std::string model_id = "") {
  if (prompt_count == 0) throw ConfigError("evaluation needs prompt_count >= 1");
  EvalReport rep;
  rep.model_id = std::move(model_id);
  rep.samples_per_category = prompt_count;
  double composite = 0.0;
  for (Category c : kCategories) {
    const Rng cat_rng = rng.child("eval-" + to_string(c));
    std::vector<double> scores(prompt_count);
    parallel_for(prompt_count, jobs, [&](std::size_t i) {
      Rng local = cat_rng.child(i);
      const Prompt p = sample_prompt(local, c, kEvalPromptBase + static_cast<int>(c) * 100000 + i);
      const SceneVector raw = source(p, local);
      scores[i] = category_oracle(c, p, decode_scene(raw), oracle);
    });
    Rng boot = cat_rng.child("bootstrap");
    rep.axes[c] = bootstrap_mean(scores, bootstrap, boot);
    composite += rep.axes[c].mean;
  }
  rep.composite = composite / static_cast<double>(kCategories.size());
  return rep;
}

inline SceneSource diffusion_source(const DiffusionModel& model) {
  return [&model](const Prompt& p, Rng& rng) { return sample(model, p, rng); };
}

inline SceneSource canonical_source(const OracleConfig& oracle = {}) {
  return [oracle](const Prompt& p, Rng& rng) { return canonical_scene(p, rng, oracle).to_vector(); };
}

}  // namespace itercomp
