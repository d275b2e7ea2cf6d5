#pragma once

// Run configuration with strict JSON parsing: unknown keys are rejected and
// every type error names the offending field.

#include <cstdint>
#include <fstream>
#include <set>
#include <string>
#include <vector>

#include <json.hpp>

#include "itercomp/diffusion.hpp"
#include "itercomp/error.hpp"
#include "itercomp/gallery.hpp"
#include "itercomp/prefs.hpp"
#include "itercomp/reward.hpp"

namespace itercomp {

struct GalleryAddition {
  int iteration = 1;  // profiles join when building dataset `iteration`
  std::vector<GeneratorProfile> profiles;
};

struct DiffusionHyper {
  int T = 40;
  double beta_start = 1e-4;
  double beta_end = 0.02;
  std::vector<std::size_t> hidden = {128, 128};
  PretrainHyper pretrain;

  NoiseSchedule schedule() const { return NoiseSchedule(T, beta_start, beta_end); }
};

struct EvalConfig {
  std::size_t prompts_per_category = 200;
  int bootstrap = 1000;
};

struct RunConfig {
  std::uint64_t seed = 1234;
  DatasetConfig dataset;
  std::vector<GalleryAddition> gallery_additions;
  RewardHyper reward;
  DiffusionHyper diffusion;
  ReflConfig refl;
  int iterations = 3;
  EvalConfig eval;
  std::string workdir = "runs/exp1";

  void validate() const {
    dataset.gallery.validate();
    dataset.raters.validate();
    if (!(dataset.oracle.spatial_temperature > 0.0) || !(dataset.oracle.near_bandwidth > 0.0))
      throw ConfigError("oracle temperatures must be positive");
    reward.validate();
    diffusion.pretrain.validate();
    const auto sched = diffusion.schedule();
    refl.validate(sched.steps(), kCategories.size());
    if (iterations < 0) throw ConfigError("iterations must be >= 0");
    if (eval.prompts_per_category == 0) throw ConfigError("eval.prompts_per_category must be >= 1");
    if (eval.bootstrap < 1) throw ConfigError("eval.bootstrap must be >= 1");
    for (const auto& add : gallery_additions) {
      if (add.iteration < 1) throw ConfigError("gallery_additions iteration must be >= 1");
      for (const auto& p : add.profiles) p.validate();
    }
  }
};

/// The paper-scale dataset sizes: 1500 attribute, 1000 spatial, 1000 non-spatial prompts.
inline RunConfig paper_scale_config() {
  RunConfig c;
  c.dataset.prompts = {{Category::attribute, 1500}, {Category::spatial, 1000}, {Category::nonspatial, 1000}};
  return c;
}

// Serialization ----------------------------------------------------------------

inline nlohmann::json config_to_json(const RunConfig& c) {
  nlohmann::json gallery = nlohmann::json::array();
  for (const auto& p : c.dataset.gallery.profiles) gallery.push_back(profile_to_json(p));
  nlohmann::json additions = nlohmann::json::array();
  for (const auto& a : c.gallery_additions) {
    nlohmann::json profiles = nlohmann::json::array();
    for (const auto& p : a.profiles) profiles.push_back(profile_to_json(p));
    additions.push_back({{"iteration", a.iteration}, {"profiles", profiles}});
  }
  nlohmann::json prompts = nlohmann::json::object();
  for (Category cat : kCategories) {
    auto it = c.dataset.prompts.find(cat);
    prompts[to_string(cat)] = it == c.dataset.prompts.end() ? 0 : it->second;
  }
  return {
      {"seed", c.seed},
      {"prompts", prompts},
      {"gallery", gallery},
      {"gallery_additions", additions},
      {"rater",
       {{"count", c.dataset.raters.count},
        {"noise_std", c.dataset.raters.noise_std},
        {"weights", c.dataset.raters.resolved_weights()}}},
      {"oracle",
       {{"spatial_temperature", c.dataset.oracle.spatial_temperature},
        {"near_bandwidth", c.dataset.oracle.near_bandwidth}}},
      {"reward",
       {{"epochs", c.reward.epochs},
        {"warm_start_epochs", c.reward.warm_start_epochs},
        {"lr", c.reward.lr},
        {"lr_schedule", to_string(c.reward.schedule)},
        {"augment", c.reward.augment},
        {"batch", c.reward.batch},
        {"holdout", c.reward.holdout},
        {"hidden", c.reward.hidden}}},
      {"diffusion",
       {{"T", c.diffusion.T},
        {"beta_start", c.diffusion.beta_start},
        {"beta_end", c.diffusion.beta_end},
        {"hidden", c.diffusion.hidden},
        {"pretrain_steps", c.diffusion.pretrain.steps},
        {"lr", c.diffusion.pretrain.lr},
        {"batch", c.diffusion.pretrain.batch}}},
      {"refl",
       {{"lambda", c.refl.lambda},
        {"t_min", c.refl.t_min},
        {"t_max", c.refl.t_max},
        {"phi", to_string(c.refl.phi)},
        {"margin", c.refl.margin},
        {"lr", c.refl.lr},
        {"batch", c.refl.batch},
        {"weights", c.refl.weights.empty() ? std::vector<double>(kCategories.size(), 1.0) : c.refl.weights},
        {"rho", c.refl.rho},
        {"prompts", c.refl.prompts},
        {"epochs", c.refl.epochs},
        {"mask_inapplicable", c.refl.mask_inapplicable}}},
      {"iterations", c.iterations},
      {"eval", {{"prompts_per_category", c.eval.prompts_per_category}, {"bootstrap", c.eval.bootstrap}}},
      {"workdir", c.workdir},
  };
}

namespace detail {

/// Walks one JSON object, tracking consumed keys to reject unknown ones.
class ObjectReader {
 public:
  ObjectReader(const nlohmann::json& j, std::string path) : j_(j), path_(std::move(path)) {
    if (!j.is_object()) throw ConfigError(path_ + ": expected an object");
  }

  template <typename T>
  void get(const std::string& key, T& out) {
    seen_.insert(key);
    if (!j_.contains(key)) return;
    try {
      out = j_.at(key).get<T>();
    } catch (const nlohmann::json::exception&) {
      throw ConfigError(path_ + "." + key + ": wrong type (got " + j_.at(key).type_name() + ")");
    }
  }

  const nlohmann::json* child(const std::string& key) {
    seen_.insert(key);
    return j_.contains(key) ? &j_.at(key) : nullptr;
  }

  void finish() const {
    for (const auto& [k, v] : j_.items())
      if (!seen_.count(k)) throw ConfigError(path_ + "." + k + ": unknown key");
  }

  const std::string& path() const { return path_; }

 private:
  const nlohmann::json& j_;
  std::string path_;
  std::set<std::string> seen_;
};

inline GeneratorProfile read_profile(const nlohmann::json& j, const std::string& path) {
  ObjectReader r(j, path);
  GeneratorProfile p;
  r.get("name", p.name);
  r.get("sigma_attr", p.sigma_attr);
  r.get("sigma_pos", p.sigma_pos);
  r.get("sigma_act", p.sigma_act);
  r.get("p_drop", p.p_drop);
  r.finish();
  if (p.name.empty()) throw ConfigError(path + ".name: required");
  return p;
}

inline std::vector<GeneratorProfile> read_profiles(const nlohmann::json& j, const std::string& path) {
  if (!j.is_array()) throw ConfigError(path + ": expected an array");
  std::vector<GeneratorProfile> out;
  for (std::size_t i = 0; i < j.size(); ++i)
    out.push_back(read_profile(j[i], path + "[" + std::to_string(i) + "]"));
  return out;
}

}  // namespace detail

inline RunConfig config_from_json(const nlohmann::json& j) {
  using detail::ObjectReader;
  RunConfig c;
  ObjectReader root(j, "config");
  root.get("seed", c.seed);
  if (const auto* p = root.child("prompts")) {
    ObjectReader r(*p, "config.prompts");
    for (Category cat : kCategories) {
      std::size_t n = c.dataset.prompts[cat];
      r.get(to_string(cat), n);
      c.dataset.prompts[cat] = n;
    }
    r.finish();
  }
  if (const auto* g = root.child("gallery")) c.dataset.gallery.profiles = detail::read_profiles(*g, "config.gallery");
  if (const auto* a = root.child("gallery_additions")) {
    if (!a->is_array()) throw ConfigError("config.gallery_additions: expected an array");
    for (std::size_t i = 0; i < a->size(); ++i) {
      const std::string path = "config.gallery_additions[" + std::to_string(i) + "]";
      ObjectReader r((*a)[i], path);
      GalleryAddition add;
      r.get("iteration", add.iteration);
      if (const auto* ps = r.child("profiles")) add.profiles = detail::read_profiles(*ps, path + ".profiles");
      r.finish();
      c.gallery_additions.push_back(std::move(add));
    }
  }
  if (const auto* p = root.child("rater")) {
    ObjectReader r(*p, "config.rater");
    r.get("count", c.dataset.raters.count);
    r.get("noise_std", c.dataset.raters.noise_std);
    r.get("weights", c.dataset.raters.weights);
    r.finish();
  }
  if (const auto* p = root.child("oracle")) {
    ObjectReader r(*p, "config.oracle");
    r.get("spatial_temperature", c.dataset.oracle.spatial_temperature);
    r.get("near_bandwidth", c.dataset.oracle.near_bandwidth);
    r.finish();
  }
  if (const auto* p = root.child("reward")) {
    ObjectReader r(*p, "config.reward");
    std::string schedule = to_string(c.reward.schedule);
    r.get("epochs", c.reward.epochs);
    r.get("warm_start_epochs", c.reward.warm_start_epochs);
    r.get("lr", c.reward.lr);
    r.get("lr_schedule", schedule);
    r.get("augment", c.reward.augment);
    r.get("batch", c.reward.batch);
    r.get("holdout", c.reward.holdout);
    r.get("hidden", c.reward.hidden);
    r.finish();
    try {
      c.reward.schedule = lr_schedule_from_string(schedule);
    } catch (const ConfigError& e) {
      throw ConfigError(std::string("config.reward.lr_schedule: ") + e.what());
    }
  }
  if (const auto* p = root.child("diffusion")) {
    ObjectReader r(*p, "config.diffusion");
    r.get("T", c.diffusion.T);
    r.get("beta_start", c.diffusion.beta_start);
    r.get("beta_end", c.diffusion.beta_end);
    r.get("hidden", c.diffusion.hidden);
    r.get("pretrain_steps", c.diffusion.pretrain.steps);
    r.get("lr", c.diffusion.pretrain.lr);
    r.get("batch", c.diffusion.pretrain.batch);
    r.finish();
  }
  if (const auto* p = root.child("refl")) {
    ObjectReader r(*p, "config.refl");
    std::string phi = to_string(c.refl.phi);
    r.get("lambda", c.refl.lambda);
    r.get("t_min", c.refl.t_min);
    r.get("t_max", c.refl.t_max);
    r.get("phi", phi);
    r.get("margin", c.refl.margin);
    r.get("lr", c.refl.lr);
    r.get("batch", c.refl.batch);
    r.get("weights", c.refl.weights);
    r.get("rho", c.refl.rho);
    r.get("prompts", c.refl.prompts);
    r.get("epochs", c.refl.epochs);
    r.get("mask_inapplicable", c.refl.mask_inapplicable);
    r.finish();
    try {
      c.refl.phi = reward_to_loss_from_string(phi);
    } catch (const ConfigError& e) {
      throw ConfigError(std::string("config.refl.phi: ") + e.what());
    }
  }
  root.get("iterations", c.iterations);
  if (const auto* p = root.child("eval")) {
    ObjectReader r(*p, "config.eval");
    r.get("prompts_per_category", c.eval.prompts_per_category);
    r.get("bootstrap", c.eval.bootstrap);
    r.finish();
  }
  root.get("workdir", c.workdir);
  root.finish();
  c.validate();
  return c;
}

inline RunConfig load_config(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open config file " + path);
  nlohmann::json j;
  try {
    in >> j;
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(path + ": not valid JSON: " + e.what());
  }
  return config_from_json(j);
}

inline void write_json_file(const std::string& path, const nlohmann::json& j) {
  std::ofstream out(path);
  if (!out) throw DataError("cannot write " + path);
  out << j.dump(2) << '\n';
  if (!out) throw DataError("failed writing " + path);
}

inline nlohmann::json read_json_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot read " + path);
  try {
    nlohmann::json j;
    in >> j;
    return j;
  } catch (const nlohmann::json::exception& e) {
    throw DataError(path + ": not valid JSON: " + e.what());
  }
}

}  // namespace itercomp
