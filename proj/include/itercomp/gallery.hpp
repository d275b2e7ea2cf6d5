#pragma once

// Synthetic generator gallery. Each generator perturbs a canonical scene with
// its own noise profile, so different generators lead on different axes.

#include <set>
#include <string>
#include <utility>
#include <vector>

#include <json.hpp>

#include "itercomp/error.hpp"
#include "itercomp/rng.hpp"
#include "itercomp/scene.hpp"

namespace itercomp {

struct GeneratorProfile {
  std::string name;
  double sigma_attr = 0.0;  // hue and shape
  double sigma_pos = 0.0;   // x and y
  double sigma_act = 0.0;   // activity
  double p_drop = 0.0;      // chance a required object goes missing

  void validate() const {
    if (name.empty()) throw ConfigError("generator profile needs a name");
    if (sigma_attr < 0.0 || sigma_pos < 0.0 || sigma_act < 0.0)
      throw ConfigError("generator '" + name + "': noise levels must be >= 0");
    if (p_drop < 0.0 || p_drop > 1.0)
      throw ConfigError("generator '" + name + "': p_drop must be in [0, 1]");
  }

  friend bool operator==(const GeneratorProfile&, const GeneratorProfile&) = default;
};

struct Gallery {
  std::vector<GeneratorProfile> profiles;

  std::size_t size() const { return profiles.size(); }

  void validate() const {
    if (profiles.size() < 2) throw ConfigError("gallery needs at least two generators");
    std::set<std::string> names;
    for (const auto& p : profiles) {
      p.validate();
      if (!names.insert(p.name).second)
        throw ConfigError("duplicate generator name '" + p.name + "'");
    }
  }

  int index_of(const std::string& name) const {
    for (std::size_t i = 0; i < profiles.size(); ++i)
      if (profiles[i].name == name) return static_cast<int>(i);
    return -1;
  }
};

inline Gallery default_gallery() {
  return Gallery{{
      {"attr-strong", 0.02, 0.25, 0.15, 0.10},
      {"spatial-strong", 0.20, 0.03, 0.15, 0.02},
      {"nonspatial-strong", 0.15, 0.20, 0.02, 0.05},
      {"balanced-good", 0.08, 0.10, 0.08, 0.05},
      {"balanced-weak", 0.18, 0.20, 0.18, 0.15},
      {"legacy-weak", 0.25, 0.30, 0.25, 0.25},
  }};
}

/// Canonical scene plus field-wise Gaussian noise and random object drops,
/// decoded last so the result always satisfies the scene ranges.
inline Scene generate(const GeneratorProfile& profile, const Prompt& prompt, Rng& rng,
                      const OracleConfig& cfg = {}) {
  const Scene canonical = canonical_scene(prompt, rng, cfg);
  SceneVector v = canonical.to_vector();
  for (std::size_t k = 0; k < kSlots; ++k) {
    double* p = v.data() + k * kFieldsPerSlot;
    if (profile.sigma_pos > 0.0) {
      p[1] += rng.normal(0.0, profile.sigma_pos);
      p[2] += rng.normal(0.0, profile.sigma_pos);
    }
    if (profile.sigma_attr > 0.0) {
      p[3] += rng.normal(0.0, profile.sigma_attr);
      p[4] += rng.normal(0.0, profile.sigma_attr);
    }
    if (profile.sigma_act > 0.0) p[5] += rng.normal(0.0, profile.sigma_act);
    if (prompt.slots[k].required && profile.p_drop > 0.0 && rng.bernoulli(profile.p_drop))
      p[0] = 0.0;
  }
  return decode_scene(v);
}

/// One scene per generator, in gallery order.
inline std::vector<std::pair<int, Scene>> gallery_sample(const Gallery& gallery,
                                                         const Prompt& prompt, Rng& rng,
                                                         const OracleConfig& cfg = {}) {
  if (gallery.profiles.empty()) throw ConfigError("gallery is empty");
  std::vector<std::pair<int, Scene>> out;
  out.reserve(gallery.size());
  for (std::size_t g = 0; g < gallery.size(); ++g)
    out.emplace_back(static_cast<int>(g), generate(gallery.profiles[g], prompt, rng, cfg));
  return out;
}

inline nlohmann::json profile_to_json(const GeneratorProfile& p) {
  return {{"name", p.name},
          {"sigma_attr", p.sigma_attr},
          {"sigma_pos", p.sigma_pos},
          {"sigma_act", p.sigma_act},
          {"p_drop", p.p_drop}};
}

inline GeneratorProfile profile_from_json(const nlohmann::json& j) {
  GeneratorProfile p;
  p.name = j.at("name").get<std::string>();
  p.sigma_attr = j.at("sigma_attr").get<double>();
  p.sigma_pos = j.at("sigma_pos").get<double>();
  p.sigma_act = j.at("sigma_act").get<double>();
  p.p_drop = j.at("p_drop").get<double>();
  return p;
}

}  // namespace itercomp
