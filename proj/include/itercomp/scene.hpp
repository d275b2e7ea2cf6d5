#pragma once

// Scenes, structured prompts, the prompt featurizer and the three oracle
// scorers (attribute binding, spatial relations, non-spatial relations).

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <numbers>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "itercomp/error.hpp"
#include "itercomp/rng.hpp"

namespace itercomp {

inline constexpr std::size_t kSlots = 3;
inline constexpr std::size_t kFieldsPerSlot = 6;
inline constexpr std::size_t kSceneDim = kSlots * kFieldsPerSlot;
inline constexpr std::size_t kEmbedDim = 42;
inline constexpr std::size_t kMaxSpatial = 2;
inline constexpr std::size_t kMaxNonspatial = 1;

using SceneVector = std::array<double, kSceneDim>;
using PromptEmbedding = std::array<double, kEmbedDim>;

enum class Category { attribute = 0, spatial = 1, nonspatial = 2 };
inline constexpr std::array<Category, 3> kCategories = {Category::attribute, Category::spatial,
                                                        Category::nonspatial};

inline std::string to_string(Category c) {
  switch (c) {
    case Category::attribute: return "attribute";
    case Category::spatial: return "spatial";
    case Category::nonspatial: return "nonspatial";
  }
  return "?";
}

inline Category category_from_string(const std::string& s) {
  if (s == "attribute") return Category::attribute;
  if (s == "spatial") return Category::spatial;
  if (s == "nonspatial") return Category::nonspatial;
  throw ConfigError("unknown category '" + s + "' (expected attribute|spatial|nonspatial)");
}

enum class Relation { left_of = 0, right_of = 1, above = 2, below = 3, near = 4 };
enum class Interaction { interacting = 0, independent = 1 };

inline std::string to_string(Relation r) {
  static const char* names[] = {"left_of", "right_of", "above", "below", "near"};
  return names[static_cast<int>(r)];
}
inline std::string to_string(Interaction k) {
  return k == Interaction::interacting ? "interacting" : "independent";
}
inline Relation relation_from_string(const std::string& s) {
  for (int r = 0; r < 5; ++r)
    if (to_string(static_cast<Relation>(r)) == s) return static_cast<Relation>(r);
  throw DataError("unknown spatial relation '" + s + "'");
}
inline Interaction interaction_from_string(const std::string& s) {
  if (s == "interacting") return Interaction::interacting;
  if (s == "independent") return Interaction::independent;
  throw DataError("unknown non-spatial relation '" + s + "'");
}

struct SlotTarget {
  bool required = false;
  double hue = 0.0;
  double shape = 0.0;

  friend bool operator==(const SlotTarget&, const SlotTarget&) = default;
};

struct SpatialConstraint {
  Relation relation = Relation::left_of;
  int subject = 0;
  int object = 1;

  friend bool operator==(const SpatialConstraint&, const SpatialConstraint&) = default;
};

struct NonspatialConstraint {
  Interaction kind = Interaction::interacting;
  int subject = 0;
  int object = 1;

  friend bool operator==(const NonspatialConstraint&, const NonspatialConstraint&) = default;
};

struct Prompt {
  std::uint64_t id = 0;
  Category category = Category::attribute;
  std::array<SlotTarget, kSlots> slots{};
  std::vector<SpatialConstraint> spatial;
  std::vector<NonspatialConstraint> nonspatial;

  std::size_t required_count() const {
    return static_cast<std::size_t>(
        std::count_if(slots.begin(), slots.end(), [](const SlotTarget& s) { return s.required; }));
  }

  void validate() const {
    if (required_count() == 0)
      throw DataError("prompt " + std::to_string(id) + " has no required slot");
    if (spatial.size() > kMaxSpatial || nonspatial.size() > kMaxNonspatial)
      throw DataError("prompt " + std::to_string(id) + " has too many constraints");
    auto check_pair = [&](int i, int j) {
      if (i < 0 || j < 0 || i >= static_cast<int>(kSlots) || j >= static_cast<int>(kSlots) ||
          i == j || !slots[i].required || !slots[j].required)
        throw DataError("prompt " + std::to_string(id) +
                        " has a constraint on an invalid or unrequired slot");
    };
    for (const auto& c : spatial) check_pair(c.subject, c.object);
    for (const auto& c : nonspatial) check_pair(c.subject, c.object);
    for (const auto& s : slots)
      if (s.hue < 0.0 || s.hue >= 1.0 || s.shape < 0.0 || s.shape > 1.0)
        throw DataError("prompt " + std::to_string(id) + " has an out-of-range target");
  }

  friend bool operator==(const Prompt&, const Prompt&) = default;
};

struct ObjectSlot {
  double present = 0.0;
  double x = 0.0;
  double y = 0.0;
  double hue = 0.0;
  double shape = 0.0;
  double activity = 0.0;

  friend bool operator==(const ObjectSlot&, const ObjectSlot&) = default;
};

/// A decoded scene. Fields are within their ranges once built by decode_scene.
struct Scene {
  std::array<ObjectSlot, kSlots> slots{};

  SceneVector to_vector() const {
    SceneVector v{};
    for (std::size_t s = 0; s < kSlots; ++s) {
      const auto& o = slots[s];
      double* p = v.data() + s * kFieldsPerSlot;
      p[0] = o.present;
      p[1] = o.x;
      p[2] = o.y;
      p[3] = o.hue;
      p[4] = o.shape;
      p[5] = o.activity;
    }
    return v;
  }

  friend bool operator==(const Scene&, const Scene&) = default;
};

inline double clamp01(double v) { return std::clamp(v, 0.0, 1.0); }

inline double wrap_hue(double h) {
  double f = h - std::floor(h);
  return f >= 1.0 ? 0.0 : f;
}

inline double hue_distance(double a, double b) {
  const double d = std::fabs(wrap_hue(a) - wrap_hue(b));
  return std::min(d, 1.0 - d);
}

inline double sigmoid(double x) {
  if (x >= 0.0) return 1.0 / (1.0 + std::exp(-x));
  const double e = std::exp(x);
  return e / (1.0 + e);
}

/// Clamp-and-wrap decoder from a raw 18-vector into a valid scene.
inline Scene decode_scene(std::span<const double> raw) {
  if (raw.size() != kSceneDim)
    throw ShapeError("shape mismatch: scene vector has length " + std::to_string(raw.size()) + ", expected 18");
  Scene s;
  for (std::size_t k = 0; k < kSlots; ++k) {
    const double* p = raw.data() + k * kFieldsPerSlot;
    s.slots[k] = ObjectSlot{clamp01(p[0]), clamp01(p[1]), clamp01(p[2]),
                            wrap_hue(p[3]), clamp01(p[4]), clamp01(p[5])};
  }
  return s;
}

inline PromptEmbedding embed_prompt(const Prompt& prompt) {
  PromptEmbedding e{};
  for (std::size_t k = 0; k < kSlots; ++k) {
    const auto& slot = prompt.slots[k];
    if (!slot.required) continue;
    double* p = e.data() + 4 * k;
    const double angle = 2.0 * std::numbers::pi * slot.hue;
    p[0] = 1.0;
    p[1] = std::cos(angle);
    p[2] = std::sin(angle);
    p[3] = slot.shape;
  }
  for (std::size_t c = 0; c < prompt.spatial.size() && c < kMaxSpatial; ++c) {
    const auto& sc = prompt.spatial[c];
    double* p = e.data() + 12 + 11 * c;
    p[static_cast<int>(sc.relation)] = 1.0;
    p[5 + sc.subject] = 1.0;
    p[8 + sc.object] = 1.0;
  }
  if (!prompt.nonspatial.empty()) {
    const auto& nc = prompt.nonspatial.front();
    double* p = e.data() + 34;
    p[static_cast<int>(nc.kind)] = 1.0;
    p[2 + nc.subject] = 1.0;
    p[5 + nc.object] = 1.0;
  }
  return e;
}

/// Temperatures of the soft constraint scores.
struct OracleConfig {
  double spatial_temperature = 0.05;
  double near_bandwidth = 0.04;
};

inline double oracle_attribute(const Prompt& prompt, const Scene& scene) {
  double total = 0.0;
  int n = 0;
  for (std::size_t k = 0; k < kSlots; ++k) {
    const auto& target = prompt.slots[k];
    if (!target.required) continue;
    const auto& o = scene.slots[k];
    const double hue_term = std::max(0.0, 1.0 - 2.0 * hue_distance(o.hue, target.hue));
    const double shape_term = std::max(0.0, 1.0 - std::fabs(o.shape - target.shape));
    total += o.present * hue_term * shape_term;
    ++n;
  }
  return n == 0 ? 1.0 : total / n;
}

inline double spatial_constraint_score(const SpatialConstraint& c, const Scene& scene,
                                       const OracleConfig& cfg = {}) {
  const auto& a = scene.slots[c.subject];
  const auto& b = scene.slots[c.object];
  const double temp = cfg.spatial_temperature;
  double s = 0.0;
  switch (c.relation) {
    case Relation::left_of: s = sigmoid((b.x - a.x) / temp); break;
    case Relation::right_of: s = sigmoid((a.x - b.x) / temp); break;
    case Relation::above: s = sigmoid((a.y - b.y) / temp); break;
    case Relation::below: s = sigmoid((b.y - a.y) / temp); break;
    case Relation::near: {
      const double dx = a.x - b.x;
      const double dy = a.y - b.y;
      s = std::exp(-(dx * dx + dy * dy) / cfg.near_bandwidth);
      break;
    }
  }
  return s * a.present * b.present;
}

inline double oracle_spatial(const Prompt& prompt, const Scene& scene, const OracleConfig& cfg = {}) {
  if (prompt.spatial.empty()) return 1.0;
  double total = 0.0;
  for (const auto& c : prompt.spatial) total += spatial_constraint_score(c, scene, cfg);
  return total / static_cast<double>(prompt.spatial.size());
}

inline double oracle_nonspatial(const Prompt& prompt, const Scene& scene) {
  if (prompt.nonspatial.empty()) return 1.0;
  double total = 0.0;
  for (const auto& c : prompt.nonspatial) {
    const auto& a = scene.slots[c.subject];
    const auto& b = scene.slots[c.object];
    if (c.kind == Interaction::interacting) {
      total += a.present * b.present * a.activity * b.activity *
               (1.0 - std::fabs(a.activity - b.activity));
    } else {
      total += 1.0 - a.activity * b.activity;
    }
  }
  return total / static_cast<double>(prompt.nonspatial.size());
}

inline double category_oracle(Category category, const Prompt& prompt, const Scene& scene,
                              const OracleConfig& cfg = {}) {
  switch (category) {
    case Category::attribute: return oracle_attribute(prompt, scene);
    case Category::spatial: return oracle_spatial(prompt, scene, cfg);
    case Category::nonspatial: return oracle_nonspatial(prompt, scene);
  }
  return 0.0;
}

/// A transformation under which every oracle is exactly invariant: relabel
/// slots, rotate all hues, transpose and mirror the unit square, and swap each
/// constraint's subject and object.
struct SceneSymmetry {
  std::array<int, kSlots> perm{0, 1, 2};  // slot k moves to perm[k]
  double hue_shift = 0.0;
  bool transpose = false;
  bool flip_x = false;
  bool flip_y = false;
  bool swap_roles = false;

  static SceneSymmetry draw(Rng& rng) {
    SceneSymmetry s;
    std::shuffle(s.perm.begin(), s.perm.end(), rng.engine());
    s.hue_shift = rng.uniform();
    s.transpose = rng.bernoulli(0.5);
    s.flip_x = rng.bernoulli(0.5);
    s.flip_y = rng.bernoulli(0.5);
    s.swap_roles = rng.bernoulli(0.5);
    return s;
  }

  Relation map(Relation r) const {
    if (transpose) {
      switch (r) {
        case Relation::left_of: r = Relation::below; break;
        case Relation::right_of: r = Relation::above; break;
        case Relation::above: r = Relation::right_of; break;
        case Relation::below: r = Relation::left_of; break;
        case Relation::near: break;
      }
    }
    if (flip_x && (r == Relation::left_of || r == Relation::right_of))
      r = r == Relation::left_of ? Relation::right_of : Relation::left_of;
    if (flip_y && (r == Relation::above || r == Relation::below))
      r = r == Relation::above ? Relation::below : Relation::above;
    return r;
  }

  static Relation converse(Relation r) {
    switch (r) {
      case Relation::left_of: return Relation::right_of;
      case Relation::right_of: return Relation::left_of;
      case Relation::above: return Relation::below;
      case Relation::below: return Relation::above;
      case Relation::near: return Relation::near;
    }
    return r;
  }

  Prompt apply(const Prompt& p) const {
    Prompt q = p;
    for (std::size_t k = 0; k < kSlots; ++k) {
      q.slots[perm[k]] = p.slots[k];
      q.slots[perm[k]].hue = wrap_hue(p.slots[k].hue + hue_shift);
    }
    for (auto& c : q.spatial) {
      c.subject = perm[c.subject];
      c.object = perm[c.object];
      c.relation = map(c.relation);
      if (swap_roles) {
        std::swap(c.subject, c.object);
        c.relation = converse(c.relation);
      }
    }
    for (auto& c : q.nonspatial) {
      c.subject = perm[c.subject];
      c.object = perm[c.object];
      if (swap_roles) std::swap(c.subject, c.object);
    }
    return q;
  }

  /// Expects a decoded scene vector.
  SceneVector apply(const SceneVector& v) const {
    SceneVector out{};
    for (std::size_t k = 0; k < kSlots; ++k) {
      double* o = out.data() + perm[k] * kFieldsPerSlot;
      std::copy_n(v.data() + k * kFieldsPerSlot, kFieldsPerSlot, o);
      o[3] = wrap_hue(o[3] + hue_shift);
      if (transpose) std::swap(o[1], o[2]);
      if (flip_x) o[1] = 1.0 - o[1];
      if (flip_y) o[2] = 1.0 - o[2];
    }
    return out;
  }
};

// Target palettes. Hues sit away from the 0/1 wrap point.
inline constexpr std::array<double, 8> kHuePalette = {0.0625, 0.1875, 0.3125, 0.4375,
                                                      0.5625, 0.6875, 0.8125, 0.9375};
inline constexpr std::array<double, 5> kShapePalette = {0.1, 0.3, 0.5, 0.7, 0.9};

/// Random structured prompt of the given category, reproducible from rng.
///  attribute:  1-3 required slots, no constraints
///  spatial:    2-3 required slots, 1-2 spatial constraints on distinct pairs
///  nonspatial: 2-3 required slots, exactly one non-spatial constraint
inline Prompt sample_prompt(Rng& rng, Category category, std::uint64_t id = 0) {
  Prompt p;
  p.id = id;
  p.category = category;
  const int min_required = category == Category::attribute ? 1 : 2;
  const int n_required = rng.uniform_int(min_required, static_cast<int>(kSlots));

  std::array<int, kSlots> order = {0, 1, 2};
  std::shuffle(order.begin(), order.end(), rng.engine());
  std::vector<int> required(order.begin(), order.begin() + n_required);
  std::sort(required.begin(), required.end());
  for (int k : required) {
    auto& slot = p.slots[k];
    slot.required = true;
    slot.hue = kHuePalette[rng.uniform_int(0, static_cast<int>(kHuePalette.size()) - 1)];
    slot.shape = kShapePalette[rng.uniform_int(0, static_cast<int>(kShapePalette.size()) - 1)];
  }

  std::vector<std::pair<int, int>> pairs;
  for (std::size_t a = 0; a < required.size(); ++a)
    for (std::size_t b = a + 1; b < required.size(); ++b) pairs.emplace_back(required[a], required[b]);
  std::shuffle(pairs.begin(), pairs.end(), rng.engine());

  auto oriented = [&](std::pair<int, int> pr) {
    if (rng.bernoulli(0.5)) std::swap(pr.first, pr.second);
    return pr;
  };

  if (category == Category::spatial) {
    const int wanted = rng.uniform_int(1, static_cast<int>(kMaxSpatial));
    const int n = std::min<int>(wanted, static_cast<int>(pairs.size()));
    for (int c = 0; c < n; ++c) {
      const auto [i, j] = oriented(pairs[c]);
      p.spatial.push_back({static_cast<Relation>(rng.uniform_int(0, 4)), i, j});
    }
  } else if (category == Category::nonspatial) {
    const auto [i, j] = oriented(pairs.front());
    p.nonspatial.push_back({static_cast<Interaction>(rng.uniform_int(0, 1)), i, j});
  }
  return p;
}

inline constexpr double kCanonicalThreshold = 0.95;
inline constexpr int kCanonicalTries = 1000;
// Canonical activity for both objects of an independent pair: low joint
// activity that stays clear of the clamp at 0.
inline constexpr double kIndependentActivity = 0.2;

/// A scene satisfying the prompt: attributes and activities copied from the
/// targets, positions rejection-sampled until every spatial constraint scores
/// at least 0.95. Positions are proposed relation-aware: a slot constrained
/// against an already placed slot is offset in the constrained direction.
inline Scene canonical_scene(const Prompt& prompt, Rng& rng, const OracleConfig& cfg = {}) {
  Scene scene;
  for (std::size_t k = 0; k < kSlots; ++k) {
    const auto& t = prompt.slots[k];
    auto& o = scene.slots[k];
    if (t.required) {
      o.present = 1.0;
      o.hue = t.hue;
      o.shape = t.shape;
      o.activity = 0.5;
    } else {
      o = ObjectSlot{0.0, 0.5, 0.5, 0.0, 0.0, 0.0};
    }
  }
  for (const auto& c : prompt.nonspatial) {
    const double a = c.kind == Interaction::interacting ? 1.0 : kIndependentActivity;
    scene.slots[c.subject].activity = a;
    scene.slots[c.object].activity = a;
  }

  for (int attempt = 0; attempt < kCanonicalTries; ++attempt) {
    std::array<bool, kSlots> placed{};
    auto place_free = [&](int k) {
      scene.slots[k].x = rng.uniform(0.15, 0.85);
      scene.slots[k].y = rng.uniform(0.15, 0.85);
      placed[k] = true;
    };
    for (const auto& c : prompt.spatial) {
      int anchor = c.object;
      int mover = c.subject;
      double sign = 1.0;  // offset direction of the subject relative to the object
      if (placed[mover] && !placed[anchor]) {
        std::swap(anchor, mover);
        sign = -1.0;
      }
      if (!placed[anchor]) place_free(anchor);
      if (placed[mover]) continue;
      const auto& a = scene.slots[anchor];
      auto& m = scene.slots[mover];
      const double gap = rng.uniform(0.15, 0.30);
      const double jitter = rng.uniform(-0.10, 0.10);
      switch (c.relation) {
        case Relation::left_of: m.x = a.x - sign * gap; m.y = a.y + jitter; break;
        case Relation::right_of: m.x = a.x + sign * gap; m.y = a.y + jitter; break;
        case Relation::above: m.y = a.y + sign * gap; m.x = a.x + jitter; break;
        case Relation::below: m.y = a.y - sign * gap; m.x = a.x + jitter; break;
        case Relation::near: {
          const double r = 0.04 * std::sqrt(rng.uniform());
          const double th = rng.uniform(0.0, 2.0 * std::numbers::pi);
          m.x = a.x + r * std::cos(th);
          m.y = a.y + r * std::sin(th);
          break;
        }
      }
      m.x = clamp01(m.x);
      m.y = clamp01(m.y);
      placed[mover] = true;
    }
    for (std::size_t k = 0; k < kSlots; ++k)
      if (prompt.slots[k].required && !placed[k]) place_free(static_cast<int>(k));

    bool ok = true;
    for (const auto& c : prompt.spatial)
      if (spatial_constraint_score(c, scene, cfg) < kCanonicalThreshold) ok = false;
    if (ok) return scene;
  }
  throw GenerationError("canonical scene rejection budget exhausted for prompt " +
                        std::to_string(prompt.id));
}

// JSON forms ---------------------------------------------------------------

inline nlohmann::json prompt_to_json(const Prompt& p) {
  nlohmann::json slots = nlohmann::json::array();
  for (const auto& s : p.slots)
    slots.push_back({{"required", s.required}, {"target_hue", s.hue}, {"target_shape", s.shape}});
  nlohmann::json spatial = nlohmann::json::array();
  for (const auto& c : p.spatial)
    spatial.push_back({{"relation", to_string(c.relation)}, {"i", c.subject}, {"j", c.object}});
  nlohmann::json nonspatial = nlohmann::json::array();
  for (const auto& c : p.nonspatial)
    nonspatial.push_back({{"kind", to_string(c.kind)}, {"i", c.subject}, {"j", c.object}});
  return {{"prompt_id", p.id},  {"category", to_string(p.category)}, {"slots", slots},
          {"spatial", spatial}, {"nonspatial", nonspatial}};
}

inline Prompt prompt_from_json(const nlohmann::json& j) {
  try {
    Prompt p;
    p.id = j.at("prompt_id").get<std::uint64_t>();
    p.category = category_from_string(j.at("category").get<std::string>());
    const auto& slots = j.at("slots");
    check_shape(slots.size() == kSlots, "prompt must list 3 slots");
    for (std::size_t k = 0; k < kSlots; ++k) {
      p.slots[k].required = slots[k].at("required").get<bool>();
      p.slots[k].hue = slots[k].at("target_hue").get<double>();
      p.slots[k].shape = slots[k].at("target_shape").get<double>();
    }
    for (const auto& c : j.at("spatial"))
      p.spatial.push_back({relation_from_string(c.at("relation").get<std::string>()),
                           c.at("i").get<int>(), c.at("j").get<int>()});
    for (const auto& c : j.at("nonspatial"))
      p.nonspatial.push_back({interaction_from_string(c.at("kind").get<std::string>()),
                              c.at("i").get<int>(), c.at("j").get<int>()});
    p.validate();
    return p;
  } catch (const nlohmann::json::exception& e) {
    throw DataError(std::string("malformed prompt: ") + e.what());
  } catch (const ConfigError& e) {
    throw DataError(e.what());
  }
}

inline nlohmann::json scene_to_json(const Scene& s) {
  nlohmann::json slots = nlohmann::json::array();
  for (const auto& o : s.slots)
    slots.push_back({{"present", o.present},
                     {"x", o.x},
                     {"y", o.y},
                     {"hue", o.hue},
                     {"shape", o.shape},
                     {"activity", o.activity}});
  return {{"slots", slots}};
}

inline Scene scene_from_json(const nlohmann::json& j) {
  try {
    const auto& slots = j.at("slots");
    check_shape(slots.size() == kSlots, "scene must list 3 slots");
    SceneVector v{};
    for (std::size_t k = 0; k < kSlots; ++k) {
      const auto& o = slots[k];
      double* p = v.data() + k * kFieldsPerSlot;
      p[0] = o.at("present").get<double>();
      p[1] = o.at("x").get<double>();
      p[2] = o.at("y").get<double>();
      p[3] = o.at("hue").get<double>();
      p[4] = o.at("shape").get<double>();
      p[5] = o.at("activity").get<double>();
    }
    return decode_scene(v);
  } catch (const nlohmann::json::exception& e) {
    throw DataError(std::string("malformed scene: ") + e.what());
  }
}

inline SceneVector scene_vector_from_json(const nlohmann::json& j) {
  const auto values = j.get<std::vector<double>>();
  check_shape(values.size() == kSceneDim, "flat scene array must have 18 numbers");
  SceneVector v{};
  std::copy(values.begin(), values.end(), v.begin());
  return v;
}

}  // namespace itercomp
