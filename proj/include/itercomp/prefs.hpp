#pragma once

// Preference dataset construction: noisy raters score each gallery image with
// the category oracle, per-rater rankings are merged by weighted Borda count,
// and each ranking implies m(m-1)/2 winner/loser pairs.

#include <algorithm>
#include <fstream>
#include <map>
#include <numeric>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "itercomp/error.hpp"
#include "itercomp/gallery.hpp"
#include "itercomp/log.hpp"
#include "itercomp/parallel.hpp"
#include "itercomp/rng.hpp"
#include "itercomp/scene.hpp"

namespace itercomp {

/// Where an image came from: a gallery generator or the policy at iteration k.
struct Provenance {
  enum class Kind { generator, policy };
  Kind kind = Kind::generator;
  int index = 0;  // generator index, or policy iteration

  static Provenance generator(int i) { return {Kind::generator, i}; }
  static Provenance policy(int iteration) { return {Kind::policy, iteration}; }

  std::string label() const {
    return kind == Kind::generator ? std::to_string(index)
                                   : "policy-iter-" + std::to_string(index);
  }

  friend bool operator==(const Provenance&, const Provenance&) = default;
};

inline nlohmann::json provenance_to_json(const Provenance& p) {
  if (p.kind == Provenance::Kind::generator) return p.index;
  return p.label();
}

inline Provenance provenance_from_json(const nlohmann::json& j) {
  if (j.is_number_integer()) return Provenance::generator(j.get<int>());
  const auto s = j.get<std::string>();
  const std::string prefix = "policy-iter-";
  if (s.rfind(prefix, 0) != 0) throw DataError("unknown provenance '" + s + "'");
  return Provenance::policy(std::stoi(s.substr(prefix.size())));
}

struct RankedImage {
  SceneVector scene{};
  Provenance provenance;
  int rank = 1;  // 1 = best
  std::vector<double> rater_scores;
  double aggregate = 0.0;
};

struct PreferenceRanking {
  Prompt prompt;
  Category category = Category::attribute;
  std::vector<RankedImage> images;  // best first
  int iteration = 0;

  std::uint64_t prompt_id() const { return prompt.id; }
  std::size_t size() const { return images.size(); }
  std::size_t pair_count() const { return images.size() * (images.size() - 1) / 2; }

  void validate() const {
    if (images.size() < 2) throw DataError("ranking needs at least two images");
    for (std::size_t r = 0; r < images.size(); ++r)
      if (images[r].rank != static_cast<int>(r + 1))
        throw DataError("ranking for prompt " + std::to_string(prompt.id) +
                        " is not ordered 1..m");
  }
};

struct PreferencePair {
  Prompt prompt;
  Category category = Category::attribute;
  SceneVector winner{};
  SceneVector loser{};
  int winner_rank = 1;
  int loser_rank = 2;

  std::uint64_t prompt_id() const { return prompt.id; }
};

struct PreferenceDataset {
  int iteration = 0;
  std::vector<PreferenceRanking> rankings;

  std::size_t texts(Category c) const {
    return static_cast<std::size_t>(std::count_if(
        rankings.begin(), rankings.end(), [c](const auto& r) { return r.category == c; }));
  }
  std::size_t images(Category c) const {
    std::size_t n = 0;
    for (const auto& r : rankings)
      if (r.category == c) n += r.size();
    return n;
  }
  std::size_t pairs(Category c) const {
    std::size_t n = 0;
    for (const auto& r : rankings)
      if (r.category == c) n += r.pair_count();
    return n;
  }
};

struct RaterSpec {
  int count = 3;
  double noise_std = 0.02;
  std::vector<double> weights;  // empty means equal weights

  std::vector<double> resolved_weights() const {
    if (weights.empty()) return std::vector<double>(count, 1.0 / count);
    return weights;
  }

  void validate() const {
    if (count < 1) throw ConfigError("rater count must be >= 1");
    if (noise_std < 0.0) throw ConfigError("rater noise_std must be >= 0");
    if (!weights.empty() && static_cast<int>(weights.size()) != count)
      throw ConfigError("rater weights must have one entry per rater");
    for (double w : weights)
      if (w < 0.0) throw ConfigError("rater weights must be >= 0");
  }
};

struct Candidate {
  Scene scene;
  Provenance provenance;
};

/// Scores every candidate with `count` noisy raters and merges the per-rater
/// rankings by weighted Borda count. Ties on the aggregate fall back to the
/// mean noisy score, then to input order.
inline PreferenceRanking rate_and_rank(const std::vector<Candidate>& candidates,
                                       const Prompt& prompt, Category category,
                                       const RaterSpec& raters, Rng& rng,
                                       const OracleConfig& cfg = {}) {
  const std::size_t m = candidates.size();
  if (m < 2) throw DataError("rate_and_rank needs at least two scenes");
  raters.validate();
  const auto weights = raters.resolved_weights();

  std::vector<double> oracle(m);
  for (std::size_t i = 0; i < m; ++i)
    oracle[i] = category_oracle(category, prompt, candidates[i].scene, cfg);

  std::vector<std::vector<double>> scores(m, std::vector<double>(raters.count));
  for (int r = 0; r < raters.count; ++r)
    for (std::size_t i = 0; i < m; ++i)
      scores[i][r] = oracle[i] + (raters.noise_std > 0.0 ? rng.normal(0.0, raters.noise_std) : 0.0);

  std::vector<double> borda(m, 0.0);
  std::vector<std::size_t> order(m);
  for (int r = 0; r < raters.count; ++r) {
    std::iota(order.begin(), order.end(), 0);
    std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
      return scores[a][r] > scores[b][r];
    });
    for (std::size_t pos = 0; pos < m; ++pos)
      borda[order[pos]] += weights[r] * static_cast<double>(m - 1 - pos);
  }

  std::vector<double> mean(m, 0.0);
  for (std::size_t i = 0; i < m; ++i)
    mean[i] = std::accumulate(scores[i].begin(), scores[i].end(), 0.0) / raters.count;

  std::iota(order.begin(), order.end(), 0);
  std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
    if (borda[a] != borda[b]) return borda[a] > borda[b];
    if (mean[a] != mean[b]) return mean[a] > mean[b];
    return a < b;
  });

  PreferenceRanking ranking;
  ranking.prompt = prompt;
  ranking.category = category;
  for (std::size_t pos = 0; pos < m; ++pos) {
    const std::size_t i = order[pos];
    RankedImage img;
    img.scene = candidates[i].scene.to_vector();
    img.provenance = candidates[i].provenance;
    img.rank = static_cast<int>(pos + 1);
    img.rater_scores = scores[i];
    img.aggregate = borda[i];
    ranking.images.push_back(std::move(img));
  }
  return ranking;
}

/// All m(m-1)/2 pairs of a ranking; the better-ranked image wins.
inline std::vector<PreferencePair> expand_pairs(const PreferenceRanking& ranking) {
  std::vector<PreferencePair> pairs;
  pairs.reserve(ranking.pair_count());
  for (std::size_t a = 0; a < ranking.images.size(); ++a)
    for (std::size_t b = a + 1; b < ranking.images.size(); ++b)
      pairs.push_back({ranking.prompt, ranking.category, ranking.images[a].scene,
                       ranking.images[b].scene, ranking.images[a].rank, ranking.images[b].rank});
  return pairs;
}

struct DatasetConfig {
  std::map<Category, std::size_t> prompts = {
      {Category::attribute, 500}, {Category::spatial, 500}, {Category::nonspatial, 500}};
  Gallery gallery = default_gallery();
  RaterSpec raters;
  OracleConfig oracle;
  unsigned jobs = 1;
};

inline constexpr int kPromptRetries = 10;

inline std::uint64_t make_prompt_id(Category c, std::size_t index) {
  return static_cast<std::uint64_t>(static_cast<int>(c) + 1) * 1000000ULL + index;
}

inline PreferenceDataset build_dataset(const DatasetConfig& config, const Rng& rng) {
  config.gallery.validate();
  config.raters.validate();
  PreferenceDataset ds;
  for (Category c : kCategories) {
    const auto it = config.prompts.find(c);
    const std::size_t count = it == config.prompts.end() ? 0 : it->second;
    std::vector<PreferenceRanking> rankings(count);
    const Rng category_rng = rng.child(to_string(c));
    parallel_for(count, config.jobs, [&](std::size_t i) {
      const std::uint64_t id = make_prompt_id(c, i);
      for (int attempt = 0; attempt <= kPromptRetries; ++attempt) {
        Rng local = category_rng.child(i * (kPromptRetries + 1) + attempt);
        try {
          const Prompt prompt = sample_prompt(local, c, id);
          std::vector<Candidate> candidates;
          for (auto& [g, scene] : gallery_sample(config.gallery, prompt, local, config.oracle))
            candidates.push_back({scene, Provenance::generator(g)});
          rankings[i] = rate_and_rank(candidates, prompt, c, config.raters, local, config.oracle);
          return;
        } catch (const GenerationError& e) {
          log::debug("resampling prompt ", id, ": ", e.what());
        }
      }
      throw DataError("prompt " + std::to_string(id) + ": canonical scene failed after " +
                      std::to_string(kPromptRetries) + " retries");
    });
    for (auto& r : rankings) ds.rankings.push_back(std::move(r));
  }
  return ds;
}

using ProvenanceFractions = std::map<std::string, double>;

/// Per category, the share of rankings whose top image has each provenance.
/// Generator provenances are named after the gallery when one is given.
inline std::map<Category, ProvenanceFractions> ranked_first_proportions(
    const PreferenceDataset& ds, const Gallery* gallery = nullptr) {
  if (ds.rankings.empty()) throw DataError("ranked_first_proportions needs a non-empty dataset");
  auto name_of = [&](const Provenance& p) {
    if (gallery && p.kind == Provenance::Kind::generator && p.index >= 0 &&
        p.index < static_cast<int>(gallery->size()))
      return gallery->profiles[p.index].name;
    return p.label();
  };
  std::map<Category, ProvenanceFractions> out;
  std::map<Category, std::size_t> totals;
  for (const auto& r : ds.rankings) {
    if (r.images.empty()) continue;
    out[r.category][name_of(r.images.front().provenance)] += 1.0;
    totals[r.category] += 1;
  }
  for (auto& [c, fractions] : out)
    for (auto& [name, v] : fractions) v /= static_cast<double>(totals[c]);
  return out;
}

struct CategoryCounts {
  std::size_t texts = 0;
  std::size_t images = 0;
  std::size_t pairs = 0;
};

struct DatasetStats {
  std::map<Category, CategoryCounts> per_category;
  CategoryCounts totals;
  std::map<Category, ProvenanceFractions> ranked_first;
};

inline DatasetStats dataset_stats(const PreferenceDataset& ds, const Gallery* gallery = nullptr) {
  DatasetStats s;
  for (Category c : kCategories) {
    CategoryCounts cc{ds.texts(c), ds.images(c), ds.pairs(c)};
    s.per_category[c] = cc;
    s.totals.texts += cc.texts;
    s.totals.images += cc.images;
    s.totals.pairs += cc.pairs;
  }
  if (!ds.rankings.empty()) s.ranked_first = ranked_first_proportions(ds, gallery);
  return s;
}

inline nlohmann::json stats_to_json(const DatasetStats& s) {
  auto counts = [](const CategoryCounts& c) {
    return nlohmann::json{{"texts", c.texts}, {"images", c.images}, {"pairs", c.pairs}};
  };
  nlohmann::json j;
  j["per_category"] = nlohmann::json::object();
  for (const auto& [c, cc] : s.per_category) j["per_category"][to_string(c)] = counts(cc);
  j["totals"] = counts(s.totals);
  j["ranked_first"] = nlohmann::json::object();
  for (const auto& [c, fr] : s.ranked_first) j["ranked_first"][to_string(c)] = fr;
  return j;
}

// prefs.jsonl: one ranking per line -------------------------------------------

inline nlohmann::json ranking_to_json(const PreferenceRanking& r) {
  nlohmann::json images = nlohmann::json::array();
  for (const auto& img : r.images)
    images.push_back({{"scene", img.scene},
                      {"provenance", provenance_to_json(img.provenance)},
                      {"rank", img.rank},
                      {"rater_scores", img.rater_scores},
                      {"aggregate", img.aggregate}});
  return {{"prompt_id", r.prompt.id}, {"category", to_string(r.category)},
          {"prompt", prompt_to_json(r.prompt)}, {"images", images}, {"iteration", r.iteration}};
}

inline PreferenceRanking ranking_from_json(const nlohmann::json& j) {
  try {
    PreferenceRanking r;
    r.prompt = prompt_from_json(j.at("prompt"));
    r.category = category_from_string(j.at("category").get<std::string>());
    if (j.at("prompt_id").get<std::uint64_t>() != r.prompt.id)
      throw DataError("prompt_id does not match embedded prompt");
    r.iteration = j.at("iteration").get<int>();
    for (const auto& im : j.at("images")) {
      RankedImage img;
      img.scene = scene_vector_from_json(im.at("scene"));
      img.provenance = provenance_from_json(im.at("provenance"));
      img.rank = im.at("rank").get<int>();
      img.rater_scores = im.at("rater_scores").get<std::vector<double>>();
      img.aggregate = im.at("aggregate").get<double>();
      r.images.push_back(std::move(img));
    }
    r.validate();
    return r;
  } catch (const nlohmann::json::exception& e) {
    throw DataError(std::string("malformed ranking record: ") + e.what());
  } catch (const ConfigError& e) {
    throw DataError(e.what());
  }
}

inline void write_prefs_jsonl(const std::string& path, const PreferenceDataset& ds) {
  std::ofstream out(path);
  if (!out) throw DataError("cannot write " + path);
  for (const auto& r : ds.rankings) out << ranking_to_json(r).dump() << '\n';
  if (!out) throw DataError("failed writing " + path);
}

inline PreferenceDataset read_prefs_jsonl(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot read " + path);
  PreferenceDataset ds;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty()) continue;
    nlohmann::json j;
    try {
      j = nlohmann::json::parse(line);
    } catch (const nlohmann::json::exception& e) {
      throw DataError(path + ":" + std::to_string(lineno) + ": " + e.what());
    }
    ds.rankings.push_back(ranking_from_json(j));
    ds.iteration = std::max(ds.iteration, ds.rankings.back().iteration);
  }
  return ds;
}

}  // namespace itercomp
