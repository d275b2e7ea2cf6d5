#pragma once

// Per-category reward models trained with the Bradley-Terry pairwise loss.

#include <cmath>
#include <numbers>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "itercomp/error.hpp"
#include "itercomp/net.hpp"
#include "itercomp/prefs.hpp"
#include "itercomp/rng.hpp"
#include "itercomp/scene.hpp"

namespace itercomp {

inline constexpr std::size_t kRewardInputDim = kEmbedDim + kSceneDim;

using RewardInput = std::array<double, kRewardInputDim>;

inline RewardInput reward_input(const PromptEmbedding& emb, std::span<const double> scene) {
  check_shape(scene.size() == kSceneDim, "reward model scene input");
  RewardInput in{};
  std::copy(emb.begin(), emb.end(), in.begin());
  std::copy(scene.begin(), scene.end(), in.begin() + kEmbedDim);
  return in;
}

struct RewardModel {
  Category category = Category::attribute;
  DenseNet net;
  int iteration = 0;
  int epochs = 0;
  std::uint64_t seed = 0;

  double score(const PromptEmbedding& emb, std::span<const double> scene) const {
    const auto in = reward_input(emb, scene);
    return net.forward(in)[0];
  }
};

inline RewardModel make_reward_model(Category category, Rng& rng,
                                     const std::vector<std::size_t>& hidden = {64, 64}) {
  std::vector<std::size_t> dims{kRewardInputDim};
  dims.insert(dims.end(), hidden.begin(), hidden.end());
  dims.push_back(1);
  RewardModel rm;
  rm.category = category;
  rm.seed = rng.seed();
  rm.net = DenseNet::xavier(dims, rng, 0.01);
  return rm;
}

inline double reward_score(const RewardModel& rm, const Prompt& prompt, std::span<const double> scene) {
  return rm.score(embed_prompt(prompt), scene);
}

/// -log sigmoid(r_w - r_l), evaluated as softplus(r_l - r_w) so it stays
/// finite for large margins in either direction.
inline double bt_loss(double r_w, double r_l) {
  const double x = r_l - r_w;
  return std::max(x, 0.0) + std::log1p(std::exp(-std::fabs(x)));
}

/// d bt_loss / d r_w. The gradient with respect to r_l is the negation.
inline double bt_loss_grad_winner(double r_w, double r_l) { return -sigmoid(r_l - r_w); }

using SceneScorer = std::function<double(const Prompt&, const SceneVector&)>;

/// Share of pairs scored in the right order; exact ties count half.
inline double pairwise_accuracy(const SceneScorer& scorer, const std::vector<PreferencePair>& pairs) {
  if (pairs.empty()) throw DataError("pairwise_accuracy needs at least one pair");
  double hits = 0.0;
  for (const auto& p : pairs) {
    const double w = scorer(p.prompt, p.winner);
    const double l = scorer(p.prompt, p.loser);
    hits += w > l ? 1.0 : (w == l ? 0.5 : 0.0);
  }
  return hits / static_cast<double>(pairs.size());
}

inline double pairwise_accuracy(const RewardModel& rm, const std::vector<PreferencePair>& pairs) {
  return pairwise_accuracy(
      [&rm](const Prompt& p, const SceneVector& s) { return reward_score(rm, p, s); }, pairs);
}

enum class LrSchedule { constant, cosine };

inline std::string to_string(LrSchedule s) { return s == LrSchedule::cosine ? "cosine" : "constant"; }

inline LrSchedule lr_schedule_from_string(const std::string& s) {
  if (s == "cosine") return LrSchedule::cosine;
  if (s == "constant") return LrSchedule::constant;
  throw ConfigError("unknown lr schedule '" + s + "' (expected constant|cosine)");
}

/// Step-size multiplier at optimizer step `step` of `total`.
inline double lr_factor(LrSchedule s, std::size_t step, std::size_t total) {
  if (s == LrSchedule::constant || total == 0) return 1.0;
  return 0.5 * (1.0 + std::cos(std::numbers::pi * static_cast<double>(step) / static_cast<double>(total)));
}

struct RewardHyper {
  int epochs = 600;             // training from a fresh initialization
  int warm_start_epochs = 100;  // continuing from a trained model
  double lr = 3e-3;
  std::size_t batch = 64;
  double holdout = 0.1;
  std::vector<std::size_t> hidden = {64, 64};
  bool augment = true;
  LrSchedule schedule = LrSchedule::cosine;

  void validate() const {
    if (epochs < 0) throw ConfigError("reward epochs must be >= 0");
    if (warm_start_epochs < 0) throw ConfigError("reward warm_start_epochs must be >= 0");
    if (!(lr > 0.0)) throw ConfigError("reward lr must be positive");
    if (batch == 0) throw ConfigError("reward batch must be positive");
    if (holdout < 0.0 || holdout >= 1.0) throw ConfigError("reward holdout must be in [0, 1)");
  }
};

/// Prompt-level holdout membership. Stable across dataset iterations so
/// held-out prompts never leak into training.
inline bool is_holdout(std::uint64_t prompt_id, double fraction) {
  const std::uint64_t h = splitmix64(prompt_id ^ 0x5eed5eed5eedULL);
  return static_cast<double>(h % 1000000ULL) < fraction * 1e6;
}

struct TrainReport {
  Category category = Category::attribute;
  std::size_t train_rankings = 0;
  std::size_t holdout_rankings = 0;
  std::size_t holdout_pairs = 0;
  std::size_t steps = 0;
  double initial_train_loss = 0.0;
  double initial_holdout_loss = 0.0;
  double final_holdout_loss = 0.0;
  double holdout_accuracy = 0.0;
  std::vector<double> loss_curve;  // mean training-batch loss per epoch

  nlohmann::json to_json() const {
    return {{"category", to_string(category)},
            {"train_rankings", train_rankings},
            {"holdout_rankings", holdout_rankings},
            {"holdout_pairs", holdout_pairs},
            {"steps", steps},
            {"initial_train_loss", initial_train_loss},
            {"initial_holdout_loss", initial_holdout_loss},
            {"final_holdout_loss", final_holdout_loss},
            {"holdout_accuracy", holdout_accuracy},
            {"loss_curve", loss_curve}};
  }
};

struct EncodedPair {
  RewardInput winner;
  RewardInput loser;
};

inline std::vector<EncodedPair> encode_pairs(const std::vector<const PreferenceRanking*>& rankings) {
  std::vector<EncodedPair> out;
  for (const auto* r : rankings) {
    const auto emb = embed_prompt(r->prompt);
    for (const auto& p : expand_pairs(*r))
      out.push_back({reward_input(emb, p.winner), reward_input(emb, p.loser)});
  }
  return out;
}

inline double mean_bt_loss(const DenseNet& net, const std::vector<EncodedPair>& pairs) {
  if (pairs.empty()) return 0.0;
  double total = 0.0;
  for (const auto& p : pairs) total += bt_loss(net.forward(p.winner)[0], net.forward(p.loser)[0]);
  return total / static_cast<double>(pairs.size());
}

/// Mean Bradley-Terry loss over a batch and its parameter gradient.
inline double bt_batch_loss_and_grad(const DenseNet& net, std::span<const EncodedPair* const> batch,
                                     std::span<double> grad) {
  std::fill(grad.begin(), grad.end(), 0.0);
  ForwardCache cw, cl;
  double total = 0.0;
  const double scale = 1.0 / static_cast<double>(batch.size());
  for (const EncodedPair* p : batch) {
    net.forward(p->winner, cw);
    net.forward(p->loser, cl);
    const double rw = cw.output()[0];
    const double rl = cl.output()[0];
    total += bt_loss(rw, rl);
    const double gw = bt_loss_grad_winner(rw, rl) * scale;
    const double up_w[1] = {gw};
    const double up_l[1] = {-gw};
    net.backward(cw, up_w, grad);
    net.backward(cl, up_l, grad);
  }
  return total * scale;
}

/// Trains (or continues training) the reward model for one category with Adam
/// on uniformly sampled implied pairs. One epoch draws as many pairs as the
/// training rankings imply. A model that has already been trained continues
/// for warm_start_epochs; a fresh one trains for epochs. With augment set,
/// each drawn pair is passed through a random oracle-preserving SceneSymmetry.
inline std::pair<RewardModel, TrainReport> train_reward(const PreferenceDataset& dataset,
                                                        Category category, const RewardHyper& hyper,
                                                        Rng& rng,
                                                        std::optional<RewardModel> init = std::nullopt) {
  hyper.validate();
  std::vector<const PreferenceRanking*> train, holdout;
  for (const auto& r : dataset.rankings) {
    if (r.category != category) continue;
    (is_holdout(r.prompt.id, hyper.holdout) ? holdout : train).push_back(&r);
  }
  if (train.empty() && holdout.empty())
    throw DataError("no rankings for category " + to_string(category));
  if (train.empty()) throw DataError("no training rankings for category " + to_string(category));

  RewardModel rm = init ? std::move(*init) : make_reward_model(category, rng, hyper.hidden);
  if (rm.category != category)
    throw DataError("warm-start reward model category does not match " + to_string(category));
  const int epochs = rm.epochs > 0 ? hyper.warm_start_epochs : hyper.epochs;

  struct PairRef {
    const PreferenceRanking* ranking;
    std::size_t winner, loser;
  };
  std::vector<PairRef> refs;
  for (const auto* r : train)
    for (std::size_t a = 0; a < r->images.size(); ++a)
      for (std::size_t b = a + 1; b < r->images.size(); ++b) refs.push_back({r, a, b});
  const auto train_pairs = encode_pairs(train);
  const auto holdout_pairs = encode_pairs(holdout);

  TrainReport report;
  report.category = category;
  report.train_rankings = train.size();
  report.holdout_rankings = holdout.size();
  report.holdout_pairs = holdout_pairs.size();
  report.initial_train_loss = mean_bt_loss(rm.net, train_pairs);
  report.initial_holdout_loss = mean_bt_loss(rm.net, holdout_pairs);

  // refs is ranking-major; equal-size rankings make uniform pair sampling
  // equivalent to picking a ranking and then one of its pairs.
  const std::size_t steps_per_epoch = (refs.size() + hyper.batch - 1) / hyper.batch;
  const std::size_t total_steps = steps_per_epoch * static_cast<std::size_t>(epochs);
  AdamState adam(rm.net.param_count());
  std::vector<double> grad(rm.net.param_count());
  std::vector<EncodedPair> batch(hyper.batch);
  std::vector<const EncodedPair*> batch_ptrs(hyper.batch);
  for (std::size_t b = 0; b < hyper.batch; ++b) batch_ptrs[b] = &batch[b];
  const int last = static_cast<int>(refs.size()) - 1;
  for (int epoch = 0; epoch < epochs; ++epoch) {
    double epoch_loss = 0.0;
    for (std::size_t s = 0; s < steps_per_epoch; ++s) {
      for (auto& slot : batch) {
        const PairRef& ref = refs[rng.uniform_int(0, last)];
        const auto& w = ref.ranking->images[ref.winner].scene;
        const auto& l = ref.ranking->images[ref.loser].scene;
        if (hyper.augment) {
          const auto sym = SceneSymmetry::draw(rng);
          const auto emb = embed_prompt(sym.apply(ref.ranking->prompt));
          slot = {reward_input(emb, sym.apply(w)), reward_input(emb, sym.apply(l))};
        } else {
          const auto emb = embed_prompt(ref.ranking->prompt);
          slot = {reward_input(emb, w), reward_input(emb, l)};
        }
      }
      epoch_loss += bt_batch_loss_and_grad(rm.net, batch_ptrs, grad);
      adam_step(adam, rm.net.params(), grad, hyper.lr * lr_factor(hyper.schedule, report.steps, total_steps));
      ++report.steps;
    }
    report.loss_curve.push_back(epoch_loss / static_cast<double>(steps_per_epoch));
  }
  rm.epochs += epochs;
  rm.iteration = dataset.iteration;

  report.final_holdout_loss = mean_bt_loss(rm.net, holdout_pairs);
  if (!holdout.empty()) {
    std::vector<PreferencePair> pairs;
    for (const auto* r : holdout)
      for (auto& p : expand_pairs(*r)) pairs.push_back(std::move(p));
    report.holdout_accuracy = pairwise_accuracy(rm, pairs);
  }
  return {std::move(rm), report};
}

inline nlohmann::json reward_to_json(const RewardModel& rm, const nlohmann::json& hyper = {}) {
  nlohmann::json meta{{"seed", rm.seed}, {"hyperparams", hyper}, {"epochs", rm.epochs}};
  auto j = net_to_json(rm.net, meta);
  j["kind"] = "reward";
  j["category"] = to_string(rm.category);
  j["iteration"] = rm.iteration;
  return j;
}

inline RewardModel reward_from_json(const nlohmann::json& j) {
  try {
    RewardModel rm;
    if (j.value("kind", std::string("reward")) != "reward")
      throw DataError("checkpoint is not a reward model");
    rm.category = category_from_string(j.at("category").get<std::string>());
    rm.iteration = j.at("iteration").get<int>();
    rm.net = net_from_json(j);
    check_shape(rm.net.input_dim() == kRewardInputDim && rm.net.output_dim() == 1,
                "reward model must map 60 inputs to one score");
    const auto& meta = j.at("metadata");
    rm.seed = meta.value("seed", std::uint64_t{0});
    rm.epochs = meta.value("epochs", 0);
    return rm;
  } catch (const nlohmann::json::exception& e) {
    throw DataError(std::string("malformed reward checkpoint: ") + e.what());
  } catch (const ConfigError& e) {
    throw DataError(e.what());
  }
}

}  // namespace itercomp
