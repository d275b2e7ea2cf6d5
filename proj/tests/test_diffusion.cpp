#include <gtest/gtest.h>

#include <cmath>
#include <numeric>

#include "itercomp/diffusion.hpp"
#include "itercomp/eval.hpp"

using namespace itercomp;

namespace {

std::vector<TrainingExample> mixture_data(std::size_t per_category, std::uint64_t seed) {
  DatasetConfig cfg;
  cfg.prompts = {{Category::attribute, per_category},
                 {Category::spatial, per_category},
                 {Category::nonspatial, per_category}};
  std::vector<TrainingExample> out;
  for (const auto& r : build_dataset(cfg, Rng(seed)).rankings)
    for (const auto& img : r.images) out.push_back({r.prompt, img.scene});
  return out;
}

struct Pretrained {
  DiffusionModel init;
  DiffusionModel model;
  PretrainReport report;
  std::vector<TrainingExample> data;
};

const Pretrained& pretrained() {
  static const Pretrained p = [] {
    Pretrained out;
    out.data = mixture_data(100, 30);
    Rng init_rng(31);
    out.init = make_diffusion_model(init_rng);
    PretrainHyper h;
    h.steps = 3000;
    Rng rng(32);
    auto [m, rep] = pretrain(out.data, h, rng, out.init);
    out.model = std::move(m);
    out.report = rep;
    return out;
  }();
  return p;
}

std::vector<RewardModel> random_rewards(std::uint64_t seed) {
  Rng rng(seed);
  std::vector<RewardModel> out;
  for (Category c : kCategories) {
    RewardModel rm;
    rm.category = c;
    rm.net = DenseNet::xavier({kRewardInputDim, 16, 16, 1}, rng);
    out.push_back(std::move(rm));
  }
  return out;
}

std::vector<const RewardModel*> pointers(const std::vector<RewardModel>& v) {
  std::vector<const RewardModel*> p;
  for (const auto& r : v) p.push_back(&r);
  return p;
}

DiffusionModel small_model(std::uint64_t seed) {
  Rng rng(seed);
  return make_diffusion_model(rng, NoiseSchedule(), {12, 10});
}

}  // namespace

TEST(Schedule, DefaultsAndInvariants) {
  const NoiseSchedule s;
  EXPECT_EQ(s.steps(), 40);
  EXPECT_DOUBLE_EQ(s.beta(1), 1e-4);
  EXPECT_DOUBLE_EQ(s.beta(40), 0.02);
  EXPECT_EQ(s.alpha_bar(0), 1.0);
  double prod = 1.0;
  for (int t = 1; t <= 40; ++t) {
    EXPECT_GT(s.beta(t), 0.0);
    EXPECT_LT(s.beta(t), 1.0);
    EXPECT_LT(s.alpha_bar(t), s.alpha_bar(t - 1));
    if (t > 1) {
      EXPECT_GT(s.posterior_variance(t), 0.0);
    }
    EXPECT_LE(s.posterior_variance(t), s.beta(t));
    prod *= 1.0 - s.beta(t);
    EXPECT_NEAR(s.alpha_bar(t), prod, 1e-15);
  }
  EXPECT_EQ(s.posterior_variance(1), 0.0);
  EXPECT_NEAR(s.beta(21) - s.beta(20), (0.02 - 1e-4) / 39.0, 1e-15);
  EXPECT_THROW(NoiseSchedule(0, 1e-4, 0.02), ConfigError);
  EXPECT_THROW(NoiseSchedule(10, 0.1, 0.01), ConfigError);
}

TEST(ForwardNoise, Examples) {
  SceneVector x0, eps;
  for (std::size_t i = 0; i < kSceneDim; ++i) {
    x0[i] = 0.05 * i;
    eps[i] = 1.0 - 0.1 * i;
  }
  const NoiseSchedule s;
  EXPECT_EQ(forward_noise(x0, 0, eps, s), x0);

  const NoiseSchedule vanishing(1, 0.999999999, 0.999999999);
  const auto z = forward_noise(x0, 1, eps, vanishing);
  for (std::size_t i = 0; i < kSceneDim; ++i) EXPECT_NEAR(z[i], eps[i], 1e-4);

  const NoiseSchedule s64(1, 0.36, 0.36);
  SceneVector zero{}, ones;
  ones.fill(1.0);
  for (double v : forward_noise(zero, 1, ones, s64)) EXPECT_NEAR(v, 0.6, 1e-15);
  EXPECT_THROW(forward_noise(x0, 41, eps, s), RangeError);
}

TEST(PredictX0, InvertsForwardNoise) {
  const NoiseSchedule s;
  Rng rng(1);
  for (int t = 1; t <= 40; ++t) {
    const auto x0 = standard_normal_latent(rng);
    const auto eps = standard_normal_latent(rng);
    const auto z = forward_noise(x0, t, eps, s);
    const auto back = x0_from_noise(z, t, eps, s);
    for (std::size_t i = 0; i < kSceneDim; ++i) EXPECT_NEAR(back[i], x0[i], 1e-10);
  }
}

TEST(PredictX0, ZeroNetAndLevelZero) {
  DiffusionModel m;
  m.net = DenseNet({kDenoiserInputDim, 4, kSceneDim});
  Rng rng(2);
  const Prompt p = sample_prompt(rng, Category::attribute);
  const auto z = standard_normal_latent(rng);
  EXPECT_EQ(predict_x0(m, z, 0, p), z);
  const auto x = predict_x0(m, z, 7, p);
  for (std::size_t i = 0; i < kSceneDim; ++i)
    EXPECT_NEAR(x[i], z[i] / std::sqrt(m.schedule.alpha_bar(7)), 1e-14);
  EXPECT_THROW(predict_x0(m, z, 41, p), RangeError);
}

TEST(DenoiseStep, ZeroNetMeanAndDeterministicLastStep) {
  DiffusionModel m;
  m.net = DenseNet({kDenoiserInputDim, 4, kSceneDim});
  Rng rng(3);
  const Prompt p = sample_prompt(rng, Category::spatial);
  const auto z = standard_normal_latent(rng);
  Rng a(4), b(5);
  const auto last_a = denoise_step(m, z, 1, p, a);
  const auto last_b = denoise_step(m, z, 1, p, b);
  EXPECT_EQ(last_a, last_b);
  for (std::size_t i = 0; i < kSceneDim; ++i) EXPECT_NEAR(last_a[i], z[i] / std::sqrt(m.schedule.alpha(1)), 1e-14);
  const auto mu = step_mean(z, 9, SceneVector{}, m.schedule);
  for (std::size_t i = 0; i < kSceneDim; ++i) EXPECT_NEAR(mu[i], z[i] / std::sqrt(m.schedule.alpha(9)), 1e-14);
  EXPECT_NE(denoise_step(m, z, 9, p, a), denoise_step(m, z, 9, p, b));
  EXPECT_THROW(denoise_step(m, z, 0, p, a), RangeError);
}

TEST(DenoiseStep, AncestralFormula) {
  const auto m = small_model(6);
  Rng rng(7);
  const Prompt p = sample_prompt(rng, Category::nonspatial);
  const auto z = standard_normal_latent(rng);
  const int t = 12;
  Rng a(8), noise(8);
  const auto next = denoise_step(m, z, t, p, a);
  const auto eps = m.predict_noise(z, t, embed_prompt(p));
  const auto& s = m.schedule;
  const double sd = std::sqrt(s.beta(t) * (1 - s.alpha_bar(t - 1)) / (1 - s.alpha_bar(t)));
  for (std::size_t i = 0; i < kSceneDim; ++i) {
    const double mu = (z[i] - s.beta(t) / std::sqrt(1 - s.alpha_bar(t)) * eps[i]) / std::sqrt(s.alpha(t));
    EXPECT_NEAR(next[i], mu + sd * noise.normal(), 1e-12);
  }
}

TEST(Sample, DeterministicAndSized) {
  const auto m = small_model(9);
  Rng r0(10);
  const Prompt p = sample_prompt(r0, Category::attribute);
  Rng a(11), b(11);
  const auto s1 = sample(m, p, a);
  EXPECT_EQ(s1, sample(m, p, b));
  EXPECT_EQ(s1.size(), 18u);
}

TEST(Pretrain, ZeroStepsAndEmptyData) {
  const auto m = small_model(12);
  PretrainHyper h;
  h.steps = 0;
  Rng rng(13);
  const auto data = mixture_data(2, 1);
  const auto [out, rep] = pretrain(data, h, rng, m);
  EXPECT_TRUE(out.net == m.net);
  EXPECT_EQ(rep.steps, 0);
  h.steps = 1;
  EXPECT_THROW(pretrain({}, h, rng, m), DataError);
}

TEST(Pretrain, InitialLossNearSceneDim) {
  const auto& p = pretrained();
  Rng rng(33);
  const double init = denoising_loss(p.init, p.data, 4000, rng);
  EXPECT_NEAR(init, 18.0, 2.0);
  EXPECT_LT(p.report.final_loss, p.report.initial_loss);
}

TEST(Pretrain, HalvesDenoisingLoss) {
  const auto& p = pretrained();
  Rng a(34), b(34);
  const double before = denoising_loss(p.init, p.data, 4000, a);
  const double after = denoising_loss(p.model, p.data, 4000, b);
  EXPECT_LT(after, 0.5 * before);
  EXPECT_EQ(p.report.loss_curve.size(), 30u);
}

TEST(Pretrain, Deterministic) {
  const auto data = mixture_data(3, 2);
  PretrainHyper h;
  h.steps = 20;
  Rng a(14), b(14);
  const auto m = small_model(15);
  EXPECT_TRUE(pretrain(data, h, a, m).first.net == pretrain(data, h, b, m).first.net);
}

TEST(Sample, PretrainedBeatsUntrained) {
  const auto& p = pretrained();
  const Rng eval_rng(35);
  const auto untrained = evaluate_model(diffusion_source(p.init), 200, eval_rng);
  const auto trained = evaluate_model(diffusion_source(p.model), 200, eval_rng);
  EXPECT_GT(trained.composite, untrained.composite);
}

TEST(Refl, ZeroLambdaZeroLoss) {
  const auto m = small_model(16);
  const auto rms = random_rewards(17);
  ReflConfig cfg;
  cfg.lambda = 0.0;
  Rng rng(18);
  const Prompt p = sample_prompt(rng, Category::spatial);
  const auto res = refl_step(m, pointers(rms), p, cfg, rng);
  EXPECT_EQ(res.loss, 0.0);
  for (double g : res.grads) EXPECT_EQ(g, 0.0);
}

TEST(Refl, TimestepWithinRange) {
  const auto m = small_model(19);
  const auto rms = random_rewards(20);
  ReflConfig cfg;
  Rng rng(21);
  const Prompt p = sample_prompt(rng, Category::attribute);
  std::set<int> seen;
  for (int i = 0; i < 200; ++i) {
    const auto res = refl_step(m, pointers(rms), p, cfg, rng);
    EXPECT_GE(res.t, 1);
    EXPECT_LE(res.t, 10);
    seen.insert(res.t);
    EXPECT_EQ(res.reward_scores.size(), 3u);
  }
  EXPECT_EQ(seen.size(), 10u);
}

TEST(Refl, GradientLocalityMatchesReference) {
  const auto m = small_model(22);
  const auto rms = random_rewards(23);
  for (auto phi : {RewardToLoss::negate, RewardToLoss::relu_margin}) {
    ReflConfig cfg;
    cfg.phi = phi;
    cfg.margin = 5.0;
    cfg.weights = {1.0, 0.5, 2.0};
    for (std::uint64_t seed = 0; seed < 10; ++seed) {
      Rng r0(100 + seed);
      const Prompt p = sample_prompt(r0, kCategories[seed % 3]);
      Rng a(seed), b(seed);
      const auto fast = refl_step(m, pointers(rms), p, cfg, a);
      const auto ref = refl_step_reference(m, pointers(rms), p, cfg, b);
      EXPECT_EQ(fast.t, ref.t);
      EXPECT_NEAR(fast.loss, ref.loss, 1e-14);
      double worst = 0.0;
      for (std::size_t k = 0; k < fast.grads.size(); ++k)
        worst = std::max(worst, std::fabs(fast.grads[k] - ref.grads[k]));
      EXPECT_LE(worst, 1e-10) << "seed " << seed;
    }
  }
}

TEST(Refl, SeveringIsNotVacuous) {
  const auto m = small_model(24);
  const auto rms = random_rewards(25);
  ReflConfig cfg;
  cfg.t_min = cfg.t_max = 5;
  Rng r0(26);
  const Prompt p = sample_prompt(r0, Category::spatial);
  Rng a(27), b(27);
  const auto severed = refl_step_reference(m, pointers(rms), p, cfg, a, true);
  const auto full = refl_step_reference(m, pointers(rms), p, cfg, b, false);
  EXPECT_NEAR(severed.loss, full.loss, 1e-15);
  double diff = 0.0;
  for (std::size_t k = 0; k < full.grads.size(); ++k)
    diff = std::max(diff, std::fabs(full.grads[k] - severed.grads[k]));
  EXPECT_GT(diff, 1e-9);
}

TEST(Refl, GradientMatchesFiniteDifferences) {
  const auto m = small_model(28);
  const auto rms = random_rewards(29);
  const auto ptrs = pointers(rms);
  ReflConfig cfg;
  cfg.lambda = 1.0;
  for (std::uint64_t seed = 0; seed < 4; ++seed) {
    Rng r0(200 + seed);
    const Prompt p = sample_prompt(r0, kCategories[seed % 3]);
    Rng rng(seed);
    const auto res = refl_step(m, ptrs, p, cfg, rng);
    const auto emb = embed_prompt(p);
    const auto eff = effective_refl_config(cfg, ptrs, p);
    LossFn loss = [&](std::span<const double> params) {
      DiffusionModel mm = m;
      std::copy(params.begin(), params.end(), mm.net.params().begin());
      return refl_reward_loss_at(mm, ptrs, emb, res.z_t, res.t, eff, 1.0, {}, nullptr);
    };
    GradFn grad = [&](std::span<const double>) { return res.grads; };
    EXPECT_LE(finite_diff_check(loss, grad, m.net.params(), 1e-5), 1e-4);
  }
}

TEST(Refl, ApplicabilityFollowsConstraints) {
  Rng rng(60);
  for (int i = 0; i < 300; ++i) {
    const Prompt p = sample_prompt(rng, kCategories[i % 3], i);
    EXPECT_TRUE(reward_applies(Category::attribute, p));
    EXPECT_EQ(reward_applies(Category::spatial, p), p.category == Category::spatial);
    EXPECT_EQ(reward_applies(Category::nonspatial, p), p.category == Category::nonspatial);
  }
}

TEST(Refl, MaskDropsInapplicableRewards) {
  const auto m = small_model(61);
  const auto rms = random_rewards(62);
  const auto ptrs = pointers(rms);
  Rng r0(63);
  const Prompt p = sample_prompt(r0, Category::attribute);
  ReflConfig masked;
  masked.weights = {1.0, 2.0, 3.0};
  ReflConfig full = masked;
  full.mask_inapplicable = false;
  ReflConfig attr_only = full;
  attr_only.weights = {1.0, 0.0, 0.0};

  const auto eff = effective_refl_config(masked, ptrs, p);
  EXPECT_EQ(eff.weights, (std::vector<double>{1.0, 0.0, 0.0}));
  EXPECT_EQ(effective_refl_config(full, ptrs, p).weights, full.weights);

  Rng a(64), b(64), c(64);
  const auto rm = refl_step(m, ptrs, p, masked, a);
  const auto ra = refl_step(m, ptrs, p, attr_only, b);
  const auto rf = refl_step(m, ptrs, p, full, c);
  EXPECT_EQ(rm.loss, ra.loss);
  EXPECT_EQ(rm.grads, ra.grads);
  EXPECT_NE(rm.loss, rf.loss);
  EXPECT_EQ(rm.reward_scores, rf.reward_scores);
}

TEST(Refl, RhoAddsDenoisingTerm) {
  const auto m = small_model(36);
  const auto rms = random_rewards(37);
  const auto data = mixture_data(1, 3);
  ReflConfig cfg;
  cfg.lambda = 0.0;
  cfg.rho = 0.5;
  Rng r0(38);
  const Prompt p = sample_prompt(r0, Category::attribute);
  Rng rng(39);
  const auto res = refl_step(m, pointers(rms), p, cfg, rng, ReflAnchor{&data[0]});
  EXPECT_GT(res.loss, 0.0);
  EXPECT_THROW(refl_step(m, pointers(rms), p, cfg, rng), ConfigError);
}

TEST(Refl, ConfigValidation) {
  const auto m = small_model(40);
  const auto rms = random_rewards(41);
  Rng rng(42);
  const Prompt p = sample_prompt(rng, Category::attribute);
  ReflConfig bad;
  bad.t_min = 0;
  EXPECT_THROW(refl_step(m, pointers(rms), p, bad, rng), ConfigError);
  bad = {};
  bad.t_max = 50;
  EXPECT_THROW(refl_step(m, pointers(rms), p, bad, rng), ConfigError);
  bad = {};
  bad.weights = {1.0};
  EXPECT_THROW(refl_step(m, pointers(rms), p, bad, rng), ConfigError);
  EXPECT_THROW(refl_step(m, {}, p, ReflConfig{}, rng), ConfigError);
  EXPECT_EQ(apply_phi(ReflConfig{}, 0.7), -0.7);
  ReflConfig relu;
  relu.phi = RewardToLoss::relu_margin;
  EXPECT_EQ(apply_phi(relu, 0.25), 0.75);
  EXPECT_EQ(apply_phi(relu, 3.0), 0.0);
}

TEST(Finetune, ZeroEpochsUnchanged) {
  const auto m = small_model(43);
  const auto rms = random_rewards(44);
  ReflConfig cfg;
  cfg.epochs = 0;
  Rng rng(45);
  const std::vector<Prompt> prompts{sample_prompt(rng, Category::attribute)};
  const auto [out, rep] = refl_finetune(m, pointers(rms), prompts, cfg, rng);
  EXPECT_TRUE(out.net == m.net);
  EXPECT_EQ(rep.steps, 0u);
  EXPECT_THROW(refl_finetune(m, pointers(rms), {}, cfg, rng), DataError);
}

TEST(Finetune, IncreasesRewardAndLossTrendsDown) {
  const auto& base = pretrained().model;
  const auto rms = random_rewards(46);
  const auto ptrs = pointers(rms);
  ReflConfig cfg;
  cfg.prompts = 2000;
  cfg.epochs = 1;
  Rng prng(47);
  std::vector<Prompt> prompts;
  for (std::size_t i = 0; i < cfg.prompts; ++i) prompts.push_back(sample_prompt(prng, kCategories[i % 3], i));
  Rng rng(48);
  const auto [tuned, rep] = refl_finetune(base, ptrs, prompts, cfg, rng);
  EXPECT_EQ(rep.steps, 500u);

  auto total_reward = [&](const DiffusionModel& m) {
    Rng held(49);
    double total = 0.0;
    for (int i = 0; i < 200; ++i) {
      Rng local = held.child(i);
      const Prompt p = sample_prompt(local, kCategories[i % 3], 9900000 + i);
      const auto x = sample(m, p, local);
      for (const auto& r : rms) total += reward_score(r, p, x);
    }
    return total / 200.0;
  };
  EXPECT_GT(total_reward(tuned), total_reward(base));

  const auto& lc = rep.loss_curve;
  auto window_mean = [&](std::size_t from) {
    return std::accumulate(lc.begin() + from, lc.begin() + from + 50, 0.0) / 50.0;
  };
  EXPECT_LE(window_mean(lc.size() - 50), window_mean(0));
}

TEST(Checkpoint, RoundTrip) {
  const auto m = small_model(50);
  const auto j = diffusion_to_json(m, {{"lr", 1e-3}});
  EXPECT_EQ(j.at("kind").get<std::string>(), "diffusion");
  EXPECT_EQ(j.at("schedule").at("T").get<int>(), 40);
  const auto back = diffusion_from_json(nlohmann::json::parse(j.dump()));
  EXPECT_TRUE(back.net == m.net);
  EXPECT_EQ(back.schedule.steps(), 40);
  auto wrong = j;
  wrong["kind"] = "reward";
  EXPECT_THROW(diffusion_from_json(wrong), DataError);
  auto bad_sched = j;
  bad_sched["schedule"]["T"] = 0;
  EXPECT_THROW(diffusion_from_json(bad_sched), DataError);
}
