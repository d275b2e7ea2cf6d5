#pragma once

// Conditional DDPM over raw scene vectors and multi-reward feedback
// finetuning (ReFL): roll out without gradients to a random late timestep,
// take one denoising step under gradient, predict the clean sample from it
// and push the summed rewards of that prediction up.

#include <array>
#include <cmath>
#include <numeric>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "itercomp/error.hpp"
#include "itercomp/net.hpp"
#include "itercomp/reward.hpp"
#include "itercomp/rng.hpp"
#include "itercomp/scene.hpp"

namespace itercomp {

/// Linear beta schedule. Index 0 of alpha_bar is the noise-free convention.
class NoiseSchedule {
 public:
  NoiseSchedule() : NoiseSchedule(40, 1e-4, 0.02) {}

  NoiseSchedule(int steps, double beta_start, double beta_end)
      : steps_(steps), beta_start_(beta_start), beta_end_(beta_end) {
    if (steps < 1) throw ConfigError("diffusion T must be >= 1");
    if (!(beta_start > 0.0) || !(beta_end < 1.0) || beta_start > beta_end)
      throw ConfigError("diffusion betas must satisfy 0 < beta_start <= beta_end < 1");
    beta_.assign(steps + 1, 0.0);
    alpha_.assign(steps + 1, 1.0);
    alpha_bar_.assign(steps + 1, 1.0);
    posterior_var_.assign(steps + 1, 0.0);
    for (int t = 1; t <= steps; ++t) {
      beta_[t] = steps == 1 ? beta_start
                            : beta_start + (beta_end - beta_start) * (t - 1) / (steps - 1.0);
      alpha_[t] = 1.0 - beta_[t];
      alpha_bar_[t] = alpha_bar_[t - 1] * alpha_[t];
      posterior_var_[t] = beta_[t] * (1.0 - alpha_bar_[t - 1]) / (1.0 - alpha_bar_[t]);
    }
  }

  int steps() const { return steps_; }
  double beta_start() const { return beta_start_; }
  double beta_end() const { return beta_end_; }
  double beta(int t) const { return beta_.at(t); }
  double alpha(int t) const { return alpha_.at(t); }
  double alpha_bar(int t) const { return alpha_bar_.at(t); }
  /// beta-tilde: variance of the ancestral step t -> t-1.
  double posterior_variance(int t) const { return posterior_var_.at(t); }

  void check_step(int t) const {
    if (t < 1 || t > steps_)
      throw RangeError("timestep " + std::to_string(t) + " outside [1, " + std::to_string(steps_) + "]");
  }
  void check_level(int t) const {
    if (t < 0 || t > steps_)
      throw RangeError("timestep " + std::to_string(t) + " outside [0, " + std::to_string(steps_) + "]");
  }

 private:
  int steps_;
  double beta_start_;
  double beta_end_;
  std::vector<double> beta_, alpha_, alpha_bar_, posterior_var_;
};

inline constexpr std::size_t kTimeEmbedDim = 8;
inline constexpr std::size_t kDenoiserInputDim = kSceneDim + kTimeEmbedDim + kEmbedDim;

/// Sinusoidal embedding of an integer timestep.
inline std::array<double, kTimeEmbedDim> time_embedding(int t) {
  std::array<double, kTimeEmbedDim> e{};
  for (std::size_t k = 0; k < kTimeEmbedDim / 2; ++k) {
    const double freq = std::pow(1000.0, -static_cast<double>(k) / (kTimeEmbedDim / 2));
    e[2 * k] = std::sin(t * freq);
    e[2 * k + 1] = std::cos(t * freq);
  }
  return e;
}

inline std::array<double, kDenoiserInputDim> denoiser_input(std::span<const double> z, int t,
                                                            const PromptEmbedding& emb) {
  std::array<double, kDenoiserInputDim> in{};
  std::copy(z.begin(), z.end(), in.begin());
  const auto te = time_embedding(t);
  std::copy(te.begin(), te.end(), in.begin() + kSceneDim);
  std::copy(emb.begin(), emb.end(), in.begin() + kSceneDim + kTimeEmbedDim);
  return in;
}

struct DiffusionModel {
  DenseNet net;  // epsilon predictor
  NoiseSchedule schedule;
  int iteration = 0;
  std::uint64_t seed = 0;

  SceneVector predict_noise(std::span<const double> z, int t, const PromptEmbedding& emb) const {
    const auto in = denoiser_input(z, t, emb);
    const auto out = net.forward(in);
    SceneVector eps{};
    std::copy(out.begin(), out.end(), eps.begin());
    return eps;
  }
};

inline DiffusionModel make_diffusion_model(Rng& rng, const NoiseSchedule& schedule = {},
                                           const std::vector<std::size_t>& hidden = {128, 128}) {
  std::vector<std::size_t> dims{kDenoiserInputDim};
  dims.insert(dims.end(), hidden.begin(), hidden.end());
  dims.push_back(kSceneDim);
  DiffusionModel m;
  m.seed = rng.seed();
  m.schedule = schedule;
  m.net = DenseNet::xavier(dims, rng, 0.01);
  return m;
}

inline SceneVector forward_noise(std::span<const double> x0, int t, std::span<const double> eps,
                                 const NoiseSchedule& schedule) {
  schedule.check_level(t);
  check_shape(x0.size() == kSceneDim && eps.size() == kSceneDim, "forward_noise vectors");
  const double a = std::sqrt(schedule.alpha_bar(t));
  const double s = std::sqrt(1.0 - schedule.alpha_bar(t));
  SceneVector z{};
  for (std::size_t i = 0; i < kSceneDim; ++i) z[i] = a * x0[i] + s * eps[i];
  return z;
}

/// Inverts forward_noise given a noise estimate.
inline SceneVector x0_from_noise(std::span<const double> z, int t, std::span<const double> eps,
                                 const NoiseSchedule& schedule) {
  schedule.check_level(t);
  const double a = std::sqrt(schedule.alpha_bar(t));
  const double s = std::sqrt(1.0 - schedule.alpha_bar(t));
  SceneVector x{};
  for (std::size_t i = 0; i < kSceneDim; ++i) x[i] = (z[i] - s * eps[i]) / a;
  return x;
}

inline SceneVector predict_x0(const DiffusionModel& model, std::span<const double> z, int t,
                              const Prompt& prompt) {
  model.schedule.check_level(t);
  check_shape(z.size() == kSceneDim, "predict_x0 latent");
  if (t == 0) {
    SceneVector x{};
    std::copy(z.begin(), z.end(), x.begin());
    return x;
  }
  const auto eps = model.predict_noise(z, t, embed_prompt(prompt));
  return x0_from_noise(z, t, eps, model.schedule);
}

/// Posterior mean of the ancestral step t -> t-1 given a noise estimate.
inline SceneVector step_mean(std::span<const double> z, int t, std::span<const double> eps,
                             const NoiseSchedule& schedule) {
  const double k = schedule.beta(t) / std::sqrt(1.0 - schedule.alpha_bar(t));
  const double inv = 1.0 / std::sqrt(schedule.alpha(t));
  SceneVector mu{};
  for (std::size_t i = 0; i < kSceneDim; ++i) mu[i] = (z[i] - k * eps[i]) * inv;
  return mu;
}

/// Adds the ancestral noise for step t (none at t = 1). Always draws from rng
/// for t > 1 so that rollouts consume randomness identically.
inline void add_step_noise(SceneVector& mu, int t, const NoiseSchedule& schedule, Rng& rng) {
  if (t <= 1) return;
  const double sd = std::sqrt(schedule.posterior_variance(t));
  for (double& v : mu) v += sd * rng.normal();
}

inline SceneVector denoise_step(const DiffusionModel& model, std::span<const double> z, int t,
                                const PromptEmbedding& emb, Rng& rng) {
  model.schedule.check_step(t);
  check_shape(z.size() == kSceneDim, "denoise_step latent");
  const auto eps = model.predict_noise(z, t, emb);
  auto next = step_mean(z, t, eps, model.schedule);
  add_step_noise(next, t, model.schedule, rng);
  return next;
}

inline SceneVector denoise_step(const DiffusionModel& model, std::span<const double> z, int t,
                                const Prompt& prompt, Rng& rng) {
  return denoise_step(model, z, t, embed_prompt(prompt), rng);
}

inline SceneVector standard_normal_latent(Rng& rng) {
  SceneVector z{};
  for (double& v : z) v = rng.normal();
  return z;
}

/// Full ancestral sampling from z_T ~ N(0, I); returns the undecoded z_0.
inline SceneVector sample(const DiffusionModel& model, const Prompt& prompt, Rng& rng) {
  const auto emb = embed_prompt(prompt);
  SceneVector z = standard_normal_latent(rng);
  for (int t = model.schedule.steps(); t >= 1; --t) z = denoise_step(model, z, t, emb, rng);
  return z;
}

// Pretraining -------------------------------------------------------------

struct PretrainHyper {
  int steps = 20000;
  double lr = 1e-3;
  std::size_t batch = 64;

  void validate() const {
    if (steps < 0) throw ConfigError("pretrain steps must be >= 0");
    if (!(lr > 0.0)) throw ConfigError("pretrain lr must be positive");
    if (batch == 0) throw ConfigError("pretrain batch must be positive");
  }
};

struct TrainingExample {
  Prompt prompt;
  SceneVector scene{};
};

struct PretrainReport {
  int steps = 0;
  double initial_loss = 0.0;  // mean over the first logged window
  double final_loss = 0.0;    // mean over the last logged window
  std::vector<double> loss_curve;  // mean batch loss per window of 100 steps

  nlohmann::json to_json() const {
    return {{"steps", steps}, {"initial_loss", initial_loss}, {"final_loss", final_loss},
            {"loss_curve", loss_curve}};
  }
};

/// Squared-error noise prediction loss and gradient for one example at a
/// given (t, eps). Gradient is accumulated with the given scale.
inline double denoising_loss_accumulate(const DiffusionModel& model, const PromptEmbedding& emb,
                                        std::span<const double> x0, int t,
                                        std::span<const double> eps, double scale,
                                        std::span<double> grad, ForwardCache& cache) {
  const auto z = forward_noise(x0, t, eps, model.schedule);
  const auto in = denoiser_input(z, t, emb);
  model.net.forward(in, cache);
  const auto pred = cache.output();
  std::array<double, kSceneDim> up{};
  double loss = 0.0;
  for (std::size_t i = 0; i < kSceneDim; ++i) {
    const double d = pred[i] - eps[i];
    loss += d * d;
    up[i] = 2.0 * d * scale;
  }
  if (!grad.empty()) model.net.backward(cache, up, grad);
  return loss;
}

/// Empirical denoising loss of a model on fixed draws of (example, t, eps).
inline double denoising_loss(const DiffusionModel& model, const std::vector<TrainingExample>& data,
                             std::size_t draws, Rng& rng) {
  if (data.empty()) throw DataError("denoising_loss needs data");
  ForwardCache cache;
  double total = 0.0;
  const int last = static_cast<int>(data.size()) - 1;
  for (std::size_t d = 0; d < draws; ++d) {
    const auto& ex = data[rng.uniform_int(0, last)];
    const int t = rng.uniform_int(1, model.schedule.steps());
    const auto eps = standard_normal_latent(rng);
    total += denoising_loss_accumulate(model, embed_prompt(ex.prompt), ex.scene, t, eps, 0.0, {}, cache);
  }
  return total / static_cast<double>(draws);
}

inline std::pair<DiffusionModel, PretrainReport> pretrain(const std::vector<TrainingExample>& data,
                                                          const PretrainHyper& hyper, Rng& rng,
                                                          DiffusionModel model) {
  hyper.validate();
  if (data.empty()) throw DataError("pretrain needs at least one example");
  std::vector<PromptEmbedding> embeddings;
  embeddings.reserve(data.size());
  for (const auto& ex : data) embeddings.push_back(embed_prompt(ex.prompt));

  PretrainReport report;
  AdamState adam(model.net.param_count());
  std::vector<double> grad(model.net.param_count());
  ForwardCache cache;
  const int last = static_cast<int>(data.size()) - 1;
  const double scale = 1.0 / static_cast<double>(hyper.batch);
  constexpr int kWindow = 100;
  double window = 0.0;
  int in_window = 0;
  for (int step = 0; step < hyper.steps; ++step) {
    std::fill(grad.begin(), grad.end(), 0.0);
    double loss = 0.0;
    for (std::size_t b = 0; b < hyper.batch; ++b) {
      const int idx = rng.uniform_int(0, last);
      const int t = rng.uniform_int(1, model.schedule.steps());
      const auto eps = standard_normal_latent(rng);
      loss += denoising_loss_accumulate(model, embeddings[idx], data[idx].scene, t, eps, scale, grad, cache);
    }
    adam_step(adam, model.net.params(), grad, hyper.lr);
    window += loss * scale;
    if (++in_window == kWindow || step + 1 == hyper.steps) {
      report.loss_curve.push_back(window / in_window);
      window = 0.0;
      in_window = 0;
    }
  }
  report.steps = hyper.steps;
  if (!report.loss_curve.empty()) {
    report.initial_loss = report.loss_curve.front();
    report.final_loss = report.loss_curve.back();
  }
  return {std::move(model), report};
}

// Reward feedback learning ---------------------------------------------------

enum class RewardToLoss { negate, relu_margin };

inline std::string to_string(RewardToLoss p) {
  return p == RewardToLoss::negate ? "negate" : "relu_margin";
}
inline RewardToLoss reward_to_loss_from_string(const std::string& s) {
  if (s == "negate") return RewardToLoss::negate;
  if (s == "relu_margin") return RewardToLoss::relu_margin;
  throw ConfigError("unknown reward-to-loss map '" + s + "' (expected negate|relu_margin)");
}

struct ReflConfig {
  double lambda = 1e-3;
  int t_min = 1;
  int t_max = 10;
  RewardToLoss phi = RewardToLoss::negate;
  double margin = 1.0;
  double lr = 1e-5;
  std::size_t batch = 4;
  std::vector<double> weights;  // per reward model; empty = all 1
  double rho = 0.0;
  std::size_t prompts = 2000;
  int epochs = 4;
  bool mask_inapplicable = true;  // drop rewards whose oracle is constant for the prompt

  void validate(int T, std::size_t n_rewards) const {
    if (t_min < 1 || t_min > t_max || t_max > T)
      throw ConfigError("ReFL timestep range must satisfy 1 <= t_min <= t_max <= T");
    if (!(lambda >= 0.0)) throw ConfigError("ReFL lambda must be >= 0");
    if (!(lr > 0.0)) throw ConfigError("ReFL lr must be positive");
    if (batch == 0) throw ConfigError("ReFL batch must be positive");
    if (rho < 0.0) throw ConfigError("ReFL rho must be >= 0");
    if (epochs < 0) throw ConfigError("ReFL epochs must be >= 0");
    if (!weights.empty() && weights.size() != n_rewards)
      throw ConfigError("ReFL weights must have one entry per reward model");
    if (n_rewards == 0) throw ConfigError("ReFL needs at least one reward model");
  }

  double weight(std::size_t i) const { return weights.empty() ? 1.0 : weights[i]; }
};

/// Whether the category's oracle depends on the scene for this prompt. The
/// spatial and non-spatial oracles are the constant 1 without constraints of
/// their kind; attribute targets exist on every prompt.
inline bool reward_applies(Category c, const Prompt& p) {
  switch (c) {
    case Category::attribute: return p.required_count() > 0;
    case Category::spatial: return !p.spatial.empty();
    case Category::nonspatial: return !p.nonspatial.empty();
  }
  return true;
}

/// cfg with per-reward weights zeroed where the reward does not apply, when
/// mask_inapplicable is set.
inline ReflConfig effective_refl_config(const ReflConfig& cfg, std::span<const RewardModel* const> rewards,
                                        const Prompt& prompt) {
  if (!cfg.mask_inapplicable) return cfg;
  ReflConfig out = cfg;
  out.weights.resize(rewards.size());
  for (std::size_t i = 0; i < rewards.size(); ++i)
    out.weights[i] = reward_applies(rewards[i]->category, prompt) ? cfg.weight(i) : 0.0;
  return out;
}

inline double apply_phi(const ReflConfig& cfg, double r) {
  return cfg.phi == RewardToLoss::negate ? -r : std::max(0.0, cfg.margin - r);
}
inline double apply_phi_grad(const ReflConfig& cfg, double r) {
  if (cfg.phi == RewardToLoss::negate) return -1.0;
  return r < cfg.margin ? -1.0 : 0.0;
}

struct ReflStepResult {
  double loss = 0.0;
  std::vector<double> grads;
  int t = 0;
  std::vector<double> reward_scores;
  SceneVector z_t{};      // state entering the in-scope step
  SceneVector z_prev{};   // z_{t-1} produced by the in-scope step
  SceneVector x0_hat{};
};

/// Reward part of the loss at a fixed in-scope state z_t: builds x0_hat from
/// the single denoiser call at (z_t, t) and, when grad is non-empty,
/// accumulates d loss / d params scaled by `scale`. Returns the loss and
/// fills per-reward scores.
inline double refl_reward_loss_at(const DiffusionModel& model,
                                  std::span<const RewardModel* const> rewards,
                                  const PromptEmbedding& emb, std::span<const double> z_t, int t,
                                  const ReflConfig& cfg, double scale, std::span<double> grad,
                                  std::vector<double>* scores, SceneVector* x0_out = nullptr) {
  const auto in = denoiser_input(z_t, t, emb);
  ForwardCache cache;
  model.net.forward(in, cache);
  const auto eps = cache.output();
  const auto x0 = x0_from_noise(z_t, t, eps, model.schedule);
  if (x0_out) *x0_out = x0;

  const auto rin = reward_input(emb, x0);
  std::array<double, kSceneDim> dx0{};
  double loss = 0.0;
  if (scores) scores->assign(rewards.size(), 0.0);
  ForwardCache rcache;
  std::vector<double> rgrad_params;
  std::array<double, kRewardInputDim> rgrad_in{};
  for (std::size_t i = 0; i < rewards.size(); ++i) {
    const RewardModel& rm = *rewards[i];
    rm.net.forward(rin, rcache);
    const double r = rcache.output()[0];
    if (scores) (*scores)[i] = r;
    const double coeff = cfg.lambda * cfg.weight(i);
    loss += coeff * apply_phi(cfg, r);
    if (grad.empty()) continue;
    const double up[1] = {coeff * apply_phi_grad(cfg, r)};
    rgrad_params.assign(rm.net.param_count(), 0.0);
    rm.net.backward(rcache, up, rgrad_params, rgrad_in);
    for (std::size_t k = 0; k < kSceneDim; ++k) dx0[k] += rgrad_in[kEmbedDim + k];
  }
  if (!grad.empty()) {
    // x0 = (z - s * eps) / a  =>  d loss / d eps = -(s / a) * d loss / d x0
    const double a = std::sqrt(model.schedule.alpha_bar(t));
    const double s = std::sqrt(1.0 - model.schedule.alpha_bar(t));
    std::array<double, kSceneDim> deps{};
    for (std::size_t k = 0; k < kSceneDim; ++k) deps[k] = -(s / a) * dx0[k] * scale;
    model.net.backward(cache, deps, grad);
  }
  return loss;
}

/// Optional pretraining-loss anchor so long runs stay near the data.
struct ReflAnchor {
  const TrainingExample* example = nullptr;
};

/// One ReFL sample: t ~ U[t_min, t_max], z_T ~ N(0, I), gradient-free rollout
/// T -> t+1, then the t -> t-1 step and x0 prediction inside the gradient
/// scope. Randomness is consumed in a fixed order: t, z_T, step noise for
/// T..t, then (only when rho > 0) the anchor's t and eps.
inline ReflStepResult refl_step(const DiffusionModel& model,
                                std::span<const RewardModel* const> rewards, const Prompt& prompt,
                                const ReflConfig& base_cfg, Rng& rng, ReflAnchor anchor = {}) {
  base_cfg.validate(model.schedule.steps(), rewards.size());
  const ReflConfig cfg = effective_refl_config(base_cfg, rewards, prompt);
  if (cfg.rho > 0.0 && anchor.example == nullptr)
    throw ConfigError("ReFL rho > 0 requires a pretraining anchor example");
  const auto emb = embed_prompt(prompt);
  ReflStepResult res;
  res.grads.assign(model.net.param_count(), 0.0);
  res.t = rng.uniform_int(cfg.t_min, cfg.t_max);

  SceneVector z = standard_normal_latent(rng);
  for (int j = model.schedule.steps(); j > res.t; --j) z = denoise_step(model, z, j, emb, rng);
  res.z_t = z;

  if (cfg.lambda > 0.0) {
    res.loss = refl_reward_loss_at(model, rewards, emb, z, res.t, cfg, 1.0, res.grads,
                                   &res.reward_scores, &res.x0_hat);
  } else {
    refl_reward_loss_at(model, rewards, emb, z, res.t, cfg, 0.0, {}, &res.reward_scores, &res.x0_hat);
  }
  // The in-scope step itself; its output feeds diagnostics only.
  const auto eps = model.predict_noise(z, res.t, emb);
  res.z_prev = step_mean(z, res.t, eps, model.schedule);
  add_step_noise(res.z_prev, res.t, model.schedule, rng);

  if (cfg.rho > 0.0) {
    const auto& ex = *anchor.example;
    const int ta = rng.uniform_int(1, model.schedule.steps());
    const auto ea = standard_normal_latent(rng);
    ForwardCache cache;
    res.loss += cfg.rho * denoising_loss_accumulate(model, embed_prompt(ex.prompt), ex.scene, ta,
                                                    ea, cfg.rho, res.grads, cache);
  }
  return res;
}

/// Independent reference for refl_step gradients: unrolls the whole rollout
/// with recorded activations and backpropagates through the chain. Steps
/// above t are severed (no parameter or state gradient) when sever_rollout is
/// set; without severing this is the full backprop-through-sampling gradient.
inline ReflStepResult refl_step_reference(const DiffusionModel& model,
                                          std::span<const RewardModel* const> rewards,
                                          const Prompt& prompt, const ReflConfig& base_cfg, Rng& rng,
                                          bool sever_rollout = true) {
  base_cfg.validate(model.schedule.steps(), rewards.size());
  const ReflConfig cfg = effective_refl_config(base_cfg, rewards, prompt);
  if (cfg.rho > 0.0) throw ConfigError("reference path covers the reward loss only (rho = 0)");
  const auto& sched = model.schedule;
  const auto emb = embed_prompt(prompt);
  ReflStepResult res;
  res.grads.assign(model.net.param_count(), 0.0);
  res.t = rng.uniform_int(cfg.t_min, cfg.t_max);

  struct Record {
    int step;
    ForwardCache cache;
  };
  std::vector<Record> trace;  // steps T..t+1 in execution order
  SceneVector z = standard_normal_latent(rng);
  for (int j = sched.steps(); j > res.t; --j) {
    Record rec{j, {}};
    const auto in = denoiser_input(z, j, emb);
    model.net.forward(in, rec.cache);
    SceneVector eps{};
    std::copy(rec.cache.output().begin(), rec.cache.output().end(), eps.begin());
    z = step_mean(z, j, eps, sched);
    add_step_noise(z, j, sched, rng);
    trace.push_back(std::move(rec));
  }
  res.z_t = z;

  // In-scope step: eps at (z_t, t), x0 from it.
  const auto in = denoiser_input(z, res.t, emb);
  ForwardCache cache;
  model.net.forward(in, cache);
  SceneVector eps{};
  std::copy(cache.output().begin(), cache.output().end(), eps.begin());
  const double a = std::sqrt(sched.alpha_bar(res.t));
  const double s = std::sqrt(1.0 - sched.alpha_bar(res.t));
  const auto x0 = x0_from_noise(z, res.t, eps, sched);
  res.x0_hat = x0;
  res.z_prev = step_mean(z, res.t, eps, sched);
  add_step_noise(res.z_prev, res.t, sched, rng);

  // Reward head: d loss / d x0.
  const auto rin = reward_input(emb, x0);
  std::vector<double> dx0(kSceneDim, 0.0);
  res.reward_scores.assign(rewards.size(), 0.0);
  for (std::size_t i = 0; i < rewards.size(); ++i) {
    const auto g = net_backward(rewards[i]->net, rin, std::vector<double>{1.0});
    const double r = rewards[i]->net.forward(rin)[0];
    res.reward_scores[i] = r;
    const double coeff = cfg.lambda * cfg.weight(i);
    res.loss += coeff * apply_phi(cfg, r);
    for (std::size_t k = 0; k < kSceneDim; ++k)
      dx0[k] += coeff * apply_phi_grad(cfg, r) * g.input[kEmbedDim + k];
  }

  // Through x0 = (z_t - s*eps(z_t)) / a into eps and z_t.
  std::vector<double> deps(kSceneDim), dz(kSceneDim);
  for (std::size_t k = 0; k < kSceneDim; ++k) {
    deps[k] = -(s / a) * dx0[k];
    dz[k] = dx0[k] / a;
  }
  std::vector<double> din(kDenoiserInputDim, 0.0);
  model.net.backward(cache, deps, res.grads, din);
  for (std::size_t k = 0; k < kSceneDim; ++k) dz[k] += din[k];

  if (sever_rollout) return res;

  // Backprop through z_{j-1} = (z_j - k_j eps(z_j)) / sqrt(alpha_j) + noise.
  for (auto it = trace.rbegin(); it != trace.rend(); ++it) {
    const int j = it->step;
    const double kj = sched.beta(j) / std::sqrt(1.0 - sched.alpha_bar(j));
    const double inv = 1.0 / std::sqrt(sched.alpha(j));
    std::vector<double> up(kSceneDim), dz_prev(kSceneDim);
    for (std::size_t k = 0; k < kSceneDim; ++k) {
      up[k] = -kj * inv * dz[k];
      dz_prev[k] = inv * dz[k];
    }
    std::fill(din.begin(), din.end(), 0.0);
    model.net.backward(it->cache, up, res.grads, din);
    for (std::size_t k = 0; k < kSceneDim; ++k) dz[k] = dz_prev[k] + din[k];
  }
  return res;
}

struct ReflReport {
  std::size_t steps = 0;
  std::vector<double> loss_curve;                 // mean loss per optimizer step
  std::vector<std::vector<double>> score_curve;   // per step, mean score per reward model

  nlohmann::json to_json() const {
    return {{"steps", steps}, {"loss_curve", loss_curve}, {"score_curve", score_curve}};
  }
};

/// Adam over mini-batches of refl_step losses. Prompts are shuffled each epoch.
inline std::pair<DiffusionModel, ReflReport> refl_finetune(
    DiffusionModel model, std::span<const RewardModel* const> rewards,
    const std::vector<Prompt>& prompts, const ReflConfig& cfg, Rng& rng,
    const std::vector<TrainingExample>* anchors = nullptr) {
  cfg.validate(model.schedule.steps(), rewards.size());
  if (prompts.empty()) throw DataError("refl_finetune needs at least one prompt");
  if (cfg.rho > 0.0 && (anchors == nullptr || anchors->empty()))
    throw ConfigError("ReFL rho > 0 requires pretraining data");
  ReflReport report;
  AdamState adam(model.net.param_count());
  std::vector<double> grad(model.net.param_count());
  std::vector<std::size_t> order(prompts.size());
  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    std::iota(order.begin(), order.end(), 0);
    std::shuffle(order.begin(), order.end(), rng.engine());
    for (std::size_t start = 0; start < order.size(); start += cfg.batch) {
      const std::size_t end = std::min(order.size(), start + cfg.batch);
      const double batch_scale = 1.0 / static_cast<double>(end - start);
      std::fill(grad.begin(), grad.end(), 0.0);
      double loss = 0.0;
      std::vector<double> mean_scores(rewards.size(), 0.0);
      for (std::size_t b = start; b < end; ++b) {
        ReflAnchor anchor;
        if (cfg.rho > 0.0)
          anchor.example = &(*anchors)[rng.uniform_int(0, static_cast<int>(anchors->size()) - 1)];
        auto res = refl_step(model, rewards, prompts[order[b]], cfg, rng, anchor);
        loss += res.loss;
        for (std::size_t k = 0; k < grad.size(); ++k) grad[k] += res.grads[k];
        for (std::size_t i = 0; i < rewards.size(); ++i) mean_scores[i] += res.reward_scores[i];
      }
      for (double& g : grad) g *= batch_scale;
      for (double& v : mean_scores) v *= batch_scale;
      adam_step(adam, model.net.params(), grad, cfg.lr);
      report.loss_curve.push_back(loss * batch_scale);
      report.score_curve.push_back(std::move(mean_scores));
      ++report.steps;
    }
  }
  return {std::move(model), report};
}

inline nlohmann::json diffusion_to_json(const DiffusionModel& m, const nlohmann::json& hyper = {}) {
  nlohmann::json meta{{"seed", m.seed}, {"hyperparams", hyper}};
  auto j = net_to_json(m.net, meta);
  j["kind"] = "diffusion";
  j["iteration"] = m.iteration;
  j["schedule"] = {{"T", m.schedule.steps()},
                   {"beta_start", m.schedule.beta_start()},
                   {"beta_end", m.schedule.beta_end()}};
  return j;
}

inline DiffusionModel diffusion_from_json(const nlohmann::json& j) {
  try {
    if (j.at("kind").get<std::string>() != "diffusion")
      throw DataError("checkpoint is not a diffusion model");
    DiffusionModel m;
    const auto& s = j.at("schedule");
    m.schedule = NoiseSchedule(s.at("T").get<int>(), s.at("beta_start").get<double>(),
                               s.at("beta_end").get<double>());
    m.net = net_from_json(j);
    check_shape(m.net.input_dim() == kDenoiserInputDim && m.net.output_dim() == kSceneDim,
                "diffusion denoiser must map 68 inputs to 18 outputs");
    m.iteration = j.value("iteration", 0);
    m.seed = j.at("metadata").value("seed", std::uint64_t{0});
    return m;
  } catch (const nlohmann::json::exception& e) {
    throw DataError(std::string("malformed diffusion checkpoint: ") + e.what());
  } catch (const ConfigError& e) {
    throw DataError(e.what());
  }
}

}  // namespace itercomp
