#pragma once

// Exact-likelihood discrete diffusion sandbox. With a handful of states and
// steps every trajectory can be enumerated, so the reward reparameterization
// under trajectory tilting and the two-term decomposition of the gradient of
// the pairwise preference objective can be checked to rounding error.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <vector>

#include <json.hpp>

#include "itercomp/error.hpp"
#include "itercomp/rng.hpp"

namespace itercomp::theory {

using Trajectory = std::vector<int>;  // x_0, x_1, ..., x_T

/// Chain over `states` values with `steps` reverse transitions per context.
/// Rows are indexed (context, t in 1..steps, from = x_t) and give the
/// distribution of x_{t-1}. The terminal x_T is uniform.
struct DiscreteDiffusionSpec {
  int states = 4;
  int steps = 2;
  int contexts = 2;
  double beta = 1.0;
  std::vector<double> ref;      // reference chain probabilities, row-stochastic
  std::vector<double> rewards;  // R(c, x0), contexts x states

  std::size_t row_count() const {
    return static_cast<std::size_t>(contexts) * steps * states;
  }
  std::size_t table_size() const { return row_count() * states; }
  std::size_t row(int c, int t, int from) const {
    return (static_cast<std::size_t>(c) * steps + (t - 1)) * states + from;
  }
  double reward(int c, int x0) const { return rewards[static_cast<std::size_t>(c) * states + x0]; }
};

/// Row-wise softmax of a logit table.
inline std::vector<double> softmax_rows(const std::vector<double>& logits, int states) {
  std::vector<double> p(logits.size());
  for (std::size_t r = 0; r * states < logits.size(); ++r) {
    const double* l = logits.data() + r * states;
    const double mx = *std::max_element(l, l + states);
    double z = 0.0;
    for (int k = 0; k < states; ++k) z += std::exp(l[k] - mx);
    for (int k = 0; k < states; ++k) p[r * states + k] = std::exp(l[k] - mx) / z;
  }
  return p;
}

inline std::vector<double> log_table(const std::vector<double>& p) {
  std::vector<double> out(p.size());
  std::transform(p.begin(), p.end(), out.begin(), [](double v) { return std::log(v); });
  return out;
}

/// Seeded spec: reference rows are softmax of standard normal logits (strictly
/// positive), rewards uniform in [-1, 1].
inline DiscreteDiffusionSpec make_spec(std::uint64_t seed, int states = 4, int steps = 2,
                                       int contexts = 2, double beta = 1.0) {
  DiscreteDiffusionSpec s;
  s.states = states;
  s.steps = steps;
  s.contexts = contexts;
  s.beta = beta;
  Rng rng(derive_seed(seed, "theory-spec"));
  std::vector<double> logits(s.table_size());
  for (double& v : logits) v = rng.normal();
  s.ref = softmax_rows(logits, states);
  s.rewards.resize(static_cast<std::size_t>(contexts) * states);
  for (double& r : s.rewards) r = rng.uniform(-1.0, 1.0);
  return s;
}

inline std::vector<double> random_logits(const DiscreteDiffusionSpec& s, std::uint64_t seed) {
  Rng rng(derive_seed(seed, "theory-theta"));
  std::vector<double> theta(s.table_size());
  for (double& v : theta) v = rng.normal();
  return theta;
}

/// Logits whose softmax reproduces the reference chain.
inline std::vector<double> reference_logits(const DiscreteDiffusionSpec& s) { return log_table(s.ref); }

inline constexpr std::size_t kTrajectoryBudget = 1000000;

/// Every x_{0:T} in lexicographic order (x_0 most significant).
inline std::vector<Trajectory> enumerate_trajectories(int states, int steps) {
  if (states < 1 || steps < 0) throw ConfigError("trajectory enumeration needs states >= 1, steps >= 0");
  double count = std::pow(static_cast<double>(states), steps + 1);
  if (count > static_cast<double>(kTrajectoryBudget))
    throw ConfigError("trajectory enumeration exceeds budget of 1e6");
  std::vector<Trajectory> out;
  out.reserve(static_cast<std::size_t>(count));
  Trajectory cur(steps + 1, 0);
  while (true) {
    out.push_back(cur);
    int pos = steps;
    while (pos >= 0 && ++cur[pos] == states) cur[pos--] = 0;
    if (pos < 0) break;
  }
  return out;
}

inline std::vector<Trajectory> enumerate_trajectories(const DiscreteDiffusionSpec& s) {
  return enumerate_trajectories(s.states, s.steps);
}

/// p(x_T) * prod_{t=T..1} p(x_{t-1} | x_t, c) for a row-stochastic table.
inline double trajectory_prob(const std::vector<double>& table, const DiscreteDiffusionSpec& s,
                              const Trajectory& x, int c) {
  double p = 1.0 / s.states;
  for (int t = s.steps; t >= 1; --t) p *= table[s.row(c, t, x[t]) * s.states + x[t - 1]];
  return p;
}

inline double log_sigmoid(double u) {
  // log sigma(u) = -softplus(-u)
  return -(std::max(-u, 0.0) + std::log1p(std::exp(-std::fabs(u))));
}

inline double sigmoid(double u) {
  if (u >= 0.0) return 1.0 / (1.0 + std::exp(-u));
  const double e = std::exp(u);
  return e / (1.0 + e);
}

// Lemma: reward reparameterization ---------------------------------------------

struct Lemma1Result {
  double residual = 0.0;      // max over (c, x0)
  double max_mass_error = 0.0;  // |sum p* - 1|
  std::vector<double> log_partition;  // log Z(c)
};

/// Tilts the reference chain by exp(R / beta) at the trajectory level and
/// checks R = beta E_{p*(x_{1:T} | x0)}[log p*/p_ref] + beta log Z per (c, x0).
inline Lemma1Result lemma1_check(const DiscreteDiffusionSpec& s) {
  const auto trajs = enumerate_trajectories(s);
  Lemma1Result res;
  for (int c = 0; c < s.contexts; ++c) {
    std::vector<double> pref(trajs.size());
    double z = 0.0;
    for (std::size_t a = 0; a < trajs.size(); ++a) {
      pref[a] = trajectory_prob(s.ref, s, trajs[a], c);
      z += pref[a] * std::exp(s.reward(c, trajs[a][0]) / s.beta);
    }
    res.log_partition.push_back(std::log(z));
    std::vector<double> pstar(trajs.size());
    double mass = 0.0;
    for (std::size_t a = 0; a < trajs.size(); ++a) {
      pstar[a] = pref[a] * std::exp(s.reward(c, trajs[a][0]) / s.beta) / z;
      mass += pstar[a];
    }
    res.max_mass_error = std::max(res.max_mass_error, std::fabs(mass - 1.0));
    for (int x0 = 0; x0 < s.states; ++x0) {
      double marginal = 0.0;
      for (std::size_t a = 0; a < trajs.size(); ++a)
        if (trajs[a][0] == x0) marginal += pstar[a];
      double expect = 0.0;
      for (std::size_t a = 0; a < trajs.size(); ++a)
        if (trajs[a][0] == x0)
          expect += (pstar[a] / marginal) * (std::log(pstar[a]) - std::log(pref[a]));
      const double rhs = s.beta * expect + s.beta * std::log(z);
      res.residual = std::max(res.residual, std::fabs(s.reward(c, x0) - rhs));
    }
  }
  return res;
}

// Pairwise objective and its gradient ------------------------------------------

/// Per-context tables used by the objective: trajectory probabilities under
/// p_theta, log-ratios against p_ref, rewards of x0, and score functions.
struct ContextTables {
  std::vector<double> prob;
  std::vector<double> log_ratio;
  std::vector<double> reward;
  std::vector<std::vector<double>> score;  // d log p_theta(traj) / d theta
};

inline ContextTables context_tables(const std::vector<double>& theta, const DiscreteDiffusionSpec& s,
                                    const std::vector<Trajectory>& trajs, int c, bool with_scores) {
  const auto p = softmax_rows(theta, s.states);
  ContextTables ct;
  ct.prob.resize(trajs.size());
  ct.log_ratio.resize(trajs.size());
  ct.reward.resize(trajs.size());
  if (with_scores) ct.score.assign(trajs.size(), std::vector<double>(theta.size(), 0.0));
  for (std::size_t a = 0; a < trajs.size(); ++a) {
    const auto& x = trajs[a];
    ct.prob[a] = trajectory_prob(p, s, x, c);
    ct.log_ratio[a] = std::log(ct.prob[a]) - std::log(trajectory_prob(s.ref, s, x, c));
    ct.reward[a] = s.reward(c, x[0]);
    if (!with_scores) continue;
    for (int t = s.steps; t >= 1; --t) {
      const std::size_t r = s.row(c, t, x[t]);
      for (int k = 0; k < s.states; ++k)
        ct.score[a][r * s.states + k] += (k == x[t - 1] ? 1.0 : 0.0) - p[r * s.states + k];
    }
  }
  return ct;
}

/// Winner of the ordered pair (a, b): a when R(a) >= R(b), else b.
inline bool first_wins(const ContextTables& ct, std::size_t a, std::size_t b) {
  return ct.reward[a] >= ct.reward[b];
}

/// J(theta) = mean_c sum_{a,b} p(a) p(b) log sigma(beta (lr_w - lr_l)).
inline double objective_J(const std::vector<double>& theta, const DiscreteDiffusionSpec& s) {
  const auto trajs = enumerate_trajectories(s);
  double j = 0.0;
  for (int c = 0; c < s.contexts; ++c) {
    const auto ct = context_tables(theta, s, trajs, c, false);
    double jc = 0.0;
    for (std::size_t a = 0; a < trajs.size(); ++a)
      for (std::size_t b = 0; b < trajs.size(); ++b) {
        const bool aw = first_wins(ct, a, b);
        const double lw = aw ? ct.log_ratio[a] : ct.log_ratio[b];
        const double ll = aw ? ct.log_ratio[b] : ct.log_ratio[a];
        jc += ct.prob[a] * ct.prob[b] * log_sigmoid(s.beta * (lw - ll));
      }
    j += jc / s.contexts;
  }
  return j;
}

struct GradientTerms {
  std::vector<double> score_term;   // T1: (grad log p(w) + grad log p(l)) F
  std::vector<double> direct_term;  // T2: grad F
};

inline GradientTerms theorem1_terms(const std::vector<double>& theta, const DiscreteDiffusionSpec& s) {
  const auto trajs = enumerate_trajectories(s);
  GradientTerms g{std::vector<double>(theta.size(), 0.0), std::vector<double>(theta.size(), 0.0)};
  for (int c = 0; c < s.contexts; ++c) {
    const auto ct = context_tables(theta, s, trajs, c, true);
    for (std::size_t a = 0; a < trajs.size(); ++a)
      for (std::size_t b = 0; b < trajs.size(); ++b) {
        const bool aw = first_wins(ct, a, b);
        const std::size_t w = aw ? a : b;
        const std::size_t l = aw ? b : a;
        const double u = s.beta * (ct.log_ratio[w] - ct.log_ratio[l]);
        const double weight = ct.prob[a] * ct.prob[b] / s.contexts;
        const double f = log_sigmoid(u);
        const double df = (1.0 - sigmoid(u)) * s.beta;
        const auto& sw = ct.score[w];
        const auto& sl = ct.score[l];
        for (std::size_t k = 0; k < theta.size(); ++k) {
          g.score_term[k] += weight * (sw[k] + sl[k]) * f;
          g.direct_term[k] += weight * df * (sw[k] - sl[k]);
        }
      }
  }
  return g;
}

inline std::vector<double> finite_difference_gradient(const std::vector<double>& theta,
                                                      const DiscreteDiffusionSpec& s, double h) {
  std::vector<double> th = theta;
  std::vector<double> g(theta.size());
  for (std::size_t k = 0; k < theta.size(); ++k) {
    const double orig = th[k];
    th[k] = orig + h;
    const double up = objective_J(th, s);
    th[k] = orig - h;
    const double down = objective_J(th, s);
    th[k] = orig;
    g[k] = (up - down) / (2.0 * h);
  }
  return g;
}

inline constexpr double kTheoremStep = 1e-5;

/// Max over logits of |T1 + T2 - dJ/dtheta| / max(1, |dJ/dtheta|), with the
/// gradient taken by central differences.
inline double theorem1_check(const std::vector<double>& theta, const DiscreteDiffusionSpec& s,
                             double h = kTheoremStep) {
  const auto terms = theorem1_terms(theta, s);
  const auto fd = finite_difference_gradient(theta, s, h);
  double worst = 0.0;
  for (std::size_t k = 0; k < theta.size(); ++k) {
    const double analytic = terms.score_term[k] + terms.direct_term[k];
    worst = std::max(worst, std::fabs(analytic - fd[k]) / std::max(1.0, std::fabs(fd[k])));
  }
  return worst;
}

struct TrialResult {
  std::uint64_t seed = 0;
  double lemma1_residual = 0.0;
  double theorem1_error = 0.0;
};

struct TheoryReport {
  double lemma1_residual = 0.0;  // max over trials
  double theorem1_error = 0.0;   // max over trials
  double tol_lemma = 1e-10;
  double tol_theorem = 1e-4;
  bool lemma1_pass = false;
  bool theorem1_pass = false;
  std::vector<TrialResult> trials;

  bool pass() const { return lemma1_pass && theorem1_pass; }

  nlohmann::json to_json() const {
    nlohmann::json t = nlohmann::json::array();
    for (const auto& r : trials)
      t.push_back({{"seed", r.seed},
                   {"lemma1_residual", r.lemma1_residual},
                   {"theorem1_error", r.theorem1_error}});
    return {{"lemma1_residual", lemma1_residual}, {"theorem1_relative_error", theorem1_error},
            {"tol_lemma", tol_lemma},             {"tol_theorem", tol_theorem},
            {"lemma1_pass", lemma1_pass},         {"theorem1_pass", theorem1_pass},
            {"pass", pass()},                     {"trials", t}};
  }
};

/// Runs both checks on `trials` seeded specs with random logits.
inline TheoryReport verify_theory(std::uint64_t seed, int trials, double tol_lemma, double tol_theorem) {
  if (trials < 1) throw ConfigError("verify-theory needs at least one trial");
  TheoryReport rep;
  rep.tol_lemma = tol_lemma;
  rep.tol_theorem = tol_theorem;
  for (int i = 0; i < trials; ++i) {
    const std::uint64_t s = derive_seed(seed, static_cast<std::uint64_t>(i));
    const auto spec = make_spec(s);
    TrialResult tr{s, lemma1_check(spec).residual, theorem1_check(random_logits(spec, s), spec)};
    rep.lemma1_residual = std::max(rep.lemma1_residual, tr.lemma1_residual);
    rep.theorem1_error = std::max(rep.theorem1_error, tr.theorem1_error);
    rep.trials.push_back(tr);
  }
  rep.lemma1_pass = rep.lemma1_residual <= tol_lemma;
  rep.theorem1_pass = rep.theorem1_error <= tol_theorem;
  return rep;
}

}  // namespace itercomp::theory
