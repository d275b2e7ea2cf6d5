// End-to-end acceptance run. Prints one PASS/FAIL line per criterion and
// exits non-zero if any criterion fails. Artifacts go to ./acceptance_work.

#include <sys/wait.h>

#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iomanip>
#include <iostream>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

#include "itercomp/config.hpp"
#include "itercomp/diffusion.hpp"
#include "itercomp/iterate.hpp"
#include "itercomp/prefs.hpp"
#include "itercomp/reward.hpp"
#include "itercomp/theory.hpp"

using namespace itercomp;
namespace fs = std::filesystem;

namespace {

const fs::path kWork = fs::absolute("acceptance_work");

struct Outcome {
  bool pass = false;
  std::string detail;
};

struct CommandResult {
  int code = -1;
  std::string out;
};

std::string quote(const std::string& s) { return "'" + s + "'"; }

CommandResult run_cli_process(const std::string& args) {
  const std::string cmd = quote(ITERCOMP_CLI_PATH) + " " + args + " 2>>" + quote((kWork / "cli_stderr.log").string());
  CommandResult r;
  FILE* pipe = popen(cmd.c_str(), "r");
  if (!pipe) return r;
  char buf[4096];
  std::size_t n;
  while ((n = fread(buf, 1, sizeof buf, pipe)) > 0) r.out.append(buf, n);
  const int status = pclose(pipe);
  r.code = WIFEXITED(status) ? WEXITSTATUS(status) : -1;
  return r;
}

CommandResult must_run(const std::string& args) {
  auto r = run_cli_process(args);
  if (r.code != 0) throw std::runtime_error("command failed (exit " + std::to_string(r.code) + "): " + args);
  return r;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  if (!in) throw std::runtime_error("missing file " + p.string());
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

std::string fmt(double v, int precision = 4) {
  std::ostringstream os;
  os << std::setprecision(precision) << v;
  return os.str();
}

double seconds_since(std::chrono::steady_clock::time_point t0) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

unsigned jobs() { return std::max(1u, std::thread::hardware_concurrency()); }

std::string jobs_flag() { return " --jobs " + std::to_string(jobs()); }

// Criterion 1 ------------------------------------------------------------------

bool check_counts(const nlohmann::json& stats, std::size_t texts, std::size_t images, std::size_t pairs,
                  std::string& detail) {
  const auto& t = stats.at("totals");
  const auto a = t.at("texts").get<std::size_t>();
  const auto b = t.at("images").get<std::size_t>();
  const auto c = t.at("pairs").get<std::size_t>();
  detail += std::to_string(a) + "/" + std::to_string(b) + "/" + std::to_string(c);
  return a == texts && b == images && c == pairs;
}

Outcome criterion1() {
  Outcome o;
  must_run("init-config --paper-scale --out " + quote((kWork / "paper.json").string()));
  must_run("init-config --out " + quote((kWork / "default.json").string()));

  auto t0 = std::chrono::steady_clock::now();
  must_run("gen-prefs --config " + quote((kWork / "paper.json").string()) + " --out " +
           quote((kWork / "paper_prefs.jsonl").string()) + " --stats " +
           quote((kWork / "paper_stats.json").string()) + jobs_flag());
  const double t_paper = seconds_since(t0);
  t0 = std::chrono::steady_clock::now();
  must_run("gen-prefs --config " + quote((kWork / "default.json").string()) + " --out " +
           quote((kWork / "default_prefs.jsonl").string()) + " --stats " +
           quote((kWork / "default_stats.json").string()) + jobs_flag());
  const double t_default = seconds_since(t0);

  o.detail = "paper-scale texts/images/pairs ";
  const bool paper = check_counts(read_json_file((kWork / "paper_stats.json").string()), 3500, 21000, 52500, o.detail);
  o.detail += ", default ";
  const bool def = check_counts(read_json_file((kWork / "default_stats.json").string()), 1500, 9000, 22500, o.detail);
  o.detail += ", times " + fmt(t_paper, 3) + " s and " + fmt(t_default, 3) + " s";
  o.pass = paper && def && t_paper < 120 && t_default < 120;
  return o;
}

// Criterion 2 ------------------------------------------------------------------

Outcome criterion2() {
  Outcome o;
  const auto t0 = std::chrono::steady_clock::now();
  const auto ds = read_prefs_jsonl((kWork / "default_prefs.jsonl").string());
  const auto gallery = default_gallery();
  const auto rf = ranked_first_proportions(ds, &gallery);
  const double secs = seconds_since(t0);
  bool ok = true;
  for (auto [cat, want] : {std::pair{Category::attribute, std::string("attr-strong")},
                           std::pair{Category::spatial, std::string("spatial-strong")}}) {
    const auto& fr = rf.at(cat);
    const double lead = fr.count(want) ? fr.at(want) : 0.0;
    double runner_up = 0.0;
    for (const auto& [name, f] : fr)
      if (name != want) runner_up = std::max(runner_up, f);
    o.detail += to_string(cat) + ": " + want + " " + fmt(lead, 3) + " vs next " + fmt(runner_up, 3) + "; ";
    ok = ok && lead - runner_up >= 0.10;
  }
  o.detail += "time " + fmt(secs, 3) + " s";
  o.pass = ok && secs < 120;
  return o;
}

// Criterion 3 ------------------------------------------------------------------

RewardSet g_rewards;  // reused by criterion 4

Outcome criterion3() {
  Outcome o;
  const RunConfig config = load_config((kWork / "default.json").string());
  const auto ds = read_prefs_jsonl((kWork / "default_prefs.jsonl").string());
  const Rng base(config.seed);
  const auto t0 = std::chrono::steady_clock::now();
  bool ok = true;
  for (Category c : kCategories) {
    Rng irng = base.child("reward-init-" + to_string(c));
    Rng rrng = base.child("reward-1-" + to_string(c));
    auto init = make_reward_model(c, irng, config.reward.hidden);
    auto [rm, rep] = train_reward(ds, c, config.reward, rrng, std::move(init));
    const bool acc_ok = rep.holdout_accuracy >= 0.90;
    const bool init_ok = std::fabs(rep.initial_train_loss - std::log(2.0)) <= 0.05 &&
                         std::fabs(rep.initial_holdout_loss - std::log(2.0)) <= 0.05;
    o.detail += to_string(c) + " acc " + fmt(rep.holdout_accuracy, 4) + " (" +
                std::to_string(rep.holdout_pairs) + " held-out pairs) init loss " +
                fmt(rep.initial_train_loss, 5) + "; ";
    ok = ok && acc_ok && init_ok;
    g_rewards[c] = std::move(rm);
  }
  const double secs = seconds_since(t0);
  o.detail += "time " + fmt(secs, 3) + " s";
  o.pass = ok && secs < 600;
  return o;
}

// Criterion 4 ------------------------------------------------------------------

Outcome criterion4() {
  Outcome o;
  const auto t0 = std::chrono::steady_clock::now();
  const RunConfig config = load_config((kWork / "default.json").string());
  const auto ds = read_prefs_jsonl((kWork / "default_prefs.jsonl").string());
  if (g_rewards.size() != kCategories.size()) throw std::runtime_error("criterion 3 produced no reward models");
  const auto ptrs = reward_pointers(g_rewards);

  std::vector<TrainingExample> data;
  for (const auto& r : ds.rankings)
    for (const auto& img : r.images) data.push_back({r.prompt, img.scene});
  Rng init(91);
  PretrainHyper h;
  h.steps = 500;
  Rng prng(92);
  const auto model = pretrain(data, h, prng, make_diffusion_model(init, config.diffusion.schedule(),
                                                                 config.diffusion.hidden))
                         .first;

  double fd_worst = 0.0, fd_scaled_worst = 0.0, locality_worst = 0.0;
  for (auto phi : {RewardToLoss::negate, RewardToLoss::relu_margin}) {
    ReflConfig cfg = config.refl;
    cfg.phi = phi;
    for (std::uint64_t seed = 0; seed < 3; ++seed) {
      Rng r0(300 + seed);
      const Prompt p = sample_prompt(r0, kCategories[seed % 3]);
      Rng a(seed), b(seed);
      const auto res = refl_step(model, ptrs, p, cfg, a);
      const auto ref = refl_step_reference(model, ptrs, p, cfg, b);
      if (ref.t != res.t) throw std::runtime_error("reference path drew a different timestep");
      for (std::size_t k = 0; k < res.grads.size(); ++k)
        locality_worst = std::max(locality_worst, std::fabs(res.grads[k] - ref.grads[k]));

      // Central differences of the in-scope loss at the frozen z_t.
      const auto emb = embed_prompt(p);
      const auto eff = effective_refl_config(cfg, ptrs, p);
      DiffusionModel probe = model;
      auto params = probe.net.params();
      double max_grad = 0.0, max_diff = 0.0;
      for (std::size_t k = 0; k < params.size(); ++k) {
        const double keep = params[k];
        const double step = 1e-5;
        params[k] = keep + step;
        const double up = refl_reward_loss_at(probe, ptrs, emb, res.z_t, res.t, eff, 1.0, {}, nullptr);
        params[k] = keep - step;
        const double down = refl_reward_loss_at(probe, ptrs, emb, res.z_t, res.t, eff, 1.0, {}, nullptr);
        params[k] = keep;
        const double numeric = (up - down) / (2.0 * step);
        const double diff = std::fabs(res.grads[k] - numeric);
        fd_worst = std::max(fd_worst, diff / std::max(1.0, std::fabs(numeric)));
        max_grad = std::max(max_grad, std::fabs(numeric));
        max_diff = std::max(max_diff, diff);
      }
      if (max_grad > 0.0) fd_scaled_worst = std::max(fd_scaled_worst, max_diff / max_grad);
    }
  }
  const double secs = seconds_since(t0);
  o.detail = "finite-difference rel error " + fmt(fd_worst, 3) + " (relative to largest gradient " +
             fmt(fd_scaled_worst, 3) + "), severed-path max diff " + fmt(locality_worst, 3) + ", time " +
             fmt(secs, 3) + " s";
  o.pass = fd_worst <= 1e-4 && fd_scaled_worst <= 1e-4 && locality_worst <= 1e-10 && secs < 60;
  return o;
}

// Criteria 5 and 6 -------------------------------------------------------------

const fs::path kIterateDir = kWork / "iterate";

Outcome criterion5() {
  Outcome o;
  fs::remove_all(kIterateDir);
  const auto t0 = std::chrono::steady_clock::now();
  must_run("iterate --config " + quote((kWork / "default.json").string()) + " --workdir " +
           quote(kIterateDir.string()) + jobs_flag() + " > /dev/null");
  const double secs = seconds_since(t0);
  const auto rep = read_json_file((kIterateDir / "report.json").string());
  const auto& rows = rep.at("iterations");
  if (rows.size() != 4) throw std::runtime_error("expected 4 report rows");
  std::vector<double> composite, median_rank;
  for (const auto& r : rows) {
    composite.push_back(r.at("eval").at("composite").get<double>());
    const auto& m = r.at("median_policy_insert_rank");
    median_rank.push_back(m.is_null() ? std::nan("") : m.get<double>());
  }
  bool monotone = true;
  for (std::size_t k = 1; k < composite.size(); ++k) monotone = monotone && composite[k] >= composite[k - 1];
  const double gain = composite.back() - composite.front();
  const bool rank_improves = median_rank[3] < median_rank[1];
  o.detail = "composite";
  for (double c : composite) o.detail += " " + fmt(c, 4);
  o.detail += " (gain " + fmt(gain, 3) + "), median insert rank";
  for (std::size_t k = 1; k < median_rank.size(); ++k) o.detail += " " + fmt(median_rank[k], 3);
  o.detail += ", time " + fmt(secs / 60.0, 3) + " min";
  o.pass = monotone && gain >= 0.05 && rank_improves && secs < 3600;
  return o;
}

bool is_subsequence(const PreferenceRanking& before, const PreferenceRanking& after) {
  std::size_t j = 0;
  for (std::size_t i = 0; i < after.images.size() && j < before.images.size(); ++i) {
    const auto& a = after.images[i];
    const auto& b = before.images[j];
    if (a.scene == b.scene && a.provenance.label() == b.provenance.label()) ++j;
  }
  return j == before.images.size();
}

Outcome criterion6() {
  Outcome o;
  std::size_t checked = 0, violations = 0;
  auto prev = read_prefs_jsonl((kIterateDir / "iter_0" / "prefs.jsonl").string());
  for (int k = 1; fs::exists(kIterateDir / ("iter_" + std::to_string(k)) / "prefs.jsonl"); ++k) {
    const auto next = read_prefs_jsonl((kIterateDir / ("iter_" + std::to_string(k)) / "prefs.jsonl").string());
    if (next.rankings.size() != prev.rankings.size()) throw std::runtime_error("ranking count changed");
    for (std::size_t i = 0; i < prev.rankings.size(); ++i) {
      const auto& a = prev.rankings[i];
      const auto& b = next.rankings[i];
      ++checked;
      if (a.prompt.id != b.prompt.id || b.images.size() != a.images.size() + 1 || !is_subsequence(a, b))
        ++violations;
    }
    prev = next;
  }
  o.detail = std::to_string(checked) + " expanded rankings checked, " + std::to_string(violations) + " violations";
  o.pass = checked == 3 * 1500 && violations == 0;
  return o;
}

// Criteria 7 and 8 -------------------------------------------------------------

Outcome criterion7() {
  Outcome o;
  const auto t0 = std::chrono::steady_clock::now();
  double worst = 0.0;
  for (std::uint64_t i = 0; i < 20; ++i) {
    const auto spec = theory::make_spec(derive_seed(RunConfig{}.seed, i));
    worst = std::max(worst, theory::lemma1_check(spec).residual);
  }
  const double secs = seconds_since(t0);
  o.detail = "max residual " + fmt(worst, 3) + " over 20 specs, time " + fmt(secs, 3) + " s";
  o.pass = worst <= 1e-10 && secs < 10;
  return o;
}

Outcome criterion8() {
  Outcome o;
  const auto t0 = std::chrono::steady_clock::now();
  double worst = 0.0;
  for (std::uint64_t i = 0; i < 20; ++i) {
    const std::uint64_t s = derive_seed(RunConfig{}.seed, i);
    const auto spec = theory::make_spec(s);
    worst = std::max(worst, theory::theorem1_check(theory::random_logits(spec, s), spec));
  }
  const double secs = seconds_since(t0);
  const auto cli = run_cli_process("verify-theory");
  o.detail = "max relative error " + fmt(worst, 3) + " over 20 specs, time " + fmt(secs, 3) +
             " s, verify-theory exit " + std::to_string(cli.code);
  o.pass = worst <= 1e-4 && secs < 60 && cli.code == 0;
  return o;
}

// Criterion 9 ------------------------------------------------------------------

std::vector<fs::path> files_under(const fs::path& root) {
  std::vector<fs::path> out;
  for (const auto& e : fs::recursive_directory_iterator(root))
    if (e.is_regular_file()) out.push_back(fs::relative(e.path(), root));
  std::sort(out.begin(), out.end());
  return out;
}

// Runs the same command pipeline into two directories and compares every
// produced file and every stdout byte for byte. timing.json holds wall-clock
// measurements only and is excluded.
Outcome criterion9() {
  Outcome o;
  RunConfig small;
  for (Category c : kCategories) small.dataset.prompts[c] = 30;
  small.reward.epochs = 20;
  small.reward.warm_start_epochs = 10;
  small.diffusion.pretrain.steps = 400;
  small.refl.prompts = 80;
  small.eval.prompts_per_category = 30;
  small.eval.bootstrap = 100;
  small.iterations = 2;
  const auto cfg_path = kWork / "determinism_config.json";
  write_json_file(cfg_path.string(), config_to_json(small));

  auto pipeline = [&](const fs::path& d) {
    fs::remove_all(d);
    fs::create_directories(d);
    const std::string cfg = " --config " + quote(cfg_path.string());
    auto p = [&](const char* name) { return quote((d / name).string()); };
    std::string log;
    log += must_run("init-config" + cfg + " --out " + p("init.json")).out;
    log += must_run("gen-prefs" + cfg + " --out " + p("prefs.jsonl") + " --stats " + p("stats.json")).out;
    log += must_run("pretrain" + cfg + " --data " + p("prefs.jsonl") + " --out " + p("base.json")).out;
    std::string rewards;
    for (Category c : kCategories) {
      const std::string out = "rm_" + to_string(c) + ".json";
      log += must_run("train-reward" + cfg + " --category " + to_string(c) + " --data " + p("prefs.jsonl") +
                      " --out " + p(out.c_str()))
                 .out;
      rewards += (rewards.empty() ? "" : ",") + (d / out).string();
    }
    log += must_run("refl" + cfg + " --base " + p("base.json") + " --rewards " + quote(rewards) + " --out " +
                    p("tuned.json"))
               .out;
    log += must_run("eval" + cfg + " --model " + p("tuned.json") + " --out " + p("eval.json")).out;
    log += must_run("iterate" + cfg + " --workdir " + p("run") + jobs_flag()).out;
    log += must_run("report --workdir " + p("run")).out;
    log += run_cli_process("verify-theory --trials 5").out;
    std::ofstream(d / "stdout.txt") << log;
  };
  // Same command lines in the same directory; each result is moved aside.
  const auto live = kWork / "determinism_run";
  const auto a = kWork / "determinism_a";
  const auto b = kWork / "determinism_b";
  for (const auto& dest : {a, b}) {
    pipeline(live);
    fs::remove_all(dest);
    fs::rename(live, dest);
  }

  const auto fa = files_under(a);
  const auto fb = files_under(b);
  std::size_t compared = 0, mismatched = 0;
  std::string first_bad;
  if (fa != fb) {
    ++mismatched;
    first_bad = "file lists differ";
  }
  for (const auto& rel : fa) {
    if (rel.filename() == "timing.json") continue;
    if (!fs::exists(b / rel)) continue;
    ++compared;
    if (slurp(a / rel) != slurp(b / rel)) {
      ++mismatched;
      if (first_bad.empty()) first_bad = rel.string();
    }
  }
  o.detail = std::to_string(compared) + " artifacts compared, " + std::to_string(mismatched) + " differ";
  if (!first_bad.empty()) o.detail += " (first: " + first_bad + ")";
  o.pass = mismatched == 0 && compared > 20;
  return o;
}

}  // namespace

int main() {
  fs::create_directories(kWork);
  const std::vector<std::pair<std::string, std::function<Outcome()>>> criteria = {
      {"dataset accounting", criterion1},      {"strength separation", criterion2},
      {"reward training", criterion3},         {"ReFL gradient correctness", criterion4},
      {"iterative improvement", criterion5},   {"rank preservation", criterion6},
      {"reparameterization identity", criterion7}, {"gradient decomposition", criterion8},
      {"determinism", criterion9}};
  int failures = 0;
  std::vector<std::string> lines;
  for (std::size_t i = 0; i < criteria.size(); ++i) {
    Outcome o;
    try {
      o = criteria[i].second();
    } catch (const std::exception& e) {
      o.pass = false;
      o.detail = std::string("error: ") + e.what();
    }
    if (!o.pass) ++failures;
    const std::string line = std::string(o.pass ? "PASS" : "FAIL") + " criterion " + std::to_string(i + 1) + " (" +
                             criteria[i].first + "): " + o.detail;
    std::cout << line << std::endl;
    lines.push_back(line);
  }
  std::cout << "\nsummary\n";
  for (const auto& l : lines) std::cout << l.substr(0, l.find(':')) << '\n';
  std::cout << (failures == 0 ? "all criteria passed" : std::to_string(failures) + " criteria failed") << std::endl;
  return failures == 0 ? 0 : 1;
}
