// lapo-lab: demo generation, latent precompute, SFT warm-up, online RL,
// evaluation, ablation sweeps, and rollout replay in one binary.

#include <cstdio>
#include <filesystem>
#include <iostream>
#include <thread>

#include <CLI11.hpp>

#include "lapo/experiment.hpp"
#include "lapo/metrics.hpp"
#include "lapo/rollout.hpp"

namespace fs = std::filesystem;
using namespace lapo;

namespace {

struct CommonOpts {
  std::string config_path;
  std::string out;
  std::string suite;
  std::string baseline;
  std::string latent_mode;
  int holdout = -2;  // -2 = keep config value
  uint64_t seed = 1;
  bool seed_given = false;
  bool deterministic = false;
  int jobs = -1;
};

void add_common(CLI::App* cmd, CommonOpts& o) {
  cmd->add_option("--config", o.config_path, "JSON experiment config");
  cmd->add_option("--out", o.out, "output root (default $LAPO_LAB_DIR or ./runs)");
  cmd->add_option("--suite", o.suite, "reach|pickplace|sequence|all");
  cmd->add_option("--holdout-variant", o.holdout, "variant excluded from RL training");
  cmd->add_option("--baseline", o.baseline, "lapo|ppo-action-only");
  cmd->add_option("--latent-mode", o.latent_mode, "adaptive|fixed:N");
  cmd->add_flag("--deterministic", o.deterministic, "single-worker bit-exact mode");
  cmd->add_option("--jobs", o.jobs, "worker threads (rollouts / sweep runs)");
  cmd->add_option("--seed", o.seed, "run seed")->each([&](const std::string&) {
    o.seed_given = true;
  });
}

ExperimentConfig resolve_config(const CommonOpts& o) {
  ExperimentConfig ec;
  if (!o.config_path.empty()) ec = load_experiment_config(o.config_path);
  if (!o.suite.empty()) ec.suites = {o.suite};
  if (o.holdout != -2) ec.holdout_variant = o.holdout;
  if (!o.baseline.empty()) ec.baseline = o.baseline;
  if (o.deterministic) ec.deterministic = true;
  if (o.jobs >= 0) ec.train.workers = o.jobs;
  if (o.seed_given) ec.seeds = {o.seed};
  if (!o.latent_mode.empty()) {
    if (o.latent_mode == "adaptive") {
      ec.train.adaptive = true;
    } else if (o.latent_mode.rfind("fixed:", 0) == 0) {
      ec.train.adaptive = false;
      ec.train.fixed_n_z = std::stoi(o.latent_mode.substr(6));
    } else {
      throw ConfigError("bad --latent-mode: " + o.latent_mode);
    }
  }
  ec.validate();
  return ec;
}

uint64_t run_seed(const CommonOpts& o, const ExperimentConfig& ec) {
  return o.seed_given ? o.seed : ec.seeds.front();
}

std::string joined(const std::string& root, const std::string& leaf) {
  return (fs::path(root) / leaf).string();
}

void print_eval_table(const ExperimentConfig& ec, const std::string& ckpt, uint64_t seed) {
  PolicyNet net = make_policy(ec, seed);
  net.params().load_into(ckpt);
  double total_sr = 0;
  int rows = 0;
  std::printf("%-10s %-8s %-8s %-12s\n", "suite", "variant", "SR", "mean_steps");
  for (Suite s : ec.suite_list()) {
    for (int v = 0; v < ec.train.env.variants_per_suite; ++v) {
      const EvalOutcome r = eval_policy(net, {{s, v}}, ec.train.eval_rollouts_per_variant, seed);
      std::printf("%-10s %-8d %-8.2f %-12.1f\n", suite_name(s), v, r.success_rate,
                  r.mean_micro_steps);
      total_sr += r.success_rate;
      ++rows;
    }
    const std::vector<TaskSpec> all = [&] {
      std::vector<TaskSpec> t;
      for (int v = 0; v < ec.train.env.variants_per_suite; ++v) t.push_back({s, v});
      return t;
    }();
    const EvalOutcome agg = eval_policy(net, all, ec.train.eval_rollouts_per_variant, seed);
    std::printf("%-10s %-8s %-8.2f %-12.1f  length_hist:[", suite_name(s), "all",
                agg.success_rate, agg.mean_micro_steps);
    for (size_t i = 0; i < agg.length_hist.size(); ++i)
      std::printf("%s%ld", i ? "," : "", agg.length_hist[i]);
    std::printf("]\n");
  }
  if (rows > 0) std::printf("overall SR: %.3f\n", total_sr / rows);
}

struct SweepAxis {
  std::string key;
  std::vector<double> values;
};

SweepAxis parse_axis(const std::string& spec) {
  const auto eq = spec.find('=');
  if (eq == std::string::npos) throw ConfigError("bad --grid spec: " + spec);
  SweepAxis ax;
  ax.key = spec.substr(0, eq);
  std::string rest = spec.substr(eq + 1);
  size_t pos = 0;
  while (pos < rest.size()) {
    const size_t comma = rest.find(',', pos);
    const std::string tok =
        comma == std::string::npos ? rest.substr(pos) : rest.substr(pos, comma - pos);
    ax.values.push_back(std::stod(tok));
    if (comma == std::string::npos) break;
    pos = comma + 1;
  }
  if (ax.values.empty()) throw ConfigError("empty --grid axis: " + spec);
  return ax;
}

void apply_axis(TrainConfig& cfg, const std::string& key, double v) {
  if (key == "sigma") {
    cfg.sigma = v;
  } else if (key == "lambda1") {
    cfg.lambda1 = v;
  } else if (key == "lambda2") {
    cfg.lambda2 = v;
  } else if (key == "lambda3") {
    cfg.lambda3 = v;
  } else if (key == "nz") {
    cfg.adaptive = false;
    cfg.fixed_n_z = static_cast<int>(v);
  } else if (key == "m") {
    cfg.m_candidates = static_cast<int>(v);
  } else if (key == "beta") {
    cfg.beta = v;
  } else {
    throw ConfigError("unknown sweep key: " + key + " (sigma, lambda1..3, nz, m, beta)");
  }
}

std::string value_tag(double v) {
  char buf[32];
  if (v == static_cast<long>(v))
    std::snprintf(buf, sizeof buf, "%ld", static_cast<long>(v));
  else
    std::snprintf(buf, sizeof buf, "%g", v);
  return buf;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"lapo-lab: latent reasoning-before-acting policy lab"};
  app.require_subcommand(1);

  CommonOpts o;
  std::string demo_file, cache_file, checkpoint, rollout_file, name;
  int demos_per_task = -1, updates = -1;
  double target_sr = -1;
  bool render = false, holdout_only = false, dump_rollouts = false;
  std::vector<std::string> grid_specs;

  auto* c_gen = app.add_subcommand("gen-demos", "write expert demonstrations");
  add_common(c_gen, o);
  c_gen->add_option("--demo-file", demo_file, "output demo file path");
  c_gen->add_option("--demos-per-task", demos_per_task, "expert trajectories per variant");

  auto* c_pre = app.add_subcommand("precompute-latents", "build the latent target cache");
  add_common(c_pre, o);
  c_pre->add_option("--demo-file", demo_file, "input demo file path");
  c_pre->add_option("--cache-file", cache_file, "output cache file path");

  auto* c_sft = app.add_subcommand("sft", "supervised warm-up");
  add_common(c_sft, o);
  c_sft->add_option("--demo-file", demo_file);
  c_sft->add_option("--cache-file", cache_file);
  c_sft->add_option("--name", name, "run directory name");

  auto* c_rl = app.add_subcommand("rl", "online LAPO / PPO post-training");
  add_common(c_rl, o);
  c_rl->add_option("--checkpoint", checkpoint, "warm checkpoint")->required();
  c_rl->add_option("--updates", updates, "max update rounds");
  c_rl->add_option("--target-sr", target_sr, "early stop at this seen success rate");
  c_rl->add_option("--name", name, "run directory name");
  c_rl->add_flag("--dump-rollouts", dump_rollouts, "write LAPOROL1 buffers per update");

  auto* c_eval = app.add_subcommand("eval", "greedy evaluation of a checkpoint");
  add_common(c_eval, o);
  c_eval->add_option("--checkpoint", checkpoint)->required();
  c_eval->add_flag("--holdout-only", holdout_only, "evaluate only the holdout variant");
  c_eval->add_flag("--render", render, "ASCII-render the first episode");

  auto* c_abl = app.add_subcommand("ablate", "sweep hyperparameters over RL runs");
  add_common(c_abl, o);
  c_abl->add_option("--checkpoint", checkpoint, "warm checkpoint")->required();
  c_abl->add_option("--grid", grid_specs, "axis as key=v1,v2,... (repeatable)")->required();
  c_abl->add_option("--updates", updates, "max update rounds per run");

  auto* c_rep = app.add_subcommand("replay", "ASCII replay of a rollout dump");
  add_common(c_rep, o);
  c_rep->add_option("--rollouts", rollout_file, "LAPOROL1 file")->required();
  c_rep->add_flag("--render", render, "render every micro-step");

  CLI11_PARSE(app, argc, argv);

  try {
    ExperimentConfig ec = resolve_config(o);
    if (demos_per_task > 0) ec.train.demos_per_task = demos_per_task;
    const std::string root = resolve_out_root(o.out);
    fs::create_directories(root);
    const uint64_t seed = run_seed(o, ec);
    const std::string demos = demo_file.empty() ? joined(root, ec.demo_file) : demo_file;
    const std::string cache = cache_file.empty() ? joined(root, ec.cache_file) : cache_file;

    if (*c_gen) {
      gen_demos(ec, demos, seed);
      std::printf("wrote %s\n", demos.c_str());
    } else if (*c_pre) {
      precompute_latents(ec, demos, cache);
      std::printf("wrote %s\n", cache.c_str());
    } else if (*c_sft) {
      const std::string dir =
          joined(root, name.empty() ? "sft_seed" + std::to_string(seed) : name);
      write_run_manifest(dir, ec, "sft", seed);
      const std::string ckpt = run_sft(ec, demos, cache, dir, seed);
      std::printf("checkpoint: %s\n", ckpt.c_str());
    } else if (*c_rl) {
      const std::string dir = joined(
          root, name.empty() ? ec.baseline + "_rl_seed" + std::to_string(seed) : name);
      write_run_manifest(dir, ec, "rl", seed);
      RlRunOptions ropt;
      ropt.max_updates_override = updates;
      ropt.target_seen_sr = target_sr;
      ropt.dump_rollouts = dump_rollouts;
      const RlResult res = run_rl(ec, checkpoint, dir, seed, ropt);
      std::printf("updates: %d  final seen SR: %.3f  holdout SR: %.3f\n", res.updates_run,
                  res.evals.back().seen_sr, res.evals.back().holdout_sr);
      std::printf("metrics: %s\n", (dir + "/rl_metrics.jsonl").c_str());
    } else if (*c_eval) {
      if (holdout_only) {
        const EvalOutcome r = run_eval(ec, checkpoint, seed, true);
        std::printf("holdout SR: %.3f  mean_steps: %.1f\n", r.success_rate, r.mean_micro_steps);
      } else {
        print_eval_table(ec, checkpoint, seed);
      }
      if (render) {
        PolicyNet net = make_policy(ec, seed);
        net.params().load_into(checkpoint);
        GridEnv env(ec.train.env);
        const TaskSpec task{ec.suite_list().front(), 0};
        std::vector<float> obs = env.reset(task, seed);
        std::printf("%s", render_ascii(env.state(), ec.train.env).c_str());
        Rng dummy(0);
        while (!env.done()) {
          TrunkCache tc(net);
          const auto gen = net.generate_latents(
              obs, task.task_id(ec.train.env),
              ec.train.adaptive ? PolicyNet::LatentMode::kAdaptiveExit
                                : PolicyNet::LatentMode::kFixed,
              tc, nullptr);
          (void)gen;
          const auto dec = net.decode_actions(tc);
          const auto toks = sample_action_tokens(dec.logits, 0.0, dummy);
          const auto r = env.step_chunk(
              detokenize(ActionTokens{toks}, ec.train.env.horizon, ec.train.env.action_dim));
          obs = r.observation;
          std::printf("%s", render_ascii(env.state(), ec.train.env).c_str());
        }
      }
    } else if (*c_abl) {
      std::vector<SweepAxis> axes;
      for (const auto& s : grid_specs) axes.push_back(parse_axis(s));
      // Cartesian expansion.
      std::vector<std::vector<std::pair<std::string, double>>> runs = {{}};
      for (const auto& ax : axes) {
        std::vector<std::vector<std::pair<std::string, double>>> next;
        for (const auto& base : runs)
          for (double v : ax.values) {
            auto r = base;
            r.emplace_back(ax.key, v);
            next.push_back(std::move(r));
          }
        runs = std::move(next);
      }
      const int jobs = std::max(1, o.jobs < 0 ? 1 : o.jobs);
      std::vector<std::thread> pool;
      std::vector<std::exception_ptr> errors(runs.size());
      auto launch = [&](size_t idx) {
        try {
          ExperimentConfig rec = ec;
          std::string tag = "ablate";
          for (const auto& [k, v] : runs[idx]) {
            apply_axis(rec.train, k, v);
            tag += "_" + k + "=" + value_tag(v);
          }
          rec.validate();
          const std::string dir = joined(root, tag + "_seed" + std::to_string(seed));
          write_run_manifest(dir, rec, "ablate", seed);
          RlRunOptions ropt;
          ropt.max_updates_override = updates;
          run_rl(rec, checkpoint, dir, seed, ropt);
          std::printf("done %s\n", dir.c_str());
        } catch (...) {
          errors[idx] = std::current_exception();
        }
      };
      for (size_t i = 0; i < runs.size(); i += static_cast<size_t>(jobs)) {
        pool.clear();
        for (size_t j = i; j < std::min(runs.size(), i + static_cast<size_t>(jobs)); ++j)
          pool.emplace_back(launch, j);
        for (auto& th : pool) th.join();
      }
      for (auto& e : errors)
        if (e) std::rethrow_exception(e);
    } else if (*c_rep) {
      const RolloutBuffer buf = load_rollouts(rollout_file, ec.train);
      for (size_t i = 0; i < buf.trajs.size(); ++i) {
        const auto& traj = buf.trajs[i];
        std::printf("trajectory %zu: %s v%d %s micro=%d\n", i, suite_name(traj.task.suite),
                    traj.task.variant, traj.success ? "SUCCESS" : "fail", traj.micro_steps);
        if (!render) continue;
        EnvState s = decode_obs(traj.task, traj.steps[0].obs, ec.train.env);
        std::printf("%s", render_ascii(s, ec.train.env).c_str());
        bool done = false;
        for (const auto& step : traj.steps) {
          if (done) break;
          const ActionChunk chunk = detokenize(ActionTokens{step.tokens},
                                               ec.train.env.horizon, ec.train.env.action_dim);
          for (int h = 0; h < ec.train.env.horizon && !done; ++h) {
            s = micro_step(s, chunk.at(h, 0), chunk.at(h, 1), chunk.at(h, 2), ec.train.env);
            std::printf("%s", render_ascii(s, ec.train.env).c_str());
            if (state_success(s) || s.step_count >= s.t_max) done = true;
          }
        }
      }
    }
  } catch (const NumericError& e) {
    std::cerr << "numeric abort: " << e.what() << "\n";
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
