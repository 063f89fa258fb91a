#include "lapo/experiment.hpp"

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <thread>

#include <json.hpp>

namespace lapo {

namespace fs = std::filesystem;

const char* tool_version() { return "lapo-lab 0.1.0"; }

std::string resolve_out_root(const std::string& cli_out) {
  if (!cli_out.empty()) return cli_out;
  if (const char* env = std::getenv("LAPO_LAB_DIR"); env != nullptr && *env != '\0')
    return env;
  return "runs";
}

void write_run_manifest(const std::string& dir, const ExperimentConfig& ec,
                        const std::string& command, uint64_t seed) {
  fs::create_directories(dir);
  nlohmann::json j;
  j["tool"] = tool_version();
  j["command"] = command;
  j["seed"] = seed;
  j["deterministic"] = ec.deterministic;
  char digest[32];
  std::snprintf(digest, sizeof digest, "%016llx",
                static_cast<unsigned long long>(config_digest(ec)));
  j["config_digest"] = digest;
  j["config"] = nlohmann::json::parse(experiment_config_to_json(ec));
  std::ofstream f(dir + "/run.json");
  if (!f) throw IoError("cannot write manifest in " + dir);
  f << j.dump(2) << "\n";
}

std::vector<TaskSpec> seen_tasks(const ExperimentConfig& ec) {
  std::vector<TaskSpec> out;
  for (Suite s : ec.suite_list())
    for (int v = 0; v < ec.train.env.variants_per_suite; ++v)
      if (v != ec.holdout_variant) out.push_back({s, v});
  return out;
}

std::vector<TaskSpec> holdout_tasks(const ExperimentConfig& ec) {
  std::vector<TaskSpec> out;
  if (ec.holdout_variant < 0) return out;
  for (Suite s : ec.suite_list()) out.push_back({s, ec.holdout_variant});
  return out;
}

int effective_workers(const ExperimentConfig& ec) {
  if (ec.deterministic) return 1;
  if (ec.train.workers > 0) return ec.train.workers;
  const unsigned hw = std::thread::hardware_concurrency();
  return static_cast<int>(std::min(8u, hw == 0 ? 1u : hw));
}

PolicyNet make_policy(const ExperimentConfig& ec, uint64_t init_seed) {
  TrainConfig cfg = ec.train;
  if (ec.baseline == "ppo-action-only") cfg.apply_action_only_baseline();
  return PolicyNet(cfg, init_seed);
}

void gen_demos(const ExperimentConfig& ec, const std::string& demo_path, uint64_t seed) {
  std::vector<DemoTrajectory> demos;
  for (Suite s : ec.suite_list())
    for (int v = 0; v < ec.train.env.variants_per_suite; ++v)
      for (int d = 0; d < ec.train.demos_per_task; ++d)
        demos.push_back(scripted_expert(
            {s, v}, derive_seed(seed, static_cast<uint64_t>(s) * 100 + v, d), ec.train.env));
  save_demos(demo_path, demos, ec.train.env);
}

void precompute_latents(const ExperimentConfig& ec, const std::string& demo_path,
                        const std::string& cache_path) {
  const auto demos = load_demos(demo_path, ec.train.env);
  const TeacherNet teacher(ec.train.teacher_seed, kObsSize, ec.train.teacher_hidden,
                           ec.train.teacher_dim);
  const LatentCache cache = LatentCache::precompute(demos, teacher, ec.train.env,
                                                    ec.train.d_model, ec.train.n_max,
                                                    ec.train.delta_z);
  cache.save(cache_path);
}

std::string run_sft(const ExperimentConfig& ec, const std::string& demo_path,
                    const std::string& cache_path, const std::string& out_dir, uint64_t seed) {
  fs::create_directories(out_dir);
  const auto demos = load_demos(demo_path, ec.train.env);
  const SftDataset data = SftDataset::build(demos, ec.train.env);
  const LatentCache cache = LatentCache::load(cache_path);

  PolicyNet net = make_policy(ec, seed);
  train_sft(net, data, cache, seed, out_dir + "/sft_metrics.jsonl");
  const std::string ckpt = out_dir + "/warm.ckpt";
  net.params().save(ckpt);
  return ckpt;
}

RlResult run_rl(const ExperimentConfig& ec, const std::string& warm_ckpt,
                const std::string& out_dir, uint64_t seed, const RlRunOptions& ropt) {
  fs::create_directories(out_dir);
  PolicyNet net = make_policy(ec, seed);
  net.params().load_into(warm_ckpt);
  net.params().adam_step = 0;  // fresh optimizer state for the RL phase
  for (int i = 0; i < net.params().count(); ++i) {
    auto& g = net.params().group(i);
    std::fill(g.adam_m.data.begin(), g.adam_m.data.end(), 0.0f);
    std::fill(g.adam_v.data.begin(), g.adam_v.data.end(), 0.0f);
  }

  RlOptions opt;
  opt.train_tasks = seen_tasks(ec);
  opt.eval_seen = seen_tasks(ec);
  opt.eval_holdout = holdout_tasks(ec);
  opt.seed = seed;
  opt.max_updates = ropt.max_updates_override > 0 ? ropt.max_updates_override
                                                  : ec.train.rl_updates;
  opt.target_seen_sr = ropt.target_seen_sr;
  opt.metrics_path = out_dir + "/rl_metrics.jsonl";
  opt.checkpoint_dir = out_dir;
  opt.workers = effective_workers(ec);
  opt.check_ratio_identity = ropt.check_ratio_identity;
  opt.dump_rollouts = ropt.dump_rollouts;
  return train_rl(net, opt);
}

EvalOutcome run_eval(const ExperimentConfig& ec, const std::string& ckpt, uint64_t seed,
                     bool holdout_only) {
  PolicyNet net = make_policy(ec, seed);
  net.params().load_into(ckpt);
  const auto tasks = holdout_only ? holdout_tasks(ec) : seen_tasks(ec);
  if (tasks.empty()) throw Error("run_eval: no tasks selected");
  return eval_policy(net, tasks, ec.train.eval_rollouts_per_variant, seed);
}

}  // namespace lapo
