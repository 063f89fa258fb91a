#pragma once

#include <string>
#include <vector>

#include "lapo/config.hpp"
#include "lapo/eval.hpp"
#include "lapo/lapo_trainer.hpp"
#include "lapo/sft.hpp"

namespace lapo {

// Output root: --out flag if given, else $LAPO_LAB_DIR, else ./runs.
std::string resolve_out_root(const std::string& cli_out);

// Every run directory gets a run.json manifest (config digest, seed, code
// version, command) sufficient to reproduce the run in deterministic mode.
void write_run_manifest(const std::string& dir, const ExperimentConfig& ec,
                        const std::string& command, uint64_t seed);

const char* tool_version();

// Task enumeration honoring the holdout split.
std::vector<TaskSpec> seen_tasks(const ExperimentConfig& ec);
std::vector<TaskSpec> holdout_tasks(const ExperimentConfig& ec);

int effective_workers(const ExperimentConfig& ec);

// Expert demos for every (suite, variant, demo index), suite-major order.
void gen_demos(const ExperimentConfig& ec, const std::string& demo_path, uint64_t seed);

void precompute_latents(const ExperimentConfig& ec, const std::string& demo_path,
                        const std::string& cache_path);

// Warm-up from demos + cache; writes sft_metrics.jsonl and warm.ckpt under
// out_dir. Returns the checkpoint path.
std::string run_sft(const ExperimentConfig& ec, const std::string& demo_path,
                    const std::string& cache_path, const std::string& out_dir, uint64_t seed);

struct RlRunOptions {
  double target_seen_sr = -1.0;
  int max_updates_override = -1;
  bool check_ratio_identity = false;
  bool dump_rollouts = false;
};

// Online RL from a warm checkpoint; writes rl_metrics.jsonl and checkpoints
// under out_dir.
RlResult run_rl(const ExperimentConfig& ec, const std::string& warm_ckpt,
                const std::string& out_dir, uint64_t seed, const RlRunOptions& ropt = {});

// Greedy evaluation of a checkpoint over the configured suites.
EvalOutcome run_eval(const ExperimentConfig& ec, const std::string& ckpt, uint64_t seed,
                     bool holdout_only = false);

// Builds a fresh policy for the experiment config (baseline flag applied).
PolicyNet make_policy(const ExperimentConfig& ec, uint64_t init_seed);

}  // namespace lapo
