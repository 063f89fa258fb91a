#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "lapo/env.hpp"

namespace lapo {

// Every hyperparameter in one validated record. Defaults are the desk-scale
// working point; the learning rates are scaled up from the large-model
// values because this policy is ~10^4x smaller (see README).
struct TrainConfig {
  // architecture
  int d_model = 64;
  int n_heads = 2;
  int n_blocks = 2;
  int n_prompt = 4;
  int d_task_embed = 16;
  int mlp_mult = 4;

  // latent reasoning
  int n_max = 8;
  int m_candidates = 4;
  double p_exit = 0.99;
  double beta = 1.0;          // length-sampling temperature
  double sigma = 1.0;         // latent likelihood width
  double sigma_explore = 0.0; // rollout latent noise (0 = deterministic latents)
  bool adaptive = true;
  int fixed_n_z = 8;          // used when adaptive == false

  // teacher / latent targets
  uint64_t teacher_seed = 7777;
  int teacher_dim = 256;
  int teacher_hidden = 128;
  int delta_z = 1;  // micro-steps between future-state targets

  // environment
  EnvParams env;

  // RL
  double gamma = 0.99;
  double gae_lambda = 0.95;
  double eps_min = 0.2;
  double eps_max = 0.28;
  double lambda1 = 0.1;  // latent surrogate weight
  double lambda2 = 1.0;  // value loss weight
  double lambda3 = 0.1;  // transition surrogate weight
  double action_temperature = 1.6;
  int rollout_trajectories = 64;
  int minibatches = 4;
  int epochs = 4;
  double actor_lr = 3e-4;
  double value_lr_mult = 10.0;
  double grad_clip = 10.0;
  int eval_every = 5;
  bool advantage_norm = true;
  int rl_updates = 200;
  int eval_rollouts_per_variant = 10;

  // SFT warm-up
  int sft_steps = 800;
  int sft_batch = 32;
  double sft_lr = 1e-3;
  double sft_weight_decay = 0.01;
  double sft_min_lr_ratio = 0.1;
  int demos_per_task = 1;

  // optimizer
  double adam_beta1 = 0.9;
  double adam_beta2 = 0.999;
  double adam_eps = 1e-8;

  // execution
  int workers = 0;  // 0 = hardware concurrency (capped), 1 under --deterministic

  int n_actions() const { return env.horizon * env.action_dim; }
  int d_head() const { return d_model / n_heads; }
  // Candidate exit positions: n_max * {1..M} / M.
  std::vector<int> candidates() const;
  int candidate_index_of(int n_z) const;  // -1 when n_z is not a candidate

  void validate() const;
  void apply_action_only_baseline();  // N_z = 0, lambda1 = lambda3 = 0
};

struct ExperimentConfig {
  TrainConfig train;
  std::string demo_file = "demos.bin";
  std::string cache_file = "latents.bin";
  std::string checkpoint_dir = "checkpoints";
  std::string metrics_dir = "metrics";
  std::vector<std::string> suites = {"reach"};
  int holdout_variant = -1;  // -1 = no holdout
  std::vector<uint64_t> seeds = {1};
  bool deterministic = false;
  std::string baseline = "lapo";  // or "ppo-action-only"

  std::vector<Suite> suite_list() const;
  void validate() const;
};

// Strict JSON loader: unknown keys are rejected at every level.
ExperimentConfig load_experiment_config(const std::string& path);
std::string experiment_config_to_json(const ExperimentConfig& ec);
uint64_t config_digest(const ExperimentConfig& ec);

}  // namespace lapo
