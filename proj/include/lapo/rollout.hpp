#pragma once

#include <string>
#include <vector>

#include "lapo/env.hpp"
#include "lapo/policy.hpp"

namespace lapo {

// One decision step of an online rollout; values are recorded with the same
// tape forward used at update time, so first-epoch likelihood ratios are
// exactly one.
struct RolloutStep {
  std::vector<float> obs;
  int task_id = 0;
  std::vector<std::vector<float>> z_old;  // latents conditioning the actions
  int m = -1;                             // sampled candidate index (adaptive)
  std::vector<int> tokens;                // N_a action tokens
  float logp_a_old = 0.0f;                // sum over tokens
  float logp_end_old = 0.0f;
  float value_old = 0.0f;
  float reward = 0.0f;
  bool done = false;
  bool valid = true;
  // Filled by compute_gae:
  float advantage = 0.0f;
  float ret = 0.0f;
};

struct RolloutTraj {
  TaskSpec task;
  std::vector<RolloutStep> steps;
  bool success = false;
  int micro_steps = 0;
};

struct RolloutBuffer {
  std::vector<RolloutTraj> trajs;
  int max_steps = 0;  // padded length of every trajectory

  int valid_step_count() const;
};

struct CollectOptions {
  PolicyNet::LatentMode mode = PolicyNet::LatentMode::kAdaptiveSample;
  int n_traj = 64;
  uint64_t seed = 0;
  int workers = 1;          // trajectories are striped across workers
  bool zero_reward = false; // reward-ablation hook for tests
};

// Shared rollout/update forward: teacher-forces z_old and reads out the
// quantities every loss term needs. All node ids live on the caller's tape.
struct JointNodes {
  int latent_out = -1;   // (n_z, d_model), -1 when n_z == 0
  int logp_actions = -1; // scalar at the configured sampling temperature
  int logp_end = -1;     // scalar, -1 outside adaptive mode
  int value = -1;        // (1,1)
};

JointNodes build_joint(Tape& tape, const TapeParams& tp, const TrainConfig& cfg,
                       const std::vector<float>& obs, int task_id,
                       const std::vector<std::vector<float>>& z_old,
                       const std::vector<int>& tokens, int m, bool adaptive);

// Runs the policy against a pool of envs; trajectories end on done and are
// right-padded with valid=false steps. Deterministic in (tasks, seed)
// regardless of worker count: every trajectory owns a derived RNG stream
// and results merge in trajectory order.
RolloutBuffer collect_rollouts(const PolicyNet& net, const std::vector<TaskSpec>& tasks,
                               const CollectOptions& opt);

// delta_t = r_t + gamma*v_{t+1}*(1-done_t) - v_t
// A_t = delta_t + gamma*lambda*(1-done_t)*A_{t+1}; returns r^_t = A_t + v_t.
// Optional normalization to zero mean / unit std over valid steps afterward.
void compute_gae(RolloutBuffer& buf, double gamma, double lambda, bool normalize);

// Rollout dump (magic LAPOROL1) for offline inspection and ASCII replay.
void save_rollouts(const std::string& path, const RolloutBuffer& buf, const TrainConfig& cfg);
RolloutBuffer load_rollouts(const std::string& path, const TrainConfig& cfg);

}  // namespace lapo
