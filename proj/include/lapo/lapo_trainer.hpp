#pragma once

#include <string>
#include <vector>

#include "lapo/rollout.hpp"

namespace lapo {

// Likelihood-ratio nodes with record-time exponent clamping: a saturated
// clamp records a constant (zero gradient), mirroring clamp semantics, and
// is flagged for metrics.
struct RatioNode {
  int node = -1;
  double value = 1.0;
  bool clamped = false;
};

// exp(clamp(logp_new - logp_old, -20, 20)); logp_old enters as a constant.
RatioNode ratio_from_logp(Tape& tape, int logp_new, float logp_old);

// exp(clamp(-sum_k ||z_old_k - z_new_k||^2 / (2 sigma^2), -20, 0)),
// differentiable w.r.t. the new latents.
RatioNode ratio_latent(Tape& tape, int z_new, const std::vector<std::vector<float>>& z_old,
                       double sigma);

// -min(r*A, clip(r, 1-eps_min, 1+eps_max)*A); the advantage is a constant.
// The active branch is selected at record time from forward values, which
// reproduces the min/clip subgradients. *was_clipped reports r outside the
// clip interval.
int clipped_surrogate(Tape& tape, const RatioNode& ratio, float advantage, double eps_min,
                      double eps_max, bool* was_clipped);

struct LossStats {
  int n_steps = 0;
  double loss_action = 0, loss_latent = 0, loss_end = 0, loss_value = 0;
  double ratio_a_min = 1, ratio_a_mean = 1, ratio_a_max = 1;
  double ratio_z_mean = 1, ratio_end_mean = 1;
  double clip_frac = 0;
  int clamp_events = 0;
};

struct TotalLoss {
  int node = -1;
  LossStats stats;
};

// Masked-mean LAPO objective over the given (valid) steps plus the weighted
// value MSE. With lambda1 = lambda3 = 0 and no latents this is exactly the
// action-only PPO loss.
TotalLoss total_loss(Tape& tape, const TapeParams& tp, const TrainConfig& cfg,
                     const std::vector<const RolloutStep*>& steps);

struct EvalPoint {
  int update = 0;
  double seen_sr = 0, holdout_sr = 0;
  double mean_micro_steps = 0;
  std::vector<long> length_hist;
};

struct RlOptions {
  std::vector<TaskSpec> train_tasks;
  std::vector<TaskSpec> eval_seen;
  std::vector<TaskSpec> eval_holdout;  // may be empty
  uint64_t seed = 1;
  int max_updates = 200;
  double target_seen_sr = -1.0;  // early stop at an eval point when reached
  std::string metrics_path;      // JSONL, empty = none
  std::string checkpoint_dir;    // empty = no checkpoints
  int workers = 1;
  bool check_ratio_identity = false;  // pre-update ratio audit per round
  bool zero_reward = false;
  bool dump_rollouts = false;  // write rollout buffers next to metrics
};

struct RlResult {
  int updates_run = 0;
  std::vector<EvalPoint> evals;
  std::vector<double> preupdate_ratio_min, preupdate_ratio_max;  // audit mode
  double max_grad_norm_postclip = 0;
  std::vector<long> first_length_hist, last_length_hist;
  double first_mean_steps = 0, last_mean_steps = 0;  // rollout episode lengths
};

// Online LAPO post-training: collect -> GAE -> epochs x minibatches of
// clipped-surrogate updates with global-norm clipping, greedy evaluation
// every eval_every updates. Throws NumericError on a non-finite loss with
// the last-good checkpoint preserved on disk.
RlResult train_rl(PolicyNet& net, const RlOptions& opt);

}  // namespace lapo
