#pragma once

#include <functional>
#include <vector>

#include "lapo/policy.hpp"

namespace lapo {

struct EvalOutcome {
  double success_rate = 0;
  double mean_micro_steps = 0;  // unconditional over all rollouts
  std::vector<long> length_hist;  // per candidate index
  int episodes = 0;
};

// One decision: produce the next chunk for the current env state; may report
// the latent-length candidate index via *length_idx (or leave it -1).
using ChunkPolicy =
    std::function<ActionChunk(const GridEnv& env, const std::vector<float>& obs, int* length_idx)>;

EvalOutcome eval_episodes(const EnvParams& p, const std::vector<TaskSpec>& tasks,
                          int rollouts_per_task, uint64_t seed, int n_candidates,
                          const ChunkPolicy& policy);

// Greedy evaluation of a policy: argmax tokens, adaptive-exit latent mode
// when the config is adaptive, fixed length otherwise.
EvalOutcome eval_policy(const PolicyNet& net, const std::vector<TaskSpec>& tasks,
                        int rollouts_per_task, uint64_t seed);

// The scripted expert run through the same harness (self-check).
EvalOutcome eval_expert(const EnvParams& p, const std::vector<TaskSpec>& tasks,
                        int rollouts_per_task, uint64_t seed);

}  // namespace lapo
