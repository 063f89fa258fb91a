#include "lapo/eval.hpp"

#include "lapo/codec.hpp"
#include "lapo/rng.hpp"

namespace lapo {

EvalOutcome eval_episodes(const EnvParams& p, const std::vector<TaskSpec>& tasks,
                          int rollouts_per_task, uint64_t seed, int n_candidates,
                          const ChunkPolicy& policy) {
  EvalOutcome out;
  out.length_hist.assign(static_cast<size_t>(std::max(1, n_candidates)), 0);
  long total_micro = 0;
  int successes = 0;
  for (const auto& task : tasks) {
    for (int r = 0; r < rollouts_per_task; ++r) {
      GridEnv env(p);
      std::vector<float> obs =
          env.reset(task, derive_seed(seed, static_cast<uint64_t>(task.task_id(p)),
                                      static_cast<uint64_t>(r)));
      bool success = false;
      int micro = 0;
      while (!env.done()) {
        int length_idx = -1;
        const ActionChunk chunk = policy(env, obs, &length_idx);
        if (length_idx >= 0 && length_idx < n_candidates)
          ++out.length_hist[static_cast<size_t>(length_idx)];
        const StepResult sr = env.step_chunk(chunk);
        micro += sr.micro_steps;
        success = sr.success;
        obs = sr.observation;
      }
      successes += success ? 1 : 0;
      total_micro += micro;
      ++out.episodes;
    }
  }
  if (out.episodes > 0) {
    out.success_rate = static_cast<double>(successes) / out.episodes;
    out.mean_micro_steps = static_cast<double>(total_micro) / out.episodes;
  }
  return out;
}

EvalOutcome eval_policy(const PolicyNet& net, const std::vector<TaskSpec>& tasks,
                        int rollouts_per_task, uint64_t seed) {
  const TrainConfig& cfg = net.cfg();
  const auto mode = cfg.adaptive ? PolicyNet::LatentMode::kAdaptiveExit
                                 : PolicyNet::LatentMode::kFixed;
  Rng dummy(0);  // greedy decoding draws nothing from it
  ChunkPolicy policy = [&](const GridEnv& env, const std::vector<float>& obs, int* length_idx) {
    TrunkCache cache(net);
    const TaskSpec task{env.state().suite, env.state().variant};
    const auto gen = net.generate_latents(obs, task.task_id(cfg.env), mode, cache, nullptr);
    *length_idx = gen.m;
    const auto dec = net.decode_actions(cache);
    const auto tokens = sample_action_tokens(dec.logits, 0.0, dummy);
    return detokenize(ActionTokens{tokens}, cfg.env.horizon, cfg.env.action_dim);
  };
  return eval_episodes(cfg.env, tasks, rollouts_per_task, seed, cfg.m_candidates, policy);
}

EvalOutcome eval_expert(const EnvParams& p, const std::vector<TaskSpec>& tasks,
                        int rollouts_per_task, uint64_t seed) {
  ChunkPolicy policy = [&](const GridEnv& env, const std::vector<float>&, int*) {
    // Simulate the greedy controller for the next H micro-steps.
    EnvState s = env.state();
    ActionChunk chunk;
    chunk.horizon = p.horizon;
    chunk.action_dim = p.action_dim;
    for (int h = 0; h < p.horizon; ++h) {
      if (state_success(s) || s.step_count >= s.t_max) {
        const size_t n = chunk.values.size();
        for (int c = 0; c < p.action_dim; ++c)
          chunk.values.push_back(n >= static_cast<size_t>(p.action_dim)
                                     ? chunk.values[n - static_cast<size_t>(p.action_dim) +
                                                    static_cast<size_t>(c)]
                                     : 0.0f);
        continue;
      }
      const ExpertAction a = expert_action(s, p);
      chunk.values.insert(chunk.values.end(), {a.dx, a.dy, a.grip});
      s = micro_step(s, a.dx, a.dy, a.grip, p);
    }
    return chunk;
  };
  return eval_episodes(p, tasks, rollouts_per_task, seed, 1, policy);
}

}  // namespace lapo
