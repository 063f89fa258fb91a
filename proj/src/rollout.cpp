#include "lapo/rollout.hpp"

#include <algorithm>
#include <cmath>
#include <thread>

#include "lapo/codec.hpp"
#include "lapo/io.hpp"

namespace lapo {

int RolloutBuffer::valid_step_count() const {
  int n = 0;
  for (const auto& t : trajs)
    for (const auto& s : t.steps) n += s.valid ? 1 : 0;
  return n;
}

JointNodes build_joint(Tape& tape, const TapeParams& tp, const TrainConfig& cfg,
                       const std::vector<float>& obs, int task_id,
                       const std::vector<std::vector<float>>& z_old,
                       const std::vector<int>& tokens, int m, bool adaptive) {
  PolicyGraph g(tape, tp, cfg);
  g.trunk(obs, task_id, z_old, true);
  JointNodes out;
  const int n_z = static_cast<int>(z_old.size());
  if (n_z > 0) out.latent_out = g.latent_outputs(n_z);
  out.logp_actions = g.action_logprob_sum(tokens, cfg.action_temperature);
  if (adaptive && m >= 0) out.logp_end = g.end_logprob(n_z, true);
  out.value = g.value();
  return out;
}

namespace {

RolloutTraj run_one_trajectory(const PolicyNet& net, const TaskSpec& task,
                               const CollectOptions& opt, uint64_t traj_seed) {
  const TrainConfig& cfg = net.cfg();
  Rng rng(derive_seed(traj_seed, 0xAC710ull));
  GridEnv env(cfg.env);
  std::vector<float> obs = env.reset(task, derive_seed(traj_seed, 0xE57ull));

  RolloutTraj traj;
  traj.task = task;
  TrunkCache cache(net);
  const bool adaptive = opt.mode == PolicyNet::LatentMode::kAdaptiveSample;

  while (!env.done()) {
    RolloutStep step;
    step.obs = obs;
    step.task_id = task.task_id(cfg.env);

    const auto gen = net.generate_latents(obs, step.task_id, opt.mode, cache, &rng);
    const auto dec = net.decode_actions(cache);
    step.tokens = sample_action_tokens(dec.logits, cfg.action_temperature, rng);
    step.m = gen.m;
    step.z_old.assign(gen.latents.begin(), gen.latents.begin() + gen.n_used);

    // Record log-probabilities and the value with the same tape forward the
    // update phase uses; this is what makes first-epoch ratios exactly 1.
    {
      Tape tape;
      const TapeParams tp = TapeParams::push(tape, net.params());
      const JointNodes jn = build_joint(tape, tp, cfg, obs, step.task_id, step.z_old,
                                        step.tokens, step.m, adaptive);
      step.logp_a_old = tape.scalar_value(jn.logp_actions);
      step.logp_end_old = jn.logp_end >= 0 ? tape.scalar_value(jn.logp_end) : 0.0f;
      step.value_old = tape.scalar_value(jn.value);
    }

    const StepResult r = env.step_chunk(detokenize(ActionTokens{step.tokens},
                                                   cfg.env.horizon, cfg.env.action_dim));
    step.reward = opt.zero_reward ? 0.0f : r.reward;
    step.done = r.done;
    traj.micro_steps += r.micro_steps;
    traj.success = r.success;
    obs = r.observation;
    traj.steps.push_back(std::move(step));
  }
  return traj;
}

}  // namespace

RolloutBuffer collect_rollouts(const PolicyNet& net, const std::vector<TaskSpec>& tasks,
                               const CollectOptions& opt) {
  if (tasks.empty()) throw Error("collect_rollouts: no tasks");
  RolloutBuffer buf;
  buf.trajs.resize(static_cast<size_t>(opt.n_traj));

  const int workers = std::max(1, opt.workers);
  auto work = [&](int w) {
    for (int i = w; i < opt.n_traj; i += workers) {
      const TaskSpec task = tasks[static_cast<size_t>(i) % tasks.size()];
      try {
        buf.trajs[static_cast<size_t>(i)] =
            run_one_trajectory(net, task, opt, derive_seed(opt.seed, 0x7Aull, i));
      } catch (const std::exception& e) {
        throw Error("rollout trajectory " + std::to_string(i) + ": " + e.what());
      }
    }
  };
  if (workers == 1) {
    work(0);
  } else {
    std::vector<std::thread> pool;
    std::vector<std::exception_ptr> errors(static_cast<size_t>(workers));
    for (int w = 0; w < workers; ++w)
      pool.emplace_back([&, w] {
        try {
          work(w);
        } catch (...) {
          errors[static_cast<size_t>(w)] = std::current_exception();
        }
      });
    for (auto& th : pool) th.join();
    for (auto& e : errors)
      if (e) std::rethrow_exception(e);
  }

  for (const auto& t : buf.trajs)
    buf.max_steps = std::max(buf.max_steps, static_cast<int>(t.steps.size()));
  for (auto& t : buf.trajs) {
    while (static_cast<int>(t.steps.size()) < buf.max_steps) {
      RolloutStep pad;
      pad.valid = false;
      t.steps.push_back(std::move(pad));
    }
  }
  return buf;
}

void compute_gae(RolloutBuffer& buf, double gamma, double lambda, bool normalize) {
  for (auto& traj : buf.trajs) {
    int n = 0;
    while (n < static_cast<int>(traj.steps.size()) && traj.steps[static_cast<size_t>(n)].valid)
      ++n;
    double acc = 0.0;
    for (int t = n - 1; t >= 0; --t) {
      auto& s = traj.steps[static_cast<size_t>(t)];
      const double not_done = s.done ? 0.0 : 1.0;
      const double v_next =
          t + 1 < n ? static_cast<double>(traj.steps[static_cast<size_t>(t + 1)].value_old) : 0.0;
      const double delta = static_cast<double>(s.reward) + gamma * v_next * not_done -
                           static_cast<double>(s.value_old);
      acc = delta + gamma * lambda * not_done * acc;
      s.advantage = static_cast<float>(acc);
      s.ret = static_cast<float>(acc + static_cast<double>(s.value_old));
    }
  }
  if (!normalize) return;
  double sum = 0.0, sq = 0.0;
  int count = 0;
  for (const auto& traj : buf.trajs)
    for (const auto& s : traj.steps)
      if (s.valid) {
        sum += s.advantage;
        sq += static_cast<double>(s.advantage) * s.advantage;
        ++count;
      }
  if (count == 0) throw Error("compute_gae: no valid steps");
  const double mean = sum / count;
  const double var = std::max(0.0, sq / count - mean * mean);
  const double inv = 1.0 / (std::sqrt(var) + 1e-8);
  for (auto& traj : buf.trajs)
    for (auto& s : traj.steps)
      if (s.valid) s.advantage = static_cast<float>((s.advantage - mean) * inv);
}

void save_rollouts(const std::string& path, const RolloutBuffer& buf, const TrainConfig& cfg) {
  BinWriter w(path);
  w.magic("LAPOROL1");
  w.u32(static_cast<uint32_t>(buf.trajs.size()));
  const size_t n_actions = static_cast<size_t>(cfg.n_actions());
  for (const auto& t : buf.trajs) {
    w.u32(static_cast<uint32_t>(t.task.suite));
    w.u32(static_cast<uint32_t>(t.task.variant));
    w.u8(t.success ? 1 : 0);
    w.u32(static_cast<uint32_t>(t.micro_steps));
    uint32_t n_valid = 0;
    for (const auto& s : t.steps) n_valid += s.valid ? 1 : 0;
    w.u32(n_valid);
    for (const auto& s : t.steps) {
      if (!s.valid) continue;
      if (s.tokens.size() != n_actions) throw IoError("save_rollouts: malformed step");
      w.f32s(s.obs.data(), s.obs.size());
      w.u32(static_cast<uint32_t>(s.z_old.size()));
      w.u32(static_cast<uint32_t>(s.m));
      for (int tok : s.tokens) w.u8(static_cast<uint8_t>(tok));
      w.f32(s.reward);
      w.u8(s.done ? 1 : 0);
    }
  }
  w.close();
}

RolloutBuffer load_rollouts(const std::string& path, const TrainConfig& cfg) {
  BinReader r(path);
  r.expect_magic("LAPOROL1");
  RolloutBuffer buf;
  const uint32_t n = r.u32();
  for (uint32_t i = 0; i < n; ++i) {
    RolloutTraj t;
    t.task.suite = static_cast<Suite>(r.u32());
    t.task.variant = static_cast<int>(r.u32());
    t.success = r.u8() != 0;
    t.micro_steps = static_cast<int>(r.u32());
    const uint32_t steps = r.u32();
    for (uint32_t k = 0; k < steps; ++k) {
      RolloutStep s;
      s.obs.resize(kObsSize);
      r.f32s(s.obs.data(), s.obs.size());
      const uint32_t nz = r.u32();
      s.z_old.resize(nz);  // latent payloads are not serialized
      s.m = static_cast<int>(r.u32());
      s.tokens.resize(static_cast<size_t>(cfg.n_actions()));
      for (auto& tok : s.tokens) tok = r.u8();
      s.reward = r.f32();
      s.done = r.u8() != 0;
      s.task_id = t.task.task_id(cfg.env);
      t.steps.push_back(std::move(s));
    }
    buf.max_steps = std::max(buf.max_steps, static_cast<int>(t.steps.size()));
    buf.trajs.push_back(std::move(t));
  }
  r.expect_eof();
  return buf;
}

}  // namespace lapo
