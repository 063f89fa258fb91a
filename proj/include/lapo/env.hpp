#pragma once

#include <array>
#include <cstdint>
#include <string>
#include <vector>

#include "lapo/codec.hpp"
#include "lapo/errors.hpp"

namespace lapo {

enum class Suite : uint32_t { kReach = 0, kPickPlace = 1, kSequence = 2 };

const char* suite_name(Suite s);
Suite suite_from_name(const std::string& name);

struct EnvParams {
  int grid = 8;
  int variants_per_suite = 10;
  int horizon = 8;     // H micro-steps per chunk
  int action_dim = 3;  // (dx, dy, gripper)
  int t_max_reach = 48;
  int t_max_pickplace = 96;
  int t_max_sequence = 192;

  int t_max(Suite s) const {
    switch (s) {
      case Suite::kReach: return t_max_reach;
      case Suite::kPickPlace: return t_max_pickplace;
      case Suite::kSequence: return t_max_sequence;
    }
    return t_max_reach;
  }
};

struct TaskSpec {
  Suite suite = Suite::kReach;
  int variant = 0;

  int task_id(const EnvParams& p) const {
    return static_cast<int>(suite) * p.variants_per_suite + variant;
  }
  bool operator==(const TaskSpec&) const = default;
};

// Full simulator state. Everything is integral, so dynamics are bit-exact.
struct EnvState {
  Suite suite = Suite::kReach;
  int variant = 0;
  int agent_x = 0, agent_y = 0;
  bool gripper = false;
  int n_objects = 0;
  std::array<int, 2> obj_x{}, obj_y{};
  std::array<bool, 2> held{};
  int n_goals = 0;
  std::array<int, 2> goal_x{}, goal_y{};
  int progress = 0;    // completed sub-goals (latched)
  int step_count = 0;  // micro-steps consumed
  int t_max = 0;

  bool operator==(const EnvState&) const = default;
};

struct StepResult {
  std::vector<float> observation;
  float reward = 0.0f;
  bool done = false;
  bool success = false;
  int micro_steps = 0;  // consumed by this chunk
};

constexpr int kObsSize = 21;

bool state_success(const EnvState& s);

// One micro-step of the pure dynamics: sign-quantized movement with wall
// clamping, then gripper grab/release, then sub-goal latching.
EnvState micro_step(const EnvState& s, float dx, float dy, float grip, const EnvParams& p);

std::vector<float> encode_obs(const EnvState& s, const EnvParams& p);
EnvState decode_obs(const TaskSpec& task, const std::vector<float>& obs, const EnvParams& p);

std::string render_ascii(const EnvState& s, const EnvParams& p);

class GridEnv {
 public:
  explicit GridEnv(EnvParams p = {}) : params_(p) {}

  std::vector<float> reset(const TaskSpec& task, uint64_t seed);
  StepResult step_chunk(const ActionChunk& chunk);

  const EnvState& state() const { return state_; }
  const EnvParams& params() const { return params_; }
  bool done() const { return done_; }

 private:
  EnvParams params_;
  EnvState state_;
  bool done_ = true;
};

// Expert demonstrations ------------------------------------------------------

struct DemoStep {
  std::vector<float> obs;
  ActionChunk chunk;
  int real_micro = 0;  // micro-steps actually executed; the rest is padding
};

struct DemoTrajectory {
  TaskSpec task;
  std::vector<DemoStep> steps;
  // Dense micro-step states s_0..s_L, kept in memory for the latent oracle;
  // not serialized (the demo file is replayable).
  std::vector<EnvState> micro_states;
  bool success = false;
};

// One greedy micro-action from the current state (the scripted expert's
// decision rule).
struct ExpertAction {
  float dx, dy, grip;
};
ExpertAction expert_action(const EnvState& s, const EnvParams& p);

// Greedy Manhattan planner; throws Error if the task cannot be completed
// within T_max (indicates a malformed variant).
DemoTrajectory scripted_expert(const TaskSpec& task, uint64_t seed, const EnvParams& p);

// Demo file (magic LAPODEM1), little-endian:
//   u32 trajectory count, then per trajectory:
//   u32 suite, u32 variant, u32 step count,
//   per step: kObsSize f32 observation, H*A f32 actions.
void save_demos(const std::string& path, const std::vector<DemoTrajectory>& demos,
                const EnvParams& p);

struct LoadedDemo {
  TaskSpec task;
  std::vector<DemoStep> steps;  // real_micro filled by replay
};

std::vector<LoadedDemo> load_demos(const std::string& path, const EnvParams& p);

// Recomputes the dense micro-step states of a loaded demo by decoding the
// first observation and replaying the stored chunks through the dynamics.
std::vector<EnvState> replay_demo_states(const LoadedDemo& demo, const EnvParams& p);

}  // namespace lapo
