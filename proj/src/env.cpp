#include "lapo/env.hpp"

#include <algorithm>
#include <cmath>

#include "lapo/io.hpp"
#include "lapo/rng.hpp"

namespace lapo {

namespace {

constexpr uint64_t kLayoutSeed = 0x4C41504F4C41421Full;  // fixed across runs
constexpr float kMoveDeadzone = 1.0f / 3.0f;

int sign_quantize(float v) {
  if (v > kMoveDeadzone) return 1;
  if (v < -kMoveDeadzone) return -1;
  return 0;
}

int clamp_cell(int v, int grid) { return std::max(0, std::min(grid - 1, v)); }

struct Layout {
  int n_objects = 0;
  std::array<int, 2> obj_x{}, obj_y{};
  int n_goals = 0;
  std::array<int, 2> goal_x{}, goal_y{};

  bool operator==(const Layout&) const = default;
};

Layout draw_layout(Suite suite, Rng& rng, int grid) {
  Layout l;
  switch (suite) {
    case Suite::kReach: l.n_objects = 0; l.n_goals = 1; break;
    case Suite::kPickPlace: l.n_objects = 1; l.n_goals = 1; break;
    case Suite::kSequence: l.n_objects = 2; l.n_goals = 2; break;
  }
  std::vector<int> cells;
  const int need = l.n_objects + l.n_goals;
  while (static_cast<int>(cells.size()) < need) {
    const int c = static_cast<int>(rng.below(static_cast<uint64_t>(grid * grid)));
    if (std::find(cells.begin(), cells.end(), c) == cells.end()) cells.push_back(c);
  }
  int k = 0;
  for (int i = 0; i < l.n_objects; ++i, ++k) {
    l.obj_x[static_cast<size_t>(i)] = cells[static_cast<size_t>(k)] % grid;
    l.obj_y[static_cast<size_t>(i)] = cells[static_cast<size_t>(k)] / grid;
  }
  for (int i = 0; i < l.n_goals; ++i, ++k) {
    l.goal_x[static_cast<size_t>(i)] = cells[static_cast<size_t>(k)] % grid;
    l.goal_y[static_cast<size_t>(i)] = cells[static_cast<size_t>(k)] / grid;
  }
  return l;
}

// Variant layouts are fixed by (suite, variant) alone and guaranteed
// pairwise distinct within a suite.
Layout variant_layout(Suite suite, int variant, const EnvParams& p) {
  if (variant < 0 || variant >= p.variants_per_suite)
    throw Error("env: unknown variant " + std::to_string(variant) + " for suite " +
                suite_name(suite));
  std::vector<Layout> prior;
  Rng rng(derive_seed(kLayoutSeed, static_cast<uint64_t>(suite)));
  for (int v = 0; v <= variant; ++v) {
    Layout l = draw_layout(suite, rng, p.grid);
    while (std::find(prior.begin(), prior.end(), l) != prior.end())
      l = draw_layout(suite, rng, p.grid);
    if (v == variant) return l;
    prior.push_back(l);
  }
  throw Error("env: unreachable");
}

bool subgoal_satisfied(const EnvState& s, int i) {
  if (s.suite == Suite::kReach)
    return s.agent_x == s.goal_x[0] && s.agent_y == s.goal_y[0];
  return s.obj_x[static_cast<size_t>(i)] == s.goal_x[static_cast<size_t>(i)] &&
         s.obj_y[static_cast<size_t>(i)] == s.goal_y[static_cast<size_t>(i)] &&
         !s.held[static_cast<size_t>(i)];
}

}  // namespace

const char* suite_name(Suite s) {
  switch (s) {
    case Suite::kReach: return "reach";
    case Suite::kPickPlace: return "pickplace";
    case Suite::kSequence: return "sequence";
  }
  return "?";
}

Suite suite_from_name(const std::string& name) {
  if (name == "reach") return Suite::kReach;
  if (name == "pickplace") return Suite::kPickPlace;
  if (name == "sequence") return Suite::kSequence;
  throw ConfigError("unknown suite: " + name);
}

bool state_success(const EnvState& s) {
  if (s.suite == Suite::kReach) return subgoal_satisfied(s, 0);
  return s.progress == s.n_goals;
}

EnvState micro_step(const EnvState& s, float dx, float dy, float grip, const EnvParams& p) {
  EnvState n = s;
  n.agent_x = clamp_cell(n.agent_x + sign_quantize(dx), p.grid);
  n.agent_y = clamp_cell(n.agent_y + sign_quantize(dy), p.grid);
  for (int i = 0; i < n.n_objects; ++i) {
    if (n.held[static_cast<size_t>(i)]) {
      n.obj_x[static_cast<size_t>(i)] = n.agent_x;
      n.obj_y[static_cast<size_t>(i)] = n.agent_y;
    }
  }
  if (grip > 0.0f) {
    n.gripper = true;
    bool holding = false;
    for (int i = 0; i < n.n_objects; ++i) holding = holding || n.held[static_cast<size_t>(i)];
    if (!holding) {
      for (int i = 0; i < n.n_objects; ++i) {
        if (n.obj_x[static_cast<size_t>(i)] == n.agent_x &&
            n.obj_y[static_cast<size_t>(i)] == n.agent_y) {
          n.held[static_cast<size_t>(i)] = true;
          break;
        }
      }
    }
  } else {
    n.gripper = false;
    for (int i = 0; i < n.n_objects; ++i) n.held[static_cast<size_t>(i)] = false;
  }
  while (n.progress < n.n_goals && subgoal_satisfied(n, n.progress)) ++n.progress;
  ++n.step_count;
  return n;
}

std::vector<float> encode_obs(const EnvState& s, const EnvParams& p) {
  const float g = static_cast<float>(p.grid);
  std::vector<float> o(kObsSize, 0.0f);
  o[0] = static_cast<float>(s.agent_x) / g;
  o[1] = static_cast<float>(s.agent_y) / g;
  o[2] = s.gripper ? 1.0f : 0.0f;
  for (int i = 0; i < 2; ++i) {
    const size_t base = 3 + static_cast<size_t>(i) * 4;
    if (i < s.n_objects) {
      o[base + 0] = 1.0f;
      o[base + 1] = static_cast<float>(s.obj_x[static_cast<size_t>(i)]) / g;
      o[base + 2] = static_cast<float>(s.obj_y[static_cast<size_t>(i)]) / g;
      o[base + 3] = s.held[static_cast<size_t>(i)] ? 1.0f : 0.0f;
    }
  }
  for (int i = 0; i < 2; ++i) {
    const size_t base = 11 + static_cast<size_t>(i) * 4;
    if (i < s.n_goals) {
      const bool sat = s.suite == Suite::kReach ? subgoal_satisfied(s, 0) : s.progress > i;
      o[base + 0] = 1.0f;
      o[base + 1] = static_cast<float>(s.goal_x[static_cast<size_t>(i)]) / g;
      o[base + 2] = static_cast<float>(s.goal_y[static_cast<size_t>(i)]) / g;
      o[base + 3] = sat ? 1.0f : 0.0f;
    }
  }
  o[19] = static_cast<float>(s.progress) / 2.0f;
  o[20] = static_cast<float>(s.step_count) / static_cast<float>(s.t_max);
  return o;
}

EnvState decode_obs(const TaskSpec& task, const std::vector<float>& obs, const EnvParams& p) {
  if (obs.size() != kObsSize) throw ShapeError("env: observation size mismatch");
  const float g = static_cast<float>(p.grid);
  auto cell = [&](float v) { return static_cast<int>(std::lround(v * g)); };
  EnvState s;
  s.suite = task.suite;
  s.variant = task.variant;
  s.t_max = p.t_max(task.suite);
  s.agent_x = cell(obs[0]);
  s.agent_y = cell(obs[1]);
  s.gripper = obs[2] > 0.5f;
  s.n_objects = 0;
  for (int i = 0; i < 2; ++i) {
    const size_t base = 3 + static_cast<size_t>(i) * 4;
    if (obs[base] > 0.5f) {
      s.n_objects = i + 1;
      s.obj_x[static_cast<size_t>(i)] = cell(obs[base + 1]);
      s.obj_y[static_cast<size_t>(i)] = cell(obs[base + 2]);
      s.held[static_cast<size_t>(i)] = obs[base + 3] > 0.5f;
    }
  }
  s.n_goals = 0;
  for (int i = 0; i < 2; ++i) {
    const size_t base = 11 + static_cast<size_t>(i) * 4;
    if (obs[base] > 0.5f) {
      s.n_goals = i + 1;
      s.goal_x[static_cast<size_t>(i)] = cell(obs[base + 1]);
      s.goal_y[static_cast<size_t>(i)] = cell(obs[base + 2]);
    }
  }
  s.progress = static_cast<int>(std::lround(obs[19] * 2.0f));
  s.step_count = static_cast<int>(std::lround(obs[20] * static_cast<float>(s.t_max)));
  return s;
}

std::string render_ascii(const EnvState& s, const EnvParams& p) {
  std::vector<std::string> grid(static_cast<size_t>(p.grid),
                                std::string(static_cast<size_t>(p.grid), '.'));
  for (int i = 0; i < s.n_goals; ++i)
    grid[static_cast<size_t>(s.goal_y[static_cast<size_t>(i)])]
        [static_cast<size_t>(s.goal_x[static_cast<size_t>(i)])] =
            static_cast<char>('1' + i);
  for (int i = 0; i < s.n_objects; ++i)
    grid[static_cast<size_t>(s.obj_y[static_cast<size_t>(i)])]
        [static_cast<size_t>(s.obj_x[static_cast<size_t>(i)])] =
            static_cast<char>(s.held[static_cast<size_t>(i)] ? 'a' + i : 'A' + i);
  grid[static_cast<size_t>(s.agent_y)][static_cast<size_t>(s.agent_x)] =
      s.gripper ? '@' : '+';
  std::string out;
  out += std::string(suite_name(s.suite)) + " v" + std::to_string(s.variant) + " t=" +
         std::to_string(s.step_count) + "/" + std::to_string(s.t_max) +
         " progress=" + std::to_string(s.progress) + "\n";
  for (int y = p.grid - 1; y >= 0; --y) out += grid[static_cast<size_t>(y)] + "\n";
  return out;
}

std::vector<float> GridEnv::reset(const TaskSpec& task, uint64_t seed) {
  const Layout l = variant_layout(task.suite, task.variant, params_);
  state_ = EnvState{};
  state_.suite = task.suite;
  state_.variant = task.variant;
  state_.t_max = params_.t_max(task.suite);
  state_.n_objects = l.n_objects;
  state_.obj_x = l.obj_x;
  state_.obj_y = l.obj_y;
  state_.n_goals = l.n_goals;
  state_.goal_x = l.goal_x;
  state_.goal_y = l.goal_y;

  // Seed-jittered agent start on a cell free of objects and goals.
  Rng rng(derive_seed(seed, static_cast<uint64_t>(task.suite),
                      static_cast<uint64_t>(task.variant)));
  while (true) {
    const int c = static_cast<int>(rng.below(static_cast<uint64_t>(params_.grid * params_.grid)));
    const int x = c % params_.grid, y = c / params_.grid;
    bool clash = false;
    for (int i = 0; i < l.n_objects; ++i)
      clash = clash || (l.obj_x[static_cast<size_t>(i)] == x &&
                        l.obj_y[static_cast<size_t>(i)] == y);
    for (int i = 0; i < l.n_goals; ++i)
      clash = clash || (l.goal_x[static_cast<size_t>(i)] == x &&
                        l.goal_y[static_cast<size_t>(i)] == y);
    if (!clash) {
      state_.agent_x = x;
      state_.agent_y = y;
      break;
    }
  }
  done_ = false;
  return encode_obs(state_, params_);
}

StepResult GridEnv::step_chunk(const ActionChunk& chunk) {
  if (done_) throw Error("env: step_chunk called after episode end");
  if (chunk.horizon != params_.horizon || chunk.action_dim != params_.action_dim)
    throw ShapeError("env: chunk geometry mismatch");
  StepResult r;
  for (int h = 0; h < params_.horizon; ++h) {
    state_ = micro_step(state_, chunk.at(h, 0), chunk.at(h, 1), chunk.at(h, 2), params_);
    ++r.micro_steps;
    const bool success = state_success(state_);
    if (success || state_.step_count >= state_.t_max) {
      done_ = true;
      r.success = success;
      r.reward = success ? 5.0f : 0.0f;
      break;
    }
  }
  r.done = done_;
  r.observation = encode_obs(state_, params_);
  return r;
}

// ---------------------------------------------------------------------------
// Scripted expert

ExpertAction expert_action(const EnvState& s, const EnvParams& p) {
  // Manhattan path: walk the x axis to alignment, then the y axis.
  auto step_toward = [&](int tx, int ty) {
    if (tx != s.agent_x)
      return std::pair<float, float>(static_cast<float>((tx > s.agent_x) - (tx < s.agent_x)),
                                     0.0f);
    return std::pair<float, float>(0.0f,
                                   static_cast<float>((ty > s.agent_y) - (ty < s.agent_y)));
  };
  auto lands_on = [&](float dx, float dy, int tx, int ty) {
    return clamp_cell(s.agent_x + sign_quantize(dx), p.grid) == tx &&
           clamp_cell(s.agent_y + sign_quantize(dy), p.grid) == ty;
  };

  if (s.suite == Suite::kReach) {
    auto [dx, dy] = step_toward(s.goal_x[0], s.goal_y[0]);
    return {dx, dy, -1.0f};
  }

  const int i = std::min(s.progress, s.n_objects - 1);
  const bool holding = s.held[static_cast<size_t>(i)];
  if (!holding) {
    const int tx = s.obj_x[static_cast<size_t>(i)], ty = s.obj_y[static_cast<size_t>(i)];
    auto [dx, dy] = step_toward(tx, ty);
    return {dx, dy, lands_on(dx, dy, tx, ty) ? 1.0f : -1.0f};
  }
  const int tx = s.goal_x[static_cast<size_t>(i)], ty = s.goal_y[static_cast<size_t>(i)];
  auto [dx, dy] = step_toward(tx, ty);
  return {dx, dy, lands_on(dx, dy, tx, ty) ? -1.0f : 1.0f};
}

DemoTrajectory scripted_expert(const TaskSpec& task, uint64_t seed, const EnvParams& p) {
  GridEnv env(p);
  std::vector<float> obs = env.reset(task, seed);

  DemoTrajectory traj;
  traj.task = task;
  traj.micro_states.push_back(env.state());

  EnvState s = env.state();
  bool done = false, success = false;
  while (!done) {
    DemoStep step;
    step.obs = encode_obs(s, p);
    step.chunk.horizon = p.horizon;
    step.chunk.action_dim = p.action_dim;
    for (int h = 0; h < p.horizon; ++h) {
      if (done) {
        // Pad by repeating the final real micro-action.
        const size_t n = step.chunk.values.size();
        for (int c = 0; c < p.action_dim; ++c)
          step.chunk.values.push_back(step.chunk.values[n - static_cast<size_t>(p.action_dim) +
                                                        static_cast<size_t>(c)]);
        continue;
      }
      const ExpertAction a = expert_action(s, p);
      s = micro_step(s, a.dx, a.dy, a.grip, p);
      traj.micro_states.push_back(s);
      step.chunk.values.insert(step.chunk.values.end(), {a.dx, a.dy, a.grip});
      ++step.real_micro;
      success = state_success(s);
      if (success || s.step_count >= s.t_max) done = true;
    }
    traj.steps.push_back(std::move(step));
    if (!done && s.step_count >= s.t_max) done = true;
  }
  traj.success = success;
  if (!success)
    throw Error("env: scripted expert failed on " + std::string(suite_name(task.suite)) +
                " variant " + std::to_string(task.variant) + " (malformed variant)");
  return traj;
}

// ---------------------------------------------------------------------------
// Demo file IO

void save_demos(const std::string& path, const std::vector<DemoTrajectory>& demos,
                const EnvParams& p) {
  BinWriter w(path);
  w.magic("LAPODEM1");
  w.u32(static_cast<uint32_t>(demos.size()));
  for (const auto& d : demos) {
    w.u32(static_cast<uint32_t>(d.task.suite));
    w.u32(static_cast<uint32_t>(d.task.variant));
    w.u32(static_cast<uint32_t>(d.steps.size()));
    for (const auto& s : d.steps) {
      if (s.obs.size() != kObsSize ||
          s.chunk.values.size() != static_cast<size_t>(p.horizon) * p.action_dim)
        throw IoError("save_demos: malformed step");
      w.f32s(s.obs.data(), s.obs.size());
      w.f32s(s.chunk.values.data(), s.chunk.values.size());
    }
  }
  w.close();
}

std::vector<LoadedDemo> load_demos(const std::string& path, const EnvParams& p) {
  BinReader r(path);
  r.expect_magic("LAPODEM1");
  const uint32_t n = r.u32();
  std::vector<LoadedDemo> out;
  out.reserve(n);
  for (uint32_t i = 0; i < n; ++i) {
    LoadedDemo d;
    const uint32_t suite = r.u32();
    if (suite > 2) throw ParseError(path + ": bad suite id at byte offset " +
                                    std::to_string(r.offset() - 4));
    d.task.suite = static_cast<Suite>(suite);
    d.task.variant = static_cast<int>(r.u32());
    const uint32_t steps = r.u32();
    for (uint32_t t = 0; t < steps; ++t) {
      DemoStep s;
      s.obs.resize(kObsSize);
      r.f32s(s.obs.data(), s.obs.size());
      s.chunk.horizon = p.horizon;
      s.chunk.action_dim = p.action_dim;
      s.chunk.values.resize(static_cast<size_t>(p.horizon) * p.action_dim);
      r.f32s(s.chunk.values.data(), s.chunk.values.size());
      d.steps.push_back(std::move(s));
    }
    out.push_back(std::move(d));
  }
  r.expect_eof();
  return out;
}

std::vector<EnvState> replay_demo_states(const LoadedDemo& demo, const EnvParams& p) {
  if (demo.steps.empty()) return {};
  EnvState s = decode_obs(demo.task, demo.steps[0].obs, p);
  std::vector<EnvState> states{s};
  bool done = false;
  for (const auto& step : demo.steps) {
    if (done) break;
    for (int h = 0; h < p.horizon && !done; ++h) {
      s = micro_step(s, step.chunk.at(h, 0), step.chunk.at(h, 1), step.chunk.at(h, 2), p);
      states.push_back(s);
      if (state_success(s) || s.step_count >= s.t_max) done = true;
    }
  }
  return states;
}

}  // namespace lapo
