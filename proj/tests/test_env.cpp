#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cstdio>

#include "lapo/env.hpp"
#include "lapo/rng.hpp"

using namespace lapo;

namespace {

ActionChunk constant_chunk(const EnvParams& p, float dx, float dy, float g) {
  ActionChunk c;
  c.horizon = p.horizon;
  c.action_dim = p.action_dim;
  for (int h = 0; h < p.horizon; ++h) c.values.insert(c.values.end(), {dx, dy, g});
  return c;
}

}  // namespace

TEST_CASE("reset is deterministic for (task, seed)") {
  EnvParams p;
  GridEnv a(p), b(p);
  const TaskSpec task{Suite::kReach, 0};
  CHECK(a.reset(task, 7) == b.reset(task, 7));
  CHECK(a.state() == b.state());
  CHECK(a.reset(task, 8) != b.reset(task, 7));
}

TEST_CASE("observation length matches declared size") {
  EnvParams p;
  GridEnv env(p);
  CHECK(env.reset({Suite::kSequence, 3}, 1).size() == kObsSize);
}

TEST_CASE("distinct variants have distinct goal layouts") {
  EnvParams p;
  for (auto suite : {Suite::kReach, Suite::kPickPlace, Suite::kSequence}) {
    GridEnv env(p);
    std::vector<EnvState> states;
    for (int v = 0; v < p.variants_per_suite; ++v) {
      env.reset({suite, v}, 0);
      states.push_back(env.state());
    }
    for (size_t i = 0; i < states.size(); ++i)
      for (size_t j = i + 1; j < states.size(); ++j) {
        const bool same_goals = states[i].goal_x == states[j].goal_x &&
                                states[i].goal_y == states[j].goal_y &&
                                states[i].obj_x == states[j].obj_x &&
                                states[i].obj_y == states[j].obj_y;
        CHECK(!same_goals);
      }
  }
}

TEST_CASE("unknown variant rejected") {
  GridEnv env;
  CHECK_THROWS_AS(env.reset({Suite::kReach, 99}, 0), Error);
}

TEST_CASE("wall clamping") {
  EnvParams p;
  GridEnv env(p);
  env.reset({Suite::kReach, 0}, 3);
  // Drive right for many chunks; agent must stop at x = G-1.
  for (int i = 0; i < 3 && !env.done(); ++i)
    env.step_chunk(constant_chunk(p, 1.0f, 0.0f, -1.0f));
  CHECK(env.state().agent_x == p.grid - 1);
}

TEST_CASE("early termination on success mid-chunk") {
  EnvParams p;
  GridEnv env(p);
  const TaskSpec task{Suite::kReach, 0};
  env.reset(task, 11);
  const EnvState s0 = env.state();
  // Steer straight at the goal; success should consume only the needed
  // micro-steps of the final chunk.
  const int need = std::max(std::abs(s0.goal_x[0] - s0.agent_x),
                            std::abs(s0.goal_y[0] - s0.agent_y));
  int consumed = 0;
  StepResult r;
  while (!env.done()) {
    const EnvState& s = env.state();
    const float dx = static_cast<float>((s.goal_x[0] > s.agent_x) - (s.goal_x[0] < s.agent_x));
    const float dy = static_cast<float>((s.goal_y[0] > s.agent_y) - (s.goal_y[0] < s.agent_y));
    r = env.step_chunk(constant_chunk(p, dx, dy, -1.0f));
    consumed += r.micro_steps;
  }
  CHECK(r.success);
  CHECK(r.reward == 5.0f);
  CHECK(consumed == need);
  CHECK_THROWS_AS(env.step_chunk(constant_chunk(p, 0, 0, -1.0f)), Error);
}

TEST_CASE("timeout gives done with zero reward") {
  EnvParams p;
  GridEnv env(p);
  env.reset({Suite::kPickPlace, 4}, 2);
  StepResult r;
  int total = 0;
  while (!env.done()) {
    r = env.step_chunk(constant_chunk(p, 0.0f, 0.0f, -1.0f));  // stand still
    total += r.micro_steps;
  }
  CHECK(r.done);
  CHECK(!r.success);
  CHECK(r.reward == 0.0f);
  CHECK(total == p.t_max(Suite::kPickPlace));
}

TEST_CASE("reward is sparse and scaled to 5") {
  EnvParams p;
  for (auto suite : {Suite::kReach, Suite::kPickPlace, Suite::kSequence}) {
    const DemoTrajectory d = scripted_expert({suite, 1}, 5, p);
    GridEnv env(p);
    env.reset({suite, 1}, 5);
    float total = 0.0f;
    StepResult r;
    for (const auto& step : d.steps) {
      r = env.step_chunk(step.chunk);
      CHECK((r.reward == 0.0f || r.reward == 5.0f));
      total += r.reward;
      if (r.done) break;
    }
    CHECK(total == 5.0f);
    CHECK(r.success);
  }
}

TEST_CASE("scripted expert succeeds on every variant of every suite") {
  EnvParams p;
  int reach_len = 0, pick_len = 0, seq_len = 0;
  for (auto suite : {Suite::kReach, Suite::kPickPlace, Suite::kSequence}) {
    for (int v = 0; v < p.variants_per_suite; ++v) {
      const DemoTrajectory d = scripted_expert({suite, v}, 17, p);
      CHECK(d.success);
      const int micro = static_cast<int>(d.micro_states.size()) - 1;
      CHECK(micro <= p.t_max(suite));
      if (suite == Suite::kReach) reach_len += micro;
      if (suite == Suite::kPickPlace) pick_len += micro;
      if (suite == Suite::kSequence) seq_len += micro;
    }
  }
  // Graded horizons: reach < pickplace < sequence on average.
  CHECK(reach_len < pick_len);
  CHECK(pick_len < seq_len);
}

TEST_CASE("replaying stored chunks reproduces stored observations") {
  EnvParams p;
  const std::string path = "/tmp/lapo_test_demos.bin";
  std::vector<DemoTrajectory> demos;
  for (int v = 0; v < 3; ++v)
    demos.push_back(scripted_expert({Suite::kSequence, v}, 23, p));
  save_demos(path, demos, p);
  const auto loaded = load_demos(path, p);
  REQUIRE(loaded.size() == demos.size());
  for (const auto& demo : loaded) {
    GridEnv env(p);
    const EnvState s0 = decode_obs(demo.task, demo.steps[0].obs, p);
    env.reset(demo.task, 0);
    // Replay from the decoded start state using pure dynamics.
    EnvState s = s0;
    bool done = false;
    for (const auto& step : demo.steps) {
      REQUIRE(!done);
      CHECK(encode_obs(s, p) == step.obs);
      for (int h = 0; h < p.horizon && !done; ++h) {
        s = micro_step(s, step.chunk.at(h, 0), step.chunk.at(h, 1), step.chunk.at(h, 2), p);
        if (state_success(s) || s.step_count >= s.t_max) done = true;
      }
    }
    CHECK(done);
    CHECK(state_success(s));
  }
  std::remove(path.c_str());
}

TEST_CASE("micro_step is pure and bit-exact") {
  EnvParams p;
  GridEnv env(p);
  env.reset({Suite::kPickPlace, 2}, 9);
  const EnvState s = env.state();
  const EnvState a = micro_step(s, 0.8f, -0.2f, 1.0f, p);
  const EnvState b = micro_step(s, 0.8f, -0.2f, 1.0f, p);
  CHECK(a == b);
  CHECK(s == env.state());  // input untouched
}

TEST_CASE("obs encode/decode round trip") {
  EnvParams p;
  Rng rng(31);
  for (auto suite : {Suite::kReach, Suite::kPickPlace, Suite::kSequence}) {
    GridEnv env(p);
    const TaskSpec task{suite, 5};
    env.reset(task, rng.next_u64());
    EnvState s = env.state();
    for (int i = 0; i < 20; ++i) {
      const EnvState back = decode_obs(task, encode_obs(s, p), p);
      CHECK(back == s);
      s = micro_step(s, static_cast<float>(rng.uniform(-1, 1)),
                     static_cast<float>(rng.uniform(-1, 1)),
                     static_cast<float>(rng.uniform(-1, 1)), p);
      if (state_success(s)) break;
    }
  }
}

TEST_CASE("ascii renderer shows the agent") {
  EnvParams p;
  GridEnv env(p);
  env.reset({Suite::kSequence, 0}, 4);
  const std::string art = render_ascii(env.state(), p);
  CHECK(art.find('+') != std::string::npos);
  CHECK(art.find('1') != std::string::npos);
}

TEST_CASE("demo parse error carries byte offset") {
  const std::string path = "/tmp/lapo_test_corrupt.bin";
  {
    FILE* f = fopen(path.c_str(), "wb");
    fwrite("LAPODEM1", 1, 8, f);
    const uint32_t n = 3;  // claims 3 trajectories, provides none
    fwrite(&n, 4, 1, f);
    fclose(f);
  }
  EnvParams p;
  try {
    load_demos(path, p);
    CHECK(false);
  } catch (const ParseError& e) {
    CHECK(std::string(e.what()).find("byte offset") != std::string::npos);
  }
  std::remove(path.c_str());
}
