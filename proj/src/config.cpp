#include "lapo/config.hpp"

#include <fstream>
#include <set>

#include <json.hpp>

#include "lapo/errors.hpp"
#include "lapo/rng.hpp"

namespace lapo {

using nlohmann::json;

std::vector<int> TrainConfig::candidates() const {
  std::vector<int> c;
  for (int i = 1; i <= m_candidates; ++i) c.push_back(n_max * i / m_candidates);
  return c;
}

int TrainConfig::candidate_index_of(int n_z) const {
  const auto c = candidates();
  for (size_t i = 0; i < c.size(); ++i)
    if (c[i] == n_z) return static_cast<int>(i);
  return -1;
}

void TrainConfig::validate() const {
  auto require = [](bool ok, const std::string& what) {
    if (!ok) throw ConfigError("config: " + what);
  };
  require(gamma > 0.0 && gamma < 1.0, "gamma must be in (0,1)");
  require(gae_lambda >= 0.0 && gae_lambda <= 1.0, "gae_lambda must be in [0,1]");
  require(eps_min > 0.0 && eps_max > 0.0, "clipping bounds must be positive");
  require(sigma > 0.0, "sigma must be positive");
  require(p_exit > 0.0 && p_exit <= 1.0, "p_exit must be in (0,1]");
  require(beta > 0.0, "beta must be positive");
  require(n_max >= 1, "n_max must be >= 1");
  require(m_candidates >= 1 && m_candidates <= n_max, "m_candidates must be in [1, n_max]");
  require(n_max % m_candidates == 0, "m_candidates must divide n_max");
  require(d_model % n_heads == 0, "n_heads must divide d_model");
  require(!adaptive || fixed_n_z <= n_max, "fixed_n_z must be <= n_max");
  require(fixed_n_z >= 0 && fixed_n_z <= n_max, "fixed_n_z must be in [0, n_max]");
  require(rollout_trajectories % minibatches == 0,
          "minibatches must divide rollout_trajectories");
  require(action_temperature >= 0.0, "action_temperature must be >= 0");
  require(grad_clip > 0.0, "grad_clip must be positive");
  require(env.grid >= 2, "grid too small");
  require(env.horizon >= 1 && env.action_dim >= 1, "chunk geometry invalid");
  require(delta_z >= 1, "delta_z must be >= 1");
  require(sigma_explore >= 0.0, "sigma_explore must be >= 0");
}

void TrainConfig::apply_action_only_baseline() {
  adaptive = false;
  fixed_n_z = 0;
  lambda1 = 0.0;
  lambda3 = 0.0;
}

std::vector<Suite> ExperimentConfig::suite_list() const {
  std::vector<Suite> out;
  for (const auto& s : suites) {
    if (s == "all") {
      return {Suite::kReach, Suite::kPickPlace, Suite::kSequence};
    }
    out.push_back(suite_from_name(s));
  }
  return out;
}

void ExperimentConfig::validate() const {
  train.validate();
  if (baseline != "lapo" && baseline != "ppo-action-only")
    throw ConfigError("config: baseline must be lapo or ppo-action-only");
  if (holdout_variant >= train.env.variants_per_suite)
    throw ConfigError("config: holdout_variant out of range");
  if (seeds.empty()) throw ConfigError("config: seeds must be non-empty");
  suite_list();  // validates names
}

namespace {

void reject_unknown(const json& j, const std::set<std::string>& known, const std::string& where) {
  for (const auto& [key, _] : j.items())
    if (!known.count(key))
      throw ConfigError("config: unknown key \"" + key + "\" in " + where);
}

template <class T>
void get_if(const json& j, const char* key, T& out) {
  if (j.contains(key)) out = j.at(key).get<T>();
}

void parse_env(const json& j, EnvParams& p) {
  reject_unknown(j, {"grid", "variants_per_suite", "horizon", "action_dim", "t_max_reach",
                     "t_max_pickplace", "t_max_sequence"},
                 "env");
  get_if(j, "grid", p.grid);
  get_if(j, "variants_per_suite", p.variants_per_suite);
  get_if(j, "horizon", p.horizon);
  get_if(j, "action_dim", p.action_dim);
  get_if(j, "t_max_reach", p.t_max_reach);
  get_if(j, "t_max_pickplace", p.t_max_pickplace);
  get_if(j, "t_max_sequence", p.t_max_sequence);
}

const std::set<std::string> kTrainKeys = {
    "d_model", "n_heads", "n_blocks", "n_prompt", "d_task_embed", "mlp_mult",
    "n_max", "m_candidates", "p_exit", "beta", "sigma", "sigma_explore", "adaptive",
    "fixed_n_z", "teacher_seed", "teacher_dim", "teacher_hidden", "delta_z", "env",
    "gamma", "gae_lambda", "eps_min", "eps_max", "lambda1", "lambda2", "lambda3",
    "action_temperature", "rollout_trajectories", "minibatches", "epochs", "actor_lr",
    "value_lr_mult", "grad_clip", "eval_every", "advantage_norm", "rl_updates",
    "eval_rollouts_per_variant", "sft_steps", "sft_batch", "sft_lr", "sft_weight_decay",
    "sft_min_lr_ratio", "demos_per_task", "adam_beta1", "adam_beta2", "adam_eps", "workers"};

void parse_train(const json& j, TrainConfig& c) {
  reject_unknown(j, kTrainKeys, "train");
  get_if(j, "d_model", c.d_model);
  get_if(j, "n_heads", c.n_heads);
  get_if(j, "n_blocks", c.n_blocks);
  get_if(j, "n_prompt", c.n_prompt);
  get_if(j, "d_task_embed", c.d_task_embed);
  get_if(j, "mlp_mult", c.mlp_mult);
  get_if(j, "n_max", c.n_max);
  get_if(j, "m_candidates", c.m_candidates);
  get_if(j, "p_exit", c.p_exit);
  get_if(j, "beta", c.beta);
  get_if(j, "sigma", c.sigma);
  get_if(j, "sigma_explore", c.sigma_explore);
  get_if(j, "adaptive", c.adaptive);
  get_if(j, "fixed_n_z", c.fixed_n_z);
  get_if(j, "teacher_seed", c.teacher_seed);
  get_if(j, "teacher_dim", c.teacher_dim);
  get_if(j, "teacher_hidden", c.teacher_hidden);
  get_if(j, "delta_z", c.delta_z);
  if (j.contains("env")) parse_env(j.at("env"), c.env);
  get_if(j, "gamma", c.gamma);
  get_if(j, "gae_lambda", c.gae_lambda);
  get_if(j, "eps_min", c.eps_min);
  get_if(j, "eps_max", c.eps_max);
  get_if(j, "lambda1", c.lambda1);
  get_if(j, "lambda2", c.lambda2);
  get_if(j, "lambda3", c.lambda3);
  get_if(j, "action_temperature", c.action_temperature);
  get_if(j, "rollout_trajectories", c.rollout_trajectories);
  get_if(j, "minibatches", c.minibatches);
  get_if(j, "epochs", c.epochs);
  get_if(j, "actor_lr", c.actor_lr);
  get_if(j, "value_lr_mult", c.value_lr_mult);
  get_if(j, "grad_clip", c.grad_clip);
  get_if(j, "eval_every", c.eval_every);
  get_if(j, "advantage_norm", c.advantage_norm);
  get_if(j, "rl_updates", c.rl_updates);
  get_if(j, "eval_rollouts_per_variant", c.eval_rollouts_per_variant);
  get_if(j, "sft_steps", c.sft_steps);
  get_if(j, "sft_batch", c.sft_batch);
  get_if(j, "sft_lr", c.sft_lr);
  get_if(j, "sft_weight_decay", c.sft_weight_decay);
  get_if(j, "sft_min_lr_ratio", c.sft_min_lr_ratio);
  get_if(j, "demos_per_task", c.demos_per_task);
  get_if(j, "adam_beta1", c.adam_beta1);
  get_if(j, "adam_beta2", c.adam_beta2);
  get_if(j, "adam_eps", c.adam_eps);
  get_if(j, "workers", c.workers);
}

json env_to_json(const EnvParams& p) {
  return json{{"grid", p.grid},
              {"variants_per_suite", p.variants_per_suite},
              {"horizon", p.horizon},
              {"action_dim", p.action_dim},
              {"t_max_reach", p.t_max_reach},
              {"t_max_pickplace", p.t_max_pickplace},
              {"t_max_sequence", p.t_max_sequence}};
}

json train_to_json(const TrainConfig& c) {
  json j;
  j["d_model"] = c.d_model;
  j["n_heads"] = c.n_heads;
  j["n_blocks"] = c.n_blocks;
  j["n_prompt"] = c.n_prompt;
  j["d_task_embed"] = c.d_task_embed;
  j["mlp_mult"] = c.mlp_mult;
  j["n_max"] = c.n_max;
  j["m_candidates"] = c.m_candidates;
  j["p_exit"] = c.p_exit;
  j["beta"] = c.beta;
  j["sigma"] = c.sigma;
  j["sigma_explore"] = c.sigma_explore;
  j["adaptive"] = c.adaptive;
  j["fixed_n_z"] = c.fixed_n_z;
  j["teacher_seed"] = c.teacher_seed;
  j["teacher_dim"] = c.teacher_dim;
  j["teacher_hidden"] = c.teacher_hidden;
  j["delta_z"] = c.delta_z;
  j["env"] = env_to_json(c.env);
  j["gamma"] = c.gamma;
  j["gae_lambda"] = c.gae_lambda;
  j["eps_min"] = c.eps_min;
  j["eps_max"] = c.eps_max;
  j["lambda1"] = c.lambda1;
  j["lambda2"] = c.lambda2;
  j["lambda3"] = c.lambda3;
  j["action_temperature"] = c.action_temperature;
  j["rollout_trajectories"] = c.rollout_trajectories;
  j["minibatches"] = c.minibatches;
  j["epochs"] = c.epochs;
  j["actor_lr"] = c.actor_lr;
  j["value_lr_mult"] = c.value_lr_mult;
  j["grad_clip"] = c.grad_clip;
  j["eval_every"] = c.eval_every;
  j["advantage_norm"] = c.advantage_norm;
  j["rl_updates"] = c.rl_updates;
  j["eval_rollouts_per_variant"] = c.eval_rollouts_per_variant;
  j["sft_steps"] = c.sft_steps;
  j["sft_batch"] = c.sft_batch;
  j["sft_lr"] = c.sft_lr;
  j["sft_weight_decay"] = c.sft_weight_decay;
  j["sft_min_lr_ratio"] = c.sft_min_lr_ratio;
  j["demos_per_task"] = c.demos_per_task;
  j["adam_beta1"] = c.adam_beta1;
  j["adam_beta2"] = c.adam_beta2;
  j["adam_eps"] = c.adam_eps;
  j["workers"] = c.workers;
  return j;
}

}  // namespace

ExperimentConfig load_experiment_config(const std::string& path) {
  std::ifstream f(path);
  if (!f) throw IoError("cannot open config: " + path);
  json j;
  try {
    f >> j;
  } catch (const json::exception& e) {
    throw ParseError(path + ": " + e.what());
  }
  reject_unknown(j,
                 {"train", "demo_file", "cache_file", "checkpoint_dir", "metrics_dir",
                  "suites", "holdout_variant", "seeds", "deterministic", "baseline"},
                 "config root");
  ExperimentConfig ec;
  try {
    if (j.contains("train")) parse_train(j.at("train"), ec.train);
    get_if(j, "demo_file", ec.demo_file);
    get_if(j, "cache_file", ec.cache_file);
    get_if(j, "checkpoint_dir", ec.checkpoint_dir);
    get_if(j, "metrics_dir", ec.metrics_dir);
    get_if(j, "suites", ec.suites);
    get_if(j, "holdout_variant", ec.holdout_variant);
    get_if(j, "seeds", ec.seeds);
    get_if(j, "deterministic", ec.deterministic);
    get_if(j, "baseline", ec.baseline);
  } catch (const json::exception& e) {
    throw ParseError(path + ": " + e.what());
  }
  ec.validate();
  return ec;
}

std::string experiment_config_to_json(const ExperimentConfig& ec) {
  json j;
  j["train"] = train_to_json(ec.train);
  j["demo_file"] = ec.demo_file;
  j["cache_file"] = ec.cache_file;
  j["checkpoint_dir"] = ec.checkpoint_dir;
  j["metrics_dir"] = ec.metrics_dir;
  j["suites"] = ec.suites;
  j["holdout_variant"] = ec.holdout_variant;
  j["seeds"] = ec.seeds;
  j["deterministic"] = ec.deterministic;
  j["baseline"] = ec.baseline;
  return j.dump(2);
}

uint64_t config_digest(const ExperimentConfig& ec) {
  const std::string s = experiment_config_to_json(ec);
  return fnv1a64(s.data(), s.size());
}

}  // namespace lapo
