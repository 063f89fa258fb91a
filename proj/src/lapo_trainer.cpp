#include "lapo/lapo_trainer.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>

#include "lapo/eval.hpp"
#include "lapo/metrics.hpp"

namespace lapo {

namespace {
constexpr double kExpClampLo = -20.0;
constexpr double kExpClampHi = 20.0;
}  // namespace

RatioNode ratio_from_logp(Tape& t, int logp_new, float logp_old) {
  if (!std::isfinite(logp_old)) throw NumericError("ratio: non-finite recorded log-prob");
  const int diff = t.add(logp_new, t.constant_scalar(-logp_old));
  const double d = static_cast<double>(t.scalar_value(diff));
  RatioNode r;
  if (d > kExpClampHi) {
    r.node = t.constant_scalar(static_cast<float>(std::exp(kExpClampHi)));
    r.clamped = true;
  } else if (d < kExpClampLo) {
    r.node = t.constant_scalar(static_cast<float>(std::exp(kExpClampLo)));
    r.clamped = true;
  } else {
    r.node = t.exp_op(diff);
  }
  r.value = static_cast<double>(t.scalar_value(r.node));
  return r;
}

RatioNode ratio_latent(Tape& t, int z_new, const std::vector<std::vector<float>>& z_old,
                       double sigma) {
  if (sigma <= 0.0) throw ConfigError("ratio_latent: sigma must be positive");
  const TensorValue& zv = t.value(z_new);
  if (zv.rows() != static_cast<int>(z_old.size()))
    throw ShapeError("ratio_latent: latent count mismatch");
  TensorValue old_mat({zv.rows(), zv.cols()});
  for (int k = 0; k < zv.rows(); ++k) {
    if (static_cast<int>(z_old[static_cast<size_t>(k)].size()) != zv.cols())
      throw ShapeError("ratio_latent: latent dim mismatch");
    for (int j = 0; j < zv.cols(); ++j)
      old_mat.at(k, j) = z_old[static_cast<size_t>(k)][static_cast<size_t>(j)];
  }
  const int dist_sq = t.sum(t.square(t.sub(t.constant(std::move(old_mat)), z_new)));
  const int expo = t.scale(dist_sq, static_cast<float>(-1.0 / (2.0 * sigma * sigma)));
  const double e = static_cast<double>(t.scalar_value(expo));
  RatioNode r;
  if (e < kExpClampLo) {
    r.node = t.constant_scalar(static_cast<float>(std::exp(kExpClampLo)));
    r.clamped = true;
  } else {
    r.node = t.exp_op(expo);
  }
  r.value = static_cast<double>(t.scalar_value(r.node));
  return r;
}

int clipped_surrogate(Tape& t, const RatioNode& ratio, float advantage, double eps_min,
                      double eps_max, bool* was_clipped) {
  const double lo = 1.0 - eps_min;
  const double hi = 1.0 + eps_max;
  const double rv = ratio.value;
  const bool outside = rv < lo || rv > hi;
  if (was_clipped != nullptr) *was_clipped = outside;

  const int t1 = t.scale(ratio.node, advantage);
  const int clip_node =
      outside ? t.constant_scalar(static_cast<float>(std::clamp(rv, lo, hi))) : ratio.node;
  const int t2 = t.scale(clip_node, advantage);
  // min() resolved at record time; the subgradient matches autodiff min.
  const int chosen = t.scalar_value(t1) <= t.scalar_value(t2) ? t1 : t2;
  return t.neg(chosen);
}

TotalLoss total_loss(Tape& t, const TapeParams& tp, const TrainConfig& cfg,
                     const std::vector<const RolloutStep*>& steps) {
  if (steps.empty()) throw Error("total_loss: empty valid set");

  std::vector<int> policy_terms, value_terms;
  LossStats st;
  st.n_steps = static_cast<int>(steps.size());
  double sum_a = 0, sum_z = 0, sum_end = 0, sum_v = 0;
  double ra_min = 1e300, ra_max = -1e300, ra_sum = 0, rz_sum = 0, re_sum = 0;
  int clipped = 0, n_z_terms = 0, n_end_terms = 0;

  for (const RolloutStep* sp : steps) {
    const RolloutStep& s = *sp;
    if (!s.valid) throw Error("total_loss: padding step in valid set");
    const JointNodes jn = build_joint(t, tp, cfg, s.obs, s.task_id, s.z_old, s.tokens, s.m,
                                      cfg.adaptive);

    const RatioNode ra = ratio_from_logp(t, jn.logp_actions, s.logp_a_old);
    bool clip_a = false;
    int term = clipped_surrogate(t, ra, s.advantage, cfg.eps_min, cfg.eps_max, &clip_a);
    clipped += clip_a ? 1 : 0;
    st.clamp_events += ra.clamped ? 1 : 0;
    ra_min = std::min(ra_min, ra.value);
    ra_max = std::max(ra_max, ra.value);
    ra_sum += ra.value;
    sum_a += static_cast<double>(t.scalar_value(term));

    if (jn.latent_out >= 0) {
      const RatioNode rz = ratio_latent(t, jn.latent_out, s.z_old, cfg.sigma);
      st.clamp_events += rz.clamped ? 1 : 0;
      rz_sum += rz.value;
      ++n_z_terms;
      const int surr_z = clipped_surrogate(t, rz, s.advantage, cfg.eps_min, cfg.eps_max, nullptr);
      sum_z += static_cast<double>(t.scalar_value(surr_z));
      if (cfg.lambda1 != 0.0)
        term = t.add(term, t.scale(surr_z, static_cast<float>(cfg.lambda1)));
    }
    if (cfg.adaptive && jn.logp_end >= 0) {
      const RatioNode re = ratio_from_logp(t, jn.logp_end, s.logp_end_old);
      st.clamp_events += re.clamped ? 1 : 0;
      re_sum += re.value;
      ++n_end_terms;
      const int surr_end =
          clipped_surrogate(t, re, s.advantage, cfg.eps_min, cfg.eps_max, nullptr);
      sum_end += static_cast<double>(t.scalar_value(surr_end));
      if (cfg.lambda3 != 0.0)
        term = t.add(term, t.scale(surr_end, static_cast<float>(cfg.lambda3)));
    }
    policy_terms.push_back(term);

    const int verr = t.sub(jn.value, t.constant(TensorValue({1, 1}, {s.ret})));
    const int vsq = t.square(verr);
    sum_v += static_cast<double>(t.scalar_value(vsq));
    value_terms.push_back(vsq);
  }

  auto mean_of = [&](std::vector<int>& terms) {
    return terms.size() == 1 ? terms[0] : t.mean(t.concat(terms, 0));
  };
  const int policy_mean = mean_of(policy_terms);
  const int value_mean = mean_of(value_terms);

  TotalLoss out;
  out.node = t.add(policy_mean, t.scale(value_mean, static_cast<float>(cfg.lambda2)));
  st.loss_action = sum_a / st.n_steps;
  st.loss_latent = n_z_terms > 0 ? sum_z / n_z_terms : 0.0;
  st.loss_end = n_end_terms > 0 ? sum_end / n_end_terms : 0.0;
  st.loss_value = sum_v / st.n_steps;
  st.ratio_a_min = ra_min;
  st.ratio_a_max = ra_max;
  st.ratio_a_mean = ra_sum / st.n_steps;
  st.ratio_z_mean = n_z_terms > 0 ? rz_sum / n_z_terms : 1.0;
  st.ratio_end_mean = n_end_terms > 0 ? re_sum / n_end_terms : 1.0;
  st.clip_frac = static_cast<double>(clipped) / st.n_steps;
  out.stats = st;
  return out;
}

namespace {

std::vector<long> buffer_length_hist(const RolloutBuffer& buf, const TrainConfig& cfg) {
  std::vector<long> hist(static_cast<size_t>(cfg.m_candidates), 0);
  for (const auto& traj : buf.trajs)
    for (const auto& s : traj.steps)
      if (s.valid && s.m >= 0 && s.m < cfg.m_candidates) ++hist[static_cast<size_t>(s.m)];
  return hist;
}

double buffer_mean_micro(const RolloutBuffer& buf) {
  if (buf.trajs.empty()) return 0.0;
  double sum = 0;
  for (const auto& t : buf.trajs) sum += t.micro_steps;
  return sum / static_cast<double>(buf.trajs.size());
}

double explained_variance(const RolloutBuffer& buf) {
  double sum_r = 0, sq_r = 0, sum_e = 0, sq_e = 0;
  int n = 0;
  for (const auto& t : buf.trajs)
    for (const auto& s : t.steps)
      if (s.valid) {
        const double e = static_cast<double>(s.ret) - static_cast<double>(s.value_old);
        sum_r += s.ret;
        sq_r += static_cast<double>(s.ret) * s.ret;
        sum_e += e;
        sq_e += e * e;
        ++n;
      }
  if (n == 0) return 0.0;
  const double var_r = std::max(0.0, sq_r / n - (sum_r / n) * (sum_r / n));
  const double var_e = std::max(0.0, sq_e / n - (sum_e / n) * (sum_e / n));
  return var_r < 1e-12 ? 0.0 : 1.0 - var_e / var_r;
}

}  // namespace

RlResult train_rl(PolicyNet& net, const RlOptions& opt) {
  const TrainConfig& cfg = net.cfg();
  if (opt.train_tasks.empty()) throw Error("train_rl: no training tasks");

  JsonlWriter sink;
  if (!opt.metrics_path.empty()) sink.open(opt.metrics_path);
  const bool save_ckpts = !opt.checkpoint_dir.empty();
  if (save_ckpts) std::filesystem::create_directories(opt.checkpoint_dir);

  AdamParams ap;
  ap.lr = cfg.actor_lr;
  ap.beta1 = cfg.adam_beta1;
  ap.beta2 = cfg.adam_beta2;
  ap.eps = cfg.adam_eps;
  std::vector<double> lr_scale;
  for (int i = 0; i < net.params().count(); ++i)
    lr_scale.push_back(net.params().group(i).name.rfind("value.", 0) == 0 ? cfg.value_lr_mult
                                                                          : 1.0);

  RlResult res;
  Rng shuffle_rng(derive_seed(opt.seed, 0x5FFull));

  auto run_eval = [&](int update) {
    EvalPoint pt;
    pt.update = update;
    const EvalOutcome seen =
        eval_policy(net, opt.eval_seen, cfg.eval_rollouts_per_variant,
                    derive_seed(opt.seed, 0xEEull, static_cast<uint64_t>(update)));
    pt.seen_sr = seen.success_rate;
    pt.mean_micro_steps = seen.mean_micro_steps;
    pt.length_hist = seen.length_hist;
    if (!opt.eval_holdout.empty()) {
      const EvalOutcome ho =
          eval_policy(net, opt.eval_holdout, cfg.eval_rollouts_per_variant,
                      derive_seed(opt.seed, 0xD0ull, static_cast<uint64_t>(update)));
      pt.holdout_sr = ho.success_rate;
    }
    res.evals.push_back(pt);
    if (save_ckpts) net.params().save(opt.checkpoint_dir + "/last_good.ckpt");
    return pt;
  };

  EvalPoint last_eval = run_eval(0);
  sink.write({{"update", 0},
              {"seen_success", last_eval.seen_sr},
              {"holdout_success", last_eval.holdout_sr},
              {"mean_episode_steps", last_eval.mean_micro_steps},
              {"length_hist", last_eval.length_hist},
              {"loss_action", 0.0},
              {"loss_latent", 0.0},
              {"loss_value", 0.0},
              {"loss_end", 0.0},
              {"ratio_a_mean", 1.0},
              {"ratio_z_mean", 1.0},
              {"clip_frac", 0.0},
              {"explained_var", 0.0},
              {"grad_norm", 0.0}});

  const auto mode = cfg.adaptive ? PolicyNet::LatentMode::kAdaptiveSample
                                 : PolicyNet::LatentMode::kFixed;

  for (int update = 1; update <= opt.max_updates; ++update) {
    CollectOptions copt;
    copt.mode = mode;
    copt.n_traj = cfg.rollout_trajectories;
    copt.seed = derive_seed(opt.seed, 0xC011ull, static_cast<uint64_t>(update));
    copt.workers = std::max(1, opt.workers);
    copt.zero_reward = opt.zero_reward;
    RolloutBuffer buf = collect_rollouts(net, opt.train_tasks, copt);
    compute_gae(buf, cfg.gamma, cfg.gae_lambda, cfg.advantage_norm);

    const std::vector<long> hist = buffer_length_hist(buf, cfg);
    const double mean_micro = buffer_mean_micro(buf);
    if (update == 1) {
      res.first_length_hist = hist;
      res.first_mean_steps = mean_micro;
    }
    res.last_length_hist = hist;
    res.last_mean_steps = mean_micro;

    if (opt.check_ratio_identity) {
      // Audit pass before any gradient step of this round: every ratio must
      // sit at 1 within float tolerance.
      double rmin = 1e300, rmax = -1e300;
      Tape t;
      const TapeParams tp = TapeParams::push(t, net.params());
      for (const auto& traj : buf.trajs)
        for (const auto& s : traj.steps) {
          if (!s.valid) continue;
          const JointNodes jn = build_joint(t, tp, cfg, s.obs, s.task_id, s.z_old, s.tokens,
                                            s.m, cfg.adaptive);
          const RatioNode ra = ratio_from_logp(t, jn.logp_actions, s.logp_a_old);
          rmin = std::min(rmin, ra.value);
          rmax = std::max(rmax, ra.value);
          if (jn.latent_out >= 0) {
            const RatioNode rz = ratio_latent(t, jn.latent_out, s.z_old, cfg.sigma);
            rmin = std::min(rmin, rz.value);
            rmax = std::max(rmax, rz.value);
          }
          if (jn.logp_end >= 0) {
            const RatioNode re = ratio_from_logp(t, jn.logp_end, s.logp_end_old);
            rmin = std::min(rmin, re.value);
            rmax = std::max(rmax, re.value);
          }
        }
      res.preupdate_ratio_min.push_back(rmin);
      res.preupdate_ratio_max.push_back(rmax);
    }

    // Epochs x minibatches over trajectories.
    LossStats agg;
    double round_grad_norm = 0;
    int mb_count = 0;
    const int per_mb = static_cast<int>(buf.trajs.size()) / cfg.minibatches;
    for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
      std::vector<int> order(buf.trajs.size());
      for (size_t i = 0; i < order.size(); ++i) order[i] = static_cast<int>(i);
      shuffle_rng.shuffle(order);
      for (int mb = 0; mb < cfg.minibatches; ++mb) {
        std::vector<const RolloutStep*> steps;
        for (int i = mb * per_mb; i < (mb + 1) * per_mb; ++i)
          for (const auto& s : buf.trajs[static_cast<size_t>(order[static_cast<size_t>(i)])].steps)
            if (s.valid) steps.push_back(&s);
        if (steps.empty()) continue;

        Tape tape;
        const TapeParams tp = TapeParams::push(tape, net.params());
        const TotalLoss tl = total_loss(tape, tp, cfg, steps);
        if (!std::isfinite(tape.scalar_value(tl.node)))
          throw NumericError("train_rl: non-finite loss at update " + std::to_string(update) +
                             " (last-good checkpoint preserved)");
        tape.backward(tl.node);
        auto grads = collect_grads(tape, tp, net.params());
        clip_global_norm(grads, cfg.grad_clip);
        const double post = global_grad_norm(grads);
        round_grad_norm = std::max(round_grad_norm, post);
        res.max_grad_norm_postclip = std::max(res.max_grad_norm_postclip, post);
        adam_update(net.params(), grads, ap, lr_scale);

        agg.loss_action += tl.stats.loss_action;
        agg.loss_latent += tl.stats.loss_latent;
        agg.loss_end += tl.stats.loss_end;
        agg.loss_value += tl.stats.loss_value;
        agg.ratio_a_mean += tl.stats.ratio_a_mean;
        agg.ratio_z_mean += tl.stats.ratio_z_mean;
        agg.clip_frac += tl.stats.clip_frac;
        agg.clamp_events += tl.stats.clamp_events;
        agg.ratio_a_min = mb_count == 0 ? tl.stats.ratio_a_min
                                        : std::min(agg.ratio_a_min, tl.stats.ratio_a_min);
        agg.ratio_a_max = mb_count == 0 ? tl.stats.ratio_a_max
                                        : std::max(agg.ratio_a_max, tl.stats.ratio_a_max);
        ++mb_count;
      }
    }
    res.updates_run = update;

    const double inv = mb_count > 0 ? 1.0 / mb_count : 0.0;
    bool do_eval = update % cfg.eval_every == 0 || update == opt.max_updates;
    if (do_eval) last_eval = run_eval(update);
    sink.write({{"update", update},
                {"seen_success", last_eval.seen_sr},
                {"holdout_success", last_eval.holdout_sr},
                {"mean_episode_steps", mean_micro},
                {"length_hist", hist},
                {"loss_action", agg.loss_action * inv},
                {"loss_latent", agg.loss_latent * inv},
                {"loss_value", agg.loss_value * inv},
                {"loss_end", agg.loss_end * inv},
                {"ratio_a_mean", agg.ratio_a_mean * inv},
                {"ratio_z_mean", agg.ratio_z_mean * inv},
                {"clip_frac", agg.clip_frac * inv},
                {"explained_var", explained_variance(buf)},
                {"grad_norm", round_grad_norm},
                {"ratio_a_min", agg.ratio_a_min},
                {"ratio_a_max", agg.ratio_a_max},
                {"ratio_clamp_events", agg.clamp_events}});

    if (opt.dump_rollouts && !opt.metrics_path.empty()) {
      const std::string dump = opt.metrics_path + ".rollout_u" + std::to_string(update) + ".bin";
      save_rollouts(dump, buf, cfg);
    }

    if (do_eval && opt.target_seen_sr > 0 && last_eval.seen_sr >= opt.target_seen_sr) break;
  }

  if (save_ckpts) net.params().save(opt.checkpoint_dir + "/final.ckpt");
  return res;
}

}  // namespace lapo
