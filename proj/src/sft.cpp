#include "lapo/sft.hpp"

#include <cmath>

#include "lapo/metrics.hpp"

namespace lapo {

namespace {
constexpr float kLatentWeight = 1.0f;
constexpr float kEndWeight = 0.1f;
constexpr float kActionWeight = 1.0f;
constexpr float kCosEps = 1e-8f;
}  // namespace

SftDataset SftDataset::build(const std::vector<LoadedDemo>& demos, const EnvParams& p) {
  SftDataset ds;
  for (size_t traj = 0; traj < demos.size(); ++traj) {
    const auto& demo = demos[traj];
    const auto states = replay_demo_states(demo, p);
    const int total_micro = static_cast<int>(states.size()) - 1;
    for (size_t t = 0; t < demo.steps.size(); ++t) {
      SftSample s;
      s.traj = static_cast<int>(traj);
      s.step = static_cast<int>(t);
      s.obs = demo.steps[t].obs;
      s.task_id = demo.task.task_id(p);
      s.tokens = tokenize(demo.steps[t].chunk).tokens;
      const int real = std::min(p.horizon, total_micro - static_cast<int>(t) * p.horizon);
      s.token_mask.assign(s.tokens.size(), 0);
      for (int h = 0; h < real; ++h)
        for (int a = 0; a < p.action_dim; ++a)
          s.token_mask[static_cast<size_t>(h * p.action_dim + a)] = 1;
      ds.samples.push_back(std::move(s));
    }
  }
  return ds;
}

int sample_train_length(const TrainConfig& cfg, Rng& rng) {
  if (!cfg.adaptive) return cfg.fixed_n_z;
  const auto c = cfg.candidates();
  return c[static_cast<size_t>(rng.below(c.size()))];
}

SftLossNodes sft_loss(Tape& t, const TapeParams& tp, const TrainConfig& cfg,
                      const std::vector<const SftSample*>& batch,
                      const std::vector<int>& lengths, const LatentCache& cache) {
  if (batch.empty()) throw Error("sft_loss: empty batch");
  if (batch.size() != lengths.size()) throw Error("sft_loss: batch/length mismatch");

  std::vector<int> lat_terms, end_terms, act_terms;
  const auto candidates = cfg.candidates();

  for (size_t i = 0; i < batch.size(); ++i) {
    const SftSample& s = *batch[i];
    const int n_z = lengths[i];

    std::vector<std::vector<float>> targets;
    for (int j = 1; j <= n_z; ++j)
      targets.push_back(cache.lookup(s.traj, s.step, j));

    PolicyGraph g(t, tp, cfg);
    g.trunk(s.obs, s.task_id, targets, true);

    // Cosine regression on the predicted latents. cos(a,b) equals the mean
    // elementwise product of the RMS-normalized rows.
    if (n_z > 0) {
      const int z_hat = g.latent_outputs(n_z);
      TensorValue tgt({n_z, cfg.d_model});
      for (int k = 0; k < n_z; ++k)
        for (int j = 0; j < cfg.d_model; ++j)
          tgt.at(k, j) = targets[static_cast<size_t>(k)][static_cast<size_t>(j)];
      const int zn = t.layer_norm(z_hat, kCosEps, false);
      const int tn = t.layer_norm(t.constant(std::move(tgt)), kCosEps, false);
      const int cos_mean = t.mean(t.mul(zn, tn));
      lat_terms.push_back(t.add(t.constant_scalar(1.0f), t.neg(cos_mean)));
    } else {
      lat_terms.push_back(t.constant_scalar(0.0f));
    }

    // Exit-token CE at every candidate position up to the sampled length:
    // continue everywhere except the final candidate.
    std::vector<int> ce;
    for (size_t c = 0; c < candidates.size(); ++c) {
      if (candidates[c] > n_z) break;
      const bool is_end = candidates[c] == n_z;
      ce.push_back(t.neg(g.end_logprob(candidates[c], is_end)));
    }
    end_terms.push_back(ce.empty() ? t.constant_scalar(0.0f)
                                   : (ce.size() == 1 ? ce[0] : t.mean(t.concat(ce, 0))));

    // Masked action CE (mean over executed tokens; padding gets zero grad).
    const int ls = t.log_softmax(g.action_logits());
    TensorValue weight({cfg.n_actions(), kActionBins});
    int n_valid = 0;
    for (int j = 0; j < cfg.n_actions(); ++j) {
      if (!s.token_mask[static_cast<size_t>(j)]) continue;
      weight.at(j, s.tokens[static_cast<size_t>(j)]) = 1.0f;
      ++n_valid;
    }
    if (n_valid == 0) throw Error("sft_loss: sample with no executed tokens");
    const int picked = t.sum(t.mul(ls, t.constant(std::move(weight))));
    act_terms.push_back(t.scale(picked, -1.0f / static_cast<float>(n_valid)));
  }

  auto combine = [&](std::vector<int>& terms) {
    return terms.size() == 1 ? terms[0] : t.mean(t.concat(terms, 0));
  };
  SftLossNodes out;
  out.latent = combine(lat_terms);
  out.end = combine(end_terms);
  out.action = combine(act_terms);
  out.total = t.add(t.add(t.scale(out.latent, kLatentWeight), t.scale(out.end, kEndWeight)),
                    t.scale(out.action, kActionWeight));
  return out;
}

SftResult train_sft(PolicyNet& net, const SftDataset& data, const LatentCache& cache,
                    uint64_t seed, const std::string& metrics_path) {
  const TrainConfig& cfg = net.cfg();
  if (data.samples.empty()) throw Error("train_sft: empty dataset");

  JsonlWriter sink;
  if (!metrics_path.empty()) sink.open(metrics_path);

  Rng rng(derive_seed(seed, 0x5F7ull));
  AdamParams ap;
  ap.beta1 = cfg.adam_beta1;
  ap.beta2 = cfg.adam_beta2;
  ap.eps = cfg.adam_eps;
  ap.weight_decay = cfg.sft_weight_decay;

  SftResult res;
  const int batch_size = std::min<int>(cfg.sft_batch, static_cast<int>(data.samples.size()));
  const double min_lr = cfg.sft_lr * cfg.sft_min_lr_ratio;

  for (int step = 0; step < cfg.sft_steps; ++step) {
    // Cosine decay from the peak rate to its configured floor.
    const double frac = cfg.sft_steps <= 1 ? 0.0
                                           : static_cast<double>(step) /
                                                 static_cast<double>(cfg.sft_steps - 1);
    ap.lr = min_lr + 0.5 * (cfg.sft_lr - min_lr) * (1.0 + std::cos(3.141592653589793 * frac));

    // Full-batch when the batch covers the dataset, otherwise sample with
    // replacement.
    std::vector<const SftSample*> batch;
    std::vector<int> lengths;
    const bool full_batch = batch_size >= static_cast<int>(data.samples.size());
    for (int b = 0; b < batch_size; ++b) {
      batch.push_back(full_batch
                          ? &data.samples[static_cast<size_t>(b)]
                          : &data.samples[static_cast<size_t>(rng.below(data.samples.size()))]);
      lengths.push_back(sample_train_length(cfg, rng));
    }

    Tape tape;
    const TapeParams tp = TapeParams::push(tape, net.params());
    const SftLossNodes nodes = sft_loss(tape, tp, cfg, batch, lengths, cache);
    tape.backward(nodes.total);
    auto grads = collect_grads(tape, tp, net.params());
    adam_update(net.params(), grads, ap, {});

    SftMetricsRow row;
    row.step = step;
    row.loss_total = tape.scalar_value(nodes.total);
    row.loss_latent = tape.scalar_value(nodes.latent);
    row.loss_end = tape.scalar_value(nodes.end);
    row.loss_action = tape.scalar_value(nodes.action);
    row.lr = ap.lr;
    res.metrics.push_back(row);
    sink.write({{"step", row.step},
                {"loss_total", row.loss_total},
                {"loss_latent", row.loss_latent},
                {"loss_end", row.loss_end},
                {"loss_action", row.loss_action},
                {"lr", row.lr}});
  }
  return res;
}

}  // namespace lapo
