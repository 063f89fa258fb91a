#pragma once

#include <string>
#include <vector>

#include "lapo/codec.hpp"
#include "lapo/config.hpp"
#include "lapo/policy.hpp"
#include "lapo/teacher.hpp"

namespace lapo {

// One behavior-cloning sample: a decision step of an expert demo.
struct SftSample {
  int traj = 0;
  int step = 0;
  std::vector<float> obs;
  int task_id = 0;
  std::vector<int> tokens;         // H*A discrete targets
  std::vector<uint8_t> token_mask; // 1 = executed micro-step, 0 = padding
};

struct SftDataset {
  std::vector<SftSample> samples;

  // Builds samples from loaded demos; padding masks are recovered by
  // replaying each trajectory through the dynamics.
  static SftDataset build(const std::vector<LoadedDemo>& demos, const EnvParams& p);
};

// Uniform over the candidate lengths in adaptive training; the fixed-length
// configuration bypasses sampling entirely.
int sample_train_length(const TrainConfig& cfg, Rng& rng);

struct SftLossNodes {
  int total = -1;
  int latent = -1;
  int end = -1;
  int action = -1;
};

// Warm-up loss for a batch: cosine latent regression, exit-token CE at every
// candidate up to the sampled length, and masked action CE, weighted 1:0.1:1.
SftLossNodes sft_loss(Tape& tape, const TapeParams& tp, const TrainConfig& cfg,
                      const std::vector<const SftSample*>& batch,
                      const std::vector<int>& lengths, const LatentCache& cache);

struct SftMetricsRow {
  int step = 0;
  double loss_total = 0, loss_latent = 0, loss_end = 0, loss_action = 0, lr = 0;
};

struct SftResult {
  std::vector<SftMetricsRow> metrics;
};

// AdamW warm-up with cosine decay to sft_min_lr_ratio of the peak rate.
// metrics_path may be empty to skip the JSONL sink.
SftResult train_sft(PolicyNet& net, const SftDataset& data, const LatentCache& cache,
                    uint64_t seed, const std::string& metrics_path);

}  // namespace lapo
