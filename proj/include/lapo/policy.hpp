#pragma once

#include <string>
#include <unordered_map>
#include <vector>

#include "lapo/config.hpp"
#include "lapo/params.hpp"
#include "lapo/tape.hpp"

namespace lapo {

// Attention visibility over [prompt | latents | <latent_end> | actions].
// The prompt/latent/end region is strictly causal; action positions attend
// to everything including each other; nothing before the action region can
// see an action position.
struct HybridMask {
  int n_prompt = 0, n_latent = 0, n_action = 0;
  int size = 0;
  std::vector<uint8_t> allow;  // row-major size x size

  bool at(int row, int col) const {
    return allow[static_cast<size_t>(row) * size + col] != 0;
  }
};

HybridMask build_mask(int n_prompt, int n_latent, int n_action);

// Length-sampling over candidate exit logits: m ~ Categorical(softmax(l/beta)).
int sample_length_index(const std::vector<double>& logits, double beta, Rng& rng);

// Per-row categorical sampling of action tokens at temperature tau; tau = 0
// selects the argmax (lowest index on ties).
std::vector<int> sample_action_tokens(const TensorValue& logits, double tau, Rng& rng);

class PolicyNet;

// Incremental trunk state (per-layer KV cache). Mirrors the tape forward
// bit-for-bit because both paths run the same kernels in the same order.
class TrunkCache {
 public:
  explicit TrunkCache(const PolicyNet& net);

  void reset();
  int size() const { return n_positions_; }

  // Appends one causal position; returns the final hidden (post ln_f).
  std::vector<float> append(const std::vector<float>& input_embed, int pos_index);

  // Drops cached positions beyond the first n.
  void truncate(int n);

  // Processes a block of positions with full bidirectional visibility among
  // the block (plus the causal prefix); the block is not retained in the
  // cache. Returns final hiddens per block position.
  std::vector<std::vector<float>> append_block(
      const std::vector<std::vector<float>>& inputs, const std::vector<int>& pos_indices);

 private:
  const PolicyNet& net_;
  int n_positions_ = 0;
  // [block][head] -> concatenated per-position vectors of d_head
  std::vector<std::vector<std::vector<float>>> k_cache_, v_cache_;
};

// Pushes every parameter group onto a tape as a gradient-carrying leaf.
struct TapeParams {
  std::vector<int> ids;  // aligned with ParamStore group order
  std::unordered_map<std::string, int> by_name;

  int id(const std::string& name) const;
  static TapeParams push(Tape& tape, const ParamStore& store);
};

// Gradients for every group after tape.backward(), aligned with the store.
std::vector<TensorValue> collect_grads(const Tape& tape, const TapeParams& tp,
                                       const ParamStore& store);

// Tape-side graph builder for one decision step. Readouts are only valid
// after trunk() has been called.
class PolicyGraph {
 public:
  PolicyGraph(Tape& tape, const TapeParams& tp, const TrainConfig& cfg);

  // Builds the trunk over [prompt | latents | end | actions?]; latent
  // positions are teacher-forced with the given input vectors.
  // with_actions=false builds [prompt | latents] only (generation prefix).
  void trunk(const std::vector<float>& obs, int task_id,
             const std::vector<std::vector<float>>& latent_inputs, bool with_actions);

  int latent_outputs(int n) const;                  // (n, d_model)
  int end_logit(int candidate) const;               // (1,1) raw exit logit
  int end_logprob(int candidate, bool end_label) const;  // scalar log-prob
  int action_logits() const;                        // (N_a, 256)
  int action_logprob_sum(const std::vector<int>& tokens, double tau) const;  // scalar
  int value() const;                                // (1,1)
  int hidden() const { return hid_; }

 private:
  int row_readout_(const std::vector<int>& rows) const;

  Tape& t_;
  const TapeParams& tp_;
  const TrainConfig& cfg_;
  int hid_ = -1;
  int n_lat_ = 0;
  bool with_actions_ = false;
};

// The policy: prompt encoder, 2-block trunk with the hybrid mask,
// autoregressive latent head with a <latent_end> exit head, parallel
// bidirectional action decoding, and a 4-layer MLP value head.
class PolicyNet {
 public:
  enum class LatentMode { kFixed, kAdaptiveSample, kAdaptiveExit };

  PolicyNet(const TrainConfig& cfg, uint64_t init_seed);

  ParamStore& params() { return store_; }
  const ParamStore& params() const { return store_; }
  const TrainConfig& cfg() const { return cfg_; }

  struct GenResult {
    std::vector<std::vector<float>> latents;  // all generated latents
    int n_used = 0;                           // latents conditioning the actions
    int m = -1;                               // candidate index (adaptive/forced)
    std::vector<double> candidate_logits;     // raw exit logits at evaluated candidates
    double logp_end = 0.0;                    // log P(emit <latent_end> at m)
  };

  // Incremental generation; cache ends at [prompt | z_1..z_n_used].
  GenResult generate_latents(const std::vector<float>& obs, int task_id, LatentMode mode,
                             TrunkCache& cache, Rng* rng) const;

  struct DecodeResult {
    TensorValue logits;  // (N_a, 256)
    double value = 0.0;
  };

  // Appends <latent_end> (value readout) and decodes all action positions in
  // one bidirectional pass over the cached trunk state.
  DecodeResult decode_actions(TrunkCache& cache) const;

  // Prompt token embeddings for the fast path (n_prompt rows).
  std::vector<std::vector<float>> prompt_tokens(const std::vector<float>& obs,
                                                int task_id) const;

  std::vector<float> input_embed_for_latent(const std::vector<float>& z) const { return z; }

  int n_tasks() const { return 3 * cfg_.env.variants_per_suite; }
  int max_seq_len() const {
    return cfg_.n_prompt + cfg_.n_max + 1 + cfg_.n_actions();
  }

 private:
  void build_params_(uint64_t seed);

  TrainConfig cfg_;
  ParamStore store_;

  friend class TrunkCache;
  friend class PolicyGraph;
};

}  // namespace lapo
