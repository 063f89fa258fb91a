#pragma once

#include <cstdint>
#include <string>
#include <unordered_map>
#include <vector>

#include "lapo/env.hpp"

namespace lapo {

// Frozen 2-layer tanh map of the flat state encoding. Stands in for a
// vision foundation model's global embedding: deterministic in (state,
// seed), never trained, bit-reproducible across runs.
class TeacherNet {
 public:
  TeacherNet(uint64_t seed, int obs_size, int hidden_dim, int feature_dim);

  std::vector<float> features(const std::vector<float>& obs) const;

  int feature_dim() const { return feature_dim_; }
  uint64_t seed() const { return seed_; }

 private:
  uint64_t seed_;
  int obs_size_, hidden_dim_, feature_dim_;
  std::vector<float> w1_;  // obs_size x hidden
  std::vector<float> w2_;  // hidden x feature
};

// Keeps the k channels of largest magnitude; ties break toward the lower
// channel index; selected values retain original order and sign.
std::vector<float> topk_select(const std::vector<float>& v, int k);
std::vector<int> topk_indices(const std::vector<float>& v, int k);

// Latent targets for decision step t of a demo trajectory: target j
// (1-based) is topk(teacher(state at micro index min(t*H + j*delta_z, L))).
std::vector<std::vector<float>> future_targets(const std::vector<EnvState>& micro_states,
                                               int step, int n_z, int k, int delta_z,
                                               const TeacherNet& teacher,
                                               const EnvParams& p);

// Offline target cache, file magic LAPOLAT1:
//   u32 record count, then records of (u32 traj, u32 t, u32 j, k x f32)
// in canonical (traj, t, j) order so re-runs are byte-identical.
class LatentCache {
 public:
  LatentCache() = default;

  static LatentCache precompute(const std::vector<LoadedDemo>& demos,
                                const TeacherNet& teacher, const EnvParams& p, int k,
                                int n_max, int delta_z);

  void save(const std::string& path) const;
  static LatentCache load(const std::string& path);

  bool contains(int traj, int t, int j) const;
  // Throws Error naming the key on a miss.
  const std::vector<float>& lookup(int traj, int t, int j) const;

  size_t size() const { return records_.size(); }
  int k() const { return k_; }

 private:
  struct Record {
    uint32_t traj, t, j;
    std::vector<float> target;
  };
  static uint64_t key_(int traj, int t, int j) {
    return (static_cast<uint64_t>(traj) << 40) | (static_cast<uint64_t>(t) << 16) |
           static_cast<uint64_t>(j);
  }

  int k_ = 0;
  std::vector<Record> records_;
  std::unordered_map<uint64_t, size_t> index_;
};

}  // namespace lapo
