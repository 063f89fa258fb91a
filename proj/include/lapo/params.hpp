#pragma once

#include <cstdint>
#include <string>
#include <unordered_map>
#include <vector>

#include "lapo/rng.hpp"
#include "lapo/tensor.hpp"

namespace lapo {

// Flat, named parameter store with Adam moments. Group order is insertion
// order and is stable across save/load, which keeps checkpoints and global
// gradient clipping deterministic.
class ParamStore {
 public:
  struct Group {
    std::string name;
    TensorValue value;
    TensorValue adam_m, adam_v;
  };

  enum class Init { kZeros, kOnes, kTruncNormal };

  int add(const std::string& name, Shape shape, Init init, Rng& rng, double std = 0.02);

  bool exists(const std::string& name) const { return index_.count(name) > 0; }
  Group& group(const std::string& name);
  const Group& group(const std::string& name) const;
  Group& group(int i) { return groups_[static_cast<size_t>(i)]; }
  const Group& group(int i) const { return groups_[static_cast<size_t>(i)]; }
  int count() const { return static_cast<int>(groups_.size()); }

  int64_t adam_step = 0;

  size_t total_params() const;

  // Checkpoint file, magic LAPOCKP1:
  //   u32 version, u32 group count, per group: len-prefixed UTF-8 name,
  //   u32 dim count, u32 dims..., f32 little-endian data.
  // Optimizer moments are stored as extra groups under suffixed names
  // ("<name>#adam_m" / "#adam_v") plus "optimizer#step".
  void save(const std::string& path, bool include_moments = true) const;

  // Strict load into an existing store: the file must cover exactly the
  // same value groups with the same shapes.
  void load_into(const std::string& path);

  uint64_t digest() const;

 private:
  std::vector<Group> groups_;
  std::unordered_map<std::string, size_t> index_;
};

struct AdamParams {
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 0.0;  // decoupled
};

double global_grad_norm(const std::vector<TensorValue>& grads);

// Scales all grads so the global norm is at most max_norm; returns the
// pre-clip norm.
double clip_global_norm(std::vector<TensorValue>& grads, double max_norm);

// One AdamW step; grads and lr_scale are aligned with the store's groups.
void adam_update(ParamStore& store, const std::vector<TensorValue>& grads,
                 const AdamParams& ap, const std::vector<double>& lr_scale);

}  // namespace lapo
