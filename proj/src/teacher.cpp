#include "lapo/teacher.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "lapo/io.hpp"
#include "lapo/kernels.hpp"
#include "lapo/rng.hpp"

namespace lapo {

TeacherNet::TeacherNet(uint64_t seed, int obs_size, int hidden_dim, int feature_dim)
    : seed_(seed), obs_size_(obs_size), hidden_dim_(hidden_dim), feature_dim_(feature_dim) {
  Rng rng(derive_seed(seed, 0x7EACull));
  const double s1 = 1.6 / std::sqrt(static_cast<double>(obs_size));
  const double s2 = 1.6 / std::sqrt(static_cast<double>(hidden_dim));
  w1_.resize(static_cast<size_t>(obs_size) * hidden_dim);
  w2_.resize(static_cast<size_t>(hidden_dim) * feature_dim);
  for (auto& w : w1_) w = static_cast<float>(rng.gauss(0.0, s1));
  for (auto& w : w2_) w = static_cast<float>(rng.gauss(0.0, s2));
}

std::vector<float> TeacherNet::features(const std::vector<float>& obs) const {
  if (obs.size() != static_cast<size_t>(obs_size_))
    throw ShapeError("teacher: observation size mismatch");
  std::vector<float> h(static_cast<size_t>(hidden_dim_));
  kern::matmul(obs.data(), w1_.data(), h.data(), 1, obs_size_, hidden_dim_, false, false);
  for (auto& v : h) v = kern::tanh_s(v);
  std::vector<float> f(static_cast<size_t>(feature_dim_));
  kern::matmul(h.data(), w2_.data(), f.data(), 1, hidden_dim_, feature_dim_, false, false);
  for (auto& v : f) v = kern::tanh_s(v);
  return f;
}

std::vector<int> topk_indices(const std::vector<float>& v, int k) {
  if (k < 1 || k > static_cast<int>(v.size()))
    throw Error("topk_select: k=" + std::to_string(k) + " out of range for dim " +
                std::to_string(v.size()));
  std::vector<int> idx(v.size());
  std::iota(idx.begin(), idx.end(), 0);
  std::stable_sort(idx.begin(), idx.end(), [&](int a, int b) {
    const float ma = std::fabs(v[static_cast<size_t>(a)]);
    const float mb = std::fabs(v[static_cast<size_t>(b)]);
    if (ma != mb) return ma > mb;
    return a < b;  // ties toward the lower channel index
  });
  idx.resize(static_cast<size_t>(k));
  std::sort(idx.begin(), idx.end());  // original channel order
  return idx;
}

std::vector<float> topk_select(const std::vector<float>& v, int k) {
  std::vector<float> out;
  out.reserve(static_cast<size_t>(k));
  for (int i : topk_indices(v, k)) out.push_back(v[static_cast<size_t>(i)]);
  return out;
}

std::vector<std::vector<float>> future_targets(const std::vector<EnvState>& micro_states,
                                               int step, int n_z, int k, int delta_z,
                                               const TeacherNet& teacher,
                                               const EnvParams& p) {
  const int last = static_cast<int>(micro_states.size()) - 1;
  const int base = step * p.horizon;
  std::vector<std::vector<float>> out;
  out.reserve(static_cast<size_t>(n_z));
  for (int j = 1; j <= n_z; ++j) {
    const int idx = std::min(base + j * delta_z, last);
    const auto obs = encode_obs(micro_states[static_cast<size_t>(idx)], p);
    out.push_back(topk_select(teacher.features(obs), k));
  }
  return out;
}

LatentCache LatentCache::precompute(const std::vector<LoadedDemo>& demos,
                                    const TeacherNet& teacher, const EnvParams& p, int k,
                                    int n_max, int delta_z) {
  LatentCache cache;
  cache.k_ = k;
  for (size_t traj = 0; traj < demos.size(); ++traj) {
    const auto states = replay_demo_states(demos[traj], p);
    for (size_t t = 0; t < demos[traj].steps.size(); ++t) {
      const auto targets =
          future_targets(states, static_cast<int>(t), n_max, k, delta_z, teacher, p);
      for (int j = 1; j <= n_max; ++j) {
        Record r;
        r.traj = static_cast<uint32_t>(traj);
        r.t = static_cast<uint32_t>(t);
        r.j = static_cast<uint32_t>(j);
        r.target = targets[static_cast<size_t>(j - 1)];
        cache.index_[key_(static_cast<int>(traj), static_cast<int>(t), j)] =
            cache.records_.size();
        cache.records_.push_back(std::move(r));
      }
    }
  }
  return cache;
}

void LatentCache::save(const std::string& path) const {
  BinWriter w(path);
  w.magic("LAPOLAT1");
  w.u32(static_cast<uint32_t>(records_.size()));
  for (const auto& r : records_) {
    w.u32(r.traj);
    w.u32(r.t);
    w.u32(r.j);
    w.f32s(r.target.data(), r.target.size());
  }
  w.close();
}

LatentCache LatentCache::load(const std::string& path) {
  BinReader r(path);
  r.expect_magic("LAPOLAT1");
  const uint32_t n = r.u32();
  LatentCache cache;
  if (n == 0) {
    r.expect_eof();
    return cache;
  }
  // k is implied by the uniform record size.
  const size_t payload = r.remaining();
  if (payload % n != 0 || payload / n < 12)
    throw ParseError(path + ": record payload not divisible at byte offset " +
                     std::to_string(r.offset()));
  const size_t k = (payload / n - 12) / 4;
  cache.k_ = static_cast<int>(k);
  for (uint32_t i = 0; i < n; ++i) {
    Record rec;
    rec.traj = r.u32();
    rec.t = r.u32();
    rec.j = r.u32();
    rec.target.resize(k);
    r.f32s(rec.target.data(), k);
    cache.index_[key_(static_cast<int>(rec.traj), static_cast<int>(rec.t),
                      static_cast<int>(rec.j))] = cache.records_.size();
    cache.records_.push_back(std::move(rec));
  }
  r.expect_eof();
  return cache;
}

bool LatentCache::contains(int traj, int t, int j) const {
  return index_.count(key_(traj, t, j)) > 0;
}

const std::vector<float>& LatentCache::lookup(int traj, int t, int j) const {
  const auto it = index_.find(key_(traj, t, j));
  if (it == index_.end())
    throw Error("latent cache: missing entry (traj=" + std::to_string(traj) +
                ", t=" + std::to_string(t) + ", j=" + std::to_string(j) + ")");
  return records_[it->second].target;
}

}  // namespace lapo
