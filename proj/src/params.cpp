#include "lapo/params.hpp"

#include <cmath>

#include "lapo/errors.hpp"
#include "lapo/io.hpp"

namespace lapo {

int ParamStore::add(const std::string& name, Shape shape, Init init, Rng& rng, double std) {
  if (exists(name)) throw Error("params: duplicate group " + name);
  Group g;
  g.name = name;
  g.value = TensorValue(shape);
  g.adam_m = TensorValue(shape);
  g.adam_v = TensorValue(std::move(shape));
  if (init == Init::kTruncNormal) {
    for (auto& v : g.value.data) {
      double x = rng.gauss(0.0, std);
      while (std::abs(x) > 2.0 * std) x = rng.gauss(0.0, std);
      v = static_cast<float>(x);
    }
  } else if (init == Init::kOnes) {
    for (auto& v : g.value.data) v = 1.0f;
  }
  index_[name] = groups_.size();
  groups_.push_back(std::move(g));
  return static_cast<int>(groups_.size()) - 1;
}

ParamStore::Group& ParamStore::group(const std::string& name) {
  const auto it = index_.find(name);
  if (it == index_.end()) throw Error("params: no group named " + name);
  return groups_[it->second];
}

const ParamStore::Group& ParamStore::group(const std::string& name) const {
  const auto it = index_.find(name);
  if (it == index_.end()) throw Error("params: no group named " + name);
  return groups_[it->second];
}

size_t ParamStore::total_params() const {
  size_t n = 0;
  for (const auto& g : groups_) n += g.value.numel();
  return n;
}

namespace {

void write_group(BinWriter& w, const std::string& name, const TensorValue& t) {
  w.str(name);
  w.u32(static_cast<uint32_t>(t.shape.size()));
  for (int d : t.shape) w.u32(static_cast<uint32_t>(d));
  w.f32s(t.data.data(), t.data.size());
}

}  // namespace

void ParamStore::save(const std::string& path, bool include_moments) const {
  BinWriter w(path);
  w.magic("LAPOCKP1");
  w.u32(1);  // version
  const uint32_t n = static_cast<uint32_t>(groups_.size()) *
                         (include_moments ? 3u : 1u) +
                     (include_moments ? 1u : 0u);
  w.u32(n);
  for (const auto& g : groups_) {
    write_group(w, g.name, g.value);
    if (include_moments) {
      write_group(w, g.name + "#adam_m", g.adam_m);
      write_group(w, g.name + "#adam_v", g.adam_v);
    }
  }
  if (include_moments) {
    TensorValue step({1}, {static_cast<float>(adam_step)});
    write_group(w, "optimizer#step", step);
  }
  w.close();
}

void ParamStore::load_into(const std::string& path) {
  BinReader r(path);
  r.expect_magic("LAPOCKP1");
  const uint32_t version = r.u32();
  if (version != 1)
    throw ParseError(path + ": unsupported checkpoint version " + std::to_string(version));
  const uint32_t n = r.u32();
  size_t value_groups = 0;
  for (uint32_t i = 0; i < n; ++i) {
    const std::string name = r.str();
    const uint32_t ndim = r.u32();
    Shape shape;
    for (uint32_t d = 0; d < ndim; ++d) shape.push_back(static_cast<int>(r.u32()));
    TensorValue t{shape};
    r.f32s(t.data.data(), t.data.size());

    if (name == "optimizer#step") {
      adam_step = static_cast<int64_t>(t.data[0]);
      continue;
    }
    const size_t hash_pos = name.find('#');
    const std::string base = hash_pos == std::string::npos ? name : name.substr(0, hash_pos);
    if (!exists(base))
      throw ParseError(path + ": checkpoint group " + name + " unknown to this model");
    Group& g = group(base);
    TensorValue* dst = nullptr;
    if (hash_pos == std::string::npos) {
      dst = &g.value;
      ++value_groups;
    } else if (name.substr(hash_pos) == "#adam_m") {
      dst = &g.adam_m;
    } else if (name.substr(hash_pos) == "#adam_v") {
      dst = &g.adam_v;
    } else {
      throw ParseError(path + ": unknown group suffix in " + name);
    }
    if (dst->shape != t.shape)
      throw ParseError(path + ": shape mismatch for group " + name + ": file " +
                       shape_str(t.shape) + " vs model " + shape_str(dst->shape));
    *dst = std::move(t);
  }
  r.expect_eof();
  if (value_groups != groups_.size())
    throw ParseError(path + ": checkpoint covers " + std::to_string(value_groups) + " of " +
                     std::to_string(groups_.size()) + " parameter groups");
}

uint64_t ParamStore::digest() const {
  uint64_t h = 0xCBF29CE484222325ull;
  for (const auto& g : groups_) {
    h = fnv1a64(g.name.data(), g.name.size(), h);
    h = fnv1a64(g.value.data.data(), g.value.data.size() * 4, h);
  }
  return h;
}

double global_grad_norm(const std::vector<TensorValue>& grads) {
  double sq = 0.0;
  for (const auto& g : grads)
    for (float v : g.data) sq += static_cast<double>(v) * static_cast<double>(v);
  return std::sqrt(sq);
}

double clip_global_norm(std::vector<TensorValue>& grads, double max_norm) {
  const double norm = global_grad_norm(grads);
  if (norm > max_norm && norm > 0.0) {
    const float s = static_cast<float>(max_norm / norm);
    for (auto& g : grads)
      for (auto& v : g.data) v *= s;
  }
  return norm;
}

void adam_update(ParamStore& store, const std::vector<TensorValue>& grads,
                 const AdamParams& ap, const std::vector<double>& lr_scale) {
  if (grads.size() != static_cast<size_t>(store.count()))
    throw Error("adam: gradient count mismatch");
  store.adam_step += 1;
  const double t = static_cast<double>(store.adam_step);
  const double bc1 = 1.0 - std::pow(ap.beta1, t);
  const double bc2 = 1.0 - std::pow(ap.beta2, t);
  for (int i = 0; i < store.count(); ++i) {
    auto& g = store.group(i);
    const auto& grad = grads[static_cast<size_t>(i)];
    if (grad.shape != g.value.shape) throw Error("adam: gradient shape mismatch for " + g.name);
    const double lr = ap.lr * (lr_scale.empty() ? 1.0 : lr_scale[static_cast<size_t>(i)]);
    for (size_t j = 0; j < g.value.data.size(); ++j) {
      const double gj = static_cast<double>(grad.data[j]);
      const double m = ap.beta1 * static_cast<double>(g.adam_m.data[j]) + (1.0 - ap.beta1) * gj;
      const double v = ap.beta2 * static_cast<double>(g.adam_v.data[j]) + (1.0 - ap.beta2) * gj * gj;
      g.adam_m.data[j] = static_cast<float>(m);
      g.adam_v.data[j] = static_cast<float>(v);
      const double mh = m / bc1;
      const double vh = v / bc2;
      double p = static_cast<double>(g.value.data[j]);
      p -= lr * (mh / (std::sqrt(vh) + ap.eps) + ap.weight_decay * p);
      g.value.data[j] = static_cast<float>(p);
    }
  }
}

}  // namespace lapo
