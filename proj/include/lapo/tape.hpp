#pragma once

#include <cstdint>
#include <functional>
#include <vector>

#include "lapo/errors.hpp"
#include "lapo/tensor.hpp"

namespace lapo {

enum class OpKind : uint8_t {
  kLeaf,
  kMatmul,
  kAdd,
  kMul,
  kScale,
  kTanh,
  kGelu,
  kSoftmax,     // last dim
  kLogSoftmax,  // last dim
  kGatherRows,
  kLayerNorm,
  kConcat,
  kSum,
  kMean,
  kMse,
  kSquare,
  kExp,
  kNeg,
};

const char* op_name(OpKind k);

struct TapeNode {
  OpKind kind = OpKind::kLeaf;
  std::vector<int> args;
  TensorValue value;
  std::vector<int> iaux;  // gather row indices; concat axis
  float faux = 0.0f;      // scale factor; layer-norm eps
  bool ta = false;        // matmul: transpose A
  bool tb = false;        // matmul: transpose B
  bool center = true;     // layer-norm: subtract mean (false = RMS variant)
  bool needs_grad = false;
};

// Append-only reverse-mode tape over dense f32 arrays. Forward values are
// computed eagerly at record time and checked finite (fail fast on NaN/Inf).
// backward() walks the nodes once in reverse insertion order, accumulating
// gradients additively; reductions and matmul inner loops accumulate in f64.
// Single-threaded by contract; one tape per worker.
class Tape {
 public:
  int leaf(TensorValue v, bool needs_grad = true);
  int constant(TensorValue v) { return leaf(std::move(v), false); }
  int constant_scalar(float v) { return constant(TensorValue::scalar(v)); }

  // Generic record; attributes beyond operands are set via the typed
  // builders below, which all funnel through this.
  int record(OpKind kind, const std::vector<int>& args);

  int matmul(int a, int b, bool ta = false, bool tb = false);
  int add(int a, int b);
  int mul(int a, int b);
  int scale(int a, float c);
  int tanh_op(int a);
  int gelu(int a);
  int softmax(int a);
  int log_softmax(int a);
  int gather_rows(int a, std::vector<int> rows);
  int layer_norm(int a, float eps = 1e-5f, bool center = true);
  int concat(const std::vector<int>& parts, int axis = 0);
  int sum(int a);
  int mean(int a);
  int mse(int a, int b);
  int square(int a);
  int exp_op(int a);
  int neg(int a);
  int sub(int a, int b) { return add(a, neg(b)); }

  // Gradient of `loss` (must be scalar) w.r.t. every node. Nodes outside
  // the dependency cone keep zero gradient.
  void backward(int loss);

  const TensorValue& value(int id) const { return nodes_[static_cast<size_t>(id)].value; }
  float scalar_value(int id) const;
  // Zero tensor if the node was untouched by backward.
  TensorValue grad(int id) const;
  bool has_grad(int id) const { return !grads_[static_cast<size_t>(id)].empty(); }

  int size() const { return static_cast<int>(nodes_.size()); }
  const TapeNode& node(int id) const { return nodes_[static_cast<size_t>(id)]; }

 private:
  int push_(TapeNode n);
  int record_impl_(TapeNode n);
  void check_finite_(const TapeNode& n) const;
  void backward_node_(int id);
  std::vector<float>& grad_buf_(int id);

  std::vector<TapeNode> nodes_;
  std::vector<std::vector<float>> grads_;

  friend class Fd64Session;
};

// Recomputes a recorded tape in 64-bit arithmetic with single-coordinate
// leaf perturbations. Used as the independent evaluation path for finite
// difference checks: branch choices frozen at record time are replayed
// verbatim, so the replay is the exact function backward() differentiates.
class Fd64Session {
 public:
  Fd64Session(const Tape& tape, int target);

  // Value of the target node with leaf `leaf_id` coordinate `coord`
  // shifted by delta. delta == 0 returns the f64 base evaluation.
  double eval(int leaf_id, size_t coord, double delta);
  double base() const { return base_val_; }

 private:
  void forward_node_(int id, std::vector<std::vector<double>>& vals) const;

  const Tape& tape_;
  int target_;
  std::vector<std::vector<double>> base_vals_;
  double base_val_ = 0.0;
};

// Max over sampled coordinates of |analytic - numeric| / max(1e-8, |numeric|)
// using central differences. fn must be deterministic: it is evaluated twice
// at the base point and a mismatch raises NumericError.
double finite_diff_check(const std::function<double(const std::vector<double>&)>& fn,
                         const std::vector<double>& params,
                         const std::vector<double>& analytic, double h,
                         int n_samples, uint64_t seed);

// Convenience wrapper: FD-checks d(loss)/d(leaf) for the given leaves using
// the f64 replay path against backward()'s analytic gradients.
double tape_fd_check(Tape& tape, int loss, const std::vector<int>& leaves, double h,
                     int n_samples, uint64_t seed);

}  // namespace lapo
