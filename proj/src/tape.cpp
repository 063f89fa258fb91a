#include "lapo/tape.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>

#include "lapo/kernels.hpp"
#include "lapo/rng.hpp"

namespace lapo {

const char* op_name(OpKind k) {
  switch (k) {
    case OpKind::kLeaf: return "leaf";
    case OpKind::kMatmul: return "matmul";
    case OpKind::kAdd: return "add";
    case OpKind::kMul: return "mul";
    case OpKind::kScale: return "scale";
    case OpKind::kTanh: return "tanh";
    case OpKind::kGelu: return "gelu";
    case OpKind::kSoftmax: return "softmax-last-dim";
    case OpKind::kLogSoftmax: return "log-softmax-last-dim";
    case OpKind::kGatherRows: return "gather-rows";
    case OpKind::kLayerNorm: return "layer-norm";
    case OpKind::kConcat: return "concat";
    case OpKind::kSum: return "sum";
    case OpKind::kMean: return "mean";
    case OpKind::kMse: return "mse";
    case OpKind::kSquare: return "square";
    case OpKind::kExp: return "exp";
    case OpKind::kNeg: return "neg";
  }
  return "?";
}

namespace {

[[noreturn]] void shape_fail(OpKind k, const Shape& a, const Shape& b) {
  throw ShapeError(std::string("tape: ") + op_name(k) + ": incompatible shapes " +
                   shape_str(a) + " and " + shape_str(b));
}

[[noreturn]] void shape_fail(OpKind k, const Shape& a, const char* why) {
  throw ShapeError(std::string("tape: ") + op_name(k) + ": shape " + shape_str(a) + ": " + why);
}

int last_dim(const Shape& s) { return s.empty() ? 1 : s.back(); }

// True when b broadcasts across the rows of a: b is rank-1 of size
// last_dim(a), or a (1,n) row against a's (m,n).
bool row_broadcast(const Shape& a, const Shape& b) {
  if (shape_numel(a) == shape_numel(b) && a.size() == b.size()) return false;
  const int n = last_dim(a);
  if (b.size() == 1 && b[0] == n) return true;
  if (b.size() == 2 && b[0] == 1 && b[1] == n && a.size() == 2 && a[0] != 1) return true;
  return false;
}

struct MatDims {
  int m, k, n;
};

MatDims matmul_dims(const TapeNode& nd, const Shape& sa, const Shape& sb) {
  if (sa.size() != 2 || sb.size() != 2) shape_fail(OpKind::kMatmul, sa, sb);
  const int am = nd.ta ? sa[1] : sa[0];
  const int ak = nd.ta ? sa[0] : sa[1];
  const int bk = nd.tb ? sb[1] : sb[0];
  const int bn = nd.tb ? sb[0] : sb[1];
  if (ak != bk) shape_fail(OpKind::kMatmul, sa, sb);
  return {am, ak, bn};
}

// Shared eager forward used by both the f32 record path and the f64 replay
// path; all arithmetic funnels through kern:: so cached/uncached evaluation
// and the FD reference stay consistent.
template <class T>
void forward_op(const TapeNode& nd, const std::vector<const Shape*>& shp,
                const std::vector<const T*>& in, const Shape& out_shape, T* out) {
  const size_t n_out = shape_numel(out_shape);
  switch (nd.kind) {
    case OpKind::kLeaf:
      break;
    case OpKind::kMatmul: {
      const MatDims d = matmul_dims(nd, *shp[0], *shp[1]);
      kern::matmul(in[0], in[1], out, d.m, d.k, d.n, nd.ta, nd.tb);
      break;
    }
    case OpKind::kAdd: {
      const Shape& sa = *shp[0];
      const Shape& sb = *shp[1];
      if (row_broadcast(sa, sb)) {
        const int cols = last_dim(sa);
        const size_t rows = n_out / static_cast<size_t>(cols);
        for (size_t i = 0; i < rows; ++i)
          for (int j = 0; j < cols; ++j)
            out[i * cols + j] = in[0][i * cols + j] + in[1][j];
      } else {
        for (size_t i = 0; i < n_out; ++i) out[i] = in[0][i] + in[1][i];
      }
      break;
    }
    case OpKind::kMul: {
      const Shape& sa = *shp[0];
      const Shape& sb = *shp[1];
      if (shape_numel(sb) == 1 && shape_numel(sa) != 1) {
        for (size_t i = 0; i < n_out; ++i) out[i] = in[0][i] * in[1][0];
      } else if (row_broadcast(sa, sb)) {
        const int cols = last_dim(sa);
        const size_t rows = n_out / static_cast<size_t>(cols);
        for (size_t i = 0; i < rows; ++i)
          for (int j = 0; j < cols; ++j)
            out[i * cols + j] = in[0][i * cols + j] * in[1][j];
      } else {
        for (size_t i = 0; i < n_out; ++i) out[i] = in[0][i] * in[1][i];
      }
      break;
    }
    case OpKind::kScale:
      for (size_t i = 0; i < n_out; ++i) out[i] = in[0][i] * static_cast<T>(nd.faux);
      break;
    case OpKind::kTanh:
      for (size_t i = 0; i < n_out; ++i) out[i] = kern::tanh_s(in[0][i]);
      break;
    case OpKind::kGelu:
      for (size_t i = 0; i < n_out; ++i) out[i] = kern::gelu_s(in[0][i]);
      break;
    case OpKind::kSoftmax:
    case OpKind::kLogSoftmax: {
      const int cols = last_dim(*shp[0]);
      const size_t rows = n_out / static_cast<size_t>(cols);
      for (size_t i = 0; i < rows; ++i) {
        if (nd.kind == OpKind::kSoftmax)
          kern::softmax_row(in[0] + i * cols, out + i * cols, cols);
        else
          kern::log_softmax_row(in[0] + i * cols, out + i * cols, cols);
      }
      break;
    }
    case OpKind::kGatherRows: {
      const int cols = (*shp[0])[1];
      for (size_t r = 0; r < nd.iaux.size(); ++r)
        for (int j = 0; j < cols; ++j)
          out[r * cols + j] = in[0][static_cast<size_t>(nd.iaux[r]) * cols + j];
      break;
    }
    case OpKind::kLayerNorm: {
      const int cols = last_dim(*shp[0]);
      const size_t rows = n_out / static_cast<size_t>(cols);
      for (size_t i = 0; i < rows; ++i)
        kern::norm_row(in[0] + i * cols, out + i * cols, cols,
                       static_cast<double>(nd.faux), nd.center);
      break;
    }
    case OpKind::kConcat: {
      const int axis = nd.iaux[0];
      if (axis == 0) {
        size_t off = 0;
        for (size_t a = 0; a < in.size(); ++a) {
          const size_t cnt = shape_numel(*shp[a]);
          std::copy(in[a], in[a] + cnt, out + off);
          off += cnt;
        }
      } else {
        const int out_cols = out_shape[1];
        const int rows = out_shape[0];
        int col_off = 0;
        for (size_t a = 0; a < in.size(); ++a) {
          const int c = (*shp[a])[1];
          for (int i = 0; i < rows; ++i)
            for (int j = 0; j < c; ++j)
              out[static_cast<size_t>(i) * out_cols + col_off + j] =
                  in[a][static_cast<size_t>(i) * c + j];
          col_off += c;
        }
      }
      break;
    }
    case OpKind::kSum:
      out[0] = static_cast<T>(kern::sum_all(in[0], shape_numel(*shp[0])));
      break;
    case OpKind::kMean:
      out[0] = static_cast<T>(kern::sum_all(in[0], shape_numel(*shp[0])) /
                              static_cast<double>(shape_numel(*shp[0])));
      break;
    case OpKind::kMse: {
      const size_t n = shape_numel(*shp[0]);
      double acc = 0.0;
      for (size_t i = 0; i < n; ++i) {
        const double d = static_cast<double>(in[0][i]) - static_cast<double>(in[1][i]);
        acc += d * d;
      }
      out[0] = static_cast<T>(acc / static_cast<double>(n));
      break;
    }
    case OpKind::kSquare:
      for (size_t i = 0; i < n_out; ++i) out[i] = in[0][i] * in[0][i];
      break;
    case OpKind::kExp:
      for (size_t i = 0; i < n_out; ++i)
        out[i] = static_cast<T>(std::exp(static_cast<double>(in[0][i])));
      break;
    case OpKind::kNeg:
      for (size_t i = 0; i < n_out; ++i) out[i] = -in[0][i];
      break;
  }
}

Shape infer_shape(const TapeNode& nd, const std::vector<const Shape*>& shp) {
  switch (nd.kind) {
    case OpKind::kLeaf:
      return {};
    case OpKind::kMatmul: {
      const MatDims d = matmul_dims(nd, *shp[0], *shp[1]);
      return {d.m, d.n};
    }
    case OpKind::kAdd:
    case OpKind::kMul: {
      const Shape& sa = *shp[0];
      const Shape& sb = *shp[1];
      if (sa == sb) return sa;
      if (nd.kind == OpKind::kMul && shape_numel(sb) == 1 && shape_numel(sa) != 1) return sa;
      if (row_broadcast(sa, sb)) return sa;
      shape_fail(nd.kind, sa, sb);
    }
    case OpKind::kScale:
    case OpKind::kTanh:
    case OpKind::kGelu:
    case OpKind::kSquare:
    case OpKind::kExp:
    case OpKind::kNeg:
      return *shp[0];
    case OpKind::kSoftmax:
    case OpKind::kLogSoftmax:
    case OpKind::kLayerNorm:
      if (shp[0]->empty()) shape_fail(nd.kind, *shp[0], "rank >= 1 required");
      return *shp[0];
    case OpKind::kGatherRows: {
      if (shp[0]->size() != 2) shape_fail(nd.kind, *shp[0], "rank-2 source required");
      for (int r : nd.iaux)
        if (r < 0 || r >= (*shp[0])[0]) shape_fail(nd.kind, *shp[0], "row index out of range");
      return {static_cast<int>(nd.iaux.size()), (*shp[0])[1]};
    }
    case OpKind::kConcat: {
      if (shp.empty()) throw ShapeError("tape: concat: no operands");
      const int axis = nd.iaux[0];
      Shape out = *shp[0];
      if (axis < 0 || axis >= static_cast<int>(out.size()))
        shape_fail(nd.kind, out, "bad concat axis");
      for (size_t a = 1; a < shp.size(); ++a) {
        const Shape& s = *shp[a];
        if (s.size() != out.size()) shape_fail(nd.kind, out, s);
        for (size_t d = 0; d < s.size(); ++d)
          if (static_cast<int>(d) != axis && s[d] != out[d]) shape_fail(nd.kind, out, s);
        out[static_cast<size_t>(axis)] += s[static_cast<size_t>(axis)];
      }
      return out;
    }
    case OpKind::kSum:
    case OpKind::kMean:
      return {1};
    case OpKind::kMse:
      if (*shp[0] != *shp[1]) shape_fail(nd.kind, *shp[0], *shp[1]);
      return {1};
  }
  throw ShapeError("tape: unknown op");
}

}  // namespace

int Tape::push_(TapeNode n) {
  nodes_.push_back(std::move(n));
  grads_.emplace_back();
  return static_cast<int>(nodes_.size()) - 1;
}

int Tape::leaf(TensorValue v, bool needs_grad) {
  TapeNode n;
  n.kind = OpKind::kLeaf;
  n.value = std::move(v);
  n.needs_grad = needs_grad;
  return push_(n);
}

int Tape::record(OpKind kind, const std::vector<int>& args) {
  TapeNode n;
  n.kind = kind;
  n.args = args;
  if (kind == OpKind::kConcat && n.iaux.empty()) n.iaux = {0};
  if (kind == OpKind::kLayerNorm && n.faux == 0.0f) n.faux = 1e-5f;
  return record_impl_(std::move(n));
}

int Tape::record_impl_(TapeNode n) {
  const int self = static_cast<int>(nodes_.size());
  std::vector<const Shape*> shp;
  std::vector<const float*> in;
  for (int a : n.args) {
    if (a < 0 || a >= self)
      throw ShapeError(std::string("tape: ") + op_name(n.kind) + ": operand id out of range");
    shp.push_back(&nodes_[static_cast<size_t>(a)].value.shape);
    in.push_back(nodes_[static_cast<size_t>(a)].value.data.data());
    n.needs_grad = n.needs_grad || nodes_[static_cast<size_t>(a)].needs_grad;
  }
  n.value = TensorValue(infer_shape(n, shp));
  forward_op<float>(n, shp, in, n.value.shape, n.value.data.data());
  check_finite_(n);
  return push_(std::move(n));
}

void Tape::check_finite_(const TapeNode& n) const {
  for (float v : n.value.data)
    if (!std::isfinite(v))
      throw NumericError(std::string("tape: ") + op_name(n.kind) +
                         " produced a non-finite value");
}

int Tape::matmul(int a, int b, bool ta, bool tb) {
  TapeNode n;
  n.kind = OpKind::kMatmul;
  n.args = {a, b};
  n.ta = ta;
  n.tb = tb;
  return record_impl_(std::move(n));
}

int Tape::add(int a, int b) { return record(OpKind::kAdd, {a, b}); }
int Tape::mul(int a, int b) { return record(OpKind::kMul, {a, b}); }

int Tape::scale(int a, float c) {
  TapeNode n;
  n.kind = OpKind::kScale;
  n.args = {a};
  n.faux = c;
  return record_impl_(std::move(n));
}

int Tape::tanh_op(int a) { return record(OpKind::kTanh, {a}); }
int Tape::gelu(int a) { return record(OpKind::kGelu, {a}); }
int Tape::softmax(int a) { return record(OpKind::kSoftmax, {a}); }
int Tape::log_softmax(int a) { return record(OpKind::kLogSoftmax, {a}); }

int Tape::gather_rows(int a, std::vector<int> rows) {
  TapeNode n;
  n.kind = OpKind::kGatherRows;
  n.args = {a};
  n.iaux = std::move(rows);
  return record_impl_(std::move(n));
}

int Tape::layer_norm(int a, float eps, bool center) {
  TapeNode n;
  n.kind = OpKind::kLayerNorm;
  n.args = {a};
  n.faux = eps;
  n.center = center;
  return record_impl_(std::move(n));
}

int Tape::concat(const std::vector<int>& parts, int axis) {
  TapeNode n;
  n.kind = OpKind::kConcat;
  n.args = parts;
  n.iaux = {axis};
  return record_impl_(std::move(n));
}

int Tape::sum(int a) { return record(OpKind::kSum, {a}); }
int Tape::mean(int a) { return record(OpKind::kMean, {a}); }
int Tape::mse(int a, int b) { return record(OpKind::kMse, {a, b}); }
int Tape::square(int a) { return record(OpKind::kSquare, {a}); }
int Tape::exp_op(int a) { return record(OpKind::kExp, {a}); }
int Tape::neg(int a) { return record(OpKind::kNeg, {a}); }

float Tape::scalar_value(int id) const {
  const TensorValue& v = value(id);
  if (v.numel() != 1) throw ShapeError("tape: scalar_value on non-scalar node");
  return v.data[0];
}

TensorValue Tape::grad(int id) const {
  const auto& g = grads_[static_cast<size_t>(id)];
  TensorValue out(nodes_[static_cast<size_t>(id)].value.shape);
  if (!g.empty()) out.data = g;
  return out;
}

std::vector<float>& Tape::grad_buf_(int id) {
  auto& g = grads_[static_cast<size_t>(id)];
  if (g.empty()) g.assign(nodes_[static_cast<size_t>(id)].value.numel(), 0.0f);
  return g;
}

void Tape::backward(int loss) {
  if (loss < 0 || loss >= size()) throw ShapeError("tape: backward: bad node id");
  if (nodes_[static_cast<size_t>(loss)].value.numel() != 1)
    throw ShapeError("tape: backward requires a scalar loss node");
  for (auto& g : grads_) g.clear();
  grad_buf_(loss)[0] = 1.0f;
  for (int id = loss; id >= 0; --id) {
    if (grads_[static_cast<size_t>(id)].empty()) continue;
    if (!nodes_[static_cast<size_t>(id)].needs_grad &&
        nodes_[static_cast<size_t>(id)].kind == OpKind::kLeaf)
      continue;
    backward_node_(id);
  }
}

void Tape::backward_node_(int id) {
  const TapeNode& nd = nodes_[static_cast<size_t>(id)];
  if (nd.kind == OpKind::kLeaf || nd.args.empty()) return;
  const std::vector<float>& g = grads_[static_cast<size_t>(id)];
  const TensorValue& y = nd.value;

  auto arg_val = [&](int i) -> const TensorValue& {
    return nodes_[static_cast<size_t>(nd.args[static_cast<size_t>(i)])].value;
  };
  auto arg_needs = [&](int i) {
    return nodes_[static_cast<size_t>(nd.args[static_cast<size_t>(i)])].needs_grad;
  };
  auto acc = [&](int i, const std::vector<float>& delta) {
    auto& buf = grad_buf_(nd.args[static_cast<size_t>(i)]);
    for (size_t t = 0; t < buf.size(); ++t) buf[t] += delta[t];
  };

  switch (nd.kind) {
    case OpKind::kMatmul: {
      const TensorValue& A = arg_val(0);
      const TensorValue& B = arg_val(1);
      const MatDims d = matmul_dims(nd, A.shape, B.shape);
      if (arg_needs(0)) {
        std::vector<float> da(A.numel());
        if (!nd.ta && !nd.tb)
          kern::matmul(g.data(), B.data.data(), da.data(), d.m, d.n, d.k, false, true);
        else if (!nd.ta && nd.tb)
          kern::matmul(g.data(), B.data.data(), da.data(), d.m, d.n, d.k, false, false);
        else if (nd.ta && !nd.tb)
          kern::matmul(B.data.data(), g.data(), da.data(), d.k, d.n, d.m, false, true);
        else
          kern::matmul(B.data.data(), g.data(), da.data(), d.k, d.n, d.m, true, true);
        acc(0, da);
      }
      if (arg_needs(1)) {
        std::vector<float> db(B.numel());
        if (!nd.ta && !nd.tb)
          kern::matmul(A.data.data(), g.data(), db.data(), d.k, d.m, d.n, true, false);
        else if (nd.ta && !nd.tb)
          kern::matmul(A.data.data(), g.data(), db.data(), d.k, d.m, d.n, false, false);
        else if (!nd.ta && nd.tb)
          kern::matmul(g.data(), A.data.data(), db.data(), d.n, d.m, d.k, true, false);
        else
          kern::matmul(g.data(), A.data.data(), db.data(), d.n, d.m, d.k, true, true);
        acc(1, db);
      }
      break;
    }
    case OpKind::kAdd: {
      const TensorValue& A = arg_val(0);
      const TensorValue& B = arg_val(1);
      if (arg_needs(0)) acc(0, g);
      if (arg_needs(1)) {
        if (row_broadcast(A.shape, B.shape)) {
          const int cols = last_dim(A.shape);
          const size_t rows = A.numel() / static_cast<size_t>(cols);
          std::vector<float> db(B.numel(), 0.0f);
          for (int j = 0; j < cols; ++j) {
            double s = 0.0;
            for (size_t i = 0; i < rows; ++i) s += static_cast<double>(g[i * cols + j]);
            db[static_cast<size_t>(j)] = static_cast<float>(s);
          }
          acc(1, db);
        } else {
          acc(1, g);
        }
      }
      break;
    }
    case OpKind::kMul: {
      const TensorValue& A = arg_val(0);
      const TensorValue& B = arg_val(1);
      const bool scalar_b = B.numel() == 1 && A.numel() != 1;
      const bool bcast = !scalar_b && row_broadcast(A.shape, B.shape);
      if (arg_needs(0)) {
        std::vector<float> da(A.numel());
        if (scalar_b) {
          for (size_t i = 0; i < da.size(); ++i) da[i] = g[i] * B.data[0];
        } else if (bcast) {
          const int cols = last_dim(A.shape);
          for (size_t i = 0; i < da.size(); ++i) da[i] = g[i] * B.data[i % cols];
        } else {
          for (size_t i = 0; i < da.size(); ++i) da[i] = g[i] * B.data[i];
        }
        acc(0, da);
      }
      if (arg_needs(1)) {
        std::vector<float> db(B.numel(), 0.0f);
        if (scalar_b) {
          double s = 0.0;
          for (size_t i = 0; i < A.numel(); ++i)
            s += static_cast<double>(g[i]) * static_cast<double>(A.data[i]);
          db[0] = static_cast<float>(s);
        } else if (bcast) {
          const int cols = last_dim(A.shape);
          const size_t rows = A.numel() / static_cast<size_t>(cols);
          for (int j = 0; j < cols; ++j) {
            double s = 0.0;
            for (size_t i = 0; i < rows; ++i)
              s += static_cast<double>(g[i * cols + j]) *
                   static_cast<double>(A.data[i * cols + j]);
            db[static_cast<size_t>(j)] = static_cast<float>(s);
          }
        } else {
          for (size_t i = 0; i < db.size(); ++i) db[i] = g[i] * A.data[i];
        }
        acc(1, db);
      }
      break;
    }
    case OpKind::kScale: {
      if (!arg_needs(0)) break;
      std::vector<float> da(g.size());
      for (size_t i = 0; i < g.size(); ++i) da[i] = g[i] * nd.faux;
      acc(0, da);
      break;
    }
    case OpKind::kTanh: {
      if (!arg_needs(0)) break;
      std::vector<float> da(g.size());
      for (size_t i = 0; i < g.size(); ++i) da[i] = g[i] * (1.0f - y.data[i] * y.data[i]);
      acc(0, da);
      break;
    }
    case OpKind::kGelu: {
      if (!arg_needs(0)) break;
      const TensorValue& X = arg_val(0);
      std::vector<float> da(g.size());
      for (size_t i = 0; i < g.size(); ++i)
        da[i] = static_cast<float>(static_cast<double>(g[i]) *
                                   kern::gelu_grad(static_cast<double>(X.data[i])));
      acc(0, da);
      break;
    }
    case OpKind::kSoftmax: {
      if (!arg_needs(0)) break;
      const int cols = last_dim(y.shape);
      const size_t rows = y.numel() / static_cast<size_t>(cols);
      std::vector<float> da(g.size());
      for (size_t r = 0; r < rows; ++r) {
        double dot = 0.0;
        for (int j = 0; j < cols; ++j)
          dot += static_cast<double>(g[r * cols + j]) * static_cast<double>(y.data[r * cols + j]);
        for (int j = 0; j < cols; ++j)
          da[r * cols + j] = static_cast<float>(
              static_cast<double>(y.data[r * cols + j]) *
              (static_cast<double>(g[r * cols + j]) - dot));
      }
      acc(0, da);
      break;
    }
    case OpKind::kLogSoftmax: {
      if (!arg_needs(0)) break;
      const int cols = last_dim(y.shape);
      const size_t rows = y.numel() / static_cast<size_t>(cols);
      std::vector<float> da(g.size());
      for (size_t r = 0; r < rows; ++r) {
        double gs = 0.0;
        for (int j = 0; j < cols; ++j) gs += static_cast<double>(g[r * cols + j]);
        for (int j = 0; j < cols; ++j) {
          const double sm = std::exp(static_cast<double>(y.data[r * cols + j]));
          da[r * cols + j] =
              static_cast<float>(static_cast<double>(g[r * cols + j]) - sm * gs);
        }
      }
      acc(0, da);
      break;
    }
    case OpKind::kGatherRows: {
      if (!arg_needs(0)) break;
      const TensorValue& A = arg_val(0);
      const int cols = A.shape[1];
      std::vector<float> da(A.numel(), 0.0f);
      for (size_t r = 0; r < nd.iaux.size(); ++r)
        for (int j = 0; j < cols; ++j)
          da[static_cast<size_t>(nd.iaux[r]) * cols + j] += g[r * cols + j];
      acc(0, da);
      break;
    }
    case OpKind::kLayerNorm: {
      if (!arg_needs(0)) break;
      const TensorValue& X = arg_val(0);
      const int cols = last_dim(X.shape);
      const size_t rows = X.numel() / static_cast<size_t>(cols);
      const double eps = static_cast<double>(nd.faux);
      std::vector<float> da(g.size());
      for (size_t r = 0; r < rows; ++r) {
        const float* x = X.data.data() + r * cols;
        const float* yr = y.data.data() + r * cols;
        const float* gr = g.data() + r * cols;
        double mean = 0.0;
        if (nd.center) {
          for (int j = 0; j < cols; ++j) mean += static_cast<double>(x[j]);
          mean /= cols;
        }
        double var = 0.0;
        for (int j = 0; j < cols; ++j) {
          const double d = static_cast<double>(x[j]) - mean;
          var += d * d;
        }
        var /= cols;
        const double inv = 1.0 / std::sqrt(var + eps);
        double g_mean = 0.0, gy_mean = 0.0;
        for (int j = 0; j < cols; ++j) {
          g_mean += static_cast<double>(gr[j]);
          gy_mean += static_cast<double>(gr[j]) * static_cast<double>(yr[j]);
        }
        g_mean /= cols;
        gy_mean /= cols;
        for (int j = 0; j < cols; ++j) {
          double t = static_cast<double>(gr[j]);
          if (nd.center) t -= g_mean;
          t -= static_cast<double>(yr[j]) * gy_mean;
          da[r * cols + j] = static_cast<float>(t * inv);
        }
      }
      acc(0, da);
      break;
    }
    case OpKind::kConcat: {
      const int axis = nd.iaux[0];
      if (axis == 0) {
        size_t off = 0;
        for (size_t a = 0; a < nd.args.size(); ++a) {
          const size_t cnt = arg_val(static_cast<int>(a)).numel();
          if (arg_needs(static_cast<int>(a))) {
            std::vector<float> da(g.begin() + static_cast<long>(off),
                                  g.begin() + static_cast<long>(off + cnt));
            acc(static_cast<int>(a), da);
          }
          off += cnt;
        }
      } else {
        const int out_cols = y.shape[1];
        const int rows = y.shape[0];
        int col_off = 0;
        for (size_t a = 0; a < nd.args.size(); ++a) {
          const int c = arg_val(static_cast<int>(a)).shape[1];
          if (arg_needs(static_cast<int>(a))) {
            std::vector<float> da(static_cast<size_t>(rows) * c);
            for (int i = 0; i < rows; ++i)
              for (int j = 0; j < c; ++j)
                da[static_cast<size_t>(i) * c + j] =
                    g[static_cast<size_t>(i) * out_cols + col_off + j];
            acc(static_cast<int>(a), da);
          }
          col_off += c;
        }
      }
      break;
    }
    case OpKind::kSum: {
      if (!arg_needs(0)) break;
      std::vector<float> da(arg_val(0).numel(), g[0]);
      acc(0, da);
      break;
    }
    case OpKind::kMean: {
      if (!arg_needs(0)) break;
      const float s = g[0] / static_cast<float>(arg_val(0).numel());
      std::vector<float> da(arg_val(0).numel(), s);
      acc(0, da);
      break;
    }
    case OpKind::kMse: {
      const TensorValue& A = arg_val(0);
      const TensorValue& B = arg_val(1);
      const double c = 2.0 * static_cast<double>(g[0]) / static_cast<double>(A.numel());
      if (arg_needs(0)) {
        std::vector<float> da(A.numel());
        for (size_t i = 0; i < da.size(); ++i)
          da[i] = static_cast<float>(c * (static_cast<double>(A.data[i]) -
                                          static_cast<double>(B.data[i])));
        acc(0, da);
      }
      if (arg_needs(1)) {
        std::vector<float> db(B.numel());
        for (size_t i = 0; i < db.size(); ++i)
          db[i] = static_cast<float>(-c * (static_cast<double>(A.data[i]) -
                                           static_cast<double>(B.data[i])));
        acc(1, db);
      }
      break;
    }
    case OpKind::kSquare: {
      if (!arg_needs(0)) break;
      const TensorValue& X = arg_val(0);
      std::vector<float> da(g.size());
      for (size_t i = 0; i < g.size(); ++i) da[i] = 2.0f * X.data[i] * g[i];
      acc(0, da);
      break;
    }
    case OpKind::kExp: {
      if (!arg_needs(0)) break;
      std::vector<float> da(g.size());
      for (size_t i = 0; i < g.size(); ++i) da[i] = y.data[i] * g[i];
      acc(0, da);
      break;
    }
    case OpKind::kNeg: {
      if (!arg_needs(0)) break;
      std::vector<float> da(g.size());
      for (size_t i = 0; i < g.size(); ++i) da[i] = -g[i];
      acc(0, da);
      break;
    }
    case OpKind::kLeaf:
      break;
  }
}

// ---------------------------------------------------------------------------
// f64 replay

Fd64Session::Fd64Session(const Tape& tape, int target) : tape_(tape), target_(target) {
  if (target < 0 || target >= tape.size() || tape.node(target).value.numel() != 1)
    throw ShapeError("fd64: target must be a scalar node");
  base_vals_.resize(static_cast<size_t>(target) + 1);
  for (int id = 0; id <= target_; ++id) {
    const TapeNode& nd = tape_.node(id);
    auto& out = base_vals_[static_cast<size_t>(id)];
    out.resize(nd.value.numel());
    if (nd.kind == OpKind::kLeaf) {
      for (size_t i = 0; i < out.size(); ++i) out[i] = static_cast<double>(nd.value.data[i]);
    } else {
      forward_node_(id, base_vals_);
    }
  }
  base_val_ = base_vals_[static_cast<size_t>(target_)][0];
}

void Fd64Session::forward_node_(int id, std::vector<std::vector<double>>& vals) const {
  const TapeNode& nd = tape_.node(id);
  std::vector<const Shape*> shp;
  std::vector<const double*> in;
  for (int a : nd.args) {
    shp.push_back(&tape_.node(a).value.shape);
    in.push_back(vals[static_cast<size_t>(a)].data());
  }
  forward_op<double>(nd, shp, in, nd.value.shape, vals[static_cast<size_t>(id)].data());
}

double Fd64Session::eval(int leaf_id, size_t coord, double delta) {
  if (delta == 0.0) return base_val_;
  // Only nodes downstream of the perturbed leaf change.
  std::vector<char> affected(static_cast<size_t>(target_) + 1, 0);
  affected[static_cast<size_t>(leaf_id)] = 1;
  std::vector<std::vector<double>> vals = base_vals_;
  vals[static_cast<size_t>(leaf_id)][coord] += delta;
  for (int id = leaf_id + 1; id <= target_; ++id) {
    const TapeNode& nd = tape_.node(id);
    bool hit = false;
    for (int a : nd.args) hit = hit || affected[static_cast<size_t>(a)];
    if (!hit) continue;
    affected[static_cast<size_t>(id)] = 1;
    forward_node_(id, vals);
  }
  return vals[static_cast<size_t>(target_)][0];
}

// ---------------------------------------------------------------------------
// Finite-difference oracle

double finite_diff_check(const std::function<double(const std::vector<double>&)>& fn,
                         const std::vector<double>& params,
                         const std::vector<double>& analytic, double h,
                         int n_samples, uint64_t seed) {
  if (h <= 0.0) throw ConfigError("finite_diff_check: h must be > 0");
  if (params.size() != analytic.size())
    throw ShapeError("finite_diff_check: params/analytic size mismatch");
  const double y0 = fn(params);
  const double y1 = fn(params);
  if (y0 != y1)
    throw NumericError("finite_diff_check: fn is non-deterministic (two calls disagree)");

  Rng rng(seed);
  double worst = 0.0;
  const size_t n = params.size();
  const int samples = std::min<int>(n_samples, static_cast<int>(n));
  for (int s = 0; s < samples; ++s) {
    const size_t i = (samples == static_cast<int>(n))
                         ? static_cast<size_t>(s)
                         : static_cast<size_t>(rng.below(n));
    std::vector<double> p = params;
    p[i] = params[i] + h;
    const double fp = fn(p);
    p[i] = params[i] - h;
    const double fm = fn(p);
    const double numeric = (fp - fm) / (2.0 * h);
    const double rel = std::abs(analytic[i] - numeric) / std::max(1e-8, std::abs(numeric));
    worst = std::max(worst, rel);
  }
  return worst;
}

double tape_fd_check(Tape& tape, int loss, const std::vector<int>& leaves, double h,
                     int n_samples, uint64_t seed) {
  tape.backward(loss);
  Fd64Session fd(tape, loss);
  // Flatten (leaf, coord) into one index space and sample from it.
  struct Slot {
    int leaf;
    size_t coord;
  };
  std::vector<Slot> slots;
  for (int l : leaves) {
    const size_t n = tape.value(l).numel();
    for (size_t c = 0; c < n; ++c) slots.push_back({l, c});
  }
  Rng rng(seed);
  double worst = 0.0;
  const int samples = std::min<int>(n_samples, static_cast<int>(slots.size()));
  for (int s = 0; s < samples; ++s) {
    const Slot& sl = (samples == static_cast<int>(slots.size()))
                         ? slots[static_cast<size_t>(s)]
                         : slots[static_cast<size_t>(rng.below(slots.size()))];
    const double fp = fd.eval(sl.leaf, sl.coord, h);
    const double fm = fd.eval(sl.leaf, sl.coord, -h);
    const double numeric = (fp - fm) / (2.0 * h);
    const double analytic = static_cast<double>(tape.grad(sl.leaf).data[sl.coord]);
    const double rel = std::abs(analytic - numeric) / std::max(1e-8, std::abs(numeric));
    worst = std::max(worst, rel);
  }
  return worst;
}

}  // namespace lapo
