#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <vector>

namespace lapo::kern {

// Shared numeric primitives. Every forward path in the project (tape ops,
// incremental trunk cache, f64 replay) calls these same routines so that
// cached and uncached evaluation produce identical results. Reductions
// accumulate in double regardless of the storage type.

// C(m,n) = op(A) * op(B), where op transposes when the flag is set.
// A is stored (m,k) or (k,m) when ta; B is (k,n) or (n,k) when tb.
template <class TA, class TB, class TC>
void matmul(const TA* a, const TB* b, TC* c, int m, int k, int n, bool ta, bool tb) {
  constexpr int kStackCols = 512;
  std::vector<double> heap_acc;
  double stack_acc[kStackCols];
  double* acc = stack_acc;
  if (n > kStackCols) {
    heap_acc.resize(static_cast<size_t>(n));
    acc = heap_acc.data();
  }
  for (int i = 0; i < m; ++i) {
    for (int j = 0; j < n; ++j) acc[j] = 0.0;
    for (int p = 0; p < k; ++p) {
      const double av = ta ? static_cast<double>(a[static_cast<size_t>(p) * m + i])
                           : static_cast<double>(a[static_cast<size_t>(i) * k + p]);
      if (!tb) {
        const TB* brow = b + static_cast<size_t>(p) * n;
        for (int j = 0; j < n; ++j) acc[j] += av * static_cast<double>(brow[j]);
      } else {
        for (int j = 0; j < n; ++j)
          acc[j] += av * static_cast<double>(b[static_cast<size_t>(j) * k + p]);
      }
    }
    TC* crow = c + static_cast<size_t>(i) * n;
    for (int j = 0; j < n; ++j) crow[j] = static_cast<TC>(acc[j]);
  }
}

template <class T>
void softmax_row(const T* x, T* y, int n) {
  double mx = static_cast<double>(x[0]);
  for (int i = 1; i < n; ++i) mx = std::max(mx, static_cast<double>(x[i]));
  double sum = 0.0;
  for (int i = 0; i < n; ++i) {
    const double e = std::exp(static_cast<double>(x[i]) - mx);
    y[i] = static_cast<T>(e);
    sum += e;
  }
  const double inv = 1.0 / sum;
  for (int i = 0; i < n; ++i) y[i] = static_cast<T>(static_cast<double>(y[i]) * inv);
}

template <class T>
void log_softmax_row(const T* x, T* y, int n) {
  double mx = static_cast<double>(x[0]);
  for (int i = 1; i < n; ++i) mx = std::max(mx, static_cast<double>(x[i]));
  double sum = 0.0;
  for (int i = 0; i < n; ++i) sum += std::exp(static_cast<double>(x[i]) - mx);
  const double lse = mx + std::log(sum);
  for (int i = 0; i < n; ++i) y[i] = static_cast<T>(static_cast<double>(x[i]) - lse);
}

// Normalizes one row. center=true is standard layer norm; center=false is
// the RMS variant (no mean subtraction), also used to build cosine losses.
template <class T>
void norm_row(const T* x, T* y, int n, double eps, bool center) {
  double mean = 0.0;
  if (center) {
    for (int i = 0; i < n; ++i) mean += static_cast<double>(x[i]);
    mean /= n;
  }
  double var = 0.0;
  for (int i = 0; i < n; ++i) {
    const double d = static_cast<double>(x[i]) - mean;
    var += d * d;
  }
  var /= n;
  const double inv = 1.0 / std::sqrt(var + eps);
  for (int i = 0; i < n; ++i)
    y[i] = static_cast<T>((static_cast<double>(x[i]) - mean) * inv);
}

template <class T>
inline T tanh_s(T x) {
  return static_cast<T>(std::tanh(static_cast<double>(x)));
}

// tanh-approximation GELU; its analytic derivative is used in backward so
// gradient checks stay exact.
template <class T>
inline T gelu_s(T x) {
  const double xd = static_cast<double>(x);
  const double u = 0.7978845608028654 * (xd + 0.044715 * xd * xd * xd);
  return static_cast<T>(0.5 * xd * (1.0 + std::tanh(u)));
}

inline double gelu_grad(double x) {
  const double u = 0.7978845608028654 * (x + 0.044715 * x * x * x);
  const double t = std::tanh(u);
  const double du = 0.7978845608028654 * (1.0 + 3.0 * 0.044715 * x * x);
  return 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du;
}

template <class T>
double sum_all(const T* x, size_t n) {
  double s = 0.0;
  for (size_t i = 0; i < n; ++i) s += static_cast<double>(x[i]);
  return s;
}

}  // namespace lapo::kern
