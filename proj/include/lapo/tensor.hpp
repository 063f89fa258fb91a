#pragma once

#include <cstddef>
#include <numeric>
#include <stdexcept>
#include <string>
#include <vector>

namespace lapo {

using Shape = std::vector<int>;

inline size_t shape_numel(const Shape& s) {
  size_t n = 1;
  for (int d : s) n *= static_cast<size_t>(d);
  return n;
}

inline std::string shape_str(const Shape& s) {
  std::string out = "(";
  for (size_t i = 0; i < s.size(); ++i) {
    if (i) out += ",";
    out += std::to_string(s[i]);
  }
  out += ")";
  return out;
}

// Dense row-major f32 array, rank 1..3. The carrier for every network
// quantity; invariant: data.size() == product(shape).
struct TensorValue {
  Shape shape;
  std::vector<float> data;

  TensorValue() = default;
  explicit TensorValue(Shape s) : shape(std::move(s)), data(shape_numel(shape), 0.0f) {}
  TensorValue(Shape s, std::vector<float> d) : shape(std::move(s)), data(std::move(d)) {
    if (data.size() != shape_numel(shape))
      throw std::invalid_argument("TensorValue: data size " + std::to_string(data.size()) +
                                  " does not match shape " + shape_str(shape));
  }

  static TensorValue scalar(float v) { return TensorValue({1}, {v}); }

  size_t numel() const { return data.size(); }
  int rank() const { return static_cast<int>(shape.size()); }
  int rows() const { return shape.empty() ? 1 : shape[0]; }
  int cols() const { return rank() < 2 ? 1 : shape[1]; }

  float& at(int i, int j) { return data[static_cast<size_t>(i) * cols() + j]; }
  float at(int i, int j) const { return data[static_cast<size_t>(i) * cols() + j]; }

  bool same_shape(const TensorValue& o) const { return shape == o.shape; }
};

}  // namespace lapo
