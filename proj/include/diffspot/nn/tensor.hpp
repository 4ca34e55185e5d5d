#ifndef DIFFSPOT_NN_TENSOR_HPP_
#define DIFFSPOT_NN_TENSOR_HPP_

#include <cmath>
#include <cstdint>
#include <memory>
#include <numeric>
#include <string>
#include <vector>

#include "diffspot/common.hpp"
#include "diffspot/rng.hpp"

namespace diffspot::nn {

// Dense row-major tensor. Feature maps are [C,H,W] (batch is always one
// image pair), linear activations are [N,D].
template <typename T>
struct Tensor {
  std::vector<int> shape;
  std::vector<T> data;

  Tensor() = default;
  explicit Tensor(std::vector<int> s) : shape(std::move(s)) {
    data.assign(numel_of(shape), T(0));
  }

  static std::size_t numel_of(const std::vector<int>& s) {
    std::size_t n = 1;
    for (int d : s) {
      if (d < 0) throw ShapeMismatch("negative tensor dimension");
      n *= static_cast<std::size_t>(d);
    }
    return s.empty() ? 0 : n;
  }

  static Tensor zeros(std::vector<int> s) { return Tensor(std::move(s)); }

  std::size_t numel() const { return data.size(); }
  bool empty() const { return data.empty(); }
  int dim(int i) const { return shape.at(static_cast<std::size_t>(i)); }

  T& operator[](std::size_t i) { return data[i]; }
  const T& operator[](std::size_t i) const { return data[i]; }

  // [C,H,W] accessor.
  T& at3(int c, int y, int x) {
    return data[(static_cast<std::size_t>(c) * shape[1] + y) * shape[2] + x];
  }
  const T& at3(int c, int y, int x) const {
    return data[(static_cast<std::size_t>(c) * shape[1] + y) * shape[2] + x];
  }

  // [N,D] accessor.
  T& at2(int n, int d) { return data[static_cast<std::size_t>(n) * shape[1] + d]; }
  const T& at2(int n, int d) const {
    return data[static_cast<std::size_t>(n) * shape[1] + d];
  }

  void fill(T v) { std::fill(data.begin(), data.end(), v); }

  Tensor reshaped(std::vector<int> s) const {
    if (numel_of(s) != numel()) throw ShapeMismatch("reshape changes element count");
    Tensor out;
    out.shape = std::move(s);
    out.data = data;
    return out;
  }

  bool same_shape(const Tensor& o) const { return shape == o.shape; }
};

template <typename T>
std::string shape_string(const Tensor<T>& t) {
  std::string s = "[";
  for (std::size_t i = 0; i < t.shape.size(); ++i)
    s += (i ? "," : "") + std::to_string(t.shape[i]);
  return s + "]";
}

// Learnable parameter; layers hold these by shared_ptr so two branch
// instances of one layer accumulate gradients into the same buffers.
template <typename T>
struct Param {
  std::string name;
  Tensor<T> value;
  Tensor<T> grad;

  Param(std::string n, std::vector<int> shape)
      : name(std::move(n)), value(shape), grad(std::move(shape)) {}

  void zero_grad() { grad.fill(T(0)); }
};

template <typename T>
using ParamPtr = std::shared_ptr<Param<T>>;

// Uniform xavier init on +-sqrt(6 / (fan_in + fan_out)).
template <typename T>
void xavier_fill(Tensor<T>& t, int fan_in, int fan_out, Rng& rng) {
  const double bound = std::sqrt(6.0 / (fan_in + fan_out));
  for (T& v : t.data) v = static_cast<T>(rng.uniform(-bound, bound));
}

}  // namespace diffspot::nn

#endif  // DIFFSPOT_NN_TENSOR_HPP_
