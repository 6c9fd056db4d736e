#pragma once

#include <cstddef>
#include <functional>
#include <numeric>
#include <sstream>
#include <string>
#include <vector>

#include "hse/errors.hpp"

namespace hse {

inline std::string shape_str(const std::vector<int>& shape) {
  std::ostringstream os;
  os << "[";
  for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? "x" : "") << shape[i];
  os << "]";
  return os.str();
}

inline std::size_t checked_numel(const std::vector<int>& shape) {
  std::size_t n = 1;
  for (int e : shape) {
    if (e <= 0) throw DimensionError("non-positive extent in shape " + shape_str(shape));
    n *= static_cast<std::size_t>(e);
  }
  return n;
}

// Dense row-major N-d array. Immutable by convention once an op has produced
// it; ops never write through their inputs. `node` ties the value to a
// GradTape record (-1 = constant, not tracked). T is float for training and
// double for gradient checking.
template <typename T>
struct Tensor {
  std::vector<int> shape;
  std::vector<T> data;
  int node = -1;

  Tensor() = default;
  explicit Tensor(std::vector<int> s) : shape(std::move(s)), data(checked_numel(shape), T(0)) {}
  Tensor(std::vector<int> s, std::vector<T> d) : shape(std::move(s)), data(std::move(d)) {
    if (checked_numel(shape) != data.size())
      throw DimensionError("data length " + std::to_string(data.size()) + " does not match shape " + shape_str(shape));
  }

  static Tensor zeros(std::vector<int> s) { return Tensor(std::move(s)); }
  static Tensor full(std::vector<int> s, T v) {
    Tensor t(std::move(s));
    std::fill(t.data.begin(), t.data.end(), v);
    return t;
  }
  static Tensor scalar(T v) { return Tensor({1}, {v}); }

  int rank() const { return static_cast<int>(shape.size()); }
  int dim(int i) const { return shape[static_cast<std::size_t>(i)]; }
  std::size_t numel() const { return data.size(); }

  T& operator()(int i) { return data[static_cast<std::size_t>(i)]; }
  T operator()(int i) const { return data[static_cast<std::size_t>(i)]; }
  T& operator()(int i, int j) { return data[static_cast<std::size_t>(i) * shape[1] + j]; }
  T operator()(int i, int j) const { return data[static_cast<std::size_t>(i) * shape[1] + j]; }
  T& operator()(int i, int j, int k) {
    return data[(static_cast<std::size_t>(i) * shape[1] + j) * shape[2] + k];
  }
  T operator()(int i, int j, int k) const {
    return data[(static_cast<std::size_t>(i) * shape[1] + j) * shape[2] + k];
  }

  bool same_shape(const Tensor& o) const { return shape == o.shape; }
};

template <typename T, typename U>
Tensor<U> cast_tensor(const Tensor<T>& t) {
  Tensor<U> out;
  out.shape = t.shape;
  out.data.resize(t.data.size());
  for (std::size_t i = 0; i < t.data.size(); ++i) out.data[i] = static_cast<U>(t.data[i]);
  return out;
}

// Reverse-mode tape. Ops append one record per tracked output; backward()
// replays the records in reverse, accumulating gradients per node. A tape is
// confined to one logical thread. Replaying the same op sequence on the same
// inputs gives bitwise-identical gradients because every kernel below is a
// fixed-order loop.
template <typename T>
class Tape {
 public:
  using BackwardFn = std::function<void(const std::vector<T>& out_grad, Tape<T>& tape)>;

  int push(BackwardFn fn) {
    nodes_.push_back(std::move(fn));
    grads_.emplace_back();
    return static_cast<int>(nodes_.size()) - 1;
  }

  // Register a leaf (parameter or input we want gradients for).
  Tensor<T> watch(Tensor<T> t) {
    t.node = push(BackwardFn());
    return t;
  }

  void accumulate(int node, const T* g, std::size_t n) {
    auto& dst = grads_[static_cast<std::size_t>(node)];
    if (dst.empty()) dst.assign(n, T(0));
    for (std::size_t i = 0; i < n; ++i) dst[i] += g[i];
  }
  void accumulate(int node, const std::vector<T>& g) { accumulate(node, g.data(), g.size()); }

  // Seed d(out)/d(out) = 1 and sweep the records in reverse. `out` must be a
  // tracked scalar.
  void backward(const Tensor<T>& out) {
    if (out.numel() != 1) throw ArgumentError("backward expects a scalar, got shape " + shape_str(out.shape));
    if (out.node < 0) throw ArgumentError("backward on a constant (untracked) value");
    grads_[static_cast<std::size_t>(out.node)].assign(1, T(1));
    for (int i = out.node; i >= 0; --i) {
      auto& g = grads_[static_cast<std::size_t>(i)];
      if (!g.empty() && nodes_[static_cast<std::size_t>(i)]) nodes_[static_cast<std::size_t>(i)](g, *this);
    }
  }

  // Gradient of a watched/tracked tensor; empty vector if nothing flowed.
  std::vector<T> grad(const Tensor<T>& t) const {
    if (t.node < 0) return {};
    const auto& g = grads_[static_cast<std::size_t>(t.node)];
    if (g.empty()) return std::vector<T>(t.numel(), T(0));
    return g;
  }

  std::size_t node_count() const { return nodes_.size(); }

  void clear_grads() {
    for (auto& g : grads_) g.clear();
  }

 private:
  std::vector<BackwardFn> nodes_;
  std::vector<std::vector<T>> grads_;
};

}  // namespace hse
