#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <memory>
#include <numeric>
#include <span>
#include <string>
#include <vector>

#include "qmrs/error.hpp"

namespace qmrs::nc {

using Shape = std::vector<std::size_t>;

inline std::size_t numel(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1},
                         std::multiplies<>());
}

inline std::string shape_str(const Shape& shape) {
  std::string s = "[";
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) s += ",";
    s += std::to_string(shape[i]);
  }
  return s + "]";
}

template <class T>
struct TensorStorage {
  Shape shape;
  std::vector<T> data;
  std::vector<T> grad;  // sized like data iff requires_grad
  bool requires_grad = false;
  std::string name;
};

// Handle to a dense row-major array. Copies share storage, so a parameter
// captured by a compute graph and the owner in ModelParams see the same
// values and gradients.
template <class T>
class Tensor {
 public:
  using value_type = T;

  Tensor() = default;

  static Tensor zeros(Shape shape, bool requires_grad = false) {
    for (auto e : shape) {
      if (e == 0) raise<DimensionError>("tensor extents must be positive, got ", shape_str(shape));
    }
    Tensor t;
    t.s_ = std::make_shared<TensorStorage<T>>();
    t.s_->data.assign(numel(shape), T(0));
    t.s_->shape = std::move(shape);
    t.set_requires_grad(requires_grad);
    return t;
  }

  static Tensor from(Shape shape, std::vector<T> values, bool requires_grad = false) {
    if (numel(shape) != values.size()) {
      raise<DimensionError>("shape ", shape_str(shape), " holds ", numel(shape),
                            " values, got ", values.size());
    }
    Tensor t = zeros(std::move(shape), false);
    t.s_->data = std::move(values);
    t.set_requires_grad(requires_grad);
    return t;
  }

  static Tensor scalar(T v) { return from({1}, {v}); }

  bool defined() const { return static_cast<bool>(s_); }
  const Shape& shape() const { return s_->shape; }
  std::size_t size() const { return s_->data.size(); }
  std::size_t rank() const { return s_->shape.size(); }
  std::size_t rows() const { return s_->shape.at(0); }
  std::size_t cols() const { return rank() >= 2 ? s_->shape[1] : 1; }

  std::span<T> data() { return s_->data; }
  std::span<const T> data() const { return s_->data; }
  std::span<T> grad() { return s_->grad; }
  std::span<const T> grad() const { return s_->grad; }
  std::vector<T>& values() { return s_->data; }
  const std::vector<T>& values() const { return s_->data; }

  T& operator[](std::size_t i) { return s_->data[i]; }
  const T& operator[](std::size_t i) const { return s_->data[i]; }
  T& at(std::size_t r, std::size_t c) { return s_->data[r * cols() + c]; }
  const T& at(std::size_t r, std::size_t c) const { return s_->data[r * cols() + c]; }

  T item() const {
    if (size() != 1) raise<ContractError>("item() on non-scalar tensor of shape ", shape_str(shape()));
    return s_->data[0];
  }

  bool requires_grad() const { return s_ && s_->requires_grad; }
  void set_requires_grad(bool on) {
    s_->requires_grad = on;
    if (on && s_->grad.size() != s_->data.size()) s_->grad.assign(s_->data.size(), T(0));
    if (!on) s_->grad.clear();
  }
  void zero_grad() { std::fill(s_->grad.begin(), s_->grad.end(), T(0)); }

  const std::string& name() const { return s_->name; }
  void set_name(std::string n) { s_->name = std::move(n); }

  // Deep copy of values; the copy is a fresh leaf.
  Tensor clone(bool requires_grad = false) const {
    Tensor t = from(shape(), s_->data, requires_grad);
    t.s_->name = s_->name;
    return t;
  }

  template <class U>
  Tensor<U> cast(bool requires_grad = false) const {
    std::vector<U> v(s_->data.begin(), s_->data.end());
    Tensor<U> t = Tensor<U>::from(shape(), std::move(v), requires_grad);
    t.set_name(s_->name);
    return t;
  }

  bool all_finite() const {
    return std::all_of(s_->data.begin(), s_->data.end(), [](T v) { return std::isfinite(v); });
  }

  bool same_storage(const Tensor& o) const { return s_ == o.s_; }
  const void* id() const { return s_.get(); }

 private:
  std::shared_ptr<TensorStorage<T>> s_;
};

}  // namespace qmrs::nc
