#pragma once

#include <cmath>
#include <cstdint>
#include <map>
#include <random>
#include <string>
#include <vector>

#include "qmrs/numcore/tensor.hpp"

namespace qmrs {

using nc::Shape;
using nc::Tensor;

// Portable uniform draws from a 64-bit Mersenne Twister; the standard
// distributions are implementation-defined and would make checkpoints differ
// across toolchains.
class Rng {
 public:
  explicit Rng(std::uint64_t seed) : gen_(seed) {}

  double uniform() { return static_cast<double>(gen_() >> 11) * 0x1.0p-53; }
  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }
  // Integer in [0, n).
  std::uint64_t below(std::uint64_t n) { return n == 0 ? 0 : gen_() % n; }
  bool coin(double p = 0.5) { return uniform() < p; }
  double normal() {
    const double u1 = 1.0 - uniform(), u2 = uniform();
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(6.283185307179586 * u2);
  }

  // Fisher-Yates with the portable integer draw.
  template <class V>
  void shuffle(V& v) {
    for (std::size_t k = v.size(); k > 1; --k) std::swap(v[k - 1], v[below(k)]);
  }

  std::mt19937_64& engine() { return gen_; }

 private:
  std::mt19937_64 gen_;
};

// Named, ordered collection of learnable tensors.
template <class T>
class ParamStore {
 public:
  Tensor<T>& add(const std::string& name, Shape shape) {
    if (tensors_.count(name)) raise<ContractError>("parameter '", name, "' registered twice");
    auto t = Tensor<T>::zeros(std::move(shape), true);
    t.set_name(name);
    return tensors_.emplace(name, t).first->second;
  }

  Tensor<T>& add_uniform(const std::string& name, Shape shape, double bound, Rng& rng) {
    auto& t = add(name, std::move(shape));
    for (auto& v : t.values()) v = static_cast<T>(rng.uniform(-bound, bound));
    return t;
  }

  Tensor<T>& add_filled(const std::string& name, Shape shape, T value) {
    auto& t = add(name, std::move(shape));
    std::fill(t.values().begin(), t.values().end(), value);
    return t;
  }

  void insert(const std::string& name, Tensor<T> t) {
    t.set_name(name);
    if (!t.requires_grad()) t.set_requires_grad(true);
    tensors_[name] = std::move(t);
  }

  const Tensor<T>& operator[](const std::string& name) const {
    auto it = tensors_.find(name);
    if (it == tensors_.end()) raise<ContractError>("unknown parameter '", name, "'");
    return it->second;
  }
  Tensor<T>& operator[](const std::string& name) {
    auto it = tensors_.find(name);
    if (it == tensors_.end()) raise<ContractError>("unknown parameter '", name, "'");
    return it->second;
  }
  bool contains(const std::string& name) const { return tensors_.count(name) > 0; }

  std::size_t size() const { return tensors_.size(); }
  std::size_t num_values() const {
    std::size_t n = 0;
    for (const auto& [_, t] : tensors_) n += t.size();
    return n;
  }
  auto begin() const { return tensors_.begin(); }
  auto end() const { return tensors_.end(); }
  auto begin() { return tensors_.begin(); }
  auto end() { return tensors_.end(); }

  std::vector<Tensor<T>> list() const {
    std::vector<Tensor<T>> out;
    for (const auto& [_, t] : tensors_) out.push_back(t);
    return out;
  }

  void zero_grad() {
    for (auto& [_, t] : tensors_) t.zero_grad();
  }

  bool all_finite() const {
    for (const auto& [_, t] : tensors_)
      if (!t.all_finite()) return false;
    return true;
  }

  // Independent deep copy (no shared storage).
  template <class U = T>
  ParamStore<U> clone() const {
    ParamStore<U> out;
    for (const auto& [name, t] : tensors_) out.insert(name, t.template cast<U>(true));
    return out;
  }

 private:
  std::map<std::string, Tensor<T>> tensors_;
};

}  // namespace qmrs
