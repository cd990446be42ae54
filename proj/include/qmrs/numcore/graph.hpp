#pragma once

#include <cmath>
#include <functional>
#include <map>
#include <string>
#include <unordered_set>
#include <utility>
#include <vector>

#include "qmrs/numcore/tensor.hpp"

namespace qmrs::nc {

// Define-by-run tape. Every differentiable op appends one record holding its
// inputs, its output and the closure that pushes output.grad into the inputs.
// Records are replayed once, in reverse, by backward().
template <class T>
class Graph {
 public:
  struct Record {
    std::string op;
    std::vector<Tensor<T>> inputs;
    Tensor<T> output;
    std::function<void()> backward;
  };

  Graph() = default;
  explicit Graph(bool enabled) : enabled_(enabled) {}

  // Inference graphs record nothing; op outputs never require grad.
  bool enabled() const { return enabled_; }
  std::size_t size() const { return tape_.size(); }
  const std::vector<Record>& records() const { return tape_; }

  void clear() { tape_.clear(); }

  bool wants_grad(std::initializer_list<const Tensor<T>*> inputs) const {
    if (!enabled_) return false;
    for (auto* t : inputs) {
      if (t->requires_grad()) return true;
    }
    return false;
  }

  // Checks forward values for NaN/Inf and, when any input is tracked,
  // appends the record. The output is returned for chaining.
  Tensor<T> record(std::string op, std::vector<Tensor<T>> inputs, Tensor<T> output,
                   std::function<void()> backward) {
    if (!output.all_finite()) {
      raise<NumericalError>("non-finite value produced by op '", op, "' (record #", tape_.size(), ")");
    }
    if (output.requires_grad()) {
      tape_.push_back(Record{std::move(op), std::move(inputs), output, std::move(backward)});
    }
    return output;
  }

  // Reverse sweep from a scalar loss. Gradients add into every tracked
  // tensor, so parameter grads accumulate across successive graphs until the
  // caller zeroes them. Returns the gradients of named leaves reached.
  std::map<std::string, Tensor<T>> backward(Tensor<T> loss) {
    if (loss.size() != 1) {
      raise<ContractError>("backward() needs a scalar loss, got shape ", shape_str(loss.shape()));
    }
    if (!loss.requires_grad()) {
      raise<ContractError>("loss does not depend on any tracked tensor");
    }
    loss.grad()[0] += T(1);
    std::unordered_set<const void*> seen;
    std::map<std::string, Tensor<T>> named;
    for (std::size_t k = tape_.size(); k-- > 0;) {
      Record& rec = tape_[k];
      rec.backward();
      for (auto& in : rec.inputs) {
        if (!in.requires_grad()) continue;
        for (T v : in.grad()) {
          if (!std::isfinite(v)) {
            raise<NumericalError>("non-finite gradient flowing out of op '", rec.op, "' (record #", k, ")");
          }
        }
        if (!in.name().empty() && seen.insert(in.id()).second) named.emplace(in.name(), in);
      }
    }
    return named;
  }

 private:
  bool enabled_ = true;
  std::vector<Record> tape_;
};

}  // namespace qmrs::nc
