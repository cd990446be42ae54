#pragma once

#include <cmath>
#include <functional>
#include <string>
#include <vector>

#include "qmrs/numcore/graph.hpp"

namespace qmrs::nc {

struct GradcheckResult {
  double max_error = 0.0;  // max |analytic − numeric| / max(1, |analytic|)
  std::string worst;       // "<param>[<entry>]" of the worst entry
  std::size_t entries = 0;
  double max_tensor_error = 0.0;  // max over tensors of ‖analytic − numeric‖ / max(‖analytic‖, ‖numeric‖)
  std::string worst_tensor;
};

// Compares reverse-mode gradients of a scalar-valued closure against central
// differences (f(θ+ε) − f(θ−ε)) / 2ε, entry by entry over every parameter.
// The closure must rebuild its graph on each call.
template <class T>
GradcheckResult gradcheck(const std::function<Tensor<T>(Graph<T>&)>& fn, std::vector<Tensor<T>> params,
                          double eps) {
  if (!(eps > 0.0)) raise<ContractError>("gradcheck: eps must be positive");
  auto eval = [&]() {
    Graph<T> g(false);
    return static_cast<double>(fn(g).item());
  };
  const double f0 = eval();
  if (eval() != f0) raise<ContractError>("gradcheck: closure is not deterministic");

  for (auto& p : params) {
    if (!p.requires_grad()) raise<ContractError>("gradcheck: parameter '", p.name(), "' is not tracked");
    p.zero_grad();
  }
  {
    Graph<T> g;
    g.backward(fn(g));
  }
  std::vector<std::vector<T>> analytic;
  for (auto& p : params) analytic.emplace_back(p.grad().begin(), p.grad().end());

  GradcheckResult res;
  for (std::size_t pi = 0; pi < params.size(); ++pi) {
    auto& p = params[pi];
    double diff2 = 0, a2 = 0, n2 = 0;
    for (std::size_t i = 0; i < p.size(); ++i) {
      const T saved = p[i];
      const T hi = static_cast<T>(saved + eps), lo = static_cast<T>(saved - eps);
      p[i] = hi;
      const double up = eval();
      p[i] = lo;
      const double down = eval();
      p[i] = saved;
      // divide by the representable step, which differs from 2ε in float
      const double numeric = (up - down) / (static_cast<double>(hi) - static_cast<double>(lo));
      const double a = static_cast<double>(analytic[pi][i]);
      const double err = std::abs(a - numeric) / std::max(1.0, std::abs(a));
      diff2 += (a - numeric) * (a - numeric), a2 += a * a, n2 += numeric * numeric;
      if (res.entries == 0 || err > res.max_error) {
        res.max_error = err;
        res.worst = p.name() + "[" + std::to_string(i) + "]";
      }
      ++res.entries;
    }
    const double scale = std::sqrt(std::max(a2, n2));
    const double terr = scale > 0 ? std::sqrt(diff2) / scale : 0.0;
    if (pi == 0 || terr > res.max_tensor_error) {
      res.max_tensor_error = terr;
      res.worst_tensor = p.name();
    }
    p.zero_grad();
  }
  return res;
}

}  // namespace qmrs::nc
