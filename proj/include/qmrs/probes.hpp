#pragma once

#include <chrono>
#include <cstdint>
#include <vector>

#include "qmrs/numcore/gradcheck.hpp"
#include "qmrs/synthetic.hpp"
#include "qmrs/training.hpp"

// End-to-end gradient probe: the full weighted training loss of one seeded
// synthetic instance, differentiated with respect to every model parameter.
namespace qmrs::probes {

struct ModelGradcheck {
  nc::GradcheckResult result;
  std::size_t tensors = 0;
  double seconds = 0;
};

// A reduced width keeps the parameter count (and so the number of finite
// differences) small; every module of the forward pass is still exercised.
inline model::ModelConfig gradcheck_config() {
  model::ModelConfig c;
  c.width = 8;
  c.heads = 2;
  c.layers = 1;
  c.channels = 4;
  c.node_cap = 40;
  return c;
}

inline ModelGradcheck model_gradcheck(std::uint64_t seed = 4, double eps = 1e-3) {
  const auto t0 = std::chrono::steady_clock::now();
  Rng rng(seed);
  const auto sample = synth::make_sample(rng, 64, "probe");
  auto params = model::init_params<double>(gradcheck_config(), seed);
  // Zero-initialised biases put every ReLU fed by a zero patch exactly on its
  // kink, where central differences are meaningless; shift them off it.
  for (auto& [name, t] : params.store)
    if (name.ends_with(".b") || name.ends_with(".b1"))
      for (auto& v : t.values()) v += rng.uniform(0.05, 0.15) * (rng.uniform(0, 1) < 0.5 ? -1 : 1);
  const train::LossWeights w;
  model::ForwardOptions opt;
  opt.tree = qt::gt_quadtree(sample.gt_fine, params.config.node_cap);
  {
    // the coarse mask enters the incoherence heads and the label prior as an
    // untracked constant, so it is held at its unperturbed value
    nc::Graph<double> g(false);
    opt.frozen_coarse = model::forward_refine(g, params, sample.image, sample.box, opt).coarse;
  }
  const auto gt_levels = qt::gt_pyramid(sample.gt_fine);
  auto fn = [&](nc::Graph<double>& g) {
    const auto out = model::forward_refine(g, params, sample.image, sample.box, opt);
    auto lc = train::loss_coarse(g, out.coarse_prob, sample.gt_fine);
    auto lr = train::loss_refine(g, out.labels, out.seq, gt_levels);
    auto li = train::loss_inc(g, out.inc_l1, out.inc_l2, sample.gt_fine);
    return nc::add(g, nc::add(g, nc::scale(g, lc, w.coarse), nc::scale(g, lr, w.refine)), nc::scale(g, li, w.inc));
  };
  std::vector<nc::Tensor<double>> tensors;
  for (auto& [name, t] : params.store) tensors.push_back(t);
  ModelGradcheck r;
  r.tensors = tensors.size();
  r.result = nc::gradcheck<double>(fn, tensors, eps);
  r.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  return r;
}

}  // namespace qmrs::probes
