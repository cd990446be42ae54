#pragma once

#include <cmath>
#include <cstdint>
#include <cstdio>
#include <functional>
#include <string>
#include <vector>

#include "qmrs/eval.hpp"
#include "qmrs/model.hpp"
#include "qmrs/synthetic.hpp"

// Multi-task loss, Adam, and the seeded training loop.
namespace qmrs::train {

using nc::Graph;

struct LossWeights {
  double detect = 0.75;
  double coarse = 0.75;
  double refine = 0.8;
  double inc = 0.5;

  void validate() const {
    if (detect < 0 || coarse < 0 || refine < 0 || inc < 0) {
      raise<ConfigError>("loss weights must be nonnegative, got {", detect, ", ", coarse, ", ", refine, ", ", inc, "}");
    }
  }
  bool operator==(const LossWeights&) const = default;
};

struct LossParts {
  double detect = 0;  // detection is out of scope; the slot stays at zero
  double coarse = 0;
  double refine = 0;
  double inc = 0;
};

inline double loss_total(const LossParts& p, const LossWeights& w) {
  w.validate();
  return w.detect * p.detect + w.coarse * p.coarse + w.refine * p.refine + w.inc * p.inc;
}

// Mean |label − GT| over sequence entries; context entries are included
// unless `include_context` is false. Returns an untracked zero when nothing
// is supervised.
template <class T>
Tensor<T> loss_refine(Graph<T>& g, const Tensor<T>& labels, const qt::NodeSequence& seq,
                      const std::array<MaskGrid, kLevels>& gt_levels, bool include_context = true) {
  if (labels.size() != seq.size()) raise<DimensionError>("loss_refine: ", labels.size(), " labels for ", seq.size(), " entries");
  nc::GatherPlan<T> plan;
  std::vector<T> target;
  for (std::size_t k = 0; k < seq.size(); ++k) {
    if (!include_context && seq[k].source == qt::EntrySource::kContext) continue;
    plan.tap(k, T(1));
    plan.end_row();
    target.push_back(static_cast<T>(qt::entry_target(seq[k], gt_levels)));
  }
  if (target.empty()) return Tensor<T>::scalar(T(0));
  if (target.size() == seq.size()) return nc::l1_mean(g, labels, std::span<const T>(target));
  return nc::l1_mean(g, nc::gather(g, labels, std::move(plan)), std::span<const T>(target));
}

// Mean BCE over the 196 + 784 cells of both incoherence grids.
template <class T>
Tensor<T> loss_inc(Graph<T>& g, const Tensor<T>& inc_l1, const Tensor<T>& inc_l2, const MaskGrid& gt_fine) {
  std::vector<T> target;
  for (int l : {1, 2})
    for (float v : qt::gt_incoherence(gt_fine, l).values) target.push_back(static_cast<T>(v));
  return nc::bce_mean(g, nc::concat_rows(g, {inc_l1, inc_l2}), std::span<const T>(target));
}

template <class T>
Tensor<T> loss_coarse(Graph<T>& g, const Tensor<T>& coarse_prob, const MaskGrid& gt_fine) {
  const auto gt = qt::downsample_mask(gt_fine, 1);
  std::vector<T> target(gt.values.begin(), gt.values.end());
  return nc::bce_mean(g, coarse_prob, std::span<const T>(target));
}

template <class T>
struct InstanceLoss {
  Tensor<T> total;
  LossParts parts;
  model::RefineOutput<T> out;
};

// Forward pass plus weighted loss for one sample. With `teacher` the tree
// comes from GT incoherence instead of the predicted scores.
template <class T>
InstanceLoss<T> instance_loss(Graph<T>& g, const model::ModelParams<T>& p, const InstanceSample& s, const LossWeights& w,
                              bool teacher, bool include_context = true) {
  w.validate();
  model::ForwardOptions opt;
  if (teacher) opt.tree = qt::gt_quadtree(s.gt_fine, p.config.node_cap);
  InstanceLoss<T> r;
  r.out = model::forward_refine(g, p, s.image, s.box, opt);
  auto lc = loss_coarse(g, r.out.coarse_prob, s.gt_fine);
  auto lr = loss_refine(g, r.out.labels, r.out.seq, qt::gt_pyramid(s.gt_fine), include_context);
  auto li = loss_inc(g, r.out.inc_l1, r.out.inc_l2, s.gt_fine);
  r.parts = {0.0, static_cast<double>(lc.item()), static_cast<double>(lr.item()), static_cast<double>(li.item())};
  r.total = nc::add(g, nc::add(g, nc::scale(g, lc, static_cast<T>(w.coarse)), nc::scale(g, lr, static_cast<T>(w.refine))),
                    nc::scale(g, li, static_cast<T>(w.inc)));
  return r;
}

struct TrainConfig {
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double adam_eps = 1e-8;
  int epochs = 30;
  int batch = 8;
  std::uint64_t seed = 1;
  int teacher_epochs = 30;  // GT tree for every epoch by default
  bool refine_context = true;
  bool augment = true;
  LossWeights weights;

  void validate() const {
    if (lr < 0) raise<ConfigError>("learning rate must be nonnegative");
    if (epochs <= 0 || batch <= 0) raise<ConfigError>("epochs and batch size must be positive");
    if (teacher_epochs < 0) raise<ConfigError>("teacher epochs must be nonnegative");
    if (!(beta1 >= 0 && beta1 < 1 && beta2 >= 0 && beta2 < 1 && adam_eps > 0)) raise<ConfigError>("invalid Adam constants");
    weights.validate();
  }
  bool operator==(const TrainConfig&) const = default;
};

template <class T>
class Adam {
 public:
  Adam(double lr, double beta1, double beta2, double eps) : lr_(lr), b1_(beta1), b2_(beta2), eps_(eps) {}

  // One update from the accumulated grads; grads are left untouched.
  void step(ParamStore<T>& params) {
    ++t_;
    const double c1 = 1.0 - std::pow(b1_, t_), c2 = 1.0 - std::pow(b2_, t_);
    for (auto& [name, p] : params) {
      auto& st = state_[name];
      if (st.m.empty()) st.m.assign(p.size(), 0.0), st.v.assign(p.size(), 0.0);
      auto& v = p.values();
      auto gr = p.grad();
      for (std::size_t i = 0; i < v.size(); ++i) {
        const double gi = gr[i];
        st.m[i] = b1_ * st.m[i] + (1 - b1_) * gi;
        st.v[i] = b2_ * st.v[i] + (1 - b2_) * gi * gi;
        const double upd = lr_ * (st.m[i] / c1) / (std::sqrt(st.v[i] / c2) + eps_);
        v[i] = static_cast<T>(v[i] - upd);
      }
    }
  }

  int steps() const { return t_; }
  double lr() const { return lr_; }
  void set_lr(double lr) { lr_ = lr; }

 private:
  struct Moments {
    std::vector<double> m, v;
  };
  double lr_, b1_, b2_, eps_;
  int t_ = 0;
  std::map<std::string, Moments> state_;
};

// Mean RoI-frame IoUs of refined, coarse (bilinear) and empty-tree masks.
template <class T>
eval::IouSummary evaluate_iou(const model::ModelParams<T>& p, const std::vector<InstanceSample>& samples) {
  eval::IouSummary s;
  for (const auto& smp : samples) {
    Graph<T> g(false);
    const auto out = model::forward_refine(g, p, smp.image, smp.box);
    s.refined += eval::grid_iou(out.refined, smp.gt_fine);
    s.coarse += eval::grid_iou(eval::upsample_bilinear(out.coarse), smp.gt_fine);
    s.empty_tree += eval::grid_iou(qt::upsample_nearest(out.coarse), smp.gt_fine);
  }
  s.count = samples.size();
  if (s.count) {
    const double n = static_cast<double>(s.count);
    s.refined /= n, s.coarse /= n, s.empty_tree /= n;
  }
  return s;
}

struct EpochLog {
  int epoch = 0;
  bool teacher = false;
  LossParts parts;  // means over the epoch's samples
  double total = 0;
  double val_refined_iou = 0;
  double val_coarse_iou = 0;
};

inline std::string format_epoch(const EpochLog& e, int epochs) {
  char buf[320];
  std::snprintf(buf, sizeof buf,
                "epoch %d/%d teacher=%d loss=%.6f coarse=%.6f refine=%.6f inc=%.6f val_refined_iou=%.9f val_coarse_iou=%.9f",
                e.epoch, epochs, e.teacher ? 1 : 0, e.total, e.parts.coarse, e.parts.refine, e.parts.inc, e.val_refined_iou,
                e.val_coarse_iou);
  return buf;
}

inline std::string format_best(int epoch, double iou) {
  char buf[96];
  std::snprintf(buf, sizeof buf, "best epoch=%d val_refined_iou=%.9f", epoch, iou);
  return buf;
}

struct TrainResult {
  model::ModelParams<float> params;  // best validation epoch
  std::vector<EpochLog> log;
  int best_epoch = 0;
  double best_val_iou = 0;
};

using LogSink = std::function<void(const std::string&)>;

inline TrainResult train(const DatasetSplit& split, const model::ModelConfig& mcfg, const TrainConfig& cfg,
                         const LogSink& sink = {}) {
  cfg.validate();
  mcfg.validate();
  if (split.train.empty()) raise<ConfigError>("training split is empty");
  auto params = model::init_params<float>(mcfg, cfg.seed);
  Adam<float> opt(cfg.lr, cfg.beta1, cfg.beta2, cfg.adam_eps);
  Rng rng(cfg.seed ^ 0x5eedULL);
  TrainResult res;
  bool have_best = false;

  std::vector<std::size_t> order(split.train.size());
  for (std::size_t k = 0; k < order.size(); ++k) order[k] = k;
  const float inv_batch = 1.0f / static_cast<float>(cfg.batch);

  for (int epoch = 1; epoch <= cfg.epochs; ++epoch) {
    rng.shuffle(order);
    EpochLog log;
    log.epoch = epoch;
    log.teacher = epoch <= cfg.teacher_epochs;
    params.store.zero_grad();
    int in_batch = 0;
    for (std::size_t step = 0; step < order.size(); ++step) {
      const auto& base = split.train[order[step]];
      const InstanceSample s = cfg.augment ? synth::augment(base, rng) : base;
      try {
        Graph<float> g;
        auto il = instance_loss(g, params, s, cfg.weights, log.teacher, cfg.refine_context);
        g.backward(nc::scale(g, il.total, inv_batch));
        log.parts.coarse += il.parts.coarse;
        log.parts.refine += il.parts.refine;
        log.parts.inc += il.parts.inc;
        if (++in_batch == cfg.batch || step + 1 == order.size()) {
          opt.step(params.store);
          params.store.zero_grad();
          in_batch = 0;
          if (!params.store.all_finite()) raise<NumericalError>("non-finite parameter after update");
        }
      } catch (const NumericalError& e) {
        raise<NumericalError>("training diverged at epoch ", epoch, " step ", step, " (sample ", s.id, "): ", e.what());
      }
    }
    const double n = static_cast<double>(order.size());
    log.parts.coarse /= n, log.parts.refine /= n, log.parts.inc /= n;
    log.total = loss_total(log.parts, cfg.weights);
    if (!split.val.empty()) {
      const auto iou = evaluate_iou(params, split.val);
      log.val_refined_iou = iou.refined;
      log.val_coarse_iou = iou.coarse;
    }
    if (!have_best || log.val_refined_iou > res.best_val_iou) {
      have_best = true;
      res.best_epoch = epoch;
      res.best_val_iou = log.val_refined_iou;
      res.params = params.cast<float>();
    }
    if (sink) sink(format_epoch(log, cfg.epochs));
    res.log.push_back(log);
  }
  if (sink) sink(format_best(res.best_epoch, res.best_val_iou));
  return res;
}

// Repeated updates on a single sample (batch of one, GT tree throughout).
// Returns the total loss measured at each step before its update.
inline std::vector<double> overfit(const InstanceSample& s, const model::ModelConfig& mcfg, const TrainConfig& cfg, int steps) {
  cfg.validate();
  auto params = model::init_params<float>(mcfg, cfg.seed);
  Adam<float> opt(cfg.lr, cfg.beta1, cfg.beta2, cfg.adam_eps);
  std::vector<double> losses;
  for (int k = 0; k < steps; ++k) {
    Graph<float> g;
    auto il = instance_loss(g, params, s, cfg.weights, true, cfg.refine_context);
    losses.push_back(loss_total(il.parts, cfg.weights));
    params.store.zero_grad();
    g.backward(il.total);
    opt.step(params.store);
  }
  return losses;
}

}  // namespace qmrs::train
