#pragma once

#include <array>
#include <cmath>
#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "qmrs/features.hpp"
#include "qmrs/numcore/ops.hpp"
#include "qmrs/params.hpp"
#include "qmrs/quadtree.hpp"

// The learned refinement head: coarse and incoherence heads on the RoI
// ladder, node encoder with attention-based channel recalibration, a
// pre-norm transformer over the node sequence with learned relative-position
// biases, and the two-layer MLP pixel decoder.
namespace qmrs::model {

using nc::Graph;

// Incoherence scores are calibrated probabilities of a rare event, so the
// trained model rarely scores a cell above 0.5; selection uses a lower cut.
inline constexpr float kModelThreshold = 0.2f;

struct ModelConfig {
  int width = 64;     // D
  int heads = 4;      // H
  int layers = 3;     // N
  int channels = 16;  // C
  float threshold = kModelThreshold;
  std::size_t node_cap = qt::kDefaultNodeCap;

  int head_dim() const { return width / heads; }
  int gate_hidden() const { return std::max(1, width / 4); }
  void validate() const {
    if (width <= 0 || heads <= 0 || layers <= 0 || channels <= 0) raise<ConfigError>("model sizes must be positive");
    if (width % heads) raise<ConfigError>("model width ", width, " is not divisible by ", heads, " heads");
    if (width < 2) raise<ConfigError>("model width must be at least 2");
    if (!(threshold > 0.0f && threshold < 1.0f)) raise<ConfigError>("quadtree threshold must lie in (0,1)");
  }
  bool operator==(const ModelConfig&) const = default;
};

template <class T>
struct ModelParams {
  ModelConfig config;
  ParamStore<T> store;

  const Tensor<T>& operator[](const std::string& n) const { return store[n]; }

  template <class U>
  ModelParams<U> cast() const {
    return ModelParams<U>{config, store.template clone<U>()};
  }
};

// Relative-position buckets: displacement magnitudes {0, 1, 2–3, 4–7, ≥8}
// with sign give 9 buckets per axis; level differences −3..3 give 7.
inline constexpr int kAxisBuckets = 9;
inline constexpr int kLevelBuckets = 7;
inline constexpr int kBucketsPerHead = kAxisBuckets * kAxisBuckets * kLevelBuckets;
inline constexpr float kIncoherencePriorBias = -2.0f;

inline int axis_bucket(double delta) {
  const double m = std::floor(std::abs(delta));
  const int mag = m < 1 ? 0 : m < 2 ? 1 : m < 4 ? 2 : m < 8 ? 3 : 4;
  return 4 + (delta < 0 ? -mag : mag);
}

inline int level_bucket(int delta_level) {
  if (delta_level < -3 || delta_level > 3) raise<ContractError>("level difference ", delta_level, " outside -3..3");
  return delta_level + 3;
}

template <class T>
ModelParams<T> init_params(const ModelConfig& cfg, std::uint64_t seed) {
  cfg.validate();
  Rng rng(seed);
  ModelParams<T> mp{cfg, {}};
  auto& p = mp.store;
  const auto c = static_cast<std::size_t>(cfg.channels), d = static_cast<std::size_t>(cfg.width);
  const auto gh = static_cast<std::size_t>(cfg.gate_hidden());
  auto kaiming = [](std::size_t fan_in) { return std::sqrt(6.0 / static_cast<double>(fan_in)); };
  auto xavier = [](std::size_t a, std::size_t b) { return std::sqrt(6.0 / static_cast<double>(a + b)); };

  features::init_backbone(p, cfg.channels, rng);

  p.add_uniform("coarse.conv1.w", {9 * c, c}, kaiming(9 * c), rng);
  p.add("coarse.conv1.b", {c});
  p.add_uniform("coarse.conv2.w", {9 * c, c}, kaiming(9 * c), rng);
  p.add("coarse.conv2.b", {c});
  p.add_uniform("coarse.out.w", {c, 1}, xavier(c, 1), rng);
  p.add("coarse.out.b", {1});
  for (const char* h : {"inc1", "inc2"}) {
    const std::string n = h;
    p.add_uniform(n + ".conv.w", {9 * (c + 1), c}, kaiming(9 * (c + 1)), rng);
    p.add(n + ".conv.b", {c});
    p.add_uniform(n + ".out.w", {c, 1}, xavier(c, 1), rng);
    p.add_filled(n + ".out.b", {1}, static_cast<T>(kIncoherencePriorBias));
  }

  p.add_uniform("embed.w", {c + 4, d}, xavier(c + 4, d), rng);
  for (const char* n : {"recal.wq", "recal.wk", "recal.wv"}) p.add_uniform(n, {d, d}, xavier(d, d), rng);
  p.add_uniform("recal.g1", {d, gh}, kaiming(d), rng);
  p.add_uniform("recal.g2", {gh, d}, xavier(gh, d), rng);

  for (int l = 0; l < cfg.layers; ++l) {
    const std::string n = "enc" + std::to_string(l) + ".";
    p.add_filled(n + "ln1.gamma", {d}, T(1));
    p.add(n + "ln1.beta", {d});
    for (const char* w : {"wq", "wk", "wv", "wo"}) p.add_uniform(n + w, {d, d}, xavier(d, d), rng);
    p.add_filled(n + "ln2.gamma", {d}, T(1));
    p.add(n + "ln2.beta", {d});
    p.add_uniform(n + "ffn1.w", {d, 2 * d}, kaiming(d), rng);
    p.add(n + "ffn1.b", {2 * d});
    p.add_uniform(n + "ffn2.w", {2 * d, d}, xavier(2 * d, d), rng);
    p.add(n + "ffn2.b", {d});
  }
  p.add_filled("enc.norm.gamma", {d}, T(1));
  p.add("enc.norm.beta", {d});
  p.add("pos_bias.table", {static_cast<std::size_t>(cfg.heads * kBucketsPerHead), 1});

  p.add_uniform("dec.w1", {d, d / 2}, kaiming(d), rng);
  p.add("dec.b1", {d / 2});
  p.add_uniform("dec.w2", {d / 2, 1}, xavier(d / 2, 1), rng);
  p.add("dec.b2", {1});
  return mp;
}

template <class T>
MaskGrid to_mask(const Tensor<T>& probs, int level) {
  MaskGrid m(level, MaskKind::kProbability);
  if (probs.size() != m.values.size()) raise<DimensionError>("to_mask: ", probs.size(), " values for level ", level);
  for (std::size_t k = 0; k < m.values.size(); ++k) m.values[k] = static_cast<float>(probs[k]);
  return m;
}

// conv3x3 → ReLU → conv3x3 → ReLU → 1×1 → sigmoid over the 14×14 grid.
template <class T>
Tensor<T> coarse_head(Graph<T>& g, const ModelParams<T>& p, const features::RoIFeatureSet<T>& roi) {
  int h = 0, w = 0;
  auto x = nc::relu(g, features::conv3x3(g, roi.grids[1], 14, 14, p["coarse.conv1.w"], p["coarse.conv1.b"], 1, h, w));
  x = nc::relu(g, features::conv3x3(g, x, 14, 14, p["coarse.conv2.w"], p["coarse.conv2.b"], 1, h, w));
  return nc::sigmoid(g, nc::add_row(g, nc::matmul(g, x, p["coarse.out.w"]), p["coarse.out.b"]));
}

// Bilinear read of the 14×14 coarse grid at a point in 56-grid units.
inline double sample_coarse(const MaskGrid& coarse, double x56, double y56) {
  const double fx = std::clamp(x56 / 4.0 - 0.5, 0.0, 13.0);
  const double fy = std::clamp(y56 / 4.0 - 0.5, 0.0, 13.0);
  const int x0 = static_cast<int>(fx), y0 = static_cast<int>(fy);
  const int x1 = std::min(x0 + 1, 13), y1 = std::min(y0 + 1, 13);
  const double wx = fx - x0, wy = fy - y0;
  return (1 - wy) * ((1 - wx) * coarse.at(y0, x0) + wx * coarse.at(y0, x1)) +
         wy * ((1 - wx) * coarse.at(y1, x0) + wx * coarse.at(y1, x1));
}

// conv3x3 → ReLU → 1×1 → sigmoid on the level-1 (14×14) or level-2 (28×28)
// grid. Input is the RoI features plus the coarse mask resampled to the grid
// (untracked).
template <class T>
Tensor<T> incoherence_head(Graph<T>& g, const ModelParams<T>& p, const features::RoIFeatureSet<T>& roi, int level,
                           const MaskGrid& coarse) {
  if (level != 1 && level != 2) raise<ContractError>("incoherence_head: level must be 1 or 2, got ", level);
  const std::string n = "inc" + std::to_string(level);
  const int s = level_side(level);
  const double cell = 56.0 / s;
  auto prior = Tensor<T>::zeros({static_cast<std::size_t>(s * s), 1});
  for (int r = 0; r < s; ++r)
    for (int c = 0; c < s; ++c) prior[static_cast<std::size_t>(r * s + c)] = static_cast<T>(2.0 * sample_coarse(coarse, (c + 0.5) * cell, (r + 0.5) * cell) - 1.0);
  auto in = nc::concat_cols(g, {roi.grids[level], prior});
  int h = 0, w = 0;
  auto x = nc::relu(g, features::conv3x3(g, in, s, s, p[n + ".conv.w"], p[n + ".conv.b"], 1, h, w));
  return nc::sigmoid(g, nc::add_row(g, nc::matmul(g, x, p[n + ".out.w"]), p[n + ".out.b"]));
}

struct Position {
  double x = 0, y = 0;  // 56-grid units
  int level = 0;
};

template <class T>
struct EncodedSequence {
  Tensor<T> x;  // [len, D]
  std::vector<Position> pos;

  std::size_t size() const { return pos.size(); }
};

inline std::vector<Position> positions(const qt::NodeSequence& seq) {
  std::vector<Position> pos;
  pos.reserve(seq.size());
  for (const auto& e : seq.entries) pos.push_back({e.fine_x(), e.fine_y(), e.level});
  return pos;
}

// Per entry: [RoI feature at its level/cell (C) | coarse probability sampled
// bilinearly at the cell centre (1) | x/56, y/56, level/3 (3)] · W_embed.
template <class T>
EncodedSequence<T> encode_nodes(Graph<T>& g, const ModelParams<T>& p, const qt::NodeSequence& seq,
                                const features::RoIFeatureSet<T>& roi, const Tensor<T>& coarse_prob) {
  if (seq.size() == 0) raise<ContractError>("encode_nodes: empty sequence");
  std::array<std::size_t, kLevels> offset{};
  for (int l = 1; l < kLevels; ++l) offset[l] = offset[l - 1] + static_cast<std::size_t>(level_side(l - 1) * level_side(l - 1));

  nc::GatherPlan<T> feat_plan, coarse_plan;
  std::vector<T> coords;
  coords.reserve(seq.size() * 3);
  for (const auto& e : seq.entries) {
    const int s = e.level >= 0 && e.level < kLevels ? level_side(e.level) : 0;
    if (s == 0 || e.i < 0 || e.j < 0 || e.i >= s || e.j >= s) {
      raise<ContractError>("encode_nodes: entry (", e.level, ",", e.i, ",", e.j, ") does not address a grid cell");
    }
    feat_plan.tap(offset[e.level] + static_cast<std::size_t>(e.i * s + e.j), T(1));
    feat_plan.end_row();

    const double fx = std::clamp(e.fine_x() / 4.0 - 0.5, 0.0, 13.0);
    const double fy = std::clamp(e.fine_y() / 4.0 - 0.5, 0.0, 13.0);
    const int x0 = static_cast<int>(std::floor(fx)), y0 = static_cast<int>(std::floor(fy));
    const int x1 = std::min(x0 + 1, 13), y1 = std::min(y0 + 1, 13);
    const double wx = fx - x0, wy = fy - y0;
    coarse_plan.tap(static_cast<std::size_t>(y0 * 14 + x0), static_cast<T>((1 - wy) * (1 - wx)));
    coarse_plan.tap(static_cast<std::size_t>(y0 * 14 + x1), static_cast<T>((1 - wy) * wx));
    coarse_plan.tap(static_cast<std::size_t>(y1 * 14 + x0), static_cast<T>(wy * (1 - wx)));
    coarse_plan.tap(static_cast<std::size_t>(y1 * 14 + x1), static_cast<T>(wy * wx));
    coarse_plan.end_row();

    coords.push_back(static_cast<T>(e.fine_x() / 56.0));
    coords.push_back(static_cast<T>(e.fine_y() / 56.0));
    coords.push_back(static_cast<T>(e.level / 3.0));
  }
  auto all_levels = nc::concat_rows(g, std::vector<Tensor<T>>(roi.grids.begin(), roi.grids.end()));
  auto feats = nc::gather(g, all_levels, std::move(feat_plan));
  auto coarse = nc::gather(g, coarse_prob, std::move(coarse_plan));
  auto coord_t = Tensor<T>::from({seq.size(), 3}, std::move(coords));
  auto raw = nc::concat_cols(g, {feats, coarse, coord_t});
  return {nc::matmul(g, raw, p["embed.w"]), positions(seq)};
}

// Attention weights captured for inspection (row-sum checks).
template <class T>
struct AttentionTrace {
  std::vector<Tensor<T>> weights;
};

// A = softmax((XW_q)(XW_k)ᵀ/√D)(XW_v); g = σ(relu(A·W_g1)·W_g2);
// X' = X ⊙ g + A. No positional term, so the op is permutation-equivariant.
template <class T>
EncodedSequence<T> channel_recalibrate(Graph<T>& g, const ModelParams<T>& p, const EncodedSequence<T>& in,
                                       AttentionTrace<T>* trace = nullptr) {
  if (in.size() == 0) raise<ContractError>("channel_recalibrate: empty sequence");
  const auto& x = in.x;
  auto q = nc::matmul(g, x, p["recal.wq"]);
  auto k = nc::matmul(g, x, p["recal.wk"]);
  auto v = nc::matmul(g, x, p["recal.wv"]);
  auto att = nc::attention(g, q, k, v, std::optional<Tensor<T>>{}, T(1) / std::sqrt(static_cast<T>(x.cols())));
  if (trace) trace->weights.push_back(att.weights);
  auto gate = nc::sigmoid(g, nc::matmul(g, nc::relu(g, nc::matmul(g, att.out, p["recal.g1"])), p["recal.g2"]));
  return {nc::add(g, nc::mul(g, x, gate), att.out), in.pos};
}

// Bucket index (within one head's table) of every (query a, key b) pair,
// using Δ = position(b) − position(a).
inline std::vector<std::uint32_t> relative_buckets(const std::vector<Position>& pos) {
  const std::size_t n = pos.size();
  std::vector<std::uint32_t> idx(n * n);
  for (std::size_t a = 0; a < n; ++a)
    for (std::size_t b = 0; b < n; ++b) {
      const int bx = axis_bucket(pos[b].x - pos[a].x);
      const int by = axis_bucket(pos[b].y - pos[a].y);
      const int bl = level_bucket(pos[b].level - pos[a].level);
      idx[a * n + b] = static_cast<std::uint32_t>((bx * kAxisBuckets + by) * kLevelBuckets + bl);
    }
  return idx;
}

// bias[h] is [len, len] with bias[h][a][b] = table[h][bucket(a, b)].
template <class T>
std::vector<Tensor<T>> relative_position_bias(Graph<T>& g, const ModelParams<T>& p, const std::vector<Position>& pos) {
  const auto buckets = relative_buckets(pos);
  const std::size_t n = pos.size();
  std::vector<Tensor<T>> out;
  for (int h = 0; h < p.config.heads; ++h) {
    std::vector<std::uint32_t> idx(buckets);
    for (auto& v : idx) v += static_cast<std::uint32_t>(h * kBucketsPerHead);
    out.push_back(nc::lookup(g, p["pos_bias.table"], std::move(idx), n, n));
  }
  return out;
}

// One pre-norm layer: x + MHA(LN(x), bias) then x + FFN(LN(x)).
template <class T>
Tensor<T> encoder_layer(Graph<T>& g, const ModelParams<T>& p, int layer, const Tensor<T>& x,
                        const std::vector<Tensor<T>>& bias, AttentionTrace<T>* trace) {
  const std::string n = "enc" + std::to_string(layer) + ".";
  const int heads = p.config.heads;
  const auto dh = static_cast<std::size_t>(p.config.head_dim());
  auto h = nc::layer_norm_rows(g, x, p[n + "ln1.gamma"], p[n + "ln1.beta"]);
  auto q = nc::matmul(g, h, p[n + "wq"]);
  auto k = nc::matmul(g, h, p[n + "wk"]);
  auto v = nc::matmul(g, h, p[n + "wv"]);
  std::vector<Tensor<T>> outs;
  for (int hd = 0; hd < heads; ++hd) {
    const std::size_t off = static_cast<std::size_t>(hd) * dh;
    std::optional<Tensor<T>> b;
    if (!bias.empty()) b = bias[static_cast<std::size_t>(hd)];
    auto att = nc::attention(g, nc::slice_cols(g, q, off, dh), nc::slice_cols(g, k, off, dh), nc::slice_cols(g, v, off, dh),
                             b, T(1) / std::sqrt(static_cast<T>(dh)));
    if (trace) trace->weights.push_back(att.weights);
    outs.push_back(att.out);
  }
  auto merged = heads == 1 ? outs[0] : nc::concat_cols(g, outs);
  auto y = nc::add(g, x, nc::matmul(g, merged, p[n + "wo"]));
  auto h2 = nc::layer_norm_rows(g, y, p[n + "ln2.gamma"], p[n + "ln2.beta"]);
  auto f = nc::relu(g, nc::add_row(g, nc::matmul(g, h2, p[n + "ffn1.w"]), p[n + "ffn1.b"]));
  f = nc::add_row(g, nc::matmul(g, f, p[n + "ffn2.w"]), p[n + "ffn2.b"]);
  return nc::add(g, y, f);
}

// N pre-norm layers, then a closing layer norm.
template <class T>
EncodedSequence<T> sequence_encoder(Graph<T>& g, const ModelParams<T>& p, const EncodedSequence<T>& in,
                                    const std::vector<Tensor<T>>& bias, AttentionTrace<T>* trace = nullptr) {
  if (in.size() == 0) raise<ContractError>("sequence_encoder: empty sequence");
  auto x = in.x;
  for (int l = 0; l < p.config.layers; ++l) x = encoder_layer(g, p, l, x, bias, trace);
  return {nc::layer_norm_rows(g, x, p["enc.norm.gamma"], p["enc.norm.beta"]), in.pos};
}

// Per entry: D → D/2 (ReLU) → 1, before the sigmoid.
template <class T>
Tensor<T> pixel_decode_logits(Graph<T>& g, const ModelParams<T>& p, const EncodedSequence<T>& in) {
  auto h = nc::relu(g, nc::add_row(g, nc::matmul(g, in.x, p["dec.w1"]), p["dec.b1"]));
  return nc::add_row(g, nc::matmul(g, h, p["dec.w2"]), p["dec.b2"]);
}

// Per entry: D → D/2 (ReLU) → 1 (sigmoid).
template <class T>
Tensor<T> pixel_decode(Graph<T>& g, const ModelParams<T>& p, const EncodedSequence<T>& in) {
  return nc::sigmoid(g, pixel_decode_logits(g, p, in));
}

inline constexpr double kPriorClamp = 0.05;

// Logit of the coarse probability at each entry's cell centre (bilinear on
// the 14×14 grid, clamped to [0.02, 0.98]); an untracked per-entry offset.
template <class T>
Tensor<T> coarse_prior_logits(const qt::NodeSequence& seq, const MaskGrid& coarse) {
  auto out = Tensor<T>::zeros({seq.size(), 1});
  for (std::size_t k = 0; k < seq.size(); ++k) {
    const double q = std::clamp(sample_coarse(coarse, seq[k].fine_x(), seq[k].fine_y()), kPriorClamp, 1.0 - kPriorClamp);
    out[k] = static_cast<T>(std::log(q / (1.0 - q)));
  }
  return out;
}

struct ForwardOptions {
  // Replaces the tree built from predicted incoherence (teacher forcing, or an
  // empty tree for the no-refinement baseline).
  std::optional<qt::Quadtree> tree;
  // Replaces the untracked coarse mask fed to the incoherence heads and the
  // label prior. Finite-difference checks pin it at the unperturbed value.
  std::optional<MaskGrid> frozen_coarse;
  bool trace_attention = false;
};

template <class T>
struct RefineOutput {
  Tensor<T> coarse_prob;  // [196, 1]
  Tensor<T> inc_l1;       // [196, 1]
  Tensor<T> inc_l2;       // [784, 1]
  Tensor<T> labels;       // [len, 1], aligned with seq
  MaskGrid coarse;
  MaskGrid scores_l1, scores_l2;
  qt::Quadtree tree;
  qt::NodeSequence seq;
  MaskGrid refined;  // level 3
  AttentionTrace<T> attention;
};

// Full refinement pass for one image and box.
template <class T>
RefineOutput<T> forward_refine(Graph<T>& g, const ModelParams<T>& p, const Image& image, const Box& box,
                               const ForwardOptions& opt = {}) {
  if (!box.valid()) raise<InputError>("forward_refine: box must have positive area");
  RefineOutput<T> out;
  auto pyr = features::extract_pyramid(g, p.store, image);
  auto roi = features::roi_ladder(g, pyr, box);
  out.coarse_prob = coarse_head(g, p, roi);
  out.coarse = opt.frozen_coarse ? *opt.frozen_coarse : to_mask(out.coarse_prob, 1);
  out.inc_l1 = incoherence_head(g, p, roi, 1, out.coarse);
  out.inc_l2 = incoherence_head(g, p, roi, 2, out.coarse);
  out.scores_l1 = to_mask(out.inc_l1, 1);
  out.scores_l2 = to_mask(out.inc_l2, 2);
  out.tree = opt.tree ? *opt.tree : qt::build_quadtree(out.scores_l1, out.scores_l2, p.config.threshold, p.config.node_cap);
  out.seq = qt::serialize_sequence(out.tree);

  AttentionTrace<T>* trace = opt.trace_attention ? &out.attention : nullptr;
  auto enc = encode_nodes(g, p, out.seq, roi, out.coarse_prob);
  enc = channel_recalibrate(g, p, enc, trace);
  auto bias = relative_position_bias(g, p, enc.pos);
  enc = sequence_encoder(g, p, enc, bias, trace);
  // node labels refine the coarse estimate: σ(decoder logit + coarse prior logit)
  out.labels = nc::sigmoid(g, nc::add(g, pixel_decode_logits(g, p, enc), coarse_prior_logits<T>(out.seq, out.coarse)));

  for (std::size_t k = 0; k < out.seq.size(); ++k) {
    const auto& e = out.seq[k];
    if (e.node) out.tree.nodes[*e.node].refined_label = static_cast<float>(out.labels[k]);
  }
  out.refined = qt::propagate_labels(out.coarse, out.tree);
  return out;
}

}  // namespace qmrs::model
