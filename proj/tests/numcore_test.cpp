#include <gtest/gtest.h>

#include <cmath>
#include <functional>
#include <string>

#include "qmrs/numcore/gradcheck.hpp"
#include "qmrs/numcore/ops.hpp"
#include "test_util.hpp"

namespace qmrs {
namespace {

using nc::Graph;
using nc::Tensor;
using testing::probe;
using testing::random_tensor;

using TensorF = Tensor<float>;

TEST(Matmul, IdentityLeavesOperandUnchanged) {
  Graph<float> g;
  auto id = TensorF::from({2, 2}, {1, 0, 0, 1});
  auto x = TensorF::from({2, 2}, {1, 2, 3, 4});
  auto y = nc::matmul(g, id, x);
  auto z = nc::matmul(g, x, id);
  for (std::size_t i = 0; i < 4; ++i) {
    EXPECT_EQ(y[i], x[i]);
    EXPECT_EQ(z[i], x[i]);
  }
}

TEST(Matmul, MatchesTripleLoopOracle) {
  Rng rng(11);
  auto a = random_tensor<float>(rng, {3, 4}, false);
  auto b = random_tensor<float>(rng, {4, 2}, false);
  Graph<float> g;
  auto c = nc::matmul(g, a, b);
  for (std::size_t i = 0; i < 3; ++i)
    for (std::size_t j = 0; j < 2; ++j) {
      double ref = 0;
      for (std::size_t t = 0; t < 4; ++t) ref += static_cast<double>(a.at(i, t)) * b.at(t, j);
      EXPECT_NEAR(c.at(i, j), ref, 1e-6);
    }
}

TEST(Matmul, ShapeMismatchNamesBothShapes) {
  Graph<float> g;
  auto a = TensorF::zeros({2, 3});
  auto b = TensorF::zeros({2, 3});
  try {
    nc::matmul(g, a, b);
    FAIL() << "expected DimensionError";
  } catch (const DimensionError& e) {
    const std::string msg = e.what();
    EXPECT_NE(msg.find("[2,3] x [2,3]"), std::string::npos) << msg;
  }
}

TEST(Softmax, SymmetricRowsAreUniform) {
  Graph<float> g;
  auto p = nc::softmax_rows(g, TensorF::from({2, 3}, {0, 0, 0, 1000, 1000, 1000}));
  for (std::size_t j = 0; j < 3; ++j) {
    EXPECT_NEAR(p.at(0, j), 1.0 / 3.0, 1e-7);
    EXPECT_NEAR(p.at(1, j), 1.0 / 3.0, 1e-7);
  }
  auto two = nc::softmax_rows(g, TensorF::from({1, 2}, {0, 0}));
  EXPECT_FLOAT_EQ(two[0], 0.5f);
  EXPECT_FLOAT_EQ(two[1], 0.5f);
}

TEST(Softmax, MatchesExtendedPrecisionOracle) {
  Graph<float> g;
  auto p = nc::softmax_rows(g, TensorF::from({1, 3}, {1, 2, 3}));
  long double z = 0;
  for (int k = 1; k <= 3; ++k) z += std::exp(static_cast<long double>(k));
  for (int k = 1; k <= 3; ++k) EXPECT_NEAR(p[k - 1], static_cast<double>(std::exp(static_cast<long double>(k)) / z), 1e-6);
}

TEST(Softmax, RowsSumToOneIncludingLargeMagnitudes) {
  Rng rng(3);
  for (int trial = 0; trial < 200; ++trial) {
    const double mag = trial % 2 ? 1e3 : 5.0;
    auto x = random_tensor<float>(rng, {4, 1 + rng.below(9)}, false, -mag, mag);
    Graph<float> g;
    auto p = nc::softmax_rows(g, x);
    for (std::size_t r = 0; r < p.rows(); ++r) {
      double s = 0;
      for (std::size_t j = 0; j < p.cols(); ++j) {
        EXPECT_GE(p.at(r, j), 0.0f);
        s += p.at(r, j);
      }
      EXPECT_NEAR(s, 1.0, 1e-6);
    }
  }
}

TEST(Backward, SumGivesAllOnes) {
  Graph<float> g;
  auto x = TensorF::from({2, 3}, {1, -2, 3, 4, 5, 6}, true);
  x.set_name("x");
  auto grads = g.backward(nc::sum(g, x));
  ASSERT_TRUE(grads.count("x"));
  for (float v : x.grad()) EXPECT_EQ(v, 1.0f);
}

TEST(Backward, SquareGivesTwiceInput) {
  Graph<float> g;
  auto x = TensorF::from({1, 2}, {1, 2}, true);
  g.backward(nc::sum(g, nc::mul(g, x, x)));
  EXPECT_EQ(x.grad()[0], 2.0f);
  EXPECT_EQ(x.grad()[1], 4.0f);
}

TEST(Backward, FanOutAccumulatesBranchGradients) {
  Graph<float> g;
  auto x = TensorF::from({1, 3}, {1, 2, 3}, true);
  auto a = nc::scale(g, x, 2.0f);
  auto b = nc::scale(g, x, -5.0f);
  g.backward(nc::sum(g, nc::add(g, a, b)));
  for (float v : x.grad()) EXPECT_EQ(v, -3.0f);
}

TEST(Backward, RejectsNonScalarLoss) {
  Graph<float> g;
  auto x = TensorF::from({1, 2}, {1, 2}, true);
  EXPECT_THROW(g.backward(nc::scale(g, x, 2.0f)), ContractError);
}

TEST(Backward, NanGradientNamesOffendingOp) {
  Graph<float> g;
  auto x = TensorF::from({1, 2}, {1, 2}, true);
  auto y = nc::scale(g, x, 3.0f);
  auto loss = nc::sum(g, y);
  loss.grad()[0] = std::numeric_limits<float>::quiet_NaN();
  try {
    g.backward(loss);
    FAIL() << "expected NumericalError";
  } catch (const NumericalError& e) {
    EXPECT_NE(std::string(e.what()).find("sum"), std::string::npos) << e.what();
  }
}

TEST(Backward, NonFiniteForwardValueIsAnError) {
  Graph<float> g;
  auto x = TensorF::from({1, 1}, {1e30f});
  EXPECT_THROW(nc::mul(g, x, x), NumericalError);
}

TEST(Graph, ClearingKeepsParameters) {
  Graph<float> g;
  auto w = TensorF::from({1, 2}, {0.5f, -1.5f}, true);
  w.set_name("w");
  g.backward(nc::sum(g, nc::mul(g, w, w)));
  EXPECT_GT(g.size(), 0u);
  g.clear();
  EXPECT_EQ(g.size(), 0u);
  EXPECT_EQ(w[0], 0.5f);
  EXPECT_EQ(w[1], -1.5f);
  EXPECT_EQ(w.grad()[0], 1.0f);
}

TEST(Graph, DisabledGraphRecordsNothing) {
  Graph<float> g(false);
  auto w = TensorF::from({1, 2}, {0.5f, -1.5f}, true);
  auto y = nc::mul(g, w, w);
  EXPECT_FALSE(y.requires_grad());
  EXPECT_EQ(g.size(), 0u);
}

TEST(Forward, RepeatRunsAreBitIdentical) {
  Rng rng(5);
  auto a = random_tensor<float>(rng, {7, 9}, false);
  auto b = random_tensor<float>(rng, {9, 5}, false);
  auto run = [&] {
    Graph<float> g;
    return nc::softmax_rows(g, nc::matmul(g, a, b)).values();
  };
  EXPECT_EQ(run(), run());
}

TEST(Gradcheck, IdentitySumIsExact) {
  auto xd = Tensor<double>::from({2, 2}, {0.1, 0.2, 0.3, 0.4}, true);
  auto res = nc::gradcheck<double>([xd](Graph<double>& g) { return nc::sum(g, xd); }, {xd}, 1e-3);
  EXPECT_LT(res.max_error, 1e-8);
  EXPECT_EQ(res.entries, 4u);
}

TEST(Gradcheck, SigmoidBceMicroNet) {
  Rng rng(21);
  auto w = random_tensor<float>(rng, {3, 1});
  w.set_name("w");
  auto b = random_tensor<float>(rng, {1});
  b.set_name("b");
  auto x = random_tensor<float>(rng, {6, 3}, false);
  const std::vector<float> target{1, 0, 1, 1, 0, 0};
  auto fn = [&](Graph<float>& g) {
    auto p = nc::sigmoid(g, nc::add_row(g, nc::matmul(g, x, w), b));
    return nc::bce_mean(g, p, std::span<const float>(target));
  };
  EXPECT_LT(nc::gradcheck<float>(fn, {w, b}, 1e-3).max_error, 1e-4);
}

TEST(Gradcheck, DetectsNonDeterministicClosure) {
  auto w = TensorF::from({1}, {1.0f}, true);
  int calls = 0;
  auto fn = [&](Graph<float>& g) { return nc::scale(g, w, static_cast<float>(++calls)); };
  EXPECT_THROW(nc::gradcheck<float>(fn, {w}, 1e-3), ContractError);
}

// Every differentiable op, randomized shapes and values, 100 trials each.
// The closures are re-evaluated in 64-bit so the check measures the gradient
// rule rather than float rounding; one float pass per op confirms the rules
// hold at working precision too.
template <class T>
using OpCase = std::function<Tensor<T>(Graph<T>&, std::vector<Tensor<T>>&)>;

template <class T>
double check_op(const std::string& op, Rng& rng, std::uint64_t probe_seed) {
  const std::size_t m = 1 + rng.below(4), k = 1 + rng.below(4), n = 1 + rng.below(4);
  std::vector<Tensor<T>> in;
  std::function<Tensor<T>(Graph<T>&)> fn;
  auto R = [&](nc::Shape s, double avoid = 0.0) { return random_tensor<T>(rng, std::move(s), true, -1.0, 1.0, avoid); };
  if (op == "matmul") {
    in = {R({m, k}), R({k, n})};
    fn = [&](Graph<T>& g) { return nc::matmul(g, in[0], in[1]); };
  } else if (op == "matmul_nt") {
    in = {R({m, k}), R({n, k})};
    fn = [&](Graph<T>& g) { return nc::matmul_nt(g, in[0], in[1]); };
  } else if (op == "add") {
    in = {R({m, n}), R({m, n})};
    fn = [&](Graph<T>& g) { return nc::add(g, in[0], in[1]); };
  } else if (op == "sub") {
    in = {R({m, n}), R({m, n})};
    fn = [&](Graph<T>& g) { return nc::sub(g, in[0], in[1]); };
  } else if (op == "mul") {
    in = {R({m, n}), R({m, n})};
    fn = [&](Graph<T>& g) { return nc::mul(g, in[0], in[1]); };
  } else if (op == "add_row") {
    in = {R({m, n}), R({n})};
    fn = [&](Graph<T>& g) { return nc::add_row(g, in[0], in[1]); };
  } else if (op == "scale") {
    in = {R({m, n})};
    fn = [&](Graph<T>& g) { return nc::scale(g, in[0], T(-1.7)); };
  } else if (op == "relu") {
    in = {R({m, n}, 0.05)};
    fn = [&](Graph<T>& g) { return nc::relu(g, in[0]); };
  } else if (op == "sigmoid") {
    in = {R({m, n})};
    fn = [&](Graph<T>& g) { return nc::sigmoid(g, in[0]); };
  } else if (op == "softmax_rows") {
    in = {R({m, n + 1})};
    fn = [&](Graph<T>& g) { return nc::softmax_rows(g, in[0]); };
  } else if (op == "layer_norm_rows") {
    // rows of ≥ 5 spread-out values; near-constant rows have curvature large
    // enough for the ε = 1e-3 truncation error alone to exceed the bound
    in = {random_tensor<T>(rng, {m, n + 4}, true, -2.0, 2.0), R({n + 4}), R({n + 4})};
    fn = [&](Graph<T>& g) { return nc::layer_norm_rows(g, in[0], in[1], in[2]); };
  } else if (op == "concat_cols") {
    in = {R({m, k}), R({m, n})};
    fn = [&](Graph<T>& g) { return nc::concat_cols(g, {in[0], in[1]}); };
  } else if (op == "concat_rows") {
    in = {R({m, n}), R({k, n})};
    fn = [&](Graph<T>& g) { return nc::concat_rows(g, {in[0], in[1]}); };
  } else if (op == "slice_cols") {
    in = {R({m, n + 2})};
    fn = [&](Graph<T>& g) { return nc::slice_cols(g, in[0], 1, n); };
  } else if (op == "reshape") {
    in = {R({m, n})};
    fn = [&](Graph<T>& g) { return nc::reshape(g, in[0], {n, m}); };
  } else if (op == "gather") {
    in = {R({m + 2, n})};
    nc::GatherPlan<T> plan;
    for (std::size_t r = 0; r < k + 1; ++r) {
      for (int t = 0; t < 3; ++t) plan.tap(rng.below(m + 2), static_cast<T>(rng.uniform(-1, 1)));
      plan.end_row();
    }
    fn = [&, plan](Graph<T>& g) { return nc::gather(g, in[0], plan); };
  } else if (op == "lookup") {
    in = {R({5, 1})};
    std::vector<std::uint32_t> idx(m * n);
    for (auto& v : idx) v = static_cast<std::uint32_t>(rng.below(5));
    fn = [&, idx](Graph<T>& g) { return nc::lookup(g, in[0], idx, m, n); };
  } else if (op == "bce_mean") {
    in = {random_tensor<T>(rng, {m, n}, true, 0.05, 0.95)};
    std::vector<T> t(m * n);
    for (auto& v : t) v = rng.coin() ? T(1) : T(0);
    fn = [&, t](Graph<T>& g) { return nc::bce_mean(g, in[0], std::span<const T>(t)); };
  } else if (op == "l1_mean") {
    in = {R({m, n}, 0.05)};
    std::vector<T> t(m * n, T(0));
    fn = [&, t](Graph<T>& g) { return nc::l1_mean(g, in[0], std::span<const T>(t)); };
  } else if (op == "attention") {
    const std::size_t len = m + 1;
    in = {R({len, k}), R({len, k}), R({len, n}), R({len, len})};
    fn = [&, k](Graph<T>& g) {
      return nc::attention(g, in[0], in[1], in[2], std::optional<Tensor<T>>(in[3]), T(1) / std::sqrt(T(k))).out;
    };
  } else {
    ADD_FAILURE() << "unknown op " << op;
    return 1.0;
  }
  for (std::size_t i = 0; i < in.size(); ++i) in[i].set_name(op + ".in" + std::to_string(i));
  auto closure = [&](Graph<T>& g) { return probe(g, fn(g), probe_seed); };
  return nc::gradcheck<T>(closure, in, 1e-3).max_error;
}

const std::vector<std::string> kOps{"matmul", "matmul_nt", "add", "sub", "mul", "add_row", "scale",
                                    "relu", "sigmoid", "softmax_rows", "layer_norm_rows", "concat_cols",
                                    "concat_rows", "slice_cols", "reshape", "gather", "lookup", "bce_mean",
                                    "l1_mean", "attention"};

TEST(GradcheckProperty, EveryOpOverRandomTrials) {
  for (const auto& op : kOps) {
    Rng rng(1000 + op.size());
    double worst = 0;
    for (int trial = 0; trial < 100; ++trial) worst = std::max(worst, check_op<double>(op, rng, 77 + trial));
    EXPECT_LT(worst, 1e-3) << op;
  }
}

TEST(GradcheckProperty, EveryOpAtFloatPrecision) {
  for (const auto& op : kOps) {
    Rng rng(2000 + op.size());
    double worst = 0;
    for (int trial = 0; trial < 10; ++trial) worst = std::max(worst, check_op<float>(op, rng, 99 + trial));
    EXPECT_LT(worst, 1e-3) << op;
  }
}

}  // namespace
}  // namespace qmrs
