// ----------------------------------------------------------------------------
// Copyright 2026 The depthfuse Authors
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//      http://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
// See the License for the specific language governing permissions and
// ----------------------------------------------------------------------------

#include <cmath>
#include <functional>
#include <string>
#include <vector>

#include "gtest/gtest.h"

#include "depthfuse/gradcheck.hpp"
#include "depthfuse/ops.hpp"
#include "depthfuse/optim.hpp"
#include "depthfuse/param.hpp"

using namespace depthfuse;

namespace {

Tensor random_tensor(Shape shape, Rng& rng, double lo = -1.0, double hi = 1.0,
                     bool requires_grad = false) {
  Tensor t = Tensor::zeros(std::move(shape), requires_grad);
  for (double& v : t.data()) v = rng.uniform(lo, hi);
  return t;
}

// Contracts an op output with a fixed random tensor so every output
// coordinate contributes a distinct weight to the scalar loss.
Tensor project(const Tensor& y, const Tensor& r) { return sum(mul(y, r)); }

}  // namespace

TEST(Matmul, IdentityTimesMatrix) {
  Rng rng(1);
  Tensor m = random_tensor({3, 4}, rng);
  Tensor out = matmul(Tensor::identity(3), m);
  ASSERT_EQ(out.shape(), (Shape{3, 4}));
  for (std::size_t i = 0; i < m.numel(); ++i) EXPECT_EQ(out[i], m[i]);
}

TEST(Matmul, HandComputed) {
  Tensor a({2, 2}, {1, 2, 3, 4});
  Tensor b({2, 1}, {1, 1});
  Tensor out = matmul(a, b);
  ASSERT_EQ(out.shape(), (Shape{2, 1}));
  EXPECT_EQ(out[0], 3.0);
  EXPECT_EQ(out[1], 7.0);
}

TEST(Matmul, ZerosAnnihilate) {
  Rng rng(2);
  Tensor out = matmul(Tensor::zeros({2, 3}), random_tensor({3, 5}, rng));
  for (double v : out.data()) EXPECT_EQ(v, 0.0);
}

TEST(Matmul, MismatchNamesBothShapes) {
  try {
    matmul(Tensor::zeros({2, 3}), Tensor::zeros({4, 5}));
    FAIL() << "expected ShapeError";
  } catch (const ShapeError& e) {
    const std::string msg = e.what();
    EXPECT_NE(msg.find("[2x3]"), std::string::npos) << msg;
    EXPECT_NE(msg.find("[4x5]"), std::string::npos) << msg;
  }
}

TEST(Softmax, UniformOnZeros) {
  Tensor y = softmax(Tensor::zeros({3}), 0);
  for (double v : y.data()) EXPECT_NEAR(v, 1.0 / 3.0, 1e-15);
}

TEST(Softmax, DirectEvaluation) {
  Tensor y = softmax(Tensor({3}, {1, 2, 3}), 0);
  const double z = std::exp(1.0) + std::exp(2.0) + std::exp(3.0);
  const double expected[3] = {0.09003057, 0.24472847, 0.66524096};
  for (int i = 0; i < 3; ++i) {
    EXPECT_NEAR(y[i], std::exp(i + 1.0) / z, 1e-15);
    EXPECT_NEAR(y[i], expected[i], 1e-8);
  }
}

TEST(Softmax, ShiftInvariantAndNormalised) {
  Rng rng(3);
  for (int trial = 0; trial < 50; ++trial) {
    Tensor x = random_tensor({4, 5, 3}, rng, -30.0, 30.0);
    const double c = rng.uniform(-100.0, 100.0);
    for (std::size_t axis = 0; axis < 3; ++axis) {
      Tensor y = softmax(x, axis);
      Tensor ys = softmax(add_scalar(x, c), axis);
      for (std::size_t i = 0; i < y.numel(); ++i) {
        EXPECT_GE(y[i], 0.0);
        EXPECT_NEAR(y[i], ys[i], 1e-12);
      }
      // sums along the axis
      const std::size_t inner = axis == 2 ? 1 : (axis == 1 ? 3 : 15);
      const std::size_t n = x.dim(axis);
      const std::size_t outer = x.numel() / (n * inner);
      for (std::size_t o = 0; o < outer; ++o) {
        for (std::size_t in = 0; in < inner; ++in) {
          double s = 0.0;
          for (std::size_t j = 0; j < n; ++j) s += y[o * n * inner + j * inner + in];
          EXPECT_NEAR(s, 1.0, 1e-9);
        }
      }
    }
  }
}

TEST(LayerNorm, ConstantVectorGivesZero) {
  Tensor y = layer_norm(Tensor::full({1, 4}, 3.5), Tensor::full({4}, 1.0), Tensor::zeros({4}));
  for (double v : y.data()) EXPECT_EQ(v, 0.0);
}

TEST(LayerNorm, UnitPair) {
  Tensor y = layer_norm(Tensor({1, 2}, {1, -1}), Tensor::full({2}, 1.0), Tensor::zeros({2}));
  const double s = 1.0 / std::sqrt(1.0 + kLayerNormEps);
  EXPECT_NEAR(y[0], s, 1e-15);
  EXPECT_NEAR(y[1], -s, 1e-15);
  EXPECT_NEAR(y[0], 1.0, 1e-5);
}

TEST(LayerNorm, ZeroGainYieldsBias) {
  Rng rng(4);
  Tensor bias = random_tensor({6}, rng);
  Tensor y = layer_norm(random_tensor({5, 6}, rng), Tensor::zeros({6}), bias);
  for (std::size_t r = 0; r < 5; ++r)
    for (std::size_t j = 0; j < 6; ++j) EXPECT_EQ(y[r * 6 + j], bias[j]);
}

TEST(LayerNorm, StandardisesRows) {
  Rng rng(5);
  for (int trial = 0; trial < 100; ++trial) {
    Tensor x = random_tensor({3, 16}, rng, -5.0, 5.0);
    Tensor y = layer_norm(x, Tensor::full({16}, 1.0), Tensor::zeros({16}));
    for (std::size_t r = 0; r < 3; ++r) {
      double mu = 0.0, var_in = 0.0, mu_in = 0.0;
      for (std::size_t j = 0; j < 16; ++j) mu_in += x[r * 16 + j] / 16.0;
      for (std::size_t j = 0; j < 16; ++j) var_in += std::pow(x[r * 16 + j] - mu_in, 2) / 16.0;
      if (var_in < 1e-3) continue;
      for (std::size_t j = 0; j < 16; ++j) mu += y[r * 16 + j] / 16.0;
      double var = 0.0;
      for (std::size_t j = 0; j < 16; ++j) var += std::pow(y[r * 16 + j] - mu, 2) / 16.0;
      EXPECT_LT(std::abs(mu), 1e-9);
      // epsilon shrinks the variance by var / (var + eps)
      EXPECT_NEAR(var, 1.0, 1e-6 + kLayerNormEps / var_in);
    }
  }
}

TEST(LayerNorm, RejectsMismatchedAffine) {
  EXPECT_THROW(layer_norm(Tensor::zeros({2, 3}), Tensor::zeros({4}), Tensor::zeros({4})), ShapeError);
}

TEST(Activations, Origins) {
  Tensor zero = Tensor::zeros({1});
  EXPECT_EQ(gelu(zero)[0], 0.0);
  EXPECT_EQ(elu(zero)[0], 0.0);
  EXPECT_EQ(add_scalar(elu(zero), 1.0)[0], 1.0);
}

TEST(Activations, EluBranches) {
  Tensor x({4}, {0.0, 0.5, 2.0, 7.25});
  Tensor y = elu(x);
  for (std::size_t i = 0; i < 4; ++i) EXPECT_EQ(y[i], x[i]);
  EXPECT_NEAR(elu(Tensor({1}, {-1.0}))[0], std::exp(-1.0) - 1.0, 1e-15);
  EXPECT_NEAR(elu(Tensor({1}, {-1.0}))[0], -0.63212, 1e-5);
}

TEST(Activations, GeluIsGaussianCdfForm) {
  // gelu(1) = Phi(1) = 0.841344746..., not the tanh approximation 0.841192
  EXPECT_NEAR(gelu(Tensor({1}, {1.0}))[0], 0.8413447460685429, 1e-15);
  EXPECT_NEAR(gelu(Tensor({1}, {-2.0}))[0], -2.0 * 0.022750131948179195, 1e-15);
}

TEST(Backward, LinearWeightGradientIsInputBroadcast) {
  Rng rng(6);
  Tensor x = random_tensor({1, 3}, rng);
  Tensor w = random_tensor({3, 4}, rng, -1, 1, true);
  sum(matmul(x, w)).backward();
  ASSERT_TRUE(w.has_grad());
  for (std::size_t p = 0; p < 3; ++p)
    for (std::size_t j = 0; j < 4; ++j) EXPECT_DOUBLE_EQ(w.grad()[p * 4 + j], x[p]);
  // finite-difference oracle agrees
  EXPECT_LT(finite_diff_check([&] { return sum(matmul(x, w)); }, w), 1e-8);
}

TEST(Backward, FrozenParameterGetsNoGradient) {
  ParamStore store;
  Tensor w = store.add("w", Tensor({2, 2}, {1, 2, 3, 4}));
  Tensor u = store.add("u", Tensor({2, 2}, {1, 0, 0, 1}));
  store.set_frozen(store.at("w"), true);
  store.zero_grad();
  sum(matmul(w, u)).backward();
  EXPECT_FALSE(w.has_grad());
  EXPECT_TRUE(u.has_grad());
}

TEST(Backward, IndependentParameterHasZeroGradient) {
  ParamStore store;
  Tensor a = store.add("a", Tensor({2}, {1, 2}));
  Tensor b = store.add("b", Tensor({2}, {3, 4}));
  store.zero_grad();
  sum(mul(a, a)).backward();
  ASSERT_TRUE(b.has_grad());
  for (double g : b.grad()) EXPECT_EQ(g, 0.0);
  EXPECT_EQ(a.grad()[0], 2.0);
  EXPECT_EQ(a.grad()[1], 4.0);
}

TEST(Backward, NonScalarLossRejected) {
  Tensor a({2}, {1, 2}, true);
  EXPECT_THROW(scale(a, 2.0).backward(), ContractError);
}

TEST(Backward, SharedSubexpressionAccumulates) {
  Tensor a({1}, {3.0}, true);
  Tensor b = mul(a, a);
  add(b, b).backward();  // d/da 2a^2 = 4a
  EXPECT_DOUBLE_EQ(a.grad()[0], 12.0);
}

TEST(FiniteDiff, QuadraticClosedForm) {
  Tensor w({1}, {3.0}, true);
  auto res = finite_diff_check_detail([&] { return mul(w, w); }, w);
  EXPECT_DOUBLE_EQ(res.analytic, 6.0);
  EXPECT_LT(res.max_rel_error, 1e-8);
}

TEST(FiniteDiff, ConstantFunction) {
  Tensor w({3}, {1, 2, 3}, true);
  Tensor c({1}, {5.0});
  auto res = finite_diff_check_detail([&] { return add(c, scale(sum(w), 0.0)); }, w);
  EXPECT_EQ(res.max_rel_error, 0.0);
  EXPECT_EQ(res.analytic, 0.0);
}

TEST(FiniteDiff, CorruptedGradientIsDetected) {
  Tensor w({1}, {3.0}, true);
  EXPECT_GT(finite_diff_check_detail([&] { return mul(w, w); }, w, 1e-5, 0.01).max_rel_error, 1e-4);
}

TEST(FiniteDiff, StepOutsideRangeRejected) {
  Tensor w({1}, {3.0}, true);
  EXPECT_THROW(finite_diff_check([&] { return mul(w, w); }, w, 1e-2), ContractError);
}

// Every differentiable op, on random small inputs, against central
// differences at h = 1e-5.
TEST(FiniteDiff, EveryOpOnRandomInputs) {
  Rng rng(7);
  for (int trial = 0; trial < 5; ++trial) {
    Tensor a = random_tensor({3, 4}, rng, -2, 2, true);
    Tensor b = random_tensor({4, 5}, rng, -2, 2, true);
    Tensor c = random_tensor({3, 4}, rng, -2, 2, true);
    Tensor bias = random_tensor({5}, rng, -1, 1, true);
    Tensor g = random_tensor({4}, rng, 0.5, 1.5, true);
    Tensor beta = random_tensor({4}, rng, -1, 1, true);
    Tensor r34 = random_tensor({3, 4}, rng);
    Tensor r35 = random_tensor({3, 5}, rng);
    Tensor r43 = random_tensor({4, 3}, rng);

    struct Case {
      std::string name;
      std::function<Tensor()> loss;
      std::vector<Tensor> wrt;
    };
    std::vector<Case> cases = {
        {"matmul", [&] { return project(matmul(a, b), r35); }, {a, b}},
        {"linear", [&] { return project(linear(a, b, bias), r35); }, {a, b, bias}},
        {"transpose", [&] { return project(transpose(a), r43); }, {a}},
        {"add", [&] { return project(add(a, c), r34); }, {a, c}},
        {"sub", [&] { return project(sub(a, c), r34); }, {a, c}},
        {"mul", [&] { return project(mul(a, c), r34); }, {a, c}},
        {"scale", [&] { return project(scale(a, -1.7), r34); }, {a}},
        {"gelu", [&] { return project(gelu(a), r34); }, {a}},
        {"elu", [&] { return project(elu(a), r34); }, {a}},
        {"softmax0", [&] { return project(softmax(a, 0), r34); }, {a}},
        {"softmax1", [&] { return project(softmax(a, 1), r34); }, {a}},
        {"layer_norm", [&] { return project(layer_norm(a, g, beta), r34); }, {a, g, beta}},
        {"reshape", [&] { return project(reshape(a, {4, 3}), r43); }, {a}},
        {"mean", [&] { return mean(mul(a, a)); }, {a}},
        {"stack", [&] { return project(reshape(stack({a, c}), {3, 8}),
                                       reshape(stack({r34, r34}), {3, 8})); }, {a, c}},
    };
    for (const Case& cs : cases) {
      for (const Tensor& p : cs.wrt) {
        EXPECT_LT(finite_diff_check(cs.loss, p), 1e-4) << cs.name;
      }
    }
  }
}

TEST(FiniteDiff, EmbeddingCrossEntropyDepthAttend) {
  Rng rng(8);
  Tensor table = random_tensor({6, 3}, rng, -1, 1, true);
  std::vector<int> ids = {0, 5, 2, 2};
  Tensor logits = random_tensor({4, 5}, rng, -2, 2, true);
  std::vector<int> targets = {1, -1, 4, 0};
  Tensor scores = random_tensor({4, 3}, rng, 0, 1, true);
  Tensor values = random_tensor({3, 2, 2, 5}, rng, -1, 1, true);
  Tensor r = random_tensor({4, 3}, rng);
  Tensor r2 = random_tensor({2, 2, 5}, rng);
  EXPECT_LT(finite_diff_check([&] { return project(embedding(table, ids, {4}), r); }, table), 1e-4);
  EXPECT_LT(finite_diff_check([&] { return cross_entropy(logits, targets); }, logits), 1e-4);
  EXPECT_LT(finite_diff_check([&] { return project(depth_attend(scores, values), r2); }, scores), 1e-4);
  EXPECT_LT(finite_diff_check([&] { return project(depth_attend(scores, values), r2); }, values), 1e-4);
}

TEST(FiniteDiff, SelfAttentionWithPadding) {
  Rng rng(9);
  Tensor q = random_tensor({2, 4, 6}, rng, -1, 1, true);
  Tensor k = random_tensor({2, 4, 6}, rng, -1, 1, true);
  Tensor v = random_tensor({2, 4, 6}, rng, -1, 1, true);
  Tensor r = random_tensor({2, 4, 6}, rng);
  std::vector<std::size_t> lengths = {4, 2};
  auto loss = [&] { return project(self_attention(q, k, v, lengths, 2, 0.7), r); };
  EXPECT_LT(finite_diff_check(loss, q), 1e-4);
  EXPECT_LT(finite_diff_check(loss, k), 1e-4);
  EXPECT_LT(finite_diff_check(loss, v), 1e-4);
}

TEST(CrossEntropy, IgnoresMaskedTargetsAndRejectsEmpty) {
  Tensor logits({2, 2}, {0, 0, 5, -5});
  std::vector<int> t = {0, -1};
  EXPECT_NEAR(cross_entropy(logits, t).item(), std::log(2.0), 1e-15);
  std::vector<int> none = {-1, -1};
  EXPECT_THROW(cross_entropy(logits, none), ContractError);
}

TEST(Embedding, OutOfRangeIdNamesPosition) {
  Tensor table = Tensor::zeros({4, 2});
  std::vector<int> ids = {0, 1, 9};
  try {
    embedding(table, ids, {3});
    FAIL();
  } catch (const InputError& e) {
    EXPECT_NE(std::string(e.what()).find("position 2"), std::string::npos);
  }
}

TEST(Schedule, LinearDecayEndpoints) {
  EXPECT_EQ(linear_decay_lr(0, 100, 5e-5), 5e-5);
  EXPECT_EQ(linear_decay_lr(100, 100, 5e-5), 0.0);
  EXPECT_EQ(linear_decay_lr(50, 100, 5e-5), 2.5e-5);
  EXPECT_EQ(linear_decay_lr(150, 100, 5e-5), 0.0);
  EXPECT_THROW(linear_decay_lr(0, 0, 1.0), ContractError);
}

TEST(AdamW, OneStepHandComputed) {
  ParamStore store;
  Tensor w = store.add("w", Tensor({1}, {1.0}));
  AdamW opt(store, AdamWOptions{0.9, 0.999, 1e-8, 0.0});
  store.zero_grad();
  w.grad()[0] = 1.0;
  opt.step(0.1);
  // m_hat = v_hat = 1 after bias correction; step = lr / (1 + eps)
  EXPECT_NEAR(w[0], 1.0 - 0.1 / (1.0 + 1e-8), 1e-15);
  EXPECT_NEAR(w[0], 0.9, 1e-8);
  EXPECT_EQ(opt.steps(), 1u);
}

TEST(AdamW, ZeroGradZeroDecayLeavesParameter) {
  ParamStore store;
  Tensor w = store.add("w", Tensor({2}, {0.3, -2.0}));
  AdamW opt(store, AdamWOptions{0.9, 0.999, 1e-8, 0.0});
  store.zero_grad();
  opt.step(0.1);
  EXPECT_EQ(w[0], 0.3);
  EXPECT_EQ(w[1], -2.0);
}

TEST(AdamW, FrozenUntouchedAndMissingGradRejected) {
  ParamStore store;
  Tensor a = store.add("a", Tensor({1}, {1.0}));
  Tensor b = store.add("b", Tensor({1}, {1.0}));
  store.set_frozen(store.at("b"), true);
  AdamW opt(store);
  EXPECT_EQ(opt.tracked(), 1u);
  EXPECT_THROW(opt.step(0.1), ContractError);  // a has no grad yet
  store.zero_grad();
  a.grad()[0] = 1.0;
  opt.step(0.1);
  EXPECT_EQ(b[0], 1.0);
  EXPECT_LT(a[0], 1.0);
}

TEST(AdamW, IdenticalSeedsGiveIdenticalTrajectories) {
  auto run = [] {
    Rng rng(42);
    ParamStore store;
    Tensor w = store.add("w", random_tensor({4, 3}, rng));
    Tensor x = random_tensor({5, 4}, rng);
    AdamW opt(store);
    for (int s = 0; s < 20; ++s) {
      store.zero_grad();
      Tensor loss = mean(mul(gelu(matmul(x, w)), gelu(matmul(x, w))));
      loss.backward();
      opt.step(linear_decay_lr(s, 20, 0.05));
    }
    return store.hash();
  };
  EXPECT_EQ(run(), run());
}
