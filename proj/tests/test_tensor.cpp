#include <cmath>
#include <algorithm>
#include <bit>
#include <numeric>
#include <set>

#include <gtest/gtest.h>

#include "hbat/rng.hpp"
#include "hbat/tensor.hpp"
#include "test_util.hpp"

namespace hbat {
namespace {

std::vector<double> random_values(std::size_t n, std::uint64_t seed, double lo = -1.0, double hi = 1.0) {
  Rng rng(seed);
  std::vector<double> v(n);
  for (auto& x : v) x = lo + (hi - lo) * uniform01(rng);
  return v;
}

TEST(Tensor, MatmulIdentity) {
  const auto a_vals = random_values(9, 1);
  const Tensor eye = Tensor::constant({3, 3}, {1, 0, 0, 0, 1, 0, 0, 0, 1});
  const Tensor a = Tensor::constant({3, 3}, a_vals);
  const Tensor out = matmul(eye, a);
  ASSERT_EQ(out.shape(), (Shape{3, 3}));
  for (std::size_t i = 0; i < 9; ++i) EXPECT_EQ(out.at(i), a_vals[i]);
}

TEST(Tensor, SoftmaxOfZerosIsUniform) {
  const Tensor s = softmax(Tensor::zeros({4}));
  for (std::size_t i = 0; i < 4; ++i) EXPECT_DOUBLE_EQ(s.at(i), 0.25);
}

TEST(Tensor, SigmoidOfZeroIsHalf) { EXPECT_DOUBLE_EQ(sigmoid(Tensor::scalar(0.0)).item(), 0.5); }

TEST(Tensor, SoftmaxRowsSumToOne) {
  const Tensor x = Tensor::constant({3, 5}, random_values(15, 2, -30, 30));
  const Tensor s = softmax(x);
  for (std::size_t r = 0; r < 3; ++r) {
    double total = 0.0;
    for (std::size_t c = 0; c < 5; ++c) {
      const double p = s.at(r * 5 + c);
      EXPECT_GT(p, 0.0);
      EXPECT_LT(p, 1.0);
      total += p;
    }
    EXPECT_NEAR(total, 1.0, 1e-9);
  }
}

TEST(Tensor, LogSoftmaxIsStableForLargeLogits) {
  const Tensor x = Tensor::constant({3}, {1000.0, 0.0, -1000.0});
  const Tensor l = log_softmax(x);
  EXPECT_NEAR(l.at(0), 0.0, 1e-12);
  EXPECT_NEAR(l.at(1), -1000.0, 1e-9);
  for (double v : l.values()) EXPECT_TRUE(std::isfinite(v));
}

TEST(Tensor, CausalSoftmaxMasksTheFuture) {
  const Tensor s = causal_softmax(Tensor::constant({3, 3}, random_values(9, 3)));
  for (std::size_t r = 0; r < 3; ++r) {
    double total = 0.0;
    for (std::size_t c = 0; c < 3; ++c) {
      if (c > r) {
        EXPECT_EQ(s.at(r * 3 + c), 0.0);
      }
      total += s.at(r * 3 + c);
    }
    EXPECT_NEAR(total, 1.0, 1e-12);
  }
}

TEST(Tensor, LayerNormNormalizesRows) {
  const Tensor x = Tensor::constant({2, 6}, random_values(12, 4, -3, 5));
  const Tensor y = layer_norm(x, Tensor::full({6}, 1.0), Tensor::zeros({6}));
  for (std::size_t r = 0; r < 2; ++r) {
    double mu = 0.0, var = 0.0;
    for (std::size_t c = 0; c < 6; ++c) mu += y.at(r * 6 + c) / 6;
    for (std::size_t c = 0; c < 6; ++c) var += std::pow(y.at(r * 6 + c) - mu, 2) / 6;
    EXPECT_NEAR(mu, 0.0, 1e-12);
    EXPECT_NEAR(var, 1.0, 1e-4);
  }
}

TEST(Tensor, ShapeMismatchNamesOpAndShapes) {
  const Tensor a = Tensor::zeros({2, 3});
  const Tensor b = Tensor::zeros({2, 3});
  try {
    (void)matmul(a, b);
    FAIL() << "expected ShapeError";
  } catch (const ShapeError& e) {
    const std::string msg = e.what();
    EXPECT_NE(msg.find("matmul"), std::string::npos) << msg;
    EXPECT_NE(msg.find("[2,3]"), std::string::npos) << msg;
  }
  EXPECT_THROW((void)add(Tensor::zeros({2}), Tensor::zeros({3})), ShapeError);
}

TEST(Tensor, LogRejectsNonPositive) {
  EXPECT_THROW((void)log(Tensor::constant({2}, {1.0, 0.0})), DomainError);
  EXPECT_THROW((void)log(Tensor::scalar(-1.0)), DomainError);
  EXPECT_NEAR(log(Tensor::scalar(std::exp(2.0))).item(), 2.0, 1e-15);
}

TEST(Tensor, ValueCountMatchesShape) {
  EXPECT_THROW((void)Tensor::constant({2, 2}, {1, 2, 3}), ShapeError);
  EXPECT_THROW((void)Tensor::constant({0, 2}, {}), ShapeError);
}

TEST(Backward, SquareAtThree) {
  const Tensor x = Tensor::parameter("x", {1}, {3.0});
  const auto g = backward(sum(x * x));
  EXPECT_DOUBLE_EQ(g.at("x")[0], 6.0);
}

TEST(Backward, SumOfLogSoftmax) {
  const Tensor x = Tensor::parameter("x", {2}, {0.0, 0.0});
  const auto g = backward(sum(log_softmax(x)));
  EXPECT_NEAR(g.at("x")[0], 0.0, 1e-15);
  EXPECT_NEAR(g.at("x")[1], 0.0, 1e-15);

  const auto vals = random_values(5, 7);
  const Tensor y = Tensor::parameter("y", {5}, vals);
  const auto gy = backward(sum(log_softmax(y)));
  const Tensor s = softmax(Tensor::constant({5}, vals));
  for (std::size_t i = 0; i < 5; ++i) EXPECT_NEAR(gy.at("y")[i], 1.0 - 5.0 * s.at(i), 1e-12);
}

TEST(Backward, MeanReduceGradientIsOneOverN) {
  const Tensor x = Tensor::parameter("x", {2, 4}, random_values(8, 8));
  const auto g = backward(mean(x));
  for (double v : g.at("x")) EXPECT_DOUBLE_EQ(v, 1.0 / 8.0);
}

TEST(Backward, FanOutAccumulatesBySummation) {
  const Tensor x = Tensor::parameter("x", {1}, {2.0});
  const Tensor y = x * x + x * 3.0 + x;
  EXPECT_DOUBLE_EQ(backward(sum(y)).at("x")[0], 2 * 2.0 + 3.0 + 1.0);
}

TEST(Backward, CoversExactlyTheGradLeaves) {
  const Tensor w = Tensor::parameter("w", {2}, {1.0, 2.0});
  const Tensor c = Tensor::constant({2}, {3.0, 4.0});
  const Tensor unused = Tensor::parameter("unused", {1}, {1.0});
  const auto g = backward(sum(w * c));
  EXPECT_EQ(g.size(), 1u);
  EXPECT_EQ(g.at("w"), (std::vector<double>{3.0, 4.0}));
}

TEST(Backward, RejectsNonScalarLoss) {
  const Tensor w = Tensor::parameter("w", {2}, {1.0, 2.0});
  EXPECT_THROW((void)backward(w * 2.0), ShapeError);
}

TEST(Backward, RejectsDuplicateLeafNames) {
  const Tensor a = Tensor::parameter("w", {1}, {1.0});
  const Tensor b = Tensor::parameter("w", {1}, {2.0});
  EXPECT_THROW((void)backward(sum(a + b)), std::logic_error);
}

TEST(Backward, NoGradGuardStopsRecording) {
  const Tensor w = Tensor::parameter("w", {2}, {1.0, 2.0});
  Tensor y;
  {
    NoGradGuard guard;
    EXPECT_FALSE(grad_mode_enabled());
    y = sum(w * w);
  }
  EXPECT_TRUE(grad_mode_enabled());
  EXPECT_FALSE(y.requires_grad());
  const auto records = trace(y);
  ASSERT_EQ(records.size(), 1u);
  EXPECT_TRUE(records[0].inputs.empty());
}

TEST(Trace, IsTopologicalAndReplayIsBitIdentical) {
  const auto vals = random_values(12, 9);
  auto build = [&] {
    const Tensor a = Tensor::parameter("a", {3, 4}, vals);
    const Tensor b = Tensor::constant({4, 2}, random_values(8, 10));
    return mean(gelu(matmul(layer_norm(a, Tensor::full({4}, 1.0), Tensor::zeros({4})), b)));
  };
  const Tensor out1 = build();
  const Tensor out2 = build();
  EXPECT_EQ(std::bit_cast<std::uint64_t>(out1.item()), std::bit_cast<std::uint64_t>(out2.item()));

  const auto records = trace(out1);
  ASSERT_FALSE(records.empty());
  std::set<std::uint64_t> produced;
  for (const auto& r : records) {
    for (auto in : r.inputs) {
      // Inputs are either leaves (not produced by any record) or earlier outputs.
      const bool produced_later = std::any_of(records.begin(), records.end(), [&](const TraceRecord& o) {
        return o.output == in && !produced.contains(in);
      });
      EXPECT_FALSE(produced_later) << "input " << in << " used before it was produced";
    }
    produced.insert(r.output);
  }
  EXPECT_EQ(records.back().output, out1.id());
  EXPECT_EQ(records.back().op, Op::kMeanReduce);
}

TEST(FiniteDifference, SquareAtThree) {
  const double x = 3.0;
  const auto g = finite_difference_grad([](std::span<const double> p) { return p[0] * p[0]; },
                                        std::span(&x, 1), 1e-5);
  EXPECT_NEAR(g[0], 6.0, 1e-6);
}

TEST(FiniteDifference, ConstantGivesZero) {
  const std::vector<double> p = {1.0, -2.0, 3.0};
  const auto g = finite_difference_grad([](std::span<const double>) { return 4.2; }, p);
  for (double v : g) EXPECT_EQ(v, 0.0);
}

TEST(FiniteDifference, RejectsNonDeterministicFunction) {
  Rng rng(5);
  const std::vector<double> p = {1.0};
  EXPECT_THROW((void)finite_difference_grad(
                   [&](std::span<const double> q) { return q[0] + uniform01(rng); }, p),
               std::invalid_argument);
}

// Every primitive's backward against central differences.
struct FdCase {
  std::string name;
  std::vector<Shape> shapes;
  std::function<Tensor(const std::vector<Tensor>&)> fn;
};

TEST(FiniteDifference, EveryPrimitiveMatchesBackward) {
  static const std::vector<int> ids = {2, 0, 3, 2};
  static const std::vector<int> cols = {1, 0, 3};
  using V = std::vector<Tensor>;
  const std::vector<FdCase> cases = {
      {"matmul", {{3, 4}, {4, 2}}, [](const V& t) { return sum(matmul(t[0], t[1]) * matmul(t[0], t[1])); }},
      {"add-sub-mul", {{3, 4}, {3, 4}}, [](const V& t) { return sum((t[0] - t[1]) * (t[0] + t[1]) * t[0]); }},
      {"add-row-broadcast", {{3, 4}, {4}}, [](const V& t) { return sum(add(t[0], t[1]) * t[0]); }},
      {"scale-shift", {{3, 4}}, [](const V& t) { return sum(add_scalar(scale(t[0], 2.5), 1.0) * t[0]); }},
      {"exp-log", {{3, 4}}, [](const V& t) { return sum(log(add_scalar(exp(t[0]), 1.0))); }},
      {"negate-mean", {{3, 4}, {3, 4}}, [](const V& t) { return mean(negate(t[0]) * t[1]); }},
      {"softmax", {{3, 4}, {3, 4}}, [](const V& t) { return sum(softmax(t[0]) * t[1]); }},
      {"causal-softmax", {{3, 3}, {3, 3}}, [](const V& t) { return sum(causal_softmax(t[0]) * t[1]); }},
      {"log-softmax", {{3, 4}, {3, 4}}, [](const V& t) { return sum(log_softmax(t[0]) * t[1]); }},
      {"sigmoid", {{3, 4}, {3, 4}}, [](const V& t) { return sum(sigmoid(t[0]) * t[1]); }},
      {"log-sigmoid", {{3, 4}}, [](const V& t) { return sum(log_sigmoid(t[0]) * t[0]); }},
      {"embedding-gather", {{4, 3}, {4, 3}}, [](const V& t) { return sum(embedding_gather(t[0], ids) * t[1]); }},
      {"index-select", {{3, 4}}, [](const V& t) { return sum(index_select(log_softmax(t[0]), cols)); }},
      {"concat", {{2, 3}, {2, 3}}, [](const V& t) {
         const Tensor c0 = concat(t, 0);
         const Tensor c1 = concat(t, 1);
         return sum(c0 * c0) + sum(exp(c1));
       }},
      {"reshape", {{3, 4}, {4, 3}}, [](const V& t) { return sum(reshape(t[0], {4, 3}) * t[1]); }},
      {"transpose", {{3, 4}, {4, 3}}, [](const V& t) { return sum(transpose(t[0]) * t[1]); }},
      {"layer-norm", {{3, 4}, {4}, {4}, {3, 4}}, [](const V& t) { return sum(layer_norm(t[0], t[1], t[2]) * t[3]); }},
      {"relu", {{3, 4}, {3, 4}}, [](const V& t) { return sum(relu(t[0]) * t[1]); }},
      {"gelu", {{3, 4}, {3, 4}}, [](const V& t) { return sum(gelu(t[0]) * t[1]); }},
      {"slice", {{3, 4}, {3, 2}}, [](const V& t) { return sum(slice(t[0], 1, 1, 2) * t[1]) + sum(slice(t[0], 0, 2, 1)); }},
  };
  std::uint64_t seed = 100;
  for (const auto& c : cases) {
    std::vector<double> point;
    for (const auto& s : c.shapes) {
      for (double v : random_values(shape_numel(s), seed++)) {
        // Keep away from the relu kink.
        point.push_back(std::abs(v) < 0.05 ? v + 0.1 : v);
      }
    }
    auto make = [&](std::span<const double> p, bool params) {
      V t;
      std::size_t off = 0;
      for (std::size_t k = 0; k < c.shapes.size(); ++k) {
        const std::size_t n = shape_numel(c.shapes[k]);
        std::vector<double> vals(p.begin() + off, p.begin() + off + n);
        off += n;
        t.push_back(params ? Tensor::parameter("t" + std::to_string(k), c.shapes[k], vals)
                           : Tensor::constant(c.shapes[k], vals));
      }
      return t;
    };
    const auto fd = finite_difference_grad([&](std::span<const double> p) { return c.fn(make(p, false)).item(); },
                                           point);
    const auto g = backward(c.fn(make(point, true)));
    std::size_t off = 0;
    for (std::size_t k = 0; k < c.shapes.size(); ++k) {
      const auto& grad = g.at("t" + std::to_string(k));
      for (std::size_t i = 0; i < grad.size(); ++i) {
        EXPECT_LE(testing::rel_err(grad[i], fd[off + i]), 1e-6) << c.name << " input " << k << " coord " << i;
      }
      off += grad.size();
    }
  }
}

}  // namespace
}  // namespace hbat
