#include <gtest/gtest.h>

#include <cmath>
#include <numeric>

#include "oracles.hpp"
#include "wscn/gradcheck.hpp"
#include "wscn/ops.hpp"

using namespace wscn;

namespace {

Tensor<double> random_tensor(Shape s, std::uint64_t seed) {
  Rng rng(seed);
  Tensor<double> t(std::move(s));
  for (auto& v : t.data()) v = rng.normal();
  return t;
}

std::vector<double> to_vec(const Tensor<double>& t) {
  return {t.data().begin(), t.data().end()};
}

double dot(const Tensor<double>& a, const Tensor<double>& b) {
  return std::inner_product(a.data().begin(), a.data().end(), b.data().begin(), 0.0);
}

// Weighted sum with fixed random weights so gradient checks see a generic
// upstream gradient rather than all ones.
Tensor<double> probe(Tape<double>& tape, const Tensor<double>& y,
                     std::uint64_t seed = 99) {
  auto w = random_tensor(y.shape(), seed);
  return sum(&tape, mul(&tape, y, w));
}

constexpr std::uint64_t kSeeds[] = {1, 2, 3, 4, 5};

}  // namespace

// conv2d

TEST(Conv2d, IdentityKernel) {
  Tensor<float> x({1, 1, 3, 3}, std::vector<float>{1, 2, 3, 4, 5, 6, 7, 8, 9});
  Tensor<float> k({1, 1, 3, 3}, 0.0f);
  k[4] = 1.0f;
  auto y = conv2d<float>(nullptr, x, k, Tensor<float>::zeros({1}));
  EXPECT_TRUE(bit_equal(y, x));
}

TEST(Conv2d, OnesKernelOnOnesInput) {
  Tensor<double> x({1, 1, 4, 4}, 1.0), k({1, 1, 3, 3}, 1.0);
  auto y = conv2d<double>(nullptr, x, k, Tensor<double>::zeros({1}));
  // same padding: interior cells see 9 ones, corners 4, edges 6
  auto expect = oracle::conv2d(to_vec(x), 1, 4, 4, to_vec(k), 1, 3, 1, 1, 1, 4, 4);
  EXPECT_EQ(to_vec(y), expect);
  EXPECT_EQ(y[0], 4.0);
  EXPECT_EQ(y[5], 9.0);
  EXPECT_EQ(y[15], 4.0);
}

TEST(Conv2d, ZeroInputZeroOutput) {
  auto k = random_tensor({4, 2, 3, 3}, 7);
  auto y = conv2d<double>(nullptr, Tensor<double>({2, 2, 5, 5}), k,
                          Tensor<double>::zeros({4}));
  for (double v : y.data()) EXPECT_EQ(v, 0.0);
}

TEST(Conv2d, ChannelMismatchNamesShapes) {
  try {
    conv2d<double>(nullptr, Tensor<double>({1, 3, 4, 4}), Tensor<double>({2, 2, 3, 3}), {});
    FAIL();
  } catch (const ShapeError& e) {
    const std::string msg = e.what();
    EXPECT_NE(msg.find("(1,3,4,4)"), std::string::npos);
    EXPECT_NE(msg.find("(2,2,3,3)"), std::string::npos);
  }
}

TEST(Conv2d, MatchesDirectSummationOracle) {
  for (auto seed : kSeeds) {
    auto x = random_tensor({2, 3, 9, 7}, seed);
    auto k = random_tensor({5, 3, 3, 3}, seed + 100);
    auto b = random_tensor({5}, seed + 200);
    auto y = conv2d<double>(nullptr, x, k, b);
    ASSERT_EQ(y.shape(), (Shape{2, 5, 9, 7}));
    for (int n = 0; n < 2; ++n) {
      std::vector<double> xi(x.data().begin() + n * 189, x.data().begin() + (n + 1) * 189);
      auto ref = oracle::conv2d(xi, 3, 9, 7, to_vec(k), 5, 3, 1, 1, 1, 9, 7);
      for (int i = 0; i < 5 * 63; ++i) {
        const double want = ref[i] + b[i / 63];
        EXPECT_NEAR(y[n * 315 + i], want, 1e-6 * std::max(1.0, std::abs(want)));
      }
    }
  }
}

TEST(Conv2d, StridedSameMatchesOracle) {
  auto x = random_tensor({1, 2, 8, 6}, 11);
  auto k = random_tensor({3, 2, 3, 3}, 12);
  auto y = conv2d<double>(nullptr, x, k, {}, 2);
  ASSERT_EQ(y.shape(), (Shape{1, 3, 4, 3}));
  // stride 2, same: padding total 1, all of it on the bottom/right
  auto ref = oracle::conv2d(to_vec(x), 2, 8, 6, to_vec(k), 3, 3, 2, 0, 0, 4, 3);
  for (std::size_t i = 0; i < ref.size(); ++i) EXPECT_NEAR(y[i], ref[i], 1e-12);
}

TEST(Conv2d, GradientsMatchFiniteDifferences) {
  for (auto seed : kSeeds) {
    auto rep = check_gradients(
        [](Tape<double>& t, std::vector<Tensor<double>>& in) {
          return probe(t, conv2d(&t, in[0], in[1], in[2]));
        },
        std::vector<Shape>{{2, 3, 6, 5}, {4, 3, 3, 3}, {4}}, {.seed = seed});
    EXPECT_TRUE(rep.passed) << rep.failure;
  }
}

TEST(Conv2d, StridedAndPointwiseGradients) {
  for (auto seed : kSeeds) {
    auto rep = check_gradients(
        [](Tape<double>& t, std::vector<Tensor<double>>& in) {
          auto a = conv2d(&t, in[0], in[1], in[2], 2);
          return probe(t, conv2d(&t, a, in[3], {}, 1, 0));
        },
        std::vector<Shape>{{1, 2, 6, 6}, {3, 2, 3, 3}, {3}, {2, 3, 1, 1}},
        {.seed = seed});
    EXPECT_TRUE(rep.passed) << rep.failure;
  }
}

// separable

TEST(SeparableConv, IdentityKernels) {
  auto x = random_tensor({1, 3, 5, 5}, 4);
  Tensor<double> dw({3, 1, 3, 3}, 0.0), pw({3, 3, 1, 1}, 0.0);
  for (int c = 0; c < 3; ++c) {
    dw[c * 9 + 4] = 1;
    pw[c * 3 + c] = 1;
  }
  auto y = separable_conv2d<double>(nullptr, x, dw, pw, Tensor<double>::zeros({3}));
  EXPECT_TRUE(bit_equal(y, x));
}

TEST(SeparableConv, ParameterCount) {
  const std::size_t c = 8, oc = 8;
  const std::size_t count = Tensor<float>({c, 1, 3, 3}).numel() +
                            Tensor<float>({oc, c, 1, 1}).numel() + Tensor<float>({oc}).numel();
  EXPECT_EQ(count, 144u);
}

TEST(SeparableConv, EqualsPointwiseOfDepthwise) {
  auto x = random_tensor({2, 4, 6, 6}, 21);
  auto dw = random_tensor({4, 1, 3, 3}, 22);
  auto pw = random_tensor({5, 4, 1, 1}, 23);
  auto b = random_tensor({5}, 24);
  auto y = separable_conv2d<double>(nullptr, x, dw, pw, b);
  auto ref = conv2d<double>(nullptr, depthwise_conv2d<double>(nullptr, x, dw), pw, b, 1, 0);
  EXPECT_TRUE(bit_equal(y, ref));
  // depthwise against the dense oracle with a block-diagonal kernel
  std::vector<double> full(4 * 4 * 9, 0.0);
  for (int c = 0; c < 4; ++c)
    for (int j = 0; j < 9; ++j) full[(c * 4 + c) * 9 + j] = dw[c * 9 + j];
  auto d = depthwise_conv2d<double>(nullptr, x, dw);
  std::vector<double> x0(x.data().begin(), x.data().begin() + 144);
  auto want = oracle::conv2d(x0, 4, 6, 6, full, 4, 3, 1, 1, 1, 6, 6);
  for (int i = 0; i < 144; ++i) EXPECT_NEAR(d[i], want[i], 1e-12);
}

TEST(SeparableConv, Gradients) {
  for (auto seed : kSeeds) {
    auto rep = check_gradients(
        [](Tape<double>& t, std::vector<Tensor<double>>& in) {
          return probe(t, separable_conv2d(&t, in[0], in[1], in[2], in[3]));
        },
        std::vector<Shape>{{2, 3, 5, 6}, {3, 1, 3, 3}, {4, 3, 1, 1}, {4}}, {.seed = seed});
    EXPECT_TRUE(rep.passed) << rep.failure;
  }
}

// transpose_conv2d

TEST(TransposeConv, SinglePixelScatter) {
  Tensor<double> x({1, 1, 1, 1}, 1.0);
  auto k = random_tensor({1, 1, 3, 3}, 5);
  auto y = transpose_conv2d<double>(nullptr, x, k, {});
  ASSERT_EQ(y.shape(), (Shape{1, 1, 2, 2}));
  auto ref = oracle::transpose_conv(to_vec(x), 1, 1, 1, to_vec(k), 1);
  EXPECT_EQ(to_vec(y), ref);
  // the 2x2 window keeps the top-left part of the kernel
  EXPECT_EQ(y[0], k[0]);
  EXPECT_EQ(y[1], k[1]);
  EXPECT_EQ(y[2], k[3]);
  EXPECT_EQ(y[3], k[4]);
}

TEST(TransposeConv, ZeroInput) {
  auto y = transpose_conv2d<double>(nullptr, Tensor<double>({1, 2, 3, 3}),
                                    random_tensor({2, 4, 3, 3}, 1), {});
  for (double v : y.data()) EXPECT_EQ(v, 0.0);
}

TEST(TransposeConv, MatchesScatterOracle) {
  auto x = random_tensor({2, 3, 4, 5}, 31);
  auto k = random_tensor({3, 2, 3, 3}, 32);
  auto b = random_tensor({2}, 33);
  auto y = transpose_conv2d<double>(nullptr, x, k, b);
  ASSERT_EQ(y.shape(), (Shape{2, 2, 8, 10}));
  for (int n = 0; n < 2; ++n) {
    std::vector<double> xi(x.data().begin() + n * 60, x.data().begin() + (n + 1) * 60);
    auto ref = oracle::transpose_conv(xi, 3, 4, 5, to_vec(k), 2);
    for (int i = 0; i < 160; ++i) EXPECT_NEAR(y[n * 160 + i], ref[i] + b[i / 80], 1e-12);
  }
}

TEST(TransposeConv, AdjointOfStridedConv) {
  for (auto seed : kSeeds) {
    auto x = random_tensor({1, 3, 5, 4}, seed);
    auto y = random_tensor({1, 2, 10, 8}, seed + 50);
    auto k = random_tensor({3, 2, 3, 3}, seed + 60);
    auto tx = transpose_conv2d<double>(nullptr, x, k, {});
    // conv weight [OC=3, C=2] is the same array as the transpose kernel [3,2]
    auto cy = conv2d<double>(nullptr, y, k, {}, 2);
    const double lhs = dot(tx, y), rhs = dot(x, cy);
    EXPECT_NEAR(lhs, rhs, 1e-6 * std::max(1.0, std::abs(lhs)));
  }
}

TEST(TransposeConv, Gradients) {
  for (auto seed : kSeeds) {
    auto rep = check_gradients(
        [](Tape<double>& t, std::vector<Tensor<double>>& in) {
          return probe(t, transpose_conv2d(&t, in[0], in[1], in[2]));
        },
        std::vector<Shape>{{2, 3, 3, 4}, {3, 2, 3, 3}, {2}}, {.seed = seed});
    EXPECT_TRUE(rep.passed) << rep.failure;
  }
}

// batch_norm

TEST(BatchNorm, EvalIdentityWithUnitStats) {
  auto x = random_tensor({2, 3, 4, 4}, 8);
  auto y = batch_norm<double>(nullptr, x, Tensor<double>::ones({3}), Tensor<double>::zeros({3}),
                              Tensor<double>::zeros({3}), Tensor<double>::ones({3}), Mode::Eval,
                              0.9, 0.0);
  EXPECT_TRUE(bit_equal(y, x));
}

TEST(BatchNorm, TrainNormalizesPerChannel) {
  auto x = random_tensor({4, 2, 5, 5}, 9);
  for (auto& v : x.data()) v = 3 * v + 7;
  auto rm = Tensor<double>::zeros({2}), rv = Tensor<double>::ones({2});
  auto y = batch_norm<double>(nullptr, x, Tensor<double>::ones({2}), Tensor<double>::zeros({2}),
                              rm, rv, Mode::Train, 0.9, 1e-12);
  for (int c = 0; c < 2; ++c) {
    double s = 0, s2 = 0;
    for (int n = 0; n < 4; ++n)
      for (int j = 0; j < 25; ++j) {
        const double v = y[(n * 2 + c) * 25 + j];
        s += v;
        s2 += v * v;
      }
    EXPECT_NEAR(s / 100, 0.0, 1e-9);
    EXPECT_NEAR(s2 / 100, 1.0, 1e-9);
    EXPECT_GT(rm[c], 0.0);  // running mean moved toward ~7
  }
}

TEST(BatchNorm, AffineScaleShift) {
  auto x = random_tensor({8, 1, 4, 4}, 10);
  Tensor<double> gamma({1}, 2.0), beta({1}, 3.0);
  auto y = batch_norm<double>(nullptr, x, gamma, beta, Tensor<double>::zeros({1}),
                              Tensor<double>::ones({1}), Mode::Train, 0.9, 1e-12);
  double s = 0, s2 = 0;
  for (double v : y.data()) s += v;
  const double m = s / y.numel();
  for (double v : y.data()) s2 += (v - m) * (v - m);
  EXPECT_NEAR(m, 3.0, 1e-9);
  EXPECT_NEAR(std::sqrt(s2 / y.numel()), 2.0, 1e-9);
}

TEST(BatchNorm, EvalIsPerChannelAffine) {
  auto gamma = random_tensor({3}, 1), beta = random_tensor({3}, 2);
  auto rm = random_tensor({3}, 3);
  Tensor<double> rv({3}, std::vector<double>{0.5, 2.0, 1.5});
  auto a = random_tensor({1, 3, 2, 2}, 4), b = random_tensor({1, 3, 2, 2}, 5);
  auto f = [&](const Tensor<double>& x) {
    return batch_norm<double>(nullptr, x, gamma, beta, rm, rv, Mode::Eval);
  };
  Tensor<double> mix(a.shape());
  for (std::size_t i = 0; i < mix.numel(); ++i) mix[i] = 0.25 * a[i] + 0.75 * b[i];
  auto fa = f(a), fb = f(b), fm = f(mix);
  for (std::size_t i = 0; i < mix.numel(); ++i)
    EXPECT_NEAR(fm[i], 0.25 * fa[i] + 0.75 * fb[i], 1e-12);
}

TEST(BatchNorm, EmptyBatchRejected) {
  EXPECT_THROW(batch_norm<double>(nullptr, Tensor<double>({0, 2, 3, 3}), Tensor<double>::ones({2}),
                                  Tensor<double>::zeros({2}), Tensor<double>::zeros({2}),
                                  Tensor<double>::ones({2}), Mode::Train),
               ContractError);
}

TEST(BatchNorm, Gradients) {
  for (auto seed : kSeeds) {
    for (Mode mode : {Mode::Train, Mode::Eval}) {
      auto rm = random_tensor({3}, 70), rv = Tensor<double>({3}, 1.3);
      auto rep = check_gradients(
          [&](Tape<double>& t, std::vector<Tensor<double>>& in) {
            return probe(t, batch_norm(&t, in[0], in[1], in[2], rm.clone(), rv.clone(), mode));
          },
          std::vector<Shape>{{3, 3, 4, 4}, {3}, {3}}, {.seed = seed});
      EXPECT_TRUE(rep.passed) << rep.failure;
    }
  }
}

// pooling

TEST(Pool2d, ConstantInput) {
  Tensor<double> x({1, 2, 4, 4}, 3.5);
  for (auto mode : {PoolMode::Max, PoolMode::Avg}) {
    auto y = pool2d<double>(nullptr, x, mode);
    ASSERT_EQ(y.shape(), (Shape{1, 2, 2, 2}));
    for (double v : y.data()) EXPECT_EQ(v, 3.5);
  }
}

TEST(Pool2d, MaxAndAverageOfBlock) {
  Tensor<double> x({1, 1, 2, 2}, std::vector<double>{1, 2, 3, 4});
  EXPECT_EQ(pool2d<double>(nullptr, x, PoolMode::Max)[0], 4.0);
  EXPECT_EQ(pool2d<double>(nullptr, x, PoolMode::Avg)[0], 2.5);
}

TEST(Pool2d, MaxGradientRoutesToArgmax) {
  Tape<double> tape;
  Tensor<double> x({1, 1, 2, 2}, std::vector<double>{1, 2, 3, 4});
  x.set_requires_grad(true);
  backward(tape, sum(&tape, pool2d(&tape, x, PoolMode::Max)));
  EXPECT_EQ(to_vec(Tensor<double>({4}, std::vector<double>(x.grad().begin(), x.grad().end()))),
            (std::vector<double>{0, 0, 0, 1}));
}

TEST(Pool2d, TiesGoToFirstIndex) {
  Tape<double> tape;
  Tensor<double> x({1, 1, 2, 2}, 5.0);
  x.set_requires_grad(true);
  backward(tape, sum(&tape, pool2d(&tape, x, PoolMode::Max)));
  EXPECT_EQ(x.grad()[0], 1.0);
  EXPECT_EQ(x.grad()[3], 0.0);
}

TEST(Pool2d, OddExtentRejected) {
  EXPECT_THROW(pool2d<double>(nullptr, Tensor<double>({1, 1, 3, 4}), PoolMode::Max), ShapeError);
}

TEST(Pool2d, Gradients) {
  for (auto seed : kSeeds)
    for (auto mode : {PoolMode::Max, PoolMode::Avg}) {
      // random normal data has no ties, and the 1e-5 probe step stays far
      // from any window's runner-up
      auto rep = check_gradients(
          [mode](Tape<double>& t, std::vector<Tensor<double>>& in) {
            return probe(t, pool2d(&t, in[0], mode));
          },
          std::vector<Shape>{{2, 2, 4, 6}}, {.seed = seed});
      EXPECT_TRUE(rep.passed) << rep.failure;
    }
}

TEST(GlobalAvgPool, ConstantAndIota) {
  EXPECT_EQ(global_avg_pool<double>(nullptr, Tensor<double>({1, 1, 3, 3}, 2.5))[0], 2.5);
  Tensor<double> x({1, 1, 14, 14});
  std::iota(x.data().begin(), x.data().end(), 0.0);
  // mean of 0..195
  EXPECT_DOUBLE_EQ(global_avg_pool<double>(nullptr, x)[0], 97.5);
}

TEST(GlobalAvgPool, UniformGradient) {
  Tape<double> tape;
  Tensor<double> x({1, 2, 3, 3}, 1.0);
  x.set_requires_grad(true);
  backward(tape, sum(&tape, global_avg_pool(&tape, x)));
  for (double g : x.grad()) EXPECT_DOUBLE_EQ(g, 1.0 / 9.0);
}

TEST(GlobalAvgPool, Gradients) {
  for (auto seed : kSeeds) {
    auto rep = check_gradients(
        [](Tape<double>& t, std::vector<Tensor<double>>& in) {
          return probe(t, global_avg_pool(&t, in[0]));
        },
        std::vector<Shape>{{2, 3, 4, 5}}, {.seed = seed});
    EXPECT_TRUE(rep.passed) << rep.failure;
  }
}

// dense

TEST(Dense, IdentityWeight) {
  auto x = random_tensor({3, 4}, 1);
  Tensor<double> w({4, 4}, 0.0);
  for (int i = 0; i < 4; ++i) w[i * 5] = 1;
  EXPECT_TRUE(bit_equal(dense<double>(nullptr, x, w, Tensor<double>::zeros({4})), x));
}

TEST(Dense, HandArithmetic) {
  Tensor<double> x({1, 2}, std::vector<double>{1, 2});
  Tensor<double> w({2, 2}, std::vector<double>{1, 0, 0, 1});
  Tensor<double> b({2}, std::vector<double>{1, 1});
  auto y = dense<double>(nullptr, x, w, b);
  EXPECT_EQ(y[0], 2.0);
  EXPECT_EQ(y[1], 3.0);
}

TEST(Dense, MatchesNaiveMatmul) {
  auto x = random_tensor({5, 7}, 2), w = random_tensor({7, 3}, 3);
  auto y = dense<double>(nullptr, x, w, {});
  auto ref = oracle::matmul(to_vec(x), to_vec(w), 5, 7, 3);
  for (std::size_t i = 0; i < ref.size(); ++i) EXPECT_NEAR(y[i], ref[i], 1e-12);
}

TEST(Dense, ShapeMismatch) {
  EXPECT_THROW(dense<double>(nullptr, Tensor<double>({2, 3}), Tensor<double>({4, 2}), {}),
               ShapeError);
}

TEST(Dense, Gradients) {
  for (auto seed : kSeeds) {
    auto rep = check_gradients(
        [](Tape<double>& t, std::vector<Tensor<double>>& in) {
          return probe(t, dense(&t, in[0], in[1], in[2]));
        },
        std::vector<Shape>{{4, 6}, {6, 3}, {3}}, {.seed = seed});
    EXPECT_TRUE(rep.passed) << rep.failure;
  }
}

// activations

TEST(Activation, SoftmaxUniform) {
  Tensor<double> x({2, 5}, 0.7);
  auto y = activation<double>(nullptr, x, Activation::Softmax);
  for (double v : y.data()) EXPECT_DOUBLE_EQ(v, 0.2);
}

TEST(Activation, SigmoidZero) {
  EXPECT_EQ(activation<double>(nullptr, Tensor<double>({1}, 0.0), Activation::Sigmoid)[0], 0.5);
}

TEST(Activation, SoftmaxStableForLargeLogits) {
  auto y = softmax<float>(nullptr, Tensor<float>({1, 2}, 1000.0f));
  EXPECT_EQ(y[0], 0.5f);
  EXPECT_EQ(y[1], 0.5f);
  auto s = sigmoid<float>(nullptr, Tensor<float>({2}, std::vector<float>{-1000.f, 1000.f}));
  EXPECT_EQ(s[0], 0.0f);
  EXPECT_EQ(s[1], 1.0f);
}

TEST(Activation, ReluClampsNegatives) {
  Tensor<double> x({4}, std::vector<double>{-2, -0.5, 0.5, 3});
  auto y = relu<double>(nullptr, x);
  EXPECT_EQ(to_vec(y), (std::vector<double>{0, 0, 0.5, 3}));
}

TEST(Activation, Gradients) {
  for (auto seed : kSeeds)
    for (auto kind : {Activation::Relu, Activation::Sigmoid, Activation::Softmax}) {
      auto rep = check_gradients(
          [kind](Tape<double>& t, std::vector<Tensor<double>>& in) {
            return probe(t, activation(&t, in[0], kind));
          },
          std::vector<Shape>{{3, 7}}, {.seed = seed});
      EXPECT_TRUE(rep.passed) << rep.failure;
    }
}

TEST(L2Normalize, UnitRowsAndGradients) {
  auto x = random_tensor({3, 5}, 6);
  auto y = l2_normalize<double>(nullptr, x);
  for (int r = 0; r < 3; ++r) {
    double s = 0;
    for (int j = 0; j < 5; ++j) s += y[r * 5 + j] * y[r * 5 + j];
    EXPECT_NEAR(s, 1.0, 1e-12);
  }
  for (auto seed : kSeeds) {
    auto rep = check_gradients(
        [](Tape<double>& t, std::vector<Tensor<double>>& in) {
          return probe(t, l2_normalize(&t, in[0]));
        },
        std::vector<Shape>{{3, 5}}, {.seed = seed});
    EXPECT_TRUE(rep.passed) << rep.failure;
  }
}

// dropout

TEST(Dropout, EvalIsIdentity) {
  Rng rng(1);
  auto x = random_tensor({10}, 1);
  auto y = dropout<double>(nullptr, x, 0.5, Mode::Eval, rng);
  EXPECT_TRUE(bit_equal(x, y));
}

TEST(Dropout, RateZeroIsIdentity) {
  Rng rng(1);
  auto x = random_tensor({10}, 1);
  EXPECT_TRUE(bit_equal(x, dropout<double>(nullptr, x, 0.0, Mode::Train, rng)));
  EXPECT_TRUE(bit_equal(x, dropout<double>(nullptr, x, 0.0, Mode::Eval, rng)));
}

TEST(Dropout, HalfRateMonteCarlo) {
  Rng rng(2024);
  Tensor<float> x({1000000}, 1.0f);
  auto y = dropout<float>(nullptr, x, 0.5, Mode::Train, rng);
  std::size_t kept = 0;
  for (float v : y.data()) {
    if (v != 0.0f) {
      ++kept;
      EXPECT_EQ(v, 2.0f);
    }
  }
  EXPECT_NEAR(static_cast<double>(kept) / 1e6, 0.5, 0.01);
}

TEST(Dropout, RateOneRejected) {
  Rng rng(1);
  EXPECT_THROW(dropout<double>(nullptr, Tensor<double>({3}), 1.0, Mode::Train, rng),
               ContractError);
}

TEST(Dropout, GradientsWithFixedMask) {
  for (auto seed : kSeeds) {
    auto rep = check_gradients(
        [seed](Tape<double>& t, std::vector<Tensor<double>>& in) {
          Rng rng(seed);  // same mask on every evaluation
          return probe(t, dropout(&t, in[0], 0.3, Mode::Train, rng));
        },
        std::vector<Shape>{{4, 6}}, {.seed = seed});
    EXPECT_TRUE(rep.passed) << rep.failure;
  }
}

// concat

TEST(Concat, EmptyChannelOperand) {
  auto x = random_tensor({2, 3, 4, 4}, 1);
  auto y = concat_channels<double>(nullptr, x, Tensor<double>({2, 0, 4, 4}));
  EXPECT_TRUE(bit_equal(x, y));
}

TEST(Concat, ShapeArithmetic) {
  auto y = concat_channels<float>(nullptr, Tensor<float>({1, 32, 28, 28}),
                                  Tensor<float>({1, 32, 28, 28}));
  EXPECT_EQ(y.shape(), (Shape{1, 64, 28, 28}));
}

TEST(Concat, SliceBackRecoversOperands) {
  auto a = random_tensor({2, 2, 3, 3}, 1), b = random_tensor({2, 3, 3, 3}, 2);
  auto y = concat_channels<double>(nullptr, a, b);
  for (int n = 0; n < 2; ++n) {
    for (int i = 0; i < 18; ++i) EXPECT_EQ(y[n * 45 + i], a[n * 18 + i]);
    for (int i = 0; i < 27; ++i) EXPECT_EQ(y[n * 45 + 18 + i], b[n * 27 + i]);
  }
}

TEST(Concat, SpatialMismatchNamesShapes) {
  try {
    concat_channels<double>(nullptr, Tensor<double>({1, 2, 4, 4}), Tensor<double>({1, 2, 5, 4}));
    FAIL();
  } catch (const ShapeError& e) {
    EXPECT_NE(std::string(e.what()).find("(1,2,5,4)"), std::string::npos);
  }
}

TEST(Concat, Gradients) {
  for (auto seed : kSeeds) {
    auto rep = check_gradients(
        [](Tape<double>& t, std::vector<Tensor<double>>& in) {
          return probe(t, concat_channels(&t, in[0], in[1]));
        },
        std::vector<Shape>{{2, 2, 3, 3}, {2, 1, 3, 3}}, {.seed = seed});
    EXPECT_TRUE(rep.passed) << rep.failure;
  }
}

TEST(Kernels, FloatAndDoubleAgree) {
  auto x = random_tensor({1, 4, 16, 16}, 40);
  auto k = random_tensor({8, 4, 3, 3}, 41);
  auto yd = conv2d<double>(nullptr, x, k, {});
  auto yf = conv2d<float>(nullptr, cast<float>(x), cast<float>(k), {});
  for (std::size_t i = 0; i < yd.numel(); ++i) EXPECT_NEAR(yf[i], yd[i], 1e-4);
}
