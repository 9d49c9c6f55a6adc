#include <gtest/gtest.h>

#include <cmath>

#include "scn/ops.hpp"
#include "test_util.hpp"

namespace scn {
namespace {

using testing::gradient_check;
using testing::random_tensor;

constexpr double kOpTol = 1e-4;

TEST(Backward, SumOfSquaresGivesTwiceTheWeights) {
  auto w = VarD::parameter(TensorD({2}, {1.0, 2.0}));
  backward(sum(mul(w, w)));
  EXPECT_DOUBLE_EQ(w.grad()[0], 2.0);
  EXPECT_DOUBLE_EQ(w.grad()[1], 4.0);
}

TEST(Backward, UnusedParameterGetsZeroGradient) {
  auto w = VarD::parameter(TensorD({2}, {1.0, 2.0}));
  auto p = VarD::parameter(TensorD({3}, 5.0));
  backward(sum(w));
  const TensorD g = p.grad();
  for (double v : g.values()) EXPECT_EQ(v, 0.0);
}

TEST(Backward, RejectsNonScalarRoot) {
  auto w = VarD::parameter(TensorD({2}, 1.0));
  try {
    backward(scale(w, 2.0));
    FAIL() << "expected usage error";
  } catch (const Error& e) {
    EXPECT_EQ(e.kind(), ErrorKind::usage);
  }
}

TEST(Backward, SecondCallAccumulatesIntoLeaves) {
  Rng rng(11);
  auto x = VarD::parameter(random_tensor({1, 2, 4, 4}, rng));
  auto w = VarD::parameter(random_tensor({3, 2, 3, 3}, rng));
  auto root = sum(mul(conv2d<double>(x, w, std::nullopt, {1, 1, 1}), conv2d<double>(x, w, std::nullopt, {1, 1, 1})));
  backward(root);
  const TensorD once = w.grad();
  backward(root);
  for (std::size_t i = 0; i < once.size(); ++i) EXPECT_NEAR(w.grad()[i], 2.0 * once[i], 1e-12);
  w.zero_grad();
  EXPECT_FALSE(w.has_grad());
}

TEST(Backward, DetachBlocksGradient) {
  auto x = VarD::parameter(TensorD({3}, {1.0, -2.0, 0.5}));
  backward(sum(mul(detach(x), x)));
  for (std::size_t i = 0; i < 3; ++i) EXPECT_EQ(x.grad()[i], x.value()[i]);
}

TEST(NoGrad, GuardSkipsGraphRecording) {
  auto w = VarD::parameter(TensorD({2}, 1.0));
  NoGradGuard guard;
  auto y = scale(w, 3.0);
  EXPECT_FALSE(y.requires_grad());
}

// --- conv2d -----------------------------------------------------------------

TEST(Conv2d, UnitPointwiseKernelIsIdentity) {
  Rng rng(1);
  VarD x(random_tensor({2, 1, 5, 5}, rng));
  VarD w(TensorD({1, 1, 1, 1}, 1.0));
  VarD b(TensorD({1}, 0.0));
  auto y = conv2d<double>(x, w, b);
  EXPECT_EQ(y.value(), x.value());
}

TEST(Conv2d, OnesKernelSpreadsImpulseToThreeByThreeBlock) {
  TensorD img({1, 1, 5, 5});
  img.at(0, 0, 2, 2) = 1.0;
  auto y = conv2d<double>(VarD(img), VarD(TensorD({1, 1, 3, 3}, 1.0)), std::nullopt, {1, 1, 1});
  for (std::size_t i = 0; i < 5; ++i)
    for (std::size_t j = 0; j < 5; ++j) {
      const bool inside = i >= 1 && i <= 3 && j >= 1 && j <= 3;
      EXPECT_EQ(y.value().at(0, 0, i, j), inside ? 1.0 : 0.0) << i << "," << j;
    }
}

TEST(Conv2d, DepthwiseIdentityKernelsPreserveInput) {
  Rng rng(2);
  VarD x(random_tensor({2, 3, 4, 4}, rng));
  TensorD w({3, 1, 3, 3});
  for (std::size_t c = 0; c < 3; ++c) w.at(c, 0, 1, 1) = 1.0;
  auto y = conv2d<double>(x, VarD(w), std::nullopt, {1, 1, 3});
  for (std::size_t i = 0; i < x.size(); ++i) EXPECT_DOUBLE_EQ(y.value()[i], x.value()[i]);
}

TEST(Conv2d, MatchesSumOfPerChannelCorrelations) {
  Rng rng(3);
  for (std::size_t pad : {0u, 1u}) {
    for (std::size_t stride : {1u, 2u}) {
      const TensorD x = random_tensor({2, 3, 3, 3}, rng);
      const TensorD w = random_tensor({2, 3, 2, 2}, rng);
      auto y = conv2d<double>(VarD(x), VarD(w), std::nullopt, {stride, pad, 1});
      const std::size_t ho = (3 + 2 * pad - 2) / stride + 1;
      ASSERT_EQ(y.shape(), (Shape{2, 2, ho, ho}));
      for (std::size_t n = 0; n < 2; ++n)
        for (std::size_t o = 0; o < 2; ++o)
          for (std::size_t i = 0; i < ho; ++i)
            for (std::size_t j = 0; j < ho; ++j) {
              double expect = 0.0;
              for (std::size_t c = 0; c < 3; ++c)  // one 2-D correlation per input channel
                for (std::size_t a = 0; a < 2; ++a)
                  for (std::size_t b = 0; b < 2; ++b) {
                    const long r = long(i * stride + a) - long(pad), q = long(j * stride + b) - long(pad);
                    if (r >= 0 && r < 3 && q >= 0 && q < 3) expect += w.at(o, c, a, b) * x.at(n, c, r, q);
                  }
              EXPECT_NEAR(y.value().at(n, o, i, j), expect, 1e-12);
            }
    }
  }
}

TEST(Conv2d, ShapeMismatchIsDimensionError) {
  VarD x(TensorD({1, 3, 4, 4}));
  VarD w(TensorD({2, 2, 3, 3}));
  try {
    conv2d<double>(x, w, std::nullopt);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.kind(), ErrorKind::dimension);
  }
}

// --- batch_norm ---------------------------------------------------------------

TEST(BatchNorm, IdentityStatisticsInEvalMode) {
  Rng rng(4);
  VarD x(random_tensor({2, 2, 3, 3}, rng));
  TensorD rm({2}, 0.0), rv({2}, 1.0);
  auto y = batch_norm(x, VarD(TensorD({2}, 1.0)), VarD(TensorD({2}, 0.0)), rm, rv, {0.0, 0.1, false});
  EXPECT_EQ(y.value(), x.value());
}

TEST(BatchNorm, AffineInEvalMode) {
  Rng rng(5);
  VarD x(random_tensor({1, 1, 3, 3}, rng));
  TensorD rm({1}, 0.0), rv({1}, 1.0);
  auto y = batch_norm(x, VarD(TensorD({1}, 2.0)), VarD(TensorD({1}, 3.0)), rm, rv, {0.0, 0.1, false});
  for (std::size_t i = 0; i < x.size(); ++i) EXPECT_DOUBLE_EQ(y.value()[i], 2.0 * x.value()[i] + 3.0);
}

TEST(BatchNorm, ConstantChannelInTrainingModeOutputsBeta) {
  VarD x(TensorD({3, 1, 2, 2}, 0.7));
  TensorD rm({1}, 0.0), rv({1}, 1.0);
  auto y = batch_norm(x, VarD(TensorD({1}, 1.5)), VarD(TensorD({1}, -0.25)), rm, rv, {1e-5, 0.1, true});
  for (double v : y.value().values()) EXPECT_NEAR(v, -0.25, 1e-9);
  EXPECT_NEAR(rm[0], 0.07, 1e-12);
  EXPECT_NEAR(rv[0], 0.9, 1e-12);
}

TEST(BatchNorm, NegativeEpsIsConfigError) {
  VarD x(TensorD({1, 1, 2, 2}));
  TensorD rm({1}), rv({1}, 1.0);
  try {
    batch_norm(x, VarD(TensorD({1}, 1.0)), VarD(TensorD({1})), rm, rv, {-1e-5, 0.1, false});
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.kind(), ErrorKind::config);
  }
}

// --- pooling / resampling / concat -------------------------------------------

TEST(MaxPool, ConstantInputStaysConstant) {
  auto y = max_pool2d(VarD(TensorD({1, 2, 4, 4}, 3.0)), 2, 2);
  for (double v : y.value().values()) EXPECT_EQ(v, 3.0);
}

TEST(MaxPool, PicksMaximum) {
  auto y = max_pool2d(VarD(TensorD({1, 1, 2, 2}, {1, 2, 3, 4})), 2, 2);
  ASSERT_EQ(y.size(), 1u);
  EXPECT_EQ(y.value()[0], 4.0);
}

TEST(MaxPool, TieRoutesGradientToFirstRowMajorIndex) {
  auto x = VarD::parameter(TensorD({1, 1, 2, 2}, 5.0));
  backward(sum(max_pool2d(x, 2, 2)));
  EXPECT_EQ(x.grad().values()[0], 1.0);
  EXPECT_EQ(x.grad().values()[1], 0.0);
  EXPECT_EQ(x.grad().values()[2], 0.0);
  EXPECT_EQ(x.grad().values()[3], 0.0);
}

TEST(MaxPool, KernelLargerThanInputIsDimensionError) {
  try {
    max_pool2d(VarD(TensorD({1, 1, 2, 2})), 3, 1);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.kind(), ErrorKind::dimension);
  }
}

TEST(Upsample, ReplicatesEachPixel) {
  auto y = upsample_nearest2x(VarD(TensorD({1, 1, 1, 1}, 0.375)));
  EXPECT_EQ(y.shape(), (Shape{1, 1, 2, 2}));
  for (double v : y.value().values()) EXPECT_EQ(v, 0.375);
}

TEST(Upsample, PreservesBinarityAndSumsGradient) {
  Rng rng(6);
  TensorD bin({1, 2, 3, 3});
  for (auto& v : bin.values()) v = rng.bernoulli(0.4) ? 1.0 : 0.0;
  auto x = VarD::parameter(bin);
  auto y = upsample_nearest2x(x);
  for (double v : y.value().values()) EXPECT_TRUE(v == 0.0 || v == 1.0);
  backward(sum(y));
  const TensorD g = x.grad();
  for (double v : g.values()) EXPECT_EQ(v, 4.0);
}

TEST(Concat, ShapeAlgebraAndEmptyIdentity) {
  VarD a(TensorD({1, 2, 4, 4}, 1.0));
  VarD b(TensorD({1, 3, 4, 4}, 2.0));
  EXPECT_EQ(concat_channels(a, b).shape(), (Shape{1, 5, 4, 4}));
  VarD empty(TensorD({1, 0, 4, 4}));
  EXPECT_EQ(concat_channels(empty, b).value(), b.value());
  EXPECT_EQ(concat_channels(a, empty).value(), a.value());
}

TEST(Concat, GradientSplitsByChannelRange) {
  auto a = VarD::parameter(TensorD({2, 1, 2, 2}));
  auto b = VarD::parameter(TensorD({2, 2, 2, 2}));
  TensorD weights({2, 3, 2, 2});
  for (std::size_t i = 0; i < weights.size(); ++i) weights[i] = double(i);
  backward(sum(mul(concat_channels(a, b), VarD(weights))));
  for (std::size_t n = 0; n < 2; ++n)
    for (std::size_t k = 0; k < 4; ++k) {
      EXPECT_EQ(a.grad()[n * 4 + k], weights[n * 12 + k]);
      EXPECT_EQ(b.grad()[n * 8 + k], weights[n * 12 + 4 + k]);
      EXPECT_EQ(b.grad()[n * 8 + 4 + k], weights[n * 12 + 8 + k]);
    }
}

// --- spike_fn -------------------------------------------------------------------

TEST(SpikeFn, FiresAtThreshold) {
  auto y = spike_fn(VarD(TensorD({3}, {0.999, 1.0, 1.001})), {2.0, 1.0, false});
  EXPECT_EQ(y.value()[0], 0.0);
  EXPECT_EQ(y.value()[1], 1.0);
  EXPECT_EQ(y.value()[2], 1.0);
}

TEST(SpikeFn, SurrogateWeightAtThresholdIsOneForAlphaTwo) {
  EXPECT_DOUBLE_EQ(surrogate_grad(0.0, 2.0), 1.0);
  auto x = VarD::parameter(TensorD({1}, 1.0));
  backward(sum(spike_fn(x, {2.0, 1.0, false})));
  EXPECT_DOUBLE_EQ(x.grad()[0], 1.0);
}

TEST(SpikeFn, SurrogateDecaysAwayFromThreshold) {
  EXPECT_LT(surrogate_grad(1e4, 2.0), 1e-8);
  EXPECT_LT(surrogate_grad(-1e4, 2.0), 1e-8);
}

TEST(SpikeFn, ForwardIsExactlyBinary) {
  Rng rng(7);
  auto y = spike_fn(VarD(random_tensor({1000}, rng, -50.0, 50.0)), {2.0, 1.0, false});
  for (double v : y.value().values()) EXPECT_TRUE(v == 0.0 || v == 1.0);
}

// --- finite-difference checks ---------------------------------------------------

TEST(GradCheck, Conv2dAllConfigurations) {
  Rng rng(8);
  struct Case {
    Shape in, wt;
    Conv2dOptions opt;
  };
  const std::vector<Case> cases{{{2, 3, 4, 4}, {4, 3, 3, 3}, {1, 1, 1}},
                                {{2, 4, 4, 4}, {4, 1, 3, 3}, {1, 1, 4}},
                                {{1, 4, 4, 4}, {2, 2, 3, 3}, {2, 1, 2}},
                                {{2, 3, 4, 4}, {2, 3, 1, 1}, {1, 0, 1}},
                                {{1, 2, 5, 5}, {3, 2, 3, 3}, {2, 0, 1}}};
  for (const auto& c : cases) {
    auto x = VarD::parameter(random_tensor(c.in, rng));
    auto w = VarD::parameter(random_tensor(c.wt, rng));
    auto b = VarD::parameter(random_tensor({c.wt[0]}, rng));
    auto r = VarD(random_tensor(conv2d<double>(x, w, b, c.opt).shape(), rng));
    const double err = gradient_check({x, w, b}, [&] { return sum(mul(conv2d<double>(x, w, b, c.opt), r)); });
    EXPECT_LE(err, kOpTol) << shape_string(c.in) << " groups " << c.opt.groups;
  }
}

TEST(GradCheck, BatchNormTrainAndEval) {
  Rng rng(9);
  for (bool training : {true, false}) {
    auto x = VarD::parameter(random_tensor({3, 2, 3, 3}, rng));
    auto g = VarD::parameter(random_tensor({2}, rng, 0.5, 1.5));
    auto b = VarD::parameter(random_tensor({2}, rng));
    TensorD rm = random_tensor({2}, rng), rv = random_tensor({2}, rng, 0.5, 2.0);
    auto r = VarD(random_tensor({3, 2, 3, 3}, rng));
    const double err = gradient_check({x, g, b}, [&] {
      TensorD m = rm, v = rv;
      return sum(mul(batch_norm(x, g, b, m, v, {1e-5, 0.1, training}), r));
    });
    EXPECT_LE(err, kOpTol) << (training ? "train" : "eval");
  }
}

TEST(GradCheck, PoolingUpsampleConcatElementwise) {
  Rng rng(10);
  auto x = VarD::parameter(random_tensor({2, 3, 4, 4}, rng));
  auto y = VarD::parameter(random_tensor({2, 2, 4, 4}, rng));
  auto r1 = VarD(random_tensor({2, 3, 2, 2}, rng));
  auto r1p = VarD(random_tensor({2, 3, 2, 2}, rng));
  auto r2 = VarD(random_tensor({2, 3, 8, 8}, rng));
  auto r3 = VarD(random_tensor({2, 5, 4, 4}, rng));
  EXPECT_LE(gradient_check({x}, [&] { return sum(mul(max_pool2d(x, 2, 2), r1)); }), kOpTol);
  EXPECT_LE(gradient_check({x}, [&] { return sum(mul(max_pool2d(x, 3, 2, 1), r1p)); }), kOpTol);
  EXPECT_LE(gradient_check({x}, [&] { return sum(mul(upsample_nearest2x(x), r2)); }), kOpTol);
  EXPECT_LE(gradient_check({x, y}, [&] { return sum(mul(concat_channels(x, y), r3)); }), kOpTol);
  EXPECT_LE(gradient_check({x}, [&] { return sum(mul(logistic(x), x)); }), kOpTol);
  EXPECT_LE(gradient_check({x}, [&] { return mean(mul(add_scalar(scale(x, 3.0), 0.5), x)); }), kOpTol);
  EXPECT_LE(gradient_check({x}, [&] { return sum(mul(temporal_mean(x, 2), slice_batch(x, 1, 1))); }), kOpTol);
  auto s = VarD::parameter(TensorD({1}, 0.7));
  EXPECT_LE(gradient_check({x, s}, [&] { return sum(mul(scale_by(x, s), x)); }), kOpTol);
}

TEST(GradCheck, ChainThroughRelaxedSpike) {
  Rng rng(12);
  auto x = VarD::parameter(random_tensor({2, 2, 3, 3}, rng));
  auto w = VarD::parameter(random_tensor({3, 2, 3, 3}, rng));
  auto r = VarD(random_tensor({2, 3, 3, 3}, rng));
  const SurrogateConfig relaxed{2.0, 0.2, true};
  const double err =
      gradient_check({x, w}, [&] { return sum(mul(spike_fn(conv2d<double>(x, w, std::nullopt, {1, 1, 1}), relaxed), r)); });
  EXPECT_LE(err, kOpTol);
}

}  // namespace
}  // namespace scn
