#include <gtest/gtest.h>

#include <array>

#include "scn/decode.hpp"
#include "scn/loss.hpp"
#include "scn/trainer.hpp"
#include "test_util.hpp"

namespace scn {
namespace {

using testing::gradient_check;
using testing::random_tensor;

// IoU of a (h, w) box against itself with each corner coordinate moved.
double shifted_iou(double h, double w, const std::array<double, 4>& d) {
  const Box a{0, 0, w, h};
  const double x1 = d[0], y1 = d[1], x2 = w + d[2], y2 = h + d[3];
  if (x2 <= x1 || y2 <= y1) return 0.0;
  return iou(a, Box{x1, y1, x2 - x1, y2 - y1});
}

// Smallest IoU over all corner moves with every coordinate in {-s, 0, s}.
double worst_iou(double h, double w, double s) {
  double worst = 1.0;
  for (int code = 0; code < 81; ++code) {
    std::array<double, 4> d;
    int c = code;
    for (double& v : d) {
      v = (c % 3 - 1) * s;
      c /= 3;
    }
    worst = std::min(worst, shifted_iou(h, w, d));
  }
  return worst;
}

TEST(GaussianRadius, DegenerateBox) {
  EXPECT_EQ(gaussian_radius(0, 10), 0.0);
  EXPECT_EQ(gaussian_radius(10, 0), 0.0);
}

TEST(GaussianRadius, BruteForceShiftSweep) {
  for (auto [h, w] : {std::pair{10.0, 10.0}, {40.0, 40.0}, {12.0, 30.0}, {5.0, 2.0}, {64.0, 24.0}}) {
    const double r = gaussian_radius(h, w, 0.7);
    ASSERT_GT(r, 0.0);
    for (double s = 0.0; s <= r; s += r / 50.0) EXPECT_GE(worst_iou(h, w, s), 0.7 - 1e-9) << h << "x" << w << " s=" << s;
    EXPECT_LT(worst_iou(h, w, r + 1e-3), 0.7) << h << "x" << w;
    // integer shifts
    const double k = std::floor(r);
    for (double s = 0; s <= k; s += 1.0) EXPECT_GE(worst_iou(h, w, s), 0.7 - 1e-9);
    EXPECT_LT(worst_iou(h, w, k + 1.0), 0.7);
  }
}

TEST(GaussianRadius, RandomShiftsWithinRadiusKeepOverlap) {
  Rng rng(3);
  for (int trial = 0; trial < 2000; ++trial) {
    const double h = rng.uniform(2, 80), w = rng.uniform(2, 80);
    const double r = gaussian_radius(h, w);
    std::array<double, 4> d;
    for (double& v : d) v = rng.uniform(-r, r);
    EXPECT_GE(shifted_iou(h, w, d), 0.7 - 1e-9);
  }
}

TEST(GaussianRadius, Monotone) {
  Rng rng(4);
  for (int i = 0; i < 500; ++i) {
    const double h = rng.uniform(0.5, 100), w = rng.uniform(0.5, 100);
    EXPECT_LE(gaussian_radius(h, w), gaussian_radius(2 * h, 2 * w));
  }
}

TEST(RenderTargets, Empty) {
  const auto t = render_targets<double>({{}, {}}, 8, 8, 4, 3);
  EXPECT_EQ(t.heatmap.shape(), (Shape{2, 3, 8, 8}));
  for (double v : t.heatmap.values()) EXPECT_EQ(v, 0.0);
  for (double v : t.mask.values()) EXPECT_EQ(v, 0.0);
  EXPECT_EQ(t.num_objects, 0u);
}

TEST(RenderTargets, CenterRoundTrip) {
  Rng rng(5);
  for (int trial = 0; trial < 200; ++trial) {
    Annotation a{0, rng.uniform(0, 60), rng.uniform(0, 60), rng.uniform(4, 60), rng.uniform(4, 60), 1};
    a.w = std::min(a.w, 127.0 - a.x);
    a.h = std::min(a.h, 127.0 - a.y);
    const auto t = render_targets<double>({{a}}, 32, 32, 4, 2);
    const std::size_t cx = static_cast<std::size_t>((a.x + a.w / 2) / 4), cy = static_cast<std::size_t>((a.y + a.h / 2) / 4);
    EXPECT_EQ(t.heatmap.at(0, 1, cy, cx), 1.0);
    EXPECT_EQ(t.mask.at(0, 0, cy, cx), 1.0);
    EXPECT_EQ(t.num_objects, 1u);
    EXPECT_NEAR((cx + t.offset.at(0, 0, cy, cx)) * 4, a.x + a.w / 2, 1e-12);
    EXPECT_NEAR((cy + t.offset.at(0, 1, cy, cx)) * 4, a.y + a.h / 2, 1e-12);
    EXPECT_NEAR(t.size.at(0, 0, cy, cx) * 4, a.w, 1e-12);
    EXPECT_NEAR(t.size.at(0, 1, cy, cx) * 4, a.h, 1e-12);
    for (double v : t.heatmap.values()) EXPECT_LE(v, 1.0);
  }
}

TEST(RenderTargets, MidpointOffset) {
  // center at (10, 6) in grid units plus half a cell
  const auto t = render_targets<double>({{{0, 34, 18, 8, 8, 0}}}, 16, 16, 4, 1);
  EXPECT_EQ(t.heatmap.at(0, 0, 5, 9), 1.0);
  EXPECT_EQ(t.offset.at(0, 0, 5, 9), 0.5);
  EXPECT_EQ(t.offset.at(0, 1, 5, 9), 0.5);
}

TEST(RenderTargets, OverlapsUseMaxNotSum) {
  const Annotation a{0, 20, 20, 40, 40, 0}, b{0, 28, 20, 40, 40, 0};
  const auto both = render_targets<double>({{a, b}}, 32, 32, 4, 1);
  const auto ta = render_targets<double>({{a}}, 32, 32, 4, 1);
  const auto tb = render_targets<double>({{b}}, 32, 32, 4, 1);
  bool overlapped = false;
  for (std::size_t i = 0; i < both.heatmap.size(); ++i) {
    EXPECT_EQ(both.heatmap[i], std::max(ta.heatmap[i], tb.heatmap[i]));
    overlapped |= ta.heatmap[i] > 0 && tb.heatmap[i] > 0;
  }
  EXPECT_TRUE(overlapped);
  EXPECT_EQ(both.num_objects, 2u);
}

TEST(RenderTargets, GaussianProfile) {
  const Annotation a{0, 32, 32, 48, 32, 0};
  const auto t = render_targets<double>({{a}}, 32, 32, 4, 1);
  const double sigma = gaussian_radius(8, 12) / 3.0;
  const std::size_t cx = 14, cy = 12;
  for (int dy = -2; dy <= 2; ++dy)
    for (int dx = -2; dx <= 2; ++dx) {
      const double expect = (dx == 0 && dy == 0) ? 1.0 : std::exp(-(dx * dx + dy * dy) / (2 * sigma * sigma));
      EXPECT_NEAR(t.heatmap.at(0, 0, cy + dy, cx + dx), std::abs(dx) <= std::ceil(3 * sigma) &&
                                                                std::abs(dy) <= std::ceil(3 * sigma)
                                                            ? expect
                                                            : 0.0,
                  1e-12);
    }
}

double logit(double p) { return std::log(p / (1 - p)); }

TEST(FocalLoss, HandValues) {
  const double expect = 0.25 * std::log(2.0);
  EXPECT_NEAR(focal_loss(VarD(TensorD({1, 1, 1, 1})), TensorD({1, 1, 1, 1}, 1.0), 1).value()[0], expect, 1e-12);
  EXPECT_NEAR(focal_loss(VarD(TensorD({1, 1, 1, 1})), TensorD({1, 1, 1, 1}, 0.0), 1).value()[0], expect, 1e-12);
  // N = 0 behaves like N = 1
  EXPECT_NEAR(focal_loss(VarD(TensorD({1, 1, 1, 1})), TensorD({1, 1, 1, 1}, 0.0), 0).value()[0], expect, 1e-12);
  // background weight (1 - t)^4
  EXPECT_NEAR(focal_loss(VarD(TensorD({1, 1, 1, 1})), TensorD({1, 1, 1, 1}, 0.5), 1).value()[0], expect / 16, 1e-12);
}

TEST(FocalLoss, PerfectPredictionIsNearZero) {
  const auto t = render_targets<double>({{{0, 10, 10, 20, 20, 0}, {0, 60, 50, 30, 20, 1}}}, 32, 32, 4, 2);
  TensorD logits(t.heatmap.shape());
  for (std::size_t i = 0; i < logits.size(); ++i) logits[i] = t.heatmap[i] == 1.0 ? logit(1 - 1e-4) : logit(1e-4);
  EXPECT_LE(focal_loss(VarD(logits), t.heatmap, t.num_objects).value()[0], 1e-3);
  // extreme logits are clamped, not infinite
  for (auto& v : logits.values()) v = -1e4;
  EXPECT_TRUE(std::isfinite(focal_loss(VarD(logits), t.heatmap, t.num_objects).value()[0]));
}

TEST(FocalLoss, Gradient) {
  Rng rng(6);
  const auto t = render_targets<double>({{{0, 10, 10, 20, 20, 0}}}, 8, 8, 4, 1);
  VarD x = VarD::parameter(random_tensor({1, 1, 8, 8}, rng, -3, 3));
  EXPECT_LE(gradient_check({x}, [&] { return focal_loss(x, t.heatmap, t.num_objects); }), 1e-6);
}

TEST(FocalLoss, ShapeMismatch) {
  EXPECT_SCN_ERROR(focal_loss(VarD(TensorD({1, 1, 2, 2})), TensorD({1, 1, 2, 3}), 1), ErrorKind::dimension);
}

TEST(L1Masked, Examples) {
  TensorD target({1, 2, 2, 2}), mask({1, 1, 2, 2});
  EXPECT_EQ(l1_masked(VarD(target), target, mask, 0).value()[0], 0.0);
  mask.at(0, 0, 1, 0) = 1.0;
  TensorD pred = target;
  pred.at(0, 0, 1, 0) = 0.3;
  pred.at(0, 1, 1, 0) = -0.2;
  pred.at(0, 0, 0, 0) = 5.0;  // unmasked
  EXPECT_NEAR(l1_masked(VarD(pred), target, mask, 1).value()[0], 0.5, 1e-15);
  EXPECT_EQ(l1_masked(VarD(target), target, mask, 1).value()[0], 0.0);
}

TEST(L1Masked, Gradient) {
  Rng rng(7);
  TensorD mask({2, 1, 4, 4});
  for (auto& v : mask.values()) v = rng.bernoulli(0.3) ? 1.0 : 0.0;
  const TensorD target = random_tensor({2, 2, 4, 4}, rng);
  VarD x = VarD::parameter(random_tensor({2, 2, 4, 4}, rng));
  EXPECT_LE(gradient_check({x}, [&] { return l1_masked(x, target, mask, 3); }), 1e-6);
}

TEST(KdLoss, Examples) {
  TensorD a({1, 1, 2, 2}), b({1, 1, 2, 2});
  EXPECT_EQ(kd_loss(VarD(a), a, 1).value()[0], 0.0);
  b[3] = 1.0;
  EXPECT_EQ(kd_loss(VarD(a), b, 1).value()[0], 1.0);
  // T = 2: squared errors 1 and 0 per step
  TensorD c({2, 1, 2, 2}), d({2, 1, 2, 2});
  d[1] = 1.0;
  EXPECT_EQ(kd_loss(VarD(c), d, 2).value()[0], 0.5);
  EXPECT_SCN_ERROR(kd_loss(VarD(a), c, 1), ErrorKind::dimension);
}

TEST(KdLoss, SymmetricAndZeroOnlyWhenEqual) {
  Rng rng(8);
  for (int i = 0; i < 50; ++i) {
    const TensorD a = random_tensor({4, 2, 3, 3}, rng), b = random_tensor({4, 2, 3, 3}, rng);
    EXPECT_DOUBLE_EQ(kd_loss(VarD(a), b, 2).value()[0], kd_loss(VarD(b), a, 2).value()[0]);
    EXPECT_GT(kd_loss(VarD(a), b, 2).value()[0], 0.0);
  }
}

TEST(KdLoss, Gradient) {
  Rng rng(9);
  const TensorD teacher = random_tensor({4, 2, 3, 3}, rng);
  VarD x = VarD::parameter(random_tensor({4, 2, 3, 3}, rng));
  EXPECT_LE(gradient_check({x}, [&] { return kd_loss(x, teacher, 2); }), 1e-6);
}

struct LossFixture : ::testing::Test {
  Rng rng{10};
  Targets<double> targets = render_targets<double>({{{0, 4, 6, 12, 10, 0}}, {{0, 14, 3, 9, 16, 1}}}, 8, 8, 4, 2);
  HeadOutputs<double> outputs() {
    return {VarD::parameter(random_tensor({4, 2, 8, 8}, rng, -4, 1)), VarD::parameter(random_tensor({4, 2, 8, 8}, rng, 0, 4)),
            VarD::parameter(random_tensor({4, 2, 8, 8}, rng)), 2};
  }
};

TEST_F(LossFixture, TotalLossComposition) {
  const auto out = outputs();
  const TensorD teacher = random_tensor({4, 2, 8, 8}, rng);
  LossConfig cfg;
  const auto plain = total_loss(out, targets, std::optional<TensorD>(), cfg);
  EXPECT_NEAR(plain.total.value()[0], plain.focal + 0.1 * plain.size + plain.offset, 1e-12);
  EXPECT_EQ(plain.kd, 0.0);
  const auto with = total_loss(out, targets, std::optional(teacher), cfg);
  EXPECT_NEAR(with.total.value()[0], plain.total.value()[0] + with.kd, 1e-12);
  cfg.alpha_kd = 0.0;
  EXPECT_EQ(total_loss(out, targets, std::optional(teacher), cfg).total.value()[0], plain.total.value()[0]);
  EXPECT_SCN_ERROR(total_loss(out, targets, std::optional(TensorD({2, 2, 8, 8})), cfg), ErrorKind::dimension);
}

TEST_F(LossFixture, DetectionTermsUseTemporalMean) {
  auto out = outputs();
  const auto a = total_loss(out, targets, std::optional<TensorD>(), LossConfig{});
  // swapping the two steps leaves the temporal mean unchanged
  HeadOutputs<double> swapped = out;
  for (VarD* v : {&swapped.heatmap, &swapped.size, &swapped.offset}) {
    TensorD t = v->value();
    const std::size_t half = t.size() / 2;
    std::swap_ranges(t.data(), t.data() + half, t.data() + half);
    *v = VarD(t);
  }
  EXPECT_NEAR(total_loss(swapped, targets, std::optional<TensorD>(), LossConfig{}).total.value()[0], a.total.value()[0], 1e-12);
}

TEST_F(LossFixture, AlphaScalesKd) {
  const auto out = outputs();
  const TensorD teacher = random_tensor({4, 2, 8, 8}, rng);
  LossConfig cfg;
  cfg.alpha_kd = 2.5;
  const auto l = total_loss(out, targets, std::optional(teacher), cfg);
  EXPECT_NEAR(l.total.value()[0], l.detection + 2.5 * l.kd, 1e-12);
  cfg.alpha_kd = -1;
  EXPECT_SCN_ERROR(total_loss(out, targets, std::optional<TensorD>(), cfg), ErrorKind::config);
}

TEST_F(LossFixture, GradientMatchesFiniteDifferences) {
  const auto out = outputs();
  const TensorD teacher = random_tensor({4, 2, 8, 8}, rng);
  const double err = gradient_check({out.heatmap, out.size, out.offset}, [&] {
    return total_loss(out, targets, std::optional(teacher), LossConfig{}).total;
  });
  EXPECT_LE(err, 1e-6);
}

TEST(TotalLoss, TeacherGetsNoGradient) {
  ModelConfig sc;
  sc.stem_channels = 4;
  sc.stage_channels = {4, 4, 8, 8};
  sc.blocks_per_stage = 1;
  sc.head_hidden = 4;
  sc.time_steps = 2;
  ModelConfig tc = sc;
  tc.spiking = false;
  tc.time_steps = 1;
  Model<double> student(sc), teacher(tc);
  init_params(student, 1, 5.0);
  init_params(teacher, 2);
  student.set_training(true);
  teacher.set_training(false);

  Rng rng(11);
  TensorD x({4, 4, 32, 32});
  for (auto& v : x.values()) v = rng.bernoulli(0.2) ? 1.0 : 0.0;
  const auto out = student.forward(VarD(x), 2);
  const auto t_out = teacher.forward(VarD(x), 1);
  const auto targets = render_targets<double>({{{0, 4, 6, 12, 10, 0}}, {}}, 8, 8, 4, 2);
  backward(total_loss(out, targets, std::optional(t_out.heatmap.value()), LossConfig{}).total);
  for (auto& p : teacher.parameters()) {
    if (!p.var.has_grad()) continue;
    for (double g : p.var.grad().values()) EXPECT_EQ(g, 0.0) << p.name;
  }
  double student_grad = 0.0;
  for (auto& p : student.parameters())
    if (p.var.has_grad())
      for (double g : p.var.grad().values()) student_grad += std::abs(g);
  EXPECT_GT(student_grad, 0.0);
}

}  // namespace
}  // namespace scn
