#include <gtest/gtest.h>

#include "scn/energy.hpp"
#include "scn/trainer.hpp"
#include "test_util.hpp"

namespace scn {
namespace {

OpCounts totals(double acs, double macs) {
  OpCounts c;
  c.acs_total = acs;
  c.macs_total = macs;
  return c;
}

TEST(EnergyEstimate, PublishedRows) {
  // (ACs, MACs) per step against the published energy per step in mJ
  const struct {
    double acs, macs, mj;
  } rows[] = {{0.688e9, 0.0, 0.619}, {1.11e9, 0.0, 0.999}, {0.018e9, 6.13e9, 28.214}};
  for (const auto& r : rows) {
    const EnergyReport e = energy_estimate(totals(r.acs, r.macs), {}, 5);
    EXPECT_NEAR(e.energy_per_step_mj, r.mj, r.mj * 5e-3);
    EXPECT_DOUBLE_EQ(e.energy_total_mj, 5 * e.energy_per_step_mj);
  }
}

TEST(EnergyEstimate, Errors) {
  EXPECT_SCN_ERROR(energy_estimate(totals(-1, 0), {}, 1), ErrorKind::internal);
  EXPECT_SCN_ERROR(energy_estimate(totals(0, -1), {}, 1), ErrorKind::internal);
  EXPECT_SCN_ERROR(energy_estimate(totals(1, 1), {0.0, 4.6}, 1), ErrorKind::config);
}

TEST(FiringRate, Examples) {
  EXPECT_EQ(firing_rate(0, 10), 0.0);
  EXPECT_EQ(firing_rate(5, 10), 0.5);
  EXPECT_DOUBLE_EQ(firing_rate(3, 2 * 5), 0.3);
  EXPECT_EQ(firing_rate(0, 0), 0.0);
  EXPECT_SCN_ERROR(firing_rate(3, 2), ErrorKind::internal);
}

Unit<double> pointwise(std::size_t cin, std::size_t cout, bool binary) {
  Unit<double> u;
  u.name = "pw";
  u.conv.weight = VarD::parameter(TensorD({cout, cin, 1, 1}, 1.0));
  u.binary_input = binary;
  return u;
}

TEST(OpCounter, HandCount) {
  TensorD x({1, 2, 4, 4});
  for (std::size_t i = 0; i < x.size(); i += 4) x[i] = 1.0;  // density 0.25
  OpCounter<double> counter(true);
  counter.on_conv(pointwise(2, 3, true), x, {1, 3, 4, 4});
  const OpCounts c = counter.finish(1);
  ASSERT_EQ(c.layers.size(), 1u);
  EXPECT_EQ(c.layers[0].dense_ops, 96.0);
  EXPECT_EQ(c.layers[0].acs, 24.0);
  EXPECT_EQ(c.layers[0].macs, 0.0);
  EXPECT_EQ(c.layers[0].input_density, 0.25);
}

TEST(OpCounter, ZeroInputAndRealInput) {
  OpCounter<double> counter(true);
  counter.on_conv(pointwise(2, 3, true), TensorD({1, 2, 4, 4}), {1, 3, 4, 4});
  EXPECT_EQ(counter.finish(1).acs_total, 0.0);
  OpCounter<double> dense(false);
  dense.on_conv(pointwise(2, 3, false), TensorD({1, 2, 4, 4}, 0.3), {1, 3, 4, 4});
  EXPECT_EQ(dense.finish(1).macs_total, 96.0);
}

TEST(OpCounter, AcsScaleWithSpikes) {
  Rng rng(1);
  TensorD x({2, 4, 8, 8});
  std::vector<std::size_t> ones;
  for (std::size_t i = 0; i < x.size(); ++i)
    if (rng.bernoulli(0.5)) ones.push_back(i);
  const std::size_t half = ones.size() / 2;
  for (std::size_t k = 0; k < half; ++k) x[ones[k]] = 1.0;
  OpCounter<double> a(true);
  a.on_conv(pointwise(4, 5, true), x, {2, 5, 8, 8});
  for (std::size_t k = half; k < 2 * half; ++k) x[ones[k]] = 1.0;
  OpCounter<double> b(true);
  b.on_conv(pointwise(4, 5, true), x, {2, 5, 8, 8});
  EXPECT_DOUBLE_EQ(b.finish(2).acs_total, 2.0 * a.finish(2).acs_total);
}

TEST(OpCounter, NonBinaryInputMarkedBinaryIsInternalError) {
  OpCounter<double> counter(true);
  EXPECT_SCN_ERROR(counter.on_conv(pointwise(2, 3, true), TensorD({1, 2, 4, 4}, 0.5), {1, 3, 4, 4}),
                   ErrorKind::internal);
}

ModelConfig small(bool spiking) {
  ModelConfig c;
  c.stem_channels = 4;
  c.stage_channels = {4, 6, 8, 8};
  c.blocks_per_stage = 1;
  c.head_hidden = 4;
  c.time_steps = spiking ? 3 : 1;
  c.spiking = spiking;
  return c;
}

std::vector<TensorF> cubes(std::size_t images, std::size_t count, Rng& rng) {
  std::vector<TensorF> out;
  for (std::size_t i = 0; i < count; ++i) {
    TensorF t({images, 4, 32, 32});
    for (auto& v : t.values()) v = rng.bernoulli(0.1) ? 1.0f : 0.0f;
    out.push_back(std::move(t));
  }
  return out;
}

TEST(CountOps, SpikingModel) {
  Model<float> m(small(true));
  init_params(m, 2, 5.0);
  m.set_training(false);
  Model<float> fused = fuse_for_inference(m);
  Rng rng(2);
  const OpCounts c = count_ops(fused, cubes(6, 2, rng));
  EXPECT_EQ(c.macs_total, 0.0);
  EXPECT_GT(c.acs_total, 0.0);
  EXPECT_GE(c.firing_rate, 0.0);
  EXPECT_LE(c.firing_rate, 1.0);
  for (const auto& l : c.layers) {
    EXPECT_TRUE(l.binary_input) << l.name;
    EXPECT_LE(l.acs, l.dense_ops) << l.name;
  }
  for (const auto& [name, f] : c.layer_firing_rates) {
    EXPECT_GE(f, 0.0);
    EXPECT_LE(f, 1.0);
  }
}

TEST(CountOps, TeacherModelUsesMacsAfterTheStem) {
  Model<float> m(small(false));
  init_params(m, 3);
  m.set_training(false);
  Model<float> fused = fuse_for_inference(m);
  Rng rng(3);
  const OpCounts c = count_ops(fused, cubes(2, 1, rng));
  ASSERT_FALSE(c.layers.empty());
  EXPECT_TRUE(c.layers.front().binary_input);  // event cube
  EXPECT_GT(c.layers.front().acs, 0.0);
  EXPECT_GT(c.macs_total, 0.0);
  for (std::size_t i = 1; i < c.layers.size(); ++i) EXPECT_FALSE(c.layers[i].binary_input) << c.layers[i].name;
  EXPECT_EQ(c.firing_rate, 1.0);
}

TEST(CountOps, AveragesPerSampleAndStep) {
  Model<float> m(small(true));
  init_params(m, 4, 5.0);
  m.set_training(false);
  Model<float> fused = fuse_for_inference(m);
  Rng rng(4);
  const auto one = cubes(3, 1, rng);
  // the same cube twice averages to the same per-step counts
  const OpCounts a = count_ops(fused, one);
  const OpCounts b = count_ops(fused, {one[0], one[0]});
  EXPECT_NEAR(a.acs_total, b.acs_total, 1e-9 * a.acs_total);
  EXPECT_DOUBLE_EQ(a.dense_total, b.dense_total);
}

TEST(CountOps, UnfusedIsUsageError) {
  Model<float> m(small(true));
  m.set_training(false);
  Rng rng(5);
  EXPECT_SCN_ERROR(count_ops(m, cubes(3, 1, rng)), ErrorKind::usage);
  Model<float> half = fuse_conv_bn(m);
  EXPECT_SCN_ERROR(count_ops(half, cubes(3, 1, rng)), ErrorKind::usage);
}

}  // namespace
}  // namespace scn
