#include <cmath>
#include <numbers>

#include <gtest/gtest.h>
#include <torch/torch.h>

#include "gradcheck.hpp"
#include "tbgdiff/diffusion.hpp"
#include "tbgdiff/errors.hpp"

using namespace tbgdiff;
using namespace tbgdiff::diffusion;

namespace {

encoders::EncoderOptions small_options() {
  encoders::EncoderOptions o;
  o.channels = {8, 8, 16, 16};
  o.guidance_channels = {8, 16};
  return o;
}

NoiseSchedule custom_schedule(std::vector<double> alphabar) {
  NoiseSchedule s;
  s.t_train = static_cast<int64_t>(alphabar.size()) - 1;
  s.alphabar = std::move(alphabar);
  return s;
}

std::vector<std::optional<torch::Tensor>> all_masks(const torch::Tensor& m) {
  std::vector<std::optional<torch::Tensor>> out;
  for (int64_t i = 0; i < m.size(1); ++i) out.emplace_back(m.select(1, i));
  return out;
}

}  // namespace

TEST(Schedule, CosineEndpointsAndMidpoint) {
  auto s = build_schedule(ScheduleKind::kCosine, 1000);
  EXPECT_NEAR(s.at(0), 1.0, 1e-12);
  EXPECT_LT(s.at(1000), 1e-3);
  EXPECT_NEAR(s.at(500), 0.494, 1e-3);
  // Closed form evaluated independently.
  auto f = [](double r) { return std::pow(std::cos((r + 0.008) / 1.008 * std::numbers::pi / 2), 2); };
  EXPECT_NEAR(s.at(500), f(0.5) / f(0.0), 1e-12);
  EXPECT_NEAR(s.at(250), f(0.25) / f(0.0), 1e-12);
}

TEST(Schedule, LinearAtDefaultHorizonUsesStatedBetaRange) {
  auto s = build_schedule(ScheduleKind::kLinear, 1000);
  double prod = 1;
  for (int t = 1; t <= 1000; ++t) {
    const double beta = 1e-4 + (0.02 - 1e-4) * (t - 1) / 999.0;
    prod *= 1 - beta;
    ASSERT_NEAR(s.at(t), prod, 1e-12) << t;
  }
}

TEST(Schedule, MonotoneWithEndpointsForAllHorizons) {
  for (auto kind : {ScheduleKind::kCosine, ScheduleKind::kLinear}) {
    for (int64_t t_train : {10, 37, 100, 1000, 4000}) {
      auto s = build_schedule(kind, t_train);
      EXPECT_NEAR(s.at(0), 1.0, 1e-12);
      EXPECT_LT(s.at(t_train), 1e-3) << to_string(kind) << " T=" << t_train;
      for (int64_t t = 1; t <= t_train; ++t) ASSERT_LE(s.at(t), s.at(t - 1));
    }
  }
  EXPECT_THROW(parse_schedule("sigmoid"), ConfigError);
  EXPECT_THROW(build_schedule(ScheduleKind::kCosine, 0), ConfigError);
  EXPECT_THROW(build_schedule(ScheduleKind::kCosine, 10).at(11), std::invalid_argument);
}

TEST(AnalogBits, EncodeExamples) {
  auto v = bit_encode(torch::tensor({1.0, 0.0, 0.5}, torch::kFloat64), 0.01).values;
  EXPECT_EQ(v[0].item<double>(), 0.01);
  EXPECT_EQ(v[1].item<double>(), -0.01);
  EXPECT_EQ(v[2].item<double>(), 0.0);
  EXPECT_EQ(bit_encode(torch::tensor({0.5}), 3.0).values.item<double>(), 0.0);
  EXPECT_THROW(bit_encode(torch::ones({2}), 0.0), ConfigError);
  EXPECT_THROW(bit_encode(torch::ones({2}), -1.0), ConfigError);
}

TEST(AnalogBits, DecodeRules) {
  EXPECT_EQ(bit_decode(torch::zeros({3, 3})).sum().item<int64_t>(), 0);
  EXPECT_EQ(bit_decode(torch::tensor({0.003})).item<int64_t>(), 1);
  torch::manual_seed(0);
  for (double scale : {1.0, 0.1, 0.01, 0.001}) {
    auto m = (torch::rand({16, 16}) < 0.5).to(torch::kUInt8);
    EXPECT_TRUE(torch::equal(bit_decode(bit_encode(m, scale)), m));
  }
}

TEST(ForwardDiffuse, Endpoints) {
  auto sched = custom_schedule({1.0, 0.25, 0.0});
  auto y0 = bit_encode(torch::tensor({1.0, 0.0}, torch::kFloat64), 0.01);
  auto eps = torch::tensor({0.3, -1.2}, torch::kFloat64);
  EXPECT_TRUE(torch::equal(forward_diffuse(y0, 0, eps, sched).values, y0.values));
  EXPECT_TRUE(torch::equal(forward_diffuse(y0, 2, eps, sched).values, eps));
  auto hand = forward_diffuse(y0, 1, torch::ones({2}, torch::kFloat64), sched).values;
  EXPECT_NEAR(hand[0].item<double>(), 0.5 * 0.01 + std::sqrt(0.75), 1e-15);
  EXPECT_NEAR(hand[0].item<double>(), 0.8710, 1e-4);
  EXPECT_THROW(forward_diffuse(y0, 3, eps, sched), std::invalid_argument);
}

TEST(ForwardDiffuse, PerSampleTimestepsMatchScalarForm) {
  auto sched = build_schedule(ScheduleKind::kCosine, 1000);
  auto y0 = bit_encode((torch::rand({4, 1, 8, 8}) < 0.5).to(torch::kFloat64), 0.01).values;
  auto eps = torch::randn({4, 1, 8, 8}, torch::kFloat64);
  auto t = torch::tensor({0, 10, 500, 1000}, torch::kLong);
  auto batched = forward_diffuse(y0, t, eps, sched);
  for (int64_t i = 0; i < 4; ++i) {
    auto one = forward_diffuse(AnalogMask{y0[i], 0.01}, t[i].item<int64_t>(), eps[i], sched).values;
    EXPECT_TRUE(torch::allclose(batched[i], one, 0, 1e-15));
  }
}

TEST(ForwardDiffuse, NoiseStatistics) {
  auto sched = custom_schedule({1.0, 0.36});
  auto gen = at::make_generator<at::CPUGeneratorImpl>(17);
  auto eps = torch::randn({10000}, gen, torch::kFloat64);
  auto y = forward_diffuse(AnalogMask{torch::full({10000}, 0.5, torch::kFloat64), 0.5}, 1, eps, sched).values;
  EXPECT_NEAR(y.mean().item<double>(), 0.6 * 0.5, 0.02);
  EXPECT_NEAR(y.var().item<double>(), 0.64, 0.05);
}

TEST(Ddim, TerminalStepReturnsEstimate) {
  auto sched = build_schedule(ScheduleKind::kCosine, 1000);
  auto logits = torch::randn({1, 1, 4, 4}, torch::kFloat64);
  DenoiserState s{{torch::randn({1, 1, 4, 4}, torch::kFloat64), 0.01}, 50, 0};
  auto next = ddim_step(s, logits, 0, sched);
  EXPECT_TRUE(torch::equal(next.y.values, estimate_clean(logits, 0.01)));
  EXPECT_EQ(next.t, 0);
  EXPECT_THROW(ddim_step(s, logits, 50, sched), std::invalid_argument);
  EXPECT_THROW(ddim_step(s, logits, 60, sched), std::invalid_argument);
}

TEST(Ddim, NoiseRecoveryIdentity) {
  auto sched = build_schedule(ScheduleKind::kCosine, 1000);
  torch::manual_seed(1);
  for (int i = 0; i < 50; ++i) {
    const int64_t t = 1 + i * 19;
    auto y0 = bit_encode((torch::rand({8, 8}, torch::kFloat64) < 0.5).to(torch::kFloat64), 0.01).values;
    auto eps = torch::randn({8, 8}, torch::kFloat64);
    auto y_t = forward_diffuse(AnalogMask{y0, 0.01}, t, eps, sched).values;
    EXPECT_LE((estimate_noise(y_t, y0, t, sched) - eps).abs().max().item<double>(), 1e-10);
  }
}

TEST(Ddim, EqualAlphabarKeepsState) {
  auto sched = custom_schedule({1.0, 0.5, 0.5});
  auto y0 = torch::randn({3}, torch::kFloat64) * 0.01;
  DenoiserState s{{torch::randn({3}, torch::kFloat64), 0.01}, 2, 0};
  auto next = ddim_step_from_estimate(s, y0, 1, sched);
  EXPECT_TRUE(torch::allclose(next.y.values, s.y.values, 0, 1e-15));
}

TEST(Sampler, LadderAndCallCount) {
  auto ladder = timestep_ladder(1000, 20);
  ASSERT_EQ(ladder.size(), 20u);
  EXPECT_EQ(ladder.front(), 1000);
  EXPECT_EQ(ladder.back(), 50);
  EXPECT_EQ(timestep_ladder(1000, 1), (std::vector<int64_t>{1000}));
  EXPECT_THROW(timestep_ladder(10, 11), ConfigError);
  EXPECT_THROW(timestep_ladder(10, 0), ConfigError);

  auto sched = build_schedule(ScheduleKind::kCosine, 1000);
  std::vector<int64_t> seen;
  Denoiser d = [&](const torch::Tensor& y, int64_t t) {
    seen.push_back(t);
    return torch::full_like(y, 2.0);
  };
  auto r = sample(d, {1, 1, 4, 4}, 1, 3, 0.01, sched);
  EXPECT_EQ(seen, (std::vector<int64_t>{1000}));
  EXPECT_TRUE(torch::equal(r.mask, torch::ones({1, 1, 4, 4}, torch::kUInt8)));
}

TEST(Sampler, SeededRunsAreBitIdentical) {
  torch::manual_seed(2);
  auto w = torch::randn({1, 1, 8, 8});
  Denoiser d = [&](const torch::Tensor& y, int64_t t) { return (y * 50 + w) * (1 + 0.001 * t); };
  auto sched = build_schedule(ScheduleKind::kCosine, 1000);
  auto a = sample(d, {1, 1, 8, 8}, 20, 42, 0.01, sched);
  auto b = sample(d, {1, 1, 8, 8}, 20, 42, 0.01, sched);
  EXPECT_TRUE(torch::equal(a.final_state.values, b.final_state.values));
  EXPECT_TRUE(torch::equal(a.mask, b.mask));
  auto c = sample(d, {1, 1, 8, 8}, 20, 43, 0.01, sched);
  EXPECT_FALSE(torch::equal(a.final_state.values, c.final_state.values));
}

TEST(Guidance, BundleStructure) {
  torch::manual_seed(3);
  encoders::GuidanceEncoder ge(small_options());
  torch::NoGradGuard ng;
  auto frames = torch::rand({1, 5, 3, 64, 64});
  auto masks = torch::rand({1, 5, 1, 64, 64});
  auto list = all_masks(masks);

  auto stee = build_guidance(GuidanceMode::kStee, frames, list, 2, &ge);
  ASSERT_EQ(stee.items.size(), 4u);
  std::vector<Direction> dirs;
  for (auto& it : stee.items) dirs.push_back(it.direction);
  EXPECT_EQ(dirs, (std::vector<Direction>{Direction::kPast, Direction::kPast, Direction::kFuture, Direction::kFuture}));

  EXPECT_TRUE(build_guidance(GuidanceMode::kPce, frames, list, 0, nullptr).items.empty());
  auto pce = build_guidance(GuidanceMode::kPce, frames, list, 3, nullptr);
  ASSERT_EQ(pce.items.size(), 3u);
  for (auto& it : pce.items) {
    EXPECT_EQ(it.direction, Direction::kPast);
    EXPECT_EQ(it.payload.size(1), 1);  // raw downsampled masks, no encoder features
  }

  auto pee = build_guidance(GuidanceMode::kPee, frames, list, 2, &ge);
  ASSERT_EQ(pee.items.size(), 2u);
  for (int k = 0; k < 2; ++k) EXPECT_TRUE(torch::allclose(pee.items[k].payload, stee.items[k].payload, 1e-6, 1e-7));
}

TEST(Guidance, SequentialModesNeedEarlierMasks) {
  encoders::GuidanceEncoder ge(small_options());
  torch::NoGradGuard ng;
  auto frames = torch::rand({1, 5, 3, 64, 64});
  std::vector<std::optional<torch::Tensor>> masks(5);
  masks[0] = torch::rand({1, 1, 64, 64});
  EXPECT_NO_THROW(build_guidance(GuidanceMode::kPee, frames, masks, 1, &ge));
  EXPECT_THROW(build_guidance(GuidanceMode::kPee, frames, masks, 2, &ge), SequencingError);
  EXPECT_THROW(build_guidance(GuidanceMode::kPce, frames, masks, 3, nullptr), SequencingError);
}

TEST(Guidance, ClipBundlesMatchPerCenterBundles) {
  torch::manual_seed(4);
  encoders::GuidanceEncoder ge(small_options());
  torch::NoGradGuard ng;
  auto frames = torch::rand({2, 5, 3, 64, 64});
  auto masks = torch::rand({2, 5, 1, 64, 64});
  auto list = all_masks(masks);
  for (auto mode : {GuidanceMode::kPce, GuidanceMode::kPee, GuidanceMode::kStee}) {
    auto bundles = build_clip_guidance(mode, frames, masks, &ge);
    for (int64_t c = 0; c < 5; ++c) {
      auto one = build_guidance(mode, frames, list, c, &ge);
      ASSERT_EQ(one.items.size(), bundles[c].items.size());
      for (size_t k = 0; k < one.items.size(); ++k) {
        EXPECT_EQ(one.items[k].source_index, bundles[c].items[k].source_index);
        EXPECT_TRUE(torch::allclose(one.items[k].payload, bundles[c].items[k].payload, 1e-5, 1e-6));
      }
    }
  }
}

TEST(Injection, EmptyBundleAndOrderInvariance) {
  torch::manual_seed(5);
  GuidanceInjection inj(16, GuidanceMode::kStee);
  torch::NoGradGuard ng;
  auto feature = torch::randn({1, 16, 2, 2});
  auto empty = inj(feature, GuidanceBundle{GuidanceMode::kStee, {}});
  EXPECT_EQ(empty.sizes(), feature.sizes());
  EXPECT_TRUE(torch::equal(empty, inj->fuse(feature, {torch::zeros_like(feature), torch::zeros_like(feature)})));

  GuidanceBundle a{GuidanceMode::kStee, {}};
  std::vector<torch::Tensor> past = {torch::randn({1, 16, 2, 2}), torch::randn({1, 16, 2, 2}), torch::randn({1, 16, 2, 2})};
  for (int64_t i = 0; i < 3; ++i) a.items.push_back({Direction::kPast, i, past[i]});
  a.items.push_back({Direction::kFuture, 4, torch::randn({1, 16, 2, 2})});
  GuidanceBundle b = a;
  std::swap(b.items[0], b.items[2]);
  EXPECT_TRUE(torch::allclose(inj(feature, a), inj(feature, b), 1e-6, 1e-6));
  EXPECT_EQ(inj(feature, a).sizes(), feature.sizes());

  GuidanceBundle bad{GuidanceMode::kStee, {{Direction::kPast, 0, torch::randn({1, 16, 3, 3})}}};
  EXPECT_THROW(inj(feature, bad), std::invalid_argument);
}

TEST(Injection, OnlyConcatModeProjectsMasks) {
  GuidanceInjection pce(16, GuidanceMode::kPce), stee(16, GuidanceMode::kStee);
  EXPECT_TRUE(pce->named_parameters().contains("mask_proj.weight"));
  EXPECT_FALSE(stee->named_parameters().contains("mask_proj.weight"));
}

TEST(Denoiser, ShapeDeterminismAndTimestepSensitivity) {
  torch::manual_seed(6);
  encoders::FrameEncoder enc(small_options());
  MaskDenoiser den(DenoiserOptions{small_options(), GuidanceMode::kStee});
  torch::NoGradGuard ng;
  auto pyr = enc(torch::rand({1, 3, 64, 64}));
  auto feat = pyr.top();
  PooledGuidance g{torch::zeros_like(feat), torch::zeros_like(feat)};
  auto y = torch::randn({1, 1, 64, 64});
  auto a = den(y, torch::tensor({0}, torch::kLong), feat, g, pyr);
  EXPECT_EQ(a.sizes(), (std::vector<int64_t>{1, 1, 64, 64}));
  EXPECT_TRUE(torch::equal(a, den(y, torch::tensor({0}, torch::kLong), feat, g, pyr)));
  auto b = den(y, torch::tensor({1000}, torch::kLong), feat, g, pyr);
  EXPECT_GT((a - b).norm().item<double>(), 0);
}

TEST(TimestepEmbedding, ShapeAndDistinctness) {
  auto e = timestep_embedding(torch::tensor({0, 1, 999}, torch::kLong));
  EXPECT_EQ(e.sizes(), (std::vector<int64_t>{3, 128}));
  EXPECT_GT((e[0] - e[1]).norm().item<double>(), 0);
  EXPECT_EQ(e[0].slice(0, 0, 64).abs().sum().item<double>(), 0.0);  // sin(0)
}

TEST(GradCheck, PredictMask) {
  torch::manual_seed(7);
  encoders::FrameEncoder enc(small_options());
  MaskDenoiser den(DenoiserOptions{small_options(), GuidanceMode::kStee});
  enc->to(torch::kFloat64);
  den->to(torch::kFloat64);
  auto pyr = [&] {
    torch::NoGradGuard ng;
    return enc(torch::rand({1, 3, 32, 32}, torch::kFloat64));
  }();
  auto feat = torch::randn({1, 16, 1, 1}, torch::kFloat64).requires_grad_(true);
  auto past = torch::randn({1, 16, 1, 1}, torch::kFloat64), future = torch::randn({1, 16, 1, 1}, torch::kFloat64);
  auto y = torch::randn({1, 1, 32, 32}, torch::kFloat64);
  auto target = (torch::rand({1, 1, 32, 32}, torch::kFloat64) < 0.5).to(torch::kFloat64);
  auto loss = [&] {
    auto z = den(y, torch::tensor({300}, torch::kLong), feat, PooledGuidance{past, future}, pyr);
    return (z * target).mean() + z.pow(2).mean();
  };
  auto params = tbgdiff::testing::parameters_of(*den);
  params.push_back(feat);
  auto r = tbgdiff::testing::gradient_check(loss, params, 4);
  EXPECT_LE(r.relative_error, 1e-3);
}
