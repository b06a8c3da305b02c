#include <gtest/gtest.h>
#include <torch/torch.h>

#include "gradcheck.hpp"
#include "tbgdiff/encoders.hpp"
#include "tbgdiff/errors.hpp"

using namespace tbgdiff;
using namespace tbgdiff::encoders;

namespace {

EncoderOptions small_options() {
  EncoderOptions o;
  o.channels = {8, 8, 16, 16};
  o.guidance_channels = {8, 16};
  return o;
}

}  // namespace

TEST(FrameEncoder, StrideLadder) {
  torch::manual_seed(0);
  FrameEncoder enc;
  for (auto [h, w] : {std::pair<int64_t, int64_t>{64, 64}, {96, 128}, {32, 64}}) {
    auto p = enc(torch::rand({2, 3, h, w}));
    const std::array<int64_t, 4> channels = {32, 64, 96, 128};
    for (int i = 0; i < 4; ++i) {
      EXPECT_EQ(p.levels[i].sizes(), (std::vector<int64_t>{2, channels[i], h / FeaturePyramid::kStrides[i],
                                                           w / FeaturePyramid::kStrides[i]}));
    }
  }
  auto p = enc(torch::rand({1, 3, 64, 64}));
  EXPECT_EQ(p.top().size(2), 2);
  EXPECT_EQ(p.top().size(3), 2);
}

TEST(FrameEncoder, RejectsOffGridSizes) {
  FrameEncoder enc(small_options());
  EXPECT_THROW(enc(torch::rand({1, 3, 48, 64})), ConfigError);
}

TEST(FrameEncoder, FramesAreEncodedIndependently) {
  torch::manual_seed(1);
  FrameEncoder enc(small_options());
  torch::NoGradGuard ng;
  auto x = torch::rand({4, 3, 64, 64});
  x[2].copy_(x[0]);
  auto joint = enc(x);
  for (int i = 0; i < 4; ++i) EXPECT_TRUE(torch::equal(joint.levels[i][0], joint.levels[i][2]));

  // Shuffled clip gives the shuffled pyramid; a frame alone gives the same features.
  auto perm = torch::tensor({3, 1, 0, 2}, torch::kLong);
  auto shuffled = enc(x.index_select(0, perm));
  for (int i = 0; i < 4; ++i) {
    EXPECT_TRUE(torch::allclose(shuffled.levels[i], joint.levels[i].index_select(0, perm), 1e-5, 1e-6));
  }
  auto alone = enc(x.slice(0, 1, 2));
  EXPECT_TRUE(torch::allclose(alone.top(), joint.top().slice(0, 1, 2), 1e-5, 1e-6));
}

TEST(FrameEncoder, ParameterNamesFollowModulePaths) {
  FrameEncoder enc;
  auto params = enc->named_parameters();
  EXPECT_TRUE(params.contains("stage3.block1.conv1.weight"));
  EXPECT_TRUE(params.contains("stage4.attn.qkv.weight"));
  EXPECT_FALSE(params.contains("stage1.attn.qkv.weight"));
}

TEST(GuidanceEncoder, ShapeDeterminismAndMaskSensitivity) {
  torch::manual_seed(2);
  GuidanceEncoder ge;
  torch::NoGradGuard ng;
  auto frame = torch::rand({1, 3, 64, 64});
  auto mask = torch::zeros({1, 1, 64, 64});
  auto a = ge(frame, mask);
  EXPECT_EQ(a.sizes(), (std::vector<int64_t>{1, 128, 2, 2}));
  EXPECT_TRUE(torch::equal(a, ge(frame, mask)));
  auto flipped = mask.clone();
  flipped.slice(2, 0, 32).fill_(1);
  EXPECT_GT((ge(frame, flipped) - a).norm().item<double>(), 0);
  EXPECT_THROW(ge(frame, torch::zeros({1, 1, 32, 64})), std::invalid_argument);
}

TEST(AuxiliaryHead, FullResolutionOutputsAndZeroBias) {
  torch::manual_seed(3);
  FrameEncoder enc;
  AuxiliaryHead head;
  torch::NoGradGuard ng;
  auto p = enc(torch::rand({2, 3, 64, 64}));
  auto out = head(p.top(), p);
  EXPECT_EQ(out.pseudo_logits.sizes(), (std::vector<int64_t>{2, 1, 64, 64}));
  EXPECT_EQ(out.boundary_logits.sizes(), (std::vector<int64_t>{2, 1, 64, 64}));
  auto again = head(p.top(), p);
  EXPECT_TRUE(torch::equal(out.pseudo_logits, again.pseudo_logits));
  for (const auto& item : head->named_parameters()) {
    if (item.key().find("branch.bias") != std::string::npos) EXPECT_EQ(item.value().abs().sum().item<double>(), 0);
  }
}

TEST(AreaDownsample, AveragesBlocks) {
  auto x = torch::arange(16, torch::kFloat64).reshape({1, 1, 4, 4});
  auto y = area_downsample(x, 2, 2);
  auto expected = torch::tensor({2.5, 4.5, 10.5, 12.5}, torch::kFloat64).reshape({1, 1, 2, 2});
  EXPECT_TRUE(torch::allclose(y, expected));
}

TEST(GradCheck, EncoderAndAuxiliaryHead) {
  torch::manual_seed(4);
  FrameEncoder enc(small_options());
  AuxiliaryHead head(small_options());
  enc->to(torch::kFloat64);
  head->to(torch::kFloat64);
  auto x = torch::rand({2, 3, 32, 32}, torch::kFloat64);
  auto target = (torch::rand({2, 1, 32, 32}, torch::kFloat64) < 0.5).to(torch::kFloat64);
  auto loss = [&] {
    auto p = enc(x);
    auto out = head(p.top(), p);
    return (out.pseudo_logits * target).mean() + (out.boundary_logits.pow(2)).mean();
  };
  auto params = tbgdiff::testing::parameters_of(*enc);
  for (auto& p : tbgdiff::testing::parameters_of(*head)) params.push_back(p);
  auto r = tbgdiff::testing::gradient_check(loss, params, 3);
  EXPECT_LE(r.relative_error, 1e-3) << r.coordinates << " coordinates";
}
