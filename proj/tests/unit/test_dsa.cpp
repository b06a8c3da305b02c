#include <algorithm>
#include <cmath>
#include <numeric>
#include <vector>

#include <gtest/gtest.h>
#include <torch/torch.h>

#include "gradcheck.hpp"
#include "tbgdiff/clip_data.hpp"
#include "tbgdiff/dsa.hpp"

using namespace tbgdiff;
using namespace tbgdiff::dsa;
namespace F = torch::nn::functional;

namespace {

// Column softmax of -||k - q||^2 with explicit loops, in double.
std::vector<std::vector<double>> affinity_oracle(const torch::Tensor& q, const torch::Tensor& k) {
  const int64_t c = q.size(0), nq = q.size(1), nm = k.size(1);
  auto qa = q.to(torch::kFloat64).contiguous();
  auto ka = k.to(torch::kFloat64).contiguous();
  std::vector<std::vector<double>> w(static_cast<size_t>(nm), std::vector<double>(static_cast<size_t>(nq)));
  for (int64_t j = 0; j < nq; ++j) {
    std::vector<double> s(static_cast<size_t>(nm));
    for (int64_t m = 0; m < nm; ++m) {
      std::vector<double> a(static_cast<size_t>(c)), b(static_cast<size_t>(c));
      for (int64_t i = 0; i < c; ++i) {
        a[static_cast<size_t>(i)] = ka[i][m].item<double>();
        b[static_cast<size_t>(i)] = qa[i][j].item<double>();
      }
      s[static_cast<size_t>(m)] = l2_similarity(a, b);
    }
    const double mx = *std::max_element(s.begin(), s.end());
    double z = 0;
    for (auto& v : s) z += std::exp(v - mx);
    for (int64_t m = 0; m < nm; ++m) w[static_cast<size_t>(m)][static_cast<size_t>(j)] = std::exp(s[static_cast<size_t>(m)] - mx) / z;
  }
  return w;
}

}  // namespace

TEST(L2Similarity, HandValues) {
  std::vector<double> a = {1, 0}, b = {0, 1};
  EXPECT_EQ(l2_similarity(a, a), 0.0);
  EXPECT_DOUBLE_EQ(l2_similarity(a, b), -2.0);
  std::vector<double> c = {1, 2, 3};
  EXPECT_THROW(l2_similarity(a, c), std::invalid_argument);
}

TEST(L2Similarity, SymmetricAndMatchesTensorForm) {
  torch::manual_seed(0);
  for (int i = 0; i < 20; ++i) {
    auto k = torch::randn({5, 6}, torch::kFloat64), q = torch::randn({5, 3}, torch::kFloat64);
    auto s = l2_similarity(k, q);
    for (int64_t m = 0; m < 6; ++m) {
      for (int64_t j = 0; j < 3; ++j) {
        std::vector<double> a(5), b(5);
        for (int64_t c = 0; c < 5; ++c) { a[c] = k[c][m].item<double>(); b[c] = q[c][j].item<double>(); }
        EXPECT_NEAR(s[m][j].item<double>(), l2_similarity(a, b), 1e-12);
        EXPECT_EQ(l2_similarity(a, b), l2_similarity(b, a));
      }
    }
  }
}

TEST(Affinity, HandExamples) {
  auto q = torch::randn({3, 4}, torch::kFloat64);
  auto one = compute_affinity(q, torch::randn({3, 1}, torch::kFloat64));
  EXPECT_TRUE(torch::allclose(one.weights, torch::ones({1, 4}, torch::kFloat64)));
  auto key = torch::randn({3, 1}, torch::kFloat64);
  auto twin = compute_affinity(q, torch::cat({key, key}, 1));
  EXPECT_TRUE(torch::allclose(twin.weights, torch::full({2, 4}, 0.5, torch::kFloat64)));

  auto w = compute_affinity(torch::zeros({1, 1}, torch::kFloat64), torch::tensor({{0.0, 1.0}}, torch::kFloat64));
  const double e = std::exp(-1.0);
  EXPECT_NEAR(w.weights[0][0].item<double>(), 1 / (1 + e), 1e-12);
  EXPECT_NEAR(w.weights[1][0].item<double>(), e / (1 + e), 1e-12);
  EXPECT_NEAR(w.weights[0][0].item<double>(), 0.7311, 1e-4);
  // Readout of values (1, 0) continues the same example.
  auto r = readout(torch::tensor({{1.0, 0.0}}, torch::kFloat64), w);
  EXPECT_NEAR(r.item<double>(), 0.7311, 1e-4);
}

TEST(Affinity, MatchesLoopOracle) {
  torch::manual_seed(1);
  for (int i = 0; i < 30; ++i) {
    auto q = torch::randn({4, 5}, torch::kFloat64) * 2, k = torch::randn({4, 7}, torch::kFloat64) * 2;
    auto w = compute_affinity(q, k).weights;
    auto o = affinity_oracle(q, k);
    for (int64_t m = 0; m < 7; ++m)
      for (int64_t j = 0; j < 5; ++j) EXPECT_NEAR(w[m][j].item<double>(), o[m][j], 1e-12);
  }
}

TEST(Affinity, FiniteForLargeMagnitudes) {
  auto q = torch::randn({4, 6}) * 1e3, k = torch::randn({4, 9}) * 1e3;
  auto w = compute_affinity(q, k).weights;
  EXPECT_TRUE(torch::isfinite(w).all().item<bool>());
  EXPECT_TRUE(torch::allclose(w.sum(0), torch::ones({6}), 1e-5, 1e-5));
}

TEST(Readout, ConvexCombinationOfEqualValues) {
  auto q = torch::randn({3, 4}, torch::kFloat64), k = torch::randn({3, 6}, torch::kFloat64);
  auto v = torch::tensor({1.5, -2.0}, torch::kFloat64).unsqueeze(1).expand({2, 6});
  auto out = readout(v, compute_affinity(q, k));
  EXPECT_TRUE(torch::allclose(out, torch::tensor({1.5, -2.0}, torch::kFloat64).unsqueeze(1).expand({2, 4})));
  AffinityMatrix zero{torch::zeros({6, 4}, torch::kFloat64), AffinityKind::kResidual, 2};
  EXPECT_EQ(readout(torch::randn({2, 6}, torch::kFloat64), zero).abs().sum().item<double>(), 0.0);
  EXPECT_THROW(readout(torch::randn({2, 5}), zero), std::invalid_argument);
}

TEST(SelfAffinity, BroadcastCases) {
  auto q = torch::randn({3, 4}, torch::kFloat64);
  auto plain = self_affinity_broadcast(q, 1);
  EXPECT_TRUE(torch::allclose(plain.weights, compute_affinity(q, q).weights, 0, 1e-15));
  for (int64_t n = 1; n <= 4; ++n) {
    auto w = self_affinity_broadcast(q, n).weights;
    EXPECT_EQ(w.size(0), n * 4);
    EXPECT_TRUE(torch::allclose(w.sum(0), torch::ones({4}, torch::kFloat64), 0, 1e-12));
    // Each tile is the plain self-affinity divided by N.
    for (int64_t t = 0; t < n; ++t) {
      EXPECT_TRUE(torch::allclose(w.slice(0, t * 4, t * 4 + 4), plain.weights / n, 0, 1e-12));
    }
  }
  auto single = self_affinity_broadcast(torch::randn({3, 1}, torch::kFloat64), 3).weights;
  EXPECT_TRUE(torch::allclose(single, torch::full({3, 1}, 1.0 / 3, torch::kFloat64)));
}

TEST(ResidualAffinity, StaticClipIsExactlyZero) {
  for (int64_t n = 1; n <= 4; ++n) {
    auto q = torch::randn({5, 6});
    auto w = residual_affinity(q, q.repeat({1, n}), n).weights;
    EXPECT_EQ(w.abs().max().item<double>(), 0.0);
  }
  auto one = residual_affinity(torch::randn({2, 1}), torch::randn({2, 1}), 1).weights;
  EXPECT_EQ(one.item<double>(), 0.0);
}

TEST(ResidualAffinity, NonNegativeAndShapeChecked) {
  auto q = torch::randn({4, 3});
  auto w = residual_affinity(q, torch::randn({4, 6}), 2).weights;
  EXPECT_GE(w.min().item<double>(), 0.0);
  EXPECT_THROW(residual_affinity(q, torch::randn({4, 5}), 2), std::invalid_argument);
}

TEST(Readout, LongTermMemoryOrderDoesNotMatter) {
  torch::manual_seed(2);
  const int64_t c = 4, hw = 3, n = 3;
  auto q = torch::randn({c, hw}, torch::kFloat64);
  auto k = torch::randn({c, n, hw}, torch::kFloat64), v = torch::randn({2, n, hw}, torch::kFloat64);
  auto perm = torch::tensor({2, 0, 1}, torch::kLong);
  auto a = readout(v.reshape({2, n * hw}), residual_affinity(q, k.reshape({c, n * hw}), n));
  auto b = readout(v.index_select(1, perm).reshape({2, n * hw}),
                   residual_affinity(q, k.index_select(1, perm).reshape({c, n * hw}), n));
  EXPECT_LE((a - b).abs().max().item<double>(), 1e-10);
}

TEST(DualScale, OutputShapeAndStaticClip) {
  torch::manual_seed(3);
  DualScaleAggregation dsa(DsaOptions{16});
  torch::NoGradGuard ng;
  auto frame = torch::randn({1, 1, 16, 2, 2});
  auto top = frame.expand({2, 5, 16, 2, 2}).contiguous();
  DsaTrace trace;
  auto out = dsa(top, data::partition_timeline(5, 2), &trace);
  EXPECT_EQ(out.sizes(), (std::vector<int64_t>{2, 16, 2, 2}));
  EXPECT_EQ(trace.long_readout.abs().max().item<double>(), 0.0);
  EXPECT_EQ(trace.long_affinity.abs().max().item<double>(), 0.0);

  // Identical memory frames split every key's weight evenly, so the short-term readout
  // equals a readout against a single copy of the frame.
  auto params = dsa->named_parameters();
  auto conv = [&](const char* name) {
    return F::conv2d(frame.select(1, 0), params[std::string(name) + ".weight"],
                     F::Conv2dFuncOptions().bias(params[std::string(name) + ".bias"]))
        .reshape({1, 16, 4});
  };
  auto single = readout(conv("value"), compute_affinity(conv("query"), conv("key")));
  EXPECT_TRUE(torch::allclose(trace.short_readout.select(1, 0)[0].reshape({1, 16, 4}), single, 1e-5, 1e-6));
}

TEST(DualScale, CentersAreIndependentOfEvaluationOrder) {
  torch::manual_seed(4);
  DualScaleAggregation dsa(DsaOptions{16});
  torch::NoGradGuard ng;
  auto top = torch::randn({1, 5, 16, 2, 2});
  auto all = dsa->aggregate_clip(top);
  for (int64_t t = 4; t >= 0; --t) {
    auto one = dsa(top, data::partition_timeline(5, t));
    EXPECT_TRUE(torch::allclose(one, all.select(1, t), 1e-5, 1e-6)) << "center " << t;
  }
}

TEST(GradCheck, DualScaleAggregation) {
  torch::manual_seed(5);
  DualScaleAggregation dsa(DsaOptions{4});
  dsa->to(torch::kFloat64);
  auto top = torch::randn({1, 5, 4, 2, 2}, torch::kFloat64).requires_grad_(true);
  auto weight = torch::randn({1, 4, 2, 2}, torch::kFloat64);
  auto loss = [&] { return (dsa(top, data::partition_timeline(5, 2)) * weight).sum(); };
  auto params = tbgdiff::testing::parameters_of(*dsa);
  params.push_back(top);
  auto r = tbgdiff::testing::gradient_check(loss, params, 8);
  EXPECT_LE(r.relative_error, 1e-3);
}
