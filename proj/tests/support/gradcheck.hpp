#pragma once

#include <cmath>
#include <cstdint>
#include <functional>
#include <vector>

#include <torch/torch.h>

namespace tbgdiff::testing {

struct GradCheckResult {
  double relative_error = 0;  // ||analytic - numeric|| / max(||analytic||, ||numeric||)
  int64_t coordinates = 0;
};

// Compares autograd against central differences on up to `per_tensor` evenly spread
// coordinates of every tensor in `wrt`. The loss must be a float64 scalar.
inline GradCheckResult gradient_check(const std::function<torch::Tensor()>& loss, std::vector<torch::Tensor> wrt,
                                      int64_t per_tensor = 6, double step = 1e-5) {
  for (auto& t : wrt) {
    if (t.grad().defined()) t.mutable_grad().zero_();
  }
  loss().backward();
  std::vector<double> analytic, numeric;
  torch::NoGradGuard no_grad;
  for (auto& t : wrt) {
    const auto grad = t.grad().defined() ? t.grad().reshape(-1) : torch::zeros({t.numel()}, t.options());
    auto flat = t.view(-1);
    const int64_t n = flat.numel();
    const int64_t count = std::min(n, per_tensor);
    for (int64_t i = 0; i < count; ++i) {
      const int64_t idx = count == 1 ? 0 : i * (n - 1) / (count - 1);
      const double orig = flat[idx].item<double>();
      flat[idx].fill_(orig + step);
      const double up = loss().item<double>();
      flat[idx].fill_(orig - step);
      const double down = loss().item<double>();
      flat[idx].fill_(orig);
      numeric.push_back((up - down) / (2 * step));
      analytic.push_back(grad[idx].item<double>());
    }
  }
  double diff = 0, na = 0, nn = 0;
  for (size_t i = 0; i < analytic.size(); ++i) {
    diff += (analytic[i] - numeric[i]) * (analytic[i] - numeric[i]);
    na += analytic[i] * analytic[i];
    nn += numeric[i] * numeric[i];
  }
  const double denom = std::max({std::sqrt(na), std::sqrt(nn), 1e-12});
  return {std::sqrt(diff) / denom, static_cast<int64_t>(analytic.size())};
}

// Parameters of a module as a list (all of them require grad).
inline std::vector<torch::Tensor> parameters_of(torch::nn::Module& module) {
  std::vector<torch::Tensor> out;
  for (auto& p : module.parameters()) out.push_back(p);
  return out;
}

}  // namespace tbgdiff::testing
