#pragma once

// Central finite differences against autograd for the full counterfactual
// objective on the toy pipeline, with respect to every transform parameter.

#include <torch/torch.h>

#include <algorithm>
#include <cmath>

#include "latentcf/objective.hpp"
#include "latentcf/transform.hpp"
#include "support/toy_models.hpp"

namespace latentcf::testing {

struct GradientCheck {
  double relativeError = 0.0;  // |analytic - numeric|_2 / max(|analytic|_2, |numeric|_2)
  double analyticNorm = 0.0;
  int64_t parameters = 0;
};

inline GradientCheck checkObjectiveGradient(uint64_t seed, int64_t batch = 3, int64_t steps = 1, double eps = 1e-6) {
  auto models = toyModelSet(seed);
  auto g = TransformNetwork::initialize(kToyDim, 8, seed * 2 + 1, Direction::Forward, false, torch::kFloat64);
  auto h = TransformNetwork::initialize(kToyDim, 8, seed * 2 + 2, Direction::Backward, false, torch::kFloat64);
  QueryBatch q;
  q.latents = seededNormal({batch, kToyDim}, seed + 1000);
  {
    torch::NoGradGuard guard;
    q.images = models.generator->generate(q.latents);
  }
  const LossWeights weights;
  const int64_t target = 1;

  std::vector<torch::Tensor> params = g.parameters();
  for (const auto& p : h.parameters()) params.push_back(p);
  for (auto& p : params) p.mutable_grad() = torch::Tensor();

  auto loss = counterfactualObjective(q, target, g, h, models, weights, steps).total;
  auto grads = torch::autograd::grad({loss}, params);

  std::vector<double> analytic, numeric;
  {
    torch::NoGradGuard guard;
    for (size_t i = 0; i < params.size(); ++i) {
      auto flat = params[i].view({-1});
      auto gflat = grads[i].reshape({-1});
      for (int64_t k = 0; k < flat.numel(); ++k) {
        const double orig = flat[k].item<double>();
        flat[k] = orig + eps;
        const double up = counterfactualObjective(q, target, g, h, models, weights, steps).total.item<double>();
        flat[k] = orig - eps;
        const double down = counterfactualObjective(q, target, g, h, models, weights, steps).total.item<double>();
        flat[k] = orig;
        numeric.push_back((up - down) / (2 * eps));
        analytic.push_back(gflat[k].item<double>());
      }
    }
  }
  double diff = 0.0, na = 0.0, nn = 0.0;
  for (size_t i = 0; i < analytic.size(); ++i) {
    diff += (analytic[i] - numeric[i]) * (analytic[i] - numeric[i]);
    na += analytic[i] * analytic[i];
    nn += numeric[i] * numeric[i];
  }
  GradientCheck r;
  r.analyticNorm = std::sqrt(na);
  r.relativeError = std::sqrt(diff) / std::max({std::sqrt(na), std::sqrt(nn), 1e-300});
  r.parameters = static_cast<int64_t>(analytic.size());
  return r;
}

}  // namespace latentcf::testing
