#pragma once

#include <torch/torch.h>

#include <optional>
#include <vector>

#include "latentcf/latent_sampling.hpp"
#include "latentcf/models.hpp"
#include "latentcf/transform.hpp"

namespace latentcf {

struct CFResult {
  torch::Tensor query;           // (B, C, H, W)
  torch::Tensor counterfactual;  // x' = G(g^n(z))
  torch::Tensor cycled;          // G(h^n(g^n(z))), undefined without h
  torch::Tensor queryLatent;     // (B, D)
  torch::Tensor cfLatent;
  torch::Tensor cycledLatent;
  torch::Tensor queryProbs;  // (B, K)
  torch::Tensor cfProbs;
  torch::Tensor cycledProbs;
  torch::Tensor mask;  // (B, H, W) in [0, 1]

  int64_t size() const { return query.size(0); }
  bool hasCycle() const { return cycled.defined(); }
};

struct Traversal {
  /// frames[k] = G(g^k(z)) for k = 0..n, each (B, C, H, W).
  std::vector<torch::Tensor> frames;
  std::vector<torch::Tensor> probs;
};

/// Channel-summed |x - x_cf| per spatial location, min-max normalized per
/// image. Images that are equal everywhere give an all-zero mask. (B, H, W).
torch::Tensor differenceMask(const torch::Tensor& x, const torch::Tensor& xcf);

/// How image queries are mapped to latents when there is no encoder.
struct InversionSettings {
  int64_t budget = 0;
  double stepSize = 0.05;
  uint64_t seed = 0;
  InversionOptions options;
};

/// Cycle reconstruction z_cyc = h^n(g^n(z)), x_cyc = G(z_cyc).
std::pair<torch::Tensor, torch::Tensor> cycleReconstruct(const torch::Tensor& latents, const TransformNetwork& forward,
                                                         const TransformNetwork& backward,
                                                         const GeneratorModel& generator, int64_t n);

/// Runs trained transforms over frozen models. All methods are const and run
/// without autograd, so one engine can serve concurrent callers.
class CounterfactualEngine {
 public:
  CounterfactualEngine(ModelSet models, TransformNetwork forward, std::optional<TransformNetwork> backward, int64_t n,
                       InversionSettings inversion = {});

  /// Query images through the encoder, or by inversion when there is none.
  /// Throws ConfigurationError with neither an encoder nor an inversion budget.
  torch::Tensor latentsFor(const torch::Tensor& images) const;

  /// The query image is G(z).
  CFResult fromLatents(const torch::Tensor& latents) const;
  /// The query image is the given image; latents come from latentsFor().
  CFResult fromImages(const torch::Tensor& images) const;

  /// steps >= 1 applications of g, keeping every intermediate frame.
  Traversal traverse(const torch::Tensor& latents, int64_t steps) const;

  const ModelSet& models() const { return models_; }
  const TransformNetwork& forward() const { return forward_; }
  const std::optional<TransformNetwork>& backward() const { return backward_; }
  int64_t steps() const { return n_; }

 private:
  CFResult complete(torch::Tensor query, torch::Tensor latents) const;

  ModelSet models_;
  TransformNetwork forward_;
  std::optional<TransformNetwork> backward_;
  int64_t n_;
  InversionSettings inversion_;
};

}  // namespace latentcf
