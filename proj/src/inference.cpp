#include "latentcf/inference.hpp"

#include "latentcf/errors.hpp"

namespace latentcf {

torch::Tensor differenceMask(const torch::Tensor& x, const torch::Tensor& xcf) {
  if (x.sizes() != xcf.sizes() || x.dim() != 4) throw ArgumentError("difference mask needs equal (B, C, H, W) shapes");
  auto diff = (x - xcf).abs().sum(1);
  const auto batch = diff.size(0);
  auto flat = diff.flatten(1);
  auto lo = std::get<0>(flat.min(1)).view({batch, 1, 1});
  auto hi = std::get<0>(flat.max(1)).view({batch, 1, 1});
  auto range = hi - lo;
  auto scaled = (diff - lo) / range.clamp_min(1e-30);
  return torch::where(range.gt(0.0), scaled, torch::zeros_like(diff));
}

std::pair<torch::Tensor, torch::Tensor> cycleReconstruct(const torch::Tensor& latents, const TransformNetwork& forward,
                                                         const TransformNetwork& backward,
                                                         const GeneratorModel& generator, int64_t n) {
  if (forward.dim() != backward.dim()) throw ArgumentError("forward and backward transforms differ in dim");
  auto zcyc = backward.applyN(forward.applyN(latents, n), n);
  return {generator.generate(zcyc), zcyc};
}

CounterfactualEngine::CounterfactualEngine(ModelSet models, TransformNetwork forward,
                                           std::optional<TransformNetwork> backward, int64_t n,
                                           InversionSettings inversion)
    : models_(std::move(models)), forward_(std::move(forward)), backward_(std::move(backward)), n_(n),
      inversion_(inversion) {
  if (!models_.generator) throw ConfigurationError("inference needs a generator");
  if (!models_.classifier) throw ConfigurationError("inference needs a classifier");
  if (n_ < 0) throw ArgumentError("step count must be non-negative");
  if (forward_.dim() != models_.generator->latentDim()) {
    throw ArgumentError("transform dim does not match generator latent dim");
  }
  if (backward_ && backward_->dim() != forward_.dim()) throw ArgumentError("backward transform dim mismatch");
  forward_.setRequiresGrad(false);
  if (backward_) backward_->setRequiresGrad(false);
}

torch::Tensor CounterfactualEngine::latentsFor(const torch::Tensor& images) const {
  if (models_.encoder) {
    torch::NoGradGuard noGrad;
    return models_.encoder->encode(images);
  }
  if (inversion_.budget <= 0) {
    throw ConfigurationError("image queries need an encoder or a positive inversion budget");
  }
  auto result = invertImages(*models_.generator, ImageBatch(images), inversion_.budget, inversion_.stepSize,
                             inversion_.seed, inversion_.options);
  return result.latents.values();
}

CFResult CounterfactualEngine::complete(torch::Tensor query, torch::Tensor latents) const {
  torch::NoGradGuard noGrad;
  const auto& generator = *models_.generator;
  const auto& classifier = *models_.classifier;
  CFResult r;
  r.query = std::move(query);
  r.queryLatent = std::move(latents);
  r.cfLatent = forward_.applyN(r.queryLatent, n_);
  r.counterfactual = generator.generate(r.cfLatent);
  if (backward_) {
    r.cycledLatent = backward_->applyN(r.cfLatent, n_);
    r.cycled = generator.generate(r.cycledLatent);
    r.cycledProbs = classifier.probabilities(r.cycled);
  }
  r.queryProbs = classifier.probabilities(r.query);
  r.cfProbs = classifier.probabilities(r.counterfactual);
  r.mask = differenceMask(r.query, r.counterfactual);
  return r;
}

CFResult CounterfactualEngine::fromLatents(const torch::Tensor& latents) const {
  if (latents.dim() != 2 || latents.size(1) != forward_.dim()) {
    throw ArgumentError("latents must have shape (B, " + std::to_string(forward_.dim()) + ")");
  }
  torch::NoGradGuard noGrad;
  return complete(models_.generator->generate(latents), latents);
}

CFResult CounterfactualEngine::fromImages(const torch::Tensor& images) const {
  const auto shape = models_.generator->imageShape();
  if (images.dim() != 4 || images.size(1) != shape.channels || images.size(2) != shape.height ||
      images.size(3) != shape.width) {
    throw ArgumentError("query images do not match the generator's output shape");
  }
  return complete(images, latentsFor(images));
}

Traversal CounterfactualEngine::traverse(const torch::Tensor& latents, int64_t steps) const {
  if (steps < 1) throw ArgumentError("traversal needs at least one step");
  if (latents.dim() != 2 || latents.size(1) != forward_.dim()) throw ArgumentError("latent dim mismatch");
  torch::NoGradGuard noGrad;
  Traversal t;
  auto z = latents;
  for (int64_t k = 0; k <= steps; ++k) {
    if (k > 0) z = forward_.applyN(z, 1);
    auto frame = models_.generator->generate(z);
    t.probs.push_back(models_.classifier->probabilities(frame));
    t.frames.push_back(std::move(frame));
  }
  return t;
}

}  // namespace latentcf
