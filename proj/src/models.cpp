#include "latentcf/models.hpp"

#include <algorithm>

#include "latentcf/errors.hpp"
#include "latentcf/hashing.hpp"

namespace latentcf {

ImageBatch GeneratorModel::generate(const LatentBatch& latents) const {
  if (latents.dim() != latentDim()) {
    throw ArgumentError("latent dim " + std::to_string(latents.dim()) + " does not match generator dim " +
                        std::to_string(latentDim()));
  }
  return ImageBatch(generate(latents.values()));
}

LatentBatch EncoderModel::encode(const ImageBatch& images) const { return LatentBatch(encode(images.values())); }

torch::Tensor ClassifierModel::probabilities(const torch::Tensor& images) const {
  return torch::softmax(logits(images), 1);
}

torch::Tensor ClassifierModel::predict(const torch::Tensor& images) const { return logits(images).argmax(1); }

torch::Tensor DiscriminatorModel::scoreReal(const torch::Tensor& images) const {
  return torch::sigmoid(logits(images).reshape({images.size(0)})).clamp(kDiscriminatorEps, 1.0 - kDiscriminatorEps);
}

void ModelSet::validate() const {
  if (!generator) throw ConfigurationError("model set has no generator");
  if (!classifier) throw ConfigurationError("model set has no classifier");
  if (!discriminator) throw ConfigurationError("model set has no discriminator");
  if (encoder && encoder->latentDim() != generator->latentDim()) {
    throw ConfigurationError("encoder latent dim does not match generator latent dim");
  }
  if (perceptualLayers.empty()) throw ConfigurationError("perceptual layer set is empty");
  auto known = perceptualNetwork().featureLayers();
  for (const auto& layer : perceptualLayers) {
    if (std::find(known.begin(), known.end(), layer) == known.end()) {
      throw ConfigurationError("unknown perceptual layer '" + layer + "'");
    }
  }
}

void freeze(torch::nn::Module& module) {
  for (auto& p : module.parameters()) p.set_requires_grad(false);
  module.eval();
}

std::string parameterDigest(const std::vector<torch::Tensor>& tensors) {
  Sha256 hasher;
  for (const auto& t : tensors) {
    auto c = t.detach().contiguous().cpu();
    hasher.update(c.data_ptr(), c.numel() * c.element_size());
  }
  return hasher.hexDigest();
}

}  // namespace latentcf
