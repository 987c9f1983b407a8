#pragma once

#include <torch/torch.h>

#include <memory>
#include <span>
#include <string>
#include <vector>

#include "latentcf/types.hpp"

namespace latentcf {

// Contracts for the pretrained networks consumed by the method. All of them
// take and return plain tensors so gradients can flow through frozen weights
// back to the transforms; the LatentBatch/ImageBatch overloads are for callers
// outside the training loop.

class GeneratorModel {
 public:
  virtual ~GeneratorModel() = default;

  /// (B, D) latents -> (B, C, H, W) images in [0, 1]. Differentiable in the latents.
  virtual torch::Tensor generate(const torch::Tensor& latents) const = 0;
  virtual int64_t latentDim() const = 0;
  virtual ImageShape imageShape() const = 0;
  virtual bool classConditional() const { return false; }

  ImageBatch generate(const LatentBatch& latents) const;
};

class EncoderModel {
 public:
  virtual ~EncoderModel() = default;

  /// (B, C, H, W) images -> (B, D) latents.
  virtual torch::Tensor encode(const torch::Tensor& images) const = 0;
  virtual int64_t latentDim() const = 0;

  LatentBatch encode(const ImageBatch& images) const;
};

class ClassifierModel {
 public:
  virtual ~ClassifierModel() = default;

  virtual torch::Tensor logits(const torch::Tensor& images) const = 0;
  virtual int64_t numClasses() const = 0;
  /// Names accepted by features(), shallowest first.
  virtual std::vector<std::string> featureLayers() const = 0;
  /// Intermediate activations for the requested layers, in request order.
  /// Throws ArgumentError for an unknown layer name.
  virtual std::vector<torch::Tensor> features(const torch::Tensor& images,
                                              std::span<const std::string> layers) const = 0;

  /// Row-stochastic (B, K) class probabilities.
  torch::Tensor probabilities(const torch::Tensor& images) const;
  torch::Tensor predict(const torch::Tensor& images) const;
};

/// Probability-like discriminator scores are clamped to [eps, 1 - eps].
inline constexpr double kDiscriminatorEps = 1e-6;

class DiscriminatorModel {
 public:
  virtual ~DiscriminatorModel() = default;

  /// Raw real/fake logits, shape (B) or (B, 1).
  virtual torch::Tensor logits(const torch::Tensor& images) const = 0;
  /// Handles to the trainable weights (used only by the co-training mode).
  virtual std::vector<torch::Tensor> parameters() const = 0;

  /// Probability that the images are real, shape (B), clamped to [eps, 1 - eps].
  torch::Tensor scoreReal(const torch::Tensor& images) const;
};

class AutoencoderModel {
 public:
  virtual ~AutoencoderModel() = default;
  virtual torch::Tensor reconstruct(const torch::Tensor& images) const = 0;
};

/// The networks one counterfactual run operates on. The encoder is optional
/// (latents may come from sampling or inversion); the perceptual network
/// defaults to the explained classifier.
struct ModelSet {
  std::shared_ptr<const GeneratorModel> generator;
  std::shared_ptr<const EncoderModel> encoder;
  std::shared_ptr<const ClassifierModel> classifier;
  std::shared_ptr<const ClassifierModel> perceptual;
  std::vector<std::string> perceptualLayers;
  std::shared_ptr<DiscriminatorModel> discriminator;

  const ClassifierModel& perceptualNetwork() const { return perceptual ? *perceptual : *classifier; }
  /// Throws ConfigurationError if a required network is missing or the
  /// perceptual layer set is empty or names an unknown layer.
  void validate() const;
};

/// Stops autograd from accumulating into a module's own weights while keeping
/// gradients flowing through it.
void freeze(torch::nn::Module& module);

/// SHA-256 over the raw bytes of the given tensors, in order.
std::string parameterDigest(const std::vector<torch::Tensor>& tensors);

}  // namespace latentcf
