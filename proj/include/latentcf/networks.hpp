#pragma once

#include <torch/torch.h>

#include <filesystem>
#include <memory>
#include <string>
#include <vector>

#include "latentcf/models.hpp"

namespace latentcf {

// Desk-scale backbones for 28x28 grayscale data. Widths are kept small so the
// whole pipeline trains on a single CPU core.

struct ClassifierNetImpl : torch::nn::Module {
  ClassifierNetImpl(int64_t numClasses, int64_t hidden);

  torch::Tensor forward(torch::Tensor x);
  /// Activations named "conv1", "conv2" (post-ReLU feature maps) and
  /// "penultimate" (hidden fully connected layer).
  std::vector<torch::Tensor> taps(const torch::Tensor& x, std::span<const std::string> layers);

  torch::nn::Conv2d conv1{nullptr}, conv2{nullptr};
  torch::nn::Linear fc1{nullptr}, fc2{nullptr};
};
TORCH_MODULE(ClassifierNet);

/// DCGAN-style generator: latent -> 7x7 -> 14x14 -> 28x28, tanh output
/// rescaled to [0, 1].
struct GeneratorNetImpl : torch::nn::Module {
  GeneratorNetImpl(int64_t latentDim, int64_t width);

  torch::Tensor forward(torch::Tensor z);

  int64_t width;
  torch::nn::Linear project{nullptr};
  torch::nn::BatchNorm2d bn0{nullptr}, bn1{nullptr};
  torch::nn::ConvTranspose2d up1{nullptr}, up2{nullptr};
};
TORCH_MODULE(GeneratorNet);

struct DiscriminatorNetImpl : torch::nn::Module {
  explicit DiscriminatorNetImpl(int64_t width);

  torch::Tensor forward(torch::Tensor x);

  torch::nn::Conv2d conv1{nullptr}, conv2{nullptr};
  torch::nn::Linear head{nullptr};
};
TORCH_MODULE(DiscriminatorNet);

struct EncoderNetImpl : torch::nn::Module {
  EncoderNetImpl(int64_t latentDim, int64_t width);

  torch::Tensor forward(torch::Tensor x);

  torch::nn::Conv2d conv1{nullptr}, conv2{nullptr};
  torch::nn::Linear fc1{nullptr}, fc2{nullptr};
};
TORCH_MODULE(EncoderNet);

/// Fully connected autoencoder used by the IM1/IM2 realism scores.
struct AutoencoderNetImpl : torch::nn::Module {
  AutoencoderNetImpl(int64_t pixels, int64_t hidden, int64_t code);

  torch::Tensor forward(torch::Tensor x);

  torch::nn::Linear enc1{nullptr}, enc2{nullptr}, dec1{nullptr}, dec2{nullptr};
};
TORCH_MODULE(AutoencoderNet);

// Adapters exposing the modules through the model contracts. Each adapter
// freezes its module on construction.

class TorchClassifier final : public ClassifierModel {
 public:
  TorchClassifier(ClassifierNet net, int64_t numClasses);

  torch::Tensor logits(const torch::Tensor& images) const override;
  int64_t numClasses() const override { return numClasses_; }
  std::vector<std::string> featureLayers() const override;
  std::vector<torch::Tensor> features(const torch::Tensor& images,
                                      std::span<const std::string> layers) const override;
  ClassifierNet net() const { return net_; }

 private:
  mutable ClassifierNet net_;
  int64_t numClasses_;
};

class TorchGenerator final : public GeneratorModel {
 public:
  TorchGenerator(GeneratorNet net, int64_t latentDim, ImageShape shape);

  using GeneratorModel::generate;
  torch::Tensor generate(const torch::Tensor& latents) const override;
  int64_t latentDim() const override { return latentDim_; }
  ImageShape imageShape() const override { return shape_; }

 private:
  mutable GeneratorNet net_;
  int64_t latentDim_;
  ImageShape shape_;
};

class TorchEncoder final : public EncoderModel {
 public:
  TorchEncoder(EncoderNet net, int64_t latentDim);

  using EncoderModel::encode;
  torch::Tensor encode(const torch::Tensor& images) const override;
  int64_t latentDim() const override { return latentDim_; }

 private:
  mutable EncoderNet net_;
  int64_t latentDim_;
};

/// Wraps a discriminator module. Frozen unless `trainable` is set, in which
/// case parameters() hands out tensors that accumulate gradients.
class TorchDiscriminator final : public DiscriminatorModel {
 public:
  explicit TorchDiscriminator(DiscriminatorNet net, bool trainable = false);

  torch::Tensor logits(const torch::Tensor& images) const override;
  std::vector<torch::Tensor> parameters() const override;
  DiscriminatorNet net() const { return net_; }

 private:
  mutable DiscriminatorNet net_;
};

class TorchAutoencoder final : public AutoencoderModel {
 public:
  explicit TorchAutoencoder(AutoencoderNet net);

  torch::Tensor reconstruct(const torch::Tensor& images) const override;

 private:
  mutable AutoencoderNet net_;
};

}  // namespace latentcf
