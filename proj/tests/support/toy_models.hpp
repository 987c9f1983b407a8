#pragma once

// Small double-precision models for unit tests: D = 4 latents, 6x6 images.

#include <torch/torch.h>

#include <memory>
#include <span>
#include <string>
#include <vector>

#include "latentcf/errors.hpp"
#include "latentcf/models.hpp"

namespace latentcf::testing {

inline constexpr int64_t kToyDim = 4;
inline constexpr int64_t kToySide = 6;

inline torch::Tensor seededNormal(std::vector<int64_t> shape, uint64_t seed, double scale = 1.0) {
  auto gen = at::make_generator<at::CPUGeneratorImpl>(seed);
  return torch::randn(shape, gen, torch::TensorOptions().dtype(torch::kFloat64)) * scale;
}

/// G(z) = sigmoid(W z + b) reshaped to (1, 6, 6).
class ToyGenerator final : public GeneratorModel {
 public:
  explicit ToyGenerator(uint64_t seed = 1)
      : w_(seededNormal({kToySide * kToySide, kToyDim}, seed, 0.8)),
        b_(seededNormal({kToySide * kToySide}, seed + 100, 0.2)) {}

  using GeneratorModel::generate;
  torch::Tensor generate(const torch::Tensor& z) const override {
    auto zz = z.to(torch::kFloat64);
    return torch::sigmoid(torch::addmm(b_, zz, w_.t())).view({-1, 1, kToySide, kToySide});
  }
  int64_t latentDim() const override { return kToyDim; }
  ImageShape imageShape() const override { return {1, kToySide, kToySide}; }

  const torch::Tensor& weight() const { return w_; }
  const torch::Tensor& bias() const { return b_; }

 private:
  torch::Tensor w_, b_;
};

/// Inverts ToyGenerator exactly on its range: z = pinv(W) (logit(x) - b).
class ToyEncoder final : public EncoderModel {
 public:
  explicit ToyEncoder(const ToyGenerator& g) : pinv_(torch::linalg_pinv(g.weight())), b_(g.bias()) {}

  using EncoderModel::encode;
  torch::Tensor encode(const torch::Tensor& images) const override {
    auto x = images.to(torch::kFloat64).flatten(1).clamp(1e-9, 1 - 1e-9);
    return torch::matmul(torch::logit(x) - b_, pinv_.t());
  }
  int64_t latentDim() const override { return kToyDim; }

 private:
  torch::Tensor pinv_, b_;
};

/// conv1: tanh(3x3 conv, 2 channels, padding 1); penultimate: tanh(linear 8);
/// logits: linear K.
class ToyClassifier final : public ClassifierModel {
 public:
  explicit ToyClassifier(int64_t classes = 2, uint64_t seed = 7)
      : k_(classes),
        conv_(seededNormal({2, 1, 3, 3}, seed, 0.7)),
        convBias_(seededNormal({2}, seed + 1, 0.1)),
        fc1_(seededNormal({8, 2 * kToySide * kToySide}, seed + 2, 0.2)),
        fc1Bias_(seededNormal({8}, seed + 3, 0.1)),
        fc2_(seededNormal({classes, 8}, seed + 4, 1.0)),
        fc2Bias_(seededNormal({classes}, seed + 5, 0.1)) {}

  torch::Tensor logits(const torch::Tensor& images) const override {
    auto h = penultimate(conv1(images));
    return torch::addmm(fc2Bias_, h, fc2_.t());
  }
  int64_t numClasses() const override { return k_; }
  std::vector<std::string> featureLayers() const override { return {"conv1", "penultimate"}; }
  std::vector<torch::Tensor> features(const torch::Tensor& images,
                                      std::span<const std::string> layers) const override {
    auto c1 = conv1(images);
    std::vector<torch::Tensor> out;
    for (const auto& name : layers) {
      if (name == "conv1") {
        out.push_back(c1);
      } else if (name == "penultimate") {
        out.push_back(penultimate(c1));
      } else {
        throw ArgumentError("unknown layer " + name);
      }
    }
    return out;
  }

 private:
  torch::Tensor conv1(const torch::Tensor& x) const {
    return torch::tanh(torch::conv2d(x.to(torch::kFloat64), conv_, convBias_, 1, 1));
  }
  torch::Tensor penultimate(const torch::Tensor& c1) const {
    return torch::tanh(torch::addmm(fc1Bias_, c1.flatten(1), fc1_.t()));
  }

  int64_t k_;
  torch::Tensor conv_, convBias_, fc1_, fc1Bias_, fc2_, fc2Bias_;
};

/// Fixed logits regardless of the input: probabilities softmax(scores).
class ConstantClassifier final : public ClassifierModel {
 public:
  explicit ConstantClassifier(std::vector<double> scores) : scores_(torch::tensor(scores, torch::kFloat64)) {}

  torch::Tensor logits(const torch::Tensor& images) const override {
    // Keep a (zero) dependence on the input so gradients are defined.
    auto zero = images.to(torch::kFloat64).flatten(1).sum(1, true) * 0.0;
    return zero + scores_.unsqueeze(0);
  }
  int64_t numClasses() const override { return scores_.size(0); }
  std::vector<std::string> featureLayers() const override { return {"input"}; }
  std::vector<torch::Tensor> features(const torch::Tensor& images,
                                      std::span<const std::string> layers) const override {
    std::vector<torch::Tensor> out;
    for (const auto& name : layers) {
      if (name != "input") throw ArgumentError("unknown layer " + name);
      out.push_back(images.to(torch::kFloat64));
    }
    return out;
  }

 private:
  torch::Tensor scores_;
};

/// Class decided by the mean intensity of the image: logit_1 = s * (mean - 0.5).
class BrightnessClassifier final : public ClassifierModel {
 public:
  explicit BrightnessClassifier(double sharpness = 40.0) : s_(sharpness) {}

  torch::Tensor logits(const torch::Tensor& images) const override {
    auto m = images.to(torch::kFloat64).flatten(1).mean(1, true);
    return torch::cat({torch::zeros_like(m), s_ * (m - 0.5)}, 1);
  }
  int64_t numClasses() const override { return 2; }
  std::vector<std::string> featureLayers() const override { return {"input"}; }
  std::vector<torch::Tensor> features(const torch::Tensor& images,
                                      std::span<const std::string> layers) const override {
    std::vector<torch::Tensor> out;
    for (const auto& name : layers) {
      if (name != "input") throw ArgumentError("unknown layer " + name);
      out.push_back(images.to(torch::kFloat64));
    }
    return out;
  }

 private:
  double s_;
};

/// D(x) = sigmoid(w . x + b); trainable parameters.
class ToyDiscriminator final : public DiscriminatorModel {
 public:
  explicit ToyDiscriminator(uint64_t seed = 11, double scale = 0.3)
      : w_(seededNormal({kToySide * kToySide}, seed, scale).requires_grad_(true)),
        b_(torch::zeros({1}, torch::kFloat64).requires_grad_(true)) {}

  torch::Tensor logits(const torch::Tensor& images) const override {
    return torch::matmul(images.to(torch::kFloat64).flatten(1), w_) + b_;
  }
  std::vector<torch::Tensor> parameters() const override { return {w_, b_}; }

 private:
  torch::Tensor w_, b_;
};

/// Logit zero everywhere, i.e. D = 0.5.
class HalfDiscriminator final : public DiscriminatorModel {
 public:
  torch::Tensor logits(const torch::Tensor& images) const override {
    return images.to(torch::kFloat64).flatten(1).sum(1) * 0.0;
  }
  std::vector<torch::Tensor> parameters() const override { return {}; }
};

inline ModelSet toyModelSet(uint64_t seed = 1) {
  auto generator = std::make_shared<ToyGenerator>(seed);
  ModelSet m;
  m.generator = generator;
  m.encoder = std::make_shared<ToyEncoder>(*generator);
  m.classifier = std::make_shared<ToyClassifier>(2, seed + 6);
  m.discriminator = std::make_shared<ToyDiscriminator>(seed + 10);
  m.perceptualLayers = {"conv1", "penultimate"};
  return m;
}

}  // namespace latentcf::testing
