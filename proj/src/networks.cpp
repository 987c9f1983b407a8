#include "latentcf/networks.hpp"

#include "latentcf/errors.hpp"

namespace latentcf {
namespace nn = torch::nn;
namespace F = torch::nn::functional;

namespace {

constexpr double kMnistMean = 0.1307;
constexpr double kMnistStd = 0.3081;
constexpr double kLeakySlope = 0.2;

torch::Tensor leaky(const torch::Tensor& x) { return F::leaky_relu(x, F::LeakyReLUFuncOptions().negative_slope(kLeakySlope)); }

nn::Conv2dOptions downConv(int64_t in, int64_t out) { return nn::Conv2dOptions(in, out, 4).stride(2).padding(1); }

nn::ConvTranspose2dOptions upConv(int64_t in, int64_t out) {
  return nn::ConvTranspose2dOptions(in, out, 4).stride(2).padding(1);
}

}  // namespace

ClassifierNetImpl::ClassifierNetImpl(int64_t numClasses, int64_t hidden) {
  conv1 = register_module("conv1", nn::Conv2d(nn::Conv2dOptions(1, 16, 5).padding(2)));
  conv2 = register_module("conv2", nn::Conv2d(nn::Conv2dOptions(16, 32, 5).padding(2)));
  fc1 = register_module("fc1", nn::Linear(32 * 7 * 7, hidden));
  fc2 = register_module("fc2", nn::Linear(hidden, numClasses));
}

torch::Tensor ClassifierNetImpl::forward(torch::Tensor x) {
  x = (x - kMnistMean) / kMnistStd;
  x = F::max_pool2d(torch::relu(conv1(x)), F::MaxPool2dFuncOptions(2));
  x = F::max_pool2d(torch::relu(conv2(x)), F::MaxPool2dFuncOptions(2));
  x = torch::relu(fc1(x.flatten(1)));
  return fc2(x);
}

std::vector<torch::Tensor> ClassifierNetImpl::taps(const torch::Tensor& input, std::span<const std::string> layers) {
  for (const auto& name : layers) {
    if (name != "conv1" && name != "conv2" && name != "penultimate") {
      throw ArgumentError("unknown classifier layer '" + name + "'");
    }
  }
  auto x = (input - kMnistMean) / kMnistStd;
  auto a1 = torch::relu(conv1(x));
  auto a2 = torch::relu(conv2(F::max_pool2d(a1, F::MaxPool2dFuncOptions(2))));
  torch::Tensor a3;
  auto penultimate = [&] {
    if (!a3.defined()) a3 = torch::relu(fc1(F::max_pool2d(a2, F::MaxPool2dFuncOptions(2)).flatten(1)));
    return a3;
  };
  std::vector<torch::Tensor> out;
  out.reserve(layers.size());
  for (const auto& name : layers) {
    if (name == "conv1") out.push_back(a1);
    else if (name == "conv2") out.push_back(a2);
    else out.push_back(penultimate());
  }
  return out;
}

GeneratorNetImpl::GeneratorNetImpl(int64_t latentDim, int64_t width_) : width(width_) {
  project = register_module("project", nn::Linear(latentDim, 2 * width * 7 * 7));
  bn0 = register_module("bn0", nn::BatchNorm2d(2 * width));
  up1 = register_module("up1", nn::ConvTranspose2d(upConv(2 * width, width)));
  bn1 = register_module("bn1", nn::BatchNorm2d(width));
  up2 = register_module("up2", nn::ConvTranspose2d(upConv(width, 1)));
}

torch::Tensor GeneratorNetImpl::forward(torch::Tensor z) {
  auto x = project(z).view({z.size(0), 2 * width, 7, 7});
  x = torch::relu(bn0(x));
  x = torch::relu(bn1(up1(x)));
  return (torch::tanh(up2(x)) + 1.0) * 0.5;
}

DiscriminatorNetImpl::DiscriminatorNetImpl(int64_t width) {
  conv1 = register_module("conv1", nn::Conv2d(downConv(1, width)));
  conv2 = register_module("conv2", nn::Conv2d(downConv(width, 2 * width)));
  head = register_module("head", nn::Linear(2 * width * 7 * 7, 1));
}

torch::Tensor DiscriminatorNetImpl::forward(torch::Tensor x) {
  x = x * 2.0 - 1.0;
  x = leaky(conv1(x));
  x = leaky(conv2(x));
  return head(x.flatten(1)).squeeze(1);
}

EncoderNetImpl::EncoderNetImpl(int64_t latentDim, int64_t width) {
  conv1 = register_module("conv1", nn::Conv2d(downConv(1, width)));
  conv2 = register_module("conv2", nn::Conv2d(downConv(width, 2 * width)));
  fc1 = register_module("fc1", nn::Linear(2 * width * 7 * 7, 256));
  fc2 = register_module("fc2", nn::Linear(256, latentDim));
}

torch::Tensor EncoderNetImpl::forward(torch::Tensor x) {
  x = x * 2.0 - 1.0;
  x = leaky(conv1(x));
  x = leaky(conv2(x));
  x = leaky(fc1(x.flatten(1)));
  return fc2(x);
}

AutoencoderNetImpl::AutoencoderNetImpl(int64_t pixels, int64_t hidden, int64_t code) {
  enc1 = register_module("enc1", nn::Linear(pixels, hidden));
  enc2 = register_module("enc2", nn::Linear(hidden, code));
  dec1 = register_module("dec1", nn::Linear(code, hidden));
  dec2 = register_module("dec2", nn::Linear(hidden, pixels));
}

torch::Tensor AutoencoderNetImpl::forward(torch::Tensor x) {
  auto shape = x.sizes().vec();
  auto h = torch::relu(enc1(x.flatten(1)));
  h = torch::relu(enc2(h));
  h = torch::relu(dec1(h));
  return torch::sigmoid(dec2(h)).view(shape);
}

TorchClassifier::TorchClassifier(ClassifierNet net, int64_t numClasses) : net_(std::move(net)), numClasses_(numClasses) {
  freeze(*net_);
}

torch::Tensor TorchClassifier::logits(const torch::Tensor& images) const { return net_->forward(images); }

std::vector<std::string> TorchClassifier::featureLayers() const { return {"conv1", "conv2", "penultimate"}; }

std::vector<torch::Tensor> TorchClassifier::features(const torch::Tensor& images,
                                                     std::span<const std::string> layers) const {
  return net_->taps(images, layers);
}

TorchGenerator::TorchGenerator(GeneratorNet net, int64_t latentDim, ImageShape shape)
    : net_(std::move(net)), latentDim_(latentDim), shape_(shape) {
  freeze(*net_);
}

torch::Tensor TorchGenerator::generate(const torch::Tensor& latents) const { return net_->forward(latents); }

TorchEncoder::TorchEncoder(EncoderNet net, int64_t latentDim) : net_(std::move(net)), latentDim_(latentDim) {
  freeze(*net_);
}

torch::Tensor TorchEncoder::encode(const torch::Tensor& images) const { return net_->forward(images); }

TorchDiscriminator::TorchDiscriminator(DiscriminatorNet net, bool trainable) : net_(std::move(net)) {
  freeze(*net_);
  if (trainable) {
    for (auto& p : net_->parameters()) p.set_requires_grad(true);
  }
}

torch::Tensor TorchDiscriminator::logits(const torch::Tensor& images) const { return net_->forward(images); }

std::vector<torch::Tensor> TorchDiscriminator::parameters() const { return net_->parameters(); }

TorchAutoencoder::TorchAutoencoder(AutoencoderNet net) : net_(std::move(net)) { freeze(*net_); }

torch::Tensor TorchAutoencoder::reconstruct(const torch::Tensor& images) const { return net_->forward(images); }

}  // namespace latentcf
