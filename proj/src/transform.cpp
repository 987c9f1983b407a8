#include "latentcf/transform.hpp"

#include <ATen/CPUGeneratorImpl.h>

#include <array>
#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>

#include "latentcf/errors.hpp"
#include "latentcf/models.hpp"

namespace latentcf {
namespace {

static_assert(std::endian::native == std::endian::little, "transform files are written little-endian");

constexpr std::array<char, 4> kMagic{'L', 'C', 'F', 'T'};
constexpr uint32_t kFormatVersion = 1;

enum class DtypeCode : uint8_t { Float32 = 0, Float64 = 1 };

template <typename T>
void writePod(std::ostream& out, const T& value) {
  out.write(reinterpret_cast<const char*>(&value), sizeof(T));
}

template <typename T>
T readPod(std::istream& in) {
  T value{};
  in.read(reinterpret_cast<char*>(&value), sizeof(T));
  if (!in) throw IoError("truncated transform file");
  return value;
}

void writeTensor(std::ostream& out, const torch::Tensor& t) {
  auto c = t.detach().contiguous().cpu();
  out.write(static_cast<const char*>(c.data_ptr()), static_cast<std::streamsize>(c.numel() * c.element_size()));
}

torch::Tensor readTensor(std::istream& in, torch::IntArrayRef shape, torch::Dtype dtype) {
  auto t = torch::empty(shape, torch::TensorOptions().dtype(dtype));
  in.read(static_cast<char*>(t.data_ptr()), static_cast<std::streamsize>(t.numel() * t.element_size()));
  if (!in) throw IoError("truncated transform parameter blob");
  return t;
}

}  // namespace

std::string toString(Direction direction) { return direction == Direction::Forward ? "forward" : "backward"; }

TransformNetwork TransformNetwork::initialize(int64_t dim, int64_t hidden, uint64_t seed, Direction direction,
                                              bool residual, torch::Dtype dtype) {
  if (dim < 1 || hidden < 1) throw ArgumentError("transform dim and hidden width must be positive");
  auto gen = at::detail::createCPUGenerator(seed);
  auto opts = torch::TensorOptions().dtype(dtype);
  auto uniform = [&](torch::IntArrayRef shape, int64_t fanIn) {
    const double bound = 1.0 / std::sqrt(static_cast<double>(fanIn));
    return torch::empty(shape, opts).uniform_(-bound, bound, gen);
  };
  auto w1 = uniform({hidden, dim}, dim);
  auto b1 = uniform({hidden}, dim);
  auto w2 = uniform({dim, hidden}, hidden);
  auto b2 = uniform({dim}, hidden);
  auto net = fromWeights(direction, w1, b1, w2, b2, residual);
  net.seed_ = seed;
  return net;
}

TransformNetwork TransformNetwork::fromWeights(Direction direction, torch::Tensor w1, torch::Tensor b1,
                                               torch::Tensor w2, torch::Tensor b2, bool residual) {
  if (w1.dim() != 2 || w2.dim() != 2 || b1.dim() != 1 || b2.dim() != 1) {
    throw ArgumentError("transform weights must be matrices and biases vectors");
  }
  const auto hidden = w1.size(0), dim = w1.size(1);
  if (w2.size(0) != dim || w2.size(1) != hidden || b1.size(0) != hidden || b2.size(0) != dim) {
    throw ArgumentError("transform weight shapes are inconsistent");
  }
  TransformNetwork net;
  net.w1_ = w1.detach().clone().set_requires_grad(true);
  net.b1_ = b1.detach().clone().set_requires_grad(true);
  net.w2_ = w2.detach().clone().set_requires_grad(true);
  net.b2_ = b2.detach().clone().set_requires_grad(true);
  net.direction_ = direction;
  net.residual_ = residual;
  for (const auto& p : net.parameters()) {
    if (!torch::isfinite(p).all().item<bool>()) throw ArgumentError("transform parameters must be finite");
  }
  return net;
}

TransformNetwork TransformNetwork::scaling(int64_t dim, double scale, Direction direction, torch::Dtype dtype) {
  if (dim < 1) throw ArgumentError("transform dim must be positive");
  auto opts = torch::TensorOptions().dtype(dtype);
  auto eye = torch::eye(dim, opts);
  auto w1 = torch::cat({eye, -eye}, 0);
  auto w2 = torch::cat({eye, -eye}, 1) * scale;
  return fromWeights(direction, w1, torch::zeros({2 * dim}, opts), w2, torch::zeros({dim}, opts));
}

TransformNetwork TransformNetwork::identity(int64_t dim, Direction direction, torch::Dtype dtype) {
  return scaling(dim, 1.0, direction, dtype);
}

torch::Tensor TransformNetwork::forward(const torch::Tensor& latents) const {
  namespace F = torch::nn::functional;
  // Inputs are computed in the parameters' precision.
  auto z = latents.scalar_type() == w1_.scalar_type() ? latents : latents.to(w1_.scalar_type());
  auto hiddenAct = torch::relu(F::linear(z, w1_, b1_));
  auto out = F::linear(hiddenAct, w2_, b2_);
  return residual_ ? z + out : out;
}

torch::Tensor TransformNetwork::applyN(const torch::Tensor& latents, int64_t steps) const {
  if (steps < 0) throw ArgumentError("step count must be non-negative");
  if (latents.dim() != 2 || latents.size(1) != dim()) {
    throw ArgumentError("latent dim does not match transform dim " + std::to_string(dim()));
  }
  auto z = latents;
  for (int64_t i = 0; i < steps; ++i) z = forward(z);
  return z;
}

LatentBatch TransformNetwork::applyN(const LatentBatch& latents, int64_t steps) const {
  return LatentBatch(applyN(latents.values(), steps));
}

TransformNetwork TransformNetwork::clone() const {
  auto net = fromWeights(direction_, w1_, b1_, w2_, b2_, residual_);
  net.seed_ = seed_;
  return net;
}

void TransformNetwork::setRequiresGrad(bool enabled) {
  for (auto& p : parameters()) p.set_requires_grad(enabled);
}

std::string TransformNetwork::digest() const { return parameterDigest(parameters()); }

void TransformNetwork::save(const std::filesystem::path& path, int64_t steps) const {
  if (!defined()) throw StateError("cannot save an uninitialized transform");
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot write " + path.string());
  const auto dtype = w1_.scalar_type();
  if (dtype != torch::kFloat32 && dtype != torch::kFloat64) throw StateError("unsupported transform dtype");
  out.write(kMagic.data(), kMagic.size());
  writePod(out, kFormatVersion);
  writePod(out, dim());
  writePod(out, hidden());
  writePod(out, steps);
  writePod(out, static_cast<uint8_t>(direction_));
  writePod(out, static_cast<uint8_t>(residual_ ? 1 : 0));
  writePod(out, static_cast<uint8_t>(dtype == torch::kFloat64 ? DtypeCode::Float64 : DtypeCode::Float32));
  writePod(out, static_cast<uint8_t>(0));
  writePod(out, seed_);
  for (const auto& p : parameters()) writeTensor(out, p);
  if (!out) throw IoError("failed writing " + path.string());
}

TransformNetwork TransformNetwork::load(const std::filesystem::path& path, TransformHeader* header) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot read " + path.string());
  std::array<char, 4> magic{};
  in.read(magic.data(), magic.size());
  if (!in || magic != kMagic) throw IoError(path.string() + " is not a transform file");
  if (readPod<uint32_t>(in) != kFormatVersion) throw IoError("unsupported transform file version");
  TransformHeader h;
  h.dim = readPod<int64_t>(in);
  h.hidden = readPod<int64_t>(in);
  h.steps = readPod<int64_t>(in);
  const auto direction = readPod<uint8_t>(in);
  const auto residual = readPod<uint8_t>(in);
  const auto dtypeCode = readPod<uint8_t>(in);
  readPod<uint8_t>(in);
  h.seed = readPod<uint64_t>(in);
  if (h.dim < 1 || h.hidden < 1 || direction > 1 || residual > 1 || dtypeCode > 1) {
    throw IoError("corrupt transform header in " + path.string());
  }
  h.direction = static_cast<Direction>(direction);
  h.residual = residual == 1;
  const auto dtype = dtypeCode == 1 ? torch::kFloat64 : torch::kFloat32;
  auto w1 = readTensor(in, {h.hidden, h.dim}, dtype);
  auto b1 = readTensor(in, {h.hidden}, dtype);
  auto w2 = readTensor(in, {h.dim, h.hidden}, dtype);
  auto b2 = readTensor(in, {h.dim}, dtype);
  auto net = fromWeights(h.direction, w1, b1, w2, b2, h.residual);
  net.seed_ = h.seed;
  if (header) *header = h;
  return net;
}

}  // namespace latentcf
