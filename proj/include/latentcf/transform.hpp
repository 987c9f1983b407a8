#pragma once

#include <torch/torch.h>

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "latentcf/types.hpp"

namespace latentcf {

/// Which way a transform points within a class pair: forward maps query
/// latents to counterfactual latents, backward maps them back.
enum class Direction : uint8_t { Forward = 0, Backward = 1 };

std::string toString(Direction direction);

/// Fixed-size header stored in front of the parameter blob of a transform file.
struct TransformHeader {
  int64_t dim = 0;
  int64_t hidden = 0;
  int64_t steps = 1;
  Direction direction = Direction::Forward;
  bool residual = false;
  uint64_t seed = 0;
};

/// A two-layer fully connected map R^D -> R^D with a ReLU hidden layer,
/// optionally in residual form z + MLP(z).
///
/// Copies share parameter storage (tensor handle semantics); use clone() for
/// an independent network.
class TransformNetwork {
 public:
  TransformNetwork() = default;

  /// Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) weights and biases drawn from a
  /// generator seeded with `seed`. Throws ArgumentError for dim/hidden < 1.
  static TransformNetwork initialize(int64_t dim, int64_t hidden, uint64_t seed, Direction direction,
                                     bool residual = false, torch::Dtype dtype = torch::kFloat32);
  /// Builds a network from explicit weights: w1 (H, D), b1 (H), w2 (D, H), b2 (D).
  static TransformNetwork fromWeights(Direction direction, torch::Tensor w1, torch::Tensor b1, torch::Tensor w2,
                                      torch::Tensor b2, bool residual = false);
  /// Exact identity via relu(z) - relu(-z), hidden width 2D.
  static TransformNetwork identity(int64_t dim, Direction direction, torch::Dtype dtype = torch::kFloat32);
  /// Exact z -> scale * z, hidden width 2D.
  static TransformNetwork scaling(int64_t dim, double scale, Direction direction,
                                  torch::Dtype dtype = torch::kFloat32);

  /// One application on a (B, D) tensor.
  torch::Tensor forward(const torch::Tensor& latents) const;
  /// `steps` recursive applications; zero steps returns the input unchanged.
  /// Throws ArgumentError on a dim mismatch or negative step count.
  torch::Tensor applyN(const torch::Tensor& latents, int64_t steps) const;
  LatentBatch applyN(const LatentBatch& latents, int64_t steps) const;

  std::vector<torch::Tensor> parameters() const { return {w1_, b1_, w2_, b2_}; }
  int64_t dim() const { return w1_.size(1); }
  int64_t hidden() const { return w1_.size(0); }
  Direction direction() const { return direction_; }
  bool residual() const { return residual_; }
  uint64_t seed() const { return seed_; }
  bool defined() const { return w1_.defined(); }

  TransformNetwork clone() const;
  void setRequiresGrad(bool enabled);
  /// SHA-256 of the parameter bytes.
  std::string digest() const;

  void save(const std::filesystem::path& path, int64_t steps = 1) const;
  /// Throws IoError on a missing or malformed file.
  static TransformNetwork load(const std::filesystem::path& path, TransformHeader* header = nullptr);

 private:
  torch::Tensor w1_, b1_, w2_, b2_;
  Direction direction_ = Direction::Forward;
  bool residual_ = false;
  uint64_t seed_ = 0;
};

}  // namespace latentcf
