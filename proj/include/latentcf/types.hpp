#pragma once

#include <torch/torch.h>

#include <cstdint>
#include <string>
#include <string_view>

namespace latentcf {

struct ImageShape {
  int64_t channels = 1;
  int64_t height = 28;
  int64_t width = 28;

  int64_t numel() const { return channels * height * width; }
  int64_t pixels() const { return height * width; }
  bool operator==(const ImageShape&) const = default;
};

/// Points in a generator's latent space, shape (B, D).
class LatentBatch {
 public:
  LatentBatch() = default;
  /// Throws ArgumentError unless `values` is a finite (B, D) tensor with B, D >= 1.
  explicit LatentBatch(torch::Tensor values);

  const torch::Tensor& values() const { return values_; }
  int64_t size() const { return values_.size(0); }
  int64_t dim() const { return values_.size(1); }
  bool defined() const { return values_.defined(); }
  LatentBatch slice(int64_t begin, int64_t end) const;

 private:
  torch::Tensor values_;
};

/// Images of shape (B, C, H, W). Generator outputs live in [0, 1].
class ImageBatch {
 public:
  ImageBatch() = default;
  /// Throws ArgumentError unless `values` is 4-D with a nonempty batch.
  explicit ImageBatch(torch::Tensor values);

  const torch::Tensor& values() const { return values_; }
  int64_t size() const { return values_.size(0); }
  ImageShape shape() const;
  bool defined() const { return values_.defined(); }
  /// True when every entry lies in [lo - tol, hi + tol].
  bool inRange(double lo = 0.0, double hi = 1.0, double tol = 0.0) const;
  ImageBatch slice(int64_t begin, int64_t end) const;

 private:
  torch::Tensor values_;
};

/// Query class and counterfactual (target) class of one explanation problem.
struct ClassPair {
  int64_t query = 0;
  int64_t target = 1;

  ClassPair reversed() const { return {target, query}; }
  /// "3:8"
  std::string key() const;
  /// "3-8", usable in file names.
  std::string slug() const;
  bool operator==(const ClassPair&) const = default;
  auto operator<=>(const ClassPair&) const = default;

  /// Parses "3:8" (also accepts "3-8"). Throws ArgumentError.
  static ClassPair parse(std::string_view text);
};

}  // namespace latentcf
