#pragma once

#include <cstdint>
#include <optional>

#include "latentcf/models.hpp"
#include "latentcf/types.hpp"

namespace latentcf {

/// Standard-normal latents. With a truncation bound, each coordinate outside
/// [-truncation, truncation] is redrawn until it falls inside (no clipping).
/// Reproducible per seed; throws ArgumentError for count/dim < 1 or a
/// non-positive truncation.
LatentBatch sampleLatents(int64_t count, int64_t dim, uint64_t seed,
                          std::optional<double> truncation = std::nullopt, torch::Dtype dtype = torch::kFloat32);

struct RejectionSample {
  LatentBatch latents;
  int64_t draws = 0;
  /// Fraction of all draws the classifier assigned to the class.
  double acceptanceRate = 0.0;
};

struct RejectionOptions {
  int64_t chunk = 256;  // latents drawn per classifier call
  std::optional<double> truncation;
};

/// Draws latents until `count` of them decode to images the classifier
/// assigns to `targetClass`. Throws BudgetExhaustedError (carrying the number
/// accepted) if `maxDraws` draws are not enough.
RejectionSample rejectionSampleClass(const ClassifierModel& classifier, const GeneratorModel& generator,
                                     int64_t targetClass, int64_t count, int64_t maxDraws, uint64_t seed,
                                     const RejectionOptions& options = {});

struct InversionOptions {
  int64_t restarts = 1;
  double initTruncation = 1.0;
};

struct InversionResult {
  LatentBatch latents;
  /// Final per-image pixel MSE, shape (B).
  torch::Tensor loss;
  int64_t iterations = 0;
};

/// Recovers latents whose decoded images match `images` under per-pixel
/// squared error, by Adam descent on the latent from a truncated-normal start.
/// With several restarts the lowest-loss latent per image is kept. Throws
/// ArgumentError on a shape mismatch and DivergenceError on a non-finite loss.
InversionResult invertImages(const GeneratorModel& generator, const ImageBatch& images, int64_t budget,
                             double stepSize, uint64_t seed, const InversionOptions& options = {});

}  // namespace latentcf
