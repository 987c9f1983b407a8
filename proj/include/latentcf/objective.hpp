#pragma once

#include <torch/torch.h>

#include <span>
#include <string>

#include "json.hpp"
#include "latentcf/models.hpp"
#include "latentcf/transform.hpp"

namespace latentcf {

/// Lower clamp applied to probabilities before taking logarithms.
inline constexpr double kLogClamp = 1e-12;

/// How the L1, total variation and perceptual terms reduce over the elements
/// of one sample. Batches are always averaged.
enum class Reduction { Mean, Sum };

std::string toString(Reduction r);
/// Throws ArgumentError for names other than "mean" and "sum".
Reduction reductionFrom(const std::string& name);

/// Weights of the proximity, cycle and adversarial terms relative to the
/// classification term.
struct LossWeights {
  double alpha = 0.1;
  double beta = 0.1;
  double gamma = 0.001;
  Reduction reduction = Reduction::Mean;

  /// Throws ArgumentError unless all weights are finite and non-negative.
  void validate() const;
  bool operator==(const LossWeights&) const = default;
};

/// Scalar snapshot of one objective evaluation.
struct LossBreakdown {
  double cls = 0.0;
  double prx = 0.0;
  double cyc = 0.0;
  double adv = 0.0;
  double total = 0.0;

  double prxL1 = 0.0;
  double prxEntropy = 0.0;
  double prxSmoothness = 0.0;
  double cycPerceptual = 0.0;
  double cycImage = 0.0;
  double cycLatent = 0.0;

  nlohmann::json toJson() const;
  static LossBreakdown fromJson(const nlohmann::json& j);
};

struct ProximityTerms {
  torch::Tensor value;
  torch::Tensor l1;
  torch::Tensor entropy;
  torch::Tensor smoothness;
};

struct CycleTerms {
  torch::Tensor value;
  torch::Tensor perceptual;
  torch::Tensor image;
  torch::Tensor latent;
};

/// Differentiable terms of one objective evaluation plus the intermediate
/// images, so callers can reuse them (e.g. for discriminator updates).
struct ObjectiveTerms {
  torch::Tensor cls;
  ProximityTerms prx;
  CycleTerms cyc;
  torch::Tensor adv;
  torch::Tensor total;

  torch::Tensor counterfactual;   // G(forward^n(z))
  torch::Tensor cycled;           // G(backward^n(forward^n(z)))
  torch::Tensor cfLatent;
  torch::Tensor cycledLatent;

  LossBreakdown breakdown() const;
};

/// Mean (or sum) over all non-batch elements, mean over the batch.
torch::Tensor l1Distance(const torch::Tensor& a, const torch::Tensor& b, Reduction reduction = Reduction::Mean);

/// Batch mean of -log(clamp(p[target], 1e-12, 1)) for (B, K) probabilities.
torch::Tensor classificationLoss(const torch::Tensor& probs, int64_t targetClass);

/// Min-max normalized |x - x_cf| per image; maps with zero range are left as
/// they are. Shape (B, C, H, W).
torch::Tensor normalizedDifference(const torch::Tensor& x, const torch::Tensor& xcf);

/// L1 + mean per-pixel binary entropy of the normalized difference map +
/// anisotropic total variation of |x - x_cf|, the variation divided by the
/// element count under Reduction::Mean. Throws ArgumentError on a shape
/// mismatch.
ProximityTerms proximityLoss(const torch::Tensor& x, const torch::Tensor& xcf, Reduction reduction = Reduction::Mean);

/// Perceptual L1 summed over `layers` of `features`, plus image L1 and latent
/// L1. Throws ArgumentError on mismatched shapes, an empty layer set or an
/// unknown layer.
CycleTerms cycleLoss(const torch::Tensor& x, const torch::Tensor& xcyc, const torch::Tensor& z,
                     const torch::Tensor& zcyc, const ClassifierModel& features, std::span<const std::string> layers,
                     Reduction reduction = Reduction::Mean);

/// Batch mean of log(1 - D(x_cyc)) + log(1 - D(x_cf)) with clamped D.
torch::Tensor adversarialLoss(const DiscriminatorModel& discriminator, const torch::Tensor& xcf,
                              const torch::Tensor& xcyc);

/// Query images together with the latents they were obtained from.
struct QueryBatch {
  torch::Tensor images;   // (B, C, H, W)
  torch::Tensor latents;  // (B, D)
};

/// Full weighted objective for moving `query` to `targetClass` through
/// `forward`, with `backward` closing the cycle:
///   total = cls + alpha * prx + beta * cyc + gamma * adv.
ObjectiveTerms counterfactualObjective(const QueryBatch& query, int64_t targetClass, const TransformNetwork& forward,
                                       const TransformNetwork& backward, const ModelSet& models,
                                       const LossWeights& weights, int64_t steps);

}  // namespace latentcf
