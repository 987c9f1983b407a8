#include "latentcf/objective.hpp"

#include <algorithm>
#include <cmath>

#include "latentcf/errors.hpp"

namespace latentcf {
namespace {

void requireSameShape(const torch::Tensor& a, const torch::Tensor& b, const char* what) {
  if (a.sizes() != b.sizes()) throw ArgumentError(std::string(what) + ": shape mismatch");
}

double scalar(const torch::Tensor& t) { return t.defined() ? t.item<double>() : 0.0; }

torch::Tensor toDouble(const torch::Tensor& t) { return t.to(torch::kFloat64); }

}  // namespace

std::string toString(Reduction r) { return r == Reduction::Mean ? "mean" : "sum"; }

Reduction reductionFrom(const std::string& name) {
  if (name == "mean") return Reduction::Mean;
  if (name == "sum") return Reduction::Sum;
  throw ArgumentError("unknown reduction '" + name + "'");
}

void LossWeights::validate() const {
  for (double w : {alpha, beta, gamma}) {
    if (!std::isfinite(w) || w < 0.0) throw ArgumentError("loss weights must be finite and non-negative");
  }
}

nlohmann::json LossBreakdown::toJson() const {
  return {{"cls", cls},
          {"prx", prx},
          {"cyc", cyc},
          {"adv", adv},
          {"total", total},
          {"prx_l1", prxL1},
          {"prx_entropy", prxEntropy},
          {"prx_smoothness", prxSmoothness},
          {"cyc_perceptual", cycPerceptual},
          {"cyc_image", cycImage},
          {"cyc_latent", cycLatent}};
}

LossBreakdown LossBreakdown::fromJson(const nlohmann::json& j) {
  LossBreakdown b;
  b.cls = j.at("cls").get<double>();
  b.prx = j.at("prx").get<double>();
  b.cyc = j.at("cyc").get<double>();
  b.adv = j.at("adv").get<double>();
  b.total = j.at("total").get<double>();
  b.prxL1 = j.at("prx_l1").get<double>();
  b.prxEntropy = j.at("prx_entropy").get<double>();
  b.prxSmoothness = j.at("prx_smoothness").get<double>();
  b.cycPerceptual = j.at("cyc_perceptual").get<double>();
  b.cycImage = j.at("cyc_image").get<double>();
  b.cycLatent = j.at("cyc_latent").get<double>();
  return b;
}

LossBreakdown ObjectiveTerms::breakdown() const {
  LossBreakdown b;
  b.cls = scalar(cls);
  b.prx = scalar(prx.value);
  b.cyc = scalar(cyc.value);
  b.adv = scalar(adv);
  b.total = scalar(total);
  b.prxL1 = scalar(prx.l1);
  b.prxEntropy = scalar(prx.entropy);
  b.prxSmoothness = scalar(prx.smoothness);
  b.cycPerceptual = scalar(cyc.perceptual);
  b.cycImage = scalar(cyc.image);
  b.cycLatent = scalar(cyc.latent);
  return b;
}

torch::Tensor l1Distance(const torch::Tensor& a, const torch::Tensor& b, Reduction reduction) {
  requireSameShape(a, b, "l1 distance");
  auto perSample = (a - b).abs().flatten(1);
  return (reduction == Reduction::Mean ? perSample.mean(1) : perSample.sum(1)).mean();
}

torch::Tensor classificationLoss(const torch::Tensor& probs, int64_t targetClass) {
  if (probs.dim() != 2) throw ArgumentError("classification loss expects (B, K) probabilities");
  if (targetClass < 0 || targetClass >= probs.size(1)) throw ArgumentError("target class outside [0, K)");
  return -torch::log(probs.select(1, targetClass).clamp(kLogClamp, 1.0)).mean();
}

torch::Tensor normalizedDifference(const torch::Tensor& x, const torch::Tensor& xcf) {
  requireSameShape(x, xcf, "difference map");
  auto diff = (x - xcf).abs();
  const auto batch = diff.size(0);
  auto flat = diff.flatten(1);
  auto lo = std::get<0>(flat.min(1)).view({batch, 1, 1, 1});
  auto hi = std::get<0>(flat.max(1)).view({batch, 1, 1, 1});
  auto range = hi - lo;
  auto scaled = (diff - lo) / range.clamp_min(1e-30);
  return torch::where(range.gt(0.0), scaled, diff);
}

ProximityTerms proximityLoss(const torch::Tensor& x, const torch::Tensor& xcf, Reduction reduction) {
  requireSameShape(x, xcf, "proximity loss");
  if (x.dim() != 4) throw ArgumentError("proximity loss expects (B, C, H, W) images");
  ProximityTerms t;
  t.l1 = l1Distance(x, xcf, reduction);

  auto m = normalizedDifference(x, xcf);
  auto ent = -m * torch::log(m.clamp_min(kLogClamp)) - (1.0 - m) * torch::log((1.0 - m).clamp_min(kLogClamp));
  t.entropy = ent.flatten(1).mean(1).mean();

  auto diff = (x - xcf).abs();
  auto dh = (diff.slice(2, 1) - diff.slice(2, 0, -1)).abs().flatten(1).sum(1);
  auto dw = (diff.slice(3, 1) - diff.slice(3, 0, -1)).abs().flatten(1).sum(1);
  t.smoothness = (dh + dw).mean();
  if (reduction == Reduction::Mean) t.smoothness = t.smoothness / static_cast<double>(x[0].numel());

  t.value = t.l1 + t.entropy + t.smoothness;
  return t;
}

CycleTerms cycleLoss(const torch::Tensor& x, const torch::Tensor& xcyc, const torch::Tensor& z,
                     const torch::Tensor& zcyc, const ClassifierModel& features, std::span<const std::string> layers,
                     Reduction reduction) {
  requireSameShape(x, xcyc, "cycle loss images");
  requireSameShape(z, zcyc, "cycle loss latents");
  if (layers.empty()) throw ArgumentError("cycle loss needs at least one feature layer");
  const auto known = features.featureLayers();
  for (const auto& layer : layers) {
    if (std::find(known.begin(), known.end(), layer) == known.end()) {
      throw ArgumentError("unknown feature layer '" + layer + "'");
    }
  }

  CycleTerms t;
  auto cycFeatures = features.features(xcyc, layers);
  std::vector<torch::Tensor> queryFeatures;
  if (x.requires_grad()) {
    queryFeatures = features.features(x, layers);
  } else {
    torch::NoGradGuard noGrad;
    queryFeatures = features.features(x, layers);
  }
  t.perceptual = torch::zeros({}, x.options());
  for (std::size_t i = 0; i < cycFeatures.size(); ++i) {
    t.perceptual = t.perceptual + l1Distance(cycFeatures[i], queryFeatures[i], reduction);
  }
  t.image = l1Distance(xcyc, x, reduction);
  t.latent = l1Distance(z, zcyc, reduction);
  t.value = t.perceptual + t.image + t.latent;
  return t;
}

torch::Tensor adversarialLoss(const DiscriminatorModel& discriminator, const torch::Tensor& xcf,
                              const torch::Tensor& xcyc) {
  auto dCyc = discriminator.scoreReal(xcyc);
  auto dCf = discriminator.scoreReal(xcf);
  return (torch::log(1.0 - dCyc) + torch::log(1.0 - dCf)).mean();
}

ObjectiveTerms counterfactualObjective(const QueryBatch& query, int64_t targetClass, const TransformNetwork& forward,
                                       const TransformNetwork& backward, const ModelSet& models,
                                       const LossWeights& weights, int64_t steps) {
  weights.validate();
  if (steps < 0) throw ArgumentError("step count must be non-negative");
  if (query.images.size(0) != query.latents.size(0)) throw ArgumentError("query images and latents differ in batch");
  const auto& generator = *models.generator;

  ObjectiveTerms t;
  t.cfLatent = forward.applyN(query.latents, steps);
  t.counterfactual = generator.generate(t.cfLatent);
  t.cycledLatent = backward.applyN(t.cfLatent, steps);
  t.cycled = generator.generate(t.cycledLatent);

  t.cls = classificationLoss(models.classifier->probabilities(t.counterfactual), targetClass);
  t.prx = proximityLoss(query.images, t.counterfactual, weights.reduction);
  t.cyc = cycleLoss(query.images, t.cycled, query.latents, t.cycledLatent, models.perceptualNetwork(),
                    models.perceptualLayers, weights.reduction);
  t.adv = adversarialLoss(*models.discriminator, t.counterfactual, t.cycled);

  // The weighted sum is formed in double so the recorded total recomposes
  // exactly from the recorded terms.
  t.total = toDouble(t.cls) + weights.alpha * toDouble(t.prx.value) + weights.beta * toDouble(t.cyc.value) +
            weights.gamma * toDouble(t.adv);
  return t;
}

}  // namespace latentcf
