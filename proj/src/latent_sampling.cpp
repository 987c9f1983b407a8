#include "latentcf/latent_sampling.hpp"

#include <ATen/CPUGeneratorImpl.h>

#include "latentcf/errors.hpp"

namespace latentcf {
namespace {

torch::Tensor drawNormal(at::Generator& gen, int64_t count, int64_t dim, std::optional<double> truncation,
                         torch::Dtype dtype) {
  auto values = torch::randn({count, dim}, gen, torch::TensorOptions().dtype(dtype));
  if (!truncation) return values;
  const double bound = *truncation;
  for (;;) {
    auto outside = values.abs().gt(bound);
    const auto bad = outside.sum().item<int64_t>();
    if (bad == 0) break;
    values.masked_scatter_(outside, torch::randn({bad}, gen, torch::TensorOptions().dtype(dtype)));
  }
  return values;
}

void checkTruncation(const std::optional<double>& truncation) {
  if (truncation && !(*truncation > 0.0)) throw ArgumentError("truncation must be positive");
}

}  // namespace

LatentBatch sampleLatents(int64_t count, int64_t dim, uint64_t seed, std::optional<double> truncation,
                          torch::Dtype dtype) {
  if (count < 1) throw ArgumentError("latent count must be positive");
  if (dim < 1) throw ArgumentError("latent dim must be positive");
  checkTruncation(truncation);
  auto gen = at::detail::createCPUGenerator(seed);
  return LatentBatch(drawNormal(gen, count, dim, truncation, dtype));
}

RejectionSample rejectionSampleClass(const ClassifierModel& classifier, const GeneratorModel& generator,
                                     int64_t targetClass, int64_t count, int64_t maxDraws, uint64_t seed,
                                     const RejectionOptions& options) {
  if (targetClass < 0 || targetClass >= classifier.numClasses()) {
    throw ArgumentError("target class " + std::to_string(targetClass) + " outside [0, K)");
  }
  if (count < 1) throw ArgumentError("rejection sampling count must be positive");
  if (maxDraws < count) throw ArgumentError("max_draws must be at least count");
  if (options.chunk < 1) throw ArgumentError("rejection chunk must be positive");
  checkTruncation(options.truncation);

  torch::NoGradGuard noGrad;
  auto gen = at::detail::createCPUGenerator(seed);
  const auto dim = generator.latentDim();
  std::vector<torch::Tensor> accepted;
  int64_t acceptedCount = 0;
  int64_t draws = 0;
  int64_t hits = 0;

  while (acceptedCount < count) {
    if (draws >= maxDraws) throw BudgetExhaustedError(acceptedCount, count, draws);
    const auto n = std::min(options.chunk, maxDraws - draws);
    auto z = drawNormal(gen, n, dim, options.truncation, torch::kFloat32);
    draws += n;
    auto keep = classifier.predict(generator.generate(z)).eq(targetClass);
    auto picked = z.index({keep});
    hits += picked.size(0);
    if (picked.size(0) == 0) continue;
    accepted.push_back(picked);
    acceptedCount += picked.size(0);

    if (acceptedCount >= count) {
      // Re-check the final batch as it will be returned; drop anything whose
      // prediction flips under the different batch composition.
      auto all = torch::cat(accepted).slice(0, 0, count);
      auto ok = classifier.predict(generator.generate(all)).eq(targetClass);
      all = all.index({ok});
      accepted = {all};
      acceptedCount = all.size(0);
    }
  }
  RejectionSample result;
  result.latents = LatentBatch(accepted.front());
  result.draws = draws;
  result.acceptanceRate = static_cast<double>(hits) / static_cast<double>(draws);
  return result;
}

InversionResult invertImages(const GeneratorModel& generator, const ImageBatch& images, int64_t budget,
                             double stepSize, uint64_t seed, const InversionOptions& options) {
  if (images.shape() != generator.imageShape()) {
    throw ArgumentError("image shape does not match the generator output shape");
  }
  if (budget < 0) throw ArgumentError("inversion budget must be non-negative");
  if (options.restarts < 1) throw ArgumentError("inversion restarts must be at least 1");
  const auto target = images.values().detach();
  const auto batch = images.size();
  auto perImageLoss = [&](const torch::Tensor& z) {
    return (generator.generate(z) - target).pow(2).flatten(1).mean(1);
  };

  torch::Tensor bestLatents;
  torch::Tensor bestLoss;
  for (int64_t restart = 0; restart < options.restarts; ++restart) {
    auto start = sampleLatents(batch, generator.latentDim(), seed + static_cast<uint64_t>(restart),
                               options.initTruncation, target.scalar_type());
    auto z = start.values().clone().set_requires_grad(true);
    torch::optim::Adam optimizer({z}, torch::optim::AdamOptions(stepSize));
    for (int64_t it = 0; it < budget; ++it) {
      optimizer.zero_grad();
      auto loss = perImageLoss(z).sum();
      if (!std::isfinite(loss.item<double>())) throw DivergenceError(it, "inversion loss");
      loss.backward();
      optimizer.step();
    }
    torch::NoGradGuard noGrad;
    auto finalLoss = perImageLoss(z);
    if (!torch::isfinite(finalLoss).all().item<bool>()) throw DivergenceError(budget, "inversion loss");
    auto latents = z.detach();
    if (!bestLatents.defined()) {
      bestLatents = latents.clone();
      bestLoss = finalLoss.clone();
    } else {
      auto better = finalLoss.lt(bestLoss);
      bestLatents.index_put_({better}, latents.index({better}));
      bestLoss = torch::where(better, finalLoss, bestLoss);
    }
  }
  return {LatentBatch(bestLatents), bestLoss, budget};
}

}  // namespace latentcf
