#pragma once

#include <torch/torch.h>

#include <filesystem>
#include <functional>
#include <map>
#include <memory>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "json.hpp"
#include "latentcf/models.hpp"
#include "latentcf/objective.hpp"
#include "latentcf/transform.hpp"
#include "latentcf/types.hpp"

namespace latentcf {

enum class LatentSource { Encoder, RejectionSampling };
enum class DiscriminatorMode { Frozen, CoTrain };

struct TrainConfig {
  ClassPair pair{3, 8};
  int64_t batchSize = 64;
  int64_t steps = 3000;
  std::string optimizer = "adam";  // "adam" or "sgd"
  double learningRate = 2e-4;
  LossWeights weights;
  int64_t n = 1;
  LatentSource latentSource = LatentSource::Encoder;
  DiscriminatorMode discriminatorMode = DiscriminatorMode::Frozen;
  double discriminatorRate = 2e-4;
  uint64_t seed = 0;
  int64_t hidden = 0;  // 0 selects 4 * latent dim
  bool residual = false;
  int64_t checkpointEvery = 500;
  /// Overrides the model set's perceptual layers when nonempty.
  std::vector<std::string> perceptualLayers;

  /// Throws ArgumentError on c == c', a zero step budget, n < 1, ...
  void validate() const;
  int64_t hiddenFor(int64_t latentDim) const { return hidden > 0 ? hidden : 4 * latentDim; }

  nlohmann::json toJson() const;
  static TrainConfig fromJson(const nlohmann::json& j);
  /// SHA-256 of the canonical JSON form.
  std::string hash() const;
  bool operator==(const TrainConfig&) const = default;
};

/// Supplies query batches of one class together with their latents.
class BatchSource {
 public:
  virtual ~BatchSource() = default;
  virtual QueryBatch next(int64_t classId, int64_t batchSize) = 0;
};

/// Draws real images of a class uniformly at random and encodes them.
class EncodedImageSource final : public BatchSource {
 public:
  /// `imagesByClass` maps a class id to a (N, C, H, W) tensor of its images.
  EncodedImageSource(std::shared_ptr<const EncoderModel> encoder, std::map<int64_t, torch::Tensor> imagesByClass,
                     uint64_t seed);

  QueryBatch next(int64_t classId, int64_t batchSize) override;

 private:
  std::shared_ptr<const EncoderModel> encoder_;
  std::map<int64_t, torch::Tensor> images_;
  at::Generator gen_;
};

/// Rejection-samples latents the classifier assigns to the class and decodes
/// them; no real images are needed.
class RejectionSamplingSource final : public BatchSource {
 public:
  RejectionSamplingSource(std::shared_ptr<const ClassifierModel> classifier,
                          std::shared_ptr<const GeneratorModel> generator, uint64_t seed, int64_t drawsPerLatent = 200);

  QueryBatch next(int64_t classId, int64_t batchSize) override;

 private:
  std::shared_ptr<const ClassifierModel> classifier_;
  std::shared_ptr<const GeneratorModel> generator_;
  uint64_t seed_;
  uint64_t calls_ = 0;
  int64_t drawsPerLatent_;
};

/// Builds the batch source a config asks for. The encoder source needs
/// `imagesByClass` for both classes of the pair.
std::unique_ptr<BatchSource> makeBatchSource(const TrainConfig& config, const ModelSet& models,
                                             std::map<int64_t, torch::Tensor> imagesByClass);

struct StepResult {
  LossBreakdown forward;   // query class -> target class, through (g, h)
  LossBreakdown backward;  // target class -> query class, through (h, g)
  std::optional<double> discriminatorLoss;
};

/// One plain binary cross-entropy SGD step on the discriminator with `real`
/// labelled 1 and `fakes` labelled 0. Returns the loss before the update.
/// Throws StateError unless `mode` is CoTrain.
double updateDiscriminator(DiscriminatorModel& discriminator, const torch::Tensor& real, const torch::Tensor& fakes,
                           double rate, DiscriminatorMode mode);

/// Owns the two transforms and their optimizer for one class pair.
class TransformTrainer {
 public:
  /// Initializes g and h from the config seed.
  TransformTrainer(TrainConfig config, ModelSet models);
  TransformTrainer(TrainConfig config, ModelSet models, TransformNetwork forward, TransformNetwork backward);

  /// Evaluates L(x, c', g, h) + L(y, c, h, g), backpropagates and applies one
  /// optimizer update to g and h jointly. `x` holds query-class samples and
  /// `y` target-class samples. Throws DivergenceError on a non-finite total.
  StepResult step(const QueryBatch& x, const QueryBatch& y);

  /// Loss of both directions on fixed batches, without updating anything.
  std::pair<LossBreakdown, LossBreakdown> evaluate(const QueryBatch& x, const QueryBatch& y) const;

  const TransformNetwork& forward() const { return forward_; }
  const TransformNetwork& backward() const { return backward_; }
  const TrainConfig& config() const { return config_; }
  const ModelSet& models() const { return models_; }
  int64_t stepIndex() const { return step_; }

 private:
  void setup();

  TrainConfig config_;
  ModelSet models_;
  TransformNetwork forward_;
  TransformNetwork backward_;
  std::unique_ptr<torch::optim::Optimizer> optimizer_;
  int64_t step_ = 0;
};

struct RunningStats {
  int64_t count = 0;
  double meanTotal = 0.0;
  double lastTotal = 0.0;

  void add(double total);
  nlohmann::json toJson() const;
  static RunningStats fromJson(const nlohmann::json& j);
};

struct Checkpoint {
  TransformNetwork forward;
  TransformNetwork backward;
  TrainConfig config;
  int64_t step = 0;
  RunningStats stats;

  /// Writes `dir/forward.bin`, `dir/backward.bin` and `dir/state.json`.
  void save(const std::filesystem::path& dir) const;
  static Checkpoint load(const std::filesystem::path& dir);
};

/// "step-0500"
std::string checkpointDirName(int64_t step);

/// Resolves `runDir/latest` (or a checkpoint directory given directly).
Checkpoint loadLatestCheckpoint(const std::filesystem::path& runDir);

using StepCallback = std::function<void(int64_t step, const StepResult&)>;

/// Runs the full step budget. Layout under `runDir`:
///   config.json            config snapshot
///   train_log.jsonl        one record per step
///   step-NNNN/             periodic and final checkpoints
///   latest                 name of the newest checkpoint directory
Checkpoint trainTransforms(const TrainConfig& config, const ModelSet& models, BatchSource& source,
                           const std::filesystem::path& runDir, const StepCallback& onStep = {});

}  // namespace latentcf
