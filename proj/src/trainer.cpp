#include "latentcf/trainer.hpp"

#include <ATen/CPUGeneratorImpl.h>

#include <cmath>
#include <fstream>
#include <iomanip>
#include <sstream>

#include "latentcf/errors.hpp"
#include "latentcf/hashing.hpp"
#include "latentcf/latent_sampling.hpp"

namespace latentcf {
namespace fs = std::filesystem;
using nlohmann::json;

namespace {

std::string toString(LatentSource source) {
  return source == LatentSource::Encoder ? "encoder" : "rejection-sampling";
}

LatentSource latentSourceFrom(const std::string& name) {
  if (name == "encoder") return LatentSource::Encoder;
  if (name == "rejection-sampling") return LatentSource::RejectionSampling;
  throw ArgumentError("unknown latent source '" + name + "'");
}

std::string toString(DiscriminatorMode mode) { return mode == DiscriminatorMode::Frozen ? "frozen" : "co-train"; }

DiscriminatorMode discriminatorModeFrom(const std::string& name) {
  if (name == "frozen") return DiscriminatorMode::Frozen;
  if (name == "co-train") return DiscriminatorMode::CoTrain;
  throw ArgumentError("unknown discriminator mode '" + name + "'");
}

void writeText(const fs::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot write " + path.string());
  out << text;
  if (!out) throw IoError("failed writing " + path.string());
}

std::string readText(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot read " + path.string());
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

}  // namespace

void TrainConfig::validate() const {
  if (pair.query == pair.target) throw ArgumentError("query and target class must differ");
  if (pair.query < 0 || pair.target < 0) throw ArgumentError("class ids must be non-negative");
  if (batchSize < 1) throw ArgumentError("batch size must be positive");
  if (steps < 1) throw ArgumentError("step budget must be at least 1");
  if (n < 1) throw ArgumentError("training requires n >= 1");
  if (optimizer != "adam" && optimizer != "sgd") throw ArgumentError("unknown optimizer '" + optimizer + "'");
  if (!std::isfinite(learningRate) || learningRate < 0.0) throw ArgumentError("learning rate must be >= 0");
  if (!std::isfinite(discriminatorRate) || discriminatorRate < 0.0) {
    throw ArgumentError("discriminator rate must be >= 0");
  }
  if (hidden < 0) throw ArgumentError("hidden width must be >= 0");
  if (checkpointEvery < 1) throw ArgumentError("checkpoint interval must be positive");
  weights.validate();
}

json TrainConfig::toJson() const {
  return {{"pair", pair.key()},
          {"batch_size", batchSize},
          {"steps", steps},
          {"optimizer", optimizer},
          {"learning_rate", learningRate},
          {"weights",
           {{"alpha", weights.alpha},
            {"beta", weights.beta},
            {"gamma", weights.gamma},
            {"reduction", toString(weights.reduction)}}},
          {"n", n},
          {"latent_source", toString(latentSource)},
          {"discriminator_mode", toString(discriminatorMode)},
          {"discriminator_rate", discriminatorRate},
          {"seed", seed},
          {"hidden", hidden},
          {"residual", residual},
          {"checkpoint_every", checkpointEvery},
          {"perceptual_layers", perceptualLayers}};
}

TrainConfig TrainConfig::fromJson(const json& j) {
  TrainConfig c;
  if (j.contains("pair")) c.pair = ClassPair::parse(j.at("pair").get<std::string>());
  c.batchSize = j.value("batch_size", c.batchSize);
  c.steps = j.value("steps", c.steps);
  c.optimizer = j.value("optimizer", c.optimizer);
  c.learningRate = j.value("learning_rate", c.learningRate);
  if (j.contains("weights")) {
    const auto& w = j.at("weights");
    c.weights.alpha = w.value("alpha", c.weights.alpha);
    c.weights.beta = w.value("beta", c.weights.beta);
    c.weights.gamma = w.value("gamma", c.weights.gamma);
    if (w.contains("reduction")) c.weights.reduction = reductionFrom(w.at("reduction").get<std::string>());
  }
  c.n = j.value("n", c.n);
  if (j.contains("latent_source")) c.latentSource = latentSourceFrom(j.at("latent_source").get<std::string>());
  if (j.contains("discriminator_mode")) {
    c.discriminatorMode = discriminatorModeFrom(j.at("discriminator_mode").get<std::string>());
  }
  c.discriminatorRate = j.value("discriminator_rate", c.discriminatorRate);
  c.seed = j.value("seed", c.seed);
  c.hidden = j.value("hidden", c.hidden);
  c.residual = j.value("residual", c.residual);
  c.checkpointEvery = j.value("checkpoint_every", c.checkpointEvery);
  c.perceptualLayers = j.value("perceptual_layers", c.perceptualLayers);
  return c;
}

std::string TrainConfig::hash() const { return sha256Hex(toJson().dump()); }

EncodedImageSource::EncodedImageSource(std::shared_ptr<const EncoderModel> encoder,
                                       std::map<int64_t, torch::Tensor> imagesByClass, uint64_t seed)
    : encoder_(std::move(encoder)), images_(std::move(imagesByClass)), gen_(at::detail::createCPUGenerator(seed)) {
  if (!encoder_) throw ConfigurationError("encoder batch source needs an encoder");
}

QueryBatch EncodedImageSource::next(int64_t classId, int64_t batchSize) {
  auto it = images_.find(classId);
  if (it == images_.end() || it->second.size(0) == 0) {
    throw ConfigurationError("no images available for class " + std::to_string(classId));
  }
  auto index = torch::randint(it->second.size(0), {batchSize}, gen_, torch::TensorOptions().dtype(torch::kLong));
  auto images = it->second.index_select(0, index);
  torch::NoGradGuard noGrad;
  return {images, encoder_->encode(images)};
}

RejectionSamplingSource::RejectionSamplingSource(std::shared_ptr<const ClassifierModel> classifier,
                                                 std::shared_ptr<const GeneratorModel> generator, uint64_t seed,
                                                 int64_t drawsPerLatent)
    : classifier_(std::move(classifier)), generator_(std::move(generator)), seed_(seed),
      drawsPerLatent_(drawsPerLatent) {}

QueryBatch RejectionSamplingSource::next(int64_t classId, int64_t batchSize) {
  const auto callSeed = seed_ * 1000003ULL + calls_++;
  auto sample = rejectionSampleClass(*classifier_, *generator_, classId, batchSize, batchSize * drawsPerLatent_,
                                     callSeed);
  torch::NoGradGuard noGrad;
  auto latents = sample.latents.values();
  return {generator_->generate(latents), latents};
}

std::unique_ptr<BatchSource> makeBatchSource(const TrainConfig& config, const ModelSet& models,
                                             std::map<int64_t, torch::Tensor> imagesByClass) {
  const auto seed = config.seed + 2;
  if (config.latentSource == LatentSource::Encoder) {
    for (auto cls : {config.pair.query, config.pair.target}) {
      if (!imagesByClass.count(cls)) {
        throw ConfigurationError("encoder source has no images for class " + std::to_string(cls));
      }
    }
    return std::make_unique<EncodedImageSource>(models.encoder, std::move(imagesByClass), seed);
  }
  return std::make_unique<RejectionSamplingSource>(models.classifier, models.generator, seed);
}

double updateDiscriminator(DiscriminatorModel& discriminator, const torch::Tensor& real, const torch::Tensor& fakes,
                           double rate, DiscriminatorMode mode) {
  if (mode != DiscriminatorMode::CoTrain) {
    throw StateError("discriminator updates are only allowed in co-train mode");
  }
  if (!(rate >= 0.0)) throw ArgumentError("discriminator rate must be >= 0");
  auto params = discriminator.parameters();
  std::vector<torch::Tensor> trainable;
  for (auto& p : params) {
    if (p.requires_grad()) trainable.push_back(p);
  }
  if (trainable.empty()) throw StateError("discriminator has no trainable parameters");

  auto realLogits = discriminator.logits(real.detach()).reshape({-1});
  auto fakeLogits = discriminator.logits(fakes.detach()).reshape({-1});
  auto loss = torch::binary_cross_entropy_with_logits(realLogits, torch::ones_like(realLogits)) +
              torch::binary_cross_entropy_with_logits(fakeLogits, torch::zeros_like(fakeLogits));
  auto grads = torch::autograd::grad({loss}, trainable);
  const double value = loss.item<double>();
  if (rate > 0.0) {
    torch::NoGradGuard noGrad;
    for (std::size_t i = 0; i < trainable.size(); ++i) trainable[i].sub_(grads[i] * rate);
  }
  return value;
}

TransformTrainer::TransformTrainer(TrainConfig config, ModelSet models)
    : config_(std::move(config)), models_(std::move(models)) {
  config_.validate();
  if (!models_.generator) throw ConfigurationError("model set has no generator");
  const auto dim = models_.generator->latentDim();
  const auto hidden = config_.hiddenFor(dim);
  forward_ = TransformNetwork::initialize(dim, hidden, config_.seed, Direction::Forward, config_.residual);
  backward_ = TransformNetwork::initialize(dim, hidden, config_.seed + 1, Direction::Backward, config_.residual);
  setup();
}

TransformTrainer::TransformTrainer(TrainConfig config, ModelSet models, TransformNetwork forward,
                                   TransformNetwork backward)
    : config_(std::move(config)), models_(std::move(models)), forward_(std::move(forward)),
      backward_(std::move(backward)) {
  config_.validate();
  setup();
}

void TransformTrainer::setup() {
  if (!config_.perceptualLayers.empty()) models_.perceptualLayers = config_.perceptualLayers;
  models_.validate();
  if (forward_.dim() != models_.generator->latentDim() || backward_.dim() != models_.generator->latentDim()) {
    throw ArgumentError("transform dim does not match generator latent dim");
  }
  const auto numClasses = models_.classifier->numClasses();
  if (config_.pair.query >= numClasses || config_.pair.target >= numClasses) {
    throw ArgumentError("class pair outside the classifier's label range");
  }
  forward_.setRequiresGrad(true);
  backward_.setRequiresGrad(true);
  std::vector<torch::Tensor> params = forward_.parameters();
  for (auto& p : backward_.parameters()) params.push_back(p);
  if (config_.optimizer == "adam") {
    optimizer_ = std::make_unique<torch::optim::Adam>(params, torch::optim::AdamOptions(config_.learningRate));
  } else {
    optimizer_ = std::make_unique<torch::optim::SGD>(params, torch::optim::SGDOptions(config_.learningRate));
  }
}

StepResult TransformTrainer::step(const QueryBatch& x, const QueryBatch& y) {
  if (x.images.size(0) == 0 || y.images.size(0) == 0) throw ArgumentError("training batches must be nonempty");
  optimizer_->zero_grad();
  auto there = counterfactualObjective(x, config_.pair.target, forward_, backward_, models_, config_.weights, config_.n);
  auto back = counterfactualObjective(y, config_.pair.query, backward_, forward_, models_, config_.weights, config_.n);
  auto total = there.total + back.total;
  StepResult result{there.breakdown(), back.breakdown(), std::nullopt};
  if (!std::isfinite(total.item<double>())) {
    throw DivergenceError(step_ + 1, json{{"forward", result.forward.toJson()}, {"backward", result.backward.toJson()}}.dump());
  }
  total.backward();
  optimizer_->step();

  if (config_.discriminatorMode == DiscriminatorMode::CoTrain) {
    auto real = torch::cat({x.images, y.images});
    auto fakes = torch::cat({there.counterfactual, there.cycled, back.counterfactual, back.cycled}).detach();
    result.discriminatorLoss =
        updateDiscriminator(*models_.discriminator, real, fakes, config_.discriminatorRate, config_.discriminatorMode);
  }
  ++step_;
  return result;
}

std::pair<LossBreakdown, LossBreakdown> TransformTrainer::evaluate(const QueryBatch& x, const QueryBatch& y) const {
  torch::NoGradGuard noGrad;
  auto there = counterfactualObjective(x, config_.pair.target, forward_, backward_, models_, config_.weights, config_.n);
  auto back = counterfactualObjective(y, config_.pair.query, backward_, forward_, models_, config_.weights, config_.n);
  return {there.breakdown(), back.breakdown()};
}

void RunningStats::add(double total) {
  ++count;
  meanTotal += (total - meanTotal) / static_cast<double>(count);
  lastTotal = total;
}

json RunningStats::toJson() const { return {{"count", count}, {"mean_total", meanTotal}, {"last_total", lastTotal}}; }

RunningStats RunningStats::fromJson(const json& j) {
  RunningStats s;
  s.count = j.value("count", int64_t{0});
  s.meanTotal = j.value("mean_total", 0.0);
  s.lastTotal = j.value("last_total", 0.0);
  return s;
}

void Checkpoint::save(const fs::path& dir) const {
  fs::create_directories(dir);
  forward.save(dir / "forward.bin", config.n);
  backward.save(dir / "backward.bin", config.n);
  json state{{"config", config.toJson()},
             {"step", step},
             {"stats", stats.toJson()},
             {"forward_sha256", forward.digest()},
             {"backward_sha256", backward.digest()}};
  writeText(dir / "state.json", state.dump(2));
}

Checkpoint Checkpoint::load(const fs::path& dir) {
  json state;
  try {
    state = json::parse(readText(dir / "state.json"));
  } catch (const json::exception& e) {
    throw IoError("malformed checkpoint state in " + dir.string() + ": " + e.what());
  }
  Checkpoint c;
  c.forward = TransformNetwork::load(dir / "forward.bin");
  c.backward = TransformNetwork::load(dir / "backward.bin");
  c.config = TrainConfig::fromJson(state.at("config"));
  c.step = state.at("step").get<int64_t>();
  c.stats = RunningStats::fromJson(state.at("stats"));
  if (state.contains("forward_sha256") && state.at("forward_sha256") != c.forward.digest()) {
    throw IoError("forward transform digest mismatch in " + dir.string());
  }
  if (state.contains("backward_sha256") && state.at("backward_sha256") != c.backward.digest()) {
    throw IoError("backward transform digest mismatch in " + dir.string());
  }
  return c;
}

std::string checkpointDirName(int64_t step) {
  std::ostringstream name;
  name << "step-" << std::setw(4) << std::setfill('0') << step;
  return name.str();
}

Checkpoint loadLatestCheckpoint(const fs::path& runDir) {
  if (fs::exists(runDir / "state.json")) return Checkpoint::load(runDir);
  const auto pointer = runDir / "latest";
  if (!fs::exists(pointer)) throw NotFoundError("no checkpoint found under " + runDir.string());
  auto name = readText(pointer);
  while (!name.empty() && (name.back() == '\n' || name.back() == '\r')) name.pop_back();
  return Checkpoint::load(runDir / name);
}

Checkpoint trainTransforms(const TrainConfig& config, const ModelSet& models, BatchSource& source,
                           const fs::path& runDir, const StepCallback& onStep) {
  TransformTrainer trainer(config, models);
  fs::create_directories(runDir);
  writeText(runDir / "config.json", config.toJson().dump(2));
  std::ofstream log(runDir / "train_log.jsonl", std::ios::trunc);
  if (!log) throw IoError("cannot write training log in " + runDir.string());

  Checkpoint checkpoint;
  checkpoint.config = config;
  auto persist = [&](int64_t step) {
    checkpoint.forward = trainer.forward();
    checkpoint.backward = trainer.backward();
    checkpoint.step = step;
    const auto name = checkpointDirName(step);
    checkpoint.save(runDir / name);
    writeText(runDir / "latest.tmp", name + "\n");
    fs::rename(runDir / "latest.tmp", runDir / "latest");
  };

  for (int64_t step = 1; step <= config.steps; ++step) {
    auto x = source.next(config.pair.query, config.batchSize);
    auto y = source.next(config.pair.target, config.batchSize);
    auto result = trainer.step(x, y);
    checkpoint.stats.add(result.forward.total + result.backward.total);
    json record{{"step", step}, {"forward", result.forward.toJson()}, {"backward", result.backward.toJson()}};
    if (result.discriminatorLoss) record["discriminator_loss"] = *result.discriminatorLoss;
    log << record.dump() << '\n';
    if (onStep) onStep(step, result);
    if (step % config.checkpointEvery == 0 || step == config.steps) {
      log.flush();
      persist(step);
    }
  }
  return Checkpoint{trainer.forward().clone(), trainer.backward().clone(), config, config.steps, checkpoint.stats};
}

}  // namespace latentcf
