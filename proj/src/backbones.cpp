#include "latentcf/backbones.hpp"

#include <ATen/CPUGeneratorImpl.h>

#include <chrono>
#include <sstream>

#include "latentcf/errors.hpp"

namespace latentcf {
namespace fs = std::filesystem;
namespace F = torch::nn::functional;
using nlohmann::json;

namespace {

constexpr int64_t kClassifierBatch = 128;
constexpr int64_t kEncoderBatch = 64;
constexpr int64_t kAutoencoderBatch = 128;
constexpr int64_t kRecalibrationBatches = 100;
constexpr int64_t kRecalibrationBatchSize = 256;

void say(const ProgressLog& log, const std::string& message) {
  if (log) log(message);
}

std::string fixed(double v, int digits = 4) {
  std::ostringstream s;
  s.precision(digits);
  s << std::fixed << v;
  return s.str();
}

Dataset limited(const Dataset& d, int64_t limit) {
  if (limit <= 0 || limit >= d.size()) return d;
  return {d.id, d.images.slice(0, 0, limit), d.labels.slice(0, 0, limit), d.numClasses};
}

std::vector<int64_t> shapeVector(const torch::Tensor& images) {
  return {images.size(1), images.size(2), images.size(3)};
}

ClassifierNet trainClassifierNet(const Dataset& train, int64_t hidden, int64_t epochs, uint64_t seed,
                                 const ProgressLog& log, const std::string& label) {
  torch::manual_seed(seed);
  auto gen = at::detail::createCPUGenerator(seed);
  ClassifierNet net(train.numClasses, hidden);
  torch::optim::Adam opt(net->parameters(), torch::optim::AdamOptions(1e-3));
  net->train();
  const auto n = train.size();
  for (int64_t epoch = 0; epoch < epochs; ++epoch) {
    auto perm = torch::randperm(n, gen, torch::kLong);
    double running = 0.0;
    int64_t batches = 0;
    for (int64_t start = 0; start < n; start += kClassifierBatch) {
      auto idx = perm.slice(0, start, std::min(n, start + kClassifierBatch));
      auto loss = F::cross_entropy(net->forward(train.images.index_select(0, idx)), train.labels.index_select(0, idx));
      opt.zero_grad();
      loss.backward();
      opt.step();
      running += loss.item<double>();
      ++batches;
    }
    say(log, label + " epoch " + std::to_string(epoch + 1) + "/" + std::to_string(epochs) +
                 " loss " + fixed(running / static_cast<double>(batches)));
  }
  net->eval();
  return net;
}

void recalibrateBatchNorm(GeneratorNet& net, int64_t latentDim, uint64_t seed) {
  auto gen = at::detail::createCPUGenerator(seed);
  for (auto* bn : {&net->bn0, &net->bn1}) {
    (*bn)->options.momentum(std::nullopt);
    (*bn)->reset_running_stats();
  }
  net->train();
  torch::NoGradGuard noGrad;
  for (int64_t i = 0; i < kRecalibrationBatches; ++i) {
    net->forward(torch::randn({kRecalibrationBatchSize, latentDim}, gen));
  }
  net->eval();
}

std::pair<GeneratorNet, DiscriminatorNet> trainGan(const BackboneOptions& o, const Dataset& train,
                                                   const ProgressLog& log) {
  torch::manual_seed(o.seed + 10);
  auto gen = at::detail::createCPUGenerator(o.seed + 10);
  GeneratorNet g(o.latentDim, o.ganWidth);
  DiscriminatorNet d(o.ganWidth);
  auto adam = torch::optim::AdamOptions(2e-4).betas({0.5, 0.999});
  torch::optim::Adam optG(g->parameters(), adam);
  torch::optim::Adam optD(d->parameters(), adam);
  g->train();
  d->train();
  const auto n = train.size();
  for (int64_t epoch = 0; epoch < o.ganEpochs; ++epoch) {
    auto perm = torch::randperm(n, gen, torch::kLong);
    double dSum = 0.0, gSum = 0.0;
    int64_t batches = 0;
    for (int64_t start = 0; start + o.ganBatch <= n; start += o.ganBatch) {
      auto real = train.images.index_select(0, perm.slice(0, start, start + o.ganBatch));
      auto z = torch::randn({o.ganBatch, o.latentDim}, gen);
      auto fake = g->forward(z);

      auto realLogits = d->forward(real);
      auto fakeLogits = d->forward(fake.detach());
      auto dLoss = F::binary_cross_entropy_with_logits(realLogits, torch::ones_like(realLogits)) +
                   F::binary_cross_entropy_with_logits(fakeLogits, torch::zeros_like(fakeLogits));
      optD.zero_grad();
      dLoss.backward();
      optD.step();

      auto genLogits = d->forward(fake);
      auto gLoss = F::binary_cross_entropy_with_logits(genLogits, torch::ones_like(genLogits));
      optG.zero_grad();
      gLoss.backward();
      optG.step();

      dSum += dLoss.item<double>();
      gSum += gLoss.item<double>();
      ++batches;
    }
    say(log, "gan epoch " + std::to_string(epoch + 1) + "/" + std::to_string(o.ganEpochs) + " d " +
                 fixed(dSum / static_cast<double>(batches)) + " g " + fixed(gSum / static_cast<double>(batches)));
  }
  recalibrateBatchNorm(g, o.latentDim, o.seed + 11);
  d->eval();
  return {g, d};
}

EncoderNet trainEncoder(const BackboneOptions& o, GeneratorNet& g, const Dataset& train, const ProgressLog& log) {
  torch::manual_seed(o.seed + 20);
  auto gen = at::detail::createCPUGenerator(o.seed + 20);
  for (auto& p : g->parameters()) p.set_requires_grad(false);
  g->eval();
  EncoderNet e(o.latentDim, o.encoderWidth);
  torch::optim::Adam opt(e->parameters(), torch::optim::AdamOptions(1e-3));
  e->train();
  double running = 0.0;
  for (int64_t step = 1; step <= o.encoderSteps; ++step) {
    auto z = torch::randn({kEncoderBatch, o.latentDim}, gen);
    torch::Tensor x;
    {
      torch::NoGradGuard noGrad;
      x = g->forward(z);
    }
    auto loss = F::mse_loss(e->forward(x), z);
    if (o.encoderImageWeight > 0.0) {
      auto idx = torch::randint(train.size(), {kEncoderBatch}, gen, torch::TensorOptions().dtype(torch::kLong));
      auto real = train.images.index_select(0, idx);
      loss = loss + o.encoderImageWeight * F::mse_loss(g->forward(e->forward(real)), real);
    }
    opt.zero_grad();
    loss.backward();
    opt.step();
    running += loss.item<double>();
    if (step % 1000 == 0 || step == o.encoderSteps) {
      say(log, "encoder step " + std::to_string(step) + " loss " + fixed(running / 1000.0));
      running = 0.0;
    }
  }
  e->eval();
  return e;
}

AutoencoderNet trainAutoencoder(const BackboneOptions& o, const torch::Tensor& images, int64_t epochs, uint64_t seed) {
  torch::manual_seed(seed);
  auto gen = at::detail::createCPUGenerator(seed);
  AutoencoderNet ae(images[0].numel(), o.aeHidden, o.aeCode);
  torch::optim::Adam opt(ae->parameters(), torch::optim::AdamOptions(1e-3));
  ae->train();
  const auto n = images.size(0);
  for (int64_t epoch = 0; epoch < epochs; ++epoch) {
    auto perm = torch::randperm(n, gen, torch::kLong);
    for (int64_t start = 0; start < n; start += kAutoencoderBatch) {
      auto x = images.index_select(0, perm.slice(0, start, std::min(n, start + kAutoencoderBatch)));
      auto loss = F::mse_loss(ae->forward(x), x);
      opt.zero_grad();
      loss.backward();
      opt.step();
    }
  }
  ae->eval();
  return ae;
}

double reconstructionMse(const torch::Tensor& images, const std::function<torch::Tensor(const torch::Tensor&)>& rec) {
  torch::NoGradGuard noGrad;
  double sum = 0.0;
  const auto n = images.size(0);
  for (int64_t start = 0; start < n; start += 500) {
    auto x = images.slice(0, start, std::min(n, start + 500));
    sum += (rec(x) - x).pow(2).sum().item<double>();
  }
  return sum / static_cast<double>(images.numel());
}

bool rolesPresent(const Manifest& m, const std::vector<std::string>& wanted) {
  for (const auto& role : wanted) {
    if (!m.has(role)) return false;
    try {
      m.verify(role);
    } catch (const Error&) {
      return false;
    }
  }
  return true;
}

}  // namespace

json BackboneOptions::toJson() const {
  return {{"dataset", dataset},
          {"seed", seed},
          {"latent_dim", latentDim},
          {"classifier_hidden", classifierHidden},
          {"classifier_epochs", classifierEpochs},
          {"accuracy_floor", accuracyFloor},
          {"gan_width", ganWidth},
          {"gan_epochs", ganEpochs},
          {"gan_batch", ganBatch},
          {"encoder_width", encoderWidth},
          {"encoder_steps", encoderSteps},
          {"encoder_image_weight", encoderImageWeight},
          {"ae_hidden", aeHidden},
          {"ae_code", aeCode},
          {"ae_epochs_full", aeEpochsFull},
          {"ae_epochs_class", aeEpochsClass},
          {"train_limit", trainLimit}};
}

BackboneOptions BackboneOptions::fromJson(const json& j) {
  BackboneOptions o;
  o.dataset = j.value("dataset", o.dataset);
  o.seed = j.value("seed", o.seed);
  o.latentDim = j.value("latent_dim", o.latentDim);
  o.classifierHidden = j.value("classifier_hidden", o.classifierHidden);
  o.classifierEpochs = j.value("classifier_epochs", o.classifierEpochs);
  o.accuracyFloor = j.value("accuracy_floor", o.accuracyFloor);
  o.ganWidth = j.value("gan_width", o.ganWidth);
  o.ganEpochs = j.value("gan_epochs", o.ganEpochs);
  o.ganBatch = j.value("gan_batch", o.ganBatch);
  o.encoderWidth = j.value("encoder_width", o.encoderWidth);
  o.encoderSteps = j.value("encoder_steps", o.encoderSteps);
  o.encoderImageWeight = j.value("encoder_image_weight", o.encoderImageWeight);
  o.aeHidden = j.value("ae_hidden", o.aeHidden);
  o.aeCode = j.value("ae_code", o.aeCode);
  o.aeEpochsFull = j.value("ae_epochs_full", o.aeEpochsFull);
  o.aeEpochsClass = j.value("ae_epochs_class", o.aeEpochsClass);
  o.trainLimit = j.value("train_limit", o.trainLimit);
  return o;
}

json AccuracyReport::toJson() const { return {{"overall", overall}, {"per_class", perClass}}; }

AccuracyReport measureAccuracy(const ClassifierModel& classifier, const Dataset& data) {
  torch::NoGradGuard noGrad;
  std::vector<torch::Tensor> predictions;
  for (int64_t start = 0; start < data.size(); start += 1000) {
    predictions.push_back(classifier.predict(data.images.slice(0, start, std::min(data.size(), start + 1000))));
  }
  auto pred = torch::cat(predictions);
  auto correct = pred.eq(data.labels);
  AccuracyReport r;
  r.overall = correct.to(torch::kFloat64).mean().item<double>();
  for (int64_t c = 0; c < data.numClasses; ++c) {
    auto sel = data.labels.eq(c);
    const auto count = sel.sum().item<int64_t>();
    r.perClass.push_back(count == 0 ? 0.0
                                    : static_cast<double>(correct.logical_and(sel).sum().item<int64_t>()) /
                                          static_cast<double>(count));
  }
  return r;
}

Manifest prepareBackbones(const BackboneOptions& o, const DatasetSplits& data, const fs::path& outDir,
                          const ProgressLog& log) {
  if (o.dataset != data.train.id) throw ArgumentError("backbone options and dataset ids differ");
  const auto optionsJson = o.toJson();
  Manifest manifest(o.dataset, o.seed, outDir);
  if (fs::exists(outDir / "manifest.json")) {
    auto existing = Manifest::load(outDir / "manifest.json");
    if (existing.settings().value("backbones", json()) == optionsJson) {
      manifest = existing;
      say(log, "reusing cached backbones in " + outDir.string());
    }
  }
  manifest.settings()["backbones"] = optionsJson;
  const auto train = limited(data.train, o.trainLimit);
  const auto& test = data.test;
  const auto shape = shapeVector(train.images);
  const auto K = train.numClasses;
  using Clock = std::chrono::steady_clock;

  if (!rolesPresent(manifest, {roles::kClassifier})) {
    const auto t0 = Clock::now();
    auto net = trainClassifierNet(train, o.classifierHidden, o.classifierEpochs, o.seed, log, "classifier");
    auto entry = saveModule(*net, outDir, "classifier.pt", "classifier");
    TorchClassifier model(net, K);
    auto acc = measureAccuracy(model, test);
    entry.inputShape = shape;
    entry.numClasses = K;
    entry.attributes = {{"hidden", o.classifierHidden}, {"test_accuracy", acc.overall},
                        {"per_class_accuracy", acc.perClass}, {"faulty", false}};
    manifest.set(roles::kClassifier, entry);
    manifest.save();
    say(log, "classifier test accuracy " + fixed(acc.overall) + " (" +
                 fixed(std::chrono::duration<double>(Clock::now() - t0).count(), 1) + " s)");
  }
  const double accuracy = manifest.entry(roles::kClassifier).attributes.at("test_accuracy").get<double>();
  if (accuracy < o.accuracyFloor) throw QualityGateError(roles::kClassifier, accuracy, o.accuracyFloor);

  if (!rolesPresent(manifest, {roles::kGenerator, roles::kDiscriminator})) {
    const auto t0 = Clock::now();
    auto [g, d] = trainGan(o, train, log);
    auto ge = saveModule(*g, outDir, "generator.pt", "generator");
    ge.inputShape = shape;
    ge.attributes = {{"latent_dim", o.latentDim}, {"width", o.ganWidth}};
    auto de = saveModule(*d, outDir, "discriminator.pt", "discriminator");
    de.inputShape = shape;
    de.attributes = {{"width", o.ganWidth}};
    manifest.set(roles::kGenerator, ge);
    manifest.set(roles::kDiscriminator, de);
    manifest.erase(roles::kEncoder);
    manifest.save();
    say(log, "gan trained (" + fixed(std::chrono::duration<double>(Clock::now() - t0).count(), 1) + " s)");
  }

  if (!rolesPresent(manifest, {roles::kEncoder})) {
    GeneratorNet g(o.latentDim, o.ganWidth);
    loadModule(*g, manifest.resolve(roles::kGenerator));
    auto e = trainEncoder(o, g, train, log);
    auto entry = saveModule(*e, outDir, "encoder.pt", "encoder");
    entry.inputShape = shape;
    const double mse = reconstructionMse(test.images, [&](const torch::Tensor& x) { return g->forward(e->forward(x)); });
    entry.attributes = {{"latent_dim", o.latentDim}, {"width", o.encoderWidth}, {"test_roundtrip_mse", mse}};
    manifest.set(roles::kEncoder, entry);
    manifest.save();
    say(log, "encoder round-trip mse on test images " + fixed(mse));
  }

  auto saveAutoencoder = [&](const std::string& role, const torch::Tensor& trainImages, const torch::Tensor& testImages,
                             int64_t epochs, uint64_t seed) {
    if (rolesPresent(manifest, {role})) return;
    auto ae = trainAutoencoder(o, trainImages, epochs, seed);
    auto entry = saveModule(*ae, outDir, role + ".pt", "autoencoder");
    entry.inputShape = shape;
    const double mse = reconstructionMse(testImages, [&](const torch::Tensor& x) { return ae->forward(x); });
    entry.attributes = {{"hidden", o.aeHidden}, {"code", o.aeCode}, {"test_mse", mse}};
    manifest.set(role, entry);
    manifest.save();
    say(log, role + " test mse " + fixed(mse));
  };
  saveAutoencoder(roles::kAutoencoderFull, train.images, test.images, o.aeEpochsFull, o.seed + 30);
  for (int64_t c = 0; c < K; ++c) {
    saveAutoencoder(roles::autoencoderForClass(c), train.ofClass(c), test.ofClass(c), o.aeEpochsClass,
                    o.seed + 40 + static_cast<uint64_t>(c));
  }
  manifest.save();
  return manifest;
}

ManifestEntry makeFaultyClassifier(Manifest& manifest, const DatasetSplits& data, int64_t leftOutClass, uint64_t seed,
                                   const ProgressLog& log) {
  const auto K = data.train.numClasses;
  if (leftOutClass < 0 || leftOutClass >= K) throw ArgumentError("left-out class outside [0, K)");
  const auto role = roles::faultyClassifier(leftOutClass);
  if (rolesPresent(manifest, {role}) && manifest.entry(role).attributes.value("seed", ~uint64_t{0}) == seed) {
    return manifest.entry(role);
  }
  const auto options = BackboneOptions::fromJson(manifest.settings().value("backbones", json::object()));
  const auto train = limited(data.train, options.trainLimit).without(leftOutClass);
  auto net = trainClassifierNet(train, options.classifierHidden, options.classifierEpochs, seed, log,
                                "faulty classifier");
  auto entry = saveModule(*net, manifest.dir(), role + ".pt", "classifier");
  TorchClassifier model(net, K);
  auto acc = measureAccuracy(model, data.test);
  entry.inputShape = shapeVector(data.train.images);
  entry.numClasses = K;
  entry.attributes = {{"hidden", options.classifierHidden},
                      {"test_accuracy", acc.overall},
                      {"per_class_accuracy", acc.perClass},
                      {"faulty", true},
                      {"left_out_class", leftOutClass},
                      {"seed", seed}};
  manifest.set(role, entry);
  manifest.save();
  say(log, role + " test accuracy " + fixed(acc.overall));
  return entry;
}

}  // namespace latentcf
