#pragma once

#include <filesystem>
#include <functional>
#include <string>
#include <vector>

#include "json.hpp"
#include "latentcf/dataset.hpp"
#include "latentcf/manifest.hpp"

namespace latentcf {

/// Sizes and budgets of the pretrained networks. Everything that influences
/// the trained weights is part of the cache key.
struct BackboneOptions {
  std::string dataset = "mnist";
  uint64_t seed = 0;
  int64_t latentDim = 32;

  int64_t classifierHidden = 64;
  int64_t classifierEpochs = 3;
  double accuracyFloor = 0.98;

  int64_t ganWidth = 32;
  int64_t ganEpochs = 6;
  int64_t ganBatch = 64;

  int64_t encoderWidth = 32;
  int64_t encoderSteps = 4000;
  /// Weight of the pixel reconstruction term on real images; 0 trains the
  /// encoder on (z, G(z)) pairs only.
  double encoderImageWeight = 0.0;

  int64_t aeHidden = 256;
  int64_t aeCode = 32;
  int64_t aeEpochsFull = 5;
  int64_t aeEpochsClass = 30;

  /// Optional cap on training images per split, for quick smoke runs.
  int64_t trainLimit = 0;

  nlohmann::json toJson() const;
  static BackboneOptions fromJson(const nlohmann::json& j);
};

using ProgressLog = std::function<void(const std::string&)>;

struct AccuracyReport {
  double overall = 0.0;
  std::vector<double> perClass;

  nlohmann::json toJson() const;
};

AccuracyReport measureAccuracy(const ClassifierModel& classifier, const Dataset& data);

/// Trains (or reuses) the classifier, generator + discriminator, encoder and
/// the full and per-class autoencoders under `outDir`, and returns the saved
/// manifest. A manifest in `outDir` whose recorded options match is returned
/// as is, after verifying every checksum. Throws QualityGateError if the
/// classifier misses `accuracyFloor` on the test split.
Manifest prepareBackbones(const BackboneOptions& options, const DatasetSplits& data,
                          const std::filesystem::path& outDir, const ProgressLog& log = {});

/// Trains a classifier with the same architecture on every class except
/// `leftOutClass`, records it as roles::faultyClassifier(leftOutClass) with
/// `faulty: true` and its accuracies, and saves the manifest. Reuses an
/// existing entry trained with the same seed.
ManifestEntry makeFaultyClassifier(Manifest& manifest, const DatasetSplits& data, int64_t leftOutClass,
                                   uint64_t seed, const ProgressLog& log = {});

}  // namespace latentcf
