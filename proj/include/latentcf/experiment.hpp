#pragma once

#include <filesystem>
#include <functional>
#include <map>
#include <string>
#include <vector>

#include "json.hpp"
#include "latentcf/backbones.hpp"
#include "latentcf/dataset.hpp"
#include "latentcf/inference.hpp"
#include "latentcf/manifest.hpp"
#include "latentcf/metrics.hpp"
#include "latentcf/trainer.hpp"

namespace latentcf {

struct MetricSettings {
  int64_t T = kDefaultTransitionSteps;
  /// Held-out queries per pair; 0 uses the whole test class.
  int64_t evalLimit = 0;
  KidOptions kid{10, 500, 0};
  /// Rows in each pair's contact sheet.
  int64_t sheetRows = 8;

  nlohmann::json toJson() const;
  static MetricSettings fromJson(const nlohmann::json& j);
};

/// What to do when the run directory already holds results.
enum class ExistingRun { Refuse, Reuse, Force };

struct ExperimentSpec {
  std::string dataset = "mnist";
  std::vector<ClassPair> pairs;
  /// Per-pair training config; its `pair` field is replaced for each pair.
  TrainConfig train;
  MetricSettings metrics;
  std::filesystem::path outputDir = "results";
  std::string runId;
  /// Classifier role to explain (a faulty classifier for the debugging demo).
  std::string classifierRole = roles::kClassifier;
  ExistingRun existing = ExistingRun::Refuse;

  /// Throws ArgumentError for an empty or repeated pair list or classes
  /// outside [0, numClasses).
  void validate(int64_t numClasses) const;
  nlohmann::json toJson() const;
  static ExperimentSpec fromJson(const nlohmann::json& j);
  /// Hash over everything that determines the results (not the output path
  /// or the existing-run policy).
  std::string hash() const;
  std::filesystem::path runDir() const { return outputDir / "runs" / runId; }
};

/// One stored measurement.
struct ResultRow {
  std::string runId;
  std::string pair;
  std::string metric;
  double value = 0.0;
  int64_t count = 0;
  std::string timestamp;

  nlohmann::json toJson() const;
  /// Throws ArgumentError if the metric is outside metricNames().
  static ResultRow fromJson(const nlohmann::json& j);
};

/// Append-only JSONL store of a run's ResultRows.
class ResultStore {
 public:
  explicit ResultStore(std::filesystem::path file) : file_(std::move(file)) {}
  void append(const std::vector<ResultRow>& rows) const;
  std::vector<ResultRow> read() const;
  bool exists() const { return std::filesystem::exists(file_); }

 private:
  std::filesystem::path file_;
};

/// Networks used to score counterfactuals.
struct EvaluationModels {
  std::shared_ptr<const ClassifierModel> classifier;  // the explained classifier
  std::shared_ptr<const ClassifierModel> features;    // FID/KID embedding (penultimate layer)
  std::shared_ptr<const AutoencoderModel> aeFull;
  std::map<int64_t, std::shared_ptr<const AutoencoderModel>> aeByClass;
};

EvaluationModels loadEvaluationModels(const Manifest& manifest, const std::string& classifierRole);

struct PairEvaluation {
  PairMetrics metrics;
  LatentShiftStats latentShift;
  /// Median per-dimension |z - z_cyc| over the queries.
  double cycleLatentMedian = 0.0;
  /// Fraction of queries with a positive single-sample COUT.
  double positiveCoutFraction = 0.0;
  CFResult sample;  // the first sheetRows results, for contact sheets

  nlohmann::json toJson() const;
};

/// Scores transforms on held-out `queries` of `pair.query`. `realTarget`
/// holds real images of the target class for FID/KID.
PairEvaluation evaluatePair(const CounterfactualEngine& engine, const EvaluationModels& eval, const ClassPair& pair,
                            const torch::Tensor& queries, const torch::Tensor& realTarget,
                            const MetricSettings& settings);

/// Four columns per row: query, counterfactual, cycled query, mask.
torch::Tensor contactSheet(const CFResult& result, int64_t rows);

using ExperimentLog = std::function<void(const std::string&)>;

/// Trains transforms for every pair (reusing a cached checkpoint with the
/// same config, manifest and classifier), evaluates them on the test split,
/// aggregates, and persists under spec.runDir():
///   spec.json, report.json, report.tsv, results.jsonl,
///   pairs/<q-t>/{evaluation.json, contact_sheet.png}
/// A failure leaves a FAILED marker with the error next to partial results.
MetricReport runExperiment(const ExperimentSpec& spec, const DatasetSplits& data, const Manifest& manifest,
                           const ExperimentLog& log = {});

/// Loss-term subsets of the ablation study, in order.
const std::vector<std::string>& ablationVariants();
/// `weights` with the terms the variant drops set to zero.
LossWeights ablationWeights(const std::string& variant, const LossWeights& weights);

/// One run per variant, identical except for the loss weights; run ids are
/// `<spec.runId>-<variant>`.
std::map<std::string, MetricReport> runAblation(const ExperimentSpec& spec, const DatasetSplits& data,
                                                const Manifest& manifest, const ExperimentLog& log = {});

struct FaultyDemoSpec {
  int64_t leftOutClass = 9;
  int64_t queryClass = 4;
  int64_t controlTarget = 1;
  uint64_t classifierSeed = 50;
};

struct FaultyDemoResult {
  MetricReport report;
  PairMetrics leftOut;  // query -> left-out class
  PairMetrics control;  // query -> control class
  double faultyAccuracy = 0.0;
  /// im1(left-out) / im1(control) - 1.
  double im1Degradation = 0.0;

  nlohmann::json toJson() const;
};

/// Trains a classifier without `leftOutClass`, then explains it for the
/// query -> left-out and query -> control pairs. `base` supplies the training
/// config, metric settings and output location; its pairs and classifier role
/// are replaced.
FaultyDemoResult runFaultyDemo(const FaultyDemoSpec& demo, ExperimentSpec base, const DatasetSplits& data,
                               Manifest& manifest, const ExperimentLog& log = {});

/// Writes `<outDir>/results.tsv` (long format, one line per stored row) or
/// `results.json`, and copies each run's contact sheets. Throws NotFoundError
/// for an unknown run id.
std::filesystem::path exportResults(const std::filesystem::path& outputDir, const std::vector<std::string>& runIds,
                                    const std::string& format, const std::filesystem::path& outDir);

/// Header line of the exported TSV table.
std::string resultTableHeader();

}  // namespace latentcf
