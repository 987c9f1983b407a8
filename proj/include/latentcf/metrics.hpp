#pragma once

#include <torch/torch.h>

#include <Eigen/Dense>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "json.hpp"
#include "latentcf/models.hpp"
#include "latentcf/types.hpp"

namespace latentcf {

/// Neumaier-compensated running sum; makes reductions insensitive to chunking.
class CompensatedSum {
 public:
  void add(double value);
  double value() const { return sum_ + compensation_; }

 private:
  double sum_ = 0.0;
  double compensation_ = 0.0;
};

inline constexpr int64_t kDefaultTransitionSteps = 50;

/// Replacement order of the spatial locations: descending mask value, ties in
/// row-major order. `mask` is (H, W); returns P = H*W flat indices.
std::vector<int64_t> insertionOrder(const torch::Tensor& mask);

/// Pixel-insertion sequence from query `x` to `xcf` (both (C, H, W)) guided by
/// `mask` (H, W): step t replaces the first min(t * ceil(P/T), P) locations of
/// insertionOrder(), all channels at once. Returns (T + 1, C, H, W) with
/// frame 0 == x and frame T == xcf. Throws ArgumentError if T < 1 or T > P.
torch::Tensor transitionSequence(const torch::Tensor& x, const torch::Tensor& xcf, const torch::Tensor& mask,
                                 int64_t T);

/// Trapezoidal mean (1/T) sum_t (s_t + s_{t+1}) / 2 of a curve of T + 1 scores
/// in [0, 1]. Throws ArgumentError for fewer than two points or scores out of
/// range.
double aupc(std::span<const double> scores);

struct TransitionRecord {
  int64_t steps = 0;
  torch::Tensor frames;  // (T + 1, C, H, W); only filled on request
  std::vector<double> queryCurve;
  std::vector<double> targetCurve;
  double aupcQuery = 0.0;
  double aupcTarget = 0.0;
  double cout = 0.0;

  nlohmann::json toJson() const;
};

/// One transition per query/CF pair of the batch, scored with `classifier`
/// probabilities of `queryClass` and `targetClass`.
std::vector<TransitionRecord> transitionRecords(const ClassifierModel& classifier, const torch::Tensor& queries,
                                                const torch::Tensor& counterfactuals, const torch::Tensor& masks,
                                                int64_t T, int64_t queryClass, int64_t targetClass,
                                                bool keepFrames = false);

struct CoutScore {
  double aupcQuery = 0.0;
  double aupcTarget = 0.0;
  double cout = 0.0;
  int64_t count = 0;
};

/// Dataset average of the transition AUPCs; cout = aupcTarget - aupcQuery.
/// Throws ArgumentError on an empty set.
CoutScore coutScore(const ClassifierModel& classifier, const torch::Tensor& queries,
                    const torch::Tensor& counterfactuals, const torch::Tensor& masks, int64_t T, int64_t queryClass,
                    int64_t targetClass);
CoutScore coutFromRecords(std::span<const TransitionRecord> records);

/// Fraction of (B, K) probability rows whose argmax is `targetClass`.
double validity(const torch::Tensor& probs, int64_t targetClass);
double validity(const ClassifierModel& classifier, const torch::Tensor& counterfactuals, int64_t targetClass);

/// sum |x - x'| / (N * C * H * W).
double proximity(const torch::Tensor& queries, const torch::Tensor& counterfactuals);

inline constexpr double kImEps = 1e-8;

struct ImScores {
  double im1 = 0.0;
  double im2 = 0.0;
};

/// IM1 = |x' - AE_c'(x')|^2 / (|x' - AE_c(x')|^2 + eps) and
/// IM2 = |AE_c'(x') - AE_full(x')|^2 / (|x'|_1 + eps), averaged over the batch.
/// Throws ConfigurationError if an autoencoder is missing.
ImScores imScores(const torch::Tensor& counterfactuals, const AutoencoderModel* aeQuery, const AutoencoderModel* aeTarget,
                  const AutoencoderModel* aeFull);

using FeatureMatrix = Eigen::MatrixXd;  // one sample per row

FeatureMatrix toFeatureMatrix(const torch::Tensor& features);

inline constexpr double kFidRegularization = 1e-6;

/// Frechet distance between Gaussians fitted to the two feature sets.
/// Needs at least dim + 1 rows each; throws NumericError on non-finite output.
double fid(const FeatureMatrix& a, const FeatureMatrix& b);

struct KidOptions {
  int64_t subsets = 1;
  /// Rows drawn per subset; 0 or >= the smaller set size uses every row and
  /// makes the estimate deterministic.
  int64_t subsetSize = 0;
  uint64_t seed = 0;
};

/// Unbiased MMD^2 with the kernel (x.y / d + 1)^3, averaged over subsets.
/// Throws ArgumentError for fewer than two rows or mismatched dims.
double kid(const FeatureMatrix& a, const FeatureMatrix& b, const KidOptions& options = {});

inline constexpr double kLatentShiftThreshold = 0.05;

struct LatentShiftStats {
  std::vector<double> perDimension;  // mean |z - z'| per dimension
  double overallMean = 0.0;
  /// Fraction of dimensions whose mean shift is below the threshold.
  double sparsity = 0.0;

  nlohmann::json toJson() const;
};

LatentShiftStats latentShiftStats(const torch::Tensor& queries, const torch::Tensor& counterfactuals,
                                  double threshold = kLatentShiftThreshold);

/// Closed metric vocabulary shared by reports and result rows.
const std::vector<std::string>& metricNames();

struct PairMetrics {
  std::string pair;  // "3:8", or "all" for the aggregate
  int64_t count = 0;
  double cout = 0.0;
  double aupcQuery = 0.0;
  double aupcTarget = 0.0;
  double validity = 0.0;
  double proximity = 0.0;
  double im1 = 0.0;
  double im2 = 0.0;
  double fid = 0.0;
  double kid = 0.0;

  /// Value by vocabulary name; throws ArgumentError for unknown names.
  double get(const std::string& metric) const;
  void set(const std::string& metric, double value);
};

struct MetricReport {
  std::vector<PairMetrics> pairs;
  PairMetrics aggregate;
  std::string configHash;

  /// Recomputes `aggregate` as the sample-weighted mean of the pair rows.
  void aggregateRows();

  /// Tab-separated table: a header line, one line per pair, then the "all" row.
  std::string toTable() const;
  nlohmann::json toJson() const;
  static MetricReport fromJson(const nlohmann::json& j);
};

}  // namespace latentcf
