#include "latentcf/metrics.hpp"

#include <Eigen/Eigenvalues>
#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>
#include <sstream>

#include "latentcf/errors.hpp"

namespace latentcf {
namespace {

constexpr double kScoreTolerance = 1e-6;
constexpr int64_t kTransitionChunk = 32;

void requireImages(const torch::Tensor& a, const torch::Tensor& b, const char* what) {
  if (a.sizes() != b.sizes()) throw ArgumentError(std::string(what) + ": shape mismatch");
}

std::vector<double> toVector(const torch::Tensor& t) {
  auto c = t.detach().to(torch::kFloat64).contiguous();
  return std::vector<double>(c.data_ptr<double>(), c.data_ptr<double>() + c.numel());
}

Eigen::MatrixXd polyKernel(const FeatureMatrix& a, const FeatureMatrix& b) {
  const double d = static_cast<double>(a.cols());
  Eigen::MatrixXd k = (a * b.transpose()).array() / d + 1.0;
  return k.array().cube().matrix();
}

double mmdUnbiased(const FeatureMatrix& x, const FeatureMatrix& y) {
  const double m = static_cast<double>(x.rows());
  const double n = static_cast<double>(y.rows());
  const auto kxx = polyKernel(x, x);
  const auto kyy = polyKernel(y, y);
  const auto kxy = polyKernel(x, y);
  const double xx = (kxx.sum() - kxx.trace()) / (m * (m - 1.0));
  const double yy = (kyy.sum() - kyy.trace()) / (n * (n - 1.0));
  return xx + yy - 2.0 * kxy.sum() / (m * n);
}

FeatureMatrix takeRows(const FeatureMatrix& m, std::span<const int64_t> rows) {
  FeatureMatrix out(static_cast<Eigen::Index>(rows.size()), m.cols());
  for (std::size_t i = 0; i < rows.size(); ++i) out.row(static_cast<Eigen::Index>(i)) = m.row(rows[i]);
  return out;
}

Eigen::MatrixXd covariance(const FeatureMatrix& f, const Eigen::RowVectorXd& mean) {
  auto centered = f.rowwise() - mean;
  return (centered.transpose() * centered) / static_cast<double>(f.rows() - 1);
}

Eigen::MatrixXd symmetricSqrt(const Eigen::MatrixXd& m) {
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> eig(m);
  if (eig.info() != Eigen::Success) throw NumericError("eigendecomposition failed");
  auto values = eig.eigenvalues().cwiseMax(0.0).cwiseSqrt();
  return eig.eigenvectors() * values.asDiagonal() * eig.eigenvectors().transpose();
}

}  // namespace

void CompensatedSum::add(double value) {
  const double t = sum_ + value;
  if (std::abs(sum_) >= std::abs(value)) {
    compensation_ += (sum_ - t) + value;
  } else {
    compensation_ += (value - t) + sum_;
  }
  sum_ = t;
}

std::vector<int64_t> insertionOrder(const torch::Tensor& mask) {
  if (mask.dim() != 2) throw ArgumentError("mask must be (H, W)");
  const auto values = toVector(mask);
  std::vector<int64_t> order(values.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](int64_t a, int64_t b) { return values[a] > values[b]; });
  return order;
}

namespace {

// rank[p] = position of location p in the insertion order, shape (H * W).
torch::Tensor insertionRank(const torch::Tensor& mask) {
  const auto order = insertionOrder(mask);
  auto rank = torch::empty({static_cast<int64_t>(order.size())}, torch::kLong);
  auto* r = rank.data_ptr<int64_t>();
  for (std::size_t i = 0; i < order.size(); ++i) r[order[i]] = static_cast<int64_t>(i);
  return rank;
}

// Frames for one query: (T + 1, C, H, W).
torch::Tensor framesFor(const torch::Tensor& x, const torch::Tensor& xcf, const torch::Tensor& mask, int64_t T) {
  const auto H = x.size(1), W = x.size(2);
  const auto P = H * W;
  const auto perStep = (P + T - 1) / T;
  auto rank = insertionRank(mask).view({1, 1, H, W});
  auto t = torch::arange(T + 1, torch::kLong).view({T + 1, 1, 1, 1});
  auto replaced = rank < (t * perStep).clamp_max(P);
  return torch::where(replaced, xcf.unsqueeze(0), x.unsqueeze(0));
}

void validateTransition(const torch::Tensor& x, const torch::Tensor& xcf, const torch::Tensor& mask, int64_t T) {
  requireImages(x, xcf, "transition");
  if (x.dim() != 3) throw ArgumentError("transition images must be (C, H, W)");
  if (mask.dim() != 2 || mask.size(0) != x.size(1) || mask.size(1) != x.size(2)) {
    throw ArgumentError("mask spatial shape does not match the images");
  }
  if (T < 1) throw ArgumentError("transition needs T >= 1");
  if (T > x.size(1) * x.size(2)) throw ArgumentError("T exceeds the number of pixel locations");
}

}  // namespace

torch::Tensor transitionSequence(const torch::Tensor& x, const torch::Tensor& xcf, const torch::Tensor& mask,
                                 int64_t T) {
  validateTransition(x, xcf, mask, T);
  return framesFor(x, xcf, mask, T);
}

double aupc(std::span<const double> scores) {
  if (scores.size() < 2) throw ArgumentError("a perturbation curve needs at least two points");
  CompensatedSum sum;
  for (std::size_t t = 0; t < scores.size(); ++t) {
    const double s = scores[t];
    if (!(s >= -kScoreTolerance && s <= 1.0 + kScoreTolerance)) throw ArgumentError("curve scores must lie in [0, 1]");
  }
  for (std::size_t t = 0; t + 1 < scores.size(); ++t) {
    sum.add(0.5 * (std::clamp(scores[t], 0.0, 1.0) + std::clamp(scores[t + 1], 0.0, 1.0)));
  }
  return sum.value() / static_cast<double>(scores.size() - 1);
}

nlohmann::json TransitionRecord::toJson() const {
  return {{"T", steps},
          {"query_curve", queryCurve},
          {"target_curve", targetCurve},
          {"aupc_query", aupcQuery},
          {"aupc_target", aupcTarget},
          {"cout", cout}};
}

std::vector<TransitionRecord> transitionRecords(const ClassifierModel& classifier, const torch::Tensor& queries,
                                                const torch::Tensor& counterfactuals, const torch::Tensor& masks,
                                                int64_t T, int64_t queryClass, int64_t targetClass, bool keepFrames) {
  requireImages(queries, counterfactuals, "transition");
  if (queries.dim() != 4) throw ArgumentError("transition batches must be (B, C, H, W)");
  if (masks.dim() != 3 || masks.size(0) != queries.size(0)) throw ArgumentError("masks must be (B, H, W)");
  const auto K = classifier.numClasses();
  if (queryClass < 0 || queryClass >= K || targetClass < 0 || targetClass >= K) {
    throw ArgumentError("class id outside the classifier's range");
  }
  torch::NoGradGuard noGrad;
  std::vector<TransitionRecord> records;
  const auto B = queries.size(0);
  for (int64_t start = 0; start < B; start += kTransitionChunk) {
    const auto end = std::min(B, start + kTransitionChunk);
    std::vector<torch::Tensor> frames;
    for (int64_t i = start; i < end; ++i) {
      validateTransition(queries[i], counterfactuals[i], masks[i], T);
      frames.push_back(framesFor(queries[i], counterfactuals[i], masks[i], T));
    }
    auto stacked = torch::cat(frames);
    auto probs = classifier.probabilities(stacked).to(torch::kFloat64).view({end - start, T + 1, K});
    for (int64_t i = 0; i < end - start; ++i) {
      TransitionRecord r;
      r.steps = T;
      r.queryCurve = toVector(probs[i].select(1, queryClass));
      r.targetCurve = toVector(probs[i].select(1, targetClass));
      r.aupcQuery = aupc(r.queryCurve);
      r.aupcTarget = aupc(r.targetCurve);
      r.cout = r.aupcTarget - r.aupcQuery;
      if (keepFrames) r.frames = frames[static_cast<std::size_t>(i)];
      records.push_back(std::move(r));
    }
  }
  return records;
}

CoutScore coutFromRecords(std::span<const TransitionRecord> records) {
  if (records.empty()) throw ArgumentError("COUT needs at least one query/CF pair");
  CompensatedSum q, t;
  for (const auto& r : records) {
    q.add(r.aupcQuery);
    t.add(r.aupcTarget);
  }
  CoutScore s;
  s.count = static_cast<int64_t>(records.size());
  s.aupcQuery = q.value() / static_cast<double>(s.count);
  s.aupcTarget = t.value() / static_cast<double>(s.count);
  s.cout = s.aupcTarget - s.aupcQuery;
  return s;
}

CoutScore coutScore(const ClassifierModel& classifier, const torch::Tensor& queries,
                    const torch::Tensor& counterfactuals, const torch::Tensor& masks, int64_t T, int64_t queryClass,
                    int64_t targetClass) {
  if (queries.dim() == 0 || queries.size(0) == 0) throw ArgumentError("COUT needs at least one query/CF pair");
  auto records = transitionRecords(classifier, queries, counterfactuals, masks, T, queryClass, targetClass);
  return coutFromRecords(records);
}

double validity(const torch::Tensor& probs, int64_t targetClass) {
  if (probs.dim() != 2 || probs.size(0) == 0) throw ArgumentError("validity needs a nonempty (B, K) batch");
  if (targetClass < 0 || targetClass >= probs.size(1)) throw ArgumentError("target class outside [0, K)");
  auto hits = probs.argmax(1).eq(targetClass).sum().item<int64_t>();
  return static_cast<double>(hits) / static_cast<double>(probs.size(0));
}

double validity(const ClassifierModel& classifier, const torch::Tensor& counterfactuals, int64_t targetClass) {
  if (counterfactuals.dim() != 4 || counterfactuals.size(0) == 0) throw ArgumentError("validity needs a nonempty set");
  torch::NoGradGuard noGrad;
  return validity(classifier.probabilities(counterfactuals), targetClass);
}

double proximity(const torch::Tensor& queries, const torch::Tensor& counterfactuals) {
  requireImages(queries, counterfactuals, "proximity");
  if (queries.numel() == 0) throw ArgumentError("proximity needs a nonempty set");
  auto perSample = (queries.to(torch::kFloat64) - counterfactuals.to(torch::kFloat64)).abs().flatten(1).sum(1);
  CompensatedSum sum;
  for (double v : toVector(perSample)) sum.add(v);
  return sum.value() / static_cast<double>(queries.numel());
}

ImScores imScores(const torch::Tensor& counterfactuals, const AutoencoderModel* aeQuery,
                  const AutoencoderModel* aeTarget, const AutoencoderModel* aeFull) {
  if (!aeQuery || !aeTarget || !aeFull) throw ConfigurationError("IM scores need query, target and full autoencoders");
  if (counterfactuals.dim() != 4 || counterfactuals.size(0) == 0) throw ArgumentError("IM scores need a nonempty set");
  torch::NoGradGuard noGrad;
  auto x = counterfactuals.to(torch::kFloat64);
  auto recTarget = aeTarget->reconstruct(counterfactuals).to(torch::kFloat64);
  auto recQuery = aeQuery->reconstruct(counterfactuals).to(torch::kFloat64);
  auto recFull = aeFull->reconstruct(counterfactuals).to(torch::kFloat64);
  auto errTarget = (x - recTarget).pow(2).flatten(1).sum(1);
  auto errQuery = (x - recQuery).pow(2).flatten(1).sum(1);
  auto im1 = toVector(errTarget / (errQuery + kImEps));
  auto im2 = toVector((recTarget - recFull).pow(2).flatten(1).sum(1) / (x.abs().flatten(1).sum(1) + kImEps));
  CompensatedSum s1, s2;
  for (double v : im1) s1.add(v);
  for (double v : im2) s2.add(v);
  const double n = static_cast<double>(im1.size());
  return {s1.value() / n, s2.value() / n};
}

FeatureMatrix toFeatureMatrix(const torch::Tensor& features) {
  auto f = features.detach().flatten(1).to(torch::kFloat64).contiguous();
  FeatureMatrix m(f.size(0), f.size(1));
  const auto* p = f.data_ptr<double>();
  for (int64_t i = 0; i < f.size(0); ++i) {
    for (int64_t j = 0; j < f.size(1); ++j) m(i, j) = p[i * f.size(1) + j];
  }
  return m;
}

double fid(const FeatureMatrix& a, const FeatureMatrix& b) {
  if (a.cols() != b.cols()) throw ArgumentError("FID feature dims differ");
  if (a.rows() < a.cols() + 1 || b.rows() < b.cols() + 1) {
    throw ArgumentError("FID needs at least dim + 1 samples per set");
  }
  const Eigen::RowVectorXd muA = a.colwise().mean();
  const Eigen::RowVectorXd muB = b.colwise().mean();
  const auto eye = Eigen::MatrixXd::Identity(a.cols(), a.cols());
  const Eigen::MatrixXd sigmaA = covariance(a, muA) + kFidRegularization * eye;
  const Eigen::MatrixXd sigmaB = covariance(b, muB) + kFidRegularization * eye;
  const Eigen::MatrixXd rootA = symmetricSqrt(sigmaA);
  const Eigen::MatrixXd inner = rootA * sigmaB * rootA;
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> eig(0.5 * (inner + inner.transpose()), Eigen::EigenvaluesOnly);
  if (eig.info() != Eigen::Success) throw NumericError("eigendecomposition failed");
  const double traceRoot = eig.eigenvalues().cwiseMax(0.0).cwiseSqrt().sum();
  const double value = (muA - muB).squaredNorm() + sigmaA.trace() + sigmaB.trace() - 2.0 * traceRoot;
  if (!std::isfinite(value)) throw NumericError("FID is not finite");
  return value;
}

double kid(const FeatureMatrix& a, const FeatureMatrix& b, const KidOptions& options) {
  if (a.cols() != b.cols()) throw ArgumentError("KID feature dims differ");
  if (a.rows() < 2 || b.rows() < 2) throw ArgumentError("KID needs at least two samples per set");
  if (options.subsets < 1) throw ArgumentError("KID needs at least one subset");
  const auto smaller = std::min<int64_t>(a.rows(), b.rows());
  if (options.subsetSize <= 0 || options.subsetSize >= smaller) return mmdUnbiased(a, b);
  if (options.subsetSize < 2) throw ArgumentError("KID subsets need at least two samples");

  std::mt19937_64 rng(options.seed);
  std::vector<int64_t> ia(static_cast<std::size_t>(a.rows())), ib(static_cast<std::size_t>(b.rows()));
  CompensatedSum sum;
  for (int64_t s = 0; s < options.subsets; ++s) {
    std::iota(ia.begin(), ia.end(), 0);
    std::iota(ib.begin(), ib.end(), 0);
    std::shuffle(ia.begin(), ia.end(), rng);
    std::shuffle(ib.begin(), ib.end(), rng);
    const auto m = static_cast<std::size_t>(options.subsetSize);
    sum.add(mmdUnbiased(takeRows(a, {ia.data(), m}), takeRows(b, {ib.data(), m})));
  }
  return sum.value() / static_cast<double>(options.subsets);
}

nlohmann::json LatentShiftStats::toJson() const {
  return {{"per_dimension", perDimension}, {"overall_mean", overallMean}, {"sparsity", sparsity}};
}

LatentShiftStats latentShiftStats(const torch::Tensor& queries, const torch::Tensor& counterfactuals,
                                  double threshold) {
  if (queries.dim() != 2 || queries.sizes() != counterfactuals.sizes() || queries.size(0) == 0) {
    throw ArgumentError("latent shift needs equal nonempty (N, D) latents");
  }
  LatentShiftStats s;
  s.perDimension = toVector((queries.to(torch::kFloat64) - counterfactuals.to(torch::kFloat64)).abs().mean(0));
  CompensatedSum sum;
  int64_t below = 0;
  for (double v : s.perDimension) {
    sum.add(v);
    if (v < threshold) ++below;
  }
  const double d = static_cast<double>(s.perDimension.size());
  s.overallMean = sum.value() / d;
  s.sparsity = static_cast<double>(below) / d;
  return s;
}

const std::vector<std::string>& metricNames() {
  static const std::vector<std::string> names{"cout", "aupc_query", "aupc_target", "validity", "proximity",
                                              "im1",  "im2",        "fid",         "kid"};
  return names;
}

double PairMetrics::get(const std::string& metric) const {
  if (metric == "cout") return cout;
  if (metric == "aupc_query") return aupcQuery;
  if (metric == "aupc_target") return aupcTarget;
  if (metric == "validity") return validity;
  if (metric == "proximity") return proximity;
  if (metric == "im1") return im1;
  if (metric == "im2") return im2;
  if (metric == "fid") return fid;
  if (metric == "kid") return kid;
  throw ArgumentError("unknown metric '" + metric + "'");
}

void PairMetrics::set(const std::string& metric, double value) {
  if (metric == "cout") cout = value;
  else if (metric == "aupc_query") aupcQuery = value;
  else if (metric == "aupc_target") aupcTarget = value;
  else if (metric == "validity") validity = value;
  else if (metric == "proximity") proximity = value;
  else if (metric == "im1") im1 = value;
  else if (metric == "im2") im2 = value;
  else if (metric == "fid") fid = value;
  else if (metric == "kid") kid = value;
  else throw ArgumentError("unknown metric '" + metric + "'");
}

void MetricReport::aggregateRows() {
  aggregate = PairMetrics{};
  aggregate.pair = "all";
  int64_t total = 0;
  for (const auto& p : pairs) total += p.count;
  aggregate.count = total;
  if (total == 0) return;
  for (const auto& name : metricNames()) {
    CompensatedSum sum;
    for (const auto& p : pairs) sum.add(p.get(name) * static_cast<double>(p.count));
    aggregate.set(name, sum.value() / static_cast<double>(total));
  }
}

std::string MetricReport::toTable() const {
  std::ostringstream out;
  out.precision(17);
  out << "pair\tcount";
  for (const auto& name : metricNames()) out << '\t' << name;
  out << '\n';
  auto row = [&](const PairMetrics& p) {
    out << p.pair << '\t' << p.count;
    for (const auto& name : metricNames()) out << '\t' << p.get(name);
    out << '\n';
  };
  for (const auto& p : pairs) row(p);
  row(aggregate);
  return out.str();
}

namespace {

nlohmann::json pairJson(const PairMetrics& p) {
  nlohmann::json j{{"pair", p.pair}, {"count", p.count}};
  for (const auto& name : metricNames()) j[name] = p.get(name);
  return j;
}

PairMetrics pairFromJson(const nlohmann::json& j) {
  PairMetrics p;
  p.pair = j.at("pair").get<std::string>();
  p.count = j.at("count").get<int64_t>();
  for (const auto& name : metricNames()) {
    if (j.contains(name)) p.set(name, j.at(name).get<double>());
  }
  return p;
}

}  // namespace

nlohmann::json MetricReport::toJson() const {
  nlohmann::json rows = nlohmann::json::array();
  for (const auto& p : pairs) rows.push_back(pairJson(p));
  return {{"config_hash", configHash}, {"pairs", rows}, {"aggregate", pairJson(aggregate)}};
}

MetricReport MetricReport::fromJson(const nlohmann::json& j) {
  MetricReport r;
  r.configHash = j.value("config_hash", "");
  for (const auto& p : j.at("pairs")) r.pairs.push_back(pairFromJson(p));
  if (j.contains("aggregate")) {
    r.aggregate = pairFromJson(j.at("aggregate"));
  } else {
    r.aggregateRows();
  }
  return r;
}

}  // namespace latentcf
