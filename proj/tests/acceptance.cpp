// End-to-end acceptance checks. Prints one PASS/FAIL line per criterion and
// exits non-zero if any fails. MNIST results are cached under
// $LATENTCF_CACHE/acceptance, so a second run only re-evaluates.

#include <torch/torch.h>

#include <algorithm>
#include <chrono>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iomanip>
#include <iostream>
#include <numeric>
#include <optional>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include "json.hpp"
#include "latentcf/backbones.hpp"
#include "latentcf/dataset.hpp"
#include "latentcf/experiment.hpp"
#include "latentcf/manifest.hpp"
#include "latentcf/metrics.hpp"
#include "latentcf/objective.hpp"
#include "support/gradient_check.hpp"
#include "support/toy_models.hpp"

namespace fs = std::filesystem;
using namespace latentcf;

namespace {

// Pinned tolerances and thresholds.
constexpr double kIdentityTol = 1e-6;
constexpr double kAdversarialTol = 1e-9;
constexpr double kGradientTol = 1e-3;
constexpr int kGradientSeeds = 20;
constexpr int kRandomCurves = 10000;
constexpr double kKidTol = 1e-9;
constexpr double kFidZeroTol = 1e-6;
constexpr double kFidShiftRel = 0.01;
constexpr double kMinValidity = 0.95;
constexpr double kMinCout = 0.80;
constexpr double kMaxProximity = 0.15;
constexpr double kMaxHours = 6.0;
constexpr double kMaxMsPerSample = 50.0;
constexpr int64_t kThroughputBatch = 256;
constexpr double kFaultyMinValidity = 0.90;
constexpr double kMinIm1Degradation = 0.25;

int failures = 0;

void report(const std::string& name, bool pass, const std::string& detail) {
  if (!pass) ++failures;
  std::cout << (pass ? "PASS" : "FAIL") << "  " << name << "  " << detail << std::endl;
}

std::string fmt(double v, int precision = 4) {
  std::ostringstream s;
  s << std::setprecision(precision) << v;
  return s.str();
}

void guarded(const std::string& name, const std::function<void()>& check) {
  try {
    check();
  } catch (const std::exception& e) {
    report(name, false, std::string("error: ") + e.what());
  }
}

void progress(const std::string& line) { std::cerr << "  " << line << std::endl; }

QueryBatch toyQuery(const ModelSet& models, int64_t batch, uint64_t seed) {
  QueryBatch q;
  q.latents = testing::seededNormal({batch, testing::kToyDim}, seed);
  torch::NoGradGuard guard;
  q.images = models.generator->generate(q.latents);
  return q;
}

void analyticIdentities() {
  double worstIdentity = 0.0;
  for (uint64_t seed = 1; seed <= 5; ++seed) {
    auto models = testing::toyModelSet(seed);
    auto q = toyQuery(models, 4, seed + 100);
    auto id = TransformNetwork::identity(testing::kToyDim, Direction::Forward, torch::kFloat64);
    auto b = counterfactualObjective(q, 1, id, id, models, LossWeights{}, 1).breakdown();
    for (double v : {b.cyc, b.prxL1, b.cycPerceptual, b.cycImage, b.cycLatent}) {
      worstIdentity = std::max(worstIdentity, std::abs(v));
    }
  }
  testing::HalfDiscriminator half;
  auto x = testing::seededNormal({5, 1, testing::kToySide, testing::kToySide}, 3).sigmoid();
  const double adv = adversarialLoss(half, x, x).item<double>();
  const double advError = std::abs(adv - 2.0 * std::log(0.5));
  report("analytic-identities", worstIdentity <= kIdentityTol && advError <= kAdversarialTol,
         "identity terms max " + fmt(worstIdentity) + " (tol " + fmt(kIdentityTol) + "), adv(D=0.5) error " +
             fmt(advError) + " (tol " + fmt(kAdversarialTol) + ")");
}

void gradientCheck() {
  double worst = 0.0;
  int64_t params = 0;
  for (int seed = 1; seed <= kGradientSeeds; ++seed) {
    auto r = testing::checkObjectiveGradient(seed);
    worst = std::max(worst, r.relativeError);
    params = r.parameters;
  }
  report("gradient-check", worst <= kGradientTol,
         std::to_string(kGradientSeeds) + " seeds, " + std::to_string(params) + " params, max rel error " + fmt(worst) +
             " (tol " + fmt(kGradientTol) + ")");
}

double trapezoid(const std::vector<double>& s) {
  double acc = 0.0;
  for (size_t t = 0; t + 1 < s.size(); ++t) acc += 0.5 * (s[t] + s[t + 1]);
  return acc / static_cast<double>(s.size() - 1);
}

void coutOracles() {
  TransitionRecord r;
  r.steps = 2;
  r.queryCurve = {1.0, 0.0, 0.0};
  r.targetCurve = {0.0, 1.0, 1.0};
  r.aupcQuery = aupc(r.queryCurve);
  r.aupcTarget = aupc(r.targetCurve);
  r.cout = r.aupcTarget - r.aupcQuery;
  std::vector<TransitionRecord> records{r};
  const double hand = coutFromRecords(records).cout;

  bool endpoints = true;
  for (int64_t T : {1, 5, 50, 784}) {
    auto x = testing::seededNormal({1, 28, 28}, 10 + T);
    auto xcf = testing::seededNormal({1, 28, 28}, 20 + T);
    auto mask = testing::seededNormal({28, 28}, 30 + T).abs();
    auto seq = transitionSequence(x, xcf, mask, T);
    endpoints = endpoints && torch::equal(seq[0], x) && torch::equal(seq[T], xcf);
  }

  std::mt19937_64 rng(2024);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  std::uniform_int_distribution<int> len(1, 100);
  double worst = 0.0;
  bool inRange = true;
  for (int i = 0; i < kRandomCurves; ++i) {
    const int T = len(rng);
    std::vector<double> q(T + 1), t(T + 1);
    for (int k = 0; k <= T; ++k) {
      q[k] = u(rng);
      t[k] = u(rng) * (1.0 - q[k]);
    }
    const double aq = aupc(q), at = aupc(t);
    worst = std::max({worst, std::abs(aq - trapezoid(q)), std::abs(at - trapezoid(t))});
    inRange = inRange && aq >= 0.0 && aq <= 1.0 && at - aq >= -1.0 && at - aq <= 1.0;
  }
  report("cout-oracle", hand == 0.5 && endpoints && inRange && worst <= 1e-12,
         "hand case " + fmt(hand, 17) + " (exact 0.5), endpoints " + (endpoints ? "bit-exact" : "differ") + ", " +
             std::to_string(kRandomCurves) + " random curves max |aupc - trapezoid| " + fmt(worst) +
             (inRange ? ", all in range" : ", out of range"));
}

void distributionOracles() {
  const int n = 50, d = 6;
  std::mt19937_64 rng(17);
  std::normal_distribution<double> N(0.0, 1.0);
  FeatureMatrix a(n, d), b(n, d);
  for (int i = 0; i < n; ++i) {
    for (int j = 0; j < d; ++j) {
      a(i, j) = N(rng);
      b(i, j) = N(rng) * 0.8 - 0.3;
    }
  }
  auto k = [d](const Eigen::RowVectorXd& x, const Eigen::RowVectorXd& y) { return std::pow(x.dot(y) / d + 1.0, 3); };
  double kaa = 0, kbb = 0, kab = 0;
  for (int i = 0; i < n; ++i) {
    for (int j = 0; j < n; ++j) {
      if (i != j) {
        kaa += k(a.row(i), a.row(j));
        kbb += k(b.row(i), b.row(j));
      }
      kab += k(a.row(i), b.row(j));
    }
  }
  const double expected = (kaa + kbb) / (n * (n - 1.0)) - 2.0 * kab / (double(n) * n);
  const double kidError = std::abs(kid(a, b) - expected);

  FeatureMatrix big(600, 5);
  for (int i = 0; i < big.rows(); ++i) {
    for (int j = 0; j < big.cols(); ++j) big(i, j) = N(rng);
  }
  const double fidZero = std::abs(fid(big, big));
  Eigen::RowVectorXd shift(5);
  shift << 0.5, -1.0, 2.0, 0.0, 1.5;
  FeatureMatrix shifted = big.rowwise() + shift;
  const double d2 = shift.squaredNorm();
  const double fidRel = std::abs(fid(big, shifted) - d2) / d2;
  report("kid-fid-oracle", kidError <= kKidTol && fidZero <= kFidZeroTol && fidRel <= kFidShiftRel,
         "kid vs brute force " + fmt(kidError) + " (tol " + fmt(kKidTol) + "), fid(a,a) " + fmt(fidZero) +
             ", shifted fid rel error " + fmt(fidRel) + " (tol " + fmt(kFidShiftRel) + ")");
}

struct MnistContext {
  DatasetSplits data;
  Manifest manifest;
  fs::path outputDir;
};

ExperimentSpec baseSpec(const fs::path& outputDir, const std::string& runId) {
  ExperimentSpec spec;
  spec.pairs = {ClassPair{3, 8}};
  spec.outputDir = outputDir;
  spec.runId = runId;
  spec.existing = ExistingRun::Reuse;
  return spec;
}

void mnistEndToEnd(MnistContext& ctx) {
  const auto start = std::chrono::steady_clock::now();
  auto spec = baseSpec(ctx.outputDir, "acceptance-e2e");
  auto result = runExperiment(spec, ctx.data, ctx.manifest, progress);
  const auto& m = result.pairs.at(0);
  // Training may have happened in an earlier invocation; its wall time is
  // stored next to the checkpoint.
  const auto evaluation = nlohmann::json::parse(std::ifstream(spec.runDir() / "pairs" / spec.pairs.at(0).slug() / "evaluation.json"));
  const auto timing = ctx.outputDir / evaluation.at("checkpoint").get<std::string>() / "training.json";
  if (!fs::exists(timing)) throw std::runtime_error("no training time recorded in " + timing.string());
  const double trainSeconds = nlohmann::json::parse(std::ifstream(timing)).at("seconds").get<double>();
  const double evalSeconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  const double hours = (trainSeconds + evalSeconds) / 3600.0;
  report("mnist-3-8", m.validity >= kMinValidity && m.cout >= kMinCout && m.proximity <= kMaxProximity &&
                          hours <= kMaxHours,
         "steps " + std::to_string(spec.train.steps) + ", n=" + std::to_string(m.count) + ", val " +
             fmt(m.validity) + " (>= " + fmt(kMinValidity) + "), cout " + fmt(m.cout) + " (>= " + fmt(kMinCout) +
             "), prox " + fmt(m.proximity) + " (<= " + fmt(kMaxProximity) + "), training " + fmt(trainSeconds, 4) +
             " s (total <= " + fmt(kMaxHours) + " h)");
}

void throughput(MnistContext& ctx) {
  auto spec = baseSpec(ctx.outputDir, "acceptance-e2e");
  auto config = spec.train;
  config.pair = spec.pairs.at(0);
  const auto evaluation = nlohmann::json::parse(
      std::ifstream(spec.runDir() / "pairs" / config.pair.slug() / "evaluation.json"));
  const auto checkpoint = loadLatestCheckpoint(ctx.outputDir / evaluation.at("checkpoint").get<std::string>());
  auto models = loadModelSet(ctx.manifest);
  CounterfactualEngine engine(models, checkpoint.forward, checkpoint.backward, config.n);

  auto images = ctx.data.test.ofClass(config.pair.query).slice(0, 0, kThroughputBatch);
  engine.fromImages(images);  // warm-up
  std::vector<double> runs;
  for (int i = 0; i < 5; ++i) {
    const auto t0 = std::chrono::steady_clock::now();
    auto r = engine.fromImages(images);
    runs.push_back(std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - t0).count());
  }
  std::sort(runs.begin(), runs.end());
  const double perSample = runs[runs.size() / 2] / static_cast<double>(images.size(0));
  report("throughput", perSample <= kMaxMsPerSample,
         "batch " + std::to_string(images.size(0)) + ", median " + fmt(perSample) + " ms/sample (<= " +
             fmt(kMaxMsPerSample) + ")");
}

void ablation(MnistContext& ctx) {
  auto spec = baseSpec(ctx.outputDir, "acceptance-ablation");
  auto reports = runAblation(spec, ctx.data, ctx.manifest, progress);
  auto metric = [&](const std::string& variant, const std::string& name) {
    return reports.at(variant).pairs.at(0).get(name);
  };
  const double proxCls = metric("cls", "proximity"), proxClsPrx = metric("cls+prx", "proximity");
  const double fidFull = metric("full", "fid"), fidNoAdv = metric("cls+prx+cyc", "fid");
  report("ablation", proxClsPrx < proxCls && fidFull < fidNoAdv,
         "prox cls+prx " + fmt(proxClsPrx) + " < cls " + fmt(proxCls) + ", fid full " + fmt(fidFull) +
             " < cls+prx+cyc " + fmt(fidNoAdv));
}

void faultyDemo(MnistContext& ctx) {
  auto spec = baseSpec(ctx.outputDir, "acceptance-faulty");
  FaultyDemoSpec demo;
  auto r = runFaultyDemo(demo, spec, ctx.data, ctx.manifest, progress);
  report("faulty-demo", r.leftOut.validity >= kFaultyMinValidity && r.im1Degradation >= kMinIm1Degradation,
         "faulty accuracy " + fmt(r.faultyAccuracy) + ", left-out val " + fmt(r.leftOut.validity) + " (>= " +
             fmt(kFaultyMinValidity) + "), im1 " + fmt(r.leftOut.im1) + " vs control " + fmt(r.control.im1) +
             ", degradation " + fmt(r.im1Degradation) + " (>= " + fmt(kMinIm1Degradation) + ")");
}

}  // namespace

int main() {
  torch::manual_seed(0);
  guarded("analytic-identities", analyticIdentities);
  guarded("gradient-check", gradientCheck);
  guarded("cout-oracle", coutOracles);
  guarded("kid-fid-oracle", distributionOracles);

  const std::vector<std::string> mnistChecks{"mnist-3-8", "throughput", "ablation", "faulty-demo"};
  std::optional<MnistContext> ctx;
  try {
    const auto modelDir = cacheRoot() / "models" / "mnist-seed0";
    auto data = loadDataset("mnist");
    Manifest manifest = fs::exists(modelDir / "manifest.json")
                            ? Manifest::load(modelDir / "manifest.json")
                            : prepareBackbones(BackboneOptions{}, data, modelDir, progress);
    ctx = MnistContext{std::move(data), std::move(manifest), cacheRoot() / "acceptance"};
  } catch (const std::exception& e) {
    for (const auto& name : mnistChecks) {
      report(name, false, std::string("mnist unavailable (fetch with tools/fetch_mnist.sh): ") + e.what());
    }
  }
  if (ctx) {
    guarded("mnist-3-8", [&] { mnistEndToEnd(*ctx); });
    guarded("throughput", [&] { throughput(*ctx); });
    guarded("ablation", [&] { ablation(*ctx); });
    guarded("faulty-demo", [&] { faultyDemo(*ctx); });
  }
  std::cout << (failures == 0 ? "all acceptance criteria passed" : std::to_string(failures) + " criteria failed")
            << std::endl;
  return failures == 0 ? 0 : 1;
}
