// Command line front end: backbone preparation, training, evaluation, the
// experiment matrix, single-query inference and the explain service.
#include <CLI11.hpp>

#include <chrono>
#include <csignal>
#include <ctime>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <sstream>

#include "latentcf/backbones.hpp"
#include "latentcf/dataset.hpp"
#include "latentcf/errors.hpp"
#include "latentcf/hashing.hpp"
#include "latentcf/experiment.hpp"
#include "latentcf/image_io.hpp"
#include "latentcf/inference.hpp"
#include "latentcf/latent_sampling.hpp"
#include "latentcf/manifest.hpp"
#include "latentcf/service.hpp"
#include "latentcf/trainer.hpp"

namespace fs = std::filesystem;
using nlohmann::json;
using namespace latentcf;

namespace {

void logLine(const std::string& message) {
  const auto now = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
  std::tm tm{};
  localtime_r(&now, &tm);
  std::cerr << std::put_time(&tm, "%H:%M:%S") << "  " << message << std::endl;
}

json readJsonFile(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw NotFoundError("cannot open " + path.string());
  return json::parse(in);
}

std::vector<ClassPair> parsePairs(const std::string& text) {
  std::vector<ClassPair> pairs;
  std::stringstream ss(text);
  std::string item;
  while (std::getline(ss, item, ',')) {
    if (!item.empty()) pairs.push_back(ClassPair::parse(item));
  }
  return pairs;
}

std::vector<std::string> splitList(const std::string& text) {
  std::vector<std::string> out;
  std::stringstream ss(text);
  std::string item;
  while (std::getline(ss, item, ',')) {
    if (!item.empty()) out.push_back(item);
  }
  return out;
}

fs::path defaultModelDir(const std::string& dataset, uint64_t seed) {
  return cacheRoot() / "models" / (dataset + "-seed" + std::to_string(seed));
}

// Training options shared by train, run, ablate and faulty-demo.
struct TrainFlags {
  int64_t steps = -1;
  int64_t batch = -1;
  double lr = -1;
  double alpha = -1, beta = -1, gamma = -1;
  int64_t n = -1;
  std::string latentSource;
  std::string discriminator;
  int64_t seed = -1;
  int64_t hidden = -1;
  bool residual = false;
  std::string optimizer;
  std::string reduction;

  void attach(CLI::App* app) {
    app->add_option("--steps", steps, "training steps per pair");
    app->add_option("--batch", batch, "batch size");
    app->add_option("--lr", lr, "learning rate");
    app->add_option("--alpha", alpha, "proximity weight");
    app->add_option("--beta", beta, "cycle weight");
    app->add_option("--gamma", gamma, "adversarial weight");
    app->add_option("--n", n, "applications of the transform");
    app->add_option("--latent-source", latentSource, "encoder or rejection-sampling");
    app->add_option("--discriminator", discriminator, "frozen or co-train");
    app->add_option("--seed", seed, "training seed");
    app->add_option("--hidden", hidden, "transform hidden width (default 4 x latent dim)");
    app->add_flag("--residual", residual, "use z + MLP(z) transforms");
    app->add_option("--optimizer", optimizer, "adam or sgd");
    app->add_option("--reduction", reduction, "per-sample reduction of the L1/TV/perceptual terms: mean or sum");
  }

  void apply(TrainConfig& c) const {
    if (steps > 0) c.steps = steps;
    if (batch > 0) c.batchSize = batch;
    if (lr >= 0) c.learningRate = lr;
    if (alpha >= 0) c.weights.alpha = alpha;
    if (beta >= 0) c.weights.beta = beta;
    if (gamma >= 0) c.weights.gamma = gamma;
    if (!reduction.empty()) c.weights.reduction = reductionFrom(reduction);
    if (n >= 0) c.n = n;
    if (!latentSource.empty()) {
      c = TrainConfig::fromJson([&] {
        auto j = c.toJson();
        j["latent_source"] = latentSource;
        return j;
      }());
    }
    if (!discriminator.empty()) {
      c = TrainConfig::fromJson([&] {
        auto j = c.toJson();
        j["discriminator_mode"] = discriminator;
        return j;
      }());
    }
    if (seed >= 0) c.seed = static_cast<uint64_t>(seed);
    if (hidden > 0) c.hidden = hidden;
    if (residual) c.residual = true;
    if (!optimizer.empty()) c.optimizer = optimizer;
  }
};

struct ExperimentFlags {
  std::string config;
  std::string manifest;
  std::string dataRoot;
  std::string pairs;
  std::string out = "results";
  std::string runId;
  int64_t T = -1;
  int64_t evalLimit = -1;
  bool force = false;
  bool reuse = false;
  TrainFlags train;

  void attach(CLI::App* app) {
    app->add_option("--config", config, "experiment spec (JSON); flags override it");
    app->add_option("--manifest", manifest, "model manifest (default: cache for the dataset)");
    app->add_option("--data-root", dataRoot, "dataset cache root (default $LATENTCF_CACHE)");
    app->add_option("--pairs", pairs, "class pairs, e.g. 3:8,4:9,5:6");
    app->add_option("--out", out, "results directory");
    app->add_option("--run-id", runId, "run id");
    app->add_option("--T", T, "transition steps for COUT");
    app->add_option("--eval-limit", evalLimit, "held-out queries per pair (0 = all)");
    app->add_flag("--force", force, "replace an existing run");
    app->add_flag("--reuse", reuse, "return stored results of an identical finished run");
    train.attach(app);
  }

  ExperimentSpec spec(const std::string& defaultRunId) const {
    ExperimentSpec s = config.empty() ? ExperimentSpec{} : ExperimentSpec::fromJson(readJsonFile(config));
    if (config.empty() || !pairs.empty()) {
      s.pairs = parsePairs(pairs.empty() ? "3:8,4:9,5:6" : pairs);
    }
    s.outputDir = out;
    if (!runId.empty()) s.runId = runId;
    if (s.runId.empty()) s.runId = defaultRunId;
    if (T > 0) s.metrics.T = T;
    if (evalLimit >= 0) s.metrics.evalLimit = evalLimit;
    train.apply(s.train);
    if (force) s.existing = ExistingRun::Force;
    if (reuse) s.existing = ExistingRun::Reuse;
    return s;
  }

  Manifest loadManifest(const std::string& dataset) const {
    return Manifest::load(manifest.empty() ? defaultModelDir(dataset, 0) / "manifest.json" : fs::path(manifest));
  }

  DatasetSplits loadData(const std::string& dataset) const {
    return loadDataset(dataset, dataRoot.empty() ? cacheRoot() : fs::path(dataRoot));
  }
};

void printReport(const MetricReport& report) { std::cout << report.toTable(); }

// Finds a registered engine for a pair key, trying "q:t" as given.
const RegisteredPair& requirePair(const PairRegistry& registry, const std::string& key) {
  const auto* entry = registry.find(key);
  if (!entry) {
    std::string known;
    for (const auto& k : registry.keys()) known += " " + k;
    throw NotFoundError("no checkpoint for pair " + key + " (available:" + known + ")");
  }
  return *entry;
}

torch::Tensor readLatentFile(const fs::path& path, int64_t dim) {
  auto j = readJsonFile(path);
  const auto& values = j.is_object() ? j.at("latent") : j;
  auto v = values.get<std::vector<float>>();
  if (static_cast<int64_t>(v.size()) != dim) throw ArgumentError("latent file must hold " + std::to_string(dim) + " values");
  return torch::tensor(v).view({1, dim});
}

ExplainService* activeService = nullptr;
void onSignal(int) {
  if (activeService) activeService->stop();
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Counterfactual explanations through learned latent transformations"};
  app.require_subcommand(1);

  // prepare
  auto* prepare = app.add_subcommand("prepare", "train or load the pretrained backbones");
  BackboneOptions backbone;
  std::string prepareOut, prepareConfig, prepareDataRoot;
  std::vector<int64_t> faultyClasses;
  prepare->add_option("--dataset", backbone.dataset, "mnist or fashion-mnist");
  prepare->add_option("--seed", backbone.seed, "seed");
  prepare->add_option("--out", prepareOut, "model directory (default $LATENTCF_CACHE/models/<dataset>-seed<seed>)");
  prepare->add_option("--config", prepareConfig, "backbone options (JSON)");
  prepare->add_option("--data-root", prepareDataRoot, "dataset cache root");
  prepare->add_option("--latent-dim", backbone.latentDim, "generator latent dim");
  prepare->add_option("--classifier-epochs", backbone.classifierEpochs, "classifier epochs");
  prepare->add_option("--gan-epochs", backbone.ganEpochs, "GAN epochs");
  prepare->add_option("--encoder-steps", backbone.encoderSteps, "encoder steps");
  prepare->add_option("--encoder-image-weight", backbone.encoderImageWeight, "pixel term weight for the encoder");
  prepare->add_option("--accuracy-floor", backbone.accuracyFloor, "minimum classifier test accuracy");
  prepare->add_option("--train-limit", backbone.trainLimit, "cap on training images (0 = all)");
  prepare->add_option("--faulty", faultyClasses, "also train classifiers leaving out these classes");

  // train
  auto* train = app.add_subcommand("train", "learn the transforms for one class pair");
  std::string trainManifest, trainOut, trainPair = "3:8", trainConfig, trainDataRoot, trainClassifier = roles::kClassifier;
  TrainFlags trainFlags;
  train->add_option("--manifest", trainManifest, "model manifest")->required();
  train->add_option("--pair", trainPair, "query:target classes");
  train->add_option("--out", trainOut, "run directory")->required();
  train->add_option("--config", trainConfig, "training config (JSON)");
  train->add_option("--data-root", trainDataRoot, "dataset cache root");
  train->add_option("--classifier", trainClassifier, "classifier role to explain");
  trainFlags.attach(train);

  // evaluate
  auto* evaluate = app.add_subcommand("evaluate", "score trained checkpoints on the test split");
  std::string evalCheckpoint, evalManifest, evalPairs, evalOut = "report", evalDataRoot;
  MetricSettings evalSettings;
  evaluate->add_option("--checkpoint", evalCheckpoint, "checkpoint or directory of checkpoints")->required();
  evaluate->add_option("--manifest", evalManifest, "model manifest")->required();
  evaluate->add_option("--pairs", evalPairs, "pairs to score (default: every checkpoint's own pair)");
  evaluate->add_option("--T", evalSettings.T, "transition steps");
  evaluate->add_option("--eval-limit", evalSettings.evalLimit, "held-out queries per pair (0 = all)");
  evaluate->add_option("--out", evalOut, "output directory");
  evaluate->add_option("--data-root", evalDataRoot, "dataset cache root");

  // run / ablate / faulty-demo
  auto* run = app.add_subcommand("run", "train and evaluate every pair of an experiment");
  ExperimentFlags runFlags;
  runFlags.attach(run);
  auto* ablate = app.add_subcommand("ablate", "loss-term ablation (cls, cls+prx, cls+prx+cyc, full)");
  ExperimentFlags ablateFlags;
  ablateFlags.attach(ablate);
  auto* faulty = app.add_subcommand("faulty-demo", "explain a classifier trained without one class");
  ExperimentFlags faultyFlags;
  FaultyDemoSpec demo;
  faultyFlags.attach(faulty);
  faulty->add_option("--left-out", demo.leftOutClass, "class withheld from the classifier");
  faulty->add_option("--query", demo.queryClass, "query class");
  faulty->add_option("--control", demo.controlTarget, "non-left-out target class");
  faulty->add_option("--classifier-seed", demo.classifierSeed, "seed of the faulty classifier");

  // export
  auto* exporter = app.add_subcommand("export", "write stored results and contact sheets");
  std::string exportResultsDir = "results", exportRuns, exportFormat = "tsv", exportOut = "export";
  exporter->add_option("--results", exportResultsDir, "results directory");
  exporter->add_option("--runs", exportRuns, "comma separated run ids");
  exporter->add_option("--format", exportFormat, "tsv or json");
  exporter->add_option("--out", exportOut, "output directory");

  // infer
  auto* infer = app.add_subcommand("infer", "counterfactual for one query");
  std::string inferCheckpoint, inferManifest, inferInput, inferOut = "cf", inferPair;
  int64_t inferN = -1, inferInversion = 0;
  infer->add_option("--checkpoint", inferCheckpoint, "checkpoint or directory of checkpoints")->required();
  infer->add_option("--manifest", inferManifest, "model manifest")->required();
  infer->add_option("--input", inferInput, "image.png, latent.json or sample:SEED")->required();
  infer->add_option("--pair", inferPair, "pair key when the directory holds several");
  infer->add_option("--n", inferN, "applications of g (default: the checkpoint's)");
  infer->add_option("--inversion-steps", inferInversion, "invert images instead of encoding them");
  infer->add_option("--out", inferOut, "output directory");

  // serve
  auto* serve = app.add_subcommand("serve", "HTTP explain service");
  std::string serveManifest, serveCheckpoints, serveHost = "127.0.0.1", serveStatic;
  int servePort = 8080;
  serve->add_option("--manifest", serveManifest, "model manifest")->required();
  serve->add_option("--checkpoints-dir", serveCheckpoints, "directory of trained checkpoints")->required();
  serve->add_option("--port", servePort, "port");
  serve->add_option("--host", serveHost, "bind address");
  serve->add_option("--static", serveStatic, "directory served at / (explorer UI build)");

  CLI11_PARSE(app, argc, argv);

  try {
    if (*prepare) {
      if (!prepareConfig.empty()) {
        auto j = readJsonFile(prepareConfig);
        backbone = BackboneOptions::fromJson(j);
      }
      const auto out = prepareOut.empty() ? defaultModelDir(backbone.dataset, backbone.seed) : fs::path(prepareOut);
      auto data = loadDataset(backbone.dataset, prepareDataRoot.empty() ? cacheRoot() : fs::path(prepareDataRoot));
      auto manifest = prepareBackbones(backbone, data, out, logLine);
      for (auto c : faultyClasses) makeFaultyClassifier(manifest, data, c, FaultyDemoSpec{}.classifierSeed, logLine);
      std::cout << manifest.file().string() << "\n";
    } else if (*train) {
      auto manifest = Manifest::load(trainManifest);
      TrainConfig config = trainConfig.empty() ? TrainConfig{} : TrainConfig::fromJson(readJsonFile(trainConfig));
      config.pair = ClassPair::parse(trainPair);
      trainFlags.apply(config);
      auto data = loadDataset(manifest.dataset(), trainDataRoot.empty() ? cacheRoot() : fs::path(trainDataRoot));
      auto models = loadModelSet(manifest, trainClassifier, config.discriminatorMode == DiscriminatorMode::CoTrain);
      auto source = makeBatchSource(config, models, data.train.byClass());
      const auto every = std::max<int64_t>(1, config.steps / 20);
      auto checkpoint = trainTransforms(config, models, *source, trainOut, [&](int64_t step, const StepResult& r) {
        if (step % every == 0 || step == config.steps) {
          std::ostringstream msg;
          msg << "step " << step << "/" << config.steps << " total " << r.forward.total + r.backward.total;
          logLine(msg.str());
        }
      });
      writeCheckpointMeta(trainOut, trainClassifier);
      std::cout << (fs::path(trainOut) / checkpointDirName(checkpoint.step)).string() << "\n";
    } else if (*evaluate) {
      auto manifest = Manifest::load(evalManifest);
      auto data = loadDataset(manifest.dataset(), evalDataRoot.empty() ? cacheRoot() : fs::path(evalDataRoot));
      auto registry = buildRegistry(manifest, evalCheckpoint);
      std::vector<std::string> keys;
      if (evalPairs.empty()) {
        for (const auto& k : registry->keys()) {
          const auto* e = registry->find(k);
          if (e->pair == ClassPair::parse(e->config.at("pair").get<std::string>())) keys.push_back(k);
        }
      } else {
        for (const auto& p : parsePairs(evalPairs)) keys.push_back(p.key());
      }
      MetricReport report;
      for (const auto& key : keys) {
        const auto& entry = requirePair(*registry, key);
        auto eval = loadEvaluationModels(manifest, entry.classifierRole);
        auto queries = data.test.ofClass(entry.pair.query);
        if (evalSettings.evalLimit > 0) queries = queries.slice(0, 0, evalSettings.evalLimit);
        auto result = evaluatePair(*entry.engine, eval, entry.pair, queries, data.test.ofClass(entry.pair.target),
                                   evalSettings);
        result.metrics.pair = key;
        report.pairs.push_back(result.metrics);
        fs::create_directories(fs::path(evalOut) / "pairs");
        writePng(fs::path(evalOut) / "pairs" / (entry.pair.slug() + ".png"),
                 contactSheet(result.sample, evalSettings.sheetRows));
        logLine("scored " + key);
      }
      report.aggregateRows();
      report.configHash = sha256Hex(json{{"checkpoint", fs::absolute(evalCheckpoint).string()},
                                         {"manifest", manifest.hash()},
                                         {"metrics", evalSettings.toJson()}}
                                        .dump());
      fs::create_directories(evalOut);
      std::ofstream(fs::path(evalOut) / "report.tsv") << report.toTable();
      std::ofstream(fs::path(evalOut) / "report.json") << report.toJson().dump(2) << "\n";
      printReport(report);
    } else if (*run) {
      auto spec = runFlags.spec("experiment");
      auto data = runFlags.loadData(spec.dataset);
      auto manifest = runFlags.loadManifest(spec.dataset);
      printReport(runExperiment(spec, data, manifest, logLine));
    } else if (*ablate) {
      auto spec = ablateFlags.spec("ablation");
      if (ablateFlags.pairs.empty() && ablateFlags.config.empty()) spec.pairs = {{3, 8}};
      auto data = ablateFlags.loadData(spec.dataset);
      auto manifest = ablateFlags.loadManifest(spec.dataset);
      auto reports = runAblation(spec, data, manifest, logLine);
      for (const auto& variant : ablationVariants()) {
        std::cout << "# " << variant << "\n";
        printReport(reports.at(variant));
      }
    } else if (*faulty) {
      auto spec = faultyFlags.spec("faulty-demo");
      auto data = faultyFlags.loadData(spec.dataset);
      auto manifest = faultyFlags.loadManifest(spec.dataset);
      auto result = runFaultyDemo(demo, spec, data, manifest, logLine);
      printReport(result.report);
      std::cout << result.toJson().dump(2) << "\n";
    } else if (*exporter) {
      auto table = exportResults(exportResultsDir, splitList(exportRuns), exportFormat, exportOut);
      std::cout << table.string() << "\n";
    } else if (*infer) {
      auto manifest = Manifest::load(inferManifest);
      auto registry = buildRegistry(manifest, inferCheckpoint);
      std::string key = inferPair;
      if (key.empty()) {
        if (registry->size() != 2) throw ArgumentError("several checkpoints found; pass --pair");
        for (const auto& k : registry->keys()) {
          const auto* e = registry->find(k);
          if (e->pair == ClassPair::parse(e->config.at("pair").get<std::string>())) key = k;
        }
      }
      const auto& entry = requirePair(*registry, key);
      const auto n = inferN >= 0 ? inferN : entry.engine->steps();
      InversionSettings inversion;
      inversion.budget = inferInversion;
      auto models = entry.engine->models();
      if (inferInversion > 0) models.encoder = nullptr;
      CounterfactualEngine engine(models, entry.engine->forward(), entry.engine->backward(), n, inversion);
      CFResult r;
      if (inferInput.rfind("sample:", 0) == 0) {
        const auto seed = std::stoull(inferInput.substr(7));
        r = engine.fromLatents(sampleLatents(1, engine.forward().dim(), seed).values());
      } else if (fs::path(inferInput).extension() == ".json") {
        r = engine.fromLatents(readLatentFile(inferInput, engine.forward().dim()));
      } else {
        auto image = readPng(inferInput);
        r = engine.fromImages(image.unsqueeze(0));
      }
      fs::create_directories(inferOut);
      const fs::path out(inferOut);
      writePng(out / "query.png", r.query[0]);
      writePng(out / "counterfactual.png", r.counterfactual[0]);
      if (r.hasCycle()) writePng(out / "cycled.png", r.cycled[0]);
      writePng(out / "mask.png", r.mask[0].unsqueeze(0));
      auto toVec = [](const torch::Tensor& t) {
        auto c = t.to(torch::kFloat64).contiguous();
        return std::vector<double>(c.data_ptr<double>(), c.data_ptr<double>() + c.numel());
      };
      json meta{{"pair", key},
                {"n", n},
                {"input", inferInput},
                {"query_probs", toVec(r.queryProbs[0])},
                {"counterfactual_probs", toVec(r.cfProbs[0])},
                {"valid", r.cfProbs[0].argmax().item<int64_t>() == entry.pair.target},
                {"query_latent", toVec(r.queryLatent[0])},
                {"counterfactual_latent", toVec(r.cfLatent[0])}};
      if (r.hasCycle()) meta["cycled_probs"] = toVec(r.cycledProbs[0]);
      std::ofstream(out / "result.json") << meta.dump(2) << "\n";
      std::cout << meta.dump() << "\n";
    } else if (*serve) {
      auto manifest = Manifest::load(serveManifest);
      ExplainService service(buildRegistry(manifest, serveCheckpoints), serveStatic);
      activeService = &service;
      std::signal(SIGINT, onSignal);
      std::signal(SIGTERM, onSignal);
      std::string keys;
      for (const auto& k : service.registry()->keys()) keys += " " + k;
      logLine("serving" + keys + " on " + serveHost + ":" + std::to_string(servePort));
      service.serve(serveHost, servePort);
    }
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
