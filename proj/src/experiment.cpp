#include "latentcf/experiment.hpp"

#include <algorithm>
#include <chrono>
#include <ctime>
#include <fstream>
#include <iomanip>
#include <set>
#include <sstream>

#include "latentcf/errors.hpp"
#include "latentcf/hashing.hpp"
#include "latentcf/image_io.hpp"
#include "latentcf/service.hpp"

namespace latentcf {
namespace fs = std::filesystem;
using nlohmann::json;

namespace {

constexpr int64_t kEvalChunk = 250;

void say(const ExperimentLog& log, const std::string& message) {
  if (log) log(message);
}

void writeText(const fs::path& path, const std::string& text) {
  fs::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw IoError("cannot write " + path.string());
  out << text;
  if (!out) throw IoError("failed writing " + path.string());
}

json readJson(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw NotFoundError("cannot open " + path.string());
  try {
    return json::parse(in);
  } catch (const json::exception& e) {
    throw IoError("malformed JSON in " + path.string() + ": " + e.what());
  }
}

std::string utcTimestamp() {
  const auto now = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
  std::tm tm{};
  gmtime_r(&now, &tm);
  char buf[32];
  std::strftime(buf, sizeof buf, "%Y-%m-%dT%H:%M:%SZ", &tm);
  return buf;
}

std::string exitKindName(ExistingRun e) {
  switch (e) {
    case ExistingRun::Refuse: return "refuse";
    case ExistingRun::Reuse: return "reuse";
    case ExistingRun::Force: return "force";
  }
  return "refuse";
}

ExistingRun existingRunFrom(const std::string& name) {
  if (name == "refuse") return ExistingRun::Refuse;
  if (name == "reuse") return ExistingRun::Reuse;
  if (name == "force") return ExistingRun::Force;
  throw ArgumentError("unknown existing-run policy '" + name + "'");
}

CFResult sliceResult(const CFResult& r, int64_t count) {
  auto s = [&](const torch::Tensor& t) { return t.defined() ? t.slice(0, 0, count).clone() : t; };
  CFResult out;
  out.query = s(r.query);
  out.counterfactual = s(r.counterfactual);
  out.cycled = s(r.cycled);
  out.queryLatent = s(r.queryLatent);
  out.cfLatent = s(r.cfLatent);
  out.cycledLatent = s(r.cycledLatent);
  out.queryProbs = s(r.queryProbs);
  out.cfProbs = s(r.cfProbs);
  out.cycledProbs = s(r.cycledProbs);
  out.mask = s(r.mask);
  return out;
}

FeatureMatrix penultimate(const ClassifierModel& classifier, const torch::Tensor& images) {
  torch::NoGradGuard noGrad;
  const std::vector<std::string> layer{"penultimate"};
  std::vector<torch::Tensor> parts;
  for (int64_t start = 0; start < images.size(0); start += kEvalChunk) {
    parts.push_back(classifier.features(images.slice(0, start, std::min(images.size(0), start + kEvalChunk)), layer)[0]);
  }
  return toFeatureMatrix(torch::cat(parts));
}

// Checkpoint cache key: the training config plus the checksums of every
// network the training touches.
std::string trainingKey(const TrainConfig& config, const Manifest& manifest, const std::string& classifierRole) {
  json key{{"config", config.toJson()},
           {"dataset", manifest.dataset()},
           {"generator", manifest.entry(roles::kGenerator).sha256},
           {"discriminator", manifest.entry(roles::kDiscriminator).sha256},
           {"classifier", manifest.entry(classifierRole).sha256},
           {"encoder", manifest.has(roles::kEncoder) ? manifest.entry(roles::kEncoder).sha256 : ""}};
  return sha256Hex(key.dump()).substr(0, 16);
}

Checkpoint trainOrReuse(const TrainConfig& config, const ModelSet& models, const Manifest& manifest,
                        const std::string& classifierRole, const Dataset& train, const fs::path& outputDir,
                        const ExperimentLog& log) {
  const auto dir = outputDir / "checkpoints" / trainingKey(config, manifest, classifierRole);
  if (fs::exists(dir / "latest")) {
    try {
      auto c = loadLatestCheckpoint(dir);
      if (c.step == config.steps && c.config == config) {
        say(log, "reusing trained transforms in " + dir.string());
        return c;
      }
    } catch (const Error&) {
    }
  }
  fs::remove_all(dir);
  auto source = makeBatchSource(config, models, train.byClass());
  const auto t0 = std::chrono::steady_clock::now();
  const auto every = std::max<int64_t>(1, config.steps / 10);
  auto checkpoint = trainTransforms(config, models, *source, dir, [&](int64_t step, const StepResult& r) {
    if (step % every == 0 || step == config.steps) {
      std::ostringstream msg;
      msg << "pair " << config.pair.key() << " step " << step << "/" << config.steps << " loss "
          << std::setprecision(4) << r.forward.total + r.backward.total << " (cls " << r.forward.cls << "/"
          << r.backward.cls << ")";
      say(log, msg.str());
    }
  });
  writeCheckpointMeta(dir, classifierRole);
  const double seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  writeText(dir / "training.json", json{{"seconds", seconds}, {"steps", config.steps}}.dump(2));
  say(log, "pair " + config.pair.key() + " trained in " + std::to_string(static_cast<int64_t>(seconds)) + " s");
  return checkpoint;
}

std::vector<ResultRow> rowsFor(const std::string& runId, const PairMetrics& m, const std::string& timestamp) {
  std::vector<ResultRow> rows;
  for (const auto& name : metricNames()) rows.push_back({runId, m.pair, name, m.get(name), m.count, timestamp});
  return rows;
}

}  // namespace

json MetricSettings::toJson() const {
  return {{"T", T},
          {"eval_limit", evalLimit},
          {"kid", {{"subsets", kid.subsets}, {"subset_size", kid.subsetSize}, {"seed", kid.seed}}},
          {"sheet_rows", sheetRows}};
}

MetricSettings MetricSettings::fromJson(const json& j) {
  MetricSettings m;
  m.T = j.value("T", m.T);
  m.evalLimit = j.value("eval_limit", m.evalLimit);
  if (j.contains("kid")) {
    const auto& k = j.at("kid");
    m.kid.subsets = k.value("subsets", m.kid.subsets);
    m.kid.subsetSize = k.value("subset_size", m.kid.subsetSize);
    m.kid.seed = k.value("seed", m.kid.seed);
  }
  m.sheetRows = j.value("sheet_rows", m.sheetRows);
  return m;
}

void ExperimentSpec::validate(int64_t numClasses) const {
  if (pairs.empty()) throw ArgumentError("experiment needs at least one class pair");
  std::set<ClassPair> seen;
  for (const auto& p : pairs) {
    if (p.query == p.target) throw ArgumentError("pair " + p.key() + " repeats a class");
    if (p.query < 0 || p.target < 0 || p.query >= numClasses || p.target >= numClasses) {
      throw ArgumentError("pair " + p.key() + " names a class outside the dataset");
    }
    if (!seen.insert(p).second) throw ArgumentError("pair " + p.key() + " listed twice");
  }
  if (runId.empty() || runId.find('/') != std::string::npos) throw ArgumentError("run id must be a plain name");
  if (metrics.T < 1) throw ArgumentError("T must be at least 1");
  train.validate();
}

json ExperimentSpec::toJson() const {
  std::vector<std::string> keys;
  for (const auto& p : pairs) keys.push_back(p.key());
  return {{"dataset", dataset},   {"pairs", keys},
          {"train", train.toJson()}, {"metrics", metrics.toJson()},
          {"output_dir", outputDir.string()}, {"run_id", runId},
          {"classifier_role", classifierRole}, {"existing", exitKindName(existing)}};
}

ExperimentSpec ExperimentSpec::fromJson(const json& j) {
  ExperimentSpec s;
  s.dataset = j.value("dataset", s.dataset);
  for (const auto& p : j.value("pairs", std::vector<std::string>{})) s.pairs.push_back(ClassPair::parse(p));
  if (j.contains("train")) s.train = TrainConfig::fromJson(j.at("train"));
  if (j.contains("metrics")) s.metrics = MetricSettings::fromJson(j.at("metrics"));
  s.outputDir = j.value("output_dir", s.outputDir.string());
  s.runId = j.value("run_id", s.runId);
  s.classifierRole = j.value("classifier_role", s.classifierRole);
  s.existing = existingRunFrom(j.value("existing", std::string("refuse")));
  return s;
}

std::string ExperimentSpec::hash() const {
  auto j = toJson();
  j.erase("output_dir");
  j.erase("existing");
  j["train"].erase("pair");
  return sha256Hex(j.dump());
}

json ResultRow::toJson() const {
  return {{"run_id", runId}, {"pair", pair}, {"metric", metric},
          {"value", value},  {"count", count}, {"timestamp", timestamp}};
}

ResultRow ResultRow::fromJson(const json& j) {
  ResultRow r;
  r.runId = j.at("run_id").get<std::string>();
  r.pair = j.at("pair").get<std::string>();
  r.metric = j.at("metric").get<std::string>();
  const auto& names = metricNames();
  if (std::find(names.begin(), names.end(), r.metric) == names.end()) {
    throw ArgumentError("unknown metric '" + r.metric + "' in result row");
  }
  r.value = j.at("value").get<double>();
  r.count = j.at("count").get<int64_t>();
  r.timestamp = j.value("timestamp", "");
  return r;
}

void ResultStore::append(const std::vector<ResultRow>& rows) const {
  fs::create_directories(file_.parent_path());
  std::ofstream out(file_, std::ios::app);
  if (!out) throw IoError("cannot append to " + file_.string());
  for (const auto& r : rows) out << r.toJson().dump() << '\n';
  if (!out) throw IoError("failed appending to " + file_.string());
}

std::vector<ResultRow> ResultStore::read() const {
  std::vector<ResultRow> rows;
  if (!exists()) return rows;
  std::ifstream in(file_);
  std::string line;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    try {
      rows.push_back(ResultRow::fromJson(json::parse(line)));
    } catch (const json::exception& e) {
      throw IoError("malformed result row in " + file_.string() + ": " + e.what());
    }
  }
  return rows;
}

EvaluationModels loadEvaluationModels(const Manifest& manifest, const std::string& classifierRole) {
  EvaluationModels e;
  e.classifier = loadClassifier(manifest, classifierRole);
  e.features = classifierRole == roles::kClassifier ? e.classifier : loadClassifier(manifest, roles::kClassifier);
  e.aeFull = loadAutoencoder(manifest, roles::kAutoencoderFull);
  for (int64_t c = 0; c < e.classifier->numClasses(); ++c) {
    const auto role = roles::autoencoderForClass(c);
    if (manifest.has(role)) e.aeByClass[c] = loadAutoencoder(manifest, role);
  }
  return e;
}

json PairEvaluation::toJson() const {
  json m{{"pair", metrics.pair}, {"count", metrics.count}};
  for (const auto& name : metricNames()) m[name] = metrics.get(name);
  return {{"metrics", m},
          {"latent_shift", latentShift.toJson()},
          {"cycle_latent_median", cycleLatentMedian},
          {"positive_cout_fraction", positiveCoutFraction}};
}

PairEvaluation evaluatePair(const CounterfactualEngine& engine, const EvaluationModels& eval, const ClassPair& pair,
                            const torch::Tensor& queries, const torch::Tensor& realTarget,
                            const MetricSettings& settings) {
  if (queries.dim() != 4 || queries.size(0) == 0) throw ArgumentError("evaluation needs held-out queries");
  if (!eval.classifier || !eval.features) throw ConfigurationError("evaluation needs a classifier");
  auto aeQuery = eval.aeByClass.count(pair.query) ? eval.aeByClass.at(pair.query) : nullptr;
  auto aeTarget = eval.aeByClass.count(pair.target) ? eval.aeByClass.at(pair.target) : nullptr;

  std::vector<torch::Tensor> qs, cfs, masks, probs, zq, zcf, zcyc;
  PairEvaluation out;
  const auto n = queries.size(0);
  for (int64_t start = 0; start < n; start += kEvalChunk) {
    auto r = engine.fromImages(queries.slice(0, start, std::min(n, start + kEvalChunk)));
    if (start == 0) out.sample = sliceResult(r, std::min(settings.sheetRows, r.size()));
    qs.push_back(r.query);
    cfs.push_back(r.counterfactual);
    masks.push_back(r.mask);
    probs.push_back(r.cfProbs);
    zq.push_back(r.queryLatent);
    zcf.push_back(r.cfLatent);
    if (r.hasCycle()) zcyc.push_back(r.cycledLatent);
  }
  auto query = torch::cat(qs), cf = torch::cat(cfs), mask = torch::cat(masks);

  PairMetrics& m = out.metrics;
  m.pair = pair.key();
  m.count = n;
  m.validity = validity(torch::cat(probs), pair.target);
  m.proximity = proximity(query, cf);
  auto records = transitionRecords(*eval.classifier, query, cf, mask, settings.T, pair.query, pair.target);
  auto cout = coutFromRecords(records);
  m.cout = cout.cout;
  m.aupcQuery = cout.aupcQuery;
  m.aupcTarget = cout.aupcTarget;
  out.positiveCoutFraction =
      static_cast<double>(std::count_if(records.begin(), records.end(), [](const auto& r) { return r.cout > 0.0; })) /
      static_cast<double>(records.size());
  auto im = imScores(cf, aeQuery.get(), aeTarget.get(), eval.aeFull.get());
  m.im1 = im.im1;
  m.im2 = im.im2;
  auto fa = penultimate(*eval.features, cf);
  auto fb = penultimate(*eval.features, realTarget);
  m.fid = fid(fa, fb);
  m.kid = kid(fa, fb, settings.kid);

  auto latents = torch::cat(zq);
  out.latentShift = latentShiftStats(latents, torch::cat(zcf));
  if (!zcyc.empty()) {
    auto perQuery = (latents - torch::cat(zcyc)).abs().mean(1);
    out.cycleLatentMedian = perQuery.median().item<double>();
  }
  return out;
}

torch::Tensor contactSheet(const CFResult& result, int64_t rows) {
  if (result.size() == 0) throw ArgumentError("contact sheet needs at least one result");
  rows = std::min(rows, result.size());
  const auto channels = result.query.size(1);
  std::vector<std::vector<torch::Tensor>> grid;
  for (int64_t i = 0; i < rows; ++i) {
    auto cycled = result.hasCycle() ? result.cycled[i] : torch::zeros_like(result.query[i]);
    auto mask = result.mask[i].unsqueeze(0).expand({channels, -1, -1});
    grid.push_back({result.query[i], result.counterfactual[i], cycled, mask});
  }
  return tileGrid(grid);
}

MetricReport runExperiment(const ExperimentSpec& spec, const DatasetSplits& data, const Manifest& manifest,
                           const ExperimentLog& log) {
  spec.validate(data.test.numClasses);
  if (spec.dataset != data.test.id || spec.dataset != manifest.dataset()) {
    throw ConfigurationError("experiment, dataset and manifest disagree on the dataset id");
  }
  const auto runDir = spec.runDir();
  ResultStore store(runDir / "results.jsonl");
  if (fs::exists(runDir) && !fs::is_empty(runDir)) {
    const bool complete = fs::exists(runDir / "report.json") && !fs::exists(runDir / "FAILED");
    switch (spec.existing) {
      case ExistingRun::Refuse:
        throw StateError("run '" + spec.runId + "' already exists; pass the force flag to replace it");
      case ExistingRun::Reuse:
        if (complete) {
          auto report = MetricReport::fromJson(readJson(runDir / "report.json"));
          if (report.configHash != spec.hash()) {
            throw StateError("run '" + spec.runId + "' exists with a different spec");
          }
          say(log, "reusing results of run " + spec.runId);
          return report;
        }
        fs::remove_all(runDir);
        break;
      case ExistingRun::Force:
        fs::remove_all(runDir);
        break;
    }
  }
  fs::create_directories(runDir);
  writeText(runDir / "spec.json", spec.toJson().dump(2));

  MetricReport report;
  report.configHash = spec.hash();
  try {
    const auto eval = loadEvaluationModels(manifest, spec.classifierRole);
    for (const auto& pair : spec.pairs) {
      auto config = spec.train;
      config.pair = pair;
      auto models = loadModelSet(manifest, spec.classifierRole, config.discriminatorMode == DiscriminatorMode::CoTrain);
      auto checkpoint = trainOrReuse(config, models, manifest, spec.classifierRole, data.train, spec.outputDir, log);

      CounterfactualEngine engine(models, checkpoint.forward, checkpoint.backward, config.n);
      auto queries = data.test.ofClass(pair.query);
      if (spec.metrics.evalLimit > 0) queries = queries.slice(0, 0, spec.metrics.evalLimit);
      auto evaluation = evaluatePair(engine, eval, pair, queries, data.test.ofClass(pair.target), spec.metrics);

      const auto pairDir = runDir / "pairs" / pair.slug();
      auto detail = evaluation.toJson();
      detail["checkpoint"] = "checkpoints/" + trainingKey(config, manifest, spec.classifierRole);
      writeText(pairDir / "evaluation.json", detail.dump(2));
      writePng(pairDir / "contact_sheet.png", contactSheet(evaluation.sample, spec.metrics.sheetRows));
      store.append(rowsFor(spec.runId, evaluation.metrics, utcTimestamp()));
      report.pairs.push_back(evaluation.metrics);
      std::ostringstream msg;
      msg << "pair " << pair.key() << ": val " << evaluation.metrics.validity << " cout " << evaluation.metrics.cout
          << " prox " << evaluation.metrics.proximity << " im1 " << evaluation.metrics.im1 << " fid "
          << evaluation.metrics.fid;
      say(log, msg.str());
    }
  } catch (const std::exception& e) {
    writeText(runDir / "FAILED", std::string(e.what()) + "\n");
    throw;
  }
  report.aggregateRows();
  store.append(rowsFor(spec.runId, report.aggregate, utcTimestamp()));
  writeText(runDir / "report.tsv", report.toTable());
  writeText(runDir / "report.json", report.toJson().dump(2));
  return report;
}

const std::vector<std::string>& ablationVariants() {
  static const std::vector<std::string> variants{"cls", "cls+prx", "cls+prx+cyc", "full"};
  return variants;
}

LossWeights ablationWeights(const std::string& variant, const LossWeights& weights) {
  LossWeights w = weights;
  if (variant == "cls") {
    w.alpha = w.beta = w.gamma = 0.0;
  } else if (variant == "cls+prx") {
    w.beta = w.gamma = 0.0;
  } else if (variant == "cls+prx+cyc") {
    w.gamma = 0.0;
  } else if (variant != "full") {
    throw ArgumentError("unknown ablation variant '" + variant + "'");
  }
  return w;
}

std::map<std::string, MetricReport> runAblation(const ExperimentSpec& spec, const DatasetSplits& data,
                                                const Manifest& manifest, const ExperimentLog& log) {
  std::map<std::string, MetricReport> reports;
  for (const auto& variant : ablationVariants()) {
    auto s = spec;
    s.runId = spec.runId + "-" + variant;
    s.train.weights = ablationWeights(variant, spec.train.weights);
    say(log, "ablation variant " + variant);
    reports[variant] = runExperiment(s, data, manifest, log);
  }
  return reports;
}

json FaultyDemoResult::toJson() const {
  auto row = [](const PairMetrics& m) {
    json j{{"pair", m.pair}, {"count", m.count}};
    for (const auto& name : metricNames()) j[name] = m.get(name);
    return j;
  };
  return {{"left_out", row(leftOut)},
          {"control", row(control)},
          {"faulty_accuracy", faultyAccuracy},
          {"im1_degradation", im1Degradation}};
}

FaultyDemoResult runFaultyDemo(const FaultyDemoSpec& demo, ExperimentSpec base, const DatasetSplits& data,
                               Manifest& manifest, const ExperimentLog& log) {
  if (demo.controlTarget == demo.leftOutClass || demo.queryClass == demo.leftOutClass) {
    throw ArgumentError("query and control classes must differ from the left-out class");
  }
  auto entry = makeFaultyClassifier(manifest, data, demo.leftOutClass, demo.classifierSeed,
                                    [&](const std::string& m) { say(log, m); });
  base.pairs = {{demo.queryClass, demo.leftOutClass}, {demo.queryClass, demo.controlTarget}};
  base.classifierRole = roles::faultyClassifier(demo.leftOutClass);
  FaultyDemoResult result;
  result.report = runExperiment(base, data, manifest, log);
  result.leftOut = result.report.pairs.at(0);
  result.control = result.report.pairs.at(1);
  result.faultyAccuracy = entry.attributes.at("test_accuracy").get<double>();
  result.im1Degradation = result.control.im1 > 0.0 ? result.leftOut.im1 / result.control.im1 - 1.0 : 0.0;
  writeText(base.runDir() / "faulty_demo.json", result.toJson().dump(2));
  return result;
}

std::string resultTableHeader() { return "run_id\tpair\tmetric\tvalue\tcount\ttimestamp"; }

fs::path exportResults(const fs::path& outputDir, const std::vector<std::string>& runIds, const std::string& format,
                       const fs::path& outDir) {
  if (format != "tsv" && format != "json") throw ArgumentError("export format must be tsv or json");
  std::vector<ResultRow> rows;
  for (const auto& id : runIds) {
    const auto runDir = outputDir / "runs" / id;
    if (!fs::exists(runDir)) throw NotFoundError("unknown run id '" + id + "'");
    auto stored = ResultStore(runDir / "results.jsonl").read();
    rows.insert(rows.end(), stored.begin(), stored.end());
  }
  fs::create_directories(outDir);
  fs::path table;
  if (format == "tsv") {
    table = outDir / "results.tsv";
    std::ostringstream out;
    out << resultTableHeader() << '\n';
    out << std::setprecision(17);
    for (const auto& r : rows) {
      out << r.runId << '\t' << r.pair << '\t' << r.metric << '\t' << r.value << '\t' << r.count << '\t'
          << r.timestamp << '\n';
    }
    writeText(table, out.str());
  } else {
    table = outDir / "results.json";
    json arr = json::array();
    for (const auto& r : rows) arr.push_back(r.toJson());
    writeText(table, arr.dump(2));
  }
  for (const auto& id : runIds) {
    const auto pairsDir = outputDir / "runs" / id / "pairs";
    if (!fs::exists(pairsDir)) continue;
    for (const auto& entry : fs::directory_iterator(pairsDir)) {
      const auto sheet = entry.path() / "contact_sheet.png";
      if (!fs::exists(sheet)) continue;
      const auto target = outDir / id / (entry.path().filename().string() + ".png");
      fs::create_directories(target.parent_path());
      fs::copy_file(sheet, target, fs::copy_options::overwrite_existing);
    }
  }
  return table;
}

}  // namespace latentcf
