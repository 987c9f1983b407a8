#include <gtest/gtest.h>

#include <fstream>
#include <sstream>

#include "latentcf/backbones.hpp"
#include "latentcf/errors.hpp"
#include "latentcf/experiment.hpp"
#include "latentcf/image_io.hpp"
#include "latentcf/service.hpp"
#include "support/temp_dir.hpp"

namespace latentcf {
namespace {

using nlohmann::json;
using testing::TempDir;
namespace fs = std::filesystem;

TEST(ExperimentSpec, Validation) {
  ExperimentSpec s;
  s.runId = "r";
  s.pairs = {{3, 8}};
  EXPECT_NO_THROW(s.validate(10));
  auto empty = s;
  empty.pairs.clear();
  EXPECT_THROW(empty.validate(10), ArgumentError);
  auto dup = s;
  dup.pairs = {{3, 8}, {3, 8}};
  EXPECT_THROW(dup.validate(10), ArgumentError);
  auto range = s;
  range.pairs = {{3, 10}};
  EXPECT_THROW(range.validate(10), ArgumentError);
  auto id = s;
  id.runId = "a/b";
  EXPECT_THROW(id.validate(10), ArgumentError);
}

TEST(ExperimentSpec, JsonRoundTripAndHashScope) {
  ExperimentSpec s;
  s.runId = "r1";
  s.pairs = {{3, 8}, {4, 9}};
  s.metrics.T = 20;
  s.train.steps = 77;
  auto back = ExperimentSpec::fromJson(s.toJson());
  EXPECT_EQ(back.pairs, s.pairs);
  EXPECT_EQ(back.metrics.T, 20);
  EXPECT_EQ(back.train, s.train);
  EXPECT_EQ(back.hash(), s.hash());
  auto moved = s;
  moved.outputDir = "elsewhere";
  moved.existing = ExistingRun::Force;
  EXPECT_EQ(moved.hash(), s.hash());
  auto changed = s;
  changed.train.weights.beta = 0.0;
  EXPECT_NE(changed.hash(), s.hash());
}

TEST(ResultRow, RejectsUnknownMetric) {
  ResultRow r{"run", "3:8", "validity", 0.5, 10, "2024-01-01T00:00:00Z"};
  auto back = ResultRow::fromJson(r.toJson());
  EXPECT_EQ(back.value, 0.5);
  auto j = r.toJson();
  j["metric"] = "accuracy";
  EXPECT_THROW(ResultRow::fromJson(j), ArgumentError);
}

TEST(ResultStore, AppendsAndReads) {
  TempDir dir;
  ResultStore store(dir / "results.jsonl");
  EXPECT_FALSE(store.exists());
  store.append({{"r", "3:8", "cout", 0.1, 5, "t"}});
  store.append({{"r", "3:8", "fid", 1.0 / 3.0, 5, "t"}});
  auto rows = store.read();
  ASSERT_EQ(rows.size(), 2u);
  EXPECT_EQ(rows[1].value, 1.0 / 3.0);
}

TEST(Export, EmptyRunListGivesHeaderOnly) {
  TempDir dir;
  auto table = exportResults(dir / "results", {}, "tsv", dir / "out");
  std::ifstream in(table);
  std::stringstream text;
  text << in.rdbuf();
  EXPECT_EQ(text.str(), resultTableHeader() + "\n");
  EXPECT_THROW(exportResults(dir / "results", {"nope"}, "tsv", dir / "out"), NotFoundError);
  EXPECT_THROW(exportResults(dir / "results", {}, "xml", dir / "out"), ArgumentError);
}

TEST(Export, ValuesMatchStoredRowsBitExact) {
  TempDir dir;
  const double tricky = 0.1 + 0.2;
  ResultStore(dir / "results" / "runs" / "r" / "results.jsonl").append({{"r", "3:8", "proximity", tricky, 3, "t"}});
  auto table = exportResults(dir / "results", {"r"}, "tsv", dir / "out");
  std::ifstream in(table);
  std::string header, line;
  std::getline(in, header);
  std::getline(in, line);
  std::vector<std::string> fields;
  std::stringstream ss(line);
  for (std::string f; std::getline(ss, f, '\t');) fields.push_back(f);
  ASSERT_EQ(fields.size(), 6u);
  EXPECT_EQ(std::stod(fields[3]), tricky);
  auto json = exportResults(dir / "results", {"r"}, "json", dir / "out");
  std::ifstream jin(json);
  EXPECT_EQ(json::parse(jin)[0].at("value").get<double>(), tricky);
}

TEST(Ablation, VariantWeights) {
  const LossWeights w;
  EXPECT_EQ(ablationVariants(), (std::vector<std::string>{"cls", "cls+prx", "cls+prx+cyc", "full"}));
  EXPECT_EQ(ablationWeights("cls", w), (LossWeights{0, 0, 0}));
  EXPECT_EQ(ablationWeights("cls+prx", w), (LossWeights{0.1, 0, 0}));
  EXPECT_EQ(ablationWeights("cls+prx+cyc", w), (LossWeights{0.1, 0.1, 0}));
  EXPECT_EQ(ablationWeights("full", w), w);
  EXPECT_THROW(ablationWeights("adv", w), ArgumentError);
}

TEST(ContactSheet, FourColumnsPerRow) {
  CFResult r;
  r.query = torch::rand({3, 1, 28, 28});
  r.counterfactual = torch::rand({3, 1, 28, 28});
  r.cycled = torch::rand({3, 1, 28, 28});
  r.mask = torch::rand({3, 28, 28});
  auto sheet = contactSheet(r, 2);
  EXPECT_EQ(sheet.size(1), 2 * 28 + 3);
  EXPECT_EQ(sheet.size(2), 4 * 28 + 5);
}

// A miniature end-to-end pipeline on synthetic 28x28 digits-like data: ten
// classes of bars at different positions. Small enough to run in seconds.
class MiniPipeline : public ::testing::Test {
 protected:
  static void SetUpTestSuite() {
    root_ = new TempDir();
    data_ = new DatasetSplits(makeData());
    BackboneOptions o;
    o.dataset = "fashion-mnist";
    o.seed = 1;
    o.latentDim = 8;
    o.classifierHidden = 8;
    o.classifierEpochs = 2;
    o.accuracyFloor = 0.0;
    o.ganWidth = 8;
    o.ganEpochs = 1;
    o.ganBatch = 32;
    o.encoderWidth = 8;
    o.encoderSteps = 20;
    o.aeHidden = 16;
    o.aeCode = 4;
    o.aeEpochsFull = 1;
    o.aeEpochsClass = 1;
    manifest_ = new Manifest(prepareBackbones(o, *data_, *root_ / "models"));
  }
  static void TearDownTestSuite() {
    delete manifest_;
    delete data_;
    delete root_;
  }

  static Dataset makeSplit(int perClass, uint64_t seed) {
    auto gen = at::make_generator<at::CPUGeneratorImpl>(seed);
    auto images = torch::rand({perClass * 10, 1, 28, 28}, gen) * 0.1;
    auto labels = torch::arange(10, torch::kLong).repeat({perClass});
    for (int64_t i = 0; i < labels.size(0); ++i) {
      const auto c = labels[i].item<int64_t>();
      images[i][0].slice(0, 2 + 2 * c, 5 + 2 * c).slice(1, 4, 24).fill_(0.9);
    }
    return {"fashion-mnist", images, labels, 10};
  }
  static DatasetSplits makeData() { return {makeSplit(30, 1), makeSplit(12, 2)}; }

  static ExperimentSpec spec(const std::string& runId) {
    ExperimentSpec s;
    s.dataset = "fashion-mnist";
    s.pairs = {{2, 7}};
    s.runId = runId;
    s.outputDir = *root_ / "results";
    s.train.steps = 6;
    s.train.batchSize = 8;
    s.train.checkpointEvery = 3;
    s.metrics.T = 10;
    s.metrics.evalLimit = 12;
    s.metrics.kid = {2, 6, 0};
    s.metrics.sheetRows = 3;
    return s;
  }

  static TempDir* root_;
  static DatasetSplits* data_;
  static Manifest* manifest_;
};

TempDir* MiniPipeline::root_ = nullptr;
DatasetSplits* MiniPipeline::data_ = nullptr;
Manifest* MiniPipeline::manifest_ = nullptr;

TEST_F(MiniPipeline, ManifestRecordsEveryRole) {
  for (const auto& role : {roles::kClassifier, roles::kGenerator, roles::kDiscriminator, roles::kEncoder,
                           roles::kAutoencoderFull, roles::autoencoderForClass(0), roles::autoencoderForClass(9)}) {
    EXPECT_TRUE(manifest_->has(role)) << role;
    EXPECT_NO_THROW(manifest_->verify(role));
  }
  EXPECT_TRUE(manifest_->entry(roles::kClassifier).attributes.contains("test_accuracy"));
  // A second prepare with the same options reuses every file.
  auto again = Manifest::load(manifest_->file());
  EXPECT_EQ(again.hash(), manifest_->hash());
}

TEST_F(MiniPipeline, RunPersistsResultsAndReusesCheckpoints) {
  auto s = spec("mini");
  auto report = runExperiment(s, *data_, *manifest_);
  ASSERT_EQ(report.pairs.size(), 1u);
  EXPECT_EQ(report.pairs[0].pair, "2:7");
  EXPECT_EQ(report.pairs[0].count, 12);
  EXPECT_GE(report.pairs[0].validity, 0.0);
  EXPECT_LE(report.pairs[0].validity, 1.0);
  EXPECT_TRUE(std::isfinite(report.pairs[0].fid));
  const auto run = s.runDir();
  for (const char* f : {"spec.json", "report.json", "report.tsv", "results.jsonl"}) {
    EXPECT_TRUE(fs::exists(run / f)) << f;
  }
  auto sheet = readPng(run / "pairs" / "2-7" / "contact_sheet.png");
  EXPECT_EQ(sheet.size(1), 3 * 28 + 4);
  EXPECT_EQ(sheet.size(2), 4 * 28 + 5);
  auto detail = json::parse(std::ifstream(run / "pairs" / "2-7" / "evaluation.json"));
  const auto checkpoint = s.outputDir / detail.at("checkpoint").get<std::string>();
  auto timing = json::parse(std::ifstream(checkpoint / "training.json"));
  EXPECT_GT(timing.at("seconds").get<double>(), 0.0);
  EXPECT_EQ(timing.at("steps").get<int64_t>(), s.train.steps);

  // Existing-run policies.
  EXPECT_THROW(runExperiment(s, *data_, *manifest_), StateError);
  auto reuse = s;
  reuse.existing = ExistingRun::Reuse;
  EXPECT_EQ(runExperiment(reuse, *data_, *manifest_).toTable(), report.toTable());
  auto forced = s;
  forced.existing = ExistingRun::Force;
  std::vector<std::string> messages;
  auto again = runExperiment(forced, *data_, *manifest_, [&](const std::string& m) { messages.push_back(m); });
  EXPECT_TRUE(std::any_of(messages.begin(), messages.end(),
                          [](const std::string& m) { return m.find("reusing trained") != std::string::npos; }));
  EXPECT_EQ(again.toTable(), report.toTable());

  // Export reproduces the stored rows and copies the contact sheet.
  auto table = exportResults(s.outputDir, {"mini"}, "tsv", *root_ / "export");
  EXPECT_TRUE(fs::exists(table));
  EXPECT_TRUE(fs::exists(*root_ / "export" / "mini" / "2-7.png"));
  const auto rows = ResultStore(run / "results.jsonl").read();
  std::ifstream in(table);
  std::string line;
  std::getline(in, line);
  size_t n = 0;
  while (std::getline(in, line)) ++n;
  EXPECT_EQ(n, rows.size());
  EXPECT_EQ(rows.size(), 2 * metricNames().size());
}

TEST_F(MiniPipeline, CheckpointsServeBothDirections) {
  auto s = spec("served");
  runExperiment(s, *data_, *manifest_);
  auto registry = buildRegistry(*manifest_, s.outputDir / "checkpoints");
  EXPECT_NE(registry->find("2:7"), nullptr);
  EXPECT_NE(registry->find("7:2"), nullptr);
  ExplainService service(registry);
  auto r = service.handle("POST", "/counterfactual", json{{"pair", "7:2"}, {"input", "sample:1"}}.dump());
  EXPECT_EQ(r.status, 200) << r.body;
}

TEST_F(MiniPipeline, FailedRunLeavesMarker) {
  auto s = spec("broken");
  s.pairs = {{2, 7}};
  auto broken = *manifest_;
  broken.erase(roles::autoencoderForClass(7));
  EXPECT_THROW(runExperiment(s, *data_, broken), Error);
  EXPECT_TRUE(fs::exists(s.runDir() / "FAILED"));
}

TEST_F(MiniPipeline, FaultyClassifierIsFlagged) {
  auto m = Manifest::load(manifest_->file());
  auto entry = makeFaultyClassifier(m, *data_, 9, 50);
  EXPECT_TRUE(entry.attributes.at("faulty").get<bool>());
  EXPECT_EQ(entry.attributes.at("left_out_class"), 9);
  EXPECT_TRUE(m.has(roles::faultyClassifier(9)));
  EXPECT_THROW(makeFaultyClassifier(m, *data_, 10, 50), ArgumentError);
}

}  // namespace
}  // namespace latentcf
