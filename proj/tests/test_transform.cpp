#include <gtest/gtest.h>

#include <fstream>

#include "latentcf/errors.hpp"
#include "latentcf/latent_sampling.hpp"
#include "latentcf/transform.hpp"
#include "latentcf/types.hpp"
#include "support/temp_dir.hpp"
#include "support/toy_models.hpp"

namespace latentcf {
namespace {

using testing::TempDir;

TEST(ClassPair, ParsesAndFormats) {
  auto p = ClassPair::parse("3:8");
  EXPECT_EQ(p.query, 3);
  EXPECT_EQ(p.target, 8);
  EXPECT_EQ(p.key(), "3:8");
  EXPECT_EQ(p.slug(), "3-8");
  EXPECT_EQ(ClassPair::parse("4-9"), (ClassPair{4, 9}));
  EXPECT_EQ(p.reversed(), (ClassPair{8, 3}));
}

TEST(ClassPair, RejectsMalformedText) {
  for (const char* bad : {"", "3", ":8", "3:", "a:b", "3:3", "-1:2", "3:8x"}) {
    EXPECT_THROW(ClassPair::parse(bad), ArgumentError) << bad;
  }
}

TEST(LatentBatch, ValidatesShapeAndFiniteness) {
  EXPECT_NO_THROW(LatentBatch(torch::zeros({2, 3})));
  EXPECT_THROW(LatentBatch(torch::zeros({3})), ArgumentError);
  EXPECT_THROW(LatentBatch(torch::zeros({0, 3})), ArgumentError);
  auto bad = torch::zeros({2, 3});
  bad[1][1] = std::numeric_limits<float>::quiet_NaN();
  EXPECT_THROW(LatentBatch{bad}, ArgumentError);
}

TEST(ImageBatch, RangeCheck) {
  ImageBatch b(torch::full({1, 1, 2, 2}, 0.5));
  EXPECT_TRUE(b.inRange());
  ImageBatch c(torch::full({1, 1, 2, 2}, 1.01));
  EXPECT_FALSE(c.inRange());
  EXPECT_TRUE(c.inRange(0.0, 1.0, 0.02));
  EXPECT_THROW(ImageBatch(torch::zeros({1, 2, 2})), ArgumentError);
}

TEST(TransformNetwork, IdentityIsExact) {
  auto g = TransformNetwork::identity(5, Direction::Forward, torch::kFloat64);
  auto z = testing::seededNormal({7, 5}, 3);
  EXPECT_TRUE(torch::equal(g.forward(z), z));
  EXPECT_TRUE(torch::equal(g.applyN(z, 4), z));
}

TEST(TransformNetwork, ZeroStepsReturnsInput) {
  auto g = TransformNetwork::initialize(4, 16, 1, Direction::Forward);
  auto z = torch::randn({3, 4});
  EXPECT_TRUE(torch::equal(g.applyN(z, 0), z));
}

TEST(TransformNetwork, DoublingMapComposes) {
  auto g = TransformNetwork::scaling(2, 2.0, Direction::Forward, torch::kFloat64);
  auto z = torch::tensor({{1.0, 0.0}}, torch::kFloat64);
  auto out = g.applyN(z, 2);
  EXPECT_DOUBLE_EQ(out[0][0].item<double>(), 4.0);
  EXPECT_DOUBLE_EQ(out[0][1].item<double>(), 0.0);
}

TEST(TransformNetwork, ApplyNMatchesRepeatedForward) {
  auto g = TransformNetwork::initialize(4, 16, 9, Direction::Forward, true);
  auto z = torch::randn({5, 4});
  auto manual = g.forward(g.forward(g.forward(z)));
  EXPECT_TRUE(torch::equal(g.applyN(z, 3), manual));
}

TEST(TransformNetwork, RejectsBadArguments) {
  auto g = TransformNetwork::initialize(4, 8, 0, Direction::Forward);
  EXPECT_THROW(g.applyN(torch::zeros({2, 3}), 1), ArgumentError);
  EXPECT_THROW(g.applyN(torch::zeros({2, 4}), -1), ArgumentError);
  EXPECT_THROW(TransformNetwork::initialize(0, 8, 0, Direction::Forward), ArgumentError);
}

TEST(TransformNetwork, SeededInitializationIsReproducible) {
  auto a = TransformNetwork::initialize(4, 8, 42, Direction::Forward);
  auto b = TransformNetwork::initialize(4, 8, 42, Direction::Forward);
  auto c = TransformNetwork::initialize(4, 8, 43, Direction::Forward);
  EXPECT_EQ(a.digest(), b.digest());
  EXPECT_NE(a.digest(), c.digest());
}

TEST(TransformNetwork, CloneIsIndependent) {
  auto a = TransformNetwork::initialize(4, 8, 1, Direction::Forward);
  auto b = a.clone();
  {
    torch::NoGradGuard guard;
    b.parameters()[0].add_(1.0);
  }
  EXPECT_NE(a.digest(), b.digest());
}

TEST(TransformNetwork, SaveLoadRoundTripIsBitExact) {
  TempDir dir;
  auto g = TransformNetwork::initialize(6, 12, 5, Direction::Backward, true);
  g.save(dir / "g.bin", 3);
  TransformHeader header;
  auto loaded = TransformNetwork::load(dir / "g.bin", &header);
  EXPECT_EQ(loaded.digest(), g.digest());
  EXPECT_EQ(header.dim, 6);
  EXPECT_EQ(header.hidden, 12);
  EXPECT_EQ(header.steps, 3);
  EXPECT_EQ(header.direction, Direction::Backward);
  EXPECT_TRUE(header.residual);
  auto z = torch::randn({4, 6});
  EXPECT_TRUE(torch::equal(loaded.forward(z), g.forward(z)));
}

TEST(TransformNetwork, LoadRejectsGarbage) {
  TempDir dir;
  std::ofstream(dir / "junk.bin") << "not a transform";
  EXPECT_THROW(TransformNetwork::load(dir / "junk.bin"), IoError);
  EXPECT_THROW(TransformNetwork::load(dir / "missing.bin"), IoError);
}

TEST(SampleLatents, ReproducibleAndTruncated) {
  auto a = sampleLatents(64, 8, 17).values();
  auto b = sampleLatents(64, 8, 17).values();
  EXPECT_TRUE(torch::equal(a, b));
  auto t = sampleLatents(2000, 8, 3, 0.5).values();
  EXPECT_LE(t.abs().max().item<double>(), 0.5);
  // Redrawing (not clipping) leaves no mass exactly at the bound.
  EXPECT_EQ(t.abs().eq(0.5).sum().item<int64_t>(), 0);
  EXPECT_THROW(sampleLatents(0, 8, 1), ArgumentError);
  EXPECT_THROW(sampleLatents(4, 8, 1, 0.0), ArgumentError);
}

/// Images whose brightness follows the sign of the first latent coordinate.
class SignGenerator final : public GeneratorModel {
 public:
  using GeneratorModel::generate;
  torch::Tensor generate(const torch::Tensor& z) const override {
    auto level = torch::sigmoid(100.0 * z.select(1, 0).to(torch::kFloat64));
    return level.view({-1, 1, 1, 1}).expand({-1, 1, 6, 6});
  }
  int64_t latentDim() const override { return 4; }
  ImageShape imageShape() const override { return {1, 6, 6}; }
};

TEST(RejectionSampling, AlwaysAcceptingClassifier) {
  testing::ConstantClassifier always({0.0, 5.0});
  SignGenerator g;
  auto r = rejectionSampleClass(always, g, 1, 100, 1000, 4);
  EXPECT_EQ(r.latents.size(), 100);
  EXPECT_DOUBLE_EQ(r.acceptanceRate, 1.0);
}

TEST(RejectionSampling, BalancedToyAcceptsHalf) {
  testing::BrightnessClassifier classifier;
  SignGenerator g;
  RejectionOptions options;
  options.chunk = 10000;
  auto r = rejectionSampleClass(classifier, g, 1, 1, 10000, 8, options);
  EXPECT_EQ(r.draws, 10000);
  EXPECT_NEAR(r.acceptanceRate, 0.5, 0.05);
  auto decoded = classifier.predict(g.generate(r.latents.values()));
  EXPECT_TRUE(decoded.eq(1).all().item<bool>());
}

TEST(RejectionSampling, ReportsExhaustedBudget) {
  testing::ConstantClassifier never({5.0, 0.0});
  SignGenerator g;
  try {
    rejectionSampleClass(never, g, 1, 10, 500, 1);
    FAIL() << "expected BudgetExhaustedError";
  } catch (const BudgetExhaustedError& e) {
    EXPECT_EQ(e.accepted(), 0);
    EXPECT_EQ(e.requested(), 10);
    EXPECT_GE(e.draws(), 500);
  }
}

TEST(Inversion, RecoversLatentsOfGeneratedImages) {
  testing::ToyGenerator g;
  auto z = testing::seededNormal({3, testing::kToyDim}, 21, 0.7);
  auto x = g.generate(z);
  InversionOptions options;
  options.restarts = 2;
  auto r = invertImages(g, ImageBatch(x), 3000, 0.05, 5, options);
  EXPECT_LT(r.loss.max().item<double>(), 1e-8);
  EXPECT_TRUE(torch::allclose(r.latents.values().to(torch::kFloat64), z, 0.0, 1e-4));
}

TEST(Inversion, RejectsShapeMismatch) {
  testing::ToyGenerator g;
  EXPECT_THROW(invertImages(g, ImageBatch(torch::zeros({1, 1, 5, 5})), 10, 0.1, 0), ArgumentError);
}

}  // namespace
}  // namespace latentcf
