#include <gtest/gtest.h>

#include <chrono>
#include <fstream>
#include <thread>

#include "json.hpp"
#include "latentcf/errors.hpp"
#include "latentcf/hashing.hpp"
#include "latentcf/image_io.hpp"
#include "latentcf/service.hpp"
#include "support/temp_dir.hpp"
#include "support/toy_models.hpp"

#include <httplib.h>  // last: it pulls in <resolv.h>, whose macros clash with Eigen

namespace latentcf {
namespace {

using nlohmann::json;
using testing::kToyDim;

RegisteredPair toyEntry(const std::string& key, ClassPair pair, TransformNetwork g, TransformNetwork h) {
  auto m = testing::toyModelSet(2);
  m.classifier = std::make_shared<testing::ToyClassifier>(3, 8);
  RegisteredPair e;
  e.key = key;
  e.pair = pair;
  e.classifierRole = "classifier";
  e.checkpoint = "step-0001";
  e.config = {{"weights", {{"alpha", 0.1}, {"beta", 0.1}, {"gamma", 0.001}}}};
  e.engine = std::make_shared<CounterfactualEngine>(m, g, h, 1);
  return e;
}

std::shared_ptr<const PairRegistry> toyRegistry() {
  auto reg = std::make_shared<PairRegistry>();
  auto id = TransformNetwork::identity(kToyDim, Direction::Forward);
  auto g = TransformNetwork::initialize(kToyDim, 8, 3, Direction::Forward);
  auto h = TransformNetwork::initialize(kToyDim, 8, 4, Direction::Backward);
  reg->add(toyEntry("0:2", {0, 2}, id, id));
  reg->add(toyEntry("1:2", {1, 2}, g, h));
  return reg;
}

json call(const ExplainService& s, const std::string& method, const std::string& path, const json& body,
          int expectStatus = 200) {
  auto r = s.handle(method, path, body.is_null() ? "" : body.dump());
  EXPECT_EQ(r.status, expectStatus) << r.body;
  EXPECT_EQ(r.contentType, "application/json");
  return json::parse(r.body);
}

TEST(Registry, RejectsDuplicates) {
  PairRegistry reg;
  auto id = TransformNetwork::identity(kToyDim, Direction::Forward);
  reg.add(toyEntry("0:2", {0, 2}, id, id));
  EXPECT_THROW(reg.add(toyEntry("0:2", {0, 2}, id, id)), ConfigurationError);
  EXPECT_EQ(reg.find("9:9"), nullptr);
  EXPECT_EQ(reg.keys(), std::vector<std::string>{"0:2"});
}

TEST(Service, HealthAndPairs) {
  ExplainService s(toyRegistry());
  auto h = call(s, "GET", "/health", nullptr);
  EXPECT_EQ(h.at("schema_version"), kServiceSchemaVersion);
  EXPECT_EQ(h.at("status"), "ok");
  EXPECT_EQ(h.at("pairs"), 2);
  auto p = call(s, "GET", "/pairs", nullptr);
  ASSERT_EQ(p.at("pairs").size(), 2u);
  EXPECT_EQ(p.at("pairs")[0].at("key"), "0:2");
  EXPECT_EQ(p.at("pairs")[0].at("latent_dim"), kToyDim);
  EXPECT_EQ(p.at("pairs")[0].at("num_classes"), 3);
}

TEST(Service, CounterfactualFromSeed) {
  ExplainService s(toyRegistry());
  auto r = call(s, "POST", "/counterfactual", {{"pair", "1:2"}, {"input", "sample:7"}});
  EXPECT_EQ(r.at("schema_version"), 1);
  EXPECT_EQ(r.at("target_class"), 2);
  for (const char* panel : {"query", "counterfactual", "cycled"}) {
    const auto& probs = r.at(panel).at("probs");
    ASSERT_EQ(probs.size(), 3u);
    double sum = 0;
    for (double v : probs) sum += v;
    EXPECT_NEAR(sum, 1.0, 1e-6) << panel;
    auto img = decodePng(base64Decode(r.at(panel).at("image").get<std::string>()));
    EXPECT_EQ(img.sizes(), (std::vector<int64_t>{1, 6, 6}));
  }
  EXPECT_EQ(r.at("latents").at("query").size(), static_cast<size_t>(kToyDim));
  // Object form with the same seed is the same query.
  auto again = call(s, "POST", "/counterfactual", {{"pair", "1:2"}, {"input", {{"seed", 7}}}});
  EXPECT_EQ(again.at("counterfactual"), r.at("counterfactual"));
}

TEST(Service, ChainingUsesTheCounterfactualAsQuery) {
  ExplainService s(toyRegistry());
  auto first = call(s, "POST", "/counterfactual", {{"pair", "1:2"}, {"input", "sample:3"}});
  auto latent = first.at("latents").at("counterfactual");
  auto second = call(s, "POST", "/counterfactual", {{"pair", "1:2"}, {"input", {{"latent", latent}}}});
  EXPECT_EQ(second.at("query").at("image"), first.at("counterfactual").at("image"));
}

TEST(Service, ImageInput) {
  ExplainService s(toyRegistry());
  auto img = base64Encode(encodePng(torch::full({1, 6, 6}, 0.4)));
  auto r = call(s, "POST", "/counterfactual", {{"pair", "0:2"}, {"input", {{"image", img}}}});
  EXPECT_TRUE(r.contains("counterfactual"));
  auto rgb = base64Encode(encodePng(torch::full({3, 6, 6}, 0.4)));
  call(s, "POST", "/counterfactual", {{"pair", "0:2"}, {"input", {{"image", rgb}}}});
  auto wrong = base64Encode(encodePng(torch::full({1, 5, 6}, 0.4)));
  call(s, "POST", "/counterfactual", {{"pair", "0:2"}, {"input", {{"image", wrong}}}}, 400);
  call(s, "POST", "/counterfactual", {{"pair", "0:2"}, {"input", {{"image", "!!notbase64"}}}}, 400);
}

TEST(Service, TraversalFramesEndAtCounterfactual) {
  ExplainService s(toyRegistry());
  auto cf = call(s, "POST", "/counterfactual", {{"pair", "1:2"}, {"input", "sample:5"}, {"n", 3}});
  auto t = call(s, "POST", "/traverse", {{"pair", "1:2"}, {"input", "sample:5"}, {"steps", 3}});
  ASSERT_EQ(t.at("frames").size(), 4u);
  EXPECT_EQ(t.at("frames")[0], cf.at("query"));
  EXPECT_EQ(t.at("frames")[3], cf.at("counterfactual"));
  call(s, "POST", "/traverse", {{"pair", "1:2"}, {"input", "sample:5"}, {"steps", 9}}, 400);
}

TEST(Service, IdentityTransitionHasConstantCurves) {
  ExplainService s(toyRegistry());
  auto t = call(s, "POST", "/transition", {{"pair", "0:2"}, {"input", "sample:11"}, {"T", 6}});
  EXPECT_EQ(t.at("T"), 6);
  const auto q = t.at("query_curve").get<std::vector<double>>();
  const auto g = t.at("target_curve").get<std::vector<double>>();
  ASSERT_EQ(q.size(), 7u);
  for (size_t k = 1; k < q.size(); ++k) {
    EXPECT_EQ(q[k], q[0]);
    EXPECT_EQ(g[k], g[0]);
  }
  // Constant curves integrate to their value, so COUT is the score gap.
  EXPECT_NEAR(t.at("cout").get<double>(), g[0] - q[0], 1e-12);
}

TEST(Service, ErrorStatuses) {
  ExplainService s(toyRegistry());
  call(s, "POST", "/counterfactual", {{"pair", "5:6"}, {"input", "sample:1"}}, 404);
  call(s, "POST", "/counterfactual", {{"input", "sample:1"}}, 400);
  call(s, "POST", "/counterfactual", {{"pair", "0:2"}}, 400);
  call(s, "POST", "/counterfactual", {{"pair", "0:2"}, {"input", "sample:x"}}, 400);
  call(s, "POST", "/counterfactual", {{"pair", "0:2"}, {"input", {{"latent", {1, 2}}}}}, 400);
  call(s, "POST", "/counterfactual", {{"pair", "0:2"}, {"input", "sample:1"}, {"n", 99}}, 400);
  call(s, "POST", "/transition", {{"pair", "0:2"}, {"input", "sample:1"}, {"T", 0}}, 400);
  call(s, "GET", "/counterfactual", nullptr, 405);
  call(s, "POST", "/health", nullptr, 405);
  call(s, "GET", "/nowhere", nullptr, 404);
  auto r = s.handle("POST", "/counterfactual", "{not json");
  EXPECT_EQ(r.status, 400);
  EXPECT_EQ(s.handle("POST", "/counterfactual", "[1,2]").status, 400);
}

TEST(Service, SwapRegistryIsVisible) {
  ExplainService s(toyRegistry());
  s.swapRegistry(std::make_shared<PairRegistry>());
  EXPECT_EQ(call(s, "GET", "/health", nullptr).at("pairs"), 0);
  call(s, "POST", "/counterfactual", {{"pair", "0:2"}, {"input", "sample:1"}}, 404);
}

TEST(Service, ServesOverHttpWithStaticFiles) {
  testing::TempDir web;
  std::ofstream(web / "index.html") << "<html>explorer</html>";
  ExplainService s(toyRegistry(), web.path());
  const int port = 18000 + static_cast<int>(std::chrono::steady_clock::now().time_since_epoch().count() % 2000);
  std::thread server([&] { s.serve("127.0.0.1", port); });
  httplib::Client client("127.0.0.1", port);
  httplib::Result health;
  for (int i = 0; i < 100 && !health; ++i) {
    std::this_thread::sleep_for(std::chrono::milliseconds(20));
    health = client.Get("/health");
  }
  ASSERT_TRUE(health);
  EXPECT_EQ(health->status, 200);
  auto cf = client.Post("/counterfactual", json{{"pair", "1:2"}, {"input", "sample:2"}}.dump(), "application/json");
  ASSERT_TRUE(cf);
  EXPECT_EQ(cf->status, 200);
  EXPECT_EQ(json::parse(cf->body).at("pair"), "1:2");
  auto bad = client.Post("/counterfactual", "{", "application/json");
  ASSERT_TRUE(bad);
  EXPECT_EQ(bad->status, 400);
  auto page = client.Get("/index.html");
  ASSERT_TRUE(page);
  EXPECT_EQ(page->body, "<html>explorer</html>");
  s.stop();
  server.join();
}

}  // namespace
}  // namespace latentcf
