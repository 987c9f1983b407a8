#include "latentcf/service.hpp"

#include <algorithm>
#include <fstream>

#include "latentcf/errors.hpp"
#include "latentcf/hashing.hpp"
#include "latentcf/image_io.hpp"
#include "latentcf/latent_sampling.hpp"
#include "latentcf/metrics.hpp"
#include "latentcf/trainer.hpp"

// After Eigen: <resolv.h>, pulled in by httplib, defines a `_res` macro.
#include <httplib.h>

namespace latentcf {
namespace fs = std::filesystem;
using nlohmann::json;

namespace {

struct HttpError : Error {
  HttpError(int status, const std::string& message) : Error(message), status(status) {}
  int status;
};

std::vector<double> row(const torch::Tensor& t) {
  auto c = t.detach().to(torch::kFloat64).contiguous().flatten();
  return std::vector<double>(c.data_ptr<double>(), c.data_ptr<double>() + c.numel());
}

std::string pngBase64(const torch::Tensor& image) { return base64Encode(encodePng(image)); }

json imagePanel(const torch::Tensor& image, const torch::Tensor& probs) {
  return {{"image", pngBase64(image)}, {"probs", row(probs)}, {"predicted", probs.argmax().item<int64_t>()}};
}

const RegisteredPair& lookup(const PairRegistry& registry, const json& request) {
  if (!request.contains("pair") || !request.at("pair").is_string()) throw HttpError(400, "request needs a 'pair' string");
  const auto key = request.at("pair").get<std::string>();
  const auto* entry = registry.find(key);
  if (!entry) throw HttpError(404, "unknown pair '" + key + "'");
  return *entry;
}

int64_t intField(const json& request, const char* name, int64_t fallback, int64_t lo, int64_t hi) {
  if (!request.contains(name)) return fallback;
  const auto& v = request.at(name);
  if (!v.is_number_integer()) throw HttpError(400, std::string("'") + name + "' must be an integer");
  const auto value = v.get<int64_t>();
  if (value < lo || value > hi) {
    throw HttpError(400, std::string("'") + name + "' must lie in [" + std::to_string(lo) + ", " +
                             std::to_string(hi) + "]");
  }
  return value;
}

struct ResolvedInput {
  torch::Tensor latents;  // set for seed and latent inputs
  torch::Tensor image;    // (1, C, H, W), set for image inputs
};

ResolvedInput resolveInput(const json& request, const CounterfactualEngine& engine) {
  if (!request.contains("input")) throw HttpError(400, "request needs an 'input'");
  const auto& input = request.at("input");
  const auto dim = engine.forward().dim();
  auto fromSeed = [&](int64_t seed) {
    if (seed < 0) throw HttpError(400, "seed must be non-negative");
    return ResolvedInput{sampleLatents(1, dim, static_cast<uint64_t>(seed)).values(), {}};
  };
  if (input.is_string()) {
    const auto text = input.get<std::string>();
    if (text.rfind("sample:", 0) != 0) throw HttpError(400, "string inputs must look like sample:SEED");
    try {
      size_t used = 0;
      const auto seed = std::stoll(text.substr(7), &used);
      if (used != text.size() - 7) throw std::invalid_argument("trailing characters");
      return fromSeed(seed);
    } catch (const std::logic_error&) {
      throw HttpError(400, "malformed seed in '" + text + "'");
    }
  }
  if (!input.is_object()) throw HttpError(400, "'input' must be an object or sample:SEED");
  if (input.contains("seed")) {
    if (!input.at("seed").is_number_integer()) throw HttpError(400, "'seed' must be an integer");
    return fromSeed(input.at("seed").get<int64_t>());
  }
  if (input.contains("latent")) {
    const auto& values = input.at("latent");
    if (!values.is_array() || static_cast<int64_t>(values.size()) != dim) {
      throw HttpError(400, "'latent' must be an array of " + std::to_string(dim) + " numbers");
    }
    std::vector<float> z;
    for (const auto& v : values) {
      if (!v.is_number()) throw HttpError(400, "'latent' entries must be numbers");
      z.push_back(v.get<float>());
    }
    auto t = torch::tensor(z).view({1, dim});
    if (!torch::isfinite(t).all().item<bool>()) throw HttpError(400, "'latent' entries must be finite");
    return {t, {}};
  }
  if (input.contains("image")) {
    if (!input.at("image").is_string()) throw HttpError(400, "'image' must be a base64 PNG string");
    torch::Tensor image;
    try {
      image = decodePng(base64Decode(input.at("image").get<std::string>()));
    } catch (const ArgumentError& e) {
      throw HttpError(400, std::string("malformed image payload: ") + e.what());
    }
    const auto shape = engine.models().generator->imageShape();
    if (image.size(0) == 3 && shape.channels == 1) image = image.mean(0, true);
    if (image.size(0) != shape.channels || image.size(1) != shape.height || image.size(2) != shape.width) {
      throw HttpError(400, "image must be " + std::to_string(shape.channels) + "x" + std::to_string(shape.height) +
                               "x" + std::to_string(shape.width));
    }
    return {{}, image.unsqueeze(0)};
  }
  throw HttpError(400, "'input' needs one of seed, latent or image");
}

CounterfactualEngine withSteps(const CounterfactualEngine& engine, int64_t n) {
  return CounterfactualEngine(engine.models(), engine.forward(), engine.backward(), n);
}

CFResult runQuery(const CounterfactualEngine& engine, const ResolvedInput& input) {
  return input.image.defined() ? engine.fromImages(input.image) : engine.fromLatents(input.latents);
}

std::string readClassifierRole(const fs::path& dir) {
  for (const auto& candidate : {dir / "meta.json", dir.parent_path() / "meta.json"}) {
    std::ifstream in(candidate);
    if (!in) continue;
    try {
      return json::parse(in).value("classifier_role", roles::kClassifier);
    } catch (const json::exception&) {
      throw IoError("malformed " + candidate.string());
    }
  }
  return roles::kClassifier;
}

}  // namespace

json RegisteredPair::toJson() const {
  return {{"key", key},
          {"query", pair.query},
          {"target", pair.target},
          {"classifier", classifierRole},
          {"faulty", faulty},
          {"left_out_class", faulty ? json(leftOutClass) : json(nullptr)},
          {"num_classes", engine->models().classifier->numClasses()},
          {"n", engine->steps()},
          {"latent_dim", engine->forward().dim()},
          {"checkpoint", checkpoint},
          {"weights", config.value("weights", json::object())}};
}

void PairRegistry::add(RegisteredPair entry) {
  if (pairs_.count(entry.key)) throw ConfigurationError("duplicate registry key '" + entry.key + "'");
  auto key = entry.key;
  pairs_.emplace(std::move(key), std::move(entry));
}

const RegisteredPair* PairRegistry::find(const std::string& key) const {
  auto it = pairs_.find(key);
  return it == pairs_.end() ? nullptr : &it->second;
}

std::vector<std::string> PairRegistry::keys() const {
  std::vector<std::string> out;
  for (const auto& [key, _] : pairs_) out.push_back(key);
  return out;
}

void writeCheckpointMeta(const fs::path& checkpointDir, const std::string& classifierRole) {
  fs::create_directories(checkpointDir);
  std::ofstream out(checkpointDir / "meta.json", std::ios::trunc);
  if (!out) throw IoError("cannot write " + (checkpointDir / "meta.json").string());
  out << json{{"classifier_role", classifierRole}}.dump(2) << '\n';
}

std::shared_ptr<const PairRegistry> buildRegistry(const Manifest& manifest, const fs::path& checkpointsDir) {
  if (!fs::is_directory(checkpointsDir)) throw NotFoundError("no checkpoint directory " + checkpointsDir.string());
  std::vector<fs::path> dirs;
  auto consider = [&](const fs::path& d) {
    if (fs::exists(d / "latest")) {
      dirs.push_back(d);
    } else if (fs::exists(d / "state.json") && !fs::exists(d.parent_path() / "latest")) {
      dirs.push_back(d);
    }
  };
  consider(checkpointsDir);
  for (const auto& e : fs::recursive_directory_iterator(checkpointsDir)) {
    if (e.is_directory()) consider(e.path());
  }
  std::sort(dirs.begin(), dirs.end());

  auto registry = std::make_shared<PairRegistry>();
  std::map<std::string, ModelSet> modelsByRole;
  for (const auto& dir : dirs) {
    auto checkpoint = loadLatestCheckpoint(dir);
    const auto role = readClassifierRole(dir);
    if (!modelsByRole.count(role)) modelsByRole[role] = loadModelSet(manifest, role);
    const auto& models = modelsByRole.at(role);
    const auto& attrs = manifest.entry(role).attributes;
    const bool faulty = attrs.value("faulty", false);
    const int64_t leftOut = attrs.value("left_out_class", int64_t{-1});
    const auto n = checkpoint.config.n;

    auto add = [&](const ClassPair& pair, const TransformNetwork& g, const TransformNetwork& h) {
      RegisteredPair entry;
      entry.pair = pair;
      entry.key = pair.key() + (role == roles::kClassifier ? "" : "@" + role);
      if (registry->find(entry.key)) entry.key += "#" + dir.filename().string();
      entry.classifierRole = role;
      entry.faulty = faulty;
      entry.leftOutClass = leftOut;
      entry.checkpoint = dir.filename().string();
      entry.config = checkpoint.config.toJson();
      entry.engine = std::make_shared<CounterfactualEngine>(models, g, h, n);
      registry->add(std::move(entry));
    };
    add(checkpoint.config.pair, checkpoint.forward, checkpoint.backward);
    add(checkpoint.config.pair.reversed(), checkpoint.backward, checkpoint.forward);
  }
  return registry;
}

struct ExplainService::Server {
  httplib::Server http;
};

ExplainService::ExplainService(std::shared_ptr<const PairRegistry> registry, fs::path staticDir)
    : registry_(std::move(registry)), staticDir_(std::move(staticDir)) {
  if (!registry_) throw ConfigurationError("service needs a registry");
}

void ExplainService::swapRegistry(std::shared_ptr<const PairRegistry> registry) {
  if (!registry) throw ConfigurationError("service needs a registry");
  std::lock_guard lock(mutex_);
  registry_ = std::move(registry);
}

std::shared_ptr<const PairRegistry> ExplainService::registry() const {
  std::lock_guard lock(mutex_);
  return registry_;
}

json ExplainService::health() const {
  return {{"schema_version", kServiceSchemaVersion}, {"status", "ok"}, {"pairs", registry()->size()}};
}

json ExplainService::pairs() const {
  auto reg = registry();
  json list = json::array();
  for (const auto& key : reg->keys()) list.push_back(reg->find(key)->toJson());
  return {{"schema_version", kServiceSchemaVersion}, {"pairs", list}};
}

json ExplainService::counterfactual(const json& request) const {
  auto reg = registry();
  const auto& entry = lookup(*reg, request);
  const auto n = intField(request, "n", entry.engine->steps(), 0, kMaxTraversalSteps);
  auto engine = withSteps(*entry.engine, n);
  auto r = runQuery(engine, resolveInput(request, engine));
  const auto target = entry.pair.target;
  json out{{"schema_version", kServiceSchemaVersion},
           {"pair", entry.key},
           {"query_class", entry.pair.query},
           {"target_class", target},
           {"n", n},
           {"query", imagePanel(r.query[0], r.queryProbs[0])},
           {"counterfactual", imagePanel(r.counterfactual[0], r.cfProbs[0])},
           {"mask", pngBase64(r.mask[0].unsqueeze(0))},
           {"valid", r.cfProbs[0].argmax().item<int64_t>() == target},
           {"latents", {{"query", row(r.queryLatent[0])}, {"counterfactual", row(r.cfLatent[0])}}}};
  if (r.hasCycle()) {
    out["cycled"] = imagePanel(r.cycled[0], r.cycledProbs[0]);
    out["latents"]["cycled"] = row(r.cycledLatent[0]);
  }
  return out;
}

json ExplainService::traverse(const json& request) const {
  auto reg = registry();
  const auto& entry = lookup(*reg, request);
  const auto steps = intField(request, "steps", request.value("n", entry.engine->steps()), 1, kMaxTraversalSteps);
  const auto& engine = *entry.engine;
  auto input = resolveInput(request, engine);
  auto latents = input.image.defined() ? engine.latentsFor(input.image) : input.latents;
  auto t = engine.traverse(latents, steps);
  json frames = json::array();
  for (size_t k = 0; k < t.frames.size(); ++k) frames.push_back(imagePanel(t.frames[k][0], t.probs[k][0]));
  return {{"schema_version", kServiceSchemaVersion},
          {"pair", entry.key},
          {"query_class", entry.pair.query},
          {"target_class", entry.pair.target},
          {"steps", steps},
          {"frames", frames}};
}

json ExplainService::transition(const json& request) const {
  auto reg = registry();
  const auto& entry = lookup(*reg, request);
  const auto n = intField(request, "n", entry.engine->steps(), 0, kMaxTraversalSteps);
  auto engine = withSteps(*entry.engine, n);
  const auto shape = engine.models().generator->imageShape();
  const auto T = intField(request, "T", kDefaultTransitionSteps, 1, shape.pixels());
  auto r = runQuery(engine, resolveInput(request, engine));
  auto records = transitionRecords(*engine.models().classifier, r.query, r.counterfactual, r.mask, T,
                                   entry.pair.query, entry.pair.target);
  auto out = records.front().toJson();
  out["schema_version"] = kServiceSchemaVersion;
  out["pair"] = entry.key;
  out["query_class"] = entry.pair.query;
  out["target_class"] = entry.pair.target;
  out["n"] = n;
  return out;
}

HttpResponse ExplainService::handle(const std::string& method, const std::string& path, const std::string& body) const {
  auto error = [](int status, const std::string& message) {
    return HttpResponse{status, "application/json", json{{"error", message}, {"status", status}}.dump()};
  };
  try {
    if (path == "/health" || path == "/pairs") {
      if (method != "GET") return error(405, "use GET for " + path);
      return {200, "application/json", (path == "/health" ? health() : pairs()).dump()};
    }
    if (path == "/counterfactual" || path == "/traverse" || path == "/transition") {
      if (method != "POST") return error(405, "use POST for " + path);
      json request;
      try {
        request = json::parse(body);
      } catch (const json::exception& e) {
        return error(400, std::string("malformed JSON: ") + e.what());
      }
      if (!request.is_object()) return error(400, "request body must be a JSON object");
      json out = path == "/counterfactual" ? counterfactual(request)
                 : path == "/traverse"     ? traverse(request)
                                           : transition(request);
      return {200, "application/json", out.dump()};
    }
    return error(404, "no endpoint " + path);
  } catch (const HttpError& e) {
    return error(e.status, e.what());
  } catch (const ArgumentError& e) {
    return error(400, e.what());
  } catch (const ConfigurationError& e) {
    return error(400, e.what());
  } catch (const NotFoundError& e) {
    return error(404, e.what());
  } catch (const std::exception& e) {
    return error(500, e.what());
  }
}

void ExplainService::serve(const std::string& host, int port) {
  auto server = std::make_shared<Server>();
  {
    std::lock_guard lock(mutex_);
    server_ = server;
  }
  auto forward = [this](const httplib::Request& req, httplib::Response& res) {
    auto out = handle(req.method, req.path, req.body);
    res.status = out.status;
    res.set_content(out.body, out.contentType);
  };
  for (const char* path : {"/health", "/pairs", "/counterfactual", "/traverse", "/transition"}) {
    server->http.Get(path, forward);
    server->http.Post(path, forward);
  }
  if (!staticDir_.empty()) {
    if (!server->http.set_mount_point("/", staticDir_.string())) {
      throw NotFoundError("static directory " + staticDir_.string() + " does not exist");
    }
  }
  if (!server->http.listen(host, port)) throw IoError("cannot listen on " + host + ":" + std::to_string(port));
}

void ExplainService::stop() {
  std::shared_ptr<Server> server;
  {
    std::lock_guard lock(mutex_);
    server = server_;
  }
  if (server) server->http.stop();
}

}  // namespace latentcf
