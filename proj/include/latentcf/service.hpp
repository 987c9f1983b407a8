#pragma once

#include <filesystem>
#include <map>
#include <memory>
#include <mutex>
#include <string>
#include <vector>

#include "json.hpp"
#include "latentcf/inference.hpp"
#include "latentcf/manifest.hpp"

namespace latentcf {

inline constexpr int kServiceSchemaVersion = 1;
inline constexpr int64_t kMaxTraversalSteps = 8;

struct RegisteredPair {
  std::string key;  // "3:8", or "4:9@faulty_classifier_9" for a non-default classifier
  ClassPair pair;
  std::string classifierRole;
  bool faulty = false;
  int64_t leftOutClass = -1;
  std::string checkpoint;  // directory name the transforms were loaded from
  nlohmann::json config;   // training config of the checkpoint
  std::shared_ptr<const CounterfactualEngine> engine;

  nlohmann::json toJson() const;
};

/// Immutable pair -> engine map shared by request handlers.
class PairRegistry {
 public:
  /// Throws ConfigurationError on a duplicate key.
  void add(RegisteredPair entry);
  /// nullptr for an unknown key.
  const RegisteredPair* find(const std::string& key) const;
  std::vector<std::string> keys() const;
  size_t size() const { return pairs_.size(); }

 private:
  std::map<std::string, RegisteredPair> pairs_;
};

/// Registers every trained checkpoint found below `checkpointsDir` (a
/// directory with state.json, or a run directory with a `latest` pointer).
/// Each checkpoint serves "c:c'" through (g, h) and "c':c" through (h, g).
/// Checkpoints are visited in path order; a later checkpoint for a key that
/// is already taken is registered as "<key>#<directory name>".
std::shared_ptr<const PairRegistry> buildRegistry(const Manifest& manifest, const std::filesystem::path& checkpointsDir);

/// Writes the classifier role a checkpoint was trained against next to it,
/// so the service can pick the matching classifier.
void writeCheckpointMeta(const std::filesystem::path& checkpointDir, const std::string& classifierRole);

struct HttpResponse {
  int status = 200;
  std::string contentType = "application/json";
  std::string body;
};

/// Request/response handlers for the explain endpoints. handle() runs without
/// sockets; serve() puts it behind an HTTP listener.
class ExplainService {
 public:
  explicit ExplainService(std::shared_ptr<const PairRegistry> registry, std::filesystem::path staticDir = {});

  HttpResponse handle(const std::string& method, const std::string& path, const std::string& body) const;

  nlohmann::json counterfactual(const nlohmann::json& request) const;
  nlohmann::json traverse(const nlohmann::json& request) const;
  nlohmann::json transition(const nlohmann::json& request) const;
  nlohmann::json pairs() const;
  nlohmann::json health() const;

  /// Atomically replaces the registry; in-flight requests keep the old one.
  void swapRegistry(std::shared_ptr<const PairRegistry> registry);
  std::shared_ptr<const PairRegistry> registry() const;

  /// Blocks serving on host:port until stop() is called.
  void serve(const std::string& host, int port);
  void stop();

 private:
  struct Server;
  mutable std::mutex mutex_;
  std::shared_ptr<const PairRegistry> registry_;
  std::filesystem::path staticDir_;
  std::shared_ptr<Server> server_;
};

}  // namespace latentcf
