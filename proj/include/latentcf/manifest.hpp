#pragma once

#include <filesystem>
#include <map>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "json.hpp"
#include "latentcf/models.hpp"
#include "latentcf/networks.hpp"

namespace latentcf {

/// One pretrained network referenced by a manifest.
struct ManifestEntry {
  std::string kind;  // classifier, generator, discriminator, encoder, autoencoder
  std::filesystem::path path;  // relative to the manifest's directory
  std::vector<int64_t> inputShape;
  int64_t numClasses = 0;
  std::string sha256;
  /// Architecture hyperparameters and recorded measurements (accuracy, ...).
  nlohmann::json attributes = nlohmann::json::object();

  nlohmann::json toJson() const;
  static ManifestEntry fromJson(const nlohmann::json& j);
};

/// Maps roles ("classifier", "generator", "ae_class_3", ...) to checkpoints.
/// Stored as JSON; entry paths resolve against the manifest's directory.
class Manifest {
 public:
  Manifest() = default;
  Manifest(std::string dataset, uint64_t seed, std::filesystem::path dir);

  static Manifest load(const std::filesystem::path& file);
  /// Writes `dir()/manifest.json`.
  void save() const;

  bool has(const std::string& role) const { return entries_.count(role) != 0; }
  /// Throws ConfigurationError for an unknown role.
  const ManifestEntry& entry(const std::string& role) const;
  void set(const std::string& role, ManifestEntry entry);
  void erase(const std::string& role) { entries_.erase(role); }
  std::vector<std::string> roles() const;

  std::filesystem::path resolve(const std::string& role) const;
  /// Recomputes a role's file checksum and compares it with the recorded one.
  void verify(const std::string& role) const;

  const std::string& dataset() const { return dataset_; }
  uint64_t seed() const { return seed_; }
  const std::filesystem::path& dir() const { return dir_; }
  std::filesystem::path file() const { return dir_ / "manifest.json"; }
  nlohmann::json& settings() { return settings_; }
  const nlohmann::json& settings() const { return settings_; }

  nlohmann::json toJson() const;
  /// SHA-256 of the canonical JSON form (paths are relative, so the hash does
  /// not depend on where the directory lives).
  std::string hash() const;

 private:
  std::string dataset_;
  uint64_t seed_ = 0;
  std::filesystem::path dir_;
  nlohmann::json settings_ = nlohmann::json::object();
  std::map<std::string, ManifestEntry> entries_;
};

/// Role names used by the backbone preparation.
namespace roles {
inline const std::string kClassifier = "classifier";
inline const std::string kGenerator = "generator";
inline const std::string kDiscriminator = "discriminator";
inline const std::string kEncoder = "encoder";
inline const std::string kAutoencoderFull = "ae_full";
std::string autoencoderForClass(int64_t classId);
std::string faultyClassifier(int64_t leftOutClass);
}  // namespace roles

std::shared_ptr<TorchClassifier> loadClassifier(const Manifest& manifest, const std::string& role = roles::kClassifier);
std::shared_ptr<TorchGenerator> loadGenerator(const Manifest& manifest);
std::shared_ptr<TorchDiscriminator> loadDiscriminator(const Manifest& manifest, bool trainable = false);
std::shared_ptr<TorchEncoder> loadEncoder(const Manifest& manifest);
std::shared_ptr<TorchAutoencoder> loadAutoencoder(const Manifest& manifest, const std::string& role);

/// Generator, encoder (when present), classifier under `classifierRole` and
/// the discriminator, with the default perceptual layers.
ModelSet loadModelSet(const Manifest& manifest, const std::string& classifierRole = roles::kClassifier,
                      bool trainableDiscriminator = false);

/// The last two convolutional feature maps of the classifier.
std::vector<std::string> defaultPerceptualLayers();

/// Writes a module in the native libtorch format and returns a manifest
/// entry whose checksum matches the written file.
ManifestEntry saveModule(const torch::nn::Module& module, const std::filesystem::path& dir, const std::string& fileName,
                         std::string kind);
/// Reads weights written by saveModule() into an already constructed module.
void loadModule(torch::nn::Module& module, const std::filesystem::path& path);

}  // namespace latentcf
