#include "latentcf/manifest.hpp"

#include <fstream>
#include <sstream>

#include "latentcf/errors.hpp"
#include "latentcf/hashing.hpp"

namespace latentcf {
namespace fs = std::filesystem;
using nlohmann::json;

namespace {

constexpr int kManifestVersion = 1;

ImageShape shapeOf(const ManifestEntry& e) {
  if (e.inputShape.size() != 3) throw ConfigurationError("manifest entry needs a (C, H, W) input shape");
  return {e.inputShape[0], e.inputShape[1], e.inputShape[2]};
}

int64_t attribute(const ManifestEntry& e, const char* name) {
  if (!e.attributes.contains(name)) throw ConfigurationError(std::string("manifest entry lacks '") + name + "'");
  return e.attributes.at(name).get<int64_t>();
}

}  // namespace

json ManifestEntry::toJson() const {
  return {{"kind", kind},
          {"path", path.generic_string()},
          {"input_shape", inputShape},
          {"num_classes", numClasses},
          {"sha256", sha256},
          {"attributes", attributes}};
}

ManifestEntry ManifestEntry::fromJson(const json& j) {
  ManifestEntry e;
  e.kind = j.at("kind").get<std::string>();
  e.path = j.at("path").get<std::string>();
  e.inputShape = j.value("input_shape", std::vector<int64_t>{});
  e.numClasses = j.value("num_classes", int64_t{0});
  e.sha256 = j.value("sha256", "");
  e.attributes = j.value("attributes", json::object());
  return e;
}

Manifest::Manifest(std::string dataset, uint64_t seed, fs::path dir)
    : dataset_(std::move(dataset)), seed_(seed), dir_(std::move(dir)) {}

Manifest Manifest::load(const fs::path& file) {
  std::ifstream in(file);
  if (!in) throw NotFoundError("cannot open manifest " + file.string());
  json j;
  try {
    in >> j;
  } catch (const json::exception& e) {
    throw IoError("malformed manifest " + file.string() + ": " + e.what());
  }
  if (j.value("version", 0) != kManifestVersion) throw IoError("unsupported manifest version in " + file.string());
  Manifest m(j.at("dataset").get<std::string>(), j.at("seed").get<uint64_t>(), file.parent_path());
  m.settings_ = j.value("settings", json::object());
  for (const auto& [role, entry] : j.at("roles").items()) m.entries_[role] = ManifestEntry::fromJson(entry);
  return m;
}

void Manifest::save() const {
  fs::create_directories(dir_);
  const auto tmp = dir_ / "manifest.json.tmp";
  {
    std::ofstream out(tmp, std::ios::trunc);
    if (!out) throw IoError("cannot write " + tmp.string());
    out << toJson().dump(2) << '\n';
    if (!out) throw IoError("failed writing " + tmp.string());
  }
  fs::rename(tmp, file());
}

const ManifestEntry& Manifest::entry(const std::string& role) const {
  auto it = entries_.find(role);
  if (it == entries_.end()) throw ConfigurationError("manifest has no role '" + role + "'");
  return it->second;
}

void Manifest::set(const std::string& role, ManifestEntry entry) { entries_[role] = std::move(entry); }

std::vector<std::string> Manifest::roles() const {
  std::vector<std::string> out;
  for (const auto& [role, _] : entries_) out.push_back(role);
  return out;
}

fs::path Manifest::resolve(const std::string& role) const {
  const auto& p = entry(role).path;
  return p.is_absolute() ? p : dir_ / p;
}

void Manifest::verify(const std::string& role) const {
  const auto& e = entry(role);
  const auto path = resolve(role);
  if (!fs::exists(path)) throw NotFoundError("checkpoint for role '" + role + "' missing: " + path.string());
  if (!e.sha256.empty() && sha256File(path) != e.sha256) {
    throw IoError("checksum mismatch for role '" + role + "' (" + path.string() + ")");
  }
}

json Manifest::toJson() const {
  json rolesJson = json::object();
  for (const auto& [role, e] : entries_) rolesJson[role] = e.toJson();
  return {{"version", kManifestVersion}, {"dataset", dataset_}, {"seed", seed_}, {"settings", settings_},
          {"roles", rolesJson}};
}

std::string Manifest::hash() const { return sha256Hex(toJson().dump()); }

namespace roles {
std::string autoencoderForClass(int64_t classId) { return "ae_class_" + std::to_string(classId); }
std::string faultyClassifier(int64_t leftOutClass) { return "faulty_classifier_" + std::to_string(leftOutClass); }
}  // namespace roles

ManifestEntry saveModule(const torch::nn::Module& module, const fs::path& dir, const std::string& fileName,
                         std::string kind) {
  fs::create_directories(dir);
  const auto path = dir / fileName;
  torch::serialize::OutputArchive archive;
  module.save(archive);
  archive.save_to(path.string());
  ManifestEntry e;
  e.kind = std::move(kind);
  e.path = fileName;
  e.sha256 = sha256File(path);
  return e;
}

void loadModule(torch::nn::Module& module, const fs::path& path) {
  if (!fs::exists(path)) throw NotFoundError("missing checkpoint " + path.string());
  torch::serialize::InputArchive archive;
  try {
    archive.load_from(path.string());
    module.load(archive);
  } catch (const c10::Error& e) {
    throw IoError("cannot load " + path.string() + ": " + e.what_without_backtrace());
  }
}

std::shared_ptr<TorchClassifier> loadClassifier(const Manifest& manifest, const std::string& role) {
  manifest.verify(role);
  const auto& e = manifest.entry(role);
  if (e.kind != "classifier") throw ConfigurationError("role '" + role + "' is not a classifier");
  ClassifierNet net(e.numClasses, attribute(e, "hidden"));
  loadModule(*net, manifest.resolve(role));
  return std::make_shared<TorchClassifier>(net, e.numClasses);
}

std::shared_ptr<TorchGenerator> loadGenerator(const Manifest& manifest) {
  manifest.verify(roles::kGenerator);
  const auto& e = manifest.entry(roles::kGenerator);
  const auto dim = attribute(e, "latent_dim");
  GeneratorNet net(dim, attribute(e, "width"));
  loadModule(*net, manifest.resolve(roles::kGenerator));
  return std::make_shared<TorchGenerator>(net, dim, shapeOf(e));
}

std::shared_ptr<TorchDiscriminator> loadDiscriminator(const Manifest& manifest, bool trainable) {
  manifest.verify(roles::kDiscriminator);
  const auto& e = manifest.entry(roles::kDiscriminator);
  DiscriminatorNet net(attribute(e, "width"));
  loadModule(*net, manifest.resolve(roles::kDiscriminator));
  return std::make_shared<TorchDiscriminator>(net, trainable);
}

std::shared_ptr<TorchEncoder> loadEncoder(const Manifest& manifest) {
  manifest.verify(roles::kEncoder);
  const auto& e = manifest.entry(roles::kEncoder);
  const auto dim = attribute(e, "latent_dim");
  EncoderNet net(dim, attribute(e, "width"));
  loadModule(*net, manifest.resolve(roles::kEncoder));
  return std::make_shared<TorchEncoder>(net, dim);
}

std::shared_ptr<TorchAutoencoder> loadAutoencoder(const Manifest& manifest, const std::string& role) {
  manifest.verify(role);
  const auto& e = manifest.entry(role);
  if (e.kind != "autoencoder") throw ConfigurationError("role '" + role + "' is not an autoencoder");
  AutoencoderNet net(shapeOf(e).numel(), attribute(e, "hidden"), attribute(e, "code"));
  loadModule(*net, manifest.resolve(role));
  return std::make_shared<TorchAutoencoder>(net);
}

std::vector<std::string> defaultPerceptualLayers() { return {"conv1", "conv2"}; }

ModelSet loadModelSet(const Manifest& manifest, const std::string& classifierRole, bool trainableDiscriminator) {
  ModelSet m;
  m.generator = loadGenerator(manifest);
  if (manifest.has(roles::kEncoder)) m.encoder = loadEncoder(manifest);
  m.classifier = loadClassifier(manifest, classifierRole);
  m.discriminator = loadDiscriminator(manifest, trainableDiscriminator);
  m.perceptualLayers = defaultPerceptualLayers();
  m.validate();
  return m;
}

}  // namespace latentcf
