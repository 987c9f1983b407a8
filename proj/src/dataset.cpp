#include "latentcf/dataset.hpp"

#include <algorithm>
#include <cstdlib>
#include <fstream>
#include <sstream>

#include "latentcf/errors.hpp"
#include "latentcf/hashing.hpp"

namespace latentcf {
namespace fs = std::filesystem;
namespace {

const std::map<std::string, std::string>& mnistChecksums() {
  static const std::map<std::string, std::string> sums{
      {"train-images-idx3-ubyte", "ba891046e6505d7aadcbbe25680a0738ad16aec93bde7f9b65e87a2fc25776db"},
      {"train-labels-idx1-ubyte", "65a50cbbf4e906d70832878ad85ccda5333a97f0f4c3dd2ef09a8a9eef7101c5"},
      {"t10k-images-idx3-ubyte", "0fa7898d509279e482958e8ce81c8e77db3f2f8254e26661ceb7762c4d494ce7"},
      {"t10k-labels-idx1-ubyte", "ff7bcfd416de33731a308c3f266cc351222c34898ecbeaf847f06e48f7ec33f2"}};
  return sums;
}

std::map<std::string, std::string> readChecksumFile(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw NotFoundError("missing checksum file " + path.string());
  std::map<std::string, std::string> sums;
  std::string line;
  while (std::getline(in, line)) {
    std::istringstream fields(line);
    std::string digest, name;
    if (!(fields >> digest >> name)) continue;
    if (!name.empty() && name.front() == '*') name.erase(0, 1);
    std::transform(digest.begin(), digest.end(), digest.begin(), ::tolower);
    sums[name] = digest;
  }
  return sums;
}

uint32_t readBigEndian(std::istream& in) {
  unsigned char b[4];
  in.read(reinterpret_cast<char*>(b), 4);
  if (!in) throw IoError("truncated IDX header");
  return (uint32_t{b[0]} << 24) | (uint32_t{b[1]} << 16) | (uint32_t{b[2]} << 8) | uint32_t{b[3]};
}

torch::Tensor readBytes(std::istream& in, int64_t count, const fs::path& path) {
  auto t = torch::empty({count}, torch::kUInt8);
  in.read(reinterpret_cast<char*>(t.data_ptr<uint8_t>()), count);
  if (!in) throw IoError("truncated IDX payload in " + path.string());
  return t;
}

}  // namespace

fs::path cacheRoot() {
  if (const char* env = std::getenv("LATENTCF_CACHE"); env && *env) return fs::path(env);
  const char* home = std::getenv("HOME");
  return fs::path(home && *home ? home : ".") / ".cache" / "latentcf";
}

torch::Tensor Dataset::ofClass(int64_t classId) const {
  return images.index_select(0, labels.eq(classId).nonzero().flatten());
}

std::map<int64_t, torch::Tensor> Dataset::byClass() const {
  std::map<int64_t, torch::Tensor> out;
  for (int64_t c = 0; c < numClasses; ++c) out[c] = ofClass(c);
  return out;
}

Dataset Dataset::without(int64_t classId) const {
  auto keep = labels.ne(classId).nonzero().flatten();
  return {id, images.index_select(0, keep), labels.index_select(0, keep), numClasses};
}

const std::vector<std::string>& idxFileNames() {
  static const std::vector<std::string> names{"train-images-idx3-ubyte", "train-labels-idx1-ubyte",
                                              "t10k-images-idx3-ubyte", "t10k-labels-idx1-ubyte"};
  return names;
}

torch::Tensor readIdxImages(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw NotFoundError("cannot open " + path.string());
  if (readBigEndian(in) != 0x00000803) throw IoError(path.string() + " is not an IDX image file");
  const int64_t n = readBigEndian(in), h = readBigEndian(in), w = readBigEndian(in);
  auto bytes = readBytes(in, n * h * w, path);
  return bytes.to(torch::kFloat32).div_(255.0).view({n, 1, h, w});
}

torch::Tensor readIdxLabels(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw NotFoundError("cannot open " + path.string());
  if (readBigEndian(in) != 0x00000801) throw IoError(path.string() + " is not an IDX label file");
  const int64_t n = readBigEndian(in);
  return readBytes(in, n, path).to(torch::kLong);
}

const std::vector<std::string>& datasetIds() {
  static const std::vector<std::string> ids{"mnist", "fashion-mnist"};
  return ids;
}

DatasetSplits loadDataset(const std::string& id, const fs::path& root) {
  if (std::find(datasetIds().begin(), datasetIds().end(), id) == datasetIds().end()) {
    throw ArgumentError("unknown dataset '" + id + "'");
  }
  const auto dir = root / id;
  const auto sums = id == "mnist" ? mnistChecksums() : readChecksumFile(dir / "SHA256SUMS");
  for (const auto& name : idxFileNames()) {
    const auto path = dir / name;
    if (!fs::exists(path)) throw NotFoundError("missing dataset file " + path.string());
    auto it = sums.find(name);
    if (it == sums.end()) throw IoError("no checksum recorded for " + name);
    if (sha256File(path) != it->second) throw IoError("checksum mismatch for " + path.string());
  }
  DatasetSplits s;
  s.train = {id, readIdxImages(dir / "train-images-idx3-ubyte"), readIdxLabels(dir / "train-labels-idx1-ubyte"), 10};
  s.test = {id, readIdxImages(dir / "t10k-images-idx3-ubyte"), readIdxLabels(dir / "t10k-labels-idx1-ubyte"), 10};
  for (const auto* split : {&s.train, &s.test}) {
    if (split->images.size(0) != split->labels.size(0)) throw IoError("image and label counts differ in " + id);
  }
  return s;
}

std::vector<std::pair<int64_t, int64_t>> defaultPairs(const std::string& id) {
  if (id == "fashion-mnist") return {{4, 6}, {0, 2}, {7, 9}};
  return {{3, 8}, {4, 9}, {5, 6}};
}

}  // namespace latentcf
