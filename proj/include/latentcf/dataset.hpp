#pragma once

#include <torch/torch.h>

#include <filesystem>
#include <map>
#include <string>
#include <vector>

namespace latentcf {

/// Root of the dataset/model cache: $LATENTCF_CACHE, else ~/.cache/latentcf.
std::filesystem::path cacheRoot();

struct Dataset {
  std::string id;
  torch::Tensor images;  // (N, 1, H, W) float32 in [0, 1]
  torch::Tensor labels;  // (N) int64
  int64_t numClasses = 10;

  int64_t size() const { return images.size(0); }
  torch::Tensor ofClass(int64_t classId) const;
  std::map<int64_t, torch::Tensor> byClass() const;
  /// Keeps the samples whose label is not `classId`.
  Dataset without(int64_t classId) const;
};

struct DatasetSplits {
  Dataset train;
  Dataset test;
};

/// File names in a dataset directory, in checksum-file order.
const std::vector<std::string>& idxFileNames();

/// Reads an uncompressed IDX image file (magic 0x00000803) into (N, 1, H, W).
torch::Tensor readIdxImages(const std::filesystem::path& path);
/// Reads an uncompressed IDX label file (magic 0x00000801).
torch::Tensor readIdxLabels(const std::filesystem::path& path);

/// Known dataset ids ("mnist", "fashion-mnist").
const std::vector<std::string>& datasetIds();

/// Loads `root/<id>/` after verifying every IDX file's SHA-256. MNIST
/// checksums are built in; other datasets need a SHA256SUMS file next to the
/// data. Throws NotFoundError for missing files and IoError on a checksum
/// mismatch.
DatasetSplits loadDataset(const std::string& id, const std::filesystem::path& root = cacheRoot());

/// Default class pairs for a dataset id.
std::vector<std::pair<int64_t, int64_t>> defaultPairs(const std::string& id);

}  // namespace latentcf
