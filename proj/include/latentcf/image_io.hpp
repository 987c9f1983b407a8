#pragma once

#include <torch/torch.h>

#include <filesystem>
#include <string>
#include <vector>

namespace latentcf {

/// Encodes one (C, H, W) image with values in [0, 1] (C = 1 or 3) as an 8-bit PNG.
std::string encodePng(const torch::Tensor& image);
/// Decodes PNG bytes into a float (C, H, W) tensor in [0, 1]. Gray and RGB
/// inputs keep their channel count; alpha is dropped. Throws ArgumentError.
torch::Tensor decodePng(const std::string& bytes);

void writePng(const std::filesystem::path& path, const torch::Tensor& image);
torch::Tensor readPng(const std::filesystem::path& path);

/// Quantizes to the 8-bit grid a PNG round trip would produce.
torch::Tensor quantize8(const torch::Tensor& image);

/// Tiles rows of equally shaped (C, H, W) images into one image; every row
/// must have the same number of columns. `pad` pixels of value 1 separate cells.
torch::Tensor tileGrid(const std::vector<std::vector<torch::Tensor>>& rows, int64_t pad = 1);

}  // namespace latentcf
